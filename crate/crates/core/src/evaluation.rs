//! Density ranking by stochastic reconstruction, proxy metrics, and the SPN
//! and conditioning ablations.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffae::{diffae_decode, diffae_encode, encode_semantic, make_conditioning_plan};
use crate::diffusion::{SamplerKind, TimestepSubsequence};
use crate::embedders::perceptual_distance;
pub use crate::embedders::{id_similarity_proxy, structure_distance_proxy};
use crate::error::{Error, Result};
use crate::finetune::Finetuned;
use crate::pretrain::BaseModel;
use crate::sampler::{structural_latent, stylize_with_plan, StylizeOptions};
use crate::tensor::Tensor;

/// The SPN ablation needs at least this many inputs.
pub const MIN_ABLATION_INPUTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructOptions {
    pub sampler: SamplerKind,
    /// DDIM stride count; DDPM always walks every step.
    pub steps: usize,
    /// Stochastic reconstructions averaged per image.
    pub repeats: usize,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddpm,
            steps: 20,
            repeats: 1,
        }
    }
}

impl ReconstructOptions {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if self.steps == 0 || self.steps > total_steps {
            return Err(Error::Config(format!("steps = {} must lie in 1..={total_steps}", self.steps)));
        }
        Ok(())
    }
}

/// `Enc(image)` plus a fresh `x_T ~ N(0, I)` drawn from `seed`, decoded with `eps_A`.
pub fn stochastic_reconstruct(base: &BaseModel, image: &Tensor, seed: u64) -> Result<Tensor> {
    stochastic_reconstruct_with(base, image, seed, &ReconstructOptions::default())
}

pub fn stochastic_reconstruct_with(
    base: &BaseModel,
    image: &Tensor,
    seed: u64,
    opts: &ReconstructOptions,
) -> Result<Tensor> {
    let z = encode_semantic(&base.encoder, image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_t = Tensor::randn(image.shape(), &mut rng);
    base.generate(&z, &x_t, opts.sampler, opts.steps, seed ^ 0x5EED)
}

/// Reconstruction through the encoded `x_T` instead of a sampled one.
pub fn full_reconstruct(base: &BaseModel, image: &Tensor, steps: usize) -> Result<Tensor> {
    let z = encode_semantic(&base.encoder, image)?;
    let seq = TimestepSubsequence::strided(base.schedule.total_steps(), steps)?;
    let x_t = diffae_encode(&base.eps_a, image, &z, &seq, &base.schedule)?;
    diffae_decode(&base.eps_a, &x_t, &z, &seq, &base.schedule)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityBucket {
    LowDensity,
    HighDensity,
    Middle,
}

impl DensityBucket {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::LowDensity => "low_density",
            Self::HighDensity => "high_density",
            Self::Middle => "middle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub image_id: String,
    pub perceptual_score: f64,
    /// 0 is the worst-reconstructed image.
    pub rank: usize,
    pub bucket: DensityBucket,
}

fn image_seed(seed: u64, index: usize, repeat: usize) -> u64 {
    seed.wrapping_mul(0xA24B_AED4_963E_E407) ^ ((index as u64) << 16) ^ repeat as u64
}

/// Mean perceptual distance between `image` and its stochastic reconstructions.
/// `index` keys the per-image seeds so the score does not depend on corpus order
/// beyond the image's own position.
pub fn density_score(base: &BaseModel, image: &Tensor, index: usize, seed: u64, opts: &ReconstructOptions) -> Result<f64> {
    let mut total = 0.0;
    for r in 0..opts.repeats {
        let recon = stochastic_reconstruct_with(base, image, image_seed(seed, index, r), opts)?;
        total += perceptual_distance(&base.backend, image, &recon)?;
    }
    Ok(total / opts.repeats as f64)
}

/// Scores every image, sorts by score descending and buckets the top `k` as
/// low density and the bottom `k` as high density. Records come back in rank
/// order; equal scores keep corpus order.
pub fn density_rank(
    base: &BaseModel,
    corpus: &[(String, Tensor)],
    k: usize,
    seed: u64,
    opts: &ReconstructOptions,
) -> Result<Vec<DensityRecord>> {
    opts.validate(base.schedule.total_steps())?;
    if k == 0 || corpus.len() < 2 * k {
        return Err(Error::Parameter(format!(
            "corpus of {} images cannot fill two buckets of k = {k}",
            corpus.len()
        )));
    }
    let scores = corpus
        .iter()
        .enumerate()
        .map(|(i, (_, img))| density_score(base, img, i, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_scores(corpus.iter().map(|(id, _)| id.clone()).zip(scores).collect(), k))
}

/// Ranking and bucketing of precomputed scores.
pub fn rank_scores(scored: Vec<(String, f64)>, k: usize) -> Vec<DensityRecord> {
    let n = scored.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| DensityRecord {
            image_id: scored[i].0.clone(),
            perceptual_score: scored[i].1,
            rank,
            bucket: if rank < k {
                DensityBucket::LowDensity
            } else if rank >= n - k {
                DensityBucket::HighDensity
            } else {
                DensityBucket::Middle
            },
        })
        .collect()
}

/// Tab-separated `image_id, score, rank, bucket` with a header line.
pub fn density_report(records: &[DensityRecord]) -> String {
    let mut out = String::from("image_id\tscore\trank\tbucket\n");
    for r in records {
        let _ = writeln!(out, "{}\t{:.6}\t{}\t{}", r.image_id, r.perceptual_score, r.rank, r.bucket.as_str());
    }
    out
}

/// Probability that a random positive scores above a random negative, ties
/// counted as one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Parameter("scores and labels differ in length".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate("AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub mean_structure: f64,
    pub mean_id: f64,
}

/// Stylized outputs of every input under `opts`, with the standard or the
/// swapped conditioning plan.
pub fn stylize_all(model: &Finetuned, inputs: &[Tensor], opts: &StylizeOptions, swapped: bool) -> Result<Vec<Tensor>> {
    let z_style = encode_semantic(&model.base.encoder, &model.pair.style_b)?;
    inputs
        .iter()
        .map(|input| {
            let z_in = encode_semantic(&model.base.encoder, input)?;
            let mut plan = make_conditioning_plan(&z_in, &z_style, opts.f_ch, &model.eps_b)?;
            if swapped {
                plan = plan.swapped();
            }
            let x_t0 = structural_latent(&model.base, input, opts)?;
            stylize_with_plan(&model.base, &model.eps_b, &model.spn, input, &x_t0, &plan, opts)
        })
        .collect()
}

/// Mean structure and identity proxies between inputs and outputs.
pub fn proxy_means(base: &BaseModel, inputs: &[Tensor], outputs: &[Tensor]) -> Result<(f64, f64)> {
    if inputs.is_empty() || inputs.len() != outputs.len() {
        return Err(Error::Parameter("inputs and outputs must pair up".into()));
    }
    let (mut s, mut id) = (0.0, 0.0);
    for (a, b) in inputs.iter().zip(outputs) {
        s += structure_distance_proxy(&base.backend, a, b)?;
        id += id_similarity_proxy(&base.backend, a, b)?;
    }
    let n = inputs.len() as f64;
    Ok((s / n, id / n))
}

/// One row per `(lambda, model)`: the model stylizes every input with
/// `lambda_spn = lambda`.
pub fn run_spn_ablation(runs: &[(f64, &Finetuned)], inputs: &[Tensor], opts: &StylizeOptions) -> Result<Vec<AblationRow>> {
    if inputs.len() < MIN_ABLATION_INPUTS {
        return Err(Error::Parameter(format!(
            "the ablation needs at least {MIN_ABLATION_INPUTS} inputs, got {}",
            inputs.len()
        )));
    }
    runs.iter()
        .map(|&(lambda, model)| {
            let opts = StylizeOptions {
                lambda_spn: lambda,
                ..opts.clone()
            };
            let outputs = stylize_all(model, inputs, &opts, false)?;
            let (mean_structure, mean_id) = proxy_means(&model.base, inputs, &outputs)?;
            Ok(AblationRow {
                lambda,
                mean_structure,
                mean_id,
            })
        })
        .collect()
}

/// Tab-separated `lambda, mean_structure, mean_id`. ArtFID is not computed.
pub fn ablation_report(rows: &[AblationRow]) -> String {
    let mut out = String::from("# artfid omitted: it needs pretrained inception and style classifiers\n");
    out.push_str("lambda\tmean_structure\tmean_id\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}", r.lambda, r.mean_structure, r.mean_id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes_and_ties() {
        let labels = [true, false, true, false];
        assert_eq!(auc(&[4.0, 1.0, 3.0, 2.0], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 4.0, 2.0, 3.0], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[1.0; 4], &labels).unwrap(), 0.5);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn ranking_buckets() {
        let scored: Vec<(String, f64)> = [0.3, 0.9, 0.1, 0.5, 0.5, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &s)| (format!("img{i}"), s))
            .collect();
        let recs = rank_scores(scored, 2);
        let ids: Vec<&str> = recs.iter().map(|r| r.image_id.as_str()).collect();
        assert_eq!(ids, ["img1", "img3", "img4", "img0", "img5", "img2"]);
        let buckets: Vec<_> = recs.iter().map(|r| r.bucket).collect();
        use DensityBucket::*;
        assert_eq!(buckets, [LowDensity, LowDensity, Middle, Middle, HighDensity, HighDensity]);
        let report = density_report(&recs);
        assert_eq!(report.lines().count(), 7);
        assert!(report.lines().nth(1).unwrap().starts_with("img1\t0.900000\t0\tlow_density"));
    }

    #[test]
    fn half_k_buckets_everything() {
        let scored = (0..6).map(|i| (i.to_string(), i as f64)).collect();
        assert!(rank_scores(scored, 3).iter().all(|r| r.bucket != DensityBucket::Middle));
    }
}
