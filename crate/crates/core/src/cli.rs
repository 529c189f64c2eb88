//! Command-line front end. Every command reads an optional run config, applies
//! flag overrides, validates, then writes its outputs atomically into `--out`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{AblationRun, ImageSet, RunConfig, StyleSource};
use crate::data::{artifact_corpus, face_corpus, Face, PosterStyle};
use crate::diffae::SplitPoint;
use crate::error::{Error, Result};
use crate::evaluation::{ablation_report, auc, density_rank, density_report, run_spn_ablation};
use crate::finetune::{finetune_with_pair, prepare_style_pair, Finetuned};
use crate::image_io::{read_png, write_atomic, write_png};
use crate::pretrain::{pretrain_with_progress, BaseModel};
use crate::sampler::{optimize_semantic_for_text, stylize, stylize_with_latent};
use crate::tensor::Tensor;

#[derive(Debug, Parser)]
#[command(name = "diffstyle", version, about = "One-shot structure-preserving stylization on toy faces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base diffusion autoencoder and the toy embedding backend.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate photorealistic candidates for a style image and keep the closest.
    PrepareStyle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        style_image: Option<PathBuf>,
        #[arg(long)]
        candidates: Option<usize>,
    },
    /// Finetune the domain-B denoiser and the SPN on one style image.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        style_image: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        lambda_spn: Option<f64>,
    },
    /// Stylize an input image with a finetuned checkpoint.
    Stylize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Text-driven edit of the input latent, then stylization.
    TextEdit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: Option<String>,
        /// Re-encode the structural latent with the optimized semantic latent.
        #[arg(long)]
        recompute_x_t0: bool,
    },
    /// Rank a corpus by stochastic-reconstruction error.
    DensityRank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Directory of PNG images; a generated artifact corpus otherwise.
        #[arg(long)]
        corpus_dir: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// SPN ablation table over finetuned checkpoints.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `LAMBDA=CHECKPOINT`, repeatable.
        #[arg(long = "run", value_parser = parse_run)]
        runs: Vec<AblationRun>,
        #[arg(long)]
        inputs_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Inference {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Split resolution, `0` (all input) or `inf` (all style).
    #[arg(long, value_parser = parse_split)]
    pub f_ch: Option<SplitPoint>,
    #[arg(long)]
    pub lambda_spn: Option<f64>,
    #[arg(long)]
    pub t0: Option<usize>,
}

fn parse_split(s: &str) -> std::result::Result<SplitPoint, String> {
    SplitPoint::parse(s).map_err(|e| e.to_string())
}

fn parse_run(s: &str) -> std::result::Result<AblationRun, String> {
    let (l, p) = s.split_once('=').ok_or("expected LAMBDA=CHECKPOINT")?;
    Ok(AblationRun {
        lambda: l.trim().parse().map_err(|_| format!("bad lambda {l:?}"))?,
        checkpoint: PathBuf::from(p),
    })
}

/// Files written by a command, and the human-readable summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Output {
    dir: PathBuf,
    outcome: Outcome,
}

impl Output {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            outcome: Outcome::default(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.outcome.files.push(p.clone());
        p
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_atomic(&p, text.as_bytes())
    }

    fn png(&mut self, name: &str, image: &Tensor) -> Result<()> {
        let p = self.path(name);
        write_png(&p, image)
    }

    fn checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let p = self.path(name);
        ck.save(&p)
    }

    fn finish(mut self, cfg: &RunConfig, summary: String) -> Result<Outcome> {
        self.text("config.toml", &cfg.to_toml()?)?;
        self.text("summary.txt", &summary)?;
        self.outcome.summary = summary;
        Ok(self.outcome)
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{what} is required (config file or flag)")))
}

fn load_base(path: &Path) -> Result<BaseModel> {
    let ck = Checkpoint::load(path)?;
    if ck.meta("kind")? == "finetuned" {
        return Ok(Finetuned::from_checkpoint(&ck)?.base);
    }
    BaseModel::from_checkpoint(&ck)
}

fn load_finetuned(path: &Path) -> Result<Finetuned> {
    Finetuned::from_checkpoint(&Checkpoint::load(path)?)
}

/// The toy style image: the poster filter over a face drawn from `seed`.
pub fn toy_style_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PosterStyle::default().apply(&Face::sample(&mut rng).render())
}

fn style_image(src: &StyleSource) -> Result<Tensor> {
    match &src.image {
        Some(p) => read_png(p),
        None => Ok(toy_style_image(src.seed)),
    }
}

fn read_dir_pngs(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    paths
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_png(&p)?))
        })
        .collect()
}

fn image_set(set: &ImageSet) -> Result<Vec<Tensor>> {
    match &set.dir {
        Some(dir) => Ok(read_dir_pngs(dir)?.into_iter().map(|(_, t)| t).collect()),
        None => Ok(face_corpus(set.generate, &mut ChaCha8Rng::seed_from_u64(set.seed))),
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain { common, steps } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            cfg.pretrain.validate()?;
            let mut out = Output::new(dir)?;
            let every = (cfg.pretrain.steps / 20).max(1);
            let res = pretrain_with_progress(&cfg.pretrain, &mut |step, loss| {
                if (step + 1) % every == 0 {
                    eprintln!("pretrain step {:>6}  loss {loss:.5}", step + 1);
                }
            })?;
            let mut log = String::from("step\tloss\n");
            for (i, l) in res.losses.iter().enumerate() {
                let _ = writeln!(log, "{}\t{l:.6}", i + 1);
            }
            let ck = res.model.to_checkpoint()?;
            out.checkpoint("base.ckpt", &ck)?;
            out.text("metrics.tsv", &log)?;
            let (head, tail) = head_tail(&res.losses);
            let summary = format!(
                "pretrained {} steps\nloss first 10%: {head:.5}\nloss last 10%: {tail:.5}\ncheckpoint sha256: {}\n",
                res.losses.len(),
                ck.digest()
            );
            out.finish(&cfg, summary)
        }
        Command::PrepareStyle {
            common,
            base,
            style_image: img,
            candidates,
        } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let ps = &mut cfg.prepare_style;
            ps.base = base.or(ps.base.take());
            ps.style.image = img.or(ps.style.image.take());
            if let Some(c) = candidates {
                ps.candidates = c;
            }
            let base = load_base(required(&ps.base, "prepare_style.base")?)?;
            let style_b = style_image(&ps.style)?;
            let pair = prepare_style_pair(&base, &style_b, ps.t0, ps.candidates, ps.seed)?;
            let mut out = Output::new(dir)?;
            out.png("style_b.png", &pair.style_b)?;
            out.png("style_a.png", &pair.style_a)?;
            let mut tsv = String::from("candidate\tscore\tselected\n");
            let best = pair.candidate_scores.iter().position(|&s| s == pair.selection_score);
            for (i, s) in pair.candidate_scores.iter().enumerate() {
                let _ = writeln!(tsv, "{i}\t{s:.6}\t{}", Some(i) == best);
            }
            out.text("candidates.tsv", &tsv)?;
            let summary = format!(
                "selected candidate {} of {} with score {:.5}\n",
                best.unwrap_or(0),
                pair.candidate_count,
                pair.selection_score
            );
            out.finish(&cfg, summary)
        }
        Command::Finetune {
            common,
            base,
            style_image: img,
            iterations,
            lambda_spn,
        } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let ft = &mut cfg.finetune;
            ft.base = base.or(ft.base.take());
            ft.style.image = img.or(ft.style.image.take());
            if let Some(i) = iterations {
                ft.training.iterations = i;
            }
            if let Some(l) = lambda_spn {
                ft.training.lambda_spn = l;
            }
            ft.training.validate()?;
            if ft.training.iterations == 0 {
                return Err(Error::Config("finetune.training.iterations must be >= 1".into()));
            }
            let base = load_base(required(&ft.base, "finetune.base")?)?;
            let style_b = style_image(&ft.style)?;
            let t = &ft.training;
            let pair = prepare_style_pair(&base, &style_b, t.t0, t.candidates, t.seed)?;
            let every = (t.iterations / 20).max(1);
            let model = finetune_with_pair(t, &base, pair, &mut |i, r| {
                if i % every == 0 {
                    eprintln!("finetune iteration {i:>5}  total {:.5}", r.total);
                }
            })?;
            let mut out = Output::new(dir)?;
            let ck = model.to_checkpoint()?;
            out.checkpoint("finetuned.ckpt", &ck)?;
            out.text("metrics.tsv", &model.metrics_log())?;
            out.png("style_a.png", &model.pair.style_a)?;
            let totals: Vec<f64> = model.metrics.iter().map(|r| r.total).collect();
            let (head, tail) = head_tail(&totals);
            let summary = format!(
                "finetuned {} iterations\ntotal loss first 10%: {head:.5}\ntotal loss last 10%: {tail:.5}\ncheckpoint sha256: {}\n",
                totals.len(),
                ck.digest()
            );
            out.finish(&cfg, summary)
        }
        Command::Stylize { common, inference } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let st = &mut cfg.stylize;
            st.checkpoint = inference.checkpoint.clone().or(st.checkpoint.take());
            st.input = inference.input.clone().or(st.input.take());
            inference.apply(&mut st.options);
            let model = load_finetuned(required(&st.checkpoint, "stylize.checkpoint")?)?;
            let input = read_png(required(&st.input, "stylize.input")?)?;
            let image = stylize(&model, &input, &st.options)?;
            let mut out = Output::new(dir)?;
            out.png("stylized.png", &image)?;
            let summary = format!("stylized with f_ch = {}, lambda_spn = {}\n", cfg.stylize.options.f_ch, cfg.stylize.options.lambda_spn);
            out.finish(&cfg, summary)
        }
        Command::TextEdit {
            common,
            inference,
            source,
            target,
            recompute_x_t0,
        } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let te = &mut cfg.text_edit;
            te.checkpoint = inference.checkpoint.clone().or(te.checkpoint.take());
            te.input = inference.input.clone().or(te.input.take());
            inference.apply(&mut te.options);
            if let Some(s) = source {
                te.source = s;
            }
            if let Some(t) = target {
                te.target = t;
            }
            te.recompute_x_t0 |= recompute_x_t0;
            let model = load_finetuned(required(&te.checkpoint, "text_edit.checkpoint")?)?;
            let input = read_png(required(&te.input, "text_edit.input")?)?;
            let mut text = te.text.clone();
            text.t0 = te.options.t0;
            let edit = optimize_semantic_for_text(&model.base, &input, &te.source, &te.target, &text)?;
            let image = stylize_with_latent(&model, &input, &edit.z, &te.options, te.recompute_x_t0)?;
            let mut out = Output::new(dir)?;
            out.png("text_edit.png", &image)?;
            out.png("edited_photo.png", &edit.image)?;
            let mut log = String::from("step\tloss\n");
            for (i, l) in edit.losses.iter().enumerate() {
                let _ = writeln!(log, "{i}\t{l:.6}");
            }
            out.text("metrics.tsv", &log)?;
            let summary = format!(
                "text edit {:?} -> {:?}\ninitial loss {:.5}\nbest loss {:.5}\ndirectional cosine {:.5}\n",
                te.source,
                te.target,
                edit.initial_loss(),
                edit.best_loss,
                edit.cosine()
            );
            out.finish(&cfg, summary)
        }
        Command::DensityRank {
            common,
            base,
            corpus_dir,
            k,
            repeats,
        } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let dr = &mut cfg.density_rank;
            dr.base = base.or(dr.base.take());
            dr.corpus.dir = corpus_dir.or(dr.corpus.dir.take());
            if let Some(k) = k {
                dr.k = k;
            }
            if let Some(m) = repeats {
                dr.reconstruct.repeats = m;
            }
            let base = load_base(required(&dr.base, "density_rank.base")?)?;
            dr.reconstruct.validate(base.schedule.total_steps())?;
            let (corpus, labels): (Vec<(String, Tensor)>, Option<Vec<bool>>) = match &dr.corpus.dir {
                Some(dir) => (read_dir_pngs(dir)?, None),
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(dr.corpus.seed);
                    let items = artifact_corpus(dr.corpus.generate, &mut rng);
                    let labels = items.iter().map(|(_, a)| *a).collect();
                    let named = items
                        .into_iter()
                        .enumerate()
                        .map(|(i, (t, a))| (format!("{i:04}_{}", if a { "artifact" } else { "clean" }), t))
                        .collect();
                    (named, Some(labels))
                }
            };
            let records = density_rank(&base, &corpus, dr.k, dr.seed, &dr.reconstruct)?;
            let mut out = Output::new(dir)?;
            out.text("density.tsv", &density_report(&records))?;
            let mut summary = format!("ranked {} images, k = {}\n", records.len(), dr.k);
            if let Some(labels) = labels {
                let index = |id: &str| id[..4].parse::<usize>().expect("generated id");
                let scores: Vec<f64> = records.iter().map(|r| r.perceptual_score).collect();
                let flags: Vec<bool> = records.iter().map(|r| labels[index(&r.image_id)]).collect();
                let _ = writeln!(summary, "artifact AUC {:.4}", auc(&scores, &flags)?);
            }
            out.finish(&cfg, summary)
        }
        Command::Ablate {
            common,
            runs,
            inputs_dir,
        } => {
            let mut cfg = load_config(&common)?;
            let dir = out_dir(&cfg);
            let ab = &mut cfg.ablate;
            if !runs.is_empty() {
                ab.runs = runs;
            }
            ab.inputs.dir = inputs_dir.or(ab.inputs.dir.take());
            if ab.runs.is_empty() {
                return Err(Error::Config("ablate needs at least one run (lambda = checkpoint)".into()));
            }
            let models = ab
                .runs
                .iter()
                .map(|r| Ok((r.lambda, load_finetuned(&r.checkpoint)?)))
                .collect::<Result<Vec<_>>>()?;
            let inputs = image_set(&ab.inputs)?;
            let refs: Vec<(f64, &Finetuned)> = models.iter().map(|(l, m)| (*l, m)).collect();
            let rows = run_spn_ablation(&refs, &inputs, &ab.options)?;
            let report = ablation_report(&rows);
            let mut out = Output::new(dir)?;
            out.text("ablation.tsv", &report)?;
            out.finish(&cfg, report)
        }
    }
}

impl Inference {
    fn apply(&self, opts: &mut crate::sampler::StylizeOptions) {
        if let Some(f) = self.f_ch {
            opts.f_ch = f;
        }
        if let Some(l) = self.lambda_spn {
            opts.lambda_spn = l;
        }
        if let Some(t) = self.t0 {
            opts.t0 = t;
        }
    }
}

fn head_tail(values: &[f64]) -> (f64, f64) {
    let n = (values.len() / 10).max(1).min(values.len());
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (mean(&values[..n]), mean(&values[values.len() - n..]))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
