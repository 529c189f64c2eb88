//! Shared fixtures for integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::OnceLock;

use diffstyle::checkpoint::Checkpoint;
use diffstyle::data::Face;
use diffstyle::image_io::write_atomic;
use diffstyle::pretrain::{pretrain, BaseModel, PretrainConfig};
use diffstyle::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A pretrained base model and its per-step `L_simple` values.
pub struct Pretrained {
    pub model: BaseModel,
    pub losses: Vec<f64>,
}

/// Pretrains `cfg` once per config and caches the checkpoint and loss curve
/// under the cargo target tmpdir, so repeated test runs skip the expensive step.
pub fn cached_pretrain(cfg: &PretrainConfig) -> Pretrained {
    let text = toml::to_string(cfg).expect("config serializes");
    let mut h = DefaultHasher::new();
    text.hash(&mut h);
    env!("CARGO_PKG_VERSION").hash(&mut h);
    let stem = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("base-{:016x}", h.finish()));
    let (ckpt, curve) = (stem.with_extension("ckpt"), stem.with_extension("losses"));
    let cached = Checkpoint::load(&ckpt)
        .and_then(|ck| BaseModel::from_checkpoint(&ck))
        .ok()
        .zip(std::fs::read_to_string(&curve).ok());
    if let Some((model, text)) = cached {
        if let Ok(losses) = text.lines().map(str::parse).collect::<Result<Vec<f64>, _>>() {
            return Pretrained { model, losses };
        }
    }
    eprintln!("pretraining base model fixture (cached at {})", ckpt.display());
    let out = pretrain(cfg).expect("pretraining succeeds");
    out.model.to_checkpoint().and_then(|ck| ck.save(&ckpt)).expect("fixture saves");
    let lines: Vec<String> = out.losses.iter().map(|l| format!("{l:?}")).collect();
    write_atomic(&curve, lines.join("\n").as_bytes()).expect("loss curve saves");
    Pretrained {
        model: out.model,
        losses: out.losses,
    }
}

/// The base model trained with the default configuration.
pub fn default_pretrained() -> &'static Pretrained {
    static BASE: OnceLock<Pretrained> = OnceLock::new();
    BASE.get_or_init(|| cached_pretrain(&PretrainConfig::default()))
}

pub fn default_base() -> &'static BaseModel {
    &default_pretrained().model
}

/// `n` procedural faces drawn from `seed`.
pub fn faces(n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Face::sample(&mut rng).render()).collect()
}
