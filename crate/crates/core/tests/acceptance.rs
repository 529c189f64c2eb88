//! Acceptance suite. Criteria run one after another in a single process so
//! the wall-clock limits are measured without other tests competing for the
//! CPU. Each criterion prints one PASS/FAIL line; any failure makes the
//! binary exit non-zero.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use diffstyle::autograd::Tape;
use diffstyle::cli::toy_style_image;
use diffstyle::data::{artifact_corpus, Face, HairColor};
use diffstyle::diffae::{
    denoise, denoise_with_plan, encode_semantic, make_conditioning_plan, Conditioned, LatentRole,
    SplitPoint,
};
use diffstyle::diffusion::{
    forward_marginal, predict_x0, run_trajectory, run_trajectory_var, Direction, FnEps, Mode, NoiseSchedule,
    TimestepSubsequence,
};
use diffstyle::embedders::{tokenize, EmbeddingBackend, ToyBackend, ToyBackendConfig};
use diffstyle::evaluation::{auc, density_rank, proxy_means, run_spn_ablation, stylize_all, ReconstructOptions};
use diffstyle::finetune::{finetune, score_style_candidate, style_candidate, FinetuneConfig, Finetuned};
use diffstyle::losses::{
    cross_domain_loss_var, directional_loss, in_domain_loss_var, reconstruction_loss_var, text_direction,
    text_directional_loss_var, LossWeights,
};
use diffstyle::nn::Ctx;
use diffstyle::sampler::{optimize_semantic_for_text, structural_latent, stylize_with_plan, StylizeOptions, TextEditOptions};
use diffstyle::spn::{reverse_step_with_spn, LatentChoice};
use diffstyle::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{default_base, faces};

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn style_image() -> Tensor {
    toy_style_image(0)
}

/// A default 200-iteration finetuning run and its wall-clock time.
struct Run {
    model: Finetuned,
    elapsed: Duration,
}

fn timed_finetune(cfg: &FinetuneConfig) -> Run {
    let base = default_base();
    let start = Instant::now();
    let model = finetune(cfg, base, &style_image()).expect("finetune succeeds");
    Run {
        model,
        elapsed: start.elapsed(),
    }
}

fn default_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| timed_finetune(&FinetuneConfig::default()))
}

fn eval_inputs() -> Vec<Tensor> {
    faces(20, 11)
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let sched = NoiseSchedule::scaled_linear(100).map_err(|e| e.to_string())?;
    let ab = sched.alpha_bars();
    ensure(ab[0] == 1.0, "alpha_bar_0 != 1")?;
    let mut worst = 0.0f64;
    for t in 1..=sched.total_steps() {
        worst = worst.max((ab[t] - ab[t - 1] * (1.0 - sched.beta(t))).abs());
    }
    ensure(worst <= 1e-12, format!("recurrence error {worst:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
    let z = Tensor::randn(&[3, 16, 16], &mut rng);
    let at0 = forward_marginal(&x0, 0, &z, &sched).map_err(|e| e.to_string())?;
    ensure(at0.bit_eq(&x0), "forward_marginal at t = 0 is not the identity")?;
    let mut inv = 0.0f64;
    for t in 1..=sched.total_steps() {
        let xt = forward_marginal(&x0, t, &z, &sched).map_err(|e| e.to_string())?;
        inv = inv.max(predict_x0(&xt, t, &z, &sched).map_err(|e| e.to_string())?.max_abs_diff(&x0));
    }
    ensure(inv < 1e-6, format!("predict_x0 inversion error {inv:e}"))?;

    // With the true noise as the oracle denoiser, DDIM encode then decode is exact.
    let x0b = Tensor::new(&[1, 3, 16, 16], x0.data().to_vec()).unwrap();
    let zb = Tensor::new(&[1, 3, 16, 16], z.data().to_vec()).unwrap();
    let oracle = FnEps(move |_: &Tensor, _| zb.clone());
    let steps = TimestepSubsequence::full(sched.total_steps());
    let enc = run_trajectory(&oracle, &x0b, &steps, Direction::Encode, Mode::Ddim, 0, &sched).map_err(|e| e.to_string())?;
    let dec = run_trajectory(&oracle, &enc, &steps, Direction::Decode, Mode::Ddim, 0, &sched).map_err(|e| e.to_string())?;
    let rt = dec.max_abs_diff(&x0b);
    ensure(rt < 1e-3, format!("round trip error {rt:e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "recurrence {worst:.1e}, inversion {inv:.1e}, round trip {rt:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

/// Largest coordinate error between the tape gradient of `f` at `x` and a
/// central difference, relative to the largest gradient coordinate.
fn grad_check(x: &Tensor, f: &dyn for<'t> Fn(&diffstyle::autograd::Var<'t>) -> diffstyle::autograd::Var<'t>) -> f64 {
    let tape = Tape::new();
    let var = tape.watch(x);
    let loss = f(&var);
    let grads = tape.backward(&loss);
    let g = grads.get(x).expect("gradient reaches the input").clone();
    let h = 1e-6;
    let eval = |v: &Tensor| {
        let tape = Tape::inference();
        f(&tape.constant(v.clone())).item()
    };
    let mut max_err = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        max_err = max_err.max((fd - g.data()[i]).abs());
        scale = scale.max(g.data()[i].abs()).max(fd.abs());
    }
    max_err / scale.max(1e-300)
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let shape = [1, 3, 8, 8];
    let weights = LossWeights::default();
    let mut worst = [0.0f64; 4];
    let mut instances = 0;
    let src = tokenize("a photo of a person with black hair");
    let trg = tokenize("a photo of a person with blonde hair");
    for seed in 0..6u64 {
        let backend = ToyBackend::new(&ToyBackendConfig::default(), 100 + seed).map_err(|e| e.to_string())?;
        let b: &dyn EmbeddingBackend = &backend;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&shape, -1.0, 1.0, &mut rng)).collect();
        let v_text = text_direction(b, &src, &trg).map_err(|e| e.to_string())?;
        let (a, bb, c, d) = (&imgs[0], &imgs[1], &imgs[2], &imgs[3]);

        let errs = [
            grad_check(d, &|x| {
                let t = x.tape();
                cross_domain_loss_var(b, &t.constant(a.clone()), &t.constant(bb.clone()), &t.constant(c.clone()), x)
                    .unwrap()
            }),
            grad_check(d, &|x| {
                let t = x.tape();
                in_domain_loss_var(b, &t.constant(a.clone()), &t.constant(bb.clone()), &t.constant(c.clone()), x)
                    .unwrap()
            }),
            grad_check(d, &|x| reconstruction_loss_var(b, &x.tape().constant(a.clone()), x, &weights).unwrap().0),
            grad_check(d, &|x| text_directional_loss_var(b, &v_text, &x.tape().constant(a.clone()), x).unwrap()),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
        instances += 4;
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{instances} instances, max relative error cross {:.1e} in {:.1e} recon {:.1e} text {:.1e}, {:.1}s",
        worst[0],
        worst[1],
        worst[2],
        worst[3],
        elapsed.as_secs_f64()
    );
    ensure(instances >= 20, detail.clone())?;
    ensure(worst.iter().all(|&e| e <= 1e-3), detail.clone())?;
    ensure(elapsed < Duration::from_secs(120), detail.clone())?;
    Ok(detail)
}

fn criterion_3() -> Check {
    let d = |a: Vec<f64>, b: Vec<f64>| {
        let n = a.len();
        directional_loss(&Tensor::new(&[n], a).unwrap(), &Tensor::new(&[n], b).unwrap()).unwrap()
    };
    let v = vec![0.3, -1.2, 2.5, 0.7];
    ensure(d(v.clone(), v.clone()) == 0.0, "loss(v, v) != 0")?;
    ensure(d(vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]) == 1.0, "orthogonal != 1")?;
    ensure(d(v.clone(), v.iter().map(|x| -x).collect()) == 2.0, "antipodal != 2")?;
    let w = vec![-0.4, 0.9, 1.1, -2.0];
    let base = d(v.clone(), w.clone());
    let mut worst = 0.0f64;
    for (sa, sb) in [(3.0, 0.5), (1e-3, 7.0), (250.0, 250.0)] {
        let s = d(v.iter().map(|x| x * sa).collect(), w.iter().map(|x| x * sb).collect());
        worst = worst.max((s - base).abs());
    }
    ensure(worst <= 1e-7, format!("scaling changes the loss by {worst:e}"))?;
    Ok(format!("identities exact, scaling deviation {worst:.1e}"))
}

fn criterion_4() -> Check {
    let run = default_run();
    let m = &run.model;
    let base = &m.base;
    let input = &faces(1, 5)[0];
    let z_in = encode_semantic(&base.encoder, input).map_err(|e| e.to_string())?;
    let z_style = encode_semantic(&base.encoder, &m.pair.style_b).map_err(|e| e.to_string())?;

    // Equal-latent plan against single-latent conditioning, at every split.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x_t = Tensor::randn(input.shape(), &mut rng);
    let single = denoise(&m.eps_b, &x_t, 30, &z_in).map_err(|e| e.to_string())?;
    for f in [SplitPoint::AllInput, SplitPoint::At(16), SplitPoint::At(32), SplitPoint::AllStyle] {
        let plan = make_conditioning_plan(&z_in, &z_in, f, &m.eps_b).map_err(|e| e.to_string())?;
        let mixed = denoise_with_plan(&m.eps_b, &x_t, 30, &plan).map_err(|e| e.to_string())?;
        ensure(mixed.bit_eq(&single), format!("equal-latent plan at f_ch {f} differs"))?;
    }

    // Boundary splits use one latent everywhere.
    let all_in = make_conditioning_plan(&z_in, &z_style, SplitPoint::AllInput, &m.eps_b).map_err(|e| e.to_string())?;
    let all_st = make_conditioning_plan(&z_in, &z_style, SplitPoint::AllStyle, &m.eps_b).map_err(|e| e.to_string())?;
    ensure(all_in.roles().iter().all(|&r| r == LatentRole::Input), "f_ch = 0 mixes latents")?;
    ensure(all_st.roles().iter().all(|&r| r == LatentRole::Style), "f_ch = inf mixes latents")?;
    ensure(
        denoise_with_plan(&m.eps_b, &x_t, 30, &all_in).map_err(|e| e.to_string())?.bit_eq(&single),
        "f_ch = 0 differs from z_in conditioning",
    )?;
    let style_only = denoise(&m.eps_b, &x_t, 30, &z_style).map_err(|e| e.to_string())?;
    ensure(
        denoise_with_plan(&m.eps_b, &x_t, 30, &all_st).map_err(|e| e.to_string())?.bit_eq(&style_only),
        "f_ch = inf differs from z_style conditioning",
    )?;

    // lambda_spn = 0 against the plain DiffAE decode of the same plan.
    let opts = StylizeOptions {
        lambda_spn: 0.0,
        ..Default::default()
    };
    let plan = make_conditioning_plan(&z_in, &z_style, opts.f_ch, &m.eps_b).map_err(|e| e.to_string())?;
    let x_t0 = structural_latent(base, input, &opts).map_err(|e| e.to_string())?;
    let spn_path = stylize_with_plan(base, &m.eps_b, &m.spn, input, &x_t0, &plan, &opts).map_err(|e| e.to_string())?;
    let plain = {
        let tape = Tape::inference();
        let model = Conditioned {
            model: &m.eps_b,
            ctx: Ctx::frozen(&tape),
            cond: plan.conditioning(&tape, 1),
        };
        let seq = TimestepSubsequence::strided(opts.t0, opts.steps).unwrap();
        let x = tape.constant(Tensor::new(&[1, 3, 32, 32], x_t0.tensor.data().to_vec()).unwrap());
        let out = run_trajectory_var(&model, &x, &seq, Direction::Decode, Mode::Ddim, 0, &base.schedule, false)
            .map_err(|e| e.to_string())?;
        out.output.into_value()
    };
    ensure(
        spn_path.data().iter().zip(plain.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "lambda = 0 decode differs from the plain decode",
    )?;
    let step_spn = reverse_step_with_spn(&m.eps_b, LatentChoice::Plan(&plan), &x_t, 50, 44, input, &m.spn, 0.0, &base.schedule)
        .map_err(|e| e.to_string())?;
    let step_plain = {
        let tape = Tape::inference();
        let model = Conditioned {
            model: &m.eps_b,
            ctx: Ctx::frozen(&tape),
            cond: plan.conditioning(&tape, 1),
        };
        let seq = TimestepSubsequence::new(vec![44, 50]).unwrap();
        let x = tape.constant(Tensor::new(&[1, 3, 32, 32], x_t.data().to_vec()).unwrap());
        run_trajectory_var(&model, &x, &seq, Direction::Decode, Mode::Ddim, 0, &base.schedule, false)
            .map_err(|e| e.to_string())?
            .output
            .into_value()
    };
    ensure(
        step_spn.data().iter().zip(step_plain.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "lambda = 0 reverse step differs from the plain step",
    )?;
    Ok("equal-latent, boundary-split and lambda = 0 collapses are bit-exact".into())
}

fn criterion_5() -> Check {
    let base = default_base();
    let before = base.frozen_digest();
    let a = default_run();
    let b = timed_finetune(&FinetuneConfig::default());
    ensure(a.model.config.iterations == 200, "default run is not 200 iterations")?;
    ensure(base.frozen_digest() == before, "base changed")?;
    for m in [&a.model, &b.model] {
        ensure(m.base.frozen_digest() == before, "eps_A, encoder or backend changed during finetuning")?;
    }
    let ca = a.model.to_checkpoint().map_err(|e| e.to_string())?.to_bytes();
    let cb = b.model.to_checkpoint().map_err(|e| e.to_string())?.to_bytes();
    ensure(ca == cb, "same-seed checkpoints differ")?;
    ensure(
        a.elapsed < Duration::from_secs(15 * 60),
        format!("default run took {:.0}s", a.elapsed.as_secs_f64()),
    )?;
    Ok(format!(
        "frozen parameters unchanged, checkpoints identical ({} bytes), default run {:.0}s",
        ca.len(),
        a.elapsed.as_secs_f64()
    ))
}

fn criterion_6() -> Check {
    let m = &default_run().model;
    let totals: Vec<f64> = m.metrics.iter().map(|r| r.total).collect();
    ensure(totals.len() >= 200, format!("only {} iterations logged", totals.len()))?;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let head = mean(&totals[..20]);
    let tail = mean(&totals[179..200]);
    let drop = 1.0 - tail / head;
    let detail = format!("iterations 1-20 mean {head:.3}, 180-200 mean {tail:.3}, drop {:.1}%", drop * 100.0);
    ensure(drop >= 0.3, detail.clone())?;
    Ok(detail)
}

fn criterion_7() -> Check {
    let default = &default_run().model;
    let mut owned = Vec::new();
    for lambda in [0.0, 0.5, 1.0] {
        let cfg = FinetuneConfig {
            lambda_spn: lambda,
            ..Default::default()
        };
        owned.push((lambda, timed_finetune(&cfg).model));
    }
    let mut runs: Vec<(f64, &Finetuned)> = vec![(0.0, &owned[0].1), (0.1, default)];
    runs.extend(owned[1..].iter().map(|(l, m)| (*l, m)));
    let inputs = eval_inputs();
    let rows = run_spn_ablation(&runs, &inputs, &StylizeOptions::default()).map_err(|e| e.to_string())?;
    let table = rows
        .iter()
        .map(|r| format!("lambda {} structure {:.4} id {:.4}", r.lambda, r.mean_structure, r.mean_id))
        .collect::<Vec<_>>()
        .join("; ");
    let detail = format!("{} inputs: {table}", inputs.len());
    ensure(rows[1].mean_structure < rows[0].mean_structure, format!("structure: {detail}"))?;
    ensure(
        rows.windows(2).all(|w| w[1].mean_id >= w[0].mean_id),
        format!("ID not non-decreasing: {detail}"),
    )?;
    Ok(detail)
}

fn criterion_8() -> Check {
    let m = &default_run().model;
    let inputs = eval_inputs();
    let opts = StylizeOptions::default();
    let std_out = stylize_all(m, &inputs, &opts, false).map_err(|e| e.to_string())?;
    let swp_out = stylize_all(m, &inputs, &opts, true).map_err(|e| e.to_string())?;
    let (_, id_std) = proxy_means(&m.base, &inputs, &std_out).map_err(|e| e.to_string())?;
    let (_, id_swp) = proxy_means(&m.base, &inputs, &swp_out).map_err(|e| e.to_string())?;
    let detail = format!("{} inputs, ID standard {id_std:.4} vs swapped {id_swp:.4}", inputs.len());
    ensure(id_std > id_swp, detail.clone())?;
    Ok(detail)
}

fn criterion_9() -> Check {
    let base = default_base();
    let items = artifact_corpus(40, &mut ChaCha8Rng::seed_from_u64(7));
    let corpus: Vec<(String, Tensor)> = items.iter().enumerate().map(|(i, (t, _))| (i.to_string(), t.clone())).collect();
    let recs = density_rank(base, &corpus, 10, 0, &ReconstructOptions::default()).map_err(|e| e.to_string())?;
    let scores: Vec<f64> = recs.iter().map(|r| r.perceptual_score).collect();
    let labels: Vec<bool> = recs.iter().map(|r| items[r.image_id.parse::<usize>().unwrap()].1).collect();
    let artifacts = labels.iter().filter(|&&l| l).count();
    let a = auc(&scores, &labels).map_err(|e| e.to_string())?;
    let detail = format!("{artifacts}/{} artifact images, AUC {a:.3}", labels.len());
    ensure(artifacts * 2 == labels.len(), detail.clone())?;
    ensure(a >= 0.9, detail.clone())?;
    Ok(detail)
}

fn criterion_10() -> Check {
    let m = &default_run().model;
    let cfg = &m.config;
    let style = style_image();
    let mut best: Option<(f64, usize)> = None;
    let mut chosen = None;
    for i in 0..cfg.candidates {
        let cand = style_candidate(&m.base, &style, cfg.t0, cfg.seed, i).map_err(|e| e.to_string())?;
        let s = score_style_candidate(&m.base, &cand, &style).map_err(|e| e.to_string())?;
        ensure(
            s.to_bits() == m.pair.candidate_scores[i].to_bits(),
            format!("candidate {i} rescored to {s} vs {}", m.pair.candidate_scores[i]),
        )?;
        if best.is_none_or(|(b, _)| s < b) {
            best = Some((s, i));
            chosen = Some(cand);
        }
    }
    let (score, index) = best.ok_or("no candidates")?;
    ensure(cfg.candidates == 30, format!("{} candidates", cfg.candidates))?;
    ensure(score.to_bits() == m.pair.selection_score.to_bits(), "selection score differs")?;
    ensure(chosen.unwrap().bit_eq(&m.pair.style_a), "selected candidate differs")?;
    Ok(format!("argmin is candidate {index} of 30 with score {score:.4}"))
}

fn criterion_11() -> Check {
    let base = default_base();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor> = std::iter::repeat_with(|| Face::sample(&mut rng))
        .filter(|f| f.hair == HairColor::Black)
        .take(8)
        .map(|f| f.render())
        .collect();
    let opts = TextEditOptions::default();
    let mut min_cos = f64::INFINITY;
    for img in &inputs {
        let e = optimize_semantic_for_text(
            base,
            img,
            "a photo of a person with black hair",
            "a photo of a person with blonde hair",
            &opts,
        )
        .map_err(|e| e.to_string())?;
        ensure(
            e.best_loss <= e.initial_loss(),
            format!("best loss {} above initial {}", e.best_loss, e.initial_loss()),
        )?;
        min_cos = min_cos.min(e.cosine());
    }
    let detail = format!("{} inputs, min cosine {min_cos:.3}", inputs.len());
    ensure(min_cos > 0.5, detail.clone())?;
    Ok(detail)
}

fn main() {
    let criteria: [(&str, fn() -> Check); 11] = [
        ("schedule and forward-process identities", criterion_1),
        ("loss gradients match finite differences", criterion_2),
        ("directional loss geometry", criterion_3),
        ("bit-exact collapse identities", criterion_4),
        ("freeze and determinism contract", criterion_5),
        ("finetuning reduces the total loss", criterion_6),
        ("SPN ablation direction", criterion_7),
        ("standard plan beats swapped plan", criterion_8),
        ("density ranking separates artifacts", criterion_9),
        ("style-pair argmin", criterion_10),
        ("text-guided semantic edit", criterion_11),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
