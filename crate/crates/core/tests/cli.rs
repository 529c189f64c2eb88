use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use diffstyle::config::RunConfig;
use diffstyle::image_io::read_png;
use tempfile::TempDir;

const TINY: &str = r#"
version = 1
[pretrain]
steps = 12
batch = 4
prior_samples = 8
[pretrain.backend_train]
steps = 4
batch = 8
[finetune.training]
iterations = 2
candidates = 2
sample_steps = 4
[prepare_style]
candidates = 2
[density_rank]
k = 1
[density_rank.corpus]
generate = 4
[density_rank.reconstruct]
steps = 4
[text_edit.text]
steps = 2
"#;

fn diffstyle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffstyle"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny base checkpoint plus the config that produced it.
struct Fixture {
    dir: TempDir,
    config: String,
    base: PathBuf,
    finetuned: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let config = write(dir.path(), "tiny.toml", TINY);
        let pre = dir.path().join("pre");
        let out = diffstyle(&["pretrain", "--config", &config, "--out", s(&pre)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let ft = dir.path().join("ft");
        let base = pre.join("base.ckpt");
        let out = diffstyle(&["finetune", "--config", &config, "--base", s(&base), "--out", s(&ft)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        Fixture {
            config,
            base,
            finetuned: ft.join("finetuned.ckpt"),
            dir,
        }
    })
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&diffstyle(&["--help"])), 0);
    assert_eq!(code(&diffstyle(&["frobnicate"])), 2);
    assert_eq!(code(&diffstyle(&["stylize", "--f-ch", "banana"])), 2);
    assert_eq!(code(&diffstyle(&["ablate", "--run", "no-equals-sign"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let unknown = write(tmp.path(), "a.toml", "version = 1\n[pretrain]\nsteps = 3\nwarp = 9\n");
    let version = write(tmp.path(), "b.toml", "version = 7\n");
    let no_corpus = write(tmp.path(), "c.toml", "version = 1\n[pretrain.corpus]\ngenerate = false\n");
    for cfg in [&unknown, &version, &no_corpus] {
        let out = diffstyle(&["pretrain", "--config", cfg, "--out", s(&tmp.path().join("o"))]);
        assert_eq!(code(&out), 2, "{cfg}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let stderr = String::from_utf8_lossy(&diffstyle(&["pretrain", "--config", &no_corpus]).stderr).into_owned();
    assert!(stderr.contains("corpus"), "{stderr}");
    assert!(!tmp.path().join("o").join("base.ckpt").exists());
    // A required path that is not given anywhere is a config error too.
    assert_eq!(code(&diffstyle(&["stylize", "--out", s(tmp.path())])), 2);
    let zero = diffstyle(&["finetune", "--iterations", "0", "--base", "x.ckpt", "--out", s(tmp.path())]);
    assert_eq!(code(&zero), 2);
}

#[test]
fn missing_files_exit_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&diffstyle(&["pretrain", "--config", s(&missing)])), 3);
    let out = diffstyle(&[
        "stylize",
        "--checkpoint",
        s(&tmp.path().join("nope.ckpt")),
        "--input",
        "x.png",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let f = fixture();
    let tmp = TempDir::new().unwrap();
    let mut bytes = std::fs::read(&f.base).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    let out = diffstyle(&["prepare-style", "--base", s(&bad), "--out", s(tmp.path())]);
    assert_ne!(code(&out), 0);
    assert_ne!(code(&out), 4);
}

#[test]
fn pretrain_is_reproducible_and_logs_metrics() {
    let f = fixture();
    let again = f.dir.path().join("pre2");
    let out = diffstyle(&["pretrain", "--config", &f.config, "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&f.base).unwrap(), std::fs::read(again.join("base.ckpt")).unwrap());
    let log = std::fs::read_to_string(again.join("metrics.tsv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step\tloss"));
    assert_eq!(lines.count(), 12);
    assert!(again.join("summary.txt").exists());
    let other = f.dir.path().join("pre3");
    assert_eq!(code(&diffstyle(&["pretrain", "--config", &f.config, "--seed", "5", "--out", s(&other)])), 0);
    assert_ne!(std::fs::read(&f.base).unwrap(), std::fs::read(other.join("base.ckpt")).unwrap());
}

#[test]
fn written_config_round_trips() {
    let f = fixture();
    let first = f.dir.path().join("pre").join("config.toml");
    let text = std::fs::read_to_string(&first).unwrap();
    let cfg = RunConfig::parse(&text).unwrap();
    assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    assert_eq!(cfg.pretrain.steps, 12);
    // Re-running from the written config reproduces the same run.
    let rerun = f.dir.path().join("rerun");
    let out = diffstyle(&["pretrain", "--config", s(&first), "--out", s(&rerun)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&f.base).unwrap(), std::fs::read(rerun.join("base.ckpt")).unwrap());
}

#[test]
fn finetune_is_reproducible() {
    let f = fixture();
    let again = f.dir.path().join("ft2");
    let out = diffstyle(&["finetune", "--config", &f.config, "--base", s(&f.base), "--out", s(&again)]);
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(&f.finetuned).unwrap(), std::fs::read(again.join("finetuned.ckpt")).unwrap());
    let metrics = std::fs::read_to_string(again.join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(again.join("style_a.png").exists());
}

#[test]
fn prepare_style_writes_the_pair() {
    let f = fixture();
    let out_dir = f.dir.path().join("prep");
    let out = diffstyle(&["prepare-style", "--config", &f.config, "--base", s(&f.base), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let a = read_png(&out_dir.join("style_a.png")).unwrap();
    let b = read_png(&out_dir.join("style_b.png")).unwrap();
    assert_eq!(a.shape(), b.shape());
    let table = std::fs::read_to_string(out_dir.join("candidates.tsv")).unwrap();
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn stylize_emits_an_image_of_input_size() {
    let f = fixture();
    let out_dir = f.dir.path().join("sty");
    let input = f.dir.path().join("sty-in.png");
    diffstyle::image_io::write_png(&input, &diffstyle::cli::toy_style_image(4)).unwrap();
    let out = diffstyle(&[
        "stylize",
        "--config",
        &f.config,
        "--checkpoint",
        s(&f.finetuned),
        "--input",
        s(&input),
        "--f-ch",
        "16",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = read_png(&out_dir.join("stylized.png")).unwrap();
    assert_eq!(img.shape(), &[3, 32, 32]);
    let written = RunConfig::load(&out_dir.join("config.toml")).unwrap();
    assert_eq!(written.stylize.options.f_ch.to_string(), "16");
}

#[test]
fn text_edit_writes_both_images() {
    let f = fixture();
    let out_dir = f.dir.path().join("txt");
    let input = f.dir.path().join("txt-in.png");
    diffstyle::image_io::write_png(&input, &diffstyle::cli::toy_style_image(6)).unwrap();
    let out = diffstyle(&[
        "text-edit",
        "--config",
        &f.config,
        "--checkpoint",
        s(&f.finetuned),
        "--input",
        s(&input),
        "--source",
        "a photo of a person with black hair",
        "--target",
        "a photo of a person with blonde hair",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("text_edit.png").exists());
    assert!(out_dir.join("edited_photo.png").exists());
    let bad = diffstyle(&[
        "text-edit",
        "--config",
        &f.config,
        "--checkpoint",
        s(&f.finetuned),
        "--input",
        s(&input),
        "--source",
        "a photo",
        "--target",
        "qwzx",
        "--out",
        s(&out_dir),
    ]);
    assert_ne!(code(&bad), 0);
}

#[test]
fn density_rank_reports_every_image() {
    let f = fixture();
    let out_dir = f.dir.path().join("dens");
    let out = diffstyle(&["density-rank", "--config", &f.config, "--base", s(&f.base), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("density.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "image_id\tscore\trank\tbucket");
    assert_eq!(rows.len(), 5);
    let too_big = diffstyle(&["density-rank", "--config", &f.config, "--base", s(&f.base), "--k", "3", "--out", s(&out_dir)]);
    assert_eq!(code(&too_big), 2);
}

#[test]
fn ablate_writes_a_table() {
    let f = fixture();
    let out_dir = f.dir.path().join("abl");
    let run = format!("0.1={}", s(&f.finetuned));
    let out = diffstyle(&["ablate", "--config", &f.config, "--run", &run, "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(out_dir.join("ablation.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows, ["lambda\tmean_structure\tmean_id", rows[1]]);
    assert!(rows[1].starts_with("0.1\t"));
    assert_eq!(code(&diffstyle(&["ablate", "--config", &f.config, "--out", s(&out_dir)])), 2);
}
