mod common;

use std::path::Path;
use std::process::{Command, Output};

use bitskip::config::{load_config, parse_pairs, resolve};
use bitskip::eval::ExitSweepReport;

const TINY: &str = "\
# tiny shape for fast runs
model.layers = 2
model.hidden = 32
model.heads = 4
model.kv_heads = 1
model.ffn_dim = 64
model.max_seq_len = 32
train.seq_len = 32
train.batch_size = 2
train.grad_accum_steps = 2
train.warmup_steps = 4
train.log_every = 2
train.checkpoint_every = 4
";

fn bitskip(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitskip"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn bitskip")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

fn train_run(dir: &Path, name: &str, variant: &str) -> Output {
    let corpus = common::stories_path();
    bitskip(
        &[
            "train", "--config", "tiny.cfg", "--variant", variant, "--corpus",
            corpus.to_str().unwrap(), "--steps", "8", "--outdir", "out", "--name", name,
        ],
        dir,
    )
}

#[test]
fn train_is_deterministic_and_lays_out_outputs() {
    let dir = setup();
    let d = dir.path();
    for name in ["a", "b"] {
        let o = train_run(d, name, "v1");
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read("out/a/logs/loss.csv"), read("out/b/logs/loss.csv"));
    assert_eq!(read("out/a/checkpoints/final.ckpt"), read("out/b/checkpoints/final.ckpt"));
    assert_eq!(read("out/a/checkpoints/step_000004.ckpt"), read("out/b/checkpoints/step_000004.ckpt"));
    let csv = String::from_utf8(read("out/a/logs/loss.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "step,lr,grad_norm,main,total,exit_1");
    assert_eq!(csv.lines().count(), 1 + 4);
    let manifest = String::from_utf8(read("out/a/manifest")).unwrap();
    for key in ["version = ", "started_unix = ", "tokenizer = byte-level", "seed = ", "model.layers = 2"] {
        assert!(manifest.contains(key), "manifest lacks {key}");
    }
    assert!(d.join("out/a/reports").is_dir());

    let echoed = String::from_utf8(read("out/a/config.resolved")).unwrap();
    let again = resolve(&parse_pairs(&echoed).unwrap()).unwrap();
    let mut overrides = parse_pairs(TINY).unwrap();
    for (k, v) in [
        ("model.variant", "v1"),
        ("run.corpus", common::stories_path().to_str().unwrap()),
        ("train.max_steps", "8"),
        ("run.outdir", "out"),
        ("run.name", "a"),
    ] {
        overrides.push((k.into(), v.into()));
    }
    assert_eq!(again, load_config(None, &overrides).unwrap());

    let ck = "out/a/checkpoints/final.ckpt";
    let gen = |d: &Path| bitskip(&["gen", "--checkpoint", ck, "--prompt", "Once", "--tokens", "24"], d);
    let (g1, g2) = (gen(d), gen(d));
    assert_eq!(code(&g1), 0);
    assert_eq!(g1.stdout, g2.stdout);
    assert!(String::from_utf8_lossy(&g1.stderr).contains("tok/s"));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&train_run(d, "full", "v3")), 0);
    let corpus = common::stories_path();
    let o = bitskip(
        &[
            "train", "--config", "tiny.cfg", "--variant", "v3", "--corpus",
            corpus.to_str().unwrap(), "--steps", "8", "--outdir", "out", "--name", "resumed",
            "--resume", "out/full/checkpoints/step_000004.ckpt",
        ],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let full = std::fs::read(d.join("out/full/checkpoints/final.ckpt")).unwrap();
    let resumed = std::fs::read(d.join("out/resumed/checkpoints/final.ckpt")).unwrap();
    assert_eq!(full, resumed);
    let tail = |p: &str| {
        let s = std::fs::read_to_string(d.join(p)).unwrap();
        s.lines().filter(|l| l.starts_with("6,") || l.starts_with("8,")).map(String::from).collect::<Vec<_>>()
    };
    assert_eq!(tail("out/full/logs/loss.csv"), tail("out/resumed/logs/loss.csv"));
}

#[test]
fn reports_and_comparison() {
    let dir = setup();
    let d = dir.path();
    let corpus = common::stories_path();
    let corpus = corpus.to_str().unwrap();
    for v in ["v1", "baseline"] {
        assert_eq!(code(&train_run(d, v, v)), 0);
        let ck = format!("out/{v}/checkpoints/final.ckpt");
        let o = bitskip(&["sweep", "--checkpoint", &ck, "--corpus", corpus, "--layers", "1", "--tokens", "8"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("PPL decrease"));
        let o = bitskip(&["profile", "--checkpoint", &ck, "--corpus", corpus, "--windows", "2"], d);
        assert_eq!(code(&o), 0);
        let o = bitskip(&["eval", "--checkpoint", &ck, "--corpus", corpus, "--exit-layer", "1"], d);
        assert_eq!(code(&o), 0);
        assert!(String::from_utf8_lossy(&o.stdout).contains("ppl = "));
    }
    let sweep = ExitSweepReport::read_csv(std::fs::File::open(d.join("out/v1/reports/sweep_v1.csv")).unwrap()).unwrap();
    let full = sweep.row(2).unwrap();
    assert_eq!((full.ppl_delta_pct, full.speed_gain_pct, full.ratio), (0.0, 0.0, None));
    let prof = std::fs::read_to_string(d.join("out/v1/reports/variance_v1.csv")).unwrap();
    assert_eq!(prof.lines().collect::<Vec<_>>()[0], "variant,layer,std");
    assert_eq!(prof.lines().count(), 3);
    assert!(d.join("out/v1/reports/eval.manifest").exists());

    let o = bitskip(
        &["compare", "out/v1/reports/sweep_v1.csv", "out/baseline/reports/sweep_baseline.csv", "--out", "cmp"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(d.join("cmp/comparison.csv")).unwrap();
    assert!(table.starts_with("variant,quality_rank,speed_rank"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    let corpus = common::stories_path();
    let corpus = corpus.to_str().unwrap();
    assert_eq!(code(&bitskip(&[], d)), 1);
    assert_eq!(code(&bitskip(&["frobnicate"], d)), 1);
    assert_eq!(code(&bitskip(&["train", "--steps", "many"], d)), 1);
    assert_eq!(code(&bitskip(&["--help"], d)), 0);

    let o = bitskip(&["train", "--variant", "v7", "--corpus", corpus], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("v1, v2, v3, baseline"));
    assert_eq!(code(&bitskip(&["train", "--corpus", corpus, "--set", "model.colour=blue"], d)), 2);
    assert_eq!(code(&bitskip(&["train", "--variant", "v2", "--corpus", corpus, "--set", "model.hidden=100"], d)), 2);
    assert_eq!(code(&bitskip(&["train", "--corpus", "nowhere.txt"], d)), 2);
    assert_eq!(code(&bitskip(&["train", "--config", "missing.cfg", "--corpus", corpus], d)), 2);
    std::fs::write(d.join("empty.txt"), b"").unwrap();
    assert_eq!(code(&bitskip(&["train", "--config", "tiny.cfg", "--corpus", "empty.txt"], d)), 2);

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint at all").unwrap();
    assert_eq!(code(&bitskip(&["eval", "--checkpoint", "junk.ckpt", "--corpus", corpus], d)), 3);
    assert_eq!(code(&bitskip(&["gen", "--checkpoint", "absent.ckpt", "--prompt", "x"], d)), 3);

    assert_eq!(code(&train_run(d, "v1run", "v1")), 0);
    let o = bitskip(
        &[
            "train", "--config", "tiny.cfg", "--variant", "v2", "--corpus", corpus, "--outdir", "out",
            "--name", "mismatch", "--resume", "out/v1run/checkpoints/final.ckpt",
        ],
        d,
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("variant"));
}
