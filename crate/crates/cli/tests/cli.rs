use std::path::Path;
use std::process::Command;

const SMALL_LQ: &str = r#"
seed = 5

[model]
name = "lq_meanfield"
params = { init_mean = 0.5 }

[sim]
n_particles = 40
steps = 10

[policy]
family = "linear"
intervals = 2

[optimize]
method = { kind = "cross_entropy", population = 6, elite_frac = 0.25, iters = 2 }
eval_seeds = 1
holdout_seeds = 1

[schedule]
n = [16, 32]
seeds_per_n = 2
"#;

fn mfc(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_mfc"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

fn run(cmd: &str, config: &Path, out: &Path, seed: &str) -> i32 {
    mfc(&[
        cmd,
        "--config",
        config.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn subcommands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("lq.toml");
    std::fs::write(&config, SMALL_LQ).unwrap();
    for (cmd, files) in [
        ("validate", &["checks.csv"][..]),
        ("simulate", &["particles.csv", "ensemble.bin"][..]),
        (
            "optimize",
            &["trace.jsonl", "history.csv", "policy.json"][..],
        ),
        ("converge-forward", &["records.csv", "records.jsonl"][..]),
    ] {
        let out = dir.path().join(cmd);
        assert_eq!(run(cmd, &config, &out, "9"), 0, "{cmd}");
        let m = manifest(&out);
        assert_eq!(m["command"], cmd);
        assert_eq!(m["seed"], 9);
        assert_eq!(m["complete"], true);
        for f in files {
            assert!(out.join(f).is_file(), "{cmd}: {f}");
        }
    }
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("lq.toml");
    std::fs::write(&config, SMALL_LQ).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(run("simulate", &config, out, "3"), 0);
    }
    for f in ["manifest.json", "particles.csv", "ensemble.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    assert_eq!(run("simulate", &config, &c, "4"), 0);
    assert_ne!(
        std::fs::read(a.join("ensemble.bin")).unwrap(),
        std::fs::read(c.join("ensemble.bin")).unwrap()
    );
}

#[test]
fn bad_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(run("simulate", &missing, &dir.path().join("o"), "1"), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, SMALL_LQ.replace("[sim]", "[sim]\nbogus = 1")).unwrap();
    assert_eq!(run("simulate", &bad, &dir.path().join("o"), "1"), 1);
    // Chatter needs its own section.
    let good = dir.path().join("lq.toml");
    std::fs::write(&good, SMALL_LQ).unwrap();
    assert_eq!(run("chatter", &good, &dir.path().join("o"), "1"), 1);
}
