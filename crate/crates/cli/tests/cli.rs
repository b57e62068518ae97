use std::path::Path;
use std::process::{Command, Output};

use infogan_dp_cli::{Grid, RunConfig};
use proptest::prelude::*;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infogan-dp")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--preset", "tiny", "--output", out, "--batch-size", "4", "--seed", "7"];
    if !extra.contains(&"--synth-count") {
        v.extend(["--synth-count", "32"]);
    }
    v.extend_from_slice(extra);
    v
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn rerun_with_the_same_config_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["train"];
        args.extend(tiny(out.to_str().unwrap(), &["--epochs", "2"]));
        ok(&args);
    }
    let metrics = read(&a.join("metrics.log"));
    assert_eq!(metrics.lines().count(), 16);
    assert_eq!(metrics, read(&b.join("metrics.log")));
    for f in ["ledger.txt", "privacy_report.txt", "samples.pgm", "config.txt"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(a.join("checkpoints/epoch-0002/generator.params").is_file());
    assert!(a.join("checkpoints/final/generator.params").is_file());
}

#[test]
fn invalid_delta_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let mut args = vec!["train"];
    args.extend(tiny(out.to_str().unwrap(), &["--delta", "2"]));
    let res = bin(&args);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("privacy.delta"));
}

#[test]
fn missing_idx_file_names_the_field() {
    let res = bin(&["train", "--images", "/nonexistent/train-images-idx3-ubyte", "--epochs", "1"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("data.images"));
}

#[test]
fn single_client_distributed_run_matches_local_training() {
    let dir = tempfile::tempdir().unwrap();
    let (local, dist) = (dir.path().join("local"), dir.path().join("dist"));
    let mut args = vec!["train"];
    args.extend(tiny(local.to_str().unwrap(), &["--max-steps", "6", "--epochs", "10"]));
    ok(&args);
    let mut args = vec!["train-dist"];
    args.extend(tiny(dist.to_str().unwrap(), &["--clients", "1", "--rounds", "3", "--steps-per-round", "2"]));
    ok(&args);
    assert_eq!(read(&local.join("metrics.log")), read(&dist.join("client-01/metrics.log")));
}

#[test]
fn ten_clients_write_ten_checkpoint_sets() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ten");
    let mut args = vec!["train-dist"];
    args.extend(tiny(out.to_str().unwrap(), &["--clients", "10", "--synth-count", "80", "--per-client", "8"]));
    ok(&args);
    for i in 1..=10 {
        let cd = out.join(format!("client-{i:02}"));
        assert!(cd.join("checkpoints/generator.params").is_file());
        assert!(cd.join("checkpoints/discriminator.params").is_file());
    }
    assert!(!out.join("client-11").exists());
    let report = read(&out.join("privacy_report.txt"));
    assert_eq!(report.matches("client: ").count(), 10);
    assert!(out.join("service/q.params").is_file());
    let traffic = read(&out.join("traffic.log"));
    assert!(traffic.lines().all(|l| l.starts_with("dir=")));
}

#[test]
fn sample_grid_has_expected_size_and_constant_sweep_columns() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train"];
    args.extend(tiny(run.to_str().unwrap(), &["--max-steps", "2"]));
    ok(&args);
    let ckpt = run.join("checkpoints/final");
    let grids = dir.path().join("grids");
    let (g, o) = (ckpt.to_str().unwrap(), grids.to_str().unwrap());
    ok(&["sample", "--preset", "tiny", "--checkpoint", g, "--output", o]);
    let grid = Grid::parse_pgm(&std::fs::read(grids.join("samples.pgm")).unwrap()).unwrap();
    assert_eq!((grid.width, grid.height), (10 * 8 + 9 * 2, 10 * 8 + 9 * 2));

    ok(&[
        "sweep", "--preset", "tiny", "--checkpoint", g, "--output", o, "--code", "c0", "--range-min", "0",
        "--range-max", "0", "--rows", "3", "--cols", "4",
    ]);
    let sweep = Grid::parse_pgm(&std::fs::read(grids.join("sweep-c0.pgm")).unwrap()).unwrap();
    let tile = |r: usize, c: usize| -> Vec<u8> {
        (0..8)
            .flat_map(|y| {
                let row = r * 10 + y;
                let start = row * sweep.width + c * 10;
                sweep.pixels[start..start + 8].to_vec()
            })
            .collect()
    };
    for r in 0..3 {
        for c in 1..4 {
            assert_eq!(tile(r, 0), tile(r, c));
        }
    }
}

#[test]
fn inspect_privacy_reads_a_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train"];
    args.extend(tiny(run.to_str().unwrap(), &["--max-steps", "3"]));
    ok(&args);
    let ledger = run.join("ledger.txt");
    let text = ok(&["inspect-privacy", "--ledger", ledger.to_str().unwrap()]);
    assert!(text.contains("eps"));
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (0.1f64..50.0, 1e-9f64..0.5, 0.1f64..10.0, 1usize..128, 1usize..20, any::<u64>(), 1u32..8).prop_map(
        |(eps, delta, clip, m, clients, seed, rounds)| {
            let mut c = RunConfig::default();
            c.epsilon = eps;
            c.delta = delta;
            c.clip_norm = clip;
            c.batch_size = m;
            c.clients = clients;
            c.seed = seed;
            c.rounds = rounds;
            c
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_text_round_trips(c in arb_config()) {
        let back = RunConfig::parse(&c.render()).unwrap();
        prop_assert_eq!(back.render(), c.render());
        prop_assert_eq!(back.epsilon.to_bits(), c.epsilon.to_bits());
        prop_assert_eq!(back.seed, c.seed);
    }
}
