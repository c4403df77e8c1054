use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use meshflow_cli::commands::{load_dit, load_obj_dir, load_vae, sample_seed};
use meshflow_cli::gradcheck::{format_results, run_cases, suite, Profile, TOLERANCE};
use meshflow_core::dit::{generate, GenerateRequest, SamplingOptions};
use meshflow_core::flow::CfgWeights;
use meshflow_core::geometry::{dequantize, write_obj};
use meshflow_core::metrics::evaluate_with_grid;
use meshflow_core::nn::{grad_check, projection_loss, GradCheckConfig, Init, ParameterStore};

const SMALL: &[&str] = &[
    "vae.enc_layers=1",
    "vae.dec_layers=1",
    "vae.enc_hidden=32",
    "vae.dec_hidden=32",
    "vae.heads=2",
    "vae.steps=12",
    "dit.layers=1",
    "dit.hidden=32",
    "dit.heads=2",
    "dit.max_faces=64",
    "dit.steps=12",
    "sample.steps=4",
    "eval.points=128",
    "checkpoint_every=5",
];

fn meshflow(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_meshflow"));
    cmd.arg("--out").arg(out).env("RUST_LOG", "warn").env_remove("MESHFLOW_THREADS");
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn meshflow")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = meshflow(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Synthetic data, preprocessing and both trainings in `dir`.
fn trained_workspace(dir: &Path) {
    ok(dir, &["synth", "--count", "10", "--kinds", "box,pyramid"]);
    ok(dir, &["preprocess", dir.join("synth").to_str().unwrap()]);
    ok(dir, &["train-vae"]);
    ok(dir, &["encode"]);
    ok(dir, &["train-dit"]);
}

#[test]
fn sample_and_eval_match_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained_workspace(dir);
    ok(dir, &["--seed", "0", "sample", "--faces", "6,12", "--count", "2"]);

    let (vae, vs, _) = load_vae(&dir.join("vae.ckpt")).unwrap();
    let (dit, ds, _) = load_dit(&dir.join("dit.ckpt")).unwrap();
    let opts = SamplingOptions { cfg: CfgWeights::Single(8.0), steps: 4 };
    for f in [6usize, 12] {
        for i in 0..2 {
            let req = GenerateRequest { face_count: f, features: None, seed: sample_seed(0, f, i) };
            let g = generate(&dit, &ds, &vae, &vs, &req, opts).unwrap();
            let cli = fs::read(dir.join(format!("samples/faces{f:04}_{i:04}.obj"))).unwrap();
            assert_eq!(cli, write_obj(&dequantize(&g.mesh)), "faces {f} sample {i}");
            let side = fs::read_to_string(dir.join(format!("samples/faces{f:04}_{i:04}.txt"))).unwrap();
            assert!(side.lines().any(|l| l.replace(' ', "") == "status=ok"), "{side}");
        }
    }

    let evald = dir.join("eval");
    ok(&evald, &["--seed", "3", "eval", dir.join("samples").to_str().unwrap(), dir.join("meshes").to_str().unwrap()]);
    let gen = load_obj_dir(&dir.join("samples")).unwrap();
    let refs = load_obj_dir(&dir.join("meshes")).unwrap();
    let report = evaluate_with_grid(&gen, &refs, 128, 28, 3).unwrap();
    assert_eq!(fs::read_to_string(evald.join("metrics.kv")).unwrap(), report.to_records());
    assert!(fs::read_to_string(evald.join("metrics.txt")).unwrap().contains("1-NNA"));
}

#[test]
fn interrupted_training_resumes_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(d, &["synth", "--count", "8", "--kinds", "box,prism"]);
        ok(d, &["preprocess", d.join("synth").to_str().unwrap()]);
    }
    ok(&a, &["train-vae"]);
    ok(&b, &["train-vae", "--until", "7"]);
    assert_ne!(fs::read(a.join("vae.ckpt")).unwrap(), fs::read(b.join("vae.ckpt")).unwrap());
    ok(&b, &["train-vae", "--resume"]);
    assert_eq!(fs::read(a.join("vae.ckpt")).unwrap(), fs::read(b.join("vae.ckpt")).unwrap());

    for d in [&a, &b] {
        ok(d, &["encode"]);
    }
    assert_eq!(fs::read(a.join("latents.bin")).unwrap(), fs::read(b.join("latents.bin")).unwrap());
    ok(&a, &["train-dit"]);
    ok(&b, &["train-dit", "--until", "3"]);
    ok(&b, &["train-dit", "--resume"]);
    assert_eq!(fs::read(a.join("dit.ckpt")).unwrap(), fs::read(b.join("dit.ckpt")).unwrap());
}

#[test]
fn exit_codes_distinguish_input_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let code = |o: Output| o.status.code().unwrap();
    assert_eq!(code(meshflow(dir, &["train-vae"])), 2, "missing manifest");
    fs::create_dir_all(dir.join("empty")).unwrap();
    assert_eq!(code(meshflow(dir, &["preprocess", dir.join("empty").to_str().unwrap()])), 2);
    assert_eq!(code(meshflow(dir, &["--set", "no.such.key=1", "encode"])), 2);
    assert_eq!(code(meshflow(dir, &["--set", "dit.heads=3", "encode"])), 2);
    let threads = Command::new(env!("CARGO_BIN_EXE_meshflow"))
        .args(["--out", dir.to_str().unwrap(), "config"])
        .env("MESHFLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(threads), 2);

    // malformed OBJ files are skipped, and a directory of nothing but them is an error
    fs::create_dir_all(dir.join("bad")).unwrap();
    fs::write(dir.join("bad/a.obj"), "v 0 0 0\nf 1 2 3\n").unwrap();
    let o = meshflow(dir, &["preprocess", dir.join("bad").to_str().unwrap()]);
    assert_eq!(code(o), 2);
}

#[test]
fn completion_rejects_out_of_cube_partials() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained_workspace(dir);
    fs::write(dir.join("big.obj"), "v 0 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
    let o = meshflow(dir, &["complete", "--partial", dir.join("big.obj").to_str().unwrap(), "--total", "12"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.join("part.obj"), "v -0.5 -0.5 0\nv 0.5 -0.5 0\nv 0 0.5 0\nf 1 2 3\n").unwrap();
    ok(dir, &["complete", "--partial", dir.join("part.obj").to_str().unwrap(), "--total", "6"]);
    let side = fs::read_to_string(dir.join("completions/complete0006_0000.txt")).unwrap();
    assert!(side.contains("known_faces"), "{side}");
    let o = meshflow(dir, &["complete", "--partial", dir.join("part.obj").to_str().unwrap(), "--total", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn small_gradient_suite_passes() {
    let results = run_cases(&suite(Profile::Small));
    let text = format_results(&results);
    assert!(results.iter().all(|r| r.passed()), "{text}");
    assert!(results.len() >= 9);
}

/// Elementwise cube with a hand-written backward, optionally off by a few percent.
fn cube_loss(store: &mut ParameterStore<f64>, corrupt: bool) -> f64 {
    let x = store.add("x", 3, 4, Init::TruncNormal(1.0));
    let report = grad_check(
        store,
        |g, p| {
            let xv = p.var(x);
            let value = g.value(xv).map(|v| v * v * v);
            let input = g.value(xv);
            let y = g.custom(value, &[xv], move |grad, _| {
                let k = if corrupt { 3.05 } else { 3.0 };
                vec![Some(grad.zip_map(&input, |gv, v| gv * k * v * v))]
            });
            Ok(projection_loss(g, y, 1))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    report.max_rel_err()
}

#[test]
fn corrupted_backward_is_detected() {
    assert!(cube_loss(&mut ParameterStore::new(0), false) <= TOLERANCE);
    let err = cube_loss(&mut ParameterStore::new(0), true);
    assert!(err > 10.0 * TOLERANCE, "corrupted backward slipped through: {err}");
}
