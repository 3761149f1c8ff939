//! End-to-end tests that drive the `cellwarp` binary: every subcommand
//! runs against synthetic data, artifacts chain between run directories,
//! exit codes follow the error taxonomy, and identical reruns write
//! byte-identical metrics.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const CONFIG: &str = r#"
[data]
seed = 7
pairs = 2
queries = 1
background_count = 3
scene_rows = 2
scene_cols = 2
scene_spacing = 64
oracle_iterations = 25

[bank]
augmentations_per_entry = 4

[invariant_net]
epochs = 2
latent_dim = 8
batch_size = 4

[mapping_net]
kind = "stationary-velocity"
epochs = 2

[theory]
densities = [2, 4]
queries_per_entry = 4
"#;

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
    bank: PathBuf,
    augmented: PathBuf,
    encoder: PathBuf,
    mapper: PathBuf,
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cellwarp"))
}

fn output_of(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

/// Runs one subcommand, asserts success, and returns its run directory.
fn run_ok(config: &Path, out: &Path, args: &[&str]) -> PathBuf {
    let output = output_of(
        bin().args(args).arg("--config").arg(config).arg("--out").arg(out),
    );
    assert!(
        output.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    let dir = stdout.trim().rsplit(" -> ").next().expect("summary names the run dir");
    PathBuf::from(dir)
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process exits")
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()));
    serde_json::from_str(&text).expect("valid JSON")
}

/// One shared pipeline over the default archetypes; built once, reused by
/// every test that needs trained checkpoints.
fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let config = dir.path().join("run.toml");
        std::fs::write(&config, CONFIG).unwrap();
        let out = dir.path().join("runs");
        let bank = run_ok(&config, &out, &["bank-build"]).join("bank");
        let augmented = run_ok(
            &config,
            &out,
            &["augment", "--bank", bank.to_str().unwrap()],
        )
        .join("bank");
        let encoder = run_ok(
            &config,
            &out,
            &["train-invariant", "--bank", augmented.to_str().unwrap()],
        )
        .join("encoder.cwt");
        let mapper = run_ok(
            &config,
            &out,
            &["train-mapping", "--bank", augmented.to_str().unwrap()],
        )
        .join("mapper.cwt");
        Workspace { _dir: dir, config, out, bank, augmented, encoder, mapper }
    })
}

#[test]
fn foundation_runs_write_snapshot_seeds_manifest_and_metrics() {
    let ws = workspace();
    assert!(ws.bank.is_dir());
    assert!(ws.augmented.is_dir());
    assert!(ws.encoder.is_file());
    assert!(ws.mapper.is_file());

    let run = ws.encoder.parent().unwrap();
    for name in ["config.toml", "seeds.json", "metrics.json", "manifest.json", "runtime.json"] {
        assert!(run.join(name).is_file(), "{name} missing from run dir");
    }

    let manifest = read_json(&run.join("manifest.json"));
    assert_eq!(manifest["command"], "train-invariant");
    assert_eq!(manifest["root_seed"], 7);
    let bank_hash = manifest["inputs"]["bank"]["sha256"].as_str().unwrap();
    assert_eq!(bank_hash.len(), 64);
    let outputs = manifest["outputs"].as_object().unwrap();
    assert!(outputs.contains_key("encoder.cwt"));
    assert!(outputs.contains_key("metrics.json"));
    assert!(!outputs.contains_key("manifest.json"));
    assert!(!outputs.contains_key("runtime.json"));

    let seeds = read_json(&run.join("seeds.json"));
    assert_eq!(seeds["root"], 7);
    assert!(seeds["streams"]["invariant-train"].is_u64());

    let metrics = read_json(&run.join("metrics.json"));
    assert_eq!(metrics["epochs"], 2);
    assert!(metrics["final_loss"].as_f64().unwrap().is_finite());
}

#[test]
fn match_reports_accuracy_and_env_overrides_reach_the_snapshot() {
    let ws = workspace();
    let output = output_of(
        bin()
            .args(["match", "--bank", ws.augmented.to_str().unwrap()])
            .args(["--encoder", ws.encoder.to_str().unwrap()])
            .arg("--config")
            .arg(&ws.config)
            .arg("--out")
            .arg(&ws.out)
            .env("CELLWARP_DATA__QUERIES", "3"),
    );
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    let run = PathBuf::from(stdout.trim().rsplit(" -> ").next().unwrap());

    let metrics = read_json(&run.join("metrics.json"));
    // Three queries per archetype, four default archetypes.
    assert_eq!(metrics["queries"], 12);
    let accuracy = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));

    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("queries = 3"), "env override missing from snapshot");

    let csv = std::fs::read_to_string(run.join("matches.csv")).unwrap();
    assert!(csv.starts_with("query,entry,record,latent_distance,cosine_distance,true_entry"));
    assert_eq!(csv.lines().count(), 13);
}

#[test]
fn register_saves_the_first_pair_checkpoints() {
    let ws = workspace();
    let run = run_ok(
        &ws.config,
        &ws.out,
        &["register", "--mapper", ws.mapper.to_str().unwrap()],
    );
    for name in ["pair-000.fwd.cwt", "pair-000.inv.cwt", "pair-000.json"] {
        assert!(run.join("registrations").join(name).is_file(), "{name} missing");
    }
    let metrics = read_json(&run.join("metrics.json"));
    assert_eq!(metrics["pairs"], 2);
    let dice = metrics["mean_dice"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dice));
}

#[test]
fn count_emits_detections_with_evaluation_against_scene_truth() {
    let ws = workspace();
    let run = run_ok(
        &ws.config,
        &ws.out,
        &[
            "count",
            "--bank",
            ws.augmented.to_str().unwrap(),
            "--encoder",
            ws.encoder.to_str().unwrap(),
        ],
    );
    let csv = std::fs::read_to_string(run.join("detections.csv")).unwrap();
    assert!(csv.starts_with("x,y,score,archetype"));
    assert!(run.join("scene.png").is_file());

    let metrics = read_json(&run.join("metrics.json"));
    let detections = metrics["detections"].as_u64().unwrap() as usize;
    assert_eq!(csv.lines().count(), detections + 1);
    let f1 = metrics["evaluation"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn segment_writes_an_instance_map() {
    let ws = workspace();
    let run = run_ok(
        &ws.config,
        &ws.out,
        &[
            "segment",
            "--bank",
            ws.augmented.to_str().unwrap(),
            "--encoder",
            ws.encoder.to_str().unwrap(),
            "--mapper",
            ws.mapper.to_str().unwrap(),
        ],
    );
    assert!(run.join("instances.png").is_file());
    assert!(run.join("detections.csv").is_file());
    let metrics = read_json(&run.join("metrics.json"));
    assert!(metrics["detections"].is_u64());
}

#[test]
fn orient_runs_on_oriented_banks_and_rejects_unoriented_ones() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG.replace("[data]", "[data]\narchetypes = \"oriented\"\n"))
        .unwrap();
    let out = dir.path().join("runs");

    let bank = run_ok(&config, &out, &["bank-build"]).join("bank");
    let augmented =
        run_ok(&config, &out, &["augment", "--bank", bank.to_str().unwrap()]).join("bank");
    let encoder = run_ok(
        &config,
        &out,
        &["train-invariant", "--bank", augmented.to_str().unwrap()],
    )
    .join("encoder.cwt");
    let mapper = run_ok(
        &config,
        &out,
        &["train-mapping", "--bank", augmented.to_str().unwrap()],
    )
    .join("mapper.cwt");

    let run = run_ok(
        &config,
        &out,
        &[
            "orient",
            "--bank",
            augmented.to_str().unwrap(),
            "--encoder",
            encoder.to_str().unwrap(),
            "--mapper",
            mapper.to_str().unwrap(),
        ],
    );
    let csv = std::fs::read_to_string(run.join("orientations.csv")).unwrap();
    assert!(csv.starts_with("query,predicted_deg,baseline_deg,true_deg,entry,record"));
    let metrics = read_json(&run.join("metrics.json"));
    assert!(metrics["mean_angle_error_deg"].as_f64().unwrap().is_finite());

    // The default archetypes carry no orientation channel: config error.
    let output = output_of(
        bin()
            .args(["orient", "--bank", ws.augmented.to_str().unwrap()])
            .args(["--encoder", encoder.to_str().unwrap()])
            .args(["--mapper", mapper.to_str().unwrap()])
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(exit_code(&output), 2);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.starts_with("error[config]:"), "unexpected stderr: {stderr}");
}

#[test]
fn synth_bench_reports_identity_oracle_and_learned_rows() {
    let ws = workspace();
    let run = run_ok(
        &ws.config,
        &ws.out,
        &["synth-bench", "--mapper", ws.mapper.to_str().unwrap()],
    );
    let rows = read_json(&run.join("report.json"));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 15, "three architectures x five metrics");

    let architectures: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r["architecture"].as_str().unwrap()).collect();
    assert_eq!(
        architectures,
        ["identity", "learned-stationary-velocity", "oracle"].into_iter().collect()
    );
    let metrics: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r["metric"].as_str().unwrap()).collect();
    assert_eq!(
        metrics,
        ["dice", "iou", "l1_field", "l1_image", "ncc_field"].into_iter().collect()
    );
    for row in rows {
        assert_eq!(row["n"], 2);
        assert!(row["mean"].as_f64().unwrap().is_finite());
    }

    let csv = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(csv.starts_with("architecture,metric,mean,std,n"));
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn verify_theory_writes_a_bound_report() {
    let ws = workspace();
    let run = run_ok(
        &ws.config,
        &ws.out,
        &[
            "verify-theory",
            "--bank",
            ws.augmented.to_str().unwrap(),
            "--encoder",
            ws.encoder.to_str().unwrap(),
        ],
    );
    let report = read_json(&run.join("bound_report.json"));
    assert!(report["epsilon_star"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["per_m"].as_array().unwrap().len(), 2);
    assert_eq!(report["trained"], true);
    let holds = report["holds_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&holds));
}

#[test]
fn identical_reruns_write_byte_identical_outputs() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let args = [
        "count",
        "--bank",
        ws.augmented.to_str().unwrap(),
        "--encoder",
        ws.encoder.to_str().unwrap(),
    ];
    let first = run_ok(&ws.config, &out, &args);
    let second = run_ok(&ws.config, &out, &args);
    assert_ne!(first, second, "each run gets its own directory");
    for name in ["metrics.json", "detections.csv", "config.toml", "seeds.json"] {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn exit_codes_follow_the_error_taxonomy() {
    let ws = workspace();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");

    // Unknown config key: usage error.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\npatch = 32\n").unwrap();
    let output = output_of(bin().args(["count"]).arg("--config").arg(&bad).arg("--out").arg(&out));
    assert_eq!(exit_code(&output), 2);
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error[config]:"));

    // Required input not configured at all: usage error.
    let output =
        output_of(bin().args(["count"]).arg("--config").arg(&ws.config).arg("--out").arg(&out));
    assert_eq!(exit_code(&output), 2);

    // Input path that does not exist: I/O error.
    let output = output_of(
        bin()
            .args(["count", "--bank", "/nonexistent/bank"])
            .args(["--encoder", ws.encoder.to_str().unwrap()])
            .arg("--config")
            .arg(&ws.config)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(exit_code(&output), 3);
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error[io]:"));

    // Scene too tight for its patches: rejected as configuration.
    let output = output_of(
        bin()
            .args(["count", "--bank", ws.augmented.to_str().unwrap()])
            .args(["--encoder", ws.encoder.to_str().unwrap()])
            .arg("--config")
            .arg(&ws.config)
            .arg("--out")
            .arg(&out)
            .env("CELLWARP_DATA__SCENE_SPACING", "16"),
    );
    assert_eq!(exit_code(&output), 2);

    // An image too small to scan: runtime error.
    let tiny = dir.path().join("tiny.png");
    cellwarp::patch::WholeImage::<f32>::new("tiny", ndarray::Array3::zeros((8, 8, 1)))
        .save_png(&tiny)
        .unwrap();
    let output = output_of(
        bin()
            .args(["count", "--bank", ws.augmented.to_str().unwrap()])
            .args(["--encoder", ws.encoder.to_str().unwrap()])
            .args(["--image", tiny.to_str().unwrap()])
            .arg("--config")
            .arg(&ws.config)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(exit_code(&output), 4);
    assert!(String::from_utf8_lossy(&output.stderr).starts_with("error[runtime]:"));

    // Nothing on stdout when a command fails.
    assert!(output.stdout.is_empty());
}
