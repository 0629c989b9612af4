use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use dualflow::policy::{TrainHyper, VelocityField};
use dualflow::sampler::Strategy;
use dualflow::world::{unimanual_training_pairs, TaskKind, TaskSpec};
use dualflow_cli::commands::{self, AblationRow, Context, HistogramRow, LogRecord, TrainManifest};
use dualflow_cli::config::{Ablation, DemoCounts, RunConfig, SCHEMA_VERSION};
use dualflow_cli::error::CliError;
use dualflow_cli::pipeline::{self, thresholds_from};
use serde::de::DeserializeOwned;
use tempfile::TempDir;

fn tiny(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.experiment = "tiny".into();
    c.seed = 7;
    c.out_dir = out.to_path_buf();
    c.demos = DemoCounts { unimanual: 2, bimanual: 2 };
    c.policy = TrainHyper { hidden_dims: vec![16, 16], epochs: 20, batch_size: Some(128), ..c.policy };
    c.joint_policy = c.policy.clone();
    c.weights.epochs = 2;
    c.weights.draws_per_demo = 1;
    c.weight_demo_stride = 8;
    c.eval.episodes = 2;
    c.eval.strategies = vec![Strategy::Fixed, Strategy::Adaptive];
    c.eval.ablations = vec![Ablation::full(), Ablation::none_enabled()];
    c
}

fn run_all(ctx: &Context) {
    commands::cmd_gen_data(ctx).unwrap();
    commands::cmd_train(ctx).unwrap();
    commands::cmd_calibrate(ctx).unwrap();
    commands::cmd_eval(ctx).unwrap();
    commands::cmd_export_plots(ctx).unwrap();
}

/// One full tiny pipeline shared by the read-only tests.
fn fixture() -> &'static (TempDir, RunConfig) {
    static CELL: OnceLock<(TempDir, RunConfig)> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let cfg = tiny(dir.path());
        run_all(&Context::new(cfg.clone()));
        (dir, cfg)
    })
}

fn fixture_ctx() -> Context {
    Context::new(fixture().1.clone())
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn strict_csv<T: DeserializeOwned>(p: &Path) -> Vec<T> {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_path(p).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualflow"))
}

#[test]
fn gen_data_is_byte_identical_and_round_trips() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (ca, cb) = (Context::new(tiny(a.path())), Context::new(tiny(b.path())));
    commands::cmd_gen_data(&ca).unwrap();
    commands::cmd_gen_data(&cb).unwrap();
    commands::cmd_gen_data(&cb).unwrap();
    for k in TaskKind::ALL {
        assert_eq!(bytes(&ca.layout.demos(k.name())), bytes(&cb.layout.demos(k.name())), "{}", k.name());
    }
    let loaded = commands::load_demos(&ca).unwrap();
    assert_eq!(loaded, pipeline::generate_demos(&ca.config).unwrap());
}

#[test]
fn zero_bimanual_demos_fall_back_to_uniform_weights() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.demos.bimanual = 0;
    let ctx = Context::new(cfg);
    commands::cmd_gen_data(&ctx).unwrap();
    commands::cmd_train(&ctx).unwrap();
    let text = fs::read_to_string(ctx.layout.train_manifest()).unwrap();
    let env: dualflow_cli::artifacts::Envelope<TrainManifest> = serde_json::from_str(&text).unwrap();
    assert!(env.payload.weight_net_fallback_uniform);
    assert!(!env.payload.joint_policy_trained);
    assert_eq!(env.payload.weight_demos, 0);
    let models = commands::load_models(&ctx).unwrap();
    let zeros = dualflow::composition::ArmPair::new(vec![0.3; 7], vec![-0.2; 7]);
    let input = models.weight_net.input(&zeros, &zeros).unwrap();
    assert!(models.weight_net.logits(&input).unwrap().iter().all(|&l| l == 0.0));
}

#[test]
fn train_without_demos_names_the_expected_path() {
    let dir = TempDir::new().unwrap();
    let ctx = Context::new(tiny(dir.path()));
    match commands::cmd_train(&ctx) {
        Err(CliError::MissingInput { path, .. }) => assert_eq!(path, ctx.layout.demos(TaskKind::ALL[0].name())),
        other => panic!("expected a missing-input error, got {other:?}"),
    }
    let out = bin().args(["train", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "missing_input");
    let expected = ctx.layout.demos(TaskKind::ALL[0].name());
    assert_eq!(record["path"], expected.display().to_string());
}

#[test]
fn training_is_reproducible_and_checkpoints_load_back_exactly() {
    let ctx = fixture_ctx();
    let demos = commands::load_demos(&ctx).unwrap();
    let (fresh, _) = pipeline::train_models(&ctx.config, &demos).unwrap();
    let loaded = commands::load_models(&ctx).unwrap();
    assert_eq!(fresh, loaded);
    for name in ["left_policy", "right_policy", "joint_policy", "weight_net"] {
        let text = fs::read_to_string(ctx.layout.model(name)).unwrap();
        assert!(text.contains(&ctx.hash), "{name} lacks the config hash");
    }

    let pairs = unimanual_training_pairs(demos.iter().flat_map(|d| &d.left));
    for (i, p) in pairs.iter().take(40).enumerate() {
        let a: Vec<f64> = (0..p.action.len()).map(|j| ((i * 7 + j) as f64 * 0.37).sin()).collect();
        let t = (i % 10) as f64 / 10.0;
        let v1 = fresh.left.velocity(&a, t, &p.cond).unwrap();
        let v2 = loaded.left.velocity(&a, t, &p.cond).unwrap();
        assert_eq!(v1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v2.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn single_target_loss_trend_decreases() {
    let dir = TempDir::new().unwrap();
    let mut cfg = tiny(dir.path());
    let mut spec = TaskSpec::mirrored_reach();
    spec.start_x = [-0.30, -0.30];
    spec.start_y = [0.40, 0.40];
    spec.landmark_y = [[0.58, 0.58]; 3];
    spec.timing_jitter = 0;
    spec.demo_noise = 0.0;
    cfg.tasks = vec![TaskKind::MirroredReach];
    cfg.task_specs = vec![spec];
    cfg.policy.epochs = 300;
    let ctx = Context::new(cfg);
    commands::cmd_gen_data(&ctx).unwrap();
    commands::cmd_train(&ctx).unwrap();

    #[derive(serde::Deserialize)]
    struct Row {
        epoch: usize,
        loss: f64,
        schema_version: u32,
        config_hash: String,
    }
    let rows: Vec<Row> = strict_csv(&ctx.layout.loss_csv("left"));
    assert_eq!(rows.len(), 300);
    assert!(rows.iter().enumerate().all(|(i, r)| r.epoch == i && r.schema_version == SCHEMA_VERSION && r.config_hash == ctx.hash));
    let blocks: Vec<f64> = rows.chunks(60).map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64).collect();
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {blocks:?}");
    }
}

#[test]
fn degenerate_and_extreme_calibration() {
    match thresholds_from(&[2.5; 50], 30.0, 90.0) {
        Err(e @ CliError::DegenerateDistribution { .. }) => assert_eq!(e.kind(), "degenerate_distribution"),
        other => panic!("expected a degenerate-distribution error, got {other:?}"),
    }
    assert!(matches!(thresholds_from(&[], 30.0, 90.0), Err(CliError::EmptyDistribution { .. })));

    let sample = [4.0, -1.5, 9.25, 3.0, 0.5, 7.0];
    let t = thresholds_from(&sample, 0.0, 100.0).unwrap();
    assert_eq!((t.tau_low, t.tau_high), (-1.5, 9.25));
    assert_eq!((t.min_energy, t.max_energy), (-1.5, 9.25));
}

#[test]
fn calibration_reproduces() {
    let ctx = fixture_ctx();
    let first = bytes(&ctx.layout.thresholds());
    let dir = TempDir::new().unwrap();
    for sub in ["demos", "models"] {
        copy_dir(&ctx.config.out_dir.join(sub), &dir.path().join(sub));
    }
    let mut cfg = ctx.config.clone();
    cfg.out_dir = dir.path().to_path_buf();
    let other = Context::new(cfg);
    let t = commands::cmd_calibrate(&other).unwrap();
    assert!(t.tau_low < t.tau_high);
    assert_eq!(first, bytes(&other.layout.thresholds()));
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn report_rows_labels_and_strategies() {
    let ctx = fixture_ctx();
    let report = commands::load_report(&ctx).unwrap();
    assert_eq!(report.schema_version, SCHEMA_VERSION);
    assert_eq!(report.config_hash, ctx.hash);
    let rows = &report.payload.rows;
    let none: Vec<_> = rows.iter().filter(|r| r.label == "none").collect();
    assert_eq!(none.len(), 2);
    assert!(none.iter().all(|r| !r.compose && !r.temporal && !r.spatial));
    for label in ["compose+temporal+spatial", "none"] {
        for s in [Strategy::Fixed, Strategy::Adaptive] {
            assert!(rows.iter().any(|r| r.label == label && r.strategy == s), "{label} {s:?}");
        }
    }
    let fixed = rows.iter().find(|r| r.strategy == Strategy::Fixed).unwrap();
    assert_eq!(fixed.mean_denoise_steps, ctx.config.sampler.n_max as f64);
    let summary = fs::read_to_string(ctx.layout.summary()).unwrap();
    assert!(summary.contains("mean_steps") && summary.contains(&ctx.hash));
}

#[test]
fn report_success_matches_the_trajectory_log() {
    let ctx = fixture_ctx();
    let report = commands::load_report(&ctx).unwrap().payload;
    let log = commands::read_log(&ctx.layout.trajectories()).unwrap();
    assert!(matches!(&log[0], LogRecord::Header { schema_version, config_hash }
        if *schema_version == SCHEMA_VERSION && *config_hash == ctx.hash));

    let mut per: BTreeMap<(String, String, String), (usize, usize)> = BTreeMap::new();
    let mut steps: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut next_step = 0;
    for rec in &log[1..] {
        match rec {
            LogRecord::Header { .. } => panic!("second header"),
            LogRecord::Step { row, strategy, step, .. } => {
                assert_eq!(*step, next_step, "steps out of order");
                next_step += 1;
                *steps.entry((row.clone(), strategy.name().into())).or_default() += 1;
            }
            LogRecord::Episode { row, strategy, task, success, .. } => {
                next_step = 0;
                let e = per.entry((row.clone(), strategy.name().into(), task.name().into())).or_default();
                e.0 += usize::from(*success);
                e.1 += 1;
            }
        }
    }
    for r in &report.rows {
        let key = |t: &TaskKind| (r.label.clone(), r.strategy.name().to_string(), t.name().to_string());
        let rates: Vec<f64> = report.tasks.iter().map(|t| per[&key(t)]).map(|(s, n)| s as f64 / n as f64).collect();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((mean - r.mean_success).abs() < 1e-12, "{} {:?}", r.label, r.strategy);
        assert_eq!(steps[&(r.label.clone(), r.strategy.name().to_string())], r.control_steps);
    }
}

#[test]
fn histograms_conserve_control_steps() {
    let ctx = fixture_ctx();
    let report = commands::load_report(&ctx).unwrap().payload;
    let per_row: usize = ctx.config.task_suite().iter().map(|s| s.episode_len * ctx.config.eval.episodes).sum();
    let hist: Vec<HistogramRow> = strict_csv(&ctx.layout.histogram_csv());
    for r in &report.rows {
        let diverged = r.suite.episodes.iter().any(|e| e.failure == Some(dualflow::world::FailureReason::Divergence));
        if !diverged {
            assert_eq!(r.control_steps, per_row);
        }
        let total: usize = hist.iter().filter(|h| h.row == r.label && h.strategy == r.strategy).map(|h| h.count).sum();
        assert_eq!(total, r.control_steps);
    }
    assert!(hist.iter().all(|h| h.schema_version == SCHEMA_VERSION && h.config_hash == ctx.hash));
}

#[test]
fn export_is_idempotent_and_strict() {
    let ctx = fixture_ctx();
    let dir = TempDir::new().unwrap();
    copy_dir(&ctx.config.out_dir.join("eval"), &dir.path().join("eval"));
    let mut cfg = ctx.config.clone();
    cfg.out_dir = dir.path().to_path_buf();
    let other = Context::new(cfg);
    commands::cmd_export_plots(&other).unwrap();
    let first = (bytes(&other.layout.histogram_csv()), bytes(&other.layout.ablation_csv()));
    commands::cmd_export_plots(&other).unwrap();
    assert_eq!(first, (bytes(&other.layout.histogram_csv()), bytes(&other.layout.ablation_csv())));
    assert_eq!(first.0, bytes(&ctx.layout.histogram_csv()));

    let bars: Vec<AblationRow> = strict_csv(&other.layout.ablation_csv());
    let report = commands::load_report(&other).unwrap().payload;
    assert_eq!(bars.len(), report.rows.len());
    for (b, r) in bars.iter().zip(&report.rows) {
        assert_eq!((&b.row, b.strategy, b.mean_success), (&r.label, r.strategy, r.mean_success));
    }
}

#[test]
fn malformed_report_is_a_schema_error() {
    let dir = TempDir::new().unwrap();
    let ctx = Context::new(tiny(dir.path()));
    fs::create_dir_all(dir.path().join("eval")).unwrap();
    fs::write(ctx.layout.report(), "{\"schema_version\": 1}").unwrap();
    let err = commands::cmd_export_plots(&ctx).unwrap_err();
    assert_eq!(err.kind(), "schema");

    let out = bin().args(["export-plots", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "schema");
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = RunConfig::from_toml("experiment = \"x\"\nepisodes_total = 3\n").unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(RunConfig::from_toml("[sampler]\nn_max = 5\nbogus = 1\n").is_err());

    let dir = TempDir::new().unwrap();
    let path: PathBuf = dir.path().join("run.toml");
    fs::write(&path, "[demos]\nunimanual = 3\nbimodal = 2\n").unwrap();
    let out = bin().arg("gen-data").arg("--config").arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let record: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(record["error"], "config");
}

#[test]
fn default_config_round_trips_through_toml() {
    let cfg = RunConfig::default();
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
}

#[test]
fn binary_flags_override_the_config() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, toml::to_string(&tiny(dir.path())).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let run = |args: &[&str]| {
        let out = bin().args(args).arg("--config").arg(&path).arg("--out").arg(&out_dir).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["gen-data"]);
    run(&["train"]);
    let table = run(&["eval", "--strategy", "early-stop", "--ablate", "temporal", "--ablate", "spatial", "--episodes", "1"]);
    assert!(table.lines().any(|l| l.starts_with("compose ") && l.contains("early_stop")), "{table}");
    let mut cfg = tiny(&out_dir);
    cfg.eval.strategies = vec![Strategy::EarlyStop];
    cfg.eval.ablations = vec![Ablation::from(vec![
        dualflow_cli::config::Component::Temporal,
        dualflow_cli::config::Component::Spatial,
    ])];
    cfg.eval.episodes = 1;
    let report = commands::load_report(&Context::new(cfg.clone())).unwrap();
    assert_eq!(report.config_hash, cfg.hash());
    let rows = &report.payload.rows;
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].label.as_str(), rows[0].strategy), ("compose", Strategy::EarlyStop));
}
