//! The five subcommands. Each reads its inputs from the output directory
//! and writes versioned artifacts back into it.

use std::fmt::Write as _;

use dualflow::coordination::{EnergyBreakdown, WeightNet};
use dualflow::kinematics::ArmAction;
use dualflow::policy::PolicyCheckpoint;
use dualflow::sampler::{SamplerConfig, Strategy, Termination};
use dualflow::world::{FailureReason, SuiteReport, TaskKind};
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_envelope, write_bytes, write_csv, write_json, Envelope, Layout};
use crate::config::{RunConfig, StageSeeds, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::pipeline::{self, Models, TaskDemos, Thresholds};

const DEMOS: &str = "demos";
const POLICY: &str = "policy";
const WEIGHT_NET: &str = "weight_net";
const TRAIN_MANIFEST: &str = "train_manifest";
const THRESHOLDS: &str = "thresholds";
const REPORT: &str = "eval_report";

pub struct Context {
    pub config: RunConfig,
    pub layout: Layout,
    pub hash: String,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        let hash = config.hash();
        let layout = Layout::new(config.out_dir.clone());
        Self { config, layout, hash }
    }
}

pub fn cmd_gen_data(ctx: &Context) -> CliResult<()> {
    for d in pipeline::generate_demos(&ctx.config)? {
        let path = ctx.layout.demos(d.spec.kind.name());
        write_json(&path, &Envelope::new(DEMOS, &ctx.hash, d))?;
    }
    Ok(())
}

pub fn load_demos(ctx: &Context) -> CliResult<Vec<TaskDemos>> {
    ctx.config
        .tasks
        .iter()
        .map(|k| {
            let path = ctx.layout.demos(k.name());
            Ok(read_envelope::<TaskDemos>(&path, DEMOS, "run `gen-data` first")?.payload)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub seeds: StageSeeds,
    pub unimanual_demos_per_arm_and_task: usize,
    pub bimanual_demos_per_task: usize,
    pub weight_demos: usize,
    pub joint_policy_trained: bool,
    /// No bimanual demos: the weight predictor is the uniform initialization.
    pub weight_net_fallback_uniform: bool,
    pub final_loss: FinalLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalLosses {
    pub left: Option<f64>,
    pub right: Option<f64>,
    pub joint: Option<f64>,
    pub weights: f64,
}

#[derive(Serialize)]
struct LossRow<'a> {
    epoch: usize,
    loss: f64,
    schema_version: u32,
    config_hash: &'a str,
}

fn write_loss_csv(ctx: &Context, name: &str, curve: &[f64]) -> CliResult<()> {
    let rows: Vec<LossRow> = curve
        .iter()
        .enumerate()
        .map(|(epoch, &loss)| LossRow { epoch, loss, schema_version: SCHEMA_VERSION, config_hash: &ctx.hash })
        .collect();
    write_csv(&ctx.layout.loss_csv(name), &rows)
}

pub fn cmd_train(ctx: &Context) -> CliResult<()> {
    let demos = load_demos(ctx)?;
    let (models, summary) = pipeline::train_models(&ctx.config, &demos)?;
    let l = &ctx.layout;
    write_json(&l.model("left_policy"), &Envelope::new(POLICY, &ctx.hash, &models.left))?;
    write_json(&l.model("right_policy"), &Envelope::new(POLICY, &ctx.hash, &models.right))?;
    if let Some(joint) = &models.joint {
        write_json(&l.model("joint_policy"), &Envelope::new(POLICY, &ctx.hash, joint))?;
    }
    write_json(&l.model("weight_net"), &Envelope::new(WEIGHT_NET, &ctx.hash, &models.weight_net))?;

    write_loss_csv(ctx, "left", &summary.left.loss_curve)?;
    write_loss_csv(ctx, "right", &summary.right.loss_curve)?;
    if let Some(j) = &summary.joint {
        write_loss_csv(ctx, "joint", &j.loss_curve)?;
    }
    write_loss_csv(ctx, "weights", &summary.weights.loss_curve)?;

    let manifest = TrainManifest {
        seeds: ctx.config.seeds(),
        unimanual_demos_per_arm_and_task: ctx.config.demos.unimanual,
        bimanual_demos_per_task: ctx.config.demos.bimanual,
        weight_demos: summary.weight_demos,
        joint_policy_trained: models.joint.is_some(),
        weight_net_fallback_uniform: summary.weights.fallback_uniform,
        final_loss: FinalLosses {
            left: summary.left.loss_curve.last().copied(),
            right: summary.right.loss_curve.last().copied(),
            joint: summary.joint.as_ref().and_then(|j| j.loss_curve.last().copied()),
            weights: summary.weights.final_loss,
        },
    };
    write_json(&l.train_manifest(), &Envelope::new(TRAIN_MANIFEST, &ctx.hash, manifest))
}

pub fn load_models(ctx: &Context) -> CliResult<Models> {
    let l = &ctx.layout;
    let hint = "run `train` first";
    let policy = |name: &str| -> CliResult<PolicyCheckpoint> {
        Ok(read_envelope::<PolicyCheckpoint>(&l.model(name), POLICY, hint)?.payload)
    };
    let manifest = read_envelope::<TrainManifest>(&l.train_manifest(), TRAIN_MANIFEST, hint)?.payload;
    Ok(Models {
        left: policy("left_policy")?,
        right: policy("right_policy")?,
        joint: if manifest.joint_policy_trained { Some(policy("joint_policy")?) } else { None },
        weight_net: read_envelope::<WeightNet>(&l.model("weight_net"), WEIGHT_NET, hint)?.payload,
    })
}

pub fn cmd_calibrate(ctx: &Context) -> CliResult<Thresholds> {
    let demos = load_demos(ctx)?;
    let models = load_models(ctx)?;
    let t = pipeline::calibrate(&ctx.config, &demos, &models)?;
    write_json(&ctx.layout.thresholds(), &Envelope::new(THRESHOLDS, &ctx.hash, &t))?;
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsUsed {
    pub tau_low: f64,
    pub tau_high: f64,
    /// `calibration` or `config`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub label: String,
    pub strategy: Strategy,
    pub compose: bool,
    pub temporal: bool,
    pub spatial: bool,
    pub mean_success: f64,
    pub mean_collision_rate: f64,
    pub mean_denoise_steps: f64,
    /// Control steps over all episodes.
    pub control_steps: usize,
    /// `step_histogram[k]`: control steps that used `k` denoising steps.
    pub step_histogram: Vec<usize>,
    pub suite: SuiteReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub experiment: String,
    pub master_seed: u64,
    pub episodes_per_task: usize,
    pub tasks: Vec<TaskKind>,
    pub thresholds: ThresholdsUsed,
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSummary {
    pub steps_used: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub termination: Option<Termination>,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogRecord {
    Header {
        schema_version: u32,
        config_hash: String,
    },
    Step {
        row: String,
        strategy: Strategy,
        task: TaskKind,
        episode: usize,
        step: usize,
        left: ArmAction,
        right: ArmAction,
        breakdown: EnergyBreakdown,
        trace: TraceSummary,
    },
    Episode {
        row: String,
        strategy: Strategy,
        task: TaskKind,
        episode: usize,
        seed: u64,
        success: bool,
        failure: Option<FailureReason>,
        min_ee_distance: f64,
    },
}

/// Calibrated thresholds when enabled and present, else the sampler's.
pub fn thresholds_used(ctx: &Context) -> CliResult<ThresholdsUsed> {
    let s = &ctx.config.sampler;
    let from_config = ThresholdsUsed { tau_low: s.tau_low, tau_high: s.tau_high, source: "config".into() };
    if !ctx.config.eval.use_calibration {
        return Ok(from_config);
    }
    match read_envelope::<Thresholds>(&ctx.layout.thresholds(), THRESHOLDS, "run `calibrate` first") {
        Ok(env) => Ok(ThresholdsUsed {
            tau_low: env.payload.tau_low,
            tau_high: env.payload.tau_high,
            source: "calibration".into(),
        }),
        Err(CliError::MissingInput { .. }) => Ok(from_config),
        Err(e) => Err(e),
    }
}

fn push_line(buf: &mut Vec<u8>, record: &LogRecord) {
    serde_json::to_writer(&mut *buf, record).expect("log record serializes");
    buf.push(b'\n');
}

/// Evaluates every configured (strategy, ablation) row and writes the
/// report, the summary table and the trajectory log.
pub fn cmd_eval(ctx: &Context) -> CliResult<EvalReport> {
    let models = load_models(ctx)?;
    let cfg = &ctx.config;
    let thresholds = thresholds_used(ctx)?;
    let episodes = cfg.eval.episodes;
    let mut log = Vec::new();
    push_line(&mut log, &LogRecord::Header { schema_version: SCHEMA_VERSION, config_hash: ctx.hash.clone() });

    let mut rows = Vec::new();
    for ablation in &cfg.eval.ablations {
        for &strategy in &cfg.eval.strategies {
            let sampler = SamplerConfig {
                strategy,
                tau_low: thresholds.tau_low,
                tau_high: thresholds.tau_high,
                ..cfg.sampler
            };
            sampler.validate()?;
            let suite = pipeline::evaluate_row(cfg, &models, ablation, &sampler, episodes)?;
            let label = ablation.label();
            let mut histogram = vec![0usize; sampler.n_max + 1];
            let mut control_steps = 0;
            for e in &suite.episodes {
                for s in &e.steps {
                    histogram[s.steps_used.min(sampler.n_max)] += 1;
                    control_steps += 1;
                    push_line(
                        &mut log,
                        &LogRecord::Step {
                            row: label.clone(),
                            strategy,
                            task: e.task,
                            episode: e.episode,
                            step: s.step,
                            left: s.executed.left,
                            right: s.executed.right,
                            breakdown: s.breakdown,
                            trace: TraceSummary {
                                steps_used: s.steps_used,
                                initial_energy: s.initial_energy,
                                final_energy: s.final_energy,
                                termination: s.termination,
                            },
                        },
                    );
                }
                push_line(
                    &mut log,
                    &LogRecord::Episode {
                        row: label.clone(),
                        strategy,
                        task: e.task,
                        episode: e.episode,
                        seed: e.seed,
                        success: e.success,
                        failure: e.failure,
                        min_ee_distance: e.min_ee_distance,
                    },
                );
            }
            let suite = SuiteReport { episodes: suite.episodes.iter().map(|e| e.without_steps()).collect(), ..suite };
            rows.push(EvalRow {
                label,
                strategy,
                compose: ablation.compose(),
                temporal: ablation.temporal(),
                spatial: ablation.spatial(),
                mean_success: suite.mean_success,
                mean_collision_rate: suite.mean_collision_rate,
                mean_denoise_steps: suite.mean_denoise_steps,
                control_steps,
                step_histogram: histogram,
                suite,
            });
        }
    }
    let report = EvalReport {
        experiment: cfg.experiment.clone(),
        master_seed: cfg.seed,
        episodes_per_task: episodes,
        tasks: cfg.tasks.clone(),
        thresholds,
        rows,
    };
    write_json(&ctx.layout.report(), &Envelope::new(REPORT, &ctx.hash, &report))?;
    write_bytes(&ctx.layout.summary(), summary_table(&report, &ctx.hash).as_bytes())?;
    write_bytes(&ctx.layout.trajectories(), &log)?;
    Ok(report)
}

/// Human-readable table, one line per row.
pub fn summary_table(report: &EvalReport, hash: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema_version={SCHEMA_VERSION} config_hash={hash}");
    let _ = writeln!(
        out,
        "# experiment={} seed={} episodes_per_task={} tau_low={} tau_high={} ({})",
        report.experiment,
        report.master_seed,
        report.episodes_per_task,
        report.thresholds.tau_low,
        report.thresholds.tau_high,
        report.thresholds.source
    );
    let tasks: Vec<&str> = report.tasks.iter().map(|t| t.name()).collect();
    let _ = write!(out, "{:<26} {:<11} {:>8} {:>10} {:>10}", "row", "strategy", "success", "collision", "mean_steps");
    for t in &tasks {
        let _ = write!(out, " {t:>15}");
    }
    out.push('\n');
    for r in &report.rows {
        let _ = write!(
            out,
            "{:<26} {:<11} {:>8.3} {:>10.3} {:>10.3}",
            r.label,
            r.strategy.name(),
            r.mean_success,
            r.mean_collision_rate,
            r.mean_denoise_steps
        );
        for t in &report.tasks {
            let rate = r.suite.tasks.iter().find(|s| s.task == *t).map_or(f64::NAN, |s| s.success_rate);
            let _ = write!(out, " {rate:>15.3}");
        }
        out.push('\n');
    }
    out
}

pub fn load_report(ctx: &Context) -> CliResult<Envelope<EvalReport>> {
    read_envelope(&ctx.layout.report(), REPORT, "run `eval` first")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub row: String,
    pub strategy: Strategy,
    pub steps: usize,
    pub count: usize,
    pub schema_version: u32,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub strategy: Strategy,
    pub compose: bool,
    pub temporal: bool,
    pub spatial: bool,
    pub mean_success: f64,
    pub mean_collision_rate: f64,
    pub mean_denoise_steps: f64,
    pub schema_version: u32,
    pub config_hash: String,
}

/// Writes `step_histogram.csv` (row, strategy, steps, count) and
/// `ablation_bars.csv` (one line per report row) from the eval report.
pub fn cmd_export_plots(ctx: &Context) -> CliResult<()> {
    let env = load_report(ctx)?;
    let report = &env.payload;
    let hash = env.config_hash.clone();
    let mut hist = Vec::new();
    let mut bars = Vec::new();
    for r in &report.rows {
        if r.step_histogram.iter().sum::<usize>() != r.control_steps {
            return Err(CliError::Schema {
                path: ctx.layout.report(),
                message: format!("row {} {}: histogram does not sum to control steps", r.label, r.strategy.name()),
            });
        }
        for (steps, &count) in r.step_histogram.iter().enumerate() {
            hist.push(HistogramRow {
                row: r.label.clone(),
                strategy: r.strategy,
                steps,
                count,
                schema_version: env.schema_version,
                config_hash: hash.clone(),
            });
        }
        bars.push(AblationRow {
            row: r.label.clone(),
            strategy: r.strategy,
            compose: r.compose,
            temporal: r.temporal,
            spatial: r.spatial,
            mean_success: r.mean_success,
            mean_collision_rate: r.mean_collision_rate,
            mean_denoise_steps: r.mean_denoise_steps,
            schema_version: env.schema_version,
            config_hash: hash.clone(),
        });
    }
    write_csv(&ctx.layout.histogram_csv(), &hist)?;
    write_csv(&ctx.layout.ablation_csv(), &bars)
}

/// Parses the trajectory log back into records.
pub fn read_log(path: &std::path::Path) -> CliResult<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| CliError::Schema {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
