//! The in-memory pipeline: demonstrations, training, calibration and
//! evaluation. The command layer adds persistence around these steps.

use dualflow::composition::{ArmPair, BimanualField, ComposedPolicy, JointPolicy};
use dualflow::coordination::{
    train_weight_net, CoordConfig, Coordinator, WeightDemo, WeightNet, WeightTrainReport,
};
use dualflow::kinematics::ACTION_DIM;
use dualflow::numerics::derive_seed;
use dualflow::policy::{Normalizer, PolicyCheckpoint, TrainHyper, TrainReport, train_unimanual};
use dualflow::sampler::{initial_noise, SampleContext, SamplerConfig};
use dualflow::world::{
    bimanual_training_pairs, evaluate_suite, gen_bimanual_demos, gen_unimanual_demos, unimanual_training_pairs,
    weight_demos, Demonstration, FlowController, Side, SuiteReport, TaskSpec, UnimanualDemo,
};
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::error::{CliError, CliResult};

/// All demonstrations of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDemos {
    pub spec: TaskSpec,
    pub left: Vec<UnimanualDemo>,
    pub right: Vec<UnimanualDemo>,
    pub bimanual: Vec<Demonstration>,
}

pub fn generate_demos(cfg: &RunConfig) -> CliResult<Vec<TaskDemos>> {
    let seed = cfg.seeds().demos;
    cfg.task_suite()
        .into_iter()
        .map(|spec| {
            let n = cfg.demos.unimanual;
            Ok(TaskDemos {
                left: gen_unimanual_demos(&spec, Side::Left, n, seed)?,
                right: gen_unimanual_demos(&spec, Side::Right, n, seed)?,
                bimanual: gen_bimanual_demos(&spec, cfg.demos.bimanual, seed)?,
                spec,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub left: TrainReport,
    pub right: TrainReport,
    pub joint: Option<TrainReport>,
    pub weights: WeightTrainReport,
    pub weight_demos: usize,
}

/// Trained models: one policy per arm shared across tasks, an optional
/// policy over both arms, and the weight predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub left: PolicyCheckpoint,
    pub right: PolicyCheckpoint,
    pub joint: Option<PolicyCheckpoint>,
    pub weight_net: WeightNet,
}

fn seeded(h: &TrainHyper, seed: u64) -> TrainHyper {
    TrainHyper { seed, ..h.clone() }
}

/// Weight-predictor training data, every `stride`-th step of each demo.
pub fn weight_training_set(cfg: &RunConfig, demos: &[TaskDemos]) -> CliResult<Vec<WeightDemo>> {
    let mut out = Vec::new();
    for d in demos {
        out.extend(weight_demos(&d.spec, &d.bimanual)?.into_iter().step_by(cfg.weight_demo_stride));
    }
    Ok(out)
}

pub fn coordinator_for(
    spec: &TaskSpec,
    normalizers: ArmPair<Normalizer>,
    config: CoordConfig,
    weight_net: WeightNet,
) -> CliResult<Coordinator> {
    Ok(Coordinator::new(spec.geoms, normalizers, config, weight_net)?)
}

pub fn train_models(cfg: &RunConfig, demos: &[TaskDemos]) -> CliResult<(Models, TrainSummary)> {
    let seeds = cfg.seeds();
    let left_pairs = unimanual_training_pairs(demos.iter().flat_map(|d| &d.left));
    let right_pairs = unimanual_training_pairs(demos.iter().flat_map(|d| &d.right));
    let (left, left_report) = train_unimanual(&left_pairs, &seeded(&cfg.policy, seeds.left_policy))?;
    let (right, right_report) = train_unimanual(&right_pairs, &seeded(&cfg.policy, seeds.right_policy))?;

    let joint_pairs = bimanual_training_pairs(demos.iter().flat_map(|d| &d.bimanual));
    let (joint, joint_report) = if joint_pairs.is_empty() {
        (None, None)
    } else {
        let (ckpt, report) = train_unimanual(&joint_pairs, &seeded(&cfg.joint_policy, seeds.joint_policy))?;
        (Some(ckpt), Some(report))
    };

    let wd = weight_training_set(cfg, demos)?;
    let spec = demos
        .first()
        .map(|d| d.spec.clone())
        .ok_or_else(|| CliError::Config("no tasks to train on".into()))?;
    let hyper = dualflow::coordination::WeightTrainHyper { seed: seeds.weights, ..cfg.weights.clone() };
    let coord = coordinator_for(
        &spec,
        ArmPair::new(left.normalizer.clone(), right.normalizer.clone()),
        cfg.coordination,
        WeightNet::uniform(ACTION_DIM, hyper.hidden, 0)?,
    )?;
    let field = ComposedPolicy::new(&left, &right, cfg.sampler.guidance);
    let (weight_net, weight_report) = train_weight_net(&wd, &field, &coord, &hyper)?;

    let summary = TrainSummary {
        left: left_report,
        right: right_report,
        joint: joint_report,
        weights: weight_report,
        weight_demos: wd.len(),
    };
    Ok((Models { left, right, joint, weight_net }, summary))
}

/// Splits a normalizer over `[left; right]` into per-arm halves.
pub fn split_normalizer(n: &Normalizer, left_dim: usize) -> ArmPair<Normalizer> {
    ArmPair::new(
        Normalizer { mean: n.mean[..left_dim].to_vec(), std: n.std[..left_dim].to_vec() },
        Normalizer { mean: n.mean[left_dim..].to_vec(), std: n.std[left_dim..].to_vec() },
    )
}

/// Linear interpolation between closest ranks; `sorted` must be ascending.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub tau_low: f64,
    pub tau_high: f64,
    pub low_percentile: f64,
    pub high_percentile: f64,
    pub samples: usize,
    pub min_energy: f64,
    pub max_energy: f64,
}

/// Thresholds at the configured percentiles of `energies`.
pub fn thresholds_from(energies: &[f64], low: f64, high: f64) -> CliResult<Thresholds> {
    let mut sorted: Vec<f64> = energies.iter().copied().filter(|e| e.is_finite()).collect();
    if sorted.is_empty() {
        return Err(CliError::EmptyDistribution { samples: energies.len() });
    }
    sorted.sort_by(f64::total_cmp);
    let (tau_low, tau_high) = (percentile(&sorted, low), percentile(&sorted, high));
    if !(tau_low < tau_high) {
        return Err(CliError::DegenerateDistribution { tau_low, tau_high, samples: sorted.len() });
    }
    Ok(Thresholds {
        tau_low,
        tau_high,
        low_percentile: low,
        high_percentile: high,
        samples: sorted.len(),
        min_energy: sorted[0],
        max_energy: sorted[sorted.len() - 1],
    })
}

/// `E_total` at the sampler's noise initialization (`t = 0`) over the
/// bimanual training states, with the full coordinator: the quantity the
/// adaptive budget thresholds.
pub fn training_energies(cfg: &RunConfig, demos: &[TaskDemos], models: &Models) -> CliResult<Vec<f64>> {
    let field = ComposedPolicy::new(&models.left, &models.right, cfg.sampler.guidance);
    let normalizers = ArmPair::new(models.left.normalizer.clone(), models.right.normalizer.clone());
    let seed = cfg.seeds().calibration;
    let mut energies = Vec::new();
    for (ti, d) in demos.iter().enumerate() {
        let coord = coordinator_for(&d.spec, normalizers.clone(), cfg.coordination, models.weight_net.clone())?;
        for (i, w) in weight_demos(&d.spec, &d.bimanual)?.iter().enumerate() {
            for draw in 0..cfg.calibration.draws_per_state {
                let ctx = SampleContext {
                    field: &field,
                    coordinator: Some(&coord),
                    normalizers: &normalizers,
                    history: &w.history,
                    conds: &w.conds,
                };
                let z0 = initial_noise(ctx.action_dims(), derive_seed(seed, &[ti as u64, i as u64, draw as u64]));
                let e = dualflow::coordination::total_energy(&field, Some(&coord), &z0, &w.history, 0.0, &w.conds)?;
                energies.push(e.e_total);
            }
        }
    }
    Ok(energies)
}

pub fn calibrate(cfg: &RunConfig, demos: &[TaskDemos], models: &Models) -> CliResult<Thresholds> {
    let energies = training_energies(cfg, demos, models)?;
    thresholds_from(&energies, cfg.calibration.low_percentile, cfg.calibration.high_percentile)
}

/// Runs one ablation row over the suite. Each task gets its own coordinator
/// so per-task arm geometry is respected.
pub fn evaluate_row(
    cfg: &RunConfig,
    models: &Models,
    ablation: &Ablation,
    sampler: &SamplerConfig,
    episodes: usize,
) -> CliResult<SuiteReport> {
    let composed = ComposedPolicy::new(&models.left, &models.right, sampler.guidance);
    let joint_policy;
    let (field, normalizers): (&dyn BimanualField, ArmPair<Normalizer>) = if ablation.compose() {
        (&composed, ArmPair::new(models.left.normalizer.clone(), models.right.normalizer.clone()))
    } else {
        let joint = models
            .joint
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("row `{ablation}` needs a joint policy, but no bimanual demos were given")))?;
        joint_policy = JointPolicy::new(joint, ACTION_DIM);
        (&joint_policy, split_normalizer(&joint.normalizer, ACTION_DIM))
    };
    let mask = ablation.mask();
    let seed = cfg.seeds().eval;
    let mut episodes_out = Vec::new();
    let mut safe = Vec::new();
    for spec in cfg.task_suite() {
        let coord = if mask.is_empty() {
            None
        } else {
            let config = CoordConfig { mask, ..cfg.coordination };
            Some(coordinator_for(&spec, normalizers.clone(), config, models.weight_net.clone())?)
        };
        let controller = FlowController {
            field,
            coordinator: coord.as_ref(),
            normalizers: normalizers.clone(),
            sampler: *sampler,
        };
        let report = evaluate_suite(std::slice::from_ref(&spec), &controller, episodes, seed)?;
        safe.push((spec.kind, spec.d_safe));
        episodes_out.extend(report.episodes);
    }
    Ok(SuiteReport::from_episodes(seed, episodes, episodes_out, &safe))
}
