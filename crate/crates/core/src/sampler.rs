//! Bimanual action sampling: Euler integration of the composed field with
//! the coordination descent direction, under fixed, energy-budgeted and
//! early-stopping step schedules.

use serde::{Deserialize, Serialize};

use crate::composition::{ArmPair, BimanualAction, BimanualField, GuidanceWeights};
use crate::coordination::{Coordinator, EnergyBreakdown, PoseHistory};
use crate::kinematics::ArmAction;
use crate::numerics::SeededRng;
use crate::policy::{Conditioning, Normalizer};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fixed,
    Adaptive,
    EarlyStop,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Fixed, Strategy::Adaptive, Strategy::EarlyStop];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Adaptive => "adaptive",
            Strategy::EarlyStop => "early_stop",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Strategy::Fixed),
            "adaptive" => Ok(Strategy::Adaptive),
            "early_stop" | "early-stop" => Ok(Strategy::EarlyStop),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}`"))),
        }
    }
}

pub const DEFAULT_N_MAX: usize = 5;
pub const DEFAULT_TAU_LOW: f64 = 4.0;
pub const DEFAULT_TAU_HIGH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub n_max: usize,
    /// `-inf` and `+inf` are accepted as sentinels.
    pub tau_low: f64,
    pub tau_high: f64,
    pub guidance: GuidanceWeights,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fixed,
            n_max: DEFAULT_N_MAX,
            tau_low: DEFAULT_TAU_LOW,
            tau_high: DEFAULT_TAU_HIGH,
            guidance: GuidanceWeights::default(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max == 0 {
            return Err(Error::InvalidArgument("n_max must be >= 1".into()));
        }
        if self.tau_low.is_nan() || self.tau_high.is_nan() {
            return Err(Error::InvalidArgument("energy thresholds must not be NaN".into()));
        }
        let sentinel = self.tau_low.is_infinite() || self.tau_high.is_infinite();
        if !sentinel && self.tau_low >= self.tau_high {
            return Err(Error::InvalidArgument(format!(
                "tau_low ({}) must be below tau_high ({})",
                self.tau_low, self.tau_high
            )));
        }
        if !self.guidance.w_l.is_finite() || !self.guidance.w_r.is_finite() {
            return Err(Error::NonFinite("guidance weights"));
        }
        Ok(())
    }

    pub fn with_strategy(self, strategy: Strategy) -> Self {
        Self { strategy, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Fixed,
    Budget,
    EarlyEnergy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Flow time after the step.
    pub t: f64,
    pub energy_after: f64,
    /// Normalized state after the step.
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub initial_energy: f64,
    pub steps: Vec<TraceStep>,
    pub steps_used: usize,
    pub termination: Termination,
    /// Breakdown at the last probed state (`t = 1` unless stopped early).
    pub final_breakdown: EnergyBreakdown,
}

impl DenoiseTrace {
    pub fn final_energy(&self) -> f64 {
        self.steps.last().map_or(self.initial_energy, |s| s.energy_after)
    }
}

/// Everything a single denoising call reads.
#[derive(Clone, Copy)]
pub struct SampleContext<'a> {
    pub field: &'a dyn BimanualField,
    pub coordinator: Option<&'a Coordinator>,
    pub normalizers: &'a ArmPair<Normalizer>,
    pub history: &'a PoseHistory,
    pub conds: &'a ArmPair<Conditioning>,
}

/// Composed velocity, coordination analysis and total energy at one state.
struct Probe {
    v_total: ArmPair<Vec<f64>>,
    breakdown: EnergyBreakdown,
}

impl SampleContext<'_> {
    fn probe(&self, z: &ArmPair<Vec<f64>>, t: f64, need_velocity: bool) -> Result<Probe> {
        let e_comp = self.field.energy_proxy(z, t, self.conds)?;
        let analysis = self.coordinator.map(|c| c.analyze(z, self.history)).transpose()?;
        let breakdown = analysis
            .as_ref()
            .map_or_else(EnergyBreakdown::default, |a| a.breakdown())
            .with_comp(e_comp);
        let v_total = if need_velocity {
            let mut v = self.field.velocity(z, t, self.conds)?;
            if let Some(a) = &analysis {
                let g = a.weighted_gradient();
                v.left.iter_mut().zip(&g.left).for_each(|(x, gi)| *x -= gi);
                v.right.iter_mut().zip(&g.right).for_each(|(x, gi)| *x -= gi);
            }
            v
        } else {
            ArmPair::new(Vec::new(), Vec::new())
        };
        Ok(Probe { v_total, breakdown })
    }

    pub fn action_dims(&self) -> ArmPair<usize> {
        self.field.action_dims()
    }

    /// Maps a normalized state to physical arm actions.
    pub fn to_action(&self, z: &ArmPair<Vec<f64>>) -> Result<BimanualAction> {
        Ok(ArmPair::new(
            ArmAction::from_slice(&self.normalizers.left.denormalize(&z.left))?,
            ArmAction::from_slice(&self.normalizers.right.denormalize(&z.right))?,
        ))
    }
}

/// `v_comp - ∇E_coord` at normalized state `z`.
pub fn total_velocity(ctx: &SampleContext, z: &ArmPair<Vec<f64>>, t: f64) -> Result<ArmPair<Vec<f64>>> {
    Ok(ctx.probe(z, t, true)?.v_total)
}

/// `a_0 ~ N(0, I)` for both arms, drawn from `seed`.
pub fn initial_noise(dims: ArmPair<usize>, seed: u64) -> ArmPair<Vec<f64>> {
    let mut rng = SeededRng::new(seed);
    let left = rng.normal_vec(dims.left);
    let right = rng.normal_vec(dims.right);
    ArmPair::new(left, right)
}

/// Step count for initial energy `e`: 1 below `tau_low`, `n_max` above
/// `tau_high`, linear in between rounded half away from zero.
pub fn step_budget(e: f64, cfg: &SamplerConfig) -> usize {
    let n_max = cfg.n_max.max(1);
    if e < cfg.tau_low {
        return 1;
    }
    if e > cfg.tau_high || e.is_nan() {
        return n_max;
    }
    let frac = if cfg.tau_low == f64::NEG_INFINITY {
        1.0
    } else {
        ((e - cfg.tau_low) / (cfg.tau_high - cfg.tau_low)).clamp(0.0, 1.0)
    };
    let steps = (1.0 + frac * (n_max - 1) as f64).round() as usize;
    steps.clamp(1, n_max)
}

enum Stop {
    Never,
    BelowLow(f64),
}

fn run(
    ctx: &SampleContext,
    z0: ArmPair<Vec<f64>>,
    steps: usize,
    stop: Stop,
    termination: Termination,
) -> Result<(ArmPair<Vec<f64>>, DenoiseTrace)> {
    let dt = 1.0 / steps as f64;
    let mut z = z0;
    let mut probe = ctx.probe(&z, 0.0, true)?;
    let initial_energy = probe.breakdown.e_total;
    let mut trace = DenoiseTrace {
        initial_energy,
        steps: Vec::with_capacity(steps),
        steps_used: 0,
        termination,
        final_breakdown: probe.breakdown,
    };
    for k in 0..steps {
        let v = &probe.v_total;
        z.left.iter_mut().zip(&v.left).for_each(|(x, vi)| *x += dt * vi);
        z.right.iter_mut().zip(&v.right).for_each(|(x, vi)| *x += dt * vi);
        if !z.is_finite() {
            return Err(Error::SamplerDiverged { step: k + 1 });
        }
        let t = if k + 1 == steps { 1.0 } else { (k + 1) as f64 * dt };
        let last = k + 1 == steps;
        probe = ctx.probe(&z, t, !last)?;
        trace.steps.push(TraceStep { t, energy_after: probe.breakdown.e_total, state: z.concat() });
        trace.steps_used = k + 1;
        trace.final_breakdown = probe.breakdown;
        if let Stop::BelowLow(tau) = stop {
            if probe.breakdown.e_total < tau {
                trace.termination = Termination::EarlyEnergy;
                if !last {
                    // Return the clean-action estimate along the velocity the
                    // energy probe already evaluated.
                    let rest = 1.0 - t;
                    let v = &probe.v_total;
                    z.left.iter_mut().zip(&v.left).for_each(|(x, vi)| *x += rest * vi);
                    z.right.iter_mut().zip(&v.right).for_each(|(x, vi)| *x += rest * vi);
                    if !z.is_finite() {
                        return Err(Error::SamplerDiverged { step: k + 1 });
                    }
                }
                break;
            }
        }
    }
    Ok((z, trace))
}

fn check_ctx(ctx: &SampleContext, z0: &ArmPair<Vec<f64>>) -> Result<()> {
    let dims = ctx.action_dims();
    crate::error::check_dim("sampler left noise", dims.left, z0.left.len())?;
    crate::error::check_dim("sampler right noise", dims.right, z0.right.len())
}

/// Exactly `n_max` Euler steps of size `1/n_max` from `z0`.
pub fn denoise_fixed_from(
    ctx: &SampleContext,
    cfg: &SamplerConfig,
    z0: ArmPair<Vec<f64>>,
) -> Result<(ArmPair<Vec<f64>>, DenoiseTrace)> {
    cfg.validate()?;
    check_ctx(ctx, &z0)?;
    run(ctx, z0, cfg.n_max, Stop::Never, Termination::Fixed)
}

/// Budget fixed from the energy at `z0`, then that many steps of size `1/budget`.
pub fn denoise_adaptive_from(
    ctx: &SampleContext,
    cfg: &SamplerConfig,
    z0: ArmPair<Vec<f64>>,
) -> Result<(ArmPair<Vec<f64>>, DenoiseTrace)> {
    cfg.validate()?;
    check_ctx(ctx, &z0)?;
    let e0 = ctx.probe(&z0, 0.0, false)?.breakdown.e_total;
    run(ctx, z0, step_budget(e0, cfg), Stop::Never, Termination::Budget)
}

/// Steps of size `1/n_max`, stopping once the post-step energy drops below
/// `tau_low`. A stopped run returns `z_t + (1 - t) v_total(z_t, t)`.
pub fn denoise_early_stop_from(
    ctx: &SampleContext,
    cfg: &SamplerConfig,
    z0: ArmPair<Vec<f64>>,
) -> Result<(ArmPair<Vec<f64>>, DenoiseTrace)> {
    cfg.validate()?;
    check_ctx(ctx, &z0)?;
    run(ctx, z0, cfg.n_max, Stop::BelowLow(cfg.tau_low), Termination::Budget)
}

/// Samples from noise drawn with `cfg.seed` using `cfg.strategy`, returning
/// the normalized state, the physical action and the trace.
pub fn denoise(ctx: &SampleContext, cfg: &SamplerConfig) -> Result<(ArmPair<Vec<f64>>, BimanualAction, DenoiseTrace)> {
    let z0 = initial_noise(ctx.action_dims(), cfg.seed);
    let (z, trace) = match cfg.strategy {
        Strategy::Fixed => denoise_fixed_from(ctx, cfg, z0)?,
        Strategy::Adaptive => denoise_adaptive_from(ctx, cfg, z0)?,
        Strategy::EarlyStop => denoise_early_stop_from(ctx, cfg, z0)?,
    };
    let action = ctx.to_action(&z)?;
    Ok((z, action, trace))
}

pub fn denoise_fixed(ctx: &SampleContext, cfg: &SamplerConfig) -> Result<(BimanualAction, DenoiseTrace)> {
    let (_, a, t) = denoise(ctx, &cfg.with_strategy(Strategy::Fixed))?;
    Ok((a, t))
}

pub fn denoise_adaptive(ctx: &SampleContext, cfg: &SamplerConfig) -> Result<(BimanualAction, DenoiseTrace)> {
    let (_, a, t) = denoise(ctx, &cfg.with_strategy(Strategy::Adaptive))?;
    Ok((a, t))
}

pub fn denoise_early_stop(ctx: &SampleContext, cfg: &SamplerConfig) -> Result<(BimanualAction, DenoiseTrace)> {
    let (_, a, t) = denoise(ctx, &cfg.with_strategy(Strategy::EarlyStop))?;
    Ok((a, t))
}

/// Counts of `steps_used`, index `k` holding traces that used `k + 1` steps.
pub fn steps_histogram<'a>(traces: impl IntoIterator<Item = &'a DenoiseTrace>, n_max: usize) -> Vec<usize> {
    let mut bins = vec![0; n_max];
    for t in traces {
        if (1..=n_max).contains(&t.steps_used) {
            bins[t.steps_used - 1] += 1;
        }
    }
    bins
}
