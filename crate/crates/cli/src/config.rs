//! Run configuration, loaded from TOML.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected. Hyperparameter sections reuse the library types, and their
//! `seed` fields are overwritten with values split from the master `seed`.
//!
//! ```toml
//! experiment = "default"
//! seed = 0
//! out_dir = "runs/default"           # overridden by DUALFLOW_OUT, then --out
//! tasks = ["mirrored_reach", "sync_lift", "handover"]
//! weight_demo_stride = 3             # use every 3rd bimanual step for the weight net
//!
//! [demos]
//! unimanual = 60                     # per arm and task
//! bimanual = 20                      # per task
//!
//! [policy]                           # per-arm policies
//! epochs = 700
//! batch_size = 256
//! lr = 3e-3
//! cosine_decay = true
//! normalize_conditioning = true
//!
//! [joint_policy]                     # single policy over both arms
//! epochs = 2000
//! batch_size = 256
//! lr = 3e-3
//! cosine_decay = true
//! normalize_conditioning = true
//!
//! [weights]                          # weight predictor
//! epochs = 30
//! [coordination]                     # d_safe, d_safe_joint, position_only, mask
//! [sampler]                          # strategy, n_max, tau_low, tau_high, guidance
//!
//! [calibration]
//! low_percentile = 30.0
//! high_percentile = 90.0
//! draws_per_state = 1
//!
//! [eval]
//! episodes = 20
//! strategies = ["fixed", "adaptive", "early_stop"]
//! ablations = [[], ["spatial"], ["temporal"], ["temporal", "spatial"], ["compose", "temporal", "spatial"]]
//! use_calibration = true
//!
//! [[task_specs]]                     # full task spec replacing the preset of its kind
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use dualflow::coordination::{CoordConfig, TermMask, WeightTrainHyper};
use dualflow::numerics::derive_seed;
use dualflow::policy::TrainHyper;
use dualflow::sampler::{SamplerConfig, Strategy};
use dualflow::world::{TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "DUALFLOW_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoCounts {
    pub unimanual: usize,
    pub bimanual: usize,
}

impl Default for DemoCounts {
    fn default() -> Self {
        Self { unimanual: 60, bimanual: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub low_percentile: f64,
    pub high_percentile: f64,
    /// Noise draws per training state.
    pub draws_per_state: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { low_percentile: 30.0, high_percentile: 90.0, draws_per_state: 1 }
    }
}

/// A component that an ablation row removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Compose,
    Temporal,
    Spatial,
}

impl std::str::FromStr for Component {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "compose" => Ok(Component::Compose),
            "temporal" => Ok(Component::Temporal),
            "spatial" => Ok(Component::Spatial),
            other => Err(CliError::Config(format!("unknown ablation component `{other}`"))),
        }
    }
}

/// The set of removed components; empty is the full method.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<Component>", into = "Vec<Component>")]
pub struct Ablation(Vec<Component>);

impl From<Vec<Component>> for Ablation {
    fn from(mut v: Vec<Component>) -> Self {
        v.sort();
        v.dedup();
        Ablation(v)
    }
}

impl From<Ablation> for Vec<Component> {
    fn from(a: Ablation) -> Self {
        a.0
    }
}

impl Ablation {
    pub fn full() -> Self {
        Ablation(Vec::new())
    }

    pub fn none_enabled() -> Self {
        Ablation::from(vec![Component::Compose, Component::Temporal, Component::Spatial])
    }

    pub fn removes(&self, c: Component) -> bool {
        self.0.contains(&c)
    }

    pub fn compose(&self) -> bool {
        !self.removes(Component::Compose)
    }

    pub fn temporal(&self) -> bool {
        !self.removes(Component::Temporal)
    }

    pub fn spatial(&self) -> bool {
        !self.removes(Component::Spatial)
    }

    pub fn mask(&self) -> TermMask {
        TermMask::all().with_temporal(self.temporal()).with_spatial(self.spatial())
    }

    /// Enabled components joined by `+`, or `none`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.compose(), "compose"), (self.temporal(), "temporal"), (self.spatial(), "spatial")]
            .into_iter()
            .filter_map(|(on, name)| on.then_some(name))
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub strategies: Vec<Strategy>,
    pub ablations: Vec<Ablation>,
    /// Use `calibration/thresholds.json` when present instead of the
    /// sampler's `tau_low`/`tau_high`.
    pub use_calibration: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        use Component::*;
        Self {
            episodes: 20,
            strategies: Strategy::ALL.to_vec(),
            ablations: vec![
                Ablation::full(),
                Ablation::from(vec![Spatial]),
                Ablation::from(vec![Temporal]),
                Ablation::from(vec![Temporal, Spatial]),
                Ablation::none_enabled(),
            ],
            use_calibration: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub tasks: Vec<TaskKind>,
    pub task_specs: Vec<TaskSpec>,
    pub weight_demo_stride: usize,
    pub demos: DemoCounts,
    pub policy: TrainHyper,
    pub joint_policy: TrainHyper,
    pub weights: WeightTrainHyper,
    pub coordination: CoordConfig,
    pub sampler: SamplerConfig,
    pub calibration: CalibrationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let joint_policy = TrainHyper {
            batch_size: Some(256),
            lr: 3e-3,
            cosine_decay: true,
            normalize_conditioning: true,
            ..TrainHyper::default()
        };
        Self {
            experiment: "default".into(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            tasks: TaskKind::ALL.to_vec(),
            task_specs: Vec::new(),
            weight_demo_stride: 3,
            demos: DemoCounts::default(),
            policy: TrainHyper { epochs: 700, ..joint_policy.clone() },
            joint_policy,
            weights: WeightTrainHyper { epochs: 30, ..WeightTrainHyper::default() },
            coordination: CoordConfig::default(),
            sampler: SamplerConfig::default(),
            calibration: CalibrationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Seeds split from the master seed, one per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub demos: u64,
    pub left_policy: u64,
    pub right_policy: u64,
    pub joint_policy: u64,
    pub weights: u64,
    pub calibration: u64,
    pub eval: u64,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for (i, a) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(a) {
                return bad(format!("task {} listed twice", a.name()));
            }
        }
        for (i, s) in self.task_specs.iter().enumerate() {
            if self.task_specs[..i].iter().any(|o| o.kind == s.kind) {
                return bad(format!("two task_specs for {}", s.kind.name()));
            }
            s.validate()?;
        }
        if self.demos.unimanual == 0 {
            return bad("demos.unimanual must be >= 1".into());
        }
        if self.weight_demo_stride == 0 {
            return bad("weight_demo_stride must be >= 1".into());
        }
        let c = &self.calibration;
        if !(0.0..=100.0).contains(&c.low_percentile) || !(0.0..=100.0).contains(&c.high_percentile) {
            return bad("calibration percentiles must lie in [0, 100]".into());
        }
        if c.low_percentile > c.high_percentile {
            return bad("calibration low_percentile exceeds high_percentile".into());
        }
        if c.draws_per_state == 0 {
            return bad("calibration.draws_per_state must be >= 1".into());
        }
        if self.eval.episodes == 0 || self.eval.strategies.is_empty() || self.eval.ablations.is_empty() {
            return bad("eval needs episodes >= 1, a strategy and an ablation row".into());
        }
        self.sampler.validate()?;
        Ok(())
    }

    /// Task specs in `tasks` order, with overrides applied.
    pub fn task_suite(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|&k| {
                self.task_specs.iter().find(|s| s.kind == k).cloned().unwrap_or_else(|| TaskSpec::default_for(k))
            })
            .collect()
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = |path: &[u64]| derive_seed(self.seed, path);
        StageSeeds {
            demos: s(&[1]),
            left_policy: s(&[2, 0]),
            right_policy: s(&[2, 1]),
            joint_policy: s(&[2, 2]),
            weights: s(&[3]),
            calibration: s(&[4]),
            eval: s(&[5]),
        }
    }

    /// SHA-256 of the canonical TOML form, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { out_dir: PathBuf::new(), ..self.clone() };
        let text = toml::to_string(&canonical).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
