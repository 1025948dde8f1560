use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{RingSpec, Split};
use crate::eval::AttackConfig;
use crate::featuremap::FeatureKind;
use crate::norm::Norm;
use crate::separability::{DEFAULT_FW_TOL, DEFAULT_VERDICT_TOL};
use crate::train::TrainConfig;

pub const OUT_DIR_ENV: &str = "CONVEXCERT_OUT_DIR";

/// Fully resolved settings of one CLI invocation. Every field has a
/// default, so a config file may set any subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    pub data: DataConfig,
    /// Model file to read (or, for `train`, to write).
    pub model: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub norms: Vec<Norm>,
    /// Re-balance τ on the evaluated data instead of using the stored one.
    pub balance_on_data: bool,
    pub radii: RadiiConfig,
    pub surface: SurfaceConfig,
    pub attack: AttackRunConfig,
    pub separability: SeparabilityConfig,
    pub bound: BoundConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: String::new(),
            out_dir: PathBuf::from("convexcert-out"),
            threads: None,
            data: DataConfig::default(),
            model: None,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            norms: Norm::ALL.to_vec(),
            balance_on_data: false,
            radii: RadiiConfig::default(),
            surface: SurfaceConfig::default(),
            attack: AttackRunConfig::default(),
            separability: SeparabilityConfig::default(),
            bound: BoundConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `train-*` / `t10k-*` IDX files.
    pub data_dir: Option<PathBuf>,
    /// Labelled CSV (label, then features).
    pub csv: Option<PathBuf>,
    /// Synthetic ring data.
    pub ring: Option<RingSpec>,
    /// Digit mapped to class 1.
    pub class_a: u8,
    /// Digit mapped to class 2.
    pub class_b: u8,
    /// Defaults to `train` for training-like commands, `test` otherwise.
    pub split: Option<Split>,
    /// Keep only the first `limit` samples.
    pub limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            data_dir: None,
            csv: None,
            ring: None,
            class_a: 3,
            class_b: 8,
            split: None,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub passthrough: bool,
    pub feature: FeatureKind,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![200, 50],
            passthrough: true,
            feature: FeatureKind::MeanOffsetAbsConcat,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadiiConfig {
    /// Explicit grid; must start at 0 and ascend.
    pub values: Option<Vec<f64>>,
    /// Upper end of the even grid; defaults to the largest finite radius.
    pub max: Option<f64>,
    pub count: usize,
}

impl Default for RadiiConfig {
    fn default() -> Self {
        RadiiConfig {
            values: None,
            max: None,
            count: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceConfig {
    /// Explicit τ grid; otherwise quantiles of the evaluated logits.
    pub taus: Option<Vec<f32>>,
    pub quantiles: usize,
}

impl Default for SurfaceConfig {
    fn default() -> Self {
        SurfaceConfig {
            taus: None,
            quantiles: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackRunConfig {
    pub steps: usize,
    pub restarts: usize,
    pub step_size: Option<f64>,
    pub seed: u64,
    /// Attack budget as a multiple of the certified radius.
    pub factor: f64,
}

impl Default for AttackRunConfig {
    fn default() -> Self {
        let a = AttackConfig::default();
        AttackRunConfig {
            steps: a.steps,
            restarts: a.restarts,
            step_size: a.step_size,
            seed: a.seed,
            factor: 0.999,
        }
    }
}

impl AttackRunConfig {
    pub fn for_sample(&self, index: usize) -> AttackConfig {
        AttackConfig {
            steps: self.steps,
            restarts: self.restarts,
            step_size: self.step_size,
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparabilityConfig {
    pub tol: f64,
    pub fw_tol: f64,
    /// Defaults to 50 per class-2 point.
    pub max_iters: Option<usize>,
    /// Cap on points taken from each class.
    pub max_points: Option<usize>,
    /// Test class-2 points against the hull of class 1.
    pub swap: bool,
}

impl Default for SeparabilityConfig {
    fn default() -> Self {
        SeparabilityConfig {
            tol: DEFAULT_VERDICT_TOL,
            fw_tol: DEFAULT_FW_TOL,
            max_iters: None,
            max_points: None,
            swap: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub d_max: usize,
    /// Monte-Carlo trials per row; 0 skips the simulation.
    pub trials: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            m: 2,
            n: 2,
            d_max: 6,
            trials: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Digit pairs; defaults to all 45 unordered pairs.
    pub pairs: Vec<[u8; 2]>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            pairs: (0..10u8).flat_map(|a| (a + 1..10).map(move |b| [a, b])).collect(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn split_or(&self, default: Split) -> Split {
        self.data.split.unwrap_or(default)
    }

    /// Checks the fields the current command needs before any work starts.
    pub fn validate(&self) -> Result<(), String> {
        let cmd = self.command.as_str();
        let needs_data = matches!(cmd, "train" | "certify" | "curve" | "surface" | "separability" | "attack" | "sweep");
        let needs_model = matches!(cmd, "certify" | "curve" | "surface" | "attack");
        if needs_data {
            let sources = [self.data.data_dir.is_some(), self.data.csv.is_some(), self.data.ring.is_some()]
                .iter()
                .filter(|&&b| b)
                .count();
            if sources != 1 {
                return Err(format!(
                    "`{cmd}` needs exactly one data source (--data-dir, --csv or --ring), got {sources}"
                ));
            }
            if self.data.data_dir.is_some() && self.data.class_a == self.data.class_b {
                return Err("--class-a and --class-b must differ".into());
            }
        }
        if cmd == "sweep" && self.data.data_dir.is_none() {
            return Err("`sweep` needs --data-dir".into());
        }
        if needs_model && self.model.is_none() {
            return Err(format!("`{cmd}` needs --model"));
        }
        if self.threads == Some(0) {
            return Err("--threads must be positive".into());
        }
        if matches!(cmd, "certify" | "curve" | "surface" | "attack") && self.norms.is_empty() {
            return Err("at least one norm is required".into());
        }
        if cmd == "train" || cmd == "sweep" {
            self.train.validate().map_err(|e| e.to_string())?;
            if self.network.hidden.is_empty() || self.network.hidden.contains(&0) {
                return Err("network.hidden must be nonempty and positive".into());
            }
        }
        if cmd == "attack" && !(self.attack.factor > 0.0) {
            return Err("attack factor must be positive".into());
        }
        if cmd == "bound" && (self.bound.m == 0 || self.bound.n == 0 || self.bound.d_max == 0) {
            return Err("bound needs M, N and d-max of at least 1".into());
        }
        if cmd == "separability" && !(self.separability.tol >= 0.0 && self.separability.fw_tol > 0.0) {
            return Err("separability tolerances must be positive".into());
        }
        if let Some(v) = &self.radii.values {
            if v.first() != Some(&0.0) || v.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err("radii must start at 0 and ascend".into());
            }
        } else if self.radii.count < 2 {
            return Err("radii.count must be at least 2".into());
        }
        Ok(())
    }
}
