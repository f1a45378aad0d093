//! Experiment configuration documents.
//!
//! A config is a TOML file with the sections `[net]`, `[data]`, `[sweep]`,
//! `[kernel]`, `[output]`, plus `[train]`, `[active]` and `[bench]` for the
//! commands that need them. Every section and key is optional; unknown keys
//! are rejected and parse errors carry line and column.

use std::path::{Path, PathBuf};

use pntk::active::{Acquisition, LookaheadOptions};
use pntk::net::{Activation, Init, NetworkSpec, Parameterization, TrainConfig};
use pntk::ntk::{KernelConfig, PntkMode};
use pntk::regress::Jitter;
use pntk::{Error, Result};
use serde::{Deserialize, Serialize};

/// Epochs at which the reference setup snapshots networks; the desk-scale
/// `sweep.checkpoints` default maps onto these one-to-one.
pub const REFERENCE_CHECKPOINTS: [usize; 5] = [0, 50, 100, 150, 200];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub net: NetSection,
    pub data: DataSection,
    pub sweep: SweepSection,
    pub kernel: KernelSection,
    pub output: OutputSection,
    pub train: TrainSection,
    pub active: ActiveSection,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    /// Number of weight layers; `depth - 1` hidden layers.
    pub depth: usize,
    /// Hidden width for commands that use a single network.
    pub width: usize,
    pub activation: Activation,
    pub init: Init,
    pub parameterization: Parameterization,
    pub seed: u64,
}

impl Default for NetSection {
    fn default() -> Self {
        Self {
            depth: 3,
            width: 256,
            activation: Activation::Relu,
            init: Init::HeFanInGaussian,
            parameterization: Parameterization::Standard,
            seed: 0,
        }
    }
}

impl NetSection {
    pub fn spec(&self, input_dim: usize, width: usize, output_dim: usize, seed: u64) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            hidden_widths: vec![width; self.depth.saturating_sub(1)],
            output_dim,
            activation: self.activation,
            init: self.init,
            parameterization: self.parameterization,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Gaussian clusters generated from `classes`, `per_class`, `dim`,
    /// `separation` and `seed`.
    Synthetic,
    /// `images` + `labels` IDX files.
    Idx,
    /// CIFAR binary batches listed in `batches`.
    Cifar,
    /// A labeled set in `NTKD` format at `path`.
    Ntkd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub batches: Vec<PathBuf>,
    pub path: Option<PathBuf>,
    pub train_n: usize,
    pub test_n: usize,
    pub split_seed: u64,
    pub stratified: bool,
    pub standardize: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            classes: 10,
            per_class: 150,
            dim: 32,
            separation: 4.0,
            seed: 0,
            images: None,
            labels: None,
            batches: Vec::new(),
            path: None,
            train_n: 1000,
            test_n: 500,
            split_seed: 0,
            stratified: true,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Training epochs at which kernels are measured; `0` is initialization.
    pub checkpoints: Vec<usize>,
    /// Training points whose Grams are compared.
    pub points: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256, 512, 1024],
            seeds: vec![0, 1, 2, 3, 4],
            checkpoints: vec![0, 5, 10, 20, 40],
            points: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Entk,
    Pntk,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub kind: KernelChoice,
    pub mode: PntkMode,
    pub jitter: Jitter,
    pub center_with_f0: bool,
    pub memory_cap_gb: f64,
    pub jacobian_mb: u64,
    pub batch_points: usize,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: KernelChoice::Both,
            mode: PntkMode::SumOfLogits,
            jitter: Jitter::default(),
            center_with_f0: true,
            memory_cap_gb: 4.0,
            jacobian_mb: 512,
            batch_points: 64,
        }
    }
}

impl KernelSection {
    pub fn limits(&self) -> KernelConfig {
        KernelConfig {
            batch_points: self.batch_points,
            jacobian_bytes: self.jacobian_mb << 20,
            memory_cap_bytes: (self.memory_cap_gb * (1u64 << 30) as f64) as u64,
        }
    }

    pub fn wants_entk(&self) -> bool {
        matches!(self.kind, KernelChoice::Entk | KernelChoice::Both)
    }

    pub fn wants_pntk(&self) -> bool {
        matches!(self.kind, KernelChoice::Pntk | KernelChoice::Both)
    }
}

pub const FORMATS: [&str; 4] = ["csv", "json", "ntkm", "predictions"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Subset of `csv`, `json`, `ntkm` (kernel binaries) and `predictions`
    /// (per-run prediction tables).
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            formats: vec!["csv".into(), "json".into()],
        }
    }
}

impl OutputSection {
    pub fn has(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr: f64,
    /// Retry learning rate when training at `lr` diverges; `0` disables.
    pub lr_fallback: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.1,
            lr_fallback: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, epochs: usize, checkpoints: Vec<usize>) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs,
            seed: self.seed,
            checkpoints,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionChoice {
    Pntk,
    Entk,
    Random,
}

impl AcquisitionChoice {
    pub fn resolve(self, mode: PntkMode) -> Acquisition {
        match self {
            AcquisitionChoice::Pntk => Acquisition::Pntk(mode),
            AcquisitionChoice::Entk => Acquisition::Entk,
            AcquisitionChoice::Random => Acquisition::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveSection {
    /// Pool size drawn from the training split; `0` uses the whole split.
    pub pool: usize,
    pub initial_labeled: usize,
    pub per_cycle: usize,
    pub cycles: usize,
    pub acquisitions: Vec<AcquisitionChoice>,
    pub candidate_pool_cap: usize,
    pub ref_set_size: usize,
    pub retrain_epochs: usize,
    pub seed: u64,
}

impl Default for ActiveSection {
    fn default() -> Self {
        Self {
            pool: 500,
            initial_labeled: 100,
            per_cycle: 20,
            cycles: 5,
            acquisitions: vec![
                AcquisitionChoice::Pntk,
                AcquisitionChoice::Entk,
                AcquisitionChoice::Random,
            ],
            candidate_pool_cap: 0,
            ref_set_size: 100,
            retrain_epochs: 10,
            seed: 0,
        }
    }
}

impl ActiveSection {
    pub fn lookahead(&self, kernel: &KernelSection) -> LookaheadOptions {
        LookaheadOptions {
            jitter: kernel.jitter,
            center_with_f0: kernel.center_with_f0,
            kernel: kernel.limits(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub points: Vec<usize>,
    pub outputs: Vec<usize>,
    pub widths: Vec<usize>,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            points: vec![50, 100, 200],
            outputs: vec![10],
            widths: vec![64, 256],
            warmup: 1,
            repetitions: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(describe(&e, text)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// `--seed` override: network, sweep, training, split-independent AL seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.net.seed = seed;
        self.sweep.seeds = vec![seed];
        self.train.seed = seed;
        self.active.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.net.depth == 0 {
            return bad("net.depth must be >= 1".into());
        }
        if self.net.width == 0 || self.sweep.widths.contains(&0) {
            return bad("widths must be >= 1".into());
        }
        if self.data.classes == 0 || self.data.dim == 0 || self.data.per_class == 0 {
            return bad("data.classes, data.dim and data.per_class must be >= 1".into());
        }
        if self.data.train_n == 0 || self.data.test_n == 0 {
            return bad("data.train_n and data.test_n must be >= 1".into());
        }
        if !(self.kernel.memory_cap_gb > 0.0) {
            return bad("kernel.memory_cap_gb must be positive".into());
        }
        if self.kernel.batch_points == 0 || self.kernel.jacobian_mb == 0 {
            return bad("kernel.batch_points and kernel.jacobian_mb must be >= 1".into());
        }
        match self.kernel.jitter {
            Jitter::Relative(j) | Jitter::Absolute(j) if !(j >= 0.0) || !j.is_finite() => {
                return bad(format!("kernel.jitter must be finite and >= 0, got {j}"));
            }
            _ => {}
        }
        if let Some(f) = self.output.formats.iter().find(|f| !FORMATS.contains(&f.as_str())) {
            return bad(format!("unknown output format {f:?}; expected one of {FORMATS:?}"));
        }
        if self.sweep.points == 0 {
            return bad("sweep.points must be >= 1".into());
        }
        if self.bench.repetitions == 0 {
            return bad("bench.repetitions must be >= 1".into());
        }
        self.train.to_train_config(1, Vec::new()).validate()?;
        let lr = self.train.lr_fallback;
        if !(lr >= 0.0) || !lr.is_finite() {
            return bad(format!("train.lr_fallback must be finite and >= 0, got {lr}"));
        }
        Ok(())
    }
}

/// `line L, column C: message`, 1-based, from a TOML error.
fn describe(e: &toml::de::Error, text: &str) -> String {
    match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
            format!("line {line}, column {col}: {}", e.message())
        }
        None => e.message().to_string(),
    }
}
