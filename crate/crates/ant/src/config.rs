//! Run configuration: dataset, module recipes, training knobs, and output
//! location, stored in a line-oriented `key = value` file with `[section]`
//! headers. The serializer emits a canonical form whose re-parse is equal to
//! the original config, so a saved file reproduces a run exactly.
//!
//! Format rules: `#` starts a full-line comment, blank lines are ignored,
//! every key must appear under its section, unknown or duplicate keys are
//! rejected with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{Augment, PreprocessKind};
use crate::module::TaskKind;
use crate::module::{ModuleKind, ModuleSpec};
use crate::train::{Ablation, GrowthSpecs, TrainConfig};
use crate::{AntError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
    Sarcos,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Sarcos => "sarcos",
        }
    }

    pub fn is_image(self) -> bool {
        matches!(self, DatasetKind::Mnist | DatasetKind::Cifar10)
    }
}

/// Where the data lives and how to slice it before training.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX image/label files (image datasets).
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CSV files (tabular datasets).
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub input_cols: usize,
    pub target_cols: usize,
    pub val_fraction: f64,
    pub preprocess: PreprocessKind,
    /// Optional truncation of the loaded files (applied before the split).
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
}

impl DatasetConfig {
    /// A config for `kind` with no files set and default knobs.
    pub fn new(kind: DatasetKind) -> DatasetConfig {
        DatasetConfig {
            kind,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_csv: None,
            test_csv: None,
            input_cols: 21,
            target_cols: 7,
            val_fraction: 0.1,
            preprocess: PreprocessKind::None,
            limit_train: None,
            limit_test: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModulesConfig {
    pub router: String,
    pub transformer: String,
    pub solver: String,
    pub downsample_freq: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub modules: ModulesConfig,
    pub training: TrainConfig,
    pub ablation: Ablation,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn task(&self) -> TaskKind {
        match self.dataset.kind {
            DatasetKind::Mnist | DatasetKind::Cifar10 => TaskKind::Classification { classes: 10 },
            DatasetKind::Sarcos => TaskKind::Regression { dim: self.dataset.target_cols },
        }
    }

    /// Static per-sample input shape implied by the dataset kind.
    pub fn expected_input_shape(&self) -> Vec<usize> {
        match self.dataset.kind {
            DatasetKind::Mnist => vec![1, 28, 28],
            DatasetKind::Cifar10 => vec![3, 32, 32],
            DatasetKind::Sarcos => vec![self.dataset.input_cols],
        }
    }

    /// Parse the three module recipes; the downsample frequency applies to
    /// the transformer (routers and solvers never downsample on their own).
    pub fn growth_specs(&self) -> Result<GrowthSpecs> {
        Ok(GrowthSpecs {
            router: ModuleSpec::parse(ModuleKind::Router, &self.modules.router, 0)?,
            transformer: ModuleSpec::parse(
                ModuleKind::Transformer,
                &self.modules.transformer,
                self.modules.downsample_freq,
            )?,
            solver: ModuleSpec::parse(ModuleKind::Solver, &self.modules.solver, 0)?,
        })
    }

    /// Same run with one growth mechanism disabled; everything else is kept.
    pub fn ablation_variant(&self, variant: Ablation) -> RunConfig {
        let mut cfg = self.clone();
        cfg.ablation = variant;
        cfg
    }

    /// Shrink the run for smoke tests: caps growth decisions, per-phase
    /// epochs, and refinement epochs at `n`.
    pub fn apply_max_steps(&mut self, n: usize) {
        self.training.max_growth_decisions = Some(n);
        self.training.max_epochs_per_phase = Some(n);
        self.training.refine_epochs = self.training.refine_epochs.min(n);
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.growth_specs()?;
        let d = &self.dataset;
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(AntError::Config(format!(
                "dataset.val_fraction must be in (0, 1), got {}",
                d.val_fraction
            )));
        }
        let need = |opt: &Option<PathBuf>, key: &str| {
            if opt.is_none() {
                Err(AntError::Config(format!("dataset.{} is required for kind {}", key, d.kind.name())))
            } else {
                Ok(())
            }
        };
        if d.kind.is_image() {
            need(&d.train_images, "train_images")?;
            need(&d.train_labels, "train_labels")?;
            need(&d.test_images, "test_images")?;
            need(&d.test_labels, "test_labels")?;
        } else {
            need(&d.train_csv, "train_csv")?;
            need(&d.test_csv, "test_csv")?;
            if d.input_cols == 0 || d.target_cols == 0 {
                return Err(AntError::Config(
                    "dataset.input_cols and dataset.target_cols must be positive".into(),
                ));
            }
        }
        if let Some(n) = d.limit_train {
            if n == 0 {
                return Err(AntError::Config("dataset.limit_train must be positive".into()));
            }
        }
        if let Some(n) = d.limit_test {
            if n == 0 {
                return Err(AntError::Config("dataset.limit_test must be positive".into()));
            }
        }
        if self.dataset.kind == DatasetKind::Sarcos && self.training.augment != Augment::None {
            return Err(AntError::Config("augmentation requires image data".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(AntError::Config("run.out_dir must not be empty".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AntError::Config(format!("{}: {}", path.display(), e)))?;
        RunConfig::parse(&text).map_err(|e| AntError::Config(format!("{}: {}", path.display(), e)))
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut pairs = Pairs::scan(text)?;
        let dataset = parse_dataset(&mut pairs)?;
        let modules = ModulesConfig {
            router: pairs.required("modules", "router")?,
            transformer: pairs.required("modules", "transformer")?,
            solver: pairs.required("modules", "solver")?,
            downsample_freq: pairs.parsed("modules", "downsample_freq", 0)?,
        };
        let training = parse_training(&mut pairs)?;
        let ablation = match pairs.optional("run", "ablation") {
            None => Ablation::None,
            Some((line, v)) => parse_ablation(&v).map_err(|e| at(line, e))?,
        };
        let out_dir = PathBuf::from(pairs.required("run", "out_dir")?);
        pairs.finish()?;
        let cfg = RunConfig { dataset, modules, training, ablation, out_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization: fixed section and key order, every key
    /// explicit. `RunConfig::parse` of the output equals `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        s.push_str("[dataset]\n");
        let _ = writeln!(s, "kind = {}", d.kind.name());
        let path = |p: &Option<PathBuf>| p.as_ref().unwrap().display().to_string();
        if d.kind.is_image() {
            let _ = writeln!(s, "train_images = {}", path(&d.train_images));
            let _ = writeln!(s, "train_labels = {}", path(&d.train_labels));
            let _ = writeln!(s, "test_images = {}", path(&d.test_images));
            let _ = writeln!(s, "test_labels = {}", path(&d.test_labels));
        } else {
            let _ = writeln!(s, "train_csv = {}", path(&d.train_csv));
            let _ = writeln!(s, "test_csv = {}", path(&d.test_csv));
            let _ = writeln!(s, "input_cols = {}", d.input_cols);
            let _ = writeln!(s, "target_cols = {}", d.target_cols);
        }
        let _ = writeln!(s, "val_fraction = {}", d.val_fraction);
        let _ = writeln!(
            s,
            "preprocess = {}",
            match d.preprocess {
                PreprocessKind::None => "none",
                PreprocessKind::MeanSubtract => "mean_subtract",
            }
        );
        let _ = writeln!(s, "limit_train = {}", fmt_opt(d.limit_train));
        let _ = writeln!(s, "limit_test = {}", fmt_opt(d.limit_test));
        s.push_str("\n[modules]\n");
        let _ = writeln!(s, "router = {}", self.modules.router);
        let _ = writeln!(s, "transformer = {}", self.modules.transformer);
        let _ = writeln!(s, "solver = {}", self.modules.solver);
        let _ = writeln!(s, "downsample_freq = {}", self.modules.downsample_freq);
        let t = &self.training;
        s.push_str("\n[training]\n");
        let _ = writeln!(s, "learning_rate = {}", t.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", t.adam_eps);
        let _ = writeln!(s, "batch_size = {}", t.batch_size);
        let _ = writeln!(s, "patience = {}", t.patience);
        let _ = writeln!(s, "refine_epochs = {}", t.refine_epochs);
        let _ = writeln!(s, "lr_decay_every = {}", t.lr_decay_every);
        let _ = writeln!(s, "lr_decay_factor = {}", t.lr_decay_factor);
        let _ = writeln!(s, "seed = {}", t.rng_seed);
        let _ = writeln!(s, "max_depth = {}", fmt_opt(t.max_depth));
        let _ = writeln!(s, "max_epochs_per_phase = {}", fmt_opt(t.max_epochs_per_phase));
        let _ = writeln!(s, "max_growth_decisions = {}", fmt_opt(t.max_growth_decisions));
        let _ = writeln!(
            s,
            "augment = {}",
            match t.augment {
                Augment::None => "none",
                Augment::PadCropFlip => "pad_crop_flip",
            }
        );
        s.push_str("\n[run]\n");
        let _ = writeln!(
            s,
            "ablation = {}",
            match self.ablation {
                Ablation::None => "none",
                Ablation::NoRouter => "no_router",
                Ablation::NoTransformer => "no_transformer",
            }
        );
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        s
    }
}

fn fmt_opt(v: Option<usize>) -> String {
    match v {
        None => "none".into(),
        Some(n) => n.to_string(),
    }
}

fn at(line: usize, e: AntError) -> AntError {
    AntError::Config(format!("line {}: {}", line, e))
}

fn parse_ablation(v: &str) -> Result<Ablation> {
    match v {
        "none" => Ok(Ablation::None),
        "no_router" => Ok(Ablation::NoRouter),
        "no_transformer" => Ok(Ablation::NoTransformer),
        _ => Err(AntError::Config(format!(
            "unknown ablation '{}' (expected none, no_router, no_transformer)",
            v
        ))),
    }
}

/// All key/value lines of a file, indexed by (section, key), consumed as the
/// typed config is assembled; leftovers are unknown-key errors.
struct Pairs {
    map: BTreeMap<(String, String), (usize, String)>,
}

const SECTIONS: [&str; 4] = ["dataset", "modules", "training", "run"];

impl Pairs {
    fn scan(text: &str) -> Result<Pairs> {
        let mut map = BTreeMap::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(AntError::Config(format!("line {}: unterminated section header", line_no)));
                };
                if !SECTIONS.contains(&name) {
                    return Err(AntError::Config(format!("line {}: unknown section [{}]", line_no, name)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AntError::Config(format!("line {}: expected 'key = value'", line_no)));
            };
            let Some(section) = section.as_ref() else {
                return Err(AntError::Config(format!(
                    "line {}: key outside any [section]",
                    line_no
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if let Some((prev, _)) =
                map.insert((section.clone(), key.clone()), (line_no, value))
            {
                return Err(AntError::Config(format!(
                    "line {}: duplicate key '{}' (first set on line {})",
                    line_no, key, prev
                )));
            }
        }
        Ok(Pairs { map })
    }

    fn optional(&mut self, section: &str, key: &str) -> Option<(usize, String)> {
        self.map.remove(&(section.to_string(), key.to_string()))
    }

    fn required(&mut self, section: &str, key: &str) -> Result<String> {
        self.optional(section, key)
            .map(|(_, v)| v)
            .ok_or_else(|| AntError::Config(format!("missing required key {}.{}", section, key)))
    }

    /// Optional key parsed from its string form; `default` fills absence.
    fn parsed<T: std::str::FromStr>(&mut self, section: &str, key: &str, default: T) -> Result<T> {
        match self.optional(section, key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| {
                AntError::Config(format!("line {}: bad value '{}' for {}.{}", line, v, section, key))
            }),
        }
    }

    fn parsed_opt(&mut self, section: &str, key: &str, default: Option<usize>) -> Result<Option<usize>> {
        match self.optional(section, key) {
            None => Ok(default),
            Some((_, v)) if v == "none" => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| {
                AntError::Config(format!(
                    "line {}: bad value '{}' for {}.{} (expected integer or none)",
                    line, v, section, key
                ))
            }),
        }
    }

    fn finish(self) -> Result<()> {
        if let Some(((section, key), (line, _))) = self.map.into_iter().next() {
            return Err(AntError::Config(format!(
                "line {}: unknown key '{}' in section [{}]",
                line, key, section
            )));
        }
        Ok(())
    }
}

fn parse_dataset(pairs: &mut Pairs) -> Result<DatasetConfig> {
    let (kind_line, kind_str) = pairs
        .optional("dataset", "kind")
        .ok_or_else(|| AntError::Config("missing required key dataset.kind".into()))?;
    let kind = match kind_str.as_str() {
        "mnist" => DatasetKind::Mnist,
        "cifar10" => DatasetKind::Cifar10,
        "sarcos" => DatasetKind::Sarcos,
        _ => {
            return Err(at(
                kind_line,
                AntError::Config(format!(
                    "unknown dataset kind '{}' (expected mnist, cifar10, sarcos)",
                    kind_str
                )),
            ));
        }
    };
    let path_key = |pairs: &mut Pairs, key: &str, wanted: bool| -> Result<Option<PathBuf>> {
        match pairs.optional("dataset", key) {
            None => Ok(None),
            Some((line, _)) if !wanted => Err(AntError::Config(format!(
                "line {}: dataset.{} does not apply to kind {}",
                line,
                key,
                kind.name()
            ))),
            Some((_, v)) => Ok(Some(PathBuf::from(v))),
        }
    };
    let image = kind.is_image();
    let train_images = path_key(pairs, "train_images", image)?;
    let train_labels = path_key(pairs, "train_labels", image)?;
    let test_images = path_key(pairs, "test_images", image)?;
    let test_labels = path_key(pairs, "test_labels", image)?;
    let train_csv = path_key(pairs, "train_csv", !image)?;
    let test_csv = path_key(pairs, "test_csv", !image)?;
    let preprocess = match pairs.optional("dataset", "preprocess") {
        None => PreprocessKind::None,
        Some((_, v)) if v == "none" => PreprocessKind::None,
        Some((_, v)) if v == "mean_subtract" => PreprocessKind::MeanSubtract,
        Some((line, v)) => {
            return Err(AntError::Config(format!(
                "line {}: unknown preprocess '{}' (expected none, mean_subtract)",
                line, v
            )));
        }
    };
    Ok(DatasetConfig {
        kind,
        train_images,
        train_labels,
        test_images,
        test_labels,
        train_csv,
        test_csv,
        input_cols: pairs.parsed("dataset", "input_cols", 21)?,
        target_cols: pairs.parsed("dataset", "target_cols", 7)?,
        val_fraction: pairs.parsed("dataset", "val_fraction", 0.1)?,
        preprocess,
        limit_train: pairs.parsed_opt("dataset", "limit_train", None)?,
        limit_test: pairs.parsed_opt("dataset", "limit_test", None)?,
    })
}

fn parse_training(pairs: &mut Pairs) -> Result<TrainConfig> {
    let base = TrainConfig::default();
    let augment = match pairs.optional("training", "augment") {
        None => Augment::None,
        Some((_, v)) if v == "none" => Augment::None,
        Some((_, v)) if v == "pad_crop_flip" => Augment::PadCropFlip,
        Some((line, v)) => {
            return Err(AntError::Config(format!(
                "line {}: unknown augment '{}' (expected none, pad_crop_flip)",
                line, v
            )));
        }
    };
    Ok(TrainConfig {
        learning_rate: pairs.parsed("training", "learning_rate", base.learning_rate)?,
        adam_beta1: pairs.parsed("training", "adam_beta1", base.adam_beta1)?,
        adam_beta2: pairs.parsed("training", "adam_beta2", base.adam_beta2)?,
        adam_eps: pairs.parsed("training", "adam_eps", base.adam_eps)?,
        batch_size: pairs.parsed("training", "batch_size", base.batch_size)?,
        patience: pairs.parsed("training", "patience", base.patience)?,
        refine_epochs: pairs.parsed("training", "refine_epochs", base.refine_epochs)?,
        lr_decay_every: pairs.parsed("training", "lr_decay_every", base.lr_decay_every)?,
        lr_decay_factor: pairs.parsed("training", "lr_decay_factor", base.lr_decay_factor)?,
        rng_seed: pairs.parsed("training", "seed", base.rng_seed)?,
        max_depth: pairs.parsed_opt("training", "max_depth", base.max_depth)?,
        max_epochs_per_phase: pairs.parsed_opt("training", "max_epochs_per_phase", base.max_epochs_per_phase)?,
        max_growth_decisions: pairs.parsed_opt("training", "max_growth_decisions", base.max_growth_decisions)?,
        augment,
    })
}
