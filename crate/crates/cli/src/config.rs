//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use quan::data::AugmentConfig;
use quan::engine::{OptimizerKind, TrainConfig};
use quan::layers::{ActivationKind, ConvMode};
use quan::models::ClassifierConfig;
use quan::{MappingStrategy, QuanError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    /// Rendered rectangles labelled by angle sector; needs no files.
    Synthetic,
}

impl FromStr for DatasetKind {
    type Err = QuanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(QuanError::Config(format!("unknown dataset '{s}' (expected cifar10 or synthetic)"))),
        }
    }
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ClassifierConfig,
    pub dataset: DatasetKind,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    /// Caps on the number of training and test images used.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synth_train: usize,
    pub synth_test: usize,
    pub synth_size: usize,
    pub synth_classes: usize,
    pub data_seed: u64,
    pub augment: bool,
    pub crop_pad: usize,
    pub flip_prob: f64,
    pub repeats: usize,
    pub threads: Option<usize>,
    /// `None` means: record wall-clock seconds unless running single-threaded.
    pub record_time: Option<bool>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            model: ClassifierConfig::default(),
            dataset: DatasetKind::Cifar10,
            data: None,
            out: PathBuf::from("runs"),
            train_limit: None,
            test_limit: None,
            synth_train: 512,
            synth_test: 256,
            synth_size: 16,
            synth_classes: 4,
            data_seed: 0,
            augment: true,
            crop_pad: 4,
            flip_prob: 0.5,
            repeats: 30,
            threads: None,
            record_time: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| QuanError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(QuanError::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "accumulate" => t.accumulate = parse(key, value)?,
            "optimizer" => t.optimizer = value.parse::<OptimizerKind>()?,
            "lr" | "base_lr" => t.base_lr = parse(key, value)?,
            "min_lr" => t.min_lr = parse(key, value)?,
            "weight_decay" => t.weight_decay = Some(parse(key, value)?),
            "seed" => t.seed = parse(key, value)?,
            "mapping" => t.mapping = value.parse::<MappingStrategy>()?,
            "activation" => t.activation = value.parse::<ActivationKind>()?,
            "mode" => t.mode = value.parse::<ConvMode>()?,
            "lambda1" => t.loss_weights.lambda1 = parse(key, value)?,
            "lambda2" => t.loss_weights.lambda2 = parse(key, value)?,
            "lambda3" => t.loss_weights.lambda3 = parse(key, value)?,
            "width" => self.model.width = parse(key, value)?,
            "stages" => self.model.stages = parse(key, value)?,
            "sppf_kernel" => self.model.sppf_kernel = parse(key, value)?,
            "dataset" => self.dataset = value.parse()?,
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "train_limit" => self.train_limit = Some(parse(key, value)?),
            "test_limit" => self.test_limit = Some(parse(key, value)?),
            "synth_train" => self.synth_train = parse(key, value)?,
            "synth_test" => self.synth_test = parse(key, value)?,
            "synth_size" => self.synth_size = parse(key, value)?,
            "synth_classes" => self.synth_classes = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "crop_pad" => self.crop_pad = parse(key, value)?,
            "flip_prob" => self.flip_prob = parse(key, value)?,
            "repeats" => self.repeats = parse(key, value)?,
            "threads" => self.threads = Some(parse(key, value)?),
            "record_time" => self.record_time = Some(parse_bool(key, value)?),
            _ => return Err(QuanError::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `source` names it in errors.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                QuanError::Config(format!("{source}:{}: expected 'key = value', got '{line}'", n + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| QuanError::Config(format!("{source}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| QuanError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    pub fn augment_config(&self) -> Option<AugmentConfig> {
        self.augment.then_some(AugmentConfig {
            crop_pad: self.crop_pad,
            flip_prob: self.flip_prob,
        })
    }

    /// The training settings with the time column resolved.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            record_time: self.record_time.unwrap_or(self.threads != Some(1)),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(QuanError::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if self.threads == Some(0) {
            return Err(QuanError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// Every setting in config-file form, for the run directory.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = t.loss_weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("dataset", self.dataset.name().into());
        if let Some(d) = &self.data {
            kv("data", d.display().to_string());
        }
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("accumulate", t.accumulate.to_string());
        kv("optimizer", t.optimizer.to_string());
        kv("lr", t.base_lr.to_string());
        kv("min_lr", t.min_lr.to_string());
        if let Some(wd) = t.weight_decay {
            kv("weight_decay", wd.to_string());
        }
        kv("seed", t.seed.to_string());
        kv("mapping", t.mapping.to_string());
        kv("activation", t.activation.to_string());
        kv("mode", t.mode.to_string());
        kv("lambda1", w.lambda1.to_string());
        kv("lambda2", w.lambda2.to_string());
        kv("lambda3", w.lambda3.to_string());
        kv("width", self.model.width.to_string());
        kv("stages", self.model.stages.to_string());
        kv("sppf_kernel", self.model.sppf_kernel.to_string());
        if let Some(n) = self.train_limit {
            kv("train_limit", n.to_string());
        }
        if let Some(n) = self.test_limit {
            kv("test_limit", n.to_string());
        }
        kv("synth_train", self.synth_train.to_string());
        kv("synth_test", self.synth_test.to_string());
        kv("synth_size", self.synth_size.to_string());
        kv("synth_classes", self.synth_classes.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("augment", self.augment.to_string());
        kv("crop_pad", self.crop_pad.to_string());
        kv("flip_prob", self.flip_prob.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# recipe\nepochs = 3 # short\n\nmapping=hamilton\nmode = full_hamilton\n", "t").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.mapping, MappingStrategy::Hamilton);
        assert_eq!(c.train.mode, ConvMode::FullHamilton);
        let err = c.apply_text("epochs 3", "t").unwrap_err().to_string();
        assert!(err.contains("t:1"), "{err}");
        assert!(c.apply_text("colour = red", "t").is_err());
        assert!(c.apply_text("epochs = many", "t").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("dataset = synthetic\nwidth = 3\nweight_decay = 0.01\ntrain_limit = 10", "t").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.to_text(), "round").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn single_thread_disables_timing() {
        let mut c = RunConfig::default();
        assert!(c.train_config().record_time);
        c.threads = Some(1);
        assert!(!c.train_config().record_time);
        c.record_time = Some(true);
        assert!(c.train_config().record_time);
    }
}
