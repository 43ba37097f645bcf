//! Run configuration: defaults, then a `key = value` file, then flags.
//!
//! The effective configuration is echoed in the same format, so an echo can
//! be fed back through `--config` to rerun an experiment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fttn::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// `-(beta - 0.4)^2`, for checking the annealer itself.
    Synthetic,
    /// Validation accuracy after a short training run.
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the pool pick.
    pub threads: usize,
    pub chi: usize,
    pub beta: f64,
    /// Train and evaluate the bare chain without the temperature layer.
    pub baseline: bool,
    pub exclude_label_site: bool,
    pub feature_map: FeatureMap,
    pub downscale: usize,
    /// `None` puts the label site in the middle of the chain.
    pub label_site: Option<usize>,
    pub classes: usize,
    pub noise_scale: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub reduction: fttn::Reduction,
    pub clip: Option<f64>,

    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `n` samples; 0 keeps all.
    pub max_train: usize,
    pub max_test: usize,

    pub checkpoint: Option<PathBuf>,
    pub split: Split,

    pub objective: Objective,
    pub beta_init: f64,
    pub step_width: f64,
    pub anneal_temp: f64,
    pub cooling_rate: f64,
    pub iterations: usize,
    pub proxy_epochs: usize,
    pub proxy_subset: usize,
    pub holdout: f64,

    pub bench_sizes: Vec<usize>,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("fttn-out"),
            threads: 0,
            chi: 8,
            beta: 0.0,
            baseline: false,
            exclude_label_site: false,
            feature_map: FeatureMap::Linear,
            downscale: 28,
            label_site: None,
            classes: 10,
            noise_scale: 1e-2,
            epochs: 10,
            batch_size: 50,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            reduction: fttn::Reduction::Mean,
            clip: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            max_train: 0,
            max_test: 0,
            checkpoint: None,
            split: Split::Test,
            objective: Objective::Accuracy,
            beta_init: 0.0,
            step_width: 0.05,
            anneal_temp: 1.0,
            cooling_rate: 0.95,
            iterations: 50,
            proxy_epochs: 2,
            proxy_subset: 500,
            holdout: 0.2,
            bench_sizes: vec![64, 128, 256, 512, 1024],
            bench_repeats: 3,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}: expected true or false")),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Applies one setting. `data` is a shorthand that fills in the four
    /// standard IDX file names under a directory.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "seed" => self.seed = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "threads" => self.threads = parse(key, value)?,
            "chi" => self.chi = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "baseline" => self.baseline = parse_bool(key, value)?,
            "exclude_label_site" => self.exclude_label_site = parse_bool(key, value)?,
            "feature_map" => self.feature_map = parse(key, value)?,
            "downscale" => self.downscale = parse(key, value)?,
            "label_site" => {
                self.label_site = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "classes" => self.classes = parse(key, value)?,
            "noise_scale" => self.noise_scale = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "reduction" => {
                self.reduction = match value {
                    "mean" => fttn::Reduction::Mean,
                    "sum" => fttn::Reduction::Sum,
                    _ => return Err(format!("invalid value {value:?} for {key}: expected mean or sum")),
                }
            }
            "clip" => {
                self.clip = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "data" => {
                let dir = Path::new(value);
                self.train_images = Some(dir.join("train-images-idx3-ubyte.gz"));
                self.train_labels = Some(dir.join("train-labels-idx1-ubyte.gz"));
                self.test_images = Some(dir.join("t10k-images-idx3-ubyte.gz"));
                self.test_labels = Some(dir.join("t10k-labels-idx1-ubyte.gz"));
            }
            "train_images" => self.train_images = optional_path(value),
            "train_labels" => self.train_labels = optional_path(value),
            "test_images" => self.test_images = optional_path(value),
            "test_labels" => self.test_labels = optional_path(value),
            "max_train" => self.max_train = parse(key, value)?,
            "max_test" => self.max_test = parse(key, value)?,
            "checkpoint" => self.checkpoint = optional_path(value),
            "split" => {
                self.split = match value {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(format!("invalid value {value:?} for {key}: expected train or test")),
                }
            }
            "objective" => {
                self.objective = match value {
                    "synthetic" => Objective::Synthetic,
                    "accuracy" => Objective::Accuracy,
                    _ => return Err(format!("invalid value {value:?} for {key}: expected synthetic or accuracy")),
                }
            }
            "beta_init" => self.beta_init = parse(key, value)?,
            "step_width" => self.step_width = parse(key, value)?,
            "anneal_temp" => self.anneal_temp = parse(key, value)?,
            "cooling_rate" => self.cooling_rate = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "proxy_epochs" => self.proxy_epochs = parse(key, value)?,
            "proxy_subset" => self.proxy_subset = parse(key, value)?,
            "holdout" => self.holdout = parse(key, value)?,
            "bench_sizes" => {
                self.bench_sizes = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "bench_repeats" => self.bench_repeats = parse(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(key.trim(), value).map_err(|e| format!("{}:{}: {e}", path.display(), n + 1))?;
        }
        Ok(())
    }

    /// Range checks that do not depend on the data.
    pub fn validate(&self) -> Result<(), String> {
        let fail = |m: &str| Err(m.to_string());
        if self.chi == 0 || self.classes == 0 {
            return fail("chi and classes must be positive");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail("beta must be finite and >= 0");
        }
        if self.downscale != 14 && self.downscale != 28 {
            return fail("downscale must be 14 or 28");
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return fail("noise_scale must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return fail("holdout must lie in (0, 1)");
        }
        if self.bench_sizes.is_empty() || self.bench_sizes.contains(&0) || self.bench_repeats == 0 {
            return fail("bench_sizes and bench_repeats must be positive");
        }
        Ok(())
    }

    pub fn temperature(&self) -> Result<Option<fttn::Temperature>, String> {
        if self.baseline {
            return Ok(None);
        }
        let t = fttn::Temperature::new(self.beta).map_err(|e| e.to_string())?;
        Ok(Some(if self.exclude_label_site { t.excluding_label_site() } else { t }))
    }

    pub fn adam(&self) -> fttn::AdamConfig {
        fttn::AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Every setting as `key = value` lines, readable by [`apply_file`].
    ///
    /// [`apply_file`]: RunConfig::apply_file
    pub fn echo(&self, command: &str) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("out", self.out.display().to_string());
        put("threads", self.threads.to_string());
        put("chi", self.chi.to_string());
        put("beta", self.beta.to_string());
        put("baseline", self.baseline.to_string());
        put("exclude_label_site", self.exclude_label_site.to_string());
        put("feature_map", self.feature_map.name().to_string());
        put("downscale", self.downscale.to_string());
        put("label_site", self.label_site.map_or("auto".into(), |k| k.to_string()));
        put("classes", self.classes.to_string());
        put("noise_scale", self.noise_scale.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put(
            "reduction",
            match self.reduction {
                fttn::Reduction::Mean => "mean".into(),
                fttn::Reduction::Sum => "sum".into(),
            },
        );
        put("clip", self.clip.map_or("none".into(), |c| c.to_string()));
        put("train_images", show_path(&self.train_images));
        put("train_labels", show_path(&self.train_labels));
        put("test_images", show_path(&self.test_images));
        put("test_labels", show_path(&self.test_labels));
        put("max_train", self.max_train.to_string());
        put("max_test", self.max_test.to_string());
        put("checkpoint", show_path(&self.checkpoint));
        put(
            "split",
            match self.split {
                Split::Train => "train".into(),
                Split::Test => "test".into(),
            },
        );
        put(
            "objective",
            match self.objective {
                Objective::Synthetic => "synthetic".into(),
                Objective::Accuracy => "accuracy".into(),
            },
        );
        put("beta_init", self.beta_init.to_string());
        put("step_width", self.step_width.to_string());
        put("anneal_temp", self.anneal_temp.to_string());
        put("cooling_rate", self.cooling_rate.to_string());
        put("iterations", self.iterations.to_string());
        put("proxy_epochs", self.proxy_epochs.to_string());
        put("proxy_subset", self.proxy_subset.to_string());
        put("holdout", self.holdout.to_string());
        put(
            "bench_sizes",
            self.bench_sizes.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
        );
        put("bench_repeats", self.bench_repeats.to_string());
        format!("# effective configuration of `fttn {command}`\n{s}")
    }
}
