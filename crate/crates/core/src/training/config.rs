//! Training configuration and its `key = value` text format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::MS_SSIM_MIN_SIDE;
use crate::network::{Objective, DOWNSAMPLE};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub ae_learning_rate: f64,
    pub rate_learning_rate: f64,
    /// Multiplier applied to the rate learning rate every
    /// `rate_lr_decay_steps` iterations (continuously interpolated).
    pub rate_lr_decay: f64,
    pub rate_lr_decay_steps: u64,
    /// Upper bound on passes over the training set.
    pub epochs: u64,
    /// Optional hard cap on iterations, on top of the epoch cap.
    pub max_iterations: Option<u64>,
    pub batch_size: usize,
    /// Side of the square training crop.
    pub crop: usize,
    pub objective: Objective,
    /// Pixel value of model-unit 1.0 when measuring distortion; 255 gives
    /// MSE in 8-bit pixel units.
    pub distortion_range: f64,
    pub seed: u64,
    pub dataset: Vec<PathBuf>,
    pub validation: Vec<PathBuf>,
    /// Iterations between validation passes; 0 means once per epoch.
    pub validation_interval: u64,
    pub stability_window: usize,
    pub stability_tolerance: f64,
    /// Layer count of a newly created model.
    pub num_layers: usize,
    /// Overrides of the default feature-map ladder, one per layer.
    pub feature_maps: Vec<usize>,
    /// Overrides of the default rate-weight ladder, one per layer.
    pub lambdas: Vec<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            ae_learning_rate: 1e-4,
            rate_learning_rate: 1e-3,
            rate_lr_decay: 0.96,
            rate_lr_decay_steps: 5000,
            epochs: 1000,
            max_iterations: None,
            batch_size: 8,
            crop: 256,
            objective: Objective::Mse,
            distortion_range: 255.0,
            seed: 0,
            dataset: Vec::new(),
            validation: Vec::new(),
            validation_interval: 0,
            stability_window: 5,
            stability_tolerance: 0.01,
            num_layers: 5,
            feature_maps: Vec::new(),
            lambdas: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("line {line}: cannot parse {key} = {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str, line: usize) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s, line))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl TrainingConfig {
    /// Rate-model learning rate at `iteration`:
    /// `rate_learning_rate * rate_lr_decay ^ (iteration / rate_lr_decay_steps)`.
    pub fn rate_lr_at(&self, iteration: u64) -> f64 {
        self.rate_learning_rate * self.rate_lr_decay.powf(iteration as f64 / self.rate_lr_decay_steps as f64)
    }

    /// Parses the text format. Relative dataset paths are resolved against
    /// `base` when given.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "ae_learning_rate" => cfg.ae_learning_rate = parse(key, value, line)?,
                "rate_learning_rate" => cfg.rate_learning_rate = parse(key, value, line)?,
                "rate_lr_decay" => cfg.rate_lr_decay = parse(key, value, line)?,
                "rate_lr_decay_steps" => cfg.rate_lr_decay_steps = parse(key, value, line)?,
                "epochs" => cfg.epochs = parse(key, value, line)?,
                "max_iterations" => cfg.max_iterations = Some(parse(key, value, line)?),
                "batch_size" => cfg.batch_size = parse(key, value, line)?,
                "crop" => cfg.crop = parse(key, value, line)?,
                "objective" => cfg.objective = value.parse()?,
                "distortion_range" => cfg.distortion_range = parse(key, value, line)?,
                "seed" => cfg.seed = parse(key, value, line)?,
                "dataset" => cfg.dataset.extend(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(resolve)),
                "validation" => cfg.validation.extend(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(resolve)),
                "validation_interval" => cfg.validation_interval = parse(key, value, line)?,
                "stability_window" => cfg.stability_window = parse(key, value, line)?,
                "stability_tolerance" => cfg.stability_tolerance = parse(key, value, line)?,
                "num_layers" => cfg.num_layers = parse(key, value, line)?,
                "feature_maps" => cfg.feature_maps = parse_list(key, value, line)?,
                "lambdas" => cfg.lambdas = parse_list(key, value, line)?,
                _ => return Err(Error::invalid(format!("line {line}: unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ae_learning_rate", self.ae_learning_rate),
            ("rate_learning_rate", self.rate_learning_rate),
            ("rate_lr_decay", self.rate_lr_decay),
            ("stability_tolerance", self.stability_tolerance),
            ("distortion_range", self.distortion_range),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.rate_lr_decay_steps == 0 || self.epochs == 0 || self.batch_size == 0 || self.stability_window == 0 {
            return Err(Error::invalid(
                "rate_lr_decay_steps, epochs, batch_size and stability_window must be at least 1",
            ));
        }
        if self.crop == 0 || self.crop % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!(
                "crop must be a positive multiple of {DOWNSAMPLE}, got {}",
                self.crop
            )));
        }
        if self.objective == Objective::MsSsim && self.crop < MS_SSIM_MIN_SIDE {
            return Err(Error::invalid(format!(
                "the MS-SSIM objective needs crops of at least {MS_SSIM_MIN_SIDE}, got {}",
                self.crop
            )));
        }
        if self.num_layers == 0 || self.num_layers > self.objective.max_layers() {
            return Err(Error::invalid(format!(
                "num_layers must be in 1..={} for {:?}",
                self.objective.max_layers(),
                self.objective
            )));
        }
        for (name, len) in [("feature_maps", self.feature_maps.len()), ("lambdas", self.lambdas.len())] {
            if len != 0 && len != self.num_layers {
                return Err(Error::invalid(format!(
                    "{name} lists {len} values for {} layers",
                    self.num_layers
                )));
            }
        }
        if self.lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
            return Err(Error::invalid("lambdas must be positive"));
        }
        if self.feature_maps.iter().any(|&f| f == 0) {
            return Err(Error::invalid("feature_maps must be positive"));
        }
        Ok(())
    }

    /// The text format; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let objective = match self.objective {
            Objective::Mse => "mse",
            Objective::MsSsim => "ms-ssim",
        };
        let _ = writeln!(s, "ae_learning_rate = {}", self.ae_learning_rate);
        let _ = writeln!(s, "rate_learning_rate = {}", self.rate_learning_rate);
        let _ = writeln!(s, "rate_lr_decay = {}", self.rate_lr_decay);
        let _ = writeln!(s, "rate_lr_decay_steps = {}", self.rate_lr_decay_steps);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        if let Some(m) = self.max_iterations {
            let _ = writeln!(s, "max_iterations = {m}");
        }
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "objective = {objective}");
        let _ = writeln!(s, "distortion_range = {}", self.distortion_range);
        let _ = writeln!(s, "seed = {}", self.seed);
        for p in &self.dataset {
            let _ = writeln!(s, "dataset = {}", p.display());
        }
        for p in &self.validation {
            let _ = writeln!(s, "validation = {}", p.display());
        }
        let _ = writeln!(s, "validation_interval = {}", self.validation_interval);
        let _ = writeln!(s, "stability_window = {}", self.stability_window);
        let _ = writeln!(s, "stability_tolerance = {}", self.stability_tolerance);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        if !self.feature_maps.is_empty() {
            let _ = writeln!(s, "feature_maps = {}", join(&self.feature_maps));
        }
        if !self.lambdas.is_empty() {
            let _ = writeln!(s, "lambdas = {}", join(&self.lambdas));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_training_table() {
        let c = TrainingConfig::default();
        assert_eq!(c.ae_learning_rate, 1e-4);
        assert_eq!(c.rate_learning_rate, 1e-3);
        assert_eq!((c.batch_size, c.crop, c.epochs), (8, 256, 1000));
        assert_eq!((c.stability_window, c.stability_tolerance), (5, 0.01));
    }

    #[test]
    fn rate_learning_rate_decays() {
        let c = TrainingConfig::default();
        assert_eq!(c.rate_lr_at(0), 1e-3);
        assert!((c.rate_lr_at(5000) - 0.00096).abs() < 1e-15);
        assert!((c.rate_lr_at(10000) - 1e-3 * 0.96 * 0.96).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainingConfig {
            objective: Objective::MsSsim,
            num_layers: 2,
            lambdas: vec![50.0, 30.0],
            feature_maps: vec![8, 16],
            max_iterations: Some(100),
            ..TrainingConfig::default()
        };
        c.dataset = vec!["/data/a.png".into(), "/data/b.png".into()];
        assert_eq!(TrainingConfig::parse(&c.to_text(), None).unwrap(), c);
    }

    #[test]
    fn comments_relative_paths_and_errors() {
        let c = TrainingConfig::parse("# comment\n\ncrop = 32  # inline\ndataset = imgs\n", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.crop, 32);
        assert_eq!(c.dataset, vec![PathBuf::from("/cfg/imgs")]);
        for bad in ["crop = 30", "bogus = 1", "crop 32", "ae_learning_rate = -1", "objective = ms-ssim\ncrop = 64", "lambdas = 1, 2"] {
            assert!(matches!(TrainingConfig::parse(bad, None), Err(Error::InvalidArgument(_))), "{bad}");
        }
    }

    #[test]
    fn large_corpus_configuration_is_accepted() {
        let mut text = String::new();
        for i in 0..5500 {
            text.push_str(&format!("dataset = img{i:04}.png\n"));
        }
        assert_eq!(TrainingConfig::parse(&text, None).unwrap().dataset.len(), 5500);
    }
}
