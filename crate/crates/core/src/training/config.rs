use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::{FusionMode, ModelConfig};
use crate::render::{RenderConfig, SoftRenderConfig, ViewpointInit};

/// Training hyperparameters. Parsed from flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub margin: f64,
    pub lambda: f64,
    pub n_views: usize,
    pub descriptor_dim: usize,
    pub fusion_mode: FusionMode,
    pub viewpoint_init: ViewpointInit,
    pub match_tolerance: f64,
    pub seed: u64,
    pub sigma: f64,
    pub gamma: f64,
    pub crop_radius: f64,
    pub background_eps: f64,
    pub image_size: usize,
    /// Batches drawn from each pair per epoch.
    pub batches_per_pair: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 24,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_period: 4,
            margin: 1.0,
            lambda: 1.0,
            n_views: 8,
            descriptor_dim: 32,
            fusion_mode: FusionMode::Soft,
            viewpoint_init: ViewpointInit::Random,
            match_tolerance: 0.01,
            seed: 0,
            sigma: 1e-4,
            gamma: 1e-4,
            crop_radius: 1.0,
            background_eps: 0.01,
            image_size: 64,
            batches_per_pair: 1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl FromStr for ViewpointInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(ViewpointInit::Random),
            "orbited" => Ok(ViewpointInit::Orbited),
            _ => Err(Error::Config(format!("viewpoint_init must be random or orbited, got {s:?}"))),
        }
    }
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "decay_period" => self.decay_period = parse_value(key, value)?,
            "margin" => self.margin = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "n_views" => self.n_views = parse_value(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse_value(key, value)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "viewpoint_init" => self.viewpoint_init = value.parse()?,
            "match_tolerance" => self.match_tolerance = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "sigma" => self.sigma = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "crop_radius" => self.crop_radius = parse_value(key, value)?,
            "background_eps" => self.background_eps = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "batches_per_pair" => self.batches_per_pair = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr >= 0.0),
            ("margin", self.margin >= 0.0),
            ("lambda", self.lambda >= 0.0),
            ("lr_decay", self.lr_decay > 0.0),
            ("match_tolerance", self.match_tolerance > 0.0),
            ("crop_radius", self.crop_radius > 0.0),
            ("batch_size", self.batch_size >= 2),
            ("decay_period", self.decay_period >= 1),
            ("n_views", self.n_views >= 1),
            ("descriptor_dim", self.descriptor_dim >= 1),
            ("batches_per_pair", self.batches_per_pair >= 1),
            ("image_size", self.image_size >= 8),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("{name} is out of range")));
        }
        self.soft().validate()
    }

    fn soft(&self) -> SoftRenderConfig {
        SoftRenderConfig {
            sigma: self.sigma,
            gamma: self.gamma,
            background_eps: self.background_eps,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_views: self.n_views,
            descriptor_dim: self.descriptor_dim,
            fusion: self.fusion_mode,
            viewpoint_init: self.viewpoint_init,
            render: RenderConfig {
                soft: self.soft(),
                crop_radius: self.crop_radius,
                image_size: self.image_size,
                ..RenderConfig::default()
            },
        }
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_period) as i32)
    }

    pub fn to_text(&self) -> String {
        let fusion = match self.fusion_mode {
            FusionMode::Max => "max",
            FusionMode::Avg => "avg",
            FusionMode::Soft => "soft",
        };
        let init = match self.viewpoint_init {
            ViewpointInit::Random => "random",
            ViewpointInit::Orbited => "orbited",
        };
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_decay = {}", self.lr_decay);
        let _ = writeln!(s, "decay_period = {}", self.decay_period);
        let _ = writeln!(s, "margin = {}", self.margin);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "n_views = {}", self.n_views);
        let _ = writeln!(s, "descriptor_dim = {}", self.descriptor_dim);
        let _ = writeln!(s, "fusion_mode = {fusion}");
        let _ = writeln!(s, "viewpoint_init = {init}");
        let _ = writeln!(s, "match_tolerance = {}", self.match_tolerance);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "sigma = {}", self.sigma);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "crop_radius = {}", self.crop_radius);
        let _ = writeln!(s, "background_eps = {}", self.background_eps);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "batches_per_pair = {}", self.batches_per_pair);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let cfg = TrainConfig::parse("# demo\nepochs = 5\n fusion_mode=max \nviewpoint_init = orbited # ablation\nlr=0.01\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.fusion_mode, FusionMode::Max);
        assert_eq!(cfg.viewpoint_init, ViewpointInit::Orbited);
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.batch_size, 24);
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_line() {
        let err = TrainConfig::parse("epochs = 3\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("fusion_mode = median").is_err());
        assert!(TrainConfig::parse("sigma = 0").is_err());
        assert!(TrainConfig::parse("batch_size = 1").is_err());
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(3), 1e-3);
        assert!((cfg.lr_at(4) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(15) - 1e-6).abs() < 1e-20);
    }
}
