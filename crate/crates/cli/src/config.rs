//! Run configuration: `key = value` files plus command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sarnas_core::bilevel::{Order, SearchConfig};
use sarnas_core::data::{Layout, SynthConfig};
use sarnas_core::optim::{Decay, Granularity};
use sarnas_core::supernet::NetConfig;
use sarnas_core::train::TrainConfig;
use sarnas_core::{Error, OpOptions, Result};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "SARNAS_SEED";

/// Name of the resolved-configuration echo written into every output dir.
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Held-out set for per-epoch validation during training; empty for none.
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub frames: usize,
    pub layout: Layout,
    pub center: bool,
    pub classes: usize,
    pub per_class: usize,
    pub first_instance: usize,
    pub noise: f64,
    pub separation: f64,
    pub jitter: f64,
    pub layers: usize,
    pub c_init: usize,
    pub dil_conv_repeats: usize,
    pub se_ratio: usize,
    pub batch_size: usize,
    pub search_epochs: usize,
    pub search_lr: f64,
    pub alpha_lr: f64,
    pub alpha_noise: f64,
    pub alpha_weight_decay: f64,
    pub order: Order,
    pub train_epochs: usize,
    pub train_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_floor: f64,
    pub lr_granularity: Granularity,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::new(3, 200, 16, 0);
        let search = SearchConfig::new(NetConfig::new(4, 8, 3));
        let train = TrainConfig::new(NetConfig::new(4, 8, 3));
        RunConfig {
            data_dir: "data".into(),
            val_dir: None,
            out_dir: "run".into(),
            frames: synth.frames,
            layout: synth.layout,
            center: false,
            classes: synth.classes,
            per_class: synth.per_class,
            first_instance: synth.first_instance,
            noise: synth.noise,
            separation: synth.separation,
            jitter: synth.jitter,
            layers: 4,
            c_init: 8,
            dil_conv_repeats: OpOptions::default().dil_conv_repeats,
            se_ratio: OpOptions::default().se_ratio,
            batch_size: 16,
            search_epochs: search.epochs,
            search_lr: search.lr_omega,
            alpha_lr: search.lr_alpha,
            alpha_noise: search.alpha_noise,
            alpha_weight_decay: search.alpha_weight_decay,
            order: search.order,
            train_epochs: train.epochs,
            train_lr: train.lr,
            weight_decay: train.weight_decay,
            momentum: train.momentum,
            lr_floor: 1e-4,
            lr_granularity: Granularity::Epoch,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

fn order_name(o: Order) -> &'static str {
    match o {
        Order::First => "first",
        Order::Second => "second",
    }
}

fn granularity_name(g: Granularity) -> &'static str {
    match g {
        Granularity::Epoch => "epoch",
        Granularity::Step => "step",
    }
}

impl RunConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data_dir" => self.data_dir = v.into(),
            "val_dir" => self.val_dir = (!v.is_empty()).then(|| v.into()),
            "out_dir" => self.out_dir = v.into(),
            "frames" => self.frames = parse(key, v)?,
            "layout" => self.layout = v.parse().map_err(Error::Config)?,
            "center" => self.center = parse_bool(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "per_class" => self.per_class = parse(key, v)?,
            "first_instance" => self.first_instance = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "separation" => self.separation = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "c_init" => self.c_init = parse(key, v)?,
            "dil_conv_repeats" => self.dil_conv_repeats = parse(key, v)?,
            "se_ratio" => self.se_ratio = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "search_epochs" => self.search_epochs = parse(key, v)?,
            "search_lr" => self.search_lr = parse(key, v)?,
            "alpha_lr" => self.alpha_lr = parse(key, v)?,
            "alpha_noise" => self.alpha_noise = parse(key, v)?,
            "alpha_weight_decay" => self.alpha_weight_decay = parse(key, v)?,
            "order" => {
                self.order = match v {
                    "first" => Order::First,
                    "second" => Order::Second,
                    _ => return Err(Error::Config(format!("order: expected first or second, got '{v}'"))),
                }
            }
            "train_epochs" => self.train_epochs = parse(key, v)?,
            "train_lr" => self.train_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "lr_floor" => self.lr_floor = parse(key, v)?,
            "lr_granularity" => {
                self.lr_granularity = match v {
                    "epoch" => Granularity::Epoch,
                    "step" => Granularity::Step,
                    _ => return Err(Error::Config(format!("lr_granularity: expected epoch or step, got '{v}'"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ParseLine {
                line: i + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(k, v).map_err(|e| Error::ParseLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then the file, then overrides in order, then the seed
    /// from the environment value `env_seed` when present.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = env_seed {
            cfg.seed = parse(SEED_ENV, s.trim())?;
        }
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let path = |p: &Path| p.display().to_string();
        vec![
            ("data_dir", path(&self.data_dir)),
            ("val_dir", self.val_dir.as_deref().map(path).unwrap_or_default()),
            ("out_dir", path(&self.out_dir)),
            ("frames", self.frames.to_string()),
            ("layout", self.layout.to_string()),
            ("center", self.center.to_string()),
            ("classes", self.classes.to_string()),
            ("per_class", self.per_class.to_string()),
            ("first_instance", self.first_instance.to_string()),
            ("noise", self.noise.to_string()),
            ("separation", self.separation.to_string()),
            ("jitter", self.jitter.to_string()),
            ("layers", self.layers.to_string()),
            ("c_init", self.c_init.to_string()),
            ("dil_conv_repeats", self.dil_conv_repeats.to_string()),
            ("se_ratio", self.se_ratio.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("search_epochs", self.search_epochs.to_string()),
            ("search_lr", self.search_lr.to_string()),
            ("alpha_lr", self.alpha_lr.to_string()),
            ("alpha_noise", self.alpha_noise.to_string()),
            ("alpha_weight_decay", self.alpha_weight_decay.to_string()),
            ("order", order_name(self.order).to_string()),
            ("train_epochs", self.train_epochs.to_string()),
            ("train_lr", self.train_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lr_floor", self.lr_floor.to_string()),
            ("lr_granularity", granularity_name(self.lr_granularity).to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// The resolved configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            per_class: self.per_class,
            frames: self.frames,
            layout: self.layout,
            seed: self.seed,
            noise: self.noise,
            separation: self.separation,
            jitter: self.jitter,
            first_instance: self.first_instance,
        }
    }

    pub fn net_config(&self, classes: usize) -> NetConfig {
        NetConfig {
            options: OpOptions {
                dil_conv_repeats: self.dil_conv_repeats,
                se_ratio: self.se_ratio,
            },
            ..NetConfig::new(self.layers, self.c_init, classes)
        }
    }

    fn decay(&self) -> Decay {
        Decay::Cosine { floor: self.lr_floor }
    }

    pub fn search_config(&self, classes: usize) -> SearchConfig {
        SearchConfig {
            epochs: self.search_epochs,
            batch_size: self.batch_size,
            lr_omega: self.search_lr,
            decay: self.decay(),
            granularity: self.lr_granularity,
            lr_alpha: self.alpha_lr,
            momentum: self.momentum,
            alpha_weight_decay: self.alpha_weight_decay,
            alpha_noise: self.alpha_noise,
            order: self.order,
            seed: self.seed,
            ..SearchConfig::new(self.net_config(classes))
        }
    }

    pub fn train_config(&self, classes: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.batch_size,
            lr: self.train_lr,
            decay: self.decay(),
            granularity: self.lr_granularity,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            ..TrainConfig::new(self.net_config(classes))
        }
    }

    /// Checks the keys every command relies on.
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor.is_finite()) {
            return Err(Error::Config(format!("lr_floor must be a finite value >= 0, got {}", self.lr_floor)));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::Config("out_dir must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_wins_and_env_seed_last() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# run\nlayers = 6\nseed = 3 # trailing\n\n").unwrap();
        assert_eq!((cfg.layers, cfg.seed), (6, 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "layers = 6\nseed = 3\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["layers=9".into(), "seed=4".into()], Some("11")).unwrap();
        assert_eq!((cfg.layers, cfg.seed), (9, 11));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("layers = 4\nlayer = 5\n").unwrap_err();
        assert!(matches!(err, Error::ParseLine { line: 2, .. }), "{err}");
        assert!(cfg.apply_override("bogus=1").is_err());
        assert!(cfg.apply_override("layers").is_err());
        assert!(cfg.apply_override("order=third").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("val_dir = held\nlayout = ntu\norder = first\nlr_granularity = step\nalpha_lr = 2.5\n").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }
}
