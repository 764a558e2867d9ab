//! Run configuration in a line-oriented `section.key = value` format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown or repeated keys are rejected, and
//! [`RunConfig::serialize`] writes every key so that its output parses back
//! to an identical configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::network::{Architecture, NetworkConfig};
use crate::training::{AugmentConfig, LossConfig, OhemConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generate `train_count` training and `val_count` validation scenes; the
    /// validation scenes follow the training scenes in the same stream.
    Synth { synth: SynthConfig, train_count: usize, val_count: usize },
    /// Load samples listed in manifest files.
    Manifest { train: PathBuf, val: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub total_iters: usize,
    pub eval_every: usize,
    pub augment: AugmentConfig,
    pub ignore_index: u8,
    pub aux_weight: f64,
    pub ohem: bool,
    pub ohem_threshold: f64,
    /// `None` keeps 1/16 of the pixels in a batch.
    pub ohem_min_kept: Option<usize>,
    pub data: DataSource,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            network: NetworkConfig::default(),
            base_lr: t.base_lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            poly_power: t.poly_power,
            batch_size: t.batch_size,
            total_iters: t.total_iters,
            eval_every: t.eval_every,
            augment: t.augment,
            ignore_index: t.loss.ignore_index,
            aux_weight: t.loss.aux_weight,
            ohem: false,
            ohem_threshold: 0.7,
            ohem_min_kept: None,
            data: DataSource::Synth { synth: SynthConfig::default(), train_count: 256, val_count: 64 },
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_pair<T: FromStr + Copy>(key: &str, value: &str) -> Result<(T, T)>
where
    T::Err: Display,
{
    match parse_list::<T>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::config(key, format!("expected two comma-separated values, got `{value}`"))),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn pair<T: Display>(p: (T, T)) -> String {
    format!("{},{}", p.0, p.1)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        // Source-specific keys are collected first so that their order
        // relative to `data.source` does not matter.
        let mut source = None;
        let mut data_keys = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "key given more than once"));
            }
            if key == "data.source" {
                source = Some(value.to_string());
            } else if key.starts_with("data.") || key.starts_with("synth.") {
                data_keys.push((key.to_string(), value.to_string()));
            } else {
                cfg.set(key, value)?;
            }
        }
        cfg.data = match source.as_deref() {
            None | Some("synth") => DataSource::Synth { synth: SynthConfig::default(), train_count: 256, val_count: 64 },
            Some("manifest") => DataSource::Manifest { train: PathBuf::new(), val: PathBuf::new() },
            Some(other) => return Err(Error::config("data.source", format!("expected synth or manifest, got `{other}`"))),
        };
        for (key, value) in &data_keys {
            cfg.set_data(key, value)?;
        }
        if let DataSource::Manifest { train, .. } = &cfg.data {
            if train.as_os_str().is_empty() {
                return Err(Error::config("data.train_manifest", "required when data.source = manifest"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` with `overrides` replacing any line of the same key; a
    /// later override of a key replaces an earlier one.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut merged: Vec<(String, String)> = Vec::new();
        for (k, v) in overrides {
            let k = k.trim();
            merged.retain(|(key, _)| key != k);
            merged.push((k.to_string(), v.trim().to_string()));
        }
        let mut out: String = text
            .lines()
            .filter(|line| match line.split_once('=') {
                Some((k, _)) if !line.trim_start().starts_with('#') => !merged.iter().any(|(key, _)| key == k.trim()),
                _ => true,
            })
            .flat_map(|line| [line, "\n"])
            .collect();
        for (k, v) in &merged {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Self::parse(&out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let n = &mut self.network;
        match key {
            "network.architecture" => {
                let blocks = match n.architecture {
                    Architecture::Acnet { blocks } => blocks,
                    _ => 3,
                };
                n.architecture = match v {
                    "fcn" => Architecture::Fcn,
                    "gcm" => Architecture::Gcm,
                    "acnet" => Architecture::Acnet { blocks },
                    _ => return Err(Error::config(key, format!("expected fcn, gcm or acnet, got `{v}`"))),
                };
            }
            "network.blocks" => {
                let b = parse_value(key, v)?;
                if let Architecture::Acnet { blocks } = &mut n.architecture {
                    *blocks = b;
                } else if b != 3 {
                    return Err(Error::config(key, "only meaningful for the acnet architecture"));
                }
            }
            "network.in_channels" => n.in_channels = parse_value(key, v)?,
            "network.num_classes" => n.num_classes = parse_value(key, v)?,
            "network.head_channels" => n.head_channels = parse_value(key, v)?,
            "network.acb_channels" => n.acb_channels = parse_pair(key, v)?,
            "network.low_channels" => n.low_channels = parse_value(key, v)?,
            "network.aux_enabled" => n.aux_enabled = parse_value(key, v)?,
            "network.aux_channels" => n.aux_channels = parse_value(key, v)?,
            "network.delta" => n.delta = parse_value(key, v)?,
            "network.lcm_reuse" => n.reuse_count = parse_value(key, v)?,
            "network.stem_channels" => n.backbone.stem_channels = parse_value(key, v)?,
            "network.stage_channels" => {
                let list: Vec<usize> = parse_list(key, v)?;
                n.backbone.stage_channels =
                    list.try_into().map_err(|_| Error::config(key, "expected exactly four widths"))?;
            }
            "network.convs_per_stage" => n.backbone.convs_per_stage = parse_value(key, v)?,
            "network.dilations" => n.backbone.last_stage_dilations = parse_list(key, v)?,
            "optim.base_lr" => self.base_lr = parse_value(key, v)?,
            "optim.momentum" => self.momentum = parse_value(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse_value(key, v)?,
            "optim.poly_power" => self.poly_power = parse_value(key, v)?,
            "optim.batch_size" => self.batch_size = parse_value(key, v)?,
            "optim.total_iters" => self.total_iters = parse_value(key, v)?,
            "optim.eval_every" => self.eval_every = parse_value(key, v)?,
            "augment.crop_size" => self.augment.crop_size = parse_value(key, v)?,
            "augment.hflip_prob" => self.augment.hflip_prob = parse_value(key, v)?,
            "augment.scale_range" => {
                self.augment.scale_range = if v == "none" { None } else { Some(parse_pair(key, v)?) }
            }
            "loss.ignore_index" => self.ignore_index = parse_value(key, v)?,
            "loss.aux_weight" => self.aux_weight = parse_value(key, v)?,
            "loss.ohem" => self.ohem = parse_value(key, v)?,
            "loss.ohem_threshold" => self.ohem_threshold = parse_value(key, v)?,
            "loss.ohem_min_kept" => self.ohem_min_kept = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "run.output_dir" => self.output_dir = PathBuf::from(v),
            "run.seed" => self.seed = parse_value(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn set_data(&mut self, key: &str, v: &str) -> Result<()> {
        match &mut self.data {
            DataSource::Synth { synth, train_count, val_count } => match key {
                "data.train_count" => *train_count = parse_value(key, v)?,
                "data.val_count" => *val_count = parse_value(key, v)?,
                "synth.height" => synth.height = parse_value(key, v)?,
                "synth.width" => synth.width = parse_value(key, v)?,
                "synth.blobs" => synth.blobs = parse_pair(key, v)?,
                "synth.blob_area" => synth.blob_area = parse_pair(key, v)?,
                "synth.dots" => synth.dots = parse_pair(key, v)?,
                "synth.lines" => synth.lines = parse_pair(key, v)?,
                "synth.line_width" => synth.line_width = parse_pair(key, v)?,
                "synth.grid_area" => synth.grid_area = parse_pair(key, v)?,
                "synth.grid_period" => synth.grid_period = parse_value(key, v)?,
                "synth.gradient" => synth.gradient = parse_value(key, v)?,
                "synth.min_contrast" => synth.min_contrast = parse_value(key, v)?,
                "synth.noise_sigma" => synth.noise_sigma = parse_value(key, v)?,
                _ => return Err(Error::config(key, "unknown key for data.source = synth")),
            },
            DataSource::Manifest { train, val } => match key {
                "data.train_manifest" => *train = PathBuf::from(v),
                "data.val_manifest" => *val = PathBuf::from(v),
                _ => return Err(Error::config(key, "unknown key for data.source = manifest")),
            },
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let n = &self.network;
        let (arch, blocks) = match n.architecture {
            Architecture::Fcn => ("fcn", 3),
            Architecture::Gcm => ("gcm", 3),
            Architecture::Acnet { blocks } => ("acnet", blocks),
        };
        let mut e = vec![
            ("network.architecture", arch.to_string()),
            ("network.blocks", blocks.to_string()),
            ("network.in_channels", n.in_channels.to_string()),
            ("network.num_classes", n.num_classes.to_string()),
            ("network.head_channels", n.head_channels.to_string()),
            ("network.acb_channels", pair(n.acb_channels)),
            ("network.low_channels", n.low_channels.to_string()),
            ("network.aux_enabled", n.aux_enabled.to_string()),
            ("network.aux_channels", n.aux_channels.to_string()),
            ("network.delta", n.delta.to_string()),
            ("network.lcm_reuse", n.reuse_count.to_string()),
            ("network.stem_channels", n.backbone.stem_channels.to_string()),
            ("network.stage_channels", join(&n.backbone.stage_channels)),
            ("network.convs_per_stage", n.backbone.convs_per_stage.to_string()),
            ("network.dilations", join(&n.backbone.last_stage_dilations)),
            ("optim.base_lr", self.base_lr.to_string()),
            ("optim.momentum", self.momentum.to_string()),
            ("optim.weight_decay", self.weight_decay.to_string()),
            ("optim.poly_power", self.poly_power.to_string()),
            ("optim.batch_size", self.batch_size.to_string()),
            ("optim.total_iters", self.total_iters.to_string()),
            ("optim.eval_every", self.eval_every.to_string()),
            ("augment.crop_size", self.augment.crop_size.to_string()),
            ("augment.hflip_prob", self.augment.hflip_prob.to_string()),
            ("augment.scale_range", self.augment.scale_range.map_or("none".into(), pair)),
            ("loss.ignore_index", self.ignore_index.to_string()),
            ("loss.aux_weight", self.aux_weight.to_string()),
            ("loss.ohem", self.ohem.to_string()),
            ("loss.ohem_threshold", self.ohem_threshold.to_string()),
            ("loss.ohem_min_kept", self.ohem_min_kept.map_or("auto".into(), |k| k.to_string())),
        ];
        match &self.data {
            DataSource::Synth { synth, train_count, val_count } => e.extend([
                ("data.source", "synth".to_string()),
                ("data.train_count", train_count.to_string()),
                ("data.val_count", val_count.to_string()),
                ("synth.height", synth.height.to_string()),
                ("synth.width", synth.width.to_string()),
                ("synth.blobs", pair(synth.blobs)),
                ("synth.blob_area", pair(synth.blob_area)),
                ("synth.dots", pair(synth.dots)),
                ("synth.lines", pair(synth.lines)),
                ("synth.line_width", pair(synth.line_width)),
                ("synth.grid_area", pair(synth.grid_area)),
                ("synth.grid_period", synth.grid_period.to_string()),
                ("synth.gradient", synth.gradient.to_string()),
                ("synth.min_contrast", synth.min_contrast.to_string()),
                ("synth.noise_sigma", synth.noise_sigma.to_string()),
            ]),
            DataSource::Manifest { train, val } => e.extend([
                ("data.source", "manifest".to_string()),
                ("data.train_manifest", train.display().to_string()),
                ("data.val_manifest", val.display().to_string()),
            ]),
        }
        e.push(("run.output_dir", self.output_dir.display().to_string()));
        e.push(("run.seed", self.seed.to_string()));
        e
    }

    pub fn serialize(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train_config().validate()?;
        if let DataSource::Synth { synth, train_count, .. } = &self.data {
            synth.validate()?;
            if *train_count == 0 {
                return Err(Error::config("data.train_count", "must be at least 1"));
            }
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return Err(Error::config("loss.ohem_threshold", "must lie in (0, 1]"));
        }
        if self.ohem_min_kept == Some(0) {
            return Err(Error::config("loss.ohem_min_kept", "must be at least 1"));
        }
        if (self.ignore_index as usize) < self.network.num_classes {
            return Err(Error::config("loss.ignore_index", "collides with a class index"));
        }
        Ok(())
    }

    /// The synthetic-data generator settings, seeded from the run seed.
    pub fn synth_config(&self) -> Option<SynthConfig> {
        match &self.data {
            DataSource::Synth { synth, .. } => Some(SynthConfig { seed: self.seed, ..synth.clone() }),
            DataSource::Manifest { .. } => None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let pixels = self.batch_size * self.augment.crop_size * self.augment.crop_size;
        let ohem = self.ohem.then(|| OhemConfig {
            threshold: self.ohem_threshold,
            min_kept: self.ohem_min_kept.unwrap_or((pixels / 16).max(1)),
        });
        TrainConfig {
            total_iters: self.total_iters,
            batch_size: self.batch_size,
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            poly_power: self.poly_power,
            eval_every: self.eval_every,
            seed: self.seed,
            loss: LossConfig { ignore_index: self.ignore_index, aux_weight: self.aux_weight, ohem },
            augment: self.augment,
        }
    }
}
