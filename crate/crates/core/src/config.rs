//! Layered `key = value` settings.
//!
//! A settings file holds one `key = value` pair per line; `#` starts a
//! comment. Values given explicitly (command-line flags) override values
//! from the file, which override built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::detect::ScaleMode;
use crate::synth::SynthConfig;
use crate::train::{RunConfig, TrainMode};
use crate::{Error, Result};

pub const THREADS_ENV: &str = "FRCNN_THREADS";

/// Every key understood by [`Settings::apply_run`] and
/// [`Settings::apply_synth`], plus dataset sizing keys read by callers.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "lambda",
    "mode",
    "iterations",
    "base_lr",
    "lr_step",
    "lr_gamma",
    "momentum",
    "weight_decay",
    "images_per_batch",
    "rois_per_batch",
    "fg_fraction",
    "fg_iou",
    "bg_iou_lo",
    "bg_iou_hi",
    "flip_prob",
    "pooled_h",
    "pooled_w",
    "trunk",
    "scale",
    "nms",
    "score_floor",
    "classes",
    "channels",
    "stride",
    "min_side",
    "max_side",
    "min_objects",
    "max_objects",
    "min_object_size",
    "max_object_size",
    "proposals_per_object",
    "random_proposals",
    "max_clutter",
    "background_amplitude",
    "noise_std",
    "train_images",
    "test_images",
    "data_seed",
];

/// Parses `key = value` text. Later duplicates win.
pub fn parse_pairs(text: &str, source_name: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: idx + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if !KNOWN_KEYS.contains(&key) {
            return Err(err(format!("unknown setting `{key}`")));
        }
        out.insert(key.to_string(), value.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    file: BTreeMap<String, String>,
    explicit: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Settings::default()
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Settings {
            file: parse_pairs(&text, &path.display().to_string())?,
            explicit: BTreeMap::new(),
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Settings {
            file: parse_pairs(text, "<config>")?,
            explicit: BTreeMap::new(),
        })
    }

    /// Records an explicit value, which takes precedence over the file.
    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown setting `{key}`")));
        }
        self.explicit.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Like [`Settings::set`], skipping `None`.
    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.explicit
            .get(key)
            .or_else(|| self.file.get(key))
            .map(String::as_str)
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("setting `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn update<T>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn apply_run(&self, run: &mut RunConfig) -> Result<()> {
        self.update("seed", &mut run.seed)?;
        self.update("lambda", &mut run.lambda)?;
        self.update::<TrainMode>("mode", &mut run.mode)?;
        self.update("iterations", &mut run.iterations)?;
        self.update("base_lr", &mut run.sgd.base_lr)?;
        self.update("lr_step", &mut run.sgd.lr_step)?;
        self.update("lr_gamma", &mut run.sgd.lr_gamma)?;
        self.update("momentum", &mut run.sgd.momentum)?;
        self.update("weight_decay", &mut run.sgd.weight_decay)?;
        self.update("images_per_batch", &mut run.sampler.images_per_batch)?;
        self.update("rois_per_batch", &mut run.sampler.rois_per_batch)?;
        self.update("fg_fraction", &mut run.sampler.fg_fraction)?;
        self.update("fg_iou", &mut run.sampler.fg_iou_lo)?;
        self.update("bg_iou_lo", &mut run.sampler.bg_iou_lo)?;
        self.update("bg_iou_hi", &mut run.sampler.bg_iou_hi)?;
        self.update("flip_prob", &mut run.sampler.flip_prob)?;
        self.update("pooled_h", &mut run.net.pooled_h)?;
        self.update("pooled_w", &mut run.net.pooled_w)?;
        if let Some(trunk) = self.raw("trunk") {
            run.net.trunk_widths = parse_list(trunk)
                .map_err(|e| Error::Config(format!("setting `trunk` = `{trunk}`: {e}")))?;
        }
        self.update::<ScaleMode>("scale", &mut run.scale.mode)?;
        self.update("nms", &mut run.nms_threshold)?;
        self.update("score_floor", &mut run.score_floor)?;
        run.sampler.seed = run.seed;
        run.validate()
    }

    pub fn apply_synth(&self, cfg: &mut SynthConfig) -> Result<()> {
        self.update("classes", &mut cfg.num_classes)?;
        self.update("channels", &mut cfg.channels)?;
        self.update("stride", &mut cfg.stride)?;
        self.update("min_side", &mut cfg.min_side)?;
        self.update("max_side", &mut cfg.max_side)?;
        self.update("min_objects", &mut cfg.min_objects)?;
        self.update("max_objects", &mut cfg.max_objects)?;
        self.update("min_object_size", &mut cfg.min_object_size)?;
        self.update("max_object_size", &mut cfg.max_object_size)?;
        self.update("proposals_per_object", &mut cfg.proposals_per_object)?;
        self.update("random_proposals", &mut cfg.random_proposals)?;
        self.update("max_clutter", &mut cfg.max_clutter)?;
        self.update("background_amplitude", &mut cfg.background_amplitude)?;
        self.update("noise_std", &mut cfg.noise_std)?;
        cfg.validate()
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let mut run = RunConfig::default();
        self.apply_run(&mut run)?;
        Ok(run)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let mut cfg = SynthConfig::default();
        self.apply_synth(&mut cfg)?;
        Ok(cfg)
    }
}

fn parse_list(text: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    text.split(',').map(|t| t.trim().parse()).collect()
}

/// Worker cap from `FRCNN_THREADS`; `0` or unset means automatic.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|e| Error::Config(format!("{THREADS_ENV}=`{v}`: {e}"))),
        Err(_) => Ok(0),
    }
}

/// Builds a pool with `threads` workers (`0` = one per core).
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))
}

/// Sizes the global pool from `FRCNN_THREADS`. Later calls have no effect.
pub fn init_global_threads() -> Result<usize> {
    let threads = threads_from_env()?;
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(rayon::current_num_threads())
}
