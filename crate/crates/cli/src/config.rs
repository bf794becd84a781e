//! Run configuration: defaults, an optional TOML file with dotted keys, and
//! flag overrides, in that order.

use std::path::Path;

use roct_core::trainer::TrainConfig;
use toml::{Table, Value};

use crate::error::{CliError, CliResult, IoContext};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Preset name or path to a JSON model spec.
    pub spec: String,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            spec: "toy".into(),
            train: TrainConfig::standard(),
        }
    }
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> CliError {
    CliError::BadValue {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn float(key: &str, v: &Value) -> CliResult<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(bad(key, "expected a number")),
    }
}

fn uint(key: &str, v: &Value) -> CliResult<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(bad(key, "expected a non-negative integer")),
    }
}

fn boolean(key: &str, v: &Value) -> CliResult<bool> {
    v.as_bool().ok_or_else(|| bad(key, "expected true or false"))
}

impl RunConfig {
    /// Applies every key of a TOML document. Tables and dotted keys are
    /// equivalent: `[train] epochs = 3` and `train.epochs = 3`.
    pub fn apply_toml(&mut self, text: &str, path: &Path) -> CliResult<()> {
        let table: Table = text.parse().map_err(|source| CliError::ConfigSyntax {
            path: path.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for (key, value) in entries {
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).at(path)?;
        self.apply_toml(&text, path)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> CliResult<()> {
        let t = &mut self.train;
        match key {
            "model.spec" => {
                self.spec = v.as_str().ok_or_else(|| bad(key, "expected a string"))?.to_string()
            }
            "train.initial_lr" => t.initial_lr = float(key, v)?,
            "train.decay_rate" => t.decay_rate = float(key, v)?,
            "train.decay_every_epochs" => t.decay_every_epochs = uint(key, v)? as usize,
            "train.momentum" => t.momentum = float(key, v)?,
            "train.batch_size" => t.batch_size = uint(key, v)? as usize,
            "train.epochs" => t.epochs = uint(key, v)? as usize,
            "train.seed" => t.seed = uint(key, v)?,
            "train.dropout_rate" => t.dropout_rate = float(key, v)?,
            "train.clip_norm" => {
                let c = float(key, v)?;
                t.clip_norm = (c > 0.0).then_some(c);
            }
            "augment.hflip" => t.augment.hflip = boolean(key, v)?,
            "augment.vflip" => t.augment.vflip = boolean(key, v)?,
            "augment.zoom_range" => t.augment.zoom_range = float(key, v)?,
            "augment.shift_range" => t.augment.shift_range = float(key, v)?,
            "augment.rotation_degrees" => t.augment.rotation_degrees = float(key, v)?,
            _ => return Err(CliError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every setting as TOML, in a form [`RunConfig::apply_toml`] reads back.
    /// A disabled clip norm is written as 0.
    pub fn to_toml(&self) -> String {
        let t = &self.train;
        let a = &t.augment;
        format!(
            "[model]\nspec = {spec:?}\n\n\
             [train]\ninitial_lr = {:?}\ndecay_rate = {:?}\ndecay_every_epochs = {}\nmomentum = {:?}\n\
             batch_size = {}\nepochs = {}\nseed = {}\ndropout_rate = {:?}\nclip_norm = {:?}\n\n\
             [augment]\nhflip = {}\nvflip = {}\nzoom_range = {:?}\nshift_range = {:?}\nrotation_degrees = {:?}\n",
            t.initial_lr,
            t.decay_rate,
            t.decay_every_epochs,
            t.momentum,
            t.batch_size,
            t.epochs,
            t.seed,
            t.dropout_rate,
            t.clip_norm.unwrap_or(0.0),
            a.hflip,
            a.vflip,
            a.zoom_range,
            a.shift_range,
            a.rotation_degrees,
            spec = self.spec,
        )
    }
}
