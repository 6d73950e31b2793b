//! Run settings. Precedence, lowest first: built-in defaults (the desk preset
//! with `--desk-scale`), the `--config` file, `--set key=value` pairs, then
//! dedicated flags such as `--seed`.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use spikevae::config::parse_pairs;
use spikevae::{Error, ModelConfig};

pub struct Settings {
    pub model: ModelConfig,
    /// Whether model keys may be set; commands working from a checkpoint take
    /// the model from it.
    model_keys: bool,
    /// Run keys in declaration order.
    run: Vec<(String, String)>,
}

/// Where user-supplied settings come from.
pub struct Sources<'a> {
    pub config: Option<&'a Path>,
    pub set: &'a [String],
}

impl Settings {
    pub fn resolve(
        model: Option<ModelConfig>,
        run_defaults: &[(&str, &str)],
        sources: &Sources,
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Settings, Error> {
        let mut s = Settings {
            model_keys: model.is_some(),
            model: model.unwrap_or_default(),
            run: run_defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        };
        if let Some(path) = sources.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            for (k, v) in parse_pairs(&text)? {
                if k != "command" {
                    s.apply(&k, &v)?;
                }
            }
        }
        for pair in sources.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {pair:?}")))?;
            s.apply(k.trim(), v.trim())?;
        }
        for (k, v) in flags {
            if let Some(v) = v {
                s.apply(k, &v)?;
            }
        }
        if s.model_keys {
            s.model.validate()?;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), Error> {
        if let Some(slot) = self.run.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
            return Ok(());
        }
        if self.model_keys && ModelConfig::is_key(key) {
            return self.model.set(key, value);
        }
        Err(Error::Config(format!("unknown setting {key:?} for this command")))
    }

    pub fn raw(&self, key: &str) -> &str {
        self.run
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("run key {key} is declared by the command"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Error> {
        let v = self.raw(key);
        v.parse().map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
    }

    /// A path setting; empty means unset.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf, Error> {
        self.path(key).ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
    }

    /// The resolved settings as a config file that reproduces the run. A
    /// checkpoint's model configuration is recorded as comments.
    pub fn to_text(&self, command: &str, checkpoint_model: Option<&ModelConfig>) -> String {
        let mut out = format!("command = {command}\n");
        for (k, v) in &self.run {
            out.push_str(&format!("{k} = {v}\n"));
        }
        if self.model_keys {
            out.push_str(&self.model.to_text());
        }
        if let Some(cfg) = checkpoint_model {
            out.push_str("# model configuration stored in the checkpoint\n");
            for line in cfg.to_text().lines() {
                out.push_str(&format!("# {line}\n"));
            }
        }
        out
    }
}
