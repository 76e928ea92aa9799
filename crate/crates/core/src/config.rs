//! Dotted-key configuration: `key=value` per line, `#` comments, overrides
//! of the same keys, unknown keys rejected.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every recognised key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.parallel", "true"),
    ("data.n", "1000"),
    (
        "data.mix",
        "cruise=0.2,lead-follow=0.2,junction-turn=0.2,stop=0.2,crossing=0.2",
    ),
    ("data.path", ""),
    ("data.eval_path", ""),
    ("tokenizer.gamma", "3.5"),
    ("tokenizer.codebook_seed", "0"),
    ("model.d_model", "128"),
    ("model.layers", "4"),
    ("model.heads", "4"),
    ("model.mlp_ratio", "4"),
    ("model.max_len", "512"),
    ("sequence.history", "6"),
    ("sequence.interval_s", "1.0"),
    ("sequence.frontend", "discrete"),
    ("sequence.vision_only", "false"),
    ("expert.d_model", "64"),
    ("expert.mlp_ratio", "4"),
    ("expert.decoder", "query"),
    ("expert.queries", "6"),
    ("expert.flow_steps", "10"),
    ("expert.backbone_to_expert", "false"),
    ("diffusion.steps", "100"),
    ("diffusion.beta_start", "0.001"),
    ("diffusion.beta_end", "0.2"),
    ("loss.alpha", "1.0"),
    ("loss.beta", "1.0"),
    ("train.stage", "1"),
    ("train.steps", "500"),
    ("train.batch", "8"),
    ("train.lr", "2e-4"),
    ("train.backbone_lr_scale", "1.0"),
    ("train.warmup", "100"),
    ("train.floor_frac", "0.1"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.95"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "0.01"),
    ("train.grad_clip", "1.0"),
    ("train.freeze_backbone", "false"),
    ("train.precision", "f32"),
    ("train.stage1_checkpoint", ""),
    ("train.stage2_history", "2"),
    ("eval.checkpoint", ""),
    ("eval.max_records", "500"),
    ("eval.temperature", "0"),
    ("sweep.sizes", "1000,10000,50000"),
    ("sweep.seeds", "0,1,2"),
    ("sweep.frontends", "discrete,continuous"),
    ("sweep.variants", "action-only,world-model"),
    ("sweep.eval_frames", "1000"),
    ("sweep.eval_seed", "1000003"),
    ("ablate.variants", "6VA,6V,VA,2VA,interval-0,interval-1,interval-4"),
    ("ablate.stage1_steps", "500"),
    ("ablate.stage2_steps", "300"),
    ("ablate.seeds", "0"),
    ("latency.repeats", "20"),
    ("latency.warmup", "5"),
    ("latency.tokens", "4,8,12,16"),
    ("generate.record", "12"),
    ("generate.temperature", "1.0"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key '{key}'"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies every line of a configuration text.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.parse().map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
    }

    pub fn list<V: FromStr>(&self, key: &str) -> Result<Vec<V>>
    where
        V::Err: Display,
    {
        let raw = self.raw(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| Error::Config(format!("{key}: '{s}': {e}"))))
            .collect()
    }

    /// Value of a path key; `None` when empty.
    pub fn path(&self, key: &str) -> Result<Option<std::path::PathBuf>> {
        let raw = self.raw(key)?;
        Ok((!raw.is_empty()).then(|| raw.into()))
    }

    /// Effective configuration, one sorted `key=value` per line.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            s.push_str(k);
            s.push('=');
            s.push_str(v);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = Config::default();
        c.set("model.d_model", "64").unwrap();
        c.set_pair("data.mix=cruise=1.0").unwrap();
        let back = Config::from_text(&c.echo()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get::<usize>("model.d_model").unwrap(), 64);
        assert_eq!(back.raw("data.mix").unwrap(), "cruise=1.0");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::from_text("model.width=3").is_err());
        assert!(Config::default().set_pair("no_equals").is_err());
        let e = Config::from_text("# comment\n\nmodel.layers=2\nbogus=1\n").unwrap_err();
        assert!(e.to_string().contains("line 4"));
    }

    #[test]
    fn typed_access() {
        let c = Config::default();
        assert_eq!(c.list::<usize>("sweep.sizes").unwrap(), vec![1000, 10000, 50000]);
        assert!(c.get::<bool>("train.freeze_backbone").is_ok());
        assert!(c.get::<usize>("sequence.frontend").is_err());
        assert_eq!(c.path("data.path").unwrap(), None);
    }
}
