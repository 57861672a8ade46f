//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Keys are strict: unknown or repeated keys are errors, reported with
//! their line number.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::MptNetConfig;
use crate::phantom::PhantomSpec;

/// Learning rate used when a config does not set one.
pub const DEFAULT_LR: f64 = 5e-5;

/// Parsed assignments, consumed key by key.
#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: IndexMap<String, (usize, String)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = IndexMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {}: invalid key '{k}'", n + 1)));
            }
            if entries.insert(k.to_string(), (n + 1, v.to_string())).is_some() {
                return Err(Error::Config(format!("line {}: key '{k}' repeated", n + 1)));
            }
        }
        Ok(KeyValues { entries })
    }

    /// Removes and parses `key`, if present.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.entries.shift_remove(key) {
            None => Ok(None),
            Some((line, v)) => {
                v.parse().map(Some).map_err(|e| Error::Config(format!("line {line}: bad value for '{key}': {e}")))
            }
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Config(format!("line {line}: unknown key '{k}'"))),
        }
    }
}

/// Everything `train` needs besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: MptNetConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { model: MptNetConfig::default(), epochs: 20, batch_size: 8, lr: DEFAULT_LR, seed: 0 }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = TrainConfig::default();
        let m = &mut c.model;
        kv.set("in_channels", &mut m.in_channels)?;
        kv.set("base_channels", &mut m.base_channels)?;
        kv.set("stages", &mut m.stages)?;
        kv.set("pairs_per_stage", &mut m.pairs_per_stage)?;
        kv.set("n_clusters", &mut m.n_clusters)?;
        kv.set("window", &mut m.window)?;
        kv.set("n_squaring", &mut m.n_squaring)?;
        kv.set("v_max", &mut m.v_max)?;
        kv.set("heads", &mut m.heads)?;
        kv.set("mlp_ratio", &mut m.mlp_ratio)?;
        kv.set("num_classes", &mut m.num_classes)?;
        kv.set("morph", &mut m.morph)?;
        kv.set("sca", &mut m.sca)?;
        kv.set("fusion", &mut m.fusion)?;
        kv.set("core_update", &mut m.core_update)?;
        kv.set("beta_init", &mut m.beta_init)?;
        kv.set("epochs", &mut c.epochs)?;
        kv.set("batch_size", &mut c.batch_size)?;
        kv.set("lr", &mut c.lr)?;
        kv.set("seed", &mut c.seed)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read(path.as_ref())?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Renders every key; parsing the result gives back `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: &dyn fmt::Display| writeln!(s, "{k} = {v}").expect("writing to a String");
        put("in_channels", &m.in_channels);
        put("base_channels", &m.base_channels);
        put("stages", &m.stages);
        put("pairs_per_stage", &m.pairs_per_stage);
        put("n_clusters", &m.n_clusters);
        put("window", &m.window);
        put("n_squaring", &m.n_squaring);
        put("v_max", &m.v_max);
        put("heads", &m.heads);
        put("mlp_ratio", &m.mlp_ratio);
        put("num_classes", &m.num_classes);
        put("morph", &m.morph);
        put("sca", &m.sca);
        put("fusion", &m.fusion);
        put("core_update", &m.core_update);
        put("beta_init", &m.beta_init);
        put("epochs", &self.epochs);
        put("batch_size", &self.batch_size);
        put("lr", &self.lr);
        put("seed", &self.seed);
        s
    }
}

/// Phantom dataset description for `phantom --spec`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub spec: PhantomSpec,
    pub n_train: usize,
    pub n_eval: usize,
}

impl DatasetConfig {
    /// `preset` picks the base spec; other keys override it wherever they
    /// appear in the file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let preset: Option<String> = kv.take("preset")?;
        let mut spec = PhantomSpec::preset(preset.as_deref().unwrap_or("curved"))?;
        kv.set("size", &mut spec.size)?;
        kv.set("tubes", &mut spec.tubes)?;
        kv.set("radius_min", &mut spec.radius_min)?;
        kv.set("radius_max", &mut spec.radius_max)?;
        kv.set("curvature", &mut spec.curvature)?;
        kv.set("bifurcation_prob", &mut spec.bifurcation_prob)?;
        kv.set("contrast", &mut spec.contrast)?;
        kv.set("noise_sigma", &mut spec.noise_sigma)?;
        kv.set("seed", &mut spec.seed)?;
        let mut c = DatasetConfig { spec, n_train: 64, n_eval: 16 };
        kv.set("n_train", &mut c.n_train)?;
        kv.set("n_eval", &mut c.n_eval)?;
        kv.finish()?;
        c.spec.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read(path.as_ref())?)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
