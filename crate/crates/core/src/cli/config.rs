//! Run configuration: one TOML file per run, with `key.path=value`
//! overrides layered on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deploy::{operating_point, CycleModel, MemoryHierarchy, MAX_PERF};
use crate::error::{Error, Result};
use crate::nas::SearchConfig;
use crate::quant::QuantConfig;
use crate::sim::SimConfig;
use crate::zoo::{
    build_frontnet, build_mobilenet, generate_dataset, ArchSpec, Camera, Dataset, Family, FrontnetConfig,
    LabelRanges, MobileNetConfig, TrainConfig, DESK_HW,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub input_hw: [usize; 2],
    pub ranges: LabelRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 400,
            seed: 0,
            input_hw: DESK_HW,
            ranges: LabelRanges::default(),
        }
    }
}

/// Seed architecture. Missing widths mean the family's standard widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub widths: Option<Vec<usize>>,
    pub width_multiplier: f64,
    pub calibrated_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: Family::Frontnet,
            widths: None,
            width_multiplier: 1.0,
            calibrated_head: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeployConfig {
    pub memory: MemoryHierarchy,
    pub cycles: CycleModel,
    pub operating_point: String,
}

impl Default for DeployConfig {
    fn default() -> Self {
        Self {
            memory: MemoryHierarchy::default(),
            cycles: CycleModel::default(),
            operating_point: MAX_PERF.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub episode: SimConfig,
    pub seeds: Vec<u64>,
    /// Query a network at its planned frame rate instead of `episode.estimate_hz`.
    pub deploy_rate: bool,
    /// Label ranges of the data behind the trivial predictor's constant.
    pub trivial_ranges: Option<LabelRanges>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            episode: SimConfig::default(),
            seeds: (0..5).collect(),
            deploy_rate: true,
            trivial_ranges: None,
        }
    }
}

/// Search settings. Training during and after the search follows `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub lambdas: Vec<f64>,
    pub lambda_scale: f64,
    pub search_epochs: usize,
    pub mask_lr: f32,
    pub tau: f32,
    pub window: f32,
    pub reuse_weights: bool,
    pub threads: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            lambdas: d.lambdas,
            lambda_scale: d.lambda_scale,
            search_epochs: d.search_epochs,
            mask_lr: d.mask_lr,
            tau: d.tau,
            window: d.window,
            reuse_weights: d.reuse_weights,
            threads: d.threads,
        }
    }
}

impl SearchSection {
    pub fn with_train(&self, train: &TrainConfig) -> SearchConfig {
        SearchConfig {
            lambdas: self.lambdas.clone(),
            lambda_scale: self.lambda_scale,
            search_epochs: self.search_epochs,
            mask_lr: self.mask_lr,
            tau: self.tau,
            window: self.window,
            train: train.clone(),
            reuse_weights: self.reuse_weights,
            threads: self.threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub quant: QuantConfig,
    pub deploy: DeployConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut quant = QuantConfig::default();
        quant.train.epochs = 5;
        quant.train.lr = 3e-4;
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            search: SearchSection::default(),
            quant,
            deploy: DeployConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

fn format_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("config: {e}"))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn leaf_paths(t: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in t {
        let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(sub) if !sub.is_empty() => leaf_paths(sub, &p, out),
            _ => out.push(p),
        }
    }
}

fn has_path(t: &toml::Table, path: &str) -> bool {
    let mut cur = t;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(toml::Value::Table(sub)) if i + 1 < parts.len() => cur = sub,
            Some(_) => return i + 1 == parts.len(),
            None => return false,
        }
    }
    false
}

/// Parses `key.path=value`. The value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("override `{s}` is not KEY=VALUE")))?;
    let k = k.trim();
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(Error::InvalidArgument(format!("bad override key `{k}`")));
    }
    let v = v.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(v.to_string()),
    };
    Ok((k.to_string(), value))
}

fn set_path(t: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = t;
    for p in parts {
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::InvalidArgument(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(format_err)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        Self::resolve(Some(s), &[])
    }

    /// Defaults, then the file contents, then the overrides. Every key given
    /// by the user must survive the round trip, so typos are reported.
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::default()).map_err(format_err)?;
        let mut given = Vec::new();
        if let Some(text) = file {
            let user: toml::Table = toml::from_str(text).map_err(format_err)?;
            leaf_paths(&user, "", &mut given);
            merge(&mut table, user);
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut table, &k, v)?;
            given.push(k);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(format_err)?;
        let back = toml::Table::try_from(&cfg).map_err(format_err)?;
        if let Some(k) = given.iter().find(|k| !has_path(&back, k)) {
            return Err(Error::Format(format!("config: unknown key `{k}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 || d.input_hw.contains(&0) {
            return Err(Error::InvalidArgument("data needs n_train, n_test and input_hw > 0".into()));
        }
        d.ranges.validate()?;
        if let Some(r) = &self.simulate.trivial_ranges {
            r.validate()?;
        }
        self.train.validate()?;
        self.search_config().validate()?;
        self.quant.validate()?;
        self.deploy.memory.validate()?;
        self.deploy.cycles.validate()?;
        operating_point(&self.deploy.operating_point)?;
        self.simulate.episode.validate()?;
        if self.simulate.seeds.is_empty() {
            return Err(Error::InvalidArgument("simulate.seeds is empty".into()));
        }
        if self.model.family == Family::Custom {
            return Err(Error::InvalidArgument("model.family must be frontnet or mobilenet".into()));
        }
        Ok(())
    }

    pub fn search_config(&self) -> SearchConfig {
        self.search.with_train(&self.train)
    }

    /// Train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let cam = Camera::new(d.input_hw[0], d.input_hw[1]);
        generate_dataset(d.n_train + d.n_test, d.seed, &d.ranges, &cam)?.split(d.n_train)
    }

    pub fn seed_arch(&self) -> Result<ArchSpec> {
        let m = &self.model;
        match m.family {
            Family::Frontnet => {
                let mut c = FrontnetConfig {
                    input_hw: self.data.input_hw,
                    ..FrontnetConfig::default()
                };
                if let Some(w) = &m.widths {
                    c.widths = w.clone();
                }
                build_frontnet(&c)
            }
            Family::Mobilenet => build_mobilenet(
                m.width_multiplier,
                &MobileNetConfig {
                    input_hw: self.data.input_hw,
                    widths: m.widths.clone(),
                    calibrated_head: m.calibrated_head,
                },
            ),
            Family::Custom => Err(Error::InvalidArgument("no seed builder for a custom family".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let c = RunConfig::resolve(
            Some("[train]\nepochs = 3\nlr = 0.01\n"),
            &["train.epochs=7".into(), "deploy.operating_point=min_power".into(), "search.lambdas=[0.0]".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.deploy.operating_point, "min_power");
        assert_eq!(c.search.lambdas, vec![0.0]);
    }

    #[test]
    fn partial_nested_tables_keep_defaults() {
        let c = RunConfig::resolve(None, &["simulate.episode.path.start.x=1.5".into()]).unwrap();
        assert_eq!(c.simulate.episode.path.start.x, 1.5);
        assert_eq!(c.simulate.episode.path.start.z, 1.7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in ["train.epoch=3", "nosuch.key=1", "train.epochs=-1", "deploy.operating_point=turbo", "x"] {
            let e = RunConfig::resolve(None, &[bad.into()]).unwrap_err();
            assert!(e.is_validation(), "{bad}: {e}");
        }
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[data]\nn_train = 0\n").is_err());
    }
}
