//! Run configuration: `section.key = value` lines, overridable from the
//! command line, with a stable hash of the resolved settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hierplace::engine::Adam;
use hierplace::grid::{GridLevel, GridSpec};
use hierplace::hier_embedding::Method;
use hierplace::model::ModelConfig;
use hierplace::probe::ProbeConfig;
use hierplace::synth::SynthConfig;
use hierplace::trajectories::{BucketConfig, DEFAULT_RATIOS};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {msg}")]
    Value { key: String, msg: String },
}

fn value_err(key: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

/// Where probe labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// 100 m land-use codes (1..=17), merged and aggregated to 500 m.
    Landuse100m,
    /// Class (0..15) per finest cell, e.g. the synthetic ground truth.
    Cell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub buckets: BucketConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub staypoints: PathBuf,
    pub max_len: usize,
    pub max_malformed: usize,
    pub ratios: [f64; 3],
    pub split_seed: u64,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub out: PathBuf,
    pub labels: PathBuf,
    pub label_kind: LabelKind,
    pub label_merge: Option<PathBuf>,
    pub city: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            buckets: BucketConfig::default(),
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            probe: ProbeConfig::default(),
            staypoints: PathBuf::from("data/staypoints.tsv"),
            max_len: 64,
            max_malformed: 0,
            ratios: DEFAULT_RATIOS,
            split_seed: 0,
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            threads: 1,
            out: PathBuf::from("out"),
            labels: PathBuf::from("data/ground_truth.tsv"),
            label_kind: LabelKind::Cell,
            label_merge: None,
            city: "synthetic".to_string(),
        }
    }
}

/// Keys that locate files or schedule work; they do not affect results and
/// are left out of the hash.
const UNHASHED: &[&str] = &["run.threads", "run.out"];

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| value_err(key, e)))
        .collect()
}

/// `0-9` ranges and comma lists.
fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>, ConfigError> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let a: u64 = a.trim().parse().map_err(|e| value_err(key, e))?;
            let b: u64 = b.trim().parse().map_err(|e| value_err(key, e))?;
            if b < a {
                return Err(value_err(key, "descending range"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|e| value_err(key, e))?);
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| value_err(key, e))
}

impl RunConfig {
    /// Resolved settings as canonical `key -> value` text.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let (ox, oy) = self.grid.origin();
        put("grid.origin_x", ox.to_string());
        put("grid.origin_y", oy.to_string());
        put(
            "grid.levels",
            self.grid
                .levels()
                .iter()
                .map(|l| format!("{}:{}", l.name, l.cell_size))
                .collect::<Vec<_>>()
                .join(","),
        );
        put(
            "buckets.utc_offset_s",
            self.buckets.utc_offset_s.to_string(),
        );
        put("buckets.tod_bins", self.buckets.tod_bins.to_string());
        put("buckets.dur_edges_s", list(&self.buckets.dur_edges_s));
        let mc = &self.model;
        put("model.method", mc.method.to_string());
        put("model.d", mc.d.to_string());
        put("model.hidden", mc.hidden.to_string());
        put("model.layers", mc.layers.to_string());
        put("model.readout", mc.readout.to_string());
        put("model.dow_dim", mc.dow_dim.to_string());
        put("model.tod_dim", mc.tod_dim.to_string());
        put("model.dur_dim", mc.dur_dim.to_string());
        put("model.epochs", mc.epochs.to_string());
        put("model.avg_interval", mc.avg_interval.to_string());
        put("model.batch_size", mc.batch_size.to_string());
        put("model.lr", mc.optimizer.lr.to_string());
        put("model.beta1", mc.optimizer.beta1.to_string());
        put("model.beta2", mc.optimizer.beta2.to_string());
        put("model.eps", mc.optimizer.eps.to_string());
        put("model.clip_norm", mc.clip_norm.to_string());
        put("model.embed_init", mc.embed_init.to_string());
        put("model.average_moments", mc.average_moments.to_string());
        let s = &self.synth;
        put("synth.regions_per_side", s.regions_per_side.to_string());
        put("synth.leaves_per_region", s.leaves_per_region.to_string());
        put("synth.places_per_leaf", s.places_per_leaf.to_string());
        put("synth.users", s.users.to_string());
        put("synth.mean_len", s.mean_len.to_string());
        put("synth.zipf_exponent", s.zipf_exponent.to_string());
        put("synth.alpha", s.alpha.to_string());
        put("synth.classes", s.classes.to_string());
        put("synth.classes_per_region", s.classes_per_region.to_string());
        put("synth.stickiness", s.stickiness.to_string());
        put(
            "synth.profile_concentration",
            s.profile_concentration.to_string(),
        );
        put("synth.start_time", s.start_time.to_string());
        put("synth.seed", s.seed.to_string());
        put("data.staypoints", self.staypoints.display().to_string());
        put("data.max_len", self.max_len.to_string());
        put("data.max_malformed", self.max_malformed.to_string());
        put("data.ratios", list(&self.ratios));
        put("data.split_seed", self.split_seed.to_string());
        put("run.methods", list(&self.methods));
        put("run.seeds", list(&self.seeds));
        put("run.threads", self.threads.to_string());
        put("run.out", self.out.display().to_string());
        put("probe.labels", self.labels.display().to_string());
        put(
            "probe.label_kind",
            match self.label_kind {
                LabelKind::Landuse100m => "landuse100m",
                LabelKind::Cell => "cell",
            }
            .to_string(),
        );
        put(
            "probe.merge",
            self.label_merge
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        put("probe.epochs", self.probe.epochs.to_string());
        put("probe.lr", self.probe.optimizer.lr.to_string());
        put("probe.seed", self.probe.seed.to_string());
        put("probe.city", self.city.clone());
        m
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "grid.origin_x" | "grid.origin_y" | "grid.levels" => {
                let (mut ox, mut oy) = self.grid.origin();
                let mut levels: Vec<GridLevel> = self.grid.levels().to_vec();
                match key {
                    "grid.origin_x" => ox = num(key, v)?,
                    "grid.origin_y" => oy = num(key, v)?,
                    _ => {
                        levels = v
                            .split(',')
                            .map(|part| {
                                let (name, size) = part
                                    .split_once(':')
                                    .ok_or_else(|| value_err(key, "expected name:size pairs"))?;
                                Ok(GridLevel::new(name.trim(), num::<u32>(key, size)?))
                            })
                            .collect::<Result<_, ConfigError>>()?;
                    }
                }
                self.grid = GridSpec::new(ox, oy, levels).map_err(|e| value_err(key, e))?;
            }
            "buckets.utc_offset_s" => self.buckets.utc_offset_s = num(key, v)?,
            "buckets.tod_bins" => self.buckets.tod_bins = num(key, v)?,
            "buckets.dur_edges_s" => self.buckets.dur_edges_s = parse_list(key, v)?,
            "model.method" => self.model.method = num(key, v)?,
            "model.d" => self.model.d = num(key, v)?,
            "model.hidden" => self.model.hidden = num(key, v)?,
            "model.layers" => self.model.layers = num(key, v)?,
            "model.readout" => self.model.readout = num(key, v)?,
            "model.dow_dim" => self.model.dow_dim = num(key, v)?,
            "model.tod_dim" => self.model.tod_dim = num(key, v)?,
            "model.dur_dim" => self.model.dur_dim = num(key, v)?,
            "model.epochs" => self.model.epochs = num(key, v)?,
            "model.avg_interval" => self.model.avg_interval = num(key, v)?,
            "model.batch_size" => self.model.batch_size = num(key, v)?,
            "model.lr" => self.model.optimizer.lr = num(key, v)?,
            "model.beta1" => self.model.optimizer.beta1 = num(key, v)?,
            "model.beta2" => self.model.optimizer.beta2 = num(key, v)?,
            "model.eps" => self.model.optimizer.eps = num(key, v)?,
            "model.clip_norm" => self.model.clip_norm = num(key, v)?,
            "model.embed_init" => self.model.embed_init = num(key, v)?,
            "model.average_moments" => self.model.average_moments = num(key, v)?,
            "synth.regions_per_side" => self.synth.regions_per_side = num(key, v)?,
            "synth.leaves_per_region" => self.synth.leaves_per_region = num(key, v)?,
            "synth.places_per_leaf" => self.synth.places_per_leaf = num(key, v)?,
            "synth.users" => self.synth.users = num(key, v)?,
            "synth.mean_len" => self.synth.mean_len = num(key, v)?,
            "synth.zipf_exponent" => self.synth.zipf_exponent = num(key, v)?,
            "synth.alpha" => self.synth.alpha = num(key, v)?,
            "synth.classes" => self.synth.classes = num(key, v)?,
            "synth.classes_per_region" => self.synth.classes_per_region = num(key, v)?,
            "synth.stickiness" => self.synth.stickiness = num(key, v)?,
            "synth.profile_concentration" => self.synth.profile_concentration = num(key, v)?,
            "synth.start_time" => self.synth.start_time = num(key, v)?,
            "synth.seed" => self.synth.seed = num(key, v)?,
            "data.staypoints" => self.staypoints = PathBuf::from(v),
            "data.max_len" => self.max_len = num(key, v)?,
            "data.max_malformed" => self.max_malformed = num(key, v)?,
            "data.ratios" => {
                let r: Vec<f64> = parse_list(key, v)?;
                self.ratios = r
                    .try_into()
                    .map_err(|_| value_err(key, "expected three ratios"))?;
            }
            "data.split_seed" => self.split_seed = num(key, v)?,
            "run.methods" => self.methods = parse_list(key, v)?,
            "run.seeds" => self.seeds = parse_seeds(key, v)?,
            "run.threads" => self.threads = num(key, v)?,
            "run.out" => self.out = PathBuf::from(v),
            "probe.labels" => self.labels = PathBuf::from(v),
            "probe.label_kind" => {
                self.label_kind = match v {
                    "landuse100m" => LabelKind::Landuse100m,
                    "cell" => LabelKind::Cell,
                    _ => return Err(value_err(key, "expected `landuse100m` or `cell`")),
                }
            }
            "probe.merge" => self.label_merge = (!v.is_empty()).then(|| PathBuf::from(v)),
            "probe.epochs" => self.probe.epochs = num(key, v)?,
            "probe.lr" => {
                self.probe.optimizer = Adam {
                    lr: num(key, v)?,
                    ..self.probe.optimizer
                }
            }
            "probe.seed" => self.probe.seed = num(key, v)?,
            "probe.city" => self.city = v.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a config text on top of the current settings. `[section]`
    /// headers prefix the keys that follow them.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| value_err("model", e))?;
        self.buckets
            .validate()
            .map_err(|e| value_err("buckets", e))?;
        self.synth
            .validate(&self.grid)
            .map_err(|e| value_err("synth", e))?;
        if self.methods.is_empty() {
            return Err(value_err("run.methods", "no methods"));
        }
        if self.seeds.is_empty() {
            return Err(value_err("run.seeds", "no seeds"));
        }
        if self.threads == 0 {
            return Err(value_err("run.threads", "must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(value_err("data.max_len", "must be at least 2"));
        }
        if self.probe.epochs == 0 {
            return Err(value_err("probe.epochs", "must be positive"));
        }
        Ok(())
    }

    /// Canonical text of every result-affecting setting.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            if !UNHASHED.contains(&k.as_str()) {
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`canonical`](Self::canonical).
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
