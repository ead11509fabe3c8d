//! Flat `key = value` experiment configuration.
//!
//! A config file holds one `key = value` pair per line; `#` starts a comment
//! and blank lines are ignored. Command-line flags are merged on top, so a
//! flag always wins over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use residual_probe::analysis::Metric;
use residual_probe::probe::PositionSet;
use residual_probe::toy::{ToyParams, DEFAULT_BETA, DEFAULT_COPY_GAIN, DEFAULT_VOCAB};

use crate::error::{CliError, CliResult};

/// Every key accepted in a config file or as a flag.
pub const KNOWN_KEYS: &[&str] = &[
    "model",
    "weights",
    "n_heads",
    "dtype",
    "t0",
    "batch",
    "seed",
    "vocab",
    "vocab_limit",
    "eps",
    "eps0",
    "positions",
    "metrics",
    "dj_window",
    "bos",
    "sequences",
    "out",
];

pub const DEFAULT_T0: usize = 16;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_EPS: f64 = 0.05;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Overlays flag values; `None` leaves the file value in place.
    pub fn set(&mut self, key: &str, value: Option<String>) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        if let Some(v) = value {
            self.entries.insert(key.to_string(), v);
        }
    }

    pub fn remove(&mut self, key: &str) {
        self.entries.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("`{key}`: cannot parse `{v}`: {e}")))
            })
            .transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Toy(ToyParams),
    Weights { path: PathBuf, n_heads: Option<usize> },
}

impl ModelSpec {
    /// `toy[:V[,beta[,copy_gain[,onehot]]]]`; omitted fields take defaults.
    /// The positional block is sized later, once the sequence length is
    /// known.
    pub fn parse_toy(spec: &str) -> CliResult<ToyParams> {
        let rest = spec
            .strip_prefix("toy")
            .ok_or_else(|| CliError::Config(format!("model spec `{spec}` must start with `toy`")))?;
        let rest = match rest.strip_prefix(':') {
            Some(r) => r,
            None if rest.is_empty() => "",
            None => return Err(CliError::Config(format!("malformed model spec `{spec}`"))),
        };
        let fields: Vec<&str> = if rest.is_empty() { Vec::new() } else { rest.split(',').map(str::trim).collect() };
        if fields.len() > 4 {
            return Err(CliError::Config(format!("too many fields in `{spec}`")));
        }
        let num = |i: usize, default: f64| -> CliResult<f64> {
            match fields.get(i) {
                Some(s) if !s.is_empty() => s
                    .parse()
                    .map_err(|_| CliError::Config(format!("`{spec}`: field {} is not a number", i + 1))),
                _ => Ok(default),
            }
        };
        let vocab = match fields.first() {
            Some(s) if !s.is_empty() => s
                .parse()
                .map_err(|_| CliError::Config(format!("`{spec}`: vocabulary must be an integer")))?,
            _ => DEFAULT_VOCAB,
        };
        let (beta, gain) = (num(1, DEFAULT_BETA)?, num(2, DEFAULT_COPY_GAIN)?);
        let params = match fields.get(3) {
            None => ToyParams::new(vocab, 2, beta, gain),
            Some(&"onehot") => ToyParams::one_hot(vocab, 2, beta, gain),
            Some(other) => return Err(CliError::Config(format!("`{spec}`: unknown token mode `{other}`"))),
        };
        params.validate()?;
        Ok(params)
    }

    /// Identifier stored in every result; results are only analyzed together
    /// when their identifiers match.
    pub fn id(&self) -> String {
        match self {
            ModelSpec::Toy(p) => {
                let mode = match p.tokens {
                    residual_probe::toy::TokenVectors::OneHot => ",onehot".to_string(),
                    residual_probe::toy::TokenVectors::Gaussian { dim, seed } => format!(",gaussian{dim}s{seed}"),
                };
                format!("toy:{},{},{}{mode}", p.vocab, p.beta, p.copy_gain)
            }
            ModelSpec::Weights { path, .. } => format!("weights:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn parse(s: &str) -> CliResult<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(CliError::Config(format!("dtype must be f32 or f64, got `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

pub fn parse_positions(s: &str) -> CliResult<PositionSet> {
    if s == "all" {
        return Ok(PositionSet::All);
    }
    if let Some(n) = s.strip_prefix("stride:") {
        let n: usize = n
            .parse()
            .map_err(|_| CliError::Config(format!("bad stride in `{s}`")))?;
        if n == 0 {
            return Err(CliError::Config("position stride must be positive".into()));
        }
        return Ok(PositionSet::Stride(n));
    }
    if let Some(list) = s.strip_prefix("list:") {
        let v = list
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Config(format!("bad position list `{s}`")))?;
        return Ok(PositionSet::Explicit(v));
    }
    Err(CliError::Config(format!("positions must be `all`, `stride:<n>` or `list:<i,j,..>`, got `{s}`")))
}

pub fn parse_eps_list(s: &str) -> CliResult<Vec<f64>> {
    let mut eps = Vec::new();
    for part in s.split(',') {
        let e: f64 = part
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("bad strength `{}`", part.trim())))?;
        if !(e > 0.0 && e <= 1.0) {
            return Err(CliError::Config(format!("strength {e} outside (0, 1]")));
        }
        if eps.contains(&e) {
            return Err(CliError::Config(format!("strength {e} listed twice")));
        }
        eps.push(e);
    }
    Ok(eps)
}

pub fn parse_metrics(s: &str) -> CliResult<Vec<Metric>> {
    s.split(',').map(|m| Metric::parse(m).map_err(CliError::from)).collect()
}

pub fn parse_window(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Config(format!("window must be `lo,hi`, got `{s}`"));
    let (lo, hi) = s.split_once(',').ok_or_else(bad)?;
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

/// Sequence-generation settings shared by `gen-seq` and `probe`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceConfig {
    pub t0: usize,
    pub batch: usize,
    pub seed: u64,
    /// Explicit vocabulary; otherwise taken from the model.
    pub vocab: Option<usize>,
    /// Upper bound on sampled ids, e.g. to drop a special-token tail.
    pub vocab_limit: Option<usize>,
}

impl SequenceConfig {
    pub fn from_map(map: &ConfigMap) -> CliResult<Self> {
        Ok(Self {
            t0: map.parsed("t0")?.unwrap_or(DEFAULT_T0),
            batch: map.parsed("batch")?.unwrap_or(DEFAULT_BATCH),
            seed: map.parsed("seed")?.unwrap_or(0),
            vocab: map.parsed("vocab")?,
            vocab_limit: map.parsed("vocab_limit")?,
        })
    }

    /// Sampling range given the model's vocabulary size (if any).
    pub fn effective_vocab(&self, model_vocab: Option<usize>) -> CliResult<usize> {
        let v = match (self.vocab, model_vocab) {
            (Some(v), Some(m)) if v > m => {
                return Err(CliError::Config(format!("vocab {v} exceeds the model vocabulary {m}")))
            }
            (Some(v), _) => v,
            (None, Some(m)) => m,
            (None, None) => {
                return Err(CliError::Config("set `vocab` or name a model to take it from".into()))
            }
        };
        Ok(self.vocab_limit.map_or(v, |l| l.min(v)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub dtype: Dtype,
    pub sequences: SequenceConfig,
    /// Read tokens from a batch file instead of generating them.
    pub sequences_file: Option<PathBuf>,
    pub eps: Vec<f64>,
    pub eps0: f64,
    pub positions: PositionSet,
    pub metrics: Vec<Metric>,
    pub dj_window: Option<(usize, usize)>,
    pub bos: Option<u32>,
    pub out: PathBuf,
}

/// Model named by `model` / `weights`; exactly one must be present.
pub fn model_from_map(map: &ConfigMap) -> CliResult<Option<ModelSpec>> {
    let n_heads = map.parsed("n_heads")?;
    match (map.get("model"), map.get("weights")) {
        (Some(_), Some(_)) => Err(CliError::Config("give either `model` or `weights`, not both".into())),
        (Some(m), None) => match m.strip_prefix("weights:") {
            Some(path) => Ok(Some(ModelSpec::Weights { path: path.into(), n_heads })),
            None => Ok(Some(ModelSpec::Toy(ModelSpec::parse_toy(m)?))),
        },
        (None, Some(w)) => Ok(Some(ModelSpec::Weights { path: w.into(), n_heads })),
        (None, None) => Ok(None),
    }
}

impl ExperimentConfig {
    pub fn from_map(map: &ConfigMap) -> CliResult<Self> {
        let model = model_from_map(map)?
            .ok_or_else(|| CliError::Config("no model: set `model = toy:...` or `weights = <path>`".into()))?;
        let eps = match map.get("eps") {
            Some(s) => parse_eps_list(s)?,
            None => vec![DEFAULT_EPS],
        };
        let eps0 = match map.parsed::<f64>("eps0")? {
            Some(e) if eps.contains(&e) => e,
            Some(e) => return Err(CliError::Config(format!("eps0 = {e} is not in the strength list {eps:?}"))),
            None => eps.iter().cloned().fold(f64::MIN, f64::max),
        };
        Ok(Self {
            model,
            dtype: map.get("dtype").map_or(Ok(Dtype::F32), Dtype::parse)?,
            sequences: SequenceConfig::from_map(map)?,
            sequences_file: map.get("sequences").map(PathBuf::from),
            eps,
            eps0,
            positions: map.get("positions").map_or(Ok(PositionSet::All), parse_positions)?,
            metrics: map.get("metrics").map_or(Ok(Metric::ALL.to_vec()), parse_metrics)?,
            dj_window: map.get("dj_window").map(parse_window).transpose()?,
            bos: map.parsed("bos")?,
            out: map.get("out").map_or_else(|| PathBuf::from("probe-out"), PathBuf::from),
        })
    }

    /// Canonical `key = value` rendering of the resolved configuration;
    /// feeding it back through [`ConfigMap::parse`] reproduces the run.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match &self.model {
            ModelSpec::Toy(p) => {
                let onehot = matches!(p.tokens, residual_probe::toy::TokenVectors::OneHot);
                let suffix = if onehot { ",onehot" } else { "" };
                m.insert("model".into(), format!("toy:{},{},{}{suffix}", p.vocab, p.beta, p.copy_gain));
            }
            ModelSpec::Weights { path, n_heads } => {
                m.insert("weights".into(), path.display().to_string());
                if let Some(h) = n_heads {
                    m.insert("n_heads".into(), h.to_string());
                }
            }
        }
        m.insert("dtype".into(), self.dtype.name().into());
        let s = &self.sequences;
        m.insert("t0".into(), s.t0.to_string());
        m.insert("batch".into(), s.batch.to_string());
        m.insert("seed".into(), s.seed.to_string());
        if let Some(v) = s.vocab {
            m.insert("vocab".into(), v.to_string());
        }
        if let Some(v) = s.vocab_limit {
            m.insert("vocab_limit".into(), v.to_string());
        }
        if let Some(f) = &self.sequences_file {
            m.insert("sequences".into(), f.display().to_string());
        }
        m.insert(
            "eps".into(),
            self.eps.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
        );
        m.insert("eps0".into(), self.eps0.to_string());
        m.insert("positions".into(), self.positions.describe());
        m.insert(
            "metrics".into(),
            self.metrics.iter().map(|x| x.name()).collect::<Vec<_>>().join(","),
        );
        if let Some((lo, hi)) = self.dj_window {
            m.insert("dj_window".into(), format!("{lo},{hi}"));
        }
        if let Some(b) = self.bos {
            m.insert("bos".into(), b.to_string());
        }
        m.insert("out".into(), self.out.display().to_string());
        m
    }
}
