//! The `gen-seq`, `probe` and `analyze` subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use residual_probe::analysis::{
    layer_increments, onset_report, orthogonality_report, response_function, scaling_report, Metric,
    ResponseFunction, ScalingLaw,
};
use residual_probe::model::Model;
use residual_probe::probe::{probe_sweep, ProbeOptions, ProbeResult};
use residual_probe::sequence::{gen_repeated, SequenceBatch};
use residual_probe::toy::toy_model;
use residual_probe::weights::{infer_gpt2_config, load_archive, load_gpt2, resolve_weights_path};
use residual_probe::Scalar;

use crate::config::{model_from_map, ConfigMap, Dtype, ExperimentConfig, ModelSpec, SequenceConfig};
use crate::error::{CliError, CliResult};
use crate::output::{fmt_f64, fmt_opt, write_csv, write_json};

pub const MANIFEST_SCHEMA: &str = "residual-probe/manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEQUENCES_FILE: &str = "sequences.json";

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// File-name form of a strength, e.g. `0.05`.
pub fn eps_tag(eps: f64) -> String {
    fmt_f64(eps)
}

pub fn result_file_name(eps: f64) -> String {
    format!("probe_eps{}.json", eps_tag(eps))
}

fn model_vocab(spec: &ModelSpec) -> CliResult<usize> {
    match spec {
        ModelSpec::Toy(p) => Ok(p.vocab),
        ModelSpec::Weights { path, n_heads } => {
            let archive = load_archive(resolve_weights_path(path)?)?;
            Ok(infer_gpt2_config(&archive, *n_heads)?.vocab_size)
        }
    }
}

/// Generates a batch; the vocabulary comes from `vocab`, else from the model.
pub fn cmd_gen_seq(map: &ConfigMap, out: Option<&Path>) -> CliResult<SequenceBatch> {
    let seq = SequenceConfig::from_map(map)?;
    let model_v = model_from_map(map)?.map(|m| model_vocab(&m)).transpose()?;
    let batch = gen_repeated(seq.t0, seq.batch, seq.effective_vocab(model_v)?, seq.seed)?;
    if let Some(path) = out {
        std::fs::write(path, batch.to_json()?).map_err(|e| CliError::io(path, e))?;
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub eps: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub tool_version: String,
    pub model_id: String,
    pub dtype: String,
    /// Resolved configuration; writing it back as `key = value` lines and
    /// probing again regenerates the results bit for bit.
    pub config: BTreeMap<String, String>,
    pub sequences: String,
    pub results: Vec<ManifestEntry>,
    pub wall_time_s: f64,
}

fn build_model<S: Scalar>(spec: &ModelSpec, seq_len: usize) -> CliResult<Model<S>> {
    match spec {
        ModelSpec::Toy(p) => {
            let mut p = *p;
            p.max_context = seq_len.max(2);
            Ok(toy_model(&p)?)
        }
        ModelSpec::Weights { path, n_heads } => Ok(load_gpt2(path, *n_heads)?),
    }
}

fn probe_with<S: Scalar>(cfg: &ExperimentConfig, batch: &SequenceBatch) -> CliResult<Vec<ProbeResult>> {
    let options = ProbeOptions { bos: cfg.bos };
    let seq_len = batch.seq_len() + usize::from(cfg.bos.is_some());
    let model: Model<S> = build_model(&cfg.model, seq_len)?;
    let id = cfg.model.id();
    let sweep = probe_sweep(&model, batch, &cfg.eps, &cfg.positions, options)?;
    Ok(sweep
        .into_iter()
        .map(|m| ProbeResult::new(&id, &model, batch, &cfg.positions, options, m))
        .collect())
}

/// Runs the probe for every strength and writes one result container per
/// strength, the sequence batch and a manifest into `cfg.out`.
pub fn cmd_probe(cfg: &ExperimentConfig) -> CliResult<Manifest> {
    let start = Instant::now();
    let batch = match &cfg.sequences_file {
        Some(path) => SequenceBatch::from_json(&read(path)?)?,
        None => {
            let model_v = model_vocab(&cfg.model)?;
            let s = &cfg.sequences;
            gen_repeated(s.t0, s.batch, s.effective_vocab(Some(model_v))?, s.seed)?
        }
    };
    log::info!(
        "probing {} with {} sequences of length {} at {} strengths",
        cfg.model.id(),
        batch.batch_size(),
        batch.seq_len(),
        cfg.eps.len()
    );
    let results = match cfg.dtype {
        Dtype::F32 => probe_with::<f32>(cfg, &batch)?,
        Dtype::F64 => probe_with::<f64>(cfg, &batch)?,
    };

    create_dir(&cfg.out)?;
    let seq_path = cfg.out.join(SEQUENCES_FILE);
    std::fs::write(&seq_path, batch.to_json()?).map_err(|e| CliError::io(&seq_path, e))?;
    let mut entries = Vec::with_capacity(results.len());
    for r in &results {
        let name = result_file_name(r.eps);
        let path = cfg.out.join(&name);
        std::fs::write(&path, r.to_json()?).map_err(|e| CliError::io(&path, e))?;
        entries.push(ManifestEntry { eps: r.eps, file: name });
    }
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        model_id: cfg.model.id(),
        dtype: cfg.dtype.name().into(),
        config: cfg.echo(),
        sequences: SEQUENCES_FILE.into(),
        results: entries,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    ResponseFn,
    Scaling,
    Increments,
    Onset,
    Orthogonality,
}

impl Mode {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "response-fn" => Ok(Mode::ResponseFn),
            "scaling" => Ok(Mode::Scaling),
            "increments" => Ok(Mode::Increments),
            "onset" => Ok(Mode::Onset),
            "orthogonality" => Ok(Mode::Orthogonality),
            other => Err(CliError::Config(format!(
                "unknown mode `{other}` (response-fn, scaling, increments, onset, orthogonality)"
            ))),
        }
    }
}

/// Residual positions covered by a scaling analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSel {
    Final,
    All,
    At(usize),
}

impl LayerSel {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "final" => Ok(LayerSel::Final),
            "all" => Ok(LayerSel::All),
            n => n
                .parse()
                .map(LayerSel::At)
                .map_err(|_| CliError::Config(format!("layer must be `final`, `all` or an index, got `{n}`"))),
        }
    }

    fn resolve(self, n_positions: usize) -> CliResult<Vec<usize>> {
        match self {
            LayerSel::Final => Ok(vec![n_positions - 1]),
            LayerSel::All => Ok((0..n_positions).collect()),
            LayerSel::At(l) if l < n_positions => Ok(vec![l]),
            LayerSel::At(l) => Err(CliError::Config(format!(
                "residual position {l} outside [0, {n_positions})"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOptions {
    pub mode: Mode,
    pub metrics: Option<Vec<Metric>>,
    /// Reference strength; defaults to the largest strength present.
    pub eps0: Option<f64>,
    /// Offset for increments; defaults to `T₀ − 1`.
    pub dj: Option<usize>,
    pub layer: LayerSel,
    pub dj_window: Option<(usize, usize)>,
    pub min_dj: usize,
    pub out: PathBuf,
}

impl AnalyzeOptions {
    pub fn new(mode: Mode, out: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            metrics: None,
            eps0: None,
            dj: None,
            layer: LayerSel::Final,
            dj_window: None,
            min_dj: 1,
            out: out.into(),
        }
    }
}

/// Loads result containers from files or probe output directories (via
/// their manifest), refusing inputs of mixed provenance. Sorted by strength.
pub fn load_results(inputs: &[PathBuf]) -> CliResult<Vec<ProbeResult>> {
    let mut results = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let manifest: Manifest = serde_json::from_str(&read(&input.join(MANIFEST_FILE))?)
                .map_err(|e| CliError::Load(format!("{}: {e}", input.join(MANIFEST_FILE).display())))?;
            if manifest.schema != MANIFEST_SCHEMA || manifest.version != MANIFEST_VERSION {
                return Err(CliError::Load(format!("{}: unsupported manifest", input.display())));
            }
            for entry in &manifest.results {
                results.push(ProbeResult::from_json(&read(&input.join(&entry.file))?)?);
            }
        } else {
            results.push(ProbeResult::from_json(&read(input)?).map_err(|e| {
                CliError::Load(format!("{}: {e}", input.display()))
            })?);
        }
    }
    let first = results
        .first()
        .ok_or_else(|| CliError::Config("no probe results given".into()))?;
    let key = first.provenance();
    for r in &results[1..] {
        if r.provenance() != key || r.layer_count != first.layer_count || r.positions != first.positions {
            return Err(CliError::Config(format!(
                "refusing to mix results of different provenance: {:?} vs {:?}",
                key,
                r.provenance()
            )));
        }
    }
    results.sort_by(|a, b| a.eps.total_cmp(&b.eps));
    if results.windows(2).any(|w| w[0].eps == w[1].eps) {
        return Err(CliError::Config("two results share the same strength".into()));
    }
    Ok(results)
}

fn functions(results: &[ProbeResult], metric: Metric) -> CliResult<Vec<ResponseFunction>> {
    results
        .iter()
        .map(|r| response_function(&r.matrices, metric).map_err(CliError::from))
        .collect()
}

fn pick_eps0(results: &[ProbeResult], eps0: Option<f64>) -> CliResult<usize> {
    match eps0 {
        None => Ok(results.len() - 1),
        Some(e) => results.iter().position(|r| r.eps == e).ok_or_else(|| {
            CliError::Config(format!(
                "eps0 = {e} not among the strengths {:?}",
                results.iter().map(|r| r.eps).collect::<Vec<_>>()
            ))
        }),
    }
}

fn law(metric: Metric) -> CliResult<ScalingLaw> {
    match metric {
        Metric::Delta => Ok(ScalingLaw::Linear),
        Metric::Phi => Ok(ScalingLaw::Quadratic),
        Metric::Theta => Err(CliError::Config("theta has no scaling law".into())),
    }
}

/// Dispatches to the requested analysis and returns the files written.
pub fn cmd_analyze(inputs: &[PathBuf], opts: &AnalyzeOptions) -> CliResult<Vec<PathBuf>> {
    let results = load_results(inputs)?;
    create_dir(&opts.out)?;
    let mut written = Vec::new();
    let mut emit_csv = |name: &str, schema: &str, header: &[&str], rows: &[Vec<String>]| -> CliResult<()> {
        let path = opts.out.join(name);
        write_csv(&path, schema, header, rows)?;
        written.push(path);
        Ok(())
    };
    let mut json_files = Vec::new();
    let ref_idx = pick_eps0(&results, opts.eps0)?;
    let reference = &results[ref_idx];

    match opts.mode {
        Mode::ResponseFn => {
            let metrics = opts.metrics.clone().unwrap_or_else(|| Metric::ALL.to_vec());
            let mut all = Vec::new();
            for r in &results {
                let mut rows = Vec::new();
                for &metric in &metrics {
                    let f = response_function(&r.matrices, metric)?;
                    for (l, vals) in f.values.iter().enumerate() {
                        for (dj, v) in vals.iter().enumerate() {
                            rows.push(vec![
                                metric.name().into(),
                                l.to_string(),
                                dj.to_string(),
                                fmt_opt(*v),
                                f.counts[l][dj].to_string(),
                            ]);
                        }
                    }
                    all.push(f);
                }
                emit_csv(
                    &format!("response_fn_eps{}.csv", eps_tag(r.eps)),
                    "response_fn",
                    &["metric", "layer_pos", "dj", "value", "count"],
                    &rows,
                )?;
            }
            json_files.push(("response_fn.json", serde_json::to_value(&all).expect("serializable")));
        }
        Mode::Scaling => {
            let metrics = opts.metrics.clone().unwrap_or_else(|| vec![Metric::Delta, Metric::Phi]);
            let layers = opts.layer.resolve(reference.layer_count)?;
            let mut reports = Vec::new();
            for &l in &layers {
                let mut rows = Vec::new();
                for &metric in &metrics {
                    let funcs = functions(&results, metric)?;
                    let report = scaling_report(&funcs, l, reference.eps, law(metric)?)?;
                    for p in &report.points {
                        for (dj, ratio) in &p.ratios {
                            rows.push(vec![
                                metric.name().into(),
                                fmt_f64(p.eps),
                                dj.to_string(),
                                fmt_f64(*ratio),
                                fmt_opt(p.chi),
                                fmt_opt(p.delta),
                            ]);
                        }
                    }
                    reports.push(report);
                }
                emit_csv(
                    &format!("scaling_l{l}.csv"),
                    "scaling",
                    &["metric", "eps", "dj", "ratio", "chi", "delta"],
                    &rows,
                )?;
            }
            json_files.push(("scaling.json", serde_json::to_value(&reports).expect("serializable")));
        }
        Mode::Increments => {
            let metrics = opts.metrics.clone().unwrap_or_else(|| vec![Metric::Delta, Metric::Phi]);
            let dj = opts.dj.unwrap_or(reference.t0 - 1);
            let mut rows = Vec::new();
            let mut reports = Vec::new();
            for &metric in &metrics {
                let f = response_function(&reference.matrices, metric)?;
                let report = layer_increments(&f, dj, reference.n_layers)?;
                for (k, inc) in report.increments.iter().enumerate() {
                    rows.push(vec![
                        metric.name().into(),
                        (k + 1).to_string(),
                        report.kinds[k].label().into(),
                        fmt_f64(*inc),
                        fmt_opt(report.normalized.as_ref().map(|n| n[k])),
                    ]);
                }
                reports.push(report);
            }
            emit_csv(
                "increments.csv",
                "increments",
                &["metric", "layer_pos", "kind", "dC", "dC_norm"],
                &rows,
            )?;
            json_files.push(("increments.json", serde_json::to_value(&reports).expect("serializable")));
        }
        Mode::Onset => {
            let metric = opts.metrics.as_ref().and_then(|m| m.first().copied()).unwrap_or(Metric::Delta);
            let f = response_function(&reference.matrices, metric)?;
            let theta = response_function(&reference.matrices, Metric::Theta)?;
            let report = onset_report(&f, reference.t0, opts.dj_window, Some(&theta))?;
            let rows: Vec<Vec<String>> = report
                .argmax
                .iter()
                .enumerate()
                .map(|(l, a)| {
                    vec![
                        l.to_string(),
                        fmt_opt(*a),
                        fmt_opt(report.crossover_lo),
                        fmt_opt(report.crossover_hi),
                    ]
                })
                .collect();
            emit_csv(
                "onset.csv",
                "onset",
                &["layer_pos", "argmax_dj", "crossover_lo", "crossover_hi"],
                &rows,
            )?;
            json_files.push(("onset.json", serde_json::to_value(&report).expect("serializable")));
        }
        Mode::Orthogonality => {
            let thetas = functions(&results, Metric::Theta)?;
            let deltas = functions(&results, Metric::Delta)?;
            let report = orthogonality_report(&thetas, Some(&deltas), reference.eps, opts.min_dj)?;
            let rows: Vec<Vec<String>> = report
                .layers
                .iter()
                .map(|l| vec![l.layer_pos.to_string(), fmt_opt(l.max_abs_theta)])
                .collect();
            emit_csv("theta_report.csv", "theta_report", &["layer_pos", "max_abs_theta"], &rows)?;
            json_files.push(("theta_report.json", serde_json::to_value(&report).expect("serializable")));
        }
    }
    for (name, value) in json_files {
        let path = opts.out.join(name);
        write_json(&path, &value)?;
        written.push(path);
    }
    Ok(written)
}
