//! Single-position scaling perturbations of the input residual state and the
//! three response metrics they induce at every residual position.
//!
//! For a perturbed position `i`, strength `ε` and residual position `ℓ`:
//!
//! * `c_delta[i][j] = ‖x'_j − x_j‖₂`
//! * `c_phi[i][j]   = 1 − cos(x'_j, x_j)`
//! * `c_theta[i][j] = cos(x'_j − x_j, x_j)`
//!
//! where `x'` is the trace after scaling input row `i` by `1 − ε`. Rows
//! `j < i` are untouched by causal masking; they are zero and flagged in the
//! undefined mask because the cosine of a zero difference does not exist.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::model::{ForwardRun, Model, ResidualTrace};
use crate::scalar::Scalar;
use crate::sequence::SequenceBatch;
use crate::tensor::{Tensor, COSINE_EPS};

pub const RESULT_SCHEMA: &str = "residual-probe/probe-result";
pub const RESULT_VERSION: u32 = 1;
pub const AVERAGING: &str = "matrix-level batch mean; theta averaged over defined entries";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub position: usize,
    pub strength: f64,
}

impl PerturbationSpec {
    pub fn new(position: usize, strength: f64) -> Self {
        Self { position, strength }
    }
}

/// Scales row `spec.position` of `x0` by `1 − ε`; every other row is copied
/// unchanged.
pub fn perturb_input<S: Scalar>(x0: &Tensor<S>, spec: PerturbationSpec) -> Result<Tensor<S>> {
    if !x0.is_matrix() || spec.position >= x0.rows() {
        return Err(ProbeError::Input(format!(
            "perturbation position {} outside sequence of {} rows",
            spec.position,
            x0.rows()
        )));
    }
    if !(0.0..=1.0).contains(&spec.strength) {
        return Err(ProbeError::Input(format!(
            "perturbation strength {} outside [0, 1]",
            spec.strength
        )));
    }
    let mut out = x0.clone();
    let factor = S::from_f64_lossy(1.0 - spec.strength);
    out.row_mut(spec.position).iter_mut().for_each(|v| *v *= factor);
    Ok(out)
}

/// `x'^(ℓ) − x^(ℓ)` for one perturbed position, per residual position.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaField {
    pub position: usize,
    pub states: Vec<Tensor<f64>>,
}

pub fn delta_field<S: Scalar>(
    base: &ResidualTrace<S>,
    perturbed: &ResidualTrace<S>,
    position: usize,
) -> Result<DeltaField> {
    if base.len() != perturbed.len() {
        return Err(ProbeError::Shape("traces differ in depth".into()));
    }
    let states = base
        .states
        .iter()
        .zip(&perturbed.states)
        .map(|(x, xp)| {
            let data = xp
                .data()
                .iter()
                .zip(x.data())
                .map(|(a, b)| a.as_f64() - b.as_f64())
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })
        .collect::<Result<_>>()?;
    Ok(DeltaField { position, states })
}

/// Metric values for one perturbed position, per residual position ℓ.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseRow {
    pub position: usize,
    pub c_delta: Vec<Vec<f64>>,
    pub c_phi: Vec<Vec<f64>>,
    pub c_theta: Vec<Vec<f64>>,
    pub undefined: Vec<Vec<bool>>,
}

/// The three metrics for one pair of residual vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointResponse {
    pub delta: f64,
    pub phi: f64,
    /// `None` when the difference (or the state) is too small for a cosine.
    pub theta: Option<f64>,
}

/// Metrics comparing a perturbed residual vector against the unperturbed one.
pub fn point_response<S: Scalar>(perturbed: &[S], base: &[S]) -> PointResponse {
    let mut dd = 0.0;
    let mut dx = 0.0;
    let mut xx = 0.0;
    let mut pp = 0.0;
    let mut identical = true;
    for (p, x) in perturbed.iter().zip(base) {
        let (p, x) = (p.as_f64(), x.as_f64());
        let d = p - x;
        identical &= d == 0.0;
        dd += d * d;
        dx += d * x;
        xx += x * x;
        pp += p * p;
    }
    if identical {
        return PointResponse {
            delta: 0.0,
            phi: 0.0,
            theta: None,
        };
    }
    let (nd, nx, np) = (dd.sqrt(), xx.sqrt(), pp.sqrt());
    // 1 − cos as half the squared chord between unit vectors avoids the
    // cancellation of 1 − dot/(|a||b|) at small angles
    let phi = if nx * np < COSINE_EPS {
        0.0
    } else {
        let chord: f64 = perturbed
            .iter()
            .zip(base)
            .map(|(p, x)| {
                let c = p.as_f64() / np - x.as_f64() / nx;
                c * c
            })
            .sum();
        (0.5 * chord).clamp(0.0, 2.0)
    };
    let theta = if nd * nx < COSINE_EPS {
        None
    } else {
        Some((dx / (nd * nx)).clamp(-1.0, 1.0))
    };
    PointResponse { delta: nd, phi, theta }
}

/// Options shared by every probe run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// Token placed before every sequence; it is never perturbed and is
    /// excluded from the response matrices.
    pub bos: Option<u32>,
}

impl ProbeOptions {
    fn prefix_len(&self) -> usize {
        usize::from(self.bos.is_some())
    }

    fn model_tokens(&self, seq: &[u32]) -> Vec<u32> {
        self.bos.iter().copied().chain(seq.iter().copied()).collect()
    }
}

/// Which input positions get perturbed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PositionSet {
    All,
    Stride(usize),
    Explicit(Vec<usize>),
}

impl PositionSet {
    pub fn resolve(&self, seq_len: usize) -> Result<Vec<usize>> {
        let positions: Vec<usize> = match self {
            PositionSet::All => (0..seq_len).collect(),
            PositionSet::Stride(0) => {
                return Err(ProbeError::Input("position stride must be positive".into()))
            }
            PositionSet::Stride(n) => (0..seq_len).step_by(*n).collect(),
            PositionSet::Explicit(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                if let Some(bad) = v.iter().find(|&&p| p >= seq_len) {
                    return Err(ProbeError::Input(format!(
                        "position {bad} outside sequence of length {seq_len}"
                    )));
                }
                v
            }
        };
        if positions.is_empty() {
            return Err(ProbeError::Input("empty position set".into()));
        }
        Ok(positions)
    }

    pub fn describe(&self) -> String {
        match self {
            PositionSet::All => "all".into(),
            PositionSet::Stride(n) => format!("stride:{n}"),
            PositionSet::Explicit(v) => format!(
                "list:{}",
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            ),
        }
    }
}

/// Response matrices of one residual position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMatrices {
    pub c_delta: Vec<Vec<f64>>,
    pub c_phi: Vec<Vec<f64>>,
    pub c_theta: Vec<Vec<f64>>,
    pub undefined: Vec<Vec<bool>>,
}

impl LayerMatrices {
    fn zeros(t: usize) -> Self {
        Self {
            c_delta: vec![vec![0.0; t]; t],
            c_phi: vec![vec![0.0; t]; t],
            c_theta: vec![vec![0.0; t]; t],
            undefined: vec![vec![true; t]; t],
        }
    }
}

/// Batch-averaged response matrices for every residual position, rows
/// indexed by perturbed position and columns by observed position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrices {
    pub seq_len: usize,
    pub eps: f64,
    pub batch_size: usize,
    /// `true` for rows whose position was perturbed.
    pub rows_present: Vec<bool>,
    pub layers: Vec<LayerMatrices>,
}

impl ResponseMatrices {
    pub fn n_positions(&self) -> usize {
        self.layers.len()
    }

    /// Mean over rows in batch order; θ entries are averaged only where they
    /// are defined and stay masked where no element defines them.
    fn average(rows: &[Vec<ResponseRow>], seq_len: usize, n_pos: usize, eps: f64) -> Self {
        let batch = rows.len();
        let mut layers: Vec<LayerMatrices> = (0..n_pos).map(|_| LayerMatrices::zeros(seq_len)).collect();
        let mut rows_present = vec![false; seq_len];
        if let Some(first) = rows.first() {
            for r in first {
                rows_present[r.position] = true;
            }
        }
        let inv_b = 1.0 / batch as f64;
        for (idx, &present) in rows_present.iter().enumerate() {
            if !present {
                continue;
            }
            let k = rows[0].iter().position(|r| r.position == idx).expect("present row");
            for (l, layer) in layers.iter_mut().enumerate() {
                for j in 0..seq_len {
                    let mut sd = 0.0;
                    let mut sp = 0.0;
                    let mut st = 0.0;
                    let mut nt = 0usize;
                    for per_seq in rows {
                        let r = &per_seq[k];
                        sd += r.c_delta[l][j];
                        sp += r.c_phi[l][j];
                        if !r.undefined[l][j] {
                            st += r.c_theta[l][j];
                            nt += 1;
                        }
                    }
                    layer.c_delta[idx][j] = sd * inv_b;
                    layer.c_phi[idx][j] = sp * inv_b;
                    if nt > 0 {
                        layer.c_theta[idx][j] = st / nt as f64;
                        layer.undefined[idx][j] = false;
                    }
                }
            }
        }
        Self {
            seq_len,
            eps,
            batch_size: batch,
            rows_present,
            layers,
        }
    }
}

/// Unperturbed forward of one sequence, reused by every perturbed run.
pub struct BaseRun<S> {
    run: ForwardRun<S>,
    prefix: usize,
}

impl<S: Scalar> BaseRun<S> {
    pub fn new(model: &Model<S>, seq: &[u32], options: ProbeOptions) -> Result<Self> {
        let x0 = model.embed(&options.model_tokens(seq))?;
        Ok(Self {
            run: model.forward_run(&x0)?,
            prefix: options.prefix_len(),
        })
    }

    pub fn trace(&self) -> &ResidualTrace<S> {
        &self.run.trace
    }

    pub fn seq_len(&self) -> usize {
        self.run.trace.seq_len() - self.prefix
    }

    /// Perturbs sequence position `spec.position` and measures the response
    /// at every residual position.
    pub fn response_row(&self, model: &Model<S>, spec: PerturbationSpec) -> Result<ResponseRow> {
        let t = self.seq_len();
        if spec.position >= t {
            return Err(ProbeError::Input(format!(
                "perturbation position {} outside sequence of length {t}",
                spec.position
            )));
        }
        let abs = spec.position + self.prefix;
        let x0 = &self.run.trace.states[0];
        let xp = perturb_input(x0, PerturbationSpec::new(abs, spec.strength))?;
        let perturbed = model.forward_suffix(&self.run, &xp, abs)?;
        let n_pos = perturbed.len();
        let mut row = ResponseRow {
            position: spec.position,
            c_delta: vec![vec![0.0; t]; n_pos],
            c_phi: vec![vec![0.0; t]; n_pos],
            c_theta: vec![vec![0.0; t]; n_pos],
            undefined: vec![vec![true; t]; n_pos],
        };
        for l in 0..n_pos {
            let (base, pert) = (&self.run.trace.states[l], &perturbed.states[l]);
            for j in spec.position..t {
                let r = point_response(pert.row(j + self.prefix), base.row(j + self.prefix));
                row.c_delta[l][j] = r.delta;
                row.c_phi[l][j] = r.phi;
                if let Some(th) = r.theta {
                    row.c_theta[l][j] = th;
                    row.undefined[l][j] = false;
                }
            }
        }
        Ok(row)
    }
}

/// Response of one sequence to a single perturbation.
pub fn response_row<S: Scalar>(
    model: &Model<S>,
    tokens: &[u32],
    spec: PerturbationSpec,
    options: ProbeOptions,
) -> Result<ResponseRow> {
    BaseRun::new(model, tokens, options)?.response_row(model, spec)
}

/// Batch-averaged response matrices at one strength.
pub fn response_matrices<S: Scalar>(
    model: &Model<S>,
    batch: &SequenceBatch,
    eps: f64,
    positions: &PositionSet,
    options: ProbeOptions,
) -> Result<ResponseMatrices> {
    let mut out = probe_sweep(model, batch, &[eps], positions, options)?;
    Ok(out.remove(0))
}

/// Response matrices for every strength in `eps_list`. Each sequence's
/// unperturbed forward is computed once and shared across all strengths.
pub fn probe_sweep<S: Scalar>(
    model: &Model<S>,
    batch: &SequenceBatch,
    eps_list: &[f64],
    positions: &PositionSet,
    options: ProbeOptions,
) -> Result<Vec<ResponseMatrices>> {
    batch.validate()?;
    if eps_list.is_empty() {
        return Err(ProbeError::Input("empty strength list".into()));
    }
    let t = batch.seq_len();
    let positions = positions.resolve(t)?;
    let bases: Vec<BaseRun<S>> = batch
        .tokens
        .par_iter()
        .map(|seq| BaseRun::new(model, seq, options))
        .collect::<Result<_>>()?;
    let n_pos = model.config().n_positions();

    eps_list
        .iter()
        .map(|&eps| {
            let rows: Vec<Vec<ResponseRow>> = bases
                .iter()
                .map(|base| {
                    positions
                        .par_iter()
                        .map(|&i| base.response_row(model, PerturbationSpec::new(i, eps)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            Ok(ResponseMatrices::average(&rows, t, n_pos, eps))
        })
        .collect()
}

/// Serialized probe output for one strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub schema: String,
    pub version: u32,
    pub model_id: String,
    pub dtype: String,
    pub seed: u64,
    pub t0: usize,
    pub vocab: usize,
    pub eps: f64,
    pub layer_count: usize,
    pub n_layers: usize,
    pub batch: usize,
    pub positions: String,
    pub bos: Option<u32>,
    pub averaging: String,
    pub matrices: ResponseMatrices,
}

impl ProbeResult {
    pub fn new<S: Scalar>(
        model_id: &str,
        model: &Model<S>,
        batch: &SequenceBatch,
        positions: &PositionSet,
        options: ProbeOptions,
        matrices: ResponseMatrices,
    ) -> Self {
        Self {
            schema: RESULT_SCHEMA.into(),
            version: RESULT_VERSION,
            model_id: model_id.into(),
            dtype: S::DTYPE.into(),
            seed: batch.seed,
            t0: batch.t0,
            vocab: batch.vocab,
            eps: matrices.eps,
            layer_count: matrices.n_positions(),
            n_layers: model.config().n_layers,
            batch: batch.batch_size(),
            positions: positions.describe(),
            bos: options.bos,
            averaging: AVERAGING.into(),
            matrices,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema != RESULT_SCHEMA || r.version != RESULT_VERSION {
            return Err(ProbeError::Input(format!(
                "unsupported result container {} v{}",
                r.schema, r.version
            )));
        }
        Ok(r)
    }

    /// Provenance key: results sharing it may be analyzed together.
    pub fn provenance(&self) -> (String, String, u64, usize, usize, usize, Option<u32>) {
        (
            self.model_id.clone(),
            self.dtype.clone(),
            self.seed,
            self.t0,
            self.batch,
            self.vocab,
            self.bos,
        )
    }
}
