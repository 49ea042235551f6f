// SPDX-License-Identifier: MIT OR Apache-2.0

//! Controlled toy experiment.
//!
//! A two-layer ReLU MLP `h = ReLU(W1 x + b1)`, `y = W2 h + b2` generates
//! hidden activations. Inputs are drawn as `x = A_s g` with `g ~ N(0, I)`,
//! where `A_s` is the square root of a severity-dependent covariance that
//! rotates and rescales the input geometry as `s` goes from 0 (identity)
//! to 1. An explainer trained on `s = 0` activations is then compared with
//! its adapted version across severities.

use std::time::Instant;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    check_corollary, check_excess_bounds, check_gap_bound, check_theorem_improvement, decompose_loss,
    BoundReport,
};
use crate::error::{GaeError, Result};
use crate::explainer::{sparsify, ActivationBatch, Dictionary, ExplainerKind, Sparsifier};
use crate::gae::{adapt, GaeConfig};
use crate::metrics::LogitHead;
use crate::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded};
use crate::spectral::{
    explainer_subspace, projector_distance, second_moment_shift, subspace_overlap, SecondMoment, Subspace,
};
use crate::stats::{linear_fit, pearson, spearman, LinearFit};

/// Gain of the planted low-rank component of `W1`; see [`ToyModelSpec`].
pub const DEFAULT_PLANTED_GAIN: f64 = 10.0;

const STREAM_MODEL: u64 = 1;
const STREAM_FAMILY: u64 = 2;
const STREAM_TRAIN_DATA: u64 = 3;
const STREAM_TRAIN: u64 = 4;
const STREAM_SWEEP_ID: u64 = 5;
const STREAM_SWEEP: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyModelSpec {
    pub d_in: usize,
    pub d: usize,
    pub p: usize,
    /// `W1` gets `gain * U_h V_in^T` added on `p - 1` directions, where
    /// `U_h` spans the output head's row space in hidden space and `V_in`
    /// is a random orthonormal input frame. Zero gives the plain
    /// `1/sqrt(fan_in)` Gaussian initialization, whose hidden second moment
    /// has almost no eigengap at rank `p`.
    pub planted_gain: f64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self {
            d_in: 128,
            d: 256,
            p: 8,
            planted_gain: DEFAULT_PLANTED_GAIN,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub d_in: usize,
    pub d: usize,
    pub p: usize,
    /// `d x d_in`.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// `p x d`.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub planted_gain: f64,
    pub seed: u64,
}

impl ToyModel {
    pub fn build(spec: &ToyModelSpec, seed: u64) -> Result<Self> {
        let ToyModelSpec { d_in, d, p, planted_gain } = *spec;
        if d_in == 0 || d == 0 || p == 0 {
            return Err(GaeError::InvalidParameter("toy dimensions must be positive".into()));
        }
        if p > d || p > d_in {
            return Err(GaeError::InvalidParameter(format!("p = {p} must not exceed d = {d} or d_in = {d_in}")));
        }
        if !planted_gain.is_finite() {
            return Err(GaeError::NonFinite("planted gain"));
        }
        let mut rng = seeded(seed);
        let w2 = gaussian_matrix(&mut rng, p, d, 1.0 / (d as f64).sqrt());
        let b2 = DVector::from_column_slice(gaussian_matrix(&mut rng, p, 1, 1.0 / (d as f64).sqrt()).as_slice());
        let mut w1 = gaussian_matrix(&mut rng, d, d_in, 1.0 / (d_in as f64).sqrt());
        let b1 = DVector::from_column_slice(gaussian_matrix(&mut rng, d, 1, 1.0 / (d_in as f64).sqrt()).as_slice());
        let planted = p - 1;
        if planted > 0 && planted_gain != 0.0 {
            let u_h = Subspace::span_of(&w2.transpose())?;
            let v_in = random_orthonormal(&mut rng, d_in, planted);
            w1 += u_h.basis().columns(0, planted) * v_in.transpose() * planted_gain;
        }
        Ok(Self {
            d_in,
            d,
            p,
            w1,
            b1,
            w2,
            b2,
            planted_gain,
            seed,
        })
    }

    /// `ReLU(X W1^T + b1)` for inputs stored one per row.
    pub fn hidden(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = inputs * self.w1.transpose();
        for (j, mut col) in h.column_iter_mut().enumerate() {
            let b = self.b1[j];
            col.apply(|v| *v = (*v + b).max(0.0));
        }
        h
    }

    /// The output layer as a logit head over hidden activations.
    pub fn head(&self) -> LogitHead {
        LogitHead::new(self.w2.clone(), self.b2.clone()).expect("model tensors are finite")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeverityParams {
    /// Slopes are evenly spaced over `[-slope_range, slope_range]`, endpoints included.
    pub slope_range: f64,
    pub rho: f64,
    pub r_v: usize,
}

impl Default for SeverityParams {
    fn default() -> Self {
        Self {
            slope_range: 6.0,
            rho: 10.0,
            r_v: 32,
        }
    }
}

/// Severity-indexed family of input covariances tied to one model.
#[derive(Debug, Clone)]
pub struct SeverityFamily {
    pub d_in: usize,
    pub params: SeverityParams,
    /// Random orthogonal `d_in x d_in` frame.
    pub q: DMatrix<f64>,
    pub slopes: Vec<f64>,
    /// `d_in x r_v` orthonormal.
    pub v: DMatrix<f64>,
    /// Input directions that reach the output: the span of `W1^T W2^T`.
    pub output_subspace: Subspace,
    pub seed: u64,
}

impl SeverityFamily {
    pub fn new(model: &ToyModel, params: &SeverityParams, seed: u64) -> Result<Self> {
        let d_in = model.d_in;
        if params.r_v > d_in {
            return Err(GaeError::RankOutOfRange { rank: params.r_v, max: d_in });
        }
        let mut rng = seeded(seed);
        let q = random_orthonormal(&mut rng, d_in, d_in);
        let v = random_orthonormal(&mut rng, d_in, params.r_v);
        let slopes = if d_in == 1 {
            vec![0.0]
        } else {
            (0..d_in)
                .map(|i| -params.slope_range + 2.0 * params.slope_range * i as f64 / (d_in - 1) as f64)
                .collect()
        };
        let output_subspace = Subspace::span_of(&(model.w1.transpose() * model.w2.transpose()))?;
        Ok(Self {
            d_in,
            params: params.clone(),
            q,
            slopes,
            v,
            output_subspace,
            seed,
        })
    }

    /// `Sigma(s)` (trace `d_in`) and its symmetric square root `A_s`.
    ///
    /// Negative eigenvalues of the symmetrized construction are dropped
    /// before the trace is normalized, so `Sigma(s)` is PSD and `A_s^2 = Sigma(s)`.
    pub fn covariance(&self, s: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(0.0..=1.0).contains(&s) {
            return Err(GaeError::InvalidParameter(format!("severity {s} must lie in [0, 1]")));
        }
        let n = self.d_in;
        let eye = DMatrix::<f64>::identity(n, n);
        let scaled_q = DMatrix::from_fn(n, n, |i, j| self.q[(i, j)] * (s * self.slopes[j]).exp());
        let rotated = &scaled_q * self.q.transpose();
        let lift = &eye + &self.v * self.v.transpose() * (s * self.params.rho * (1.0 + s / 2.0));
        let base = rotated * lift;
        let base = (&base + base.transpose()) * 0.5;

        let p = self.output_subspace.projector();
        let rescale = &p * (1.0 - 0.6 * s).sqrt() + (&eye - &p) * (1.0 + 2.0 * s * s).sqrt();
        let sigma = &rescale * base * &rescale;
        let sigma = (&sigma + sigma.transpose()) * 0.5;

        // The symmetrized product can be indefinite; keep its PSD part.
        let eig = sigma.symmetric_eigen();
        let clipped = eig.eigenvalues.map(|l| l.max(0.0));
        let scale = n as f64 / clipped.sum();
        let vecs = &eig.eigenvectors;
        let sigma = vecs * DMatrix::from_diagonal(&(&clipped * scale)) * vecs.transpose();
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let a = vecs * DMatrix::from_diagonal(&clipped.map(|l| (l * scale).sqrt())) * vecs.transpose();
        let a = (&a + a.transpose()) * 0.5;
        Ok((sigma, a))
    }
}

/// Inputs `x = A_s g` and hidden activations at severity `s`.
pub fn sample_inputs(
    family: &SeverityFamily,
    model: &ToyModel,
    s: f64,
    n: usize,
    seed: u64,
) -> Result<(ActivationBatch, ActivationBatch)> {
    if n == 0 {
        return Err(GaeError::EmptyBatch);
    }
    let (_, a) = family.covariance(s)?;
    let mut rng = seeded(seed);
    let g = gaussian_matrix(&mut rng, n, family.d_in, 1.0);
    let x = g * a;
    let h = model.hidden(&x);
    Ok((ActivationBatch::new(x)?, ActivationBatch::new(h)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub k: usize,
    pub sparsifier: Sparsifier,
    pub epochs: usize,
    pub lr: f64,
    /// Weight of the mean code l1 norm; ignored for Top-K.
    pub l1_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 1024,
            sparsifier: Sparsifier::TopK { k_active: 32 },
            epochs: 20,
            lr: 0.002,
            l1_weight: 0.0,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingLog {
    /// Mean squared reconstruction error over the data before the first step.
    pub initial_loss: f64,
    /// Mean squared reconstruction error per epoch, accumulated during the epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean squared reconstruction error over the data after training.
    pub final_loss: f64,
    pub seconds: f64,
}

/// Minibatch SGD on mean squared reconstruction error (plus the l1 penalty
/// for ReLU codes), with decoder columns renormalized after every step.
///
/// Decoder columns start at normalized random target rows, encoder rows at
/// 0.1 times the matching normalized input rows, and the decoder bias at the
/// target mean.
pub fn train_explainer(batch: &ActivationBatch, cfg: &TrainConfig) -> Result<(Dictionary, TrainingLog)> {
    let start = Instant::now();
    let n = batch.n();
    if n == 0 {
        return Err(GaeError::EmptyBatch);
    }
    if cfg.k == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(cfg.l1_weight >= 0.0) {
        return Err(GaeError::InvalidParameter("k, batch_size and lr must be positive".into()));
    }
    let x = batch.data();
    let y = batch.target();
    let (d_in, d, k) = (x.ncols(), y.ncols(), cfg.k);
    let kind = if batch.has_target() {
        ExplainerKind::Transcoder
    } else {
        ExplainerKind::Sae
    };
    let mut rng = seeded(cfg.seed);

    let picks: Vec<usize> = if k <= n {
        sample(&mut rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    let mut dec = DMatrix::zeros(d, k);
    let mut enc_t = DMatrix::zeros(d_in, k);
    for (j, &row) in picks.iter().enumerate() {
        let yr = y.row(row).transpose();
        let xr = x.row(row).transpose();
        let (yn, xn) = (yr.norm(), xr.norm());
        if yn > 0.0 {
            dec.set_column(j, &(yr / yn));
        }
        if xn > 0.0 {
            enc_t.set_column(j, &(xr * (0.1 / xn)));
        }
    }
    let mut b_enc = DVector::zeros(k);
    let mut b_dec = DVector::from_iterator(d, y.column_iter().map(|c| c.mean()));
    normalize_columns(&mut dec);

    let assemble = |enc_t: &DMatrix<f64>, b_enc: &DVector<f64>, dec: &DMatrix<f64>, b_dec: &DVector<f64>| {
        Dictionary::new(enc_t.transpose(), b_enc.clone(), dec.clone(), b_dec.clone(), cfg.sparsifier, kind)
    };
    let initial_loss = mean_error(&assemble(&enc_t, &b_enc, &dec, &b_dec)?, batch)?;

    let mut order: Vec<usize> = (0..n).collect();
    let mut g_dec = DMatrix::zeros(d, k);
    let mut g_enc_t = DMatrix::zeros(d_in, k);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut pre_row = vec![0.0; k];
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let m = rows.len() as f64;
            let xb = x.select_rows(rows.iter());
            let yb = y.select_rows(rows.iter());
            let pre = blocked_product(&xb, &enc_t);
            g_dec.fill(0.0);
            g_enc_t.fill(0.0);
            let mut g_bdec = DVector::zeros(d);
            let mut g_benc = DVector::zeros(k);
            let mut batch_loss = 0.0;
            for i in 0..rows.len() {
                for (j, slot) in pre_row.iter_mut().enumerate() {
                    *slot = pre[(i, j)] + b_enc[j];
                }
                let active = sparsify(&mut pre_row, cfg.sparsifier);
                let mut err = b_dec.clone();
                for &(j, zj) in &active {
                    err.axpy(zj, &dec.column(j), 1.0);
                }
                err -= yb.row(i).transpose();
                batch_loss += err.norm_squared();
                let ge = err * (2.0 / m);
                g_bdec += &ge;
                let xi = xb.row(i).transpose();
                for &(j, zj) in &active {
                    g_dec.column_mut(j).axpy(zj, &ge, 1.0);
                    let mut gz = ge.dot(&dec.column(j));
                    if cfg.sparsifier == Sparsifier::Relu {
                        gz += cfg.l1_weight / m;
                    }
                    g_enc_t.column_mut(j).axpy(gz, &xi, 1.0);
                    g_benc[j] += gz;
                }
            }
            if !batch_loss.is_finite() || batch_loss / m > 1e6 * initial_loss.max(1.0) {
                return Err(GaeError::Diverged {
                    epoch,
                    step,
                    loss: batch_loss / m,
                });
            }
            epoch_sum += batch_loss;
            dec -= &g_dec * cfg.lr;
            enc_t -= &g_enc_t * cfg.lr;
            b_dec.axpy(-cfg.lr, &g_bdec, 1.0);
            b_enc.axpy(-cfg.lr, &g_benc, 1.0);
            normalize_columns(&mut dec);
        }
        epoch_losses.push(epoch_sum / n as f64);
        info!("epoch {epoch}: mse {:.6}", epoch_sum / n as f64);
    }
    let dict = assemble(&enc_t, &b_enc, &dec, &b_dec)?;
    let final_loss = mean_error(&dict, batch)?;
    Ok((
        dict,
        TrainingLog {
            initial_loss,
            epoch_losses,
            final_loss,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

fn mean_error(dict: &Dictionary, batch: &ActivationBatch) -> Result<f64> {
    crate::explainer::batch_reconstruction_error(dict, batch)
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
}

/// `a * b` computed over fixed column blocks of `b` in parallel.
fn blocked_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    const BLOCK: usize = 256;
    let cols = b.ncols();
    let blocks: Vec<DMatrix<f64>> = (0..cols.div_ceil(BLOCK))
        .into_par_iter()
        .map(|c| {
            let start = c * BLOCK;
            a * b.columns(start, BLOCK.min(cols - start))
        })
        .collect();
    let mut out = DMatrix::zeros(a.nrows(), cols);
    for (c, blk) in blocks.iter().enumerate() {
        out.columns_mut(c * BLOCK, blk.ncols()).copy_from(blk);
    }
    out
}

/// `count` evenly spaced severities over `[0, 1]`.
pub fn severity_grid(count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub severities: Vec<f64>,
    /// Samples per severity.
    pub n: usize,
    /// Subspace rank; `None` uses the model's output width `p`.
    pub rank: Option<usize>,
    /// Adaptation recipe; its rank is replaced by the sweep rank.
    pub gae: GaeConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            severities: severity_grid(11),
            n: 20_000,
            rank: None,
            gae: GaeConfig {
                n_fit: 20_000,
                ..GaeConfig::default()
            },
            seed: 2026,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub severity: f64,
    /// `||P_dec - P_ood||_F` of the unadapted explainer.
    pub fixed_gap: f64,
    /// Gap of the rotated (Step-1) decoder.
    pub gae_gap: f64,
    /// Gap of the final adapted decoder.
    pub gae_gap_final: f64,
    /// `sum ||h - h_hat||^2 / sum ||h||^2`.
    pub fixed_recon: f64,
    pub gae_recon: f64,
    pub fixed_mse: f64,
    pub gae_mse: f64,
    pub energy: f64,
    pub overlap_id: f64,
    pub overlap_ood: f64,
    pub eta: f64,
    pub shift_norm: f64,
    /// `shift_norm / ||M_id||_F`.
    pub normalized_shift: f64,
    /// `||P_id - P_ood||_F`.
    pub delta_id: f64,
    /// `L(P_id) - L(P_gae)` under the OOD moment.
    pub improvement: f64,
    pub gamma_id: f64,
    pub gamma_ood: f64,
    pub bounds: Vec<BoundReport>,
}

impl SweepRecord {
    pub fn violations(&self) -> usize {
        self.bounds.iter().filter(|b| b.violated()).count()
    }

    pub fn bound(&self, name: &str) -> Option<&BoundReport> {
        self.bounds.iter().find(|b| b.bound == name)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationFit {
    pub pearson: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremFit {
    pub fit: LinearFit,
    pub pearson: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rank: usize,
    pub n: usize,
    pub seed: u64,
    pub records: Vec<SweepRecord>,
    /// Normalized shift vs `delta_id`.
    pub prop32: CorrelationFit,
    /// Improvement vs `delta_id^2`.
    pub theorem: TheoremFit,
    pub total_violations: usize,
    pub warnings: Vec<String>,
}

/// Fixed vs adapted explainer across severities.
pub fn run_severity_sweep(
    family: &SeverityFamily,
    model: &ToyModel,
    dict: &Dictionary,
    config: &SweepConfig,
) -> Result<SweepReport> {
    let r = config.rank.unwrap_or(model.p);
    if dict.d_in() != model.d || dict.d() != model.d {
        return Err(GaeError::dims("explainer width", model.d, dict.d()));
    }
    if config.severities.is_empty() {
        return Err(GaeError::InvalidParameter("at least one severity is required".into()));
    }
    if config.severities.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(GaeError::InvalidParameter("severities must be strictly ascending".into()));
    }
    let gae_cfg = GaeConfig {
        rank: r,
        ..config.gae.clone()
    };
    gae_cfg.validate()?;

    let (_, id_hidden) = sample_inputs(family, model, 0.0, config.n, derive_seed(config.seed, STREAM_SWEEP_ID))?;
    let m_id = SecondMoment::estimate(id_hidden.data())?;
    let pi_id = m_id.top_r_eigenbasis(r)?;
    let pi_dec = explainer_subspace(dict.w_dec(), r)?;
    let overlap_id = subspace_overlap(&pi_dec, &pi_id)?;
    let mut warnings: Vec<String> = [pi_id.warning(), pi_dec.warning()]
        .into_iter()
        .flatten()
        .map(str::to_string)
        .collect();
    let id_norm = m_id.matrix().norm();

    let records: Vec<(SweepRecord, Vec<String>)> = config
        .severities
        .par_iter()
        .enumerate()
        .map(|(idx, &s)| -> Result<(SweepRecord, Vec<String>)> {
            let seed = derive_seed(config.seed, STREAM_SWEEP + idx as u64);
            let (_, hidden) = sample_inputs(family, model, s, config.n, seed)?;
            let h = hidden.data();
            let m_ood = SecondMoment::estimate(h)?;
            let pi_ood = m_ood.top_r_eigenbasis(r)?;
            let energy = h.norm_squared();
            let nf = config.n as f64;

            let codes = dict.encode_batch(h)?;
            let fixed_sse = (codes.decode(dict.w_dec(), dict.b_dec())? - h).norm_squared();
            let adapted = adapt(dict, &hidden, &GaeConfig { seed: derive_seed(seed, 1), ..gae_cfg.clone() })?;
            let gae_sse = (codes.decode(adapted.adapted.w_dec(), adapted.adapted.b_dec())? - h).norm_squared();
            let pi_gae = explainer_subspace(&adapted.rotated_w, r)?;
            let gae_gap = projector_distance(&pi_gae, &pi_ood)?;
            let gae_gap_final = projector_distance(&explainer_subspace(adapted.adapted.w_dec(), r)?, &pi_ood)?;

            let theorem = check_theorem_improvement(&m_ood, &pi_id, &pi_gae, r)?;
            let improvement = theorem.context["improvement"];
            let (lower, upper) = check_excess_bounds(&m_ood, &pi_dec, r)?;
            let bounds = vec![
                check_gap_bound(&m_id, &m_ood, r)?,
                check_corollary(&m_id, &m_ood, r)?,
                lower,
                upper,
                theorem,
            ];
            let shift = second_moment_shift(&m_id, &m_ood)?;
            let mut notes = adapted.warnings.clone();
            notes.extend(pi_ood.warning().map(|w| format!("s = {s}: {w}")));
            Ok((
                SweepRecord {
                    severity: s,
                    fixed_gap: projector_distance(&pi_dec, &pi_ood)?,
                    gae_gap,
                    gae_gap_final,
                    fixed_recon: fixed_sse / energy,
                    gae_recon: gae_sse / energy,
                    fixed_mse: fixed_sse / nf,
                    gae_mse: gae_sse / nf,
                    energy: energy / nf,
                    overlap_id,
                    overlap_ood: subspace_overlap(&pi_dec, &pi_ood)?,
                    eta: decompose_loss(&m_ood, &pi_dec, r)?.eta,
                    shift_norm: shift,
                    normalized_shift: if id_norm > 0.0 { shift / id_norm } else { 0.0 },
                    delta_id: projector_distance(&pi_id, &pi_ood)?,
                    improvement,
                    gamma_id: m_id.eigengap(r)?,
                    gamma_ood: m_ood.eigengap(r)?,
                    bounds,
                },
                notes,
            ))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(records.len());
    for (rec, notes) in records {
        warnings.extend(notes);
        out.push(rec);
    }
    warnings.dedup();
    let shifts: Vec<f64> = out.iter().map(|r| r.normalized_shift).collect();
    let deltas: Vec<f64> = out.iter().map(|r| r.delta_id).collect();
    let delta_sq: Vec<f64> = deltas.iter().map(|v| v * v).collect();
    let improvements: Vec<f64> = out.iter().map(|r| r.improvement).collect();
    let theorem_violations = out
        .iter()
        .filter(|r| r.bound("improvement over the fixed explainer").is_some_and(|b| b.violated()))
        .count();
    let report = SweepReport {
        rank: r,
        n: config.n,
        seed: config.seed,
        prop32: CorrelationFit {
            pearson: pearson(&shifts, &deltas),
            spearman: spearman(&shifts, &deltas),
        },
        theorem: TheoremFit {
            fit: if out.len() >= 2 {
                linear_fit(&delta_sq, &improvements)
            } else {
                LinearFit {
                    slope: f64::NAN,
                    intercept: f64::NAN,
                    r_squared: f64::NAN,
                }
            },
            pearson: pearson(&delta_sq, &improvements),
            violations: theorem_violations,
        },
        total_violations: out.iter().map(SweepRecord::violations).sum(),
        records: out,
        warnings,
    };
    Ok(report)
}

/// Everything needed to run the toy experiment end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub model: ToyModelSpec,
    pub severity: SeverityParams,
    /// ID samples used to train the explainer.
    pub n_train: usize,
    /// Its seed is replaced by one derived from `seed`.
    pub train: TrainConfig,
    /// Its seed is replaced by `seed`.
    pub sweep: SweepConfig,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            model: ToyModelSpec::default(),
            severity: SeverityParams::default(),
            n_train: 20_000,
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
            seed: 2026,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyRun {
    pub model: ToyModel,
    pub family: SeverityFamily,
    pub dictionary: Dictionary,
    pub training: TrainingLog,
    pub report: SweepReport,
}

/// The ingredients of a toy run before the sweep: model, family and ID
/// training activations, all derived from `config.seed`.
pub fn toy_setup(config: &ToyConfig) -> Result<(ToyModel, SeverityFamily, ActivationBatch)> {
    let model = ToyModel::build(&config.model, derive_seed(config.seed, STREAM_MODEL))?;
    let family = SeverityFamily::new(&model, &config.severity, derive_seed(config.seed, STREAM_FAMILY))?;
    let (_, hidden) = sample_inputs(&family, &model, 0.0, config.n_train, derive_seed(config.seed, STREAM_TRAIN_DATA))?;
    Ok((model, family, hidden))
}

/// Builds the model, trains the ID explainer and runs the sweep.
pub fn run_toy_experiment(config: &ToyConfig) -> Result<ToyRun> {
    let (model, family, hidden) = toy_setup(config)?;
    let train = TrainConfig {
        seed: derive_seed(config.seed, STREAM_TRAIN),
        ..config.train.clone()
    };
    let (dictionary, training) = train_explainer(&hidden, &train)?;
    let sweep = SweepConfig {
        seed: config.seed,
        ..config.sweep.clone()
    };
    let report = run_severity_sweep(&family, &model, &dictionary, &sweep)?;
    Ok(ToyRun {
        model,
        family,
        dictionary,
        training,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> ToyModel {
        ToyModel::build(
            &ToyModelSpec {
                d_in: 16,
                d: 24,
                p: 3,
                planted_gain: 4.0,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn default_model_shapes() {
        let m = ToyModel::build(&ToyModelSpec::default(), 1).unwrap();
        assert_eq!(m.w1.shape(), (256, 128));
        assert_eq!(m.b1.len(), 256);
        assert_eq!(m.w2.shape(), (8, 256));
        assert_eq!(m.b2.len(), 8);
    }

    #[test]
    fn model_is_seed_deterministic() {
        assert_eq!(small_model(5), small_model(5));
        assert_ne!(small_model(5).w1, small_model(6).w1);
    }

    #[test]
    fn single_output_model_works() {
        let spec = ToyModelSpec {
            d_in: 8,
            d: 10,
            p: 1,
            planted_gain: 3.0,
        };
        let m = ToyModel::build(&spec, 2).unwrap();
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 3).unwrap();
        let (_, h) = sample_inputs(&fam, &m, 0.5, 50, 4).unwrap();
        let mm = SecondMoment::estimate(h.data()).unwrap();
        assert_eq!(mm.top_r_eigenbasis(1).unwrap().rank(), 1);
    }

    #[test]
    fn identity_covariance_at_zero_severity() {
        let m = small_model(1);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 2).unwrap();
        let (sigma, a) = fam.covariance(0.0).unwrap();
        assert!((&sigma - DMatrix::<f64>::identity(16, 16)).norm() < 1e-8);
        assert!((&a * &a - &sigma).norm() < 1e-8);
    }

    #[test]
    fn covariance_trace_and_root() {
        let m = small_model(3);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 4).unwrap();
        for s in severity_grid(6) {
            let (sigma, a) = fam.covariance(s).unwrap();
            assert!((sigma.trace() - 16.0).abs() < 1e-8);
            assert!((&a * &a - &sigma).norm() < 1e-8 * sigma.norm().max(1.0));
            assert!(sigma.clone().symmetric_eigenvalues().min() >= -1e-8);
        }
        assert!(fam.covariance(1.5).is_err());
        assert!(fam.covariance(-0.1).is_err());
    }

    #[test]
    fn slope_endpoints_are_included() {
        let m = small_model(3);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 4).unwrap();
        assert_eq!(fam.slopes[0], -6.0);
        assert_eq!(*fam.slopes.last().unwrap(), 6.0);
    }

    #[test]
    fn hidden_is_relu_of_preactivation() {
        let m = small_model(7);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 8).unwrap();
        let (x, h) = sample_inputs(&fam, &m, 0.7, 20, 9).unwrap();
        for i in 0..20 {
            for j in 0..m.d {
                let mut pre = m.b1[j];
                for t in 0..m.d_in {
                    pre += m.w1[(j, t)] * x.data()[(i, t)];
                }
                assert!((h.data()[(i, j)] - pre.max(0.0)).abs() < 1e-12);
            }
        }
        let (x2, h2) = sample_inputs(&fam, &m, 0.7, 20, 9).unwrap();
        assert_eq!((x2, h2), (x, h));
    }

    #[test]
    fn identity_input_covariance_is_recovered() {
        let m = ToyModel::build(&ToyModelSpec::default(), 1).unwrap();
        let fam = SeverityFamily::new(&m, &SeverityParams::default(), 2).unwrap();
        let (x, _) = sample_inputs(&fam, &m, 0.0, 20_000, 3).unwrap();
        let cov = x.data().transpose() * x.data() / 20_000.0;
        // Entrywise sampling error is about 1/sqrt(n) = 0.007.
        let max_dev = (cov - DMatrix::<f64>::identity(128, 128)).amax();
        assert!(max_dev < 0.05, "{max_dev}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let m = small_model(10);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 11).unwrap();
        let (_, h) = sample_inputs(&fam, &m, 0.0, 2000, 12).unwrap();
        let cfg = TrainConfig {
            k: 24,
            sparsifier: Sparsifier::TopK { k_active: 24 },
            epochs: 10,
            lr: 0.01,
            batch_size: 64,
            seed: 13,
            ..TrainConfig::default()
        };
        let (d1, log) = train_explainer(&h, &cfg).unwrap();
        assert!(log.final_loss < 0.5 * log.initial_loss, "{log:?}");
        let (d2, _) = train_explainer(&h, &cfg).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn relu_training_with_l1_runs() {
        let m = small_model(14);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 15).unwrap();
        let (_, h) = sample_inputs(&fam, &m, 0.0, 1000, 16).unwrap();
        let cfg = TrainConfig {
            k: 48,
            sparsifier: Sparsifier::Relu,
            epochs: 5,
            lr: 0.005,
            l1_weight: 1e-3,
            batch_size: 64,
            seed: 17,
        };
        let (_, log) = train_explainer(&h, &cfg).unwrap();
        assert!(log.final_loss < log.initial_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let m = small_model(18);
        let fam = SeverityFamily::new(&m, &SeverityParams { r_v: 4, ..Default::default() }, 19).unwrap();
        let (_, h) = sample_inputs(&fam, &m, 0.0, 500, 20).unwrap();
        let cfg = TrainConfig {
            k: 24,
            sparsifier: Sparsifier::Relu,
            epochs: 50,
            lr: 1e3,
            batch_size: 32,
            seed: 21,
            ..TrainConfig::default()
        };
        assert!(matches!(train_explainer(&h, &cfg), Err(GaeError::Diverged { .. })));
    }

    #[test]
    fn severity_grid_values() {
        assert_eq!(severity_grid(1), vec![0.0]);
        let g = severity_grid(11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[10], 1.0);
        assert!((g[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn small_sweep_is_reproducible_and_step1_exact() {
        let cfg = ToyConfig {
            model: ToyModelSpec {
                d_in: 16,
                d: 24,
                p: 3,
                planted_gain: 4.0,
            },
            severity: SeverityParams { r_v: 4, ..Default::default() },
            n_train: 1500,
            train: TrainConfig {
                k: 48,
                sparsifier: Sparsifier::TopK { k_active: 8 },
                epochs: 4,
                lr: 0.005,
                batch_size: 64,
                ..TrainConfig::default()
            },
            sweep: SweepConfig {
                severities: vec![0.0, 0.5, 1.0],
                n: 1500,
                gae: GaeConfig {
                    n_fit: 1500,
                    ..GaeConfig::default()
                },
                ..SweepConfig::default()
            },
            seed: 3,
        };
        let a = run_toy_experiment(&cfg).unwrap();
        let b = run_toy_experiment(&cfg).unwrap();
        assert_eq!(a.report.records.len(), 3);
        for (ra, rb) in a.report.records.iter().zip(&b.report.records) {
            assert_eq!(ra.fixed_gap.to_bits(), rb.fixed_gap.to_bits());
            assert_eq!(ra.gae_recon.to_bits(), rb.gae_recon.to_bits());
            assert!(ra.gae_gap <= 1e-6);
            assert!(ra.severity.is_finite() && ra.eta.is_finite());
        }
    }
}
