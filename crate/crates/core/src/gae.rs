// SPDX-License-Identifier: MIT OR Apache-2.0

//! Geometry-adaptive decoder update.
//!
//! Step 1 rotates the decoder's top-`r` left singular subspace onto the
//! top-`r` eigenspace of the OOD second moment (orthogonal Procrustes).
//! Step 2 refits the decoder by ridge regression on frozen-encoder codes,
//! shrinking towards the rotated decoder with level `lambda_pres` inside the
//! OOD subspace and `lambda_pres + lambda_geom` outside it. The encoder is
//! never touched.

use std::time::Instant;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SVD};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{GaeError, Result};
use crate::explainer::{ActivationBatch, Dictionary, SparseCodes};
use crate::rng::seeded;
use crate::spectral::{explainer_subspace, projector_distance, SecondMoment, Subspace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaeConfig {
    pub rank: usize,
    pub lambda_geom: f64,
    pub lambda_pres: f64,
    /// Weight of the rotated decoder in the final interpolation.
    pub alpha: f64,
    pub n_fit: usize,
    pub seed: u64,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            lambda_geom: 0.1,
            lambda_pres: 0.2,
            alpha: 0.0,
            n_fit: 2048,
            seed: 2026,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(GaeError::InvalidParameter("rank must be at least 1".into()));
        }
        for (name, v) in [("lambda_geom", self.lambda_geom), ("lambda_pres", self.lambda_pres)] {
            if !v.is_finite() || v < 0.0 {
                return Err(GaeError::InvalidParameter(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GaeError::InvalidParameter(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if self.n_fit == 0 {
            return Err(GaeError::InvalidParameter("n_fit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProcrustesSolution {
    /// `T* = V U^T` from the SVD `G = U S V^T`.
    pub rotation: DMatrix<f64>,
    /// `U_ood T* U_dec^T W`.
    pub rotated: DMatrix<f64>,
    /// `G = U_dec^T W W^T U_ood`.
    pub cross_gram: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// `G` is numerically singular, so the maximizer is not unique.
    pub rank_deficient: bool,
}

/// Orthogonal `T` maximizing `tr(G T)`, equivalently minimizing
/// `||U_ood T U_dec^T W - W||_F`.
pub fn procrustes_rotation(
    w_dec: &DMatrix<f64>,
    u_dec: &Subspace,
    u_ood: &Subspace,
) -> Result<ProcrustesSolution> {
    let d = w_dec.nrows();
    if u_dec.ambient_dim() != d || u_ood.ambient_dim() != d {
        return Err(GaeError::dims("subspace ambient dimension", d, u_ood.ambient_dim()));
    }
    if u_dec.rank() != u_ood.rank() {
        return Err(GaeError::dims("subspace rank", u_dec.rank(), u_ood.rank()));
    }
    let coords_dec = u_dec.basis().tr_mul(w_dec);
    let coords_ood = u_ood.basis().tr_mul(w_dec);
    let cross_gram = &coords_dec * coords_ood.transpose();
    let svd = SVD::new(cross_gram.clone(), true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let rotation = v_t.transpose() * u.transpose();
    let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = singular_values.iter().copied().fold(0.0, f64::max);
    let smin = singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    let rank_deficient = smax == 0.0 || smin <= smax * 1e-12;
    let rotated = u_ood.basis() * (&rotation * coords_dec);
    Ok(ProcrustesSolution {
        rotation,
        rotated,
        cross_gram,
        singular_values,
        rank_deficient,
    })
}

/// How the `k x k` ridge systems are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefitRoute {
    /// Primal when `k <= n`, dual otherwise.
    Auto,
    /// Cholesky of the `k x k` code covariance.
    Primal,
    /// Woodbury identity through the `n x n` row Gram; needs `lambda_pres > 0`.
    Dual,
}

#[derive(Debug, Clone)]
pub struct Refit {
    pub w_dec: DMatrix<f64>,
    pub b_dec: DVector<f64>,
    pub route: RefitRoute,
}

/// Closed-form minimizer over `(W, b)` of
/// `(1/n) sum ||h_i - W z_i - b||^2 + lambda_geom ||(I - P) W||^2 + lambda_pres ||W - W_rot||^2`.
pub fn decoder_refit(
    w_rotated: &DMatrix<f64>,
    pi_ood: &Subspace,
    targets: &DMatrix<f64>,
    codes: &SparseCodes,
    lambda_geom: f64,
    lambda_pres: f64,
) -> Result<Refit> {
    decoder_refit_with_route(w_rotated, pi_ood, targets, codes, lambda_geom, lambda_pres, RefitRoute::Auto)
}

pub fn decoder_refit_with_route(
    w_rotated: &DMatrix<f64>,
    pi_ood: &Subspace,
    targets: &DMatrix<f64>,
    codes: &SparseCodes,
    lambda_geom: f64,
    lambda_pres: f64,
    route: RefitRoute,
) -> Result<Refit> {
    let (d, k) = w_rotated.shape();
    let n = targets.nrows();
    if n == 0 {
        return Err(GaeError::EmptyBatch);
    }
    if codes.n_rows() != n {
        return Err(GaeError::dims("code rows", n, codes.n_rows()));
    }
    if codes.n_features() != k {
        return Err(GaeError::dims("code width", k, codes.n_features()));
    }
    if targets.ncols() != d || pi_ood.ambient_dim() != d {
        return Err(GaeError::dims("refit target width", d, targets.ncols()));
    }
    if !(lambda_geom >= 0.0 && lambda_pres >= 0.0) {
        return Err(GaeError::InvalidParameter("ridge levels must be >= 0".into()));
    }
    let route = match route {
        RefitRoute::Auto if k <= n => RefitRoute::Primal,
        RefitRoute::Auto => RefitRoute::Dual,
        other => other,
    };

    let nf = n as f64;
    let z_mean = codes.mean();
    let h_mean = DVector::from_iterator(d, targets.column_iter().map(|c| c.sum() / nf));
    // C = Cov(h, z) + lambda_pres W_rot.
    let mut c = codes.cross(targets)? / nf;
    c.ger(-1.0, &h_mean, &z_mean, 1.0);
    c += w_rotated * lambda_pres;

    let solve = |level: f64| -> Result<DMatrix<f64>> {
        match route {
            RefitRoute::Dual => dual_ridge(&c, codes, &z_mean, level),
            _ => primal_ridge(&c, codes, &z_mean, level),
        }
    };
    let inside = solve(lambda_pres)?;
    let w_dec = if lambda_geom == 0.0 {
        inside
    } else {
        let outside = solve(lambda_pres + lambda_geom)?;
        let u = pi_ood.basis();
        &outside + u * u.tr_mul(&(inside - &outside))
    };
    let b_dec = &h_mean - &w_dec * &z_mean;
    Ok(Refit { w_dec, b_dec, route })
}

/// `C (Cov(z) + level I)^{-1}` through a `k x k` Cholesky factor.
fn primal_ridge(
    c: &DMatrix<f64>,
    codes: &SparseCodes,
    z_mean: &DVector<f64>,
    level: f64,
) -> Result<DMatrix<f64>> {
    let n = codes.n_rows() as f64;
    let k = codes.n_features();
    let mut b = codes.gram() / n;
    b.ger(-1.0, z_mean, z_mean, 1.0);
    for j in 0..k {
        b[(j, j)] += level;
    }
    let chol = factor(b)?;
    // B is symmetric, so C B^{-1} = (B^{-1} C^T)^T.
    Ok(chol.solve(&c.transpose()).transpose())
}

/// `C (Cov(z) + level I)^{-1}` via
/// `B^{-1} = (I - Zc^T (n level I + Zc Zc^T)^{-1} Zc) / level`.
fn dual_ridge(
    c: &DMatrix<f64>,
    codes: &SparseCodes,
    z_mean: &DVector<f64>,
    level: f64,
) -> Result<DMatrix<f64>> {
    if level <= 0.0 {
        return Err(GaeError::SingularGram);
    }
    let n = codes.n_rows();
    let nf = n as f64;
    // Row-centred Gram Zc Zc^T from Z Z^T and the projections Z z_mean.
    let mut kmat = codes.row_gram();
    let proj = codes.apply_transposed(&DMatrix::from_row_slice(1, z_mean.len(), z_mean.as_slice()))?;
    let proj = DVector::from_iterator(n, proj.iter().copied());
    let zz = z_mean.norm_squared();
    for i in 0..n {
        for j in 0..n {
            kmat[(i, j)] += zz - proj[i] - proj[j];
        }
        kmat[(i, i)] += nf * level;
    }
    // C Zc^T = C Z^T - (C z_mean) 1^T.
    let mut czt = codes.apply_transposed(c)?;
    let cz = c * z_mean;
    for mut col in czt.column_iter_mut() {
        col -= &cz;
    }
    let chol = factor(kmat)?;
    let x = chol.solve(&czt.transpose()).transpose();
    // X Zc = X Z - (X 1) z_mean^T.
    let mut xz = codes.left_multiply(&x)?;
    let x_sum = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.sum()));
    xz.ger(-1.0, &x_sum, z_mean, 1.0);
    Ok((c - xz) / level)
}

fn factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m).ok_or(GaeError::SingularGram)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-13 {
        return Err(GaeError::SingularGram);
    }
    Ok(chol)
}

/// `(1 - alpha) w_gae + alpha w_rotated`.
pub fn interpolate_decoder(
    w_gae: &DMatrix<f64>,
    w_rotated: &DMatrix<f64>,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GaeError::InvalidParameter(format!("alpha = {alpha} must lie in [0, 1]")));
    }
    if w_gae.shape() != w_rotated.shape() {
        return Err(GaeError::dims("interpolated decoder width", w_gae.ncols(), w_rotated.ncols()));
    }
    if alpha == 0.0 {
        return Ok(w_gae.clone());
    }
    if alpha == 1.0 {
        return Ok(w_rotated.clone());
    }
    Ok(w_gae * (1.0 - alpha) + w_rotated * alpha)
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StepTiming {
    pub moment: f64,
    pub subspaces: f64,
    pub procrustes: f64,
    pub encode: f64,
    pub refit: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptationResult {
    pub adapted: Dictionary,
    pub t_star: DMatrix<f64>,
    pub rotated_w: DMatrix<f64>,
    /// Top-`r` eigenspace of the fit-sample second moment.
    pub pi_ood: Subspace,
    pub procrustes_singular_values: Vec<f64>,
    pub rank_deficient_cross_gram: bool,
    /// Gap of the input decoder.
    pub gap_before: f64,
    /// Gap of the Step-1 rotated decoder.
    pub gap_after: f64,
    /// Gap of the returned decoder.
    pub gap_final: f64,
    pub recon_before: f64,
    pub recon_after: f64,
    pub n_fit_used: usize,
    pub step2_applied: bool,
    pub refit_route: Option<RefitRoute>,
    pub timing: StepTiming,
    pub warnings: Vec<String>,
}

/// Serializable subset of [`AdaptationResult`].
#[derive(Debug, Clone, Serialize)]
pub struct AdaptationSummary {
    pub gap_before: f64,
    pub gap_after: f64,
    pub gap_final: f64,
    pub recon_before: f64,
    pub recon_after: f64,
    pub n_fit_used: usize,
    pub step2_applied: bool,
    pub refit_route: Option<RefitRoute>,
    pub procrustes_singular_values: Vec<f64>,
    pub rank_deficient_cross_gram: bool,
    pub t_star_orthogonality_error: f64,
    pub timing: StepTiming,
    pub warnings: Vec<String>,
}

impl AdaptationResult {
    pub fn summary(&self) -> AdaptationSummary {
        let r = self.t_star.nrows();
        AdaptationSummary {
            gap_before: self.gap_before,
            gap_after: self.gap_after,
            gap_final: self.gap_final,
            recon_before: self.recon_before,
            recon_after: self.recon_after,
            n_fit_used: self.n_fit_used,
            step2_applied: self.step2_applied,
            refit_route: self.refit_route,
            procrustes_singular_values: self.procrustes_singular_values.clone(),
            rank_deficient_cross_gram: self.rank_deficient_cross_gram,
            t_star_orthogonality_error: (self.t_star.tr_mul(&self.t_star) - DMatrix::<f64>::identity(r, r)).norm(),
            timing: self.timing.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// Row indices used for fitting: all rows when `n_fit >= n`, otherwise a
/// seeded uniform sample without replacement, returned in ascending order.
pub fn select_fit_rows(n: usize, n_fit: usize, seed: u64) -> Vec<usize> {
    if n_fit >= n {
        return (0..n).collect();
    }
    let mut rng = seeded(seed);
    let mut rows = sample(&mut rng, n, n_fit).into_vec();
    rows.sort_unstable();
    rows
}

/// Full pipeline on unlabeled OOD activations. The second moment and the
/// refit use the reconstruction target stream; codes come from the encoder
/// input stream.
pub fn adapt(dict: &Dictionary, ood: &ActivationBatch, config: &GaeConfig) -> Result<AdaptationResult> {
    config.validate()?;
    if ood.is_empty() {
        return Err(GaeError::EmptyBatch);
    }
    if ood.d() != dict.d_in() {
        return Err(GaeError::dims("activation width", dict.d_in(), ood.d()));
    }
    if ood.target().ncols() != dict.d() {
        return Err(GaeError::dims("target width", dict.d(), ood.target().ncols()));
    }
    let r = config.rank;
    let max_rank = dict.d().min(dict.k());
    if r > max_rank {
        return Err(GaeError::RankOutOfRange { rank: r, max: max_rank });
    }
    let start = Instant::now();
    let mut timing = StepTiming::default();
    let mut warnings = Vec::new();

    if config.n_fit > ood.n() {
        warnings.push(format!(
            "n_fit = {} exceeds the {} available rows; fitting on all rows",
            config.n_fit,
            ood.n()
        ));
    }
    let rows = select_fit_rows(ood.n(), config.n_fit, config.seed);
    let fit = if rows.len() == ood.n() {
        ood.clone()
    } else {
        ood.select_rows(&rows)
    };

    let t = Instant::now();
    let m_ood = SecondMoment::estimate(fit.target())?;
    timing.moment = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let pi_ood = m_ood.top_r_eigenbasis(r)?;
    let u_dec = explainer_subspace(dict.w_dec(), r)?;
    warnings.extend(pi_ood.warning().map(str::to_string));
    warnings.extend(u_dec.warning().map(str::to_string));
    timing.subspaces = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let step1 = procrustes_rotation(dict.w_dec(), &u_dec, &pi_ood)?;
    if step1.rank_deficient {
        warnings.push("cross Gram G is rank deficient; the rotation is one of many maximizers".into());
    }
    timing.procrustes = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let codes = dict.encode_batch(fit.data())?;
    timing.encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let step2_applied = config.alpha < 1.0;
    let (w_final, b_final, refit_route) = if step2_applied {
        let refit = decoder_refit(
            &step1.rotated,
            &pi_ood,
            fit.target(),
            &codes,
            config.lambda_geom,
            config.lambda_pres,
        )?;
        let w = interpolate_decoder(&refit.w_dec, &step1.rotated, config.alpha)?;
        (w, refit.b_dec, Some(refit.route))
    } else {
        (step1.rotated.clone(), dict.b_dec().clone(), None)
    };
    timing.refit = t.elapsed().as_secs_f64();
    let adapted = dict.with_decoder(w_final, b_final)?;

    let gap_before = projector_distance(&u_dec, &pi_ood)?;
    let gap_after = projector_distance(&explainer_subspace(&step1.rotated, r)?, &pi_ood)?;
    let gap_final = projector_distance(&explainer_subspace(adapted.w_dec(), r)?, &pi_ood)?;
    let nf = fit.n() as f64;
    let recon_before = (codes.decode(dict.w_dec(), dict.b_dec())? - fit.target()).norm_squared() / nf;
    let recon_after = (codes.decode(adapted.w_dec(), adapted.b_dec())? - fit.target()).norm_squared() / nf;
    timing.total = start.elapsed().as_secs_f64();

    for w in &warnings {
        warn!("{w}");
    }
    Ok(AdaptationResult {
        adapted,
        t_star: step1.rotation,
        rotated_w: step1.rotated,
        pi_ood,
        procrustes_singular_values: step1.singular_values,
        rank_deficient_cross_gram: step1.rank_deficient,
        gap_before,
        gap_after,
        gap_final,
        recon_before,
        recon_after,
        n_fit_used: fit.n(),
        step2_applied,
        refit_route,
        timing,
        warnings,
    })
}
