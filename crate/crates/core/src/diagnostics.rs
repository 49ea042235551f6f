// SPDX-License-Identifier: MIT OR Apache-2.0

//! Faithfulness diagnostics: projection loss, its irreducible and
//! explainer-dependent parts, and numerical checkers for the perturbation
//! bounds relating moment shift, subspace gap and excess loss.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{GaeError, Result};
use crate::explainer::Dictionary;
use crate::spectral::{
    explainer_subspace, projector_distance, second_moment_shift, subspace_overlap, SecondMoment,
    Subspace, DEGENERATE_GAP,
};

/// Relative tolerance used to decide whether a bound holds.
pub const BOUND_TOLERANCE: f64 = 1e-8;

/// `tr[(I - P) M]`, the energy of `M` outside the subspace.
pub fn projection_loss(m: &SecondMoment, s: &Subspace) -> Result<f64> {
    if s.ambient_dim() != m.dim() {
        return Err(GaeError::dims("projection loss", m.dim(), s.ambient_dim()));
    }
    Ok((m.matrix().trace() - captured_energy(m, s)).max(0.0))
}

/// `tr(U^T M U)`.
fn captured_energy(m: &SecondMoment, s: &Subspace) -> f64 {
    let u = s.basis();
    (u.transpose() * m.matrix() * u).trace()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossDecomposition {
    pub total: f64,
    pub irreducible: f64,
    pub explainer_dependent: f64,
    /// `explainer_dependent / total`, 0 when `total` is 0.
    pub eta: f64,
}

/// Splits the projection loss of `s` into the part no rank-`r` subspace can
/// avoid and the excess over the top-`r` eigenspace of `m`.
pub fn decompose_loss(m: &SecondMoment, s: &Subspace, r: usize) -> Result<LossDecomposition> {
    if s.rank() != r {
        return Err(GaeError::dims("decomposition rank", r, s.rank()));
    }
    let total = projection_loss(m, s)?;
    let ev = m.eigenvalues();
    let irreducible: f64 = ev.iter().skip(r).sum::<f64>().max(0.0);
    let top: f64 = ev.iter().take(r).sum();
    let explainer_dependent = top - captured_energy(m, s);
    let eta = if total == 0.0 {
        0.0
    } else {
        explainer_dependent / total
    };
    Ok(LossDecomposition {
        total,
        irreducible,
        explainer_dependent,
        eta,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub bound: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`.
    pub slack: f64,
    pub satisfied: bool,
    /// False when the bound's gap assumption fails (eigengap below 1e-12).
    pub applicable: bool,
    pub context: BTreeMap<String, f64>,
}

impl BoundReport {
    fn new(bound: &str, lhs: f64, rhs: f64, applicable: bool, context: &[(&str, f64)]) -> Self {
        let slack = rhs - lhs;
        let scale = lhs.abs().max(rhs.abs()).max(1.0);
        Self {
            bound: bound.to_string(),
            lhs,
            rhs,
            slack,
            satisfied: slack >= -BOUND_TOLERANCE * scale,
            applicable,
            context: context.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    /// An applicable bound that does not hold.
    pub fn violated(&self) -> bool {
        self.applicable && !self.satisfied
    }
}

/// `||P_ood - P_id||_F <= sqrt(2)/gamma_id * ||M_ood - M_id||_F`.
pub fn check_gap_bound(m_id: &SecondMoment, m_ood: &SecondMoment, r: usize) -> Result<BoundReport> {
    let shift = second_moment_shift(m_id, m_ood)?;
    let gamma_id = m_id.eigengap(r)?;
    let gap = projector_distance(&m_ood.top_r_eigenbasis(r)?, &m_id.top_r_eigenbasis(r)?)?;
    let applicable = gamma_id >= DEGENERATE_GAP;
    let rhs = if applicable {
        2f64.sqrt() / gamma_id * shift
    } else {
        f64::INFINITY
    };
    Ok(BoundReport::new(
        "subspace gap vs moment shift",
        gap,
        rhs,
        applicable,
        &[("gamma_id", gamma_id), ("shift_norm", shift), ("rank", r as f64)],
    ))
}

/// Lower and upper bounds on the excess loss of `s` in terms of its gap to
/// the top-`r` eigenspace of `m`: `gamma/2 * gap^2 <= excess <= (l1 - ld)/2 * gap^2`.
pub fn check_excess_bounds(
    m: &SecondMoment,
    s: &Subspace,
    r: usize,
) -> Result<(BoundReport, BoundReport)> {
    let dec = decompose_loss(m, s, r)?;
    let gamma = m.eigengap(r)?;
    let spread = m.spectral_spread();
    let gap = projector_distance(s, &m.top_r_eigenbasis(r)?)?;
    let g2 = gap * gap;
    let ctx = [
        ("gamma_ood", gamma),
        ("spectral_spread", spread),
        ("gap", gap),
        ("excess", dec.explainer_dependent),
    ];
    let lower = BoundReport::new(
        "excess lower bound",
        gamma / 2.0 * g2,
        dec.explainer_dependent,
        gamma >= DEGENERATE_GAP,
        &ctx,
    );
    let upper = BoundReport::new("excess upper bound", dec.explainer_dependent, spread / 2.0 * g2, true, &ctx);
    Ok((lower, upper))
}

/// `L(P_id) - L(P_ood) <= (l1 - ld)/2 * (sqrt(2)/gamma_id * shift)^2`.
pub fn check_corollary(m_id: &SecondMoment, m_ood: &SecondMoment, r: usize) -> Result<BoundReport> {
    let shift = second_moment_shift(m_id, m_ood)?;
    let gamma_id = m_id.eigengap(r)?;
    let dec = decompose_loss(m_ood, &m_id.top_r_eigenbasis(r)?, r)?;
    let spread = m_ood.spectral_spread();
    let applicable = gamma_id >= DEGENERATE_GAP;
    let rhs = if applicable {
        let g = 2f64.sqrt() / gamma_id * shift;
        spread / 2.0 * g * g
    } else {
        f64::INFINITY
    };
    Ok(BoundReport::new(
        "degradation vs moment shift",
        dec.explainer_dependent,
        rhs,
        applicable,
        &[("gamma_id", gamma_id), ("shift_norm", shift), ("spectral_spread", spread)],
    ))
}

/// `L(P_gae) <= L(P_id) - gamma_ood/2 * ||P_id - P_ood||_F^2`.
pub fn check_theorem_improvement(
    m_ood: &SecondMoment,
    pi_id: &Subspace,
    pi_gae: &Subspace,
    r: usize,
) -> Result<BoundReport> {
    if pi_id.rank() != r || pi_gae.rank() != r {
        return Err(GaeError::dims("improvement check rank", r, pi_id.rank().max(pi_gae.rank())));
    }
    let gamma = m_ood.eigengap(r)?;
    let pi_ood = m_ood.top_r_eigenbasis(r)?;
    let delta_id = projector_distance(pi_id, &pi_ood)?;
    let loss_id = projection_loss(m_ood, pi_id)?;
    let loss_gae = projection_loss(m_ood, pi_gae)?;
    Ok(BoundReport::new(
        "improvement over the fixed explainer",
        loss_gae,
        loss_id - gamma / 2.0 * delta_id * delta_id,
        gamma >= DEGENERATE_GAP,
        &[
            ("gamma_ood", gamma),
            ("delta_id", delta_id),
            ("loss_id", loss_id),
            ("loss_gae", loss_gae),
            ("improvement", loss_id - loss_gae),
        ],
    ))
}

/// Everything the `diagnose` command reports for an ID/OOD pair.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticReport {
    pub rank: usize,
    pub shift_norm: f64,
    /// `shift_norm / ||M_id||_F`.
    pub normalized_shift: f64,
    pub gamma_id: f64,
    pub gamma_ood: f64,
    /// `||P_id - P_ood||_F`.
    pub gap_id: f64,
    pub overlap_id_ood: f64,
    pub decomposition_id: LossDecomposition,
    /// `||P_dec - P_ood||_F` when a dictionary is supplied.
    pub gap_dec: Option<f64>,
    pub overlap_dec_ood: Option<f64>,
    pub overlap_dec_id: Option<f64>,
    pub decomposition_dec: Option<LossDecomposition>,
    pub bounds: Vec<BoundReport>,
    pub warnings: Vec<String>,
}

impl DiagnosticReport {
    pub fn violations(&self) -> usize {
        self.bounds.iter().filter(|b| b.violated()).count()
    }
}

pub fn diagnose(
    m_id: &SecondMoment,
    m_ood: &SecondMoment,
    dict: Option<&Dictionary>,
    r: usize,
) -> Result<DiagnosticReport> {
    let pi_id = m_id.top_r_eigenbasis(r)?;
    let pi_ood = m_ood.top_r_eigenbasis(r)?;
    let mut warnings: Vec<String> = [pi_id.warning(), pi_ood.warning()]
        .into_iter()
        .flatten()
        .map(str::to_string)
        .collect();
    let shift = second_moment_shift(m_id, m_ood)?;
    let id_norm = m_id.matrix().norm();
    let mut bounds = vec![check_gap_bound(m_id, m_ood, r)?, check_corollary(m_id, m_ood, r)?];
    let (lo, hi) = check_excess_bounds(m_ood, &pi_id, r)?;
    bounds.push(lo);
    bounds.push(hi);
    bounds.push(check_theorem_improvement(m_ood, &pi_id, &pi_ood, r)?);

    let (mut gap_dec, mut ov_dec_ood, mut ov_dec_id, mut dec_dec) = (None, None, None, None);
    if let Some(dict) = dict {
        if dict.d() != m_ood.dim() {
            return Err(GaeError::dims("dictionary output width", m_ood.dim(), dict.d()));
        }
        let pi_dec = explainer_subspace(dict.w_dec(), r)?;
        if let Some(w) = pi_dec.warning() {
            warnings.push(w.to_string());
        }
        gap_dec = Some(projector_distance(&pi_dec, &pi_ood)?);
        ov_dec_ood = Some(subspace_overlap(&pi_dec, &pi_ood)?);
        ov_dec_id = Some(subspace_overlap(&pi_dec, &pi_id)?);
        dec_dec = Some(decompose_loss(m_ood, &pi_dec, r)?);
        let (lo, hi) = check_excess_bounds(m_ood, &pi_dec, r)?;
        bounds.push(BoundReport {
            bound: format!("{} (decoder subspace)", lo.bound),
            ..lo
        });
        bounds.push(BoundReport {
            bound: format!("{} (decoder subspace)", hi.bound),
            ..hi
        });
    }

    Ok(DiagnosticReport {
        rank: r,
        shift_norm: shift,
        normalized_shift: if id_norm > 0.0 { shift / id_norm } else { 0.0 },
        gamma_id: m_id.eigengap(r)?,
        gamma_ood: m_ood.eigengap(r)?,
        gap_id: projector_distance(&pi_id, &pi_ood)?,
        overlap_id_ood: subspace_overlap(&pi_id, &pi_ood)?,
        decomposition_id: decompose_loss(m_ood, &pi_id, r)?,
        gap_dec,
        overlap_dec_ood: ov_dec_ood,
        overlap_dec_id: ov_dec_id,
        decomposition_dec: dec_dec,
        bounds,
        warnings,
    })
}
