// SPDX-License-Identifier: MIT OR Apache-2.0

//! Randomized property suites.
//!
//! Every trial draws its instance from `derive_seed(master, stream)`, so a
//! failing trial can be replayed from the seed recorded in its
//! [`TrialFailure`]. A [`Fault`] deliberately breaks one computation to check
//! that the suites actually notice.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    check_corollary, check_excess_bounds, check_gap_bound, check_theorem_improvement, decompose_loss,
    projection_loss,
};
use crate::error::{GaeError, Result};
use crate::explainer::SparseCodes;
use crate::gae::{decoder_refit, procrustes_rotation};
use crate::rng::{derive_seed, gaussian_matrix, random_orthonormal, seeded, Rng};
use crate::spectral::{
    explainer_subspace, principal_angles, projector_distance, subspace_overlap, SecondMoment, Subspace,
};

/// Grid points per family (rotations and reflections) in the Procrustes oracle.
pub const GRID_POINTS: usize = 1800;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Uses `T*^T` in place of `T*`.
    TransposedRotation,
    /// Flips the sign of the geometric penalty in the refit gradient.
    FlippedPenaltySign,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fault::TransposedRotation => "transposed-rotation",
            Fault::FlippedPenaltySign => "flipped-penalty-sign",
        })
    }
}

impl FromStr for Fault {
    type Err = GaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transposed-rotation" => Ok(Fault::TransposedRotation),
            "flipped-penalty-sign" => Ok(Fault::FlippedPenaltySign),
            other => Err(GaeError::InvalidParameter(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 2026,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    /// Replays the trial's instance.
    pub seed: u64,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub invariant: &'static str,
    pub trials: usize,
    /// Largest normalized deviation seen (0 is exact).
    pub worst: f64,
    pub failures: Vec<TrialFailure>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn failed_suites(&self) -> Vec<&'static str> {
        self.suites.iter().filter(|s| !s.passed()).map(|s| s.name).collect()
    }

    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.name == name)
    }
}

/// One trial's verdict: normalized deviation and tolerance.
struct Check {
    deviation: f64,
    tolerance: f64,
    detail: String,
}

type TrialFn = fn(&mut Rng, Option<Fault>) -> Result<Check>;

struct Suite {
    name: &'static str,
    invariant: &'static str,
    /// Trials per configured trial count, as (numerator, denominator).
    scale: (usize, usize),
    run: TrialFn,
}

const SUITES: &[Suite] = &[
    Suite {
        name: "distance-angles",
        invariant: "||P_a - P_b||_F^2 = 2 sum sin^2(theta)",
        scale: (1, 1),
        run: trial_distance_angles,
    },
    Suite {
        name: "overlap-distance",
        invariant: "||P_a - P_b||_F^2 = 2 r (1 - overlap)",
        scale: (1, 1),
        run: trial_overlap_distance,
    },
    Suite {
        name: "loss-additivity",
        invariant: "total = irreducible + explainer-dependent",
        scale: (1, 1),
        run: trial_additivity,
    },
    Suite {
        name: "ky-fan",
        invariant: "explainer-dependent loss >= 0 for every rank-r projector",
        scale: (10, 1),
        run: trial_ky_fan,
    },
    Suite {
        name: "bounds",
        invariant: "gap, excess, corollary and improvement bounds hold",
        scale: (1, 1),
        run: trial_bounds,
    },
    Suite {
        name: "procrustes-grid",
        invariant: "closed-form rotation beats every grid rotation and reflection",
        scale: (1, 2),
        run: trial_procrustes_grid,
    },
    Suite {
        name: "procrustes-trace",
        invariant: "tr(G T*) = sum of singular values of G and T* orthogonal",
        scale: (1, 1),
        run: trial_procrustes_trace,
    },
    Suite {
        name: "refit-stationarity",
        invariant: "refit gradient vanishes",
        scale: (1, 1),
        run: trial_refit_stationarity,
    },
    Suite {
        name: "refit-finite-difference",
        invariant: "central differences of the refit objective vanish",
        scale: (1, 2),
        run: trial_refit_fd,
    },
    Suite {
        name: "refit-ols-limit",
        invariant: "refit tends to least squares as the ridge levels vanish",
        scale: (1, 2),
        run: trial_refit_ols,
    },
    Suite {
        name: "loss-monte-carlo",
        invariant: "trace-form loss matches sampled loss within 2%",
        scale: (1, 10),
        run: trial_monte_carlo,
    },
];

/// Names of all suites in run order.
pub fn suite_names() -> Vec<&'static str> {
    SUITES.iter().map(|s| s.name).collect()
}

pub fn run_all(config: &VerifyConfig) -> Result<VerifyReport> {
    let suites = SUITES
        .iter()
        .enumerate()
        .map(|(idx, suite)| run_suite_at(idx, suite, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        config: config.clone(),
        suites,
    })
}

/// Runs one suite by name.
pub fn run_suite(name: &str, config: &VerifyConfig) -> Result<SuiteResult> {
    let (idx, suite) = SUITES
        .iter()
        .enumerate()
        .find(|(_, s)| s.name == name)
        .ok_or_else(|| GaeError::InvalidParameter(format!("unknown suite `{name}`")))?;
    run_suite_at(idx, suite, config)
}

fn run_suite_at(idx: usize, suite: &Suite, config: &VerifyConfig) -> Result<SuiteResult> {
    let trials = (config.trials * suite.scale.0 / suite.scale.1).max(1);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for trial in 0..trials {
        let seed = trial_seed(config.seed, idx, trial);
        let check = (suite.run)(&mut seeded(seed), config.fault)?;
        let normalized = check.deviation / check.tolerance;
        worst = worst.max(if normalized.is_nan() { f64::INFINITY } else { normalized });
        if !(check.deviation <= check.tolerance) {
            failures.push(TrialFailure {
                trial,
                seed,
                detail: check.detail,
            });
        }
    }
    Ok(SuiteResult {
        name: suite.name,
        invariant: suite.invariant,
        trials,
        worst,
        failures,
    })
}

/// Seed of trial `trial` in suite `suite`; replay with [`replay_trial`].
pub fn trial_seed(master: u64, suite: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(master, suite as u64), trial as u64)
}

/// Reruns a single trial from its recorded seed; `Ok(None)` means it passes.
pub fn replay_trial(name: &str, seed: u64, fault: Option<Fault>) -> Result<Option<String>> {
    let suite = SUITES
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| GaeError::InvalidParameter(format!("unknown suite `{name}`")))?;
    let check = (suite.run)(&mut seeded(seed), fault)?;
    Ok((!(check.deviation <= check.tolerance)).then_some(check.detail))
}

fn random_psd(rng: &mut Rng, d: usize) -> SecondMoment {
    let a = gaussian_matrix(rng, d, d, 1.0);
    SecondMoment::from_matrix(&a * a.transpose() / d as f64).expect("finite")
}

/// PSD matrix with eigenvalues spread enough that every gap exceeds `min_gap`.
fn gapped_psd(rng: &mut Rng, d: usize, min_gap: f64) -> DMatrix<f64> {
    let q = random_orthonormal(rng, d, d);
    let mut level = 0.0;
    let mut values = vec![0.0; d];
    for v in values.iter_mut().rev() {
        level += min_gap + rng.random::<f64>();
        *v = level;
    }
    &q * DMatrix::from_diagonal(&DVector::from_vec(values)) * q.transpose()
}

fn random_subspace(rng: &mut Rng, d: usize, r: usize) -> Subspace {
    Subspace::from_orthonormal(random_orthonormal(rng, d, r)).expect("orthonormal")
}

fn trial_distance_angles(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let d = rng.random_range(2..=10);
    let r = rng.random_range(1..=d);
    let (a, b) = (random_subspace(rng, d, r), random_subspace(rng, d, r));
    let dist = projector_distance(&a, &b)?;
    let sines: f64 = principal_angles(&a, &b)?.iter().map(|t| t.sin().powi(2)).sum();
    let dev = (dist * dist - 2.0 * sines).abs();
    Ok(Check {
        deviation: dev,
        tolerance: 1e-8,
        detail: format!("d = {d}, r = {r}: distance^2 = {}, 2 sum sin^2 = {}", dist * dist, 2.0 * sines),
    })
}

fn trial_overlap_distance(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let d = rng.random_range(2..=10);
    let r = rng.random_range(1..=d);
    let (a, b) = (random_subspace(rng, d, r), random_subspace(rng, d, r));
    let dist = projector_distance(&a, &b)?;
    let overlap = subspace_overlap(&a, &b)?;
    // Squared form: the square root amplifies rounding near zero distance.
    let implied = 2.0 * r as f64 * (1.0 - overlap);
    Ok(Check {
        deviation: (dist * dist - implied).abs(),
        tolerance: 1e-8,
        detail: format!("d = {d}, r = {r}: distance^2 = {}, 2 r (1 - overlap) = {implied}", dist * dist),
    })
}

fn trial_additivity(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let d = rng.random_range(2..=10);
    let r = rng.random_range(1..d);
    let m = random_psd(rng, d);
    let s = random_subspace(rng, d, r);
    let dec = decompose_loss(&m, &s, r)?;
    let direct = projection_loss(&m, &s)?;
    let dev = (dec.total - dec.irreducible - dec.explainer_dependent).abs().max((dec.total - direct).abs());
    Ok(Check {
        deviation: dev,
        tolerance: 1e-8 * dec.total.max(1e-300),
        detail: format!("d = {d}, r = {r}: {dec:?}, direct loss = {direct}"),
    })
}

fn trial_ky_fan(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let d = rng.random_range(2..=10);
    let r = rng.random_range(1..d);
    let m = random_psd(rng, d);
    let s = random_subspace(rng, d, r);
    let dec = decompose_loss(&m, &s, r)?;
    Ok(Check {
        deviation: -dec.explainer_dependent,
        tolerance: 1e-8 * dec.total,
        detail: format!("d = {d}, r = {r}: explainer-dependent = {}", dec.explainer_dependent),
    })
}

fn trial_bounds(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let d = rng.random_range(3..=8);
    let r = rng.random_range(1..d);
    let base = gapped_psd(rng, d, 0.1);
    let noise_scale = 0.3 * rng.random::<f64>();
    let noise = gaussian_matrix(rng, d, d, noise_scale);
    let m_id = SecondMoment::from_matrix(base.clone())?;
    let shifted = &base + (&noise + noise.transpose()) * 0.5;
    // Keep the shifted moment PSD.
    let eig = shifted.symmetric_eigen();
    let clipped = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)))
        * eig.eigenvectors.transpose();
    let m_ood = SecondMoment::from_matrix(clipped)?;
    let pi_id = m_id.top_r_eigenbasis(r)?;
    let pi_gae = m_ood.top_r_eigenbasis(r)?;
    let probe = random_subspace(rng, d, r);
    let (lower, upper) = check_excess_bounds(&m_ood, &probe, r)?;
    let reports = [
        check_gap_bound(&m_id, &m_ood, r)?,
        check_corollary(&m_id, &m_ood, r)?,
        lower,
        upper,
        check_theorem_improvement(&m_ood, &pi_id, &pi_gae, r)?,
    ];
    let violated: Vec<_> = reports.iter().filter(|b| b.violated()).collect();
    let worst = reports
        .iter()
        .filter(|b| b.applicable)
        .map(|b| -b.slack / b.lhs.abs().max(b.rhs.abs()).max(1.0))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Check {
        deviation: if violated.is_empty() { worst.min(1e-8) } else { worst },
        tolerance: 1e-8,
        detail: format!(
            "d = {d}, r = {r}: violated {:?}",
            violated.iter().map(|b| (&b.bound, b.lhs, b.rhs)).collect::<Vec<_>>()
        ),
    })
}

fn procrustes_instance(rng: &mut Rng, r: usize) -> Result<(DMatrix<f64>, Subspace, Subspace)> {
    let d = rng.random_range(r + 1..=8);
    let k = rng.random_range(r..=12);
    let w = gaussian_matrix(rng, d, k, 1.0);
    let u_dec = explainer_subspace(&w, r)?;
    let u_ood = random_subspace(rng, d, r);
    Ok((w, u_dec, u_ood))
}

fn rotated_misfit(w: &DMatrix<f64>, u_dec: &Subspace, u_ood: &Subspace, t: &DMatrix<f64>) -> f64 {
    (u_ood.basis() * t * u_dec.basis().tr_mul(w) - w).norm_squared()
}

fn trial_procrustes_grid(rng: &mut Rng, fault: Option<Fault>) -> Result<Check> {
    let (w, u_dec, u_ood) = procrustes_instance(rng, 2)?;
    let sol = procrustes_rotation(&w, &u_dec, &u_ood)?;
    let t = match fault {
        Some(Fault::TransposedRotation) => sol.rotation.transpose(),
        _ => sol.rotation,
    };
    let best = rotated_misfit(&w, &u_dec, &u_ood, &t);
    let mut grid_min = f64::INFINITY;
    for i in 0..GRID_POINTS {
        let theta = 2.0 * PI * i as f64 / GRID_POINTS as f64;
        let (c, s) = (theta.cos(), theta.sin());
        for t in [
            DMatrix::from_row_slice(2, 2, &[c, -s, s, c]),
            DMatrix::from_row_slice(2, 2, &[c, s, s, -c]),
        ] {
            grid_min = grid_min.min(rotated_misfit(&w, &u_dec, &u_ood, &t));
        }
    }
    Ok(Check {
        deviation: best - grid_min,
        tolerance: 1e-8,
        detail: format!("closed form misfit {best}, grid minimum {grid_min}"),
    })
}

fn trial_procrustes_trace(rng: &mut Rng, fault: Option<Fault>) -> Result<Check> {
    let r = rng.random_range(1..=4);
    let (w, u_dec, u_ood) = procrustes_instance(rng, r)?;
    let sol = procrustes_rotation(&w, &u_dec, &u_ood)?;
    let t = match fault {
        Some(Fault::TransposedRotation) => sol.rotation.transpose(),
        _ => sol.rotation,
    };
    let trace = (&sol.cross_gram * &t).trace();
    let sum: f64 = sol.singular_values.iter().sum();
    let ortho = (t.tr_mul(&t) - DMatrix::identity(r, r)).norm();
    Ok(Check {
        // Orthogonality is held to 1e-10, the trace to 1e-8.
        deviation: ((trace - sum).abs() / sum.max(1.0)).max(ortho * 1e2),
        tolerance: 1e-8,
        detail: format!("r = {r}: tr(G T*) = {trace}, sum sigma = {sum}, ||T^T T - I|| = {ortho}"),
    })
}

struct RefitInstance {
    w_rot: DMatrix<f64>,
    pi: Subspace,
    h: DMatrix<f64>,
    z: DMatrix<f64>,
    lambda_geom: f64,
    lambda_pres: f64,
}

fn refit_instance(rng: &mut Rng, n: usize) -> RefitInstance {
    let d = rng.random_range(3..=8);
    let k = rng.random_range(2..=10);
    let r = rng.random_range(1..d);
    let z = gaussian_matrix(rng, n, k, 1.0).map(|v| v.max(0.0));
    let h = gaussian_matrix(rng, n, d, 1.0) + gaussian_matrix(rng, n, 1, 1.0) * DMatrix::from_element(1, d, 0.5);
    RefitInstance {
        w_rot: gaussian_matrix(rng, d, k, 1.0),
        pi: random_subspace(rng, d, r),
        h,
        z,
        lambda_geom: rng.random_range(0.01..1.0),
        lambda_pres: rng.random_range(0.01..1.0),
    }
}

/// `(1/n) sum ||h - W z - b||^2 + lg ||(I - P) W||^2 + lp ||W - W_rot||^2`.
fn refit_objective(inst: &RefitInstance, w: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
    let n = inst.h.nrows() as f64;
    let mut resid = &inst.z * w.transpose() - &inst.h;
    for mut row in resid.row_iter_mut() {
        row += b.transpose();
    }
    let outside = w - inst.pi.basis() * inst.pi.basis().tr_mul(w);
    resid.norm_squared() / n + inst.lambda_geom * outside.norm_squared() + inst.lambda_pres * (w - &inst.w_rot).norm_squared()
}

fn refit_gradient(inst: &RefitInstance, w: &DMatrix<f64>, b: &DVector<f64>, geom_sign: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = inst.h.nrows() as f64;
    let mut resid = &inst.z * w.transpose() - &inst.h;
    for mut row in resid.row_iter_mut() {
        row += b.transpose();
    }
    let outside = w - inst.pi.basis() * inst.pi.basis().tr_mul(w);
    let gw = resid.tr_mul(&inst.z) * (2.0 / n)
        + outside * (2.0 * geom_sign * inst.lambda_geom)
        + (w - &inst.w_rot) * (2.0 * inst.lambda_pres);
    let gb = DVector::from_iterator(w.nrows(), resid.column_iter().map(|c| 2.0 * c.sum() / n));
    (gw, gb)
}

fn solve_instance(inst: &RefitInstance) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let codes = SparseCodes::from_dense(&inst.z);
    let refit = decoder_refit(&inst.w_rot, &inst.pi, &inst.h, &codes, inst.lambda_geom, inst.lambda_pres)?;
    Ok((refit.w_dec, refit.b_dec))
}

fn trial_refit_stationarity(rng: &mut Rng, fault: Option<Fault>) -> Result<Check> {
    let inst = refit_instance(rng, 60);
    let (w, b) = solve_instance(&inst)?;
    let sign = if fault == Some(Fault::FlippedPenaltySign) { -1.0 } else { 1.0 };
    let (gw, gb) = refit_gradient(&inst, &w, &b, sign);
    let n = inst.h.nrows() as f64;
    let scale = (inst.h.tr_mul(&inst.z).norm() * 2.0 / n + inst.lambda_pres * inst.w_rot.norm()).max(1.0);
    let resid = (gw.norm_squared() + gb.norm_squared()).sqrt() / scale;
    Ok(Check {
        deviation: resid,
        tolerance: 1e-8,
        detail: format!("relative gradient norm {resid:e}"),
    })
}

fn trial_refit_fd(rng: &mut Rng, fault: Option<Fault>) -> Result<Check> {
    let inst = refit_instance(rng, 60);
    let (w, b) = solve_instance(&inst)?;
    let objective = refit_objective(&inst, &w, &b);
    let step = 1e-5;
    let (d, k) = w.shape();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..k + 1));
        let deriv = if j < k {
            let (mut plus, mut minus) = (w.clone(), w.clone());
            plus[(i, j)] += step;
            minus[(i, j)] -= step;
            (refit_objective(&inst, &plus, &b) - refit_objective(&inst, &minus, &b)) / (2.0 * step)
        } else {
            let (mut plus, mut minus) = (b.clone(), b.clone());
            plus[i] += step;
            minus[i] -= step;
            (refit_objective(&inst, &w, &plus) - refit_objective(&inst, &w, &minus)) / (2.0 * step)
        };
        let adjusted = if fault == Some(Fault::FlippedPenaltySign) && j < k {
            // Gradient of the objective with the geometric penalty negated.
            let outside = &w - inst.pi.basis() * inst.pi.basis().tr_mul(&w);
            deriv - 4.0 * inst.lambda_geom * outside[(i, j)]
        } else {
            deriv
        };
        worst = worst.max(adjusted.abs());
    }
    Ok(Check {
        deviation: worst,
        tolerance: 1e-6 * objective.max(1.0),
        detail: format!("largest central difference {worst:e} at objective {objective}"),
    })
}

fn trial_refit_ols(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    let mut inst = refit_instance(rng, 200);
    inst.lambda_geom = 1e-8;
    inst.lambda_pres = 1e-8;
    let (w, b) = solve_instance(&inst)?;
    // Normal equations of [Z 1] against H.
    let n = inst.h.nrows();
    let k = inst.z.ncols();
    let mut design = DMatrix::from_element(n, k + 1, 1.0);
    design.columns_mut(0, k).copy_from(&inst.z);
    let gram = design.tr_mul(&design);
    let rhs = design.tr_mul(&inst.h);
    let coef = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| GaeError::InvalidParameter("least-squares design is singular".into()))?;
    let w_ols = coef.rows(0, k).transpose();
    let b_ols = coef.row(k).transpose();
    let dev = ((&w - &w_ols).norm_squared() + (&b - &b_ols).norm_squared()).sqrt();
    Ok(Check {
        deviation: dev,
        tolerance: 1e-5,
        detail: format!("||refit - ols|| = {dev:e}"),
    })
}

fn trial_monte_carlo(rng: &mut Rng, _: Option<Fault>) -> Result<Check> {
    const SAMPLES: usize = 100_000;
    let d = rng.random_range(3..=6);
    let r = rng.random_range(1..d);
    let factor = gaussian_matrix(rng, d, d, 1.0);
    let m = SecondMoment::from_matrix(&factor * factor.transpose())?;
    let s = random_subspace(rng, d, r);
    let exact = projection_loss(&m, &s)?;
    let h = gaussian_matrix(rng, SAMPLES, d, 1.0) * factor.transpose();
    let resid = &h - s.project(&h.transpose()).transpose();
    let sampled = resid.norm_squared() / SAMPLES as f64;
    Ok(Check {
        deviation: (sampled - exact).abs(),
        tolerance: 0.02 * exact,
        detail: format!("d = {d}, r = {r}: trace form {exact}, sampled {sampled}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fault: Option<Fault>) -> VerifyConfig {
        VerifyConfig {
            trials: 20,
            seed: 9,
            fault,
        }
    }

    #[test]
    fn clean_run_passes() {
        let report = run_all(&small(None)).unwrap();
        assert!(report.passed(), "{:?}", report.failed_suites());
        assert_eq!(report.suite("ky-fan").unwrap().trials, 200);
    }

    #[test]
    fn transposed_rotation_is_caught() {
        let report = run_all(&small(Some(Fault::TransposedRotation))).unwrap();
        let failed = report.failed_suites();
        assert!(failed.contains(&"procrustes-grid"), "{failed:?}");
        assert!(failed.contains(&"procrustes-trace"), "{failed:?}");
        assert!(!failed.contains(&"ky-fan"));
    }

    #[test]
    fn flipped_penalty_is_caught() {
        let cfg = small(Some(Fault::FlippedPenaltySign));
        assert!(!run_suite("refit-stationarity", &cfg).unwrap().passed());
        assert!(!run_suite("refit-finite-difference", &cfg).unwrap().passed());
    }

    #[test]
    fn failures_replay_from_seed() {
        let cfg = small(Some(Fault::TransposedRotation));
        let res = run_suite("procrustes-trace", &cfg).unwrap();
        let first = &res.failures[0];
        assert!(replay_trial("procrustes-trace", first.seed, cfg.fault).unwrap().is_some());
        assert!(replay_trial("procrustes-trace", first.seed, None).unwrap().is_none());
    }

    #[test]
    fn same_seed_same_trials() {
        let a = run_suite("bounds", &small(None)).unwrap();
        let b = run_suite("bounds", &small(None)).unwrap();
        assert_eq!(a.worst.to_bits(), b.worst.to_bits());
    }

    #[test]
    fn fault_names_round_trip() {
        for f in [Fault::TransposedRotation, Fault::FlippedPenaltySign] {
            assert_eq!(f.to_string().parse::<Fault>().unwrap(), f);
        }
        assert!("nope".parse::<Fault>().is_err());
        assert!(run_suite("nope", &small(None)).is_err());
    }
}
