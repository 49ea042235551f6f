// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal faithfulness metrics under feature ablation through a linear
//! logit head: normalized comprehensiveness, normalized AOPC, cross-entropy
//! change, and direct logit attribution.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GaeError, Result};
use crate::explainer::{ActivationBatch, Dictionary};

pub const DEFAULT_BUDGETS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const DEFAULT_M_STAR: usize = 32;
pub const DEFAULT_EXCLUSION_THRESHOLD: f64 = 0.1;

/// Affine map from activations to logits: `weight * h + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitHead {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
}

impl LogitHead {
    /// `weight` is `vocab x d`.
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(GaeError::InvalidParameter("logit head must be non-empty".into()));
        }
        if bias.len() != weight.nrows() {
            return Err(GaeError::dims("logit head bias", weight.nrows(), bias.len()));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("logit head"));
        }
        Ok(Self { weight, bias })
    }

    pub fn d(&self) -> usize {
        self.weight.ncols()
    }

    pub fn vocab(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn logits(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.weight * h + &self.bias
    }

    /// Logit of a single token.
    pub fn logit(&self, h: &DVector<f64>, target: usize) -> f64 {
        self.weight.row(target).transpose().dot(h) + self.bias[target]
    }
}

fn check_head(dict: &Dictionary, head: &LogitHead, target: usize) -> Result<()> {
    if head.d() != dict.d() {
        return Err(GaeError::dims("logit head width", dict.d(), head.d()));
    }
    if target >= head.vocab() {
        return Err(GaeError::IndexOutOfRange {
            index: target,
            len: head.vocab(),
        });
    }
    Ok(())
}

/// Per-feature direct effect `z_j <w_dec[:, j], head[target]>` for all features.
fn attributions(dict: &Dictionary, head: &LogitHead, z: &DVector<f64>, target: usize) -> Vec<f64> {
    let dir = head.weight().row(target).transpose();
    let per_col = dict.w_dec().tr_mul(&dir);
    z.iter().zip(per_col.iter()).map(|(zj, a)| zj * a).collect()
}

/// Direct logit attribution of feature `j`.
pub fn dla(dict: &Dictionary, head: &LogitHead, h: &DVector<f64>, target: usize, j: usize) -> Result<f64> {
    check_head(dict, head, target)?;
    if j >= dict.k() {
        return Err(GaeError::IndexOutOfRange { index: j, len: dict.k() });
    }
    let z = dict.encode(h)?;
    let col = dict.w_dec().column(j);
    Ok(z[j] * col.dot(&head.weight().row(target).transpose()))
}

/// All features ordered by attribution, largest first, lower index on ties.
pub fn rank_features(dict: &Dictionary, head: &LogitHead, h: &DVector<f64>, target: usize) -> Result<Vec<usize>> {
    check_head(dict, head, target)?;
    let z = dict.encode(h)?;
    Ok(order_by_score(&attributions(dict, head, &z, target)))
}

fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // partial_cmp keeps -0.0 and 0.0 tied.
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationOutcome {
    /// Target logit under the full reconstruction.
    pub l_full: f64,
    /// Target logit with every feature zeroed (decoder bias kept).
    pub l_empty: f64,
    /// Target logit with the top-`m` ranked features zeroed, per budget.
    pub l_at_budget: BTreeMap<usize, f64>,
    pub excluded: bool,
    /// Requested budgets larger than the dictionary.
    pub skipped_budgets: Vec<usize>,
}

/// Zero-ablates the top-ranked features at each budget and reads the
/// target logit through `head`.
pub fn ablate_and_score(
    dict: &Dictionary,
    head: &LogitHead,
    h: &DVector<f64>,
    target: usize,
    budgets: &[usize],
    exclusion_threshold: f64,
) -> Result<AblationOutcome> {
    check_head(dict, head, target)?;
    let z = dict.encode(h)?;
    let order = order_by_score(&attributions(dict, head, &z, target));
    let logit_of = |code: &DVector<f64>| -> Result<f64> { Ok(head.logit(&dict.reconstruct(code)?, target)) };
    let l_full = logit_of(&z)?;
    let l_empty = logit_of(&DVector::zeros(dict.k()))?;

    let mut wanted: Vec<usize> = budgets.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let mut l_at_budget = BTreeMap::new();
    let mut skipped_budgets = Vec::new();
    for m in wanted {
        if m == 0 {
            return Err(GaeError::InvalidParameter("ablation budgets must be >= 1".into()));
        }
        if m > dict.k() {
            skipped_budgets.push(m);
            continue;
        }
        let mut masked = z.clone();
        for &j in &order[..m] {
            masked[j] = 0.0;
        }
        l_at_budget.insert(m, logit_of(&masked)?);
    }
    Ok(AblationOutcome {
        l_full,
        l_empty,
        l_at_budget,
        excluded: (l_full - l_empty).abs() < exclusion_threshold,
        skipped_budgets,
    })
}

/// `(l_full - l_m) / |l_full - l_empty|`; `None` for excluded outcomes.
pub fn ncomp(outcome: &AblationOutcome, m_star: usize) -> Result<Option<f64>> {
    let l_m = *outcome.l_at_budget.get(&m_star).ok_or_else(|| {
        GaeError::InvalidParameter(format!("budget m* = {m_star} was not evaluated"))
    })?;
    if outcome.excluded {
        return Ok(None);
    }
    Ok(Some((outcome.l_full - l_m) / (outcome.l_full - outcome.l_empty).abs()))
}

/// Mean normalized drop over the requested budgets that were evaluated.
/// `None` for excluded outcomes or when no requested budget was evaluated.
pub fn naopc(outcome: &AblationOutcome, budgets: &[usize]) -> Option<f64> {
    if outcome.excluded {
        return None;
    }
    let denom = (outcome.l_full - outcome.l_empty).abs();
    let drops: Vec<f64> = budgets
        .iter()
        .filter_map(|m| outcome.l_at_budget.get(m))
        .map(|l| (outcome.l_full - l) / denom)
        .collect();
    if drops.is_empty() {
        return None;
    }
    Some(drops.iter().sum::<f64>() / drops.len() as f64)
}

fn cross_entropy(logits: &DVector<f64>, target: usize) -> f64 {
    let max = logits.max();
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Mean cross-entropy with reconstructed activations minus mean
/// cross-entropy with the true ones.
pub fn delta_ce(dict: &Dictionary, head: &LogitHead, batch: &ActivationBatch, targets: &[usize]) -> Result<f64> {
    if batch.is_empty() {
        return Err(GaeError::EmptyBatch);
    }
    if targets.len() != batch.n() {
        return Err(GaeError::dims("target tokens", batch.n(), targets.len()));
    }
    for &t in targets {
        check_head(dict, head, t)?;
    }
    let recon = dict.forward_batch(batch.data())?;
    let truth = batch.target();
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let h = truth.row(i).transpose();
        let h_hat = recon.row(i).transpose();
        total += cross_entropy(&head.logits(&h_hat), t) - cross_entropy(&head.logits(&h), t);
    }
    Ok(total / batch.n() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub budgets: Vec<usize>,
    pub m_star: usize,
    pub exclusion_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budgets: DEFAULT_BUDGETS.to_vec(),
            m_star: DEFAULT_M_STAR,
            exclusion_threshold: DEFAULT_EXCLUSION_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalItem {
    pub index: usize,
    pub target: usize,
    pub l_full: f64,
    pub l_empty: f64,
    pub excluded: bool,
    pub ncomp: Option<f64>,
    pub naopc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n_items: usize,
    pub n_excluded: usize,
    /// Budgets actually evaluated (requested budgets that fit the dictionary).
    pub budgets_used: Vec<usize>,
    pub m_star: usize,
    pub mean_ncomp: Option<f64>,
    pub mean_naopc: Option<f64>,
    pub delta_ce: f64,
    pub items: Vec<EvalItem>,
    pub warnings: Vec<String>,
}

/// Scores every row of `batch` (last-position activations) against its
/// target token and aggregates over non-excluded items.
pub fn evaluate(
    dict: &Dictionary,
    head: &LogitHead,
    batch: &ActivationBatch,
    targets: &[usize],
    config: &EvalConfig,
) -> Result<EvalReport> {
    if batch.is_empty() {
        return Err(GaeError::EmptyBatch);
    }
    if targets.len() != batch.n() {
        return Err(GaeError::dims("target tokens", batch.n(), targets.len()));
    }
    let mut warnings = Vec::new();
    let budgets_used: Vec<usize> = config.budgets.iter().copied().filter(|&m| m <= dict.k()).collect();
    let skipped: Vec<usize> = config.budgets.iter().copied().filter(|&m| m > dict.k()).collect();
    if !skipped.is_empty() {
        warnings.push(format!("budgets {skipped:?} exceed the dictionary size {} and were skipped", dict.k()));
    }
    let m_star_ok = config.m_star >= 1 && config.m_star <= dict.k();
    if !m_star_ok {
        warnings.push(format!("m* = {} exceeds the dictionary size {}; nComp not reported", config.m_star, dict.k()));
    }
    let mut ablation_budgets = budgets_used.clone();
    if m_star_ok {
        ablation_budgets.push(config.m_star);
    }

    let items: Vec<EvalItem> = (0..batch.n())
        .into_par_iter()
        .map(|i| -> Result<EvalItem> {
            let h = batch.data().row(i).transpose();
            let out = ablate_and_score(dict, head, &h, targets[i], &ablation_budgets, config.exclusion_threshold)?;
            Ok(EvalItem {
                index: i,
                target: targets[i],
                l_full: out.l_full,
                l_empty: out.l_empty,
                excluded: out.excluded,
                ncomp: if m_star_ok { ncomp(&out, config.m_star)? } else { None },
                naopc: naopc(&out, &budgets_used),
            })
        })
        .collect::<Result<_>>()?;

    let mean = |vals: Vec<f64>| -> Option<f64> {
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let mean_ncomp = mean(items.iter().filter_map(|it| it.ncomp).collect());
    let mean_naopc = mean(items.iter().filter_map(|it| it.naopc).collect());
    let n_excluded = items.iter().filter(|it| it.excluded).count();
    for w in &warnings {
        warn!("{w}");
    }
    Ok(EvalReport {
        n_items: items.len(),
        n_excluded,
        budgets_used,
        m_star: config.m_star,
        mean_ncomp,
        mean_naopc,
        delta_ce: delta_ce(dict, head, batch, targets)?,
        items,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explainer::{ExplainerKind, Sparsifier};
    use crate::rng::{gaussian_matrix, seeded};

    fn random_setup(seed: u64, d: usize, k: usize, vocab: usize) -> (Dictionary, LogitHead) {
        let mut rng = seeded(seed);
        let dict = Dictionary::new(
            gaussian_matrix(&mut rng, k, d, 1.0),
            DVector::from_column_slice(gaussian_matrix(&mut rng, k, 1, 0.2).as_slice()),
            gaussian_matrix(&mut rng, d, k, 1.0),
            DVector::from_column_slice(gaussian_matrix(&mut rng, d, 1, 0.2).as_slice()),
            Sparsifier::Relu,
            ExplainerKind::Sae,
        )
        .unwrap();
        let head = LogitHead::new(
            gaussian_matrix(&mut rng, vocab, d, 1.0),
            DVector::from_column_slice(gaussian_matrix(&mut rng, vocab, 1, 0.2).as_slice()),
        )
        .unwrap();
        (dict, head)
    }

    fn outcome(l_full: f64, l_empty: f64, at: &[(usize, f64)]) -> AblationOutcome {
        AblationOutcome {
            l_full,
            l_empty,
            l_at_budget: at.iter().copied().collect(),
            excluded: (l_full - l_empty).abs() < DEFAULT_EXCLUSION_THRESHOLD,
            skipped_budgets: vec![],
        }
    }

    fn identity_setup(d: usize) -> Dictionary {
        Dictionary::new(
            DMatrix::identity(d, d),
            DVector::zeros(d),
            DMatrix::identity(d, d),
            DVector::zeros(d),
            Sparsifier::Relu,
            ExplainerKind::Sae,
        )
        .unwrap()
    }

    #[test]
    fn single_active_feature_ranks_first() {
        let dict = identity_setup(3);
        let head = LogitHead::new(DMatrix::from_element(1, 3, 1.0), DVector::zeros(1)).unwrap();
        let h = DVector::from_row_slice(&[0.0, 2.0, 0.0]);
        assert_eq!(rank_features(&dict, &head, &h, 0).unwrap()[0], 1);
    }

    #[test]
    fn equal_contributions_rank_lower_index_first() {
        let dict = identity_setup(3);
        let head = LogitHead::new(DMatrix::from_element(1, 3, 1.0), DVector::zeros(1)).unwrap();
        let h = DVector::from_row_slice(&[0.0, 1.0, 1.0]);
        assert_eq!(rank_features(&dict, &head, &h, 0).unwrap()[..2], [1, 2]);
    }

    #[test]
    fn ranking_matches_exhaustive_scoring() {
        let (dict, head) = random_setup(1, 5, 12, 4);
        let h = DVector::from_row_slice(&[0.3, -1.0, 0.8, 1.2, -0.4]);
        let order = rank_features(&dict, &head, &h, 2).unwrap();
        let scores: Vec<f64> = (0..12).map(|j| dla(&dict, &head, &h, 2, j).unwrap()).collect();
        for w in order.windows(2) {
            assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn ablation_matches_masked_forward_oracle() {
        let (dict, head) = random_setup(2, 5, 10, 3);
        let h = DVector::from_row_slice(&[1.0, 0.5, -0.2, 0.7, 0.1]);
        let out = ablate_and_score(&dict, &head, &h, 1, &[1, 3, 10, 20], 0.1).unwrap();
        assert_eq!(out.skipped_budgets, vec![20]);
        let z = dict.encode(&h).unwrap();
        let order = rank_features(&dict, &head, &h, 1).unwrap();
        let loop_logit = |code: &DVector<f64>| {
            let mut acc = head.bias()[1];
            for i in 0..5 {
                let mut hi = dict.b_dec()[i];
                for j in 0..10 {
                    hi += dict.w_dec()[(i, j)] * code[j];
                }
                acc += head.weight()[(1, i)] * hi;
            }
            acc
        };
        assert!((out.l_full - loop_logit(&z)).abs() < 1e-12);
        assert!((out.l_empty - loop_logit(&DVector::zeros(10))).abs() < 1e-12);
        for (&m, &l) in &out.l_at_budget {
            let mut masked = z.clone();
            for &j in &order[..m] {
                masked[j] = 0.0;
            }
            assert!((l - loop_logit(&masked)).abs() < 1e-12);
        }
        assert!((out.l_at_budget[&10] - out.l_empty).abs() < 1e-12);
    }

    #[test]
    fn exact_reconstruction_logit() {
        let dict = identity_setup(3);
        let head = LogitHead::new(DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.0, 1.0, 0.0]), DVector::from_row_slice(&[0.5, 0.0])).unwrap();
        let h = DVector::from_row_slice(&[1.0, 1.0, 2.0]);
        let out = ablate_and_score(&dict, &head, &h, 0, &[1], 0.1).unwrap();
        assert!((out.l_full - head.logit(&h, 0)).abs() < 1e-15);
    }

    #[test]
    fn ncomp_formula() {
        assert_eq!(ncomp(&outcome(2.0, 0.0, &[(32, 0.0)]), 32).unwrap(), Some(1.0));
        assert_eq!(ncomp(&outcome(2.0, 0.0, &[(32, 2.0)]), 32).unwrap(), Some(0.0));
        assert_eq!(ncomp(&outcome(2.0, 0.0, &[(32, 0.5)]), 32).unwrap(), Some(0.75));
        assert_eq!(ncomp(&outcome(0.05, 0.0, &[(32, 0.0)]), 32).unwrap(), None);
        assert!(ncomp(&outcome(2.0, 0.0, &[(16, 0.0)]), 32).is_err());
        // Signed numerator over an absolute denominator.
        assert_eq!(ncomp(&outcome(-1.0, 1.0, &[(32, 0.0)]), 32).unwrap(), Some(-0.5));
    }

    #[test]
    fn naopc_formula() {
        let b = [1, 2, 4];
        assert_eq!(naopc(&outcome(2.0, 0.0, &[(1, 0.0), (2, 0.0), (4, 0.0)]), &b), Some(1.0));
        assert_eq!(naopc(&outcome(2.0, 0.0, &[(1, 2.0), (2, 2.0), (4, 2.0)]), &b), Some(0.0));
        // Drops 0.25, 0.5, 1.0 averaged by hand.
        let v = naopc(&outcome(2.0, 0.0, &[(1, 1.5), (2, 1.0), (4, 0.0)]), &b).unwrap();
        assert!((v - 1.75 / 3.0).abs() < 1e-15);
        let o = outcome(3.0, 1.0, &[(32, 1.5)]);
        assert_eq!(naopc(&o, &[32]), ncomp(&o, 32).unwrap());
    }

    #[test]
    fn dla_basics_and_decomposition() {
        let (dict, head) = random_setup(3, 4, 9, 3);
        let h = DVector::from_row_slice(&[0.5, -0.3, 1.1, 0.2]);
        let z = dict.encode(&h).unwrap();
        for j in 0..9 {
            if z[j] == 0.0 {
                assert_eq!(dla(&dict, &head, &h, 0, j).unwrap(), 0.0);
            }
        }
        let total: f64 = (0..9).map(|j| dla(&dict, &head, &h, 0, j).unwrap()).sum();
        let bias_part = head.weight().row(0).transpose().dot(dict.b_dec()) + head.bias()[0];
        let l0 = head.logit(&dict.forward(&h).unwrap(), 0);
        assert!((total + bias_part - l0).abs() < 1e-10);
        assert!(dla(&dict, &head, &h, 0, 9).is_err());
    }

    #[test]
    fn dla_orthogonal_direction_is_zero() {
        let dict = identity_setup(2);
        let head = LogitHead::new(DMatrix::from_row_slice(1, 2, &[0.0, 1.0]), DVector::zeros(1)).unwrap();
        let h = DVector::from_row_slice(&[3.0, 0.0]);
        assert_eq!(dla(&dict, &head, &h, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn delta_ce_hand_value() {
        // vocab 2, logits (h) = (0, 0), reconstruction maps h to (1, 0).
        let dict = Dictionary::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::zeros(1),
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DVector::from_row_slice(&[1.0]),
            Sparsifier::Relu,
            ExplainerKind::Sae,
        )
        .unwrap();
        let head = LogitHead::new(DMatrix::from_row_slice(2, 1, &[1.0, 0.0]), DVector::zeros(2)).unwrap();
        let batch = ActivationBatch::new(DMatrix::from_row_slice(1, 1, &[0.0])).unwrap();
        let got = delta_ce(&dict, &head, &batch, &[1]).unwrap();
        let expected = ((1f64).exp() + 1.0).ln() - 0.0 - 2f64.ln();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn delta_ce_perfect_reconstruction_is_zero() {
        let dict = identity_setup(3);
        let head = LogitHead::new(DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.5, 0.2, 0.1, 0.0]), DVector::zeros(2)).unwrap();
        let batch = ActivationBatch::new(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.5, 0.5, 0.0])).unwrap();
        assert_eq!(delta_ce(&dict, &head, &batch, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn delta_ce_matches_loop_oracle() {
        let (dict, head) = random_setup(4, 4, 8, 5);
        let mut rng = seeded(5);
        let data = gaussian_matrix(&mut rng, 6, 4, 1.0);
        let targets = [0, 4, 2, 1, 3, 0];
        let batch = ActivationBatch::new(data.clone()).unwrap();
        let mut acc = 0.0;
        for i in 0..6 {
            let h = data.row(i).transpose();
            let h_hat = dict.forward(&h).unwrap();
            let ce = |v: &DVector<f64>| {
                let l = head.logits(v);
                let z: f64 = l.iter().map(|x| x.exp()).sum();
                -(l[targets[i]].exp() / z).ln()
            };
            acc += ce(&h_hat) - ce(&h);
        }
        let got = delta_ce(&dict, &head, &batch, &targets).unwrap();
        assert!((got - acc / 6.0).abs() < 1e-10);
    }

    #[test]
    fn evaluate_excludes_and_prunes_budgets() {
        let (dict, head) = random_setup(6, 4, 10, 3);
        let mut rng = seeded(7);
        let batch = ActivationBatch::new(gaussian_matrix(&mut rng, 25, 4, 1.0)).unwrap();
        let targets: Vec<usize> = (0..25).map(|i| i % 3).collect();
        let cfg = EvalConfig { m_star: 4, ..EvalConfig::default() };
        let rep = evaluate(&dict, &head, &batch, &targets, &cfg).unwrap();
        assert_eq!(rep.budgets_used, vec![1, 2, 4, 8]);
        assert!(!rep.warnings.is_empty());
        // Reference recomputation of the aggregates.
        let mut ncomps = Vec::new();
        let mut excluded = 0;
        for i in 0..25 {
            let h = batch.data().row(i).transpose();
            let out = ablate_and_score(&dict, &head, &h, targets[i], &[4], 0.1).unwrap();
            if out.excluded {
                excluded += 1;
            } else {
                ncomps.push((out.l_full - out.l_at_budget[&4]) / (out.l_full - out.l_empty).abs());
            }
        }
        assert_eq!(rep.n_excluded, excluded);
        let mean = ncomps.iter().sum::<f64>() / ncomps.len() as f64;
        assert!((rep.mean_ncomp.unwrap() - mean).abs() < 1e-12);
        assert!(rep.items.iter().filter(|it| it.excluded).all(|it| it.ncomp.is_none() && it.naopc.is_none()));
    }
}
