// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dictionary explainers: `h_hat = W_dec * sigma(W_enc * h + b_enc) + b_dec`.
//!
//! One type covers sparse autoencoders and transcoders. The only difference
//! is which activation stream is the reconstruction target, recorded in
//! [`ExplainerKind`]. Batch codes are kept in compressed sparse rows, since
//! Top-K codes are tiny compared with the dictionary width.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GaeError, Result};

/// Rows encoded per parallel task.
const ENCODE_CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sparsifier {
    Relu,
    /// ReLU followed by keeping the `k_active` largest values.
    TopK { k_active: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplainerKind {
    /// Reconstructs its own input.
    Sae,
    /// Reads one stream and reconstructs a paired target stream.
    Transcoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    w_enc: DMatrix<f64>,
    b_enc: DVector<f64>,
    w_dec: DMatrix<f64>,
    b_dec: DVector<f64>,
    sparsifier: Sparsifier,
    kind: ExplainerKind,
}

impl Dictionary {
    /// `w_enc` is `k x d_in`, `w_dec` is `d x k`.
    pub fn new(
        w_enc: DMatrix<f64>,
        b_enc: DVector<f64>,
        w_dec: DMatrix<f64>,
        b_dec: DVector<f64>,
        sparsifier: Sparsifier,
        kind: ExplainerKind,
    ) -> Result<Self> {
        let (k, d_in) = w_enc.shape();
        let (d, k_dec) = w_dec.shape();
        if k == 0 || d_in == 0 || d == 0 {
            return Err(GaeError::InvalidParameter(
                "dictionary dimensions must be positive".into(),
            ));
        }
        if k_dec != k {
            return Err(GaeError::dims("decoder width", k, k_dec));
        }
        if b_enc.len() != k {
            return Err(GaeError::dims("encoder bias", k, b_enc.len()));
        }
        if b_dec.len() != d {
            return Err(GaeError::dims("decoder bias", d, b_dec.len()));
        }
        if kind == ExplainerKind::Sae && d_in != d {
            return Err(GaeError::dims("autoencoder input width", d, d_in));
        }
        if let Sparsifier::TopK { k_active } = sparsifier {
            if k_active == 0 || k_active > k {
                return Err(GaeError::InvalidParameter(format!(
                    "k_active = {k_active} must lie in 1..={k}"
                )));
            }
        }
        let finite = w_enc.iter().chain(b_enc.iter()).chain(w_dec.iter()).chain(b_dec.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("dictionary tensors"));
        }
        Ok(Self {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            sparsifier,
            kind,
        })
    }

    /// Same encoder and metadata with a new decoder.
    pub fn with_decoder(&self, w_dec: DMatrix<f64>, b_dec: DVector<f64>) -> Result<Self> {
        Self::new(
            self.w_enc.clone(),
            self.b_enc.clone(),
            w_dec,
            b_dec,
            self.sparsifier,
            self.kind,
        )
    }

    /// Width of the reconstruction (decoder output).
    pub fn d(&self) -> usize {
        self.w_dec.nrows()
    }

    /// Width of the encoder input.
    pub fn d_in(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Number of features.
    pub fn k(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn w_enc(&self) -> &DMatrix<f64> {
        &self.w_enc
    }

    pub fn b_enc(&self) -> &DVector<f64> {
        &self.b_enc
    }

    pub fn w_dec(&self) -> &DMatrix<f64> {
        &self.w_dec
    }

    pub fn b_dec(&self) -> &DVector<f64> {
        &self.b_dec
    }

    pub fn sparsifier(&self) -> Sparsifier {
        self.sparsifier
    }

    pub fn kind(&self) -> ExplainerKind {
        self.kind
    }

    pub fn encode(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        if h.len() != self.d_in() {
            return Err(GaeError::dims("encoder input", self.d_in(), h.len()));
        }
        let mut pre: Vec<f64> = (&self.w_enc * h + &self.b_enc).iter().copied().collect();
        let mut out = DVector::zeros(self.k());
        for (j, v) in sparsify(&mut pre, self.sparsifier) {
            out[j] = v;
        }
        Ok(out)
    }

    pub fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.k() {
            return Err(GaeError::dims("code length", self.k(), z.len()));
        }
        Ok(&self.w_dec * z + &self.b_dec)
    }

    pub fn forward(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        self.reconstruct(&self.encode(h)?)
    }

    /// Encodes every row of an `n x d_in` matrix.
    pub fn encode_batch(&self, data: &DMatrix<f64>) -> Result<SparseCodes> {
        if data.ncols() != self.d_in() {
            return Err(GaeError::dims("encoder input", self.d_in(), data.ncols()));
        }
        let n = data.nrows();
        let w_enc_t = self.w_enc.transpose();
        let chunks: Vec<SparseCodes> = (0..n.div_ceil(ENCODE_CHUNK_ROWS))
            .into_par_iter()
            .map(|c| {
                let start = c * ENCODE_CHUNK_ROWS;
                let len = ENCODE_CHUNK_ROWS.min(n - start);
                let pre = data.rows(start, len) * &w_enc_t;
                let mut codes = SparseCodes::empty(self.k());
                let mut row = vec![0.0; self.k()];
                for i in 0..len {
                    for (j, slot) in row.iter_mut().enumerate() {
                        *slot = pre[(i, j)] + self.b_enc[j];
                    }
                    codes.push_row(sparsify(&mut row, self.sparsifier));
                }
                codes
            })
            .collect();
        let mut out = SparseCodes::empty(self.k());
        for c in &chunks {
            out.extend(c);
        }
        Ok(out)
    }

    /// `n x d` reconstructions of the given codes.
    pub fn decode_batch(&self, codes: &SparseCodes) -> Result<DMatrix<f64>> {
        codes.decode(&self.w_dec, &self.b_dec)
    }

    /// `n x d` reconstructions of the rows of `data`.
    pub fn forward_batch(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.decode_batch(&self.encode_batch(data)?)
    }
}

/// Applies the sparsifier in place to `pre` and returns the surviving
/// `(feature, value)` pairs in ascending feature order.
pub(crate) fn sparsify(pre: &mut [f64], sparsifier: Sparsifier) -> Vec<(usize, f64)> {
    let mut active: Vec<(usize, f64)> = pre
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(j, v)| (j, *v))
        .collect();
    if let Sparsifier::TopK { k_active } = sparsifier {
        if active.len() > k_active {
            // Larger value first, lower index breaks ties: a total order, so
            // the kept set is unique.
            active.select_nth_unstable_by(k_active - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            active.truncate(k_active);
            active.sort_unstable_by_key(|p| p.0);
        }
    }
    active
}

/// Batch of codes in compressed sparse row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodes {
    n_features: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseCodes {
    pub fn empty(n_features: usize) -> Self {
        Self {
            n_features,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(z: &DMatrix<f64>) -> Self {
        let mut out = Self::empty(z.ncols());
        for i in 0..z.nrows() {
            out.push_row(
                (0..z.ncols())
                    .filter(|&j| z[(i, j)] != 0.0)
                    .map(|j| (j, z[(i, j)]))
                    .collect(),
            );
        }
        out
    }

    fn push_row(&mut self, row: Vec<(usize, f64)>) {
        for (j, v) in row {
            self.indices.push(j);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
    }

    fn extend(&mut self, other: &SparseCodes) {
        let base = self.indices.len();
        self.indices.extend_from_slice(&other.indices);
        self.values.extend_from_slice(&other.values);
        self.indptr.extend(other.indptr[1..].iter().map(|p| p + base));
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Feature indices and values of row `i`, ascending by feature.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.values[a..b])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n_rows(), self.n_features);
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                z[(i, j)] = v;
            }
        }
        z
    }

    /// Subset of rows, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut out = Self::empty(self.n_features);
        for &i in rows {
            let (idx, val) = self.row(i);
            out.push_row(idx.iter().copied().zip(val.iter().copied()).collect());
        }
        out
    }

    /// Column means, length `k`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.n_features);
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            m[j] += v;
        }
        m / self.n_rows() as f64
    }

    /// `Z^T Z`, `k x k`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n_features, self.n_features);
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            for (&a, &va) in idx.iter().zip(val) {
                for (&b, &vb) in idx.iter().zip(val) {
                    g[(a, b)] += va * vb;
                }
            }
        }
        g
    }

    /// `Z Z^T`, `n x n`.
    pub fn row_gram(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let mut g = DMatrix::zeros(n, n);
        let mut scatter = vec![0.0; self.n_features];
        for i in 0..n {
            let (idx, val) = self.row(i);
            for (&j, &v) in idx.iter().zip(val) {
                scatter[j] = v;
            }
            for r in 0..=i {
                let (ridx, rval) = self.row(r);
                let dot: f64 = ridx.iter().zip(rval).map(|(&j, &v)| scatter[j] * v).sum();
                g[(i, r)] = dot;
                g[(r, i)] = dot;
            }
            for &j in idx {
                scatter[j] = 0.0;
            }
        }
        g
    }

    /// `X^T Z` for a row-aligned `n x m` matrix `x`; result is `m x k`.
    pub fn cross(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n_rows() {
            return Err(GaeError::dims("cross product rows", self.n_rows(), x.nrows()));
        }
        let m = x.ncols();
        let xt = x.transpose();
        let mut out = DMatrix::zeros(m, self.n_features);
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            let xi = xt.column(i);
            for (&j, &v) in idx.iter().zip(val) {
                out.column_mut(j).axpy(v, &xi, 1.0);
            }
        }
        Ok(out)
    }

    /// `A Z^T` for an `m x k` matrix `a`; result is `m x n`.
    pub fn apply_transposed(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != self.n_features {
            return Err(GaeError::dims("code width", self.n_features, a.ncols()));
        }
        let mut out = DMatrix::zeros(a.nrows(), self.n_rows());
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            let mut col = out.column_mut(i);
            for (&j, &v) in idx.iter().zip(val) {
                col.axpy(v, &a.column(j), 1.0);
            }
        }
        Ok(out)
    }

    /// `A Z` for an `m x n` matrix `a`; result is `m x k`.
    pub fn left_multiply(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if a.ncols() != self.n_rows() {
            return Err(GaeError::dims("left factor width", self.n_rows(), a.ncols()));
        }
        let mut out = DMatrix::zeros(a.nrows(), self.n_features);
        for i in 0..self.n_rows() {
            let (idx, val) = self.row(i);
            let ai = a.column(i);
            for (&j, &v) in idx.iter().zip(val) {
                out.column_mut(j).axpy(v, &ai, 1.0);
            }
        }
        Ok(out)
    }

    /// Reconstructions `z_i W^T + b`, one per row: `n x d`.
    pub fn decode(&self, w_dec: &DMatrix<f64>, b_dec: &DVector<f64>) -> Result<DMatrix<f64>> {
        if w_dec.ncols() != self.n_features {
            return Err(GaeError::dims("decoder width", self.n_features, w_dec.ncols()));
        }
        let mut t = self.apply_transposed(w_dec)?;
        for mut col in t.column_iter_mut() {
            col += b_dec;
        }
        Ok(t.transpose())
    }
}

/// Activations, one sample per row, with an optional row-aligned target
/// stream for transcoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    data: DMatrix<f64>,
    target: Option<DMatrix<f64>>,
}

impl ActivationBatch {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("activation batch"));
        }
        Ok(Self { data, target: None })
    }

    pub fn with_target(data: DMatrix<f64>, target: DMatrix<f64>) -> Result<Self> {
        if target.nrows() != data.nrows() {
            return Err(GaeError::dims("paired target rows", data.nrows(), target.nrows()));
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(GaeError::NonFinite("paired target batch"));
        }
        let mut b = Self::new(data)?;
        b.target = Some(target);
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn d(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn has_target(&self) -> bool {
        self.target.is_some()
    }

    /// Reconstruction target: the paired stream when present, else the data.
    pub fn target(&self) -> &DMatrix<f64> {
        self.target.as_ref().unwrap_or(&self.data)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = self.data.select_rows(rows.iter());
        let target = self.target.as_ref().map(|t| t.select_rows(rows.iter()));
        Self { data, target }
    }
}

/// Mean of `||target_i - h_hat_i||^2` over the batch.
pub fn batch_reconstruction_error(dict: &Dictionary, batch: &ActivationBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(GaeError::EmptyBatch);
    }
    let target = batch.target();
    if target.ncols() != dict.d() {
        return Err(GaeError::dims("reconstruction target", dict.d(), target.ncols()));
    }
    let recon = dict.forward_batch(batch.data())?;
    Ok((recon - target).norm_squared() / batch.n() as f64)
}
