//! Dense row-major linear algebra with deterministic accumulation order.
//!
//! Everything here is a pure function over owned or borrowed matrices. The
//! attention kernel only evaluates logits for visible (query, key) pairs, so
//! a restrictive mask removes real work rather than hiding it after the fact.
//! Work is reported to a [`FlopMeter`] using the convention in [`flops`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// FLOP convention shared by the instrumented kernels and the analytic model.
pub mod flops {
    /// `(a x b) . (b x c)` costs `2abc`.
    pub const fn matmul(a: usize, b: usize, c: usize) -> u64 {
        2 * (a as u64) * (b as u64) * (c as u64)
    }

    /// Max, subtract, exp, sum, divide over `k` visible entries.
    pub const fn softmax(k: usize) -> u64 {
        5 * k as u64
    }

    /// Cost of one visible (query, key) entry of a single head: its score
    /// dot product, its share of the softmax and its value accumulation.
    pub const fn attention_entry(head_dim: usize, value_dim: usize) -> u64 {
        matmul(1, head_dim, 1) + softmax(1) + matmul(1, 1, value_dim)
    }
}

/// Receives the work performed by the kernels.
pub trait FlopMeter {
    fn dense(&mut self, flops: u64);

    /// One query row of an attention call. `flops_per_key` is charged once per
    /// entry of `visible_keys`.
    fn attention_row(&mut self, query: usize, visible_keys: &[usize], flops_per_key: u64);
}

/// Discards everything.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullMeter;

impl FlopMeter for NullMeter {
    fn dense(&mut self, _flops: u64) {}
    fn attention_row(&mut self, _query: usize, _visible_keys: &[usize], _flops_per_key: u64) {}
}

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copy of columns `[start, start + len)`.
    pub fn column_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column block out of range");
        Matrix::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }

    /// Copy of rows `[start, start + len)`.
    pub fn row_block(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows, "row block out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Writes `block` into this matrix with its top-left corner at `(row, col)`.
    pub fn set_block(&mut self, row: usize, col: usize, block: &Matrix) {
        assert!(row + block.rows <= self.rows && col + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = &mut self.row_mut(row + i)[col..col + block.cols];
            dst.copy_from_slice(block.row(i));
        }
    }

    pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vstack of matrices with different widths".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Per (query, key) visibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyMask {
    rows: usize,
    cols: usize,
    visible: Vec<bool>,
}

impl KeyMask {
    pub fn all_visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            visible: vec![true; rows * cols],
        }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                visible.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            visible,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_visible(&self, r: usize, c: usize) -> bool {
        self.visible[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, visible: bool) {
        self.visible[r * self.cols + c] = visible;
    }

    #[inline]
    fn row(&self, r: usize) -> &[bool] {
        &self.visible[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmoduleKind {
    /// Single softmax over text and every frame token.
    Joint,
    /// Intra-frame attention.
    Spatial,
    /// Frame queries against text keys.
    Cross,
    /// Frame queries against the keys of all frames.
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MapTag {
    pub timestep: usize,
    pub layer: usize,
    pub kind: SubmoduleKind,
}

/// A row-stochastic attention matrix kept for profiling.
///
/// `query_offset` and `key_offset` place the map's axes inside the full token
/// sequence, so a map over one frame or over the text span still partitions
/// against the global layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub probs: Matrix,
    pub head: usize,
    pub tag: MapTag,
    pub query_offset: usize,
    pub key_offset: usize,
}

impl AttentionMap {
    /// Checks row-stochasticity (`tol` absolute) and the [0, 1] range.
    pub fn check_stochastic(&self, tol: f64) -> Result<()> {
        for r in 0..self.probs.rows() {
            let row = self.probs.row(r);
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::Invariant(format!("row {r} holds probability {p}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invariant(format!("row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Mean over heads of maps sharing tag and placement.
    pub fn average_heads(maps: &[&AttentionMap]) -> Result<AttentionMap> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Empty("no maps to average".into()))?;
        for m in maps {
            if m.tag != first.tag
                || m.probs.shape() != first.probs.shape()
                || m.query_offset != first.query_offset
                || m.key_offset != first.key_offset
            {
                return Err(Error::Shape("heads disagree on tag or placement".into()));
            }
        }
        let (rows, cols) = first.probs.shape();
        let mut data = vec![0.0; rows * cols];
        for m in maps {
            for (acc, p) in data.iter_mut().zip(m.probs.data()) {
                *acc += p;
            }
        }
        let n = maps.len() as f64;
        data.iter_mut().for_each(|x| *x /= n);
        Ok(AttentionMap {
            probs: Matrix::new(rows, cols, data)?,
            head: 0,
            tag: first.tag,
            query_offset: first.query_offset,
            key_offset: first.key_offset,
        })
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_metered(a, b, &mut NullMeter)
}

/// `a . b`, accumulating each output over the inner index in ascending order.
pub fn matmul_metered(a: &Matrix, b: &Matrix, meter: &mut dyn FlopMeter) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let o_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &b_kj) in o_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
    meter.dense(flops::matmul(a.rows, a.cols, b.cols));
    Ok(out)
}

/// Normalizes `logits[j]` over `visible` into `out`; entries outside `visible`
/// are left untouched (callers start from zero).
fn softmax_visible(logits: &[f64], visible: &[usize], out: &mut [f64]) {
    let max = visible
        .iter()
        .map(|&j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &j in visible {
        let e = (logits[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    for &j in visible {
        out[j] /= sum;
    }
}

fn visible_keys(mask_row: &[bool], into: &mut Vec<usize>) {
    into.clear();
    into.extend(
        mask_row
            .iter()
            .enumerate()
            .filter_map(|(j, &v)| v.then_some(j)),
    );
}

pub fn masked_softmax_rows(logits: &Matrix, mask: &KeyMask) -> Result<Matrix> {
    if logits.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs mask {:?}",
            logits.shape(),
            mask.shape()
        )));
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    let mut visible = Vec::with_capacity(logits.cols);
    for i in 0..logits.rows {
        visible_keys(mask.row(i), &mut visible);
        if visible.is_empty() {
            return Err(Error::Mask(format!("row {i} has no visible key")));
        }
        softmax_visible(logits.row(i), &visible, out.row_mut(i));
    }
    Ok(out)
}

/// Additive logit term applied before normalization.
pub type LogitBias<'a> = &'a dyn Fn(usize, usize) -> f64;

/// Single-head scaled dot-product attention returning `(output, probabilities)`.
///
/// Logits are `scale * q_i . k_j + bias(i, j)` and are only evaluated for
/// visible pairs.
pub fn attention_metered(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &KeyMask,
    scale: f64,
    bias: Option<LogitBias<'_>>,
    meter: &mut dyn FlopMeter,
) -> Result<(Matrix, Matrix)> {
    if q.cols != k.cols {
        return Err(Error::Shape(format!(
            "query width {} vs key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::Shape(format!(
            "{} keys vs {} values",
            k.rows, v.rows
        )));
    }
    if mask.shape() != (q.rows, k.rows) {
        return Err(Error::Shape(format!(
            "mask {:?} vs attention {}x{}",
            mask.shape(),
            q.rows,
            k.rows
        )));
    }
    let per_key = flops::attention_entry(q.cols, v.cols);
    let mut probs = Matrix::zeros(q.rows, k.rows);
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut logits = vec![0.0; k.rows];
    let mut visible = Vec::with_capacity(k.rows);
    for i in 0..q.rows {
        visible_keys(mask.row(i), &mut visible);
        if visible.is_empty() {
            return Err(Error::Mask(format!("query {i} has no visible key")));
        }
        let q_row = q.row(i);
        for &j in &visible {
            let dot: f64 = q_row.iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            logits[j] = scale * dot + bias.map_or(0.0, |b| b(i, j));
        }
        let p_row = probs.row_mut(i);
        softmax_visible(&logits, &visible, p_row);
        let o_row = &mut out.data[i * v.cols..(i + 1) * v.cols];
        for &j in &visible {
            let p = probs.data[i * k.rows + j];
            for (o, x) in o_row.iter_mut().zip(v.row(j)) {
                *o += p * x;
            }
        }
        meter.attention_row(i, &visible, per_key);
    }
    Ok((out, probs))
}

/// Unmetered, unbiased attention tagged as a standalone joint map.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &KeyMask,
    scale: f64,
) -> Result<(Matrix, AttentionMap)> {
    let (out, probs) = attention_metered(q, k, v, mask, scale, None, &mut NullMeter)?;
    Ok((
        out,
        AttentionMap {
            probs,
            head: 0,
            tag: MapTag {
                timestep: 0,
                layer: 0,
                kind: SubmoduleKind::Joint,
            },
            query_offset: 0,
            key_offset: 0,
        },
    ))
}
