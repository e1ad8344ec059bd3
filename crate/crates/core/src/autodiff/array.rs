//! Dense row-major `f64` arrays of rank 0, 1 or 2.
//!
//! A rank-0 array holds exactly one value and is the scalar type used as the
//! root of every backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StmError};

/// Sentinel standing in for negative infinity in attention masks. Finite so
/// that arithmetic on masks stays NaN-free; masked softmax treats any entry
/// at or below this value as fully excluded.
pub const MASK_NEG: f64 = -1e30;

/// Values strictly below this are clamped before `ln` so losses stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.len() > 2 {
            return Err(StmError::Usage(format!(
                "rank {} array not supported (max rank 2)",
                shape.len()
            )));
        }
        if expect != values.len() {
            return Err(StmError::Usage(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                expect,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], values: vec![v] }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self { shape: vec![values.len()], values }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    /// The single value of a scalar (or length-1) array.
    pub fn item(&self) -> Result<f64> {
        if self.values.len() != 1 {
            return Err(StmError::Usage(format!(
                "item() on array of shape {:?}",
                self.shape
            )));
        }
        Ok(self.values[0])
    }

    /// Rows and columns, treating rank 0 as 1x1 and rank 1 as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }
}

/// Softmax over the last axis with an additive `{0, MASK_NEG}` mask.
///
/// Masked entries come back as exactly `0.0`; unmasked entries of each row
/// sum to 1. Every row must keep at least one unmasked entry and mask entries
/// must be `0` or the sentinel.
pub fn masked_softmax(scores: &DenseArray, mask: &DenseArray) -> Result<DenseArray> {
    if scores.shape() != mask.shape() {
        return Err(StmError::Usage(format!(
            "masked_softmax shape mismatch: scores {:?} vs mask {:?}",
            scores.shape(),
            mask.shape()
        )));
    }
    let (rows, cols) = scores.rows_cols();
    if cols == 0 {
        return Err(StmError::Domain("masked_softmax on empty support".into()));
    }
    let mut out = vec![0.0; scores.len()];
    for r in 0..rows {
        let row = &scores.values()[r * cols..(r + 1) * cols];
        let mrow = &mask.values()[r * cols..(r + 1) * cols];
        masked_softmax_row(row, mrow, &mut out[r * cols..(r + 1) * cols])?;
    }
    DenseArray::new(scores.shape().to_vec(), out)
}

pub(crate) fn masked_softmax_row(scores: &[f64], mask: &[f64], out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    let mut support = 0usize;
    for (&s, &m) in scores.iter().zip(mask) {
        if m == 0.0 {
            support += 1;
            if s > max {
                max = s;
            }
        } else if m.partial_cmp(&MASK_NEG).is_none_or(|o| o.is_gt()) {
            return Err(StmError::Usage(format!(
                "mask entry {m} is neither 0 nor the -inf sentinel"
            )));
        }
    }
    if support == 0 {
        return Err(StmError::Domain("masked_softmax on empty support".into()));
    }
    let mut z = 0.0;
    for ((&s, &m), o) in scores.iter().zip(mask).zip(out.iter_mut()) {
        if m == 0.0 {
            let e = (s - max).exp();
            *o = e;
            z += e;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    Ok(())
}
