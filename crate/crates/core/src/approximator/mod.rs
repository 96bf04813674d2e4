//! Differentiable function approximators with a uniform
//! evaluate / accumulate-gradient contract, plus the optimizer.
//!
//! Approximators are stateless descriptions of a parameter layout: they read
//! their weights from a slice of a [`ParamVector`] and write gradients into
//! the matching slice of a flat gradient buffer.

mod gradcheck;
mod mlp;
mod optimizer;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{GfnError, Result};

pub use gradcheck::{grad_check, sample_indices};
pub use mlp::{leaky_relu, Mlp, LEAKY_SLOPE};
pub use optimizer::{clip_grad_norm, Adam, AdamConfig, DEFAULT_CLIP_NORM};

/// Flat parameter storage with named, contiguous slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

/// A named region of a [`ParamVector`]. Its learning rate is the optimizer's
/// base rate times `lr_multiplier`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub start: usize,
    pub len: usize,
    pub lr_multiplier: f64,
}

impl ParamSlice {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

impl ParamVector {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            slices: Vec::new(),
        }
    }

    /// Appends a slice and returns its offset.
    pub fn push_slice(&mut self, name: &str, values: Vec<f64>, lr_multiplier: f64) -> usize {
        let start = self.values.len();
        self.slices.push(ParamSlice {
            name: name.to_string(),
            start,
            len: values.len(),
            lr_multiplier,
        });
        self.values.extend(values);
        start
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.slices.iter().find(|s| s.name == name)?.range();
        Some(&mut self.values[range])
    }

    /// Replaces every value. Rejects non-finite entries and leaves the
    /// vector untouched in that case.
    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(GfnError::DimensionMismatch {
                expected: self.values.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GfnError::NonFinite("parameter update"));
        }
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Order-sensitive hash of the exact bit patterns.
    pub fn checksum(&self) -> u64 {
        self.values.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

impl Default for ParamVector {
    fn default() -> Self {
        Self::new()
    }
}

/// Batch of approximator inputs: state ids (tabular) and features (MLP).
#[derive(Clone, Copy, Debug)]
pub struct HeadInput<'a> {
    pub ids: &'a [usize],
    pub features: ArrayView2<'a, f64>,
}

/// Differentiable map from a batch of inputs to a batch of output vectors.
pub trait Approximator {
    fn output_width(&self) -> usize;

    fn num_params(&self) -> usize;

    /// Deterministic for fixed parameters and input.
    fn evaluate(&self, params: &[f64], input: &HeadInput) -> Result<Array2<f64>>;

    /// Adds `upstream^T d(outputs)/d(params)` into `grad`.
    fn accumulate_gradient(
        &self,
        params: &[f64],
        input: &HeadInput,
        upstream: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<()>;
}

/// One output vector per state index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tabular {
    pub rows: usize,
    pub cols: usize,
}

impl Approximator for Tabular {
    fn output_width(&self) -> usize {
        self.cols
    }

    fn num_params(&self) -> usize {
        self.rows * self.cols
    }

    fn evaluate(&self, params: &[f64], input: &HeadInput) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((input.ids.len(), self.cols));
        for (i, &id) in input.ids.iter().enumerate() {
            if id >= self.rows {
                return Err(GfnError::DimensionMismatch {
                    expected: self.rows,
                    got: id + 1,
                });
            }
            let row = &params[id * self.cols..(id + 1) * self.cols];
            out.row_mut(i).iter_mut().zip(row).for_each(|(o, p)| *o = *p);
        }
        Ok(out)
    }

    fn accumulate_gradient(
        &self,
        _params: &[f64],
        input: &HeadInput,
        upstream: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        for (i, &id) in input.ids.iter().enumerate() {
            let row = &mut grad[id * self.cols..(id + 1) * self.cols];
            row.iter_mut().zip(upstream.row(i)).for_each(|(g, u)| *g += u);
        }
        Ok(())
    }
}

/// Either approximator kind, so heads can be stored uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Tabular(Tabular),
    Mlp(Mlp),
}

impl Approximator for Head {
    fn output_width(&self) -> usize {
        match self {
            Head::Tabular(t) => t.output_width(),
            Head::Mlp(m) => m.output_width(),
        }
    }

    fn num_params(&self) -> usize {
        match self {
            Head::Tabular(t) => t.num_params(),
            Head::Mlp(m) => m.num_params(),
        }
    }

    fn evaluate(&self, params: &[f64], input: &HeadInput) -> Result<Array2<f64>> {
        match self {
            Head::Tabular(t) => t.evaluate(params, input),
            Head::Mlp(m) => m.evaluate(params, input),
        }
    }

    fn accumulate_gradient(
        &self,
        params: &[f64],
        input: &HeadInput,
        upstream: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        match self {
            Head::Tabular(t) => t.accumulate_gradient(params, input, upstream, grad),
            Head::Mlp(m) => m.accumulate_gradient(params, input, upstream, grad),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn tabular_quadratic_gradient_is_exact() {
        let table = Tabular { rows: 3, cols: 2 };
        let params = vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5];
        let ids = [2usize, 0, 2];
        let feats = Array2::<f64>::zeros((3, 0));
        let input = HeadInput {
            ids: &ids,
            features: feats.view(),
        };
        let loss = |p: &[f64]| {
            let out = table.evaluate(p, &input).unwrap();
            let value = out.iter().map(|v| v * v).sum::<f64>();
            let mut grad = vec![0.0; p.len()];
            let up = out.mapv(|v| 2.0 * v);
            table.accumulate_gradient(p, &input, up.view(), &mut grad).unwrap();
            (value, grad)
        };
        let err = grad_check(loss, &params, &[0, 1, 2, 3, 4, 5], 1e-5);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_gradient_both_ways() {
        let params = vec![1.0, 2.0, 3.0];
        let err = grad_check(|p| (4.2, vec![0.0; p.len()]), &params, &[0, 1, 2], 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn assign_rejects_non_finite() {
        let mut p = ParamVector::new();
        p.push_slice("a", vec![1.0, 2.0], 1.0);
        assert!(p.assign(&[1.0, f64::NAN]).is_err());
        assert_eq!(p.values(), &[1.0, 2.0]);
        assert!(p.assign(&[1.0]).is_err());
        p.assign(&[3.0, 4.0]).unwrap();
        assert_eq!(p.slice("a").unwrap(), &[3.0, 4.0]);
    }
}
