use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Approximator, HeadInput};
use crate::error::{GfnError, Result};

/// Hidden activations (input first) and pre-activations per layer.
type Layers = (Vec<Array2<f64>>, Vec<Array2<f64>>);

/// Negative slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Fully connected network with LeakyReLU hidden activations and a linear
/// output layer.
///
/// Layer `l` stores its weight matrix row-major with shape `(in, out)`,
/// followed by its bias, so a batch evaluates as `X W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
}

impl Mlp {
    /// `widths` = input width, hidden widths..., output width.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(crate::error::invalid("mlp needs positive input and output widths"));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, fan_in, fan_out)
        let mut offset = 0;
        self.widths.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (here, w[0], w[1])
        })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, fan_in, fan_out) in self.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                out.push(rng.random_range(-bound..=bound));
            }
        }
        out
    }

    fn weights<'a>(
        &self,
        params: &'a [f64],
        layer: (usize, usize, usize),
    ) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let (offset, fan_in, fan_out) = layer;
        let w =
            ArrayView2::from_shape((fan_in, fan_out), &params[offset..offset + fan_in * fan_out]).expect("layer shape");
        let b = ArrayView1::from(&params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out]);
        (w, b)
    }

    /// Returns the pre-activations of every layer; the last is the output.
    fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Result<Layers> {
        if x.ncols() != self.input_width() {
            return Err(GfnError::DimensionMismatch {
                expected: self.input_width(),
                got: x.ncols(),
            });
        }
        if params.len() != self.num_params() {
            return Err(GfnError::DimensionMismatch {
                expected: self.num_params(),
                got: params.len(),
            });
        }
        let layers: Vec<_> = self.layers().collect();
        let mut activations = vec![x.to_owned()];
        let mut pre = Vec::with_capacity(layers.len());
        for (l, &layer) in layers.iter().enumerate() {
            let (w, b) = self.weights(params, layer);
            let z = activations[l].dot(&w) + b;
            if l + 1 < layers.len() {
                activations.push(z.mapv(leaky_relu));
            }
            pre.push(z);
        }
        Ok((activations, pre))
    }
}

impl Approximator for Mlp {
    fn output_width(&self) -> usize {
        *self.widths.last().expect("widths")
    }

    fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn evaluate(&self, params: &[f64], input: &HeadInput) -> Result<Array2<f64>> {
        let (_, mut pre) = self.forward(params, input.features)?;
        Ok(pre.pop().expect("at least one layer"))
    }

    fn accumulate_gradient(
        &self,
        params: &[f64],
        input: &HeadInput,
        upstream: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<()> {
        let (activations, pre) = self.forward(params, input.features)?;
        let layers: Vec<_> = self.layers().collect();
        let mut delta: Array2<f64> = upstream.to_owned();
        for l in (0..layers.len()).rev() {
            let (offset, fan_in, fan_out) = layers[l];
            let dw = activations[l].t().dot(&delta);
            let db: Array1<f64> = delta.sum_axis(Axis(0));
            {
                let (wslot, rest) = grad[offset..].split_at_mut(fan_in * fan_out);
                let mut gw = ArrayViewMut2::from_shape((fan_in, fan_out), wslot).expect("layer shape");
                gw += &dw;
                let mut gb = ArrayViewMut1::from(&mut rest[..fan_out]);
                gb += &db;
            }
            if l > 0 {
                let (w, _) = self.weights(params, layers[l]);
                let mut da = delta.dot(&w.t());
                da.zip_mut_with(&pre[l - 1], |d, z| *d *= leaky_grad(*z));
                delta = da;
            }
        }
        Ok(())
    }
}

impl Mlp {
    /// Smallest `|z|` over hidden pre-activations: how far the batch is from
    /// the activation kink.
    pub fn kink_margin(&self, params: &[f64], x: ArrayView2<f64>) -> Result<f64> {
        let (_, pre) = self.forward(params, x)?;
        Ok(pre[..pre.len() - 1]
            .iter()
            .flat_map(|z| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min))
    }

    /// Convenience single-input evaluation.
    pub fn evaluate_one(&self, params: &[f64], features: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, features.len()), features).map_err(|_| GfnError::DimensionMismatch {
            expected: self.input_width(),
            got: features.len(),
        })?;
        let out = self.evaluate(params, &HeadInput { ids: &[0], features: x })?;
        Ok(out.slice(s![0, ..]).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::grad_check;
    use crate::rng;

    #[test]
    fn zero_weights_give_zero_logits() {
        let mlp = Mlp::new(vec![4, 8, 8, 3]).unwrap();
        let params = vec![0.0; mlp.num_params()];
        let out = mlp.evaluate_one(&params, &[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn single_unit_hand_evaluation() {
        // 1 -> 1 -> 1 with unit hidden weight and weight 2 on the output
        let mlp = Mlp::new(vec![1, 1, 1]).unwrap();
        let params = vec![1.0, 0.0, 2.0, 0.0];
        let out = mlp.evaluate_one(&params, &[0.5]).unwrap();
        assert_eq!(out, vec![1.0]);
        // the negative branch leaks at slope 0.01
        let out = mlp.evaluate_one(&params, &[-1.0]).unwrap();
        assert!((out[0] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mlp = Mlp::new(vec![3, 4, 2]).unwrap();
        let params = vec![0.0; mlp.num_params()];
        assert!(matches!(
            mlp.evaluate_one(&params, &[1.0, 2.0]),
            Err(GfnError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mlp = Mlp::new(vec![5, 7, 6, 3]).unwrap();
        let mut r = rng::stream(3, "mlp-test");
        let params = mlp.init_params(&mut r);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let target = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.2);
        let ids = [0usize; 4];
        let input = HeadInput {
            ids: &ids,
            features: x.view(),
        };
        let loss = |p: &[f64]| {
            let out = mlp.evaluate(p, &input).unwrap();
            let diff = &out - &target;
            let value = diff.iter().map(|d| d * d).sum::<f64>();
            let mut grad = vec![0.0; p.len()];
            mlp.accumulate_gradient(p, &input, diff.mapv(|d| 2.0 * d).view(), &mut grad)
                .unwrap();
            (value, grad)
        };
        let all: Vec<usize> = (0..mlp.num_params()).collect();
        let err = grad_check(loss, &params, &all, 1e-5);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let mlp = Mlp::new(vec![16, 32, 2]).unwrap();
        let mut r = rng::stream(1, "init");
        let p = mlp.init_params(&mut r);
        assert_eq!(p.len(), mlp.num_params());
        assert!(p[..16 * 32 + 32].iter().all(|v| v.abs() <= 0.25));
        assert!(p[16 * 32 + 32..].iter().all(|v| v.abs() <= 1.0 / 32f64.sqrt()));
    }
}
