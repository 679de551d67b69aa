//! Dense feed-forward networks over a flat parameter vector.
//!
//! Layer `l` owns a contiguous weight block (`out × in`, row-major) followed by
//! its bias block. Forward passes work on row batches; reverse-mode gradients
//! accumulate into a caller-provided flat gradient buffer.

use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Linear => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Linear),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Parameter ranges of one layer inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOffsets {
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetSpec {
    layers: Vec<LayerSpec>,
}

impl NetSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Argument(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::Argument(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// `depth` dense layers of `width` units, all with the same activation.
    pub fn dense(input: usize, width: usize, depth: usize, activation: Activation) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| LayerSpec::new(if i == 0 { input } else { width }, width, activation))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_dim)
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim)
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn layout(&self) -> Vec<LayerOffsets> {
        let mut offset = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = offset..offset + l.in_dim * l.out_dim;
                let b = w.end..w.end + l.out_dim;
                offset = b.end;
                LayerOffsets { weights: w, bias: b }
            })
            .collect()
    }

    /// Fan-in and fan-out of the layer owning flat parameter `index`, and
    /// whether it is a bias.
    pub fn describe_param(&self, index: usize) -> Option<(usize, usize, bool)> {
        self.layout()
            .iter()
            .zip(&self.layers)
            .find_map(|(off, l)| {
                if off.weights.contains(&index) {
                    Some((l.in_dim, l.out_dim, false))
                } else if off.bias.contains(&index) {
                    Some((l.in_dim, l.out_dim, true))
                } else {
                    None
                }
            })
    }
}

pub fn param_count(spec: &NetSpec) -> usize {
    spec.layers.iter().map(LayerSpec::param_count).sum()
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl BatchCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }

    pub fn pre_activations(&self) -> &[Array2<f64>] {
        &self.pre
    }
}

fn weight_view<'a>(params: &'a [f64], l: &LayerSpec, off: &LayerOffsets) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((l.out_dim, l.in_dim), &params[off.weights.clone()]).expect("layout matches spec")
}

/// Forward pass over a batch (`rows × in_dim`).
pub fn forward_batch(spec: &NetSpec, params: &[f64], x: ArrayView2<'_, f64>) -> Result<BatchCache> {
    ensure_len("network parameters", spec.param_count(), params.len())?;
    let Some(in_dim) = spec.in_dim() else {
        let output = x.to_owned();
        return Ok(BatchCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            output,
        });
    };
    ensure_len("network input width", in_dim, x.ncols())?;
    let layout = spec.layout();
    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut pre = Vec::with_capacity(spec.layers.len());
    let mut current = x.to_owned();
    for (l, off) in spec.layers.iter().zip(&layout) {
        let w = weight_view(params, l, off);
        let b = ndarray::ArrayView1::from(&params[off.bias.clone()]);
        let mut z = Array2::<f64>::zeros((current.nrows(), l.out_dim));
        general_mat_mul(1.0, &current, &w.t(), 0.0, &mut z);
        z += &b;
        let a = match l.activation {
            Activation::Relu => z.mapv(|v| if v > 0.0 { v } else { 0.0 }),
            Activation::Linear => z.clone(),
        };
        inputs.push(current);
        pre.push(z);
        current = a;
    }
    Ok(BatchCache {
        inputs,
        pre,
        output: current,
    })
}

/// Reverse pass. Adds `∂L/∂params` into `grad` and returns `∂L/∂x` when
/// `want_input_grad` is set.
pub fn backward_batch(
    spec: &NetSpec,
    params: &[f64],
    cache: &BatchCache,
    upstream: ArrayView2<'_, f64>,
    grad: &mut [f64],
    want_input_grad: bool,
) -> Result<Option<Array2<f64>>> {
    ensure_len("network parameters", spec.param_count(), params.len())?;
    ensure_len("gradient buffer", spec.param_count(), grad.len())?;
    if cache.pre.len() != spec.layers.len() {
        return Err(Error::SpecMismatch(format!(
            "cache holds {} layers, spec has {}",
            cache.pre.len(),
            spec.layers.len()
        )));
    }
    if upstream.dim() != cache.output.dim() {
        return Err(Error::DimensionMismatch {
            context: "upstream gradient",
            expected: cache.output.len(),
            actual: upstream.len(),
        });
    }
    if spec.is_empty() {
        return Ok(want_input_grad.then(|| upstream.to_owned()));
    }
    let layout = spec.layout();
    let mut delta = upstream.to_owned();
    for idx in (0..spec.layers.len()).rev() {
        let l = &spec.layers[idx];
        let off = &layout[idx];
        if l.activation == Activation::Relu {
            delta.zip_mut_with(&cache.pre[idx], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        {
            let mut gw = ArrayViewMut2::from_shape((l.out_dim, l.in_dim), &mut grad[off.weights.clone()])
                .expect("layout matches spec");
            general_mat_mul(1.0, &delta.t(), &cache.inputs[idx], 1.0, &mut gw);
        }
        let gb = delta.sum_axis(Axis(0));
        for (g, v) in grad[off.bias.clone()].iter_mut().zip(gb.iter()) {
            *g += v;
        }
        if idx > 0 || want_input_grad {
            let w = weight_view(params, l, off);
            let mut dx = Array2::<f64>::zeros((delta.nrows(), l.in_dim));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut dx);
            delta = dx;
        }
    }
    Ok(want_input_grad.then_some(delta))
}

/// Single-input forward pass.
pub fn forward(spec: &NetSpec, params: &[f64], x: &[f64]) -> Result<(Vec<f64>, BatchCache)> {
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    let cache = forward_batch(spec, params, view)?;
    let out = cache.output.row(0).to_vec();
    Ok((out, cache))
}

/// Single-input reverse pass: returns `(∂L/∂params, ∂L/∂x)`.
pub fn backward(
    spec: &NetSpec,
    params: &[f64],
    cache: &BatchCache,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let view = ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|_| Error::DimensionMismatch {
        context: "upstream gradient",
        expected: cache.output.len(),
        actual: upstream.len(),
    })?;
    let mut grad = vec![0.0; spec.param_count()];
    let dx = backward_batch(spec, params, cache, view, &mut grad, true)?.expect("input grad requested");
    Ok((grad, dx.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    fn small_net() -> NetSpec {
        NetSpec::new(vec![
            LayerSpec::new(3, 4, Activation::Relu),
            LayerSpec::new(4, 5, Activation::Relu),
            LayerSpec::new(5, 2, Activation::Linear),
        ])
        .unwrap()
    }

    #[test]
    fn param_counts() {
        let single = NetSpec::new(vec![LayerSpec::new(100, 30, Activation::Relu)]).unwrap();
        assert_eq!(param_count(&single), 3030);
        let branch = NetSpec::dense(100, 30, 3, Activation::Relu).unwrap();
        assert_eq!(param_count(&branch), 3030 + 930 + 930);
        assert_eq!(param_count(&NetSpec::default()), 0);
    }

    #[test]
    fn layout_is_contiguous_bijection() {
        let spec = small_net();
        let layout = spec.layout();
        let mut next = 0;
        for off in &layout {
            assert_eq!(off.weights.start, next);
            assert_eq!(off.bias.start, off.weights.end);
            next = off.bias.end;
        }
        assert_eq!(next, spec.param_count());
        assert_eq!(spec.describe_param(0), Some((3, 4, false)));
        assert_eq!(spec.describe_param(12), Some((3, 4, true)));
        assert_eq!(spec.describe_param(spec.param_count()), None);
    }

    #[test]
    fn rejects_broken_chain() {
        let err = NetSpec::new(vec![
            LayerSpec::new(3, 4, Activation::Relu),
            LayerSpec::new(5, 2, Activation::Linear),
        ]);
        assert!(err.is_err());
        assert!(NetSpec::new(vec![LayerSpec::new(0, 2, Activation::Linear)]).is_err());
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = NetSpec::new(vec![
            LayerSpec::new(3, 4, Activation::Linear),
            LayerSpec::new(4, 2, Activation::Linear),
        ])
        .unwrap();
        let (out, _) = forward(&spec, &vec![0.0; spec.param_count()], &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let spec = NetSpec::new(vec![LayerSpec::new(3, 3, Activation::Linear)]).unwrap();
        let mut p = vec![0.0; spec.param_count()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0];
        assert_eq!(forward(&spec, &p, &x).unwrap().0, x.to_vec());
    }

    #[test]
    fn relu_blocks_negative_preactivation() {
        // 1 -> 1 relu -> 1 linear; pre-activation -1 must not reach the output
        let spec = NetSpec::new(vec![
            LayerSpec::new(1, 1, Activation::Relu),
            LayerSpec::new(1, 1, Activation::Linear),
        ])
        .unwrap();
        let p = [1.0, -2.0, 5.0, 0.25];
        let (out, cache) = forward(&spec, &p, &[1.0]).unwrap();
        assert_eq!(cache.pre_activations()[0][[0, 0]], -1.0);
        assert_eq!(out, vec![0.25]);
        let (g, dx) = backward(&spec, &p, &cache, &[1.0]).unwrap();
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let spec = NetSpec::new(vec![LayerSpec::new(1, 1, Activation::Relu)]).unwrap();
        let p = [1.0, 0.0];
        let (_, cache) = forward(&spec, &p, &[0.0]).unwrap();
        let (g, dx) = backward(&spec, &p, &cache, &[1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert_eq!(dx, vec![0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let spec = small_net();
        let p = vec![0.1; spec.param_count()];
        assert!(matches!(forward(&spec, &p, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(forward(&spec, &p[1..], &[1.0, 2.0, 3.0]), Err(Error::DimensionMismatch { .. })));
        let other = NetSpec::dense(3, 2, 1, Activation::Linear).unwrap();
        let (_, cache) = forward(&other, &vec![0.1; other.param_count()], &[1.0, 2.0, 3.0]).unwrap();
        assert!(backward(&spec, &p, &cache, &[1.0, 1.0]).is_err());
    }

    fn random_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::keyed(seed, Purpose::Init, 0, 0);
        rng::standard_normal_vec(&mut r, n)
    }

    #[test]
    fn upstream_linearity() {
        let spec = small_net();
        let p = random_vec(1, spec.param_count());
        let (_, cache) = forward(&spec, &p, &[0.3, -0.2, 0.9]).unwrap();
        let (g0, _) = backward(&spec, &p, &cache, &[0.0, 0.0]).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
        let (g1, _) = backward(&spec, &p, &cache, &[0.7, -1.1]).unwrap();
        let (g2, _) = backward(&spec, &p, &cache, &[1.4, -2.2]).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-14 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_matches_single_rows() {
        let spec = small_net();
        let p = random_vec(2, spec.param_count());
        let x = Array2::from_shape_vec((4, 3), random_vec(3, 12)).unwrap();
        let up = Array2::from_shape_vec((4, 2), random_vec(4, 8)).unwrap();
        let cache = forward_batch(&spec, &p, x.view()).unwrap();
        let mut grad = vec![0.0; spec.param_count()];
        let dx = backward_batch(&spec, &p, &cache, up.view(), &mut grad, true).unwrap().unwrap();
        let mut summed = vec![0.0; spec.param_count()];
        for r in 0..4 {
            let (out, c) = forward(&spec, &p, x.row(r).as_slice().unwrap()).unwrap();
            for k in 0..2 {
                assert!((out[k] - cache.output()[[r, k]]).abs() < 1e-14);
            }
            let (g, dxr) = backward(&spec, &p, &c, up.row(r).as_slice().unwrap()).unwrap();
            for (s, v) in summed.iter_mut().zip(g) {
                *s += v;
            }
            for k in 0..3 {
                assert!((dxr[k] - dx[[r, k]]).abs() < 1e-13);
            }
        }
        for (a, b) in summed.iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let spec = small_net();
        let p = random_vec(5, spec.param_count());
        let x = [0.1, 0.2, -0.3];
        let a = forward(&spec, &p, &x).unwrap().0;
        let b = forward(&spec, &p, &x).unwrap().0;
        assert_eq!(a, b);
    }
}
