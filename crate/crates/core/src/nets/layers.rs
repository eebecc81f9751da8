//! Layers with hand-written forward and backward passes, and the
//! sequential [`Net`] that chains them.

use std::sync::atomic::{AtomicBool, Ordering};

use indexmap::IndexMap;
use rayon::prelude::*;

use super::params::{Grads, Init, ParamDecl, ParamView, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{col2im, im2col, ConvGeom, Real, Tensor};

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables per-item parallelism across a batch. Results are identical
/// either way; parameter gradients are always reduced in item order.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on, Ordering::Relaxed);
}

fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

fn for_each_item<T: Real>(out: &mut [T], item_len: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if item_len == 0 {
        return;
    }
    if parallel() {
        out.par_chunks_mut(item_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(item_len).enumerate().for_each(|(i, c)| f(i, c));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm; outputs do not depend on the
    /// rest of the batch.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    /// `(B, inputs) -> (B, outputs)`, weight `(outputs, inputs)`.
    Linear {
        name: String,
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    /// 4x4 stride-2 convolution halving the map size; weight
    /// `(out_ch, in_ch, 4, 4)`.
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        in_size: usize,
        bias: bool,
    },
    /// 4x4 stride-2 fractional-strided convolution doubling the map size;
    /// weight `(in_ch, out_ch, 4, 4)`.
    ConvT {
        name: String,
        in_ch: usize,
        out_ch: usize,
        in_size: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    /// Reinterprets each item with a new shape.
    Reshape {
        shape: Vec<usize>,
    },
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    /// Identity forward, negated gradient backward.
    GradientReversal,
}

impl Layer {
    pub fn params(&self) -> Vec<ParamDecl> {
        let p = |name: &str, suffix: &str, shape: Vec<usize>, init: Init, trainable: bool| {
            ParamDecl {
                name: format!("{name}.{suffix}"),
                shape,
                init,
                trainable,
            }
        };
        let mut out = Vec::new();
        match self {
            Layer::Linear {
                name,
                inputs,
                outputs,
                bias,
            } => {
                out.push(p(name, "w", vec![*outputs, *inputs], Init::Gaussian, true));
                if *bias {
                    out.push(p(name, "b", vec![*outputs], Init::Zeros, true));
                }
            }
            Layer::Conv {
                name,
                in_ch,
                out_ch,
                bias,
                ..
            } => {
                out.push(p(name, "w", vec![*out_ch, *in_ch, KERNEL, KERNEL], Init::Gaussian, true));
                if *bias {
                    out.push(p(name, "b", vec![*out_ch], Init::Zeros, true));
                }
            }
            Layer::ConvT {
                name,
                in_ch,
                out_ch,
                bias,
                ..
            } => {
                out.push(p(name, "w", vec![*in_ch, *out_ch, KERNEL, KERNEL], Init::Gaussian, true));
                if *bias {
                    out.push(p(name, "b", vec![*out_ch], Init::Zeros, true));
                }
            }
            Layer::BatchNorm { name, channels } => {
                out.push(p(name, "gamma", vec![*channels], Init::Ones, true));
                out.push(p(name, "beta", vec![*channels], Init::Zeros, true));
                out.push(p(name, "mean", vec![*channels], Init::Zeros, false));
                out.push(p(name, "var", vec![*channels], Init::Ones, false));
            }
            _ => {}
        }
        out
    }

    /// Item shape produced from the given item shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: Vec<usize>| {
            Err(Error::Spec(format!(
                "layer {:?} expects item shape {want:?}, got {input:?}",
                self.label()
            )))
        };
        match self {
            Layer::Linear {
                inputs, outputs, ..
            } => {
                if input != [*inputs] {
                    return mismatch(vec![*inputs]);
                }
                Ok(vec![*outputs])
            }
            Layer::Conv {
                in_ch,
                out_ch,
                in_size,
                ..
            } => {
                if input != [*in_ch, *in_size, *in_size] {
                    return mismatch(vec![*in_ch, *in_size, *in_size]);
                }
                Ok(vec![*out_ch, in_size / 2, in_size / 2])
            }
            Layer::ConvT {
                in_ch,
                out_ch,
                in_size,
                ..
            } => {
                if input != [*in_ch, *in_size, *in_size] {
                    return mismatch(vec![*in_ch, *in_size, *in_size]);
                }
                Ok(vec![*out_ch, in_size * 2, in_size * 2])
            }
            Layer::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return mismatch(vec![*channels]);
                }
                Ok(input.to_vec())
            }
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return mismatch(shape.clone());
                }
                Ok(shape.clone())
            }
            _ => Ok(input.to_vec()),
        }
    }

    fn label(&self) -> String {
        match self {
            Layer::Linear { name, .. }
            | Layer::Conv { name, .. }
            | Layer::ConvT { name, .. }
            | Layer::BatchNorm { name, .. } => name.clone(),
            other => format!("{other:?}"),
        }
    }
}

/// Batch statistics captured by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

/// Everything a backward pass needs, plus named intermediate activations.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor<T>>,
    pub bn: Vec<Option<BnStats<T>>>,
    pub mode: Mode,
}

impl<T: Real> Forward<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("forward has an input")
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.acts.pop().expect("forward has an input")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Net {
    pub layers: Vec<Layer>,
    input_shape: Vec<usize>,
    /// Named positions in `Forward::acts`.
    marks: IndexMap<String, usize>,
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    let batch = shape[0];
    let channels = shape[1];
    let spatial = shape[2..].iter().product();
    (batch, channels, spatial)
}

impl Net {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(Self {
            layers,
            input_shape,
            marks: IndexMap::new(),
        })
    }

    /// Names the activation after the first `after_layers` layers.
    pub fn with_mark(mut self, name: &str, after_layers: usize) -> Self {
        assert!(after_layers <= self.layers.len());
        self.marks.insert(name.to_string(), after_layers);
        self
    }

    pub fn mark(&self, name: &str) -> Option<usize> {
        self.marks.get(name).copied()
    }

    pub fn marks(&self) -> &IndexMap<String, usize> {
        &self.marks
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.output_shape(&shape).expect("validated at construction");
        }
        shape
    }

    pub fn param_decls(&self) -> Vec<ParamDecl> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn forward<T: Real>(&self, view: ParamView<'_, T>, x: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::Invalid(format!(
                "network input shape {:?} does not match (batch, {:?})",
                x.shape(),
                self.input_shape
            )));
        }
        if x.batch() == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for layer in &self.layers {
            let input = acts.last().expect("input pushed");
            let (out, stats) = forward_layer(layer, view, input, mode);
            acts.push(out);
            bn.push(stats);
        }
        Ok(Forward { acts, bn, mode })
    }

    /// Backpropagates `grad_out` (gradient of a scalar w.r.t. the output),
    /// accumulating into `grads`. Returns the input gradient if asked.
    pub fn backward<T: Real>(
        &self,
        view: ParamView<'_, T>,
        fwd: &Forward<T>,
        grad_out: Tensor<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        assert_eq!(grad_out.shape(), fwd.output().shape(), "gradient shape");
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let want_dx = i > 0 || need_input_grad;
            let dx = backward_layer(
                layer,
                view,
                &fwd.acts[i],
                &fwd.acts[i + 1],
                fwd.bn[i].as_ref(),
                &g,
                grads,
                want_dx,
            );
            match dx {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn commit_running_stats<T: Real>(
        &self,
        set: &mut ParamSet<T>,
        binding: &super::params::Binding,
        fwd: &Forward<T>,
    ) {
        let m = T::from_f64(BN_MOMENTUM);
        for (layer, stats) in self.layers.iter().zip(&fwd.bn) {
            let (Layer::BatchNorm { name, .. }, Some(stats)) = (layer, stats) else {
                continue;
            };
            for (suffix, batch) in [("mean", &stats.mean), ("var", &stats.var)] {
                let slot = binding[format!("{name}.{suffix}").as_str()];
                for (r, &b) in set.get_mut(slot).data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
    }
}

fn param_name(name: &str, suffix: &str) -> String {
    format!("{name}.{suffix}")
}

fn forward_layer<T: Real>(
    layer: &Layer,
    view: ParamView<'_, T>,
    x: &Tensor<T>,
    mode: Mode,
) -> (Tensor<T>, Option<BnStats<T>>) {
    let batch = x.batch();
    let mut out_shape = vec![batch];
    out_shape.extend(layer.output_shape(&x.shape()[1..]).expect("shape checked"));
    match layer {
        Layer::Linear {
            name,
            inputs,
            outputs,
            bias,
        } => {
            let w = view.get(&param_name(name, "w"));
            let mut y = Tensor::zeros(&out_shape);
            T::gemm(batch, *inputs, *outputs, T::one(), x.data(), false, w.data(), true, T::zero(), y.data_mut());
            if *bias {
                let b = view.get(&param_name(name, "b"));
                for row in y.data_mut().chunks_mut(*outputs) {
                    row.iter_mut().zip(b.data()).for_each(|(v, &b)| *v += b);
                }
            }
            (y, None)
        }
        Layer::Conv {
            name,
            in_ch,
            out_ch,
            in_size,
            bias,
        } => {
            let g = ConvGeom {
                channels: *in_ch,
                in_size: *in_size,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let w = view.get(&param_name(name, "w"));
            let b = bias.then(|| view.get(&param_name(name, "b")));
            let mut y = Tensor::zeros(&out_shape);
            let hw = g.col_cols();
            for_each_item(y.data_mut(), out_ch * hw, |i, yi| {
                let mut cols = vec![T::zero(); g.col_rows() * hw];
                im2col(x.item(i), &g, &mut cols);
                T::gemm(*out_ch, g.col_rows(), hw, T::one(), w.data(), false, &cols, false, T::zero(), yi);
                if let Some(b) = b {
                    add_channel_bias(yi, b.data(), hw);
                }
            });
            (y, None)
        }
        Layer::ConvT {
            name,
            in_ch,
            out_ch,
            in_size,
            bias,
        } => {
            let g = ConvGeom {
                channels: *out_ch,
                in_size: in_size * 2,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let w = view.get(&param_name(name, "w"));
            let b = bias.then(|| view.get(&param_name(name, "b")));
            let mut y = Tensor::zeros(&out_shape);
            let hw_in = in_size * in_size;
            let hw_out = g.in_size * g.in_size;
            for_each_item(y.data_mut(), out_ch * hw_out, |i, yi| {
                let mut cols = vec![T::zero(); g.col_rows() * hw_in];
                T::gemm(g.col_rows(), *in_ch, hw_in, T::one(), w.data(), true, x.item(i), false, T::zero(), &mut cols);
                col2im(&cols, &g, yi);
                if let Some(b) = b {
                    add_channel_bias(yi, b.data(), hw_out);
                }
            });
            (y, None)
        }
        Layer::BatchNorm { name, channels } => {
            let gamma = view.get(&param_name(name, "gamma")).data();
            let beta = view.get(&param_name(name, "beta")).data();
            let (nb, nc, sp) = bn_dims(x.shape());
            debug_assert_eq!(nc, *channels);
            let eps = T::from_f64(BN_EPS);
            let mut y = Tensor::zeros(x.shape());
            match mode {
                Mode::Eval => {
                    let rm = view.get(&param_name(name, "mean")).data();
                    let rv = view.get(&param_name(name, "var")).data();
                    for c in 0..nc {
                        let inv = T::one() / (rv[c] + eps).sqrt();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            for k in at..at + sp {
                                y.data_mut()[k] = gamma[c] * (x.data()[k] - rm[c]) * inv + beta[c];
                            }
                        }
                    }
                    (y, None)
                }
                Mode::Train => {
                    let n = nb * sp;
                    let nt = T::from_f64(n as f64);
                    let mut xhat = vec![T::zero(); x.len()];
                    let mut inv_std = vec![T::zero(); nc];
                    let mut means = vec![T::zero(); nc];
                    let mut vars = vec![T::zero(); nc];
                    for c in 0..nc {
                        let mut sum = T::zero();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            sum += x.data()[at..at + sp].iter().copied().sum();
                        }
                        let mean = sum / nt;
                        let mut sq = T::zero();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            sq += x.data()[at..at + sp].iter().map(|&v| (v - mean) * (v - mean)).sum();
                        }
                        let var = sq / nt;
                        let inv = T::one() / (var + eps).sqrt();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            for k in at..at + sp {
                                let h = (x.data()[k] - mean) * inv;
                                xhat[k] = h;
                                y.data_mut()[k] = gamma[c] * h + beta[c];
                            }
                        }
                        inv_std[c] = inv;
                        means[c] = mean;
                        vars[c] = if n > 1 {
                            sq / T::from_f64((n - 1) as f64)
                        } else {
                            var
                        };
                    }
                    (
                        y,
                        Some(BnStats {
                            xhat,
                            inv_std,
                            mean: means,
                            var: vars,
                        }),
                    )
                }
            }
        }
        Layer::Reshape { .. } => (Tensor::from_vec(&out_shape, x.data().to_vec()), None),
        Layer::Relu => (x.map(|v| if v > T::zero() { v } else { T::zero() }), None),
        Layer::LeakyRelu => {
            let s = T::from_f64(LEAKY_SLOPE);
            (x.map(|v| if v > T::zero() { v } else { s * v }), None)
        }
        Layer::Tanh => (x.map(|v| v.tanh()), None),
        Layer::Sigmoid => (x.map(sigmoid), None),
        Layer::GradientReversal => (x.clone(), None),
    }
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], b: &[T], plane: usize) {
    for (c, chunk) in y.chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v += b[c]);
    }
}

fn accumulate_channel_bias<T: Real>(grads: &mut Grads<T>, slot: usize, dy: &Tensor<T>) {
    let (nb, nc, sp) = bn_dims(dy.shape());
    let db = grads.entry(slot, &[nc]);
    for b in 0..nb {
        for c in 0..nc {
            let at = (b * nc + c) * sp;
            db.data_mut()[c] += dy.data()[at..at + sp].iter().copied().sum();
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_layer<T: Real>(
    layer: &Layer,
    view: ParamView<'_, T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    stats: Option<&BnStats<T>>,
    dy: &Tensor<T>,
    grads: &mut Grads<T>,
    want_dx: bool,
) -> Option<Tensor<T>> {
    let batch = x.batch();
    match layer {
        Layer::Linear {
            name,
            inputs,
            outputs,
            bias,
        } => {
            let w_slot = view.slot(&param_name(name, "w"));
            let w = view.set.get(w_slot);
            if grads.wants(w_slot) {
                let dw = grads.entry(w_slot, w.shape());
                T::gemm(*outputs, batch, *inputs, T::one(), dy.data(), true, x.data(), false, T::one(), dw.data_mut());
            }
            if *bias {
                let b_slot = view.slot(&param_name(name, "b"));
                if grads.wants(b_slot) {
                    let db = grads.entry(b_slot, &[*outputs]);
                    for row in dy.data().chunks(*outputs) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            want_dx.then(|| {
                let mut dx = Tensor::zeros(x.shape());
                T::gemm(batch, *outputs, *inputs, T::one(), dy.data(), false, w.data(), false, T::zero(), dx.data_mut());
                dx
            })
        }
        Layer::Conv {
            name,
            in_ch,
            out_ch,
            in_size,
            bias,
        } => {
            let g = ConvGeom {
                channels: *in_ch,
                in_size: *in_size,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let hw = g.col_cols();
            let w_slot = view.slot(&param_name(name, "w"));
            let w = view.set.get(w_slot);
            if grads.wants(w_slot) {
                let dw = grads.entry(w_slot, w.shape());
                let mut cols = vec![T::zero(); g.col_rows() * hw];
                for i in 0..batch {
                    im2col(x.item(i), &g, &mut cols);
                    T::gemm(*out_ch, hw, g.col_rows(), T::one(), dy.item(i), false, &cols, true, T::one(), dw.data_mut());
                }
            }
            if *bias {
                let b_slot = view.slot(&param_name(name, "b"));
                if grads.wants(b_slot) {
                    accumulate_channel_bias(grads, b_slot, dy);
                }
            }
            want_dx.then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for_each_item(dx.data_mut(), x.item_len(), |i, dxi| {
                    let mut dcols = vec![T::zero(); g.col_rows() * hw];
                    T::gemm(g.col_rows(), *out_ch, hw, T::one(), w.data(), true, dy.item(i), false, T::zero(), &mut dcols);
                    col2im(&dcols, &g, dxi);
                });
                dx
            })
        }
        Layer::ConvT {
            name,
            in_ch,
            out_ch,
            in_size,
            bias,
        } => {
            let g = ConvGeom {
                channels: *out_ch,
                in_size: in_size * 2,
                kernel: KERNEL,
                stride: STRIDE,
                pad: PAD,
            };
            let hw_in = in_size * in_size;
            let w_slot = view.slot(&param_name(name, "w"));
            let w = view.set.get(w_slot);
            let mut dcols_all: Vec<Vec<T>> = Vec::new();
            let wants_w = grads.wants(w_slot);
            if wants_w || want_dx {
                dcols_all = (0..batch)
                    .map(|i| {
                        let mut dcols = vec![T::zero(); g.col_rows() * hw_in];
                        im2col(dy.item(i), &g, &mut dcols);
                        dcols
                    })
                    .collect();
            }
            if wants_w {
                let dw = grads.entry(w_slot, w.shape());
                for (i, dcols) in dcols_all.iter().enumerate() {
                    T::gemm(*in_ch, hw_in, g.col_rows(), T::one(), x.item(i), false, dcols, true, T::one(), dw.data_mut());
                }
            }
            if *bias {
                let b_slot = view.slot(&param_name(name, "b"));
                if grads.wants(b_slot) {
                    accumulate_channel_bias(grads, b_slot, dy);
                }
            }
            want_dx.then(|| {
                let mut dx = Tensor::zeros(x.shape());
                for_each_item(dx.data_mut(), x.item_len(), |i, dxi| {
                    T::gemm(*in_ch, g.col_rows(), hw_in, T::one(), w.data(), false, &dcols_all[i], false, T::zero(), dxi);
                });
                dx
            })
        }
        Layer::BatchNorm { name, .. } => {
            let g_slot = view.slot(&param_name(name, "gamma"));
            let b_slot = view.slot(&param_name(name, "beta"));
            let gamma = view.set.get(g_slot).data();
            let (nb, nc, sp) = bn_dims(x.shape());
            match stats {
                Some(stats) => {
                    let n = T::from_f64((nb * sp) as f64);
                    let mut dgamma = vec![T::zero(); nc];
                    let mut dbeta = vec![T::zero(); nc];
                    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
                    for c in 0..nc {
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            for k in at..at + sp {
                                sum_dy += dy.data()[k];
                                sum_dy_xhat += dy.data()[k] * stats.xhat[k];
                            }
                        }
                        dgamma[c] = sum_dy_xhat;
                        dbeta[c] = sum_dy;
                        if let Some(dx) = dx.as_mut() {
                            // dxhat = dy * gamma, folded into the scale.
                            let scale = gamma[c] * stats.inv_std[c] / n;
                            for b in 0..nb {
                                let at = (b * nc + c) * sp;
                                for k in at..at + sp {
                                    dx.data_mut()[k] = scale
                                        * (n * dy.data()[k] - sum_dy - stats.xhat[k] * sum_dy_xhat);
                                }
                            }
                        }
                    }
                    if grads.wants(g_slot) {
                        add_into(grads.entry(g_slot, &[nc]), &dgamma);
                    }
                    if grads.wants(b_slot) {
                        add_into(grads.entry(b_slot, &[nc]), &dbeta);
                    }
                    dx
                }
                None => {
                    // Eval mode: an affine map per channel.
                    let rm = view.get(&param_name(name, "mean")).data();
                    let rv = view.get(&param_name(name, "var")).data();
                    let eps = T::from_f64(BN_EPS);
                    let mut dgamma = vec![T::zero(); nc];
                    let mut dbeta = vec![T::zero(); nc];
                    let mut dx = Tensor::zeros(x.shape());
                    for c in 0..nc {
                        let inv = T::one() / (rv[c] + eps).sqrt();
                        for b in 0..nb {
                            let at = (b * nc + c) * sp;
                            for k in at..at + sp {
                                dgamma[c] += dy.data()[k] * (x.data()[k] - rm[c]) * inv;
                                dbeta[c] += dy.data()[k];
                                dx.data_mut()[k] = dy.data()[k] * gamma[c] * inv;
                            }
                        }
                    }
                    if grads.wants(g_slot) {
                        add_into(grads.entry(g_slot, &[nc]), &dgamma);
                    }
                    if grads.wants(b_slot) {
                        add_into(grads.entry(b_slot, &[nc]), &dbeta);
                    }
                    want_dx.then_some(dx)
                }
            }
        }
        Layer::Reshape { .. } => want_dx.then(|| Tensor::from_vec(x.shape(), dy.data().to_vec())),
        Layer::Relu => want_dx.then(|| zip_map(dy, x, |g, v| if v > T::zero() { g } else { T::zero() })),
        Layer::LeakyRelu => {
            let s = T::from_f64(LEAKY_SLOPE);
            want_dx.then(|| zip_map(dy, x, |g, v| if v > T::zero() { g } else { s * g }))
        }
        Layer::Tanh => want_dx.then(|| zip_map(dy, y, |g, t| g * (T::one() - t * t))),
        Layer::Sigmoid => want_dx.then(|| zip_map(dy, y, |g, s| g * s * (T::one() - s))),
        Layer::GradientReversal => want_dx.then(|| dy.map(|g| -g)),
    }
}

fn add_into<T: Real>(dst: &mut Tensor<T>, src: &[T]) {
    dst.data_mut().iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(out * probe))/d(input and params).
    fn check_net(net: &Net, batch: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::<f64>::from_decls(&net.param_decls(), seed);
        // Perturb init so biases/BN shifts are not all trivial.
        for s in 0..set.len() {
            if set.is_trainable(s) {
                set.get_mut(s)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let binding = set.identity_binding();
        let mut in_shape = vec![batch];
        in_shape.extend_from_slice(net.input_shape());
        let n: usize = in_shape.iter().product();
        let x = Tensor::from_vec(&in_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut out_shape = vec![batch];
        out_shape.extend(net.output_shape());
        let m: usize = out_shape.iter().product();
        let probe = Tensor::from_vec(&out_shape, (0..m).map(|_| rng.random_range(-1.0..1.0)).collect());

        let objective = |set: &ParamSet<f64>, x: &Tensor<f64>| {
            let f = net
                .forward(ParamView::new(set, &binding), x, Mode::Train)
                .unwrap();
            f.output().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fwd = net.forward(ParamView::new(&set, &binding), &x, Mode::Train).unwrap();
        let mut grads = Grads::all(&set);
        let dx = net
            .backward(ParamView::new(&set, &binding), &fwd, probe.clone(), &mut grads, true)
            .unwrap();

        let h = 1e-6;
        let close = |a: f64, n: f64| (a - n).abs() <= 1e-5 * a.abs().max(n.abs()).max(1e-3);
        for k in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[k] += h;
            let mut xm = x.clone();
            xm.data_mut()[k] -= h;
            let num = (objective(&set, &xp) - objective(&set, &xm)) / (2.0 * h);
            assert!(close(dx.data()[k], num), "input {k}: {} vs {num}", dx.data()[k]);
        }
        for s in 0..set.len() {
            if !set.is_trainable(s) {
                continue;
            }
            let analytic = grads.get(s).cloned().unwrap_or_else(|| Tensor::zeros(set.get(s).shape()));
            for k in (0..set.get(s).len()).step_by(5) {
                let mut sp = set.clone();
                sp.get_mut(s).data_mut()[k] += h;
                let mut sm = set.clone();
                sm.get_mut(s).data_mut()[k] -= h;
                let num = (objective(&sp, &x) - objective(&sm, &x)) / (2.0 * h);
                assert!(
                    close(analytic.data()[k], num),
                    "{}[{k}]: {} vs {num}",
                    set.name(s),
                    analytic.data()[k]
                );
            }
        }
    }

    #[test]
    fn linear_and_pointwise_gradients() {
        let net = Net::new(
            vec![5],
            vec![
                Layer::Linear { name: "a".into(), inputs: 5, outputs: 4, bias: true },
                Layer::Tanh,
                Layer::Linear { name: "b".into(), inputs: 4, outputs: 3, bias: true },
                Layer::Sigmoid,
            ],
        )
        .unwrap();
        check_net(&net, 3, 1);
    }

    #[test]
    fn conv_gradients() {
        let net = Net::new(
            vec![2, 8, 8],
            vec![
                Layer::Conv { name: "c".into(), in_ch: 2, out_ch: 3, in_size: 8, bias: true },
                Layer::Tanh,
                Layer::Conv { name: "d".into(), in_ch: 3, out_ch: 2, in_size: 4, bias: false },
            ],
        )
        .unwrap();
        check_net(&net, 2, 2);
    }

    #[test]
    fn conv_transpose_gradients() {
        let net = Net::new(
            vec![3, 2, 2],
            vec![
                Layer::ConvT { name: "u".into(), in_ch: 3, out_ch: 2, in_size: 2, bias: true },
                Layer::Tanh,
                Layer::ConvT { name: "v".into(), in_ch: 2, out_ch: 2, in_size: 4, bias: false },
            ],
        )
        .unwrap();
        check_net(&net, 2, 3);
    }

    #[test]
    fn batchnorm_gradients() {
        let net = Net::new(
            vec![3, 2, 2],
            vec![
                Layer::BatchNorm { name: "bn".into(), channels: 3 },
                Layer::Tanh,
                Layer::Reshape { shape: vec![12] },
                Layer::Linear { name: "l".into(), inputs: 12, outputs: 2, bias: false },
                Layer::BatchNorm { name: "bn2".into(), channels: 2 },
            ],
        )
        .unwrap();
        check_net(&net, 4, 4);
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // With shared weights, <conv(x), y> == <x, convT(y)>.
        let conv = Net::new(
            vec![2, 8, 8],
            vec![Layer::Conv { name: "k".into(), in_ch: 2, out_ch: 3, in_size: 8, bias: false }],
        )
        .unwrap();
        let convt = Net::new(
            vec![3, 4, 4],
            vec![Layer::ConvT { name: "k".into(), in_ch: 3, out_ch: 2, in_size: 4, bias: false }],
        )
        .unwrap();
        let set = ParamSet::<f64>::from_decls(&conv.param_decls(), 5);
        let mut set_t = ParamSet::<f64>::new();
        // Conv weight (out=3, in=2, k, k) is exactly the ConvT layout (in=3, out=2, k, k).
        set_t.push("k.w", set.get(0).clone(), true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(&[1, 2, 8, 8], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = Tensor::from_vec(&[1, 3, 4, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = set.identity_binding();
        let bt = set_t.identity_binding();
        let cx = conv.forward(ParamView::new(&set, &b), &x, Mode::Eval).unwrap().into_output();
        let ty = convt.forward(ParamView::new(&set_t, &bt), &y, Mode::Eval).unwrap().into_output();
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let net = Net::new(vec![2], vec![Layer::BatchNorm { name: "bn".into(), channels: 2 }]).unwrap();
        let mut set = ParamSet::<f64>::from_decls(&net.param_decls(), 0);
        let b = set.identity_binding();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 20.0]);
        let fwd = net.forward(ParamView::new(&set, &b), &x, Mode::Train).unwrap();
        net.commit_running_stats(&mut set, &b, &fwd);
        let mean = set.by_name("bn.mean").unwrap().data();
        assert!((mean[0] - 0.2).abs() < 1e-12 && (mean[1] - 1.5).abs() < 1e-12);
        let var = set.by_name("bn.var").unwrap().data();
        // unbiased var of {1,3} = 2; 0.9 * 1 + 0.1 * 2
        assert!((var[0] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn parallel_forward_is_bitwise_identical() {
        let net = Net::new(
            vec![3, 8, 8],
            vec![Layer::Conv { name: "c".into(), in_ch: 3, out_ch: 4, in_size: 8, bias: true }],
        )
        .unwrap();
        let set = ParamSet::<f32>::from_decls(&net.param_decls(), 1);
        let b = set.identity_binding();
        let x = Tensor::from_vec(&[4, 3, 8, 8], (0..768).map(|i| (i as f32 * 0.01).sin()).collect());
        let serial = net.forward(ParamView::new(&set, &b), &x, Mode::Train).unwrap().into_output();
        set_parallel(true);
        let par = net.forward(ParamView::new(&set, &b), &x, Mode::Train).unwrap().into_output();
        set_parallel(false);
        assert_eq!(serial, par);
    }
}
