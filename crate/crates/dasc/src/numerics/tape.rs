//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Each forward primitive appends one node holding its output tensor and the
//! information its backward rule needs. `backward` walks the tape in reverse,
//! propagating vector-Jacobian products, and accumulates parameter gradients
//! into a [`ParamStore`]. Everything is sequential and allocation-order
//! deterministic: identical inputs produce bitwise-identical outputs.

use crate::error::{config_err, numeric_err, Result};
use crate::numerics::params::ParamStore;
use crate::numerics::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Zero padding policy for convolutions (TensorFlow conventions).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Sign convention for the variance loss.
///
/// `Uncertainty` returns +mean(variance), so minimizing it pushes predictions
/// toward uniform. `LiteralEq3` returns -mean(variance), the printed formula,
/// which sharpens predictions when minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceSign {
    Uncertainty,
    LiteralEq3,
}

/// Distribution rows may drift off the simplex during finite-difference
/// probing; validation only rejects gross violations.
const DISTRIBUTION_TOL: f64 = 1e-3;
/// Log clamp for cross-entropy (softmax can underflow at 32-bit).
const LOG_CLAMP: f64 = 1e-12;

enum Op<T: Scalar> {
    Leaf {
        param: Option<String>,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        pad: (usize, usize), // (top, left), derived at construction
    },
    Relu {
        x: NodeId,
    },
    MaxPool2d {
        x: NodeId,
        // flat index into the input for each output element (first maximum
        // in row-major window order on ties)
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    LayerNorm {
        x: NodeId,
        eps: T,
    },
    MulMask {
        x: NodeId,
        mask: Tensor<T>,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        y_hat: NodeId,
        targets: Tensor<T>,
        active: Vec<bool>,
    },
    VarianceLoss {
        y_hat: NodeId,
        active: Vec<bool>,
        sign: VarianceSign,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    WeightedSum {
        x: NodeId,
        weights: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to the given node, if it received any.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Value of a single-element node as an f64.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        match self.value(id).as_scalar() {
            Some(v) => Ok(v.to_f64()),
            None => config_err(format!(
                "node value of shape {:?} is not a scalar",
                self.value(id).shape()
            )),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Leaf node for data that is not trained.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_finite("input leaf")?;
        Ok(self.push(value, Op::Leaf { param: None }))
    }

    /// Leaf node bound to a named parameter; backward accumulates its
    /// gradient into the [`ParamStore`] slot of the same name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        value.ensure_finite(&format!("parameter leaf '{name}'"))?;
        Ok(self.push(
            value,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        ))
    }

    /// Cross-correlation of `x: [B,H,W,Cin]` with `kernels: [kh,kw,Cin,Cout]`
    /// plus a per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return config_err(format!(
                "conv2d expects x rank 4 [B,H,W,Cin] and kernels rank 4 [kh,kw,Cin,Cout], got x {xs:?}, kernels {ks:?}"
            ));
        }
        let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, kcin, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return config_err(format!(
                "conv2d channel mismatch: input shape {xs:?} has {cin} channels, kernels {ks:?} expect {kcin}"
            ));
        }
        if bs != [cout] {
            return config_err(format!(
                "conv2d bias shape {bs:?} does not match kernel output channels [{cout}]"
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return config_err("conv2d stride must be positive");
        }
        let (out_h, pad_top) = conv_extent(h, kh, stride.0, padding)?;
        let (out_w, pad_left) = conv_extent(w, kw, stride.1, padding)?;

        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); batch * out_h * out_w * cout];
        for b in 0..batch {
            for oh in 0..out_h {
                let ih0 = (oh * stride.0) as isize - pad_top as isize;
                for ow in 0..out_w {
                    let iw0 = (ow * stride.1) as isize - pad_left as isize;
                    let ovec = &mut out[((b * out_h + oh) * out_w + ow) * cout..][..cout];
                    ovec.copy_from_slice(bv);
                    for dkh in 0..kh {
                        let ih = ih0 + dkh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dkw in 0..kw {
                            let iw = iw0 + dkw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xoff = ((b * h + ih as usize) * w + iw as usize) * cin;
                            let koff = (dkh * kw + dkw) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xoff + ci];
                                let krow = &kv[koff + ci * cout..][..cout];
                                for (o, &k) in ovec.iter_mut().zip(krow) {
                                    *o = *o + xval * k;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, out_h, out_w, cout], out)?;
        value.ensure_finite("conv2d")?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad: (pad_top, pad_left),
            },
        ))
    }

    /// Elementwise max(0, x); gradient is 0 at x <= 0 by convention.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        value.ensure_finite("relu")?;
        Ok(self.push(value, Op::Relu { x }))
    }

    /// Per-window maximum over the spatial extents of `x: [B,H,W,C]`.
    /// Gradient routes to the first maximum in row-major window order.
    pub fn max_pool2d(
        &mut self,
        x: NodeId,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return config_err(format!("max_pool2d expects rank 4 [B,H,W,C], got {xs:?}"));
        }
        let (batch, h, w, ch) = (xs[0], xs[1], xs[2], xs[3]);
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return config_err("max_pool2d window and stride must be positive");
        }
        if window.0 > h || window.1 > w {
            return config_err(format!(
                "max_pool2d window {window:?} larger than input extents {h}x{w}"
            ));
        }
        let out_h = (h - window.0) / stride.0 + 1;
        let out_w = (w - window.1) / stride.1 + 1;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); batch * out_h * out_w * ch];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..batch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for c in 0..ch {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for dh in 0..window.0 {
                            let ih = oh * stride.0 + dh;
                            for dw in 0..window.1 {
                                let iw = ow * stride.1 + dw;
                                let idx = ((b * h + ih) * w + iw) * ch + c;
                                // strict '>' keeps the first maximum on ties
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let oidx = ((b * out_h + oh) * out_w + ow) * ch + c;
                        out[oidx] = best;
                        argmax[oidx] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, out_h, out_w, ch], out)?;
        value.ensure_finite("max_pool2d")?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }))
    }

    /// Mean over the spatial extents: `[B,H,W,C] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return config_err(format!("global_avg_pool expects rank 4 [B,H,W,C], got {xs:?}"));
        }
        let (batch, h, w, ch) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = vec![T::zero(); batch * ch];
        for b in 0..batch {
            for ih in 0..h {
                for iw in 0..w {
                    let xoff = ((b * h + ih) * w + iw) * ch;
                    let ovec = &mut out[b * ch..][..ch];
                    for (o, &v) in ovec.iter_mut().zip(&xv[xoff..xoff + ch]) {
                        *o = *o + v;
                    }
                }
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        let value = Tensor::new(vec![batch, ch], out)?;
        value.ensure_finite("global_avg_pool")?;
        Ok(self.push(value, Op::GlobalAvgPool { x }))
    }

    /// Affine map `x W + b` for `x: [B,n]` (or `[n]`), `W: [n,m]`, `b: [m]`.
    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if ws.len() != 2 {
            return config_err(format!("dense weight must be rank 2 [n,m], got {ws:?}"));
        }
        let (n, m) = (ws[0], ws[1]);
        let (rows, rank1) = match xs.len() {
            1 => (1, true),
            2 => (xs[0], false),
            _ => {
                return config_err(format!("dense input must be rank 1 or 2, got {xs:?}"));
            }
        };
        let inner = *xs.last().unwrap();
        if inner != n {
            return config_err(format!(
                "dense shape mismatch: input {xs:?} vs weight {ws:?}"
            ));
        }
        if bs != [m] {
            return config_err(format!("dense bias shape {bs:?} does not match [{m}]"));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![T::zero(); rows * m];
        for r in 0..rows {
            let orow = &mut out[r * m..][..m];
            orow.copy_from_slice(bv);
            for i in 0..n {
                let xval = xv[r * n + i];
                let wrow = &wv[i * m..][..m];
                for (o, &wv_) in orow.iter_mut().zip(wrow) {
                    *o = *o + xval * wv_;
                }
            }
        }
        let shape = if rank1 { vec![m] } else { vec![rows, m] };
        let value = Tensor::new(shape, out)?;
        value.ensure_finite("dense")?;
        Ok(self.push(value, Op::Dense { x, weight, bias }))
    }

    /// Standardize each row of the last axis to zero mean and unit variance
    /// (population variance, epsilon inside the square root, no learned affine).
    pub fn layer_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let width = match xs.last() {
            Some(&e) if e >= 2 => e,
            _ => {
                return config_err(format!(
                    "layer_norm needs a last extent of at least 2, got shape {xs:?}"
                ));
            }
        };
        let xv = self.value(x).data();
        let rows = xv.len() / width;
        let inv_n = 1.0 / width as f64;
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..][..width];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() * inv_n;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                * inv_n;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * width..][..width].iter_mut().zip(row) {
                *o = T::from_f64((v.to_f64() - mean) * inv_std);
            }
        }
        let value = Tensor::new(xs, out)?;
        value.ensure_finite("layer_norm")?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                eps: T::from_f64(eps),
            },
        ))
    }

    /// Elementwise product with a fixed binary mask; masked components get an
    /// exactly-zero gradient.
    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor<T>) -> Result<NodeId> {
        if mask.shape() != self.value(x).shape() {
            return config_err(format!(
                "mask shape {:?} does not match input shape {:?}",
                mask.shape(),
                self.value(x).shape()
            ));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = xv.iter().zip(mask.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(mask.shape().to_vec(), out)?;
        value.ensure_finite("mul_mask")?;
        Ok(self.push(value, Op::MulMask { x, mask }))
    }

    /// Shift-invariant softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let width = match xs.last() {
            Some(&e) if e >= 2 => e,
            _ => {
                return config_err(format!(
                    "softmax needs at least 2 classes on the last axis, got shape {xs:?}"
                ));
            }
        };
        self.value(x).ensure_finite("softmax logits")?;
        let xv = self.value(x).data();
        let rows = xv.len() / width;
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..][..width];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let orow = &mut out[r * width..][..width];
            let mut sum = T::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let value = Tensor::new(xs, out)?;
        value.ensure_finite("softmax")?;
        Ok(self.push(value, Op::Softmax { x }))
    }

    /// Mean categorical cross-entropy over the active rows, with the log
    /// clamped at 1e-12.
    pub fn cross_entropy(
        &mut self,
        y_hat: NodeId,
        targets: Tensor<T>,
        active: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let (rows, classes) = check_distribution(self.value(y_hat), "cross_entropy y_hat")?;
        if targets.shape() != self.value(y_hat).shape() {
            return config_err(format!(
                "cross_entropy target shape {:?} does not match prediction shape {:?}",
                targets.shape(),
                self.value(y_hat).shape()
            ));
        }
        check_one_hot(&targets, "cross_entropy targets")?;
        let active = resolve_active(active, rows, "cross_entropy")?;
        let n_active = active.iter().filter(|&&a| a).count() as f64;

        let yv = self.value(y_hat).data();
        let tv = targets.data();
        let mut total = 0.0f64;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            for c in 0..classes {
                let t = tv[r * classes + c].to_f64();
                if t != 0.0 {
                    let p = yv[r * classes + c].to_f64().max(LOG_CLAMP);
                    total -= t * p.ln();
                }
            }
        }
        let value = Tensor::scalar(T::from_f64(total / n_active));
        value.ensure_finite("cross_entropy")?;
        Ok(self.push(value, Op::CrossEntropy { y_hat, targets, active }))
    }

    /// Mean per-row population variance of the predicted distributions over
    /// the active rows. The per-row mean is fixed at 1/N, which holds for
    /// softmax rows by construction (validated, never recomputed here).
    pub fn variance_loss(
        &mut self,
        y_hat: NodeId,
        active: Option<Vec<bool>>,
        sign: VarianceSign,
    ) -> Result<NodeId> {
        let (rows, classes) = check_distribution(self.value(y_hat), "variance_loss y_hat")?;
        let active = resolve_active(active, rows, "variance_loss")?;
        let n_active = active.iter().filter(|&&a| a).count() as f64;

        let yv = self.value(y_hat).data();
        let mu = 1.0 / classes as f64;
        let mut total = 0.0f64;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            let mut v = 0.0f64;
            for c in 0..classes {
                let d = yv[r * classes + c].to_f64() - mu;
                v += d * d;
            }
            total += v / classes as f64;
        }
        let mean = total / n_active;
        let signed = match sign {
            VarianceSign::Uncertainty => mean,
            VarianceSign::LiteralEq3 => -mean,
        };
        let value = Tensor::scalar(T::from_f64(signed));
        value.ensure_finite("variance_loss")?;
        Ok(self.push(value, Op::VarianceLoss { y_hat, active, sign }))
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return config_err(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        value.ensure_finite("add")?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Multiply a node by a constant.
    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        if !factor.is_finite() {
            return numeric_err(format!("scale factor {factor} is not finite"));
        }
        let value = self.value(x).map(|v| v * factor);
        value.ensure_finite("scale")?;
        Ok(self.push(value, Op::Scale { x, factor }))
    }

    /// Scalar dot product with a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if weights.shape() != self.value(x).shape() {
            return config_err(format!(
                "weighted_sum weight shape {:?} does not match input {:?}",
                weights.shape(),
                self.value(x).shape()
            ));
        }
        let total = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| (a * b).to_f64())
            .sum::<f64>();
        let value = Tensor::scalar(T::from_f64(total));
        value.ensure_finite("weighted_sum")?;
        Ok(self.push(value, Op::WeightedSum { x, weights }))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let ones = Tensor::filled(self.value(x).shape(), T::one());
        self.weighted_sum(x, ones)
    }

    /// Reverse-mode sweep from a finite scalar loss node.
    ///
    /// Returns per-node gradients and, when a store is supplied, accumulates
    /// each named parameter leaf's gradient into its slot (repeated calls
    /// accumulate; callers reset via [`ParamStore::zero_grads`]).
    pub fn backward(
        &self,
        loss: NodeId,
        mut store: Option<&mut ParamStore<T>>,
    ) -> Result<Gradients<T>> {
        let loss_value = match self.value(loss).as_scalar() {
            Some(v) => v,
            None => {
                return config_err(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    self.value(loss).shape()
                ));
            }
        };
        if !loss_value.is_finite() {
            return numeric_err(format!("loss value {loss_value} is not finite"));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }

        if let Some(store) = store.as_deref_mut() {
            for (id, node) in self.nodes.iter().enumerate() {
                if let Op::Leaf { param: Some(name) } = &node.op {
                    if let Some(g) = &grads[id] {
                        store.accumulate_grad(name, g)?;
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        id: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                x,
                kernels,
                bias,
                stride,
                pad,
            } => {
                self.backward_conv2d(*x, *kernels, *bias, *stride, *pad, &node.value, grad, grads)?;
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let gv = grad.data();
                let delta: Vec<T> = xv
                    .iter()
                    .zip(gv)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
            Op::MaxPool2d { x, argmax } => {
                let mut delta = vec![T::zero(); self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    delta[src] = delta[src] + grad.data()[o];
                }
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.value(*x).shape();
                let (batch, h, w, ch) = (xs[0], xs[1], xs[2], xs[3]);
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut delta = vec![T::zero(); self.value(*x).len()];
                for b in 0..batch {
                    let grow = &grad.data()[b * ch..][..ch];
                    for ih in 0..h {
                        for iw in 0..w {
                            let xoff = ((b * h + ih) * w + iw) * ch;
                            for (d, &g) in delta[xoff..xoff + ch].iter_mut().zip(grow) {
                                *d = *d + g * inv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
            Op::Dense { x, weight, bias } => {
                let xs = self.value(*x).shape().to_vec();
                let ws = self.value(*weight).shape().to_vec();
                let (n, m) = (ws[0], ws[1]);
                let rows = if xs.len() == 1 { 1 } else { xs[0] };
                let xv = self.value(*x).data();
                let wv = self.value(*weight).data();
                let gv = grad.data();

                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut db = vec![T::zero(); m];
                for r in 0..rows {
                    let grow = &gv[r * m..][..m];
                    for (d, &g) in db.iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                    for i in 0..n {
                        let wrow = &wv[i * m..][..m];
                        let mut acc = T::zero();
                        for (&w_, &g) in wrow.iter().zip(grow) {
                            acc = acc + w_ * g;
                        }
                        dx[r * n + i] = dx[r * n + i] + acc;
                        let xval = xv[r * n + i];
                        let dwrow = &mut dw[i * m..][..m];
                        for (d, &g) in dwrow.iter_mut().zip(grow) {
                            *d = *d + xval * g;
                        }
                    }
                }
                accumulate(grads, *x, &xs, &dx)?;
                accumulate(grads, *weight, &ws, &dw)?;
                accumulate(grads, *bias, &[m], &db)?;
            }
            Op::LayerNorm { x, eps } => {
                let xs = self.value(*x).shape().to_vec();
                let width = *xs.last().unwrap();
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gv = grad.data();
                let rows = xv.len() / width;
                let inv_n = 1.0 / width as f64;
                let mut delta = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    let row = &xv[r * width..][..width];
                    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() * inv_n;
                    let var = row
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        * inv_n;
                    let inv_std = 1.0 / (var + eps.to_f64()).sqrt();
                    let yrow = &yv[r * width..][..width];
                    let grow = &gv[r * width..][..width];
                    let g_mean = grow.iter().map(|g| g.to_f64()).sum::<f64>() * inv_n;
                    let gy_mean = grow
                        .iter()
                        .zip(yrow)
                        .map(|(g, y)| g.to_f64() * y.to_f64())
                        .sum::<f64>()
                        * inv_n;
                    for i in 0..width {
                        let d = (grow[i].to_f64() - g_mean - yrow[i].to_f64() * gy_mean) * inv_std;
                        delta[r * width + i] = T::from_f64(d);
                    }
                }
                accumulate(grads, *x, &xs, &delta)?;
            }
            Op::MulMask { x, mask } => {
                let delta: Vec<T> = grad
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(&g, &m)| g * m)
                    .collect();
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
            Op::Softmax { x } => {
                let xs = self.value(*x).shape().to_vec();
                let width = *xs.last().unwrap();
                let yv = node.value.data();
                let gv = grad.data();
                let rows = yv.len() / width;
                let mut delta = vec![T::zero(); yv.len()];
                for r in 0..rows {
                    let yrow = &yv[r * width..][..width];
                    let grow = &gv[r * width..][..width];
                    let dot = yrow
                        .iter()
                        .zip(grow)
                        .map(|(&y, &g)| (y * g).to_f64())
                        .sum::<f64>();
                    for i in 0..width {
                        delta[r * width + i] =
                            yrow[i] * (grow[i] - T::from_f64(dot));
                    }
                }
                accumulate(grads, *x, &xs, &delta)?;
            }
            Op::CrossEntropy {
                y_hat,
                targets,
                active,
            } => {
                let shape = self.value(*y_hat).shape().to_vec();
                let classes = shape[1];
                let yv = self.value(*y_hat).data();
                let tv = targets.data();
                let g = grad.data()[0].to_f64();
                let n_active = active.iter().filter(|&&a| a).count() as f64;
                let mut delta = vec![T::zero(); yv.len()];
                for (r, &is_active) in active.iter().enumerate() {
                    if !is_active {
                        continue;
                    }
                    for c in 0..classes {
                        let t = tv[r * classes + c].to_f64();
                        if t != 0.0 {
                            let p = yv[r * classes + c].to_f64();
                            // clamp active: no gradient below the log clamp
                            if p > LOG_CLAMP {
                                delta[r * classes + c] =
                                    T::from_f64(-g * t / (p * n_active));
                            }
                        }
                    }
                }
                accumulate(grads, *y_hat, &shape, &delta)?;
            }
            Op::VarianceLoss { y_hat, active, sign } => {
                let shape = self.value(*y_hat).shape().to_vec();
                let classes = shape[1];
                let yv = self.value(*y_hat).data();
                let g = grad.data()[0].to_f64();
                let n_active = active.iter().filter(|&&a| a).count() as f64;
                let mu = 1.0 / classes as f64;
                let sgn = match sign {
                    VarianceSign::Uncertainty => 1.0,
                    VarianceSign::LiteralEq3 => -1.0,
                };
                let coef = sgn * g * 2.0 / (n_active * classes as f64);
                let mut delta = vec![T::zero(); yv.len()];
                for (r, &is_active) in active.iter().enumerate() {
                    if !is_active {
                        continue;
                    }
                    for c in 0..classes {
                        let p = yv[r * classes + c].to_f64();
                        delta[r * classes + c] = T::from_f64(coef * (p - mu));
                    }
                }
                accumulate(grads, *y_hat, &shape, &delta)?;
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, self.value(*a).shape(), grad.data())?;
                accumulate(grads, *b, self.value(*b).shape(), grad.data())?;
            }
            Op::Scale { x, factor } => {
                let delta: Vec<T> = grad.data().iter().map(|&g| g * *factor).collect();
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
            Op::WeightedSum { x, weights } => {
                let g = grad.data()[0];
                let delta: Vec<T> = weights.data().iter().map(|&w| w * g).collect();
                accumulate(grads, *x, self.value(*x).shape(), &delta)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_conv2d(
        &self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: (usize, usize),
        pad: (usize, usize),
        out_value: &Tensor<T>,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(kernels).shape().to_vec();
        let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, _, cout) = (ks[0], ks[1], ks[2], ks[3]);
        let os = out_value.shape();
        let (out_h, out_w) = (os[1], os[2]);

        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let gv = grad.data();
        let mut dx = vec![T::zero(); xv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut db = vec![T::zero(); cout];
        for b in 0..batch {
            for oh in 0..out_h {
                let ih0 = (oh * stride.0) as isize - pad.0 as isize;
                for ow in 0..out_w {
                    let iw0 = (ow * stride.1) as isize - pad.1 as isize;
                    let grow = &gv[((b * out_h + oh) * out_w + ow) * cout..][..cout];
                    for (d, &g) in db.iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                    for dkh in 0..kh {
                        let ih = ih0 + dkh as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for dkw in 0..kw {
                            let iw = iw0 + dkw as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            let xoff = ((b * h + ih as usize) * w + iw as usize) * cin;
                            let koff = (dkh * kw + dkw) * cin * cout;
                            for ci in 0..cin {
                                let xval = xv[xoff + ci];
                                let krow = &kv[koff + ci * cout..][..cout];
                                let dkrow = &mut dk[koff + ci * cout..][..cout];
                                let mut acc = T::zero();
                                for co in 0..cout {
                                    let g = grow[co];
                                    acc = acc + krow[co] * g;
                                    dkrow[co] = dkrow[co] + xval * g;
                                }
                                dx[xoff + ci] = dx[xoff + ci] + acc;
                            }
                        }
                    }
                }
            }
        }
        accumulate(grads, x, &xs, &dx)?;
        accumulate(grads, kernels, &ks, &dk)?;
        accumulate(grads, bias, &[cout], &db)?;
        Ok(())
    }
}

/// Output extent and leading pad for one convolution axis.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return config_err(format!(
                    "conv2d kernel extent {kernel} exceeds input extent {input} with valid padding"
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    shape: &[usize],
    delta: &[T],
) -> Result<()> {
    let slot = &mut grads[id.0];
    match slot {
        Some(g) => {
            for (dst, &d) in g.data_mut().iter_mut().zip(delta) {
                *dst = *dst + d;
            }
        }
        None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec())?);
        }
    }
    Ok(())
}

/// Validate a rank-2 batch of probability rows; returns (rows, classes).
fn check_distribution<T: Scalar>(t: &Tensor<T>, context: &str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return config_err(format!(
            "{context} expects shape [rows, classes>=2], got {shape:?}"
        ));
    }
    let (rows, classes) = (shape[0], shape[1]);
    for r in 0..rows {
        let mut sum = 0.0f64;
        for c in 0..classes {
            let v = t.data()[r * classes + c].to_f64();
            if v < -DISTRIBUTION_TOL {
                return config_err(format!(
                    "{context}: row {r} has negative probability {v}"
                ));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > DISTRIBUTION_TOL {
            return config_err(format!(
                "{context}: row {r} sums to {sum}, not a distribution"
            ));
        }
    }
    Ok((rows, classes))
}

fn check_one_hot<T: Scalar>(t: &Tensor<T>, context: &str) -> Result<()> {
    let shape = t.shape();
    let (rows, classes) = (shape[0], shape[1]);
    for r in 0..rows {
        let mut ones = 0usize;
        for c in 0..classes {
            let v = t.data()[r * classes + c].to_f64();
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return config_err(format!(
                    "{context}: row {r} entry {c} is {v}, expected exactly 0 or 1"
                ));
            }
        }
        if ones != 1 {
            return config_err(format!(
                "{context}: row {r} has {ones} ones, expected a one-hot row"
            ));
        }
    }
    Ok(())
}

fn resolve_active(active: Option<Vec<bool>>, rows: usize, context: &str) -> Result<Vec<bool>> {
    let active = active.unwrap_or_else(|| vec![true; rows]);
    if active.len() != rows {
        return config_err(format!(
            "{context}: row mask length {} does not match {rows} rows",
            active.len()
        ));
    }
    if !active.iter().any(|&a| a) {
        return config_err(format!("{context}: no active rows"));
    }
    Ok(active)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct-summation convolution oracle, independent of the tape kernel:
    /// iterates kernel positions per output pixel with explicit bounds math.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &[f64],
        stride: (usize, usize),
        pad: (usize, usize),
        out_shape: &[usize],
    ) -> Vec<f64> {
        let (xb, h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        let (oh_n, ow_n) = (out_shape[1], out_shape[2]);
        let mut out = Vec::new();
        for bi in 0..xb {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    for co in 0..cout {
                        let mut acc = b[co];
                        for dh in 0..kh {
                            for dw in 0..kw {
                                for ci in 0..cin {
                                    let ih = (oh * stride.0 + dh) as isize - pad.0 as isize;
                                    let iw = (ow * stride.1 + dw) as isize - pad.1 as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = x.data()
                                        [((bi * h + ih as usize) * w + iw as usize) * cin + ci];
                                    let ki = k.data()[((dh * kw + dw) * cin + ci) * cout + co];
                                    acc += xi * ki;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut tape = Tape::new();
        let x = tape
            .input(t(&[1, 3, 3, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]))
            .unwrap();
        let k = tape.input(t(&[1, 1, 1, 1], &[1.0])).unwrap();
        let b = tape.input(t(&[1], &[0.0])).unwrap();
        let y = tape.conv2d(x, k, b, (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv_zero_kernels_yield_zero_output() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[1, 4, 4, 2], 3.0f64)).unwrap();
        let k = tape.input(Tensor::zeros(&[3, 3, 2, 5])).unwrap();
        let b = tape.input(Tensor::zeros(&[5])).unwrap();
        let y = tape.conv2d(x, k, b, (1, 1), Padding::Same).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_ones_matches_hand_value_and_oracle() {
        // 3x3 input of ones, 2x2 kernel of ones, valid padding -> 2x2 of fours
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(&[1, 3, 3, 1], 1.0f64)).unwrap();
        let k = tape.input(Tensor::filled(&[2, 2, 1, 1], 1.0f64)).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let y = tape.conv2d(x, k, b, (1, 1), Padding::Valid).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);

        let oracle = conv_oracle(
            tape.value(x),
            tape.value(k),
            &[0.0],
            (1, 1),
            (0, 0),
            tape.value(y).shape(),
        );
        assert_eq!(tape.value(y).data(), &oracle[..]);
    }

    #[test]
    fn conv_same_padding_strided_matches_oracle() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 5, 4, 3], |_| rng.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 2, 3, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let xi = tape.input(x.clone()).unwrap();
        let ki = tape.input(k.clone()).unwrap();
        let bi = tape.input(b.clone()).unwrap();
        let y = tape.conv2d(xi, ki, bi, (2, 1), Padding::Same).unwrap();
        // H=5, kh=3, stride 2 -> out 3, pad_total = (3-1)*2+3-5 = 2, top 1
        // W=4, kw=2, stride 1 -> out 4, pad_total = 1, left 0
        assert_eq!(tape.value(y).shape(), &[2, 3, 4, 4]);
        let oracle = conv_oracle(&x, &k, b.data(), (2, 1), (1, 0), tape.value(y).shape());
        for (a, o) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-12, "{a} vs {o}");
        }
    }

    #[test]
    fn conv_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 3, 2])).unwrap();
        let k = tape.input(Tensor::zeros(&[2, 2, 5, 1])).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let err = tape.conv2d(x, k, b, (1, 1), Padding::Valid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3, 3, 2]") && msg.contains("[2, 2, 5, 1]"), "{msg}");
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 2, 1])).unwrap();
        let k = tape.input(Tensor::zeros(&[3, 3, 1, 1])).unwrap();
        let b = tape.input(Tensor::zeros(&[1])).unwrap();
        let err = tape.conv2d(x, k, b, (1, 1), Padding::Valid).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn max_pool_constant_input_and_basic_window() {
        let mut tape = Tape::new();
        let c = tape.input(Tensor::filled(&[1, 4, 4, 1], 2.5f64)).unwrap();
        let y = tape.max_pool2d(c, (2, 2), (2, 2)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));

        let x = tape.input(t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let y = tape.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first_maximum() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 2, 2, 1], &[5.0, 5.0, 1.0, 2.0])).unwrap();
        let y = tape.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_window_larger_than_input_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 2, 1])).unwrap();
        let err = tape.max_pool2d(x, (3, 3), (1, 1)).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("window"));
    }

    #[test]
    fn dense_identity_and_hand_values() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let w = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let b0 = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.dense(x, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let b3 = tape.input(t(&[2], &[3.0, 3.0])).unwrap();
        let y = tape.dense(x, w, b3).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);

        // x=(1,1), W=[[2,-1],[0,3]] -> (2, 2); cross-check by direct summation
        let x2 = tape.input(t(&[2], &[1.0, 1.0])).unwrap();
        let w2 = tape.input(t(&[2, 2], &[2.0, -1.0, 0.0, 3.0])).unwrap();
        let y2 = tape.dense(x2, w2, b0).unwrap();
        let oracle: Vec<f64> = (0..2)
            .map(|m| (0..2).map(|n| tape.value(x2).data()[n] * tape.value(w2).data()[n * 2 + m]).sum())
            .collect();
        assert_eq!(tape.value(y2).data(), &oracle[..]);
        assert_eq!(tape.value(y2).data(), &[2.0, 2.0]);
    }

    #[test]
    fn dense_shape_mismatch_is_config_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[3])).unwrap();
        let w = tape.input(Tensor::zeros(&[2, 2])).unwrap();
        let b = tape.input(Tensor::zeros(&[2])).unwrap();
        let err = tape.dense(x, w, b).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("[3]") && err.to_string().contains("[2, 2]"));
    }

    #[test]
    fn relu_values_and_gradient_convention() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        // derivative 0 at x<0 and exactly at x=0, 1 at x>0
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let neg = tape.input(t(&[2], &[-3.0, -0.5])).unwrap();
        let y = tape.relu(neg).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_example_from_sum() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[-1.0, 3.0])).unwrap();
        let y = tape.relu(x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_uniform_closed_form_and_shift_invariance() {
        let mut tape = Tape::new();
        let eq = tape.input(t(&[1, 4], &[0.7, 0.7, 0.7, 0.7])).unwrap();
        let y = tape.softmax(eq).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        // logits (0, ln 3) -> (1/4, 3/4)
        let x = tape.input(t(&[1, 2], &[0.0, 3.0f64.ln()])).unwrap();
        let y = tape.softmax(x).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);

        let logits = [0.3, -1.2, 2.0, 0.0];
        for c in [-100.0, -7.5, 42.0, 100.0] {
            let a = tape.input(t(&[1, 4], &logits)).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
            let b = tape.input(t(&[1, 4], &shifted)).unwrap();
            let ya = tape.softmax(a).unwrap();
            let yb = tape.softmax(b).unwrap();
            for (u, v) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
                assert!((u - v).abs() < 1e-12, "shift {c}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_positive_and_sum_to_one() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[16, 7], |_| rng.random_range(-50.0..50.0));
        let mut tape = Tape::new();
        let xi = tape.input(x).unwrap();
        let y = tape.softmax(xi).unwrap();
        for r in 0..16 {
            let row = &tape.value(y).data()[r * 7..][..7];
            assert!(row.iter().all(|&v| v > 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_logits() {
        let mut tape = Tape::new();
        // bypass input() checking by building the tensor first; input() itself rejects
        let err = tape.input(t(&[1, 2], &[f64::INFINITY, 0.0])).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -2.5])).unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn composite_softmax_cross_entropy_gradient_is_prediction_minus_target() {
        let mut tape = Tape::new();
        let logits = tape.input(t(&[1, 4], &[0.2, -0.7, 1.3, 0.1])).unwrap();
        let probs = tape.softmax(logits).unwrap();
        let targets = t(&[1, 4], &[0.0, 0.0, 1.0, 0.0]);
        let loss = tape.cross_entropy(probs, targets.clone(), None).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        let g = grads.wrt(logits).unwrap();
        for i in 0..4 {
            let expected = tape.value(probs).data()[i] - targets.data()[i];
            assert!((g.data()[i] - expected).abs() < 1e-9, "component {i}");
        }
    }

    #[test]
    fn cross_entropy_matches_analytic_values() {
        let mut tape = Tape::new();
        // prediction equals the one-hot target -> 0 up to the clamp
        let exact = tape.input(t(&[1, 3], &[0.0, 1.0, 0.0])).unwrap();
        let loss = tape
            .cross_entropy(exact, t(&[1, 3], &[0.0, 1.0, 0.0]), None)
            .unwrap();
        assert!(tape.scalar_value(loss).unwrap().abs() < 1e-9);

        // uniform prediction over 10 classes -> ln 10
        let udata = vec![0.1f64; 10];
        let uni = tape.input(Tensor::new(vec![1, 10], udata).unwrap()).unwrap();
        let mut target = vec![0.0f64; 10];
        target[3] = 1.0;
        let loss = tape
            .cross_entropy(uni, Tensor::new(vec![1, 10], target).unwrap(), None)
            .unwrap();
        assert!((tape.scalar_value(loss).unwrap() - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_row_mean_matches_scalar_oracle() {
        // rows with per-row losses ln 2 and ln 4
        let y_hat = t(&[2, 2], &[0.5, 0.5, 0.25, 0.75]);
        let y = t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        // independent scalar evaluation of the mean-over-rows definition
        let mut oracle = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                if y.data()[r * 2 + c] != 0.0 {
                    oracle -= y_hat.data()[r * 2 + c].ln();
                }
            }
        }
        oracle /= 2.0;
        let mut tape = Tape::new();
        let p = tape.input(y_hat).unwrap();
        let loss = tape.cross_entropy(p, y, None).unwrap();
        let v = tape.scalar_value(loss).unwrap();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 1.039_720_770_839_917_9).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_row_mask() {
        let mut tape = Tape::new();
        let p = tape.input(t(&[2, 2], &[0.5, 0.5, 0.5, 0.5])).unwrap();
        let err = tape
            .cross_entropy(p, t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Some(vec![false, false]))
            .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("no active rows"));
    }

    #[test]
    fn variance_loss_analytic_values() {
        let mut tape = Tape::new();
        let uni = tape.input(Tensor::filled(&[1, 10], 0.1f64)).unwrap();
        for sign in [VarianceSign::Uncertainty, VarianceSign::LiteralEq3] {
            let l = tape.variance_loss(uni, None, sign).unwrap();
            assert!(tape.scalar_value(l).unwrap().abs() < 1e-15);
        }

        // one-hot over 10 classes: variance (N-1)/N^2 = 0.09
        let mut oh = vec![0.0f64; 10];
        oh[2] = 1.0;
        let hot = tape.input(Tensor::new(vec![1, 10], oh).unwrap()).unwrap();
        let lit = tape
            .variance_loss(hot, None, VarianceSign::LiteralEq3)
            .unwrap();
        assert!((tape.scalar_value(lit).unwrap() + 0.09).abs() < 1e-12);
        let unc = tape
            .variance_loss(hot, None, VarianceSign::Uncertainty)
            .unwrap();
        assert!((tape.scalar_value(unc).unwrap() - 0.09).abs() < 1e-12);

        // (0.5, 0.5, 0, 0): variance 0.0625, literal sign -0.0625
        let half = tape.input(t(&[1, 4], &[0.5, 0.5, 0.0, 0.0])).unwrap();
        let l = tape
            .variance_loss(half, None, VarianceSign::LiteralEq3)
            .unwrap();
        assert!((tape.scalar_value(l).unwrap() + 0.0625).abs() < 1e-12);
    }

    #[test]
    fn mask_gradient_is_exactly_zero_on_masked_components() {
        let mut tape = Tape::new();
        let z = tape.input(t(&[1, 4], &[3.0, -2.0, 5.0, 7.0])).unwrap();
        let mask = t(&[1, 4], &[1.0, 1.0, 0.0, 0.0]);
        let masked = tape.mul_mask(z, mask).unwrap();
        assert_eq!(tape.value(masked).data(), &[3.0, -2.0, 0.0, 0.0]);
        let loss = tape.sum(masked).unwrap();
        let grads = tape.backward(loss, None).unwrap();
        assert_eq!(grads.wrt(z).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reports_numeric_loss_errors() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let err = tape.backward(x, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[1, 2], &[1.0, -1.0])).unwrap();
        let y = tape.layer_norm(a, 1e-5).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-4);

        let b = tape.input(t(&[1, 2], &[0.0, 2.0])).unwrap();
        let y = tape.layer_norm(b, 1e-5).unwrap();
        assert!((tape.value(y).data()[0] + 1.0).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 1.0).abs() < 1e-4);

        // constant row: epsilon path gives all zeros
        let c = tape.input(t(&[1, 3], &[4.0, 4.0, 4.0])).unwrap();
        let y = tape.layer_norm(c, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn determinism_identical_inputs_identical_bits() {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[2, 6, 6, 3], |_| rng.random_range(-1.0f64..1.0));
        let k = Tensor::from_fn(&[3, 3, 3, 4], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[4], |_| rng.random_range(-1.0..1.0));
        let run = || {
            let mut tape = Tape::new();
            let xi = tape.input(x.clone()).unwrap();
            let ki = tape.input(k.clone()).unwrap();
            let bi = tape.input(b.clone()).unwrap();
            let c = tape.conv2d(xi, ki, bi, (1, 1), Padding::Same).unwrap();
            let r = tape.relu(c).unwrap();
            let p = tape.max_pool2d(r, (2, 2), (2, 2)).unwrap();
            let g = tape.global_avg_pool(p).unwrap();
            tape.value(g).data().to_vec()
        };
        let a = run();
        let b2 = run();
        assert!(a.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gradient_accumulates_across_backward_calls() {
        use crate::numerics::params::ParamStore;
        let mut store = ParamStore::<f64>::new();
        store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param("w", store.value("w").unwrap().clone()).unwrap();
        let loss = tape.sum(w).unwrap();
        tape.backward(loss, Some(&mut store)).unwrap();
        tape.backward(loss, Some(&mut store)).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[2.0, 2.0]);
        store.zero_grads();
        assert_eq!(store.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }
}
