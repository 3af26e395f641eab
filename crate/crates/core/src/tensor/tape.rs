//! Eager tape-based reverse-mode differentiation.
//!
//! Ops execute immediately and record themselves; `backward` walks the tape
//! in reverse, accumulating gradients for every node that (transitively)
//! depends on a gradient-requiring leaf.

use super::conv::{
    channel_sum, conv_forward, conv_input_grad, conv_transpose_forward, conv_weight_grad,
    fold_padded, pad_input, resolve_geom,
};
use super::{ConvSpec, Scalar, Shape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{counter_hash, unit_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Deterministic dropout stream key: (seed, stream, step).
#[derive(Debug, Clone, Copy)]
struct DropKey {
    seed: u64,
    stream: u64,
    step: u64,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: ConvSpec,
    },
    Elu {
        input: NodeId,
    },
    Dropout {
        input: NodeId,
        rate: f64,
        key: DropKey,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    UpsampleNearest {
        input: NodeId,
        factor: usize,
    },
    SumAll {
        input: NodeId,
    },
    /// Mean over valid pixels of (x − gt)²; gt and mask are constants.
    MaskedSqDiffMean {
        input: NodeId,
        gt: Tensor<T>,
        mask: Tensor<T>,
        count: usize,
    },
    /// Mean over valid forward-difference pairs of the squared gradient,
    /// with circular wrap along width and no wrap along height.
    MaskedSmoothMean {
        input: NodeId,
        mask: Tensor<T>,
        count: usize,
    },
    WeightedSum {
        inputs: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
}

pub struct Tape<T: Scalar> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    needs: Vec<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` call, if this node required one.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs: bool) -> NodeId {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        NodeId(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape.c != spec.in_channels {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, spec expects {} (input {}, weight {})",
                x.shape.c, spec.in_channels, x.shape, w.shape
            )));
        }
        if w.shape != spec.weight_shape() {
            return Err(Error::shape(format!(
                "conv2d weight shape {} does not match spec shape {}",
                w.shape,
                spec.weight_shape()
            )));
        }
        if b.shape != spec.bias_shape() {
            return Err(Error::shape(format!(
                "conv2d bias shape {} does not match spec shape {}",
                b.shape,
                spec.bias_shape()
            )));
        }
        let geom = resolve_geom(spec, x.shape.h, x.shape.w);
        let xp = pad_input(x, &geom, spec.padding);
        let out = conv_forward(&xp, w, Some(b), &geom);
        let needs = self.needs[input.0] || self.needs[weight.0] || self.needs[bias.0];
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                spec: *spec,
            },
            out,
            needs,
        ))
    }

    /// Adjoint of a stride-s "same" conv from the (s·h, s·w) grid down to
    /// (h, w); output dims are exactly stride × input dims.
    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        if spec.stride != 2 {
            return Err(Error::config(format!(
                "conv_transpose2d supports stride 2 only, got {}",
                spec.stride
            )));
        }
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape.c != spec.in_channels {
            return Err(Error::shape(format!(
                "conv_transpose2d input has {} channels, spec expects {} (input {}, weight {})",
                x.shape.c, spec.in_channels, x.shape, w.shape
            )));
        }
        if w.shape != spec.transpose_weight_shape() {
            return Err(Error::shape(format!(
                "conv_transpose2d weight shape {} does not match spec shape {}",
                w.shape,
                spec.transpose_weight_shape()
            )));
        }
        if b.shape != spec.bias_shape() {
            return Err(Error::shape(format!(
                "conv_transpose2d bias shape {} does not match spec shape {}",
                b.shape,
                spec.bias_shape()
            )));
        }
        let out_h = x.shape.h * spec.stride;
        let out_w = x.shape.w * spec.stride;
        // Geometry of the conv this op is the transpose of.
        let geom = resolve_geom(
            &ConvSpec {
                in_channels: spec.out_channels,
                out_channels: spec.in_channels,
                ..*spec
            },
            out_h,
            out_w,
        );
        debug_assert_eq!((geom.out_h, geom.out_w), (x.shape.h, x.shape.w));
        let out = conv_transpose_forward(x, w, Some(b), &geom, spec.padding);
        let needs = self.needs[input.0] || self.needs[weight.0] || self.needs[bias.0];
        Ok(self.push(
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                spec: *spec,
            },
            out,
            needs,
        ))
    }

    pub fn elu(&mut self, input: NodeId) -> NodeId {
        let out = Tensor {
            shape: self.value(input).shape,
            data: self
                .value(input)
                .data
                .iter()
                .map(|&x| if x > T::ZERO { x } else { x.exp() - T::ONE })
                .collect(),
        };
        let needs = self.needs[input.0];
        self.push(Op::Elu { input }, out, needs)
    }

    /// Inverted dropout with a counter-based mask keyed on
    /// (seed, stream, step, element). Identity when `train` is false.
    pub fn dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        seed: u64,
        stream: u64,
        step: u64,
        train: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let key = DropKey { seed, stream, step };
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let x = self.value(input);
        let data = x
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if unit_f64(counter_hash(key.seed, key.stream, key.step, i as u64)) >= rate {
                    v * scale
                } else {
                    T::ZERO
                }
            })
            .collect();
        let out = Tensor {
            shape: x.shape,
            data,
        };
        let needs = self.needs[input.0];
        Ok(self.push(Op::Dropout { input, rate, key }, out, needs))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::shape("concat of zero tensors".to_string()));
        }
        let first = self.value(inputs[0]).shape;
        let mut c_total = 0;
        for &id in inputs {
            let s = self.value(id).shape;
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(format!(
                    "concat dims mismatch: {s} vs {first}"
                )));
            }
            c_total += s.c;
        }
        let shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut out = Tensor::zeros(shape);
        let plane = first.h * first.w;
        for ni in 0..first.n {
            let mut c_off = 0;
            for &id in inputs {
                let src = self.value(id);
                let ci = src.shape.c;
                let src_base = ni * ci * plane;
                let dst_base = (ni * c_total + c_off) * plane;
                out.data[dst_base..dst_base + ci * plane]
                    .copy_from_slice(&src.data[src_base..src_base + ci * plane]);
                c_off += ci;
            }
        }
        let needs = inputs.iter().any(|&id| self.needs[id.0]);
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape, self.value(b).shape);
        if sa != sb {
            return Err(Error::shape(format!("add shape mismatch: {sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor { shape: sa, data };
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape, self.value(b).shape);
        if sa != sb {
            return Err(Error::shape(format!("mul shape mismatch: {sa} vs {sb}")));
        }
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor { shape: sa, data };
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Op::Mul { a, b }, out, needs))
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1".to_string()));
        }
        let x = self.value(input);
        let Shape { n, c, h, w } = x.shape;
        let shape = Shape::new(n, c, h * factor, w * factor);
        let mut out = Tensor::zeros(shape);
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..h * factor {
                    let iy = oy / factor;
                    let src = x.shape.idx(ni, ci, iy, 0);
                    let dst = shape.idx(ni, ci, oy, 0);
                    for ox in 0..w * factor {
                        out.data[dst + ox] = x.data[src + ox / factor];
                    }
                }
            }
        }
        let needs = self.needs[input.0];
        Ok(self.push(Op::UpsampleNearest { input, factor }, out, needs))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in &self.value(input).data {
            acc += v;
        }
        let needs = self.needs[input.0];
        self.push(Op::SumAll { input }, Tensor::scalar(acc), needs)
    }

    /// Σ_valid (x − gt)² / count; exactly 0 (with no gradient flow) when the
    /// mask is empty.
    pub fn masked_sq_diff_mean(
        &mut self,
        input: NodeId,
        gt: &Tensor<T>,
        mask: &Tensor<T>,
    ) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape != gt.shape || x.shape != mask.shape {
            return Err(Error::shape(format!(
                "masked loss shapes differ: pred {}, gt {}, mask {}",
                x.shape, gt.shape, mask.shape
            )));
        }
        let mut count = 0usize;
        let mut acc = T::ZERO;
        for i in 0..x.data.len() {
            if mask.data[i] > T::ZERO {
                let d = x.data[i] - gt.data[i];
                acc += d * d;
                count += 1;
            }
        }
        let value = if count == 0 {
            T::ZERO
        } else {
            acc / T::from_f64(count as f64)
        };
        let needs = self.needs[input.0];
        Ok(self.push(
            Op::MaskedSqDiffMean {
                input,
                gt: gt.clone(),
                mask: mask.clone(),
                count,
            },
            Tensor::scalar(value),
            needs,
        ))
    }

    /// Squared forward-difference gradient of the prediction, averaged over
    /// pairs whose two pixels are both valid. Width differences wrap
    /// (last column to first); height differences stop at the last row.
    pub fn masked_smooth_mean(&mut self, input: NodeId, mask: &Tensor<T>) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape != mask.shape {
            return Err(Error::shape(format!(
                "masked smooth shapes differ: pred {}, mask {}",
                x.shape, mask.shape
            )));
        }
        let Shape { n, c, h, w } = x.shape;
        let mut count = 0usize;
        let mut acc = T::ZERO;
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    let row = x.shape.idx(ni, ci, y, 0);
                    for xx in 0..w {
                        let x2 = (xx + 1) % w;
                        if mask.data[row + xx] > T::ZERO && mask.data[row + x2] > T::ZERO {
                            let d = x.data[row + x2] - x.data[row + xx];
                            acc += d * d;
                            count += 1;
                        }
                        if y + 1 < h {
                            let below = row + w + xx;
                            if mask.data[row + xx] > T::ZERO && mask.data[below] > T::ZERO {
                                let d = x.data[below] - x.data[row + xx];
                                acc += d * d;
                                count += 1;
                            }
                        }
                    }
                }
            }
        }
        let value = if count == 0 {
            T::ZERO
        } else {
            acc / T::from_f64(count as f64)
        };
        let needs = self.needs[input.0];
        Ok(self.push(
            Op::MaskedSmoothMean {
                input,
                mask: mask.clone(),
                count,
            },
            Tensor::scalar(value),
            needs,
        ))
    }

    /// Σ coeff_i · scalar_i.
    pub fn weighted_sum(&mut self, inputs: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if inputs.len() != coeffs.len() || inputs.is_empty() {
            return Err(Error::shape(format!(
                "weighted_sum needs matching nonempty inputs/coeffs, got {}/{}",
                inputs.len(),
                coeffs.len()
            )));
        }
        let mut acc = T::ZERO;
        for (&id, &k) in inputs.iter().zip(coeffs) {
            let v = self.value(id);
            if v.shape.numel() != 1 {
                return Err(Error::shape(format!(
                    "weighted_sum input must be scalar, got {}",
                    v.shape
                )));
            }
            acc += v.item() * T::from_f64(k);
        }
        let needs = inputs.iter().any(|&id| self.needs[id.0]);
        Ok(self.push(
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                coeffs: coeffs.to_vec(),
            },
            Tensor::scalar(acc),
            needs,
        ))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        if !self.needs[id.0] {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    /// Reverse-mode accumulation from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).shape.numel() != 1 {
            return Err(Error::config(format!(
                "backward requires a scalar loss, got shape {}",
                self.value(loss).shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g_out) = self.grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let (input, weight, bias, spec) = (*input, *weight, *bias, *spec);
                    let x = &self.values[input.0];
                    let geom = resolve_geom(&spec, x.shape.h, x.shape.w);
                    if self.needs[input.0] {
                        let pg = conv_input_grad(&g_out, &self.values[weight.0], &geom);
                        let gi = fold_padded(&pg, &geom, spec.padding);
                        self.accumulate(input, gi);
                    }
                    if self.needs[weight.0] {
                        let xp = pad_input(&self.values[input.0], &geom, spec.padding);
                        let wg = conv_weight_grad(&xp, &g_out, &geom);
                        self.accumulate(weight, wg);
                    }
                    if self.needs[bias.0] {
                        self.accumulate(bias, channel_sum(&g_out));
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    spec,
                } => {
                    let (input, weight, bias, spec) = (*input, *weight, *bias, *spec);
                    let x = &self.values[input.0];
                    let geom = resolve_geom(
                        &ConvSpec {
                            in_channels: spec.out_channels,
                            out_channels: spec.in_channels,
                            ..spec
                        },
                        x.shape.h * spec.stride,
                        x.shape.w * spec.stride,
                    );
                    let gp = pad_input(&g_out, &geom, spec.padding);
                    if self.needs[input.0] {
                        let gi = conv_forward(&gp, &self.values[weight.0], None, &geom);
                        self.accumulate(input, gi);
                    }
                    if self.needs[weight.0] {
                        let wg = conv_weight_grad(&gp, &self.values[input.0], &geom);
                        self.accumulate(weight, wg);
                    }
                    if self.needs[bias.0] {
                        self.accumulate(bias, channel_sum(&g_out));
                    }
                }
                Op::Elu { input } => {
                    let input = *input;
                    if self.needs[input.0] {
                        let y = &self.values[i];
                        let data = g_out
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&g, &yv)| if yv > T::ZERO { g } else { g * (yv + T::ONE) })
                            .collect();
                        self.accumulate(
                            input,
                            Tensor {
                                shape: y.shape,
                                data,
                            },
                        );
                    }
                }
                Op::Dropout { input, rate, key } => {
                    let (input, rate, key) = (*input, *rate, *key);
                    if self.needs[input.0] {
                        let scale = T::from_f64(1.0 / (1.0 - rate));
                        let data = g_out
                            .data
                            .iter()
                            .enumerate()
                            .map(|(idx, &g)| {
                                if unit_f64(counter_hash(key.seed, key.stream, key.step, idx as u64))
                                    >= rate
                                {
                                    g * scale
                                } else {
                                    T::ZERO
                                }
                            })
                            .collect();
                        self.accumulate(
                            input,
                            Tensor {
                                shape: g_out.shape,
                                data,
                            },
                        );
                    }
                }
                Op::Concat { inputs } => {
                    let inputs = inputs.clone();
                    let plane = g_out.shape.h * g_out.shape.w;
                    let c_total = g_out.shape.c;
                    let mut c_off = 0;
                    for id in inputs {
                        let s = self.values[id.0].shape;
                        if self.needs[id.0] {
                            let mut gi = Tensor::zeros(s);
                            for ni in 0..s.n {
                                let src = (ni * c_total + c_off) * plane;
                                let dst = ni * s.c * plane;
                                gi.data[dst..dst + s.c * plane]
                                    .copy_from_slice(&g_out.data[src..src + s.c * plane]);
                            }
                            self.accumulate(id, gi);
                        }
                        c_off += s.c;
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs[a.0] {
                        self.accumulate(a, g_out.clone());
                    }
                    if self.needs[b.0] {
                        self.accumulate(b, g_out.clone());
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs[a.0] {
                        let data = g_out
                            .data
                            .iter()
                            .zip(&self.values[b.0].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(
                            a,
                            Tensor {
                                shape: g_out.shape,
                                data,
                            },
                        );
                    }
                    if self.needs[b.0] {
                        let data = g_out
                            .data
                            .iter()
                            .zip(&self.values[a.0].data)
                            .map(|(&g, &v)| g * v)
                            .collect();
                        self.accumulate(
                            b,
                            Tensor {
                                shape: g_out.shape,
                                data,
                            },
                        );
                    }
                }
                Op::UpsampleNearest { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    if self.needs[input.0] {
                        let s = self.values[input.0].shape;
                        let mut gi = Tensor::zeros(s);
                        for ni in 0..s.n {
                            for ci in 0..s.c {
                                for oy in 0..s.h * factor {
                                    let src = g_out.shape.idx(ni, ci, oy, 0);
                                    let dst = s.idx(ni, ci, oy / factor, 0);
                                    for ox in 0..s.w * factor {
                                        gi.data[dst + ox / factor] += g_out.data[src + ox];
                                    }
                                }
                            }
                        }
                        self.accumulate(input, gi);
                    }
                }
                Op::SumAll { input } => {
                    let input = *input;
                    if self.needs[input.0] {
                        let s = self.values[input.0].shape;
                        self.accumulate(input, Tensor::filled(s, g_out.item()));
                    }
                }
                Op::MaskedSqDiffMean {
                    input,
                    gt,
                    mask,
                    count,
                } => {
                    let input = *input;
                    if self.needs[input.0] && *count > 0 {
                        let x = &self.values[input.0];
                        let inv = T::from_f64(1.0 / *count as f64);
                        let two = T::from_f64(2.0);
                        let g = g_out.item();
                        let data = (0..x.data.len())
                            .map(|idx| {
                                if mask.data[idx] > T::ZERO {
                                    g * two * (x.data[idx] - gt.data[idx]) * inv
                                } else {
                                    T::ZERO
                                }
                            })
                            .collect();
                        self.accumulate(
                            input,
                            Tensor {
                                shape: x.shape,
                                data,
                            },
                        );
                    }
                }
                Op::MaskedSmoothMean { input, mask, count } => {
                    let input = *input;
                    if self.needs[input.0] && *count > 0 {
                        let x = &self.values[input.0];
                        let Shape { n, c, h, w } = x.shape;
                        let inv = T::from_f64(1.0 / *count as f64);
                        let two = T::from_f64(2.0);
                        let g = g_out.item();
                        let scale = g * two * inv;
                        let mut gi = Tensor::zeros(x.shape);
                        for ni in 0..n {
                            for ci in 0..c {
                                for y in 0..h {
                                    let row = x.shape.idx(ni, ci, y, 0);
                                    for xx in 0..w {
                                        let x2 = (xx + 1) % w;
                                        if mask.data[row + xx] > T::ZERO
                                            && mask.data[row + x2] > T::ZERO
                                        {
                                            let d =
                                                scale * (x.data[row + x2] - x.data[row + xx]);
                                            gi.data[row + x2] += d;
                                            gi.data[row + xx] += -d;
                                        }
                                        if y + 1 < h {
                                            let below = row + w + xx;
                                            if mask.data[row + xx] > T::ZERO
                                                && mask.data[below] > T::ZERO
                                            {
                                                let d = scale
                                                    * (x.data[below] - x.data[row + xx]);
                                                gi.data[below] += d;
                                                gi.data[row + xx] += -d;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accumulate(input, gi);
                    }
                }
                Op::WeightedSum { inputs, coeffs } => {
                    let pairs: Vec<(NodeId, f64)> =
                        inputs.iter().copied().zip(coeffs.iter().copied()).collect();
                    let g = g_out.item();
                    for (id, k) in pairs {
                        if self.needs[id.0] {
                            self.accumulate(id, Tensor::scalar(g * T::from_f64(k)));
                        }
                    }
                }
            }
            self.grads[i] = Some(g_out);
        }
        // Leaves that the loss never reached have exactly zero gradient
        // (e.g. parameters behind a fully masked-out loss term).
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Leaf) && self.needs[i] && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(self.values[i].shape));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PadMode;

    fn sphere_spec(ic: usize, oc: usize, k: (usize, usize)) -> ConvSpec {
        ConvSpec {
            in_channels: ic,
            out_channels: oc,
            kernel: k,
            stride: 1,
            dilation: 1,
            padding: PadMode::Sphere,
        }
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::SplitMix64::new(seed);
        Tensor::from_vec(
            shape,
            (0..shape.numel()).map(|_| rng.range(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn zero_bias(tape: &mut Tape<f64>, oc: usize) -> NodeId {
        tape.leaf(Tensor::zeros(Shape::new(1, oc, 1, 1)), false)
    }

    #[test]
    fn conv_ones_center_is_nine() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0), false);
        let w = tape.leaf(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0), false);
        let b = zero_bias(&mut tape, 1);
        let y = tape.conv2d(x, w, b, &sphere_spec(1, 1, (3, 3))).unwrap();
        assert_eq!(tape.value(y).data[4], 9.0);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 2, 4, 6), 5);
        let x = tape.leaf(xt.clone(), false);
        // 1x1 identity: w[o][i] = δ_oi.
        let mut w = Tensor::zeros(Shape::new(2, 2, 1, 1));
        w.data[0] = 1.0;
        w.data[3] = 1.0;
        let w = tape.leaf(w, false);
        let b = zero_bias(&mut tape, 2);
        let y = tape.conv2d(x, w, b, &sphere_spec(2, 2, (1, 1))).unwrap();
        assert_eq!(tape.value(y).data, xt.data);
    }

    #[test]
    fn sphere_conv_is_shift_equivariant_bit_exact() {
        let shape = Shape::new(1, 2, 5, 8);
        let xt = rand_tensor(shape, 9);
        // Shift columns by 3.
        let mut shifted = Tensor::zeros(shape);
        for ni in 0..1 {
            for c in 0..2 {
                for y in 0..5 {
                    for x in 0..8 {
                        shifted.data[shape.idx(ni, c, y, (x + 3) % 8)] =
                            xt.data[shape.idx(ni, c, y, x)];
                    }
                }
            }
        }
        let wt = rand_tensor(Shape::new(3, 2, 3, 3), 10);
        let bt = rand_tensor(Shape::new(1, 3, 1, 1), 11);

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(input, false);
            let w = tape.leaf(wt.clone(), false);
            let b = tape.leaf(bt.clone(), false);
            let y = tape.conv2d(x, w, b, &sphere_spec(2, 3, (3, 3))).unwrap();
            tape.value(y).clone()
        };
        let y = run(xt);
        let y_shifted = run(shifted);
        let os = y.shape;
        for ni in 0..os.n {
            for c in 0..os.c {
                for yy in 0..os.h {
                    for x in 0..os.w {
                        assert_eq!(
                            y.data[os.idx(ni, c, yy, x)].to_bits(),
                            y_shifted.data[os.idx(ni, c, yy, (x + 3) % 8)].to_bits()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_lists_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::new(1, 3, 4, 8)), false);
        let w = tape.leaf(Tensor::zeros(Shape::new(2, 2, 3, 3)), false);
        let b = zero_bias(&mut tape, 2);
        let err = tape.conv2d(x, w, b, &sphere_spec(2, 2, (3, 3))).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x3x4x8") && msg.contains("2x2x3x3"), "{msg}");
    }

    #[test]
    fn transpose_doubles_spatial_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 1, 2, 2), 1), false);
        let w = tape.leaf(rand_tensor(Shape::new(1, 1, 3, 3), 2), false);
        let b = zero_bias(&mut tape, 1);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 2,
            dilation: 1,
            padding: PadMode::Zero,
        };
        let y = tape.conv_transpose2d(x, w, b, &spec).unwrap();
        assert_eq!(tape.value(y).shape, Shape::new(1, 1, 4, 4));
    }

    #[test]
    fn transpose_impulse_interleaves_zeros() {
        // With a centered unit impulse kernel the transpose writes each input
        // sample to one output cell of its 2x2 block, zeros elsewhere.
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 1, 3, 3), 3);
        let x = tape.leaf(xt.clone(), false);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.data[4] = 1.0; // center tap
        let w = tape.leaf(w, false);
        let b = zero_bias(&mut tape, 1);
        let spec = ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel: (3, 3),
            stride: 2,
            dilation: 1,
            padding: PadMode::Zero,
        };
        let y = tape.conv_transpose2d(x, w, b, &spec).unwrap();
        let yv = tape.value(y);
        let mut nonzero = 0;
        for oy in 0..6 {
            for ox in 0..6 {
                let v = yv.data[yv.shape.idx(0, 0, oy, ox)];
                if v != 0.0 {
                    nonzero += 1;
                    // Center tap with "same" padding maps input (i,j) to
                    // output (2i+1, 2j+1).
                    assert_eq!(oy % 2, 1);
                    assert_eq!(ox % 2, 1);
                    assert_eq!(v, xt.data[xt.shape.idx(0, 0, oy / 2, ox / 2)]);
                }
            }
        }
        assert_eq!(nonzero, 9);
    }

    #[test]
    fn transpose_matches_bruteforce_scatter() {
        // Independent scatter-add oracle over a random 3x3 input.
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: (3, 3),
            stride: 2,
            dilation: 1,
            padding: PadMode::Sphere,
        };
        let xt = rand_tensor(Shape::new(1, 2, 3, 3), 21);
        let wt = rand_tensor(Shape::new(2, 3, 3, 3), 22);
        let bt = rand_tensor(Shape::new(1, 3, 1, 1), 23);

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone(), false);
        let w = tape.leaf(wt.clone(), false);
        let b = tape.leaf(bt.clone(), false);
        let y = tape.conv_transpose2d(x, w, b, &spec).unwrap();
        let fast = tape.value(y).clone();

        let (out_h, out_w) = (6usize, 6usize);
        let g = resolve_geom(
            &ConvSpec {
                in_channels: 3,
                out_channels: 2,
                ..spec
            },
            out_h,
            out_w,
        );
        let oshape = Shape::new(1, 3, out_h, out_w);
        let mut slow = Tensor::zeros(oshape);
        for co in 0..3 {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    slow.data[oshape.idx(0, co, oy, ox)] = bt.data[co];
                }
            }
        }
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..3 {
                    let xv = xt.data[xt.shape.idx(0, ci, iy, ix)];
                    for co in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let wv = wt.data[wt.shape.idx(ci, co, ky, kx)];
                                let py = iy * 2 + ky;
                                let px = ix * 2 + kx;
                                let sy = py as isize - g.pad_top as isize;
                                if sy < 0 || sy >= out_h as isize {
                                    continue;
                                }
                                let sx = (px as isize - g.pad_left as isize)
                                    .rem_euclid(out_w as isize);
                                slow.data[oshape.idx(0, co, sy as usize, sx as usize)] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        for (a, e) in fast.data.iter().zip(&slow.data) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn elu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0f64, 1.0, -20.0]).unwrap(),
            false,
        );
        let y = tape.elu(x);
        let v = &tape.value(y).data;
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - ((-20.0f64).exp() - 1.0)).abs() < 1e-8);
        assert!((v[2] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn dropout_rate_zero_and_train_off_are_identity() {
        let mut tape = Tape::new();
        let xt = rand_tensor(Shape::new(1, 2, 3, 4), 31);
        let x = tape.leaf(xt.clone(), false);
        let same = tape.dropout(x, 0.0, 1, 2, 3, true).unwrap();
        assert_eq!(same, x);
        let same = tape.dropout(x, 0.5, 1, 2, 3, false).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn dropout_deterministic_and_scaled() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 8, 8), 1.0f64), false);
            let y = tape.dropout(x, 0.25, 7, 1, 42, true).unwrap();
            tape.value(y).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.data, b.data);
        for &v in &a.data {
            assert!(v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12);
        }
        let kept = a.data.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 32 && kept < 64, "kept {kept} of 64 at rate 0.25");
        assert!(run().data == a.data);
    }

    #[test]
    fn dropout_bad_rate_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)), false);
        assert!(tape.dropout(x, 1.0, 0, 0, 0, true).is_err());
        assert!(tape.dropout(x, -0.1, 0, 0, 0, true).is_err());
    }

    #[test]
    fn upsample_nearest_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            tape.value(y).data,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn concat_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2)), false);
        let b = tape.leaf(Tensor::<f64>::zeros(Shape::new(1, 1, 3, 2)), false);
        assert!(tape.concat(&[a, b]).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(2, 1, 3, 4), 13), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 1, 2, 2), 1), true);
        let err = tape.backward(x).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn masked_loss_empty_mask_zeroes_everything() {
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(Shape::new(1, 1, 4, 4), 17), true);
        let w = tape.leaf(rand_tensor(Shape::new(1, 1, 3, 3), 18), true);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)), true);
        let y = tape.conv2d(x, w, b, &sphere_spec(1, 1, (3, 3))).unwrap();
        let gt = Tensor::filled(Shape::new(1, 1, 4, 4), 1.0);
        let mask = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let loss = tape.masked_sq_diff_mean(y, &gt, &mask).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).unwrap().data.iter().all(|&g| g == 0.0));
        assert!(tape.grad(b).unwrap().data.iter().all(|&g| g == 0.0));
        assert!(tape.grad(x).unwrap().data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn smooth_term_zero_for_constant_prediction() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(Shape::new(1, 1, 4, 8), 3.25f64), true);
        let mask = Tensor::filled(Shape::new(1, 1, 4, 8), 1.0);
        let loss = tape.masked_smooth_mean(x, &mask).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn smooth_term_wraps_longitude() {
        // Only the wrap pair (last -> first column) differs.
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0f64, 0.0, 0.0, 2.0]).unwrap(),
            false,
        );
        let mask = Tensor::filled(Shape::new(1, 1, 1, 4), 1.0);
        let loss = tape.masked_smooth_mean(x, &mask).unwrap();
        // Pairs: (0,1)=0, (1,2)=0, (2,3)=4, (3,0 wrap)=4 → mean = 2.
        assert_eq!(tape.value(loss).item(), 2.0);
    }
}
