//! Eager reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended after their inputs, so walking the record backwards visits
//! each node after all of its consumers. Adjoints flow through frozen
//! operands, but frozen leaves never receive gradient storage.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use crate::error::{FrptError, Result};
use crate::kernels::{self, ConvGeom, MappingTables};
use crate::tensor::{numel, Real, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op<T: Real> {
    Leaf { learnable: bool },
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Reshape { input: Var },
    Permute3 { input: Var, perm: [usize; 3] },
    Softmax { input: Var },
    InstanceNorm { input: Var, inv_std: Vec<T> },
    Fc { input: Var, weight: Var, bias: Option<Var> },
    Relu { input: Var },
    Sigmoid { input: Var },
    Gap { input: Var },
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Mapping { map: Var, tables: MappingTables<T> },
    Warp { image: Var, grid: Var },
    ScaleChannels { input: Var, weights: Var },
    BlendChannels { a: Var, b: Var, weights: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Affine { input: Var, scale: T },
    Sum { input: Var },
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Forward record for one evaluation. Supports exactly one backward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Adjoints of the learnable leaves of one record.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: BTreeMap<Var, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(&var).map(|g| g.as_slice())
    }

    /// Accumulates the adjoint of `var` into `tensor.grad`. No-op for
    /// frozen tensors.
    pub fn write_into(&self, var: Var, tensor: &mut Tensor<T>) {
        if !tensor.requires_grad {
            return;
        }
        let Some(g) = self.grads.get(&var) else { return };
        match tensor.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => tensor.grad = Some(g.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err<S: Into<String>>(msg: S) -> FrptError {
    FrptError::Shape(msg.into())
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor. Learnable iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let learnable = tensor.requires_grad;
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf { learnable }, learnable)
    }

    /// Registers a tensor that never receives an adjoint.
    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf { learnable: false }, false)
    }

    /// Cross-correlation with zero padding. `input` is `[C_in, H, W]`,
    /// `kernel` `[C_out, C_in, k, k]` with k odd, `bias` `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if is.len() != 3 || ks.len() != 4 {
            return Err(shape_err(format!("conv2d expects [C,H,W] and [Co,Ci,k,k], got {is:?} and {ks:?}")));
        }
        if ks[1] != is[0] {
            return Err(shape_err(format!("conv2d input has {} channels, kernel expects {}", is[0], ks[1])));
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(shape_err(format!("conv2d kernel must be square and odd, got {}x{}", ks[2], ks[3])));
        }
        if stride == 0 {
            return Err(shape_err("conv2d stride must be positive"));
        }
        if is[1] + 2 * padding < ks[2] || is[2] + 2 * padding < ks[2] {
            return Err(shape_err("conv2d kernel larger than padded input"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(shape_err(format!("conv2d bias must be [{}], got {:?}", ks[0], self.shape(b))));
            }
        }
        let geom = ConvGeom { c_in: is[0], h: is[1], w: is[2], c_out: ks[0], k: ks[2], stride, padding };
        let out = kernels::conv2d(&geom, self.value(input), self.value(kernel), bias.map(|b| self.value(b)));
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(vec![geom.c_out, geom.out_h(), geom.out_w()], out, Op::Conv2d { input, kernel, bias, geom }, needs))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(input).len() {
            return Err(shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape(input))));
        }
        let value = self.value(input).to_vec();
        let needs = self.needs(&[input]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input }, needs))
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, input: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let mut sorted = perm;
        sorted.sort_unstable();
        if s.len() != 3 || sorted != [0, 1, 2] {
            return Err(shape_err(format!("permute3 of {s:?} by {perm:?}")));
        }
        let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
        let src = self.value(input);
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&s, perm, |src_idx, dst_idx| out[dst_idx] = src[src_idx]);
        let needs = self.needs(&[input]);
        Ok(self.push(out_shape, out, Op::Permute3 { input, perm }, needs))
    }

    /// Softmax over all entries.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.iter().any(|v| v.is_nan()) {
            return Err(FrptError::InvalidValue("softmax input contains NaN".into()));
        }
        let out = kernels::softmax(x);
        let needs = self.needs(&[input]);
        Ok(self.push(self.shape(input).to_vec(), out, Op::Softmax { input }, needs))
    }

    /// Parameter-free per-channel normalization of a `[C, H, W]` map.
    pub fn instance_norm(&mut self, input: Var, eps: T) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("instance_norm expects [C,H,W], got {s:?}")));
        }
        if eps <= T::zero() {
            return Err(FrptError::InvalidValue("instance_norm epsilon must be positive".into()));
        }
        let (out, inv_std) = kernels::instance_norm(self.value(input), s[0], eps);
        let needs = self.needs(&[input]);
        Ok(self.push(s, out, Op::InstanceNorm { input, inv_std }, needs))
    }

    /// `weight · input + bias` with `weight` `[D_out, D_in]`.
    pub fn fc(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        let d_in = self.value(input).len();
        if ws.len() != 2 || ws[1] != d_in || self.shape(input).len() != 1 {
            return Err(shape_err(format!("fc weight {ws:?} against input {:?}", self.shape(input))));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err(format!("fc bias must be [{}], got {:?}", ws[0], self.shape(b))));
            }
        }
        let x = self.value(input);
        let w = self.value(weight);
        let out: Vec<T> = (0..ws[0])
            .map(|o| {
                let dot: T = w[o * d_in..(o + 1) * d_in].iter().zip(x).map(|(&a, &b)| a * b).sum();
                dot + bias.map_or(T::zero(), |b| self.value(b)[o])
            })
            .collect();
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(vec![ws[0]], out, Op::Fc { input, weight, bias }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let needs = self.needs(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Relu { input }, needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect();
        let needs = self.needs(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Sigmoid { input }, needs)
    }

    /// Global average pooling `[C, H, W] -> [C]`.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(shape_err(format!("gap expects [C,H,W], got {s:?}")));
        }
        let n = s[1] * s[2];
        let nf = T::from_usize(n).unwrap();
        let out = self.value(input).chunks(n).map(|c| c.iter().copied().sum::<T>() / nf).collect();
        let needs = self.needs(&[input]);
        Ok(self.push(vec![s[0]], out, Op::Gap { input }, needs))
    }

    /// `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if self.shape(logits).len() != 1 {
            return Err(shape_err("cross_entropy expects a logit vector"));
        }
        if label >= x.len() {
            return Err(FrptError::InvalidValue(format!("label {label} outside {} classes", x.len())));
        }
        let loss = kernels::log_sum_exp(x) - x[label];
        let probs = kernels::softmax(x);
        let needs = self.needs(&[logits]);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, label, probs }, needs))
    }

    /// Saliency-weighted sampling grid `[2, out_h, out_w]` from a normalized
    /// `[H_S, W_S]` map.
    pub fn mapping(&mut self, map: Var, out_h: usize, out_w: usize, gaussian_std: f64) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err(format!("mapping of {s:?} to {out_h}x{out_w}")));
        }
        if !(gaussian_std > 0.0) {
            return Err(FrptError::InvalidValue("gaussian_std must be positive".into()));
        }
        let (out, tables) = kernels::mapping(self.value(map), s[0], s[1], out_h, out_w, gaussian_std);
        let needs = self.needs(&[map]);
        Ok(self.push(vec![2, out_h, out_w], out, Op::Mapping { map, tables }, needs))
    }

    /// Bilinear resampling of `[C, H, W]` by a `[2, H, W]` grid.
    pub fn warp(&mut self, image: Var, grid: Var) -> Result<Var> {
        let is = self.shape(image).to_vec();
        let gs = self.shape(grid).to_vec();
        if is.len() != 3 || gs != [2, is[1], is[2]] {
            return Err(shape_err(format!("warp image {is:?} with grid {gs:?}")));
        }
        let out = kernels::warp(self.value(image), is[0], is[1], is[2], self.value(grid));
        let needs = self.needs(&[image, grid]);
        Ok(self.push(is, out, Op::Warp { image, grid }, needs))
    }

    /// Multiplies channel `c` of a `[C, ...]` tensor by `weights[c]`.
    pub fn scale_channels(&mut self, input: Var, weights: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if self.shape(weights) != [s[0]] {
            return Err(shape_err(format!("channel weights {:?} against {s:?}", self.shape(weights))));
        }
        let n = numel(&s[1..]);
        let w = self.value(weights);
        let out = self
            .value(input)
            .chunks(n)
            .zip(w)
            .flat_map(|(c, &wc)| c.iter().map(move |&v| v * wc))
            .collect();
        let needs = self.needs(&[input, weights]);
        Ok(self.push(s, out, Op::ScaleChannels { input, weights }, needs))
    }

    /// Per-channel convex blend `w[c] * a + (1 - w[c]) * b` of two `[C, ...]`
    /// tensors.
    pub fn blend_channels(&mut self, a: Var, b: Var, weights: Var) -> Result<Var> {
        self.same_shape(a, b, "blend")?;
        let s = self.shape(a).to_vec();
        if self.shape(weights) != [s[0]] {
            return Err(shape_err(format!("blend weights {:?} against {s:?}", self.shape(weights))));
        }
        let n = numel(&s[1..]);
        let w = self.value(weights);
        let out = self
            .value(a)
            .chunks(n)
            .zip(self.value(b).chunks(n))
            .zip(w)
            .flat_map(|((ca, cb), &wc)| {
                ca.iter().zip(cb).map(move |(&x, &y)| wc * x + (T::one() - wc) * y)
            })
            .collect();
        let needs = self.needs(&[a, b, weights]);
        Ok(self.push(s, out, Op::BlendChannels { a, b, weights }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }, needs))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, input: Var, scale: T) -> Var {
        let out = self.value(input).iter().map(|&v| v * scale).collect();
        let needs = self.needs(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Affine { input, scale }, needs)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).iter().copied().sum();
        let needs = self.needs(&[input]);
        self.push(vec![1], vec![total], Op::Sum { input }, needs)
    }

    /// Propagates adjoints from the scalar `loss` to every learnable leaf.
    ///
    /// Learnable leaves with no path to `loss` get an all-zero gradient.
    /// Hash of the active piece of every piecewise operation on the tape:
    /// relu input signs and interpolation cells. Two records of the same
    /// program with equal signatures have no kink between them.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in &self.nodes[input.0].value {
                        (*v > T::zero()).hash(&mut hasher);
                    }
                }
                Op::Warp { grid, .. } => {
                    let g = &self.nodes[grid.0];
                    let (h, w) = (g.shape[1], g.shape[2]);
                    let plane = h * w;
                    for i in 0..plane {
                        kernels::warp_cell(g.value[i], g.value[plane + i], h, w).hash(&mut hasher);
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(FrptError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(FrptError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { learnable: true } = node.op {
                let g = adj[idx].take().unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                grads.insert(Var(idx), g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                adj[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
            }};
        }
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                if wants(*input) {
                    kernels::conv2d_grad_input(geom, &nodes[kernel.0].value, g, slot!(*input));
                }
                if wants(*kernel) {
                    kernels::conv2d_grad_kernel(geom, &nodes[input.0].value, g, slot!(*kernel));
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    let n = geom.out_h() * geom.out_w();
                    let dst = slot!(b);
                    for (d, c) in dst.iter_mut().zip(g.chunks(n)) {
                        *d = *d + c.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Reshape { input } => {
                if wants(*input) {
                    add_into(slot!(*input), g);
                }
            }
            Op::Permute3 { input, perm } => {
                if wants(*input) {
                    let dst = slot!(*input);
                    for_each_permuted(&nodes[input.0].shape, *perm, |src_idx, dst_idx| {
                        dst[src_idx] = dst[src_idx] + g[dst_idx]
                    });
                }
            }
            Op::Softmax { input } => {
                if wants(*input) {
                    let y = &node.value;
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    let dst = slot!(*input);
                    for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(y) {
                        *d = *d + yi * (gi - dot);
                    }
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                if wants(*input) {
                    let c = inv_std.len();
                    let n = node.value.len() / c;
                    let nf = T::from_usize(n).unwrap();
                    let dst = slot!(*input);
                    for ch in 0..c {
                        let r = ch * n..(ch + 1) * n;
                        let (gc, yc) = (&g[r.clone()], &node.value[r.clone()]);
                        let mg = gc.iter().copied().sum::<T>() / nf;
                        let mgy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((d, &gi), &yi) in dst[r].iter_mut().zip(gc).zip(yc) {
                            *d = *d + inv_std[ch] * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::Fc { input, weight, bias } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weight.0].value;
                let d_in = x.len();
                if wants(*input) {
                    let dst = slot!(*input);
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &wv) in dst.iter_mut().zip(&w[o * d_in..(o + 1) * d_in]) {
                            *d = *d + go * wv;
                        }
                    }
                }
                if wants(*weight) {
                    let dst = slot!(*weight);
                    for (o, &go) in g.iter().enumerate() {
                        for (d, &xv) in dst[o * d_in..(o + 1) * d_in].iter_mut().zip(x) {
                            *d = *d + go * xv;
                        }
                    }
                }
                if let Some(b) = bias.filter(|b| wants(*b)) {
                    add_into(slot!(b), g);
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = &nodes[input.0].value;
                    let dst = slot!(*input);
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Sigmoid { input } => {
                if wants(*input) {
                    let dst = slot!(*input);
                    for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(&node.value) {
                        *d = *d + gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Gap { input } => {
                if wants(*input) {
                    let n = nodes[input.0].value.len() / g.len();
                    let nf = T::from_usize(n).unwrap();
                    let dst = slot!(*input);
                    for (c, &gc) in dst.chunks_mut(n).zip(g) {
                        c.iter_mut().for_each(|d| *d = *d + gc / nf);
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if wants(*logits) {
                    let dst = slot!(*logits);
                    for (k, (d, &p)) in dst.iter_mut().zip(probs).enumerate() {
                        let t = if k == *label { T::one() } else { T::zero() };
                        *d = *d + g[0] * (p - t);
                    }
                }
            }
            Op::Mapping { map, tables } => {
                if wants(*map) {
                    let ms = &nodes[map.0].shape;
                    let (oh, ow) = (node.shape[1], node.shape[2]);
                    let gm = kernels::mapping_grad(tables, g, ms[0], ms[1], oh, ow);
                    add_into(slot!(*map), &gm);
                }
            }
            Op::Warp { image, grid } => {
                let s = &nodes[image.0].shape;
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gi = wants(*image).then(|| vec![T::zero(); c * h * w]);
                let mut gg = wants(*grid).then(|| vec![T::zero(); 2 * h * w]);
                kernels::warp_grad(
                    &nodes[image.0].value,
                    c,
                    h,
                    w,
                    &nodes[grid.0].value,
                    g,
                    gi.as_deref_mut(),
                    gg.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    add_into(slot!(*image), &gi);
                }
                if let Some(gg) = gg {
                    add_into(slot!(*grid), &gg);
                }
            }
            Op::ScaleChannels { input, weights } => {
                let x = &nodes[input.0].value;
                let w = &nodes[weights.0].value;
                let n = x.len() / w.len();
                if wants(*input) {
                    let dst = slot!(*input);
                    for ((d, gc), &wc) in dst.chunks_mut(n).zip(g.chunks(n)).zip(w) {
                        d.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d + gi * wc);
                    }
                }
                if wants(*weights) {
                    let dst = slot!(*weights);
                    for ((d, gc), xc) in dst.iter_mut().zip(g.chunks(n)).zip(x.chunks(n)) {
                        *d = *d + gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            Op::BlendChannels { a, b, weights } => {
                let w = &nodes[weights.0].value;
                let n = g.len() / w.len();
                if wants(*a) {
                    let dst = slot!(*a);
                    for ((d, gc), &wc) in dst.chunks_mut(n).zip(g.chunks(n)).zip(w) {
                        d.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d + gi * wc);
                    }
                }
                if wants(*b) {
                    let dst = slot!(*b);
                    for ((d, gc), &wc) in dst.chunks_mut(n).zip(g.chunks(n)).zip(w) {
                        d.iter_mut().zip(gc).for_each(|(d, &gi)| *d = *d + gi * (T::one() - wc));
                    }
                }
                if wants(*weights) {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let dst = slot!(*weights);
                    for (c, d) in dst.iter_mut().enumerate() {
                        let r = c * n..(c + 1) * n;
                        *d = *d + g[r.clone()]
                            .iter()
                            .zip(&va[r.clone()])
                            .zip(&vb[r])
                            .map(|((&gi, &x), &y)| gi * (x - y))
                            .sum::<T>();
                    }
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    add_into(slot!(*a), g);
                }
                if wants(*b) {
                    add_into(slot!(*b), g);
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    add_into(slot!(*a), g);
                }
                if wants(*b) {
                    let dst = slot!(*b);
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d - gi);
                }
            }
            Op::Affine { input, scale } => {
                if wants(*input) {
                    let dst = slot!(*input);
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * *scale);
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    let dst = slot!(*input);
                    dst.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Calls `f(src_index, dst_index)` for every element of a rank-3 permutation.
fn for_each_permuted(shape: &[usize], perm: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut dst = 0;
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            for k in 0..out_shape[2] {
                let src = i * strides[perm[0]] + j * strides[perm[1]] + k * strides[perm[2]];
                f(src, dst);
                dst += 1;
            }
        }
    }
}
