//! The computation record (tape) and reverse-mode sweep.
//!
//! One tape lives per training step. Nodes are appended in topological order
//! by construction, so a single reverse pass visits each node exactly once.
//! Constants never receive gradients; `param` leaves do.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::resize::{bilinear_plan, nearest_plan};
use super::{strides_of, Elem, Param, ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    GatherRows(Arc<Vec<usize>>),
    SumAll,
    MeanAll,
    SumAxis(usize),
    SoftmaxCrossEntropy { targets: Arc<Vec<usize>> },
    Mse,
    BilinearResize { out_hw: (usize, usize) },
    NearestResize { out_hw: (usize, usize) },
    StraightThrough,
}

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode gradients keyed by parameter identity.
#[derive(Debug, Default)]
pub struct GradMap<T> {
    grads: HashMap<ParamId, Tensor<T>>,
}

impl<T: Elem> GradMap<T> {
    pub fn get(&self, param: &Param<T>) -> Option<&Tensor<T>> {
        self.grads.get(&param.id())
    }

    pub fn get_by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.all_finite())
    }

    /// Global L2 norm over every gradient element.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .map(|g| g.data().iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, factor: f64) {
        let f = T::of(factor);
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
    }
}

/// The computation record: ordered nodes, parent references, and the saved
/// forward values each backward rule needs.
pub struct Tape<T: Elem> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Elem> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Record a constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, vec![], Op::Leaf, false, None)
    }

    /// Stage a parameter onto the tape. Staging the same parameter twice
    /// returns the same node.
    pub fn param(&mut self, param: &Param<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&param.id()) {
            return v;
        }
        let v = self.push(param.value.clone(), vec![], Op::Leaf, true, Some(param.id()));
        self.param_vars.insert(param.id(), v);
        v
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: Vec<Var>,
        op: Op,
        needs_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, parents: Vec<Var>, op: Op) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, parents, op, needs, None)
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// Matrix product. `a` may carry leading batch dims; `b` is either a
    /// rank-2 weight (applied to every leading slice of `a`) or has leading
    /// dims equal to `a`'s (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ashape, bshape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(mismatch());
        }
        let k = ashape[ashape.len() - 1];
        let n = bshape[bshape.len() - 1];
        if bshape[bshape.len() - 2] != k {
            return Err(mismatch());
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if bshape.len() == 2 {
            let rows = av.numel() / k;
            let mut out = vec![T::zero(); rows * n];
            T::gemm(rows, k, n, av.data(), k as isize, 1, bv.data(), n as isize, 1, T::zero(), &mut out);
            let mut oshape = ashape[..ashape.len() - 1].to_vec();
            oshape.push(n);
            Tensor::from_vec(out, &oshape)?
        } else {
            if ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2] {
                return Err(mismatch());
            }
            let m = ashape[ashape.len() - 2];
            let batch: usize = ashape[..ashape.len() - 2].iter().product();
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &av.data()[i * m * k..],
                    k as isize,
                    1,
                    &bv.data()[i * k * n..],
                    n as isize,
                    1,
                    T::zero(),
                    &mut out[i * m * n..],
                );
            }
            let mut oshape = ashape[..ashape.len() - 2].to_vec();
            oshape.extend_from_slice(&[m, n]);
            Tensor::from_vec(out, &oshape)?
        };
        Ok(self.push_op(value, vec![a, b], Op::Matmul))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary_elementwise(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            "add",
            |x, y| x + y,
        )?;
        Ok(self.push_op(value, vec![a, b], Op::Add))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary_elementwise(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            "sub",
            |x, y| x - y,
        )?;
        Ok(self.push_op(value, vec![a, b], Op::Sub))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = binary_elementwise(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            "mul",
            |x, y| x * y,
        )?;
        Ok(self.push_op(value, vec![a, b], Op::Mul))
    }

    /// Multiply by a compile-time scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let value = self.nodes[a.0].value.map(|x| x * f);
        self.push_op(value, vec![a], Op::Scale(factor))
    }

    /// Gaussian error linear unit, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(gelu_forward);
        self.push_op(value, vec![a], Op::Gelu)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.rank() {
            return Err(crate::invalid_arg!(
                "softmax: axis {axis} out of range for shape {:?}",
                av.shape()
            ));
        }
        let mut out = av.data().to_vec();
        let (outer, len, inner) = axis_split(av.shape(), axis);
        softmax_in_place(&mut out, outer, len, inner);
        let value = Tensor::from_vec(out, av.shape())?;
        Ok(self.push_op(value, vec![a], Op::Softmax { axis }))
    }

    /// Per-vector normalization over the last axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = *xv.shape().last().ok_or_else(|| {
            crate::invalid_arg!("layer_norm: input must have at least one axis")
        })?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = self.shape(v);
            if s != [d] {
                return Err(crate::invalid_arg!(
                    "layer_norm: {name} shape {s:?} does not match feature dim {d}"
                ));
            }
        }
        let xv = &self.nodes[x.0].value;
        let gv = self.nodes[gain.0].value.clone();
        let bv = self.nodes[bias.0].value.clone();
        let mut out = vec![T::zero(); xv.numel()];
        let epsv = T::of(eps);
        let inv_d = T::of(1.0 / d as f64);
        for (row, orow) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_d;
            let inv_std = (var + epsv).sqrt().recip();
            for i in 0..d {
                orow[i] = (row[i] - mean) * inv_std * gv.data()[i] + bv.data()[i];
            }
        }
        let value = Tensor::from_vec(out, xv.shape())?;
        Ok(self.push_op(value, vec![x, gain, bias], Op::LayerNorm { eps }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push_op(value, vec![a], Op::Reshape))
    }

    /// Axis permutation (general transpose).
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let value = permute_tensor(av, perm)?;
        Ok(self.push_op(value, vec![a], Op::Permute(perm.to_vec())))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(crate::invalid_arg!("concat: no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(crate::invalid_arg!(
                "concat: axis {axis} out of range for shape {first:?}"
            ));
        }
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * total * inner];
        let row = total * inner;
        let mut col = 0usize;
        for &p in parts {
            let pv = &self.nodes[p.0].value;
            let plen = pv.shape()[axis] * inner;
            for o in 0..outer {
                let src = &pv.data()[o * plen..(o + 1) * plen];
                out[o * row + col..o * row + col + plen].copy_from_slice(src);
            }
            col += plen;
        }
        let value = Tensor::from_vec(out, &oshape)?;
        Ok(self.push_op(value, parts.to_vec(), Op::Concat { axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let shape = av.shape().to_vec();
        if axis >= shape.len() || range.end > shape[axis] || range.start > range.end {
            return Err(crate::invalid_arg!(
                "slice: range {range:?} on axis {axis} invalid for shape {shape:?}"
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = range.end - range.start;
        let mut out = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * shape[axis] + range.start) * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&av.data()[src..src + len * inner]);
        }
        let mut oshape = shape.clone();
        oshape[axis] = len;
        let value = Tensor::from_vec(out, &oshape)?;
        Ok(self.push_op(
            value,
            vec![a],
            Op::Slice {
                axis,
                start: range.start,
            },
        ))
    }

    /// Select rows of a rank-2 table; rows may repeat.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 {
            return Err(crate::invalid_arg!(
                "gather_rows: table must be rank 2, got {:?}",
                tv.shape()
            ));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(crate::invalid_arg!(
                    "gather_rows: index {i} out of range for {rows} rows"
                ));
            }
            out.extend_from_slice(&tv.data()[i * width..(i + 1) * width]);
        }
        let value = Tensor::from_vec(out, &[indices.len(), width])?;
        Ok(self.push_op(
            value,
            vec![table],
            Op::GatherRows(Arc::new(indices.to_vec())),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.push_op(Tensor::scalar(s), vec![a], Op::SumAll)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x);
        let m = s * T::of(1.0 / v.numel() as f64);
        self.push_op(Tensor::scalar(m), vec![a], Op::MeanAll)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.rank() {
            return Err(crate::invalid_arg!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                av.shape()
            ));
        }
        let (outer, len, inner) = axis_split(av.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + av.data()[base + i];
                }
            }
        }
        let mut oshape = av.shape().to_vec();
        oshape.remove(axis);
        let value = Tensor::from_vec(out, &oshape)?;
        Ok(self.push_op(value, vec![a], Op::SumAxis(axis)))
    }

    /// Mean over all positions of `-log softmax(logits)[target]`, stabilized
    /// by max subtraction. `logits` is `[..., C]`; `targets` supplies one
    /// class index per leading position.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let c = *lv
            .shape()
            .last()
            .ok_or_else(|| crate::invalid_arg!("softmax_cross_entropy: scalar logits"))?;
        let rows = lv.numel() / c;
        if targets.len() != rows {
            return Err(crate::invalid_arg!(
                "softmax_cross_entropy: {} targets for {} rows",
                targets.len(),
                rows
            ));
        }
        let mut total = 0.0f64;
        for (row, &t) in lv.data().chunks_exact(c).zip(targets) {
            if t >= c {
                return Err(crate::invalid_arg!(
                    "softmax_cross_entropy: target {t} out of range [0, {c})"
                ));
            }
            let mut max = T::neg_infinity();
            for &x in row {
                max = max.max(x);
            }
            let mut denom = T::zero();
            for &x in row {
                denom = denom + (x - max).fast_exp();
            }
            total -= (row[t] - max).as_f64() - denom.as_f64().ln();
        }
        let value = Tensor::scalar(T::of(total / rows as f64));
        Ok(self.push_op(
            value,
            vec![logits],
            Op::SoftmaxCrossEntropy {
                targets: Arc::new(targets.to_vec()),
            },
        ))
    }

    /// Mean over all elements of the squared difference.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mean_squared_error",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut total = 0.0f64;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = (x - y).as_f64();
            total += d * d;
        }
        let value = Tensor::scalar(T::of(total / av.numel() as f64));
        Ok(self.push_op(value, vec![a, b], Op::Mse))
    }

    /// Bilinear resize of the H, W axes of a `[..., H, W, C]` tensor.
    pub fn bilinear_resize(&mut self, a: Var, out_hw: (usize, usize)) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (lead, h, w, c) = split_hwc(av.shape())?;
        if (h, w) == out_hw {
            // Identity resize is bitwise identity; backward is a pass-through.
            let value = av.clone();
            return Ok(self.push_op(value, vec![a], Op::StraightThrough));
        }
        let plane = h * w * c;
        let oplane = out_hw.0 * out_hw.1 * c;
        let mut out = Vec::with_capacity(lead * oplane);
        for l in 0..lead {
            out.extend(super::resize::bilinear_hwc(
                &av.data()[l * plane..(l + 1) * plane],
                (h, w, c),
                out_hw,
            ));
        }
        let mut oshape = av.shape()[..av.rank() - 3].to_vec();
        oshape.extend_from_slice(&[out_hw.0, out_hw.1, c]);
        let value = Tensor::from_vec(out, &oshape)?;
        Ok(self.push_op(value, vec![a], Op::BilinearResize { out_hw }))
    }

    /// Nearest-neighbor resize of the H, W axes of a `[..., H, W, C]` tensor.
    pub fn nearest_resize(&mut self, a: Var, out_hw: (usize, usize)) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (lead, h, w, c) = split_hwc(av.shape())?;
        if (h, w) == out_hw {
            let value = av.clone();
            return Ok(self.push_op(value, vec![a], Op::StraightThrough));
        }
        let plane = h * w * c;
        let mut out = Vec::with_capacity(lead * out_hw.0 * out_hw.1 * c);
        for l in 0..lead {
            out.extend(super::resize::nearest_hwc(
                &av.data()[l * plane..(l + 1) * plane],
                (h, w, c),
                out_hw,
            ));
        }
        let mut oshape = av.shape()[..av.rank() - 3].to_vec();
        oshape.extend_from_slice(&[out_hw.0, out_hw.1, c]);
        let value = Tensor::from_vec(out, &oshape)?;
        Ok(self.push_op(value, vec![a], Op::NearestResize { out_hw }))
    }

    /// Replace forward values while passing gradients through unchanged.
    /// The VQ straight-through contract: gradients w.r.t. the output are
    /// copied verbatim to the input.
    pub fn straight_through(&mut self, a: Var, values: Tensor<T>) -> Result<Var> {
        if values.shape() != self.shape(a) {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(a).to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        Ok(self.push_op(values, vec![a], Op::StraightThrough))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Consumes the record and
    /// returns a gradient per staged parameter reached by the sweep.
    pub fn backward(mut self, loss: Var) -> Result<GradMap<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(crate::invalid_arg!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = GradMap::default();

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Some(pid) = self.nodes[id].param {
                let t = Tensor::from_vec(g, self.nodes[id].value.shape())?;
                out.grads.insert(pid, t);
                continue;
            }
            self.backprop_node(id, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn grad_buf<'a>(
        nodes: &[Node<T>],
        grads: &'a mut [Option<Vec<T>>],
        parent: Var,
    ) -> Option<&'a mut Vec<T>> {
        if !nodes[parent.0].needs_grad {
            return None;
        }
        let numel = nodes[parent.0].value.numel();
        Some(grads[parent.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn backprop_node(&mut self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        // Split borrows: everything below reads `self.nodes` and writes `grads`.
        let nodes = &self.nodes;
        let parents = nodes[id].parents.clone();
        match &nodes[id].op {
            Op::Leaf => {}

            Op::Matmul => {
                let (a, b) = (parents[0], parents[1]);
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (ashape, bshape) = (av.shape(), bv.shape());
                let k = ashape[ashape.len() - 1];
                let n = bshape[bshape.len() - 1];
                if bshape.len() == 2 {
                    let rows = av.numel() / k;
                    if nodes[a.0].needs_grad {
                        let buf = Self::grad_buf(nodes, grads, a).unwrap();
                        // dA = dC @ B^T
                        T::gemm(rows, n, k, g, n as isize, 1, bv.data(), 1, n as isize, T::one(), buf);
                    }
                    if nodes[b.0].needs_grad {
                        let buf = Self::grad_buf(nodes, grads, b).unwrap();
                        // dB = A^T @ dC
                        T::gemm(k, rows, n, av.data(), 1, k as isize, g, n as isize, 1, T::one(), buf);
                    }
                } else {
                    let m = ashape[ashape.len() - 2];
                    let batch: usize = ashape[..ashape.len() - 2].iter().product();
                    if nodes[a.0].needs_grad {
                        let buf = Self::grad_buf(nodes, grads, a).unwrap();
                        for i in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                n as isize,
                                1,
                                &bv.data()[i * k * n..],
                                1,
                                n as isize,
                                T::one(),
                                &mut buf[i * m * k..],
                            );
                        }
                    }
                    if nodes[b.0].needs_grad {
                        let buf = Self::grad_buf(nodes, grads, b).unwrap();
                        for i in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &av.data()[i * m * k..],
                                1,
                                k as isize,
                                &g[i * m * n..],
                                n as isize,
                                1,
                                T::one(),
                                &mut buf[i * k * n..],
                            );
                        }
                    }
                }
            }

            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (parents[0], parents[1]);
                let oshape = nodes[id].value.shape().to_vec();
                let op_kind = match nodes[id].op {
                    Op::Add => BinKind::Add,
                    Op::Sub => BinKind::Sub,
                    _ => BinKind::Mul,
                };
                let ashape = nodes[a.0].value.shape().to_vec();
                let bshape = nodes[b.0].value.shape().to_vec();
                let same = ashape == bshape;
                let a_needs = nodes[a.0].needs_grad;
                let b_needs = nodes[b.0].needs_grad;

                if same {
                    // Same-shape fast paths: tight loops, no index mapping.
                    if a_needs {
                        let bdata = nodes[b.0].value.data();
                        let buf = Self::grad_buf(nodes, grads, a).unwrap();
                        match op_kind {
                            BinKind::Add | BinKind::Sub => accumulate(buf, g),
                            BinKind::Mul => {
                                for i in 0..g.len() {
                                    buf[i] = buf[i] + g[i] * bdata[i];
                                }
                            }
                        }
                    }
                    if b_needs {
                        let adata = nodes[a.0].value.data();
                        let buf = Self::grad_buf(nodes, grads, b).unwrap();
                        match op_kind {
                            BinKind::Add => accumulate(buf, g),
                            BinKind::Sub => {
                                for i in 0..g.len() {
                                    buf[i] = buf[i] - g[i];
                                }
                            }
                            BinKind::Mul => {
                                for i in 0..g.len() {
                                    buf[i] = buf[i] + g[i] * adata[i];
                                }
                            }
                        }
                    }
                } else {
                    let (adata, bdata) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let mut da = a_needs.then(|| vec![T::zero(); adata.len()]);
                    let mut db = b_needs.then(|| vec![T::zero(); bdata.len()]);
                    for_each_broadcast(&oshape, &ashape, &bshape, |oi, ai, bi| match op_kind {
                        BinKind::Add => {
                            if let Some(da) = da.as_mut() {
                                da[ai] = da[ai] + g[oi];
                            }
                            if let Some(db) = db.as_mut() {
                                db[bi] = db[bi] + g[oi];
                            }
                        }
                        BinKind::Sub => {
                            if let Some(da) = da.as_mut() {
                                da[ai] = da[ai] + g[oi];
                            }
                            if let Some(db) = db.as_mut() {
                                db[bi] = db[bi] - g[oi];
                            }
                        }
                        BinKind::Mul => {
                            if let Some(da) = da.as_mut() {
                                da[ai] = da[ai] + g[oi] * bdata[bi];
                            }
                            if let Some(db) = db.as_mut() {
                                db[bi] = db[bi] + g[oi] * adata[ai];
                            }
                        }
                    });
                    if let Some(da) = da {
                        accumulate(Self::grad_buf(nodes, grads, a).unwrap(), &da);
                    }
                    if let Some(db) = db {
                        accumulate(Self::grad_buf(nodes, grads, b).unwrap(), &db);
                    }
                }
            }

            Op::Scale(factor) => {
                let f = T::of(*factor);
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o = *o + gi * f;
                    }
                }
            }

            Op::Gelu => {
                let x = nodes[parents[0].0].value.data();
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for i in 0..x.len() {
                        buf[i] = buf[i] + g[i] * gelu_backward(x[i]);
                    }
                }
            }

            Op::Softmax { axis } => {
                let s = nodes[id].value.data();
                let (outer, len, inner) = axis_split(nodes[id].value.shape(), *axis);
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    if inner == 1 {
                        for r in 0..outer {
                            let srow = &s[r * len..(r + 1) * len];
                            let grow = &g[r * len..(r + 1) * len];
                            let mut dot = T::zero();
                            for i in 0..len {
                                dot = dot + grow[i] * srow[i];
                            }
                            let out = &mut buf[r * len..(r + 1) * len];
                            for i in 0..len {
                                out[i] = out[i] + srow[i] * (grow[i] - dot);
                            }
                        }
                    } else {
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut dot = T::zero();
                                for l in 0..len {
                                    let f = (o * len + l) * inner + i;
                                    dot = dot + g[f] * s[f];
                                }
                                for l in 0..len {
                                    let f = (o * len + l) * inner + i;
                                    buf[f] = buf[f] + s[f] * (g[f] - dot);
                                }
                            }
                        }
                    }
                }
            }

            Op::LayerNorm { eps } => {
                let (x, gain, bias) = (parents[0], parents[1], parents[2]);
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                let d = *nodes[x.0].value.shape().last().unwrap();
                let rows = xv.len() / d;
                let epsv = T::of(*eps);
                let inv_d = T::of(1.0 / d as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
                    let var = row
                        .iter()
                        .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                        * inv_d;
                    let inv_std = (var + epsv).sqrt().recip();
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i in 0..d {
                        let xhat = (row[i] - mean) * inv_std;
                        let dxhat = grow[i] * gv[i];
                        dgain[i] = dgain[i] + grow[i] * xhat;
                        dbias[i] = dbias[i] + grow[i];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for i in 0..d {
                        let xhat = (row[i] - mean) * inv_std;
                        let dxhat = grow[i] * gv[i];
                        dx[r * d + i] =
                            inv_std * inv_d * (T::of(d as f64) * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                if nodes[x.0].needs_grad {
                    accumulate(Self::grad_buf(nodes, grads, x).unwrap(), &dx);
                }
                if nodes[gain.0].needs_grad {
                    accumulate(Self::grad_buf(nodes, grads, gain).unwrap(), &dgain);
                }
                if nodes[bias.0].needs_grad {
                    accumulate(Self::grad_buf(nodes, grads, bias).unwrap(), &dbias);
                }
            }

            Op::Reshape => {
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    accumulate(buf, g);
                }
            }

            Op::Permute(perm) => {
                // Scatter the gradient back through the inverse permutation.
                let in_shape = nodes[parents[0].0].value.shape().to_vec();
                let out_shape = nodes[id].value.shape().to_vec();
                let perm = perm.clone();
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    let in_strides = strides_of(&in_shape);
                    let src_strides: Vec<usize> =
                        perm.iter().map(|&p| in_strides[p]).collect();
                    for_each_permuted(&out_shape, &src_strides, |oi, ii| {
                        buf[ii] = buf[ii] + g[oi];
                    });
                }
            }

            Op::Concat { axis } => {
                let oshape = nodes[id].value.shape().to_vec();
                let outer: usize = oshape[..*axis].iter().product();
                let inner: usize = oshape[*axis + 1..].iter().product();
                let row = oshape[*axis] * inner;
                let mut col = 0usize;
                for &p in &parents {
                    let plen = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(buf) = Self::grad_buf(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &g[o * row + col..o * row + col + plen];
                            accumulate(&mut buf[o * plen..(o + 1) * plen], src);
                        }
                    }
                    col += plen;
                }
            }

            Op::Slice { axis, start } => {
                let pshape = nodes[parents[0].0].value.shape().to_vec();
                let oshape = nodes[id].value.shape().to_vec();
                let outer: usize = pshape[..*axis].iter().product();
                let inner: usize = pshape[*axis + 1..].iter().product();
                let len = oshape[*axis];
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for o in 0..outer {
                        let dst = (o * pshape[*axis] + start) * inner;
                        accumulate(
                            &mut buf[dst..dst + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }

            Op::GatherRows(indices) => {
                let width = nodes[id].value.shape()[1];
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for (r, &i) in indices.iter().enumerate() {
                        accumulate(&mut buf[i * width..(i + 1) * width], &g[r * width..(r + 1) * width]);
                    }
                }
            }

            Op::SumAll => {
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for o in buf.iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }

            Op::MeanAll => {
                let numel = nodes[parents[0].0].value.numel();
                let f = g[0] * T::of(1.0 / numel as f64);
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for o in buf.iter_mut() {
                        *o = *o + f;
                    }
                }
            }

            Op::SumAxis(axis) => {
                let pshape = nodes[parents[0].0].value.shape().to_vec();
                let (outer, len, inner) = axis_split(&pshape, *axis);
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            let gbase = o * inner;
                            for i in 0..inner {
                                buf[base + i] = buf[base + i] + g[gbase + i];
                            }
                        }
                    }
                }
            }

            Op::SoftmaxCrossEntropy { targets } => {
                let lv = nodes[parents[0].0].value.data();
                let c = *nodes[parents[0].0].value.shape().last().unwrap();
                let rows = lv.len() / c;
                let scale = g[0] * T::of(1.0 / rows as f64);
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    let mut probs = vec![T::zero(); c];
                    for (r, (row, &t)) in lv.chunks_exact(c).zip(targets.iter()).enumerate() {
                        let mut max = T::neg_infinity();
                        for &x in row {
                            max = max.max(x);
                        }
                        let mut denom = T::zero();
                        for i in 0..c {
                            let e = (row[i] - max).fast_exp();
                            probs[i] = e;
                            denom = denom + e;
                        }
                        let inv = denom.recip();
                        let out = &mut buf[r * c..(r + 1) * c];
                        for i in 0..c {
                            out[i] = out[i] + scale * probs[i] * inv;
                        }
                        out[t] = out[t] - scale;
                    }
                }
            }

            Op::Mse => {
                let (a, b) = (parents[0], parents[1]);
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let scale = g[0] * T::of(2.0 / av.len() as f64);
                if nodes[a.0].needs_grad {
                    let buf = Self::grad_buf(nodes, grads, a).unwrap();
                    for i in 0..av.len() {
                        buf[i] = buf[i] + scale * (av[i] - bv[i]);
                    }
                }
                if nodes[b.0].needs_grad {
                    let buf = Self::grad_buf(nodes, grads, b).unwrap();
                    for i in 0..av.len() {
                        buf[i] = buf[i] - scale * (av[i] - bv[i]);
                    }
                }
            }

            Op::BilinearResize { out_hw } => {
                let pshape = nodes[parents[0].0].value.shape().to_vec();
                let (lead, h, w, c) = split_hwc(&pshape).unwrap();
                let rows = bilinear_plan(h, out_hw.0);
                let cols = bilinear_plan(w, out_hw.1);
                let plane = h * w * c;
                let oplane = out_hw.0 * out_hw.1 * c;
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for l in 0..lead {
                        for (y, &(r0, r1, fy)) in rows.iter().enumerate() {
                            for (x, &(c0, c1, fx)) in cols.iter().enumerate() {
                                let go = l * oplane + (y * out_hw.1 + x) * c;
                                let w00 = T::of((1.0 - fy) * (1.0 - fx));
                                let w01 = T::of((1.0 - fy) * fx);
                                let w10 = T::of(fy * (1.0 - fx));
                                let w11 = T::of(fy * fx);
                                for ch in 0..c {
                                    let gv = g[go + ch];
                                    let base = l * plane;
                                    buf[base + (r0 * w + c0) * c + ch] =
                                        buf[base + (r0 * w + c0) * c + ch] + gv * w00;
                                    buf[base + (r0 * w + c1) * c + ch] =
                                        buf[base + (r0 * w + c1) * c + ch] + gv * w01;
                                    buf[base + (r1 * w + c0) * c + ch] =
                                        buf[base + (r1 * w + c0) * c + ch] + gv * w10;
                                    buf[base + (r1 * w + c1) * c + ch] =
                                        buf[base + (r1 * w + c1) * c + ch] + gv * w11;
                                }
                            }
                        }
                    }
                }
            }

            Op::NearestResize { out_hw } => {
                let pshape = nodes[parents[0].0].value.shape().to_vec();
                let (lead, h, w, c) = split_hwc(&pshape).unwrap();
                let rows = nearest_plan(h, out_hw.0);
                let cols = nearest_plan(w, out_hw.1);
                let plane = h * w * c;
                let oplane = out_hw.0 * out_hw.1 * c;
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    for l in 0..lead {
                        for (y, &sy) in rows.iter().enumerate() {
                            for (x, &sx) in cols.iter().enumerate() {
                                let go = l * oplane + (y * out_hw.1 + x) * c;
                                let bi = l * plane + (sy * w + sx) * c;
                                for ch in 0..c {
                                    buf[bi + ch] = buf[bi + ch] + g[go + ch];
                                }
                            }
                        }
                    }
                }
            }

            Op::StraightThrough => {
                if let Some(buf) = Self::grad_buf(nodes, grads, parents[0]) {
                    accumulate(buf, g);
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

fn accumulate<T: Elem>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

// Reductions with eight independent partial lanes; strict left-to-right
// float reductions cannot vectorize, these do.

pub(crate) fn lane_sum<T: Elem>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for ch in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + ch[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for &r in rem {
        s = s + r;
    }
    s
}

pub(crate) fn lane_max<T: Elem>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for ch in chunks {
        for i in 0..8 {
            acc[i] = acc[i].max(ch[i]);
        }
    }
    let mut m = T::neg_infinity();
    for a in acc {
        m = m.max(a);
    }
    for &r in rem {
        m = m.max(r);
    }
    m
}

pub(crate) fn lane_dot<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let (arem, brem) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for (&x, &y) in arem.iter().zip(brem) {
        s = s + x * y;
    }
    s
}

/// Sum of exp(x - max) with independent lanes.
pub(crate) fn lane_exp_sum<T: Elem>(xs: &[T], max: T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rem = chunks.remainder();
    for ch in chunks {
        for i in 0..8 {
            acc[i] = acc[i] + (ch[i] - max).fast_exp();
        }
    }
    let mut s = T::zero();
    for a in acc {
        s = s + a;
    }
    for &r in rem {
        s = s + (r - max).fast_exp();
    }
    s
}

/// Rational tanh approximation (minimax polynomials over [-7.9, 7.9], the
/// Eigen coefficients). Branch-free and made of mul/add/div only, so the
/// elementwise loops auto-vectorize; accurate to ~1e-7 relative, well inside
/// the gradient-check tolerance.
fn fast_tanh<T: Elem>(x: T) -> T {
    let bound = T::of(7.905_311_107_635_498);
    let x = x.min(bound).max(-bound);
    let x2 = x * x;
    let a1 = T::of(4.893_524_558_917_86e-3);
    let a3 = T::of(6.372_619_288_754_36e-4);
    let a5 = T::of(1.485_722_357_179_79e-5);
    let a7 = T::of(5.122_297_090_371_14e-8);
    let a9 = T::of(-8.604_671_522_137_35e-11);
    let a11 = T::of(2.000_187_904_824_77e-13);
    let a13 = T::of(-2.760_768_477_423_55e-16);
    let b0 = T::of(4.893_525_185_543_85e-3);
    let b2 = T::of(2.268_434_632_439e-3);
    let b4 = T::of(1.185_347_056_866_54e-4);
    let b6 = T::of(1.198_258_394_667_02e-6);
    let p = x * (a1 + x2 * (a3 + x2 * (a5 + x2 * (a7 + x2 * (a9 + x2 * (a11 + x2 * a13))))));
    let q = b0 + x2 * (b2 + x2 * (b4 + x2 * b6));
    p / q
}

fn gelu_forward<T: Elem>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + fast_tanh(inner))
}

fn gelu_backward<T: Elem>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + k * x * x * x);
    let t = fast_tanh(inner);
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * k * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

/// Decompose a shape around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_in_place<T: Elem>(data: &mut [T], outer: usize, len: usize, inner: usize) {
    if inner == 1 {
        // Last-axis softmax: contiguous rows.
        for row in data.chunks_exact_mut(len) {
            let mut max = T::neg_infinity();
            for &v in row.iter() {
                max = max.max(v);
            }
            let mut denom = T::zero();
            for v in row.iter_mut() {
                let e = (*v - max).fast_exp();
                *v = e;
                denom = denom + e;
            }
            let inv = denom.recip();
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let mut max = T::neg_infinity();
            for l in 0..len {
                max = max.max(data[(o * len + l) * inner + i]);
            }
            let mut denom = T::zero();
            for l in 0..len {
                let f = (o * len + l) * inner + i;
                let e = (data[f] - max).fast_exp();
                data[f] = e;
                denom = denom + e;
            }
            let inv = denom.recip();
            for l in 0..len {
                data[(o * len + l) * inner + i] = data[(o * len + l) * inner + i] * inv;
            }
        }
    }
}

/// Treat a `[..., H, W, C]` shape as (leading product, H, W, C).
fn split_hwc(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(crate::invalid_arg!(
            "spatial resize requires rank >= 3, got {shape:?}"
        ));
    }
    let n = shape.len();
    let lead: usize = shape[..n - 3].iter().product();
    Ok((lead, shape[n - 3], shape[n - 2], shape[n - 1]))
}

/// Right-aligned broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Walk every output index of a broadcast binary op, yielding (out, a, b)
/// flat offsets. Fast paths cover the common same-shape and suffix cases.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if a_shape == b_shape {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    // Suffix broadcast: smaller operand's shape equals the trailing dims.
    // Chunked nested loops keep the inner loop division-free.
    let b_numel: usize = b_shape.iter().product();
    let a_numel: usize = a_shape.iter().product();
    if a_shape == out_shape && is_suffix(b_shape, out_shape) && b_numel > 0 {
        let mut i = 0;
        while i < numel {
            for j in 0..b_numel {
                f(i + j, i + j, j);
            }
            i += b_numel;
        }
        return;
    }
    if b_shape == out_shape && is_suffix(a_shape, out_shape) && a_numel > 0 {
        let mut i = 0;
        while i < numel {
            for j in 0..a_numel {
                f(i + j, j, i + j);
            }
            i += a_numel;
        }
        return;
    }
    // General odometer walk with stride-0 broadcast dims.
    let rank = out_shape.len();
    let pad = |s: &[usize]| {
        let mut p = vec![1usize; rank];
        p[rank - s.len()..].copy_from_slice(s);
        p
    };
    let (ap, bp) = (pad(a_shape), pad(b_shape));
    let a_strides: Vec<usize> = {
        let raw = strides_of(&ap);
        ap.iter().zip(raw).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
    };
    let b_strides: Vec<usize> = {
        let raw = strides_of(&bp);
        bp.iter().zip(raw).map(|(&d, s)| if d == 1 { 0 } else { s }).collect()
    };
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..numel {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= a_strides[d] * out_shape[d];
            bi -= b_strides[d] * out_shape[d];
        }
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && &big[big.len() - small.len()..] == small
}

fn binary_elementwise<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let oshape = broadcast_shape(op, a.shape(), b.shape())?;
    let numel: usize = oshape.iter().product();
    let mut out = vec![T::zero(); numel];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&oshape, a.shape(), b.shape(), |oi, ai, bi| {
        out[oi] = f(ad[ai], bd[bi]);
    });
    Tensor::from_vec(out, &oshape)
}

/// Walk an output shape in raster order, yielding (output offset, source
/// offset) where the source offset advances by permuted strides. The inner
/// loop carries no divisions.
fn for_each_permuted(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for oi in 0..numel {
        f(oi, src);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
}

fn permute_tensor<T: Elem>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let shape = t.shape();
    if perm.len() != shape.len() {
        return Err(crate::invalid_arg!(
            "permute: {perm:?} does not match rank of {shape:?}"
        ));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(crate::invalid_arg!("permute: invalid permutation {perm:?}"));
        }
        seen[p] = true;
    }
    let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides_of(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![T::zero(); t.numel()];
    let data = t.data();
    for_each_permuted(&oshape, &src_strides, |oi, ii| {
        out[oi] = data[ii];
    });
    Tensor::from_vec(out, &oshape)
}
