use super::params::{GradMap, ParameterStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    shared_b: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, dims: MatDims },
    Add { a: usize, b: usize, map: Option<Vec<usize>> },
    Sub { a: usize, b: usize, map: Option<Vec<usize>> },
    Mul { a: usize, b: usize, map: Option<Vec<usize>> },
    MulScalar { a: usize, c: f64 },
    LayerNorm { a: usize, n: usize, rstd: Vec<f64> },
    Softmax { a: usize, n: usize },
    Gelu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, outer: usize, inners: Vec<usize> },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Sum { a: usize, groups: usize },
    Mean { a: usize, groups: usize },
    Square { a: usize },
    LogSigmoid { a: usize },
    MaskedSelect { a: usize, idx: Vec<usize> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// A computation graph recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node index is a
/// topological order and backward simply walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    record: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn kind_err(op: &'static str, detail: String) -> Error {
    Error::shape(op, detail)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
        }
    }

    /// A graph that never tracks gradients (inference, reference models).
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<String>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault(format!(
                "non-finite input{}",
                param.as_deref().map(|p| format!(" in parameter {p}")).unwrap_or_default()
            )));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, false, None)
    }

    /// A free leaf that receives a gradient (used by tests and checks).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_leaf(value, true, None)
    }

    /// Leaf bound to a named parameter; repeated lookups reuse one node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let v = self.push_leaf(p.value.clone(), p.trainable, Some(name.to_string()))?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[usize], kind: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault(format!("{op} produced a non-finite value")));
        }
        let requires_grad = self.record && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { kind } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- matmul

    /// `a @ b`. `a` is `[.., m, k]`; `b` is either `[k, n]` (shared across
    /// the leading dims of `a`) or `[batch, k, n]` matching `a`'s batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matmul with optional transposes of the stored operands.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || !(sb.len() == 2 || sb.len() == 3) {
            return Err(kind_err("matmul", format!("ranks {sa:?} x {sb:?}")));
        }
        let (r0, r1) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (m, k) = if ta { (r1, r0) } else { (r0, r1) };
        let lead: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        let (kb, n, batch) = if shared_b {
            let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            (kb, n, lead)
        } else {
            let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if sb[0] != lead {
                return Err(kind_err("matmul", format!("batch {sa:?} x {sb:?}")));
            }
            (kb, n, sb[0])
        };
        if k != kb {
            return Err(kind_err("matmul", format!("inner extents {k} vs {kb} in {sa:?} x {sb:?}")));
        }
        let dims = MatDims { batch, m, k, n, ta, tb, shared_b };
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_b { 0 } else { bi * k * n };
            let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    av.as_ptr().add(a_off),
                    rsa,
                    csa,
                    bv.as_ptr().add(b_off),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(bi * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        if !shared_b && shape.is_empty() {
            shape.push(batch);
        }
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, &[a.0, b.0], Op::MatMul { a: a.0, b: b.0, dims })
    }

    // ------------------------------------------------------------ elementwise

    /// Maps each index of `a` to the index of `b` broadcast against it.
    /// `None` means the shapes are identical.
    fn broadcast_map(op: &'static str, sa: &[usize], sb: &[usize]) -> Result<Option<Vec<usize>>> {
        if sa == sb {
            return Ok(None);
        }
        if sb.len() > sa.len() {
            return Err(kind_err(op, format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let pad = sa.len() - sb.len();
        let mut full = vec![1usize; pad];
        full.extend_from_slice(sb);
        for (i, (&ea, &eb)) in sa.iter().zip(&full).enumerate() {
            if eb != 1 && eb != ea {
                return Err(kind_err(op, format!("axis {i}: {sb:?} vs {sa:?}")));
            }
        }
        let mut strides = vec![0usize; sa.len()];
        let mut acc = 1;
        for i in (0..sa.len()).rev() {
            strides[i] = if full[i] == 1 { 0 } else { acc };
            acc *= full[i];
        }
        let numel: usize = sa.iter().product();
        let mut map = Vec::with_capacity(numel);
        let mut counter = vec![0usize; sa.len()];
        let mut idx = 0usize;
        for _ in 0..numel {
            map.push(idx);
            for ax in (0..sa.len()).rev() {
                counter[ax] += 1;
                idx += strides[ax];
                if counter[ax] < sa[ax] {
                    break;
                }
                idx -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        Ok(Some(map))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize, Option<Vec<usize>>) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let map = Self::broadcast_map(op, &sa, self.shape(b))?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let data: Vec<T> = match &map {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let value = Tensor::new(sa, data)?;
        self.push(op, value, &[a.0, b.0], make(a.0, b.0, map))
    }

    /// `a + b`, with `b` broadcast over `a` (numpy rules, `b` only).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b, map| Op::Add { a, b, map })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, map| Op::Sub { a, b, map })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, map| Op::Mul { a, b, map })
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::cst(c);
        let value = self.value(a).map(|x| x * cv);
        self.push("mul-scalar", value, &[a.0], Op::MulScalar { a: a.0, c })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, &[a.0], Op::Square { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu_fwd);
        self.push("gelu", value, &[a.0], Op::Gelu { a: a.0 })
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| {
            let zero = T::zero();
            x.min(zero) - (-x.abs()).exp().ln_1p()
        });
        self.push("log-sigmoid", value, &[a.0], Op::LogSigmoid { a: a.0 })
    }

    // -------------------------------------------------------------- row-wise

    /// Normalizes over the last axis (no affine; compose with mul/add).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| kind_err("layer-norm", "rank-0 input".into()))?;
        let src = self.value(a).data();
        let rows = src.len() / n;
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            out.extend(row.iter().map(|v| T::cst((v.f64() - mean) * rs)));
        }
        let value = Tensor::new(shape, out)?;
        self.push("layer-norm", value, &[a.0], Op::LayerNorm { a: a.0, n, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().ok_or_else(|| kind_err("softmax", "rank-0 input".into()))?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                s += e;
                out.push(e);
            }
            let inv = T::one() / s;
            for e in &mut out[start..] {
                *e = *e * inv;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push("softmax", value, &[a.0], Op::Softmax { a: a.0, n })
    }

    // ------------------------------------------------------------ structural

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(kind_err("embedding-lookup", format!("table shape {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(kind_err("embedding-lookup", "no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(kind_err("embedding-lookup", format!("id {bad} >= vocab {vocab}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            "embedding-lookup",
            value,
            &[table.0],
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| kind_err("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(kind_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let outer: usize = first[..axis].iter().product();
        let mut inners = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(kind_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total_axis += s[axis];
            inners.push(s[axis..].iter().product::<usize>());
        }
        let mut out = Vec::with_capacity(outer * inners.iter().sum::<usize>());
        for o in 0..outer {
            for (v, &inner) in inputs.iter().zip(&inners) {
                out.extend_from_slice(&self.value(*v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let value = Tensor::new(shape, out)?;
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        self.push(
            "concat",
            value,
            &ids,
            Op::Concat {
                inputs: ids.clone(),
                outer,
                inners,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push("reshape", value, &[a.0], Op::Reshape { a: a.0 })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(kind_err("permute", format!("perm {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src = self.value(a).data();
        let out = permute_data(src, &shape, perm);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "permute",
            value,
            &[a.0],
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
        )
    }

    /// Keeps the rows where `mask` is set, flattened to 1-D.
    pub fn masked_select(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let src = self.value(a).data();
        if mask.len() != src.len() {
            return Err(kind_err(
                "masked-select",
                format!("mask of {} for tensor of {}", mask.len(), src.len()),
            ));
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if idx.is_empty() {
            return Err(kind_err("masked-select", "mask selects nothing".into()));
        }
        let out: Vec<T> = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![idx.len()], out)?;
        self.push("masked-select", value, &[a.0], Op::MaskedSelect { a: a.0, idx })
    }

    // ------------------------------------------------------------- reductions

    fn reduce(&mut self, a: Var, keep: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let op = if mean { "reduce-mean" } else { "reduce-sum" };
        if keep > shape.len() {
            return Err(kind_err(op, format!("keep {keep} for {shape:?}")));
        }
        let groups: usize = shape[..keep].iter().product();
        let src = self.value(a).data();
        let inner = src.len() / groups;
        let scale = if mean { T::cst(1.0 / inner as f64) } else { T::one() };
        let out: Vec<T> = src.chunks(inner).map(|c| c.iter().copied().sum::<T>() * scale).collect();
        let value = Tensor::new(shape[..keep].to_vec(), out)?;
        let kind = if mean {
            Op::Mean { a: a.0, groups }
        } else {
            Op::Sum { a: a.0, groups }
        };
        self.push(op, value, &[a.0], kind)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, 0, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, 0, true)
    }

    /// Sums over every axis after the first `keep`.
    pub fn sum_keep(&mut self, a: Var, keep: usize) -> Result<Var> {
        self.reduce(a, keep, false)
    }

    pub fn mean_keep(&mut self, a: Var, keep: usize) -> Result<Var> {
        self.reduce(a, keep, true)
    }

    // --------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Backward { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Backward { grads })
    }

    /// Reverse pass returning gradients for every trainable parameter of
    /// `store`; trainable parameters the loss never touched get zeros.
    pub fn backward_params(&self, loss: Var, store: &ParameterStore<T>) -> Result<GradMap<T>> {
        let back = self.backward(loss)?;
        let mut map = GradMap::new();
        for p in store.iter().filter(|p| p.trainable) {
            let g = self
                .params
                .get(&p.name)
                .and_then(|&v| back.get(v, self))
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            map.insert(p.name.clone(), g);
        }
        Ok(map)
    }

    fn acc<'a>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'a mut Vec<T>> {
        if !nodes[id].requires_grad {
            return None;
        }
        let n = nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = nodes[id].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, dims } => self.backprop_matmul(*a, *b, *dims, g, grads),
            Op::Add { a, b, map } | Op::Sub { a, b, map } => {
                let sign = if matches!(nodes[id].op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    match map {
                        None => gb.iter_mut().zip(g).for_each(|(x, &gv)| *x += sign * gv),
                        Some(m) => m.iter().zip(g).for_each(|(&j, &gv)| gb[j] += sign * gv),
                    }
                }
            }
            Op::Mul { a, b, map } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    match map {
                        None => ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(x, (&gv, &y))| *x += gv * y),
                        Some(m) => ga.iter_mut().zip(g.iter().zip(m)).for_each(|(x, (&gv, &j))| *x += gv * bv[j]),
                    }
                }
                if let Some(gb) = Self::acc(grads, nodes, *b) {
                    match map {
                        None => gb.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gv, &y))| *x += gv * y),
                        Some(m) => m.iter().enumerate().for_each(|(i, &j)| gb[j] += g[i] * av[i]),
                    }
                }
            }
            Op::MulScalar { a, c } => {
                let cv = T::cst(*c);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gv)| *x += gv * cv);
                }
            }
            Op::Square { a } => {
                let av = nodes[*a].value.data();
                let two = T::cst(2.0);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gv, &v))| *x += two * v * gv);
                }
            }
            Op::Gelu { a } => {
                let av = nodes[*a].value.data();
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gv, &v))| *x += gv * gelu_grad(v));
                }
            }
            Op::LogSigmoid { a } => {
                let av = nodes[*a].value.data();
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    // d/dx ln sigmoid(x) = sigmoid(-x)
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (&gv, &v))| {
                        let s = T::one() / (T::one() + v.exp());
                        *x += gv * s
                    });
                }
            }
            Op::LayerNorm { a, n, rstd } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    let n = *n;
                    for (r, &rs) in rstd.iter().enumerate() {
                        let y = &out[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(y).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / n as f64;
                        for i in 0..n {
                            ga[r * n + i] += T::cst(rs * (gr[i].f64() - mg - y[i].f64() * mgy));
                        }
                    }
                }
            }
            Op::Softmax { a, n } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for ((yr, gr), dst) in out.chunks(*n).zip(g.chunks(*n)).zip(ga.chunks_mut(*n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        for i in 0..*n {
                            dst[i] += yr[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[*table].value.shape()[1];
                if let Some(gt) = Self::acc(grads, nodes, *table) {
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut off = 0;
                for (&inp, &inner) in inputs.iter().zip(inners) {
                    if let Some(gi) = Self::acc(grads, nodes, inp) {
                        for o in 0..*outer {
                            let src = &g[o * total + off..o * total + off + inner];
                            for (x, &v) in gi[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *x += v;
                            }
                        }
                    }
                    off += inner;
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &v)| *x += v);
                }
            }
            Op::Permute { a, perm } => {
                let out_shape = nodes[id].value.shape();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, out_shape, &inv);
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    ga.iter_mut().zip(&back).for_each(|(x, &v)| *x += v);
                }
            }
            Op::Sum { a, groups } | Op::Mean { a, groups } => {
                let numel = nodes[*a].value.numel();
                let inner = numel / groups;
                let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                    T::cst(1.0 / inner as f64)
                } else {
                    T::one()
                };
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i / inner] * scale;
                    }
                }
            }
            Op::MaskedSelect { a, idx } => {
                if let Some(ga) = Self::acc(grads, nodes, *a) {
                    for (&i, &v) in idx.iter().zip(g) {
                        ga[i] += v;
                    }
                }
            }
        }
    }

    fn backprop_matmul(&self, a: usize, b: usize, d: MatDims, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let av = nodes[a].value.data();
        let bv = nodes[b].value.data();
        let MatDims { batch, m, k, n, ta, tb, shared_b } = d;
        // Views (ptr offset, row stride, col stride) of op(A) [m,k] and op(B) [k,n].
        let (rsa, csa) = if ta { (1isize, m as isize) } else { (k as isize, 1isize) };
        let (rsb, csb) = if tb { (1isize, k as isize) } else { (n as isize, 1isize) };
        if let Some(ga) = Self::acc(grads, nodes, a) {
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                // d op(A) = G @ op(B)^T, written through op(A)'s strides.
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.as_ptr().add(bi * m * n),
                        n as isize,
                        1,
                        bv.as_ptr().add(b_off),
                        csb,
                        rsb,
                        T::one(),
                        ga.as_mut_ptr().add(bi * m * k),
                        rsa,
                        csa,
                    );
                }
            }
        }
        if let Some(gb) = Self::acc(grads, nodes, b) {
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                // d op(B) = op(A)^T @ G
                unsafe {
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.as_ptr().add(bi * m * k),
                        csa,
                        rsa,
                        g.as_ptr().add(bi * m * n),
                        n as isize,
                        1,
                        T::one(),
                        gb.as_mut_ptr().add(b_off),
                        rsb,
                        csb,
                    );
                }
            }
        }
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Backward<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Backward<T> {
    pub fn get(&self, v: Var, graph: &Graph<T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(graph.value(v).shape().to_vec(), g.clone()).ok()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let xf = x.f64();
    let inner = SQRT_2_OVER_PI * (xf + GELU_C * xf * xf * xf);
    T::cst(0.5 * xf * (1.0 + inner.tanh()))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.f64();
    let inner = SQRT_2_OVER_PI * (xf + GELU_C * xf * xf * xf);
    let th = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * xf * xf);
    T::cst(0.5 * (1.0 + th) + 0.5 * xf * (1.0 - th * th) * dinner)
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..src.len() {
        out.push(src[idx]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let i = g.constant(t(&[2, 2], &[1., 0., 0., 1.])).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_transposes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let c = g.matmul_t(a, a, false, true).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c).data(), &[14., 32., 32., 77.]);
        let d = g.matmul_t(a, a, true, false).unwrap();
        assert_eq!(g.shape(d), &[3, 3]);
        assert_eq!(g.value(d).data()[0], 17.);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("3 vs 2"), "{err}");
    }

    #[test]
    fn log_sigmoid_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(0.0)).unwrap();
        let y = g.log_sigmoid(a).unwrap();
        assert!((g.value(y).item() + std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn log_sigmoid_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![2], vec![-200.0f32, 200.0]).unwrap()).unwrap();
        let y = g.log_sigmoid(a).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 200.0).abs() < 1e-3);
        assert!(v[1].abs() < 1e-6);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 4], &[3.0; 4])).unwrap();
        let y = g.layer_norm(a).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_square_grad() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[1], &[3.0])).unwrap();
        let s = g.square(w).unwrap();
        let l = g.mean(s).unwrap();
        let back = g.backward(l).unwrap();
        assert_eq!(back.get(w, &g).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_a_numeric_fault() {
        let mut g = Graph::<f64>::new();
        let err = g.constant(t(&[1], &[f64::NAN])).unwrap_err();
        assert!(matches!(err, Error::NumericFault(_)));
    }

    #[test]
    fn broadcast_add_over_leading_axes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2, 2], &[0.; 8])).unwrap();
        let b = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 1., 2., 3., 4., 3., 4.]);
        let bias = g.constant(t(&[2], &[10., 20.])).unwrap();
        let d = g.add(c, bias).unwrap();
        assert_eq!(g.value(d).data()[..2], [11., 22.]);
    }

    #[test]
    fn permute_swaps_axes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let p = g.permute(a, &[1, 0]).unwrap();
        assert_eq!(g.shape(p), &[3, 2]);
        assert_eq!(g.value(p).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.])).unwrap();
        let b = g.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.])).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
    }
}
