use std::collections::HashMap;

use super::{dims2, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, bcast: bool },
    Mul { a: Var, b: Var, bcast: bool },
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, end: usize },
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, ids: Vec<usize> },
    Mean(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Sigmoid(Var),
    Bce { p: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a computation. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every trainable parameter leaf reached from the root.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn dims(&self, v: Var) -> (usize, usize) {
        // shapes on the tape are validated at construction, rank ≤ 2
        dims2(&self.nodes[v.0].shape, "tape").expect("rank checked at push")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        dims2(&t.shape, "leaf")?;
        Ok(self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf,
            t.requires_grad,
        ))
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.leaf(&t)
    }

    /// Loads a stored parameter as a leaf. Repeated calls for the same
    /// parameter return the same node so gradients accumulate on one leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.tensor(id);
        let v = self.push(
            t.shape.clone(),
            t.data.clone(),
            Op::Leaf,
            t.requires_grad,
        );
        self.params.insert(id, v);
        v
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs columns {k} != rhs rows {k2} ({m}x{k} · {k2}x{n})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn binary_shape(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        let (_, c) = self.dims(a);
        let row_vector = matches!(sb, [n] if *n == c) || matches!(sb, [1, n] if *n == c);
        if row_vector && sa.len() == 2 {
            Ok(true)
        } else {
            Err(Error::shape(
                op,
                format!("lhs {sa:?} and rhs {sb:?} differ and rhs is not a row of width {c}"),
            ))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.binary_shape("add", a, b)?;
        let (_, c) = self.dims(a);
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + if bcast { bv[i % c] } else { bv[i] })
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b, bcast }, rg))
    }

    pub fn multiply(&mut self, a: Var, b: Var) -> Result<Var> {
        let bcast = self.binary_shape("multiply", a, b)?;
        let (_, c) = self.dims(a);
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * if bcast { bv[i % c] } else { bv[i] })
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b, bcast }, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::attr("concat", "no inputs"))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rank = self.shape(first).len();
        if rank == 0 || axis >= rank {
            return Err(Error::attr("concat", format!("axis {axis} invalid for rank {rank}")));
        }
        let (_, c0) = self.dims(first);
        let mut rows = 0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank {
                return Err(Error::shape("concat", format!("rank {} vs {rank}", s.len())));
            }
            let (r, c) = self.dims(p);
            if rank == 1 || axis == 1 {
                let (r0, _) = self.dims(first);
                if r != r0 {
                    return Err(Error::shape(
                        "concat",
                        format!("row count {r} differs from {r0} along axis {axis}"),
                    ));
                }
                rows = r0;
                cols += c;
            } else {
                if c != c0 {
                    return Err(Error::shape(
                        "concat",
                        format!("column count {c} differs from {c0} along axis 0"),
                    ));
                }
                rows += r;
                cols = c0;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if rank == 2 && axis == 1 {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = self.dims(p);
                    out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
                }
            }
        } else {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        }
        let shape = if rank == 1 { vec![cols] } else { vec![rows, cols] };
        let rg = self.rg(parts);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::attr("slice", format!("axis {axis} invalid for {shape:?}")));
        }
        if start >= end || end > shape[axis] {
            return Err(Error::attr(
                "slice",
                format!("range {start}..{end} invalid for extent {} on axis {axis}", shape[axis]),
            ));
        }
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let (out, new_shape) = if shape.len() == 1 {
            (v[start..end].to_vec(), vec![end - start])
        } else if axis == 0 {
            (v[start * c..end * c].to_vec(), vec![end - start, c])
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(r * w);
            for i in 0..r {
                out.extend_from_slice(&v[i * c + start..i * c + end]);
            }
            (out, vec![r, w])
        };
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, Op::Slice { a, axis, start, end }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", self.shape(a))));
        }
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::attr("layer_norm", format!("eps must be > 0, got {eps}")));
        }
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
        }
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { a, inv_std }, rg))
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x * std_normal_cdf(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu(a), rg)
    }

    /// Gathers rows of `table` by index. Also used to pick rows of hidden states.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() != 2 {
            return Err(Error::shape("embedding_gather", "table must be rank 2"));
        }
        if ids.is_empty() {
            return Err(Error::attr("embedding_gather", "empty id list"));
        }
        let (r, c) = self.dims(table);
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::TokenOutOfRange { id, vocab: r });
            }
            out.extend_from_slice(&v[id * c..(id + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![m], Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    /// Mean over rows of `logsumexp(row) − row[label]`.
    pub fn cross_entropy_from_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if labels.len() != r {
            return Err(Error::shape(
                "cross_entropy_from_logits",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::attr(
                    "cross_entropy_from_logits",
                    format!("label {y} out of range for {c} classes"),
                ));
            }
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            loss += lse - row[y];
            softmax_in_place(row);
        }
        loss /= r as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Sigmoid(a), rg)
    }

    /// Mean binary cross-entropy of probabilities `p` against targets in [0, 1].
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(p);
        if v.len() != targets.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} probabilities vs {} targets", v.len(), targets.len()),
            ));
        }
        if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::attr("binary_cross_entropy", format!("probability {bad} outside [0, 1]")));
        }
        let n = v.len() as f64;
        let loss = v
            .iter()
            .zip(targets)
            .map(|(&q, &y)| {
                let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse pass ------------------------------------------------

    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let node = &self.nodes[root.0];
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        if !node.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let params = self.params.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Add { a, b, bcast } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *bcast {
                        let c = gb.len();
                        for (i, y) in g.iter().enumerate() {
                            gb[i % c] += y;
                        }
                    } else {
                        gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul { a, b, bcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let c = bv.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in g.iter().enumerate() {
                        ga[i] += y * if *bcast { bv[i % c] } else { bv[i] };
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, y) in g.iter().enumerate() {
                        let j = if *bcast { i % c } else { i };
                        gb[j] += y * av[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * s);
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = dims2(&node.shape, "concat").expect("checked");
                let column_mode = node.shape.len() == 2 && *axis == 1;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.dims(p);
                    if let Some(gp) = self.acc(grads, p) {
                        if column_mode {
                            for i in 0..rows {
                                for j in 0..c {
                                    gp[i * c + j] += g[i * cols + offset + j];
                                }
                            }
                        } else {
                            let n = r * c;
                            gp.iter_mut()
                                .zip(&g[offset..offset + n])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += if column_mode { c } else { r * c };
                }
            }
            Op::Slice { a, axis, start, end } => {
                let rank = self.shape(*a).len();
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    if rank == 1 {
                        ga[*start..*end].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    } else if *axis == 0 {
                        ga[start * c..end * c].iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    } else {
                        let w = end - start;
                        for i in 0..r {
                            for j in 0..w {
                                ga[i * c + start + j] += g[i * w + j];
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = self.dims(*a);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let (r, c) = self.dims(*a);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    let n = c as f64;
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for j in 0..c {
                            ga[i * c + j] += inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, y) in g.iter().enumerate() {
                        let xi = x[i];
                        let d = std_normal_cdf(xi) + xi * std_normal_pdf(xi);
                        ga[i] += y * d;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (_, c) = self.dims(*table);
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            gt[id * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = self.dims(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    let s = g[0] / r as f64;
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - t);
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, gy) in g.iter().enumerate() {
                        ga[i] += gy * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Bce { p, targets } => {
                let pv = self.value(*p);
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for (i, &t) in targets.iter().enumerate() {
                        let q = pv[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        gp[i] += g[0] * (q - t) / (q * (1.0 - q)) / n;
                    }
                }
            }
        }
    }
}

const BCE_CLAMP: f64 = 1e-12;

/// `c (m×n) (+)= op(a) (m×k) · op(b) (k×n)`; `ta`/`tb` mean the operand is
/// stored transposed (a as k×m, b as n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
