//! Dense f64 tensors and a tape-based reverse-mode differentiator.
//!
//! [`Tensor`] is a plain row-major array. Computation happens on a [`Tape`]:
//! leaves are pushed onto it, every op appends a node, and [`Tape::backward`]
//! replays the nodes in reverse. One tape per forward pass; tapes share
//! nothing, so independent passes can run on separate threads.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport};
pub use ops::{OpAttrs, OpKind};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.requires_grad = on;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the accumulated gradient.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} elements, tensor {}", g.len(), self.data.len()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    /// Rows and columns when viewed as a matrix; a vector is a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        dims2(&self.shape, "tensor")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&1);
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [] => Ok((1, 1)),
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected rank ≤ 2, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(shape: &[usize], data: &[f64], rg: bool) -> (Tape, Var) {
        let mut tape = Tape::new();
        let t = Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(rg);
        let v = tape.leaf(&t).unwrap();
        (tape, v)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let (mut tape, x) = tape_with(&[2], &[0.0, 0.0], false);
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.leaf(&Tensor::identity(2)).unwrap();
        let a = tape.constant(vec![2, 3], vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap();
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
        assert_eq!(tape.shape(y), &[2, 3]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_classes() {
        for label in 0..4 {
            let (mut tape, x) = tape_with(&[1, 4], &[0.3; 4], false);
            let l = tape.cross_entropy_from_logits(x, &[label]).unwrap();
            assert!((tape.scalar(l) - 4f64.ln()).abs() < 1e-12);
            assert!((tape.scalar(l) - 1.386294).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let (mut tape, x) = tape_with(&[2], &[1.0, 2.0], true);
        let sq = tape.multiply(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let (mut tape, x) = tape_with(&[5], &[1.0, -3.0, 2.0, 0.0, 9.0], true);
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let (mut tape, x) = tape_with(&[3], &[1.0, 2.0, 3.0], true);
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let (mut tape, x) = tape_with(&[2], &[1.0, 2.0], true);
        let y = tape.scale(x, 3.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn backward_on_detached_root_fails() {
        let (mut tape, x) = tape_with(&[2], &[1.0, 2.0], false);
        let y = tape.sum(x);
        assert!(matches!(tape.backward(y), Err(Error::Detached)));
    }

    #[test]
    fn unknown_op_tag_is_rejected() {
        assert!(matches!("conv2d".parse::<OpKind>(), Err(Error::UnknownOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn matmul_mismatch_names_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("lhs columns 3 != rhs rows 2"), "{err}");
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let (mut tape, x) = tape_with(&[1, 3], &[1.0, 2.0, 3.0], false);
        assert!(tape.layer_norm(x, 0.0).is_err());
        assert!(tape.apply(OpKind::LayerNorm, &[x], &OpAttrs { eps: Some(-1.0), ..Default::default() }).is_err());
    }

    #[test]
    fn apply_dispatches_by_tag() {
        let (mut tape, x) = tape_with(&[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let t = tape.apply(OpKind::Transpose, &[x], &OpAttrs::default()).unwrap();
        assert_eq!(tape.value(t), &[1.0, 3.0, 2.0, 4.0]);
        let s = tape
            .apply(OpKind::Slice, &[x], &OpAttrs { axis: 1, start: 1, end: 2, ..Default::default() })
            .unwrap();
        assert_eq!(tape.value(s), &[2.0, 4.0]);
        assert!(tape.apply(OpKind::MatMul, &[x], &OpAttrs::default()).is_err());
    }

    #[test]
    fn tensor_shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let mut t = Tensor::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let w = [0.5, -1.5, 2.0, 0.25];
        let point = Tensor::new(vec![4], vec![0.1, -0.7, 1.3, 0.0]).unwrap();
        let err = grad_check(
            |tape, x| {
                let c = tape.constant(vec![4], w.to_vec())?;
                let y = tape.multiply(x, c)?;
                Ok(tape.sum(y))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn grad_check_gelu_composition() {
        let point = Tensor::new(vec![1], vec![0.5]).unwrap();
        let err = grad_check(
            |tape, x| {
                let g = tape.gelu(x);
                let g2 = tape.multiply(g, g)?;
                let s = tape.gelu(g2);
                Ok(tape.sum(s))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_flags_corrupted_gradient() {
        let point = [0.3, -1.1, 0.8];
        let f = |x: &[f64]| -> Result<f64> { Ok(x.iter().map(|v| v * v * v).sum()) };
        let honest: Vec<f64> = point.iter().map(|v| 3.0 * v * v).collect();
        let ok = grad_check_with(f, &honest, &point, 1e-5).unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let corrupted: Vec<f64> = honest.iter().map(|g| g * 1.01).collect();
        let bad = grad_check_with(f, &corrupted, &point, 1e-5).unwrap();
        assert!(bad.max_rel_error > 1e-3, "{}", bad.max_rel_error);
    }

    #[test]
    fn grad_check_rejects_vector_output() {
        let point = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|tape, x| Ok(tape.scale(x, 2.0)), &point, 1e-5).is_err());
    }

    #[test]
    fn two_layer_network_matches_central_differences() {
        // 3 → 4 → 2 MLP with gelu and cross-entropy; check w.r.t. the first weight matrix
        let w2: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let input = vec![0.2, -0.4, 1.1, 0.7, 0.1, -0.9];
        let point = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 5 % 7) as f64 - 3.0) * 0.25).collect()).unwrap();
        let err = grad_check(
            |tape, w1| {
                let x = tape.constant(vec![2, 3], input.clone())?;
                let w2 = tape.constant(vec![4, 2], w2.clone())?;
                let h = tape.matmul(x, w1)?;
                let h = tape.gelu(h);
                let o = tape.matmul(h, w2)?;
                tape.cross_entropy_from_logits(o, &[1, 0])
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
