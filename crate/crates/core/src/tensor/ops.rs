use std::fmt;
use std::str::FromStr;

use super::{Tape, Var};
use crate::error::{Error, Result};

/// Tag for the tape's op catalogue, for callers that dispatch by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Multiply,
    Scale,
    Concat,
    Slice,
    Transpose,
    SoftmaxRows,
    LayerNorm,
    Gelu,
    EmbeddingGather,
    Mean,
    Sum,
    CrossEntropyFromLogits,
    Sigmoid,
    BinaryCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Multiply,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::SoftmaxRows,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::EmbeddingGather,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::CrossEntropyFromLogits,
        OpKind::Sigmoid,
        OpKind::BinaryCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Multiply => "multiply",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::EmbeddingGather => "embedding_gather",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CrossEntropyFromLogits => "cross_entropy_from_logits",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

/// Attributes consumed by [`Tape::apply`]; each op reads only its own fields.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: usize,
    pub start: usize,
    pub end: usize,
    pub eps: Option<f64>,
    pub factor: f64,
    pub ids: Vec<usize>,
    pub targets: Vec<f64>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = match kind {
            OpKind::MatMul | OpKind::Add | OpKind::Multiply => Some(2),
            OpKind::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::attr(
                    kind.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        }
        let x = inputs.first().copied();
        let x = || x.ok_or_else(|| Error::attr(kind.name(), "missing input"));
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Multiply => self.multiply(inputs[0], inputs[1]),
            OpKind::Scale => Ok(self.scale(x()?, attrs.factor)),
            OpKind::Concat => self.concat(inputs, attrs.axis),
            OpKind::Slice => self.slice(x()?, attrs.axis, attrs.start, attrs.end),
            OpKind::Transpose => self.transpose(x()?),
            OpKind::SoftmaxRows => Ok(self.softmax_rows(x()?)),
            OpKind::LayerNorm => self.layer_norm(x()?, attrs.eps.unwrap_or(LAYER_NORM_EPS)),
            OpKind::Gelu => Ok(self.gelu(x()?)),
            OpKind::EmbeddingGather => self.embedding_gather(x()?, &attrs.ids),
            OpKind::Mean => Ok(self.mean(x()?)),
            OpKind::Sum => Ok(self.sum(x()?)),
            OpKind::CrossEntropyFromLogits => self.cross_entropy_from_logits(x()?, &attrs.ids),
            OpKind::Sigmoid => Ok(self.sigmoid(x()?)),
            OpKind::BinaryCrossEntropy => self.binary_cross_entropy(x()?, &attrs.targets),
        }
    }
}
