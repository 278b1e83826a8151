use pei_core::tensor::{grad_check, OpAttrs, OpKind, Tape, Tensor, Var};
use pei_core::Result;
use proptest::prelude::*;

/// Reduces an op output to a scalar with fixed, position-dependent weights so
/// every output coordinate contributes to the checked gradient.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let n = tape.value(y).len();
    if n == 1 && tape.shape(y).is_empty() {
        return Ok(y);
    }
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7) % 11) as f64 * 0.17).collect();
    let c = tape.constant(tape.shape(y).to_vec(), w)?;
    let p = tape.multiply(y, c)?;
    Ok(tape.sum(p))
}

fn op_fn(kind: OpKind, rows: usize, cols: usize) -> impl Fn(&mut Tape, Var) -> Result<Var> {
    move |tape, x| {
        let y = match kind {
            OpKind::MatMul => {
                let xt = tape.transpose(x)?;
                tape.matmul(x, xt)?
            }
            OpKind::Add => {
                let s = tape.scale(x, 0.5);
                let a = tape.add(x, s)?;
                let row = tape.slice(x, 0, 0, 1)?;
                tape.add(a, row)?
            }
            OpKind::Multiply => {
                let row = tape.slice(x, 0, 0, 1)?;
                let m = tape.multiply(x, x)?;
                tape.multiply(m, row)?
            }
            OpKind::Scale => tape.scale(x, -1.7),
            OpKind::Concat => {
                let sq = tape.multiply(x, x)?;
                let a = tape.concat(&[x, sq], 0)?;
                let a = weighted_sum(tape, a)?;
                let b = tape.concat(&[sq, x, x], 1)?;
                let b = weighted_sum(tape, b)?;
                tape.add(a, b)?
            }
            OpKind::Slice => {
                let c = tape.slice(x, 1, cols / 2, cols)?;
                tape.slice(c, 0, 0, rows.div_ceil(2))?
            }
            OpKind::Transpose => tape.transpose(x)?,
            OpKind::SoftmaxRows => tape.softmax_rows(x),
            OpKind::LayerNorm => tape.apply(kind, &[x], &OpAttrs::default())?,
            OpKind::Gelu => tape.gelu(x),
            OpKind::EmbeddingGather => {
                let ids: Vec<usize> = (0..rows + 2).map(|i| (i * 3) % rows).collect();
                tape.embedding_gather(x, &ids)?
            }
            OpKind::Mean => {
                let sq = tape.multiply(x, x)?;
                tape.mean(sq)
            }
            OpKind::Sum => {
                let g = tape.gelu(x);
                tape.sum(g)
            }
            OpKind::CrossEntropyFromLogits => {
                let labels: Vec<usize> = (0..rows).map(|i| (i * 5) % cols).collect();
                tape.cross_entropy_from_logits(x, &labels)?
            }
            OpKind::Sigmoid => tape.sigmoid(x),
            OpKind::BinaryCrossEntropy => {
                let p = tape.sigmoid(x);
                let t: Vec<f64> = (0..rows * cols).map(|i| (i % 3) as f64 / 2.0).collect();
                tape.binary_cross_entropy(p, &t)?
            }
        };
        weighted_sum(tape, y)
    }
}

fn point() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..5, 2usize..6).prop_flat_map(|(r, c)| {
        (
            Just(r),
            Just(c),
            proptest::collection::vec(-2.0f64..2.0, r * c),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(120))]

    #[test]
    fn every_catalogue_op_matches_central_differences(
        (r, c, data) in point(),
        which in 0usize..OpKind::ALL.len(),
    ) {
        let kind = OpKind::ALL[which];
        let t = Tensor::new(vec![r, c], data).unwrap();
        let err = grad_check(op_fn(kind, r, c), &t, 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "{kind}: {err}");
    }

    #[test]
    fn softmax_rows_are_distributions((r, c, data) in point()) {
        let mut tape = Tape::new();
        let x = tape.constant(vec![r, c], data).unwrap();
        let y = tape.softmax_rows(x);
        for row in tape.value(y).chunks(c) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows((r, c, data) in point()) {
        // rows need some spread for the eps term to be negligible at 1e-8
        let spread: Vec<f64> = data.iter().enumerate().map(|(i, v)| v + 5.0 * (i % c) as f64).collect();
        let mut tape = Tape::new();
        let x = tape.constant(vec![r, c], spread).unwrap();
        let y = tape.layer_norm(x, 1e-12).unwrap();
        for row in tape.value(y).chunks(c) {
            let m = row.iter().sum::<f64>() / c as f64;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c as f64;
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((v - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn concat_then_slice_passes_identity_gradient((r, c, data) in point()) {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![r, c], data.clone()).unwrap().with_requires_grad(true)).unwrap();
        let other = tape.constant(vec![r, c], data).unwrap();
        let cat = tape.concat(&[other, x], 1).unwrap();
        let back = tape.slice(cat, 1, c, 2 * c).unwrap();
        prop_assert_eq!(tape.value(back), tape.value(x));
        let s = tape.sum(back);
        let g = tape.backward(s).unwrap();
        prop_assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn forward_ops_stay_finite((r, c, data) in point()) {
        let t = Tensor::new(vec![r, c], data).unwrap();
        for kind in OpKind::ALL {
            let mut tape = Tape::new();
            let x = tape.leaf(&t).unwrap();
            let y = op_fn(kind, r, c)(&mut tape, x).unwrap();
            prop_assert!(tape.value(y).iter().all(|v| v.is_finite()), "{kind}");
        }
    }
}
