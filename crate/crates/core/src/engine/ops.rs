//! Forward and backward kernels for embedding lookup, affine maps and the
//! softmax cross-entropy loss.

use super::{gemm, EngineError, Op, Parameter, Scalar, Tensor};

/// Rows `ids[i]` of `table`, stacked.
pub fn embedding_lookup<F: Scalar>(
    table: &Tensor<F>,
    ids: &[u32],
) -> Result<Tensor<F>, EngineError> {
    let mut out = Tensor::zeros(ids.len(), table.cols());
    embedding_lookup_into(table, ids, out.data_mut(), table.cols(), 0)?;
    Ok(out)
}

/// Writes rows `ids[i]` of `table` into columns `[offset, offset + table.cols())`
/// of a row-major buffer with `stride` columns.
pub fn embedding_lookup_into<F: Scalar>(
    table: &Tensor<F>,
    ids: &[u32],
    out: &mut [F],
    stride: usize,
    offset: usize,
) -> Result<(), EngineError> {
    let width = table.cols();
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= table.rows() {
            return Err(EngineError::IndexOutOfRange {
                index: id,
                bound: table.rows(),
            });
        }
        out[i * stride + offset..i * stride + offset + width].copy_from_slice(table.row(id));
    }
    Ok(())
}

/// Adds row `i` of the upstream gradient (columns `[offset, offset + width)`
/// of a buffer with `stride` columns) into gradient row `ids[i]`.
pub fn embedding_backward<F: Scalar>(
    grad: &mut Tensor<F>,
    ids: &[u32],
    upstream: &[F],
    stride: usize,
    offset: usize,
) {
    let width = grad.cols();
    for (i, &id) in ids.iter().enumerate() {
        let src = &upstream[i * stride + offset..i * stride + offset + width];
        for (g, u) in grad.row_mut(id as usize).iter_mut().zip(src) {
            *g += *u;
        }
    }
}

/// `y = x W + b` with `b` broadcast over rows.
pub fn affine<F: Scalar>(
    input: &Tensor<F>,
    weight: &Parameter<F>,
    bias: &Parameter<F>,
) -> Result<Tensor<F>, EngineError> {
    let w = &weight.value;
    let b = &bias.value;
    if input.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols() {
        return Err(EngineError::Shape(format!(
            "affine: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(input.rows(), w.cols());
    for r in 0..input.rows() {
        out.row_mut(r).copy_from_slice(b.data());
    }
    gemm(
        input.rows(),
        input.cols(),
        w.cols(),
        F::one(),
        input.data(),
        Op::N,
        w.data(),
        Op::N,
        F::one(),
        out.data_mut(),
    );
    Ok(out)
}

/// Accumulates `dW += x^T dy`, `db += sum_rows(dy)` and returns `dx = dy W^T`.
pub fn affine_backward<F: Scalar>(
    input: &Tensor<F>,
    upstream: &Tensor<F>,
    weight: &mut Parameter<F>,
    bias: &mut Parameter<F>,
) -> Tensor<F> {
    let (n, k, m) = (input.rows(), input.cols(), upstream.cols());
    gemm(
        k,
        n,
        m,
        F::one(),
        input.data(),
        Op::T,
        upstream.data(),
        Op::N,
        F::one(),
        weight.grad.data_mut(),
    );
    add_column_sums(upstream, bias.grad.data_mut());
    let mut dx = Tensor::zeros(n, k);
    gemm(
        n,
        m,
        k,
        F::one(),
        upstream.data(),
        Op::N,
        weight.value.data(),
        Op::T,
        F::zero(),
        dx.data_mut(),
    );
    dx
}

pub fn add_column_sums<F: Scalar>(m: &Tensor<F>, out: &mut [F]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += *v;
        }
    }
}

/// `-ln softmax(logits)[target]` with max subtraction.
pub fn softmax_cross_entropy<F: Scalar>(logits: &[F], target: usize) -> Result<F, EngineError> {
    if target >= logits.len() {
        return Err(EngineError::IndexOutOfRange {
            index: target,
            bound: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(sum.ln() + max - logits[target])
}

/// Softmax of a row, in place.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let inv = sum.recip();
    for z in row.iter_mut() {
        *z *= inv;
    }
}

/// Sum in eight interleaved lanes, which vectorizes and has a fixed order.
fn lane_sum<F: Scalar>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    let mut sum = chunks.remainder().iter().fold(F::zero(), |s, &x| s + x);
    for a in acc {
        sum += a;
    }
    sum
}

/// Row-wise cross entropy against `targets`. Returns the summed loss (in f64)
/// and, when `grad_scale` is given, overwrites `logits` with
/// `grad_scale * (softmax - onehot)`, the gradient of `grad_scale * sum`.
pub fn softmax_cross_entropy_rows<F: Scalar>(
    logits: &mut Tensor<F>,
    targets: &[u32],
    grad_scale: Option<F>,
) -> Result<f64, EngineError> {
    if targets.len() != logits.rows() {
        return Err(EngineError::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    let width = logits.cols();
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let t = t as usize;
        if t >= width {
            return Err(EngineError::IndexOutOfRange {
                index: t,
                bound: width,
            });
        }
        let row = logits.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let shifted_target = row[t] - max;
        row.iter_mut().for_each(|z| *z -= max);
        F::exp_in_place(row);
        let sum = lane_sum(row);
        total += (sum.ln() - shifted_target).as_f64();
        if let Some(scale) = grad_scale {
            let inv = scale / sum;
            for z in row.iter_mut() {
                *z *= inv;
            }
            row[t] -= scale;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lookup_identity_row() {
        let eye = Tensor::<f64>::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let out = embedding_lookup(&eye, &[1]).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            embedding_lookup(&eye, &[3]),
            Err(EngineError::IndexOutOfRange { index: 3, bound: 3 })
        ));
    }

    #[test]
    fn lookup_backward_accumulates_duplicates() {
        let mut grad = Tensor::<f64>::zeros(4, 2);
        let upstream = vec![1.0; 4];
        embedding_backward(&mut grad, &[2, 2], &upstream, 2, 0);
        assert_eq!(grad.row(2), &[2.0, 2.0]);
        assert_eq!(grad.row(0), &[0.0, 0.0]);
    }

    #[test]
    fn lookup_matches_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = Tensor::<f64>::from_fn(20, 7, |_, _| rng.random_range(-1.0..1.0));
        let ids: Vec<u32> = (0..30).map(|_| rng.random_range(0..20)).collect();
        let out = embedding_lookup(&table, &ids).unwrap();
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..7 {
                assert_eq!(out.get(i, c), table.get(id as usize, c));
            }
        }
    }

    #[test]
    fn affine_examples() {
        let x = Tensor::<f64>::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let w = Parameter::new("w", Tensor::from_fn(3, 2, |r, c| (r * 2 + c) as f64));
        let b = Parameter::new("b", Tensor::zeros(1, 2));
        assert_eq!(affine(&x, &w, &b).unwrap(), w.value);

        let x = Tensor::from_vec(1, 1, vec![2.0]);
        let w = Parameter::new("w", Tensor::from_vec(1, 1, vec![3.0]));
        let b = Parameter::new("b", Tensor::from_vec(1, 1, vec![1.0]));
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[7.0]);

        let bad = Parameter::new("w", Tensor::<f64>::zeros(2, 1));
        assert!(matches!(affine(&x, &bad, &b), Err(EngineError::Shape(_))));
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(4, 5, |_, _| rng.random_range(-1.0..1.0));
        let w = Parameter::new(
            "w",
            Tensor::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0)),
        );
        let b = Parameter::new(
            "b",
            Tensor::from_fn(1, 3, |_, _| rng.random_range(-1.0..1.0)),
        );
        let y = affine(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = b.value.get(0, j);
                for p in 0..5 {
                    s += x.get(i, p) * w.value.get(p, j);
                }
                assert!((y.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = [0.3f64; 4];
        let l = softmax_cross_entropy(&uniform, 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let mut sat = [0.0f64; 4];
        sat[1] = 1000.0;
        assert!(softmax_cross_entropy(&sat, 1).unwrap().abs() < 1e-12);
        assert!(softmax_cross_entropy(&sat, 4).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t = rng.random_range(0..12);
            let direct = -(logits[t].exp() / logits.iter().map(|z| z.exp()).sum::<f64>()).ln();
            let got = softmax_cross_entropy(&logits, t).unwrap();
            assert!((got - direct).abs() < 1e-12, "{got} vs {direct}");
        }
    }

    #[test]
    fn rows_gradient_sums_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut logits = Tensor::<f64>::from_fn(3, 6, |_, _| rng.random_range(-3.0..3.0));
        let copy = logits.clone();
        let total = softmax_cross_entropy_rows(&mut logits, &[0, 5, 2], Some(1.0)).unwrap();
        let expect: f64 = [0usize, 5, 2]
            .iter()
            .enumerate()
            .map(|(r, &t)| softmax_cross_entropy(copy.row(r), t).unwrap())
            .sum();
        assert!((total - expect).abs() < 1e-12);
        for r in 0..3 {
            let s: f64 = logits.row(r).iter().sum();
            assert!(s.abs() < 1e-12);
        }
        let mut probs = copy.row(0).to_vec();
        softmax_in_place(&mut probs);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
