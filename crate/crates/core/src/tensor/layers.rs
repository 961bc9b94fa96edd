use super::DenseArray;
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// `out[i,j] = Σ_k x[i,k]·w[j,k] + b[j]`.
pub fn affine_forward(x: &DenseArray, w: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    let (batch, n) = (x.rows(), x.cols());
    let (m, n2) = (w.rows(), w.cols());
    if n != n2 || w.shape().len() != 2 {
        return Err(Error::dim(format!(
            "affine: input {batch}x{n} vs weight {m}x{n2}"
        )));
    }
    if b.len() != m {
        return Err(Error::dim(format!(
            "affine: bias len {} vs out {m}",
            b.len()
        )));
    }
    let mut out = DenseArray::zeros(&[batch, m]);
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for i in 0..batch {
        let xi = &xd[i * n..(i + 1) * n];
        for j in 0..m {
            let wj = &wd[j * n..(j + 1) * n];
            od[i * m + j] = super::dot(xi, wj) + bd[j];
        }
    }
    out.debug_check_finite("affine_forward");
    Ok(out)
}

/// Returns `(dx, dw, db)` for [`affine_forward`] given the upstream gradient.
pub fn affine_backward(
    x: &DenseArray,
    w: &DenseArray,
    grad_out: &DenseArray,
) -> Result<(DenseArray, DenseArray, DenseArray)> {
    let (batch, n) = (x.rows(), x.cols());
    let m = w.rows();
    if grad_out.rows() != batch || grad_out.cols() != m || w.cols() != n {
        return Err(Error::dim("affine_backward: shape mismatch"));
    }
    let mut dx = DenseArray::zeros(&[batch, n]);
    let mut dw = DenseArray::zeros(&[m, n]);
    let mut db = DenseArray::zeros(&[m]);
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    {
        let dxd = dx.data_mut();
        for i in 0..batch {
            for j in 0..m {
                let g = gd[i * m + j];
                if g == 0.0 {
                    continue;
                }
                let wj = &wd[j * n..(j + 1) * n];
                for (d, &wv) in dxd[i * n..(i + 1) * n].iter_mut().zip(wj) {
                    *d += g * wv;
                }
            }
        }
    }
    {
        let dwd = dw.data_mut();
        for i in 0..batch {
            let xi = &xd[i * n..(i + 1) * n];
            for j in 0..m {
                let g = gd[i * m + j];
                if g == 0.0 {
                    continue;
                }
                for (d, &xv) in dwd[j * n..(j + 1) * n].iter_mut().zip(xi) {
                    *d += g * xv;
                }
            }
        }
    }
    {
        let dbd = db.data_mut();
        for i in 0..batch {
            for j in 0..m {
                dbd[j] += gd[i * m + j];
            }
        }
    }
    Ok((dx, dw, db))
}

pub fn leaky_relu(x: &DenseArray, slope: f64) -> DenseArray {
    x.map(|v| v.max(slope * v))
}

/// Backward through [`leaky_relu`]; `pre` is the activation input.
pub fn leaky_relu_backward(
    pre: &DenseArray,
    grad_out: &DenseArray,
    slope: f64,
) -> Result<DenseArray> {
    pre.zip_with(grad_out, |p, g| if p > 0.0 { g } else { slope * g })
}

pub fn softmax_rows(logits: &DenseArray) -> DenseArray {
    let mut probs = logits.clone();
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_one_hot(targets: &DenseArray) -> Result<()> {
    for i in 0..targets.rows() {
        let row = targets.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::invalid(format!(
                "target row {i} is not one-hot: {row:?}"
            )));
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy. The gradient on the logits is `(probs − targets)/B`.
pub fn softmax_ce(logits: &DenseArray, targets: &DenseArray) -> Result<(f64, DenseArray)> {
    if !logits.same_shape(targets) || logits.shape().len() != 2 {
        return Err(Error::dim(format!(
            "softmax_ce: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    check_one_hot(targets)?;
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let target = targets
            .row(i)
            .iter()
            .position(|&t| t == 1.0)
            .expect("one-hot");
        total += lse - row[target];
    }
    Ok((total / logits.rows() as f64, probs))
}

/// Mean elementwise binary cross-entropy over all `B×C` entries. The gradient
/// on the logits is `(probs − targets)/(B·C)`.
pub fn sigmoid_bce(logits: &DenseArray, targets: &DenseArray) -> Result<(f64, DenseArray)> {
    if !logits.same_shape(targets) || logits.shape().len() != 2 {
        return Err(Error::dim("sigmoid_bce: shape mismatch"));
    }
    if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::invalid(format!(
            "sigmoid_bce: non-binary target {t}"
        )));
    }
    let probs = logits.map(sigmoid);
    let total: f64 = logits
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&s, &y)| s.max(0.0) - s * y + (-s.abs()).exp().ln_1p())
        .sum();
    Ok((total / logits.len() as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseArray {
        DenseArray::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_examples() {
        let b = DenseArray::vector(vec![3.0, 4.0]).unwrap();
        let out = affine_forward(&m(&[&[1.0, 2.0]]), &DenseArray::zeros(&[2, 2]), &b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);

        let eye = DenseArray::identity(2);
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let out = affine_forward(&x, &eye, &DenseArray::zeros(&[2])).unwrap();
        assert_eq!(out, x);

        let w = m(&[&[1.0, 1.0], &[2.0, -1.0]]);
        let b = DenseArray::vector(vec![0.0, 1.0]).unwrap();
        let out = affine_forward(&m(&[&[1.0, 2.0]]), &w, &b).unwrap();
        assert_eq!(out.data(), &[3.0, 1.0]);
    }

    #[test]
    fn affine_rejects_mismatch() {
        let x = m(&[&[1.0, 2.0, 3.0]]);
        let w = DenseArray::identity(2);
        assert!(matches!(
            affine_forward(&x, &w, &DenseArray::zeros(&[2])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn leaky_relu_examples() {
        let x = DenseArray::vector(vec![1.0, -1.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[1.0, -0.2]);
        let x = DenseArray::vector(vec![0.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[0.0]);
        let x = DenseArray::vector(vec![-5.0]).unwrap();
        assert!((leaky_relu(&x, 0.01).data()[0] + 0.05).abs() < 1e-15);
    }

    #[test]
    fn softmax_ce_examples() {
        let (loss, probs) = softmax_ce(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(probs.data(), &[0.5, 0.5]);

        let (loss, _) = softmax_ce(&m(&[&[1000.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!(loss.abs() < 1e-12);

        let (loss, _) = softmax_ce(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 1.0]])).unwrap();
        assert!((loss - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((loss - 1.3133).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_rejects_soft_targets() {
        let r = softmax_ce(&m(&[&[0.0, 0.0]]), &m(&[&[0.5, 0.5]]));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn sigmoid_bce_examples() {
        let (loss, probs) = sigmoid_bce(&m(&[&[0.0]]), &m(&[&[1.0]])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(probs.data(), &[0.5]);
        let (loss, _) = sigmoid_bce(&m(&[&[50.0]]), &m(&[&[1.0]])).unwrap();
        assert!(loss < 1e-20);
        let (loss, _) = sigmoid_bce(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!(sigmoid_bce(&m(&[&[0.0]]), &m(&[&[0.3]])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = m(&[&[3.0, -1.0, 0.5], &[-700.0, 700.0, 0.0]]);
        let p = softmax_rows(&logits);
        for i in 0..2 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
