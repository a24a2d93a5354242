use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction, computed in `f64`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [b, n] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax expects B x N logits, got {:?}",
            logits.shape()
        )));
    };
    let mut out = Vec::with_capacity(b * n);
    for row in logits.data().chunks_exact(n) {
        out.extend(softmax_row(row).into_iter().map(|p| p as f32));
    }
    Tensor::from_vec(&[b, n], out)
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, and its
/// gradient `(softmax - onehot) / B` wrt the logits.
pub fn loss_softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [b, n] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "loss expects B x N logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if b == 0 {
        return Err(Error::EmptyInput("loss batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_classes: n,
        });
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(b * n);
    for (row, &label) in logits.data().chunks_exact(n).zip(labels) {
        let p = softmax_row(row);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        loss += lse - row[label] as f64;
        for (j, pj) in p.into_iter().enumerate() {
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push(((pj - target) / b as f64) as f32);
        }
    }
    Ok((loss / b as f64, Tensor::from_vec(&[b, n], grad)?))
}
