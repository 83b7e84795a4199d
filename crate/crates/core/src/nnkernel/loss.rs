use crate::error::{Error, Result};
use crate::nnkernel::tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits, max-subtracted.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("softmax expects [N,K], got {:?}", logits.shape())));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(out)
}

/// Mean cross-entropy of softmax(logits) against integer labels, with its
/// gradient `(softmax - onehot) / N`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "softmax_xent: logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &y) in grad.data_mut().chunks_exact_mut(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += log_z - row[y];
        for v in row.iter_mut() {
            *v = (*v - log_z).exp() / n as f64;
        }
        row[y] -= 1.0 / n as f64;
    }
    Ok((loss / n as f64, grad))
}
