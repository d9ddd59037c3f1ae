use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Inverse-frequency class weights N / (K · N_c).
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {c} has no samples")));
    }
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|&n| total as f64 / (k * n as f64))
        .collect())
}

/// Numerically stable log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mean over the batch of `weight[label] · -log softmax(logits)[label]`,
/// with the exact gradient with respect to the logits.
pub fn weighted_ce_loss(
    logits: &Tensor,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let n = logits.batch();
    let k = logits.sample_len();
    if labels.len() != n || weights.len() != k {
        return Err(Error::Shape(format!(
            "{n} logit rows, {} labels, {} weights for {k} classes",
            labels.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (s, &label) in labels.iter().enumerate() {
        let logp = log_softmax(logits.sample(s));
        let w = weights[label];
        loss += -w * logp[label];
        let g = grad.sample_mut(s);
        for (c, lp) in logp.iter().enumerate() {
            let target = if c == label { 1.0 } else { 0.0 };
            g[c] = w * (lp.exp() - target) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros([1, 7, 1, 1]);
        let (loss, _) = weighted_ce_loss(&logits, &[3], &[1.0; 7]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
        assert!((loss - 1.94591).abs() < 1e-5);
    }

    #[test]
    fn weight_scales_sample_contribution() {
        let logits = Tensor::from_vec([1, 3, 1, 1], vec![0.2, -0.4, 1.0]).unwrap();
        let (a, _) = weighted_ce_loss(&logits, &[1], &[1.0, 1.0, 1.0]).unwrap();
        let (b, _) = weighted_ce_loss(&logits, &[1], &[1.0, 2.0, 1.0]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let vals = vec![
            0.3, -1.2, 0.8, 2.0, -0.5, 0.1, 0.0, 1.5, -2.2, 0.4, 0.9, -0.3,
        ];
        let logits = Tensor::from_vec([3, 4, 1, 1], vals.clone()).unwrap();
        let labels = [2, 0, 3];
        let weights = [0.5, 1.5, 2.0, 0.8];
        let (_, grad) = weighted_ce_loss(&logits, &labels, &weights).unwrap();
        let h = 1e-6;
        for i in 0..vals.len() {
            let mut plus = vals.clone();
            plus[i] += h;
            let mut minus = vals.clone();
            minus[i] -= h;
            let lp = weighted_ce_loss(
                &Tensor::from_vec([3, 4, 1, 1], plus).unwrap(),
                &labels,
                &weights,
            )
            .unwrap()
            .0;
            let lm = weighted_ce_loss(
                &Tensor::from_vec([3, 4, 1, 1], minus).unwrap(),
                &labels,
                &weights,
            )
            .unwrap()
            .0;
            let fd = (lp - lm) / (2.0 * h);
            let g = grad.data()[i];
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel < 1e-8, "entry {i}: fd {fd} vs analytic {g}");
        }
    }

    #[test]
    fn loss_is_non_negative() {
        let logits =
            Tensor::from_vec([2, 3, 1, 1], vec![100.0, -100.0, 0.0, 1e-3, 2e-3, 3e-3]).unwrap();
        let (loss, grad) = weighted_ce_loss(&logits, &[0, 2], &[1.0; 3]).unwrap();
        assert!(loss >= 0.0 && grad.all_finite());
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[90, 10]).unwrap();
        assert!((w[0] - 0.5556).abs() < 1e-4 && (w[1] - 5.0).abs() < 1e-12);
        assert_eq!(class_weights(&[4, 4, 4]).unwrap(), vec![1.0; 3]);
        assert_eq!(
            class_weights(&[9, 1]).unwrap(),
            class_weights(&[90, 10]).unwrap()
        );
        assert!(class_weights(&[3, 0]).is_err());
    }
}
