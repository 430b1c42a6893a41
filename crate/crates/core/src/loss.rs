//! Classification loss.

use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of logits [B, C] against integer labels,
/// stabilized through log-sum-exp.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::BadShape {
            op: "cross_entropy",
            detail: format!("expected [batch, classes], got {shape:?}"),
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::BadShape {
            op: "cross_entropy",
            detail: format!("{} labels for batch of {b}", labels.len()),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    let mut onehot = vec![T::zero(); b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = T::one();
    }
    let onehot = logits.graph_handle().constant(onehot, &[b, c])?;
    let picked = logits.log_softmax(1)?.mul(&onehot)?.sum_axis(1, false)?;
    Ok(picked.mean_all()?.neg())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Graph;

    #[test]
    fn uniform_logits_cost_ln2() {
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![0.7, 0.7, -1.0, -1.0], &[2, 2]).unwrap();
        let loss = cross_entropy(&logits, &[0, 1]).unwrap();
        assert!((loss.item() - 2f64.ln()).abs() <= 1e-15);
    }

    #[test]
    fn loss_vanishes_as_logit_gap_grows() {
        let g: Graph<f64> = Graph::new();
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 20.0, 60.0] {
            let logits = g.constant(vec![gap, 0.0], &[1, 2]).unwrap();
            let loss = cross_entropy(&logits, &[0]).unwrap().item();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev <= 1e-20);
    }

    #[test]
    fn matches_direct_log_prob_oracle() {
        let mut s = Stream::new(8);
        let (b, c) = (5, 4);
        let data: Vec<f64> = (0..b * c).map(|_| s.gaussian()).collect();
        let labels: Vec<usize> = (0..b).map(|_| s.below(c)).collect();
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(data.clone(), &[b, c]).unwrap();
        let got = cross_entropy(&logits, &labels).unwrap().item();

        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &data[i * c..(i + 1) * c];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[l].exp() / z).ln();
        }
        want /= b as f64;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let g: Graph<f64> = Graph::new();
        let logits = g.constant(vec![0.0; 4], &[2, 2]).unwrap();
        assert!(matches!(cross_entropy(&logits, &[0, 2]), Err(Error::Config(_))));
    }
}
