use crate::{HarnessError, Result};

/// Predicted label from `P̂(fake)`: fake only when it strictly beats `P̂(real)`,
/// so ties go to real.
pub fn predict(p_fake: f64) -> u8 {
    u8::from(p_fake > 1.0 - p_fake)
}

pub fn accuracy(p_fake: &[f64], labels: &[u8]) -> Result<f64> {
    if p_fake.len() != labels.len() || labels.is_empty() {
        return Err(HarnessError::Metric(format!(
            "{} scores for {} labels",
            p_fake.len(),
            labels.len()
        )));
    }
    let hits = p_fake.iter().zip(labels).filter(|(&p, &y)| predict(p) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Rank-based average precision of `scores` for the positive class: the mean,
/// over positives, of the precision at each positive's rank. Samples are
/// ranked by descending score; equal scores keep their index order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(HarnessError::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(HarnessError::Metric("average precision needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_real() {
        assert_eq!(predict(0.5), 0);
        assert_eq!(predict(0.500001), 1);
    }

    #[test]
    fn hand_enumerated_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn tied_scores_rank_by_index() {
        // the negative at index 0 outranks the tied positive at index 1
        let ap = average_precision(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(ap, 1.0);
    }
}
