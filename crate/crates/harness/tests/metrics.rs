use harness::metrics::{accuracy, average_precision, predict};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Precision at each positive rank, by explicit enumeration of every cutoff.
fn ap_by_cutoffs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut sum = 0.0;
    for k in 1..=idx.len() {
        if labels[idx[k - 1]] == 1 {
            let tp = idx[..k].iter().filter(|&&i| labels[i] == 1).count() as f64;
            sum += tp / k as f64;
        }
    }
    sum / pos
}

#[test]
fn hand_enumerated_average_precision() {
    let ap = average_precision(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
}

#[test]
fn perfect_and_inverted_scores() {
    let scores = [0.9, 0.8, 0.2, 0.1];
    let labels = [1, 1, 0, 0];
    assert_eq!(accuracy(&scores, &labels).unwrap(), 1.0);
    assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    assert_eq!(accuracy(&scores, &[0, 0, 1, 1]).unwrap(), 0.0);
}

#[test]
fn ties_go_to_real() {
    assert_eq!(predict(0.5), 0);
    assert_eq!(predict(0.5 + 1e-12), 1);
}

#[test]
fn equal_scores_keep_index_order() {
    assert_eq!(average_precision(&[0.5, 0.5], &[1, 0]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
}

#[test]
fn single_class_has_no_average_precision() {
    assert!(average_precision(&[0.1, 0.7], &[1, 1]).is_err());
    assert!(average_precision(&[0.1, 0.7], &[0, 0]).is_err());
    assert_eq!(accuracy(&[0.1, 0.7], &[0, 0]).unwrap(), 0.5);
}

#[test]
fn random_scores_give_chance_average_precision() {
    let labels: Vec<u8> = (0..400).map(|i| (i % 2) as u8).collect();
    let aps: Vec<f64> = (0..20)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = labels.iter().map(|_| rng.gen()).collect();
            average_precision(&scores, &labels).unwrap()
        })
        .collect();
    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "{aps:?}");
}

proptest! {
    #[test]
    fn average_precision_matches_cutoff_enumeration(
        pairs in prop::collection::vec((0u8..5, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0) / 4.0).collect();
        let mut labels: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((ap - ap_by_cutoffs(&scores, &labels)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ap));
    }
}
