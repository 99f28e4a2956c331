mod common;

use common::{quick_config, tiny_data};
use datagen::io::manifest_hash;
use datagen::PerturbationConfig;
use harness::robust::settings;
use harness::{evaluate_splits, robustness_eval, train};

#[test]
fn nothing_enabled_equals_plain_evaluation() {
    let data = tiny_data();
    let ck = train(&quick_config(1), &data).unwrap().checkpoint;
    let r = robustness_eval(&ck, &data, &PerturbationConfig::none()).unwrap();
    assert_eq!(r.rows.len(), 1);
    let plain = evaluate_splits(&ck, &[&data.test_in, &data.test_cross], &manifest_hash(&data)).unwrap();
    assert_eq!(r.rows[0].report, plain);
}

#[test]
fn default_protocol_has_four_singles_and_the_combination() {
    let names: Vec<String> = settings(&PerturbationConfig::default())
        .into_iter()
        .map(|s| s.0)
        .collect();
    assert_eq!(names, ["clean", "crop", "blur", "jpeg", "noise", "combined"]);
    let s = settings(&PerturbationConfig::default());
    assert!(s[1..5].iter().all(|(_, c)| c.probability == 1.0));
    assert_eq!(s[5].1.probability, 0.5);
}

#[test]
fn reports_are_deterministic_and_bounded() {
    let data = tiny_data();
    let ck = train(&quick_config(1), &data).unwrap().checkpoint;
    let a = robustness_eval(&ck, &data, &PerturbationConfig::default()).unwrap();
    let b = robustness_eval(&ck, &data, &PerturbationConfig::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.rows.len(), 6);
    for row in &a.rows {
        for s in &row.report.splits {
            assert!((0.0..=1.0).contains(&s.acc), "{}", row.perturbation);
        }
    }
}
