use datagen::io::{content_hash, decode_split, encode_split, load, manifest_hash, save};
use datagen::perturb::PERTURBATIONS;
use datagen::splits::SEED_STRIDE;
use datagen::{
    build_splits, hh_fraction, make_fake, make_fake_with, make_real, perturb, DataError, Family, LabeledImage,
    OracleDetector, PerturbationConfig, SplitKind,
};
use fatformer::dwt2d;
use numcore::Tensor;
use proptest::prelude::*;

const N: usize = 32;

fn grid(px: &[f64]) -> Tensor<f64> {
    let mut g = vec![0.0; px.len()];
    for c in 0..3 {
        for i in 0..N * N {
            g[i * 3 + c] = px[c * N * N + i];
        }
    }
    Tensor::new(&[N, N, 3], g).unwrap()
}

fn calibrated() -> OracleDetector {
    let reals: Vec<LabeledImage> = (0..200).map(make_real).collect();
    let fakes: Vec<LabeledImage> = (200..400).map(|s| make_fake(s, Family::GenA).unwrap()).collect();
    OracleDetector::calibrate(&reals, &fakes).unwrap()
}

#[test]
fn generation_is_deterministic_and_in_range() {
    for s in [0, 7, 123_456] {
        let a = make_real(s);
        assert_eq!(a, make_real(s));
        assert_eq!(make_fake(s, Family::GenB).unwrap(), make_fake(s, Family::GenB).unwrap());
        for img in [a, make_fake(s, Family::GenA).unwrap()] {
            assert!(img.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(img.pixels.shape(), &[3, 32, 32]);
        }
    }
}

#[test]
fn reals_are_band_limited() {
    let mean: f64 = (0..200)
        .map(|s| dwt2d(&grid(&make_real(s).to_f64())).unwrap().high_frequency_fraction())
        .sum::<f64>()
        / 200.0;
    assert!(mean < 0.05, "mean high-frequency fraction {mean}");
}

#[test]
fn gen_a_difference_is_mostly_diagonal() {
    let mut shares = Vec::new();
    for s in 0..200 {
        let real = make_real(s).to_f64();
        let fake = make_fake(s, Family::GenA).unwrap().to_f64();
        let diff: Vec<f64> = fake.iter().zip(&real).map(|(a, b)| a - b).collect();
        shares.push(dwt2d(&grid(&diff)).unwrap().hh_fraction());
    }
    let mean = shares.iter().sum::<f64>() / 200.0;
    assert!(mean > 0.6, "mean HH share {mean}");
}

#[test]
fn zero_amplitude_fake_is_the_real_image() {
    let det = calibrated();
    for s in 0..20 {
        for family in [Family::GenA, Family::GenB] {
            let f = make_fake_with(s, family, 0.0).unwrap();
            assert_eq!(f.pixels, make_real(s).pixels);
            assert_eq!(f.label, 1);
            assert_eq!(det.predict(&f), 0);
        }
    }
}

#[test]
fn families_share_the_base_field() {
    // the gen_B gains and the pattern are the only differences from gen_A
    let s = 31;
    let a = make_fake(s, Family::GenA).unwrap().to_f64();
    let b = make_fake(s, Family::GenB).unwrap().to_f64();
    let (la, lb) = (dwt2d(&grid(&a)).unwrap(), dwt2d(&grid(&b)).unwrap());
    // blue channel has unit gain, so its low band agrees up to clamping and f32 rounding
    let blue = |t: &Tensor<f64>| t.data().iter().skip(2).step_by(3).cloned().collect::<Vec<_>>();
    let (ba, bb) = (blue(&la.ll), blue(&lb.ll));
    let err = ba.iter().zip(&bb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
    assert!(make_fake(s, Family::Real).is_err());
    assert!(make_fake_with(s, Family::GenA, -0.1).is_err());
}

#[test]
fn oracle_examples() {
    let det = calibrated();
    for s in 1000..1050 {
        assert_eq!(det.predict(&make_real(s)), 0, "real {s}");
        assert_eq!(det.predict(&make_fake(s, Family::GenA).unwrap()), 1, "gen_A {s}");
    }
}

#[test]
fn oracle_separates_the_test_splits() {
    let data = build_splits(512, 64, 200, 0).unwrap();
    let reals: Vec<_> = data.train.reals().take(200).cloned().collect();
    let fakes: Vec<_> = data.train.fakes().take(200).cloned().collect();
    let det = OracleDetector::calibrate(&reals, &fakes).unwrap();
    let acc_in = det.accuracy(&data.test_in.images);
    let acc_cross = det.accuracy(&data.test_cross.images);
    assert!(acc_in >= 0.99, "{acc_in}");
    assert!(acc_cross >= 0.95, "{acc_cross}");
}

#[test]
fn strong_blur_defeats_the_oracle() {
    let det = calibrated();
    let data = build_splits(2, 2, 200, 5).unwrap();
    let cfg = PerturbationConfig {
        blur_sigma: (1.5, 1.5),
        ..PerturbationConfig::only("blur").unwrap()
    };
    let blurred: Vec<_> = data
        .test_in
        .images
        .iter()
        .enumerate()
        .map(|(i, x)| perturb(x, &cfg, i as u64))
        .collect();
    let clean = det.accuracy(&data.test_in.images);
    let hit = det.accuracy(&blurred);
    assert!(clean - hit > 0.05, "clean {clean}, blurred {hit}");
}

#[test]
fn perturbation_contracts() {
    let img = make_fake(3, Family::GenA).unwrap();
    assert_eq!(perturb(&img, &PerturbationConfig::none(), 9), img);
    let all = PerturbationConfig::default();
    let mut changed = 0;
    for seed in 0..20 {
        let a = perturb(&img, &all, seed);
        assert_eq!(a, perturb(&img, &all, seed));
        assert_eq!((a.label, a.family, a.seed), (img.label, img.family, img.seed));
        assert!(a.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        changed += usize::from(a != img);
    }
    assert!(changed > 10);
    for name in PERTURBATIONS {
        let cfg = PerturbationConfig::only(name).unwrap();
        assert_ne!(perturb(&img, &cfg, 1), img, "{name}");
    }
    assert!(PerturbationConfig::only("rotate").is_none());
}

#[test]
fn perturbations_fire_about_half_the_time() {
    let img = make_real(4);
    let cfg = PerturbationConfig {
        probability: 0.5,
        ..PerturbationConfig::only("noise").unwrap()
    };
    let fired = (0..400).filter(|&s| perturb(&img, &cfg, s) != img).count();
    assert!((150..250).contains(&fired), "{fired}");
}

#[test]
fn splits_are_balanced_and_disjoint() {
    let data = build_splits(512, 32, 40, 11).unwrap();
    assert_eq!(data.train.len(), 512);
    for s in data.splits() {
        assert_eq!(s.fakes().count() * 2, s.len());
        let fam = s.kind.fake_family();
        assert!(s.fakes().all(|x| x.family == fam));
        assert!(s.reals().all(|x| x.family == Family::Real));
        assert_eq!(s.seeds.end - s.seeds.start, s.len() as u64);
        assert!(s.images.iter().all(|x| s.seeds.contains(&x.seed)));
    }
    let ranges: Vec<_> = data.splits().iter().map(|s| s.seeds.clone()).collect();
    datagen::splits::check_disjoint(&ranges).unwrap();
    assert_eq!(data.test_cross.kind, SplitKind::TestCross);
    assert!(build_splits(4, 4, 4, u64::MAX - SEED_STRIDE).is_err());
    assert_eq!(data, build_splits(512, 32, 40, 11).unwrap());
}

#[test]
fn bundle_round_trips_through_disk() {
    let data = build_splits(8, 4, 4, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save(&data, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!(manifest_hash(&back), manifest_hash(&data));
    let text = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(text.contains("artifact_amplitude=0.06"));

    // a flipped pixel byte is caught by the manifest hash
    let path = dir.path().join("val.ftfd");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[100] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load(dir.path()), Err(DataError::Config(_))));
}

#[test]
fn damaged_split_files_report_offsets() {
    let imgs = vec![make_real(1), make_fake(2, Family::GenB).unwrap()];
    let bytes = encode_split(&imgs);
    assert_eq!(bytes.len(), 10 + 2 * (2 + 4 * 3072));
    assert_eq!(decode_split(&bytes, 1).unwrap()[1].pixels, imgs[1].pixels);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_split(&bad, 0),
        Err(DataError::Corrupt { offset: 0, .. })
    ));
    let cut = &bytes[..bytes.len() - 3];
    match decode_split(cut, 0) {
        Err(DataError::Corrupt { offset, .. }) => assert_eq!(offset, 10 + 2 + 4 * 3072 + 2),
        other => panic!("{other:?}"),
    }
    let mut wrong = bytes.clone();
    wrong[11] = 9;
    assert!(matches!(
        decode_split(&wrong, 0),
        Err(DataError::Corrupt { offset: 11, .. })
    ));
}

#[test]
fn content_hash_matches_git_blob_format() {
    // git's blob header, hashed with SHA-256 instead of SHA-1
    assert_eq!(
        content_hash(b"hello\n"),
        "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn any_perturbation_stays_in_range(seed in any::<u64>(), img_seed in 0u64..1000) {
        let img = make_fake(img_seed, Family::GenB).unwrap();
        let out = perturb(&img, &PerturbationConfig::default(), seed);
        prop_assert!(out.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(hh_fraction(&out).is_finite());
    }
}
