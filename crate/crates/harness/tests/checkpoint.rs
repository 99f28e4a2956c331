mod common;

use common::{quick_config, tiny_data};
use datagen::io::manifest_hash;
use harness::checkpoint::MAGIC;
use harness::{evaluate_splits, initial_checkpoint, train, Checkpoint, HarnessError};

fn trained() -> (Checkpoint, datagen::DatasetBundle) {
    let data = tiny_data();
    (train(&quick_config(1), &data).unwrap().checkpoint, data)
}

fn offset_of(e: HarnessError) -> u64 {
    match e {
        HarnessError::Checkpoint { offset, .. } => offset,
        other => panic!("expected a corruption error, got {other}"),
    }
}

#[test]
fn round_trip_is_bitwise() {
    let (ck, _) = trained();
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    for ((_, name, a), (_, _, b)) in ck.store.iter().zip(back.store.iter()) {
        let bits = |t: &numcore::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{name}");
        assert_eq!(a.requires_grad, b.requires_grad, "{name}");
    }
    assert_eq!(back.adam, ck.adam);
    assert_eq!(back.epoch, ck.epoch);
    assert_eq!(back.config, ck.config);
    assert_eq!(back.loss_curve, ck.loss_curve);
    assert_eq!(back.to_bytes(), bytes);
}

#[test]
fn save_and_load_preserve_evaluation() {
    let (ck, data) = trained();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ftfc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let hash = manifest_hash(&data);
    let splits = [&data.test_in, &data.test_cross, &data.val];
    assert_eq!(
        evaluate_splits(&ck, &splits, &hash).unwrap(),
        evaluate_splits(&back, &splits, &hash).unwrap()
    );
}

#[test]
fn frozen_prompts_stay_frozen_after_loading() {
    let mut cfg = quick_config(0);
    cfg.prompt_mode = fatformer::PromptMode::Fixed;
    let ck = initial_checkpoint(&cfg).unwrap();
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let frozen = |c: &Checkpoint| c.store.iter().filter(|(_, _, t)| !t.requires_grad).count();
    assert!(frozen(&ck) > 0);
    assert_eq!(frozen(&back), frozen(&ck));
}

#[test]
fn header_layout() {
    let ck = initial_checkpoint(&quick_config(0)).unwrap();
    let b = ck.to_bytes();
    assert_eq!(&b[..4], MAGIC);
    assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
    let count = u32::from_le_bytes(b[6..10].try_into().unwrap()) as usize;
    assert_eq!(count, 3 * ck.store.len() + 5);
    let name_len = u16::from_le_bytes([b[10], b[11]]) as usize;
    assert_eq!(
        std::str::from_utf8(&b[12..12 + name_len]).unwrap(),
        ck.store.iter().next().unwrap().1
    );
    let body = &b[..b.len() - 4];
    assert_eq!(crc32fast::hash(body).to_le_bytes(), b[b.len() - 4..]);
}

#[test]
fn truncation_is_reported_with_an_offset() {
    let ck = initial_checkpoint(&quick_config(0)).unwrap();
    let b = ck.to_bytes();
    for cut in [0, 3, 9, 200, b.len() / 2, b.len() - 1] {
        let err = Checkpoint::from_bytes(&b[..cut]).unwrap_err();
        assert!(offset_of(err) <= cut as u64);
    }
}

#[test]
fn corruption_is_detected() {
    let ck = initial_checkpoint(&quick_config(0)).unwrap();
    let b = ck.to_bytes();

    let mut bad = b.clone();
    bad[0] = b'X';
    assert_eq!(offset_of(Checkpoint::from_bytes(&bad).unwrap_err()), 0);

    let mut bad = b.clone();
    bad[4] = 9;
    assert_eq!(offset_of(Checkpoint::from_bytes(&bad).unwrap_err()), 4);

    // a flipped data bit leaves the structure intact and fails the checksum
    let mut bad = b.clone();
    let at = b.len() - 100;
    bad[at] ^= 0x10;
    assert_eq!(
        offset_of(Checkpoint::from_bytes(&bad).unwrap_err()),
        (b.len() - 4) as u64
    );

    let mut long = b.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());
}

#[test]
fn tensors_must_match_the_stored_config() {
    let mut other = quick_config(0);
    other.adapters = 2;
    // tensors of a three-stage model under a two-stage config
    let mut mixed = initial_checkpoint(&other).unwrap();
    mixed.config = quick_config(0);
    assert!(Checkpoint::from_bytes(&mixed.to_bytes()).is_err());
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Checkpoint::load(&dir.path().join("absent")).unwrap_err();
    assert!(matches!(err, HarnessError::Io(_)));
    assert_eq!(err.exit_code(), 1);
}
