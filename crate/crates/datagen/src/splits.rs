use std::ops::Range;

use crate::synth::{make_fake_with, make_real, Family, LabeledImage, DEFAULT_AMPLITUDE};
use crate::{DataError, Result};

/// Seeds reserved per split; the four splits occupy consecutive blocks.
pub const SEED_STRIDE: u64 = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitKind {
    Train,
    Val,
    TestIn,
    TestCross,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [
        SplitKind::Train,
        SplitKind::Val,
        SplitKind::TestIn,
        SplitKind::TestCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::TestIn => "test_in",
            SplitKind::TestCross => "test_cross",
        }
    }

    /// Accepts the file names as well as the short forms `in` and `cross`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "in" | "test_in" => Ok(SplitKind::TestIn),
            "cross" | "test_cross" => Ok(SplitKind::TestCross),
            _ => Err(DataError::Parameter(format!("unknown split {s:?}"))),
        }
    }

    pub fn fake_family(self) -> Family {
        match self {
            SplitKind::TestCross => Family::GenB,
            _ => Family::GenA,
        }
    }

    fn index(self) -> u64 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::TestIn => 2,
            SplitKind::TestCross => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub kind: SplitKind,
    pub seeds: Range<u64>,
    /// Reals first, then fakes.
    pub images: Vec<LabeledImage>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.images.iter().map(|x| x.label).collect()
    }

    pub fn reals(&self) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(|x| x.label == 0)
    }

    pub fn fakes(&self) -> impl Iterator<Item = &LabeledImage> {
        self.images.iter().filter(|x| x.label == 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub base_seed: u64,
    pub amplitude: f64,
    pub train: Split,
    pub val: Split,
    pub test_in: Split,
    pub test_cross: Split,
}

impl DatasetBundle {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::TestIn => &self.test_in,
            SplitKind::TestCross => &self.test_cross,
        }
    }

    pub fn splits(&self) -> [&Split; 4] {
        [&self.train, &self.val, &self.test_in, &self.test_cross]
    }
}

/// Fails when any two seed ranges intersect.
pub fn check_disjoint(ranges: &[Range<u64>]) -> Result<()> {
    for (i, a) in ranges.iter().enumerate() {
        for b in &ranges[i + 1..] {
            if a.start < b.end && b.start < a.end && !a.is_empty() && !b.is_empty() {
                return Err(DataError::Config(format!("seed ranges {a:?} and {b:?} overlap")));
            }
        }
    }
    Ok(())
}

fn split_seeds(kind: SplitKind, n: usize, base_seed: u64) -> Result<Range<u64>> {
    let start = kind
        .index()
        .checked_mul(SEED_STRIDE)
        .and_then(|o| base_seed.checked_add(o))
        .ok_or_else(|| DataError::Config(format!("base seed {base_seed} leaves no room for the splits")))?;
    let end = start
        .checked_add(n as u64)
        .ok_or_else(|| DataError::Config("seed range overflows".into()))?;
    Ok(start..end)
}

/// Generates the balanced split over `seeds`: the first half are reals, the
/// second half fakes of the split's family.
pub fn generate_split(kind: SplitKind, seeds: Range<u64>, amplitude: f64) -> Result<Split> {
    let n = seeds.end - seeds.start;
    let mid = seeds.start + n / 2;
    let mut images: Vec<LabeledImage> = (seeds.start..mid).map(make_real).collect();
    for s in mid..seeds.end {
        images.push(make_fake_with(s, kind.fake_family(), amplitude)?);
    }
    Ok(Split { kind, seeds, images })
}

pub fn build_splits(n_train: usize, n_val: usize, n_test: usize, base_seed: u64) -> Result<DatasetBundle> {
    build_splits_with(n_train, n_val, n_test, base_seed, DEFAULT_AMPLITUDE)
}

/// Train and val hold reals and gen_A fakes, test_in holds unseen gen_A seeds
/// and test_cross swaps in the unseen gen_B family. Counts must be even.
pub fn build_splits_with(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
    amplitude: f64,
) -> Result<DatasetBundle> {
    let counts = [n_train, n_val, n_test, n_test];
    for (kind, &n) in SplitKind::ALL.iter().zip(&counts) {
        if n == 0 || n % 2 != 0 {
            return Err(DataError::Config(format!(
                "split {} needs a positive even count, got {n}",
                kind.name()
            )));
        }
        if n as u64 > SEED_STRIDE {
            return Err(DataError::Config(format!(
                "split {} is larger than {SEED_STRIDE}",
                kind.name()
            )));
        }
    }
    let ranges = SplitKind::ALL
        .iter()
        .zip(&counts)
        .map(|(&k, &n)| split_seeds(k, n, base_seed))
        .collect::<Result<Vec<_>>>()?;
    check_disjoint(&ranges)?;
    let mut splits = SplitKind::ALL
        .iter()
        .zip(ranges)
        .map(|(&k, r)| generate_split(k, r, amplitude))
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let mut next = || splits.next().expect("four splits");
    Ok(DatasetBundle {
        base_seed,
        amplitude,
        train: next(),
        val: next(),
        test_in: next(),
        test_cross: next(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_ranges_are_rejected() {
        assert!(check_disjoint(&[0..10, 10..20, 30..31]).is_ok());
        assert!(matches!(check_disjoint(&[0..10, 9..20]), Err(DataError::Config(_))));
    }

    #[test]
    fn odd_or_zero_counts_are_rejected() {
        assert!(build_splits(3, 2, 2, 0).is_err());
        assert!(build_splits(2, 0, 2, 0).is_err());
    }

    #[test]
    fn split_names_parse() {
        for k in SplitKind::ALL {
            assert_eq!(SplitKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(SplitKind::parse("in").unwrap(), SplitKind::TestIn);
        assert_eq!(SplitKind::parse("cross").unwrap(), SplitKind::TestCross);
        assert!(SplitKind::parse("test").is_err());
    }
}
