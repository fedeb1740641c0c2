//! Geographic block splitting and stratified plot selection.
//!
//! Plots live on a planar working frame in meters. The plane is cut into
//! 100 km x 100 km blocks and whole blocks are assigned to train, validation
//! or test, so plots that are spatially close never straddle splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelfuse::ClassId;
use crate::numerics::rng::{derive_seed, rng_from_seed};

pub const PLOT_EXTENT_M: f64 = 1280.0;
pub const BLOCK_SIZE_M: f64 = 100_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("cannot assign splits to an empty block set")]
    NoBlocks,
    #[error("class {class} needs {requested} plots but the pool has {available} (short by {shortfall})")]
    Insufficient {
        class: &'static str,
        requested: usize,
        available: usize,
        shortfall: usize,
    },
    #[error("non-finite plot coordinate ({x}, {y})")]
    Coordinate { x: f64, y: f64 },
    #[error("invalid split name {0:?}")]
    SplitName(String),
}

/// Center of a 1280 m plot in the working frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotLocation {
    pub x: f64,
    pub y: f64,
}

impl PlotLocation {
    pub fn new(x: f64, y: f64) -> Result<Self, SamplerError> {
        if x.is_finite() && y.is_finite() {
            Ok(Self { x, y })
        } else {
            Err(SamplerError::Coordinate { x, y })
        }
    }

    pub fn extent_m(&self) -> f64 {
        PLOT_EXTENT_M
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub bx: i64,
    pub by: i64,
}

/// Block containing a location; floors toward negative infinity, so
/// `x = -1 m` lies in block `-1`.
pub fn block_of(loc: PlotLocation) -> BlockId {
    BlockId {
        bx: (loc.x / BLOCK_SIZE_M).floor() as i64,
        by: (loc.y / BLOCK_SIZE_M).floor() as i64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = SamplerError;
    fn from_str(s: &str) -> Result<Self, SamplerError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SamplerError::SplitName(other.to_string())),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Train/val/test block counts for `n` blocks: `floor(0.8n)`, `floor(0.1n)`,
/// and the remainder.
pub fn split_quota(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    blocks: BTreeMap<BlockId, Split>,
}

impl SplitAssignment {
    pub fn get(&self, block: BlockId) -> Option<Split> {
        self.blocks.get(&block).copied()
    }

    pub fn split_of(&self, loc: PlotLocation) -> Option<Split> {
        self.get(block_of(loc))
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, Split)> + '_ {
        self.blocks.iter().map(|(b, s)| (*b, *s))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Number of blocks per split, in `Split::ALL` order.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.blocks.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bx", "by", "split"])?;
        for (b, s) in self.iter() {
            w.write_record([b.bx.to_string(), b.by.to_string(), s.as_str().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut blocks = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            let block = BlockId {
                bx: rec[0].parse()?,
                by: rec[1].parse()?,
            };
            blocks.insert(block, rec[2].parse()?);
        }
        Ok(Self { blocks })
    }
}

/// Seeded shuffle of the sorted blocks followed by an exact 8:1:1 quota fill.
/// The result does not depend on the iteration order of `blocks`.
pub fn assign_splits(blocks: impl IntoIterator<Item = BlockId>, seed: u64) -> Result<SplitAssignment, SamplerError> {
    let sorted: BTreeSet<BlockId> = blocks.into_iter().collect();
    if sorted.is_empty() {
        return Err(SamplerError::NoBlocks);
    }
    let mut order: Vec<BlockId> = sorted.into_iter().collect();
    order.shuffle(&mut rng_from_seed(seed));
    let (train, val, _) = split_quota(order.len());
    let blocks = order
        .into_iter()
        .enumerate()
        .map(|(i, b)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (b, s)
        })
        .collect();
    Ok(SplitAssignment { blocks })
}

/// A candidate plot: caller-chosen id plus its dominant class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: u64,
    pub dominant: ClassId,
}

/// Per class, a seeded uniform sample without replacement of exactly the
/// requested number of plots. Output is grouped by class in class order.
pub fn stratified_sample(
    pool: &[PoolEntry],
    targets: &BTreeMap<ClassId, usize>,
    seed: u64,
) -> Result<Vec<PoolEntry>, SamplerError> {
    let mut by_class: BTreeMap<ClassId, Vec<PoolEntry>> = BTreeMap::new();
    for e in pool {
        by_class.entry(e.dominant).or_default().push(*e);
    }
    let mut selected = Vec::new();
    for (&class, &want) in targets {
        if want == 0 {
            continue;
        }
        let candidates = by_class.get(&class).map_or(&[][..], Vec::as_slice);
        if candidates.len() < want {
            return Err(SamplerError::Insufficient {
                class: class.name(),
                requested: want,
                available: candidates.len(),
                shortfall: want - candidates.len(),
            });
        }
        let mut rng = rng_from_seed(derive_seed(seed, class.code() as u64));
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), want);
        selected.extend(picks.into_iter().map(|i| candidates[i]));
    }
    Ok(selected)
}

/// Per-class plot targets for `n` plots from `(class, fraction)` pairs,
/// rounding each share to the nearest plot.
pub fn targets_from_fractions(n: usize, fractions: &[(ClassId, f64)]) -> BTreeMap<ClassId, usize> {
    fractions
        .iter()
        .map(|&(c, f)| (c, (f * n as f64).round() as usize))
        .collect()
}

/// Dominant-class mix of the reference benchmark: 13% natural forest, 10%
/// planted forest, 7% tree crops, 17% other vegetation. The remaining 53% is
/// spread over the four non-vegetation classes (an assumption for
/// synthetic pools; the reference only reports the first four shares).
pub const REFERENCE_DOMINANT_MIX: [(ClassId, f64); 8] = [
    (ClassId::NaturalForest, 0.13),
    (ClassId::PlantedForest, 0.10),
    (ClassId::TreeCrops, 0.07),
    (ClassId::OtherVegetation, 0.17),
    (ClassId::Water, 0.14),
    (ClassId::Ice, 0.13),
    (ClassId::BareGround, 0.13),
    (ClassId::BuiltArea, 0.13),
];

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(x: f64, y: f64) -> PlotLocation {
        PlotLocation::new(x, y).unwrap()
    }

    #[test]
    fn block_floor_arithmetic() {
        assert_eq!(block_of(loc(0.0, 0.0)), BlockId { bx: 0, by: 0 });
        assert_eq!(block_of(loc(150_000.0, 99_999.0)), BlockId { bx: 1, by: 0 });
        assert_eq!(block_of(loc(-1.0, 0.0)), BlockId { bx: -1, by: 0 });
        assert!(PlotLocation::new(f64::NAN, 0.0).is_err());
    }

    fn grid_blocks(n: usize) -> Vec<BlockId> {
        (0..n as i64).map(|i| BlockId { bx: i % 37, by: i / 37 }).collect()
    }

    #[test]
    fn ten_blocks_split_eight_one_one() {
        let a = assign_splits(grid_blocks(10), 3).unwrap();
        assert_eq!(a.counts(), [8, 1, 1]);
        let a = assign_splits(grid_blocks(1000), 3).unwrap();
        assert_eq!(a.counts(), [800, 100, 100]);
    }

    #[test]
    fn assignment_ignores_input_order_and_repeats() {
        let blocks = grid_blocks(57);
        let mut rev = blocks.clone();
        rev.reverse();
        let a = assign_splits(blocks.clone(), 9).unwrap();
        assert_eq!(a, assign_splits(rev, 9).unwrap());
        assert_eq!(a, assign_splits(blocks.clone(), 9).unwrap());
        assert_ne!(a, assign_splits(blocks, 10).unwrap());
        assert_eq!(assign_splits(Vec::new(), 1), Err(SamplerError::NoBlocks));
    }

    #[test]
    fn quota_formula() {
        assert_eq!(split_quota(3), (2, 0, 1));
        assert_eq!(split_quota(19), (15, 1, 3));
    }

    #[test]
    fn stratified_sample_examples() {
        let pool: Vec<PoolEntry> = (0..20)
            .map(|id| PoolEntry {
                id,
                dominant: ClassId::NaturalForest,
            })
            .collect();
        let targets = BTreeMap::from([(ClassId::NaturalForest, 5)]);
        let a = stratified_sample(&pool, &targets, 4).unwrap();
        assert_eq!(a.len(), 5);
        let ids: BTreeSet<u64> = a.iter().map(|e| e.id).collect();
        assert_eq!(ids.len(), 5);
        assert_eq!(a, stratified_sample(&pool, &targets, 4).unwrap());

        let too_many = BTreeMap::from([(ClassId::NaturalForest, 25)]);
        assert_eq!(
            stratified_sample(&pool, &too_many, 4),
            Err(SamplerError::Insufficient {
                class: "natural_forest",
                requested: 25,
                available: 20,
                shortfall: 5
            })
        );
    }

    #[test]
    fn reference_mix_sums_to_one() {
        let total: f64 = REFERENCE_DOMINANT_MIX.iter().map(|(_, f)| f).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let t = targets_from_fractions(100, &REFERENCE_DOMINANT_MIX);
        assert_eq!(t.values().sum::<usize>(), 100);
        assert_eq!(t[&ClassId::TreeCrops], 7);
    }

    #[test]
    fn split_csv_round_trip() {
        let a = assign_splits(grid_blocks(12), 1).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(SplitAssignment::read_csv(&buf[..]).unwrap(), a);
    }
}
