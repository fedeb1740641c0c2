//! Per-pixel reference-label construction from aligned evidence rasters.
//!
//! Each pixel runs through three stages in order; the first stage that
//! decides a class wins and later stages only see undecided pixels:
//!
//! 1. forest consensus over the natural / planted / tree-crop layers
//!    (exactly one layer claims the pixel, or two or more disagree and the
//!    pixel becomes [`ClassId::Unknown`]);
//! 2. non-forest classes, permitted only below the 5 m tree-height gate,
//!    with other vegetation requiring both land-cover sources to agree;
//! 3. regrowth: deforested pixels with a confident regrowth driver become
//!    planted forest.
//!
//! Pixels still undecided after the last stage are `Unknown`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tree height (meters) at or above which no non-forest class is assigned.
pub const TREE_HEIGHT_GATE_M: f32 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("raster {name} has {got} pixels, expected {expected} ({height}x{width})")]
    Extent {
        name: &'static str,
        got: usize,
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("tree height must be finite and non-negative, found {value} at pixel {index}")]
    TreeHeight { value: f32, index: usize },
    #[error("invalid class code {0}")]
    Code(u8),
    #[error("statistics need at least one label raster")]
    Empty,
}

/// Per-pixel class label, stored as an 8-bit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
#[repr(u8)]
pub enum ClassId {
    NaturalForest = 0,
    PlantedForest = 1,
    TreeCrops = 2,
    OtherVegetation = 3,
    Water = 4,
    Ice = 5,
    BareGround = 6,
    BuiltArea = 7,
    Unknown = 255,
}

/// Number of real (non-`Unknown`) classes.
pub const NUM_CLASSES: usize = 8;

impl ClassId {
    pub const REAL: [ClassId; NUM_CLASSES] = [
        ClassId::NaturalForest,
        ClassId::PlantedForest,
        ClassId::TreeCrops,
        ClassId::OtherVegetation,
        ClassId::Water,
        ClassId::Ice,
        ClassId::BareGround,
        ClassId::BuiltArea,
    ];

    pub const FOREST: [ClassId; 3] = [ClassId::NaturalForest, ClassId::PlantedForest, ClassId::TreeCrops];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, LabelError> {
        match code {
            0..=7 => Ok(Self::REAL[code as usize]),
            255 => Ok(Self::Unknown),
            c => Err(LabelError::Code(c)),
        }
    }

    /// Position among the real classes; `None` for `Unknown`.
    pub fn index(self) -> Option<usize> {
        match self {
            ClassId::Unknown => None,
            c => Some(c as usize),
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::REAL.get(index).copied()
    }

    pub fn is_forest(self) -> bool {
        matches!(self, ClassId::NaturalForest | ClassId::PlantedForest | ClassId::TreeCrops)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::NaturalForest => "natural_forest",
            ClassId::PlantedForest => "planted_forest",
            ClassId::TreeCrops => "tree_crops",
            ClassId::OtherVegetation => "other_vegetation",
            ClassId::Water => "water",
            ClassId::Ice => "ice",
            ClassId::BareGround => "bare_ground",
            ClassId::BuiltArea => "built_area",
            ClassId::Unknown => "unknown",
        }
    }
}

impl From<ClassId> for u8 {
    fn from(c: ClassId) -> u8 {
        c.code()
    }
}

impl TryFrom<u8> for ClassId {
    type Error = LabelError;
    fn try_from(code: u8) -> Result<Self, LabelError> {
        Self::from_code(code)
    }
}

/// Land-cover source class, already collapsed to the groups the rules need.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum WorldCover {
    /// Shrubland, grassland or cropland.
    Vegetation = 0,
    Water = 1,
    Ice = 2,
    Bare = 3,
    Built = 4,
    Other = 5,
}

impl WorldCover {
    pub const ALL: [WorldCover; 6] = [
        WorldCover::Vegetation,
        WorldCover::Water,
        WorldCover::Ice,
        WorldCover::Bare,
        WorldCover::Built,
        WorldCover::Other,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

/// Forest consensus: one claiming layer decides, disagreement is `Unknown`,
/// no claim leaves the pixel undecided (`None`).
pub fn fuse_forest(natural: bool, planted: bool, treecrop: bool) -> Option<ClassId> {
    match (natural, planted, treecrop) {
        (false, false, false) => None,
        (true, false, false) => Some(ClassId::NaturalForest),
        (false, true, false) => Some(ClassId::PlantedForest),
        (false, false, true) => Some(ClassId::TreeCrops),
        _ => Some(ClassId::Unknown),
    }
}

/// Non-forest assignment for a pixel the forest stage left undecided.
pub fn fuse_nonforest(worldcover: WorldCover, sbtn_vegetation: bool, tree_height: f32) -> Option<ClassId> {
    if !(tree_height < TREE_HEIGHT_GATE_M) {
        return None;
    }
    match worldcover {
        WorldCover::Vegetation if sbtn_vegetation => Some(ClassId::OtherVegetation),
        WorldCover::Vegetation | WorldCover::Other => None,
        WorldCover::Water => Some(ClassId::Water),
        WorldCover::Ice => Some(ClassId::Ice),
        WorldCover::Bare => Some(ClassId::BareGround),
        WorldCover::Built => Some(ClassId::BuiltArea),
    }
}

/// Last-resort planted-forest label for deforested pixels with a confident
/// regrowth driver. Decided pixels pass through unchanged.
pub fn apply_regrowth(current: Option<ClassId>, deforested: bool, regrowth_confident: bool) -> Option<ClassId> {
    match current {
        None if deforested && regrowth_confident => Some(ClassId::PlantedForest),
        other => other,
    }
}

/// Evidence for one pixel, as read from a [`SourceStack`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelEvidence {
    pub natural: bool,
    pub planted: bool,
    pub treecrop: bool,
    pub worldcover: WorldCover,
    pub sbtn_vegetation: bool,
    pub tree_height: f32,
    pub deforested: bool,
    pub regrowth_confident: bool,
}

pub fn fuse_pixel(e: &PixelEvidence) -> ClassId {
    let decided = fuse_forest(e.natural, e.planted, e.treecrop)
        .or_else(|| fuse_nonforest(e.worldcover, e.sbtn_vegetation, e.tree_height));
    apply_regrowth(decided, e.deforested, e.regrowth_confident).unwrap_or(ClassId::Unknown)
}

/// Aligned, pre-binarized evidence rasters (row-major, `height * width`).
#[derive(Clone, Debug, PartialEq)]
pub struct SourceStack {
    pub height: usize,
    pub width: usize,
    pub natural: Vec<bool>,
    pub planted: Vec<bool>,
    pub treecrop: Vec<bool>,
    pub worldcover: Vec<WorldCover>,
    pub sbtn_vegetation: Vec<bool>,
    pub tree_height: Vec<f32>,
    pub deforested: Vec<bool>,
    pub regrowth_confident: Vec<bool>,
}

impl SourceStack {
    /// Stack with no evidence anywhere: every pixel fuses to `Unknown`.
    pub fn empty(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            natural: vec![false; n],
            planted: vec![false; n],
            treecrop: vec![false; n],
            worldcover: vec![WorldCover::Other; n],
            sbtn_vegetation: vec![false; n],
            tree_height: vec![0.0; n],
            deforested: vec![false; n],
            regrowth_confident: vec![false; n],
        }
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[PixelEvidence]) -> Result<Self, LabelError> {
        let mut s = Self::empty(height, width);
        if pixels.len() != height * width {
            return Err(LabelError::Extent {
                name: "pixels",
                got: pixels.len(),
                expected: height * width,
                height,
                width,
            });
        }
        for (i, p) in pixels.iter().enumerate() {
            s.natural[i] = p.natural;
            s.planted[i] = p.planted;
            s.treecrop[i] = p.treecrop;
            s.worldcover[i] = p.worldcover;
            s.sbtn_vegetation[i] = p.sbtn_vegetation;
            s.tree_height[i] = p.tree_height;
            s.deforested[i] = p.deforested;
            s.regrowth_confident[i] = p.regrowth_confident;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), LabelError> {
        let expected = self.len();
        let lens = [
            ("natural", self.natural.len()),
            ("planted", self.planted.len()),
            ("treecrop", self.treecrop.len()),
            ("worldcover", self.worldcover.len()),
            ("sbtn_vegetation", self.sbtn_vegetation.len()),
            ("tree_height", self.tree_height.len()),
            ("deforested", self.deforested.len()),
            ("regrowth_confident", self.regrowth_confident.len()),
        ];
        for (name, got) in lens {
            if got != expected {
                return Err(LabelError::Extent {
                    name,
                    got,
                    expected,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        if let Some((index, &value)) = self
            .tree_height
            .iter()
            .enumerate()
            .find(|(_, h)| !(h.is_finite() && **h >= 0.0))
        {
            return Err(LabelError::TreeHeight { value, index });
        }
        Ok(())
    }

    pub fn pixel(&self, i: usize) -> PixelEvidence {
        PixelEvidence {
            natural: self.natural[i],
            planted: self.planted[i],
            treecrop: self.treecrop[i],
            worldcover: self.worldcover[i],
            sbtn_vegetation: self.sbtn_vegetation[i],
            tree_height: self.tree_height[i],
            deforested: self.deforested[i],
            regrowth_confident: self.regrowth_confident[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<ClassId>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, labels: Vec<ClassId>) -> Result<Self, LabelError> {
        if labels.len() != height * width {
            return Err(LabelError::Extent {
                name: "labels",
                got: labels.len(),
                expected: height * width,
                height,
                width,
            });
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, class: ClassId) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> ClassId {
        self.labels[row * self.width + col]
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|c| c.code()).collect()
    }

    pub fn from_codes(height: usize, width: usize, codes: &[u8]) -> Result<Self, LabelError> {
        let labels = codes.iter().map(|&c| ClassId::from_code(c)).collect::<Result<_, _>>()?;
        Self::new(height, width, labels)
    }
}

/// Runs the full per-pixel pipeline over a stack.
pub fn fuse_stack(stack: &SourceStack) -> Result<LabelRaster, LabelError> {
    stack.validate()?;
    let labels = (0..stack.len()).map(|i| fuse_pixel(&stack.pixel(i))).collect();
    LabelRaster::new(stack.height, stack.width, labels)
}

/// Per-image summary inside a [`StatsReport`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageStats {
    pub distinct_classes: usize,
    pub dominant: ClassId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub images: usize,
    /// Pixel count per real class, indexed like [`ClassId::REAL`].
    pub pixel_counts: [u64; NUM_CLASSES],
    pub unknown_pixels: u64,
    /// `distinct_class_histogram[n]` = images with exactly `n` distinct real classes.
    pub distinct_class_histogram: [u64; NUM_CLASSES + 1],
    /// Images whose plurality class is each real class.
    pub dominant_counts: [u64; NUM_CLASSES],
    /// Images with no real-class pixel at all.
    pub dominant_unknown: u64,
    pub per_image: Vec<ImageStats>,
}

impl StatsReport {
    pub fn dominant_fraction(&self, class: ClassId) -> f64 {
        match class.index() {
            Some(i) => self.dominant_counts[i] as f64 / self.images as f64,
            None => self.dominant_unknown as f64 / self.images as f64,
        }
    }

    /// One row per class: name, pixels, pixel fraction, dominant images.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class", "code", "pixels", "pixel_fraction", "dominant_images", "dominant_fraction"])?;
        let total: u64 = self.pixel_counts.iter().sum::<u64>() + self.unknown_pixels;
        let classes = ClassId::REAL.iter().copied().chain([ClassId::Unknown]);
        for c in classes {
            let (pixels, dom) = match c.index() {
                Some(i) => (self.pixel_counts[i], self.dominant_counts[i]),
                None => (self.unknown_pixels, self.dominant_unknown),
            };
            w.write_record([
                c.name().to_string(),
                c.code().to_string(),
                pixels.to_string(),
                format!("{:.6}", pixels as f64 / total.max(1) as f64),
                dom.to_string(),
                format!("{:.6}", dom as f64 / self.images.max(1) as f64),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Plurality real class of one raster; ties go to the lowest class index and
/// a raster without real-class pixels reports `Unknown`.
pub fn dominant_class(counts: &[u64; NUM_CLASSES]) -> ClassId {
    let mut best: Option<(usize, u64)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c > 0 && best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map_or(ClassId::Unknown, |(i, _)| ClassId::REAL[i])
}

pub fn class_counts(raster: &LabelRaster) -> ([u64; NUM_CLASSES], u64) {
    let mut counts = [0u64; NUM_CLASSES];
    let mut unknown = 0;
    for c in &raster.labels {
        match c.index() {
            Some(i) => counts[i] += 1,
            None => unknown += 1,
        }
    }
    (counts, unknown)
}

/// Pixel histogram, distinct-class histogram and dominant-class tallies.
pub fn dataset_stats(labels: &[LabelRaster]) -> Result<StatsReport, LabelError> {
    if labels.is_empty() {
        return Err(LabelError::Empty);
    }
    let mut report = StatsReport {
        images: labels.len(),
        pixel_counts: [0; NUM_CLASSES],
        unknown_pixels: 0,
        distinct_class_histogram: [0; NUM_CLASSES + 1],
        dominant_counts: [0; NUM_CLASSES],
        dominant_unknown: 0,
        per_image: Vec::with_capacity(labels.len()),
    };
    for raster in labels {
        let (counts, unknown) = class_counts(raster);
        for (total, c) in report.pixel_counts.iter_mut().zip(counts) {
            *total += c;
        }
        report.unknown_pixels += unknown;
        let distinct = counts.iter().filter(|&&c| c > 0).count();
        report.distinct_class_histogram[distinct] += 1;
        let dominant = dominant_class(&counts);
        match dominant.index() {
            Some(i) => report.dominant_counts[i] += 1,
            None => report.dominant_unknown += 1,
        }
        report.per_image.push(ImageStats {
            distinct_classes: distinct,
            dominant,
        });
    }
    Ok(report)
}
