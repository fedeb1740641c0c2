//! Deterministic synthetic multi-modal plots.
//!
//! Every plot starts from a latent landscape: a few smoothed random fields
//! whose per-pixel argmax partitions the label grid into class regions. Each
//! scenario then imprints class signatures into the modalities and adds
//! seeded noise. Optical and radar series are always synthesized at monthly
//! cadence, stored at 32-bit precision and averaged down to the requested
//! cadence, so an annual or seasonal series is exactly the bin-mean of the
//! monthly one.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelfuse::{ClassId, LabelRaster};
use crate::numerics::rng::{derive_seed, rng_from_seed, standard_normal, SeededRng};
use crate::sampler::{self, block_of, PlotLocation, Split, SplitAssignment, BLOCK_SIZE_M, PLOT_EXTENT_M};

pub const S2: &str = "s2";
pub const S1: &str = "s1";
pub const CLIMATE: &str = "climate";
pub const ELEVATION: &str = "elevation";

pub const MONTHS_PER_YEAR: usize = 12;
pub const MAX_YEARS: u32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum DatagenError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown scenario {0:?}")]
    Scenario(String),
    #[error("modality {name}: {reason}")]
    Modality { name: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cadence {
    Annual,
    Seasonal,
    Monthly,
}

impl Cadence {
    pub const ALL: [Cadence; 3] = [Cadence::Annual, Cadence::Seasonal, Cadence::Monthly];

    pub fn steps_per_year(self) -> usize {
        match self {
            Cadence::Annual => 1,
            Cadence::Seasonal => 4,
            Cadence::Monthly => 12,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Cadence::Annual => "annual",
            Cadence::Seasonal => "seasonal",
            Cadence::Monthly => "monthly",
        }
    }
}

impl std::str::FromStr for Cadence {
    type Err = DatagenError;
    fn from_str(s: &str) -> Result<Self, DatagenError> {
        match s {
            "annual" => Ok(Cadence::Annual),
            "seasonal" => Ok(Cadence::Seasonal),
            "monthly" => Ok(Cadence::Monthly),
            other => Err(DatagenError::Config(format!("unknown cadence {other:?}"))),
        }
    }
}

impl std::fmt::Display for Cadence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Shape and time axis of one input modality. `cadence` is `None` for
/// static layers (one timestep).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub cadence: Option<Cadence>,
    pub years: u32,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spatial: bool,
}

impl ModalitySpec {
    pub fn timesteps(&self) -> usize {
        match self.cadence {
            Some(c) => c.steps_per_year() * self.years as usize,
            None => 1,
        }
    }

    /// `[T, H, W, C]`
    pub fn shape(&self) -> [usize; 4] {
        [self.timesteps(), self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |reason: &str| DatagenError::Modality {
            name: self.name.clone(),
            reason: reason.to_string(),
        };
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(bad("extents must be positive"));
        }
        if !self.spatial && (self.height != 1 || self.width != 1) {
            return Err(bad("non-spatial modalities must have a 1x1 grid"));
        }
        if self.cadence.is_some() && !(1..=MAX_YEARS).contains(&self.years) {
            return Err(bad("years must be 1..=3"));
        }
        Ok(())
    }

    /// Same modality at another cadence / year count (static layers unchanged).
    pub fn with_time(&self, cadence: Cadence, years: u32) -> Self {
        let mut s = self.clone();
        if s.cadence.is_some() {
            s.years = years;
            if s.name != CLIMATE {
                s.cadence = Some(cadence);
            }
        }
        s
    }
}

fn check_time(cadence: Cadence, years: u32) -> Result<(), DatagenError> {
    let _ = cadence;
    if !(1..=MAX_YEARS).contains(&years) {
        return Err(DatagenError::Config(format!("years must be 1..=3, got {years}")));
    }
    Ok(())
}

/// Reference modality set for a 1280 m plot: optical at 10 m (128 x 128,
/// 10 bands), radar (VV/VH, ascending and descending), monthly climate as a
/// single non-spatial token, and a static 3-channel elevation layer at half
/// the optical resolution.
pub fn default_modality_set(cadence: Cadence, years: u32) -> Result<Vec<ModalitySpec>, DatagenError> {
    scaled_modality_set(cadence, years, 128)
}

/// [`default_modality_set`] with the optical grid shrunk to `grid x grid`
/// (elevation stays at half resolution).
pub fn scaled_modality_set(cadence: Cadence, years: u32, grid: usize) -> Result<Vec<ModalitySpec>, DatagenError> {
    check_time(cadence, years)?;
    if grid < 2 || !grid.is_multiple_of(2) {
        return Err(DatagenError::Config(format!("optical grid must be even and >= 2, got {grid}")));
    }
    let spec = |name: &str, cadence, height, channels, spatial| ModalitySpec {
        name: name.to_string(),
        cadence,
        years,
        height,
        width: height,
        channels,
        spatial,
    };
    Ok(vec![
        spec(S2, Some(cadence), grid, 10, true),
        spec(S1, Some(cadence), grid, 4, true),
        spec(CLIMATE, Some(Cadence::Monthly), 1, 5, false),
        ModalitySpec {
            years: 0,
            ..spec(ELEVATION, None, grid / 2, 3, true)
        },
    ])
}

/// Space-time values of one modality, `[T, H, W, C]` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityData {
    pub spec: ModalitySpec,
    pub values: Vec<f32>,
}

impl ModalityData {
    pub fn at(&self, t: usize, row: usize, col: usize, ch: usize) -> f32 {
        let [_, h, w, c] = self.spec.shape();
        self.values[((t * h + row) * w + col) * c + ch]
    }

    /// Re-bins a monthly series to `cadence`, keeping the last `years`
    /// years. Static layers are returned unchanged; climate stays monthly.
    pub fn resample(&self, cadence: Cadence, years: u32) -> Result<ModalityData, DatagenError> {
        let Some(src_cadence) = self.spec.cadence else {
            return Ok(self.clone());
        };
        if years > self.spec.years {
            return Err(DatagenError::Modality {
                name: self.spec.name.clone(),
                reason: format!("requested {years} years but only {} were generated", self.spec.years),
            });
        }
        let target = if self.spec.name == CLIMATE { Cadence::Monthly } else { cadence };
        if target == src_cadence && years == self.spec.years {
            return Ok(self.clone());
        }
        if src_cadence != Cadence::Monthly {
            if target != src_cadence {
                return Err(DatagenError::Modality {
                    name: self.spec.name.clone(),
                    reason: format!("cannot re-bin {src_cadence} data to {target}"),
                });
            }
            let steps = src_cadence.steps_per_year();
            let skip = (self.spec.years - years) as usize * steps;
            let frame = self.spec.height * self.spec.width * self.spec.channels;
            let mut spec = self.spec.clone();
            spec.years = years;
            return Ok(ModalityData {
                spec,
                values: self.values[skip * frame..].to_vec(),
            });
        }
        let monthly_skip = (self.spec.years - years) as usize * MONTHS_PER_YEAR;
        let frame = self.spec.height * self.spec.width * self.spec.channels;
        let values = aggregate_months(&self.values[monthly_skip * frame..], frame, target);
        let mut spec = self.spec.clone();
        spec.cadence = Some(target);
        spec.years = years;
        Ok(ModalityData { spec, values })
    }
}

/// Mean over consecutive month bins (`12 / steps_per_year` months each).
fn aggregate_months(monthly: &[f32], frame: usize, cadence: Cadence) -> Vec<f32> {
    let months = monthly.len() / frame;
    let bin = MONTHS_PER_YEAR / cadence.steps_per_year();
    if bin == 1 {
        return monthly.to_vec();
    }
    let mut out = Vec::with_capacity(monthly.len() / bin);
    for b in 0..months / bin {
        for i in 0..frame {
            let s: f64 = (0..bin).map(|m| monthly[(b * bin + m) * frame + i] as f64).sum();
            out.push((s / bin as f64) as f32);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSample {
    pub id: String,
    pub location: PlotLocation,
    pub split: Option<Split>,
    pub modalities: BTreeMap<String, ModalityData>,
    pub labels: LabelRaster,
}

impl PlotSample {
    pub fn modality(&self, name: &str) -> Option<&ModalityData> {
        self.modalities.get(name)
    }

    /// Copy with every modality re-binned via [`ModalityData::resample`].
    pub fn resample(&self, cadence: Cadence, years: u32) -> Result<PlotSample, DatagenError> {
        let modalities = self
            .modalities
            .iter()
            .map(|(k, m)| Ok((k.clone(), m.resample(cadence, years)?)))
            .collect::<Result<_, DatagenError>>()?;
        Ok(PlotSample {
            modalities,
            ..self.clone()
        })
    }

    /// Copy restricted to the named modalities.
    pub fn select(&self, names: &[String]) -> Result<PlotSample, DatagenError> {
        let mut modalities = BTreeMap::new();
        for n in names {
            let m = self.modalities.get(n).ok_or_else(|| DatagenError::Modality {
                name: n.clone(),
                reason: format!("not present in plot {}", self.id),
            })?;
            modalities.insert(n.clone(), m.clone());
        }
        Ok(PlotSample {
            modalities,
            ..self.clone()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Every class has a distinct constant optical signature.
    Easy,
    /// Forest types differ only in the phase of an optical seasonal cycle.
    TemporalPhase,
    /// Forest type is carried by climate and elevation, not by optics.
    ModalFusion,
    /// A single class everywhere with constant signatures.
    Flat(ClassId),
}

/// A generative rule plus its noise settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub kind: ScenarioKind,
    /// Standard deviation of additive Gaussian noise on monthly values.
    pub noise: f64,
    /// Probability that a label pixel is replaced by `Unknown`.
    pub unknown_rate: f64,
    /// Which modality and cadence carry the discriminative signal.
    pub signal: String,
    /// The experiment this scenario is built for.
    pub supports: String,
}

impl Scenario {
    pub fn easy() -> Self {
        Self {
            name: "easy".into(),
            kind: ScenarioKind::Easy,
            noise: 0.05,
            unknown_rate: 0.0,
            signal: "optical bands 0-7, constant in time".into(),
            supports: "overfit smoke test".into(),
        }
    }

    pub fn temporal_phase() -> Self {
        Self {
            name: "temporal-phase".into(),
            kind: ScenarioKind::TemporalPhase,
            noise: 0.3,
            unknown_rate: 0.01,
            signal: "optical seasonal-cycle phase; annual means identical across forest types".into(),
            supports: "temporal cadence ablation".into(),
        }
    }

    pub fn modal_fusion() -> Self {
        Self {
            name: "modal-fusion".into(),
            kind: ScenarioKind::ModalFusion,
            noise: 0.1,
            unknown_rate: 0.01,
            signal: "forest vs non-forest in optics/radar; forest type from climate regime x elevation band".into(),
            supports: "modality ablation and decoder on/off comparison".into(),
        }
    }

    pub fn flat(class: ClassId) -> Self {
        Self {
            name: "flat".into(),
            kind: ScenarioKind::Flat(class),
            noise: 0.0,
            unknown_rate: 0.0,
            signal: "none".into(),
            supports: "degenerate-input checks".into(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self, DatagenError> {
        match name {
            "easy" => Ok(Self::easy()),
            "temporal-phase" => Ok(Self::temporal_phase()),
            "modal-fusion" => Ok(Self::modal_fusion()),
            "flat" => Ok(Self::flat(ClassId::NaturalForest)),
            other => Err(DatagenError::Scenario(other.to_string())),
        }
    }

    pub fn catalog() -> Vec<Scenario> {
        vec![
            Self::easy(),
            Self::temporal_phase(),
            Self::modal_fusion(),
            Self::flat(ClassId::NaturalForest),
        ]
    }

    /// Same rule with noise and unknown injection switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            noise: 0.0,
            unknown_rate: 0.0,
            ..self.clone()
        }
    }

    /// Per-pixel decision rule that recovers the labels of a noiseless
    /// sample from its features. `None` when the sample lacks what the rule
    /// reads (e.g. an annual optical series in the temporal scenario).
    pub fn oracle_label(&self, sample: &PlotSample, row: usize, col: usize) -> Option<ClassId> {
        match self.kind {
            ScenarioKind::Flat(c) => Some(c),
            ScenarioKind::Easy => {
                let s2 = sample.modality(S2)?;
                let best = (0..8)
                    .max_by(|&a, &b| s2.at(0, row, col, a).total_cmp(&s2.at(0, row, col, b)))
                    .unwrap();
                Some(ClassId::REAL[best])
            }
            ScenarioKind::TemporalPhase => {
                let s2 = sample.modality(S2)?;
                if s2.at(0, row, col, 9) > 0.75 {
                    return Some(ClassId::OtherVegetation);
                }
                if s2.at(0, row, col, 8) > 0.75 {
                    return Some(ClassId::Water);
                }
                let phase = estimate_phase(s2, row, col)?;
                let nearest = (0..3)
                    .min_by(|&a, &b| {
                        angle_gap(phase, FOREST_PHASES[a]).total_cmp(&angle_gap(phase, FOREST_PHASES[b]))
                    })
                    .unwrap();
                Some(ClassId::FOREST[nearest])
            }
            ScenarioKind::ModalFusion => {
                let s2 = sample.modality(S2)?;
                let nonforest = [
                    (5, ClassId::OtherVegetation),
                    (6, ClassId::Water),
                    (7, ClassId::BareGround),
                    (8, ClassId::BuiltArea),
                ];
                for (band, class) in nonforest {
                    if s2.at(0, row, col, band) > 0.5 {
                        return Some(class);
                    }
                }
                let climate = sample.modality(CLIMATE)?;
                let elevation = sample.modality(ELEVATION)?;
                let t = climate.spec.timesteps();
                let warm = (0..t).map(|i| climate.at(i, 0, 0, 0) as f64).sum::<f64>() / t as f64 > 0.0;
                let er = row * elevation.spec.height / sample.labels.height;
                let ec = col * elevation.spec.width / sample.labels.width;
                let high = elevation.at(0, er, ec, 0) > 0.0;
                Some(match (warm, high) {
                    (true, _) => ClassId::TreeCrops,
                    (false, true) => ClassId::PlantedForest,
                    (false, false) => ClassId::NaturalForest,
                })
            }
        }
    }
}

/// Seasonal-cycle phase per forest type in the temporal scenario.
pub const FOREST_PHASES: [f64; 3] = [0.0, 2.0 * PI / 3.0, 4.0 * PI / 3.0];

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Phase of the band-0 seasonal cycle from a series with at least four
/// steps per year; each step is centered on the middle of its month bin.
fn estimate_phase(s2: &ModalityData, row: usize, col: usize) -> Option<f64> {
    let cadence = s2.spec.cadence?;
    let steps = cadence.steps_per_year();
    if steps < 4 {
        return None;
    }
    let bin = (MONTHS_PER_YEAR / steps) as f64;
    let (mut a, mut b) = (0.0, 0.0);
    for t in 0..s2.spec.timesteps() {
        let center = (t % steps) as f64 * bin + (bin - 1.0) / 2.0;
        let theta = 2.0 * PI * (center + 0.5) / MONTHS_PER_YEAR as f64;
        let x = s2.at(t, row, col, 0) as f64 - 0.5;
        a += x * theta.sin();
        b += x * theta.cos();
    }
    Some(b.atan2(a))
}

/// Values on a `(cells + 1)^2` random control lattice, bilinearly
/// interpolated to pixel centers.
fn smooth_field(rng: &mut SeededRng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64 * cells as f64;
        let (y0, fy) = ((y.floor() as usize).min(cells - 1), y - (y.floor()).min((cells - 1) as f64));
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64 * cells as f64;
            let (x0, fx) = ((x.floor() as usize).min(cells - 1), x - (x.floor()).min((cells - 1) as f64));
            let v00 = lattice[y0 * n + x0];
            let v01 = lattice[y0 * n + x0 + 1];
            let v10 = lattice[(y0 + 1) * n + x0];
            let v11 = lattice[(y0 + 1) * n + x0 + 1];
            out.push(v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx);
        }
    }
    out
}

/// Argmax of one smoothed field per candidate class (plus a per-class bias).
fn partition(rng: &mut SeededRng, h: usize, w: usize, classes: &[(ClassId, f64)], cells: usize) -> Vec<ClassId> {
    let fields: Vec<Vec<f64>> = classes.iter().map(|_| smooth_field(rng, h, w, cells)).collect();
    (0..h * w)
        .map(|i| {
            let best = (0..classes.len())
                .max_by(|&a, &b| (fields[a][i] + classes[a].1).total_cmp(&(fields[b][i] + classes[b].1)))
                .unwrap();
            classes[best].0
        })
        .collect()
}

/// Per-plot latent state shared by all modalities.
struct Landscape {
    classes: Vec<ClassId>,
    /// Modal-fusion only: warm climate regime and high elevation band.
    warm: bool,
    high: bool,
}

fn landscape(rng: &mut SeededRng, scenario: &Scenario, h: usize, w: usize) -> Landscape {
    match scenario.kind {
        ScenarioKind::Flat(c) => Landscape {
            classes: vec![c; h * w],
            warm: false,
            high: false,
        },
        ScenarioKind::Easy => {
            let candidates: Vec<(ClassId, f64)> = ClassId::REAL.iter().map(|&c| (c, 0.0)).collect();
            // Drawn on the 2x2 block grid so no optical patch straddles a boundary.
            let coarse = partition(rng, h / 2, w / 2, &candidates, 2);
            let classes = (0..h * w).map(|i| coarse[(i / w / 2) * (w / 2) + (i % w) / 2]).collect();
            Landscape {
                classes,
                warm: false,
                high: false,
            }
        }
        ScenarioKind::TemporalPhase => {
            let candidates = [
                (ClassId::NaturalForest, 0.0),
                (ClassId::PlantedForest, 0.0),
                (ClassId::TreeCrops, 0.0),
                (ClassId::OtherVegetation, -0.1),
                (ClassId::Water, -0.1),
            ];
            Landscape {
                classes: partition(rng, h, w, &candidates, 2),
                warm: false,
                high: false,
            }
        }
        ScenarioKind::ModalFusion => {
            let forest = ClassId::FOREST[rng.random_range(0..3)];
            let (warm, high) = match forest {
                ClassId::TreeCrops => (true, rng.random::<bool>()),
                ClassId::PlantedForest => (false, true),
                _ => (false, false),
            };
            let mut others = vec![
                ClassId::OtherVegetation,
                ClassId::Water,
                ClassId::BareGround,
                ClassId::BuiltArea,
            ];
            let a = others.remove(rng.random_range(0..others.len()));
            let b = others.remove(rng.random_range(0..others.len()));
            let candidates = [(forest, 0.15), (a, 0.0), (b, 0.0)];
            Landscape {
                classes: partition(rng, h, w, &candidates, 2),
                warm,
                high,
            }
        }
    }
}

/// Noise-free monthly optical value for `class` at `month`, band `band`.
fn optical_signature(kind: ScenarioKind, class: ClassId, month: usize, band: usize) -> f64 {
    let theta = 2.0 * PI * (month as f64 + 0.5) / MONTHS_PER_YEAR as f64;
    match kind {
        ScenarioKind::Flat(c) => 0.1 * (c.code() as f64 + 1.0),
        ScenarioKind::Easy => {
            let idx = class.index().unwrap_or(0);
            match band {
                b if b < 8 => (b == idx) as u8 as f64,
                8 => idx as f64 / 7.0,
                _ => 0.5,
            }
        }
        ScenarioKind::TemporalPhase => match class {
            ClassId::NaturalForest | ClassId::PlantedForest | ClassId::TreeCrops if band < 5 => {
                let phase = FOREST_PHASES[class as usize];
                0.5 + (1.0 - 0.15 * band as f64) * (theta + phase).sin()
            }
            ClassId::OtherVegetation if band == 9 => 1.0,
            ClassId::Water if band == 8 => 1.0,
            ClassId::Water if band < 5 => -0.5,
            _ => 0.5 * (5..8).contains(&band) as u8 as f64,
        },
        ScenarioKind::ModalFusion => {
            let flag = |b: usize| (band == b) as u8 as f64;
            match class {
                c if c.is_forest() => {
                    if band < 5 {
                        0.3 + 0.3 * theta.sin()
                    } else {
                        0.0
                    }
                }
                ClassId::OtherVegetation => flag(5),
                ClassId::Water => flag(6),
                ClassId::BareGround => flag(7),
                _ => flag(8),
            }
        }
    }
}

fn radar_signature(kind: ScenarioKind, class: ClassId, channel: usize) -> f64 {
    match kind {
        ScenarioKind::Flat(c) => 0.05 * (c.code() as f64 + 1.0),
        ScenarioKind::ModalFusion | ScenarioKind::Easy => {
            let idx = if class.is_forest() { 0 } else { class.index().unwrap_or(0) };
            0.2 * ((idx + channel) % 4) as f64
        }
        ScenarioKind::TemporalPhase => {
            let idx = if class.is_forest() { 0 } else { class.index().unwrap_or(0) };
            0.2 * ((idx + channel) % 4) as f64
        }
    }
}

fn noise(rng: &mut SeededRng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * standard_normal(rng)
    }
}

fn gen_modality(
    rng: &mut SeededRng,
    scenario: &Scenario,
    land: &Landscape,
    label_hw: (usize, usize),
    spec: &ModalitySpec,
) -> Result<ModalityData, DatagenError> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let frame = h * w * c;
    let class_at = |r: usize, col: usize| {
        let lr = r * label_hw.0 / h;
        let lc = col * label_hw.1 / w;
        land.classes[lr * label_hw.1 + lc]
    };
    let sigma = scenario.noise;
    let kind = scenario.kind;
    let months = spec.years as usize * MONTHS_PER_YEAR;
    let mut monthly: Vec<f32> = Vec::new();
    match spec.name.as_str() {
        ELEVATION => {
            let terrain: Vec<Vec<f64>> = (0..c).map(|_| smooth_field(rng, h, w, 3)).collect();
            let level = match kind {
                ScenarioKind::ModalFusion => {
                    if land.high {
                        0.8
                    } else {
                        -0.8
                    }
                }
                ScenarioKind::Flat(_) => 0.0,
                _ => 0.0,
            };
            let mut out = Vec::with_capacity(frame);
            for i in 0..h * w {
                for (ch, field) in terrain.iter().enumerate() {
                    let v = match kind {
                        ScenarioKind::Flat(_) => 0.25,
                        _ if ch == 0 => level + 0.2 * (field[i] - 0.5),
                        _ => field[i] - 0.5,
                    };
                    out.push((v + noise(rng, sigma)) as f32);
                }
            }
            return Ok(ModalityData {
                spec: spec.clone(),
                values: out,
            });
        }
        CLIMATE => {
            let phases: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 2.0 * PI).collect();
            let regime = if land.warm { 0.8 } else { -0.8 };
            for m in 0..months {
                let theta = 2.0 * PI * (m as f64 + 0.5) / MONTHS_PER_YEAR as f64;
                for (ch, ph) in phases.iter().enumerate() {
                    let v = match kind {
                        ScenarioKind::Flat(_) => 0.5,
                        ScenarioKind::ModalFusion if ch == 0 => regime + 0.5 * theta.sin(),
                        _ => 0.5 * (theta + ph).sin(),
                    };
                    monthly.push((v + noise(rng, sigma)) as f32);
                }
            }
        }
        _ => {
            let optical = spec.name == S2;
            for m in 0..months {
                for r in 0..h {
                    for col in 0..w {
                        let class = class_at(r, col);
                        for ch in 0..c {
                            let v = if optical {
                                optical_signature(kind, class, m % MONTHS_PER_YEAR, ch)
                            } else {
                                radar_signature(kind, class, ch)
                            };
                            monthly.push((v + noise(rng, sigma)) as f32);
                        }
                    }
                }
            }
        }
    }
    let mut mspec = spec.clone();
    mspec.cadence = Some(Cadence::Monthly);
    let data = ModalityData {
        spec: mspec,
        values: monthly,
    };
    match spec.cadence {
        Some(cad) => data.resample(cad, spec.years),
        None => Ok(data),
    }
}

/// One synthetic plot, fully determined by `(seed, scenario, specs)`. The
/// label grid is the grid of the optical modality (or of the first spatial
/// modality when there is no optical one).
pub fn gen_plot(seed: u64, scenario: &Scenario, specs: &[ModalitySpec]) -> Result<PlotSample, DatagenError> {
    let label_spec = specs
        .iter()
        .find(|s| s.name == S2)
        .or_else(|| specs.iter().find(|s| s.spatial))
        .ok_or_else(|| DatagenError::Config("at least one spatial modality is required".into()))?;
    let (h, w) = (label_spec.height, label_spec.width);
    let mut rng = rng_from_seed(seed);
    let land = landscape(&mut rng, scenario, h, w);
    let mut modalities = BTreeMap::new();
    for spec in specs {
        // per-modality streams keep a modality's values independent of which
        // other modalities are requested
        let mut mrng = rng_from_seed(derive_seed(seed, stable_name_hash(&spec.name)));
        let data = gen_modality(&mut mrng, scenario, &land, (h, w), spec)?;
        modalities.insert(spec.name.clone(), data);
    }
    let mut labels = land.classes.clone();
    if scenario.unknown_rate > 0.0 {
        let mut lrng = rng_from_seed(derive_seed(seed, 7));
        for l in labels.iter_mut() {
            if lrng.random::<f64>() < scenario.unknown_rate {
                *l = ClassId::Unknown;
            }
        }
    }
    Ok(PlotSample {
        id: String::new(),
        location: PlotLocation { x: 0.0, y: 0.0 },
        split: None,
        modalities,
        labels: LabelRaster::new(h, w, labels).expect("label extent"),
    })
}

fn stable_name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Where plots land on the working plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Placement {
    /// Uniform over a square of roughly one block per plot.
    Spread,
    /// Round-robin over exactly this many blocks in a row.
    Blocks(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub plots: Vec<PlotSample>,
    pub splits: SplitAssignment,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PlotSample> {
        self.plots.iter().filter(move |p| p.split == Some(split))
    }
}

fn place(rng: &mut SeededRng, i: usize, n: usize, placement: Placement) -> PlotLocation {
    let half = PLOT_EXTENT_M / 2.0;
    let inside = |rng: &mut SeededRng| half + rng.random::<f64>() * (BLOCK_SIZE_M - PLOT_EXTENT_M);
    match placement {
        Placement::Spread => {
            let side = (n as f64).sqrt().ceil().max(1.0);
            let span = side * BLOCK_SIZE_M;
            PlotLocation {
                x: rng.random::<f64>() * span,
                y: rng.random::<f64>() * span,
            }
        }
        Placement::Blocks(b) => {
            let bx = (i % b.max(1)) as f64;
            PlotLocation {
                x: bx * BLOCK_SIZE_M + inside(rng),
                y: inside(rng),
            }
        }
    }
}

/// `n_plots` plots with seeds `derive_seed(seed, i)`, placed on the plane and
/// split by geographic block.
pub fn generate_dataset(
    n_plots: usize,
    seed: u64,
    scenario: &Scenario,
    specs: &[ModalitySpec],
    placement: Placement,
) -> Result<Dataset, DatagenError> {
    if n_plots < 3 {
        return Err(DatagenError::Config(format!("need at least 3 plots, got {n_plots}")));
    }
    if let Placement::Blocks(0) = placement {
        return Err(DatagenError::Config("block count must be positive".into()));
    }
    let mut plots: Vec<PlotSample> = (0..n_plots)
        .into_par_iter()
        .map(|i| {
            let plot_seed = derive_seed(seed, i as u64);
            let mut p = gen_plot(plot_seed, scenario, specs)?;
            p.id = format!("plot_{i:05}");
            p.location = place(&mut rng_from_seed(derive_seed(plot_seed, 0xB10C)), i, n_plots, placement);
            Ok(p)
        })
        .collect::<Result<_, DatagenError>>()?;
    let blocks = plots.iter().map(|p| block_of(p.location));
    let splits = sampler::assign_splits(blocks, derive_seed(seed, u64::MAX)).expect("non-empty");
    for p in &mut plots {
        p.split = splits.split_of(p.location);
    }
    Ok(Dataset { plots, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_set_shapes() {
        let s = default_modality_set(Cadence::Seasonal, 1).unwrap();
        assert_eq!(s[0].shape(), [4, 128, 128, 10]);
        assert_eq!(s[1].shape(), [4, 128, 128, 4]);
        assert_eq!(s[2].shape(), [12, 1, 1, 5]);
        assert_eq!(s[3].shape(), [1, 64, 64, 3]);
        let s = default_modality_set(Cadence::Monthly, 3).unwrap();
        assert_eq!(s[0].shape(), [36, 128, 128, 10]);
        assert_eq!(s[2].shape(), [36, 1, 1, 5]);
        let s = default_modality_set(Cadence::Annual, 1).unwrap();
        assert_eq!(s[0].shape(), [1, 128, 128, 10]);
        assert!(default_modality_set(Cadence::Annual, 4).is_err());
        assert!(default_modality_set(Cadence::Annual, 0).is_err());
        assert!("weekly".parse::<Cadence>().is_err());
    }

    #[test]
    fn plots_are_deterministic() {
        let specs = scaled_modality_set(Cadence::Seasonal, 1, 8).unwrap();
        let a = gen_plot(5, &Scenario::temporal_phase(), &specs).unwrap();
        let b = gen_plot(5, &Scenario::temporal_phase(), &specs).unwrap();
        assert_eq!(a, b);
        let c = gen_plot(6, &Scenario::temporal_phase(), &specs).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flat_noiseless_is_constant() {
        let specs = scaled_modality_set(Cadence::Seasonal, 1, 8).unwrap();
        let p = gen_plot(1, &Scenario::flat(ClassId::Water), &specs).unwrap();
        assert!(p.labels.labels.iter().all(|&c| c == ClassId::Water));
        for m in p.modalities.values() {
            let first = m.values[0];
            assert!(m.values.iter().all(|&v| v == first), "{}", m.spec.name);
        }
    }

    #[test]
    fn resample_bins_months() {
        let specs = scaled_modality_set(Cadence::Monthly, 2, 4).unwrap();
        let monthly = gen_plot(3, &Scenario::temporal_phase(), &specs).unwrap();
        let s2 = monthly.modality(S2).unwrap();
        let seasonal = s2.resample(Cadence::Seasonal, 1).unwrap();
        assert_eq!(seasonal.spec.shape(), [4, 4, 4, 10]);
        let frame = 4 * 4 * 10;
        // first season of the last year = mean of months 12..15
        let expect = (0..3).map(|m| s2.values[(12 + m) * frame] as f64).sum::<f64>() / 3.0;
        assert_eq!(seasonal.values[0], expect as f32);
        let err = s2.resample(Cadence::Seasonal, 3).unwrap_err();
        assert!(err.to_string().contains("only 2"));

        // generating directly at a cadence equals re-binning the monthly plot
        let seasonal_specs = scaled_modality_set(Cadence::Seasonal, 1, 4).unwrap();
        let direct = gen_plot(3, &Scenario::temporal_phase(), &seasonal_specs).unwrap();
        let rebinned = scaled_modality_set(Cadence::Monthly, 1, 4).unwrap();
        let m1 = gen_plot(3, &Scenario::temporal_phase(), &rebinned).unwrap();
        assert_eq!(direct.modality(S2), m1.modality(S2).unwrap().resample(Cadence::Seasonal, 1).ok().as_ref());
    }

    #[test]
    fn noiseless_oracle_recovers_labels() {
        for scenario in [Scenario::easy(), Scenario::temporal_phase(), Scenario::modal_fusion()] {
            let sc = scenario.noiseless();
            let specs = scaled_modality_set(Cadence::Seasonal, 1, 16).unwrap();
            for seed in 0..5 {
                let p = gen_plot(seed, &sc, &specs).unwrap();
                for r in 0..16 {
                    for c in 0..16 {
                        assert_eq!(sc.oracle_label(&p, r, c), Some(p.labels.get(r, c)), "{} seed {seed}", sc.name);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_forced_into_ten_blocks() {
        let specs = scaled_modality_set(Cadence::Annual, 1, 4).unwrap();
        let d = generate_dataset(30, 2, &Scenario::easy(), &specs, Placement::Blocks(10)).unwrap();
        assert_eq!(d.splits.counts(), [8, 1, 1]);
        assert!(d.plots.iter().all(|p| p.split.is_some()));
        assert!(generate_dataset(2, 2, &Scenario::easy(), &specs, Placement::Spread).is_err());
    }
}
