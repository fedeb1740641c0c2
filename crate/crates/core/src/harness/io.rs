//! On-disk formats.
//!
//! A dataset directory holds `dataset.json`, `splits.csv` and one
//! `plot_NNNNN/` directory per plot. A plot directory has `manifest.json`,
//! one `<modality>.f32` file per modality (little-endian `f32`, `[T,H,W,C]`
//! row-major) and `labels.u8` (class codes, row-major).
//!
//! A fusion stack directory holds `stack.json` (`{"height", "width"}`) and
//! one raw layer per evidence source: `natural.u8`, `planted.u8`,
//! `treecrop.u8`, `worldcover.u8`, `sbtn_vegetation.u8`, `deforested.u8`,
//! `regrowth_confident.u8` (0/1 flags or group codes) and `tree_height.f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use crate::datagen::{self, Dataset, ModalityData, ModalitySpec, Placement, PlotSample, Scenario};
use crate::labelfuse::{LabelRaster, SourceStack, WorldCover};
use crate::sampler::{PlotLocation, Split, SplitAssignment};

pub const MANIFEST: &str = "manifest.json";
pub const LABELS: &str = "labels.u8";
pub const DATASET: &str = "dataset.json";
pub const SPLITS: &str = "splits.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEntry {
    pub name: String,
    /// `[T, H, W, C]`
    pub shape: [usize; 4],
    pub dtype: String,
    pub byte_order: String,
    pub file: String,
    pub spec: ModalitySpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelEntry {
    /// `[H, W]`
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

/// `manifest.json` of one plot directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotManifest {
    pub id: String,
    pub location: PlotLocation,
    pub split: Option<Split>,
    pub modalities: Vec<ModalityEntry>,
    pub labels: LabelEntry,
}

/// `dataset.json` at the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: Scenario,
    pub seed: u64,
    pub plots: Vec<String>,
    pub specs: Vec<ModalitySpec>,
    pub split_counts: BTreeMap<String, usize>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() == expected * 4,
        "{}: expected {} bytes for {} f32 values, found {}",
        path.display(),
        expected * 4,
        expected,
        bytes.len()
    );
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(
        bytes.len() == expected,
        "{}: expected {} bytes, found {}",
        path.display(),
        expected,
        bytes.len()
    );
    Ok(bytes)
}

pub fn write_plot(dir: &Path, plot: &PlotSample) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut modalities = Vec::new();
    for (name, m) in &plot.modalities {
        ensure!(m.values.len() == m.spec.len(), "modality {name}: value count does not match its shape");
        let file = format!("{name}.f32");
        let path = dir.join(&file);
        fs::write(&path, f32_bytes(&m.values)).with_context(|| format!("writing {}", path.display()))?;
        modalities.push(ModalityEntry {
            name: name.clone(),
            shape: m.spec.shape(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            file,
            spec: m.spec.clone(),
        });
    }
    let path = dir.join(LABELS);
    fs::write(&path, plot.labels.codes()).with_context(|| format!("writing {}", path.display()))?;
    let manifest = PlotManifest {
        id: plot.id.clone(),
        location: plot.location,
        split: plot.split,
        modalities,
        labels: LabelEntry {
            shape: [plot.labels.height, plot.labels.width],
            dtype: "u8".into(),
            file: LABELS.into(),
        },
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

pub fn read_plot(dir: &Path) -> Result<PlotSample> {
    let manifest: PlotManifest = read_json(&dir.join(MANIFEST))?;
    let mut modalities = BTreeMap::new();
    for e in manifest.modalities {
        ensure!(
            e.dtype == "f32" && e.byte_order == "little",
            "{}: unsupported encoding {} / {}",
            dir.display(),
            e.dtype,
            e.byte_order
        );
        ensure!(e.shape == e.spec.shape(), "{}: modality {} shape disagrees with its spec", dir.display(), e.name);
        e.spec.validate().with_context(|| dir.display().to_string())?;
        let values = read_f32(&dir.join(&e.file), e.spec.len())?;
        modalities.insert(e.name.clone(), ModalityData { spec: e.spec, values });
    }
    let [h, w] = manifest.labels.shape;
    let codes = read_u8(&dir.join(&manifest.labels.file), h * w)?;
    let labels = LabelRaster::from_codes(h, w, &codes).with_context(|| dir.display().to_string())?;
    Ok(PlotSample {
        id: manifest.id,
        location: manifest.location,
        split: manifest.split,
        modalities,
        labels,
    })
}

pub fn write_dataset(root: &Path, dataset: &Dataset, scenario: &Scenario, seed: u64, specs: &[ModalitySpec]) -> Result<()> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    for p in &dataset.plots {
        write_plot(&root.join(&p.id), p)?;
    }
    let path = root.join(SPLITS);
    let file = fs::File::create(&path).with_context(|| format!("writing {}", path.display()))?;
    dataset.splits.write_csv(file)?;
    let mut split_counts = BTreeMap::new();
    for s in Split::ALL {
        split_counts.insert(s.to_string(), dataset.split(s).count());
    }
    write_json(
        &root.join(DATASET),
        &DatasetManifest {
            scenario: scenario.clone(),
            seed,
            plots: dataset.plots.iter().map(|p| p.id.clone()).collect(),
            specs: specs.to_vec(),
            split_counts,
        },
    )
}

/// Generates and writes a dataset; returns the in-memory copy.
pub fn gen_dataset(
    root: &Path,
    n_plots: usize,
    seed: u64,
    scenario: &Scenario,
    specs: &[ModalitySpec],
    placement: Placement,
) -> Result<Dataset> {
    let dataset = datagen::generate_dataset(n_plots, seed, scenario, specs, placement)?;
    write_dataset(root, &dataset, scenario, seed, specs)?;
    Ok(dataset)
}

pub fn read_dataset_manifest(root: &Path) -> Result<DatasetManifest> {
    read_json(&root.join(DATASET))
}

/// Every plot listed in `dataset.json`, in listed order.
pub fn read_dataset(root: &Path) -> Result<(DatasetManifest, Vec<PlotSample>)> {
    let manifest = read_dataset_manifest(root)?;
    let plots = manifest
        .plots
        .iter()
        .map(|id| read_plot(&root.join(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, plots))
}

pub fn read_splits(root: &Path) -> Result<SplitAssignment> {
    let path = root.join(SPLITS);
    let file = fs::File::open(&path).with_context(|| format!("reading {}", path.display()))?;
    SplitAssignment::read_csv(file).with_context(|| path.display().to_string())
}

/// Plot directories directly under `root` (those containing a manifest), sorted.
pub fn plot_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    height: usize,
    width: usize,
}

const FLAG_LAYERS: [&str; 6] = [
    "natural",
    "planted",
    "treecrop",
    "sbtn_vegetation",
    "deforested",
    "regrowth_confident",
];

pub fn write_stack(dir: &Path, stack: &SourceStack) -> Result<()> {
    stack.validate()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(
        &dir.join("stack.json"),
        &StackHeader {
            height: stack.height,
            width: stack.width,
        },
    )?;
    let flags = [
        &stack.natural,
        &stack.planted,
        &stack.treecrop,
        &stack.sbtn_vegetation,
        &stack.deforested,
        &stack.regrowth_confident,
    ];
    for (name, layer) in FLAG_LAYERS.iter().zip(flags) {
        let bytes: Vec<u8> = layer.iter().map(|&b| b as u8).collect();
        fs::write(dir.join(format!("{name}.u8")), bytes)?;
    }
    let wc: Vec<u8> = stack.worldcover.iter().map(|&w| w as u8).collect();
    fs::write(dir.join("worldcover.u8"), wc)?;
    fs::write(dir.join("tree_height.f32"), f32_bytes(&stack.tree_height))?;
    Ok(())
}

pub fn read_stack(dir: &Path) -> Result<SourceStack> {
    let header: StackHeader = read_json(&dir.join("stack.json"))?;
    let n = header.height * header.width;
    let mut stack = SourceStack::empty(header.height, header.width);
    for name in FLAG_LAYERS {
        let path = dir.join(format!("{name}.u8"));
        let bytes = read_u8(&path, n)?;
        if let Some(bad) = bytes.iter().find(|&&b| b > 1) {
            bail!("{}: flag layer holds value {bad}", path.display());
        }
        let flags: Vec<bool> = bytes.into_iter().map(|b| b == 1).collect();
        match name {
            "natural" => stack.natural = flags,
            "planted" => stack.planted = flags,
            "treecrop" => stack.treecrop = flags,
            "sbtn_vegetation" => stack.sbtn_vegetation = flags,
            "deforested" => stack.deforested = flags,
            _ => stack.regrowth_confident = flags,
        }
    }
    let path = dir.join("worldcover.u8");
    stack.worldcover = read_u8(&path, n)?
        .into_iter()
        .map(|c| WorldCover::from_code(c).with_context(|| format!("{}: unknown land-cover code {c}", path.display())))
        .collect::<Result<_>>()?;
    stack.tree_height = read_f32(&dir.join("tree_height.f32"), n)?;
    stack.validate().with_context(|| dir.display().to_string())?;
    Ok(stack)
}
