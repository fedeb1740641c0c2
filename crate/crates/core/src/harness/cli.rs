//! `forestmap` command line. Every successful command prints one JSON
//! summary on stdout; errors go to stderr with exit status 1, usage errors
//! exit with status 2.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use super::config::RunConfig;
use super::{io, train};
use crate::datagen::{scaled_modality_set, Cadence, Placement, Scenario};
use crate::labelfuse::{self, class_counts, dominant_class, ClassId};
use crate::sampler::{self, PoolEntry, Split, REFERENCE_DOMINANT_MIX};

#[derive(Parser, Debug)]
#[command(name = "forestmap", version, about = "Forest-type segmentation benchmark toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value = "easy")]
        scenario: String,
        #[arg(long, default_value_t = 30)]
        plots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "seasonal")]
        cadence: Cadence,
        #[arg(long, default_value_t = 1)]
        years: u32,
        /// Optical grid size in pixels (128 for full-size plots).
        #[arg(long, default_value_t = 32)]
        grid: usize,
        /// Place plots round-robin in this many blocks instead of spreading them.
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse evidence stacks into label rasters.
    Fuse {
        #[arg(required = true)]
        stacks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stratified plot selection by dominant class.
    Sample {
        dataset: PathBuf,
        #[arg(long)]
        plots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `class=fraction` pairs by class code, e.g. `0=0.13,1=0.10`
        /// (default: the reference dominant-class mix).
        #[arg(long)]
        fractions: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label statistics of a dataset.
    Stats {
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per seed and report metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train/eval per modality combination.
    AblateModality {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Combinations separated by `;`, modalities by `,`.
        #[arg(long)]
        combos: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train/eval per cadence and year count.
    AblateTemporal {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_delimiter = ',', default_value = "annual,seasonal,monthly")]
        cadences: Vec<Cadence>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        years: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(path: &Path, dataset: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn reports(rows: Vec<(String, crate::metrics::MetricReport)>) -> Value {
    Value::Array(rows.into_iter().map(|(run, r)| json!({"run": run, "report": r})).collect())
}

fn parse_fractions(text: &str) -> Result<Vec<(ClassId, f64)>> {
    text.split(',')
        .map(|pair| {
            let (c, f) = pair.split_once('=').with_context(|| format!("expected class=fraction, got {pair:?}"))?;
            let class = ClassId::from_code(c.trim().parse()?)?;
            Ok((class, f.trim().parse()?))
        })
        .collect()
}

/// Executes a parsed command and returns its JSON summary.
pub fn execute(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Gen {
            scenario,
            plots,
            seed,
            cadence,
            years,
            grid,
            blocks,
            out,
        } => {
            let sc = Scenario::by_name(&scenario)?;
            let specs = scaled_modality_set(cadence, years, grid)?;
            let placement = blocks.map_or(Placement::Spread, Placement::Blocks);
            let ds = io::gen_dataset(&out, plots, seed, &sc, &specs, placement)?;
            let counts: BTreeMap<String, usize> = Split::ALL.iter().map(|&s| (s.to_string(), ds.split(s).count())).collect();
            Ok(json!({
                "command": "gen",
                "scenario": scenario,
                "plots": ds.plots.len(),
                "blocks": ds.splits.counts(),
                "split_plots": counts,
                "specs": specs,
            }))
        }
        Command::Fuse { stacks, out } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut rasters = Vec::new();
            let mut files = Vec::new();
            for dir in &stacks {
                let raster = labelfuse::fuse_stack(&io::read_stack(dir)?).with_context(|| dir.display().to_string())?;
                let name = dir.file_name().map_or("stack".into(), |n| n.to_string_lossy().into_owned());
                let path = out.join(format!("{name}.labels.u8"));
                std::fs::write(&path, raster.codes()).with_context(|| format!("writing {}", path.display()))?;
                files.push(path);
                rasters.push(raster);
            }
            let stats = labelfuse::dataset_stats(&rasters)?;
            Ok(json!({
                "command": "fuse",
                "outputs": files,
                "pixel_counts": stats.pixel_counts,
                "unknown_pixels": stats.unknown_pixels,
            }))
        }
        Command::Sample {
            dataset,
            plots,
            seed,
            fractions,
            out,
        } => {
            let (manifest, samples) = io::read_dataset(&dataset)?;
            let pool: Vec<PoolEntry> = samples
                .iter()
                .enumerate()
                .map(|(i, p)| PoolEntry {
                    id: i as u64,
                    dominant: dominant_class(&class_counts(&p.labels).0),
                })
                .collect();
            let mix = match fractions {
                Some(f) => parse_fractions(&f)?,
                None => REFERENCE_DOMINANT_MIX.to_vec(),
            };
            let targets = sampler::targets_from_fractions(plots, &mix);
            let picked = sampler::stratified_sample(&pool, &targets, seed)?;
            let ids: Vec<&str> = picked.iter().map(|e| manifest.plots[e.id as usize].as_str()).collect();
            let per_class: BTreeMap<&str, usize> = targets.iter().map(|(c, &n)| (c.name(), n)).collect();
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("selection.txt"), ids.join("\n") + "\n")?;
            }
            Ok(json!({"command": "sample", "selected": ids, "per_class": per_class}))
        }
        Command::Stats { dataset, out } => {
            let (_, plots) = io::read_dataset(&dataset)?;
            let labels: Vec<_> = plots.into_iter().map(|p| p.labels).collect();
            let stats = labelfuse::dataset_stats(&labels)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                stats.write_csv(std::fs::File::create(dir.join("stats.csv"))?)?;
            }
            Ok(json!({
                "command": "stats",
                "images": stats.images,
                "pixel_counts": stats.pixel_counts,
                "unknown_pixels": stats.unknown_pixels,
                "distinct_class_histogram": stats.distinct_class_histogram,
                "dominant_counts": stats.dominant_counts,
                "dominant_unknown": stats.dominant_unknown,
            }))
        }
        Command::Train {
            config,
            dataset,
            seed,
            out,
        } => {
            let cfg = run_config(&config, dataset, seed)?;
            let summary = train::train(&cfg, Some(&out))?;
            Ok(json!({"command": "train", "summary": summary}))
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
        } => {
            let report = train::eval_checkpoint(&checkpoint, &dataset, split)?;
            Ok(json!({"command": "eval", "split": split, "report": report}))
        }
        Command::AblateModality {
            config,
            dataset,
            seed,
            combos,
            out,
        } => {
            let cfg = run_config(&config, dataset, seed)?;
            let combos: Vec<Vec<String>> = combos
                .split(';')
                .map(|c| c.split(',').map(|m| m.trim().to_string()).filter(|m| !m.is_empty()).collect())
                .collect();
            if combos.iter().any(Vec::is_empty) {
                bail!("empty modality combination");
            }
            let plots = train::load_configured(&cfg)?;
            let rows = train::ablate_modality(&cfg, &plots, &combos, Some(&out))?;
            Ok(json!({"command": "ablate-modality", "rows": reports(rows)}))
        }
        Command::AblateTemporal {
            config,
            dataset,
            seed,
            cadences,
            years,
            out,
        } => {
            let cfg = run_config(&config, dataset, seed)?;
            let plots = train::load_configured(&cfg)?;
            let rows = train::ablate_temporal(&cfg, &plots, &cadences, &years, Some(&out))?;
            Ok(json!({"command": "ablate-temporal", "rows": reports(rows)}))
        }
    }
}

/// Parses `argv`, runs the command, prints the summary; returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
