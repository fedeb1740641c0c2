//! Training, evaluation and the ablation runners.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::io;
use crate::datagen::{Cadence, ModalitySpec, PlotSample};
use crate::metrics::{self, ConfusionMatrix, MetricReport};
use crate::mtsvit::{self, inputs_from_sample, ForwardHooks, ModelConfig, Mtsvit};
use crate::numerics::rng::{derive_seed, rng_from_seed};
use crate::numerics::{Adam, Tape, Tensor};
use crate::sampler::Split;

/// Per-modality, per-channel affine map fitted on training plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub modalities: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Normalizer {
    /// Channel means and population standard deviations over every value
    /// of `plots`; a constant channel keeps scale 1.
    pub fn fit(config: &ModelConfig, plots: &[PlotSample]) -> Result<Self> {
        ensure!(!plots.is_empty(), "cannot fit normalization on zero plots");
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for m in &config.modalities {
            let c = m.channels;
            let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
            for p in plots {
                let data = p
                    .modality(&m.name)
                    .with_context(|| format!("plot {} is missing modality {}", p.id, m.name))?;
                for (i, &v) in data.values.iter().enumerate() {
                    sum[i % c] += v as f64;
                }
                n += data.values.len() / c;
            }
            let mu: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            for p in plots {
                for (i, &v) in p.modality(&m.name).unwrap().values.iter().enumerate() {
                    let d = v as f64 - mu[i % c];
                    sq[i % c] += d * d;
                }
            }
            let sd = sq
                .iter()
                .map(|s| {
                    let sd = (s / n as f64).sqrt();
                    if sd > 1e-12 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            mean.push(mu);
            std.push(sd);
        }
        Ok(Self {
            modalities: config.modalities.iter().map(|m| m.name.clone()).collect(),
            mean,
            std,
        })
    }

    pub fn apply(&self, modality: usize, channel: usize, v: f32) -> f64 {
        (v as f64 - self.mean[modality][channel]) / self.std[modality][channel]
    }

    pub fn inputs(&self, config: &ModelConfig, plot: &PlotSample) -> Result<Vec<Tensor>> {
        Ok(inputs_from_sample(config, plot, |m, c, v| self.apply(m, c, v))?)
    }
}

/// Training target indices; `Unknown` maps to the ignore index `classes`.
pub fn targets(plot: &PlotSample, classes: usize) -> Vec<usize> {
    plot.labels.labels.iter().map(|c| c.index().unwrap_or(classes)).collect()
}

/// Model configuration for the plots' modalities under `cfg`. A single
/// modality always runs without the decoder.
pub fn model_config(cfg: &RunConfig, specs: &[ModalitySpec]) -> ModelConfig {
    let mut mc = ModelConfig::for_specs(specs);
    mc.d = cfg.d;
    mc.heads = cfg.heads;
    mc.layers_per_stage = cfg.layers;
    mc.decoder_enabled = cfg.decoder && specs.len() > 1;
    mc
}

/// Restricts plots to `cfg.modalities` (in that order; all when empty) and
/// re-bins them to `cfg.cadence` / `cfg.years`.
pub fn prepare(cfg: &RunConfig, plots: &[PlotSample]) -> Result<Vec<PlotSample>> {
    plots
        .par_iter()
        .map(|p| {
            let mut p = if cfg.modalities.is_empty() {
                p.clone()
            } else {
                p.select(&cfg.modalities)?
            };
            if cfg.cadence.is_some() || cfg.years.is_some() {
                let s2 = p.modalities.values().find(|m| m.spec.cadence.is_some() && m.spec.name != crate::datagen::CLIMATE);
                let cadence = cfg.cadence.or(s2.and_then(|m| m.spec.cadence)).unwrap_or(Cadence::Monthly);
                let years = cfg.years.or(s2.map(|m| m.spec.years)).unwrap_or(1);
                p = p.resample(cadence, years)?;
            }
            Ok(p)
        })
        .collect()
}

fn specs_of(plot: &PlotSample, order: &[String]) -> Vec<ModalitySpec> {
    let mut specs: Vec<ModalitySpec> = plot.modalities.values().map(|m| m.spec.clone()).collect();
    if !order.is_empty() {
        specs.sort_by_key(|s| order.iter().position(|n| *n == s.name));
    }
    specs
}

/// One trained model and how it got there.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub model: Mtsvit,
    pub normalizer: Normalizer,
    pub losses: Vec<f64>,
}

/// Minibatch Adam on per-pixel cross-entropy (Unknown ignored). Each batch
/// loss is the mean over all labeled pixels of its plots. Plots are
/// processed in parallel and their gradients summed in batch order.
pub fn train_seed(cfg: &RunConfig, train: &[PlotSample], seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training split is empty");
    let specs = specs_of(&train[0], &cfg.modalities);
    let mc = model_config(cfg, &specs);
    let mut model = Mtsvit::new(mc.clone(), derive_seed(seed, 0))?;
    let normalizer = Normalizer::fit(&mc, train)?;
    let k = mc.classes;
    let data: Vec<(Vec<Tensor>, Vec<usize>, usize)> = train
        .par_iter()
        .map(|p| {
            let t = targets(p, k);
            let n = t.iter().filter(|&&t| t < k).count();
            Ok((normalizer.inputs(&mc, p)?, t, n))
        })
        .collect::<Result<_>>()?;
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = cfg.epochs * steps_per_epoch;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let mut adam = Adam::new(model.store.params(), cfg.adam);
    let mut order_rng = rng_from_seed(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(total);
    let hooks = ForwardHooks::default();
    for step in 0..total {
        let pos = step % steps_per_epoch;
        if pos == 0 {
            order.shuffle(&mut order_rng);
        }
        let batch: Vec<usize> = order[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(order.len())]
            .iter()
            .copied()
            .filter(|&i| data[i].2 > 0)
            .collect();
        let labeled: usize = batch.iter().map(|&i| data[i].2).sum();
        if labeled == 0 {
            losses.push(0.0);
            continue;
        }
        let model_ref = &model;
        let results: Vec<(f64, Vec<Option<Tensor>>)> = batch
            .par_iter()
            .map(|&i| -> Result<_> {
                let (inputs, t, n) = &data[i];
                let mut tape = Tape::new();
                let vars = model_ref.store.bind(&mut tape, true);
                let logits = model_ref.forward(&mut tape, &vars, inputs, &hooks)?;
                let hw = t.len();
                let flat = tape.reshape(logits, &[hw, k])?;
                let loss = tape.cross_entropy(flat, t, k)?;
                let weight = *n as f64 / labeled as f64;
                let value = tape.value(loss).item() * weight;
                let mut grads = tape.backward_scaled(loss, weight)?;
                Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
            })
            .collect::<Result<_>>()
            .with_context(|| format!("training step {step}"))?;
        model.store.zero_grads();
        let mut loss = 0.0;
        for (value, grads) in results {
            loss += value;
            for (p, g) in model.store.params_mut().iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        if !loss.is_finite() {
            bail!("non-finite loss {loss} at training step {step}");
        }
        losses.push(loss);
        adam.step(model.store.params_mut());
    }
    Ok(SeedRun {
        seed,
        model,
        normalizer,
        losses,
    })
}

/// Pooled confusion matrix of `model` over `plots`.
pub fn evaluate(model: &Mtsvit, normalizer: &Normalizer, plots: &[PlotSample]) -> Result<ConfusionMatrix> {
    let k = model.config.classes;
    let parts: Vec<ConfusionMatrix> = plots
        .par_iter()
        .map(|p| {
            let inputs = normalizer.inputs(&model.config, p)?;
            let pred = model.predict_classes(&inputs)?;
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate_indices(&pred, &p.labels.labels)?;
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(k);
    for part in &parts {
        cm.merge(part)?;
    }
    Ok(cm)
}

/// Result of training one model per seed.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub runs: Vec<SeedRun>,
    pub train_matrices: Vec<ConfusionMatrix>,
    pub eval_matrices: Vec<ConfusionMatrix>,
    pub train_report: MetricReport,
    pub report: MetricReport,
}

/// Trains one model per configured seed on `train`, scores it on `train`
/// and on `eval`.
pub fn train_on(cfg: &RunConfig, train: &[PlotSample], eval: &[PlotSample]) -> Result<TrainOutcome> {
    let train = prepare(cfg, train)?;
    let eval = prepare(cfg, eval)?;
    ensure!(!eval.is_empty(), "evaluation split is empty");
    let mut runs = Vec::new();
    let mut train_matrices = Vec::new();
    let mut eval_matrices = Vec::new();
    for &seed in &cfg.seeds {
        let run = train_seed(cfg, &train, seed)?;
        train_matrices.push(evaluate(&run.model, &run.normalizer, &train)?);
        eval_matrices.push(evaluate(&run.model, &run.normalizer, &eval)?);
        runs.push(run);
    }
    Ok(TrainOutcome {
        train_report: metrics::report(&train_matrices)?,
        report: metrics::report(&eval_matrices)?,
        runs,
        train_matrices,
        eval_matrices,
    })
}

/// Training and evaluation plots for `cfg`: train (+val when `final`) and
/// test (when `final`) or val.
pub fn split_plots(cfg: &RunConfig, plots: Vec<PlotSample>) -> Result<(Vec<PlotSample>, Vec<PlotSample>, Split)> {
    let eval_split = if cfg.final_eval { Split::Test } else { Split::Val };
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for p in plots {
        match p.split {
            Some(Split::Train) => train.push(p),
            Some(Split::Val) if cfg.final_eval => train.push(p),
            Some(s) if s == eval_split => eval.push(p),
            Some(_) => {}
            None => bail!("plot {} has no split assignment", p.id),
        }
    }
    ensure!(!train.is_empty(), "training split is empty");
    ensure!(!eval.is_empty(), "{eval_split} split is empty");
    Ok((train, eval, eval_split))
}

fn load_plots(cfg: &RunConfig) -> Result<Vec<PlotSample>> {
    let root = cfg.dataset.as_deref().context("no dataset configured")?;
    Ok(io::read_dataset(root)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub eval_split: Split,
    pub train_plots: usize,
    pub eval_plots: usize,
    pub seeds: Vec<SeedSummary>,
    pub report: MetricReport,
}

pub fn checkpoint_metadata(cfg: &RunConfig, run: &SeedRun) -> serde_json::Value {
    serde_json::json!({
        "seed": run.seed,
        "normalizer": run.normalizer,
        "run_config": cfg.to_text(),
    })
}

/// Full run from a dataset directory; writes `seed_<s>.ckpt` and
/// `report.json` under `out` when given.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainSummary> {
    let (train_plots, eval_plots, eval_split) = split_plots(cfg, load_plots(cfg)?)?;
    let outcome = train_on(cfg, &train_plots, &eval_plots)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut seeds = Vec::new();
    for run in &outcome.runs {
        let checkpoint = match out {
            Some(dir) => {
                let path = dir.join(format!("seed_{}.ckpt", run.seed));
                mtsvit::save_checkpoint(&path, &run.model, &checkpoint_metadata(cfg, run))?;
                Some(path)
            }
            None => None,
        };
        seeds.push(SeedSummary {
            seed: run.seed,
            steps: run.losses.len(),
            final_loss: run.losses.last().copied(),
            checkpoint,
            parameters: run.model.num_parameters(),
        });
    }
    let summary = TrainSummary {
        eval_split,
        train_plots: train_plots.len(),
        eval_plots: eval_plots.len(),
        seeds,
        report: outcome.report,
    };
    if let Some(dir) = out {
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    }
    Ok(summary)
}

/// Scores a saved checkpoint on one split of a dataset directory.
pub fn eval_checkpoint(checkpoint: &Path, dataset: &Path, split: Split) -> Result<MetricReport> {
    let ck = mtsvit::load_checkpoint(checkpoint)?;
    let normalizer: Normalizer = serde_json::from_value(ck.metadata["normalizer"].clone())
        .with_context(|| format!("{}: missing normalization statistics", checkpoint.display()))?;
    let cfg = match ck.metadata["run_config"].as_str() {
        Some(text) => RunConfig::parse(text)?,
        None => RunConfig::default(),
    };
    let plots: Vec<PlotSample> = io::read_dataset(dataset)?
        .1
        .into_iter()
        .filter(|p| p.split == Some(split))
        .collect();
    ensure!(!plots.is_empty(), "{split} split is empty");
    let plots = prepare(&cfg, &plots)?;
    let cm = evaluate(&ck.model, &normalizer, &plots)?;
    Ok(metrics::report(&[cm])?)
}

fn write_rows(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let refs: Vec<(String, &MetricReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    let file = std::fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
    metrics::write_table(file, &refs)?;
    Ok(())
}

/// One train/eval per modality combination. Every combination must contain
/// the query modality. Writes `ablate_modality.csv` under `out`.
pub fn ablate_modality(
    cfg: &RunConfig,
    plots: &[PlotSample],
    combos: &[Vec<String>],
    out: Option<&Path>,
) -> Result<Vec<(String, MetricReport)>> {
    let query = crate::datagen::S2;
    for c in combos {
        ensure!(
            c.iter().any(|m| m == query),
            "modality combination [{}] lacks the query modality {query}",
            c.join(",")
        );
    }
    let (train, eval, _) = split_plots(cfg, plots.to_vec())?;
    let mut rows = Vec::new();
    for c in combos {
        let mut run_cfg = cfg.clone();
        run_cfg.modalities = c.clone();
        let outcome = train_on(&run_cfg, &train, &eval)?;
        rows.push((c.join("+"), outcome.report));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("ablate_modality.csv"), &rows)?;
    }
    Ok(rows)
}

/// One train/eval per `(cadence, years)` cell, named `<cadence>_<years>y`.
/// Writes `ablate_temporal.csv` under `out`.
pub fn ablate_temporal(
    cfg: &RunConfig,
    plots: &[PlotSample],
    cadences: &[Cadence],
    years: &[u32],
    out: Option<&Path>,
) -> Result<Vec<(String, MetricReport)>> {
    let (train, eval, _) = split_plots(cfg, plots.to_vec())?;
    let mut rows = Vec::new();
    for &c in cadences {
        for &y in years {
            let mut run_cfg = cfg.clone();
            run_cfg.cadence = Some(c);
            run_cfg.years = Some(y);
            let outcome = train_on(&run_cfg, &train, &eval)?;
            rows.push((format!("{c}_{y}y"), outcome.report));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_rows(&dir.join("ablate_temporal.csv"), &rows)?;
    }
    Ok(rows)
}

/// Loads the configured dataset for the ablation runners.
pub fn load_configured(cfg: &RunConfig) -> Result<Vec<PlotSample>> {
    load_plots(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, scaled_modality_set, Placement, Scenario};

    fn small_cfg() -> RunConfig {
        RunConfig {
            d: 8,
            heads: 2,
            layers: 1,
            epochs: 2,
            batch_size: 4,
            seeds: vec![3],
            ..RunConfig::default()
        }
    }

    fn dataset() -> Vec<PlotSample> {
        let specs = scaled_modality_set(Cadence::Seasonal, 1, 8).unwrap();
        generate_dataset(20, 1, &Scenario::modal_fusion(), &specs, Placement::Blocks(10))
            .unwrap()
            .plots
    }

    #[test]
    fn normalized_training_inputs_are_standardized() {
        let plots = dataset();
        let cfg = small_cfg();
        let specs = specs_of(&plots[0], &[]);
        let mc = model_config(&cfg, &specs);
        let norm = Normalizer::fit(&mc, &plots).unwrap();
        for (mi, m) in mc.modalities.iter().enumerate() {
            let c = m.channels;
            let mut sum = vec![0.0; c];
            let mut sq = vec![0.0; c];
            let mut n = 0.0;
            for p in &plots {
                let x = &norm.inputs(&mc, p).unwrap()[mi];
                for (i, v) in x.data().iter().enumerate() {
                    sum[i % c] += v;
                    sq[i % c] += v * v;
                }
                n += (x.len() / c) as f64;
            }
            for ch in 0..c {
                let mean = sum[ch] / n;
                assert!(mean.abs() < 1e-9, "{} mean {mean}", m.name);
                let var = sq[ch] / n - mean * mean;
                assert!((var - 1.0).abs() < 1e-6 || var < 1e-12, "{} var {var}", m.name);
            }
        }
    }

    #[test]
    fn zero_epochs_is_untrained_and_runs_repeat() {
        let plots = dataset();
        let mut cfg = small_cfg();
        cfg.epochs = 0;
        let (train, eval, _) = split_plots(&cfg, plots.clone()).unwrap();
        let a = train_on(&cfg, &train, &eval).unwrap();
        let untrained = Mtsvit::new(a.runs[0].model.config.clone(), derive_seed(3, 0)).unwrap();
        let cm = evaluate(&untrained, &a.runs[0].normalizer, &prepare(&cfg, &eval).unwrap()).unwrap();
        assert_eq!(a.eval_matrices[0], cm);

        cfg.epochs = 2;
        let b = train_on(&cfg, &train, &eval).unwrap();
        let c = train_on(&cfg, &train, &eval).unwrap();
        assert_eq!(b.report, c.report);
        assert_eq!(b.runs[0].losses, c.runs[0].losses);
        assert_eq!(b.runs[0].losses.len(), 2 * train.len().div_ceil(4));
    }

    #[test]
    fn modality_combo_must_contain_query() {
        let plots = dataset();
        let err = ablate_modality(&small_cfg(), &plots, &[vec!["climate".into()]], None).unwrap_err();
        assert!(err.to_string().contains("query modality"));
    }
}
