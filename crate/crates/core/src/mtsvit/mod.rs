//! Multi-modal temporal-spatial vision transformer.
//!
//! Pipeline per plot: patchify + embed each modality, add the shared spatial
//! positional table, run the shared spatial encoder over all spatial
//! modalities at once (padded to the longest token grid, padding masked out),
//! run the shared temporal encoder per modality with `K` class queries
//! appended, let the query modality's class streams attend to every other
//! modality in the decoder, and project each stream back to pixels.
//!
//! Token sequences are stored flattened: a token grid is `[t, h*w, d]` with
//! row-major `(row, col)` positions, class streams are `[h*w, K, d]`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{ModalitySpec, PlotSample};
use crate::numerics::rng::rng_from_seed;
use crate::numerics::{
    AttnMask, DecoderBlock, EncoderBlock, LayerNorm, Linear, Mlp, NumericsError, ParamStore, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Input geometry of one modality plus its patch size `(p_t, p_h, p_w)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: [usize; 3],
    pub spatial: bool,
}

impl ModalityConfig {
    /// Patch (1,2,2) for spatial layers and (1,1,1) for non-spatial ones.
    pub fn from_spec(spec: &ModalitySpec) -> Self {
        let patch = if spec.spatial { [1, 2, 2] } else { [1, 1, 1] };
        Self {
            name: spec.name.clone(),
            timesteps: spec.timesteps(),
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
            patch,
            spatial: spec.spatial,
        }
    }

    pub fn tokens(&self) -> (usize, usize, usize) {
        (
            self.timesteps / self.patch[0],
            self.height / self.patch[1],
            self.width / self.patch[2],
        )
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    fn validate(&self) -> Result<()> {
        let axes = [("T", self.timesteps), ("H", self.height), ("W", self.width)];
        for ((axis, extent), &p) in axes.iter().zip(&self.patch) {
            if p == 0 || *extent == 0 || extent % p != 0 {
                return Err(ModelError::Config(format!(
                    "modality {}: axis {axis} extent {extent} not divisible by patch {p}",
                    self.name
                )));
            }
        }
        if self.channels == 0 {
            return Err(ModelError::Config(format!("modality {}: no channels", self.name)));
        }
        if !self.spatial && (self.height != self.patch[1] || self.width != self.patch[2]) {
            return Err(ModelError::Config(format!(
                "modality {}: non-spatial inputs must reduce to a single token",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub layers_per_stage: usize,
    pub heads: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub modalities: Vec<ModalityConfig>,
    pub query_modality: String,
    pub decoder_enabled: bool,
}

impl ModelConfig {
    /// d = 192, two layers per stage, 4 heads, 8 classes, Sentinel-2 queries.
    pub fn for_specs(specs: &[ModalitySpec]) -> Self {
        Self {
            d: 192,
            layers_per_stage: 2,
            heads: 4,
            classes: 8,
            mlp_ratio: 4,
            modalities: specs.iter().map(ModalityConfig::from_spec).collect(),
            query_modality: crate::datagen::S2.to_string(),
            decoder_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.classes == 0 || self.layers_per_stage == 0 || self.mlp_ratio == 0 {
            return Err(ModelError::Config("classes, layers and mlp ratio must be positive".into()));
        }
        if self.modalities.is_empty() {
            return Err(ModelError::Config("no modalities".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            m.validate()?;
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(ModelError::Config(format!("duplicate modality {}", m.name)));
            }
        }
        let q = self.query()?;
        if !q.spatial {
            return Err(ModelError::Config(format!("query modality {} is not spatial", q.name)));
        }
        if self.decoder_enabled && self.modalities.len() < 2 {
            return Err(ModelError::Config(
                "decoder enabled but there are no other modalities to attend to".into(),
            ));
        }
        Ok(())
    }

    pub fn query(&self) -> Result<&ModalityConfig> {
        self.modalities
            .iter()
            .find(|m| m.name == self.query_modality)
            .ok_or_else(|| ModelError::Config(format!("query modality {} not configured", self.query_modality)))
    }

    fn max_tokens(&self) -> (usize, usize) {
        let hw = self.modalities.iter().map(|m| m.tokens().1 * m.tokens().2).max().unwrap_or(1);
        let t = self.modalities.iter().map(|m| m.tokens().0).max().unwrap_or(1);
        (hw, t)
    }
}

/// Debug and test switches for a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardHooks {
    /// Value written into padded spatial positions (0 by default).
    pub pad_fill: Option<f64>,
    /// Skip the spatial encoder (identity).
    pub bypass_spatial: bool,
}

/// Parameter indices of every stage, all living in one [`ParamStore`].
#[derive(Clone, Debug)]
struct Layout {
    embed: Vec<Linear>,
    spatial_pos: usize,
    temporal_pos: usize,
    class_queries: usize,
    spatial: Vec<EncoderBlock>,
    spatial_norm: LayerNorm,
    temporal: Vec<EncoderBlock>,
    temporal_norm: LayerNorm,
    memory_norm: Option<LayerNorm>,
    decoder: Vec<DecoderBlock>,
    decoder_norm: Option<LayerNorm>,
    head: Mlp,
}

/// Patchified tokens of one modality: `tokens` is `[t, h*w, d]`.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub name: String,
    pub tokens: Var,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub spatial: bool,
}

/// Per-pixel class embeddings of one modality: `streams` is `[h*w, K, d]`.
#[derive(Clone, Debug)]
pub struct ClassStreams {
    pub name: String,
    pub streams: Var,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug)]
pub struct Mtsvit {
    pub config: ModelConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Splits `[T, H, W, C]` values into `[T/p_t, (H/p_h)*(W/p_w), p_t*p_h*p_w*C]`,
/// each patch flattened in `(dt, dy, dx, c)` order.
pub fn patchify(values: &Tensor, m: &ModalityConfig) -> Result<Tensor> {
    let expect = [m.timesteps, m.height, m.width, m.channels];
    if values.shape() != expect {
        return Err(ModelError::Config(format!(
            "modality {}: expected input {:?}, got {:?}",
            m.name,
            expect,
            values.shape()
        )));
    }
    m.validate()?;
    let [pt, ph, pw] = m.patch;
    let (t, h, w) = m.tokens();
    let c = m.channels;
    let src = values.data();
    let mut out = Vec::with_capacity(src.len());
    for ti in 0..t {
        for r in 0..h {
            for col in 0..w {
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            let base = (((ti * pt + dt) * m.height + r * ph + dy) * m.width + col * pw + dx) * c;
                            out.extend_from_slice(&src[base..base + c]);
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![t, h * w, m.patch_dim()], out)?)
}

/// Sequence length after padding and the per-grid validity masks.
pub fn padding_masks(token_counts: &[usize]) -> (usize, Vec<Vec<bool>>) {
    let len = token_counts.iter().copied().max().unwrap_or(0);
    let masks = token_counts.iter().map(|&n| (0..len).map(|i| i < n).collect()).collect();
    (len, masks)
}

/// Temporal-encoder mask over `t` tokens followed by `k` queries: tokens see
/// tokens; query `i` sees the tokens and itself, never another query.
pub fn class_query_mask(t: usize, k: usize) -> Vec<bool> {
    let n = t + k;
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = j < t || i == j;
        }
    }
    m
}

impl Mtsvit {
    /// Fresh parameters: truncated-normal weights, zero biases, unit norms.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        let d = config.d;
        let hidden = config.mlp_ratio * d;
        let embed = config
            .modalities
            .iter()
            .map(|m| Linear::new(&mut store, &mut rng, &format!("embed.{}", m.name), m.patch_dim(), d))
            .collect();
        let (max_hw, max_t) = config.max_tokens();
        let spatial_pos = store.add_trunc_normal("pos.spatial", &[max_hw, d], &mut rng);
        let temporal_pos = store.add_trunc_normal("pos.temporal", &[max_t, d], &mut rng);
        let class_queries = store.add_trunc_normal("class_queries", &[config.classes, d], &mut rng);
        let mut blocks = |stage: &str, store: &mut ParamStore| -> Result<Vec<EncoderBlock>> {
            (0..config.layers_per_stage)
                .map(|i| Ok(EncoderBlock::new(store, &mut rng, &format!("{stage}.{i}"), d, config.heads, hidden)?))
                .collect()
        };
        let spatial = blocks("spatial", &mut store)?;
        let spatial_norm = LayerNorm::new(&mut store, "spatial.norm", d);
        let temporal = blocks("temporal", &mut store)?;
        let temporal_norm = LayerNorm::new(&mut store, "temporal.norm", d);
        let (memory_norm, decoder, decoder_norm) = if config.decoder_enabled {
            let norm = LayerNorm::new(&mut store, "decoder.memory_norm", d);
            let blocks = (0..config.layers_per_stage)
                .map(|i| DecoderBlock::new(&mut store, &mut rng, &format!("decoder.{i}"), d, config.heads, hidden))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            (Some(norm), blocks, Some(LayerNorm::new(&mut store, "decoder.norm", d)))
        } else {
            (None, Vec::new(), None)
        };
        let q = config.query()?;
        let head = Mlp::new(&mut store, &mut rng, "head", d, d, q.patch[1] * q.patch[2]);
        Ok(Self {
            layout: Layout {
                embed,
                spatial_pos,
                temporal_pos,
                class_queries,
                spatial,
                spatial_norm,
                temporal,
                temporal_norm,
                memory_norm,
                decoder,
                decoder_norm,
                head,
            },
            config,
            store,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Index of the `[K, d]` class-query table in the store.
    pub fn class_query_param(&self) -> usize {
        self.layout.class_queries
    }

    fn modality_index(&self, name: &str) -> Result<usize> {
        self.config
            .modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| ModelError::Config(format!("modality {name} not configured")))
    }

    /// Linear projection of every patch to `d`, followed by the spatial
    /// positional table (rows `0..h*w`).
    pub fn patchify_embed(&self, tape: &mut Tape, vars: &[Var], name: &str, values: &Tensor) -> Result<TokenGrid> {
        let i = self.modality_index(name)?;
        let m = &self.config.modalities[i];
        let patches = tape.constant(patchify(values, m)?);
        let tokens = self.layout.embed[i].forward(tape, vars, patches)?;
        let (t, h, w) = m.tokens();
        let tokens = if m.spatial {
            let pos = tape.slice(vars[self.layout.spatial_pos], 0, 0, h * w)?;
            tape.add(tokens, pos)?
        } else {
            tokens
        };
        Ok(TokenGrid {
            name: m.name.clone(),
            tokens,
            t,
            h,
            w,
            spatial: m.spatial,
        })
    }

    /// Shared spatial encoder over all spatial grids at once. Every `(grid, t)`
    /// slice is padded to the longest `h*w` with `pad_fill` and padded keys
    /// are masked out; non-spatial grids pass through untouched.
    pub fn spatial_encode(&self, tape: &mut Tape, vars: &[Var], grids: Vec<TokenGrid>, hooks: &ForwardHooks) -> Result<Vec<TokenGrid>> {
        let spatial: Vec<usize> = (0..grids.len()).filter(|&i| grids[i].spatial).collect();
        if spatial.is_empty() {
            return Err(ModelError::Config("spatial encoder needs at least one spatial modality".into()));
        }
        if hooks.bypass_spatial {
            return Ok(grids);
        }
        let d = self.config.d;
        let counts: Vec<usize> = spatial.iter().map(|&i| grids[i].h * grids[i].w).collect();
        let (len, masks) = padding_masks(&counts);
        let fill = hooks.pad_fill.unwrap_or(0.0);
        let mut parts = Vec::new();
        let mut keys = Vec::new();
        for (&i, mask) in spatial.iter().zip(&masks) {
            let g = &grids[i];
            let n = g.h * g.w;
            let padded = if n < len {
                let pad = tape.constant(Tensor::full(&[g.t, len - n, d], fill));
                tape.concat(&[g.tokens, pad], 1)?
            } else {
                g.tokens
            };
            parts.push(padded);
            for _ in 0..g.t {
                keys.extend_from_slice(mask);
            }
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let mask = AttnMask::keys(keys);
        for block in &self.layout.spatial {
            x = block.forward(tape, vars, x, &mask)?;
        }
        x = self.layout.spatial_norm.forward(tape, vars, x)?;
        let mut out = grids;
        let mut offset = 0;
        for &i in &spatial {
            let g = &mut out[i];
            let rows = tape.slice(x, 0, offset, g.t)?;
            offset += g.t;
            g.tokens = tape.slice(rows, 1, 0, g.h * g.w)?;
        }
        Ok(out)
    }

    /// Shared temporal encoder with `K` class queries appended to each pixel's
    /// sequence; only the query outputs are returned.
    pub fn temporal_encode(&self, tape: &mut Tape, vars: &[Var], grid: &TokenGrid) -> Result<ClassStreams> {
        let k = self.config.classes;
        let hw = grid.h * grid.w;
        let seq = tape.permute(grid.tokens, &[1, 0, 2])?;
        let pos = tape.slice(vars[self.layout.temporal_pos], 0, 0, grid.t)?;
        let seq = tape.add(seq, pos)?;
        let queries = tape.broadcast_leading(vars[self.layout.class_queries], &[hw])?;
        let mut x = tape.concat(&[seq, queries], 1)?;
        let mask = AttnMask {
            keys: None,
            pairs: Some(class_query_mask(grid.t, k)),
        };
        for block in &self.layout.temporal {
            x = block.forward(tape, vars, x, &mask)?;
        }
        let streams = tape.slice(x, 1, grid.t, k)?;
        Ok(ClassStreams {
            name: grid.name.clone(),
            streams: self.layout.temporal_norm.forward(tape, vars, streams)?,
            h: grid.h,
            w: grid.w,
        })
    }

    /// Cross-modal decoder: each class stream of the query modality attends
    /// to the same class stream of every other modality. Returns `[K, h*w, d]`.
    pub fn crossmodal_decode(&self, tape: &mut Tape, vars: &[Var], query: &ClassStreams, others: &[ClassStreams]) -> Result<Var> {
        let norm = match (&self.layout.memory_norm, others.is_empty()) {
            (Some(norm), false) => norm,
            (None, _) => return Err(ModelError::Config("decoder is disabled".into())),
            (_, true) => return Err(ModelError::Config("decoder needs at least one other modality".into())),
        };
        let mut x = tape.permute(query.streams, &[1, 0, 2])?;
        let mem: Vec<Var> = others
            .iter()
            .map(|o| tape.permute(o.streams, &[1, 0, 2]))
            .collect::<std::result::Result<_, _>>()?;
        let mem = if mem.len() == 1 { mem[0] } else { tape.concat(&mem, 1)? };
        let mem = norm.forward(tape, vars, mem)?;
        for block in &self.layout.decoder {
            x = block.forward(tape, vars, x, mem)?;
        }
        let norm = self.layout.decoder_norm.as_ref().expect("decoder norm exists with the decoder");
        Ok(norm.forward(tape, vars, x)?)
    }

    /// `[K, h*w, d]` streams to `[H, W, K]` logits: stream `k`, token
    /// `(r, c)` and head output `dy*p_w + dx` land at pixel
    /// `(r*p_h + dy, c*p_w + dx)`, channel `k`.
    pub fn segmentation_head(&self, tape: &mut Tape, vars: &[Var], streams: Var, h: usize, w: usize) -> Result<Var> {
        let q = self.config.query()?;
        let (ph, pw) = (q.patch[1], q.patch[2]);
        let k = self.config.classes;
        let y = self.layout.head.forward(tape, vars, streams)?;
        let y = tape.reshape(y, &[k, h, w, ph, pw])?;
        let y = tape.permute(y, &[1, 3, 2, 4, 0])?;
        Ok(tape.reshape(y, &[h * ph, w * pw, k])?)
    }

    /// Full forward pass on normalized inputs (`[T, H, W, C]` per modality,
    /// in config order). With the decoder disabled only the query modality
    /// is encoded.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[Tensor], hooks: &ForwardHooks) -> Result<Var> {
        if inputs.len() != self.config.modalities.len() {
            return Err(ModelError::Config(format!(
                "expected {} modality inputs, got {}",
                self.config.modalities.len(),
                inputs.len()
            )));
        }
        let mut grids = Vec::new();
        for (m, x) in self.config.modalities.iter().zip(inputs) {
            if self.config.decoder_enabled || m.name == self.config.query_modality {
                grids.push(self.patchify_embed(tape, vars, &m.name, x)?);
            }
        }
        let grids = self.spatial_encode(tape, vars, grids, hooks)?;
        let mut query = None;
        let mut others = Vec::new();
        for g in &grids {
            let s = self.temporal_encode(tape, vars, g)?;
            if g.name == self.config.query_modality {
                query = Some(s);
            } else {
                others.push(s);
            }
        }
        let query = query.expect("query modality is always encoded");
        let streams = if self.config.decoder_enabled {
            self.crossmodal_decode(tape, vars, &query, &others)?
        } else {
            tape.permute(query.streams, &[1, 0, 2])?
        };
        self.segmentation_head(tape, vars, streams, query.h, query.w)
    }

    /// Logits for a plot without recording gradients.
    pub fn predict(&self, inputs: &[Tensor], hooks: &ForwardHooks) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &vars, inputs, hooks)?;
        Ok(tape.value(logits).clone())
    }

    /// Per-pixel argmax of the logits.
    pub fn predict_classes(&self, inputs: &[Tensor]) -> Result<Vec<usize>> {
        let logits = self.predict(inputs, &ForwardHooks::default())?;
        let k = self.config.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best }))
            .collect())
    }
}

/// Model inputs from a plot in config order, widened to `f64`. `normalize`
/// maps `(modality index, channel, value)` to the model's input value.
pub fn inputs_from_sample(
    config: &ModelConfig,
    sample: &PlotSample,
    normalize: impl Fn(usize, usize, f32) -> f64,
) -> Result<Vec<Tensor>> {
    config
        .modalities
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let data = sample
                .modality(&m.name)
                .ok_or_else(|| ModelError::Config(format!("plot {} is missing modality {}", sample.id, m.name)))?;
            let shape = data.spec.shape();
            let expect = [m.timesteps, m.height, m.width, m.channels];
            if shape != expect {
                return Err(ModelError::Config(format!(
                    "modality {}: plot has {:?}, model expects {:?}",
                    m.name, shape, expect
                )));
            }
            let c = m.channels;
            let values = data.values.iter().enumerate().map(|(i, &v)| normalize(mi, i % c, v)).collect();
            Ok(Tensor::new(shape.to_vec(), values)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn modality(name: &str, t: usize, hw: usize, c: usize, patch: usize, spatial: bool) -> ModalityConfig {
        ModalityConfig {
            name: name.into(),
            timesteps: t,
            height: hw,
            width: hw,
            channels: c,
            patch: [1, patch, patch],
            spatial,
        }
    }

    fn tiny(decoder: bool) -> ModelConfig {
        ModelConfig {
            d: 8,
            layers_per_stage: 2,
            heads: 2,
            classes: 3,
            mlp_ratio: 4,
            modalities: vec![
                modality("s2", 2, 8, 3, 2, true),
                modality("elevation", 1, 4, 2, 2, true),
                modality("climate", 3, 1, 2, 1, false),
            ],
            query_modality: "s2".into(),
            decoder_enabled: decoder,
        }
    }

    fn random_inputs(config: &ModelConfig, seed: u64) -> Vec<Tensor> {
        let mut rng = rng_from_seed(seed);
        config
            .modalities
            .iter()
            .map(|m| Tensor::from_fn(&[m.timesteps, m.height, m.width, m.channels], |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn patchify_shapes_and_order() {
        let m = modality("s2", 4, 128, 10, 2, true);
        let x = Tensor::zeros(&[4, 128, 128, 10]);
        assert_eq!(patchify(&x, &m).unwrap().shape(), &[4, 64 * 64, 40]);
        let e = modality("elevation", 1, 64, 3, 2, true);
        assert_eq!(patchify(&Tensor::zeros(&[1, 64, 64, 3]), &e).unwrap().shape(), &[1, 32 * 32, 12]);

        let m = modality("x", 1, 4, 1, 2, true);
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let p = patchify(&x, &m).unwrap();
        // token (0,1) covers pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);

        let bad = modality("s1", 1, 5, 1, 2, true);
        let err = patchify(&Tensor::zeros(&[1, 5, 5, 1]), &bad).unwrap_err().to_string();
        assert!(err.contains("s1") && err.contains("axis H"), "{err}");
    }

    #[test]
    fn identity_projection_returns_patch() {
        let mut cfg = tiny(false);
        cfg.d = 12;
        cfg.modalities = vec![modality("s2", 1, 2, 3, 2, true)];
        let mut model = Mtsvit::new(cfg, 0).unwrap();
        let w = model.layout.embed[0].weight;
        model.store.get_mut(w).value = Tensor::from_fn(&[12, 12], |i| (i / 12 == i % 12) as u8 as f64);
        let pos = model.layout.spatial_pos;
        model.store.get_mut(pos).value = Tensor::zeros(&[1, 12]);
        let x = Tensor::from_fn(&[1, 2, 2, 3], |i| i as f64 * 0.5);
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let g = model.patchify_embed(&mut tape, &vars, "s2", &x).unwrap();
        assert_eq!(tape.value(g.tokens).data(), x.data());
    }

    #[test]
    fn padding_layout() {
        let (len, masks) = padding_masks(&[4096, 1024]);
        assert_eq!(len, 4096);
        assert!(masks[0].iter().all(|&m| m));
        assert_eq!(masks[1].iter().filter(|&&m| m).count(), 1024);
        assert!(masks[1][..1024].iter().all(|&m| m));
    }

    #[test]
    fn single_modality_spatial_encode_is_plain_encoder() {
        let mut cfg = tiny(false);
        cfg.modalities.truncate(1);
        let model = Mtsvit::new(cfg, 1).unwrap();
        let x = random_inputs(&model.config, 2);
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let g = model.patchify_embed(&mut tape, &vars, "s2", &x[0]).unwrap();
        let mut plain = g.tokens;
        for b in &model.layout.spatial {
            plain = b.forward(&mut tape, &vars, plain, &AttnMask::none()).unwrap();
        }
        let plain = model.layout.spatial_norm.forward(&mut tape, &vars, plain).unwrap();
        let out = model.spatial_encode(&mut tape, &vars, vec![g], &ForwardHooks::default()).unwrap();
        assert_eq!(tape.value(out[0].tokens), tape.value(plain));
    }

    #[test]
    fn shapes_and_padding_invariance() {
        for decoder in [true, false] {
            let model = Mtsvit::new(tiny(decoder), 3).unwrap();
            let x = random_inputs(&model.config, 4);
            let base = model.predict(&x, &ForwardHooks::default()).unwrap();
            assert_eq!(base.shape(), &[8, 8, 3]);
            for fill in [1.0, -37.5, 1e3] {
                let hooks = ForwardHooks {
                    pad_fill: Some(fill),
                    ..Default::default()
                };
                assert_eq!(model.predict(&x, &hooks).unwrap(), base);
            }
        }
    }

    #[test]
    fn class_streams_are_isolated() {
        let mut model = Mtsvit::new(tiny(true), 5).unwrap();
        let x = random_inputs(&model.config, 6);
        let base = model.predict(&x, &ForwardHooks::default()).unwrap();
        let q = model.class_query_param();
        model.store.get_mut(q).value.data_mut()[8 + 3] += 0.5;
        let moved = model.predict(&x, &ForwardHooks::default()).unwrap();
        for (i, (a, b)) in base.data().iter().zip(moved.data()).enumerate() {
            if i % 3 == 1 {
                continue;
            }
            assert_eq!(a, b, "channel {}", i % 3);
        }
        assert!(base.max_abs_diff(&moved) > 0.0);
    }

    #[test]
    fn two_token_temporal_encoder_matches_hand_computation() {
        let mut cfg = tiny(false);
        cfg.classes = 1;
        cfg.layers_per_stage = 1;
        cfg.modalities = vec![modality("s2", 1, 2, 1, 2, true)];
        let model = Mtsvit::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let mut rng = rng_from_seed(8);
        let tok = Tensor::from_fn(&[1, 1, 8], |_| rng.random_range(-1.0..1.0));
        let grid = TokenGrid {
            name: "s2".into(),
            tokens: tape.constant(tok.clone()),
            t: 1,
            h: 1,
            w: 1,
            spatial: true,
        };
        let out = model.temporal_encode(&mut tape, &vars, &grid).unwrap();
        let got = tape.value(out.streams).clone();

        // hand path on plain tensors
        let p = |i: usize| model.store.get(i).value.clone();
        let pos = p(model.layout.temporal_pos);
        let x0: Vec<f64> = tok.data().iter().zip(pos.data()).map(|(a, b)| a + b).collect();
        let q0 = p(model.layout.class_queries).into_data();
        let b = &model.layout.temporal[0];
        let ln = |x: &[f64], n: &LayerNorm| {
            crate::numerics::layer_norm(&Tensor::new(vec![1, 8], x.to_vec()).unwrap(), &p(n.gain), &p(n.bias))
                .unwrap()
                .into_data()
        };
        let lin = |x: &[f64], l: &Linear| {
            let y = crate::numerics::matmul(&Tensor::new(vec![1, x.len()], x.to_vec()).unwrap(), &p(l.weight)).unwrap();
            y.data().iter().zip(p(l.bias).data()).map(|(a, b)| a + b).collect::<Vec<f64>>()
        };
        let (h0, h1) = (ln(&x0, &b.ln_attn), ln(&q0, &b.ln_attn));
        let qv = lin(&h1, &b.attn.q);
        let (k0, k1) = (lin(&h0, &b.attn.k), lin(&h1, &b.attn.k));
        let (v0, v1) = (lin(&h0, &b.attn.v), lin(&h1, &b.attn.v));
        let mut att = vec![0.0; 8];
        for head in 0..2 {
            let r = head * 4..head * 4 + 4;
            let dot = |k: &[f64]| r.clone().map(|i| qv[i] * k[i]).sum::<f64>() / 2.0;
            let (s0, s1) = (dot(&k0), dot(&k1));
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            for i in r.clone() {
                att[i] = (e0 * v0[i] + e1 * v1[i]) / (e0 + e1);
            }
        }
        let a = lin(&att, &b.attn.out);
        let x1: Vec<f64> = q0.iter().zip(&a).map(|(x, y)| x + y).collect();
        let hm = ln(&x1, &b.ln_mlp);
        let hid: Vec<f64> = lin(&hm, &b.mlp.fc1).into_iter().map(crate::numerics::gelu_scalar).collect();
        let m = lin(&hid, &b.mlp.fc2);
        let x2: Vec<f64> = x1.iter().zip(&m).map(|(x, y)| x + y).collect();
        let expect = ln(&x2, &model.layout.temporal_norm);
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn identical_pixels_give_identical_streams() {
        let model = Mtsvit::new(tiny(false), 9).unwrap();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let row = Tensor::from_fn(&[2, 1, 8], |i| (i as f64).sin());
        let rows: Vec<Var> = (0..4).map(|_| tape.constant(row.clone())).collect();
        let tokens = tape.concat(&rows, 1).unwrap();
        let grid = TokenGrid {
            name: "s2".into(),
            tokens,
            t: 2,
            h: 2,
            w: 2,
            spatial: true,
        };
        let s = model.temporal_encode(&mut tape, &vars, &grid).unwrap();
        let v = tape.value(s.streams);
        let per = 3 * 8;
        for p in 1..4 {
            assert_eq!(&v.data()[..per], &v.data()[p * per..(p + 1) * per]);
        }
    }

    #[test]
    fn head_layout_and_single_token() {
        let mut cfg = tiny(false);
        cfg.classes = 2;
        cfg.modalities = vec![modality("s2", 1, 1, 1, 1, true)];
        let model = Mtsvit::new(cfg, 10).unwrap();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let s = tape.constant(Tensor::from_fn(&[2, 1, 8], |i| i as f64 * 0.1));
        let logits = model.segmentation_head(&mut tape, &vars, s, 1, 1).unwrap();
        let direct = model.layout.head.forward(&mut tape, &vars, s).unwrap();
        assert_eq!(tape.value(logits).shape(), &[1, 1, 2]);
        assert_eq!(tape.value(logits).data(), tape.value(direct).data());

        // layout: make the head output equal stream feature 0..4 directly
        let mut cfg = tiny(false);
        cfg.d = 4;
        cfg.modalities = vec![modality("s2", 1, 4, 1, 2, true)];
        let mut model = Mtsvit::new(cfg, 11).unwrap();
        let head = model.layout.head;
        for (lin, n) in [(head.fc1, 4), (head.fc2, 4)] {
            model.store.get_mut(lin.weight).value = Tensor::from_fn(&[n, 4], |i| (i / 4 == i % 4) as u8 as f64 * 10.0);
        }
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        // stream k, token (r,c), feature j = 1 + k*100 + (r*2+c)*10 + j
        let s = tape.constant(Tensor::from_fn(&[3, 4, 4], |i| 1.0 + (i / 16) as f64 * 100.0 + (i / 4 % 4) as f64 * 10.0 + (i % 4) as f64));
        let logits = model.segmentation_head(&mut tape, &vars, s, 2, 2).unwrap();
        let l = tape.value(logits);
        assert_eq!(l.shape(), &[4, 4, 3]);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..3 {
                    let tok = (i / 2) * 2 + j / 2;
                    let f = (i % 2) * 2 + j % 2;
                    let v = 1.0 + k as f64 * 100.0 + tok as f64 * 10.0 + f as f64;
                    let expect = crate::numerics::gelu_scalar(v * 10.0) * 10.0;
                    assert!((l.get(&[i, j, k]) - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn decoder_limits() {
        let model = Mtsvit::new(tiny(true), 12).unwrap();
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let q = ClassStreams {
            name: "s2".into(),
            streams: tape.constant(Tensor::from_fn(&[16, 3, 8], |i| (i as f64 * 0.37).sin())),
            h: 4,
            w: 4,
        };
        assert!(model.crossmodal_decode(&mut tape, &vars, &q, &[]).is_err());

        // perturbing one stream of the other modality moves only that stream
        let climate = Tensor::from_fn(&[1, 3, 8], |i| (i as f64 * 0.11).cos());
        let mut moved = climate.clone();
        moved.data_mut()[8 + 2] += 1.0;
        let run = |tape: &mut Tape, c: Tensor| {
            let o = ClassStreams {
                name: "climate".into(),
                streams: tape.constant(c),
                h: 1,
                w: 1,
            };
            let out = model.crossmodal_decode(tape, &vars, &q, &[o]).unwrap();
            tape.value(out).clone()
        };
        let a = run(&mut tape, climate);
        let b = run(&mut tape, moved);
        let per = 16 * 8;
        assert_eq!(&a.data()[..per], &b.data()[..per]);
        assert_eq!(&a.data()[2 * per..], &b.data()[2 * per..]);
        assert!(a.data()[per..2 * per] != b.data()[per..2 * per]);
    }

    #[test]
    fn zeroed_cross_attention_is_self_attention_only() {
        let mut cfg = tiny(true);
        cfg.modalities.truncate(2);
        let mut model = Mtsvit::new(cfg, 13).unwrap();
        for b in model.layout.decoder.clone() {
            let w = b.cross_attn.out.weight;
            let shape = model.store.get(w).value.shape().to_vec();
            model.store.get_mut(w).value = Tensor::zeros(&shape);
        }
        let mut tape = Tape::new();
        let vars = model.store.bind(&mut tape, false);
        let mk = |tape: &mut Tape, seed: u64, n: usize| {
            let mut rng = rng_from_seed(seed);
            tape.constant(Tensor::from_fn(&[n, 3, 8], |_| rng.random_range(-1.0..1.0)))
        };
        let q = ClassStreams { name: "s2".into(), streams: mk(&mut tape, 1, 16), h: 4, w: 4 };
        let o = ClassStreams { name: "elevation".into(), streams: mk(&mut tape, 2, 4), h: 2, w: 2 };
        let out = model.crossmodal_decode(&mut tape, &vars, &q, &[o]).unwrap();
        let mut x = tape.permute(q.streams, &[1, 0, 2]).unwrap();
        for b in &model.layout.decoder {
            let h = b.ln_self.forward(&mut tape, &vars, x).unwrap();
            let a = b.self_attn.forward(&mut tape, &vars, h, h, AttnMask::none()).unwrap();
            x = tape.add(x, a).unwrap();
            let h = b.ln_mlp.forward(&mut tape, &vars, x).unwrap();
            let m = b.mlp.forward(&mut tape, &vars, h).unwrap();
            x = tape.add(x, m).unwrap();
        }
        let x = model.layout.decoder_norm.unwrap().forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn config_errors() {
        let mut cfg = tiny(true);
        cfg.heads = 3;
        assert!(Mtsvit::new(cfg, 0).is_err());
        let mut cfg = tiny(true);
        cfg.query_modality = "climate".into();
        assert!(Mtsvit::new(cfg, 0).unwrap_err().to_string().contains("not spatial"));
        let mut cfg = tiny(true);
        cfg.modalities.truncate(1);
        assert!(Mtsvit::new(cfg, 0).is_err());
        let model = Mtsvit::new(tiny(true), 0).unwrap();
        assert!(model.predict(&random_inputs(&model.config, 0)[..2], &ForwardHooks::default()).is_err());
    }

    #[test]
    fn parameter_count_depends_only_on_config() {
        let a = Mtsvit::new(tiny(true), 1).unwrap();
        let b = Mtsvit::new(tiny(true), 2).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert!(Mtsvit::new(tiny(false), 1).unwrap().num_parameters() < a.num_parameters());
    }

    #[test]
    #[ignore = "full-size forward pass, slow"]
    fn default_config_logit_shape() {
        let specs = crate::datagen::default_modality_set(crate::datagen::Cadence::Seasonal, 1).unwrap();
        let model = Mtsvit::new(ModelConfig::for_specs(&specs), 0).unwrap();
        let x: Vec<Tensor> = specs.iter().map(|s| Tensor::zeros(&s.shape())).collect();
        assert_eq!(model.predict(&x, &ForwardHooks::default()).unwrap().shape(), &[128, 128, 8]);
    }
}
