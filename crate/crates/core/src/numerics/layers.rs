//! Parameter storage and the pre-norm transformer blocks built on the tape.
//!
//! Layers hold indices into a [`ParamStore`]; a forward pass first binds the
//! store onto a tape (`ParamStore::bind`) and then looks parameters up by
//! index in the returned `Var` slice.

use super::rng::{truncated_normal, SeededRng};
use super::{AttnMask, Gradients, NumericsError, Parameter, Result, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn add_trunc_normal(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut SeededRng) -> usize {
        let t = Tensor::from_fn(shape, |_| truncated_normal(rng, INIT_STD));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.variable(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds the gradients of bound variables into the parameters' grads.
    pub fn accumulate_grads(&mut self, grads: &Gradients, vars: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }

    /// Replaces values from `(name, tensor)` pairs; names and shapes must match.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NumericsError::Config(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, t)) in self.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != t.shape() {
                return Err(NumericsError::Config(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.shape(),
                    name,
                    t.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.add_trunc_normal(format!("{name}.weight"), &[din, dout], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    /// `x[.., din] -> [.., dout]`
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight])?;
        tape.add(y, vars[self.bias])
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[d]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[self.gain], vars[self.bias])
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), din, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dout),
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, vars, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, vars, h)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumericsError::Config(format!(
                "embedding dim {d} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d),
            k: Linear::new(store, rng, &format!("{name}.k"), d, d),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d),
            out: Linear::new(store, rng, &format!("{name}.out"), d, d),
            heads,
        })
    }

    /// `query` is `[B, Sq, d]`, `context` is `[B, Sk, d]`.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], query: Var, context: Var, mask: AttnMask) -> Result<Var> {
        let q = self.q.forward(tape, vars, query)?;
        let k = self.k.forward(tape, vars, context)?;
        let v = self.v.forward(tape, vars, context)?;
        let a = tape.attention(q, k, v, self.heads, mask)?;
        self.out.forward(tape, vars, a)
    }
}

/// Pre-norm encoder layer: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, hidden, d),
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, mask: &AttnMask) -> Result<Var> {
        let h = self.ln_attn.forward(tape, vars, x)?;
        let a = self.attn.forward(tape, vars, h, h, mask.clone())?;
        let x = tape.add(x, a)?;
        let h = self.ln_mlp.forward(tape, vars, x)?;
        let m = self.mlp.forward(tape, vars, h)?;
        tape.add(x, m)
    }
}

/// Pre-norm decoder layer: self-attention over the queries, cross-attention
/// into a memory sequence, then an MLP, each with a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, d: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), d, heads)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), d, heads)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), d),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, hidden, d),
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, memory: Var) -> Result<Var> {
        let h = self.ln_self.forward(tape, vars, x)?;
        let a = self.self_attn.forward(tape, vars, h, h, AttnMask::none())?;
        let x = tape.add(x, a)?;
        let h = self.ln_cross.forward(tape, vars, x)?;
        let c = self.cross_attn.forward(tape, vars, h, memory, AttnMask::none())?;
        let x = tape.add(x, c)?;
        let h = self.ln_mlp.forward(tape, vars, x)?;
        let m = self.mlp.forward(tape, vars, h)?;
        tape.add(x, m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::rng_from_seed;
    use crate::numerics::{grad_check, masked_softmax, matmul};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn one_token_attention_is_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(1);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 6, 2).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let q = tape.constant(random(&[1, 1, 6], 2));
        let kv = tape.constant(random(&[1, 1, 6], 3));
        let out = mha.forward(&mut tape, &vars, q, kv, AttnMask::none()).unwrap();
        let v = mha.v.forward(&mut tape, &vars, kv).unwrap();
        let expect = mha.out.forward(&mut tape, &vars, v).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(expect)) < 1e-15);
    }

    #[test]
    fn masked_key_values_never_reach_output() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        let run = |kv: Tensor| {
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, false);
            let q = tape.constant(random(&[1, 3, 4], 5));
            let kv = tape.constant(kv);
            let out = mha
                .forward(&mut tape, &vars, q, kv, AttnMask::keys(vec![true, true, false]))
                .unwrap();
            tape.value(out).clone()
        };
        let base = random(&[1, 3, 4], 6);
        let mut perturbed = base.clone();
        for v in &mut perturbed.data_mut()[8..] {
            *v = *v * 1e3 - 17.0;
        }
        assert_eq!(run(base), run(perturbed));
    }

    #[test]
    fn two_token_single_head_matches_hand_oracle() {
        let q = random(&[1, 2, 3], 7);
        let k = random(&[1, 2, 3], 8);
        let v = random(&[1, 2, 3], 9);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out = tape.attention(qv, kv, vv, 1, AttnMask::none()).unwrap();

        // softmax(q k^T / sqrt(d)) v with the reference kernels
        let q2 = q.reshape(&[2, 3]).unwrap();
        let kt = crate::numerics::permute(&k.reshape(&[2, 3]).unwrap(), &[1, 0]).unwrap();
        let scores = matmul(&q2, &kt).unwrap();
        let scaled = Tensor::from_fn(&[2, 2], |i| scores.data()[i] / 3f64.sqrt());
        let p = masked_softmax(&scaled, &[true, true]).unwrap();
        let expect = matmul(&p, &v.reshape(&[2, 3]).unwrap()).unwrap();
        assert!(tape.value(out).data().iter().zip(expect.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, &mut rng, "a", 10, 4),
            Err(NumericsError::Config(_))
        ));
    }

    #[test]
    fn encoder_and_decoder_blocks_pass_grad_check() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(10);
        let enc = EncoderBlock::new(&mut store, &mut rng, "enc", 4, 2, 8).unwrap();
        let dec = DecoderBlock::new(&mut store, &mut rng, "dec", 4, 2, 8).unwrap();
        // larger weights than the init so the check sees non-trivial curvature
        let mut params: Vec<Tensor> = store.params().iter().map(|p| p.value.clone()).collect();
        let mut r = rng_from_seed(11);
        for p in &mut params {
            for v in p.data_mut() {
                *v += r.random_range(-0.5..0.5);
            }
        }
        let x = random(&[2, 3, 4], 12);
        let mem = random(&[2, 2, 4], 13);
        let target = random(&[2, 3, 4], 14);
        let loss = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
            let x = tape.constant(x.clone());
            let mem = tape.constant(mem.clone());
            let mask = AttnMask::keys(vec![true, true, false, true, false, true]);
            let h = enc.forward(tape, vars, x, &mask)?;
            let h = dec.forward(tape, vars, h, mem)?;
            let t = tape.constant(target.clone());
            let p = tape.mul(h, t)?;
            let s = tape.sum(p)?;
            let sq = tape.mul(h, h)?;
            let s2 = tape.sum(sq)?;
            let s2 = tape.scale(s2, 0.1)?;
            tape.add(s, s2)
        };
        let report = grad_check(loss, &params, 300, 1e-3, 99).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
