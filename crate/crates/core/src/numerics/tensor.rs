//! Dense row-major `f64` tensors and the forward kernels used by the tape.

use super::{NumericsError, Result};

/// Epsilon added to the variance inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(NumericsError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![],
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, e) in index.iter().zip(&self.shape) {
            debug_assert!(i < e);
            off = off * e + i;
        }
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn ensure_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; row-major strides stay inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    // SAFETY: as above, b is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, a.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0,
            c.as_mut_ptr(), k as isize, 1,
        )
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    // SAFETY: as above, a is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, b.as_ptr(), n as isize, 1, 1.0,
            c.as_mut_ptr(), n as isize, 1,
        )
    }
}

/// Batch layout of a broadcast matmul: output batch shape and, for every
/// output batch index, the batch offsets into `a` and `b`.
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let err = || NumericsError::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let mut batch = vec![0; rank];
    for i in 0..rank {
        let ea = if i + ab.len() >= rank { ab[i + ab.len() - rank] } else { 1 };
        let eb = if i + bb.len() >= rank { bb[i + bb.len() - rank] } else { 1 };
        batch[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(err()),
        };
    }
    let strides = |dims: &[usize]| -> Vec<usize> {
        // per-output-axis stride in units of matrices, 0 for broadcast axes
        let mut s = vec![0; rank];
        let mut acc = 1;
        for i in (0..dims.len()).rev() {
            let axis = i + rank - dims.len();
            if dims[i] != 1 {
                s[axis] = acc;
            }
            acc *= dims[i];
        }
        s
    };
    let sa = strides(ab);
    let sb = strides(bb);
    let count: usize = batch.iter().product();
    let mut pairs = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for _ in 0..count {
        let oa: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((oa, ob));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < batch[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
/// broadcasting over the leading extents.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.pairs.len() * m * n];
    for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
        gemm_nn(
            &a.data[oa * m * k..(oa + 1) * m * k],
            &b.data[ob * k * n..(ob + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(plan.out_shape, out)
}

/// Number of logit rows that share one mask row. The mask covers the last
/// axis and its leading rows broadcast over contiguous groups of logit rows.
pub(crate) fn mask_group(logits_len: usize, n: usize, mask_len: usize) -> Result<usize> {
    let rows = logits_len / n;
    if mask_len == 0 || !mask_len.is_multiple_of(n) || !rows.is_multiple_of(mask_len / n) {
        return Err(NumericsError::Shape {
            op: "masked_softmax",
            lhs: vec![rows, n],
            rhs: vec![mask_len],
        });
    }
    Ok(rows / (mask_len / n))
}

/// Softmax over the last axis restricted to positions where `mask` is true.
///
/// `mask` holds `[.., n]` booleans; its rows are shared by contiguous groups
/// of logit rows, so a `[B, n]` mask applies to `[B, H, S, n]` logits.
/// Masked positions come out as exactly `0.0`.
pub fn masked_softmax(logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let n = *logits.shape.last().ok_or(NumericsError::Shape {
        op: "masked_softmax",
        lhs: vec![],
        rhs: vec![mask.len()],
    })?;
    let group = mask_group(logits.len(), n, mask.len())?;
    let mut out = vec![0.0; logits.len()];
    for (row, (src, dst)) in logits
        .data
        .chunks_exact(n)
        .zip(out.chunks_exact_mut(n))
        .enumerate()
    {
        let mrow = &mask[(row / group) * n..(row / group + 1) * n];
        softmax_row(src, mrow, dst).ok_or(NumericsError::FullyMasked { row })?;
    }
    Tensor::new(logits.shape.clone(), out)
}

pub(crate) fn softmax_row(src: &[f64], mask: &[bool], dst: &mut [f64]) -> Option<()> {
    let max = src
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut sum = 0.0;
    for ((d, &s), &m) in dst.iter_mut().zip(src).zip(mask) {
        *d = if m { (s - max).exp() } else { 0.0 };
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
    Some(())
}

/// Per-vector normalization over the last axis followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (y, _, _) = layer_norm_forward(x, gain, bias)?;
    Ok(y)
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = *x.shape.last().unwrap_or(&0);
    if d == 0 || gain.shape != [d] || bias.shape != [d] {
        return Err(NumericsError::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for (src, dst) in x.data.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (j, (o, s)) in dst.iter_mut().zip(src).enumerate() {
            *o = (s - mean) * rstd * gain.data[j] + bias.data[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((Tensor::new(x.shape.clone(), out)?, means, rstds))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Axis permutation; output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes.iter().any(|&a| {
            a >= rank || std::mem::replace(&mut seen[a], true)
        })
    {
        return Err(NumericsError::Shape {
            op: "permute",
            lhs: x.shape.clone(),
            rhs: axes.to_vec(),
        });
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        return Ok(x.clone());
    }
    // innermost output axis handled as a strided run
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| x.data[base + j * inner_stride]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

/// Mean negative log-softmax over rows of `[n, K]` logits whose target is not
/// `ignore`. Returns the loss and the row softmax probabilities.
pub(crate) fn cross_entropy_forward(
    logits: &Tensor,
    targets: &[usize],
    ignore: usize,
) -> Result<(f64, Vec<f64>, usize)> {
    if logits.rank() != 2 || logits.shape[0] != targets.len() {
        return Err(NumericsError::Shape {
            op: "cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let k = logits.shape[1];
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut count = 0;
    let all = vec![true; k];
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        if t >= k {
            return Err(NumericsError::Target {
                target: t,
                classes: k,
            });
        }
        let row = &logits.data[i * k..(i + 1) * k];
        let p = &mut probs[i * k..(i + 1) * k];
        softmax_row(row, &all, p).expect("unmasked row");
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += (max - row[t]) + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        count += 1;
    }
    if count == 0 {
        return Err(NumericsError::AllIgnored(targets.len()));
    }
    Ok((total / count as f64, probs, count))
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize], ignore: usize) -> Result<f64> {
    cross_entropy_forward(logits, targets, ignore).map(|(l, _, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let row = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let col = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_on_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for size in 1..=8 {
            let a = Tensor::from_fn(&[size, size + 1], |_| rng.random_range(-9..=9) as f64);
            let b = Tensor::from_fn(&[size + 1, size], |_| rng.random_range(-9..=9) as f64);
            assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
        }
        let a = Tensor::from_fn(&[3, 3], |_| rng.random::<f64>());
        let b = Tensor::from_fn(&[3, 3], |_| rng.random::<f64>());
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&triple_loop(&a, &b)) < 1e-15);
    }

    #[test]
    fn matmul_broadcasts_leading_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::from_fn(&[2, 3, 4], |_| rng.random::<f64>());
        let b = Tensor::from_fn(&[4, 5], |_| rng.random::<f64>());
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        let a1 = Tensor::new(vec![3, 4], a.data()[12..].to_vec()).unwrap();
        let c1 = triple_loop(&a1, &b);
        assert!(c.data()[15..].iter().zip(c1.data()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn masked_softmax_examples() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(masked_softmax(&t, &[true, true]).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::new(vec![2], vec![5.0, -100.0]).unwrap();
        assert_eq!(masked_softmax(&t, &[true, false]).unwrap().data(), &[1.0, 0.0]);
        assert!(matches!(
            masked_softmax(&t, &[false, false]),
            Err(NumericsError::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn masked_softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits: Vec<f64> = (0..9).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mask: Vec<bool> = (0..9).map(|i| i % 3 != 1).collect();
        let t = Tensor::new(vec![9], logits.clone()).unwrap();
        let p = masked_softmax(&t, &mask).unwrap();
        let denom: f64 = logits.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v.exp()).sum();
        for i in 0..9 {
            let expect = if mask[i] { logits[i].exp() / denom } else { 0.0 };
            assert!((p.data()[i] - expect).abs() < 1e-12);
        }
        let s: f64 = p.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_broadcasts_mask_rows() {
        let t = Tensor::zeros(&[2, 3, 2]);
        let p = masked_softmax(&t, &[true, false, true, true]).unwrap();
        assert_eq!(&p.data()[..6], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(&p.data()[6..], &[0.5; 6]);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let c = Tensor::full(&[4], 3.5);
        assert!(layer_norm(&c, &g, &b).unwrap().data().iter().all(|&v| v == 0.0));
        let g2 = Tensor::ones(&[2]);
        let b2 = Tensor::zeros(&[2]);
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &g2, &b2).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[16], |_| rng.random_range(-3.0..7.0));
        let y = layer_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16])).unwrap();
        let mean = y.data().iter().sum::<f64>() / 16.0;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let loss = cross_entropy(&l, &[0], 255).unwrap();
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 2.06e-9).abs() < 1e-11);

        let u = Tensor::zeros(&[3, 8]);
        let loss = cross_entropy(&u, &[0, 4, 7], 255).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);

        let l = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.5, -0.5]).unwrap();
        let with_ignored = cross_entropy(&l, &[1, 255], 255).unwrap();
        let alone = cross_entropy(&Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), &[1], 255).unwrap();
        assert_eq!(with_ignored, alone);

        assert!(matches!(
            cross_entropy(&l, &[255, 255], 255),
            Err(NumericsError::AllIgnored(2))
        ));
    }

    #[test]
    fn permute_transposes() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let y = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.get(&[k, i, j]), x.get(&[i, j, k]));
                }
            }
        }
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }
}
