//! The three attention mechanisms behind one interface.
//!
//! - `Vanilla`: per head, softmax(Q_j K_j^T / sqrt(D/J)) V_j. Materializes
//!   an N×N score matrix per head; that buffer is tagged as the probe's
//!   "core" term.
//! - `SeqNormFree`: queries, keys and values are standardized per feature
//!   across the sequence (sequence normalization), scaled/shifted by
//!   learnable per-feature affines, then combined in the linear order
//!   (1/N) Q'_j (K'_j^T V'_j). The (D/J)×(D/J) key–value product is the
//!   core term; nothing N×N is ever built.
//! - `SimA`: query and key feature columns are divided by their l1 norm
//!   over the sequence, then combined in the same linear order (no 1/N).
//!
//! Sequence normalization happens on the full concatenated D features,
//! before the head split. Statistics are per sample, identical in train
//! and eval. With a token mask, padded positions are excluded from the
//! statistics and from the key–value sums; the 1/N factor uses each
//! sample's real token count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Binder;
use crate::probe;
use crate::scalar::Element;
use crate::tensor::Tensor;

/// Attention variant selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "seqnorm")]
    SeqNormFree,
    #[serde(rename = "sima")]
    SimA,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Vanilla, Mechanism::SeqNormFree, Mechanism::SimA];

    pub fn name(&self) -> &'static str {
        match self {
            Mechanism::Vanilla => "vanilla",
            Mechanism::SeqNormFree => "seqnorm",
            Mechanism::SimA => "sima",
        }
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mechanism::Vanilla),
            "seqnorm" => Ok(Mechanism::SeqNormFree),
            "sima" => Ok(Mechanism::SimA),
            other => Err(Error::Config(format!(
                "unknown mechanism {other:?} (expected vanilla, seqnorm or sima)"
            ))),
        }
    }
}

fn default_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    /// Token/model dimension D'.
    pub model_dim: usize,
    /// Projection dimension D (concatenated across heads).
    pub inner_dim: usize,
    /// Head count J.
    pub heads: usize,
    /// Guard for variance and l1 denominators.
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl AttentionConfig {
    pub fn new(mechanism: Mechanism, model_dim: usize, inner_dim: usize, heads: usize) -> Self {
        AttentionConfig { mechanism, model_dim, inner_dim, heads, eps: default_eps() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.inner_dim == 0 || self.heads == 0 {
            return Err(Error::Config("attention dims and heads must be positive".into()));
        }
        if self.inner_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "inner_dim {} not divisible by heads {}",
                self.inner_dim, self.heads
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.inner_dim / self.heads
    }
}

/// Projection parameter names within an attention scope.
pub const PROJ_NAMES: [&str; 4] = ["w_q", "w_k", "w_v", "w_o"];
/// Per-feature affine parameter names (softmax-free mechanism only).
pub const AFFINE_NAMES: [&str; 6] = ["gamma_q", "beta_q", "gamma_k", "beta_k", "gamma_v", "beta_v"];

/// Learnable scale/shift triples for Q, K and V. Kept separate per
/// projection; initialized to the identity (gamma 1, beta 0).
pub struct SeqNormAffine<T: Element> {
    pub gamma_q: Tensor<T>,
    pub beta_q: Tensor<T>,
    pub gamma_k: Tensor<T>,
    pub beta_k: Tensor<T>,
    pub gamma_v: Tensor<T>,
    pub beta_v: Tensor<T>,
}

/// One attention layer's parameters, bound into a graph.
pub struct AttentionParams<T: Element> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub affine: Option<SeqNormAffine<T>>,
}

impl<T: Element> AttentionParams<T> {
    /// Binds `<scope>.w_q` etc. from a parameter store; the affine set is
    /// bound only for the softmax-free mechanism.
    pub fn bind(binder: &mut Binder<'_, T>, scope: &str, cfg: &AttentionConfig) -> Result<Self> {
        let b = |binder: &mut Binder<'_, T>, n: &str| binder.bind(&format!("{scope}.{n}"));
        let w_q = b(binder, "w_q")?;
        let w_k = b(binder, "w_k")?;
        let w_v = b(binder, "w_v")?;
        let w_o = b(binder, "w_o")?;
        let affine = if cfg.mechanism == Mechanism::SeqNormFree {
            Some(SeqNormAffine {
                gamma_q: b(binder, "gamma_q")?,
                beta_q: b(binder, "beta_q")?,
                gamma_k: b(binder, "gamma_k")?,
                beta_k: b(binder, "beta_k")?,
                gamma_v: b(binder, "gamma_v")?,
                beta_v: b(binder, "beta_v")?,
            })
        } else {
            None
        };
        Ok(AttentionParams { w_q, w_k, w_v, w_o, affine })
    }
}

fn expect_bnd<T: Element>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::BadShape {
            op: what,
            detail: format!("expected [batch, seq, dim], got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

fn check_mask<T: Element>(mask: &Tensor<T>, b: usize, n: usize) -> Result<()> {
    if mask.shape() != [b, n] {
        return Err(Error::ShapeMismatch {
            op: "attention mask",
            lhs: vec![b, n],
            rhs: mask.shape(),
        });
    }
    Ok(())
}

/// Q = x W_Q, K = x W_K, V = x W_V (no biases).
pub fn project_qkv<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((x.matmul(&p.w_q)?, x.matmul(&p.w_k)?, x.matmul(&p.w_v)?))
}

/// [B, N, D] -> [B, J, N, D/J]
pub fn split_heads<T: Element>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let (b, n, d) = expect_bnd(x, "split_heads")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("dim {d} not divisible by heads {heads}")));
    }
    x.reshape(&[b, n, heads, d / heads])?.transpose(1, 2)
}

/// [B, J, N, D/J] -> [B, N, D]
pub fn merge_heads<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::BadShape {
            op: "merge_heads",
            detail: format!("expected [batch, heads, seq, head_dim], got {s:?}"),
        });
    }
    x.transpose(1, 2)?.reshape(&[s[0], s[2], s[1] * s[3]])
}

/// Standardize over `axis` (subtract mean, divide by sqrt(var + eps)),
/// then apply per-feature `gamma`/`beta`. Population variance. With a
/// mask (sequence axis only), padded positions are excluded from the
/// statistics; masked rows still receive (meaningless) normalized values
/// and must be zeroed by the caller where they would leak into sums.
pub fn normalize_over_axis<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    let rank = shape.len();
    let epsv = T::from_f64(eps).unwrap();
    let (mean, var) = match mask {
        None => {
            let mean = x.mean_axis(axis, true)?;
            let d = x.sub(&mean)?;
            let var = d.mul(&d)?.mean_axis(axis, true)?;
            (mean, var)
        }
        Some(m) => {
            if axis + 2 != rank {
                return Err(Error::Config(
                    "masked normalization applies to the sequence axis only".into(),
                ));
            }
            let (b, n, _) = expect_bnd(x, "normalize_over_axis")?;
            check_mask(m, b, n)?;
            let me = m.reshape(&[b, n, 1])?;
            let count = m.sum_axis(1, true)?.reshape(&[b, 1, 1])?;
            let mean = x.mul(&me)?.sum_axis(axis, true)?.div(&count)?;
            let d = x.sub(&mean)?.mul(&me)?;
            let var = d.mul(&d)?.sum_axis(axis, true)?.div(&count)?;
            (mean, var)
        }
    };
    let xhat = x.sub(&mean)?.div(&var.add_scalar(epsv).sqrt())?;
    xhat.mul(gamma)?.add(beta)
}

/// Sequence normalization: per-sample, per-feature standardization across
/// the token axis (next-to-last), then the learnable affine.
pub fn seq_normalize_affine<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(Error::BadShape {
            op: "seq_normalize_affine",
            detail: format!("expected rank >= 2, got {:?}", x.shape()),
        });
    }
    normalize_over_axis(x, rank - 2, gamma, beta, eps, mask)
}

/// Per head j: softmax(Q_j K_j^T / sqrt(D/J)) V_j, heads re-concatenated.
/// Builds a [B, J, N, N] score tensor (the quadratic intermediate).
pub fn vanilla_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, n, d) = expect_bnd(q, "vanilla_attention")?;
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let scale = T::one() / T::from_usize(d / heads).unwrap().sqrt();
    let scores = qh.matmul_scaled(&kh.transpose(2, 3)?, scale)?;
    probe::on_core_alloc(scores.numel());
    let scores = match mask {
        Some(m) => {
            check_mask(m, b, n)?;
            // 0 where real, -1e30 where padded; softmax then ignores them.
            let big = T::from_f64(1e30).unwrap();
            let bias = m.scale(big).add_scalar(-big).reshape(&[b, 1, 1, n])?;
            scores.add(&bias)?
        }
        None => scores,
    };
    let weights = scores.softmax(3)?;
    merge_heads(&weights.matmul(&vh)?)
}

/// Softmax-free path: sequence-normalize Q, K, V on the concatenated D
/// features, then per head (1/N) Q'_j (K'_j^T V'_j). The key–value
/// product is (D/J)×(D/J); no N×N object exists in this routine.
pub fn seqnorm_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    affine: &SeqNormAffine<T>,
    heads: usize,
    eps: f64,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, n, _) = expect_bnd(q, "seqnorm_attention")?;
    let qn = seq_normalize_affine(q, &affine.gamma_q, &affine.beta_q, eps, mask)?;
    let kn = seq_normalize_affine(k, &affine.gamma_k, &affine.beta_k, eps, mask)?;
    let vn = seq_normalize_affine(v, &affine.gamma_v, &affine.beta_v, eps, mask)?;
    let (kn, vn) = match mask {
        Some(m) => {
            // The affine shift leaves padded rows nonzero; zero them so
            // they stay out of the key-value sums.
            let me = m.reshape(&[b, n, 1])?;
            (kn.mul(&me)?, vn.mul(&me)?)
        }
        None => (kn, vn),
    };
    let qh = split_heads(&qn, heads)?;
    let kh = split_heads(&kn, heads)?;
    let vh = split_heads(&vn, heads)?;
    let kv = kh.transpose(2, 3)?.matmul(&vh)?;
    probe::on_core_alloc(kv.numel());
    let out = match mask {
        None => {
            let inv = T::one() / T::from_usize(n).unwrap();
            qh.matmul_scaled(&kv, inv)?
        }
        Some(m) => {
            let count = m.sum_axis(1, true)?.reshape(&[b, 1, 1, 1])?;
            qh.matmul(&kv)?.div(&count)?
        }
    };
    merge_heads(&out)
}

/// SimA baseline: divide each feature column of Q and K by its l1 norm
/// over the sequence (denominator clamped to eps), V untouched, then the
/// linear-order product Q^(K^T V).
pub fn sima_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    eps: f64,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (b, n, _) = expect_bnd(q, "sima_attention")?;
    let me = match mask {
        Some(m) => {
            check_mask(m, b, n)?;
            Some(m.reshape(&[b, n, 1])?)
        }
        None => None,
    };
    let l1_normalize = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let a = t.abs();
        let a = match &me {
            Some(me) => a.mul(me)?,
            None => a,
        };
        let denom = a.sum_axis(1, true)?.clamp_min(T::from_f64(eps).unwrap());
        t.div(&denom)
    };
    let qn = l1_normalize(q)?;
    let kn = l1_normalize(k)?;
    let (kn, vm) = match &me {
        Some(me) => (kn.mul(me)?, v.mul(me)?),
        None => (kn, v.clone()),
    };
    let qh = split_heads(&qn, heads)?;
    let kh = split_heads(&kn, heads)?;
    let vh = split_heads(&vm, heads)?;
    let kv = kh.transpose(2, 3)?.matmul(&vh)?;
    probe::on_core_alloc(kv.numel());
    merge_heads(&qh.matmul(&kv)?)
}

/// Full layer: project, run the configured mechanism, output-project.
pub fn attention_forward<T: Element>(
    cfg: &AttentionConfig,
    p: &AttentionParams<T>,
    x: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (q, k, v) = project_qkv(x, p)?;
    let att = match cfg.mechanism {
        Mechanism::Vanilla => vanilla_attention(&q, &k, &v, cfg.heads, mask)?,
        Mechanism::SeqNormFree => {
            let affine = p.affine.as_ref().ok_or_else(|| {
                Error::Config("softmax-free layer is missing its affine parameters".into())
            })?;
            seqnorm_attention(&q, &k, &v, affine, cfg.heads, cfg.eps, mask)?
        }
        Mechanism::SimA => sima_attention(&q, &k, &v, cfg.heads, cfg.eps, mask)?,
    };
    att.matmul(&p.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Graph;

    fn randn(stream: &mut Stream, n: usize) -> Vec<f64> {
        (0..n).map(|_| stream.gaussian()).collect()
    }

    fn identity_affine(g: &Graph<f64>, d: usize) -> SeqNormAffine<f64> {
        SeqNormAffine {
            gamma_q: g.full(&[d], 1.0),
            beta_q: g.full(&[d], 0.0),
            gamma_k: g.full(&[d], 1.0),
            beta_k: g.full(&[d], 0.0),
            gamma_v: g.full(&[d], 1.0),
            beta_v: g.full(&[d], 0.0),
        }
    }

    #[test]
    fn config_requires_divisible_heads() {
        let mut cfg = AttentionConfig::new(Mechanism::Vanilla, 8, 6, 4);
        assert!(cfg.validate().is_err());
        cfg.heads = 3;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.head_dim(), 2);
    }

    #[test]
    fn vanilla_single_token_returns_value_row() {
        let mut s = Stream::new(40);
        let g: Graph<f64> = Graph::new();
        let q = g.constant(randn(&mut s, 8), &[1, 1, 8]).unwrap();
        let k = g.constant(randn(&mut s, 8), &[1, 1, 8]).unwrap();
        let vdata = randn(&mut s, 8);
        let v = g.constant(vdata.clone(), &[1, 1, 8]).unwrap();
        let out = vanilla_attention(&q, &k, &v, 2, None).unwrap();
        assert_eq!(out.to_vec(), vdata);
    }

    #[test]
    fn vanilla_identical_keys_average_values() {
        let mut s = Stream::new(41);
        let g: Graph<f64> = Graph::new();
        let (n, d) = (5, 4);
        let q = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let krow = randn(&mut s, d);
        let k = g.constant(krow.repeat(n), &[1, n, d]).unwrap();
        let vdata = randn(&mut s, n * d);
        let v = g.constant(vdata.clone(), &[1, n, d]).unwrap();
        let out = vanilla_attention(&q, &k, &v, 2, None).unwrap().to_vec();
        let mut mean = vec![0.0; d];
        for row in vdata.chunks(d) {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x / n as f64;
            }
        }
        for row in out.chunks(d) {
            for (got, want) in row.iter().zip(&mean) {
                assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn vanilla_matches_naive_quadratic_oracle() {
        let mut s = Stream::new(4);
        let g: Graph<f64> = Graph::new();
        let (n, d, j) = (6, 8, 2);
        let dh = d / j;
        let qd = randn(&mut s, n * d);
        let kd = randn(&mut s, n * d);
        let vd = randn(&mut s, n * d);
        let q = g.constant(qd.clone(), &[1, n, d]).unwrap();
        let k = g.constant(kd.clone(), &[1, n, d]).unwrap();
        let v = g.constant(vd.clone(), &[1, n, d]).unwrap();
        let got = vanilla_attention(&q, &k, &v, j, None).unwrap().to_vec();

        // direct per-element oracle: loop heads and rows, normalize exp scores
        let mut want = vec![0.0; n * d];
        for h in 0..j {
            for i in 0..n {
                let mut weights = vec![0.0; n];
                for t in 0..n {
                    let mut dot = 0.0;
                    for f in 0..dh {
                        dot += qd[i * d + h * dh + f] * kd[t * d + h * dh + f];
                    }
                    weights[t] = (dot / (dh as f64).sqrt()).exp();
                }
                let z: f64 = weights.iter().sum();
                for f in 0..dh {
                    let mut acc = 0.0;
                    for t in 0..n {
                        acc += weights[t] / z * vd[t * d + h * dh + f];
                    }
                    want[i * d + h * dh + f] = acc;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn seq_normalize_constant_feature_is_zero() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![7.0; 6], &[1, 6, 1]).unwrap();
        let gamma = g.full(&[1], 1.0);
        let beta = g.full(&[1], 0.0);
        let out = seq_normalize_affine(&x, &gamma, &beta, 1e-5, None).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seq_normalize_two_tokens() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 3.0], &[1, 2, 1]).unwrap();
        let gamma = g.full(&[1], 1.0);
        let beta = g.full(&[1], 0.0);
        // eps -> 0: mean 2, var 1 force [-1, +1]
        let out = seq_normalize_affine(&x, &gamma, &beta, 0.0, None).unwrap().to_vec();
        assert!((out[0] + 1.0).abs() <= 1e-15);
        assert!((out[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn seq_normalize_statistics_on_random_input() {
        let mut s = Stream::new(5);
        let g: Graph<f64> = Graph::new();
        let (n, d) = (50, 8);
        let x = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let gamma = g.full(&[d], 1.0);
        let beta = g.full(&[d], 0.0);
        let out = seq_normalize_affine(&x, &gamma, &beta, 1e-5, None).unwrap().to_vec();
        for f in 0..d {
            let col: Vec<f64> = (0..n).map(|i| out[i * d + f]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            assert!(mean.abs() <= 1e-7, "feature {f} mean {mean}");
            assert!(var <= 1.0 && var >= 1.0 - 1e-3, "feature {f} var {var}");
        }
    }

    #[test]
    fn seqnorm_output_shape_contract() {
        let mut s = Stream::new(60);
        let g: Graph<f32> = Graph::new();
        let (b, n, d, j) = (2, 196, 512, 8);
        let data: Vec<f32> = (0..b * n * d).map(|_| s.gaussian() as f32).collect();
        let q = g.constant(data.clone(), &[b, n, d]).unwrap();
        let k = g.constant(data.clone(), &[b, n, d]).unwrap();
        let v = g.constant(data, &[b, n, d]).unwrap();
        let affine = SeqNormAffine {
            gamma_q: g.full(&[d], 1.0),
            beta_q: g.full(&[d], 0.0),
            gamma_k: g.full(&[d], 1.0),
            beta_k: g.full(&[d], 0.0),
            gamma_v: g.full(&[d], 1.0),
            beta_v: g.full(&[d], 0.0),
        };
        let out = seqnorm_attention(&q, &k, &v, &affine, j, 1e-5, None).unwrap();
        assert_eq!(out.shape(), vec![b, n, d]);
    }

    #[test]
    fn seqnorm_idempotent_on_normalized_input() {
        // With identity affine and eps = 0, feeding already-normalized
        // inputs reduces the mechanism to (1/N) Q (K^T V) per head.
        let mut s = Stream::new(61);
        let g: Graph<f64> = Graph::new();
        let (n, d, j) = (10, 8, 2);
        let affine = identity_affine(&g, d);
        let norm = |raw: Vec<f64>| {
            let t = g.constant(raw, &[1, n, d]).unwrap();
            seq_normalize_affine(&t, &affine.gamma_q, &affine.beta_q, 0.0, None).unwrap()
        };
        let q = norm(randn(&mut s, n * d));
        let k = norm(randn(&mut s, n * d));
        let v = norm(randn(&mut s, n * d));
        let got = seqnorm_attention(&q, &k, &v, &affine, j, 0.0, None).unwrap().to_vec();

        let (qd, kd, vd) = (q.to_vec(), k.to_vec(), v.to_vec());
        let dh = d / j;
        let mut want = vec![0.0; n * d];
        for h in 0..j {
            for i in 0..n {
                for f in 0..dh {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let mut dot = 0.0;
                        for e in 0..dh {
                            dot += qd[i * d + h * dh + e] * kd[t * d + h * dh + e];
                        }
                        // (Q K^T) V accumulated in the quadratic order
                        acc += dot * vd[t * d + h * dh + f];
                    }
                    want[i * d + h * dh + f] = acc / n as f64;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn seqnorm_linear_order_matches_quadratic_oracle() {
        let mut s = Stream::new(6);
        let g: Graph<f64> = Graph::new();
        let (n, d, j) = (12, 8, 2);
        let affine = identity_affine(&g, d);
        let q = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let k = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let v = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let got = seqnorm_attention(&q, &k, &v, &affine, j, 1e-5, None).unwrap().to_vec();

        // quadratic-order oracle on the same normalized tensors
        let qd = seq_normalize_affine(&q, &affine.gamma_q, &affine.beta_q, 1e-5, None)
            .unwrap()
            .to_vec();
        let kd = seq_normalize_affine(&k, &affine.gamma_k, &affine.beta_k, 1e-5, None)
            .unwrap()
            .to_vec();
        let vd = seq_normalize_affine(&v, &affine.gamma_v, &affine.beta_v, 1e-5, None)
            .unwrap()
            .to_vec();
        let dh = d / j;
        let mut want = vec![0.0; n * d];
        for h in 0..j {
            for i in 0..n {
                for f in 0..dh {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let mut dot = 0.0;
                        for e in 0..dh {
                            dot += qd[i * d + h * dh + e] * kd[t * d + h * dh + e];
                        }
                        acc += dot * vd[t * d + h * dh + f];
                    }
                    want[i * d + h * dh + f] = acc / n as f64;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn sima_l1_normalization_examples() {
        let g: Graph<f64> = Graph::new();
        // feature column [2, -2]: l1 norm 4 -> [0.5, -0.5]
        let q = g.constant(vec![2.0, -2.0], &[1, 2, 1]).unwrap();
        let k = g.constant(vec![1.0, 1.0], &[1, 2, 1]).unwrap();
        let v = g.constant(vec![1.0, 1.0], &[1, 2, 1]).unwrap();
        let out = sima_attention(&q, &k, &v, 1, 1e-5, None).unwrap().to_vec();
        // k columns l1 = 2 -> kn = [0.5, 0.5]; kv = 0.5+0.5 = 1; out = qn * 1
        assert!((out[0] - 0.5).abs() <= 1e-12, "{out:?}");
        assert!((out[1] + 0.5).abs() <= 1e-12, "{out:?}");

        // all-zero Q column stays zero, no NaN
        let qz = g.constant(vec![0.0, 0.0], &[1, 2, 1]).unwrap();
        let out = sima_attention(&qz, &k, &v, 1, 1e-5, None).unwrap().to_vec();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn sima_linear_order_matches_quadratic_oracle() {
        let mut s = Stream::new(7);
        let g: Graph<f64> = Graph::new();
        let (n, d, j) = (10, 8, 2);
        let q = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let k = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let v = g.constant(randn(&mut s, n * d), &[1, n, d]).unwrap();
        let got = sima_attention(&q, &k, &v, j, 1e-5, None).unwrap().to_vec();

        let l1 = |t: &Tensor<f64>| {
            let data = t.to_vec();
            let mut out = data.clone();
            for f in 0..d {
                let norm: f64 = (0..n).map(|i| data[i * d + f].abs()).sum();
                let denom = norm.max(1e-5);
                for i in 0..n {
                    out[i * d + f] = data[i * d + f] / denom;
                }
            }
            out
        };
        let qd = l1(&q);
        let kd = l1(&k);
        let vd = v.to_vec();
        let dh = d / j;
        let mut want = vec![0.0; n * d];
        for h in 0..j {
            for i in 0..n {
                for f in 0..dh {
                    let mut acc = 0.0;
                    for t in 0..n {
                        let mut dot = 0.0;
                        for e in 0..dh {
                            dot += qd[i * d + h * dh + e] * kd[t * d + h * dh + e];
                        }
                        acc += dot * vd[t * d + h * dh + f];
                    }
                    want[i * d + h * dh + f] = acc;
                }
            }
        }
        for (a, b) in got.iter().zip(&want) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn masked_attention_ignores_padding() {
        // Padding a sequence must not change the outputs at real positions.
        let mut s = Stream::new(62);
        let g: Graph<f64> = Graph::new();
        let (n_real, n_pad, d, j) = (5, 8, 8, 2);
        let data = randn(&mut s, n_real * d);
        let affine = identity_affine(&g, d);

        let q = g.constant(data.clone(), &[1, n_real, d]).unwrap();
        let base = seqnorm_attention(&q, &q, &q, &affine, j, 1e-5, None).unwrap().to_vec();

        let mut padded = data.clone();
        padded.extend(vec![9.9; (n_pad - n_real) * d]);
        let qp = g.constant(padded, &[1, n_pad, d]).unwrap();
        let mut mvec = vec![1.0; n_real];
        mvec.extend(vec![0.0; n_pad - n_real]);
        let mask = g.constant(mvec, &[1, n_pad]).unwrap();
        let out = seqnorm_attention(&qp, &qp, &qp, &affine, j, 1e-5, Some(&mask))
            .unwrap()
            .to_vec();

        for i in 0..n_real * d {
            let rel = (base[i] - out[i]).abs() / base[i].abs().max(1.0);
            assert!(rel <= 1e-12, "row {} differs: {} vs {}", i / d, base[i], out[i]);
        }
    }

    #[test]
    fn masked_vanilla_ignores_padding() {
        let mut s = Stream::new(63);
        let g: Graph<f64> = Graph::new();
        let (n_real, n_pad, d, j) = (4, 7, 8, 2);
        let data = randn(&mut s, n_real * d);
        let q = g.constant(data.clone(), &[1, n_real, d]).unwrap();
        let base = vanilla_attention(&q, &q, &q, j, None).unwrap().to_vec();

        let mut padded = data.clone();
        padded.extend(vec![3.3; (n_pad - n_real) * d]);
        let qp = g.constant(padded, &[1, n_pad, d]).unwrap();
        let mut mvec = vec![1.0; n_real];
        mvec.extend(vec![0.0; n_pad - n_real]);
        let mask = g.constant(mvec, &[1, n_pad]).unwrap();
        let out = vanilla_attention(&qp, &qp, &qp, j, Some(&mask)).unwrap().to_vec();

        for i in 0..n_real * d {
            let rel = (base[i] - out[i]).abs() / base[i].abs().max(1.0);
            assert!(rel <= 1e-12, "{} vs {}", base[i], out[i]);
        }
    }
}
