//! Finite-difference gradient verification.
//!
//! The numeric side is a central difference (f(x+h) - f(x-h)) / 2h on a
//! freshly rebuilt forward pass, so it never touches the backward rules
//! it is checking. Relative error uses a floored denominator
//! max(|analytic|, |numeric|, floor) to stay meaningful for near-zero
//! gradients; at f64 with h = 1e-5 a correct implementation lands around
//! 1e-9, a wrong rule lands at O(1).

use indexmap::IndexMap;

use crate::attention::{self, Mechanism, SeqNormAffine};
use crate::error::Result;
use crate::ops;
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::scalar::Element;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckSettings {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { step: 1e-5, tolerance: 1e-6, floor: 1e-3 }
    }
}

impl GradCheckSettings {
    /// Looser profile for single-precision checks, where the central
    /// difference itself carries O(1e-3) rounding noise.
    pub fn f32_profile() -> Self {
        GradCheckSettings { step: 1e-2, tolerance: 5e-2, floor: 1e-2 }
    }
}

#[derive(Clone, Debug)]
pub struct WorstCase {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: usize,
    pub worst: Option<WorstCase>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }

    fn record(&mut self, parameter: &str, index: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checks += 1;
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = Some(WorstCase {
                parameter: parameter.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Checks a scalar-valued graph builder against central differences on
/// every element of every input, at the precision of `T`.
pub fn check_fn<T: Element>(
    inputs: &[(Vec<f64>, Vec<usize>)],
    build: impl Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let cast = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64(x).unwrap()).collect() };
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let g = Graph::new();
        let leaves: Vec<Tensor<T>> = values
            .iter()
            .zip(inputs)
            .map(|(v, (_, shape))| g.leaf(cast(v), shape, false))
            .collect::<Result<_>>()?;
        Ok(build(&g, &leaves)?.item().to_f64().unwrap())
    };

    // analytic pass
    let g = Graph::new();
    let leaves: Vec<Tensor<T>> = inputs
        .iter()
        .map(|(v, shape)| g.leaf(cast(v), shape, true))
        .collect::<Result<_>>()?;
    let loss = build(&g, &leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .map(|g| g.iter().map(|v| v.to_f64().unwrap()).collect())
                .unwrap_or_else(|| vec![0.0; l.numel()])
        })
        .collect();

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut report = GradCheckReport::default();
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.len() {
            let orig = values[which][idx];
            values[which][idx] = orig + settings.step;
            let up = eval(&values)?;
            values[which][idx] = orig - settings.step;
            let down = eval(&values)?;
            values[which][idx] = orig;
            let numeric = (up - down) / (2.0 * settings.step);
            report.record(&format!("input{which}"), idx, grad[idx], numeric, settings.floor);
        }
    }
    Ok(report)
}

/// Checks already-computed analytic gradients of named parameters against
/// central differences of `loss_of` (which must rebuild the forward pass
/// from the store on every call).
pub fn check_param_grads<T: Element>(
    store: &ParamStore<T>,
    grads: &IndexMap<String, Vec<T>>,
    mut loss_of: impl FnMut(&ParamStore<T>) -> Result<f64>,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let step = T::from_f64(settings.step).unwrap();
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let n = store.get(&name).unwrap().data.len();
        for idx in 0..n {
            let analytic = grads
                .get(&name)
                .map(|g| g[idx].to_f64().unwrap())
                .unwrap_or(0.0);
            let orig = store.get(&name).unwrap().data[idx];
            work.get_mut(&name).unwrap().data[idx] = orig + step;
            let up = loss_of(&work)?;
            work.get_mut(&name).unwrap().data[idx] = orig - step;
            let down = loss_of(&work)?;
            work.get_mut(&name).unwrap().data[idx] = orig;
            let numeric = (up - down) / (2.0 * settings.step);
            report.record(&name, idx, analytic, numeric, settings.floor);
        }
    }
    Ok(report)
}

fn randn(stream: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| stream.gaussian()).collect()
}

/// Weighted sum against fixed random weights; a plain sum lets too many
/// wrong gradients cancel.
fn probe_loss<T: Element>(out: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let mut s = Stream::new(seed ^ 0xA5A5_A5A5);
    let shape = out.shape();
    let weights: Vec<T> =
        (0..out.numel()).map(|_| T::from_f64(s.gaussian()).unwrap()).collect();
    let wt = out.graph_handle().constant(weights, &shape)?;
    out.mul(&wt)?.sum_all()
}

#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

/// Gradient checks for every differentiable core op, one seeded random
/// case per op.
pub fn check_core_ops<T: Element>(
    seed: u64,
    settings: &GradCheckSettings,
) -> Result<Vec<NamedReport>> {
    let mut out = Vec::new();
    let mut s = Stream::new(seed);

    #[allow(clippy::type_complexity)]
    let mut run = |name: &str,
                   inputs: Vec<(Vec<f64>, Vec<usize>)>,
                   build: Box<dyn Fn(&Graph<T>, &[Tensor<T>]) -> Result<Tensor<T>>>|
     -> Result<()> {
        let report = check_fn::<T>(&inputs, |g, t| build(g, t), settings)?;
        out.push(NamedReport { name: name.to_string(), report });
        Ok(())
    };

    let shape23 = vec![2usize, 3];
    let a = randn(&mut s, 6);
    let b = randn(&mut s, 6);
    run(
        "add",
        vec![(a.clone(), shape23.clone()), (b.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].add(&t[1])?, 1)),
    )?;
    run(
        "sub",
        vec![(a.clone(), shape23.clone()), (b.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].sub(&t[1])?, 2)),
    )?;
    run(
        "mul_broadcast",
        vec![(a.clone(), shape23.clone()), (randn(&mut s, 3), vec![3])],
        Box::new(|_, t| probe_loss(&t[0].mul(&t[1])?, 3)),
    )?;
    let denom: Vec<f64> = randn(&mut s, 3).iter().map(|v| v.abs() + 0.7).collect();
    run(
        "div_broadcast",
        vec![(a.clone(), shape23.clone()), (denom, vec![3])],
        Box::new(|_, t| probe_loss(&t[0].div(&t[1])?, 4)),
    )?;
    run(
        "scale",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].scale(T::from_f64(-1.75).unwrap()), 5)),
    )?;
    run(
        "add_scalar",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].add_scalar(T::from_f64(0.3).unwrap()), 6)),
    )?;
    run(
        "exp",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].exp(), 7)),
    )?;
    run(
        "tanh",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].tanh(), 8)),
    )?;
    run(
        "gelu",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].gelu(), 9)),
    )?;
    let positive: Vec<f64> = randn(&mut s, 6).iter().map(|v| v.abs() + 0.5).collect();
    run(
        "sqrt",
        vec![(positive.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].sqrt(), 10)),
    )?;
    let off_zero: Vec<f64> = randn(&mut s, 6)
        .iter()
        .map(|v| if v.abs() < 0.2 { v.signum() * 0.4 } else { *v })
        .collect();
    run(
        "abs",
        vec![(off_zero.clone(), shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].abs(), 11)),
    )?;
    run(
        "clamp_min",
        vec![(off_zero, shape23.clone())],
        Box::new(|_, t| probe_loss(&t[0].clamp_min(T::from_f64(0.1).unwrap()), 12)),
    )?;
    run(
        "matmul",
        vec![(randn(&mut s, 2 * 3 * 4), vec![2, 3, 4]), (randn(&mut s, 4 * 5), vec![4, 5])],
        Box::new(|_, t| probe_loss(&t[0].matmul_scaled(&t[1], T::from_f64(0.5).unwrap())?, 13)),
    )?;
    run(
        "matmul_batched",
        vec![(randn(&mut s, 2 * 3 * 4), vec![2, 3, 4]), (randn(&mut s, 2 * 4 * 2), vec![2, 4, 2])],
        Box::new(|_, t| probe_loss(&t[0].matmul(&t[1])?, 14)),
    )?;
    run(
        "reshape_transpose",
        vec![(randn(&mut s, 24), vec![2, 3, 4])],
        Box::new(|_, t| probe_loss(&t[0].transpose(0, 2)?.reshape(&[12, 2])?, 15)),
    )?;
    run(
        "expand",
        vec![(randn(&mut s, 3), vec![1, 3])],
        Box::new(|_, t| probe_loss(&t[0].expand(&[4, 3])?, 16)),
    )?;
    run(
        "sum_axis",
        vec![(randn(&mut s, 24), vec![2, 3, 4])],
        Box::new(|_, t| probe_loss(&t[0].sum_axis(1, false)?, 17)),
    )?;
    run(
        "mean_axis",
        vec![(randn(&mut s, 24), vec![2, 3, 4])],
        Box::new(|_, t| probe_loss(&t[0].mean_axis(2, true)?, 18)),
    )?;
    run(
        "mean_all",
        vec![(a.clone(), shape23.clone())],
        Box::new(|_, t| t[0].mul(&t[0])?.mean_all()),
    )?;
    run(
        "softmax",
        vec![(randn(&mut s, 12), vec![3, 4])],
        Box::new(|_, t| probe_loss(&t[0].softmax(1)?, 19)),
    )?;
    run(
        "log_softmax",
        vec![(randn(&mut s, 12), vec![3, 4])],
        Box::new(|_, t| probe_loss(&t[0].log_softmax(1)?, 20)),
    )?;
    run(
        "slice_concat",
        vec![(randn(&mut s, 12), vec![1, 3, 4]), (randn(&mut s, 8), vec![1, 2, 4])],
        Box::new(|_, t| {
            let joined = ops::concat(&[&t[0], &t[1]], 1)?;
            probe_loss(&joined.slice(1, 1, 3)?, 21)
        }),
    )?;
    run(
        "seq_stats",
        vec![(randn(&mut s, 20), vec![5, 4])],
        Box::new(|_, t| {
            let (mean, var) = ops::seq_stats(&t[0])?;
            probe_loss(&mean, 22)?.add(&probe_loss(&var, 23)?)
        }),
    )?;
    run(
        "seq_normalize_affine",
        vec![
            (randn(&mut s, 6 * 4), vec![1, 6, 4]),
            (randn(&mut s, 4), vec![4]),
            (randn(&mut s, 4), vec![4]),
        ],
        Box::new(|_, t| {
            probe_loss(&attention::seq_normalize_affine(&t[0], &t[1], &t[2], 1e-3, None)?, 24)
        }),
    )?;
    Ok(out)
}

/// Gradient check of one bare attention mechanism on random Q, K, V
/// (plus the affine parameters for the softmax-free variant).
pub fn check_mechanism<T: Element>(
    mechanism: Mechanism,
    seed: u64,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut s = Stream::new(seed);
    let (n, d, heads) = (5, 6, 2);
    let eps = 1e-3;
    let mut inputs = vec![
        (randn(&mut s, n * d), vec![1, n, d]),
        (randn(&mut s, n * d), vec![1, n, d]),
        (randn(&mut s, n * d), vec![1, n, d]),
    ];
    if mechanism == Mechanism::SeqNormFree {
        for i in 0..6 {
            let base = if i % 2 == 0 { 1.0 } else { 0.0 };
            let jitter: Vec<f64> = randn(&mut s, d).iter().map(|v| base + 0.1 * v).collect();
            inputs.push((jitter, vec![d]));
        }
    }
    check_fn::<T>(
        &inputs,
        move |_, t| {
            let out = match mechanism {
                Mechanism::Vanilla => attention::vanilla_attention(&t[0], &t[1], &t[2], heads, None)?,
                Mechanism::SeqNormFree => {
                    let affine = SeqNormAffine {
                        gamma_q: t[3].clone(),
                        beta_q: t[4].clone(),
                        gamma_k: t[5].clone(),
                        beta_k: t[6].clone(),
                        gamma_v: t[7].clone(),
                        beta_v: t[8].clone(),
                    };
                    attention::seqnorm_attention(&t[0], &t[1], &t[2], &affine, heads, eps, None)?
                }
                Mechanism::SimA => attention::sima_attention(&t[0], &t[1], &t[2], heads, eps, None)?,
            };
            probe_loss(&out, 99)
        },
        settings,
    )
}

/// Tiny two-layer model used for end-to-end parameter gradient checks.
pub fn small_model_config(mechanism: Mechanism) -> crate::vit::ViTConfig {
    crate::vit::ViTConfig {
        input: crate::vit::InputKind::Image2d { channels: 1, height: 16, width: 16, patch: [8, 8] },
        model_dim: 16,
        attention: crate::attention::AttentionConfig::new(mechanism, 16, 8, 2),
        layers: 2,
        mlp_dim: 16,
        num_classes: 2,
        max_sequence: 4,
    }
}

/// Verifies every parameter gradient of a two-layer model under the given
/// mechanism against central differences of the cross-entropy loss.
pub fn check_model<T: Element>(
    mechanism: Mechanism,
    seed: u64,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    use crate::loss::cross_entropy;
    use crate::params::collect_grads;
    use crate::vit::{TokenBatch, ViTModel};

    let cfg = small_model_config(mechanism);
    let model: ViTModel<T> = ViTModel::new(cfg.clone(), seed)?;
    let mut s = Stream::new(seed ^ 0x5151);
    let images: Vec<Vec<f32>> =
        (0..2).map(|_| (0..256).map(|_| s.gaussian() as f32).collect()).collect();
    let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
    let batch = TokenBatch::<T>::from_images(&cfg.input, &refs)?;
    let labels = [0usize, 1];

    let graph = Graph::new();
    let pass = model.forward(&graph, &batch, true)?;
    let loss = cross_entropy(&pass.logits, &labels)?;
    loss.backward()?;
    let grads = collect_grads(&pass.bound);

    let config = cfg.clone();
    check_param_grads(
        &model.params,
        &grads,
        move |store| {
            let probe_model = ViTModel { config: config.clone(), params: store.clone() };
            let g = Graph::new();
            let pass = probe_model.forward(&g, &batch, false)?;
            Ok(cross_entropy(&pass.logits, &labels)?.item().to_f64().unwrap())
        },
        settings,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_core_ops_pass_gradcheck() {
        let settings = GradCheckSettings::default();
        for check in check_core_ops::<f64>(1234, &settings).unwrap() {
            assert!(
                check.report.passed(settings.tolerance),
                "{} failed: max rel {:.3e} worst {:?}",
                check.name,
                check.report.max_rel_error,
                check.report.worst
            );
        }
    }

    #[test]
    fn core_ops_pass_on_twenty_seeds() {
        let settings = GradCheckSettings::default();
        for seed in 0..20 {
            for check in check_core_ops::<f64>(seed, &settings).unwrap() {
                assert!(
                    check.report.passed(settings.tolerance),
                    "seed {seed}, {}: max rel {:.3e}",
                    check.name,
                    check.report.max_rel_error
                );
            }
        }
    }

    #[test]
    fn mechanisms_pass_gradcheck() {
        let settings = GradCheckSettings::default();
        for mech in Mechanism::ALL {
            let report = check_mechanism::<f64>(mech, 2, &settings).unwrap();
            assert!(
                report.passed(settings.tolerance),
                "{mech}: max rel {:.3e} worst {:?}",
                report.max_rel_error,
                report.worst
            );
        }
    }

    #[test]
    fn kinked_function_is_flagged() {
        let settings = GradCheckSettings::default();
        let smooth = vec![(vec![0.4, -0.2], vec![2usize])];
        let ok = check_fn::<f64>(&smooth, |_, t| t[0].scale(2.0).sum_all(), &settings).unwrap();
        assert!(ok.passed(settings.tolerance));

        // clamp_min exactly at the clamp boundary: analytic subgradient
        // is 0 there, the central difference sees 0.5 — the checker must
        // notice the disagreement.
        let kink = vec![(vec![0.1, 0.1], vec![2usize])];
        let bad = check_fn::<f64>(&kink, |_, t| t[0].clamp_min(0.1).sum_all(), &settings).unwrap();
        assert!(!bad.passed(settings.tolerance));
    }
}
