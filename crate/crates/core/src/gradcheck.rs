//! Central finite-difference audit of the reverse-mode gradients in `f64`.
//!
//! Each check builds a small random graph ending in a scalar loss, runs the
//! tape backward, and compares every analytic derivative (or a random subset
//! for large tensors) against `(L(θ + h) - L(θ - h)) / 2h`. Entries whose
//! perturbation flips a ReLU or changes a max-pool selection are skipped and
//! counted, since the function is not differentiable across that step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamSet, Tape, Var};
use crate::error::Result;
use crate::nets::{build_rnet, build_snet, DenseInit, NetConfig, Network, TrunkInit};
use crate::ops::Reduction;
use crate::phantom::derive_seed;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub step: f64,
    /// Entries checked per tensor; larger tensors are sampled.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { instances: 100, step: 1e-6, max_entries: 48, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest norm-wise relative error over all tensors and instances.
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE && self.checked > 0
    }
}

type Forward = dyn Fn(&ParamSet<f64>, &mut Tape<f64>, &[Var]) -> Result<Var>;

/// A differentiable function of parameters and inputs.
struct Subject<'a> {
    params: ParamSet<f64>,
    inputs: Vec<Tensor<f64>>,
    forward: &'a Forward,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn evaluate(s: &Subject, with_grad: bool) -> Result<(Tape<f64>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars = s
        .inputs
        .iter()
        .map(|x| if with_grad { tape.input_with_grad(x.clone()) } else { tape.input(x.clone()) })
        .collect::<Result<Vec<_>>>()?;
    let loss = (s.forward)(&s.params, &mut tape, &vars)?;
    Ok((tape, loss, vars))
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

enum Target {
    Param(usize),
    Input(usize),
}

/// One instance: returns (max relative error, checked, skipped).
fn check_subject(s: &mut Subject, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<(f64, usize, usize)> {
    s.params.zero_grad();
    let (tape, loss, vars) = evaluate(s, true)?;
    let base_sig = tape.kink_signature();
    let input_grads = tape.backward(loss, &mut s.params)?;
    let analytic_params: Vec<Vec<f64>> = s.params.iter().map(|p| p.grad.data().to_vec()).collect();
    let analytic_inputs: Vec<Vec<f64>> = vars
        .iter()
        .zip(&s.inputs)
        .map(|(v, x)| input_grads.get(*v).map_or_else(|| vec![0.0; x.len()], |g| g.data().to_vec()))
        .collect();
    drop(tape);

    let targets: Vec<Target> = (0..analytic_params.len())
        .map(Target::Param)
        .chain((0..s.inputs.len()).map(Target::Input))
        .collect();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for target in targets {
        let (len, analytic) = match target {
            Target::Param(i) => (analytic_params[i].len(), &analytic_params[i]),
            Target::Input(i) => (s.inputs[i].len(), &analytic_inputs[i]),
        };
        let entries: Vec<usize> = if len <= cfg.max_entries {
            (0..len).collect()
        } else {
            (0..cfg.max_entries).map(|_| rng.gen_range(0..len)).collect()
        };
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for e in entries {
            let probe = |delta: f64, s: &mut Subject| -> Result<(f64, u64)> {
                let slot = match target {
                    Target::Param(i) => &mut s.params.iter_mut().nth(i).expect("index in range").value.data_mut()[e],
                    Target::Input(i) => &mut s.inputs[i].data_mut()[e],
                };
                let original = *slot;
                *slot = original + delta;
                let out = evaluate(s, false);
                let slot = match target {
                    Target::Param(i) => &mut s.params.iter_mut().nth(i).expect("index in range").value.data_mut()[e],
                    Target::Input(i) => &mut s.inputs[i].data_mut()[e],
                };
                *slot = original;
                let (tape, loss, _) = out?;
                Ok((tape.value(loss).data()[0], tape.kink_signature()))
            };
            let (plus, sig_p) = probe(cfg.step, s)?;
            let (minus, sig_m) = probe(-cfg.step, s)?;
            if sig_p != base_sig || sig_m != base_sig {
                skipped += 1;
                continue;
            }
            a.push(analytic[e]);
            n.push((plus - minus) / (2.0 * cfg.step));
            checked += 1;
        }
        worst = worst.max(rel_error(&a, &n));
    }
    Ok((worst, checked, skipped))
}

fn run_check(
    name: &str,
    cfg: &GradCheckConfig,
    mut make: impl FnMut(&mut ChaCha8Rng) -> Result<(ParamSet<f64>, Vec<Tensor<f64>>)>,
    forward: &Forward,
) -> Result<CheckResult> {
    let mut result = CheckResult { name: name.to_string(), instances: cfg.instances, max_rel_error: 0.0, checked: 0, skipped: 0 };
    let stream = name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
    for i in 0..cfg.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ stream, i as u64));
        let (params, inputs) = make(&mut rng)?;
        let mut subject = Subject { params, inputs, forward };
        let (err, c, s) = check_subject(&mut subject, cfg, &mut rng)?;
        result.max_rel_error = result.max_rel_error.max(err);
        result.checked += c;
        result.skipped += s;
    }
    Ok(result)
}

fn params_of(list: Vec<(&str, Tensor<f64>)>) -> Result<ParamSet<f64>> {
    let mut p = ParamSet::new();
    for (name, t) in list {
        p.add(name, t)?;
    }
    Ok(p)
}

fn mse_to(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = normal(&mut rng, &shape, 1.0);
    tape.mse(y, &target, Reduction::Mean)
}

fn labels_for(shape: &[usize]) -> Vec<usize> {
    // deterministic pseudo-random labels so repeated forwards agree
    let (c, plane) = (shape[0], shape[1..].iter().product::<usize>());
    (0..plane).map(|i| (i * 7 + 3) % c).collect()
}

/// Checks every primitive operation.
pub fn check_primitives(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let conv = |padding: usize| {
        move |p: &ParamSet<f64>, t: &mut Tape<f64>, x: &[Var]| -> Result<Var> {
            let (k, b) = (p.id_of("k").expect("k"), p.id_of("b").expect("b"));
            let y = t.conv2d(p, x[0], k, b, padding)?;
            mse_to(t, y, 1)
        }
    };
    let conv_make = |r: &mut ChaCha8Rng| {
        Ok((params_of(vec![("k", normal(r, &[3, 2, 3, 3], 0.5)), ("b", normal(r, &[3], 0.5))])?, vec![normal(r, &[2, 5, 6], 1.0)]))
    };
    out.push(run_check("conv2d", cfg, conv_make, &conv(1))?);
    out.push(run_check("conv2d_valid", cfg, conv_make, &conv(0))?);
    out.push(run_check(
        "conv2d_1x1",
        cfg,
        |r| Ok((params_of(vec![("k", normal(r, &[4, 3, 1, 1], 0.5)), ("b", normal(r, &[4], 0.5))])?, vec![normal(r, &[3, 4, 4], 1.0)])),
        &conv(0),
    )?);
    let no_params = |shapes: Vec<Vec<usize>>| {
        move |r: &mut ChaCha8Rng| Ok((ParamSet::new(), shapes.iter().map(|s| normal(r, s, 1.0)).collect()))
    };
    out.push(run_check("maxpool2x2", cfg, no_params(vec![vec![2, 4, 6]]), &|_, t, x| {
        let y = t.maxpool2x2(x[0])?;
        mse_to(t, y, 2)
    })?);
    out.push(run_check("upsample2x2", cfg, no_params(vec![vec![2, 3, 3]]), &|_, t, x| {
        let y = t.upsample2x2(x[0])?;
        mse_to(t, y, 3)
    })?);
    out.push(run_check("relu", cfg, no_params(vec![vec![2, 4, 4]]), &|_, t, x| {
        let y = t.relu(x[0])?;
        mse_to(t, y, 4)
    })?);
    out.push(run_check("concat_channels", cfg, no_params(vec![vec![2, 3, 3], vec![1, 3, 3]]), &|_, t, x| {
        let y = t.concat_channels(x[0], x[1])?;
        mse_to(t, y, 5)
    })?);
    let dense = |p: &ParamSet<f64>, t: &mut Tape<f64>, x: &[Var]| -> Result<Var> {
        let y = t.dense(p, x[0], p.id_of("w").expect("w"), p.id_of("b").expect("b"))?;
        mse_to(t, y, 6)
    };
    out.push(run_check(
        "dense",
        cfg,
        |r| Ok((params_of(vec![("w", normal(r, &[4, 6], 0.5)), ("b", normal(r, &[4], 0.5))])?, vec![normal(r, &[6], 1.0)])),
        &dense,
    )?);
    out.push(run_check(
        "dense_batch",
        cfg,
        |r| Ok((params_of(vec![("w", normal(r, &[4, 6], 0.5)), ("b", normal(r, &[4], 0.5))])?, vec![normal(r, &[3, 6], 1.0)])),
        &dense,
    )?);
    out.push(run_check("reshape", cfg, no_params(vec![vec![2, 3, 4]]), &|_, t, x| {
        let y = t.reshape(x[0], &[4, 6])?;
        mse_to(t, y, 7)
    })?);
    out.push(run_check("stack", cfg, no_params(vec![vec![2, 3], vec![2, 3]]), &|_, t, x| {
        let y = t.stack(x)?;
        mse_to(t, y, 8)
    })?);
    out.push(run_check("softmax", cfg, no_params(vec![vec![4, 3, 3]]), &|_, t, x| {
        let y = t.softmax(x[0])?;
        mse_to(t, y, 9)
    })?);
    out.push(run_check("cross_entropy", cfg, no_params(vec![vec![4, 3, 3]]), &|_, t, x| {
        let labels = labels_for(t.value(x[0]).shape());
        let p = t.softmax(x[0])?;
        t.cross_entropy(p, &labels, Reduction::Mean)
    })?);
    out.push(run_check("softmax_cross_entropy", cfg, no_params(vec![vec![4, 3, 3]]), &|_, t, x| {
        let labels = labels_for(t.value(x[0]).shape());
        t.softmax_cross_entropy(x[0], &labels, Reduction::Sum)
    })?);
    out.push(run_check("mse", cfg, no_params(vec![vec![3, 2, 2]]), &|_, t, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = normal(&mut rng, &[3, 2, 2], 1.0);
        t.mse(x[0], &target, Reduction::Sum)
    })?);
    Ok(out)
}

/// Reduced-width network used by the audit: one level, two base channels,
/// 8x8 patches and three classes.
pub fn reduced_config() -> NetConfig {
    NetConfig {
        patch_height: 8,
        patch_width: 8,
        num_classes: 3,
        num_boundaries: 2,
        base_channels: 2,
        levels: 1,
        rnet_head_channels: 2,
        rnet_trunk_init: TrunkInit::He,
        dense_init: DenseInit::He,
        dense_bias_init: 0.5,
    }
}

fn net_check(name: &str, cfg: &GradCheckConfig, template: Network<f64>, input_shape: [usize; 3]) -> Result<CheckResult> {
    let skeleton = template.clone();
    let forward = move |p: &ParamSet<f64>, t: &mut Tape<f64>, x: &[Var]| -> Result<Var> {
        let mut net = skeleton.clone();
        net.params = p.clone();
        let y = net.forward(t, x[0])?;
        match net.kind() {
            crate::nets::NetKind::SNet => {
                let labels = labels_for(t.value(y).shape());
                t.softmax_cross_entropy(y, &labels, Reduction::Mean)
            }
            crate::nets::NetKind::RNet => mse_to(t, y, 11),
        }
    };
    let kind = template.kind();
    let net_cfg = template.config().clone();
    run_check(
        name,
        cfg,
        |r| {
            let seed = r.gen();
            let net = match kind {
                crate::nets::NetKind::SNet => build_snet::<f64>(&net_cfg, seed)?,
                crate::nets::NetKind::RNet => build_rnet::<f64>(&net_cfg, seed)?,
            };
            let x = match kind {
                crate::nets::NetKind::SNet => normal(r, &input_shape, 1.0),
                // probability-like non-negative inputs
                crate::nets::NetKind::RNet => normal(r, &input_shape, 1.0).map(f64::abs),
            };
            Ok((net.params, vec![x]))
        },
        &forward,
    )
}

fn rnet_batch_check(cfg: &GradCheckConfig) -> Result<CheckResult> {
    let net_cfg = reduced_config();
    let skeleton = build_rnet::<f64>(&net_cfg, 0)?;
    let forward = move |p: &ParamSet<f64>, t: &mut Tape<f64>, x: &[Var]| -> Result<Var> {
        let mut net = skeleton.clone();
        net.params = p.clone();
        let y = net.forward_batch(t, x)?;
        mse_to(t, y, 12)
    };
    let shape = [net_cfg.num_classes, net_cfg.patch_height, net_cfg.patch_width];
    run_check(
        "rnet_reduced_batch",
        cfg,
        |r| {
            let net = build_rnet::<f64>(&net_cfg, r.gen())?;
            Ok((net.params, (0..3).map(|_| normal(r, &shape, 1.0).map(f64::abs)).collect()))
        },
        &forward,
    )
}

/// Checks the composed reduced S-Net and R-Net, the latter also batched.
pub fn check_networks(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let net_cfg = reduced_config();
    let (h, w) = (net_cfg.patch_height, net_cfg.patch_width);
    Ok(vec![
        net_check("snet_reduced", cfg, build_snet::<f64>(&net_cfg, 0)?, [1, h, w])?,
        net_check("rnet_reduced", cfg, build_rnet::<f64>(&net_cfg, 0)?, [net_cfg.num_classes, h, w])?,
        rnet_batch_check(cfg)?,
    ])
}

pub fn check_all(cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let mut all = check_primitives(cfg)?;
    all.extend(check_networks(cfg)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig { instances: 3, ..GradCheckConfig::default() }
    }

    #[test]
    fn primitives_agree_with_differences() {
        for r in check_primitives(&quick()).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn reduced_networks_agree_with_differences() {
        for r in check_networks(&quick()).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x^3 recorded as reshape: the analytic gradient is the upstream
        // gradient while the function is cubic
        let cfg = quick();
        let wrong = |_: &ParamSet<f64>, t: &mut Tape<f64>, x: &[Var]| -> Result<Var> {
            let cubed = t.value(x[0]).map(|v| v * v * v);
            let y = t.input(cubed)?;
            let z = t.reshape(x[0], &[4])?;
            let s = t.stack(&[y, z])?;
            mse_to(t, s, 1)
        };
        let r = run_check(
            "wrong",
            &cfg,
            |rng| Ok((ParamSet::new(), vec![normal(rng, &[4], 1.0)])),
            &wrong,
        )
        .unwrap();
        assert!(!r.passed(), "{r:?}");
    }

    #[test]
    fn rel_error_is_scale_free() {
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
        let a = rel_error(&[1.0, 2.0], &[1.1, 2.0]);
        let b = rel_error(&[10.0, 20.0], &[11.0, 20.0]);
        assert!((a - b).abs() < 1e-12);
    }
}
