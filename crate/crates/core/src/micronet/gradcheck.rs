//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each check draws a random input and a random output weighting `r`,
//! takes L = Σ r·f(x) as the scalar objective and compares the analytic
//! gradients of L (input and every trainable parameter) with central
//! differences. Errors are norm-wise relative: ‖a − n‖ / max(‖a‖, ‖n‖).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Bottleneck, C2f, ConvModule, ConvModuleSpec, Mode};
use super::loss::weighted_ce_loss;
use super::model::Head;
use super::tensor::{Param, Tensor};
use crate::error::Result;

/// Step used for the central differences.
pub const STEP: f64 = 1e-5;

/// A differentiable block with cached forward state.
pub trait Block {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor>;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params_mut(&mut self) -> Vec<&mut Param>;
}

impl Block for ConvModule {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        ConvModule::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        ConvModule::backward(self, grad)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        ConvModule::params_mut(self)
    }
}

impl Block for Bottleneck {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Bottleneck::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        Bottleneck::backward(self, grad)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Bottleneck::params_mut(self)
    }
}

impl Block for C2f {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        C2f::forward(self, x, Mode::Train)
    }
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        C2f::backward(self, grad)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        C2f::params_mut(self)
    }
}

impl Block for Head {
    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        Head::forward(self, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
    }
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        Head::backward(self, grad)
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Head::params_mut(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub block: String,
    /// Largest norm-wise relative error over the input and all parameters.
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

fn norm_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("non-empty shape")
}

fn objective<B: Block>(block: &mut B, x: &Tensor, r: &Tensor) -> Result<f64> {
    let y = block.forward(x)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Compares analytic and numeric gradients of Σ r·block(x).
pub fn check_block<B: Block>(
    name: &str,
    block: &mut B,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck> {
    check_block_with(name, block, x, STEP, true, rng)
}

/// As [`check_block`] with an explicit step; `with_input = false` checks the
/// parameter gradients only.
pub fn check_block_with<B: Block>(
    name: &str,
    block: &mut B,
    x: &Tensor,
    step: f64,
    with_input: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck> {
    let y = block.forward(x)?;
    let r = random_tensor(y.shape(), rng);
    for p in block.params_mut() {
        p.zero_grad();
    }
    let dx = block.backward(&r);
    let analytic_params: Vec<Vec<f64>> = block
        .params_mut()
        .into_iter()
        .filter(|p| p.trainable)
        .map(|p| p.grad.clone())
        .collect();

    let mut worst: f64 = 0.0;
    let mut entries = 0;

    if with_input {
        let mut numeric = vec![0.0; x.data().len()];
        let mut probe = x.clone();
        for (i, n) in numeric.iter_mut().enumerate() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let plus = objective(block, &probe, &r)?;
            probe.data_mut()[i] = orig - step;
            let minus = objective(block, &probe, &r)?;
            probe.data_mut()[i] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(norm_rel_error(dx.data(), &numeric));
        entries += numeric.len();
    }

    let trainable: Vec<usize> = block
        .params_mut()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.trainable)
        .map(|(i, _)| i)
        .collect();
    for (slot, &pi) in trainable.iter().enumerate() {
        let len = block.params_mut()[pi].value.len();
        let mut numeric = vec![0.0; len];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = block.params_mut()[pi].value[j];
            block.params_mut()[pi].value[j] = orig + step;
            let plus = objective(block, x, &r)?;
            block.params_mut()[pi].value[j] = orig - step;
            let minus = objective(block, x, &r)?;
            block.params_mut()[pi].value[j] = orig;
            *n = (plus - minus) / (2.0 * step);
        }
        worst = worst.max(norm_rel_error(&analytic_params[slot], &numeric));
        entries += len;
    }
    Ok(GradCheck {
        block: name.to_string(),
        max_rel_error: worst,
        entries,
    })
}

/// Gradient of the weighted cross-entropy with respect to the logits.
pub fn check_loss(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let n = rng.random_range(1..5);
    let k = rng.random_range(2..8);
    let logits = random_tensor([n, k, 1, 1], rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
    let (_, analytic) = weighted_ce_loss(&logits, &labels, &weights)?;
    let mut numeric = vec![0.0; logits.data().len()];
    let mut probe = logits.clone();
    for (i, g) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let plus = weighted_ce_loss(&probe, &labels, &weights)?.0;
        probe.data_mut()[i] = orig - STEP;
        let minus = weighted_ce_loss(&probe, &labels, &weights)?.0;
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * STEP);
    }
    Ok(GradCheck {
        block: "weighted_ce_loss".into(),
        max_rel_error: norm_rel_error(analytic.data(), &numeric),
        entries: numeric.len(),
    })
}

/// Batch norm parameters away from their identity initialisation so the
/// affine path is exercised.
fn perturb_bn(params: Vec<&mut Param>, rng: &mut ChaCha8Rng) {
    for p in params {
        if p.trainable && p.name.starts_with("bn.") {
            p.value
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
}

/// Runs one random trial for each differentiable block kind: a stride-2
/// conv module, a pointwise conv module, a bottleneck, a c2f block, the
/// head and the loss.
pub fn run_trial(seed: u64) -> Result<Vec<GradCheck>> {
    run_trial_with(seed, STEP)
}

pub fn run_trial_with(seed: u64, step: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(6);
    let batch = rng.random_range(2..4);

    let cin = rng.random_range(1..4);
    let cout = rng.random_range(1..4);
    let side = rng.random_range(3..7);
    let mut down = ConvModule::new(ConvModuleSpec::down(cin, cout), &mut rng);
    perturb_bn(down.params_mut(), &mut rng);
    let x = random_tensor([batch, cin, side, side], &mut rng);
    out.push(check_block_with(
        "conv_module_3x3_s2",
        &mut down,
        &x,
        step,
        true,
        &mut rng,
    )?);

    let mut point = ConvModule::new(ConvModuleSpec::pointwise(cin, cout), &mut rng);
    perturb_bn(point.params_mut(), &mut rng);
    out.push(check_block_with(
        "conv_module_1x1",
        &mut point,
        &x,
        step,
        true,
        &mut rng,
    )?);

    let c = rng.random_range(1..4);
    let mut bottleneck = Bottleneck::new(c, c, &mut rng);
    perturb_bn(bottleneck.params_mut(), &mut rng);
    let x = random_tensor([batch, c, side, side], &mut rng);
    out.push(check_block_with(
        "bottleneck",
        &mut bottleneck,
        &x,
        step,
        true,
        &mut rng,
    )?);

    let c = rng.random_range(4..7);
    let blocks = rng.random_range(1..4);
    let mut c2f = C2f::new(c, c, blocks, &mut rng);
    perturb_bn(c2f.params_mut(), &mut rng);
    let x = random_tensor([batch, c, side, side], &mut rng);
    out.push(check_block_with("c2f", &mut c2f, &x, step, true, &mut rng)?);

    let mut head = Head::new(
        c,
        rng.random_range(2..6),
        rng.random_range(2..8),
        0.0,
        &mut rng,
    );
    perturb_bn(head.params_mut(), &mut rng);
    out.push(check_block_with(
        "head", &mut head, &x, step, true, &mut rng,
    )?);

    out.push(check_loss(&mut rng)?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_blocks_pass_on_twenty_random_trials() {
        for seed in 0..20 {
            for check in run_trial(seed).unwrap() {
                assert!(
                    check.max_rel_error < 1e-6,
                    "seed {seed}: {} relative error {:e}",
                    check.block,
                    check.max_rel_error
                );
            }
        }
    }

    #[test]
    fn loss_gradient_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            assert!(check_loss(&mut rng).unwrap().max_rel_error < 1e-8);
        }
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        struct Broken(ConvModule);
        impl Block for Broken {
            fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
                self.0.forward(x, Mode::Train)
            }
            fn backward(&mut self, grad: &Tensor) -> Tensor {
                let mut g = self.0.backward(grad);
                g.data_mut().iter_mut().for_each(|v| *v *= 1.01);
                g
            }
            fn params_mut(&mut self) -> Vec<&mut Param> {
                self.0.params_mut()
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Broken(ConvModule::new(ConvModuleSpec::pointwise(2, 2), &mut rng));
        let x = random_tensor([2, 2, 3, 3], &mut rng);
        assert!(
            check_block("broken", &mut b, &x, &mut rng)
                .unwrap()
                .max_rel_error
                > 1e-3
        );
    }
}
