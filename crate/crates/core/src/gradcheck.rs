//! Central finite-difference verification of the deformable convolution
//! backward pass.
//!
//! Each trial draws a `1 x 2 x 5 x 5` feature map, a `2 x 2 x 3 x 3` kernel,
//! an offset field and an upstream gradient `g`, and differentiates the
//! scalar loss `L = sum(g * forward(...))`. The forward used here is the
//! `f64` evaluation of the same deformable sampling, so the difference
//! quotient is limited only by the step size, not by `f32` output rounding.
//!
//! Offsets are jittered away from integers: the bilinear interpolant has
//! kinks there and a central difference straddling one is meaningless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::deform::{deform_conv_backward, deform_forward_f64, OffsetField, KERNEL};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TRIALS: usize = 50;
pub const TOL_INPUT: f64 = 1e-3;
pub const TOL_WEIGHTS: f64 = 1e-3;
pub const TOL_OFFSETS: f64 = 1e-2;

/// Minimum distance of every offset from the nearest integer.
const KINK_MARGIN: f32 = 0.05;
/// Denominator floor for the relative error of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub eps: f64,
    pub trials: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            eps: DEFAULT_EPS,
            trials: DEFAULT_TRIALS,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub eps: f64,
    pub trials: usize,
    pub trials_passed: usize,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

/// One randomly drawn problem.
#[derive(Clone, Debug)]
pub struct Instance {
    pub input: Tensor,
    pub weights: Tensor,
    pub offsets: OffsetField,
    pub grad_out: Tensor,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, w, out_c) = (2, 5, 5, 2);
        let input = Tensor::random_uniform(Shape::new(1, c, h, w), -1.0, 1.0, &mut rng);
        let weights = Tensor::random_uniform(Shape::new(out_c, c, KERNEL, KERNEL), -1.0, 1.0, &mut rng);
        let mut offsets = OffsetField::zeros(1, KERNEL, h, w);
        for v in offsets.tensor_mut().data_mut() {
            *v = jitter_off_integer(rng.random_range(-1.5..1.5));
        }
        let grad_out = Tensor::random_uniform(Shape::new(1, out_c, h, w), -1.0, 1.0, &mut rng);
        Instance {
            input,
            weights,
            offsets,
            grad_out,
        }
    }

    fn loss(&self, input: &Tensor, weights: &Tensor, offsets: &OffsetField) -> f64 {
        let out = deform_forward_f64(input, weights, offsets).expect("instance shapes are consistent");
        out.iter().zip(self.grad_out.data()).map(|(o, &g)| o * g as f64).sum()
    }
}

fn jitter_off_integer(v: f32) -> f32 {
    let frac = v - v.round();
    if frac.abs() < KINK_MARGIN {
        v + 2.0 * KINK_MARGIN * if frac < 0.0 { -1.0 } else { 1.0 }
    } else {
        v
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Max relative error between `analytic` and the central difference of
/// `loss` with respect to each element of `param`.
fn check_group(param: &Tensor, analytic: &Tensor, eps: f64, mut loss: impl FnMut(&Tensor) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = param.clone();
    for i in 0..param.data().len() {
        let v = param.data()[i];
        let plus = (v as f64 + eps) as f32;
        let minus = (v as f64 - eps) as f32;
        probe.data_mut()[i] = plus;
        let lp = loss(&probe);
        probe.data_mut()[i] = minus;
        let lm = loss(&probe);
        probe.data_mut()[i] = v;
        let numeric = (lp - lm) / (plus as f64 - minus as f64);
        worst = worst.max(rel_error(analytic.data()[i] as f64, numeric));
    }
    worst
}

/// `[input, weights, offsets]` max relative errors for one instance.
pub fn check_instance(inst: &Instance, eps: f64) -> Result<[f64; 3]> {
    let grads = deform_conv_backward(&inst.input, &inst.weights, &inst.offsets, &inst.grad_out)?;
    let e_in = check_group(&inst.input, &grads.grad_input, eps, |t| inst.loss(t, &inst.weights, &inst.offsets));
    let e_w = check_group(&inst.weights, &grads.grad_weights, eps, |t| inst.loss(&inst.input, t, &inst.offsets));
    let e_off = check_group(inst.offsets.tensor(), &grads.grad_offsets, eps, |t| {
        let off = OffsetField::new(t.clone(), KERNEL).expect("same shape");
        inst.loss(&inst.input, &inst.weights, &off)
    });
    Ok([e_in, e_w, e_off])
}

pub fn run(config: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(config.eps > 0.0 && config.eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", config.eps)));
    }
    if config.trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let tolerances = [TOL_INPUT, TOL_WEIGHTS, TOL_OFFSETS];
    let mut worst = [0.0f64; 3];
    let mut trials_passed = 0;
    for t in 0..config.trials {
        let inst = Instance::random(config.seed.wrapping_add(t as u64));
        let errs = check_instance(&inst, config.eps)?;
        if errs.iter().zip(&tolerances).all(|(e, tol)| e <= tol) {
            trials_passed += 1;
        }
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let names = ["grad_input", "grad_weights", "grad_offsets"];
    Ok(GradCheckReport {
        seed: config.seed,
        eps: config.eps,
        trials: config.trials,
        trials_passed,
        groups: (0..3)
            .map(|i| GroupReport {
                name: names[i],
                max_rel_error: worst[i],
                tolerance: tolerances[i],
                passed: worst[i] <= tolerances[i],
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_keeps_offsets_off_integers() {
        for v in [-1.0f32, -0.02, 0.0, 0.049, 0.5, 1.97, 1.03] {
            let j = jitter_off_integer(v);
            assert!((j - j.round()).abs() >= KINK_MARGIN * 0.99, "{v} -> {j}");
        }
    }

    #[test]
    fn single_trial_passes() {
        let report = run(&GradCheckConfig {
            seed: 3,
            eps: 1e-3,
            trials: 1,
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.trials_passed, 1);
    }

    #[test]
    fn rejects_non_positive_eps() {
        for eps in [0.0, -1e-3, f64::NAN] {
            let cfg = GradCheckConfig {
                eps,
                ..Default::default()
            };
            assert!(matches!(run(&cfg), Err(Error::InvalidArgument(_))));
        }
    }
}
