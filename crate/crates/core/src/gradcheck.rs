//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent
//! of the backward rules it checks. Coordinates whose `±h` stencil crosses a
//! relu/leaky-relu/clamp branch are skipped: the function is not
//! differentiable across the stencil there and a difference quotient says
//! nothing about the analytic gradient.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::Parameters;
use crate::tensor::{ParamKey, Tape, Var};

pub mod suite;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, relative to the largest
    /// analytic gradient magnitude of the check.
    pub relative_floor: f64,
    /// Cap on coordinates checked per tensor; larger tensors are subsampled.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            relative_floor: 1e-3,
            max_coords_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub worst: Option<(ParamKey, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

fn eval<P, F>(params: &P, f: &mut F) -> Result<(f64, u64)>
where
    F: for<'t> FnMut(&'t Tape<f64>, &P) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let loss = f(&tape, params)?;
    Ok((loss.item(), tape.kink_signature()))
}

/// Compares analytic gradients of `f` against central differences for every
/// trainable parameter of `params`.
pub fn check<P, F>(params: &mut P, cfg: &GradCheck, mut f: F) -> Result<GradCheckReport>
where
    P: Parameters<f64>,
    F: for<'t> FnMut(&'t Tape<f64>, &P) -> Result<Var<'t, f64>>,
{
    let (analytic, base_sig) = {
        let tape = Tape::new();
        let loss = f(&tape, params)?;
        let grads = tape.backward(loss)?;
        let mut analytic = Vec::new();
        params.visit(&mut |key, _, t| {
            if t.requires_grad() {
                let g = grads.param(key).map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec());
                analytic.push((key, g));
            }
        });
        (analytic, tape.kink_signature())
    };
    let scale = analytic
        .iter()
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (cfg.relative_floor * scale).max(1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    for (key, grad) in &analytic {
        let coords: Vec<usize> = if grad.len() <= cfg.max_coords_per_tensor {
            (0..grad.len()).collect()
        } else {
            sample(&mut rng, grad.len(), cfg.max_coords_per_tensor).into_vec()
        };
        for i in coords {
            let orig = params.param_mut(*key).expect("visited key").data()[i];
            params.param_mut(*key).expect("visited key").data_mut()[i] = orig + cfg.h;
            let plus = eval(params, &mut f);
            params.param_mut(*key).expect("visited key").data_mut()[i] = orig - cfg.h;
            let minus = eval(params, &mut f);
            params.param_mut(*key).expect("visited key").data_mut()[i] = orig;
            let ((fp, sp), (fm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((*key, i, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamList;
    use crate::tensor::Tensor;

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of x·detach(x) is reported as detach(x) only: half the truth.
        let mut p = ParamList(vec![Tensor::parameter(vec![3], vec![0.5, -1.0, 2.0]).unwrap()]);
        let report = check(&mut p, &GradCheck::default(), |tape, p| {
            let x = p.vars(tape)[0];
            Ok(x.mul(x.detach())?.sum())
        })
        .unwrap();
        assert!(!report.passed(1e-4));
        assert!((report.max_rel_err - 0.5).abs() < 1e-6);
    }

    #[test]
    fn skips_stencils_across_a_kink() {
        let mut p = ParamList(vec![Tensor::parameter(vec![2], vec![1e-6, 1.0]).unwrap()]);
        let report = check(&mut p, &GradCheck::default(), |tape, p| Ok(p.vars(tape)[0].relu()?.sum())).unwrap();
        assert_eq!(report.skipped_kinks, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed(1e-4));
    }
}
