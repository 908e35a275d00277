//! Adam with decoupled weight decay, plus a finite-difference gradient checker.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, weight_decay: f64, params: &[Tensor]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    /// One bias-corrected update. `grads[i] == None` means a zero gradient.
    ///
    /// Any non-finite gradient aborts the whole step (no parameter is
    /// touched) and reports the offending parameter by name.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<Tensor>],
        names: &[String],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        assert_eq!(params.len(), grads.len(), "gradient/parameter count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                assert_eq!(g.shape, params[i].shape, "gradient shape mismatch for {}", names[i]);
                if !g.is_finite() {
                    return Err(Error::non_finite(format!("gradient of `{}`", names[i])));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    // zero gradient: moments decay, parameter moves only
                    // under weight decay
                    zero = Tensor::zeros(p.shape.clone());
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps));
                if self.weight_decay != 0.0 {
                    p.data[j] -= self.lr * self.weight_decay * p.data[j];
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares `analytic` gradients against central finite differences of
/// `loss` at `params`, sampling up to `max_coords_per_tensor` coordinates
/// per tensor (all of them when the tensor is small enough).
///
/// Relative error per coordinate: |a - fd| / max(|a|, |fd|, 1e-8).
/// With no parameters the report is trivially zero.
pub fn grad_check<F>(
    mut loss: F,
    params: &[Tensor],
    analytic: &[Tensor],
    h: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient count mismatch");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (pi, p) in params.iter().enumerate() {
        assert_eq!(p.shape, analytic[pi].shape, "analytic gradient shape mismatch");
        let n = p.numel();
        let coords: Vec<usize> = if n <= max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, max_coords_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        for c in coords {
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + h;
            let up = loss(&work)?;
            work[pi].data[c] = orig - h;
            let down = loss(&work)?;
            work[pi].data[c] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic[pi].data[c];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, coords_checked: checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn first_step_with_constant_gradient_moves_by_lr_sign() {
        // at t=1, mhat = g and vhat = g^2, so the update is lr*sign(g) up to eps
        let mut params = vec![Tensor::new(vec![3], vec![1.0, 2.0, 3.0])];
        let grads = vec![Some(Tensor::new(vec![3], vec![0.5, -2.0, 4.0]))];
        let names = vec!["p".to_string()];
        let mut adam = AdamState::new(0.1, 0.0, &params);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        adam.step(&mut refs, &grads, &names).unwrap();
        let expect = [1.0 - 0.1, 2.0 + 0.1, 3.0 - 0.1];
        for (got, want) in params[0].data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn zero_gradient_is_a_noop_on_parameters() {
        let mut params = vec![Tensor::new(vec![2], vec![0.7, -0.3])];
        let before = params[0].clone();
        let names = vec!["p".to_string()];
        let mut adam = AdamState::new(0.1, 0.0, &params);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        adam.step(&mut refs, &[None], &names).unwrap();
        adam.step(&mut refs, &[Some(Tensor::zeros(vec![2]))], &names).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn quadratic_descends_for_two_steps() {
        // scalar simulation oracle on f(x) = x^2 / 2, grad = x, from x = 1
        let mut params = vec![Tensor::new(vec![1], vec![1.0])];
        let names = vec!["x".to_string()];
        let mut adam = AdamState::new(0.1, 0.0, &params);
        let mut prev = params[0].data[0];
        for _ in 0..2 {
            let g = Some(Tensor::new(vec![1], vec![params[0].data[0]]));
            let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
            adam.step(&mut refs, &[g], &names).unwrap();
            let x = params[0].data[0];
            assert!(x < prev, "x failed to decrease: {x} >= {prev}");
            prev = x;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut params = vec![Tensor::new(vec![1], vec![1.0]), Tensor::new(vec![1], vec![2.0])];
        let names = vec!["a".to_string(), "b".to_string()];
        let before = params.clone();
        let mut adam = AdamState::new(0.1, 0.0, &params);
        let grads = vec![
            Some(Tensor::new(vec![1], vec![0.1])),
            Some(Tensor::new(vec![1], vec![f64::NAN])),
        ];
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        match adam.step(&mut refs, &grads, &names) {

            Err(Error::NonFinite { op }) => assert!(op.contains("`b`"), "{op}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        // aborted atomically
        assert_eq!(params, before);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn grad_check_on_linear_regression_is_tight() {
        // loss = ||x@w - y||^2 has a closed-form gradient; the tape's
        // analytic gradient must agree with central differences to 1e-7
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect());
        let y = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64) * 0.2 - 0.7).collect());
        let w0 = Tensor::new(vec![3, 2], (0..6).map(|i| (i as f64) * 0.05 - 0.1).collect());

        let eval = |params: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let wv = tape.input(params[0].clone());
            let yv = tape.input(y.clone());
            let pred = tape.matmul(xv, wv);
            let resid = tape.sub(pred, yv);
            let l = tape.sum_sq(resid);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let wv = tape.param(w0.clone());
        let yv = tape.input(y.clone());
        let pred = tape.matmul(xv, wv);
        let resid = tape.sub(pred, yv);
        let l = tape.sum_sq(resid);
        let mut grads = tape.backward(l).unwrap();
        let analytic = vec![grads.take(wv).unwrap()];

        let report = grad_check(eval, &[w0], &analytic, 1e-5, 1000, 7).unwrap();
        assert!(report.max_rel_err < 1e-7, "rel err {}", report.max_rel_err);
        assert_eq!(report.coords_checked, 6);
    }

    #[test]
    fn grad_check_with_no_parameters_returns_zero() {
        let report = grad_check(|_| Ok(1.0), &[], &[], 1e-5, 10, 0).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.coords_checked, 0);
    }
}
