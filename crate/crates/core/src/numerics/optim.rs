use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Gradients, ParameterSet, Scalar, Tensor};

/// AdamW moments and hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: BTreeMap<String, Tensor<S>>,
    second: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self::with_betas(0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn with_betas(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, path: &str) -> Option<&Tensor<S>> {
        self.first.get(path)
    }

    pub fn second_moment(&self, path: &str) -> Option<&Tensor<S>> {
        self.second.get(path)
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
///
/// Parameters without an entry in `grads` are left untouched. Validation runs
/// before anything is written, so a failed call leaves `params` unchanged.
pub fn adamw_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    grads: &Gradients<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {name}: {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        g.ensure_finite(&format!("gradient {name}"))?;
    }
    let t = params.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    let (b1, b2) = (S::from_f64(state.beta1), S::from_f64(state.beta2));
    let (one_b1, one_b2) = (S::from_f64(1.0 - state.beta1), S::from_f64(1.0 - state.beta2));
    let (bc1, bc2) = (S::from_f64(bc1), S::from_f64(bc2));
    let eps = S::from_f64(state.eps);
    let lr_s = S::from_f64(lr);
    let decay = S::from_f64(lr * state.weight_decay);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("validated above");
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            md[j] = b1 * md[j] + one_b1 * gj;
            vd[j] = b2 * vd[j] + one_b2 * gj * gj;
            let mhat = md[j] / bc1;
            let vhat = vd[j] / bc2;
            pd[j] = pd[j] - decay * pd[j];
            pd[j] = pd[j] - lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    params.step = t;
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Linear warmup to `max_lr`, then cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::InvalidArgument(format!(
            "warmup {warmup_steps} exceeds total steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total steps {total_steps}"
        )));
    }
    if warmup_steps > 0 && step <= warmup_steps {
        return Ok(max_lr * step as f64 / warmup_steps as f64);
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    Ok(max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParameterSet<f64> {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::scalar(value)).unwrap();
        p
    }

    fn grad(value: f64) -> Gradients<f64> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(value));
        g
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = single(0.7);
        let mut st = OptimizerState::new(0.0);
        adamw_step(&mut p, &grad(0.0), &mut st, 1e-2).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn one_step_matches_hand_evaluation() {
        // m = 0.1 g, v = 0.001 g^2; mhat = g, vhat = g^2
        // w' = w - lr*wd*w - lr * g / (|g| + eps)
        let (w, g, lr, wd, eps) = (0.5, 0.3, 0.01, 0.1, 1e-8);
        let mut p = single(w);
        let mut st = OptimizerState::with_betas(0.9, 0.999, eps, wd);
        adamw_step(&mut p, &grad(g), &mut st, lr).unwrap();
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = (w - lr * wd * w) - lr * mhat / (f64::sqrt(vhat) + eps);
        let got = p.get("w").unwrap().item();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - (0.5 - 0.0005 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let (w, lr, wd) = (2.0, 0.05, 0.3);
        let mut p = single(w);
        let mut st = OptimizerState::new(wd);
        adamw_step(&mut p, &grad(0.0), &mut st, lr).unwrap();
        assert_eq!(p.get("w").unwrap().item(), w - lr * wd * w);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = single(1.0);
        let mut st = OptimizerState::new(0.0);
        assert!(adamw_step(&mut p, &grad(f64::NAN), &mut st, 0.1).is_err());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::zeros(&[2]));
        assert!(matches!(adamw_step(&mut p, &g, &mut st, 0.1), Err(Error::Shape(_))));
        let mut g = BTreeMap::new();
        g.insert("nope".to_string(), Tensor::scalar(1.0));
        assert!(adamw_step(&mut p, &g, &mut st, 0.1).is_err());
        assert_eq!(p.step, 0);
    }

    #[test]
    fn deterministic_bits() {
        let run = || {
            let mut p = single(0.123);
            let mut st = OptimizerState::new(0.01);
            for i in 0..5 {
                adamw_step(&mut p, &grad(0.1 * i as f64 - 0.2), &mut st, 3e-3).unwrap();
            }
            p.get("w").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(10, 10, 110, 3e-4).unwrap(), 3e-4);
        assert!(cosine_lr(110, 10, 110, 3e-4).unwrap().abs() < 1e-18);
        assert!((cosine_lr(60, 10, 110, 1.0).unwrap() - 0.5).abs() < 1e-9);
        assert_eq!(cosine_lr(0, 10, 110, 1.0).unwrap(), 0.0);
        assert!(cosine_lr(0, 20, 10, 1.0).is_err());
        assert!(cosine_lr(11, 0, 10, 1.0).is_err());
    }

    #[test]
    fn cosine_monotone_phases() {
        let (w, t) = (25, 200);
        let lrs: Vec<f64> = (0..=t).map(|s| cosine_lr(s, w, t, 1.0).unwrap()).collect();
        assert!(lrs[..=w].windows(2).all(|p| p[1] >= p[0]));
        assert!(lrs[w..].windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = grad(3.0);
        g.insert("u".into(), Tensor::scalar(4.0));
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let after = (g["w"].item().powi(2) + g["u"].item().powi(2)).sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
