use super::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// One AdamW update of every parameter from its accumulated gradient.
///
/// Weight decay is decoupled: `θ ← θ(1 − lr·wd)` is applied before the
/// bias-corrected Adam step.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, lr: f64, cfg: &AdamW) {
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_m_b1, one_m_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let eps = T::of(cfg.eps);
    let shrink = T::of(1.0 - lr * cfg.weight_decay);
    for p in params.iter_mut() {
        p.step += 1;
        let t = p.step as i32;
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let lr_t = T::of(lr);
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = b1 * p.m[i] + one_m_b1 * g;
            p.v[i] = b2 * p.v[i] + one_m_b2 * g * g;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.value[i] = p.value[i] * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Learning-rate multiplier: linear warmup from `floor` to 1, then linear
/// decay back to `floor` at `total` epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub floor_ratio: f64,
}

impl LambdaSchedule {
    /// 5 % warmup and a 1 % floor.
    pub fn for_epochs(total_epochs: usize) -> Self {
        LambdaSchedule {
            total_epochs,
            warmup_epochs: ((total_epochs as f64) * 0.05).round() as usize,
            floor_ratio: 0.01,
        }
    }

    pub fn multiplier(&self, epoch: usize) -> f64 {
        lambda_lr(epoch, self.total_epochs, self.warmup_epochs, self.floor_ratio)
    }
}

pub fn lambda_lr(epoch: usize, total_epochs: usize, warmup_epochs: usize, floor_ratio: f64) -> f64 {
    let floor = floor_ratio.clamp(f64::MIN_POSITIVE, 1.0);
    if epoch < warmup_epochs {
        return floor + (1.0 - floor) * epoch as f64 / warmup_epochs as f64;
    }
    if total_epochs <= warmup_epochs {
        return 1.0;
    }
    let frac = ((epoch - warmup_epochs) as f64 / (total_epochs - warmup_epochs) as f64).min(1.0);
    1.0 - (1.0 - floor) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    fn scalar_store(theta: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert(Parameter::new("t", vec![1], vec![theta])).unwrap();
        s.get_mut(id).grad[0] = grad;
        s
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut s = scalar_store(0.7, 0.0);
        adamw_step(&mut s, 1e-3, &AdamW { weight_decay: 0.0, ..AdamW::default() });
        assert_eq!(s.get(0).value[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let lr = 5e-4;
        let mut s = scalar_store(1.0, 1.0);
        adamw_step(&mut s, lr, &AdamW { weight_decay: 0.0, ..AdamW::default() });
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected = 1.0 - lr / (1.0 + 1e-8);
        assert!((s.get(0).value[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let (lr, wd) = (5e-4, 0.05);
        let mut s = scalar_store(2.0, 0.0);
        adamw_step(&mut s, lr, &AdamW { weight_decay: wd, ..AdamW::default() });
        assert!((s.get(0).value[0] - 2.0 * (1.0 - lr * wd)).abs() < 1e-15);
    }

    #[test]
    fn schedule_examples() {
        let (total, warm, floor) = (105, 5, 0.01);
        assert_eq!(lambda_lr(warm, total, warm, floor), 1.0);
        assert!((lambda_lr(total, total, warm, floor) - floor).abs() < 1e-15);
        let mid = warm + (total - warm) / 2;
        assert!((lambda_lr(mid, total, warm, floor) - 0.5 * (1.0 + floor)).abs() < 1e-12);
        assert!((lambda_lr(0, total, warm, floor) - floor).abs() < 1e-15);
        for e in 0..=total {
            let m = lambda_lr(e, total, warm, floor);
            assert!(m > 0.0 && m <= 1.0);
        }
        assert_eq!(LambdaSchedule::for_epochs(2000).warmup_epochs, 100);
    }
}
