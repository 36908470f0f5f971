//! Momentum SGD with weight decay, gradient-norm smoothing across size
//! switches, and epoch-based learning-rate schedules.
//!
//! Smoothing tracks an exponential moving average ḡ of the global gradient
//! norm and multiplies each raw gradient by ḡ_t/g_t, so consecutive steps
//! apply updates of similar magnitude even when the sampled image size (and
//! with it the gradient norm) jumps around.

use serde::{Deserialize, Serialize};

use crate::elem::Elem;
use crate::model::NamedParam;
use crate::{Error, Result};

/// EMA of the global gradient norm. State is f64 regardless of the
/// parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedGradState {
    pub g_bar: f64,
    pub alpha: f64,
    pub initialized: bool,
}

impl SmoothedGradState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!(
                "smoothing alpha must be in [0,1), got {alpha}"
            )));
        }
        Ok(Self { g_bar: 0.0, alpha, initialized: false })
    }

    /// Fold in this step's norm and return the multiplier ḡ_t/g_t.
    ///
    /// The first observation sets ḡ₀ = g₀ (multiplier 1). A zero norm after
    /// initialization leaves the EMA untouched and returns 1, so degenerate
    /// steps neither divide by zero nor drag ḡ down.
    pub fn update(&mut self, g_t: f64) -> f64 {
        if !self.initialized {
            self.g_bar = g_t;
            self.initialized = true;
            return 1.0;
        }
        if g_t == 0.0 {
            return 1.0;
        }
        self.g_bar = self.alpha * self.g_bar + (1.0 - self.alpha) * g_t;
        self.g_bar / g_t
    }
}

pub const DEFAULT_SMOOTHING_ALPHA: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SGDConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// EMA coefficient for gradient smoothing; `None` disables it.
    pub smoothing_alpha: Option<f64>,
    /// Apply the smoothing multiplier to the momentum-accumulated update
    /// instead of the raw gradient (the non-default ordering, kept for A/B
    /// comparison).
    pub smooth_after_momentum: bool,
}

impl Default for SGDConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            smoothing_alpha: None,
            smooth_after_momentum: false,
        }
    }
}

impl SGDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(a) = self.smoothing_alpha {
            SmoothedGradState::new(a)?;
        }
        Ok(())
    }
}

/// L2 norm of all parameter gradients concatenated (one global norm, not
/// per layer). Accumulated in f64.
pub fn global_grad_norm<T: Elem>(params: &[NamedParam<T>]) -> Result<f64> {
    let mut sq = 0.0f64;
    for p in params {
        let Some(g) = p.tensor.grad() else {
            return Err(Error::Numeric(format!("parameter {} has no gradient", p.name)));
        };
        for &v in &g {
            let v = v.to_f64();
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
            sq += v * v;
        }
    }
    Ok(sq.sqrt())
}

/// Everything one optimizer step observed, for metrics logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub multiplier: f64,
    pub smoothed_norm: f64,
}

pub struct SgdOptimizer<T: Elem> {
    pub cfg: SGDConfig,
    velocity: Vec<Vec<T>>,
    pub smoothing: Option<SmoothedGradState>,
    steps_taken: u64,
}

impl<T: Elem> SgdOptimizer<T> {
    pub fn new(cfg: SGDConfig) -> Result<Self> {
        cfg.validate()?;
        let smoothing = match cfg.smoothing_alpha {
            Some(a) => Some(SmoothedGradState::new(a)?),
            None => None,
        };
        Ok(Self { cfg, velocity: Vec::new(), smoothing, steps_taken: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// One update over `params` at learning rate `lr_t`. Gradients must be
    /// populated; they are consumed as-is (zero them afterwards).
    pub fn step(&mut self, params: &[NamedParam<T>], lr_t: f64) -> Result<StepInfo> {
        if lr_t <= 0.0 || !lr_t.is_finite() {
            return Err(Error::Config(format!("step learning rate must be positive, got {lr_t}")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(crate::shape_err!(
                "optimizer saw {} parameters, initialized with {}",
                params.len(),
                self.velocity.len()
            ));
        }

        let grad_norm = global_grad_norm(params)?;
        let multiplier = match &mut self.smoothing {
            Some(state) => state.update(grad_norm),
            None => 1.0,
        };
        let smoothed_norm = self.smoothing.as_ref().map_or(grad_norm, |s| s.g_bar);

        let mom = T::from_f64(self.cfg.momentum);
        let wd = T::from_f64(self.cfg.weight_decay);
        let lr = T::from_f64(lr_t);
        let (pre_mult, post_mult) = if self.cfg.smooth_after_momentum {
            (T::one(), T::from_f64(multiplier))
        } else {
            (T::from_f64(multiplier), T::one())
        };

        for (idx, p) in params.iter().enumerate() {
            let grad = p.tensor.grad().unwrap();
            let v = &mut self.velocity[idx];
            if v.len() != grad.len() {
                return Err(crate::shape_err!(
                    "parameter {} changed size mid-run",
                    p.name
                ));
            }
            let mut w = p.tensor.data_mut();
            for i in 0..grad.len() {
                let mut g_eff = pre_mult * grad[i];
                if p.decay {
                    g_eff += wd * w[i];
                }
                v[i] = mom * v[i] + g_eff;
                w[i] -= lr * post_mult * v[i];
                if !w[i].is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite weight in {} at optimizer step {}",
                        p.name, self.steps_taken
                    )));
                }
            }
        }
        self.steps_taken += 1;
        Ok(StepInfo { grad_norm, multiplier, smoothed_norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrScheduleKind {
    #[default]
    StepDecay,
    Cosine,
}

/// Learning rate for `epoch` (0-based, must be < `total_epochs`).
pub fn lr_schedule(
    kind: LrScheduleKind,
    base_lr: f64,
    epoch: usize,
    total_epochs: usize,
    milestones: &[usize],
    gamma: f64,
) -> f64 {
    match kind {
        LrScheduleKind::StepDecay => {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            base_lr * gamma.powi(passed as i32)
        }
        LrScheduleKind::Cosine => {
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn param(name: &str, data: Vec<f64>, decay: bool) -> NamedParam<f64> {
        NamedParam {
            name: name.into(),
            tensor: Tensor::param(&[data.len()], data).unwrap(),
            decay,
        }
    }

    #[test]
    fn norm_three_four_five() {
        let a = param("a", vec![0.0], false);
        let b = param("b", vec![0.0], false);
        a.tensor.accumulate_grad(&[3.0]);
        b.tensor.accumulate_grad(&[4.0]);
        assert_eq!(global_grad_norm(&[a, b]).unwrap(), 5.0);
    }

    #[test]
    fn norm_matches_flatten_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = Vec::new();
        let mut flat = Vec::new();
        for (i, len) in [3usize, 7, 1, 12].into_iter().enumerate() {
            let g: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            flat.extend(g.clone());
            let p = param(&format!("p{i}"), vec![0.0; len], false);
            p.tensor.accumulate_grad(&g);
            params.push(p);
        }
        let oracle = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((global_grad_norm(&params).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn norm_zero_and_nonfinite() {
        let p = param("z", vec![0.0, 0.0], false);
        p.tensor.accumulate_grad(&[0.0, 0.0]);
        assert_eq!(global_grad_norm(std::slice::from_ref(&p)).unwrap(), 0.0);
        p.tensor.accumulate_grad(&[f64::NAN, 0.0]);
        assert!(matches!(
            global_grad_norm(std::slice::from_ref(&p)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn smoothing_first_step_and_fixed_point() {
        let mut s = SmoothedGradState::new(0.9).unwrap();
        assert_eq!(s.update(2.5), 1.0);
        assert_eq!(s.g_bar, 2.5);
        for _ in 0..50 {
            assert!((s.update(2.5) - 1.0).abs() < 1e-15);
        }
        assert_eq!(s.g_bar, 2.5);
    }

    #[test]
    fn smoothing_one_step_arithmetic() {
        let mut s = SmoothedGradState::new(0.9).unwrap();
        s.update(1.0);
        let m = s.update(3.0);
        assert!((s.g_bar - 1.2).abs() < 1e-15);
        assert!((m - 0.4).abs() < 1e-15);
    }

    #[test]
    fn smoothing_matches_closed_form() {
        // ḡ_t = αᵗ·g₀ + (1−α)·Σ_{i=1..t} α^{t−i}·g_i
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &alpha in &[0.5, 0.9, 0.99] {
            let g: Vec<f64> = (0..40).map(|_| rng.gen_range(0.1..4.0)).collect();
            let mut s = SmoothedGradState::new(alpha).unwrap();
            for &gt in &g {
                s.update(gt);
            }
            let t = g.len() - 1;
            let mut closed = alpha.powi(t as i32) * g[0];
            for (i, &gi) in g.iter().enumerate().skip(1) {
                closed += (1.0 - alpha) * alpha.powi((t - i) as i32) * gi;
            }
            assert!((s.g_bar - closed).abs() < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn zero_norm_freezes_ema() {
        let mut s = SmoothedGradState::new(0.9).unwrap();
        s.update(2.0);
        assert_eq!(s.update(0.0), 1.0);
        assert_eq!(s.g_bar, 2.0);
    }

    #[test]
    fn plain_sgd_reduction() {
        let p = param("w", vec![1.0, -2.0], false);
        p.tensor.accumulate_grad(&[0.5, 0.25]);
        let mut opt = SgdOptimizer::new(SGDConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            smoothing_alpha: None,
            smooth_after_momentum: false,
        })
        .unwrap();
        opt.step(std::slice::from_ref(&p), 0.1).unwrap();
        let w = p.tensor.to_vec();
        assert!((w[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        assert!((w[1] - (-2.0 - 0.1 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn momentum_and_decay_trajectory() {
        // hand-rolled two-step reference with momentum 0.5, decay 0.1
        let p = param("w", vec![1.0], true);
        let cfg = SGDConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.1,
            smoothing_alpha: None,
            smooth_after_momentum: false,
        };
        let mut opt = SgdOptimizer::new(cfg).unwrap();

        let mut w = 1.0f64;
        let mut v = 0.0f64;
        for &g in &[0.3, -0.2] {
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&[g]);
            opt.step(std::slice::from_ref(&p), 0.1).unwrap();
            let g_eff = g + 0.1 * w;
            v = 0.5 * v + g_eff;
            w -= 0.1 * v;
            assert!((p.tensor.to_vec()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_norms_make_smoothing_transparent() {
        // same gradient every step: multiplier ≡ 1, so trajectories match bitwise
        let run = |alpha: Option<f64>| -> Vec<f64> {
            let p = param("w", vec![0.7, -0.3], false);
            let mut opt = SgdOptimizer::new(SGDConfig {
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 0.0,
                smoothing_alpha: alpha,
                smooth_after_momentum: false,
            })
            .unwrap();
            for _ in 0..10 {
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&[0.4, -0.1]);
                opt.step(std::slice::from_ref(&p), 0.05).unwrap();
            }
            p.tensor.to_vec()
        };
        assert_eq!(run(None), run(Some(0.99)));
    }

    #[test]
    fn smoothing_narrows_update_ratio_on_alternating_norms() {
        // alternating gradient magnitudes 1 and 4; compare the ratio of
        // successive applied-update norms with and without smoothing
        let applied_ratio = |alpha: Option<f64>| -> f64 {
            let p = param("w", vec![0.0], false);
            let mut opt = SgdOptimizer::new(SGDConfig {
                lr: 1.0,
                momentum: 0.0,
                weight_decay: 0.0,
                smoothing_alpha: alpha,
                smooth_after_momentum: false,
            })
            .unwrap();
            let mut prev_w = 0.0;
            let mut updates = Vec::new();
            for i in 0..6 {
                let g = if i % 2 == 0 { 1.0 } else { 4.0 };
                p.tensor.zero_grad();
                p.tensor.accumulate_grad(&[g]);
                opt.step(std::slice::from_ref(&p), 1.0).unwrap();
                let w = p.tensor.to_vec()[0];
                updates.push((w - prev_w).abs());
                prev_w = w;
            }
            let mut worst: f64 = 1.0;
            for pair in updates.windows(2) {
                let r = (pair[1] / pair[0]).max(pair[0] / pair[1]);
                worst = worst.max(r);
            }
            worst
        };
        let rough = applied_ratio(None);
        let smooth = applied_ratio(Some(0.9));
        assert!((rough - 4.0).abs() < 1e-12, "raw ratio is the norm ratio");
        assert!(smooth < rough, "smoothing must narrow the update ratio");
    }

    #[test]
    fn lr_schedules() {
        let ms = [30, 60, 80];
        assert!((lr_schedule(LrScheduleKind::StepDecay, 0.1, 45, 90, &ms, 0.1) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(LrScheduleKind::StepDecay, 0.1, 10, 90, &ms, 0.1) - 0.1).abs() < 1e-15);
        assert!((lr_schedule(LrScheduleKind::StepDecay, 0.1, 85, 90, &ms, 0.1) - 1e-4).abs() < 1e-15);
        assert_eq!(lr_schedule(LrScheduleKind::Cosine, 0.4, 0, 100, &[], 0.0), 0.4);
        assert!((lr_schedule(LrScheduleKind::Cosine, 0.4, 50, 100, &[], 0.0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SGDConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(SGDConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SGDConfig { smoothing_alpha: Some(1.0), ..Default::default() }
            .validate()
            .is_err());
        assert!(SGDConfig::default().validate().is_ok());
    }
}
