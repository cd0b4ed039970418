//! Adam with bias correction, global-norm clipping and the tri-phase
//! (warmup / linear decay) learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Linear warmup from 0 to `peak` over `warmup_steps`, then linear decay to
/// 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak: f64,
}

impl LinearSchedule {
    /// `warmup_steps = floor(fraction * total + 0.5)`.
    pub fn new(total_steps: u64, warmup_fraction: f64, peak: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Parameter("total_updates must be >= 1".into()));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::Parameter(format!(
                "warmup_fraction must lie in (0, 1), got {warmup_fraction}"
            )));
        }
        if !peak.is_finite() || peak <= 0.0 {
            return Err(Error::Parameter(format!("peak_lr must be positive, got {peak}")));
        }
        let warmup_steps = libm::floor(warmup_fraction * total_steps as f64 + 0.5) as u64;
        Ok(Self {
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
            peak,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Parameter(format!(
                "step {step} outside 0..={}",
                self.total_steps
            )));
        }
        let w = self.warmup_steps;
        Ok(if step <= w {
            if w == 0 {
                self.peak
            } else {
                self.peak * (step as f64 / w as f64)
            }
        } else {
            self.peak * ((self.total_steps - step) as f64 / (self.total_steps - w) as f64)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// Gradients are checked for NaN/inf before anything is modified; the
    /// error names the first offending parameter.
    pub fn step<F: Element>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &BTreeMap<String, Tensor<F>>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                    step: self.step as usize + 1,
                });
            }
            match params.get(name) {
                Some(p) if p.shape() == g.shape() => {}
                _ => {
                    return Err(Error::Parameter(format!(
                        "gradient for {name} does not match any parameter"
                    )))
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (((pv, &gv), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                let gv = gv.to_f64();
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let update = lr * (*m / bc1) / (libm::sqrt(*v / bc2) + eps);
                *pv = F::from_f64(pv.to_f64() - update);
            }
        }
        Ok(())
    }
}

/// Global ℓ2 norm over all gradients.
pub fn global_norm<F: Element>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| {
            let v = v.to_f64();
            v * v
        })
        .sum();
    libm::sqrt(sq)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Element>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let scale = F::from_f64(max_norm / (norm + 1e-6));
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn single(name: &str, v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn reference_schedule_points() {
        let s = LinearSchedule::new(200_000, 0.07, 2e-4).unwrap();
        assert_eq!(s.warmup_steps, 14_000);
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(14_000).unwrap() - 2e-4).abs() < 1e-12);
        // 2e-4 * (200000 - 107000) / (200000 - 14000)
        assert!((s.lr_at(107_000).unwrap() - 1e-4).abs() < 1e-12);
        assert_eq!(s.lr_at(200_000).unwrap(), 0.0);
        assert!(s.lr_at(200_001).is_err());
    }

    #[test]
    fn schedule_rejects_bad_config() {
        assert!(LinearSchedule::new(0, 0.1, 1e-3).is_err());
        assert!(LinearSchedule::new(10, 0.0, 1e-3).is_err());
        assert!(LinearSchedule::new(10, 1.0, 1e-3).is_err());
        assert!(LinearSchedule::new(10, 0.1, 0.0).is_err());
    }

    #[test]
    fn warmup_rounds_half_up() {
        // 0.25 * 10 = 2.5 -> 3
        assert_eq!(LinearSchedule::new(10, 0.25, 1.0).unwrap().warmup_steps, 3);
        assert_eq!(LinearSchedule::new(10, 0.24, 1.0).unwrap().warmup_steps, 2);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single("w", 1.25);
        let g = single("w", 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 1e-3).unwrap();
        assert_eq!(p["w"].data()[0], 1.25);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = single("w", 0.0);
        let g = single("w", 0.5);
        let mut adam = Adam::new(AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        adam.step(&mut p, &g, 1e-3).unwrap();
        let expected = -1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((p["w"].data()[0] - expected).abs() < 1e-15);
        assert!((p["w"].data()[0] + 9.999_999_8e-4).abs() < 1e-12);
    }

    #[test]
    fn repeated_gradient_never_grows_the_step() {
        let mut p = single("w", 0.0);
        let g = single("w", -0.3);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 1e-3).unwrap();
        let d1 = p["w"].data()[0];
        adam.step(&mut p, &g, 1e-3).unwrap();
        let d2 = p["w"].data()[0] - d1;
        assert!(d2.abs() <= d1.abs() * (1.0 + 1e-6));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single("layers.1.attn.q.weight", 0.0);
        let g = single("layers.1.attn.q.weight", f64::NAN);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut p, &g, 1e-3).unwrap_err();
        assert!(err.to_string().contains("layers.1.attn.q.weight"));
        assert_eq!(p["layers.1.attn.q.weight"].data()[0], 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::<f64>::from_f64_slice(&[2], &[3.0, 4.0]).unwrap());
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
    }
}
