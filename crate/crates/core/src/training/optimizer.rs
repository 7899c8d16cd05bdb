//! Decoupled-weight-decay adaptive-moment optimizer and the one-cycle
//! learning-rate schedule.

use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW state: first/second moments per named parameter plus the update
/// count for bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        params.visit_mut(|name, p| {
            let Some(g) = grads.get(name) else {
                return;
            };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            for ((pi, gi), (mi, vi)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *pi);
            }
        });
    }

    /// Moments as named tensors for checkpointing, under `opt.m.`/`opt.v.`
    /// prefixes.
    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("opt.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("opt.v.{k}"), t.clone());
        }
        out
    }

    pub fn restore_named(&mut self, named: &BTreeMap<String, Tensor>, steps: u64) {
        self.steps = steps;
        self.m.clear();
        self.v.clear();
        for (k, t) in named {
            if let Some(name) = k.strip_prefix("opt.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}

/// One-cycle schedule: linear warmup from `max_lr / final_div` to `max_lr`
/// over the first `warmup_frac` of steps, then cosine annealing back down to
/// `max_lr / final_div`.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_frac: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn new(max_lr: f64, total_steps: u64) -> Self {
        OneCycle {
            max_lr,
            total_steps: total_steps.max(1),
            warmup_frac: 0.3,
            final_div: 25.0,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let low = self.max_lr / self.final_div;
        let p = (step as f64 / self.total_steps as f64).min(1.0);
        if p < self.warmup_frac {
            low + (self.max_lr - low) * (p / self.warmup_frac)
        } else {
            let q = (p - self.warmup_frac) / (1.0 - self.warmup_frac);
            low + (self.max_lr - low) * 0.5 * (1.0 + (std::f64::consts::PI * q).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn one_cycle_shape() {
        let s = OneCycle::new(3e-4, 1000);
        let lr0 = s.lr_at(0);
        let lr_peak = s.lr_at(300);
        let lr_end = s.lr_at(1000);
        assert!(lr0 < lr_peak, "warmup starts low");
        assert!((lr_peak - 3e-4).abs() < 1e-18, "peak is max_lr at 30%");
        assert!((lr0 - 3e-4 / 25.0).abs() < 1e-18);
        assert!((lr_end - 3e-4 / 25.0).abs() < 1e-12);
        // Monotone up then down.
        for s1 in 1..300u64 {
            assert!(s.lr_at(s1) >= s.lr_at(s1 - 1));
        }
        for s1 in 301..=1000u64 {
            assert!(s.lr_at(s1) <= s.lr_at(s1 - 1) + 1e-18);
        }
    }

    #[test]
    fn adamw_decreases_quadratic() {
        // Minimize ||p||^2 on a real parameter set: gradients 2p.
        let config = ModelConfig {
            d: 8,
            layers: 1,
            heads: 1,
            mlp_hidden: 8,
            ..ModelConfig::desk()
        };
        let mut params = ModelParams::init(&config, 1).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let norm_of = |p: &ModelParams| -> f64 {
            p.to_named().values().map(|t| t.iter().map(|v| v * v).sum::<f64>()).sum()
        };
        let before = norm_of(&params);
        for _ in 0..200 {
            let grads: BTreeMap<String, Tensor> = params
                .to_named()
                .iter()
                .map(|(k, t)| (k.clone(), crate::tensor::scale(t, 2.0)))
                .collect();
            opt.step(&mut params, &grads, 1e-2);
        }
        let after = norm_of(&params);
        assert!(after < before * 0.2, "{after} vs {before}");
    }

    #[test]
    fn adamw_state_roundtrip() {
        let config = ModelConfig {
            d: 8,
            layers: 1,
            heads: 1,
            mlp_hidden: 8,
            ..ModelConfig::desk()
        };
        let mut params = ModelParams::init(&config, 2).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let grads: BTreeMap<String, Tensor> = params
            .to_named()
            .iter()
            .map(|(k, t)| (k.clone(), crate::tensor::scale(t, 1.0)))
            .collect();
        opt.step(&mut params, &grads, 1e-3);
        opt.step(&mut params, &grads, 1e-3);
        let named = opt.to_named();
        let mut restored = AdamW::new(AdamWConfig::default());
        restored.restore_named(&named, opt.steps);
        assert_eq!(restored.steps, 2);

        // The restored state continues identically.
        let mut pa = params.clone();
        let mut pb = params.clone();
        opt.step(&mut pa, &grads, 1e-3);
        restored.step(&mut pb, &grads, 1e-3);
        for (a, b) in pa.to_named().values().zip(pb.to_named().values()) {
            assert_eq!(a, b);
        }
    }
}
