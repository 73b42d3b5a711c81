//! Adam-style first-order optimizer with bias correction.
//!
//! L1/L2 penalties are applied decoupled from the moment estimates and only
//! to parameters flagged as scaling coefficients: L1 as a subgradient step,
//! L2 as decay. Everything else sees the plain adaptive update.

use crate::error::{Error, Result};
use crate::graph::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// L1 coefficient on scaling parameters.
    pub l1: f64,
    /// L2 coefficient on scaling parameters.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            l1: 0.0,
            l2: 0.0,
        }
    }
}

#[derive(Debug)]
pub struct Optimizer {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let first_moment = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
            .collect();
        let second_moment = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
            .collect();
        Optimizer {
            config,
            first_moment,
            second_moment,
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for id in params.ids().collect::<Vec<_>>() {
            if !params.grad(id).all_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter '{}'",
                    params.name(id)
                )));
            }
            let idx = {
                let crate::graph::ParamId(i) = id;
                i
            };
            let grad = params.grad(id).data().to_vec();
            let is_scaling = params.is_scaling(id);
            let m = self.first_moment[idx].data_mut();
            let v = self.second_moment[idx].data_mut();
            let value = params.value_mut(id).data_mut();
            for i in 0..grad.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                if is_scaling && (c.l1 > 0.0 || c.l2 > 0.0) {
                    value[i] -= c.learning_rate * (c.l1 * value[i].signum() + 2.0 * c.l2 * value[i]);
                }
            }
        }
        Ok(())
    }
}

/// Penalty value matching the optimizer's L1/L2 treatment:
/// `l1 * sum|s| + l2 * sum s^2` over scaling parameters.
pub fn penalty_value(params: &ParamSet, l1: f64, l2: f64) -> f64 {
    if l1 == 0.0 && l2 == 0.0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for id in params.ids() {
        if params.is_scaling(id) {
            for &s in params.value(id).data() {
                acc += l1 * s.abs() + l2 * s * s;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::from_vec(vec![1.0, -2.0]), false);
        let mut opt = Optimizer::new(AdamConfig::default(), &ps);
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn single_step_descends_on_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::from_vec(vec![1.0]), false);
        let mut opt = Optimizer::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        let mut g = Graph::new();
        let x = g.param(&ps, id);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss, &mut ps).unwrap();
        opt.step(&mut ps).unwrap();
        assert!(ps.value(id).data()[0].abs() < 1.0);
    }

    #[test]
    fn two_d_quadratic_converges() {
        // closed-form minimum at the origin, loss there is 0
        let mut ps = ParamSet::new();
        let id = ps.add("xy", Tensor::from_vec(vec![1.0, -0.7]), false);
        let mut opt = Optimizer::new(
            AdamConfig {
                learning_rate: 0.1,
                ..AdamConfig::default()
            },
            &ps,
        );
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            ps.zero_grads();
            let mut g = Graph::new();
            let x = g.param(&ps, id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum_all(sq);
            last = g.value(loss).item().unwrap();
            g.backward(loss, &mut ps).unwrap();
            opt.step(&mut ps).unwrap();
        }
        assert!(last < 1e-4, "final loss {last}");
    }

    #[test]
    fn nan_gradient_reports_parameter_name() {
        let mut ps = ParamSet::new();
        let id = ps.add("weights.hidden", Tensor::from_vec(vec![1.0]), false);
        ps.zero_grads();
        let mut g = Graph::new();
        let x = g.param(&ps, id);
        let bad = g.input(Tensor::from_vec(vec![f64::NAN]));
        let prod = g.mul(x, bad).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss, &mut ps).unwrap();
        let mut opt = Optimizer::new(AdamConfig::default(), &ps);
        let err = opt.step(&mut ps).unwrap_err();
        assert!(err.to_string().contains("weights.hidden"));
    }

    #[test]
    fn penalties_touch_only_scaling_parameters() {
        let mut ps = ParamSet::new();
        let plain = ps.add("w", Tensor::from_vec(vec![0.5]), false);
        let scaling = ps.add("s", Tensor::from_vec(vec![0.5]), true);
        let run = |l1: f64, l2: f64, ps: &ParamSet| {
            let mut ps = ps.clone();
            let mut opt = Optimizer::new(
                AdamConfig {
                    learning_rate: 0.01,
                    l1,
                    l2,
                    ..AdamConfig::default()
                },
                &ps,
            );
            ps.zero_grads();
            let mut g = Graph::new();
            let w = g.param(&ps, plain);
            let s = g.param(&ps, scaling);
            let both = g.add(w, s).unwrap();
            let sq = g.mul(both, both).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss, &mut ps).unwrap();
            opt.step(&mut ps).unwrap();
            (ps.value(plain).data()[0], ps.value(scaling).data()[0])
        };
        let (w_plain, s_plain) = run(0.0, 0.0, &ps);
        let (w_pen, s_pen) = run(0.1, 0.1, &ps);
        assert_eq!(w_plain, w_pen);
        assert_ne!(s_plain, s_pen);
    }

    #[test]
    fn penalty_value_counts_scaling_only() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![3.0]), false);
        ps.add("s", Tensor::from_vec(vec![-2.0]), true);
        let v = penalty_value(&ps, 0.5, 0.25);
        assert!((v - (0.5 * 2.0 + 0.25 * 4.0)).abs() < 1e-15);
    }
}
