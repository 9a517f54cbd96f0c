use ndarray::NdFloat;
use serde::{Deserialize, Serialize};

use super::{cast, Gradients, Model, ParamStore};
use crate::error::{Error, Result};
use crate::plasticity::GradientMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub rule: UpdateRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) for Adam, L2 for SGD.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            rule: UpdateRule::Sgd,
            lr,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub t: u64,
}

impl<F: NdFloat> Model<F> {
    /// Applies one update. Entries where `mask` is false are skipped
    /// entirely: no parameter change and no optimizer-moment update.
    pub fn optimizer_step(
        &mut self,
        grads: &Gradients<F>,
        hyper: &OptimizerConfig,
        mask: Option<&GradientMask>,
    ) -> Result<()> {
        if grads.tensors.len() != self.params.tensors.len() || !self.params.same_layout(grads) {
            return Err(Error::Shape(
                "gradient layout does not match parameters".into(),
            ));
        }
        if let Some(mask) = mask {
            mask.check_layout(&self.params)?;
        }
        if let Some(t) = grads
            .tensors
            .iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
        let lr = cast::<F>(hyper.lr);
        let wd = cast::<F>(hyper.weight_decay);
        let selected = |ti: usize, i: usize| mask.is_none_or(|m| m.selectors[ti][i]);
        match hyper.rule {
            UpdateRule::Sgd => {
                for (ti, (p, g)) in self
                    .params
                    .tensors
                    .iter_mut()
                    .zip(&grads.tensors)
                    .enumerate()
                {
                    for (i, (w, &gi)) in p.data.iter_mut().zip(&g.data).enumerate() {
                        if selected(ti, i) {
                            *w = *w - lr * (gi + wd * *w);
                        }
                    }
                }
            }
            UpdateRule::Adam => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: grads.zeros_like(),
                    v: grads.zeros_like(),
                    t: 0,
                });
                state.t += 1;
                let b1 = cast::<F>(hyper.beta1);
                let b2 = cast::<F>(hyper.beta2);
                let eps = cast::<F>(hyper.eps);
                let bc1 = F::one() - b1.powi(state.t as i32);
                let bc2 = F::one() - b2.powi(state.t as i32);
                for (ti, p) in self.params.tensors.iter_mut().enumerate() {
                    let g = &grads.tensors[ti].data;
                    let m = &mut state.m.tensors[ti].data;
                    let v = &mut state.v.tensors[ti].data;
                    for i in 0..p.data.len() {
                        if !selected(ti, i) {
                            continue;
                        }
                        m[i] = b1 * m[i] + (F::one() - b1) * g[i];
                        v[i] = b2 * v[i] + (F::one() - b2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        let w = &mut p.data[i];
                        *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model<f64> {
        Model::init(ModelConfig::new(1, 8, 2, 16, 7, 4, 1)).unwrap()
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut m = model();
        let mut g = m.params.zeros_like();
        g.tensors[0].data[3] = 0.5;
        let w = m.params.tensors[0].data[3];
        m.optimizer_step(&g, &OptimizerConfig::sgd(0.1), None)
            .unwrap();
        assert_eq!(m.params.tensors[0].data[3], w - 0.1 * 0.5);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        for hyper in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
            let mut m = model();
            let before = m.params.clone();
            let g = m.params.zeros_like();
            m.optimizer_step(&g, &hyper, None).unwrap();
            assert_eq!(m.params, before);
        }
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut m = model();
        let mut g = m.params.zeros_like();
        g.tensors[2].data[0] = f64::NAN;
        assert!(matches!(
            m.optimizer_step(&g, &OptimizerConfig::adam(0.1), None),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn adam_first_step_has_lr_magnitude() {
        let mut m = model();
        let mut g = m.params.zeros_like();
        g.tensors[0].data[0] = 3.0;
        g.tensors[0].data[1] = -0.01;
        let before = m.params.tensors[0].data.clone();
        m.optimizer_step(&g, &OptimizerConfig::adam(0.01), None)
            .unwrap();
        let after = &m.params.tensors[0].data;
        assert!((before[0] - after[0] - 0.01).abs() < 1e-8);
        assert!((after[1] - before[1] - 0.01).abs() < 1e-6);
    }
}
