//! Adam optimiser with bias correction and global-norm gradient clipping.

use super::store::VarStore;
use super::tensor::Tensor;
use crate::num::Real;
use thiserror::Error;

/// A gradient update failed; parameters were left untouched.
#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("gradient list has {got} entries but the store holds {expect} variables")]
    GradientCount { got: usize, expect: usize },
}

/// Adam with optional global-norm clipping. Moment buffers are kept in the
/// same scalar type as the parameters; norm accumulation runs in `f64`.
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip threshold on the global gradient norm; `None` disables clipping.
    pub clip: Option<f64>,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    last_norm: f64,
    last_scale: f64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &VarStore<F>, lr: f64, clip: Option<f64>) -> Self {
        let zeros: Vec<Tensor<F>> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.dims().to_vec()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            last_norm: 0.0,
            last_scale: 1.0,
        }
    }

    /// Global gradient norm observed by the most recent step.
    pub fn last_global_norm(&self) -> f64 {
        self.last_norm
    }

    /// Scale factor applied by clipping in the most recent step (1 = no clip).
    pub fn last_scale(&self) -> f64 {
        self.last_scale
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// First and second moment buffers plus the step counter, for
    /// checkpointing.
    pub fn state(&self) -> (&[Tensor<F>], &[Tensor<F>], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restores optimiser state saved by [`Adam::state`].
    pub fn restore(&mut self, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "restore: moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "restore: moment count mismatch");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.dims(), b.dims(), "restore: moment dims mismatch");
        }
        for (a, b) in v.iter().zip(&self.v) {
            assert_eq!(a.dims(), b.dims(), "restore: moment dims mismatch");
        }
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// Applies one update. `grads` must align with the store's variable
    /// order (as produced by `Graph::param_grads`). Rejects non-finite
    /// gradients before touching any parameter.
    pub fn step(
        &mut self,
        store: &mut VarStore<F>,
        grads: &[Tensor<F>],
    ) -> Result<(), OptimError> {
        if grads.len() != store.len() {
            return Err(OptimError::GradientCount {
                got: grads.len(),
                expect: store.len(),
            });
        }
        let mut sq_sum = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGradient {
                    param: store.name(super::store::VarId(i)).to_string(),
                });
            }
            sq_sum += g.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>();
        }
        let norm = sq_sum.sqrt();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.last_norm = norm;
        self.last_scale = scale;

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (ob1, ob2) = (F::of(1.0 - self.beta1), F::of(1.0 - self.beta2));
        let scale_f = F::of(scale);
        let lr = F::of(self.lr / bc1);
        let vdenom = F::of(1.0 / bc2);
        let eps = F::of(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let id = super::store::VarId(i);
            let p = store.get_mut(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(g.data())
            {
                let gc = gv * scale_f;
                *mv = b1 * *mv + ob1 * gc;
                *vv = b2 * *vv + ob2 * gc * gc;
                let vhat = *vv * vdenom;
                *pv -= lr * *mv / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn store_with(vals: &[f64]) -> VarStore<f64> {
        let mut s = VarStore::new();
        for (i, &v) in vals.iter().enumerate() {
            s.add(&format!("p{i}"), Tensor::scalar(v));
        }
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With one gradient step, bias correction makes m̂ = g and v̂ = g²,
        // so the update is lr·g/(|g|+eps) ≈ lr·sign(g).
        let mut store = store_with(&[1.0]);
        let mut opt = Adam::new(&store, 0.1, None);
        opt.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        assert_relative_eq!(store.get(VarId(0)).item(), 0.9, epsilon = 1e-6);
        assert_eq!(opt.steps(), 1);
        assert_relative_eq!(opt.last_global_norm(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(opt.last_scale(), 1.0, epsilon = 1e-12);
    }

    use super::super::store::VarId;

    #[test]
    fn global_norm_clip_scales_all_gradients() {
        let mut store = store_with(&[0.0, 0.0]);
        let mut opt = Adam::new(&store, 0.01, Some(0.5));
        opt.step(
            &mut store,
            &[Tensor::scalar(3.0), Tensor::scalar(4.0)],
        )
        .unwrap();
        assert_relative_eq!(opt.last_global_norm(), 5.0, epsilon = 1e-9);
        assert_relative_eq!(opt.last_scale(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn small_gradients_are_not_clipped() {
        let mut store = store_with(&[0.0]);
        let mut opt = Adam::new(&store, 0.01, Some(0.5));
        opt.step(&mut store, &[Tensor::scalar(0.3)]).unwrap();
        assert_relative_eq!(opt.last_scale(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_rejected_with_name() {
        let mut store = store_with(&[1.0, 2.0]);
        let before = store.get(VarId(1)).item();
        let mut opt = Adam::new(&store, 0.1, None);
        let err = opt
            .step(
                &mut store,
                &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)],
            )
            .unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFiniteGradient {
                param: "p1".into()
            }
        );
        // Parameters untouched on failure.
        assert_eq!(store.get(VarId(1)).item(), before);
    }

    #[test]
    fn gradient_count_mismatch_is_rejected() {
        let mut store = store_with(&[1.0]);
        let mut opt = Adam::new(&store, 0.1, None);
        let err = opt.step(&mut store, &[]).unwrap_err();
        assert_eq!(err, OptimError::GradientCount { got: 0, expect: 1 });
    }

    #[test]
    fn repeated_steps_decay_toward_minimum_of_quadratic() {
        // Minimise f(x) = x² with exact gradient 2x.
        let mut store = store_with(&[1.0]);
        let mut opt = Adam::new(&store, 0.05, None);
        for _ in 0..400 {
            let x = store.get(VarId(0)).item();
            opt.step(&mut store, &[Tensor::scalar(2.0 * x)]).unwrap();
        }
        assert!(store.get(VarId(0)).item().abs() < 1e-2);
    }

    #[test]
    fn state_round_trip_restores_trajectory() {
        let run = |resume_at: Option<u64>| {
            let mut store = store_with(&[1.0]);
            let mut opt = Adam::new(&store, 0.1, None);
            let mut saved: Option<(Vec<Tensor<f64>>, Vec<Tensor<f64>>, u64, f64)> = None;
            for i in 0..10u64 {
                if Some(i) == resume_at {
                    let (m, v, t) = opt.state();
                    saved = Some((m.to_vec(), v.to_vec(), t, store.get(VarId(0)).item()));
                }
                let x = store.get(VarId(0)).item();
                opt.step(&mut store, &[Tensor::scalar(2.0 * x)]).unwrap();
            }
            (store.get(VarId(0)).item(), saved)
        };
        let (straight, saved) = run(Some(5));
        let (m, v, t, x) = saved.unwrap();
        let mut store = store_with(&[x]);
        let mut opt = Adam::new(&store, 0.1, None);
        opt.restore(m, v, t);
        for _ in 5..10 {
            let xc = store.get(VarId(0)).item();
            opt.step(&mut store, &[Tensor::scalar(2.0 * xc)]).unwrap();
        }
        assert_relative_eq!(store.get(VarId(0)).item(), straight, epsilon = 1e-12);
    }
}
