use crate::error::TensorError;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_LR: f64 = 0.002;

/// Adam optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    /// First and second moment per parameter, aligned with the store.
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::with_lr(store, DEFAULT_LR)
    }

    pub fn with_lr(store: &ParamStore<T>, lr: f64) -> Self {
        let zeros: Vec<_> = store.shapes().into_iter().map(Tensor::zeros).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one update to every trainable parameter of `store`.
    ///
    /// Gradients are validated before anything is mutated, so a rejected
    /// step leaves both the parameters and the moments untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(TensorError::GradientCount(grads.len(), store.len()));
        }
        for ((id, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() || self.first_moment[id.index()].shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    dim: "parameter shape",
                    left: p.value.shape(),
                    right: g.shape(),
                });
            }
            if p.trainable && !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::from_f64_lossy(self.lr / bc1);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let inv_sqrt_bc2 = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        let ids: Vec<_> = store.ids().collect();
        for (id, g) in ids.into_iter().zip(grads) {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let m = self.first_moment[id.index()].data_mut();
            let v = self.second_moment[id.index()].data_mut();
            for (((w, &gi), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }
}
