use crate::numeric::{ParamStore, Real, Tensor};

/// SGD with classical momentum:
/// `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum }
    }

    /// Update every non-frozen parameter that has a gradient, then clear the
    /// gradients. Frozen parameters are left bit-identical.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::lit(lr);
        let mu = T::lit(self.momentum);
        for p in store.iter_mut() {
            if p.frozen {
                p.grad = None;
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            let v = p
                .momentum
                .get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((vi, &gi), ti) in v
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.tensor.data_mut())
            {
                *vi = mu * *vi + gi;
                *ti = *ti - lr * *vi;
            }
        }
    }
}
