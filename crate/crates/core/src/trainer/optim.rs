use super::{Result, TrainError};
use crate::model::NamedTensor;
use crate::tensor::{Real, Tensor4};

/// Linear warm-up to `peak_lr` over `warmup_batches`, constant afterwards.
pub fn lr_schedule(batch_index: usize, warmup_batches: usize, peak_lr: f64) -> f64 {
    if batch_index < warmup_batches {
        peak_lr * (batch_index + 1) as f64 / warmup_batches as f64
    } else {
        peak_lr
    }
}

/// Bias-corrected Adam over a parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[NamedTensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
        }
    }

    /// One update. Parameters without a gradient are treated as having a zero gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [NamedTensor<T>], grads: &[Option<Tensor4<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(TrainError::Optimizer(format!(
                "{} grads and {} moments for {} params",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(TrainError::Optimizer(format!("gradient shape for `{}`", p.name)));
                }
                if !g.is_finite() {
                    return Err(TrainError::Diverged(p.name.clone()));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            match &grads[i] {
                Some(g) => {
                    for (((w, mi), vi), &gi) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                        .zip(g.data())
                    {
                        *mi = tb1 * *mi + ob1 * gi;
                        *vi = tb2 * *vi + ob2 * gi * gi;
                        *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
                    }
                }
                None => {
                    for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi *= tb1;
                        *vi *= tb2;
                        *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
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

    #[test]
    fn warmup_values() {
        assert_eq!(lr_schedule(249, 500, 1e-3), 0.5e-3);
        assert_eq!(lr_schedule(0, 500, 1e-3), 1e-3 / 500.0);
        assert_eq!(lr_schedule(499, 500, 1e-3), 1e-3);
        assert_eq!(lr_schedule(10_000, 500, 1e-3), 1e-3);
    }

    #[test]
    fn nan_gradient_diverges_without_mutation() {
        let mut p = vec![NamedTensor {
            name: "w".into(),
            value: Tensor4::<f64>::full([1, 1, 1, 2], 1.0),
        }];
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let g = Tensor4::from_vec([1, 1, 1, 2], vec![0.1, f64::NAN]).unwrap();
        assert!(matches!(
            adam.step(&mut p, &[Some(g)], 1e-3),
            Err(TrainError::Diverged(_))
        ));
        assert_eq!(p, before);
        assert_eq!(adam.t, 0);
    }
}
