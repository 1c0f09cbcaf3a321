//! Batch normalization over `(batch, height, width)` per channel.

use super::{Real, Result, Tensor4, TensorError};

pub(crate) struct BnTrainOut<T> {
    pub y: Tensor4<T>,
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

fn channel_planes<T: Real>(x: &Tensor4<T>, c: usize) -> impl Iterator<Item = &[T]> + '_ {
    let [n, _, h, w] = x.shape();
    let plane = h * w;
    (0..n).map(move |ni| &x.item(ni)[c * plane..(c + 1) * plane])
}

pub(crate) fn batch_norm_train<T: Real>(x: &Tensor4<T>, gamma: &[T], beta: &[T], eps: T) -> Result<BnTrainOut<T>> {
    let [n, c, h, w] = x.shape();
    let m = n * h * w;
    if m < 2 {
        return Err(TensorError::BatchTooSmall(m));
    }
    let plane = h * w;
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    for ci in 0..c {
        // two-pass in f64 keeps f32 statistics stable on 512x512 planes
        let s: f64 = channel_planes(x, ci)
            .map(|p| p.iter().map(|v| v.as_f64()).sum::<f64>())
            .sum();
        let mu = s / m as f64;
        let ss: f64 = channel_planes(x, ci)
            .map(|p| p.iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>())
            .sum();
        mean[ci] = T::of(mu);
        var[ci] = T::of(ss / m as f64);
        inv_std[ci] = T::one() / (var[ci] + eps).sqrt();
    }
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for ni in 0..n {
        let xi = x.item(ni);
        let hi = xhat.item_mut(ni);
        for ci in 0..c {
            let r = ci * plane..(ci + 1) * plane;
            for (o, &v) in hi[r.clone()].iter_mut().zip(&xi[r]) {
                *o = (v - mean[ci]) * inv_std[ci];
            }
        }
        let yi = y.item_mut(ni);
        let hi = xhat.item(ni);
        for ci in 0..c {
            let r = ci * plane..(ci + 1) * plane;
            for (o, &v) in yi[r.clone()].iter_mut().zip(&hi[r]) {
                *o = gamma[ci] * v + beta[ci];
            }
        }
    }
    Ok(BnTrainOut {
        y,
        xhat,
        inv_std,
        mean,
        var,
    })
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub(crate) fn batch_norm_train_backward<T: Real>(
    xhat: &Tensor4<T>,
    inv_std: &[T],
    gamma: &[T],
    dy: &Tensor4<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = xhat.shape();
    let plane = h * w;
    let m = T::of((n * plane) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        let hi = xhat.item(ni);
        let gi = dy.item(ni);
        for ci in 0..c {
            let r = ci * plane..(ci + 1) * plane;
            let (mut sg, mut sgx) = (T::zero(), T::zero());
            for (&g, &xh) in gi[r.clone()].iter().zip(&hi[r]) {
                sg += g;
                sgx += g * xh;
            }
            dbeta[ci] += sg;
            dgamma[ci] += sgx;
        }
    }
    let mut dx = Tensor4::zeros(xhat.shape());
    for ni in 0..n {
        let hi = xhat.item(ni);
        let gi = dy.item(ni);
        let di = dx.item_mut(ni);
        for ci in 0..c {
            let r = ci * plane..(ci + 1) * plane;
            let k = gamma[ci] * inv_std[ci] / m;
            for ((d, &g), &xh) in di[r.clone()].iter_mut().zip(&gi[r.clone()]).zip(&hi[r]) {
                *d = k * (m * g - dbeta[ci] - xh * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_each_channel() {
        let x = Tensor4::<f64>::from_fn([2, 3, 4, 5], |[n, c, h, w]| {
            ((n * 7 + c * 13 + h * 3 + w * 11) % 17) as f64 * (c + 1) as f64 + c as f64 * 10.0
        });
        let out = batch_norm_train(&x, &[1.0; 3], &[0.0; 3], 1e-12).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| out.y.item(n)[c * 20..(c + 1) * 20].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 40.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_value_per_channel_rejected() {
        let x = Tensor4::<f64>::zeros([1, 2, 1, 1]);
        assert!(matches!(
            batch_norm_train(&x, &[1.0; 2], &[0.0; 2], 1e-5),
            Err(TensorError::BatchTooSmall(1))
        ));
    }
}
