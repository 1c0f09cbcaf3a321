use super::{Real, Result, Tensor4, TensorError};

/// 2x2 max-pool with stride 2. Returns the pooled tensor and, per output element, the flat
/// input offset of the selected value (first maximum in row-major window order).
pub(crate) fn max_pool2_forward<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::OddPoolDims(h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(out.numel());
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let r0 = base + 2 * i * w + 2 * j;
                let mut best = r0;
                for cand in [r0 + 1, r0 + w, r0 + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                dst[k] = src[best];
                argmax.push(best as u32);
                k += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn max_pool2_backward<T: Real>(input_shape: [usize; 4], argmax: &[u32], dy: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = Tensor4::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx as usize] += g;
    }
    dx
}
