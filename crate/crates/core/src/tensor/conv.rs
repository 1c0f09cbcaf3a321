//! Convolution kernels: dense (im2col + gemm), depthwise, and 2x2/stride-2 transposed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::gemm::{matmul, matmul_ld, MatRef};
use super::{Real, Result, Tensor4, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Zero padding that keeps spatial dims for stride 1 (odd kernels only).
    Same,
    Valid,
}

/// Geometry of a convolution layer. Semantics are cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub dilation: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub depthwise_separable: bool,
}

impl ConvSpec {
    /// 3x3 `same` convolution.
    pub fn same3x3(in_channels: usize, out_channels: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (3, 3),
            dilation: (dilation, dilation),
            stride: (1, 1),
            padding: Padding::Same,
            depthwise_separable: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: (1, 1),
            ..Self::same3x3(in_channels, out_channels, 1)
        }
    }

    pub fn separable(self) -> Self {
        Self {
            depthwise_separable: true,
            ..self
        }
    }

    /// Taps covered by the dilated kernel along each axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.kernel.0 + (self.kernel.0 - 1) * (self.dilation.0 - 1),
            self.kernel.1 + (self.kernel.1 - 1) * (self.dilation.1 - 1),
        )
    }

    /// Scalar parameter count including biases.
    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        if self.depthwise_separable {
            self.in_channels * kh * kw + self.in_channels + self.in_channels * self.out_channels + self.out_channels
        } else {
            self.in_channels * self.out_channels * kh * kw + self.out_channels
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::Invalid { op: "conv_spec", msg });
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return bad("kernel dims must be >= 1".into());
        }
        if self.dilation.0 == 0 || self.dilation.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return bad("dilation and stride must be >= 1".into());
        }
        if self.padding == Padding::Same && (self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2)) {
            return bad(format!("same padding needs odd kernel dims, got {:?}", self.kernel));
        }
        Ok(())
    }

    pub(crate) fn geometry(&self, h: usize, w: usize) -> Result<Geom> {
        self.validate()?;
        let (kh, kw) = self.kernel;
        let (dh, dw) = self.dilation;
        let (ph, pw) = match self.padding {
            Padding::Same => (dh * (kh - 1) / 2, dw * (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        let (eh, ew) = self.effective_kernel();
        if h + 2 * ph < eh || w + 2 * pw < ew {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} smaller than effective kernel {eh}x{ew}"),
            });
        }
        Ok(Geom {
            in_h: h,
            in_w: w,
            out_h: (h + 2 * ph - eh) / self.stride.0 + 1,
            out_w: (w + 2 * pw - ew) / self.stride.1 + 1,
            kh,
            kw,
            dh,
            dw,
            sh: self.stride.0,
            sw: self.stride.1,
            ph,
            pw,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

impl Geom {
    fn is_identity_1x1(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }

    /// Valid output column range for kernel column `kj`, and the input offset of column 0.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize, isize) {
        let off = (kj * self.dw) as isize - self.pw as isize;
        let lo = if off < 0 {
            ((-off) as usize).div_ceil(self.sw)
        } else {
            0
        };
        let room = self.in_w as isize - off;
        let hi = if room <= 0 {
            0
        } else {
            (room as usize).div_ceil(self.sw).min(self.out_w)
        };
        (lo, hi.max(lo), off)
    }

    #[inline]
    fn in_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.sh + ki * self.dh) as isize - self.ph as isize;
        (iy >= 0 && (iy as usize) < self.in_h).then_some(iy as usize)
    }
}

/// Column matrix for output rows `rows`, `(channels * kh * kw) x (rows.len() * out_w)`.
fn im2col<T: Real>(x: &[T], channels: usize, g: &Geom, rows: Range<usize>, cols: &mut [T]) {
    let p = rows.len() * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let src = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi, off) = g.col_range(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let drow = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    let Some(iy) = g.in_row(oy, ki) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &src[iy * g.in_w..(iy + 1) * g.in_w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if g.sw == 1 {
                        let s0 = (lo as isize + off) as usize;
                        drow[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = srow[(ox as isize * g.sw as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix for output rows `rows` back onto the input plane.
fn col2im<T: Real>(cols: &[T], channels: usize, g: &Geom, rows: Range<usize>, dx: &mut [T]) {
    let p = rows.len() * g.out_w;
    let plane = g.in_h * g.in_w;
    for ci in 0..channels {
        let dst = &mut dx[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi, off) = g.col_range(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let Some(iy) = g.in_row(oy, ki) else {
                        continue;
                    };
                    let srow = &src[r * g.out_w..(r + 1) * g.out_w];
                    let drow = &mut dst[iy * g.in_w..(iy + 1) * g.in_w];
                    if g.sw == 1 {
                        let d0 = (lo as isize + off) as usize;
                        for (d, &s) in drow[d0..d0 + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate().take(hi).skip(lo) {
                            drow[(ox as isize * g.sw as isize + off) as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn check_conv_shapes<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Geom> {
    let [_, c, h, wd] = x.shape();
    if c != spec.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d input channels",
            expected: vec![spec.in_channels],
            got: vec![c],
        });
    }
    let wshape = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
    if w.shape() != wshape {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d weight",
            expected: wshape.to_vec(),
            got: w.shape().to_vec(),
        });
    }
    check_bias(b, spec.out_channels)?;
    spec.geometry(h, wd)
}

pub(crate) fn check_bias<T: Real>(b: Option<&Tensor4<T>>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [1, channels, 1, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "bias",
                expected: vec![1, channels, 1, 1],
                got: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn add_bias<T: Real>(out: &mut [T], b: Option<&Tensor4<T>>, plane: usize) {
    if let Some(b) = b {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data()) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Real>(dy: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = dy.shape();
    let plane = h * w;
    let mut db = Tensor4::zeros([1, c, 1, 1]);
    for ni in 0..n {
        for (ci, chunk) in dy.item(ni).chunks(plane).enumerate() {
            db.data_mut()[ci] += chunk.iter().copied().sum::<T>();
        }
    }
    db
}

/// Column-buffer budget per band of output rows, in elements; keeps the band cache resident.
const BAND_ELEMS: usize = 1 << 16;

fn bands(g: &Geom, k: usize) -> impl Iterator<Item = Range<usize>> + '_ {
    let rows = (BAND_ELEMS / (k * g.out_w).max(1)).max(1);
    (0..g.out_h).step_by(rows).map(move |r| r..(r + rows).min(g.out_h))
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    spec: &ConvSpec,
) -> Result<Tensor4<T>> {
    let g = check_conv_shapes(x, w, b, spec)?;
    let [n, cin, _, _] = x.shape();
    let cout = spec.out_channels;
    let p = g.out_h * g.out_w;
    let k = cin * spec.kernel.0 * spec.kernel.1;
    let mut out = Tensor4::zeros([n, cout, g.out_h, g.out_w]);
    let wm = MatRef::new(w.data(), cout, k);
    let direct = g.is_identity_1x1();
    let mut cols = Vec::new();
    for ni in 0..n {
        let xi = x.item(ni);
        let oi = out.item_mut(ni);
        if direct {
            matmul(wm, MatRef::new(xi, k, p), oi, false);
        } else {
            for rows in bands(&g, k) {
                let tp = rows.len() * g.out_w;
                cols.resize(k * tp, T::zero());
                im2col(xi, cin, &g, rows.clone(), &mut cols);
                matmul_ld(wm, MatRef::new(&cols, k, tp), &mut oi[rows.start * g.out_w..], p, false);
            }
        }
        add_bias(oi, b, p);
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor4<T>>,
    pub dw: Option<Tensor4<T>>,
    pub db: Tensor4<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let g = check_conv_shapes(x, w, None, spec)?;
    let [n, cin, _, _] = x.shape();
    let cout = spec.out_channels;
    let p = g.out_h * g.out_w;
    let k = cin * spec.kernel.0 * spec.kernel.1;
    let wm = MatRef::new(w.data(), cout, k);
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor4::zeros(w.shape()));
    let direct = g.is_identity_1x1();
    let mut cols = Vec::new();
    for ni in 0..n {
        if direct {
            let dyi = MatRef::new(dy.item(ni), cout, p);
            if let Some(dw) = dw.as_mut() {
                matmul(dyi, MatRef::new(x.item(ni), k, p).t(), dw.data_mut(), true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul(wm.t(), dyi, dx.item_mut(ni), false);
            }
            continue;
        }
        for rows in bands(&g, k) {
            let tp = rows.len() * g.out_w;
            cols.resize(k * tp, T::zero());
            let dyi = MatRef::strided(&dy.item(ni)[rows.start * g.out_w..], cout, tp, p);
            if let Some(dw) = dw.as_mut() {
                im2col(x.item(ni), cin, &g, rows.clone(), &mut cols);
                matmul(dyi, MatRef::new(&cols, k, tp).t(), dw.data_mut(), true);
            }
            if let Some(dx) = dx.as_mut() {
                matmul(wm.t(), dyi, &mut cols, false);
                col2im(&cols, cin, &g, rows, dx.item_mut(ni));
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    })
}

/// Geometry of a per-channel `same` convolution with stride 1; weights are `(C, 1, kh, kw)`.
fn depthwise_spec(kernel: (usize, usize), dilation: (usize, usize)) -> ConvSpec {
    ConvSpec {
        in_channels: 1,
        out_channels: 1,
        kernel,
        dilation,
        stride: (1, 1),
        padding: Padding::Same,
        depthwise_separable: false,
    }
}

pub(crate) fn check_depthwise<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    dilation: (usize, usize),
) -> Result<Geom> {
    let [_, c, h, wd] = x.shape();
    let [wc, one, kh, kw] = w.shape();
    if wc != c || one != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "depthwise weight",
            expected: vec![c, 1, kh, kw],
            got: w.shape().to_vec(),
        });
    }
    check_bias(b, c)?;
    depthwise_spec((kh, kw), dilation).geometry(h, wd)
}

pub(crate) fn depthwise_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
    dilation: (usize, usize),
) -> Result<Tensor4<T>> {
    let g = check_depthwise(x, w, b, dilation)?;
    let [n, c, h, wd] = x.shape();
    let plane = h * wd;
    let mut out = Tensor4::zeros(x.shape());
    for ni in 0..n {
        let xi = x.item(ni);
        let oi = out.item_mut(ni);
        for ci in 0..c {
            let src = &xi[ci * plane..(ci + 1) * plane];
            let dst = &mut oi[ci * plane..(ci + 1) * plane];
            let taps = &w.data()[ci * g.kh * g.kw..(ci + 1) * g.kh * g.kw];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let wv = taps[ki * g.kw + kj];
                    let (lo, hi, off) = g.col_range(kj);
                    let s0 = (lo as isize + off) as usize;
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ki) else {
                            continue;
                        };
                        let srow = &src[iy * wd + s0..iy * wd + s0 + hi - lo];
                        let drow = &mut dst[oy * wd + lo..oy * wd + hi];
                        for (d, &s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
        add_bias(oi, b, plane);
    }
    Ok(out)
}

pub(crate) fn depthwise_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    dilation: (usize, usize),
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let g = check_depthwise(x, w, None, dilation)?;
    let [n, c, h, wd] = x.shape();
    let plane = h * wd;
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor4::zeros(w.shape()));
    let ktaps = g.kh * g.kw;
    for ni in 0..n {
        let xi = x.item(ni);
        let dyi = dy.item(ni);
        for ci in 0..c {
            let src = &xi[ci * plane..(ci + 1) * plane];
            let gsrc = &dyi[ci * plane..(ci + 1) * plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let tap = ci * ktaps + ki * g.kw + kj;
                    let wv = w.data()[tap];
                    let (lo, hi, off) = g.col_range(kj);
                    let s0 = (lo as isize + off) as usize;
                    let mut acc = T::zero();
                    for oy in 0..g.out_h {
                        let Some(iy) = g.in_row(oy, ki) else {
                            continue;
                        };
                        let grow = &gsrc[oy * wd + lo..oy * wd + hi];
                        if need_dw {
                            let srow = &src[iy * wd + s0..iy * wd + s0 + hi - lo];
                            acc += grow.iter().zip(srow).map(|(&a, &b)| a * b).sum::<T>();
                        }
                        if let Some(dx) = dx.as_mut() {
                            let drow =
                                &mut dx.item_mut(ni)[ci * plane + iy * wd + s0..ci * plane + iy * wd + s0 + hi - lo];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.data_mut()[tap] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    })
}

pub(crate) fn check_transposed<T: Real>(x: &Tensor4<T>, w: &Tensor4<T>, b: Option<&Tensor4<T>>) -> Result<usize> {
    let [_, cin, _, _] = x.shape();
    let [wi, cout, kh, kw] = w.shape();
    if wi != cin || kh != 2 || kw != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2x2 weight",
            expected: vec![cin, cout, 2, 2],
            got: w.shape().to_vec(),
        });
    }
    check_bias(b, cout)?;
    Ok(cout)
}

/// Transposed convolution with a 2x2 kernel and stride 2; weights are `(C_in, C_out, 2, 2)`.
pub(crate) fn conv_transpose2x2_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let cout = check_transposed(x, w, b)?;
    let [n, cin, h, wd] = x.shape();
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor4::zeros([n, cout, oh, ow]);
    let wmat = MatRef::new(w.data(), cin, cout * 4);
    let mut tmp = vec![T::zero(); cout * 4 * hw];
    for ni in 0..n {
        matmul(wmat.t(), MatRef::new(x.item(ni), cin, hw), &mut tmp, false);
        let oi = out.item_mut(ni);
        for co in 0..cout {
            let bias = b.map_or(T::zero(), |b| b.data()[co]);
            for ab in 0..4 {
                let (a, bb) = (ab / 2, ab % 2);
                let src = &tmp[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                for i in 0..h {
                    let row = &mut oi[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                    for j in 0..wd {
                        row[2 * j + bb] = src[i * wd + j] + bias;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    need_dx: bool,
    need_dw: bool,
) -> Result<ConvGrads<T>> {
    let cout = check_transposed(x, w, None)?;
    let [n, cin, h, wd] = x.shape();
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let wmat = MatRef::new(w.data(), cin, cout * 4);
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor4::zeros(w.shape()));
    let mut dtmp = vec![T::zero(); cout * 4 * hw];
    for ni in 0..n {
        let dyi = dy.item(ni);
        for co in 0..cout {
            for ab in 0..4 {
                let (a, bb) = (ab / 2, ab % 2);
                let dst = &mut dtmp[(co * 4 + ab) * hw..(co * 4 + ab + 1) * hw];
                for i in 0..h {
                    let row = &dyi[(co * oh + 2 * i + a) * ow..(co * oh + 2 * i + a + 1) * ow];
                    for j in 0..wd {
                        dst[i * wd + j] = row[2 * j + bb];
                    }
                }
            }
        }
        let dmat = MatRef::new(&dtmp, cout * 4, hw);
        if let Some(dx) = dx.as_mut() {
            matmul(wmat, dmat, dx.item_mut(ni), false);
        }
        if let Some(dw) = dw.as_mut() {
            matmul(MatRef::new(x.item(ni), cin, hw), dmat.t(), dw.data_mut(), true);
        }
    }
    Ok(ConvGrads {
        dx,
        dw,
        db: bias_grad(dy),
    })
}
