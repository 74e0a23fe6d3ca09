//! Layer primitives with explicit backward passes. Feature maps are
//! channel-major `(C, H, W)` arrays in standard layout.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{
    Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut2, CowArray, Ix2,
};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a network (`f32` for training, `f64` for
/// gradient checks).
pub trait Scalar:
    ndarray::LinalgScalar + Float + FromPrimitive + Default + Debug + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

fn conv_out(n: usize, k: usize, pad: usize) -> usize {
    n + 2 * pad + 1 - k
}

/// Unfolds a stride-1, zero-padded `k`×`k` convolution input into a
/// `(C·k·k, Ho·Wo)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &ArrayView3<'_, T>, k: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (conv_out(h, k, pad), conv_out(w, k, pad));
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cs[row * ho * wo..(row + 1) * ho * wo];
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = wo.min((w + pad).saturating_sub(kx));
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &plane[(iy - pad) * w..(iy - pad + 1) * w];
                    let ix_lo = ox_lo + kx - pad;
                    dst[oy * wo + ox_lo..oy * wo + ox_hi]
                        .copy_from_slice(&src[ix_lo..ix_lo + (ox_hi - ox_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Scalar>(
    cols: &Array2<T>,
    dims: (usize, usize, usize),
    k: usize,
    pad: usize,
) -> Array3<T> {
    let (c, h, w) = dims;
    let (ho, wo) = (conv_out(h, k, pad), conv_out(w, k, pad));
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::<T>::zeros(dims);
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cs[row * ho * wo..(row + 1) * ho * wo];
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = wo.min((w + pad).saturating_sub(kx));
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let ix_lo = ox_lo + kx - pad;
                    let dst = &mut plane
                        [(iy - pad) * w + ix_lo..(iy - pad) * w + ix_lo + (ox_hi - ox_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *d = *d + *s;
                    }
                }
            }
        }
    }
    x
}

fn unfold<'a, T: Scalar>(x: &'a ArrayView3<'_, T>, k: usize, pad: usize) -> CowArray<'a, T, Ix2> {
    if k == 1 && pad == 0 {
        let (c, h, w) = x.dim();
        CowArray::from(
            ArrayView2::from_shape((c, h * w), x.as_slice().expect("standard layout")).unwrap(),
        )
    } else {
        CowArray::from(im2col(x, k, pad))
    }
}

/// Stride-1 convolution with `(O, C, k, k)` weights.
pub(crate) fn conv2d<T: Scalar>(
    x: &ArrayView3<'_, T>,
    weight: &[T],
    bias: &[T],
    out_c: usize,
    k: usize,
    pad: usize,
) -> Array3<T> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (conv_out(h, k, pad), conv_out(w, k, pad));
    let cols = unfold(x, k, pad);
    let wmat = ArrayView2::from_shape((out_c, c * k * k), weight).unwrap();
    let mut out = Array2::<T>::zeros((out_c, ho * wo));
    general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut out);
    for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
        row.mapv_inplace(|v| v + b);
    }
    out.into_shape_with_order((out_c, ho, wo)).unwrap()
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &ArrayView3<'_, T>,
    weight: &[T],
    dy: &Array3<T>,
    k: usize,
    pad: usize,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Array3<T>> {
    let (c, _, _) = x.dim();
    let (out_c, ho, wo) = dy.dim();
    let dy2 =
        ArrayView2::from_shape((out_c, ho * wo), dy.as_slice().expect("standard layout")).unwrap();
    for (g, row) in db.iter_mut().zip(dy2.rows()) {
        *g = *g + row.sum();
    }
    let cols = unfold(x, k, pad);
    let mut dwm = ArrayViewMut2::from_shape((out_c, c * k * k), dw).unwrap();
    general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dwm);
    if !need_dx {
        return None;
    }
    let wmat = ArrayView2::from_shape((out_c, c * k * k), weight).unwrap();
    let mut dcols = Array2::<T>::zeros((c * k * k, ho * wo));
    general_mat_mul(T::one(), &wmat.t(), &dy2, T::zero(), &mut dcols);
    if k == 1 && pad == 0 {
        Some(dcols.into_shape_with_order(x.dim()).unwrap())
    } else {
        Some(col2im(&dcols, x.dim(), k, pad))
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes gradient entries where the forward ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Scalar>(dy: &mut Array3<T>, y: &Array3<T>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
}

/// 2×2 stride-2 max pooling; odd trailing rows/columns form partial windows.
/// Returns the pooled map and the flat in-plane argmax of every output.
pub(crate) fn maxpool2<T: Scalar>(x: &Array3<T>) -> (Array3<T>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array3::<T>::zeros((c, ho, wo));
    let mut arg = vec![0u32; c * ho * wo];
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = 2 * oy * w + 2 * ox;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        if plane[iy * w + ix] > plane[best] {
                            best = iy * w + ix;
                        }
                    }
                }
                let o = (ci * ho + oy) * wo + ox;
                os[o] = plane[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool2_backward<T: Scalar>(
    dy: &Array3<T>,
    argmax: &[u32],
    in_dims: (usize, usize, usize),
) -> Array3<T> {
    let (c, h, w) = in_dims;
    let (_, ho, wo) = dy.dim();
    let mut dx = Array3::<T>::zeros(in_dims);
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().expect("standard layout");
    for ci in 0..c {
        for i in 0..ho * wo {
            let o = ci * ho * wo + i;
            let idx = ci * h * w + argmax[o] as usize;
            dxs[idx] = dxs[idx] + dys[o];
        }
    }
    dx
}

/// The two input taps `(kernel index, input index)` feeding output
/// coordinate `g` of a stride-`s` learned upsampling with kernel `2s`.
fn taps(g: usize, s: usize, n: usize) -> [(usize, usize); 2] {
    let p = s / 2;
    let base = (g + p) / s;
    let r = (g + p) % s;
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    [(r, clamp(base as isize)), (r + s, clamp(base as isize - 1))]
}

/// Learned single-channel transposed convolution (stride `s`, kernel `2s`)
/// evaluated on the output window starting at `offset` of size `dims`.
/// Input indices beyond the border are clamped to the edge.
pub(crate) fn upsample<T: Scalar>(
    x: &Array2<T>,
    kernel: &[T],
    s: usize,
    offset: (usize, usize),
    dims: (usize, usize),
) -> Array2<T> {
    let k = 2 * s;
    let (n, m) = x.dim();
    Array2::from_shape_fn(dims, |(oy, ox)| {
        let ty = taps(oy + offset.0, s, n);
        let tx = taps(ox + offset.1, s, m);
        let mut acc = T::zero();
        for &(ky, iy) in &ty {
            for &(kx, ix) in &tx {
                acc = acc + kernel[ky * k + kx] * x[(iy, ix)];
            }
        }
        acc
    })
}

pub(crate) fn upsample_backward<T: Scalar>(
    x: &Array2<T>,
    kernel: &[T],
    s: usize,
    offset: (usize, usize),
    dy: &Array2<T>,
    dkernel: &mut [T],
) -> Array2<T> {
    let k = 2 * s;
    let (n, m) = x.dim();
    let mut dx = Array2::<T>::zeros((n, m));
    for ((oy, ox), &g) in dy.indexed_iter() {
        if g == T::zero() {
            continue;
        }
        let ty = taps(oy + offset.0, s, n);
        let tx = taps(ox + offset.1, s, m);
        for &(ky, iy) in &ty {
            for &(kx, ix) in &tx {
                let ki = ky * k + kx;
                dkernel[ki] = dkernel[ki] + g * x[(iy, ix)];
                dx[(iy, ix)] = dx[(iy, ix)] + g * kernel[ki];
            }
        }
    }
    dx
}

/// Bilinear interpolation weights for a `2s`×`2s` upsampling kernel.
pub(crate) fn bilinear_kernel(s: usize) -> Vec<f64> {
    let k = 2 * s;
    let center = s as f64 - 0.5;
    let f = |i: usize| 1.0 - (i as f64 - center).abs() / s as f64;
    (0..k * k).map(|i| f(i / k) * f(i % k)).collect()
}

/// Dense layer with `(out, in)` weights.
pub(crate) fn linear<T: Scalar>(x: &ArrayView1<'_, T>, weight: &[T], bias: &[T]) -> Array1<T> {
    let out = bias.len();
    let wmat = ArrayView2::from_shape((out, x.len()), weight).unwrap();
    let mut y = wmat.dot(x);
    for (v, &b) in y.iter_mut().zip(bias) {
        *v = *v + b;
    }
    y
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &ArrayView1<'_, T>,
    weight: &[T],
    dy: &Array1<T>,
    dw: &mut [T],
    db: &mut [T],
) -> Array1<T> {
    let (out, inp) = (dy.len(), x.len());
    for (g, &d) in db.iter_mut().zip(dy) {
        *g = *g + d;
    }
    for o in 0..out {
        let d = dy[o];
        if d == T::zero() {
            continue;
        }
        let row = &mut dw[o * inp..(o + 1) * inp];
        for (g, &xi) in row.iter_mut().zip(x) {
            *g = *g + d * xi;
        }
    }
    let wmat = ArrayView2::from_shape((out, inp), weight).unwrap();
    wmat.t().dot(dy)
}
