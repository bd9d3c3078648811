//! Raw numeric kernels shared by graph operations and graph-free helpers.

use crate::scalar::Real;

/// Output length of a strided, zero-padded convolution axis, or `None` when
/// it would be empty.
pub fn conv2d_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct Conv2dDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dDims {
    /// Calls `f(weight_index, input_index, output_index)` for every
    /// in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.k;
        for o in 0..self.c_out {
            for c in 0..self.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((o * self.c_in + c) * k + ky) * k + kx;
                        for oy in 0..self.h_out {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..self.w_out {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let xi = (c * self.h + iy) * self.w + ix as usize;
                                let yi = (o * self.h_out + oy) * self.w_out + ox;
                                f(wi, xi, yi);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(d: &Conv2dDims, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane = d.h_out * d.w_out;
    let mut y = vec![T::zero(); d.c_out * plane];
    if let Some(b) = b {
        for o in 0..d.c_out {
            y[o * plane..(o + 1) * plane].fill(b[o]);
        }
    }
    d.for_each_tap(|wi, xi, yi| y[yi] = y[yi] + w[wi] * x[xi]);
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward<T: Real>(
    d: &Conv2dDims,
    x: &[T],
    w: &[T],
    gy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let plane = d.h_out * d.w_out;
    let db = (0..d.c_out)
        .map(|o| gy[o * plane..(o + 1) * plane].iter().copied().sum())
        .collect();
    d.for_each_tap(|wi, xi, yi| {
        dx[xi] = dx[xi] + w[wi] * gy[yi];
        dw[wi] = dw[wi] + x[xi] * gy[yi];
    });
    (dx, dw, db)
}

/// Per-output-index interpolation taps `(i0, i1, w0, w1)` for bilinear
/// upsampling of one axis by an integer factor (half-pixel centers, edge
/// clamped).
pub fn bilinear_axis<T: Real>(input: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    let out = input * factor;
    let scale = 1.0 / factor as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = src - i0 as f64;
            (i0, i1, T::lit(1.0 - frac), T::lit(frac))
        })
        .collect()
}

/// One bilinear sample contributing to a rotated kernel entry.
#[derive(Clone, Copy, Debug)]
pub struct RotationTap<T> {
    /// Destination position inside the `k*k` kernel plane.
    pub dst: usize,
    /// Source position inside the `k*k` kernel plane.
    pub src: usize,
    pub weight: T,
    /// Derivative of `weight` with respect to the rotation angle.
    pub dweight: T,
}

/// Bilinear taps that rotate a `k*k` kernel plane by `theta` radians about
/// its center. Entry `(r, c)` of the result samples the source plane at the
/// position obtained by rotating `(c - center, r - center)` by `-theta`;
/// samples falling outside the plane read zero.
pub fn rotation_taps<T: Real>(k: usize, theta: T) -> Vec<RotationTap<T>> {
    let center = T::lit(((k - 1) / 2) as f64);
    let (sin, cos) = theta.sin_cos();
    let last = (k - 1) as isize;
    let mut taps = Vec::with_capacity(4 * k * k);
    for r in 0..k {
        for c in 0..k {
            let x = T::lit(c as f64) - center;
            let y = T::lit(r as f64) - center;
            let gx = cos * x + sin * y + center;
            let gy = -sin * x + cos * y + center;
            let dgx = -sin * x + cos * y;
            let dgy = -cos * x - sin * y;
            let x0 = gx.floor();
            let y0 = gy.floor();
            let fx = gx - x0;
            let fy = gy - y0;
            let x0 = x0.to_isize().unwrap_or(isize::MIN / 2);
            let y0 = y0.to_isize().unwrap_or(isize::MIN / 2);
            let one = T::one();
            let corners = [
                (
                    x0,
                    y0,
                    (one - fx) * (one - fy),
                    -dgx * (one - fy) - (one - fx) * dgy,
                ),
                (x0 + 1, y0, fx * (one - fy), dgx * (one - fy) - fx * dgy),
                (x0, y0 + 1, (one - fx) * fy, -dgx * fy + (one - fx) * dgy),
                (x0 + 1, y0 + 1, fx * fy, dgx * fy + fx * dgy),
            ];
            for (sx, sy, weight, dweight) in corners {
                if sx < 0 || sy < 0 || sx > last || sy > last {
                    continue;
                }
                taps.push(RotationTap {
                    dst: r * k + c,
                    src: sy as usize * k + sx as usize,
                    weight,
                    dweight,
                });
            }
        }
    }
    taps
}
