//! im2col / col2im lowering for 2-D convolution.

use crate::nn::Real;

/// Output length along one axis, or `None` if the kernel does not fit.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds one `C×H×W` sample into a `(C·k·k) × (ho·wo)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let p = ho * wo;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
