//! Raw numeric kernels used by tape ops. No gradient bookkeeping here.

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds a `[C,H,W]` image into a `[C*kh*kw, Ho*Wo]` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[oy * wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C,H,W]` buffer.
pub fn col2im<T: Real>(cols_buf: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    let mut out = vec![T::zero(); g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + iy as usize) * g.width;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            let d = &mut out[base + ix as usize];
                            *d = *d + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max-pool over `[C,H,W]`; returns values and flat argmax indices.
pub fn max_pool<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut vals = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut bi = 0;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        // strict > keeps the first maximum, so ties are deterministic
                        if x[i] > best {
                            best = x[i];
                            bi = i;
                        }
                    }
                }
                vals.push(best);
                arg.push(bi);
            }
        }
    }
    (vals, arg, ho, wo)
}
