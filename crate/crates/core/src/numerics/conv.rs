//! im2col-based 2-D cross-correlation kernels.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0 && self.stride == 1
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<S: Real>(g: &ConvGeom, x: &[S], cols: &mut [S]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize {
                            S::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Real>(g: &ConvGeom, cols: &[S], dx: &mut [S]) {
    let p = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let base = ih as usize * g.w;
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            plane[base + iw as usize] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<S: Real>(g: &ConvGeom, x: &[S], w: &[S], b: Option<&[S]>, out: &mut [S]) {
    let (kr, p) = (g.col_rows(), g.out_pixels());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![S::zero(); kr * p]
    };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        let src: &[S] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols
        };
        S::gemm(g.cout, kr, p, w, false, src, false, on, false);
        if let Some(b) = b {
            for (co, row) in on.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
}

/// Accumulates gradients w.r.t. input, weight and bias.
pub(crate) fn backward<S: Real>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    gout: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let (kr, p) = (g.col_rows(), g.out_pixels());
    if let Some(db) = db {
        for n in 0..g.n {
            for co in 0..g.cout {
                let off = (n * g.cout + co) * p;
                db[co] += gout[off..off + p].iter().copied().sum::<S>();
            }
        }
    }
    let mut cols = vec![S::zero(); if g.is_pointwise() { 0 } else { kr * p }];
    if let Some(dw) = dw {
        for n in 0..g.n {
            let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            let gn = &gout[n * g.cout * p..(n + 1) * g.cout * p];
            let src: &[S] = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols
            };
            S::gemm(g.cout, p, kr, gn, false, src, true, dw, true);
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![S::zero(); kr * p];
        for n in 0..g.n {
            let gn = &gout[n * g.cout * p..(n + 1) * g.cout * p];
            let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                S::gemm(kr, g.cout, p, w, true, gn, false, dxn, true);
            } else {
                S::gemm(kr, g.cout, p, w, true, gn, false, &mut dcols, false);
                col2im_add(g, &dcols, dxn);
            }
        }
    }
}
