//! Single-sample layer kernels on flat (channels, height, width) buffers.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds input patches into a (cin·k·k) × (out_h·out_w) matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch() * p];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut dx = vec![T::zero(); g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `out = W · im2col(x) + b`, weights shaped (cout, cin·k·k).
pub(crate) fn conv_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let kk = g.patch();
    let mut out = vec![T::zero(); g.cout * p];
    for (o, &b) in bias.iter().enumerate() {
        out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = b);
    }
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let cols;
    let cols_ref = if pointwise {
        x
    } else {
        cols = im2col(x, g);
        &cols
    };
    T::gemm(g.cout, kk, p, weight, (kk as isize, 1), cols_ref, (p as isize, 1), T::one(), &mut out, (p as isize, 1));
    out
}

pub(crate) struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub input: Vec<T>,
}

pub(crate) fn conv_backward<T: Real>(x: &[T], weight: &[T], dout: &[T], g: &ConvGeom) -> ConvGrads<T> {
    let p = g.positions();
    let kk = g.patch();
    let pointwise = g.k == 1 && g.stride == 1 && g.pad == 0;
    let cols;
    let cols_ref = if pointwise {
        x
    } else {
        cols = im2col(x, g);
        &cols
    };
    // dW = dout · colsᵀ
    let mut dw = vec![T::zero(); g.cout * kk];
    T::gemm(g.cout, p, kk, dout, (p as isize, 1), cols_ref, (1, p as isize), T::zero(), &mut dw, (kk as isize, 1));
    let db = (0..g.cout).map(|o| dout[o * p..(o + 1) * p].iter().fold(T::zero(), |a, &v| a + v)).collect();
    // dcols = Wᵀ · dout
    let mut dcols = vec![T::zero(); kk * p];
    T::gemm(kk, g.cout, p, weight, (1, kk as isize), dout, (p as isize, 1), T::zero(), &mut dcols, (p as isize, 1));
    let dx = if pointwise { dcols } else { col2im(&dcols, g) };
    ConvGrads { weight: dw, bias: db, input: dx }
}

/// 2×2/2 max pool; returns the output and the flat input index of each max.
pub(crate) fn maxpool_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (ch * h + 2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(dout: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

/// `y = W x + b` with W shaped (cout, cin).
pub(crate) fn dense_forward<T: Real>(x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let cin = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| weight[o * cin..(o + 1) * cin].iter().zip(x).fold(b, |a, (&w, &v)| a + w * v))
        .collect()
}

/// Returns (dW = dout ⊗ x, db = dout, dx = Wᵀ dout).
pub(crate) fn dense_backward<T: Real>(x: &[T], weight: &[T], dout: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin = x.len();
    let mut dw = Vec::with_capacity(dout.len() * cin);
    for &g in dout {
        dw.extend(x.iter().map(|&v| g * v));
    }
    let mut dx = vec![T::zero(); cin];
    for (o, &g) in dout.iter().enumerate() {
        for (d, &w) in dx.iter_mut().zip(&weight[o * cin..(o + 1) * cin]) {
            *d += w * g;
        }
    }
    (dw, dout.to_vec(), dx)
}
