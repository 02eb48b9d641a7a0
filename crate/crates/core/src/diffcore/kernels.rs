//! Raw NHWC loops behind the convolution and pooling operators.
//!
//! Layouts: activations `[N, H, W, C]`, kernels `[KH, KW, C_in, C_out]`.
//! Convolution is cross-correlation (no kernel flip).

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Geom {
    pub fn from_shape(s: &[usize]) -> Self {
        Self {
            n: s[0],
            h: s[1],
            w: s[2],
            c: s[3],
        }
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.n, self.h, self.w, self.c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Kernel {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Kernel {
    pub fn from_shape(s: &[usize]) -> Self {
        Self {
            kh: s[0],
            kw: s[1],
            cin: s[2],
            cout: s[3],
        }
    }

    #[inline]
    pub fn at(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.kw + kx) * self.cin + ci) * self.cout
    }
}

/// Maps an output position and kernel tap to an input coordinate, if in bounds.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let p = (o * stride + k) as isize - pad as isize;
    (p >= 0 && (p as usize) < limit).then_some(p as usize)
}

pub(crate) fn conv2d_out(x: Geom, k: Kernel, stride: usize, pad: usize) -> Option<Geom> {
    let hp = x.h + 2 * pad;
    let wp = x.w + 2 * pad;
    if hp < k.kh || wp < k.kw || stride == 0 {
        return None;
    }
    Some(Geom {
        n: x.n,
        h: (hp - k.kh) / stride + 1,
        w: (wp - k.kw) / stride + 1,
        c: k.cout,
    })
}

pub(crate) fn conv2d_forward(
    x: &[f32],
    xg: Geom,
    w: &[f32],
    k: Kernel,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    og: Geom,
) -> Vec<f32> {
    let mut out = vec![0.0f32; og.n * og.h * og.w * og.c];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                let orow = &mut out[o..o + k.cout];
                if let Some(b) = bias {
                    orow.copy_from_slice(b);
                }
                for ky in 0..k.kh {
                    let Some(iy) = src(oy, ky, stride, pad, xg.h) else { continue };
                    for kx in 0..k.kw {
                        let Some(ix) = src(ox, kx, stride, pad, xg.w) else { continue };
                        let i = xg.at(n, iy, ix);
                        for ci in 0..k.cin {
                            let xv = x[i + ci];
                            let wi = k.at(ky, kx, ci);
                            for (ov, &wv) in orow.iter_mut().zip(&w[wi..wi + k.cout]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of conv2d with respect to input, kernel and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &[f32],
    og: Geom,
    x: &[f32],
    xg: Geom,
    w: &[f32],
    k: Kernel,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; k.cout];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                let grow = &g[o..o + k.cout];
                for (d, &gv) in db.iter_mut().zip(grow) {
                    *d += gv;
                }
                for ky in 0..k.kh {
                    let Some(iy) = src(oy, ky, stride, pad, xg.h) else { continue };
                    for kx in 0..k.kw {
                        let Some(ix) = src(ox, kx, stride, pad, xg.w) else { continue };
                        let i = xg.at(n, iy, ix);
                        for ci in 0..k.cin {
                            let wi = k.at(ky, kx, ci);
                            let xv = x[i + ci];
                            let mut acc = 0.0f32;
                            for ((dwv, &wv), &gv) in
                                dw[wi..wi + k.cout].iter_mut().zip(&w[wi..wi + k.cout]).zip(grow)
                            {
                                *dwv += xv * gv;
                                acc += wv * gv;
                            }
                            dx[i + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn tconv2d_out(x: Geom, k: Kernel, stride: usize, pad: usize) -> Option<Geom> {
    if stride == 0 {
        return None;
    }
    let h = (x.h - 1) * stride + k.kh;
    let w = (x.w - 1) * stride + k.kw;
    if h <= 2 * pad || w <= 2 * pad {
        return None;
    }
    Some(Geom {
        n: x.n,
        h: h - 2 * pad,
        w: w - 2 * pad,
        c: k.cout,
    })
}

/// Transposed convolution: scatters each input pixel through the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv2d_forward(
    x: &[f32],
    xg: Geom,
    w: &[f32],
    k: Kernel,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
    og: Geom,
) -> Vec<f32> {
    let mut out = vec![0.0f32; og.n * og.h * og.w * og.c];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(og.c) {
            row.copy_from_slice(b);
        }
    }
    for n in 0..xg.n {
        for iy in 0..xg.h {
            for ix in 0..xg.w {
                let i = xg.at(n, iy, ix);
                for ky in 0..k.kh {
                    let Some(oy) = src(iy, ky, stride, pad, og.h) else { continue };
                    for kx in 0..k.kw {
                        let Some(ox) = src(ix, kx, stride, pad, og.w) else { continue };
                        let o = og.at(n, oy, ox);
                        for ci in 0..k.cin {
                            let xv = x[i + ci];
                            let wi = k.at(ky, kx, ci);
                            for (ov, &wv) in out[o..o + k.cout].iter_mut().zip(&w[wi..wi + k.cout]) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tconv2d_backward(
    g: &[f32],
    og: Geom,
    x: &[f32],
    xg: Geom,
    w: &[f32],
    k: Kernel,
    stride: usize,
    pad: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; k.cout];
    for row in g.chunks_exact(og.c) {
        for (d, &gv) in db.iter_mut().zip(row) {
            *d += gv;
        }
    }
    for n in 0..xg.n {
        for iy in 0..xg.h {
            for ix in 0..xg.w {
                let i = xg.at(n, iy, ix);
                for ky in 0..k.kh {
                    let Some(oy) = src(iy, ky, stride, pad, og.h) else { continue };
                    for kx in 0..k.kw {
                        let Some(ox) = src(ix, kx, stride, pad, og.w) else { continue };
                        let o = og.at(n, oy, ox);
                        let grow = &g[o..o + k.cout];
                        for ci in 0..k.cin {
                            let wi = k.at(ky, kx, ci);
                            let xv = x[i + ci];
                            let mut acc = 0.0f32;
                            for ((dwv, &wv), &gv) in
                                dw[wi..wi + k.cout].iter_mut().zip(&w[wi..wi + k.cout]).zip(grow)
                            {
                                *dwv += xv * gv;
                                acc += wv * gv;
                            }
                            dx[i + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn pool_out(x: Geom, kh: usize, kw: usize, sh: usize, sw: usize) -> Option<Geom> {
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 || x.h < kh || x.w < kw {
        return None;
    }
    Some(Geom {
        n: x.n,
        h: (x.h - kh) / sh + 1,
        w: (x.w - kw) / sw + 1,
        c: x.c,
    })
}

/// Returns pooled values and the flat input index of every maximum.
pub(crate) fn max_pool_forward(
    x: &[f32],
    xg: Geom,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    og: Geom,
) -> (Vec<f32>, Vec<usize>) {
    let len = og.n * og.h * og.w * og.c;
    let mut out = vec![f32::NEG_INFINITY; len];
    let mut arg = vec![0usize; len];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = xg.at(n, oy * sh + ky, ox * sw + kx);
                        for c in 0..og.c {
                            if x[i + c] > out[o + c] {
                                out[o + c] = x[i + c];
                                arg[o + c] = i + c;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool_forward(
    x: &[f32],
    xg: Geom,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    og: Geom,
) -> Vec<f32> {
    let inv = 1.0 / (kh * kw) as f32;
    let mut out = vec![0.0f32; og.n * og.h * og.w * og.c];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = xg.at(n, oy * sh + ky, ox * sw + kx);
                        for c in 0..og.c {
                            out[o + c] += x[i + c];
                        }
                    }
                }
                for v in &mut out[o..o + og.c] {
                    *v *= inv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avg_pool_backward(
    g: &[f32],
    og: Geom,
    xg: Geom,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
) -> Vec<f32> {
    let inv = 1.0 / (kh * kw) as f32;
    let mut dx = vec![0.0f32; xg.n * xg.h * xg.w * xg.c];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                for ky in 0..kh {
                    for kx in 0..kw {
                        let i = xg.at(n, oy * sh + ky, ox * sw + kx);
                        for c in 0..og.c {
                            dx[i + c] += g[o + c] * inv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub(crate) fn upsample_forward(x: &[f32], xg: Geom, f: usize) -> (Vec<f32>, Geom) {
    let og = Geom {
        n: xg.n,
        h: xg.h * f,
        w: xg.w * f,
        c: xg.c,
    };
    let mut out = vec![0.0f32; og.n * og.h * og.w * og.c];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                let i = xg.at(n, oy / f, ox / f);
                out[o..o + og.c].copy_from_slice(&x[i..i + xg.c]);
            }
        }
    }
    (out, og)
}

pub(crate) fn upsample_backward(g: &[f32], og: Geom, xg: Geom, f: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; xg.n * xg.h * xg.w * xg.c];
    for n in 0..og.n {
        for oy in 0..og.h {
            for ox in 0..og.w {
                let o = og.at(n, oy, ox);
                let i = xg.at(n, oy / f, ox / f);
                for c in 0..og.c {
                    dx[i + c] += g[o + c];
                }
            }
        }
    }
    dx
}
