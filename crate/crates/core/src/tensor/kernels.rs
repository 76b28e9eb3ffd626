// Raw loop kernels. Loop nesting is fixed so that summation order, and
// therefore every result bit, is reproducible.

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn mm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn mm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Visit every (input index, weight index, output index) triple of a
    /// strided, zero-padded cross-correlation.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let g = *self;
        for co in 0..g.c_out {
            for ci in 0..g.c_in {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wi = ((co * g.c_in + ci) * g.kh + ky) * g.kw + kx;
                        for oy in 0..g.oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            let in_row = (ci * g.h + iy as usize) * g.w;
                            let out_row = (co * g.oh + oy) * g.ow;
                            for ox in 0..g.ow {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                f(in_row + ix as usize, wi, out_row + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom, out: &mut [f64]) {
    g.for_each(|i, w, o| out[o] += wt[w] * x[i]);
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    g: &ConvGeom,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        g.for_each(|i, w, o| dx[i] += wt[w] * dout[o]);
    }
    if let Some(dw) = dw {
        g.for_each(|i, w, o| dw[w] += x[i] * dout[o]);
    }
}

/// Transposed convolution geometry reuses [`ConvGeom`] with the roles of
/// input and output swapped: `h×w` is the transposed-conv *output* and
/// `oh×ow` its *input*. Weights are laid out `[c_in_t × c_out_t × kh × kw]`,
/// which is exactly the `[c_out × c_in × kh × kw]` layout of the adjoint
/// convolution.
pub(crate) fn conv_transpose_forward(x: &[f64], wt: &[f64], g: &ConvGeom, out: &mut [f64]) {
    // y = Convᵀ x: scatter each input element through the adjoint map.
    g.for_each(|i, w, o| out[i] += wt[w] * x[o]);
}

pub(crate) fn conv_transpose_backward(
    x: &[f64],
    wt: &[f64],
    g: &ConvGeom,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
) {
    if let Some(dx) = dx {
        g.for_each(|i, w, o| dx[o] += wt[w] * dout[i]);
    }
    if let Some(dw) = dw {
        g.for_each(|i, w, o| dw[w] += x[o] * dout[i]);
    }
}

/// One axis of half-pixel bilinear interpolation: for each output position,
/// the two source indices and the weight of the upper one.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// out[q, s] = Σ_c emb[q, c] · fmap[c, s], accumulated in increasing `c`.
pub(crate) fn contract_forward(
    emb: &[f64],
    fmap: &[f64],
    q: usize,
    c: usize,
    s: usize,
    out: &mut [f64],
) {
    for qi in 0..q {
        let out_row = &mut out[qi * s..(qi + 1) * s];
        for ci in 0..c {
            let e = emb[qi * c + ci];
            let f_row = &fmap[ci * s..(ci + 1) * s];
            for (o, &f) in out_row.iter_mut().zip(f_row) {
                *o += e * f;
            }
        }
    }
}

/// Reference triple loop for the mask contraction `out[q,h,w] = Σ_c e[q,c]·f[c,h,w]`.
///
/// Exposed for tests that pin the optimized kernel to this loop bit-for-bit.
pub fn contract_loop_oracle(
    emb: &[f64],
    fmap: &[f64],
    q: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; q * h * w];
    for qi in 0..q {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    acc += emb[qi * c + ci] * fmap[(ci * h + y) * w + x];
                }
                out[(qi * h + y) * w + x] = acc;
            }
        }
    }
    out
}
