// Raw f64 kernels shared by the graph's forward and backward passes.

/// `a[M×K] · b[K×P]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[M×K] · b[P×K]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let br = &b[j * k..(j + 1) * k];
            out[i * p + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[K×M]ᵀ · b[K×P]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for kk in 0..k {
        let br = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * p..(i + 1) * p].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a stride-1 "same" convolution over a `C×H×W` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Width of a zero-padded row.
    fn wide(&self) -> usize {
        self.w + 2 * self.pad()
    }

    /// Length of one padded input plane, with slack so every tap offset
    /// stays in bounds for the full wide-output span.
    fn padded_plane(&self) -> usize {
        (self.h + 2 * self.pad()) * self.wide() + 2 * self.pad()
    }

    /// Wide output span: `h` rows of `wide()` columns, the last `2·pad`
    /// columns of each row being scratch.
    fn span(&self) -> usize {
        self.h * self.wide()
    }

    fn tap_offset(&self, ky: usize, kx: usize) -> usize {
        ky * self.wide() + kx
    }

    /// Copies a `C×H×W` tensor into zero-padded planes.
    fn pad_input(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let (p, wide, pp) = (self.pad(), self.wide(), self.padded_plane());
        let mut out = vec![0.0; channels * pp];
        for c in 0..channels {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                let at = c * pp + (y + p) * wide + p;
                out[at..at + self.w].copy_from_slice(src);
            }
        }
        out
    }

    /// Places a `C×H×W` tensor into wide rows with zero scratch columns.
    fn widen(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let (wide, span) = (self.wide(), self.span());
        let mut out = vec![0.0; channels * span];
        for c in 0..channels {
            for y in 0..self.h {
                let src = &x[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                out[c * span + y * wide..c * span + y * wide + self.w].copy_from_slice(src);
            }
        }
        out
    }
}

pub(crate) fn conv2d_forward(input: &[f64], weight: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let (span, pp, kk) = (d.span(), d.padded_plane(), d.k * d.k);
    let xp = d.pad_input(input, d.c_in);
    let mut wide = vec![0.0; span];
    let mut out = Vec::with_capacity(d.c_out * d.h * d.w);
    for co in 0..d.c_out {
        wide.fill(bias[co]);
        for ci in 0..d.c_in {
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = weight[(co * d.c_in + ci) * kk + ky * d.k + kx];
                    let off = ci * pp + d.tap_offset(ky, kx);
                    for (o, &x) in wide.iter_mut().zip(&xp[off..off + span]) {
                        *o += wv * x;
                    }
                }
            }
        }
        for row in wide.chunks_exact(d.wide()) {
            out.extend_from_slice(&row[..d.w]);
        }
    }
    out
}

/// `(d_input, d_weight, d_bias)`, each present only when requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn conv2d_backward(
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d: ConvDims,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let (span, pp, kk, p) = (d.span(), d.padded_plane(), d.k * d.k, d.pad());
    let dw_out = d.widen(d_out, d.c_out);
    let d_w = want_weight.then(|| {
        let xp = d.pad_input(input, d.c_in);
        let mut dw = vec![0.0; weight.len()];
        for co in 0..d.c_out {
            let g = &dw_out[co * span..(co + 1) * span];
            for ci in 0..d.c_in {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let off = ci * pp + d.tap_offset(ky, kx);
                        dw[(co * d.c_in + ci) * kk + ky * d.k + kx] =
                            g.iter().zip(&xp[off..off + span]).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        dw
    });
    let d_in = want_input.then(|| {
        let mut dxp = vec![0.0; d.c_in * pp];
        for co in 0..d.c_out {
            let g = &dw_out[co * span..(co + 1) * span];
            for ci in 0..d.c_in {
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = weight[(co * d.c_in + ci) * kk + ky * d.k + kx];
                        let off = ci * pp + d.tap_offset(ky, kx);
                        for (o, &gv) in dxp[off..off + span].iter_mut().zip(g) {
                            *o += wv * gv;
                        }
                    }
                }
            }
        }
        let mut di = Vec::with_capacity(d.c_in * d.h * d.w);
        for ci in 0..d.c_in {
            for y in 0..d.h {
                let at = ci * pp + (y + p) * d.wide() + p;
                di.extend_from_slice(&dxp[at..at + d.w]);
            }
        }
        di
    });
    let plane = d.h * d.w;
    let d_b = want_bias.then(|| {
        (0..d.c_out)
            .map(|co| d_out[co * plane..(co + 1) * plane].iter().sum())
            .collect()
    });
    (d_in, d_w, d_b)
}
