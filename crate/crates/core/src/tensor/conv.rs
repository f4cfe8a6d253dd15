//! Stride-1, zero-padded ("same") 2-D convolution kernels built on im2col
//! and a blocked GEMM.

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn hw(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `[m, k] x [k, n]`.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c, (n, 1));
    c
}

/// Gradients of `c = a b` given `dc`: returns `(dc b^T, a^T dc)`.
pub(crate) fn matmul_backward(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    dc: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    gemm(m, n, k, dc, (n, 1), b, (1, n), 0.0, &mut da, (k, 1));
    let mut db = vec![0.0; k * n];
    gemm(k, m, n, a, (1, k), dc, (n, 1), 0.0, &mut db, (n, 1));
    (da, db)
}

/// Copies the shifted neighbourhoods of one image into `cols`, laid out as
/// `[in_ch * kernel * kernel, height * width]`.
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (h, w, hw, k) = (g.height, g.width, g.hw(), g.kernel);
    let pad = (k / 2) as isize;
    for c in 0..g.in_ch {
        let plane = &image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let row = &mut cols[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    shift_copy(out, src, dx);
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the image grid; adjoint of [`im2col`].
fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (h, w, hw, k) = (g.height, g.width, g.hw(), g.kernel);
    let pad = (k / 2) as isize;
    for c in 0..g.in_ch {
        let plane = &mut image[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * hw;
                let row = &cols[row..row + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    shift_add(dst, src, dx);
                }
            }
        }
    }
}

/// `out[x] = src[x + dx]`, zero outside the source row.
fn shift_copy(out: &mut [f64], src: &[f64], dx: isize) {
    let w = out.len() as isize;
    out.fill(0.0);
    let lo = (-dx).max(0);
    let hi = (w - dx).min(w);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s = (lo as isize + dx) as usize;
        out[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
    }
}

/// `dst[x + dx] += src[x]` where in range.
fn shift_add(dst: &mut [f64], src: &[f64], dx: isize) {
    let w = src.len() as isize;
    let lo = (-dx).max(0);
    let hi = (w - dx).min(w);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let s = (lo as isize + dx) as usize;
        for (d, v) in dst[s..s + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
            *d += v;
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let hw = g.hw();
    let patch = g.patch();
    let mut out = vec![0.0; g.batch * g.out_ch * hw];
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![0.0; patch * hw] };
    for b in 0..g.batch {
        let image = &input[b * g.in_ch * hw..(b + 1) * g.in_ch * hw];
        let dst = &mut out[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if g.kernel == 1 {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(g.out_ch, patch, hw, weight, (patch, 1), src, (hw, 1), beta, dst, (hw, 1));
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_input, need_weight, need_bias) = need;
    let hw = g.hw();
    let patch = g.patch();
    let mut d_input = need_input.then(|| vec![0.0; input.len()]);
    let mut d_weight = need_weight.then(|| vec![0.0; weight.len()]);
    let mut d_bias = need_bias.then(|| vec![0.0; g.out_ch]);
    let mut cols = if g.kernel == 1 { Vec::new() } else { vec![0.0; patch * hw] };
    let mut d_cols = if g.kernel == 1 || !need_input {
        Vec::new()
    } else {
        vec![0.0; patch * hw]
    };
    for b in 0..g.batch {
        let image = &input[b * g.in_ch * hw..(b + 1) * g.in_ch * hw];
        let gout = &grad_out[b * g.out_ch * hw..(b + 1) * g.out_ch * hw];
        if let Some(db) = d_bias.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += gout[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
        }
        if let Some(dw) = d_weight.as_mut() {
            let src: &[f64] = if g.kernel == 1 {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dW[o, p] += sum_s gout[o, s] * cols[p, s]
            gemm(g.out_ch, hw, patch, gout, (hw, 1), src, (1, hw), 1.0, dw, (patch, 1));
        }
        if let Some(dx) = d_input.as_mut() {
            let dimg = &mut dx[b * g.in_ch * hw..(b + 1) * g.in_ch * hw];
            if g.kernel == 1 {
                gemm(g.in_ch, g.out_ch, hw, weight, (1, patch), gout, (hw, 1), 1.0, dimg, (hw, 1));
            } else {
                gemm(patch, g.out_ch, hw, weight, (1, patch), gout, (hw, 1), 0.0, &mut d_cols, (hw, 1));
                col2im(g, &d_cols, dimg);
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
