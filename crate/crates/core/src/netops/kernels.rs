//! Raw numeric kernels behind the tape operators. Everything here works on
//! flat row-major slices; shape bookkeeping lives in the tape.

/// `c = a·b + beta·c` with optional transposition of either factor.
///
/// `a` is `m×k` (or `k×m` when `a_t`), `b` is `k×n` (or `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every slice length to the dimensions and
    // strides passed in, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a zero-padded 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    ) -> Self {
        let ho = (h + 2 * (kh / 2) - kh) / stride + 1;
        let wo = (w + 2 * (kw / 2) - kw) / stride + 1;
        Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            ho,
            wo,
        }
    }

    fn pad_h(&self) -> usize {
        self.kh / 2
    }

    fn pad_w(&self) -> usize {
        self.kw / 2
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_cells(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1×1 stride-1 convolution reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }
}

/// Unfolds `x` (`c_in×h×w`) into a `(c_in·kh·kw) × (ho·wo)` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cells = g.out_cells();
    let mut cols = vec![0.0; g.patch_len() * cells];
    let (ph, pw) = (g.pad_h() as isize, g.pad_w() as isize);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * cells..(row + 1) * cells];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pw;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cells = g.out_cells();
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    let (ph, pw) = (g.pad_h() as isize, g.pad_w() as isize);
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * cells..(row + 1) * cells];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pw;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Forward convolution. Returns the output and the column matrix needed by
/// the backward pass (empty for pointwise convolutions).
pub(crate) fn conv_forward(
    x: &[f64],
    weights: &[f64],
    bias: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let cells = g.out_cells();
    let mut out = vec![0.0; g.c_out * cells];
    for (c, chunk) in out.chunks_mut(cells).enumerate() {
        chunk.fill(bias[c]);
    }
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, cells, weights, false, x, false, 1.0, &mut out);
        (out, Vec::new())
    } else {
        let cols = im2col(x, g);
        gemm(g.c_out, g.patch_len(), cells, weights, false, &cols, false, 1.0, &mut out);
        (out, cols)
    }
}

/// Gradients of a convolution with respect to input, weights and bias.
pub(crate) fn conv_backward(
    grad_out: &[f64],
    x: &[f64],
    cols: &[f64],
    weights: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cells = g.out_cells();
    let patch = g.patch_len();
    let cols = if g.is_pointwise() { x } else { cols };

    let mut dw = vec![0.0; g.c_out * patch];
    gemm(g.c_out, cells, patch, grad_out, false, cols, true, 0.0, &mut dw);

    let db = grad_out.chunks(cells).map(|c| c.iter().sum()).collect();

    let mut dcols = vec![0.0; patch * cells];
    gemm(patch, g.c_out, cells, weights, true, grad_out, false, 0.0, &mut dcols);
    let dx = if g.is_pointwise() {
        dcols
    } else {
        col2im(&dcols, g)
    };
    (dx, dw, db)
}

/// Row-major transpose of an `rows×cols` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
