//! Raw numeric kernels behind the taped primitives. No shape checking here;
//! callers in `tape.rs` validate before dispatching.

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a·b` (or `out += a·b` when `accumulate`), `out` row-major.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], accumulate: bool) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub height: usize,
    pub width: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn columns(&self) -> usize {
        self.batch * self.plane()
    }
}

/// Unfold `[B,C,H,W]` into a `[C*kh*kw, B*H*W]` matrix with zero same-padding.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    let ncols = g.columns();
    let mut cols = vec![0.0; g.patch() * ncols];
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_c + c) * plane..(b * g.in_c + c + 1) * plane];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + i as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let x0 = pw.saturating_sub(j);
                        let x1 = (w + pw).saturating_sub(j).min(w);
                        for x in x0..x1 {
                            dst[y * w + x] = src[sy * w + x + j - pw];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[B,C,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (h, w) = (g.height, g.width);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let plane = g.plane();
    let ncols = g.columns();
    for c in 0..g.in_c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &src_row[b * plane..(b + 1) * plane];
                    let dst = &mut out[(b * g.in_c + c) * plane..(b * g.in_c + c + 1) * plane];
                    for y in 0..h {
                        let sy = y as isize + i as isize - ph as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        let x0 = pw.saturating_sub(j);
                        let x1 = (w + pw).saturating_sub(j).min(w);
                        for x in x0..x1 {
                            dst[sy * w + x + j - pw] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

/// `[K, B*P]` (channel-major) to `[B, K, P]` (batch-major).
pub(crate) fn channel_to_batch_major(src: &[f64], batch: usize, chans: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for k in 0..chans {
        for b in 0..batch {
            let s = &src[k * batch * plane + b * plane..k * batch * plane + (b + 1) * plane];
            out[(b * chans + k) * plane..(b * chans + k + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

/// Inverse of [`channel_to_batch_major`].
pub(crate) fn batch_to_channel_major(src: &[f64], batch: usize, chans: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for k in 0..chans {
            let s = &src[(b * chans + k) * plane..(b * chans + k + 1) * plane];
            out[k * batch * plane + b * plane..k * batch * plane + (b + 1) * plane].copy_from_slice(s);
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
