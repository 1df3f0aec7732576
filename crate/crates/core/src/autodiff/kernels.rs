//! Raw numeric kernels on flat slices. Everything here is shape-unchecked;
//! the graph layer validates shapes before calling in.

/// Strided matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn t(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with `c` row-major `m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f32, c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views cover every index the strides can reach; callers pass
    // slices sized from the same shapes used for m, k, n.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid (unpadded) 2-D convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x[N, C, H, W]` into `cols[C·kh·kw, N·OH·OW]`.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let npos = g.positions();
    let img = g.channels * g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let p = (c * g.kh + ki) * g.kw + kj;
                let row = &mut cols[p * npos..(p + 1) * npos];
                for n in 0..g.batch {
                    let plane = &x[n * img + c * g.height * g.width..];
                    let dst = &mut row[n * ohw..(n + 1) * ohw];
                    for y in 0..oh {
                        let src = &plane[(y * g.stride + ki) * g.width + kj..];
                        let d = &mut dst[y * ow..(y + 1) * ow];
                        if g.stride == 1 {
                            d.copy_from_slice(&src[..ow]);
                        } else {
                            for (xo, v) in d.iter_mut().enumerate() {
                                *v = src[xo * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back, accumulating into `x`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let npos = g.positions();
    let img = g.channels * g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let p = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[p * npos..(p + 1) * npos];
                for n in 0..g.batch {
                    let base = n * img + c * g.height * g.width;
                    let src = &row[n * ohw..(n + 1) * ohw];
                    for y in 0..oh {
                        let off = base + (y * g.stride + ki) * g.width + kj;
                        let s = &src[y * ow..(y + 1) * ow];
                        for (xo, v) in s.iter().enumerate() {
                            x[off + xo * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// `[A, B, L]` → `[B, A, L]` block transpose.
pub(crate) fn swap_outer(src: &[f32], a: usize, b: usize, l: usize, dst: &mut [f32]) {
    for i in 0..a {
        for j in 0..b {
            let s = &src[(i * b + j) * l..(i * b + j + 1) * l];
            dst[(j * a + i) * l..(j * a + i + 1) * l].copy_from_slice(s);
        }
    }
}

/// Row-wise numerically stable softmax over rows of length `k`.
pub(crate) fn softmax_rows(x: &[f32], k: usize, out: &mut [f32]) {
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (v, e) in row.iter().zip(o.iter_mut()) {
            *e = (*v - max).exp();
            sum += *e as f64;
        }
        let inv = (1.0 / sum) as f32;
        o.iter_mut().for_each(|e| *e *= inv);
    }
}

/// Row-wise log-softmax over rows of length `k`.
pub(crate) fn log_softmax_rows(x: &[f32], k: usize, out: &mut [f32]) {
    for (row, o) in x.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let sum: f64 = row.iter().map(|v| ((*v - max) as f64).exp()).sum();
        let lse = max as f64 + sum.ln();
        for (v, e) in row.iter().zip(o.iter_mut()) {
            *e = (*v as f64 - lse) as f32;
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Valid convolution, one sample at a time so the unfolded patch matrix
/// stays cache-resident. `out` is `[N, oc, OH, OW]` and is overwritten.
pub(crate) fn conv2d_forward(x: &[f32], w: &[f32], bias: &[f32], g: &ConvGeom, oc: usize, out: &mut [f32]) {
    let one = ConvGeom { batch: 1, ..*g };
    let (p, ohw) = (g.patch(), one.positions());
    let img = g.channels * g.height * g.width;
    let mut cols = vec![0.0; p * ohw];
    for n in 0..g.batch {
        im2col(&x[n * img..(n + 1) * img], &one, &mut cols);
        let o = &mut out[n * oc * ohw..(n + 1) * oc * ohw];
        for (plane, &bv) in o.chunks_exact_mut(ohw).zip(bias) {
            plane.fill(bv);
        }
        gemm(oc, p, ohw, View::rows(w, p), View::rows(&cols, ohw), 1.0, o);
    }
}

/// Gradients of [`conv2d_forward`]; each requested slot is accumulated into.
pub(crate) fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    oc: usize,
    mut gw: Option<&mut [f32]>,
    mut gb: Option<&mut [f32]>,
    mut gx: Option<&mut [f32]>,
) {
    let one = ConvGeom { batch: 1, ..*g };
    let (p, ohw) = (g.patch(), one.positions());
    let img = g.channels * g.height * g.width;
    let mut cols = vec![0.0; p * ohw];
    for n in 0..g.batch {
        let go = &gout[n * oc * ohw..(n + 1) * oc * ohw];
        if let Some(gb) = gb.as_deref_mut() {
            for (s, plane) in gb.iter_mut().zip(go.chunks_exact(ohw)) {
                *s += plane.iter().map(|v| *v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[n * img..(n + 1) * img], &one, &mut cols);
            gemm(oc, ohw, p, View::rows(go, ohw), View::t(&cols, ohw), 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(p, oc, ohw, View::t(w, p), View::rows(go, ohw), 0.0, &mut cols);
            col2im(&cols, &one, &mut gx[n * img..(n + 1) * img]);
        }
    }
}

/// Row counts at or below this use plain dot products instead of gemm,
/// whose packing overhead dominates for thin inputs.
pub(crate) const THIN_ROWS: usize = 4;

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were just detected.
            return unsafe { dot_avx2(a, b) };
        }
    }
    dot_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_portable(a, b)
}

#[inline(always)]
fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 16];
    let mut ca = a.chunks_exact(16);
    let mut cb = b.chunks_exact(16);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for v in acc {
        s += v;
    }
    s
}

pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, View::rows(&a, 3), View::rows(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f32 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            channels: 2,
            height: 7,
            width: 6,
            kh: 3,
            kw: 2,
            stride: 2,
        };
        let x: Vec<f32> = (0..2 * 2 * 7 * 6).map(|v| ((v * 7919) % 13) as f32 - 6.0).collect();
        let y: Vec<f32> = (0..g.patch() * g.positions())
            .map(|v| ((v * 104729) % 11) as f32 - 5.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a * *b) as f64).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a * *b) as f64).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn softmax_rows_saturates_without_overflow() {
        let mut out = [0.0; 3];
        softmax_rows(&[1000.0, 0.0, -1000.0], 3, &mut out);
        assert_eq!(out, [1.0, 0.0, 0.0]);
    }
}
