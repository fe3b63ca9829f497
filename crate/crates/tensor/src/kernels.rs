//! Slice-level numeric kernels shared by the tape's forward and backward
//! passes. Matrices are row-major and contiguous.

#[derive(Clone, Copy)]
enum Layout {
    Normal,
    Transposed,
}

/// `c = op(a) · op(b) + beta · c`, where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides above, and `c` does not alias `a` or `b`.
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

/// `c (+)= a · b`
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, Layout::Normal, b, Layout::Normal, c, beta(acc));
}

/// `c (+)= a · bᵀ` with `b` stored as `n×k`.
pub(crate) fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, Layout::Normal, b, Layout::Transposed, c, beta(acc));
}

/// `c (+)= aᵀ · b` with `a` stored as `k×m`.
pub(crate) fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    gemm(m, k, n, a, Layout::Transposed, b, Layout::Normal, c, beta(acc));
}

fn beta(acc: bool) -> f64 {
    if acc {
        1.0
    } else {
        0.0
    }
}

/// Geometry of a strided, zero-padded 2-D correlation from a `c×h×w` image
/// to `out_h×out_w` positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
            return None;
        }
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output position `o` and kernel tap `t`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + t).checked_sub(pad)?;
        (p < extent).then_some(p)
    }
}

/// Unfolds `img` (`c×h×w`) into `cols` (`c·kh·kw × out_h·out_w`).
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let n = g.col_cols();
    for ch in 0..g.c {
        let plane = &img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match ConvGeom::src(oy, i, g.stride, g.pad, g.h) {
                        None => line.fill(0.0),
                        Some(y) => {
                            let src_row = &plane[y * g.w..(y + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = ConvGeom::src(ox, j, g.stride, g.pad, g.w)
                                    .map_or(0.0, |x| src_row[x]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds `cols` back into `img`.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let n = g.col_cols();
    for ch in 0..g.c {
        let plane = &mut img[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ch * g.kh + i) * g.kw + j;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let Some(y) = ConvGeom::src(oy, i, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst_row = &mut plane[y * g.w..(y + 1) * g.w];
                    for (ox, v) in line.iter().enumerate() {
                        if let Some(x) = ConvGeom::src(ox, j, g.stride, g.pad, g.w) {
                            dst_row[x] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree_with_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3×2
        let mut c = [0.0; 4];
        matmul(2, 3, 2, &a, &b, &mut c, false);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // bᵀ stored as 2×3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [1.0; 4];
        matmul_nt(2, 3, 2, &a, &bt, &mut c2, true);
        assert_eq!(c2, [59.0, 65.0, 140.0, 155.0]);

        // aᵀ stored as 3×2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c3 = [0.0; 4];
        matmul_tn(2, 3, 2, &at, &b, &mut c3, false);
        assert_eq!(c3, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 2, 1).unwrap();
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let other: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; other.len()];
        im2col(&g, &img, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&g, &other, &mut back);
        let lhs: f64 = cols.iter().zip(&other).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
