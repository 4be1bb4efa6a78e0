//! Raw numeric kernels behind the tensor ops: dense GEMM in the three
//! transpose arrangements backprop needs, and im2col/col2im with zero or
//! symmetric padding. All slices are row-major; all kernels accumulate
//! (`out +=`), callers zero the output first.

/// out(m×n) += a(m×k) · b(k×n). i-k-j loop order: the inner loop is a
/// contiguous axpy over a row of `b`, which the compiler vectorizes.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out(m×n) += a(m×x) · b(n×x)ᵀ. Contraction over the shared trailing
/// axis: each output element is a dot product of two contiguous rows.
pub fn gemm_abt(a: &[f64], b: &[f64], m: usize, x: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * x);
    debug_assert_eq!(b.len(), n * x);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * x..(i + 1) * x];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * x..(j + 1) * x];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out(m×n) += a(f×m)ᵀ · b(f×n). Contraction over the shared leading
/// axis; inner loop is again a contiguous axpy.
pub fn gemm_atb(a: &[f64], b: &[f64], f: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), f * m);
    debug_assert_eq!(b.len(), f * n);
    debug_assert_eq!(out.len(), m * n);
    for ff in 0..f {
        let arow = &a[ff * m..(ff + 1) * m];
        let brow = &b[ff * n..(ff + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// How out-of-range source coordinates are filled during convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Edge reflection that includes the border pixel: index −1 maps to 0,
    /// index H maps to H−1. Requires pad < spatial dim.
    Symmetric,
}

/// Geometry of one conv2d application (shared by im2col and col2im).
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
    pub padding: Padding,
}

impl ConvGeom {
    /// Source index into a C×H×W image for patch row `ki`,`kj` of output
    /// cell `oi`,`oj`, or None when the zero-padded region is hit.
    #[inline]
    fn src(&self, c: usize, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        let (i, j) = match self.padding {
            Padding::Zero => {
                if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
                    return None;
                }
                (i as usize, j as usize)
            }
            Padding::Symmetric => (
                reflect(i, self.h),
                reflect(j, self.w),
            ),
        };
        Some((c * self.h + i) * self.w + j)
    }

    /// Number of rows in the column matrix.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

#[inline]
fn reflect(t: isize, dim: usize) -> usize {
    if t < 0 {
        (-t - 1) as usize
    } else if t >= dim as isize {
        2 * dim - t as usize - 1
    } else {
        t as usize
    }
}

/// Unpack one image (C×H×W) into columns. `col` has `col_rows()` rows and
/// `oh·ow` columns and is written (not accumulated).
pub fn im2col(img: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let ocells = g.oh * g.ow;
    debug_assert_eq!(col.len(), g.col_rows() * ocells);
    let mut row = 0;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * ocells..(row + 1) * ocells];
                let mut idx = 0;
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        dst[idx] = match g.src(c, oi, oj, ki, kj) {
                            Some(s) => img[s],
                            None => 0.0,
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a column-matrix gradient back onto one image's gradient.
/// With symmetric padding several columns alias one source pixel; the
/// additive scatter is exactly the transpose of the reflection gather.
pub fn col2im(dcol: &[f64], g: &ConvGeom, dimg: &mut [f64]) {
    let ocells = g.oh * g.ow;
    debug_assert_eq!(dcol.len(), g.col_rows() * ocells);
    let mut row = 0;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &dcol[row * ocells..(row + 1) * ocells];
                let mut idx = 0;
                for oi in 0..g.oh {
                    for oj in 0..g.ow {
                        if let Some(s) = g.src(c, oi, oj, ki, kj) {
                            dimg[s] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}
