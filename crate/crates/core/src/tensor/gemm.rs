//! Strided matrix-multiply kernel.

/// A strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, transpose: bool) -> Self {
        if transpose {
            self.t()
        } else {
            self
        }
    }
}

/// Products up to this many multiply-adds skip packing and run as plain
/// row-oriented loops.
const SMALL_GEMM: usize = 1 << 16;

fn small_gemm(a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], cv: View, accumulate: bool) {
    let n = bv.cols;
    for i in 0..av.rows {
        let c0 = cv.offset + i * cv.rs as usize;
        let crow = &mut c[c0..c0 + n];
        if !accumulate {
            crow.fill(0.0);
        }
        for p in 0..av.cols {
            let x = a[(av.offset as isize + i as isize * av.rs + p as isize * av.cs) as usize];
            if x == 0.0 {
                continue;
            }
            let b0 = bv.offset + p * bv.rs as usize;
            for (y, &w) in crow.iter_mut().zip(&b[b0..b0 + n]) {
                *y += x * w;
            }
        }
    }
}

/// `c += a · b` (or `c = a · b` when `accumulate` is false).
pub(crate) fn gemm(a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], cv: View, accumulate: bool) {
    assert_eq!(av.cols, bv.rows);
    assert_eq!(av.rows, cv.rows);
    assert_eq!(bv.cols, cv.cols);
    let m = av.rows;
    let k = av.cols;
    let n = bv.cols;
    let span = |v: View| -> usize {
        if v.rows == 0 || v.cols == 0 {
            return v.offset;
        }
        v.offset + (v.rows - 1) * v.rs as usize + (v.cols - 1) * v.cs as usize + 1
    };
    assert!(span(av) <= a.len() && span(bv) <= b.len() && span(cv) <= c.len());
    if bv.cs == 1 && cv.cs == 1 && m * k * n <= SMALL_GEMM {
        small_gemm(a, av, b, bv, c, cv, accumulate);
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access inside the three
    // buffers, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}
