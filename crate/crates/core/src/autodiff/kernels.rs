//! Numeric kernels shared by the forward and backward passes.

/// `C[m,n] = op(A)[m,k] * op(B)[k,n] + beta * C`.
///
/// `trans_a` means `a` is stored as `[k, m]`; `trans_b` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
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

/// Geometry of a stride-1 "same" convolution with zero padding.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dil: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.k / 2) as isize) * self.dil as isize
    }
}

fn valid_span(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

pub(crate) fn im2col(x: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut cols = vec![0.0; g.rows() * hw];
    for c in 0..g.cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            let dy = g.offset(ky);
            for kx in 0..g.k {
                let dx = g.offset(kx);
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(g.w, dx);
                let (y0, y1) = valid_span(g.h, dy);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let src = &plane[sy * g.w..(sy + 1) * g.w];
                    let d = &mut dst[y * g.w..(y + 1) * g.w];
                    for x in x0..x1 {
                        d[x] = src[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let hw = g.h * g.w;
    for c in 0..g.cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..g.k {
            let dy = g.offset(ky);
            for kx in 0..g.k {
                let dxo = g.offset(kx);
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (x0, x1) = valid_span(g.w, dxo);
                let (y0, y1) = valid_span(g.h, dy);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d = &mut plane[sy * g.w..(sy + 1) * g.w];
                    let s = &src[y * g.w..(y + 1) * g.w];
                    for x in x0..x1 {
                        d[(x as isize + dxo) as usize] += s[x];
                    }
                }
            }
        }
    }
}

fn cols_for(x: &[f64], g: ConvGeom) -> std::borrow::Cow<'_, [f64]> {
    if g.k == 1 {
        std::borrow::Cow::Borrowed(x)
    } else {
        std::borrow::Cow::Owned(im2col(x, g))
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    g: ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    cout: usize,
) -> Vec<f64> {
    let hw = g.h * g.w;
    let mut out = vec![0.0; cout * hw];
    if let Some(b) = bias {
        for (o, &bv) in out.chunks_mut(hw).zip(b) {
            o.fill(bv);
        }
    }
    let cols = cols_for(x, g);
    gemm(cout, g.rows(), hw, weight, false, &cols, false, &mut out, 1.0);
    out
}

pub(crate) struct ConvGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    g: ConvGeom,
    weight: &[f64],
    gout: &[f64],
    cout: usize,
    grads: ConvGrads<'_>,
) {
    let hw = g.h * g.w;
    if let Some(db) = grads.db {
        for (d, row) in db.iter_mut().zip(gout.chunks(hw)) {
            *d += row.iter().sum::<f64>();
        }
    }
    if let Some(dw) = grads.dw {
        let cols = cols_for(x, g);
        gemm(cout, hw, g.rows(), gout, false, &cols, true, dw, 1.0);
    }
    if let Some(dx) = grads.dx {
        if g.k == 1 {
            gemm(g.rows(), cout, hw, weight, true, gout, false, dx, 1.0);
        } else {
            let mut dcols = vec![0.0; g.rows() * hw];
            gemm(g.rows(), cout, hw, weight, true, gout, false, &mut dcols, 0.0);
            col2im_add(&dcols, g, dx);
        }
    }
}

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`), applied periodically for large overhangs.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input size; borders mirror.
    Reflect,
    /// Output shrinks by `k - 1` in each direction.
    Valid,
}

/// A fixed (non-learnable) square kernel applied identically to every channel
/// as a true convolution.
#[derive(Clone, Debug)]
pub(crate) struct FixedFilter {
    flipped: Vec<f64>,
    k: usize,
    in_h: usize,
    in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_map: Vec<usize>,
    col_map: Vec<usize>,
}

impl FixedFilter {
    pub fn new(kernel: &[f64], k: usize, padding: Padding, in_h: usize, in_w: usize) -> Self {
        assert_eq!(kernel.len(), k * k);
        let flipped: Vec<f64> = kernel.iter().rev().copied().collect();
        let (out_h, out_w) = match padding {
            Padding::Reflect => (in_h, in_w),
            Padding::Valid => {
                assert!(in_h >= k && in_w >= k, "kernel larger than input");
                (in_h - k + 1, in_w - k + 1)
            }
        };
        let map = |out: usize, n: usize| -> Vec<usize> {
            let r = (k / 2) as isize;
            let mut m = Vec::with_capacity(out * k);
            for o in 0..out {
                for i in 0..k {
                    let idx = match padding {
                        Padding::Reflect => reflect_index(o as isize + i as isize - r, n),
                        Padding::Valid => o + i,
                    };
                    m.push(idx);
                }
            }
            m
        };
        FixedFilter {
            row_map: map(out_h, in_h),
            col_map: map(out_w, in_w),
            flipped,
            k,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw, oh, ow, k) = (self.in_h, self.in_w, self.out_h, self.out_w, self.k);
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            let src = &x[c * ih * iw..(c + 1) * ih * iw];
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for y in 0..oh {
                let rows = &self.row_map[y * k..(y + 1) * k];
                for xo in 0..ow {
                    let cols = &self.col_map[xo * k..(xo + 1) * k];
                    let mut acc = 0.0;
                    for (i, &sy) in rows.iter().enumerate() {
                        let line = &src[sy * iw..(sy + 1) * iw];
                        let kr = &self.flipped[i * k..(i + 1) * k];
                        for (kv, &sx) in kr.iter().zip(cols) {
                            acc += kv * line[sx];
                        }
                    }
                    dst[y * ow + xo] = acc;
                }
            }
        }
        out
    }

    pub fn backward_add(&self, gout: &[f64], channels: usize, dx: &mut [f64]) {
        let (ih, iw, oh, ow, k) = (self.in_h, self.in_w, self.out_h, self.out_w, self.k);
        for c in 0..channels {
            let g = &gout[c * oh * ow..(c + 1) * oh * ow];
            let d = &mut dx[c * ih * iw..(c + 1) * ih * iw];
            for y in 0..oh {
                let rows = &self.row_map[y * k..(y + 1) * k];
                for xo in 0..ow {
                    let gv = g[y * ow + xo];
                    if gv == 0.0 {
                        continue;
                    }
                    let cols = &self.col_map[xo * k..(xo + 1) * k];
                    for (i, &sy) in rows.iter().enumerate() {
                        let kr = &self.flipped[i * k..(i + 1) * k];
                        for (kv, &sx) in kr.iter().zip(cols) {
                            d[sy * iw + sx] += kv * gv;
                        }
                    }
                }
            }
        }
    }
}

/// Precomputed bilinear taps for backward warping with border clamping.
#[derive(Clone, Debug)]
pub(crate) struct WarpMap {
    pub h: usize,
    pub w: usize,
    taps: Vec<([usize; 4], [f64; 4])>,
}

impl WarpMap {
    /// `flow` is `[2, H, W]`: horizontal then vertical displacement.
    pub fn new(flow: &[f64], h: usize, w: usize) -> Self {
        let hw = h * w;
        let mut taps = Vec::with_capacity(hw);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let sx = (x as f64 + flow[p]).clamp(0.0, (w - 1) as f64);
                let sy = (y as f64 + flow[hw + p]).clamp(0.0, (h - 1) as f64);
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = sx - x0 as f64;
                let fy = sy - y0 as f64;
                taps.push((
                    [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
                    [
                        (1.0 - fy) * (1.0 - fx),
                        (1.0 - fy) * fx,
                        fy * (1.0 - fx),
                        fy * fx,
                    ],
                ));
            }
        }
        WarpMap { h, w, taps }
    }

    pub fn forward(&self, x: &[f64], channels: usize) -> Vec<f64> {
        let hw = self.h * self.w;
        let mut out = vec![0.0; channels * hw];
        for c in 0..channels {
            let src = &x[c * hw..(c + 1) * hw];
            for (o, (idx, wt)) in out[c * hw..(c + 1) * hw].iter_mut().zip(&self.taps) {
                *o = wt[0] * src[idx[0]] + wt[1] * src[idx[1]] + wt[2] * src[idx[2]] + wt[3] * src[idx[3]];
            }
        }
        out
    }

    pub fn backward_add(&self, gout: &[f64], channels: usize, dx: &mut [f64]) {
        let hw = self.h * self.w;
        for c in 0..channels {
            let d = &mut dx[c * hw..(c + 1) * hw];
            for (&g, (idx, wt)) in gout[c * hw..(c + 1) * hw].iter().zip(&self.taps) {
                for j in 0..4 {
                    d[idx[j]] += wt[j] * g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let at = |i: usize, p: usize, t: bool| if t { a[p * m + i] } else { a[i * k + p] };
        let bt = |p: usize, j: usize, t: bool| if t { b[j * k + p] } else { b[p * n + j] };
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, 1.0);
                for i in 0..m {
                    for j in 0..n {
                        let want: f64 = 1.0 + (0..k).map(|p| at(i, p, ta) * bt(p, j, tb)).sum::<f64>();
                        assert!((c[i * n + j] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn reflect_index_mirrors_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(4, 1), 0);
    }

    #[test]
    fn zero_flow_warp_is_exact_identity() {
        let (h, w) = (6, 7);
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).cos()).collect();
        let map = WarpMap::new(&vec![0.0; 2 * h * w], h, w);
        assert_eq!(map.forward(&x, 2), x);
    }
}
