use super::{gemm, gemm_ld, MatRef, Real};

/// Border handling for "same" convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
    Zero,
}

const OUTSIDE: usize = usize::MAX;

/// Mirror index `i` into `0..n`, folding repeatedly for large offsets.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Source index for each padded coordinate `0..n + 2 * pad`.
fn pad_map(n: usize, pad: usize, mode: PaddingMode) -> Vec<usize> {
    (0..n + 2 * pad)
        .map(|p| {
            let i = p as isize - pad as isize;
            match mode {
                PaddingMode::Reflect => reflect_index(i, n),
                PaddingMode::Zero if i >= 0 && (i as usize) < n => i as usize,
                PaddingMode::Zero => OUTSIDE,
            }
        })
        .collect()
}

/// Geometry of one convolution call, shared by the forward and backward passes.
#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    row_map: Vec<usize>,
    col_map: Vec<usize>,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: PaddingMode,
    ) -> Self {
        let (ph, pw) = (kh / 2, kw / 2);
        let out_h = (h + 2 * ph - kh) / stride + 1;
        let out_w = (w + 2 * pw - kw) / stride + 1;
        ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            row_map: pad_map(h, ph, padding),
            col_map: pad_map(w, pw, padding),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// True when the unfolded patch matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1
    }

    /// Output columns `ox` whose source column `ox + kx - pad` is inside the
    /// image, for stride 1.
    fn interior(&self, kx: usize) -> std::ops::Range<usize> {
        let pad = self.kw / 2;
        let lo = pad.saturating_sub(kx);
        let hi = (self.w + pad).saturating_sub(kx).min(self.out_w);
        lo..hi.max(lo)
    }

    /// Output rows per tile, sized so one unfolded tile stays cache-resident.
    fn tile_rows(&self) -> usize {
        const TILE_ELEMS: usize = 1 << 15;
        (TILE_ELEMS / (self.patch_len() * self.out_w).max(1)).clamp(1, self.out_h.max(1))
    }

    fn tiles(&self) -> impl Iterator<Item = std::ops::Range<usize>> {
        let step = self.tile_rows();
        let out_h = self.out_h;
        (0..out_h).step_by(step).map(move |y0| y0..(y0 + step).min(out_h))
    }

    /// Unfold the patches of output rows `rows` into `col`, a
    /// `[patch_len, rows.len() * out_w]` matrix.
    fn im2col<T: Real>(&self, x: &[T], rows: std::ops::Range<usize>, col: &mut [T]) {
        let n = rows.len() * self.out_w;
        let pad = self.kw / 2;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[r * n..(r + 1) * n];
                    let inner = self.interior(kx);
                    for (t, oy) in rows.clone().enumerate() {
                        let dst_row = &mut dst[t * self.out_w..(t + 1) * self.out_w];
                        let sy = self.row_map[oy * self.stride + ky];
                        if sy == OUTSIDE {
                            dst_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &plane[sy * self.w..(sy + 1) * self.w];
                        if self.stride == 1 && !inner.is_empty() {
                            let off = inner.start + kx - pad;
                            dst_row[inner.clone()].copy_from_slice(&src_row[off..off + inner.len()]);
                            for ox in (0..inner.start).chain(inner.end..self.out_w) {
                                let sx = self.col_map[ox + kx];
                                dst_row[ox] = if sx == OUTSIDE { T::zero() } else { src_row[sx] };
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let sx = self.col_map[ox * self.stride + kx];
                                *d = if sx == OUTSIDE { T::zero() } else { src_row[sx] };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-add patch gradients into `dx`.
    fn col2im<T: Real>(&self, col: &[T], rows: std::ops::Range<usize>, dx: &mut [T]) {
        let n = rows.len() * self.out_w;
        let pad = self.kw / 2;
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[r * n..(r + 1) * n];
                    let inner = self.interior(kx);
                    for (t, oy) in rows.clone().enumerate() {
                        let sy = self.row_map[oy * self.stride + ky];
                        if sy == OUTSIDE {
                            continue;
                        }
                        let src_row = &src[t * self.out_w..(t + 1) * self.out_w];
                        let dst_row = &mut plane[sy * self.w..(sy + 1) * self.w];
                        if self.stride == 1 && !inner.is_empty() {
                            let off = inner.start + kx - pad;
                            for (d, &g) in dst_row[off..off + inner.len()].iter_mut().zip(&src_row[inner.clone()]) {
                                *d = *d + g;
                            }
                            for ox in (0..inner.start).chain(inner.end..self.out_w) {
                                let sx = self.col_map[ox + kx];
                                if sx != OUTSIDE {
                                    dst_row[sx] = dst_row[sx] + src_row[ox];
                                }
                            }
                        } else {
                            for (ox, &g) in src_row.iter().enumerate() {
                                let sx = self.col_map[ox * self.stride + kx];
                                if sx != OUTSIDE {
                                    dst_row[sx] = dst_row[sx] + g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out = kernel * im2col(x) + bias`, computed tile by tile.
    pub fn forward<T: Real>(&self, x: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let n = self.out_len();
        let k = self.patch_len();
        let mut out = vec![T::zero(); self.c_out * n];
        if let Some(b) = bias {
            for (co, row) in out.chunks_mut(n).enumerate() {
                row.fill(b[co]);
            }
        }
        let w = MatRef::row_major(kernel, self.c_out, k);
        if self.is_pointwise() {
            gemm(w, MatRef::row_major(x, k, n), T::one(), &mut out);
            return out;
        }
        let mut col = vec![T::zero(); k * self.tile_rows() * self.out_w];
        for rows in self.tiles() {
            let tn = rows.len() * self.out_w;
            let col = &mut col[..k * tn];
            self.im2col(x, rows.clone(), col);
            gemm_ld(w, MatRef::row_major(col, k, tn), T::one(), &mut out[rows.start * self.out_w..], n);
        }
        out
    }

    /// Accumulate `dx += d input` and/or `dk += d kernel` for upstream `dout`.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        kernel: &[T],
        dout: &[T],
        mut dx: Option<&mut [T]>,
        mut dk: Option<&mut [T]>,
    ) {
        let n = self.out_len();
        let k = self.patch_len();
        let wt = MatRef::row_major(kernel, self.c_out, k).t();
        if self.is_pointwise() {
            let g = MatRef::row_major(dout, self.c_out, n);
            if let Some(dx) = dx {
                gemm(wt, g, T::one(), dx);
            }
            if let Some(dk) = dk {
                gemm(g, MatRef::row_major(x, k, n).t(), T::one(), dk);
            }
            return;
        }
        let mut col = vec![T::zero(); k * self.tile_rows() * self.out_w];
        for rows in self.tiles() {
            let tn = rows.len() * self.out_w;
            let col = &mut col[..k * tn];
            let g = MatRef { data: &dout[rows.start * self.out_w..], rows: self.c_out, cols: tn, rs: n, cs: 1 };
            if let Some(dk) = dk.as_deref_mut() {
                self.im2col(x, rows.clone(), col);
                gemm(g, MatRef::row_major(col, k, tn).t(), T::one(), dk);
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(wt, g, T::zero(), col);
                self.col2im(col, rows.clone(), dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_without_edge_repeat() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-2, 1), 0);
        assert_eq!(reflect_index(5, 2), 1);
    }

    #[test]
    fn stride_two_halves_with_ceiling() {
        let g = ConvGeom::new(1, 9, 8, 1, 5, 5, 2, PaddingMode::Reflect);
        assert_eq!((g.out_h, g.out_w), (5, 4));
        let g = ConvGeom::new(1, 9, 8, 1, 5, 5, 1, PaddingMode::Zero);
        assert_eq!((g.out_h, g.out_w), (9, 8));
    }
}
