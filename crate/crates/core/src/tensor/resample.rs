use super::conv::reflect_index;
use super::Real;

/// 2x2 mean pooling. Odd sizes are reflection-padded to even first, so the
/// output is `ceil(h / 2) x ceil(w / 2)`.
pub(crate) fn downsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, reflect_index(2 * oy as isize + 1, h));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, reflect_index(2 * ox as isize + 1, w));
                let s = plane[y0 * w + x0] + plane[y0 * w + x1] + plane[y1 * w + x0] + plane[y1 * w + x1];
                out[(ch * oh + oy) * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub(crate) fn downsample2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let quarter = T::lit(0.25);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = (2 * oy, reflect_index(2 * oy as isize + 1, h));
            for ox in 0..ow {
                let (x0, x1) = (2 * ox, reflect_index(2 * ox as isize + 1, w));
                let v = g[(ch * oh + oy) * ow + ox] * quarter;
                for idx in [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1] {
                    plane[idx] = plane[idx] + v;
                }
            }
        }
    }
}

/// Per-axis bilinear taps for a factor-2 upsample (half-pixel centers).
#[derive(Clone, Debug)]
pub(crate) struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl Taps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let mut t =
            Taps { lo: Vec::with_capacity(n_out), hi: Vec::with_capacity(n_out), frac: Vec::with_capacity(n_out) };
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(src - lo as f64);
        }
        t
    }
}

pub(crate) fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize, ty: &Taps, tx: &Taps) -> Vec<T> {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::lit(ty.frac[oy]);
            let (r0, r1) = (&plane[ty.lo[oy] * w..][..w], &plane[ty.hi[oy] * w..][..w]);
            for ox in 0..ow {
                let fx = T::lit(tx.frac[ox]);
                let (a, b) = (tx.lo[ox], tx.hi[ox]);
                let top = r0[a] + (r0[b] - r0[a]) * fx;
                let bot = r1[a] + (r1[b] - r1[a]) * fx;
                out[(ch * oh + oy) * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(g: &[T], c: usize, h: usize, w: usize, ty: &Taps, tx: &Taps, dx: &mut [T]) {
    let (oh, ow) = (ty.lo.len(), tx.lo.len());
    let one = T::one();
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let fy = T::lit(ty.frac[oy]);
            let (r0, r1) = (ty.lo[oy] * w, ty.hi[oy] * w);
            for ox in 0..ow {
                let fx = T::lit(tx.frac[ox]);
                let (a, b) = (tx.lo[ox], tx.hi[ox]);
                let v = g[(ch * oh + oy) * ow + ox];
                let (vt, vb) = (v * (one - fy), v * fy);
                plane[r0 + a] = plane[r0 + a] + vt * (one - fx);
                plane[r0 + b] = plane[r0 + b] + vt * fx;
                plane[r1 + a] = plane[r1 + a] + vb * (one - fx);
                plane[r1 + b] = plane[r1 + b] + vb * fx;
            }
        }
    }
}
