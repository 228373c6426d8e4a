use super::tensor::Real;

/// Stride-1, same-padded 2-D convolution. `groups == in_ch == out_ch` is depthwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn dense(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            groups: 1,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize) -> Self {
        ConvSpec {
            in_ch: ch,
            out_ch: ch,
            kernel,
            groups: ch,
        }
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_per_group() * self.kernel * self.kernel
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_ch
    }
}

/// Valid output range `[lo, hi)` for a kernel offset `d` on an axis of length `n`.
#[inline]
fn span(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `x`: `[n, in_ch, h, w]` flat. Returns `[n, out_ch, h, w]`.
pub(crate) fn forward<T: Real>(
    spec: &ConvSpec,
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let plane = h * w;
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let cin_g = spec.in_per_group();
    let cout_g = spec.out_ch / spec.groups;
    let mut out = vec![T::zero(); n * spec.out_ch * plane];
    for b in 0..n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            let out_plane = &mut out[(b * spec.out_ch + oc) * plane..][..plane];
            out_plane.iter_mut().for_each(|v| *v = bias[oc]);
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let in_plane = &x[(b * spec.in_ch + ic) * plane..][..plane];
                let wbase = (oc * cin_g + icg) * k * k;
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (y0, y1) = span(dy, h);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (x0, x1) = span(dx, w);
                        let wv = weight[wbase + ky * k + kx];
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize) * w;
                            let out_row = &mut out_plane[y * w + x0..y * w + x1];
                            let in_row =
                                &in_plane[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            for (o, &i) in out_row.iter_mut().zip(in_row) {
                                *o = *o + wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dweight, dbias)` for upstream gradient `dy` (`[n, out_ch, h, w]`).
pub(crate) fn backward<T: Real>(
    spec: &ConvSpec,
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    weight: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * w;
    let k = spec.kernel;
    let pad = (k / 2) as isize;
    let cin_g = spec.in_per_group();
    let cout_g = spec.out_ch / spec.groups;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); spec.out_ch];
    for b in 0..n {
        for oc in 0..spec.out_ch {
            let g = oc / cout_g;
            let dy_plane = &dy[(b * spec.out_ch + oc) * plane..][..plane];
            db[oc] = db[oc] + dy_plane.iter().copied().sum::<T>();
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let in_off = (b * spec.in_ch + ic) * plane;
                let wbase = (oc * cin_g + icg) * k * k;
                for ky in 0..k {
                    let dyo = ky as isize - pad;
                    let (y0, y1) = span(dyo, h);
                    for kx in 0..k {
                        let dxo = kx as isize - pad;
                        let (x0, x1) = span(dxo, w);
                        let wv = weight[wbase + ky * k + kx];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let src = in_off
                                + ((y as isize + dyo) as usize) * w
                                + (x0 as isize + dxo) as usize;
                            let g_row = &dy_plane[y * w + x0..y * w + x1];
                            let x_row = &x[src..src + (x1 - x0)];
                            for (&gv, &xv) in g_row.iter().zip(x_row) {
                                acc = acc + gv * xv;
                            }
                            let dx_row = &mut dx[src..src + (x1 - x0)];
                            for (d, &gv) in dx_row.iter_mut().zip(g_row) {
                                *d = *d + wv * gv;
                            }
                        }
                        dw[wbase + ky * k + kx] = dw[wbase + ky * k + kx] + acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
