//! Direct-loop NCHW convolution and pooling kernels.

use serde::{Deserialize, Serialize};

/// Geometry of a 2-D convolution. Weights are `[c_out, c_in / groups, k, k]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn same(kernel: usize) -> Self {
        Conv2dSpec { stride: 1, padding: kernel / 2, dilation: 1, groups: 1 }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Dimensions shared by the conv kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
}

#[inline]
fn tap(o: usize, kk: usize, spec: &Conv2dSpec, limit: usize) -> Option<usize> {
    let pos = (o * spec.stride + kk * spec.dilation) as isize - spec.padding as isize;
    (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
}

/// Output positions `lo..hi` whose tap `kk` lands inside `0..limit`.
#[inline]
fn valid_range(kk: usize, spec: &Conv2dSpec, limit: usize, out: usize) -> (usize, usize) {
    let off = (kk * spec.dilation) as isize - spec.padding as isize;
    let s = spec.stride as isize;
    // smallest o with o*s + off >= 0, largest with o*s + off <= limit - 1
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let top = limit as isize - 1 - off;
    let hi = if top < 0 { 0 } else { ((top / s) as usize + 1).min(out) };
    (lo.min(hi), hi)
}

#[inline]
fn input_pos(o: usize, kk: usize, spec: &Conv2dSpec) -> usize {
    o * spec.stride + kk * spec.dilation - spec.padding
}

/// Copies each `h x w` plane into a zero-bordered `(h + 2p) x (w + 2p)` plane.
fn pad_planes(x: &[f64], planes: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; planes * hp * wp];
    for pl in 0..planes {
        for y in 0..h {
            let src = &x[(pl * h + y) * w..][..w];
            out[(pl * hp + y + p) * wp + p..][..w].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`pad_planes`] for gradients: keeps the interior.
fn crop_planes(xp: &[f64], planes: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Vec::with_capacity(planes * h * w);
    for pl in 0..planes {
        for y in 0..h {
            out.extend_from_slice(&xp[(pl * hp + y + p) * wp + p..][..w]);
        }
    }
    out
}

/// Stride-1 geometry on padded planes. An output pixel `(oy, ox)` lives at
/// `oy * wp + ox` of a row-major buffer with the padded width, so every
/// kernel tap is one contiguous slice of length `span` at offset `tap_off`.
struct Flat {
    hp: usize,
    wp: usize,
    span: usize,
}

impl Flat {
    fn new(h: usize, w: usize, oh: usize, ow: usize, p: usize) -> Self {
        let wp = w + 2 * p;
        Flat { hp: h + 2 * p, wp, span: (oh - 1) * wp + ow }
    }

    fn tap_off(&self, ky: usize, kx: usize, dilation: usize) -> usize {
        ky * dilation * self.wp + kx * dilation
    }
}

fn conv2d_forward_flat(x: &[f64], wt: &[f64], d: &ConvDims, spec: &Conv2dSpec) -> Vec<f64> {
    let f = Flat::new(d.h, d.w, d.oh, d.ow, spec.padding);
    let xp = pad_planes(x, d.n * d.c_in, d.h, d.w, spec.padding);
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    let plane = f.hp * f.wp;
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    let mut acc = vec![0.0; f.span];
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / cout_g;
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ci in 0..cin_g {
                let xb = (n * d.c_in + g * cin_g + ci) * plane;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let wv = wt[((co * cin_g + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let xs = &xp[xb + f.tap_off(ky, kx, spec.dilation)..][..f.span];
                        for (a, b) in acc.iter_mut().zip(xs) {
                            *a += wv * b;
                        }
                    }
                }
            }
            let ob = (n * d.c_out + co) * d.oh * d.ow;
            for oy in 0..d.oh {
                out[ob + oy * d.ow..][..d.ow].copy_from_slice(&acc[oy * f.wp..][..d.ow]);
            }
        }
    }
    out
}

fn conv2d_backward_flat(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let f = Flat::new(d.h, d.w, d.oh, d.ow, spec.padding);
    let xp = pad_planes(x, d.n * d.c_in, d.h, d.w, spec.padding);
    let plane = f.hp * f.wp;
    let mut gxp = need_x.then(|| vec![0.0; xp.len()]);
    let mut gw = need_w.then(|| vec![0.0; wt.len()]);
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    // Gradient in padded-width layout; the wrap-around columns stay zero.
    let mut gp = vec![0.0; f.span];
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let ob = (n * d.c_out + co) * d.oh * d.ow;
            for oy in 0..d.oh {
                gp[oy * f.wp..][..d.ow].copy_from_slice(&gout[ob + oy * d.ow..][..d.ow]);
            }
            for ci in 0..cin_g {
                let xb = (n * d.c_in + g * cin_g + ci) * plane;
                for ky in 0..d.k {
                    for kx in 0..d.k {
                        let widx = ((co * cin_g + ci) * d.k + ky) * d.k + kx;
                        let off = xb + f.tap_off(ky, kx, spec.dilation);
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += gp.iter().zip(&xp[off..][..f.span]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(gx) = gxp.as_mut() {
                            let wv = wt[widx];
                            for (t, g) in gx[off..][..f.span].iter_mut().zip(&gp) {
                                *t += g * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = gxp.map(|g| crop_planes(&g, d.n * d.c_in, d.h, d.w, spec.padding));
    (gx, gw)
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], d: &ConvDims, spec: &Conv2dSpec) -> Vec<f64> {
    if spec.stride == 1 {
        conv2d_forward_flat(x, wt, d, spec)
    } else {
        conv2d_forward_loop(x, wt, d, spec)
    }
}

fn conv2d_forward_loop(x: &[f64], wt: &[f64], d: &ConvDims, spec: &Conv2dSpec) -> Vec<f64> {
    let mut out = vec![0.0; d.n * d.c_out * d.oh * d.ow];
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let obase = (n * d.c_out + co) * d.oh * d.ow;
            for ci in 0..cin_g {
                let cin = g * cin_g + ci;
                let xbase = (n * d.c_in + cin) * d.h * d.w;
                for ky in 0..d.k {
                    let (y0, y1) = valid_range(ky, spec, d.h, d.oh);
                    for kx in 0..d.k {
                        let wv = wt[((co * cin_g + ci) * d.k + ky) * d.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = valid_range(kx, spec, d.w, d.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        for oy in y0..y1 {
                            let xrow = xbase + input_pos(oy, ky, spec) * d.w;
                            let orow = obase + oy * d.ow;
                            let o = &mut out[orow + x0..orow + x1];
                            if spec.stride == 1 {
                                let xs = &x[xrow + input_pos(x0, kx, spec)..][..x1 - x0];
                                for (a, b) in o.iter_mut().zip(xs) {
                                    *a += wv * b;
                                }
                            } else {
                                for (i, a) in o.iter_mut().enumerate() {
                                    *a += wv * x[xrow + input_pos(x0 + i, kx, spec)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    if spec.stride == 1 {
        conv2d_backward_flat(x, wt, gout, d, spec, need_x, need_w)
    } else {
        conv2d_backward_loop(x, wt, gout, d, spec, need_x, need_w)
    }
}

fn conv2d_backward_loop(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    d: &ConvDims,
    spec: &Conv2dSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; wt.len()]);
    let cin_g = d.c_in / spec.groups;
    let cout_g = d.c_out / spec.groups;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let g = co / cout_g;
            let obase = (n * d.c_out + co) * d.oh * d.ow;
            for ci in 0..cin_g {
                let cin = g * cin_g + ci;
                let xbase = (n * d.c_in + cin) * d.h * d.w;
                for ky in 0..d.k {
                    let (y0, y1) = valid_range(ky, spec, d.h, d.oh);
                    for kx in 0..d.k {
                        let (x0, x1) = valid_range(kx, spec, d.w, d.ow);
                        if x0 >= x1 {
                            continue;
                        }
                        let widx = ((co * cin_g + ci) * d.k + ky) * d.k + kx;
                        let wv = wt[widx];
                        let mut acc = 0.0;
                        for oy in y0..y1 {
                            let xrow = xbase + input_pos(oy, ky, spec) * d.w;
                            let orow = obase + oy * d.ow;
                            let go = &gout[orow + x0..orow + x1];
                            if spec.stride == 1 {
                                let start = xrow + input_pos(x0, kx, spec);
                                if gw.is_some() {
                                    acc += go.iter().zip(&x[start..start + go.len()]).map(|(a, b)| a * b).sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    for (t, g) in gx[start..start + go.len()].iter_mut().zip(go) {
                                        *t += g * wv;
                                    }
                                }
                            } else {
                                for (i, &g) in go.iter().enumerate() {
                                    let xi = xrow + input_pos(x0 + i, kx, spec);
                                    acc += g * x[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += g * wv;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Pooling geometry: square window, symmetric padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolSpec {
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    fn conv_like(&self) -> Conv2dSpec {
        Conv2dSpec { stride: self.stride, padding: self.padding, dilation: 1, groups: 1 }
    }

    pub fn out_dim(&self, input: usize) -> Option<usize> {
        self.conv_like().out_dim(input, self.k)
    }
}

/// Number of in-bounds taps per output position along one axis.
fn tap_counts(p: &PoolSpec, limit: usize, out: usize) -> Vec<usize> {
    let spec = p.conv_like();
    (0..out).map(|o| (0..p.k).filter(|&kk| tap(o, kk, &spec, limit).is_some()).count()).collect()
}

/// Average pooling that excludes padded cells from the divisor.
pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, p: &PoolSpec) -> (Vec<f64>, usize, usize) {
    let spec = p.conv_like();
    let (oh, ow) = (p.out_dim(h).unwrap(), p.out_dim(w).unwrap());
    let (cy, cx) = (tap_counts(p, h, oh), tap_counts(p, w, ow));
    let mut out = vec![0.0; planes * oh * ow];
    if p.stride == 1 {
        let f = Flat::new(h, w, oh, ow, p.padding);
        let xp = pad_planes(x, planes, h, w, p.padding);
        let mut acc = vec![0.0; f.span];
        for pl in 0..planes {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let xb = pl * f.hp * f.wp;
            for ky in 0..p.k {
                for kx in 0..p.k {
                    for (a, b) in acc.iter_mut().zip(&xp[xb + f.tap_off(ky, kx, 1)..][..f.span]) {
                        *a += b;
                    }
                }
            }
            for oy in 0..oh {
                for ox in 0..ow {
                    out[(pl * oh + oy) * ow + ox] = acc[oy * f.wp + ox] / (cy[oy] * cx[ox]) as f64;
                }
            }
        }
        return (out, oh, ow);
    }
    for pl in 0..planes {
        let xb = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for ky in 0..p.k {
                    let Some(iy) = tap(oy, ky, &spec, h) else { continue };
                    for kx in 0..p.k {
                        if let Some(ix) = tap(ox, kx, &spec, w) {
                            s += x[xb + iy * w + ix];
                        }
                    }
                }
                out[(pl * oh + oy) * ow + ox] = s / (cy[oy] * cx[ox]) as f64;
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn avg_pool_backward(gout: &[f64], planes: usize, h: usize, w: usize, p: &PoolSpec) -> Vec<f64> {
    let spec = p.conv_like();
    let (oh, ow) = (p.out_dim(h).unwrap(), p.out_dim(w).unwrap());
    let (cy, cx) = (tap_counts(p, h, oh), tap_counts(p, w, ow));
    if p.stride == 1 {
        let f = Flat::new(h, w, oh, ow, p.padding);
        let mut gxp = vec![0.0; planes * f.hp * f.wp];
        let mut gp = vec![0.0; f.span];
        for pl in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    gp[oy * f.wp + ox] = gout[(pl * oh + oy) * ow + ox] / (cy[oy] * cx[ox]) as f64;
                }
            }
            let xb = pl * f.hp * f.wp;
            for ky in 0..p.k {
                for kx in 0..p.k {
                    for (t, g) in gxp[xb + f.tap_off(ky, kx, 1)..][..f.span].iter_mut().zip(&gp) {
                        *t += g;
                    }
                }
            }
        }
        return crop_planes(&gxp, planes, h, w, p.padding);
    }
    let mut gx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let xb = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(pl * oh + oy) * ow + ox] / (cy[oy] * cx[ox]) as f64;
                for ky in 0..p.k {
                    let Some(iy) = tap(oy, ky, &spec, h) else { continue };
                    for kx in 0..p.k {
                        if let Some(ix) = tap(ox, kx, &spec, w) {
                            gx[xb + iy * w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Max pooling; returns the flat input index of each window's winner
/// (first maximum in scan order).
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    p: &PoolSpec,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let spec = p.conv_like();
    let (oh, ow) = (p.out_dim(h).unwrap(), p.out_dim(w).unwrap());
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for pl in 0..planes {
        let xb = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..p.k {
                    let Some(iy) = tap(oy, ky, &spec, h) else { continue };
                    for kx in 0..p.k {
                        if let Some(ix) = tap(ox, kx, &spec, w) {
                            let i = xb + iy * w + ix;
                            if x[i] > best || best_i == usize::MAX {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                }
                let o = (pl * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg, oh, ow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_path_matches_the_loop_path() {
        for (k, dilation, groups) in [(1, 1, 1), (3, 1, 1), (3, 2, 2), (5, 1, 4), (3, 1, 4)] {
            let spec = Conv2dSpec { stride: 1, padding: dilation * (k / 2), dilation, groups };
            let (h, w) = (5, 6);
            let (oh, ow) = (spec.out_dim(h, k).unwrap(), spec.out_dim(w, k).unwrap());
            let d = ConvDims { n: 2, c_in: 4, h, w, c_out: 4, k, oh, ow };
            let x: Vec<f64> = (0..d.n * d.c_in * h * w).map(|i| (i as f64 * 0.73).sin()).collect();
            let wt: Vec<f64> = (0..d.c_out * d.c_in / groups * k * k).map(|i| (i as f64 * 1.31).cos()).collect();
            let gout: Vec<f64> = (0..d.n * d.c_out * oh * ow).map(|i| (i as f64 * 0.29).sin()).collect();
            let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            assert!(close(&conv2d_forward_flat(&x, &wt, &d, &spec), &conv2d_forward_loop(&x, &wt, &d, &spec)));
            let (fx, fw) = conv2d_backward_flat(&x, &wt, &gout, &d, &spec, true, true);
            let (lx, lw) = conv2d_backward_loop(&x, &wt, &gout, &d, &spec, true, true);
            assert!(close(&fx.unwrap(), &lx.unwrap()), "grad x, k {k} dilation {dilation} groups {groups}");
            assert!(close(&fw.unwrap(), &lw.unwrap()), "grad w, k {k} dilation {dilation} groups {groups}");
        }
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let d = ConvDims { n: 1, c_in: 2, h: 4, w: 4, c_out: 2, k: 3, oh: 4, ow: 4 };
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut wt = vec![0.0; 2 * 2 * 9];
        wt[4] = 1.0; // co 0, ci 0, center
        wt[(2 + 1) * 9 + 4] = 1.0; // co 1, ci 1, center
        let y = conv2d_forward(&x, &wt, &d, &Conv2dSpec::same(3));
        assert_eq!(y, x);
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = vec![1.0; 9];
        let p = PoolSpec { k: 3, stride: 1, padding: 1 };
        let (y, _, _) = avg_pool_forward(&x, 1, 3, 3, &p);
        assert!(y.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn output_geometry() {
        let s = Conv2dSpec { stride: 2, padding: 1, dilation: 1, groups: 1 };
        assert_eq!(s.out_dim(8, 3), Some(4));
        let dil = Conv2dSpec { stride: 1, padding: 4, dilation: 2, groups: 1 };
        assert_eq!(dil.out_dim(8, 5), Some(8));
    }
}
