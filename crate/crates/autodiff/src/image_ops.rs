//! NCHW image operations.

use crate::linalg::{gemm, Layout};
use crate::{Element, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column offset `kx`.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        range_for(self.wo, self.w, self.stride, self.pad, kx)
    }

    fn oy_range(&self, ky: usize) -> (usize, usize) {
        range_for(self.ho, self.h, self.stride, self.pad, ky)
    }
}

fn range_for(out: usize, size: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // o*stride + k - pad in [0, size)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { (size + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.oy_range(ky);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = g.ox_range(kx);
                for oy in 0..g.ho {
                    let d = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    d[..ox_lo].fill(T::zero());
                    d[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let ix0 = ox_lo + kx - g.pad;
                        d[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.oy_range(ky);
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (ox_lo, ox_hi) = g.ox_range(kx);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.pad;
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    let d = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        d[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// Index of `i` mirrored into `[0, n)` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

impl<'t, T: Element> Var<'t, T> {
    /// 2-D cross-correlation with zero padding. `w` is `(c_out, c_in, kh, kw)`.
    pub fn conv2d(self, w: Self, bias: Option<Self>, stride: usize, pad: usize) -> Self {
        let (x, wv) = (self.value(), w.value());
        let (n, c_in, h, wd) = x.dims4();
        let (c_out, c_in2, kh, kw) = wv.dims4();
        assert_eq!(c_in, c_in2, "conv2d: input has {c_in} channels, kernel expects {c_in2}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel larger than padded input");
        let g = ConvGeom {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (g.k(), g.p());
        let mut y = vec![T::zero(); n * c_out * p];
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        let in_plane = c_in * h * wd;
        for i in 0..n {
            let xi = &x.data()[i * in_plane..(i + 1) * in_plane];
            let b: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            gemm(c_out, k, p, wv.data(), Layout::Plain, b, Layout::Plain, T::zero(), &mut y[i * c_out * p..(i + 1) * c_out * p]);
        }
        let mut parents = vec![self, w];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.shape(), [c_out], "conv2d bias shape");
            for plane in y.chunks_mut(p).enumerate() {
                let bb = bv.data()[plane.0 % c_out];
                for v in plane.1 {
                    *v += bb;
                }
            }
            parents.push(b);
        }
        let out = Tensor::new([n, c_out, g.ho, g.wo], y);
        self.tape.record(out, &parents, move |c| {
            let (x, w, gy) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let mut gx = c.needs[0].then(|| vec![T::zero(); n * in_plane]);
            let mut gw = c.needs[1].then(|| vec![T::zero(); c_out * k]);
            let mut cols = vec![T::zero(); k * p];
            for i in 0..n {
                let gyi = &gy[i * c_out * p..(i + 1) * c_out * p];
                if let Some(gw) = gw.as_mut() {
                    let xi = &x[i * in_plane..(i + 1) * in_plane];
                    let b: &[T] = if g.is_pointwise() {
                        xi
                    } else {
                        im2col(xi, &g, &mut cols);
                        &cols
                    };
                    gemm(c_out, p, k, gyi, Layout::Plain, b, Layout::Transposed, T::one(), gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[i * in_plane..(i + 1) * in_plane];
                    if g.is_pointwise() {
                        gemm(k, c_out, p, w, Layout::Transposed, gyi, Layout::Plain, T::zero(), dst);
                    } else {
                        gemm(k, c_out, p, w, Layout::Transposed, gyi, Layout::Plain, T::zero(), &mut cols);
                        col2im(&cols, &g, dst);
                    }
                }
            }
            let mut out = vec![
                gx.map(|v| Tensor::new([n, c_in, h, wd], v)),
                gw.map(|v| Tensor::new([c_out, c_in, kh, kw], v)),
            ];
            if c.inputs.len() == 3 {
                out.push(c.needs[2].then(|| {
                    let mut gb = vec![T::zero(); c_out];
                    for (idx, plane) in gy.chunks(p).enumerate() {
                        gb[idx % c_out] += plane.iter().copied().sum::<T>();
                    }
                    Tensor::new([c_out], gb)
                }));
            }
            out
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); n * c * h2 * w2];
        for (pi, plane) in x.data().chunks(h * w).enumerate() {
            let dst = &mut y[pi * h2 * w2..(pi + 1) * h2 * w2];
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[yy * w2 + xx] = plane[(yy / 2) * w + xx / 2];
                }
            }
        }
        self.tape.record(Tensor::new([n, c, h2, w2], y), &[self], move |cx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for (pi, plane) in cx.grad.data().chunks(h2 * w2).enumerate() {
                let dst = &mut g[pi * h * w..(pi + 1) * h * w];
                for yy in 0..h2 {
                    for xx in 0..w2 {
                        dst[(yy / 2) * w + xx / 2] += plane[yy * w2 + xx];
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], g))]
        })
    }

    /// 2x2 average pooling with stride 2 (odd trailing row/column dropped).
    pub fn avg_pool2x(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (h / 2, w / 2);
        assert!(h2 > 0 && w2 > 0, "avg_pool2x on {h}x{w}");
        let q = t::<T>(0.25);
        let mut y = vec![T::zero(); n * c * h2 * w2];
        for (pi, plane) in x.data().chunks(h * w).enumerate() {
            let dst = &mut y[pi * h2 * w2..(pi + 1) * h2 * w2];
            for yy in 0..h2 {
                for xx in 0..w2 {
                    let (a, b) = (2 * yy * w + 2 * xx, (2 * yy + 1) * w + 2 * xx);
                    dst[yy * w2 + xx] = (plane[a] + plane[a + 1] + plane[b] + plane[b + 1]) * q;
                }
            }
        }
        self.tape.record(Tensor::new([n, c, h2, w2], y), &[self], move |cx| {
            let mut g = vec![T::zero(); n * c * h * w];
            for (pi, plane) in cx.grad.data().chunks(h2 * w2).enumerate() {
                let dst = &mut g[pi * h * w..(pi + 1) * h * w];
                for yy in 0..h2 {
                    for xx in 0..w2 {
                        let v = plane[yy * w2 + xx] * q;
                        let (a, b) = (2 * yy * w + 2 * xx, (2 * yy + 1) * w + 2 * xx);
                        dst[a] += v;
                        dst[a + 1] += v;
                        dst[b] += v;
                        dst[b + 1] += v;
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], g))]
        })
    }

    /// Spatial mean: `(n, c, h, w)` -> `(n, c)`.
    pub fn global_avg_pool(self) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let inv = t::<T>(1.0 / hw as f64);
        let y: Vec<T> = x.data().chunks(hw).map(|pl| pl.iter().copied().sum::<T>() * inv).collect();
        self.tape.record(Tensor::new([n, c], y), &[self], move |cx| {
            let mut g = Vec::with_capacity(n * c * hw);
            for &gv in cx.grad.data() {
                g.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::new([n, c, h, w], g))]
        })
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(self, eps: f64) -> Self {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = t::<T>(eps);
        let inv_hw = t::<T>(1.0 / hw as f64);
        let mut y = x.data().to_vec();
        let mut rstd = Vec::with_capacity(n * c);
        for plane in y.chunks_mut(hw) {
            let mean = plane.iter().copied().sum::<T>() * inv_hw;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let r = T::one() / (var + eps).sqrt();
            for v in plane.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        self.tape.record(Tensor::new([n, c, h, w], y), &[self], move |cx| {
            let mut g = cx.grad.data().to_vec();
            for ((gp, yp), &r) in g.chunks_mut(hw).zip(cx.output.data().chunks(hw)).zip(&rstd) {
                let mg = gp.iter().copied().sum::<T>() * inv_hw;
                let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                for (gv, &yv) in gp.iter_mut().zip(yp) {
                    *gv = r * (*gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::new([n, c, h, w], g))]
        })
    }

    /// Multiplies each `(n, c)` plane by `s[n, c]`.
    pub fn scale_channels(self, s: Self) -> Self {
        let (x, sv) = (self.value(), s.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(sv.shape(), [n, c], "scale_channels factor shape");
        let hw = h * w;
        let mut y = x.data().to_vec();
        for (plane, &f) in y.chunks_mut(hw).zip(sv.data()) {
            for v in plane {
                *v *= f;
            }
        }
        self.tape.record(Tensor::new([n, c, h, w], y), &[self, s], move |cx| {
            let (x, s, g) = (cx.inputs[0].data(), cx.inputs[1].data(), cx.grad.data());
            let gx = cx.needs[0].then(|| {
                let mut gx = g.to_vec();
                for (plane, &f) in gx.chunks_mut(hw).zip(s) {
                    for v in plane {
                        *v *= f;
                    }
                }
                Tensor::new([n, c, h, w], gx)
            });
            let gs = cx.needs[1].then(|| {
                let gs = g.chunks(hw).zip(x.chunks(hw)).map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p * q).sum()).collect();
                Tensor::new([n, c], gs)
            });
            vec![gx, gs]
        })
    }

    /// Adds `b[n, c]` to each `(n, c)` plane.
    pub fn shift_channels(self, b: Self) -> Self {
        let (x, bv) = (self.value(), b.value());
        let (n, c, h, w) = x.dims4();
        assert_eq!(bv.shape(), [n, c], "shift_channels offset shape");
        let hw = h * w;
        let mut y = x.data().to_vec();
        for (plane, &f) in y.chunks_mut(hw).zip(bv.data()) {
            for v in plane {
                *v += f;
            }
        }
        self.tape.record(Tensor::new([n, c, h, w], y), &[self, b], move |cx| {
            let g = cx.grad;
            let gx = cx.needs[0].then(|| g.clone());
            let gb = cx.needs[1].then(|| Tensor::new([n, c], g.data().chunks(hw).map(|p| p.iter().copied().sum()).collect()));
            vec![gx, gb]
        })
    }

    /// `(n, c)` -> `(n, c, h, w)` constant over space.
    pub fn spatial_broadcast(self, h: usize, w: usize) -> Self {
        let x = self.value();
        let (n, c) = x.dims2();
        let hw = h * w;
        let mut y = Vec::with_capacity(n * c * hw);
        for &v in x.data() {
            y.extend(std::iter::repeat_n(v, hw));
        }
        self.tape.record(Tensor::new([n, c, h, w], y), &[self], move |cx| {
            let g = cx.grad.data().chunks(hw).map(|p| p.iter().copied().sum()).collect();
            vec![Some(Tensor::new([n, c], g))]
        })
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(parts: &[Self]) -> Self {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let (n, _, h, w) = vals[0].dims4();
        let hw = h * w;
        let chans: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (n2, c, h2, w2) = v.dims4();
                assert_eq!((n2, h2, w2), (n, h, w), "concat_channels shape mismatch");
                c
            })
            .collect();
        let total: usize = chans.iter().sum();
        let mut y = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for (v, &c) in vals.iter().zip(&chans) {
                y.extend_from_slice(&v.data()[i * c * hw..(i + 1) * c * hw]);
            }
        }
        parts[0].tape.record(Tensor::new([n, total, h, w], y), parts, move |cx| {
            let g = cx.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(chans.len());
            for (p, &c) in chans.iter().enumerate() {
                out.push(cx.needs[p].then(|| {
                    let mut gp = Vec::with_capacity(n * c * hw);
                    for i in 0..n {
                        let start = (i * total + off) * hw;
                        gp.extend_from_slice(&g[start..start + c * hw]);
                    }
                    Tensor::new([n, c, h, w], gp)
                }));
                off += c;
            }
            out
        })
    }

    /// Separable per-channel filter with mirror padding; `taps` has odd length.
    pub fn separable_filter_reflect(self, taps: &[f64]) -> Self {
        assert!(taps.len() % 2 == 1, "filter length must be odd");
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let taps: Vec<T> = taps.iter().map(|&v| t(v)).collect();
        let y = filter_planes(x.data(), h, w, &taps, false);
        self.tape.record(Tensor::new([n, c, h, w], y), &[self], move |cx| {
            vec![Some(Tensor::new([n, c, h, w], filter_planes(cx.grad.data(), h, w, &taps, true)))]
        })
    }
}

/// Horizontal then vertical pass (or the adjoint: vertical^T then horizontal^T).
fn filter_planes<T: Element>(data: &[T], h: usize, w: usize, taps: &[T], adjoint: bool) -> Vec<T> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![T::zero(); data.len()];
    let mut tmp = vec![T::zero(); h * w];
    for (src, dst) in data.chunks(h * w).zip(out.chunks_mut(h * w)) {
        tmp.fill(T::zero());
        if !adjoint {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for (k, &tap) in taps.iter().enumerate() {
                        let ix = reflect_index(xx as isize + k as isize - r, w);
                        acc += tap * src[yy * w + ix];
                    }
                    tmp[yy * w + xx] = acc;
                }
            }
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = T::zero();
                    for (k, &tap) in taps.iter().enumerate() {
                        let iy = reflect_index(yy as isize + k as isize - r, h);
                        acc += tap * tmp[iy * w + xx];
                    }
                    dst[yy * w + xx] = acc;
                }
            }
        } else {
            for yy in 0..h {
                for xx in 0..w {
                    let g = src[yy * w + xx];
                    for (k, &tap) in taps.iter().enumerate() {
                        let iy = reflect_index(yy as isize + k as isize - r, h);
                        tmp[iy * w + xx] += tap * g;
                    }
                }
            }
            for yy in 0..h {
                for xx in 0..w {
                    let g = tmp[yy * w + xx];
                    for (k, &tap) in taps.iter().enumerate() {
                        let ix = reflect_index(xx as isize + k as isize - r, w);
                        dst[yy * w + ix] += tap * g;
                    }
                }
            }
        }
    }
    out
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64(v)
}
