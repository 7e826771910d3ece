//! Image-shaped (`[N, C, H, W]`) operations.

use std::rc::Rc;

use super::Var;
use crate::tensor::{gemm, MatLayout, Tensor};

/// Border handling for convolution inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub pad_mode: PadMode,
}

impl Conv2dSpec {
    /// Stride-1 convolution that keeps the spatial size for odd kernels.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            stride: 1,
            padding: (kh / 2, kw / 2),
            dilation: (1, 1),
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, d: usize, kh: usize, kw: usize) -> Self {
        self.dilation = (d, d);
        self.padding = (d * (kh / 2), d * (kw / 2));
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let eff_h = self.dilation.0 * (kh - 1) + 1;
        let eff_w = self.dilation.1 * (kw - 1) + 1;
        let oh = (h + 2 * self.padding.0 - eff_h) / self.stride + 1;
        let ow = (w + 2 * self.padding.1 - eff_w) / self.stride + 1;
        (oh, ow)
    }
}

/// For every (kernel tap, output pixel) pair, the flat input index it reads
/// within one channel plane, or -1 for zero padding.
fn tap_table(spec: &Conv2dSpec, h: usize, w: usize, kh: usize, kw: usize) -> (Vec<i64>, usize, usize) {
    let (oh, ow) = spec.output_size(h, w, kh, kw);
    let mut table = Vec::with_capacity(kh * kw * oh * ow);
    for ki in 0..kh {
        for kj in 0..kw {
            for oy in 0..oh {
                for ox in 0..ow {
                    let iy = (oy * spec.stride + ki * spec.dilation.0) as i64 - spec.padding.0 as i64;
                    let ix = (ox * spec.stride + kj * spec.dilation.1) as i64 - spec.padding.1 as i64;
                    let idx = match spec.pad_mode {
                        PadMode::Zero => {
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                -1
                            } else {
                                iy * w as i64 + ix
                            }
                        }
                        PadMode::Replicate => {
                            let cy = iy.clamp(0, h as i64 - 1);
                            let cx = ix.clamp(0, w as i64 - 1);
                            cy * w as i64 + cx
                        }
                    };
                    table.push(idx);
                }
            }
        }
    }
    (table, oh, ow)
}

fn im2col(plane_stack: &[f64], c: usize, hw: usize, taps: usize, p: usize, table: &[i64], cols: &mut [f64]) {
    for ci in 0..c {
        let plane = &plane_stack[ci * hw..(ci + 1) * hw];
        for t in 0..taps {
            let row = &mut cols[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            let idx = &table[t * p..(t + 1) * p];
            for (dst, &src) in row.iter_mut().zip(idx) {
                *dst = if src < 0 { 0.0 } else { plane[src as usize] };
            }
        }
    }
}

fn col2im(cols: &[f64], c: usize, hw: usize, taps: usize, p: usize, table: &[i64], out: &mut [f64]) {
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for t in 0..taps {
            let row = &cols[(ci * taps + t) * p..(ci * taps + t + 1) * p];
            let idx = &table[t * p..(t + 1) * p];
            for (&v, &dst) in row.iter().zip(idx) {
                if dst >= 0 {
                    plane[dst as usize] += v;
                }
            }
        }
    }
}

/// Linear-interpolation taps for resizing one axis by an integer factor
/// (half-pixel centers, edge clamped).
fn upsample_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

fn dims4(t: &Tensor, what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(t.ndim(), 4, "{what} expects [N, C, H, W], got {:?}", t.shape());
    (t.dim(0), t.dim(1), t.dim(2), t.dim(3))
}

impl<'t> Var<'t> {
    /// 2-D convolution of `[N, C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(self, weight: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        let x = self.value();
        let wt = weight.value();
        let (n, c, h, w) = dims4(&x, "conv2d");
        let (o, wc, kh, kw) = dims4(&wt, "conv2d weight");
        assert_eq!(c, wc, "conv2d channel mismatch");
        let (table, oh, ow) = tap_table(&spec, h, w, kh, kw);
        let table = Rc::new(table);
        let taps = kh * kw;
        let p = oh * ow;
        let ckk = c * taps;
        let hw = h * w;

        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; ckk * p];
        for s in 0..n {
            im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, hw, taps, p, &table, &mut cols);
            gemm(
                o,
                ckk,
                p,
                wt.data(),
                MatLayout::row_major(ckk),
                &cols,
                MatLayout::row_major(p),
                &mut out[s * o * p..(s + 1) * o * p],
                0.0,
            );
        }
        let y = Tensor::new([n, o, oh, ow], out);
        self.tape.op(y, &[self, weight], move |g, need| {
            let mut gx = need[0].then(|| vec![0.0; n * c * hw]);
            let mut gw = need[1].then(|| vec![0.0; o * ckk]);
            let mut cols = vec![0.0; ckk * p];
            for s in 0..n {
                let gs = &g.data()[s * o * p..(s + 1) * o * p];
                if let Some(gw) = gw.as_mut() {
                    im2col(&x.data()[s * c * hw..(s + 1) * c * hw], c, hw, taps, p, &table, &mut cols);
                    gemm(
                        o,
                        p,
                        ckk,
                        gs,
                        MatLayout::row_major(p),
                        &cols,
                        MatLayout::transposed(p),
                        gw,
                        1.0,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(
                        ckk,
                        o,
                        p,
                        wt.data(),
                        MatLayout::transposed(ckk),
                        gs,
                        MatLayout::row_major(p),
                        &mut cols,
                        0.0,
                    );
                    col2im(&cols, c, hw, taps, p, &table, &mut gx[s * c * hw..(s + 1) * c * hw]);
                }
            }
            vec![
                gx.map(|d| Tensor::new([n, c, h, w], d)),
                gw.map(|d| Tensor::new([o, c, kh, kw], d)),
            ]
        })
    }

    /// Adds `b[c]` to every pixel of channel `c`.
    pub fn add_bias_channels(self, b: Var<'t>) -> Var<'t> {
        let x = self.value();
        let bv = b.value();
        let (n, c, h, w) = dims4(&x, "add_bias_channels");
        assert_eq!(bv.numel(), c);
        let bshape = bv.shape().to_vec();
        let hw = h * w;
        let mut y = (*x).clone();
        for s in 0..n {
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                for v in &mut y.data_mut()[off..off + hw] {
                    *v += bv.data()[ci];
                }
            }
        }
        self.tape.op(y, &[self, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; c];
                for s in 0..n {
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let off = (s * c + ci) * hw;
                        *a += g.data()[off..off + hw].iter().sum::<f64>();
                    }
                }
                Tensor::new(bshape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Adds the per-sample channel vector `v[n, c]` to every pixel.
    pub fn add_nc(self, v: Var<'t>) -> Var<'t> {
        let x = self.value();
        let vv = v.value();
        let (n, c, h, w) = dims4(&x, "add_nc");
        assert_eq!(vv.shape(), &[n, c]);
        let hw = h * w;
        let mut y = (*x).clone();
        for k in 0..n * c {
            for e in &mut y.data_mut()[k * hw..(k + 1) * hw] {
                *e += vv.data()[k];
            }
        }
        self.tape.op(y, &[self, v], move |g, need| {
            let gv = need[1].then(|| {
                Tensor::new(
                    [n, c],
                    (0..n * c)
                        .map(|k| g.data()[k * hw..(k + 1) * hw].iter().sum())
                        .collect(),
                )
            });
            vec![Some(g.clone()), gv]
        })
    }

    /// Multiplies every pixel of channel `c` in sample `n` by `v[n, c]`.
    pub fn mul_nc(self, v: Var<'t>) -> Var<'t> {
        let x = self.value();
        let vv = v.value();
        let (n, c, h, w) = dims4(&x, "mul_nc");
        assert_eq!(vv.shape(), &[n, c]);
        let hw = h * w;
        let mut y = (*x).clone();
        for k in 0..n * c {
            for e in &mut y.data_mut()[k * hw..(k + 1) * hw] {
                *e *= vv.data()[k];
            }
        }
        self.tape.op(y, &[self, v], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = g.clone();
                for k in 0..n * c {
                    for e in &mut out.data_mut()[k * hw..(k + 1) * hw] {
                        *e *= vv.data()[k];
                    }
                }
                out
            });
            let gv = need[1].then(|| {
                Tensor::new(
                    [n, c],
                    (0..n * c)
                        .map(|k| {
                            g.data()[k * hw..(k + 1) * hw]
                                .iter()
                                .zip(&x.data()[k * hw..(k + 1) * hw])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect(),
                )
            });
            vec![gx, gv]
        })
    }

    /// Multiplies every channel by a single-channel map `a` of shape `[N, 1, H, W]`.
    pub fn mul_spatial(self, a: Var<'t>) -> Var<'t> {
        let x = self.value();
        let av = a.value();
        let (n, c, h, w) = dims4(&x, "mul_spatial");
        assert_eq!(av.shape(), &[n, 1, h, w], "mul_spatial map shape");
        let hw = h * w;
        let mut y = (*x).clone();
        for s in 0..n {
            let m = &av.data()[s * hw..(s + 1) * hw];
            for ci in 0..c {
                let off = (s * c + ci) * hw;
                for (e, mv) in y.data_mut()[off..off + hw].iter_mut().zip(m) {
                    *e *= mv;
                }
            }
        }
        self.tape.op(y, &[self, a], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = g.clone();
                for s in 0..n {
                    let m = &av.data()[s * hw..(s + 1) * hw];
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        for (e, mv) in out.data_mut()[off..off + hw].iter_mut().zip(m) {
                            *e *= mv;
                        }
                    }
                }
                out
            });
            let ga = need[1].then(|| {
                let mut acc = vec![0.0; n * hw];
                for s in 0..n {
                    for ci in 0..c {
                        let off = (s * c + ci) * hw;
                        for k in 0..hw {
                            acc[s * hw + k] += g.data()[off + k] * x.data()[off + k];
                        }
                    }
                }
                Tensor::new([n, 1, h, w], acc)
            });
            vec![gx, ga]
        })
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(self, factor: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "upsample_bilinear");
        let ty = Rc::new(upsample_taps(h, factor));
        let tx = Rc::new(upsample_taps(w, factor));
        let (oh, ow) = (h * factor, w * factor);
        let mut y = vec![0.0; n * c * oh * ow];
        for k in 0..n * c {
            let src = &x.data()[k * h * w..(k + 1) * h * w];
            let dst = &mut y[k * oh * ow..(k + 1) * oh * ow];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                }
            }
        }
        self.tape.op(Tensor::new([n, c, oh, ow], y), &[self], move |g, _| {
            let mut gx = vec![0.0; n * c * h * w];
            for k in 0..n * c {
                let gs = &g.data()[k * oh * ow..(k + 1) * oh * ow];
                let dst = &mut gx[k * h * w..(k + 1) * h * w];
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        let gv = gs[oy * ow + ox];
                        dst[y0 * w + x0] += gv * wy0 * wx0;
                        dst[y0 * w + x1] += gv * wy0 * wx1;
                        dst[y1 * w + x0] += gv * wy1 * wx0;
                        dst[y1 * w + x1] += gv * wy1 * wx1;
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], gx))]
        })
    }

    /// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "global_avg_pool");
        let hw = h * w;
        let inv = 1.0 / hw as f64;
        let y = Tensor::new(
            [n, c],
            (0..n * c)
                .map(|k| x.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() * inv)
                .collect(),
        );
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; n * c * hw];
            for k in 0..n * c {
                out[k * hw..(k + 1) * hw].fill(g.data()[k] * inv);
            }
            vec![Some(Tensor::new([n, c, h, w], out))]
        })
    }

    /// Spatial maximum per channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_max_pool(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "global_max_pool");
        let hw = h * w;
        let argmax: Vec<usize> = (0..n * c)
            .map(|k| {
                let plane = &x.data()[k * hw..(k + 1) * hw];
                let mut best = 0;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let y = Tensor::new(
            [n, c],
            argmax
                .iter()
                .enumerate()
                .map(|(k, &i)| x.data()[k * hw + i])
                .collect(),
        );
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; n * c * hw];
            for (k, &i) in argmax.iter().enumerate() {
                out[k * hw + i] = g.data()[k];
            }
            vec![Some(Tensor::new([n, c, h, w], out))]
        })
    }

    /// Spatial window `[y0, y1) × [x0, x1)` of sample `s`, as `[1, C, h, w]`.
    pub fn crop(self, s: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "crop");
        assert!(s < n && y0 < y1 && y1 <= h && x0 < x1 && x1 <= w, "crop out of bounds");
        let (ch, cw) = (y1 - y0, x1 - x0);
        let mut y = vec![0.0; c * ch * cw];
        for ci in 0..c {
            for r in 0..ch {
                let src = ((s * c + ci) * h + y0 + r) * w + x0;
                y[(ci * ch + r) * cw..(ci * ch + r + 1) * cw]
                    .copy_from_slice(&x.data()[src..src + cw]);
            }
        }
        self.tape.op(Tensor::new([1, c, ch, cw], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * c * h * w];
            for ci in 0..c {
                for r in 0..ch {
                    let dst = ((s * c + ci) * h + y0 + r) * w + x0;
                    out[dst..dst + cw].copy_from_slice(&g.data()[(ci * ch + r) * cw..(ci * ch + r + 1) * cw]);
                }
            }
            vec![Some(Tensor::new([n, c, h, w], out))]
        })
    }

    /// `[N, C, H, W]` to a `[N·H·W, C]` matrix with one row per pixel.
    pub fn channels_last(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "channels_last");
        let hw = h * w;
        let mut y = vec![0.0; n * hw * c];
        for s in 0..n {
            for ci in 0..c {
                for k in 0..hw {
                    y[(s * hw + k) * c + ci] = x.data()[(s * c + ci) * hw + k];
                }
            }
        }
        self.tape.op(Tensor::new([n * hw, c], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * c * hw];
            for s in 0..n {
                for ci in 0..c {
                    for k in 0..hw {
                        out[(s * c + ci) * hw + k] = g.data()[(s * hw + k) * c + ci];
                    }
                }
            }
            vec![Some(Tensor::new([n, c, h, w], out))]
        })
    }

    /// Channels `c0..c1`.
    pub fn slice_channels(self, c0: usize, c1: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "slice_channels");
        assert!(c0 < c1 && c1 <= c);
        let hw = h * w;
        let k = c1 - c0;
        let mut y = vec![0.0; n * k * hw];
        for s in 0..n {
            let src = (s * c + c0) * hw;
            y[s * k * hw..(s + 1) * k * hw].copy_from_slice(&x.data()[src..src + k * hw]);
        }
        self.tape.op(Tensor::new([n, k, h, w], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * c * hw];
            for s in 0..n {
                let dst = (s * c + c0) * hw;
                out[dst..dst + k * hw].copy_from_slice(&g.data()[s * k * hw..(s + 1) * k * hw]);
            }
            vec![Some(Tensor::new([n, c, h, w], out))]
        })
    }

    /// Normalizes each pixel's 2-channel vector to unit length.
    ///
    /// Pixels whose vector norm is below `1e-8` become `(1, 0)` and pass no
    /// gradient.
    pub fn normalize_pairs(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x, "normalize_pairs");
        assert_eq!(c, 2, "normalize_pairs needs exactly 2 channels");
        let hw = h * w;
        let mut y = vec![0.0; n * 2 * hw];
        for s in 0..n {
            for k in 0..hw {
                let a = x.data()[s * 2 * hw + k];
                let b = x.data()[s * 2 * hw + hw + k];
                let r = a.hypot(b);
                let (ya, yb) = if r < 1e-8 { (1.0, 0.0) } else { (a / r, b / r) };
                y[s * 2 * hw + k] = ya;
                y[s * 2 * hw + hw + k] = yb;
            }
        }
        self.tape.op(Tensor::new([n, 2, h, w], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * 2 * hw];
            for s in 0..n {
                for k in 0..hw {
                    let ia = s * 2 * hw + k;
                    let ib = ia + hw;
                    let (a, b) = (x.data()[ia], x.data()[ib]);
                    let r = a.hypot(b);
                    if r < 1e-8 {
                        continue;
                    }
                    let r3 = r * r * r;
                    let (ga, gb) = (g.data()[ia], g.data()[ib]);
                    out[ia] = ga * b * b / r3 - gb * a * b / r3;
                    out[ib] = -ga * a * b / r3 + gb * a * a / r3;
                }
            }
            vec![Some(Tensor::new([n, 2, h, w], out))]
        })
    }
}
