//! Stroke-assisted prediction network: a strided convolutional backbone,
//! the 8-channel text head, and the two stroke sub-blocks (feature
//! distillation with channel attention, and cue filtration with
//! orthogonal-convolution spatial attention).
//!
//! Head channel layout: 0–1 text-area logits (background, text), 2–3
//! center-area logits, 4–5 log h1 and log h2, 6–7 unnormalized (cos θ, sin θ).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Conv2dSpec, PadMode, Var};
use crate::error::{Error, Result};
use crate::geometry::Rect;
use crate::geometry_labels::GeometryMaps;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const HEAD_CHANNELS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SapnConfig {
    pub backbone_channels: [usize; 4],
    pub backbone_strides: [usize; 4],
    pub backbone_dilations: [usize; 4],
    pub head_hidden: usize,
    /// Hidden width of the orthogonal convolutions in cue filtration.
    pub scf_hidden: usize,
    pub scf_kernels: Vec<usize>,
    /// Channel reduction of the distillation attention MLP.
    pub tfd_reduction: usize,
    /// Initial height prediction in pixels.
    pub h_init: f64,
}

impl Default for SapnConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 32, 32],
            backbone_strides: [2, 2, 1, 1],
            backbone_dilations: [1, 1, 2, 4],
            head_hidden: 16,
            scf_hidden: 4,
            scf_kernels: vec![3, 5, 7],
            tfd_reduction: 4,
            h_init: 8.0,
        }
    }
}

impl SapnConfig {
    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[3]
    }

    /// Registers backbone and head parameters, plus the stroke sub-blocks
    /// when `with_stroke` is set.
    pub fn init(&self, store: &mut ParamStore, with_stroke: bool, rng: &mut ChaCha8Rng) {
        let mut cin = 3;
        for (i, &c) in self.backbone_channels.iter().enumerate() {
            store.init_uniform(&format!("backbone.{i}.weight"), &[c, cin, 3, 3], cin * 9, rng);
            store.init_const(&format!("backbone.{i}.bias"), &[c], 0.0);
            cin = c;
        }
        let (f, hid) = (self.feature_channels(), self.head_hidden);
        store.init_uniform("head.conv1.weight", &[hid, f, 3, 3], f * 9, rng);
        store.init_const("head.conv1.bias", &[hid], 0.0);
        store.init_glorot("head.conv2.weight", &[HEAD_CHANNELS, hid, 1, 1], hid, HEAD_CHANNELS, rng);
        let h0 = self.h_init.ln();
        let mut bias = vec![0.0; HEAD_CHANNELS];
        bias[4] = h0;
        bias[5] = h0;
        bias[6] = 1.0;
        store.insert("head.conv2.bias", Tensor::new([HEAD_CHANNELS], bias));
        if with_stroke {
            self.init_stroke(store, rng);
        }
    }

    fn init_stroke(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.feature_channels();
        let r = (c / self.tfd_reduction).max(1);
        store.init_uniform("tfd.conv1.weight", &[c, c, 3, 3], c * 9, rng);
        store.init_const("tfd.conv1.bias", &[c], 0.0);
        store.init_uniform("tfd.conv2.weight", &[c, c, 3, 3], c * 9, rng);
        store.init_const("tfd.conv2.bias", &[c], 0.0);
        store.init_uniform("tfd.mlp1.weight", &[c, r], c, rng);
        store.init_const("tfd.mlp1.bias", &[1, r], 0.0);
        store.init_glorot("tfd.mlp2.weight", &[r, c], r, c, rng);
        store.init_const("tfd.mlp2.bias", &[1, c], 0.0);
        let m = self.scf_hidden;
        for &k in &self.scf_kernels {
            store.init_glorot(&format!("scf.k{k}.row.weight"), &[m, 3, 1, k], 3 * k, m * k, rng);
            store.init_glorot(&format!("scf.k{k}.col.weight"), &[1, m, k, 1], m * k, k, rng);
        }
        store.init_glorot("scf.proj.weight", &[1, c, 1, 1], c, 1, rng);
        store.init_const("scf.proj.bias", &[1], 0.0);
    }
}

fn conv_bias<'t>(p: &Bound<'t, '_>, x: Var<'t>, name: &str, spec: Conv2dSpec) -> Var<'t> {
    x.conv2d(p.get(&format!("{name}.weight")), spec)
        .add_bias_channels(p.get(&format!("{name}.bias")))
}

/// `[N, 3, H, W]` image in `[0, 1]` to `[N, C, H/s, W/s]` features.
pub fn backbone_forward<'t>(p: &Bound<'t, '_>, cfg: &SapnConfig, image: Var<'t>) -> Result<Var<'t>> {
    let shape = image.shape();
    let s = cfg.stride();
    if shape.len() != 4 || shape[1] != 3 || shape[2] % s != 0 || shape[3] % s != 0 {
        return Err(Error::Shape(format!(
            "backbone needs [N, 3, H, W] with H and W divisible by {s}, got {shape:?}"
        )));
    }
    let mut x = image.add_scalar(-0.5);
    for i in 0..4 {
        let spec = Conv2dSpec::same(3, 3)
            .with_dilation(cfg.backbone_dilations[i], 3, 3)
            .with_stride(cfg.backbone_strides[i]);
        x = conv_bias(p, x, &format!("backbone.{i}"), spec).relu();
    }
    Ok(x)
}

/// Raw 8-channel head output at input resolution.
pub fn text_head_forward<'t>(p: &Bound<'t, '_>, cfg: &SapnConfig, features: Var<'t>) -> Var<'t> {
    let h = conv_bias(p, features, "head.conv1", Conv2dSpec::same(3, 3)).relu();
    let out = conv_bias(p, h, "head.conv2", Conv2dSpec::same(1, 1));
    out.upsample_bilinear(cfg.stride())
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Probability and geometry planes of sample `s` of a raw head output.
pub fn decode_head(raw: &Tensor, s: usize) -> GeometryMaps {
    let (c, h, w) = (raw.dim(1), raw.dim(2), raw.dim(3));
    assert_eq!(c, HEAD_CHANNELS);
    let hw = h * w;
    let plane = |k: usize| &raw.data()[(s * c + k) * hw..(s * c + k + 1) * hw];
    let mut maps = GeometryMaps::empty(w, h);
    for i in 0..hw {
        maps.ta[i] = sigmoid(plane(1)[i] - plane(0)[i]);
        maps.tca[i] = sigmoid(plane(3)[i] - plane(2)[i]);
        maps.h1[i] = plane(4)[i].exp();
        maps.h2[i] = plane(5)[i].exp();
        let (cs, sn) = (plane(6)[i], plane(7)[i]);
        let r = cs.hypot(sn);
        let (cs, sn) = if r < 1e-8 { (1.0, 0.0) } else { (cs / r, sn / r) };
        maps.cos_theta[i] = cs;
        maps.sin_theta[i] = sn;
        maps.valid_mask[i] = maps.ta[i] >= 0.5;
    }
    maps
}

/// Feature-cell window `(y0, y1, x0, x1)` covering a pixel rectangle,
/// widened outward to whole cells and clamped to the map.
pub fn ota_cells(ota: &Rect, stride: usize, fh: usize, fw: usize) -> Result<(usize, usize, usize, usize)> {
    let s = stride as f64;
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let y0 = clamp((ota.y0 / s).floor(), fh);
    let x0 = clamp((ota.x0 / s).floor(), fw);
    let y1 = clamp((ota.y1 / s).ceil(), fh);
    let x1 = clamp((ota.x1 / s).ceil(), fw);
    if y1 <= y0 || x1 <= x0 {
        return Err(Error::EmptyRegion);
    }
    Ok((y0, y1, x0, x1))
}

/// Rough stroke cues for one outer text rectangle of sample `s`.
///
/// Returns `[1, C, stride·h, stride·w]` for the feature window `cells`.
pub fn tfd_forward<'t>(
    p: &Bound<'t, '_>,
    cfg: &SapnConfig,
    features: Var<'t>,
    s: usize,
    cells: (usize, usize, usize, usize),
) -> Var<'t> {
    let (y0, y1, x0, x1) = cells;
    let crop = features.crop(s, y0, y1, x0, x1);
    let pooled = crop.global_avg_pool();
    let x = crop.add_nc(pooled);
    let x = conv_bias(p, x, "tfd.conv1", Conv2dSpec::same(3, 3)).relu();
    let x = conv_bias(p, x, "tfd.conv2", Conv2dSpec::same(3, 3)).relu();
    let branch = x.upsample_bilinear(cfg.stride());
    let att = tfd_attention(p, x);
    branch.mul_nc(att)
}

/// Channel attention `[1, C]` from average- and max-pooled descriptors
/// through a shared two-layer MLP.
pub fn tfd_attention<'t>(p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
    let mlp = |v: Var<'t>| {
        v.matmul(p.get("tfd.mlp1.weight"))
            .add_row(p.get("tfd.mlp1.bias"))
            .relu()
            .matmul(p.get("tfd.mlp2.weight"))
            .add_row(p.get("tfd.mlp2.bias"))
    };
    mlp(x.global_avg_pool()).add(mlp(x.global_max_pool())).sigmoid()
}

/// Spatial attention `[1, 1, H, W]` from orthogonal convolutions of the RGB crop.
pub fn scf_attention<'t>(p: &Bound<'t, '_>, cfg: &SapnConfig, rgb: Var<'t>) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for &k in &cfg.scf_kernels {
        let row = rgb.conv2d(
            p.get(&format!("scf.k{k}.row.weight")),
            Conv2dSpec::same(1, k).with_pad_mode(PadMode::Replicate),
        );
        let col = row.conv2d(
            p.get(&format!("scf.k{k}.col.weight")),
            Conv2dSpec::same(k, 1).with_pad_mode(PadMode::Replicate),
        );
        acc = Some(match acc {
            None => col,
            Some(a) => a.add(col),
        });
    }
    acc.expect("at least one kernel size").sigmoid()
}

/// Stroke probability `[1, 1, H, W]` from rough cues and the aligned RGB crop.
pub fn scf_forward<'t>(p: &Bound<'t, '_>, cfg: &SapnConfig, rough: Var<'t>, rgb: Var<'t>) -> Result<Var<'t>> {
    let (rs, cs) = (rough.shape(), rgb.shape());
    if rs.len() != 4 || cs.len() != 4 || rs[2..] != cs[2..] || cs[1] != 3 {
        return Err(Error::Shape(format!("cue map {rs:?} and RGB crop {cs:?} are not aligned")));
    }
    let att = scf_attention(p, cfg, rgb);
    Ok(scf_project(p, rough, att))
}

/// `sigmoid(proj(att ⊙ rough + rough))`.
pub fn scf_project<'t>(p: &Bound<'t, '_>, rough: Var<'t>, att: Var<'t>) -> Var<'t> {
    let gated = rough.mul_spatial(att).add(rough);
    conv_bias(p, gated, "scf.proj", Conv2dSpec::same(1, 1)).sigmoid()
}
