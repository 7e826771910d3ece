//! SAPN training losses: hard-example-mined text-area classification,
//! center-area cross entropy, angle and height regression over the center
//! area, and the hybrid MSE plus global-SSIM stroke loss.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::geometry_labels::GeometryMaps;
use crate::tensor::Tensor;

pub const OHEM_RATIO: usize = 3;
pub const OHEM_EMPTY_NEGATIVES: usize = 256;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ta: f64,
    pub tca: f64,
    pub angle: f64,
    pub mse: f64,
    pub ssim: f64,
    /// Weight of the linkage loss relative to the SAPN losses.
    pub link: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ta: 1.0,
            tca: 1.0,
            angle: 1.0,
            mse: 1.0,
            ssim: 1.0,
            link: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.ta, self.tca, self.angle, self.mse, self.ssim, self.link];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted leaf losses of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ta: f64,
    pub tca: f64,
    pub sin: f64,
    pub cos: f64,
    pub h: f64,
    pub mse: f64,
    pub ssim: f64,
    pub link: f64,
}

impl LossParts {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.ta * self.ta
            + w.tca * self.tca
            + w.angle * (self.sin + self.cos)
            + self.h
            + w.mse * self.mse
            + w.ssim * self.ssim
            + w.link * self.link
    }
}

fn zero<'t>(like: Var<'t>) -> Var<'t> {
    like.tape().constant(Tensor::scalar(0.0))
}

fn plane_tensor(n: usize, h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let hw = h * w;
    Tensor::new([n, 1, h, w], (0..n * hw).map(|i| f(i / hw, i % hw)).collect())
}

/// Hard negatives for one image: all negatives ranked by loss, descending,
/// ties by pixel index; keeps `3·positives`, or 256 without positives.
pub fn ohem_select(neg_loss: &[f64], positive: &[bool]) -> Vec<bool> {
    let pos = positive.iter().filter(|&&p| p).count();
    let mut negs: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
    let k = if pos == 0 { OHEM_EMPTY_NEGATIVES } else { OHEM_RATIO * pos }.min(negs.len());
    negs.sort_by(|&a, &b| neg_loss[b].partial_cmp(&neg_loss[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut keep = vec![false; positive.len()];
    for &i in &negs[..k] {
        keep[i] = true;
    }
    keep
}

/// Two-class cross entropy from the logit difference `d = z_text − z_bg`,
/// with per-pixel weights that already include the averaging factor.
fn weighted_ce<'t>(d: Var<'t>, pos_w: Tensor, neg_w: Tensor) -> Var<'t> {
    let lp1 = d.log_sigmoid();
    let lp0 = d.neg().log_sigmoid();
    lp1.mul_const(&pos_w).sum().add(lp0.mul_const(&neg_w).sum()).neg()
}

/// `(L_ta, L_tca)` for a raw `[N, 8, H, W]` head output.
pub fn loss_cls<'t>(raw: Var<'t>, gt: &[GeometryMaps]) -> (Var<'t>, Var<'t>) {
    let shape = raw.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(n, gt.len());
    let hw = h * w;
    let d_ta = raw.slice_channels(1, 2).sub(raw.slice_channels(0, 1));
    let d_tca = raw.slice_channels(3, 4).sub(raw.slice_channels(2, 3));

    let dv = d_ta.value();
    let mut selected = vec![false; n * hw];
    for s in 0..n {
        let positive: Vec<bool> = gt[s].ta.iter().map(|&v| v >= 0.5).collect();
        // negative-class loss is -log(1 - p) = softplus(d)
        let neg_loss: Vec<f64> = dv.data()[s * hw..(s + 1) * hw]
            .iter()
            .map(|&z| z.max(0.0) + (-z.abs()).exp().ln_1p())
            .collect();
        let keep = ohem_select(&neg_loss, &positive);
        for i in 0..hw {
            selected[s * hw + i] = positive[i] || keep[i];
        }
    }
    let count = selected.iter().filter(|&&b| b).count();
    let ta = if count == 0 {
        zero(raw)
    } else {
        let c = 1.0 / count as f64;
        let pos = plane_tensor(n, h, w, |s, i| if selected[s * hw + i] && gt[s].ta[i] >= 0.5 { c } else { 0.0 });
        let neg = plane_tensor(n, h, w, |s, i| if selected[s * hw + i] && gt[s].ta[i] < 0.5 { c } else { 0.0 });
        weighted_ce(d_ta, pos, neg)
    };

    let in_ta = gt.iter().map(|g| g.ta.iter().filter(|&&v| v >= 0.5).count()).sum::<usize>();
    let tca = if in_ta == 0 {
        zero(raw)
    } else {
        let c = 1.0 / in_ta as f64;
        let pos = plane_tensor(n, h, w, |s, i| if gt[s].ta[i] >= 0.5 && gt[s].tca[i] >= 0.5 { c } else { 0.0 });
        let neg = plane_tensor(n, h, w, |s, i| if gt[s].ta[i] >= 0.5 && gt[s].tca[i] < 0.5 { c } else { 0.0 });
        weighted_ce(d_tca, pos, neg)
    };
    (ta, tca)
}

/// Regression leaves over center-area pixels.
pub struct RegLoss<'t> {
    pub sin: Var<'t>,
    pub cos: Var<'t>,
    pub h: Var<'t>,
    /// Set when no ground-truth center-area pixel exists and all terms are 0.
    pub empty: bool,
}

/// `L_sin`, `L_cos` and `L_h` for a raw `[N, 8, H, W]` head output.
pub fn loss_reg<'t>(raw: Var<'t>, gt: &[GeometryMaps]) -> RegLoss<'t> {
    let shape = raw.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    assert_eq!(n, gt.len());
    let count: usize = gt.iter().map(|g| g.tca.iter().filter(|&&v| v >= 0.5).count()).sum();
    if count == 0 {
        return RegLoss {
            sin: zero(raw),
            cos: zero(raw),
            h: zero(raw),
            empty: true,
        };
    }
    let inv = 1.0 / count as f64;
    let tape = raw.tape();
    let in_tca = |s: usize, i: usize| gt[s].tca[i] >= 0.5;
    let mask = plane_tensor(n, h, w, |s, i| if in_tca(s, i) { inv } else { 0.0 });

    let angle = raw.slice_channels(6, 8).normalize_pairs();
    let term = |ch: usize, target: &dyn Fn(&GeometryMaps, usize) -> f64| {
        let t = plane_tensor(n, h, w, |s, i| target(&gt[s], i));
        angle
            .slice_channels(ch, ch + 1)
            .sub(tape.constant(t))
            .smooth_l1()
            .mul_const(&mask)
            .sum()
    };
    let cos = term(0, &|g, i| g.cos_theta[i]);
    let sin = term(1, &|g, i| g.sin_theta[i]);

    let mut hl = zero(raw);
    for (k, ch) in [(0usize, 4usize), (1, 5)] {
        let gth = |s: usize, i: usize| if k == 0 { gt[s].h1[i] } else { gt[s].h2[i] };
        let inv_h = plane_tensor(n, h, w, |s, i| if in_tca(s, i) { 1.0 / gth(s, i) } else { 0.0 });
        let weight = plane_tensor(n, h, w, |s, i| {
            if in_tca(s, i) {
                (gth(s, i) + 1.0).ln() * 0.5 * inv
            } else {
                0.0
            }
        });
        let t = raw
            .slice_channels(ch, ch + 1)
            .exp()
            .mul_const(&inv_h)
            .add_scalar(-1.0)
            .smooth_l1()
            .mul_const(&weight)
            .sum();
        hl = hl.add(t);
    }
    RegLoss {
        sin,
        cos,
        h: hl,
        empty: false,
    }
}

/// `(L_MSE, L_SSIM)` of a predicted stroke probability crop against its target.
pub fn loss_stroke<'t>(pred: Var<'t>, gt: &Tensor) -> (Var<'t>, Var<'t>) {
    assert_eq!(pred.shape(), gt.shape(), "stroke map shapes differ");
    let g = pred.tape().constant(gt.clone());
    let mse = pred.sub(g).square().mean();
    let mu_p = pred.mean();
    let mu_g = g.mean();
    let var_p = pred.square().mean().sub(mu_p.square());
    let var_g = g.square().mean().sub(mu_g.square());
    let cov = pred.mul(g).mean().sub(mu_p.mul(mu_g));
    let num = mu_p
        .mul(mu_g)
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(cov.scale(2.0).add_scalar(SSIM_C2));
    let den = mu_p
        .square()
        .add(mu_g.square())
        .add_scalar(SSIM_C1)
        .mul(var_p.add(var_g).add_scalar(SSIM_C2));
    let ssim = num.div(den).neg().add_scalar(1.0);
    (mse, ssim)
}
