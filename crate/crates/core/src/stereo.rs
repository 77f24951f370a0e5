//! Cost-volume stereo matching at 1/8 resolution with iterative refinement.
//!
//! The left-view estimate correlates left features with right features shifted
//! by `d`. The right-view estimate runs the same estimator on the horizontally
//! mirrored pair with roles swapped, then mirrors the result back.

use crate::autograd::{CustomOp, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{DisparityMap, View};
use crate::nn::{self, PATCH};
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;

/// Value stored for shifts that fall off the left edge of the right image.
pub const COST_SENTINEL: f64 = -1.0e4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StereoConfig {
    pub feat_channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub d_max: usize,
    pub iters: usize,
    pub lookup_radius: usize,
    pub temperature: f64,
    pub mu: f64,
}

impl Default for StereoConfig {
    fn default() -> Self {
        Self { feat_channels: 32, hidden: 32, blocks: 3, d_max: 24, iters: 4, lookup_radius: 2, temperature: 1.0, mu: 0.9 }
    }
}

/// Correlation scores `(D_max, h, w)` at feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub scores: Tensor,
}

impl CostVolume {
    pub fn d_max(&self) -> usize {
        self.scores.channels()
    }

    pub fn argmax(&self, y: usize, x: usize) -> usize {
        let mut best = 0;
        for d in 1..self.d_max() {
            if self.scores.at(d, y, x) > self.scores.at(best, y, x) {
                best = d;
            }
        }
        best
    }
}

pub fn init_stereo(p: &mut ParamSet, init: &mut Init, cfg: &StereoConfig) {
    let c = cfg.feat_channels;
    nn::init_patchify(p, init, "stereo.patch", 3, c);
    nn::init_dw_stack(p, init, "stereo.feat", c, cfg.blocks);
    let lookups = 2 * cfg.lookup_radius + 1;
    p.init_conv(init, "stereo.upd.in", lookups + c + 1, cfg.hidden, 1, 1);
    nn::init_dw_block(p, init, "stereo.upd.blk", cfg.hidden, cfg.hidden);
    p.init_conv(init, "stereo.upd.out", cfg.hidden, 1, 1, 1);
    if let Some(w) = p.get_mut("stereo.upd.out.w") {
        *w = w.map(|v| v * 0.1);
    }
}

fn features(tape: &Tape, params: &ParamSet, cfg: &StereoConfig, frame: Var) -> Result<Var> {
    let [_, h, w] = tape.shape(frame);
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::Shape(format!("stereo input {h}x{w} is not a multiple of {PATCH}")));
    }
    let f = nn::patchify(tape, params, "stereo.patch", frame)?;
    nn::dw_stack(tape, params, "stereo.feat", f, cfg.blocks)
}

/// Weight-shared features for both frames at 1/8 resolution.
pub fn extract_stereo_features(
    tape: &Tape,
    params: &ParamSet,
    cfg: &StereoConfig,
    left: Var,
    right: Var,
) -> Result<(Var, Var)> {
    if tape.shape(left) != tape.shape(right) {
        return Err(Error::Shape(format!("stereo frames {:?} vs {:?}", tape.shape(left), tape.shape(right))));
    }
    Ok((features(tape, params, cfg, left)?, features(tape, params, cfg, right)?))
}

struct CostVolumeOp {
    d_max: usize,
}

fn cost_forward(fl: &Tensor, fr: &Tensor, d_max: usize) -> Tensor {
    let [c, h, w] = fl.shape();
    let inv_c = 1.0 / c as f64;
    Tensor::from_fn(d_max, h, w, |d, y, x| {
        if x < d {
            return COST_SENTINEL;
        }
        (0..c).map(|ci| fl.at(ci, y, x) * fr.at(ci, y, x - d)).sum::<f64>() * inv_c
    })
}

impl CustomOp for CostVolumeOp {
    fn name(&self) -> &'static str {
        "cost_volume"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (fl, fr) = (inputs[0], inputs[1]);
        let [c, h, w] = fl.shape();
        let inv_c = 1.0 / c as f64;
        let mut gl = Tensor::zeros(c, h, w);
        let mut gr = Tensor::zeros(c, h, w);
        for d in 0..self.d_max {
            for y in 0..h {
                for x in d..w {
                    let g = grad.at(d, y, x) * inv_c;
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let il = gl.idx(ci, y, x);
                        gl.data_mut()[il] += g * fr.at(ci, y, x - d);
                        let ir = gr.idx(ci, y, x - d);
                        gr.data_mut()[ir] += g * fl.at(ci, y, x);
                    }
                }
            }
        }
        vec![Some(gl), Some(gr)]
    }
}

/// `cost(d, y, x) = mean_c fl(c, y, x) * fr(c, y, x - d)`, sentinel where `x < d`.
pub fn build_cost_volume(tape: &Tape, fl: Var, fr: Var, d_max: usize) -> Result<Var> {
    if tape.shape(fl) != tape.shape(fr) {
        return Err(Error::Shape(format!("cost volume {:?} vs {:?}", tape.shape(fl), tape.shape(fr))));
    }
    if d_max == 0 {
        return Err(Error::InvalidArgument("d_max must be at least 1".into()));
    }
    let out = cost_forward(&tape.value(fl), &tape.value(fr), d_max);
    Ok(tape.custom(&[fl, fr], out, Box::new(CostVolumeOp { d_max })))
}

/// Expected disparity under `softmax(cost / temperature)`.
pub fn soft_argmin(tape: &Tape, cost: Var, temperature: f64) -> Result<Var> {
    let d_max = tape.shape(cost)[0];
    let p = tape.softmax_channels(tape.scale(cost, 1.0 / temperature));
    let ds = tape.constant(Tensor::from_fn(d_max, 1, 1, |d, _, _| d as f64));
    let weighted = tape.mul_bcast(p, ds)?;
    Ok(tape.channel_sum(weighted))
}

struct CostLookupOp {
    radius: usize,
}

/// Valid shift range at column `x`: `[0, min(d_max - 1, x)]`.
fn lookup_hi(d_max: usize, x: usize) -> f64 {
    (d_max - 1).min(x) as f64
}

fn lookup_forward(cost: &Tensor, disp: &Tensor, radius: usize) -> Tensor {
    let [d_max, h, w] = cost.shape();
    let n = 2 * radius + 1;
    Tensor::from_fn(n, h, w, |o, y, x| {
        let hi = lookup_hi(d_max, x);
        let p = (disp.at(0, y, x) + o as f64 - radius as f64).clamp(0.0, hi);
        let i0 = p.floor();
        let t = p - i0;
        let i0 = i0 as usize;
        let i1 = (i0 + 1).min(hi as usize);
        (1.0 - t) * cost.at(i0, y, x) + t * cost.at(i1, y, x)
    })
}

impl CustomOp for CostLookupOp {
    fn name(&self) -> &'static str {
        "cost_lookup"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (cost, disp) = (inputs[0], inputs[1]);
        let [d_max, h, w] = cost.shape();
        let mut gc = Tensor::zeros(d_max, h, w);
        let mut gd = Tensor::zeros(1, h, w);
        for o in 0..2 * self.radius + 1 {
            for y in 0..h {
                for x in 0..w {
                    let g = grad.at(o, y, x);
                    let hi = lookup_hi(d_max, x);
                    let raw = disp.at(0, y, x) + o as f64 - self.radius as f64;
                    let p = raw.clamp(0.0, hi);
                    let i0 = p.floor();
                    let t = p - i0;
                    let i0 = i0 as usize;
                    let i1 = (i0 + 1).min(hi as usize);
                    let a = gc.idx(i0, y, x);
                    gc.data_mut()[a] += g * (1.0 - t);
                    let b = gc.idx(i1, y, x);
                    gc.data_mut()[b] += g * t;
                    if raw > 0.0 && raw < hi {
                        let i = gd.idx(0, y, x);
                        gd.data_mut()[i] += g * (cost.at(i1, y, x) - cost.at(i0, y, x));
                    }
                }
            }
        }
        vec![Some(gc), Some(gd)]
    }
}

/// Linear interpolation of the cost volume at `disp + o` for `o` in
/// `-radius..=radius`, restricted to valid shifts. Returns `(2r+1, h, w)`.
pub fn cost_lookup(tape: &Tape, cost: Var, disp: Var, radius: usize) -> Result<Var> {
    let [_, h, w] = tape.shape(cost);
    if tape.shape(disp) != [1, h, w] {
        return Err(Error::Shape(format!("cost lookup disparity {:?} for volume {:?}", tape.shape(disp), tape.shape(cost))));
    }
    let out = lookup_forward(&tape.value(cost), &tape.value(disp), radius);
    Ok(tape.custom(&[cost, disp], out, Box::new(CostLookupOp { radius })))
}

/// Initial soft-argmin followed by `iters` residual updates. Returns the
/// coarse (feature-resolution) estimate after each update.
pub fn refine_coarse(
    tape: &Tape,
    params: &ParamSet,
    cfg: &StereoConfig,
    cost: Var,
    context: Var,
) -> Result<Vec<Var>> {
    if cfg.iters == 0 {
        return Err(Error::InvalidArgument("refinement needs at least one iteration".into()));
    }
    let mut d = soft_argmin(tape, cost, cfg.temperature)?;
    let mut out = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let look = cost_lookup(tape, cost, d, cfg.lookup_radius)?;
        let dn = tape.scale(d, 1.0 / cfg.d_max as f64);
        let x = tape.concat(&[look, context, dn])?;
        let hdn = nn::pointwise(tape, params, "stereo.upd.in", x)?;
        let hdn = tape.relu(hdn);
        let hdn = nn::dw_block(tape, params, "stereo.upd.blk", hdn)?;
        let delta = nn::pointwise(tape, params, "stereo.upd.out", hdn)?;
        d = tape.add(d, delta)?;
        out.push(d);
    }
    Ok(out)
}

/// Upsample a feature-resolution disparity to full resolution (values scaled by the factor).
pub fn upsample_disparity(tape: &Tape, coarse: Var) -> Result<Var> {
    let up = nn::upsample_bilinear(tape, coarse, PATCH)?;
    Ok(tape.scale(up, PATCH as f64))
}

/// Full-resolution estimates for the left view of `(left, right)`.
pub fn refine_disparity(tape: &Tape, params: &ParamSet, cfg: &StereoConfig, left: Var, right: Var) -> Result<Vec<Var>> {
    let (fl, fr) = extract_stereo_features(tape, params, cfg, left, right)?;
    let cost = build_cost_volume(tape, fl, fr, cfg.d_max)?;
    refine_coarse(tape, params, cfg, cost, fl)?.into_iter().map(|d| upsample_disparity(tape, d)).collect()
}

/// Per-view lists of `K` full-resolution estimates, indexed by [`View::index`].
pub fn estimate_pair(
    tape: &Tape,
    params: &ParamSet,
    cfg: &StereoConfig,
    left: Var,
    right: Var,
) -> Result<[Vec<Var>; 2]> {
    let l = refine_disparity(tape, params, cfg, left, right)?;
    let (ml, mr) = (tape.flip_w(left), tape.flip_w(right));
    let r = refine_disparity(tape, params, cfg, mr, ml)?.into_iter().map(|d| tape.flip_w(d)).collect();
    Ok([l, r])
}

/// Final estimates as clamped disparity maps.
pub fn estimate_maps(params: &ParamSet, cfg: &StereoConfig, left: &Tensor, right: &Tensor, ceiling: f64) -> Result<[DisparityMap; 2]> {
    let tape = Tape::new();
    let (l, r) = (tape.constant(left.clone()), tape.constant(right.clone()));
    let [el, er] = estimate_pair(&tape, params, cfg, l, r)?;
    let fin = |v: &Vec<Var>, view| DisparityMap::new(tape.value(*v.last().unwrap()).map(|d| d.clamp(0.0, ceiling)), view);
    Ok([fin(&el, View::L), fin(&er, View::R)])
}

/// `sum_k mu^(K-k) * mean_valid |gt - est_k|`. The flag is set when the mask is empty.
pub fn disparity_loss_view(tape: &Tape, estimates: &[Var], gt: &DisparityMap, mu: f64) -> Result<(Var, bool)> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("no disparity estimates".into()));
    }
    let n_valid = gt.valid.iter().filter(|&&v| v).count();
    let zero = tape.constant(Tensor::scalar(0.0));
    if n_valid == 0 {
        return Ok((zero, true));
    }
    let [_, h, w] = gt.values.shape();
    let mask = tape.constant(Tensor::from_vec(1, h, w, gt.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?);
    let target = tape.constant(gt.values.clone());
    let k = estimates.len();
    let mut total = zero;
    for (i, &e) in estimates.iter().enumerate() {
        let diff = tape.abs(tape.sub(e, target)?);
        let masked = tape.mul(diff, mask)?;
        let weight = mu.powi((k - 1 - i) as i32) / n_valid as f64;
        total = tape.add(total, tape.scale(tape.sum(masked), weight))?;
    }
    Ok((total, false))
}

/// Sum of [`disparity_loss_view`] over both views.
pub fn disparity_loss(tape: &Tape, estimates: &[Vec<Var>; 2], gt: &[DisparityMap; 2], mu: f64) -> Result<(Var, bool)> {
    let (a, fa) = disparity_loss_view(tape, &estimates[0], &gt[0], mu)?;
    let (b, fb) = disparity_loss_view(tape, &estimates[1], &gt[1], mu)?;
    Ok((tape.add(a, b)?, fa || fb))
}
