//! Gaussian attribute prediction from decoded features and per-view cloud assembly.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, View, DISPARITY_EPS};
use crate::nn;
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;

/// Smallest depth a refined pixel may take.
pub const DEPTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianConfig {
    /// Feature channels of both decoded feature maps.
    pub c_f: usize,
    pub blocks: usize,
    /// Upper bound of every scale axis, world units.
    pub s_max: f64,
    pub color_amp: f64,
    /// Depth residual amplitude, metres.
    pub depth_amp: f64,
    /// Disparity (pixels) around which the depth-domain map is linearized.
    pub d_ref: f64,
    /// Pixels per unit of disparity-feature magnitude.
    pub disp_unit: f64,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        GaussianConfig { c_f: 32, blocks: 2, s_max: 0.05, color_amp: 0.25, depth_amp: 0.05, d_ref: 16.0, disp_unit: 32.0 }
    }
}

impl GaussianConfig {
    /// Channelwise gain of the depth-domain map: the slope of `fb / d` at
    /// `d_ref`, expressed per unit of disparity feature.
    pub fn depth_gain(&self, focal_baseline: f64) -> f64 {
        -focal_baseline * self.disp_unit / (self.d_ref * self.d_ref)
    }
}

const HEADS: [(&str, usize); 4] = [("scale", 3), ("rot", 4), ("opac", 1), ("res", 4)];

pub fn init_gaussians(p: &mut ParamSet, init: &mut Init, cfg: &GaussianConfig) {
    let c = cfg.c_f;
    p.init_conv(init, "gs.trunk.in", 2 * c, c, 1, 1);
    nn::init_dw_stack(p, init, "gs.trunk", c, cfg.blocks);
    for (h, n) in HEADS {
        nn::init_dw_block(p, init, &format!("gs.{h}.blk"), c, c);
        p.init_conv(init, &format!("gs.{h}.out"), c, 4 * n, 1, 1);
    }
}

/// Output of the shared trunk for one view.
#[derive(Clone, Copy, Debug)]
pub struct TrunkFeatures(pub Var);

/// Evaluates the shared trunk at most once per view.
pub struct GaussianPredictor<'a> {
    params: &'a ParamSet,
    cfg: GaussianConfig,
    gain: f64,
    calls: Cell<[usize; 2]>,
}

impl<'a> GaussianPredictor<'a> {
    pub fn new(params: &'a ParamSet, cfg: GaussianConfig, focal_baseline: f64) -> Self {
        GaussianPredictor { params, cfg, gain: cfg.depth_gain(focal_baseline), calls: Cell::new([0; 2]) }
    }

    /// Replaces the depth-domain gain.
    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    pub fn config(&self) -> &GaussianConfig {
        &self.cfg
    }

    pub fn trunk_calls(&self) -> [usize; 2] {
        self.calls.get()
    }

    /// `f_p([T(f_disp), f_img])` at feature resolution.
    pub fn trunk(&self, tape: &Tape, view: View, f_disp: Var, f_img: Var) -> Result<TrunkFeatures> {
        let mut calls = self.calls.get();
        if calls[view.index()] > 0 {
            return Err(Error::InvalidArgument(format!("trunk already evaluated for view {view:?}")));
        }
        calls[view.index()] += 1;
        self.calls.set(calls);
        let depth_feat = tape.scale(f_disp, self.gain);
        let cat = tape.concat(&[depth_feat, f_img])?;
        let h = nn::pointwise(tape, self.params, "gs.trunk.in", cat)?;
        let h = tape.relu(h);
        Ok(TrunkFeatures(nn::dw_stack(tape, self.params, "gs.trunk", h, self.cfg.blocks)?))
    }

    /// Head logits at full resolution: feature block, projection, pixel
    /// shuffle to 1/4, then bilinear to full.
    fn head(&self, tape: &Tape, trunk: TrunkFeatures, name: &str) -> Result<Var> {
        let h = nn::dw_block(tape, self.params, &format!("gs.{name}.blk"), trunk.0)?;
        let h = nn::pointwise(tape, self.params, &format!("gs.{name}.out"), h)?;
        let h = tape.pixel_shuffle(h, 2)?;
        nn::upsample_bilinear(tape, h, nn::PATCH / 2)
    }

    /// Scale, rotation and opacity maps.
    pub fn predict_attributes(&self, tape: &Tape, trunk: TrunkFeatures) -> Result<AttributeMaps> {
        let scale = tape.scale(tape.sigmoid(self.head(tape, trunk, "scale")?), self.cfg.s_max);
        let rotation = tape.l2norm_channels(self.head(tape, trunk, "rot")?);
        let opacity = tape.sigmoid(self.head(tape, trunk, "opac")?);
        Ok(AttributeMaps { scale, rotation, opacity })
    }

    /// Bounded color and depth residuals, before amplitude scaling.
    pub fn predict_residuals(&self, tape: &Tape, trunk: TrunkFeatures) -> Result<ResidualMaps> {
        let r = tape.tanh(self.head(tape, trunk, "res")?);
        Ok(ResidualMaps { color: tape.slice_channels(r, 0, 3)?, depth: tape.slice_channels(r, 3, 1)? })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttributeMaps {
    /// `(3, H, W)` in `(0, s_max)`.
    pub scale: Var,
    /// `(4, H, W)` unit quaternions.
    pub rotation: Var,
    /// `(1, H, W)` in `(0, 1)`.
    pub opacity: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualMaps {
    /// `(3, H, W)` in `(-1, 1)`.
    pub color: Var,
    /// `(1, H, W)` in `(-1, 1)`.
    pub depth: Var,
}

/// Refined color in `[0, 1]` and depth floored at [`DEPTH_FLOOR`], plus the
/// validity of each pixel (disparity above [`DISPARITY_EPS`]).
pub fn refine(
    tape: &Tape,
    cfg: &GaussianConfig,
    x_hat: Var,
    d_hat: Var,
    res: &ResidualMaps,
    focal_baseline: f64,
) -> Result<(Var, Var, Vec<bool>)> {
    let color = tape.add(x_hat, tape.scale(res.color, cfg.color_amp))?;
    let color = tape.clamp(color, 0.0, 1.0);
    let valid: Vec<bool> = tape.value(d_hat).data().iter().map(|&d| d >= DISPARITY_EPS).collect();
    let d = tape.clamp(d_hat, DISPARITY_EPS, f64::INFINITY);
    let [_, h, w] = tape.shape(d_hat);
    let fb = tape.constant(Tensor::full(1, h, w, focal_baseline));
    let z = tape.add(tape.div(fb, d)?, tape.scale(res.depth, cfg.depth_amp))?;
    Ok((color, tape.clamp(z, DEPTH_FLOOR, f64::INFINITY), valid))
}

/// Per-view inputs of cloud assembly.
#[derive(Clone, Debug)]
pub struct ViewGaussians<'c> {
    pub view: View,
    pub cam: &'c CameraModel,
    pub color: Var,
    pub depth: Var,
    pub attrs: AttributeMaps,
    pub mask: Vec<bool>,
}

/// Tape-level cloud: `(C, 1, N)` attributes in renderer order
/// `[centers, scales, rotations, opacities, colors]`.
#[derive(Clone, Debug)]
pub struct CloudVars {
    pub attrs: [Var; 5],
    pub sources: Vec<(View, usize)>,
}

impl CloudVars {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn to_cloud(&self, tape: &Tape) -> Result<GaussianCloud> {
        let [c, s, r, o, col] = self.attrs.map(|v| tape.value(v));
        let mut cloud = GaussianCloud::from_tensors(&c, &s, &r, &o, &col)?;
        cloud.sources = self.sources.clone();
        Ok(cloud)
    }
}

/// One Gaussian per masked pixel of every view, centers unprojected along
/// each pixel ray; views concatenate in the given order.
pub fn assemble_cloud(tape: &Tape, views: &[ViewGaussians]) -> Result<Option<CloudVars>> {
    let mut sources = Vec::new();
    let mut picks: Vec<Vec<usize>> = Vec::new();
    let mut dirs = Vec::new();
    let mut origins = Vec::new();
    for v in views {
        let [_, h, w] = tape.shape(v.depth);
        if v.mask.len() != h * w || v.cam.width != w || v.cam.height != h {
            return Err(Error::Shape(format!("view {:?}: mask/camera do not match {h}x{w}", v.view)));
        }
        let idx: Vec<usize> = (0..h * w).filter(|&i| v.mask[i]).collect();
        let o = v.cam.center();
        for &i in &idx {
            dirs.push(v.cam.ray_dir((i % w) as f64, (i / w) as f64));
            origins.push(o);
            sources.push((v.view, i));
        }
        picks.push(idx);
    }
    if sources.is_empty() {
        return Ok(None);
    }
    let gather = |f: &dyn Fn(&ViewGaussians) -> Var| -> Result<Var> {
        let src: Vec<(Var, Vec<usize>)> = views.iter().zip(&picks).map(|(v, idx)| (f(v), idx.clone())).collect();
        tape.gather_pixels(&src)
    };
    let n = sources.len();
    let depth = gather(&|v| v.depth)?;
    let dirs = tape.constant(Tensor::from_fn(3, 1, n, |c, _, i| dirs[i][c]));
    let origins = tape.constant(Tensor::from_fn(3, 1, n, |c, _, i| origins[i][c]));
    let centers = tape.add(tape.mul_bcast(dirs, depth)?, origins)?;
    let attrs = [
        centers,
        gather(&|v| v.attrs.scale)?,
        gather(&|v| v.attrs.rotation)?,
        gather(&|v| v.attrs.opacity)?,
        gather(&|v| v.color)?,
    ];
    Ok(Some(CloudVars { attrs, sources }))
}

/// Per-pixel unprojected 3D Gaussians stored attribute-wise.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub centers: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    /// Unit quaternions `(w, x, y, z)`.
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
    /// Originating view and flat pixel index.
    pub sources: Vec<(View, usize)>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn push(&mut self, center: [f64; 3], scale: [f64; 3], rotation: [f64; 4], opacity: f64, color: [f64; 3], source: (View, usize)) {
        self.centers.push(center);
        self.scales.push(scale);
        self.rotations.push(rotation);
        self.opacities.push(opacity);
        self.colors.push(color);
        self.sources.push(source);
    }

    pub fn extend(&mut self, other: &GaussianCloud) {
        self.centers.extend_from_slice(&other.centers);
        self.scales.extend_from_slice(&other.scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacities.extend_from_slice(&other.opacities);
        self.colors.extend_from_slice(&other.colors);
        self.sources.extend_from_slice(&other.sources);
    }

    /// Builds a cloud from `(C, 1, N)` attribute tensors.
    pub fn from_tensors(centers: &Tensor, scales: &Tensor, rotations: &Tensor, opacities: &Tensor, colors: &Tensor) -> Result<Self> {
        let n = centers.width();
        let expect = [(centers, 3), (scales, 3), (rotations, 4), (opacities, 1), (colors, 3)];
        for (t, c) in expect {
            if t.shape() != [c, 1, n] {
                return Err(Error::Shape(format!("cloud attribute {:?}, expected ({c}, 1, {n})", t.shape())));
            }
        }
        let col3 = |t: &Tensor, i: usize| [t.at(0, 0, i), t.at(1, 0, i), t.at(2, 0, i)];
        let mut cloud = GaussianCloud::default();
        for i in 0..n {
            cloud.push(
                col3(centers, i),
                col3(scales, i),
                [rotations.at(0, 0, i), rotations.at(1, 0, i), rotations.at(2, 0, i), rotations.at(3, 0, i)],
                opacities.at(0, 0, i),
                col3(colors, i),
                (View::L, i),
            );
        }
        Ok(cloud)
    }

    /// Plain-text PLY point list with every attribute.
    pub fn write_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "ply\nformat ascii 1.0\nelement vertex {}", self.len())?;
        for p in ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue"] {
            writeln!(f, "property float {p}")?;
        }
        writeln!(f, "property uchar view\nproperty uint pixel\nend_header")?;
        for i in 0..self.len() {
            let (c, s, r, col) = (self.centers[i], self.scales[i], self.rotations[i], self.colors[i]);
            writeln!(
                f,
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                c[0], c[1], c[2], s[0], s[1], s[2], r[0], r[1], r[2], r[3], self.opacities[i], col[0], col[1], col[2],
                self.sources[i].0.index(),
                self.sources[i].1
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, max_rel_err};
    use crate::geometry::CameraRig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> GaussianConfig {
        GaussianConfig { c_f: 4, blocks: 1, ..Default::default() }
    }

    fn setup(cfg: &GaussianConfig) -> ParamSet {
        let mut p = ParamSet::new();
        init_gaussians(&mut p, &mut Init::new(11), cfg);
        p
    }

    fn rand_t(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, amp: f64) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-amp..amp))
    }

    #[test]
    fn zero_logits_give_half_scale_and_zero_residuals() {
        let cfg = small();
        let mut p = setup(&cfg);
        for h in ["scale", "res"] {
            for suffix in ["w", "b"] {
                p.get_mut(&format!("gs.{h}.out.{suffix}")).unwrap().data_mut().fill(0.0);
            }
        }
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = GaussianPredictor::new(&p, cfg, 32.0);
        let t = pred.trunk(&tape, View::L, tape.constant(rand_t(&mut rng, 4, 2, 2, 1.0)), tape.constant(rand_t(&mut rng, 4, 2, 2, 1.0))).unwrap();
        let a = pred.predict_attributes(&tape, t).unwrap();
        assert_eq!(tape.shape(a.scale), [3, 16, 16]);
        assert!(tape.value(a.scale).data().iter().all(|&v| (v - cfg.s_max / 2.0).abs() < 1e-15));
        let r = pred.predict_residuals(&tape, t).unwrap();
        assert!(tape.value(r.color).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(r.depth).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bounds_hold_for_adversarial_features() {
        let cfg = small();
        let p = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for amp in [1.0, 1e3, 1e6] {
            let tape = Tape::new();
            let pred = GaussianPredictor::new(&p, cfg, 32.0);
            let t = pred.trunk(&tape, View::R, tape.constant(rand_t(&mut rng, 4, 2, 3, amp)), tape.constant(rand_t(&mut rng, 4, 2, 3, amp))).unwrap();
            let a = pred.predict_attributes(&tape, t).unwrap();
            let r = pred.predict_residuals(&tape, t).unwrap();
            assert!(tape.value(a.scale).data().iter().all(|&v| v >= 0.0 && v <= cfg.s_max));
            assert!(tape.value(a.opacity).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let q = tape.value(a.rotation);
            for i in 0..16 * 24 {
                let n: f64 = (0..4).map(|c| q.data()[c * 16 * 24 + i].powi(2)).sum();
                assert!((n.sqrt() - 1.0).abs() < 1e-6);
            }
            assert!(tape.value(r.color).data().iter().chain(tape.value(r.depth).data()).all(|&v| (-1.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn trunk_runs_once_per_view() {
        let cfg = small();
        let p = setup(&cfg);
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(4, 1, 1));
        let pred = GaussianPredictor::new(&p, cfg, 32.0);
        pred.trunk(&tape, View::L, f, f).unwrap();
        pred.trunk(&tape, View::R, f, f).unwrap();
        assert!(pred.trunk(&tape, View::L, f, f).is_err());
        assert_eq!(pred.trunk_calls(), [1, 1]);
    }

    #[test]
    fn depth_domain_map_conditions_predictions() {
        let cfg = small();
        assert_eq!(GaussianConfig::default().depth_gain(32.0), -4.0);
        let p = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (fd, fi) = (rand_t(&mut rng, 4, 2, 2, 1.0), rand_t(&mut rng, 4, 2, 2, 1.0));
        let run = |gain: Option<f64>| {
            let tape = Tape::new();
            let mut pred = GaussianPredictor::new(&p, cfg, 32.0);
            if let Some(g) = gain {
                pred = pred.with_gain(g);
            }
            let t = pred.trunk(&tape, View::L, tape.constant(fd.clone()), tape.constant(fi.clone())).unwrap();
            let v = tape.value(pred.predict_attributes(&tape, t).unwrap().opacity);
            (*v).clone()
        };
        assert!(run(None).max_abs_diff(&run(Some(1.0))) > 1e-6);
    }

    #[test]
    fn heads_match_finite_differences() {
        let cfg = small();
        let p = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fd0 = rand_t(&mut rng, 4, 2, 2, 1.0);
        let fi0 = rand_t(&mut rng, 4, 2, 2, 1.0);
        let weights: Vec<Tensor> = [3, 4, 1, 3, 1].iter().map(|&c| rand_t(&mut rng, c, 16, 16, 1.0)).collect();
        let objective = |tape: &Tape, fd: Var, fi: Var| -> Var {
            let pred = GaussianPredictor::new(&p, cfg, 32.0);
            let t = pred.trunk(tape, View::L, fd, fi).unwrap();
            let a = pred.predict_attributes(tape, t).unwrap();
            let r = pred.predict_residuals(tape, t).unwrap();
            let outs = [a.scale, a.rotation, a.opacity, r.color, r.depth];
            let mut total = None;
            for (o, w) in outs.iter().zip(&weights) {
                let term = tape.sum(tape.mul(*o, tape.constant(w.clone())).unwrap());
                total = Some(match total {
                    None => term,
                    Some(acc) => tape.add(acc, term).unwrap(),
                });
            }
            total.unwrap()
        };
        let tape = Tape::new();
        let (vd, vi) = (tape.leaf(fd0.clone()), tape.leaf(fi0.clone()));
        let loss = objective(&tape, vd, vi);
        let g = tape.backward(loss).unwrap();
        let eval = |fd: &Tensor, fi: &Tensor| {
            let tape = Tape::new();
            let l = objective(&tape, tape.constant(fd.clone()), tape.constant(fi.clone()));
            tape.value(l).data()[0]
        };
        let num_d = finite_difference(&fd0, 1e-3, |x| eval(x, &fi0));
        let num_i = finite_difference(&fi0, 1e-3, |x| eval(&fd0, x));
        assert!(max_rel_err(g.wrt(vd).unwrap(), &num_d, 1e-6) < 1e-3);
        assert!(max_rel_err(g.wrt(vi).unwrap(), &num_i, 1e-6) < 1e-3);
    }

    fn flat_residuals(tape: &Tape, h: usize, w: usize, color: f64, depth: f64) -> ResidualMaps {
        ResidualMaps { color: tape.constant(Tensor::full(3, h, w, color)), depth: tape.constant(Tensor::full(1, h, w, depth)) }
    }

    #[test]
    fn refine_endpoints_and_clamp() {
        let cfg = GaussianConfig::default();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 2, 2, |c, y, x| 0.1 * (c + y + 2 * x) as f64 + 0.2));
        let d = tape.constant(Tensor::from_vec(1, 2, 2, vec![16.0, 8.0, 0.0, 32.0]).unwrap());
        let (color, depth, valid) = refine(&tape, &cfg, x, d, &flat_residuals(&tape, 2, 2, 0.0, 0.0), 32.0).unwrap();
        assert_eq!(tape.value(color).data(), tape.value(x).data());
        assert_eq!(&tape.value(depth).data()[..2], &[2.0, 4.0]);
        assert_eq!(tape.value(depth).data()[3], 1.0);
        assert_eq!(valid, vec![true, true, false, true]);

        let x = tape.constant(Tensor::full(3, 1, 1, 0.9));
        let d = tape.constant(Tensor::full(1, 1, 1, 16.0));
        let (color, _, _) = refine(&tape, &cfg, x, d, &flat_residuals(&tape, 1, 1, 0.2, 0.0), 32.0).unwrap();
        assert!((tape.value(color).data()[0] - 0.95).abs() < 1e-12);
        let (color, depth, _) = refine(&tape, &cfg, x, d, &flat_residuals(&tape, 1, 1, 1.0, -1.0), 32.0).unwrap();
        assert_eq!(tape.value(color).data()[0], 1.0);
        assert!((tape.value(depth).data()[0] - 1.95).abs() < 1e-12);
    }

    fn uniform_attrs(tape: &Tape, h: usize, w: usize) -> AttributeMaps {
        AttributeMaps {
            scale: tape.constant(Tensor::full(3, h, w, 0.01)),
            rotation: tape.constant(Tensor::from_fn(4, h, w, |c, _, _| if c == 0 { 1.0 } else { 0.0 })),
            opacity: tape.constant(Tensor::full(1, h, w, 0.5)),
        }
    }

    #[test]
    fn principal_point_pixel_lands_on_axis() {
        let cam = CameraModel::translated(10.0, 10.0, 1.0, 1.0, 3, 3, [0.3, 0.0, 0.0]);
        let tape = Tape::new();
        let mut mask = vec![false; 9];
        mask[4] = true;
        let v = ViewGaussians {
            view: View::R,
            cam: &cam,
            color: tape.constant(Tensor::full(3, 3, 3, 0.5)),
            depth: tape.constant(Tensor::full(1, 3, 3, 2.0)),
            attrs: uniform_attrs(&tape, 3, 3),
            mask,
        };
        let cloud = assemble_cloud(&tape, &[v]).unwrap().unwrap().to_cloud(&tape).unwrap();
        assert_eq!(cloud.len(), 1);
        let q = cam.world_to_cam(cloud.centers[0]);
        assert!(q.iter().zip([0.0, 0.0, 2.0]).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(cloud.sources[0], (View::R, 4));
    }

    #[test]
    fn counts_empty_masks_and_ray_constraint() {
        let rig = CameraRig::symmetric(8.0, 4, 4, 0.2);
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mask: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.6)).collect();
        let count = mask.iter().filter(|&&m| m).count();
        let depth = tape.constant(rand_t(&mut rng, 1, 4, 4, 1.0).map(|v| v + 2.0));
        let mk = |view, cam, mask: Vec<bool>| ViewGaussians {
            view,
            cam,
            color: tape.constant(Tensor::full(3, 4, 4, 0.5)),
            depth,
            attrs: uniform_attrs(&tape, 4, 4),
            mask,
        };
        let both = assemble_cloud(&tape, &[mk(View::L, &rig.left, mask.clone()), mk(View::R, &rig.right, mask.clone())]).unwrap().unwrap();
        assert_eq!(both.len(), 2 * count);
        assert!(assemble_cloud(&tape, &[mk(View::L, &rig.left, vec![false; 16])]).unwrap().is_none());

        let cloud = both.to_cloud(&tape).unwrap();
        let o = rig.left.center();
        for (i, &(view, px)) in cloud.sources.iter().enumerate().take(count) {
            assert_eq!(view, View::L);
            let dir = rig.left.ray_dir((px % 4) as f64, (px / 4) as f64);
            let rel: Vec<f64> = (0..3).map(|k| cloud.centers[i][k] - o[k]).collect();
            let cross = [rel[1] * dir[2] - rel[2] * dir[1], rel[2] * dir[0] - rel[0] * dir[2], rel[0] * dir[1] - rel[1] * dir[0]];
            assert!(cross.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn plane_views_agree_within_residual_band() {
        let (w, h, z) = (16, 4, 2.0);
        let rig = CameraRig::symmetric(16.0, w, h, 0.25);
        let d = rig.focal_baseline() / z;
        assert_eq!(d, 2.0);
        let cfg = GaussianConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let mut views = Vec::new();
        for (view, cam) in [(View::L, &rig.left), (View::R, &rig.right)] {
            let res = ResidualMaps { color: tape.constant(Tensor::zeros(3, h, w)), depth: tape.constant(rand_t(&mut rng, 1, h, w, 1.0)) };
            let x = tape.constant(Tensor::full(3, h, w, 0.5));
            let dv = tape.constant(Tensor::full(1, h, w, d));
            let (color, depth, mask) = refine(&tape, &cfg, x, dv, &res, rig.focal_baseline()).unwrap();
            views.push(ViewGaussians { view, cam, color, depth, attrs: uniform_attrs(&tape, h, w), mask });
        }
        let cloud = assemble_cloud(&tape, &views).unwrap().unwrap().to_cloud(&tape).unwrap();
        let n = h * w;
        let max_ray = (0..n).map(|i| rig.left.ray_dir((i % w) as f64, (i / w) as f64)).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        for y in 0..h {
            for x in 2..w {
                let l = cloud.centers[y * w + x];
                let r = cloud.centers[n + y * w + x - 2];
                let dist = (0..3).map(|k| (l[k] - r[k]).powi(2)).sum::<f64>().sqrt();
                assert!(dist <= 2.0 * cfg.depth_amp * max_ray + 1e-12, "{dist}");
            }
        }
    }

    #[test]
    fn ply_lists_every_point() {
        let mut cloud = GaussianCloud::default();
        cloud.push([0.0, 1.0, 2.0], [0.01; 3], [1.0, 0.0, 0.0, 0.0], 0.5, [0.1, 0.2, 0.3], (View::R, 7));
        cloud.push([0.5, 1.0, 2.0], [0.02; 3], [1.0, 0.0, 0.0, 0.0], 0.6, [0.4, 0.2, 0.3], (View::L, 3));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        cloud.write_ply(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 2"));
        let body: Vec<&str> = text.split("end_header\n").nth(1).unwrap().lines().collect();
        assert_eq!(body.len(), 2);
        assert!(body[0].ends_with("1 7"));
    }
}
