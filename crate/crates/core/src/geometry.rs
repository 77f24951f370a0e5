//! Rectified-stereo camera models, disparity/depth conversion,
//! disparity-guided warping, and pixel <-> world mapping.
//!
//! Disparities are stored as non-negative magnitudes. The match of left pixel
//! `(x, y)` lies at `(x - d_L, y)` in the right view; the match of right pixel
//! `(x, y)` lies at `(x + d_R, y)` in the left view. [`View::displacement_sign`]
//! turns a magnitude into the signed horizontal displacement toward the
//! opposite view.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disparities below this are treated as invalid (no finite depth).
pub const DISPARITY_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    L,
    R,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::L => View::R,
            View::R => View::L,
        }
    }

    /// Sign of the horizontal step from a pixel of this view to its match in the other view.
    pub fn displacement_sign(self) -> f64 {
        match self {
            View::L => -1.0,
            View::R => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            View::L => 0,
            View::R => 1,
        }
    }
}

/// Pinhole camera with a rigid world-to-camera transform `[R | t]` (row-major 3x4).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [f64; 12],
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, world_to_camera: [f64; 12]) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, world_to_camera };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at world position `center` looking down +Z with identity rotation.
    pub fn translated(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, center: [f64; 3]) -> Self {
        let t = [-center[0], -center[1], -center[2]];
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            world_to_camera: [1.0, 0.0, 0.0, t[0], 0.0, 1.0, 0.0, t[1], 0.0, 0.0, 1.0, t[2]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("world_to_camera rotation is not orthonormal".into()));
                }
            }
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_camera;
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]]
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_camera;
        [m[3], m[7], m[11]]
    }

    pub fn world_to_cam(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
    }

    pub fn cam_to_world(&self, q: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        let d = [q[0] - t[0], q[1] - t[1], q[2] - t[2]];
        [0, 1, 2].map(|i| r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        self.cam_to_world([0.0, 0.0, 0.0])
    }

    /// World-space ray direction through pixel `(x, y)`, scaled so its camera-frame z is 1.
    pub fn ray_dir(&self, x: f64, y: f64) -> [f64; 3] {
        let q = [(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0];
        let r = self.rotation();
        [0, 1, 2].map(|i| r[0][i] * q[0] + r[1][i] * q[1] + r[2][i] * q[2])
    }

    /// Per-pixel ray directions `(3, H, W)` and camera center broadcast `(3, 1, 1)`.
    pub fn ray_grids(&self) -> (Tensor, Tensor) {
        let mut dirs = Tensor::zeros(3, self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let d = self.ray_dir(x as f64, y as f64);
                for c in 0..3 {
                    dirs.set(c, y, x, d[c]);
                }
            }
        }
        let o = self.center();
        (dirs, Tensor::from_vec(3, 1, 1, o.to_vec()).unwrap())
    }
}

/// Rectified stereo pair plus novel-view targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub left: CameraModel,
    pub right: CameraModel,
    pub baseline: f64,
    #[serde(default)]
    pub targets: Vec<CameraModel>,
}

impl CameraRig {
    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()?;
        for t in &self.targets {
            t.validate()?;
        }
        if !(self.baseline > 0.0) {
            return Err(Error::InvalidArgument("baseline must be positive".into()));
        }
        let (l, r) = (&self.left, &self.right);
        if l.fx != r.fx || l.fy != r.fy || l.cy != r.cy || l.width != r.width || l.height != r.height {
            return Err(Error::InvalidArgument("left/right cameras are not a rectified pair".into()));
        }
        Ok(())
    }

    pub fn camera(&self, v: View) -> &CameraModel {
        match v {
            View::L => &self.left,
            View::R => &self.right,
        }
    }

    /// `fx * baseline`, the numerator of depth = f b / d.
    pub fn focal_baseline(&self) -> f64 {
        self.left.fx * self.baseline
    }

    /// Symmetric rig: left/right at `x = -+ baseline/2`, one target at the midpoint.
    pub fn symmetric(fx: f64, width: usize, height: usize, baseline: f64) -> Self {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let h = baseline / 2.0;
        Self {
            left: CameraModel::translated(fx, fx, cx, cy, width, height, [-h, 0.0, 0.0]),
            right: CameraModel::translated(fx, fx, cx, cy, width, height, [h, 0.0, 0.0]),
            baseline,
            targets: vec![CameraModel::translated(fx, fx, cx, cy, width, height, [0.0, 0.0, 0.0])],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let rig: CameraRig =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("camera file: {e}")))?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Load a list of target cameras (a JSON array, or a rig file whose `targets` are used).
pub fn load_targets(path: impl AsRef<Path>) -> Result<Vec<CameraModel>> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(list) = serde_json::from_str::<Vec<CameraModel>>(&text) {
        list.iter().try_for_each(CameraModel::validate)?;
        return Ok(list);
    }
    let rig: CameraRig = serde_json::from_str(&text).map_err(|e| Error::Format(format!("target file: {e}")))?;
    Ok(rig.targets)
}

/// Per-pixel horizontal correspondence magnitudes for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub values: Tensor,
    pub view: View,
    pub valid: Vec<bool>,
}

impl DisparityMap {
    /// Validity from the values: `d >= DISPARITY_EPS`.
    pub fn new(values: Tensor, view: View) -> Self {
        let valid = values.data().iter().map(|&d| d >= DISPARITY_EPS).collect();
        Self { values, view, valid }
    }

    pub fn with_mask(values: Tensor, view: View, valid: Vec<bool>) -> Self {
        Self { values, view, valid }
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }
}

/// `Z = fx * b / d` on valid pixels; invalid pixels get depth 0.
pub fn disparity_to_depth(d: &DisparityMap, rig: &CameraRig) -> (Tensor, Vec<bool>) {
    let fb = rig.focal_baseline();
    let mut valid = d.valid.clone();
    let depth = Tensor::from_vec(
        1,
        d.height(),
        d.width(),
        d.values
            .data()
            .iter()
            .zip(valid.iter_mut())
            .map(|(&v, ok)| {
                if *ok && v >= DISPARITY_EPS {
                    fb / v
                } else {
                    *ok = false;
                    0.0
                }
            })
            .collect(),
    )
    .unwrap();
    (depth, valid)
}

pub fn depth_to_disparity(depth: &Tensor, valid: &[bool], rig: &CameraRig, view: View) -> DisparityMap {
    let fb = rig.focal_baseline();
    let vals = depth
        .data()
        .iter()
        .zip(valid)
        .map(|(&z, &ok)| if ok && z > 0.0 { fb / z } else { 0.0 })
        .collect();
    let values = Tensor::from_vec(1, depth.height(), depth.width(), vals).unwrap();
    DisparityMap::with_mask(values, view, valid.to_vec())
}

/// World points for every pixel, raster order. Zero-depth pixels map to the
/// camera center and are flagged invalid.
pub fn unproject(depth: &Tensor, cam: &CameraModel) -> (Vec<[f64; 3]>, Vec<bool>) {
    let mut pts = Vec::with_capacity(depth.len());
    let mut valid = Vec::with_capacity(depth.len());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let z = depth.at(0, y, x);
            let q = [(x as f64 - cam.cx) / cam.fx * z, (y as f64 - cam.cy) / cam.fy * z, z];
            pts.push(cam.cam_to_world(q));
            valid.push(z > 0.0);
        }
    }
    (pts, valid)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub behind: bool,
}

pub fn project_point(p: [f64; 3], cam: &CameraModel) -> Projection {
    let q = cam.world_to_cam(p);
    if q[2] <= 0.0 {
        return Projection { u: f64::NAN, v: f64::NAN, depth: q[2], behind: true };
    }
    Projection { u: cam.fx * q[0] / q[2] + cam.cx, v: cam.fy * q[1] / q[2] + cam.cy, depth: q[2], behind: false }
}

pub fn project(points: &[[f64; 3]], cam: &CameraModel) -> Vec<Projection> {
    points.iter().map(|&p| project_point(p, cam)).collect()
}

/// Differentiable warp of `src` (opposite view) into the coordinates of
/// `dest`, using `disp` (`(1, H, W)` magnitudes belonging to `dest`).
pub fn warp(tape: &Tape, src: Var, disp: Var, dest: View) -> Result<Var> {
    let [_, h, w] = tape.shape(src);
    let ds = tape.shape(disp);
    if ds != [1, h, w] {
        return Err(Error::Shape(format!("warp: disparity {ds:?} vs source {:?}", tape.shape(src))));
    }
    let base_x = tape.constant(Tensor::from_fn(1, h, w, |_, _, x| x as f64));
    let ys = tape.constant(Tensor::from_fn(1, h, w, |_, y, _| y as f64));
    let offset = tape.scale(disp, dest.displacement_sign());
    let xs = tape.add(base_x, offset)?;
    tape.bilinear_sample(src, xs, ys)
}

/// Disparity at `1/factor` resolution: average-pool then divide by `factor`.
pub fn rescale_disparity(tape: &Tape, disp: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(disp);
    }
    let p = tape.avg_pool(disp, factor)?;
    Ok(tape.scale(p, 1.0 / factor as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig() -> CameraRig {
        let mut r = CameraRig::symmetric(1000.0, 64, 48, 0.1);
        r.left.cx = 31.5;
        r.right.cx = 31.5;
        r
    }

    #[test]
    fn depth_from_disparity() {
        let r = rig();
        let d = DisparityMap::new(Tensor::full(1, 2, 2, 50.0), View::L);
        let (z, valid) = disparity_to_depth(&d, &r);
        assert!(z.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(valid.iter().all(|&v| v));
        let d2 = DisparityMap::new(Tensor::full(1, 2, 2, 25.0), View::L);
        assert!(disparity_to_depth(&d2, &r).0.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn tiny_disparity_is_invalid_not_inf() {
        let r = rig();
        let d = DisparityMap::new(Tensor::from_vec(1, 1, 2, vec![5e-5, 10.0]).unwrap(), View::L);
        let (z, valid) = disparity_to_depth(&d, &r);
        assert_eq!(valid, vec![false, true]);
        assert_eq!(z.data()[0], 0.0);
        assert!(z.is_finite());
    }

    #[test]
    fn disparity_depth_round_trip() {
        let r = rig();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = DisparityMap::new(Tensor::from_fn(1, 8, 8, |_, _, _| rng.gen_range(0.5..120.0)), View::R);
        let (z, valid) = disparity_to_depth(&d, &r);
        let back = depth_to_disparity(&z, &valid, &r, View::R);
        for (a, b) in back.values.data().iter().zip(d.values.data()) {
            assert!(((a - b) / b).abs() < 1e-6);
        }
    }

    #[test]
    fn principal_ray_unprojects_on_axis() {
        let cam = CameraModel::new(100.0, 100.0, 1.0, 1.0, 3, 3, [1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]).unwrap();
        let depth = Tensor::full(1, 3, 3, 2.0);
        let (pts, _) = unproject(&depth, &cam);
        assert_eq!(pts[4], [0.0, 0.0, 2.0]);
        let p = project_point([0.0, 0.0, 2.0], &cam);
        assert_eq!((p.u, p.v, p.depth, p.behind), (1.0, 1.0, 2.0, false));
        assert!(project_point([0.0, 0.0, -1.0], &cam).behind);
    }

    #[test]
    fn translation_shifts_points() {
        let a = CameraModel::translated(100.0, 100.0, 1.0, 1.0, 3, 3, [0.0, 0.0, 0.0]);
        let b = CameraModel::translated(100.0, 100.0, 1.0, 1.0, 3, 3, [0.5, -0.25, 1.0]);
        let depth = Tensor::full(1, 3, 3, 2.0);
        let (pa, _) = unproject(&depth, &a);
        let (pb, _) = unproject(&depth, &b);
        for (x, y) in pa.iter().zip(&pb) {
            assert!((y[0] - x[0] - 0.5).abs() < 1e-12);
            assert!((y[1] - x[1] + 0.25).abs() < 1e-12);
            assert!((y[2] - x[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn project_unproject_round_trip() {
        // Rotated camera: 30 degrees about Y plus a translation.
        let (s, c) = (0.5f64, 0.75f64.sqrt());
        let cam = CameraModel::new(500.0, 480.0, 31.0, 23.0, 64, 48, [c, 0., s, 0.2, 0., 1., 0., -0.1, -s, 0., c, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let depth = Tensor::from_fn(1, 48, 64, |_, _, _| rng.gen_range(0.5..5.0));
        let (pts, _) = unproject(&depth, &cam);
        for (i, p) in pts.iter().enumerate() {
            let pr = project_point(*p, &cam);
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            assert!((pr.u - x).abs() < 1e-6 && (pr.v - y).abs() < 1e-6);
            assert!((pr.depth - depth.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn rig_validation() {
        let mut r = rig();
        assert!(r.validate().is_ok());
        r.right.fy = 999.0;
        assert!(r.validate().is_err());
        let mut r = rig();
        r.baseline = 0.0;
        assert!(r.validate().is_err());
        let mut r = rig();
        r.left.world_to_camera[0] = 2.0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn rig_json_round_trip() {
        let r = rig();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cams.json");
        r.save(&p).unwrap();
        assert_eq!(CameraRig::load(&p).unwrap(), r);
        assert_eq!(load_targets(&p).unwrap(), r.targets);
    }

    #[test]
    fn zero_disparity_warp_is_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = Tensor::from_fn(3, 5, 7, |_, _, _| rng.gen_range(-1.0..1.0));
        let s = tape.constant(src.clone());
        let d = tape.constant(Tensor::zeros(1, 5, 7));
        for v in [View::L, View::R] {
            assert_eq!(*tape.value(warp(&tape, s, d, v).unwrap()), src);
        }
    }

    #[test]
    fn unit_disparity_on_ramp() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_fn(1, 1, 6, |_, _, x| x as f64));
        let d = tape.constant(Tensor::full(1, 1, 6, 1.0));
        let to_left = tape.value(warp(&tape, s, d, View::L).unwrap());
        assert_eq!(to_left.data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let to_right = tape.value(warp(&tape, s, d, View::R).unwrap());
        assert_eq!(to_right.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0]);
    }

    #[test]
    fn warp_rejects_mismatched_disparity() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(2, 4, 4));
        let d = tape.constant(Tensor::zeros(1, 2, 2));
        assert!(warp(&tape, s, d, View::L).is_err());
    }

    #[test]
    fn warp_fd_gradient() {
        use crate::autograd::{finite_difference, max_rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = Tensor::from_fn(2, 4, 8, |_, _, _| rng.gen_range(-1.0..1.0));
        let disp = Tensor::from_fn(1, 4, 8, |_, _, x| {
            // keep sample positions inside and off integer kinks
            let d: f64 = rng.gen_range(0.1..0.9) + rng.gen_range(0..2) as f64;
            if x < 3 { -d } else { d }
        });
        let f = |s: &Tensor, d: &Tensor| {
            let tape = Tape::new();
            let sv = tape.leaf(s.clone());
            let dv = tape.leaf(d.clone());
            let o = warp(&tape, sv, dv, View::L).unwrap();
            let o = tape.square(o);
            let l = tape.sum(o);
            let v = tape.value(l).data()[0];
            let g = tape.backward(l).unwrap();
            (v, g.wrt(sv).unwrap().clone(), g.wrt(dv).unwrap().clone())
        };
        let (_, gs, gd) = f(&src, &disp);
        let fs = finite_difference(&src, 1e-3, |s| f(s, &disp).0);
        let fdd = finite_difference(&disp, 1e-3, |d| f(&src, d).0);
        assert!(max_rel_err(&gs, &fs, 1e-6) < 1e-4);
        assert!(max_rel_err(&gd, &fdd, 1e-6) < 1e-4);
    }

    #[test]
    fn plane_disparity_reproduces_integer_shift() {
        // A fronto-parallel plane at Z = fx b / 4 shifts texture by exactly 4 px.
        let r = CameraRig::symmetric(80.0, 32, 8, 0.2);
        let z = r.focal_baseline() / 4.0;
        let tex = |wx: f64| ((wx * 37.0).sin() * 1000.0).fract();
        let render = |cam: &CameraModel| {
            Tensor::from_fn(1, 8, 32, |_, y, x| {
                let d = cam.ray_dir(x as f64, y as f64);
                let o = cam.center();
                tex(o[0] + d[0] * z)
            })
        };
        let left = render(&r.left);
        let right = render(&r.right);
        for y in 0..8 {
            for x in 4..32 {
                assert!((left.at(0, y, x) - right.at(0, y, x - 4)).abs() < 1e-9);
            }
        }
    }
}
