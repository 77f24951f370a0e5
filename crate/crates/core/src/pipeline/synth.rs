//! Synthetic stereo sequences of textured fronto-parallel planes, with exact
//! disparity, masks and novel-view ground truth.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraRig, DisparityMap, View};
use crate::tensor::Tensor;

const WAVES: usize = 5;

/// Sum-of-sinusoids color texture in plane coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    /// Per wave: frequency `(fu, fv)` in cycles per world unit, phase, per-channel amplitude.
    pub waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    pub fn random(rng: &mut ChaCha8Rng, max_freq: f64) -> Self {
        let base = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
        let waves = (0..WAVES)
            .map(|_| {
                let f = [rng.gen_range(-max_freq..max_freq), rng.gen_range(-max_freq..max_freq)];
                let amp = std::array::from_fn(|_| rng.gen_range(0.0..0.12));
                (f, rng.gen_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        Texture { base, waves }
    }

    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let mut c = self.base;
        for (f, phase, amp) in &self.waves {
            let s = (std::f64::consts::TAU * (f[0] * u + f[1] * v) + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// Axis-aligned textured rectangle at constant depth, translating each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub depth: f64,
    /// World `(x, y)` of the rectangle center at frame 0.
    pub center: [f64; 2],
    /// Half extents; infinite for a backdrop.
    pub half_size: [f64; 2],
    /// World `(x, y)` displacement per frame.
    pub velocity: [f64; 2],
    pub texture: Texture,
}

impl PlaneSpec {
    fn hit(&self, x: f64, y: f64, frame: usize) -> Option<[f64; 2]> {
        let cx = self.center[0] + self.velocity[0] * frame as f64;
        let cy = self.center[1] + self.velocity[1] * frame as f64;
        let (u, v) = (x - cx, y - cy);
        (u.abs() <= self.half_size[0] && v.abs() <= self.half_size[1]).then_some([u, v])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub baseline: f64,
    pub frames: usize,
    pub planes: Vec<PlaneSpec>,
    /// Novel-view camera centers; identity orientation.
    pub targets: Vec<[f64; 3]>,
}

impl SceneSpec {
    /// Backdrop plus two or three moving foreground cards.
    pub fn random(seed: u64, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (width, height, fx, baseline) = (64, 64, 80.0, 0.25);
        let mut planes = vec![PlaneSpec {
            depth: rng.gen_range(2.8..3.2),
            center: [0.0, 0.0],
            half_size: [f64::INFINITY; 2],
            velocity: [rng.gen_range(-0.01..0.01), 0.0],
            texture: Texture::random(&mut rng, 1.5),
        }];
        for _ in 0..rng.gen_range(2..4) {
            let depth = rng.gen_range(1.5..2.5);
            planes.push(PlaneSpec {
                depth,
                center: [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)],
                half_size: [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)],
                velocity: [rng.gen_range(-0.03..0.03), rng.gen_range(-0.02..0.02)],
                texture: Texture::random(&mut rng, 2.0),
            });
        }
        SceneSpec { width, height, fx, baseline, frames, planes, targets: vec![[0.0, 0.0, 0.0]] }
    }

    pub fn rig(&self) -> CameraRig {
        let mut rig = CameraRig::symmetric(self.fx, self.width, self.height, self.baseline);
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        rig.targets = self.targets.iter().map(|&c| CameraModel::translated(self.fx, self.fx, cx, cy, self.width, self.height, c)).collect();
        rig
    }

    /// Color and depth seen through every pixel of `cam` at `frame`; depth 0 where nothing is hit.
    pub fn render_view(&self, cam: &CameraModel, frame: usize) -> (Tensor, Tensor) {
        let mut img = Tensor::zeros(3, cam.height, cam.width);
        let mut depth = Tensor::zeros(1, cam.height, cam.width);
        let o = cam.center();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let dir = cam.ray_dir(x as f64, y as f64);
                let mut best: Option<(f64, [f64; 3])> = None;
                for p in &self.planes {
                    let t = (p.depth - o[2]) / dir[2];
                    if t <= 0.0 || best.is_some_and(|(z, _)| z <= p.depth) {
                        continue;
                    }
                    if let Some([u, v]) = p.hit(o[0] + t * dir[0], o[1] + t * dir[1], frame) {
                        best = Some((p.depth, p.texture.sample(u, v)));
                    }
                }
                if let Some((z, c)) = best {
                    depth.set(0, y, x, cam.world_to_cam([o[0] + z * dir[0], o[1] + z * dir[1], z])[2]);
                    for k in 0..3 {
                        img.set(k, y, x, c[k]);
                    }
                }
            }
        }
        (img, depth)
    }
}

/// A rendered sequence held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub rig: CameraRig,
    pub left: Vec<Tensor>,
    pub right: Vec<Tensor>,
    /// Per frame, one image per target camera.
    pub targets: Vec<Vec<Tensor>>,
    pub disparity: Vec<[DisparityMap; 2]>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }
}

fn exact_disparity(depth: &Tensor, fb: f64, view: View) -> DisparityMap {
    let valid: Vec<bool> = depth.data().iter().map(|&z| z > 0.0).collect();
    DisparityMap::with_mask(depth.map(|z| if z > 0.0 { fb / z } else { 0.0 }), view, valid)
}

/// Renders every frame of `scene`.
pub fn make_synthetic(scene: &SceneSpec) -> Sequence {
    let rig = scene.rig();
    let fb = rig.focal_baseline();
    let mut seq = Sequence { rig: rig.clone(), left: vec![], right: vec![], targets: vec![], disparity: vec![] };
    for t in 0..scene.frames {
        let (l, dl) = scene.render_view(&rig.left, t);
        let (r, dr) = scene.render_view(&rig.right, t);
        seq.left.push(l);
        seq.right.push(r);
        seq.targets.push(rig.targets.iter().map(|c| scene.render_view(c, t).0).collect());
        seq.disparity.push([exact_disparity(&dl, fb, View::L), exact_disparity(&dr, fb, View::R)]);
    }
    seq
}

pub fn tensor_to_png(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            let ch = if img.channels() == 3 { c } else { 0 };
            (img.at(ch, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Format(e.to_string()))
}

pub fn png_to_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let img = image::open(path.as_ref()).map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(3, h, w, |c, y, x| img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frames(dir: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    list_pngs(dir)?.iter().map(png_to_tensor).collect()
}

fn frame_name(t: usize) -> String {
    format!("{t:04}")
}

/// Writes `left/`, `right/`, `target{k}/` PNG frames, `disp_{left,right}/` GST1
/// disparities, `mask_{left,right}/` PNG masks and `cams.json`.
pub fn write_dataset(seq: &Sequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let mut subdirs = vec!["left".to_string(), "right".into(), "disp_left".into(), "disp_right".into(), "mask_left".into(), "mask_right".into()];
    subdirs.extend((0..seq.rig.targets.len()).map(|k| format!("target{k}")));
    for s in &subdirs {
        std::fs::create_dir_all(dir.join(s))?;
    }
    for t in 0..seq.len() {
        let n = frame_name(t);
        tensor_to_png(&seq.left[t], dir.join("left").join(format!("{n}.png")))?;
        tensor_to_png(&seq.right[t], dir.join("right").join(format!("{n}.png")))?;
        for (k, img) in seq.targets[t].iter().enumerate() {
            tensor_to_png(img, dir.join(format!("target{k}")).join(format!("{n}.png")))?;
        }
        for (d, side) in seq.disparity[t].iter().zip(["left", "right"]) {
            d.values.write_gst1(dir.join(format!("disp_{side}")).join(format!("{n}.gst")))?;
            let mask = Tensor::from_vec(1, d.height(), d.width(), d.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?;
            tensor_to_png(&mask, dir.join(format!("mask_{side}")).join(format!("{n}.png")))?;
        }
    }
    seq.rig.save(dir.join("cams.json"))
}

/// Reads a directory written by [`write_dataset`]; frames come back 8-bit quantized.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Sequence> {
    let dir = dir.as_ref();
    let rig = CameraRig::load(dir.join("cams.json"))?;
    let left = load_frames(dir.join("left"))?;
    let right = load_frames(dir.join("right"))?;
    if left.len() != right.len() {
        return Err(Error::InvalidArgument(format!("{} left vs {} right frames", left.len(), right.len())));
    }
    let per_target: Vec<Vec<Tensor>> = (0..rig.targets.len()).map(|k| load_frames(dir.join(format!("target{k}")))).collect::<Result<_>>()?;
    let mut targets = Vec::new();
    let mut disparity = Vec::new();
    for t in 0..left.len() {
        targets.push(per_target.iter().map(|v| v.get(t).cloned().ok_or_else(|| Error::InvalidArgument(format!("target frame {t} missing")))).collect::<Result<_>>()?);
        let n = frame_name(t);
        let load = |side: &str, view| -> Result<DisparityMap> {
            let values = Tensor::read_gst1(dir.join(format!("disp_{side}")).join(format!("{n}.gst")))?;
            let mask = png_to_tensor(dir.join(format!("mask_{side}")).join(format!("{n}.png")))?;
            Ok(DisparityMap::with_mask(values, view, mask.channel(0).data().iter().map(|&m| m > 0.5).collect()))
        };
        disparity.push([load("left", View::L)?, load("right", View::R)?]);
    }
    Ok(Sequence { rig, left, right, targets, disparity })
}
