//! Differentiable CPU splatting of a Gaussian cloud into a camera, with a
//! brute-force compositing oracle that shares the per-fragment arithmetic.

use std::path::Path;

use rayon::prelude::*;

use crate::autograd::{CustomOp, Tape, Var};
use crate::detmath;
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::geometry::CameraModel;
use crate::tensor::Tensor;

pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Screen-space low-pass added to both diagonal entries of every 2D covariance.
pub const DILATION: f64 = 0.3;
pub const NEAR_PLANE: f64 = 0.01;
pub const TILE: usize = 16;

type Mat3 = [[f64; 3]; 3];
type Mat23 = [[f64; 3]; 2];

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplatFragment {
    pub mean: [f64; 2],
    /// Symmetric 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`, dilation included.
    pub cov: [f64; 3],
    /// Inverse of `cov` in the same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub index: usize,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` of the 3-sigma footprint, clipped to the image.
    pub bbox: [usize; 4],
}

impl SplatFragment {
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox[0] && x <= self.bbox[1] && y >= self.bbox[2] && y <= self.bbox[3]
    }

    fn power(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let dx = x as f64 - self.mean[0];
        let dy = y as f64 - self.mean[1];
        let [a, b, c] = self.conic;
        (-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy, dx, dy)
    }
}

/// Rotation matrix of `(w, x, y, z)`; exact for unit quaternions.
pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn mat_mul<const N: usize, const K: usize, const M: usize>(a: &[[f64; K]; N], b: &[[f64; M]; K]) -> [[f64; M]; N] {
    let mut out = [[0.0; M]; N];
    for i in 0..N {
        for j in 0..M {
            out[i][j] = (0..K).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose<const N: usize, const M: usize>(a: &[[f64; M]; N]) -> [[f64; N]; M] {
    let mut out = [[0.0; N]; M];
    for i in 0..N {
        for j in 0..M {
            out[j][i] = a[i][j];
        }
    }
    out
}

/// Intermediate quantities of the projection, shared by forward and backward.
struct Projected {
    t: [f64; 3],
    rot: Mat3,
    jac: Mat23,
    /// `W Σ Wᵀ`.
    view_cov: Mat3,
    fragment: SplatFragment,
}

fn project_full(cloud: &GaussianCloud, i: usize, cam: &CameraModel) -> Option<Projected> {
    let t = cam.world_to_cam(cloud.centers[i]);
    if t[2] <= NEAR_PLANE {
        return None;
    }
    let rot = quat_to_rotation(cloud.rotations[i]);
    let s = cloud.scales[i];
    let scaled: Mat3 = std::array::from_fn(|r| std::array::from_fn(|c| rot[r][c] * s[c] * s[c]));
    let cov3 = mat_mul(&scaled, &transpose(&rot));
    let w = cam.rotation();
    let view_cov = mat_mul(&mat_mul(&w, &cov3), &transpose(&w));
    let z = t[2];
    let jac: Mat23 = [
        [cam.fx / z, 0.0, -cam.fx * t[0] / (z * z)],
        [0.0, cam.fy / z, -cam.fy * t[1] / (z * z)],
    ];
    let cov2 = mat_mul(&mat_mul(&jac, &view_cov), &transpose(&jac));
    let (a, b, c) = (cov2[0][0] + DILATION, cov2[0][1], cov2[1][1] + DILATION);
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let mean = [cam.fx * t[0] / z + cam.cx, cam.fy * t[1] / z + cam.cy];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (3.0 * lambda_max.sqrt()).ceil();
    let x0 = (mean[0] - radius).ceil().max(0.0);
    let x1 = (mean[0] + radius).floor().min(cam.width as f64 - 1.0);
    let y0 = (mean[1] - radius).ceil().max(0.0);
    let y1 = (mean[1] + radius).floor().min(cam.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    let fragment = SplatFragment {
        mean,
        cov: [a, b, c],
        conic: [c / det, -b / det, a / det],
        depth: z,
        opacity: cloud.opacities[i],
        color: cloud.colors[i],
        index: i,
        bbox: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    };
    Some(Projected { t, rot, jac, view_cov, fragment })
}

/// EWA projection of Gaussian `i`; `None` when behind the camera or off-screen.
pub fn project_gaussian(cloud: &GaussianCloud, i: usize, cam: &CameraModel) -> Option<SplatFragment> {
    project_full(cloud, i, cam).map(|p| p.fragment)
}

/// Projects every Gaussian and sorts the survivors by `(depth, index)`.
pub fn sorted_fragments(cloud: &GaussianCloud, cam: &CameraModel) -> Vec<SplatFragment> {
    let mut frags: Vec<SplatFragment> = (0..cloud.len()).filter_map(|i| project_gaussian(cloud, i, cam)).collect();
    frags.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    frags
}

/// Composites the fragments listed in `order` at pixel `(x, y)`.
fn composite_pixel<'a>(frags: impl Iterator<Item = &'a SplatFragment>, x: usize, y: usize, bg: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut t = 1.0;
    for f in frags {
        if !f.covers(x, y) {
            continue;
        }
        let (power, _, _) = f.power(x, y);
        let alpha = (f.opacity * detmath::exp(power)).min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            continue;
        }
        for k in 0..3 {
            out[k] += alpha * t * f.color[k];
        }
        t *= 1.0 - alpha;
    }
    for k in 0..3 {
        out[k] += t * bg[k];
    }
    out
}

struct TileGrid {
    tiles_x: usize,
    tiles_y: usize,
    lists: Vec<Vec<usize>>,
}

fn bin_fragments(frags: &[SplatFragment], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (k, f) in frags.iter().enumerate() {
        for ty in f.bbox[2] / TILE..=f.bbox[3] / TILE {
            for tx in f.bbox[0] / TILE..=f.bbox[1] / TILE {
                lists[ty * tiles_x + tx].push(k);
            }
        }
    }
    TileGrid { tiles_x, tiles_y, lists }
}

fn tile_pixels(grid: &TileGrid, tile: usize, width: usize, height: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % grid.tiles_x, tile / grid.tiles_x);
    let xs = tx * TILE..((tx + 1) * TILE).min(width);
    let ys = ty * TILE..((ty + 1) * TILE).min(height);
    ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
}

/// Renders `cloud` into `cam` as a `(3, H, W)` image, tile-parallel.
pub fn render(cloud: &GaussianCloud, cam: &CameraModel, background: [f64; 3]) -> Tensor {
    let (w, h) = (cam.width, cam.height);
    let frags = sorted_fragments(cloud, cam);
    let grid = bin_fragments(&frags, w, h);
    let tiles: Vec<Vec<(usize, usize, [f64; 3])>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &grid.lists[tile];
            tile_pixels(&grid, tile, w, h)
                .map(|(x, y)| (x, y, composite_pixel(list.iter().map(|&k| &frags[k]), x, y, background)))
                .collect()
        })
        .collect();
    let mut img = Tensor::zeros(3, h, w);
    for (x, y, rgb) in tiles.into_iter().flatten() {
        for (k, v) in rgb.into_iter().enumerate() {
            img.set(k, y, x, v);
        }
    }
    img
}

/// All-pairs oracle: every pixel walks the full sorted fragment list.
pub fn render_naive(cloud: &GaussianCloud, cam: &CameraModel, background: [f64; 3]) -> Tensor {
    let frags = sorted_fragments(cloud, cam);
    let mut img = Tensor::zeros(3, cam.height, cam.width);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let rgb = composite_pixel(frags.iter(), x, y, background);
            for (k, v) in rgb.into_iter().enumerate() {
                img.set(k, y, x, v);
            }
        }
    }
    img
}

/// Per-Gaussian gradients of a scalar loss.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrads {
    pub centers: Vec<[f64; 3]>,
    pub scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub opacities: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl CloudGrads {
    fn zeros(n: usize) -> Self {
        CloudGrads {
            centers: vec![[0.0; 3]; n],
            scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            opacities: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }
}

/// Screen-space gradient of one fragment.
#[derive(Clone, Copy, Default)]
struct FragGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl FragGrad {
    fn add(&mut self, o: &FragGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Contribution {
    slot: usize,
    alpha: f64,
    gauss: f64,
    transmittance: f64,
    capped: bool,
    dx: f64,
    dy: f64,
}

fn backward_pixel(frags: &[&SplatFragment], x: usize, y: usize, bg: [f64; 3], g: [f64; 3], acc: &mut [FragGrad]) {
    let mut hits = Vec::new();
    let mut t = 1.0;
    for (slot, f) in frags.iter().enumerate() {
        if !f.covers(x, y) {
            continue;
        }
        let (power, dx, dy) = f.power(x, y);
        let gauss = detmath::exp(power);
        let raw = f.opacity * gauss;
        let alpha = raw.min(ALPHA_MAX);
        if alpha < ALPHA_MIN {
            continue;
        }
        hits.push(Contribution { slot, alpha, gauss, transmittance: t, capped: raw > ALPHA_MAX, dx, dy });
        t *= 1.0 - alpha;
    }
    let mut suffix = [t * bg[0], t * bg[1], t * bg[2]];
    for hit in hits.iter().rev() {
        let f = frags[hit.slot];
        let mut d_alpha = 0.0;
        let grad = &mut acc[hit.slot];
        for k in 0..3 {
            d_alpha += g[k] * (hit.transmittance * f.color[k] - suffix[k] / (1.0 - hit.alpha));
            grad.color[k] += g[k] * hit.alpha * hit.transmittance;
            suffix[k] += hit.alpha * hit.transmittance * f.color[k];
        }
        if hit.capped {
            continue;
        }
        grad.opacity += d_alpha * hit.gauss;
        let d_power = d_alpha * f.opacity * hit.gauss;
        let [a, b, c] = f.conic;
        grad.conic[0] += -0.5 * hit.dx * hit.dx * d_power;
        grad.conic[1] += -hit.dx * hit.dy * d_power;
        grad.conic[2] += -0.5 * hit.dy * hit.dy * d_power;
        grad.mean[0] += (a * hit.dx + b * hit.dy) * d_power;
        grad.mean[1] += (c * hit.dy + b * hit.dx) * d_power;
    }
}

fn quat_grad(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let d = |m: [[f64; 3]; 3]| -> f64 { (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| g[i][j] * m[i][j]).sum() };
    [
        d([[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]]),
        d([[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]]),
        d([[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]]),
        d([[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]]),
    ]
}

/// Chains a screen-space gradient back to the 3D attributes of one Gaussian.
fn chain_to_3d(p: &Projected, fg: &FragGrad, cloud: &GaussianCloud, cam: &CameraModel, out: &mut CloudGrads) {
    let i = p.fragment.index;
    out.colors[i] = fg.color;
    out.opacities[i] = fg.opacity;

    let [qa, qb, qc] = p.fragment.conic;
    let q = [[qa, qb], [qb, qc]];
    let g_q = [[fg.conic[0], 0.5 * fg.conic[1]], [0.5 * fg.conic[1], fg.conic[2]]];
    let qgq = mat_mul(&mat_mul(&q, &g_q), &q);
    let g_cov2: [[f64; 2]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| -qgq[r][c]));

    let g_view = mat_mul(&mat_mul(&transpose(&p.jac), &g_cov2), &p.jac);
    let gj = mat_mul(&mat_mul(&g_cov2, &p.jac), &p.view_cov);
    let g_jac: Mat23 = std::array::from_fn(|r| std::array::from_fn(|c| 2.0 * gj[r][c]));

    let w = cam.rotation();
    let g_cov3 = mat_mul(&mat_mul(&transpose(&w), &g_view), &w);
    let s = cloud.scales[i];
    let g_r = mat_mul(&g_cov3, &p.rot);
    let g_rot: Mat3 = std::array::from_fn(|r| std::array::from_fn(|c| 2.0 * g_r[r][c] * s[c] * s[c]));
    let g_diag = mat_mul(&transpose(&p.rot), &g_r);
    out.scales[i] = std::array::from_fn(|k| 2.0 * s[k] * g_diag[k][k]);
    out.rotations[i] = quat_grad(cloud.rotations[i], &g_rot);

    let [tx, ty, z] = p.t;
    let (fx, fy) = (cam.fx, cam.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut dt = [0.0; 3];
    dt[0] += g_jac[0][2] * (-fx / z2) + fg.mean[0] * fx / z;
    dt[1] += g_jac[1][2] * (-fy / z2) + fg.mean[1] * fy / z;
    dt[2] += g_jac[0][0] * (-fx / z2)
        + g_jac[0][2] * (2.0 * fx * tx / z3)
        + g_jac[1][1] * (-fy / z2)
        + g_jac[1][2] * (2.0 * fy * ty / z3)
        - fg.mean[0] * fx * tx / z2
        - fg.mean[1] * fy * ty / z2;
    out.centers[i] = std::array::from_fn(|k| (0..3).map(|r| w[r][k] * dt[r]).sum());
}

/// Analytic gradients of `<grad_image, render(cloud)>` with respect to every attribute.
pub fn render_backward(cloud: &GaussianCloud, cam: &CameraModel, background: [f64; 3], grad_image: &Tensor) -> Result<CloudGrads> {
    let (w, h) = (cam.width, cam.height);
    grad_image.expect_shape([3, h, w], "render gradient")?;
    let mut projected: Vec<Projected> = (0..cloud.len()).filter_map(|i| project_full(cloud, i, cam)).collect();
    projected.sort_by(|a, b| a.fragment.depth.total_cmp(&b.fragment.depth).then(a.fragment.index.cmp(&b.fragment.index)));
    let frags: Vec<SplatFragment> = projected.iter().map(|p| p.fragment).collect();
    let grid = bin_fragments(&frags, w, h);
    let partials: Vec<Vec<FragGrad>> = (0..grid.tiles_x * grid.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list: Vec<&SplatFragment> = grid.lists[tile].iter().map(|&k| &frags[k]).collect();
            let mut acc = vec![FragGrad::default(); list.len()];
            for (x, y) in tile_pixels(&grid, tile, w, h) {
                let g = [grad_image.at(0, y, x), grad_image.at(1, y, x), grad_image.at(2, y, x)];
                if g != [0.0; 3] {
                    backward_pixel(&list, x, y, background, g, &mut acc);
                }
            }
            acc
        })
        .collect();
    let mut screen = vec![FragGrad::default(); frags.len()];
    for (tile, acc) in partials.iter().enumerate() {
        for (slot, &k) in grid.lists[tile].iter().enumerate() {
            screen[k].add(&acc[slot]);
        }
    }
    let mut out = CloudGrads::zeros(cloud.len());
    for (p, fg) in projected.iter().zip(&screen) {
        chain_to_3d(p, fg, cloud, cam, &mut out);
    }
    Ok(out)
}

/// Central-difference gradients for cross-validating [`render_backward`].
pub fn render_backward_fd(cloud: &GaussianCloud, cam: &CameraModel, background: [f64; 3], grad_image: &Tensor, step: f64) -> CloudGrads {
    let objective = |c: &GaussianCloud| -> f64 {
        render(c, cam, background).data().iter().zip(grad_image.data()).map(|(a, b)| a * b).sum()
    };
    let probe = |edit: &dyn Fn(&mut GaussianCloud, f64)| -> f64 {
        let mut plus = cloud.clone();
        edit(&mut plus, step);
        let mut minus = cloud.clone();
        edit(&mut minus, -step);
        (objective(&plus) - objective(&minus)) / (2.0 * step)
    };
    let mut out = CloudGrads::zeros(cloud.len());
    for i in 0..cloud.len() {
        for k in 0..3 {
            out.centers[i][k] = probe(&|c, e| c.centers[i][k] += e);
            out.scales[i][k] = probe(&|c, e| c.scales[i][k] += e);
            out.colors[i][k] = probe(&|c, e| c.colors[i][k] += e);
        }
        for k in 0..4 {
            out.rotations[i][k] = probe(&|c, e| c.rotations[i][k] += e);
        }
        out.opacities[i] = probe(&|c, e| c.opacities[i] += e);
    }
    out
}

struct RenderOp {
    cam: CameraModel,
    background: [f64; 3],
}

fn attrs_to_tensor<const C: usize>(rows: &[[f64; C]]) -> Tensor {
    Tensor::from_fn(C, 1, rows.len(), |c, _, i| rows[i][c])
}

impl CustomOp for RenderOp {
    fn name(&self) -> &'static str {
        "render"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let cloud = GaussianCloud::from_tensors(inputs[0], inputs[1], inputs[2], inputs[3], inputs[4])
            .expect("render inputs validated at construction");
        let g = render_backward(&cloud, &self.cam, self.background, grad).expect("render gradient shape matches output");
        let opac: Vec<[f64; 1]> = g.opacities.iter().map(|&o| [o]).collect();
        vec![
            Some(attrs_to_tensor(&g.centers)),
            Some(attrs_to_tensor(&g.scales)),
            Some(attrs_to_tensor(&g.rotations)),
            Some(attrs_to_tensor(&opac)),
            Some(attrs_to_tensor(&g.colors)),
        ]
    }
}

/// Tape-level rendering of `(C, 1, N)` attribute variables
/// `[centers, scales, rotations, opacities, colors]`.
pub fn render_var(tape: &Tape, attrs: [Var; 5], cam: &CameraModel, background: [f64; 3]) -> Result<Var> {
    let [c, s, r, o, col] = attrs.map(|v| tape.value(v));
    let cloud = GaussianCloud::from_tensors(&c, &s, &r, &o, &col)?;
    let img = render(&cloud, cam, background);
    Ok(tape.custom(&attrs, img, Box::new(RenderOp { cam: cam.clone(), background })))
}

fn to_rgb8(img: &Tensor) -> Result<image::RgbImage> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", img.shape())));
    }
    let (h, w) = (img.height(), img.width());
    Ok(image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| (img.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8))
    }))
}

/// Binary 8-bit PPM (P6).
pub fn write_ppm(img: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    let rgb = to_rgb8(img)?;
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(rgb.as_raw(), rgb.width(), rgb.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::max_rel_err;
    use crate::geometry::View;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    fn cam(size: usize, fx: f64) -> CameraModel {
        let c = (size as f64 - 1.0) / 2.0;
        CameraModel::translated(fx, fx, c, c, size, size, [0.0; 3])
    }

    fn single(center: [f64; 3], scale: f64, opacity: f64, color: [f64; 3]) -> GaussianCloud {
        let mut cloud = GaussianCloud::default();
        cloud.push(center, [scale; 3], IDENTITY, opacity, color, (View::L, 0));
        cloud
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> GaussianCloud {
        let mut cloud = GaussianCloud::default();
        for i in 0..n {
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q.iter_mut().for_each(|v| *v /= norm);
            cloud.push(
                [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(1.0..3.0)],
                std::array::from_fn(|_| rng.gen_range(0.02..0.2)),
                q,
                rng.gen_range(0.05..1.0),
                std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
                (View::L, i),
            );
        }
        cloud
    }

    #[test]
    fn principal_axis_footprint_closed_form() {
        let cam = cam(32, 40.0);
        let (s, z) = (0.07, 2.5);
        let frag = project_gaussian(&single([0.0, 0.0, z], s, 0.5, [0.5; 3]), 0, &cam).unwrap();
        let expected = (cam.fx * s / z).powi(2) + DILATION;
        assert!((frag.cov[0] - expected).abs() < 1e-6);
        assert!((frag.cov[2] - expected).abs() < 1e-6);
        assert!(frag.cov[1].abs() < 1e-12);
        assert_eq!(frag.mean, [cam.cx, cam.cy]);
    }

    #[test]
    fn culling_and_quaternion_sign() {
        let cam = cam(16, 20.0);
        assert!(project_gaussian(&single([0.0, 0.0, -1.0], 0.1, 0.5, [0.5; 3]), 0, &cam).is_none());
        assert!(project_gaussian(&single([50.0, 0.0, 1.0], 0.01, 0.5, [0.5; 3]), 0, &cam).is_none());
        let mut cloud = single([0.1, -0.1, 2.0], 0.1, 0.5, [0.5; 3]);
        cloud.scales[0] = [0.1, 0.05, 0.2];
        cloud.rotations[0] = [0.8, 0.2, -0.4, 0.4];
        let a = project_gaussian(&cloud, 0, &cam).unwrap();
        cloud.rotations[0] = cloud.rotations[0].map(|v| -v);
        let b = project_gaussian(&cloud, 0, &cam).unwrap();
        assert_eq!(a.cov, b.cov);
    }

    #[test]
    fn empty_and_opaque_scenes() {
        let cam = cam(16, 20.0);
        let bg = [0.2, 0.4, 0.6];
        let img = render(&GaussianCloud::default(), &cam, bg);
        for c in 0..3 {
            assert!(img.channel(c).data().iter().all(|&v| v == bg[c]));
        }
        let color = [1.0, 0.5, 0.0];
        let mut cloud = single([0.0, 0.0, 2.0], 0.5, 1.0, color);
        cloud.centers[0] = cam.cam_to_world([(8.0 - cam.cx) * 2.0 / cam.fx, (8.0 - cam.cy) * 2.0 / cam.fy, 2.0]);
        let img = render(&cloud, &cam, bg);
        for c in 0..3 {
            assert!((img.at(c, 8, 8) - (0.99 * color[c] + 0.01 * bg[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn tiled_matches_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..100 {
            let size = [16, 24, 40][trial % 3];
            let cam = cam(size, size as f64 * 1.2);
            let n = rng.gen_range(1..40);
            let cloud = random_cloud(&mut rng, n);
            let bg = [rng.gen(), rng.gen(), rng.gen()];
            let tiled = render(&cloud, &cam, bg);
            let naive = render_naive(&cloud, &cam, bg);
            assert_eq!(tiled.data(), naive.data(), "trial {trial}");
            assert!(tiled.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn permutation_with_distinct_depths_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cam = cam(24, 30.0);
        let cloud = random_cloud(&mut rng, 12);
        let mut order: Vec<usize> = (0..12).rev().collect();
        order.swap(2, 7);
        let mut shuffled = GaussianCloud::default();
        for &i in &order {
            shuffled.push(cloud.centers[i], cloud.scales[i], cloud.rotations[i], cloud.opacities[i], cloud.colors[i], cloud.sources[i]);
        }
        assert_eq!(render(&cloud, &cam, [0.0; 3]).data(), render(&shuffled, &cam, [0.0; 3]).data());
    }

    #[test]
    fn zero_gradient_and_isolated_color_weight() {
        let cam = cam(16, 20.0);
        let bg = [0.3; 3];
        let cloud = single([0.05, 0.0, 2.0], 0.3, 0.6, [0.2, 0.7, 0.4]);
        let g = render_backward(&cloud, &cam, bg, &Tensor::zeros(3, 16, 16)).unwrap();
        assert_eq!(g, CloudGrads::zeros(1));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grad = Tensor::from_fn(3, 16, 16, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = render_backward(&cloud, &cam, bg, &grad).unwrap();
        let white = render(&GaussianCloud { colors: vec![[1.0; 3]], ..cloud.clone() }, &cam, [0.0; 3]);
        for c in 0..3 {
            let expected: f64 = white.channel(c).data().iter().zip(grad.channel(c).data()).map(|(a, b)| a * b).sum();
            assert!((g.colors[0][c] - expected).abs() < 1e-10);
        }
    }

    fn grads_tensor(g: &CloudGrads) -> Tensor {
        let mut v = Vec::new();
        for i in 0..g.opacities.len() {
            v.extend_from_slice(&g.centers[i]);
            v.extend_from_slice(&g.scales[i]);
            v.extend_from_slice(&g.rotations[i]);
            v.push(g.opacities[i]);
            v.extend_from_slice(&g.colors[i]);
        }
        let n = v.len();
        Tensor::from_vec(1, 1, n, v).unwrap()
    }

    #[test]
    fn three_gaussian_gradients_match_finite_differences() {
        let cam = CameraModel::translated(20.0, 22.0, 7.3, 8.1, 16, 16, [0.02, -0.03, 0.1]);
        let mut cloud = GaussianCloud::default();
        cloud.push([0.05, 0.02, 2.0], [1.1, 0.8, 0.5], [0.9, 0.1, -0.3, 0.2], 0.7, [0.9, 0.3, 0.2], (View::L, 0));
        cloud.push([-0.1, 0.08, 2.4], [0.9, 1.3, 0.7], [0.7, -0.2, 0.4, 0.5], 0.6, [0.1, 0.8, 0.4], (View::L, 1));
        cloud.push([0.12, -0.06, 2.9], [1.4, 1.0, 1.2], [0.6, 0.5, 0.3, -0.5], 0.5, [0.3, 0.2, 0.9], (View::R, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grad = Tensor::from_fn(3, 16, 16, |_, _, _| rng.gen_range(-1.0..1.0));
        let bg = [0.1, 0.2, 0.3];
        let analytic = render_backward(&cloud, &cam, bg, &grad).unwrap();
        let numeric = render_backward_fd(&cloud, &cam, bg, &grad, 1e-3);
        let err = max_rel_err(&grads_tensor(&analytic), &grads_tensor(&numeric), 1e-2);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn tape_op_routes_gradients() {
        let cam = cam(16, 20.0);
        let cloud = single([0.0, 0.0, 2.0], 0.4, 0.5, [0.6, 0.3, 0.1]);
        let tape = Tape::new();
        let vars = [
            tape.leaf(attrs_to_tensor(&cloud.centers)),
            tape.leaf(attrs_to_tensor(&cloud.scales)),
            tape.leaf(attrs_to_tensor(&cloud.rotations)),
            tape.leaf(Tensor::full(1, 1, 1, 0.5)),
            tape.leaf(attrs_to_tensor(&cloud.colors)),
        ];
        let img = render_var(&tape, vars, &cam, [0.0; 3]).unwrap();
        let loss = tape.sum(img);
        let grads = tape.backward(loss).unwrap();
        let direct = render_backward(&cloud, &cam, [0.0; 3], &Tensor::full(3, 16, 16, 1.0)).unwrap();
        assert_eq!(grads.wrt(vars[3]).unwrap().data(), &[direct.opacities[0]]);
        assert_eq!(grads.wrt(vars[0]).unwrap().at(2, 0, 0), direct.centers[0][2]);
    }

    #[test]
    fn ppm_roundtrip_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        write_ppm(&Tensor::full(3, 4, 5, 0.5), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(bytes.len() - 4 * 5 * 3, bytes.iter().position(|&b| b == 128).unwrap());
    }
}
