//! Image quality, rate accounting, Bjøntegaard-Delta rate and RD-curve output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Tape, Var};
use crate::bitstream::CodedStream;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * (m / (peak * peak)).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-position separable Gaussian filtering of one `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * x[y * w + x0 + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y0 + k) * ow + x0]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads valid-position values back over the window.
fn filter_adjoint(m: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            for k in 0..SSIM_WINDOW {
                rows[(y0 + k) * ow + x0] += g[k] * m[y0 * ow + x0];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x0 in 0..ow {
            for k in 0..SSIM_WINDOW {
                out[y * w + x0 + k] += g[k] * rows[y * ow + x0];
            }
        }
    }
    out
}

struct SsimPlane {
    value: f64,
    /// Per valid position: `dS/da = alpha + beta * b + gamma * a` before filtering.
    coeffs: Option<[Vec<f64>; 3]>,
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, with_grad: bool) -> SsimPlane {
    let g = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let aa = filter_valid(&prod(a, a), h, w, &g);
    let bb = filter_valid(&prod(b, b), h, w, &g);
    let ab = filter_valid(&prod(a, b), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    let mut coeffs = with_grad.then(|| [vec![0.0; n], vec![0.0; n], vec![0.0; n]]);
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = ma * ma + mb * mb + SSIM_C1;
        let b2 = va + vb + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if let Some([al, be, ga]) = coeffs.as_mut() {
            let beta = 2.0 * s / a2;
            let gamma = -2.0 * s / b2;
            be[i] = beta;
            ga[i] = gamma;
            al[i] = s * (2.0 * mb / a1 - 2.0 * ma / b1) - beta * mb - gamma * ma;
        }
    }
    SsimPlane { value: total / n as f64, coeffs }
}

fn check_ssim_input(a: &Tensor, b: &Tensor) -> Result<()> {
    same_shape(a, b, "ssim")?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {:?}", a.shape())));
    }
    Ok(())
}

fn plane(t: &Tensor, c: usize) -> &[f64] {
    let n = t.height() * t.width();
    &t.data()[c * n..(c + 1) * n]
}

/// Mean SSIM over valid 11x11 windows, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_ssim_input(a, b)?;
    let (h, w) = (a.height(), a.width());
    let sum: f64 = (0..a.channels()).map(|c| ssim_plane(plane(a, c), plane(b, c), h, w, false).value).sum();
    Ok(sum / a.channels() as f64)
}

/// Gradient of [`ssim`] with respect to its first argument.
fn ssim_grad_first(a: &Tensor, b: &Tensor) -> Tensor {
    let (c, h, w) = (a.channels(), a.height(), a.width());
    let g = gaussian_taps();
    let mut out = Vec::with_capacity(a.len());
    for ch in 0..c {
        let (pa, pb) = (plane(a, ch), plane(b, ch));
        let sp = ssim_plane(pa, pb, h, w, true);
        let [al, be, ga] = sp.coeffs.unwrap();
        let norm = 1.0 / (c * al.len()) as f64;
        let fa = filter_adjoint(&al, h, w, &g);
        let fb = filter_adjoint(&be, h, w, &g);
        let fg = filter_adjoint(&ga, h, w, &g);
        out.extend((0..h * w).map(|i| norm * (fa[i] + pb[i] * fb[i] + pa[i] * fg[i])));
    }
    Tensor::from_vec(c, h, w, out).unwrap()
}

struct SsimOp;

impl CustomOp for SsimOp {
    fn name(&self) -> &'static str {
        "ssim"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let g = grad.data()[0];
        let da = ssim_grad_first(inputs[0], inputs[1]).map(|v| v * g);
        let db = ssim_grad_first(inputs[1], inputs[0]).map(|v| v * g);
        vec![Some(da), Some(db)]
    }
}

/// Differentiable SSIM as a scalar tape variable.
pub fn ssim_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let (va, vb) = (tape.value(a), tape.value(b));
    let s = ssim(&va, &vb)?;
    Ok(tape.custom(&[a, b], Tensor::scalar(s), Box::new(SsimOp)))
}

/// Bits per pixel over the combined pixels of the stereo pair.
pub fn bits_per_pixel(bytes: usize, width: usize, height: usize) -> f64 {
    8.0 * bytes as f64 / (2.0 * width as f64 * height as f64)
}

/// Per-frame payload bpp and their mean.
pub fn bpp(stream: &CodedStream) -> (Vec<f64>, f64) {
    let (w, h) = (stream.header.width as usize, stream.header.height as usize);
    let per: Vec<f64> = stream.frames.iter().map(|f| bits_per_pixel(f.payload_bytes(), w, h)).collect();
    let mean = if per.is_empty() { 0.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    (per, mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityMetric {
    Psnr,
    Ssim,
}

impl QualityMetric {
    pub fn of(self, p: &RdPoint) -> f64 {
        match self {
            QualityMetric::Psnr => p.psnr,
            QualityMetric::Ssim => p.ssim,
        }
    }
}

/// Cubic of `log10(rate)` in the normalized quality `u = (q - center) / spread`.
struct LogRateFit {
    coeffs: [f64; 4],
    center: f64,
    spread: f64,
    q_min: f64,
    q_max: f64,
}

impl LogRateFit {
    fn new(points: &[RdPoint], metric: QualityMetric) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::InvalidArgument(format!("bd-rate needs at least 4 points per curve, got {}", points.len())));
        }
        let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.bpp, metric.of(p))).collect();
        if pts.iter().any(|&(r, q)| !(r > 0.0) || !q.is_finite()) {
            return Err(Error::InvalidArgument("bd-rate points need positive rate and finite quality".into()));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pts.windows(2).any(|w| !(w[1].1 > w[0].1) || !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidArgument("quality must increase strictly with rate".into()));
        }
        let q_min = pts[0].1;
        let q_max = pts[pts.len() - 1].1;
        let center = 0.5 * (q_min + q_max);
        let spread = 0.5 * (q_max - q_min);
        let a = DMatrix::from_fn(pts.len(), 4, |i, j| ((pts[i].1 - center) / spread).powi(j as i32));
        let y = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.0.log10()));
        let sol = a.svd(true, true).solve(&y, 1e-14).map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(LogRateFit { coeffs: [sol[0], sol[1], sol[2], sol[3]], center, spread, q_min, q_max })
    }

    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let prim = |q: f64| {
            let u = (q - self.center) / self.spread;
            self.coeffs.iter().enumerate().map(|(k, c)| c * u.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>() * self.spread
        };
        prim(hi) - prim(lo)
    }
}

/// Average rate change of `test` against `anchor` at equal quality, percent.
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint], metric: QualityMetric) -> Result<f64> {
    let fa = LogRateFit::new(anchor, metric)?;
    let ft = LogRateFit::new(test, metric)?;
    let lo = fa.q_min.max(ft.q_min);
    let hi = fa.q_max.min(ft.q_max);
    if !(hi > lo) {
        return Err(Error::NoOverlap);
    }
    let diff = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

pub const CSV_HEADER: &str = "label,bpp,psnr,ssim";

pub fn write_rd_csv(points: &[RdPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rd_csv(path: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// Rate-quality chart with a log-scaled rate axis, one polyline per label.
pub fn rd_svg(points: &[RdPoint], metric: QualityMetric) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - 2.0 * m, h - 2.0 * m);
    let axis = match metric {
        QualityMetric::Psnr => "PSNR (dB)",
        QualityMetric::Ssim => "SSIM",
    };
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp (log scale)</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{axis}</text>"#, h / 2.0, h / 2.0);
    let usable: Vec<&RdPoint> = points.iter().filter(|p| p.bpp > 0.0 && metric.of(p).is_finite()).collect();
    if !usable.is_empty() {
        let lr: Vec<f64> = usable.iter().map(|p| p.bpp.log10()).collect();
        let q: Vec<f64> = usable.iter().map(|p| metric.of(p)).collect();
        let span = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
        };
        let (x0, x1) = span(&lr);
        let (y0, y1) = span(&q);
        let px = |v: f64| m + (v - x0) / (x1 - x0) * (w - 2.0 * m);
        let py = |v: f64| h - m - (v - y0) / (y1 - y0) * (h - 2.0 * m);
        let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let mut labels: Vec<&str> = usable.iter().map(|p| p.label.as_str()).collect();
        labels.dedup();
        labels.sort_unstable();
        labels.dedup();
        for (k, label) in labels.iter().enumerate() {
            let mut curve: Vec<(f64, f64)> = usable.iter().zip(lr.iter().zip(&q)).filter(|(p, _)| p.label == *label).map(|(_, (&a, &b))| (a, b)).collect();
            curve.sort_by(|a, b| a.0.total_cmp(&b.0));
            let coords: Vec<String> = curve.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
            let color = palette[k % palette.len()];
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, coords.join(" "));
            let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{}</text>"#, w - m - 120.0, m + 18.0 * (k + 1) as f64, escape(label));
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes `<stem>.csv` and `<stem>.svg` (PSNR axis).
pub fn emit_rd(points: &[RdPoint], stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    write_rd_csv(points, stem.with_extension("csv"))?;
    std::fs::write(stem.with_extension("svg"), rd_svg(points, QualityMetric::Psnr))?;
    Ok(())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length samples of size >= 2".into()));
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = 0.5 * (i + j) as f64;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() - 1) as f64 / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - mean) * (y - mean)).sum();
    let va: f64 = ra.iter().map(|x| (x - mean).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mean).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric("spearman of a constant sample".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, max_rel_err};
    use crate::bitstream::tests::sample_stream;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_values() {
        let a = Tensor::full(3, 8, 8, 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = Tensor::full(3, 8, 8, 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros(3, 8, 7), 1.0).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let big = Tensor::from_fn(3, 256, 256, |_, _, _| rng.gen_range(0.0..1.0));
        let noise = Tensor::from_fn(3, 256, 256, |_, _, _| rng.gen_range(-0.5..0.5) / 255.0);
        let noisy = big.zip_map(&noise, |a, b| a + b).unwrap();
        assert!((psnr(&big, &noisy, 1.0).unwrap() - 58.9).abs() < 0.5);
    }

    #[test]
    fn ssim_fixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..3 * 24 * 20).map(|_| if rng.gen_bool(0.5) { rng.gen_range(0.0..0.4) } else { rng.gen_range(0.6..1.0) }).collect();
        let a = Tensor::from_vec(3, 24, 20, vals).unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &a.map(|v| 1.0 - v)).unwrap() < 0.5);
        assert_eq!(ssim(&a, &a.map(|v| v * 0.7)).unwrap(), ssim(&a.map(|v| v * 0.7), &a).unwrap());
        assert!(ssim(&Tensor::zeros(1, 10, 30), &Tensor::zeros(1, 10, 30)).is_err());

        let (m1, m2) = (0.3, 0.45);
        let s = ssim(&Tensor::full(1, 16, 16, m1), &Tensor::full(1, 16, 16, m2)).unwrap();
        let closed = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((s - closed).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = Tensor::from_fn(2, 13, 14, |_, _, _| rng.gen_range(0.0..1.0));
        let b0 = Tensor::from_fn(2, 13, 14, |_, _, _| rng.gen_range(0.0..1.0));
        let tape = Tape::new();
        let (a, b) = (tape.leaf(a0.clone()), tape.leaf(b0.clone()));
        let s = ssim_var(&tape, a, b).unwrap();
        let g = tape.backward(s).unwrap();
        let fa = finite_difference(&a0, 1e-3, |x| ssim(x, &b0).unwrap());
        let fb = finite_difference(&b0, 1e-3, |x| ssim(&a0, x).unwrap());
        assert!(max_rel_err(g.wrt(a).unwrap(), &fa, 1e-6) < 1e-4);
        assert!(max_rel_err(g.wrt(b).unwrap(), &fb, 1e-6) < 1e-4);
    }

    #[test]
    fn bpp_accounting() {
        assert_eq!(bits_per_pixel(65536, 512, 512), 1.0);
        let stream = sample_stream();
        let (per, mean) = bpp(&stream);
        assert_eq!(per.len(), stream.frames.len());
        assert!((mean - per.iter().sum::<f64>() / per.len() as f64).abs() < 1e-15);
    }

    fn curve(label: &str, rates: &[f64], quality: impl Fn(f64) -> f64) -> Vec<RdPoint> {
        rates.iter().map(|&r| RdPoint { label: label.into(), bpp: r, psnr: quality(r), ssim: 0.9 + 0.01 * r.ln() }).collect()
    }

    #[test]
    fn bd_rate_identities() {
        let rates = [0.05, 0.1, 0.2, 0.4, 0.8];
        let q = |r: f64| 30.0 + 4.0 * r.ln() - 0.2 * r.ln().powi(2);
        let a = curve("a", &rates, q);
        assert!(bd_rate(&a, &a, QualityMetric::Psnr).unwrap().abs() < 1e-9);
        let doubled = curve("b", &rates.map(|r| 2.0 * r), |r| q(r / 2.0));
        assert!((bd_rate(&a, &doubled, QualityMetric::Psnr).unwrap() - 100.0).abs() < 1e-9);
        assert!(bd_rate(&a[..3], &a, QualityMetric::Psnr).is_err());
        let far = curve("c", &rates, |r| q(r) + 100.0);
        assert!(matches!(bd_rate(&a, &far, QualityMetric::Psnr), Err(Error::NoOverlap)));
        let mut bent = a.clone();
        bent[2].psnr = bent[1].psnr - 1.0;
        assert!(bd_rate(&bent, &a, QualityMetric::Psnr).is_err());
    }

    /// Dense Hermite-interpolated integral of a known log-rate curve.
    fn hermite_integral(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let n = 10_000;
        let h = (hi - lo) / n as f64;
        (0..n)
            .map(|i| {
                let (x0, x1) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
                h * (f(x0) + f(x1)) / 2.0 + h * h * (df(x0) - df(x1)) / 12.0
            })
            .sum()
    }

    #[test]
    fn bd_rate_matches_dense_integration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut make = |label: &str| {
                let c: [f64; 4] = [rng.gen_range(-1.5..-0.5), rng.gen_range(0.05..0.15), rng.gen_range(0.0..0.004), rng.gen_range(0.0..1e-4)];
                let base = 30.0;
                let lr = move |q: f64| c[0] + c[1] * (q - base) + c[2] * (q - base).powi(2) + c[3] * (q - base).powi(3);
                let dlr = move |q: f64| c[1] + 2.0 * c[2] * (q - base) + 3.0 * c[3] * (q - base).powi(2);
                let qs: Vec<f64> = (0..6).map(|k| base - 4.0 + 2.5 * k as f64 + rng.gen_range(-0.5..0.5)).collect();
                let pts: Vec<RdPoint> = qs.iter().map(|&q| RdPoint { label: label.into(), bpp: 10f64.powf(lr(q)), psnr: q, ssim: 0.0 }).collect();
                (pts, lr, dlr, qs[0], qs[5])
            };
            let (pa, la, da, a0, a1) = make("a");
            let (pb, lb, db, b0, b1) = make("b");
            let (lo, hi) = (a0.max(b0), a1.min(b1));
            let diff = (hermite_integral(&lb, &db, lo, hi) - hermite_integral(&la, &da, lo, hi)) / (hi - lo);
            let oracle = (10f64.powf(diff) - 1.0) * 100.0;
            let got = bd_rate(&pa, &pb, QualityMetric::Psnr).unwrap();
            assert!((got - oracle).abs() < 0.1, "{got} vs {oracle}");
        }
    }

    #[test]
    fn csv_and_svg_output() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("rd");
        emit_rd(&[], &stem).unwrap();
        assert_eq!(std::fs::read_to_string(stem.with_extension("csv")).unwrap(), format!("{CSV_HEADER}\n"));
        let pts = curve("full <a&b>", &[0.1, 0.2, 0.4, 0.8], |r| 30.0 + r);
        emit_rd(&pts, &stem).unwrap();
        let text = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert!(text.starts_with(&format!("{CSV_HEADER}\n")));
        assert_eq!(read_rd_csv(stem.with_extension("csv")).unwrap(), pts);
        let svg = std::fs::read_to_string(stem.with_extension("svg")).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(write_rd_csv(&pts, dir.path().join("missing/rd.csv")).is_err());
    }

    #[test]
    fn spearman_ranks() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
