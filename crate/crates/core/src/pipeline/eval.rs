//! Rate and novel-view quality of coded sequences, QP sweeps and ablation comparisons.

use crate::bitstream::{write_container, CodedStream};
use crate::error::{Error, Result};
use crate::metrics::{bd_rate, bpp, psnr, spearman, ssim, QualityMetric, RdPoint};
use crate::tensor::Tensor;

use super::codec::{decode_and_render, encode_sequence, Encoded};
use super::config::RunConfig;
use super::model::Model;
use super::synth::Sequence;

/// Per-frame quality of rendered views against ground truth.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameQuality {
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean PSNR and SSIM over frames and target views.
pub fn view_quality(rendered: &[Vec<Tensor>], gt: &[Vec<Tensor>]) -> Result<Vec<FrameQuality>> {
    if rendered.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} rendered frames vs {} ground-truth frames", rendered.len(), gt.len())));
    }
    rendered
        .iter()
        .zip(gt)
        .map(|(r, g)| {
            if r.len() != g.len() || r.is_empty() {
                return Err(Error::InvalidArgument(format!("{} rendered views vs {} ground-truth views", r.len(), g.len())));
            }
            let mut q = FrameQuality::default();
            for (a, b) in r.iter().zip(g) {
                q.psnr += psnr(a, b, 1.0)? / r.len() as f64;
                q.ssim += ssim(a, b)? / r.len() as f64;
            }
            Ok(q)
        })
        .collect()
}

/// Outcome of coding and rendering one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub point: RdPoint,
    pub frames: Vec<FrameQuality>,
    /// Mean PSNR of the decoded source views.
    pub source_psnr: f64,
    pub encoded: Encoded,
    pub container_bytes: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores an already encoded stream against ground-truth target views.
pub fn evaluate_stream(model: &Model, stream: &CodedStream, seq: &Sequence, background: [f64; 3], label: &str) -> Result<(RdPoint, Vec<FrameQuality>, f64)> {
    if stream.frames.len() != seq.len() {
        return Err(Error::InvalidArgument(format!("stream has {} frames, ground truth {}", stream.frames.len(), seq.len())));
    }
    let out = decode_and_render(model, stream, &seq.rig.targets, background)?;
    let frames = view_quality(&out.novel, &seq.targets)?;
    let mut src = Vec::new();
    for (pair, (l, r)) in out.sources.iter().zip(seq.left.iter().zip(&seq.right)) {
        src.push(psnr(&pair[0], l, 1.0)?);
        src.push(psnr(&pair[1], r, 1.0)?);
    }
    let point = RdPoint {
        label: label.to_string(),
        bpp: bpp(stream).1,
        psnr: mean(frames.iter().map(|f| f.psnr)),
        ssim: mean(frames.iter().map(|f| f.ssim)),
    };
    Ok((point, frames, mean(src.into_iter())))
}

/// Encodes `seq` at `cfg.base_qp`, decodes, renders and scores it.
pub fn evaluate(model: &Model, cfg: &RunConfig, seq: &Sequence, label: &str) -> Result<Evaluation> {
    let encoded = encode_sequence(model, &seq.rig, cfg, &seq.left, &seq.right)?;
    let container_bytes = write_container(&encoded.stream)?.len();
    let (point, frames, source_psnr) = evaluate_stream(model, &encoded.stream, seq, cfg.background, label)?;
    Ok(Evaluation { point, frames, source_psnr, encoded, container_bytes })
}

/// One averaged RD point per QP over all sequences.
pub fn sweep(model: &Model, cfg: &RunConfig, seqs: &[Sequence], qps: &[u8], label: &str) -> Result<Vec<RdPoint>> {
    qps.iter()
        .map(|&qp| {
            let mut c = cfg.clone();
            c.base_qp = qp;
            let evals: Vec<RdPoint> = seqs.iter().map(|s| evaluate(model, &c, s, label).map(|e| e.point)).collect::<Result<_>>()?;
            Ok(RdPoint {
                label: format!("{label}@{qp}"),
                bpp: mean(evals.iter().map(|p| p.bpp)),
                psnr: mean(evals.iter().map(|p| p.psnr)),
                ssim: mean(evals.iter().map(|p| p.ssim)),
            })
        })
        .collect()
}

/// Rank correlation between rate and PSNR across a sweep.
pub fn rd_spearman(points: &[RdPoint]) -> Result<f64> {
    let r: Vec<f64> = points.iter().map(|p| p.bpp).collect();
    let q: Vec<f64> = points.iter().map(|p| p.psnr).collect();
    spearman(&r, &q)
}

/// Piecewise-linear interpolation of `y` at `x` over points sorted by `x`.
fn interp(points: &[(f64, f64)], x: f64) -> f64 {
    let i = points.partition_point(|p| p.0 < x).clamp(1, points.len() - 1);
    let (a, b) = (points[i - 1], points[i]);
    if b.0 == a.0 {
        return a.1;
    }
    a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
}

/// Mean quality difference `test - anchor` over the shared log-rate range,
/// with each curve linearly interpolated in `log10(bpp)`.
pub fn quality_gap(anchor: &[RdPoint], test: &[RdPoint], metric: QualityMetric) -> Result<f64> {
    let curve = |pts: &[RdPoint]| -> Result<Vec<(f64, f64)>> {
        if pts.len() < 2 || pts.iter().any(|p| !(p.bpp > 0.0) || !metric.of(p).is_finite()) {
            return Err(Error::InvalidArgument("quality gap needs two or more points with positive rate".into()));
        }
        let mut c: Vec<(f64, f64)> = pts.iter().map(|p| (p.bpp.log10(), metric.of(p))).collect();
        c.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(c)
    };
    let (a, t) = (curve(anchor)?, curve(test)?);
    let lo = a[0].0.max(t[0].0);
    let hi = a[a.len() - 1].0.min(t[t.len() - 1].0);
    if !(hi > lo) {
        return Err(Error::NoOverlap);
    }
    const SAMPLES: usize = 256;
    let gap: f64 = (0..=SAMPLES)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / SAMPLES as f64;
            interp(&t, x) - interp(&a, x)
        })
        .sum();
    Ok(gap / (SAMPLES + 1) as f64)
}

/// How `test` compares with `anchor`. `quality_loss` is `anchor - test` in
/// quality units at matched rate and is always defined when the rate ranges
/// overlap; `bd_rate` is present only when both curves support a BD fit.
/// Positive values mean `test` is worse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdComparison {
    pub quality_loss: f64,
    pub bd_rate: Option<f64>,
}

pub fn compare_rd(anchor: &[RdPoint], test: &[RdPoint], metric: QualityMetric) -> Result<RdComparison> {
    let quality_loss = -quality_gap(anchor, test, metric)?;
    let bd_rate = match bd_rate(anchor, test, metric) {
        Ok(v) => Some(v),
        Err(Error::InvalidArgument(_)) | Err(Error::NoOverlap) => None,
        Err(e) => return Err(e),
    };
    Ok(RdComparison { quality_loss, bd_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{make_synthetic, SceneSpec};

    #[test]
    fn ground_truth_against_itself() {
        let seq = make_synthetic(&SceneSpec::random(8, 2));
        let q = view_quality(&seq.targets, &seq.targets).unwrap();
        assert!(q.iter().all(|f| f.psnr == f64::INFINITY && (f.ssim - 1.0).abs() < 1e-12));
        assert!(view_quality(&seq.targets[..1], &seq.targets).is_err());
    }

    #[test]
    fn bpp_has_one_source_of_truth() {
        let cfg = RunConfig::toy();
        let model = Model::init(&cfg).unwrap();
        let seq = make_synthetic(&SceneSpec::random(8, 2));
        let e = evaluate(&model, &cfg, &seq, "t").unwrap();
        assert_eq!(e.point.bpp, bpp(&e.encoded.stream).1);
        let payload: f64 = e.encoded.bits.iter().map(|b| b.payload).sum();
        assert!((e.point.bpp - payload / (2.0 * 64.0 * 64.0) / 2.0).abs() < 1e-12);
        assert!(e.point.psnr.is_finite());
    }

    #[test]
    fn quality_gap_of_shifted_curves() {
        let pts = |dq: f64| -> Vec<RdPoint> {
            (0..4).map(|i| RdPoint { label: String::new(), bpp: 0.1 * 2f64.powi(i), psnr: 25.0 + 2.0 * i as f64 + dq, ssim: 0.9 }).collect()
        };
        assert!((quality_gap(&pts(0.0), &pts(-1.5), QualityMetric::Psnr).unwrap() + 1.5).abs() < 1e-9);
        let c = compare_rd(&pts(0.0), &pts(-1.5), QualityMetric::Psnr).unwrap();
        assert!((c.quality_loss - 1.5).abs() < 1e-9);
        assert!(matches!(c.bd_rate, Some(v) if v > 0.0));
        let mut flat = pts(-1.5);
        flat[3].psnr = flat[2].psnr;
        let c = compare_rd(&pts(0.0), &flat, QualityMetric::Psnr).unwrap();
        assert!(c.quality_loss > 0.0 && c.bd_rate.is_none());
    }
}
