//! Two-stage rate-rendering-distortion training on synthetic sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::bitstream::{effective_qp, lambda_of, qstep_of, QpSchedule, QP_PRESETS};
use crate::entropy::{
    factorized_bits, gaussian_bits, hyper_cross_context, hyper_decode, hyper_encode, latent_distribution, quantize_train,
    temporal_context, EntropyContext,
};
use crate::error::{Error, Result};
use crate::geometry::DisparityMap;
use crate::metrics::ssim_var;
use crate::params::Adam;
use crate::stereo::{disparity_loss, estimate_pair};
use crate::tensor::Tensor;
use crate::transforms::{decode_disparity, decode_image_pair, encode_disparity, encode_image_pair, ImagePairContext, Stream};

use super::codec::{aligned, render_cameras, splat_views, DecodedView};
use super::config::RunConfig;
use super::model::{Model, ARCH_KEY};
use super::synth::Sequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Disparity and compression networks on the source reconstruction.
    Codec,
    /// End to end including Gaussian prediction and rendering.
    Full,
}

/// Loss weights of one objective evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn of(cfg: &RunConfig) -> Self {
        LossWeights { alpha: cfg.alpha, beta: cfg.beta, gamma: cfg.gamma }
    }
}

/// Mean squared error as a scalar tape variable.
pub fn mse_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    Ok(tape.mean(tape.square(tape.sub(a, b)?)))
}

/// Mean absolute error as a scalar tape variable.
pub fn l1_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    Ok(tape.mean(tape.abs(tape.sub(a, b)?)))
}

/// Source term: summed MSE of the two reconstructed views.
pub fn source_loss(tape: &Tape, recon: [Var; 2], gt: [Var; 2]) -> Result<Var> {
    tape.add(mse_var(tape, recon[0], gt[0])?, mse_var(tape, recon[1], gt[1])?)
}

/// `alpha (1 - SSIM) + (1 - alpha) L1` averaged over the novel views, plus
/// `beta` times the source term. Without novel views the source term stands
/// alone with unit weight.
pub fn rrd_distortion(tape: &Tape, novel: &[(Var, Var)], src: Var, w: &LossWeights) -> Result<Var> {
    if novel.is_empty() {
        return Ok(src);
    }
    let mut d = tape.scale(src, w.beta);
    let n = novel.len() as f64;
    for &(pred, gt) in novel {
        let dssim = tape.affine(ssim_var(tape, pred, gt)?, -1.0, 1.0);
        let l1 = l1_var(tape, pred, gt)?;
        let term = tape.add(tape.scale(dssim, w.alpha / n), tape.scale(l1, (1.0 - w.alpha) / n))?;
        d = tape.add(d, term)?;
    }
    Ok(d)
}

/// Scalar components of one frame's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameTerms {
    pub qp: u8,
    pub bpp: f64,
    pub source: f64,
    pub disparity: f64,
    pub distortion: f64,
}

/// Tape handles of one frame's objective.
pub struct FrameObjective {
    pub loss: Var,
    pub disparity_loss: Var,
    pub terms: FrameTerms,
    /// Decoded features handed to the next frame of the clip.
    pub next: ([Var; 2], [Var; 2]),
}

fn noise_seed(base: u64, step: usize, frame: usize, slot: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 16) ^ ((frame as u64) << 8) ^ slot as u64
}

/// Rate of one latent plane in bits: factorized bits of noisy `z`, Gaussian
/// bits of noisy `y` under the context of the hard-rounded symbols. Returns
/// the rate and the rounded latent fed to the decoder.
fn plane_rate(tape: &Tape, model: &Model, stream: Stream, y: Var, temporal: Var, cross: Option<Var>, seed: u64) -> Result<(Var, Var, Var)> {
    let p = &model.params;
    let z = hyper_encode(tape, p, stream, y)?;
    let logits = tape.param(p, &format!("{}.zprior", stream.tag()))?;
    let rz = factorized_bits(tape, quantize_train(tape, z, seed)?, logits)?;
    let hyper = hyper_decode(tape, p, stream, tape.round_ste(z))?;
    let y_hat = tape.round_ste(y);
    let ctx = EntropyContext { hyper, temporal, cross };
    let (mu, sigma) = latent_distribution(tape, p, stream, &ctx, y_hat)?;
    let ry = gaussian_bits(tape, quantize_train(tape, y, seed ^ 0x5555)?, mu, sigma)?;
    Ok((tape.add(rz, ry)?, y_hat, hyper))
}

/// Image-stream rate needs both hyper features before the cross context, so it is split.
fn image_hyper(tape: &Tape, model: &Model, y: Var, seed: u64) -> Result<(Var, Var)> {
    let p = &model.params;
    let z = hyper_encode(tape, p, Stream::Image, y)?;
    let logits = tape.param(p, "img.zprior")?;
    let rz = factorized_bits(tape, quantize_train(tape, z, seed)?, logits)?;
    Ok((rz, hyper_decode(tape, p, Stream::Image, tape.round_ste(z))?))
}

/// Per-frame inputs of the training objective.
pub struct FrameSample<'a> {
    pub left: &'a Tensor,
    pub right: &'a Tensor,
    pub disparity: &'a [DisparityMap; 2],
    pub targets: &'a [Tensor],
    pub frame: usize,
    pub qp: u8,
}

/// `lambda D + gamma L_d + R` for one frame with rate in bits per pixel of the pair.
#[allow(clippy::too_many_arguments)]
pub fn frame_objective(
    tape: &Tape,
    model: &Model,
    rig: &crate::geometry::CameraRig,
    sample: &FrameSample,
    prev: Option<([Var; 2], [Var; 2])>,
    stage: Stage,
    w: &LossWeights,
    seed: u64,
) -> Result<FrameObjective> {
    let (p, cfg) = (&model.params, &model.codec);
    let [_, h, wd] = sample.left.shape();
    if aligned(h) != h || aligned(wd) != wd {
        return Err(Error::Shape(format!("training frames must be {}-aligned, got {wd}x{h}", crate::transforms::FRAME_ALIGN)));
    }
    let lat = (h / crate::transforms::LATENT_STRIDE, wd / crate::transforms::LATENT_STRIDE);
    let qstep = qstep_of(sample.qp as f64);
    let lambda = lambda_of(sample.qp as f64);
    let l = tape.constant(sample.left.clone());
    let r = tape.constant(sample.right.clone());
    let prev_d = prev.map(|(d, _)| d);
    let prev_i = prev.map(|(_, i)| i);

    let est = estimate_pair(tape, p, &model.stereo, l, r)?;
    let (ld, _) = disparity_loss(tape, &est, sample.disparity, model.stereo.mu)?;

    let mut rate: Option<Var> = None;
    let mut add_rate = |v: Var| -> Result<()> {
        rate = Some(match rate {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };
    let mut d_hat = Vec::new();
    let mut f_disp = Vec::new();
    for v in 0..2 {
        let d = tape.clamp(*est[v].last().unwrap(), 0.0, cfg.d_ceiling);
        let pv = prev_d.map(|x| x[v]);
        let y = encode_disparity(tape, p, cfg, d, pv, qstep)?;
        let temporal = temporal_context(tape, pv, cfg.c_f, lat)?;
        let (bits, y_hat, _) = plane_rate(tape, model, Stream::Disparity, y, temporal, None, noise_seed(seed, 0, sample.frame, v))?;
        add_rate(bits)?;
        let (dh, f) = decode_disparity(tape, p, cfg, y_hat, pv, qstep)?;
        d_hat.push(dh);
        f_disp.push(f);
    }

    let ictx = ImagePairContext { prev: [prev_i.map(|x| x[0]), prev_i.map(|x| x[1])], d_hat: [d_hat[0], d_hat[1]], frame: sample.frame, mode: model.mode, qstep };
    let ys = encode_image_pair(tape, p, cfg, [l, r], &ictx)?;
    let mut hyper = Vec::new();
    for v in 0..2 {
        let (rz, hf) = image_hyper(tape, model, ys[v], noise_seed(seed, 1, sample.frame, v))?;
        add_rate(rz)?;
        hyper.push(hf);
    }
    let cross = hyper_cross_context(tape, p, [hyper[0], hyper[1]], ictx.d_hat, sample.frame, model.mode)?;
    let mut y_hat = Vec::new();
    for v in 0..2 {
        let temporal = temporal_context(tape, ictx.prev[v], cfg.c_f, lat)?;
        let yh = tape.round_ste(ys[v]);
        let ctx = EntropyContext { hyper: hyper[v], temporal, cross: Some(cross[v]) };
        let (mu, sigma) = latent_distribution(tape, p, Stream::Image, &ctx, yh)?;
        add_rate(gaussian_bits(tape, quantize_train(tape, ys[v], noise_seed(seed, 2, sample.frame, v))?, mu, sigma)?)?;
        y_hat.push(yh);
    }
    let dec = decode_image_pair(tape, p, cfg, [y_hat[0], y_hat[1]], &ictx)?;
    let rate = rate.expect("eight planes");
    let bpp = tape.scale(rate, 1.0 / (2.0 * (h * wd) as f64));
    let src = source_loss(tape, [dec[0].x_hat, dec[1].x_hat], [l, r])?;

    let mut novel = Vec::new();
    if stage == Stage::Full {
        let views: [DecodedView; 2] = std::array::from_fn(|v| DecodedView { x_hat: dec[v].x_hat, d_hat: d_hat[v], disp_feat: f_disp[v], img_feat: dec[v].features });
        let cloud = splat_views(tape, model, rig, views, (h, wd))?;
        let imgs = render_cameras(tape, cloud.as_ref(), &rig.targets, [0.0; 3])?;
        for (img, gt) in imgs.into_iter().zip(sample.targets) {
            novel.push((img, tape.constant(gt.clone())));
        }
    }
    let dist = rrd_distortion(tape, &novel, src, w)?;
    let loss = tape.add(tape.add(tape.scale(dist, lambda), tape.scale(ld, w.gamma))?, bpp)?;
    let val = |v: Var| tape.value(v).data()[0];
    Ok(FrameObjective {
        loss,
        disparity_loss: ld,
        terms: FrameTerms { qp: sample.qp, bpp: val(bpp), source: val(src), disparity: val(ld), distortion: val(dist) },
        next: ([f_disp[0], f_disp[1]], [dec[0].features, dec[1].features]),
    })
}

/// Per-step record of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub frames: Vec<FrameTerms>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn losses(&self, stage: Stage) -> Vec<f64> {
        self.steps.iter().filter(|s| s.stage == stage).map(|s| s.loss).collect()
    }
}

/// Trailing moving average with the given window.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// One clip's summed objective: frames share a tape so temporal features keep gradients.
pub fn clip_objective(
    tape: &Tape,
    model: &Model,
    seq: &Sequence,
    start: usize,
    schedule: &QpSchedule,
    cfg: &RunConfig,
    stage: Stage,
    seed: u64,
) -> Result<(Var, Vec<FrameTerms>)> {
    let w = LossWeights::of(cfg);
    let mut prev = None;
    let mut total: Option<Var> = None;
    let mut terms = Vec::new();
    for k in 0..cfg.clip_len.min(seq.len() - start) {
        let t = start + k;
        let sample = FrameSample {
            left: &seq.left[t],
            right: &seq.right[t],
            disparity: &seq.disparity[t],
            targets: &seq.targets[t],
            frame: k,
            qp: effective_qp(schedule, k),
        };
        let obj = frame_objective(tape, model, &seq.rig, &sample, prev, stage, &w, seed)?;
        total = Some(match total {
            Some(a) => tape.add(a, obj.loss)?,
            None => obj.loss,
        });
        terms.push(obj.terms);
        prev = Some(obj.next);
    }
    Ok((total.expect("non-empty clip"), terms))
}

/// Runs both stages on `data`, reporting every step to `on_step`.
pub fn train_toy(cfg: &RunConfig, data: &[Sequence], mut on_step: impl FnMut(&StepRecord)) -> Result<(Model, TrainReport)> {
    let mut model = Model::init(cfg)?;
    let report = train_model(&mut model, cfg, data, &mut on_step)?;
    Ok((model, report))
}

/// Continues training `model` in place.
pub fn train_model(model: &mut Model, cfg: &RunConfig, data: &[Sequence], on_step: &mut dyn FnMut(&StepRecord)) -> Result<TrainReport> {
    if data.is_empty() || data.iter().any(|s| s.len() < cfg.clip_len) {
        return Err(Error::InvalidArgument(format!("training needs sequences of at least {} frames", cfg.clip_len)));
    }
    let clock = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC11F);
    let mut opt = Adam::new(cfg.lr);
    let mut report = TrainReport::default();
    let plan = std::iter::repeat(Stage::Codec).take(cfg.stage1_steps).chain(std::iter::repeat(Stage::Full).take(cfg.stage2_steps));
    for (step, stage) in plan.enumerate() {
        let seq = &data[rng.gen_range(0..data.len())];
        let start = rng.gen_range(0..=seq.len() - cfg.clip_len);
        let schedule = QpSchedule::new(QP_PRESETS[step % QP_PRESETS.len()], cfg.pattern.clone())?;
        let tape = Tape::new();
        let (loss, frames) = clip_objective(&tape, model, seq, start, &schedule, cfg, stage, cfg.seed ^ step as u64)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss became {value} at step {step} ({stage:?}); frame terms {frames:?}")));
        }
        let mut grads = tape.backward(loss)?.for_params(&model.params);
        grads.remove(ARCH_KEY);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for `{name}` at step {step}")));
        }
        opt.step(&mut model.params, &grads);
        model.snap_to_storage();
        let rec = StepRecord { step, stage, loss: value, frames };
        on_step(&rec);
        report.steps.push(rec);
    }
    report.seconds = clock.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::finite_difference;
    use crate::pipeline::synth::{make_synthetic, SceneSpec};

    #[test]
    fn distortion_matches_hand_computation() {
        let tape = Tape::new();
        let a = Tensor::from_fn(3, 16, 16, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 10.0);
        let b = Tensor::from_fn(3, 16, 16, |c, y, x| ((c * 5 + y + x * 2) % 13) as f64 / 12.0);
        let src_a = Tensor::full(3, 16, 16, 0.25);
        let src_b = Tensor::full(3, 16, 16, 0.5);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let src = source_loss(&tape, [tape.constant(src_a.clone()), tape.constant(src_a)], [tape.constant(src_b.clone()), tape.constant(src_b)]).unwrap();
        let w = LossWeights { alpha: 0.2, beta: 0.2, gamma: 0.05 };
        let d = tape.value(rrd_distortion(&tape, &[(va, vb)], src, &w).unwrap()).data()[0];
        let ssim = crate::metrics::ssim(&a, &b).unwrap();
        let l1 = a.zip_map(&b, |x, y| (x - y).abs()).unwrap().mean();
        let expect = 0.2 * (1.0 - ssim) + 0.8 * l1 + 0.2 * (2.0 * 0.0625);
        assert!((d - expect).abs() < 1e-12, "{d} vs {expect}");
        let only_src = tape.value(rrd_distortion(&tape, &[], src, &w).unwrap()).data()[0];
        assert_eq!(only_src, 0.125);
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }

    fn tiny() -> (Model, RunConfig, Sequence) {
        let mut cfg = RunConfig::toy();
        cfg.clip_len = 1;
        let seq = make_synthetic(&SceneSpec::random(5, 1));
        (Model::init(&cfg).unwrap(), cfg, seq)
    }

    #[test]
    fn gamma_gates_disparity_gradients() {
        let (model, mut cfg, seq) = tiny();
        let sched = QpSchedule::new(31, vec![0]).unwrap();
        let mut wrong = seq.clone();
        wrong.disparity[0][0].values = wrong.disparity[0][0].values.map(|d| d + 3.0);
        let grads = |cfg: &RunConfig, s: &Sequence| {
            let tape = Tape::new();
            let (loss, _) = clip_objective(&tape, &model, s, 0, &sched, cfg, Stage::Codec, 1).unwrap();
            (tape.value(loss).data()[0], tape.backward(loss).unwrap().for_params(&model.params))
        };
        cfg.gamma = 0.0;
        let (la, ga) = grads(&cfg, &seq);
        let (lb, gb) = grads(&cfg, &wrong);
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        cfg.gamma = 0.05;
        let (_, gc) = grads(&cfg, &seq);
        let (_, gd) = grads(&cfg, &wrong);
        assert_ne!(gc, gd);

        // d loss / d gamma equals the disparity loss.
        let ld = {
            let tape = Tape::new();
            let w = LossWeights::of(&cfg);
            let s = FrameSample { left: &seq.left[0], right: &seq.right[0], disparity: &seq.disparity[0], targets: &seq.targets[0], frame: 0, qp: 31 };
            let o = frame_objective(&tape, &model, &seq.rig, &s, None, Stage::Codec, &w, 1).unwrap();
            o.terms.disparity
        };
        let fd = finite_difference(&Tensor::scalar(0.05), 1e-3, |g| {
            let mut c = cfg.clone();
            c.gamma = g.data()[0];
            let tape = Tape::new();
            let (loss, _) = clip_objective(&tape, &model, &seq, 0, &sched, &c, Stage::Codec, 1).unwrap();
            tape.value(loss).data()[0]
        });
        assert!((fd.data()[0] - ld).abs() <= 1e-6 * ld.max(1.0), "{} vs {ld}", fd.data()[0]);
    }

    #[test]
    fn full_stage_renders_and_steps() {
        let (_, mut cfg, seq) = tiny();
        cfg.stage1_steps = 1;
        cfg.stage2_steps = 1;
        let (model, report) = train_toy(&cfg, &[seq], |_| {}).unwrap();
        assert_eq!(report.steps.len(), 2);
        assert_eq!(report.steps[1].stage, Stage::Full);
        assert!(report.steps.iter().all(|s| s.loss.is_finite()));
        assert_ne!(model.params, Model::init(&cfg).unwrap().params);
    }
}
