//! Sequence encoder and decoder sharing one per-frame routine, plus the
//! receiver-side Gaussian prediction and novel-view rendering.

use crate::autograd::{Tape, Var};
use crate::bitstream::{payload_slot, qstep_of, CodedStream, FramePayload, FrameType, Header, WireCamera, PAYLOADS_PER_FRAME};
use crate::entropy::{
    decode_hyper, decode_latent, encode_hyper, encode_latent, factorized_bits, gaussian_bits, hyper_cross_context, hyper_decode,
    hyper_encode, latent_distribution, quantize_infer, temporal_context, EntropyContext, SymbolPlane,
};
use crate::error::{Error, Result};
use crate::gaussians::{assemble_cloud, refine, CloudVars, GaussianPredictor, ViewGaussians};
use crate::geometry::{CameraModel, CameraRig, View};
use crate::renderer::render_var;
use crate::stereo::estimate_maps;
use crate::tensor::Tensor;
use crate::transforms::{
    decode_disparity, decode_image_pair, encode_disparity, encode_image_pair, ImagePairContext, Stream, TemporalState, FRAME_ALIGN,
    LATENT_STRIDE,
};

use super::config::RunConfig;
use super::model::Model;

const VIEWS: [View; 2] = [View::L, View::R];

/// Smallest multiple of [`FRAME_ALIGN`] not below `n`.
pub fn aligned(n: usize) -> usize {
    n.div_ceil(FRAME_ALIGN) * FRAME_ALIGN
}

/// Decoded quantities of one frame at the padded resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecon {
    pub x_hat: [Tensor; 2],
    pub d_hat: [Tensor; 2],
    /// Disparity decoder features at 1/8 resolution.
    pub disp_feat: [Tensor; 2],
    /// Image decoder features at 1/8 resolution.
    pub img_feat: [Tensor; 2],
}

impl FrameRecon {
    /// Reconstructed source frames at the original size.
    pub fn sources(&self, height: usize, width: usize) -> [Tensor; 2] {
        [self.x_hat[0].crop(height, width), self.x_hat[1].crop(height, width)]
    }

    pub fn disparities(&self, height: usize, width: usize) -> [Tensor; 2] {
        [self.d_hat[0].crop(height, width), self.d_hat[1].crop(height, width)]
    }
}

/// Bit accounting of one encoded frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameBits {
    /// Bytes actually written, times eight.
    pub payload: f64,
    /// Ideal code length under the quantized coding tables.
    pub ideal: f64,
    /// `sum -log2 p` under the continuous entropy model.
    pub estimated: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub stream: CodedStream,
    /// Encoder-side local reconstructions.
    pub recon: Vec<FrameRecon>,
    /// Encoder temporal state after each frame.
    pub states: Vec<TemporalState>,
    pub bits: Vec<FrameBits>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub recon: Vec<FrameRecon>,
    pub states: Vec<TemporalState>,
}

enum Side<'a> {
    Encoder { frames: [&'a Tensor; 2], payloads: Vec<Vec<u8>>, bits: FrameBits },
    Decoder { payloads: &'a [Vec<u8>; PAYLOADS_PER_FRAME] },
}

fn z_logits(model: &Model, stream: Stream) -> Result<Tensor> {
    let name = format!("{}.zprior", stream.tag());
    model.params.get(&name).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))
}

impl Side<'_> {
    fn hyper(&mut self, tape: &Tape, model: &Model, stream: Stream, slot: usize, y: Option<Var>, shape: [usize; 3]) -> Result<SymbolPlane> {
        let logits = z_logits(model, stream)?;
        match self {
            Side::Encoder { payloads, bits, .. } => {
                let y = y.ok_or_else(|| Error::InvalidArgument("encoder lacks a latent".into()))?;
                let z = hyper_encode(tape, &model.params, stream, y)?;
                let plane = quantize_infer(&tape.value(z));
                let (bytes, ideal) = encode_hyper(&logits, &plane);
                let est = factorized_bits(tape, tape.constant(plane.to_tensor()), tape.constant(logits))?;
                bits.ideal += ideal;
                bits.estimated += tape.value(est).data()[0];
                payloads[slot] = bytes;
                Ok(plane)
            }
            Side::Decoder { payloads } => decode_hyper(&logits, &payloads[slot], shape),
        }
    }

    fn latent(
        &mut self,
        tape: &Tape,
        model: &Model,
        stream: Stream,
        ctx: &EntropyContext,
        slot: usize,
        y: Option<Var>,
        shape: [usize; 3],
    ) -> Result<SymbolPlane> {
        match self {
            Side::Encoder { payloads, bits, .. } => {
                let y = y.ok_or_else(|| Error::InvalidArgument("encoder lacks a latent".into()))?;
                let plane = quantize_infer(&tape.value(y));
                let (bytes, ideal) = encode_latent(tape, &model.params, stream, ctx, &plane)?;
                let y_hat = tape.constant(plane.to_tensor());
                let (mu, sigma) = latent_distribution(tape, &model.params, stream, ctx, y_hat)?;
                let est = gaussian_bits(tape, y_hat, mu, sigma)?;
                bits.ideal += ideal;
                bits.estimated += tape.value(est).data()[0];
                payloads[slot] = bytes;
                Ok(plane)
            }
            Side::Decoder { payloads } => decode_latent(tape, &model.params, stream, ctx, &payloads[slot], shape),
        }
    }
}

/// One frame of coding at the padded size `(h, w)`. The encoder and the
/// decoder run exactly the same reconstruction path on the same symbols.
fn code_frame(model: &Model, state: &mut TemporalState, t: usize, qstep: f64, hw: (usize, usize), side: &mut Side) -> Result<FrameRecon> {
    let (h, w) = hw;
    let (p, cfg) = (&model.params, &model.codec);
    let tape = Tape::new();
    let lat = (h / LATENT_STRIDE, w / LATENT_STRIDE);
    let hyp = (lat.0 / 4, lat.1 / 4);
    let prev_d = state.vars(&tape, Stream::Disparity);
    let prev_i = state.vars(&tape, Stream::Image);

    let y_disp = match side {
        Side::Encoder { frames, .. } => {
            let maps = estimate_maps(p, &model.stereo, frames[0], frames[1], cfg.d_ceiling)?;
            let mut ys = Vec::new();
            for (v, m) in maps.iter().enumerate() {
                ys.push(encode_disparity(&tape, p, cfg, tape.constant(m.values.clone()), prev_d[v], qstep)?);
            }
            Some(ys)
        }
        Side::Decoder { .. } => None,
    };
    let mut d_hat = Vec::new();
    let mut f_disp = Vec::new();
    for v in 0..2 {
        let y = y_disp.as_ref().map(|ys| ys[v]);
        let zp = side.hyper(&tape, model, Stream::Disparity, payload_slot(v, false, false), y, [cfg.c_z, hyp.0, hyp.1])?;
        let hyper = hyper_decode(&tape, p, Stream::Disparity, tape.constant(zp.to_tensor()))?;
        let temporal = temporal_context(&tape, prev_d[v], cfg.c_f, lat)?;
        let ctx = EntropyContext { hyper, temporal, cross: None };
        let yp = side.latent(&tape, model, Stream::Disparity, &ctx, payload_slot(v, false, true), y, [cfg.c_y_disp, lat.0, lat.1])?;
        let (d, f) = decode_disparity(&tape, p, cfg, tape.constant(yp.to_tensor()), prev_d[v], qstep)?;
        d_hat.push(d);
        f_disp.push(f);
    }

    let ictx = ImagePairContext { prev: prev_i, d_hat: [d_hat[0], d_hat[1]], frame: t, mode: model.mode, qstep };
    let y_img = match side {
        Side::Encoder { frames, .. } => {
            let xs = [tape.constant(frames[0].clone()), tape.constant(frames[1].clone())];
            Some(encode_image_pair(&tape, p, cfg, xs, &ictx)?)
        }
        Side::Decoder { .. } => None,
    };
    let mut hyper = Vec::new();
    for v in 0..2 {
        let y = y_img.map(|ys| ys[v]);
        let zp = side.hyper(&tape, model, Stream::Image, payload_slot(v, true, false), y, [cfg.c_z, hyp.0, hyp.1])?;
        hyper.push(hyper_decode(&tape, p, Stream::Image, tape.constant(zp.to_tensor()))?);
    }
    let cross = hyper_cross_context(&tape, p, [hyper[0], hyper[1]], ictx.d_hat, t, model.mode)?;
    let mut y_hat = Vec::new();
    for v in 0..2 {
        let temporal = temporal_context(&tape, prev_i[v], cfg.c_f, lat)?;
        let ctx = EntropyContext { hyper: hyper[v], temporal, cross: Some(cross[v]) };
        let y = y_img.map(|ys| ys[v]);
        let yp = side.latent(&tape, model, Stream::Image, &ctx, payload_slot(v, true, true), y, [cfg.c_y_img, lat.0, lat.1])?;
        y_hat.push(tape.constant(yp.to_tensor()));
    }
    let dec = decode_image_pair(&tape, p, cfg, [y_hat[0], y_hat[1]], &ictx)?;

    let val = |v: Var| (*tape.value(v)).clone();
    let recon = FrameRecon {
        x_hat: [val(dec[0].x_hat), val(dec[1].x_hat)],
        d_hat: [val(d_hat[0]), val(d_hat[1])],
        disp_feat: [val(f_disp[0]), val(f_disp[1])],
        img_feat: [val(dec[0].features), val(dec[1].features)],
    };
    state.commit(recon.disp_feat.clone(), recon.img_feat.clone());
    Ok(recon)
}

fn check_frames(left: &[Tensor], right: &[Tensor]) -> Result<(usize, usize)> {
    if left.is_empty() || left.len() != right.len() {
        return Err(Error::InvalidArgument(format!("{} left vs {} right frames", left.len(), right.len())));
    }
    let [c, h, w] = left[0].shape();
    if c != 3 || left.iter().chain(right).any(|f| f.shape() != [3, h, w]) {
        return Err(Error::Shape("all frames must be RGB with equal dimensions".into()));
    }
    if h > u16::MAX as usize || w > u16::MAX as usize || left.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument("sequence too large for the container".into()));
    }
    Ok((h, w))
}

/// Encodes a rectified stereo sequence.
pub fn encode_sequence(model: &Model, rig: &CameraRig, cfg: &RunConfig, left: &[Tensor], right: &[Tensor]) -> Result<Encoded> {
    let (h, w) = check_frames(left, right)?;
    if rig.left.width != w || rig.left.height != h {
        return Err(Error::Shape(format!("cameras are {}x{}, frames {w}x{h}", rig.left.width, rig.left.height)));
    }
    let gop = u8::try_from(cfg.gop).map_err(|_| Error::InvalidArgument("gop must fit in one byte".into()))?;
    let schedule = cfg.schedule()?;
    let (ph, pw) = (aligned(h), aligned(w));
    let header = Header {
        flags: model.hash(),
        width: w as u16,
        height: h as u16,
        frame_count: left.len() as u16,
        base_qp: cfg.base_qp,
        pattern: cfg.pattern.clone(),
        gop_len: gop,
        cameras: [WireCamera::from_model(&rig.left), WireCamera::from_model(&rig.right)],
        baseline: rig.baseline as f32,
    };
    let mut state = TemporalState::new();
    let mut out = Encoded { stream: CodedStream { header, frames: vec![] }, recon: vec![], states: vec![], bits: vec![] };
    for t in 0..left.len() {
        state.begin_frame(t, cfg.gop);
        let qstep = qstep_of(schedule.effective_qp(t) as f64);
        let (l, r) = (left[t].pad_edge(ph, pw), right[t].pad_edge(ph, pw));
        let mut side = Side::Encoder { frames: [&l, &r], payloads: vec![Vec::new(); PAYLOADS_PER_FRAME], bits: FrameBits::default() };
        let recon = code_frame(model, &mut state, t, qstep, (ph, pw), &mut side)?;
        let Side::Encoder { payloads, mut bits, .. } = side else { unreachable!() };
        bits.payload = 8.0 * payloads.iter().map(Vec::len).sum::<usize>() as f64;
        out.stream.frames.push(FramePayload {
            frame_type: if TemporalState::is_intra(t, cfg.gop) { FrameType::I } else { FrameType::P },
            qp_offset_index: schedule.offset_index(t) as u8,
            payloads: payloads.try_into().expect("eight payloads"),
        });
        out.recon.push(recon);
        out.states.push(state.clone());
        out.bits.push(bits);
    }
    Ok(out)
}

/// Decodes every frame; rejects streams produced by a different checkpoint.
pub fn decode_sequence(model: &Model, stream: &CodedStream) -> Result<Decoded> {
    let hd = &stream.header;
    let actual = model.hash();
    if hd.flags != actual {
        return Err(Error::CheckpointMismatch { expected: hd.flags, actual });
    }
    let schedule = hd.schedule()?;
    let (ph, pw) = (aligned(hd.height as usize), aligned(hd.width as usize));
    let gop = hd.gop_len as usize;
    let mut state = TemporalState::new();
    let mut out = Decoded { recon: vec![], states: vec![] };
    for (t, frame) in stream.frames.iter().enumerate() {
        state.begin_frame(t, gop);
        let intra = TemporalState::is_intra(t, gop);
        if (frame.frame_type == FrameType::I) != intra || frame.qp_offset_index as usize != schedule.offset_index(t) {
            return Err(Error::Corrupt(format!("frame {t}: type or qp offset disagrees with the header schedule")));
        }
        let qstep = qstep_of(schedule.effective_qp(t) as f64);
        let mut side = Side::Decoder { payloads: &frame.payloads };
        out.recon.push(code_frame(model, &mut state, t, qstep, (ph, pw), &mut side)?);
        out.states.push(state.clone());
    }
    Ok(out)
}

/// Tape handles of one decoded view at the padded size.
#[derive(Clone, Copy, Debug)]
pub struct DecodedView {
    pub x_hat: Var,
    pub d_hat: Var,
    pub disp_feat: Var,
    pub img_feat: Var,
}

/// Gaussian prediction, refinement and cloud assembly for both views. Only
/// pixels inside the original `(height, width)` with a valid disparity emit Gaussians.
pub fn splat_views(tape: &Tape, model: &Model, rig: &CameraRig, views: [DecodedView; 2], size: (usize, usize)) -> Result<Option<CloudVars>> {
    let fb = rig.focal_baseline();
    let pred = GaussianPredictor::new(&model.params, model.gauss, fb);
    let cams: Vec<CameraModel> = VIEWS
        .iter()
        .map(|&v| {
            let mut c = rig.camera(v).clone();
            let [_, h, w] = tape.shape(views[v.index()].x_hat);
            (c.height, c.width) = (h, w);
            c
        })
        .collect();
    let mut inputs = Vec::new();
    for (&view, dv) in VIEWS.iter().zip(&views) {
        let trunk = pred.trunk(tape, view, dv.disp_feat, dv.img_feat)?;
        let attrs = pred.predict_attributes(tape, trunk)?;
        let res = pred.predict_residuals(tape, trunk)?;
        let (color, depth, valid) = refine(tape, &model.gauss, dv.x_hat, dv.d_hat, &res, fb)?;
        let [_, _, w] = tape.shape(dv.x_hat);
        let mask = valid.iter().enumerate().map(|(i, &ok)| ok && i / w < size.0 && i % w < size.1).collect();
        inputs.push((view, color, depth, attrs, mask));
    }
    let vg: Vec<ViewGaussians> = inputs
        .into_iter()
        .zip(&cams)
        .map(|((view, color, depth, attrs, mask), cam)| ViewGaussians { view, cam, color, depth, attrs, mask })
        .collect();
    assemble_cloud(tape, &vg)
}

/// Renders `cloud` into every camera; an empty cloud yields the background.
pub fn render_cameras(tape: &Tape, cloud: Option<&CloudVars>, cams: &[CameraModel], background: [f64; 3]) -> Result<Vec<Var>> {
    cams.iter()
        .map(|cam| match cloud {
            Some(c) => render_var(tape, c.attrs, cam, background),
            None => Ok(tape.constant(Tensor::from_fn(3, cam.height, cam.width, |c, _, _| background[c]))),
        })
        .collect()
}

/// Novel views of one decoded frame.
pub fn render_frame(model: &Model, rig: &CameraRig, recon: &FrameRecon, size: (usize, usize), background: [f64; 3]) -> Result<Vec<Tensor>> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let views: [DecodedView; 2] = std::array::from_fn(|v| DecodedView {
        x_hat: c(&recon.x_hat[v]),
        d_hat: c(&recon.d_hat[v]),
        disp_feat: c(&recon.disp_feat[v]),
        img_feat: c(&recon.img_feat[v]),
    });
    let cloud = splat_views(&tape, model, rig, views, size)?;
    let imgs = render_cameras(&tape, cloud.as_ref(), &rig.targets, background)?;
    Ok(imgs.into_iter().map(|v| (*tape.value(v)).clone()).collect())
}

/// Decoded source pairs and, per frame, one novel view per target camera of `rig`.
pub struct Rendered {
    pub sources: Vec<[Tensor; 2]>,
    pub novel: Vec<Vec<Tensor>>,
}

/// Receiver: decodes `stream` and renders every target camera of `targets`.
pub fn decode_and_render(model: &Model, stream: &CodedStream, targets: &[CameraModel], background: [f64; 3]) -> Result<Rendered> {
    let decoded = decode_sequence(model, stream)?;
    let mut rig = stream.header.rig();
    rig.targets = targets.to_vec();
    let size = (stream.header.height as usize, stream.header.width as usize);
    let mut out = Rendered { sources: vec![], novel: vec![] };
    for r in &decoded.recon {
        out.sources.push(r.sources(size.0, size.1));
        out.novel.push(render_frame(model, &rig, r, size, background)?);
    }
    Ok(out)
}
