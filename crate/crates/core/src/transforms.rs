//! Weight-shared semantic encoders and decoders for the disparity and image
//! streams, with temporal conditioning and the mid-network cross-view exchange.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{cross_view_context, init_fusion, BranchContext, CrossViewMode};
use crate::nn::{self, PATCH};
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;

/// Overall spatial reduction of the main latents.
pub const LATENT_STRIDE: usize = 16;
/// Frame dimensions must be multiples of this (hyperlatents live at 1/64).
pub const FRAME_ALIGN: usize = 64;
pub const DEFAULT_GOP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecConfig {
    pub c_f: usize,
    pub c_y_img: usize,
    pub c_y_disp: usize,
    pub c_z: usize,
    pub c_h: usize,
    pub blocks: usize,
    pub d_ceiling: f64,
    /// Disparities are divided by this before entering the encoder.
    pub disp_unit: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { c_f: 32, c_y_img: 48, c_y_disp: 16, c_z: 16, c_h: 32, blocks: 3, d_ceiling: 192.0, disp_unit: 32.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Disparity,
    Image,
}

impl Stream {
    pub fn tag(self) -> &'static str {
        match self {
            Stream::Disparity => "disp",
            Stream::Image => "img",
        }
    }
}

impl CodecConfig {
    pub fn latent_channels(&self, s: Stream) -> usize {
        match s {
            Stream::Disparity => self.c_y_disp,
            Stream::Image => self.c_y_img,
        }
    }
}

/// Decoded features of the previous frame, per view, at 1/8 resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TemporalState {
    pub frame: usize,
    pub disp: [Option<Tensor>; 2],
    pub img: [Option<Tensor>; 2],
}

impl TemporalState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_intra(frame: usize, gop: usize) -> bool {
        gop == 0 || frame % gop == 0
    }

    /// Clears the buffers when `frame` starts a new group of pictures.
    pub fn begin_frame(&mut self, frame: usize, gop: usize) {
        if Self::is_intra(frame, gop) {
            self.disp = [None, None];
            self.img = [None, None];
        }
        self.frame = frame;
    }

    pub fn commit(&mut self, disp: [Tensor; 2], img: [Tensor; 2]) {
        let [d0, d1] = disp;
        let [i0, i1] = img;
        self.disp = [Some(d0), Some(d1)];
        self.img = [Some(i0), Some(i1)];
    }

    pub fn vars(&self, tape: &Tape, stream: Stream) -> [Option<Var>; 2] {
        let src = match stream {
            Stream::Disparity => &self.disp,
            Stream::Image => &self.img,
        };
        [src[0].as_ref().map(|t| tape.constant(t.clone())), src[1].as_ref().map(|t| tape.constant(t.clone()))]
    }
}

pub fn init_transforms(p: &mut ParamSet, init: &mut Init, cfg: &CodecConfig) {
    let (c, n) = (cfg.c_f, cfg.blocks);
    for (s, c_in, c_y) in [("disp", 1, cfg.c_y_disp), ("img", 3, cfg.c_y_img)] {
        nn::init_patchify(p, init, &format!("{s}.enc.patch"), c_in, c);
        p.init_conv(init, &format!("{s}.enc.tin"), 2 * c, c, 1, 1);
        nn::init_dw_stack(p, init, &format!("{s}.enc.s1"), c, n);
        p.init_conv(init, &format!("{s}.enc.down"), c, c, 3, 1);
        nn::init_dw_stack(p, init, &format!("{s}.enc.s2"), c, n);
        p.init_conv(init, &format!("{s}.enc.out"), c, c_y, 1, 1);

        p.init_conv(init, &format!("{s}.dec.in"), c_y, c, 1, 1);
        nn::init_dw_stack(p, init, &format!("{s}.dec.s1"), c, n);
        p.init_conv(init, &format!("{s}.dec.up"), c, 4 * c, 1, 1);
        p.init_conv(init, &format!("{s}.dec.tin"), 2 * c, c, 1, 1);
        nn::init_dw_stack(p, init, &format!("{s}.dec.s2"), c, n);
        p.init_conv(init, &format!("{s}.dec.rec"), c, c_in * PATCH * PATCH, 1, 1);
    }
    nn::init_dw_stack(p, init, "img.dec.s3", c, n);
    let rec_bias = vec![0.5; 3 * PATCH * PATCH];
    p.set_bias("img.dec.rec", &rec_bias);
    init_fusion(p, "fusion.enc.s");
    init_fusion(p, "fusion.dec.s");
}

fn check_frame(tape: &Tape, x: Var) -> Result<()> {
    let [_, h, w] = tape.shape(x);
    if h % FRAME_ALIGN != 0 || w % FRAME_ALIGN != 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("frame {h}x{w} is not a positive multiple of {FRAME_ALIGN}")));
    }
    Ok(())
}

fn with_temporal(tape: &Tape, params: &ParamSet, name: &str, x: Var, prev: Option<Var>) -> Result<Var> {
    let prev = match prev {
        Some(v) => v,
        None => tape.constant(Tensor::zeros(tape.shape(x)[0], tape.shape(x)[1], tape.shape(x)[2])),
    };
    let cat = tape.concat(&[x, prev])?;
    nn::pointwise(tape, params, name, cat)
}

fn encoder_front(tape: &Tape, params: &ParamSet, cfg: &CodecConfig, s: &str, x: Var, prev: Option<Var>) -> Result<Var> {
    check_frame(tape, x)?;
    let f = nn::patchify(tape, params, &format!("{s}.enc.patch"), x)?;
    let f = with_temporal(tape, params, &format!("{s}.enc.tin"), f, prev)?;
    nn::dw_stack(tape, params, &format!("{s}.enc.s1"), f, cfg.blocks)
}

fn encoder_back(tape: &Tape, params: &ParamSet, cfg: &CodecConfig, s: &str, f: Var, qstep: f64) -> Result<Var> {
    let f = nn::conv(tape, params, &format!("{s}.enc.down"), f, 2, 1, 1)?;
    let f = nn::dw_stack(tape, params, &format!("{s}.enc.s2"), f, cfg.blocks)?;
    let y = nn::pointwise(tape, params, &format!("{s}.enc.out"), f)?;
    Ok(tape.scale(y, 1.0 / qstep))
}

fn decoder_front(tape: &Tape, params: &ParamSet, cfg: &CodecConfig, s: &str, y: Var, prev: Option<Var>, qstep: f64) -> Result<Var> {
    let y = tape.scale(y, qstep);
    let f = nn::pointwise(tape, params, &format!("{s}.dec.in"), y)?;
    let f = nn::dw_stack(tape, params, &format!("{s}.dec.s1"), f, cfg.blocks)?;
    let f = nn::pointwise(tape, params, &format!("{s}.dec.up"), f)?;
    let f = tape.pixel_shuffle(f, 2)?;
    let f = with_temporal(tape, params, &format!("{s}.dec.tin"), f, prev)?;
    nn::dw_stack(tape, params, &format!("{s}.dec.s2"), f, cfg.blocks)
}

fn reconstruct(tape: &Tape, params: &ParamSet, s: &str, f: Var) -> Result<Var> {
    let r = nn::pointwise(tape, params, &format!("{s}.dec.rec"), f)?;
    tape.pixel_shuffle(r, PATCH)
}

/// Disparity latent `y` (already divided by the quantization step).
pub fn encode_disparity(
    tape: &Tape,
    params: &ParamSet,
    cfg: &CodecConfig,
    d: Var,
    prev: Option<Var>,
    qstep: f64,
) -> Result<Var> {
    let x = tape.scale(d, 1.0 / cfg.disp_unit);
    let f = encoder_front(tape, params, cfg, "disp", x, prev)?;
    encoder_back(tape, params, cfg, "disp", f, qstep)
}

/// Returns the reconstructed disparity in `[0, d_ceiling]` and the 1/8
/// resolution features kept for Gaussian prediction and the next frame.
pub fn decode_disparity(
    tape: &Tape,
    params: &ParamSet,
    cfg: &CodecConfig,
    y_hat: Var,
    prev: Option<Var>,
    qstep: f64,
) -> Result<(Var, Var)> {
    let f = decoder_front(tape, params, cfg, "disp", y_hat, prev, qstep)?;
    let r = reconstruct(tape, params, "disp", f)?;
    let d = tape.clamp(tape.scale(r, cfg.disp_unit), 0.0, cfg.d_ceiling);
    Ok((d, f))
}

/// Disparity pooled to a coarser grid, in that grid's pixel units.
pub fn pool_disparity(tape: &Tape, d: Var, factor: usize) -> Result<Var> {
    let p = tape.avg_pool(d, factor)?;
    Ok(tape.scale(p, 1.0 / factor as f64))
}

/// Per-view inputs shared by the image encoder and decoder.
#[derive(Clone, Copy, Debug)]
pub struct ImagePairContext {
    pub prev: [Option<Var>; 2],
    /// Decoded full-resolution disparities.
    pub d_hat: [Var; 2],
    pub frame: usize,
    pub mode: CrossViewMode,
    pub qstep: f64,
}

fn exchange(tape: &Tape, params: &ParamSet, site: &str, feats: [Var; 2], ctx: &ImagePairContext) -> Result<[Var; 2]> {
    let s = tape.param(params, site)?;
    let dl = pool_disparity(tape, ctx.d_hat[0], PATCH)?;
    let dr = pool_disparity(tape, ctx.d_hat[1], PATCH)?;
    let l = BranchContext { features: feats[0], disparity: dl, frame: ctx.frame };
    let r = BranchContext { features: feats[1], disparity: dr, frame: ctx.frame };
    let (a, b) = cross_view_context(tape, l, r, s, ctx.mode)?;
    Ok([a, b])
}

/// Pre-exchange image features `F` for one view.
pub fn image_encoder_front(tape: &Tape, params: &ParamSet, cfg: &CodecConfig, x: Var, prev: Option<Var>) -> Result<Var> {
    encoder_front(tape, params, cfg, "img", x, prev)
}

/// Image latents `Y` for both views.
pub fn encode_image_pair(
    tape: &Tape,
    params: &ParamSet,
    cfg: &CodecConfig,
    frames: [Var; 2],
    ctx: &ImagePairContext,
) -> Result<[Var; 2]> {
    let fl = image_encoder_front(tape, params, cfg, frames[0], ctx.prev[0])?;
    let fr = image_encoder_front(tape, params, cfg, frames[1], ctx.prev[1])?;
    let fused = exchange(tape, params, "fusion.enc.s", [fl, fr], ctx)?;
    Ok([
        encoder_back(tape, params, cfg, "img", fused[0], ctx.qstep)?,
        encoder_back(tape, params, cfg, "img", fused[1], ctx.qstep)?,
    ])
}

#[derive(Clone, Copy, Debug)]
pub struct DecodedImage {
    /// Reconstructed frame in `[0, 1]`.
    pub x_hat: Var,
    /// Decoded features `F_hat` at 1/8 resolution.
    pub features: Var,
    /// Features after the cross-view exchange.
    pub fused: Var,
}

/// Reconstructions and decoded features for both views.
pub fn decode_image_pair(
    tape: &Tape,
    params: &ParamSet,
    cfg: &CodecConfig,
    y_hat: [Var; 2],
    ctx: &ImagePairContext,
) -> Result<[DecodedImage; 2]> {
    let gl = decoder_front(tape, params, cfg, "img", y_hat[0], ctx.prev[0], ctx.qstep)?;
    let gr = decoder_front(tape, params, cfg, "img", y_hat[1], ctx.prev[1], ctx.qstep)?;
    let fused = exchange(tape, params, "fusion.dec.s", [gl, gr], ctx)?;
    let one = |f: Var| -> Result<DecodedImage> {
        let feat = nn::dw_stack(tape, params, "img.dec.s3", f, cfg.blocks)?;
        let r = reconstruct(tape, params, "img", feat)?;
        Ok(DecodedImage { x_hat: tape.clamp(r, 0.0, 1.0), features: feat, fused: f })
    };
    Ok([one(fused[0])?, one(fused[1])?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> CodecConfig {
        CodecConfig { c_f: 4, c_y_img: 6, c_y_disp: 3, c_z: 2, c_h: 4, blocks: 1, ..Default::default() }
    }

    fn setup(cfg: &CodecConfig) -> ParamSet {
        let mut p = ParamSet::new();
        init_transforms(&mut p, &mut Init::new(3), cfg);
        p
    }

    #[test]
    fn disparity_shapes_and_conditioning() {
        let cfg = small();
        let p = setup(&cfg);
        let tape = Tape::new();
        let d = tape.constant(Tensor::from_fn(1, 64, 128, |_, y, x| 10.0 + (x + y) as f64 * 0.05));
        let y0 = encode_disparity(&tape, &p, &cfg, d, None, 1.0).unwrap();
        assert_eq!(tape.shape(y0), [3, 4, 8]);
        let prev = tape.constant(Tensor::full(4, 8, 16, 0.7));
        let y1 = encode_disparity(&tape, &p, &cfg, d, Some(prev), 1.0).unwrap();
        assert_ne!(*tape.value(y0), *tape.value(y1));

        let yh = tape.round_ste(y0);
        let (a, fa) = decode_disparity(&tape, &p, &cfg, yh, Some(prev), 1.0).unwrap();
        let (b, fb) = decode_disparity(&tape, &p, &cfg, yh, Some(prev), 1.0).unwrap();
        assert_eq!(*tape.value(a), *tape.value(b));
        assert_eq!(*tape.value(fa), *tape.value(fb));
        assert_eq!(tape.shape(a), [1, 64, 128]);
        assert!(tape.value(a).data().iter().all(|&v| (0.0..=cfg.d_ceiling).contains(&v)));

        let bad = tape.constant(Tensor::zeros(1, 48, 64));
        assert!(encode_disparity(&tape, &p, &cfg, bad, None, 1.0).is_err());
    }

    #[test]
    fn qstep_scales_latent() {
        let cfg = small();
        let p = setup(&cfg);
        let tape = Tape::new();
        let d = tape.constant(Tensor::full(1, 64, 64, 12.0));
        let a = tape.value(encode_disparity(&tape, &p, &cfg, d, None, 1.0).unwrap());
        let b = tape.value(encode_disparity(&tape, &p, &cfg, d, None, 2.0).unwrap());
        assert!(a.map(|v| v / 2.0).max_abs_diff(&b) < 1e-15);
    }

    fn pair_ctx(tape: &Tape, d: f64, mode: CrossViewMode) -> ImagePairContext {
        let dv = tape.constant(Tensor::full(1, 64, 64, d));
        ImagePairContext { prev: [None, None], d_hat: [dv, dv], frame: 0, mode, qstep: 1.0 }
    }

    #[test]
    fn identical_views_give_identical_latents() {
        let cfg = small();
        let p = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0)));
        let ctx = pair_ctx(&tape, 0.0, CrossViewMode::Fused);
        let [yl, yr] = encode_image_pair(&tape, &p, &cfg, [x, x], &ctx).unwrap();
        assert_eq!(*tape.value(yl), *tape.value(yr));
        assert_eq!(tape.shape(yl), [6, 4, 4]);
        let [a, b] = decode_image_pair(&tape, &p, &cfg, [yl, yr], &ctx).unwrap();
        assert_eq!(*tape.value(a.x_hat), *tape.value(b.x_hat));
        assert!(tape.value(a.x_hat).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(tape.shape(a.features), [4, 8, 8]);
    }

    #[test]
    fn disabling_exchange_changes_latent() {
        let cfg = small();
        let p = setup(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let xl = tape.constant(Tensor::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0)));
        let xr = tape.constant(Tensor::from_fn(3, 64, 64, |_, _, _| rng.gen_range(0.0..1.0)));
        let on = encode_image_pair(&tape, &p, &cfg, [xl, xr], &pair_ctx(&tape, 12.0, CrossViewMode::Fused)).unwrap();
        let off = encode_image_pair(&tape, &p, &cfg, [xl, xr], &pair_ctx(&tape, 12.0, CrossViewMode::Off)).unwrap();
        assert_ne!(*tape.value(on[0]), *tape.value(off[0]));
    }

    #[test]
    fn stale_opposite_branch_rejected() {
        let cfg = small();
        let p = setup(&cfg);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(3, 64, 64, 0.5));
        let f = image_encoder_front(&tape, &p, &cfg, x, None).unwrap();
        let d = tape.constant(Tensor::zeros(1, 8, 8));
        let s = tape.param(&p, "fusion.enc.s").unwrap();
        let l = BranchContext { features: f, disparity: d, frame: 3 };
        let r = BranchContext { features: f, disparity: d, frame: 2 };
        assert!(matches!(cross_view_context(&tape, l, r, s, CrossViewMode::Fused), Err(Error::StaleContext { .. })));
    }

    #[test]
    fn temporal_state_resets_on_intra() {
        let mut st = TemporalState::new();
        st.commit([Tensor::zeros(1, 1, 1), Tensor::zeros(1, 1, 1)], [Tensor::zeros(1, 1, 1), Tensor::zeros(1, 1, 1)]);
        st.begin_frame(1, 32);
        assert!(st.disp[0].is_some());
        st.begin_frame(32, 32);
        assert!(st.disp[0].is_none() && st.img[1].is_none());
        assert!(TemporalState::is_intra(0, 32));
        assert!(!TemporalState::is_intra(5, 32));
    }
}
