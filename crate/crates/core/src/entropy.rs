//! Quantization, the hyperprior Gaussian-conditional model with the
//! four-step quadtree context, fixed-point PMFs, and rate estimation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{CustomOp, Tape, Var};
use crate::bitstream::{Pmf, RangeDecoder, RangeEncoder};
use crate::detmath;
use crate::error::{Error, Result};
use crate::fusion::{cross_view_context, init_fusion, BranchContext, CrossViewMode};
use crate::nn;
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;
use crate::transforms::{pool_disparity, CodecConfig, Stream, LATENT_STRIDE};

pub const SYMBOL_LIMIT: i32 = 255;
pub const ALPHABET: usize = (2 * SYMBOL_LIMIT + 1) as usize;
pub const SIGMA_MIN: f64 = 0.04;
pub const SIGMA_MAX: f64 = 256.0;
pub const QUADTREE_STEPS: usize = 4;
/// Likelihood floor used by the differentiable rate terms.
pub const PROB_FLOOR: f64 = 1e-9;

// ----------------------------------------------------------------------
// Quantization
// ----------------------------------------------------------------------

pub fn uniform_noise(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape[0], shape[1], shape[2], |_, _, _| rng.gen_range(-0.5..0.5))
}

/// `y + U(-1/2, 1/2)`, reproducible from `seed`.
pub fn quantize_train(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let noise = tape.constant(uniform_noise(tape.shape(y), seed));
    tape.add(y, noise)
}

/// Integer symbols in `[-255, 255]` for one latent tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolPlane {
    pub shape: [usize; 3],
    pub symbols: Vec<i32>,
    /// Number of elements clipped to the symbol limit.
    pub saturated: usize,
}

impl SymbolPlane {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self { shape, symbols: vec![0; shape[0] * shape[1] * shape[2]], saturated: 0 }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn to_tensor(&self) -> Tensor {
        let [c, h, w] = self.shape;
        Tensor::from_vec(c, h, w, self.symbols.iter().map(|&s| s as f64).collect()).expect("plane shape")
    }
}

/// Round half away from zero, then saturate to `+-255`.
pub fn quantize_infer(y: &Tensor) -> SymbolPlane {
    let mut saturated = 0;
    let symbols = y
        .data()
        .iter()
        .map(|&v| {
            let r = v.round();
            if r > SYMBOL_LIMIT as f64 || r < -SYMBOL_LIMIT as f64 || r.is_nan() {
                saturated += 1;
            }
            if r.is_nan() {
                0
            } else {
                r.clamp(-SYMBOL_LIMIT as f64, SYMBOL_LIMIT as f64) as i32
            }
        })
        .collect();
    SymbolPlane { shape: y.shape(), symbols, saturated }
}

pub fn symbol_index(s: i32) -> usize {
    (s + SYMBOL_LIMIT) as usize
}

pub fn index_symbol(i: usize) -> i32 {
    i as i32 - SYMBOL_LIMIT
}

// ----------------------------------------------------------------------
// Probability model
// ----------------------------------------------------------------------

pub fn clamp_sigma(sigma: f64) -> f64 {
    sigma.clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Gaussian mass of each symbol's unit interval, with the tails folded into
/// the extreme symbols. Entries sum to 1 up to rounding.
pub fn gaussian_probs(mu: f64, sigma: f64) -> Vec<f64> {
    let k = 1.0 / (clamp_sigma(sigma) * std::f64::consts::SQRT_2);
    let mut cdf = [0.0f64; ALPHABET + 1];
    cdf[0] = -0.5;
    cdf[ALPHABET] = 0.5;
    for (j, c) in cdf.iter_mut().enumerate().take(ALPHABET).skip(1) {
        let b = j as f64 - (SYMBOL_LIMIT as f64 + 0.5);
        *c = 0.5 * detmath::erf((b - mu) * k);
    }
    (0..ALPHABET).map(|i| cdf[i + 1] - cdf[i]).collect()
}

/// Probability of symbol `s` before fixed-point quantization.
pub fn gaussian_prob(s: i32, mu: f64, sigma: f64) -> f64 {
    gaussian_probs(mu, sigma)[symbol_index(s)]
}

/// 16-bit PMF for one latent element. Rounding leftovers go to the symbol
/// nearest the mean, which keeps tables mirror-symmetric about `mu = 0`.
pub fn gaussian_pmf(mu: f64, sigma: f64) -> Pmf {
    let anchor = mu.round().clamp(-SYMBOL_LIMIT as f64, SYMBOL_LIMIT as f64);
    let anchor = if anchor.is_nan() { 0 } else { anchor as i32 };
    Pmf::from_probs_anchored(&gaussian_probs(mu, sigma), symbol_index(anchor))
}

/// Probability of the unit interval around `y`, and its partial derivatives
/// with respect to `y` and `sigma` (the derivative w.r.t. `mu` is `-dp/dy`).
pub fn interval_prob(y: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let k = 1.0 / (sigma * std::f64::consts::SQRT_2);
    let u = (y + 0.5 - mu) * k;
    let l = (y - 0.5 - mu) * k;
    let (p, dpu, dpl) = if l >= 0.0 {
        (
            0.5 * (detmath::erfc_pos(l) - detmath::erfc_pos(u)),
            -0.5 * detmath::erfc_pos_deriv(u),
            0.5 * detmath::erfc_pos_deriv(l),
        )
    } else if u <= 0.0 {
        (
            0.5 * (detmath::erfc_pos(-u) - detmath::erfc_pos(-l)),
            -0.5 * detmath::erfc_pos_deriv(-u),
            0.5 * detmath::erfc_pos_deriv(-l),
        )
    } else {
        (0.5 * (detmath::erf(u) - detmath::erf(l)), 0.5 * detmath::erf_deriv(u), -0.5 * detmath::erf_deriv(l))
    };
    let dp_dy = (dpu + dpl) * k;
    let dp_ds = -(dpu * u + dpl * l) / sigma;
    (p, dp_dy, dp_ds)
}

struct GaussianBitsOp;

fn bits_of(p: f64) -> (f64, f64) {
    if p > PROB_FLOOR {
        (-p.log2(), -1.0 / (p * std::f64::consts::LN_2))
    } else {
        (-PROB_FLOOR.log2(), 0.0)
    }
}

impl CustomOp for GaussianBitsOp {
    fn name(&self) -> &'static str {
        "gaussian_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (y, mu, sigma) = (inputs[0], inputs[1], inputs[2]);
        let g = grad.data()[0];
        let [c, h, w] = y.shape();
        let mut gy = Tensor::zeros(c, h, w);
        let mut gs = Tensor::zeros(c, h, w);
        for i in 0..y.len() {
            let (p, dy, ds) = interval_prob(y.data()[i], mu.data()[i], sigma.data()[i]);
            let (_, db) = bits_of(p);
            gy.data_mut()[i] = g * db * dy;
            gs.data_mut()[i] = g * db * ds;
        }
        let gm = gy.map(|v| -v);
        vec![Some(gy), Some(gm), Some(gs)]
    }
}

/// `sum -log2 P(y in [y - 1/2, y + 1/2])` under `N(mu, sigma^2)`.
pub fn gaussian_bits(tape: &Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let (vy, vm, vs) = (tape.value(y), tape.value(mu), tape.value(sigma));
    if vy.shape() != vm.shape() || vy.shape() != vs.shape() {
        return Err(Error::Shape(format!("gaussian_bits {:?} {:?} {:?}", vy.shape(), vm.shape(), vs.shape())));
    }
    let total: f64 = (0..vy.len()).map(|i| bits_of(interval_prob(vy.data()[i], vm.data()[i], vs.data()[i]).0).0).sum();
    Ok(tape.custom(&[y, mu, sigma], Tensor::scalar(total), Box::new(GaussianBitsOp)))
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| detmath::exp(v - m)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Per-channel symbol probabilities of the factorized hyperprior.
pub fn factorized_probs(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.channels()).map(|c| softmax_row(logits.channel(c).data())).collect()
}

pub fn factorized_pmfs(logits: &Tensor) -> Vec<Pmf> {
    factorized_probs(logits).iter().map(|p| Pmf::from_probs(p)).collect()
}

/// Interpolation position of a continuous value on the symbol axis.
fn bin_position(z: f64) -> (usize, usize, f64, bool) {
    let raw = z + SYMBOL_LIMIT as f64;
    let pos = raw.clamp(0.0, (ALPHABET - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(ALPHABET - 1);
    (i0, i1, pos - i0 as f64, raw > 0.0 && raw < (ALPHABET - 1) as f64)
}

struct FactorizedBitsOp;

impl CustomOp for FactorizedBitsOp {
    fn name(&self) -> &'static str {
        "factorized_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (z, logits) = (inputs[0], inputs[1]);
        let g = grad.data()[0];
        let [c, h, w] = z.shape();
        let probs = factorized_probs(logits);
        let mut gz = Tensor::zeros(c, h, w);
        let mut gl = Tensor::zeros(c, 1, ALPHABET);
        for ci in 0..c {
            let pi = &probs[ci];
            let mut gpi = vec![0.0; ALPHABET];
            for y in 0..h {
                for x in 0..w {
                    let (i0, i1, f, inside) = bin_position(z.at(ci, y, x));
                    let p = (1.0 - f) * pi[i0] + f * pi[i1];
                    let (_, db) = bits_of(p);
                    if inside {
                        gz.set(ci, y, x, g * db * (pi[i1] - pi[i0]));
                    }
                    gpi[i0] += g * db * (1.0 - f);
                    gpi[i1] += g * db * f;
                }
            }
            let dot: f64 = pi.iter().zip(&gpi).map(|(a, b)| a * b).sum();
            for j in 0..ALPHABET {
                gl.set(ci, 0, j, pi[j] * (gpi[j] - dot));
            }
        }
        vec![Some(gz), Some(gl)]
    }
}

/// Bits of continuous hyperlatents under the per-channel factorized prior
/// (piecewise-linear CDF over the integer bins).
pub fn factorized_bits(tape: &Tape, z: Var, logits: Var) -> Result<Var> {
    let (vz, vl) = (tape.value(z), tape.value(logits));
    if vl.shape() != [vz.channels(), 1, ALPHABET] {
        return Err(Error::Shape(format!("factorized prior {:?} for hyperlatent {:?}", vl.shape(), vz.shape())));
    }
    let probs = factorized_probs(&vl);
    let [c, h, w] = vz.shape();
    let mut total = 0.0;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (i0, i1, f, _) = bin_position(vz.at(ci, y, x));
                total += bits_of((1.0 - f) * probs[ci][i0] + f * probs[ci][i1]).0;
            }
        }
    }
    Ok(tape.custom(&[z, logits], Tensor::scalar(total), Box::new(FactorizedBitsOp)))
}

/// `sum -log2 p` over explicit probabilities.
pub fn estimate_bits(probs: &[f64]) -> f64 {
    probs.iter().map(|p| -p.log2()).sum()
}

/// Ideal code length of a symbol sequence under fixed-point tables.
pub fn estimate_bits_pmf(symbols: &[usize], pmfs: &[Pmf]) -> f64 {
    symbols.iter().zip(pmfs).map(|(&s, p)| p.bits(s)).sum()
}

/// Bits per pixel with both views of an `h x w` frame in the denominator.
pub fn bits_to_bpp(bits: f64, height: usize, width: usize) -> f64 {
    bits / (2.0 * (height * width) as f64)
}

// ----------------------------------------------------------------------
// Quadtree context partition
// ----------------------------------------------------------------------

/// Group of element `(c, y, x)`: channel half a/b crossed with the 2x2
/// checkerboard phase, in the order (a, even), (b, odd), (a, odd), (b, even).
pub fn quadtree_group(c: usize, y: usize, x: usize, channels: usize) -> usize {
    let first_half = c < channels / 2;
    let even = (y + x) % 2 == 0;
    match (first_half, even) {
        (true, true) => 0,
        (false, false) => 1,
        (true, false) => 2,
        (false, true) => 3,
    }
}

pub fn quadtree_groups(shape: [usize; 3]) -> Vec<u8> {
    let [c, h, w] = shape;
    let mut g = Vec::with_capacity(c * h * w);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                g.push(quadtree_group(ci, y, x, c) as u8);
            }
        }
    }
    g
}

/// Flat element indices in coding order: group, then raster, then channel.
pub fn coding_order(shape: [usize; 3]) -> Vec<usize> {
    let [c, h, w] = shape;
    let mut order = Vec::with_capacity(c * h * w);
    for k in 0..QUADTREE_STEPS {
        order.extend(group_indices(shape, k));
    }
    debug_assert_eq!(order.len(), c * h * w);
    order
}

/// Flat indices of group `k` in raster-then-channel order.
pub fn group_indices(shape: [usize; 3], k: usize) -> Vec<usize> {
    let [c, h, w] = shape;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                if quadtree_group(ci, y, x, c) == k {
                    out.push((ci * h + y) * w + x);
                }
            }
        }
    }
    out
}

/// 1 where the element's group satisfies `keep`, 0 elsewhere.
pub fn group_mask(shape: [usize; 3], keep: impl Fn(usize) -> bool) -> Tensor {
    let [c, h, w] = shape;
    Tensor::from_fn(c, h, w, |ci, y, x| if keep(quadtree_group(ci, y, x, c)) { 1.0 } else { 0.0 })
}

/// Symbols of groups `< k`, zeros elsewhere.
pub fn masked_symbols(plane: &SymbolPlane, k: usize) -> Tensor {
    let [c, h, w] = plane.shape;
    Tensor::from_fn(c, h, w, |ci, y, x| {
        if quadtree_group(ci, y, x, c) < k {
            plane.symbols[(ci * h + y) * w + x] as f64
        } else {
            0.0
        }
    })
}

// ----------------------------------------------------------------------
// Hyperprior and context networks
// ----------------------------------------------------------------------

pub fn ctx_in_channels(cfg: &CodecConfig, stream: Stream) -> usize {
    let cross = if stream == Stream::Image { cfg.c_h } else { 0 };
    cfg.c_h + cfg.latent_channels(stream) + cfg.c_f + cross
}

pub fn init_entropy(p: &mut ParamSet, init: &mut Init, cfg: &CodecConfig) {
    for stream in [Stream::Disparity, Stream::Image] {
        let s = stream.tag();
        let c_y = cfg.latent_channels(stream);
        p.init_conv(init, &format!("{s}.hyp.enc1"), c_y, cfg.c_z, 3, 1);
        p.init_conv(init, &format!("{s}.hyp.enc2"), cfg.c_z, cfg.c_z, 3, 1);
        p.init_conv(init, &format!("{s}.hyp.dec1"), cfg.c_z, 4 * cfg.c_h, 1, 1);
        p.init_conv(init, &format!("{s}.hyp.dec2"), cfg.c_h, 4 * cfg.c_h, 1, 1);
        p.insert(
            format!("{s}.zprior"),
            Tensor::from_fn(cfg.c_z, 1, ALPHABET, |_, _, j| -0.7 * (index_symbol(j) as f64).abs()),
        );
        for k in 0..QUADTREE_STEPS {
            p.init_conv(init, &format!("{s}.ctx{k}.in"), ctx_in_channels(cfg, stream), cfg.c_h, 1, 1);
            nn::init_dw_block(p, init, &format!("{s}.ctx{k}.blk"), cfg.c_h, cfg.c_h);
            p.init_conv(init, &format!("{s}.ctx{k}.out"), cfg.c_h, 2 * c_y, 1, 1);
        }
    }
    init_fusion(p, "fusion.hyp.s");
}

/// Hyperlatent `z` at 1/4 of the latent resolution.
pub fn hyper_encode(tape: &Tape, params: &ParamSet, stream: Stream, y: Var) -> Result<Var> {
    let s = stream.tag();
    let h = nn::conv(tape, params, &format!("{s}.hyp.enc1"), y, 2, 1, 1)?;
    let h = tape.relu(h);
    nn::conv(tape, params, &format!("{s}.hyp.enc2"), h, 2, 1, 1)
}

/// Hyper features at the latent resolution.
pub fn hyper_decode(tape: &Tape, params: &ParamSet, stream: Stream, z_hat: Var) -> Result<Var> {
    let s = stream.tag();
    let h = nn::pointwise(tape, params, &format!("{s}.hyp.dec1"), z_hat)?;
    let h = tape.relu(tape.pixel_shuffle(h, 2)?);
    let h = nn::pointwise(tape, params, &format!("{s}.hyp.dec2"), h)?;
    tape.pixel_shuffle(h, 2)
}

/// Decoder-reproducible side information for one latent.
#[derive(Clone, Copy, Debug)]
pub struct EntropyContext {
    pub hyper: Var,
    /// Previous-frame decoded features pooled to the latent grid.
    pub temporal: Var,
    /// Cross-view hyper features (image stream only).
    pub cross: Option<Var>,
}

/// Previous decoded features (1/8 resolution) pooled to the latent grid, or zeros.
pub fn temporal_context(tape: &Tape, prev: Option<Var>, c_f: usize, latent_hw: (usize, usize)) -> Result<Var> {
    match prev {
        Some(v) => tape.avg_pool(v, LATENT_STRIDE / nn::PATCH),
        None => Ok(tape.constant(Tensor::zeros(c_f, latent_hw.0, latent_hw.1))),
    }
}

/// Opposite-view hyper features brought into each view's frame via the
/// fusion operator at the latent resolution. Zeros when the exchange is off.
pub fn hyper_cross_context(
    tape: &Tape,
    params: &ParamSet,
    hyper: [Var; 2],
    d_hat: [Var; 2],
    frame: usize,
    mode: CrossViewMode,
) -> Result<[Var; 2]> {
    if mode == CrossViewMode::Off {
        let [c, h, w] = tape.shape(hyper[0]);
        let z = tape.constant(Tensor::zeros(c, h, w));
        return Ok([z, z]);
    }
    let s = tape.param(params, "fusion.hyp.s")?;
    let dl = pool_disparity(tape, d_hat[0], LATENT_STRIDE)?;
    let dr = pool_disparity(tape, d_hat[1], LATENT_STRIDE)?;
    let l = BranchContext { features: hyper[0], disparity: dl, frame };
    let r = BranchContext { features: hyper[1], disparity: dr, frame };
    let (a, b) = cross_view_context(tape, l, r, s, mode)?;
    Ok([a, b])
}

/// `(mu, sigma)` for quadtree step `k` given the latents of earlier groups.
pub fn entropy_parameters(
    tape: &Tape,
    params: &ParamSet,
    stream: Stream,
    ctx: &EntropyContext,
    masked_y: Var,
    k: usize,
) -> Result<(Var, Var)> {
    if k >= QUADTREE_STEPS {
        return Err(Error::InvalidArgument(format!("quadtree step {k} out of range")));
    }
    let s = stream.tag();
    let c_y = tape.shape(masked_y)[0];
    let mut inputs = vec![ctx.hyper, masked_y, ctx.temporal];
    if stream == Stream::Image {
        let cross = match ctx.cross {
            Some(v) => v,
            None => {
                let [c, h, w] = tape.shape(ctx.hyper);
                tape.constant(Tensor::zeros(c, h, w))
            }
        };
        inputs.push(cross);
    }
    let x = tape.concat(&inputs)?;
    let h = tape.relu(nn::pointwise(tape, params, &format!("{s}.ctx{k}.in"), x)?);
    let h = nn::dw_block(tape, params, &format!("{s}.ctx{k}.blk"), h)?;
    let out = nn::pointwise(tape, params, &format!("{s}.ctx{k}.out"), h)?;
    let mu = tape.slice_channels(out, 0, c_y)?;
    let raw = tape.slice_channels(out, c_y, c_y)?;
    let sigma = tape.clamp(tape.exp(raw), SIGMA_MIN, SIGMA_MAX);
    Ok((mu, sigma))
}

/// Per-element `(mu, sigma)` assembled from the four steps, each fed the
/// decoder-visible latents `y_ctx` of the earlier groups.
pub fn latent_distribution(
    tape: &Tape,
    params: &ParamSet,
    stream: Stream,
    ctx: &EntropyContext,
    y_ctx: Var,
) -> Result<(Var, Var)> {
    let shape = tape.shape(y_ctx);
    let mut mu_acc: Option<Var> = None;
    let mut sg_acc: Option<Var> = None;
    for k in 0..QUADTREE_STEPS {
        let before = tape.constant(group_mask(shape, |g| g < k));
        let masked = tape.mul(y_ctx, before)?;
        let (mu, sigma) = entropy_parameters(tape, params, stream, ctx, masked, k)?;
        let sel = tape.constant(group_mask(shape, |g| g == k));
        let m = tape.mul(mu, sel)?;
        let s = tape.mul(sigma, sel)?;
        mu_acc = Some(match mu_acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
        sg_acc = Some(match sg_acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    Ok((mu_acc.unwrap(), sg_acc.unwrap()))
}

// ----------------------------------------------------------------------
// Entropy coding of symbol planes
// ----------------------------------------------------------------------

/// Factorized-prior coding of a hyperlatent plane in channel-major raster order.
pub fn encode_hyper(logits: &Tensor, plane: &SymbolPlane) -> (Vec<u8>, f64) {
    let pmfs = factorized_pmfs(logits);
    let n = plane.shape[1] * plane.shape[2];
    let mut enc = RangeEncoder::new();
    let mut bits = 0.0;
    for (i, &s) in plane.symbols.iter().enumerate() {
        let pmf = &pmfs[i / n];
        enc.encode(pmf, symbol_index(s));
        bits += pmf.bits(symbol_index(s));
    }
    (enc.finish(), bits)
}

pub fn decode_hyper(logits: &Tensor, bytes: &[u8], shape: [usize; 3]) -> Result<SymbolPlane> {
    let pmfs = factorized_pmfs(logits);
    let n = shape[1] * shape[2];
    let mut dec = RangeDecoder::new(bytes)?;
    let mut plane = SymbolPlane::zeros(shape);
    for i in 0..plane.len() {
        plane.symbols[i] = index_symbol(dec.decode(&pmfs[i / n])?);
    }
    if !dec.is_exhausted() {
        return Err(Error::Corrupt("unused bytes in hyperlatent payload".into()));
    }
    Ok(plane)
}

fn step_pmfs(
    tape: &Tape,
    params: &ParamSet,
    stream: Stream,
    ctx: &EntropyContext,
    plane: &SymbolPlane,
    k: usize,
    idx: &[usize],
) -> Result<Vec<Pmf>> {
    let masked = tape.constant(masked_symbols(plane, k));
    let (mu, sigma) = entropy_parameters(tape, params, stream, ctx, masked, k)?;
    let (mu, sigma) = (tape.value(mu), tape.value(sigma));
    Ok(idx.iter().map(|&i| gaussian_pmf(mu.data()[i], sigma.data()[i])).collect())
}

/// Range-codes a latent plane group by group. Returns the payload and the
/// ideal code length under the same tables.
pub fn encode_latent(
    tape: &Tape,
    params: &ParamSet,
    stream: Stream,
    ctx: &EntropyContext,
    plane: &SymbolPlane,
) -> Result<(Vec<u8>, f64)> {
    let mut enc = RangeEncoder::new();
    let mut bits = 0.0;
    for k in 0..QUADTREE_STEPS {
        let idx = group_indices(plane.shape, k);
        let pmfs = step_pmfs(tape, params, stream, ctx, plane, k, &idx)?;
        for (&i, pmf) in idx.iter().zip(&pmfs) {
            let s = symbol_index(plane.symbols[i]);
            enc.encode(pmf, s);
            bits += pmf.bits(s);
        }
    }
    Ok((enc.finish(), bits))
}

pub fn decode_latent(
    tape: &Tape,
    params: &ParamSet,
    stream: Stream,
    ctx: &EntropyContext,
    bytes: &[u8],
    shape: [usize; 3],
) -> Result<SymbolPlane> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut plane = SymbolPlane::zeros(shape);
    for k in 0..QUADTREE_STEPS {
        let idx = group_indices(shape, k);
        let pmfs = step_pmfs(tape, params, stream, ctx, &plane, k, &idx)?;
        for (&i, pmf) in idx.iter().zip(&pmfs) {
            plane.symbols[i] = index_symbol(dec.decode(pmf)?);
        }
    }
    if !dec.is_exhausted() {
        return Err(Error::Corrupt("unused bytes in latent payload".into()));
    }
    Ok(plane)
}
