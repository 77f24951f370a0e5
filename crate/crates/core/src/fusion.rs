//! Disparity compensation, left-right consistency confidence, and the
//! confidence-weighted cross-view feature blend.
//!
//! Consistency is evaluated on signed displacements `s_V = sign(V) * d_V`
//! (see [`View::displacement_sign`]). With that convention the residual is
//! `s_self - warp(-s_other, d_self)`, which is zero wherever the two decoded
//! disparity maps agree.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{warp, DisparityMap, View};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// How the two branches exchange information.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CrossViewMode {
    /// Confidence-weighted blend of own and warped opposite features.
    #[default]
    Fused,
    /// Opposite features are warped and taken as-is (`W == 1`).
    HardWarp,
    /// No cross-view exchange: each branch only sees its own view.
    Off,
}

impl CrossViewMode {
    pub fn code(self) -> u8 {
        match self {
            CrossViewMode::Fused => 0,
            CrossViewMode::HardWarp => 1,
            CrossViewMode::Off => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(CrossViewMode::Fused),
            1 => Some(CrossViewMode::HardWarp),
            2 => Some(CrossViewMode::Off),
            _ => None,
        }
    }
}

/// Per-pixel fusion weights in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub weights: Tensor,
    pub view: View,
}

/// `W = exp(-r^2 / S^2)` with `S = exp(s_raw)`. `d_self`, `d_other` are
/// `(1, h, w)` disparity magnitudes; `s_raw` is `(1, 1, 1)`.
pub fn consistency_confidence(tape: &Tape, d_self: Var, d_other: Var, view: View, s_raw: Var) -> Result<Var> {
    let s_self = tape.scale(d_self, view.displacement_sign());
    let neg_s_other = tape.scale(d_other, -view.other().displacement_sign());
    let predicted = warp(tape, neg_s_other, d_self, view)?;
    let r = tape.sub(s_self, predicted)?;
    let r2 = tape.square(r);
    let inv_s2 = tape.exp(tape.scale(s_raw, -2.0));
    let q = tape.mul_bcast(r2, inv_s2)?;
    Ok(tape.exp(tape.neg(q)))
}

/// Plain-tensor convenience wrapper around [`consistency_confidence`].
pub fn confidence_map(d_self: &DisparityMap, d_other: &DisparityMap, s: f64) -> Result<ConfidenceMap> {
    if s <= 0.0 {
        return Err(Error::InvalidArgument("kernel width must be positive".into()));
    }
    let tape = Tape::new();
    let a = tape.constant(d_self.values.clone());
    let b = tape.constant(d_other.values.clone());
    let sr = tape.constant(Tensor::scalar(s.ln()));
    let w = consistency_confidence(&tape, a, b, d_self.view, sr)?;
    Ok(ConfidenceMap { weights: (*tape.value(w)).clone(), view: d_self.view })
}

/// `W * warp(other, d_self) + (1 - W) * self`, with `W` broadcast over channels.
pub fn fuse_features(tape: &Tape, self_feat: Var, other_feat: Var, d_self: Var, view: View, w: Var) -> Result<Var> {
    if tape.shape(self_feat) != tape.shape(other_feat) {
        return Err(Error::Shape(format!(
            "fuse_features: {:?} vs {:?}",
            tape.shape(self_feat),
            tape.shape(other_feat)
        )));
    }
    let warped = warp(tape, other_feat, d_self, view)?;
    let a = tape.mul_bcast(warped, w)?;
    let one_minus = tape.affine(w, -1.0, 1.0);
    let b = tape.mul_bcast(self_feat, one_minus)?;
    tape.add(a, b)
}

/// One branch's half of the exchange: features, the disparity at the
/// features' resolution, and the frame it belongs to.
#[derive(Clone, Copy, Debug)]
pub struct BranchContext {
    pub features: Var,
    pub disparity: Var,
    pub frame: usize,
}

/// Fused features for `view` given both branches.
pub fn fuse_one(
    tape: &Tape,
    own: BranchContext,
    opposite: BranchContext,
    view: View,
    s_raw: Var,
    mode: CrossViewMode,
) -> Result<Var> {
    if own.frame != opposite.frame {
        return Err(Error::StaleContext { expected: own.frame, got: opposite.frame });
    }
    match mode {
        CrossViewMode::Off => Ok(own.features),
        CrossViewMode::HardWarp => warp(tape, opposite.features, own.disparity, view),
        CrossViewMode::Fused => {
            let w = consistency_confidence(tape, own.disparity, opposite.disparity, view, s_raw)?;
            fuse_features(tape, own.features, opposite.features, own.disparity, view, w)
        }
    }
}

/// Symmetric exchange between the left and right branches.
pub fn cross_view_context(
    tape: &Tape,
    left: BranchContext,
    right: BranchContext,
    s_raw: Var,
    mode: CrossViewMode,
) -> Result<(Var, Var)> {
    let l = fuse_one(tape, left, right, View::L, s_raw, mode)?;
    let r = fuse_one(tape, right, left, View::R, s_raw, mode)?;
    Ok((l, r))
}

pub fn init_fusion(p: &mut ParamSet, name: &str) {
    // S = exp(0) = 1
    p.insert(name, Tensor::scalar(0.0));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane_pair(d: f64, w: usize) -> (DisparityMap, DisparityMap) {
        (
            DisparityMap::new(Tensor::full(1, 3, w, d), View::L),
            DisparityMap::new(Tensor::full(1, 3, w, d), View::R),
        )
    }

    #[test]
    fn consistent_plane_has_unit_confidence() {
        let (l, r) = plane_pair(2.0, 10);
        let wl = confidence_map(&l, &r, 1.0).unwrap();
        let wr = confidence_map(&r, &l, 1.0).unwrap();
        assert!(wl.weights.data().iter().all(|&v| v == 1.0));
        assert!(wr.weights.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn residual_equal_to_kernel_width() {
        // Zero warp, d_self = 0.7, d_other = 0: |r| = 0.7 = S.
        let l = DisparityMap::new(Tensor::full(1, 1, 1, 0.7), View::L);
        let r = DisparityMap::new(Tensor::full(1, 1, 1, 0.0), View::R);
        let tape = Tape::new();
        let a = tape.constant(l.values.clone());
        let b = tape.constant(r.values.clone());
        // d_self = 0.7 shifts the sample but the 1-pixel map clamps, so r = -0.7.
        let s = tape.constant(Tensor::scalar(0.7f64.ln()));
        let w = consistency_confidence(&tape, a, b, View::L, s).unwrap();
        assert!((tape.value(w).data()[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn occlusion_band_gets_low_confidence() {
        // Background plane at 2 px, foreground square at 10 px in the middle.
        // Right-view pixels just left of the square see background, but their
        // left match lands on the foreground, so the check fails there.
        let w = 40;
        let fg = |x: usize, shift: f64| (x as f64) >= 15.0 + shift && (x as f64) < 25.0 + shift;
        let dl = Tensor::from_fn(1, 1, w, |_, _, x| if fg(x, 0.0) { 10.0 } else { 2.0 });
        let dr = Tensor::from_fn(1, 1, w, |_, _, x| if fg(x, -10.0) { 10.0 } else { 2.0 });
        let l = DisparityMap::new(dl, View::L);
        let r = DisparityMap::new(dr, View::R);
        let wr = confidence_map(&r, &l, 1.0).unwrap();
        // Right pixels 15..23 see background (d=2) but x+2 lands on the left foreground.
        for x in 15..23 {
            assert!(wr.weights.at(0, 0, x) < 0.01, "x={x} w={}", wr.weights.at(0, 0, x));
        }
        // Far from the square everything agrees.
        for x in 30..38 {
            assert_eq!(wr.weights.at(0, 0, x), 1.0);
        }
    }

    #[test]
    fn fuse_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(3, 4, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(3, 4, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let d = tape.constant(Tensor::full(1, 4, 6, 1.5));
        let ones = tape.constant(Tensor::full(1, 4, 6, 1.0));
        let out = fuse_features(&tape, av, bv, d, View::L, ones).unwrap();
        let warped = warp(&tape, bv, d, View::L).unwrap();
        assert_eq!(*tape.value(out), *tape.value(warped));

        let tiny = tape.constant(Tensor::full(1, 4, 6, 1e-12));
        let out = fuse_features(&tape, av, bv, d, View::L, tiny).unwrap();
        assert!(tape.value(out).max_abs_diff(&a) < 1e-11);

        let half = tape.constant(Tensor::full(1, 4, 6, 0.5));
        let zero = tape.constant(Tensor::zeros(1, 4, 6));
        let out = fuse_features(&tape, av, bv, zero, View::R, half).unwrap();
        let mid = a.zip_map(&b, |x, y| (x + y) / 2.0).unwrap();
        assert_eq!(*tape.value(out), mid);

        let wrong = tape.constant(Tensor::zeros(2, 4, 6));
        assert!(fuse_features(&tape, av, wrong, d, View::L, half).is_err());
    }

    #[test]
    fn fused_output_is_convex_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(2, 5, 9, |_, _, _| rng.gen_range(-1.0..1.0)));
        let b = tape.constant(Tensor::from_fn(2, 5, 9, |_, _, _| rng.gen_range(-1.0..1.0)));
        let dl = tape.constant(Tensor::from_fn(1, 5, 9, |_, _, _| rng.gen_range(0.0..3.0)));
        let dr = tape.constant(Tensor::from_fn(1, 5, 9, |_, _, _| rng.gen_range(0.0..3.0)));
        let s = tape.constant(Tensor::scalar(0.0));
        let w = consistency_confidence(&tape, dl, dr, View::L, s).unwrap();
        assert!(tape.value(w).data().iter().all(|&v| v > 0.0 && v <= 1.0));
        let out = tape.value(fuse_features(&tape, a, b, dl, View::L, w).unwrap());
        let warped = tape.value(warp(&tape, b, dl, View::L).unwrap());
        let own = tape.value(a);
        for i in 0..out.len() {
            let (lo, hi) = (own.data()[i].min(warped.data()[i]), own.data()[i].max(warped.data()[i]));
            assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn zero_disparity_residual_is_difference() {
        let l = DisparityMap::new(Tensor::from_vec(1, 1, 3, vec![0.0, 0.0, 0.0]).unwrap(), View::L);
        let r = DisparityMap::new(Tensor::from_vec(1, 1, 3, vec![0.5, 1.0, 0.0]).unwrap(), View::R);
        let w = confidence_map(&l, &r, 1.0).unwrap();
        for (x, d) in [0.5f64, 1.0, 0.0].iter().enumerate() {
            assert!((w.weights.at(0, 0, x) - (-(d * d)).exp()).abs() < 1e-12);
        }
    }

    fn exchange_setup(seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fl = Tensor::from_fn(2, 3, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let fr = Tensor::from_fn(2, 3, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let dl = Tensor::from_fn(1, 3, 6, |_, _, _| rng.gen_range(0.1..0.9) + 1.0);
        let dr = Tensor::from_fn(1, 3, 6, |_, _, _| rng.gen_range(0.1..0.9) + 1.0);
        (fl, fr, dl, dr)
    }

    #[test]
    fn identical_views_zero_disparity() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::from_fn(2, 3, 4, |c, y, x| (c + y * x) as f64));
        let d = tape.constant(Tensor::zeros(1, 3, 4));
        let s = tape.constant(Tensor::scalar(0.0));
        let ctx = BranchContext { features: f, disparity: d, frame: 0 };
        let (l, r) = cross_view_context(&tape, ctx, ctx, s, CrossViewMode::Fused).unwrap();
        assert_eq!(*tape.value(l), *tape.value(f));
        assert_eq!(*tape.value(r), *tape.value(f));
    }

    #[test]
    fn swapping_views_swaps_outputs() {
        // Mirroring the images and swapping L/R maps the problem onto itself.
        let (fl, fr, dl, dr) = exchange_setup(3);
        let tape = Tape::new();
        let s = tape.constant(Tensor::scalar(0.2));
        let c = |f: &Tensor, d: &Tensor| BranchContext { features: tape.constant(f.clone()), disparity: tape.constant(d.clone()), frame: 4 };
        let (ol, or) = cross_view_context(&tape, c(&fl, &dl), c(&fr, &dr), s, CrossViewMode::Fused).unwrap();
        let (ml, mr) =
            cross_view_context(&tape, c(&fr.flip_w(), &dr.flip_w()), c(&fl.flip_w(), &dl.flip_w()), s, CrossViewMode::Fused)
                .unwrap();
        assert!(tape.value(ml).flip_w().max_abs_diff(&tape.value(or)) < 1e-12);
        assert!(tape.value(mr).flip_w().max_abs_diff(&tape.value(ol)) < 1e-12);
    }

    #[test]
    fn stale_frame_rejected() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(1, 2, 2));
        let d = tape.constant(Tensor::zeros(1, 2, 2));
        let s = tape.constant(Tensor::scalar(0.0));
        let a = BranchContext { features: f, disparity: d, frame: 1 };
        let b = BranchContext { features: f, disparity: d, frame: 2 };
        assert!(matches!(cross_view_context(&tape, a, b, s, CrossViewMode::Fused), Err(Error::StaleContext { .. })));
    }

    #[test]
    fn exchange_fd_gradient_including_kernel_width() {
        let (fl, fr, dl, dr) = exchange_setup(5);
        let s0 = Tensor::scalar(-0.3);
        let run = |xs: &[Tensor]| {
            let tape = Tape::new();
            let v: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
            let l = BranchContext { features: v[0], disparity: v[2], frame: 0 };
            let r = BranchContext { features: v[1], disparity: v[3], frame: 0 };
            let (a, b) = cross_view_context(&tape, l, r, v[4], CrossViewMode::Fused).unwrap();
            let a2 = tape.square(a);
            let b2 = tape.mul(b, b).unwrap();
            let s = tape.add(a2, b2).unwrap();
            let loss = tape.sum(s);
            let val = tape.value(loss).data()[0];
            let g = tape.backward(loss).unwrap();
            (val, v.iter().map(|&x| g.wrt(x).unwrap().clone()).collect::<Vec<_>>())
        };
        let inputs = vec![fl, fr, dl, dr, s0];
        let (_, grads) = run(&inputs);
        for i in 0..inputs.len() {
            let fd = finite_difference(&inputs[i], 1e-3, |x| {
                let mut xs = inputs.clone();
                xs[i] = x.clone();
                run(&xs).0
            });
            let e = max_rel_err(&grads[i], &fd, 1e-6);
            assert!(e < 1e-4, "input {i}: {e}");
        }
        assert!(grads[4].data()[0].abs() > 1e-6, "kernel width receives gradient");
    }
}
