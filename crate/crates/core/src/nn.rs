//! Layer helpers on top of the tape: named convolutions, depthwise-separable
//! blocks, patchify, and upsampling.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{Init, ParamSet};
use crate::tensor::Tensor;

/// Convolution reading `{name}.w` / `{name}.b` from `params`.
pub fn conv(
    tape: &Tape,
    params: &ParamSet,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.w"))?;
    let b = tape.param(params, &format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), stride, pad, groups)
}

/// 1x1 convolution.
pub fn pointwise(tape: &Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    conv(tape, params, name, x, 1, 0, 1)
}

pub const DW_KERNEL: usize = 3;

/// Registers a depthwise-separable block on `c_in -> c_out` channels.
pub fn init_dw_block(p: &mut ParamSet, init: &mut Init, name: &str, c_in: usize, c_out: usize) {
    p.init_conv(init, &format!("{name}.dw"), c_in, c_in, DW_KERNEL, c_in);
    p.init_conv(init, &format!("{name}.pw"), c_in, c_out, 1, 1);
}

/// Depthwise `k x k` conv, ReLU, pointwise conv; residual skip when the
/// channel counts match and `residual` is set.
pub fn dw_block_with(tape: &Tape, params: &ParamSet, name: &str, x: Var, residual: bool) -> Result<Var> {
    let c_in = tape.shape(x)[0];
    let h = conv(tape, params, &format!("{name}.dw"), x, 1, DW_KERNEL / 2, c_in)?;
    let h = tape.relu(h);
    let y = pointwise(tape, params, &format!("{name}.pw"), h)?;
    if residual && tape.shape(y) == tape.shape(x) {
        tape.add(x, y)
    } else {
        Ok(y)
    }
}

pub fn dw_block(tape: &Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    dw_block_with(tape, params, name, x, true)
}

pub fn init_dw_stack(p: &mut ParamSet, init: &mut Init, name: &str, c: usize, n: usize) {
    for i in 0..n {
        init_dw_block(p, init, &format!("{name}.{i}"), c, c);
    }
}

pub fn dw_stack(tape: &Tape, params: &ParamSet, name: &str, mut x: Var, n: usize) -> Result<Var> {
    for i in 0..n {
        x = dw_block(tape, params, &format!("{name}.{i}"), x)?;
    }
    Ok(x)
}

pub const PATCH: usize = 8;

pub fn init_patchify(p: &mut ParamSet, init: &mut Init, name: &str, c_in: usize, c_out: usize) {
    p.init_conv(init, name, c_in * PATCH * PATCH, c_out, 1, 1);
}

/// 8x8 space-to-depth followed by a learned 1x1 projection.
pub fn patchify(tape: &Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let s = tape.space_to_depth(x, PATCH)?;
    pointwise(tape, params, name, s)
}

/// Source coordinate grids for bilinear upsampling by `factor` with
/// half-pixel alignment: `src = (dst + 0.5) / factor - 0.5`.
pub fn upsample_grid(h: usize, w: usize, factor: usize) -> (Tensor, Tensor) {
    let f = factor as f64;
    let xs = Tensor::from_fn(1, h * factor, w * factor, |_, _, x| (x as f64 + 0.5) / f - 0.5);
    let ys = Tensor::from_fn(1, h * factor, w * factor, |_, y, _| (y as f64 + 0.5) / f - 0.5);
    (xs, ys)
}

pub fn upsample_bilinear(tape: &Tape, x: Var, factor: usize) -> Result<Var> {
    if factor == 1 {
        return Ok(x);
    }
    let [_, h, w] = tape.shape(x);
    let (xs, ys) = upsample_grid(h, w, factor);
    let xs = tape.constant(xs);
    let ys = tape.constant(ys);
    tape.bilinear_sample(x, xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dw_block_zero_input_gives_bias_path() {
        let mut p = ParamSet::new();
        let mut init = Init::new(1);
        init_dw_block(&mut p, &mut init, "blk", 2, 3);
        p.set_bias("blk.dw", &[0.5, -0.25]);
        p.set_bias("blk.pw", &[0.1, 0.2, 0.3]);
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 4, 4));
        let y = tape.value(dw_block(&tape, &p, "blk", x).unwrap());
        // relu(dw bias) = (0.5, 0); output = pw.w[:,0] * 0.5 + pw.b
        let w = p.get("blk.pw.w").unwrap();
        for c in 0..3 {
            let expect = w.at(c, 0, 0) * 0.5 + [0.1, 0.2, 0.3][c];
            for v in y.channel(c).data() {
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dw_block_identity_init() {
        let c = 3;
        let mut p = ParamSet::new();
        let mut dw = Tensor::zeros(c, 1, 9);
        for ci in 0..c {
            dw.set(ci, 0, 4, 1.0);
        }
        let mut pw = Tensor::zeros(c, c, 1);
        for ci in 0..c {
            pw.set(ci, ci, 0, 1.0);
        }
        p.insert("b.dw.w", dw);
        p.insert("b.dw.b", Tensor::zeros(c, 1, 1));
        p.insert("b.pw.w", pw);
        p.insert("b.pw.b", Tensor::zeros(c, 1, 1));
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xin = Tensor::from_fn(c, 5, 5, |_, _, _| rng.gen_range(0.0..1.0));
        let x = tape.constant(xin.clone());
        let y = dw_block_with(&tape, &p, "b", x, false).unwrap();
        assert_eq!(*tape.value(y), xin);
    }

    #[test]
    fn dw_block_fd_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let mut init = Init::new(9);
        init_dw_block(&mut p, &mut init, "b", 3, 3);
        p.set_bias("b.dw", &[0.3, -0.2, 0.4]);
        let xin = rand_tensor(&mut rng, 3, 5, 5);
        let eval = |p: &ParamSet, x: &Tensor| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = dw_block(&tape, p, "b", xv).unwrap();
            let y = tape.square(y);
            let l = tape.sum(y);
            (tape, xv, l)
        };
        let (tape, xv, l) = eval(&p, &xin);
        let grads = tape.backward(l).unwrap();
        let gx = grads.wrt(xv).unwrap().clone();
        let fd = finite_difference(&xin, 1e-3, |x| eval(&p, x).0.value(eval(&p, x).2).data()[0]);
        assert!(max_rel_err(&gx, &fd, 1e-6) < 1e-4);
        let pg = grads.for_params(&p);
        let w0 = p.get("b.dw.w").unwrap().clone();
        let fdw = finite_difference(&w0, 1e-3, |w| {
            let mut q = p.clone();
            *q.get_mut("b.dw.w").unwrap() = w.clone();
            let (t, _, l) = eval(&q, &xin);
            let v = t.value(l).data()[0];
            v
        });
        assert!(max_rel_err(&pg["b.dw.w"], &fdw, 1e-6) < 1e-4);
    }

    #[test]
    fn upsample_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(2, 3, 3, 0.7));
        let y = tape.value(upsample_bilinear(&tape, x, 4).unwrap());
        assert_eq!(y.shape(), [2, 12, 12]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    }
}
