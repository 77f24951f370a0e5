//! Taped reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Tape::backward`] walks the tape in reverse and returns
//! first-order gradients. Parameters enter through [`Tape::param`] and are
//! cached by name, so a parameter used twice accumulates its gradient.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::detmath;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Relu,
    Abs,
    Square,
}

/// Operation implemented outside this module. `backward` returns one
/// optional gradient per input, in input order.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    Conv2d { input: usize, weight: usize, bias: Option<usize>, stride: usize, pad: usize, groups: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulBcast(usize, usize),
    AddBcast(usize, usize),
    Affine { a: usize, scale: f64 },
    Unary { a: usize, kind: Unary },
    Clamp { a: usize, lo: f64, hi: f64 },
    RoundSte(usize),
    L2NormChannels(usize),
    PixelShuffle { a: usize, r: usize },
    SpaceToDepth { a: usize, r: usize },
    Concat(Vec<usize>),
    Slice { a: usize, start: usize },
    BilinearSample { input: usize, xs: usize, ys: usize },
    AvgPool { a: usize, r: usize },
    Sum(usize),
    Mean(usize),
    ChannelSum(usize),
    SoftmaxChannels(usize),
    FlipW(usize),
    Gather { sources: Vec<(usize, Vec<usize>)> },
    Custom { inputs: Vec<usize>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<String, Var>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<(String, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for every parameter in `params`; unused ones are zero.
    pub fn for_params(&self, params: &ParamSet) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, t) in params.iter() {
            let [c, h, w] = t.shape();
            out.insert(name.to_string(), Tensor::zeros(c, h, w));
        }
        for (name, v) in &self.param_vars {
            if let (Some(g), Some(slot)) = (self.wrt(*v), out.get_mut(name)) {
                slot.add_assign(g);
            }
        }
        out
    }
}

fn shape_err(op: &str, a: [usize; 3], b: [usize; 3]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (n + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// Kernel size of a weight tensor stored as `(C_out, C_in / groups, k * k)`.
fn kernel_size(w: &Tensor) -> Option<usize> {
    let kk = w.width();
    let k = (kk as f64).sqrt().round() as usize;
    (k * k == kk).then_some(k)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|&v| nodes[v].needs_grad)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Differentiable leaf (an input we want gradients for).
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn detach(&self, v: Var) -> Var {
        let t = (*self.value(v)).clone();
        self.constant(t)
    }

    pub fn param(&self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(v) = self.params.borrow().get(name) {
            return Ok(*v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(t, Op::Param, true);
        self.params.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn custom(&self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        self.push(output, Op::Custom { inputs: idx, op }, needs)
    }

    // ------------------------------------------------------------------
    // Convolution
    // ------------------------------------------------------------------

    /// Cross-correlation with zero padding. `weight` is `(C_out, C_in / groups, k*k)`,
    /// `bias` is `(C_out, 1, 1)`.
    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = bias.map(|b| self.value(b));
        let out = conv2d_forward(&x, &w, b.as_deref(), stride, pad, groups)?;
        let mut deps = vec![input.0, weight.0];
        if let Some(b) = bias {
            deps.push(b.0);
        }
        let needs = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d { input: input.0, weight: weight.0, bias: bias.map(|b| b.0), stride, pad, groups },
            needs,
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let out = va.zip_map(&vb, f)?;
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(out, op, needs))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn bcast_check(&self, a: Var, m: Var, name: &str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let va = self.value(a);
        let vm = self.value(m);
        let (sa, sm) = (va.shape(), vm.shape());
        if (0..3).any(|i| sm[i] != 1 && sm[i] != sa[i]) {
            return Err(shape_err(name, sa, sm));
        }
        Ok((va, vm))
    }

    /// `a * m` where every axis of `m` is either 1 or equal to the matching axis of `a`.
    pub fn mul_bcast(&self, a: Var, m: Var) -> Result<Var> {
        let (va, vm) = self.bcast_check(a, m, "mul_bcast")?;
        let out = bcast_apply(&va, &vm, |x, y| x * y);
        let needs = self.needs(&[a.0, m.0]);
        Ok(self.push(out, Op::MulBcast(a.0, m.0), needs))
    }

    /// `a + m` with the broadcasting rule of [`Tape::mul_bcast`].
    pub fn add_bcast(&self, a: Var, m: Var) -> Result<Var> {
        let (va, vm) = self.bcast_check(a, m, "add_bcast")?;
        let out = bcast_apply(&va, &vm, |x, y| x + y);
        let needs = self.needs(&[a.0, m.0]);
        Ok(self.push(out, Op::AddBcast(a.0, m.0), needs))
    }

    /// `scale * a + shift`.
    pub fn affine(&self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|v| scale * v + shift);
        let needs = self.needs(&[a.0]);
        self.push(out, Op::Affine { a: a.0, scale }, needs)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => detmath::sigmoid,
            Unary::Tanh => detmath::tanh,
            Unary::Exp => detmath::exp,
            Unary::Relu => |v| v.max(0.0),
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
        };
        let out = self.value(a).map(f);
        let needs = self.needs(&[a.0]);
        self.push(out, Op::Unary { a: a.0, kind }, needs)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }
    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        let needs = self.needs(&[a.0]);
        self.push(out, Op::Clamp { a: a.0, lo, hi }, needs)
    }

    /// Round half away from zero with an identity (straight-through) gradient.
    pub fn round_ste(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::round);
        let needs = self.needs(&[a.0]);
        self.push(out, Op::RoundSte(a.0), needs)
    }

    /// Divide each per-pixel channel vector by its Euclidean norm (floored at 1e-12).
    pub fn l2norm_channels(&self, a: Var) -> Var {
        let va = self.value(a);
        let [c, h, w] = va.shape();
        let mut out = Tensor::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                let n = l2_at(&va, y, x);
                for ci in 0..c {
                    out.set(ci, y, x, va.at(ci, y, x) / n);
                }
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(out, Op::L2NormChannels(a.0), needs)
    }

    // ------------------------------------------------------------------
    // Layout
    // ------------------------------------------------------------------

    /// `(C, H, W) -> (C / r^2, rH, rW)`.
    pub fn pixel_shuffle(&self, a: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(&self.value(a), r)?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::PixelShuffle { a: a.0, r }, needs))
    }

    /// `(C, H, W) -> (C r^2, H / r, W / r)`, the exact inverse of [`Tape::pixel_shuffle`].
    pub fn space_to_depth(&self, a: Var, r: usize) -> Result<Var> {
        let out = space_to_depth(&self.value(a), r)?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::SpaceToDepth { a: a.0, r }, needs))
    }

    pub fn concat(&self, vars: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = vars.iter().map(|v| self.value(*v)).collect();
        let [_, h, w] = vals[0].shape();
        let mut data = Vec::new();
        let mut c = 0;
        for v in &vals {
            if v.height() != h || v.width() != w {
                return Err(shape_err("concat", vals[0].shape(), v.shape()));
            }
            c += v.channels();
            data.extend_from_slice(v.data());
        }
        let idx: Vec<usize> = vars.iter().map(|v| v.0).collect();
        let needs = self.needs(&idx);
        Ok(self.push(Tensor::from_vec(c, h, w, data)?, Op::Concat(idx), needs))
    }

    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let [c, h, w] = va.shape();
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} out of {c} channels")));
        }
        let n = h * w;
        let out = Tensor::from_vec(len, h, w, va.data()[start * n..(start + len) * n].to_vec())?;
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::Slice { a: a.0, start }, needs))
    }

    pub fn flip_w(&self, a: Var) -> Var {
        let out = self.value(a).flip_w();
        let needs = self.needs(&[a.0]);
        self.push(out, Op::FlipW(a.0), needs)
    }

    /// Gather pixel columns: each source `(C, H, W)` contributes the listed
    /// flat pixel indices `y * W + x`; the result is `(C, 1, total)`.
    pub fn gather_pixels(&self, sources: &[(Var, Vec<usize>)]) -> Result<Var> {
        let c = self.shape(sources[0].0)[0];
        let total: usize = sources.iter().map(|(_, i)| i.len()).sum();
        let mut out = Tensor::zeros(c, 1, total);
        let mut off = 0;
        for (v, idx) in sources {
            let t = self.value(*v);
            if t.channels() != c {
                return Err(shape_err("gather_pixels", [c, 0, 0], t.shape()));
            }
            let n = t.height() * t.width();
            for ci in 0..c {
                for (j, &p) in idx.iter().enumerate() {
                    out.set(ci, 0, off + j, t.data()[ci * n + p]);
                }
            }
            off += idx.len();
        }
        let src: Vec<(usize, Vec<usize>)> = sources.iter().map(|(v, i)| (v.0, i.clone())).collect();
        let needs = self.needs(&src.iter().map(|s| s.0).collect::<Vec<_>>());
        Ok(self.push(out, Op::Gather { sources: src }, needs))
    }

    // ------------------------------------------------------------------
    // Resampling and reductions
    // ------------------------------------------------------------------

    /// Bilinear lookup of `input` at per-output-pixel coordinates `xs`, `ys`
    /// (both `(1, Ho, Wo)`), with clamp-to-edge outside the raster.
    pub fn bilinear_sample(&self, input: Var, xs: Var, ys: Var) -> Result<Var> {
        let vi = self.value(input);
        let vx = self.value(xs);
        let vy = self.value(ys);
        if vx.shape() != vy.shape() || vx.channels() != 1 {
            return Err(shape_err("bilinear_sample", vx.shape(), vy.shape()));
        }
        let out = bilinear_forward(&vi, &vx, &vy);
        let needs = self.needs(&[input.0, xs.0, ys.0]);
        Ok(self.push(out, Op::BilinearSample { input: input.0, xs: xs.0, ys: ys.0 }, needs))
    }

    /// Non-overlapping `r x r` mean pooling.
    pub fn avg_pool(&self, a: Var, r: usize) -> Result<Var> {
        let va = self.value(a);
        let [c, h, w] = va.shape();
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("avg_pool {r} on {:?}", va.shape())));
        }
        let inv = 1.0 / (r * r) as f64;
        let out = Tensor::from_fn(c, h / r, w / r, |ci, y, x| {
            let mut s = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    s += va.at(ci, y * r + dy, x * r + dx);
                }
            }
            s * inv
        });
        let needs = self.needs(&[a.0]);
        Ok(self.push(out, Op::AvgPool { a: a.0, r }, needs))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a.0]);
        self.push(out, Op::Sum(a.0), needs)
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let needs = self.needs(&[a.0]);
        self.push(out, Op::Mean(a.0), needs)
    }

    /// Sum over channels: `(C, H, W) -> (1, H, W)`.
    pub fn channel_sum(&self, a: Var) -> Var {
        let va = self.value(a);
        let [c, h, w] = va.shape();
        let out = Tensor::from_fn(1, h, w, |_, y, x| (0..c).map(|ci| va.at(ci, y, x)).sum());
        let needs = self.needs(&[a.0]);
        self.push(out, Op::ChannelSum(a.0), needs)
    }

    /// Per-pixel softmax across channels.
    pub fn softmax_channels(&self, a: Var) -> Var {
        let va = self.value(a);
        let [c, h, w] = va.shape();
        let mut out = Tensor::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                let m = (0..c).map(|ci| va.at(ci, y, x)).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ci in 0..c {
                    let e = detmath::exp(va.at(ci, y, x) - m);
                    out.set(ci, y, x, e);
                    z += e;
                }
                for ci in 0..c {
                    let v = out.at(ci, y, x) / z;
                    out.set(ci, y, x, v);
                }
            }
        }
        let needs = self.needs(&[a.0]);
        self.push(out, Op::SoftmaxChannels(a.0), needs)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != [1, 1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            let val = |j: usize| -> &Tensor { &nodes[j].value };
            let contribs = backward_node(&node.op, &node.value, &g, &val);
            for (j, gj) in contribs {
                if !nodes[j].needs_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&gj),
                    slot @ None => *slot = Some(gj),
                }
            }
            grads[i] = Some(g);
        }
        grads.resize_with(nodes.len(), || None);
        let param_vars = self.params.borrow().iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients { grads, param_vars })
    }
}

fn l2_at(t: &Tensor, y: usize, x: usize) -> f64 {
    let s: f64 = (0..t.channels()).map(|c| t.at(c, y, x).powi(2)).sum();
    s.sqrt().max(1e-12)
}

fn bcast_index(sa: [usize; 3], sm: [usize; 3], c: usize, y: usize, x: usize) -> usize {
    let cm = if sm[0] == 1 { 0 } else { c };
    let ym = if sm[1] == 1 { 0 } else { y };
    let xm = if sm[2] == 1 { 0 } else { x };
    let _ = sa;
    (cm * sm[1] + ym) * sm[2] + xm
}

fn bcast_apply(a: &Tensor, m: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (sa, sm) = (a.shape(), m.shape());
    Tensor::from_fn(sa[0], sa[1], sa[2], |c, y, x| f(a.at(c, y, x), m.data()[bcast_index(sa, sm, c, y, x)]))
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    let [cin, h, wd] = x.shape();
    let [cout, cin_g, _] = w.shape();
    let k = kernel_size(w).ok_or_else(|| Error::Shape(format!("non-square kernel {:?}", w.shape())))?;
    if groups == 0 || stride == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
        return Err(Error::Shape(format!(
            "conv2d: input channels {cin}, kernel {:?}, groups {groups}, stride {stride}",
            w.shape()
        )));
    }
    if let Some(b) = b {
        b.expect_shape([cout, 1, 1], "conv2d bias")?;
    }
    let ho = conv_out(h, k, stride, pad).ok_or_else(|| Error::Shape("conv2d: kernel larger than input".into()))?;
    let wo = conv_out(wd, k, stride, pad).ok_or_else(|| Error::Shape("conv2d: kernel larger than input".into()))?;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(cout, ho, wo);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for oc in 0..cout {
        let g = oc / cout_g;
        let plane = &mut od[oc * ho * wo..(oc + 1) * ho * wo];
        if let Some(b) = b {
            plane.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        for icl in 0..cin_g {
            let ic = g * cin_g + icl;
            let xin = &xd[ic * h * wd..(ic + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wdat[(oc * cin_g + icl) * k * k + ky * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                *o += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Tensor, Tensor, Tensor) {
    let [cin, h, wd] = x.shape();
    let [cout, cin_g, kk] = w.shape();
    let k = kernel_size(w).unwrap();
    let [_, ho, wo] = g.shape();
    let cout_g = cout / groups;
    let mut gx = Tensor::zeros(cin, h, wd);
    let mut gw = Tensor::zeros(cout, cin_g, kk);
    let mut gb = Tensor::zeros(cout, 1, 1);
    let xd = x.data();
    let gd = g.data();
    for oc in 0..cout {
        let gplane = &gd[oc * ho * wo..(oc + 1) * ho * wo];
        gb.data_mut()[oc] = gplane.iter().sum();
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = (oc * cin_g + icl) * k * k + ky * k + kx;
                    let wv = w.data()[widx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ic * h * wd + iy as usize * wd;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = gplane[oy * wo + ox];
                            acc += gv * xd[base + ix as usize];
                            gx.data_mut()[base + ix as usize] += gv * wv;
                        }
                    }
                    gw.data_mut()[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) fn pixel_shuffle(t: &Tensor, r: usize) -> Result<Tensor> {
    let [c, h, w] = t.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!("pixel_shuffle: {c} channels not divisible by {}", r * r)));
    }
    Ok(Tensor::from_fn(c / (r * r), h * r, w * r, |co, y, x| {
        t.at(co * r * r + (y % r) * r + (x % r), y / r, x / r)
    }))
}

pub(crate) fn space_to_depth(t: &Tensor, r: usize) -> Result<Tensor> {
    let [c, h, w] = t.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("space_to_depth: {h}x{w} not divisible by {r}")));
    }
    Ok(Tensor::from_fn(c * r * r, h / r, w / r, |ci, y, x| {
        let c0 = ci / (r * r);
        let rem = ci % (r * r);
        t.at(c0, y * r + rem / r, x * r + rem % r)
    }))
}

/// Clamp a coordinate into `[0, n-1]` and return `(i0, i1, frac, inside)`.
#[inline]
fn bilinear_axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&v);
    let c = v.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64, inside)
}

fn bilinear_forward(input: &Tensor, xs: &Tensor, ys: &Tensor) -> Tensor {
    let [c, h, w] = input.shape();
    let [_, ho, wo] = xs.shape();
    let mut out = Tensor::zeros(c, ho, wo);
    for oy in 0..ho {
        for ox in 0..wo {
            let (x0, x1, fx, _) = bilinear_axis(xs.at(0, oy, ox), w);
            let (y0, y1, fy, _) = bilinear_axis(ys.at(0, oy, ox), h);
            for ci in 0..c {
                let top = input.at(ci, y0, x0) * (1.0 - fx) + input.at(ci, y0, x1) * fx;
                let bot = input.at(ci, y1, x0) * (1.0 - fx) + input.at(ci, y1, x1) * fx;
                out.set(ci, oy, ox, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn backward_node<'a>(
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    val: &dyn Fn(usize) -> &'a Tensor,
) -> Vec<(usize, Tensor)> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::Conv2d { input, weight, bias, stride, pad, groups } => {
            let (gx, gw, gb) = conv2d_backward(val(*input), val(*weight), g, *stride, *pad, *groups);
            let mut v = vec![(*input, gx), (*weight, gw)];
            if let Some(b) = bias {
                v.push((*b, gb));
            }
            v
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |gv, bv| gv * bv).unwrap()),
            (*b, g.zip_map(val(*a), |gv, av| gv * av).unwrap()),
        ],
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = g.zip_map(vb, |gv, bv| gv / bv).unwrap();
            let mut gb = Tensor::zeros(vb.channels(), vb.height(), vb.width());
            for i in 0..gb.len() {
                gb.data_mut()[i] = -g.data()[i] * va.data()[i] / (vb.data()[i] * vb.data()[i]);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::MulBcast(a, m) => {
            let (va, vm) = (val(*a), val(*m));
            let (sa, sm) = (va.shape(), vm.shape());
            let ga = bcast_apply(g, vm, |gv, mv| gv * mv);
            let mut gm = Tensor::zeros(sm[0], sm[1], sm[2]);
            for c in 0..sa[0] {
                for y in 0..sa[1] {
                    for x in 0..sa[2] {
                        gm.data_mut()[bcast_index(sa, sm, c, y, x)] += g.at(c, y, x) * va.at(c, y, x);
                    }
                }
            }
            vec![(*a, ga), (*m, gm)]
        }
        Op::AddBcast(a, m) => {
            let vm = val(*m);
            let sa = g.shape();
            let sm = vm.shape();
            let mut gm = Tensor::zeros(sm[0], sm[1], sm[2]);
            for c in 0..sa[0] {
                for y in 0..sa[1] {
                    for x in 0..sa[2] {
                        gm.data_mut()[bcast_index(sa, sm, c, y, x)] += g.at(c, y, x);
                    }
                }
            }
            vec![(*a, g.clone()), (*m, gm)]
        }
        Op::Affine { a, scale } => vec![(*a, g.map(|v| v * scale))],
        Op::Unary { a, kind } => {
            let x = val(*a);
            let d: Vec<f64> = match kind {
                Unary::Sigmoid => out.data().iter().map(|&s| s * (1.0 - s)).collect(),
                Unary::Tanh => out.data().iter().map(|&t| 1.0 - t * t).collect(),
                Unary::Exp => out.data().to_vec(),
                Unary::Relu => x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
                Unary::Abs => x.data().iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
                Unary::Square => x.data().iter().map(|&v| 2.0 * v).collect(),
            };
            let gd = g.data().iter().zip(&d).map(|(gv, dv)| gv * dv).collect();
            vec![(*a, Tensor::from_vec(g.channels(), g.height(), g.width(), gd).unwrap())]
        }
        Op::Clamp { a, lo, hi } => {
            let x = val(*a);
            vec![(*a, g.zip_map(x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 }).unwrap())]
        }
        Op::RoundSte(a) => vec![(*a, g.clone())],
        Op::L2NormChannels(a) => {
            let x = val(*a);
            let [c, h, w] = x.shape();
            let mut gx = Tensor::zeros(c, h, w);
            for y in 0..h {
                for xx in 0..w {
                    let n = l2_at(x, y, xx);
                    let dot: f64 = (0..c).map(|ci| out.at(ci, y, xx) * g.at(ci, y, xx)).sum();
                    for ci in 0..c {
                        let v = if n > 1e-12 { (g.at(ci, y, xx) - out.at(ci, y, xx) * dot) / n } else { g.at(ci, y, xx) / n };
                        gx.set(ci, y, xx, v);
                    }
                }
            }
            vec![(*a, gx)]
        }
        Op::PixelShuffle { a, r } => vec![(*a, space_to_depth(g, *r).unwrap())],
        Op::SpaceToDepth { a, r } => vec![(*a, pixel_shuffle(g, *r).unwrap())],
        Op::Concat(parts) => {
            let n = g.height() * g.width();
            let mut off = 0;
            parts
                .iter()
                .map(|&p| {
                    let c = val(p).channels();
                    let t = Tensor::from_vec(c, g.height(), g.width(), g.data()[off * n..(off + c) * n].to_vec()).unwrap();
                    off += c;
                    (p, t)
                })
                .collect()
        }
        Op::Slice { a, start } => {
            let x = val(*a);
            let n = x.height() * x.width();
            let mut gx = Tensor::zeros(x.channels(), x.height(), x.width());
            gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
            vec![(*a, gx)]
        }
        Op::FlipW(a) => vec![(*a, g.flip_w())],
        Op::Gather { sources } => {
            let mut off = 0;
            let mut v = Vec::new();
            for (src, idx) in sources {
                let t = val(*src);
                let n = t.height() * t.width();
                let mut gs = Tensor::zeros(t.channels(), t.height(), t.width());
                for ci in 0..t.channels() {
                    for (j, &p) in idx.iter().enumerate() {
                        gs.data_mut()[ci * n + p] += g.at(ci, 0, off + j);
                    }
                }
                off += idx.len();
                v.push((*src, gs));
            }
            v
        }
        Op::BilinearSample { input, xs, ys } => {
            let (vi, vx, vy) = (val(*input), val(*xs), val(*ys));
            let [c, h, w] = vi.shape();
            let [_, ho, wo] = vx.shape();
            let mut gi = Tensor::zeros(c, h, w);
            let mut gxs = Tensor::zeros(1, ho, wo);
            let mut gys = Tensor::zeros(1, ho, wo);
            for oy in 0..ho {
                for ox in 0..wo {
                    let (x0, x1, fx, xin) = bilinear_axis(vx.at(0, oy, ox), w);
                    let (y0, y1, fy, yin) = bilinear_axis(vy.at(0, oy, ox), h);
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for ci in 0..c {
                        let gv = g.at(ci, oy, ox);
                        let (a, b, cc, d) = (vi.at(ci, y0, x0), vi.at(ci, y0, x1), vi.at(ci, y1, x0), vi.at(ci, y1, x1));
                        let i00 = gi.idx(ci, y0, x0);
                        gi.data_mut()[i00] += gv * (1.0 - fx) * (1.0 - fy);
                        let i01 = gi.idx(ci, y0, x1);
                        gi.data_mut()[i01] += gv * fx * (1.0 - fy);
                        let i10 = gi.idx(ci, y1, x0);
                        gi.data_mut()[i10] += gv * (1.0 - fx) * fy;
                        let i11 = gi.idx(ci, y1, x1);
                        gi.data_mut()[i11] += gv * fx * fy;
                        dx += gv * ((b - a) * (1.0 - fy) + (d - cc) * fy);
                        dy += gv * ((cc - a) * (1.0 - fx) + (d - b) * fx);
                    }
                    if xin && x0 != x1 {
                        gxs.set(0, oy, ox, dx);
                    }
                    if yin && y0 != y1 {
                        gys.set(0, oy, ox, dy);
                    }
                }
            }
            vec![(*input, gi), (*xs, gxs), (*ys, gys)]
        }
        Op::AvgPool { a, r } => {
            let x = val(*a);
            let inv = 1.0 / (r * r) as f64;
            let gx = Tensor::from_fn(x.channels(), x.height(), x.width(), |c, y, xx| g.at(c, y / r, xx / r) * inv);
            vec![(*a, gx)]
        }
        Op::Sum(a) => {
            let x = val(*a);
            vec![(*a, Tensor::full(x.channels(), x.height(), x.width(), g.data()[0]))]
        }
        Op::Mean(a) => {
            let x = val(*a);
            let v = g.data()[0] / x.len().max(1) as f64;
            vec![(*a, Tensor::full(x.channels(), x.height(), x.width(), v))]
        }
        Op::ChannelSum(a) => {
            let x = val(*a);
            vec![(*a, Tensor::from_fn(x.channels(), x.height(), x.width(), |_, y, xx| g.at(0, y, xx)))]
        }
        Op::SoftmaxChannels(a) => {
            let [c, h, w] = out.shape();
            let mut gx = Tensor::zeros(c, h, w);
            for y in 0..h {
                for x in 0..w {
                    let dot: f64 = (0..c).map(|ci| out.at(ci, y, x) * g.at(ci, y, x)).sum();
                    for ci in 0..c {
                        gx.set(ci, y, x, out.at(ci, y, x) * (g.at(ci, y, x) - dot));
                    }
                }
            }
            vec![(*a, gx)]
        }
        Op::Custom { inputs, op } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            op.backward(&ins, out, g)
                .into_iter()
                .zip(inputs)
                .filter_map(|(gi, &i)| gi.map(|t| (i, t)))
                .collect()
        }
    }
}

/// Central finite-difference gradient of a scalar function, for tests and cross-checks.
pub fn finite_difference(x: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.channels(), x.height(), x.width());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - step;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Largest elementwise relative error, with `floor` guarding near-zero magnitudes.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
