//! Layer stack with hand-written forward and backward passes.
//!
//! No autodiff graph: a [`Stack`] is a static list of layers, `forward`
//! records each layer's input on a tape, and `backward` consumes the tape in
//! reverse. Convolutions are fixed 3x3 kernels with stride 1 and zero
//! padding 1 (feature maps keep their spatial size), which lets the kernel
//! use a plane-shifted im2col whose inner loops are all contiguous.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::nd::{axpy, axpy_fused, dot, gemm_nn, gemm_nt, gemm_tn, NdArray};
use crate::params::{Grads, ParamStore};
use crate::scalar::Scalar;

/// Convolution kernel side length (fixed).
pub const CONV_K: usize = 3;
/// Convolution zero padding (fixed, preserves spatial size at stride 1).
pub const CONV_PAD: usize = 1;

/// One layer of a [`Stack`]. Parameterized layers carry the full parameter
/// name prefix; their weights live in a [`ParamStore`] as `<name>.w` /
/// `<name>.b`.
#[derive(Clone, Debug)]
pub enum Layer {
    /// Fully connected: `[B, input] -> [B, output]`.
    Dense { name: String, input: usize, output: usize },
    /// 3x3 convolution, stride 1, zero padding 1: `[B, in_ch, H, W] -> [B, out_ch, H, W]`.
    Conv2d { name: String, in_ch: usize, out_ch: usize },
    /// Elementwise `max(0, x)`.
    Relu,
    /// `[B, d1, d2, ...] -> [B, d1*d2*...]`.
    Flatten,
}

impl Layer {
    pub fn dense(name: &str, input: usize, output: usize) -> Self {
        Layer::Dense { name: name.to_string(), input, output }
    }

    pub fn conv2d(name: &str, in_ch: usize, out_ch: usize) -> Self {
        Layer::Conv2d { name: name.to_string(), in_ch, out_ch }
    }
}

/// Static sequence of layers.
#[derive(Clone, Debug, Default)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

impl Stack {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// Insert freshly initialized parameters for every parameterized layer:
    /// weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
    pub fn init_params<T: Scalar>(&self, params: &mut ParamStore<T>, rng: &mut impl Rng) {
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, input, output } => {
                    let w = uniform_init(&[*output, *input], *input, *output, rng);
                    params.insert(&format!("{name}.w"), w);
                    params.insert(&format!("{name}.b"), NdArray::zeros(&[*output]));
                }
                Layer::Conv2d { name, in_ch, out_ch } => {
                    let k2 = CONV_K * CONV_K;
                    let w = uniform_init(&[*out_ch, in_ch * k2], in_ch * k2, out_ch * k2, rng);
                    params.insert(&format!("{name}.w"), w);
                    params.insert(&format!("{name}.b"), NdArray::zeros(&[*out_ch]));
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
    }

    /// Names of every parameter the stack reads, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, .. } | Layer::Conv2d { name, .. } => {
                    names.push(format!("{name}.w"));
                    names.push(format!("{name}.b"));
                }
                Layer::Relu | Layer::Flatten => {}
            }
        }
        names
    }
}

fn uniform_init<T: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> NdArray<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new(T::from_f64_lossy(-bound), T::from_f64_lossy(bound));
    let n: usize = shape.iter().product();
    NdArray::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

/// Layer inputs recorded by [`forward`], consumed by [`backward`].
pub struct Tape<T> {
    inputs: Vec<NdArray<T>>,
}

impl<T> Tape<T> {
    /// Input that was fed to layer `idx`.
    pub fn input(&self, idx: usize) -> &NdArray<T> {
        self.inputs.get(idx).unwrap_or_else(|| {
            panic!("tape has no entry for layer {idx}: forward() did not reach it")
        })
    }
}

/// Run the stack, recording per-layer inputs. Panics on any shape mismatch,
/// naming the offending layer index: stacks are wired statically, so a
/// mismatch is a configuration bug, not a runtime condition.
pub fn forward<T: Scalar>(stack: &Stack, params: &ParamStore<T>, input: &NdArray<T>) -> (NdArray<T>, Tape<T>) {
    let mut tape = Tape { inputs: Vec::with_capacity(stack.layers.len()) };
    let mut x = input.clone();
    for (idx, layer) in stack.layers.iter().enumerate() {
        let y = match layer {
            Layer::Dense { name, input: d_in, output: d_out } => {
                check_dense_shape(idx, &x, *d_in);
                dense_forward(params, name, &x, *d_in, *d_out)
            }
            Layer::Conv2d { name, in_ch, out_ch } => {
                check_conv_shape(idx, &x, *in_ch);
                conv2d_forward(params, name, &x, *in_ch, *out_ch)
            }
            Layer::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
            Layer::Flatten => {
                assert!(
                    x.shape().len() >= 2,
                    "layer {idx} (flatten): input must have a batch dim, got {:?}",
                    x.shape()
                );
                let b = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                x.clone().reshape(&[b, rest])
            }
        };
        tape.inputs.push(std::mem::replace(&mut x, y));
    }
    (x, tape)
}

/// Backpropagate `out_grad` through the stack. Returns the gradient with
/// respect to the stack's input and accumulates parameter gradients into
/// `grads`.
pub fn backward<T: Scalar>(
    stack: &Stack,
    params: &ParamStore<T>,
    tape: &Tape<T>,
    out_grad: &NdArray<T>,
    grads: &mut Grads<T>,
) -> NdArray<T> {
    let mut g = out_grad.clone();
    for (idx, layer) in stack.layers.iter().enumerate().rev() {
        let x = tape.input(idx);
        g = match layer {
            Layer::Dense { name, input: d_in, output: d_out } => {
                dense_backward(params, name, x, &g, *d_in, *d_out, grads)
            }
            Layer::Conv2d { name, in_ch, out_ch } => {
                conv2d_backward(params, name, x, &g, *in_ch, *out_ch, grads)
            }
            Layer::Relu => {
                let mut dx = g.clone();
                for (d, &xi) in dx.data_mut().iter_mut().zip(x.data()) {
                    if xi <= T::zero() {
                        *d = T::zero();
                    }
                }
                dx
            }
            Layer::Flatten => g.clone().reshape(x.shape()),
        };
    }
    g
}

fn check_dense_shape<T: Scalar>(idx: usize, x: &NdArray<T>, d_in: usize) {
    assert!(
        x.shape().len() == 2 && x.shape()[1] == d_in,
        "layer {idx} (dense): expected input [B, {d_in}], got {:?}",
        x.shape()
    );
}

fn check_conv_shape<T: Scalar>(idx: usize, x: &NdArray<T>, in_ch: usize) {
    assert!(
        x.shape().len() == 4 && x.shape()[1] == in_ch,
        "layer {idx} (conv2d): expected input [B, {in_ch}, H, W], got {:?}",
        x.shape()
    );
}

// ── Dense kernels ─────────────────────────────────────────────────────────

fn dense_forward<T: Scalar>(
    params: &ParamStore<T>,
    name: &str,
    x: &NdArray<T>,
    d_in: usize,
    d_out: usize,
) -> NdArray<T> {
    let w = params.get(&format!("{name}.w"));
    let b = params.get(&format!("{name}.b"));
    assert_eq!(w.shape(), &[d_out, d_in], "dense `{name}` weight shape");
    let batch = x.shape()[0];
    let mut out = NdArray::zeros(&[batch, d_out]);
    gemm_nt(batch, d_in, d_out, x.data(), w.data(), out.data_mut(), false);
    for i in 0..batch {
        let or = out.row_mut(i);
        for (o, &bias) in b.data().iter().enumerate() {
            or[o] += bias;
        }
    }
    out
}

fn dense_backward<T: Scalar>(
    params: &ParamStore<T>,
    name: &str,
    x: &NdArray<T>,
    g: &NdArray<T>,
    d_in: usize,
    d_out: usize,
    grads: &mut Grads<T>,
) -> NdArray<T> {
    let w = params.get(&format!("{name}.w"));
    let batch = x.shape()[0];
    let mut dw = NdArray::zeros(&[d_out, d_in]);
    let mut db = NdArray::zeros(&[d_out]);
    let mut dx = NdArray::zeros(&[batch, d_in]);
    gemm_tn(d_out, batch, d_in, g.data(), x.data(), dw.data_mut(), false);
    gemm_nn(batch, d_out, d_in, g.data(), w.data(), dx.data_mut(), false);
    for i in 0..batch {
        let gr = g.row(i);
        for (o, db_o) in db.data_mut().iter_mut().enumerate() {
            *db_o += gr[o];
        }
    }
    grads.accumulate(&format!("{name}.w"), dw);
    grads.accumulate(&format!("{name}.b"), db);
    dx
}

// ── Convolution kernels ───────────────────────────────────────────────────
//
// The 3x3 / stride 1 / pad 1 convolution runs on zero-padded planes laid out
// with one pad column on each side and one pad row above and below. In that
// layout the contribution of one filter tap to an output plane is a single
// contiguous axpy: padded-output index `o` reads padded-input index
// `o + dy*(w+2) + dx`, a constant offset. A whole sample (planes, padded
// copies, weights) fits in L1 for the grid sizes used here, so the kernel is
// compute-bound rather than bandwidth-bound.
//
// Two pad columns on the output side accumulate wrap-around garbage; they are
// dropped when the interior is extracted. Tap reads may run up to two
// elements past a channel block into the next block's leading pad zeros
// (hence the two-element tail guard on the padded buffers), which contributes
// nothing.

/// Taps in one 3x3 filter window.
const TAPS: usize = CONV_K * CONV_K;

/// `dst[o] += sum_co w[co][kidx] * planes[co][o]`, fused across channels for
/// the common widths so `dst` is loaded and stored once per pass.
fn scale_planes_into<T: Scalar>(w: &NdArray<T>, kidx: usize, planes: &[&[T]], dst: &mut [T]) {
    match planes.len() {
        8 => {
            let coefs: [T; 8] = std::array::from_fn(|co| w.row(co)[kidx]);
            let srcs: [&[T]; 8] = std::array::from_fn(|co| planes[co]);
            axpy_fused(&coefs, &srcs, dst);
        }
        16 => {
            let coefs: [T; 16] = std::array::from_fn(|co| w.row(co)[kidx]);
            let srcs: [&[T]; 16] = std::array::from_fn(|co| planes[co]);
            axpy_fused(&coefs, &srcs, dst);
        }
        n => {
            for co in 0..n {
                axpy(w.row(co)[kidx], planes[co], dst);
            }
        }
    }
}

/// Copy `in_ch` row-major `h x w` planes into zero-padded `(h+2) x (w+2)`
/// blocks (with a 2-element tail guard already included in `xp`).
fn pad_planes<T: Scalar>(x: &[T], in_ch: usize, h: usize, w: usize, xp: &mut [T]) {
    let pw = w + 2;
    debug_assert_eq!(xp.len(), in_ch * (h + 2) * pw + 2);
    for v in xp.iter_mut() {
        *v = T::zero();
    }
    for ci in 0..in_ch {
        let base = ci * (h + 2) * pw;
        for y in 0..h {
            let dst = base + (y + 1) * pw + 1;
            xp[dst..dst + w].copy_from_slice(&x[ci * h * w + y * w..ci * h * w + y * w + w]);
        }
    }
}

fn conv2d_forward<T: Scalar>(
    params: &ParamStore<T>,
    name: &str,
    x: &NdArray<T>,
    in_ch: usize,
    out_ch: usize,
) -> NdArray<T> {
    let w = params.get(&format!("{name}.w"));
    let b = params.get(&format!("{name}.b"));
    let k_total = in_ch * CONV_K * CONV_K;
    assert_eq!(w.shape(), &[out_ch, k_total], "conv2d `{name}` weight shape");
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let pw = wd + 2;
    let span = h * pw;
    let mut out = NdArray::zeros(&[batch, out_ch, h, wd]);
    let mut xp = vec![T::zero(); in_ch * (h + 2) * pw + 2];
    let mut out_p = vec![T::zero(); out_ch * span];
    for i in 0..batch {
        pad_planes(&x.data()[i * in_ch * plane..(i + 1) * in_ch * plane], in_ch, h, wd, &mut xp);
        for v in out_p.iter_mut() {
            *v = T::zero();
        }
        for ci in 0..in_ch {
            let base = ci * (h + 2) * pw;
            let taps: [&[T]; TAPS] = std::array::from_fn(|t| {
                let shift = base + (t / CONV_K) * pw + t % CONV_K;
                &xp[shift..shift + span]
            });
            let kbase = ci * TAPS;
            for co in 0..out_ch {
                let coefs: [T; TAPS] = w.row(co)[kbase..kbase + TAPS].try_into().unwrap();
                axpy_fused(&coefs, &taps, &mut out_p[co * span..(co + 1) * span]);
            }
        }
        let out_sample = &mut out.data_mut()[i * out_ch * plane..(i + 1) * out_ch * plane];
        for co in 0..out_ch {
            let bias = b.data()[co];
            for y in 0..h {
                let src = &out_p[co * span + y * pw..co * span + y * pw + wd];
                let dst = &mut out_sample[co * plane + y * wd..co * plane + (y + 1) * wd];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
    }
    out
}

fn conv2d_backward<T: Scalar>(
    params: &ParamStore<T>,
    name: &str,
    x: &NdArray<T>,
    g: &NdArray<T>,
    in_ch: usize,
    out_ch: usize,
    grads: &mut Grads<T>,
) -> NdArray<T> {
    let w = params.get(&format!("{name}.w"));
    let k_total = in_ch * CONV_K * CONV_K;
    let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plane = h * wd;
    let pw = wd + 2;
    let span = h * pw;
    let mut dw = NdArray::zeros(&[out_ch, k_total]);
    let mut db = NdArray::zeros(&[out_ch]);
    let mut dx = NdArray::zeros(&[batch, in_ch, h, wd]);
    let mut xp = vec![T::zero(); in_ch * (h + 2) * pw + 2];
    let mut g_p = vec![T::zero(); out_ch * span];
    let mut dxp = vec![T::zero(); in_ch * (h + 2) * pw + 2];
    for i in 0..batch {
        pad_planes(&x.data()[i * in_ch * plane..(i + 1) * in_ch * plane], in_ch, h, wd, &mut xp);
        let g_sample = &g.data()[i * out_ch * plane..(i + 1) * out_ch * plane];
        // Upstream gradient in padded-row layout; pad columns stay zero so
        // they cancel out of the tap dot products below.
        for v in g_p.iter_mut() {
            *v = T::zero();
        }
        for co in 0..out_ch {
            for y in 0..h {
                let dst = co * span + y * pw;
                g_p[dst..dst + wd].copy_from_slice(&g_sample[co * plane + y * wd..co * plane + (y + 1) * wd]);
            }
        }
        for v in dxp.iter_mut() {
            *v = T::zero();
        }
        let g_planes: Vec<&[T]> = g_p.chunks_exact(span).collect();
        for ci in 0..in_ch {
            let base = ci * (h + 2) * pw;
            let taps: [&[T]; TAPS] = std::array::from_fn(|t| {
                let shift = base + (t / CONV_K) * pw + t % CONV_K;
                &xp[shift..shift + span]
            });
            let kbase = ci * TAPS;
            for co in 0..out_ch {
                let dwr = dw.row_mut(co);
                for t in 0..TAPS {
                    dwr[kbase + t] += dot(g_planes[co], taps[t]);
                }
            }
            for t in 0..TAPS {
                let shift = base + (t / CONV_K) * pw + t % CONV_K;
                scale_planes_into(&w, kbase + t, &g_planes, &mut dxp[shift..shift + span]);
            }
        }
        let dx_sample = &mut dx.data_mut()[i * in_ch * plane..(i + 1) * in_ch * plane];
        for ci in 0..in_ch {
            let base = ci * (h + 2) * pw;
            for y in 0..h {
                let src = base + (y + 1) * pw + 1;
                dx_sample[ci * plane + y * wd..ci * plane + (y + 1) * wd]
                    .copy_from_slice(&dxp[src..src + wd]);
            }
        }
        for co in 0..out_ch {
            db.data_mut()[co] += g_sample[co * plane..(co + 1) * plane].iter().copied().sum();
        }
    }
    grads.accumulate(&format!("{name}.w"), dw);
    grads.accumulate(&format!("{name}.b"), db);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Hand conv oracle: direct quintuple loop, no im2col.
    fn conv_reference(
        x: &NdArray<f64>,
        w: &NdArray<f64>,
        b: &NdArray<f64>,
        in_ch: usize,
        out_ch: usize,
    ) -> NdArray<f64> {
        let (batch, h, wd) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let mut out = NdArray::zeros(&[batch, out_ch, h, wd]);
        for i in 0..batch {
            for co in 0..out_ch {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[co];
                        for ci in 0..in_ch {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let sy = y as isize + dy as isize - 1;
                                    let sx = xx as isize + dx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    let xi = x.data()
                                        [((i * in_ch + ci) * h + sy as usize) * wd + sx as usize];
                                    let wi = w.data()[co * in_ch * 9 + ci * 9 + dy * 3 + dx];
                                    acc += xi * wi;
                                }
                            }
                        }
                        out.data_mut()[((i * out_ch + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn store_with(names: &[(&str, NdArray<f64>)]) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        for (n, v) in names {
            ps.insert(n, v.clone());
        }
        ps
    }

    #[test]
    fn identity_dense_reproduces_input() {
        let d = 4;
        let mut w = NdArray::zeros(&[d, d]);
        for i in 0..d {
            w.row_mut(i)[i] = 1.0;
        }
        let ps = store_with(&[("fc.w", w), ("fc.b", NdArray::zeros(&[d]))]);
        let stack = Stack::new(vec![Layer::dense("fc", d, d)]);
        let x = NdArray::from_vec(&[2, d], (0..8).map(|i| i as f64 - 3.5).collect());
        let (y, _) = forward(&stack, &ps, &x);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn relu_zeroes_negative_inputs_elementwise() {
        let stack = Stack::new(vec![Layer::Relu]);
        let ps = ParamStore::<f64>::new();
        let x = NdArray::from_vec(&[1, 4], vec![-2.0, -0.5, 0.0, 3.0]);
        let (y, _) = forward(&stack, &ps, &x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn all_ones_conv_on_all_ones_input_gives_nine_at_center() {
        // 3x3 input, single channel, all-ones kernel with zero padding:
        // the center output sums all nine inputs.
        let ps = store_with(&[
            ("c.w", NdArray::from_vec(&[1, 9], vec![1.0; 9])),
            ("c.b", NdArray::zeros(&[1])),
        ]);
        let stack = Stack::new(vec![Layer::conv2d("c", 1, 1)]);
        let x = NdArray::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let (y, _) = forward(&stack, &ps, &x);
        assert_eq!(y.data()[4], 9.0, "center of {:?}", y.data());
        // Corners see a 2x2 neighborhood, edges 2x3.
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
    }

    #[test]
    fn conv_matches_direct_reference_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..10 {
            let (in_ch, out_ch, h, w) = (1 + case % 3, 1 + (case / 2) % 4, 4 + case % 3, 5);
            let dist = Uniform::new(-1.0f64, 1.0);
            let mk = |n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..n).map(|_| dist.sample(rng)).collect()
            };
            let x = NdArray::from_vec(&[2, in_ch, h, w], mk(2 * in_ch * h * w, &mut rng));
            let wt = NdArray::from_vec(&[out_ch, in_ch * 9], mk(out_ch * in_ch * 9, &mut rng));
            let b = NdArray::from_vec(&[out_ch], mk(out_ch, &mut rng));
            let ps = store_with(&[("c.w", wt.clone()), ("c.b", b.clone())]);
            let stack = Stack::new(vec![Layer::conv2d("c", in_ch, out_ch)]);
            let (y, _) = forward(&stack, &ps, &x);
            let want = conv_reference(&x, &wt, &b, in_ch, out_ch);
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "conv kernel disagrees with direct oracle");
            }
        }
    }

    #[test]
    fn zero_out_grad_yields_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = Stack::new(vec![
            Layer::conv2d("c", 2, 3),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense("fc", 3 * 4 * 4, 5),
        ]);
        let mut ps = ParamStore::new();
        stack.init_params(&mut ps, &mut rng);
        let x = NdArray::from_vec(&[1, 2, 4, 4], (0..32).map(|i| (i as f64 * 0.1).sin()).collect());
        let (y, tape) = forward(&stack, &ps, &x);
        let mut grads = Grads::new();
        let dx = backward(&stack, &ps, &tape, &NdArray::zeros(y.shape()), &mut grads);
        assert!(dx.data().iter().all(|&v| v == 0.0));
        for (name, g) in grads.iter() {
            assert!(g.data().iter().all(|&v| v == 0.0), "nonzero grad for {name}");
        }
    }

    #[test]
    fn dense_weight_grad_is_outer_product_of_out_grad_and_input() {
        let ps = store_with(&[
            ("fc.w", NdArray::zeros(&[2, 3])),
            ("fc.b", NdArray::zeros(&[2])),
        ]);
        let stack = Stack::new(vec![Layer::dense("fc", 3, 2)]);
        let x = NdArray::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let (_, tape) = forward(&stack, &ps, &x);
        let mut grads = Grads::new();
        let g = NdArray::from_vec(&[1, 2], vec![10.0, -1.0]);
        backward(&stack, &ps, &tape, &g, &mut grads);
        let dw = grads.get("fc.w").unwrap();
        assert_eq!(dw.data(), &[10.0, 20.0, 30.0, -1.0, -2.0, -3.0]);
        assert_eq!(grads.get("fc.b").unwrap().data(), &[10.0, -1.0]);
    }

    #[test]
    #[should_panic(expected = "layer 0 (dense)")]
    fn shape_mismatch_names_offending_layer() {
        let ps = store_with(&[("fc.w", NdArray::zeros(&[2, 3])), ("fc.b", NdArray::zeros(&[2]))]);
        let stack = Stack::new(vec![Layer::dense("fc", 3, 2)]);
        let x = NdArray::from_vec(&[1, 4], vec![0.0; 4]);
        let _ = forward(&stack, &ps, &x);
    }

    #[test]
    #[should_panic(expected = "tape has no entry")]
    fn missing_tape_entry_is_fatal() {
        let tape: Tape<f64> = Tape { inputs: vec![] };
        let _ = tape.input(0);
    }

    #[test]
    fn init_uses_symmetric_bound_and_zero_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = Stack::new(vec![Layer::dense("fc", 100, 50)]);
        let mut ps: ParamStore<f64> = ParamStore::new();
        stack.init_params(&mut ps, &mut rng);
        let bound = (6.0 / 150.0f64).sqrt();
        let w = ps.get("fc.w");
        assert!(w.data().iter().all(|&v| v.abs() < bound));
        assert!(w.data().iter().any(|&v| v > 0.0) && w.data().iter().any(|&v| v < 0.0));
        assert!(ps.get("fc.b").data().iter().all(|&v| v == 0.0));
    }
}
