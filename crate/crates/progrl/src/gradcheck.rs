//! Central finite-difference verification of analytic gradients.

use crate::layers::{forward, Layer, Stack};
use crate::nd::NdArray;
use crate::params::{Grads, ParamStore};

/// True when every relu input produced by `x` flowing through `stack` is at
/// least `margin` from zero. Finite-difference probes assume the loss is
/// smooth inside the probe interval; inputs that park a pre-activation on a
/// relu kink violate that and must be redrawn.
pub fn pre_activations_clear_of_kinks(
    stack: &Stack,
    ps: &ParamStore<f64>,
    x: &NdArray<f64>,
    margin: f64,
) -> bool {
    let mut cur = x.clone();
    for layer in &stack.layers {
        if matches!(layer, Layer::Relu) && cur.data().iter().any(|v| v.abs() < margin) {
            return false;
        }
        let sub = Stack::new(vec![layer.clone()]);
        let (y, _) = forward(&sub, ps, &cur);
        cur = y;
    }
    true
}

/// Nudge biases so every relu pre-activation produced by each input in `xs`
/// sits at least `margin` from zero. Any unit (conv channel or dense column)
/// with a pre-activation inside the margin gets its bias bumped and the walk
/// restarts, since the shift propagates downstream. Deterministic, and far
/// more reliable than rejection-sampling inits when the stack produces
/// thousands of pre-activations. Panics if the margin cannot be cleared.
pub fn clear_relu_kinks(
    stack: &Stack,
    params: &mut ParamStore<f64>,
    xs: &[&NdArray<f64>],
    margin: f64,
) {
    'rounds: for _ in 0..200 {
        for x in xs {
            let mut cur = (*x).clone();
            for (idx, layer) in stack.layers.iter().enumerate() {
                if matches!(layer, Layer::Relu) {
                    let producer = idx
                        .checked_sub(1)
                        .map(|i| &stack.layers[i])
                        .expect("relu cannot be the first layer");
                    let name = match producer {
                        Layer::Dense { name, .. } | Layer::Conv2d { name, .. } => name.clone(),
                        other => panic!(
                            "kink clearing needs a biased layer before each relu, found {other:?}"
                        ),
                    };
                    let unit_of = |flat: usize| match cur.shape() {
                        // [B, D]: unit is the column.
                        [_, d] => flat % d,
                        // [B, C, H, W]: unit is the channel.
                        [_, c, h, w] => (flat / (h * w)) % c,
                        s => panic!("unexpected pre-activation shape {s:?}"),
                    };
                    let mut bumped = false;
                    let mut seen = vec![];
                    for (flat, v) in cur.data().iter().enumerate() {
                        if v.abs() < margin {
                            let u = unit_of(flat);
                            if !seen.contains(&u) {
                                seen.push(u);
                                params.get_mut(&format!("{name}.b")).data_mut()[u] +=
                                    2.1 * margin;
                                bumped = true;
                            }
                        }
                    }
                    if bumped {
                        continue 'rounds;
                    }
                }
                let sub = Stack::new(vec![layer.clone()]);
                cur = forward(&sub, params, &cur).0;
            }
        }
        return;
    }
    panic!("could not clear relu kinks within 200 rounds");
}

/// Worst element found by [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare `analytic` gradients of the scalar function `f` against central
/// finite differences, element by element over every parameter in `params`.
///
/// The comparator is `|a - n| / (|a| + |n| + 1e-12)`; elements where both
/// sides sit below `atol` count as zero error (they are indistinguishable
/// from roundoff noise of the difference quotient).
pub fn finite_diff_check<F>(
    params: &mut ParamStore<f64>,
    analytic: &Grads<f64>,
    eps: f64,
    atol: f64,
    mut f: F,
) -> FdReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for name in &names {
        let len = params.get(name).len();
        for i in 0..len {
            let original = params.get(name).data()[i];
            params.get_mut(name).data_mut()[i] = original + eps;
            let f_plus = f(params);
            params.get_mut(name).data_mut()[i] = original - eps;
            let f_minus = f(params);
            params.get_mut(name).data_mut()[i] = original;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            if a.abs() < atol && numeric.abs() < atol {
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            if rel > report.max_rel_err {
                report = FdReport {
                    max_rel_err: rel,
                    worst_param: name.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{backward, forward, Layer, Stack};
    use crate::loss::softmax_cross_entropy;
    use crate::nd::NdArray;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_checks_to_machine_precision() {
        // f(w) = 3*w0 - 2*w1 + 0.5*w2: analytic gradient is exact and the
        // central difference of a linear function has no truncation error.
        let mut ps = ParamStore::new();
        ps.insert("w", NdArray::from_vec(&[3], vec![0.3, -1.2, 2.0]));
        let mut grads = Grads::new();
        grads.accumulate("w", NdArray::from_vec(&[3], vec![3.0, -2.0, 0.5]));
        let report = finite_diff_check(&mut ps, &grads, 1e-6, 1e-12, |p| {
            let w = p.get("w").data();
            3.0 * w[0] - 2.0 * w[1] + 0.5 * w[2]
        });
        assert!(report.max_rel_err < 1e-8, "rel err {} too large", report.max_rel_err);
    }

    #[test]
    fn conv_relu_dense_network_with_cross_entropy_checks_under_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let stack = Stack::new(vec![
            Layer::conv2d("c1", 2, 3),
            Layer::Relu,
            Layer::conv2d("c2", 3, 2),
            Layer::Relu,
            Layer::Flatten,
            Layer::dense("fc", 2 * 4 * 4, 4),
        ]);
        let mut ps: ParamStore<f64> = ParamStore::new();
        stack.init_params(&mut ps, &mut rng);
        // Reject inputs that leave any relu pre-activation near its kink so
        // the loss stays twice differentiable inside the probe interval.
        let dist = Uniform::new(-1.0f64, 1.0);
        let x = loop {
            let data: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| dist.sample(&mut rng)).collect();
            let x = NdArray::from_vec(&[2, 2, 4, 4], data);
            if pre_activations_clear_of_kinks(&stack, &ps, &x, 1e-3) {
                break x;
            }
        };
        let targets = [1usize, 3];
        let (logits, tape) = forward(&stack, &ps, &x);
        let (_, dlogits) = softmax_cross_entropy(&logits, &targets);
        let mut grads = Grads::new();
        backward(&stack, &ps, &tape, &dlogits, &mut grads);
        let report = finite_diff_check(&mut ps, &grads, 1e-5, 1e-9, |p| {
            let (logits, _) = forward(&stack, p, &x);
            softmax_cross_entropy(&logits, &targets).0
        });
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.analytic,
            report.numeric
        );
    }
}
