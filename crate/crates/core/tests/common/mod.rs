//! Shared test oracles: central finite differences against the reverse-mode
//! sweep, independent of the tape's backward rules.

use guidecode::tensor::{Elem, GradMap, Param, Tape, Tensor, Var};
use rand::Rng;

/// Build a scalar loss from staged parameters.
pub type LossFn = dyn Fn(&mut Tape<f64>, &[Param<f64>]) -> Var;

/// Evaluate the loss at the current parameter values.
pub fn eval_loss(params: &[Param<f64>], f: &LossFn) -> f64 {
    let mut tape = Tape::new();
    let loss = f(&mut tape, params);
    tape.value(loss).scalar_value().unwrap().as_f64()
}

/// Reverse-mode gradients of the loss.
pub fn analytic_grads(params: &[Param<f64>], f: &LossFn) -> GradMap<f64> {
    let mut tape = Tape::new();
    let loss = f(&mut tape, params);
    tape.backward(loss).unwrap()
}

/// Central finite differences, one parameter element at a time.
pub fn numeric_grads(params: &[Param<f64>], f: &LossFn, step: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for pi in 0..params.len() {
        let mut grad = vec![0.0; params[pi].numel()];
        for (ei, g) in grad.iter_mut().enumerate() {
            let mut plus = params.to_vec();
            plus[pi].value.data_mut()[ei] += step;
            let mut minus = params.to_vec();
            minus[pi].value.data_mut()[ei] -= step;
            *g = (eval_loss(&plus, f) - eval_loss(&minus, f)) / (2.0 * step);
        }
        out.push(grad);
    }
    out
}

/// Max relative error between analytic and numeric gradients over all
/// parameters. Denominator floored so near-zero gradients compare absolutely.
pub fn max_rel_err(params: &[Param<f64>], analytic: &GradMap<f64>, numeric: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (p, n) in params.iter().zip(numeric) {
        let a = analytic
            .get(p)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.numel()]);
        for (&av, &nv) in a.iter().zip(n) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// One finite-difference check: build, differentiate both ways, compare.
pub fn gradcheck(params: &[Param<f64>], f: &LossFn, step: f64) -> f64 {
    let analytic = analytic_grads(params, f);
    let numeric = numeric_grads(params, f, step);
    max_rel_err(params, &analytic, &numeric)
}

pub fn randn_param<R: Rng>(name: &str, shape: &[usize], rng: &mut R) -> Param<f64> {
    Param::new(name, Tensor::randn(shape, 1.0, rng))
}

/// Finite-difference sweep over every tape primitive, at 64-bit with the
/// given step. Returns (primitive name, max relative error) per case.
pub fn primitive_gradcheck_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = guidecode::util::seeded_rng(seed);
    let step = 1e-5;
    let mut results = Vec::new();

    let a = randn_param("a", &[3, 4], &mut rng);
    let b = randn_param("b", &[4, 2], &mut rng);
    results.push((
        "matmul",
        gradcheck(&[a.clone(), b.clone()], &|t, p| {
            let (a, b) = (t.param(&p[0]), t.param(&p[1]));
            let c = t.matmul(a, b).unwrap();
            t.sum_all(c)
        }, step),
    ));

    let ab = randn_param("ab", &[2, 3, 4], &mut rng);
    let bb = randn_param("bb", &[2, 4, 2], &mut rng);
    results.push((
        "matmul_batched",
        gradcheck(&[ab, bb], &|t, p| {
            let (a, b) = (t.param(&p[0]), t.param(&p[1]));
            let c = t.matmul(a, b).unwrap();
            t.sum_all(c)
        }, step),
    ));

    let x = randn_param("x", &[2, 5], &mut rng);
    let y = randn_param("y", &[2, 5], &mut rng);
    let bias = randn_param("bias", &[5], &mut rng);
    for (name, op) in [("add", 0usize), ("subtract", 1), ("multiply", 2)] {
        results.push((
            name,
            gradcheck(&[x.clone(), y.clone()], &move |t, p| {
                let (a, b) = (t.param(&p[0]), t.param(&p[1]));
                let c = match op {
                    0 => t.add(a, b).unwrap(),
                    1 => t.sub(a, b).unwrap(),
                    _ => t.mul(a, b).unwrap(),
                };
                let c2 = t.mul(c, c).unwrap(); // make loss non-linear in inputs
                t.mean_all(c2)
            }, step),
        ));
    }

    results.push((
        "add_broadcast",
        gradcheck(&[x.clone(), bias.clone()], &|t, p| {
            let (a, b) = (t.param(&p[0]), t.param(&p[1]));
            let c = t.add(a, b).unwrap();
            let c2 = t.mul(c, c).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "scale",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let c = t.scale(a, 0.37);
            let c2 = t.mul(c, c).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "gelu",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let c = t.gelu(a);
            t.sum_all(c)
        }, step),
    ));

    results.push((
        "softmax",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let s = t.softmax(a, 1).unwrap();
            let w = t.mul(s, s).unwrap();
            t.sum_all(w)
        }, step),
    ));

    let gain = randn_param("gain", &[5], &mut rng);
    let lnb = randn_param("lnb", &[5], &mut rng);
    results.push((
        "layer_norm",
        gradcheck(&[x.clone(), gain, lnb], &|t, p| {
            let (a, g, b) = (t.param(&p[0]), t.param(&p[1]), t.param(&p[2]));
            let c = t.layer_norm(a, g, b, 1e-6).unwrap();
            let c2 = t.mul(c, c).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "reshape",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let r = t.reshape(a, &[5, 2]).unwrap();
            let c2 = t.mul(r, r).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    let p3 = randn_param("p3", &[2, 3, 4], &mut rng);
    results.push((
        "transpose",
        gradcheck(&[p3.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let r = t.permute(a, &[2, 0, 1]).unwrap();
            let c2 = t.mul(r, r).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "concatenate",
        gradcheck(&[x.clone(), y.clone()], &|t, p| {
            let (a, b) = (t.param(&p[0]), t.param(&p[1]));
            let c = t.concat(&[a, b], 1).unwrap();
            let c2 = t.mul(c, c).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "slice",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let s = t.slice(a, 1, 1..4).unwrap();
            let c2 = t.mul(s, s).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    let table = randn_param("table", &[6, 3], &mut rng);
    results.push((
        "gather_rows",
        gradcheck(&[table], &|t, p| {
            let a = t.param(&p[0]);
            let gth = t.gather_rows(a, &[0, 2, 2, 5]).unwrap();
            let c2 = t.mul(gth, gth).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "sum",
        gradcheck(&[p3.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let s = t.sum_axis(a, 1).unwrap();
            let c2 = t.mul(s, s).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "mean",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let m = t.mean_all(a);
            t.mul(m, m).unwrap()
        }, step),
    ));

    results.push((
        "one_hot_gather",
        // one-hot produces a constant; check gradient flows through the
        // matmul against it.
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let oh = t.constant(Tensor::one_hot(&[1, 3, 0, 2, 4], 5, &[5]).unwrap());
            let c = t.matmul(a, oh).unwrap();
            let c2 = t.mul(c, c).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "softmax_cross_entropy",
        gradcheck(&[x.clone()], &|t, p| {
            let a = t.param(&p[0]);
            t.softmax_cross_entropy(a, &[3, 1]).unwrap()
        }, step),
    ));

    results.push((
        "mean_squared_error",
        gradcheck(&[x.clone(), y.clone()], &|t, p| {
            let (a, b) = (t.param(&p[0]), t.param(&p[1]));
            t.mean_squared_error(a, b).unwrap()
        }, step),
    ));

    let grid = randn_param("grid", &[4, 4, 2], &mut rng);
    results.push((
        "bilinear_resize",
        gradcheck(&[grid.clone()], &|t, p| {
            let a = t.param(&p[0]);
            let r = t.bilinear_resize(a, (3, 5)).unwrap();
            let c2 = t.mul(r, r).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results.push((
        "nearest_resize",
        gradcheck(&[grid], &|t, p| {
            let a = t.param(&p[0]);
            let r = t.nearest_resize(a, (2, 6)).unwrap();
            let c2 = t.mul(r, r).unwrap();
            t.sum_all(c2)
        }, step),
    ));

    results
}

/// A 2-layer MLP with gelu: the composed-model gradient check.
pub fn mlp_gradcheck(seed: u64) -> f64 {
    let mut rng = guidecode::util::seeded_rng(seed);
    let params = vec![
        randn_param("w1", &[4, 8], &mut rng),
        randn_param("b1", &[8], &mut rng),
        randn_param("w2", &[8, 3], &mut rng),
        randn_param("b2", &[3], &mut rng),
        randn_param("x", &[5, 4], &mut rng),
    ];
    gradcheck(&params, &|t, p| {
        let (w1, b1, w2, b2, x) = (
            t.param(&p[0]),
            t.param(&p[1]),
            t.param(&p[2]),
            t.param(&p[3]),
            t.param(&p[4]),
        );
        let h = t.matmul(x, w1).unwrap();
        let h = t.add(h, b1).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, w2).unwrap();
        let o = t.add(o, b2).unwrap();
        t.softmax_cross_entropy(o, &[0, 2, 1, 1, 0]).unwrap()
    }, 1e-5)
}
