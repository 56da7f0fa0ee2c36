//! Central finite-difference oracle for the autodiff tape.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Result of checking one operation.
#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Compares tape gradients of a scalar-valued builder against central finite
/// differences over every element of every input.
///
/// The builder must be a pure function of the leaf values so that re-running
/// it on perturbed inputs is a valid probe.
pub fn max_rel_error<F>(build: F, inputs: &[Tensor], step: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, tensor) in inputs.iter().enumerate() {
        for ei in 0..tensor.numel() {
            let orig = tensor.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let up = eval(&work);
            work[ti].data_mut()[ei] = orig - step;
            let down = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = analytic[ti].data()[ei];
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((an - fd).abs() / denom);
        }
    }
    worst
}

pub fn check<F>(name: &str, build: F, inputs: &[Tensor], threshold: f64) -> CheckRow
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    CheckRow {
        name: name.to_string(),
        max_rel_err: max_rel_error(build, inputs, FD_STEP),
        threshold,
    }
}

/// Finite-difference rows for every differentiable tape primitive, with
/// inputs drawn from `seed`. Reductions to a scalar use `sum_all` so that
/// each op's backward sees a dense upstream gradient.
pub fn primitive_checks(seed: u64) -> Vec<CheckRow> {
    use rand::SeedableRng;
    use std::rc::Rc;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let m23 = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let m23b = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let m34 = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let v3 = Tensor::randn(&[3], 1.0, &mut rng);
    // kept away from 0 for ln / abs / relu kink safety
    let mut pos = Tensor::randn(&[2, 3], 1.0, &mut rng);
    for v in pos.data_mut() {
        *v = v.abs() + 0.5;
    }
    let img = Tensor::randn(&[2, 5, 5], 1.0, &mut rng);
    let cw = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
    let cb = Tensor::randn(&[3], 0.5, &mut rng);
    let tw = Tensor::randn(&[2, 3, 4, 4], 0.5, &mut rng);
    let scalar = Tensor::new(&[1], vec![1.7]);
    let gamma = Tensor::randn(&[3], 0.3, &mut rng);
    let beta = Tensor::randn(&[3], 0.3, &mut rng);
    let log_kernel = {
        let mut k = Tensor::randn(&[3, 3], 1.0, &mut rng);
        for v in k.data_mut() {
            *v = -v.abs();
        }
        Rc::new(k)
    };
    let pot = Tensor::randn(&[3], 0.5, &mut rng);
    let log_a = {
        let mut t = Tensor::randn(&[3], 0.3, &mut rng);
        for v in t.data_mut() {
            *v -= 1.5;
        }
        t
    };

    let mut rows = Vec::new();
    let mut push = |name: &str, row: CheckRow| {
        rows.push(CheckRow { name: name.to_string(), ..row });
    };
    let sum = |t: &mut Tape, v: Var| t.sum_all(v);

    push("add", check("", |t, v| { let x = t.add(v[0], v[1]); sum(t, x) }, &[m23.clone(), m23b.clone()], 1e-4));
    push("sub", check("", |t, v| { let x = t.sub(v[0], v[1]); sum(t, x) }, &[m23.clone(), m23b.clone()], 1e-4));
    push("mul", check("", |t, v| { let x = t.mul(v[0], v[1]); sum(t, x) }, &[m23.clone(), m23b.clone()], 1e-4));
    push("scale", check("", |t, v| { let x = t.scale(v[0], -2.5); sum(t, x) }, &[m23.clone()], 1e-4));
    push("add_const", check("", |t, v| { let x = t.add_const(v[0], 0.7); sum(t, x) }, &[m23.clone()], 1e-4));
    push("relu", check("", |t, v| { let x = t.relu(v[0]); sum(t, x) }, &[pos.clone()], 1e-4));
    push("gelu", check("", |t, v| { let x = t.gelu(v[0]); sum(t, x) }, &[m23.clone()], 1e-4));
    push("sigmoid", check("", |t, v| { let x = t.sigmoid(v[0]); sum(t, x) }, &[m23.clone()], 1e-4));
    push("exp", check("", |t, v| { let x = t.exp(v[0]); sum(t, x) }, &[m23.clone()], 1e-4));
    push("ln", check("", |t, v| { let x = t.ln(v[0]); sum(t, x) }, &[pos.clone()], 1e-4));
    push("abs", check("", |t, v| { let x = t.abs(v[0]); sum(t, x) }, &[pos.clone()], 1e-4));
    push("sum_all", check("", |t, v| t.sum_all(v[0]), &[m23.clone()], 1e-4));
    push("mean_all", check("", |t, v| t.mean_all(v[0]), &[m23.clone()], 1e-4));
    push("reshape", check("", |t, v| { let x = t.reshape(v[0], &[3, 2]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone()], 1e-4));
    push("transpose", check("", |t, v| { let x = t.transpose(v[0]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone()], 1e-4));
    push("slice_rows", check("", |t, v| { let x = t.slice_rows(v[0], 1, 3); let x = t.mul(x, x); sum(t, x) }, &[m34.clone()], 1e-4));
    push("slice_cols", check("", |t, v| { let x = t.slice_cols(v[0], 1, 3); let x = t.mul(x, x); sum(t, x) }, &[m34.clone()], 1e-4));
    push("concat_rows", check("", |t, v| { let x = t.concat_rows(v[0], v[1]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), m23b.clone()], 1e-4));
    push("concat_cols", check("", |t, v| { let x = t.concat_cols(v[0], v[1]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), m23b.clone()], 1e-4));
    push("add_row_vec", check("", |t, v| { let x = t.add_row_vec(v[0], v[1]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), v3.clone()], 1e-4));
    push("scale_rows", check("", |t, v| { let x = t.scale_rows(v[0], v[1]); sum(t, x) }, &[Tensor::randn(&[3, 4], 1.0, &mut rng), v3.clone()], 1e-4));
    push("div_by_scalar", check("", |t, v| { let s = t.reshape(v[1], &[1]); let x = t.div_by_scalar(v[0], s); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), scalar.clone()], 1e-4));
    push("matmul", check("", |t, v| { let x = t.matmul(v[0], v[1]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), m34.clone()], 1e-4));
    push("softmax_rows", check("", |t, v| { let x = t.softmax_rows(v[0]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone()], 1e-4));
    push("layer_norm", check("", |t, v| { let x = t.layer_norm(v[0], v[1], v[2]); let x = t.mul(x, x); sum(t, x) }, &[m23.clone(), gamma.clone(), beta.clone()], 1e-4));
    push("unfold", check("", |t, v| { let x = t.unfold(v[0], 3, 2, 1); let x = t.mul(x, x); sum(t, x) }, &[img.clone()], 1e-4));
    push("conv2d", check("", |t, v| { let x = t.conv2d(v[0], v[1], v[2], 1, 1); let x = t.mul(x, x); sum(t, x) }, &[img.clone(), cw.clone(), cb.clone()], 1e-4));
    push("conv_transpose2d", check("", |t, v| { let x = t.conv_transpose2d(v[0], v[1], v[2], 2, 1); let x = t.mul(x, x); sum(t, x) }, &[img.clone(), tw.clone(), cb.clone()], 1e-4));
    push("avg_pool2d", check("", |t, v| { let x = t.avg_pool2d(v[0], 2, 2); let x = t.mul(x, x); sum(t, x) }, &[Tensor::randn(&[2, 4, 4], 1.0, &mut rng)], 1e-4));
    {
        let lk = Rc::clone(&log_kernel);
        push("sinkhorn_half_step", check("", move |t, v| {
            let f = t.sinkhorn_half_step(v[0], v[1], Rc::clone(&lk));
            let x = t.mul(f, f);
            t.sum_all(x)
        }, &[pot.clone(), log_a.clone()], 1e-4));
    }
    {
        let denom = ((1 * 1 + 2 * 2) as f64).max(1.0);
        let axis = |s: usize| {
            let mut k = Tensor::zeros(&[s, s]);
            for p in 0..s {
                for q in 0..s {
                    let d = p as f64 - q as f64;
                    k.data_mut()[p * s + q] = -(d * d) / (denom * 0.5);
                }
            }
            Rc::new(k)
        };
        let (ky, kx) = (axis(2), axis(3));
        push("sinkhorn_half_step_grid", check("", move |t, v| {
            let f = t.sinkhorn_half_step_grid(v[0], v[1], Rc::clone(&ky), Rc::clone(&kx));
            let x = t.mul(f, f);
            t.sum_all(x)
        }, &[Tensor::randn(&[6], 1.0, &mut rng), Tensor::randn(&[6], 1.0, &mut rng)], 1e-4));
    }
    {
        let lk = Rc::clone(&log_kernel);
        push("sinkhorn_plan_from_potentials", check("", move |t, v| {
            let p = t.sinkhorn_plan_from_potentials(v[0], v[1], Rc::clone(&lk));
            let c = t.constant(Tensor::new(&[3, 3], (0..9).map(|i| i as f64 * 0.1).collect()));
            let x = t.mul(p, c);
            t.sum_all(x)
        }, &[pot.clone(), Tensor::randn(&[3], 0.5, &mut rng)], 1e-4));
    }
    rows
}
