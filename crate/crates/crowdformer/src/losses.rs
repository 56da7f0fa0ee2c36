//! Training objectives and evaluation metrics.
//!
//! The density objective is count + entropic optimal transport + total
//! variation; the OT term runs log-domain Sinkhorn unrolled through the tape
//! so gradients flow through the iterations themselves.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use std::rc::Rc;

/// Raw mass added to each cell before normalizing for OT, keeping logs and
/// their gradients finite when the prediction has exactly-zero cells.
const MASS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// RTM count-regression weight (lambda).
    pub lambda: f64,
    /// OT weight (lambda_1).
    pub lambda1: f64,
    /// TV weight (lambda_2).
    pub lambda2: f64,
    /// Weight of each auxiliary density loss.
    pub aux_weight: f64,
    /// Scale the TV term by the ground-truth count (ablation switch).
    pub tv_count_scale: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.1,
            lambda1: 0.1,
            lambda2: 0.01,
            aux_weight: 1.0,
            tv_count_scale: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { epsilon: 0.01, max_iters: 200, tol: 1e-7 }
    }
}

/// Dots-per-cell ground truth at the loss grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthGrid {
    pub grid: Tensor,
}

impl GroundTruthGrid {
    pub fn new(grid: Tensor) -> GroundTruthGrid {
        assert!(grid.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0),
            "ground truth cells must be nonnegative integers");
        GroundTruthGrid { grid }
    }

    pub fn total(&self) -> f64 {
        self.grid.sum()
    }
}

/// Value-level density map (inference output).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub grid: Tensor,
    /// Pixels per density cell (the output stride).
    pub cell_size: usize,
}

impl DensityMap {
    pub fn count(&self) -> f64 {
        self.grid.sum()
    }
}

/// |sum(D') - sum(D)|
pub fn count_loss(tape: &mut Tape, pred: Var, gt: &GroundTruthGrid) -> Var {
    assert_eq!(tape.value(pred).shape(), gt.grid.shape(), "count_loss shape mismatch");
    let s = tape.sum_all(pred);
    let t = tape.add_const(s, -gt.total());
    tape.abs(t)
}

/// Squared distances between cell centers, normalized by the squared distance
/// between the extreme cell centers so costs lie in [0, 1].
pub fn cost_matrix(h: usize, w: usize) -> Tensor {
    assert!(h >= 1 && w >= 1);
    let n = h * w;
    let denom = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).max(1.0);
    let mut c = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let (yi, xi) = ((i / w) as f64, (i % w) as f64);
        for j in 0..n {
            let (yj, xj) = ((j / w) as f64, (j % w) as f64);
            let d2 = (yi - yj) * (yi - yj) + (xi - xj) * (xi - xj);
            c.data_mut()[i * n + j] = d2 / denom;
        }
    }
    c
}

pub struct SinkhornRun {
    /// Transport plan [n, m] on the tape.
    pub plan: Var,
    pub iters: usize,
    /// L1 marginal error of the returned plan (worse of rows/columns).
    pub marginal_err: f64,
    /// Row-marginal L1 residual measured after each column update.
    pub residuals: Vec<f64>,
}

/// One epsilon level's log-kernel, either dense or factored over a grid.
/// The grid form exploits the separable squared-Euclidean cost: a half-step's
/// log-sum-exp splits into two 1-D stages, O(n(h+w)) instead of O(n^2).
enum StepKernel {
    Dense { lk: Rc<Tensor>, lkt: Rc<Tensor> },
    Grid { ky: Rc<Tensor>, kx: Rc<Tensor> },
}

impl StepKernel {
    fn dense(cost: &Tensor, epsilon: f64) -> StepKernel {
        let (n, m) = (cost.shape()[0], cost.shape()[1]);
        let mut k = cost.clone();
        k.scale_assign(-1.0 / epsilon);
        let mut kt = Tensor::zeros(&[m, n]);
        for i in 0..n {
            for j in 0..m {
                kt.data_mut()[j * n + i] = k.data()[i * m + j];
            }
        }
        StepKernel::Dense { lk: Rc::new(k), lkt: Rc::new(kt) }
    }

    fn grid(h: usize, w: usize, epsilon: f64) -> StepKernel {
        let denom = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).max(1.0);
        let axis = |s: usize| {
            let mut k = Tensor::zeros(&[s, s]);
            for p in 0..s {
                for q in 0..s {
                    let d = p as f64 - q as f64;
                    k.data_mut()[p * s + q] = -(d * d) / (denom * epsilon);
                }
            }
            Rc::new(k)
        };
        StepKernel::Grid { ky: axis(h), kx: axis(w) }
    }

    /// f-update: uses the kernel as stored.
    fn row_step(&self, tape: &mut Tape, g: Var, log_a: Var) -> Var {
        match self {
            StepKernel::Dense { lk, .. } => tape.sinkhorn_half_step(g, log_a, Rc::clone(lk)),
            StepKernel::Grid { ky, kx } => {
                tape.sinkhorn_half_step_grid(g, log_a, Rc::clone(ky), Rc::clone(kx))
            }
        }
    }

    /// g-update: uses the transposed kernel (the grid cost is symmetric).
    fn col_step(&self, tape: &mut Tape, f: Var, log_b: Var) -> Var {
        match self {
            StepKernel::Dense { lkt, .. } => tape.sinkhorn_half_step(f, log_b, Rc::clone(lkt)),
            StepKernel::Grid { ky, kx } => {
                tape.sinkhorn_half_step_grid(f, log_b, Rc::clone(ky), Rc::clone(kx))
            }
        }
    }
}

/// Log-domain Sinkhorn between probability vectors `a` and `b` under ground
/// cost `cost`, unrolled on the tape. Stops when the running row residual
/// drops below `cfg.tol` or after `cfg.max_iters` full iterations.
pub fn sinkhorn_plan(
    tape: &mut Tape,
    a: Var,
    b: Var,
    cost: &Tensor,
    cfg: &SinkhornConfig,
) -> SinkhornRun {
    sinkhorn_plan_impl(tape, a, b, cost, None, cfg)
}

/// [`sinkhorn_plan`] specialized to [`cost_matrix`]`(h, w)` on both marginals;
/// uses the separable-kernel half-steps, ~(h+w)/n of the dense cost per
/// iteration.
pub fn sinkhorn_plan_grid(
    tape: &mut Tape,
    a: Var,
    b: Var,
    h: usize,
    w: usize,
    cfg: &SinkhornConfig,
) -> SinkhornRun {
    let cost = cost_matrix(h, w);
    sinkhorn_plan_impl(tape, a, b, &cost, Some((h, w)), cfg)
}

fn sinkhorn_plan_impl(
    tape: &mut Tape,
    a: Var,
    b: Var,
    cost: &Tensor,
    grid: Option<(usize, usize)>,
    cfg: &SinkhornConfig,
) -> SinkhornRun {
    assert!(cfg.epsilon > 0.0 && cfg.max_iters >= 1);
    let (n, m) = (tape.value(a).numel(), tape.value(b).numel());
    assert_eq!(cost.shape(), &[n, m], "cost matrix shape");
    let a_val = tape.value(a).clone();
    let b_val = tape.value(b).clone();
    for (name, v) in [("a", &a_val), ("b", &b_val)] {
        assert!(v.data().iter().all(|&x| x >= 0.0), "negative entries in marginal {name}");
        assert!(v.sum() > 0.0, "zero-sum marginal {name}");
        assert!((v.sum() - 1.0).abs() < 1e-9, "marginal {name} sums to {}", v.sum());
    }
    let kernel_at = |epsilon: f64| match grid {
        Some((h, w)) => StepKernel::grid(h, w, epsilon),
        None => StepKernel::dense(cost, epsilon),
    };
    let kernel = kernel_at(cfg.epsilon);
    let log_kernel = {
        let mut k = cost.clone();
        k.scale_assign(-1.0 / cfg.epsilon);
        Rc::new(k)
    };
    let a_floor = tape.add_const(a, 1e-300);
    let log_a = tape.ln(a_floor);
    let b_floor = tape.add_const(b, 1e-300);
    let log_b = tape.ln(b_floor);

    // Epsilon scaling: a few iterations at coarser regularization warm-start
    // the potentials, cutting the iteration count at the target epsilon by an
    // order of magnitude. Gradients flow through the whole schedule.
    const WARM_LEVELS: [f64; 3] = [8.0, 4.0, 2.0];
    const WARM_ITERS: usize = 8;
    let mut g = tape.constant(Tensor::zeros(&[m]));
    for (li, &mult) in WARM_LEVELS.iter().enumerate() {
        let warm = kernel_at(cfg.epsilon * mult);
        for _ in 0..WARM_ITERS {
            let f = warm.row_step(tape, g, log_a);
            g = warm.col_step(tape, f, log_b);
        }
        // keep the dual potential eps*g continuous across the switch
        let next = WARM_LEVELS.get(li + 1).copied().unwrap_or(1.0);
        g = tape.scale(g, mult / next);
    }
    let mut f = kernel.row_step(tape, g, log_a);
    let mut iters = 0;
    let mut residuals = Vec::new();
    loop {
        g = kernel.col_step(tape, f, log_b);
        let f_next = kernel.row_step(tape, g, log_a);
        // Row residual after the column update: row sum i of the current plan
        // is exp(f_i + lse_i) with lse_i = log_a_i - f_next_i. Stopping uses
        // the worst single row ("row sums within tol"); the recorded residual
        // is the L1 total.
        let mut err_l1 = 0.0;
        let mut err_max = 0.0f64;
        {
            let fv = tape.value(f).data();
            let fnv = tape.value(f_next).data();
            let lav = tape.value(log_a).data();
            for i in 0..n {
                let e = ((fv[i] + lav[i] - fnv[i]).exp() - a_val.data()[i]).abs();
                err_l1 += e;
                err_max = err_max.max(e);
            }
        }
        residuals.push(err_l1);
        f = f_next;
        iters += 1;
        if err_max < cfg.tol || iters >= cfg.max_iters {
            break;
        }
    }
    let plan = tape.sinkhorn_plan_from_potentials(f, g, Rc::clone(&log_kernel));
    let marginal_err = {
        let p = tape.value(plan).data();
        let mut row_err = 0.0;
        let mut col_sums = vec![0.0; m];
        for i in 0..n {
            let mut rs = 0.0;
            for j in 0..m {
                rs += p[i * m + j];
                col_sums[j] += p[i * m + j];
            }
            row_err += (rs - a_val.data()[i]).abs();
        }
        let col_err: f64 =
            col_sums.iter().zip(b_val.data()).map(|(c, b)| (c - b).abs()).sum();
        row_err.max(col_err)
    };
    SinkhornRun { plan, iters, marginal_err, residuals }
}

/// Entropic OT cost between the normalized prediction and ground truth.
/// Returns `None` when either total mass is zero (term skipped).
pub fn ot_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &GroundTruthGrid,
    cfg: &SinkhornConfig,
) -> Option<(Var, usize, f64)> {
    let shape = tape.value(pred).shape().to_vec();
    assert_eq!(&shape[..], gt.grid.shape(), "ot_loss shape mismatch");
    let (h, w) = (shape[0], shape[1]);
    let n = h * w;
    if tape.value(pred).sum() <= 0.0 || gt.total() <= 0.0 {
        return None;
    }
    let cost = cost_matrix(h, w);
    let flat = tape.reshape(pred, &[n]);
    let floored = tape.add_const(flat, MASS_FLOOR);
    let total = tape.sum_all(floored);
    let a = tape.div_by_scalar(floored, total);
    let b_val = {
        let mut b = gt.grid.reshaped(&[n]);
        for v in b.data_mut() {
            *v += MASS_FLOOR;
        }
        let s = b.sum();
        b.scale_assign(1.0 / s);
        b
    };
    let b = tape.constant(b_val);
    let run = sinkhorn_plan_impl(tape, a, b, &cost, Some((h, w)), cfg);
    let cost_const = tape.constant(cost);
    let weighted = tape.mul(run.plan, cost_const);
    let loss = tape.sum_all(weighted);
    Some((loss, run.iters, run.marginal_err))
}

/// ||D||_1 * 1/2 * || D'/||D'||_1 - D/||D||_1 ||_1 (count scaling optional).
/// Returns `None` when either total is zero.
pub fn tv_loss(tape: &mut Tape, pred: Var, gt: &GroundTruthGrid, count_scale: bool) -> Option<Var> {
    let shape = tape.value(pred).shape().to_vec();
    assert_eq!(&shape[..], gt.grid.shape(), "tv_loss shape mismatch");
    let gt_total = gt.total();
    if tape.value(pred).sum() <= 0.0 || gt_total <= 0.0 {
        return None;
    }
    let n = shape.iter().product();
    let flat = tape.reshape(pred, &[n]);
    let total = tape.sum_all(flat);
    let p_norm = tape.div_by_scalar(flat, total);
    let g_norm = {
        let mut g = gt.grid.reshaped(&[n]);
        g.scale_assign(1.0 / gt_total);
        g
    };
    let g_const = tape.constant(g_norm);
    let diff = tape.sub(p_norm, g_const);
    let absd = tape.abs(diff);
    let l1 = tape.sum_all(absd);
    let scale = if count_scale { 0.5 * gt_total } else { 0.5 };
    Some(tape.scale(l1, scale))
}

/// |D_hat - ||D||_1|, the count-regression loss.
pub fn rtm_loss(tape: &mut Tape, d_hat: Var, gt: &GroundTruthGrid) -> Var {
    assert_eq!(tape.value(d_hat).numel(), 1, "rtm_loss expects a scalar estimate");
    let t = tape.add_const(d_hat, -gt.total());
    let t = tape.abs(t);
    tape.reshape(t, &[1])
}

/// Per-term values of one total-loss evaluation, for logging.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossBreakdown {
    pub count: f64,
    pub ot: f64,
    pub tv: f64,
    pub rtm: f64,
    pub aux: Vec<f64>,
    pub total: f64,
}

/// Density loss for one map: count + lambda1 * OT + lambda2 * TV.
fn density_loss(
    tape: &mut Tape,
    pred: Var,
    gt: &GroundTruthGrid,
    w: &LossWeights,
    cfg: &SinkhornConfig,
) -> (Var, f64, f64, f64) {
    let count = count_loss(tape, pred, gt);
    let count_v = tape.value(count).item();
    let mut acc = count;
    let mut ot_v = 0.0;
    let mut tv_v = 0.0;
    if w.lambda1 > 0.0 {
        if let Some((ot, _, _)) = ot_loss(tape, pred, gt, cfg) {
            ot_v = tape.value(ot).item();
            let t = tape.scale(ot, w.lambda1);
            acc = tape.add(acc, t);
        }
    }
    if w.lambda2 > 0.0 {
        if let Some(tv) = tv_loss(tape, pred, gt, w.tv_count_scale) {
            tv_v = tape.value(tv).item();
            let t = tape.scale(tv, w.lambda2);
            acc = tape.add(acc, t);
        }
    }
    (acc, count_v, ot_v, tv_v)
}

/// L = L_d(main) + lambda * L_r + sum_i aux_weight * L_d(aux_i)
pub fn total_loss(
    tape: &mut Tape,
    main_pred: Var,
    aux_preds: &[Var],
    gt: &GroundTruthGrid,
    d_hat: Option<Var>,
    w: &LossWeights,
    cfg: &SinkhornConfig,
) -> (Var, LossBreakdown) {
    let (mut acc, count_v, ot_v, tv_v) = density_loss(tape, main_pred, gt, w, cfg);
    let mut rtm_v = 0.0;
    if let Some(d_hat) = d_hat {
        if w.lambda > 0.0 {
            let r = rtm_loss(tape, d_hat, gt);
            rtm_v = tape.value(r).item();
            let t = tape.scale(r, w.lambda);
            acc = tape.add(acc, t);
        }
    }
    let mut aux_vals = Vec::with_capacity(aux_preds.len());
    for &aux in aux_preds {
        let (ld, c, o, t) = density_loss(tape, aux, gt, w, cfg);
        aux_vals.push(c + w.lambda1 * o + w.lambda2 * t);
        if w.aux_weight > 0.0 {
            let scaled = tape.scale(ld, w.aux_weight);
            acc = tape.add(acc, scaled);
        }
    }
    let total = tape.value(acc).item();
    (
        acc,
        LossBreakdown { count: count_v, ot: ot_v, tv: tv_v, rtm: rtm_v, aux: aux_vals, total },
    )
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub mae: f64,
    pub mse: f64,
    pub nae: f64,
    /// Samples excluded from NAE because their ground-truth count was zero.
    pub nae_excluded: usize,
}

/// MAE, root-mean-square error, and count-normalized absolute error over
/// per-image counts.
pub fn metrics(pred_counts: &[f64], gt_counts: &[f64]) -> Metrics {
    assert_eq!(pred_counts.len(), gt_counts.len());
    assert!(!pred_counts.is_empty(), "metrics over an empty set");
    let n = pred_counts.len() as f64;
    let mae = pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / n;
    let mse = (pred_counts
        .iter()
        .zip(gt_counts)
        .map(|(p, g)| (p - g) * (p - g))
        .sum::<f64>()
        / n)
        .sqrt();
    let mut nae_sum = 0.0;
    let mut nae_n = 0usize;
    let mut excluded = 0usize;
    for (p, g) in pred_counts.iter().zip(gt_counts) {
        if *g > 0.0 {
            nae_sum += (p - g).abs() / g;
            nae_n += 1;
        } else {
            excluded += 1;
        }
    }
    let nae = if nae_n > 0 { nae_sum / nae_n as f64 } else { 0.0 };
    Metrics { mae, mse, nae, nae_excluded: excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(shape: &[usize], data: Vec<f64>) -> GroundTruthGrid {
        GroundTruthGrid::new(Tensor::new(shape, data))
    }

    #[test]
    fn count_loss_identical_maps_is_zero() {
        let mut tape = Tape::new();
        let g = gt(&[2, 2], vec![1.0, 0.0, 2.0, 1.0]);
        let pred = tape.leaf(g.grid.clone(), true);
        let l = count_loss(&mut tape, pred, &g);
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn count_loss_hand_example() {
        let mut tape = Tape::new();
        let g = gt(&[1, 2], vec![3.0, 4.0]);
        let pred = tape.leaf(Tensor::new(&[1, 2], vec![9.0, 1.0]), true);
        let l = count_loss(&mut tape, pred, &g);
        assert_eq!(tape.value(l).item(), 3.0);
    }

    #[test]
    fn count_loss_gradient_is_sign() {
        let mut tape = Tape::new();
        let g = gt(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]);
        let pred = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 1.0, 2.0, 0.5]), true);
        let l = count_loss(&mut tape, pred, &g);
        tape.backward(l);
        for &gv in tape.grad(pred).unwrap().data() {
            assert_eq!(gv, 1.0);
        }
        let err = gradcheck::max_rel_error(
            |t, vs| {
                let g = gt(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]);
                count_loss(t, vs[0], &g)
            },
            &[Tensor::new(&[2, 2], vec![3.0, 1.0, 2.0, 0.5])],
            1e-5,
        );
        assert!(err < 1e-4, "count_loss fd err {err}");
    }

    #[test]
    fn cost_matrix_diagonal_zero_and_symmetric() {
        let c = cost_matrix(3, 4);
        let n = 12;
        for i in 0..n {
            assert_eq!(c.data()[i * n + i], 0.0);
            for j in 0..n {
                assert_eq!(c.data()[i * n + j], c.data()[j * n + i]);
                assert!(c.data()[i * n + j] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn cost_matrix_1x2_off_diagonal_is_one() {
        let c = cost_matrix(1, 2);
        assert_eq!(c.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn sinkhorn_point_mass_plan() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]), false);
        let b = tape.leaf(Tensor::new(&[4], vec![0.0, 0.0, 1.0, 0.0]), false);
        let c = cost_matrix(2, 2);
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 500, tol: 1e-10 };
        let run = sinkhorn_plan(&mut tape, a, b, &c, &cfg);
        let p = tape.value(run.plan).data().to_vec();
        for (idx, v) in p.iter().enumerate() {
            if idx == 2 * 4 + 2 {
                assert!((v - 1.0).abs() < 1e-6, "mass entry {v}");
            } else {
                assert!(*v < 1e-6, "stray mass {v} at {idx}");
            }
        }
        let transport: f64 = p.iter().zip(c.data()).map(|(p, c)| p * c).sum();
        assert!(transport < 1e-6);
    }

    #[test]
    #[should_panic(expected = "zero-sum marginal")]
    fn sinkhorn_rejects_zero_marginal() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(&[2], vec![0.0, 0.0]), false);
        let b = tape.leaf(Tensor::new(&[2], vec![0.5, 0.5]), false);
        let c = cost_matrix(1, 2);
        sinkhorn_plan(&mut tape, a, b, &c, &SinkhornConfig::default());
    }

    fn brute_force_uniform_ot(support_a: &[usize], support_b: &[usize], c: &Tensor) -> f64 {
        assert_eq!(support_a.len(), support_b.len());
        let k = support_a.len();
        let n = c.shape()[1];
        let mut idx: Vec<usize> = (0..k).collect();
        let mut best = f64::INFINITY;
        permute(&mut idx, 0, &mut |perm| {
            let cost: f64 = (0..k)
                .map(|i| c.data()[support_a[i] * n + support_b[perm[i]]])
                .sum::<f64>()
                / k as f64;
            best = best.min(cost);
        });
        best
    }

    fn permute(idx: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == idx.len() {
            visit(idx);
            return;
        }
        for i in k..idx.len() {
            idx.swap(k, i);
            permute(idx, k + 1, visit);
            idx.swap(k, i);
        }
    }

    #[test]
    fn sinkhorn_matches_assignment_optimum_on_small_supports() {
        let cases: Vec<(usize, usize, Vec<usize>, Vec<usize>)> = vec![
            (1, 4, vec![0, 1], vec![2, 3]),
            (3, 3, vec![0, 4], vec![8, 2]),
            (3, 3, vec![0, 1, 2], vec![6, 7, 8]),
            (2, 4, vec![0, 3, 5, 6], vec![1, 2, 4, 7]),
        ];
        let cfg = SinkhornConfig { epsilon: 1e-3, max_iters: 20000, tol: 1e-10 };
        for (h, w, sa, sb) in cases {
            let n = h * w;
            let c = cost_matrix(h, w);
            let mut av = vec![0.0; n];
            let mut bv = vec![0.0; n];
            for &i in &sa {
                av[i] = 1.0 / sa.len() as f64;
            }
            for &j in &sb {
                bv[j] = 1.0 / sb.len() as f64;
            }
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(&[n], av), false);
            let b = tape.leaf(Tensor::new(&[n], bv), false);
            let run = sinkhorn_plan(&mut tape, a, b, &c, &cfg);
            let p = tape.value(run.plan).data();
            let got: f64 = p.iter().zip(c.data()).map(|(p, c)| p * c).sum();
            let want = brute_force_uniform_ot(&sa, &sb, &c);
            assert!(
                (got - want).abs() <= 0.02 * want.max(1e-9),
                "{h}x{w} supports {sa:?}->{sb:?}: sinkhorn {got} vs optimum {want}"
            );
        }
    }

    #[test]
    fn sinkhorn_marginals_converge_on_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 64;
        let c = cost_matrix(8, 8);
        let cfg = SinkhornConfig { epsilon: 0.01, max_iters: 2000, tol: 1e-8 };
        for _ in 0..3 {
            let mut av: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let mut bv: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let (sa, sb) = (av.iter().sum::<f64>(), bv.iter().sum::<f64>());
            av.iter_mut().for_each(|v| *v /= sa);
            bv.iter_mut().for_each(|v| *v /= sb);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(&[n], av), false);
            let b = tape.leaf(Tensor::new(&[n], bv), false);
            let run = sinkhorn_plan(&mut tape, a, b, &c, &cfg);
            assert!(run.marginal_err < 1e-6, "marginal err {}", run.marginal_err);
            assert!(tape.value(run.plan).data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn grid_half_step_matches_dense_half_step() {
        // The separable half-step must agree with the dense one (same cost,
        // same inputs) in both value and gradient, to rounding error.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (h, w) = (3, 5);
        let n = h * w;
        let cost = cost_matrix(h, w);
        for eps in [1.0, 0.1, 0.01] {
            let gv: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let lav: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..0.0)).collect();
            let dense = StepKernel::dense(&cost, eps);
            let grid = StepKernel::grid(h, w, eps);
            let run = |kern: &StepKernel| {
                let mut tape = Tape::new();
                let g = tape.leaf(Tensor::new(&[n], gv.clone()), true);
                let la = tape.leaf(Tensor::new(&[n], lav.clone()), true);
                let f = kern.row_step(&mut tape, g, la);
                // asymmetric upstream gradient so the backward is exercised
                let wts =
                    tape.constant(Tensor::new(&[n], (0..n).map(|i| 0.3 + i as f64).collect()));
                let weighted = tape.mul(f, wts);
                let loss = tape.sum_all(weighted);
                tape.backward(loss);
                (tape.value(f).data().to_vec(), tape.grad(g).unwrap().data().to_vec())
            };
            let (fd, gd) = run(&dense);
            let (fg, gg) = run(&grid);
            for i in 0..n {
                assert!((fd[i] - fg[i]).abs() < 1e-12, "value mismatch at {i}");
                assert!((gd[i] - gg[i]).abs() < 1e-10, "grad mismatch at {i}");
            }
        }
    }

    #[test]
    fn grid_plan_matches_dense_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (h, w) = (4, 4);
        let n = h * w;
        let c = cost_matrix(h, w);
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 500, tol: 1e-9 };
        let mut av: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let mut bv: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let (sa, sb) = (av.iter().sum::<f64>(), bv.iter().sum::<f64>());
        av.iter_mut().for_each(|v| *v /= sa);
        bv.iter_mut().for_each(|v| *v /= sb);
        let run_with = |grid: bool| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(&[n], av.clone()), false);
            let b = tape.leaf(Tensor::new(&[n], bv.clone()), false);
            let run = if grid {
                sinkhorn_plan_grid(&mut tape, a, b, h, w, &cfg)
            } else {
                sinkhorn_plan(&mut tape, a, b, &c, &cfg)
            };
            (tape.value(run.plan).data().to_vec(), run.iters)
        };
        let (pd, id) = run_with(false);
        let (pg, ig) = run_with(true);
        assert_eq!(id, ig, "iteration counts diverged");
        for i in 0..n * n {
            assert!((pd[i] - pg[i]).abs() < 1e-12, "plan mismatch at {i}");
        }
    }

    #[test]
    fn sinkhorn_residuals_decrease_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 16;
        let c = cost_matrix(4, 4);
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 300, tol: 1e-9 };
        for _ in 0..5 {
            let mut av: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let mut bv: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let (sa, sb) = (av.iter().sum::<f64>(), bv.iter().sum::<f64>());
            av.iter_mut().for_each(|v| *v /= sa);
            bv.iter_mut().for_each(|v| *v /= sb);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(&[n], av), false);
            let b = tape.leaf(Tensor::new(&[n], bv), false);
            let run = sinkhorn_plan(&mut tape, a, b, &c, &cfg);
            for pair in run.residuals.windows(2) {
                assert!(
                    pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-15,
                    "residual increased: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn ot_loss_self_transport_vanishes_with_epsilon() {
        let g = gt(&[4, 4], {
            let mut v = vec![0.0; 16];
            v[5] = 2.0;
            v[10] = 1.0;
            v[3] = 1.0;
            v
        });
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.05, 0.01] {
            let cfg = SinkhornConfig { epsilon: eps, max_iters: 2000, tol: 1e-9 };
            let mut tape = Tape::new();
            let mut pred_v = g.grid.clone();
            pred_v.scale_assign(3.0);
            let pred = tape.leaf(pred_v, true);
            let (l, _, _) = ot_loss(&mut tape, pred, &g, &cfg).unwrap();
            let v = tape.value(l).item();
            assert!(v < prev, "not monotone: {v} after {prev} at eps {eps}");
            prev = v;
        }
        assert!(prev < 0.02, "self transport at eps=0.01: {prev}");
    }

    #[test]
    fn ot_loss_shifted_mass_approaches_unit_cost() {
        let g = gt(&[1, 2], vec![1.0, 0.0]);
        let cfg = SinkhornConfig { epsilon: 1e-3, max_iters: 5000, tol: 1e-12 };
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 10.0]), true);
        let (l, _, _) = ot_loss(&mut tape, pred, &g, &cfg).unwrap();
        let v = tape.value(l).item();
        assert!((v - 1.0).abs() < 0.01, "shifted-mass loss {v}");
    }

    #[test]
    fn ot_loss_scale_invariant() {
        let g = gt(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 500, tol: 1e-10 };
        let base = Tensor::new(&[2, 2], vec![0.5, 0.25, 0.5, 1.0]);
        let mut vals = Vec::new();
        for c in [1.0, 7.0] {
            let mut tape = Tape::new();
            let mut pv = base.clone();
            pv.scale_assign(c);
            let pred = tape.leaf(pv, true);
            let (l, _, _) = ot_loss(&mut tape, pred, &g, &cfg).unwrap();
            vals.push(tape.value(l).item());
        }
        assert!((vals[0] - vals[1]).abs() < 1e-9, "{vals:?}");
    }

    #[test]
    fn ot_loss_skipped_on_zero_mass() {
        let cfg = SinkhornConfig::default();
        let g0 = gt(&[1, 2], vec![0.0, 0.0]);
        let g1 = gt(&[1, 2], vec![1.0, 0.0]);
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 1.0]), true);
        assert!(ot_loss(&mut tape, pred, &g0, &cfg).is_none());
        let zero = tape.leaf(Tensor::zeros(&[1, 2]), true);
        assert!(ot_loss(&mut tape, zero, &g1, &cfg).is_none());
    }

    #[test]
    fn ot_loss_gradient_matches_finite_differences() {
        let cfg = SinkhornConfig { epsilon: 0.1, max_iters: 50, tol: 0.0 };
        let err = gradcheck::max_rel_error(
            |t, vs| {
                let g = gt(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]);
                ot_loss(t, vs[0], &g, &cfg).unwrap().0
            },
            &[Tensor::new(&[2, 2], vec![0.4, 0.9, 0.3, 1.2])],
            1e-5,
        );
        assert!(err < 1e-3, "ot fd err {err}");
    }

    #[test]
    fn tv_loss_proportional_prediction_is_zero() {
        let g = gt(&[2, 2], vec![1.0, 0.0, 3.0, 0.0]);
        let mut tape = Tape::new();
        let mut pv = g.grid.clone();
        pv.scale_assign(0.25);
        let pred = tape.leaf(pv, true);
        let l = tv_loss(&mut tape, pred, &g, true).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn tv_loss_disjoint_1x2_hand_value() {
        let g = gt(&[1, 2], vec![1.0, 0.0]);
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 4.0]), true);
        let l = tv_loss(&mut tape, pred, &g, true).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_loss_bounded_by_gt_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gv: Vec<f64> = (0..6).map(|_| rng.gen_range(0..4) as f64).collect();
            if gv.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let pv: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..5.0)).collect();
            let g = gt(&[2, 3], gv);
            let mut tape = Tape::new();
            let pred = tape.leaf(Tensor::new(&[2, 3], pv), true);
            let l = tv_loss(&mut tape, pred, &g, true).unwrap();
            assert!(tape.value(l).item() <= g.total() + 1e-12);
        }
    }

    #[test]
    fn tv_loss_gradient_matches_finite_differences() {
        let err = gradcheck::max_rel_error(
            |t, vs| {
                let g = gt(&[2, 2], vec![1.0, 0.0, 2.0, 1.0]);
                tv_loss(t, vs[0], &g, true).unwrap()
            },
            &[Tensor::new(&[2, 2], vec![0.4, 0.9, 0.3, 1.2])],
            1e-5,
        );
        assert!(err < 1e-3, "tv fd err {err}");
    }

    #[test]
    fn rtm_loss_values() {
        let g7 = gt(&[1, 2], vec![3.0, 4.0]);
        let mut tape = Tape::new();
        let exact = tape.leaf(Tensor::new(&[1], vec![7.0]), true);
        let l = rtm_loss(&mut tape, exact, &g7);
        assert_eq!(tape.value(l).item(), 0.0);
        tape.backward(l);
        assert_eq!(tape.grad(exact).unwrap().data(), &[0.0]);
        let off = tape.leaf(Tensor::new(&[1], vec![10.0]), true);
        let l2 = rtm_loss(&mut tape, off, &g7);
        assert_eq!(tape.value(l2).item(), 3.0);
    }

    #[test]
    fn total_loss_reduces_to_count_loss_with_zero_weights() {
        let g = gt(&[2, 2], vec![1.0, 0.0, 2.0, 0.0]);
        let w = LossWeights { lambda: 0.0, lambda1: 0.0, lambda2: 0.0, ..Default::default() };
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 1.0, 1.0, 1.0]), true);
        let (l, bd) = total_loss(&mut tape, pred, &[], &g, None, &w, &SinkhornConfig::default());
        assert_eq!(tape.value(l).item(), 1.0);
        assert_eq!(bd.count, 1.0);
        assert_eq!(bd.total, 1.0);
        assert_eq!(bd.ot, 0.0);
        assert_eq!(bd.tv, 0.0);
        assert_eq!(bd.rtm, 0.0);
        assert!(bd.aux.is_empty());
    }

    #[test]
    fn total_loss_perfect_prediction_near_zero() {
        let g = gt(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let w = LossWeights::default();
        let cfg = SinkhornConfig { epsilon: 0.01, max_iters: 2000, tol: 1e-9 };
        let mut tape = Tape::new();
        let pred = tape.leaf(g.grid.clone(), true);
        let d_hat = tape.leaf(Tensor::new(&[1], vec![3.0]), true);
        let aux = tape.leaf(g.grid.clone(), true);
        let (l, _) = total_loss(&mut tape, pred, &[aux], &g, Some(d_hat), &w, &cfg);
        // exactly matching maps leave only the entropic self-transport bias
        assert!(tape.value(l).item() < 0.01, "residual {}", tape.value(l).item());
    }

    #[test]
    fn total_loss_matches_hand_assembled_terms() {
        let g = gt(&[2, 2], vec![2.0, 0.0, 1.0, 0.0]);
        let w = LossWeights::default();
        let cfg = SinkhornConfig { epsilon: 0.05, max_iters: 500, tol: 1e-10 };
        let pred_v = Tensor::new(&[2, 2], vec![0.7, 0.2, 1.4, 0.1]);
        let aux_v = Tensor::new(&[2, 2], vec![0.3, 0.3, 0.3, 0.3]);

        let mut tape = Tape::new();
        let pred = tape.leaf(pred_v.clone(), true);
        let aux = tape.leaf(aux_v.clone(), true);
        let d_hat = tape.leaf(Tensor::new(&[1], vec![4.5]), true);
        let (l, bd) = total_loss(&mut tape, pred, &[aux], &g, Some(d_hat), &w, &cfg);
        let got = tape.value(l).item();

        let mut oracle = 0.0;
        for v in [&pred_v, &aux_v] {
            let mut t2 = Tape::new();
            let p = t2.leaf(v.clone(), true);
            let c = count_loss(&mut t2, p, &g);
            oracle += t2.value(c).item();
            let (o, _, _) = ot_loss(&mut t2, p, &g, &cfg).unwrap();
            oracle += w.lambda1 * t2.value(o).item();
            let tv = tv_loss(&mut t2, p, &g, true).unwrap();
            oracle += w.lambda2 * t2.value(tv).item();
        }
        oracle += w.lambda * (4.5 - 3.0);
        assert!((got - oracle).abs() < 1e-9, "total {got} vs oracle {oracle}");
        assert!((bd.total - got).abs() < 1e-12);
        assert_eq!(bd.aux.len(), 1);
    }

    #[test]
    fn total_loss_gradients_flow_to_all_inputs() {
        let g = gt(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let w = LossWeights::default();
        let cfg = SinkhornConfig { epsilon: 0.1, max_iters: 50, tol: 0.0 };
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[2, 2], vec![0.4, 0.9, 0.3, 1.2]), true);
        let aux = tape.leaf(Tensor::new(&[2, 2], vec![0.2, 0.1, 0.8, 0.5]), true);
        let d_hat = tape.leaf(Tensor::new(&[1], vec![5.0]), true);
        let (l, _) = total_loss(&mut tape, pred, &[aux], &g, Some(d_hat), &w, &cfg);
        tape.backward(l);
        for v in [pred, aux, d_hat] {
            assert!(tape.grad(v).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn metrics_hand_example() {
        let m = metrics(&[5.0, 10.0], &[4.0, 12.0]);
        assert!((m.mae - 1.5).abs() < 1e-12);
        assert!((m.mse - 2.5f64.sqrt()).abs() < 1e-12);
        assert!((m.nae - (0.25 + 2.0 / 12.0) / 2.0).abs() < 1e-12);
        assert_eq!(m.nae_excluded, 0);
    }

    #[test]
    fn metrics_perfect_and_single_sample() {
        let m = metrics(&[3.0, 8.0], &[3.0, 8.0]);
        assert_eq!((m.mae, m.mse, m.nae), (0.0, 0.0, 0.0));
        let s = metrics(&[9.0], &[4.0]);
        assert_eq!(s.mae, 5.0);
        assert_eq!(s.mse, 5.0);
    }

    #[test]
    fn metrics_excludes_zero_gt_from_nae() {
        let m = metrics(&[2.0, 5.0], &[0.0, 4.0]);
        assert_eq!(m.nae_excluded, 1);
        assert!((m.nae - 0.25).abs() < 1e-12);
    }

    #[test]
    fn metrics_mse_at_least_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..100.0)).collect();
            let m = metrics(&p, &g);
            assert!(m.mse >= m.mae - 1e-12);
        }
    }
}
