//! Convergence diagnostics.
//!
//! A Lyapunov-style energy of the unfinished work, a checker for runs that
//! are expected to settle, the matrices of a sufficient condition for
//! convergence together with a coarse feasibility probe, and a bound on how
//! far a stale allocation can push the inputs.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

use crate::allocator::{Allocation, AllocationProblem};
use crate::dynamics::{Dynamics, Ensemble};
use crate::tasks::{ClassK, TaskSpec};

/// `h_m` for every task, summed over the robots allocated to it.
///
/// Robots allocated to a task also define its team frame.
pub fn task_values(tasks: &[TaskSpec], x: &Ensemble, t: f64, allocation: &Allocation) -> Vec<f64> {
    tasks
        .iter()
        .enumerate()
        .map(|(m, task)| {
            let members = allocation.members(m);
            task.value(x, t, &members, &members)
        })
        .collect()
}

/// `sum_m gamma(h_m)^2` with `h_m` from [`task_values`].
pub fn lyapunov_value(tasks: &[TaskSpec], gamma: ClassK, x: &Ensemble, t: f64, allocation: &Allocation) -> f64 {
    lyapunov_from_values(gamma, &task_values(tasks, x, t, allocation))
}

/// Same energy with every robot counted in every task.
pub fn lyapunov_value_all(tasks: &[TaskSpec], gamma: ClassK, x: &Ensemble, t: f64, allocation: &Allocation) -> f64 {
    let everyone = vec![true; x.len()];
    let values: Vec<f64> = tasks
        .iter()
        .enumerate()
        .map(|(m, task)| task.value(x, t, &allocation.members(m), &everyone))
        .collect();
    lyapunov_from_values(gamma, &values)
}

pub fn lyapunov_from_values(gamma: ClassK, values: &[f64]) -> f64 {
    values.iter().map(|&h| gamma.eval(h).powi(2)).sum()
}

/// One step of a run as far as the settling check is concerned.
#[derive(Debug, Clone, PartialEq)]
pub struct SettlingSample {
    /// Optimal allocation cost at this step.
    pub cost: f64,
    pub u_inf: f64,
    /// Largest slack among allocated (robot, task) pairs.
    pub delta_inf: f64,
    pub alpha: Allocation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SettlingReport {
    /// The run does not meet the assumptions the check relies on.
    NotApplicable { reason: String },
    Pass { converged_at: usize, alpha_settled_at: usize },
    Fail { step: usize, reason: String },
}

impl SettlingReport {
    pub fn passed(&self) -> bool {
        matches!(self, SettlingReport::Pass { .. })
    }
}

pub const SETTLE_TOL: f64 = 1e-3;

/// Why a setup falls outside the settling guarantee, if it does.
///
/// The guarantee needs driftless robots, static uncoordinated tasks and
/// robots that are specialised for every task.
pub fn settling_hypotheses(
    tasks: &[TaskSpec],
    dynamics: &dyn Dynamics,
    x: &Ensemble,
    specs: &[crate::model::Specialization],
) -> Option<String> {
    if let Some(m) = tasks.iter().position(|t| t.is_coordinated()) {
        return Some(format!("task {m} is coordinated"));
    }
    if let Some(m) = tasks.iter().position(|t| !t.is_static()) {
        return Some(format!("task {m} depends on time"));
    }
    for i in 0..x.len() {
        if dynamics.drift(x.robot(i)).iter().any(|&v| v != 0.0) {
            return Some(format!("robot {i} has drift"));
        }
    }
    if let Some(i) = specs.iter().position(|s| !s.is_positive_definite()) {
        return Some(format!("robot {i} is not specialised for every task"));
    }
    None
}

/// Checks that the allocation cost falls strictly until the inputs vanish,
/// that inputs and allocated slacks end below [`SETTLE_TOL`], and that the
/// allocation no longer changes over the last quarter of the run.
pub fn check_settling(samples: &[SettlingSample], hypotheses: Option<String>) -> SettlingReport {
    if let Some(reason) = hypotheses {
        return SettlingReport::NotApplicable { reason };
    }
    if samples.is_empty() {
        return SettlingReport::NotApplicable {
            reason: String::from("empty run"),
        };
    }
    let n = samples.len();
    let Some(converged_at) = samples.iter().position(|s| s.u_inf < SETTLE_TOL) else {
        return SettlingReport::Fail {
            step: n - 1,
            reason: format!("inputs never fell below {SETTLE_TOL}"),
        };
    };
    for k in 0..converged_at {
        if samples[k + 1].cost >= samples[k].cost {
            return SettlingReport::Fail {
                step: k + 1,
                reason: format!("cost {} did not drop below {}", samples[k + 1].cost, samples[k].cost),
            };
        }
    }
    let last = &samples[n - 1];
    if last.u_inf >= SETTLE_TOL || last.delta_inf >= SETTLE_TOL {
        return SettlingReport::Fail {
            step: n - 1,
            reason: format!("final |u| = {}, |delta| = {}", last.u_inf, last.delta_inf),
        };
    }
    let mut settled = n - 1;
    while settled > 0 && samples[settled - 1].alpha == last.alpha {
        settled -= 1;
    }
    let quarter = n - n / 4;
    if settled > quarter {
        return SettlingReport::Fail {
            step: settled,
            reason: String::from("allocation still changing in the last quarter of the run"),
        };
    }
    SettlingReport::Pass {
        converged_at,
        alpha_settled_at: settled,
    }
}

/// Matrices of the quadratic-form condition for one step.
///
/// The stacked vector is `[gamma(h), u, delta, alpha, 1]` with robots major
/// inside `u`, `delta` and `alpha`. `phi' B_0 phi <= 0` is the decay condition
/// `dV/dt <= -c V`; `B_1`, `B_2`, `B_3` encode the barrier rows, the ordering
/// rows and the box/assignment rows, each multiplied by a non-negative factor.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiProbeInstance {
    pub b0: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub b3: DMatrix<f64>,
    pub c: f64,
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub psi: DVector<f64>,
    pub a_alpha: DMatrix<f64>,
    pub b_alpha: DVector<f64>,
    pub a_delta: DMatrix<f64>,
    pub b_delta: DVector<f64>,
    pub n_tasks: usize,
    pub n_robots: usize,
    pub n_inputs: usize,
}

impl LmiProbeInstance {
    pub fn dim(&self) -> usize {
        self.b0.nrows()
    }

    /// Offsets of the `u`, `delta`, `alpha` and constant blocks.
    pub fn offsets(&self) -> [usize; 4] {
        layout(self.n_tasks, self.n_robots, self.n_inputs)
    }

    pub fn stack(&self, gamma_h: &[f64], u: &[f64], delta: &[f64], alpha: &[f64]) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(gamma_h);
        v.extend_from_slice(u);
        v.extend_from_slice(delta);
        v.extend_from_slice(alpha);
        v.push(1.0);
        assert_eq!(v.len(), self.dim(), "stacked vector has the wrong length");
        DVector::from_vec(v)
    }
}

fn layout(n_t: usize, n_r: usize, n_u: usize) -> [usize; 4] {
    let u = n_t;
    let d = u + n_u * n_r;
    let a = d + n_t * n_r;
    [u, d, a, a + n_t * n_r]
}

fn put_sym(b: &mut DMatrix<f64>, r: usize, c: usize, v: f64) {
    b[(r, c)] += v;
    if r != c {
        b[(c, r)] += v;
    }
}

/// Assignment and box rows on the stacked `alpha`: `A alpha <= b`.
pub fn alpha_rows(problem: &AllocationProblem<'_>) -> (DMatrix<f64>, DVector<f64>) {
    let (n_t, n_r) = (problem.n_tasks(), problem.n_robots());
    let f = problem.model.capability_map();
    let t = problem.model.requirements();
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let at = |i: usize, m: usize| i * n_t + m;
    for i in 0..n_r {
        rows.push(((0..n_t).map(|m| (at(i, m), 1.0)).collect(), 1.0));
    }
    for m in 0..n_t {
        for k in 0..t.ncols() {
            if t[(m, k)] > 0 {
                rows.push(((0..n_r).map(|i| (at(i, m), -f[(k, i)])).collect(), -f64::from(t[(m, k)])));
            }
        }
        rows.push(((0..n_r).map(|i| (at(i, m), 1.0)).collect(), problem.params.n_max[m] as f64));
        rows.push(((0..n_r).map(|i| (at(i, m), -1.0)).collect(), -(problem.params.n_min[m] as f64)));
    }
    for j in 0..n_t * n_r {
        rows.push((vec![(j, -1.0)], 0.0));
        rows.push((vec![(j, 1.0)], 1.0));
    }
    dense(rows, n_t * n_r)
}

/// `0 <= delta <= delta_max` on the stacked slacks.
pub fn delta_rows(n: usize, delta_max: f64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rows = Vec::with_capacity(2 * n);
    for j in 0..n {
        rows.push((vec![(j, -1.0)], 0.0));
        rows.push((vec![(j, 1.0)], delta_max));
    }
    dense(rows, n)
}

fn dense(rows: Vec<(Vec<(usize, f64)>, f64)>, cols: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(rows.len(), cols);
    let mut b = DVector::zeros(rows.len());
    for (r, (coef, rhs)) in rows.into_iter().enumerate() {
        for (j, v) in coef {
            a[(r, j)] = v;
        }
        b[r] = rhs;
    }
    (a, b)
}

/// Builds the four matrices at the state the problem was linearised at.
///
/// `allocation` decides which robots count towards each task's `h_m`, as in
/// [`lyapunov_value`].
pub fn build_b_matrices(problem: &AllocationProblem<'_>, allocation: &Allocation, c: f64) -> LmiProbeInstance {
    let (n_t, n_r, n_u) = (problem.n_tasks(), problem.n_robots(), problem.n_inputs);
    let [ou, od, oa, one] = layout(n_t, n_r, n_u);
    let dim = one + 1;
    let gamma = problem.params.gamma;
    let rows = &problem.rows;
    let h: Vec<f64> = (0..n_t)
        .map(|m| (0..n_r).filter(|&i| allocation.task_of(i) == Some(m)).map(|i| rows[i].value[m]).sum())
        .collect();

    let mut b0 = DMatrix::zeros(dim, dim);
    for m in 0..n_t {
        b0[(m, m)] = c;
        let slope = gamma.derivative(h[m]);
        let mut drift = 0.0;
        for i in (0..n_r).filter(|&i| allocation.task_of(i) == Some(m)) {
            for j in 0..n_u {
                put_sym(&mut b0, m, ou + i * n_u + j, slope * rows[i].input[m][j]);
            }
            drift += rows[i].rhs[m] - gamma.eval(rows[i].value[m]);
        }
        put_sym(&mut b0, m, one, slope * drift);
    }

    // -delta_im (L_f h_mi + L_g h_mi u_i + gamma(h_m) + delta_im) <= 0
    let mut b1 = DMatrix::zeros(dim, dim);
    for i in 0..n_r {
        for m in 0..n_t {
            let d = od + i * n_t + m;
            put_sym(&mut b1, m, d, -0.5);
            for j in 0..n_u {
                put_sym(&mut b1, ou + i * n_u + j, d, -0.5 * rows[i].input[m][j]);
            }
            b1[(d, d)] -= 1.0;
            let lf = rows[i].rhs[m] - gamma.eval(rows[i].value[m]);
            put_sym(&mut b1, d, one, -0.5 * lf);
        }
    }

    // (Phi alpha)' (Theta delta + Phi alpha - Psi) <= 0, robot by robot
    let pr = &problem.priorities;
    let (theta, phi, psi) = (pr.theta().clone(), pr.phi().clone(), pr.psi().clone());
    let theta_bar = block_diagonal(&theta, n_r);
    let phi_bar = block_diagonal(&phi, n_r);
    let psi_bar = DVector::from_iterator(psi.len() * n_r, (0..n_r).flat_map(|_| psi.iter().copied()));
    let mut b2 = DMatrix::zeros(dim, dim);
    let n_a = n_t * n_r;
    let cross = theta_bar.transpose() * &phi_bar * 0.5;
    let quad = phi_bar.transpose() * &phi_bar;
    let lin = phi_bar.transpose() * &psi_bar * -0.5;
    for r in 0..n_a {
        for s in 0..n_a {
            put_sym(&mut b2, od + r, oa + s, cross[(r, s)]);
            b2[(oa + r, oa + s)] += quad[(r, s)];
        }
        put_sym(&mut b2, oa + r, one, lin[r]);
    }

    // (A x)' (A x - b) <= 0 for the slack and allocation rows
    let (a_alpha, b_alpha) = alpha_rows(problem);
    let (a_delta, b_delta) = delta_rows(n_a, problem.params.delta_max);
    let mut b3 = DMatrix::zeros(dim, dim);
    for (a, b, off) in [(&a_delta, &b_delta, od), (&a_alpha, &b_alpha, oa)] {
        let quad = a.transpose() * a;
        let lin = a.transpose() * b * -0.5;
        for r in 0..n_a {
            for s in 0..n_a {
                b3[(off + r, off + s)] += quad[(r, s)];
            }
            put_sym(&mut b3, off + r, one, lin[r]);
        }
    }

    LmiProbeInstance {
        b0,
        b1,
        b2,
        b3,
        c,
        theta,
        phi,
        psi,
        a_alpha,
        b_alpha,
        a_delta,
        b_delta,
        n_tasks: n_t,
        n_robots: n_r,
        n_inputs: n_u,
    }
}

fn block_diagonal(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * copies, c * copies);
    for k in 0..copies {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LmiProbe {
    Feasible { tau: [f64; 3], min_eigenvalue: f64 },
    /// No grid point worked; this does not prove infeasibility.
    InfeasibleOnGrid { best_tau: [f64; 3], best_min_eigenvalue: f64 },
}

pub const LMI_EIG_TOL: f64 = 1e-8;

/// `points` log-spaced values on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && points >= 1);
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..points)
        .map(|k| (a + (b - a) * k as f64 / (points - 1) as f64).exp())
        .collect();
    grid[0] = lo;
    grid[points - 1] = hi;
    grid
}

/// Searches the grid for `tau` with `tau_1 B_1 + tau_2 B_2 + tau_3 B_3 - B_0` PSD.
pub fn probe_lmi(instance: &LmiProbeInstance, grid: &[f64]) -> LmiProbe {
    let mut best = ([0.0; 3], f64::NEG_INFINITY);
    for &t1 in grid {
        for &t2 in grid {
            for &t3 in grid {
                let m = &instance.b1 * t1 + &instance.b2 * t2 + &instance.b3 * t3 - &instance.b0;
                let lam = SymmetricEigen::new(m).eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
                if lam >= -LMI_EIG_TOL {
                    return LmiProbe::Feasible {
                        tau: [t1, t2, t3],
                        min_eigenvalue: lam,
                    };
                }
                if lam > best.1 {
                    best = ([t1, t2, t3], lam);
                }
            }
        }
    }
    LmiProbe::InfeasibleOnGrid {
        best_tau: best.0,
        best_min_eigenvalue: best.1,
    }
}

/// The constraint system `A [u; delta; alpha] <= b` of the allocation problem.
pub fn constraint_system(problem: &AllocationProblem<'_>) -> (DMatrix<f64>, DVector<f64>) {
    let (n_t, n_r, n_u) = (problem.n_tasks(), problem.n_robots(), problem.n_inputs);
    let od = n_u * n_r;
    let oa = od + n_t * n_r;
    let cols = oa + n_t * n_r;
    let pr = &problem.priorities;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for i in 0..n_r {
        for m in 0..n_t {
            let mut r: Vec<(usize, f64)> = (0..n_u).map(|j| (i * n_u + j, -problem.rows[i].input[m][j])).collect();
            r.push((od + i * n_t + m, -1.0));
            rows.push((r, problem.rows[i].rhs[m]));
        }
        for p in 0..pr.len() {
            let mut r = Vec::new();
            for m in 0..n_t {
                if pr.theta()[(p, m)] != 0.0 {
                    r.push((od + i * n_t + m, pr.theta()[(p, m)]));
                }
                if pr.phi()[(p, m)] != 0.0 {
                    r.push((oa + i * n_t + m, pr.phi()[(p, m)]));
                }
            }
            rows.push((r, pr.psi()[p]));
        }
    }
    let (ad, bd) = delta_rows(n_t * n_r, problem.params.delta_max);
    let (aa, ba) = alpha_rows(problem);
    for (a, b, off) in [(&ad, &bd, od), (&aa, &ba, oa)] {
        for r in 0..a.nrows() {
            let coef = (0..a.ncols()).filter(|&j| a[(r, j)] != 0.0).map(|j| (off + j, a[(r, j)])).collect();
            rows.push((coef, b[r]));
        }
    }
    dense(rows, cols)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("system has {columns} columns; exhaustive minors are limited to {limit}")]
    TooManyColumns { columns: usize, limit: usize },
    #[error("system has too many square submatrices ({0}) to enumerate")]
    TooManyMinors(u128),
    #[error("bound parameters must be positive")]
    InvalidParameters,
}

pub const MINOR_COLUMN_LIMIT: usize = 12;
const MINOR_COUNT_LIMIT: u128 = 20_000_000;

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k.min(n));
    (0..k as u128).fold(1u128, |acc, j| acc * (n as u128 - j) / (j + 1))
}

/// Largest `|det|` over all square submatrices of `[a | b]`.
pub fn max_abs_minor(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<f64, AnalysisError> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + 1);
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.set_column(a.ncols(), b);
    max_abs_minor_of(&m)
}

/// Largest `|det|` over all square submatrices of `m`.
pub fn max_abs_minor_of(m: &DMatrix<f64>) -> Result<f64, AnalysisError> {
    let (rows, cols) = m.shape();
    if cols > MINOR_COLUMN_LIMIT {
        return Err(AnalysisError::TooManyColumns {
            columns: cols,
            limit: MINOR_COLUMN_LIMIT,
        });
    }
    // sum_k C(r, k) C(c, k) = C(r + c, c)
    let total = binomial(rows + cols, cols);
    if total > MINOR_COUNT_LIMIT {
        return Err(AnalysisError::TooManyMinors(total));
    }
    let mut best: f64 = 0.0;
    for k in 1..=rows.min(cols) {
        let mut rsel: Vec<usize> = (0..k).collect();
        loop {
            let mut csel: Vec<usize> = (0..k).collect();
            loop {
                let sub = DMatrix::from_fn(k, k, |r, c| m[(rsel[r], csel[c])]);
                best = best.max(sub.determinant().abs());
                if !next_combination(&mut csel, cols) {
                    break;
                }
            }
            if !next_combination(&mut rsel, rows) {
                break;
            }
        }
    }
    Ok(best)
}

/// Advances `sel` to the next `k`-subset of `0..n` in lexicographic order.
fn next_combination(sel: &mut [usize], n: usize) -> bool {
    let k = sel.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if sel[i] < n - k + i {
            sel[i] += 1;
            for j in i + 1..k {
                sel[j] = sel[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Constants of the stale-allocation input bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParameters {
    pub l_qp: f64,
    pub l_miqp: f64,
    pub l_xdot: f64,
    /// Allocation latency in steps.
    pub n: usize,
    pub dt: f64,
    /// Free scalar factor of the integrality term.
    pub m: f64,
}

impl Default for BoundParameters {
    fn default() -> Self {
        Self {
            l_qp: 1.0,
            l_miqp: 1.0,
            l_xdot: 1.0,
            n: 100,
            dt: 0.033,
            m: 1.0,
        }
    }
}

impl BoundParameters {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        let ok = [self.l_qp, self.l_miqp, self.l_xdot, self.dt, self.m]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(AnalysisError::InvalidParameters)
        }
    }
}

/// Integrality term plus latency term, given the two largest minors.
pub fn staleness_bound(params: &BoundParameters, n_tasks: usize, n_robots: usize, minor_then: f64, minor_now: f64) -> f64 {
    let size = (n_tasks * n_tasks) as f64 * (n_robots as f64).powi(3);
    params.l_qp * size * params.m * (minor_then + minor_now)
        + params.l_qp * params.l_miqp * params.l_xdot * params.n as f64 * params.dt
}

/// [`staleness_bound`] with the minors computed from the two allocation problems.
pub fn staleness_bound_between(
    params: &BoundParameters,
    then: &AllocationProblem<'_>,
    now: &AllocationProblem<'_>,
) -> Result<f64, AnalysisError> {
    params.validate()?;
    let (a0, b0) = constraint_system(then);
    let (a1, b1) = constraint_system(now);
    let d0 = max_abs_minor(&a0, &b0)?;
    let d1 = max_abs_minor(&a1, &b1)?;
    Ok(staleness_bound(params, then.n_tasks(), then.n_robots(), d0, d1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::{solve_allocation, AllocatorParams};
    use crate::dynamics::SingleIntegrator;
    use crate::model::{HeterogeneityModel, Hyperedge, Specialization};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn one_robot(target: [f64; 2], at: [f64; 2]) -> (HeterogeneityModel, Vec<Specialization>, Vec<TaskSpec>, Ensemble, AllocatorParams) {
        let model = HeterogeneityModel::new(
            DMatrix::from_row_slice(1, 1, &[1]),
            DMatrix::from_element(1, 1, true),
            vec![vec![Hyperedge::unit(vec![0])]],
        )
        .unwrap();
        let specs = model.specializations().to_vec();
        (model, specs, vec![TaskSpec::goto(target)], Ensemble::from_robots(&[at]), AllocatorParams::new(1, 1))
    }

    /// Random team of goto tasks; returns everything a problem needs.
    struct Setup {
        model: HeterogeneityModel,
        specs: Vec<Specialization>,
        tasks: Vec<TaskSpec>,
        x: Ensemble,
        params: AllocatorParams,
    }

    fn random_setup(seed: u64) -> Setup {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n_r = rng.gen_range(1..=3);
        let n_t = rng.gen_range(1..=2);
        let model = HeterogeneityModel::new(
            DMatrix::from_element(n_t, 1, 0),
            DMatrix::from_element(1, n_r, true),
            vec![vec![Hyperedge::unit(vec![0])]],
        )
        .unwrap();
        let specs = (0..n_r)
            .map(|_| Specialization::new((0..n_t).map(|_| rng.gen_range(0.1..1.0)).collect()))
            .collect();
        let tasks = (0..n_t).map(|_| TaskSpec::goto([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])).collect();
        let pos: Vec<[f64; 2]> = (0..n_r).map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.0..1.0)]).collect();
        let params = AllocatorParams::new(n_t, n_r);
        Setup {
            model,
            specs,
            tasks,
            x: Ensemble::from_robots(&pos),
            params,
        }
    }

    impl Setup {
        fn problem(&self) -> AllocationProblem<'_> {
            AllocationProblem::new(
                &self.model,
                &self.specs,
                &self.tasks,
                &SingleIntegrator::new(2),
                &self.x,
                0.0,
                &self.params,
                &Allocation::idle(self.x.len()),
            )
        }
    }

    #[test]
    fn lyapunov_values() {
        let tasks = [TaskSpec::goto([0.0, 0.0])];
        let g = ClassK::default();
        let x = Ensemble::from_robots(&[[0.0, 0.0]]);
        let on = Allocation(vec![Some(0)]);
        assert_eq!(lyapunov_value(&tasks, g, &x, 0.0, &on), 0.0);
        let x = Ensemble::from_robots(&[[1.0, 0.0]]);
        assert_eq!(lyapunov_value(&tasks, g, &x, 0.0, &on), 25.0);
        assert_eq!(lyapunov_value(&tasks, g, &x, 0.0, &Allocation::idle(1)), 0.0);
        assert_eq!(lyapunov_value_all(&tasks, g, &x, 0.0, &Allocation::idle(1)), 25.0);
    }

    proptest! {
        #[test]
        fn lyapunov_ignores_robot_order(
            pos in proptest::collection::vec(proptest::array::uniform2(-1.5f64..1.5), 4),
            assign in proptest::collection::vec(proptest::option::of(0usize..2), 4),
        ) {
            let tasks = [TaskSpec::goto([0.3, 0.1]), TaskSpec::goto([-0.5, 0.4])];
            let g = ClassK::default();
            let v = lyapunov_value(&tasks, g, &Ensemble::from_robots(&pos), 0.0, &Allocation(assign.clone()));
            let perm = [2usize, 0, 3, 1];
            let pos2: Vec<[f64; 2]> = perm.iter().map(|&p| pos[p]).collect();
            let as2: Vec<Option<usize>> = perm.iter().map(|&p| assign[p]).collect();
            let w = lyapunov_value(&tasks, g, &Ensemble::from_robots(&pos2), 0.0, &Allocation(as2));
            prop_assert!((v - w).abs() <= 1e-9 * v.max(1.0));
            prop_assert!(v >= 0.0);
        }
    }

    fn sample(cost: f64, u: f64, alpha: Option<usize>) -> SettlingSample {
        SettlingSample {
            cost,
            u_inf: u,
            delta_inf: 0.0,
            alpha: Allocation(vec![alpha]),
        }
    }

    #[test]
    fn settling_checker() {
        let good: Vec<_> = (0..8)
            .map(|k| sample(10.0 / (k + 1) as f64 - if k > 4 { 1.9 } else { 0.0 }, if k < 5 { 1.0 } else { 1e-4 }, Some(0)))
            .collect();
        assert!(check_settling(&good, None).passed(), "{:?}", check_settling(&good, None));
        let mut bumpy = good.clone();
        bumpy[2].cost = 100.0;
        assert_eq!(
            match check_settling(&bumpy, None) {
                SettlingReport::Fail { step, .. } => step,
                r => panic!("{r:?}"),
            },
            2
        );
        let mut late = good.clone();
        late[7].alpha = Allocation(vec![None]);
        assert!(!check_settling(&late, None).passed());
        let already = vec![sample(0.0, 0.0, Some(0)); 4];
        assert_eq!(
            check_settling(&already, None),
            SettlingReport::Pass {
                converged_at: 0,
                alpha_settled_at: 0
            }
        );
        assert!(matches!(
            check_settling(&good, Some(String::from("coordinated"))),
            SettlingReport::NotApplicable { .. }
        ));
    }

    #[test]
    fn hypotheses_guard() {
        let d = SingleIntegrator::new(3);
        let x = Ensemble::from_robots(&[[0.0, 0.0, 0.0]]);
        let escort = TaskSpec::coverage_escort(
            crate::tasks::voronoi::CoverageDomain::default(),
            crate::tasks::Density::Uniform,
            crate::tasks::Trajectory::stationary([0.0, 0.0]),
            [0.0, 1.0],
        )
        .unwrap();
        assert!(settling_hypotheses(&[escort], &d, &x, &[Specialization::ones(1)]).is_some());
        let goto = TaskSpec::goto([0.0, 0.0]);
        assert!(settling_hypotheses(&[goto.clone()], &d, &x, &[Specialization::ones(1)]).is_none());
        assert!(settling_hypotheses(&[goto], &d, &x, &[Specialization::new(vec![0.0])]).is_some());
    }

    #[test]
    fn b_matrix_structure() {
        for seed in 0..10 {
            let s = random_setup(seed);
            let p = s.problem();
            let alloc = solve_allocation(&p).unwrap().alpha;
            let inst = build_b_matrices(&p, &alloc, 0.1);
            let n = inst.dim();
            let (n_t, n_r) = (p.n_tasks(), p.n_robots());
            assert_eq!(n, n_t + 2 * n_r + 2 * n_t * n_r + 1);
            for b in [&inst.b0, &inst.b1, &inst.b2, &inst.b3] {
                assert_eq!((b - b.transpose()).amax(), 0.0);
            }
            let [ou, od, _, one] = inst.offsets();
            // driftless robots and static tasks: no constant coupling in the decay condition
            for r in 0..n {
                assert_eq!(inst.b0[(r, one)], 0.0);
            }
            // ordering rows never touch gamma(h) or u
            for r in 0..od {
                for c in 0..od {
                    assert_eq!(inst.b2[(r, c)], 0.0);
                }
            }
            assert!(ou == n_t);
        }
    }

    #[test]
    fn quadratic_forms_match_their_inequalities() {
        for seed in 0..20 {
            let s = random_setup(seed);
            let p = s.problem();
            let sol = solve_allocation(&p).unwrap();
            let alloc = sol.alpha.clone();
            let c = 0.1;
            let inst = build_b_matrices(&p, &alloc, c);
            let (n_t, n_r) = (p.n_tasks(), p.n_robots());
            let g = p.params.gamma;
            let h: Vec<f64> = (0..n_t)
                .map(|m| (0..n_r).filter(|&i| alloc.task_of(i) == Some(m)).map(|i| p.rows[i].value[m]).sum())
                .collect();
            let gh: Vec<f64> = h.iter().map(|&v| g.eval(v)).collect();
            let u: Vec<f64> = sol.u.concat();
            let delta: Vec<f64> = sol.delta.concat();
            let alpha: Vec<f64> = (0..n_r).flat_map(|i| alloc.column(i, n_t)).collect();
            let phi = inst.stack(&gh, &u, &delta, &alpha);
            let form = |b: &DMatrix<f64>| (phi.transpose() * b * &phi)[(0, 0)];

            // decay condition: cV + 2 sum_m gamma(h_m) gamma'(h_m) dh_m/dt
            let mut vdot = 0.0;
            for m in 0..n_t {
                let rate: f64 = (0..n_r)
                    .filter(|&i| alloc.task_of(i) == Some(m))
                    .map(|i| (0..2).map(|j| p.rows[i].input[m][j] * sol.u[i][j]).sum::<f64>())
                    .sum();
                vdot += 2.0 * gh[m] * g.derivative(h[m]) * rate;
            }
            let expect0 = c * gh.iter().map(|v| v * v).sum::<f64>() + vdot;
            assert!((form(&inst.b0) - expect0).abs() <= 1e-9 * expect0.abs().max(1.0));

            let mut expect1 = 0.0;
            for i in 0..n_r {
                for m in 0..n_t {
                    let d = sol.delta[i][m];
                    let lgu: f64 = (0..2).map(|j| p.rows[i].input[m][j] * sol.u[i][j]).sum();
                    let lf = p.rows[i].rhs[m] - g.eval(p.rows[i].value[m]);
                    expect1 -= d * (lf + lgu + gh[m] + d);
                }
            }
            assert!((form(&inst.b1) - expect1).abs() <= 1e-9 * expect1.abs().max(1.0));

            let mut expect2 = 0.0;
            for i in 0..n_r {
                let a = DVector::from_vec(alloc.column(i, n_t));
                let d = DVector::from_vec(sol.delta[i].clone());
                let pa = &inst.phi * &a;
                let slack = &inst.theta * &d + &pa - &inst.psi;
                expect2 += pa.dot(&slack);
            }
            assert!((form(&inst.b2) - expect2).abs() <= 1e-9 * expect2.abs().max(1.0));
            // feasible points satisfy the ordering form
            assert!(expect2 <= 1e-6 * inst.psi.amax());

            let dv = DVector::from_vec(delta.clone());
            let av = DVector::from_vec(alpha.clone());
            let ad = &inst.a_delta * &dv;
            let aa = &inst.a_alpha * &av;
            let expect3 = ad.dot(&(&ad - &inst.b_delta)) + aa.dot(&(&aa - &inst.b_alpha));
            assert!((form(&inst.b3) - expect3).abs() <= 1e-9 * expect3.abs().max(1.0));
        }
    }

    #[test]
    fn lmi_probe_trivial_cases() {
        let grid = log_grid(1e-3, 1e3, 20);
        assert_eq!(grid.len(), 20);
        assert!((grid[0] - 1e-3).abs() < 1e-15 && (grid[19] - 1e3).abs() < 1e-9);
        let (model, specs, tasks, x, params) = one_robot([0.0, 0.0], [0.5, 0.2]);
        let d = SingleIntegrator::new(2);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &Allocation::idle(1));
        let mut inst = build_b_matrices(&p, &Allocation(vec![Some(0)]), 0.1);
        // the decay block alone can never be dominated: the gamma block of the
        // combination is -c I and the u block has no curvature
        assert!(matches!(probe_lmi(&inst, &grid), LmiProbe::InfeasibleOnGrid { .. }));
        // zero B_0 with PSD terms is feasible everywhere
        let n = inst.dim();
        inst.b0 = DMatrix::zeros(n, n);
        inst.b1 = DMatrix::identity(n, n);
        inst.b2 = DMatrix::zeros(n, n);
        inst.b3 = DMatrix::zeros(n, n);
        assert!(matches!(probe_lmi(&inst, &grid), LmiProbe::Feasible { tau, .. } if tau == [1e-3; 3]));
        // B_0 larger than anything on the grid can offset
        inst.b0 = DMatrix::identity(n, n) * 1e4;
        assert!(matches!(probe_lmi(&inst, &grid), LmiProbe::InfeasibleOnGrid { .. }));
    }

    #[test]
    fn lmi_is_never_met_with_slack_bounds() {
        // The constant entry of every matrix is zero while the slack bounds put
        // delta_max into its row, so no combination is PSD, even at the goal
        // with a vanishing rate.
        let (model, specs, tasks, x, params) = one_robot([0.2, -0.1], [0.2, -0.1]);
        let d = SingleIntegrator::new(2);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &Allocation::idle(1));
        let inst = build_b_matrices(&p, &Allocation(vec![Some(0)]), 1e-9);
        let one = inst.dim() - 1;
        for b in [&inst.b0, &inst.b1, &inst.b2, &inst.b3] {
            assert_eq!(b[(one, one)], 0.0);
        }
        assert!(inst.b3.row(one).amax() > 0.0);
        let probe = probe_lmi(&inst, &log_grid(1e-3, 1e3, 20));
        assert!(matches!(probe, LmiProbe::InfeasibleOnGrid { best_min_eigenvalue, .. } if best_min_eigenvalue < 0.0));
    }

    #[test]
    fn minor_examples() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        assert_eq!(max_abs_minor_of(&m).unwrap(), 1.0);
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(max_abs_minor_of(&m).unwrap(), 5.0);
        let wide = DMatrix::zeros(2, 13);
        assert!(matches!(max_abs_minor_of(&wide), Err(AnalysisError::TooManyColumns { .. })));
    }

    /// Same maximum, enumerated by bitmask pairs with equal population.
    fn minors_by_mask(m: &DMatrix<f64>) -> f64 {
        let (r, c) = m.shape();
        let mut best: f64 = 0.0;
        for rm in (1u32..1 << r).rev() {
            for cm in (1u32..1 << c).rev() {
                if rm.count_ones() != cm.count_ones() {
                    continue;
                }
                let rs: Vec<usize> = (0..r).filter(|k| rm >> k & 1 == 1).collect();
                let cs: Vec<usize> = (0..c).filter(|k| cm >> k & 1 == 1).collect();
                let k = rs.len();
                best = best.max(DMatrix::from_fn(k, k, |a, b| m[(rs[a], cs[b])]).determinant().abs());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn minors_agree_across_orders(
            r in 1usize..5,
            c in 1usize..5,
            vals in proptest::collection::vec(-3i32..=3, 16),
        ) {
            let m = DMatrix::from_fn(r, c, |a, b| f64::from(vals[a * 4 + b]));
            let x = max_abs_minor_of(&m).unwrap();
            let y = minors_by_mask(&m);
            prop_assert!((x - y).abs() <= 1e-9 * y.max(1.0));
        }

        #[test]
        fn bound_grows_with_every_input(
            base in proptest::array::uniform4(0.1f64..10.0),
            n in 0usize..200,
            bump in 0.0f64..5.0,
            which in 0usize..5,
        ) {
            let p = BoundParameters { l_qp: base[0], l_miqp: base[1], l_xdot: base[2], n, dt: base[3], m: 1.0 };
            let mut q = p;
            match which {
                0 => q.l_qp += bump,
                1 => q.l_miqp += bump,
                2 => q.l_xdot += bump,
                3 => q.dt += bump,
                _ => q.n += bump as usize,
            }
            prop_assert!(staleness_bound(&q, 2, 3, 1.0, 2.0) >= staleness_bound(&p, 2, 3, 1.0, 2.0));
        }
    }

    #[test]
    fn no_latency_leaves_integrality_term() {
        let p = BoundParameters {
            n: 0,
            ..BoundParameters::default()
        };
        assert_eq!(staleness_bound(&p, 2, 1, 3.0, 3.0), 4.0 * 6.0);
    }

    #[test]
    fn constraint_system_of_small_problem() {
        let (model, specs, tasks, x, params) = one_robot([0.0, 0.0], [0.5, 0.2]);
        let d = SingleIntegrator::new(2);
        let p = AllocationProblem::new(&model, &specs, &tasks, &d, &x, 0.0, &params, &Allocation::idle(1));
        let (a, b) = constraint_system(&p);
        assert_eq!(a.ncols(), 4);
        assert_eq!(a.nrows(), b.len());
        let bound = staleness_bound_between(&BoundParameters::default(), &p, &p).unwrap();
        assert!(bound.is_finite() && bound > 0.0);
    }
}
