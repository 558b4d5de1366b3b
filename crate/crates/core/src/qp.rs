//! Dense convex QP: minimise `0.5 z'Qz + c'z` subject to `Gz <= d`.
//!
//! Primal active-set method on a diagonally scaled copy of the problem.
//! Feasibility is found first by a phase-1 problem (minimise the largest
//! violation), then the working set is grown and shrunk along null-space
//! steps. Ties always go to the lowest constraint index, so runs are
//! reproducible bit for bit.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)] // float methods are inherent once std is linked (tests)
use num_traits::Float;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {what} is {found}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("Q is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("problem data contains non-finite values")]
    NonFinite,
}

/// All solver tolerances in one place.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// Symmetry check on `Q` at construction.
    pub symmetry_tol: f64,
    /// Slack below which a constraint counts as violated (scaled units).
    pub feasibility_tol: f64,
    /// Phase-1 optimum above this marks the problem infeasible.
    pub infeasibility_tol: f64,
    /// Most negative multiplier accepted at optimality (scaled units).
    pub multiplier_tol: f64,
    /// Reduced-Hessian eigenvalues below this count as zero curvature.
    pub curvature_tol: f64,
    /// Step lengths below this (relative to the iterate) count as zero.
    pub step_tol: f64,
    /// Active-set iterations allowed per `(vars + constraints)^2`.
    pub iteration_factor: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            symmetry_tol: 1e-10,
            feasibility_tol: 1e-11,
            infeasibility_tol: 1e-9,
            multiplier_tol: 1e-12,
            curvature_tol: 1e-10,
            step_tol: 1e-13,
            iteration_factor: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    q: DMatrix<f64>,
    c: DVector<f64>,
    g: DMatrix<f64>,
    d: DVector<f64>,
}

impl QpProblem {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>, g: DMatrix<f64>, d: DVector<f64>) -> Result<Self, QpError> {
        Self::with_symmetry_tol(q, c, g, d, QpSettings::default().symmetry_tol)
    }

    pub fn with_symmetry_tol(
        q: DMatrix<f64>,
        c: DVector<f64>,
        g: DMatrix<f64>,
        d: DVector<f64>,
        tol: f64,
    ) -> Result<Self, QpError> {
        let n = c.len();
        let check = |what, expected, found| {
            if expected == found {
                Ok(())
            } else {
                Err(QpError::DimensionMismatch { what, expected, found })
            }
        };
        check("Q rows", n, q.nrows())?;
        check("Q columns", n, q.ncols())?;
        check("G columns", n, g.ncols())?;
        check("d length", g.nrows(), d.len())?;
        if q.iter().chain(c.iter()).chain(g.iter()).chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let asym = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| (q[(i, j)] - q[(j, i)]).abs())
            .fold(0.0, f64::max);
        if asym > tol {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(Self { q, c, g, d })
    }

    pub fn n_vars(&self) -> usize {
        self.c.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.d.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.c.dot(z)
    }

    /// Same problem with `Q` and `c` multiplied by `s`.
    pub fn scaled_objective(&self, s: f64) -> Self {
        Self {
            q: &self.q * s,
            c: &self.c * s,
            ..self.clone()
        }
    }

    /// Same problem with one more inequality row.
    pub fn with_constraint(&self, row: &[f64], bound: f64) -> Self {
        let m = self.g.nrows();
        let mut g = self.g.clone().insert_row(m, 0.0);
        for (j, &v) in row.iter().enumerate() {
            g[(m, j)] = v;
        }
        let d = self.d.clone().push(bound);
        Self { g, d, ..self.clone() }
    }

    pub fn kkt_residuals(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
        let grad = &self.q * z + &self.c + self.g.transpose() * lambda;
        let slack = &self.g * z - &self.d;
        KktResiduals {
            stationarity: grad.amax(),
            primal: slack.iter().fold(0.0, |a, &v| a.max(v)),
            dual: lambda.iter().fold(0.0, |a, &v| a.max(-v)),
            complementarity: lambda.dot(&slack).abs(),
        }
    }
}

/// Worst violation of each optimality condition.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    /// `|Qz + c + G'lambda|_inf`
    pub stationarity: f64,
    /// `max(Gz - d)` clipped at 0
    pub primal: f64,
    /// `max(-lambda)` clipped at 0
    pub dual: f64,
    /// `|lambda'(Gz - d)|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }

    pub fn within(&self, tol: f64, dual_tol: f64) -> bool {
        self.stationarity <= tol && self.primal <= tol && self.dual <= dual_tol && self.complementarity <= tol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    /// Only reachable for non-convex or unbounded input.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
    pub multipliers: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt: KktResiduals,
    /// Optimal value of the phase-1 problem; positive means no feasible point.
    pub infeasibility: f64,
}

/// Point and working set to start from.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub active: Vec<usize>,
}

impl QpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            z: self.z.clone(),
            active: self.active.clone(),
        }
    }
}

/// Active-set solver; keeps its settings and nothing else between calls.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    pub settings: QpSettings,
}

struct Scaled {
    q: DMatrix<f64>,
    c: DVector<f64>,
    g: DMatrix<f64>,
    d: DVector<f64>,
    col: DVector<f64>,
    row: DVector<f64>,
}

impl Scaled {
    fn new(p: &QpProblem) -> Self {
        let n = p.n_vars();
        let col = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                let qjj = p.q[(j, j)];
                if qjj > 1e-300 {
                    1.0 / qjj.sqrt()
                } else {
                    1.0
                }
            }),
        );
        let mut g = p.g.clone();
        for j in 0..n {
            g.column_mut(j).scale_mut(col[j]);
        }
        let row = DVector::from_iterator(
            g.nrows(),
            (0..g.nrows()).map(|i| {
                let norm = g.row(i).norm();
                if norm > 0.0 {
                    1.0 / norm
                } else {
                    1.0
                }
            }),
        );
        for i in 0..g.nrows() {
            g.row_mut(i).scale_mut(row[i]);
        }
        let mut q = p.q.clone();
        for i in 0..n {
            for j in 0..n {
                q[(i, j)] *= col[i] * col[j];
            }
        }
        Self {
            q,
            c: p.c.component_mul(&col),
            d: p.d.component_mul(&row),
            g,
            col,
            row,
        }
    }
}

enum Outcome {
    Optimal,
    MaxIterations,
    Unbounded,
}

struct ActiveSet<'a> {
    q: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    g: &'a DMatrix<f64>,
    d: &'a DVector<f64>,
    settings: &'a QpSettings,
}

impl ActiveSet<'_> {
    fn working_rows(&self, work: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(work.len(), self.g.ncols(), |r, c| self.g[(work[r], c)])
    }

    /// Orthonormal basis of the null space of the working rows.
    fn null_space(&self, work: &[usize]) -> DMatrix<f64> {
        let n = self.g.ncols();
        let k = work.len();
        if k == 0 {
            return DMatrix::identity(n, n);
        }
        if k >= n {
            return DMatrix::zeros(n, 0);
        }
        let mut aug = DMatrix::zeros(n, k + n);
        for (r, &w) in work.iter().enumerate() {
            for c in 0..n {
                aug[(c, r)] = self.g[(w, c)];
            }
        }
        for i in 0..n {
            aug[(i, k + i)] = 1.0;
        }
        let qr = aug.qr();
        qr.q().columns(k, n - k).into_owned()
    }

    /// Multipliers of the working constraints: `A_W' lambda = -grad` in least squares.
    fn multipliers(&self, work: &[usize], grad: &DVector<f64>) -> DVector<f64> {
        if work.is_empty() {
            return DVector::zeros(0);
        }
        let at = self.working_rows(work).transpose();
        let qr = at.qr();
        let rhs = -(qr.q().transpose() * grad);
        qr.r()
            .solve_upper_triangular(&rhs)
            .unwrap_or_else(|| DVector::zeros(work.len()))
    }

    /// Search direction in the null space of the working set, and whether it is a ray.
    fn direction(&self, z: &DMatrix<f64>, grad: &DVector<f64>) -> (DVector<f64>, bool) {
        let n = self.g.ncols();
        if z.ncols() == 0 {
            return (DVector::zeros(n), false);
        }
        let gr = z.transpose() * grad;
        let hr = z.transpose() * self.q * z;
        let hr = (&hr + hr.transpose()) * 0.5;
        if let Some(chol) = hr.clone().cholesky() {
            let diag_min = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &v| a.min(v));
            if diag_min * diag_min > self.settings.curvature_tol {
                return (-(z * chol.solve(&gr)), false);
            }
        }
        let eig = SymmetricEigen::new(hr);
        let k = gr.len();
        let mut flat = DVector::zeros(k);
        let mut newton = DVector::zeros(k);
        for e in 0..k {
            let v = eig.eigenvectors.column(e);
            let proj = v.dot(&gr);
            if eig.eigenvalues[e] <= self.settings.curvature_tol {
                flat.axpy(-proj, &v, 1.0);
            } else {
                newton.axpy(-proj / eig.eigenvalues[e], &v, 1.0);
            }
        }
        // gradient along flat directions below roundoff level is noise, not a ray
        if flat.amax() > 1e-9 * (1.0 + gr.amax()) {
            let ray = z * flat;
            let norm = ray.norm();
            (ray / norm, true)
        } else {
            (z * newton, false)
        }
    }

    fn run(&self, y: &mut DVector<f64>, work: &mut Vec<usize>, max_iter: usize) -> (Outcome, usize) {
        let m = self.g.nrows();
        let mut stalls = 0usize;
        for iter in 0..max_iter {
            let grad = self.q * &*y + self.c;
            let z = self.null_space(work);
            let (p, ray) = self.direction(&z, &grad);
            let scale = 1.0 + y.amax();
            if p.amax() <= self.settings.step_tol * scale {
                let lambda = self.multipliers(work, &grad);
                let bland = stalls > 2 * (m + y.len());
                let mut drop: Option<usize> = None;
                for (r, &l) in lambda.iter().enumerate() {
                    if l < -self.settings.multiplier_tol {
                        let better = match drop {
                            None => true,
                            Some(best) if bland => work[r] < work[best],
                            Some(best) => l < lambda[best],
                        };
                        if better {
                            drop = Some(r);
                        }
                    }
                }
                match drop {
                    None => return (Outcome::Optimal, iter),
                    Some(r) => {
                        work.remove(r);
                        continue;
                    }
                }
            }
            let mut step = if ray { f64::INFINITY } else { 1.0 };
            let mut block = None;
            let pnorm = p.amax();
            for j in 0..m {
                if work.contains(&j) {
                    continue;
                }
                let gp = self.g.row(j).dot(&p.transpose());
                if gp <= 1e-12 * pnorm {
                    continue;
                }
                let slack = (self.d[j] - self.g.row(j).dot(&y.transpose())).max(0.0);
                let t = slack / gp;
                if t < step {
                    step = t;
                    block = Some(j);
                }
            }
            if step.is_infinite() {
                return (Outcome::Unbounded, iter);
            }
            if step * pnorm <= self.settings.step_tol * scale {
                stalls += 1;
            } else {
                stalls = 0;
            }
            y.axpy(step, &p, 1.0);
            if let Some(j) = block {
                work.push(j);
            }
        }
        (Outcome::MaxIterations, max_iter)
    }
}

/// Greedily keeps rows of `g` that are active at `y` and linearly independent.
fn independent_active(g: &DMatrix<f64>, d: &DVector<f64>, y: &DVector<f64>, hint: &[usize], tol: f64) -> Vec<usize> {
    let n = g.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for &j in hint {
        if j >= g.nrows() || keep.contains(&j) || keep.len() >= n {
            continue;
        }
        let resid = (g.row(j).dot(&y.transpose()) - d[j]).abs();
        if resid > tol {
            continue;
        }
        let mut v = g.row(j).transpose();
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
            keep.push(j);
        }
    }
    keep
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        Self { settings }
    }

    pub fn solve(&mut self, problem: &QpProblem, warm: Option<&WarmStart>) -> QpSolution {
        let s = &self.settings;
        let sc = Scaled::new(problem);
        let n = problem.n_vars();
        let m = problem.n_constraints();
        let max_iter = s.iteration_factor * (n + m + 1).pow(2);
        let mut y = match warm {
            Some(w) if w.z.len() == n => w.z.component_div(&sc.col),
            _ => DVector::zeros(n),
        };
        let violation = |y: &DVector<f64>| {
            (&sc.g * y - &sc.d).iter().fold(0.0, |a: f64, &v| a.max(v))
        };
        let mut iterations = 0;
        let mut infeasibility = 0.0;
        if violation(&y) > s.feasibility_tol {
            let (point, value, iters) = self.phase_one(&sc, &y, max_iter);
            iterations += iters;
            infeasibility = value;
            y = point;
            if value > s.infeasibility_tol {
                return self.finish(problem, &sc, y, Vec::new(), QpStatus::Infeasible, iterations, infeasibility);
            }
        }
        let hint: Vec<usize> = warm.map(|w| w.active.clone()).unwrap_or_default();
        let mut work = independent_active(&sc.g, &sc.d, &y, &hint, 1e-9);
        let engine = ActiveSet {
            q: &sc.q,
            c: &sc.c,
            g: &sc.g,
            d: &sc.d,
            settings: s,
        };
        let (outcome, iters) = engine.run(&mut y, &mut work, max_iter);
        iterations += iters;
        let status = match outcome {
            Outcome::Optimal => QpStatus::Optimal,
            Outcome::MaxIterations => QpStatus::MaxIterations,
            Outcome::Unbounded => QpStatus::Unbounded,
        };
        if status == QpStatus::Optimal {
            polish(&engine, &mut y, &work);
        }
        self.finish(problem, &sc, y, work, status, iterations, infeasibility)
    }

    /// Minimise the largest violation `t` over `(y, t)`; returns the point and `t`.
    fn phase_one(&self, sc: &Scaled, start: &DVector<f64>, max_iter: usize) -> (DVector<f64>, f64, usize) {
        let n = sc.g.ncols();
        let m = sc.g.nrows();
        let mut g = DMatrix::zeros(m + 1, n + 1);
        g.view_mut((0, 0), (m, n)).copy_from(&sc.g);
        for i in 0..m {
            g[(i, n)] = -1.0;
        }
        g[(m, n)] = -1.0;
        let d = sc.d.clone().push(0.0);
        let q = DMatrix::zeros(n + 1, n + 1);
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let t0 = (&sc.g * start - &sc.d).iter().fold(0.0, |a: f64, &v| a.max(v));
        let mut y = start.clone().push(t0);
        let engine = ActiveSet {
            q: &q,
            c: &c,
            g: &g,
            d: &d,
            settings: &self.settings,
        };
        let mut work = Vec::new();
        let (_, iters) = engine.run(&mut y, &mut work, max_iter);
        let t = y[n];
        (y.rows(0, n).into_owned(), t.max(0.0), iters)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        problem: &QpProblem,
        sc: &Scaled,
        y: DVector<f64>,
        mut work: Vec<usize>,
        status: QpStatus,
        iterations: usize,
        infeasibility: f64,
    ) -> QpSolution {
        let z = y.component_mul(&sc.col);
        let mut multipliers = DVector::zeros(problem.n_constraints());
        if status == QpStatus::Optimal && !work.is_empty() {
            let engine = ActiveSet {
                q: &sc.q,
                c: &sc.c,
                g: &sc.g,
                d: &sc.d,
                settings: &self.settings,
            };
            let grad = &sc.q * &y + &sc.c;
            let lw = engine.multipliers(&work, &grad);
            for (r, &j) in work.iter().enumerate() {
                multipliers[j] = lw[r].max(0.0) * sc.row[j];
            }
        }
        work.sort_unstable();
        let kkt = problem.kkt_residuals(&z, &multipliers);
        QpSolution {
            objective: problem.objective(&z),
            z,
            active: work,
            multipliers,
            status,
            iterations,
            kkt,
            infeasibility,
        }
    }
}

/// Moves the iterate exactly onto its working constraints.
fn polish(engine: &ActiveSet<'_>, y: &mut DVector<f64>, work: &[usize]) {
    if work.is_empty() {
        return;
    }
    let a = engine.working_rows(work);
    let resid = DVector::from_iterator(work.len(), work.iter().map(|&j| engine.g.row(j).dot(&y.transpose()) - engine.d[j]));
    let gram = &a * a.transpose();
    if let Some(chol) = gram.cholesky() {
        let corr = a.transpose() * chol.solve(&resid);
        *y -= corr;
    }
}

/// Convenience wrapper with default settings.
pub fn solve_qp(problem: &QpProblem, warm: Option<&WarmStart>) -> QpSolution {
    QpSolver::default().solve(problem, warm)
}
