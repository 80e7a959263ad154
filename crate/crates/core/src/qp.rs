//! Dense convex QP solver for problems of the form
//!
//! ```text
//!     minimize    1/2 x^T Q x + p^T x
//!     subject to  G x <= h
//! ```
//!
//! with Q symmetric positive semidefinite. The solver runs operator-splitting
//! (ADMM) iterations on an internally equilibrated copy of the problem and
//! periodically attempts an exact active-set "polish" solve; a solution is
//! only reported as `Solved` when the KKT residuals of the original problem
//! pass the configured tolerances.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::ConfigError;

/// Interval (in ADMM iterations) between convergence checks, polish attempts
/// and step-size updates.
const CHECK_EVERY: usize = 25;
/// Complementarity slackness bound certified for `Solved` results.
const COMP_TOL: f64 = 1e-6;
/// Over-relaxation factor.
const ALPHA: f64 = 1.6;
/// Proximal regularization on the x-update.
const SIGMA: f64 = 1e-6;
/// Diagonal perturbation of the polish KKT dual block.
const POLISH_DELTA: f64 = 1e-9;
/// Equilibration sweeps.
const RUIZ_ITERS: usize = 10;

/// Dense convex QP data. Construction validates shapes, symmetry and
/// finiteness.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub p: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        q: DMatrix<f64>,
        p: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
    ) -> Result<Self, ConfigError> {
        let dim = p.len();
        if q.nrows() != dim || q.ncols() != dim {
            return Err(ConfigError::new(format!(
                "Q is {}x{}, expected {dim}x{dim}",
                q.nrows(),
                q.ncols()
            )));
        }
        if g.ncols() != dim && g.nrows() != 0 {
            return Err(ConfigError::new(format!("G has {} columns, expected {dim}", g.ncols())));
        }
        if g.nrows() != h.len() {
            return Err(ConfigError::new(format!(
                "G has {} rows but h has {} entries",
                g.nrows(),
                h.len()
            )));
        }
        if (&q - q.transpose()).amax() >= 1e-10 {
            return Err(ConfigError::new("Q must be symmetric"));
        }
        let finite =
            q.iter().chain(p.iter()).chain(g.iter()).chain(h.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(ConfigError::new("QP data must be finite"));
        }
        Ok(Self { q, p, g, h })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.h.len()
    }

    /// Objective value 1/2 x^T Q x + p^T x.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.q * x).dot(x) + self.p.dot(x)
    }
}

/// Solver tolerances and iteration budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    /// Ridge added to Q (relative to its diagonal scale) when the smallest
    /// eigenvalue estimate of the equilibrated Q is below 1e-12.
    pub regularization: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { eps_primal: 1e-8, eps_dual: 1e-8, max_iter: 10_000, regularization: 1e-10 }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.eps_primal > 0.0 && self.eps_dual > 0.0) {
            return Err(ConfigError::new("QP tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(ConfigError::new("max_iter must be at least 1"));
        }
        if !(self.regularization >= 0.0) {
            return Err(ConfigError::new("regularization must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Lagrange multipliers of the inequality constraints, elementwise >= 0.
    pub duals: DVector<f64>,
    /// Wall-clock solve time in seconds.
    pub solve_time: f64,
    /// Ridge actually applied to Q for this solve (0 when Q was already
    /// positive definite).
    pub regularization: f64,
}

/// KKT residuals of `(x, duals)` for the problem: positive part of the worst
/// constraint violation, infinity norm of the stationarity residual, and the
/// worst complementarity product.
pub fn kkt_residuals(prob: &QpProblem, x: &DVector<f64>, duals: &DVector<f64>) -> (f64, f64, f64) {
    let stationarity = &prob.q * x + &prob.p + prob.g.transpose() * duals;
    let dual = stationarity.amax();
    let mut primal: f64 = 0.0;
    let mut comp: f64 = 0.0;
    if prob.num_constraints() > 0 {
        let slack = &prob.g * x - &prob.h;
        for (s, y) in slack.iter().zip(duals.iter()) {
            primal = primal.max(*s);
            comp = comp.max((y * s).abs());
        }
        primal = primal.max(0.0);
    }
    (primal, dual, comp)
}

/// One-shot convenience wrapper around [`QpSolver::solve`].
pub fn solve_qp(
    prob: &QpProblem,
    settings: &QpSettings,
    warm_start: Option<&DVector<f64>>,
) -> QpSolution {
    QpSolver::new().solve(prob, settings, warm_start)
}

/// Ruiz-equilibrated copy of the problem data: `x = d .* x_scaled`,
/// `duals = e .* duals_scaled`.
struct Scaled {
    q: DMatrix<f64>,
    p: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
}

fn equilibrate(prob: &QpProblem) -> Scaled {
    let dim = prob.dim();
    let m = prob.num_constraints();
    let mut q = prob.q.clone();
    let mut g = prob.g.clone();
    let mut d = DVector::from_element(dim, 1.0);
    let mut e = DVector::from_element(m, 1.0);

    let scale_of = |s: f64| -> f64 {
        if s > 1e-12 {
            1.0 / s.sqrt().clamp(1e-6, 1e6)
        } else {
            1.0
        }
    };
    for _ in 0..RUIZ_ITERS {
        let mut dd = DVector::from_element(dim, 1.0);
        for j in 0..dim {
            let qn = q.column(j).amax();
            let gn = if m > 0 { g.column(j).amax() } else { 0.0 };
            dd[j] = scale_of(qn.max(gn));
        }
        let mut ee = DVector::from_element(m, 1.0);
        for k in 0..m {
            ee[k] = scale_of(g.row(k).amax());
        }
        for j in 0..dim {
            for i in 0..dim {
                q[(i, j)] *= dd[i] * dd[j];
            }
        }
        for k in 0..m {
            for j in 0..dim {
                g[(k, j)] *= ee[k] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
    }
    let p = prob.p.component_mul(&d);
    let h = prob.h.component_mul(&e);
    Scaled { q, p, g, h, d, e }
}

/// Dense QP solver instance. Owns mutable workspace; a single instance must
/// not be shared during a solve, but distinct instances are independent.
/// Results are a deterministic function of (problem, settings, warm start).
#[derive(Debug, Default)]
pub struct QpSolver {
    _private: (),
}

impl QpSolver {
    pub fn new() -> Self {
        Self { _private: () }
    }

    pub fn solve(
        &mut self,
        prob: &QpProblem,
        settings: &QpSettings,
        warm_start: Option<&DVector<f64>>,
    ) -> QpSolution {
        let start = Instant::now();
        let dim = prob.dim();
        let m = prob.num_constraints();

        let scaled = equilibrate(prob);
        let regularization =
            if needs_ridge(&scaled.q) { settings.regularization } else { 0.0 };
        let polisher = Polisher::new(prob, regularization, settings);

        if m == 0 {
            return self.solve_unconstrained(prob, &polisher, regularization, start);
        }

        // Scaled iterates.
        let mut x = match warm_start {
            Some(w) if w.len() == dim => w.component_div(&scaled.d),
            _ => DVector::zeros(dim),
        };
        let mut z = &scaled.g * &x;
        let mut y = DVector::zeros(m);

        // Fast path: guess the active set from the starting point and try an
        // exact solve. Catches warm starts and interior optima immediately.
        let act_tol = 1e-7 * scaled.h.amax().max(1.0);
        let guess: Vec<usize> = (0..m).filter(|&i| scaled.h[i] - z[i] <= act_tol).collect();
        if let Some(sol) = polisher.try_active_set(&guess) {
            return finish(sol, 0, regularization, start);
        }

        let mut q_reg = scaled.q.clone();
        for i in 0..dim {
            q_reg[(i, i)] += regularization;
        }

        let mut rho: f64 = 0.1;
        let mut kkt = match Cholesky::new(normal_matrix(&q_reg, &scaled.g, rho)) {
            Some(factor) => factor,
            // Conditioning beyond what equilibration can repair.
            None => {
                let x_orig = x.component_mul(&scaled.d);
                let (primal, dual, _) = kkt_residuals(prob, &x_orig, &y);
                return QpSolution {
                    x: x_orig,
                    status: QpStatus::MaxIterations,
                    iterations: 0,
                    primal_residual: primal,
                    dual_residual: dual,
                    duals: y,
                    solve_time: start.elapsed().as_secs_f64(),
                    regularization,
                };
            }
        };
        let mut y_at_last_check = y.clone();
        let mut iterations = 0;

        while iterations < settings.max_iter {
            let steps = CHECK_EVERY.min(settings.max_iter - iterations);
            for _ in 0..steps {
                let rhs = &x * SIGMA - &scaled.p + scaled.g.transpose() * (&z * rho - &y);
                let x_tilde = kkt.solve(&rhs);
                let z_tilde = &scaled.g * &x_tilde;
                x = &x_tilde * ALPHA + &x * (1.0 - ALPHA);
                let w = &z_tilde * ALPHA + &z * (1.0 - ALPHA) + &y / rho;
                let z_new = w.zip_map(&scaled.h, f64::min);
                y = (&w - &z_new) * rho;
                z = z_new;
            }
            iterations += steps;

            // Certified termination on the unscaled iterate.
            let x_orig = x.component_mul(&scaled.d);
            let y_orig = y.component_mul(&scaled.e);
            let (primal, dual, comp) = kkt_residuals(prob, &x_orig, &y_orig);
            if primal <= settings.eps_primal && dual <= settings.eps_dual && comp <= COMP_TOL {
                let sol = Polished { x: x_orig, duals: y_orig, primal, dual };
                return finish(sol, iterations, regularization, start);
            }

            // Exact solve over the active set suggested by the iterate.
            let slack = &scaled.g * &x - &scaled.h;
            let active: Vec<usize> =
                (0..m).filter(|&i| y[i] > act_tol || slack[i] >= -act_tol).collect();
            if let Some(sol) = polisher.try_active_set(&active) {
                return finish(sol, iterations, regularization, start);
            }

            // Primal infeasibility certificate from the dual update direction.
            let dy = &y - &y_at_last_check;
            let dy_norm = dy.amax();
            if dy_norm > 1e-10 {
                let dir = &dy / dy_norm;
                let cert = (scaled.g.transpose() * &dir).amax();
                let gap = scaled.h.dot(&dir);
                if cert <= 1e-8 * scaled.g.amax().max(1.0) && gap < -1e-8 {
                    return QpSolution {
                        x: x_orig,
                        status: QpStatus::PrimalInfeasible,
                        iterations,
                        primal_residual: primal,
                        dual_residual: dual,
                        duals: y_orig,
                        solve_time: start.elapsed().as_secs_f64(),
                        regularization,
                    };
                }
            }
            y_at_last_check = y.clone();

            // Balance the scaled residuals by adapting the step size.
            let gx = &scaled.g * &x;
            let r_prim = (&gx - &z).amax() / gx.amax().max(z.amax()).max(1e-10);
            let stat = &q_reg * &x + &scaled.p + scaled.g.transpose() * &y;
            let r_dual = stat.amax()
                / (&q_reg * &x)
                    .amax()
                    .max((scaled.g.transpose() * &y).amax())
                    .max(scaled.p.amax())
                    .max(1e-10);
            let rho_new = (rho * (r_prim / r_dual.max(1e-16)).sqrt()).clamp(1e-6, 1e6);
            if rho_new > 5.0 * rho || rho_new < rho / 5.0 {
                if let Some(factor) = Cholesky::new(normal_matrix(&q_reg, &scaled.g, rho_new)) {
                    rho = rho_new;
                    kkt = factor;
                }
            }
        }

        let x_orig = x.component_mul(&scaled.d);
        let y_orig = y.component_mul(&scaled.e);
        let (primal, dual, _) = kkt_residuals(prob, &x_orig, &y_orig);
        QpSolution {
            x: x_orig,
            status: QpStatus::MaxIterations,
            iterations,
            primal_residual: primal,
            dual_residual: dual,
            duals: y_orig,
            solve_time: start.elapsed().as_secs_f64(),
            regularization,
        }
    }

    fn solve_unconstrained(
        &self,
        prob: &QpProblem,
        polisher: &Polisher,
        regularization: f64,
        start: Instant,
    ) -> QpSolution {
        if let Some(sol) = polisher.try_active_set(&[]) {
            return finish(sol, 0, regularization, start);
        }
        // No certifiable stationary point (e.g. an unbounded objective):
        // report the ridged solve without the Solved status.
        let x = polisher.ridged_solution(&[]).unwrap_or_else(|| DVector::zeros(prob.dim()));
        let duals = DVector::zeros(0);
        let (primal, dual, _) = kkt_residuals(prob, &x, &duals);
        QpSolution {
            x,
            status: QpStatus::MaxIterations,
            iterations: 0,
            primal_residual: primal,
            dual_residual: dual,
            duals,
            solve_time: start.elapsed().as_secs_f64(),
            regularization,
        }
    }
}

struct Polished {
    x: DVector<f64>,
    duals: DVector<f64>,
    primal: f64,
    dual: f64,
}

fn finish(sol: Polished, iterations: usize, regularization: f64, start: Instant) -> QpSolution {
    QpSolution {
        x: sol.x,
        status: QpStatus::Solved,
        iterations,
        primal_residual: sol.primal,
        dual_residual: sol.dual,
        duals: sol.duals,
        solve_time: start.elapsed().as_secs_f64(),
        regularization,
    }
}

fn normal_matrix(q_reg: &DMatrix<f64>, g: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    let mut m = q_reg + g.transpose() * g * rho;
    for i in 0..m.nrows() {
        m[(i, i)] += SIGMA;
    }
    m
}

/// Smallest-eigenvalue probe on the equilibrated Q: admitting a Cholesky
/// factorization of Q - 1e-12 I certifies the spectrum stays above the ridge
/// threshold.
fn needs_ridge(q: &DMatrix<f64>) -> bool {
    let mut shifted = q.clone();
    for i in 0..shifted.nrows() {
        shifted[(i, i)] -= 1e-12;
    }
    Cholesky::new(shifted).is_none()
}

/// Exact equality-constrained solves over active-set guesses, in original
/// units. The KKT system carries a diagonal ridge proportional to the local
/// scale of Q for stability; iterative refinement against the unridged system
/// then removes its bias before the KKT certificate is evaluated.
struct Polisher<'a> {
    prob: &'a QpProblem,
    ridge: DVector<f64>,
    settings: &'a QpSettings,
}

impl<'a> Polisher<'a> {
    fn new(prob: &'a QpProblem, regularization: f64, settings: &'a QpSettings) -> Self {
        let ridge = DVector::from_fn(prob.dim(), |j, _| {
            regularization * prob.q[(j, j)].abs().max(1.0)
        });
        Self { prob, ridge, settings }
    }

    fn kkt_pair(&self, active: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let dim = self.prob.dim();
        let na = active.len();
        let size = dim + na;
        let mut perturbed = DMatrix::zeros(size, size);
        perturbed.view_mut((0, 0), (dim, dim)).copy_from(&self.prob.q);
        for j in 0..dim {
            perturbed[(j, j)] += self.ridge[j];
        }
        for (k, &i) in active.iter().enumerate() {
            for c in 0..dim {
                perturbed[(dim + k, c)] = self.prob.g[(i, c)];
                perturbed[(c, dim + k)] = self.prob.g[(i, c)];
            }
            perturbed[(dim + k, dim + k)] = -POLISH_DELTA;
        }
        let mut exact = perturbed.clone();
        for j in 0..dim {
            exact[(j, j)] = self.prob.q[(j, j)];
        }
        for k in 0..na {
            exact[(dim + k, dim + k)] = 0.0;
        }
        let mut rhs = DVector::zeros(size);
        rhs.rows_mut(0, dim).copy_from(&(-&self.prob.p));
        for (k, &i) in active.iter().enumerate() {
            rhs[dim + k] = self.prob.h[i];
        }
        (perturbed, exact, rhs)
    }

    /// Ridged KKT solution without refinement or certification.
    fn ridged_solution(&self, active: &[usize]) -> Option<DVector<f64>> {
        let (perturbed, _, rhs) = self.kkt_pair(active);
        let sol = perturbed.lu().solve(&rhs)?;
        Some(sol.rows(0, self.prob.dim()).into_owned())
    }

    fn try_active_set(&self, active: &[usize]) -> Option<Polished> {
        let (perturbed, exact, rhs) = self.kkt_pair(active);
        let lu = perturbed.lu();
        let mut sol = lu.solve(&rhs)?;

        for _ in 0..3 {
            let residual = &rhs - &exact * &sol;
            if residual.amax() <= 1e-13 * rhs.amax().max(1.0) {
                break;
            }
            match lu.solve(&residual) {
                Some(correction) => sol += correction,
                None => break,
            }
        }
        self.certify(active, &sol)
    }

    /// Validates a candidate KKT point against the original problem.
    fn certify(&self, active: &[usize], sol: &DVector<f64>) -> Option<Polished> {
        let dim = self.prob.dim();
        let x = sol.rows(0, dim).into_owned();
        let mut duals = DVector::zeros(self.prob.num_constraints());
        for (k, &i) in active.iter().enumerate() {
            let lambda = sol[dim + k];
            if lambda < -1e-9 {
                return None;
            }
            duals[i] = lambda.max(0.0);
        }
        let (primal, dual, comp) = kkt_residuals(self.prob, &x, &duals);
        if primal <= self.settings.eps_primal
            && dual <= self.settings.eps_dual
            && comp <= COMP_TOL
        {
            Some(Polished { x, duals, primal, dual })
        } else {
            None
        }
    }
}

/// Brute-force reference for small problems: enumerate every active set,
/// solve the equality-constrained system (with the same ridge-and-refine
/// scheme as the polish step) and keep the best feasible KKT point. Audit
/// oracle only; shares no code path with the iterative solver.
pub fn brute_force_reference(prob: &QpProblem, settings: &QpSettings) -> Option<(DVector<f64>, f64)> {
    let dim = prob.dim();
    let m = prob.num_constraints();
    assert!(m <= 20, "active-set enumeration is exponential in m");
    let regularization =
        if needs_ridge(&equilibrate(prob).q) { settings.regularization } else { 0.0 };
    let ridge =
        DVector::from_fn(dim, |j, _| regularization * prob.q[(j, j)].abs().max(1.0));

    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut best_selection: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > dim {
            continue;
        }
        let na = active.len();
        let size = dim + na;
        let mut perturbed = DMatrix::zeros(size, size);
        perturbed.view_mut((0, 0), (dim, dim)).copy_from(&prob.q);
        for j in 0..dim {
            perturbed[(j, j)] += ridge[j];
        }
        for (k, &i) in active.iter().enumerate() {
            for c in 0..dim {
                perturbed[(dim + k, c)] = prob.g[(i, c)];
                perturbed[(c, dim + k)] = prob.g[(i, c)];
            }
            perturbed[(dim + k, dim + k)] = -POLISH_DELTA;
        }
        let mut exact = perturbed.clone();
        for j in 0..dim {
            exact[(j, j)] = prob.q[(j, j)];
        }
        for k in 0..na {
            exact[(dim + k, dim + k)] = 0.0;
        }
        let mut rhs = DVector::zeros(size);
        rhs.rows_mut(0, dim).copy_from(&(-&prob.p));
        for (k, &i) in active.iter().enumerate() {
            rhs[dim + k] = prob.h[i];
        }
        let lu = perturbed.lu();
        let mut sol = match lu.solve(&rhs) {
            Some(s) => s,
            None => continue,
        };
        for _ in 0..3 {
            let residual = &rhs - &exact * &sol;
            if residual.amax() <= 1e-12 * rhs.amax().max(1.0) {
                break;
            }
            match lu.solve(&residual) {
                Some(correction) => sol += correction,
                None => break,
            }
        }
        // Skip stationarity systems the refinement could not solve.
        if (&exact * &sol - &rhs).amax() > 1e-8 * rhs.amax().max(1.0) {
            continue;
        }
        let x = sol.rows(0, dim).into_owned();
        if active.iter().enumerate().any(|(k, _)| sol[dim + k] < -1e-9) {
            continue;
        }
        let feasible = (0..m).all(|i| (prob.g.row(i) * &x)[0] <= prob.h[i] + 1e-9);
        if !feasible {
            continue;
        }
        // Rank candidates by the ridged objective: degenerate active sets
        // produce many points with equal raw objective, and the ridge is what
        // disambiguates them in the problem actually being solved.
        let ridge_term: f64 = 0.5 * x.iter().enumerate().map(|(j, v)| ridge[j] * v * v).sum::<f64>();
        let selection = prob.objective(&x) + ridge_term;
        if best_selection.is_none_or(|b| selection < b) {
            best_selection = Some(selection);
            best = Some((x, 0.0));
        }
    }
    best.map(|(x, _)| {
        let obj = prob.objective(&x);
        (x, obj)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn settings() -> QpSettings {
        QpSettings::default()
    }

    /// Random strictly feasible QP with PSD (sometimes singular) Q. When Q is
    /// rank deficient, p is restricted to the row space of the factor so the
    /// objective stays bounded below.
    fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
        let dim = rng.random_range(1..=6);
        let m = rng.random_range(0..=8);
        let rank = rng.random_range(1..=dim);
        let a = DMatrix::from_fn(rank, dim, |_, _| rng.random_range(-1.0..1.0));
        let q = a.transpose() * &a;
        let p = if rank == dim {
            DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
        } else {
            a.transpose() * DVector::from_fn(rank, |_, _| rng.random_range(-1.0..1.0))
        };
        let g = DMatrix::from_fn(m, dim, |_, _| rng.random_range(-1.0..1.0));
        // Anchor feasibility at a random interior point.
        let x0 = DVector::from_fn(dim, |_, _| rng.random_range(-0.5..0.5));
        let h = &g * &x0 + DVector::from_fn(m, |_, _| rng.random_range(0.01..1.0));
        QpProblem::new(q, p, g, h).unwrap()
    }

    #[test]
    fn unconstrained_identity() {
        let prob = QpProblem::new(
            DMatrix::identity(3, 3),
            DVector::zeros(3),
            DMatrix::zeros(0, 3),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve_qp(&prob, &settings(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.x.amax() < 1e-12);
        assert_eq!(sol.regularization, 0.0);
    }

    #[test]
    fn analytic_scalar_bound() {
        // min 1/2 x^2 - x  s.t. x <= 0.5  ->  x = 0.5, dual = 0.5.
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let sol = solve_qp(&prob, &settings(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.x[0], 0.5, epsilon = 1e-9);
        assert_relative_eq!(sol.duals[0], 0.5, epsilon = 1e-9);
        let (pr, dr, comp) = kkt_residuals(&prob, &sol.x, &sol.duals);
        assert!(pr <= 1e-10 && dr <= 1e-10 && comp <= 1e-10);
    }

    #[test]
    fn matches_active_set_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let st = settings();
        let mut solved = 0;
        while solved < 100 {
            let prob = random_qp(&mut rng);
            let oracle = match brute_force_reference(&prob, &st) {
                Some(o) => o,
                None => continue,
            };
            let sol = solve_qp(&prob, &st, None);
            assert_eq!(sol.status, QpStatus::Solved, "solver failed on a feasible problem");
            let obj = prob.objective(&sol.x);
            assert!(
                (obj - oracle.1).abs() <= 1e-6,
                "objective {obj:.9} vs oracle {:.9}",
                oracle.1
            );
            let (pr, dr, comp) = kkt_residuals(&prob, &sol.x, &sol.duals);
            assert!(pr <= st.eps_primal, "primal residual {pr:.3e}");
            assert!(dr <= st.eps_dual, "dual residual {dr:.3e}");
            assert!(comp <= 1e-6, "complementarity {comp:.3e}");
            assert!(sol.duals.iter().all(|&y| y >= 0.0));
            solved += 1;
        }
    }

    #[test]
    fn deterministic_given_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let prob = random_qp(&mut rng);
        let st = settings();
        let a = solve_qp(&prob, &st, None);
        let b = solve_qp(&prob, &st, None);
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.duals, b.duals);
    }

    #[test]
    fn warm_start_does_not_slow_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let st = settings();
        let mut total = 0;
        let mut ok = 0;
        while total < 100 {
            let prob = random_qp(&mut rng);
            let cold = solve_qp(&prob, &st, None);
            if cold.status != QpStatus::Solved {
                continue;
            }
            let warm = solve_qp(&prob, &st, Some(&cold.x));
            if warm.status == QpStatus::Solved && warm.iterations <= cold.iterations {
                ok += 1;
            }
            total += 1;
        }
        assert!(ok >= 95, "warm start no slower on only {ok}/100 problems");
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x <= 0 and -x <= -1 cannot hold together.
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            DVector::from_column_slice(&[0.0, -1.0]),
        )
        .unwrap();
        let sol = solve_qp(&prob, &settings(), None);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn ridge_applied_to_singular_q() {
        // Q = 0: pure linear objective over a box.
        let prob = QpProblem::new(
            DMatrix::zeros(2, 2),
            DVector::from_column_slice(&[1.0, -2.0]),
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            DVector::from_element(4, 1.0),
        )
        .unwrap();
        let st = settings();
        let sol = solve_qp(&prob, &st, None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_eq!(sol.regularization, st.regularization);
        assert_relative_eq!(sol.x[0], -1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn handles_badly_scaled_mixed_blocks() {
        // Mimics the visual-task structure: one block scaled like f/Z in
        // pixels, one like unit slack. The certificate must still pass in
        // original units.
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        for _ in 0..20 {
            let task = DMatrix::from_fn(2, 4, |_, _| rng.random_range(-3000.0..3000.0));
            let mut a = DMatrix::zeros(6, 8);
            a.view_mut((0, 0), (2, 4)).copy_from(&task);
            a.view_mut((2, 4), (4, 4)).copy_from(&DMatrix::identity(4, 4));
            let q = a.transpose() * &a;
            let b = DVector::from_fn(6, |i, _| {
                if i < 2 {
                    rng.random_range(-200.0..200.0)
                } else {
                    0.0
                }
            });
            let p = -(a.transpose() * &b);
            let mut g = DMatrix::zeros(8, 8);
            g.view_mut((0, 0), (4, 4)).copy_from(&DMatrix::identity(4, 4));
            g.view_mut((4, 0), (4, 4)).copy_from(&(-DMatrix::<f64>::identity(4, 4)));
            let h = DVector::from_element(8, 1000.0);
            let prob = QpProblem::new(q, p, g, h).unwrap();
            let sol = solve_qp(&prob, &settings(), None);
            assert_eq!(sol.status, QpStatus::Solved);
            assert!(sol.dual_residual <= 1e-8, "dual residual {:.3e}", sol.dual_residual);
            // The minimizer must not pick up junk in the task null space:
            // velocities stay on the scale of b / task.
            assert!(sol.x.rows(0, 4).amax() < 10.0);
        }
    }

    #[test]
    fn kkt_residuals_at_optimum_and_perturbed() {
        let prob = QpProblem::new(
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.5),
        )
        .unwrap();
        let x = DVector::from_element(1, 0.5);
        let duals = DVector::from_element(1, 0.5);
        let (pr, dr, comp) = kkt_residuals(&prob, &x, &duals);
        assert!(pr <= 1e-10 && dr <= 1e-10 && comp <= 1e-10);

        let perturbed = DVector::from_element(1, 0.5 - 1e-3);
        let (_, dr2, _) = kkt_residuals(&prob, &perturbed, &duals);
        assert!(dr2 > dr);
    }

    #[test]
    fn interior_point_with_zero_duals_has_zero_complementarity() {
        let prob = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_element(1, 10.0),
        )
        .unwrap();
        let (_, _, comp) = kkt_residuals(&prob, &DVector::from_element(2, 0.1), &DVector::zeros(1));
        assert_eq!(comp, 0.0);
    }

    #[test]
    fn rejects_asymmetric_q() {
        let mut q = DMatrix::identity(2, 2);
        q[(0, 1)] = 1e-3;
        assert!(
            QpProblem::new(q, DVector::zeros(2), DMatrix::zeros(0, 2), DVector::zeros(0)).is_err()
        );
    }
}
