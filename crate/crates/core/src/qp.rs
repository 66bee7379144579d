//! Dense convex QP with linear equality and inequality constraints.
//!
//! Dual active-set method of Goldfarb and Idnani. It starts from the
//! unconstrained minimizer and adds violated constraints one at a time, so a
//! warm start is simply the unconstrained solution. The factor `J` with
//! `J Jᵀ = Q⁻¹` is updated by Givens rotations; `Q` itself is never needed
//! inside the iteration, which lets callers supply a factor of `Q⁻¹` directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("quadratic term is not positive definite")]
    NotPositiveDefinite,
    #[error("constraints are infeasible")]
    Infeasible,
    #[error("iteration cap of {max_iter} reached")]
    IterationLimit { max_iter: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data")]
    NonFinite,
    #[error("solution failed KKT verification (residual {residual:e})")]
    KktCheck { residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpConfig {
    fn default() -> Self {
        QpConfig { tol: 1e-8, max_iter: 200 }
    }
}

/// `A x = a` and `B x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraints {
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl LinearConstraints {
    pub fn none(dim: usize) -> Self {
        LinearConstraints {
            eq_mat: DMatrix::zeros(0, dim),
            eq_rhs: DVector::zeros(0),
            ineq_mat: DMatrix::zeros(0, dim),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn inequalities(ineq_mat: DMatrix<f64>, ineq_rhs: DVector<f64>) -> Self {
        let dim = ineq_mat.ncols();
        LinearConstraints { ineq_mat, ineq_rhs, ..Self::none(dim) }
    }

    pub fn dim(&self) -> usize {
        self.eq_mat.ncols()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_mat.nrows()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_mat.nrows()
    }

    pub fn check(&self) -> Result<(), QpError> {
        let n = self.dim();
        if self.ineq_mat.ncols() != n
            || self.eq_rhs.len() != self.n_eq()
            || self.ineq_rhs.len() != self.n_ineq()
        {
            return Err(QpError::Dimension("constraint rows and right-hand sides disagree".into()));
        }
        let finite = self.eq_mat.iter().chain(self.ineq_mat.iter()).all(|x| x.is_finite())
            && self.eq_rhs.iter().all(|x| x.is_finite())
            && self.ineq_rhs.iter().all(|x| !x.is_nan());
        if !finite {
            return Err(QpError::NonFinite);
        }
        if self.ineq_rhs.iter().any(|&b| b == f64::NEG_INFINITY) {
            return Err(QpError::Infeasible);
        }
        Ok(())
    }

    /// Largest `B x - b` (0 when there are no inequality rows).
    pub fn max_ineq_violation(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_ineq())
            .map(|i| self.ineq_mat.row(i).dot(&x.transpose()) - self.ineq_rhs[i])
            .fold(0.0, f64::max)
    }

    pub fn max_eq_residual(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_eq())
            .map(|i| (self.eq_mat.row(i).dot(&x.transpose()) - self.eq_rhs[i]).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_satisfied(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.max_ineq_violation(x) <= tol && self.max_eq_residual(x) <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers `mu` for `A x = a` in `Q x + c + Aᵀ mu + Bᵀ lambda = 0`.
    pub eq_multipliers: DVector<f64>,
    /// Multipliers `lambda >= 0` for `B x <= b`.
    pub ineq_multipliers: DVector<f64>,
    /// Inequality rows active at the solution, in activation order.
    pub active_ineq: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        [self.stationarity, self.primal_eq, self.primal_ineq, self.dual, self.complementarity]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Minimize `½ xᵀ Q x + cᵀ x` subject to `cons`. The returned point has
/// passed a KKT check at `cfg.tol`, scaled by the problem magnitude.
pub fn solve_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    cons: &LinearConstraints,
    cfg: &QpConfig,
) -> Result<QpSolution, QpError> {
    let n = q.nrows();
    if q.ncols() != n || c.len() != n || cons.dim() != n {
        return Err(QpError::Dimension(format!("Q is {}x{}, c has {}, constraints have {}", q.nrows(), q.ncols(), c.len(), cons.dim())));
    }
    if !q.iter().chain(c.iter()).all(|x| x.is_finite()) {
        return Err(QpError::NonFinite);
    }
    let sym = 0.5 * (q + q.transpose());
    let chol = sym.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let x0 = -chol.solve(c);
    // J = L^{-T}: upper triangular with J Jᵀ = Q⁻¹.
    let l = chol.l();
    let j = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?
        .transpose();
    let sol = solve_with_factor(j, x0, cons, cfg)?;
    let kkt = kkt_residuals(&sym, c, cons, &sol);
    let scale = 1.0 + (&sym * &sol.x).amax() + c.amax();
    if kkt.max() > cfg.tol * scale {
        return Err(QpError::KktCheck { residual: kkt.max() });
    }
    Ok(sol)
}

/// Minimize `½ (x - x0)ᵀ Q (x - x0)` subject to `cons`, given any `J` with
/// `J Jᵀ = Q⁻¹`.
pub fn solve_with_factor(
    j: DMatrix<f64>,
    x0: DVector<f64>,
    cons: &LinearConstraints,
    cfg: &QpConfig,
) -> Result<QpSolution, QpError> {
    cons.check()?;
    let n = x0.len();
    if j.nrows() != n || j.ncols() != n || cons.dim() != n {
        return Err(QpError::Dimension("factor, start point and constraints disagree".into()));
    }
    if !j.iter().chain(x0.iter()).all(|x| x.is_finite()) {
        return Err(QpError::NonFinite);
    }
    ActiveSet::new(j, x0, cons, cfg).run()
}

/// Objective-free KKT check for `½ xᵀ Q x + cᵀ x`.
pub fn kkt_residuals(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    cons: &LinearConstraints,
    sol: &QpSolution,
) -> KktResiduals {
    let grad = q * &sol.x + c;
    kkt_from_gradient(&grad, cons, sol)
}

pub(crate) fn kkt_from_gradient(
    grad: &DVector<f64>,
    cons: &LinearConstraints,
    sol: &QpSolution,
) -> KktResiduals {
    let mut stat = grad.clone();
    if cons.n_eq() > 0 {
        stat += cons.eq_mat.transpose() * &sol.eq_multipliers;
    }
    if cons.n_ineq() > 0 {
        stat += cons.ineq_mat.transpose() * &sol.ineq_multipliers;
    }
    let complementarity = (0..cons.n_ineq())
        .map(|i| {
            let slack = cons.ineq_mat.row(i).dot(&sol.x.transpose()) - cons.ineq_rhs[i];
            (sol.ineq_multipliers[i] * slack).abs()
        })
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: stat.amax(),
        primal_eq: cons.max_eq_residual(&sol.x),
        primal_ineq: cons.max_ineq_violation(&sol.x),
        dual: sol.ineq_multipliers.iter().map(|&l| (-l).max(0.0)).fold(0.0, f64::max),
        complementarity,
    }
}

/// A constraint in the internal form `nᵀ x >= b` (or `= b`).
struct Row {
    normal: DVector<f64>,
    rhs: f64,
    equality: bool,
}

struct ActiveSet<'a> {
    x: DVector<f64>,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    /// Active row indices (into `rows`) and their multipliers.
    active: Vec<usize>,
    /// Orientation applied to each active row (equalities may be flipped).
    signs: Vec<f64>,
    u: Vec<f64>,
    rows: Vec<Row>,
    cons: &'a LinearConstraints,
    cfg: &'a QpConfig,
    iterations: usize,
}

impl<'a> ActiveSet<'a> {
    fn new(j: DMatrix<f64>, x0: DVector<f64>, cons: &'a LinearConstraints, cfg: &'a QpConfig) -> Self {
        let n = x0.len();
        let mut rows = Vec::with_capacity(cons.n_eq() + cons.n_ineq());
        for i in 0..cons.n_eq() {
            rows.push(Row { normal: cons.eq_mat.row(i).transpose(), rhs: cons.eq_rhs[i], equality: true });
        }
        for i in 0..cons.n_ineq() {
            rows.push(Row { normal: -cons.ineq_mat.row(i).transpose(), rhs: -cons.ineq_rhs[i], equality: false });
        }
        ActiveSet {
            x: x0,
            j,
            r: DMatrix::zeros(n, n),
            active: Vec::new(),
            signs: Vec::new(),
            u: Vec::new(),
            rows,
            cons,
            cfg,
            iterations: 0,
        }
    }

    fn slack(&self, k: usize) -> f64 {
        let row = &self.rows[k];
        row.normal.dot(&self.x) - row.rhs
    }

    /// Selection threshold: round-off sized, so the returned point satisfies
    /// every row to near machine precision.
    fn violation_tol(&self, k: usize) -> f64 {
        let row = &self.rows[k];
        1e-12 * (1.0 + row.rhs.abs() + row.normal.amax() * self.x.amax())
    }

    fn pick_violated(&self) -> Option<usize> {
        // equalities first, in order
        for k in 0..self.cons.n_eq() {
            if !self.active.contains(&k) {
                return Some(k);
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for k in self.cons.n_eq()..self.rows.len() {
            if self.rows[k].rhs == f64::NEG_INFINITY || self.active.contains(&k) {
                continue;
            }
            let s = self.slack(k);
            if s < -self.violation_tol(k) && best.is_none_or(|(_, sb)| s < sb) {
                best = Some((k, s));
            }
        }
        best.map(|(k, _)| k)
    }

    fn tick(&mut self) -> Result<(), QpError> {
        self.iterations += 1;
        if self.iterations > self.cfg.max_iter {
            Err(QpError::IterationLimit { max_iter: self.cfg.max_iter })
        } else {
            Ok(())
        }
    }

    fn run(mut self) -> Result<QpSolution, QpError> {
        let n = self.x.len();
        while let Some(p) = self.pick_violated() {
            // Orient equalities so that the current point violates `nᵀx >= b`.
            let mut sign = 1.0;
            if self.rows[p].equality && self.slack(p) > 0.0 {
                sign = -1.0;
            }
            let normal = &self.rows[p].normal * sign;
            let rhs = self.rows[p].rhs * sign;
            let mut u_p = 0.0;
            loop {
                self.tick()?;
                let q = self.active.len();
                let d = self.j.transpose() * &normal;
                let mut z = DVector::zeros(n);
                for col in q..n {
                    z.axpy(d[col], &self.j.column(col), 1.0);
                }
                let r = self.back_substitute(&d, q);
                // Partial step limit from dual feasibility of active inequalities.
                let mut t1 = f64::INFINITY;
                let mut drop_at = None;
                for i in 0..q {
                    if self.rows[self.active[i]].equality || r[i] <= 0.0 {
                        continue;
                    }
                    let ratio = self.u[i] / r[i];
                    let better = ratio < t1
                        || (ratio == t1 && drop_at.is_some_and(|k: usize| self.active[i] < self.active[k]));
                    if better {
                        t1 = ratio;
                        drop_at = Some(i);
                    }
                }
                let d_tail: f64 = d.rows(q, n - q).norm_squared();
                let z_dot_n = z.dot(&normal);
                let s_p = normal.dot(&self.x) - rhs;
                let t2 = if d_tail <= 1e-28 * d.norm_squared().max(f64::MIN_POSITIVE) || z_dot_n <= 0.0 {
                    f64::INFINITY
                } else {
                    -s_p / z_dot_n
                };
                let t = t1.min(t2);
                if t.is_infinite() {
                    return Err(QpError::Infeasible);
                }
                for i in 0..q {
                    self.u[i] -= t * r[i];
                }
                u_p += t;
                if t2.is_infinite() {
                    // dual-space step only
                    self.drop_constraint(drop_at.expect("finite t1 has an index"));
                    continue;
                }
                self.x.axpy(t, &z, 1.0);
                if t2 <= t1 {
                    self.add_constraint(p, sign, &d, u_p);
                    break;
                }
                self.drop_constraint(drop_at.expect("finite t1 has an index"));
            }
        }
        Ok(self.solution())
    }

    /// Solve `R[0..q, 0..q] r = d[0..q]`.
    fn back_substitute(&self, d: &DVector<f64>, q: usize) -> Vec<f64> {
        let mut r = vec![0.0; q];
        for i in (0..q).rev() {
            let mut acc = d[i];
            for k in i + 1..q {
                acc -= self.r[(i, k)] * r[k];
            }
            r[i] = acc / self.r[(i, i)];
        }
        r
    }

    fn add_constraint(&mut self, p: usize, sign: f64, d: &DVector<f64>, u_p: f64) {
        let n = self.x.len();
        let q = self.active.len();
        let mut d = d.clone();
        for col in (q + 1..n).rev() {
            let (a, b) = (d[col - 1], d[col]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            d[col - 1] = h;
            d[col] = 0.0;
            rotate_columns(&mut self.j, col - 1, col, c, s);
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.active.push(p);
        self.signs.push(sign);
        self.u.push(u_p);
    }

    fn drop_constraint(&mut self, k: usize) {
        let q = self.active.len();
        self.active.remove(k);
        self.signs.remove(k);
        self.u.remove(k);
        // shift columns left
        for col in k..q - 1 {
            for i in 0..q {
                self.r[(i, col)] = self.r[(i, col + 1)];
            }
        }
        for i in 0..q {
            self.r[(i, q - 1)] = 0.0;
        }
        // restore triangularity
        for col in k..q - 1 {
            let (a, b) = (self.r[(col, col)], self.r[(col + 1, col)]);
            if b == 0.0 {
                continue;
            }
            let h = a.hypot(b);
            let (c, s) = (a / h, b / h);
            for cc in col..q - 1 {
                let (x, y) = (self.r[(col, cc)], self.r[(col + 1, cc)]);
                self.r[(col, cc)] = c * x + s * y;
                self.r[(col + 1, cc)] = -s * x + c * y;
            }
            self.r[(col + 1, col)] = 0.0;
            rotate_columns(&mut self.j, col, col + 1, c, s);
        }
    }

    fn solution(self) -> QpSolution {
        let n_eq = self.cons.n_eq();
        let mut eq_multipliers = DVector::zeros(n_eq);
        let mut ineq_multipliers = DVector::zeros(self.cons.n_ineq());
        let mut active_ineq = Vec::new();
        for ((&k, &u), &sign) in self.active.iter().zip(&self.u).zip(&self.signs) {
            if k < n_eq {
                // Q x + c = u sign A_k  =>  mu_k = -sign u
                eq_multipliers[k] = -sign * u;
            } else {
                ineq_multipliers[k - n_eq] = u;
                active_ineq.push(k - n_eq);
            }
        }
        QpSolution { x: self.x, eq_multipliers, ineq_multipliers, active_ineq, iterations: self.iterations }
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, a: usize, b: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let (x, y) = (m[(i, a)], m[(i, b)]);
        m[(i, a)] = c * x + s * y;
        m[(i, b)] = -s * x + c * y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn boxed(dim: usize, lo: &[f64], hi: &[f64]) -> LinearConstraints {
        let mut b = DMatrix::zeros(2 * dim, dim);
        let mut rhs = DVector::zeros(2 * dim);
        for i in 0..dim {
            b[(2 * i, i)] = 1.0;
            rhs[2 * i] = hi[i];
            b[(2 * i + 1, i)] = -1.0;
            rhs[2 * i + 1] = -lo[i];
        }
        LinearConstraints::inequalities(b, rhs)
    }

    #[test]
    fn unconstrained_minimum() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let sol = solve_qp(&q, &c, &LinearConstraints::none(2), &QpConfig::default()).unwrap();
        let expected = -q.clone().lu().solve(&c).unwrap();
        assert_relative_eq!(sol.x, expected, epsilon = 1e-12);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn inactive_box_returns_origin() {
        let q = DMatrix::identity(2, 2);
        let c = DVector::zeros(2);
        let sol = solve_qp(&q, &c, &boxed(2, &[-1.0, -1.0], &[1.0, 1.0]), &QpConfig::default()).unwrap();
        assert_eq!(sol.x, DVector::zeros(2));
    }

    #[test]
    fn single_active_bound() {
        let q = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![-3.0, 0.0]);
        let b = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let cons = LinearConstraints::inequalities(b, DVector::from_vec(vec![1.0]));
        let sol = solve_qp(&q, &c, &cons, &QpConfig::default()).unwrap();
        assert_relative_eq!(sol.x, DVector::from_vec(vec![1.0, 0.0]), epsilon = 1e-14);
        // hand KKT: x - (3,0) + lambda (1,0) = 0 at x1 = 1  =>  lambda = 2
        assert_relative_eq!(sol.ineq_multipliers[0], 2.0, epsilon = 1e-14);
        assert!(kkt_residuals(&q, &c, &cons, &sol).max() < 1e-12);
    }

    #[test]
    fn equality_constraint() {
        // min |x|^2/2 s.t. x1 + x2 = 2  =>  (1, 1), mu = -1
        let q = DMatrix::identity(2, 2);
        let c = DVector::zeros(2);
        let cons = LinearConstraints {
            eq_mat: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            eq_rhs: DVector::from_vec(vec![2.0]),
            ..LinearConstraints::none(2)
        };
        let sol = solve_qp(&q, &c, &cons, &QpConfig::default()).unwrap();
        assert_relative_eq!(sol.x, DVector::from_vec(vec![1.0, 1.0]), epsilon = 1e-14);
        assert!(kkt_residuals(&q, &c, &cons, &sol).max() < 1e-12);
        // opposite orientation
        let cons2 = LinearConstraints { eq_rhs: DVector::from_vec(vec![-2.0]), ..cons };
        let sol2 = solve_qp(&q, &c, &cons2, &QpConfig::default()).unwrap();
        assert_relative_eq!(sol2.x, DVector::from_vec(vec![-1.0, -1.0]), epsilon = 1e-14);
        assert!(kkt_residuals(&q, &c, &cons2, &sol2).max() < 1e-12);
    }

    #[test]
    fn detects_infeasible() {
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        // x <= 0 and x >= 1
        let cons = LinearConstraints::inequalities(b, DVector::from_vec(vec![0.0, -1.0]));
        let r = solve_qp(&DMatrix::identity(1, 1), &DVector::zeros(1), &cons, &QpConfig::default());
        assert_eq!(r, Err(QpError::Infeasible));
    }

    #[test]
    fn rejects_indefinite() {
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let r = solve_qp(&q, &DVector::zeros(2), &LinearConstraints::none(2), &QpConfig::default());
        assert_eq!(r, Err(QpError::NotPositiveDefinite));
    }

    #[test]
    fn iteration_cap() {
        let q = DMatrix::identity(3, 3);
        let c = DVector::from_vec(vec![-5.0, -5.0, -5.0]);
        let cfg = QpConfig { max_iter: 1, ..QpConfig::default() };
        let r = solve_qp(&q, &c, &boxed(3, &[0.0; 3], &[1.0; 3]), &cfg);
        assert!(matches!(r, Err(QpError::IterationLimit { .. })));
    }

    #[test]
    fn general_polytope_drops_constraints() {
        // Constraints that must be dropped along the way.
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let c = DVector::from_vec(vec![-8.0, -6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 2.0]);
        let rhs = DVector::from_vec(vec![2.0, 1.0, 2.0]);
        let cons = LinearConstraints::inequalities(b, rhs);
        let sol = solve_qp(&q, &c, &cons, &QpConfig::default()).unwrap();
        let kkt = kkt_residuals(&q, &c, &cons, &sol);
        assert!(kkt.max() < 1e-12, "{kkt:?}");
    }

    #[test]
    fn randomized_kkt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..300 {
            let n = rng.gen_range(1..=8);
            let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let q = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
            let c = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
            let n_eq = rng.gen_range(0..n.min(3));
            let n_in = rng.gen_range(0..10);
            let cons = LinearConstraints {
                eq_mat: DMatrix::from_fn(n_eq, n, |_, _| rng.gen_range(-1.0..1.0)),
                eq_rhs: DVector::from_fn(n_eq, |_, _| rng.gen_range(-1.0..1.0)),
                // feasible: the origin shifted region always contains 0
                ineq_mat: DMatrix::from_fn(n_in, n, |_, _| rng.gen_range(-1.0..1.0)),
                ineq_rhs: DVector::from_fn(n_in, |_, _| rng.gen_range(0.1..1.0)),
            };
            let cons = if n_eq > 0 {
                // keep feasibility simple: equalities through the origin
                LinearConstraints { eq_rhs: DVector::zeros(n_eq), ..cons }
            } else {
                cons
            };
            let sol = solve_qp(&q, &c, &cons, &QpConfig::default()).unwrap();
            let kkt = kkt_residuals(&q, &c, &cons, &sol);
            assert!(kkt.max() < 1e-9, "{kkt:?}");
        }
    }
}
