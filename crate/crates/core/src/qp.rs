//! Dense convex QP solver by operator splitting (ADMM).
//!
//! Solves
//!
//! ```text
//! minimize    ½ xᵀPx + qᵀx
//! subject to  l ≤ Ax ≤ u
//! ```
//!
//! with P symmetric positive semidefinite. Two methods are provided: a
//! primal-dual interior point method with Mehrotra's predictor-corrector
//! (the default) and an operator-splitting ADMM with Ruiz equilibration,
//! over-relaxation and adaptive step size. Both finish by polishing, i.e.
//! solving the KKT system of the guessed active set. Problems here are small
//! (tens to a few hundred variables) so every matrix is dense.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Largest bound violation of `Ax`.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| (self.l[i] - ax[i]).max(ax[i] - self.u[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub method: QpMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    #[default]
    InteriorPoint,
    Admm,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-7,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho_interval: 25,
            scaling_iters: 10,
            polish: true,
            method: QpMethod::InteriorPoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_SCALE: f64 = 1e3;

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(prob: &QpProblem, iters: usize) -> Scaled {
    let n = prob.n();
    let m = prob.m();
    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let clamp = |v: f64| if v < 1e-4 { 1.0 } else { v.min(1e4) };
    for _ in 0..iters {
        let mut dd = DVector::from_element(n, 0.0);
        for j in 0..n {
            let mut norm = 0.0f64;
            for i in 0..n {
                norm = norm.max(p[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(a[(i, j)].abs());
            }
            dd[j] = 1.0 / clamp(norm).sqrt();
        }
        let mut de = DVector::from_element(m, 0.0);
        for i in 0..m {
            let mut norm = 0.0f64;
            for j in 0..n {
                norm = norm.max(a[(i, j)].abs());
            }
            de[i] = 1.0 / clamp(norm).sqrt();
        }
        for i in 0..n {
            for j in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
            q[i] *= dd[i];
        }
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] *= de[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&de);
    }
    let mean_col = if n > 0 {
        (0..n)
            .map(|j| (0..n).fold(0.0f64, |acc, i| acc.max(p[(i, j)].abs())))
            .sum::<f64>()
            / n as f64
    } else {
        0.0
    };
    let c = 1.0 / clamp(mean_col.max(inf_norm(&q)));
    p *= c;
    q *= c;
    let l = prob.l.component_mul(&e);
    let u = prob.u.component_mul(&e);
    Scaled {
        p,
        q,
        a,
        l,
        u,
        d,
        e,
        c,
    }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        l.len(),
        l.iter().zip(u.iter()).map(|(&lo, &hi)| {
            if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
                RHO_MIN
            } else if (hi - lo).abs() < 1e-12 {
                rho * RHO_EQ_SCALE
            } else {
                rho
            }
        }),
    )
}

fn factor(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    sigma: f64,
) -> nalgebra::Cholesky<f64, nalgebra::Dyn> {
    let n = p.nrows();
    let mut k = p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    let ra = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * rho[i]);
    k += a.transpose() * ra;
    match k.clone().cholesky() {
        Some(ch) => ch,
        None => {
            // P is PSD and sigma > 0, so this only happens through round-off
            for i in 0..n {
                k[(i, i)] += 1e-9;
            }
            k.cholesky()
                .expect("regularized KKT matrix is positive definite")
        }
    }
}

/// Solves a convex QP. `warm` optionally supplies `(x, y)` to start from.
pub fn solve(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    match settings.method {
        QpMethod::InteriorPoint => solve_ipm(prob, settings, warm.map(|w| w.0)),
        QpMethod::Admm => solve_admm(prob, settings, warm),
    }
}

pub fn solve_admm(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> QpSolution {
    let n = prob.n();
    let m = prob.m();
    assert_eq!(prob.p.shape(), (n, n));
    assert_eq!(prob.a.shape(), (m, n));
    assert_eq!(prob.u.len(), m);

    let s = equilibrate(prob, settings.scaling_iters);
    let mut x = DVector::from_element(n, 0.0);
    let mut y = DVector::from_element(m, 0.0);
    if let Some((wx, wy)) = warm {
        if wx.len() == n && wy.len() == m {
            x = wx.component_div(&s.d);
            y = wy.component_div(&s.e) * s.c;
        }
    }
    let project =
        |v: &DVector<f64>| DVector::from_iterator(m, (0..m).map(|i| v[i].clamp(s.l[i], s.u[i])));
    let mut z = project(&(&s.a * &x));

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&s.l, &s.u, rho);
    let mut chol = factor(&s.p, &s.a, &rho_vec, settings.sigma);
    let at = s.a.transpose();

    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;
    let mut y_prev = y.clone();

    for iter in 1..=settings.max_iter.max(1) {
        iterations = iter;
        let rhs = &x * settings.sigma - &s.q + &at * (rho_vec.component_mul(&z) - &y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        let x_new = &x_tilde * settings.alpha + &x * (1.0 - settings.alpha);
        let z_relaxed = &z_tilde * settings.alpha + &z * (1.0 - settings.alpha);
        let z_new = project(&(&z_relaxed + y.component_div(&rho_vec)));
        y_prev.copy_from(&y);
        y += rho_vec.component_mul(&(&z_relaxed - &z_new));
        x = x_new;
        z = z_new;

        let check = iter % 5 == 0 || iter == settings.max_iter;
        if !check {
            continue;
        }
        // residuals in the original (unscaled) space
        let ax = &s.a * &x;
        let px = &s.p * &x;
        let aty = &at * &y;
        let einv = s.e.map(|v| 1.0 / v);
        let dinv = s.d.map(|v| 1.0 / v);
        prim_res = inf_norm(&(&ax - &z).component_mul(&einv));
        let dual_vec = (&px + &s.q + &aty).component_mul(&dinv) / s.c;
        dual_res = inf_norm(&dual_vec);
        let prim_scale = inf_norm(&ax.component_mul(&einv)).max(inf_norm(&z.component_mul(&einv)));
        let dual_scale = inf_norm(&px.component_mul(&dinv))
            .max(inf_norm(&aty.component_mul(&dinv)))
            .max(inf_norm(&s.q.component_mul(&dinv)))
            / s.c;
        let eps_prim = settings.eps_abs + settings.eps_rel * prim_scale;
        let eps_dual = settings.eps_abs + settings.eps_rel * dual_scale;
        if prim_res <= eps_prim && dual_res <= eps_dual {
            status = QpStatus::Solved;
            break;
        }

        // primal infeasibility certificate from the dual iterate change
        let dy = (&y - &y_prev).component_mul(&s.e);
        let dy_norm = inf_norm(&dy);
        if dy_norm > 1e-12 {
            let atdy = (&at * (&y - &y_prev)).component_mul(&dinv);
            let eps = settings.eps_infeasible * dy_norm;
            let support: f64 = (0..m)
                .map(|i| {
                    let v = dy[i];
                    let lo = prob.l[i];
                    let hi = prob.u[i];
                    if v > 0.0 {
                        if hi.is_finite() {
                            hi * v
                        } else {
                            f64::INFINITY
                        }
                    } else if v < 0.0 {
                        if lo.is_finite() {
                            lo * v
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        0.0
                    }
                })
                .sum();
            if inf_norm(&atdy) <= eps && support <= -eps {
                status = QpStatus::PrimalInfeasible;
                break;
            }
        }

        if settings.adaptive_rho_interval > 0 && iter % settings.adaptive_rho_interval == 0 {
            let pr = prim_res / prim_scale.max(1e-10);
            let dr = dual_res / dual_scale.max(1e-10);
            let new_rho = (rho * (pr / dr.max(1e-12)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if new_rho > 5.0 * rho || new_rho < rho / 5.0 {
                rho = new_rho;
                rho_vec = rho_vector(&s.l, &s.u, rho);
                chol = factor(&s.p, &s.a, &rho_vec, settings.sigma);
            }
        }
    }

    let x_out = x.component_mul(&s.d);
    let y_out = y.component_mul(&s.e) / s.c;
    let mut sol = QpSolution {
        objective: prob.objective(&x_out),
        x: x_out,
        y: y_out,
        status,
        iterations,
        primal_residual: prim_res,
        dual_residual: dual_res,
        polished: false,
    };
    if settings.polish && status != QpStatus::PrimalInfeasible {
        polish(prob, &mut sol, &z.component_div(&s.e), settings);
    }
    sol
}

const IPM_MAX_ITER: usize = 100;

/// Primal-dual interior point method. Rows with `l = u` become equalities,
/// every finite bound of the remaining rows becomes an inequality
/// `g·x + s = h` with slack `s ≥ 0` and multiplier `z ≥ 0`.
pub fn solve_ipm(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<&DVector<f64>>,
) -> QpSolution {
    let n = prob.n();
    let m = prob.m();
    assert_eq!(prob.p.shape(), (n, n));
    assert_eq!(prob.a.shape(), (m, n));
    assert_eq!(prob.u.len(), m);
    let sc = equilibrate(prob, settings.scaling_iters);
    let scaled = QpProblem {
        p: sc.p.clone(),
        q: sc.q.clone(),
        a: sc.a.clone(),
        l: sc.l.clone(),
        u: sc.u.clone(),
    };
    let warm = warm
        .filter(|w| w.len() == n)
        .map(|w| w.component_div(&sc.d));
    let (x, y, status, iterations, dual_res) = ipm_core(&scaled, settings, warm);
    let x = x.component_mul(&sc.d);
    let y = y.component_mul(&sc.e) / sc.c;
    let mut sol = QpSolution {
        objective: prob.objective(&x),
        primal_residual: prob.violation(&x),
        dual_residual: dual_res / sc.c,
        x,
        y,
        status,
        iterations,
        polished: false,
    };
    if settings.polish && status != QpStatus::PrimalInfeasible {
        let ax = &prob.a * &sol.x;
        polish(prob, &mut sol, &ax, settings);
    }
    sol
}

fn ipm_core(
    prob: &QpProblem,
    settings: &QpSettings,
    warm: Option<DVector<f64>>,
) -> (DVector<f64>, DVector<f64>, QpStatus, usize, f64) {
    let n = prob.n();
    let m = prob.m();

    let nz: Vec<Vec<(usize, f64)>> = (0..m)
        .map(|i| {
            (0..n)
                .filter_map(|j| Some((j, prob.a[(i, j)])).filter(|e| e.1 != 0.0))
                .collect()
        })
        .collect();
    let mut eq = Vec::new();
    let mut ineq: Vec<(usize, f64)> = Vec::new();
    let mut h = Vec::new();
    for i in 0..m {
        let (lo, hi) = (prob.l[i], prob.u[i]);
        if lo.is_finite() && hi.is_finite() && (hi - lo).abs() < 1e-12 {
            eq.push(i);
            continue;
        }
        if hi.is_finite() {
            ineq.push((i, 1.0));
            h.push(hi);
        }
        if lo.is_finite() {
            ineq.push((i, -1.0));
            h.push(-lo);
        }
    }
    let mi = ineq.len();
    let me = eq.len();
    let h = DVector::from_vec(h);
    let b = DVector::from_iterator(me, eq.iter().map(|&i| prob.l[i]));
    let row_dot = |r: usize, x: &DVector<f64>| nz[r].iter().map(|&(j, v)| v * x[j]).sum::<f64>();
    let gx = |x: &DVector<f64>| {
        DVector::from_iterator(mi, ineq.iter().map(|&(r, sg)| sg * row_dot(r, x)))
    };
    let ex = |x: &DVector<f64>| DVector::from_iterator(me, eq.iter().map(|&r| row_dot(r, x)));
    let gtv = |v: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (k, &(r, sg)) in ineq.iter().enumerate() {
            for &(j, a) in &nz[r] {
                out[j] += sg * a * v[k];
            }
        }
        out
    };
    let etv = |v: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (k, &r) in eq.iter().enumerate() {
            for &(j, a) in &nz[r] {
                out[j] += a * v[k];
            }
        }
        out
    };

    let reg = 1e-11;
    let assemble_kkt = |d: &DVector<f64>| {
        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        for (k, &(r, _)) in ineq.iter().enumerate() {
            for &(j1, a1) in &nz[r] {
                for &(j2, a2) in &nz[r] {
                    kkt[(j1, j2)] += d[k] * a1 * a2;
                }
            }
        }
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        for (k, &r) in eq.iter().enumerate() {
            for &(j, a) in &nz[r] {
                kkt[(n + k, j)] = a;
                kkt[(j, n + k)] = a;
            }
            kkt[(n + k, n + k)] = -reg;
        }
        kkt.lu()
    };

    // least-squares starting point, shifted into the positive orthant
    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(me);
    {
        let lu = assemble_kkt(&DVector::from_element(mi, 1.0));
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-&prob.q + gtv(&h)));
        rhs.rows_mut(n, me).copy_from(&b);
        if let Some(sol) = lu.solve(&rhs) {
            if sol.iter().all(|v| v.is_finite()) {
                x = sol.rows(0, n).into_owned();
                y = sol.rows(n, me).into_owned();
            }
        }
    }
    if let Some(w) = warm {
        x = w;
    }
    let r0 = gx(&x) - &h;
    let shift = |v: DVector<f64>| {
        let lo = v.min();
        if mi == 0 || lo > 1e-8 {
            v
        } else {
            v.add_scalar(1.0 - lo)
        }
    };
    let mut s = shift(-&r0);
    let mut z = shift(r0.clone());

    let q_scale = 1.0 + inf_norm(&prob.q);
    let h_scale = 1.0 + inf_norm(&h).max(inf_norm(&b));
    let limit = settings.max_iter.clamp(1, IPM_MAX_ITER);
    let mut status = QpStatus::MaxIterations;
    let mut iterations = 0;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;

    for iter in 1..=limit {
        iterations = iter;
        let rd = &prob.p * &x + &prob.q + gtv(&z) + etv(&y);
        let rp = gx(&x) + &s - &h;
        let re = ex(&x) - &b;
        prim_res = inf_norm(&rp).max(inf_norm(&re));
        dual_res = inf_norm(&rd);
        let gap = s.dot(&z);
        let obj = prob.objective(&x);
        if prim_res <= settings.eps_abs * 1e-4 * h_scale
            && dual_res <= settings.eps_abs * 1e-4 * q_scale
            && gap <= settings.eps_abs * 1e-4 * (1.0 + obj.abs())
        {
            status = QpStatus::Solved;
            break;
        }
        if inf_norm(&z) > 1e13 {
            break;
        }
        let mu = if mi > 0 { gap / mi as f64 } else { 0.0 };

        let d = z.component_div(&s);
        let lu = assemble_kkt(&d);
        let newton = |rc: &DVector<f64>| -> Option<Direction> {
            let w = (-rc + z.component_mul(&rp)).component_div(&s);
            let mut rhs = DVector::zeros(n + me);
            rhs.rows_mut(0, n).copy_from(&(-&rd - gtv(&w)));
            rhs.rows_mut(n, me).copy_from(&(-&re));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let gdx = gx(&dx);
            let ds = -&rp - &gdx;
            let dz = &w + d.component_mul(&gdx);
            Some((dx, dy, ds, dz))
        };
        let step = |v: &DVector<f64>, dv: &DVector<f64>| {
            v.iter()
                .zip(dv.iter())
                .filter(|(_, d)| **d < 0.0)
                .map(|(a, d)| -a / d)
                .fold(1.0f64, f64::min)
        };

        let Some((_, _, ds_a, dz_a)) = newton(&s.component_mul(&z)) else {
            break;
        };
        let alpha_aff = step(&s, &ds_a).min(step(&z, &dz_a));
        let mu_aff = if mi > 0 {
            (&s + &ds_a * alpha_aff).dot(&(&z + &dz_a * alpha_aff)) / mi as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 {
            (mu_aff / mu).powi(3).min(1.0)
        } else {
            0.0
        };
        let rc =
            s.component_mul(&z) + ds_a.component_mul(&dz_a) - DVector::from_element(mi, sigma * mu);
        let Some((dx, dy, ds, dz)) = newton(&rc) else {
            break;
        };
        let alpha = (0.99 * step(&s, &ds).min(step(&z, &dz))).min(1.0);
        let finite = |v: &DVector<f64>| v.iter().all(|e| e.is_finite());
        if !(alpha > 1e-12) || ![&dx, &dy, &ds, &dz].into_iter().all(finite) {
            break;
        }
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        z += &dz * alpha;
        s.apply(|v| *v = v.max(1e-300));
        z.apply(|v| *v = v.max(1e-300));
    }
    if status != QpStatus::Solved {
        // a stalled iterate is still accepted at the plain tolerance
        let gap = s.dot(&z);
        if prim_res <= settings.eps_abs * h_scale
            && dual_res <= settings.eps_abs * q_scale
            && gap <= settings.eps_abs * (1.0 + prob.objective(&x).abs())
        {
            status = QpStatus::Solved;
        } else if prim_res > 1e-4 * h_scale {
            status = QpStatus::PrimalInfeasible;
        }
    }
    let mut y_out = DVector::zeros(m);
    for (k, &(r, sg)) in ineq.iter().enumerate() {
        y_out[r] += sg * z[k];
    }
    for (k, &r) in eq.iter().enumerate() {
        y_out[r] += y[k];
    }
    (x, y_out, status, iterations, dual_res)
}

/// Newton step `(dx, dy, ds, dz)`.
type Direction = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

/// Re-solves the equality-constrained QP defined by the active set guessed
/// from the ADMM iterate and keeps it if it is at least as good.
fn polish(prob: &QpProblem, sol: &mut QpSolution, z: &DVector<f64>, settings: &QpSettings) {
    let n = prob.n();
    let m = prob.m();
    let mut active = Vec::new();
    let mut target = Vec::new();
    for i in 0..m {
        let (lo, hi) = (prob.l[i], prob.u[i]);
        let equality = lo.is_finite() && hi.is_finite() && (hi - lo).abs() < 1e-12;
        if equality || (lo.is_finite() && z[i] - lo < -sol.y[i]) {
            active.push(i);
            target.push(lo);
        } else if hi.is_finite() && hi - z[i] < sol.y[i] {
            active.push(i);
            target.push(hi);
        }
    }
    let k = active.len();
    let delta = 1e-9;
    let mut kkt = DMatrix::from_element(n + k, n + k, 0.0);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for (r, &i) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
        kkt[(n + r, n + r)] = -delta;
    }
    let mut rhs = DVector::from_element(n + k, 0.0);
    rhs.rows_mut(0, n).copy_from(&(-&prob.q));
    for (r, t) in target.iter().enumerate() {
        rhs[n + r] = *t;
    }
    let lu = kkt.clone().lu();
    let Some(mut sol_vec) = lu.solve(&rhs) else {
        return;
    };
    // iterative refinement against the unregularized system
    let mut exact = kkt.clone();
    for i in 0..n {
        exact[(i, i)] -= delta;
    }
    for r in 0..k {
        exact[(n + r, n + r)] = 0.0;
    }
    for _ in 0..3 {
        let res = &rhs - &exact * &sol_vec;
        match lu.solve(&res) {
            Some(dx) => sol_vec += dx,
            None => break,
        }
    }
    let x = sol_vec.rows(0, n).into_owned();
    if x.iter().any(|v| !v.is_finite()) {
        return;
    }
    let mut y = DVector::from_element(m, 0.0);
    for (r, &i) in active.iter().enumerate() {
        y[i] = sol_vec[n + r];
    }
    // dual sign consistency: lower-active rows need y <= 0, upper-active y >= 0
    let tol = 1e-7 * (1.0 + inf_norm(&prob.q));
    for (r, &i) in active.iter().enumerate() {
        let eq = (prob.u[i] - prob.l[i]).abs() < 1e-12;
        if eq {
            continue;
        }
        let at_lower = target[r] == prob.l[i];
        if (at_lower && y[i] > tol) || (!at_lower && y[i] < -tol) {
            return;
        }
    }
    let viol = prob.violation(&x);
    let feas_tol = settings.eps_abs.max(1e-9) * 10.0;
    if viol > feas_tol {
        return;
    }
    let obj = prob.objective(&x);
    let stationarity = inf_norm(&(&prob.p * &x + &prob.q + prob.a.transpose() * &y));
    if viol <= sol.primal_residual.max(feas_tol) && stationarity <= sol.dual_residual.max(tol) {
        sol.x = x;
        sol.y = y;
        sol.objective = obj;
        sol.primal_residual = viol;
        sol.dual_residual = stationarity;
        sol.polished = true;
        sol.status = QpStatus::Solved;
    }
}
