//! Primal-dual interior-point method for separable convex QPs
//!
//! ```text
//! minimize   sum_j c_j x_j + q_j / 2 x_j^2
//! subject to A x = b,  lo <= x <= hi
//! ```
//!
//! with `q >= 0`, finite `lo` and possibly infinite `hi`. Every bound is
//! simple, so the Newton system reduces to the normal equations
//! `A D^-1 A^T dy = r` with diagonal `D`. Row orderings used by the callers
//! keep `A D^-1 A^T` banded, which is factored with a banded Cholesky.

use crate::scalar::Scalar;

/// Floor on the diagonal scaling of the normal equations. Interior
/// variables without curvature otherwise drive it to zero as mu vanishes.
const REG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub(crate) struct QpProblem<S> {
    pub q: Vec<S>,
    pub c: Vec<S>,
    pub lo: Vec<S>,
    pub hi: Vec<S>,
    /// Column-wise constraint entries `(row, coefficient)`.
    pub cols: Vec<Vec<(usize, S)>>,
    pub b: Vec<S>,
}

impl<S: Scalar> QpProblem<S> {
    pub fn new(rows: usize) -> Self {
        Self {
            q: Vec::new(),
            c: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
            cols: Vec::new(),
            b: vec![S::zero(); rows],
        }
    }

    pub fn add_var(&mut self, q: S, c: S, lo: S, hi: S, entries: Vec<(usize, S)>) -> usize {
        self.q.push(q);
        self.c.push(c);
        self.lo.push(lo);
        self.hi.push(hi);
        self.cols.push(entries);
        self.cols.len() - 1
    }

    pub fn var_count(&self) -> usize {
        self.cols.len()
    }

    pub fn row_count(&self) -> usize {
        self.b.len()
    }

    fn mul_a(&self, x: &[S], out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
        for (j, col) in self.cols.iter().enumerate() {
            for &(r, a) in col {
                out[r] = out[r] + a * x[j];
            }
        }
    }

    fn mul_at(&self, y: &[S], out: &mut [S]) {
        for (j, col) in self.cols.iter().enumerate() {
            out[j] = col.iter().fold(S::zero(), |acc, &(r, a)| acc + a * y[r]);
        }
    }

    fn bandwidth(&self) -> usize {
        self.cols
            .iter()
            .flat_map(|col| {
                col.iter()
                    .flat_map(move |&(r1, _)| col.iter().map(move |&(r2, _)| r1.abs_diff(r2)))
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmSettings<S> {
    pub max_iters: usize,
    /// Target for the largest of primal, dual and complementarity residuals.
    pub tol: S,
    /// Fraction of the distance to the boundary taken per step.
    pub boundary_fraction: S,
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution<S> {
    pub x: Vec<S>,
    pub y: Vec<S>,
    pub z: Vec<S>,
    pub w: Vec<S>,
    pub iterations: usize,
    pub residual: S,
    pub converged: bool,
}

/// Largest of `||Ax - b||`, `||Qx + c - A^T y - z + w||` and the
/// complementarity products `(x - lo) z`, `(hi - x) w`.
pub(crate) fn kkt_residual<S: Scalar>(p: &QpProblem<S>, x: &[S], y: &[S], z: &[S], w: &[S]) -> S {
    let mut ax = vec![S::zero(); p.row_count()];
    p.mul_a(x, &mut ax);
    let primal = ax
        .iter()
        .zip(&p.b)
        .map(|(a, b)| (*a - *b).abs())
        .fold(S::zero(), S::max);
    let mut aty = vec![S::zero(); p.var_count()];
    p.mul_at(y, &mut aty);
    let mut dual = S::zero();
    let mut comp = S::zero();
    for j in 0..p.var_count() {
        let rd = p.q[j] * x[j] + p.c[j] - aty[j] - z[j] + w[j];
        dual = dual.max(rd.abs());
        comp = comp.max(((x[j] - p.lo[j]) * z[j]).abs());
        if p.hi[j].is_finite() {
            comp = comp.max(((p.hi[j] - x[j]) * w[j]).abs());
        }
    }
    primal.max(dual).max(comp)
}

struct BandCholesky<S> {
    n: usize,
    k: usize,
    /// `l[i * (k + 1) + d]` holds `L[i][i - d]`.
    l: Vec<S>,
}

impl<S: Scalar> BandCholesky<S> {
    fn zeroed(n: usize, k: usize) -> Self {
        Self {
            n,
            k,
            l: vec![S::zero(); n * (k + 1)],
        }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> S {
        self.l[i * (self.k + 1) + (i - j)]
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: S) {
        let idx = i * (self.k + 1) + (i - j);
        self.l[idx] = self.l[idx] + v;
    }

    /// In-place factorization. Non-positive pivots are replaced by a huge
    /// value, which zeroes the corresponding component of the solution.
    fn factor(&mut self) {
        let k = self.k;
        let max_diag = (0..self.n)
            .map(|i| self.at(i, i))
            .fold(S::zero(), S::max)
            .max(S::min_positive_value());
        let floor = max_diag * S::epsilon() * S::epsilon();
        let huge = S::lit(1e30).min(S::max_value().sqrt());
        for i in 0..self.n {
            let lo = i.saturating_sub(k);
            for j in lo..=i {
                let mut sum = self.at(i, j);
                for p in lo.max(j.saturating_sub(k))..j {
                    sum = sum - self.at(i, p) * self.at(j, p);
                }
                let idx = i * (k + 1) + (i - j);
                if i == j {
                    self.l[idx] = if sum > floor { sum.sqrt() } else { huge };
                } else {
                    self.l[idx] = sum / self.at(j, j);
                }
            }
        }
    }

    fn solve(&self, rhs: &mut [S]) {
        let k = self.k;
        for i in 0..self.n {
            let mut sum = rhs[i];
            for p in i.saturating_sub(k)..i {
                sum = sum - self.at(i, p) * rhs[p];
            }
            rhs[i] = sum / self.at(i, i);
        }
        for i in (0..self.n).rev() {
            let mut sum = rhs[i];
            for r in (i + 1)..(i + k + 1).min(self.n) {
                sum = sum - self.at(r, i) * rhs[r];
            }
            rhs[i] = sum / self.at(i, i);
        }
    }
}

struct Direction<S> {
    dx: Vec<S>,
    dy: Vec<S>,
    dz: Vec<S>,
    dw: Vec<S>,
}

pub(crate) fn solve<S: Scalar>(p: &QpProblem<S>, settings: &IpmSettings<S>) -> QpSolution<S> {
    let n = p.var_count();
    let m = p.row_count();
    let zero = S::zero();
    let one = S::one();
    let has_hi: Vec<bool> = p.hi.iter().map(|h| h.is_finite()).collect();
    let n_comp = n + has_hi.iter().filter(|h| **h).count();
    let bandwidth = p.bandwidth();

    let mut x: Vec<S> = (0..n)
        .map(|j| {
            let room = if has_hi[j] {
                (p.hi[j] - p.lo[j]) / S::lit(2.0)
            } else {
                one
            };
            p.lo[j] + room.min(one)
        })
        .collect();
    let mut y = vec![zero; m];
    let mut z = vec![one; n];
    let mut w: Vec<S> = has_hi.iter().map(|&h| if h { one } else { zero }).collect();

    let mut best: Option<QpSolution<S>> = None;
    let mut rd = vec![zero; n];
    let mut rp = vec![zero; m];
    let mut aty = vec![zero; n];
    let mut d = vec![zero; n];
    let mut sl = vec![zero; n];
    let mut su = vec![zero; n];

    if n == 0 {
        let residual = p.b.iter().map(|b| b.abs()).fold(zero, S::max);
        return QpSolution {
            x,
            y,
            z,
            w,
            iterations: 0,
            residual,
            converged: residual <= settings.tol,
        };
    }

    for iter in 0..=settings.max_iters {
        for j in 0..n {
            sl[j] = x[j] - p.lo[j];
            su[j] = if has_hi[j] { p.hi[j] - x[j] } else { S::infinity() };
        }
        p.mul_a(&x, &mut rp);
        for (r, b) in rp.iter_mut().zip(&p.b) {
            *r = *r - *b;
        }
        p.mul_at(&y, &mut aty);
        let mut comp_sum = zero;
        let mut comp_max = zero;
        for j in 0..n {
            rd[j] = p.q[j] * x[j] + p.c[j] - aty[j] - z[j] + w[j];
            let cl = sl[j] * z[j];
            comp_sum = comp_sum + cl;
            comp_max = comp_max.max(cl);
            if has_hi[j] {
                let cu = su[j] * w[j];
                comp_sum = comp_sum + cu;
                comp_max = comp_max.max(cu);
            }
        }
        let mu = comp_sum / S::from_usize(n_comp).unwrap();
        let primal = rp.iter().map(|v| v.abs()).fold(zero, S::max);
        let dual = rd.iter().map(|v| v.abs()).fold(zero, S::max);
        let residual = primal.max(dual).max(comp_max);

        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(QpSolution {
                x: x.clone(),
                y: y.clone(),
                z: z.clone(),
                w: w.clone(),
                iterations: iter,
                residual,
                converged: false,
            });
        }
        if residual <= settings.tol || iter == settings.max_iters || !residual.is_finite() {
            break;
        }

        let reg = S::lit(REG_FLOOR);
        let mut chol = BandCholesky::zeroed(m, bandwidth);
        for j in 0..n {
            let mut dj = p.q[j] + z[j] / sl[j];
            if has_hi[j] {
                dj = dj + w[j] / su[j];
            }
            d[j] = dj.max(reg);
            let dj = d[j];
            let col = &p.cols[j];
            for &(r1, a1) in col {
                for &(r2, a2) in col {
                    if r2 <= r1 {
                        chol.add(r1, r2, a1 * a2 / dj);
                    }
                }
            }
        }
        chol.factor();

        let direction = |rc_l: &[S], rc_u: &[S]| -> Direction<S> {
            let rhat: Vec<S> = (0..n)
                .map(|j| {
                    let mut v = -rd[j] + rc_l[j] / sl[j];
                    if has_hi[j] {
                        v = v - rc_u[j] / su[j];
                    }
                    v
                })
                .collect();
            let mut rhs = vec![zero; m];
            let scaled: Vec<S> = rhat.iter().zip(&d).map(|(r, dj)| *r / *dj).collect();
            p.mul_a(&scaled, &mut rhs);
            for (r, e) in rhs.iter_mut().zip(&rp) {
                *r = -*e - *r;
            }
            let target = rhs.clone();
            chol.solve(&mut rhs);
            // the scaling spans many orders of magnitude near the end;
            // a couple of refinement steps recover the lost digits
            let mut dy = rhs;
            let mut t = vec![zero; n];
            let mut adt = vec![zero; m];
            for _ in 0..2 {
                p.mul_at(&dy, &mut t);
                for (tj, dj) in t.iter_mut().zip(&d) {
                    *tj = *tj / *dj;
                }
                p.mul_a(&t, &mut adt);
                let mut corr: Vec<S> = target.iter().zip(&adt).map(|(a, b)| *a - *b).collect();
                chol.solve(&mut corr);
                for (v, c) in dy.iter_mut().zip(&corr) {
                    *v = *v + *c;
                }
            }
            let mut atdy = vec![zero; n];
            p.mul_at(&dy, &mut atdy);
            let dx: Vec<S> = (0..n).map(|j| (rhat[j] + atdy[j]) / d[j]).collect();
            let dz: Vec<S> = (0..n).map(|j| (rc_l[j] - z[j] * dx[j]) / sl[j]).collect();
            let dw: Vec<S> = (0..n)
                .map(|j| {
                    if has_hi[j] {
                        (rc_u[j] + w[j] * dx[j]) / su[j]
                    } else {
                        zero
                    }
                })
                .collect();
            Direction { dx, dy, dz, dw }
        };

        let max_step = |dir: &Direction<S>| -> S {
            let mut alpha = one;
            for j in 0..n {
                if dir.dx[j] < zero {
                    alpha = alpha.min(-sl[j] / dir.dx[j]);
                }
                if has_hi[j] && dir.dx[j] > zero {
                    alpha = alpha.min(su[j] / dir.dx[j]);
                }
                if dir.dz[j] < zero {
                    alpha = alpha.min(-z[j] / dir.dz[j]);
                }
                if has_hi[j] && dir.dw[j] < zero {
                    alpha = alpha.min(-w[j] / dir.dw[j]);
                }
            }
            alpha
        };

        let rc_l: Vec<S> = (0..n).map(|j| -sl[j] * z[j]).collect();
        let rc_u: Vec<S> = (0..n)
            .map(|j| if has_hi[j] { -su[j] * w[j] } else { zero })
            .collect();
        let aff = direction(&rc_l, &rc_u);
        let a_aff = max_step(&aff);
        let mut mu_aff = zero;
        for j in 0..n {
            mu_aff = mu_aff + (sl[j] + a_aff * aff.dx[j]) * (z[j] + a_aff * aff.dz[j]);
            if has_hi[j] {
                mu_aff = mu_aff + (su[j] - a_aff * aff.dx[j]) * (w[j] + a_aff * aff.dw[j]);
            }
        }
        mu_aff = mu_aff / S::from_usize(n_comp).unwrap();
        let ratio = if mu > zero { (mu_aff / mu).max(zero) } else { zero };
        let sigma = (ratio * ratio * ratio).min(one);
        let target = sigma * mu;

        let rc_l: Vec<S> = (0..n)
            .map(|j| -sl[j] * z[j] + target - aff.dx[j] * aff.dz[j])
            .collect();
        let rc_u: Vec<S> = (0..n)
            .map(|j| {
                if has_hi[j] {
                    -su[j] * w[j] + target + aff.dx[j] * aff.dw[j]
                } else {
                    zero
                }
            })
            .collect();
        let dir = direction(&rc_l, &rc_u);
        let alpha = (settings.boundary_fraction * max_step(&dir)).min(one);

        for j in 0..n {
            x[j] = x[j] + alpha * dir.dx[j];
            z[j] = z[j] + alpha * dir.dz[j];
            if has_hi[j] {
                w[j] = w[j] + alpha * dir.dw[j];
                // keep strictly inside after rounding
                if !(x[j] < p.hi[j]) {
                    x[j] = p.hi[j] - (p.hi[j] - p.lo[j]) * S::epsilon();
                }
            }
            if !(x[j] > p.lo[j]) {
                x[j] = p.lo[j] + S::min_positive_value().max(p.lo[j].abs() * S::epsilon());
            }
        }
        for r in 0..m {
            y[r] = y[r] + alpha * dir.dy[r];
        }
    }

    let mut out = best.expect("at least one iterate is evaluated");
    out.converged = out.residual <= settings.tol;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings() -> IpmSettings<f64> {
        IpmSettings {
            max_iters: 100,
            tol: 1e-11,
            boundary_fraction: 0.995,
        }
    }

    #[test]
    fn band_cholesky_solves_tridiagonal_system() {
        // [4 1 0; 1 4 1; 0 1 4] x = [1 2 3]
        let mut c = BandCholesky::zeroed(3, 1);
        for i in 0..3 {
            c.add(i, i, 4.0);
        }
        c.add(1, 0, 1.0);
        c.add(2, 1, 1.0);
        c.factor();
        let mut rhs = vec![1.0f64, 2.0, 3.0];
        c.solve(&mut rhs);
        let r0 = 4.0 * rhs[0] + rhs[1] - 1.0;
        let r1 = rhs[0] + 4.0 * rhs[1] + rhs[2] - 2.0;
        let r2 = rhs[1] + 4.0 * rhs[2] - 3.0;
        assert!(r0.abs() < 1e-14 && r1.abs() < 1e-14 && r2.abs() < 1e-14);
    }

    #[test]
    fn box_constrained_quadratic() {
        // min (x - 2)^2 / 2 on [0, 1] -> x = 1
        let mut p = QpProblem::new(0);
        p.add_var(1.0, -2.0, 0.0, 1.0, vec![]);
        let s = solve(&p, &settings());
        assert!(s.converged);
        assert!((s.x[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn linear_program_with_equality() {
        // min -x1 - 2 x2  s.t. x1 + x2 = 1, x >= 0 -> x = (0, 1)
        let mut p = QpProblem::new(1);
        p.b[0] = 1.0;
        p.add_var(0.0, -1.0, 0.0, f64::INFINITY, vec![(0, 1.0)]);
        p.add_var(0.0, -2.0, 0.0, f64::INFINITY, vec![(0, 1.0)]);
        let s = solve(&p, &settings());
        assert!(s.converged, "residual {}", s.residual);
        assert!(s.x[0].abs() < 1e-9 && (s.x[1] - 1.0).abs() < 1e-9);
        assert!((s.y[0] + 2.0).abs() < 1e-8);
        assert!(kkt_residual(&p, &s.x, &s.y, &s.z, &s.w) <= 1e-11);
    }
}
