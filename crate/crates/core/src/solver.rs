//! Per-agent welfare maximization at announced prices, the reconfiguration
//! step with pinned market quantities, and a brute-force lattice oracle.
//!
//! The sub-problem is a concave program with a separable objective, one flow
//! conservation equality per slot and the cumulative state-of-charge bounds.
//! Introducing the state of charge `s_t` as a variable turns every inequality
//! into a simple bound, and the remaining equalities (conservation and the
//! charge recursion) form a banded system. It is solved with the
//! interior-point engine in [`crate::qp`].

use std::fmt;

use crate::error::{Error, Result};
use crate::model::{AgentParams, AgentState, NetworkParams, PriceProfile, SlotState, TimeGrid};
use crate::qp::{self, IpmSettings, QpProblem, QpSolution};
use crate::scalar::Scalar;
use crate::welfare::{marginal_utility, welfare_unchecked};

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig<S = f64> {
    /// Interior-point iteration cap.
    pub max_iters: usize,
    /// Largest accepted KKT residual of a returned solution.
    pub kkt_tol: S,
    /// Upper bound on grid sales used in place of infinity.
    pub g_plus_cap: S,
    /// Fraction of the distance to the boundary taken per interior-point step.
    pub boundary_fraction: S,
}

impl<S: Scalar> Default for SolverConfig<S> {
    fn default() -> Self {
        Self {
            max_iters: 200,
            kkt_tol: S::default_tolerance(1e-7),
            g_plus_cap: S::lit(1e6),
            boundary_fraction: S::lit(0.995),
        }
    }
}

impl<S: Scalar> SolverConfig<S> {
    pub(crate) fn ipm(&self) -> IpmSettings<S> {
        IpmSettings {
            max_iters: self.max_iters,
            tol: (self.kkt_tol * S::lit(1e-3)).max(S::epsilon() * S::lit(100.0)),
            boundary_fraction: self.boundary_fraction,
        }
    }
}

/// Optimal response of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution<S = f64> {
    pub state: AgentState<S>,
    /// `L_{i lambda}(x_i)`: the agent's welfare at the announced prices.
    pub objective: S,
    /// Largest primal, dual or complementarity residual. The lattice oracle
    /// does not certify optimality and reports infinity.
    pub kkt_residual: S,
    pub iterations: usize,
    /// Grid sales reached [`SolverConfig::g_plus_cap`] in some slot.
    pub g_plus_cap_binding: bool,
}

/// Failure of a sub-problem solve.
#[derive(Debug, Clone)]
pub enum SolveError<S = f64> {
    /// The iteration cap was hit; carries the best iterate found.
    NonConvergence {
        best: Box<SubproblemSolution<S>>,
    },
    Invalid(Error),
}

impl<S: Scalar> fmt::Display for SolveError<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolveError::NonConvergence { best } => write!(
                f,
                "no convergence after {} iterations (residual {:e})",
                best.iterations,
                best.kkt_residual.as_f64()
            ),
            SolveError::Invalid(e) => e.fmt(f),
        }
    }
}

impl<S: Scalar> std::error::Error for SolveError<S> {}

impl<S> From<Error> for SolveError<S> {
    fn from(e: Error) -> Self {
        SolveError::Invalid(e)
    }
}

impl<S: Scalar> From<SolveError<S>> for Error {
    fn from(e: SolveError<S>) -> Self {
        match e {
            SolveError::NonConvergence { best } => Error::NonConvergence {
                iterations: best.iterations,
                residual: best.kkt_residual.as_f64(),
            },
            SolveError::Invalid(e) => e,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Var<S> {
    Free(usize),
    Fixed(S),
}

impl<S: Scalar> Var<S> {
    fn value(self, x: &[S]) -> S {
        match self {
            Var::Free(j) => x[j],
            Var::Fixed(v) => v,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SlotVars<S> {
    l_plus: Var<S>,
    l_minus: Var<S>,
    b_plus: Var<S>,
    b_minus: Var<S>,
    m_plus: Var<S>,
    m_minus: Var<S>,
    g_plus: Var<S>,
    g_minus: Var<S>,
    soc: Var<S>,
}

/// Where an agent's rows live inside a (possibly joint) problem.
pub(crate) struct RowMap<'a> {
    pub conservation: &'a dyn Fn(usize) -> usize,
    pub soc: &'a dyn Fn(usize) -> usize,
    pub coupling: Option<&'a dyn Fn(usize) -> usize>,
}

/// Market side of an agent block.
#[derive(Clone, Copy)]
pub(crate) struct MarketSpec<'a, S> {
    /// Announced prices: sales earn `gamma p`, purchases cost `p`. `None`
    /// leaves market quantities out of the objective (joint problem).
    pub prices: Option<&'a [S]>,
    /// Pinned `(m+, m-)` profiles.
    pub pinned: Option<(&'a [S], &'a [S])>,
}

/// Appends one agent's variables and rows to `qp`.
///
/// Consumption is limited to `[l_min, max(l_min, omega/theta)]`: utility is
/// flat beyond saturation and grid sales (price `>= 0`, capped only by the
/// sentinel) absorb any surplus at least as well, so an optimal point of the
/// unrestricted set always lies in the restricted one.
pub(crate) fn add_agent_block<S: Scalar>(
    qp: &mut QpProblem<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    market: MarketSpec<'_, S>,
    rows: &RowMap<'_>,
    cfg: &SolverConfig<S>,
) -> Vec<SlotVars<S>> {
    let slots = params.slot_count();
    let gamma = net.gamma;
    let mut out = Vec::with_capacity(slots);
    let add = |qp: &mut QpProblem<S>, q: S, c: S, lo: S, hi: S, entries: Vec<(usize, S)>| {
        let width = hi - lo;
        let scale = S::one()
            .max(lo.abs())
            .max(if hi.is_finite() { hi.abs() } else { S::zero() });
        if width <= S::epsilon() * S::lit(16.0) * scale {
            for &(r, a) in &entries {
                qp.b[r] = qp.b[r] - a * lo;
            }
            Var::Fixed(lo)
        } else {
            Var::Free(qp.add_var(q, c, lo, hi, entries))
        }
    };
    for t in 0..slots {
        let rc = (rows.conservation)(t);
        let rs = (rows.soc)(t);
        let omega = params.utility_omega[t];
        let theta = params.utility_theta[t];
        let l_hi = params.l_plus_min.max(omega / theta);
        let l_plus = add(qp, theta, -omega, params.l_plus_min, l_hi, vec![(rc, S::one())]);
        let l_minus = add(
            qp,
            params.cost_quadratic,
            params.cost_linear,
            S::zero(),
            params.l_minus_max[t],
            vec![(rc, -S::one())],
        );
        let b_plus = add(
            qp,
            S::zero(),
            S::zero(),
            S::zero(),
            params.b_plus_max,
            vec![(rc, S::one()), (rs, -params.eta)],
        );
        let b_minus = add(
            qp,
            S::zero(),
            S::zero(),
            S::zero(),
            params.b_minus_max,
            vec![(rc, -S::one()), (rs, S::one())],
        );
        let (c_sell, c_buy) = match market.prices {
            Some(p) => (-gamma * p[t], p[t]),
            None => (S::zero(), S::zero()),
        };
        let (sell_lo, sell_hi, buy_lo, buy_hi) = match market.pinned {
            Some((mp, mm)) => (mp[t], mp[t], mm[t], mm[t]),
            None => (S::zero(), params.m_plus_max, S::zero(), params.m_minus_max),
        };
        let mut sell_entries = vec![(rc, S::one())];
        let mut buy_entries = vec![(rc, -S::one())];
        if let Some(k) = rows.coupling {
            sell_entries.push((k(t), gamma));
            buy_entries.push((k(t), -S::one()));
        }
        let m_plus = add(qp, S::zero(), c_sell, sell_lo, sell_hi, sell_entries);
        let m_minus = add(qp, S::zero(), c_buy, buy_lo, buy_hi, buy_entries);
        let g_plus = add(
            qp,
            S::zero(),
            -net.p_grid_sell[t],
            S::zero(),
            cfg.g_plus_cap,
            vec![(rc, S::one())],
        );
        let g_minus = add(
            qp,
            S::zero(),
            net.p_grid_buy[t],
            S::zero(),
            params.g_minus_max,
            vec![(rc, -S::one())],
        );
        let mut soc_entries = vec![(rs, S::one())];
        if t + 1 < slots {
            soc_entries.push(((rows.soc)(t + 1), -S::one()));
        }
        let soc = add(qp, S::zero(), S::zero(), S::zero(), params.s_max, soc_entries);
        if t == 0 {
            qp.b[rs] = qp.b[rs] + params.s_init;
        }
        out.push(SlotVars {
            l_plus,
            l_minus,
            b_plus,
            b_minus,
            m_plus,
            m_minus,
            g_plus,
            g_minus,
            soc,
        });
    }
    out
}

/// Reads an agent's state from a QP iterate, nets simultaneous
/// charge/discharge and market sale/purchase, and closes the tiny
/// conservation residual left by the interior-point iterate through grid
/// sales/purchases.
pub(crate) fn extract_state<S: Scalar>(
    vars: &[SlotVars<S>],
    x: &[S],
    params: &AgentParams<S>,
    pinned_market: bool,
    cfg: &SolverConfig<S>,
) -> AgentState<S> {
    let eta = params.eta;
    let mut prev_soc = params.s_init;
    let slots = vars
        .iter()
        .map(|v| {
            let mut s = SlotState {
                l_plus: v.l_plus.value(x),
                l_minus: v.l_minus.value(x),
                b_plus: v.b_plus.value(x),
                b_minus: v.b_minus.value(x),
                m_plus: v.m_plus.value(x),
                m_minus: v.m_minus.value(x),
                g_plus: v.g_plus.value(x),
                g_minus: v.g_minus.value(x),
            };
            if s.b_plus > S::zero() && s.b_minus > S::zero() {
                // shrink both legs while keeping eta b+ - b- fixed
                let shrink = if eta > S::zero() {
                    s.b_plus.min(s.b_minus / eta)
                } else {
                    s.b_plus
                };
                let spill = (S::one() - eta) * shrink;
                if s.g_plus + spill <= cfg.g_plus_cap {
                    s.b_plus = s.b_plus - shrink;
                    s.b_minus = (s.b_minus - eta * shrink).pos();
                    s.g_plus = s.g_plus + spill;
                }
            }
            if !pinned_market && s.m_plus > S::zero() && s.m_minus > S::zero() {
                let common = s.m_plus.min(s.m_minus);
                s.m_plus = s.m_plus - common;
                s.m_minus = s.m_minus - common;
            }
            // interior-point leftovers on inactive trades and battery legs
            let snap = cfg.kkt_tol * S::lit(1e-4);
            for v in [&mut s.b_plus, &mut s.b_minus] {
                if *v < snap {
                    *v = S::zero();
                }
            }
            if !pinned_market {
                for v in [&mut s.m_plus, &mut s.m_minus] {
                    if *v < snap {
                        *v = S::zero();
                    }
                }
            }
            // take the battery net flow from the iterate's SOC, which lies
            // strictly inside its bounds; summing eta b+ - b- would
            // accumulate the per-row equality residuals
            let target = v.soc.value(x) - prev_soc;
            prev_soc = v.soc.value(x);
            let d = target - (eta * s.b_plus - s.b_minus);
            if d > S::zero() {
                let cut = d.min(s.b_minus);
                s.b_minus = s.b_minus - cut;
                if d > cut && eta > S::zero() {
                    s.b_plus = s.b_plus + (d - cut) / eta;
                }
            } else if d < S::zero() {
                let cut = if eta > S::zero() {
                    (-d / eta).min(s.b_plus)
                } else {
                    S::zero()
                };
                s.b_plus = s.b_plus - cut;
                s.b_minus = s.b_minus + (-d - eta * cut);
            }
            let r = s.flow_residual();
            if r < S::zero() {
                s.g_plus = s.g_plus - r;
            } else if r > S::zero() {
                let from_sales = r.min(s.g_plus);
                s.g_plus = s.g_plus - from_sales;
                s.g_minus = s.g_minus + (r - from_sales);
            }
            s
        })
        .collect();
    AgentState { slots }
}

/// Writes a (post-processed) state back into QP coordinates so the KKT
/// residual can be measured at the returned point.
pub(crate) fn write_back<S: Scalar>(
    vars: &[SlotVars<S>],
    state: &AgentState<S>,
    params: &AgentParams<S>,
    x: &mut [S],
) {
    let mut soc = params.s_init;
    for (v, s) in vars.iter().zip(&state.slots) {
        soc = soc + params.eta * s.b_plus - s.b_minus;
        let pairs = [
            (v.l_plus, s.l_plus),
            (v.l_minus, s.l_minus),
            (v.b_plus, s.b_plus),
            (v.b_minus, s.b_minus),
            (v.m_plus, s.m_plus),
            (v.m_minus, s.m_minus),
            (v.g_plus, s.g_plus),
            (v.g_minus, s.g_minus),
            (v.soc, soc),
        ];
        for (var, value) in pairs {
            if let Var::Free(j) = var {
                x[j] = value;
            }
        }
    }
}

fn validate_inputs<S: Scalar>(
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
) -> Result<TimeGrid> {
    net.validate()?;
    let grid = net.time_grid()?;
    grid.check_len("prices", prices.as_slice())?;
    params.validate(grid)?;
    if let Some(p) = prices.as_slice().iter().find(|p| !p.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "prices",
            reason: format!("non-finite price {p}"),
        });
    }
    Ok(grid)
}

/// Checks that some point of the feasible set honors the market bounds,
/// by running the battery forward with maximal state of charge: charge as
/// much as spare inflow allows, discharge only what a slot cannot cover.
fn precheck_feasible<S: Scalar>(params: &AgentParams<S>, pinned: Option<(&[S], &[S])>) -> Result<()> {
    let tol = S::lit(1e-12).max(S::epsilon() * S::lit(100.0));
    let mut soc = params.s_init;
    for t in 0..params.slot_count() {
        let (sell_min, buy_max) = match pinned {
            Some((mp, mm)) => (mp[t], mm[t]),
            None => (S::zero(), params.m_minus_max),
        };
        let spare = params.l_minus_max[t] + buy_max + params.g_minus_max - params.l_plus_min - sell_min;
        if spare < S::zero() {
            let need = -spare;
            if need > params.b_minus_max + tol || need > soc + tol {
                return Err(Error::Infeasible {
                    slot: t,
                    detail: format!(
                        "outflow exceeds every source by {need}: discharge limit {}, stored {}",
                        params.b_minus_max, soc
                    ),
                });
            }
            soc = (soc - need).pos();
        } else {
            let headroom = if params.eta > S::zero() {
                (params.s_max - soc) / params.eta
            } else {
                params.b_plus_max
            };
            let charge = params.b_plus_max.min(spare).min(headroom.pos());
            soc = soc + params.eta * charge;
        }
    }
    Ok(())
}

fn solve_block<S: Scalar>(
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    pinned: Option<(&[S], &[S])>,
    cfg: &SolverConfig<S>,
) -> std::result::Result<SubproblemSolution<S>, SolveError<S>> {
    precheck_feasible(params, pinned)?;
    let slots = params.slot_count();
    let mut qp = QpProblem::new(2 * slots);
    let cons = |t: usize| 2 * t;
    let soc = |t: usize| 2 * t + 1;
    let rows = RowMap {
        conservation: &cons,
        soc: &soc,
        coupling: None,
    };
    let market = MarketSpec {
        prices: Some(prices.as_slice()),
        pinned,
    };
    let vars = add_agent_block(&mut qp, params, net, market, &rows, cfg);
    let (qp, _) = drop_empty_rows(qp).map_err(|row| Error::Infeasible {
        slot: row / 2,
        detail: "fixed quantities violate an equality with no free variable".into(),
    })?;
    let sol = qp::solve(&qp, &cfg.ipm());
    finish(&qp, &sol, &vars, prices, params, net, pinned.is_some(), cfg)
}

fn finish<S: Scalar>(
    qp: &QpProblem<S>,
    sol: &QpSolution<S>,
    vars: &[SlotVars<S>],
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    pinned: bool,
    cfg: &SolverConfig<S>,
) -> std::result::Result<SubproblemSolution<S>, SolveError<S>> {
    let state = extract_state(vars, &sol.x, params, pinned, cfg);
    let mut x = sol.x.clone();
    write_back(vars, &state, params, &mut x);
    let residual = qp::kkt_residual(qp, &x, &sol.y, &sol.z, &sol.w);
    let objective = welfare_unchecked(&state, prices.as_slice(), params, net).total;
    let cap_hit = state
        .slots
        .iter()
        .any(|s| s.g_plus >= cfg.g_plus_cap * (S::one() - S::lit(1e-9)));
    let out = SubproblemSolution {
        state,
        objective,
        kkt_residual: residual,
        iterations: sol.iterations,
        g_plus_cap_binding: cap_hit,
    };
    if residual <= cfg.kkt_tol {
        Ok(out)
    } else {
        Err(SolveError::NonConvergence { best: Box::new(out) })
    }
}

/// Removes equality rows without free variables. Returns the new row index
/// of each old row, or the first inconsistent row.
pub(crate) fn drop_empty_rows<S: Scalar>(
    mut qp: QpProblem<S>,
) -> std::result::Result<(QpProblem<S>, Vec<Option<usize>>), usize> {
    let rows = qp.row_count();
    let mut used = vec![false; rows];
    for col in &qp.cols {
        for &(r, _) in col {
            used[r] = true;
        }
    }
    let tol = S::lit(1e-12).max(S::epsilon() * S::lit(100.0));
    let mut map = vec![None; rows];
    let mut b = Vec::with_capacity(rows);
    for r in 0..rows {
        if used[r] {
            map[r] = Some(b.len());
            b.push(qp.b[r]);
        } else if qp.b[r].abs() > tol {
            return Err(r);
        }
    }
    for col in &mut qp.cols {
        for e in col.iter_mut() {
            e.0 = map[e.0].expect("used row");
        }
    }
    qp.b = b;
    Ok((qp, map))
}

/// Maximizes `L_{i lambda}(x_i) = phi_i(x_i) + sum_t p_t (gamma m+ - m-)`
/// over the agent's feasible set.
pub fn solve_subproblem<S: Scalar>(
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    cfg: &SolverConfig<S>,
) -> std::result::Result<SubproblemSolution<S>, SolveError<S>> {
    validate_inputs(prices, params, net)?;
    solve_block(prices, params, net, None, cfg)
}

/// Re-solves the sub-problem with `(m+, m-)` pinned to the given profiles.
///
/// The previous solution is not needed to compute the projection; it is taken
/// to mirror the reconfiguration step and to report which agent is projected.
pub fn reconfigure<S: Scalar>(
    _previous: &SubproblemSolution<S>,
    fixed_m_plus: &[S],
    fixed_m_minus: &[S],
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    cfg: &SolverConfig<S>,
) -> std::result::Result<SubproblemSolution<S>, SolveError<S>> {
    solve_with_market(fixed_m_plus, fixed_m_minus, prices, params, net, cfg)
}

/// Sub-problem with pinned market profiles (used by reconfiguration and by
/// the no-trading baseline).
pub fn solve_with_market<S: Scalar>(
    fixed_m_plus: &[S],
    fixed_m_minus: &[S],
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    cfg: &SolverConfig<S>,
) -> std::result::Result<SubproblemSolution<S>, SolveError<S>> {
    let grid = validate_inputs(prices, params, net)?;
    grid.check_len("fixed_m_plus", fixed_m_plus)?;
    grid.check_len("fixed_m_minus", fixed_m_minus)?;
    for t in 0..grid.slot_count() {
        let (mp, mm) = (fixed_m_plus[t], fixed_m_minus[t]);
        if !(mp >= S::zero() && mp <= params.m_plus_max) {
            return Err(Error::Domain {
                quantity: "pinned m+",
                value: mp.as_f64(),
                lower: 0.0,
                upper: params.m_plus_max.as_f64(),
            }
            .into());
        }
        if !(mm >= S::zero() && mm <= params.m_minus_max) {
            return Err(Error::Domain {
                quantity: "pinned m-",
                value: mm.as_f64(),
                lower: 0.0,
                upper: params.m_minus_max.as_f64(),
            }
            .into());
        }
    }
    solve_block(prices, params, net, Some((fixed_m_plus, fixed_m_minus)), cfg)
}

/// Gradient of `L_{i lambda}` with respect to the flattened `8T` state
/// (slot-major, field order of [`SlotState`]).
pub fn objective_gradient<S: Scalar>(
    state: &AgentState<S>,
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
) -> Vec<S> {
    let mut grad = Vec::with_capacity(8 * state.slot_count());
    for (t, s) in state.slots.iter().enumerate() {
        let p = prices[t];
        grad.extend_from_slice(&[
            marginal_utility(s.l_plus, params.utility_omega[t], params.utility_theta[t]),
            -(params.cost_linear + params.cost_quadratic * s.l_minus),
            S::zero(),
            S::zero(),
            net.gamma * p,
            -p,
            net.p_grid_sell[t],
            -net.p_grid_buy[t],
        ]);
    }
    grad
}

/// Per slot and battery lattice point: best slot value and its decision.
type SlotTable<S> = Vec<Vec<Option<(S, SlotState<S>)>>>;

/// Largest number of objective evaluations the lattice oracle accepts.
pub const ORACLE_LIMIT: f64 = 5e7;

/// Exhaustive search over a lattice of per-slot decisions: consumption,
/// generation and battery net flow, with `resolution` points on each range
/// (endpoints included). For every lattice point the market and grid trades
/// that close the flow balance are chosen exactly.
///
/// Given the battery profile the slots decouple, so the best slot value is
/// tabulated per battery lattice point and battery profiles are enumerated
/// with the state-of-charge bounds.
pub fn brute_force_oracle<S: Scalar>(
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    resolution: usize,
    cfg: &SolverConfig<S>,
) -> Result<SubproblemSolution<S>> {
    let grid = validate_inputs(prices, params, net)?;
    let slots = grid.slot_count();
    if resolution < 2 {
        return Err(Error::InvalidParameter {
            name: "resolution",
            reason: "need at least two lattice points per variable".into(),
        });
    }
    let r = resolution as f64;
    let points = 32.0 * slots as f64 * r.powi(3) + r.powi(slots as i32) * slots as f64;
    if points > ORACLE_LIMIT {
        return Err(Error::LatticeTooLarge {
            points,
            limit: ORACLE_LIMIT,
        });
    }
    let lattice = |lo: S, hi: S| -> Vec<S> {
        if hi - lo <= S::zero() {
            return vec![lo];
        }
        let n = S::from_usize(resolution - 1).unwrap();
        (0..resolution)
            .map(|k| lo + (hi - lo) * S::from_usize(k).unwrap() / n)
            .collect()
    };
    let battery = lattice(-params.b_minus_max, params.b_plus_max);

    // best[t][k]: best slot value and netted decision for battery point k
    let mut best: SlotTable<S> = Vec::with_capacity(slots);
    for t in 0..slots {
        let omega = params.utility_omega[t];
        let theta = params.utility_theta[t];
        let consumption = lattice(params.l_plus_min, params.l_plus_min.max(omega / theta));
        let generation = lattice(S::zero(), params.l_minus_max[t]);
        let p = prices[t];
        let limits = [
            params.m_plus_max,
            params.m_minus_max,
            cfg.g_plus_cap,
            params.g_minus_max,
        ];
        let rates = [net.gamma * p, -p, net.p_grid_sell[t], -net.p_grid_buy[t]];
        let mut row = Vec::with_capacity(battery.len());
        for &nb in &battery {
            let mut slot_best: Option<(S, SlotState<S>)> = None;
            for &l in &consumption {
                for &g in &generation {
                    let Some((trade_value, [mp, mm, gp, gm])) = best_exchange(l - g + nb, limits, rates)
                    else {
                        continue;
                    };
                    let value = crate::welfare::utility_value(l, omega, theta)
                        - crate::welfare::cost_value(g, params)
                        + trade_value;
                    if slot_best.as_ref().is_none_or(|(v, _)| value > *v) {
                        let s = SlotState {
                            l_plus: l,
                            l_minus: g,
                            b_plus: nb.pos(),
                            b_minus: (-nb).pos(),
                            m_plus: mp,
                            m_minus: mm,
                            g_plus: gp,
                            g_minus: gm,
                        };
                        slot_best = Some((value, s));
                    }
                }
            }
            row.push(slot_best);
        }
        best.push(row);
    }

    let mut choice = vec![0usize; slots];
    let mut incumbent: Option<(S, Vec<usize>)> = None;
    fn search<S: Scalar>(
        t: usize,
        soc: S,
        acc: S,
        battery: &[S],
        best: &SlotTable<S>,
        params: &AgentParams<S>,
        choice: &mut Vec<usize>,
        incumbent: &mut Option<(S, Vec<usize>)>,
    ) {
        let tol = S::lit(1e-12);
        if t == best.len() {
            if incumbent.as_ref().is_none_or(|(v, _)| acc > *v) {
                *incumbent = Some((acc, choice.clone()));
            }
            return;
        }
        for (k, &nb) in battery.iter().enumerate() {
            let Some((value, _)) = best[t][k] else { continue };
            let delta = if nb >= S::zero() { params.eta * nb } else { nb };
            let next = soc + delta;
            if next < -tol || next > params.s_max + tol {
                continue;
            }
            choice[t] = k;
            search(t + 1, next, acc + value, battery, best, params, choice, incumbent);
        }
    }
    search(
        0,
        params.s_init,
        S::zero(),
        &battery,
        &best,
        params,
        &mut choice,
        &mut incumbent,
    );
    let (_, picks) = incumbent.ok_or(Error::Infeasible {
        slot: 0,
        detail: "no lattice point is feasible".into(),
    })?;
    let state = AgentState {
        slots: picks
            .iter()
            .enumerate()
            .map(|(t, &k)| best[t][k].expect("feasible pick").1)
            .collect(),
    };
    let objective = welfare_unchecked(&state, prices.as_slice(), params, net).total;
    Ok(SubproblemSolution {
        state,
        objective,
        kkt_residual: S::infinity(),
        iterations: 0,
        g_plus_cap_binding: false,
    })
}

/// Best way to cover a net inflow requirement `need` with market and grid
/// trades `[m+, m-, g+, g-]` (`m- + g- - m+ - g+ = need`), each earning
/// `rates[k]` per unit within `[0, limits[k]]`. A linear program in four
/// bounded variables, solved by enumerating its vertices.
fn best_exchange<S: Scalar>(need: S, limits: [S; 4], rates: [S; 4]) -> Option<(S, [S; 4])> {
    let tol = S::lit(1e-12);
    // inflow sign of each variable in the balance
    let sign = [-S::one(), S::one(), -S::one(), S::one()];
    let mut best: Option<(S, [S; 4])> = None;
    for free in 0..4 {
        for mask in 0..8u32 {
            let mut x = [S::zero(); 4];
            let mut bit = 0;
            for k in 0..4 {
                if k == free {
                    continue;
                }
                if mask & (1 << bit) != 0 {
                    x[k] = limits[k];
                }
                bit += 1;
            }
            let others: S = (0..4).filter(|&k| k != free).map(|k| sign[k] * x[k]).sum();
            let v = (need - others) * sign[free];
            if v < -tol || v > limits[free] + tol {
                continue;
            }
            x[free] = v.max(S::zero()).min(limits[free]);
            let value: S = (0..4).map(|k| rates[k] * x[k]).sum();
            if best.as_ref().is_none_or(|(b, _)| value > *b) {
                best = Some((value, x));
            }
        }
    }
    best
}

/// Crude Lipschitz bound on the objective loss from rounding an optimal
/// point onto the oracle lattice: every lattice coordinate moves by at most
/// one spacing, and the induced grid adjustment is priced at `p^{G-}`.
pub fn lattice_bound<S: Scalar>(
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
    resolution: usize,
) -> S {
    let steps = S::from_usize(resolution.max(2) - 1).unwrap();
    let mut total = S::zero();
    for t in 0..params.slot_count() {
        let grid = net.p_grid_buy[t];
        let price = prices[t].abs();
        let omega = params.utility_omega[t];
        let l_range = params.l_plus_min.max(omega / params.utility_theta[t]) - params.l_plus_min;
        let g_range = params.l_minus_max[t];
        let b_range = params.b_plus_max + params.b_minus_max;
        let c_slope = params.cost_linear + params.cost_quadratic * params.l_minus_max[t];
        total = total
            + (omega + grid) * l_range / steps
            + (c_slope + grid) * g_range / steps
            + (price + grid + grid) * b_range / steps;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::check_feasible;

    fn cfg() -> SolverConfig<f64> {
        SolverConfig::default()
    }

    fn consumer(slots: usize) -> AgentParams<f64> {
        let mut p = AgentParams::household(vec![0.0; slots]);
        p.s_max = 0.0;
        p.b_plus_max = 0.0;
        p.b_minus_max = 0.0;
        p
    }

    fn net(slots: usize) -> NetworkParams<f64> {
        NetworkParams::uniform(slots, 1, 0.8, 20.0, 0.0)
    }

    #[test]
    fn demand_only_agent_buys_until_marginal_utility_equals_price() {
        let params = consumer(3);
        let sol = solve_subproblem(&PriceProfile::uniform(3, 5.0), &params, &net(3), &cfg()).unwrap();
        for s in &sol.state.slots {
            assert!((s.l_plus - 1.0 / 6.0).abs() < 1e-7, "{s:?}");
            assert!((s.m_minus - 1.0 / 6.0).abs() < 1e-7);
            assert!(s.g_minus < 1e-7 && s.m_plus < 1e-7);
        }
        assert!(sol.kkt_residual <= 1e-7);
    }

    #[test]
    fn expensive_market_means_no_consumption() {
        let params = consumer(2);
        // at p = 10 marginal utility at zero equals the price, a degenerate
        // optimum the interior-point iterate approaches only like sqrt(tol)
        for (price, tol) in [(10.0, 1e-5), (12.0, 1e-7), (24.0, 1e-7)] {
            let sol = solve_subproblem(&PriceProfile::uniform(2, price), &params, &net(2), &cfg()).unwrap();
            for s in &sol.state.slots {
                assert!(s.fields().iter().all(|v| v.abs() < tol), "{s:?}");
            }
        }
    }

    #[test]
    fn surplus_pv_is_split_between_own_use_and_market() {
        let mut params = consumer(1);
        params.l_minus_max = vec![1.0];
        let sol = solve_subproblem(&PriceProfile::uniform(1, 9.0), &params, &net(1), &cfg()).unwrap();
        let s = sol.state.slots[0];
        // own use where marginal utility meets the seller price 0.8 * 9
        let own = (10.0 - 0.8 * 9.0) / 30.0;
        assert!((s.l_plus - own).abs() < 1e-7, "{s:?}");
        assert!((s.m_plus - (1.0 - own)).abs() < 1e-7);
        assert!((s.l_minus - 1.0).abs() < 1e-7);

        // with a falling price the saturation point 1/3 is reached
        let sol = solve_subproblem(&PriceProfile::uniform(1, 0.0), &params, &net(1), &cfg()).unwrap();
        assert!((sol.state.slots[0].l_plus - 1.0 / 3.0).abs() < 1e-5);
    }

    #[test]
    fn solutions_are_feasible_and_netted() {
        let mut params = AgentParams::household(vec![0.0, 0.4, 1.2, 0.8, 0.0, 0.0]);
        params.s_init = 0.5;
        let prices = PriceProfile::new(vec![9.0, 6.0, 2.0, 3.0, 9.5, 9.0]).unwrap();
        let sol = solve_subproblem(&prices, &params, &net(6), &cfg()).unwrap();
        let report = check_feasible(&sol.state, &params, 1e-8).unwrap();
        assert!(report.is_feasible(), "{report:?}");
        for s in &sol.state.slots {
            assert!(s.m_plus == 0.0 || s.m_minus == 0.0);
            assert!(s.b_plus == 0.0 || s.b_minus == 0.0, "{s:?}");
        }
    }

    #[test]
    fn pinning_a_sale_without_sources_draws_from_grid() {
        let params = consumer(2);
        let prices = PriceProfile::uniform(2, 8.0);
        let base = solve_subproblem(&prices, &params, &net(2), &cfg()).unwrap();
        let sol = reconfigure(&base, &[1.0, 0.0], &[0.0, 0.0], &prices, &params, &net(2), &cfg()).unwrap();
        assert!((sol.state.slots[0].g_minus - 1.0).abs() < 1e-7);
        assert_eq!(sol.state.slots[0].m_plus, 1.0);

        let mut tight = params.clone();
        tight.g_minus_max = 0.5;
        let err = reconfigure(&base, &[1.0, 0.0], &[0.0, 0.0], &prices, &tight, &net(2), &cfg()).unwrap_err();
        match Error::from(err) {
            Error::Infeasible { slot, .. } => assert_eq!(slot, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pinning_the_optimum_reproduces_it() {
        let mut params = AgentParams::household(vec![0.0, 0.9, 1.4, 0.2]);
        params.s_init = 1.0;
        let prices = PriceProfile::new(vec![8.0, 4.0, 3.0, 9.0]).unwrap();
        let base = solve_subproblem(&prices, &params, &net(4), &cfg()).unwrap();
        let mp = base.state.column(|s| s.m_plus);
        let mm = base.state.column(|s| s.m_minus);
        let again = reconfigure(&base, &mp, &mm, &prices, &params, &net(4), &cfg()).unwrap();
        assert!((again.objective - base.objective).abs() < 1e-6);
    }

    #[test]
    fn no_market_access_keeps_consumption_on_own_supply() {
        let mut params = AgentParams::household(vec![0.0, 1.0, 0.0]);
        params.s_init = 0.0;
        let prices = PriceProfile::uniform(3, 1.0);
        let zeros = [0.0; 3];
        let sol = solve_with_market(&zeros, &zeros, &prices, &params, &net(3), &cfg()).unwrap();
        assert!(sol.state.slots.iter().all(|s| s.g_minus < 1e-7));
        assert!(sol.state.slots[1].l_plus > 0.3);
        // the stored energy feeds the last slot
        assert!(sol.state.slots[2].l_plus > 0.0);
    }

    #[test]
    fn empty_lattice_request_is_refused() {
        let params = consumer(3);
        let err =
            brute_force_oracle(&PriceProfile::uniform(3, 1.0), &params, &net(3), 400, &cfg()).unwrap_err();
        assert!(matches!(err, Error::LatticeTooLarge { .. }));
    }

    #[test]
    fn oracle_on_trivial_instances() {
        let params = consumer(1);
        let sol = brute_force_oracle(&PriceProfile::uniform(1, 5.0), &params, &net(1), 31, &cfg()).unwrap();
        let step = (1.0 / 3.0) / 30.0;
        assert!((sol.state.slots[0].l_plus - 1.0 / 6.0).abs() <= step);
        assert!((sol.state.slots[0].m_minus - sol.state.slots[0].l_plus).abs() < 1e-12);

        let mut idle = consumer(1);
        idle.m_minus_max = 0.0;
        idle.m_plus_max = 0.0;
        idle.g_minus_max = 0.0;
        idle.utility_omega = vec![0.0];
        let sol = brute_force_oracle(&PriceProfile::uniform(1, 5.0), &idle, &net(1), 5, &cfg()).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert!(sol.state.slots[0].fields().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_precision_solve() {
        let params: AgentParams<f32> = AgentParams::household(vec![0.0, 0.5]);
        let net32: NetworkParams<f32> = NetworkParams::uniform(2, 1, 0.8, 20.0, 0.0);
        let sol = solve_subproblem(
            &PriceProfile::uniform(2, 5.0f32),
            &params,
            &net32,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!((sol.state.slots[0].l_plus - 1.0 / 6.0).abs() < 1e-3);
    }
}
