//! Iterative market mechanisms: subgradient real-time pricing (RTP), the
//! linear-bid double auction (LFS-DA), the no-trading baseline, and the
//! centralized optimum used as a reference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::market::{bid_from_allocation, market_clearing};
use crate::model::{check_len, AgentParams, AgentState, NetworkParams, PriceProfile};
use crate::qp::{self, QpProblem};
use crate::scalar::Scalar;
use crate::solver::{
    add_agent_block, drop_empty_rows, extract_state, solve_subproblem, solve_with_market, write_back,
    MarketSpec, RowMap, SolverConfig, SubproblemSolution,
};
use crate::welfare::welfare_unchecked;

/// Settings shared by the iterative mechanisms.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismConfig<S = f64> {
    pub max_iterations: usize,
    /// Constant RTP step.
    pub theta_k: S,
    /// Bid slopes `beta[agent][slot]`.
    pub beta: Vec<Vec<S>>,
    /// Starting prices; `p^{G-}/2` when absent.
    pub initial_price: Option<PriceProfile<S>>,
    /// Stop once no price moves by more than this between iterations.
    pub price_tol: S,
    /// Solve agents on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub solver: SolverConfig<S>,
}

impl<S: Scalar> MechanismConfig<S> {
    /// Reference settings: 200 iterations, step 0.1, `beta = 0.5`,
    /// price tolerance `1e-6`.
    pub fn new(agent_count: usize, slot_count: usize) -> Self {
        Self {
            max_iterations: 200,
            theta_k: S::lit(0.1),
            beta: vec![vec![S::lit(0.5); slot_count]; agent_count],
            initial_price: None,
            price_tol: S::lit(1e-6),
            parallel: false,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self, agent_count: usize, slot_count: usize) -> Result<()> {
        if !(self.theta_k > S::zero()) || !self.theta_k.is_finite() {
            return Err(Error::InvalidParameter {
                name: "theta_k",
                reason: format!("must be positive, got {}", self.theta_k),
            });
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "max_iterations",
                reason: "at least one iteration is required".into(),
            });
        }
        check_len("beta", agent_count, self.beta.len())?;
        for row in &self.beta {
            check_len("beta", slot_count, row.len())?;
            if row.iter().any(|b| !(*b > S::zero()) || !b.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "beta",
                    reason: "entries must be finite and positive".into(),
                });
            }
        }
        if let Some(p) = &self.initial_price {
            check_len("initial_price", slot_count, p.len())?;
        }
        Ok(())
    }

    fn start(&self, net: &NetworkParams<S>) -> PriceProfile<S> {
        self.initial_price.clone().unwrap_or_else(|| {
            PriceProfile::new(net.p_grid_buy.iter().map(|&b| b / S::lit(2.0)).collect())
                .expect("finite grid prices")
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismKind {
    Rtp,
    Lfsda,
    WithoutTrading,
}

/// Telemetry of one mechanism iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord<S = f64> {
    pub iteration: usize,
    /// Prices the recorded states trade at: `p^(k)` for RTP, the cleared
    /// `p^(k+1)` for LFS-DA, `p^{G-}` for the baseline.
    pub prices: PriceProfile<S>,
    /// Prices announced to the sub-problems, `p^(k)`.
    pub announced_prices: PriceProfile<S>,
    pub states: Vec<AgentState<S>>,
    /// `W_i(x_i, prices)` per agent.
    pub agent_welfare: Vec<S>,
    /// `sum_i phi_i(x_i)`.
    pub social_welfare: S,
    /// `sum_i L_{i lambda}(x*_i)` at the announced prices: the dual value.
    pub dual_value: Option<S>,
    /// RTP: grid cost of covering the imbalance.
    pub compensation_cost: Option<S>,
    /// RTP: `sum_i phi_i - compensation_cost`.
    pub welfare_after_compensation: Option<S>,
    /// RTP: `W_i` minus an equal share of the gateway's net cost.
    pub agent_welfare_after_compensation: Option<Vec<S>>,
    /// `sum_i (gamma m+ - m-)` of the recorded states.
    pub imbalance: Vec<S>,
    /// `xi(p^(k))`: the same sum over the sub-problem solutions.
    pub subgradient: Vec<S>,
    /// RTP: the compensated quantities `delta m`.
    pub delta_m: Option<Vec<S>>,
    /// LFS-DA: effective step of each slot's clearing.
    pub theta_bar: Option<Vec<S>>,
    pub max_kkt_residual: S,
    pub diagnostics: Vec<String>,
}

impl<S: Scalar> IterationRecord<S> {
    pub fn max_abs_imbalance(&self) -> S {
        self.imbalance.iter().fold(S::zero(), |m, x| m.max(x.abs()))
    }
}

/// Records of a mechanism run. A failing iteration ends the run; the records
/// before it are kept.
#[derive(Debug, Clone)]
pub struct MechanismRun<S = f64> {
    pub kind: MechanismKind,
    pub records: Vec<IterationRecord<S>>,
    /// Prices settled within the tolerance before the iteration budget ran out.
    pub converged: bool,
    pub failure: Option<Error>,
}

impl<S: Scalar> MechanismRun<S> {
    pub fn last(&self) -> Option<&IterationRecord<S>> {
        self.records.last()
    }

    pub fn into_result(self) -> Result<Vec<IterationRecord<S>>> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self.records),
        }
    }
}

/// Gateway cost of trading an imbalance `xi` with the outside grid:
/// deficits are bought at `p^{G-}`, surpluses sold at `p^{G+}`.
pub fn compensation_cost<S: Scalar>(imbalance: &[S], net: &NetworkParams<S>) -> S {
    imbalance
        .iter()
        .enumerate()
        .map(|(t, &xi)| net.p_grid_buy[t] * (-xi).pos() - net.p_grid_sell[t] * xi.pos())
        .sum()
}

/// Equal per-agent share of the gateway's net cost: the grid compensation
/// plus the market cash shortfall `sum_t p_t xi_t` (sellers were paid for
/// energy nobody bought, or buyers paid for energy the grid supplied).
pub fn compensation_charge<S: Scalar>(imbalance: &[S], prices: &[S], net: &NetworkParams<S>) -> S {
    let cash: S = imbalance.iter().zip(prices).map(|(&x, &p)| x * p).sum();
    (compensation_cost(imbalance, net) + cash) / S::from_usize(net.agent_count).unwrap()
}

fn validate_all<S: Scalar>(
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<usize> {
    net.validate()?;
    let grid = net.time_grid()?;
    check_len("params", net.agent_count, params.len())?;
    for (i, p) in params.iter().enumerate() {
        p.validate(grid).map_err(|e| e.for_agent(0, i))?;
    }
    cfg.validate(params.len(), grid.slot_count())?;
    Ok(grid.slot_count())
}

fn for_each_agent<T, F>(n: usize, parallel: bool, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn solve_all<S: Scalar>(
    iteration: usize,
    prices: &PriceProfile<S>,
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<Vec<SubproblemSolution<S>>> {
    for_each_agent(params.len(), cfg.parallel, |i| {
        solve_subproblem(prices, &params[i], net, &cfg.solver)
            .map_err(|e| Error::from(e).for_agent(iteration, i))
    })
    .into_iter()
    .collect()
}

fn market_sum<S: Scalar>(states: &[&AgentState<S>], gamma: S, slots: usize) -> Vec<S> {
    (0..slots)
        .map(|t| states.iter().map(|s| s.slots[t].market_excess(gamma)).sum())
        .collect()
}

fn phi_total<S: Scalar>(states: &[AgentState<S>], params: &[AgentParams<S>], net: &NetworkParams<S>) -> S {
    crate::welfare::total_individual_utility(states, params, net)
}

fn price_diagnostics<S: Scalar>(prices: &PriceProfile<S>, net: &NetworkParams<S>, out: &mut Vec<String>) {
    for (t, &p) in prices.as_slice().iter().enumerate() {
        if p < S::zero() {
            out.push(format!("slot {t}: negative price {p}"));
        } else if p > net.p_grid_buy[t] {
            out.push(format!("slot {t}: price {p} above grid purchase price"));
        }
    }
}

fn settled<S: Scalar>(next: &PriceProfile<S>, current: &PriceProfile<S>, tol: S) -> bool {
    next.max_abs_diff(current) < tol
}

/// Dual decomposition with a constant subgradient step:
/// `p^(k+1) = p^(k) - theta_k xi(p^(k))`. Imbalances are traded with the
/// outside grid and the cost shared equally.
pub fn run_rtp<S: Scalar>(
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<MechanismRun<S>> {
    let slots = validate_all(params, net, cfg)?;
    let mut run = MechanismRun {
        kind: MechanismKind::Rtp,
        records: Vec::new(),
        converged: false,
        failure: None,
    };
    let mut prices = cfg.start(net);
    for k in 0..cfg.max_iterations {
        let sols = match solve_all(k, &prices, params, net, cfg) {
            Ok(s) => s,
            Err(e) => {
                run.failure = Some(e);
                break;
            }
        };
        let states: Vec<AgentState<S>> = sols.iter().map(|s| s.state.clone()).collect();
        let xi = market_sum(&states.iter().collect::<Vec<_>>(), net.gamma, slots);
        let agent_welfare: Vec<S> = sols.iter().map(|s| s.objective).collect();
        let phi = phi_total(&states, params, net);
        let cost = compensation_cost(&xi, net);
        let charge = compensation_charge(&xi, prices.as_slice(), net);
        let mut diagnostics = Vec::new();
        price_diagnostics(&prices, net, &mut diagnostics);
        if sols.iter().any(|s| s.g_plus_cap_binding) {
            diagnostics.push("grid sale cap binding".into());
        }
        let next = PriceProfile::new(
            prices
                .as_slice()
                .iter()
                .zip(&xi)
                .map(|(&p, &x)| p - cfg.theta_k * x)
                .collect(),
        )?;
        run.records.push(IterationRecord {
            iteration: k,
            prices: prices.clone(),
            announced_prices: prices.clone(),
            agent_welfare_after_compensation: Some(agent_welfare.iter().map(|&w| w - charge).collect()),
            dual_value: Some(agent_welfare.iter().copied().sum()),
            agent_welfare,
            states,
            social_welfare: phi,
            compensation_cost: Some(cost),
            welfare_after_compensation: Some(phi - cost),
            imbalance: xi.clone(),
            subgradient: xi.clone(),
            delta_m: Some(xi),
            theta_bar: None,
            max_kkt_residual: sols.iter().fold(S::zero(), |m, s| m.max(s.kkt_residual)),
            diagnostics,
        });
        let done = settled(&next, &prices, cfg.price_tol);
        prices = next;
        if done {
            run.converged = true;
            break;
        }
    }
    Ok(run)
}

/// Linear-bid double auction: agents solve at `p^(k)`, bid
/// `(beta p + m- - m+, beta)`, each slot clears exactly, and agents re-solve
/// with the cleared quantities pinned.
pub fn run_lfsda<S: Scalar>(
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<MechanismRun<S>> {
    let slots = validate_all(params, net, cfg)?;
    let agents = params.len();
    let mut run = MechanismRun {
        kind: MechanismKind::Lfsda,
        records: Vec::new(),
        converged: false,
        failure: None,
    };
    let mut prices = cfg.start(net);
    for k in 0..cfg.max_iterations {
        match lfsda_step(k, &prices, params, net, cfg, slots, agents) {
            Ok(record) => {
                let next = record.prices.clone();
                run.records.push(record);
                let done = settled(&next, &prices, cfg.price_tol);
                prices = next;
                if done {
                    run.converged = true;
                    break;
                }
            }
            Err(e) => {
                run.failure = Some(e);
                break;
            }
        }
    }
    Ok(run)
}

fn lfsda_step<S: Scalar>(
    k: usize,
    prices: &PriceProfile<S>,
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
    slots: usize,
    agents: usize,
) -> Result<IterationRecord<S>> {
    let sols = solve_all(k, prices, params, net, cfg)?;
    let sub_states: Vec<&AgentState<S>> = sols.iter().map(|s| &s.state).collect();
    let subgradient = market_sum(&sub_states, net.gamma, slots);
    let dual_value: S = sols.iter().map(|s| s.objective).sum();

    let mut cleared = Vec::with_capacity(slots);
    let mut theta_bar = Vec::with_capacity(slots);
    let mut pinned_plus = vec![vec![S::zero(); slots]; agents];
    let mut pinned_minus = vec![vec![S::zero(); slots]; agents];
    for t in 0..slots {
        let bids = (0..agents)
            .map(|i| {
                let s = &sols[i].state.slots[t];
                bid_from_allocation(s.m_plus, s.m_minus, cfg.beta[i][t], prices[t])
                    .map_err(|e| e.for_agent(k, i))
            })
            .collect::<Result<Vec<_>>>()?;
        let clearing = market_clearing(&bids, net.gamma)?;
        for (i, &(mu_plus, mu_minus)) in clearing.allocations.iter().enumerate() {
            pinned_plus[i][t] = mu_plus;
            pinned_minus[i][t] = mu_minus;
        }
        cleared.push(clearing.price);
        theta_bar.push(clearing.theta_bar);
    }
    let next = PriceProfile::new(cleared)?;

    let reconfigured = for_each_agent(agents, cfg.parallel, |i| {
        solve_with_market(
            &pinned_plus[i],
            &pinned_minus[i],
            &next,
            &params[i],
            net,
            &cfg.solver,
        )
        .map_err(|e| Error::from(e).for_agent(k, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let states: Vec<AgentState<S>> = reconfigured.iter().map(|s| s.state.clone()).collect();
    let imbalance = market_sum(&states.iter().collect::<Vec<_>>(), net.gamma, slots);
    let mut diagnostics = Vec::new();
    price_diagnostics(&next, net, &mut diagnostics);
    if sols.iter().chain(&reconfigured).any(|s| s.g_plus_cap_binding) {
        diagnostics.push("grid sale cap binding".into());
    }
    let kkt = sols
        .iter()
        .chain(&reconfigured)
        .fold(S::zero(), |m, s| m.max(s.kkt_residual));
    Ok(IterationRecord {
        iteration: k,
        prices: next,
        announced_prices: prices.clone(),
        agent_welfare: reconfigured.iter().map(|s| s.objective).collect(),
        social_welfare: phi_total(&states, params, net),
        states,
        dual_value: Some(dual_value),
        compensation_cost: None,
        welfare_after_compensation: None,
        agent_welfare_after_compensation: None,
        imbalance,
        subgradient,
        delta_m: None,
        theta_bar: Some(theta_bar),
        max_kkt_residual: kkt,
        diagnostics,
    })
}

/// Every agent optimizes against the outside grid and its battery alone.
/// The single record carries `p^{G-}` as its price profile.
pub fn run_without_trading<S: Scalar>(
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<MechanismRun<S>> {
    let slots = validate_all(params, net, cfg)?;
    let prices = PriceProfile::new(net.p_grid_buy.clone())?;
    let zeros = vec![S::zero(); slots];
    let result = for_each_agent(params.len(), cfg.parallel, |i| {
        solve_with_market(&zeros, &zeros, &prices, &params[i], net, &cfg.solver)
            .map_err(|e| Error::from(e).for_agent(0, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>();
    let mut run = MechanismRun {
        kind: MechanismKind::WithoutTrading,
        records: Vec::new(),
        converged: true,
        failure: None,
    };
    match result {
        Ok(sols) => {
            let states: Vec<AgentState<S>> = sols.iter().map(|s| s.state.clone()).collect();
            let mut diagnostics = Vec::new();
            if sols.iter().any(|s| s.g_plus_cap_binding) {
                diagnostics.push("grid sale cap binding".into());
            }
            run.records.push(IterationRecord {
                iteration: 0,
                prices: prices.clone(),
                announced_prices: prices,
                agent_welfare: sols.iter().map(|s| s.objective).collect(),
                social_welfare: phi_total(&states, params, net),
                states,
                dual_value: None,
                compensation_cost: None,
                welfare_after_compensation: None,
                agent_welfare_after_compensation: None,
                imbalance: zeros.clone(),
                subgradient: zeros,
                delta_m: None,
                theta_bar: None,
                max_kkt_residual: sols.iter().fold(S::zero(), |m, s| m.max(s.kkt_residual)),
                diagnostics,
            });
        }
        Err(e) => {
            run.converged = false;
            run.failure = Some(e);
        }
    }
    Ok(run)
}

/// Maximizer of `sum_i phi_i` under per-slot market balance.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedSolution<S = f64> {
    pub states: Vec<AgentState<S>>,
    /// `phi_i` per agent.
    pub agent_welfare: Vec<S>,
    /// `sum_i phi_i`.
    pub welfare: S,
    /// Multipliers of the balance constraints.
    pub prices: PriceProfile<S>,
    /// Dual function at `prices`: the sum of sub-problem optima.
    pub dual_value: S,
    /// `dual_value - welfare`; non-negative by weak duality.
    pub duality_gap: S,
    pub kkt_residual: S,
    pub iterations: usize,
    pub converged: bool,
    /// Largest `|sum_i (gamma m+ - m-)|` of the returned allocation.
    pub max_imbalance: S,
}

/// Solves the joint problem over all agents with the balance
/// `sum_i (gamma m+ - m-) = 0` in every slot, then evaluates the dual
/// function at the balance multipliers for a certified gap.
pub fn solve_centralized_optimal<S: Scalar>(
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
    cfg: &MechanismConfig<S>,
) -> Result<CentralizedSolution<S>> {
    let slots = validate_all(params, net, cfg)?;
    let agents = params.len();
    let stride = 2 * agents + 1;
    let mut problem = QpProblem::new(stride * slots);
    let coupling = move |t: usize| t * stride + 2 * agents;
    let mut blocks = Vec::with_capacity(agents);
    for (i, p) in params.iter().enumerate() {
        let cons = move |t: usize| t * stride + 2 * i;
        let soc = move |t: usize| t * stride + 2 * i + 1;
        let rows = RowMap {
            conservation: &cons,
            soc: &soc,
            coupling: Some(&coupling),
        };
        let market = MarketSpec {
            prices: None,
            pinned: None,
        };
        blocks.push(add_agent_block(&mut problem, p, net, market, &rows, &cfg.solver));
    }
    let (problem, row_map) = drop_empty_rows(problem).map_err(|row| Error::Infeasible {
        slot: row / stride,
        detail: "fixed quantities violate an equality with no free variable".into(),
    })?;
    let sol = qp::solve(&problem, &cfg.solver.ipm());

    let states: Vec<AgentState<S>> = blocks
        .iter()
        .zip(params)
        .map(|(vars, p)| extract_state(vars, &sol.x, p, true, &cfg.solver))
        .collect();
    let mut x = sol.x.clone();
    for ((vars, state), p) in blocks.iter().zip(&states).zip(params) {
        write_back(vars, state, p, &mut x);
    }
    let kkt = qp::kkt_residual(&problem, &x, &sol.y, &sol.z, &sol.w);
    let lambda = PriceProfile::new(
        (0..slots)
            .map(|t| row_map[coupling(t)].map_or(S::zero(), |r| sol.y[r]))
            .collect(),
    )?;
    let zero_prices = vec![S::zero(); slots];
    let agent_welfare: Vec<S> = states
        .iter()
        .zip(params)
        .map(|(s, p)| welfare_unchecked(s, &zero_prices, p, net).individual_utility())
        .collect();
    let welfare: S = agent_welfare.iter().copied().sum();
    let duals = for_each_agent(agents, cfg.parallel, |i| {
        solve_subproblem(&lambda, &params[i], net, &cfg.solver).map_err(|e| Error::from(e).for_agent(0, i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let dual_value: S = duals.iter().map(|d| d.objective).sum();
    let imbalance = market_sum(&states.iter().collect::<Vec<_>>(), net.gamma, slots);
    Ok(CentralizedSolution {
        states,
        agent_welfare,
        welfare,
        prices: lambda,
        dual_value,
        duality_gap: dual_value - welfare,
        kkt_residual: kkt,
        iterations: sol.iterations,
        converged: kkt <= cfg.solver.kkt_tol,
        max_imbalance: imbalance.iter().fold(S::zero(), |m, x| m.max(x.abs())),
    })
}
