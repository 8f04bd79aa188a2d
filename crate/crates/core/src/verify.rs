//! Self-checks runnable from a binary: clearing against bisection, solver
//! against the lattice oracle, gradient against finite differences, and
//! balance/feasibility of short mechanism runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::market::{excess_function, market_clearing};
use crate::mechanisms::{run_lfsda, run_rtp, MechanismConfig};
use crate::model::{check_feasible, AgentParams, AgentState, Bid, NetworkParams, PriceProfile, SlotState};
use crate::solver::{brute_force_oracle, lattice_bound, objective_gradient, solve_subproblem, SolverConfig};
use crate::welfare::welfare_unchecked;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random single-agent instance over `slots` slots with varied devices,
/// preferences and prices.
pub fn random_instance(
    rng: &mut impl Rng,
    slots: usize,
) -> (AgentParams<f64>, NetworkParams<f64>, PriceProfile<f64>) {
    let s_max = rng.gen_range(0.0..2.0);
    let params = AgentParams {
        l_plus_min: if rng.gen_bool(0.3) {
            rng.gen_range(0.0..0.2)
        } else {
            0.0
        },
        l_minus_max: (0..slots).map(|_| rng.gen_range(0.0..1.5)).collect(),
        b_plus_max: rng.gen_range(0.0..1.0),
        b_minus_max: rng.gen_range(0.0..1.0),
        m_plus_max: rng.gen_range(0.0..2.0),
        m_minus_max: rng.gen_range(0.0..2.0),
        g_minus_max: rng.gen_range(0.5..3.0),
        s_max,
        s_init: rng.gen_range(0.0..=s_max),
        eta: rng.gen_range(0.5..=1.0),
        utility_omega: (0..slots).map(|_| rng.gen_range(5.0..15.0)).collect(),
        utility_theta: (0..slots).map(|_| rng.gen_range(10.0..40.0)).collect(),
        cost_linear: rng.gen_range(0.0..3.0),
        cost_quadratic: rng.gen_range(0.0..2.0),
    };
    let buy: f64 = rng.gen_range(10.0..25.0);
    let net = NetworkParams {
        gamma: rng.gen_range(0.5..=1.0),
        p_grid_buy: vec![buy; slots],
        p_grid_sell: vec![rng.gen_range(0.0..buy / 2.0); slots],
        agent_count: 1,
    };
    let prices =
        PriceProfile::new((0..slots).map(|_| rng.gen_range(0.0..20.0)).collect()).expect("finite prices");
    (params, net, prices)
}

/// Random bid set of `n` bids.
pub fn random_bids(rng: &mut impl Rng, n: usize) -> Vec<Bid<f64>> {
    (0..n)
        .map(|_| Bid::new(rng.gen_range(-10.0..10.0), rng.gen_range(0.05..2.0)).expect("positive slope"))
        .collect()
}

/// Smallest root of the excess function by bisection to `tol`.
pub fn bisection_price(bids: &[Bid<f64>], gamma: f64, tol: f64) -> f64 {
    let spread = bids.iter().map(|b| b.breakpoint().abs()).fold(1.0, f64::max);
    let (mut lo, mut hi) = (-2.0 * spread, 2.0 * spread);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if excess_function(bids, gamma, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_clearing(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst_price = 0.0f64;
    let mut worst_excess = 0.0f64;
    for _ in 0..300 {
        let n = rng.gen_range(1..=50);
        let gamma = [0.5, 0.8, 1.0][rng.gen_range(0..3)];
        let bids = random_bids(rng, n);
        match market_clearing(&bids, gamma) {
            Ok(r) => {
                worst_price = worst_price.max((r.price - bisection_price(&bids, gamma, 1e-12)).abs());
                worst_excess = worst_excess.max(r.excess_at_price.abs());
            }
            Err(e) => {
                return CheckResult {
                    name: "clearing vs bisection",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    CheckResult {
        name: "clearing vs bisection",
        passed: worst_price <= 1e-9 && worst_excess <= 1e-9,
        detail: format!("max price gap {worst_price:e}, max |F(p*)| {worst_excess:e}"),
    }
}

fn check_oracle(rng: &mut ChaCha8Rng) -> CheckResult {
    let cfg = SolverConfig::default();
    let mut worst = f64::INFINITY;
    let mut kkt = 0.0f64;
    for _ in 0..10 {
        let slots = rng.gen_range(1..=2);
        let (params, net, prices) = random_instance(rng, slots);
        let res = if slots == 1 { 81 } else { 31 };
        let solved = match solve_subproblem(&prices, &params, &net, &cfg) {
            Ok(s) => s,
            Err(e) => {
                return CheckResult {
                    name: "solver vs lattice oracle",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        };
        let oracle = brute_force_oracle(&prices, &params, &net, res, &cfg).expect("small lattice");
        let eps = lattice_bound(&prices, &params, &net, res);
        worst = worst.min(solved.objective - (oracle.objective - eps));
        kkt = kkt.max(solved.kkt_residual);
    }
    CheckResult {
        name: "solver vs lattice oracle",
        passed: worst >= 0.0 && kkt <= 1e-7,
        detail: format!("min slack {worst:e}, max KKT residual {kkt:e}"),
    }
}

fn check_gradient(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let slots = rng.gen_range(1..=4);
        let (params, net, prices) = random_instance(rng, slots);
        let state = AgentState {
            slots: (0..slots)
                .map(|t| {
                    let sat = params.utility_omega[t] / params.utility_theta[t];
                    // keep consumption away from the saturation kink
                    let l = if rng.gen_bool(0.5) {
                        sat * rng.gen_range(0.1..0.8)
                    } else {
                        sat * rng.gen_range(1.2..2.0)
                    };
                    SlotState {
                        l_plus: l,
                        l_minus: rng.gen_range(0.0..1.0),
                        b_plus: rng.gen_range(0.0..1.0),
                        b_minus: rng.gen_range(0.0..1.0),
                        m_plus: rng.gen_range(0.0..1.0),
                        m_minus: rng.gen_range(0.0..1.0),
                        g_plus: rng.gen_range(0.0..1.0),
                        g_minus: rng.gen_range(0.0..1.0),
                    }
                })
                .collect(),
        };
        let grad = objective_gradient(&state, &prices, &params, &net);
        let x = state.to_vec();
        let h = 1e-6;
        for j in 0..x.len() {
            let eval = |v: f64| {
                let mut y = x.clone();
                y[j] = v;
                let s = AgentState::from_vec(&y).expect("8T entries");
                welfare_unchecked(&s, prices.as_slice(), &params, &net).total
            };
            let fd = (eval(x[j] + h) - eval(x[j] - h)) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs() / grad[j].abs().max(1.0));
        }
    }
    CheckResult {
        name: "gradient vs finite differences",
        passed: worst <= 1e-6,
        detail: format!("max relative error {worst:e}"),
    }
}

fn small_fleet(
    rng: &mut ChaCha8Rng,
    gamma: f64,
) -> (Vec<AgentParams<f64>>, NetworkParams<f64>, MechanismConfig<f64>) {
    let (agents, slots) = (5, 6);
    let params = (0..agents)
        .map(|_| {
            let pv = (0..slots)
                .map(|t| {
                    if (2..4).contains(&t) {
                        rng.gen_range(0.0..1.2)
                    } else {
                        0.0
                    }
                })
                .collect();
            AgentParams::household(pv)
        })
        .collect();
    let net = NetworkParams::uniform(slots, agents, gamma, 20.0, 0.0);
    let mut cfg = MechanismConfig::new(agents, slots);
    cfg.max_iterations = 40;
    (params, net, cfg)
}

fn check_mechanisms(rng: &mut ChaCha8Rng) -> CheckResult {
    let (params, net, cfg) = small_fleet(rng, 0.8);
    let run = match run_lfsda(&params, &net, &cfg) {
        Ok(r) if r.failure.is_none() => r,
        Ok(r) => {
            return CheckResult {
                name: "LFS-DA balance and feasibility",
                passed: false,
                detail: r.failure.map(|e| e.to_string()).unwrap_or_default(),
            }
        }
        Err(e) => {
            return CheckResult {
                name: "LFS-DA balance and feasibility",
                passed: false,
                detail: e.to_string(),
            }
        }
    };
    let mut imbalance = 0.0f64;
    let mut infeasible = 0usize;
    for r in &run.records {
        imbalance = imbalance.max(r.max_abs_imbalance());
        for (s, p) in r.states.iter().zip(&params) {
            if !check_feasible(s, p, 1e-8)
                .map(|f| f.is_feasible())
                .unwrap_or(false)
            {
                infeasible += 1;
            }
        }
    }
    CheckResult {
        name: "LFS-DA balance and feasibility",
        passed: imbalance <= 1e-9 && infeasible == 0,
        detail: format!("max imbalance {imbalance:e}, infeasible states {infeasible}"),
    }
}

fn check_price_identity(rng: &mut ChaCha8Rng) -> CheckResult {
    let (params, net, cfg) = small_fleet(rng, 1.0);
    let mut worst = 0.0f64;
    match run_lfsda(&params, &net, &cfg) {
        Ok(run) if run.failure.is_none() => {
            for r in &run.records {
                let theta = r.theta_bar.as_ref().expect("LFS-DA records carry theta_bar");
                for t in 0..r.prices.len() {
                    let predicted = r.announced_prices[t] - theta[t] * r.subgradient[t];
                    worst = worst.max((r.prices[t] - predicted).abs());
                }
            }
        }
        _ => worst = f64::INFINITY,
    }
    CheckResult {
        name: "cleared price as subgradient step (gamma = 1)",
        passed: worst <= 1e-9,
        detail: format!("max deviation {worst:e}"),
    }
}

fn check_weak_duality(rng: &mut ChaCha8Rng) -> CheckResult {
    let (params, net, mut cfg) = small_fleet(rng, 0.8);
    cfg.max_iterations = 20;
    let (Ok(rtp), Ok(lfsda)) = (run_rtp(&params, &net, &cfg), run_lfsda(&params, &net, &cfg)) else {
        return CheckResult {
            name: "weak duality",
            passed: false,
            detail: "mechanism run failed".into(),
        };
    };
    let best_primal = lfsda
        .records
        .iter()
        .map(|r| r.social_welfare)
        .fold(f64::NEG_INFINITY, f64::max);
    let min_dual = rtp
        .records
        .iter()
        .filter_map(|r| r.dual_value)
        .fold(f64::INFINITY, f64::min);
    CheckResult {
        name: "weak duality",
        passed: min_dual >= best_primal - 1e-6,
        detail: format!("min dual {min_dual}, best balanced welfare {best_primal}"),
    }
}

/// Runs every check with a generator seeded by `seed`.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check_clearing(&mut rng),
        check_oracle(&mut rng),
        check_gradient(&mut rng),
        check_mechanisms(&mut rng),
        check_price_identity(&mut rng),
        check_weak_duality(&mut rng),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_checks(11) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
