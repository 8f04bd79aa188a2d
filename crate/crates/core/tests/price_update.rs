use lfsda_core::{
    bid_from_allocation, run_lfsda, solve_subproblem, AgentParams, MechanismConfig, NetworkParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fleet(seed: u64, gamma: f64) -> (Vec<AgentParams<f64>>, NetworkParams<f64>, MechanismConfig<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (agents, slots) = (6, 8);
    let params = (0..agents)
        .map(|_| {
            let a = rng.gen_range(0.0..1.4);
            let pv = (0..slots)
                .map(|t| {
                    if (2..6).contains(&t) {
                        a * rng.gen_range(0.5..1.0)
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
    cfg.max_iterations = 30;
    (params, net, cfg)
}

struct Deviation {
    /// Largest deviation from `p - theta_bar xi` over slots where no active
    /// bid's breakpoint lies between the announced and the cleared price.
    linear: f64,
    /// The same over the remaining slots.
    crossed: f64,
    linear_slots: usize,
}

fn deviation(seed: u64, gamma: f64) -> Deviation {
    let (params, net, cfg) = fleet(seed, gamma);
    let run = run_lfsda(&params, &net, &cfg).unwrap();
    let mut d = Deviation {
        linear: 0.0,
        crossed: 0.0,
        linear_slots: 0,
    };
    for r in &run.records {
        let announced: Vec<_> = params
            .iter()
            .map(|p| {
                solve_subproblem(&r.announced_prices, p, &net, &cfg.solver)
                    .unwrap()
                    .state
            })
            .collect();
        let theta = r.theta_bar.as_ref().unwrap();
        for t in 0..net.slot_count() {
            let (p0, p1) = (r.announced_prices[t], r.prices[t]);
            let (lo, hi) = (p0.min(p1), p0.max(p1));
            let crosses = announced.iter().enumerate().any(|(i, s)| {
                let slot = &s.slots[t];
                let bid = bid_from_allocation(slot.m_plus, slot.m_minus, cfg.beta[i][t], p0).unwrap();
                let bp = bid.breakpoint();
                // a kink at the cleared price counts, since the slope differs
                // on its two sides; kinks at the announced price are
                // harmless
                (bp - p0).abs() > 1e-9 && bp >= lo - 1e-9 && bp <= hi + 1e-9
            });
            let dev = (p1 - (p0 - theta[t] * r.subgradient[t])).abs();
            if crosses {
                d.crossed = d.crossed.max(dev);
            } else {
                d.linear_slots += 1;
                d.linear = d.linear.max(dev);
            }
        }
    }
    d
}

#[test]
fn update_is_exact_without_side_changes() {
    for seed in 0..3 {
        let d = deviation(seed, 0.8);
        assert!(d.linear_slots > 0);
        assert!(d.linear <= 1e-9, "seed {seed}: deviation {:e}", d.linear);
    }
}

#[test]
fn side_changes_break_the_update_below_unit_gamma() {
    // the excess function is steeper on the buying side of a breakpoint
    let d = deviation(0, 0.8);
    assert!(d.crossed > 1e-3, "deviation {:e}", d.crossed);
}

#[test]
fn at_unit_gamma_side_changes_are_harmless() {
    // with gamma = 1 the excess function has the same slope on both sides
    // of every breakpoint, so the identity holds everywhere
    let (params, net, cfg) = fleet(5, 1.0);
    let run = run_lfsda(&params, &net, &cfg).unwrap();
    for r in &run.records {
        let theta = r.theta_bar.as_ref().unwrap();
        for t in 0..net.slot_count() {
            let predicted = r.announced_prices[t] - theta[t] * r.subgradient[t];
            assert!((r.prices[t] - predicted).abs() <= 1e-9);
        }
    }
}
