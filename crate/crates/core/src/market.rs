//! Per-slot double auction with linear bids.
//!
//! Agent `i` bids `(alpha_i, beta_i)`: at price `p` it sells
//! `max(beta_i p - alpha_i, 0)` or buys `max(alpha_i - beta_i p, 0)`. Sales
//! arrive discounted by `gamma`, so the market excess is
//! `F(p) = gamma sum_i max(beta_i p - alpha_i, 0) - sum_i max(alpha_i - beta_i p, 0)`,
//! a continuous non-decreasing piecewise-linear function whose root is the
//! clearing price.

use crate::error::{Error, Result};
use crate::model::Bid;
use crate::scalar::Scalar;

/// Outcome of clearing one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult<S = f64> {
    pub price: S,
    /// Agents with breakpoint `alpha/beta <= price`, in index order.
    pub sellers: Vec<usize>,
    /// The remaining agents, in index order.
    pub buyers: Vec<usize>,
    /// `(mu+, mu-)` per agent; at most one side is non-zero.
    pub allocations: Vec<(S, S)>,
    /// `1 / (gamma sum_{sellers} beta + sum_{buyers} beta)`.
    pub theta_bar: S,
    /// `F(price)`; zero up to rounding.
    pub excess_at_price: S,
}

/// Bid that reproduces a netted market decision at the announced price:
/// `alpha = beta p + m- - m+`.
pub fn bid_from_allocation<S: Scalar>(m_plus: S, m_minus: S, beta: S, price: S) -> Result<Bid<S>> {
    if m_plus > S::zero() && m_minus > S::zero() {
        return Err(Error::BothSidesPositive {
            m_plus: m_plus.as_f64(),
            m_minus: m_minus.as_f64(),
        });
    }
    if m_plus < S::zero() || m_minus < S::zero() {
        return Err(Error::Domain {
            quantity: "market quantity",
            value: m_plus.min(m_minus).as_f64(),
            lower: 0.0,
            upper: f64::INFINITY,
        });
    }
    Bid::new(beta * price + m_minus - m_plus, beta)
}

/// `F(p)`, the discounted supply minus demand.
pub fn excess_function<S: Scalar>(bids: &[Bid<S>], gamma: S, price: S) -> S {
    let mut supply = S::zero();
    let mut demand = S::zero();
    for b in bids {
        supply = supply + b.supply(price);
        demand = demand + b.demand(price);
    }
    gamma * supply - demand
}

/// Clears one slot: the smallest root of `F`.
///
/// Breakpoints are sorted and the first one with `F >= 0` found by
/// bisection over the sorted list; on the segment below it the seller/buyer
/// partition is fixed and `F` is linear, giving the closed form
/// `p* = (gamma A+ + A-) / (gamma B+ + B-)` with `A`, `B` the sums of `alpha`
/// and `beta` over each side. When `F` vanishes on a whole interval (only
/// possible with `gamma = 0`) its left end is returned, which is the
/// breakpoint found by the search.
pub fn market_clearing<S: Scalar>(bids: &[Bid<S>], gamma: S) -> Result<ClearingResult<S>> {
    if bids.is_empty() {
        return Err(Error::InvalidParameter {
            name: "bids",
            reason: "at least one bid is required".into(),
        });
    }
    if !(gamma >= S::zero() && gamma <= S::one()) {
        return Err(Error::InvalidParameter {
            name: "gamma",
            reason: format!("must lie in [0, 1], got {gamma}"),
        });
    }
    for b in bids {
        Bid::new(b.alpha, b.beta)?;
    }
    let mut order: Vec<usize> = (0..bids.len()).collect();
    let breakpoint = |i: usize| bids[i].breakpoint();
    order.sort_by(|&a, &b| {
        breakpoint(a)
            .partial_cmp(&breakpoint(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // first sorted breakpoint where the excess is non-negative; the last one
    // always qualifies since nobody buys there
    let (mut lo, mut hi) = (0usize, order.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if excess_function(bids, gamma, breakpoint(order[mid])) >= S::zero() {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let k = lo;
    let upper = breakpoint(order[k]);
    let price = if k == 0 {
        upper
    } else {
        let lower = breakpoint(order[k - 1]);
        let (mut a_sell, mut b_sell, mut a_buy, mut b_buy) = (S::zero(), S::zero(), S::zero(), S::zero());
        for (rank, &i) in order.iter().enumerate() {
            if rank < k {
                a_sell = a_sell + bids[i].alpha;
                b_sell = b_sell + bids[i].beta;
            } else {
                a_buy = a_buy + bids[i].alpha;
                b_buy = b_buy + bids[i].beta;
            }
        }
        let denom = gamma * b_sell + b_buy;
        let root = (gamma * a_sell + a_buy) / denom;
        root.max(lower).min(upper)
    };

    let mut sellers = Vec::new();
    let mut buyers = Vec::new();
    let mut allocations = Vec::with_capacity(bids.len());
    let (mut beta_sell, mut beta_buy) = (S::zero(), S::zero());
    for (i, b) in bids.iter().enumerate() {
        if b.breakpoint() <= price {
            sellers.push(i);
            beta_sell = beta_sell + b.beta;
            allocations.push((b.supply(price), S::zero()));
        } else {
            buyers.push(i);
            beta_buy = beta_buy + b.beta;
            allocations.push((S::zero(), b.demand(price)));
        }
    }
    Ok(ClearingResult {
        price,
        sellers,
        buyers,
        allocations,
        theta_bar: S::one() / (gamma * beta_sell + beta_buy),
        excess_at_price: excess_function(bids, gamma, price),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bids(pairs: &[(f64, f64)]) -> Vec<Bid<f64>> {
        pairs.iter().map(|&(a, b)| Bid::new(a, b).unwrap()).collect()
    }

    #[test]
    fn two_agent_example() {
        let b = bids(&[(0.0, 1.0), (1.0, 1.0)]);
        let r = market_clearing(&b, 0.8).unwrap();
        assert!((r.price - 1.0 / 1.8).abs() < 1e-12);
        assert_eq!(r.sellers, vec![0]);
        assert_eq!(r.buyers, vec![1]);
        assert!((r.allocations[0].0 - 1.0 / 1.8).abs() < 1e-12);
        assert!((r.allocations[1].1 - 0.8 / 1.8).abs() < 1e-12);
        assert!((r.theta_bar - 1.0 / 1.8).abs() < 1e-12);
        assert!(r.excess_at_price.abs() < 1e-12);
    }

    #[test]
    fn one_ninth_at_gamma_point_eight() {
        let b = bids(&[(0.0, 0.5), (0.1, 0.5)]);
        let r = market_clearing(&b, 0.8).unwrap();
        assert!((r.price - 1.0 / 9.0).abs() < 1e-12);
        assert!((r.allocations[0].0 - 1.0 / 18.0).abs() < 1e-12);
        assert!((r.allocations[1].1 - 2.0 / 45.0).abs() < 1e-12);
    }

    #[test]
    fn equal_bids_clear_at_their_breakpoint() {
        let b = bids(&[(2.0, 0.5), (2.0, 0.5), (2.0, 0.5)]);
        let r = market_clearing(&b, 0.8).unwrap();
        assert_eq!(r.price, 4.0);
        assert!(r.allocations.iter().all(|&(s, d)| s == 0.0 && d == 0.0));
        assert_eq!(r.sellers.len(), 3);
    }

    #[test]
    fn zero_efficiency_returns_left_end_of_flat_root() {
        let b = bids(&[(0.0, 1.0), (1.0, 1.0), (3.0, 1.0)]);
        let r = market_clearing(&b, 0.0).unwrap();
        assert_eq!(r.price, 3.0);
        assert_eq!(r.excess_at_price, 0.0);
    }

    #[test]
    fn bid_reconstruction() {
        let b = bid_from_allocation(0.0f64, 0.3, 0.5, 10.0).unwrap();
        assert!((b.alpha - 5.3).abs() < 1e-12);
        assert!((b.demand(10.0) - 0.3).abs() < 1e-12);
        let b = bid_from_allocation(0.4f64, 0.0, 0.5, 2.0).unwrap();
        assert!((b.supply(2.0) - 0.4).abs() < 1e-12);
        assert!(matches!(
            bid_from_allocation(0.1, 0.2, 0.5, 1.0),
            Err(Error::BothSidesPositive { .. })
        ));
        assert!(bid_from_allocation(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn rejects_empty_and_bad_gamma() {
        assert!(market_clearing::<f64>(&[], 0.8).is_err());
        assert!(market_clearing(&bids(&[(1.0, 1.0)]), 1.5).is_err());
    }

    fn bisect(b: &[Bid<f64>], gamma: f64) -> f64 {
        let (mut lo, mut hi) = (-1e3, 1e3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if excess_function(b, gamma, mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    proptest! {
        #[test]
        fn clearing_is_a_root_and_matches_bisection(
            pairs in prop::collection::vec((-5.0f64..5.0, 0.05f64..2.0), 1..25),
            gamma in 0.05f64..=1.0,
        ) {
            let b = bids(&pairs);
            let r = market_clearing(&b, gamma).unwrap();
            prop_assert!(r.excess_at_price.abs() <= 1e-9);
            prop_assert!((r.price - bisect(&b, gamma)).abs() <= 1e-9);
            let supply: f64 = r.allocations.iter().map(|a| a.0).sum();
            let demand: f64 = r.allocations.iter().map(|a| a.1).sum();
            prop_assert!((gamma * supply - demand).abs() <= 1e-9);
            for &(s, d) in &r.allocations {
                prop_assert!(s >= 0.0 && d >= 0.0 && (s == 0.0 || d == 0.0));
            }
            prop_assert_eq!(r.sellers.len() + r.buyers.len(), b.len());
        }

        #[test]
        fn excess_is_monotone(
            pairs in prop::collection::vec((-5.0f64..5.0, 0.05f64..2.0), 1..10),
            gamma in 0.0f64..=1.0,
            p in -10.0f64..10.0,
            dp in 0.0f64..5.0,
        ) {
            let b = bids(&pairs);
            prop_assert!(excess_function(&b, gamma, p + dp) >= excess_function(&b, gamma, p) - 1e-12);
        }
    }
}
