//! Utility, cost and welfare functionals.

use crate::error::{Error, Result};
use crate::model::{check_len, AgentParams, AgentState, NetworkParams, PriceProfile, TimeGrid};
use crate::scalar::Scalar;

/// Welfare of one agent, split by source and summed over slots.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WelfareBreakdown<S = f64> {
    pub demand_utility: S,
    pub generation_cost: S,
    pub grid_revenue: S,
    pub grid_expense: S,
    pub market_revenue: S,
    pub market_expense: S,
    pub total: S,
}

impl<S: Scalar> WelfareBreakdown<S> {
    /// The price-independent part `phi_i`: everything except market payments.
    pub fn individual_utility(&self) -> S {
        self.demand_utility - self.generation_cost + self.grid_revenue - self.grid_expense
    }
}

/// Saturating quadratic utility: `omega l - theta/2 l^2` up to `omega/theta`,
/// constant `omega^2 / (2 theta)` beyond.
pub fn demand_utility<S: Scalar>(l: S, omega: S, theta: S) -> Result<S> {
    if !(l >= S::zero()) {
        return Err(Error::Domain {
            quantity: "consumption",
            value: l.as_f64(),
            lower: 0.0,
            upper: f64::INFINITY,
        });
    }
    if !(theta > S::zero()) {
        return Err(Error::InvalidParameter {
            name: "utility_theta",
            reason: format!("must be positive, got {theta}"),
        });
    }
    Ok(utility_value(l, omega, theta))
}

#[inline]
pub(crate) fn utility_value<S: Scalar>(l: S, omega: S, theta: S) -> S {
    let sat = omega / theta;
    let two = S::lit(2.0);
    if l <= sat {
        omega * l - theta / two * l * l
    } else {
        omega * omega / (two * theta)
    }
}

/// Derivative of [`demand_utility`]: `max(omega - theta l, 0)`.
#[inline]
pub fn marginal_utility<S: Scalar>(l: S, omega: S, theta: S) -> S {
    (omega - theta * l).pos()
}

/// Generation cost `a l + b/2 l^2` on `[0, l_minus_max[slot]]`.
pub fn generation_cost<S: Scalar>(l: S, params: &AgentParams<S>, slot: usize) -> Result<S> {
    let cap = *params.l_minus_max.get(slot).ok_or(Error::LengthMismatch {
        name: "l_minus_max",
        expected: slot + 1,
        found: params.l_minus_max.len(),
    })?;
    if !(l >= S::zero() && l <= cap) {
        return Err(Error::Domain {
            quantity: "generation",
            value: l.as_f64(),
            lower: 0.0,
            upper: cap.as_f64(),
        });
    }
    Ok(cost_value(l, params))
}

#[inline]
pub(crate) fn cost_value<S: Scalar>(l: S, params: &AgentParams<S>) -> S {
    params.cost_linear * l + params.cost_quadratic / S::lit(2.0) * l * l
}

/// Welfare `W_i(x_i, p)`; sellers receive `gamma p` per unit, buyers pay `p`.
pub fn agent_welfare<S: Scalar>(
    state: &AgentState<S>,
    prices: &PriceProfile<S>,
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
) -> Result<WelfareBreakdown<S>> {
    let grid = TimeGrid::new(net.slot_count())?;
    grid.check_len("state", &state.slots)?;
    grid.check_len("prices", prices.as_slice())?;
    grid.check_len("l_minus_max", &params.l_minus_max)?;
    Ok(welfare_unchecked(state, prices.as_slice(), params, net))
}

pub(crate) fn welfare_unchecked<S: Scalar>(
    state: &AgentState<S>,
    prices: &[S],
    params: &AgentParams<S>,
    net: &NetworkParams<S>,
) -> WelfareBreakdown<S> {
    let mut w = WelfareBreakdown::default();
    for (t, s) in state.slots.iter().enumerate() {
        w.demand_utility =
            w.demand_utility + utility_value(s.l_plus, params.utility_omega[t], params.utility_theta[t]);
        w.generation_cost = w.generation_cost + cost_value(s.l_minus, params);
        w.grid_revenue = w.grid_revenue + net.p_grid_sell[t] * s.g_plus;
        w.grid_expense = w.grid_expense + net.p_grid_buy[t] * s.g_minus;
        w.market_revenue = w.market_revenue + prices[t] * net.gamma * s.m_plus;
        w.market_expense = w.market_expense + prices[t] * s.m_minus;
    }
    w.total = w.individual_utility() + w.market_revenue - w.market_expense;
    w
}

/// `sum_i W_i(x_i, p)`. Equals `sum_i phi_i(x_i)` whenever the market
/// balances at every slot.
pub fn social_welfare<S: Scalar>(
    states: &[AgentState<S>],
    prices: &PriceProfile<S>,
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
) -> Result<S> {
    check_len("states", params.len(), states.len())?;
    let mut total = S::zero();
    for (state, p) in states.iter().zip(params) {
        total = total + agent_welfare(state, prices, p, net)?.total;
    }
    Ok(total)
}

/// `sum_i phi_i(x_i)`, the price-independent social welfare.
pub fn total_individual_utility<S: Scalar>(
    states: &[AgentState<S>],
    params: &[AgentParams<S>],
    net: &NetworkParams<S>,
) -> S {
    let zero = vec![S::zero(); net.slot_count()];
    states
        .iter()
        .zip(params)
        .map(|(s, p)| welfare_unchecked(s, &zero, p, net).individual_utility())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SlotState;

    fn pv_params(slots: usize) -> AgentParams<f64> {
        AgentParams::household(vec![1.0; slots])
    }

    #[test]
    fn utility_examples() {
        assert_eq!(demand_utility(0.0f64, 10.0, 30.0).unwrap(), 0.0);
        let sat = demand_utility(1.0f64 / 3.0, 10.0, 30.0).unwrap();
        assert!((sat - 5.0 / 3.0).abs() < 1e-12);
        assert!((demand_utility(0.2f64, 10.0, 30.0).unwrap() - 1.4).abs() < 1e-12);
        assert!((demand_utility(2.0f64, 10.0, 30.0).unwrap() - 5.0 / 3.0).abs() < 1e-12);
        assert!(demand_utility(-0.1f64, 10.0, 30.0).is_err());
    }

    #[test]
    fn utility_derivative_matches_finite_differences() {
        let h = 1e-5f64;
        for &l in &[0.01, 0.1, 0.2, 0.3, 0.34, 0.5, 1.0, 3.0] {
            let fd = (utility_value(l + h, 10.0, 30.0) - utility_value(l - h, 10.0, 30.0)) / (2.0 * h);
            assert!((fd - marginal_utility(l, 10.0, 30.0)).abs() < 1e-6, "l = {l}");
        }
    }

    #[test]
    fn cost_examples() {
        let mut p = pv_params(1);
        p.l_minus_max = vec![3.0];
        assert_eq!(generation_cost(0.5, &p, 0).unwrap(), 0.0);
        assert_eq!(generation_cost(0.0, &p, 0).unwrap(), 0.0);
        p.cost_linear = 1.0;
        p.cost_quadratic = 2.0;
        assert_eq!(generation_cost(2.0, &p, 0).unwrap(), 6.0);
        assert!(generation_cost(3.5, &p, 0).is_err());
        assert!(generation_cost(-1.0, &p, 0).is_err());
    }

    #[test]
    fn grid_purchase_for_consumption() {
        let p = pv_params(2);
        let net = NetworkParams::uniform(2, 1, 0.8, 20.0, 0.0);
        let mut state = AgentState::zeros(2);
        state.slots[1] = SlotState {
            l_plus: 1.0,
            g_minus: 1.0,
            ..SlotState::zero()
        };
        let w = agent_welfare(&state, &PriceProfile::uniform(2, 5.0), &p, &net).unwrap();
        assert!((w.total - (5.0 / 3.0 - 20.0)).abs() < 1e-12);
        assert_eq!(w.grid_expense, 20.0);
    }

    #[test]
    fn seller_receives_discounted_price() {
        let p = pv_params(1);
        let net = NetworkParams::uniform(1, 1, 0.8, 20.0, 0.0);
        let mut state = AgentState::zeros(1);
        state.slots[0].l_minus = 1.0;
        state.slots[0].m_plus = 1.0;
        let w = agent_welfare(&state, &PriceProfile::uniform(1, 9.0), &p, &net).unwrap();
        assert!((w.total - 7.2).abs() < 1e-12);
        assert_eq!(w.individual_utility(), 0.0);
    }

    #[test]
    fn internal_payments_cancel_when_balanced() {
        let params = vec![pv_params(1), pv_params(1)];
        let net = NetworkParams::uniform(1, 2, 0.8, 20.0, 0.0);
        let mut seller = AgentState::zeros(1);
        seller.slots[0].l_minus = 1.0;
        seller.slots[0].m_plus = 1.0;
        let mut buyer = AgentState::zeros(1);
        buyer.slots[0].m_minus = 0.8;
        buyer.slots[0].l_plus = 0.8;
        let states = vec![seller, buyer];
        let phi = total_individual_utility(&states, &params, &net);
        for price in [0.0, 3.0, 9.0, -2.0] {
            let w = social_welfare(&states, &PriceProfile::uniform(1, price), &params, &net).unwrap();
            assert!((w - phi).abs() < 1e-12);
        }
        assert_eq!(
            social_welfare(
                &[AgentState::zeros(1), AgentState::zeros(1)],
                &PriceProfile::uniform(1, 4.0),
                &params,
                &net
            )
            .unwrap(),
            0.0
        );
    }
}
