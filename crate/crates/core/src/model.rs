//! Domain types of the prosumer network and the feasibility predicates of an
//! agent's decision set.

use std::fmt;
use std::ops::Index;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of trading slots shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeGrid {
    slot_count: usize,
}

impl TimeGrid {
    pub fn new(slot_count: usize) -> Result<Self> {
        if slot_count == 0 {
            return Err(Error::InvalidParameter {
                name: "slot_count",
                reason: "at least one slot is required".into(),
            });
        }
        Ok(Self { slot_count })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn check_len<T>(&self, name: &'static str, profile: &[T]) -> Result<()> {
        check_len(name, self.slot_count, profile.len())
    }
}

pub(crate) fn check_len(name: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch {
            name,
            expected,
            found,
        })
    }
}

/// Per-agent device limits, battery data and utility/cost coefficients.
///
/// Profiles (`l_minus_max`, `utility_omega`, `utility_theta`) carry one entry
/// per slot. Generation cost is `cost_linear * l + cost_quadratic / 2 * l^2`;
/// both coefficients are zero for photovoltaic generation.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams<S = f64> {
    pub l_plus_min: S,
    pub l_minus_max: Vec<S>,
    pub b_plus_max: S,
    pub b_minus_max: S,
    pub m_plus_max: S,
    pub m_minus_max: S,
    pub g_minus_max: S,
    pub s_max: S,
    pub s_init: S,
    pub eta: S,
    pub utility_omega: Vec<S>,
    pub utility_theta: Vec<S>,
    pub cost_linear: S,
    pub cost_quadratic: S,
}

impl<S: Scalar> AgentParams<S> {
    /// A household with the reference experiment's devices and preferences
    /// (omega = 10, theta = 30, 1/1 battery rates, 5 capacity, eta = 0.7,
    /// market caps 5, grid purchase cap 5) and the given PV cap profile.
    pub fn household(pv_cap: Vec<S>) -> Self {
        let slots = pv_cap.len();
        Self {
            l_plus_min: S::zero(),
            l_minus_max: pv_cap,
            b_plus_max: S::one(),
            b_minus_max: S::one(),
            m_plus_max: S::lit(5.0),
            m_minus_max: S::lit(5.0),
            g_minus_max: S::lit(5.0),
            s_max: S::lit(5.0),
            s_init: S::zero(),
            eta: S::lit(0.7),
            utility_omega: vec![S::lit(10.0); slots],
            utility_theta: vec![S::lit(30.0); slots],
            cost_linear: S::zero(),
            cost_quadratic: S::zero(),
        }
    }

    pub fn slot_count(&self) -> usize {
        self.l_minus_max.len()
    }

    pub fn validate(&self, grid: TimeGrid) -> Result<()> {
        grid.check_len("l_minus_max", &self.l_minus_max)?;
        grid.check_len("utility_omega", &self.utility_omega)?;
        grid.check_len("utility_theta", &self.utility_theta)?;
        let nonneg = [
            ("l_plus_min", self.l_plus_min),
            ("b_plus_max", self.b_plus_max),
            ("b_minus_max", self.b_minus_max),
            ("m_plus_max", self.m_plus_max),
            ("m_minus_max", self.m_minus_max),
            ("g_minus_max", self.g_minus_max),
            ("s_max", self.s_max),
            ("cost_linear", self.cost_linear),
            ("cost_quadratic", self.cost_quadratic),
        ];
        for (name, value) in nonneg {
            if !(value >= S::zero()) || !value.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("must be finite and non-negative, got {value}"),
                });
            }
        }
        if self
            .l_minus_max
            .iter()
            .any(|v| !(*v >= S::zero()) || !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                name: "l_minus_max",
                reason: "entries must be finite and non-negative".into(),
            });
        }
        if !(self.s_init >= S::zero() && self.s_init <= self.s_max) {
            return Err(Error::InvalidParameter {
                name: "s_init",
                reason: format!("must lie in [0, {}], got {}", self.s_max, self.s_init),
            });
        }
        if !(self.eta >= S::zero() && self.eta <= S::one()) {
            return Err(Error::InvalidParameter {
                name: "eta",
                reason: format!("must lie in [0, 1], got {}", self.eta),
            });
        }
        if self
            .utility_theta
            .iter()
            .any(|v| !(*v > S::zero()) || !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                name: "utility_theta",
                reason: "entries must be finite and strictly positive".into(),
            });
        }
        if self
            .utility_omega
            .iter()
            .any(|v| !(*v >= S::zero()) || !v.is_finite())
        {
            return Err(Error::InvalidParameter {
                name: "utility_omega",
                reason: "entries must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Parameters shared by the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<S = f64> {
    /// Transmission efficiency of the regional market.
    pub gamma: S,
    /// Price of buying from the outside grid, `p^{G-}_t`.
    pub p_grid_buy: Vec<S>,
    /// Price of selling to the outside grid, `p^{G+}_t`.
    pub p_grid_sell: Vec<S>,
    pub agent_count: usize,
}

impl<S: Scalar> NetworkParams<S> {
    pub fn uniform(slots: usize, agent_count: usize, gamma: S, buy: S, sell: S) -> Self {
        Self {
            gamma,
            p_grid_buy: vec![buy; slots],
            p_grid_sell: vec![sell; slots],
            agent_count,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.p_grid_buy.len()
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.slot_count())
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.time_grid()?;
        grid.check_len("p_grid_sell", &self.p_grid_sell)?;
        if self.agent_count == 0 {
            return Err(Error::InvalidParameter {
                name: "agent_count",
                reason: "at least one agent is required".into(),
            });
        }
        if !(self.gamma >= S::zero() && self.gamma <= S::one()) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                reason: format!("must lie in [0, 1], got {}", self.gamma),
            });
        }
        for (t, (&buy, &sell)) in self.p_grid_buy.iter().zip(&self.p_grid_sell).enumerate() {
            if !(S::zero() <= sell && sell <= buy) || !buy.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "p_grid_sell",
                    reason: format!("slot {t}: need 0 <= p_grid_sell ({sell}) <= p_grid_buy ({buy})"),
                });
            }
        }
        Ok(())
    }
}

/// One slot of an agent's decision vector. Every field is an energy.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotState<S = f64> {
    /// Consumption.
    pub l_plus: S,
    /// Generation.
    pub l_minus: S,
    /// Battery charge.
    pub b_plus: S,
    /// Battery discharge.
    pub b_minus: S,
    /// Sold to the regional market.
    pub m_plus: S,
    /// Bought from the regional market.
    pub m_minus: S,
    /// Sold to the outside grid.
    pub g_plus: S,
    /// Bought from the outside grid.
    pub g_minus: S,
}

impl<S: Scalar> SlotState<S> {
    pub fn zero() -> Self {
        Self {
            l_plus: S::zero(),
            l_minus: S::zero(),
            b_plus: S::zero(),
            b_minus: S::zero(),
            m_plus: S::zero(),
            m_minus: S::zero(),
            g_plus: S::zero(),
            g_minus: S::zero(),
        }
    }

    /// Outflow minus inflow at the smart meter; zero for a conserving slot.
    pub fn flow_residual(&self) -> S {
        self.l_plus - self.l_minus + self.b_plus - self.b_minus + self.m_plus - self.m_minus + self.g_plus
            - self.g_minus
    }

    /// Contribution `gamma m+ - m-` to the regional market balance.
    pub fn market_excess(&self, gamma: S) -> S {
        gamma * self.m_plus - self.m_minus
    }

    pub(crate) fn fields(&self) -> [S; 8] {
        [
            self.l_plus,
            self.l_minus,
            self.b_plus,
            self.b_minus,
            self.m_plus,
            self.m_minus,
            self.g_plus,
            self.g_minus,
        ]
    }

    pub(crate) fn from_fields(v: [S; 8]) -> Self {
        Self {
            l_plus: v[0],
            l_minus: v[1],
            b_plus: v[2],
            b_minus: v[3],
            m_plus: v[4],
            m_minus: v[5],
            g_plus: v[6],
            g_minus: v[7],
        }
    }
}

/// An agent's full decision profile, one [`SlotState`] per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState<S = f64> {
    pub slots: Vec<SlotState<S>>,
}

impl<S: Scalar> AgentState<S> {
    pub fn zeros(slot_count: usize) -> Self {
        Self {
            slots: vec![SlotState::zero(); slot_count],
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Flattened `8T` vector in slot-major order.
    pub fn to_vec(&self) -> Vec<S> {
        self.slots.iter().flat_map(|s| s.fields()).collect()
    }

    pub fn from_vec(values: &[S]) -> Result<Self> {
        if !values.len().is_multiple_of(8) {
            return Err(Error::LengthMismatch {
                name: "state vector",
                expected: values.len().div_ceil(8) * 8,
                found: values.len(),
            });
        }
        let slots = values
            .chunks_exact(8)
            .map(|c| SlotState::from_fields([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        Ok(Self { slots })
    }

    pub fn column(&self, pick: impl Fn(&SlotState<S>) -> S) -> Vec<S> {
        self.slots.iter().map(pick).collect()
    }
}

/// Regional market price per slot (the multiplier of the balance constraint).
#[derive(Debug, Clone, PartialEq)]
pub struct PriceProfile<S = f64>(Vec<S>);

impl<S: Scalar> PriceProfile<S> {
    pub fn new(prices: Vec<S>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::InvalidParameter {
                name: "prices",
                reason: "empty price profile".into(),
            });
        }
        if let Some(p) = prices.iter().find(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "prices",
                reason: format!("non-finite entry {p}"),
            });
        }
        Ok(Self(prices))
    }

    pub fn uniform(slot_count: usize, price: S) -> Self {
        Self(vec![price; slot_count])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<S> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn mean(&self) -> S {
        self.0.iter().copied().sum::<S>() / S::from_usize(self.0.len()).unwrap()
    }
}

impl<S> Index<usize> for PriceProfile<S> {
    type Output = S;

    fn index(&self, slot: usize) -> &S {
        &self.0[slot]
    }
}

/// Linear bid `(alpha, beta)`: supply `max(beta p - alpha, 0)`, demand
/// `max(alpha - beta p, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bid<S = f64> {
    pub alpha: S,
    pub beta: S,
}

impl<S: Scalar> Bid<S> {
    pub fn new(alpha: S, beta: S) -> Result<Self> {
        if !(beta > S::zero()) || !beta.is_finite() || !alpha.is_finite() {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("bid needs finite alpha and beta > 0, got ({alpha}, {beta})"),
            });
        }
        Ok(Self { alpha, beta })
    }

    /// Price at which the bid switches from buying to selling.
    pub fn breakpoint(&self) -> S {
        self.alpha / self.beta
    }

    pub fn supply(&self, price: S) -> S {
        (self.beta * price - self.alpha).pos()
    }

    pub fn demand(&self, price: S) -> S {
        (self.alpha - self.beta * price).pos()
    }
}

/// The constraint family of the agent feasible set, `h^{t1}..h^{t17}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    ConsumptionMin,
    GenerationNonNeg,
    ChargeNonNeg,
    DischargeNonNeg,
    MarketSaleNonNeg,
    MarketPurchaseNonNeg,
    GridSaleNonNeg,
    GridPurchaseNonNeg,
    GenerationMax,
    ChargeMax,
    DischargeMax,
    MarketSaleMax,
    MarketPurchaseMax,
    GridPurchaseMax,
    SocNonNeg,
    SocMax,
    FlowConservation,
}

impl Constraint {
    /// Index `j` of `h^{tj}`.
    pub fn index(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "h{} ({:?})", self.index(), self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    /// Zero-based slot index.
    pub slot: usize,
    pub constraint: Constraint,
    /// Positive amount by which the constraint is exceeded.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeasibilityReport {
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first(&self, constraint: Constraint) -> Option<&Violation> {
        self.violations.iter().find(|v| v.constraint == constraint)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.violations.iter().map(|v| v.magnitude).fold(0.0, f64::max)
    }
}

/// State of charge after each slot:
/// `s^t = s_init + sum_{k<=t} (eta b+_k - b-_k)`.
pub fn soc_trajectory<S: Scalar>(state: &AgentState<S>, params: &AgentParams<S>) -> Vec<S> {
    let mut soc = params.s_init;
    state
        .slots
        .iter()
        .map(|s| {
            soc = soc + params.eta * s.b_plus - s.b_minus;
            soc
        })
        .collect()
}

/// Evaluates every `h^{tj}` of the agent's feasible set and lists the ones
/// that exceed `tol` (inequalities) or whose magnitude exceeds `tol`
/// (flow conservation).
pub fn check_feasible<S: Scalar>(
    state: &AgentState<S>,
    params: &AgentParams<S>,
    tol: S,
) -> Result<FeasibilityReport> {
    let grid = TimeGrid::new(params.slot_count())?;
    grid.check_len("state", &state.slots)?;
    params.validate(grid)?;

    let soc = soc_trajectory(state, params);
    let mut report = FeasibilityReport::default();
    for (t, (s, &soc_t)) in state.slots.iter().zip(&soc).enumerate() {
        let checks = [
            (Constraint::ConsumptionMin, params.l_plus_min - s.l_plus),
            (Constraint::GenerationNonNeg, -s.l_minus),
            (Constraint::ChargeNonNeg, -s.b_plus),
            (Constraint::DischargeNonNeg, -s.b_minus),
            (Constraint::MarketSaleNonNeg, -s.m_plus),
            (Constraint::MarketPurchaseNonNeg, -s.m_minus),
            (Constraint::GridSaleNonNeg, -s.g_plus),
            (Constraint::GridPurchaseNonNeg, -s.g_minus),
            (Constraint::GenerationMax, s.l_minus - params.l_minus_max[t]),
            (Constraint::ChargeMax, s.b_plus - params.b_plus_max),
            (Constraint::DischargeMax, s.b_minus - params.b_minus_max),
            (Constraint::MarketSaleMax, s.m_plus - params.m_plus_max),
            (Constraint::MarketPurchaseMax, s.m_minus - params.m_minus_max),
            (Constraint::GridPurchaseMax, s.g_minus - params.g_minus_max),
            (Constraint::SocNonNeg, -soc_t),
            (Constraint::SocMax, soc_t - params.s_max),
            (Constraint::FlowConservation, s.flow_residual().abs()),
        ];
        for (constraint, h) in checks {
            if !(h <= tol) {
                report.violations.push(Violation {
                    slot: t,
                    constraint,
                    magnitude: h.as_f64(),
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idle_params(slots: usize) -> AgentParams<f64> {
        let mut p = AgentParams::household(vec![0.0; slots]);
        p.eta = 0.7;
        p
    }

    #[test]
    fn zero_state_is_feasible() {
        let params = idle_params(4);
        let report = check_feasible(&AgentState::zeros(4), &params, 1e-9).unwrap();
        assert!(report.is_feasible(), "{report:?}");
    }

    #[test]
    fn continuous_charging_overflows_capacity_at_eighth_slot() {
        let mut params = idle_params(10);
        params.l_minus_max = vec![1.0; 10];
        let mut state = AgentState::zeros(10);
        for s in &mut state.slots {
            s.b_plus = 1.0;
            s.l_minus = 1.0;
        }
        let report = check_feasible(&state, &params, 1e-9).unwrap();
        let v = report.first(Constraint::SocMax).expect("capacity violated");
        // 0.7 * 8 = 5.6 > 5: zero-based slot 7 is t = 8.
        assert_eq!(v.slot, 7);
        assert!((v.magnitude - 0.6).abs() < 1e-12);
        assert!(report
            .violations
            .iter()
            .all(|v| v.constraint == Constraint::SocMax));
    }

    #[test]
    fn unbalanced_sale_violates_conservation() {
        let params = idle_params(1);
        let mut state = AgentState::zeros(1);
        state.slots[0].m_plus = 1.0;
        let report = check_feasible(&state, &params, 1e-9).unwrap();
        let v = report.first(Constraint::FlowConservation).unwrap();
        assert_eq!(v.constraint.index(), 17);
        assert_eq!(v.magnitude, 1.0);
    }

    #[test]
    fn mismatched_lengths_are_structural_errors() {
        let params = idle_params(3);
        let err = check_feasible(&AgentState::zeros(2), &params, 1e-9).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
    }

    #[test]
    fn soc_examples() {
        let mut params = idle_params(2);
        params.s_init = 0.0;
        params.eta = 0.7;
        let mut state = AgentState::zeros(2);
        state.slots[0].b_plus = 1.0;
        state.slots[1].b_minus = 0.5;
        let soc = soc_trajectory(&state, &params);
        assert!((soc[0] - 0.7).abs() < 1e-15);
        assert!((soc[1] - 0.2).abs() < 1e-15);

        let mut params = idle_params(5);
        params.s_init = 5.0;
        params.eta = 1.0;
        let mut state = AgentState::zeros(5);
        for s in &mut state.slots {
            s.b_minus = 1.0;
        }
        assert_eq!(soc_trajectory(&state, &params), vec![4.0, 3.0, 2.0, 1.0, 0.0]);

        let params = idle_params(3);
        assert_eq!(soc_trajectory(&AgentState::zeros(3), &params), vec![0.0; 3]);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let grid = TimeGrid::new(2).unwrap();
        let mut p = idle_params(2);
        p.s_init = 6.0;
        assert!(p.validate(grid).is_err());
        let mut p = idle_params(2);
        p.utility_theta[1] = 0.0;
        assert!(p.validate(grid).is_err());
        let net = NetworkParams::uniform(2, 3, 0.8, 0.0, 1.0);
        assert!(net.validate().is_err(), "resale suppression");
        assert!(TimeGrid::new(0).is_err());
        assert!(Bid::new(1.0, 0.0).is_err());
    }

    #[test]
    fn bid_quantities() {
        let bid = Bid::new(1.0, 0.5).unwrap();
        assert_eq!(bid.breakpoint(), 2.0);
        assert_eq!(bid.supply(4.0), 1.0);
        assert_eq!(bid.demand(4.0), 0.0);
        assert_eq!(bid.demand(0.0), 1.0);
    }

    #[test]
    fn state_vector_round_trip() {
        let mut state = AgentState::<f64>::zeros(2);
        state.slots[1].g_minus = 3.0;
        state.slots[0].l_plus = 1.5;
        let v = state.to_vec();
        assert_eq!(v[15], 3.0);
        assert_eq!(AgentState::from_vec(&v).unwrap(), state);
        assert!(AgentState::<f64>::from_vec(&v[..5]).is_err());
    }
}
