use thiserror::Error;

/// Errors raised by the model, market and mechanism layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("`{name}` has length {found}, expected {expected}")]
    LengthMismatch {
        name: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{quantity} = {value} lies outside [{lower}, {upper}]")]
    Domain {
        quantity: &'static str,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("bid construction needs netted quantities, got m+ = {m_plus} and m- = {m_minus}")]
    BothSidesPositive { m_plus: f64, m_minus: f64 },

    #[error("feasible set is empty at slot {slot}: {detail}")]
    Infeasible { slot: usize, detail: String },

    #[error("solver did not reach tolerance after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("lattice of {points:e} points exceeds the limit of {limit:e}")]
    LatticeTooLarge { points: f64, limit: f64 },

    #[error("iteration {iteration}, agent {agent}: {source}")]
    Agent {
        iteration: usize,
        agent: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn for_agent(self, iteration: usize, agent: usize) -> Self {
        Error::Agent {
            iteration,
            agent,
            source: Box::new(self),
        }
    }
}
