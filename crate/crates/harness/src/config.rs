//! Experiment configuration, read from TOML. Every key is optional; the
//! defaults are the reference experiment on synthetic PV.
//!
//! ```toml
//! agents = 20
//! slots = 24
//! gamma = 0.8
//! iterations = 200
//! rng_seed = 7
//!
//! [pv]
//! kind = "synthetic"      # or kind = "csv", path = "pv.csv"
//! peak_mean = 0.8
//! peak_spread = 0.6
//!
//! [solver]
//! kkt_tol = 1e-7
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use lfsda_core::{AgentParams, MechanismConfig, NetworkParams, PriceProfile, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::pv::PvProfileSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub agents: usize,
    pub slots: usize,
    pub gamma: f64,
    pub eta: f64,
    pub b_plus_max: f64,
    pub b_minus_max: f64,
    pub s_init: f64,
    pub s_max: f64,
    pub m_plus_max: f64,
    pub m_minus_max: f64,
    pub g_minus_max: f64,
    pub l_plus_min: f64,
    pub p_grid_buy: f64,
    pub p_grid_sell: f64,
    pub utility_omega: f64,
    pub utility_theta: f64,
    pub cost_linear: f64,
    pub cost_quadratic: f64,
    pub beta: f64,
    pub theta_k: f64,
    pub iterations: usize,
    pub price_tol: f64,
    /// Uniform starting price; half the grid purchase price when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_price: Option<f64>,
    pub rng_seed: u64,
    pub parallel: bool,
    pub output_dir: PathBuf,
    pub pv: PvSource,
    pub solver: SolverSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PvSource {
    Synthetic { peak_mean: f64, peak_spread: f64 },
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub max_iters: usize,
    pub kkt_tol: f64,
    pub g_plus_cap: f64,
    pub boundary_fraction: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::<f64>::default();
        Self {
            max_iters: s.max_iters,
            kkt_tol: s.kkt_tol,
            g_plus_cap: s.g_plus_cap,
            boundary_fraction: s.boundary_fraction,
        }
    }
}

impl Default for PvSource {
    fn default() -> Self {
        PvSource::Synthetic {
            peak_mean: 0.8,
            peak_spread: 0.6,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            agents: 20,
            slots: 24,
            gamma: 0.8,
            eta: 0.7,
            b_plus_max: 1.0,
            b_minus_max: 1.0,
            s_init: 0.0,
            s_max: 5.0,
            m_plus_max: 5.0,
            m_minus_max: 5.0,
            g_minus_max: 5.0,
            l_plus_min: 0.0,
            p_grid_buy: 20.0,
            p_grid_sell: 0.0,
            utility_omega: 10.0,
            utility_theta: 30.0,
            cost_linear: 0.0,
            cost_quadratic: 0.0,
            beta: 0.5,
            theta_k: 0.1,
            iterations: 200,
            price_tol: 1e-6,
            initial_price: None,
            rng_seed: 1,
            parallel: false,
            output_dir: PathBuf::from("out"),
            pv: PvSource::default(),
            solver: SolverSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|source| HarnessError::ConfigParse {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, path)?;
        // relative PV paths are resolved against the config file
        if let PvSource::Csv { path: pv } = &mut cfg.pv {
            if pv.is_relative() {
                if let Some(dir) = path.parent() {
                    *pv = dir.join(&*pv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.agents == 0 || self.slots == 0 {
            return Err(HarnessError::Config("agents and slots must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(HarnessError::Config("iterations must be positive".into()));
        }
        if let PvSource::Synthetic {
            peak_mean,
            peak_spread,
        } = self.pv
        {
            if !(peak_spread >= 0.0) || !peak_mean.is_finite() || !peak_spread.is_finite() {
                return Err(HarnessError::Config(
                    "pv.peak_mean must be finite and pv.peak_spread non-negative".into(),
                ));
            }
        }
        let invalid = |e: lfsda_core::Error| HarnessError::Config(e.to_string());
        let net = self.network();
        net.validate().map_err(invalid)?;
        self.mechanism()
            .validate(self.agents, self.slots)
            .map_err(invalid)?;
        let grid = net.time_grid().map_err(invalid)?;
        self.agent_params(&vec![0.0; self.slots])
            .validate(grid)
            .map_err(invalid)
    }

    pub fn network(&self) -> NetworkParams<f64> {
        NetworkParams::uniform(
            self.slots,
            self.agents,
            self.gamma,
            self.p_grid_buy,
            self.p_grid_sell,
        )
    }

    pub fn agent_params(&self, pv: &[f64]) -> AgentParams<f64> {
        AgentParams {
            l_plus_min: self.l_plus_min,
            l_minus_max: pv.to_vec(),
            b_plus_max: self.b_plus_max,
            b_minus_max: self.b_minus_max,
            m_plus_max: self.m_plus_max,
            m_minus_max: self.m_minus_max,
            g_minus_max: self.g_minus_max,
            s_max: self.s_max,
            s_init: self.s_init,
            eta: self.eta,
            utility_omega: vec![self.utility_omega; self.slots],
            utility_theta: vec![self.utility_theta; self.slots],
            cost_linear: self.cost_linear,
            cost_quadratic: self.cost_quadratic,
        }
    }

    pub fn fleet(&self, pv: &PvProfileSet) -> Result<Vec<AgentParams<f64>>> {
        pv.check_dims(self.slots, self.agents)?;
        Ok((0..self.agents).map(|i| self.agent_params(pv.agent(i))).collect())
    }

    pub fn solver(&self) -> SolverConfig<f64> {
        SolverConfig {
            max_iters: self.solver.max_iters,
            kkt_tol: self.solver.kkt_tol,
            g_plus_cap: self.solver.g_plus_cap,
            boundary_fraction: self.solver.boundary_fraction,
        }
    }

    pub fn mechanism(&self) -> MechanismConfig<f64> {
        let mut m = MechanismConfig::new(self.agents, self.slots);
        m.max_iterations = self.iterations;
        m.theta_k = self.theta_k;
        m.beta = vec![vec![self.beta; self.slots]; self.agents];
        m.initial_price = self.initial_price.map(|p| PriceProfile::uniform(self.slots, p));
        m.price_tol = self.price_tol;
        m.parallel = self.parallel;
        m.solver = self.solver();
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!((c.agents, c.slots), (20, 24));
        assert_eq!((c.utility_theta, c.utility_omega), (30.0, 10.0));
        assert_eq!(
            (c.s_init, c.s_max, c.b_plus_max, c.b_minus_max, c.eta),
            (0.0, 5.0, 1.0, 1.0, 0.7)
        );
        assert_eq!(
            (c.gamma, c.theta_k, c.m_plus_max, c.m_minus_max),
            (0.8, 0.1, 5.0, 5.0)
        );
        assert_eq!((c.p_grid_buy, c.p_grid_sell, c.beta), (20.0, 0.0, 0.5));
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", Path::new("x.toml")).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig {
            initial_price: Some(7.25),
            pv: PvSource::Csv {
                path: PathBuf::from("data/pv.csv"),
            },
            ..ExperimentConfig::default()
        };
        c.solver.kkt_tol = 3e-8;
        let text = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text, Path::new("x")).unwrap(), c);
        let text = ExperimentConfig::default().to_toml_string().unwrap();
        assert_eq!(
            ExperimentConfig::from_toml_str(&text, Path::new("x")).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml_str("gamma = 1.5", Path::new("x")).is_err());
        assert!(ExperimentConfig::from_toml_str("agents = 0", Path::new("x")).is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_key = 1", Path::new("x")).is_err());
        assert!(ExperimentConfig::from_toml_str("beta = -1.0", Path::new("x")).is_err());
        let err = ExperimentConfig::from_toml_str("eta = 2.0", Path::new("x")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
