//! PV generation caps: CSV ingestion and a seeded synthetic generator.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{HarnessError, Result};

/// Per-agent, per-slot generation caps `l_max[agent][slot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PvProfileSet {
    caps: Vec<Vec<f64>>,
    slots: usize,
}

impl PvProfileSet {
    /// Builds a set from per-agent rows; rows must share a length and hold
    /// finite non-negative values.
    pub fn from_agents(caps: Vec<Vec<f64>>) -> Result<Self> {
        let slots = caps.first().map_or(0, Vec::len);
        for (i, row) in caps.iter().enumerate() {
            if row.len() != slots {
                return Err(HarnessError::Config(format!(
                    "agent {} has {} slots, expected {slots}",
                    i + 1,
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(HarnessError::Config(format!(
                    "agent {} has invalid generation cap {v}",
                    i + 1
                )));
            }
        }
        Ok(Self { caps, slots })
    }

    pub fn agent_count(&self) -> usize {
        self.caps.len()
    }

    pub fn slot_count(&self) -> usize {
        self.slots
    }

    pub fn agent(&self, i: usize) -> &[f64] {
        &self.caps[i]
    }

    pub fn get(&self, slot: usize, agent: usize) -> f64 {
        self.caps[agent][slot]
    }

    pub fn check_dims(&self, slots: usize, agents: usize) -> Result<()> {
        if self.slots != slots || self.agent_count() != agents {
            return Err(HarnessError::PvShape {
                path: "<pv>".into(),
                reason: format!(
                    "profile set is {} slots x {} agents, configuration needs {slots} x {agents}",
                    self.slots,
                    self.agent_count()
                ),
            });
        }
        Ok(())
    }

    /// Writes the `slot,agent_1,...,agent_N` layout read by [`load_pv_csv`].
    /// Slots are numbered from 1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        let mut header = vec!["slot".to_string()];
        header.extend((1..=self.agent_count()).map(|i| format!("agent_{i}")));
        w.write_record(&header)?;
        for t in 0..self.slots {
            let mut row = vec![(t + 1).to_string()];
            row.extend(self.caps.iter().map(|c| c[t].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| HarnessError::io(path, e))?;
        Ok(())
    }
}

/// Reads a CSV with header `slot,agent_1,...,agent_N` and one row per slot.
pub fn load_pv_csv(path: &Path) -> Result<PvProfileSet> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let shape = |reason: String| HarnessError::PvShape {
        path: path.to_path_buf(),
        reason,
    };
    let header = reader.headers()?.clone();
    if header.len() < 2 || &header[0] != "slot" {
        return Err(shape("header must be `slot,agent_1,...,agent_N`".into()));
    }
    for (j, name) in header.iter().enumerate().skip(1) {
        if name != format!("agent_{j}") {
            return Err(shape(format!(
                "column {} is `{name}`, expected `agent_{j}`",
                j + 1
            )));
        }
    }
    let agents = header.len() - 1;
    let mut caps = vec![Vec::new(); agents];
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 2;
        if record.len() != header.len() {
            return Err(shape(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                header.len()
            )));
        }
        let cell = |column: &str, reason: String| HarnessError::PvCell {
            path: path.to_path_buf(),
            row,
            column: column.to_string(),
            reason,
        };
        record[0]
            .parse::<f64>()
            .map_err(|_| cell("slot", format!("`{}` is not a number", &record[0])))?;
        for j in 1..record.len() {
            let raw = &record[j];
            let v: f64 = raw
                .parse()
                .map_err(|_| cell(&header[j], format!("`{raw}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(cell(
                    &header[j],
                    format!("generation cap {raw} must be finite and non-negative"),
                ));
            }
            caps[j - 1].push(v);
        }
    }
    if caps[0].is_empty() {
        return Err(shape("no data rows".into()));
    }
    let slots = caps[0].len();
    Ok(PvProfileSet { caps, slots })
}

/// Like [`load_pv_csv`], additionally checking the dimensions.
pub fn load_pv_csv_for(path: &Path, slots: usize, agents: usize) -> Result<PvProfileSet> {
    let set = load_pv_csv(path)?;
    set.check_dims(slots, agents).map_err(|e| match e {
        HarnessError::PvShape { reason, .. } => HarnessError::PvShape {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    Ok(set)
}

/// Bell-shaped daylight profiles `a_i exp(-(t - t_peak)^2 / (2 sigma^2))`
/// with amplitudes `a_i` drawn uniformly from
/// `[peak_mean - peak_spread, peak_mean + peak_spread]` (clipped at zero).
/// The peak sits mid-horizon, `sigma = T / 10`, and slots farther than
/// `T / 4` from the peak produce nothing.
pub fn generate_pv_synthetic(
    seed: u64,
    agents: usize,
    slots: usize,
    peak_mean: f64,
    peak_spread: f64,
) -> PvProfileSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_peak = (slots as f64 - 1.0) / 2.0;
    let sigma = (slots as f64 / 10.0).max(0.5);
    let half_day = slots as f64 / 4.0;
    let shape: Vec<f64> = (0..slots)
        .map(|t| {
            let d = t as f64 - t_peak;
            if d.abs() > half_day {
                0.0
            } else {
                (-d * d / (2.0 * sigma * sigma)).exp()
            }
        })
        .collect();
    let caps = (0..agents)
        .map(|_| {
            let a = if peak_spread > 0.0 {
                rng.gen_range(peak_mean - peak_spread..=peak_mean + peak_spread)
            } else {
                peak_mean
            };
            let a = a.max(0.0);
            shape.iter().map(|s| a * s).collect()
        })
        .collect();
    PvProfileSet { caps, slots }
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(
            generate_pv_synthetic(3, 20, 24, 0.8, 0.6),
            generate_pv_synthetic(3, 20, 24, 0.8, 0.6)
        );
        assert_ne!(
            generate_pv_synthetic(3, 20, 24, 0.8, 0.6),
            generate_pv_synthetic(4, 20, 24, 0.8, 0.6)
        );
    }

    #[test]
    fn zero_spread_gives_identical_agents() {
        let pv = generate_pv_synthetic(9, 5, 24, 0.8, 0.0);
        for i in 1..5 {
            assert_eq!(pv.agent(i), pv.agent(0));
        }
    }

    #[test]
    fn nights_are_dark_and_noon_peaks() {
        let pv = generate_pv_synthetic(1, 20, 24, 0.8, 0.6);
        for i in 0..20 {
            let p = pv.agent(i);
            for t in (0..5).chain(19..24) {
                assert_eq!(p[t], 0.0);
            }
            assert!(p[11] > 0.0 && p[11] >= p[8] && p[12] >= p[15]);
            assert!(p[11] <= 1.4 + 1e-12);
        }
    }
}
