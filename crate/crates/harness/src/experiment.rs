//! Runs the market conditions on one fleet and writes the result files.
//!
//! Output layout under the output directory:
//!
//! | file | rows |
//! |---|---|
//! | `iterations.csv` | `k,condition,social_welfare,max_imbalance,price_1..price_T` |
//! | `welfare_ratio.csv` | one per agent |
//! | `consumption.csv` | `condition,agent,slot,l_plus`, final states |
//! | `allocations.csv` | every state field of the final states, with the price |
//! | `summary.json` | flat object of final figures and the parameter echo |
//! | `plots/*.csv` | one series file per figure |
//! | `failures.json` | only when a condition failed |
//!
//! Conditions in `iterations.csv`: `lfsda`, `rtp` (before compensation),
//! `rtp_compensated`, `without_trading`, `optimal`. Agents and slots are
//! numbered from 1 in every file.

use std::fmt::Display;
use std::fs;
use std::path::Path;

use lfsda_core::{
    compensation_cost, run_lfsda, run_rtp, run_without_trading, solve_centralized_optimal, AgentParams,
    AgentState, CentralizedSolution, MechanismRun, NetworkParams,
};
use serde_json::{json, Map, Value};

use crate::config::{ExperimentConfig, PvSource};
use crate::error::{HarnessError, Result};
use crate::pv::{generate_pv_synthetic, load_pv_csv_for, write_all, PvProfileSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Lfsda,
    Rtp,
    WithoutTrading,
    Optimal,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Lfsda,
        Condition::Rtp,
        Condition::WithoutTrading,
        Condition::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Lfsda => "lfsda",
            Condition::Rtp => "rtp",
            Condition::WithoutTrading => "without_trading",
            Condition::Optimal => "optimal",
        }
    }
}

/// Everything computed for one configuration.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub pv: PvProfileSet,
    pub params: Vec<AgentParams<f64>>,
    pub net: NetworkParams<f64>,
    pub lfsda: Option<MechanismRun<f64>>,
    pub rtp: Option<MechanismRun<f64>>,
    pub without_trading: Option<MechanismRun<f64>>,
    pub optimal: Option<CentralizedSolution<f64>>,
    /// `(condition, message)` of every failed condition.
    pub failures: Vec<(String, String)>,
}

/// PV caps named by the configuration.
pub fn resolve_pv(cfg: &ExperimentConfig) -> Result<PvProfileSet> {
    match &cfg.pv {
        PvSource::Synthetic {
            peak_mean,
            peak_spread,
        } => Ok(generate_pv_synthetic(
            cfg.rng_seed,
            cfg.agents,
            cfg.slots,
            *peak_mean,
            *peak_spread,
        )),
        PvSource::Csv { path } => load_pv_csv_for(path, cfg.slots, cfg.agents),
    }
}

/// Runs the requested conditions. Failures are collected rather than
/// returned so the remaining conditions still produce output.
pub fn simulate(
    cfg: &ExperimentConfig,
    pv: PvProfileSet,
    conditions: &[Condition],
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let params = cfg.fleet(&pv)?;
    let net = cfg.network();
    let mech = cfg.mechanism();
    let wants = |c: Condition| conditions.contains(&c);

    let run_mech = |c: Condition| -> Option<std::result::Result<MechanismRun<f64>, lfsda_core::Error>> {
        if !wants(c) {
            return None;
        }
        Some(match c {
            Condition::Lfsda => run_lfsda(&params, &net, &mech),
            Condition::Rtp => run_rtp(&params, &net, &mech),
            _ => run_without_trading(&params, &net, &mech),
        })
    };
    let run_opt = || wants(Condition::Optimal).then(|| solve_centralized_optimal(&params, &net, &mech));

    let (lfsda, rtp, base, opt) = if cfg.parallel {
        let ((lfsda, rtp), (base, opt)) = rayon::join(
            || rayon::join(|| run_mech(Condition::Lfsda), || run_mech(Condition::Rtp)),
            || rayon::join(|| run_mech(Condition::WithoutTrading), run_opt),
        );
        (lfsda, rtp, base, opt)
    } else {
        (
            run_mech(Condition::Lfsda),
            run_mech(Condition::Rtp),
            run_mech(Condition::WithoutTrading),
            run_opt(),
        )
    };

    let mut failures = Vec::new();
    let mut take =
        |c: Condition, r: Option<std::result::Result<MechanismRun<f64>, lfsda_core::Error>>| match r {
            None => None,
            Some(Ok(run)) => {
                if let Some(e) = &run.failure {
                    failures.push((c.name().to_string(), e.to_string()));
                }
                Some(run)
            }
            Some(Err(e)) => {
                failures.push((c.name().to_string(), e.to_string()));
                None
            }
        };
    let lfsda = take(Condition::Lfsda, lfsda);
    let rtp = take(Condition::Rtp, rtp);
    let without_trading = take(Condition::WithoutTrading, base);
    let optimal = match opt {
        None => None,
        Some(Ok(o)) => Some(o),
        Some(Err(e)) => {
            failures.push((Condition::Optimal.name().to_string(), e.to_string()));
            None
        }
    };
    Ok(ExperimentOutcome {
        pv,
        params,
        net,
        lfsda,
        rtp,
        without_trading,
        optimal,
        failures,
    })
}

/// Resolves PV, runs the conditions and writes every output file into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, conditions: &[Condition]) -> Result<ExperimentOutcome> {
    let pv = resolve_pv(cfg)?;
    let outcome = simulate(cfg, pv, conditions)?;
    write_outputs(cfg, &outcome, &cfg.output_dir)?;
    Ok(outcome)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_rows<T: Display>(path: &Path, header: &[String], rows: &[Vec<T>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string()))?;
    }
    finish(w, path)
}

fn price_header(slots: usize) -> impl Iterator<Item = String> {
    (1..=slots).map(|t| format!("price_{t}"))
}

fn imbalance(states: &[AgentState<f64>], gamma: f64, slots: usize) -> Vec<f64> {
    (0..slots)
        .map(|t| states.iter().map(|s| s.slots[t].market_excess(gamma)).sum())
        .collect()
}

/// Final state set, its price profile and per-agent welfare of each
/// condition that produced one.
struct Final<'a> {
    name: &'static str,
    states: &'a [AgentState<f64>],
    prices: &'a [f64],
    agent_welfare: Vec<f64>,
}

fn finals(o: &ExperimentOutcome) -> Vec<Final<'_>> {
    let mut out = Vec::new();
    for (name, run) in [
        ("lfsda", &o.lfsda),
        ("rtp", &o.rtp),
        ("without_trading", &o.without_trading),
    ] {
        if let Some(r) = run.as_ref().and_then(|r| r.last()) {
            let agent_welfare = r
                .agent_welfare_after_compensation
                .clone()
                .unwrap_or_else(|| r.agent_welfare.clone());
            out.push(Final {
                name,
                states: &r.states,
                prices: r.prices.as_slice(),
                agent_welfare,
            });
        }
    }
    if let Some(opt) = &o.optimal {
        out.push(Final {
            name: "optimal",
            states: &opt.states,
            prices: opt.prices.as_slice(),
            agent_welfare: opt.agent_welfare.clone(),
        });
    }
    out
}

pub fn write_outputs(cfg: &ExperimentConfig, o: &ExperimentOutcome, dir: &Path) -> Result<()> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| HarnessError::io(&plots, e))?;
    let slots = cfg.slots;
    let agents = cfg.agents;

    // iterations.csv
    let mut header = vec![
        "k".to_string(),
        "condition".into(),
        "social_welfare".into(),
        "max_imbalance".into(),
    ];
    header.extend(price_header(slots));
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut push = |k: usize, cond: &str, welfare: f64, imb: f64, prices: &[f64]| {
        let mut row = vec![k.to_string(), cond.to_string(), num(welfare), num(imb)];
        row.extend(prices.iter().map(|&p| num(p)));
        rows.push(row);
    };
    if let Some(run) = &o.lfsda {
        for r in &run.records {
            push(
                r.iteration,
                "lfsda",
                r.social_welfare,
                r.max_abs_imbalance(),
                r.prices.as_slice(),
            );
        }
    }
    if let Some(run) = &o.rtp {
        for r in &run.records {
            push(
                r.iteration,
                "rtp",
                r.social_welfare,
                r.max_abs_imbalance(),
                r.prices.as_slice(),
            );
        }
        for r in &run.records {
            let w = r.welfare_after_compensation.unwrap_or(r.social_welfare);
            push(r.iteration, "rtp_compensated", w, 0.0, r.prices.as_slice());
        }
    }
    if let Some(r) = o.without_trading.as_ref().and_then(|r| r.last()) {
        push(
            0,
            "without_trading",
            r.social_welfare,
            r.max_abs_imbalance(),
            r.prices.as_slice(),
        );
    }
    if let Some(opt) = &o.optimal {
        push(
            0,
            "optimal",
            opt.welfare,
            opt.max_imbalance,
            opt.prices.as_slice(),
        );
    }
    write_rows(&dir.join("iterations.csv"), &header, &rows)?;

    let finals = finals(o);

    // welfare_ratio.csv
    let base = finals.iter().find(|f| f.name == "without_trading");
    let compared: Vec<&Final> = finals
        .iter()
        .filter(|f| f.name == "lfsda" || f.name == "rtp")
        .collect();
    let mut header = vec!["agent".to_string(), "without_trading".into()];
    for f in &compared {
        header.push(f.name.to_string());
    }
    for f in &compared {
        header.push(format!("{}_ratio", f.name));
    }
    for f in &compared {
        header.push(format!("{}_difference", f.name));
    }
    let mut rows = Vec::new();
    for i in 0..agents {
        let b = base.map(|b| b.agent_welfare[i]);
        let mut row = vec![(i + 1).to_string(), opt_num(b)];
        row.extend(compared.iter().map(|f| num(f.agent_welfare[i])));
        row.extend(compared.iter().map(|f| match b {
            Some(b) if b.abs() >= 1e-12 => num(f.agent_welfare[i] / b),
            _ => String::new(),
        }));
        row.extend(
            compared
                .iter()
                .map(|f| opt_num(b.map(|b| f.agent_welfare[i] - b))),
        );
        rows.push(row);
    }
    write_rows(&dir.join("welfare_ratio.csv"), &header, &rows)?;

    // consumption.csv and allocations.csv
    let mut consumption = Vec::new();
    let mut allocations = Vec::new();
    for f in &finals {
        for (i, s) in f.states.iter().enumerate() {
            for (t, x) in s.slots.iter().enumerate() {
                consumption.push(vec![
                    f.name.to_string(),
                    (i + 1).to_string(),
                    (t + 1).to_string(),
                    num(x.l_plus),
                ]);
                let mut row = vec![
                    f.name.to_string(),
                    (i + 1).to_string(),
                    (t + 1).to_string(),
                    num(f.prices[t]),
                ];
                row.extend(
                    [
                        x.l_plus, x.l_minus, x.b_plus, x.b_minus, x.m_plus, x.m_minus, x.g_plus, x.g_minus,
                    ]
                    .iter()
                    .map(|&v| num(v)),
                );
                allocations.push(row);
            }
        }
    }
    let h = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_rows(
        &dir.join("consumption.csv"),
        &h(&["condition", "agent", "slot", "l_plus"]),
        &consumption,
    )?;
    write_rows(
        &dir.join("allocations.csv"),
        &h(&[
            "condition",
            "agent",
            "slot",
            "price",
            "l_plus",
            "l_minus",
            "b_plus",
            "b_minus",
            "m_plus",
            "m_minus",
            "g_plus",
            "g_minus",
        ]),
        &allocations,
    )?;

    write_all(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary(cfg, o))?.as_bytes(),
    )?;
    write_plots(cfg, o, &plots)?;

    let failures = dir.join("failures.json");
    if o.failures.is_empty() {
        if failures.exists() {
            fs::remove_file(&failures).map_err(|e| HarnessError::io(&failures, e))?;
        }
    } else {
        let list: Vec<Value> = o
            .failures
            .iter()
            .map(|(c, e)| json!({"condition": c, "error": e}))
            .collect();
        write_all(&failures, serde_json::to_string_pretty(&list)?.as_bytes())?;
    }
    Ok(())
}

/// Flat summary object. Keys: parameter echo (`seed`, `agents`, `slots`,
/// `gamma`, ...), then per condition `<condition>_welfare`,
/// `<condition>_iterations`, `<condition>_converged`,
/// `<condition>_max_imbalance`, plus `rtp_compensated_welfare`,
/// `optimal_dual_value`, `optimal_duality_gap`, `optimal_kkt_residual` and
/// `failed_conditions`.
pub fn summary(cfg: &ExperimentConfig, o: &ExperimentOutcome) -> Value {
    let mut m = Map::new();
    m.insert("seed".into(), json!(cfg.rng_seed));
    m.insert("agents".into(), json!(cfg.agents));
    m.insert("slots".into(), json!(cfg.slots));
    for (k, v) in [
        ("gamma", cfg.gamma),
        ("eta", cfg.eta),
        ("s_init", cfg.s_init),
        ("s_max", cfg.s_max),
        ("b_plus_max", cfg.b_plus_max),
        ("b_minus_max", cfg.b_minus_max),
        ("m_plus_max", cfg.m_plus_max),
        ("m_minus_max", cfg.m_minus_max),
        ("g_minus_max", cfg.g_minus_max),
        ("p_grid_buy", cfg.p_grid_buy),
        ("p_grid_sell", cfg.p_grid_sell),
        ("utility_omega", cfg.utility_omega),
        ("utility_theta", cfg.utility_theta),
        ("beta", cfg.beta),
        ("theta_k", cfg.theta_k),
    ] {
        m.insert(k.into(), json!(v));
    }
    m.insert("iteration_budget".into(), json!(cfg.iterations));
    for (name, run) in [
        ("lfsda", &o.lfsda),
        ("rtp", &o.rtp),
        ("without_trading", &o.without_trading),
    ] {
        if let Some(run) = run {
            if let Some(r) = run.last() {
                m.insert(format!("{name}_welfare"), json!(r.social_welfare));
                m.insert(format!("{name}_max_imbalance"), json!(r.max_abs_imbalance()));
                if let Some(w) = r.welfare_after_compensation {
                    m.insert(format!("{name}_compensated_welfare"), json!(w));
                }
            }
            m.insert(format!("{name}_iterations"), json!(run.records.len()));
            m.insert(format!("{name}_converged"), json!(run.converged));
        }
    }
    if let Some(opt) = &o.optimal {
        m.insert("optimal_welfare".into(), json!(opt.welfare));
        m.insert("optimal_dual_value".into(), json!(opt.dual_value));
        m.insert("optimal_duality_gap".into(), json!(opt.duality_gap));
        m.insert("optimal_kkt_residual".into(), json!(opt.kkt_residual));
        m.insert("optimal_max_imbalance".into(), json!(opt.max_imbalance));
        m.insert("optimal_converged".into(), json!(opt.converged));
        m.insert("optimal_iterations".into(), json!(opt.iterations));
    }
    m.insert(
        "failed_conditions".into(),
        json!(o.failures.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>()),
    );
    Value::Object(m)
}

fn write_plots(cfg: &ExperimentConfig, o: &ExperimentOutcome, plots: &Path) -> Result<()> {
    let slots = cfg.slots;
    let agents = cfg.agents;

    // fig3: PV caps
    let mut header = vec!["slot".to_string()];
    header.extend((1..=agents).map(|i| format!("agent_{i}")));
    let rows: Vec<Vec<String>> = (0..slots)
        .map(|t| {
            let mut r = vec![(t + 1).to_string()];
            r.extend((0..agents).map(|i| num(o.pv.get(t, i))));
            r
        })
        .collect();
    write_rows(&plots.join("fig3_pv.csv"), &header, &rows)?;

    // fig4: social welfare per iteration
    let len = [&o.lfsda, &o.rtp]
        .iter()
        .filter_map(|r| r.as_ref().map(|r| r.records.len()))
        .max()
        .unwrap_or(1)
        .max(1);
    let at = |run: &Option<MechanismRun<f64>>, k: usize, comp: bool| -> String {
        run.as_ref()
            .and_then(|r| r.records.get(k).or(r.records.last()))
            .map(|r| {
                if comp {
                    num(r.welfare_after_compensation.unwrap_or(r.social_welfare))
                } else {
                    num(r.social_welfare)
                }
            })
            .unwrap_or_default()
    };
    let base = o
        .without_trading
        .as_ref()
        .and_then(|r| r.last())
        .map(|r| r.social_welfare);
    let opt = o.optimal.as_ref().map(|s| s.welfare);
    let rows: Vec<Vec<String>> = (0..len)
        .map(|k| {
            vec![
                k.to_string(),
                at(&o.lfsda, k, false),
                at(&o.rtp, k, false),
                at(&o.rtp, k, true),
                opt_num(base),
                opt_num(opt),
            ]
        })
        .collect();
    let h = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_rows(
        &plots.join("fig4_social_welfare.csv"),
        &h(&[
            "k",
            "lfsda",
            "rtp",
            "rtp_compensated",
            "without_trading",
            "optimal",
        ]),
        &rows,
    )?;

    // fig5: converged price profiles
    let last_prices = |run: &Option<MechanismRun<f64>>, t: usize| {
        opt_num(run.as_ref().and_then(|r| r.last()).map(|r| r.prices[t]))
    };
    let rows: Vec<Vec<String>> = (0..slots)
        .map(|t| {
            vec![
                (t + 1).to_string(),
                last_prices(&o.lfsda, t),
                last_prices(&o.rtp, t),
                opt_num(o.optimal.as_ref().map(|s| s.prices[t])),
            ]
        })
        .collect();
    write_rows(
        &plots.join("fig5_prices.csv"),
        &h(&["slot", "lfsda", "rtp", "optimal"]),
        &rows,
    )?;

    // fig6: welfare ratios against the no-trading baseline
    let finals = finals(o);
    let base = finals.iter().find(|f| f.name == "without_trading");
    let compared: Vec<&Final> = finals
        .iter()
        .filter(|f| f.name == "lfsda" || f.name == "rtp")
        .collect();
    let mut header = vec!["agent".to_string()];
    header.extend(compared.iter().map(|f| format!("{}_ratio", f.name)));
    let rows: Vec<Vec<String>> = (0..agents)
        .map(|i| {
            let mut r = vec![(i + 1).to_string()];
            r.extend(compared.iter().map(|f| match base {
                Some(b) if b.agent_welfare[i].abs() >= 1e-12 => num(f.agent_welfare[i] / b.agent_welfare[i]),
                _ => String::new(),
            }));
            r
        })
        .collect();
    write_rows(&plots.join("fig6_welfare_ratio.csv"), &header, &rows)?;

    // fig7: consumption of three representative agents (least, median and
    // most PV)
    let mut order: Vec<usize> = (0..agents).collect();
    let total = |i: usize| o.pv.agent(i).iter().sum::<f64>();
    order.sort_by(|&a, &b| {
        total(a)
            .partial_cmp(&total(b))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut picks = vec![order[0], order[agents / 2], order[agents - 1]];
    picks.dedup();
    let mut header = vec!["slot".to_string()];
    for &i in &picks {
        for f in &finals {
            header.push(format!("agent_{}_{}", i + 1, f.name));
        }
    }
    let rows: Vec<Vec<String>> = (0..slots)
        .map(|t| {
            let mut r = vec![(t + 1).to_string()];
            for &i in &picks {
                for f in &finals {
                    r.push(num(f.states[i].slots[t].l_plus));
                }
            }
            r
        })
        .collect();
    write_rows(&plots.join("fig7_consumption.csv"), &header, &rows)?;
    Ok(())
}

/// Recomputes `sum_i phi_i` and the compensated RTP welfare of a condition
/// from `allocations.csv` rows.
pub fn welfare_from_allocations(
    cfg: &ExperimentConfig,
    pv: &PvProfileSet,
    condition: &str,
    allocations: &Path,
) -> Result<(f64, f64)> {
    let mut reader = csv::Reader::from_path(allocations)?;
    let params = cfg.fleet(pv)?;
    let net = cfg.network();
    let mut states = vec![AgentState::zeros(cfg.slots); cfg.agents];
    for rec in reader.records() {
        let rec = rec?;
        if &rec[0] != condition {
            continue;
        }
        let parse = |j: usize| rec[j].parse::<f64>().unwrap_or(f64::NAN);
        let i = parse(1) as usize - 1;
        let t = parse(2) as usize - 1;
        let s = &mut states[i].slots[t];
        s.l_plus = parse(4);
        s.l_minus = parse(5);
        s.b_plus = parse(6);
        s.b_minus = parse(7);
        s.m_plus = parse(8);
        s.m_minus = parse(9);
        s.g_plus = parse(10);
        s.g_minus = parse(11);
    }
    let phi = lfsda_core::total_individual_utility(&states, &params, &net);
    let xi = imbalance(&states, net.gamma, cfg.slots);
    Ok((phi, phi - compensation_cost(&xi, &net)))
}
