//! Per-command parameter extraction and execution. `prepare` does all config
//! validation up front (its errors are config errors); `execute` only runs
//! engines and oracles (its errors are numerical failures).

use crate::config::{
    self, Capacity2Params, CapacitykParams, Document, McValidateParams, RiceCheckParams,
    SecondMomentParams,
};
use crate::records::Record;
use anyhow::{bail, Context, Result};
use excursion::montecarlo::{empirical_capacity, empirical_crossing_intensity};
use excursion::{
    capacity_k_segments_with, capacity_two_segments_with, second_moment_measure,
    CorrelationModel, EstimateWithError, KSegmentProblem, SolverOptions, TwoSegmentProblem,
    Window,
};
use std::f64::consts::PI;
use std::time::Instant;

/// A validated run, ready to execute.
pub enum Prepared {
    Capacity2(Capacity2Params),
    Capacityk(CapacitykParams),
    SecondMoment(SecondMomentParams, Window, Window),
    McValidate(McValidateParams),
    RiceCheck(RiceCheckParams),
}

pub fn prepare(command: &str, doc: &Document) -> Result<Prepared> {
    match command {
        "capacity2" => {
            let p: Capacity2Params = config::command_params(doc)?;
            p.validate()?;
            Ok(Prepared::Capacity2(p))
        }
        "capacityk" => {
            let p: CapacitykParams = config::command_params(doc)?;
            p.validate()?;
            Ok(Prepared::Capacityk(p))
        }
        "second-moment" => {
            let p: SecondMomentParams = config::command_params(doc)?;
            let (b1, b2) = p.validate()?;
            Ok(Prepared::SecondMoment(p, b1, b2))
        }
        "mc-validate" => {
            let p: McValidateParams = config::command_params(doc)?;
            p.validate()?;
            Ok(Prepared::McValidate(p))
        }
        "rice-check" => {
            let p: RiceCheckParams = config::command_params(doc)?;
            p.validate()?;
            Ok(Prepared::RiceCheck(p))
        }
        other => bail!("unknown command {other:?}"),
    }
}

pub fn execute(
    prepared: &Prepared,
    model: &CorrelationModel,
    base_seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<Record>> {
    match prepared {
        Prepared::Capacity2(p) => capacity2(p, model, base_seed, opts),
        Prepared::Capacityk(p) => capacityk(p, model, base_seed, opts),
        Prepared::SecondMoment(p, b1, b2) => second_moment(p, b1, b2, model, base_seed),
        Prepared::McValidate(p) => mc_validate(p, model, base_seed, opts),
        Prepared::RiceCheck(p) => rice_check(p, model, base_seed),
    }
}

fn join(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", parts.join(","))
}

fn record(
    command: &'static str,
    model: &CorrelationModel,
    inputs: String,
    est: &EstimateWithError,
    seed: u64,
) -> Record {
    Record {
        command,
        model: model.descriptor(),
        inputs,
        value: est.value,
        abs_error: est.abs_error,
        method: est.method.clone(),
        oracle_value: None,
        oracle_abs_error: None,
        z_score: None,
        seed,
        version: excursion::VERSION,
    }
}

fn note_time(command: &str, idx: u64, inputs: &str, started: Instant) {
    eprintln!(
        "# {command} record {idx} ({inputs}): {:.3}s",
        started.elapsed().as_secs_f64()
    );
}

fn capacity2(
    p: &Capacity2Params,
    model: &CorrelationModel,
    base_seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    let mut idx = 0u64;
    for &u in &p.u.values("params.u")? {
        for &l1 in &p.l1.values("params.l1")? {
            for &l2 in &p.l2.values("params.l2")? {
                let seed = base_seed.wrapping_add(idx);
                let started = Instant::now();
                let problem = TwoSegmentProblem::new(u, l1, l2, p.phi_tilde, model.clone())?;
                let mut o = *opts;
                o.qmc_seed = seed;
                let est = capacity_two_segments_with(&problem, p.m, p.theta_quad_order, &o)
                    .with_context(|| format!("capacity2 at u={u}, l1={l1}, l2={l2}"))?;
                let inputs = format!(
                    "u={u};l1={l1};l2={l2};phi_tilde={};m={};theta_quad_order={}",
                    p.phi_tilde, p.m, p.theta_quad_order
                );
                note_time("capacity2", idx, &inputs, started);
                records.push(record("capacity2", model, inputs, &est, seed));
                idx += 1;
            }
        }
    }
    Ok(records)
}

fn capacityk(
    p: &CapacitykParams,
    model: &CorrelationModel,
    base_seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (idx, &u) in p.u.values("params.u")?.iter().enumerate() {
        let idx = idx as u64;
        let seed = base_seed.wrapping_add(idx);
        let started = Instant::now();
        let problem =
            KSegmentProblem::new(u, p.angles.clone(), p.lengths.clone(), model.clone())?;
        let mut o = *opts;
        o.qmc_seed = seed;
        let est = capacity_k_segments_with(&problem, p.n, p.t_quad_order, &o)
            .with_context(|| format!("capacityk at u={u}"))?;
        let inputs = format!(
            "u={u};angles={};lengths={};n={};t_quad_order={}",
            join(&p.angles),
            join(&p.lengths),
            p.n,
            p.t_quad_order
        );
        note_time("capacityk", idx, &inputs, started);
        records.push(record("capacityk", model, inputs, &est, seed));
    }
    Ok(records)
}

fn second_moment(
    p: &SecondMomentParams,
    b1: &Window,
    b2: &Window,
    model: &CorrelationModel,
    base_seed: u64,
) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (idx, &u) in p.u.values("params.u")?.iter().enumerate() {
        let idx = idx as u64;
        let seed = base_seed.wrapping_add(idx);
        let started = Instant::now();
        let res = second_moment_measure(model, u, b1, b2, p.pairs, seed, p.s_order, p.t_order)
            .with_context(|| format!("second-moment at u={u}"))?;
        let inputs = format!(
            "u={u};window1={};window2={};pairs={};s_order={};t_order={}",
            p.window1.echo(),
            p.window2.echo(),
            p.pairs,
            p.s_order,
            p.t_order
        );
        eprintln!(
            "# second-moment record {idx}: {} pairs, {} integrand evaluations",
            res.pair_count, res.eval_count
        );
        note_time("second-moment", idx, &inputs, started);
        records.push(record("second-moment", model, inputs, &res.mu2, seed));
    }
    Ok(records)
}

/// Difference in units of the reference's standard error; the reference's
/// `abs_error` carries three standard errors by the oracle convention.
fn z_score(value: f64, reference: &EstimateWithError) -> Result<f64> {
    let se = reference.abs_error / 3.0;
    if se <= 0.0 {
        bail!(
            "reference estimate {} reports zero standard error; raise n_samples",
            reference.value
        );
    }
    Ok((value - reference.value) / se)
}

fn mc_validate(
    p: &McValidateParams,
    model: &CorrelationModel,
    base_seed: u64,
    opts: &SolverOptions,
) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (idx, &u) in p.u.values("params.u")?.iter().enumerate() {
        let idx = idx as u64;
        let seed = base_seed.wrapping_add(idx);
        let started = Instant::now();
        let mut o = *opts;
        o.qmc_seed = seed;
        let (engine, oracle, engine_echo) = match p.engine.as_str() {
            "capacity2" => {
                let problem = TwoSegmentProblem::new(u, p.l1, p.l2, p.phi_tilde, model.clone())?;
                let engine = capacity_two_segments_with(&problem, p.m, p.theta_quad_order, &o)
                    .with_context(|| format!("capacity2 at u={u}"))?;
                let oracle = empirical_capacity(&problem, p.step, p.n_samples, seed)
                    .with_context(|| format!("capacity oracle at u={u}"))?;
                let echo = format!(
                    "engine=capacity2;u={u};l1={};l2={};phi_tilde={};m={};theta_quad_order={}",
                    p.l1, p.l2, p.phi_tilde, p.m, p.theta_quad_order
                );
                (engine, oracle, echo)
            }
            "capacityk" => {
                let problem =
                    KSegmentProblem::new(u, p.angles.clone(), p.lengths.clone(), model.clone())?;
                let engine = capacity_k_segments_with(&problem, p.n, p.t_quad_order, &o)
                    .with_context(|| format!("capacityk at u={u}"))?;
                let oracle = empirical_capacity(&problem, p.step, p.n_samples, seed)
                    .with_context(|| format!("capacity oracle at u={u}"))?;
                let echo = format!(
                    "engine=capacityk;u={u};angles={};lengths={};n={};t_quad_order={}",
                    join(&p.angles),
                    join(&p.lengths),
                    p.n,
                    p.t_quad_order
                );
                (engine, oracle, echo)
            }
            other => bail!("unknown engine {other:?}"),
        };
        let z = z_score(engine.value, &oracle)?;
        let inputs = format!("{engine_echo};step={};n_samples={}", p.step, p.n_samples);
        note_time("mc-validate", idx, &inputs, started);
        let mut rec = record("mc-validate", model, inputs, &engine, seed);
        rec.method = format!("{} vs {}", engine.method, oracle.method);
        rec.oracle_value = Some(oracle.value);
        rec.oracle_abs_error = Some(oracle.abs_error);
        rec.z_score = Some(z);
        records.push(rec);
    }
    Ok(records)
}

fn rice_check(
    p: &RiceCheckParams,
    model: &CorrelationModel,
    base_seed: u64,
) -> Result<Vec<Record>> {
    // Chords run along the first axis, so the matching closed-form intensity
    // uses that direction's derivative variance.
    let lambda = model.spectral_moment_matrix()[(0, 0)];
    let mut records = Vec::new();
    for (idx, &u) in p.u.values("params.u")?.iter().enumerate() {
        let idx = idx as u64;
        let seed = base_seed.wrapping_add(idx);
        let started = Instant::now();
        let emp = empirical_crossing_intensity(model, u, p.length, p.step, p.n_samples, seed)
            .with_context(|| format!("crossing intensity at u={u}"))?;
        let rice = lambda.sqrt() * (-u * u / 2.0).exp() / PI;
        // The error bars belong to the measurement, so the z-score is the
        // empirical value's deviation from the exact intensity.
        let z = -z_score(rice, &emp)?;
        let inputs = format!(
            "u={u};length={};step={};n_samples={}",
            p.length, p.step, p.n_samples
        );
        note_time("rice-check", idx, &inputs, started);
        let mut rec = record("rice-check", model, inputs, &emp, seed);
        rec.method = format!("{} vs rice intensity", emp.method);
        rec.oracle_value = Some(rice);
        rec.oracle_abs_error = Some(0.0);
        rec.z_score = Some(z);
        records.push(rec);
    }
    Ok(records)
}
