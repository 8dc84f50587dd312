//! Scenario execution: shared replica runs, cached solves, and one executor
//! per comparison kind.
//!
//! Everything here is deterministic for a fixed resolved scenario: replicas
//! derive per-index seeds (so worker count never reorders randomness),
//! parallel reductions aggregate in index order, and artifacts are written
//! with bit-exact float formatting.

use std::fs;
use std::path::Path;

use swapdiff_core::diag::{
    mean_fields, replacement_residual, tagged_variance_fit, tightness_statistic,
};
use swapdiff_core::grid::{ColorField, FieldTrajectory};
use swapdiff_core::io::save_field_trajectory;
use swapdiff_core::pde::{solve_colored_system, solve_heat, solve_perturbed_system};
use swapdiff_core::rate::{dynamic_rate, optimal_controls, perturbation_cost, RateReport};
use swapdiff_core::sim::{run_replicas, RunRecord};
use swapdiff_core::{Error, ModelParams, Result};

use crate::report::{
    generator, write_json_file, write_manifest, ComparisonReport, CsvTable, Metric,
    ScenarioReport, REPORT_SCHEMA_VERSION,
};
use crate::scenario::{ComparisonPlan, Plan};

fn internal(msg: impl Into<String>) -> Error {
    Error::Numerics(msg.into())
}

/// Execute a resolved scenario into `out_dir` and write all artifacts
/// (`scenario.resolved.toml`, per-comparison CSVs, `report.json`).
///
/// # Errors
/// Any core error aborts the run (no partial pass/fail report is written);
/// comparison *failures* are not errors — they show up in the report and its
/// `passed` flags.
pub fn run_scenario(plan: &Plan, out_dir: &Path, threads: usize) -> Result<ScenarioReport> {
    fs::create_dir_all(out_dir)?;
    let (_, fingerprint) = write_manifest(out_dir, &plan.scenario)?;

    let mut warnings: Vec<String> = Vec::new();
    let mut artifacts: Vec<String> = Vec::new();

    // Shared replica runs, executed once and reused by every comparison that
    // reads them; skipped when no comparison does (replacement legs spawn
    // their own runs at other particle counts).
    let base: Option<Vec<RunRecord>> = match (&plan.sim, plan.scenario.replicas) {
        (Some(cfg), replicas) if replicas > 0 && plan.wants_base_runs() => {
            let records = run_replicas(cfg, replicas)?;
            for record in &records {
                for w in &record.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
            }
            Some(records)
        }
        _ => None,
    };
    if let Some(records) = &base {
        if records[0].fields.is_some() {
            let mean = mean_fields(records)?;
            save_field_trajectory(&out_dir.join("mean_fields.csv"), &mean)?;
            artifacts.push("mean_fields.csv".into());
        }
    }

    let mut runner = Runner {
        plan,
        out_dir,
        base,
        colored: None,
    };
    let mut comparisons = Vec::with_capacity(plan.comparisons.len());
    for (index, comparison) in plan.comparisons.iter().enumerate() {
        comparisons.push(runner.execute(index, comparison)?);
    }

    let passed = comparisons.iter().all(|c| c.passed);
    let report = ScenarioReport {
        schema_version: REPORT_SCHEMA_VERSION,
        generator: generator(),
        name: plan.scenario.name.clone(),
        scenario_fingerprint: fingerprint,
        seed: plan.scenario.seed,
        replicas: plan.scenario.replicas,
        threads,
        manifest: plan.scenario.clone(),
        warnings,
        artifacts,
        comparisons,
        passed,
    };
    write_json_file(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

struct Runner<'a> {
    plan: &'a Plan,
    out_dir: &'a Path,
    base: Option<Vec<RunRecord>>,
    /// Cached undriven solve of the `[pde]` section.
    colored: Option<FieldTrajectory>,
}

impl Runner<'_> {
    fn base_records(&self) -> Result<&[RunRecord]> {
        self.base
            .as_deref()
            .ok_or_else(|| internal("comparison ran without its replica runs (resolution bug)"))
    }

    /// Undriven solve of the `[pde]` section, computed once. Frames are a
    /// few kilobytes, so handing out clones is cheaper than fighting the
    /// borrow of the cache.
    fn colored_solution(&mut self) -> Result<FieldTrajectory> {
        if self.colored.is_none() {
            let cfg = self
                .plan
                .pde
                .as_ref()
                .ok_or_else(|| internal("comparison ran without its [pde] solve (resolution bug)"))?;
            let initial = self
                .plan
                .pde_initial
                .as_ref()
                .ok_or_else(|| internal("missing initial data for the [pde] solve"))?;
            self.colored = Some(solve_colored_system(initial, cfg)?);
        }
        Ok(self.colored.clone().expect("just filled"))
    }

    fn execute(&mut self, index: usize, comparison: &ComparisonPlan) -> Result<ComparisonReport> {
        match *comparison {
            ComparisonPlan::SimVsPde {
                l1_tol,
                linf_tol,
                skip_initial_frames,
            } => self.sim_vs_pde(index, l1_tol, linf_tol, skip_initial_frames),
            ComparisonPlan::RateZero {
                rate_tol,
                require_refinement_decrease,
            } => self.rate_zero(index, rate_tol, require_refinement_decrease),
            ComparisonPlan::RateCostMatch {
                rel_tol,
                fixed_point_iters,
            } => self.rate_cost_match(index, rel_tol, fixed_point_iters),
            ComparisonPlan::TaggedVariance { rel_tol } => self.tagged_variance(index, rel_tol),
            ComparisonPlan::ReplacementResidual {
                n_low,
                n_high,
                eps,
                observer,
                target,
                t_from,
                t_to,
                max_residual,
            } => self.replacement(
                index,
                n_low,
                n_high,
                eps,
                observer,
                target,
                t_from,
                t_to,
                max_residual,
            ),
            ComparisonPlan::Tightness { eps, delta, tol } => {
                self.tightness(index, eps, delta, tol)
            }
            ComparisonPlan::PdeClosure { linf_tol } => self.pde_closure(index, linf_tol),
        }
    }

    fn sim_vs_pde(
        &mut self,
        index: usize,
        l1_tol: Option<f64>,
        linf_tol: Option<f64>,
        skip: usize,
    ) -> Result<ComparisonReport> {
        let mean = mean_fields(self.base_records()?)?;
        let pde = &self.colored_solution()?;
        if mean.times().len() != pde.times().len()
            || mean
                .times()
                .iter()
                .zip(pde.times())
                .any(|(a, b)| (a - b).abs() > 1e-9 * b.abs().max(1.0))
        {
            return Err(internal(
                "replica-averaged fields and the solve disagree on frame times",
            ));
        }
        let mut report = ComparisonReport::new(index, "sim_vs_pde");
        let name = format!("cmp_{index}_sim_vs_pde.csv");
        let mut table = CsvTable::create(self.out_dir, &name, "time,color,l1,linf")?;
        let mut max_l1 = 0.0f64;
        let mut max_linf = 0.0f64;
        for (k, &t) in mean.times().iter().enumerate() {
            let l1 = mean.frame(k).l1_distance(pde.frame(k))?;
            let linf = mean.frame(k).linf_distance(pde.frame(k))?;
            for c in 0..mean.colors() {
                table.row(format_args!("{t:.16e},{c}"), &[l1[c], linf[c]])?;
                if k >= skip {
                    max_l1 = max_l1.max(l1[c]);
                    max_linf = max_linf.max(linf[c]);
                }
            }
        }
        report.artifacts.push(table.finish()?);
        if skip > 0 {
            report.notes.push(format!(
                "the first {skip} frame(s) are reported but excluded from the bounds"
            ));
        }
        match l1_tol {
            Some(tol) => report.push(Metric::le("max_l1", max_l1, "density", tol)),
            None => report.push(Metric::info("max_l1", max_l1, "density")),
        }
        match linf_tol {
            Some(tol) => report.push(Metric::le("max_linf", max_linf, "density", tol)),
            None => report.push(Metric::info("max_linf", max_linf, "density")),
        }
        let pde_name = format!("cmp_{index}_pde_frames.csv");
        save_field_trajectory(&self.out_dir.join(&pde_name), pde)?;
        report.artifacts.push(pde_name);
        Ok(report)
    }

    fn write_slices(&self, name: &str, reports: &[(&str, &RateReport)]) -> Result<String> {
        let mut table = CsvTable::create(self.out_dir, name, "level,t,slice_value")?;
        for (level, rr) in reports {
            for s in &rr.slices {
                table.row(format_args!("{level}"), &[s.t, s.value])?;
            }
        }
        table.finish()
    }

    fn rate_zero(
        &mut self,
        index: usize,
        rate_tol: f64,
        require_refinement_decrease: bool,
    ) -> Result<ComparisonReport> {
        let params = self.plan.params.clone();
        let base_rate = dynamic_rate(&self.colored_solution()?, &params)?;
        let refined_rate = if require_refinement_decrease {
            let (cfg, initial) = self.plan.refined_pde()?;
            let traj = solve_colored_system(&initial, &cfg)?;
            Some((cfg, dynamic_rate(&traj, &params)?))
        } else {
            None
        };

        let mut report = ComparisonReport::new(index, "rate_zero");
        report.push(Metric::le("i_dyn", base_rate.i_dyn, "rate", rate_tol));
        if let Some(richardson) = base_rate.i_dyn_refined {
            report.push(Metric::info("i_dyn_richardson", richardson, "rate"));
        }
        let mut slice_sets: Vec<(&str, &RateReport)> = vec![("base", &base_rate)];
        if let Some((cfg, rate)) = &refined_rate {
            report.push(Metric::lt("i_dyn_refined", rate.i_dyn, "rate", base_rate.i_dyn));
            report
                .notes
                .push(format!("refined solve: grid {}, frames {}", cfg.grid, cfg.frames));
            slice_sets.push(("refined", rate));
        }
        let name = format!("cmp_{index}_rate_zero.csv");
        report.artifacts.push(self.write_slices(&name, &slice_sets)?);
        Ok(report)
    }

    fn rate_cost_match(
        &mut self,
        index: usize,
        rel_tol: f64,
        iters: usize,
    ) -> Result<ComparisonReport> {
        let controls = self
            .plan
            .gradient_controls()
            .ok_or_else(|| internal("rate_cost_match ran without [perturbation] (resolution bug)"))?;
        let cfg = self
            .plan
            .pde
            .as_ref()
            .ok_or_else(|| internal("rate_cost_match ran without [pde] (resolution bug)"))?;
        let initial = self
            .plan
            .pde_initial
            .as_ref()
            .ok_or_else(|| internal("missing initial data for the [pde] solve"))?;
        let params = &self.plan.params;

        // The optimal controls realizing the drive depend on the densities
        // they themselves produce; a short fixed-point iteration makes the
        // pair (trajectory, controls) self-consistent.
        let mut traj = solve_colored_system(initial, cfg)?;
        let mut pert = optimal_controls(&traj, &controls, params)?;
        for _ in 0..iters {
            traj = solve_perturbed_system(initial, &pert, cfg)?;
            pert = optimal_controls(&traj, &controls, params)?;
        }
        let cost = perturbation_cost(&traj, &pert, params)?;
        let rate = dynamic_rate(&traj, params)?;
        let rel_gap = (rate.i_dyn - cost).abs() / cost.max(f64::MIN_POSITIVE);

        let mut report = ComparisonReport::new(index, "rate_cost_match");
        report.push(Metric::info("i_dyn", rate.i_dyn, "rate"));
        report.push(Metric::info("girsanov_cost", cost, "rate"));
        report.push(Metric::le("rel_gap", rel_gap, "1", rel_tol));
        report
            .notes
            .push(format!("driven solve after {iters} fixed-point control update(s)"));

        let name = format!("cmp_{index}_rate_cost_match.csv");
        report.artifacts.push(self.write_slices(&name, &[("driven", &rate)])?);
        let frames_name = format!("cmp_{index}_driven_frames.csv");
        save_field_trajectory(&self.out_dir.join(&frames_name), &traj)?;
        report.artifacts.push(frames_name);
        Ok(report)
    }

    fn tagged_variance(&mut self, index: usize, rel_tol: f64) -> Result<ComparisonReport> {
        let fit = tagged_variance_fit(self.base_records()?)?;
        let rel_err = (fit.slope - fit.predicted_slope).abs() / fit.predicted_slope;
        let mut report = ComparisonReport::new(index, "tagged_variance");
        report.push(Metric::info("fitted_slope", fit.slope, "length^2/time"));
        report.push(Metric::info(
            "predicted_slope",
            fit.predicted_slope,
            "length^2/time",
        ));
        report.push(Metric::le("rel_err", rel_err, "1", rel_tol));
        report.notes.push(format!(
            "{} displacement samples per frame, {} late-time frames",
            fit.samples_per_frame,
            fit.points.len()
        ));
        let name = format!("cmp_{index}_tagged_variance.csv");
        let mut table = CsvTable::create(self.out_dir, &name, "t,pooled_variance")?;
        for &(t, v) in &fit.points {
            table.row(format_args!("{t:.16e}"), &[v])?;
        }
        report.artifacts.push(table.finish()?);
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn replacement(
        &mut self,
        index: usize,
        n_low: usize,
        n_high: usize,
        eps: f64,
        observer: usize,
        target: usize,
        t_from: f64,
        t_to: f64,
        max_residual: Option<f64>,
    ) -> Result<ComparisonReport> {
        let replicas = self.plan.scenario.replicas;
        let mut report = ComparisonReport::new(index, "replacement_residual");
        let name = format!("cmp_{index}_replacement_residual.csv");
        let mut table = CsvTable::create(self.out_dir, &name, "n,replica,residual")?;
        let mut means = [0.0f64; 2];
        for (leg, &n) in [n_low, n_high].iter().enumerate() {
            let cfg = self.plan.replacement_config(n, eps, leg as u64 + 1)?;
            let records = run_replicas(&cfg, replicas)?;
            let mut sum = 0.0;
            for (r, record) in records.iter().enumerate() {
                let res = replacement_residual(record, observer, target, eps, t_from, t_to)?;
                table.row(format_args!("{n},{r}"), &[res])?;
                sum += res;
            }
            means[leg] = sum / replicas as f64;
            for w in records.iter().flat_map(|r| &r.warnings) {
                let note = format!("n = {n}: {w}");
                if !report.notes.contains(&note) {
                    report.notes.push(note);
                }
            }
        }
        report.artifacts.push(table.finish()?);
        report.push(Metric::info(
            format!("mean_residual_n{n_low}"),
            means[0],
            "local_time",
        ));
        report.push(Metric::info(
            format!("mean_residual_n{n_high}"),
            means[1],
            "local_time",
        ));
        report.push(Metric::lt(
            "residual_ratio_high_over_low",
            means[1] / means[0],
            "1",
            1.0,
        ));
        if let Some(tol) = max_residual {
            report.push(Metric::le(
                format!("mean_residual_n{n_high}_bound"),
                means[1],
                "local_time",
                tol,
            ));
        }
        Ok(report)
    }

    fn tightness(&mut self, index: usize, eps: f64, delta: f64, tol: f64) -> Result<ComparisonReport> {
        let records = self.base_records()?;
        let mut report = ComparisonReport::new(index, "tightness");
        let name = format!("cmp_{index}_tightness.csv");
        let mut table = CsvTable::create(self.out_dir, &name, "replica,oscillation_fraction")?;
        let mut sum = 0.0;
        for (r, record) in records.iter().enumerate() {
            let frac = tightness_statistic(record, eps, delta)?;
            table.row(format_args!("{r}"), &[frac])?;
            sum += frac;
        }
        report.artifacts.push(table.finish()?);
        let mean = sum / records.len() as f64;
        report.push(Metric::le("mean_oscillation_fraction", mean, "1", tol));
        report.notes.push(format!(
            "fraction of labels oscillating ≥ {eps} within a window ≤ {delta}"
        ));
        Ok(report)
    }

    fn pde_closure(&mut self, index: usize, linf_tol: f64) -> Result<ComparisonReport> {
        let cfg = self
            .plan
            .pde
            .as_ref()
            .ok_or_else(|| internal("pde_closure ran without [pde] (resolution bug)"))?
            .clone();
        let initial = self
            .plan
            .pde_initial
            .as_ref()
            .ok_or_else(|| internal("missing initial data for the [pde] solve"))?;
        let total_initial =
            ColorField::from_values(initial.grid(), vec![initial.total()])?;
        let mut heat_cfg = cfg.clone();
        heat_cfg.params = ModelParams::with_uniform_masses(self.plan.params.lambda(), 1)?;
        let heat = solve_heat(&total_initial, &heat_cfg)?;
        let colored = &self.colored_solution()?;

        let mut report = ComparisonReport::new(index, "pde_closure");
        let name = format!("cmp_{index}_pde_closure.csv");
        let mut table = CsvTable::create(self.out_dir, &name, "time,linf_gap")?;
        let mut worst = 0.0f64;
        for (k, &t) in colored.times().iter().enumerate() {
            let total = colored.frame(k).total();
            let gap = total
                .iter()
                .zip(heat.frame(k).values(0))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            table.row(format_args!("{t:.16e}"), &[gap])?;
            worst = worst.max(gap);
        }
        report.artifacts.push(table.finish()?);
        report.push(Metric::le("max_linf_total_vs_heat", worst, "density", linf_tol));
        Ok(report)
    }
}
