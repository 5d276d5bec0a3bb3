//! Experiment runner behind the `rapo` binary.
//!
//! Subcommands:
//!
//! * `verify-optima` compares exact gradient ascent with the closed-form and
//!   root-found optima on random instances and writes `verify_report.json`.
//! * `train` runs the sampled loop for the configured objective (and the
//!   optional baseline) and writes per-label trace, policy and eval files.
//! * `eval` evaluates the reference, or a policies file from `train`.
//! * `sweep` trains every cell of the hyperparameter grid and writes
//!   `sweep.csv`.
//!
//! Every CSV starts with `# `-prefixed lines carrying the resolved config and
//! seed; every JSON output has a `config` field.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Experiment, ExperimentConfig, SeedPurpose, VerifySpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_tasks, hard_subset, summarize, write_eval_csv, EvalSummary, TaskEval};
use crate::optima::{lemma1_optimum, lemma2_optimum, prop1_optimum};
use crate::policy::CategoricalPolicy;
use crate::trainer::{
    gradient_ascent, rapo_train, AscentSettings, ObjectiveSpec, ReferenceSpec, TraceRecord,
};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_VERIFICATION: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "rapo",
    version,
    about = "Forward-KL policy optimization experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Top-level seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check gradient ascent against the closed-form and root-found optima
    VerifyOptima,
    /// Train the configured objective (and baseline) and evaluate pass@k
    Train,
    /// Evaluate the reference, or trained policies, with pass@k
    Eval {
        /// A `*_policies.json` file written by `train`.
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    /// Train every cell of the hyperparameter grid
    Sweep,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_RUNTIME,
    }
}

/// Loads and resolves the config with command-line overrides applied.
pub fn load_experiment(common: &CommonArgs) -> Result<Experiment> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_json_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.resolve()
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<()> {
    let exp = load_experiment(&cli.common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cli.common.jobs)))?;
    pool.install(|| {
        std::fs::create_dir_all(&exp.config.output_dir)?;
        match &cli.command {
            Command::VerifyOptima => {
                let report = cmd_verify_optima(&exp)?;
                write_json(&exp.config.output_dir.join("verify_report.json"), &report)?;
                for case in &report.cases {
                    println!(
                        "{:<7} #{:<3} n={:<4} linf={:.3e} tol={:.0e} {}",
                        case.check,
                        case.instance,
                        case.outcomes,
                        case.linf,
                        case.tolerance,
                        if case.passed { "pass" } else { "FAIL" }
                    );
                }
                if report.passed {
                    Ok(())
                } else {
                    let failed = report.cases.iter().filter(|c| !c.passed).count();
                    Err(Error::Verification(format!(
                        "{failed} of {} cases out of tolerance",
                        report.cases.len()
                    )))
                }
            }
            Command::Train => cmd_train(&exp).map(|_| ()),
            Command::Eval { policies } => cmd_eval(&exp, policies.as_deref()).map(|_| ()),
            Command::Sweep => cmd_sweep(&exp).map(|_| ()),
        }
    })
}

fn header_lines(config: &ExperimentConfig, label: &str) -> Vec<String> {
    vec![
        format!("config: {}", config.to_json_line()),
        format!("seed: {}", config.seed),
        format!("label: {label}"),
    ]
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyCase {
    pub check: String,
    pub instance: usize,
    pub outcomes: usize,
    /// L∞ distance between the ascent result and the optimum.
    pub linf: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: ExperimentConfig,
    pub cases: Vec<VerifyCase>,
    pub passed: bool,
}

fn linf(a: &CategoricalPolicy, b: &CategoricalPolicy) -> f64 {
    a.probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random reference (weights in `[0.05, 1)`, listed outcomes zeroed) and
/// rewards in `[0, 1)`.
fn random_instance<R: Rng>(
    rng: &mut R,
    outcomes: usize,
    zero: &[usize],
) -> Result<(CategoricalPolicy, Vec<f64>)> {
    let mut weights: Vec<f64> = (0..outcomes).map(|_| rng.gen_range(0.05..1.0)).collect();
    for &i in zero {
        weights[i] = 0.0;
    }
    let rewards = (0..outcomes).map(|_| rng.gen::<f64>()).collect();
    Ok((CategoricalPolicy::from_weights(weights)?, rewards))
}

#[derive(Debug, Clone, Copy)]
enum Check {
    Lemma1,
    Lemma2,
    Prop1,
}

impl Check {
    fn name(self) -> &'static str {
        match self {
            Check::Lemma1 => "lemma1",
            Check::Lemma2 => "lemma2",
            Check::Prop1 => "prop1",
        }
    }
}

fn verify_case(spec: &VerifySpec, check: Check, instance: usize, seed: u64) -> Result<VerifyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((check as u64) << 32) + instance as u64);
    let (alpha, beta) = (spec.alpha, spec.beta);
    let (reference, rewards, objective, want, tolerance) = match check {
        Check::Lemma1 | Check::Lemma2 => {
            let n = rng.gen_range(spec.lemma_outcomes.0..=spec.lemma_outcomes.1);
            // about a fifth of the outcomes lie off the reference support
            let zero: Vec<usize> = (1..n).filter(|_| rng.gen_bool(0.2)).collect();
            let (q, r) = random_instance(&mut rng, n, &zero)?;
            let (objective, want) = if matches!(check, Check::Lemma1) {
                (
                    ObjectiveSpec::reverse(alpha, 0.0),
                    lemma1_optimum(&q, &r, alpha)?,
                )
            } else {
                (
                    ObjectiveSpec::reverse(alpha, beta),
                    lemma2_optimum(&q, &r, alpha, beta)?,
                )
            };
            (q, r, objective, want, spec.lemma_tolerance)
        }
        Check::Prop1 => {
            let (q, r) = random_instance(&mut rng, spec.forward_outcomes, &spec.forward_zero)?;
            let want = prop1_optimum(&q, &r, alpha, beta)?.policy;
            (
                q,
                r,
                ObjectiveSpec::forward(alpha, beta),
                want,
                spec.forward_tolerance,
            )
        }
    };
    let scale = if spec.natural_gradient { 0.5 } else { 1.0 };
    let settings = AscentSettings {
        learning_rate: scale / (objective.alpha + objective.beta),
        max_steps: spec.max_steps,
        natural_gradient: spec.natural_gradient,
        ..AscentSettings::default()
    };
    let init = vec![0.0; reference.len()];
    let (got, _) = gradient_ascent(&init, &reference, &rewards, &objective, &settings)?;
    let err = linf(&got, &want);
    Ok(VerifyCase {
        check: check.name().into(),
        instance,
        outcomes: reference.len(),
        linf: err,
        tolerance,
        passed: err <= tolerance,
    })
}

/// Runs every verification case. Failing cases are reported, not raised.
pub fn cmd_verify_optima(exp: &Experiment) -> Result<VerifyReport> {
    let spec = &exp.config.verify;
    let seed = derive_seed(exp.config.seed, SeedPurpose::Verify);
    let jobs: Vec<(Check, usize)> = [Check::Lemma1, Check::Lemma2, Check::Prop1]
        .into_iter()
        .flat_map(|c| (0..spec.instances).map(move |i| (c, i)))
        .collect();
    let cases = jobs
        .par_iter()
        .map(|&(check, i)| verify_case(spec, check, i, seed))
        .collect::<Result<Vec<_>>>()?;
    let passed = cases.iter().all(|c| c.passed);
    Ok(VerifyReport {
        config: exp.config.clone(),
        cases,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPolicy {
    pub task_id: String,
    pub probs: CategoricalPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoliciesFile {
    pub config: ExperimentConfig,
    pub label: String,
    pub policies: Vec<TaskPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub config: ExperimentConfig,
    pub label: String,
    pub summary: EvalSummary,
}

/// Final metrics of one trained objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub label: String,
    pub last: Option<TraceRecord>,
    pub policies: Vec<CategoricalPolicy>,
    pub evals: Vec<TaskEval>,
    pub summary: EvalSummary,
}

fn hard_indices(exp: &Experiment) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(exp.config.seed, SeedPurpose::Hard));
    hard_subset(
        &exp.taskset,
        &exp.reference,
        exp.config.eval.hard_n,
        exp.config.eval.threshold,
        &mut rng,
    )
}

fn evaluate(
    exp: &Experiment,
    policies: &[CategoricalPolicy],
    hard: &[usize],
) -> Result<(Vec<TaskEval>, EvalSummary)> {
    let seed = derive_seed(exp.config.seed, SeedPurpose::Eval);
    let evals = evaluate_tasks(policies, &exp.taskset, &exp.config.eval, seed)?;
    let summary = summarize(&evals, hard, exp.config.eval.n);
    Ok((evals, summary))
}

fn write_outputs(
    exp: &Experiment,
    label: &str,
    policies: Option<&[CategoricalPolicy]>,
    evals: &[TaskEval],
    summary: &EvalSummary,
) -> Result<()> {
    let dir = &exp.config.output_dir;
    let headers = header_lines(&exp.config, label);
    if let Some(policies) = policies {
        let file = PoliciesFile {
            config: exp.config.clone(),
            label: label.into(),
            policies: exp
                .taskset
                .tasks()
                .iter()
                .zip(policies)
                .map(|(t, p)| TaskPolicy {
                    task_id: t.id().into(),
                    probs: p.clone(),
                })
                .collect(),
        };
        write_json(&dir.join(format!("{label}_policies.json")), &file)?;
    }
    write_eval_csv(
        create(&dir.join(format!("{label}_eval.csv")))?,
        &headers,
        evals,
    )?;
    let file = SummaryFile {
        config: exp.config.clone(),
        label: label.into(),
        summary: summary.clone(),
    };
    write_json(&dir.join(format!("{label}_summary.json")), &file)
}

/// Trains the objective (label `rapo`) and the baseline (label
/// `baseline`), writing `<label>_trace.csv`, `<label>_policies.json`,
/// `<label>_eval.csv` and `<label>_summary.json`. An aborted run still
/// writes its partial trace.
pub fn cmd_train(exp: &Experiment) -> Result<Vec<TrainRun>> {
    let hard = hard_indices(exp)?;
    let mut runs = Vec::new();
    let objectives = std::iter::once(("rapo", &exp.config.objective))
        .chain(exp.config.baseline.as_ref().map(|b| ("baseline", b)));
    for (label, objective) in objectives {
        let trace_path = exp.config.output_dir.join(format!("{label}_trace.csv"));
        let headers = header_lines(&exp.config, label);
        let outcome = match rapo_train(&exp.reference, &exp.taskset, &exp.config.train, objective) {
            Ok(outcome) => outcome,
            Err(Error::Aborted { reason, trace }) => {
                trace.write_csv(create(&trace_path)?, &headers)?;
                return Err(Error::Aborted { reason, trace });
            }
            Err(e) => return Err(e),
        };
        outcome.trace.write_csv(create(&trace_path)?, &headers)?;
        let (evals, summary) = evaluate(exp, &outcome.policies, &hard)?;
        write_outputs(exp, label, Some(&outcome.policies), &evals, &summary)?;
        runs.push(TrainRun {
            label: label.into(),
            last: outcome.trace.last().copied(),
            policies: outcome.policies,
            evals,
            summary,
        });
    }
    Ok(runs)
}

/// Evaluates the reference, or the policies in `policies_path`, writing
/// `eval_eval.csv` and `eval_summary.json`.
pub fn cmd_eval(exp: &Experiment, policies_path: Option<&Path>) -> Result<EvalSummary> {
    let policies = match policies_path {
        None => vec![exp.reference.clone(); exp.taskset.len()],
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let file: PoliciesFile = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let ids: Vec<&str> = file.policies.iter().map(|p| p.task_id.as_str()).collect();
            let want: Vec<&str> = exp.taskset.tasks().iter().map(|t| t.id()).collect();
            if ids != want {
                return Err(Error::Config(format!(
                    "{} holds policies for tasks {ids:?}, config has {want:?}",
                    path.display()
                )));
            }
            file.policies.into_iter().map(|p| p.probs).collect()
        }
    };
    let hard = hard_indices(exp)?;
    let (evals, summary) = evaluate(exp, &policies, &hard)?;
    write_outputs(exp, "eval", None, &evals, &summary)?;
    Ok(summary)
}

/// One cell of a sweep and its final metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub alpha: f64,
    pub beta: f64,
    pub phi: String,
    pub clip_eps: f64,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
    pub expected_reward: f64,
    pub forward_kl: f64,
    pub reverse_kl: f64,
    pub entropy: f64,
    pub objective: f64,
    /// Mean pass@k at the largest budget over the Full subset.
    pub pass_at_max_k: f64,
    /// The same over the Hard subset; empty when it has no tasks.
    pub pass_at_max_k_hard: Option<f64>,
}

fn grid_cells(exp: &Experiment) -> Vec<(ObjectiveSpec, f64)> {
    let base = exp.config.objective;
    let grid = &exp.config.sweep;
    let or_base = |axis: &[f64], value: f64| {
        if axis.is_empty() {
            vec![value]
        } else {
            axis.to_vec()
        }
    };
    let phis: Vec<ReferenceSpec> = if grid.phi.is_empty() {
        vec![base.reference]
    } else {
        grid.phi
            .iter()
            .map(|&phi| ReferenceSpec::Reweighted { phi })
            .collect()
    };
    let mut cells = Vec::new();
    for alpha in or_base(&grid.alpha, base.alpha) {
        for beta in or_base(&grid.beta, base.beta) {
            for &reference in &phis {
                for clip in or_base(&grid.clip_eps, exp.config.train.clip_eps) {
                    let objective = ObjectiveSpec {
                        alpha,
                        beta,
                        reference,
                        ..base
                    };
                    cells.push((objective, clip));
                }
            }
        }
    }
    cells
}

fn reference_label(reference: &ReferenceSpec) -> String {
    match reference {
        ReferenceSpec::Raw => "raw".into(),
        ReferenceSpec::Reweighted { phi } => phi.label(),
    }
}

fn sweep_cell(
    exp: &Experiment,
    hard: &[usize],
    cell: usize,
    objective: ObjectiveSpec,
    clip_eps: f64,
) -> SweepRow {
    let mut row = SweepRow {
        cell,
        alpha: objective.alpha,
        beta: objective.beta,
        phi: reference_label(&objective.reference),
        clip_eps,
        status: "ok".into(),
        expected_reward: f64::NAN,
        forward_kl: f64::NAN,
        reverse_kl: f64::NAN,
        entropy: f64::NAN,
        objective: f64::NAN,
        pass_at_max_k: f64::NAN,
        pass_at_max_k_hard: None,
    };
    let train = crate::trainer::TrainConfig {
        clip_eps,
        ..exp.config.train.clone()
    };
    let result = rapo_train(&exp.reference, &exp.taskset, &train, &objective).and_then(|outcome| {
        Ok((
            outcome.trace.last().copied(),
            evaluate(exp, &outcome.policies, hard)?,
        ))
    });
    match result {
        Ok((last, (_, summary))) => {
            if let Some(last) = last {
                row.expected_reward = last.expected_reward;
                row.forward_kl = last.forward_kl;
                row.reverse_kl = last.reverse_kl;
                row.entropy = last.entropy;
                row.objective = last.objective;
            }
            if let Some(top) = summary.rows.last() {
                row.pass_at_max_k = top.full;
                row.pass_at_max_k_hard = top.hard;
            }
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

/// Trains every grid cell in the worker pool and writes `sweep.csv` in
/// cell order. A failing cell is recorded in its row's `status`.
pub fn cmd_sweep(exp: &Experiment) -> Result<Vec<SweepRow>> {
    let hard = hard_indices(exp)?;
    let cells = grid_cells(exp);
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, &(objective, clip))| sweep_cell(exp, &hard, i, objective, clip))
        .collect();

    let mut out = create(&exp.config.output_dir.join("sweep.csv"))?;
    for line in header_lines(&exp.config, "sweep") {
        writeln!(out, "# {line}")?;
    }
    let mut writer = csv::Writer::from_writer(out);
    for row in &rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_experiment(dir: &Path) -> Experiment {
        let text = format!(
            r#"{{
                "output_dir": {:?},
                "train": {{"refresh_rounds": 2, "batches_per_refresh": 3, "batch_size": 4}},
                "eval": {{"n": 64, "hard_n": 64}},
                "sweep": {{"beta": [0.01, 0.1]}}
            }}"#,
            dir
        );
        ExperimentConfig::from_json_str(&text)
            .unwrap()
            .resolve()
            .unwrap()
    }

    #[test]
    fn grid_expands_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = small_experiment(dir.path());
        exp.config.sweep.alpha = vec![0.1, 0.2];
        exp.config.sweep.clip_eps = vec![0.1, 0.3];
        let cells = grid_cells(&exp);
        assert_eq!(cells.len(), 8);
        assert_eq!(
            (cells[0].0.alpha, cells[0].0.beta, cells[0].1),
            (0.1, 0.01, 0.1)
        );
        assert_eq!(
            (cells[1].0.alpha, cells[1].0.beta, cells[1].1),
            (0.1, 0.01, 0.3)
        );
        assert_eq!(
            (cells[7].0.alpha, cells[7].0.beta, cells[7].1),
            (0.2, 0.1, 0.3)
        );
    }

    #[test]
    fn sweep_records_failing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = small_experiment(dir.path());
        exp.config.sweep.beta = vec![0.01, -1.0];
        let rows = cmd_sweep(&exp).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("error"));
        let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 3);
    }

    #[test]
    fn train_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = small_experiment(dir.path());
        exp.config.baseline = Some(ObjectiveSpec::reverse(0.001, 0.01));
        let runs = cmd_train(&exp).unwrap();
        assert_eq!(runs.len(), 2);
        for label in ["rapo", "baseline"] {
            for suffix in ["trace.csv", "policies.json", "eval.csv", "summary.json"] {
                let path = dir.path().join(format!("{label}_{suffix}"));
                let text = std::fs::read_to_string(&path).unwrap();
                assert!(
                    text.contains("\"seed\"") || text.starts_with("# config: "),
                    "{path:?}"
                );
            }
        }
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&Error::Verification("x".into())),
            exit_code(&Error::InvalidArgument("x".into())),
        ];
        assert_eq!(codes, [EXIT_CONFIG, EXIT_VERIFICATION, EXIT_RUNTIME]);
    }
}
