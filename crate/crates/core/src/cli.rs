//! Command-line runner: campaigns, chains, demos and gap experiments with seeded,
//! reproducible JSON or CSV reports.
//!
//! Exit status: 0 when every asserted invariant holds, 1 when one fails, 2 for
//! malformed configuration or input, 3 when a table would exceed the budget.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibration::{apply_calibrator, apply_e_to_p, is_calibrator, Calibrator};
use crate::conformal::{
    e_table, p_table, predict, prediction_set, ConstantScore, CustomScore, MinorityLabelScore,
    NearestNeighbourScore, NonconformityMeasure, PVariant,
};
use crate::error::{LabError, Result};
use crate::gaps::{binomial_gap, exchangeability_flatness, limitation_check, mc_coverage, permutation_gap};
use crate::instances::{instance_rng, random_in_class};
use crate::oracle::{check_class, check_e_exchangeable, check_p_exchangeable, check_train_invariant, ClassLabel, Tolerances};
use crate::space::{Distribution, ObservationSpace, DEFAULT_BUDGET};
use crate::table::FnTable;
use crate::universality::{
    corollary_kolmogorov_chain, decompose, full_p_chain, kolmogorov_tightness, train_invariant_p_chain,
    verify_decomposition,
};

#[derive(Debug, Clone, Parser, Serialize)]
#[command(name = "conflab", version, about = "Finite-space laboratory for conformal prediction, e-values and p-values")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GlobalArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub tol_exch: f64,
    #[arg(long, global = true, default_value_t = 1e-6)]
    pub tol_iid: f64,
    /// Largest dense table (entries) the run may allocate.
    #[arg(long, global = true, default_value_t = DEFAULT_BUDGET)]
    pub budget: u64,
    /// Report destination (stdout when absent); for `calibrate` with `--in`, the output table.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Shape {
    #[arg(long, default_value = "1x2", value_parser = parse_space)]
    pub space: ObservationSpace,
    /// Training length; tables cover sequences of length n + 1.
    #[arg(long, default_value_t = 2)]
    pub n: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Source {
    /// Table in JSON form.
    #[arg(long, conflicts_with = "random")]
    pub input: Option<PathBuf>,
    /// Number of seeded random instances.
    #[arg(long)]
    pub random: Option<usize>,
}

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Run a class oracle on a table or on random members of the class.
    Verify {
        #[arg(long, value_parser = parse_class)]
        class: ClassLabel,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        shape: Shape,
    },
    /// Split IID e-variables into exchangeability and invariant factors.
    Decompose {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        shape: Shape,
    },
    /// Build and verify reduction certificates.
    Chain {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        shape: Shape,
        #[arg(long, default_value_t = 0.5)]
        delta: f64,
        #[arg(long, value_enum, default_value_t = ChainKind::Full)]
        mode: ChainKind,
        /// Alias for the global `--out`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Check a calibrator, or apply it to a table.
    Calibrate {
        #[arg(long, value_enum)]
        kind: CalibratorKind,
        /// delta for `power`, kappa for `kappa`.
        #[arg(long)]
        param: Option<f64>,
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Conformal prediction on a random training set, with validity checks.
    ConformalDemo {
        #[arg(long, value_enum, default_value_t = ScoreKind::Binary)]
        score: ScoreKind,
        /// Entries for `--score custom`.
        #[arg(long)]
        score_file: Option<PathBuf>,
        #[command(flatten)]
        shape: Shape,
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
    },
    /// Exact IID-versus-exchangeability gap experiments.
    Gaps {
        #[arg(long, value_enum)]
        experiment: Experiment,
        #[arg(long = "N", default_value_t = 3)]
        big_n: usize,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Table for `flatness` (default: the binary conformal e-table).
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        shape: Shape,
    },
    /// Monte Carlo coverage of conformal prediction sets.
    Coverage {
        #[arg(long, default_value_t = 0.2)]
        epsilon: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value = "0.3,0.7")]
        q: String,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value = "1x2", value_parser = parse_space)]
        space: ObservationSpace,
        #[arg(long, value_enum, default_value_t = ScoreKind::Binary)]
        score: ScoreKind,
        #[arg(long, value_enum, default_value_t = Variant::Both)]
        variant: Variant,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Full,
    Traininv,
    Kolmogorov,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    Power,
    Kappa,
    Shafer,
    E2p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Binary,
    Knn,
    Custom,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Permutation,
    Binomial,
    Flatness,
    Limitation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Smoothed,
    Deterministic,
    Both,
}

fn parse_space(s: &str) -> std::result::Result<ObservationSpace, String> {
    ObservationSpace::parse(s).map_err(|e| e.to_string())
}

fn parse_class(s: &str) -> std::result::Result<ClassLabel, String> {
    s.parse::<ClassLabel>().map_err(|e| e.to_string())
}

/// Output of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: Value,
    /// One entry per instance, in instance order; each carries an `id`.
    pub results: Vec<Value>,
    pub ok: bool,
    pub wall_time_s: f64,
    pub version: String,
}

pub fn load_table(path: impl AsRef<Path>) -> Result<FnTable> {
    FnTable::from_json(&fs::read_to_string(path)?)
}

pub fn save_table(table: &FnTable, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, table.to_json()?)?;
    Ok(())
}

pub fn save_report(report: &Report, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write_report(report, format, &mut file)
}

pub fn write_report(report: &Report, format: Format, w: &mut dyn Write) -> Result<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut *w, report)?;
            writeln!(w)?;
        }
        Format::Csv => write_csv(&report.results, w)?,
    }
    Ok(())
}

/// One row per result; nested values are written as JSON text.
fn write_csv(results: &[Value], w: &mut dyn Write) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    for r in results {
        if let Value::Object(map) = r {
            for k in map.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    let mut out = csv::Writer::from_writer(w);
    out.write_record(&columns).map_err(csv_error)?;
    for r in results {
        let row = columns.iter().map(|c| match r.get(c) {
            None | Some(Value::Null) => String::new(),
            Some(Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
        });
        out.write_record(row).map_err(csv_error)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> LabError {
    LabError::Malformed(format!("csv: {e}"))
}

pub fn exit_code(err: &LabError) -> i32 {
    match err {
        LabError::BudgetExceeded { .. } => 3,
        _ => 2,
    }
}

fn with_id(id: usize, ok: bool, v: impl Serialize) -> Result<Value> {
    let mut v = serde_json::to_value(v)?;
    match v.as_object_mut() {
        Some(map) => {
            map.insert("id".into(), json!(id));
            map.insert("ok".into(), json!(ok));
            Ok(v)
        }
        None => Ok(json!({ "id": id, "ok": ok, "value": v })),
    }
}

/// Runs `f` on instance ids `0..count` in parallel, keeping results in id order.
fn campaign(count: usize, f: impl Fn(usize) -> Result<Value> + Sync + Send) -> Result<Vec<Value>> {
    (0..count).into_par_iter().map(f).collect()
}

fn source_tables<'a>(
    source: &'a Source,
    draw: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Result<FnTable> + Sync + Send + 'a,
    seed: u64,
) -> Result<Box<dyn Fn(usize) -> Result<FnTable> + Sync + Send + 'a>> {
    match (&source.input, source.random) {
        (Some(path), _) => {
            let table = load_table(path)?;
            Ok(Box::new(move |_| Ok(table.clone())))
        }
        (None, Some(_)) => Ok(Box::new(move |i| draw(&mut instance_rng(seed, i as u64)))),
        (None, None) => Err(LabError::InvalidParameter("give --input or --random".into())),
    }
}

fn instance_count(source: &Source) -> usize {
    if source.input.is_some() {
        1
    } else {
        source.random.unwrap_or(0)
    }
}

fn score_for(kind: ScoreKind, space: ObservationSpace, file: Option<&Path>) -> Result<Box<dyn NonconformityMeasure>> {
    Ok(match kind {
        ScoreKind::Binary => Box::new(MinorityLabelScore { space }),
        ScoreKind::Knn => Box::new(NearestNeighbourScore { space }),
        ScoreKind::Constant => Box::new(ConstantScore(0.0)),
        ScoreKind::Custom => {
            let path = file.ok_or_else(|| LabError::InvalidParameter("--score custom needs --score-file".into()))?;
            Box::new(CustomScore::load(path)?)
        }
    })
}

fn parse_q(s: &str) -> Result<Distribution> {
    let probs = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| LabError::InvalidParameter(format!("--q entry {t:?}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Distribution::new(probs)
}

/// Executes the parsed command and assembles its report.
pub fn run(cli: &Cli) -> Result<Report> {
    let start = Instant::now();
    let g = &cli.global;
    let tol = Tolerances { exch: g.tol_exch, iid: g.tol_iid };
    let budget = g.budget;
    let seed = g.seed;

    let results: Vec<Value> = match &cli.command {
        Command::Verify { class, source, shape } => {
            let class = *class;
            let space = shape.space;
            shape.space.table_len(shape.n + 1, budget)?;
            let tables = source_tables(source, |rng| random_in_class(class, &space, shape.n, budget, rng), seed)?;
            campaign(instance_count(source), |i| {
                let r = check_class(&tables(i)?, class, tol);
                with_id(i, r.ok, &r)
            })?
        }
        Command::Decompose { source, shape } => {
            let space = shape.space;
            shape.space.table_len(shape.n + 1, budget)?;
            let tables = source_tables(source, |rng| random_in_class(ClassLabel::ER, &space, shape.n, budget, rng), seed)?;
            campaign(instance_count(source), |i| {
                let e = tables(i)?;
                let d = decompose(&e, tol)?;
                let check = verify_decomposition(&e, &d, tol);
                with_id(i, check.ok(), &check)
            })?
        }
        Command::Chain { source, shape, delta, mode, .. } => {
            let space = shape.space;
            shape.space.table_len(shape.n + 1, budget)?;
            let class = match mode {
                ChainKind::Full => ClassLabel::PR,
                ChainKind::Traininv => ClassLabel::PtR,
                ChainKind::Kolmogorov => ClassLabel::ER,
            };
            let tables = source_tables(source, |rng| random_in_class(class, &space, shape.n, budget, rng), seed)?;
            let (delta, mode) = (*delta, *mode);
            campaign(instance_count(source), |i| {
                let t = tables(i)?;
                match mode {
                    ChainKind::Full => {
                        let c = full_p_chain(&t, delta, tol)?;
                        with_id(i, c.verified, c.summary())
                    }
                    ChainKind::Traininv => {
                        let c = train_invariant_p_chain(&t, delta, tol)?;
                        with_id(i, c.verified, c.summary())
                    }
                    ChainKind::Kolmogorov => {
                        let k = corollary_kolmogorov_chain(&t, tol)?;
                        let constant = crate::universality::kolmogorov_constant(space.y_card());
                        // smallest admissible denominator for this F, against the constant used
                        let tightness = kolmogorov_tightness(&k.decomposition.invariant);
                        with_id(
                            i,
                            k.ok() && tightness <= constant * (1.0 + tol.iid),
                            json!({
                                "constant": constant,
                                "tightness": tightness,
                                "tightness_ratio": tightness / constant,
                                "y_card": space.y_card(),
                                "g_check": k.g_report,
                                "pointwise_ok": k.pointwise_ok,
                                "worst_ratio": k.worst_ratio,
                            }),
                        )
                    }
                }
            })?
        }
        Command::Calibrate { kind, param, input } => run_calibrate(*kind, *param, input.as_deref(), g.out.as_deref(), tol)?,
        Command::ConformalDemo { score, score_file, shape, epsilon } => {
            let space = shape.space;
            let n = shape.n;
            let a = score_for(*score, space, score_file.as_deref())?;
            let mut rng = instance_rng(seed, 0);
            let train: Vec<usize> = (0..n).map(|_| rng.gen_range(0..space.z_card())).collect();
            let x = rng.gen_range(0..space.x_card());
            let tau: f64 = rng.gen();
            let out = predict(a.as_ref(), &space, &train, x, Some(tau))?;
            let set = prediction_set(&out.p, *epsilon)?;
            let smoothed_set = prediction_set(out.smoothed_p.as_deref().unwrap_or(&[]), *epsilon)?;
            let mut results = vec![with_id(
                0,
                true,
                json!({
                    "train": train, "x": x, "tau": tau, "epsilon": epsilon,
                    "p": out.p, "e": out.e, "smoothed_p": out.smoothed_p,
                    "prediction_set": set, "smoothed_prediction_set": smoothed_set,
                }),
            )?];
            let pt = p_table(a.as_ref(), &space, n, PVariant::Deterministic, budget)?;
            let p_ex = check_p_exchangeable(&pt, tol.exch);
            let p_ti = check_train_invariant(&pt);
            let et = e_table(a.as_ref(), &space, n, budget)?;
            let e_ex = check_e_exchangeable(&et, tol.exch);
            let lim = limitation_check(a.as_ref(), &space, n, budget)?;
            let ok = p_ex.ok && p_ti && e_ex.ok && check_train_invariant(&et) && lim.ok;
            results.push(with_id(
                1,
                ok,
                json!({ "p_table": p_ex, "p_train_invariant": p_ti, "e_table": e_ex, "limitation": lim }),
            )?);
            results
        }
        Command::Gaps { experiment, big_n, k, input, shape } => {
            let v = match experiment {
                Experiment::Permutation => {
                    let r = permutation_gap(*big_n, budget)?;
                    with_id(0, r.ok(), &r)?
                }
                Experiment::Binomial => {
                    let r = binomial_gap(*big_n, *k, budget)?;
                    with_id(0, r.ok(), &r)?
                }
                Experiment::Flatness => {
                    let e = match input {
                        Some(p) => load_table(p)?,
                        None => e_table(&MinorityLabelScore { space: shape.space }, &shape.space, shape.n, budget)?,
                    };
                    let r = exchangeability_flatness(&e, tol.exch);
                    with_id(0, r.ok, &r)?
                }
                Experiment::Limitation => {
                    let r = limitation_check(&MinorityLabelScore { space: shape.space }, &shape.space, shape.n, budget)?;
                    with_id(0, r.ok, &r)?
                }
            };
            vec![v]
        }
        Command::Coverage { epsilon, trials, q, n, space, score, variant } => {
            let q = parse_q(q)?;
            let a = score_for(*score, *space, None)?;
            let variants: &[bool] = match variant {
                Variant::Smoothed => &[true],
                Variant::Deterministic => &[false],
                Variant::Both => &[true, false],
            };
            variants
                .iter()
                .enumerate()
                .map(|(i, &smoothed)| {
                    let r = mc_coverage(a.as_ref(), space, &q, *n, *epsilon, *trials, seed, smoothed)?;
                    let ok = if smoothed { r.within_band } else { r.ok };
                    with_id(i, ok, &r)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    let ok = results.iter().all(|r| r.get("ok").and_then(Value::as_bool).unwrap_or(true));
    Ok(Report {
        config: serde_json::to_value(cli)?,
        results,
        ok,
        wall_time_s: start.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn run_calibrate(
    kind: CalibratorKind,
    param: Option<f64>,
    input: Option<&Path>,
    out: Option<&Path>,
    tol: Tolerances,
) -> Result<Vec<Value>> {
    let need = |what: &str| param.ok_or_else(|| LabError::InvalidParameter(format!("--param ({what}) is required")));
    let calibrator = match kind {
        CalibratorKind::Power => Some(Calibrator::power(need("delta")?)?),
        CalibratorKind::Kappa => Some(Calibrator::kappa(need("kappa")?)?),
        CalibratorKind::Shafer => Some(Calibrator::shafer()),
        CalibratorKind::E2p => None,
    };
    let mut results = Vec::new();
    if let Some(c) = calibrator {
        let r = is_calibrator(&|p| c.apply(p));
        results.push(with_id(0, r.ok, json!({ "calibrator": c, "integral": r }))?);
    }
    if let Some(path) = input {
        let table = load_table(path)?;
        let (mapped, source_class, target_class) = match calibrator {
            Some(c) => (apply_calibrator(&c, &table), ClassLabel::PR, ClassLabel::ER),
            None => (apply_e_to_p(&table), ClassLabel::ER, ClassLabel::PR),
        };
        let before = check_class(&table, source_class, tol);
        let after = check_class(&mapped, target_class, tol);
        let ok = !before.ok || after.ok;
        match out {
            Some(p) => save_table(&mapped, p)?,
            None => println!("{}", mapped.to_json()?),
        }
        results.push(with_id(results.len(), ok, json!({ "input_check": before, "output_check": after }))?);
    }
    Ok(results)
}

/// Parses arguments, runs, writes the report and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let report = match run(&cli) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let dest = match &cli.command {
        Command::Calibrate { .. } => None,
        Command::Chain { report: Some(p), .. } => Some(p.clone()),
        _ => cli.global.out.clone(),
    };
    let written = match dest {
        Some(p) => save_report(&report, p, cli.global.format),
        None => write_report(&report, cli.global.format, &mut std::io::stdout().lock()),
    };
    if let Err(e) = written {
        eprintln!("error: {e}");
        return 2;
    }
    if report.ok {
        0
    } else {
        1
    }
}
