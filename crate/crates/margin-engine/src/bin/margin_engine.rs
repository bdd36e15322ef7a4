//! Command-line surface: fit models, compute margins and contrasts, dump
//! compiled programs, and run benchmarks.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use margin_engine::bench;
use margin_engine::compiler::compile;
use margin_engine::diff::LinkFunction;
use margin_engine::error::{Error, Result};
use margin_engine::formula::parse_formula;
use margin_engine::inference::{
    contrast, second_differences, second_differences_at, Selector,
};
use margin_engine::margins::{
    balanced_grid, cartesian_grid, means_grid, population_margins, profile_margins,
    quantile_grid, ContrastKind, GridValue, MarginsOptions, Measure, ReferenceGrid, Scale,
    Target,
};
use margin_engine::model::{
    cluster_codes, cr_covariance, fit_glm, fit_ols, hc_covariance, load_model,
    read_model_spec, save_model, CrVariant, Family, FittedModel, HcVariant,
};
use margin_engine::render::{
    render_contrast, render_margins, render_model_text, render_seconddiff, OutputFormat,
};
use margin_engine::schema::{read_contrast_specs, resolve, ContrastSpec};
use margin_engine::tables::{read_csv, read_schema_hints, Column, ScalarValue, Table};

#[global_allocator]
static ALLOC: margin_engine::alloc::CountingAllocator =
    margin_engine::alloc::CountingAllocator;

#[derive(Parser)]
#[command(
    name = "margin-engine",
    about = "Marginal effects from compiled Wilkinson-notation formulas",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV data file
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON schema hints {"col": "numeric"|"integer"|"boolean"|"categorical"}
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Optional JSON contrast specs {"col": {"scheme": "dummy", "base": "A"}}
    #[arg(long)]
    contrasts: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Saved model-spec JSON (mutually exclusive with --formula)
    #[arg(long)]
    model: Option<PathBuf>,
    /// Formula to fit on the fly
    #[arg(long)]
    formula: Option<String>,
    /// Family for on-the-fly fits
    #[arg(long, default_value = "gaussian")]
    family: String,
    /// Link for on-the-fly fits (defaults to the family's canonical link)
    #[arg(long)]
    link: Option<String>,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Args, Clone)]
struct VcovArgs {
    /// Covariance: model, hc0-hc3, cr0, cr1
    #[arg(long, default_value = "model")]
    vcov: String,
    /// Cluster column for cr0/cr1
    #[arg(long)]
    cluster: Option<String>,
}

#[derive(Args, Clone)]
struct OutputArgs {
    /// Output format: table, csv, json
    #[arg(long, default_value = "table")]
    format: String,
    /// Write output to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include per-estimate beta-gradients in CSV/JSON output
    #[arg(long)]
    include_gradients: bool,
}

#[derive(Args, Clone)]
struct MarginsFlags {
    /// Analysis target: effects or predictions
    #[arg(long = "type", default_value = "effects")]
    target: String,
    /// Comma-separated variables (defaults to every covariate)
    #[arg(long)]
    vars: Option<String>,
    /// Evaluation scale: mu (response) or eta (linear predictor)
    #[arg(long, default_value = "mu")]
    scale: String,
    /// effect, elasticity, dyex, or eydx
    #[arg(long, default_value = "effect")]
    measure: String,
    /// Categorical contrast style: baseline or pairwise
    #[arg(long, default_value = "baseline")]
    contrast: String,
    /// Counterfactual overrides, e.g. "g=A,B;x=1.5" (values comma-separated)
    #[arg(long)]
    scenarios: Option<String>,
    /// Categorical column splitting results into subgroups
    #[arg(long)]
    groups: Option<String>,
    /// Numeric column of observation weights
    #[arg(long)]
    weights: Option<String>,
    /// Worker threads (fallback: MARGIN_ENGINE_THREADS, then 1)
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a model-spec JSON
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Population margins: effects or predictions averaged over the sample
    Margins {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        flags: MarginsFlags,
        #[command(flatten)]
        vcov: VcovArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Profile margins at reference-grid points
    Profile {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        flags: MarginsFlags,
        #[command(flatten)]
        vcov: VcovArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Grid kind: means, cartesian, balanced, quantiles
        #[arg(long, default_value = "means")]
        grid: String,
        /// Grid values: cartesian "x=1,2;g=A,B"; balanced "g,b";
        /// quantiles "x:0.25,0.5,0.75"; means overrides "x=1.5;g=A"
        #[arg(long)]
        values: Option<String>,
    },
    /// Contrast two estimates of a margins run
    Contrast {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        flags: MarginsFlags,
        #[command(flatten)]
        vcov: VcovArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// First selector, e.g. "index=0" or "variable=x,at:g=A"
        #[arg(long)]
        first: String,
        /// Second selector
        #[arg(long)]
        second: String,
    },
    /// Second differences of a focal effect across a moderator
    Seconddiff {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        vcov: VcovArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Focal (continuous) variable
        #[arg(long)]
        focal: String,
        /// Moderator column (categorical levels or continuous points)
        #[arg(long)]
        moderator: String,
        /// Evaluation points for continuous moderators, e.g. "0.5,1.5,2.5"
        #[arg(long)]
        at: Option<String>,
        /// Explicit finite-difference step (continuous moderators)
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the model matrix or the compiled operation program
    Matrix {
        #[command(flatten)]
        data: DataArgs,
        /// Formula to compile
        #[arg(long)]
        formula: String,
        /// Print the compiled program instead of the matrix
        #[arg(long)]
        dump_program: bool,
        #[command(flatten)]
        output: OutputArgs,
        /// Maximum number of matrix rows to print
        #[arg(long, default_value_t = 10)]
        rows: usize,
    },
    /// Benchmarks on seeded synthetic data
    Bench {
        /// Suite: perrow, complexity, ame
        #[arg(long, default_value = "perrow")]
        suite: String,
        /// Rows for complexity/ame suites
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// Timed repetitions per measurement
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn emit(text: &str, out: &Option<PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::Io),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn load_table(args: &DataArgs) -> Result<(Table, HashMap<String, ContrastSpec>)> {
    let hints = match &args.schema {
        Some(p) => Some(read_schema_hints(p)?),
        None => None,
    };
    let table = read_csv(&args.data, hints.as_ref())?;
    let contrasts = match &args.contrasts {
        Some(p) => read_contrast_specs(p)?,
        None => HashMap::new(),
    };
    Ok((table, contrasts))
}

fn obtain_model(
    args: &ModelArgs,
    table: &Table,
    contrasts: &HashMap<String, ContrastSpec>,
) -> Result<FittedModel> {
    match (&args.model, &args.formula) {
        (Some(_), Some(_)) => Err(Error::Cli(
            "give either --model or --formula, not both".into(),
        )),
        (Some(path), None) => {
            let spec = read_model_spec(path)?;
            load_model(&spec, table, contrasts)
        }
        (None, Some(formula)) => {
            let family = Family::from_name(&args.family)?;
            match family {
                Family::Gaussian if args.link.is_none() => fit_ols(formula, table, contrasts),
                _ => {
                    let link = match &args.link {
                        Some(name) => LinkFunction::from_name(name)?,
                        None => family.canonical_link(),
                    };
                    fit_glm(
                        formula,
                        table,
                        family,
                        link,
                        contrasts,
                        args.max_iter,
                        args.tol,
                    )
                }
            }
        }
        (None, None) => Err(Error::Cli("one of --model or --formula is required".into())),
    }
}

fn resolve_vcov(model: &FittedModel, args: &VcovArgs, table: &Table) -> Result<(DMatrix<f64>, String)> {
    match args.vcov.as_str() {
        "model" => Ok((model.covariance.clone(), "model".into())),
        "hc0" | "hc1" | "hc2" | "hc3" => {
            let v = HcVariant::from_name(&args.vcov)?;
            Ok((hc_covariance(model, v)?, args.vcov.clone()))
        }
        "cr0" | "cr1" => {
            let cluster = args.cluster.as_ref().ok_or_else(|| {
                Error::Cli("--cluster is required for cluster-robust vcov".into())
            })?;
            let codes = cluster_codes(table.column(cluster)?)?;
            let v = CrVariant::from_name(&args.vcov)?;
            Ok((
                cr_covariance(model, &codes, v)?,
                format!("{}({})", args.vcov, cluster),
            ))
        }
        other => Err(Error::Cli(format!(
            "unknown vcov '{other}' (expected model, hc0-hc3, cr0, cr1)"
        ))),
    }
}

/// Parse a scenario/grid scalar according to the column's type.
fn parse_scalar(table: &Table, column: &str, text: &str) -> Result<ScalarValue> {
    match table.column(column)? {
        Column::Numeric(_) | Column::Integer(_) => {
            let v: f64 = text.parse().map_err(|_| {
                Error::Cli(format!("'{text}' is not a number for column '{column}'"))
            })?;
            Ok(ScalarValue::Number(v))
        }
        Column::Boolean(_) => match text {
            "true" | "1" => Ok(ScalarValue::Bool(true)),
            "false" | "0" => Ok(ScalarValue::Bool(false)),
            _ => Err(Error::Cli(format!(
                "'{text}' is not a boolean for column '{column}'"
            ))),
        },
        Column::Categorical { .. } => Ok(ScalarValue::Level(text.to_string())),
    }
}

/// Parse "g=A,B;x=1.5" into scenario value lists.
fn parse_scenarios(table: &Table, text: &str) -> Result<Vec<(String, Vec<ScalarValue>)>> {
    let mut out = Vec::new();
    for part in text.split(';').filter(|s| !s.trim().is_empty()) {
        let (name, values) = part.split_once('=').ok_or_else(|| {
            Error::Cli(format!("scenario '{part}' must look like name=v1,v2"))
        })?;
        let name = name.trim();
        let values: Vec<ScalarValue> = values
            .split(',')
            .map(|v| parse_scalar(table, name, v.trim()))
            .collect::<Result<_>>()?;
        out.push((name.to_string(), values));
    }
    Ok(out)
}

fn scalar_to_grid(v: ScalarValue) -> GridValue {
    match v {
        ScalarValue::Number(x) => GridValue::Number(x),
        ScalarValue::Bool(b) => GridValue::Bool(b),
        ScalarValue::Level(l) => GridValue::Level(l),
    }
}

fn build_grid(table: &Table, grid: &str, values: &Option<String>) -> Result<ReferenceGrid> {
    match grid {
        "means" => {
            let overrides = match values {
                None => Vec::new(),
                Some(text) => parse_scenarios(table, text)?
                    .into_iter()
                    .map(|(name, mut vs)| {
                        if vs.len() != 1 {
                            return Err(Error::Cli(format!(
                                "means grid override '{name}' must have exactly one value"
                            )));
                        }
                        Ok((name, scalar_to_grid(vs.remove(0))))
                    })
                    .collect::<Result<_>>()?,
            };
            means_grid(table, &overrides)
        }
        "cartesian" => {
            let text = values.as_ref().ok_or_else(|| {
                Error::Cli("--values is required for a cartesian grid".into())
            })?;
            let specs: Vec<(String, Vec<GridValue>)> = parse_scenarios(table, text)?
                .into_iter()
                .map(|(name, vs)| (name, vs.into_iter().map(scalar_to_grid).collect()))
                .collect();
            cartesian_grid(&specs)
        }
        "balanced" => {
            let text = values.as_ref().ok_or_else(|| {
                Error::Cli("--values is required for a balanced grid (column list)".into())
            })?;
            let vars: Vec<String> = text.split(',').map(|s| s.trim().to_string()).collect();
            balanced_grid(table, &vars)
        }
        "quantiles" => {
            let text = values.as_ref().ok_or_else(|| {
                Error::Cli("--values is required for a quantile grid (col:p1,p2)".into())
            })?;
            let (var, probs) = text.split_once(':').ok_or_else(|| {
                Error::Cli("quantile grid values must look like col:0.25,0.5".into())
            })?;
            let probs: Vec<f64> = probs
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::Cli(format!("bad probability '{p}'")))
                })
                .collect::<Result<_>>()?;
            quantile_grid(table, var.trim(), &probs)
        }
        other => Err(Error::Cli(format!(
            "unknown grid '{other}' (expected means, cartesian, balanced, quantiles)"
        ))),
    }
}

fn build_options(table: &Table, flags: &MarginsFlags) -> Result<MarginsOptions> {
    let target = match flags.target.as_str() {
        "effects" => Target::Effects,
        "predictions" => Target::Predictions,
        other => {
            return Err(Error::Cli(format!(
                "unknown type '{other}' (expected effects or predictions)"
            )))
        }
    };
    let scale = match flags.scale.as_str() {
        "mu" => Scale::Mu,
        "eta" => Scale::Eta,
        other => return Err(Error::Cli(format!("unknown scale '{other}'"))),
    };
    let measure = match flags.measure.as_str() {
        "effect" => Measure::Effect,
        "elasticity" => Measure::Elasticity,
        "dyex" => Measure::Dyex,
        "eydx" => Measure::Eydx,
        other => return Err(Error::Cli(format!("unknown measure '{other}'"))),
    };
    let contrast = match flags.contrast.as_str() {
        "baseline" => ContrastKind::Baseline,
        "pairwise" => ContrastKind::Pairwise,
        other => return Err(Error::Cli(format!("unknown contrast '{other}'"))),
    };
    let scenarios = match &flags.scenarios {
        None => Vec::new(),
        Some(text) => parse_scenarios(table, text)?,
    };
    Ok(MarginsOptions {
        target,
        vars: flags
            .vars
            .as_ref()
            .map(|v| v.split(',').map(|s| s.trim().to_string()).collect()),
        scale,
        measure,
        contrast,
        scenarios,
        groups: flags.groups.clone(),
        weights: flags.weights.clone(),
        threads: flags.threads,
    })
}

/// Parse "index=0" or "variable=x,term=dy/dx,at:g=A,group=B".
fn parse_selector(text: &str) -> Result<Selector> {
    let mut sel = Selector::default();
    for part in text.split(',').filter(|s| !s.trim().is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            Error::Cli(format!("selector part '{part}' must look like key=value"))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "index" => {
                sel.index = Some(value.parse().map_err(|_| {
                    Error::Cli(format!("bad selector index '{value}'"))
                })?)
            }
            "variable" => sel.variable = Some(value.to_string()),
            "term" => sel.term = Some(value.to_string()),
            "group" => sel.group = Some(value.to_string()),
            _ if key.starts_with("at:") => {
                sel.at
                    .push((key["at:".len()..].to_string(), value.to_string()));
            }
            other => {
                return Err(Error::Cli(format!(
                    "unknown selector key '{other}' (index, variable, term, group, at:<col>)"
                )))
            }
        }
    }
    Ok(sel)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit {
            data,
            model,
            output,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let fitted = obtain_model(&model, &table, &contrasts)?;
            if let Some(path) = &output.out {
                save_model(&fitted, path)?;
                println!("wrote model spec to {}", path.display());
            } else {
                print!("{}", render_model_text(&fitted));
            }
            Ok(())
        }
        Command::Margins {
            data,
            model,
            flags,
            vcov,
            output,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let fitted = obtain_model(&model, &table, &contrasts)?;
            let (sigma, label) = resolve_vcov(&fitted, &vcov, &table)?;
            let options = build_options(&table, &flags)?;
            let result = population_margins(&fitted, &table, &sigma, &label, &options)?;
            let format = OutputFormat::from_name(&output.format)?;
            emit(
                &render_margins(&result, format, output.include_gradients),
                &output.out,
            )
        }
        Command::Profile {
            data,
            model,
            flags,
            vcov,
            output,
            grid,
            values,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let fitted = obtain_model(&model, &table, &contrasts)?;
            let (sigma, label) = resolve_vcov(&fitted, &vcov, &table)?;
            let options = build_options(&table, &flags)?;
            let grid = build_grid(&table, &grid, &values)?;
            let result = profile_margins(&fitted, &table, &grid, &sigma, &label, &options)?;
            let format = OutputFormat::from_name(&output.format)?;
            emit(
                &render_margins(&result, format, output.include_gradients),
                &output.out,
            )
        }
        Command::Contrast {
            data,
            model,
            flags,
            vcov,
            output,
            first,
            second,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let fitted = obtain_model(&model, &table, &contrasts)?;
            let (sigma, label) = resolve_vcov(&fitted, &vcov, &table)?;
            let options = build_options(&table, &flags)?;
            let result = population_margins(&fitted, &table, &sigma, &label, &options)?;
            let c = contrast(
                &result,
                &parse_selector(&first)?,
                &parse_selector(&second)?,
                &sigma,
            )?;
            let format = OutputFormat::from_name(&output.format)?;
            emit(&render_contrast(&c, format)?, &output.out)
        }
        Command::Seconddiff {
            data,
            model,
            vcov,
            output,
            focal,
            moderator,
            at,
            delta,
            threads,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let fitted = obtain_model(&model, &table, &contrasts)?;
            let (sigma, label) = resolve_vcov(&fitted, &vcov, &table)?;
            let rows = match table.column(&moderator)?.levels() {
                Some(levels) => {
                    // categorical moderator: AME of the focal variable under
                    // a scenario fixing the moderator at each level
                    let options = MarginsOptions {
                        vars: Some(vec![focal.clone()]),
                        scenarios: vec![(
                            moderator.clone(),
                            levels.iter().cloned().map(ScalarValue::Level).collect(),
                        )],
                        threads,
                        ..Default::default()
                    };
                    let effects =
                        population_margins(&fitted, &table, &sigma, &label, &options)?;
                    second_differences(&effects, &focal, &moderator, &sigma)?
                }
                None => {
                    let points: Option<Vec<f64>> = match &at {
                        None => None,
                        Some(text) => Some(
                            text.split(',')
                                .map(|p| {
                                    p.trim().parse().map_err(|_| {
                                        Error::Cli(format!("bad evaluation point '{p}'"))
                                    })
                                })
                                .collect::<Result<_>>()?,
                        ),
                    };
                    second_differences_at(
                        &fitted,
                        &table,
                        &focal,
                        &moderator,
                        &sigma,
                        points.as_deref(),
                        delta,
                        &MarginsOptions {
                            threads,
                            ..Default::default()
                        },
                    )?
                }
            };
            let format = OutputFormat::from_name(&output.format)?;
            emit(&render_seconddiff(&rows, format), &output.out)
        }
        Command::Matrix {
            data,
            formula,
            dump_program,
            output,
            rows,
        } => {
            let (table, contrasts) = load_table(&data)?;
            let ast = parse_formula(&formula)?;
            let resolved = resolve(&ast, &table, &contrasts)?;
            let compiled = compile(&resolved)?;
            let text = if dump_program {
                compiled.dump_program()
            } else {
                let matrix = margin_engine::compiler::model_matrix(&compiled, &table)?;
                let labels = resolved.column_labels();
                let mut text = labels.join("  ");
                text.push('\n');
                for i in 0..matrix.nrows().min(rows) {
                    let cells: Vec<String> =
                        (0..matrix.ncols()).map(|j| format!("{}", matrix[(i, j)])).collect();
                    text.push_str(&cells.join("  "));
                    text.push('\n');
                }
                if matrix.nrows() > rows {
                    text.push_str(&format!("... ({} rows total)\n", matrix.nrows()));
                }
                text
            };
            emit(&text, &output.out)
        }
        Command::Bench {
            suite,
            n,
            reps,
            threads,
            output,
        } => {
            let text = match suite.as_str() {
                "perrow" => {
                    let reports = bench::perrow_suite(reps)?;
                    match OutputFormat::from_name(&output.format)? {
                        OutputFormat::Json => {
                            serde_json::to_string_pretty(&reports).expect("serializable")
                        }
                        _ => bench::render_perrow_text(&reports),
                    }
                }
                "complexity" => {
                    let reports = bench::complexity_suite(n, reps)?;
                    match OutputFormat::from_name(&output.format)? {
                        OutputFormat::Json => {
                            serde_json::to_string_pretty(&reports).expect("serializable")
                        }
                        _ => bench::render_perrow_text(&reports),
                    }
                }
                "ame" => {
                    let report = bench::ame_suite(n, threads)?;
                    match OutputFormat::from_name(&output.format)? {
                        OutputFormat::Json => {
                            serde_json::to_string_pretty(&report).expect("serializable")
                        }
                        _ => bench::render_ame_text(&report),
                    }
                }
                other => {
                    return Err(Error::Cli(format!(
                        "unknown bench suite '{other}' (perrow, complexity, ame)"
                    )))
                }
            };
            emit(&text, &output.out)
        }
    }
}
