use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ehrbridge::concepts::ConceptMaps;
use ehrbridge::ingest::Source;
use ehrbridge::labels::Task;
use ehrbridge::model::{cross_evaluate, evaluate, fit_task_model, EvalReport, EvalSettings, LinearModel};
use ehrbridge::pipeline::{fold_rows, output::write_atomic, rows_in, run_task_dataset, RowSet};
use ehrbridge::synth::{generate_source_bundle, PlantSpec};
use ehrbridge::{run_pipeline, Condition, ExitPoint, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "ehrbridge", version, about = "Harmonized ICU time-series extraction and baseline models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the extraction pipeline up to the configured exit point.
    Extract(PipelineArgs),
    /// Check a configuration and print the merged result as TOML.
    ValidateConfig(PipelineArgs),
    /// Write synthetic source bundles and their expected outputs.
    Synth(SynthArgs),
    /// Fit a model for one task from the tables of an earlier run.
    Train(TrainArgs),
    /// Score a model on rows of an earlier run.
    Evaluate(EvalArgs),
    /// Score a model on every task member of another source.
    CrossEval(CrossArgs),
}

/// Config file plus overrides. Flags win over the file.
#[derive(Args, Debug, Default)]
struct PipelineArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source_mimic: Option<PathBuf>,
    #[arg(long)]
    source_eicu: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    age_min: Option<f64>,
    #[arg(long)]
    age_max: Option<f64>,
    #[arg(long)]
    los_min_hours: Option<f64>,
    #[arg(long)]
    los_max_hours: Option<f64>,
    #[arg(long)]
    missingness_threshold: Option<f64>,
    #[arg(long)]
    window_hours: Option<u32>,
    #[arg(long)]
    gap_hours: Option<u32>,
    /// generic, sepsis3, arf, shock, copd, chf or custom.
    #[arg(long)]
    cohort: Option<Condition>,
    #[arg(long)]
    custom_id_file: Option<PathBuf>,
    /// Directory holding registry and map overrides.
    #[arg(long)]
    config_dir: Option<PathBuf>,
    /// raw, pre_impute, pre_normalize, pre_split or full.
    #[arg(long)]
    exit_point: Option<ExitPoint>,
    /// Omit the per-variable indicator columns.
    #[arg(long)]
    drop_indicators: bool,
    /// Comma-separated task list.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<Task>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    n_boot: Option<usize>,
}

impl PipelineArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$flag { c.$($field).+ = v.clone().into(); })*
            };
        }
        set! {
            source_mimic => source_mimic,
            source_eicu => source_eicu,
            out => out,
            age_min => cohort.age_min,
            age_max => cohort.age_max,
            los_min_hours => cohort.los_min_hours,
            los_max_hours => cohort.los_max_hours,
            missingness_threshold => cohort.missingness_threshold,
            window_hours => cohort.window_hours,
            gap_hours => cohort.gap_hours,
            cohort => cohort.condition,
            custom_id_file => custom_id_file,
            config_dir => config_dir,
            exit_point => exit_point,
            tasks => tasks,
            seed => seed,
            threads => threads,
            n_boot => eval.n_boot,
        }
        if self.drop_indicators {
            c.drop_indicators = true;
        }
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives mimic/, eicu/ and oracle_<source>.json.
    #[arg(long)]
    out: PathBuf,
    /// JSON plant specification; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_stays: Option<usize>,
    /// Only write this source.
    #[arg(long)]
    source: Option<Source>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Directory of a run that reached at least the pre_split exit point.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    source: Source,
    /// Label file (stay_id,label); defaults to the run's own labels.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    task: Task,
    /// Where to write the model JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config whose [train] table sets the grid and solver.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// train, test or all.
    #[arg(long, default_value = "test")]
    set: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CrossArgs {
    /// Target run and source to score.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Evaluation report of the model on its own test set.
    #[arg(long)]
    origin_report: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_boot: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn row_set(s: &str) -> Result<RowSet> {
    Ok(match s {
        "train" => RowSet::Train,
        "test" => RowSet::Test,
        "all" => RowSet::All,
        other => bail!("unknown row set `{other}`; use train, test or all"),
    })
}

fn extract(args: &PipelineArgs) -> Result<()> {
    let config = args.resolve()?;
    let manifest = run_pipeline(&config, None)?;
    for (source, s) in &manifest.sources {
        log::info!(
            "{source}: {} stays loaded, {} in cohort, {} after missingness filter",
            s.stays_loaded,
            s.cohort_included,
            s.final_stays
        );
    }
    println!("{}", config.out.join("manifest.json").display());
    Ok(())
}

fn validate_config(args: &PipelineArgs) -> Result<()> {
    let config = args.resolve()?;
    config.validate()?;
    config.resolved_criteria()?.validate()?;
    if let Some(dir) = &config.config_dir {
        ConceptMaps::from_dir(dir)?;
    }
    print!("{}", config.to_toml()?);
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec: PlantSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => PlantSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.n_stays {
        spec.n_stays = n;
    }
    let maps = ConceptMaps::default_maps();
    let sources = match args.source {
        Some(s) => vec![s],
        None => vec![Source::MimicLike, Source::EicuLike],
    };
    for source in sources {
        let oracle = generate_source_bundle(&spec, source, &args.out.join(source.as_str()), &maps)?;
        write_json(&args.out.join(format!("oracle_{source}.json")), &oracle)?;
        log::info!("{source}: {} stays written, {} expected after filtering", spec.n_stays, oracle.included.len());
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let settings = match &args.config {
        Some(p) => PipelineConfig::from_file(p)?.train,
        None => PipelineConfig::default().train,
    };
    let (data, plan) = run_task_dataset(&args.data.run, args.data.source, args.task, args.data.labels.as_deref())?;
    let rows = rows_in(&data, &plan, RowSet::Train);
    let (model, grid) = fit_task_model(&data, &rows, &fold_rows(&data, &plan), &settings)?;
    log::info!("selected C={} l1_ratio={} (mean CV AUROC {:.4})", grid.best_c, grid.best_l1_ratio, grid.best_mean_auroc);
    write_json(&args.out, &model)
}

fn eval_on(data: &DataArgs, model: &LinearModel, set: RowSet, n_boot: usize, seed: u64) -> Result<(ehrbridge::model::TaskDataset, EvalSettings)> {
    let (full, plan) = run_task_dataset(&data.run, data.source, model.task, data.labels.as_deref())?;
    let rows = rows_in(&full, &plan, set);
    Ok((full.subset(&rows), EvalSettings { n_boot, seed, ..EvalSettings::default() }))
}

fn evaluate_cmd(args: &EvalArgs) -> Result<()> {
    let model: LinearModel = read_json(&args.model)?;
    let (data, settings) = eval_on(&args.data, &model, row_set(&args.set)?, args.n_boot, args.seed)?;
    let report = evaluate(&model, &data, &settings)?;
    println!("AUROC {:.4} [{:.4}, {:.4}]  AUPRC {:.4}", report.auroc, report.auroc_ci.0, report.auroc_ci.1, report.auprc);
    write_json(&args.out, &report)
}

fn cross_eval(args: &CrossArgs) -> Result<()> {
    let model: LinearModel = read_json(&args.model)?;
    let origin: EvalReport = read_json(&args.origin_report)?;
    let (data, settings) = eval_on(&args.data, &model, RowSet::All, args.n_boot, args.seed)?;
    let report = cross_evaluate(&model, &data, &origin, &settings)?;
    if let Some(d) = &report.diff_vs_origin {
        println!("AUROC {:.4} (DIFF {:+.4})  AUPRC {:.4} (DIFF {:+.4})", report.auroc, d.auroc, report.auprc, d.auprc);
    }
    write_json(&args.out, &report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Extract(a) => extract(a),
        Command::ValidateConfig(a) => validate_config(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::CrossEval(a) => cross_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
