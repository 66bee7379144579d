//! Command-line front end: `generate`, `run` and `validate`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::{
    export_results, generate_twin_cohort, log_result, omega_entry, write_truth, ExperimentConfig, ExperimentKind,
    ExperimentResult, HarnessError, OmegaEntry, OmegaReport, TwinSpec,
};
use crate::integrator::IntegratorConfig;
use crate::patient_data::PatientTimeline;
use crate::seed;

#[derive(Debug, Parser)]
#[command(name = "cenkf", version, about = "Constrained ensemble Kalman filtering of glucose-insulin dynamics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a cohort of synthetic patients.
    Generate(CommonArgs),
    /// Run filtering experiments over patient timelines.
    Run(RunArgs),
    /// Check timeline files against the input schema.
    Validate {
        /// Timeline files or directories containing them.
        paths: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of patients (generate) or timeline paths (run).
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub patients: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated experiment names, or `all` for the baseline plus all
    /// eleven constraint experiments.
    #[arg(long, value_delimiter = ',')]
    pub experiments: Vec<String>,
    #[arg(long)]
    pub particles: Option<usize>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Contents of the TOML configuration file. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
    /// Timeline files or directories (run); relative to the config file.
    pub patients: Vec<PathBuf>,
    pub experiments: Vec<String>,
    /// Settings shared by every experiment; `experiment` and `seed` are
    /// overridden per run.
    pub experiment: ExperimentConfig,
    pub cohort_size: usize,
    pub twin: TwinSpec,
    pub twin_integrator: IntegratorConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: 1,
            patients: Vec::new(),
            experiments: vec!["unconstrained".into()],
            experiment: ExperimentConfig::default(),
            cohort_size: 20,
            twin: TwinSpec::default(),
            twin_integrator: IntegratorConfig::default(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<(FileConfig, PathBuf), HarnessError> {
    let Some(path) = path else {
        return Ok((FileConfig::default(), PathBuf::from(".")));
    };
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
    let cfg: FileConfig =
        toml::from_str(&text).map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, base))
}

/// Everything a `run` needs, resolved and checked before any work starts.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub timelines: Vec<(PathBuf, PatientTimeline)>,
    pub experiments: Vec<ExperimentKind>,
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub jobs: usize,
}

fn parse_experiments(names: &[String]) -> Result<Vec<ExperimentKind>, HarnessError> {
    let mut out = Vec::new();
    for n in names {
        let n = n.trim();
        if n == "all" {
            out.extend(ExperimentKind::all());
        } else {
            out.push(n.parse()?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(HarnessError::InvalidConfig("no experiments requested".into()));
    }
    Ok(out)
}

/// Timeline files under `path` (sorted), or `path` itself if it is a file.
pub fn timeline_files(path: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let io = |source| HarnessError::Io { path: path.to_path_buf(), source };
    let meta = fs::metadata(path).map_err(io)?;
    if !meta.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(io)? {
        let p = entry.map_err(io)?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if p.is_file() && matches!(ext.as_deref(), Some("csv" | "json")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

impl RunManifest {
    pub fn resolve(args: &RunArgs) -> Result<Self, HarnessError> {
        let (file, base) = load_config(args.common.config.as_deref())?;
        let seed = args.common.seed.unwrap_or(file.seed);
        let out = args.common.out.clone().unwrap_or_else(|| base.join(&file.out));
        let jobs = args.jobs.unwrap_or(file.jobs).max(1);
        let names = if args.experiments.is_empty() { file.experiments.clone() } else { args.experiments.clone() };
        let experiments = parse_experiments(&names)?;
        let mut config = file.experiment.clone();
        if let Some(n) = args.particles {
            config.particles = n;
        }
        config.validate()?;
        let inputs: Vec<PathBuf> = if args.common.patients.is_empty() {
            file.patients.iter().map(|p| base.join(p)).collect()
        } else {
            args.common.patients.iter().map(PathBuf::from).collect()
        };
        if inputs.is_empty() {
            return Err(HarnessError::InvalidConfig("no patient timelines given".into()));
        }
        let mut timelines = Vec::new();
        for input in &inputs {
            for f in timeline_files(input)? {
                let tl = PatientTimeline::from_path(&f)?;
                timelines.push((f, tl));
            }
        }
        if timelines.is_empty() {
            return Err(HarnessError::InvalidConfig("no timeline files found".into()));
        }
        let mut ids: Vec<&str> = timelines.iter().map(|(_, t)| t.id()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(HarnessError::InvalidConfig(format!("patient id {} appears more than once", w[0])));
        }
        Ok(RunManifest { timelines, experiments, config, out, seed, jobs })
    }

    /// Seed shared by all experiments on one patient, so that ω compares
    /// runs with identical noise draws.
    pub fn patient_seed(&self, id: &str) -> u64 {
        seed::derive(self.seed, seed::hash_str(id), 0)
    }
}

/// Outcome of one (patient, experiment) pair.
pub struct RunOutcome {
    pub patient: String,
    pub experiment: ExperimentKind,
    pub result: Result<ExperimentResult, String>,
}

/// Executes the manifest and writes the result tree. Independent of `jobs`
/// up to wall-clock time.
pub fn execute(manifest: &RunManifest) -> Result<Vec<RunOutcome>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.jobs)
        .build()
        .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let tasks: Vec<(&PatientTimeline, ExperimentKind)> = manifest
        .timelines
        .iter()
        .flat_map(|(_, tl)| manifest.experiments.iter().map(move |&e| (tl, e)))
        .collect();
    let outcomes = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(tl, kind)| {
                let cfg = ExperimentConfig { experiment: kind, seed: manifest.patient_seed(tl.id()), ..manifest.config.clone() };
                let result = crate::harness::run_experiment(tl, &cfg).map_err(|e| e.to_string()).and_then(|r| {
                    let dir = manifest.out.join(tl.id()).join(kind.label());
                    export_results(&r, &dir).map_err(|e| e.to_string())?;
                    log_result(&r);
                    Ok(r)
                });
                RunOutcome { patient: tl.id().to_string(), experiment: kind, result }
            })
            .collect::<Vec<_>>()
    });
    write_tables(manifest, &outcomes)?;
    Ok(outcomes)
}

fn omega_report(outcomes: &[RunOutcome]) -> OmegaReport {
    let mut by_patient: BTreeMap<&str, BTreeMap<ExperimentKind, &ExperimentResult>> = BTreeMap::new();
    for o in outcomes {
        if let Ok(r) = &o.result {
            by_patient.entry(o.patient.as_str()).or_default().insert(o.experiment, r);
        }
    }
    let patients = by_patient
        .into_iter()
        .filter_map(|(p, runs)| {
            let baseline = runs.get(&ExperimentKind::Unconstrained)?;
            let entries: Vec<OmegaEntry> = runs
                .iter()
                .filter_map(|(k, r)| match k {
                    ExperimentKind::Constrained(c) => Some(omega_entry(*c, r, baseline)),
                    ExperimentKind::Unconstrained => None,
                })
                .collect();
            (!entries.is_empty()).then(|| (p.to_string(), entries))
        })
        .collect();
    OmegaReport::new(patients)
}

/// MSE per patient and experiment, plus ω tables when a baseline was run.
fn write_tables(manifest: &RunManifest, outcomes: &[RunOutcome]) -> Result<(), HarnessError> {
    let out = &manifest.out;
    fs::create_dir_all(out).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
    let mut mse = String::from("patient,experiment,mse,mse_sum,qualifying,status\n");
    for o in outcomes {
        let (m, status) = match &o.result {
            Ok(r) => (r.mse, if r.metadata.aborted.is_some() { "aborted" } else { "ok" }),
            Err(_) => (None, "failed"),
        };
        let f = |x: Option<String>| x.unwrap_or_default();
        mse.push_str(&format!(
            "{},{},{},{},{},{status}\n",
            o.patient,
            o.experiment,
            f(m.map(|m| m.mean.to_string())),
            f(m.map(|m| m.sum.to_string())),
            f(m.map(|m| m.count.to_string())),
        ));
    }
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|source| HarnessError::Io { path: p, source })
    };
    write("mse.csv", &mse)?;
    let report = omega_report(outcomes);
    if !report.patients.is_empty() {
        write("omega.csv", &report.entries_csv())?;
        write("omega_summary.csv", &report.fractions_csv())?;
    }
    Ok(())
}

fn print_summary(manifest: &RunManifest, outcomes: &[RunOutcome]) {
    let mut header = format!("{:<16}", "patient");
    for e in &manifest.experiments {
        header.push_str(&format!("{:>14}", e.label()));
    }
    println!("MSE after 24 h (mg/dl)^2");
    println!("{header}");
    for (_, tl) in &manifest.timelines {
        let mut row = format!("{:<16}", tl.id());
        for e in &manifest.experiments {
            let o = outcomes.iter().find(|o| o.patient == tl.id() && o.experiment == *e);
            let cell = match o.map(|o| &o.result) {
                Some(Ok(r)) if r.metadata.aborted.is_some() => "aborted".to_string(),
                Some(Ok(r)) => r.mse.map_or("-".to_string(), |m| format!("{:.2}", m.mean)),
                _ => "failed".to_string(),
            };
            row.push_str(&format!("{cell:>14}"));
        }
        println!("{row}");
    }
    let report = omega_report(outcomes);
    if report.patients.is_empty() {
        return;
    }
    println!();
    println!("omega = MSE(constrained) / MSE(unconstrained)");
    for (p, entries) in &report.patients {
        let cells: Vec<String> = entries
            .iter()
            .map(|e| format!("{}={}", e.experiment, e.omega.map_or("-".to_string(), |w| format!("{w:.3}"))))
            .collect();
        println!("{p:<16}{}", cells.join(" "));
    }
    println!();
    print!("{}", report.fractions_csv());
}

pub fn cmd_run(args: &RunArgs) -> Result<bool, HarnessError> {
    let manifest = RunManifest::resolve(args)?;
    let outcomes = execute(&manifest)?;
    print_summary(&manifest, &outcomes);
    let mut ok = true;
    for o in &outcomes {
        match &o.result {
            Err(e) => {
                error!("{} / {}: {e}", o.patient, o.experiment);
                ok = false;
            }
            Ok(r) if r.metadata.aborted.is_some() => ok = false,
            Ok(_) => {}
        }
    }
    Ok(ok)
}

pub fn cmd_generate(args: &CommonArgs) -> Result<(), HarnessError> {
    let (file, base) = load_config(args.config.as_deref())?;
    let seed = args.seed.unwrap_or(file.seed);
    let out = args.out.clone().unwrap_or_else(|| base.join(&file.out));
    let n = match args.patients.as_slice() {
        [] => file.cohort_size,
        [n] => n
            .parse()
            .map_err(|_| HarnessError::InvalidConfig(format!("--patients expects a cohort size, got {n:?}")))?,
        _ => return Err(HarnessError::InvalidConfig("--patients expects a single cohort size".into())),
    };
    let cohort = generate_twin_cohort(n, &file.twin, &file.twin_integrator, seed)?;
    let truth_dir = out.join("truth");
    fs::create_dir_all(&truth_dir).map_err(|source| HarnessError::Io { path: truth_dir.clone(), source })?;
    for twin in &cohort {
        let id = twin.timeline.id();
        let path = out.join(format!("{id}.csv"));
        let f = fs::File::create(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
        twin.timeline.write_csv(f)?;
        write_truth(twin, &truth_dir.join(format!("{id}.csv")))?;
        let params = truth_dir.join(format!("{id}_params.json"));
        let text = serde_json::to_string_pretty(&twin.params).expect("parameters serialize");
        fs::write(&params, text + "\n").map_err(|source| HarnessError::Io { path: params.clone(), source })?;
        println!("{}", path.display());
    }
    Ok(())
}

/// Prints one verdict per file; returns whether all files were valid.
pub fn cmd_validate(paths: &[PathBuf]) -> bool {
    let mut all_ok = true;
    for p in paths {
        let files = match timeline_files(p) {
            Ok(f) => f,
            Err(e) => {
                println!("{}: error: {e}", p.display());
                all_ok = false;
                continue;
            }
        };
        for f in files {
            match PatientTimeline::from_path(&f) {
                Ok(tl) => println!("{}: ok ({} events)", f.display(), tl.events().len()),
                Err(e) => {
                    println!("{}: error: {e}", f.display());
                    all_ok = false;
                }
            }
        }
    }
    all_ok
}

pub fn main_with(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(args).map(|_| true),
        Command::Run(args) => cmd_run(args),
        Command::Validate { paths } => Ok(cmd_validate(paths)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
