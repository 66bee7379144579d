//! Experiment driver: sequential forecast/assimilate runs over a patient
//! timeline, MSE scoring, the constraint-experiment matrix and synthetic
//! twin patients.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::constrained::{violation_stats, ConstrainedAnalysis, ConstraintExperiment, ConstraintSet, InsulinUnits};
use crate::filter::{
    init_ensemble, predict, Analysis, Ensemble, FilterError, FilterOptions, ForecastSummary, InitSpread, KalmanAnalysis,
    MeasurementModel, NoiseSpec, ParameterSelection, Prediction, UltradianDynamics,
};
use crate::integrator::{integrate_between, solution_operator, IntegrateError, IntegratorConfig};
use crate::patient_data::{apply_inclusion, to_exogenous_with, DataError, DataInclusion, EventKind, PatientEvent, PatientTimeline, DEFAULT_DRIP_INTERVAL};
use crate::qp::QpConfig;
use crate::seed;
use crate::ultradian::{regular_feed, ExogenousInputs, ModelError, PhysState, UltradianParams, STATE_DIM};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("timeline {id} has {count} glucose measurement(s), at least 2 are needed")]
    TooFewMeasurements { id: String, count: usize },
    #[error("no forecast record falls after the MSE cutoff")]
    NoQualifyingRecords,
    #[error("MSE values must be finite and nonnegative with a positive baseline, got {constrained} / {unconstrained}")]
    InvalidMse { constrained: f64, unconstrained: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("twin generation failed: {0}")]
    Twin(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Unconstrained filter or one of the named constraint experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum ExperimentKind {
    #[default]
    Unconstrained,
    Constrained(ConstraintExperiment),
}

impl ExperimentKind {
    /// Baseline followed by the eleven constraint experiments.
    pub fn all() -> Vec<ExperimentKind> {
        std::iter::once(ExperimentKind::Unconstrained)
            .chain(ConstraintExperiment::ALL.into_iter().map(ExperimentKind::Constrained))
            .collect()
    }

    pub fn label(&self) -> &'static str {
        match self {
            ExperimentKind::Unconstrained => "unconstrained",
            ExperimentKind::Constrained(c) => c.as_str(),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ExperimentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unconstrained" => Ok(ExperimentKind::Unconstrained),
            other => other
                .parse()
                .map(ExperimentKind::Constrained)
                .map_err(|_| HarnessError::InvalidConfig(format!("unknown experiment {other:?}"))),
        }
    }
}

impl Serialize for ExperimentKind {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for ExperimentKind {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Where MSE accumulation starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MseCutoff {
    /// Records at least `minutes` after admission.
    Time { minutes: f64 },
    /// Records from the `count`-th measurement on (0-based).
    Count { count: usize },
}

impl Default for MseCutoff {
    fn default() -> Self {
        MseCutoff::Time { minutes: 1440.0 }
    }
}

impl MseCutoff {
    fn qualifies(&self, index: usize, t: f64, admission: f64) -> bool {
        match *self {
            MseCutoff::Time { minutes } => t - admission >= minutes,
            MseCutoff::Count { count } => index >= count,
        }
    }
}

/// Diagonal process and measurement noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Measurement variance `Γ` in (mg/dl)².
    pub obs_var: f64,
    /// Per-step standard deviations of `I_p, I_i, G, h_1, h_2, h_3` (model units).
    pub state_std: [f64; STATE_DIM],
    /// Per-step standard deviation of each estimated parameter, relative to nominal.
    pub param_rel_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { obs_var: 25.0, state_std: [1.0, 2.0, 150.0, 1.0, 1.0, 1.0], param_rel_std: 0.005 }
    }
}

impl NoiseConfig {
    pub fn spec(&self, selection: &ParameterSelection, base: &UltradianParams) -> NoiseSpec {
        let dim = selection.augmented_dim();
        let mut sigma = DMatrix::zeros(dim, dim);
        for (i, s) in self.state_std.iter().enumerate() {
            sigma[(i, i)] = s * s;
        }
        for (j, &name) in selection.names().iter().enumerate() {
            let s = self.param_rel_std * base.get(name);
            sigma[(STATE_DIM + j, STATE_DIM + j)] = s * s;
        }
        NoiseSpec { process_cov: sigma, obs_var: self.obs_var }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub selection: ParameterSelection,
    pub particles: usize,
    pub experiment: ExperimentKind,
    pub inclusion: DataInclusion,
    pub noise: NoiseConfig,
    pub integrator: IntegratorConfig,
    pub filter: FilterOptions,
    pub init: InitSpread,
    pub insulin_units: InsulinUnits,
    pub qp: QpConfig,
    pub mse_cutoff: MseCutoff,
    /// Pulse spacing (min) for IV glucose drips.
    pub drip_interval: f64,
    /// A step in which more than this fraction of particles fail to
    /// propagate aborts the run.
    pub max_failed_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            selection: ParameterSelection::houlihan(),
            particles: 50,
            experiment: ExperimentKind::Unconstrained,
            inclusion: DataInclusion::default(),
            noise: NoiseConfig::default(),
            integrator: IntegratorConfig::default(),
            filter: FilterOptions::default(),
            init: InitSpread::default(),
            insulin_units: InsulinUnits::default(),
            qp: QpConfig::default(),
            mse_cutoff: MseCutoff::default(),
            drip_interval: DEFAULT_DRIP_INTERVAL,
            max_failed_fraction: 0.5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.particles < 2 {
            return Err(HarnessError::InvalidConfig(format!("need at least 2 particles, got {}", self.particles)));
        }
        if !(self.drip_interval.is_finite() && self.drip_interval > 0.0) {
            return Err(HarnessError::InvalidConfig("drip_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failed_fraction) {
            return Err(HarnessError::InvalidConfig("max_failed_fraction must lie in [0, 1]".into()));
        }
        self.integrator.validate()?;
        Ok(())
    }

    pub fn constraints(&self, base: &UltradianParams) -> Result<Option<ConstraintSet>, HarnessError> {
        match self.experiment {
            ExperimentKind::Unconstrained => Ok(None),
            ExperimentKind::Constrained(c) => Ok(Some(c.constraints(&self.selection, base, self.insulin_units)?)),
        }
    }
}

/// What the filter knew at one measurement time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub t: f64,
    pub y: f64,
    pub forecast: ForecastSummary,
    /// Posterior means of the estimated parameters.
    pub param_mean: Vec<f64>,
    /// Forecast particles outside the constraint set.
    pub forecast_violations: usize,
    /// Particles replaced after failed propagation.
    pub replaced: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseSummary {
    pub mean: f64,
    pub sum: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub patient: String,
    pub experiment: ExperimentKind,
    pub selection: ParameterSelection,
    pub param_names: Vec<String>,
    pub particles: usize,
    pub seed: u64,
    pub admission: f64,
    pub mse_cutoff: MseCutoff,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
    pub replacements: usize,
    /// Largest constraint violation over all posterior particles and steps.
    pub max_posterior_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub records: Vec<ForecastRecord>,
    pub mse: Option<MseSummary>,
    /// Running sum of squared residuals over qualifying records, one entry per record.
    pub cumulative: Vec<f64>,
    pub metadata: RunMetadata,
}

/// Sum and mean of squared forecast residuals over qualifying records.
pub fn mse_summary(records: &[ForecastRecord], admission: f64, cutoff: MseCutoff) -> Result<MseSummary, HarnessError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, r) in records.iter().enumerate() {
        if cutoff.qualifies(i, r.t, admission) {
            let e = r.y - r.forecast.mean;
            sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        return Err(HarnessError::NoQualifyingRecords);
    }
    Ok(MseSummary { mean: sum / count as f64, sum, count })
}

/// Mean squared forecast residual over records at least 24 h after admission.
pub fn mse_after_24h(records: &[ForecastRecord], admission: f64) -> Result<f64, HarnessError> {
    mse_summary(records, admission, MseCutoff::default()).map(|m| m.mean)
}

fn cumulative_curve(records: &[ForecastRecord], admission: f64, cutoff: MseCutoff) -> Vec<f64> {
    let mut sum = 0.0;
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if cutoff.qualifies(i, r.t, admission) {
                let e = r.y - r.forecast.mean;
                sum += e * e;
            }
            sum
        })
        .collect()
}

/// Effect of constraints on forecast error, by `ω = MSE(constrained)/MSE(unconstrained)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaCategory {
    /// ω ≥ 1.1
    Harm,
    /// 0.9 ≤ ω < 1.1
    NoChange,
    /// 0.6 ≤ ω < 0.9
    Improvement,
    /// ω < 0.6
    SubstantialImprovement,
}

impl OmegaCategory {
    pub const ALL: [OmegaCategory; 4] =
        [OmegaCategory::Harm, OmegaCategory::NoChange, OmegaCategory::Improvement, OmegaCategory::SubstantialImprovement];

    pub fn of(omega: f64) -> Self {
        if omega >= 1.1 {
            OmegaCategory::Harm
        } else if omega >= 0.9 {
            OmegaCategory::NoChange
        } else if omega >= 0.6 {
            OmegaCategory::Improvement
        } else {
            OmegaCategory::SubstantialImprovement
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OmegaCategory::Harm => "harm",
            OmegaCategory::NoChange => "no_change",
            OmegaCategory::Improvement => "improvement",
            OmegaCategory::SubstantialImprovement => "substantial_improvement",
        }
    }
}

pub fn omega_ratio(mse_constrained: f64, mse_unconstrained: f64) -> Result<(f64, OmegaCategory), HarnessError> {
    let ok = |x: f64| x.is_finite() && x >= 0.0;
    if !ok(mse_constrained) || !ok(mse_unconstrained) || mse_unconstrained == 0.0 {
        return Err(HarnessError::InvalidMse { constrained: mse_constrained, unconstrained: mse_unconstrained });
    }
    let w = mse_constrained / mse_unconstrained;
    Ok((w, OmegaCategory::of(w)))
}

/// Per-step view of a run, for diagnostics and tests.
pub struct StepView<'a> {
    pub index: usize,
    pub t: f64,
    pub y: f64,
    pub prediction: &'a Prediction,
    pub posterior: &'a Ensemble,
    pub constraints: Option<&'a ConstraintSet>,
}

pub fn run_experiment(tl: &PatientTimeline, cfg: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    run_experiment_observed(tl, cfg, |_| {})
}

/// [`run_experiment`], calling `observe` after every assimilation.
pub fn run_experiment_observed<F: FnMut(&StepView<'_>)>(
    tl: &PatientTimeline,
    cfg: &ExperimentConfig,
    mut observe: F,
) -> Result<ExperimentResult, HarnessError> {
    cfg.validate()?;
    let tl = apply_inclusion(tl, cfg.inclusion);
    let exo = to_exogenous_with(&tl, cfg.drip_interval)?;
    let meas = &exo.measurements;
    if meas.len() < 2 {
        return Err(HarnessError::TooFewMeasurements { id: tl.id().to_string(), count: meas.len() });
    }
    let base = UltradianParams::nominal();
    let sel = &cfg.selection;
    let constraints = cfg.constraints(&base)?;
    let analysis: Box<dyn Analysis> = match &constraints {
        None => Box::new(KalmanAnalysis),
        Some(set) => Box::new(ConstrainedAnalysis { constraints: set.clone(), qp: cfg.qp }),
    };
    let dynamics = UltradianDynamics {
        base,
        selection: sel.clone(),
        inputs: Arc::new(exo.inputs),
        integrator: cfg.integrator.clone(),
    };
    let model = MeasurementModel::glucose(sel, &base);
    let noise = cfg.noise.spec(sel, &base);
    let mut ens = init_ensemble(sel, &base, meas[0].y, cfg.particles, &cfg.init, seed::derive(cfg.seed, seed::STREAM_INIT, 0))?;

    let mut records = Vec::with_capacity(meas.len());
    let mut replacements = 0usize;
    let mut max_violation = 0.0f64;
    let mut aborted = None;
    let mut t_prev = meas[0].t;
    for (i, m) in meas.iter().enumerate() {
        let step_seed = seed::derive(cfg.seed, seed::STREAM_STEP, i as u64);
        // the first measurement is forecast by the initial ensemble itself
        let pred = if i == 0 {
            Prediction::from_ensemble(ens.clone(), cfg.filter.covariance)
        } else {
            match predict(&ens, &dynamics, t_prev, m.t, &noise, step_seed, &cfg.filter) {
                Ok(p) => p,
                Err(FilterError::EnsembleCollapse { failed, total, first }) => {
                    aborted = Some(format!("t={}: {failed} of {total} particles failed: {first}", m.t));
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        };
        if pred.replaced.len() as f64 > cfg.max_failed_fraction * cfg.particles as f64 {
            aborted = Some(format!("t={}: {} of {} particles failed to propagate", m.t, pred.replaced.len(), cfg.particles));
            break;
        }
        replacements += pred.replaced.len();
        let forecast = pred.forecast(&model);
        let forecast_violations = constraints
            .as_ref()
            .map_or(0, |c| violation_stats(&pred.ensemble, c, 0.0).particles_violating);
        let post = analysis.update(&pred, m.y, &model, noise.obs_var, step_seed, &cfg.filter)?;
        if let Some(c) = &constraints {
            max_violation = max_violation.max(violation_stats(&post, c, 0.0).max_violation);
        }
        let mean = post.mean();
        records.push(ForecastRecord {
            t: m.t,
            y: m.y,
            forecast,
            param_mean: mean.as_slice()[STATE_DIM..].to_vec(),
            forecast_violations,
            replaced: pred.replaced.len(),
        });
        observe(&StepView { index: i, t: m.t, y: m.y, prediction: &pred, posterior: &post, constraints: constraints.as_ref() });
        ens = post;
        t_prev = m.t;
    }
    if let Some(reason) = &aborted {
        warn!("{} / {}: run aborted: {reason}", tl.id(), cfg.experiment);
    }

    let mse = mse_summary(&records, exo.admission, cfg.mse_cutoff).ok();
    let cumulative = cumulative_curve(&records, exo.admission, cfg.mse_cutoff);
    Ok(ExperimentResult {
        records,
        mse,
        cumulative,
        metadata: RunMetadata {
            patient: tl.id().to_string(),
            experiment: cfg.experiment,
            selection: sel.clone(),
            param_names: sel.names().iter().map(|n| n.as_str().to_string()).collect(),
            particles: cfg.particles,
            seed: cfg.seed,
            admission: exo.admission,
            mse_cutoff: cfg.mse_cutoff,
            aborted,
            replacements,
            max_posterior_violation: max_violation,
        },
    })
}

/// ω of one constrained experiment against the unconstrained baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaEntry {
    pub experiment: ConstraintExperiment,
    pub mse_constrained: Option<f64>,
    pub mse_unconstrained: Option<f64>,
    pub omega: Option<f64>,
    pub category: Option<OmegaCategory>,
}

/// Baseline plus the eleven constraint experiments on one patient.
#[derive(Debug, Clone)]
pub struct MatrixResult {
    pub baseline: ExperimentResult,
    pub experiments: Vec<ExperimentResult>,
    pub omega: Vec<OmegaEntry>,
}

pub fn omega_entry(experiment: ConstraintExperiment, constrained: &ExperimentResult, baseline: &ExperimentResult) -> OmegaEntry {
    let mc = constrained.mse.filter(|_| constrained.metadata.aborted.is_none()).map(|m| m.mean);
    let mu = baseline.mse.filter(|_| baseline.metadata.aborted.is_none()).map(|m| m.mean);
    let ratio = match (mc, mu) {
        (Some(c), Some(u)) => omega_ratio(c, u).ok(),
        _ => None,
    };
    OmegaEntry {
        experiment,
        mse_constrained: mc,
        mse_unconstrained: mu,
        omega: ratio.map(|r| r.0),
        category: ratio.map(|r| r.1),
    }
}

/// Runs the baseline and all constraint experiments with the same seed.
pub fn run_constraint_matrix(tl: &PatientTimeline, base_cfg: &ExperimentConfig) -> Result<MatrixResult, HarnessError> {
    let results = ExperimentKind::all()
        .into_par_iter()
        .map(|kind| run_experiment(tl, &ExperimentConfig { experiment: kind, ..base_cfg.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let mut it = results.into_iter();
    let baseline = it.next().expect("baseline is first");
    let experiments: Vec<ExperimentResult> = it.collect();
    let omega = ConstraintExperiment::ALL
        .iter()
        .zip(&experiments)
        .map(|(&e, r)| omega_entry(e, r, &baseline))
        .collect();
    Ok(MatrixResult { baseline, experiments, omega })
}

/// ω values across patients, with the fraction of patients per category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaReport {
    /// `(patient, entries)`
    pub patients: Vec<(String, Vec<OmegaEntry>)>,
}

impl OmegaReport {
    pub fn new(patients: Vec<(String, Vec<OmegaEntry>)>) -> Self {
        OmegaReport { patients }
    }

    pub fn omegas(&self, experiment: ConstraintExperiment) -> Vec<f64> {
        self.patients
            .iter()
            .filter_map(|(_, es)| es.iter().find(|e| e.experiment == experiment).and_then(|e| e.omega))
            .collect()
    }

    /// Fraction of patients with a defined ω that fall in `category`.
    pub fn fraction(&self, experiment: ConstraintExperiment, category: OmegaCategory) -> Option<f64> {
        let ws = self.omegas(experiment);
        if ws.is_empty() {
            return None;
        }
        Some(ws.iter().filter(|&&w| OmegaCategory::of(w) == category).count() as f64 / ws.len() as f64)
    }

    pub fn median(&self, experiment: ConstraintExperiment) -> Option<f64> {
        median(self.omegas(experiment))
    }

    /// Category rows by experiment columns, as a CSV table.
    pub fn fractions_csv(&self) -> String {
        let mut out = String::from("category");
        for e in ConstraintExperiment::ALL {
            out.push(',');
            out.push_str(e.as_str());
        }
        out.push('\n');
        for c in OmegaCategory::ALL {
            out.push_str(c.label());
            for e in ConstraintExperiment::ALL {
                out.push(',');
                if let Some(f) = self.fraction(e, c) {
                    out.push_str(&f.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    /// One row per patient and experiment.
    pub fn entries_csv(&self) -> String {
        let mut out = String::from("patient,experiment,mse_constrained,mse_unconstrained,omega,category\n");
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (p, es) in &self.patients {
            for e in es {
                out.push_str(&format!(
                    "{p},{},{},{},{},{}\n",
                    e.experiment,
                    opt(e.mse_constrained),
                    opt(e.mse_unconstrained),
                    opt(e.omega),
                    e.category.map(|c| c.label()).unwrap_or("")
                ));
            }
        }
        out
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

/// Synthetic patient settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinSpec {
    pub days: f64,
    /// Mean glucose appearance rate of the tube feed (mg/min).
    pub feed_rate: f64,
    /// Spacing of feed pulses (min).
    pub feed_interval: f64,
    /// Mean spacing of glucose measurements (min).
    pub sample_mean: f64,
    /// Measurement spacing is uniform on `sample_mean · [1 - jitter, 1 + jitter]`.
    pub sample_jitter: f64,
    /// Measurement noise standard deviation (mg/dl).
    pub noise_std: f64,
    /// Simulated time before admission, so the record starts on the attractor.
    pub burn_in: f64,
    /// True parameters are drawn uniformly within `nominal · (1 ± spread)`.
    pub param_spread: f64,
    /// Parameters that are perturbed; the rest stay nominal.
    pub perturbed: ParameterSelection,
    /// If set, truths whose insulin states leave this range are redrawn.
    pub insulin_window: Option<(f64, f64)>,
    pub max_draws: usize,
}

impl Default for TwinSpec {
    fn default() -> Self {
        TwinSpec {
            days: 4.0,
            feed_rate: 100.0,
            feed_interval: 10.0,
            sample_mean: 90.0,
            sample_jitter: 0.5,
            noise_std: 5.0,
            burn_in: 2000.0,
            param_spread: 0.3,
            perturbed: ParameterSelection::houlihan(),
            insulin_window: None,
            max_draws: 200,
        }
    }
}

/// Hidden state at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthPoint {
    pub t: f64,
    pub state: PhysState,
    /// Noise-free glucose (mg/dl).
    pub glucose: f64,
}

#[derive(Debug, Clone)]
pub struct TwinPatient {
    pub timeline: PatientTimeline,
    pub params: UltradianParams,
    /// Truth at every measurement time.
    pub truth: Vec<TruthPoint>,
}

fn twin_start() -> PhysState {
    PhysState::new(100.0, 250.0, 12000.0, 80.0, 80.0, 80.0)
}

/// Simulates a patient with parameters `params` and records noisy glucose
/// measurements; admission is at t = 0.
pub fn generate_twin_patient(
    id: &str,
    params: &UltradianParams,
    spec: &TwinSpec,
    integrator: &IntegratorConfig,
    seed_value: u64,
) -> Result<TwinPatient, HarnessError> {
    if !(spec.noise_std >= 0.0 && spec.days > 0.0 && spec.sample_mean > 0.0 && spec.feed_interval > 0.0 && spec.burn_in >= 0.0) {
        return Err(HarnessError::InvalidConfig("twin spec needs noise_std >= 0 and positive durations".into()));
    }
    if !(0.0..1.0).contains(&spec.sample_jitter) {
        return Err(HarnessError::InvalidConfig("sample_jitter must lie in [0, 1)".into()));
    }
    params.validate()?;
    let end = spec.days * 1440.0;
    // simulation clock starts burn_in minutes before admission
    let shift = spec.burn_in;
    let feeds = regular_feed(0.0, shift + end, spec.feed_interval, spec.feed_rate);
    let inputs = ExogenousInputs::new(feeds.clone(), vec![])?;

    let mut rng = seed::rng(seed_value, seed::STREAM_TWIN, 0);
    let mut times = vec![0.0];
    loop {
        let u: f64 = rng.gen_range(-spec.sample_jitter..=spec.sample_jitter);
        let next = times[times.len() - 1] + (spec.sample_mean * (1.0 + u)).round().max(1.0);
        if next > end {
            break;
        }
        times.push(next);
    }
    let v_adm = integrate_between(&twin_start(), params, &inputs, 0.0, shift, integrator)?;
    let sim_times: Vec<f64> = times.iter().map(|t| t + shift).collect();
    let states = if shift > 0.0 {
        solution_operator(&sim_times, &v_adm, params, &inputs, integrator)?
    } else {
        solution_operator(&sim_times, &twin_start(), params, &inputs, integrator)?
    };
    let truth: Vec<TruthPoint> = times
        .iter()
        .zip(&states)
        .map(|(&t, s)| TruthPoint { t, state: *s, glucose: params.glucose_mg_per_dl(s.g) })
        .collect();

    let mut events: Vec<PatientEvent> = feeds
        .iter()
        .filter(|f| f.t >= shift)
        .map(|f| PatientEvent { t_min: f.t - shift, kind: EventKind::TubeFeed, value: f.m })
        .collect();
    for p in &truth {
        let z: f64 = rng.sample(StandardNormal);
        let y = (p.glucose + spec.noise_std * z).max(0.0);
        events.push(PatientEvent { t_min: p.t, kind: EventKind::GlucoseMeas, value: y });
    }
    Ok(TwinPatient { timeline: PatientTimeline::new(id, events)?, params: *params, truth })
}

fn insulin_inside(twin: &TwinPatient, window: (f64, f64)) -> bool {
    twin.truth.iter().all(|p| {
        let inside = |x: f64| x >= window.0 && x <= window.1;
        inside(p.state.i_p) && inside(p.state.i_i)
    })
}

/// One twin with parameters drawn around nominal.
pub fn draw_twin_patient(
    id: &str,
    spec: &TwinSpec,
    integrator: &IntegratorConfig,
    seed_value: u64,
) -> Result<TwinPatient, HarnessError> {
    let nominal = UltradianParams::nominal();
    let mut last_err = None;
    for draw in 0..spec.max_draws.max(1) {
        let mut rng = seed::rng(seed_value, seed::STREAM_TWIN, 1 + draw as u64);
        let mut params = nominal;
        for &name in spec.perturbed.names() {
            let u: f64 = if spec.param_spread > 0.0 { rng.gen_range(-spec.param_spread..=spec.param_spread) } else { 0.0 };
            params.set(name, nominal.get(name) * (1.0 + u));
        }
        match generate_twin_patient(id, &params, spec, integrator, seed::derive(seed_value, seed::STREAM_TWIN, draw as u64)) {
            Ok(twin) => match spec.insulin_window {
                Some(w) if !insulin_inside(&twin, w) => last_err = Some("insulin left the window".to_string()),
                _ => return Ok(twin),
            },
            Err(e) => last_err = Some(e.to_string()),
        }
    }
    Err(HarnessError::Twin(format!(
        "{id}: no acceptable draw in {} attempts ({})",
        spec.max_draws,
        last_err.unwrap_or_default()
    )))
}

/// `n` twins named `twin01`, `twin02`, ...
pub fn generate_twin_cohort(n: usize, spec: &TwinSpec, integrator: &IntegratorConfig, seed_value: u64) -> Result<Vec<TwinPatient>, HarnessError> {
    let width = n.to_string().len().max(2);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("twin{:0width$}", i + 1);
            draw_twin_patient(&id, spec, integrator, seed::derive(seed_value, seed::hash_str(&id), 0))
        })
        .collect()
}

/// `truth.csv`: hidden states at the measurement times.
pub fn write_truth(twin: &TwinPatient, path: &Path) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_min", "I_p", "I_i", "G", "h1", "h2", "h3", "glucose_mg_dl"])?;
    for p in &twin.truth {
        let s = p.state.to_array();
        let mut row = vec![p.t.to_string()];
        row.extend(s.iter().map(|x| x.to_string()));
        row.push(p.glucose.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Histogram bin width (mg/dl) used in `hist.csv`.
pub const HIST_BIN: f64 = 10.0;

/// Writes `forecasts.csv`, `params.csv`, `mse.csv`, `hist.csv` and
/// `summary.json` into `dir`.
pub fn export_results(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let recs = &result.records;
    let meta = &result.metadata;

    let path = dir.join("forecasts.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t_min", "y", "forecast_mean", "forecast_std", "forecast_min", "forecast_max", "forecast_violations", "replaced"])?;
    for r in recs {
        w.write_record([
            r.t.to_string(),
            r.y.to_string(),
            r.forecast.mean.to_string(),
            r.forecast.std.to_string(),
            r.forecast.min.to_string(),
            r.forecast.max.to_string(),
            r.forecast_violations.to_string(),
            r.replaced.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("params.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["t_min".to_string()];
    header.extend(meta.param_names.iter().cloned());
    w.write_record(&header)?;
    for r in recs {
        let mut row = vec![r.t.to_string()];
        row.extend(r.param_mean.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("mse.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["t_min", "squared_error", "qualifies", "cumulative_sum"])?;
    for (i, (r, cum)) in recs.iter().zip(&result.cumulative).enumerate() {
        let e = r.y - r.forecast.mean;
        let q = meta.mse_cutoff.qualifies(i, r.t, meta.admission);
        w.write_record([r.t.to_string(), (e * e).to_string(), u8::from(q).to_string(), cum.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("hist.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["bin_low", "bin_high", "measurements", "forecasts"])?;
    for (lo, ny, nf) in histogram(recs) {
        w.write_record([lo.to_string(), (lo + HIST_BIN).to_string(), ny.to_string(), nf.to_string()])?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("summary.json");
    let summary = serde_json::json!({
        "metadata": meta,
        "records": recs.len(),
        "mse": result.mse,
    });
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    f.write_all(text.as_bytes()).and_then(|_| f.write_all(b"\n")).map_err(io_err(&path))?;
    Ok(())
}

/// Counts of measurements and forecast means per `HIST_BIN`-wide bin.
fn histogram(recs: &[ForecastRecord]) -> Vec<(f64, usize, usize)> {
    let values = recs.iter().flat_map(|r| [r.y, r.forecast.mean]).filter(|v| v.is_finite());
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return Vec::new();
    }
    let first = (lo / HIST_BIN).floor() as i64;
    let last = (hi / HIST_BIN).floor() as i64;
    let mut bins: Vec<(f64, usize, usize)> = (first..=last).map(|b| (b as f64 * HIST_BIN, 0, 0)).collect();
    let bin = |v: f64| ((v / HIST_BIN).floor() as i64 - first) as usize;
    for r in recs {
        if r.y.is_finite() {
            bins[bin(r.y)].1 += 1;
        }
        if r.forecast.mean.is_finite() {
            bins[bin(r.forecast.mean)].2 += 1;
        }
    }
    bins
}

/// Writes a [`MatrixResult`] for one patient under `dir/<experiment>/` and
/// `dir/omega.csv`.
pub fn export_matrix(m: &MatrixResult, dir: &Path) -> Result<(), HarnessError> {
    export_results(&m.baseline, &dir.join(m.baseline.metadata.experiment.label()))?;
    for r in &m.experiments {
        export_results(r, &dir.join(r.metadata.experiment.label()))?;
    }
    let report = OmegaReport::new(vec![(m.baseline.metadata.patient.clone(), m.omega.clone())]);
    let path = dir.join("omega.csv");
    fs::write(&path, report.entries_csv()).map_err(io_err(&path))?;
    Ok(())
}

/// Reads `forecasts.csv` back as records (parameter means left empty).
pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRecord>, HarnessError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64, HarnessError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| HarnessError::InvalidConfig(format!("{}: bad number in column {i}", path.display())))
        };
        out.push(ForecastRecord {
            t: f(0)?,
            y: f(1)?,
            forecast: ForecastSummary { mean: f(2)?, std: f(3)?, min: f(4)?, max: f(5)? },
            param_mean: Vec::new(),
            forecast_violations: f(6)? as usize,
            replaced: f(7)? as usize,
        });
    }
    Ok(out)
}

pub fn log_result(result: &ExperimentResult) {
    let m = &result.metadata;
    match result.mse {
        Some(s) => info!("{} / {}: MSE {:.3} over {} records", m.patient, m.experiment, s.mean, s.count),
        None => info!("{} / {}: no qualifying records", m.patient, m.experiment),
    }
}
