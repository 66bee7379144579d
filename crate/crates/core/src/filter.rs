//! Joint state-parameter ensemble Kalman filter.
//!
//! Particles are columns of a `dim x N` matrix. For the ultradian model the
//! augmented layout is `[I_p, I_i, G, h_1, h_2, h_3, θ_1, ..., θ_p]` where the
//! `θ` follow the order of a [`ParameterSelection`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::integrator::{integrate_between, IntegrateError, IntegratorConfig};
use crate::qp::QpError;
use crate::seed;
use crate::ultradian::{ExogenousInputs, ModelError, ParamName, PhysState, UltradianParams, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PropagateError {
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite particle state")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("invalid parameter selection: {0}")]
    InvalidSelection(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("an ensemble needs at least 2 particles, got {0}")]
    TooFewParticles(usize),
    #[error("invalid noise specification: {0}")]
    InvalidNoise(String),
    #[error("{failed} of {total} particles failed to propagate: {first}")]
    EnsembleCollapse { failed: usize, total: usize, first: PropagateError },
    #[error("innovation variance {0} is not invertible")]
    SingularInnovation(f64),
    #[error("constrained update of particle {particle} failed: {source}")]
    Qp { particle: usize, source: QpError },
    #[error("invalid constraints: {0}")]
    Constraint(String),
}

/// Ordered subset of model parameters estimated alongside the state.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParameterSelection {
    names: Vec<ParamName>,
}

impl ParameterSelection {
    pub fn new(names: Vec<ParamName>) -> Result<Self, FilterError> {
        if names.is_empty() {
            return Err(FilterError::InvalidSelection("selection is empty".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(FilterError::InvalidSelection(format!("duplicate parameter {n}")));
            }
        }
        Ok(ParameterSelection { names })
    }

    /// Eight-parameter set `(R_g, C_3, U_m, a_1, C_1, t_p, R_m, t_d)`.
    pub fn houlihan() -> Self {
        use ParamName::*;
        ParameterSelection { names: vec![Rg, C3, Um, A1, C1, Tp, Rm, Td] }
    }

    /// Five-parameter set `(R_g, C_3, a_1, C_1, t_d)`.
    pub fn restricted_houlihan() -> Self {
        use ParamName::*;
        ParameterSelection { names: vec![Rg, C3, A1, C1, Td] }
    }

    pub fn names(&self) -> &[ParamName] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: ParamName) -> Option<usize> {
        self.names.iter().position(|&n| n == name)
    }

    /// Augmented-state dimension for this selection.
    pub fn augmented_dim(&self) -> usize {
        STATE_DIM + self.names.len()
    }

    /// `base` with the selected parameters overwritten by `values`.
    pub fn apply(&self, base: &UltradianParams, values: &[f64]) -> UltradianParams {
        let mut p = *base;
        for (&name, &v) in self.names.iter().zip(values) {
            p.set(name, v);
        }
        p
    }

    pub fn nominal_values(&self, base: &UltradianParams) -> Vec<f64> {
        self.names.iter().map(|&n| base.get(n)).collect()
    }
}

impl fmt::Display for ParameterSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::houlihan() {
            return f.write_str("PH");
        }
        if *self == Self::restricted_houlihan() {
            return f.write_str("PRH");
        }
        let names: Vec<&str> = self.names.iter().map(|n| n.as_str()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for ParameterSelection {
    type Err = FilterError;

    /// `PH`, `PRH`, or a comma-separated list of parameter names.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "PH" | "P_H" => Ok(Self::houlihan()),
            "PRH" | "P_RH" => Ok(Self::restricted_houlihan()),
            list => {
                let names = list
                    .split(',')
                    .map(|n| n.trim().parse::<ParamName>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| FilterError::InvalidSelection(e.to_string()))?;
                Self::new(names)
            }
        }
    }
}

impl Serialize for ParameterSelection {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ParameterSelection {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Physical state plus the estimated parameter sub-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub phys: PhysState,
    pub params: Vec<f64>,
}

impl AugmentedState {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            STATE_DIM + self.params.len(),
            self.phys.to_array().into_iter().chain(self.params.iter().copied()),
        )
    }

    pub fn from_vector(v: &DVector<f64>, selection: &ParameterSelection) -> Result<Self, FilterError> {
        if v.len() != selection.augmented_dim() {
            return Err(FilterError::Dimension(format!(
                "augmented state has {} entries, selection needs {}",
                v.len(),
                selection.augmented_dim()
            )));
        }
        Ok(AugmentedState {
            phys: PhysState::from_slice(&v.as_slice()[..STATE_DIM]),
            params: v.as_slice()[STATE_DIM..].to_vec(),
        })
    }
}

/// One-interval solution operator acting on a particle.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn propagate(&self, state: &DVector<f64>, t0: f64, t1: f64) -> Result<DVector<f64>, PropagateError>;
}

/// Ultradian model on the augmented state; parameters are held constant
/// within a propagation.
#[derive(Debug, Clone)]
pub struct UltradianDynamics {
    pub base: UltradianParams,
    pub selection: ParameterSelection,
    pub inputs: Arc<ExogenousInputs>,
    pub integrator: IntegratorConfig,
}

impl Dynamics for UltradianDynamics {
    fn dim(&self) -> usize {
        self.selection.augmented_dim()
    }

    fn propagate(&self, state: &DVector<f64>, t0: f64, t1: f64) -> Result<DVector<f64>, PropagateError> {
        let s = state.as_slice();
        let params = self.selection.apply(&self.base, &s[STATE_DIM..]);
        params.validate()?;
        let v0 = PhysState::from_slice(&s[..STATE_DIM]);
        if !v0.is_finite() {
            return Err(PropagateError::NonFinite);
        }
        let v1 = integrate_between(&v0, &params, &self.inputs, t0, t1, &self.integrator)?;
        let mut out = state.clone();
        out.as_mut_slice()[..STATE_DIM].copy_from_slice(&v1.to_array());
        Ok(out)
    }
}

/// Time-invariant affine map `v -> M v + c` applied once per interval.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Dynamics for LinearDynamics {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn propagate(&self, state: &DVector<f64>, _t0: f64, _t1: f64) -> Result<DVector<f64>, PropagateError> {
        Ok(&self.transition * state + &self.offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceNorm {
    /// `1/N`
    #[default]
    Population,
    /// `1/(N-1)`
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Each particle assimilates `y + η_n`, `η_n ~ N(0, Γ)`.
    #[default]
    Perturbed,
    /// All particles assimilate the same `y`.
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterOptions {
    pub observations: ObservationMode,
    pub covariance: CovarianceNorm,
    /// Ridge `λ = ridge · trace(Ĉ)/dim` added before forming the gain.
    pub ridge: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            observations: ObservationMode::Perturbed,
            covariance: CovarianceNorm::Population,
            ridge: 1e-8,
        }
    }
}

/// Process noise `Σ` on the augmented state and scalar measurement noise `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub process_cov: DMatrix<f64>,
    pub obs_var: f64,
}

impl NoiseSpec {
    pub fn validate(&self, dim: usize) -> Result<(), FilterError> {
        let s = &self.process_cov;
        if s.nrows() != dim || s.ncols() != dim {
            return Err(FilterError::Dimension(format!("process covariance is {}x{}, state is {dim}", s.nrows(), s.ncols())));
        }
        if !(self.obs_var.is_finite() && self.obs_var > 0.0) {
            return Err(FilterError::InvalidNoise(format!("measurement variance must be positive, got {}", self.obs_var)));
        }
        check_psd(s).map_err(FilterError::InvalidNoise)
    }
}

fn check_psd(m: &DMatrix<f64>) -> Result<(), String> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err("covariance has non-finite entries".into());
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err("covariance is not symmetric".into());
    }
    let min_eig = m.clone().symmetric_eigenvalues().min();
    if min_eig < -1e-10 * scale {
        return Err(format!("covariance has negative eigenvalue {min_eig}"));
    }
    Ok(())
}

/// `L` with `L Lᵀ = m` for symmetric positive semidefinite `m`.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.clone().symmetric_eigen();
    let mut f = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Scalar glucose observation `y = scale · v[index]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub dim: usize,
    pub index: usize,
    pub scale: f64,
}

impl MeasurementModel {
    pub fn new(dim: usize, index: usize, scale: f64) -> Result<Self, FilterError> {
        if index >= dim || !(scale.is_finite() && scale != 0.0) {
            return Err(FilterError::Dimension(format!("measurement of component {index} (scale {scale}) in dimension {dim}")));
        }
        Ok(MeasurementModel { dim, index, scale })
    }

    /// Glucose concentration in mg/dl from the glucose mass component.
    pub fn glucose(selection: &ParameterSelection, base: &UltradianParams) -> Self {
        MeasurementModel { dim: selection.augmented_dim(), index: 2, scale: 1.0 / (10.0 * base.v_g) }
    }

    pub fn apply(&self, v: &DVector<f64>) -> f64 {
        self.scale * v[self.index]
    }

    pub fn row(&self) -> DVector<f64> {
        let mut h = DVector::zeros(self.dim);
        h[self.index] = self.scale;
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(states: DMatrix<f64>) -> Result<Self, FilterError> {
        if states.ncols() < 2 {
            return Err(FilterError::TooFewParticles(states.ncols()));
        }
        Ok(Ensemble { states })
    }

    pub fn from_particles(particles: &[DVector<f64>]) -> Result<Self, FilterError> {
        let Some(first) = particles.first() else {
            return Err(FilterError::TooFewParticles(0));
        };
        if particles.iter().any(|p| p.len() != first.len()) {
            return Err(FilterError::Dimension("particles differ in length".into()));
        }
        Self::new(DMatrix::from_columns(particles))
    }

    /// `n` draws from `N(mean, cov)`.
    pub fn sample_gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<Self, FilterError> {
        check_psd(cov).map_err(FilterError::InvalidNoise)?;
        let f = psd_factor(cov);
        let cols: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let mut rng = seed::rng(seed, seed::STREAM_INIT, i as u64);
                mean + &f * standard_normal(&mut rng, mean.len())
            })
            .collect();
        Self::from_particles(&cols)
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.states.column(i).into_owned()
    }

    pub fn particles(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.states.column_iter().map(|c| c.into_owned())
    }

    pub fn mean(&self) -> DVector<f64> {
        self.states.column_mean()
    }

    pub fn covariance(&self, norm: CovarianceNorm) -> DMatrix<f64> {
        let mean = self.mean();
        let mut dev = self.states.clone();
        for mut c in dev.column_iter_mut() {
            c -= &mean;
        }
        let denom = match norm {
            CovarianceNorm::Population => self.len() as f64,
            CovarianceNorm::Sample => (self.len() - 1) as f64,
        };
        let c = &dev * dev.transpose() / denom;
        0.5 * (&c + c.transpose())
    }
}

fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Forecast ensemble with its moments `m̂` and `Ĉ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ensemble: Ensemble,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Particles replaced after a failed propagation.
    pub replaced: Vec<usize>,
}

impl Prediction {
    /// Moments of an ensemble without propagating it.
    pub fn from_ensemble(ensemble: Ensemble, norm: CovarianceNorm) -> Self {
        let mean = ensemble.mean();
        let cov = ensemble.covariance(norm);
        Prediction { ensemble, mean, cov, replaced: Vec::new() }
    }

    pub fn forecast(&self, model: &MeasurementModel) -> ForecastSummary {
        let values: Vec<f64> = self.ensemble.particles().map(|p| model.apply(&p)).collect();
        let var = model.scale * model.scale * self.cov[(model.index, model.index)];
        ForecastSummary {
            mean: model.apply(&self.mean),
            std: var.max(0.0).sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Forecast of the measured quantity before the measurement is seen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Propagate every particle from `t0` to `t1` and add process noise.
pub fn predict<D: Dynamics + ?Sized>(
    ens: &Ensemble,
    dynamics: &D,
    t0: f64,
    t1: f64,
    noise: &NoiseSpec,
    step_seed: u64,
    opts: &FilterOptions,
) -> Result<Prediction, FilterError> {
    let dim = ens.dim();
    if dynamics.dim() != dim {
        return Err(FilterError::Dimension(format!("dynamics act on {} components, ensemble has {dim}", dynamics.dim())));
    }
    noise.validate(dim)?;
    let n = ens.len();
    let results: Vec<Result<DVector<f64>, PropagateError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let out = dynamics.propagate(&ens.particle(i), t0, t1)?;
            if out.iter().all(|x| x.is_finite()) {
                Ok(out)
            } else {
                Err(PropagateError::NonFinite)
            }
        })
        .collect();

    let ok: Vec<&DVector<f64>> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed: Vec<usize> = (0..n).filter(|&i| results[i].is_err()).collect();
    if ok.len() < 2 {
        let first = results.iter().find_map(|r| r.as_ref().err().cloned()).expect("at least one failure");
        return Err(FilterError::EnsembleCollapse { failed: failed.len(), total: n, first });
    }

    let mut states = DMatrix::zeros(dim, n);
    if failed.is_empty() {
        for (i, r) in results.iter().enumerate() {
            states.set_column(i, r.as_ref().expect("no failures"));
        }
    } else {
        let survivors = Ensemble::from_particles(&ok.iter().map(|v| (*v).clone()).collect::<Vec<_>>())?;
        let m = survivors.mean();
        let f = psd_factor(&survivors.covariance(opts.covariance));
        for (i, r) in results.iter().enumerate() {
            match r {
                Ok(v) => states.set_column(i, v),
                Err(e) => {
                    debug!("replacing particle {i}: {e}");
                    let mut rng = seed::rng(step_seed, seed::STREAM_REPLACEMENT, i as u64);
                    states.set_column(i, &(&m + &f * standard_normal(&mut rng, dim)));
                }
            }
        }
    }

    if noise.process_cov.iter().any(|&x| x != 0.0) {
        let f = psd_factor(&noise.process_cov);
        for i in 0..n {
            let mut rng = seed::rng(step_seed, seed::STREAM_PROCESS_NOISE, i as u64);
            let xi = &f * standard_normal(&mut rng, dim);
            let mut col = states.column_mut(i);
            col += xi;
        }
    }

    let mut pred = Prediction::from_ensemble(Ensemble::new(states)?, opts.covariance);
    pred.replaced = failed;
    Ok(pred)
}

/// `Ĉ + λ I` with `λ = ridge · trace(Ĉ) / dim`.
pub fn regularized_covariance(cov: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let dim = cov.nrows();
    let lambda = ridge * cov.trace() / dim as f64;
    let mut c = cov.clone();
    for i in 0..dim {
        c[(i, i)] += lambda;
    }
    c
}

/// Per-particle unconstrained minimizers of the update objective, together
/// with the regularized forecast covariance and the gain.
#[derive(Debug, Clone)]
pub struct KalmanTargets {
    pub targets: Vec<DVector<f64>>,
    /// Observation assimilated by each particle.
    pub observations: Vec<f64>,
    pub cov: DMatrix<f64>,
    pub gain: DVector<f64>,
    pub innovation_var: f64,
}

impl KalmanTargets {
    /// Posterior covariance `(I - K H) Ĉ`, the inverse Hessian of the update
    /// objective.
    pub fn posterior_cov(&self, model: &MeasurementModel) -> DMatrix<f64> {
        let hc = self.cov.row(model.index) * model.scale;
        let p = &self.cov - &self.gain * hc;
        0.5 * (&p + p.transpose())
    }
}

pub fn kalman_targets(
    pred: &Prediction,
    y: f64,
    model: &MeasurementModel,
    obs_var: f64,
    step_seed: u64,
    opts: &FilterOptions,
) -> Result<KalmanTargets, FilterError> {
    let dim = pred.ensemble.dim();
    if model.dim != dim || pred.cov.nrows() != dim {
        return Err(FilterError::Dimension(format!("measurement acts on {}, ensemble has {dim}", model.dim)));
    }
    if !(obs_var.is_finite() && obs_var > 0.0) {
        return Err(FilterError::InvalidNoise(format!("measurement variance must be positive, got {obs_var}")));
    }
    let cov = regularized_covariance(&pred.cov, opts.ridge);
    let s = model.scale * model.scale * cov[(model.index, model.index)] + obs_var;
    if !(s.is_finite() && s > 0.0) {
        return Err(FilterError::SingularInnovation(s));
    }
    let gain = cov.column(model.index) * (model.scale / s);
    let sd = obs_var.sqrt();
    let mut targets = Vec::with_capacity(pred.ensemble.len());
    let mut observations = Vec::with_capacity(pred.ensemble.len());
    for (i, v) in pred.ensemble.particles().enumerate() {
        let y_n = match opts.observations {
            ObservationMode::Shared => y,
            ObservationMode::Perturbed => {
                let mut rng = seed::rng(step_seed, seed::STREAM_OBSERVATION, i as u64);
                let eta: f64 = rng.sample(StandardNormal);
                y + sd * eta
            }
        };
        let innovation = y_n - model.apply(&v);
        targets.push(v + &gain * innovation);
        observations.push(y_n);
    }
    Ok(KalmanTargets { targets, observations, cov, gain, innovation_var: s })
}

/// Analysis step turning a forecast into a posterior ensemble.
pub trait Analysis: Sync {
    fn update(
        &self,
        pred: &Prediction,
        y: f64,
        model: &MeasurementModel,
        obs_var: f64,
        step_seed: u64,
        opts: &FilterOptions,
    ) -> Result<Ensemble, FilterError>;
}

/// The unconstrained Kalman update.
#[derive(Debug, Clone, Copy, Default)]
pub struct KalmanAnalysis;

impl Analysis for KalmanAnalysis {
    fn update(
        &self,
        pred: &Prediction,
        y: f64,
        model: &MeasurementModel,
        obs_var: f64,
        step_seed: u64,
        opts: &FilterOptions,
    ) -> Result<Ensemble, FilterError> {
        kalman_update(pred, y, model, obs_var, step_seed, opts)
    }
}

pub fn kalman_update(
    pred: &Prediction,
    y: f64,
    model: &MeasurementModel,
    obs_var: f64,
    step_seed: u64,
    opts: &FilterOptions,
) -> Result<Ensemble, FilterError> {
    let k = kalman_targets(pred, y, model, obs_var, step_seed, opts)?;
    Ensemble::from_particles(&k.targets)
}

/// `½ |y - H v|²_Γ + ½ |v - v̂|²_Ĉ`.
pub fn update_objective(
    v: &DVector<f64>,
    y: f64,
    model: &MeasurementModel,
    obs_var: f64,
    v_hat: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Option<f64> {
    let r = y - model.apply(v);
    let d = v - v_hat;
    let w = cov.clone().cholesky()?.solve(&d);
    Some(0.5 * r * r / obs_var + 0.5 * d.dot(&w))
}

/// Result of one forecast/assimilate cycle.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub t: f64,
    pub y: f64,
    pub forecast: ForecastSummary,
    pub prediction: Prediction,
    pub posterior: Ensemble,
}

/// Predict to the measurement time, record the forecast, then assimilate.
#[allow(clippy::too_many_arguments)]
pub fn assimilate_step<D: Dynamics + ?Sized, A: Analysis + ?Sized>(
    ens: &Ensemble,
    dynamics: &D,
    analysis: &A,
    t0: f64,
    t_meas: f64,
    y: f64,
    model: &MeasurementModel,
    noise: &NoiseSpec,
    step_seed: u64,
    opts: &FilterOptions,
) -> Result<StepOutcome, FilterError> {
    let prediction = predict(ens, dynamics, t0, t_meas, noise, step_seed, opts)?;
    let forecast = prediction.forecast(model);
    let posterior = analysis.update(&prediction, y, model, noise.obs_var, step_seed, opts)?;
    Ok(StepOutcome { t: t_meas, y, forecast, prediction, posterior })
}

/// Spread of the initial ensemble around nominal values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitSpread {
    /// Relative standard deviation of each estimated parameter.
    pub param_rel: f64,
    /// Relative standard deviation of glucose around the first measurement.
    pub glucose_rel: f64,
    /// Relative standard deviation of insulin and delay states.
    pub state_rel: f64,
    pub plasma_insulin: f64,
    pub interstitial_insulin: f64,
    pub delay: f64,
}

impl Default for InitSpread {
    fn default() -> Self {
        InitSpread {
            param_rel: 0.1,
            glucose_rel: 0.05,
            state_rel: 0.1,
            plasma_insulin: 100.0,
            interstitial_insulin: 250.0,
            delay: 100.0,
        }
    }
}

impl InitSpread {
    pub fn zero() -> Self {
        InitSpread { param_rel: 0.0, glucose_rel: 0.0, state_rel: 0.0, ..Self::default() }
    }
}

/// Initial ensemble at the nominal parameters, with glucose centered at the
/// first measurement.
pub fn init_ensemble(
    selection: &ParameterSelection,
    nominal: &UltradianParams,
    first_glucose_mg_dl: f64,
    n: usize,
    spread: &InitSpread,
    seed: u64,
) -> Result<Ensemble, FilterError> {
    if n < 2 {
        return Err(FilterError::TooFewParticles(n));
    }
    let g = nominal.glucose_mass(first_glucose_mg_dl);
    let centers: Vec<(f64, f64, bool)> = [
        (spread.plasma_insulin, spread.state_rel),
        (spread.interstitial_insulin, spread.state_rel),
        (g, spread.glucose_rel),
        (spread.delay, spread.state_rel),
        (spread.delay, spread.state_rel),
        (spread.delay, spread.state_rel),
    ]
    .into_iter()
    .map(|(c, r)| (c, r, false))
    .chain(selection.names().iter().map(|&name| (nominal.get(name), spread.param_rel, true)))
    .collect();
    let dim = centers.len();
    let particles: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut rng = seed::rng(seed, seed::STREAM_INIT, i as u64);
            DVector::from_iterator(
                dim,
                centers.iter().map(|&(c, rel, positive)| {
                    let sd = rel * c.abs();
                    if sd == 0.0 {
                        return c;
                    }
                    // parameters must stay positive for the model to be defined
                    for _ in 0..64 {
                        let z: f64 = rng.sample(StandardNormal);
                        let x = c + sd * z;
                        if !positive || x > 0.0 {
                            return x;
                        }
                    }
                    c
                }),
            )
        })
        .collect();
    Ensemble::from_particles(&particles)
}
