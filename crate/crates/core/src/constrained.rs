//! Constrained ensemble update: every particle is projected onto a polytope
//! in the metric of the posterior covariance.
//!
//! For a scalar observation the update objective
//! `½|y - Hv|²_Γ + ½|v - v̂|²_Ĉ` equals `½|v - v_u|²_P` plus a constant, where
//! `v_u` is the unconstrained Kalman update and `P = (I - KH)Ĉ`. The QP is
//! therefore solved from the factor `chol(P)` without inverting `Ĉ`.

use std::fmt;
use std::str::FromStr;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::filter::{kalman_targets, Analysis, Ensemble, FilterError, FilterOptions, MeasurementModel, ParameterSelection, Prediction};
use crate::qp::{solve_with_factor, LinearConstraints, QpConfig, QpError};
use crate::ultradian::{ParamName, UltradianParams, STATE_DIM};

/// Linear constraints on the augmented state, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    linear: LinearConstraints,
    eq_labels: Vec<String>,
    ineq_labels: Vec<String>,
}

impl ConstraintSet {
    pub fn builder(dim: usize) -> ConstraintSetBuilder {
        ConstraintSetBuilder { dim, eq: Vec::new(), ineq: Vec::new() }
    }

    /// No rows at all; the constrained update reduces to the Kalman update.
    pub fn unconstrained(dim: usize) -> Self {
        ConstraintSet { linear: LinearConstraints::none(dim), eq_labels: Vec::new(), ineq_labels: Vec::new() }
    }

    /// Wraps raw constraints, labelling rows by index.
    pub fn from_linear(linear: LinearConstraints) -> Result<Self, FilterError> {
        let eq_labels = (0..linear.n_eq()).map(|i| format!("eq{i}")).collect();
        let ineq_labels = (0..linear.n_ineq()).map(|i| format!("ineq{i}")).collect();
        let set = ConstraintSet { linear, eq_labels, ineq_labels };
        set.check_feasible()?;
        Ok(set)
    }

    pub fn linear(&self) -> &LinearConstraints {
        &self.linear
    }

    pub fn dim(&self) -> usize {
        self.linear.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.linear.n_eq() == 0 && self.linear.n_ineq() == 0
    }

    pub fn ineq_labels(&self) -> &[String] {
        &self.ineq_labels
    }

    pub fn eq_labels(&self) -> &[String] {
        &self.eq_labels
    }

    /// Largest `Bv - b` over the inequality rows, 0 if all hold.
    pub fn max_violation(&self, v: &DVector<f64>) -> f64 {
        self.linear.max_ineq_violation(v)
    }

    /// Rows violated by more than `tol`, with the amount.
    pub fn violations(&self, v: &DVector<f64>, tol: f64) -> Vec<(&str, f64)> {
        let l = &self.linear;
        let mut out = Vec::new();
        for i in 0..l.n_ineq() {
            let r = l.ineq_mat.row(i).dot(&v.transpose()) - l.ineq_rhs[i];
            if r > tol {
                out.push((self.ineq_labels[i].as_str(), r));
            }
        }
        for i in 0..l.n_eq() {
            let r = (l.eq_mat.row(i).dot(&v.transpose()) - l.eq_rhs[i]).abs();
            if r > tol {
                out.push((self.eq_labels[i].as_str(), r));
            }
        }
        out
    }

    fn check_feasible(&self) -> Result<(), FilterError> {
        self.linear.check().map_err(|e| FilterError::Constraint(e.to_string()))?;
        let n = self.dim();
        match solve_with_factor(DMatrix::identity(n, n), DVector::zeros(n), &self.linear, &QpConfig { max_iter: 10 * (n + self.linear.n_ineq() + self.linear.n_eq()).max(10), ..QpConfig::default() }) {
            Ok(_) => Ok(()),
            Err(QpError::Infeasible) => Err(FilterError::Constraint("constraint set is empty".into())),
            Err(e) => Err(FilterError::Constraint(e.to_string())),
        }
    }
}

pub struct ConstraintSetBuilder {
    dim: usize,
    eq: Vec<(String, DVector<f64>, f64)>,
    ineq: Vec<(String, DVector<f64>, f64)>,
}

impl ConstraintSetBuilder {
    /// `row · v <= rhs`
    pub fn at_most(mut self, label: impl Into<String>, row: DVector<f64>, rhs: f64) -> Self {
        self.ineq.push((label.into(), row, rhs));
        self
    }

    /// `row · v >= rhs`
    pub fn at_least(mut self, label: impl Into<String>, row: DVector<f64>, rhs: f64) -> Self {
        self.ineq.push((label.into(), -row, -rhs));
        self
    }

    /// `row · v = rhs`
    pub fn equal(mut self, label: impl Into<String>, row: DVector<f64>, rhs: f64) -> Self {
        self.eq.push((label.into(), row, rhs));
        self
    }

    /// `lo <= scale · v[index] <= hi`; infinite ends are skipped.
    pub fn bound(self, label: &str, index: usize, scale: f64, lo: f64, hi: f64) -> Self {
        let mut row = DVector::zeros(self.dim);
        if index < self.dim {
            row[index] = scale;
        }
        let mut b = self;
        if lo > f64::NEG_INFINITY {
            b = b.at_least(format!("{label}>={lo}"), row.clone(), lo);
        }
        if hi < f64::INFINITY {
            b = b.at_most(format!("{label}<={hi}"), row, hi);
        }
        b
    }

    /// Errors if a row has the wrong length, a value is not finite, or no
    /// point satisfies all rows.
    pub fn build(self) -> Result<ConstraintSet, FilterError> {
        let dim = self.dim;
        if self.eq.iter().chain(&self.ineq).any(|(_, r, _)| r.len() != dim) {
            return Err(FilterError::Dimension(format!("constraint rows must have {dim} entries")));
        }
        let mat = |rows: &[(String, DVector<f64>, f64)]| {
            let mut m = DMatrix::zeros(rows.len(), dim);
            for (i, (_, r, _)) in rows.iter().enumerate() {
                m.set_row(i, &r.transpose());
            }
            (m, DVector::from_iterator(rows.len(), rows.iter().map(|(_, _, b)| *b)))
        };
        let (eq_mat, eq_rhs) = mat(&self.eq);
        let (ineq_mat, ineq_rhs) = mat(&self.ineq);
        let set = ConstraintSet {
            linear: LinearConstraints { eq_mat, eq_rhs, ineq_mat, ineq_rhs },
            eq_labels: self.eq.into_iter().map(|(l, _, _)| l).collect(),
            ineq_labels: self.ineq.into_iter().map(|(l, _, _)| l).collect(),
        };
        set.check_feasible()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Mild,
    Severe,
    UltraSevere,
}

/// Quantity a bound applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bounded {
    /// Glucose concentration in mg/dl.
    Glucose,
    PlasmaInsulin,
    InterstitialInsulin,
    Param(ParamName),
}

/// Bounds from the published experiment table, `None` where the table has
/// no entry for that tier.
pub fn table_bounds(q: Bounded, tier: Tier) -> Option<(f64, f64)> {
    use ParamName::*;
    use Tier::*;
    let b = match (q, tier) {
        (Bounded::Glucose, Mild) => (20.0, 1000.0),
        (Bounded::Glucose, Severe) => (40.0, 400.0),
        (Bounded::PlasmaInsulin | Bounded::InterstitialInsulin, Mild) => (10.0, 400.0),
        (Bounded::PlasmaInsulin | Bounded::InterstitialInsulin, Severe) => (75.0, 275.0),
        (Bounded::PlasmaInsulin, UltraSevere) => (100.0, 250.0),
        (Bounded::InterstitialInsulin, UltraSevere) => (75.0, 175.0),
        (Bounded::Param(p), Mild) => match p {
            Tp => (0.6, 60.0),
            Td => (1.2, 120.0),
            Rm => (20.9, 2090.0),
            A1 => (0.66, 66.7),
            C1 => (30.0, 3000.0),
            C3 => (10.0, 1000.0),
            Um => (9.4, 940.0),
            Rg => (18.0, 1800.0),
            _ => return None,
        },
        (Bounded::Param(p), Severe) => match p {
            Tp => (3.0, 12.0),
            Td => (6.0, 24.0),
            Rm => (104.0, 418.0),
            A1 => (3.0, 14.0),
            C1 => (150.0, 600.0),
            C3 => (50.0, 200.0),
            Um => (47.0, 188.0),
            Rg => (90.0, 360.0),
            _ => return None,
        },
        _ => return None,
    };
    Some(b)
}

/// Bounds for any parameter: the table entry when there is one, otherwise
/// nominal/10..10·nominal (mild) or nominal/2..2·nominal (severe).
pub fn param_bounds(name: ParamName, tier: Tier, nominal: &UltradianParams) -> Option<(f64, f64)> {
    if let Some(b) = table_bounds(Bounded::Param(name), tier) {
        return Some(b);
    }
    let v = nominal.get(name);
    match tier {
        Tier::Mild => Some((v / 10.0, v * 10.0)),
        Tier::Severe => Some((v / 2.0, v * 2.0)),
        Tier::UltraSevere => None,
    }
}

/// How insulin bounds are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsulinUnits {
    /// Compared directly with the model's `I_p`, `I_i` (mU).
    #[default]
    Amount,
    /// Compared with `I_p / V_p` and `I_i / V_i` (mU/l).
    Concentration,
}

/// The eleven constraint experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConstraintExperiment {
    Gm,
    Gs,
    Im,
    Is,
    Ius,
    Gim,
    Gis,
    Gipm,
    Gips,
    Gpmius,
    Gpsius,
}

impl ConstraintExperiment {
    pub const ALL: [ConstraintExperiment; 11] = {
        use ConstraintExperiment::*;
        [Gm, Gs, Im, Is, Ius, Gim, Gis, Gipm, Gips, Gpmius, Gpsius]
    };

    pub fn as_str(self) -> &'static str {
        use ConstraintExperiment::*;
        match self {
            Gm => "gm",
            Gs => "gs",
            Im => "im",
            Is => "is",
            Ius => "ius",
            Gim => "gim",
            Gis => "gis",
            Gipm => "gipm",
            Gips => "gips",
            Gpmius => "gpmius",
            Gpsius => "gpsius",
        }
    }

    /// Tiers for (glucose, insulin, parameters).
    pub fn tiers(self) -> (Option<Tier>, Option<Tier>, Option<Tier>) {
        use ConstraintExperiment::*;
        use Tier::*;
        match self {
            Gm => (Some(Mild), None, None),
            Gs => (Some(Severe), None, None),
            Im => (None, Some(Mild), None),
            Is => (None, Some(Severe), None),
            Ius => (None, Some(UltraSevere), None),
            Gim => (Some(Mild), Some(Mild), None),
            Gis => (Some(Severe), Some(Severe), None),
            Gipm => (Some(Mild), Some(Mild), Some(Mild)),
            Gips => (Some(Severe), Some(Severe), Some(Severe)),
            Gpmius => (Some(Mild), Some(UltraSevere), Some(Mild)),
            Gpsius => (Some(Severe), Some(UltraSevere), Some(Severe)),
        }
    }

    /// Box constraints on the augmented state. Bounds on parameters that are
    /// not being estimated are omitted since those stay at their nominal value.
    pub fn constraints(
        self,
        selection: &ParameterSelection,
        base: &UltradianParams,
        insulin_units: InsulinUnits,
    ) -> Result<ConstraintSet, FilterError> {
        let (g, i, p) = self.tiers();
        let mut b = ConstraintSet::builder(selection.augmented_dim());
        if let Some(t) = g {
            let (lo, hi) = table_bounds(Bounded::Glucose, t)
                .ok_or_else(|| FilterError::Constraint(format!("no glucose bounds for tier {t:?}")))?;
            b = b.bound("G", 2, 1.0 / (10.0 * base.v_g), lo, hi);
        }
        if let Some(t) = i {
            let (sp, si) = match insulin_units {
                InsulinUnits::Amount => (1.0, 1.0),
                InsulinUnits::Concentration => (1.0 / base.v_p, 1.0 / base.v_i),
            };
            let (lo, hi) = table_bounds(Bounded::PlasmaInsulin, t).expect("insulin bounds exist for every tier");
            b = b.bound("I_p", 0, sp, lo, hi);
            let (lo, hi) = table_bounds(Bounded::InterstitialInsulin, t).expect("insulin bounds exist for every tier");
            b = b.bound("I_i", 1, si, lo, hi);
        }
        if let Some(t) = p {
            for (j, &name) in selection.names().iter().enumerate() {
                let (lo, hi) = param_bounds(name, t, base)
                    .ok_or_else(|| FilterError::Constraint(format!("no bounds for {name} at tier {t:?}")))?;
                b = b.bound(name.as_str(), STATE_DIM + j, 1.0, lo, hi);
            }
        }
        b.build()
    }
}

impl fmt::Display for ConstraintExperiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConstraintExperiment {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| FilterError::Constraint(format!("unknown constraint experiment {s:?}")))
    }
}

impl Serialize for ConstraintExperiment {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ConstraintExperiment {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Kalman update followed by a per-particle projection onto the constraints.
#[derive(Debug, Clone)]
pub struct ConstrainedAnalysis {
    pub constraints: ConstraintSet,
    pub qp: QpConfig,
}

impl ConstrainedAnalysis {
    pub fn new(constraints: ConstraintSet) -> Self {
        ConstrainedAnalysis { constraints, qp: QpConfig::default() }
    }
}

/// Cholesky factor of `p`, adding diagonal jitter if round-off has pushed it
/// off positive definiteness.
fn posterior_factor(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = p.clone().cholesky() {
        return Some(ch.l());
    }
    let n = p.nrows();
    let base = (p.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = 1e-12 * base;
    while jitter <= 1e-4 * base {
        let mut q = p.clone();
        for i in 0..n {
            q[(i, i)] += jitter;
        }
        if let Some(ch) = q.cholesky() {
            debug!("posterior covariance needed jitter {jitter:e}");
            return Some(ch.l());
        }
        jitter *= 10.0;
    }
    None
}

impl Analysis for ConstrainedAnalysis {
    fn update(
        &self,
        pred: &Prediction,
        y: f64,
        model: &MeasurementModel,
        obs_var: f64,
        step_seed: u64,
        opts: &FilterOptions,
    ) -> Result<Ensemble, FilterError> {
        if self.constraints.dim() != pred.ensemble.dim() {
            return Err(FilterError::Dimension(format!(
                "constraints act on {} components, ensemble has {}",
                self.constraints.dim(),
                pred.ensemble.dim()
            )));
        }
        let k = kalman_targets(pred, y, model, obs_var, step_seed, opts)?;
        let lin = self.constraints.linear();
        if k.targets.iter().all(|v| lin.is_satisfied(v, 0.0)) {
            return Ensemble::from_particles(&k.targets);
        }
        let j = posterior_factor(&k.posterior_cov(model)).ok_or(FilterError::Qp {
            particle: 0,
            source: QpError::NotPositiveDefinite,
        })?;
        let projected: Vec<Result<DVector<f64>, FilterError>> = k
            .targets
            .par_iter()
            .enumerate()
            .map(|(n, v)| {
                if lin.is_satisfied(v, 0.0) {
                    return Ok(v.clone());
                }
                let sol = solve_with_factor(j.clone(), v.clone(), lin, &self.qp)
                    .map_err(|source| FilterError::Qp { particle: n, source })?;
                let scale = 1.0 + lin.ineq_rhs.iter().chain(lin.eq_rhs.iter()).filter(|b| b.is_finite()).fold(0.0f64, |m, b| m.max(b.abs()));
                if !lin.is_satisfied(&sol.x, self.qp.tol * scale) {
                    let residual = lin.max_ineq_violation(&sol.x).max(lin.max_eq_residual(&sol.x));
                    return Err(FilterError::Qp { particle: n, source: QpError::KktCheck { residual } });
                }
                Ok(sol.x)
            })
            .collect();
        let particles = projected.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ensemble::from_particles(&particles)
    }
}

/// Constraint satisfaction across an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationStats {
    pub particles_violating: usize,
    pub max_violation: f64,
}

pub fn violation_stats(ens: &Ensemble, constraints: &ConstraintSet, tol: f64) -> ViolationStats {
    let lin = constraints.linear();
    let mut stats = ViolationStats::default();
    for v in ens.particles() {
        let r = lin.max_ineq_violation(&v).max(lin.max_eq_residual(&v));
        stats.max_violation = stats.max_violation.max(r);
        if r > tol {
            stats.particles_violating += 1;
        }
    }
    stats
}
