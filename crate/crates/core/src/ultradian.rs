//! The ultradian glucose-insulin model.
//!
//! Six state variables: plasma insulin `I_p` (mU), interstitial insulin `I_i`
//! (mU), glucose mass `G` (mg) and a three-stage linear delay chain
//! `h_1, h_2, h_3` (mU) that carries plasma insulin to hepatic glucose
//! production. Glucose is a mass; concentrations in mg/dl are `G / (10 V_g)`.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of physiological state components.
pub const STATE_DIM: usize = 6;

/// Beyond this many decay constants an event's contribution underflows to 0.
const NUTRITION_CUTOFF: f64 = 800.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("non-finite input to {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("interstitial insulin must be positive for insulin-dependent uptake, got {i_i}")]
    InsulinDomain { i_i: f64 },
    #[error("parameter {name} must be finite and strictly positive, got {value}")]
    InvalidParameter { name: ParamName, value: f64 },
    #[error("invalid exogenous input: {0}")]
    InvalidInput(String),
}

macro_rules! params {
    ($( $variant:ident => $field:ident, $label:literal, $nominal:expr; )*) => {
        /// Names of the model parameters, in table order.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum ParamName {
            $( #[serde(rename = $label)] $variant, )*
        }

        impl ParamName {
            pub const ALL: [ParamName; 21] = [$( ParamName::$variant, )*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $( ParamName::$variant => $label, )*
                }
            }
        }

        impl FromStr for ParamName {
            type Err = ModelError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $( $label => Ok(ParamName::$variant), )*
                    other => Err(ModelError::InvalidInput(format!("unknown parameter name `{other}`"))),
                }
            }
        }

        /// The 21 ultradian model parameters.
        #[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
        pub struct UltradianParams {
            $( pub $field: f64, )*
        }

        impl UltradianParams {
            /// Literature nominal values.
            pub const fn nominal() -> Self {
                UltradianParams { $( $field: $nominal, )* }
            }

            pub fn get(&self, name: ParamName) -> f64 {
                match name {
                    $( ParamName::$variant => self.$field, )*
                }
            }

            pub fn set(&mut self, name: ParamName, value: f64) {
                match name {
                    $( ParamName::$variant => self.$field = value, )*
                }
            }
        }
    };
}

params! {
    Vp => v_p, "V_p", 3.0;
    Vi => v_i, "V_i", 11.0;
    Vg => v_g, "V_g", 10.0;
    E => e, "E", 0.2;
    Tp => t_p, "t_p", 6.0;
    Ti => t_i, "t_i", 100.0;
    Td => t_d, "t_d", 12.0;
    K => k, "k", 0.5;
    Rm => r_m, "R_m", 209.0;
    A1 => a_1, "a_1", 6.6;
    C1 => c_1, "C_1", 300.0;
    C2 => c_2, "C_2", 144.0;
    C3 => c_3, "C_3", 100.0;
    C4 => c_4, "C_4", 80.0;
    C5 => c_5, "C_5", 26.0;
    Ub => u_b, "U_b", 72.0;
    U0 => u_0, "U_0", 4.0;
    Um => u_m, "U_m", 94.0;
    Rg => r_g, "R_g", 180.0;
    Alpha => alpha, "alpha", 7.5;
    Beta => beta, "beta", 1.772;
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Default for UltradianParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl UltradianParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        for name in ParamName::ALL {
            let value = self.get(name);
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Insulin sensitivity scale `(1/C_4)(1/V_i - 1/(E t_i))`.
    pub fn kappa(&self) -> f64 {
        (1.0 / self.c_4) * (1.0 / self.v_i - 1.0 / (self.e * self.t_i))
    }

    /// Glucose mass (mg) to concentration (mg/dl).
    pub fn glucose_mg_per_dl(&self, g_mass: f64) -> f64 {
        g_mass / (10.0 * self.v_g)
    }

    /// Glucose concentration (mg/dl) to mass (mg).
    pub fn glucose_mass(&self, mg_per_dl: f64) -> f64 {
        mg_per_dl * 10.0 * self.v_g
    }
}

/// Physiological state of the ultradian model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhysState {
    pub i_p: f64,
    pub i_i: f64,
    pub g: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

impl PhysState {
    pub const fn new(i_p: f64, i_i: f64, g: f64, h1: f64, h2: f64, h3: f64) -> Self {
        PhysState { i_p, i_i, g, h1, h2, h3 }
    }

    pub fn to_array(self) -> [f64; STATE_DIM] {
        [self.i_p, self.i_i, self.g, self.h1, self.h2, self.h3]
    }

    pub fn from_array(a: [f64; STATE_DIM]) -> Self {
        PhysState::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        PhysState::new(s[0], s[1], s[2], s[3], s[4], s[5])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

/// A discrete nutrition event: `m` carbohydrate units at time `t` (min).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutritionEvent {
    pub t: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InsulinDelivery {
    /// Constant IV rate (mU/min) over `[start, end)`.
    Drip { start: f64, end: f64, rate: f64 },
    /// Instantaneous increment of plasma insulin (mU).
    Bolus { t: f64, amount: f64 },
}

impl InsulinDelivery {
    pub fn start(&self) -> f64 {
        match *self {
            InsulinDelivery::Drip { start, .. } => start,
            InsulinDelivery::Bolus { t, .. } => t,
        }
    }
}

/// Time-sorted nutrition and insulin drivers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExogenousInputs {
    nutrition: Vec<NutritionEvent>,
    insulin: Vec<InsulinDelivery>,
    #[serde(skip)]
    decayed: OnceLock<DecayedSums>,
}

impl PartialEq for ExogenousInputs {
    fn eq(&self, other: &Self) -> bool {
        self.nutrition == other.nutrition && self.insulin == other.insulin
    }
}

/// `s[j] = sum over i <= j of m_i exp(k (t_i - t_j))` for one value of `k`,
/// so that `I_G(t) = k/60 · s[J] · exp(k (t_J - t))` with `J` the last event
/// before `t`.
#[derive(Debug, Clone)]
struct DecayedSums {
    k: f64,
    s: Vec<f64>,
}

impl DecayedSums {
    fn new(events: &[NutritionEvent], k: f64) -> Self {
        let mut s = Vec::with_capacity(events.len());
        let mut acc = 0.0;
        let mut prev = f64::NEG_INFINITY;
        for ev in events {
            acc = ev.m + acc * (k * (prev - ev.t)).exp();
            prev = ev.t;
            s.push(acc);
        }
        DecayedSums { k, s }
    }
}

impl ExogenousInputs {
    pub fn new(
        mut nutrition: Vec<NutritionEvent>,
        mut insulin: Vec<InsulinDelivery>,
    ) -> Result<Self, ModelError> {
        for ev in &nutrition {
            if !(ev.t.is_finite() && ev.m.is_finite() && ev.m >= 0.0) {
                return Err(ModelError::InvalidInput(format!(
                    "nutrition event at t={} with quantity {}",
                    ev.t, ev.m
                )));
            }
        }
        for d in &insulin {
            let ok = match *d {
                InsulinDelivery::Drip { start, end, rate } => {
                    start.is_finite() && !end.is_nan() && end >= start && rate.is_finite() && rate >= 0.0
                }
                InsulinDelivery::Bolus { t, amount } => {
                    t.is_finite() && amount.is_finite() && amount >= 0.0
                }
            };
            if !ok {
                return Err(ModelError::InvalidInput(format!("invalid insulin delivery {d:?}")));
            }
        }
        nutrition.sort_by(|a, b| a.t.total_cmp(&b.t));
        insulin.sort_by(|a, b| a.start().total_cmp(&b.start()));
        Ok(ExogenousInputs { nutrition, insulin, decayed: OnceLock::new() })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn nutrition(&self) -> &[NutritionEvent] {
        &self.nutrition
    }

    pub fn insulin(&self) -> &[InsulinDelivery] {
        &self.insulin
    }

    pub fn is_empty(&self) -> bool {
        self.nutrition.is_empty() && self.insulin.is_empty()
    }

    /// Glucose appearance rate `I_G(t)` in mg/min. Agrees with
    /// [`nutrition_rate`] to rounding; the decayed running sums are built on
    /// first use for the `k` of that call.
    pub fn nutrition_rate(&self, t: f64, k: f64) -> f64 {
        let sums = self.decayed.get_or_init(|| DecayedSums::new(&self.nutrition, k));
        if sums.k != k {
            return nutrition_rate(&self.nutrition, t, k);
        }
        let past = self.nutrition.partition_point(|e| e.t < t);
        if past == 0 {
            return 0.0;
        }
        let last = &self.nutrition[past - 1];
        k / 60.0 * sums.s[past - 1] * (k * (last.t - t)).exp()
    }

    /// Summed IV insulin drip rate active at `t` (mU/min).
    pub fn insulin_drip_rate(&self, t: f64) -> f64 {
        self.insulin
            .iter()
            .map(|d| match *d {
                InsulinDelivery::Drip { start, end, rate } if start <= t && t < end => rate,
                _ => 0.0,
            })
            .sum()
    }

    /// Total bolus insulin delivered exactly at `t` (mU).
    pub fn bolus_at(&self, t: f64) -> f64 {
        self.insulin
            .iter()
            .map(|d| match *d {
                InsulinDelivery::Bolus { t: tb, amount } if tb == t => amount,
                _ => 0.0,
            })
            .sum()
    }

    /// Sorted, de-duplicated discontinuity times in `(t0, t1]`.
    pub fn breakpoints(&self, t0: f64, t1: f64) -> Vec<f64> {
        let inside = |t: f64| t > t0 && t <= t1;
        let mut pts: Vec<f64> = self.nutrition.iter().map(|e| e.t).filter(|&t| inside(t)).collect();
        for d in &self.insulin {
            match *d {
                InsulinDelivery::Drip { start, end, .. } => {
                    pts.extend([start, end].into_iter().filter(|&t| inside(t)));
                }
                InsulinDelivery::Bolus { t, .. } => {
                    if inside(t) {
                        pts.push(t);
                    }
                }
            }
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }
}

fn check_finite(what: &'static str, value: f64) -> Result<(), ModelError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFinite { what, value })
    }
}

/// Pancreatic insulin secretion `f_1(G)` (mU/min).
pub fn insulin_secretion(g: f64, p: &UltradianParams) -> Result<f64, ModelError> {
    check_finite("insulin secretion", g)?;
    Ok(p.r_m / (1.0 + (-g / (p.v_g * p.c_1) + p.a_1).exp()))
}

/// Insulin-independent glucose utilization `f_2(G)` (mg/min).
pub fn insulin_independent_uptake(g: f64, p: &UltradianParams) -> Result<f64, ModelError> {
    check_finite("insulin-independent uptake", g)?;
    Ok(p.u_b * (1.0 - (-g / (p.c_2 * p.v_g)).exp()))
}

/// Insulin-dependent utilization factor `f_3(I_i)`; multiplies `G` to give mg/min.
pub fn insulin_dependent_uptake_factor(i_i: f64, p: &UltradianParams) -> Result<f64, ModelError> {
    check_finite("insulin-dependent uptake", i_i)?;
    if i_i <= 0.0 {
        return Err(ModelError::InsulinDomain { i_i });
    }
    let x = (p.kappa() * i_i).powf(-p.beta);
    Ok((p.u_0 + (p.u_m - p.u_0) / (1.0 + x)) / (p.c_3 * p.v_g))
}

/// Delayed hepatic glucose production `f_4(h_3)` (mg/min).
pub fn hepatic_production(h3: f64, p: &UltradianParams) -> Result<f64, ModelError> {
    check_finite("hepatic production", h3)?;
    Ok(p.r_g / (1.0 + (p.alpha * (h3 / (p.c_5 * p.v_p) - 1.0)).exp()))
}

/// `I_G(t) = sum over t_j < t of (m_j k / 60) exp(k (t_j - t))`, summed
/// most-recent first.
pub fn nutrition_rate(events: &[NutritionEvent], t: f64, k: f64) -> f64 {
    let past = events.partition_point(|e| e.t < t);
    let mut total = 0.0;
    for ev in events[..past].iter().rev() {
        let age = k * (t - ev.t);
        if age > NUTRITION_CUTOFF {
            break;
        }
        total += ev.m * k / 60.0 * (-age).exp();
    }
    total
}

/// Right-hand side of the model ODE. Boluses are not part of the derivative.
pub fn deriv(
    v: &PhysState,
    p: &UltradianParams,
    u: &ExogenousInputs,
    t: f64,
) -> Result<PhysState, ModelError> {
    let f1 = insulin_secretion(v.g, p)?;
    let f2 = insulin_independent_uptake(v.g, p)?;
    let f3 = insulin_dependent_uptake_factor(v.i_i, p)?;
    let f4 = hepatic_production(v.h3, p)?;
    let exchange = p.e * (v.i_p / p.v_p - v.i_i / p.v_i);
    Ok(PhysState {
        i_p: f1 - exchange - v.i_p / p.t_p + u.insulin_drip_rate(t),
        i_i: exchange - v.i_i / p.t_i,
        g: f4 + u.nutrition_rate(t, p.k) - f2 - f3 * v.g,
        h1: (v.i_p - v.h1) / p.t_d,
        h2: (v.h1 - v.h2) / p.t_d,
        h3: (v.h2 - v.h3) / p.t_d,
    })
}

/// Evenly spaced nutrition pulses with a prescribed long-run mean glucose
/// appearance rate (mg/min) over `[start, end)`.
pub fn regular_feed(start: f64, end: f64, interval: f64, mean_rate: f64) -> Vec<NutritionEvent> {
    // Each pulse delivers m/60 in total.
    let m = mean_rate * interval * 60.0;
    let mut out = Vec::new();
    let mut i = 0u64;
    loop {
        let t = start + i as f64 * interval;
        if t >= end {
            break;
        }
        out.push(NutritionEvent { t, m });
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn nominal() -> UltradianParams {
        UltradianParams::nominal()
    }

    #[test]
    fn nominal_table_values() {
        let p = nominal();
        let expected = [
            3.0, 11.0, 10.0, 0.2, 6.0, 100.0, 12.0, 0.5, 209.0, 6.6, 300.0, 144.0, 100.0, 80.0,
            26.0, 72.0, 4.0, 94.0, 180.0, 7.5, 1.772,
        ];
        for (name, value) in ParamName::ALL.iter().zip(expected) {
            assert_eq!(p.get(*name), value, "{name}");
        }
        p.validate().unwrap();
    }

    #[test]
    fn param_names_round_trip() {
        for name in ParamName::ALL {
            assert_eq!(name.as_str().parse::<ParamName>().unwrap(), name);
        }
        assert!("Q_9".parse::<ParamName>().is_err());
    }

    #[test]
    fn validate_rejects_nonpositive() {
        let mut p = nominal();
        p.t_d = 0.0;
        assert!(matches!(
            p.validate(),
            Err(ModelError::InvalidParameter { name: ParamName::Td, .. })
        ));
    }

    #[test]
    fn secretion_examples() {
        let p = nominal();
        assert_relative_eq!(insulin_secretion(1e12, &p).unwrap(), 209.0, max_relative = 1e-12);
        let at_zero = 209.0 / (1.0 + 6.6f64.exp());
        assert_relative_eq!(insulin_secretion(0.0, &p).unwrap(), at_zero, max_relative = 1e-14);
        assert_relative_eq!(insulin_secretion(19800.0, &p).unwrap(), 104.5, max_relative = 1e-14);
        assert!(insulin_secretion(f64::NAN, &p).is_err());
    }

    #[test]
    fn independent_uptake_examples() {
        let p = nominal();
        assert_eq!(insulin_independent_uptake(0.0, &p).unwrap(), 0.0);
        assert_relative_eq!(insulin_independent_uptake(1e9, &p).unwrap(), 72.0, max_relative = 1e-14);
        let at_scale = 72.0 * (1.0 - (-1.0f64).exp());
        assert_relative_eq!(insulin_independent_uptake(1440.0, &p).unwrap(), at_scale, max_relative = 1e-14);
        assert!(insulin_independent_uptake(f64::INFINITY, &p).is_err());
    }

    #[test]
    fn dependent_uptake_examples() {
        let p = nominal();
        assert_relative_eq!(p.kappa(), (1.0 / 80.0) * (1.0 / 11.0 - 1.0 / 20.0), max_relative = 1e-15);
        assert_relative_eq!(
            insulin_dependent_uptake_factor(1e12, &p).unwrap(),
            94.0 / 1000.0,
            max_relative = 1e-9
        );
        assert_relative_eq!(
            insulin_dependent_uptake_factor(1e-12, &p).unwrap(),
            0.004,
            max_relative = 1e-9
        );
        assert!(matches!(
            insulin_dependent_uptake_factor(0.0, &p),
            Err(ModelError::InsulinDomain { .. })
        ));
        assert!(insulin_dependent_uptake_factor(-3.0, &p).is_err());
    }

    #[test]
    fn hepatic_examples() {
        let p = nominal();
        assert_relative_eq!(hepatic_production(78.0, &p).unwrap(), 90.0, max_relative = 1e-14);
        assert!(hepatic_production(1e6, &p).unwrap() < 1e-12);
        let at_zero = 180.0 / (1.0 + (-7.5f64).exp());
        assert_relative_eq!(hepatic_production(0.0, &p).unwrap(), at_zero, max_relative = 1e-14);
    }

    #[test]
    fn nutrition_examples() {
        assert_eq!(nutrition_rate(&[], 12.0, 0.5), 0.0);
        let ev = [NutritionEvent { t: 0.0, m: 6000.0 }];
        assert_relative_eq!(nutrition_rate(&ev, 1e-12, 0.5), 50.0, max_relative = 1e-10);
        // the event itself is excluded at t = t_j
        assert_eq!(nutrition_rate(&ev, 0.0, 0.5), 0.0);
        let future = [NutritionEvent { t: 10.0, m: 6000.0 }];
        assert_eq!(nutrition_rate(&future, 5.0, 0.5), 0.0);
    }

    #[test]
    fn nutrition_cutoff_matches_full_sum() {
        let events: Vec<_> = (0..200).map(|i| NutritionEvent { t: i as f64 * 7.0, m: 1000.0 + i as f64 }).collect();
        let t = 1400.3;
        let full: f64 = events
            .iter()
            .rev()
            .filter(|e| e.t < t)
            .map(|e| e.m * 0.5 / 60.0 * (0.5 * (e.t - t)).exp())
            .sum();
        assert_eq!(nutrition_rate(&events, t, 0.5), full);
    }

    #[test]
    fn cached_driver_matches_direct_sum() {
        let events: Vec<_> = (0..300).map(|i| NutritionEvent { t: i as f64 * 3.7, m: 500.0 + (i % 7) as f64 * 300.0 }).collect();
        let u = ExogenousInputs::new(events.clone(), vec![]).unwrap();
        for k in [0.5, 0.05] {
            for i in 0..400 {
                let t = i as f64 * 2.9 - 3.0;
                let direct = nutrition_rate(&events, t, k);
                let cached = u.nutrition_rate(t, k);
                assert!((cached - direct).abs() <= 1e-12 * direct.abs().max(1e-300), "t={t} k={k}");
            }
        }
        assert_eq!(u.nutrition_rate(events[0].t, 0.5), 0.0);
    }

    #[test]
    fn delay_chain_at_rest() {
        let v = PhysState::new(80.0, 150.0, 12000.0, 80.0, 80.0, 80.0);
        let d = deriv(&v, &nominal(), &ExogenousInputs::empty(), 0.0).unwrap();
        assert_eq!((d.h1, d.h2, d.h3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn deriv_hand_evaluation() {
        // Scalar re-evaluation of every term, written out independently.
        let v = PhysState::new(90.0, 90.0, 10000.0, 77.0, 77.0, 77.0);
        let d = deriv(&v, &nominal(), &ExogenousInputs::empty(), 0.0).unwrap();

        let f1 = 209.0 / (1.0 + (-10000.0f64 / 3000.0 + 6.6).exp());
        let f2 = 72.0 * (1.0 - (-10000.0f64 / 1440.0).exp());
        let kappa = (1.0 / 80.0) * (1.0 / 11.0 - 1.0 / 20.0);
        let f3 = (4.0 + 90.0 / (1.0 + (kappa * 90.0f64).powf(-1.772))) / 1000.0;
        let f4 = 180.0 / (1.0 + (7.5 * (77.0f64 / 78.0 - 1.0)).exp());
        let ex = 0.2 * (90.0 / 3.0 - 90.0 / 11.0);

        assert_relative_eq!(d.i_p, f1 - ex - 90.0 / 6.0, max_relative = 1e-12);
        assert_relative_eq!(d.i_i, ex - 90.0 / 100.0, max_relative = 1e-12);
        assert_relative_eq!(d.g, f4 - f2 - f3 * 10000.0, max_relative = 1e-12);
        assert_relative_eq!(d.h1, 13.0 / 12.0, max_relative = 1e-12);
        assert_eq!(d.h2, 0.0);
        assert_eq!(d.h3, 0.0);
    }

    #[test]
    fn deriv_includes_drip_and_nutrition() {
        let v = PhysState::new(90.0, 90.0, 10000.0, 77.0, 77.0, 77.0);
        let p = nominal();
        let base = deriv(&v, &p, &ExogenousInputs::empty(), 30.0).unwrap();
        let u = ExogenousInputs::new(
            vec![NutritionEvent { t: 29.0, m: 600.0 }],
            vec![InsulinDelivery::Drip { start: 0.0, end: 60.0, rate: 2.5 }],
        )
        .unwrap();
        let d = deriv(&v, &p, &u, 30.0).unwrap();
        assert_relative_eq!(d.i_p - base.i_p, 2.5, max_relative = 1e-10);
        assert_relative_eq!(d.g - base.g, 600.0 * 0.5 / 60.0 * (-0.5f64).exp(), max_relative = 1e-10);
    }

    #[test]
    fn deriv_is_deterministic() {
        let v = PhysState::new(55.0, 140.0, 13000.0, 50.0, 60.0, 70.0);
        let u = ExogenousInputs::new(regular_feed(0.0, 100.0, 5.0, 200.0), vec![]).unwrap();
        let a = deriv(&v, &nominal(), &u, 42.0).unwrap();
        let b = deriv(&v, &nominal(), &u, 42.0).unwrap();
        assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
    }

    #[test]
    fn deriv_propagates_domain_error() {
        let v = PhysState::new(55.0, -1.0, 13000.0, 50.0, 60.0, 70.0);
        assert!(matches!(
            deriv(&v, &nominal(), &ExogenousInputs::empty(), 0.0),
            Err(ModelError::InsulinDomain { .. })
        ));
    }

    #[test]
    fn inputs_reject_bad_values_and_sort() {
        assert!(ExogenousInputs::new(vec![NutritionEvent { t: 0.0, m: -1.0 }], vec![]).is_err());
        assert!(ExogenousInputs::new(
            vec![],
            vec![InsulinDelivery::Drip { start: 10.0, end: 5.0, rate: 1.0 }]
        )
        .is_err());
        let u = ExogenousInputs::new(
            vec![NutritionEvent { t: 5.0, m: 1.0 }, NutritionEvent { t: 1.0, m: 2.0 }],
            vec![
                InsulinDelivery::Bolus { t: 9.0, amount: 3.0 },
                InsulinDelivery::Drip { start: 2.0, end: 4.0, rate: 1.0 },
            ],
        )
        .unwrap();
        assert_eq!(u.nutrition()[0].t, 1.0);
        assert_eq!(u.insulin()[0].start(), 2.0);
        assert_eq!(u.breakpoints(1.0, 9.0), vec![2.0, 4.0, 5.0, 9.0]);
        assert_eq!(u.bolus_at(9.0), 3.0);
    }

    #[test]
    fn regular_feed_mean_rate() {
        let feed = regular_feed(0.0, 600.0, 10.0, 150.0);
        assert_eq!(feed.len(), 60);
        let delivered: f64 = feed.iter().map(|e| e.m / 60.0).sum();
        assert_relative_eq!(delivered / 600.0, 150.0, max_relative = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn logistic_terms_bounded(g in -1e5f64..1e6, h3 in -1e4f64..1e4) {
                let p = UltradianParams::nominal();
                let f1 = insulin_secretion(g, &p).unwrap();
                let f4 = hepatic_production(h3, &p).unwrap();
                prop_assert!(f1 >= 0.0 && f1 <= p.r_m);
                prop_assert!(f4 >= 0.0 && f4 <= p.r_g);
            }

            #[test]
            fn uptake_monotone(a in 0.0f64..1e5, b in 0.0f64..1e5, x in 1e-3f64..1e4, y in 1e-3f64..1e4) {
                let p = UltradianParams::nominal();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(insulin_independent_uptake(lo, &p).unwrap() <= insulin_independent_uptake(hi, &p).unwrap());
                let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
                prop_assert!(
                    insulin_dependent_uptake_factor(lo, &p).unwrap()
                        <= insulin_dependent_uptake_factor(hi, &p).unwrap()
                );
            }
        }
    }
}
