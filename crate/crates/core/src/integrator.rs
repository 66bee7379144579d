//! Adaptive Dormand-Prince 5(4) integration of the ultradian model between
//! arbitrary time points.
//!
//! Steps never straddle a discontinuity of the exogenous inputs: the stepper
//! lands on every nutrition onset, drip start/end and bolus time inside the
//! interval, applies bolus jumps there, then continues.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ultradian::{deriv, ExogenousInputs, ModelError, PhysState, UltradianParams, STATE_DIM};

type State = [f64; STATE_DIM];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("model evaluation failed at t={t}: {source}")]
    Domain { t: f64, source: ModelError },
    #[error("step size underflow at t={t} (h={h})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("step budget of {max_steps} exhausted at t={t}")]
    TooManySteps { t: f64, max_steps: usize },
    #[error("invalid interval [{t0}, {t1}]")]
    InvalidInterval { t0: f64, t1: f64 },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("time grid must be strictly increasing")]
    UnsortedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: [f64; STATE_DIM],
    pub max_step: f64,
    pub initial_step: f64,
    /// Floor for step halving after a failed model evaluation.
    pub min_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-6,
            abs_tol: [1e-8; STATE_DIM],
            max_step: 10.0,
            initial_step: 0.1,
            min_step: 1e-9,
            max_steps: 1_000_000,
        }
    }
}

impl IntegratorConfig {
    pub fn with_tolerances(rel_tol: f64, abs_tol: f64) -> Self {
        IntegratorConfig { rel_tol, abs_tol: [abs_tol; STATE_DIM], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.rel_tol) || !self.abs_tol.iter().all(|&a| positive(a)) {
            return Err(IntegrateError::InvalidConfig("tolerances must be positive".into()));
        }
        if !positive(self.max_step) || !positive(self.initial_step) || !positive(self.min_step) {
            return Err(IntegrateError::InvalidConfig("step sizes must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(IntegrateError::InvalidConfig("max_steps must be positive".into()));
        }
        Ok(())
    }
}

// Dormand-Prince coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

struct Rhs<'a> {
    p: &'a UltradianParams,
    u: &'a ExogenousInputs,
}

impl Rhs<'_> {
    fn eval(&self, t: f64, y: &State) -> Result<State, ModelError> {
        let d = deriv(&PhysState::from_array(*y), self.p, self.u, t)?.to_array();
        if d.iter().all(|x| x.is_finite()) {
            Ok(d)
        } else {
            Err(ModelError::NonFinite { what: "model derivative", value: f64::NAN })
        }
    }
}

fn axpy(y: &State, h: f64, terms: &[(f64, &State)]) -> State {
    let mut out = *y;
    for i in 0..STATE_DIM {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] += h * acc;
    }
    out
}

enum Trial {
    Done { y: State, err: f64 },
    Failed(ModelError),
}

fn trial_step(rhs: &Rhs<'_>, t: f64, y: &State, k1: &State, h: f64, cfg: &IntegratorConfig) -> Trial {
    let stage = |tt: f64, yy: State| rhs.eval(tt, &yy);
    let run = || -> Result<(State, f64), ModelError> {
        let k2 = stage(t + C2 * h, axpy(y, h, &[(A21, k1)]))?;
        let k3 = stage(t + C3 * h, axpy(y, h, &[(A31, k1), (A32, &k2)]))?;
        let k4 = stage(t + C4 * h, axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = stage(t + C5 * h, axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
        let k6 = stage(
            t + h,
            axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        )?;
        let y_new = axpy(y, h, &[(B1, k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        if !y_new.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite { what: "integrated state", value: f64::NAN });
        }
        let k7 = stage(t + h, y_new)?;
        let mut sum = 0.0;
        for i in 0..STATE_DIM {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.abs_tol[i] + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            sum += (e / sc) * (e / sc);
        }
        Ok((y_new, (sum / STATE_DIM as f64).sqrt()))
    };
    match run() {
        Ok((y, err)) => Trial::Done { y, err },
        Err(e) => Trial::Failed(e),
    }
}

/// Integrate a smooth segment `[t0, t1]` with no interior discontinuities.
/// Returns the end state and the last accepted step size.
fn integrate_smooth(
    rhs: &Rhs<'_>,
    y0: State,
    t0: f64,
    t1: f64,
    h_start: f64,
    cfg: &IntegratorConfig,
    steps: &mut usize,
) -> Result<(State, f64), IntegrateError> {
    let mut t = t0;
    let mut y = y0;
    let mut h = h_start.min(cfg.max_step);
    let mut h_last = h;
    let mut k1 = rhs.eval(t, &y).map_err(|source| IntegrateError::Domain { t, source })?;
    while t < t1 {
        if *steps >= cfg.max_steps {
            return Err(IntegrateError::TooManySteps { t, max_steps: cfg.max_steps });
        }
        *steps += 1;
        let remaining = t1 - t;
        let landing = h >= remaining;
        let h_try = if landing { remaining } else { h };
        match trial_step(rhs, t, &y, &k1, h_try, cfg) {
            Trial::Failed(source) => {
                h = h_try * 0.5;
                if h < cfg.min_step {
                    return Err(IntegrateError::Domain { t, source });
                }
            }
            Trial::Done { y: y_new, err } => {
                if err <= 1.0 {
                    t = if landing { t1 } else { t + h_try };
                    y = y_new;
                    h_last = h_try;
                    let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                    h = (h_try * factor).min(cfg.max_step);
                    if t < t1 {
                        k1 = rhs.eval(t, &y).map_err(|source| IntegrateError::Domain { t, source })?;
                    }
                } else {
                    h = h_try * (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
                    if h < cfg.min_step {
                        return Err(IntegrateError::StepUnderflow { t, h });
                    }
                }
            }
        }
    }
    Ok((y, h_last))
}

/// Advance `v0` from `t0` to `t1`, applying boluses that fall in `(t0, t1]`.
pub fn integrate_between(
    v0: &PhysState,
    p: &UltradianParams,
    u: &ExogenousInputs,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<PhysState, IntegrateError> {
    if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
        return Err(IntegrateError::InvalidInterval { t0, t1 });
    }
    cfg.validate()?;
    if t1 == t0 {
        return Ok(*v0);
    }
    let rhs = Rhs { p, u };
    let mut y = v0.to_array();
    let mut t = t0;
    let mut h = cfg.initial_step;
    let mut steps = 0usize;
    let mut stops = u.breakpoints(t0, t1);
    if stops.last() != Some(&t1) {
        stops.push(t1);
    }
    for stop in stops {
        let (y_end, h_last) = integrate_smooth(&rhs, y, t, stop, h, cfg, &mut steps)?;
        y = y_end;
        t = stop;
        y[0] += u.bolus_at(stop);
        // restart conservatively after a discontinuity
        h = h_last.max(cfg.initial_step);
    }
    Ok(PhysState::from_array(y))
}

/// Chain [`integrate_between`] over a strictly increasing grid; the first
/// entry of the output is `v0` at `grid[0]`.
pub fn solution_operator(
    grid: &[f64],
    v0: &PhysState,
    p: &UltradianParams,
    u: &ExogenousInputs,
    cfg: &IntegratorConfig,
) -> Result<Vec<PhysState>, IntegrateError> {
    if grid.windows(2).any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater)) {
        return Err(IntegrateError::UnsortedGrid);
    }
    let mut out = Vec::with_capacity(grid.len());
    let Some(&first) = grid.first() else {
        return Ok(out);
    };
    let mut v = *v0;
    let mut t = first;
    out.push(v);
    for &next in &grid[1..] {
        v = integrate_between(&v, p, u, t, next, cfg)?;
        t = next;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ultradian::{regular_feed, InsulinDelivery, NutritionEvent};

    fn start() -> PhysState {
        PhysState::new(60.0, 150.0, 12000.0, 55.0, 50.0, 45.0)
    }

    fn max_rel_diff(a: &PhysState, b: &PhysState) -> f64 {
        a.to_array()
            .iter()
            .zip(b.to_array())
            .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_length_interval_is_identity() {
        let v = start();
        let out = integrate_between(&v, &UltradianParams::nominal(), &ExogenousInputs::empty(), 5.0, 5.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rejects_backwards_interval() {
        let r = integrate_between(&start(), &UltradianParams::nominal(), &ExogenousInputs::empty(), 5.0, 4.0, &IntegratorConfig::default());
        assert!(matches!(r, Err(IntegrateError::InvalidInterval { .. })));
    }

    #[test]
    fn delay_chain_equilibrium_is_preserved() {
        // Secretion off and no insulin anywhere: I_p = h1 = h2 = h3 = 0 stays put.
        let mut p = UltradianParams::nominal();
        p.r_m = 1e-300;
        let v = PhysState::new(0.0, 1e-300, 12000.0, 0.0, 0.0, 0.0);
        let out = integrate_between(&v, &p, &ExogenousInputs::empty(), 0.0, 200.0, &IntegratorConfig::default()).unwrap();
        assert!(out.h1.abs() < 1e-12 && out.h2.abs() < 1e-12 && out.h3.abs() < 1e-12);
    }

    #[test]
    fn self_convergence_on_500_minutes() {
        let p = UltradianParams::nominal();
        let u = ExogenousInputs::empty();
        let coarse = IntegratorConfig::default();
        let fine = IntegratorConfig::with_tolerances(coarse.rel_tol / 2.0, coarse.abs_tol[0] / 2.0);
        let a = integrate_between(&start(), &p, &u, 0.0, 500.0, &coarse).unwrap();
        let b = integrate_between(&start(), &p, &u, 0.0, 500.0, &fine).unwrap();
        assert!(max_rel_diff(&a, &b) < 10.0 * coarse.rel_tol, "{}", max_rel_diff(&a, &b));
    }

    #[test]
    fn composition_property() {
        let p = UltradianParams::nominal();
        let u = ExogenousInputs::new(regular_feed(0.0, 1000.0, 10.0, 180.0), vec![]).unwrap();
        let cfg = IntegratorConfig::default();
        let direct = integrate_between(&start(), &p, &u, 0.0, 437.0, &cfg).unwrap();
        let mid = integrate_between(&start(), &p, &u, 0.0, 211.5, &cfg).unwrap();
        let chained = integrate_between(&mid, &p, &u, 211.5, 437.0, &cfg).unwrap();
        assert!(max_rel_diff(&direct, &chained) < 10.0 * cfg.rel_tol);
    }

    #[test]
    fn solution_operator_grid() {
        let p = UltradianParams::nominal();
        let u = ExogenousInputs::empty();
        let cfg = IntegratorConfig::default();
        assert_eq!(solution_operator(&[3.0], &start(), &p, &u, &cfg).unwrap(), vec![start()]);
        let traj = solution_operator(&[0.0, 100.0, 250.0], &start(), &p, &u, &cfg).unwrap();
        let direct = integrate_between(&start(), &p, &u, 0.0, 250.0, &cfg).unwrap();
        assert_eq!(traj.len(), 3);
        assert!(max_rel_diff(&traj[2], &direct) < 10.0 * cfg.rel_tol);
        assert!(matches!(
            solution_operator(&[0.0, 0.0], &start(), &p, &u, &cfg),
            Err(IntegrateError::UnsortedGrid)
        ));
    }

    #[test]
    fn bolus_jump_is_exact() {
        let p = UltradianParams::nominal();
        let cfg = IntegratorConfig::default();
        let with = |amount: f64| {
            ExogenousInputs::new(vec![], vec![InsulinDelivery::Bolus { t: 50.0, amount }]).unwrap()
        };
        // up to the bolus time the trajectory ignores the amount...
        let pre_small = integrate_between(&start(), &p, &with(10.0), 0.0, 49.999, &cfg).unwrap();
        let pre_big = integrate_between(&start(), &p, &with(500.0), 0.0, 49.999, &cfg).unwrap();
        assert_eq!(pre_small, pre_big);
        // ...and at the bolus time the jump is exactly the amount.
        let no = integrate_between(&start(), &p, &ExogenousInputs::empty(), 0.0, 50.0, &cfg).unwrap();
        let yes = integrate_between(&start(), &p, &with(500.0), 0.0, 50.0, &cfg).unwrap();
        assert!((yes.i_p - no.i_p - 500.0).abs() < 1e-9);
        assert_eq!(yes.g, no.g);
    }

    #[test]
    fn negative_interstitial_insulin_surfaces_domain_error() {
        let v = PhysState::new(60.0, -5.0, 12000.0, 55.0, 50.0, 45.0);
        let r = integrate_between(&v, &UltradianParams::nominal(), &ExogenousInputs::empty(), 0.0, 10.0, &IntegratorConfig::default());
        assert!(matches!(r, Err(IntegrateError::Domain { source: ModelError::InsulinDomain { .. }, .. })));
    }

    #[test]
    fn nutrition_pulse_lands_on_event() {
        let p = UltradianParams::nominal();
        let cfg = IntegratorConfig::default();
        let u = ExogenousInputs::new(vec![NutritionEvent { t: 20.0, m: 60_000.0 }], vec![]).unwrap();
        let none = integrate_between(&start(), &p, &ExogenousInputs::empty(), 0.0, 200.0, &cfg).unwrap();
        let fed = integrate_between(&start(), &p, &u, 0.0, 200.0, &cfg).unwrap();
        assert!(fed.g > none.g);
    }

    #[test]
    fn deterministic() {
        let p = UltradianParams::nominal();
        let u = ExogenousInputs::new(regular_feed(0.0, 300.0, 7.0, 150.0), vec![]).unwrap();
        let cfg = IntegratorConfig::default();
        let a = integrate_between(&start(), &p, &u, 0.0, 300.0, &cfg).unwrap();
        let b = integrate_between(&start(), &p, &u, 0.0, 300.0, &cfg).unwrap();
        assert_eq!(a.to_array().map(f64::to_bits), b.to_array().map(f64::to_bits));
    }
}
