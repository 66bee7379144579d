use cenkf::constrained::ConstraintExperiment;
use cenkf::harness::{draw_twin_patient, run_experiment, ExperimentConfig, ExperimentKind, TwinSpec};
use cenkf::integrator::IntegratorConfig;
use cenkf::patient_data::{EventKind, PatientEvent, PatientTimeline};

fn twin() -> PatientTimeline {
    let spec = TwinSpec { days: 1.5, ..TwinSpec::default() };
    draw_twin_patient("p", &spec, &IntegratorConfig::default(), 21).unwrap().timeline
}

#[test]
fn forecasts_never_see_future_measurements() {
    let tl = twin();
    let cut = tl.admission() + 600.0;
    let altered: Vec<PatientEvent> = tl
        .events()
        .iter()
        .map(|e| match e.kind {
            EventKind::GlucoseMeas if e.t_min > cut => PatientEvent { value: e.value + 40.0, ..*e },
            _ => *e,
        })
        .collect();
    let altered = PatientTimeline::new("p", altered).unwrap();
    for kind in [ExperimentKind::Unconstrained, ExperimentKind::Constrained(ConstraintExperiment::Gis)] {
        let cfg = ExperimentConfig { particles: 20, seed: 1, experiment: kind, ..ExperimentConfig::default() };
        let a = run_experiment(&tl, &cfg).unwrap();
        let b = run_experiment(&altered, &cfg).unwrap();
        let mut compared = 0;
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.t, y.t);
            if x.t <= cut {
                assert_eq!(x.forecast.mean.to_bits(), y.forecast.mean.to_bits(), "t = {}", x.t);
                compared += 1;
            } else if x.t > cut + 1e-9 && y.y != x.y {
                // the first altered measurement is itself forecast blind
                assert_eq!(x.forecast.mean.to_bits(), y.forecast.mean.to_bits());
                break;
            }
        }
        assert!(compared >= 5);
    }
}

#[test]
fn same_seed_same_result() {
    let tl = twin();
    let cfg = ExperimentConfig { particles: 15, seed: 9, ..ExperimentConfig::default() };
    let a = run_experiment(&tl, &cfg).unwrap();
    let b = run_experiment(&tl, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    let c = run_experiment(&tl, &ExperimentConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn timeline_survives_csv_and_json() {
    let tl = twin();
    let mut buf = Vec::new();
    tl.write_csv(&mut buf).unwrap();
    let back = PatientTimeline::from_csv("p", buf.as_slice()).unwrap();
    assert_eq!(back, tl);
    let json = PatientTimeline::from_json(tl.to_json().as_bytes()).unwrap();
    assert_eq!(json, tl);
}
