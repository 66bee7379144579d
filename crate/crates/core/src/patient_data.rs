//! Clinical event timelines: parsing, validation and conversion into model
//! inputs.
//!
//! CSV files carry exactly the columns `t_min,kind,value`; JSON files carry
//! `{"id": ..., "events": [{"t_min", "kind", "value"}, ...]}`. Units:
//!
//! | kind                | value                                   |
//! |---------------------|-----------------------------------------|
//! | `glucose_meas`      | mg/dl                                   |
//! | `insulin_bolus`     | mU                                      |
//! | `insulin_drip_rate` | mU/min from `t_min` until the next row   |
//! | `tube_feed`         | carbohydrate units `m` of one pulse      |
//! | `iv_glucose_drip`   | mg/min from `t_min` until the next row   |
//! | `iv_glucose_bolus`  | carbohydrate units `m` of one pulse      |
//!
//! A rate of 0 ends a drip.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ultradian::{ExogenousInputs, InsulinDelivery, ModelError, NutritionEvent};

pub const CSV_HEADER: [&str; 3] = ["t_min", "kind", "value"];

/// Spacing (min) of the pulses an IV glucose drip is expanded into.
pub const DEFAULT_DRIP_INTERVAL: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("row {row}: unknown event kind {kind:?}")]
    UnknownKind { row: usize, kind: String },
    #[error("row {row}: value must be a finite number >= 0, got {value}")]
    InvalidValue { row: usize, value: String },
    #[error("row {row}: time must be a finite number >= 0, got {value}")]
    InvalidTime { row: usize, value: String },
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("missing required column(s): {}", .0.join(", "))]
    MissingColumns(Vec<String>),
    #[error("unexpected column {0:?}")]
    UnexpectedColumn(String),
    #[error("timeline has no events")]
    Empty,
    #[error("timeline has no glucose measurement")]
    NoGlucose,
    #[error("invalid JSON timeline: {0}")]
    Json(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    GlucoseMeas,
    InsulinBolus,
    InsulinDripRate,
    TubeFeed,
    IvGlucoseDrip,
    IvGlucoseBolus,
}

impl EventKind {
    pub const ALL: [EventKind; 6] = [
        EventKind::GlucoseMeas,
        EventKind::InsulinBolus,
        EventKind::InsulinDripRate,
        EventKind::TubeFeed,
        EventKind::IvGlucoseDrip,
        EventKind::IvGlucoseBolus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::GlucoseMeas => "glucose_meas",
            EventKind::InsulinBolus => "insulin_bolus",
            EventKind::InsulinDripRate => "insulin_drip_rate",
            EventKind::TubeFeed => "tube_feed",
            EventKind::IvGlucoseDrip => "iv_glucose_drip",
            EventKind::IvGlucoseBolus => "iv_glucose_bolus",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEvent {
    pub t_min: f64,
    pub kind: EventKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatientTimeline {
    id: String,
    events: Vec<PatientEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimeline {
    id: String,
    events: Vec<RawEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    t_min: f64,
    kind: String,
    value: f64,
}

fn check_time(row: usize, t: f64) -> Result<f64, DataError> {
    if t.is_finite() && t >= 0.0 {
        Ok(t)
    } else {
        Err(DataError::InvalidTime { row, value: t.to_string() })
    }
}

fn check_value(row: usize, v: f64) -> Result<f64, DataError> {
    if v.is_finite() && v >= 0.0 {
        Ok(v)
    } else {
        Err(DataError::InvalidValue { row, value: v.to_string() })
    }
}

impl PatientTimeline {
    /// Validates the events and sorts them by time, keeping the input order
    /// of ties.
    pub fn new(id: impl Into<String>, mut events: Vec<PatientEvent>) -> Result<Self, DataError> {
        if events.is_empty() {
            return Err(DataError::Empty);
        }
        for (i, e) in events.iter().enumerate() {
            check_time(i + 1, e.t_min)?;
            check_value(i + 1, e.value)?;
        }
        if !events.iter().any(|e| e.kind == EventKind::GlucoseMeas) {
            return Err(DataError::NoGlucose);
        }
        events.sort_by(|a, b| a.t_min.total_cmp(&b.t_min));
        Ok(PatientTimeline { id: id.into(), events })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[PatientEvent] {
        &self.events
    }

    /// Time of the first event, taken as admission.
    pub fn admission(&self) -> f64 {
        self.events[0].t_min
    }

    pub fn end(&self) -> f64 {
        self.events[self.events.len() - 1].t_min
    }

    /// Parses the CSV schema. Rows are numbered from 1, excluding the header.
    pub fn from_csv<R: Read>(id: impl Into<String>, reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let missing: Vec<String> = CSV_HEADER
            .iter()
            .filter(|c| !headers.iter().any(|h| h == **c))
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(DataError::MissingColumns(missing));
        }
        if let Some(extra) = headers.iter().find(|h| !CSV_HEADER.contains(h)) {
            return Err(DataError::UnexpectedColumn(extra.to_string()));
        }
        let col = |name: &str| headers.iter().position(|h| h == name).expect("checked above");
        let (ct, ck, cv) = (col("t_min"), col("kind"), col("value"));
        let mut events = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| DataError::Malformed { row, message: e.to_string() })?;
            let field = |c: usize| rec.get(c).unwrap_or("");
            let t: f64 = field(ct)
                .parse()
                .map_err(|_| DataError::InvalidTime { row, value: field(ct).to_string() })?;
            let kind: EventKind = field(ck)
                .parse()
                .map_err(|kind| DataError::UnknownKind { row, kind })?;
            let value: f64 = field(cv)
                .parse()
                .map_err(|_| DataError::InvalidValue { row, value: field(cv).to_string() })?;
            events.push(PatientEvent { t_min: check_time(row, t)?, kind, value: check_value(row, value)? });
        }
        Self::new(id, events)
    }

    pub fn from_json<R: Read>(reader: R) -> Result<Self, DataError> {
        let raw: RawTimeline = serde_json::from_reader(reader).map_err(|e| DataError::Json(e.to_string()))?;
        let mut events = Vec::with_capacity(raw.events.len());
        for (i, e) in raw.events.into_iter().enumerate() {
            let row = i + 1;
            let kind: EventKind = e.kind.parse().map_err(|kind| DataError::UnknownKind { row, kind })?;
            events.push(PatientEvent { t_min: check_time(row, e.t_min)?, kind, value: check_value(row, e.value)? });
        }
        Self::new(raw.id, events)
    }

    /// Reads `.json` files as JSON and anything else as CSV, in which case
    /// the file stem becomes the patient id.
    pub fn from_path(path: &Path) -> Result<Self, DataError> {
        let file = File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let reader = BufReader::new(file);
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(reader)
        } else {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Self::from_csv(id, reader)
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        for e in &self.events {
            w.write_record([e.t_min.to_string(), e.kind.to_string(), e.value.to_string()])?;
        }
        w.flush().map_err(|source| DataError::Io { path: PathBuf::new(), source })?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serializes")
    }

    pub fn summary(&self) -> TimelineSummary {
        let count = |k: EventKind| self.events.iter().filter(|e| e.kind == k).count();
        let glucose: Vec<f64> = self.events.iter().filter(|e| e.kind == EventKind::GlucoseMeas).map(|e| e.value).collect();
        TimelineSummary {
            id: self.id.clone(),
            glucose: glucose.len(),
            days: (self.end() - self.admission()) / 1440.0,
            glucose_below_70: glucose.iter().filter(|&&g| g < 70.0 && g > 40.0).count(),
            glucose_below_40: glucose.iter().filter(|&&g| g < 40.0).count(),
            insulin: count(EventKind::InsulinBolus) + count(EventKind::InsulinDripRate),
            iv_glucose_drip: count(EventKind::IvGlucoseDrip),
            iv_glucose_bolus: count(EventKind::IvGlucoseBolus),
            tube_feed: count(EventKind::TubeFeed),
        }
    }
}

/// Per-patient event counts in the categories clinicians report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineSummary {
    pub id: String,
    pub glucose: usize,
    pub days: f64,
    /// Measurements in (40, 70) mg/dl.
    pub glucose_below_70: usize,
    pub glucose_below_40: usize,
    pub insulin: usize,
    pub iv_glucose_drip: usize,
    pub iv_glucose_bolus: usize,
    pub tube_feed: usize,
}

/// Which optional glucose sources are given to the filter. Measurements,
/// insulin and tube feeds are always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataInclusion {
    pub include_iv_drip: bool,
    pub include_iv_bolus: bool,
}

impl DataInclusion {
    pub fn all() -> Self {
        DataInclusion { include_iv_drip: true, include_iv_bolus: true }
    }
}

pub fn apply_inclusion(tl: &PatientTimeline, inc: DataInclusion) -> PatientTimeline {
    let events = tl
        .events
        .iter()
        .filter(|e| match e.kind {
            EventKind::IvGlucoseDrip => inc.include_iv_drip,
            EventKind::IvGlucoseBolus => inc.include_iv_bolus,
            _ => true,
        })
        .copied()
        .collect();
    PatientTimeline { id: tl.id.clone(), events }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub t: f64,
    /// mg/dl
    pub y: f64,
}

/// Model inputs and the measurement sequence extracted from a timeline.
#[derive(Debug, Clone)]
pub struct Exogenous {
    pub inputs: ExogenousInputs,
    /// Strictly increasing in time.
    pub measurements: Vec<Measurement>,
    pub admission: f64,
}

pub fn to_exogenous(tl: &PatientTimeline) -> Result<Exogenous, DataError> {
    to_exogenous_with(tl, DEFAULT_DRIP_INTERVAL)
}

/// As [`to_exogenous`], expanding IV glucose drips into pulses every
/// `drip_interval` minutes. Drips still running at the last event stop there.
pub fn to_exogenous_with(tl: &PatientTimeline, drip_interval: f64) -> Result<Exogenous, DataError> {
    let mut nutrition = Vec::new();
    let mut insulin = Vec::new();
    let mut measurements: Vec<Measurement> = Vec::new();
    let mut insulin_drip: Option<(f64, f64)> = None;
    let mut glucose_drip: Option<(f64, f64)> = None;
    let horizon = tl.end();

    for e in &tl.events {
        match e.kind {
            EventKind::GlucoseMeas => {
                match measurements.last_mut() {
                    Some(last) if last.t == e.t_min => {
                        warn!("{}: duplicate glucose measurement at t={} min; keeping the later row", tl.id, e.t_min);
                        last.y = e.value;
                    }
                    _ => measurements.push(Measurement { t: e.t_min, y: e.value }),
                }
            }
            EventKind::InsulinBolus => insulin.push(InsulinDelivery::Bolus { t: e.t_min, amount: e.value }),
            EventKind::InsulinDripRate => {
                if let Some((start, rate)) = insulin_drip.take() {
                    if rate > 0.0 && e.t_min > start {
                        insulin.push(InsulinDelivery::Drip { start, end: e.t_min, rate });
                    }
                }
                insulin_drip = Some((e.t_min, e.value));
            }
            EventKind::TubeFeed | EventKind::IvGlucoseBolus => nutrition.push(NutritionEvent { t: e.t_min, m: e.value }),
            EventKind::IvGlucoseDrip => {
                if let Some((start, rate)) = glucose_drip.take() {
                    nutrition.extend(drip_pulses(start, e.t_min, rate, drip_interval));
                }
                glucose_drip = Some((e.t_min, e.value));
            }
        }
    }
    if let Some((start, rate)) = insulin_drip {
        if rate > 0.0 {
            insulin.push(InsulinDelivery::Drip { start, end: f64::INFINITY, rate });
        }
    }
    if let Some((start, rate)) = glucose_drip {
        nutrition.extend(drip_pulses(start, horizon, rate, drip_interval));
    }
    Ok(Exogenous { inputs: ExogenousInputs::new(nutrition, insulin)?, measurements, admission: tl.admission() })
}

/// Pulses that deliver `rate` mg/min over `[start, end)`; each pulse of
/// size `m` contributes `m/60` in total, the last one is shortened.
fn drip_pulses(start: f64, end: f64, rate: f64, interval: f64) -> Vec<NutritionEvent> {
    let mut out = Vec::new();
    if rate <= 0.0 || end <= start {
        return out;
    }
    let mut i = 0u64;
    loop {
        let t = start + i as f64 * interval;
        if t >= end {
            break;
        }
        let width = interval.min(end - t);
        out.push(NutritionEvent { t, m: 60.0 * rate * width });
        i += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: f64, kind: EventKind, value: f64) -> PatientEvent {
        PatientEvent { t_min: t, kind, value }
    }

    #[test]
    fn single_row_csv() {
        let tl = PatientTimeline::from_csv("p", "t_min,kind,value\n60,glucose_meas,110\n".as_bytes()).unwrap();
        assert_eq!(tl.events(), &[ev(60.0, EventKind::GlucoseMeas, 110.0)]);
    }

    #[test]
    fn out_of_order_rows_are_sorted_stably() {
        let csv = "t_min,kind,value\n30,tube_feed,5\n10,glucose_meas,100\n30,glucose_meas,120\n20,insulin_bolus,3\n";
        let tl = PatientTimeline::from_csv("p", csv.as_bytes()).unwrap();
        let times: Vec<f64> = tl.events().iter().map(|e| e.t_min).collect();
        assert_eq!(times, vec![10.0, 20.0, 30.0, 30.0]);
        assert_eq!(tl.events()[2].kind, EventKind::TubeFeed);
        assert_eq!(tl.events()[3].kind, EventKind::GlucoseMeas);
    }

    #[test]
    fn schema_errors() {
        let err = PatientTimeline::from_csv("p", "t_min,kind,value\n0,glucose_meas,90\n5,cgm,90\n".as_bytes()).unwrap_err();
        assert!(matches!(&err, DataError::UnknownKind { row: 2, kind } if kind == "cgm"), "{err}");
        assert!(err.to_string().contains("row 2"));
        assert!(matches!(
            PatientTimeline::from_csv("p", "t_min,kind,value\n0,glucose_meas,-1\n".as_bytes()),
            Err(DataError::InvalidValue { row: 1, .. })
        ));
        assert!(matches!(
            PatientTimeline::from_csv("p", "t_min,kind\n0,glucose_meas\n".as_bytes()),
            Err(DataError::MissingColumns(c)) if c == vec!["value".to_string()]
        ));
        assert!(matches!(
            PatientTimeline::from_csv("p", "t_min,kind,value,unit\n0,glucose_meas,1,mg\n".as_bytes()),
            Err(DataError::UnexpectedColumn(c)) if c == "unit"
        ));
        assert!(matches!(PatientTimeline::from_csv("p", "t_min,kind,value\n".as_bytes()), Err(DataError::Empty)));
        assert!(matches!(
            PatientTimeline::from_csv("p", "t_min,kind,value\n0,tube_feed,1\n".as_bytes()),
            Err(DataError::NoGlucose)
        ));
        assert!(matches!(
            PatientTimeline::from_csv("p", "t_min,kind,value\n-3,glucose_meas,1\n".as_bytes()),
            Err(DataError::InvalidTime { row: 1, .. })
        ));
    }

    #[test]
    fn json_schema() {
        let doc = r#"{"id": "a", "events": [{"t_min": 5, "kind": "glucose_meas", "value": 100}]}"#;
        let tl = PatientTimeline::from_json(doc.as_bytes()).unwrap();
        assert_eq!(tl.id(), "a");
        let extra = r#"{"id": "a", "events": [{"t_min": 5, "kind": "glucose_meas", "value": 100, "unit": "x"}]}"#;
        assert!(matches!(PatientTimeline::from_json(extra.as_bytes()), Err(DataError::Json(_))));
        let bad = r#"{"id": "a", "events": [{"t_min": 5, "kind": "cgm", "value": 100}]}"#;
        assert!(matches!(PatientTimeline::from_json(bad.as_bytes()), Err(DataError::UnknownKind { row: 1, .. })));
    }

    #[test]
    fn inclusion_filters() {
        let tl = PatientTimeline::new(
            "p",
            vec![
                ev(0.0, EventKind::GlucoseMeas, 100.0),
                ev(1.0, EventKind::IvGlucoseDrip, 2.0),
                ev(2.0, EventKind::IvGlucoseBolus, 500.0),
                ev(3.0, EventKind::IvGlucoseDrip, 0.0),
                ev(4.0, EventKind::TubeFeed, 600.0),
            ],
        )
        .unwrap();
        let none = apply_inclusion(&tl, DataInclusion::default());
        assert!(none.events().iter().all(|e| !matches!(e.kind, EventKind::IvGlucoseDrip | EventKind::IvGlucoseBolus)));
        assert_eq!(apply_inclusion(&tl, DataInclusion::all()), tl);
        let bolus_only = apply_inclusion(&tl, DataInclusion { include_iv_drip: false, include_iv_bolus: true });
        assert_eq!(bolus_only.events().iter().filter(|e| e.kind == EventKind::IvGlucoseBolus).count(), 1);
        assert_eq!(bolus_only.events().len(), 3);
    }

    #[test]
    fn measurements_only() {
        let tl = PatientTimeline::new("p", vec![ev(0.0, EventKind::GlucoseMeas, 100.0), ev(60.0, EventKind::GlucoseMeas, 110.0)]).unwrap();
        let x = to_exogenous(&tl).unwrap();
        assert!(x.inputs.is_empty());
        assert_eq!(x.measurements.len(), 2);
    }

    #[test]
    fn tube_feed_maps_to_one_event() {
        let tl = PatientTimeline::new("p", vec![ev(0.0, EventKind::GlucoseMeas, 100.0), ev(5.0, EventKind::TubeFeed, 6000.0)]).unwrap();
        let x = to_exogenous(&tl).unwrap();
        assert_eq!(x.inputs.nutrition(), &[NutritionEvent { t: 5.0, m: 6000.0 }]);
    }

    #[test]
    fn duplicate_measurements_keep_last() {
        let tl = PatientTimeline::new(
            "p",
            vec![ev(0.0, EventKind::GlucoseMeas, 100.0), ev(0.0, EventKind::GlucoseMeas, 130.0), ev(9.0, EventKind::GlucoseMeas, 1.0)],
        )
        .unwrap();
        let x = to_exogenous(&tl).unwrap();
        assert_eq!(x.measurements, vec![Measurement { t: 0.0, y: 130.0 }, Measurement { t: 9.0, y: 1.0 }]);
    }

    #[test]
    fn drips_are_piecewise_constant() {
        let tl = PatientTimeline::new(
            "p",
            vec![
                ev(0.0, EventKind::GlucoseMeas, 100.0),
                ev(10.0, EventKind::InsulinDripRate, 2.0),
                ev(40.0, EventKind::InsulinDripRate, 0.0),
                ev(50.0, EventKind::InsulinDripRate, 1.0),
                ev(100.0, EventKind::IvGlucoseDrip, 3.0),
                ev(125.0, EventKind::IvGlucoseDrip, 0.0),
            ],
        )
        .unwrap();
        let x = to_exogenous(&tl).unwrap();
        assert_eq!(x.inputs.insulin_drip_rate(20.0), 2.0);
        assert_eq!(x.inputs.insulin_drip_rate(45.0), 0.0);
        assert_eq!(x.inputs.insulin_drip_rate(1e6), 1.0);
        // 3 mg/min for 25 min: pulses at 100, 110, 120 with widths 10, 10, 5
        let m: Vec<f64> = x.inputs.nutrition().iter().map(|e| e.m).collect();
        assert_eq!(m, vec![1800.0, 1800.0, 900.0]);
        let delivered: f64 = m.iter().sum::<f64>() / 60.0;
        assert_eq!(delivered, 75.0);
    }

    #[test]
    fn summary_counts() {
        let tl = PatientTimeline::new(
            "p",
            vec![
                ev(0.0, EventKind::GlucoseMeas, 35.0),
                ev(10.0, EventKind::GlucoseMeas, 65.0),
                ev(20.0, EventKind::GlucoseMeas, 40.0),
                ev(30.0, EventKind::InsulinBolus, 1.0),
                ev(40.0, EventKind::InsulinDripRate, 1.0),
                ev(50.0, EventKind::IvGlucoseBolus, 1.0),
                ev(2880.0, EventKind::TubeFeed, 1.0),
            ],
        )
        .unwrap();
        let s = tl.summary();
        assert_eq!((s.glucose, s.glucose_below_70, s.glucose_below_40), (3, 1, 1));
        assert_eq!((s.insulin, s.iv_glucose_drip, s.iv_glucose_bolus, s.tube_feed), (2, 0, 1, 1));
        assert_eq!(s.days, 2.0);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let tl = PatientTimeline::new(
            "p7",
            vec![
                ev(0.1, EventKind::GlucoseMeas, 101.3),
                ev(7.0 / 3.0, EventKind::TubeFeed, 1234.5678901234),
                ev(1e-7, EventKind::InsulinBolus, 0.0),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        tl.write_csv(&mut buf).unwrap();
        assert_eq!(PatientTimeline::from_csv("p7", buf.as_slice()).unwrap(), tl);
        assert_eq!(PatientTimeline::from_json(tl.to_json().as_bytes()).unwrap(), tl);
    }
}
