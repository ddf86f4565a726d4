//! Lossless CSV/JSON output.
//!
//! Every float is written with 17 significant digits so that it round-trips
//! bit-exactly; non-finite values become `null` in JSON and `NaN`/`inf` in CSV.

use std::io::Write;

use serde::Serialize;
use serde_json::{Map, Number, Value};

use crate::hybrid::{HybridTrajectory, ImpactEvent, Termination};
use crate::phase::{wrap_angle, PhasePoint};

/// 17 significant digits in scientific notation.
pub fn format_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// JSON number carrying the exact 17-digit decimal, or `null`.
pub fn json_f64(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    // The string is a valid JSON number literal, so parsing cannot fail.
    format_f64(x)
        .parse::<Number>()
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

pub fn json_vec(v: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(v.into_iter().map(json_f64).collect())
}

/// Convert an arbitrary serializable value, then replace every float with
/// its 17-digit form.
pub fn to_json_value<T: Serialize>(value: &T) -> serde_json::Result<Value> {
    Ok(normalize(serde_json::to_value(value)?))
}

fn normalize(v: Value) -> Value {
    match v {
        Value::Number(n) => match n.as_f64() {
            Some(x) if n.is_f64() => json_f64(x),
            _ => Value::Number(n),
        },
        Value::Array(a) => Value::Array(a.into_iter().map(normalize).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, normalize(v))).collect()),
        other => other,
    }
}

fn wrapped(x: &PhasePoint, angle_coords: &[usize]) -> Vec<f64> {
    x.q
        .iter()
        .enumerate()
        .map(|(i, &v)| if angle_coords.contains(&i) { wrap_angle(v) } else { v })
        .collect()
}

/// Header `t,q0..,p0..,segment` followed by one row per sample.
///
/// Angle coordinates are wrapped to `(-π, π]` here and nowhere else.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    trajectory: &HybridTrajectory,
    angle_coords: &[usize],
) -> std::io::Result<()> {
    let n = trajectory.dim;
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("q{i}")));
    header.extend((0..n).map(|i| format!("p{i}")));
    header.push("segment".to_string());
    writeln!(out, "{}", header.join(","))?;
    for (t, seg, x) in trajectory.samples() {
        let mut row = vec![format_f64(t)];
        row.extend(wrapped(x, angle_coords).into_iter().map(format_f64));
        row.extend(x.p.iter().map(|&v| format_f64(v)));
        row.push(seg.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

fn point_json(x: &PhasePoint, angle_coords: &[usize]) -> Value {
    let mut m = Map::new();
    m.insert("q".into(), json_vec(wrapped(x, angle_coords)));
    m.insert("p".into(), json_vec(x.p.iter().copied()));
    Value::Object(m)
}

fn event_json(e: &ImpactEvent, angle_coords: &[usize]) -> Value {
    let mut m = Map::new();
    m.insert("t".into(), json_f64(e.t));
    m.insert("guard_id".into(), Value::from(e.guard_id));
    m.insert("x_minus".into(), point_json(&e.x_minus, angle_coords));
    m.insert("x_plus".into(), point_json(&e.x_plus, angle_coords));
    m.insert("departs".into(), Value::Bool(e.departs));
    Value::Object(m)
}

/// `{"events": [...], "termination": {...}}`.
pub fn events_json(trajectory: &HybridTrajectory, angle_coords: &[usize]) -> Value {
    let mut m = Map::new();
    m.insert(
        "events".into(),
        Value::Array(trajectory.events.iter().map(|e| event_json(e, angle_coords)).collect()),
    );
    m.insert(
        "termination".into(),
        to_json_value(&trajectory.termination).unwrap_or(Value::Null),
    );
    Value::Object(m)
}

pub fn termination_label(t: &Termination) -> &'static str {
    match t {
        Termination::HorizonReached => "horizon_reached",
        Termination::ZenoGuard { .. } => "zeno_guard",
        Termination::Error { .. } => "error",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        for &x in &[0.1, 1.0 / 3.0, -2.5e-300, 1.7976931348623157e308, 5e-324] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
            let v = json_f64(x);
            let text = serde_json::to_string(&v).unwrap();
            assert_eq!(text.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn non_finite_becomes_null() {
        assert_eq!(json_f64(f64::NAN), Value::Null);
        assert_eq!(json_f64(f64::INFINITY), Value::Null);
        assert_eq!(format_f64(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn normalize_rewrites_nested_floats() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: Vec<f64>,
            n: usize,
        }
        let v = to_json_value(&S { a: 0.1, b: vec![f64::NAN, 2.0], n: 3 }).unwrap();
        let text = serde_json::to_string(&v).unwrap();
        assert!(text.contains("1.0000000000000001e-1"));
        assert!(text.contains("null"));
        assert!(text.contains("\"n\":3"));
    }
}
