//! Text serialization helpers for line-delimited JSON records.
//!
//! Reals are written with 17 significant digits (`{:.16e}`), which is enough
//! to round-trip any finite `f64`; parsing relies on serde_json's
//! correctly-rounded float reader.

use serde::de::DeserializeOwned;
use serde::Serializer;
use serde_json::value::RawValue;

fn raw17(v: f64) -> Box<RawValue> {
    let text = if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no representation; records must not contain these.
        "null".to_string()
    };
    RawValue::from_string(text).expect("formatted float is valid JSON")
}

pub fn f64_17<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    serde::Serialize::serialize(&raw17(*v), s)
}

pub fn vec_f64_17<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
    let raw: Vec<Box<RawValue>> = v.iter().map(|&x| raw17(x)).collect();
    s.collect_seq(raw)
}

pub fn nested_f64_17<S: Serializer>(v: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
    let raw: Vec<Vec<Box<RawValue>>> = v
        .iter()
        .map(|row| row.iter().map(|&x| raw17(x)).collect())
        .collect();
    s.collect_seq(raw)
}

/// Parses one JSON line, reporting the record index on failure.
pub fn parse_record<T: DeserializeOwned>(
    line: &str,
    path: &std::path::Path,
    record: usize,
) -> crate::Result<T> {
    serde_json::from_str(line).map_err(|e| crate::Error::Parse {
        path: path.to_path_buf(),
        record,
        reason: e.to_string(),
    })
}

/// Writes one serializable value as a compact JSON line.
pub fn to_line<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("records serialize");
    s.push('\n');
    s
}
