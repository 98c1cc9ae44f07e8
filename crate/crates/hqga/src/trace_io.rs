//! Trace JSONL: one record per line,
//! `{"sample_id", "levels": {"O": [..], "F": [..], "C": [..]}, "prediction"}`
//! where each unit is `{"unit", "alpha", "A", "beta"}` and `alpha`, `A`,
//! `beta` may be `null`. Values are written as shortest round-trip `f32`
//! decimals (at most 9 significant digits), so import is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use hqga_core::trace::{validate_record, TraceRecord};
use serde_json::Value;

use crate::error::{IoError, Result};

/// Row-stochasticity tolerance applied on import.
pub const STOCHASTIC_TOL: f64 = 1e-6;

pub fn export_traces(records: &[TraceRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(|e| IoError::io(path, e))?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| IoError::json(path, e))?;
        w.write_all(b"\n").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

fn number_rows(v: &Value, depth: usize) -> bool {
    match (depth, v) {
        (0, Value::Number(_)) => true,
        (d, Value::Array(items)) if d > 0 => items.iter().all(|x| number_rows(x, d - 1)),
        _ => false,
    }
}

/// Structural check of one decoded line against the trace schema.
pub fn check_schema(v: &Value) -> std::result::Result<(), String> {
    let obj = v.as_object().ok_or("record is not an object")?;
    for key in obj.keys() {
        if !["sample_id", "levels", "prediction", "answer", "candidate"].contains(&key.as_str()) {
            return Err(format!("unknown key {key:?}"));
        }
    }
    if !obj.get("sample_id").is_some_and(Value::is_string) {
        return Err("sample_id must be a string".into());
    }
    if !obj.get("prediction").is_some_and(Value::is_u64) {
        return Err("prediction must be a non-negative integer".into());
    }
    for key in ["answer", "candidate"] {
        if obj.get(key).is_some_and(|x| !x.is_u64()) {
            return Err(format!("{key} must be a non-negative integer"));
        }
    }
    let levels = obj.get("levels").and_then(Value::as_object).ok_or("levels must be an object")?;
    if levels.len() != 3 {
        return Err("levels must hold exactly O, F and C".into());
    }
    for level in ["O", "F", "C"] {
        let units = levels.get(level).and_then(Value::as_array).ok_or(format!("levels.{level} must be a list"))?;
        for (i, u) in units.iter().enumerate() {
            let u = u.as_object().ok_or(format!("levels.{level}[{i}] is not an object"))?;
            if u.len() != 4 || !u.get("unit").is_some_and(Value::is_u64) {
                return Err(format!("levels.{level}[{i}] needs exactly unit, alpha, A, beta"));
            }
            for (key, depth) in [("alpha", 2), ("A", 2), ("beta", 1)] {
                match u.get(key) {
                    Some(Value::Null) => {}
                    Some(x) if number_rows(x, depth) => {}
                    _ => return Err(format!("levels.{level}[{i}].{key} must be null or numeric rank-{depth}")),
                }
            }
        }
    }
    Ok(())
}

/// Reads, schema-checks and validates every record.
pub fn import_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let reader = BufReader::new(fs::File::open(path).map_err(|e| IoError::io(path, e))?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |reason: String| IoError::json(path, format!("line {}: {reason}", n + 1));
        let value: Value = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        check_schema(&value).map_err(at)?;
        let record: TraceRecord = serde_json::from_value(value).map_err(|e| at(e.to_string()))?;
        validate_record(&record, STOCHASTIC_TOL)?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn unit() -> Value {
        json!({"unit": 0, "alpha": null, "A": [[1.0]], "beta": [1.0]})
    }

    #[test]
    fn schema_accepts_minimal_record_and_rejects_malformed_ones() {
        let good = json!({"sample_id": "s", "levels": {"O": [], "F": [], "C": [unit()]}, "prediction": 0});
        check_schema(&good).unwrap();
        let mut extra = good.clone();
        extra["junk"] = json!(1);
        assert!(check_schema(&extra).is_err());
        let mut bad_beta = good.clone();
        bad_beta["levels"]["C"][0]["beta"] = json!("x");
        assert!(check_schema(&bad_beta).is_err());
        let mut no_pred = good;
        no_pred.as_object_mut().unwrap().remove("prediction");
        assert!(check_schema(&no_pred).is_err());
    }
}
