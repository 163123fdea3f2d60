//! JSON-lines to CSV for plotting.

use std::io::{BufRead, Write};

use serde_json::Value;

#[derive(Debug)]
pub struct ExtractError(pub String);

/// Flattens nested objects and arrays into dotted column names.
fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&key(k), x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&key(&i.to_string()), x, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |cur, k| match cur {
        Value::Object(m) => m.get(k),
        Value::Array(a) => k.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => None,
    })
}

const HEADER: [&str; 5] = ["schema_version", "record", "version", "seed", "wall_time"];

/// One CSV row per record, or per element of `explode` when given.
/// Columns are the header fields, then the union of other keys in first-seen order.
pub fn extract<R: BufRead, W: Write>(
    input: R,
    output: W,
    record: Option<&str>,
    explode: Option<&str>,
) -> Result<usize, ExtractError> {
    let mut rows: Vec<Vec<(String, String)>> = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| ExtractError(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| ExtractError(format!("line {}: {e}", lineno + 1)))?;
        if v.get("schema_version").is_none() {
            return Err(ExtractError(format!("line {}: missing schema_version", lineno + 1)));
        }
        if let Some(kind) = record {
            if v.get("record").and_then(Value::as_str) != Some(kind) {
                continue;
            }
        }
        match explode {
            None => {
                let mut row = Vec::new();
                flatten("", &v, &mut row);
                rows.push(row);
            }
            Some(path) => {
                let Some(Value::Array(items)) = lookup(&v, path) else { continue };
                let mut base = v.clone();
                remove(&mut base, path);
                let mut head = Vec::new();
                flatten("", &base, &mut head);
                for (i, item) in items.iter().enumerate() {
                    let mut row = head.clone();
                    row.push(("index".into(), i.to_string()));
                    flatten(path, item, &mut row);
                    rows.push(row);
                }
            }
        }
    }
    let mut columns: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for k in HEADER {
        if rows.iter().any(|r| r.iter().any(|(c, _)| c == k)) {
            seen.insert(k.to_string());
            columns.push(k.to_string());
        }
    }
    for row in &rows {
        for (k, _) in row {
            if seen.insert(k.clone()) {
                columns.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(output);
    let err = |e: csv::Error| ExtractError(e.to_string());
    w.write_record(&columns).map_err(err)?;
    for row in &rows {
        let map: std::collections::HashMap<&str, &str> = row.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        w.write_record(columns.iter().map(|c| map.get(c.as_str()).copied().unwrap_or(""))).map_err(err)?;
    }
    w.flush().map_err(|e| ExtractError(e.to_string()))?;
    Ok(rows.len())
}

fn remove(v: &mut Value, path: &str) {
    let (parent, last) = match path.rsplit_once('.') {
        Some((p, l)) => (Some(p), l),
        None => (None, path),
    };
    let target = match parent {
        Some(p) => p.split('.').try_fold(v, |cur, k| cur.get_mut(k)),
        None => Some(v),
    };
    if let Some(Value::Object(m)) = target {
        m.remove(last);
    }
}
