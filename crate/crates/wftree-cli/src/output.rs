//! Report records: one JSON object per run on stdout, optionally appended to a file.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::Value as Json;

use crate::params::Format;

/// Nested objects become dotted columns; arrays are joined with `;`.
pub fn flatten(v: &Json) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &Json, out: &mut BTreeMap<String, String>) {
        match v {
            Json::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            Json::Array(a) => {
                let parts: Vec<String> = a.iter().map(scalar).collect();
                out.insert(prefix.to_string(), parts.join(";"));
            }
            v => {
                out.insert(prefix.to_string(), scalar(v));
            }
        }
    }
    fn scalar(v: &Json) -> String {
        match v {
            Json::String(s) => s.clone(),
            Json::Null => String::new(),
            v => v.to_string(),
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

pub fn emit(record: &Json, path: Option<&Path>, format: Format) -> Result<()> {
    println!("{}", serde_json::to_string(record)?);
    let Some(path) = path else {
        return Ok(());
    };
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    match format {
        Format::Json => writeln!(f, "{}", serde_json::to_string(record)?)?,
        Format::Csv => {
            let row = flatten(record);
            let mut w = csv::WriterBuilder::new().from_writer(f);
            if fresh {
                w.write_record(row.keys())?;
            }
            w.write_record(row.values())?;
            w.flush()?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flatten_dots_and_joins() {
        let v = json!({"mode": "bench", "metrics": {"ops": {"reads": 3}, "per_thread_ops": [1, 2]}, "ok": true});
        let f = flatten(&v);
        assert_eq!(f["mode"], "bench");
        assert_eq!(f["metrics.ops.reads"], "3");
        assert_eq!(f["metrics.per_thread_ops"], "1;2");
        assert_eq!(f["ok"], "true");
    }
}
