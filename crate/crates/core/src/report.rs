//! CSV and JSON run reports.
//!
//! CSV layout: a `# config: <json>` line, the fixed header
//! [`CSV_HEADER`], then one row per run. Floats use Rust's shortest
//! round-trip formatting, so identical results give identical bytes.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::episodes::{RunConfig, RunResult};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "config_hash,mode,score,lambda,tau,ways,shots,queries,episodes,mean_acc,std_acc,seconds";

/// First 16 hex digits of the SHA-256 of `value`'s compact JSON.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn run_identity(result: &RunResult, data: &str) -> Value {
    json!({
        "data": data,
        "spec": result.spec,
        "config": result.config,
    })
}

fn strength_cell(cfg: &RunConfig) -> String {
    cfg.strength.to_string()
}

pub fn csv_row(result: &RunResult, data: &str) -> String {
    let c = &result.config;
    let s = &result.spec;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
        config_hash(&run_identity(result, data)),
        c.mode,
        c.score,
        strength_cell(c),
        c.tau,
        s.ways,
        s.shots,
        s.queries_per_class,
        c.episodes,
        result.mean,
        result.std,
        result.seconds,
    )
}

pub fn write_csv<W: Write>(w: &mut W, header_config: &Value, results: &[RunResult], data: &str) -> Result<()> {
    let line = serde_json::to_string(header_config).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w, "# config: {line}")?;
    writeln!(w, "{CSV_HEADER}")?;
    for r in results {
        writeln!(w, "{}", csv_row(r, data))?;
    }
    Ok(())
}

pub fn to_json(header_config: &Value, results: &[RunResult], data: &str) -> Value {
    let runs: Vec<Value> = results
        .iter()
        .map(|r| {
            json!({
                "config_hash": config_hash(&run_identity(r, data)),
                "mode": r.config.mode,
                "score": r.config.score,
                "strength": r.config.strength,
                "tau": r.config.tau,
                "spec": r.spec,
                "episodes": r.config.episodes,
                "mean_acc": r.mean,
                "std_acc": r.std,
                "seconds": r.seconds,
                "accuracies": r.accuracies,
            })
        })
        .collect();
    json!({ "config": header_config, "runs": runs })
}

pub fn write_json<W: Write>(w: &mut W, header_config: &Value, results: &[RunResult], data: &str) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, &to_json(header_config, results, data))
        .map_err(|e| Error::Format(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::EpisodeSpec;

    fn result(mean: f64) -> RunResult {
        RunResult {
            config: RunConfig::default(),
            spec: EpisodeSpec::default(),
            accuracies: vec![mean],
            mean,
            std: 0.0,
            seconds: 0.25,
        }
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_csv(&mut out, &json!({"seed": 1}), &[result(0.5), result(0.75)], "s.tlt").unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# config: {\"seed\":1}");
        assert_eq!(lines[1], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        let cells: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(cells.len(), CSV_HEADER.split(',').count());
        assert_eq!(&cells[1..4], &["frozen", "conf", "1"]);
        assert_eq!(cells[9], "0.5");
        assert_eq!(cells[11], "0.250");
    }

    #[test]
    fn hash_tracks_config() {
        let a = config_hash(&json!({"x": 1}));
        assert_eq!(a.len(), 16);
        assert_eq!(a, config_hash(&json!({"x": 1})));
        assert_ne!(a, config_hash(&json!({"x": 2})));
    }

    #[test]
    fn json_carries_per_episode_accuracies() {
        let v = to_json(&json!({}), &[result(0.6)], "d");
        assert_eq!(v["runs"][0]["accuracies"][0], 0.6);
        assert_eq!(v["runs"][0]["mode"], "frozen");
    }
}
