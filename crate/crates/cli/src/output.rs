//! Report sinks: metrics tables as CSV or JSON lines, generic CSV tables
//! for the model reports, and a bit-exact parameter dump.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use tandem_core::engine::{MetricsRecord, RunOutput};
use tandem_core::Error;

use crate::config::FormatToken;

/// Writer for a destination path, where "-" means stdout.
pub fn open_sink(path: &str) -> Result<Box<dyn Write>, Error> {
    if path == "-" {
        Ok(Box::new(BufWriter::new(io::stdout())))
    } else {
        let file = File::create(path)
            .map_err(|e| Error::usage(format!("cannot write {path}: {e}")))?;
        Ok(Box::new(BufWriter::new(file)))
    }
}

fn io_err(e: io::Error) -> Error {
    Error::usage(format!("write failed: {e}"))
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: u64,
    env_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sps: Option<f64>,
    avg_episode_return: f64,
    policy_lag: u64,
}

impl MetricsRow {
    fn from(m: &MetricsRecord, strip_timing: bool) -> Self {
        MetricsRow {
            epoch: m.epoch,
            env_steps: m.env_steps,
            wall_time: (!strip_timing).then_some(m.wall_time),
            sps: (!strip_timing).then_some(m.sps),
            avg_episode_return: m.avg_episode_return,
            policy_lag: m.policy_lag,
        }
    }
}

/// Write the per-epoch metrics table in the chosen format.
pub fn write_metrics(
    out: &mut dyn Write,
    metrics: &[MetricsRecord],
    format: FormatToken,
    strip_timing: bool,
) -> Result<(), Error> {
    match format {
        FormatToken::Csv => {
            let header = if strip_timing {
                "epoch,env_steps,avg_episode_return,policy_lag"
            } else {
                "epoch,env_steps,wall_time,sps,avg_episode_return,policy_lag"
            };
            writeln!(out, "{header}").map_err(io_err)?;
            for m in metrics {
                if strip_timing {
                    writeln!(
                        out,
                        "{},{},{},{}",
                        m.epoch, m.env_steps, m.avg_episode_return, m.policy_lag
                    )
                    .map_err(io_err)?;
                } else {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        m.epoch, m.env_steps, m.wall_time, m.sps, m.avg_episode_return,
                        m.policy_lag
                    )
                    .map_err(io_err)?;
                }
            }
        }
        FormatToken::Jsonl => {
            for m in metrics {
                let row = MetricsRow::from(m, strip_timing);
                let line = serde_json::to_string(&row)
                    .map_err(|e| Error::usage(format!("serialize failed: {e}")))?;
                writeln!(out, "{line}").map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

/// Generic CSV table: a header plus preformatted rows.
pub fn write_csv_table(
    out: &mut dyn Write,
    header: &str,
    rows: &[String],
) -> Result<(), Error> {
    writeln!(out, "{header}").map_err(io_err)?;
    for row in rows {
        writeln!(out, "{row}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Bit-exact snapshot of the trained parameters: weights as raw IEEE-754
/// bits so comparisons across runs are unambiguous.
#[derive(Serialize)]
pub struct ParamsDump {
    pub feature_dim: usize,
    pub action_count: usize,
    pub policy_version: u64,
    pub value_version: u64,
    pub transition_digest: u64,
    pub policy_weight_bits: Vec<u64>,
    pub value_weight_bits: Vec<u64>,
    pub value_bias_bits: u64,
}

impl ParamsDump {
    pub fn from_run(out: &RunOutput<f64>) -> Self {
        ParamsDump {
            feature_dim: out.policy.feature_dim,
            action_count: out.policy.action_count,
            policy_version: out.policy.version,
            value_version: out.value.version,
            transition_digest: out.transition_digest,
            policy_weight_bits: out.policy.weights.iter().map(|w| w.to_bits()).collect(),
            value_weight_bits: out.value.weights.iter().map(|w| w.to_bits()).collect(),
            value_bias_bits: out.value.bias.to_bits(),
        }
    }

    pub fn write_to(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::usage(format!("serialize failed: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::usage(format!("cannot write {}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_metrics() -> Vec<MetricsRecord> {
        vec![
            MetricsRecord {
                epoch: 0,
                env_steps: 32,
                wall_time: 0.5,
                sps: 64.0,
                avg_episode_return: 0.25,
                policy_lag: 0,
            },
            MetricsRecord {
                epoch: 1,
                env_steps: 32,
                wall_time: 0.25,
                sps: 128.0,
                avg_episode_return: 0.5,
                policy_lag: 1,
            },
        ]
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &sample_metrics(), FormatToken::Csv, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,env_steps,wall_time,sps,avg_episode_return,policy_lag");
        assert_eq!(lines[1], "0,32,0.5,64,0.25,0");
        assert_eq!(lines[2], "1,32,0.25,128,0.5,1");
    }

    #[test]
    fn strip_timing_drops_columns() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &sample_metrics(), FormatToken::Csv, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "epoch,env_steps,avg_episode_return,policy_lag");
        assert!(text.lines().all(|l| l.split(',').count() == 4));
    }

    #[test]
    fn jsonl_rows_parse_and_respect_strip() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &sample_metrics(), FormatToken::Jsonl, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v.get("wall_time").is_none());
            assert!(v.get("epoch").is_some());
        }
        let mut buf = Vec::new();
        write_metrics(&mut buf, &sample_metrics(), FormatToken::Jsonl, false).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(String::from_utf8(buf).unwrap().lines().next().unwrap())
                .unwrap();
        assert_eq!(first["sps"], serde_json::json!(64.0));
    }
}
