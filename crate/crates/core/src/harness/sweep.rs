use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{apply_override, ExperimentConfig};
use super::pipeline::{run_pipeline, PipelineReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOverride {
    pub label: String,
    /// Dotted config path, e.g. `predictor.style.layers`.
    pub key: String,
    pub value: toml::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub overrides: Vec<SweepOverride>,
}

impl SweepAxis {
    /// `layers`, `pooling` or `fusion`, or `key=v1,v2,...` with TOML values.
    pub fn parse(spec: &str) -> Result<Self> {
        let (name, key, values): (&str, &str, Vec<toml::Value>) = match spec {
            "layers" => ("layers", "predictor.style.layers", [4, 6, 7, 8, 9].map(toml::Value::Integer).to_vec()),
            "pooling" => (
                "pooling",
                "predictor.style.pooling",
                ["none", "average", "self-attention"].map(|s| toml::Value::String(s.into())).to_vec(),
            ),
            "fusion" => (
                "fusion",
                "predictor.fusion",
                ["direct-injection", "cross-attention"].map(|s| toml::Value::String(s.into())).to_vec(),
            ),
            other => {
                let (key, list) = other
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("axis `{other}`: expected layers|pooling|fusion or key=v1,v2")))?;
                let values = list
                    .split(',')
                    .map(|v| parse_value(v.trim()))
                    .collect::<Result<Vec<_>>>()?;
                (key, key, values)
            }
        };
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{spec}` has no values")));
        }
        Ok(Self {
            name: name.to_string(),
            overrides: values
                .into_iter()
                .map(|value| SweepOverride {
                    label: match &value {
                        toml::Value::String(s) => s.clone(),
                        v => v.to_string(),
                    },
                    key: key.to_string(),
                    value,
                })
                .collect(),
        })
    }
}

fn parse_value(text: &str) -> Result<toml::Value> {
    let table: toml::Table = format!("v = {text}")
        .parse()
        .or_else(|_| format!("v = \"{text}\"").parse())
        .map_err(|e: toml::de::Error| Error::Config(format!("bad override value `{text}`: {e}")))?;
    Ok(table["v"].clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub key: String,
    pub config_digest: Option<String>,
    pub report: Option<PipelineReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: String,
    pub base_config_digest: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "| {} | Variation | FGD | BC | silhouette | status |\n|---|---|---|---|---|---|\n",
            self.axis
        );
        for r in &self.rows {
            match &r.report {
                Some(p) => s.push_str(&format!(
                    "| {} | {:.6} | {:.6} | {:.4} | {:.4} | ok |\n",
                    r.label, p.metrics.variation, p.metrics.fgd, p.metrics.bc, p.style.silhouette
                )),
                None => s.push_str(&format!(
                    "| {} | - | - | - | - | failed: {} |\n",
                    r.label,
                    r.error.as_deref().unwrap_or("").replace('|', "/")
                )),
            }
        }
        s
    }
}

fn run_row(base: &ExperimentConfig, o: &SweepOverride, out: &Path) -> SweepRow {
    let start = Instant::now();
    let mut row = SweepRow {
        label: o.label.clone(),
        key: o.key.clone(),
        config_digest: None,
        report: None,
        error: None,
        seconds: 0.0,
    };
    let result = apply_override(base, &o.key, o.value.clone()).and_then(|mut cfg| {
        cfg.name = format!("{}-{}", base.name, o.label);
        row.config_digest = Some(cfg.digest());
        run_pipeline(&cfg, &out.join(sanitize(&o.label)))
    });
    match result {
        Ok(m) => row.report = Some(m.report),
        Err(e) => {
            log::warn!("sweep row {} failed: {e}", o.label);
            row.error = Some(error_chain(&e));
        }
    }
    row.seconds = start.elapsed().as_secs_f64();
    row
}

fn error_chain(e: &Error) -> String {
    let mut s = e.to_string();
    let mut cur: Option<&dyn std::error::Error> = std::error::Error::source(e);
    while let Some(c) = cur {
        s.push_str(&format!(": {c}"));
        cur = c.source();
    }
    s
}

fn sanitize(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Runs the pipeline once per override, `jobs` rows at a time. A failed row
/// is recorded and the sweep continues.
pub fn ablation_sweep(base: &ExperimentConfig, axis: &SweepAxis, out: &Path, jobs: usize) -> Result<SweepTable> {
    base.validate()?;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; axis.overrides.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, axis.overrides.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(o) = axis.overrides.get(k) else { break };
                let row = run_row(base, o, out);
                rows.lock().expect("sweep rows")[k] = Some(row);
            });
        }
    });
    let table = SweepTable {
        axis: axis.name.clone(),
        base_config_digest: base.digest(),
        rows: rows.into_inner().expect("sweep rows").into_iter().map(|r| r.expect("row ran")).collect(),
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    std::fs::write(out.join("sweep.json"), json + "\n").map_err(|e| Error::io(out.join("sweep.json"), e))?;
    std::fs::write(out.join("sweep.md"), table.to_markdown()).map_err(|e| Error::io(out.join("sweep.md"), e))?;
    Ok(table)
}
