//! Request records and JSON Lines trace IO.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// One serving request. `arrival_time` may be absent in a trace file, in
/// which case arrivals are generated from the configured Poisson rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_time: Option<f64>,
    pub prompt_len: u64,
    pub task_type: String,
    /// Policy id -> true response tokens under that policy.
    pub output_len: BTreeMap<String, u64>,
}

impl Request {
    pub fn arrival(&self) -> f64 {
        self.arrival_time.unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::invalid(format!(
                "request {}: prompt_len must be >= 1",
                self.id
            )));
        }
        if let Some(t) = self.arrival_time {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::invalid(format!(
                    "request {}: arrival_time must be finite and >= 0",
                    self.id
                )));
            }
        }
        for (policy, &len) in &self.output_len {
            if len == 0 {
                return Err(Error::invalid(format!(
                    "request {}: output_len for '{policy}' must be >= 1",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Read a JSON Lines request trace.
pub fn load_trace(path: &Path) -> Result<Vec<Request>> {
    if !path.exists() {
        return Err(Error::MissingFile {
            kind: "trace",
            path: path.to_path_buf(),
        });
    }
    let file = std::fs::File::open(path)?;
    parse_trace(std::io::BufReader::new(file), &path.display().to_string())
}

pub fn parse_trace(reader: impl BufRead, name: &str) -> Result<Vec<Request>> {
    let mut requests = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let request: Request = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        request.validate().map_err(|e| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        requests.push(request);
    }
    Ok(requests)
}

/// Write requests as JSON Lines.
pub fn write_trace(path: &Path, requests: &[Request]) -> Result<()> {
    let mut out = String::new();
    for request in requests {
        out.push_str(&serde_json::to_string(request).expect("request serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
