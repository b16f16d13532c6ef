//! On-disk formats: trajectory CSV, metrics JSON, and the atomic writer
//! behind every file the CLI produces.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sphereflow::dynamics::{MetricSample, Snapshot};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

pub const TRAJECTORY_SCHEMA: &str = "sphereflow-trajectory/v1";
pub const METRICS_SCHEMA: &str = "sphereflow-metrics/v1";
pub const ORACLE_SCHEMA: &str = "sphereflow-oracle/v1";
pub const VERIFY_SCHEMA: &str = "sphereflow-verify/v1";

/// Writes through a temporary file in the target directory and renames it
/// into place, so a crash never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Git's object hash (`"blob <len>\0"` prefix), computed with SHA-256.
pub fn content_hash(body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(body);
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        write!(out, "{b:02x}").expect("writing to a String");
    }
    out
}

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// `# key: value` header lines followed by the hashed CSV body.
pub fn with_header(schema: &str, echo: &RunConfig, seed: u64, body: &str) -> String {
    format!(
        "# schema: {schema}\n# config: {}\n# seed: {seed}\n# content-hash: sha256:{}\n{body}",
        echo.to_json_line(),
        content_hash(body.as_bytes())
    )
}

pub fn trajectory_csv(echo: &RunConfig, seed: u64, snapshots: &[Snapshot]) -> String {
    let d = snapshots.first().map_or(0, |s| s.state.dim());
    let mut body = String::from("step,time,rescaled_time,particle");
    for c in 0..d {
        write!(body, ",c{c}").expect("writing to a String");
    }
    body.push('\n');
    for snap in snapshots {
        let prefix = format!(
            "{},{},{}",
            snap.step,
            fmt17(snap.time),
            fmt17(snap.rescaled_time)
        );
        for (i, x) in snap.state.iter().enumerate() {
            body.push_str(&prefix);
            write!(body, ",{i}").expect("writing to a String");
            for c in x {
                body.push(',');
                body.push_str(&fmt17(*c));
            }
            body.push('\n');
        }
    }
    with_header(TRAJECTORY_SCHEMA, echo, seed, &body)
}

/// A parsed header plus the CSV body below it.
#[derive(Debug, Clone)]
pub struct HeaderedCsv {
    pub schema: String,
    pub config: RunConfig,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

fn mismatch(path: &Path, what: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {what}", path.display()))
}

/// Reads a file written by [`with_header`], checking the schema name and
/// the content hash.
pub fn read_headered_csv(path: &Path, schema: &str) -> CliResult<HeaderedCsv> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut fields = BTreeMap::new();
    let mut rest = text.as_str();
    while let Some(line) = rest.strip_prefix("# ") {
        let (line, tail) = line.split_once('\n').unwrap_or((line, ""));
        let (key, value) = line
            .split_once(": ")
            .ok_or_else(|| mismatch(path, format!("malformed header line '{line}'")))?;
        fields.insert(key, value);
        rest = tail;
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| mismatch(path, format!("header has no '{k}'")))
    };
    if get("schema")? != schema {
        return Err(mismatch(
            path,
            format!("schema '{}' is not '{schema}'", get("schema")?),
        ));
    }
    let want = format!("sha256:{}", content_hash(rest.as_bytes()));
    if get("content-hash")? != want {
        return Err(mismatch(path, "content hash does not match the body"));
    }
    let config = RunConfig::from_json(get("config")?)?;
    let seed = get("seed")?
        .parse()
        .map_err(|_| mismatch(path, "seed is not an integer"))?;
    let mut lines = rest.lines();
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| mismatch(path, "missing column header"))?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| mismatch(path, format!("row {} is not numeric", i + 1)))?;
            if row.len() != columns.len() {
                return Err(mismatch(path, format!("row {} has {} fields", i + 1, row.len())));
            }
            Ok(row)
        })
        .collect::<CliResult<_>>()?;
    Ok(HeaderedCsv {
        schema: schema.into(),
        config,
        seed,
        columns,
        rows,
    })
}

/// Checks the trajectory column layout and returns `d`.
pub fn trajectory_dim(csv: &HeaderedCsv, path: &Path) -> CliResult<usize> {
    let fixed = ["step", "time", "rescaled_time", "particle"];
    let d = csv.columns.len().saturating_sub(fixed.len());
    let ok = csv.columns.len() > fixed.len()
        && csv.columns[..4] == fixed
        && (0..d).all(|c| csv.columns[4 + c] == format!("c{c}"));
    if !ok {
        return Err(mismatch(path, "columns are not step,time,rescaled_time,particle,c0.."));
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub t: f64,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

impl From<&MetricSample> for SampleRecord {
    fn from(m: &MetricSample) -> Self {
        SampleRecord {
            t: m.t,
            value: m.value,
            stderr: m.stderr,
        }
    }
}

/// `series` maps each observable to its samples; the rest is provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub schema: String,
    pub seed: u64,
    pub config: RunConfig,
    pub series: BTreeMap<String, Vec<SampleRecord>>,
}

impl MetricsFile {
    pub fn new(echo: &RunConfig, seed: u64, metrics: &BTreeMap<String, Vec<MetricSample>>) -> Self {
        MetricsFile {
            schema: METRICS_SCHEMA.into(),
            seed,
            config: echo.clone(),
            series: metrics
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(SampleRecord::from).collect()))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: MetricsFile =
            serde_json::from_str(&text).map_err(|e| mismatch(path, e))?;
        if m.schema != METRICS_SCHEMA {
            return Err(mismatch(path, format!("schema '{}' is not '{METRICS_SCHEMA}'", m.schema)));
        }
        Ok(m)
    }
}
