//! File formats.
//!
//! A dataset is a long-format CSV preceded by one header line:
//!
//! ```text
//! # n=200 p=10 q=10
//! t,i,j,value
//! 1,1,1,0.5
//! ```
//!
//! Indices are one-based and every cell appears exactly once. Factor files use the same layout
//! with `p`, `q` replaced by the factor dimensions. The JSON variant stores
//! `{"n", "p", "q", "data"}` with `data[t][i][j]`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use msdmf_core::{Mat, MatrixSeries, ModelParams};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }

    fn of_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonTensor {
    n: usize,
    p: usize,
    q: usize,
    data: Vec<Vec<Vec<f64>>>,
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let body = line.strip_prefix('#').ok_or_else(|| anyhow!("line 1: expected a header like '# n=3 p=2 q=2'"))?;
    let (mut n, mut p, mut q) = (None, None, None);
    for token in body.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| anyhow!("line 1: malformed header field '{token}'"))?;
        let value: usize = value.parse().with_context(|| format!("line 1: header field '{key}' is not a count"))?;
        match key {
            "n" => n = Some(value),
            "p" => p = Some(value),
            "q" => q = Some(value),
            _ => {}
        }
    }
    match (n, p, q) {
        (Some(n), Some(p), Some(q)) if n > 0 && p > 0 && q > 0 => Ok((n, p, q)),
        _ => bail!("line 1: header needs positive n, p and q"),
    }
}

/// Parses a long-format tensor.
pub fn parse_long(text: &str) -> Result<Vec<Mat>> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let (n, p, q) = parse_header(first.trim_end())?;
    let mut values = vec![0.0; n * p * q];
    let mut seen = vec![false; n * p * q];
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rest.as_bytes());
    let headers = reader.headers().context("line 2: missing column header")?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "i", "j", "value"] {
        bail!("line 2: expected columns t,i,j,value, found {}", headers.iter().collect::<Vec<_>>().join(","));
    }
    for record in reader.records() {
        let record = record.context("malformed CSV")?;
        // One for the header line consumed above.
        let line = record.position().map_or(0, |pos| pos.line() + 1);
        let field = |k: usize, name: &str| -> Result<&str> {
            record.get(k).ok_or_else(|| anyhow!("line {line}: missing column '{name}'"))
        };
        let index = |k: usize, name: &str, bound: usize| -> Result<usize> {
            let v: usize = field(k, name)?.parse().with_context(|| format!("line {line}, column '{name}': not an index"))?;
            if v == 0 || v > bound {
                bail!("line {line}, column '{name}': {v} outside 1..={bound}");
            }
            Ok(v - 1)
        };
        let (t, i, j) = (index(0, "t", n)?, index(1, "i", p)?, index(2, "j", q)?);
        let value: f64 =
            field(3, "value")?.parse().with_context(|| format!("line {line}, column 'value': not a number"))?;
        if !value.is_finite() {
            bail!("line {line}, column 'value': non-finite value {value}");
        }
        let slot = (t * q + j) * p + i;
        if seen[slot] {
            bail!("line {line}: duplicate cell (t={}, i={}, j={})", t + 1, i + 1, j + 1);
        }
        seen[slot] = true;
        values[slot] = value;
    }
    if let Some(slot) = seen.iter().position(|s| !s) {
        let (t, rem) = (slot / (p * q), slot % (p * q));
        bail!("missing cell (t={}, i={}, j={})", t + 1, rem % p + 1, rem / p + 1);
    }
    Ok(values.chunks(p * q).map(|c| Mat::from_column_slice(p, q, c)).collect())
}

/// Renders matrices in long format. Numbers use the shortest exact representation.
pub fn render_long(mats: &[Mat]) -> String {
    let (p, q) = mats.first().map_or((0, 0), |m| m.shape());
    let mut out = format!("# n={} p={p} q={q}\nt,i,j,value\n", mats.len());
    for (t, m) in mats.iter().enumerate() {
        for i in 0..p {
            for j in 0..q {
                writeln!(out, "{},{},{},{}", t + 1, i + 1, j + 1, m[(i, j)]).expect("writing to a String");
            }
        }
    }
    out
}

fn parse_json_tensor(text: &str) -> Result<Vec<Mat>> {
    let tensor: JsonTensor = serde_json::from_str(text).context("malformed JSON dataset")?;
    if tensor.data.len() != tensor.n {
        bail!("header says n={} but data holds {} matrices", tensor.n, tensor.data.len());
    }
    tensor
        .data
        .iter()
        .enumerate()
        .map(|(t, rows)| {
            if rows.len() != tensor.p || rows.iter().any(|r| r.len() != tensor.q) {
                bail!("matrix {} is not {}x{}", t + 1, tensor.p, tensor.q);
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                bail!("matrix {} has a non-finite value", t + 1);
            }
            Ok(Mat::from_fn(tensor.p, tensor.q, |i, j| rows[i][j]))
        })
        .collect()
}

fn render_json_tensor(mats: &[Mat]) -> Result<String> {
    let (p, q) = mats.first().map_or((0, 0), |m| m.shape());
    let tensor = JsonTensor {
        n: mats.len(),
        p,
        q,
        data: mats.iter().map(|m| m.row_iter().map(|r| r.iter().copied().collect()).collect()).collect(),
    };
    Ok(serde_json::to_string(&tensor)?)
}

/// Reads a tensor file; the format follows the extension.
pub fn load_tensor(path: &Path) -> Result<Vec<Mat>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = match Format::of_path(path) {
        Format::Json => parse_json_tensor(&text),
        Format::Csv => parse_long(&text),
    };
    parsed.with_context(|| format!("in {}", path.display()))
}

pub fn save_tensor(path: &Path, mats: &[Mat]) -> Result<()> {
    let text = match Format::of_path(path) {
        Format::Json => render_json_tensor(mats)?,
        Format::Csv => render_long(mats),
    };
    write(path, &text)
}

pub fn load_dataset(path: &Path) -> Result<MatrixSeries> {
    Ok(MatrixSeries::new(load_tensor(path)?)?)
}

pub fn save_dataset(path: &Path, series: &MatrixSeries) -> Result<()> {
    save_tensor(path, series.as_slice())
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let params: ModelParams =
        serde_json::from_str(&text).with_context(|| format!("{} is not a valid parameter file", path.display()))?;
    let problems = params.validate();
    if !problems.is_empty() {
        bail!("{}: invalid parameters: {}", path.display(), problems.join("; "));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    write(path, &serde_json::to_string_pretty(params)?)
}

/// `t,state` with one-based times and regimes.
pub fn render_states(states: &[usize]) -> String {
    let mut out = String::from("t,state\n");
    for (t, s) in states.iter().enumerate() {
        writeln!(out, "{},{}", t + 1, s + 1).expect("writing to a String");
    }
    out
}

/// Reads `t,state` back into zero-based labels.
pub fn load_states(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut states = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let t: usize = record.get(0).unwrap_or("").parse().with_context(|| format!("{} row {}: bad t", path.display(), row + 1))?;
        let s: usize =
            record.get(1).unwrap_or("").parse().with_context(|| format!("{} row {}: bad state", path.display(), row + 1))?;
        if t != row + 1 || s == 0 {
            bail!("{} row {}: expected t={} and a state of at least 1", path.display(), row + 1, row + 1);
        }
        states.push(s - 1);
    }
    Ok(states)
}

/// Header row followed by data rows.
pub fn render_table(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    Ok(String::from_utf8(writer.into_inner().map_err(|e| anyhow!("{e}"))?)?)
}

/// Reads a CSV of numeric columns after the header.
pub fn load_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .enumerate()
            .map(|(k, v)| {
                v.parse::<f64>()
                    .with_context(|| format!("{} row {}, column '{}': not a number", path.display(), row + 1, header[k]))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}
