//! CSV contract: header `u,i,ts,label,f_0,...,f_{dE-1}`, one event per row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::{EventStream, RawEvent};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Reads raw rows without sorting or remapping.
pub fn read_csv(path: &Path) -> Result<Vec<RawEvent>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(File::open(path)?);
    let header = reader.headers()?.clone();
    let fixed = ["u", "i", "ts", "label"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(parse_err(path, 1, "header must start with u,i,ts,label"));
    }
    let edge_dim = header.len() - fixed.len();
    for (k, h) in header.iter().skip(fixed.len()).enumerate() {
        if h != format!("f_{k}") {
            return Err(parse_err(path, 1, format!("expected column f_{k}, found `{h}`")));
        }
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let id = |k: usize| {
            record[k]
                .trim()
                .parse::<u64>()
                .map_err(|_| parse_err(path, line, format!("column {}: `{}` is not a node id", fixed[k], &record[k])))
        };
        let num = |k: usize, name: &str| {
            record[k]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("column {name}: `{}` is not a number", &record[k])))
        };
        let u = id(0)?;
        let i = id(1)?;
        let ts = num(2, "ts")?;
        if ts < 0.0 {
            return Err(parse_err(path, line, format!("negative timestamp {ts}")));
        }
        let label = match record[3].trim() {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            other => return Err(parse_err(path, line, format!("label `{other}` is not 0, 1 or empty"))),
        };
        let features = (0..edge_dim)
            .map(|k| num(fixed.len() + k, &format!("f_{k}")))
            .collect::<Result<Vec<_>>>()?;
        rows.push((u, i, ts, features, label));
    }
    Ok(rows)
}

/// Reads, sorts and remaps a CSV event file into a stream with `node_dim`
/// zero node features.
pub fn ingest_csv(path: &Path, node_dim: usize) -> Result<EventStream> {
    let rows = read_csv(path)?;
    if let Some(k) = rows.windows(2).position(|w| w[1].2 < w[0].2) {
        log::warn!(
            "{}: timestamps decrease at data row {}; events re-sorted",
            path.display(),
            k + 2
        );
    }
    EventStream::from_raw(rows, node_dim)
}

pub fn write_csv(stream: &EventStream, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let mut header = String::from("u,i,ts,label");
    for k in 0..stream.edge_dim() {
        header.push_str(&format!(",f_{k}"));
    }
    writeln!(out, "{header}")?;
    for e in stream.events() {
        let label = match e.label {
            None => "",
            Some(true) => "1",
            Some(false) => "0",
        };
        write!(out, "{},{},{},{}", e.source, e.destination, e.timestamp, label)?;
        for f in &e.features {
            write!(out, ",{f}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
