//! Line-oriented graph files (`.graph.txt`):
//!
//! ```text
//! H <nodes> <edges> <feat_dim> <classes>
//! N <id> <label or -1> <mask> <f1> ... <fd>
//! E <src> <dst>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Floats are written in
//! shortest round-trip form, so a save/load cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Mask, SparseGraph};
use crate::matrix::Matrix;

pub fn write_graph(graph: &SparseGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "H {} {} {} {}",
        graph.num_nodes(),
        graph.num_edges(),
        graph.feature_dim(),
        graph.num_classes
    );
    for u in 0..graph.num_nodes() {
        let label = graph.labels[u].map_or(-1, |l| l as i64);
        let _ = write!(s, "N {u} {label} {}", graph.masks[u]);
        for x in graph.features.row(u) {
            let _ = write!(s, " {x:?}");
        }
        s.push('\n');
    }
    for (u, v) in graph.edges() {
        let _ = writeln!(s, "E {u} {v}");
    }
    s
}

pub fn save_graph(graph: &SparseGraph, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_graph(graph))?;
    Ok(())
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<SparseGraph> {
    parse_graph(&fs::read_to_string(path)?)
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| perr(line, format!("invalid {what} `{tok}`")))
}

pub fn parse_graph(text: &str) -> Result<SparseGraph> {
    let mut header: Option<(usize, usize, usize, usize)> = None;
    let mut features = Vec::new();
    let (mut labels, mut masks, mut seen) = (Vec::new(), Vec::new(), Vec::new());
    let mut edges = Vec::new();
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let mut toks = raw.split_whitespace();
        let tag = toks.next().unwrap_or_default();
        match (tag, header) {
            ("H", None) => {
                let h = (
                    field(toks.next(), line, "node count")?,
                    field(toks.next(), line, "edge count")?,
                    field(toks.next(), line, "feature dimension")?,
                    field(toks.next(), line, "class count")?,
                );
                features = vec![0.0; h.0 * h.2];
                labels = vec![None; h.0];
                masks = vec![Mask::Unlabeled; h.0];
                seen = vec![false; h.0];
                header = Some(h);
            }
            ("H", Some(_)) => return Err(perr(line, "duplicate header")),
            (_, None) => return Err(perr(line, "expected header line `H nodes edges feat_dim classes`")),
            ("N", Some((n, _, d, _))) => {
                let id: usize = field(toks.next(), line, "node id")?;
                if id >= n {
                    return Err(perr(line, format!("node id {id} out of range")));
                }
                if std::mem::replace(&mut seen[id], true) {
                    return Err(perr(line, format!("duplicate node {id}")));
                }
                let label: i64 = field(toks.next(), line, "label")?;
                labels[id] = match label {
                    -1 => None,
                    l if l >= 0 => Some(l as usize),
                    l => return Err(perr(line, format!("invalid label {l}"))),
                };
                masks[id] = field(toks.next(), line, "mask")?;
                for j in 0..d {
                    features[id * d + j] = field(toks.next(), line, "feature value")?;
                }
                if toks.next().is_some() {
                    return Err(perr(line, format!("more than {d} feature values")));
                }
            }
            ("E", Some((n, ..))) => {
                let u: usize = field(toks.next(), line, "edge source")?;
                let v: usize = field(toks.next(), line, "edge target")?;
                if u >= n || v >= n {
                    return Err(perr(line, format!("edge ({u}, {v}) out of range")));
                }
                if toks.next().is_some() {
                    return Err(perr(line, "trailing tokens after edge"));
                }
                edges.push((u, v));
            }
            (other, Some(_)) => return Err(perr(line, format!("unknown record `{other}`"))),
        }
    }
    let (n, m, d, classes) = header.ok_or_else(|| perr(last_line + 1, "missing header"))?;
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(perr(last_line + 1, format!("missing record for node {missing} (file truncated?)")));
    }
    if edges.len() != m {
        return Err(perr(last_line + 1, format!("expected {m} edges, found {}", edges.len())));
    }
    let features = Matrix::new(n, d, features)?;
    SparseGraph::from_edges(&edges, features, labels, masks, classes).map_err(|e| perr(last_line + 1, e.to_string()))
}
