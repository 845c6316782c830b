use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{Label, LabelSpace};

/// Symmetric label co-occurrence values in (0, 1] with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    n: usize,
    values: Vec<f64>,
    logs: Vec<f64>,
}

impl CooccurrenceMatrix {
    /// All ones: the relationship term carries no preference.
    pub fn uniform(n: usize) -> Self {
        CooccurrenceMatrix {
            n,
            values: vec![1.0; n * n],
            logs: vec![0.0; n * n],
        }
    }

    /// Row-major `n x n` values.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::invalid(
                "co-occurrence matrix",
                format!("expected {} values", n * n),
            ));
        }
        for a in 0..n {
            for b in 0..n {
                let v = values[a * n + b];
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::invalid(
                        "co-occurrence matrix",
                        format!("value {v} outside (0, 1]"),
                    ));
                }
                if (v - values[b * n + a]).abs() > 1e-12 {
                    return Err(Error::invalid("co-occurrence matrix", "not symmetric"));
                }
            }
            if values[a * n + a] != 1.0 {
                return Err(Error::invalid("co-occurrence matrix", "diagonal must be 1"));
            }
        }
        let logs = values.iter().map(|v| v.ln()).collect();
        Ok(CooccurrenceMatrix { n, values, logs })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, a: Label, b: Label) -> f64 {
        self.values[a as usize * self.n + b as usize]
    }

    #[inline]
    pub fn ln(&self, a: Label, b: Label) -> f64 {
        self.logs[a as usize * self.n + b as usize]
    }

    /// Text form: a header line of label names, then one row of values per
    /// label.
    pub fn to_text(&self, labels: &LabelSpace) -> String {
        let mut s = labels.names().join(" ");
        s.push('\n');
        for a in 0..self.n {
            let row: Vec<String> = (0..self.n)
                .map(|b| format!("{}", self.values[a * self.n + b]))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn write(&self, path: &Path, labels: &LabelSpace) -> Result<()> {
        std::fs::write(path, self.to_text(labels)).map_err(|e| Error::io(path, e))
    }

    /// Reads the text form, reordering rows and columns from the header's
    /// label order into the order of `labels`.
    pub fn read(path: &Path, labels: &LabelSpace) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, labels).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        })
    }

    pub fn parse(text: &str, labels: &LabelSpace) -> Result<Self, String> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header: Vec<&str> = lines.next().ok_or("empty matrix file")?.split_whitespace().collect();
        let n = labels.len();
        if header.len() != n {
            return Err(format!("header lists {} labels, label space has {n}", header.len()));
        }
        let order: Vec<usize> = header
            .iter()
            .map(|h| labels.id(h).map(usize::from).ok_or(format!("unknown label {h}")))
            .collect::<Result<_, _>>()?;
        let mut values = vec![0.0; n * n];
        for (r, line) in lines.by_ref().take(n).enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| format!("row {}: {e}", r + 1)))
                .collect::<Result<_, _>>()?;
            if row.len() != n {
                return Err(format!("row {} has {} values, expected {n}", r + 1, row.len()));
            }
            for (c, v) in row.into_iter().enumerate() {
                values[order[r] * n + order[c]] = v;
            }
        }
        if lines.next().is_some() {
            return Err("trailing rows".into());
        }
        Self::new(n, values).map_err(|e| e.to_string())
    }
}

/// Learns the matrix from observed labels of adjacent regions:
/// `(count(a, b) + 1) / (max count + 1)` over distinct label pairs, counted
/// in both orders, with the diagonal forced to 1. No data gives all ones.
pub fn learn_cooccurrence(pairs: &[(Label, Label)], num_labels: usize) -> CooccurrenceMatrix {
    let n = num_labels;
    let mut counts = vec![0u64; n * n];
    for &(a, b) in pairs {
        if a == b {
            continue;
        }
        let (a, b) = (a as usize, b as usize);
        counts[a * n + b] += 1;
        counts[b * n + a] += 1;
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return CooccurrenceMatrix::uniform(n);
    }
    let mut values: Vec<f64> = counts.iter().map(|&c| (c + 1) as f64 / (max + 1) as f64).collect();
    for a in 0..n {
        values[a * n + a] = 1.0;
    }
    CooccurrenceMatrix::new(n, values).expect("learned values are valid")
}

/// Label pairs of adjacent regions, given each region's label. Regions
/// without a label are skipped.
pub fn cooccurrence_pairs(region_labels: &[Option<Label>], adjacency: &[(usize, usize)]) -> Vec<(Label, Label)> {
    adjacency
        .iter()
        .filter_map(|&(a, b)| Some((region_labels[a]?, region_labels[b]?)))
        .collect()
}
