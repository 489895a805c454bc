use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Flat `name<TAB>k<TAB>value` metric listing; `k` is `-` when not
/// applicable and values carry four decimals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    entries: Vec<(String, Option<usize>, f64)>,
}

impl MetricReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, k: Option<usize>, value: f64) {
        self.entries.push((name.into(), k, value));
    }

    pub fn entries(&self) -> &[(String, Option<usize>, f64)] {
        &self.entries
    }

    pub fn get(&self, name: &str, k: Option<usize>) -> Option<f64> {
        self.entries.iter().find(|(n, kk, _)| n == name && *kk == k).map(|e| e.2)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || Error::Metric(format!("report line {}: {line:?}", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            let k = match f[1] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad())?),
            };
            report.push(f[0], k, f[2].parse().map_err(|_| bad())?);
        }
        Ok(report)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, k, v) in &self.entries {
            match k {
                Some(k) => writeln!(f, "{name}\t{k}\t{v:.4}")?,
                None => writeln!(f, "{name}\t-\t{v:.4}")?,
            }
        }
        Ok(())
    }
}
