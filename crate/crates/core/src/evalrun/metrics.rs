//! Evaluation records, harmonic-mean scoring and the CSV formats.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{CommRecord, Direction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Local,
    Base,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Local, Split::Base, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Local => "local",
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "local" => Split::Local,
            "base" => Split::Base,
            "novel" => Split::Novel,
            other => return Err(Error::Format(format!("unknown split `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u64,
    pub client: usize,
    pub split: Split,
    pub n: usize,
    pub correct: usize,
    /// `correct / n`.
    pub accuracy: f64,
    /// Mean cross-entropy.
    pub loss: f64,
}

impl MetricsRow {
    pub fn new(round: u64, client: usize, split: Split, n: usize, correct: usize, loss: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Evaluation { split: split.name().into(), reason: "has no samples".into() });
        }
        Ok(Self { round, client, split, n, correct, accuracy: correct as f64 / n as f64, loss })
    }

    fn key(&self) -> (u64, usize, Split) {
        (self.round, self.client, self.split)
    }
}

pub const METRICS_HEADER: &str = "round,client,split,n,correct,accuracy,loss";
pub const COMM_HEADER: &str = "round,direction,client_id,bytes";

/// Rows sorted by `(round, client, split)`; reals with 17 significant digits.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.key());
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.16e},{:.16e}",
            r.round,
            r.client,
            r.split.name(),
            r.n,
            r.correct,
            r.accuracy,
            r.loss
        );
    }
    out
}

fn field<T: std::str::FromStr>(parts: &[&str], i: usize, line: usize) -> Result<T> {
    parts.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format(format!("line {line}: bad or missing column {i}")))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("metrics CSV must start with `{METRICS_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let p: Vec<&str> = l.split(',').collect();
            if p.len() != 7 {
                return Err(Error::Format(format!("line {}: expected 7 columns", i + 2)));
            }
            let n: usize = field(&p, 3, i + 2)?;
            let correct: usize = field(&p, 4, i + 2)?;
            if n == 0 || correct > n {
                return Err(Error::Format(format!("line {}: inconsistent counts", i + 2)));
            }
            Ok(MetricsRow {
                round: field(&p, 0, i + 2)?,
                client: field(&p, 1, i + 2)?,
                split: Split::parse(p[2])?,
                n,
                correct,
                accuracy: correct as f64 / n as f64,
                loss: field(&p, 6, i + 2)?,
            })
        })
        .collect()
}

pub fn comm_csv(records: &[CommRecord]) -> String {
    let mut out = String::from(COMM_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.round, r.direction.name(), r.client, r.bytes);
    }
    out
}

pub fn parse_comm_csv(text: &str) -> Result<Vec<CommRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(COMM_HEADER) {
        return Err(Error::Format(format!("comm CSV must start with `{COMM_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let p: Vec<&str> = l.split(',').collect();
            let direction = match p.get(1) {
                Some(&"up") => Direction::Up,
                Some(&"down") => Direction::Down,
                _ => return Err(Error::Format(format!("line {}: bad direction", i + 2))),
            };
            Ok(CommRecord { round: field(&p, 0, i + 2)?, direction, client: field(&p, 2, i + 2)?, bytes: field(&p, 3, i + 2)? })
        })
        .collect()
}

/// `n / sum(1 / v)`; zero if any value is zero.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Contract("harmonic mean of an empty list".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Contract(format!("harmonic mean needs non-negative values, got {v}")));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScore {
    pub client: usize,
    pub local: f64,
    pub base: f64,
    pub novel: f64,
    /// Harmonic mean of the three accuracies.
    pub hm: f64,
}

/// Split accuracies at one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub round: u64,
    /// Means over clients.
    pub local: f64,
    pub base: f64,
    pub novel: f64,
    /// Mean over clients of the per-client harmonic mean.
    pub hm: f64,
    pub clients: Vec<ClientScore>,
}

/// Scores of every client at `round`. Each client needs all three splits.
pub fn scores_at(rows: &[MetricsRow], round: u64) -> Result<Scores> {
    let mut clients: Vec<usize> = rows.iter().filter(|r| r.round == round).map(|r| r.client).collect();
    clients.sort_unstable();
    clients.dedup();
    if clients.is_empty() {
        return Err(Error::Evaluation { split: "all".into(), reason: format!("has no rows at round {round}") });
    }
    let acc = |c: usize, s: Split| -> Result<f64> {
        rows.iter().find(|r| r.round == round && r.client == c && r.split == s).map(|r| r.accuracy).ok_or_else(|| {
            Error::Evaluation { split: s.name().into(), reason: format!("missing for client {c} at round {round}") }
        })
    };
    let per = clients
        .iter()
        .map(|&c| {
            let (local, base, novel) = (acc(c, Split::Local)?, acc(c, Split::Base)?, acc(c, Split::Novel)?);
            Ok(ClientScore { client: c, local, base, novel, hm: harmonic_mean(&[local, base, novel])? })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&ClientScore) -> f64| per.iter().map(f).sum::<f64>() / per.len() as f64;
    Ok(Scores {
        round,
        local: mean(|c| c.local),
        base: mean(|c| c.base),
        novel: mean(|c| c.novel),
        hm: mean(|c| c.hm),
        clients: per,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_conventions() {
        assert_eq!(harmonic_mean(&[0.4, 0.4, 0.4]).unwrap(), 0.4);
        assert_eq!(harmonic_mean(&[0.5, 0.0, 0.9]).unwrap(), 0.0);
        assert!(matches!(harmonic_mean(&[0.5, -0.1]), Err(Error::Contract(_))));
        assert!(harmonic_mean(&[]).is_err());
        // 2 / (1/1 + 1/3) = 1.5
        assert_eq!(harmonic_mean(&[1.0, 3.0]).unwrap(), 1.5);
    }

    #[test]
    fn csv_roundtrip_and_ordering() {
        let rows = vec![
            MetricsRow::new(1, 0, Split::Novel, 3, 1, 0.7).unwrap(),
            MetricsRow::new(0, 1, Split::Local, 7, 7, 0.125).unwrap(),
            MetricsRow::new(0, 0, Split::Base, 9, 2, 1.0 / 3.0).unwrap(),
        ];
        let text = metrics_csv(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "0,0,base,9,2,2.2222222222222221e-1,3.3333333333333331e-1");
        assert!(lines[2].starts_with("0,1,local,7,7,1.0000000000000000e0,"));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(metrics_csv(&back), text);
        assert!(matches!(MetricsRow::new(0, 0, Split::Base, 0, 0, 0.0), Err(Error::Evaluation { .. })));
    }
}
