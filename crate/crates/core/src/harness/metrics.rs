//! Per-episode metrics files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::agents::Architecture;
use crate::env::EnvKind;
use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 11] = [
    "seed",
    "hypothesis",
    "task",
    "phase",
    "episode",
    "episode_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "contrastive_loss",
    "n_ghosts",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Train,
    IidTest,
    OodTest,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::IidTest => "iid_test",
            Phase::OodTest => "ood_test",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Phase::Train),
            "iid_test" => Ok(Phase::IidTest),
            "ood_test" => Ok(Phase::OodTest),
            other => Err(Error::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// One row of a metrics file. Loss columns are empty on test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub seed: u64,
    pub hypothesis: Architecture,
    pub task: EnvKind,
    pub phase: Phase,
    pub episode: usize,
    pub episode_reward: f64,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub contrastive_loss: Option<f64>,
    pub n_ghosts: Option<usize>,
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn parse_field<T: FromStr>(s: &str, name: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {name} value {s:?}")))
}

fn parse_opt<T: FromStr>(s: &str, name: &str) -> Result<Option<T>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_field(s, name).map(Some)
    }
}

impl MetricsRecord {
    fn fields(&self) -> [String; 11] {
        [
            self.seed.to_string(),
            self.hypothesis.to_string(),
            self.task.to_string(),
            self.phase.to_string(),
            self.episode.to_string(),
            format_float(self.episode_reward),
            opt_float(self.policy_loss),
            opt_float(self.value_loss),
            opt_float(self.entropy),
            opt_float(self.contrastive_loss),
            self.n_ghosts.map(|n| n.to_string()).unwrap_or_default(),
        ]
    }

    fn from_fields(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != METRICS_HEADER.len() {
            return Err(Error::Format(format!("metrics row has {} fields", r.len())));
        }
        let reward: f64 = parse_field(&r[5], "episode_reward")?;
        if !reward.is_finite() {
            return Err(Error::Format("episode_reward must be finite".into()));
        }
        Ok(MetricsRecord {
            seed: parse_field(&r[0], "seed")?,
            hypothesis: r[1].parse().map_err(|_| Error::Format(format!("bad hypothesis {:?}", &r[1])))?,
            task: r[2].parse().map_err(|_| Error::Format(format!("bad task {:?}", &r[2])))?,
            phase: r[3].parse()?,
            episode: parse_field(&r[4], "episode")?,
            episode_reward: reward,
            policy_loss: parse_opt(&r[6], "policy_loss")?,
            value_loss: parse_opt(&r[7], "value_loss")?,
            entropy: parse_opt(&r[8], "entropy")?,
            contrastive_loss: parse_opt(&r[9], "contrastive_loss")?,
            n_ghosts: parse_opt(&r[10], "n_ghosts")?,
        })
    }
}

pub fn write_metrics<W: std::io::Write>(out: W, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for row in rows {
        w.write_record(row.fields()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

pub fn read_metrics<R: std::io::Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Format(e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    r.records()
        .map(|rec| MetricsRecord::from_fields(&rec.map_err(|e| Error::Format(e.to_string()))?))
        .collect()
}

pub fn save_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_metrics(std::io::BufReader::new(f))
}
