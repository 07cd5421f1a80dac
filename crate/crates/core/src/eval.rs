//! Dice scoring, per-organ evaluation records, report emission and the
//! augmentation sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{run_dataset, Backend, Dataset, PipelineConfig, PipelineError, RunFailure};
use crate::volume::{BinaryMask, VolumeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("malformed report: {0}")]
    Parse(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Dice similarity `2|G ∩ S| / (|G| + |S|)`. Two empty masks score 1.
pub fn dsc(g: &BinaryMask, s: &BinaryMask) -> Result<f64, VolumeError> {
    g.check_same_dims(s.grid())?;
    let (mut inter, mut ng, mut ns) = (0usize, 0usize, 0usize);
    for (&a, &b) in g.data().iter().zip(s.data()) {
        ng += a as usize;
        ns += b as usize;
        inter += (a & b) as usize;
    }
    if ng + ns == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ng + ns) as f64)
}

/// Segmentation variants scored per organ. Variant order is alphabetical so
/// sorted maps iterate in report order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Single unaugmented automatic prompt.
    Auto,
    Ensemble,
    Fnc,
    Fpc,
    Fpnc,
    /// Single simulated manual prompt per slice.
    Manual,
    Ur,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Auto,
        Method::Ensemble,
        Method::Fnc,
        Method::Fpc,
        Method::Fpnc,
        Method::Manual,
        Method::Ur,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Auto => "auto",
            Method::Ensemble => "ensemble",
            Method::Fnc => "fnc",
            Method::Fpc => "fpc",
            Method::Fpnc => "fpnc",
            Method::Manual => "manual",
            Method::Ur => "ur",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}"))
    }
}

/// Configuration values copied into every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordParams {
    pub n: usize,
    pub ratio: f64,
    pub alpha_h: f64,
    pub threshold_mode: String,
    pub lower_bound: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case: String,
    pub organ: String,
    pub method: Method,
    pub dsc: f64,
    #[serde(flatten)]
    pub params: RecordParams,
}

/// One record per candidate, ordered by method name.
pub fn evaluate_case(
    case: &str,
    organ: &str,
    gt: &BinaryMask,
    candidates: &BTreeMap<Method, BinaryMask>,
    params: &RecordParams,
) -> Result<Vec<EvalRecord>, VolumeError> {
    candidates
        .iter()
        .map(|(&method, mask)| {
            Ok(EvalRecord {
                case: case.to_string(),
                organ: organ.to_string(),
                method,
                dsc: dsc(gt, mask)?,
                params: params.clone(),
            })
        })
        .collect()
}

/// Canonical report order: case, organ, method, then parameters.
pub fn sort_records(records: &mut [EvalRecord]) {
    records.sort_by(|a, b| {
        (&a.case, &a.organ, a.method, a.params.n)
            .cmp(&(&b.case, &b.organ, b.method, b.params.n))
            .then(a.params.ratio.total_cmp(&b.params.ratio))
            .then(a.params.alpha_h.total_cmp(&b.params.alpha_h))
            .then(a.params.threshold_mode.cmp(&b.params.threshold_mode))
            .then(a.params.lower_bound.cmp(&b.params.lower_bound))
    });
}

/// Mean DSC of `method` over all records, `None` if it has none.
pub fn mean_dsc(records: &[EvalRecord], method: Method) -> Option<f64> {
    let v: Vec<f64> = records.iter().filter(|r| r.method == method).map(|r| r.dsc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            _ => Err(format!("unknown report format {s:?}")),
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "case",
    "organ",
    "method",
    "dsc",
    "n",
    "ratio",
    "alpha_h",
    "threshold_mode",
    "lower_bound",
];

fn record_fields(r: &EvalRecord) -> [String; 9] {
    [
        r.case.clone(),
        r.organ.clone(),
        r.method.to_string(),
        r.dsc.to_string(),
        r.params.n.to_string(),
        r.params.ratio.to_string(),
        r.params.alpha_h.to_string(),
        r.params.threshold_mode.clone(),
        r.params.lower_bound.clone(),
    ]
}

/// Renders records in the given order. Floats use the shortest
/// representation that parses back to the same value.
pub fn render_report(records: &[EvalRecord], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("in-memory write");
            for r in records {
                w.write_record(record_fields(r)).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
        }
        ReportFormat::Markdown => {
            let mut out = String::new();
            let _ = writeln!(out, "| {} |", CSV_HEADER.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(CSV_HEADER.len()));
            for r in records {
                let mut f = record_fields(r);
                f[3] = format!("{:.4}", r.dsc);
                let _ = writeln!(out, "| {} |", f.join(" | "));
            }
            out
        }
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    fs::write(path, contents).map_err(io_err)
}

pub fn write_report(records: &[EvalRecord], path: impl AsRef<Path>, format: ReportFormat) -> Result<(), EvalError> {
    write_file(path.as_ref(), render_report(records, format).as_bytes())
}

pub fn parse_csv_report(text: &str) -> Result<Vec<EvalRecord>, EvalError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| EvalError::Parse(e.to_string()))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(EvalError::Parse(format!("unexpected header {header:?}")));
    }
    let bad = |what: &str, v: &str| EvalError::Parse(format!("bad {what} {v:?}"));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| EvalError::Parse(e.to_string()))?;
        let f = |i: usize| row.get(i).unwrap_or("");
        out.push(EvalRecord {
            case: f(0).to_string(),
            organ: f(1).to_string(),
            method: f(2).parse().map_err(EvalError::Parse)?,
            dsc: f(3).parse().map_err(|_| bad("dsc", f(3)))?,
            params: RecordParams {
                n: f(4).parse().map_err(|_| bad("n", f(4)))?,
                ratio: f(5).parse().map_err(|_| bad("ratio", f(5)))?,
                alpha_h: f(6).parse().map_err(|_| bad("alpha_h", f(6)))?,
                threshold_mode: f(7).to_string(),
                lower_bound: f(8).to_string(),
            },
        });
    }
    Ok(out)
}

pub fn read_csv_report(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>, EvalError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_csv_report(&text)
}

/// `case -> organ -> method -> dsc`.
pub type Summary = BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>>;

pub fn summarize(records: &[EvalRecord]) -> Summary {
    let mut out = Summary::new();
    for r in records {
        out.entry(r.case.clone())
            .or_default()
            .entry(r.organ.clone())
            .or_default()
            .insert(r.method.to_string(), r.dsc);
    }
    out
}

pub fn write_summary(records: &[EvalRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    let mut json = serde_json::to_string_pretty(&summarize(records)).expect("summary serializes");
    json.push('\n');
    write_file(path.as_ref(), json.as_bytes())
}

/// One `(n, ratio)` cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub n: usize,
    pub ratio: f64,
    /// Mean DSC of the scored method over all evaluated organs.
    pub mean: Option<f64>,
    /// Mean DSC per organ label across cases.
    pub per_organ: BTreeMap<String, f64>,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub method: Method,
    pub ns: Vec<usize>,
    pub ratios: Vec<f64>,
    /// Row-major over `ns` then `ratios`.
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, n: usize, ratio: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.n == n && c.ratio == ratio)
    }

    pub fn mean(&self, n: usize, ratio: f64) -> Option<f64> {
        self.cell(n, ratio).and_then(|c| c.mean)
    }

    /// Long-format CSV: `n,ratio,organ,dsc` with organ `mean` for the cell mean.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "ratio", "organ", "dsc", "failures"]).expect("in-memory write");
        for c in &self.cells {
            let mean = c.mean.map_or(String::new(), |m| m.to_string());
            let failures = c.failures.len().to_string();
            w.write_record([c.n.to_string(), c.ratio.to_string(), "mean".into(), mean, failures.clone()])
                .expect("in-memory write");
            for (organ, d) in &c.per_organ {
                w.write_record([c.n.to_string(), c.ratio.to_string(), organ.clone(), d.to_string(), failures.clone()])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    /// Matrix of cell means, one row per `n`.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let heads: Vec<String> = self.ratios.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(out, "| n \\ ratio | {} |", heads.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.ratios.len()));
        for &n in &self.ns {
            let row: Vec<String> = self
                .ratios
                .iter()
                .map(|&r| self.mean(n, r).map_or("fail".into(), |m| format!("{m:.4}")))
                .collect();
            let _ = writeln!(out, "| {n} | {} |", row.join(" | "));
        }
        out
    }
}

/// Full factorial run over `ns × ratios` scoring `method`. Pipeline failures
/// are recorded in the affected cell and do not abort the sweep.
pub fn sweep(
    dataset: &Dataset,
    ns: &[usize],
    ratios: &[f64],
    cfg: &PipelineConfig,
    backend: &Backend,
    method: Method,
) -> Result<SweepTable, EvalError> {
    if ns.is_empty() || ratios.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut cells = Vec::with_capacity(ns.len() * ratios.len());
    for &n in ns {
        for &ratio in ratios {
            let mut c = cfg.clone();
            c.aug.n = n;
            c.aug.ratio = ratio;
            let cell = match run_dataset(dataset, &c, backend, None) {
                Ok(run) => {
                    let scored: Vec<&EvalRecord> = run.records.iter().filter(|r| r.method == method).collect();
                    let mut by_organ: BTreeMap<String, Vec<f64>> = BTreeMap::new();
                    for r in &scored {
                        by_organ.entry(r.organ.clone()).or_default().push(r.dsc);
                    }
                    SweepCell {
                        n,
                        ratio,
                        mean: mean_dsc(&run.records, method),
                        per_organ: by_organ
                            .into_iter()
                            .map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64))
                            .collect(),
                        failures: run.failures,
                    }
                }
                Err(e) => SweepCell {
                    n,
                    ratio,
                    mean: None,
                    per_organ: BTreeMap::new(),
                    failures: vec![RunFailure::whole_run(e.to_string())],
                },
            };
            cells.push(cell);
        }
    }
    Ok(SweepTable {
        method,
        ns: ns.to_vec(),
        ratios: ratios.to_vec(),
        cells,
    })
}
