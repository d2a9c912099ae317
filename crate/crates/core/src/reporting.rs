//! Comparison tables (mean and std over repeats, best/second
//! markers) and β-sweep summaries, rendered as CSV, aligned text and
//! Markdown.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FairsegError, IoContext, Result};
use crate::evaluation::EvalReport;
use crate::metrics::{aggregate_runs, Ddof, FairnessReport, MeanStd};

/// Metrics of one evaluated run, as consumed by the table builders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub dataset: String,
    pub attribute: String,
    pub mean_dice: f64,
    pub macro_dice: f64,
    pub fairness_sample: FairnessReport,
    pub fairness_population: FairnessReport,
}

impl RunEvaluation {
    /// Errors if the report has no fairness metrics (fewer than two
    /// populated subgroups).
    pub fn from_report(dataset: &str, report: &EvalReport) -> Result<Self> {
        let missing = || FairsegError::Metric("report has fewer than 2 populated subgroups".into());
        Ok(Self {
            dataset: dataset.to_string(),
            attribute: report.attribute_name.clone(),
            mean_dice: report.mean_dice(),
            macro_dice: report.macro_dice(),
            fairness_sample: report.fairness_sample.clone().ok_or_else(missing)?,
            fairness_population: report.fairness_population.clone().ok_or_else(missing)?,
        })
    }

    pub fn fairness(&self, ddof: Ddof) -> &FairnessReport {
        match ddof {
            Ddof::Sample => &self.fairness_sample,
            Ddof::Population => &self.fairness_population,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mark {
    Best,
    Second,
}

/// Columns that carry best/second markers, in display order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Avg,
    Delta,
    Ser,
    Std,
}

impl Column {
    pub const ALL: [Column; 4] = [Column::Avg, Column::Delta, Column::Ser, Column::Std];

    pub fn higher_is_better(self) -> bool {
        self == Column::Avg
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// One method. Avg, Δ and STD are in percent; SER is a plain ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub runs: usize,
    /// Mean Dice over samples.
    pub avg: MeanStd,
    /// Mean of the subgroup mean Dice.
    pub avg_macro: MeanStd,
    pub delta: MeanStd,
    pub ser: MeanStd,
    pub ser_infinite: bool,
    pub std: MeanStd,
    /// Markers for [`Column::ALL`], in order.
    pub marks: [Option<Mark>; 4],
}

impl TableRow {
    pub fn value(&self, col: Column) -> f64 {
        match col {
            Column::Avg => self.avg.mean,
            Column::Delta => self.delta.mean,
            Column::Ser => self.ser.mean,
            Column::Std => self.std.mean,
        }
    }

    pub fn mark(&self, col: Column) -> Option<Mark> {
        self.marks[col.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub dataset: String,
    pub attribute: String,
    pub ddof: Ddof,
    pub rows: Vec<TableRow>,
}

fn scaled(m: MeanStd) -> MeanStd {
    MeanStd {
        mean: 100.0 * m.mean,
        std: 100.0 * m.std,
    }
}

/// Best and second-best row per column. Ties go to the earlier row.
fn assign_marks(rows: &mut [TableRow]) {
    for row in rows.iter_mut() {
        row.marks = [None; 4];
    }
    for col in Column::ALL {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        // stable sort keeps earlier rows first among equals
        order.sort_by(|&a, &b| {
            let (va, vb) = (rows[a].value(col), rows[b].value(col));
            if col.higher_is_better() {
                vb.total_cmp(&va)
            } else {
                va.total_cmp(&vb)
            }
        });
        if let Some(&i) = order.first() {
            rows[i].marks[col.index()] = Some(Mark::Best);
        }
        if let Some(&i) = order.get(1) {
            rows[i].marks[col.index()] = Some(Mark::Second);
        }
    }
}

/// Aggregate each method's runs into one row; rows keep the input order.
pub fn build_table(groups: &[(String, Vec<RunEvaluation>)], ddof: Ddof) -> Result<ExperimentTable> {
    let first = groups
        .iter()
        .flat_map(|(_, runs)| runs.first())
        .next()
        .ok_or_else(|| FairsegError::Invalid("build_table needs at least one evaluation".into()))?;
    let mut rows = Vec::with_capacity(groups.len());
    for (method, runs) in groups {
        if runs.is_empty() {
            return Err(FairsegError::Invalid(format!("method `{method}` has no evaluations")));
        }
        for r in runs {
            if r.attribute != first.attribute || r.dataset != first.dataset {
                return Err(FairsegError::Invalid(format!(
                    "cannot tabulate {}/{} together with {}/{}",
                    r.dataset, r.attribute, first.dataset, first.attribute
                )));
            }
        }
        let reports: Vec<FairnessReport> = runs.iter().map(|r| r.fairness(ddof).clone()).collect();
        let agg = aggregate_runs(&reports)?;
        let dice: Vec<f64> = runs.iter().map(|r| r.mean_dice).collect();
        let macro_dice: Vec<f64> = runs.iter().map(|r| r.macro_dice).collect();
        rows.push(TableRow {
            method: method.clone(),
            runs: runs.len(),
            avg: scaled(MeanStd::of(&dice)),
            avg_macro: scaled(MeanStd::of(&macro_dice)),
            delta: scaled(agg.delta),
            ser: agg.ser,
            ser_infinite: agg.ser_infinite,
            std: scaled(agg.std),
            marks: [None; 4],
        });
    }
    assign_marks(&mut rows);
    Ok(ExperimentTable {
        dataset: first.dataset.clone(),
        attribute: first.attribute.clone(),
        ddof,
        rows,
    })
}

/// `mean_{std}` with two decimals.
pub fn cell(m: MeanStd) -> String {
    format!("{:.2}_{{{:.2}}}", m.mean, m.std)
}

fn ser_cell(row: &TableRow) -> String {
    let c = cell(row.ser);
    if row.ser_infinite {
        format!("{c} (inf)")
    } else {
        c
    }
}

fn mark_str(m: Option<Mark>) -> &'static str {
    match m {
        Some(Mark::Best) => "best",
        Some(Mark::Second) => "second",
        None => "",
    }
}

fn parse_mark(s: &str) -> Result<Option<Mark>> {
    match s {
        "best" => Ok(Some(Mark::Best)),
        "second" => Ok(Some(Mark::Second)),
        "" => Ok(None),
        other => Err(FairsegError::Invalid(format!("unknown marker `{other}`"))),
    }
}

fn ddof_str(d: Ddof) -> &'static str {
    match d {
        Ddof::Sample => "sample",
        Ddof::Population => "population",
    }
}

const TABLE_HEADER: [&str; 20] = [
    "dataset",
    "attribute",
    "ddof",
    "method",
    "runs",
    "avg_mean",
    "avg_std",
    "avg_macro_mean",
    "avg_macro_std",
    "delta_mean",
    "delta_std",
    "ser_mean",
    "ser_std",
    "ser_infinite",
    "std_mean",
    "std_std",
    "avg_mark",
    "delta_mark",
    "ser_mark",
    "std_mark",
];

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| FairsegError::Invalid(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn num(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| FairsegError::Invalid(format!("`{s}` is not a number")))
}

impl ExperimentTable {
    /// One line per method; floats are written at full precision so that
    /// [`ExperimentTable::from_csv`] restores them exactly.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TABLE_HEADER)?;
        for r in &self.rows {
            let mut rec = vec![
                self.dataset.clone(),
                self.attribute.clone(),
                ddof_str(self.ddof).to_string(),
                r.method.clone(),
                r.runs.to_string(),
            ];
            for m in [r.avg, r.avg_macro, r.delta, r.ser] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            rec.push(r.ser_infinite.to_string());
            rec.push(r.std.mean.to_string());
            rec.push(r.std.std.to_string());
            rec.extend(r.marks.iter().map(|&m| mark_str(m).to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TABLE_HEADER {
            return Err(FairsegError::Invalid(format!("unexpected table header {header:?}")));
        }
        let mut table: Option<ExperimentTable> = None;
        for rec in rd.records() {
            let rec = rec?;
            let f = |i: usize| num(&rec[i]);
            let ms = |i: usize| -> Result<MeanStd> { Ok(MeanStd { mean: f(i)?, std: f(i + 1)? }) };
            let ddof = match &rec[2] {
                "sample" => Ddof::Sample,
                "population" => Ddof::Population,
                other => return Err(FairsegError::Invalid(format!("unknown ddof `{other}`"))),
            };
            let row = TableRow {
                method: rec[3].to_string(),
                runs: rec[4]
                    .parse()
                    .map_err(|_| FairsegError::Invalid(format!("bad run count `{}`", &rec[4])))?,
                avg: ms(5)?,
                avg_macro: ms(7)?,
                delta: ms(9)?,
                ser: ms(11)?,
                ser_infinite: rec[13]
                    .parse()
                    .map_err(|_| FairsegError::Invalid(format!("bad flag `{}`", &rec[13])))?,
                std: ms(14)?,
                marks: [
                    parse_mark(&rec[16])?,
                    parse_mark(&rec[17])?,
                    parse_mark(&rec[18])?,
                    parse_mark(&rec[19])?,
                ],
            };
            let t = table.get_or_insert_with(|| ExperimentTable {
                dataset: rec[0].to_string(),
                attribute: rec[1].to_string(),
                ddof,
                rows: Vec::new(),
            });
            if t.dataset != rec[0] || t.attribute != rec[1] || t.ddof != ddof {
                return Err(FairsegError::Invalid("table rows disagree on dataset/attribute/ddof".into()));
            }
            t.rows.push(row);
        }
        table.ok_or_else(|| FairsegError::Invalid("table csv has no rows".into()))
    }

    fn cells(&self, decorate: impl Fn(String, Option<Mark>) -> String) -> Vec<[String; 6]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    decorate(cell(r.avg), r.mark(Column::Avg)),
                    cell(r.avg_macro),
                    decorate(cell(r.delta), r.mark(Column::Delta)),
                    decorate(ser_cell(r), r.mark(Column::Ser)),
                    decorate(cell(r.std), r.mark(Column::Std)),
                ]
            })
            .collect()
    }

    fn header_cells() -> [String; 6] {
        ["Method", "Avg ↑", "Avg (macro)", "Δ ↓", "SER ↓", "STD ↓"].map(String::from)
    }

    /// Aligned plain text; `*` marks the best cell and `+` the second.
    pub fn to_text(&self) -> String {
        let mut rows = vec![Self::header_cells()];
        rows.extend(self.cells(|c, m| match m {
            Some(Mark::Best) => format!("{c} *"),
            Some(Mark::Second) => format!("{c} +"),
            None => c,
        }));
        let mut out = format!(
            "{} / {} (STD ddof = {})\n",
            self.dataset,
            self.attribute,
            ddof_str(self.ddof)
        );
        out.push_str(&align(&rows));
        out.push_str("* best, + second\n");
        out
    }

    /// Markdown; best in bold, second underlined.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "**{} / {}** (STD ddof = {})\n\n",
            self.dataset,
            self.attribute,
            ddof_str(self.ddof)
        );
        let header = Self::header_cells();
        let _ = writeln!(out, "| {} |", header.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
        for r in self.cells(|c, m| match m {
            Some(Mark::Best) => format!("**{c}**"),
            Some(Mark::Second) => format!("<u>{c}</u>"),
            None => c,
        }) {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }

    /// `table.csv`, `table.txt` and `table.md` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_outputs(dir, "table", &self.to_csv()?, &self.to_text(), &self.to_markdown())
    }
}

fn align<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn write_outputs(dir: &Path, stem: &str, csv: &str, text: &str, md: &str) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    for (ext, body) in [("csv", csv), ("txt", text), ("md", md)] {
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).at(&path)?;
    }
    Ok(())
}

/// Runs of one β value, with optional attribute-probe accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRuns {
    pub beta: f64,
    pub evaluations: Vec<RunEvaluation>,
    /// Empty when no probe was trained.
    pub probe_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f64,
    pub runs: usize,
    pub avg: MeanStd,
    pub delta: MeanStd,
    pub ser: MeanStd,
    pub ser_infinite: bool,
    pub std: MeanStd,
    /// Probe accuracy in percent.
    pub probe: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSweepSummary {
    pub ddof: Ddof,
    pub rows: Vec<BetaRow>,
}

/// One row per β, ascending. Avg, Δ, STD and probe accuracy in percent.
pub fn beta_sweep_summary(runs: &[BetaRuns], ddof: Ddof) -> Result<BetaSweepSummary> {
    if runs.is_empty() {
        return Err(FairsegError::Invalid("beta sweep has no runs".into()));
    }
    let mut rows = Vec::with_capacity(runs.len());
    for b in runs {
        if b.evaluations.is_empty() {
            return Err(FairsegError::Invalid(format!("β = {} has no evaluations", b.beta)));
        }
        let reports: Vec<FairnessReport> = b.evaluations.iter().map(|r| r.fairness(ddof).clone()).collect();
        let agg = aggregate_runs(&reports)?;
        let dice: Vec<f64> = b.evaluations.iter().map(|r| r.mean_dice).collect();
        rows.push(BetaRow {
            beta: b.beta,
            runs: b.evaluations.len(),
            avg: scaled(MeanStd::of(&dice)),
            delta: scaled(agg.delta),
            ser: agg.ser,
            ser_infinite: agg.ser_infinite,
            std: scaled(agg.std),
            probe: (!b.probe_accuracy.is_empty()).then(|| scaled(MeanStd::of(&b.probe_accuracy))),
        });
    }
    rows.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    Ok(BetaSweepSummary { ddof, rows })
}

impl BetaSweepSummary {
    pub fn has_probe(&self) -> bool {
        self.rows.iter().any(|r| r.probe.is_some())
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["β", "Avg", "Δ", "SER", "STD"].map(String::from).to_vec();
        if self.has_probe() {
            h.push("Probe acc".into());
        }
        h
    }

    fn body(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                let mut v = vec![
                    r.beta.to_string(),
                    cell(r.avg),
                    cell(r.delta),
                    if r.ser_infinite { format!("{} (inf)", cell(r.ser)) } else { cell(r.ser) },
                    cell(r.std),
                ];
                if self.has_probe() {
                    v.push(r.probe.map(cell).unwrap_or_else(|| "-".into()));
                }
                v
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "beta", "runs", "avg_mean", "avg_std", "delta_mean", "delta_std", "ser_mean", "ser_std",
            "ser_infinite", "std_mean", "std_std",
        ];
        if self.has_probe() {
            header.extend(["probe_mean", "probe_std"]);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.beta.to_string(), r.runs.to_string()];
            for m in [r.avg, r.delta, r.ser] {
                rec.push(m.mean.to_string());
                rec.push(m.std.to_string());
            }
            rec.push(r.ser_infinite.to_string());
            rec.push(r.std.mean.to_string());
            rec.push(r.std.std.to_string());
            if self.has_probe() {
                match r.probe {
                    Some(p) => rec.extend([p.mean.to_string(), p.std.to_string()]),
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    pub fn to_text(&self) -> String {
        let header = self.header();
        let n = header.len();
        let rows: Vec<Vec<String>> = std::iter::once(header).chain(self.body()).collect();
        let mut widths = vec![0usize; n];
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
        for r in self.body() {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        out
    }

    /// `beta_sweep.csv`, `beta_sweep.txt` and `beta_sweep.md` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_outputs(dir, "beta_sweep", &self.to_csv()?, &self.to_text(), &self.to_markdown())
    }
}
