//! Result tables: one row per (fusion, model, imputer), one column group per
//! train missing rate, one column per test missing rate.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::evaluation::{cell_result, CellKey, GridRecord, Metric, Rate};
use crate::masking::Scenario;
use crate::model::FusionMode;

/// Rendered for cells without a value.
pub const MISSING_CELL: &str = "—";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct RowKey {
    pub fusion: String,
    pub model: String,
    pub imputer: String,
}

impl RowKey {
    pub fn new(fusion: impl Into<String>, model: impl Into<String>, imputer: impl Into<String>) -> Self {
        RowKey {
            fusion: fusion.into(),
            model: model.into(),
            imputer: imputer.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub metric: Metric,
    pub title: String,
    /// Train-rate labels.
    pub groups: Vec<String>,
    /// Test-rate labels, repeated within every group.
    pub columns: Vec<String>,
    pub rows: Vec<RowKey>,
    /// Percent values, row-major over `groups x columns`.
    values: Vec<Vec<Option<f64>>>,
}

/// Value as shown, in hundredths of a percent.
fn shown(v: f64) -> i64 {
    (v * 100.0).round() as i64
}

pub fn fusion_label(f: FusionMode) -> &'static str {
    match f {
        FusionMode::Early => "Early",
        FusionMode::Intermediate => "Intermediate",
        FusionMode::Late => "Late",
    }
}

fn format_cell(value: Option<f64>, bold: bool) -> String {
    match value {
        None => MISSING_CELL.into(),
        Some(v) if bold => format!("**{:.2}**", shown(v) as f64 / 100.0),
        Some(v) => format!("{:.2}", shown(v) as f64 / 100.0),
    }
}

fn rate_order(r: &Rate) -> (u8, u64) {
    match r {
        Rate::Omega => (0, 0),
        Rate::Value(v) => (1, v.to_bits()),
    }
}

impl ReportTable {
    pub fn new(
        metric: Metric,
        title: impl Into<String>,
        groups: Vec<String>,
        columns: Vec<String>,
        rows: Vec<(RowKey, Vec<Option<f64>>)>,
    ) -> Result<Self> {
        let width = groups.len() * columns.len();
        if let Some((k, v)) = rows.iter().find(|(_, v)| v.len() != width) {
            return Err(Error::InvalidArgument(format!(
                "row {}/{}/{} has {} values, expected {width}",
                k.fusion,
                k.model,
                k.imputer,
                v.len()
            )));
        }
        let (rows, values) = rows.into_iter().unzip();
        Ok(ReportTable {
            metric,
            title: title.into(),
            groups,
            columns,
            rows,
            values,
        })
    }

    /// Builds the table of fold-mean `metric` values (as percentages) for one
    /// scenario. Rows follow fusion mode, then model and imputer label.
    pub fn from_records(records: &[GridRecord], scenario: Scenario, metric: Metric) -> Result<Self> {
        let mine: Vec<&GridRecord> = records.iter().filter(|r| r.scenario == scenario).collect();
        if mine.is_empty() {
            return Err(Error::InvalidArgument(format!("no records for scenario {scenario}")));
        }
        let mut train: Vec<Rate> = Vec::new();
        let mut test: Vec<Rate> = Vec::new();
        let mut keys = BTreeSet::new();
        for r in &mine {
            if !train.contains(&r.train_rate) {
                train.push(r.train_rate);
            }
            if !test.contains(&r.test_rate) {
                test.push(r.test_rate);
            }
            keys.insert((fusion_label(r.fusion), r.model.clone(), r.imputer.label(), r.fusion, r.imputer));
        }
        train.sort_by_key(rate_order);
        test.sort_by_key(rate_order);
        let owned: Vec<GridRecord> = mine.into_iter().cloned().collect();
        let rows = keys
            .into_iter()
            .map(|(fl, model, il, fusion, imputer)| {
                let values = train
                    .iter()
                    .flat_map(|&tr| test.iter().map(move |&te| (tr, te)))
                    .map(|(train_rate, test_rate)| {
                        cell_result(
                            &owned,
                            CellKey {
                                scenario,
                                fusion,
                                imputer,
                                train_rate,
                                test_rate,
                            },
                            metric,
                        )
                        .map(|m| m.value * 100.0)
                    })
                    .collect();
                (RowKey::new(fl, model, il), values)
            })
            .collect();
        ReportTable::new(
            metric,
            format!("{} ({scenario})", metric.label()),
            train.iter().map(|r| r.label()).collect(),
            test.iter().map(|r| r.label()).collect(),
            rows,
        )
    }

    pub fn width(&self) -> usize {
        self.groups.len() * self.columns.len()
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row][col]
    }

    pub fn find_row(&self, fusion: &str, model: &str, imputer: &str) -> Option<usize> {
        self.rows
            .iter()
            .position(|k| k.fusion == fusion && k.model == model && k.imputer == imputer)
    }

    /// Flat column index of (`group`, `column`) labels.
    pub fn find_col(&self, group: &str, column: &str) -> Option<usize> {
        let g = self.groups.iter().position(|x| x == group)?;
        let c = self.columns.iter().position(|x| x == column)?;
        Some(g * self.columns.len() + c)
    }

    /// Row holding the largest shown value of column `col`; the first such row
    /// on ties. `None` when the column is empty.
    pub fn bold_row(&self, col: usize) -> Option<usize> {
        let mut best: Option<(i64, usize)> = None;
        for (r, row) in self.values.iter().enumerate() {
            if let Some(v) = row[col] {
                let s = shown(v);
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, r));
                }
            }
        }
        best.map(|(_, r)| r)
    }

    pub fn cell_text(&self, row: usize, col: usize) -> String {
        format_cell(self.values[row][col], self.bold_row(col) == Some(row))
    }

    fn grid_cells(&self) -> Vec<Vec<String>> {
        let bold: Vec<Option<usize>> = (0..self.width()).map(|c| self.bold_row(c)).collect();
        (0..self.rows.len())
            .map(|r| (0..self.width()).map(|c| format_cell(self.values[r][c], bold[c] == Some(r))).collect())
            .collect()
    }

    /// Aligned plain-text rendering.
    pub fn render_text(&self) -> String {
        let n = self.columns.len();
        let mut head1 = vec![String::new(); 3];
        let mut head2: Vec<String> = ["Fusion Strategy", "Model", "Imputer"].map(String::from).to_vec();
        for g in &self.groups {
            for (i, c) in self.columns.iter().enumerate() {
                head1.push(if i == 0 { format!("Train {g}") } else { String::new() });
                head2.push(c.clone());
            }
        }
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .zip(self.grid_cells())
            .map(|(k, cells)| {
                let mut line = vec![k.fusion.clone(), k.model.clone(), k.imputer.clone()];
                line.extend(cells);
                line
            })
            .collect();
        let all: Vec<&Vec<String>> = [&head1, &head2].into_iter().chain(&body).collect();
        let widths: Vec<usize> = (0..head2.len())
            .map(|c| all.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        writeln!(out, "{}", self.title).unwrap();
        for line in all {
            let mut text = String::new();
            for (c, cell) in line.iter().enumerate() {
                if c > 0 {
                    text.push_str(if c >= 3 && (c - 3) % n == 0 { " | " } else { "  " });
                }
                let pad = widths[c] - cell.chars().count();
                if c < 3 {
                    text.push_str(cell);
                    text.push_str(&" ".repeat(pad));
                } else {
                    text.push_str(&" ".repeat(pad));
                    text.push_str(cell);
                }
            }
            writeln!(out, "{}", text.trim_end()).unwrap();
        }
        out
    }

    /// CSV with one column per (train rate, test rate) pair, headed
    /// `train/test`.
    pub fn render_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = ["fusion", "model", "imputer"].map(String::from).to_vec();
        for g in &self.groups {
            for c in &self.columns {
                header.push(format!("{g}/{c}"));
            }
        }
        w.write_record(&header).expect("in-memory write");
        for (k, cells) in self.rows.iter().zip(self.grid_cells()) {
            let mut line = vec![k.fusion.clone(), k.model.clone(), k.imputer.clone()];
            line.extend(cells);
            w.write_record(&line).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 input")
    }
}

/// AUC and MCC tables for every scenario present in `records`.
pub fn tables_from_records(records: &[GridRecord], metrics: &[Metric]) -> Result<Vec<ReportTable>> {
    let scenarios: BTreeSet<Scenario> = records.iter().map(|r| r.scenario).collect();
    let mut out = Vec::new();
    for s in scenarios {
        for &m in metrics {
            out.push(ReportTable::from_records(records, s, m)?);
        }
    }
    Ok(out)
}
