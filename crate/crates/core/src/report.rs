//! Leaderboard rendering in Markdown or CSV.

use std::collections::BTreeMap;

use crate::domain::{BattleRecord, CompetencyDimension};
use crate::rating::{win_rate, RatingTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format {other}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReportError {
    #[error("no comprehensive rating table")]
    MissingComprehensive,
    #[error("no rating table for {0}")]
    MissingDimension(CompetencyDimension),
    #[error("model {model} is missing from the {dimension} table")]
    MissingModel { model: String, dimension: CompetencyDimension },
}

/// One leaderboard row with unformatted values.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub rank: usize,
    pub model: String,
    pub elo: f64,
    pub win_rate: Option<f64>,
    pub dimensions: Vec<f64>,
}

/// Rows sorted by comprehensive Elo, highest first.
pub fn leaderboard(tables: &[RatingTable], records: Option<&[BattleRecord]>) -> Result<Vec<Row>, ReportError> {
    let overall = tables.iter().find(|t| t.dimension.is_none()).ok_or(ReportError::MissingComprehensive)?;
    let by_dim: BTreeMap<CompetencyDimension, &RatingTable> =
        tables.iter().filter_map(|t| t.dimension.map(|d| (d, t))).collect();
    overall
        .ranking()
        .into_iter()
        .enumerate()
        .map(|(i, (model, elo))| {
            let dimensions = CompetencyDimension::ALL
                .iter()
                .map(|d| {
                    let t = by_dim.get(d).ok_or(ReportError::MissingDimension(*d))?;
                    t.ratings
                        .get(model)
                        .copied()
                        .ok_or_else(|| ReportError::MissingModel { model: model.to_string(), dimension: *d })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            Ok(Row {
                rank: i + 1,
                model: model.to_string(),
                elo,
                win_rate: records.and_then(|r| win_rate(r, model).ok()),
                dimensions,
            })
        })
        .collect()
}

fn cells(row: &Row) -> Vec<String> {
    let mut v = vec![
        row.rank.to_string(),
        row.model.clone(),
        format!("{:.0}", row.elo),
        row.win_rate.map_or_else(|| "-".to_string(), |w| format!("{w:.2}")),
    ];
    v.extend(row.dimensions.iter().map(|e| format!("{e:.0}")));
    v
}

fn header() -> Vec<String> {
    ["Rank", "Model", "Elo", "Win Rate"]
        .iter()
        .map(|s| s.to_string())
        .chain(CompetencyDimension::ALL.iter().map(|d| d.name().to_string()))
        .collect()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render the leaderboard. Elo values have no decimals, win rates two.
pub fn emit_report(
    tables: &[RatingTable],
    records: Option<&[BattleRecord]>,
    format: ReportFormat,
) -> Result<String, ReportError> {
    let rows = leaderboard(tables, records)?;
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let h = header();
            out.push_str(&format!("| {} |\n", h.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(h.len())));
            for r in &rows {
                out.push_str(&format!("| {} |\n", cells(r).join(" | ")));
            }
        }
        ReportFormat::Csv => {
            let line = |v: Vec<String>| v.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(",");
            out.push_str(&line(header()));
            out.push('\n');
            for r in &rows {
                out.push_str(&line(cells(r)));
                out.push('\n');
            }
        }
    }
    Ok(out)
}
