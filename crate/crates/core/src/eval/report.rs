//! Per-sample score tables.

use std::collections::HashMap;
use std::path::Path;

use super::auroc::ScoredSample;
use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::scoring::{AnomalyScore, CropBox};

pub const SCORE_HEADER: [&str; 8] = ["id", "score", "a_mp1", "a_mp2", "x0", "y0", "x1", "y1"];

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub id: String,
    pub score: AnomalyScore,
    pub crop_box: CropBox,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

pub fn scores_to_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mem = Path::new("<memory>");
    w.write_record(SCORE_HEADER).map_err(|e| csv_err(mem, e))?;
    for r in rows {
        let b = &r.crop_box;
        let s = &r.score;
        w.write_record([
            r.id.clone(),
            s.value.to_string(),
            s.raw.to_string(),
            s.crop.to_string(),
            b.x0.to_string(),
            b.y0.to_string(),
            b.x1.to_string(),
            b.y1.to_string(),
        ])
        .map_err(|e| csv_err(mem, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid("scores_to_csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}

pub fn parse_scores(text: &str, source: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_err(source, e))?;
    if header.iter().ne(SCORE_HEADER) {
        return Err(Error::Malformed {
            path: source.to_path_buf(),
            detail: format!("expected header {}", SCORE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(source, e))?;
        let bad = |field: &str| Error::Malformed {
            path: source.to_path_buf(),
            detail: format!("bad {field} `{}` for id `{}`", rec.get(SCORE_HEADER.iter().position(|h| *h == field).unwrap_or(0)).unwrap_or(""), &rec[0]),
        };
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(SCORE_HEADER[i]));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(SCORE_HEADER[i]));
        rows.push(ScoreRow {
            id: rec[0].to_string(),
            score: AnomalyScore {
                value: f(1)?,
                raw: f(2)?,
                crop: f(3)?,
            },
            crop_box: CropBox {
                x0: u(4)?,
                y0: u(5)?,
                x1: u(6)?,
                y1: u(7)?,
                source_cells: None,
            },
        });
    }
    Ok(rows)
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Attach manifest labels to score rows by id; every row must match.
pub fn join_labels(rows: &[ScoreRow], labels: &Manifest) -> Result<Vec<ScoredSample>> {
    let by_id: HashMap<&str, u8> = labels.entries.iter().map(|e| (e.path.as_str(), e.label)).collect();
    rows.iter()
        .map(|r| {
            let label = *by_id
                .get(r.id.as_str())
                .ok_or_else(|| Error::invalid("join_labels", format!("id `{}` is not in the label manifest", r.id)))?;
            Ok(ScoredSample {
                id: r.id.clone(),
                label,
                score: r.score.value,
            })
        })
        .collect()
}
