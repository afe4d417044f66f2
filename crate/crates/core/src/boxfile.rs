//! Plain-text box lists: one box per line, `x1 y1 x2 y2 [label] [score]`.
//!
//! Blank lines and lines starting with `#` are skipped.

use std::fmt::Write as _;
use std::path::Path;

use crate::geometry::BBox;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxRecord {
    pub bbox: BBox,
    pub label: Option<usize>,
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn plain(bbox: BBox) -> Self {
        BoxRecord {
            bbox,
            label: None,
            score: None,
        }
    }
}

pub fn parse(text: &str, source_name: &str) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(4..=6).contains(&fields.len()) {
            return Err(err(format!(
                "expected 4 to 6 fields, found {}",
                fields.len()
            )));
        }
        let mut coords = [0.0; 4];
        for (c, f) in coords.iter_mut().zip(&fields) {
            *c = f
                .parse::<f64>()
                .map_err(|e| err(format!("bad coordinate {f:?}: {e}")))?;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3])
            .map_err(|e| err(e.to_string()))?;
        let label = fields
            .get(4)
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|e| err(format!("bad label {f:?}: {e}")))
            })
            .transpose()?;
        let score = fields
            .get(5)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| err(format!("bad score {f:?}: {e}")))
            })
            .transpose()?;
        out.push(BoxRecord { bbox, label, score });
    }
    Ok(out)
}

/// Formats records; a score without a label is not representable and is dropped.
pub fn format(records: &[BoxRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let b = &r.bbox;
        let _ = write!(s, "{} {} {} {}", b.x1, b.y1, b.x2, b.y2);
        if let Some(label) = r.label {
            let _ = write!(s, " {label}");
            if let Some(score) = r.score {
                let _ = write!(s, " {score}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn read(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string())
}

pub fn write(path: &Path, records: &[BoxRecord]) -> Result<()> {
    std::fs::write(path, format(records)).map_err(|e| Error::io(path, e))
}
