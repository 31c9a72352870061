//! Detection boxes as CSV with header `x1,y1,x2,y2,score`.
//!
//! Coordinates are corner-based: a box spans [x1, x2) x [y1, y2) over the
//! continuous image plane, so a full W x H image is (0, 0, W, H).

use std::path::Path;

use masklab_core::assembly::BoundingBox;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Serialize, Deserialize)]
struct BoxRow {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    score: f64,
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<BoundingBox>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let mut boxes = Vec::new();
    for (i, row) in reader.deserialize::<BoxRow>().enumerate() {
        let row = row.map_err(|e| {
            CliError::input(format!("{}: row {}: {e}", path.display(), i + 1))
        })?;
        let b = BoundingBox::new(row.x1, row.y1, row.x2, row.y2, row.score).map_err(|e| {
            CliError::input(format!("{}: row {}: {e}", path.display(), i + 1))
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[BoundingBox]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    for b in boxes {
        writer
            .serialize(BoxRow {
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                score: b.score,
            })
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(())
}
