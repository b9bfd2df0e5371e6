//! Scored detections, greedy suppression, and the detection file.
//!
//! The detection file is JSON Lines, one object per detection:
//!
//! ```text
//! {"image_id":"val_00000","x":12.5,"y":3.0,"w":24.6,"h":60.0,"score":0.931245}
//! ```
//!
//! Numbers use the shortest representation that round-trips the stored
//! `f64`, so scores keep full precision.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub image_id: String,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    score: f64,
}

/// Greedy non-maximum suppression.
///
/// Detections are visited by descending score (ties keep input order); each
/// kept detection removes every remaining one with IoU ≥ `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::contract(
            "nms",
            format!("iou threshold {iou_threshold} outside (0, 1)"),
        ));
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut suppressed = vec![false; detections.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(detections[i].clone());
        for &j in &order[rank + 1..] {
            if !suppressed[j] && iou(&detections[i].bbox, &detections[j].bbox) >= iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in detections {
        let rec = DetectionRecord {
            image_id: d.image_id.clone(),
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            score: d.score,
        };
        let line = serde_json::to_string(&rec).expect("plain record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: DetectionRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let bbox = BBox::new(rec.x, rec.y, rec.w, rec.h).map_err(|e| parse_err(e.to_string()))?;
        if !(0.0..=1.0).contains(&rec.score) {
            return Err(parse_err(format!("score {} outside [0, 1]", rec.score)));
        }
        out.push(Detection {
            bbox,
            score: rec.score,
            image_id: rec.image_id,
        });
    }
    Ok(out)
}
