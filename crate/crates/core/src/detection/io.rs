//! Detection line format: `class,score,cx,cy,w,l,yaw` per line, no header.

use std::io::{Read, Write};
use std::path::Path;

use super::{ClassId, Detection, Obb};
use crate::error::{Error, Result};

const FIELDS: [&str; 7] = ["class", "score", "cx", "cy", "w", "l", "yaw"];

pub fn write_detections(dets: &[Detection], mut out: impl Write) -> std::io::Result<()> {
    for d in dets {
        let b = &d.obb;
        writeln!(out, "{},{},{},{},{},{},{}", d.class, d.score, b.cx, b.cy, b.w, b.l, b.yaw)?;
    }
    Ok(())
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_detections(file)
}

/// Parses detection lines; blank lines and `#` comments are skipped.
pub fn parse_detections(input: impl Read) -> Result<Vec<Detection>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let row = k + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: String::new(),
            message: e.to_string(),
        })?;
        if record.len() != FIELDS.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", FIELDS.len(), record.len()),
            });
        }
        let bad = |col: usize, message: String| Error::Parse {
            row,
            column: FIELDS[col].to_string(),
            message,
        };
        let class: ClassId = record[0].parse().map_err(|e: Error| bad(0, e.to_string()))?;
        let mut v = [0.0; 6];
        for (col, slot) in v.iter_mut().enumerate() {
            let text = &record[col + 1];
            *slot = text
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(col + 1, format!("`{text}` is not a finite number")))?;
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(bad(1, format!("score {} outside [0, 1]", v[0])));
        }
        if v[3] <= 0.0 || v[4] <= 0.0 {
            return Err(bad(if v[3] <= 0.0 { 4 } else { 5 }, "box extent must be positive".into()));
        }
        out.push(Detection::new(Obb::new(v[1], v[2], v[3], v[4], v[5]), v[0], class));
    }
    Ok(out)
}
