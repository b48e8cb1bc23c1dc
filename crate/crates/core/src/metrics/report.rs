use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::nonlocality::NonlocalityReport;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["layer", "head", "task", "procedure", "seed", "value"];

/// One row per `(layer, head)` plus a `head = mean` row per layer.
pub fn nonlocality_csv<W: Write>(reports: &[NonlocalityReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(CSV_HEADER).map_err(ser)?;
    for r in reports {
        for (l, heads) in r.per_head.iter().enumerate() {
            let meta = [r.task.to_string(), r.procedure.to_string(), r.seed.to_string()];
            for (h, v) in heads.iter().enumerate() {
                w.write_record([
                    l.to_string(),
                    h.to_string(),
                    meta[0].clone(),
                    meta[1].clone(),
                    meta[2].clone(),
                    v.to_string(),
                ])
                .map_err(ser)?;
            }
            w.write_record([
                l.to_string(),
                "mean".to_string(),
                meta[0].clone(),
                meta[1].clone(),
                meta[2].clone(),
                r.per_layer[l].to_string(),
            ])
            .map_err(ser)?;
        }
    }
    w.flush().map_err(|e| Error::Serialize(e.to_string()))
}

pub fn write_nonlocality_csv(reports: &[NonlocalityReport], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    nonlocality_csv(reports, std::io::BufWriter::new(file))
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Binary greyscale PGM (`P5`, maxval 255) of a row-major `height × width`
/// map, min-max normalized. A constant map renders as all zeros.
pub fn pgm_bytes(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height || values.is_empty() {
        return Err(Error::Metrics(format!(
            "heatmap has {} values for a {width}×{height} image",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metrics("non-finite heat value".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(values: &[f64], width: usize, height: usize, path: &Path) -> Result<()> {
    std::fs::write(path, pgm_bytes(values, width, height)?).map_err(|e| Error::io(path, e))
}
