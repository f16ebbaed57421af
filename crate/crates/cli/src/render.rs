//! CSV and heatmap renderings of attention weights.

use image::{Rgb, RgbImage};

use crate::ScaleAttention;

/// Pixel size of one heatmap cell.
const CELL: u32 = 12;

/// One row per position: the covered tokens, then one column per subspace.
pub fn attention_csv(scale: &ScaleAttention) -> Vec<u8> {
    let r = scale.weights.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("unit".to_string()).chain((1..=r).map(|j| format!("subspace{j}")));
    w.write_record(header).expect("in-memory write");
    for (unit, row) in scale.units.iter().zip(&scale.weights) {
        let record = std::iter::once(unit.clone()).chain(row.iter().map(f64::to_string));
        w.write_record(record).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Positions run down, subspaces across. Each column is scaled by its own
/// maximum so that peaked and flat subspaces are both readable.
pub fn attention_png(scale: &ScaleAttention) -> RgbImage {
    let n = scale.weights.len();
    let r = scale.weights.first().map_or(0, Vec::len);
    let col_max: Vec<f64> = (0..r)
        .map(|j| scale.weights.iter().map(|row| row[j]).fold(0.0, f64::max))
        .collect();
    RgbImage::from_fn(r as u32 * CELL, n as u32 * CELL, |x, y| {
        let (t, j) = ((y / CELL) as usize, (x / CELL) as usize);
        let v = if col_max[j] > 0.0 { scale.weights[t][j] / col_max[j] } else { 0.0 };
        let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
        Rgb([255, shade, shade])
    })
}
