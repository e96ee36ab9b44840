use std::ops::Range;

use crate::error::{Error, Result};

/// Moves every row's vision mass onto column `k`.
///
/// The merged entry is the sum of the vision entries in column order, so
/// the vision group and the non-vision group each keep their exact sums and
/// non-vision entries are untouched.
pub fn merge_vision_attention(rows: &mut [Vec<f64>], vision: Range<usize>, k: usize) -> Result<()> {
    if !vision.contains(&k) {
        return Err(Error::input(format!(
            "merge position {k} outside vision columns {}..{}",
            vision.start, vision.end
        )));
    }
    for row in rows.iter_mut() {
        if vision.end > row.len() {
            return Err(Error::shape(format!(
                "vision columns {}..{} exceed row of length {}",
                vision.start,
                vision.end,
                row.len()
            )));
        }
        let total = row[vision.clone()].iter().fold(0.0, |acc, w| acc + w);
        for w in &mut row[vision.clone()] {
            *w = 0.0;
        }
        row[k] = total;
    }
    Ok(())
}

/// Sum of the non-vision entries plus the sum of the vision entries, each
/// accumulated in column order. This grouping is what the merge preserves
/// exactly.
pub fn grouped_row_mass(row: &[f64], vision: Range<usize>) -> f64 {
    let outside = row
        .iter()
        .enumerate()
        .filter(|(c, _)| !vision.contains(c))
        .fold(0.0, |acc, (_, w)| acc + w);
    let inside = row[vision].iter().fold(0.0, |acc, w| acc + w);
    outside + inside
}
