use ndarray::Array2;

use crate::conditioning::PointMap;
use crate::error::{Error, Result};

/// Counts markers whose class is a most frequent label (background included)
/// in the 3×3 window around them, clipped at the borders. Ties count as hits.
///
/// Returns (hits, markers).
pub fn marker_hits(points: &PointMap, semantic: &Array2<u8>) -> Result<(usize, usize)> {
    let (h, w) = points.shape();
    if semantic.dim() != (h, w) {
        return Err(Error::arg(format!(
            "label map {:?} does not match point map {h}x{w}",
            semantic.dim()
        )));
    }
    let markers = points.markers();
    let hits = markers
        .iter()
        .filter(|&&((y, x), c)| {
            let mut counts = [0usize; 256];
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    counts[semantic[(yy, xx)] as usize] += 1;
                }
            }
            counts[c as usize] == *counts.iter().max().expect("nonempty")
        })
        .count();
    Ok((hits, markers.len()))
}

/// Fraction of markers honoured over a set of samples.
pub fn marker_adherence<'a>(
    pairs: impl IntoIterator<Item = (&'a PointMap, &'a Array2<u8>)>,
) -> Result<f64> {
    let (mut hits, mut total) = (0, 0);
    for (p, s) in pairs {
        let (a, b) = marker_hits(p, s)?;
        hits += a;
        total += b;
    }
    if total == 0 {
        return Err(Error::UndefinedMetric {
            metric: "marker_adherence",
            reason: "no markers".into(),
        });
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plurality_in_window_with_clipping() {
        let mut g = Array2::<u8>::zeros((5, 5));
        g[(0, 0)] = 2;
        g[(2, 2)] = 1;
        let points = PointMap::new(g);
        let mut sem = Array2::<u8>::zeros((5, 5));
        // Clipped 2x2 corner window: one pixel of class 2 against three background.
        sem[(1, 1)] = 2;
        assert_eq!(marker_hits(&points, &sem).unwrap(), (0, 2));
        sem[(0, 1)] = 2;
        assert_eq!(marker_hits(&points, &sem).unwrap(), (1, 2));
        // Centre window: four of class 1 vs two of class 2 and three background.
        for p in [(2, 2), (2, 3), (3, 2), (3, 3)] {
            sem[p] = 1;
        }
        assert_eq!(marker_hits(&points, &sem).unwrap(), (2, 2));
        assert!((marker_adherence([(&points, &sem)]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ties_count_as_hits() {
        let mut g = Array2::<u8>::zeros((3, 3));
        g[(1, 1)] = 3;
        let points = PointMap::new(g);
        let sem = Array2::from_shape_vec((3, 3), vec![3, 3, 3, 1, 1, 1, 0, 0, 0]).unwrap();
        assert_eq!(marker_hits(&points, &sem).unwrap(), (1, 1));
        let sem = Array2::from_shape_vec((3, 3), vec![3, 3, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(marker_hits(&points, &sem).unwrap(), (0, 1));
    }

    #[test]
    fn no_markers_is_undefined() {
        let points = PointMap::empty(3, 3);
        let sem = Array2::<u8>::zeros((3, 3));
        assert!(matches!(
            marker_adherence([(&points, &sem)]),
            Err(Error::UndefinedMetric { .. })
        ));
    }
}
