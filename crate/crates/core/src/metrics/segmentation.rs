use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_shapes<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::arg(format!(
            "prediction {:?} and ground truth {:?} shapes differ",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Binary foreground Dice, 1 when both masks are empty.
pub fn dice(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += (a != 0) as usize;
        g += (b != 0) as usize;
        both += (a != 0 && b != 0) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + g) as f64)
}

/// Pixel areas and pairwise overlaps of two instance maps.
#[derive(Debug, Default)]
pub(crate) struct Overlaps {
    pub gt_area: BTreeMap<u32, usize>,
    pub pred_area: BTreeMap<u32, usize>,
    /// gt id -> (pred id -> intersecting pixels)
    pub pairs: BTreeMap<u32, BTreeMap<u32, usize>>,
}

impl Overlaps {
    pub fn new(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<Self> {
        check_shapes(pred, gt)?;
        let mut o = Overlaps::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            if p != 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g != 0 {
                *o.gt_area.entry(g).or_default() += 1;
                if p != 0 {
                    *o.pairs.entry(g).or_default().entry(p).or_default() += 1;
                }
            }
        }
        Ok(o)
    }

    pub fn overlaps_of(&self, g: u32) -> impl Iterator<Item = (u32, usize)> + '_ {
        self.pairs.get(&g).into_iter().flat_map(|m| m.iter().map(|(&p, &n)| (p, n)))
    }
}

fn require_gt(o: &Overlaps, metric: &'static str) -> Result<()> {
    if o.gt_area.is_empty() {
        return Err(Error::UndefinedMetric {
            metric,
            reason: "ground truth has no instances".into(),
        });
    }
    Ok(())
}

/// Mean per-nucleus Dice: each ground-truth instance is scored against the
/// prediction overlapping it most (lowest id on ties); no overlap scores 0.
pub fn mdice(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<f64> {
    let o = Overlaps::new(pred, gt)?;
    require_gt(&o, "mdice")?;
    let total: f64 = o
        .gt_area
        .iter()
        .map(|(&g, &ga)| {
            // Ties keep the first (lowest) pred id.
            let best = o.overlaps_of(g).fold(None, |best: Option<(u32, usize)>, (p, n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((p, n)),
            });
            match best {
                Some((p, n)) => 2.0 * n as f64 / (ga + o.pred_area[&p]) as f64,
                None => 0.0,
            }
        })
        .sum();
    Ok(total / o.gt_area.len() as f64)
}

/// Aggregated Jaccard Index.
///
/// Each ground-truth instance is paired with the prediction of highest IoU
/// (lowest id on ties, reuse allowed); intersections and unions accumulate,
/// a ground-truth instance without any overlap adds its area to the union,
/// and every prediction never paired adds its area to the union.
pub fn aji(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<f64> {
    let o = Overlaps::new(pred, gt)?;
    require_gt(&o, "aji")?;
    let mut used: HashMap<u32, bool> = o.pred_area.keys().map(|&p| (p, false)).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for (&g, &ga) in &o.gt_area {
        let mut best: Option<(u32, usize, usize)> = None;
        let mut best_iou = 0.0;
        for (p, n) in o.overlaps_of(g) {
            let u = ga + o.pred_area[&p] - n;
            let iou = n as f64 / u as f64;
            if best.is_none() || iou > best_iou {
                best = Some((p, n, u));
                best_iou = iou;
            }
        }
        match best {
            Some((p, n, u)) => {
                inter += n;
                union += u;
                used.insert(p, true);
            }
            None => union += ga,
        }
    }
    union += o
        .pred_area
        .iter()
        .filter(|(p, _)| !used[p])
        .map(|(_, &a)| a)
        .sum::<usize>();
    Ok(inter as f64 / union as f64)
}
