//! Distance maps and instance separation.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use ndarray::Array2;

use crate::conditioning::{instance_center, instance_pixels, PointMap};
use crate::error::{Error, Result};

/// Normalized distance to each nucleus center: 0 at the center pixel, 1 at
/// the instance's farthest pixel, 1 on background.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap(pub Array2<f32>);

impl DistanceMap {
    pub fn grid(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Computes the distance map of an instance label map.
///
/// Each instance is measured from its center pixel (see
/// [`instance_center`]), which is also where its point-map marker sits.
pub fn distance_map(instance: &Array2<u32>) -> DistanceMap {
    let mut d = Array2::<f32>::ones(instance.dim());
    for pixels in instance_pixels(instance).values() {
        let (cy, cx) = instance_center(pixels).expect("nonempty instance");
        let dist = |&(y, x): &(usize, usize)| {
            ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt()
        };
        let max = pixels.iter().map(dist).fold(0.0, f64::max);
        for p in pixels {
            d[*p] = if max == 0.0 { 0.0 } else { (dist(p) / max) as f32 };
        }
    }
    DistanceMap(d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    height: f32,
    order: u64,
    pixel: (usize, usize),
    label: u32,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.height
            .total_cmp(&other.height)
            .then(self.order.cmp(&other.order))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBORS_4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const NEIGHBORS_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn neighbors(
    (y, x): (usize, usize),
    (h, w): (usize, usize),
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = (usize, usize)> {
    offsets.iter().filter_map(move |&(dy, dx)| {
        let ny = y as isize + dy;
        let nx = x as isize + dx;
        (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then_some((ny as usize, nx as usize))
    })
}

/// Marker-controlled watershed on the distance map.
///
/// Each marker on a foreground pixel seeds a new instance (ids in row-major
/// marker order). Basins grow over 4-connected pixels of the seed's semantic
/// class in ascending distance, earliest-queued first on ties. Foreground
/// pixels no marker reaches become their own connected-component instances.
pub fn watershed_separate(d: &DistanceMap, semantic: &Array2<u8>, pc: &PointMap) -> Result<Array2<u32>> {
    let dim = semantic.dim();
    if d.shape() != dim || pc.shape() != dim {
        return Err(Error::arg(format!(
            "shape mismatch: distance {:?}, semantic {dim:?}, points {:?}",
            d.shape(),
            pc.shape()
        )));
    }
    let height = d.grid();
    let mut labels = Array2::<u32>::zeros(dim);
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut next_id = 1u32;

    for (p, _) in pc.markers() {
        if semantic[p] == 0 || labels[p] != 0 {
            continue;
        }
        labels[p] = next_id;
        heap.push(Reverse(Entry {
            height: height[p],
            order,
            pixel: p,
            label: next_id,
        }));
        order += 1;
        next_id += 1;
    }

    while let Some(Reverse(e)) = heap.pop() {
        let class = semantic[e.pixel];
        for q in neighbors(e.pixel, dim, &NEIGHBORS_4) {
            if labels[q] != 0 || semantic[q] != class {
                continue;
            }
            labels[q] = e.label;
            heap.push(Reverse(Entry {
                height: height[q],
                order,
                pixel: q,
                label: e.label,
            }));
            order += 1;
        }
    }

    label_components(semantic, &mut labels, next_id);
    Ok(labels)
}

/// 8-connected components of each foreground class, ids in row-major order of discovery.
pub fn connectivity_separate(semantic: &Array2<u8>) -> Array2<u32> {
    let mut labels = Array2::<u32>::zeros(semantic.dim());
    label_components(semantic, &mut labels, 1);
    labels
}

/// Labels every still-unlabeled foreground pixel by 8-connected same-class flood fill.
fn label_components(semantic: &Array2<u8>, labels: &mut Array2<u32>, mut next_id: u32) {
    let dim = semantic.dim();
    let mut stack = Vec::new();
    for y in 0..dim.0 {
        for x in 0..dim.1 {
            let class = semantic[(y, x)];
            if class == 0 || labels[(y, x)] != 0 {
                continue;
            }
            labels[(y, x)] = next_id;
            stack.push((y, x));
            while let Some(p) = stack.pop() {
                for q in neighbors(p, dim, &NEIGHBORS_8) {
                    if labels[q] == 0 && semantic[q] == class {
                        labels[q] = next_id;
                        stack.push(q);
                    }
                }
            }
            next_id += 1;
        }
    }
}

/// Number of distinct nonzero ids.
pub fn count_instances(labels: &Array2<u32>) -> usize {
    instance_pixels(labels).len()
}

/// True when two instance maps are the same partition up to renaming ids.
pub fn same_partition(a: &Array2<u32>, b: &Array2<u32>) -> bool {
    use std::collections::HashMap;
    if a.dim() != b.dim() {
        return false;
    }
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        if (x == 0) != (y == 0) {
            return false;
        }
        if x == 0 {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}
