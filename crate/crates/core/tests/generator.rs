use std::collections::{BTreeMap, BTreeSet, VecDeque};

use cosynth::conditioning::instance_pixels;
use cosynth::toydata::{generate_patch, generate_patches, Patch, ToyDataConfig};

fn connected(pixels: &[(usize, usize)]) -> bool {
    let set: BTreeSet<_> = pixels.iter().copied().collect();
    let mut seen = BTreeSet::from([pixels[0]]);
    let mut queue = VecDeque::from([pixels[0]]);
    while let Some((y, x)) = queue.pop_front() {
        for q in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
            if set.contains(&q) && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen.len() == set.len()
}

fn check_patch(cfg: &ToyDataConfig, p: &Patch) -> Result<(), String> {
    let t = &p.triplet;
    let n = cfg.patch_size;
    let k_fg = cfg.class_palette.len();
    let inst = t.instance.as_ref().ok_or("missing instance map")?;
    if t.image.dim() != (n, n, 3) || t.distance.dim() != (n, n) || t.semantic.dim() != (n, n) || inst.dim() != (n, n) {
        return Err("shape mismatch".into());
    }
    if t.image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err("image out of range".into());
    }
    if t.semantic.iter().any(|&c| c as usize > k_fg) {
        return Err("class out of range".into());
    }
    for ((pix, &id), &c) in inst.indexed_iter().zip(t.semantic.iter()) {
        if (id == 0) != (c == 0) {
            return Err(format!("label maps disagree at {pix:?}"));
        }
        if id == 0 && t.distance[pix] != 1.0 {
            return Err(format!("background distance {} at {pix:?}", t.distance[pix]));
        }
    }
    let groups = instance_pixels(inst);
    if groups.len() > cfg.nuclei_per_patch[1] {
        return Err(format!("{} nuclei", groups.len()));
    }
    let markers: BTreeMap<_, _> = p.points.markers().into_iter().collect();
    if markers.len() != p.points.marker_count() || markers.len() != groups.len() {
        return Err(format!("{} markers for {} nuclei", markers.len(), groups.len()));
    }
    for (id, px) in &groups {
        if !connected(px) {
            return Err(format!("instance {id} is fragmented"));
        }
        let class = t.semantic[px[0]];
        if px.iter().any(|&q| t.semantic[q] != class) {
            return Err(format!("instance {id} mixes classes"));
        }
        let mine: Vec<_> = px.iter().filter(|q| markers.contains_key(q)).collect();
        if mine.len() != 1 || markers[mine[0]] != class {
            return Err(format!("instance {id} has markers {mine:?}"));
        }
        for q in px {
            let d = t.distance[*q];
            let ok = if q == mine[0] { d == 0.0 } else { d > 0.0 && d <= 1.0 };
            if !ok {
                return Err(format!("distance {d} at {q:?} in instance {id}"));
            }
        }
    }
    let present: BTreeSet<u8> = t.semantic.iter().copied().filter(|&c| c != 0).collect();
    for (c, style) in cfg.class_palette.iter().enumerate() {
        if present.contains(&(c as u8 + 1)) != p.prompt.contains(style.name.as_str()) {
            return Err(format!("prompt {:?} vs classes {present:?}", p.prompt));
        }
    }
    if !p.prompt.contains(p.tissue.as_str()) || !cfg.tissue_names.contains(&p.tissue) {
        return Err(format!("tissue {:?} in prompt {:?}", p.tissue, p.prompt));
    }
    Ok(())
}

#[test]
fn thousand_patches_satisfy_invariants() {
    let cfg = ToyDataConfig {
        touching_probability: 0.5,
        ..ToyDataConfig::default()
    };
    let mut nuclei = 0;
    for i in 0..1000 {
        let p = generate_patch(&cfg, i).unwrap();
        if let Err(msg) = check_patch(&cfg, &p) {
            panic!("patch {i}: {msg}");
        }
        p.triplet.validate(cfg.class_palette.len() + 1).unwrap();
        p.points.validate(cfg.class_palette.len()).unwrap();
        nuclei += p.points.marker_count();
    }
    assert!(nuclei >= 1000 * cfg.nuclei_per_patch[0] / 2, "only {nuclei} nuclei placed");
}

#[test]
fn patches_are_deterministic() {
    let cfg = ToyDataConfig::default();
    let a = generate_patch(&cfg, 17).unwrap();
    let b = generate_patch(&cfg, 17).unwrap();
    assert_eq!(a.triplet, b.triplet);
    assert_eq!(a.points, b.points);
    assert_eq!(a.prompt, b.prompt);
    assert_ne!(generate_patch(&cfg, 18).unwrap().triplet, a.triplet);
    let other = ToyDataConfig { seed: 1, ..cfg };
    assert_ne!(generate_patch(&other, 17).unwrap().triplet, a.triplet);
}

#[test]
fn zero_nuclei_gives_background_only() {
    let cfg = ToyDataConfig {
        nuclei_per_patch: [0, 0],
        ..ToyDataConfig::default()
    };
    let p = generate_patch(&cfg, 3).unwrap();
    assert!(p.triplet.semantic.iter().all(|&c| c == 0));
    assert!(p.triplet.distance.iter().all(|&d| d == 1.0));
    assert_eq!(p.points.marker_count(), 0);
    check_patch(&cfg, &p).unwrap();
}

fn mean_colors(p: &Patch) -> Vec<([f64; 3], u8)> {
    let t = &p.triplet;
    instance_pixels(t.instance.as_ref().unwrap())
        .values()
        .map(|px| {
            let mut m = [0.0; 3];
            for &(y, x) in px {
                for (c, v) in m.iter_mut().enumerate() {
                    *v += t.image[(y, x, c)] as f64 / px.len() as f64;
                }
            }
            (m, t.semantic[px[0]])
        })
        .collect()
}

#[test]
fn nucleus_colors_separate_classes() {
    let cfg = ToyDataConfig::default();
    let patches = generate_patches(&cfg, 600).unwrap();
    let (train, test) = patches.split_at(300);
    let mut sums: BTreeMap<u8, ([f64; 3], usize)> = BTreeMap::new();
    for (m, c) in train.iter().flat_map(mean_colors) {
        let e = sums.entry(c).or_default();
        (0..3).for_each(|i| e.0[i] += m[i]);
        e.1 += 1;
    }
    let centroids: Vec<(u8, [f64; 3])> = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s.map(|v| v / n as f64)))
        .collect();
    assert_eq!(centroids.len(), cfg.class_palette.len());
    let (mut right, mut total) = (0, 0);
    for (m, c) in test.iter().flat_map(mean_colors) {
        let dist = |q: &[f64; 3]| (0..3).map(|i| (q[i] - m[i]).powi(2)).sum::<f64>();
        let guess = centroids
            .iter()
            .min_by(|a, b| dist(&a.1).total_cmp(&dist(&b.1)))
            .unwrap()
            .0;
        right += (guess == c) as usize;
        total += 1;
    }
    let acc = right as f64 / total as f64;
    assert!(acc > 0.9, "nearest-centroid accuracy {acc} over {total} nuclei");
}
