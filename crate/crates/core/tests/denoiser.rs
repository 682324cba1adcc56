mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use cosynth::conditioning::{HashEmbedder, PointMap, TextCondition};
use cosynth::denoiser::{DenoiserConfig, JointDenoiser};
use cosynth::diffusion::{one_hot, randn, LossWeights, NoisyState};
use cosynth::schedules::BranchSchedules;
use cosynth::train::{smoothed_ends, BatchPlan, TrainConfig, Trainer};
use cosynth::Error;
use ndarray::Array2;
use rand::Rng;

fn state(rng: &mut rand_chacha::ChaCha8Rng, t: usize, k: usize, size: usize, dtype: DType) -> NoisyState {
    let labels = Tensor::from_vec(
        (0..size * size).map(|_| rng.random_range(0..k as u32)).collect::<Vec<_>>(),
        (1, size, size),
        &Device::Cpu,
    )
    .unwrap();
    NoisyState {
        t,
        image: randn(rng, &[1, 3, size, size], dtype, &Device::Cpu).unwrap(),
        distance: randn(rng, &[1, 1, size, size], dtype, &Device::Cpu).unwrap(),
        label: one_hot(&labels, k, dtype).unwrap(),
    }
}

#[test]
fn default_model_preserves_resolution() {
    let model = JointDenoiser::new(DenoiserConfig::default(), 0, DType::F32, &Device::Cpu).unwrap();
    let emb = HashEmbedder::new(512).unwrap();
    let tc = TextCondition::new(&emb, "high-quality histopathology colon tissue image").unwrap();
    let mut grid = Array2::zeros((32, 32));
    grid[(5, 7)] = 2;
    let s = state(&mut seeded(0), 500, 4, 32, DType::F32);
    let out = model.denoise(&s, &PointMap::new(grid), &tc, true).unwrap();
    assert_eq!(out.eps_image.dims(), [1, 3, 32, 32]);
    assert_eq!(out.eps_distance.dims(), [1, 1, 32, 32]);
    assert_eq!(out.label_logits.dims(), [1, 4, 32, 32]);
}

#[test]
fn dropped_text_ignores_the_prompt() {
    let model = JointDenoiser::new(tiny_model(4), 1, DType::F32, &Device::Cpu).unwrap();
    let emb = HashEmbedder::new(16).unwrap();
    let a = TextCondition::new(&emb, "colon tissue with lymphocyte").unwrap();
    let b = TextCondition::new(&emb, "kidney tissue with epithelial").unwrap();
    let pc = PointMap::empty(8, 8);
    let s = state(&mut seeded(1), 3, 4, 8, DType::F32);
    let bits = |tc: &TextCondition, present: bool| -> Vec<u32> {
        let o = model.denoise(&s, &pc, tc, present).unwrap();
        [o.eps_image, o.eps_distance, o.label_logits]
            .iter()
            .flat_map(|t| t.flatten_all().unwrap().to_vec1::<f32>().unwrap())
            .map(f32::to_bits)
            .collect()
    };
    assert_eq!(bits(&a, false), bits(&b, false));
    assert_ne!(bits(&a, true), bits(&b, true));
}

#[test]
fn outputs_are_finite_across_seeds() {
    let models: Vec<_> = (0..10)
        .map(|s| JointDenoiser::new(tiny_model(4), s, DType::F32, &Device::Cpu).unwrap())
        .collect();
    let emb = HashEmbedder::new(16).unwrap();
    for seed in 0..1000u64 {
        let mut rng = seeded(seed);
        let model = &models[seed as usize % models.len()];
        let ex = random_example(&mut rng, 8, 4, "breast tissue", 16);
        let tc = TextCondition::new(&emb, &format!("prompt {seed}")).unwrap();
        let t = rng.random_range(1..=1000);
        let s = state(&mut rng, t, 4, 8, DType::F32);
        model.denoise(&s, &ex.points, &tc, rng.random_bool(0.5)).unwrap();
    }
}

#[test]
fn mismatched_inputs_are_argument_errors() {
    let model = JointDenoiser::new(tiny_model(4), 0, DType::F32, &Device::Cpu).unwrap();
    let emb16 = HashEmbedder::new(16).unwrap();
    let emb8 = HashEmbedder::new(8).unwrap();
    let s = state(&mut seeded(2), 1, 4, 8, DType::F32);
    let tc = TextCondition::new(&emb16, "x").unwrap();
    assert!(matches!(
        model.denoise(&s, &PointMap::empty(4, 4), &tc, true),
        Err(Error::Argument(_))
    ));
    let short = TextCondition::new(&emb8, "x").unwrap();
    assert!(matches!(
        model.denoise(&s, &PointMap::empty(8, 8), &short, true),
        Err(Error::Argument(_))
    ));
    let mut grid = Array2::zeros((8, 8));
    grid[(0, 0)] = 4;
    assert!(matches!(
        model.denoise(&s, &PointMap::new(grid), &tc, true),
        Err(Error::Argument(_))
    ));
}

#[test]
fn point_features_are_deterministic() {
    let model = JointDenoiser::new(tiny_model(4), 0, DType::F32, &Device::Cpu).unwrap();
    let empty = PointMap::empty(8, 8);
    let a = model.encode_points(&[&empty]).unwrap();
    let b = model.encode_points(&[&empty]).unwrap();
    assert_eq!(to_vec_f64(&a), to_vec_f64(&b));
    let mut grid = Array2::zeros((8, 8));
    grid[(3, 3)] = 1;
    let c = model.encode_points(&[&PointMap::new(grid)]).unwrap();
    assert_eq!(c.dims(), a.dims());
    assert_ne!(to_vec_f64(&a), to_vec_f64(&c));
}

#[test]
fn zero_distance_weight_leaves_distance_head_untouched() {
    let model = JointDenoiser::new(tiny_model(4), 4, DType::F32, &Device::Cpu).unwrap();
    let cfg = TrainConfig {
        weights: LossWeights {
            distance: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let tr = Trainer::new(model, BranchSchedules::cosine(20, 0.008).unwrap(), cfg).unwrap();
    let data = examples(&small_data(), 4, 16);
    let plan = BatchPlan {
        indices: vec![0, 1, 2, 3],
        steps: vec![1, 5, 12, 20],
        text_present: vec![true, true, false, true],
    };
    let loss = tr.batch_loss(&data, &plan, &mut seeded(3)).unwrap();
    assert!(loss.distance > 0.0);
    let grads = loss.total.backward().unwrap();
    let mut seen = 0;
    for (name, var) in tr.model().params().vars() {
        if name.starts_with("head_distance") {
            seen += 1;
            if let Some(g) = grads.get(var.as_tensor()) {
                assert!(to_vec_f64(g).iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
    assert!(seen >= 1);
}

#[test]
fn hundred_steps_lower_the_loss() {
    let model = JointDenoiser::new(tiny_model(4), 0, DType::F32, &Device::Cpu).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        steps: 100,
        adam: cosynth::optim::AdamConfig {
            lr: 2e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut tr = Trainer::new(model, BranchSchedules::cosine(50, 0.008).unwrap(), cfg).unwrap();
    let data = examples(&small_data(), 32, 16);
    let recs = tr.run(&data, |_, _| Ok(())).unwrap();
    let (first, last) = smoothed_ends(&recs, 20).unwrap();
    assert!(last < first, "{first} -> {last}");
    // Least-squares slope over the whole run.
    let n = recs.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = recs.iter().map(|r| r.total).sum::<f64>() / n;
    let slope = recs
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64 - mx) * (r.total - my))
        .sum::<f64>();
    assert!(slope < 0.0);
}

#[test]
fn training_is_deterministic() {
    let data = examples(&small_data(), 8, 16);
    let run = || {
        let model = JointDenoiser::new(tiny_model(4), 0, DType::F32, &Device::Cpu).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            steps: 3,
            seed: 9,
            ..Default::default()
        };
        let mut tr = Trainer::new(model, BranchSchedules::cosine(20, 0.008).unwrap(), cfg).unwrap();
        tr.run(&data, |_, _| Ok(())).unwrap()
    };
    assert_eq!(run(), run());
}
