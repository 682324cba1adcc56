use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use cosynth::conditioning::{make_prompt, HashEmbedder, TableEmbedder, TextCondition, TextEmbedder};
use cosynth::config::RunConfig;
use cosynth::denoiser::JointDenoiser;
use cosynth::diffusion::{sample_batch, trajectory_seeds, Guidance, TripletSample};
use cosynth::instancing::{watershed_separate, DistanceMap};
use cosynth::metrics::{
    aji, detection_scores, dice, fid, fsd, inception_score, mdice, ClassifierConfig,
    ImageClassifier, MetricsReport,
};
use cosynth::persistence::checkpoint::{load_checkpoint, read_checkpoint_manifest, save_trainer};
use cosynth::persistence::dataset::{write_sample, DatasetManifest, LoadedSample, Split};
use cosynth::persistence::{sha256_hex, write_atomic};
use cosynth::toydata::{generate_dataset, save_grid};
use cosynth::train::{Example, Trainer, LOSS_LOG_HEADER};
use ndarray::{concatenate, Array2, Axis};

use crate::{Cli, Command, Common};

/// Failure split by exit code: 1 for bad input, 2 for runtime errors.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<cosynth::Error> for Failure {
    fn from(e: cosynth::Error) -> Self {
        match e {
            cosynth::Error::Config(_) | cosynth::Error::Argument(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::GenData { common, out } => gen_data(&common, out, root),
        Command::Train {
            common,
            out,
            data,
            resume,
        } => train(&common, &out, data, resume, root),
        Command::Sample {
            common,
            checkpoint,
            conditions,
            split,
            omega,
            count,
            out,
        } => sample(&common, &checkpoint, &conditions, &split, omega, count, &out),
        Command::Separate { input, out } => separate(&input, &out),
        Command::Eval {
            pred,
            gt,
            metrics,
            out,
            seed,
        } => eval(&pred, &gt, &metrics, out, seed.unwrap_or(0)),
        Command::Prompt {
            tissue,
            cells,
            stain,
        } => {
            let cells: Vec<&str> = cells.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            println!("{}", make_prompt(&tissue, &cells, stain.as_deref())?);
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            cosynth::Error::Io { .. } => Failure::Usage(e.to_string()),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn embedder(cfg: &RunConfig) -> Result<Box<dyn TextEmbedder>> {
    Ok(match &cfg.text.table {
        Some(p) => {
            let t = TableEmbedder::load(p)?;
            if t.dim() != cfg.model.text_dim {
                return Err(Failure::Usage(format!(
                    "embedding table dimension {} differs from model.text_dim {}",
                    t.dim(),
                    cfg.model.text_dim
                )));
            }
            Box::new(t)
        }
        None => Box::new(HashEmbedder::new(cfg.text.embed_dim)?),
    })
}

/// Run manifest: the effective configuration plus the values that follow the reference setting.
fn run_manifest(cfg: &RunConfig, extra: serde_json::Value) -> Result<serde_json::Value> {
    let mut v = serde_json::json!({
        "config": cfg,
        "reference_settings": cfg.reference_settings(),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    Ok(v)
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    Ok(write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())?)
}

fn gen_data(common: &Common, out: Option<PathBuf>, root: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = out.unwrap_or_else(|| cfg.dataset_dir(root));
    let m = generate_dataset(&cfg.generator(), cfg.data.count, cfg.data.split, &dir)?;
    let manifest_path = dir.join(cosynth::persistence::dataset::DATASET_MANIFEST);
    let bytes = std::fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    println!(
        "wrote {} train and {} test samples to {} (manifest sha256 {})",
        m.count(Split::Train),
        m.count(Split::Test),
        dir.display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn load_examples(
    samples: Vec<LoadedSample>,
    emb: &dyn TextEmbedder,
) -> Result<Vec<Example>> {
    samples
        .into_iter()
        .map(|s| {
            let points = s
                .points
                .ok_or_else(|| Failure::Runtime(format!("sample {} has no point map", s.id)))?;
            Ok(Example {
                text: TextCondition::new(emb, &s.prompt)?,
                triplet: s.triplet,
                points,
            })
        })
        .collect()
}

fn check_classes(m: &DatasetManifest, cfg: &RunConfig, dir: &Path) -> Result<()> {
    if m.class_names.len() != cfg.model.num_classes {
        return Err(Failure::Usage(format!(
            "{}: dataset has {} classes, model.num_classes is {}",
            dir.display(),
            m.class_names.len(),
            cfg.model.num_classes
        )));
    }
    Ok(())
}

fn train(
    common: &Common,
    out: &Path,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    root: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let dir = data.unwrap_or_else(|| cfg.dataset_dir(root));
    let manifest = DatasetManifest::load(&dir)?;
    check_classes(&manifest, &cfg, &dir)?;
    let emb = embedder(&cfg)?;
    let examples = load_examples(manifest.load_split(&dir, Split::Train)?, emb.as_ref())?;
    if examples.is_empty() {
        return Err(Failure::Usage(format!("{}: train split is empty", dir.display())));
    }
    let schedules = cfg.diffusion.schedules()?;
    let mut trainer = match &resume {
        Some(ckpt) => load_checkpoint(ckpt, Some(&cfg.model))?.into_trainer(schedules, Some(cfg.train_config()))?,
        None => {
            let model = JointDenoiser::new(cfg.model.clone(), cfg.seed, DType::F32, &Device::Cpu)?;
            Trainer::new(model, schedules, cfg.train_config())?
        }
    };
    let (h, w) = examples[0].triplet.shape();
    trainer.model().check_size(h, w)?;

    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let run = run_manifest(
        &cfg,
        serde_json::json!({
            "dataset": dir,
            "dataset_config_digest": manifest.config_digest,
            "class_names": manifest.class_names,
            "label_legend": manifest.label_legend,
            "resumed_from": resume,
        }),
    )?;
    write_json(&out.join("run.json"), &run)?;

    let log_path = out.join("losses.csv");
    let mut log = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        std::fs::File::create(&log_path).and_then(|mut f| writeln!(f, "{LOSS_LOG_HEADER}").map(|_| f))
    }
    .map_err(|e| io_err(&log_path, e))?;

    let every = cfg.training.checkpoint_every;
    let ckpt_dir = out.join("checkpoints");
    log::info!(
        "training {} steps on {} examples from step {}",
        cfg.training.steps,
        examples.len(),
        trainer.step_count()
    );
    trainer
        .run(&examples, |t, r| {
            writeln!(log, "{}", r.csv_line()).map_err(|e| cosynth::Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
            if r.step % 50 == 0 {
                log::info!("step {} loss {:.5}", r.step, r.total);
            }
            if every > 0 && r.step % every == 0 {
                save_trainer(&ckpt_dir.join(format!("step-{:06}", r.step)), t, Some(run.clone()))?;
            }
            Ok(())
        })
        .map_err(Failure::from)?;
    save_trainer(&ckpt_dir.join("final"), &trainer, Some(run))?;
    println!("trained to step {}; checkpoint at {}", trainer.step_count(), ckpt_dir.join("final").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    common: &Common,
    checkpoint: &Path,
    conditions: &Path,
    split: &str,
    omega: Option<f64>,
    count: Option<usize>,
    out: &Path,
) -> Result<()> {
    let split: Split = split.parse()?;
    let stored = read_checkpoint_manifest(checkpoint)?;
    let mut cfg = match (&common.config, stored.run.as_ref().and_then(|r| r.get("config"))) {
        (Some(_), _) => load_config(common)?,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .map_err(|e| Failure::Usage(format!("{}: stored run config: {e}", checkpoint.display())))?,
        (None, None) => RunConfig {
            model: stored.model.clone(),
            ..RunConfig::default()
        },
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = omega {
        cfg.sampling.omega = o;
    }
    cfg.validate()?;
    let guidance: Guidance = cfg.sampling.guidance();
    let loaded = load_checkpoint(checkpoint, Some(&cfg.model))?;
    let schedules = cfg.diffusion.schedules()?;

    let cond = DatasetManifest::load(conditions)?;
    check_classes(&cond, &cfg, conditions)?;
    let mut samples = cond.load_split(conditions, split)?;
    if let Some(n) = count {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: no {} samples to condition on",
            conditions.display(),
            split.as_str()
        )));
    }
    let emb = embedder(&cfg)?;
    let ids: Vec<(String, String, String)> =
        samples.iter().map(|s| (s.id.clone(), s.prompt.clone(), s.tissue.clone())).collect();
    let examples = load_examples(samples, emb.as_ref())?;
    let seeds = trajectory_seeds(cfg.seed, examples.len());

    let mut outputs: Vec<TripletSample> = Vec::with_capacity(examples.len());
    for (chunk, seeds) in examples.chunks(cfg.sampling.batch_size).zip(seeds.chunks(cfg.sampling.batch_size)) {
        let pcs: Vec<_> = chunk.iter().map(|e| &e.points).collect();
        let tcs: Vec<_> = chunk.iter().map(|e| &e.text).collect();
        outputs.extend(sample_batch(&loaded.model, &pcs, &tcs, guidance, &schedules, seeds)?);
        log::info!("sampled {}/{}", outputs.len(), examples.len());
    }

    let run = run_manifest(
        &cfg,
        serde_json::json!({
            "checkpoint": checkpoint,
            "checkpoint_step": loaded.step(),
            "conditions": conditions,
            "split": split,
            "guidance": guidance,
        }),
    )?;
    let digest = sha256_hex(serde_json::to_string(&run)?.as_bytes());
    let mut m = DatasetManifest::new(cond.class_names.clone(), cond.label_legend.clone(), digest);
    m.seed = Some(cfg.seed);
    for (((id, prompt, tissue), t), e) in ids.iter().zip(&outputs).zip(&examples) {
        m.samples
            .push(write_sample(out, &format!("{}/{id}", split.as_str()), id, split, t, Some(&e.points), prompt, tissue)?);
    }
    let shown: Vec<&TripletSample> = outputs.iter().take(16).collect();
    save_grid(&shown, &out.join("grid.png"))?;
    write_json(&out.join("run.json"), &run)?;
    m.save(out)?;
    println!("wrote {} samples to {}", outputs.len(), out.display());
    Ok(())
}

fn separate(input: &Path, out: &Path) -> Result<()> {
    let m = DatasetManifest::load(input)?;
    let mut result = DatasetManifest::new(m.class_names.clone(), m.label_legend.clone(), m.config_digest.clone());
    result.generator = m.generator.clone();
    result.seed = m.seed;
    let mut loaded = Vec::new();
    for e in &m.samples {
        loaded.push(cosynth::persistence::dataset::load_entry(input, e, m.class_names.len())?);
    }
    for s in loaded {
        let points = s
            .points
            .as_ref()
            .ok_or_else(|| Failure::Runtime(format!("sample {} has no point map", s.id)))?;
        let inst = watershed_separate(&DistanceMap(s.triplet.distance.clone()), &s.triplet.semantic, points)?;
        let triplet = TripletSample {
            instance: Some(inst),
            ..s.triplet
        };
        result.samples.push(write_sample(
            out,
            &format!("{}/{}", s.split.as_str(), s.id),
            &s.id,
            s.split,
            &triplet,
            Some(points),
            &s.prompt,
            &s.tissue,
        )?);
    }
    result.save(out)?;
    println!("separated {} samples into {}", result.samples.len(), out.display());
    Ok(())
}

const METRICS: [&str; 7] = ["dice", "mdice", "aji", "detection", "fsd", "fid", "is"];

/// Places maps side by side, offsetting instance ids so they stay distinct.
fn mosaic(maps: &[(&Array2<u32>, &Array2<u8>)]) -> (Array2<u32>, Array2<u8>) {
    let mut offset = 0;
    let mut inst = Vec::new();
    for (i, _) in maps {
        inst.push(i.mapv(|v| if v == 0 { 0 } else { v + offset }));
        offset += i.iter().copied().max().unwrap_or(0);
    }
    let iv: Vec<_> = inst.iter().map(|a| a.view()).collect();
    let cv: Vec<_> = maps.iter().map(|(_, c)| c.view()).collect();
    (
        concatenate(Axis(1), &iv).expect("equal heights"),
        concatenate(Axis(1), &cv).expect("equal heights"),
    )
}

fn mean_defined(values: impl Iterator<Item = cosynth::Result<f64>>) -> cosynth::Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut reason = None;
    for v in values {
        match v {
            Ok(x) => {
                sum += x;
                n += 1;
            }
            Err(cosynth::Error::UndefinedMetric { metric, reason: r }) => reason = Some((metric, r)),
            Err(e) => return Err(e),
        }
    }
    match (n, reason) {
        (0, Some((metric, reason))) => Err(cosynth::Error::UndefinedMetric { metric, reason }),
        (0, None) => Err(cosynth::Error::UndefinedMetric {
            metric: "mean",
            reason: "no samples".into(),
        }),
        _ => Ok(sum / n as f64),
    }
}

fn eval(pred: &Path, gt: &Path, metrics: &str, out: Option<PathBuf>, seed: u64) -> Result<()> {
    let wanted: Vec<&str> = metrics.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if let Some(bad) = wanted.iter().find(|m| !METRICS.contains(m)) {
        return Err(Failure::Usage(format!(
            "unknown metric {bad:?}; choose from {}",
            METRICS.join(",")
        )));
    }
    let gm = DatasetManifest::load(gt)?;
    let pm = DatasetManifest::load(pred)?;
    if gm.class_names != pm.class_names {
        return Err(Failure::Usage("prediction and ground truth use different classes".into()));
    }
    let k = gm.class_names.len();
    let by_id: BTreeMap<&str, _> = pm.samples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut pairs = Vec::new();
    for g in &gm.samples {
        let p = by_id.get(g.id.as_str()).ok_or_else(|| {
            Failure::Runtime(format!("{}: no prediction for sample {}", pred.display(), g.id))
        })?;
        let ps = cosynth::persistence::dataset::load_entry(pred, p, k)?;
        let gs = cosynth::persistence::dataset::load_entry(gt, g, k)?;
        if ps.triplet.shape() != gs.triplet.shape() {
            return Err(Failure::Runtime(format!("sample {}: prediction and ground truth sizes differ", g.id)));
        }
        pairs.push((ps.triplet, gs.triplet, gs.tissue));
    }

    let gt_bytes = std::fs::read(gt.join("manifest.json")).map_err(|e| io_err(gt, e))?;
    let pred_bytes = std::fs::read(pred.join("manifest.json")).map_err(|e| io_err(pred, e))?;
    let digest = sha256_hex(&[wanted.join(",").as_bytes(), &gt_bytes, &pred_bytes].concat());
    let mut report = MetricsReport::new(gm.class_names[1..].to_vec(), digest);
    report.num_pred = pairs.len();
    report.num_gt = pairs.len();

    let instances = |t: &TripletSample, which: &str| -> Result<Array2<u32>> {
        t.instance.clone().ok_or_else(|| {
            Failure::Usage(format!("{which} samples carry no instance maps; run `cosynth separate` first"))
        })
    };
    for name in &wanted {
        match *name {
            "dice" => report.record("dice", mean_defined(pairs.iter().map(|(p, g, _)| dice(&p.semantic, &g.semantic))))?,
            "mdice" | "aji" => {
                let f = if *name == "mdice" { mdice } else { aji };
                let mut vals = Vec::new();
                for (p, g, _) in &pairs {
                    vals.push(f(&instances(p, "predicted")?, &instances(g, "ground-truth")?));
                }
                report.record(name, mean_defined(vals.into_iter()))?;
            }
            "detection" => {
                let mut pi = Vec::new();
                let mut gi = Vec::new();
                for (p, g, _) in &pairs {
                    pi.push(instances(p, "predicted")?);
                    gi.push(instances(g, "ground-truth")?);
                }
                let pv: Vec<_> = pi.iter().zip(&pairs).map(|(i, (p, _, _))| (i, &p.semantic)).collect();
                let gv: Vec<_> = gi.iter().zip(&pairs).map(|(i, (_, g, _))| (i, &g.semantic)).collect();
                let (pinst, pcls) = mosaic(&pv);
                let (ginst, gcls) = mosaic(&gv);
                report.insert_detection(&detection_scores(&pinst, &pcls, &ginst, &gcls, k - 1)?)?;
            }
            "fsd" => {
                let real: Vec<_> = pairs.iter().map(|(_, g, _)| g.semantic.clone()).collect();
                let synth: Vec<_> = pairs.iter().map(|(p, _, _)| p.semantic.clone()).collect();
                report.record("fsd", fsd(&real, &synth, k))?;
            }
            "fid" | "is" => {
                let tissues: Vec<&str> = {
                    let mut t: Vec<&str> = pairs.iter().map(|(_, _, t)| t.as_str()).collect();
                    t.sort_unstable();
                    t.dedup();
                    t
                };
                if tissues.len() < 2 {
                    report.mark_undefined(*name, "classifier needs at least two tissues in the ground truth");
                    continue;
                }
                let real: Vec<_> = pairs.iter().map(|(_, g, _)| g.image.clone()).collect();
                let labels: Vec<usize> = pairs
                    .iter()
                    .map(|(_, _, t)| tissues.binary_search(&t.as_str()).expect("listed"))
                    .collect();
                let clf = ImageClassifier::fit(
                    &real,
                    &labels,
                    tissues.len(),
                    ClassifierConfig {
                        seed,
                        ..Default::default()
                    },
                )?;
                let synth: Vec<_> = pairs.iter().map(|(p, _, _)| p.image.clone()).collect();
                if *name == "fid" {
                    report.record("fid", fid(&clf, &real, &synth))?;
                } else {
                    report.record("is", inception_score(&clf, &synth))?;
                }
            }
            _ => unreachable!("validated above"),
        }
    }

    let dir = out.unwrap_or_else(|| pred.to_path_buf());
    let text = report.to_text();
    write_atomic(&dir.join("metrics.txt"), text.as_bytes())?;
    write_atomic(&dir.join("metrics.json"), report.to_json()?.as_bytes())?;
    print!("{text}");
    Ok(())
}
