//! Segmentation, detection and distributional evaluation metrics.

mod adherence;
mod classifier;
mod detection;
mod frechet;
mod segmentation;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adherence::{marker_adherence, marker_hits};
pub use classifier::{ClassifierConfig, ImageClassifier};
pub use detection::{detection_scores, instance_classes, DetectionScores, MATCH_IOU};
pub use frechet::{
    class_fractions, fid, frechet_distance, frechet_of, fsd, inception_score, FeatureExtractor,
    Moments, ProbExtractor, EIGEN_CLIP_TOL,
};
pub use segmentation::{aji, dice, mdice};

/// Named metric values plus the context needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub values: BTreeMap<String, f64>,
    /// Metrics requested but undefined for these inputs, with the reason.
    pub undefined: BTreeMap<String, String>,
    pub class_names: Vec<String>,
    pub num_pred: usize,
    pub num_gt: usize,
    pub matching: String,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn new(class_names: Vec<String>, config_digest: impl Into<String>) -> Self {
        MetricsReport {
            values: BTreeMap::new(),
            undefined: BTreeMap::new(),
            class_names,
            num_pred: 0,
            num_gt: 0,
            matching: format!("one-to-one greedy, IoU > {MATCH_IOU}"),
            config_digest: config_digest.into(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, value: f64) -> Result<()> {
        let key = key.into();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {key} is not finite: {value}")));
        }
        self.undefined.remove(&key);
        self.values.insert(key, value);
        Ok(())
    }

    pub fn mark_undefined(&mut self, key: impl Into<String>, reason: impl Into<String>) {
        let key = key.into();
        self.values.remove(&key);
        self.undefined.insert(key, reason.into());
    }

    /// Stores a result, routing undefined-metric errors to `undefined`.
    pub fn record(&mut self, key: &str, value: Result<f64>) -> Result<()> {
        match value {
            Ok(v) => self.insert(key, v),
            Err(Error::UndefinedMetric { reason, .. }) => {
                self.mark_undefined(key, reason);
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    pub fn insert_detection(&mut self, s: &DetectionScores) -> Result<()> {
        if s.per_class_f.len() != self.class_names.len() {
            return Err(Error::arg(format!(
                "{} per-class scores for {} configured classes",
                s.per_class_f.len(),
                self.class_names.len()
            )));
        }
        self.insert("f_d", s.f_d)?;
        match s.acc {
            Some(a) => self.insert("acc", a)?,
            None => self.mark_undefined("acc", "no matched instances"),
        }
        for (name, f) in self.class_names.clone().iter().zip(&s.per_class_f) {
            let key = format!("f_{name}");
            match f {
                Some(v) => self.insert(key, *v)?,
                None => self.mark_undefined(key, "class absent from prediction and ground truth"),
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    /// `key = value` lines, undefined metrics as `key = undefined (reason)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v:.6}");
        }
        for (k, r) in &self.undefined {
            let _ = writeln!(out, "{k} = undefined ({r})");
        }
        let _ = writeln!(out, "num_pred = {}", self.num_pred);
        let _ = writeln!(out, "num_gt = {}", self.num_gt);
        let _ = writeln!(out, "matching = {}", self.matching);
        let _ = writeln!(out, "config_digest = {}", self.config_digest);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// sha256 of the JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::persistence::sha256_hex(self.to_json()?.as_bytes()))
    }
}
