use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Relative tolerance for negative eigenvalues of a nominally PSD matrix.
pub const EIGEN_CLIP_TOL: f64 = 1e-6;

/// Sample mean and unbiased covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Numeric(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let dim = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::arg(format!(
                "feature length {} differs from {dim}",
                r.len()
            )));
        }
        let mut mean = DVector::zeros(dim);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Moments { mean, cov })
    }
}

/// Eigenvalues of a symmetric matrix with small negative values clipped to 0.
fn clipped_eigen(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{what} has a non-finite eigenvalue")));
        }
        if *v < -EIGEN_CLIP_TOL * scale {
            return Err(Error::Numeric(format!(
                "{what} is not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// ‖μ_a−μ_b‖² + tr(C_a + C_b − 2(C_a C_b)^{1/2}).
///
/// The trace of the product root is taken as tr((√C_a C_b √C_a)^{1/2}), which
/// is symmetric and shares its spectrum with C_a C_b.
pub fn frechet_distance(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let n = mu_a.len();
    if mu_b.len() != n || cov_a.shape() != (n, n) || cov_b.shape() != (n, n) {
        return Err(Error::arg(format!(
            "moment dimensions disagree: mu {}/{}, cov {:?}/{:?}",
            n,
            mu_b.len(),
            cov_a.shape(),
            cov_b.shape()
        )));
    }
    let ea = clipped_eigen(cov_a, "first covariance")?;
    clipped_eigen(cov_b, "second covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let tr_root: f64 = clipped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let diff = mu_a - mu_b;
    let d = diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    // Rounding can leave a tiny negative for coinciding moments.
    Ok(d.max(0.0))
}

pub fn frechet_of(a: &Moments, b: &Moments) -> Result<f64> {
    frechet_distance(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// Per-class pixel fractions of one label map; `num_classes` includes background.
pub fn class_fractions(labels: &Array2<u8>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &c in labels {
        let slot = counts
            .get_mut(c as usize)
            .ok_or_else(|| Error::Data(format!("label {c} outside 0..{num_classes}")))?;
        *slot += 1;
    }
    let total = labels.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// Fréchet distance between the class-fraction statistics of two label sets.
pub fn fsd(real: &[Array2<u8>], synth: &[Array2<u8>], num_classes: usize) -> Result<f64> {
    let stats = |set: &[Array2<u8>]| -> Result<Moments> {
        let rows = set
            .iter()
            .map(|l| class_fractions(l, num_classes))
            .collect::<Result<Vec<_>>>()?;
        Moments::from_rows(&rows)
    };
    frechet_of(&stats(real)?, &stats(synth)?)
}

/// Fixed-length features of an H×W×3 image in [−1, 1].
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn features(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>>;
}

/// Class probabilities of an H×W×3 image in [−1, 1].
pub trait ProbExtractor {
    fn num_classes(&self) -> usize;
    fn probabilities(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>>;
}

pub fn fid(extractor: &dyn FeatureExtractor, real: &[Array3<f32>], synth: &[Array3<f32>]) -> Result<f64> {
    let a = Moments::from_rows(&extractor.features(real)?)?;
    let b = Moments::from_rows(&extractor.features(synth)?)?;
    frechet_of(&a, &b)
}

/// exp of the mean KL divergence between per-image class distributions and their marginal.
pub fn inception_score(classifier: &dyn ProbExtractor, images: &[Array3<f32>]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::UndefinedMetric {
            metric: "is",
            reason: "no images".into(),
        });
    }
    let probs = classifier.probabilities(images)?;
    let k = classifier.num_classes();
    let mut marginal = vec![0.0; k];
    for p in &probs {
        if p.len() != k {
            return Err(Error::arg(format!("probability vector of length {} != {k}", p.len())));
        }
        for (m, v) in marginal.iter_mut().zip(p) {
            *m += v / probs.len() as f64;
        }
    }
    let mean_kl = probs
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .filter(|(&v, _)| v > 0.0)
                .map(|(&v, &m)| v * (v.ln() - m.ln()))
                .sum::<f64>()
        })
        .sum::<f64>()
        / probs.len() as f64;
    let score = mean_kl.exp();
    if !score.is_finite() {
        return Err(Error::Numeric("inception score is not finite".into()));
    }
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn hand_cases() {
        let mu = DVector::from_vec(vec![0.3, -1.0]);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_distance(&mu, &c, &mu, &c).unwrap().abs() < 1e-10);

        let z = DMatrix::zeros(2, 2);
        let mu_b = DVector::from_vec(vec![1.3, 1.0]);
        let d = frechet_distance(&mu, &z, &mu_b, &z).unwrap();
        assert!((d - 5.0).abs() < 1e-12);

        let d = frechet_distance(
            &DVector::from_vec(vec![0.0]),
            &scalar(1.0),
            &DVector::from_vec(vec![1.0]),
            &scalar(4.0),
        )
        .unwrap();
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let mu = DVector::zeros(1);
        assert!(matches!(
            frechet_distance(&mu, &scalar(-1.0), &mu, &scalar(1.0)),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn singleton_set_has_no_covariance() {
        let l = vec![Array2::<u8>::zeros((4, 4))];
        assert!(fsd(&l, &l, 2).is_err());
    }

    struct Constant;
    impl ProbExtractor for Constant {
        fn num_classes(&self) -> usize {
            3
        }
        fn probabilities(&self, images: &[Array3<f32>]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.2, 0.3, 0.5]; images.len()])
        }
    }

    #[test]
    fn constant_classifier_scores_one() {
        let imgs = vec![Array3::zeros((2, 2, 3)); 4];
        assert!((inception_score(&Constant, &imgs).unwrap() - 1.0).abs() < 1e-12);
    }
}
