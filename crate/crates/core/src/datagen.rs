//! Synthetic multi-label data and its corruption into partial (candidate)
//! labels.
//!
//! Each class owns a random unit concept vector `w_j`. A sample draws a
//! latent `z ~ N(0, I)` and is positive for class `j` iff `w_j · z` exceeds
//! a per-class threshold. Since `w_j · z ~ N(0, 1)` exactly, the threshold is
//! a standard normal quantile of the class's target positive rate. Features
//! are `z` plus isotropic noise, so every class is linearly separable when
//! the noise is zero.
//!
//! Corruption flips every irrelevant label into a candidate independently
//! with probability `q`; relevant labels are always candidates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::io;
use crate::numeric::{LabelMatrix, Matrix, Rng};
use crate::{Error, Result};

// Stream labels for `Rng::derive`.
const STREAM_CONCEPTS: u64 = 0xC0;
const STREAM_SAMPLE: u64 = 0x5A;
const STREAM_CORRUPT: u64 = 0xF1;

const MAX_REDRAWS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub avg_positives: f64,
    #[serde(default)]
    pub class_frequency_skew: f64,
    #[serde(default)]
    pub concept_noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    /// The 20-class desk dataset used throughout the experiments:
    /// 2000 train / 1000 test samples, 32 features, 1.6 labels per sample.
    pub fn desk_standard(seed: u64) -> Self {
        DatasetSpec {
            n_train: 2000,
            n_test: 1000,
            n_features: 32,
            n_classes: 20,
            avg_positives: 1.6,
            class_frequency_skew: 0.0,
            concept_noise_std: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid("n_classes", format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.n_features < 1 {
            return Err(Error::invalid("n_features", "need at least one feature"));
        }
        if !(self.avg_positives >= 1.0 && self.avg_positives < self.n_classes as f64) {
            return Err(Error::invalid(
                "avg_positives",
                format!("must lie in [1, {}), got {}", self.n_classes, self.avg_positives),
            ));
        }
        if !(self.class_frequency_skew >= 0.0 && self.class_frequency_skew.is_finite()) {
            return Err(Error::invalid(
                "class_frequency_skew",
                format!("must be finite and >= 0, got {}", self.class_frequency_skew),
            ));
        }
        if !(self.concept_noise_std >= 0.0 && self.concept_noise_std.is_finite()) {
            return Err(Error::invalid(
                "concept_noise_std",
                format!("must be finite and >= 0, got {}", self.concept_noise_std),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelDataset {
    pub features: Matrix,
    pub true_labels: LabelMatrix,
}

impl MultiLabelDataset {
    pub fn new(features: Matrix, true_labels: LabelMatrix) -> Result<Self> {
        if features.rows() != true_labels.rows() {
            return Err(Error::DimensionMismatch {
                op: "dataset",
                left: features.shape(),
                right: true_labels.shape(),
            });
        }
        if let Some(i) = (0..true_labels.rows()).find(|&i| true_labels.row_sum(i) == 0) {
            return Err(Error::invalid(
                format!("true_labels row {i}"),
                "every sample needs at least one relevant label",
            ));
        }
        Ok(MultiLabelDataset {
            features,
            true_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.true_labels.cols()
    }
}

/// Training set with candidate labels `Ỹ ⊇ Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    pub base: MultiLabelDataset,
    pub candidates: LabelMatrix,
    pub flip_rate: f64,
}

impl PartialDataset {
    pub fn new(base: MultiLabelDataset, candidates: LabelMatrix, flip_rate: f64) -> Result<Self> {
        check_flip_rate(flip_rate)?;
        if candidates.shape() != base.true_labels.shape() {
            return Err(Error::DimensionMismatch {
                op: "candidates",
                left: candidates.shape(),
                right: base.true_labels.shape(),
            });
        }
        for i in 0..candidates.rows() {
            for j in 0..candidates.cols() {
                if base.true_labels.get(i, j) && !candidates.get(i, j) {
                    return Err(Error::invalid(
                        format!("candidates[{i}][{j}]"),
                        "relevant label is missing from the candidate set",
                    ));
                }
            }
        }
        Ok(PartialDataset {
            base,
            candidates,
            flip_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.base.features
    }

    pub fn true_labels(&self) -> &LabelMatrix {
        &self.base.true_labels
    }

    pub fn n_classes(&self) -> usize {
        self.base.n_classes()
    }
}

/// Output of [`generate`]: train and test splits drawn from the same concepts.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: MultiLabelDataset,
    pub test: MultiLabelDataset,
    pub concepts: Matrix,
    pub thresholds: Vec<f64>,
}

/// Target per-class positive rates: geometric decay from class 0 to class
/// K-1 with log-ratio `skew`, scaled so the mean number of positives per
/// sample, conditioned on at least one positive, equals `avg_positives`
/// when classes are treated as independent.
pub fn class_rates(spec: &DatasetSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let k = spec.n_classes;
    let profile: Vec<f64> = (0..k)
        .map(|j| (-spec.class_frequency_skew * j as f64 / (k - 1) as f64).exp())
        .collect();
    let conditional_mean = |c: f64| {
        let rates = profile.iter().map(|p| c * p);
        let sum: f64 = rates.clone().sum();
        let none: f64 = rates.map(|r| 1.0 - r).product();
        sum / (1.0 - none)
    };
    let target = spec.avg_positives;
    let (mut lo, mut hi) = (1e-9_f64, 1.0 - 1e-9);
    if conditional_mean(hi) < target {
        return Err(Error::Calibration(format!(
            "avg_positives {target} is out of reach for {k} classes with skew {}",
            spec.class_frequency_skew
        )));
    }
    if conditional_mean(lo) > target {
        return Err(Error::Calibration(format!(
            "avg_positives {target} is too close to 1 to calibrate"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if conditional_mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    if c < 1e-6 {
        return Err(Error::Calibration(format!(
            "avg_positives {target} needs a base rate of {c:e}"
        )));
    }
    Ok(profile.iter().map(|p| c * p).collect())
}

pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    let rates = class_rates(spec)?;
    let (d, k) = (spec.n_features, spec.n_classes);
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let thresholds: Vec<f64> = rates.iter().map(|&r| std_normal.inverse_cdf(1.0 - r)).collect();

    let mut concept_rng = Rng::derive(spec.seed, &[STREAM_CONCEPTS]);
    let mut concepts = Matrix::zeros(k, d);
    for j in 0..k {
        let row = concepts.row_mut(j);
        loop {
            for v in row.iter_mut() {
                *v = concept_rng.standard_normal();
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }

    let draw_split = |split: u64, n: usize| -> Result<MultiLabelDataset> {
        let mut features = Matrix::zeros(n, d);
        let mut labels = LabelMatrix::zeros(n, k);
        let mut z = vec![0.0; d];
        for i in 0..n {
            let mut rng = Rng::derive(spec.seed, &[STREAM_SAMPLE, split, i as u64]);
            let mut attempts = 0;
            let positives = loop {
                for v in z.iter_mut() {
                    *v = rng.standard_normal();
                }
                let pos: Vec<bool> = (0..k)
                    .map(|j| crate::numeric::dot(concepts.row(j), &z) > thresholds[j])
                    .collect();
                if pos.iter().any(|&b| b) {
                    break pos;
                }
                attempts += 1;
                if attempts >= MAX_REDRAWS {
                    return Err(Error::Calibration(format!(
                        "sample {i} drew no positive label in {MAX_REDRAWS} attempts"
                    )));
                }
            };
            for (j, &p) in positives.iter().enumerate() {
                labels.set(i, j, p);
            }
            let row = features.row_mut(i);
            for (x, &zv) in row.iter_mut().zip(&z) {
                *x = zv + spec.concept_noise_std * rng.standard_normal();
            }
        }
        MultiLabelDataset::new(features, labels)
    };

    Ok(GeneratedData {
        train: draw_split(0, spec.n_train)?,
        test: draw_split(1, spec.n_test)?,
        concepts,
        thresholds,
    })
}

fn check_flip_rate(q: f64) -> Result<()> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::invalid("q", format!("flip rate must lie in [0, 1), got {q}")));
    }
    Ok(())
}

/// Flips every irrelevant label into a candidate with probability `q`.
pub fn corrupt(dataset: &MultiLabelDataset, q: f64, seed: u64) -> Result<PartialDataset> {
    check_flip_rate(q)?;
    let y = &dataset.true_labels;
    let mut candidates = y.clone();
    for i in 0..y.rows() {
        let mut rng = Rng::derive(seed, &[STREAM_CORRUPT, i as u64]);
        for j in 0..y.cols() {
            // Draw for every entry so the stream position never depends on Y.
            let flip = rng.bernoulli(q);
            if !y.get(i, j) && flip {
                candidates.set(i, j, true);
            }
        }
    }
    PartialDataset::new(dataset.clone(), candidates, q)
}

/// Per class, the fraction of candidate labels that are not relevant.
pub fn noise_rate_per_class(data: &PartialDataset) -> Vec<f64> {
    let (y, c) = (data.true_labels(), &data.candidates);
    (0..c.cols())
        .map(|j| {
            let (mut cand, mut noisy) = (0usize, 0usize);
            for i in 0..c.rows() {
                if c.get(i, j) {
                    cand += 1;
                    if !y.get(i, j) {
                        noisy += 1;
                    }
                }
            }
            noisy as f64 / cand.max(1) as f64
        })
        .collect()
}

/// A complete experiment dataset: partial-label training split plus a
/// clean test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: PartialDataset,
    pub test: MultiLabelDataset,
    pub seed: u64,
    pub spec: Option<DatasetSpec>,
}

impl Dataset {
    /// `generate` followed by `corrupt`, both driven by `spec.seed`.
    pub fn synthesize(spec: &DatasetSpec, q: f64) -> Result<Self> {
        check_flip_rate(q)?;
        let data = generate(spec)?;
        let train = corrupt(&data.train, q, spec.seed)?;
        Ok(Dataset {
            train,
            test: data.test,
            seed: spec.seed,
            spec: Some(spec.clone()),
        })
    }

    pub fn n_features(&self) -> usize {
        self.train.base.n_features()
    }

    pub fn n_classes(&self) -> usize {
        self.train.n_classes()
    }

    pub fn to_json(&self) -> String {
        let file = DatasetFile {
            n: self.train.len(),
            d: self.n_features(),
            k: self.n_classes(),
            q: self.train.flip_rate,
            features: self.train.features().to_rows(),
            true_labels: self.train.true_labels().clone(),
            candidates: self.train.candidates.clone(),
            seed: self.seed,
            spec: self.spec.clone(),
            n_test: self.test.len(),
            test_features: self.test.features.to_rows(),
            test_labels: self.test.true_labels.clone(),
        };
        let mut s = serde_json::to_string(&file).expect("dataset serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let file: DatasetFile = io::parse_json(path, text)?;
        file.into_dataset().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(path, &io::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    n: usize,
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    q: f64,
    features: Vec<Vec<f64>>,
    true_labels: LabelMatrix,
    candidates: LabelMatrix,
    seed: u64,
    spec: Option<DatasetSpec>,
    n_test: usize,
    test_features: Vec<Vec<f64>>,
    test_labels: LabelMatrix,
}

impl DatasetFile {
    fn into_dataset(self) -> Result<Dataset> {
        let check = |field: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want || (got.0 == 0 && want.0 == 0) {
                Ok(())
            } else {
                Err(Error::invalid(
                    field,
                    format!("shape {}x{} does not match header {}x{}", got.0, got.1, want.0, want.1),
                ))
            }
        };
        let features = Matrix::from_rows(&self.features).map_err(|e| Error::invalid("features", e.to_string()))?;
        let test_features =
            Matrix::from_rows(&self.test_features).map_err(|e| Error::invalid("test_features", e.to_string()))?;
        check("features", features.shape(), (self.n, self.d))?;
        check("true_labels", self.true_labels.shape(), (self.n, self.k))?;
        check("candidates", self.candidates.shape(), (self.n, self.k))?;
        check("test_features", test_features.shape(), (self.n_test, self.d))?;
        check("test_labels", self.test_labels.shape(), (self.n_test, self.k))?;
        let base = MultiLabelDataset::new(features, self.true_labels)?;
        let train = PartialDataset::new(base, self.candidates, self.q)?;
        let test = MultiLabelDataset::new(test_features, self.test_labels)?;
        Ok(Dataset {
            train,
            test,
            seed: self.seed,
            spec: self.spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            n_train: 300,
            n_test: 100,
            n_features: 8,
            n_classes: 6,
            avg_positives: 1.5,
            class_frequency_skew: 0.0,
            concept_noise_std: 0.3,
            seed,
        }
    }

    fn mean_row_sum(m: &LabelMatrix) -> f64 {
        m.count_ones() as f64 / m.rows() as f64
    }

    #[test]
    fn coco_like_label_cardinality() {
        let spec = DatasetSpec {
            n_train: 4000,
            n_test: 0,
            n_features: 32,
            n_classes: 80,
            avg_positives: 2.9,
            class_frequency_skew: 0.0,
            concept_noise_std: 0.5,
            seed: 11,
        };
        let data = generate(&spec).unwrap();
        let mean = mean_row_sum(&data.train.true_labels);
        assert!((2.6..=3.2).contains(&mean), "mean positives {mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small_spec(5)).unwrap(), generate(&small_spec(5)).unwrap());
        assert_ne!(generate(&small_spec(5)).unwrap().train, generate(&small_spec(6)).unwrap().train);
    }

    #[test]
    fn every_row_has_a_positive() {
        let data = generate(&small_spec(1)).unwrap();
        for i in 0..data.train.len() {
            assert!(data.train.true_labels.row_sum(i) >= 1);
        }
    }

    #[test]
    fn skew_decays_class_frequency() {
        let spec = DatasetSpec {
            class_frequency_skew: 3.0,
            n_classes: 10,
            n_train: 5000,
            ..small_spec(3)
        };
        let rates = class_rates(&spec).unwrap();
        assert!(rates.windows(2).all(|w| w[0] > w[1]));
        assert!((rates[0] / rates[9] - 3.0_f64.exp()).abs() < 1e-9);
        let counts = generate(&spec).unwrap().train.true_labels.column_sums();
        assert!(counts[0] > 3 * counts[9], "{counts:?}");
    }

    #[test]
    fn rejects_unreachable_cardinality() {
        let spec = DatasetSpec {
            n_classes: 4,
            avg_positives: 3.99,
            class_frequency_skew: 5.0,
            ..small_spec(0)
        };
        assert!(matches!(generate(&spec), Err(Error::Calibration(_))));
        let bad = DatasetSpec {
            avg_positives: 6.0,
            ..small_spec(0)
        };
        assert!(matches!(generate(&bad), Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn zero_flip_rate_keeps_labels() {
        let data = generate(&small_spec(2)).unwrap();
        let p = corrupt(&data.train, 0.0, 9).unwrap();
        assert_eq!(p.candidates, data.train.true_labels);
        assert!(noise_rate_per_class(&p).iter().all(|&r| r == 0.0));
    }

    #[test]
    fn flip_rate_out_of_range_is_rejected() {
        let data = generate(&small_spec(2)).unwrap();
        for q in [-0.1, 1.0, 1.2, f64::NAN] {
            let err = corrupt(&data.train, q, 0).unwrap_err();
            assert!(err.to_string().contains("`q`"), "{err}");
        }
    }

    #[test]
    fn candidate_cardinality_matches_expectation() {
        let spec = DatasetSpec {
            n_train: 2000,
            n_test: 0,
            n_features: 16,
            n_classes: 20,
            avg_positives: 1.6,
            class_frequency_skew: 0.0,
            concept_noise_std: 0.5,
            seed: 4,
        };
        let data = generate(&spec).unwrap();
        let p = corrupt(&data.train, 0.4, 4).unwrap();
        let positives = mean_row_sum(&data.train.true_labels);
        let expected = positives + 0.4 * (20.0 - positives);
        let got = mean_row_sum(&p.candidates);
        assert!((got - expected).abs() < 0.5, "got {got}, expected {expected}");
        assert!((got - 9.0).abs() < 0.5, "got {got}");
    }

    #[test]
    fn flip_frequency_within_three_standard_errors() {
        let data = generate(&DatasetSpec {
            n_train: 1000,
            n_classes: 12,
            ..small_spec(8)
        })
        .unwrap();
        for (q, seed) in [(0.1, 1), (0.25, 2), (0.7, 3)] {
            let p = corrupt(&data.train, q, seed).unwrap();
            let y = &data.train.true_labels;
            let negatives = y.rows() * y.cols() - y.count_ones();
            let flips = p.candidates.count_ones() - y.count_ones();
            let freq = flips as f64 / negatives as f64;
            let se = (q * (1.0 - q) / negatives as f64).sqrt();
            assert!((freq - q).abs() < 3.0 * se, "q {q}: freq {freq}");
        }
    }

    #[test]
    fn noise_rate_direct_count() {
        let y = LabelMatrix::from_rows(&[[1u8, 0], [1, 1], [0, 1], [0, 1]]).unwrap();
        let c = LabelMatrix::from_rows(&[[1u8, 0], [1, 1], [1, 1], [1, 1]]).unwrap();
        let base = MultiLabelDataset::new(Matrix::zeros(4, 1), y).unwrap();
        let p = PartialDataset::new(base, c, 0.5).unwrap();
        assert_eq!(noise_rate_per_class(&p), vec![0.5, 0.0]);
    }

    #[test]
    fn rarer_classes_carry_more_noise() {
        // Averaged over seeds, noise rate should not decrease as the number of
        // relevant labels per class decreases.
        let k = 8;
        let mut acc = vec![0.0; k];
        let seeds = 0..10u64;
        let n_seeds = seeds.clone().count() as f64;
        for seed in seeds {
            let spec = DatasetSpec {
                n_train: 1000,
                n_test: 0,
                n_classes: k,
                class_frequency_skew: 2.5,
                ..small_spec(seed)
            };
            let data = generate(&spec).unwrap();
            let p = corrupt(&data.train, 0.2, seed).unwrap();
            let counts = data.train.true_labels.column_sums();
            let rates = noise_rate_per_class(&p);
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by_key(|&j| std::cmp::Reverse(counts[j]));
            for (rank, &j) in order.iter().enumerate() {
                acc[rank] += rates[j] / n_seeds;
            }
        }
        assert!(acc.windows(2).all(|w| w[0] <= w[1]), "{acc:?}");
    }

    #[test]
    fn file_round_trip() {
        let dataset = Dataset::synthesize(&small_spec(12), 0.3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        dataset.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), dataset);
    }

    #[test]
    fn load_rejects_missing_true_candidate() {
        let dataset = Dataset::synthesize(&small_spec(12), 0.0).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&dataset.to_json()).unwrap();
        let row = value["true_labels"][0].as_array().unwrap();
        let j = row.iter().position(|v| v == 1).unwrap();
        value["candidates"][0][j] = 0.into();
        let path = Path::new("bad.json");
        let err = Dataset::from_json(path, &value.to_string()).unwrap_err();
        assert!(err.to_string().contains(&format!("candidates[0][{j}]")), "{err}");
    }

    #[test]
    fn load_rejects_truncated_file() {
        let text = Dataset::synthesize(&small_spec(12), 0.2).unwrap().to_json();
        let err = Dataset::from_json(Path::new("t.json"), &text[..text.len() / 2]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dataset = Dataset::synthesize(&small_spec(12), 0.2).unwrap();
        let mut value: serde_json::Value = serde_json::from_str(&dataset.to_json()).unwrap();
        value["K"] = 7.into();
        let err = Dataset::from_json(Path::new("s.json"), &value.to_string()).unwrap_err();
        assert!(err.to_string().contains("true_labels"), "{err}");
    }
}
