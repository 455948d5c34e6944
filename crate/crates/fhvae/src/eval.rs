//! Evaluation: linear probes over derived features, the domain-invariance
//! report, and the s-vector spread diagnostic.
//!
//! The probe is multinomial logistic regression trained by full-batch
//! gradient descent with an L2 penalty of 1e-3, a step size set from a
//! power-iteration Lipschitz estimate, and a fixed stopping rule (gradient
//! sup-norm below 1e-6 or 2000 iterations). Features are standardized
//! internally with training-set statistics, so callers never need to.

use crate::config::{ExtractionMode, ModelMode, SeqLabel};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::extract::{extract_features, svector_for_utterance};
use crate::model::{ModelParams, SVectorTable};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

const PROBE_PENALTY: f64 = 1e-3;
const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 2000;

/// Labeled feature vectors for one probe split.
#[derive(Debug, Clone)]
pub struct ProbeDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl ProbeDataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InputContract("empty probe dataset".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::InputContract(format!(
                "{} feature rows with {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputContract("non-finite probe features".into()));
        }
        Ok(ProbeDataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Per-dimension standardization fit on the training split; constant
/// dimensions are dropped (scale zero) rather than blown up.
struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let var = x
            .outer_iter()
            .fold(Array1::zeros(x.ncols()), |acc: Array1<f64>, row| {
                acc + (&row - &mean).mapv(|d| d * d)
            })
            / n;
        let scale = var.mapv(|v| if v.sqrt() > 1e-8 { 1.0 / v.sqrt() } else { 0.0 });
        Standardizer { mean, scale }
    }

    /// Standardize and append a bias column of ones.
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let (n, d) = (x.nrows(), x.ncols());
        let mut out = Array2::ones((n, d + 1));
        for r in 0..n {
            for c in 0..d {
                out[(r, c)] = (x[(r, c)] - self.mean[c]) * self.scale[c];
            }
        }
        out
    }
}

/// Largest eigenvalue of `X^T X / n` by power iteration (deterministic
/// ones-vector start; the matrix is PSD so this converges from any start
/// not orthogonal to the top eigenvector).
fn top_eigenvalue(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let a = x.t().dot(x) / n;
    let mut v = Array1::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let av = a.dot(&v);
        let norm = av.dot(&av).sqrt();
        if norm < 1e-12 {
            return 0.0;
        }
        v = av / norm;
        lambda = v.dot(&a.dot(&v));
    }
    lambda
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

/// Trained probe: standardizer plus weights (bias row last).
struct Probe {
    standardizer: Standardizer,
    weights: Array2<f64>,
    n_classes: usize,
}

impl Probe {
    fn fit(train: &ProbeDataset, n_classes: usize, seed: u64) -> Result<Self> {
        let distinct: std::collections::HashSet<usize> = train.labels.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::InputContract(format!(
                "probe training needs >= 2 classes, got {}",
                distinct.len()
            )));
        }
        let standardizer = Standardizer::fit(&train.features);
        let x = standardizer.apply(&train.features);
        let n = x.nrows() as f64;
        let d_aug = x.ncols();

        // One-hot targets.
        let mut y = Array2::zeros((x.nrows(), n_classes));
        for (r, &c) in train.labels.iter().enumerate() {
            y[(r, c)] = 1.0;
        }

        // Step size from a Lipschitz bound of the penalized objective.
        let lipschitz = 0.5 * top_eigenvalue(&x) + 2.0 * PROBE_PENALTY;
        let lr = 1.0 / lipschitz.max(1e-8);

        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut w = Array2::from_shape_fn((d_aug, n_classes), |_| rng.random_range(-0.01..0.01));
        for _ in 0..PROBE_MAX_ITERS {
            let p = softmax_rows(&x.dot(&w));
            let mut grad = x.t().dot(&(&p - &y)) / n;
            // Penalty excludes the bias row (the last one).
            for r in 0..d_aug - 1 {
                for c in 0..n_classes {
                    grad[(r, c)] += 2.0 * PROBE_PENALTY * w[(r, c)];
                }
            }
            let sup = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            if sup < PROBE_TOL {
                break;
            }
            w = w - grad * lr;
        }
        Ok(Probe {
            standardizer,
            weights: w,
            n_classes,
        })
    }

    fn accuracy(&self, test: &ProbeDataset) -> f64 {
        let x = self.standardizer.apply(&test.features);
        let logits = x.dot(&self.weights);
        let mut correct = 0usize;
        for (r, &label) in test.labels.iter().enumerate() {
            let row = logits.row(r);
            let mut best = 0usize;
            for c in 1..self.n_classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }
}

/// Train a linear probe on `train` and return its accuracy on `test` in
/// [0, 1]. Standardization is internal (training statistics).
pub fn probe_accuracy(train: &ProbeDataset, test: &ProbeDataset, seed: u64) -> Result<f64> {
    if test.dim() != train.dim() {
        return Err(Error::InputContract(format!(
            "test dim {} does not match train dim {}",
            test.dim(),
            train.dim()
        )));
    }
    let n_classes = train
        .labels
        .iter()
        .chain(test.labels.iter())
        .copied()
        .max()
        .expect("nonempty")
        + 1;
    let probe = Probe::fit(train, n_classes, seed)?;
    Ok(probe.accuracy(test))
}

/// Which feature family a report row evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFeature {
    /// The input frames themselves.
    Raw,
    Latent(ExtractionMode),
}

impl std::fmt::Display for ReportFeature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReportFeature::Raw => write!(f, "raw"),
            ReportFeature::Latent(m) => write!(f, "{}", m.tag()),
        }
    }
}

/// Trained models available to the report; rows that need a missing model
/// are an input-contract error.
pub struct ReportModels<'a> {
    pub fhvae: Option<(&'a ModelParams, &'a SVectorTable, SeqLabel)>,
    pub vae: Option<&'a ModelParams>,
}

/// One feature family's probe errors (percent) under both test conditions.
#[derive(Debug, Clone, Serialize)]
pub struct ReportCell {
    pub feature: String,
    pub clean_error: f64,
    pub shifted_error: f64,
    pub average_error: f64,
}

/// Frame-level segment-class probe errors across test conditions, one row
/// per requested feature family.
#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub cells: Vec<ReportCell>,
}

impl InvarianceReport {
    /// Aligned-column rendering for terminals and logs.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<8} {:>12} {:>14} {:>14}\n",
            "feature", "clean err %", "shifted err %", "average err %"
        ));
        for c in &self.cells {
            out.push_str(&format!(
                "{:<8} {:>12.2} {:>14.2} {:>14.2}\n",
                c.feature, c.clean_error, c.shifted_error, c.average_error
            ));
        }
        out
    }

    /// Machine-readable rendering.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn cell(&self, feature: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.feature == feature)
    }
}

/// Per-frame probe data for one dataset under one feature family. Labels
/// are the per-frame segment classes, which every probe dataset must carry.
fn frame_probe_data(
    ds: &Dataset,
    feature: ReportFeature,
    models: &ReportModels<'_>,
) -> Result<ProbeDataset> {
    let per_utt: Vec<(Array2<f64>, &[u32])> = ds
        .utterances()
        .par_iter()
        .map(|utt| {
            let classes = utt.labels.segment_classes.as_deref().ok_or_else(|| {
                Error::Data(format!(
                    "utterance '{}' has no per-frame segment classes",
                    utt.utt_id
                ))
            })?;
            let feats = match feature {
                ReportFeature::Raw => utt.frames.clone(),
                ReportFeature::Latent(mode) => match mode.requires_mode() {
                    ModelMode::Fhvae => {
                        let (params, table, seq_label) = models.fhvae.ok_or_else(|| {
                            Error::InputContract(format!(
                                "feature '{mode}' needs a factorized checkpoint"
                            ))
                        })?;
                        let svec = if mode == ExtractionMode::Z1Mu2 {
                            Some(svector_for_utterance(utt, params, table, seq_label)?)
                        } else {
                            None
                        };
                        extract_features(&utt.frames, params, mode, svec.as_ref())?
                    }
                    ModelMode::Vae => {
                        let params = models.vae.ok_or_else(|| {
                            Error::InputContract(format!(
                                "feature '{mode}' needs a baseline checkpoint"
                            ))
                        })?;
                        extract_features(&utt.frames, params, mode, None)?
                    }
                },
            };
            Ok((feats, classes))
        })
        .collect::<Result<Vec<_>>>()?;

    let total: usize = per_utt.iter().map(|(f, _)| f.nrows()).sum();
    let dim = per_utt[0].0.ncols();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut r = 0;
    for (feats, classes) in &per_utt {
        features
            .slice_mut(ndarray::s![r..r + feats.nrows(), ..])
            .assign(feats);
        labels.extend(classes.iter().map(|&c| c as usize));
        r += feats.nrows();
    }
    ProbeDataset::new(features, labels)
}

/// For each requested feature family: train a frame-level segment-class
/// probe on the clean training set and report its error (percent) on the
/// clean test set, the shifted test set, and their average.
pub fn invariance_report(
    models: &ReportModels<'_>,
    train: &Dataset,
    test_clean: &Dataset,
    test_shifted: &Dataset,
    features: &[ReportFeature],
    seed: u64,
) -> Result<InvarianceReport> {
    if features.is_empty() {
        return Err(Error::InputContract("no report features requested".into()));
    }
    let cells = features
        .par_iter()
        .map(|&feature| {
            let tr = frame_probe_data(train, feature, models)?;
            let cl = frame_probe_data(test_clean, feature, models)?;
            let sh = frame_probe_data(test_shifted, feature, models)?;
            let acc_clean = probe_accuracy(&tr, &cl, seed)?;
            let acc_shift = probe_accuracy(&tr, &sh, seed)?;
            let clean_error = 100.0 * (1.0 - acc_clean);
            let shifted_error = 100.0 * (1.0 - acc_shift);
            Ok(ReportCell {
                feature: feature.to_string(),
                clean_error,
                shifted_error,
                average_error: 0.5 * (clean_error + shifted_error),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InvarianceReport { cells })
}

/// Mean squared distance of table rows from their centroid. Zero means the
/// table has collapsed to a single point (no sequence separation).
pub fn svector_spread(table: &SVectorTable) -> Result<f64> {
    let m = table.num_sequences();
    if m == 0 {
        return Err(Error::InputContract("empty s-vector table".into()));
    }
    let centroid = table
        .entries()
        .mean_axis(Axis(0))
        .expect("nonempty table");
    let spread = table
        .entries()
        .outer_iter()
        .map(|row| (&row - &centroid).mapv(|d| d * d).sum())
        .sum::<f64>()
        / m as f64;
    Ok(spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array};

    fn blob_dataset(
        centers: &[(f64, usize)],
        n_per: usize,
        dim: usize,
        sigma: f64,
        seed: u64,
    ) -> ProbeDataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = centers.len() * n_per;
        let mut x = Array2::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        let mut r = 0;
        for &(center, label) in centers {
            for _ in 0..n_per {
                for c in 0..dim {
                    x[(r, c)] = center + sigma * rng.random_range(-1.0..1.0);
                }
                y.push(label);
                r += 1;
            }
        }
        ProbeDataset::new(x, y).unwrap()
    }

    #[test]
    fn separable_blobs_reach_perfect_accuracy() {
        let train = blob_dataset(&[(-3.0, 0), (3.0, 1)], 100, 5, 0.3, 1);
        let test = blob_dataset(&[(-3.0, 0), (3.0, 1)], 50, 5, 0.3, 2);
        let acc = probe_accuracy(&train, &test, 7).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        // Features carry no class information at all: labels are assigned
        // round-robin over identically distributed rows.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 800;
        let x = Array::from_shape_fn((n, 6), |_| rng.random_range(-1.0..1.0f64));
        let y: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let train = ProbeDataset::new(x.slice(ndarray::s![..400, ..]).to_owned(), y[..400].to_vec())
            .unwrap();
        let test = ProbeDataset::new(x.slice(ndarray::s![400.., ..]).to_owned(), y[400..].to_vec())
            .unwrap();
        let acc = probe_accuracy(&train, &test, 11).unwrap();
        // Three binomial standard errors around chance for 400 test points.
        let sigma = (0.25 * 0.75 / 400.0f64).sqrt();
        assert!(
            (acc - 0.25).abs() <= 3.0 * sigma,
            "accuracy {acc} outside 0.25 +/- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn external_standardization_changes_little() {
        // Scale one dimension by 1000 and shift another; internal
        // standardization must make the probe nearly indifferent.
        let train = blob_dataset(&[(-1.0, 0), (1.0, 1)], 150, 4, 0.8, 5);
        let test = blob_dataset(&[(-1.0, 0), (1.0, 1)], 100, 4, 0.8, 6);
        let distort = |p: &ProbeDataset| {
            let mut x = p.features.clone();
            for r in 0..x.nrows() {
                x[(r, 0)] *= 1000.0;
                x[(r, 2)] += 50.0;
            }
            ProbeDataset::new(x, p.labels.clone()).unwrap()
        };
        let acc_raw = probe_accuracy(&train, &test, 13).unwrap();
        let acc_distorted = probe_accuracy(&distort(&train), &distort(&test), 13).unwrap();
        assert!(
            (acc_raw - acc_distorted).abs() < 0.02,
            "{acc_raw} vs {acc_distorted}"
        );
    }

    #[test]
    fn single_class_training_is_rejected() {
        let train = blob_dataset(&[(0.0, 0)], 50, 3, 0.5, 8);
        let test = blob_dataset(&[(0.0, 0)], 10, 3, 0.5, 9);
        assert!(probe_accuracy(&train, &test, 1).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let train = blob_dataset(&[(-1.0, 0), (1.0, 1)], 20, 3, 0.5, 10);
        let test = blob_dataset(&[(-1.0, 0), (1.0, 1)], 10, 4, 0.5, 11);
        assert!(probe_accuracy(&train, &test, 1).is_err());
    }

    #[test]
    fn probe_is_deterministic() {
        let train = blob_dataset(&[(-0.5, 0), (0.5, 1)], 120, 4, 1.5, 12);
        let test = blob_dataset(&[(-0.5, 0), (0.5, 1)], 80, 4, 1.5, 13);
        let a = probe_accuracy(&train, &test, 21).unwrap();
        let b = probe_accuracy(&train, &test, 21).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn spread_examples() {
        let t = SVectorTable::from_entries(
            vec!["a".into(), "b".into()],
            arr2(&[[2.5], [2.5]]),
        )
        .unwrap();
        assert_eq!(svector_spread(&t).unwrap(), 0.0);

        let t = SVectorTable::from_entries(
            vec!["a".into(), "b".into()],
            arr2(&[[-1.0], [1.0]]),
        )
        .unwrap();
        assert_eq!(svector_spread(&t).unwrap(), 1.0);

        let t = SVectorTable::from_entries(
            vec!["a".into(), "b".into(), "c".into()],
            arr2(&[[0.0], [0.0], [3.0]]),
        )
        .unwrap();
        assert_eq!(svector_spread(&t).unwrap(), 2.0);
    }

    #[test]
    fn spread_rejects_an_empty_table() {
        let t = SVectorTable::new(vec![], 4).unwrap();
        assert!(svector_spread(&t).is_err());
    }

    #[test]
    fn report_on_identical_conditions_has_equal_columns() {
        use crate::config::SyntheticSpec;
        use crate::synth::generate_synthetic;

        let spec = SyntheticSpec {
            n_speakers: 2,
            n_noise_types: 2,
            n_utts_per_speaker: 4,
            t_min: 20,
            t_max: 40,
            dim: 6,
            n_segment_classes: 3,
            seg_width: 10,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let models = ReportModels {
            fhvae: None,
            vae: None,
        };
        let report = invariance_report(
            &models,
            &corpus.train,
            &corpus.test_clean,
            &corpus.test_clean,
            &[ReportFeature::Raw],
            3,
        )
        .unwrap();
        assert_eq!(report.cells.len(), 1);
        let cell = report.cell("raw").unwrap();
        assert_eq!(cell.clean_error, cell.shifted_error);
        assert_eq!(cell.average_error, cell.clean_error);
        // Text and JSON renderings both carry the row.
        assert!(report.to_text().contains("raw"));
        let parsed: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(parsed["cells"][0]["feature"], "raw");
    }

    #[test]
    fn report_requires_models_for_latent_features() {
        use crate::config::SyntheticSpec;
        use crate::synth::generate_synthetic;

        let spec = SyntheticSpec {
            n_speakers: 2,
            n_noise_types: 2,
            n_utts_per_speaker: 3,
            t_min: 20,
            t_max: 30,
            dim: 5,
            n_segment_classes: 2,
            seg_width: 10,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let models = ReportModels {
            fhvae: None,
            vae: None,
        };
        let err = invariance_report(
            &models,
            &corpus.train,
            &corpus.test_clean,
            &corpus.test_shifted,
            &[ReportFeature::Latent(ExtractionMode::Z1)],
            3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("factorized"), "{err}");
    }
}
