//! Synthetic two-domain corpus generator. Frames compose four factors:
//! a segment-class template (varies within utterances), a per-speaker bias
//! (constant within utterances), a per-utterance noise-condition tilt, and
//! isotropic frame noise. The shifted test domain swaps in an unseen tilt
//! family, adds a global offset, and widens the frame noise, while keeping
//! the same speakers and segment classes.

use crate::config::SyntheticSpec;
use crate::data::{Dataset, Labels, ManifestEntry, Utterance};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::{Path, PathBuf};

/// Scale of the per-dimension class template envelope.
const TEMPLATE_ENV_SCALE: f64 = 0.9;
/// Depth of the within-segment sinusoidal modulation.
const TEMPLATE_MOD_DEPTH: f64 = 0.6;
/// Scale of the per-speaker bias vector.
const SPEAKER_SCALE: f64 = 0.5;
/// Scale of the random component of each noise-condition tilt.
const TILT_DIR_SCALE: f64 = 0.3;
/// Base standard deviation of the frame noise (clean domain).
const FRAME_NOISE_STD: f64 = 0.1;

/// The four generated splits. Both test splits share speakers and segment
/// classes with training; only `test_shifted` changes domain.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub dev: Dataset,
    pub test_clean: Dataset,
    pub test_shifted: Dataset,
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "dev", "test_clean", "test_shifted"];

impl SyntheticCorpus {
    pub fn split(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test_clean" => Some(&self.test_clean),
            "test_shifted" => Some(&self.test_shifted),
            _ => None,
        }
    }
}

fn normal_vec(rng: &mut ChaCha12Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    }))
}

/// Frozen factors shared by every utterance of one corpus.
struct FactorBank {
    /// `n_segment_classes` templates, each seg_width x dim.
    templates: Vec<Array2<f64>>,
    /// Per-speaker bias vectors.
    speaker_bias: Vec<Array1<f64>>,
    /// Clean-domain tilt per noise condition.
    clean_tilts: Vec<Array1<f64>>,
    /// Shifted-domain tilt per noise condition (unseen family).
    shifted_tilts: Vec<Array1<f64>>,
    /// Constant offset applied to every shifted frame.
    domain_offset: Array1<f64>,
}

fn build_factors(spec: &SyntheticSpec, rng: &mut ChaCha12Rng) -> FactorBank {
    let d = spec.dim;
    let w = spec.seg_width;
    let templates = (0..spec.n_segment_classes)
        .map(|c| {
            let env = normal_vec(rng, d, TEMPLATE_ENV_SCALE);
            let freq = 1.0 + (c % 3) as f64;
            let phase = std::f64::consts::TAU * c as f64 / spec.n_segment_classes as f64;
            Array2::from_shape_fn((w, d), |(t, j)| {
                let m = 1.0
                    + TEMPLATE_MOD_DEPTH
                        * (std::f64::consts::TAU * freq * t as f64 / w as f64 + phase).sin();
                env[j] * m
            })
        })
        .collect();
    let speaker_bias = (0..spec.n_speakers)
        .map(|_| normal_vec(rng, d, SPEAKER_SCALE))
        .collect();
    // Clean conditions tilt along a linear ramp across feature dimensions;
    // the shifted family tilts along a cosine arch instead, so its direction
    // is disjoint from anything seen in training.
    let ramp = Array1::from_shape_fn(d, |j| 2.0 * j as f64 / (d - 1).max(1) as f64 - 1.0);
    let arch = Array1::from_shape_fn(d, |j| {
        (std::f64::consts::PI * j as f64 / (d - 1).max(1) as f64).cos()
    });
    let clean_tilts = (0..spec.n_noise_types)
        .map(|k| {
            let dir = normal_vec(rng, d, TILT_DIR_SCALE);
            &ramp * (0.5 + 0.5 * k as f64) + dir
        })
        .collect();
    let shifted_tilts = (0..spec.n_noise_types)
        .map(|k| {
            let dir = normal_vec(rng, d, TILT_DIR_SCALE);
            &arch * (0.8 + 0.4 * k as f64) + dir
        })
        .collect();
    let domain_offset = normal_vec(rng, d, spec.offset_scale);
    FactorBank {
        templates,
        speaker_bias,
        clean_tilts,
        shifted_tilts,
        domain_offset,
    }
}

fn make_utterance(
    spec: &SyntheticSpec,
    bank: &FactorBank,
    rng: &mut ChaCha12Rng,
    utt_id: String,
    speaker: usize,
    shifted: bool,
) -> Result<Utterance> {
    let w = spec.seg_width;
    let d = spec.dim;
    let n_min = spec.t_min.div_ceil(w).max(1);
    let n_max = (spec.t_max / w).max(n_min);
    let n_segs = rng.random_range(n_min..=n_max);
    let noise = rng.random_range(0..spec.n_noise_types);
    let tilt = if shifted {
        &bank.shifted_tilts[noise]
    } else {
        &bank.clean_tilts[noise]
    };
    let noise_std = if shifted {
        FRAME_NOISE_STD * spec.noise_multiplier
    } else {
        FRAME_NOISE_STD
    };
    let mut frames = Array2::zeros((n_segs * w, d));
    let mut classes = Vec::with_capacity(n_segs * w);
    for s in 0..n_segs {
        let class = rng.random_range(0..spec.n_segment_classes);
        let template = &bank.templates[class];
        for t in 0..w {
            classes.push(class as u32);
            for j in 0..d {
                let eps: f64 = StandardNormal.sample(rng);
                let mut v = template[(t, j)] + bank.speaker_bias[speaker][j] + tilt[j]
                    + eps * noise_std;
                if shifted {
                    v += bank.domain_offset[j];
                }
                frames[(s * w + t, j)] = v;
            }
        }
    }
    Utterance::new(
        utt_id,
        frames,
        Labels {
            speaker: Some(format!("spk{speaker}")),
            noise: Some(format!("noise{noise}")),
            domain: Some(if shifted { "shifted" } else { "clean" }.to_string()),
            segment_classes: Some(classes),
        },
    )
}

fn make_split(
    spec: &SyntheticSpec,
    bank: &FactorBank,
    rng: &mut ChaCha12Rng,
    name: &str,
    utts_per_speaker: usize,
    shifted: bool,
) -> Result<Dataset> {
    let mut utts = Vec::new();
    for i in 0..utts_per_speaker {
        for speaker in 0..spec.n_speakers {
            let idx = i * spec.n_speakers + speaker;
            utts.push(make_utterance(
                spec,
                bank,
                rng,
                format!("{name}-{idx:04}"),
                speaker,
                shifted,
            )?);
        }
    }
    Dataset::from_utterances(utts)
}

/// Generate all four splits deterministically from `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let bank = build_factors(spec, &mut rng);
    let dev_per = (spec.n_utts_per_speaker / 10).max(2);
    let test_per = (spec.n_utts_per_speaker / 5).max(4);
    let train = make_split(spec, &bank, &mut rng, "train", spec.n_utts_per_speaker, false)?;
    let dev = make_split(spec, &bank, &mut rng, "dev", dev_per, false)?;
    let test_clean = make_split(spec, &bank, &mut rng, "test_clean", test_per, false)?;
    let test_shifted = make_split(spec, &bank, &mut rng, "test_shifted", test_per, true)?;
    Ok(SyntheticCorpus {
        train,
        dev,
        test_clean,
        test_shifted,
    })
}

/// Write a corpus under `dir` as, per split, `<name>.farc` (features),
/// `<name>_labels.farc` (per-frame class ids), and `<name>.manifest`.
pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in SPLIT_NAMES {
        let ds = corpus.split(name).expect("split names are exhaustive");
        write_split(dir, name, ds)?;
    }
    Ok(())
}

fn write_split(dir: &Path, name: &str, ds: &Dataset) -> Result<()> {
    use crate::archive::{ArchiveRecord, FeatureArchive};
    let mut features = FeatureArchive::new();
    let mut labels = FeatureArchive::new();
    let mut entries = Vec::new();
    for u in ds.utterances() {
        features.push(ArchiveRecord::new(
            u.utt_id.clone(),
            u.frames.mapv(|v| v as f32),
        )?)?;
        let classes = u.labels.segment_classes.as_ref().ok_or_else(|| {
            Error::Data(format!("utterance '{}' lacks segment labels", u.utt_id))
        })?;
        let col = Array2::from_shape_vec(
            (classes.len(), 1),
            classes.iter().map(|&c| c as f32).collect(),
        )
        .expect("column shape matches label count");
        labels.push(ArchiveRecord::new(u.utt_id.clone(), col)?)?;
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            archive_path: PathBuf::from(format!("{name}.farc")),
            speaker: u.labels.speaker.clone(),
            noise: u.labels.noise.clone(),
            domain: u.labels.domain.clone(),
        });
    }
    crate::archive::write_archive(&dir.join(format!("{name}.farc")), &features)?;
    crate::archive::write_archive(&dir.join(format!("{name}_labels.farc")), &labels)?;
    crate::data::write_manifest(&dir.join(format!("{name}.manifest")), &entries)
}

/// Load one split previously written by [`write_corpus`], reattaching the
/// per-frame segment labels.
pub fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    let mut ds = crate::data::load_dataset(&dir.join(format!("{name}.manifest")))?;
    let labels = crate::archive::read_archive(&dir.join(format!("{name}_labels.farc")))?;
    ds.attach_segment_labels(&labels)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_speakers: 3,
            n_noise_types: 2,
            n_utts_per_speaker: 4,
            t_min: 40,
            t_max: 80,
            dim: 6,
            n_segment_classes: 4,
            seg_width: 10,
            offset_scale: 0.8,
            noise_multiplier: 2.0,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a.train.utterances(), b.train.utterances());
        assert_eq!(a.test_shifted.utterances(), b.test_shifted.utterances());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let mut spec = small_spec();
        spec.seed = 12;
        let b = generate_synthetic(&spec).unwrap();
        assert_ne!(a.train.utterances()[0].frames, b.train.utterances()[0].frames);
    }

    #[test]
    fn shapes_and_labels_are_consistent() {
        let spec = small_spec();
        let corpus = generate_synthetic(&spec).unwrap();
        assert_eq!(corpus.train.len(), spec.n_speakers * spec.n_utts_per_speaker);
        for u in corpus.train.utterances() {
            assert_eq!(u.num_frames() % spec.seg_width, 0);
            assert!(u.num_frames() >= spec.t_min / spec.seg_width * spec.seg_width);
            assert_eq!(u.dim(), spec.dim);
            let classes = u.labels.segment_classes.as_ref().unwrap();
            assert_eq!(classes.len(), u.num_frames());
            // Class is constant within a segment window.
            for chunk in classes.chunks(spec.seg_width) {
                assert!(chunk.iter().all(|&c| c == chunk[0]));
            }
            assert!(u.labels.speaker.is_some());
            assert_eq!(u.labels.domain.as_deref(), Some("clean"));
        }
        for u in corpus.test_shifted.utterances() {
            assert_eq!(u.labels.domain.as_deref(), Some("shifted"));
        }
    }

    #[test]
    fn class_identity_varies_within_most_utterances() {
        let corpus = generate_synthetic(&small_spec()).unwrap();
        let varied = corpus
            .train
            .utterances()
            .iter()
            .filter(|u| {
                let c = u.labels.segment_classes.as_ref().unwrap();
                c.iter().any(|&v| v != c[0])
            })
            .count();
        assert!(varied * 10 >= corpus.train.len() * 8);
    }

    #[test]
    fn shifted_domain_moves_the_frame_mean() {
        let spec = small_spec();
        let corpus = generate_synthetic(&spec).unwrap();
        let mean_of = |ds: &Dataset| {
            let mut sum = Array1::<f64>::zeros(spec.dim);
            let mut n = 0.0;
            for u in ds.utterances() {
                for row in u.frames.rows() {
                    sum = sum + row;
                    n += 1.0;
                }
            }
            sum / n
        };
        let clean = mean_of(&corpus.test_clean);
        let shifted = mean_of(&corpus.test_shifted);
        let gap = (&clean - &shifted).mapv(|v| v * v).sum().sqrt();
        assert!(gap > 0.5, "domain gap {gap} too small");
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let corpus = generate_synthetic(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let train = load_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), corpus.train.len());
        let orig = &corpus.train.utterances()[0];
        let back = &train.utterances()[0];
        assert_eq!(orig.utt_id, back.utt_id);
        assert_eq!(orig.labels.speaker, back.labels.speaker);
        assert_eq!(
            orig.labels.segment_classes,
            back.labels.segment_classes
        );
        // Frames survive the f32 round trip to within float32 precision.
        for (a, b) in orig.frames.iter().zip(back.frames.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
