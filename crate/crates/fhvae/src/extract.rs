//! Test-time s-vector estimation and frame-aligned feature extraction.
//!
//! Extraction is fully deterministic: posterior means stand in for samples
//! everywhere. Each utterance is scanned with stride-one windows, every
//! window yields `[posterior mean || posterior variance]` of the chosen
//! latent, and the resulting T-W+1 rows are padded back to T rows by
//! replicating the first derived frame ceil((W-1)/2) times in front and the
//! last floor((W-1)/2) times behind.

use crate::config::{ExtractionMode, SeqLabel};
use crate::data::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::model::{encoder_forward, frame_inputs, ModelParams, SVectorTable};
use ndarray::{Array1, Array2, Array3, Axis};
use rayon::prelude::*;

fn check_frames(frames: &Array2<f64>, w: usize, d: usize) -> Result<()> {
    if frames.ncols() != d {
        return Err(Error::InputContract(format!(
            "frames have dimension {}, model expects {d}",
            frames.ncols()
        )));
    }
    if frames.nrows() < w {
        return Err(Error::Data(format!(
            "utterance of {} frames is shorter than the {w}-frame window",
            frames.nrows()
        )));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputContract("non-finite frame values".into()));
    }
    Ok(())
}

/// Stack windows `[starts[k], starts[k]+w)` into a batch tensor.
fn window_tensor(frames: &Array2<f64>, starts: &[usize], w: usize) -> Array3<f64> {
    let d = frames.ncols();
    let mut data = Array3::zeros((starts.len(), w, d));
    for (k, &s) in starts.iter().enumerate() {
        data.index_axis_mut(Axis(0), k)
            .assign(&frames.slice(ndarray::s![s..s + w, ..]));
    }
    data
}

/// Posterior means of q(z2|x) for the floor(T/W) non-overlapping windows.
fn nonoverlap_z2_means(frames: &Array2<f64>, params: &ModelParams) -> Result<Array2<f64>> {
    let latent = params.latent();
    let w = latent.input_width;
    check_frames(frames, w, latent.input_dim)?;
    let n = frames.nrows() / w;
    let starts: Vec<usize> = (0..n).map(|k| k * w).collect();
    let data = window_tensor(frames, &starts, w);
    let cache = encoder_forward(
        &params.layout().enc_primary,
        params.values(),
        frame_inputs(&data, None),
    );
    Ok(cache.mean)
}

/// Closed-form MAP s-vector from pooled window posterior means:
/// `(sum of means) / (N' + var_z2/var_mu2)`.
fn svector_from_means(sum: Array1<f64>, n_windows: usize, ratio: f64) -> Array1<f64> {
    sum / (n_windows as f64 + ratio)
}

/// MAP estimate of a test sequence's s-vector from one utterance.
pub fn estimate_svector(frames: &Array2<f64>, params: &ModelParams) -> Result<Array1<f64>> {
    estimate_svector_pooled(&[frames], params)
}

/// MAP estimate pooled over several utterances of one sequence; N' is the
/// total non-overlapping window count across all of them.
pub fn estimate_svector_pooled(
    frame_sets: &[&Array2<f64>],
    params: &ModelParams,
) -> Result<Array1<f64>> {
    if params.mode() != crate::config::ModelMode::Fhvae {
        return Err(Error::ModeMismatch(
            "s-vector estimation requires factorized-mode parameters".into(),
        ));
    }
    if frame_sets.is_empty() {
        return Err(Error::Data("no utterances to estimate an s-vector from".into()));
    }
    let latent = params.latent();
    let mut sum = Array1::zeros(latent.dim_z2);
    let mut n = 0usize;
    for frames in frame_sets {
        let means = nonoverlap_z2_means(frames, params)?;
        n += means.nrows();
        sum = sum + means.sum_axis(Axis(0));
    }
    Ok(svector_from_means(sum, n, latent.var_z2 / latent.var_mu2))
}

fn interleave_mean_var(mean: &Array2<f64>, logvar: &Array2<f64>) -> Array2<f64> {
    let (b, d) = (mean.nrows(), mean.ncols());
    let mut out = Array2::zeros((b, 2 * d));
    out.slice_mut(ndarray::s![.., ..d]).assign(mean);
    out.slice_mut(ndarray::s![.., d..])
        .assign(&logvar.mapv(f64::exp));
    out
}

/// Pad `derived` (T-W+1 rows) back to T rows by edge replication:
/// ceil((W-1)/2) front rows, floor((W-1)/2) back rows.
fn pad_to_length(derived: Array2<f64>, w: usize) -> Array2<f64> {
    let front_n = (w - 1).div_ceil(2);
    let back_n = (w - 1) / 2;
    let b = derived.nrows();
    let cols = derived.ncols();
    let mut out = Array2::zeros((front_n + b + back_n, cols));
    for r in 0..front_n {
        out.row_mut(r).assign(&derived.row(0));
    }
    out.slice_mut(ndarray::s![front_n..front_n + b, ..])
        .assign(&derived);
    for r in 0..back_n {
        out.row_mut(front_n + b + r).assign(&derived.row(b - 1));
    }
    out
}

/// Derived features for one utterance: one `[mean || variance]` row per
/// input frame (padded at the edges). `svector` feeds the Z1_MU2 mode; when
/// absent it is estimated from the utterance itself.
pub fn extract_features(
    frames: &Array2<f64>,
    params: &ModelParams,
    mode: ExtractionMode,
    svector: Option<&Array1<f64>>,
) -> Result<Array2<f64>> {
    if params.mode() != mode.requires_mode() {
        return Err(Error::ModeMismatch(format!(
            "extraction mode {mode} requires {} parameters, model is {}",
            mode.requires_mode(),
            params.mode()
        )));
    }
    let latent = params.latent();
    let w = latent.input_width;
    check_frames(frames, w, latent.input_dim)?;
    let t = frames.nrows();
    let starts: Vec<usize> = (0..=t - w).collect();
    let data = window_tensor(frames, &starts, w);
    let layout = params.layout();
    let values = params.values();

    let enc2 = encoder_forward(&layout.enc_primary, values, frame_inputs(&data, None));
    let derived = match mode {
        ExtractionMode::ZVae => interleave_mean_var(&enc2.mean, &enc2.logvar),
        ExtractionMode::Z1 | ExtractionMode::Z1Z2 | ExtractionMode::Z1Mu2 => {
            let enc1_layout = layout.enc_z1.as_ref().expect("factorized mode has a z1 encoder");
            let enc1 =
                encoder_forward(enc1_layout, values, frame_inputs(&data, Some(&enc2.mean)));
            let z1_feats = interleave_mean_var(&enc1.mean, &enc1.logvar);
            match mode {
                ExtractionMode::Z1 => z1_feats,
                ExtractionMode::Z1Z2 => {
                    let z2_feats = interleave_mean_var(&enc2.mean, &enc2.logvar);
                    ndarray::concatenate(Axis(1), &[z1_feats.view(), z2_feats.view()])
                        .expect("matching window counts")
                }
                ExtractionMode::Z1Mu2 => {
                    let mu2 = match svector {
                        Some(v) => {
                            if v.len() != latent.dim_z2 {
                                return Err(Error::InputContract(format!(
                                    "s-vector has length {}, expected {}",
                                    v.len(),
                                    latent.dim_z2
                                )));
                            }
                            v.to_owned()
                        }
                        None => estimate_svector(frames, params)?,
                    };
                    let b = z1_feats.nrows();
                    let tiled = Array2::from_shape_fn((b, mu2.len()), |(_, c)| mu2[c]);
                    ndarray::concatenate(Axis(1), &[z1_feats.view(), tiled.view()])
                        .expect("matching window counts")
                }
                _ => unreachable!(),
            }
        }
    };
    Ok(pad_to_length(derived, w))
}

/// Resolve the s-vector for an utterance: its training-table row when the
/// sequence label is known to the table, otherwise the MAP estimate.
pub fn svector_for_utterance(
    utt: &Utterance,
    params: &ModelParams,
    table: &SVectorTable,
    seq_label: SeqLabel,
) -> Result<Array1<f64>> {
    let key = match seq_label {
        SeqLabel::UttId => Some(utt.utt_id.clone()),
        SeqLabel::Speaker => utt.labels.speaker.clone(),
        SeqLabel::Noise => utt.labels.noise.clone(),
    };
    if let Some(row) = key.and_then(|k| table.row_of_id(&k)) {
        return Ok(table.lookup_mu2(row)?.to_owned());
    }
    estimate_svector(&utt.frames, params)
}

/// Extract every utterance of a dataset (in parallel, order preserved).
/// The table resolves Z1_MU2 s-vectors for training sequences.
pub fn extract_dataset(
    dataset: &Dataset,
    params: &ModelParams,
    table: Option<&SVectorTable>,
    seq_label: SeqLabel,
    mode: ExtractionMode,
) -> Result<Vec<(String, Array2<f64>)>> {
    dataset
        .utterances()
        .par_iter()
        .map(|utt| {
            let svec = match (mode, table) {
                (ExtractionMode::Z1Mu2, Some(t)) => {
                    Some(svector_for_utterance(utt, params, t, seq_label)?)
                }
                _ => None,
            };
            let feats = extract_features(&utt.frames, params, mode, svec.as_ref())?;
            Ok((utt.utt_id.clone(), feats))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ArchDescriptor, CellKind, LatentConfig, ModelMode};
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn latent() -> LatentConfig {
        LatentConfig::default()
    }

    fn small_arch() -> ArchDescriptor {
        ArchDescriptor {
            cell: CellKind::Recurrent,
            layers: 1,
            units: 16,
        }
    }

    fn rand_frames(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array::from_shape_fn((t, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn z1_output_shape_matches_contract() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 3).unwrap();
        let frames = rand_frames(100, latent.input_dim, 1);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1, None).unwrap();
        assert_eq!(feats.nrows(), 100);
        assert_eq!(feats.ncols(), 2 * latent.dim_z1);
    }

    #[test]
    fn zvae_output_shape_matches_contract() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Vae, &small_arch(), &latent, 3).unwrap();
        let frames = rand_frames(100, latent.input_dim, 2);
        let feats = extract_features(&frames, &params, ExtractionMode::ZVae, None).unwrap();
        assert_eq!(feats.nrows(), 100);
        assert_eq!(feats.ncols(), 2 * latent.dim_z_vae);
    }

    #[test]
    fn z1mu2_output_shape_matches_contract() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 3).unwrap();
        let frames = rand_frames(100, latent.input_dim, 3);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1Mu2, None).unwrap();
        assert_eq!(feats.nrows(), 100);
        assert_eq!(feats.ncols(), 2 * latent.dim_z1 + latent.dim_z2);
    }

    #[test]
    fn z1z2_output_shape_matches_contract() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 3).unwrap();
        let frames = rand_frames(64, latent.input_dim, 4);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1Z2, None).unwrap();
        assert_eq!(feats.nrows(), 64);
        assert_eq!(feats.ncols(), 2 * latent.dim_z1 + 2 * latent.dim_z2);
    }

    #[test]
    fn single_window_utterance_replicates_one_row() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 5).unwrap();
        let frames = rand_frames(latent.input_width, latent.input_dim, 5);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1, None).unwrap();
        assert_eq!(feats.nrows(), latent.input_width);
        for r in 1..feats.nrows() {
            assert_eq!(feats.row(r), feats.row(0));
        }
    }

    #[test]
    fn padding_replicates_edges() {
        let latent = latent();
        let w = latent.input_width;
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 7).unwrap();
        let frames = rand_frames(100, latent.input_dim, 6);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1, None).unwrap();
        let front = (w - 1).div_ceil(2);
        for r in 0..front {
            assert_eq!(feats.row(r), feats.row(front));
        }
        let back = (w - 1) / 2;
        let last_derived = feats.nrows() - back - 1;
        for r in 0..back {
            assert_eq!(feats.row(last_derived + 1 + r), feats.row(last_derived));
        }
    }

    #[test]
    fn constant_input_gives_identical_rows() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 9).unwrap();
        let frames = Array2::from_elem((73, latent.input_dim), 0.37);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1, None).unwrap();
        for r in 1..feats.nrows() {
            assert_eq!(feats.row(r), feats.row(0));
        }
    }

    #[test]
    fn variance_halves_are_positive() {
        let latent = latent();
        let params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 11).unwrap();
        let frames = rand_frames(60, latent.input_dim, 7);
        let feats = extract_features(&frames, &params, ExtractionMode::Z1, None).unwrap();
        let d = latent.dim_z1;
        for r in 0..feats.nrows() {
            for c in d..2 * d {
                assert!(feats[(r, c)] > 0.0);
            }
        }
    }

    #[test]
    fn mode_and_length_contracts_error() {
        let latent = latent();
        let fh = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 0).unwrap();
        let vae = ModelParams::new(ModelMode::Vae, &small_arch(), &latent, 0).unwrap();
        let frames = rand_frames(40, latent.input_dim, 8);
        assert!(extract_features(&frames, &vae, ExtractionMode::Z1, None).is_err());
        assert!(extract_features(&frames, &fh, ExtractionMode::ZVae, None).is_err());
        let short = rand_frames(latent.input_width - 1, latent.input_dim, 9);
        assert!(extract_features(&short, &fh, ExtractionMode::Z1, None).is_err());
        assert!(estimate_svector(&short, &fh).is_err());
    }

    #[test]
    fn zero_posteriors_give_zero_svector() {
        let latent = latent();
        let mut params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 13).unwrap();
        params.zero_all();
        let frames = rand_frames(100, latent.input_dim, 10);
        let mu2 = estimate_svector(&frames, &params).unwrap();
        assert!(mu2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_window_svector_is_shrunk_mean() {
        // Hand-set constant posterior mean m: with one window the estimate
        // is m / (1 + var_z2/var_mu2).
        let latent = latent();
        let mut params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 0).unwrap();
        params.zero_all();
        let bias = params.layout().enc_primary.mean.b;
        {
            let values = params.values_mut();
            bias.view_mut(values).fill(0.8);
        }
        let frames = rand_frames(latent.input_width, latent.input_dim, 11);
        let mu2 = estimate_svector(&frames, &params).unwrap();
        let r = latent.var_z2 / latent.var_mu2;
        let expected = 0.8 / (1.0 + r);
        for &v in mu2.iter() {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn many_windows_converge_to_the_posterior_mean() {
        let latent = LatentConfig {
            input_width: 2,
            input_dim: 2,
            dim_z1: 2,
            dim_z2: 2,
            var_z2: 0.25,
            var_mu2: 1.0,
            ..LatentConfig::default()
        };
        let mut params = ModelParams::new(ModelMode::Fhvae, &small_arch(), &latent, 0).unwrap();
        params.zero_all();
        let bias = params.layout().enc_primary.mean.b;
        {
            let values = params.values_mut();
            bias.view_mut(values).fill(-1.3);
        }
        // 400 windows, ratio 0.25: estimate within 1% of the constant mean.
        let frames = Array2::zeros((800, 2));
        let mu2 = estimate_svector(&frames, &params).unwrap();
        for &v in mu2.iter() {
            assert!((v - (-1.3)).abs() < 0.01 * 1.3);
        }
    }

    /// Golden-section maximizer over a bracket; used as the generic oracle
    /// for the MAP estimate (the objective is concave per dimension).
    fn golden_max(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - inv_phi * (hi - lo);
        let mut d = lo + inv_phi * (hi - lo);
        let (mut fc, mut fd) = (f(c), f(d));
        while hi - lo > 1e-10 {
            if fc > fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - inv_phi * (hi - lo);
                fc = f(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + inv_phi * (hi - lo);
                fd = f(d);
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn estimator_matches_generic_map_maximizer() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        for inst in 0..20 {
            let latent = LatentConfig {
                input_width: 2,
                input_dim: 2,
                dim_z1: 2,
                dim_z2: 3,
                var_z2: [0.25, 0.5, 1.0][inst % 3],
                var_mu2: [1.0, 2.0][inst % 2],
                ..LatentConfig::default()
            };
            let params = ModelParams::new(
                ModelMode::Fhvae,
                &ArchDescriptor {
                    cell: CellKind::Recurrent,
                    layers: 1,
                    units: 8,
                },
                &latent,
                inst as u64,
            )
            .unwrap();
            let n_windows = rng.random_range(1..6);
            let frames = rand_frames(n_windows * latent.input_width, latent.input_dim, 200 + inst as u64);
            let mu2 = estimate_svector(&frames, &params).unwrap();
            // Recover the window posterior means through the public encoder.
            let mut means = Vec::new();
            for k in 0..n_windows {
                let win = frames
                    .slice(ndarray::s![k * latent.input_width..(k + 1) * latent.input_width, ..])
                    .to_owned();
                means.push(crate::model::encode_z2(&win, &params).unwrap().mean);
            }
            for c in 0..latent.dim_z2 {
                let obs: Vec<f64> = means.iter().map(|m| m[c]).collect();
                let objective = |mu: f64| {
                    let prior = -0.5 * mu * mu / latent.var_mu2;
                    let lik: f64 = obs.iter().map(|&o| -0.5 * (o - mu) * (o - mu) / latent.var_z2).sum();
                    prior + lik
                };
                let oracle = golden_max(-20.0, 20.0, objective);
                assert!(
                    (mu2[c] - oracle).abs() < 1e-6,
                    "instance {inst} dim {c}: {} vs {oracle}",
                    mu2[c]
                );
            }
        }
    }
}
