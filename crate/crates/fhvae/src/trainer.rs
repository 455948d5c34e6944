//! Stochastic training: per-epoch segment scheduling, Adam with lazy
//! table-row updates, and early stopping on a held-out bound.
//!
//! Determinism: a single seeded generator drives the whole run — per epoch
//! it first draws the segment schedule, then per step the reparameterization
//! noise — so identical seeds give bit-identical trajectories. The held-out
//! bound is evaluated with its own fixed noise, drawn once per run.

use crate::config::{ModelMode, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::extract::estimate_svector_pooled;
use crate::model::{ModelParams, SVectorTable, SegmentBatch};
use crate::objective::{fhvae_backward, fhvae_forward, vae_backward, vae_forward, LossBreakdown};
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Optimizer state: first/second Adam moments for the flat parameter vector,
/// per-row moments and step counters for the s-vector table (rows step only
/// when a batch references them, so bias correction is tracked per row), and
/// the run's random generator.
pub struct TrainState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    m_table: Array2<f64>,
    v_table: Array2<f64>,
    step_table: Vec<u64>,
    rng: ChaCha12Rng,
}

impl TrainState {
    pub fn new(params: &ModelParams, table: &SVectorTable, seed: u64) -> Self {
        TrainState {
            step: 0,
            m: vec![0.0; params.num_params()],
            v: vec![0.0; params.num_params()],
            m_table: Array2::zeros(table.entries().raw_dim()),
            v_table: Array2::zeros(table.entries().raw_dim()),
            step_table: vec![0; table.num_sequences()],
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha12Rng {
        &mut self.rng
    }
}

fn normal_matrix(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// One epoch's schedule: every utterance contributes `max(1, floor(T/W))`
/// segments at uniformly random start offsets, the pool is shuffled
/// globally, and batches of `batch_size` are cut off in order (the final
/// short batch is kept).
pub fn sample_segment_batches(
    dataset: &Dataset,
    rng: &mut ChaCha12Rng,
    batch_size: usize,
    w: usize,
) -> Result<Vec<SegmentBatch>> {
    if batch_size == 0 {
        return Err(Error::InputContract("batch_size must be >= 1".into()));
    }
    if dataset.len() == 0 {
        return Err(Error::Data("cannot schedule segments from an empty dataset".into()));
    }
    let seg_count = dataset.seq_segment_counts(w);
    let mut draws: Vec<(usize, usize)> = Vec::new();
    for (u, utt) in dataset.utterances().iter().enumerate() {
        let t = utt.num_frames();
        if t < w {
            return Err(Error::Data(format!(
                "utterance '{}' has {t} frames, shorter than the {w}-frame window",
                utt.utt_id
            )));
        }
        for _ in 0..(t / w).max(1) {
            draws.push((u, rng.random_range(0..=t - w)));
        }
    }
    draws.shuffle(rng);

    let d = dataset.utterances()[0].dim();
    let n_seqs = dataset.num_sequences();
    let mut batches = Vec::with_capacity(draws.len().div_ceil(batch_size));
    for chunk in draws.chunks(batch_size) {
        let mut data = Array3::zeros((chunk.len(), w, d));
        let mut seq_index = Vec::with_capacity(chunk.len());
        let mut counts = Vec::with_capacity(chunk.len());
        for (k, &(u, off)) in chunk.iter().enumerate() {
            data.index_axis_mut(Axis(0), k)
                .assign(&dataset.utterances()[u].frames.slice(ndarray::s![off..off + w, ..]));
            let s = dataset.seq_of_utt(u);
            seq_index.push(s);
            counts.push(seg_count[s]);
        }
        batches.push(SegmentBatch::new(data, seq_index, counts, n_seqs)?);
    }
    Ok(batches)
}

fn adam_scalar(
    value: &mut f64,
    g: f64,
    m: &mut f64,
    v: &mut f64,
    bc1: f64,
    bc2: f64,
    cfg: &TrainConfig,
) {
    *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
    *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
    let mhat = *m / bc1;
    let vhat = *v / bc2;
    *value -= cfg.lr * mhat / (vhat.sqrt() + cfg.adam_eps);
}

fn check_grads_finite(grads: &[f64]) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            term: "gradient",
            detail: "non-finite gradient; step aborted before the update".into(),
        });
    }
    Ok(())
}

/// One optimizer step on one batch. The loss is the mean negative bound plus
/// `l2_weight * ||params||^2` (table rows carry no weight decay); a single
/// un-clipped Adam update is applied to the network parameters and to the
/// table rows the batch references. Returns the pre-update breakdown.
pub fn train_step(
    batch: &SegmentBatch,
    params: &mut ModelParams,
    table: &mut SVectorTable,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    config.validate()?;
    let latent = *params.latent();
    let b = batch.len();
    let scale = -1.0 / b as f64;

    let (breakdown, grads, dtable) = match params.mode() {
        ModelMode::Fhvae => {
            let noise_z1 = normal_matrix(&mut state.rng, b, latent.dim_z1);
            let noise_z2 = normal_matrix(&mut state.rng, b, latent.dim_z2);
            let (breakdown, cache) =
                fhvae_forward(params, table, batch, &noise_z1, &noise_z2, config.alpha)?;
            let (grads, dtable) = fhvae_backward(params, table, &cache, scale);
            (breakdown, grads, Some(dtable))
        }
        ModelMode::Vae => {
            let noise = normal_matrix(&mut state.rng, b, latent.dim_z_vae);
            let (breakdown, cache) = vae_forward(params, &batch.data, &noise)?;
            let grads = vae_backward(params, &cache, scale);
            (breakdown, grads, None)
        }
    };

    let mut grads = grads;
    {
        // Weight decay enters the loss as l2_weight * ||theta||^2.
        let theta = params.values();
        let g = grads.values_mut();
        for j in 0..theta.len() {
            g[j] += 2.0 * config.l2_weight * theta[j];
        }
    }
    check_grads_finite(grads.values())?;

    state.step += 1;
    let bc1 = 1.0 - config.adam_beta1.powi(state.step as i32);
    let bc2 = 1.0 - config.adam_beta2.powi(state.step as i32);
    {
        let values = params.values_mut();
        let g = grads.values();
        for j in 0..values.len() {
            adam_scalar(&mut values[j], g[j], &mut state.m[j], &mut state.v[j], bc1, bc2, config);
        }
    }

    if let Some(dtable) = dtable {
        let mut rows: Vec<usize> = batch.seq_index.clone();
        rows.sort_unstable();
        rows.dedup();
        let entries = table.entries_mut();
        for i in rows {
            state.step_table[i] += 1;
            let bc1 = 1.0 - config.adam_beta1.powi(state.step_table[i] as i32);
            let bc2 = 1.0 - config.adam_beta2.powi(state.step_table[i] as i32);
            for c in 0..entries.ncols() {
                let g = dtable[(i, c)];
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        term: "gradient",
                        detail: format!("non-finite table gradient at row {i}"),
                    });
                }
                adam_scalar(
                    &mut entries[(i, c)],
                    g,
                    &mut state.m_table[(i, c)],
                    &mut state.v_table[(i, c)],
                    bc1,
                    bc2,
                    config,
                );
            }
        }
    }

    Ok(breakdown)
}

/// One epoch's record in a training report: per-term means over every
/// scheduled training segment, and the held-out bound.
#[derive(Debug, Clone, Copy)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub dev: LossBreakdown,
}

/// What `fit` returns: the per-epoch trace plus which epoch's checkpoint the
/// model was left at.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_bound: f64,
    pub stopped_early: bool,
}

impl TrainingReport {
    /// Tab-separated trace, one row per epoch, with per-term means of both
    /// the training and held-out bounds.
    pub fn to_text(&self) -> String {
        let mut out = String::from(
            "epoch\ttrain_bound\tdev_bound\ttrain_recon\ttrain_kl_z1\ttrain_kl_z2\t\
             train_logp_mu2\ttrain_disc\tdev_recon\tdev_kl_z1\tdev_kl_z2\tdev_logp_mu2\n",
        );
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.epoch,
                r.train.total,
                r.dev.total,
                r.train.recon,
                r.train.kl_z1,
                r.train.kl_z2,
                r.train.logp_mu2_scaled,
                r.train.disc,
                r.dev.recon,
                r.dev.kl_z1,
                r.dev.kl_z2,
                r.dev.logp_mu2_scaled,
            ));
        }
        out.push_str(&format!(
            "# best_epoch={} best_dev_bound={:.6} stopped_early={}\n",
            self.best_epoch, self.best_dev_bound, self.stopped_early
        ));
        out
    }
}

/// Precomputed held-out evaluation: every non-overlapping window of every
/// held-out utterance, with fixed noise so epoch-to-epoch bounds are
/// comparable. The discriminative term is excluded (alpha = 0): held-out
/// sequences have no table rows, so their s-vectors are re-estimated from
/// the current encoder each epoch.
struct DevEval {
    data: Array3<f64>,
    window_seq: Vec<usize>,
    window_count: Vec<usize>,
    n_seqs: usize,
    noise_z1: Array2<f64>,
    noise_z2: Array2<f64>,
}

impl DevEval {
    fn build(
        dev: &Dataset,
        mode: ModelMode,
        latent: &crate::config::LatentConfig,
        seed: u64,
    ) -> Result<Self> {
        let w = latent.input_width;
        let d = latent.input_dim;
        let mut window_seq = Vec::new();
        let mut slices = Vec::new();
        for (u, utt) in dev.utterances().iter().enumerate() {
            if utt.num_frames() < w {
                return Err(Error::Data(format!(
                    "held-out utterance '{}' has {} frames, shorter than the {w}-frame window",
                    utt.utt_id,
                    utt.num_frames()
                )));
            }
            for k in 0..utt.num_frames() / w {
                slices.push((u, k * w));
                window_seq.push(dev.seq_of_utt(u));
            }
        }
        let n_seqs = dev.num_sequences();
        let mut per_seq = vec![0usize; n_seqs];
        for &s in &window_seq {
            per_seq[s] += 1;
        }
        let window_count: Vec<usize> = window_seq.iter().map(|&s| per_seq[s]).collect();
        let mut data = Array3::zeros((slices.len(), w, d));
        for (k, &(u, off)) in slices.iter().enumerate() {
            data.index_axis_mut(Axis(0), k)
                .assign(&dev.utterances()[u].frames.slice(ndarray::s![off..off + w, ..]));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6465_765f_6e6f_6973); // distinct stream
        let (c1, c2) = match mode {
            ModelMode::Fhvae => (latent.dim_z1, latent.dim_z2),
            ModelMode::Vae => (latent.dim_z_vae, 0),
        };
        let noise_z1 = normal_matrix(&mut rng, slices.len(), c1);
        let noise_z2 = normal_matrix(&mut rng, slices.len(), c2);
        Ok(DevEval {
            data,
            window_seq,
            window_count,
            n_seqs,
            noise_z1,
            noise_z2,
        })
    }

    fn bound(&self, dev: &Dataset, params: &ModelParams) -> Result<LossBreakdown> {
        match params.mode() {
            ModelMode::Fhvae => {
                let dz2 = params.latent().dim_z2;
                let mut rows = Array2::zeros((self.n_seqs, dz2));
                for s in 0..self.n_seqs {
                    let frames: Vec<&Array2<f64>> = dev
                        .utts_of_seq(s)
                        .into_iter()
                        .map(|u| &dev.utterances()[u].frames)
                        .collect();
                    rows.row_mut(s).assign(&estimate_svector_pooled(&frames, params)?);
                }
                let table = SVectorTable::from_entries(dev.seq_ids().to_vec(), rows)?;
                let batch = SegmentBatch::new(
                    self.data.clone(),
                    self.window_seq.clone(),
                    self.window_count.clone(),
                    self.n_seqs,
                )?;
                let (b, _) = fhvae_forward(params, &table, &batch, &self.noise_z1, &self.noise_z2, 0.0)?;
                Ok(b)
            }
            ModelMode::Vae => {
                let (b, _) = vae_forward(params, &self.data, &self.noise_z1)?;
                Ok(b)
            }
        }
    }
}

fn weighted_mean_breakdown(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
    let total: f64 = parts.iter().map(|&(_, n)| n as f64).sum();
    let avg = |f: fn(&LossBreakdown) -> f64| {
        parts.iter().map(|&(b, n)| f(&b) * n as f64).sum::<f64>() / total
    };
    LossBreakdown::compose(
        avg(|b| b.recon),
        avg(|b| b.kl_z1),
        avg(|b| b.kl_z2),
        avg(|b| b.logp_mu2_scaled),
        avg(|b| b.disc),
        parts.first().map_or(0.0, |&(b, _)| b.alpha),
    )
}

/// Full training run: epochs of shuffled segment batches, one held-out
/// evaluation per epoch, early stopping once the held-out bound has not
/// improved for `patience_epochs` epochs, and restoration of the best
/// checkpoint into `params` / `table` before returning.
pub fn fit(
    train: &Dataset,
    dev: &Dataset,
    params: &mut ModelParams,
    table: &mut SVectorTable,
    config: &TrainConfig,
) -> Result<TrainingReport> {
    config.validate()?;
    if dev.len() == 0 {
        return Err(Error::InputContract("held-out set must be nonempty".into()));
    }
    if params.mode() == ModelMode::Fhvae && table.num_sequences() != train.num_sequences() {
        return Err(Error::InputContract(format!(
            "table of {} rows does not match {} training sequences",
            table.num_sequences(),
            train.num_sequences()
        )));
    }
    let latent = *params.latent();
    let w = latent.input_width;
    let mut state = TrainState::new(params, table, config.seed);
    let dev_eval = DevEval::build(dev, params.mode(), &latent, config.seed)?;

    let mut report = TrainingReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_dev_bound: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best: Option<(Vec<f64>, Array2<f64>)> = None;
    let mut since_improvement = 0usize;

    for epoch in 1..=config.max_epochs {
        let batches = sample_segment_batches(train, &mut state.rng, config.batch_size, w)?;
        let mut parts = Vec::with_capacity(batches.len());
        for batch in &batches {
            let bd = train_step(batch, params, table, &mut state, config)?;
            parts.push((bd, batch.len()));
        }
        let train_mean = weighted_mean_breakdown(&parts);
        let dev_bd = dev_eval.bound(dev, params)?;
        report.epochs.push(EpochRecord {
            epoch,
            train: train_mean,
            dev: dev_bd,
        });

        if dev_bd.total > report.best_dev_bound {
            report.best_dev_bound = dev_bd.total;
            report.best_epoch = epoch;
            best = Some((params.values().to_vec(), table.entries().clone()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= config.patience_epochs {
                report.stopped_early = true;
                break;
            }
        }
    }

    if let Some((values, entries)) = best {
        params.values_mut().copy_from_slice(&values);
        *table.entries_mut() = entries;
    }
    Ok(report)
}
