//! Training objectives: the segment variational lower bound, the
//! discriminative sequence-classification term, their alpha-weighted
//! combination, and the single-latent baseline ELBO — together with the
//! analytic gradients of all of them.
//!
//! Conventions: every function returns the bound under the maximization
//! sign convention (higher is better); the trainer negates. Expectations
//! are single-sample reparameterized estimates with caller-supplied noise,
//! which keeps them deterministic and finite-difference checkable.

use crate::config::LatentConfig;
use crate::error::{Error, Result};
use crate::gaussian::{kl_rows_isotropic, log_prob_rows, LN_2PI};
use crate::model::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, frame_inputs, DecCache,
    EncCache, GradBuf, ModelParams, SVectorTable, SegmentBatch,
};
use crate::config::ModelMode;
use ndarray::{Array1, Array2, Axis};

/// Per-term decomposition of one objective evaluation (batch means when
/// produced by the batch paths).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// E_q log p(x|latents).
    pub recon: f64,
    /// KL of the segment-level posterior from its prior (the single KL in
    /// baseline mode).
    pub kl_z1: f64,
    /// KL of the sequence-level posterior from its s-vector prior.
    pub kl_z2: f64,
    /// (1/N) log prior density of the looked-up s-vector.
    pub logp_mu2_scaled: f64,
    /// Log-posterior of the true sequence index given z2.
    pub disc: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Assemble a breakdown; `total` is derived from the other fields, so
    /// the decomposition identity holds bit-for-bit by construction.
    pub fn compose(
        recon: f64,
        kl_z1: f64,
        kl_z2: f64,
        logp_mu2_scaled: f64,
        disc: f64,
        alpha: f64,
    ) -> Self {
        LossBreakdown {
            recon,
            kl_z1,
            kl_z2,
            logp_mu2_scaled,
            disc,
            alpha,
            total: recon - kl_z1 - kl_z2 + logp_mu2_scaled + alpha * disc,
        }
    }
}

fn check_finite(term: &'static str, values: &Array1<f64>) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            term,
            detail: format!("produced {v}"),
        });
    }
    Ok(())
}

fn check_noise(noise: &Array2<f64>, b: usize, dim: usize, what: &'static str) -> Result<()> {
    if noise.nrows() != b || noise.ncols() != dim {
        return Err(Error::InputContract(format!(
            "{what} noise has shape {}x{}, expected {b}x{dim}",
            noise.nrows(),
            noise.ncols()
        )));
    }
    if noise.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputContract(format!("non-finite {what} noise")));
    }
    Ok(())
}

/// Reparameterized batch sample `mean + exp(logvar/2) * noise`.
fn reparam_rows(mean: &Array2<f64>, logvar: &Array2<f64>, noise: &Array2<f64>) -> Array2<f64> {
    mean + &(logvar.mapv(|lv| (0.5 * lv).exp()) * noise)
}

fn flatten_windows(data: &ndarray::Array3<f64>) -> Array2<f64> {
    let (b, w, d) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    Array2::from_shape_vec((b, w * d), data.iter().copied().collect())
        .expect("row-major window tensor flattens exactly")
}

fn gather_rows(table: &Array2<f64>, index: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((index.len(), table.ncols()), |(r, c)| table[(index[r], c)])
}

/// Log-density logits of z2 rows under every table row's Gaussian, plus the
/// row-wise softmax and log-softmax at the true indices.
fn disc_terms(
    z2: &Array2<f64>,
    table: &Array2<f64>,
    index: &[usize],
    var_z2: f64,
) -> (Array1<f64>, Array2<f64>) {
    let b = z2.nrows();
    let m = table.nrows();
    let dim = z2.ncols();
    let log_norm = -0.5 * dim as f64 * (LN_2PI + var_z2.ln());
    // Squared distances via ||a-b||^2 = ||a||^2 + ||b||^2 - 2 a.b.
    let z_sq = z2.mapv(|v| v * v).sum_axis(Axis(1));
    let t_sq = table.mapv(|v| v * v).sum_axis(Axis(1));
    let cross = z2.dot(&table.t());
    let mut logits = Array2::zeros((b, m));
    for r in 0..b {
        for j in 0..m {
            let sq = (z_sq[r] + t_sq[j] - 2.0 * cross[(r, j)]).max(0.0);
            logits[(r, j)] = log_norm - 0.5 * sq / var_z2;
        }
    }
    let mut disc = Array1::zeros(b);
    let mut softmax = Array2::zeros((b, m));
    for r in 0..b {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for j in 0..m {
            let e = (row[j] - max).exp();
            softmax[(r, j)] = e;
            denom += e;
        }
        softmax.row_mut(r).mapv_inplace(|v| v / denom);
        disc[r] = row[index[r]] - max - denom.ln();
    }
    (disc, softmax)
}

/// Everything the backward pass needs from one factorized forward.
pub(crate) struct FhvaeCache {
    enc2: EncCache,
    enc1: EncCache,
    dec: DecCache,
    z2: Array2<f64>,
    noise_z1: Array2<f64>,
    noise_z2: Array2<f64>,
    x_flat: Array2<f64>,
    prior_mean2: Array2<f64>,
    softmax: Array2<f64>,
    seq_index: Vec<usize>,
    seg_count: Vec<usize>,
    alpha: f64,
}

impl FhvaeCache {
    pub(crate) fn batch_len(&self) -> usize {
        self.seq_index.len()
    }
}

/// Batched factorized forward: per-window single-sample bound terms plus a
/// cache for [`fhvae_backward`]. The returned breakdown averages over the
/// batch; `disc` is always evaluated (it only enters `total` via alpha).
pub(crate) fn fhvae_forward(
    params: &ModelParams,
    table: &SVectorTable,
    batch: &SegmentBatch,
    noise_z1: &Array2<f64>,
    noise_z2: &Array2<f64>,
    alpha: f64,
) -> Result<(LossBreakdown, FhvaeCache)> {
    if params.mode() != ModelMode::Fhvae {
        return Err(Error::ModeMismatch(
            "factorized objective requires factorized-mode parameters".into(),
        ));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InputContract(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let latent = params.latent();
    let b = batch.len();
    let (w, d) = (batch.data.shape()[1], batch.data.shape()[2]);
    if w != latent.input_width || d != latent.input_dim {
        return Err(Error::InputContract(format!(
            "batch windows are {w}x{d}, model expects {}x{}",
            latent.input_width, latent.input_dim
        )));
    }
    if table.dim() != latent.dim_z2 {
        return Err(Error::InputContract(format!(
            "table dimension {} does not match dim_z2 {}",
            table.dim(),
            latent.dim_z2
        )));
    }
    if batch.seq_index.iter().any(|&i| i >= table.num_sequences()) {
        return Err(Error::InputContract("batch references a row beyond the table".into()));
    }
    check_noise(noise_z1, b, latent.dim_z1, "z1")?;
    check_noise(noise_z2, b, latent.dim_z2, "z2")?;

    let layout = params.layout();
    let values = params.values();

    let enc2 = encoder_forward(&layout.enc_primary, values, frame_inputs(&batch.data, None));
    let z2 = reparam_rows(&enc2.mean, &enc2.logvar, noise_z2);
    let enc1_layout = layout.enc_z1.as_ref().expect("factorized mode has a z1 encoder");
    let enc1 = encoder_forward(enc1_layout, values, frame_inputs(&batch.data, Some(&z2)));
    let z1 = reparam_rows(&enc1.mean, &enc1.logvar, noise_z1);
    let z = ndarray::concatenate(Axis(1), &[z1.view(), z2.view()])
        .expect("z1 and z2 have matching batch dimension");
    let dec = decoder_forward(&layout.dec, values, w, z);

    let x_flat = flatten_windows(&batch.data);
    let recon = log_prob_rows(&x_flat, &dec.mean, &dec.logvar);
    check_finite("recon", &recon)?;
    let kl_z1 = kl_rows_isotropic(&enc1.mean, &enc1.logvar, None, latent.var_z1);
    check_finite("kl_z1", &kl_z1)?;
    let prior_mean2 = gather_rows(table.entries(), &batch.seq_index);
    let kl_z2 = kl_rows_isotropic(&enc2.mean, &enc2.logvar, Some(&prior_mean2), latent.var_z2);
    check_finite("kl_z2", &kl_z2)?;

    let log_norm_mu2 = -0.5 * (LN_2PI + latent.var_mu2.ln());
    let logp_mu2 = Array1::from_shape_fn(b, |r| {
        let row = prior_mean2.row(r);
        let lp: f64 = row
            .iter()
            .map(|&v| log_norm_mu2 - 0.5 * v * v / latent.var_mu2)
            .sum();
        lp / batch.seg_count[r] as f64
    });
    check_finite("logp_mu2", &logp_mu2)?;

    let (disc, softmax) = disc_terms(&z2, table.entries(), &batch.seq_index, latent.var_z2);
    check_finite("disc", &disc)?;

    let bf = b as f64;
    let breakdown = LossBreakdown::compose(
        recon.sum() / bf,
        kl_z1.sum() / bf,
        kl_z2.sum() / bf,
        logp_mu2.sum() / bf,
        disc.sum() / bf,
        alpha,
    );
    let cache = FhvaeCache {
        enc2,
        enc1,
        dec,
        z2,
        noise_z1: noise_z1.clone(),
        noise_z2: noise_z2.clone(),
        x_flat,
        prior_mean2,
        softmax,
        seq_index: batch.seq_index.clone(),
        seg_count: batch.seg_count.clone(),
        alpha,
    };
    Ok((breakdown, cache))
}

/// Analytic gradient of `weight * sum_b total_b` w.r.t. every network
/// parameter and every table row. Pass `weight = 1/B` for the mean bound or
/// `-1/B` for the mean loss. Table gradients are dense: the discriminative
/// softmax touches every row.
pub(crate) fn fhvae_backward(
    params: &ModelParams,
    table: &SVectorTable,
    cache: &FhvaeCache,
    weight: f64,
) -> (GradBuf, Array2<f64>) {
    let latent = params.latent();
    let layout = params.layout();
    let values = params.values();
    let mut grads = params.zero_grads();
    let b = cache.batch_len();
    let d = latent.input_dim;

    // Reconstruction: d/dmean = (x - mean)/var, d/dlogvar = ((x-mean)^2/var - 1)/2.
    let inv_var_x = cache.dec.logvar.mapv(|lv| (-lv).exp());
    let resid = &cache.x_flat - &cache.dec.mean;
    let dmean_x = resid.clone() * &inv_var_x * weight;
    let dlv_x = (resid.mapv(|r| r * r) * &inv_var_x - 1.0) * (0.5 * weight);
    let dz = decoder_backward(&layout.dec, values, &mut grads, &cache.dec, &dmean_x, &dlv_x);
    let dz1_dec = dz.slice(ndarray::s![.., ..latent.dim_z1]).to_owned();
    let dz2_dec = dz.slice(ndarray::s![.., latent.dim_z1..]).to_owned();

    // z1 sample feeds only the decoder; add the z1 KL head terms.
    let dm1 = &dz1_dec + &(cache.enc1.mean.mapv(|m| -m / latent.var_z1) * weight);
    let dlv1 = &dz1_dec * &(cache.enc1.logvar.mapv(|lv| 0.5 * (0.5 * lv).exp()) * &cache.noise_z1)
        + cache
            .enc1
            .logvar
            .mapv(|lv| -0.5 * (lv.exp() / latent.var_z1 - 1.0) * weight);
    let enc1_layout = layout.enc_z1.as_ref().expect("factorized mode has a z1 encoder");
    let dframes1 = encoder_backward(enc1_layout, values, &mut grads, &cache.enc1, &dm1, &dlv1);

    // z2 sample reaches the decoder, every frame of the z1 encoder, and the
    // discriminative softmax.
    let mut dz2 = dz2_dec;
    for df in &dframes1 {
        dz2 = dz2 + df.slice(ndarray::s![.., d..]);
    }
    if cache.alpha > 0.0 {
        let mean_rows = cache.softmax.dot(table.entries());
        let picked = gather_rows(table.entries(), &cache.seq_index);
        dz2 = dz2 + (picked - mean_rows) * (weight * cache.alpha / latent.var_z2);
    }

    // z2 KL pulls the posterior toward the looked-up prior mean.
    let dm2 = &dz2
        + &((&cache.prior_mean2 - &cache.enc2.mean) * (weight / latent.var_z2));
    let dlv2 = &dz2 * &(cache.enc2.logvar.mapv(|lv| 0.5 * (0.5 * lv).exp()) * &cache.noise_z2)
        + cache
            .enc2
            .logvar
            .mapv(|lv| -0.5 * (lv.exp() / latent.var_z2 - 1.0) * weight);
    encoder_backward(&layout.enc_primary, values, &mut grads, &cache.enc2, &dm2, &dlv2);

    // Table gradients.
    let m = table.num_sequences();
    let mut dtable = Array2::zeros((m, table.dim()));
    for r in 0..b {
        let i = cache.seq_index[r];
        let n = cache.seg_count[r] as f64;
        let q_mean = cache.enc2.mean.row(r);
        let row = cache.prior_mean2.row(r);
        let mut dst = dtable.row_mut(i);
        for c in 0..table.dim() {
            // -KL(z2) term and the scaled prior-density term.
            dst[c] += weight
                * ((q_mean[c] - row[c]) / latent.var_z2 - row[c] / (n * latent.var_mu2));
        }
    }
    if cache.alpha > 0.0 {
        let scale = weight * cache.alpha / latent.var_z2;
        // True-row pull toward z2 ...
        for r in 0..b {
            let i = cache.seq_index[r];
            let zr = cache.z2.row(r);
            let row = table.entries().row(i);
            let mut dst = dtable.row_mut(i);
            for c in 0..table.dim() {
                dst[c] += scale * (zr[c] - row[c]);
            }
        }
        // ... minus the softmax-weighted pull on every row.
        let weighted_z = cache.softmax.t().dot(&cache.z2);
        let col_sum = cache.softmax.sum_axis(Axis(0));
        for j in 0..m {
            let row = table.entries().row(j);
            let mut dst = dtable.row_mut(j);
            for c in 0..table.dim() {
                dst[c] -= scale * (weighted_z[(j, c)] - col_sum[j] * row[c]);
            }
        }
    }
    (grads, dtable)
}

/// Everything the backward pass needs from one baseline forward.
pub(crate) struct VaeCache {
    enc: EncCache,
    dec: DecCache,
    noise: Array2<f64>,
    x_flat: Array2<f64>,
}

/// Batched baseline ELBO: recon - KL(q(z|x) || N(0, I)).
pub(crate) fn vae_forward(
    params: &ModelParams,
    data: &ndarray::Array3<f64>,
    noise: &Array2<f64>,
) -> Result<(LossBreakdown, VaeCache)> {
    if params.mode() != ModelMode::Vae {
        return Err(Error::ModeMismatch(
            "baseline objective requires baseline-mode parameters".into(),
        ));
    }
    let latent = params.latent();
    let b = data.shape()[0];
    let (w, d) = (data.shape()[1], data.shape()[2]);
    if w != latent.input_width || d != latent.input_dim {
        return Err(Error::InputContract(format!(
            "batch windows are {w}x{d}, model expects {}x{}",
            latent.input_width, latent.input_dim
        )));
    }
    check_noise(noise, b, latent.dim_z_vae, "z")?;
    let layout = params.layout();
    let values = params.values();
    let enc = encoder_forward(&layout.enc_primary, values, frame_inputs(data, None));
    let z = reparam_rows(&enc.mean, &enc.logvar, noise);
    let dec = decoder_forward(&layout.dec, values, w, z);
    let x_flat = flatten_windows(data);
    let recon = log_prob_rows(&x_flat, &dec.mean, &dec.logvar);
    check_finite("recon", &recon)?;
    let kl = kl_rows_isotropic(&enc.mean, &enc.logvar, None, 1.0);
    check_finite("kl_z", &kl)?;
    let bf = b as f64;
    let breakdown =
        LossBreakdown::compose(recon.sum() / bf, kl.sum() / bf, 0.0, 0.0, 0.0, 0.0);
    Ok((
        breakdown,
        VaeCache {
            enc,
            dec,
            noise: noise.clone(),
            x_flat,
        },
    ))
}

/// Analytic gradient of `weight * sum_b elbo_b` for the baseline.
pub(crate) fn vae_backward(params: &ModelParams, cache: &VaeCache, weight: f64) -> GradBuf {
    let layout = params.layout();
    let values = params.values();
    let mut grads = params.zero_grads();
    let inv_var_x = cache.dec.logvar.mapv(|lv| (-lv).exp());
    let resid = &cache.x_flat - &cache.dec.mean;
    let dmean_x = resid.clone() * &inv_var_x * weight;
    let dlv_x = (resid.mapv(|r| r * r) * &inv_var_x - 1.0) * (0.5 * weight);
    let dz = decoder_backward(&layout.dec, values, &mut grads, &cache.dec, &dmean_x, &dlv_x);
    let dm = &dz + &(cache.enc.mean.mapv(|m| -m) * weight);
    let dlv = &dz * &(cache.enc.logvar.mapv(|lv| 0.5 * (0.5 * lv).exp()) * &cache.noise)
        + cache.enc.logvar.mapv(|lv| -0.5 * (lv.exp() - 1.0) * weight);
    encoder_backward(&layout.enc_primary, values, &mut grads, &cache.enc, &dm, &dlv);
    grads
}

fn single_batch(
    x: &Array2<f64>,
    i: usize,
    seg_count: usize,
    table_rows: usize,
) -> Result<SegmentBatch> {
    let data = x.to_owned().insert_axis(Axis(0));
    SegmentBatch::new(data, vec![i], vec![seg_count], table_rows)
}

fn noise_row(noise: &Array1<f64>, dim: usize, what: &'static str) -> Result<Array2<f64>> {
    if noise.len() != dim {
        return Err(Error::InputContract(format!(
            "{what} noise has length {}, expected {dim}",
            noise.len()
        )));
    }
    Ok(noise.to_owned().insert_axis(Axis(0)))
}

/// Single-window segment variational lower bound for sequence `i`:
/// `recon - KL(q(z1)||p(z1)) - KL(q(z2)||p(z2|mu2_i)) + (1/N) log p(mu2_i)`
/// with one reparameterized draw per latent. `seg_count` is the N in the
/// scaled prior term. The returned breakdown zeroes `disc` and `alpha`.
pub fn segment_lower_bound(
    x: &Array2<f64>,
    i: usize,
    params: &ModelParams,
    table: &SVectorTable,
    noise_z1: &Array1<f64>,
    noise_z2: &Array1<f64>,
    seg_count: usize,
) -> Result<LossBreakdown> {
    let latent = params.latent();
    let batch = single_batch(x, i, seg_count, table.num_sequences())?;
    let n1 = noise_row(noise_z1, latent.dim_z1, "z1")?;
    let n2 = noise_row(noise_z2, latent.dim_z2, "z2")?;
    let (b, _) = fhvae_forward(params, table, &batch, &n1, &n2, 0.0)?;
    Ok(LossBreakdown::compose(
        b.recon,
        b.kl_z1,
        b.kl_z2,
        b.logp_mu2_scaled,
        0.0,
        0.0,
    ))
}

/// Log-posterior of sequence `i` for a z2 vector: the log-softmax over
/// per-row Gaussian densities `N(z2; row_j, var_z2 I)`, stabilized by max
/// subtraction. Always <= 0; exactly 0 when the table has a single row.
pub fn discriminative_logprob(
    z2: &Array1<f64>,
    i: usize,
    table: &SVectorTable,
    latent: &LatentConfig,
) -> Result<f64> {
    if table.num_sequences() == 0 {
        return Err(Error::InputContract("empty s-vector table".into()));
    }
    if i >= table.num_sequences() {
        return Err(Error::InputContract(format!(
            "sequence index {i} out of range for table of {} rows",
            table.num_sequences()
        )));
    }
    if z2.len() != table.dim() {
        return Err(Error::InputContract(format!(
            "z2 has length {}, table rows have {}",
            z2.len(),
            table.dim()
        )));
    }
    let z = z2.to_owned().insert_axis(Axis(0));
    let (disc, _) = disc_terms(&z, table.entries(), &[i], latent.var_z2);
    Ok(disc[0])
}

/// Discriminative segment lower bound: the segment bound plus
/// `alpha * log p(i|z2)` evaluated at the same z2 sample.
#[allow(clippy::too_many_arguments)]
pub fn dis_lower_bound(
    x: &Array2<f64>,
    i: usize,
    params: &ModelParams,
    table: &SVectorTable,
    alpha: f64,
    noise_z1: &Array1<f64>,
    noise_z2: &Array1<f64>,
    seg_count: usize,
) -> Result<LossBreakdown> {
    let latent = params.latent();
    let batch = single_batch(x, i, seg_count, table.num_sequences())?;
    let n1 = noise_row(noise_z1, latent.dim_z1, "z1")?;
    let n2 = noise_row(noise_z2, latent.dim_z2, "z2")?;
    let (b, _) = fhvae_forward(params, table, &batch, &n1, &n2, alpha)?;
    Ok(b)
}

/// Batched discriminative bound: per-term means over a segment batch under
/// explicit reparameterization noise (one row per window). This is exactly
/// what one training step evaluates before its update.
pub fn batch_dis_bound(
    params: &ModelParams,
    table: &SVectorTable,
    batch: &SegmentBatch,
    noise_z1: &Array2<f64>,
    noise_z2: &Array2<f64>,
    alpha: f64,
) -> Result<LossBreakdown> {
    fhvae_forward(params, table, batch, noise_z1, noise_z2, alpha).map(|(b, _)| b)
}

/// Gradient of `weight * sum over the batch of per-window totals` with
/// respect to the flat parameter vector and, densely, every table row.
/// Exposed for external optimizers and numeric verification.
#[allow(clippy::too_many_arguments)]
pub fn batch_dis_bound_gradients(
    params: &ModelParams,
    table: &SVectorTable,
    batch: &SegmentBatch,
    noise_z1: &Array2<f64>,
    noise_z2: &Array2<f64>,
    alpha: f64,
    weight: f64,
) -> Result<(GradBuf, Array2<f64>)> {
    let (_, cache) = fhvae_forward(params, table, batch, noise_z1, noise_z2, alpha)?;
    Ok(fhvae_backward(params, table, &cache, weight))
}

/// Batched baseline bound: per-term means of the single-latent ELBO over a
/// B x W x D window tensor under explicit noise.
pub fn batch_vae_bound(
    params: &ModelParams,
    data: &ndarray::Array3<f64>,
    noise: &Array2<f64>,
) -> Result<LossBreakdown> {
    vae_forward(params, data, noise).map(|(b, _)| b)
}

/// Gradient of `weight * sum over the batch of per-window ELBOs` with
/// respect to the flat parameter vector.
pub fn batch_vae_bound_gradients(
    params: &ModelParams,
    data: &ndarray::Array3<f64>,
    noise: &Array2<f64>,
    weight: f64,
) -> Result<GradBuf> {
    let (_, cache) = vae_forward(params, data, noise)?;
    Ok(vae_backward(params, &cache, weight))
}

/// Single-window baseline ELBO: `recon - KL(q(z|x) || N(0, I))`. The
/// breakdown's `kl_z2`, `logp_mu2_scaled`, and `disc` are zero.
pub fn vae_elbo(x: &Array2<f64>, params: &ModelParams, noise: &Array1<f64>) -> Result<LossBreakdown> {
    let latent = params.latent();
    let data = x.to_owned().insert_axis(Axis(0));
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputContract("non-finite window values".into()));
    }
    let n = noise_row(noise, latent.dim_z_vae, "z")?;
    let (b, _) = vae_forward(params, &data, &n)?;
    Ok(b)
}
