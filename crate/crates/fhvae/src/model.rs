//! Model parameters and forward passes: the two factorized encoders, the
//! decoder, the s-vector table, and the single-latent baseline encoder.
//!
//! All parameters of a model live in one flat `f64` vector; layout structs
//! carry (offset, shape) views into it. The same layout drives the analytic
//! backward passes in the objective module, so every tensor here has a
//! mirrored gradient slot in [`GradBuf`].
//!
//! Wiring: the z2 encoder reads the raw frame window; the z1 encoder reads
//! the window with z2 appended to every frame; the decoder maps [z1, z2]
//! (or the single latent in baseline mode) through a per-layer init layer
//! into the initial hidden state and then unrolls autonomously, emitting a
//! frame mean and log-variance at every step. Feedforward bodies flatten
//! the same per-frame inputs instead of scanning them.

use crate::config::{ArchDescriptor, CellKind, LatentConfig, ModelMode};
use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, LOGVAR_MAX, LOGVAR_MIN};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::distr::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;

/// Scale of the uniform weight initialization.
const INIT_SCALE: f64 = 0.05;

/// A contiguous (rows x cols) slab inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TensorSpec {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl TensorSpec {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub(crate) fn view<'a>(&self, values: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape(
            (self.rows, self.cols),
            &values[self.offset..self.offset + self.len()],
        )
        .expect("tensor spec matches slice length")
    }

    pub(crate) fn view_mut<'a>(&self, values: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape(
            (self.rows, self.cols),
            &mut values[self.offset..self.offset + self.len()],
        )
        .expect("tensor spec matches slice length")
    }

    /// Bias view: a 1 x cols spec seen as a vector.
    pub(crate) fn row<'a>(&self, values: &'a [f64]) -> ArrayView1<'a, f64> {
        debug_assert_eq!(self.rows, 1);
        ArrayView1::from_shape(self.cols, &values[self.offset..self.offset + self.cols])
            .expect("bias spec matches slice length")
    }
}

/// Affine layer: `y = x W + b` with W of shape in_dim x out_dim.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseLayout {
    pub w: TensorSpec,
    pub b: TensorSpec,
}

/// Recurrent layer: `h_t = tanh(x_t W_in + h_{t-1} W_rec + b)`. Layers with
/// `in_dim = 0` are autonomous (no input term); the decoder's bottom layer
/// uses this.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RnnLayout {
    pub w_in: TensorSpec,
    pub w_rec: TensorSpec,
    pub b: TensorSpec,
    pub in_dim: usize,
    pub units: usize,
}

#[derive(Debug, Clone)]
pub(crate) enum BodyLayout {
    Feedforward(Vec<DenseLayout>),
    Recurrent(Vec<RnnLayout>),
}

/// Sequence-in, vectors-out network: body plus mean/logvar heads read from
/// the final hidden state.
#[derive(Debug, Clone)]
pub(crate) struct EncoderLayout {
    pub body: BodyLayout,
    pub mean: DenseLayout,
    pub logvar: DenseLayout,
    /// Per-frame input width (recurrent) / flatten unit (feedforward).
    pub frame_dim: usize,
}

/// Latent-in, sequence-out network. Recurrent bodies get their initial
/// hidden state from `init` (one tanh layer per recurrent layer) and apply
/// the heads at every step; feedforward bodies emit the whole W·D window
/// from single heads.
#[derive(Debug, Clone)]
pub(crate) struct DecoderLayout {
    pub body: BodyLayout,
    pub init: Vec<DenseLayout>,
    pub mean: DenseLayout,
    pub logvar: DenseLayout,
    pub latent_dim: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct ModelLayout {
    /// q(z2|x) in factorized mode; q(z|x) in baseline mode.
    pub enc_primary: EncoderLayout,
    /// q(z1|x,z2); absent in baseline mode.
    pub enc_z1: Option<EncoderLayout>,
    pub dec: DecoderLayout,
    pub n_params: usize,
}

struct Alloc {
    next: usize,
    matrices: Vec<TensorSpec>,
}

impl Alloc {
    fn new() -> Self {
        Alloc {
            next: 0,
            matrices: Vec::new(),
        }
    }

    fn tensor(&mut self, rows: usize, cols: usize, is_matrix: bool) -> TensorSpec {
        let spec = TensorSpec {
            offset: self.next,
            rows,
            cols,
        };
        self.next += spec.len();
        if is_matrix && spec.len() > 0 {
            self.matrices.push(spec);
        }
        spec
    }

    fn dense(&mut self, in_dim: usize, out_dim: usize) -> DenseLayout {
        DenseLayout {
            w: self.tensor(in_dim, out_dim, true),
            b: self.tensor(1, out_dim, false),
        }
    }

    fn rnn(&mut self, in_dim: usize, units: usize) -> RnnLayout {
        RnnLayout {
            w_in: self.tensor(in_dim, units, true),
            w_rec: self.tensor(units, units, true),
            b: self.tensor(1, units, false),
            in_dim,
            units,
        }
    }

    fn encoder(&mut self, arch: &ArchDescriptor, frame_dim: usize, w: usize, out_dim: usize) -> EncoderLayout {
        let body = match arch.cell {
            CellKind::Feedforward => {
                let mut layers = Vec::new();
                let mut d = frame_dim * w;
                for _ in 0..arch.layers {
                    layers.push(self.dense(d, arch.units));
                    d = arch.units;
                }
                BodyLayout::Feedforward(layers)
            }
            CellKind::Recurrent => {
                let mut layers = Vec::new();
                let mut d = frame_dim;
                for _ in 0..arch.layers {
                    layers.push(self.rnn(d, arch.units));
                    d = arch.units;
                }
                BodyLayout::Recurrent(layers)
            }
        };
        EncoderLayout {
            body,
            mean: self.dense(arch.units, out_dim),
            logvar: self.dense(arch.units, out_dim),
            frame_dim,
        }
    }

    fn decoder(&mut self, arch: &ArchDescriptor, latent_dim: usize, w: usize, d: usize) -> DecoderLayout {
        match arch.cell {
            CellKind::Feedforward => {
                let mut layers = Vec::new();
                let mut cur = latent_dim;
                for _ in 0..arch.layers {
                    layers.push(self.dense(cur, arch.units));
                    cur = arch.units;
                }
                DecoderLayout {
                    body: BodyLayout::Feedforward(layers),
                    init: Vec::new(),
                    mean: self.dense(arch.units, w * d),
                    logvar: self.dense(arch.units, w * d),
                    latent_dim,
                }
            }
            CellKind::Recurrent => {
                let init = (0..arch.layers).map(|_| self.dense(latent_dim, arch.units)).collect();
                let mut layers = Vec::new();
                for l in 0..arch.layers {
                    let in_dim = if l == 0 { 0 } else { arch.units };
                    layers.push(self.rnn(in_dim, arch.units));
                }
                DecoderLayout {
                    body: BodyLayout::Recurrent(layers),
                    init,
                    mean: self.dense(arch.units, d),
                    logvar: self.dense(arch.units, d),
                    latent_dim,
                }
            }
        }
    }
}

fn build_layout(mode: ModelMode, arch: &ArchDescriptor, latent: &LatentConfig) -> (ModelLayout, Vec<TensorSpec>) {
    let mut alloc = Alloc::new();
    let (enc_primary, enc_z1, dec_latent) = match mode {
        ModelMode::Fhvae => {
            let enc_z2 = alloc.encoder(arch, latent.input_dim, latent.input_width, latent.dim_z2);
            let enc_z1 = alloc.encoder(
                arch,
                latent.input_dim + latent.dim_z2,
                latent.input_width,
                latent.dim_z1,
            );
            (enc_z2, Some(enc_z1), latent.dim_z1 + latent.dim_z2)
        }
        ModelMode::Vae => {
            let enc = alloc.encoder(arch, latent.input_dim, latent.input_width, latent.dim_z_vae);
            (enc, None, latent.dim_z_vae)
        }
    };
    let dec = alloc.decoder(arch, dec_latent, latent.input_width, latent.input_dim);
    let layout = ModelLayout {
        enc_primary,
        enc_z1,
        dec,
        n_params: alloc.next,
    };
    (layout, alloc.matrices)
}

/// All trainable network parameters plus the descriptors that fix their
/// layout. The s-vector table is held separately (see [`SVectorTable`]).
#[derive(Debug, Clone)]
pub struct ModelParams {
    mode: ModelMode,
    arch: ArchDescriptor,
    latent: LatentConfig,
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ModelParams {
    /// Allocate and initialize parameters: weight matrices uniform in
    /// [-0.05, 0.05] from the seeded generator, biases zero.
    pub fn new(mode: ModelMode, arch: &ArchDescriptor, latent: &LatentConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        latent.validate()?;
        let (layout, matrices) = build_layout(mode, arch, latent);
        let mut values = vec![0.0; layout.n_params];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_SCALE, INIT_SCALE)
            .expect("constant uniform bounds are valid");
        for m in &matrices {
            for v in &mut values[m.offset..m.offset + m.len()] {
                *v = rng.sample(dist);
            }
        }
        Ok(ModelParams {
            mode,
            arch: arch.clone(),
            latent: latent.clone(),
            layout,
            values,
        })
    }

    /// Rebuild from persisted pieces; `values` must match the layout size.
    pub(crate) fn from_values(
        mode: ModelMode,
        arch: &ArchDescriptor,
        latent: &LatentConfig,
        values: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        latent.validate()?;
        let (layout, _) = build_layout(mode, arch, latent);
        if values.len() != layout.n_params {
            return Err(Error::InputContract(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                layout.n_params
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputContract("non-finite parameter values".into()));
        }
        Ok(ModelParams {
            mode,
            arch: arch.clone(),
            latent: latent.clone(),
            layout,
            values,
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.mode
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn latent(&self) -> &LatentConfig {
        &self.latent
    }

    pub fn num_params(&self) -> usize {
        self.layout.n_params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    /// Fresh zeroed gradient buffer matching this parameter vector.
    pub fn zero_grads(&self) -> GradBuf {
        GradBuf {
            values: vec![0.0; self.layout.n_params],
        }
    }

    /// Set every parameter to zero (test helper for the affine-zero contracts).
    pub fn zero_all(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn require_mode(&self, mode: ModelMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch(format!(
                "operation requires {mode} parameters, model is {}",
                self.mode
            )));
        }
        Ok(())
    }

    /// Dimension of the decoder's latent input.
    pub fn decoder_latent_dim(&self) -> usize {
        self.layout.dec.latent_dim
    }
}

/// Gradient accumulator, laid out identically to the parameter vector.
#[derive(Debug, Clone)]
pub struct GradBuf {
    pub(crate) values: Vec<f64>,
}

impl GradBuf {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Trainable per-sequence posterior means of mu2, one row per training
/// sequence, with the id index that maps external sequence ids to rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SVectorTable {
    entries: Array2<f64>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl SVectorTable {
    /// Zero-initialized table (rows start at the prior mean).
    pub fn new(ids: Vec<String>, dim_z2: usize) -> Result<Self> {
        if dim_z2 == 0 {
            return Err(Error::InputContract("s-vector dimension must be >= 1".into()));
        }
        let mut index = HashMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InputContract(format!("duplicate sequence id '{id}'")));
            }
        }
        Ok(SVectorTable {
            entries: Array2::zeros((ids.len(), dim_z2)),
            ids,
            index,
        })
    }

    pub fn from_entries(ids: Vec<String>, entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() != ids.len() {
            return Err(Error::InputContract(format!(
                "{} table rows for {} sequence ids",
                entries.nrows(),
                ids.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputContract("non-finite s-vector entries".into()));
        }
        let mut table = SVectorTable::new(ids, entries.ncols().max(1))?;
        table.entries = entries;
        Ok(table)
    }

    pub fn num_sequences(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row_of_id(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Array2<f64> {
        &mut self.entries
    }

    /// Row i = the trained posterior mean for sequence i.
    pub fn lookup_mu2(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        if i >= self.entries.nrows() {
            return Err(Error::InputContract(format!(
                "sequence index {i} out of range for table of {} rows",
                self.entries.nrows()
            )));
        }
        Ok(self.entries.row(i))
    }
}

/// One minibatch of frame windows with their sequence assignments.
#[derive(Debug, Clone)]
pub struct SegmentBatch {
    /// B x W x D window tensor.
    pub data: Array3<f64>,
    /// Table row per window.
    pub seq_index: Vec<usize>,
    /// Scheduled segment count N of that window's sequence this epoch.
    pub seg_count: Vec<usize>,
}

impl SegmentBatch {
    pub fn new(
        data: Array3<f64>,
        seq_index: Vec<usize>,
        seg_count: Vec<usize>,
        table_rows: usize,
    ) -> Result<Self> {
        let b = data.shape()[0];
        if b == 0 {
            return Err(Error::InputContract("empty segment batch".into()));
        }
        if seq_index.len() != b || seg_count.len() != b {
            return Err(Error::InputContract(format!(
                "batch of {b} windows with {} indices and {} counts",
                seq_index.len(),
                seg_count.len()
            )));
        }
        if let Some(&bad) = seq_index.iter().find(|&&i| i >= table_rows) {
            return Err(Error::InputContract(format!(
                "sequence index {bad} out of range for table of {table_rows} rows"
            )));
        }
        if seg_count.iter().any(|&n| n == 0) {
            return Err(Error::InputContract("zero segment count in batch".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputContract("non-finite window data".into()));
        }
        Ok(SegmentBatch {
            data,
            seq_index,
            seg_count,
        })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Batched forward passes with caches for the analytic backward passes.
// ---------------------------------------------------------------------------

fn affine(x: &Array2<f64>, layer: &DenseLayout, values: &[f64]) -> Array2<f64> {
    x.dot(&layer.w.view(values)) + layer.b.row(values)
}

fn clamp_logvar(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
}

/// Derivative mask of the logvar clamp (zero where saturated).
fn clamp_mask(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(|v| if v > LOGVAR_MIN && v < LOGVAR_MAX { 1.0 } else { 0.0 })
}

#[derive(Debug)]
pub(crate) struct EncCache {
    /// Per-frame inputs, W entries of B x frame_dim (as the body consumed them).
    frames: Vec<Array2<f64>>,
    /// Feedforward: flattened input and per-layer activations.
    flat: Option<Array2<f64>>,
    ff_acts: Vec<Array2<f64>>,
    /// Recurrent: hidden states per layer per step, B x units.
    rnn_h: Vec<Vec<Array2<f64>>>,
    pub mean: Array2<f64>,
    logvar_raw: Array2<f64>,
    pub logvar: Array2<f64>,
}

fn concat_cols(parts: &[&Array2<f64>]) -> Array2<f64> {
    let b = parts[0].nrows();
    let total: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((b, total));
    let mut at = 0;
    for p in parts {
        out.slice_mut(ndarray::s![.., at..at + p.ncols()]).assign(p);
        at += p.ncols();
    }
    out
}

/// Assemble per-frame encoder inputs from the window tensor, appending
/// `aug` (for example a z2 sample) to every frame when provided.
pub(crate) fn frame_inputs(data: &Array3<f64>, aug: Option<&Array2<f64>>) -> Vec<Array2<f64>> {
    let w = data.shape()[1];
    (0..w)
        .map(|t| {
            let xt = data.index_axis(Axis(1), t).to_owned();
            match aug {
                Some(a) => concat_cols(&[&xt, a]),
                None => xt,
            }
        })
        .collect()
}

pub(crate) fn encoder_forward(
    enc: &EncoderLayout,
    values: &[f64],
    frames: Vec<Array2<f64>>,
) -> EncCache {
    let b = frames[0].nrows();
    let mut flat = None;
    let mut ff_acts = Vec::new();
    let mut rnn_h = Vec::new();
    let body_out: Array2<f64>;
    match &enc.body {
        BodyLayout::Feedforward(layers) => {
            let refs: Vec<&Array2<f64>> = frames.iter().collect();
            let x = concat_cols(&refs);
            let mut cur = x.clone();
            for layer in layers {
                cur = affine(&cur, layer, values).mapv(f64::tanh);
                ff_acts.push(cur.clone());
            }
            flat = Some(x);
            body_out = cur;
        }
        BodyLayout::Recurrent(layers) => {
            let w = frames.len();
            let mut below: Vec<Array2<f64>> = frames.clone();
            for layer in layers {
                let mut h_prev = Array2::zeros((b, layer.units));
                let mut hs = Vec::with_capacity(w);
                for xt in below.iter().take(w) {
                    let mut u = h_prev.dot(&layer.w_rec.view(values)) + layer.b.row(values);
                    if layer.in_dim > 0 {
                        u = u + xt.dot(&layer.w_in.view(values));
                    }
                    let h = u.mapv(f64::tanh);
                    hs.push(h.clone());
                    h_prev = h;
                }
                below = hs.clone();
                rnn_h.push(hs);
            }
            body_out = rnn_h.last().expect("at least one layer")[w - 1].clone();
        }
    }
    let mean = affine(&body_out, &enc.mean, values);
    let logvar_raw = affine(&body_out, &enc.logvar, values);
    let logvar = clamp_logvar(&logvar_raw);
    EncCache {
        frames,
        flat,
        ff_acts,
        rnn_h,
        mean,
        logvar_raw,
        logvar,
    }
}

/// Backward through an encoder. `dmean`/`dlogvar` are gradients w.r.t. the
/// (clamped) outputs; returns the gradient w.r.t. the per-frame inputs.
pub(crate) fn encoder_backward(
    enc: &EncoderLayout,
    values: &[f64],
    grads: &mut GradBuf,
    cache: &EncCache,
    dmean: &Array2<f64>,
    dlogvar: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let dlv_raw = dlogvar * clamp_mask(&cache.logvar_raw);
    let body_out = match &enc.body {
        BodyLayout::Feedforward(_) => cache
            .ff_acts
            .last()
            .cloned()
            .unwrap_or_else(|| cache.flat.clone().expect("feedforward cache has input")),
        BodyLayout::Recurrent(_) => {
            let hs = cache.rnn_h.last().expect("at least one layer");
            hs[hs.len() - 1].clone()
        }
    };
    let mut dbody = dense_backward(&enc.mean, values, grads, &body_out, dmean);
    dbody = dbody + dense_backward(&enc.logvar, values, grads, &body_out, &dlv_raw);

    match &enc.body {
        BodyLayout::Feedforward(layers) => {
            let mut dact = dbody;
            for (l, layer) in layers.iter().enumerate().rev() {
                let act = &cache.ff_acts[l];
                let du = &dact * &act.mapv(|a| 1.0 - a * a);
                let input = if l == 0 {
                    cache.flat.as_ref().expect("feedforward cache has input")
                } else {
                    &cache.ff_acts[l - 1]
                };
                dact = dense_backward(layer, values, grads, input, &du);
            }
            // Split the flat gradient back into per-frame slices.
            let w = cache.frames.len();
            let fd = enc.frame_dim;
            (0..w)
                .map(|t| dact.slice(ndarray::s![.., t * fd..(t + 1) * fd]).to_owned())
                .collect()
        }
        BodyLayout::Recurrent(layers) => {
            let w = cache.frames.len();
            let b = cache.frames[0].nrows();
            // Gradient reaches the top layer only at the final step.
            let mut dh_seq: Vec<Array2<f64>> = (0..w)
                .map(|t| {
                    if t == w - 1 {
                        dbody.clone()
                    } else {
                        Array2::zeros((b, layers.last().expect("nonempty").units))
                    }
                })
                .collect();
            for (l, layer) in layers.iter().enumerate().rev() {
                let hs = &cache.rnn_h[l];
                let inputs: &[Array2<f64>] = if l == 0 {
                    &cache.frames
                } else {
                    &cache.rnn_h[l - 1]
                };
                let (dx_seq, _dh0) =
                    rnn_backward(layer, values, grads, inputs, hs, &mut dh_seq, None);
                dh_seq = dx_seq;
            }
            dh_seq
        }
    }
}

/// Dense backward where the upstream gradient is w.r.t. the affine output.
fn dense_backward(
    layer: &DenseLayout,
    values: &[f64],
    grads: &mut GradBuf,
    input: &Array2<f64>,
    dout: &Array2<f64>,
) -> Array2<f64> {
    {
        let mut dw = layer.w.view_mut(&mut grads.values);
        dw += &input.t().dot(dout);
    }
    {
        let mut db = layer.b.view_mut(&mut grads.values);
        db += &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    dout.dot(&layer.w.view(values).t())
}

/// BPTT through one recurrent layer. `dh_seq[t]` holds the gradient
/// arriving at h_t from above and is consumed; returns the gradients
/// w.r.t. the layer inputs and, when `dh0_wanted`, w.r.t. the initial
/// hidden state.
fn rnn_backward(
    layer: &RnnLayout,
    values: &[f64],
    grads: &mut GradBuf,
    inputs: &[Array2<f64>],
    hs: &[Array2<f64>],
    dh_seq: &mut [Array2<f64>],
    h0: Option<&Array2<f64>>,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let w = hs.len();
    let b = hs[0].nrows();
    let mut dx_seq: Vec<Array2<f64>> = (0..w).map(|_| Array2::zeros((b, layer.in_dim))).collect();
    let mut carry: Array2<f64> = Array2::zeros((b, layer.units));
    for t in (0..w).rev() {
        let dh = &dh_seq[t] + &carry;
        let du = &dh * &hs[t].mapv(|a| 1.0 - a * a);
        let h_prev: &Array2<f64> = if t == 0 {
            match h0 {
                Some(h) => h,
                None => {
                    // Zero initial state: recurrent weight sees no signal.
                    carry = du.dot(&layer.w_rec.view(values).t());
                    if layer.in_dim > 0 {
                        {
                            let mut dwin = layer.w_in.view_mut(&mut grads.values);
                            dwin += &inputs[t].t().dot(&du);
                        }
                        dx_seq[t] = du.dot(&layer.w_in.view(values).t());
                    }
                    let mut db = layer.b.view_mut(&mut grads.values);
                    db += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
                    continue;
                }
            }
        } else {
            &hs[t - 1]
        };
        {
            let mut dwrec = layer.w_rec.view_mut(&mut grads.values);
            dwrec += &h_prev.t().dot(&du);
        }
        if layer.in_dim > 0 {
            {
                let mut dwin = layer.w_in.view_mut(&mut grads.values);
                dwin += &inputs[t].t().dot(&du);
            }
            dx_seq[t] = du.dot(&layer.w_in.view(values).t());
        }
        {
            let mut db = layer.b.view_mut(&mut grads.values);
            db += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        carry = du.dot(&layer.w_rec.view(values).t());
    }
    (dx_seq, carry)
}

#[derive(Debug)]
pub(crate) struct DecCache {
    z: Array2<f64>,
    ff_acts: Vec<Array2<f64>>,
    /// Recurrent: per-layer initial states (tanh outputs of the init layers).
    h0: Vec<Array2<f64>>,
    rnn_h: Vec<Vec<Array2<f64>>>,
    /// B x (W·D) outputs, frame-major.
    pub mean: Array2<f64>,
    logvar_raw: Array2<f64>,
    pub logvar: Array2<f64>,
}

pub(crate) fn decoder_forward(
    dec: &DecoderLayout,
    values: &[f64],
    w: usize,
    z: Array2<f64>,
) -> DecCache {
    let b = z.nrows();
    match &dec.body {
        BodyLayout::Feedforward(layers) => {
            let mut ff_acts = Vec::new();
            let mut cur = z.clone();
            for layer in layers {
                cur = affine(&cur, layer, values).mapv(f64::tanh);
                ff_acts.push(cur.clone());
            }
            let mean = affine(&cur, &dec.mean, values);
            let logvar_raw = affine(&cur, &dec.logvar, values);
            let logvar = clamp_logvar(&logvar_raw);
            DecCache {
                z,
                ff_acts,
                h0: Vec::new(),
                rnn_h: Vec::new(),
                mean,
                logvar_raw,
                logvar,
            }
        }
        BodyLayout::Recurrent(layers) => {
            let h0: Vec<Array2<f64>> = dec
                .init
                .iter()
                .map(|layer| affine(&z, layer, values).mapv(f64::tanh))
                .collect();
            let mut rnn_h: Vec<Vec<Array2<f64>>> = Vec::with_capacity(layers.len());
            for (l, layer) in layers.iter().enumerate() {
                let mut h_prev = h0[l].clone();
                let mut hs = Vec::with_capacity(w);
                for t in 0..w {
                    let mut u = h_prev.dot(&layer.w_rec.view(values)) + layer.b.row(values);
                    if layer.in_dim > 0 {
                        u = u + rnn_h[l - 1][t].dot(&layer.w_in.view(values));
                    }
                    let h = u.mapv(f64::tanh);
                    hs.push(h.clone());
                    h_prev = h;
                }
                rnn_h.push(hs);
            }
            let top = rnn_h.last().expect("at least one layer");
            let d = dec.mean.w.cols;
            let mut mean = Array2::zeros((b, w * d));
            let mut logvar_raw = Array2::zeros((b, w * d));
            for (t, h) in top.iter().enumerate() {
                mean.slice_mut(ndarray::s![.., t * d..(t + 1) * d])
                    .assign(&affine(h, &dec.mean, values));
                logvar_raw
                    .slice_mut(ndarray::s![.., t * d..(t + 1) * d])
                    .assign(&affine(h, &dec.logvar, values));
            }
            let logvar = clamp_logvar(&logvar_raw);
            DecCache {
                z,
                ff_acts: Vec::new(),
                h0,
                rnn_h,
                mean,
                logvar_raw,
                logvar,
            }
        }
    }
}

/// Backward through the decoder; returns the gradient w.r.t. the latent z.
pub(crate) fn decoder_backward(
    dec: &DecoderLayout,
    values: &[f64],
    grads: &mut GradBuf,
    cache: &DecCache,
    dmean: &Array2<f64>,
    dlogvar: &Array2<f64>,
) -> Array2<f64> {
    let dlv_raw = dlogvar * clamp_mask(&cache.logvar_raw);
    match &dec.body {
        BodyLayout::Feedforward(layers) => {
            let body_out = cache
                .ff_acts
                .last()
                .cloned()
                .unwrap_or_else(|| cache.z.clone());
            let mut dact = dense_backward(&dec.mean, values, grads, &body_out, dmean);
            dact = dact + dense_backward(&dec.logvar, values, grads, &body_out, &dlv_raw);
            for (l, layer) in layers.iter().enumerate().rev() {
                let act = &cache.ff_acts[l];
                let du = &dact * &act.mapv(|a| 1.0 - a * a);
                let input = if l == 0 { &cache.z } else { &cache.ff_acts[l - 1] };
                dact = dense_backward(layer, values, grads, input, &du);
            }
            dact
        }
        BodyLayout::Recurrent(layers) => {
            let top = cache.rnn_h.last().expect("at least one layer");
            let w = top.len();
            let d = dec.mean.w.cols;
            let mut dh_seq: Vec<Array2<f64>> = Vec::with_capacity(w);
            for (t, h) in top.iter().enumerate() {
                let dm_t = dmean.slice(ndarray::s![.., t * d..(t + 1) * d]).to_owned();
                let dl_t = dlv_raw.slice(ndarray::s![.., t * d..(t + 1) * d]).to_owned();
                let mut dh = dense_backward(&dec.mean, values, grads, h, &dm_t);
                dh = dh + dense_backward(&dec.logvar, values, grads, h, &dl_t);
                dh_seq.push(dh);
            }
            let mut dz = Array2::zeros((cache.z.nrows(), dec.latent_dim));
            for (l, layer) in layers.iter().enumerate().rev() {
                let hs = &cache.rnn_h[l];
                let empty: Vec<Array2<f64>> = Vec::new();
                let inputs: &[Array2<f64>] = if l == 0 { &empty } else { &cache.rnn_h[l - 1] };
                let (dx_seq, dh0) = rnn_backward(
                    layer,
                    values,
                    grads,
                    inputs,
                    hs,
                    &mut dh_seq,
                    Some(&cache.h0[l]),
                );
                // Initial state came from the init layer on z.
                let du0 = &dh0 * &cache.h0[l].mapv(|a| 1.0 - a * a);
                dz = dz + dense_backward(&dec.init[l], values, grads, &cache.z, &du0);
                dh_seq = dx_seq;
            }
            dz
        }
    }
}

// ---------------------------------------------------------------------------
// Public single-window operations.
// ---------------------------------------------------------------------------

fn check_window(x: &Array2<f64>, latent: &LatentConfig) -> Result<()> {
    if x.nrows() != latent.input_width || x.ncols() != latent.input_dim {
        return Err(Error::InputContract(format!(
            "window shape {}x{}, expected {}x{}",
            x.nrows(),
            x.ncols(),
            latent.input_width,
            latent.input_dim
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InputContract("non-finite window values".into()));
    }
    Ok(())
}

fn check_vec(v: &ArrayView1<f64>, dim: usize, what: &str) -> Result<()> {
    if v.len() != dim {
        return Err(Error::InputContract(format!(
            "{what} has length {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InputContract(format!("non-finite {what}")));
    }
    Ok(())
}

fn window_batch(x: &Array2<f64>) -> Array3<f64> {
    x.to_owned().insert_axis(Axis(0))
}

fn cache_to_gaussian(mean: &Array2<f64>, logvar: &Array2<f64>) -> DiagGaussian {
    DiagGaussian::new(mean.row(0).to_owned(), logvar.row(0).to_owned())
        .expect("forward outputs are finite and clamped")
}

/// q(z2 | x): sequence-level posterior for one window.
pub fn encode_z2(x: &Array2<f64>, params: &ModelParams) -> Result<DiagGaussian> {
    params.require_mode(ModelMode::Fhvae)?;
    check_window(x, &params.latent)?;
    let frames = frame_inputs(&window_batch(x), None);
    let cache = encoder_forward(&params.layout.enc_primary, &params.values, frames);
    Ok(cache_to_gaussian(&cache.mean, &cache.logvar))
}

/// q(z1 | x, z2): segment-level posterior given a z2 vector.
pub fn encode_z1(x: &Array2<f64>, z2: &Array1<f64>, params: &ModelParams) -> Result<DiagGaussian> {
    params.require_mode(ModelMode::Fhvae)?;
    check_window(x, &params.latent)?;
    check_vec(&z2.view(), params.latent.dim_z2, "z2")?;
    let z2b = z2.to_owned().insert_axis(Axis(0));
    let frames = frame_inputs(&window_batch(x), Some(&z2b));
    let enc = params.layout.enc_z1.as_ref().expect("factorized mode has a z1 encoder");
    let cache = encoder_forward(enc, &params.values, frames);
    Ok(cache_to_gaussian(&cache.mean, &cache.logvar))
}

/// p(x | z1, z2): per-element output Gaussian over the flattened window.
pub fn decode(z1: &Array1<f64>, z2: &Array1<f64>, params: &ModelParams) -> Result<DiagGaussian> {
    params.require_mode(ModelMode::Fhvae)?;
    check_vec(&z1.view(), params.latent.dim_z1, "z1")?;
    check_vec(&z2.view(), params.latent.dim_z2, "z2")?;
    let z = concat_cols(&[
        &z1.to_owned().insert_axis(Axis(0)),
        &z2.to_owned().insert_axis(Axis(0)),
    ]);
    let cache = decoder_forward(&params.layout.dec, &params.values, params.latent.input_width, z);
    Ok(cache_to_gaussian(&cache.mean, &cache.logvar))
}

/// q(z | x) for the single-latent baseline.
pub fn encode_vae(x: &Array2<f64>, params: &ModelParams) -> Result<DiagGaussian> {
    params.require_mode(ModelMode::Vae)?;
    check_window(x, &params.latent)?;
    let frames = frame_inputs(&window_batch(x), None);
    let cache = encoder_forward(&params.layout.enc_primary, &params.values, frames);
    Ok(cache_to_gaussian(&cache.mean, &cache.logvar))
}

/// p(x | z) for the single-latent baseline.
pub fn decode_vae(z: &Array1<f64>, params: &ModelParams) -> Result<DiagGaussian> {
    params.require_mode(ModelMode::Vae)?;
    check_vec(&z.view(), params.latent.dim_z_vae, "z")?;
    let zb = z.to_owned().insert_axis(Axis(0));
    let cache = decoder_forward(&params.layout.dec, &params.values, params.latent.input_width, zb);
    Ok(cache_to_gaussian(&cache.mean, &cache.logvar))
}
