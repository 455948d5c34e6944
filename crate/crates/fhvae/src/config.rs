//! Configuration types: latent-space geometry, architecture, training
//! hyperparameters, synthetic-corpus parameters, and the merged run config
//! loaded from TOML files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Latent-space dimensions, prior variances, and input window geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentConfig {
    pub dim_z1: usize,
    pub dim_z2: usize,
    pub dim_z_vae: usize,
    /// Prior variance of the s-vector, `p(mu2) = N(0, var_mu2 I)`.
    pub var_mu2: f64,
    /// Prior variance of the latent segment variable z1.
    pub var_z1: f64,
    /// Conditional variance of z2 around its sequence s-vector.
    pub var_z2: f64,
    /// Posterior variance of the s-vector lookup (`q(mu2)` spread).
    pub var_mu2_post: f64,
    /// Segment width in frames (W).
    pub input_width: usize,
    /// Per-frame feature dimension (D).
    pub input_dim: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig {
            dim_z1: 32,
            dim_z2: 32,
            dim_z_vae: 64,
            var_mu2: 1.0,
            var_z1: 1.0,
            var_z2: 0.25,
            var_mu2_post: (-2.0f64).exp(),
            input_width: 20,
            input_dim: 20,
        }
    }
}

impl LatentConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim_z1", self.dim_z1),
            ("dim_z2", self.dim_z2),
            ("dim_z_vae", self.dim_z_vae),
            ("input_width", self.input_width),
            ("input_dim", self.input_dim),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        let vars = [
            ("var_mu2", self.var_mu2),
            ("var_z1", self.var_z1),
            ("var_z2", self.var_z2),
            ("var_mu2_post", self.var_mu2_post),
        ];
        for (name, v) in vars {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be strictly positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Flattened segment length W * D.
    pub fn segment_len(&self) -> usize {
        self.input_width * self.input_dim
    }
}

/// Network cell family for the encoder/decoder bodies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// Flattened-input dense layers; cheap exact gradient checks.
    Feedforward,
    /// Stacked tanh recurrent layers over the frame sequence.
    Recurrent,
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feedforward" | "ff" => Ok(CellKind::Feedforward),
            "recurrent" | "rnn" => Ok(CellKind::Recurrent),
            other => Err(Error::Config(format!("unknown cell kind '{other}'"))),
        }
    }
}

/// Shape of every network body: cell family, stacked layer count, units per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchDescriptor {
    pub cell: CellKind,
    pub layers: usize,
    pub units: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            cell: CellKind::Recurrent,
            layers: 1,
            units: 64,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config(format!(
                "layers must be >= 1, got {}",
                self.layers
            )));
        }
        if self.units < 1 {
            return Err(Error::Config(format!(
                "units must be >= 1, got {}",
                self.units
            )));
        }
        Ok(())
    }
}

/// Which generative model a parameter set implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Fhvae,
    Vae,
}

impl FromStr for ModelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fhvae" => Ok(ModelMode::Fhvae),
            "vae" => Ok(ModelMode::Vae),
            other => Err(Error::Config(format!("unknown model mode '{other}'"))),
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelMode::Fhvae => write!(f, "fhvae"),
            ModelMode::Vae => write!(f, "vae"),
        }
    }
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_weight: f64,
    pub patience_epochs: usize,
    /// Weight of the discriminative sequence term.
    pub alpha: f64,
    pub seed: u64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 1e-3,
            adam_beta1: 0.95,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2_weight: 1e-4,
            patience_epochs: 50,
            alpha: 10.0,
            seed: 0,
            max_epochs: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.patience_epochs < 1 {
            return Err(Error::Config("patience_epochs must be >= 1".into()));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters of the synthetic two-domain corpus generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    pub n_noise_types: usize,
    pub n_utts_per_speaker: usize,
    /// Inclusive frame-count range; actual lengths are rounded to whole segments.
    pub t_min: usize,
    pub t_max: usize,
    /// Per-frame feature dimension D.
    pub dim: usize,
    /// Number of segment classes C.
    pub n_segment_classes: usize,
    /// Width in frames of one generated segment.
    pub seg_width: usize,
    /// Scale of the constant domain offset added to shifted-domain utterances.
    pub offset_scale: f64,
    /// Multiplier on the per-frame noise std in the shifted domain.
    pub noise_multiplier: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_speakers: 4,
            n_noise_types: 3,
            n_utts_per_speaker: 50,
            t_min: 80,
            t_max: 160,
            dim: 20,
            n_segment_classes: 8,
            seg_width: 20,
            offset_scale: 0.8,
            noise_multiplier: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers", self.n_speakers),
            ("n_noise_types", self.n_noise_types),
            ("n_utts_per_speaker", self.n_utts_per_speaker),
            ("t_min", self.t_min),
            ("t_max", self.t_max),
            ("seg_width", self.seg_width),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
            }
        }
        if self.dim < 4 {
            return Err(Error::Config(format!("dim must be >= 4, got {}", self.dim)));
        }
        if self.n_segment_classes < 2 {
            return Err(Error::Config(format!(
                "n_segment_classes must be >= 2, got {}",
                self.n_segment_classes
            )));
        }
        if self.t_max < self.t_min {
            return Err(Error::Config(format!(
                "t_max ({}) must be >= t_min ({})",
                self.t_max, self.t_min
            )));
        }
        if self.t_max < self.seg_width {
            return Err(Error::Config(format!(
                "t_max ({}) must be >= seg_width ({})",
                self.t_max, self.seg_width
            )));
        }
        for (name, v) in [
            ("offset_scale", self.offset_scale),
            ("noise_multiplier", self.noise_multiplier),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which derived feature `extract_features` emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractionMode {
    /// Posterior mean and variance of z1 (z2 fixed at its posterior mean).
    Z1,
    /// Posterior mean and variance of the vanilla-VAE latent.
    ZVae,
    /// z1 and z2 posterior statistics concatenated.
    Z1Z2,
    /// z1 statistics with the utterance s-vector appended to every frame.
    Z1Mu2,
}

impl ExtractionMode {
    /// Number of output columns for this mode.
    pub fn feature_dim(&self, latent: &LatentConfig) -> usize {
        match self {
            ExtractionMode::Z1 => 2 * latent.dim_z1,
            ExtractionMode::ZVae => 2 * latent.dim_z_vae,
            ExtractionMode::Z1Z2 => 2 * latent.dim_z1 + 2 * latent.dim_z2,
            ExtractionMode::Z1Mu2 => 2 * latent.dim_z1 + latent.dim_z2,
        }
    }

    pub fn requires_mode(&self) -> ModelMode {
        match self {
            ExtractionMode::ZVae => ModelMode::Vae,
            _ => ModelMode::Fhvae,
        }
    }
}

impl FromStr for ExtractionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z1" => Ok(ExtractionMode::Z1),
            "z" => Ok(ExtractionMode::ZVae),
            "z1z2" => Ok(ExtractionMode::Z1Z2),
            "z1mu2" => Ok(ExtractionMode::Z1Mu2),
            other => Err(Error::Config(format!("unknown feature mode '{other}'"))),
        }
    }
}

impl ExtractionMode {
    pub fn tag(&self) -> &'static str {
        match self {
            ExtractionMode::Z1 => "z1",
            ExtractionMode::ZVae => "z",
            ExtractionMode::Z1Z2 => "z1z2",
            ExtractionMode::Z1Mu2 => "z1mu2",
        }
    }
}

impl fmt::Display for ExtractionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag())
    }
}

/// Sequence-label choice: which utterances share one s-vector row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeqLabel {
    UttId,
    Speaker,
    Noise,
}

impl FromStr for SeqLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uttid" => Ok(SeqLabel::UttId),
            "speaker" => Ok(SeqLabel::Speaker),
            "noise" => Ok(SeqLabel::Noise),
            other => Err(Error::Config(format!("unknown sequence label '{other}'"))),
        }
    }
}

impl fmt::Display for SeqLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SeqLabel::UttId => "uttid",
            SeqLabel::Speaker => "speaker",
            SeqLabel::Noise => "noise",
        };
        write!(f, "{s}")
    }
}

/// Merged configuration file: every section optional, flags override fields.
/// Scalar keys come before the table sections, matching TOML layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_label: Option<SeqLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModelMode>,
    pub latent: LatentConfig,
    pub arch: ArchDescriptor,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
}

impl RunConfig {
    /// Parse a TOML run config; unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.latent.validate()?;
        self.arch.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn latent_rejects_zero_variance() {
        let mut c = LatentConfig::default();
        c.var_z2 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn latent_rejects_zero_dim() {
        let mut c = LatentConfig::default();
        c.dim_z1 = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_toml_str("[latent]\ndim_z1 = 8\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.alpha = 5.0;
        cfg.seq_label = Some(SeqLabel::Speaker);
        cfg.mode = Some(ModelMode::Vae);
        let text = cfg.to_toml_string();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);

        // Absent optional keys must serialize (omitted) and parse back.
        let default_text = RunConfig::default().to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&default_text).unwrap(), RunConfig::default());
    }

    #[test]
    fn extraction_mode_dims() {
        let l = LatentConfig::default();
        assert_eq!(ExtractionMode::Z1.feature_dim(&l), 64);
        assert_eq!(ExtractionMode::ZVae.feature_dim(&l), 128);
        assert_eq!(ExtractionMode::Z1Z2.feature_dim(&l), 128);
        assert_eq!(ExtractionMode::Z1Mu2.feature_dim(&l), 96);
    }
}
