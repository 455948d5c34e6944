//! Binary model checkpoints: parameters, the s-vector table, and enough
//! configuration to rebuild the exact layout. The container is
//! little-endian throughout, f64 payloads are stored bit-exactly, and the
//! loader validates structure (magic, version, enum codes, dimensions,
//! finiteness, duplicate ids, trailing bytes) with byte offsets on failure.

use crate::archive::Cursor;
use crate::config::{ArchDescriptor, CellKind, LatentConfig, ModelMode, SeqLabel};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SVectorTable};
use ndarray::Array2;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sanity caps on header counts, checked before anything is allocated or
/// any layout arithmetic runs. Far above any model this crate can train,
/// far below anything that could overflow offsets or exhaust memory.
const MAX_DIM: usize = 1 << 16;
const MAX_LAYERS: usize = 1 << 12;

/// Everything a training run persists: the model, the trained per-sequence
/// table, and which label keyed the table's rows.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub table: SVectorTable,
    pub seq_label: SeqLabel,
}

fn mode_code(mode: ModelMode) -> u8 {
    match mode {
        ModelMode::Fhvae => 0,
        ModelMode::Vae => 1,
    }
}

fn cell_code(cell: CellKind) -> u8 {
    match cell {
        CellKind::Feedforward => 0,
        CellKind::Recurrent => 1,
    }
}

fn label_code(label: SeqLabel) -> u8 {
    match label {
        SeqLabel::UttId => 0,
        SeqLabel::Speaker => 1,
        SeqLabel::Noise => 2,
    }
}

/// Serialize a checkpoint to bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let params = &ckpt.params;
    let latent = params.latent();
    let arch = params.arch();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(mode_code(params.mode()));
    out.push(cell_code(arch.cell));
    out.extend_from_slice(&(arch.layers as u32).to_le_bytes());
    out.extend_from_slice(&(arch.units as u32).to_le_bytes());
    for dim in [
        latent.dim_z1,
        latent.dim_z2,
        latent.dim_z_vae,
        latent.input_width,
        latent.input_dim,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for var in [latent.var_mu2, latent.var_z1, latent.var_z2, latent.var_mu2_post] {
        out.extend_from_slice(&var.to_le_bytes());
    }
    out.push(label_code(ckpt.seq_label));
    out.extend_from_slice(&(params.num_params() as u64).to_le_bytes());
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let table = &ckpt.table;
    out.extend_from_slice(&(table.num_sequences() as u64).to_le_bytes());
    out.extend_from_slice(&(table.dim() as u32).to_le_bytes());
    for (i, id) in table.ids().iter().enumerate() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in table.entries().row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse and validate a checkpoint from bytes.
pub fn checkpoint_from_bytes(data: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor::new(data);
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: format!("bad magic {magic:02x?}, expected {CHECKPOINT_MAGIC:02x?}"),
        });
    }
    let version = cur.read_u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let mode = match cur.read_u8("mode code")? {
        0 => ModelMode::Fhvae,
        1 => ModelMode::Vae,
        other => return Err(cur.err(format!("unknown mode code {other}"))),
    };
    let cell = match cur.read_u8("cell code")? {
        0 => CellKind::Feedforward,
        1 => CellKind::Recurrent,
        other => return Err(cur.err(format!("unknown cell code {other}"))),
    };
    let arch = ArchDescriptor {
        cell,
        layers: cur.read_u32("layer count")? as usize,
        units: cur.read_u32("unit count")? as usize,
    };
    let latent = LatentConfig {
        dim_z1: cur.read_u32("dim_z1")? as usize,
        dim_z2: cur.read_u32("dim_z2")? as usize,
        dim_z_vae: cur.read_u32("dim_z_vae")? as usize,
        input_width: cur.read_u32("input_width")? as usize,
        input_dim: cur.read_u32("input_dim")? as usize,
        var_mu2: cur.read_f64("var_mu2")?,
        var_z1: cur.read_f64("var_z1")?,
        var_z2: cur.read_f64("var_z2")?,
        var_mu2_post: cur.read_f64("var_mu2_post")?,
    };
    if arch.layers > MAX_LAYERS {
        return Err(cur.err(format!("layer count {} above cap {MAX_LAYERS}", arch.layers)));
    }
    for (name, dim) in [
        ("units", arch.units),
        ("dim_z1", latent.dim_z1),
        ("dim_z2", latent.dim_z2),
        ("dim_z_vae", latent.dim_z_vae),
        ("input_width", latent.input_width),
        ("input_dim", latent.input_dim),
    ] {
        if dim > MAX_DIM {
            return Err(cur.err(format!("{name} {dim} above cap {MAX_DIM}")));
        }
    }
    arch.validate().map_err(|e| cur.err(e.to_string()))?;
    latent.validate().map_err(|e| cur.err(e.to_string()))?;
    let seq_label = match cur.read_u8("sequence label code")? {
        0 => SeqLabel::UttId,
        1 => SeqLabel::Speaker,
        2 => SeqLabel::Noise,
        other => return Err(cur.err(format!("unknown sequence label code {other}"))),
    };

    let n_params = cur.read_u64("parameter count")? as usize;
    if n_params > cur.remaining() / 8 {
        return Err(cur.err(format!(
            "parameter count {n_params} impossible for {} remaining bytes",
            cur.remaining()
        )));
    }
    let mut values = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        values.push(cur.read_f64("parameter value")?);
    }
    let params = ModelParams::from_values(mode, &arch, &latent, values)
        .map_err(|e| cur.err(e.to_string()))?;

    let n_rows = cur.read_u64("table row count")? as usize;
    let row_dim = cur.read_u32("table row dim")? as usize;
    if row_dim != latent.dim_z2 {
        return Err(cur.err(format!(
            "table row dim {row_dim} does not match dim_z2 {}",
            latent.dim_z2
        )));
    }
    // Each row needs at least 4 bytes of id length + 1 id byte + the values.
    if n_rows > cur.remaining() / (5 + 8 * row_dim) + 1 {
        return Err(cur.err(format!(
            "table row count {n_rows} impossible for {} remaining bytes",
            cur.remaining()
        )));
    }
    let mut ids = Vec::with_capacity(n_rows);
    let mut entries = Array2::zeros((n_rows, row_dim));
    for r in 0..n_rows {
        let id_len = cur.read_u32("table id length")? as usize;
        if id_len == 0 || id_len > crate::archive::MAX_ID_LEN as usize {
            return Err(cur.err(format!(
                "table row {r}: id length {id_len} outside 1..={}",
                crate::archive::MAX_ID_LEN
            )));
        }
        let id_bytes = cur.take(id_len, "table id")?;
        let id = std::str::from_utf8(id_bytes)
            .map_err(|e| cur.err(format!("table row {r}: id is not UTF-8 ({e})")))?
            .to_string();
        ids.push(id);
        for c in 0..row_dim {
            entries[(r, c)] = cur.read_f64("table value")?;
        }
    }
    let table = SVectorTable::from_entries(ids, entries).map_err(|e| cur.err(e.to_string()))?;

    if cur.remaining() != 0 {
        return Err(cur.err(format!("{} trailing bytes after checkpoint", cur.remaining())));
    }
    Ok(Checkpoint {
        params,
        table,
        seq_label,
    })
}

/// Write a checkpoint file.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

/// Read and validate a checkpoint file.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn sample_checkpoint(mode: ModelMode, seed: u64) -> Checkpoint {
        let latent = LatentConfig {
            dim_z1: 3,
            dim_z2: 2,
            dim_z_vae: 4,
            input_width: 4,
            input_dim: 3,
            ..LatentConfig::default()
        };
        let arch = ArchDescriptor {
            cell: CellKind::Recurrent,
            layers: 2,
            units: 5,
        };
        let params = ModelParams::new(mode, &arch, &latent, seed).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed + 1);
        let entries =
            Array2::from_shape_fn((3, latent.dim_z2), |_| rng.random_range(-1.0..1.0));
        let ids = vec!["seq-a".to_string(), "seq-b".to_string(), "seq-c".to_string()];
        Checkpoint {
            params,
            table: SVectorTable::from_entries(ids, entries).unwrap(),
            seq_label: SeqLabel::Speaker,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [ModelMode::Fhvae, ModelMode::Vae] {
            let ckpt = sample_checkpoint(mode, 7);
            let bytes = checkpoint_to_bytes(&ckpt);
            let back = checkpoint_from_bytes(&bytes).unwrap();
            assert_eq!(back.params.mode(), mode);
            assert_eq!(back.params.values(), ckpt.params.values());
            assert_eq!(back.params.latent(), ckpt.params.latent());
            assert_eq!(back.params.arch(), ckpt.params.arch());
            assert_eq!(back.table, ckpt.table);
            assert_eq!(back.seq_label, SeqLabel::Speaker);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = sample_checkpoint(ModelMode::Fhvae, 9);
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.params.values(), ckpt.params.values());
        assert_eq!(back.table, ckpt.table);
    }

    #[test]
    fn loader_rejects_structural_damage() {
        let ckpt = sample_checkpoint(ModelMode::Fhvae, 11);
        let good = checkpoint_to_bytes(&ckpt);

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        // Bad version.
        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(Error::Format { offset: 4, .. })
        ));

        // Bad mode code.
        let mut bad = good.clone();
        bad[8] = 7;
        assert!(checkpoint_from_bytes(&bad).is_err());

        // Truncation anywhere.
        assert!(checkpoint_from_bytes(&good[..good.len() - 1]).is_err());
        assert!(checkpoint_from_bytes(&good[..20]).is_err());

        // Trailing garbage.
        let mut bad = good.clone();
        bad.push(0);
        let err = checkpoint_from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn loader_rejects_non_finite_values() {
        let mut ckpt = sample_checkpoint(ModelMode::Fhvae, 13);
        ckpt.params.values_mut()[0] = 1.0; // keep params valid
        let mut bytes = checkpoint_to_bytes(&ckpt);
        // First parameter value sits right after the u64 count; find it by
        // re-serializing with a poisoned value instead of hunting offsets.
        let header_len = bytes.len() - 8 * ckpt.params.num_params()
            - (8 + 4 + ckpt
                .table
                .ids()
                .iter()
                .map(|id| 4 + id.len() + 8 * ckpt.table.dim())
                .sum::<usize>());
        bytes[header_len..header_len + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn loader_rejects_oversized_counts_without_allocating() {
        let ckpt = sample_checkpoint(ModelMode::Fhvae, 15);
        let mut bytes = checkpoint_to_bytes(&ckpt);
        // Parameter count lives right after the fixed header; compute its
        // offset from the front: 4+4+1+1+4+4 + 5*4 + 4*8 + 1 = 71.
        let off = 71;
        bytes[off..off + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        let err = checkpoint_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("impossible"), "{err}");
    }

    #[test]
    fn checkpoint_after_training_reloads_identically() {
        use crate::data::{Labels, Utterance};
        use crate::data::Dataset;
        use crate::trainer::fit;
        use ndarray::Array;

        let latent = LatentConfig {
            dim_z1: 3,
            dim_z2: 2,
            dim_z_vae: 4,
            input_width: 4,
            input_dim: 3,
            ..LatentConfig::default()
        };
        let arch = ArchDescriptor {
            cell: CellKind::Feedforward,
            layers: 1,
            units: 8,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mk = |n: usize, rng: &mut ChaCha12Rng| {
            let utts = (0..n)
                .map(|i| {
                    let frames = Array::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
                    Utterance::new(format!("u{i}"), frames, Labels::default()).unwrap()
                })
                .collect();
            Dataset::from_utterances(utts).unwrap()
        };
        let train = mk(3, &mut rng);
        let dev = mk(2, &mut rng);
        let mut params = ModelParams::new(ModelMode::Fhvae, &arch, &latent, 1).unwrap();
        let mut table = SVectorTable::new(train.seq_ids().to_vec(), latent.dim_z2).unwrap();
        let config = TrainConfig {
            max_epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        fit(&train, &dev, &mut params, &mut table, &config).unwrap();

        let ckpt = Checkpoint {
            params,
            table,
            seq_label: SeqLabel::UttId,
        };
        let back = checkpoint_from_bytes(&checkpoint_to_bytes(&ckpt)).unwrap();
        assert_eq!(back.params.values(), ckpt.params.values());
        assert_eq!(back.table, ckpt.table);
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(data in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let _ = checkpoint_from_bytes(&data);
        }

        #[test]
        fn byte_flips_never_panic(flip in 0usize..1000, value in any::<u8>()) {
            let ckpt = sample_checkpoint(ModelMode::Fhvae, 17);
            let mut bytes = checkpoint_to_bytes(&ckpt);
            let idx = flip % bytes.len();
            bytes[idx] = value;
            let _ = checkpoint_from_bytes(&bytes);
        }
    }
}
