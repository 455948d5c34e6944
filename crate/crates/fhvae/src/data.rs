//! Dataset container: identified frame matrices with sequence labels, the
//! tab-separated manifest format, and sequence regrouping by label.

use crate::archive::{ArchiveRecord, FeatureArchive};
use crate::config::SeqLabel;
use crate::error::{Error, Result};
use ndarray::Array2;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Optional per-utterance annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Labels {
    pub speaker: Option<String>,
    pub noise: Option<String>,
    pub domain: Option<String>,
    /// Per-frame segment-class ids (synthetic corpora only).
    pub segment_classes: Option<Vec<u32>>,
}

/// One identified frame matrix (T frames by D feature dims).
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub frames: Array2<f64>,
    pub labels: Labels,
}

impl Utterance {
    pub fn new(utt_id: impl Into<String>, frames: Array2<f64>, labels: Labels) -> Result<Self> {
        let utt_id = utt_id.into();
        if frames.nrows() < 1 {
            return Err(Error::Data(format!("utterance '{utt_id}' has no frames")));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "utterance '{utt_id}' contains non-finite frames"
            )));
        }
        if let Some(classes) = &labels.segment_classes {
            if classes.len() != frames.nrows() {
                return Err(Error::Data(format!(
                    "utterance '{utt_id}': {} segment-class labels for {} frames",
                    classes.len(),
                    frames.nrows()
                )));
            }
        }
        Ok(Utterance {
            utt_id,
            frames,
            labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// A set of utterances plus their grouping into model sequences. Utterances
/// sharing a sequence index share one s-vector row and one pooled segment
/// count; the grouping is logical and leaves frame data untouched.
#[derive(Debug, Clone)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    seq_label: SeqLabel,
    seq_ids: Vec<String>,
    seq_of_utt: Vec<usize>,
}

impl Dataset {
    /// Build a dataset with the identity grouping (one sequence per utterance).
    pub fn from_utterances(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashMap::new();
        for (idx, u) in utterances.iter().enumerate() {
            if let Some(prev) = seen.insert(u.utt_id.clone(), idx) {
                return Err(Error::Data(format!(
                    "duplicate utterance id '{}' (records {prev} and {idx})",
                    u.utt_id
                )));
            }
        }
        let seq_ids = utterances.iter().map(|u| u.utt_id.clone()).collect();
        let seq_of_utt = (0..utterances.len()).collect();
        Ok(Dataset {
            utterances,
            seq_label: SeqLabel::UttId,
            seq_ids,
            seq_of_utt,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Number of model sequences M under the current grouping.
    pub fn num_sequences(&self) -> usize {
        self.seq_ids.len()
    }

    pub fn seq_label(&self) -> SeqLabel {
        self.seq_label
    }

    pub fn seq_ids(&self) -> &[String] {
        &self.seq_ids
    }

    /// Sequence row for utterance `utt_idx`.
    pub fn seq_of_utt(&self, utt_idx: usize) -> usize {
        self.seq_of_utt[utt_idx]
    }

    /// Utterance indices belonging to sequence `seq_idx`.
    pub fn utts_of_seq(&self, seq_idx: usize) -> Vec<usize> {
        (0..self.utterances.len())
            .filter(|&u| self.seq_of_utt[u] == seq_idx)
            .collect()
    }

    /// Scheduled segments per sequence for window width `w`: each utterance
    /// contributes `max(1, floor(T / w))`, pooled over the sequence.
    pub fn seq_segment_counts(&self, w: usize) -> Vec<usize> {
        let mut counts = vec![0usize; self.seq_ids.len()];
        for (u, utt) in self.utterances.iter().enumerate() {
            counts[self.seq_of_utt[u]] += (utt.num_frames() / w).max(1);
        }
        counts
    }

    /// Attach per-frame segment-class labels from a label archive (one
    /// T-by-1 record per utterance, class ids stored as floats).
    pub fn attach_segment_labels(&mut self, labels: &FeatureArchive) -> Result<()> {
        let by_id: HashMap<&str, &ArchiveRecord> =
            labels.records().iter().map(|r| (r.utt_id.as_str(), r)).collect();
        for utt in &mut self.utterances {
            let rec = by_id.get(utt.utt_id.as_str()).ok_or_else(|| {
                Error::Data(format!("no segment labels for utterance '{}'", utt.utt_id))
            })?;
            if rec.frames.nrows() != utt.num_frames() || rec.frames.ncols() != 1 {
                return Err(Error::Data(format!(
                    "label record for '{}' has shape {}x{}, expected {}x1",
                    utt.utt_id,
                    rec.frames.nrows(),
                    rec.frames.ncols(),
                    utt.num_frames()
                )));
            }
            utt.labels.segment_classes =
                Some(rec.frames.column(0).iter().map(|&v| v as u32).collect());
        }
        Ok(())
    }
}

/// Regroup a dataset's sequences by the chosen label. Utterances sharing a
/// label value share one sequence index; `uttid` is the identity mapping.
pub fn group_sequences_by_label(dataset: Dataset, label: SeqLabel) -> Result<Dataset> {
    let mut seq_ids: Vec<String> = Vec::new();
    let mut row_of: HashMap<String, usize> = HashMap::new();
    let mut seq_of_utt = Vec::with_capacity(dataset.utterances.len());
    for u in &dataset.utterances {
        let key = match label {
            SeqLabel::UttId => Some(u.utt_id.clone()),
            SeqLabel::Speaker => u.labels.speaker.clone(),
            SeqLabel::Noise => u.labels.noise.clone(),
        };
        let key = key.ok_or_else(|| {
            Error::Data(format!(
                "utterance '{}' lacks the '{label}' label required for grouping",
                u.utt_id
            ))
        })?;
        let next = seq_ids.len();
        let row = *row_of.entry(key.clone()).or_insert_with(|| {
            seq_ids.push(key);
            next
        });
        seq_of_utt.push(row);
    }
    Ok(Dataset {
        utterances: dataset.utterances,
        seq_label: label,
        seq_ids,
        seq_of_utt,
    })
}

/// One manifest line: where an utterance lives and its sequence labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub archive_path: PathBuf,
    pub speaker: Option<String>,
    pub noise: Option<String>,
    pub domain: Option<String>,
}

const ABSENT: &str = "-";

fn label_cell(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or(ABSENT)
}

fn parse_cell(s: &str) -> Option<String> {
    if s == ABSENT {
        None
    } else {
        Some(s.to_string())
    }
}

/// Serialize manifest entries as tab-separated lines
/// (`utt_id  archive_path  speaker  noise  domain`).
pub fn manifest_to_string(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            e.utt_id,
            e.archive_path.display(),
            label_cell(&e.speaker),
            label_cell(&e.noise),
            label_cell(&e.domain),
        ));
    }
    out
}

/// Parse manifest text. Blank lines are ignored; anything else must have
/// exactly five tab-separated fields.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format {
                offset: line_offset,
                detail: format!("manifest line has {} fields, expected 5", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(Error::Format {
                offset: line_offset,
                detail: "empty utterance id".into(),
            });
        }
        entries.push(ManifestEntry {
            utt_id: fields[0].to_string(),
            archive_path: PathBuf::from(fields[1]),
            speaker: parse_cell(fields[2]),
            noise: parse_cell(fields[3]),
            domain: parse_cell(fields[4]),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    std::fs::write(path, manifest_to_string(entries)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Load a dataset from a manifest: reads each referenced archive once and
/// materializes the listed utterances in manifest order. Relative archive
/// paths resolve against the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut archives: HashMap<PathBuf, FeatureArchive> = HashMap::new();
    let mut utterances = Vec::with_capacity(entries.len());
    for e in &entries {
        let full = if e.archive_path.is_absolute() {
            e.archive_path.clone()
        } else {
            base.join(&e.archive_path)
        };
        if !archives.contains_key(&full) {
            archives.insert(full.clone(), crate::archive::read_archive(&full)?);
        }
        let archive = &archives[&full];
        let rec = archive.get(&e.utt_id).ok_or_else(|| {
            Error::Data(format!(
                "utterance '{}' not found in archive {}",
                e.utt_id,
                full.display()
            ))
        })?;
        utterances.push(Utterance::new(
            e.utt_id.clone(),
            rec.frames.mapv(f64::from),
            Labels {
                speaker: e.speaker.clone(),
                noise: e.noise.clone(),
                domain: e.domain.clone(),
                segment_classes: None,
            },
        )?);
    }
    Dataset::from_utterances(utterances)
}
