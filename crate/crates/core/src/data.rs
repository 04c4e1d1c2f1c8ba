//! Utterance records and their JSON-lines storage, plus synthetic data and batching.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_TEXT_DIM: usize = 300;
pub const DEFAULT_AUDIO_DIM: usize = 74;
pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

/// Coefficients of the synthetic label `α·m_T + β·m_A + γ·m_T·m_A`.
pub const SYNTH_ALPHA: f64 = 1.5;
pub const SYNTH_BETA: f64 = 1.5;
pub const SYNTH_GAMMA: f64 = 1.0;

/// One utterance: unaligned text and audio feature sequences and a sentiment score.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    /// `L_T × d_text`
    pub text: Matrix<f64>,
    /// `L_A × d_audio`
    pub audio: Matrix<f64>,
    pub label: f64,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.text.rows() == 0 || self.audio.rows() == 0 {
            return Err(Error::Data(format!("record {}: empty sequence", self.id)));
        }
        if self.text.cols() == 0 || self.audio.cols() == 0 {
            return Err(Error::Data(format!("record {}: zero feature width", self.id)));
        }
        if !self.text.all_finite() || !self.audio.all_finite() || !self.label.is_finite() {
            return Err(Error::Data(format!("record {}: non-finite value", self.id)));
        }
        if !(LABEL_MIN..=LABEL_MAX).contains(&self.label) {
            return Err(Error::Data(format!(
                "record {}: label {} outside [-3, 3]",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

impl fmt::Display for SplitRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitRole::Train => "train",
            SplitRole::Validation => "validation",
            SplitRole::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub records: Vec<UtteranceRecord>,
}

impl DatasetSplit {
    /// Rejects empty splits, invalid records, mixed widths and repeated ids.
    pub fn new(role: SplitRole, records: Vec<UtteranceRecord>) -> Result<Self> {
        let split = DatasetSplit { role, records };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .records
            .first()
            .ok_or_else(|| Error::Data(format!("{} split is empty", self.role)))?;
        let dims = (first.text.cols(), first.audio.cols());
        let mut ids = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if (r.text.cols(), r.audio.cols()) != dims {
                return Err(Error::Data(format!(
                    "record {}: feature widths ({}, {}) differ from ({}, {})",
                    r.id,
                    r.text.cols(),
                    r.audio.cols(),
                    dims.0,
                    dims.1
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate record id {}", r.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(d_text, d_audio)`
    pub fn dims(&self) -> (usize, usize) {
        self.records.first().map_or((0, 0), |r| (r.text.cols(), r.audio.cols()))
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, &JsonRecord::from(r))?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    id: String,
    text: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
    label: f64,
}

impl From<&UtteranceRecord> for JsonRecord {
    fn from(r: &UtteranceRecord) -> Self {
        JsonRecord {
            id: r.id.clone(),
            text: r.text.to_rows_f64(),
            audio: r.audio.to_rows_f64(),
            label: r.label,
        }
    }
}

/// Reads one record per non-blank line. Widths are checked against the first record.
pub fn load_jsonl(path: impl AsRef<Path>, role: SplitRole) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let line_err = |line: usize, msg: String| Error::Line {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut records: Vec<UtteranceRecord> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonRecord =
            serde_json::from_str(&line).map_err(|e| line_err(lineno, format!("malformed record: {e}")))?;
        let text = Matrix::from_rows(&raw.text).map_err(|e| line_err(lineno, format!("text: {e}")))?;
        let audio = Matrix::from_rows(&raw.audio).map_err(|e| line_err(lineno, format!("audio: {e}")))?;
        let rec = UtteranceRecord {
            id: raw.id,
            text,
            audio,
            label: raw.label,
        };
        rec.validate().map_err(|e| line_err(lineno, e.to_string()))?;
        let d = (rec.text.cols(), rec.audio.cols());
        match dims {
            None => dims = Some(d),
            Some(expected) if expected != d => {
                return Err(line_err(
                    lineno,
                    format!(
                        "dimension mismatch: text width {} and audio width {}, expected {} and {}",
                        d.0, d.1, expected.0, expected.1
                    ),
                ))
            }
            Some(_) => {}
        }
        if !ids.insert(rec.id.clone()) {
            return Err(line_err(lineno, format!("duplicate id {}", rec.id)));
        }
        records.push(rec);
    }
    DatasetSplit::new(role, records)
}

/// Parameters of the synthetic generator. Length ranges are inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_records: usize,
    pub text_len: (usize, usize),
    pub audio_len: (usize, usize),
    pub d_text: usize,
    pub d_audio: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub role: SplitRole,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_records: 100,
            text_len: (50, 50),
            audio_len: (375, 375),
            d_text: DEFAULT_TEXT_DIM,
            d_audio: DEFAULT_AUDIO_DIM,
            seed: 0,
            noise_sigma: 0.0,
            role: SplitRole::Train,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_records == 0 {
            return bad("n_records must be at least 1".into());
        }
        for (name, (lo, hi)) in [("text_len", self.text_len), ("audio_len", self.audio_len)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty or starts at 0"));
            }
        }
        if self.d_text == 0 || self.d_audio == 0 {
            return bad("feature widths must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        Ok(())
    }
}

/// Noise-free part of the synthetic label, before clipping.
pub fn synthetic_signal(text: &Matrix<f64>, audio: &Matrix<f64>) -> f64 {
    let m_t = first_channel_mean(text);
    let m_a = first_channel_mean(audio);
    SYNTH_ALPHA * m_t + SYNTH_BETA * m_a + SYNTH_GAMMA * m_t * m_a
}

fn first_channel_mean(m: &Matrix<f64>) -> f64 {
    (0..m.rows()).map(|r| m[(r, 0)]).sum::<f64>() / m.rows() as f64
}

/// Record `i` draws from its own ChaCha stream `i` under `spec.seed`, so
/// records are independent of `n_records` and of each other.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetSplit> {
    spec.validate()?;
    let records = (0..spec.n_records)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let lt = rng.gen_range(spec.text_len.0..=spec.text_len.1);
            let la = rng.gen_range(spec.audio_len.0..=spec.audio_len.1);
            let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
            let text = Matrix::from_fn(lt, spec.d_text, |_, _| normal());
            let audio = Matrix::from_fn(la, spec.d_audio, |_, _| normal());
            let eps = spec.noise_sigma * normal();
            let label = (synthetic_signal(&text, &audio) + eps).clamp(LABEL_MIN, LABEL_MAX);
            UtteranceRecord {
                id: format!("{}-{}-{i:05}", spec.id_prefix, spec.seed),
                text,
                audio,
                label,
            }
        })
        .collect();
    DatasetSplit::new(spec.role, records)
}

/// Zero-padded mini-batch. `text[b]` is `max_text_len × d_text`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub text: Vec<Matrix<f64>>,
    pub audio: Vec<Matrix<f64>>,
    pub text_lengths: Vec<usize>,
    pub audio_lengths: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Batch {
    fn from_records(records: &[&UtteranceRecord]) -> Self {
        let max_t = records.iter().map(|r| r.text.rows()).max().unwrap_or(0);
        let max_a = records.iter().map(|r| r.audio.rows()).max().unwrap_or(0);
        Batch {
            ids: records.iter().map(|r| r.id.clone()).collect(),
            text: records.iter().map(|r| pad_rows(&r.text, max_t)).collect(),
            audio: records.iter().map(|r| pad_rows(&r.audio, max_a)).collect(),
            text_lengths: records.iter().map(|r| r.text.rows()).collect(),
            audio_lengths: records.iter().map(|r| r.audio.rows()).collect(),
            labels: records.iter().map(|r| r.label).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn pad_rows(m: &Matrix<f64>, rows: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, m.cols(), |r, c| if r < m.rows() { m[(r, c)] } else { 0.0 })
}

/// Splits into consecutive batches of `batch_size` (the last may be smaller),
/// in file order or in a seeded permutation.
pub fn make_batches(split: &DatasetSplit, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|chunk| {
            let recs: Vec<&UtteranceRecord> = chunk.iter().map(|&i| &split.records[i]).collect();
            Batch::from_records(&recs)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_records: n,
            text_len: (3, 9),
            audio_len: (4, 12),
            d_text: 5,
            d_audio: 3,
            seed,
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn generates_declared_count_and_dims() {
        let split = generate_synthetic(&spec(10, 7)).unwrap();
        assert_eq!(split.len(), 10);
        assert_eq!(split.dims(), (5, 3));
        for r in &split.records {
            assert!((3..=9).contains(&r.text.rows()));
            assert!((4..=12).contains(&r.audio.rows()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_synthetic(&spec(6, 11)).unwrap(),
            generate_synthetic(&spec(6, 11)).unwrap()
        );
        assert_ne!(
            generate_synthetic(&spec(6, 11)).unwrap(),
            generate_synthetic(&spec(6, 12)).unwrap()
        );
    }

    #[test]
    fn noise_free_labels_follow_formula() {
        let split = generate_synthetic(&spec(50, 3)).unwrap();
        for r in &split.records {
            // independent re-evaluation from the stored features
            let mt: f64 = (0..r.text.rows()).map(|t| r.text[(t, 0)]).sum::<f64>() / r.text.rows() as f64;
            let ma: f64 = (0..r.audio.rows()).map(|t| r.audio[(t, 0)]).sum::<f64>() / r.audio.rows() as f64;
            let expected = (1.5 * mt + 1.5 * ma + mt * ma).clamp(-3.0, 3.0);
            assert!((expected - r.label).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(0, 1);
        assert!(generate_synthetic(&s).is_err());
        s.n_records = 1;
        s.text_len = (5, 4);
        assert!(generate_synthetic(&s).is_err());
        s.text_len = (1, 1);
        s.noise_sigma = -0.1;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn batch_sizes_and_padding() {
        let split = generate_synthetic(&spec(25, 5)).unwrap();
        let batches = make_batches(&split, 12, None).unwrap();
        assert_eq!(batches.iter().map(Batch::len).collect::<Vec<_>>(), vec![12, 12, 1]);
        for b in &batches {
            for (m, &len) in b.text.iter().zip(&b.text_lengths) {
                assert!(len <= m.rows());
                for r in len..m.rows() {
                    assert!(m.row(r).iter().all(|&v| v == 0.0));
                }
            }
        }
        assert!(make_batches(&split, 0, None).is_err());
    }

    #[test]
    fn padding_of_short_record() {
        let mut split = generate_synthetic(&spec(2, 5)).unwrap();
        split.records[0].text = Matrix::filled(5, 5, 1.0);
        split.records[1].text = Matrix::filled(9, 5, 2.0);
        let b = &make_batches(&split, 2, None).unwrap()[0];
        assert_eq!(b.text[0].rows(), 9);
        for r in 0..5 {
            assert!(b.text[0].row(r).iter().all(|&v| v == 1.0));
        }
        for r in 5..9 {
            assert!(b.text[0].row(r).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shuffle_is_seeded() {
        let split = generate_synthetic(&spec(30, 5)).unwrap();
        let a = make_batches(&split, 7, Some(4)).unwrap();
        let b = make_batches(&split, 7, Some(4)).unwrap();
        let ids = |bs: &[Batch]| bs.iter().flat_map(|b| b.ids.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let plain = make_batches(&split, 7, None).unwrap();
        assert_eq!(
            ids(&plain),
            split.records.iter().map(|r| r.id.clone()).collect::<Vec<_>>()
        );
        assert_ne!(ids(&a), ids(&plain));
    }

    #[test]
    fn split_rejects_duplicates_and_mixed_dims() {
        let split = generate_synthetic(&spec(3, 5)).unwrap();
        let mut recs = split.records.clone();
        recs[1].id = recs[0].id.clone();
        assert!(DatasetSplit::new(SplitRole::Train, recs).is_err());
        let mut recs = split.records.clone();
        recs[2].audio = Matrix::zeros(4, 2);
        assert!(DatasetSplit::new(SplitRole::Train, recs).is_err());
        assert!(DatasetSplit::new(SplitRole::Test, vec![]).is_err());
    }
}
