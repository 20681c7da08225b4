//! Synthetic ASR-proxy task.
//!
//! Each utterance is a random content-token sequence; its "audio" is the
//! per-token prototype vector repeated `frames_per_token` times plus Gaussian
//! noise. The two test splits share token sequences and prototypes and differ
//! only in noise sigma, so metric gaps between them isolate acoustic
//! difficulty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error("dataset file: {0}")]
    File(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub vocab_size: usize,
    pub d_in: usize,
    pub frames_per_token: usize,
    pub sigma_clean: f64,
    pub sigma_other: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            seed: 7,
            n_train: 512,
            n_test: 256,
            t_min: 4,
            t_max: 12,
            vocab_size: 64,
            d_in: 16,
            frames_per_token: 2,
            sigma_clean: 0.3,
            sigma_other: 0.9,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.sigma_clean < 0.0 || self.sigma_other <= self.sigma_clean {
            return Err(TaskError::InvalidSpec(
                "requires sigma_other > sigma_clean >= 0".into(),
            ));
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return Err(TaskError::InvalidSpec("bad token-length range".into()));
        }
        if self.vocab_size < 3 || self.d_in == 0 || self.frames_per_token == 0 {
            return Err(TaskError::InvalidSpec("bad dimensions".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(TaskError::InvalidSpec("empty splits".into()));
        }
        Ok(())
    }

    /// Content tokens leave room for BOS/EOS at the top of the vocab.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    TestClean,
    TestOther,
}

pub type Item = (Tensor, Vec<usize>);

#[derive(Debug, Clone)]
pub struct Dataset {
    pub split: SplitLabel,
    pub items: Vec<Item>,
}

/// Per-vocab prototype frames plus the generation spec.
pub struct Task {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub test_clean: Dataset,
    pub test_other: Dataset,
}

fn frames_for(
    target: &[usize],
    prototypes: &[f64],
    d_in: usize,
    frames_per_token: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
    normal: &Normal<f64>,
) -> Tensor {
    let t = target.len() * frames_per_token;
    let mut data = vec![0.0; t * d_in];
    let mut row = 0;
    for &tok in target {
        for _ in 0..frames_per_token {
            for j in 0..d_in {
                data[row * d_in + j] =
                    prototypes[tok * d_in + j] + sigma * normal.sample(rng);
            }
            row += 1;
        }
    }
    Tensor::new(vec![t, d_in], data)
}

/// Deterministic generation: prototypes and token sequences are drawn from
/// sub-seeds of `spec.seed`; the clean/other splits reuse the same sequences
/// and differ only in their noise streams.
pub fn generate(spec: &TaskSpec) -> Result<Task, TaskError> {
    spec.validate()?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d_in = spec.d_in;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<f64> = (0..spec.content_vocab() * d_in)
        .map(|_| normal.sample(&mut proto_rng))
        .collect();

    let mut seq_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let draw_target = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let t = rng.gen_range(spec.t_min..=spec.t_max);
        (0..t).map(|_| rng.gen_range(0..spec.content_vocab())).collect()
    };

    let mut train_noise = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(2));
    let train_items: Vec<Item> = (0..spec.n_train)
        .map(|_| {
            let tgt = draw_target(&mut seq_rng);
            let f = frames_for(
                &tgt,
                &prototypes,
                d_in,
                spec.frames_per_token,
                spec.sigma_clean,
                &mut train_noise,
                &normal,
            );
            (f, tgt)
        })
        .collect();

    // the two test splits share transcripts
    let test_targets: Vec<Vec<usize>> = (0..spec.n_test).map(|_| draw_target(&mut seq_rng)).collect();
    let mut clean_noise = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(3));
    let mut other_noise = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(4));
    let test_clean: Vec<Item> = test_targets
        .iter()
        .map(|tgt| {
            let f = frames_for(
                tgt,
                &prototypes,
                d_in,
                spec.frames_per_token,
                spec.sigma_clean,
                &mut clean_noise,
                &normal,
            );
            (f, tgt.clone())
        })
        .collect();
    let test_other: Vec<Item> = test_targets
        .iter()
        .map(|tgt| {
            let f = frames_for(
                tgt,
                &prototypes,
                d_in,
                spec.frames_per_token,
                spec.sigma_other,
                &mut other_noise,
                &normal,
            );
            (f, tgt.clone())
        })
        .collect();

    Ok(Task {
        spec: spec.clone(),
        train: Dataset { split: SplitLabel::Train, items: train_items },
        test_clean: Dataset { split: SplitLabel::TestClean, items: test_clean },
        test_other: Dataset { split: SplitLabel::TestOther, items: test_other },
    })
}

// ---- dataset file format ----------------------------------------------

const DS_MAGIC: &[u8; 8] = b"PLDATA01";

/// Binary export: magic, spec JSON, then per split the item count and
/// (frame tensor, target ids) records, all little-endian.
pub fn save(task: &Task, path: &std::path::Path) -> Result<(), TaskError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DS_MAGIC);
    let spec = serde_json::to_vec(&task.spec).expect("spec serializes");
    buf.extend_from_slice(&(spec.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec);
    for ds in [&task.train, &task.test_clean, &task.test_other] {
        buf.extend_from_slice(&(ds.items.len() as u32).to_le_bytes());
        for (frames, tgt) in &ds.items {
            buf.extend_from_slice(&(frames.shape[0] as u32).to_le_bytes());
            buf.extend_from_slice(&(frames.shape[1] as u32).to_le_bytes());
            for &v in &frames.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(tgt.len() as u32).to_le_bytes());
            for &t in tgt {
                buf.extend_from_slice(&(t as u32).to_le_bytes());
            }
        }
    }
    crate::report::atomic_write(path, &buf).map_err(|e| TaskError::File(e.to_string()))
}

pub fn load(path: &std::path::Path) -> Result<Task, TaskError> {
    let buf = std::fs::read(path).map_err(|e| TaskError::File(e.to_string()))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], TaskError> {
        if *pos + n > buf.len() {
            return Err(TaskError::File("truncated".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 8)? != DS_MAGIC {
        return Err(TaskError::File("bad magic".into()));
    }
    let spec_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let spec: TaskSpec = serde_json::from_slice(take(&mut pos, spec_len)?)
        .map_err(|e| TaskError::File(format!("spec: {e}")))?;
    let mut splits = Vec::new();
    for label in [SplitLabel::Train, SplitLabel::TestClean, SplitLabel::TestOther] {
        let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            let tl = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut tgt = Vec::with_capacity(tl);
            for _ in 0..tl {
                tgt.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            items.push((Tensor::new(vec![rows, cols], data), tgt));
        }
        splits.push(Dataset { split: label, items });
    }
    let test_other = splits.pop().unwrap();
    let test_clean = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Task { spec, train, test_clean, test_other })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_identical_datasets() {
        let spec = TaskSpec { n_train: 8, n_test: 8, ..TaskSpec::default() };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.train.items.iter().zip(&b.train.items) {
            assert_eq!(x.0.data, y.0.data);
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn clean_and_other_share_transcripts() {
        let spec = TaskSpec { n_train: 4, n_test: 16, ..TaskSpec::default() };
        let t = generate(&spec).unwrap();
        assert_eq!(t.test_clean.items.len(), t.test_other.items.len());
        for (c, o) in t.test_clean.items.iter().zip(&t.test_other.items) {
            assert_eq!(c.1, o.1);
            assert_ne!(c.0.data, o.0.data);
        }
    }

    #[test]
    fn zero_sigma_yields_exact_prototypes() {
        // sigma_clean = 0 with sigma_other > 0 is allowed
        let spec = TaskSpec { sigma_clean: 0.0, n_train: 4, n_test: 4, ..TaskSpec::default() };
        let t = generate(&spec).unwrap();
        for (frames, tgt) in &t.test_clean.items {
            let fpt = spec.frames_per_token;
            for (i, &tok) in tgt.iter().enumerate() {
                for r in 0..fpt {
                    let row = &frames.data
                        [(i * fpt + r) * spec.d_in..(i * fpt + r + 1) * spec.d_in];
                    let row2 = &frames.data[(i * fpt) * spec.d_in..(i * fpt + 1) * spec.d_in];
                    assert_eq!(row, row2, "token {tok} rows should repeat the prototype");
                }
            }
        }
    }

    #[test]
    fn noise_std_matches_sigma() {
        let spec = TaskSpec { n_train: 4, n_test: 256, ..TaskSpec::default() };
        let t = generate(&spec).unwrap();
        let zero = TaskSpec { sigma_clean: 0.0, sigma_other: spec.sigma_other, ..spec.clone() };
        let base = generate(&zero).unwrap();
        // same prototypes and transcripts; clean frames differ only by noise
        let mut sq = 0.0;
        let mut n = 0usize;
        for ((f, _), (p, _)) in t.test_clean.items.iter().zip(&base.test_clean.items) {
            for (a, b) in f.data.iter().zip(&p.data) {
                sq += (a - b) * (a - b);
                n += 1;
            }
        }
        let std = (sq / n as f64).sqrt();
        assert!(
            (std - spec.sigma_clean).abs() / spec.sigma_clean < 0.05,
            "measured {std}, expected {}",
            spec.sigma_clean
        );
    }

    #[test]
    fn invalid_sigma_rejected() {
        let spec = TaskSpec { sigma_other: 0.1, sigma_clean: 0.3, ..TaskSpec::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn roundtrip_file() {
        let spec = TaskSpec { n_train: 3, n_test: 2, ..TaskSpec::default() };
        let t = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        save(&t, &path).unwrap();
        let r = load(&path).unwrap();
        assert_eq!(r.spec, t.spec);
        assert_eq!(r.train.items.len(), 3);
        assert_eq!(r.test_other.items[0].0.data, t.test_other.items[0].0.data);
        assert_eq!(r.test_other.items[1].1, t.test_other.items[1].1);
    }
}
