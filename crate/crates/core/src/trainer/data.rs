//! Byte-level corpus ingestion and batch sampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::DetRng;

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.95;

/// Tokens are raw bytes (vocabulary 256).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<u8>,
    pub val: Vec<u8>,
}

impl Dataset {
    /// Leading `fraction` of the bytes for training, the rest for validation.
    pub fn from_bytes(bytes: Vec<u8>, fraction: f64) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Argument(format!("train fraction {fraction} outside [0, 1]")));
        }
        let cut = (bytes.len() as f64 * fraction).round() as usize;
        let mut train = bytes;
        let val = train.split_off(cut);
        Ok(Dataset { train, val })
    }

    pub fn token_count(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

/// Reads a file and splits it 95/5.
pub fn ingest_text(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    Dataset::from_bytes(bytes, DEFAULT_TRAIN_FRACTION)
}

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

/// `batch` windows of `len + 1` bytes at uniformly random offsets.
pub fn sample_batch(stream: &[u8], batch: usize, len: usize, rng: &mut DetRng) -> Result<Batch> {
    if stream.len() < len + 1 {
        return Err(Error::Data(format!("stream of {} bytes is shorter than one window of {}", stream.len(), len + 1)));
    }
    let span = stream.len() - len;
    let starts: Vec<usize> = (0..batch).map(|_| rng.below(span)).collect();
    Batch::from_windows(stream, &starts, len)
}

/// Evenly spaced windows covering about `tokens` tokens, grouped into
/// batches of at most `batch`.
pub fn eval_batches(stream: &[u8], tokens: usize, batch: usize, len: usize) -> Result<Vec<Batch>> {
    if stream.len() < len + 1 {
        return Err(Error::Data(format!("validation split of {} bytes is shorter than one window of {}", stream.len(), len + 1)));
    }
    let windows = tokens.div_ceil(len).max(1);
    let last = stream.len() - len - 1;
    let starts: Vec<usize> = if windows == 1 {
        vec![0]
    } else {
        (0..windows).map(|i| i * last / (windows - 1)).collect()
    };
    starts.chunks(batch.max(1)).map(|c| Batch::from_windows(stream, c, len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(tokenize(b"ab"), vec![97, 98]);
    }

    #[test]
    fn split_is_deterministic() {
        let bytes: Vec<u8> = (0..200u32).map(|i| (i % 251) as u8).collect();
        let a = Dataset::from_bytes(bytes.clone(), 0.95).unwrap();
        let b = Dataset::from_bytes(bytes, 0.95).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 190);
        assert_eq!(a.token_count(), 200);
    }

    #[test]
    fn empty_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(ingest_text(&path), Err(Error::Data(_))));
    }

    #[test]
    fn windows_shift_targets_by_one() {
        let stream: Vec<u8> = (0..50).collect();
        let b = sample_batch(&stream, 3, 8, &mut DetRng::new(1)).unwrap();
        for (t, y) in b.tokens.iter().zip(b.targets.iter()) {
            assert_eq!(t + 1, *y);
        }
        assert!(sample_batch(&stream[..8], 1, 8, &mut DetRng::new(1)).is_err());
    }

    #[test]
    fn eval_windows_cover_the_split() {
        let stream: Vec<u8> = (0..100).collect();
        let batches = eval_batches(&stream, 40, 3, 10).unwrap();
        let total: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(total, 4);
        assert_eq!(batches.last().unwrap().tokens.last(), Some(&98));
    }
}
