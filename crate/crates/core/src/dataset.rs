//! Dataset records and their binary file format, plus deep/shallow
//! balancing by oversampling.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{EdgeVector, ModeSequence, EDGE_COUNT};
use crate::frame::{LcuInput, LCU_INPUT_AREA};
use crate::partition::SplitMode;

const MAGIC: &[u8; 4] = b"LCUD";
const VERSION: u32 = 1;

/// Edge-label popcount at which a sample counts as deeply partitioned
/// (half the vector).
pub const DEEP_THRESHOLD: usize = EDGE_COUNT / 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes in dataset file")]
    BadMagic,
    #[error("dataset file truncated or inconsistent")]
    TruncatedFile,
    #[error("bad record: {0}")]
    BadRecord(String),
    #[error("dataset has no deep samples to oversample")]
    NoDeepSamples,
    #[error("target deep fraction {0} is outside (0,1)")]
    InvalidTarget(f64),
}

/// One dataset record. `mode_labels` empty marks an extracted-but-unlabeled
/// record (the `label` step fills both label vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct LcuSample {
    pub input: LcuInput,
    pub edge_labels: EdgeVector,
    pub mode_labels: ModeSequence,
    pub frame_index: u32,
    pub lcu_x: u32,
    pub lcu_y: u32,
}

impl LcuSample {
    pub fn is_labeled(&self) -> bool {
        !self.mode_labels.is_empty()
    }

    /// Deep means at least half the edge labels are set.
    pub fn is_deep(&self) -> bool {
        self.edge_labels.ones() >= DEEP_THRESHOLD
    }
}

pub fn write_dataset(samples: &[LcuSample], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u64::<LittleEndian>(samples.len() as u64)?;
    for s in samples {
        let body_len = LCU_INPUT_AREA + 1 + EDGE_COUNT / 8 + 2 + s.mode_labels.len() + 12;
        out.write_u32::<LittleEndian>(body_len as u32)?;
        out.write_all(&s.input.pixels)?;
        out.write_u8(s.input.qp)?;
        out.write_all(&s.edge_labels.pack_bits())?;
        out.write_u16::<LittleEndian>(s.mode_labels.len() as u16)?;
        for m in &s.mode_labels {
            out.write_u8(m.code())?;
        }
        out.write_u32::<LittleEndian>(s.frame_index)?;
        out.write_u32::<LittleEndian>(s.lcu_x)?;
        out.write_u32::<LittleEndian>(s.lcu_y)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<LcuSample>, DatasetError> {
    let mut file = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(|_| DatasetError::TruncatedFile)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = file.read_u32::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)?;
    if version != VERSION {
        return Err(DatasetError::BadRecord(format!("unsupported version {version}")));
    }
    let count = file.read_u64::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let body_len = file.read_u32::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)? as usize;
        let mut pixels = [0u8; LCU_INPUT_AREA];
        file.read_exact(&mut pixels).map_err(|_| DatasetError::TruncatedFile)?;
        let qp = file.read_u8().map_err(|_| DatasetError::TruncatedFile)?;
        let mut edge_bytes = [0u8; EDGE_COUNT / 8];
        file.read_exact(&mut edge_bytes).map_err(|_| DatasetError::TruncatedFile)?;
        let token_count = file.read_u16::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)? as usize;
        let mut mode_labels = Vec::with_capacity(token_count);
        for _ in 0..token_count {
            let code = file.read_u8().map_err(|_| DatasetError::TruncatedFile)?;
            let mode = SplitMode::from_code(code)
                .ok_or_else(|| DatasetError::BadRecord(format!("invalid mode code {code}")))?;
            mode_labels.push(mode);
        }
        let frame_index = file.read_u32::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)?;
        let lcu_x = file.read_u32::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)?;
        let lcu_y = file.read_u32::<LittleEndian>().map_err(|_| DatasetError::TruncatedFile)?;
        let expect_len = LCU_INPUT_AREA + 1 + EDGE_COUNT / 8 + 2 + token_count + 12;
        if body_len != expect_len {
            return Err(DatasetError::TruncatedFile);
        }
        samples.push(LcuSample {
            input: LcuInput { pixels, qp },
            edge_labels: EdgeVector::unpack_bits(&edge_bytes),
            mode_labels,
            frame_index,
            lcu_x,
            lcu_y,
        });
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(DatasetError::TruncatedFile);
    }
    Ok(samples)
}

/// Oversamples deep records (duplicating seeded-uniform picks) until their
/// fraction reaches `target`. A dataset already at or above the target is
/// returned unchanged.
pub fn balance_dataset(
    samples: &[LcuSample],
    target: f64,
    seed: u64,
) -> Result<Vec<LcuSample>, DatasetError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(DatasetError::InvalidTarget(target));
    }
    if samples.is_empty() {
        return Err(DatasetError::BadRecord("empty dataset".into()));
    }
    let deep_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_deep())
        .map(|(i, _)| i)
        .collect();
    let n = samples.len() as f64;
    let d = deep_idx.len() as f64;
    if d / n >= target {
        return Ok(samples.to_vec());
    }
    if deep_idx.is_empty() {
        return Err(DatasetError::NoDeepSamples);
    }
    // (d + k) / (n + k) >= target
    let k = ((target * n - d) / (1.0 - target)).ceil() as usize;
    let mut out = samples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..k {
        let pick = deep_idx[rng.gen_range(0..deep_idx.len())];
        out.push(samples[pick].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{tree_to_edges, tree_to_modes};
    use crate::constraints::ConstraintRules;
    use crate::oracle::random_legal_tree;

    fn sample_from_seed(seed: u64) -> LcuSample {
        let tree = random_legal_tree(64, &ConstraintRules::default(), seed);
        LcuSample {
            input: LcuInput::flat((seed % 251) as u8, 32),
            edge_labels: tree_to_edges(&tree),
            mode_labels: tree_to_modes(&tree),
            frame_index: seed as u32,
            lcu_x: 0,
            lcu_y: 1,
        }
    }

    #[test]
    fn dataset_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.lcud");
        let samples: Vec<LcuSample> = (0..5).map(sample_from_seed).collect();
        write_dataset(&samples, &path).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(samples, loaded);
    }

    #[test]
    fn unlabeled_records_survive_the_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.lcud");
        let mut s = sample_from_seed(3);
        s.mode_labels.clear();
        s.edge_labels = EdgeVector::zeros();
        write_dataset(&[s.clone()], &path).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert!(!loaded[0].is_labeled());
        assert_eq!(loaded[0], s);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.lcud");
        std::fs::write(&path, b"JUNKJUNKJUNKJUNK").unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::BadMagic)));

        let samples: Vec<LcuSample> = (0..2).map(sample_from_seed).collect();
        write_dataset(&samples, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(DatasetError::TruncatedFile)
        ));
    }

    fn deep_sample() -> LcuSample {
        let mut s = sample_from_seed(0);
        s.edge_labels = EdgeVector([1.0; EDGE_COUNT]);
        s
    }

    fn shallow_sample(seed: u64) -> LcuSample {
        let mut s = sample_from_seed(seed);
        s.edge_labels = EdgeVector::zeros();
        s
    }

    #[test]
    fn balancing_reaches_the_target_fraction() {
        let mut samples: Vec<LcuSample> = (1..=17).map(shallow_sample).collect();
        samples.push(deep_sample());
        samples.push(deep_sample());
        samples.push(deep_sample()); // 3 deep / 20 = 15%
        let out = balance_dataset(&samples, 0.5, 7).unwrap();
        let deep = out.iter().filter(|s| s.is_deep()).count();
        assert!(deep as f64 / out.len() as f64 >= 0.5);
        // deterministic
        let again = balance_dataset(&samples, 0.5, 7).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn already_balanced_dataset_is_unchanged() {
        let samples = vec![deep_sample(), shallow_sample(1)];
        let out = balance_dataset(&samples, 0.5, 7).unwrap();
        assert_eq!(out, samples);
    }

    #[test]
    fn all_shallow_dataset_errors() {
        let samples: Vec<LcuSample> = (1..=4).map(shallow_sample).collect();
        assert!(matches!(
            balance_dataset(&samples, 0.5, 7),
            Err(DatasetError::NoDeepSamples)
        ));
    }
}
