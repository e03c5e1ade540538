//! Weights file format: magic "LCUW", u32 version, the config block as u32
//! little-endian values, then a name/shape/payload table per tensor.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tensor::TensorF32;
use super::{ModelConfig, ModelWeights, NnError};

const MAGIC: &[u8; 4] = b"LCUW";
const VERSION: u32 = 1;

fn config_words(cfg: &ModelConfig) -> [u32; 10] {
    [
        cfg.decoder_layers as u32,
        cfg.model_dim as u32,
        cfg.heads as u32,
        cfg.vocab_out as u32,
        cfg.max_seq as u32,
        cfg.cnn_stem_channels as u32,
        cfg.cnn_stage_channels[0] as u32,
        cfg.cnn_stage_channels[1] as u32,
        cfg.cnn_stage_channels[2] as u32,
        cfg.cnn_stage_channels[3] as u32,
    ]
}

fn config_from_words(words: &[u32; 10], qp_max: u32) -> ModelConfig {
    ModelConfig {
        decoder_layers: words[0] as usize,
        model_dim: words[1] as usize,
        heads: words[2] as usize,
        vocab_out: words[3] as usize,
        max_seq: words[4] as usize,
        cnn_stem_channels: words[5] as usize,
        cnn_stage_channels: [
            words[6] as usize,
            words[7] as usize,
            words[8] as usize,
            words[9] as usize,
        ],
        qp_max,
    }
}

pub fn save_weights(w: &ModelWeights, path: &Path) -> Result<(), NnError> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    for word in config_words(&w.config) {
        out.write_u32::<LittleEndian>(word)?;
    }
    out.write_u32::<LittleEndian>(w.config.qp_max)?;
    out.write_u32::<LittleEndian>(w.tensors().len() as u32)?;
    for (name, tensor) in w.tensors() {
        out.write_u16::<LittleEndian>(name.len() as u16)?;
        out.write_all(name.as_bytes())?;
        out.write_u8(tensor.shape().len() as u8)?;
        for &d in tensor.shape() {
            out.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in tensor.data() {
            out.write_f32::<LittleEndian>(v)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<ModelWeights, NnError> {
    let mut file = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut file, &mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = read_u32(&mut file)?;
    if version != VERSION {
        return Err(NnError::ShapeMismatch(format!(
            "unsupported weights version {version}"
        )));
    }
    let mut words = [0u32; 10];
    for w in &mut words {
        *w = read_u32(&mut file)?;
    }
    let qp_max = read_u32(&mut file)?;
    let config = config_from_words(&words, qp_max);
    let count = read_u32(&mut file)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = file
            .read_u16::<LittleEndian>()
            .map_err(|_| NnError::TruncatedFile)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut file, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| NnError::ShapeMismatch("tensor name is not UTF-8".into()))?;
        let rank = file.read_u8().map_err(|_| NnError::TruncatedFile)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut file)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0f32; numel];
        for v in &mut data {
            *v = file
                .read_f32::<LittleEndian>()
                .map_err(|_| NnError::TruncatedFile)?;
        }
        tensors.insert(name, TensorF32::from_vec(&shape, data));
    }
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(NnError::TruncatedFile);
    }
    ModelWeights::from_tensors(config, tensors)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    r.read_u32::<LittleEndian>().map_err(|_| NnError::TruncatedFile)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), NnError> {
    r.read_exact(buf).map_err(|_| NnError::TruncatedFile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lcuw");
        let w = ModelWeights::init(ModelConfig::reduced(), 21);
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(w, loaded);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lcuw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(load_weights(&path), Err(NnError::BadMagic)));
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.lcuw");
        let w = ModelWeights::init(ModelConfig::reduced(), 21);
        save_weights(&w, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_weights(&path), Err(NnError::TruncatedFile)));
        // trailing garbage is inconsistent with the shape table too
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(load_weights(&path), Err(NnError::TruncatedFile)));
    }
}
