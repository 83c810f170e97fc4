//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"KWCK"
//! u32    format version (1)
//! u32    config length, then that many bytes of canonical TOML
//! u32    tensor count
//! repeat tensor:
//!   u16  name length, then the name (UTF-8)
//!   u8   rank, then rank × u32 extents
//!   f32  values × numel, little-endian
//! ```
//!
//! Loading re-validates the config and checks every tensor's name and shape
//! against the layout the config implies.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{tensor_layout, ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"KWCK";
const VERSION: u32 = 1;

/// Write parameters (values stored as f32 regardless of the working type).
pub fn save<T: Real>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let config_text = toml::to_string(&params.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let config_bytes = config_text.as_bytes();
    w.write_all(&(config_bytes.len() as u32).to_le_bytes())?;
    w.write_all(config_bytes)?;

    let layout = tensor_layout(&params.config);
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for ((name, _), tensor) in layout.iter().zip(tensors) {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(buf)
}

/// Load a checkpoint; the stored config is validated and every tensor is
/// checked against the layout it implies.
pub fn load(path: &Path) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    if &read_exact::<4>(&mut r)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_len = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated config: {e}")))?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|e| Error::Checkpoint(format!("config is not UTF-8: {e}")))?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| Error::Checkpoint(format!("config parse: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;

    let count = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let layout = tensor_layout(&config);
    if count != layout.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (expect_name, expect_shape) in &layout {
        let name_len = u16::from_le_bytes(read_exact::<2>(&mut r)?) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?;
        if &name != expect_name {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` out of order, expected `{expect_name}`"
            )));
        }
        let rank = read_exact::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize);
        }
        if &shape != expect_shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {shape:?}, config implies {expect_shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(read_exact::<4>(&mut r)?));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    // trailing bytes mean a corrupt or mismatched file
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    ModelParams::assemble(config, tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params: ModelParams<f32> = ModelParams::build(ModelConfig::tiny(), 5).unwrap();
        save(&path, &params).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn same_params_produce_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let params: ModelParams<f32> = ModelParams::build(ModelConfig::tiny(), 9).unwrap();
        save(&a, &params).unwrap();
        save(&b, &params).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params: ModelParams<f32> = ModelParams::build(ModelConfig::tiny(), 5).unwrap();
        save(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn f64_params_save_as_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params: ModelParams<f64> = ModelParams::build(ModelConfig::tiny(), 5).unwrap();
        save(&path, &params).unwrap();
        let back = load(&path).unwrap();
        for (a, b) in params.tensors().iter().zip(back.tensors()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                assert!((x as f32 - y).abs() <= f32::EPSILON * x.abs() as f32);
            }
        }
    }
}
