//! Checkpoint files: magic `APNCKPT1`, u32 version, a tensor record stream
//! holding the parameters, then the training configuration as UTF-8 text up
//! to the end of the file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Architecture, ModelParams};
use crate::data::{check_magic, read_records, write_records, AnyTensor, TensorRef};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"APNCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const INPUT_SIZE_RECORD: &str = "input_size";

fn to_ref<T: Float>(t: &Tensor<T>) -> AnyTensor {
    match T::DTYPE {
        crate::tensor::DType::F32 => AnyTensor::F32(t.cast()),
        crate::tensor::DType::F64 => AnyTensor::F64(t.cast()),
    }
}

pub fn save_checkpoint<T: Float>(
    params: &ModelParams<T>,
    config_text: &str,
    path: &Path,
) -> Result<()> {
    let mut records: Vec<(String, AnyTensor)> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| (name, to_ref(t)))
        .collect();
    records.push((
        INPUT_SIZE_RECORD.to_string(),
        AnyTensor::F64(Tensor::scalar(params.arch.input_size as f64)),
    ));
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_records(
        records.iter().map(|(n, t)| (n.clone(), TensorRef::from(t))),
        &mut buf,
    )
    .map_err(|e| Error::io(path, e))?;
    buf.extend_from_slice(config_text.as_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn take<T: Float>(
    map: &mut HashMap<String, AnyTensor>,
    name: &str,
    path: &Path,
) -> Result<Tensor<T>> {
    map.remove(name)
        .map(|t| t.to())
        .ok_or_else(|| Error::InvalidData(format!("{}: missing tensor `{name}`", path.display())))
}

/// Reads a checkpoint, converting the stored element type to `T`. Returns the
/// parameters and the configuration text.
pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(ModelParams<T>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(if bytes.len() >= 8 && &bytes[..8] == CHECKPOINT_MAGIC {
            Error::Truncated {
                path: path.to_path_buf(),
                detail: "missing format version".into(),
            }
        } else {
            Error::BadMagic {
                path: path.to_path_buf(),
            }
        });
    }
    check_magic(&bytes[..8], CHECKPOINT_MAGIC, b"APNCKPT", path)?;
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (records, used) = read_records(&bytes[12..], path)?;
    let config = std::str::from_utf8(&bytes[12 + used..])
        .map_err(|_| {
            Error::InvalidData(format!(
                "{}: configuration text is not UTF-8",
                path.display()
            ))
        })?
        .to_string();

    let mut map: HashMap<String, AnyTensor> = records.into_iter().collect();
    let input_size = take::<f64>(&mut map, INPUT_SIZE_RECORD, path)?.data()[0] as usize;
    let v = take(&mut map, "V", path)?;
    let p = take(&mut map, "P", path)?;
    let mismatch = |detail: String| Error::DimensionMismatch {
        path: path.to_path_buf(),
        detail,
    };
    if v.ndim() != 2 || p.ndim() != 2 || p.shape() != [v.shape()[1], v.shape()[0]] {
        return Err(mismatch(format!(
            "V {:?} and P {:?} disagree",
            v.shape(),
            p.shape()
        )));
    }
    let mut conv_w = Vec::new();
    let mut conv_b = Vec::new();
    let mut channels = Vec::new();
    for i in 0.. {
        let name = format!("enc{i}.w");
        if !map.contains_key(&name) {
            break;
        }
        let w = take(&mut map, &name, path)?;
        let b = take(&mut map, &format!("enc{i}.b"), path)?;
        if w.ndim() != 4 || b.shape() != [w.shape()[0]] {
            return Err(mismatch(format!(
                "block {i}: weight {:?}, bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        if channels.is_empty() {
            channels.push(w.shape()[1]);
        } else if *channels.last().expect("non-empty") != w.shape()[1] {
            return Err(mismatch(format!("block {i} input channels do not chain")));
        }
        channels.push(w.shape()[0]);
        conv_w.push(w);
        conv_b.push(b);
    }
    if channels.is_empty() {
        channels.push(v.shape()[0]);
    }
    if *channels.last().expect("non-empty") != v.shape()[0] {
        return Err(mismatch(format!(
            "encoder output does not match V {:?}",
            v.shape()
        )));
    }
    if let Some(extra) = map.keys().next() {
        return Err(Error::InvalidData(format!(
            "{}: unexpected tensor `{extra}`",
            path.display()
        )));
    }
    let arch = Architecture::new(channels, input_size, v.shape()[1])?;
    Ok((
        ModelParams {
            arch,
            conv_w,
            conv_b,
            v,
            p,
        },
        config,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let arch = Architecture::new(vec![3, 4, 5], 12, 6).unwrap();
        let params = ModelParams::<f32>::init(arch, 11);
        save_checkpoint(&params, "lr = 0.001\n", &path).unwrap();
        let (back, text) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(text, "lr = 0.001\n");
        let (wide, _) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(wide.cast::<f32>(), params);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let params = ModelParams::<f64>::init(Architecture::new(vec![2], 4, 3).unwrap(), 1);
        save_checkpoint(&params, "", &path).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Truncated { .. })
        ));

        let mut bad = bytes.clone();
        bad[7] = b'9';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::Version { found: 9, .. })
        ));

        bad[0] = b'Z';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(Error::BadMagic { .. })
        ));
    }
}
