//! Binary checkpoint container: magic, version, a JSON header for
//! hyperparameters, then named f32 tensors (little-endian).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Mat, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HRTC";
const VERSION: u32 = 1;

/// Writes a checkpoint: `header_json` carries model hyperparameters, tensors
/// come from the parameter set in registration order.
pub fn save(path: &Path, header_json: &str, params: &ParamSet) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    let header = header_json.as_bytes();
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(header)?;
    file.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        file.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        file.write_all(name_bytes)?;
        file.write_all(&(tensor.nrows() as u32).to_le_bytes())?;
        file.write_all(&(tensor.ncols() as u32).to_le_bytes())?;
        for v in tensor.iter() {
            file.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint back as (header JSON, named tensors in file order).
pub fn load(path: &Path) -> Result<(String, Vec<(String, Mat)>)> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    file.read_exact(&mut buf4)?;
    let header_len = u32::from_le_bytes(buf4) as usize;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header)?;
    let header = String::from_utf8(header)
        .map_err(|e| Error::Checkpoint(format!("header not utf-8: {e}")))?;
    file.read_exact(&mut buf4)?;
    let n_tensors = u32::from_le_bytes(buf4) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        file.read_exact(&mut buf4)?;
        let name_len = u32::from_le_bytes(buf4) as usize;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Checkpoint(format!("tensor name not utf-8: {e}")))?;
        file.read_exact(&mut buf4)?;
        let rows = u32::from_le_bytes(buf4) as usize;
        file.read_exact(&mut buf4)?;
        let cols = u32::from_le_bytes(buf4) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            file.read_exact(&mut buf4)?;
            data.push(f32::from_le_bytes(buf4) as f64);
        }
        let mat = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(format!("tensor shape: {e}")))?;
        tensors.push((name, mat));
    }
    Ok((header, tensors))
}

/// Restores tensors into a freshly built parameter set, matching by name and
/// shape.
pub fn restore_into(params: &mut ParamSet, tensors: Vec<(String, Mat)>) -> Result<()> {
    for (name, mat) in tensors {
        let slot = params
            .slot_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if params.get(slot).dim() != mat.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} shape {:?} != expected {:?}",
                mat.dim(),
                params.get(slot).dim()
            )));
        }
        *params.get_mut(slot) = mat;
    }
    Ok(())
}

/// Writes an (epoch, loss) trace as CSV.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "epoch,loss")?;
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(file, "{},{}", epoch + 1, loss)?;
    }
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn roundtrip_preserves_names_shapes_and_f32_values() {
        let mut params = ParamSet::new();
        params.register("enc.w", arr2(&[[0.125, -2.5], [3.75, 0.0]]));
        params.register("dec.b", arr2(&[[1.0e-3, 7.0]]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, r#"{"d_model":2}"#, &params).unwrap();

        let (header, tensors) = load(&path).unwrap();
        assert_eq!(header, r#"{"d_model":2}"#);
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "enc.w");
        // These values are exactly representable in f32.
        assert_eq!(tensors[0].1, arr2(&[[0.125, -2.5], [3.75, 0.0]]));

        let mut fresh = ParamSet::new();
        fresh.register("enc.w", Array2::zeros((2, 2)));
        fresh.register("dec.b", Array2::zeros((1, 2)));
        restore_into(&mut fresh, tensors).unwrap();
        assert_eq!(fresh.get(1), &arr2(&[[1.0e-3f64 as f32 as f64, 7.0]]));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = ParamSet::new();
        params.register("w", arr2(&[[1.0]]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, "{}", &params).unwrap();
        let (_, tensors) = load(&path).unwrap();
        let mut fresh = ParamSet::new();
        fresh.register("w", Array2::zeros((2, 2)));
        assert!(restore_into(&mut fresh, tensors).is_err());
    }
}
