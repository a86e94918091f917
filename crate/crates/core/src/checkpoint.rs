//! "APTC" checkpoint binary: a self-describing header (format version,
//! architecture fields and hash, tuning mode), then a name-sorted tensor
//! table in raw little-endian. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AptError, Result};
use crate::model::ArchSpec;
use crate::numerics::{Scalar, Tensor};
use crate::prompt::{DepthPlacement, TunedModel, TuningMode};

pub const APTC_MAGIC: &[u8; 4] = b"APTC";
pub const APTC_VERSION: u32 = 1;

fn mismatch(msg: String) -> AptError {
    AptError::ArtifactMismatch(msg)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| mismatch(format!("checkpoint truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<R, 4>(r, what)?))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<R, 8>(r, what)?))
}

fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact::<R, 8>(r, what)?))
}

fn mode_to_wire(mode: &TuningMode) -> (u8, u32, u8, u32, f64, u8) {
    match *mode {
        TuningMode::Full => (0, 0, 0, 0, 0.0, 0),
        TuningMode::LinearProbe => (1, 0, 0, 0, 0.0, 0),
        TuningMode::VptDeep { n_p } => (2, n_p as u32, 0, 0, 0.0, 0),
        TuningMode::Apt { n_p, placement, dropout_rate, reparam } => {
            let (ptag, k) = match placement {
                DepthPlacement::All => (0u8, 0u32),
                DepthPlacement::Deepest(k) => (1, k as u32),
                DepthPlacement::Shallowest(k) => (2, k as u32),
            };
            (3, n_p as u32, ptag, k, dropout_rate, reparam as u8)
        }
    }
}

fn mode_from_wire(tag: u8, n_p: u32, ptag: u8, k: u32, dropout: f64, reparam: u8) -> Result<TuningMode> {
    Ok(match tag {
        0 => TuningMode::Full,
        1 => TuningMode::LinearProbe,
        2 => TuningMode::VptDeep { n_p: n_p as usize },
        3 => {
            let placement = match ptag {
                0 => DepthPlacement::All,
                1 => DepthPlacement::Deepest(k as usize),
                2 => DepthPlacement::Shallowest(k as usize),
                other => return Err(mismatch(format!("unknown placement tag {other}"))),
            };
            TuningMode::Apt {
                n_p: n_p as usize,
                placement,
                dropout_rate: dropout,
                reparam: reparam != 0,
            }
        }
        other => return Err(mismatch(format!("unknown mode tag {other}"))),
    })
}

/// Serialize a model. Tensors are written sorted by name; the `pos` buffer
/// is included so a load reproduces the exact forward pass.
pub fn save<E: Scalar>(model: &TunedModel<E>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(APTC_MAGIC)?;
    write_u32(&mut w, APTC_VERSION)?;
    let arch = model.backbone.arch;
    write_u64(&mut w, arch.hash())?;
    for v in [
        arch.embed_dim,
        arch.num_heads,
        arch.depth,
        arch.frames,
        arch.height,
        arch.width,
        arch.channels,
        arch.tubelet_t,
        arch.tubelet_p,
        arch.num_classes,
    ] {
        write_u32(&mut w, v as u32)?;
    }
    write_f64(&mut w, arch.mlp_ratio)?;
    let (tag, n_p, ptag, k, dropout, reparam) = mode_to_wire(&model.mode);
    w.write_all(&[tag])?;
    write_u32(&mut w, n_p)?;
    w.write_all(&[ptag])?;
    write_u32(&mut w, k)?;
    write_f64(&mut w, dropout)?;
    w.write_all(&[reparam])?;
    let dtype = match E::NAME {
        "f32" => 4u8,
        "f64" => 8u8,
        other => return Err(AptError::invariant(format!("unsupported dtype {other}"))),
    };
    w.write_all(&[dtype])?;
    let mut table: Vec<(String, &Tensor<E>)> = model.named();
    table.sort_by(|a, b| a.0.cmp(&b.0));
    write_u32(&mut w, table.len() as u32)?;
    for (name, t) in table {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, t.rows() as u32)?;
        write_u32(&mut w, t.cols() as u32)?;
        for v in t.iter() {
            match dtype {
                4 => w.write_all(&(v.to_f64c() as f32).to_le_bytes())?,
                _ => w.write_all(&v.to_f64c().to_le_bytes())?,
            }
        }
    }
    // Optimizer state is not persisted; the flag reserves the slot.
    w.write_all(&[0u8])?;
    w.flush()?;
    Ok(())
}

/// Load a model saved by [`save`]. The stored arch hash must match the
/// hash recomputed from the stored fields, the dtype must match `E`, and
/// the tensor table must cover the mode's inventory exactly.
pub fn load<E: Scalar>(path: &Path) -> Result<TunedModel<E>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact::<_, 4>(&mut r, "magic")?;
    if &magic != APTC_MAGIC {
        return Err(mismatch(format!("{} is not an APTC checkpoint", path.display())));
    }
    let version = read_u32(&mut r, "version")?;
    if version != APTC_VERSION {
        return Err(mismatch(format!("unsupported checkpoint version {version}")));
    }
    let stored_hash = read_u64(&mut r, "arch hash")?;
    let mut fields = [0usize; 10];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = read_u32(&mut r, "arch fields")? as usize;
        let _ = i;
    }
    let mlp_ratio = read_f64(&mut r, "mlp_ratio")?;
    let arch = ArchSpec {
        embed_dim: fields[0],
        num_heads: fields[1],
        depth: fields[2],
        mlp_ratio,
        frames: fields[3],
        height: fields[4],
        width: fields[5],
        channels: fields[6],
        tubelet_t: fields[7],
        tubelet_p: fields[8],
        num_classes: fields[9],
    };
    if arch.hash() != stored_hash {
        return Err(mismatch("checkpoint arch hash does not match its fields".to_string()));
    }
    let tag = read_exact::<_, 1>(&mut r, "mode tag")?[0];
    let n_p = read_u32(&mut r, "mode n_p")?;
    let ptag = read_exact::<_, 1>(&mut r, "placement tag")?[0];
    let k = read_u32(&mut r, "placement k")?;
    let dropout = read_f64(&mut r, "dropout rate")?;
    let reparam = read_exact::<_, 1>(&mut r, "reparam flag")?[0];
    let mode = mode_from_wire(tag, n_p, ptag, k, dropout, reparam)?;
    let dtype = read_exact::<_, 1>(&mut r, "dtype")?[0];
    let want_dtype = if E::NAME == "f32" { 4u8 } else { 8u8 };
    if dtype != want_dtype {
        return Err(mismatch(format!(
            "checkpoint stores {}-byte scalars but {} was requested",
            dtype,
            E::NAME
        )));
    }
    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut table: BTreeMap<String, Tensor<E>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        if name_len > 4096 {
            return Err(mismatch(format!("implausible tensor name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| mismatch("checkpoint truncated in tensor name".to_string()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| mismatch("tensor name is not UTF-8".to_string()))?;
        let rows = read_u32(&mut r, "tensor rows")? as usize;
        let cols = read_u32(&mut r, "tensor cols")? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = match dtype {
                4 => f32::from_le_bytes(read_exact::<_, 4>(&mut r, "tensor data")?) as f64,
                _ => f64::from_le_bytes(read_exact::<_, 8>(&mut r, "tensor data")?),
            };
            data.push(E::from_f64c(v));
        }
        if table
            .insert(name.clone(), Tensor::from_vec(rows, cols, data)?)
            .is_some()
        {
            return Err(mismatch(format!("duplicate tensor {name}")));
        }
    }
    let _opt_flag = read_exact::<_, 1>(&mut r, "optimizer flag")?[0];

    // Rebuild the model skeleton for this mode, then overwrite every tensor
    // from the table, demanding an exact name/shape correspondence.
    let mut model: TunedModel<E> = TunedModel::init(arch, mode, 0)?;
    let mut seen = 0usize;
    for (name, tensor) in model.named_mut() {
        let stored = table
            .get(&name)
            .ok_or_else(|| mismatch(format!("checkpoint is missing tensor {name}")))?;
        if stored.shape() != tensor.shape() {
            return Err(mismatch(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        *tensor = stored.clone();
        seen += 1;
    }
    if seen != table.len() {
        return Err(mismatch(format!(
            "checkpoint carries {} tensors but the mode expects {seen}",
            table.len()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::checksum_tensors;
    use tempfile::tempdir;

    fn sample_model(seed: u64) -> TunedModel<f32> {
        let arch = ArchSpec::tiny(4);
        let mode = TuningMode::Apt {
            n_p: 3,
            placement: DepthPlacement::Deepest(1),
            dropout_rate: 0.1,
            reparam: true,
        };
        TunedModel::init(arch, mode, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.aptc");
        let mut model = sample_model(5);
        // Perturb away from init so the test is not trivially symmetric.
        model.backbone.head_w.data_mut()[0] = 0.123_456_79;
        if let Some(apt) = &mut model.apt {
            if let Some(bp) = apt.blocks[1].as_mut() {
                bp.scales.as_mut().unwrap().0.set(0, 0, 1.75);
            }
        }
        save(&model, &path).unwrap();
        let loaded: TunedModel<f32> = load(&path).unwrap();
        assert_eq!(loaded.mode, model.mode);
        assert_eq!(
            checksum_tensors(&loaded.named()),
            checksum_tensors(&model.named())
        );
        // Save-of-load is byte-identical on disk too.
        let path2 = dir.path().join("model2.aptc");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn round_trips_every_mode_tag() {
        let dir = tempdir().unwrap();
        let arch = ArchSpec::tiny(2);
        for (i, mode) in [
            TuningMode::Full,
            TuningMode::LinearProbe,
            TuningMode::VptDeep { n_p: 2 },
            TuningMode::Apt {
                n_p: 2,
                placement: DepthPlacement::Shallowest(2),
                dropout_rate: 0.0,
                reparam: false,
            },
        ]
        .into_iter()
        .enumerate()
        {
            let path = dir.path().join(format!("m{i}.aptc"));
            let model: TunedModel<f32> = TunedModel::init(arch, mode, 9).unwrap();
            save(&model, &path).unwrap();
            let loaded: TunedModel<f32> = load(&path).unwrap();
            assert_eq!(loaded.mode, mode);
            assert_eq!(
                checksum_tensors(&loaded.named()),
                checksum_tensors(&model.named())
            );
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.aptc");
        let model = sample_model(7);
        save(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load::<f32>(&path), Err(AptError::ArtifactMismatch(_))));

        // Arch hash poisoned.
        let mut bad = bytes.clone();
        bad[8] ^= 0xff;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load::<f32>(&path), Err(AptError::ArtifactMismatch(_))));

        // Truncated tensor table.
        let bad = &bytes[..bytes.len() - 9];
        std::fs::write(&path, bad).unwrap();
        assert!(matches!(load::<f32>(&path), Err(AptError::ArtifactMismatch(_))));
    }

    #[test]
    fn rejects_dtype_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.aptc");
        save(&sample_model(9), &path).unwrap();
        assert!(matches!(load::<f64>(&path), Err(AptError::ArtifactMismatch(_))));
    }
}
