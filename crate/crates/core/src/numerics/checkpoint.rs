//! TSEG-CKPT: a little-endian container of named float32 tensors.
//!
//! ```text
//! magic  "TSEG-CKPT"   9 bytes
//! version u32
//! count   u32
//! count × { name_len u16, name utf-8, rank u8, dims u32 × rank, values f32 × Π dims }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Parameters, Tensor, MAX_RANK};
use crate::encoders::OffsetReader;
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 9] = b"TSEG-CKPT";
pub const CKPT_VERSION: u32 = 1;

fn invalid(message: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidInput, message.into())
}

pub fn write_checkpoint_to(out: &mut impl Write, entries: &[(&str, &Tensor)]) -> std::io::Result<()> {
    out.write_all(CKPT_MAGIC)?;
    out.write_all(&CKPT_VERSION.to_le_bytes())?;
    let count = u32::try_from(entries.len()).map_err(|_| invalid("too many tensors"))?;
    out.write_all(&count.to_le_bytes())?;
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| invalid("tensor name longer than 65535 bytes"))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| invalid("axis does not fit in u32"))?;
            out.write_all(&d.to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint(path: impl AsRef<Path>, entries: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint_to(&mut out, entries).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_from(reader: impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut r = OffsetReader::new(reader);
    let mut magic = [0u8; 9];
    r.exact(&mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected TSEG-CKPT".into(),
        });
    }
    let version_at = r.offset;
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_at = r.offset;
        let len = r.u16("name length")? as usize;
        let mut name = vec![0u8; len];
        r.exact(&mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format {
            offset: name_at,
            message: "tensor name is not utf-8".into(),
        })?;
        let rank_at = r.offset;
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format {
                offset: rank_at,
                message: format!("rank {rank} outside 1..={MAX_RANK}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let values_at = r.offset;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.exact(&mut buf, "tensor values")?;
        let data: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: values_at + 4 * pos as u64,
                message: format!("non-finite value in {name}"),
            });
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: rank_at,
            message: e.to_string(),
        })?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(BufReader::new(file))
}

pub fn save_params<P: Parameters + ?Sized>(path: impl AsRef<Path>, params: &P) -> Result<()> {
    let params = params.params();
    let entries: Vec<(&str, &Tensor)> = params.iter().map(|p| (p.name.as_str(), &p.value)).collect();
    write_checkpoint(path, &entries)
}

/// Loads values into `params`; names, order and shapes must match exactly.
pub fn load_params<P: Parameters + ?Sized>(path: impl AsRef<Path>, params: &mut P) -> Result<()> {
    let entries = read_checkpoint(path)?;
    let mut params = params.params_mut();
    if entries.len() != params.len() {
        let missing = params
            .iter()
            .find(|p| !entries.iter().any(|(n, _)| *n == p.name))
            .map(|p| p.name.clone())
            .or_else(|| entries.get(params.len()).map(|(n, _)| n.clone()))
            .unwrap_or_default();
        return Err(Error::Parameter {
            name: missing,
            message: format!(
                "checkpoint has {} tensors, model expects {}",
                entries.len(),
                params.len()
            ),
        });
    }
    for (p, (name, tensor)) in params.iter_mut().zip(entries) {
        if p.name != name {
            return Err(Error::Parameter {
                name: p.name.clone(),
                message: format!("checkpoint holds {name} at this position"),
            });
        }
        if p.value.shape() != tensor.shape() {
            return Err(Error::Parameter {
                name,
                message: format!(
                    "shape {:?} in checkpoint, model expects {:?}",
                    tensor.shape(),
                    p.value.shape()
                ),
            });
        }
        p.value = tensor;
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_params() -> Vec<Parameter> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        vec![
            Parameter::new("a.w", Tensor::random(&[3, 4], 1.0, &mut rng)),
            Parameter::new("b", Tensor::random(&[2, 1, 2, 3], 1.0, &mut rng)),
            Parameter::new("c", Tensor::random(&[1], 1.0, &mut rng)),
        ]
    }

    #[test]
    fn round_trip_is_bit_identical_after_first_save() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1.ckpt"), dir.path().join("2.ckpt"));
        let params = sample_params();
        save_params(&p1, &params).unwrap();
        let mut loaded = sample_params();
        loaded.iter_mut().for_each(|p| p.value.fill(0.0));
        load_params(&p1, &mut loaded).unwrap();
        for (a, b) in params.iter().zip(&loaded) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        save_params(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let mut again = loaded.clone();
        load_params(&p2, &mut again).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn header_layout() {
        let t = Tensor::vector(vec![1.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &[("x", &t)]).unwrap();
        let mut expected = b"TSEG-CKPT".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u16.to_le_bytes());
        expected.push(b'x');
        expected.push(1);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1.5f32.to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_checkpoint_from(&buf[..]).unwrap(), vec![("x".to_string(), t)]);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let t = Tensor::vector(vec![1.5, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &[("x", &t)]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint_from(&bad[..]),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut bad = buf.clone();
        bad[9] = 7;
        assert!(matches!(
            read_checkpoint_from(&bad[..]),
            Err(Error::Format { offset: 9, .. })
        ));
        let mut bad = buf.clone();
        bad[20] = 0;
        assert!(matches!(
            read_checkpoint_from(&bad[..]),
            Err(Error::Format { offset: 20, .. })
        ));
        assert!(matches!(
            read_checkpoint_from(&buf[..buf.len() - 1]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mismatches_name_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_params(&path, &sample_params()).unwrap();
        let mut wrong_shape = sample_params();
        wrong_shape[1] = Parameter::new("b", Tensor::zeros(&[4]));
        let err = load_params(&path, &mut wrong_shape).unwrap_err();
        assert!(matches!(&err, Error::Parameter { name, .. } if name == "b"), "{err}");
        let mut wrong_name = sample_params();
        wrong_name[2].name = "z".into();
        let err = load_params(&path, &mut wrong_name).unwrap_err();
        assert!(matches!(&err, Error::Parameter { name, .. } if name == "z"), "{err}");
        let mut fewer = sample_params();
        fewer.pop();
        assert!(load_params(&path, &mut fewer).is_err());
    }
}
