//! Versioned binary checkpoint: named tensors with shapes plus opaque named
//! extras (model config, source means, reference rows). Reload is bit exact.

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 8] = b"GMCCKPT\0";
const VERSION: u32 = 1;

pub fn save_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
    store: &ParamStore<F>,
    extras: &[(String, Vec<u8>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(F::DTYPE_TAG);
    buf.extend_from_slice(&store.step().to_le_bytes());
    buf.extend_from_slice(&(store.param_count() as u32).to_le_bytes());
    for (name, rows, cols, values) in store.entries() {
        write_name(&mut buf, name)?;
        buf.extend_from_slice(&(rows as u32).to_le_bytes());
        buf.extend_from_slice(&(cols as u32).to_le_bytes());
        for &v in values {
            v.write_le(&mut buf);
        }
    }
    buf.extend_from_slice(&(extras.len() as u32).to_le_bytes());
    for (name, bytes) in extras {
        write_name(&mut buf, name)?;
        buf.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    std::fs::write(path.as_ref(), buf)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(ParamStore<F>, Vec<(String, Vec<u8>)>)> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::InvalidInput("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::InvalidInput(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != F::DTYPE_TAG {
        return Err(Error::InvalidInput(format!(
            "checkpoint dtype tag {} does not match requested scalar width {}",
            dtype[0],
            F::DTYPE_TAG
        )));
    }
    let step = read_u64(&mut r)?;
    let param_count = read_u32(&mut r)? as usize;

    let mut store = ParamStore::new();
    let width = F::DTYPE_TAG as usize;
    for _ in 0..param_count {
        let name = read_name(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut bytes = vec![0u8; rows * cols * width];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(width).map(F::read_le).collect();
        store.register(&name, rows, cols, values)?;
    }
    store.set_step(step);

    let extras_count = read_u32(&mut r)? as usize;
    let mut extras = Vec::with_capacity(extras_count);
    for _ in 0..extras_count {
        let name = read_name(&mut r)?;
        let len = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; len];
        r.read_exact(&mut bytes)?;
        extras.push((name, bytes));
    }
    Ok((store, extras))
}

fn write_name(buf: &mut Vec<u8>, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::InvalidInput(format!("name too long: {name:?}")));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

fn read_name(r: &mut impl Read) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)?;
    let mut bytes = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("bad name in checkpoint: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netprims::params::he_init;

    fn sample_store<F: Scalar>() -> ParamStore<F> {
        let mut store = ParamStore::new();
        store.register("a.weight", 2, 3, he_init(3, "a.weight", 3, 6)).unwrap();
        store.register("a.bias", 1, 3, he_init(3, "a.bias", 1, 3)).unwrap();
        store.set_step(17);
        store
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store: ParamStore<f64> = sample_store();
        let extras = vec![("config".to_string(), b"{\"x\":1}".to_vec())];
        save_checkpoint(&path, &store, &extras).unwrap();
        let (loaded, loaded_extras) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.step(), 17);
        assert_eq!(loaded_extras, extras);
        for (id_a, id_b) in store.ids().zip(loaded.ids()) {
            assert_eq!(store.name(id_a), loaded.name(id_b));
            assert_eq!(store.shape(id_a), loaded.shape(id_b));
            let bits_a: Vec<u64> = store.value(id_a).iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = loaded.value(id_b).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store: ParamStore<f32> = sample_store();
        save_checkpoint(&path, &store, &[]).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        for (id_a, id_b) in store.ids().zip(loaded.ids()) {
            let bits_a: Vec<u32> = store.value(id_a).iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = loaded.value(id_b).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store: ParamStore<f32> = sample_store();
        save_checkpoint(&path, &store, &[]).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}
