//! GLCK model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "GLCK" | version u32 | variant u32 | D u32 | V u32 | max_len u32
//!        | F u32 | heads u32 | layers u32 | ffn u32
//!        | vision_dropout f64 | language_dropout f64
//!        | count u32 | count x { name_len u32 | name | rank u32 | rank x u32 | data f64... }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use numcore::{ParamStore, Tensor};

use crate::encoders::{Model, ModelConfig, Variant};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const VERSION: u32 = 1;

pub fn write_to<W: Write>(model: &Model, w: &mut W) -> std::io::Result<()> {
    let c = model.config();
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        c.variant.tag(),
        c.embed_dim as u32,
        c.vocab_size as u32,
        c.max_len as u32,
        c.feature_dim as u32,
        c.n_heads as u32,
        c.n_layers as u32,
        c.ffn_dim as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&c.vision_dropout.to_le_bytes())?;
    w.write_all(&c.language_dropout.to_le_bytes())?;
    let params = model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_to(model, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn u32_of<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn f64_of<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

pub fn read_from<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a GLCK checkpoint".into()));
    }
    let version = u32_of(r).map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut h = [0u32; 8];
    for v in h.iter_mut() {
        *v = u32_of(r).map_err(truncated)?;
    }
    let variant = Variant::from_tag(h[0]).ok_or_else(|| Error::Format(format!("unknown variant tag {}", h[0])))?;
    let config = ModelConfig {
        variant,
        embed_dim: h[1] as usize,
        vocab_size: h[2] as usize,
        max_len: h[3] as usize,
        feature_dim: h[4] as usize,
        n_heads: h[5] as usize,
        n_layers: h[6] as usize,
        ffn_dim: h[7] as usize,
        vision_dropout: f64_of(r).map_err(truncated)?,
        language_dropout: f64_of(r).map_err(truncated)?,
    };
    let count = u32_of(r).map_err(truncated)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u32_of(r).map_err(truncated)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("parameter name of {len} bytes")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = u32_of(r).map_err(truncated)? as usize;
        if rank > 4 {
            return Err(Error::Format(format!("parameter {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| u32_of(r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(Error::Format(format!("parameter {name} has {n} elements")));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(truncated)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Model::from_params(config, store)
}

pub fn load(path: &Path) -> Result<Model> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant) -> Model {
        let mut c = ModelConfig::new(variant, 6, 9).with_embed_dim(4);
        c.n_heads = 2;
        c.max_len = 7;
        Model::init(c, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for v in Variant::ALL {
            let m = toy(v);
            let mut buf = Vec::new();
            write_to(&m, &mut buf).unwrap();
            let back = read_from(&mut buf.as_slice()).unwrap();
            assert_eq!(back.config(), m.config());
            for ((a, x), (b, y)) in m.params().iter().zip(back.params().iter()) {
                assert_eq!(a, b);
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn header_layout() {
        let m = toy(Variant::CvclT);
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"GLCK");
        let word = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!([word(0), word(1), word(2), word(3), word(4)], [1, 1, 4, 9, 7]);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = toy(Variant::Cvcl);
        let mut buf = Vec::new();
        write_to(&m, &mut buf).unwrap();
        assert!(read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_from(&mut extra.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_from(&mut bad.as_slice()).is_err());
        let mut ver = buf;
        ver[4] = 9;
        assert!(read_from(&mut ver.as_slice()).is_err());
    }
}
