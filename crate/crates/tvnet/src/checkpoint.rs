//! Checkpoint archive.
//!
//! Single-file binary layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "TVNETCKP"
//! version    u32      schema version, currently 1
//! dtype      u8       0 = f32, 1 = f64 parameter storage
//! variant    u8       0 = baseline, 1 = baseline-res, 2 = full
//! vocab      u32      vocabulary size the model was built with
//! cfg_len    u32      byte length of the TOML-encoded Config that follows
//! cfg        bytes    UTF-8 TOML
//! n_params   u32
//! n_params entries of:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8, then ndim u32 dims
//!   data     numel * (4 | 8) bytes, IEEE-754 little-endian
//! ```
//!
//! Parameters are stored and reloaded by name, so a round-trip is
//! bit-identical and a corrupted or mismatched file fails loudly instead of
//! silently misassigning weights.

use std::collections::HashMap;
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::tensor::Real;

const MAGIC: &[u8; 8] = b"TVNETCKP";
const VERSION: u32 = 1;

pub fn save_checkpoint<R: Real>(model: &mut Model<R>, path: &Path) -> Result<()> {
    let cfg_toml = toml::to_string_pretty(&model.cfg)
        .map_err(|e| Error::checkpoint(format!("config did not serialize: {e}")))?;
    let vocab = model.lang.embed.vocab;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(R::DTYPE_TAG);
    buf.push(model.variant.tag());
    buf.extend_from_slice(&(vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg_toml.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_toml.as_bytes());
    let params = model.params_mut();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        buf.push(shape.len() as u8);
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            match R::DTYPE_TAG {
                0 => buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_f64().to_le_bytes()),
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path, self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Model<R>> {
    let buf = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::checkpoint(format!("checkpoint not found: {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };
    if r.take(8)? != MAGIC {
        return Err(Error::checkpoint(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::checkpoint(format!(
            "{}: schema version mismatch: file has {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let dtype = r.u8()?;
    if dtype != R::DTYPE_TAG {
        return Err(Error::checkpoint(format!(
            "{}: parameter dtype tag {dtype} does not match the requested precision (tag {})",
            path.display(),
            R::DTYPE_TAG
        )));
    }
    let variant = Variant::from_tag(r.u8()?)?;
    let vocab = r.u32()? as usize;
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::checkpoint(format!("{}: config block is not UTF-8", path.display())))?;
    let cfg: Config = toml::from_str(cfg_text)
        .map_err(|e| Error::checkpoint(format!("{}: config block: {e}", path.display())))?;
    cfg.validate()?;

    let mut model = Model::<R>::new(&cfg, variant, vocab);
    let mut params = model.params_mut();
    let slots: HashMap<String, usize> =
        params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
    let n_params = r.u32()? as usize;
    if n_params != params.len() {
        return Err(Error::checkpoint(format!(
            "{}: file has {n_params} parameter tensors, model expects {}",
            path.display(),
            params.len()
        )));
    }
    let mut seen = vec![false; params.len()];
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::checkpoint(format!("{}: parameter name not UTF-8", path.display())))?
            .to_string();
        let slot = *slots.get(&name).ok_or_else(|| {
            Error::checkpoint(format!("{}: unknown parameter {name:?}", path.display()))
        })?;
        if seen[slot] {
            return Err(Error::checkpoint(format!("{}: duplicate parameter {name:?}", path.display())));
        }
        seen[slot] = true;
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let p = &mut params[slot].1;
        if p.value.shape() != &dims[..] {
            return Err(Error::checkpoint(format!(
                "{}: {name} has shape {dims:?}, model expects {:?}",
                path.display(),
                p.value.shape()
            )));
        }
        let width = if dtype == 0 { 4 } else { 8 };
        let raw = r.take(p.value.numel() * width)?;
        for (i, chunk) in raw.chunks_exact(width).enumerate() {
            p.value.data_mut()[i] = if dtype == 0 {
                R::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64)
            } else {
                R::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()))
            };
        }
    }
    if r.pos != buf.len() {
        return Err(Error::checkpoint(format!(
            "{}: {} trailing bytes after the last parameter",
            path.display(),
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.image_size = 16;
        cfg.level_resolutions = [8, 4, 2, 2, 2];
        cfg.level_channels = [2, 3, 4, 4, 4];
        cfg.multimodal_width = 4;
        cfg.lang_embed_width = 4;
        cfg.lang_feature_width = 5;
        cfg
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for variant in Variant::ALL {
            let mut model = Model::<f32>::new(&cfg, variant, 22);
            model.init(&mut stream(9, Stream::Init));
            save_checkpoint(&mut model, &path).unwrap();
            let mut loaded = load_checkpoint::<f32>(&path).unwrap();
            assert_eq!(loaded.variant, variant);
            assert_eq!(loaded.cfg, cfg);
            let a = model.params_mut();
            let mut b = loaded.params_mut();
            assert_eq!(a.len(), b.len());
            for ((an, ap), (bn, bp)) in a.iter().zip(b.iter_mut()) {
                assert_eq!(an, bn);
                assert_eq!(ap.value.data(), bp.value.data(), "{an}");
            }
        }
    }

    #[test]
    fn f64_round_trip_preserves_every_bit() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m64.ckpt");
        let mut model = Model::<f64>::new(&cfg, Variant::Baseline, 22);
        model.init(&mut stream(10, Stream::Init));
        // plant awkward values: subnormal, negative zero, extremes
        model.head.bias.as_mut().unwrap().value.data_mut()[0] = -0.0;
        model.head.weight.value.data_mut()[0] = f64::MIN_POSITIVE / 2.0;
        save_checkpoint(&mut model, &path).unwrap();
        let mut loaded = load_checkpoint::<f64>(&path).unwrap();
        for ((_, ap), (_, bp)) in model.params_mut().iter().zip(loaded.params_mut().iter()) {
            let a: Vec<u64> = ap.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = bp.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_file_reports_not_found() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/x.ckpt")).err().expect("must fail");
        assert!(err.to_string().contains("checkpoint not found"), "{err}");
    }

    #[test]
    fn version_and_dtype_mismatches_are_rejected() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::<f32>::new(&cfg, Variant::Baseline, 22);
        model.init(&mut stream(11, Stream::Init));
        save_checkpoint(&mut model, &path).unwrap();

        // bump the version field (bytes 8..12)
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).err().expect("must fail");
        assert!(err.to_string().contains("version mismatch"), "{err}");

        save_checkpoint(&mut model, &path).unwrap();
        let err = load_checkpoint::<f64>(&path).err().expect("must fail");
        assert!(err.to_string().contains("dtype"), "{err}");
    }

    #[test]
    fn corrupted_archives_fail_loudly() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::<f32>::new(&cfg, Variant::Baseline, 22);
        model.init(&mut stream(12, Stream::Init));
        save_checkpoint(&mut model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        // truncation
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());

        // trailing garbage
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &long).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
