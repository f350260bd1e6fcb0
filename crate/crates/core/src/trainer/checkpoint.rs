//! Checkpoint format. Layout, all little-endian:
//!
//! ```text
//! magic "LVQC" | version u16 | dtype u8 (0 = f32) | seed u64 | epoch u32
//! | opt_g_t u64 | opt_d_t u64 | config_len u32 | config key=value utf-8
//! | section_count u32
//! | per section: name (u32 len + utf-8), param_count u32,
//!   per param: name (u32 len + utf-8), ndim u8, dims u32 each,
//!              values f32, adam_m f64, adam_v f64
//! ```
//!
//! Parameters are grouped into the four module sections and sorted by name
//! inside each, so identical state always serializes to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use ecgtwin_nn::{ParamStore, Tensor};

use crate::config::Config;
use crate::error::{Error, FormatErrorKind};
use crate::{Result, F};

pub const MAGIC: [u8; 4] = *b"LVQC";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// (section name, parameter prefix); every parameter belongs to exactly one.
const SECTIONS: [(&str, &str); 4] = [
    ("separator", "separator."),
    ("generator", "generator."),
    ("discriminator", "discriminator."),
    ("text_encoder", "text."),
];

/// Everything a saved training state contains.
pub struct Checkpoint {
    pub config: Config,
    pub store: ParamStore<F>,
    pub epoch: u32,
    pub opt_g_t: u64,
    pub opt_d_t: u64,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &Config,
    store: &ParamStore<F>,
    epoch: u32,
    opt_g_t: u64,
    opt_d_t: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    buf.extend_from_slice(&opt_g_t.to_le_bytes());
    buf.extend_from_slice(&opt_d_t.to_le_bytes());
    push_str(&mut buf, &cfg.to_kv_string());

    buf.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
    let mut written = 0usize;
    for (section, prefix) in SECTIONS {
        // Store iteration is name-ordered, so each section comes out sorted.
        let params: Vec<_> = store.iter().filter(|(n, _)| n.starts_with(prefix)).collect();
        push_str(&mut buf, section);
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, slot) in params {
            push_str(&mut buf, name);
            let shape = slot.value.shape();
            buf.push(shape.len() as u8);
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in slot.value.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &m in &slot.m {
                buf.extend_from_slice(&m.to_le_bytes());
            }
            for &v in &slot.v {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            written += 1;
        }
    }
    assert_eq!(written, store.len(), "parameter outside the known sections");

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes).ok().map(|s| s.to_string())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fmt = |kind: FormatErrorKind| Error::Format {
        path: path.display().to_string(),
        kind,
    };
    let mut r = Cursor { bytes: &bytes, pos: 0 };
    let magic = r.take(4).ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    if magic != MAGIC {
        return Err(fmt(FormatErrorKind::BadMagic));
    }
    let version = r.u16().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    if version != FORMAT_VERSION {
        return Err(fmt(FormatErrorKind::UnsupportedVersion));
    }
    let dtype = r.u8().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    if dtype != DTYPE_F32 {
        return Err(fmt(FormatErrorKind::UnsupportedVersion));
    }
    let seed = r.u64().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    let epoch = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    let opt_g_t = r.u64().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    let opt_d_t = r.u64().ok_or_else(|| fmt(FormatErrorKind::Truncated))?;
    let kv = r.string().ok_or_else(|| fmt(FormatErrorKind::BadText))?;
    let config = Config::from_kv_string(&kv)?;
    if config.seed != seed {
        return Err(Error::data(format!(
            "checkpoint {} seed header {} disagrees with its config echo {}",
            path.display(),
            seed,
            config.seed
        )));
    }

    let section_count = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
    let mut store = ParamStore::new();
    for _ in 0..section_count {
        let section = r.string().ok_or_else(|| fmt(FormatErrorKind::BadText))?;
        if !SECTIONS.iter().any(|(s, _)| *s == section) {
            return Err(fmt(FormatErrorKind::BadText));
        }
        let param_count = r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
        for _ in 0..param_count {
            let name = r.string().ok_or_else(|| fmt(FormatErrorKind::BadText))?;
            let ndim = r.u8().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32().ok_or_else(|| fmt(FormatErrorKind::Truncated))? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values: Vec<F> = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(r.f32().ok_or_else(|| fmt(FormatErrorKind::Truncated))?);
            }
            let mut m = Vec::with_capacity(numel);
            for _ in 0..numel {
                m.push(r.f64().ok_or_else(|| fmt(FormatErrorKind::Truncated))?);
            }
            let mut v = Vec::with_capacity(numel);
            for _ in 0..numel {
                v.push(r.f64().ok_or_else(|| fmt(FormatErrorKind::Truncated))?);
            }
            store.restore(&name, Tensor::from_vec(&shape, values), m, v);
        }
    }

    // The parameter set must match what the echoed config defines.
    let specs = crate::model::param_specs(&config.dims);
    if specs.len() != store.len() {
        return Err(Error::data(format!(
            "checkpoint {} holds {} parameters; its config defines {}",
            path.display(),
            store.len(),
            specs.len()
        )));
    }
    for spec in &specs {
        if !store.contains(&spec.name) {
            return Err(Error::data(format!(
                "checkpoint {} is missing parameter {}",
                path.display(),
                spec.name
            )));
        }
    }

    Ok(Checkpoint {
        config,
        store,
        epoch,
        opt_g_t,
        opt_d_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::desk();
        let store = init_params(&cfg);
        let p1 = dir.path().join("a.lvqc");
        let p2 = dir.path().join("b.lvqc");
        save_checkpoint(&p1, &cfg, &store, 7, 35, 35).unwrap();
        let ck = load_checkpoint(&p1).unwrap();
        assert_eq!(ck.epoch, 7);
        assert_eq!(ck.opt_g_t, 35);
        assert_eq!(ck.config.to_kv_string(), cfg.to_kv_string());
        save_checkpoint(&p2, &ck.config, &ck.store, ck.epoch, ck.opt_g_t, ck.opt_d_t).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::desk();
        let store = init_params(&cfg);
        let p = dir.path().join("c.lvqc");
        save_checkpoint(&p, &cfg, &store, 0, 0, 0).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&p, &bytes).unwrap();
        match load_checkpoint(&p).err() {
            Some(Error::Format { kind: FormatErrorKind::BadMagic, .. }) => {}
            other => panic!("expected bad-magic rejection, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = Config::desk();
        let store = init_params(&cfg);
        let p = dir.path().join("d.lvqc");
        save_checkpoint(&p, &cfg, &store, 0, 0, 0).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&p).err() {
            Some(Error::Format { kind: FormatErrorKind::Truncated, .. }) => {}
            other => panic!("expected truncation rejection, got {other:?}"),
        }
    }
}
