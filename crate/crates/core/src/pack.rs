//! Binary calibration-pack files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "TCCPACK1"
//! version      u32
//! fingerprint  u64
//! d            u32
//! window       u32 first, u32 last   (u32::MAX twice for no window)
//! alpha        f64
//! variant      u8
//! pooling      u8
//! count        u32
//! count × operator:
//!   step u32, layer u32, module u32
//!   mu_a  d × f64
//!   mu_b  d × f64
//!   scale f64
//!   R     d × d × f64, row-major
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::calibration::{CalibrationOperator, PoolingMode, Variant};
use crate::denoiser::{ModuleKind, SiteId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::trajectory::{CalibrationPack, CalibrationWindow};

pub const MAGIC: &[u8; 8] = b"TCCPACK1";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4 + 4 + 8 + 1 + 1 + 4;
const NO_WINDOW: u32 = u32::MAX;

pub fn operator_len(d: usize) -> usize {
    12 + 8 * (2 * d + 1 + d * d)
}

pub fn encode_pack(pack: &CalibrationPack) -> Result<Vec<u8>> {
    let d = pack.dim().unwrap_or(0);
    if let Some(op) = pack.operators.values().find(|op| op.dim() != d || op.rotation.shape() != (d, d)) {
        return Err(Error::MalformedPack(format!("operator at {} has dimension {}, pack has {d}", op.site, op.dim())));
    }
    let u32_of = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::MalformedPack(format!("{what} {v} exceeds u32")));

    let mut out = Vec::with_capacity(HEADER_LEN + pack.len() * operator_len(d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&pack.fingerprint.to_le_bytes());
    out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
    let (first, last) = match pack.window {
        Some(w) => (u32_of(w.first, "window")?, u32_of(w.last, "window")?),
        None => (NO_WINDOW, NO_WINDOW),
    };
    out.extend_from_slice(&first.to_le_bytes());
    out.extend_from_slice(&last.to_le_bytes());
    out.extend_from_slice(&pack.alpha.to_le_bytes());
    out.push(pack.variant.code());
    out.push(pack.pooling.code());
    out.extend_from_slice(&u32_of(pack.len(), "operator count")?.to_le_bytes());

    for (site, op) in &pack.operators {
        out.extend_from_slice(&u32_of(site.step_index, "step")?.to_le_bytes());
        out.extend_from_slice(&u32_of(site.layer, "layer")?.to_le_bytes());
        out.extend_from_slice(&site.module.code().to_le_bytes());
        for v in op.mu_a.iter().chain(&op.mu_b).chain([&op.scale]).chain(op.rotation.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.bytes.len() < N {
            return Err(Error::UnexpectedEof);
        }
        let (head, rest) = self.bytes.split_at(N);
        self.bytes = rest;
        Ok(head.try_into().expect("split at N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.take().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.take().map(f64::from_le_bytes)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

/// Parses a pack without checking its fingerprint.
pub fn decode_pack(bytes: &[u8]) -> Result<CalibrationPack> {
    let mut r = Reader { bytes };
    if &r.take::<8>()? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let fingerprint = r.u64()?;
    let d = r.u32()? as usize;
    let window = match (r.u32()?, r.u32()?) {
        (NO_WINDOW, NO_WINDOW) => None,
        (first, last) if first >= last => Some(CalibrationWindow {
            first: first as usize,
            last: last as usize,
        }),
        (first, last) => return Err(Error::MalformedPack(format!("window {first}..{last}"))),
    };
    let alpha = r.f64()?;
    let variant_code = r.u8()?;
    let variant = Variant::from_code(variant_code).ok_or_else(|| Error::MalformedPack(format!("variant code {variant_code}")))?;
    let pooling_code = r.u8()?;
    let pooling =
        PoolingMode::from_code(pooling_code).ok_or_else(|| Error::MalformedPack(format!("pooling code {pooling_code}")))?;
    let count = r.u32()?;

    let mut operators = BTreeMap::new();
    for _ in 0..count {
        let step = r.u32()? as usize;
        let layer = r.u32()? as usize;
        let kind = r.u32()?;
        let module = ModuleKind::from_code(kind).ok_or_else(|| Error::MalformedPack(format!("module code {kind}")))?;
        let site = SiteId::new(step, layer, module);
        let mu_a = r.f64s(d)?;
        let mu_b = r.f64s(d)?;
        let scale = r.f64()?;
        let rotation = Matrix::from_vec(d, d, r.f64s(d * d)?)?;
        let op = CalibrationOperator {
            site,
            mu_a,
            mu_b,
            rotation,
            scale,
            alpha,
            variant,
        };
        if operators.insert(site, op).is_some() {
            return Err(Error::MalformedPack(format!("duplicate operator at {site}")));
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::MalformedPack(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(CalibrationPack {
        fingerprint,
        window,
        pooling,
        alpha,
        variant,
        operators,
    })
}

pub fn save_pack(pack: &CalibrationPack, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pack(pack)?)?;
    Ok(())
}

/// Loads a pack and checks it was estimated under `expected_fingerprint`.
pub fn load_pack(path: &Path, expected_fingerprint: u64) -> Result<CalibrationPack> {
    let pack = decode_pack(&std::fs::read(path)?)?;
    if pack.fingerprint != expected_fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: expected_fingerprint,
            found: pack.fingerprint,
        });
    }
    Ok(pack)
}
