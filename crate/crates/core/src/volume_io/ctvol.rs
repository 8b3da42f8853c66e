//! The CTVOL1 container.
//!
//! Four ASCII header lines, each ending in a single `\n`:
//!
//! ```text
//! CTVOL1
//! <nx> <ny> <nz>
//! <sx> <sy> <sz>
//! <key>=<value>;<key>=<value>
//! ```
//!
//! followed by `nx*ny*nz` signed 16-bit little-endian HU values, x-fastest.
//! Spacing is written in Rust's shortest round-trip float notation (`1.0`,
//! `2.5`, `0.7`), so files produced here reparse and rewrite byte-identically.

use std::path::Path;

use super::{CtVolume, Metadata, Result, VolumeError, HU_MAX, HU_MIN};

const MAGIC: &str = "CTVOL1";

pub fn write_ctvol(v: &CtVolume) -> Result<Vec<u8>> {
    v.validate()?;
    let [nx, ny, nz] = v.dims;
    let [sx, sy, sz] = v.spacing;
    let meta = v
        .meta
        .iter()
        .map(|(k, val)| format!("{k}={val}"))
        .collect::<Vec<_>>()
        .join(";");
    let header = format!("{MAGIC}\n{nx} {ny} {nz}\n{sx:?} {sy:?} {sz:?}\n{meta}\n");
    let mut out = Vec::with_capacity(header.len() + 2 * v.voxels.len());
    out.extend_from_slice(header.as_bytes());
    for hu in &v.voxels {
        out.extend_from_slice(&hu.to_le_bytes());
    }
    Ok(out)
}

pub fn write_ctvol_file(v: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_ctvol(v)?)?;
    Ok(())
}

pub fn read_ctvol(path: impl AsRef<Path>) -> Result<CtVolume> {
    parse_ctvol(&std::fs::read(path)?)
}

/// Parses a CTVOL1 byte stream. Out-of-range HU values are clamped and
/// logged rather than rejected.
pub fn parse_ctvol(bytes: &[u8]) -> Result<CtVolume> {
    let (vol, clamped) = parse_ctvol_counting(bytes)?;
    if clamped > 0 {
        log::warn!("clamped {clamped} voxels into [{HU_MIN}, {HU_MAX}] HU");
    }
    Ok(vol)
}

/// Like [`parse_ctvol`], also returning the number of clamped voxels.
pub fn parse_ctvol_counting(bytes: &[u8]) -> Result<(CtVolume, usize)> {
    let mut lines = Vec::with_capacity(4);
    let mut pos = 0;
    while lines.len() < 4 {
        let rest = &bytes[pos..];
        let Some(nl) = rest.iter().position(|&b| b == b'\n') else {
            if lines.is_empty() && !MAGIC.as_bytes().starts_with(rest) {
                return Err(VolumeError::BadMagic);
            }
            return Err(VolumeError::MalformedHeader("header ends early".into()));
        };
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| VolumeError::MalformedHeader("header is not ASCII".into()))?;
        if lines.is_empty() && line != MAGIC {
            return Err(VolumeError::BadMagic);
        }
        lines.push(line);
        pos += nl + 1;
    }

    let dims = parse_fields::<usize, 3>(lines[1], "dims")?;
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::MalformedHeader(format!("non-positive dims {dims:?}")));
    }
    let spacing = parse_fields::<f64, 3>(lines[2], "spacing")?;
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(VolumeError::MalformedHeader(format!("non-positive spacing {spacing:?}")));
    }
    let meta = parse_meta(lines[3])?;

    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(2).map(|_| n))
        .ok_or_else(|| VolumeError::MalformedHeader(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[pos..];
    let expected = 2 * count;
    if payload.len() < expected {
        return Err(VolumeError::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(VolumeError::TrailingBytes(payload.len() - expected));
    }

    let mut clamped = 0;
    let voxels = payload
        .chunks_exact(2)
        .map(|c| {
            let hu = i16::from_le_bytes([c[0], c[1]]);
            if (HU_MIN..=HU_MAX).contains(&hu) {
                hu
            } else {
                clamped += 1;
                hu.clamp(HU_MIN, HU_MAX)
            }
        })
        .collect();
    let vol = CtVolume { dims, spacing, voxels, meta };
    Ok((vol, clamped))
}

fn parse_fields<T: std::str::FromStr, const N: usize>(line: &str, what: &str) -> Result<[T; N]> {
    let parts: Vec<&str> = line.split(' ').collect();
    if parts.len() != N {
        return Err(VolumeError::MalformedHeader(format!("{what}: expected {N} fields in {line:?}")));
    }
    let mut parsed = Vec::with_capacity(N);
    for p in parts {
        parsed.push(
            p.parse::<T>()
                .map_err(|_| VolumeError::MalformedHeader(format!("{what}: bad number {p:?}")))?,
        );
    }
    parsed
        .try_into()
        .map_err(|_| VolumeError::MalformedHeader(what.to_string()))
}

fn parse_meta(line: &str) -> Result<Metadata> {
    let mut meta = Metadata::new();
    if line.is_empty() {
        return Ok(meta);
    }
    for entry in line.split(';') {
        let (k, v) = entry
            .split_once('=')
            .ok_or_else(|| VolumeError::MalformedHeader(format!("metadata entry {entry:?}")))?;
        if k.is_empty() {
            return Err(VolumeError::MalformedHeader("empty metadata key".into()));
        }
        meta.0.push((k.to_string(), v.to_string()));
    }
    Ok(meta)
}
