//! Binary prototype-set container.
//!
//! Layout: `PROTOSET` magic, `u32` version, `u64` header length, a JSON
//! header, then the body. The header carries the body's SHA-256 so a
//! truncated or edited file is rejected on load. Body records hold the
//! object id, view count, `f32` vector, viewpoints and an optional PNG
//! thumbnail. All integers and floats are little-endian.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClassificationSet, Prototype, PrototypeError};
use crate::geometry::ViewpointSpec;

const MAGIC: &[u8; 8] = b"PROTOSET";
pub const SET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    set_id: String,
    created_at: String,
    encoder_id: String,
    render_config_digest: String,
    dim: usize,
    n_objects: usize,
    /// Views per prototype when uniform across the set.
    k: Option<usize>,
    body_len: u64,
    body_sha256: String,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("length fits in u32").to_le_bytes());
}

fn encode_body(set: &ClassificationSet) -> Vec<u8> {
    let mut b = Vec::new();
    for p in set.prototypes.values() {
        put_u32(&mut b, p.object_id.len());
        b.extend_from_slice(p.object_id.as_bytes());
        put_u32(&mut b, p.k);
        for x in &p.vector {
            b.extend_from_slice(&x.to_le_bytes());
        }
        put_u32(&mut b, p.viewpoints.len());
        for v in &p.viewpoints {
            for a in [v.azimuth_deg, v.elevation_deg, v.inplane_deg] {
                b.extend_from_slice(&a.to_le_bytes());
            }
        }
        let thumb = p.thumbnail_png.as_deref().unwrap_or(&[]);
        put_u32(&mut b, thumb.len());
        b.extend_from_slice(thumb);
    }
    b
}

/// Serializes a set to bytes.
pub fn encode_set(set: &ClassificationSet) -> Vec<u8> {
    let body = encode_body(set);
    let ks: std::collections::BTreeSet<usize> = set.prototypes.values().map(|p| p.k).collect();
    let header = Header {
        set_id: set.set_id.clone(),
        created_at: set.created_at.clone(),
        encoder_id: set.encoder_id.clone(),
        render_config_digest: set.render_config_digest.clone(),
        dim: set.dim,
        n_objects: set.len(),
        k: if ks.len() == 1 { ks.first().copied() } else { None },
        body_len: body.len() as u64,
        body_sha256: hex::encode(Sha256::digest(&body)),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SET_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&body);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PrototypeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| PrototypeError::Format("record runs past end of body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, PrototypeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f32, PrototypeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PrototypeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn truncated(what: &str) -> PrototypeError {
    PrototypeError::DigestMismatch {
        expected: format!("complete {what}"),
        found: "truncated file".into(),
    }
}

/// Parses bytes written by [`encode_set`]. No encoder is needed: sets are
/// self-describing.
pub fn decode_set(bytes: &[u8]) -> Result<ClassificationSet, PrototypeError> {
    if bytes.len() < MAGIC.len() {
        return Err(truncated("preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(PrototypeError::Format("not a prototype-set file".into()));
    }
    if bytes.len() < 20 {
        return Err(truncated("preamble"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > SET_FORMAT_VERSION {
        return Err(PrototypeError::VersionMismatch {
            found: version,
            supported: SET_FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(20))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| truncated("header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| PrototypeError::Format(format!("header: {e}")))?;
    let body = &bytes[header_end..];
    let found = hex::encode(Sha256::digest(body));
    if body.len() as u64 != header.body_len || found != header.body_sha256 {
        return Err(PrototypeError::DigestMismatch {
            expected: header.body_sha256,
            found,
        });
    }

    let mut r = Reader { buf: body, pos: 0 };
    let mut prototypes = Vec::with_capacity(header.n_objects);
    for _ in 0..header.n_objects {
        let n = r.u32()?;
        let object_id = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| PrototypeError::Format("object id is not UTF-8".into()))?;
        let k = r.u32()?;
        let vector = (0..header.dim).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        let n_views = r.u32()?;
        let mut viewpoints = Vec::with_capacity(n_views);
        for _ in 0..n_views {
            viewpoints.push(ViewpointSpec {
                azimuth_deg: r.f64()?,
                elevation_deg: r.f64()?,
                inplane_deg: r.f64()?,
            });
        }
        let t = r.u32()?;
        let thumb = r.take(t)?;
        prototypes.push(Prototype {
            object_id,
            vector,
            k,
            viewpoints,
            encoder_id: header.encoder_id.clone(),
            thumbnail_png: (!thumb.is_empty()).then(|| thumb.to_vec()),
        });
    }
    if r.pos != body.len() {
        return Err(PrototypeError::Format("trailing bytes after last record".into()));
    }
    let mut set = ClassificationSet::from_prototypes(
        Some(header.set_id),
        prototypes,
        &header.encoder_id,
        &header.render_config_digest,
    )?;
    set.created_at = header.created_at;
    set.dim = header.dim;
    Ok(set)
}

/// Writes the set atomically (temp file then rename).
pub fn save_set(set: &ClassificationSet, path: impl AsRef<Path>) -> Result<(), PrototypeError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode_set(set))?;
    tmp.persist(path).map_err(|e| PrototypeError::Io(e.error))?;
    Ok(())
}

pub fn load_set(path: impl AsRef<Path>) -> Result<ClassificationSet, PrototypeError> {
    decode_set(&std::fs::read(path)?)
}
