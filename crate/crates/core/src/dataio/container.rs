//! Little-endian `NRV1` container.
//!
//! ```text
//! "NRV1" | u32 version | u32 episode count | u32 dim
//! per episode: u16 id_len | id (UTF-8) | u32 L | u32 K
//!              | (L+1)*D f64 query rows | K*D f64 frames | K*D f64 captions
//! ```
//!
//! A sidecar `<stem>.json` manifest is written next to the binary for
//! inspection only; reads never consult it.

use std::path::Path;

use serde::Serialize;

use super::{Dataset, Episode};
use crate::error::{NarvidError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"NRV1";
pub const VERSION: u32 = 1;

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    version: u32,
    dim: usize,
    episodes: Vec<ManifestEntry<'a>>,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    id: &'a str,
    words: usize,
    frames: usize,
}

fn push_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| NarvidError::Validation(format!("{what} {n} does not fit in u32")))
}

pub fn encode_container(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.len(), "episode count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.dim(), "dimension")?.to_le_bytes());
    for ep in ds.episodes() {
        ep.validate()?;
        let id = ep.id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| NarvidError::Validation(format!("episode id `{}` longer than 65535 bytes", ep.id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&to_u32(ep.num_words(), "word count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(ep.num_frames(), "frame count")?.to_le_bytes());
        push_f64s(&mut out, &ep.query_tokens);
        push_f64s(&mut out, &ep.frames);
        push_f64s(&mut out, &ep.captions);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.remaining() < n {
            return None;
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64s(&mut self, n: usize) -> Option<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8)?)?;
        Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    match r.take(4) {
        Some(m) if m == MAGIC => {}
        _ => return Err(NarvidError::Format("missing NRV1 magic".into())),
    }
    let header = |v: Option<u32>| v.ok_or_else(|| NarvidError::Format("truncated header".into()));
    let version = header(r.u32())?;
    if version != VERSION {
        return Err(NarvidError::Format(format!("unsupported container version {version}")));
    }
    let count = header(r.u32())? as usize;
    let dim = header(r.u32())? as usize;
    if dim < 2 {
        return Err(NarvidError::Validation(format!("dataset dimension {dim} < 2")));
    }

    let mut episodes: Vec<Episode> = Vec::with_capacity(count.min(1 << 16));
    for n in 0..count {
        // A malformed record header usually means the previous episode's
        // declared L or K disagrees with the bytes actually written.
        let record_err = |detail: &str| match episodes.last() {
            Some(prev) => NarvidError::Corruption {
                episode: prev.id.clone(),
                detail: format!(
                    "record {n} unreadable after this episode ({detail}); its shape header is inconsistent"
                ),
            },
            None => NarvidError::Corruption { episode: format!("#{n}"), detail: detail.into() },
        };
        let id_len = r.u16().ok_or_else(|| record_err("truncated id length"))? as usize;
        let id_bytes = r.take(id_len).ok_or_else(|| record_err("truncated id"))?;
        let id = std::str::from_utf8(id_bytes).map_err(|_| record_err("id is not UTF-8"))?.to_owned();
        let words = r.u32().ok_or_else(|| record_err("truncated word count"))? as usize;
        let frames = r.u32().ok_or_else(|| record_err("truncated frame count"))? as usize;
        if words == 0 || frames == 0 {
            if n > 0 {
                return Err(record_err("zero word or frame count"));
            }
            return Err(NarvidError::Validation(format!("episode `{id}`: L={words}, K={frames}; both must be >= 1")));
        }
        let corrupt = |detail: String| NarvidError::Corruption { episode: id.clone(), detail };
        let need = (words + 1 + 2 * frames).checked_mul(dim).and_then(|v| v.checked_mul(8));
        let need = match need {
            Some(v) if v <= bytes.len() => v,
            // larger than the whole file: this header is misaligned garbage
            _ if n > 0 => return Err(record_err("implausible shape header")),
            _ => return Err(corrupt(format!("declared L={words}, K={frames} exceed the file size"))),
        };
        if need > r.remaining() {
            return Err(corrupt(format!(
                "declares L={words}, K={frames} ({need} payload bytes) but only {} bytes remain",
                r.remaining()
            )));
        }
        let mut matrix = |rows: usize| -> Result<Tensor> {
            let data = r.f64s(rows * dim).expect("length checked");
            Tensor::matrix(rows, dim, data).map_err(|e| NarvidError::Validation(format!("episode `{id}`: {e}")))
        };
        let query = matrix(words + 1)?;
        let fr = matrix(frames)?;
        let caps = matrix(frames)?;
        episodes.push(Episode::new(id.clone(), query, fr, caps)?);
    }
    if r.remaining() != 0 {
        let episode = episodes.last().map_or_else(|| "<header>".to_owned(), |e| e.id.clone());
        return Err(NarvidError::Corruption {
            episode,
            detail: format!("{} trailing bytes after the last declared episode", r.remaining()),
        });
    }
    Dataset::new(dim, episodes)
}

/// Writes the binary container and its sidecar manifest.
pub fn write_container(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_container(ds)?;
    std::fs::write(path, bytes).map_err(|e| NarvidError::io(path, e))?;
    let manifest = Manifest {
        format: "NRV1",
        version: VERSION,
        dim: ds.dim(),
        episodes: ds
            .episodes()
            .iter()
            .map(|e| ManifestEntry { id: &e.id, words: e.num_words(), frames: e.num_frames() })
            .collect(),
    };
    let sidecar = path.with_extension("json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&sidecar, text + "\n").map_err(|e| NarvidError::io(&sidecar, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| NarvidError::io(path, e))?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::tests::tiny_episode;

    fn sample() -> Dataset {
        Dataset::new(3, vec![tiny_episode("alpha", 2), tiny_episode("beta", 3), tiny_episode("γ", 1)]).unwrap()
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = Dataset::new(4, vec![]).unwrap();
        let bytes = encode_container(&ds).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_container(&bytes).unwrap(), ds);
    }

    #[test]
    fn three_episode_round_trip() {
        let ds = sample();
        assert_eq!(decode_container(&encode_container(&ds).unwrap()).unwrap(), ds);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_container(&bytes), Err(NarvidError::Format(_))));
        assert!(matches!(decode_container(b"NR"), Err(NarvidError::Format(_))));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_container(&bytes), Err(NarvidError::Format(_))));
    }

    #[test]
    fn truncated_payload_names_episode() {
        let bytes = encode_container(&sample()).unwrap();
        let err = decode_container(&bytes[..bytes.len() - 5]).unwrap_err();
        match err {
            NarvidError::Corruption { episode, .. } => assert_eq!(episode, "γ"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn frame_count_mismatch_names_episode() {
        // first episode's K lives after magic(4)+3*u32(12)+u16(2)+"alpha"(5)+L(4)
        let mut bytes = encode_container(&sample()).unwrap();
        let k_at = 4 + 12 + 2 + 5 + 4;
        assert_eq!(u32::from_le_bytes(bytes[k_at..k_at + 4].try_into().unwrap()), 2);
        bytes[k_at] = 3;
        match decode_container(&bytes).unwrap_err() {
            NarvidError::Corruption { episode, .. } => assert_eq!(episode, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
        bytes[k_at] = 1;
        match decode_container(&bytes).unwrap_err() {
            NarvidError::Corruption { episode, .. } => assert_eq!(episode, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_corruption() {
        let mut bytes = encode_container(&sample()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_container(&bytes), Err(NarvidError::Corruption { .. })));
    }

    #[test]
    fn non_finite_payload_is_validation_error() {
        let mut bytes = encode_container(&sample()).unwrap();
        let first_value = 4 + 12 + 2 + 5 + 8;
        bytes[first_value..first_value + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_container(&bytes), Err(NarvidError::Validation(_))));
    }

    #[test]
    fn zero_frames_is_validation_error() {
        let mut bytes = encode_container(&sample()).unwrap();
        let k_at = 4 + 12 + 2 + 5 + 4;
        bytes[k_at] = 0;
        assert!(matches!(decode_container(&bytes), Err(NarvidError::Validation(_))));
    }

    #[test]
    fn files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.nrv");
        write_container(&sample(), &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), sample());
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("set.json")).unwrap()).unwrap();
        assert_eq!(manifest["episodes"][1]["id"], "beta");
        assert_eq!(manifest["episodes"][1]["frames"], 3);
        assert_eq!(manifest["episodes"][1]["words"], 1);
        assert!(matches!(read_container(dir.path().join("missing.nrv")), Err(NarvidError::Io { .. })));
    }
}
