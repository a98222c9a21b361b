//! Parameter checkpoints.
//!
//! Layout: an ASCII manifest line `SARNAS-CKPT v1 <entry-count>\n`, then per
//! entry an ASCII line `<name> <rank> <d0> ... <dk>\n` immediately followed
//! by `prod(dims)` little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const MAGIC: &str = "SARNAS-CKPT v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut out = format!("{MAGIC} {}\n", entries.len()).into_bytes();
    for e in entries {
        let dims: Vec<String> = e.dims.iter().map(|d| d.to_string()).collect();
        out.extend_from_slice(format!("{} {} {}\n", e.name, e.dims.len(), dims.join(" ")).as_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_line(bytes: &[u8], pos: &mut usize) -> Result<String> {
    let start = *pos;
    let end = bytes[start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| start + p)
        .ok_or_else(|| Error::ParseOffset {
            offset: start,
            message: "unterminated header line".into(),
        })?;
    *pos = end + 1;
    String::from_utf8(bytes[start..end].to_vec()).map_err(|_| Error::ParseOffset {
        offset: start,
        message: "header line is not UTF-8".into(),
    })
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0;
    let header = read_line(bytes, &mut pos)?;
    let count: usize = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ParseOffset {
            offset: 0,
            message: format!("expected '{MAGIC} <count>', found '{header}'"),
        })?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = pos;
        let line = read_line(bytes, &mut pos)?;
        let bad = |message: String| Error::ParseOffset { offset: at, message };
        let mut fields = line.split_whitespace();
        let name = fields.next().ok_or_else(|| bad("missing entry name".into()))?.to_string();
        let rank: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("entry {name}: bad rank")))?;
        let dims: Vec<usize> = fields
            .map(|s| s.parse().map_err(|_| bad(format!("entry {name}: bad dimension '{s}'"))))
            .collect::<Result<_>>()?;
        if dims.len() != rank {
            return Err(bad(format!("entry {name}: rank {rank} but {} dims", dims.len())));
        }
        let n: usize = dims.iter().product();
        let need = n * 4;
        if bytes.len() < pos + need {
            return Err(Error::ParseOffset {
                offset: pos,
                message: format!("entry {name}: expected {n} values, found {}", (bytes.len() - pos) / 4),
            });
        }
        let values = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        pos += need;
        entries.push(Entry { name, dims, values });
    }
    if pos != bytes.len() {
        return Err(Error::ParseOffset {
            offset: pos,
            message: format!("{} trailing bytes after {count} entries", bytes.len() - pos),
        });
    }
    Ok(entries)
}

/// Parameters followed by running statistics (`<name>.running_mean`,
/// `<name>.running_var`).
pub fn store_entries<S: Real>(store: &ParamStore<S>) -> Vec<Entry> {
    let to32 = |v: &[S]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
    let mut entries: Vec<Entry> = store
        .params()
        .iter()
        .map(|p| Entry {
            name: p.name.clone(),
            dims: p.shape.dims().to_vec(),
            values: to32(&p.value),
        })
        .collect();
    for s in store.all_stats() {
        entries.push(Entry {
            name: format!("{}.running_mean", s.name),
            dims: vec![s.mean.len()],
            values: to32(&s.mean),
        });
        entries.push(Entry {
            name: format!("{}.running_var", s.name),
            dims: vec![s.var.len()],
            values: to32(&s.var),
        });
    }
    entries
}

/// Overwrites `store` from `entries`; names and shapes must agree exactly
/// and in order.
pub fn restore_store<S: Real>(store: &mut ParamStore<S>, entries: &[Entry]) -> Result<()> {
    let expected = store_entries(store);
    if expected.len() != entries.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} entries, found {}",
            expected.len(),
            entries.len()
        )));
    }
    for (want, got) in expected.iter().zip(entries) {
        if want.name != got.name {
            return Err(Error::Checkpoint(format!("expected tensor {}, found {}", want.name, got.name)));
        }
        if want.dims != got.dims {
            return Err(Error::Checkpoint(format!(
                "tensor {}: expected shape {:?}, found {:?}",
                want.name, want.dims, got.dims
            )));
        }
    }
    let conv = |v: &[f32]| v.iter().map(|&x| S::of(x as f64)).collect::<Vec<S>>();
    let n_params = store.len();
    for (p, e) in store.params_mut().iter_mut().zip(entries) {
        p.value = conv(&e.values);
    }
    for (s, pair) in store.all_stats_mut().iter_mut().zip(entries[n_params..].chunks_exact(2)) {
        s.mean = conv(&pair[0].values);
        s.var = conv(&pair[1].values);
    }
    Ok(())
}

pub fn save_store<S: Real>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    fs::write(path, encode(&store_entries(store))).map_err(|e| Error::io(path, e))
}

pub fn load_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_store<S: Real>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    restore_store(store, &load_entries(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new(Group::Weights);
        s.add("conv.weight", &[2, 1, 3, 3], (0..18).map(|v| v as f32 * 0.25).collect());
        s.add("bn.scale", &[2], vec![1.0, -1.5]);
        s.add_stats("bn", 2);
        s
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let bytes = encode(&store_entries(&s));
        assert!(bytes.starts_with(b"SARNAS-CKPT v1 4\n"));
        let mut t = sample();
        t.params_mut()[1].value = vec![0.0, 0.0];
        restore_store(&mut t, &decode(&bytes).unwrap()).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let s = sample();
        let mut entries = store_entries(&s);
        entries[1].dims = vec![3];
        entries[1].values = vec![0.0; 3];
        let mut t = sample();
        let err = restore_store(&mut t, &entries).unwrap_err();
        assert!(err.to_string().contains("bn.scale"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&store_entries(&sample()));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::ParseOffset { .. })));
        assert!(decode(b"SARNAS-CKPT v2 0\n").is_err());
    }
}
