//! Text clip files and dataset manifests.
//!
//! A clip file starts with `SKL1 <frames> <joints> <channels> <persons>`
//! followed by `frames * persons` lines of `joints * channels` reals,
//! person-major within each frame. Labels live in `manifest.tsv`.

use std::fs;
use std::path::{Path, PathBuf};

use super::clip::SkeletonClip;
use crate::error::{Error, Result};

pub const CLIP_MAGIC: &str = "SKL1";
pub const MANIFEST: &str = "manifest.tsv";

pub fn format_clip(clip: &SkeletonClip) -> String {
    let mut out = format!(
        "{CLIP_MAGIC} {} {} {} {}\n",
        clip.frames, clip.joints, clip.channels, clip.persons
    );
    let row = clip.joints * clip.channels;
    if row > 0 {
        for line in clip.data.chunks_exact(row) {
            let fields: Vec<String> = line.iter().map(|v| v.to_string()).collect();
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
    }
    out
}

/// Parses clip text; `label` is supplied by the manifest.
pub fn parse_clip(text: &str, label: usize) -> Result<SkeletonClip> {
    let header_end = text.find('\n').unwrap_or(text.len());
    let header = &text[..header_end];
    let mut fields = header.split_whitespace();
    match fields.next() {
        Some(CLIP_MAGIC) => {}
        other => {
            return Err(Error::ParseOffset {
                offset: 0,
                message: format!("unknown clip version {:?}", other.unwrap_or("")),
            })
        }
    }
    let mut dims = [0usize; 4];
    for (i, name) in ["frames", "joints", "channels", "persons"].iter().enumerate() {
        let tok = fields.next().ok_or_else(|| Error::ParseOffset {
            offset: header_end,
            message: format!("header is missing {name}"),
        })?;
        dims[i] = tok.parse().map_err(|_| Error::ParseOffset {
            offset: token_offset(text, tok),
            message: format!("header field {name} is not an integer: '{tok}'"),
        })?;
    }
    let [frames, joints, channels, persons] = dims;
    let expected = frames * persons * joints * channels;
    let body_start = (header_end + 1).min(text.len());
    let mut data = Vec::with_capacity(expected);
    let mut offset = body_start;
    for tok in text[body_start..].split_ascii_whitespace() {
        let at = offset + text[offset..].find(tok).unwrap_or(0);
        offset = at + tok.len();
        let v: f32 = tok.parse().map_err(|_| Error::ParseOffset {
            offset: at,
            message: format!("non-numeric token '{tok}'"),
        })?;
        data.push(v);
    }
    if data.len() != expected {
        return Err(Error::ParseOffset {
            offset: text.len(),
            message: format!(
                "header declares {frames}x{persons}x{joints}x{channels} = {expected} values, found {}",
                data.len()
            ),
        });
    }
    SkeletonClip::new(frames, persons, joints, channels, data, label).map_err(|e| Error::ParseOffset {
        offset: 0,
        message: e.to_string(),
    })
}

fn token_offset(text: &str, tok: &str) -> usize {
    tok.as_ptr() as usize - text.as_ptr() as usize
}

pub fn save_clip(clip: &SkeletonClip, path: &Path) -> Result<()> {
    fs::write(path, format_clip(clip)).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path, label: usize) -> Result<SkeletonClip> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clip(&text, label)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
}

pub fn write_manifest(dir: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("path\tlabel\n");
    for e in entries {
        out.push_str(&format!("{}\t{}\n", e.path.display(), e.label));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("path\t") || line.trim().is_empty() {
            continue;
        }
        let (p, label) = line.split_once('\t').ok_or_else(|| Error::ParseLine {
            line: i + 1,
            message: "expected '<path>\\t<label>'".into(),
        })?;
        let label = label.trim().parse().map_err(|_| Error::ParseLine {
            line: i + 1,
            message: format!("label '{label}' is not a class index"),
        })?;
        entries.push(ManifestEntry {
            path: PathBuf::from(p),
            label,
        });
    }
    Ok(entries)
}
