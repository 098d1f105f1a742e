//! Motion files (`attmotion-motion-v1`) and JSON-lines corpus manifests.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::corpus::{class_by_name, CorpusSample, TextSample, MOTION_CLASSES};
use super::sequence::MotionSequence;
use super::skeleton::{Skeleton, TokenLayout};

pub const MOTION_VERSION: &str = "attmotion-motion-v1";

#[derive(Debug, Serialize, Deserialize)]
struct MotionFile {
    version: String,
    skeleton: Skeleton,
    layout: TokenLayout,
    fps: u32,
    frames: Vec<Vec<f64>>,
}

pub fn motion_to_json(m: &MotionSequence) -> Result<String> {
    let file = MotionFile {
        version: MOTION_VERSION.to_string(),
        skeleton: m.skeleton().clone(),
        layout: m.layout(),
        fps: m.fps(),
        frames: m.frames().to_rows(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn motion_from_json(text: &str, context: &str) -> Result<MotionSequence> {
    let file: MotionFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: format!("{context} line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let parse_err = |field: String, message: String| Error::Parse {
        context: format!("{context} field `{field}`"),
        message,
    };
    if file.version != MOTION_VERSION {
        return Err(parse_err("version".into(), format!("unsupported `{}`", file.version)));
    }
    file.skeleton
        .validate()
        .map_err(|e| parse_err("skeleton".into(), e.to_string()))?;
    if file.frames.len() < 2 {
        return Err(parse_err(
            "frames".into(),
            format!("need at least 2 frames, found {}", file.frames.len()),
        ));
    }
    let width = file.layout.width(file.skeleton.joint_count());
    for (i, row) in file.frames.iter().enumerate() {
        if row.len() != width {
            return Err(parse_err(
                format!("frames[{i}]"),
                format!("width {} does not match layout width {width}", row.len()),
            ));
        }
    }
    let frames = Tensor::from_rows(&file.frames)?;
    MotionSequence::new(frames, file.layout, file.skeleton, file.fps)
        .map_err(|e| parse_err("frames".into(), e.to_string()))
}

pub fn save_motion(m: &MotionSequence, path: &Path) -> Result<()> {
    std::fs::write(path, motion_to_json(m)?).map_err(|e| Error::io(path, e))
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    motion_from_json(&text, &path.display().to_string())
}

/// Frame-per-row CSV with a `frame,f0,f1,...` header.
pub fn motion_to_csv(m: &MotionSequence) -> String {
    let mut out = String::from("frame");
    for c in 0..m.width() {
        out.push_str(&format!(",f{c}"));
    }
    out.push('\n');
    for (t, row) in m.frames().to_rows().iter().enumerate() {
        out.push_str(&t.to_string());
        for v in row {
            // `{:?}` prints the shortest string that round-trips
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

/// Parses [`motion_to_csv`] output back into frames for the given skeleton/layout.
pub fn motion_from_csv(text: &str, layout: TokenLayout, skeleton: Skeleton, fps: u32) -> Result<MotionSequence> {
    let mut rows = Vec::new();
    for (line_no, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .skip(1)
            .enumerate()
            .map(|(col, v)| {
                v.trim().parse::<f64>().map_err(|e| Error::Parse {
                    context: format!("csv line {} column {}", line_no + 1, col + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::SequenceTooShort {
            what: "csv frames",
            len: rows.len(),
            min: 2,
        });
    }
    MotionSequence::new(Tensor::from_rows(&rows)?, layout, skeleton, fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub motion_path: String,
    pub text: String,
    pub class: String,
}

/// Writes every motion under `dir/motions/` and a `dir/manifest.jsonl` index.
pub fn write_corpus(samples: &[CorpusSample], dir: &Path) -> Result<PathBuf> {
    let motions = dir.join("motions");
    std::fs::create_dir_all(&motions).map_err(|e| Error::io(&motions, e))?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("motions/{i:05}.json");
        save_motion(&s.motion, &dir.join(&rel))?;
        let entry = ManifestEntry {
            motion_path: rel,
            text: s.text.sentence.clone(),
            class: MOTION_CLASSES[s.class].name.to_string(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            context: format!("{} line {}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Loads every sample listed in a manifest; motion paths are relative to the manifest.
pub fn load_corpus(manifest: &Path) -> Result<Vec<CorpusSample>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let class = class_by_name(&e.class).ok_or_else(|| Error::Parse {
                context: format!("{} line {} field `class`", manifest.display(), i + 1),
                message: format!("unknown class `{}`", e.class),
            })?;
            Ok(CorpusSample {
                motion: load_motion(&base.join(&e.motion_path))?,
                text: TextSample::new(&e.text)?,
                class,
            })
        })
        .collect()
}
