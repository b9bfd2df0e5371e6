//! Annotation files, raster images and on-disk dataset splits.
//!
//! # Annotation file (JSON Lines, version 1)
//!
//! The first line is a header, every further line one annotation:
//!
//! ```text
//! {"format":"mgan-annotations","version":1}
//! {"image_id":"val_00003","full":{"x":40.0,"y":8.0,"w":27.0,"h":66.0},"visible":{"x":40.0,"y":8.0,"w":27.0,"h":31.0},"silhouette":{"x":40,"y":8,"w":27,"h":66,"runs":[6,15,12]}}
//! ```
//!
//! `silhouette` is optional: a row-major run-length mask over an integer
//! pixel rectangle, runs alternating unset/set starting with unset.
//!
//! # Images
//!
//! Binary PPM (`P6`, maxval 255). Channel values are stored as bytes and read
//! back as `byte / 255`; generated images are quantized to that grid, so the
//! round trip is exact.
//!
//! # Dataset split directory
//!
//! ```text
//! <split>/manifest.json        {"version":1,"images":[{"id":..,"height":..,"width":..}]}
//! <split>/annotations.jsonl
//! <split>/images/<id>.ppm
//! ```
//!
//! The manifest lists every image, including those without annotations, so
//! false positives per image use the right denominator.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scene, Silhouette};
use crate::detector::BBox;
use crate::error::{Error, Result};
use crate::mga::PedAnnotation;
use crate::tensor::Tensor;

pub const ANNOTATION_FORMAT: &str = "mgan-annotations";
pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    /// Reject any visible box reaching outside its full box.
    #[default]
    Strict,
    /// Clamp such visible boxes to the full box and warn.
    Lenient,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedAnnotations {
    pub annotations: Vec<PedAnnotation>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image_id: String,
    full: BBox,
    visible: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    silhouette: Option<Silhouette>,
}

pub fn write_annotations(path: &Path, annotations: &[PedAnnotation]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: ANNOTATION_FORMAT.into(),
        version: ANNOTATION_VERSION,
    };
    let mut put = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    put(serde_json::to_string(&header).expect("header serializes"))?;
    for a in annotations {
        let rec = Record {
            image_id: a.image_id.clone(),
            full: a.full_box,
            visible: a.visible_box,
            silhouette: a.silhouette.clone(),
        };
        put(serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_annotations(path: &Path, mode: ParseMode) -> Result<ParsedAnnotations> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_from(BufReader::new(file), path, mode)
}

/// Parses annotation lines from any reader; `path` only labels errors.
pub fn parse_annotations_from<R: BufRead>(
    reader: R,
    path: &Path,
    mode: ParseMode,
) -> Result<ParsedAnnotations> {
    let fail = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = ParsedAnnotations::default();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            let h: Header = serde_json::from_str(&line)
                .map_err(|e| fail(lineno, format!("bad header: {e}")))?;
            if h.format != ANNOTATION_FORMAT || h.version != ANNOTATION_VERSION {
                return Err(fail(
                    lineno,
                    format!("unsupported format {} version {}", h.format, h.version),
                ));
            }
            saw_header = true;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| fail(lineno, e.to_string()))?;
        for (name, b) in [("full", &rec.full), ("visible", &rec.visible)] {
            if !(b.w > 0.0 && b.h > 0.0) || ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) {
                return Err(fail(
                    lineno,
                    format!("record for {}: {name} box needs finite positive size, got w={} h={}", rec.image_id, b.w, b.h),
                ));
            }
        }
        let Some(clipped) = rec.visible.intersection(&rec.full) else {
            return Err(fail(
                lineno,
                format!("record for {}: visible box does not intersect full box", rec.image_id),
            ));
        };
        let mut visible = rec.visible;
        if clipped != rec.visible {
            match mode {
                ParseMode::Strict => {
                    return Err(fail(
                        lineno,
                        format!("record for {}: visible box extends outside full box", rec.image_id),
                    ))
                }
                ParseMode::Lenient => {
                    let msg = format!(
                        "{}:{lineno}: visible box of {} clamped to its full box",
                        path.display(),
                        rec.image_id
                    );
                    log::warn!("{msg}");
                    out.warnings.push(msg);
                    visible = clipped;
                }
            }
        }
        let mut ann = PedAnnotation::new(rec.full, visible, rec.image_id)
            .map_err(|e| fail(lineno, e.to_string()))?;
        if let Some(s) = rec.silhouette {
            if s.runs.iter().map(|&r| r as usize).sum::<usize>() != s.w * s.h {
                return Err(fail(lineno, "silhouette runs do not cover its rectangle".into()));
            }
            ann = ann.with_silhouette(s);
        }
        out.annotations.push(ann);
    }
    if !saw_header {
        return Err(fail(0, "empty annotation file".into()));
    }
    Ok(out)
}

/// Writes an `[H, W, 3]` image with values in `[0, 1]` as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [h, w, 3] = *image.shape() else {
        return Err(Error::contract("write_ppm", format!("expected H x W x 3, got {:?}", image.shape())));
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: m.to_string(),
    };
    // Header: magic, width, height, maxval, separated by whitespace, then a
    // single whitespace byte before the raster.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != w * h * 3 {
        return Err(bad("raster size does not match header"));
    }
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f64 / 255.0).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub images: Vec<ImageEntry>,
}

pub fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

/// Writes scenes as a split directory (see the module docs).
pub fn write_split(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut entries = Vec::with_capacity(scenes.len());
    let mut all = Vec::new();
    for s in scenes {
        write_ppm(&image_path(dir, &s.image_id), &s.image)?;
        entries.push(ImageEntry {
            id: s.image_id.clone(),
            height: s.image.shape()[0],
            width: s.image.shape()[1],
        });
        all.extend(s.annotations.iter().cloned());
    }
    write_annotations(&dir.join("annotations.jsonl"), &all)?;
    let manifest = Manifest {
        version: ANNOTATION_VERSION,
        images: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Annotations of a split grouped per image, in manifest order.
pub fn read_split_annotations(
    dir: &Path,
    mode: ParseMode,
) -> Result<(Manifest, BTreeMap<String, Vec<PedAnnotation>>, Vec<String>)> {
    let manifest = read_manifest(dir)?;
    let parsed = parse_annotations(&dir.join("annotations.jsonl"), mode)?;
    let mut by_image: BTreeMap<String, Vec<PedAnnotation>> = manifest
        .images
        .iter()
        .map(|e| (e.id.clone(), Vec::new()))
        .collect();
    for a in parsed.annotations {
        match by_image.get_mut(&a.image_id) {
            Some(v) => v.push(a),
            None => {
                return Err(Error::Parse {
                    path: dir.join("annotations.jsonl"),
                    line: 0,
                    message: format!("annotation for {} which is not in the manifest", a.image_id),
                })
            }
        }
    }
    Ok((manifest, by_image, parsed.warnings))
}

/// Loads a full split written by [`write_split`].
pub fn read_split(dir: &Path, mode: ParseMode) -> Result<(Vec<Scene>, Vec<String>)> {
    let (manifest, mut by_image, warnings) = read_split_annotations(dir, mode)?;
    let mut scenes = Vec::with_capacity(manifest.images.len());
    for e in &manifest.images {
        let image = read_ppm(&image_path(dir, &e.id))?;
        if image.shape() != [e.height, e.width, 3] {
            return Err(Error::Parse {
                path: image_path(dir, &e.id),
                line: 1,
                message: format!("image size differs from manifest {}x{}", e.height, e.width),
            });
        }
        scenes.push(Scene {
            image_id: e.id.clone(),
            image,
            annotations: by_image.remove(&e.id).unwrap_or_default(),
        });
    }
    Ok((scenes, warnings))
}
