//! On-disk dataset layout and the pixel types shared across the pipeline.
//!
//! A dataset root holds `manifest.json` plus one directory per video with
//! `frames/NNNNN.ppm` (binary P6) and `masks/NNNNN.pgm` (binary P5) files,
//! indices zero-padded to five digits and starting at 00001. Both formats are
//! self-describing and byte-exact, so `read_dataset(write_dataset(x)) == x`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {what}")]
    Format { path: PathBuf, what: String },
    #[error("missing file {path}")]
    MissingFile { path: PathBuf },
    #[error("inconsistent dataset: {what}")]
    Inconsistent { what: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// An equirectangular RGB frame; column 0 adjoins column `width - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    /// Row-major RGB triples.
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(height: usize, width: usize) -> Frame {
        Frame { height, width, data: vec![0; height * width * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy rolled right by `k` columns (wrapping).
    pub fn rolled(&self, k: usize) -> Frame {
        let mut out = Frame::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (x + self.width - k % self.width) % self.width;
                out.set_pixel(x, y, self.pixel(src, y));
            }
        }
        out
    }
}

/// Per-pixel instance labels: 0 is background, `k` is object `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl InstanceMask {
    pub fn new(height: usize, width: usize) -> InstanceMask {
        InstanceMask { height, width, labels: vec![0; height * width] }
    }

    pub fn label(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set_label(&mut self, x: usize, y: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Copy rolled right by `k` columns (wrapping).
    pub fn rolled(&self, k: usize) -> InstanceMask {
        let mut out = InstanceMask::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (x + self.width - k % self.width) % self.width;
                out.set_label(x, y, self.label(src, y));
            }
        }
        out
    }
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<(), DatasetError> {
    let mut bytes = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    bytes.extend_from_slice(&frame.data);
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<Frame, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, pixels) = parse_netpbm(path, &bytes, b"P6", 3)?;
    Ok(Frame { height: h, width: w, data: pixels })
}

pub fn write_pgm(path: &Path, mask: &InstanceMask) -> Result<(), DatasetError> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    bytes.extend_from_slice(&mask.labels);
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_pgm(path: &Path) -> Result<InstanceMask, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (w, h, labels) = parse_netpbm(path, &bytes, b"P5", 1)?;
    Ok(InstanceMask { height: h, width: w, labels })
}

/// Parses a binary netpbm header (magic, width, height, maxval 255) followed
/// by raw samples. Whitespace and `#` comments are tolerated in the header.
fn parse_netpbm(
    path: &Path,
    bytes: &[u8],
    magic: &[u8],
    samples_per_pixel: usize,
) -> Result<(usize, usize, Vec<u8>), DatasetError> {
    let bad = |what: &str| DatasetError::Format { path: path.to_path_buf(), what: what.into() };
    if bytes.len() < 2 || &bytes[0..2] != magic {
        return Err(bad(&format!("magic, expected {}", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comment lines.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header field"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("maxval, expected 255"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("header terminator"));
    }
    pos += 1;
    let expected = w * h * samples_per_pixel;
    let payload = &bytes[pos..];
    if payload.len() != expected {
        return Err(bad(&format!("payload length {} (expected {expected})", payload.len())));
    }
    Ok((w, h, payload.to_vec()))
}

/// Everything the evaluator needs to know about one annotated object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: u8,
    pub category: String,
}

/// Manifest record for one video.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
    pub fps: u32,
    pub width: usize,
    pub height: usize,
    /// Paths relative to the dataset root, one per frame.
    pub frame_files: Vec<String>,
    pub mask_files: Vec<String>,
    pub objects: Vec<ObjectEntry>,
    pub split: String,
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<VideoEntry>,
}

/// A fully materialized video: manifest metadata plus decoded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoData {
    pub id: String,
    pub fps: u32,
    pub objects: Vec<ObjectEntry>,
    pub split: String,
    pub unseen: bool,
    pub frames: Vec<Frame>,
    pub masks: Vec<InstanceMask>,
}

pub fn frame_file(video: &str, index1: usize) -> String {
    format!("{video}/frames/{index1:05}.ppm")
}

pub fn mask_file(video: &str, index1: usize) -> String {
    format!("{video}/masks/{index1:05}.pgm")
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join("manifest.json")
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = manifest_path(root);
    let mut text = String::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Format {
        path,
        what: format!("manifest: {e}"),
    })
}

pub fn write_dataset(root: &Path, videos: &[VideoData]) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut entries = Vec::with_capacity(videos.len());
    for video in videos {
        if video.frames.len() != video.masks.len() || video.frames.len() < 2 {
            return Err(DatasetError::Inconsistent {
                what: format!(
                    "video {} has {} frames and {} masks (need equal counts, at least 2)",
                    video.id,
                    video.frames.len(),
                    video.masks.len()
                ),
            });
        }
        let frames_dir = root.join(&video.id).join("frames");
        let masks_dir = root.join(&video.id).join("masks");
        fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
        fs::create_dir_all(&masks_dir).map_err(io_err(&masks_dir))?;
        let mut frame_files = Vec::new();
        let mut mask_files = Vec::new();
        for (i, (frame, mask)) in video.frames.iter().zip(&video.masks).enumerate() {
            let ff = frame_file(&video.id, i + 1);
            let mf = mask_file(&video.id, i + 1);
            write_ppm(&root.join(&ff), frame)?;
            write_pgm(&root.join(&mf), mask)?;
            frame_files.push(ff);
            mask_files.push(mf);
        }
        entries.push(VideoEntry {
            id: video.id.clone(),
            frames: video.frames.len(),
            fps: video.fps,
            width: video.frames[0].width,
            height: video.frames[0].height,
            frame_files,
            mask_files,
            objects: video.objects.clone(),
            split: video.split.clone(),
            unseen: video.unseen,
        });
    }
    let manifest = DatasetManifest { videos: entries };
    let path = manifest_path(root);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let mut file = fs::File::create(&path).map_err(io_err(&path))?;
    file.write_all(text.as_bytes()).map_err(io_err(&path))
}

pub fn read_dataset(root: &Path) -> Result<Vec<VideoData>, DatasetError> {
    let manifest = read_manifest(root)?;
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        if entry.frame_files.len() != entry.frames || entry.mask_files.len() != entry.frames {
            return Err(DatasetError::Inconsistent {
                what: format!("video {} lists {} frames but paths disagree", entry.id, entry.frames),
            });
        }
        let mut frames = Vec::with_capacity(entry.frames);
        let mut masks = Vec::with_capacity(entry.frames);
        for rel in &entry.frame_files {
            let path = root.join(rel);
            if !path.is_file() {
                return Err(DatasetError::MissingFile { path });
            }
            frames.push(read_ppm(&path)?);
        }
        for rel in &entry.mask_files {
            let path = root.join(rel);
            if !path.is_file() {
                return Err(DatasetError::MissingFile { path });
            }
            masks.push(read_pgm(&path)?);
        }
        videos.push(VideoData {
            id: entry.id.clone(),
            fps: entry.fps,
            objects: entry.objects.clone(),
            split: entry.split.clone(),
            unseen: entry.unseen,
            frames,
            masks,
        });
    }
    Ok(videos)
}
