//! On-disk frame sequences: binary PGM/PPM files plus `metadata.json`.
//!
//! A sequence directory holds `frame_000000.pgm`, `frame_000001.pgm`, … and a
//! `metadata.json` with the keys `fps`, `shutter_s`, `width`, `height`,
//! `channel` and `frame_count`. RGB captures use the same layout with `.ppm`
//! files and are reduced to one plane with [`extract_channel`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Channel, Frame, FrameSequence, SequenceMeta};
use crate::stabilizer::N_SELECT;

pub const METADATA_FILE: &str = "metadata.json";
/// Default transient trimmed at each end of a recording, seconds.
pub const DEFAULT_TRIM_S: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceManifest {
    #[serde(skip)]
    pub dir: PathBuf,
    pub fps: f64,
    pub shutter_s: f64,
    pub width: usize,
    pub height: usize,
    pub channel: Channel,
    pub frame_count: usize,
}

impl SequenceManifest {
    fn meta(&self) -> SequenceMeta {
        SequenceMeta {
            fps: self.fps,
            shutter_s: self.shutter_s,
            width: self.width,
            height: self.height,
            channel: self.channel,
        }
    }
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}

pub fn rgb_frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Writes every frame as P5 PGM plus `metadata.json`, creating `dir`.
pub fn write_sequence(seq: &FrameSequence, dir: &Path) -> Result<SequenceManifest> {
    // Re-validate: callers may have assembled the sequence by hand.
    let seq = FrameSequence::new(seq.frames().to_vec(), *seq.meta())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames().iter().enumerate() {
        write_pgm(f, &dir.join(frame_file_name(i)))?;
    }
    let meta = seq.meta();
    let manifest = SequenceManifest {
        dir: dir.to_path_buf(),
        fps: meta.fps,
        shutter_s: meta.shutter_s,
        width: meta.width,
        height: meta.height,
        channel: meta.channel,
        frame_count: seq.len(),
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

fn write_manifest(manifest: &SequenceManifest, dir: &Path) -> Result<()> {
    let path = dir.join(METADATA_FILE);
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::json(&path, e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<SequenceManifest> {
    let path = dir.join(METADATA_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingMetadata(path)),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let mut manifest: SequenceManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    manifest.dir = dir.to_path_buf();
    Ok(manifest)
}

fn read_frame_file(path: &Path, index: usize) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFrame {
            index,
            path: path.to_path_buf(),
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Reads a sequence written by [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<FrameSequence> {
    let manifest = read_manifest(dir)?;
    if manifest.frame_count == 0 {
        return Err(Error::EmptySequence);
    }
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(frame_file_name(i));
        let bytes = read_frame_file(&path, i)?;
        frames.push(parse_pgm(&bytes, &path)?);
    }
    FrameSequence::new(frames, manifest.meta())
}

pub fn write_pgm(frame: &Frame, path: &Path) -> Result<()> {
    write_netpbm(path, "P5", frame.width(), frame.height(), frame.pixels())
}

pub fn read_pgm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

fn write_netpbm(path: &Path, magic: &str, width: usize, height: usize, data: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() + 32);
    write!(buf, "{magic}\n{width} {height}\n255\n").expect("write to Vec");
    buf.extend_from_slice(data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let (w, h, data) = parse_netpbm(bytes, b"P5", 1, path)?;
    Frame::new(w, h, data.to_vec())
}

/// Parses a binary Netpbm header and returns the dimensions and raster.
fn parse_netpbm<'a>(
    bytes: &'a [u8],
    magic: &[u8; 2],
    channels: usize,
    path: &Path,
) -> Result<(usize, usize, &'a [u8])> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(malformed(format!(
            "expected magic number {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments before each header field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated or non-numeric header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing whitespace after header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(malformed(format!("zero dimension {w}x{h}")));
    }
    if maxval != 255 {
        return Err(malformed(format!("maxval {maxval} unsupported, expected 255")));
    }
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| malformed("dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(malformed(format!("truncated raster: {} of {need} bytes", body.len())));
    }
    if body.len() > need {
        return Err(malformed(format!("{} trailing bytes after raster", body.len() - need)));
    }
    Ok((w, h, body))
}

/// An 8-bit RGB image with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbFrame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "RGB buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    /// Interleaves three planes of equal size.
    pub fn from_planes(r: &Frame, g: &Frame, b: &Frame) -> Result<Self> {
        if !r.same_size(g) || !r.same_size(b) {
            return Err(Error::InvalidArgument("RGB planes differ in size".into()));
        }
        let data = r
            .pixels()
            .iter()
            .zip(g.pixels())
            .zip(b.pixels())
            .flat_map(|((&r, &g), &b)| [r, g, b])
            .collect();
        Self::new(r.width(), r.height(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.data
    }

    /// One plane; gray is Rec. 601 luma in 8-bit fixed point.
    pub fn plane(&self, channel: Channel) -> Frame {
        let data = match channel.rgb_offset() {
            Some(o) => self.data.iter().skip(o).step_by(3).copied().collect(),
            None => self
                .data
                .chunks_exact(3)
                .map(|c| ((77 * c[0] as u32 + 150 * c[1] as u32 + 29 * c[2] as u32 + 128) >> 8) as u8)
                .collect(),
        };
        Frame::new(self.width, self.height, data).expect("plane matches RGB dimensions")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbSequence {
    pub frames: Vec<RgbFrame>,
    pub fps: f64,
    pub shutter_s: f64,
}

pub fn write_ppm(frame: &RgbFrame, path: &Path) -> Result<()> {
    write_netpbm(path, "P6", frame.width, frame.height, &frame.data)
}

pub fn read_ppm(path: &Path) -> Result<RgbFrame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, path)
}

fn parse_ppm(bytes: &[u8], path: &Path) -> Result<RgbFrame> {
    let (w, h, data) = parse_netpbm(bytes, b"P6", 3, path)?;
    RgbFrame::new(w, h, data.to_vec())
}

/// Writes P6 frames plus `metadata.json` (with channel `gray`).
pub fn write_rgb_sequence(seq: &RgbSequence, dir: &Path) -> Result<SequenceManifest> {
    let first = seq.frames.first().ok_or(Error::EmptySequence)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        if f.width != first.width || f.height != first.height {
            return Err(Error::DimensionMismatch {
                index: i,
                width: first.width,
                height: first.height,
                actual_width: f.width,
                actual_height: f.height,
            });
        }
        write_ppm(f, &dir.join(rgb_frame_file_name(i)))?;
    }
    let manifest = SequenceManifest {
        dir: dir.to_path_buf(),
        fps: seq.fps,
        shutter_s: seq.shutter_s,
        width: first.width,
        height: first.height,
        channel: Channel::Gray,
        frame_count: seq.frames.len(),
    };
    write_manifest(&manifest, dir)?;
    Ok(manifest)
}

pub fn read_rgb_sequence(dir: &Path) -> Result<RgbSequence> {
    let manifest = read_manifest(dir)?;
    if manifest.frame_count == 0 {
        return Err(Error::EmptySequence);
    }
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(rgb_frame_file_name(i));
        let bytes = read_frame_file(&path, i)?;
        let f = parse_ppm(&bytes, &path)?;
        if f.width != manifest.width || f.height != manifest.height {
            return Err(Error::DimensionMismatch {
                index: i,
                width: manifest.width,
                height: manifest.height,
                actual_width: f.width,
                actual_height: f.height,
            });
        }
        frames.push(f);
    }
    Ok(RgbSequence {
        frames,
        fps: manifest.fps,
        shutter_s: manifest.shutter_s,
    })
}

/// Selects one colour plane of every frame.
pub fn extract_channel(seq: &RgbSequence, channel: Channel) -> Result<FrameSequence> {
    let frames = seq.frames.iter().map(|f| f.plane(channel)).collect();
    FrameSequence::from_frames(frames, seq.fps, seq.shutter_s, channel)
}

/// Drops `round(leading_s·fps)` frames at the start and
/// `round(trailing_s·fps)` at the end. At least [`N_SELECT`] frames must
/// remain.
pub fn trim_transient(seq: &FrameSequence, leading_s: f64, trailing_s: f64) -> Result<FrameSequence> {
    if !(leading_s >= 0.0 && trailing_s >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "trim durations must be non-negative, got {leading_s} and {trailing_s}"
        )));
    }
    let fps = seq.meta().fps;
    let lead = (leading_s * fps).round() as usize;
    let trail = (trailing_s * fps).round() as usize;
    let available = seq.len() as i64 - lead as i64 - trail as i64;
    if available < N_SELECT as i64 {
        return Err(Error::TooShort {
            available,
            required: N_SELECT,
        });
    }
    Ok(seq.with_frames(seq.frames()[lead..seq.len() - trail].to_vec()))
}
