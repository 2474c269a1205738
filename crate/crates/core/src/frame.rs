use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An 8-bit single-channel image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "frame buffer has {} bytes, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "empty frame");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "empty frame");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn row_mut(&mut self, y: usize) -> &mut [u8] {
        &mut self.data[y * self.width..(y + 1) * self.width]
    }

    /// Arithmetic mean of all pixels.
    pub fn mean(&self) -> f64 {
        let sum: u64 = self.data.iter().map(|&p| p as u64).sum();
        sum as f64 / self.data.len() as f64
    }

    pub fn same_size(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[default]
    Gray,
    Red,
    Green,
    Blue,
}

impl Channel {
    /// Plane offset inside an interleaved RGB triplet.
    pub fn rgb_offset(self) -> Option<usize> {
        match self {
            Channel::Gray => None,
            Channel::Red => Some(0),
            Channel::Green => Some(1),
            Channel::Blue => Some(2),
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gray" | "grey" => Ok(Channel::Gray),
            "red" => Ok(Channel::Red),
            "green" => Ok(Channel::Green),
            "blue" => Ok(Channel::Blue),
            other => Err(Error::InvalidArgument(format!("unknown channel `{other}`"))),
        }
    }
}

/// Capture metadata shared by every frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub fps: f64,
    pub shutter_s: f64,
    pub width: usize,
    pub height: usize,
    pub channel: Channel,
}

/// Ordered frames of identical dimensions plus capture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    meta: SequenceMeta,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, meta: SequenceMeta) -> Result<Self> {
        if !(meta.fps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "fps must be positive, got {}",
                meta.fps
            )));
        }
        for (index, f) in frames.iter().enumerate() {
            if f.width() != meta.width || f.height() != meta.height {
                return Err(Error::DimensionMismatch {
                    index,
                    width: meta.width,
                    height: meta.height,
                    actual_width: f.width(),
                    actual_height: f.height(),
                });
            }
        }
        Ok(Self { frames, meta })
    }

    /// Builds a sequence taking the dimensions from the first frame.
    pub fn from_frames(frames: Vec<Frame>, fps: f64, shutter_s: f64, channel: Channel) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        let meta = SequenceMeta {
            fps,
            shutter_s,
            width: first.width(),
            height: first.height(),
            channel,
        };
        Self::new(frames, meta)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn meta(&self) -> &SequenceMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, index: usize) -> Option<&Frame> {
        self.frames.get(index)
    }

    /// Applies `f` to every frame, keeping metadata.
    pub(crate) fn map_frames(self, mut f: impl FnMut(usize, Frame) -> Frame) -> Self {
        let meta = self.meta;
        let frames = self.frames.into_iter().enumerate().map(|(i, fr)| f(i, fr)).collect();
        Self { frames, meta }
    }

    pub(crate) fn with_frames(&self, frames: Vec<Frame>) -> Self {
        Self {
            frames,
            meta: self.meta,
        }
    }
}
