//! Smartphone capture artifacts: PWM flicker, rolling-shutter bars, skew,
//! background light and attenuation.
//!
//! Every operation depends only on the frame index and the config seed, so
//! the distortion of a frame does not depend on its neighbours.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::frame::{Frame, FrameSequence};
use crate::rng::{domain, stream};

/// Residual speckle gain of a dark (OFF) frame.
pub const DARK_RESIDUAL: f64 = 0.05;
/// Largest noise-floor value; the floor is uniform on `0..=NOISE_FLOOR_MAX`
/// with mean 2 gray levels.
pub const NOISE_FLOOR_MAX: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureArtifactConfig {
    pub flicker_period_frames: usize,
    /// Fraction of each flicker period in which the speckle is visible.
    pub flicker_duty: f64,
    pub bar_period_frames: usize,
    /// Fraction of the frame height covered by a bar.
    pub bar_width_frac: f64,
    pub skew_max_px: f64,
    pub skew_event_prob: f64,
    pub background_lux_offset: f64,
    pub attenuation: f64,
    pub seed: u64,
}

impl Default for CaptureArtifactConfig {
    fn default() -> Self {
        Self {
            flicker_period_frames: 6,
            flicker_duty: 0.5,
            bar_period_frames: 45,
            bar_width_frac: 0.3,
            skew_max_px: 8.0,
            skew_event_prob: 0.1,
            background_lux_offset: 0.0,
            attenuation: 1.0,
            seed: 0,
        }
    }
}

impl CaptureArtifactConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.flicker_period_frames >= 2, || {
            format!(
                "flicker_period_frames must be at least 2, got {}",
                self.flicker_period_frames
            )
        })?;
        ensure(self.flicker_duty > 0.0 && self.flicker_duty < 1.0, || {
            format!("flicker_duty must lie in (0, 1), got {}", self.flicker_duty)
        })?;
        ensure(self.bar_period_frames >= self.flicker_period_frames, || {
            format!(
                "bar_period_frames ({}) must be at least flicker_period_frames ({})",
                self.bar_period_frames, self.flicker_period_frames
            )
        })?;
        ensure(self.bar_width_frac > 0.0 && self.bar_width_frac <= 1.0, || {
            format!("bar_width_frac must lie in (0, 1], got {}", self.bar_width_frac)
        })?;
        ensure(self.skew_max_px >= 0.0 && self.skew_max_px.is_finite(), || {
            format!("skew_max_px must be non-negative, got {}", self.skew_max_px)
        })?;
        ensure((0.0..=1.0).contains(&self.skew_event_prob), || {
            format!("skew_event_prob must lie in [0, 1], got {}", self.skew_event_prob)
        })?;
        ensure((0.0..=255.0).contains(&self.background_lux_offset), || {
            format!(
                "background_lux_offset must lie in [0, 255], got {}",
                self.background_lux_offset
            )
        })?;
        ensure(self.attenuation > 0.0 && self.attenuation <= 1.0, || {
            format!("attenuation must lie in (0, 1], got {}", self.attenuation)
        })
    }

    fn on_frames_per_period(&self) -> usize {
        let p = self.flicker_period_frames;
        ((self.flicker_duty * p as f64).round() as usize).clamp(1, p - 1)
    }

    /// Whether frame `index` falls in the ON phase of the flicker.
    pub fn is_flicker_on(&self, index: usize) -> bool {
        index % self.flicker_period_frames < self.on_frames_per_period()
    }

    /// Number of frames a bar takes to travel the frame height.
    pub fn bar_span_frames(&self) -> usize {
        ((self.bar_period_frames as f64 / 3.0).round() as usize).max(1)
    }

    /// Rows covered by the bar in frame `index` of a sequence of height
    /// `height`, if any. A bar event starts at every multiple of
    /// `bar_period_frames`; the band enters at the top and advances
    /// `height / bar_span_frames` rows per frame until it would leave the
    /// frame.
    pub fn bar_rows(&self, index: usize, height: usize) -> Option<Range<usize>> {
        let band = ((self.bar_width_frac * height as f64).round() as usize).clamp(1, height);
        let j = index % self.bar_period_frames;
        let step = height as f64 / self.bar_span_frames() as f64;
        let top = (j as f64 * step).floor() as usize;
        (top + band <= height).then(|| top..top + band)
    }

    /// Whether frame `index` is skewed.
    pub fn is_skewed(&self, index: usize) -> bool {
        self.skew_active() && skew_rng(self, index).random_bool(self.skew_event_prob)
    }

    fn skew_active(&self) -> bool {
        self.skew_event_prob > 0.0 && self.skew_max_px > 0.0
    }
}

fn skew_rng(cfg: &CaptureArtifactConfig, index: usize) -> ChaCha8Rng {
    stream(cfg.seed, domain::SKEW, index as u64)
}

fn floor_noise<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    rng.random_range(0..=NOISE_FLOOR_MAX)
}

/// Replaces OFF-phase frames by dark frames: 5% of the speckle plus the
/// noise floor.
pub fn apply_flicker(seq: FrameSequence, cfg: &CaptureArtifactConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    Ok(seq.map_frames(|i, mut f| {
        if !cfg.is_flicker_on(i) {
            let mut rng = stream(cfg.seed, domain::FLICKER, i as u64);
            for p in f.pixels_mut() {
                let dark = (DARK_RESIDUAL * *p as f64).round() as u8;
                *p = dark.saturating_add(floor_noise(&mut rng));
            }
        }
        f
    }))
}

/// Overwrites the rows under the rolling-shutter bar with the noise floor.
pub fn apply_bars(seq: FrameSequence, cfg: &CaptureArtifactConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    Ok(seq.map_frames(|i, mut f| {
        if let Some(rows) = cfg.bar_rows(i, f.height()) {
            let mut rng = stream(cfg.seed, domain::BARS, i as u64);
            for y in rows {
                for p in f.row_mut(y) {
                    *p = floor_noise(&mut rng);
                }
            }
        }
        f
    }))
}

/// Shears skewed frames: row `r` moves right by
/// `round(skew_max_px · r / H)` pixels and the vacated pixels get the noise
/// floor.
pub fn apply_skew(seq: FrameSequence, cfg: &CaptureArtifactConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    if !cfg.skew_active() {
        return Ok(seq);
    }
    Ok(seq.map_frames(|i, f| {
        let mut rng = skew_rng(cfg, i);
        if !rng.random_bool(cfg.skew_event_prob) {
            return f;
        }
        shear(&f, cfg.skew_max_px, &mut rng)
    }))
}

fn shear<R: Rng + ?Sized>(f: &Frame, skew_max_px: f64, rng: &mut R) -> Frame {
    let (w, h) = (f.width(), f.height());
    let mut out = f.clone();
    for y in 0..h {
        let shift = ((skew_max_px * y as f64 / h as f64).round() as usize).min(w);
        if shift == 0 {
            continue;
        }
        let src = f.row(y);
        let dst = out.row_mut(y);
        dst[shift..].copy_from_slice(&src[..w - shift]);
        for p in &mut dst[..shift] {
            *p = floor_noise(rng);
        }
    }
    out
}

/// `p' = clamp(round(attenuation · p + background_lux_offset), 0, 255)`.
pub fn apply_lighting(seq: FrameSequence, cfg: &CaptureArtifactConfig) -> Result<FrameSequence> {
    cfg.validate()?;
    if cfg.attenuation == 1.0 && cfg.background_lux_offset == 0.0 {
        return Ok(seq);
    }
    let lut: Vec<u8> = (0..=255u32)
        .map(|p| {
            (cfg.attenuation * p as f64 + cfg.background_lux_offset)
                .round()
                .clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(seq.map_frames(|_, mut f| {
        for p in f.pixels_mut() {
            *p = lut[*p as usize];
        }
        f
    }))
}

/// Applies all artifacts in the fixed order flicker, bars, skew, lighting.
pub fn apply_all(seq: FrameSequence, cfg: &CaptureArtifactConfig) -> Result<FrameSequence> {
    let seq = apply_flicker(seq, cfg)?;
    let seq = apply_bars(seq, cfg)?;
    let seq = apply_skew(seq, cfg)?;
    apply_lighting(seq, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    fn ramp_sequence(n: usize, w: usize, h: usize) -> FrameSequence {
        let frames = (0..n)
            .map(|k| Frame::from_fn(w, h, |x, y| (40 + (x * 7 + y * 3 + k * 11) % 200) as u8))
            .collect();
        FrameSequence::from_frames(frames, 30.0, 1.0 / 30.0, Channel::Gray).unwrap()
    }

    #[test]
    fn flicker_schedule_period_four() {
        let cfg = CaptureArtifactConfig {
            flicker_period_frames: 4,
            ..CaptureArtifactConfig::default()
        };
        let dark: Vec<usize> = (0..8).filter(|&i| !cfg.is_flicker_on(i)).collect();
        assert_eq!(dark, vec![2, 3, 6, 7]);
        let seq = ramp_sequence(8, 16, 16);
        let out = apply_flicker(seq.clone(), &cfg).unwrap();
        for i in 0..8 {
            assert_eq!(out.frames()[i] == seq.frames()[i], cfg.is_flicker_on(i), "frame {i}");
        }
    }

    #[test]
    fn near_unit_duty_leaves_short_clip_untouched() {
        let cfg = CaptureArtifactConfig {
            flicker_period_frames: 100,
            flicker_duty: 0.99,
            bar_period_frames: 100,
            ..CaptureArtifactConfig::default()
        };
        let seq = ramp_sequence(50, 8, 8);
        assert_eq!(apply_flicker(seq.clone(), &cfg).unwrap(), seq);
    }

    #[test]
    fn bar_sweeps_down_inside_frame() {
        let cfg = CaptureArtifactConfig::default();
        assert_eq!(cfg.bar_span_frames(), 15);
        let rows: Vec<_> = (0..45).map(|i| cfg.bar_rows(i, 256)).collect();
        assert_eq!(rows[0], Some(0..77));
        let tops: Vec<usize> = rows.iter().flatten().map(|r| r.start).collect();
        assert!(tops.windows(2).all(|w| w[1] > w[0]));
        assert!(rows.iter().flatten().all(|r| r.end <= 256));
        assert_eq!(rows[45 - 1], None);
        assert_eq!(cfg.bar_rows(45, 256), Some(0..77));
    }

    #[test]
    fn skew_shifts_bottom_row_by_max() {
        let cfg = CaptureArtifactConfig {
            skew_event_prob: 1.0,
            skew_max_px: 8.0,
            ..CaptureArtifactConfig::default()
        };
        let seq = ramp_sequence(1, 64, 64);
        let out = apply_skew(seq.clone(), &cfg).unwrap();
        let (a, b) = (&seq.frames()[0], &out.frames()[0]);
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(&b.row(63)[8..], &a.row(63)[..56]);
        assert!(b.row(63)[..8].iter().all(|&p| p <= NOISE_FLOOR_MAX));
    }

    #[test]
    fn lighting_saturates() {
        let cfg = CaptureArtifactConfig {
            background_lux_offset: 255.0,
            ..CaptureArtifactConfig::default()
        };
        let out = apply_lighting(ramp_sequence(2, 8, 8), &cfg).unwrap();
        assert!(out.frames().iter().all(|f| f.pixels().iter().all(|&p| p == 255)));
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = [
            CaptureArtifactConfig {
                flicker_period_frames: 1,
                ..Default::default()
            },
            CaptureArtifactConfig {
                flicker_duty: 1.0,
                ..Default::default()
            },
            CaptureArtifactConfig {
                bar_period_frames: 3,
                ..Default::default()
            },
            CaptureArtifactConfig {
                bar_width_frac: 0.0,
                ..Default::default()
            },
            CaptureArtifactConfig {
                skew_event_prob: 1.5,
                ..Default::default()
            },
            CaptureArtifactConfig {
                background_lux_offset: 300.0,
                ..Default::default()
            },
            CaptureArtifactConfig {
                attenuation: 0.0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
