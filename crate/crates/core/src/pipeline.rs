//! Correlation analysis of speckle frames.
//!
//! The speckle region is cropped, the first selected frame is correlated
//! with each later one, and the resulting curve is summarized by the
//! viscosity coefficient `V` (the coefficient at the second point) and a
//! fitted decorrelation time `τc`.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::stabilizer::{FrameSelection, N_SELECT};

pub const DEFAULT_BRIGHT_THRESHOLD: u8 = 200;
pub const DEFAULT_MAX_CROP: usize = 1000;
/// Half-size of the square around the image centre that never stops crop
/// growth; the dynamic spot itself is bright.
pub const CENTER_EXCLUSION: usize = 4;
/// `c[1]` at or above this value means the curve does not decay.
pub const NO_DECAY_LEVEL: f64 = 0.999;
const TAU_SEARCH: (f64, f64) = (1e-3, 1e3);
const TAU_TOLERANCE: f64 = 1e-4;

/// Axis-aligned box `[cx − hw, cx + hw) × [cy − hh, cy + hh)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub cx: usize,
    pub cy: usize,
    pub hw: usize,
    pub hh: usize,
}

impl CropRegion {
    /// The largest centred box inside a `width × height` image (the last
    /// column or row of odd-sized images is dropped).
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            cx: width / 2,
            cy: height / 2,
            hw: width / 2,
            hh: height / 2,
        }
    }

    pub fn x0(&self) -> usize {
        self.cx - self.hw
    }

    pub fn y0(&self) -> usize {
        self.cy - self.hh
    }

    pub fn width(&self) -> usize {
        2 * self.hw
    }

    pub fn height(&self) -> usize {
        2 * self.hh
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, frame: &Frame) -> bool {
        self.hw <= self.cx
            && self.hh <= self.cy
            && self.cx + self.hw <= frame.width()
            && self.cy + self.hh <= frame.height()
    }

    fn check(&self, frame: &Frame) -> Result<()> {
        if self.fits(frame) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "crop region {self:?} exceeds {}x{} frame",
                frame.width(),
                frame.height()
            )))
        }
    }

    /// Row slices of `frame` inside the region.
    pub fn rows<'a>(&self, frame: &'a Frame) -> impl Iterator<Item = &'a [u8]> + 'a {
        let (x0, x1) = (self.x0(), self.x0() + self.width());
        (self.y0()..self.y0() + self.height()).map(move |y| &frame.row(y)[x0..x1])
    }
}

/// Grows a box from 2×2 at the image centre, one pixel per step
/// alternating half-width and half-height, and stops one step before the box
/// would contain a pixel brighter than `bright_threshold`. Pixels within
/// [`CENTER_EXCLUSION`] of the centre are ignored. Each half-size is capped
/// by `max_size / 2` and the image bounds.
pub fn crop_dynamic(frame: &Frame, bright_threshold: u8, max_size: usize) -> CropRegion {
    let (w, h) = (frame.width(), frame.height());
    let (cx, cy) = (w / 2, h / 2);
    let cap_w = (max_size / 2).min(cx).min(w - cx);
    let cap_h = (max_size / 2).min(cy).min(h - cy);
    let bright = |x: usize, y: usize| {
        frame.get(x, y) > bright_threshold
            && !(x.abs_diff(cx) <= CENTER_EXCLUSION && y.abs_diff(cy) <= CENTER_EXCLUSION)
    };
    let mut r = CropRegion {
        cx,
        cy,
        hw: cap_w.min(1),
        hh: cap_h.min(1),
    };
    let mut grow_width = true;
    loop {
        let can_w = r.hw < cap_w;
        let can_h = r.hh < cap_h;
        if !can_w && !can_h {
            break;
        }
        let along_w = if grow_width { can_w } else { !can_h };
        grow_width = !grow_width;
        if along_w {
            // New columns cx − hw − 1 and cx + hw.
            let cols = [cx - r.hw - 1, cx + r.hw];
            if (cy - r.hh..cy + r.hh).any(|y| cols.iter().any(|&x| bright(x, y))) {
                break;
            }
            r.hw += 1;
        } else {
            let rows = [cy - r.hh - 1, cy + r.hh];
            if (cx - r.hw..cx + r.hw).any(|x| rows.iter().any(|&y| bright(x, y))) {
                break;
            }
            r.hh += 1;
        }
    }
    r
}

/// Exact integer moments of a region pair.
struct Moments {
    n: i128,
    sa: i128,
    sb: i128,
    saa: i128,
    sbb: i128,
    sab: i128,
}

fn moments(a: &Frame, b: &Frame, region: &CropRegion) -> Moments {
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0u64, 0u64, 0u64, 0u64, 0u64);
    for (ra, rb) in region.rows(a).zip(region.rows(b)) {
        // Row sums fit in u32 for any realistic width; accumulate in u64.
        let (mut ra_s, mut rb_s, mut raa, mut rbb, mut rab) = (0u32, 0u32, 0u64, 0u64, 0u64);
        for (&x, &y) in ra.iter().zip(rb) {
            let (x, y) = (x as u32, y as u32);
            ra_s += x;
            rb_s += y;
            raa += (x * x) as u64;
            rbb += (y * y) as u64;
            rab += (x * y) as u64;
        }
        sa += ra_s as u64;
        sb += rb_s as u64;
        saa += raa;
        sbb += rbb;
        sab += rab;
    }
    Moments {
        n: region.area() as i128,
        sa: sa as i128,
        sb: sb as i128,
        saa: saa as i128,
        sbb: sbb as i128,
        sab: sab as i128,
    }
}

/// Pearson correlation of the two frames over `region`, computed from exact
/// integer sums so that it is symmetric, exactly 1 for identical frames and
/// exactly −1 for `b = 255 − a`.
pub fn frame_correlation(a: &Frame, b: &Frame, region: &CropRegion) -> Result<f64> {
    region.check(a)?;
    region.check(b)?;
    let m = moments(a, b, region);
    let va = m.n * m.saa - m.sa * m.sa;
    let vb = m.n * m.sbb - m.sb * m.sb;
    if va == 0 || vb == 0 {
        return Err(Error::DegenerateFrame { index: None });
    }
    let num = m.n * m.sab - m.sa * m.sb;
    let r = num as f64 / ((va as f64) * (vb as f64)).sqrt();
    Ok(r.clamp(-1.0, 1.0))
}

/// Population standard deviation over mean inside `region`.
pub fn speckle_contrast(frame: &Frame, region: &CropRegion) -> Result<f64> {
    region.check(frame)?;
    let m = moments(frame, frame, region);
    if m.sa == 0 {
        return Err(Error::DegenerateFrame { index: None });
    }
    let var_n2 = (m.n * m.saa - m.sa * m.sa) as f64;
    Ok(var_n2.sqrt() / m.sa as f64)
}

/// Decorrelation time of a curve, or the no-decay sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauC {
    Frames(f64),
    NoDecay,
}

impl TauC {
    pub const NO_DECAY_TAG: &'static str = "no-decay";

    pub fn frames(self) -> Option<f64> {
        match self {
            TauC::Frames(t) => Some(t),
            TauC::NoDecay => None,
        }
    }
}

impl Serialize for TauC {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TauC::Frames(t) => s.serialize_f64(*t),
            TauC::NoDecay => s.serialize_str(Self::NO_DECAY_TAG),
        }
    }
}

impl<'de> Deserialize<'de> for TauC {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) => Ok(TauC::Frames(t)),
            Raw::Tag(s) if s == Self::NO_DECAY_TAG => Ok(TauC::NoDecay),
            Raw::Tag(s) => Err(serde::de::Error::custom(format!("unknown tau_c tag `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    /// Lag of each coefficient in frames: `k · tau`.
    pub lags: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub viscosity_coefficient: f64,
    pub tau_c: TauC,
}

/// Correlates the first selected frame with every selected frame.
pub fn correlation_curve(
    seq: &FrameSequence,
    selection: &FrameSelection,
    region: &CropRegion,
    tau: usize,
) -> Result<CorrelationCurve> {
    let idx = &selection.indices;
    if idx.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a correlation curve needs at least 2 frames, got {}",
            idx.len()
        )));
    }
    if tau == 0 {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    let frame = |i: usize| {
        seq.frame(i).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "selected frame {i} is outside the {}-frame sequence",
                seq.len()
            ))
        })
    };
    let first = frame(idx[0])?;
    let mut coefficients = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let c = if k == 0 {
            frame_correlation(first, first, region).map_err(|e| with_frame_index(e, idx[0]))?;
            1.0
        } else {
            frame_correlation(first, frame(i)?, region).map_err(|e| with_frame_index(e, i))?
        };
        coefficients.push(c);
    }
    let lags: Vec<usize> = (0..idx.len()).map(|k| k * tau).collect();
    let tau_c = match fit_tau_c(&coefficients) {
        TauC::Frames(t) => TauC::Frames(t * tau as f64),
        other => other,
    };
    Ok(CorrelationCurve {
        lags,
        viscosity_coefficient: coefficients[1],
        coefficients,
        tau_c,
    })
}

fn with_frame_index(e: Error, index: usize) -> Error {
    match e {
        Error::DegenerateFrame { index: None } => Error::DegenerateFrame { index: Some(index) },
        other => other,
    }
}

/// Fits `c(k) ≈ b + (1 − b)·exp(−k/τc)` with the plateau `b` fixed to the
/// last coefficient, by golden-section search on `ln τc`. The last point
/// only anchors `b` and is left out of the residual. Returns τc in units of
/// the curve index.
pub fn fit_tau_c(coefficients: &[f64]) -> TauC {
    let n = coefficients.len();
    if n < 3 || coefficients[1] >= NO_DECAY_LEVEL {
        return TauC::NoDecay;
    }
    let b = coefficients[n - 1];
    let amp = 1.0 - b;
    if amp <= f64::EPSILON {
        return TauC::NoDecay;
    }
    let sse = |log_tau: f64| {
        let tau = log_tau.exp();
        coefficients[..n - 1]
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let r = c - b - amp * (-(k as f64) / tau).exp();
                r * r
            })
            .sum::<f64>()
    };
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (TAU_SEARCH.0.ln(), TAU_SEARCH.1.ln());
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    while hi - lo > TAU_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = sse(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = sse(x2);
        }
    }
    TauC::Frames((0.5 * (lo + hi)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    /// Whole frame.
    #[default]
    Full,
    /// [`crop_dynamic`] on the pixelwise minimum of the selected frames, so
    /// that only static bright speckle limits the box.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub crop: CropMode,
    pub bright_threshold: u8,
    pub max_size: usize,
    pub tau: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            crop: CropMode::Full,
            bright_threshold: DEFAULT_BRIGHT_THRESHOLD,
            max_size: DEFAULT_MAX_CROP,
            tau: 1,
        }
    }
}

/// Everything `speckle analyze` reports for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    #[serde(flatten)]
    pub curve: CorrelationCurve,
    pub crop: CropRegion,
    pub contrast_first_frame: f64,
}

/// Crops, correlates and fits one sequence. Without a selection, frames
/// `0, τ, …, 9τ` are used.
pub fn analyze(seq: &FrameSequence, selection: Option<&FrameSelection>, cfg: &AnalysisConfig) -> Result<Analysis> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let default_sel;
    let selection = match selection {
        Some(s) => s,
        None => {
            default_sel = FrameSelection::spaced(0, N_SELECT, cfg.tau);
            &default_sel
        }
    };
    let frames: Vec<&Frame> = selection
        .indices
        .iter()
        .map(|&i| {
            seq.frame(i).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "selected frame {i} is outside the {}-frame sequence",
                    seq.len()
                ))
            })
        })
        .collect::<Result<_>>()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty selection".into()))?;
    let region = match cfg.crop {
        CropMode::Full => CropRegion::full(first.width(), first.height()),
        CropMode::Auto => {
            let min = Frame::from_fn(first.width(), first.height(), |x, y| {
                frames.iter().map(|f| f.get(x, y)).min().expect("non-empty")
            });
            crop_dynamic(&min, cfg.bright_threshold, cfg.max_size)
        }
    };
    let curve = correlation_curve(seq, selection, &region, cfg.tau)?;
    let contrast_first_frame =
        speckle_contrast(first, &region).map_err(|e| with_frame_index(e, selection.indices[0]))?;
    Ok(Analysis {
        curve,
        crop: region,
        contrast_first_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    fn noise_frame(w: usize, h: usize, seed: u32) -> Frame {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        Frame::from_fn(w, h, |_, _| {
            s ^= s << 13;
            s ^= s >> 17;
            s ^= s << 5;
            (s % 256) as u8
        })
    }

    #[test]
    fn self_and_negated_correlation_are_exact() {
        let a = noise_frame(37, 29, 1);
        let r = CropRegion::full(37, 29);
        assert_eq!(frame_correlation(&a, &a, &r).unwrap(), 1.0);
        let neg = Frame::from_fn(37, 29, |x, y| 255 - a.get(x, y));
        assert_eq!(frame_correlation(&a, &neg, &r).unwrap(), -1.0);
    }

    #[test]
    fn zero_variance_is_degenerate() {
        let a = noise_frame(8, 8, 2);
        let flat = Frame::filled(8, 8, 7);
        let r = CropRegion::full(8, 8);
        assert!(matches!(
            frame_correlation(&a, &flat, &r),
            Err(Error::DegenerateFrame { index: None })
        ));
    }

    #[test]
    fn region_outside_frame_rejected() {
        let a = noise_frame(8, 8, 3);
        let r = CropRegion {
            cx: 4,
            cy: 4,
            hw: 5,
            hh: 2,
        };
        assert!(frame_correlation(&a, &a, &r).is_err());
    }

    #[test]
    fn contrast_examples() {
        let r = CropRegion::full(4, 4);
        assert_eq!(speckle_contrast(&Frame::filled(4, 4, 9), &r).unwrap(), 0.0);
        let half = Frame::from_fn(4, 4, |x, _| if x < 2 { 0 } else { 2 });
        assert_eq!(speckle_contrast(&half, &r).unwrap(), 1.0);
        assert!(speckle_contrast(&Frame::filled(4, 4, 0), &r).is_err());
    }

    #[test]
    fn crop_without_bright_pixels_reaches_cap() {
        let f = Frame::filled(64, 48, 100);
        assert_eq!(
            crop_dynamic(&f, 200, 1000),
            CropRegion {
                cx: 32,
                cy: 24,
                hw: 32,
                hh: 24
            }
        );
        assert_eq!(
            crop_dynamic(&f, 200, 20),
            CropRegion {
                cx: 32,
                cy: 24,
                hw: 10,
                hh: 10
            }
        );
    }

    #[test]
    fn crop_stops_before_bright_pixel() {
        let mut f = Frame::filled(64, 64, 100);
        f.set(32 + 9, 32, 255);
        let r = crop_dynamic(&f, 200, 1000);
        assert_eq!(r.hw, 9);
        assert_eq!(r.hh, 9);
    }

    #[test]
    fn crop_ignores_center_zone() {
        let mut f = Frame::filled(64, 64, 100);
        f.set(33, 31, 255);
        f.set(28, 36, 255);
        assert_eq!(crop_dynamic(&f, 200, 1000), CropRegion::full(64, 64));
    }

    #[test]
    fn tau_fit_recovers_generating_constant() {
        let (tau, b) = (2.0, 0.3);
        let mut c: Vec<f64> = (0..10).map(|k| b + (1.0 - b) * (-(k as f64) / tau).exp()).collect();
        c[9] = b;
        let got = fit_tau_c(&c).frames().unwrap();
        assert!((got - tau).abs() < 1e-3, "{got}");
    }

    #[test]
    fn flat_curve_has_no_decay() {
        assert_eq!(fit_tau_c(&[1.0; 10]), TauC::NoDecay);
        assert_eq!(fit_tau_c(&[1.0, 0.9995, 0.9, 0.8]), TauC::NoDecay);
    }

    #[test]
    fn identical_frames_give_flat_curve() {
        let f = noise_frame(16, 16, 4);
        let seq = FrameSequence::from_frames(vec![f; 10], 30.0, 0.03, Channel::Gray).unwrap();
        let a = analyze(&seq, None, &AnalysisConfig::default()).unwrap();
        assert!(a.curve.coefficients.iter().all(|&c| c == 1.0));
        assert_eq!(a.curve.viscosity_coefficient, 1.0);
        assert_eq!(a.curve.tau_c, TauC::NoDecay);
        assert_eq!(a.curve.lags, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_frame_reports_index() {
        let mut frames: Vec<Frame> = (0..10).map(|i| noise_frame(8, 8, i)).collect();
        frames[3] = Frame::filled(8, 8, 1);
        let seq = FrameSequence::from_frames(frames, 30.0, 0.03, Channel::Gray).unwrap();
        let err = analyze(&seq, None, &AnalysisConfig::default()).unwrap_err();
        assert!(matches!(err, Error::DegenerateFrame { index: Some(3) }), "{err}");
    }

    #[test]
    fn tau_c_serializes_number_or_tag() {
        assert_eq!(serde_json::to_string(&TauC::Frames(2.5)).unwrap(), "2.5");
        assert_eq!(serde_json::to_string(&TauC::NoDecay).unwrap(), "\"no-decay\"");
        let t: TauC = serde_json::from_str("\"no-decay\"").unwrap();
        assert_eq!(t, TauC::NoDecay);
    }
}
