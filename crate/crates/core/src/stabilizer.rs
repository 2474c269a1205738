//! Picks usable frames out of a distorted capture.
//!
//! The per-frame mean intensity separates the artifacts: flicker gives a
//! high-frequency ON/OFF comb, rolling-shutter bars pull whole groups of
//! frames down, and skewed frames lose a little brightness at the edge. The
//! selection keeps comb peaks, drops peaks below an amplitude threshold, and
//! among the surviving peaks takes the run of `n` consecutive ones whose
//! normalized intensities span the smallest range.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameSequence;

/// Number of frames selected for analysis.
pub const N_SELECT: usize = 10;
pub const DEFAULT_THRESHOLD: f64 = 0.85;

/// Per-frame mean intensity and its min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityTrace {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl IntensityTrace {
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        let first = *values.first().ok_or(Error::EmptySequence)?;
        let (lo, hi) = values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !(hi > lo) {
            return Err(Error::DegenerateTrace(lo));
        }
        let normalized = values.iter().map(|v| (v - lo) / (hi - lo)).collect();
        Ok(Self { values, normalized })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Frames chosen for analysis, in increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameSelection {
    pub indices: Vec<usize>,
    /// Max minus min of the normalized trace over the selected frames; zero
    /// for selections not made from a trace.
    pub range_score: f64,
}

impl FrameSelection {
    /// `n` frames starting at `start`, `tau` frames apart.
    pub fn spaced(start: usize, n: usize, tau: usize) -> Self {
        Self {
            indices: (0..n).map(|k| start + k * tau).collect(),
            range_score: 0.0,
        }
    }
}

pub fn compute_trace(seq: &FrameSequence) -> Result<IntensityTrace> {
    IntensityTrace::from_values(seq.frames().iter().map(|f| f.mean()).collect())
}

/// Interior local maxima: `v[i] >= v[i-1]` and `v[i] >= v[i+1]`. A run of
/// equal qualifying samples reports only its first index.
pub fn find_peaks(trace: &IntensityTrace) -> Vec<usize> {
    let v = &trace.values;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..v.len().saturating_sub(1) {
        if v[i] >= v[i - 1] && v[i] >= v[i + 1] {
            let continues_plateau = peaks.last() == Some(&(i - 1)) && v[i - 1] == v[i];
            if !continues_plateau {
                peaks.push(i);
            }
        }
    }
    peaks
}

/// Keeps peaks whose normalized value is at least `threshold`.
pub fn filter_threshold(peaks: &[usize], trace: &IntensityTrace, threshold: f64) -> Vec<usize> {
    peaks
        .iter()
        .copied()
        .filter(|&i| trace.normalized[i] >= threshold)
        .collect()
}

/// The window of `n` consecutive peaks with the smallest normalized range;
/// ties go to the earliest window.
pub fn select_window(peaks: &[usize], trace: &IntensityTrace, n: usize) -> Result<FrameSelection> {
    if n == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    if peaks.len() < n {
        return Err(Error::InsufficientPeaks {
            found: peaks.len(),
            needed: n,
        });
    }
    let v: Vec<f64> = peaks.iter().map(|&i| trace.normalized[i]).collect();
    // Monotonic deques of indices into `v`: front holds the window max/min.
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut best: Option<(usize, f64)> = None;
    for k in 0..v.len() {
        while maxq.back().is_some_and(|&j| v[j] <= v[k]) {
            maxq.pop_back();
        }
        maxq.push_back(k);
        while minq.back().is_some_and(|&j| v[j] >= v[k]) {
            minq.pop_back();
        }
        minq.push_back(k);
        if k + 1 < n {
            continue;
        }
        let start = k + 1 - n;
        while maxq[0] < start {
            maxq.pop_front();
        }
        while minq[0] < start {
            minq.pop_front();
        }
        let range = v[maxq[0]] - v[minq[0]];
        if best.is_none_or(|(_, r)| range < r) {
            best = Some((start, range));
        }
    }
    let (start, range_score) = best.expect("at least one full window");
    Ok(FrameSelection {
        indices: peaks[start..start + n].to_vec(),
        range_score,
    })
}

/// Full selection: trace, peaks, threshold, window.
pub fn stabilize(seq: &FrameSequence, threshold: f64, n: usize) -> Result<FrameSelection> {
    let trace = compute_trace(seq)?;
    let peaks = find_peaks(&trace);
    let kept = filter_threshold(&peaks, &trace, threshold);
    select_window(&kept, &trace, n)
}
