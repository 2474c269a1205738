//! Optimized routines against naive reference implementations.

use proptest::prelude::*;
use speckle_core::capturefx::{self, CaptureArtifactConfig};
use speckle_core::pipeline::{crop_dynamic, frame_correlation, CropRegion, CENTER_EXCLUSION};
use speckle_core::rheocal::{apply_calibration, fit_calibration, ostwald_viscosity, ViscometerReading};
use speckle_core::stabilizer::{compute_trace, select_window, IntensityTrace};
use speckle_core::{framestore, Channel, Frame, FrameSequence};

fn frame_strategy(w: usize, h: usize, max: u8) -> impl Strategy<Value = Frame> {
    prop::collection::vec(0..=max, w * h).prop_map(move |px| Frame::new(w, h, px).unwrap())
}

fn naive_correlation(a: &Frame, b: &Frame) -> f64 {
    let n = (a.width() * a.height()) as f64;
    let ma = a.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.pixels().iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y) as f64 - ma, b.get(x, y) as f64 - mb);
            num += p * q;
            da += p * p;
            db += q * q;
        }
    }
    num / (da * db).sqrt()
}

/// Same growth schedule as the crop, but every candidate box is checked by
/// scanning all of its pixels.
fn brute_force_crop(frame: &Frame, threshold: u8, max_size: usize) -> CropRegion {
    let (w, h) = (frame.width(), frame.height());
    let (cx, cy) = (w / 2, h / 2);
    let cap_w = (max_size / 2).min(cx).min(w - cx);
    let cap_h = (max_size / 2).min(cy).min(h - cy);
    let touches = |hw: usize, hh: usize| {
        (cy - hh..cy + hh).any(|y| {
            (cx - hw..cx + hw).any(|x| {
                let excluded = x.abs_diff(cx) <= CENTER_EXCLUSION && y.abs_diff(cy) <= CENTER_EXCLUSION;
                frame.get(x, y) > threshold && !excluded
            })
        })
    };
    let mut schedule = vec![(cap_w.min(1), cap_h.min(1))];
    let mut widen = true;
    loop {
        let (hw, hh) = *schedule.last().unwrap();
        let (can_w, can_h) = (hw < cap_w, hh < cap_h);
        if !can_w && !can_h {
            break;
        }
        let along_w = if widen { can_w } else { !can_h };
        widen = !widen;
        schedule.push(if along_w { (hw + 1, hh) } else { (hw, hh + 1) });
    }
    let last = schedule
        .iter()
        .position(|&(hw, hh)| touches(hw, hh))
        .map_or(schedule.len() - 1, |k| k - 1);
    let (hw, hh) = schedule[last];
    CropRegion { cx, cy, hw, hh }
}

fn brute_force_window(peaks: &[usize], normalized: &[f64], n: usize) -> Option<Vec<usize>> {
    let mut best: Option<(f64, usize)> = None;
    for start in 0..(peaks.len() + 1).saturating_sub(n) {
        let vals: Vec<f64> = peaks[start..start + n].iter().map(|&p| normalized[p]).collect();
        let range = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        if best.is_none_or(|(r, _)| range < r) {
            best = Some((range, start));
        }
    }
    best.map(|(_, s)| peaks[s..s + n].to_vec())
}

fn sequence(frames: Vec<Frame>) -> FrameSequence {
    FrameSequence::from_frames(frames, 30.0, 1.0 / 30.0, Channel::Gray).unwrap()
}

fn artifact_config() -> impl Strategy<Value = CaptureArtifactConfig> {
    (
        2usize..8,
        0.1f64..0.9,
        0usize..12,
        0.05f64..1.0,
        0.0f64..6.0,
        0.0f64..1.0,
        0.0f64..40.0,
        0.2f64..1.0,
        any::<u64>(),
    )
        .prop_map(
            |(fp, duty, extra, width, skew, prob, offset, att, seed)| CaptureArtifactConfig {
                flicker_period_frames: fp,
                flicker_duty: duty,
                bar_period_frames: fp + extra,
                bar_width_frac: width,
                skew_max_px: skew,
                skew_event_prob: prob,
                background_lux_offset: offset,
                attenuation: att,
                seed,
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn correlation_matches_naive_reference(a in frame_strategy(32, 32, 255), b in frame_strategy(32, 32, 255)) {
        let r = CropRegion::full(32, 32);
        let fast = frame_correlation(&a, &b, &r).unwrap();
        prop_assert!((fast - naive_correlation(&a, &b)).abs() < 1e-9);
        prop_assert!((frame_correlation(&a, &a, &r).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(fast, frame_correlation(&b, &a, &r).unwrap());
    }

    #[test]
    fn correlation_is_affine_invariant(
        a in frame_strategy(32, 32, 50),
        b in frame_strategy(32, 32, 255),
        alpha in 1u8..=4,
        beta in 0u8..=50,
    ) {
        let r = CropRegion::full(32, 32);
        let mapped = Frame::from_fn(32, 32, |x, y| alpha * a.get(x, y) + beta);
        let d = frame_correlation(&mapped, &b, &r).unwrap() - frame_correlation(&a, &b, &r).unwrap();
        prop_assert!(d.abs() < 1e-9);
    }

    #[test]
    fn crop_matches_brute_force(
        (w, h, mask) in (16usize..=64, 16usize..=64).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(prop::bool::weighted(0.01), w * h))
        }),
        max_size in 4usize..80,
    ) {
        let f = Frame::new(w, h, mask.iter().map(|&m| if m { 230 } else { 100 }).collect()).unwrap();
        prop_assert_eq!(crop_dynamic(&f, 200, max_size), brute_force_crop(&f, 200, max_size));
    }

    #[test]
    fn capture_artifacts_keep_shape_and_are_deterministic(cfg in artifact_config(), seed in any::<u32>()) {
        let frames: Vec<Frame> = (0..14u32)
            .map(|k| Frame::from_fn(24, 20, |x, y| ((x as u32 * 7 + y as u32 * 3 + k * 11 + seed) % 200) as u8 + 20))
            .collect();
        let seq = sequence(frames);
        let ops: [fn(FrameSequence, &CaptureArtifactConfig) -> speckle_core::Result<FrameSequence>; 5] = [
            capturefx::apply_flicker,
            capturefx::apply_bars,
            capturefx::apply_skew,
            capturefx::apply_lighting,
            capturefx::apply_all,
        ];
        for op in ops {
            let out = op(seq.clone(), &cfg).unwrap();
            prop_assert_eq!(out.len(), seq.len());
            prop_assert!(out.frames().iter().all(|f| f.width() == 24 && f.height() == 20));
            prop_assert_eq!(&out, &op(seq.clone(), &cfg).unwrap());
        }
    }

    #[test]
    fn trace_equals_per_frame_mean(cfg in artifact_config()) {
        let frames: Vec<Frame> = (0..20u32)
            .map(|k| Frame::from_fn(16, 16, |x, y| ((x * y) as u32 + k * 13) as u8 % 180 + 40))
            .collect();
        let distorted = capturefx::apply_all(sequence(frames), &cfg).unwrap();
        let trace = compute_trace(&distorted).unwrap();
        for (f, &v) in distorted.frames().iter().zip(&trace.values) {
            let mean = f.pixels().iter().map(|&p| p as f64).sum::<f64>() / 256.0;
            prop_assert!((mean - v).abs() < 1e-9);
        }
    }

    #[test]
    fn ostwald_is_linear_in_time_and_density(
        rho in 0.5f64..2.0, t in 1.0f64..200.0, t_ref in 1.0f64..200.0, k in 0.1f64..10.0,
    ) {
        let base = ostwald_viscosity(&ViscometerReading::new(rho, t, t_ref)).unwrap();
        let in_t = ostwald_viscosity(&ViscometerReading::new(rho, k * t, t_ref)).unwrap();
        let in_rho = ostwald_viscosity(&ViscometerReading::new(k * rho, t, t_ref)).unwrap();
        prop_assert!((in_t - k * base).abs() <= 1e-12 * in_t.abs().max(1.0));
        prop_assert!((in_rho - k * base).abs() <= 1e-12 * in_rho.abs().max(1.0));
    }

    #[test]
    fn calibration_residuals_bounded_by_reported_norm(
        pts in prop::collection::btree_map(0u32..1000, 0.1f64..50.0, 4..20),
    ) {
        let points: Vec<(f64, f64)> = pts.iter().map(|(&v, &cp)| (v as f64 / 1000.0, cp)).collect();
        let model = fit_calibration(&points).unwrap();
        let norm = points
            .iter()
            .map(|&(v, cp)| (apply_calibration(&model, v).viscosity_cp - cp).powi(2))
            .sum::<f64>()
            .sqrt();
        prop_assert!((norm - model.residual_norm).abs() <= 1e-6 * (1.0 + norm));
        for &(v, cp) in &points {
            prop_assert!((apply_calibration(&model, v).viscosity_cp - cp).abs() <= model.residual_norm + 1e-9);
        }
    }

    #[test]
    fn framestore_round_trip_is_identity(frames in prop::collection::vec(frame_strategy(17, 9, 255), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let seq = sequence(frames);
        framestore::write_sequence(&seq, dir.path()).unwrap();
        prop_assert_eq!(framestore::read_sequence(dir.path()).unwrap(), seq);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn window_selection_matches_brute_force(
        values in prop::collection::vec(0u8..=10, 2..60),
        peak_mask in prop::collection::vec(any::<bool>(), 60),
        n in 3usize..=5,
    ) {
        // Coarse values make ties common.
        let trace = IntensityTrace::from_values(values.iter().map(|&v| v as f64).collect());
        prop_assume!(trace.is_ok());
        let trace = trace.unwrap();
        let peaks: Vec<usize> = (0..trace.len()).filter(|&i| peak_mask[i]).collect();
        match (select_window(&peaks, &trace, n), brute_force_window(&peaks, &trace.normalized, n)) {
            (Ok(sel), Some(expected)) => prop_assert_eq!(sel.indices, expected),
            (Err(_), None) => {}
            (got, expected) => prop_assert!(false, "{:?} vs {:?}", got, expected),
        }
    }
}
