use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::pipeline::CropRegion;
use crate::stabilizer::FrameSelection;

/// Side of the block-mean feature grid.
pub const FEATURE_GRID: usize = 64;
pub const FEATURE_DIM: usize = FEATURE_GRID * FEATURE_GRID;

/// Block-mean of `|b − a|` over `region` on a `FEATURE_GRID²` grid. Block
/// `i` along an axis of length `L` covers `[⌊iL/64⌋, ⌊(i+1)L/64⌋)`.
pub fn difference_features(a: &Frame, b: &Frame, region: &CropRegion) -> Result<Vec<f64>> {
    let (w, h) = (region.width(), region.height());
    if w < FEATURE_GRID || h < FEATURE_GRID {
        return Err(Error::RegionTooSmall {
            width: w,
            height: h,
            min: FEATURE_GRID,
        });
    }
    if !region.fits(a) || !region.fits(b) {
        return Err(Error::InvalidArgument(format!(
            "crop region {region:?} exceeds the frame"
        )));
    }
    let edges = |len: usize| -> Vec<usize> { (0..=FEATURE_GRID).map(|i| i * len / FEATURE_GRID).collect() };
    let (xe, ye) = (edges(w), edges(h));
    // Column index -> block index.
    let mut col_block = vec![0usize; w];
    for bx in 0..FEATURE_GRID {
        col_block[xe[bx]..xe[bx + 1]].fill(bx);
    }
    let mut sums = vec![0u64; FEATURE_DIM];
    let (x0, y0) = (region.x0(), region.y0());
    for by in 0..FEATURE_GRID {
        let acc = &mut sums[by * FEATURE_GRID..(by + 1) * FEATURE_GRID];
        for y in ye[by]..ye[by + 1] {
            let ra = &a.row(y0 + y)[x0..x0 + w];
            let rb = &b.row(y0 + y)[x0..x0 + w];
            for ((&pa, &pb), &blk) in ra.iter().zip(rb).zip(&col_block) {
                acc[blk] += pa.abs_diff(pb) as u64;
            }
        }
    }
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for by in 0..FEATURE_GRID {
        let bh = (ye[by + 1] - ye[by]) as f64;
        for bx in 0..FEATURE_GRID {
            let bw = (xe[bx + 1] - xe[bx]) as f64;
            out.push(sums[by * FEATURE_GRID + bx] as f64 / (bw * bh));
        }
    }
    Ok(out)
}

/// One feature vector per consecutive pair of selected frames.
pub fn featurize(seq: &FrameSequence, selection: &FrameSelection, region: &CropRegion) -> Result<Vec<Vec<f64>>> {
    let frames: Vec<&Frame> = selection
        .indices
        .iter()
        .map(|&i| {
            seq.frame(i)
                .ok_or_else(|| Error::InvalidArgument(format!("selected frame {i} is outside the sequence")))
        })
        .collect::<Result<_>>()?;
    frames
        .windows(2)
        .map(|p| difference_features(p[0], p[1], region))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Channel;

    #[test]
    fn identical_frames_give_zero_vector() {
        let f = Frame::from_fn(64, 64, |x, y| (x ^ y) as u8);
        let v = difference_features(&f, &f, &CropRegion::full(64, 64)).unwrap();
        assert_eq!(v.len(), FEATURE_DIM);
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_changed_block_gives_one_feature() {
        let a = Frame::filled(256, 256, 50);
        let mut b = a.clone();
        for y in 8..12 {
            for x in 20..24 {
                b.set(x, y, 90);
            }
        }
        let v = difference_features(&a, &b, &CropRegion::full(256, 256)).unwrap();
        let nonzero: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
        assert_eq!(nonzero, vec![2 * FEATURE_GRID + 5]);
        assert_eq!(v[2 * FEATURE_GRID + 5], 40.0);
    }

    #[test]
    fn small_region_rejected() {
        let f = Frame::filled(100, 100, 1);
        let r = CropRegion {
            cx: 50,
            cy: 50,
            hw: 31,
            hh: 40,
        };
        assert!(matches!(
            difference_features(&f, &f, &r),
            Err(Error::RegionTooSmall {
                width: 62,
                height: 80,
                min: 64
            })
        ));
    }

    #[test]
    fn nine_vectors_per_ten_frames() {
        let frames = (0..12).map(|k| Frame::from_fn(64, 64, |x, _| (x * k) as u8)).collect();
        let seq = FrameSequence::from_frames(frames, 30.0, 0.03, Channel::Gray).unwrap();
        let sel = FrameSelection::spaced(1, 10, 1);
        assert_eq!(featurize(&seq, &sel, &CropRegion::full(64, 64)).unwrap().len(), 9);
    }
}
