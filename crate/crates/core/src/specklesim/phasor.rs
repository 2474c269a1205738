//! Tiled evaluation of the round-trip phasor sum
//! `A(p) = Σ_k exp(i · 2k₀ · ‖x_p − x_k‖)`.
//!
//! Inside a tile the path length to a distant scatterer is expanded to second
//! order about the tile centre, which turns the phase into a quadratic in the
//! pixel indices. A quadratic phase can be generated with complex
//! multiplications only, so the inner loop has no transcendental calls and
//! runs eight scatterers per SIMD lane. The third-order remainder of the
//! expansion is bounded by `2k₀ ρ³ / (2 (R − ρ)²)` for a tile of
//! half-diagonal `ρ` at distance `R`; scatterers for which that bound exceeds
//! [`PHASE_TOLERANCE`] are retried on smaller sub-tiles and evaluated exactly
//! on the smallest ones.

use std::f64::consts::TAU;
use wide::f32x8;

const TILE: usize = 16;
const LANES: usize = 8;

/// Worst-case phase error (radians) accepted from the quadratic expansion.
pub(crate) const PHASE_TOLERANCE: f64 = 0.01;

/// Pixel centres laid out in the scatterer plane, centred on the origin.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub pitch_m: f64,
}

impl PixelGrid {
    #[inline]
    pub fn x(&self, ix: usize) -> f64 {
        (ix as f64 + 0.5 - self.width as f64 / 2.0) * self.pitch_m
    }

    #[inline]
    pub fn y(&self, iy: usize) -> f64 {
        (iy as f64 + 0.5 - self.height as f64 / 2.0) * self.pitch_m
    }
}

/// Eight complex numbers.
#[derive(Clone, Copy)]
struct Lane {
    re: f32x8,
    im: f32x8,
}

impl Lane {
    const ZERO: Lane = Lane {
        re: f32x8::ZERO,
        im: f32x8::ZERO,
    };

    /// `exp(i·phase)` per lane; phases must already be reduced to a few
    /// radians so that f32 keeps them accurate.
    #[inline]
    fn cis(phase: &[f32; LANES]) -> Lane {
        let (s, c) = f32x8::from(*phase).sin_cos();
        Lane { re: c, im: s }
    }

    #[inline(always)]
    fn mul(self, o: Lane) -> Lane {
        Lane {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    #[inline(always)]
    fn add(self, o: Lane) -> Lane {
        Lane {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }
}

/// Quadratic phase coefficients of one scatterer over one tile:
/// `a + bx·i + by·j + cxx·i² + cxy·i·j + cyy·j²`.
struct Quad {
    a: f64,
    bx: f64,
    by: f64,
    cxx: f64,
    cxy: f64,
    cyy: f64,
}

/// Per-tile recurrence state for the scatterers on the quadratic path.
#[derive(Default)]
struct QuadBank {
    z_row: Vec<Lane>,
    step_y: Vec<Lane>,
    step_x_row: Vec<Lane>,
    dxx: Vec<Lane>,
    dyy: Vec<Lane>,
    dxy: Vec<Lane>,
}

impl QuadBank {
    fn load(&mut self, quads: &[Quad]) {
        for v in [
            &mut self.z_row,
            &mut self.step_y,
            &mut self.step_x_row,
            &mut self.dxx,
            &mut self.dyy,
            &mut self.dxy,
        ] {
            v.clear();
        }
        for chunk in quads.chunks(LANES) {
            // Unused lanes get zero amplitude and contribute nothing.
            let mut ph = [[0f32; LANES]; 6];
            for (l, q) in chunk.iter().enumerate() {
                ph[0][l] = q.a.rem_euclid(TAU) as f32;
                ph[1][l] = (q.by + q.cyy) as f32;
                ph[2][l] = (q.bx + q.cxx) as f32;
                ph[3][l] = (2.0 * q.cxx) as f32;
                ph[4][l] = (2.0 * q.cyy) as f32;
                ph[5][l] = q.cxy as f32;
            }
            let mut z = Lane::cis(&ph[0]);
            if chunk.len() < LANES {
                let mask: [f32; LANES] = std::array::from_fn(|l| (l < chunk.len()) as u8 as f32);
                let m = f32x8::from(mask);
                z = Lane {
                    re: z.re * m,
                    im: z.im * m,
                };
            }
            self.z_row.push(z);
            self.step_y.push(Lane::cis(&ph[1]));
            self.step_x_row.push(Lane::cis(&ph[2]));
            self.dxx.push(Lane::cis(&ph[3]));
            self.dyy.push(Lane::cis(&ph[4]));
            self.dxy.push(Lane::cis(&ph[5]));
        }
    }
}

/// Smallest tile side tried before falling back to exact evaluation.
const MIN_TILE: usize = 4;

/// Buffers reused across tiles.
#[derive(Default)]
struct Scratch {
    quads: Vec<Quad>,
    bank: QuadBank,
    z: Vec<Lane>,
    sx: Vec<Lane>,
}

/// Field accumulated over the whole image.
struct Field {
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Returns `|A(p)|²` for every pixel, row-major.
pub(crate) fn intensity(grid: &PixelGrid, positions: &[[f64; 2]], wavenumber: f64) -> Vec<f64> {
    let (w, h) = (grid.width, grid.height);
    let mut field = Field {
        re: vec![0.0; w * h],
        im: vec![0.0; w * h],
    };
    let mut scratch = Scratch::default();
    for ty in (0..h).step_by(TILE) {
        for tx in (0..w).step_by(TILE) {
            let tile = Tile {
                x: tx,
                y: ty,
                w: TILE.min(w - tx),
                h: TILE.min(h - ty),
            };
            accumulate(grid, 2.0 * wavenumber, tile, positions, &mut field, &mut scratch);
        }
    }
    field
        .re
        .iter()
        .zip(&field.im)
        .map(|(re, im)| re * re + im * im)
        .collect()
}

#[derive(Clone, Copy)]
struct Tile {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

/// Adds the contribution of `positions` to the pixels of `tile`. Scatterers
/// too close for the quadratic expansion are retried on the four half-size
/// sub-tiles, and evaluated exactly once tiles reach [`MIN_TILE`].
fn accumulate(grid: &PixelGrid, k2: f64, tile: Tile, positions: &[[f64; 2]], field: &mut Field, scratch: &mut Scratch) {
    if positions.is_empty() {
        return;
    }
    let pitch = grid.pitch_m;
    let width = grid.width;
    if tile.w <= MIN_TILE || tile.h <= MIN_TILE {
        for &[px, py] in positions {
            for j in 0..tile.h {
                let dy = grid.y(tile.y + j) - py;
                let row = (tile.y + j) * width + tile.x;
                for i in 0..tile.w {
                    let d = (grid.x(tile.x + i) - px).hypot(dy);
                    let (s, c) = (k2 * d).sin_cos();
                    field.re[row + i] += c;
                    field.im[row + i] += s;
                }
            }
        }
        return;
    }

    let ic = (tile.w - 1) as f64 / 2.0;
    let jc = (tile.h - 1) as f64 / 2.0;
    let cx = grid.x(tile.x) + ic * pitch;
    let cy = grid.y(tile.y) + jc * pitch;
    let rho = ic.hypot(jc) * pitch;

    let mut near: Vec<[f64; 2]> = Vec::new();
    scratch.quads.clear();
    for &[px, py] in positions {
        let (vx, vy) = (cx - px, cy - py);
        let r = vx.hypot(vy);
        if r <= rho || k2 * rho.powi(3) / (2.0 * (r - rho).powi(2)) > PHASE_TOLERANCE {
            near.push([px, py]);
            continue;
        }
        let (ux, uy) = (vx / r, vy / r);
        let gx = k2 * ux * pitch;
        let gy = k2 * uy * pitch;
        let s = k2 * pitch * pitch / r;
        let hxx = s * (1.0 - ux * ux);
        let hyy = s * (1.0 - uy * uy);
        let hxy = -s * ux * uy;
        scratch.quads.push(Quad {
            a: k2 * r - gx * ic - gy * jc + 0.5 * hxx * ic * ic + hxy * ic * jc + 0.5 * hyy * jc * jc,
            bx: gx - hxx * ic - hxy * jc,
            by: gy - hyy * jc - hxy * ic,
            cxx: 0.5 * hxx,
            cxy: hxy,
            cyy: 0.5 * hyy,
        });
    }

    if !scratch.quads.is_empty() {
        let Scratch { quads, bank, z, sx } = scratch;
        bank.load(quads);
        for j in 0..tile.h {
            z.clear();
            z.extend_from_slice(&bank.z_row);
            sx.clear();
            sx.extend_from_slice(&bank.step_x_row);
            let row = (tile.y + j) * width + tile.x;
            for i in 0..tile.w {
                let mut acc = Lane::ZERO;
                for ((zb, sb), db) in z.iter_mut().zip(sx.iter_mut()).zip(&bank.dxx) {
                    acc = acc.add(*zb);
                    *zb = zb.mul(*sb);
                    *sb = sb.mul(*db);
                }
                field.re[row + i] += acc.re.reduce_add() as f64;
                field.im[row + i] += acc.im.reduce_add() as f64;
            }
            for b in 0..bank.z_row.len() {
                bank.z_row[b] = bank.z_row[b].mul(bank.step_y[b]);
                bank.step_y[b] = bank.step_y[b].mul(bank.dyy[b]);
                bank.step_x_row[b] = bank.step_x_row[b].mul(bank.dxy[b]);
            }
        }
    }

    if !near.is_empty() {
        let (w0, h0) = (tile.w / 2, tile.h / 2);
        for (x, w) in [(tile.x, w0), (tile.x + w0, tile.w - w0)] {
            for (y, h) in [(tile.y, h0), (tile.y + h0, tile.h - h0)] {
                accumulate(grid, k2, Tile { x, y, w, h }, &near, field, scratch);
            }
        }
    }
}

/// Direct evaluation of the phasor sum; reference for tests.
#[cfg(test)]
pub(crate) fn intensity_exact(grid: &PixelGrid, positions: &[[f64; 2]], wavenumber: f64) -> Vec<f64> {
    let k2 = 2.0 * wavenumber;
    let mut out = Vec::with_capacity(grid.width * grid.height);
    for iy in 0..grid.height {
        for ix in 0..grid.width {
            let (mut re, mut im) = (0.0, 0.0);
            for &[px, py] in positions {
                let d = (grid.x(ix) - px).hypot(grid.y(iy) - py);
                let (s, c) = (k2 * d).sin_cos();
                re += c;
                im += s;
            }
            out.push(re * re + im * im);
        }
    }
    out
}
