//! Dynamic speckle video from Brownian scatterers.
//!
//! Scatterers diffuse in the plane of an illuminated spot with the
//! Stokes–Einstein diffusion coefficient of the liquid. Each frame is the
//! intensity of the coherent sum of their round-trip phasors, optionally
//! blended with a fixed substrate speckle, and quantized to 8 bits with the
//! 99.5th percentile mapped to full scale.

mod phasor;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{ensure, Error, Result};
use crate::frame::{Channel, Frame, FrameSequence, SequenceMeta};
use crate::rng::{domain, stream};
use phasor::PixelGrid;

/// Boltzmann constant, J/K (exact SI value).
pub const BOLTZMANN: f64 = 1.380649e-23;

pub const DEFAULT_WAVELENGTH_M: f64 = 800e-9;
/// 80 nm per pixel: speckle grains span about two pixels.
pub const DEFAULT_PIXELS_PER_METER: f64 = 1.25e7;
/// Radius of the ~1 mm diameter laser dot.
pub const DEFAULT_SPOT_RADIUS_M: f64 = 0.5e-3;
pub const DEFAULT_PARTICLE_COUNT: usize = 500;
pub const DEFAULT_PARTICLE_RADIUS_M: f64 = 0.7e-6;
pub const ROOM_TEMPERATURE_K: f64 = 293.15;

const NORMALIZATION_PERCENTILE: f64 = 0.995;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiquidSpec {
    pub viscosity_pa_s: f64,
    pub particle_radius_m: f64,
    pub temperature_k: f64,
    /// Fraction of the light scattered by the liquid; the rest comes from the
    /// static substrate underneath.
    pub opacity: f64,
}

impl LiquidSpec {
    pub fn new(viscosity_pa_s: f64, particle_radius_m: f64, temperature_k: f64, opacity: f64) -> Self {
        Self {
            viscosity_pa_s,
            particle_radius_m,
            temperature_k,
            opacity,
        }
    }

    /// An opaque liquid at room temperature with the default scatterer size.
    pub fn with_viscosity(viscosity_pa_s: f64) -> Self {
        Self::new(viscosity_pa_s, DEFAULT_PARTICLE_RADIUS_M, ROOM_TEMPERATURE_K, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.viscosity_pa_s > 0.0 && self.viscosity_pa_s.is_finite(), || {
            format!("viscosity must be positive, got {}", self.viscosity_pa_s)
        })?;
        ensure(
            self.particle_radius_m > 0.0 && self.particle_radius_m.is_finite(),
            || format!("particle radius must be positive, got {}", self.particle_radius_m),
        )?;
        ensure(self.temperature_k > 0.0 && self.temperature_k.is_finite(), || {
            format!("temperature must be positive, got {}", self.temperature_k)
        })?;
        ensure((0.0..=1.0).contains(&self.opacity), || {
            format!("opacity must lie in [0, 1], got {}", self.opacity)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsConfig {
    pub wavelength_m: f64,
    pub width: usize,
    pub height: usize,
    /// Magnification of the imaging path; higher values model more zoom.
    pub pixels_per_meter: f64,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub particle_count: usize,
    pub spot_radius_m: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            wavelength_m: DEFAULT_WAVELENGTH_M,
            width: 256,
            height: 256,
            pixels_per_meter: DEFAULT_PIXELS_PER_METER,
            frames: 120,
            fps: 30.0,
            seed: 0,
            particle_count: DEFAULT_PARTICLE_COUNT,
            spot_radius_m: DEFAULT_SPOT_RADIUS_M,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.wavelength_m > 0.0, || {
            format!("wavelength must be positive, got {}", self.wavelength_m)
        })?;
        ensure(self.width >= 16 && self.height >= 16, || {
            format!("image must be at least 16x16, got {}x{}", self.width, self.height)
        })?;
        ensure(self.pixels_per_meter > 0.0, || {
            format!("pixels_per_meter must be positive, got {}", self.pixels_per_meter)
        })?;
        ensure(self.fps > 0.0, || format!("fps must be positive, got {}", self.fps))?;
        ensure(self.frames >= 1, || "at least one frame is required".into())?;
        ensure(self.particle_count >= 1, || "at least one scatterer is required".into())?;
        ensure(self.spot_radius_m > 0.0, || {
            format!("spot radius must be positive, got {}", self.spot_radius_m)
        })
    }

    pub(crate) fn wavenumber(&self) -> f64 {
        TAU / self.wavelength_m
    }

    fn grid(&self) -> PixelGrid {
        PixelGrid {
            width: self.width,
            height: self.height,
            pitch_m: 1.0 / self.pixels_per_meter,
        }
    }
}

/// Flat JSON simulation config, as read by `speckle sim`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub viscosity_pa_s: f64,
    pub particle_radius_m: f64,
    pub temperature_k: f64,
    pub opacity: f64,
    pub wavelength_m: f64,
    pub width: usize,
    pub height: usize,
    pub pixels_per_meter: f64,
    pub frames: usize,
    pub fps: f64,
    pub seed: u64,
    pub particle_count: usize,
}

impl SimConfig {
    pub fn from_parts(liquid: &LiquidSpec, optics: &OpticsConfig) -> Self {
        Self {
            viscosity_pa_s: liquid.viscosity_pa_s,
            particle_radius_m: liquid.particle_radius_m,
            temperature_k: liquid.temperature_k,
            opacity: liquid.opacity,
            wavelength_m: optics.wavelength_m,
            width: optics.width,
            height: optics.height,
            pixels_per_meter: optics.pixels_per_meter,
            frames: optics.frames,
            fps: optics.fps,
            seed: optics.seed,
            particle_count: optics.particle_count,
        }
    }

    pub fn split(&self) -> (LiquidSpec, OpticsConfig) {
        let liquid = LiquidSpec::new(
            self.viscosity_pa_s,
            self.particle_radius_m,
            self.temperature_k,
            self.opacity,
        );
        let optics = OpticsConfig {
            wavelength_m: self.wavelength_m,
            width: self.width,
            height: self.height,
            pixels_per_meter: self.pixels_per_meter,
            frames: self.frames,
            fps: self.fps,
            seed: self.seed,
            particle_count: self.particle_count,
            spot_radius_m: DEFAULT_SPOT_RADIUS_M,
        };
        (liquid, optics)
    }
}

/// Scatterer positions (m) inside the illuminated spot.
#[derive(Debug, Clone, PartialEq)]
pub struct ScattererField {
    positions: Vec<[f64; 2]>,
    diffusion_coeff_m2_s: f64,
    spot_radius_m: f64,
}

impl ScattererField {
    pub fn new(positions: Vec<[f64; 2]>, diffusion_coeff_m2_s: f64, spot_radius_m: f64) -> Result<Self> {
        ensure(diffusion_coeff_m2_s > 0.0, || {
            format!("diffusion coefficient must be positive, got {diffusion_coeff_m2_s}")
        })?;
        ensure(spot_radius_m > 0.0, || {
            format!("spot radius must be positive, got {spot_radius_m}")
        })?;
        if let Some(i) = positions.iter().position(|p| p[0].hypot(p[1]) > spot_radius_m) {
            return Err(Error::InvalidArgument(format!("scatterer {i} lies outside the spot")));
        }
        Ok(Self {
            positions,
            diffusion_coeff_m2_s,
            spot_radius_m,
        })
    }

    /// `count` scatterers placed uniformly in the spot.
    pub fn random<R: Rng + ?Sized>(
        count: usize,
        diffusion_coeff_m2_s: f64,
        spot_radius_m: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let positions = (0..count).map(|_| sample_in_disc(rng, spot_radius_m)).collect();
        Self::new(positions, diffusion_coeff_m2_s, spot_radius_m)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn diffusion_coeff_m2_s(&self) -> f64 {
        self.diffusion_coeff_m2_s
    }

    pub fn spot_radius_m(&self) -> f64 {
        self.spot_radius_m
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

fn sample_in_disc<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> [f64; 2] {
    let r = radius * rng.random::<f64>().sqrt();
    let t = TAU * rng.random::<f64>();
    [r * t.cos(), r * t.sin()]
}

/// Stokes–Einstein diffusion coefficient `kB·T / (6π·η·r)`.
pub fn stokes_einstein(liquid: &LiquidSpec) -> Result<f64> {
    liquid.validate()?;
    Ok(BOLTZMANN * liquid.temperature_k / (6.0 * PI * liquid.viscosity_pa_s * liquid.particle_radius_m))
}

/// Advances every scatterer by an independent Gaussian step with per-axis
/// variance `2·D·dt`. Particles that leave the spot are re-injected
/// uniformly inside it.
pub fn step_brownian<R: Rng + ?Sized>(field: &ScattererField, dt: f64, rng: &mut R) -> Result<ScattererField> {
    ensure(dt > 0.0 && dt.is_finite(), || {
        format!("time step must be positive, got {dt}")
    })?;
    let sigma = (2.0 * field.diffusion_coeff_m2_s * dt).sqrt();
    let spot = field.spot_radius_m;
    let positions = field
        .positions
        .iter()
        .map(|&[x, y]| {
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            let (nx, ny) = (x + sigma * dx, y + sigma * dy);
            if nx.hypot(ny) <= spot {
                [nx, ny]
            } else {
                sample_in_disc(rng, spot)
            }
        })
        .collect();
    Ok(ScattererField {
        positions,
        diffusion_coeff_m2_s: field.diffusion_coeff_m2_s,
        spot_radius_m: spot,
    })
}

/// Renders frames for one optical setup; the static substrate speckle is
/// computed once and reused.
pub struct SpeckleRenderer {
    grid: PixelGrid,
    wavenumber: f64,
    opacity: f64,
    substrate: Option<Vec<f64>>,
}

impl SpeckleRenderer {
    pub fn new(optics: &OpticsConfig, liquid: &LiquidSpec) -> Result<Self> {
        optics.validate()?;
        liquid.validate()?;
        let grid = optics.grid();
        let wavenumber = optics.wavenumber();
        let substrate = if liquid.opacity < 1.0 {
            let mut rng = stream(optics.seed, domain::SUBSTRATE, 0);
            let positions: Vec<[f64; 2]> = (0..optics.particle_count)
                .map(|_| sample_in_disc(&mut rng, optics.spot_radius_m))
                .collect();
            let mut s = phasor::intensity(&grid, &positions, wavenumber);
            normalize_mean(&mut s);
            Some(s)
        } else {
            None
        };
        Ok(Self {
            grid,
            wavenumber,
            opacity: liquid.opacity,
            substrate,
        })
    }

    /// Unquantized blended intensity, unit mean where the liquid contributes.
    pub fn intensity(&self, field: &ScattererField) -> Vec<f64> {
        let mut dynamic = if self.opacity > 0.0 {
            phasor::intensity(&self.grid, field.positions(), self.wavenumber)
        } else {
            vec![0.0; self.grid.width * self.grid.height]
        };
        if let Some(sub) = &self.substrate {
            normalize_mean(&mut dynamic);
            let o = self.opacity;
            for (d, s) in dynamic.iter_mut().zip(sub) {
                *d = o * *d + (1.0 - o) * s;
            }
        }
        dynamic
    }

    pub fn render(&self, field: &ScattererField) -> Frame {
        quantize(&self.intensity(field), self.grid.width, self.grid.height)
    }
}

fn normalize_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x /= m);
    }
}

/// Maps the 99.5th-percentile intensity to 255 and quantizes.
pub(crate) fn quantize(intensity: &[f64], width: usize, height: usize) -> Frame {
    let mut scratch = intensity.to_vec();
    let rank = ((NORMALIZATION_PERCENTILE * scratch.len() as f64).ceil() as usize).clamp(1, scratch.len()) - 1;
    let (_, &mut q, _) = scratch.select_nth_unstable_by(rank, f64::total_cmp);
    let data = if q > 0.0 {
        intensity
            .iter()
            .map(|&v| (v / q * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    } else {
        vec![0; intensity.len()]
    };
    Frame::new(width, height, data).expect("intensity buffer matches grid")
}

/// Renders one frame. Builds the substrate speckle from scratch; use
/// [`SpeckleRenderer`] when rendering many frames.
pub fn render_frame(field: &ScattererField, optics: &OpticsConfig, liquid: &LiquidSpec) -> Result<Frame> {
    Ok(SpeckleRenderer::new(optics, liquid)?.render(field))
}

/// Scatterer trajectories: entry `i` is the field after `i` Brownian steps of
/// `1/fps`, each driven by the stream for `(seed, i)`.
pub fn trajectory(liquid: &LiquidSpec, optics: &OpticsConfig) -> Result<Vec<ScattererField>> {
    liquid.validate()?;
    optics.validate()?;
    let d = stokes_einstein(liquid)?;
    let dt = 1.0 / optics.fps;
    let mut rng = stream(optics.seed, domain::SCATTERER_INIT, 0);
    let mut field = ScattererField::random(optics.particle_count, d, optics.spot_radius_m, &mut rng)?;
    let mut out = Vec::with_capacity(optics.frames);
    for i in 0..optics.frames {
        if i > 0 {
            field = step_brownian(&field, dt, &mut stream(optics.seed, domain::BROWNIAN, i as u64))?;
        }
        out.push(field.clone());
    }
    Ok(out)
}

/// Simulates a full speckle video of `optics.frames` frames.
pub fn simulate(liquid: &LiquidSpec, optics: &OpticsConfig) -> Result<FrameSequence> {
    let fields = trajectory(liquid, optics)?;
    let renderer = SpeckleRenderer::new(optics, liquid)?;
    let frames: Vec<Frame> = fields.par_iter().map(|f| renderer.render(f)).collect();
    let meta = SequenceMeta {
        fps: optics.fps,
        shutter_s: 1.0 / optics.fps,
        width: optics.width,
        height: optics.height,
        channel: Channel::Gray,
    };
    FrameSequence::new(frames, meta)
}
