//! Reference viscometry and the cubic calibration from `V` to viscosity.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Density of the reference fluid (water), g/ml.
pub const REF_DENSITY_G_ML: f64 = 0.997;
/// Viscosity of the reference fluid, cP.
pub const REF_VISCOSITY_CP: f64 = 0.8937;
/// Number of cubic coefficients.
const TERMS: usize = 4;

/// One Ostwald capillary measurement against a reference fluid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViscometerReading {
    pub density_g_ml: f64,
    pub efflux_time_s: f64,
    pub ref_density_g_ml: f64,
    pub ref_time_s: f64,
    pub ref_viscosity_cp: f64,
}

impl ViscometerReading {
    /// A reading against the default water reference.
    pub fn new(density_g_ml: f64, efflux_time_s: f64, ref_time_s: f64) -> Self {
        Self {
            density_g_ml,
            efflux_time_s,
            ref_density_g_ml: REF_DENSITY_G_ML,
            ref_time_s,
            ref_viscosity_cp: REF_VISCOSITY_CP,
        }
    }
}

/// `η = (ρ·t) / (ρ_ref·t_ref) · η_ref`, in cP.
pub fn ostwald_viscosity(r: &ViscometerReading) -> Result<f64> {
    let fields = [
        ("density_g_ml", r.density_g_ml),
        ("efflux_time_s", r.efflux_time_s),
        ("ref_density_g_ml", r.ref_density_g_ml),
        ("ref_time_s", r.ref_time_s),
        ("ref_viscosity_cp", r.ref_viscosity_cp),
    ];
    if let Some((name, v)) = fields.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
    }
    Ok((r.density_g_ml * r.efflux_time_s) / (r.ref_density_g_ml * r.ref_time_s) * r.ref_viscosity_cp)
}

/// Cubic map `V ↦ a₃V³ + a₂V² + a₁V + a₀` (cP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    /// `[a₃, a₂, a₁, a₀]`.
    pub coefficients: [f64; TERMS],
    /// Euclidean norm of the training residuals.
    pub residual_norm: f64,
    pub input_count: usize,
    /// Range of `V` seen during fitting.
    pub v_min: f64,
    pub v_max: f64,
}

impl CalibrationModel {
    /// A model with the given coefficients, valid over `[v_min, v_max]`.
    pub fn from_coefficients(coefficients: [f64; TERMS], v_min: f64, v_max: f64) -> Self {
        Self {
            coefficients,
            residual_norm: 0.0,
            input_count: 0,
            v_min,
            v_max,
        }
    }

    pub fn evaluate(&self, v: f64) -> f64 {
        let [a3, a2, a1, a0] = self.coefficients;
        ((a3 * v + a2) * v + a1) * v + a0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedViscosity {
    pub viscosity_cp: f64,
    /// `V` lies outside the range the model was fitted on.
    pub extrapolated: bool,
}

pub fn apply_calibration(model: &CalibrationModel, v: f64) -> CalibratedViscosity {
    CalibratedViscosity {
        viscosity_cp: model.evaluate(v),
        extrapolated: !(model.v_min..=model.v_max).contains(&v),
    }
}

/// Least-squares cubic through `(V, viscosity_cp)` points, solved from the
/// column-scaled normal equations.
pub fn fit_calibration(points: &[(f64, f64)]) -> Result<CalibrationModel> {
    if points.len() < TERMS {
        return Err(Error::Calibration(format!(
            "a cubic needs at least {TERMS} points, got {}",
            points.len()
        )));
    }
    if let Some((v, y)) = points.iter().find(|(v, y)| !v.is_finite() || !y.is_finite()) {
        return Err(Error::Calibration(format!("non-finite point ({v}, {y})")));
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < TERMS {
        return Err(Error::Calibration(format!(
            "a cubic needs at least {TERMS} distinct V values, got {}",
            distinct.len()
        )));
    }

    let row = |v: f64| [v * v * v, v * v, v, 1.0];
    let mut scale = [0.0; TERMS];
    for &(v, _) in points {
        for (s, x) in scale.iter_mut().zip(row(v)) {
            *s += x * x;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }

    // Augmented normal matrix [AᵀA | Aᵀy] of the scaled design.
    let mut m = [[0.0; TERMS + 1]; TERMS];
    for &(v, y) in points {
        let x = row(v);
        for i in 0..TERMS {
            let xi = x[i] / scale[i];
            for j in 0..TERMS {
                m[i][j] += xi * x[j] / scale[j];
            }
            m[i][TERMS] += xi * y;
        }
    }
    let z = solve(m).ok_or_else(|| Error::Calibration("normal equations are rank deficient".into()))?;
    let mut coefficients = [0.0; TERMS];
    for i in 0..TERMS {
        coefficients[i] = z[i] / scale[i];
    }
    let mut model = CalibrationModel {
        coefficients,
        residual_norm: 0.0,
        input_count: points.len(),
        v_min: distinct[0],
        v_max: distinct[distinct.len() - 1],
    };
    model.residual_norm = points
        .iter()
        .map(|&(v, y)| (model.evaluate(v) - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(model)
}

/// Gaussian elimination with partial pivoting on an augmented 4×5 system.
#[allow(clippy::needless_range_loop)]
fn solve(mut m: [[f64; TERMS + 1]; TERMS]) -> Option<[f64; TERMS]> {
    // Scaled columns have unit norm, so the diagonal starts at 1 and a pivot
    // this small means the columns are numerically dependent.
    const PIVOT_MIN: f64 = 1e-13;
    for col in 0..TERMS {
        let p = (col..TERMS).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))?;
        if m[p][col].abs() < PIVOT_MIN {
            return None;
        }
        m.swap(col, p);
        for r in col + 1..TERMS {
            let f = m[r][col] / m[col][col];
            for c in col..=TERMS {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = [0.0; TERMS];
    for r in (0..TERMS).rev() {
        let tail: f64 = (r + 1..TERMS).map(|c| m[r][c] * x[c]).sum();
        x[r] = (m[r][TERMS] - tail) / m[r][r];
    }
    Some(x)
}

/// Reads `V,viscosity_cp` rows (with header) from a CSV file.
pub fn read_points_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        #[serde(rename = "V")]
        v: f64,
        viscosity_cp: f64,
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    reader
        .deserialize::<Row>()
        .map(|r| r.map(|r| (r.v, r.viscosity_cp)).map_err(csv_err))
        .collect()
}

/// Per-liquid-class calibrations, keyed by class name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationLibrary {
    pub models: BTreeMap<String, CalibrationModel>,
}

impl CalibrationLibrary {
    pub fn insert(&mut self, class: impl Into<String>, model: CalibrationModel) {
        self.models.insert(class.into(), model);
    }

    pub fn get(&self, class: &str) -> Option<&CalibrationModel> {
        self.models.get(class)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ostwald_examples() {
        let id = ostwald_viscosity(&ViscometerReading::new(0.997, 40.0, 40.0)).unwrap();
        assert!((id - 0.8937).abs() < 1e-12);
        let double = ostwald_viscosity(&ViscometerReading::new(0.997, 80.0, 40.0)).unwrap();
        assert!((double - 1.7874).abs() < 1e-12);
        // (1.030 · 60) / (0.997 · 40) · 0.8937, evaluated by hand.
        let milk = ostwald_viscosity(&ViscometerReading::new(1.030, 60.0, 40.0)).unwrap();
        assert!((milk - 1.3849).abs() < 1e-4, "{milk}");
    }

    #[test]
    fn ostwald_rejects_non_positive() {
        assert!(ostwald_viscosity(&ViscometerReading::new(0.0, 40.0, 40.0)).is_err());
        assert!(ostwald_viscosity(&ViscometerReading::new(1.0, -1.0, 40.0)).is_err());
        let r = ViscometerReading {
            ref_viscosity_cp: 0.0,
            ..ViscometerReading::new(1.0, 1.0, 1.0)
        };
        assert!(ostwald_viscosity(&r).is_err());
    }

    #[test]
    fn cubic_recovered_exactly() {
        let truth = [2.5, -1.25, 3.0, 0.75];
        let m0 = CalibrationModel::from_coefficients(truth, 0.0, 1.0);
        let pts: Vec<(f64, f64)> = (0..9).map(|i| i as f64 / 8.0).map(|v| (v, m0.evaluate(v))).collect();
        let m = fit_calibration(&pts).unwrap();
        for (a, b) in m.coefficients.iter().zip(truth) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
        assert!(m.residual_norm < 1e-9);
        assert_eq!((m.v_min, m.v_max), (0.0, 1.0));
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            fit_calibration(&[(0.1, 1.0), (0.2, 2.0), (0.3, 3.0)]),
            Err(Error::Calibration(_))
        ));
        assert!(matches!(
            fit_calibration(&[(0.1, 1.0), (0.1, 2.0), (0.3, 3.0), (0.3, 1.0), (0.5, 1.0)]),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn identity_cubic_and_extrapolation_flag() {
        let m = CalibrationModel::from_coefficients([0.0, 0.0, 1.0, 0.0], 0.2, 0.8);
        let inside = apply_calibration(&m, 0.42);
        assert_eq!(inside.viscosity_cp, 0.42);
        assert!(!inside.extrapolated);
        assert!(apply_calibration(&m, 0.9).extrapolated);
        assert!(apply_calibration(&m, 0.1).extrapolated);
    }

    #[test]
    fn points_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("points.csv");
        fs::write(&p, "V,viscosity_cp\n0.1, 1.5\n0.2,2.0\n").unwrap();
        assert_eq!(read_points_csv(&p).unwrap(), vec![(0.1, 1.5), (0.2, 2.0)]);
        fs::write(&p, "V,viscosity_cp\n0.1,abc\n").unwrap();
        assert!(matches!(read_points_csv(&p), Err(Error::Csv { .. })));
    }

    #[test]
    fn library_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut lib = CalibrationLibrary::default();
        lib.insert(
            "milk",
            CalibrationModel::from_coefficients([0.1, 0.2, 0.3, 0.4], 0.0, 1.0),
        );
        let p = dir.path().join("lib.json");
        lib.save(&p).unwrap();
        assert_eq!(CalibrationLibrary::load(&p).unwrap(), lib);
    }
}
