//! Street-canyon scenario description.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{Aabb, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Uniform planar array in the y–z plane, boresight along +x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub m_y: usize,
    pub m_z: usize,
    /// Element spacing in wavelengths.
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    0.5
}

impl ArrayGeometry {
    pub fn new(m_y: usize, m_z: usize) -> Self {
        Self {
            m_y,
            m_z,
            spacing: 0.5,
        }
    }

    pub fn n_antennas(&self) -> usize {
        self.m_y * self.m_z
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_y == 0 || self.m_z == 0 {
            return Err(invalid("array needs m_y >= 1 and m_z >= 1"));
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return Err(invalid("array spacing must be positive"));
        }
        Ok(())
    }
}

/// UE positions, either a rectangular sidewalk grid or an explicit list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum UeGrid {
    /// `nx × ny` points at `origin + (i·spacing, j·spacing, 0)`, index `i·ny + j`.
    Rect {
        origin: Vec3,
        spacing: f64,
        nx: usize,
        ny: usize,
    },
    Points { points: Vec<Vec3>, spacing: f64 },
}

impl UeGrid {
    pub fn points(&self) -> Vec<Vec3> {
        match self {
            UeGrid::Rect {
                origin,
                spacing,
                nx,
                ny,
            } => (0..*nx)
                .flat_map(|i| {
                    (0..*ny).map(move |j| {
                        *origin + Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0)
                    })
                })
                .collect(),
            UeGrid::Points { points, .. } => points.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            UeGrid::Rect { nx, ny, .. } => nx * ny,
            UeGrid::Points { points, .. } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> f64 {
        match self {
            UeGrid::Rect { spacing, .. } | UeGrid::Points { spacing, .. } => *spacing,
        }
    }
}

/// Straight lane along x holding a random number of vehicles per scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub x_min: f64,
    pub x_max: f64,
    pub y_center: f64,
    pub width: f64,
    pub vehicles_min: usize,
    pub vehicles_max: usize,
    /// Minimum bumper-to-bumper distance in meters.
    #[serde(default = "default_gap")]
    pub min_gap: f64,
}

fn default_gap() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleClass {
    pub name: String,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Relative sampling weight.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bs_position: Vec3,
    pub array: ArrayGeometry,
    pub carrier_freq: f64,
    pub bandwidth: f64,
    pub n_subcarriers: usize,
    pub ue_grid: UeGrid,
    /// Static boxes: buildings and street furniture. Blockage by any of them is SNLOS.
    pub buildings: Vec<Aabb>,
    pub lanes: Vec<Lane>,
    pub vehicle_classes: Vec<VehicleClass>,
    pub max_paths: usize,
    /// When set, each link keeps `P ~ U{min_paths, max_paths}` paths.
    #[serde(default)]
    pub min_paths: Option<usize>,
    #[serde(default = "default_rho")]
    pub reflection_coeff: f64,
    /// Complex white Gaussian noise at this per-entry SNR; `None` disables noise.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

fn default_rho() -> f64 {
    0.6
}

impl Scenario {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    /// Absolute subcarrier frequencies, uniform on `[fc − B/2, fc + B/2]`.
    pub fn subcarrier_freqs(&self) -> Vec<f64> {
        let k = self.n_subcarriers;
        let step = self.bandwidth / (k - 1) as f64;
        let start = self.carrier_freq - self.bandwidth / 2.0;
        (0..k).map(|i| start + i as f64 * step).collect()
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / (self.n_subcarriers - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.array.validate()?;
        if self.n_subcarriers < 2 {
            return Err(invalid("n_subcarriers must be at least 2"));
        }
        if !(self.bandwidth > 0.0 && self.carrier_freq > self.bandwidth) {
            return Err(invalid("need carrier_freq > bandwidth > 0"));
        }
        if self.max_paths == 0 {
            return Err(invalid("max_paths must be at least 1"));
        }
        if let Some(min) = self.min_paths {
            if min == 0 || min > self.max_paths {
                return Err(invalid("need 1 <= min_paths <= max_paths"));
            }
        }
        if !(self.reflection_coeff > 0.0 && self.reflection_coeff < 1.0) {
            return Err(invalid("reflection_coeff must lie in (0, 1)"));
        }
        if matches!(self.snr_db, Some(s) if !s.is_finite()) {
            return Err(invalid("snr_db must be finite"));
        }
        if self.ue_grid.is_empty() {
            return Err(invalid("ue_grid is empty"));
        }
        if let Some(b) = self.buildings.iter().find(|b| !b.is_valid()) {
            return Err(invalid(format!("degenerate building box {b:?}")));
        }
        for p in self.ue_grid.points() {
            if self.buildings.iter().any(|b| b.contains(p)) {
                return Err(invalid(format!("grid point {p:?} lies inside a building")));
            }
        }
        if self.buildings.iter().any(|b| b.contains(self.bs_position)) {
            return Err(invalid("BS lies inside a building"));
        }
        let has_vehicles = self.lanes.iter().any(|l| l.vehicles_max > 0);
        if has_vehicles && self.vehicle_classes.is_empty() {
            return Err(invalid("lanes carry vehicles but no vehicle classes are defined"));
        }
        if self.vehicle_classes.iter().any(|c| {
            !(c.length > 0.0 && c.width > 0.0 && c.height > 0.0 && c.weight > 0.0)
        }) {
            return Err(invalid("vehicle class dimensions and weights must be positive"));
        }
        for lane in &self.lanes {
            if lane.x_max <= lane.x_min || lane.width <= 0.0 || lane.vehicles_min > lane.vehicles_max {
                return Err(invalid(format!("malformed lane {lane:?}")));
            }
            if has_vehicles && self.vehicle_classes.iter().any(|c| c.width > lane.width) {
                return Err(invalid("a vehicle class is wider than a lane"));
            }
        }
        Ok(())
    }

    /// Four-lane street canyon with a 40 × 5 sidewalk grid (200 points),
    /// 8×8 array, 3.5 GHz, 100 MHz, 64 subcarriers.
    pub fn desk() -> Self {
        let bx = |x0: f64, y0: f64, x1: f64, y1: f64, h: f64| {
            Aabb::new([x0, y0, 0.0], [x1, y1, h])
        };
        let lane = |y_center: f64| Lane {
            x_min: -10.0,
            x_max: 70.0,
            y_center,
            width: 4.0,
            vehicles_min: 3,
            vehicles_max: 7,
            min_gap: 1.5,
        };
        Scenario {
            bs_position: Vec3::new(3.0, 10.0, 6.0),
            array: ArrayGeometry::new(8, 8),
            carrier_freq: 3.5e9,
            bandwidth: 100e6,
            n_subcarriers: 64,
            ue_grid: UeGrid::Rect {
                origin: Vec3::new(14.0, 27.9, 1.5),
                spacing: 0.8,
                nx: 40,
                ny: 5,
            },
            buildings: vec![
                bx(-20.0, -4.0, 24.0, 8.5, 20.0),
                bx(25.0, -4.0, 80.0, 8.5, 16.0),
                bx(-20.0, 32.0, 18.0, 44.0, 18.0),
                bx(19.0, 32.0, 40.0, 44.0, 24.0),
                bx(41.0, 32.0, 80.0, 44.0, 15.0),
                bx(20.0, 26.9, 23.0, 27.7, 2.4),
                bx(33.0, 26.9, 36.0, 27.7, 2.4),
            ],
            lanes: vec![lane(13.5), lane(17.5), lane(21.5), lane(25.5)],
            vehicle_classes: vec![
                VehicleClass {
                    name: "sedan".into(),
                    length: 4.6,
                    width: 1.8,
                    height: 1.5,
                    weight: 0.6,
                },
                VehicleClass {
                    name: "van".into(),
                    length: 5.2,
                    width: 2.0,
                    height: 2.6,
                    weight: 0.25,
                },
                VehicleClass {
                    name: "truck".into(),
                    length: 9.0,
                    width: 2.5,
                    height: 3.6,
                    weight: 0.15,
                },
            ],
            max_paths: 25,
            min_paths: Some(10),
            reflection_coeff: 0.6,
            snr_db: None,
        }
    }
}
