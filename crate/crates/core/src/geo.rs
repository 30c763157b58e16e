//! WGS84 geodetic/ECEF conversions and straight-line propagation delays.
//!
//! All solver math runs in ECEF, where Euclidean distance is physically
//! meaningful at the few-hundred-kilometre scale of a receiver network.
//! Altitudes are ellipsoidal (WGS84); sensor heights are assumed to be
//! ellipsoidal as well.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT_MPS: f64 = 299_792_458.0;

/// WGS84 semi-major axis, metres.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis, metres.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Altitude window accepted for aircraft and sensor records.
pub const MIN_RECORD_ALTITUDE_M: f64 = -1_000.0;
pub const MAX_RECORD_ALTITUDE_M: f64 = 30_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("geodetic conversion is singular at the Earth's centre")]
    Singularity,
}

/// Physical constants used by the propagation model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants {
    pub c_mps: f64,
}

impl PhysicalConstants {
    pub const VACUUM: PhysicalConstants = PhysicalConstants {
        c_mps: SPEED_OF_LIGHT_MPS,
    };
}

/// A WGS84 geodetic position (decimal degrees, metres above the ellipsoid).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
}

impl GeoPosition {
    pub fn new(latitude_deg: f64, longitude_deg: f64, altitude_m: f64) -> Self {
        Self {
            latitude_deg,
            longitude_deg,
            altitude_m,
        }
    }

    /// Checks latitude and longitude ranges.
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.latitude_deg.is_finite() && (-90.0..=90.0).contains(&self.latitude_deg)) {
            return Err(GeoError::InvalidCoordinate(format!(
                "latitude {} outside [-90, 90]",
                self.latitude_deg
            )));
        }
        if !(self.longitude_deg.is_finite() && (-180.0..180.0).contains(&self.longitude_deg)) {
            return Err(GeoError::InvalidCoordinate(format!(
                "longitude {} outside [-180, 180)",
                self.longitude_deg
            )));
        }
        if !self.altitude_m.is_finite() {
            return Err(GeoError::InvalidCoordinate(format!(
                "altitude {} is not finite",
                self.altitude_m
            )));
        }
        Ok(())
    }

    /// Like [`validate`](Self::validate) but also enforces the altitude window
    /// used for aircraft and sensor records.
    pub fn validate_record(&self) -> Result<(), GeoError> {
        self.validate()?;
        if !(MIN_RECORD_ALTITUDE_M..=MAX_RECORD_ALTITUDE_M).contains(&self.altitude_m) {
            return Err(GeoError::InvalidCoordinate(format!(
                "altitude {} m outside [{MIN_RECORD_ALTITUDE_M}, {MAX_RECORD_ALTITUDE_M}]",
                self.altitude_m
            )));
        }
        Ok(())
    }

    pub fn to_ecef(&self) -> Result<EcefPosition, GeoError> {
        geodetic_to_ecef(self)
    }
}

/// Earth-centred, Earth-fixed Cartesian position in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPosition {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl EcefPosition {
    pub const ORIGIN: EcefPosition = EcefPosition {
        x_m: 0.0,
        y_m: 0.0,
        z_m: 0.0,
    };

    pub fn new(x_m: f64, y_m: f64, z_m: f64) -> Self {
        Self { x_m, y_m, z_m }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn distance(&self, other: &EcefPosition) -> f64 {
        let dx = self.x_m - other.x_m;
        let dy = self.y_m - other.y_m;
        let dz = self.z_m - other.z_m;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x_m.is_finite() && self.y_m.is_finite() && self.z_m.is_finite()
    }

    pub fn to_geodetic(&self) -> Result<GeoPosition, GeoError> {
        ecef_to_geodetic(self)
    }
}

/// Closed-form WGS84 forward transform.
pub fn geodetic_to_ecef(g: &GeoPosition) -> Result<EcefPosition, GeoError> {
    g.validate()?;
    let lat = g.latitude_deg.to_radians();
    let lon = g.longitude_deg.to_radians();
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    Ok(EcefPosition {
        x_m: (n + g.altitude_m) * cos_lat * cos_lon,
        y_m: (n + g.altitude_m) * cos_lat * sin_lon,
        z_m: (n * (1.0 - WGS84_E2) + g.altitude_m) * sin_lat,
    })
}

/// Inverse transform by fixed-point iteration on latitude.
///
/// The height formula `p cos φ + z sin φ - a sqrt(1 - e² sin² φ)` stays
/// well conditioned at the poles, where the usual `p / cos φ - N` does not.
pub fn ecef_to_geodetic(e: &EcefPosition) -> Result<GeoPosition, GeoError> {
    if !e.is_finite() {
        return Err(GeoError::InvalidCoordinate(format!(
            "non-finite ECEF position {e:?}"
        )));
    }
    let p = e.x_m.hypot(e.y_m);
    if p == 0.0 && e.z_m == 0.0 {
        return Err(GeoError::Singularity);
    }
    let lon = e.y_m.atan2(e.x_m);
    let mut lat = e.z_m.atan2(p * (1.0 - WGS84_E2));
    for _ in 0..30 {
        let sin_lat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        let next = (e.z_m + WGS84_E2 * n * sin_lat).atan2(p);
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    let (sin_lat, cos_lat) = lat.sin_cos();
    let alt = p * cos_lat + e.z_m * sin_lat - WGS84_A * (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    let mut lon_deg = lon.to_degrees();
    if lon_deg >= 180.0 {
        lon_deg -= 360.0;
    }
    Ok(GeoPosition {
        latitude_deg: lat.to_degrees(),
        longitude_deg: lon_deg,
        altitude_m: alt,
    })
}

/// Straight-line vacuum propagation delay in seconds.
pub fn propagation_delay(a: &EcefPosition, b: &EcefPosition) -> f64 {
    a.distance(b) / SPEED_OF_LIGHT_MPS
}

/// East/north/up unit vectors of the local tangent frame at `g`.
pub fn enu_basis(g: &GeoPosition) -> [Vector3<f64>; 3] {
    let lat = g.latitude_deg.to_radians();
    let lon = g.longitude_deg.to_radians();
    let (sin_lat, cos_lat) = lat.sin_cos();
    let (sin_lon, cos_lon) = lon.sin_cos();
    [
        Vector3::new(-sin_lon, cos_lon, 0.0),
        Vector3::new(-sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat),
        Vector3::new(cos_lat * cos_lon, cos_lat * sin_lon, sin_lat),
    ]
}

/// Offsets `origin` by `(east, north, up)` metres in its local tangent frame.
pub fn enu_offset(
    origin: &GeoPosition,
    east_m: f64,
    north_m: f64,
    up_m: f64,
) -> Result<EcefPosition, GeoError> {
    let base = geodetic_to_ecef(origin)?.to_vector();
    let [e, n, u] = enu_basis(origin);
    Ok(EcefPosition::from_vector(
        &(base + e * east_m + n * north_m + u * up_m),
    ))
}
