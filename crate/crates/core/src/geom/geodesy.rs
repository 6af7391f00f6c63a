use alloc::format;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)] // inherent methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);

/// Geodetic GNSS observation. Angles in degrees, altitude in metres above the
/// ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnssFix {
    pub timestamp: f64,
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
}

impl GnssFix {
    pub fn new(timestamp: f64, latitude: f64, longitude: f64, altitude: f64) -> Self {
        Self {
            timestamp,
            latitude,
            longitude,
            altitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.latitude.is_finite() && self.longitude.is_finite() && self.altitude.is_finite()) {
            return Err(Error::domain("non-finite geodetic coordinate"));
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::domain(format!("latitude {} out of range", self.latitude)));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::domain(format!("longitude {} out of range", self.longitude)));
        }
        Ok(())
    }
}

/// East-North-Up coordinates in metres relative to a geodetic origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuPoint {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.east, self.north, self.up)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

fn meridian_radius(sin_lat: f64) -> f64 {
    let d = 1.0 - WGS84_E2 * sin_lat * sin_lat;
    WGS84_A * (1.0 - WGS84_E2) / (d * d.sqrt())
}

pub fn ecef_from_geodetic(fix: &GnssFix) -> Result<Vector3<f64>> {
    fix.validate()?;
    let (sp, cp) = fix.latitude.to_radians().sin_cos();
    let (sl, cl) = fix.longitude.to_radians().sin_cos();
    let n = prime_vertical_radius(sp);
    let h = fix.altitude;
    Ok(Vector3::new(
        (n + h) * cp * cl,
        (n + h) * cp * sl,
        (n * (1.0 - WGS84_E2) + h) * sp,
    ))
}

/// Rotation taking ECEF vectors into the ENU frame at `origin` (rows are the
/// east, north and up axes).
pub fn enu_rotation(origin: &GnssFix) -> Matrix3<f64> {
    let (sp, cp) = origin.latitude.to_radians().sin_cos();
    let (sl, cl) = origin.longitude.to_radians().sin_cos();
    Matrix3::new(-sl, cl, 0.0, -sp * cl, -sp * sl, cp, cp * cl, cp * sl, sp)
}

/// Rotation mapping vectors expressed in ENU at `from` into ENU at `to`.
pub fn enu_frame_rotation(from: &GnssFix, to: &GnssFix) -> Matrix3<f64> {
    enu_rotation(to) * enu_rotation(from).transpose()
}

fn wrap_degrees(mut d: f64) -> f64 {
    while d > 180.0 {
        d -= 360.0;
    }
    while d < -180.0 {
        d += 360.0;
    }
    d
}

/// `ecef(fix) - ecef(origin)`, written with half-angle difference identities
/// so nearby points do not lose digits to cancellation.
fn ecef_delta(fix: &GnssFix, origin: &GnssFix) -> Vector3<f64> {
    let e2 = WGS84_E2;
    let p0 = origin.latitude.to_radians();
    let l0 = origin.longitude.to_radians();
    let dp = (fix.latitude - origin.latitude).to_radians();
    let dl = wrap_degrees(fix.longitude - origin.longitude).to_radians();
    let p1 = p0 + dp;
    let l1 = l0 + dl;
    let (s0, c0) = p0.sin_cos();
    let (s1, c1) = p1.sin_cos();
    let pm = p0 + 0.5 * dp;
    let lm = l0 + 0.5 * dl;
    let shp = (0.5 * dp).sin();
    let shl = (0.5 * dl).sin();
    let ds = 2.0 * pm.cos() * shp;
    let dc = -2.0 * pm.sin() * shp;
    let dcl = -2.0 * lm.sin() * shl;
    let dsl = 2.0 * lm.cos() * shl;
    let q0 = (1.0 - e2 * s0 * s0).sqrt();
    let q1 = (1.0 - e2 * s1 * s1).sqrt();
    let n0 = WGS84_A / q0;
    let dn = WGS84_A * e2 * ds * (s1 + s0) / (q0 * q1 * (q0 + q1));
    let h0 = origin.altitude;
    let dh = fix.altitude - origin.altitude;
    let a0 = (n0 + h0) * c0;
    let da = dn * c1 + (n0 + h0) * dc + dh * c1;
    let (sl1, cl1) = l1.sin_cos();
    Vector3::new(
        da * cl1 + a0 * dcl,
        da * sl1 + a0 * dsl,
        (1.0 - e2) * dn * s1 + ((1.0 - e2) * n0 + h0) * ds + dh * s1,
    )
}

pub fn enu_from_geodetic(fix: &GnssFix, origin: &GnssFix) -> Result<EnuPoint> {
    fix.validate()?;
    origin.validate()?;
    let d = ecef_delta(fix, origin);
    Ok(EnuPoint::from_vector(&(enu_rotation(origin) * d)))
}

/// ECEF to geodetic `(lat°, lon°, alt)` by fixed-point iteration on latitude.
pub fn geodetic_from_ecef(p: &Vector3<f64>) -> (f64, f64, f64) {
    let e2 = WGS84_E2;
    let lon = p.y.atan2(p.x);
    let rho = (p.x * p.x + p.y * p.y).sqrt();
    let mut lat = p.z.atan2(rho * (1.0 - e2));
    let mut h = 0.0;
    for _ in 0..12 {
        let (s, c) = lat.sin_cos();
        let n = prime_vertical_radius(s);
        h = if c.abs() > 1e-3 {
            rho / c - n
        } else {
            p.z / s - n * (1.0 - e2)
        };
        lat = p.z.atan2(rho * (1.0 - e2 * n / (n + h)));
    }
    (lat.to_degrees(), lon.to_degrees(), h)
}

/// Inverse of [`enu_from_geodetic`]. The returned fix carries the origin's
/// timestamp.
pub fn geodetic_from_enu(enu: &EnuPoint, origin: &GnssFix) -> Result<GnssFix> {
    origin.validate()?;
    let target = enu.to_vector();
    if !target.iter().all(|v| v.is_finite()) {
        return Err(Error::domain("non-finite ENU coordinate"));
    }
    let r0 = enu_rotation(origin);
    let ecef = ecef_from_geodetic(origin)? + r0.transpose() * target;
    let (lat, lon, alt) = geodetic_from_ecef(&ecef);
    let mut fix = GnssFix::new(origin.timestamp, lat, wrap_degrees(lon), alt);
    // Newton polish against the forward map, which is accurate to well below
    // the representable spacing of the angles.
    for _ in 0..3 {
        let here = EnuPoint::from_vector(&(r0 * ecef_delta(&fix, origin)));
        let resid = target - here.to_vector();
        let local = enu_rotation(&fix) * r0.transpose() * resid;
        let s = fix.latitude.to_radians().sin();
        let c = fix.latitude.to_radians().cos();
        fix.latitude += (local.y / (meridian_radius(s) + fix.altitude)).to_degrees();
        if c > 1e-12 {
            fix.longitude =
                wrap_degrees(fix.longitude + (local.x / ((prime_vertical_radius(s) + fix.altitude) * c)).to_degrees());
        }
        fix.altitude += local.z;
    }
    fix.latitude = fix.latitude.clamp(-90.0, 90.0);
    Ok(fix)
}

/// Metres spanned by one ulp of the stored latitude and longitude at `fix`:
/// the finest position a degree-valued fix can express.
pub fn geodetic_resolution(fix: &GnssFix) -> f64 {
    let ulp = |d: f64| (f64::from_bits(d.abs().to_bits() + 1) - d.abs()).to_radians();
    WGS84_A * (ulp(fix.latitude) + ulp(fix.longitude))
}
