//! Coordinate systems and camera transforms.
//!
//! World coordinates live in the ground plane (metres). A camera is described
//! by its mount position, the azimuth of its line of sight and its angular
//! field of view. Pixels map to viewing angles through a linear-in-tangent
//! pinhole model; the elevation angle is measured from the downward vertical,
//! so a ray with polar angle `theta` meets the vehicle plane at horizontal
//! range `dh * tan(theta)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("pixel ({u}, {v}) lies outside the {width}x{height} image")]
    PixelOutOfBounds { u: f64, v: f64, width: u32, height: u32 },
    #[error("polar angle {theta} rad is at or above the horizon")]
    AboveHorizon { theta: f64 },
    #[error("point is outside the camera field of view")]
    OutsideFieldOfView,
    #[error("invalid camera configuration: {0}")]
    InvalidCamera(String),
}

/// A point in the ground plane of the world frame, in metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldCoord2D {
    pub x: f64,
    pub y: f64,
}

impl WorldCoord2D {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.x * self.x + self.y * self.y
    }

    pub fn distance(self, other: Self) -> f64 {
        (self - other).norm()
    }

    pub fn distance_sq(self, other: Self) -> f64 {
        (self - other).norm_sq()
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn midpoint(self, other: Self) -> Self {
        Self::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for WorldCoord2D {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for WorldCoord2D {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y)
    }
}

/// Pixel position of a detection; `u` runs along the image width, `v` down
/// the image height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

/// Viewing direction in the world frame: azimuth `phi` from the world x-axis
/// and polar angle `theta` from the downward vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarDirection {
    pub phi: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    pub mount_position: WorldCoord2D,
    /// Azimuth of the optical axis in the world frame (rad).
    pub yaw: f64,
    /// Polar angle of the optical axis, measured from the downward vertical.
    pub axis_polar: f64,
    pub fov_azimuth: f64,
    pub fov_elevation: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Camera height above the vehicle reference height (m).
    pub mount_height_delta: f64,
}

impl CameraConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |msg: String| Err(GeometryError::InvalidCamera(msg));
        if !(self.fov_azimuth > 0.0 && self.fov_azimuth < PI) {
            return bad(format!("fov_azimuth must be in (0, pi), got {}", self.fov_azimuth));
        }
        if !(self.fov_elevation > 0.0 && self.fov_elevation < PI) {
            return bad(format!("fov_elevation must be in (0, pi), got {}", self.fov_elevation));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image dimensions must be positive".into());
        }
        if !(self.mount_height_delta > 0.0) {
            return bad(format!(
                "mount_height_delta must be positive, got {}",
                self.mount_height_delta
            ));
        }
        if !(self.axis_polar > 0.0 && self.axis_polar < FRAC_PI_2) {
            return bad(format!("axis_polar must be in (0, pi/2), got {}", self.axis_polar));
        }
        if !self.yaw.is_finite() || !self.mount_position.is_finite() {
            return bad("yaw and mount position must be finite".into());
        }
        Ok(())
    }

    fn width(&self) -> f64 {
        f64::from(self.image_width)
    }

    fn height(&self) -> f64 {
        f64::from(self.image_height)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Maps a pixel to its viewing direction. The image is treated as the closed
/// rectangle `[0, W] x [0, H]`.
pub fn pixel_to_polar(p: PixelCoord, cam: &CameraConfig) -> Result<PolarDirection, GeometryError> {
    let (w, h) = (cam.width(), cam.height());
    if !(p.u >= 0.0 && p.u <= w && p.v >= 0.0 && p.v <= h) {
        return Err(GeometryError::PixelOutOfBounds {
            u: p.u,
            v: p.v,
            width: cam.image_width,
            height: cam.image_height,
        });
    }
    let az_offset = ((2.0 * p.u / w - 1.0) * (0.5 * cam.fov_azimuth).tan()).atan();
    let el_offset = ((2.0 * p.v / h - 1.0) * (0.5 * cam.fov_elevation).tan()).atan();
    Ok(PolarDirection {
        phi: wrap_angle(cam.yaw + az_offset),
        // rows further down the image look closer to the camera's foot
        theta: cam.axis_polar - el_offset,
    })
}

/// Intersects a viewing ray with the vehicle plane.
pub fn polar_to_world(dir: PolarDirection, cam: &CameraConfig) -> Result<WorldCoord2D, GeometryError> {
    if !(dir.theta < FRAC_PI_2) {
        return Err(GeometryError::AboveHorizon { theta: dir.theta });
    }
    let d_h = cam.mount_height_delta * dir.theta.tan();
    Ok(cam.mount_position + WorldCoord2D::new(d_h * dir.phi.cos(), d_h * dir.phi.sin()))
}

/// Projects a ground-plane point into the image. Inverse of
/// `polar_to_world(pixel_to_polar(.))` for points inside the field of view.
pub fn world_to_pixel(point: WorldCoord2D, cam: &CameraConfig) -> Result<PixelCoord, GeometryError> {
    let rel = point - cam.mount_position;
    let d_h = rel.norm();
    if d_h == 0.0 {
        return Err(GeometryError::OutsideFieldOfView);
    }
    let az_offset = wrap_angle(rel.y.atan2(rel.x) - cam.yaw);
    let half_az = 0.5 * cam.fov_azimuth;
    if az_offset.abs() > half_az {
        return Err(GeometryError::OutsideFieldOfView);
    }
    let theta = (d_h / cam.mount_height_delta).atan();
    let el_offset = cam.axis_polar - theta;
    let half_el = 0.5 * cam.fov_elevation;
    if el_offset.abs() > half_el {
        return Err(GeometryError::OutsideFieldOfView);
    }
    let u = 0.5 * cam.width() * (1.0 + az_offset.tan() / half_az.tan());
    let v = 0.5 * cam.height() * (1.0 + el_offset.tan() / half_el.tan());
    Ok(PixelCoord {
        u: u.clamp(0.0, cam.width()),
        v: v.clamp(0.0, cam.height()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraConfig {
        CameraConfig {
            mount_position: WorldCoord2D::new(0.0, 0.0),
            yaw: 0.0,
            axis_polar: 60f64.to_radians(),
            fov_azimuth: 70f64.to_radians(),
            fov_elevation: 56f64.to_radians(),
            image_width: 1280,
            image_height: 720,
            mount_height_delta: 5.0,
        }
    }

    #[test]
    fn image_center_lies_on_axis() {
        let c = cam();
        let d = pixel_to_polar(PixelCoord { u: 640.0, v: 360.0 }, &c).unwrap();
        assert_eq!(d.phi, 0.0);
        assert!((d.theta - c.axis_polar).abs() < 1e-15);
    }

    #[test]
    fn image_edge_maps_to_half_fov() {
        let c = cam();
        let d = pixel_to_polar(PixelCoord { u: 1280.0, v: 360.0 }, &c).unwrap();
        assert!((d.phi - c.fov_azimuth / 2.0).abs() < 1e-12);
        let d = pixel_to_polar(PixelCoord { u: 0.0, v: 360.0 }, &c).unwrap();
        assert!((d.phi + c.fov_azimuth / 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_rejected() {
        let c = cam();
        assert!(matches!(
            pixel_to_polar(PixelCoord { u: -1.0, v: 10.0 }, &c),
            Err(GeometryError::PixelOutOfBounds { .. })
        ));
        assert!(pixel_to_polar(PixelCoord { u: 10.0, v: 721.0 }, &c).is_err());
    }

    #[test]
    fn polar_examples() {
        let c = cam();
        let q = std::f64::consts::FRAC_PI_4;
        let p = polar_to_world(PolarDirection { phi: 0.0, theta: q }, &c).unwrap();
        assert!((p.x - 5.0).abs() < 1e-12 && p.y.abs() < 1e-12);
        let p = polar_to_world(PolarDirection { phi: FRAC_PI_2, theta: q }, &c).unwrap();
        assert!(p.x.abs() < 1e-12 && (p.y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_rejected() {
        let c = cam();
        let r = polar_to_world(PolarDirection { phi: 0.0, theta: FRAC_PI_2 }, &c);
        assert!(matches!(r, Err(GeometryError::AboveHorizon { .. })));
    }

    #[test]
    fn mount_offset_applied() {
        let mut c = cam();
        c.mount_position = WorldCoord2D::new(10.0, -3.0);
        let p = polar_to_world(PolarDirection { phi: 0.0, theta: std::f64::consts::FRAC_PI_4 }, &c)
            .unwrap();
        assert!((p.x - 15.0).abs() < 1e-12 && (p.y + 3.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut c = cam();
        c.mount_height_delta = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.fov_azimuth = PI;
        assert!(c.validate().is_err());
        assert!(cam().validate().is_ok());
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.5) + 0.5).abs() < 1e-15);
        assert!((wrap_angle(2.0 * PI + 0.25) - 0.25).abs() < 1e-12);
    }
}
