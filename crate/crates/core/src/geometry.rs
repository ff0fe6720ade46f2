//! Pixel, camera and ego coordinate frames and the closed-form transforms
//! between them.
//!
//! Camera axes are x-right, y-down, z-forward. The ego frame uses the same
//! handedness with its origin on the ground below the vehicle centre, so the
//! ground is the plane `Y_w = 0` and a camera mounted one metre up sees it as
//! the plane `Y_c = 1`.
//!
//! Pixel coordinates put pixel centres on integers: pixel `(col, row)` covers
//! `[col - 0.5, col + 0.5) x [row - 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::bevgrid::{SemanticGrid, VOID};

/// Default guard band (pixels) below the horizon row for back-projection.
pub const DEFAULT_HORIZON_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("point has non-positive depth z_c = {0}")]
    NonPositiveDepth(f64),
    #[error("pixel row v = {v} is at or above the horizon row {horizon}")]
    HorizonSingularity { v: f64, horizon: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid extrinsics: {0}")]
    InvalidExtrinsics(String),
    #[error("invalid IPM spec: {0}")]
    InvalidIpmSpec(String),
    #[error("image is {got_w}x{got_h} but intrinsics expect {want_w}x{want_h}")]
    ImageSizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx = {} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy = {} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// The 3x3 intrinsic matrix.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Nearest pixel `(col, row)` for a real-valued pixel coordinate, if in frame.
    pub fn nearest_pixel(&self, px: PixelCoord) -> Option<(usize, usize)> {
        let col = (px.u + 0.5).floor();
        let row = (px.v + 0.5).floor();
        if col >= 0.0 && row >= 0.0 && col < self.width as f64 && row < self.height as f64 {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }
}

/// Rigid ego-to-camera transform: `p_cam = rotation * p_ego + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-9 {
            return Err(GeometryError::InvalidExtrinsics(format!(
                "rotation is not orthonormal (max deviation {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidExtrinsics(format!(
                "rotation determinant is {det}, expected +1"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at ego position `position` (metres), rotated by `yaw` radians
    /// about the vertical axis. Yaw 0 looks along +z, yaw pi/2 along +x.
    pub fn from_yaw(yaw: f64, position: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        // camera -> ego rotation; its transpose maps ego -> camera
        let cam_to_ego = Matrix3::new(
            c, 0.0, s, //
            0.0, 1.0, 0.0, //
            -s, 0.0, c,
        );
        let rotation = cam_to_ego.transpose();
        Self {
            rotation,
            translation: -(rotation * position),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Row-major rotation entries, as stored in calibration files.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    pub fn from_row_major(rotation: [f64; 9], translation: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(
            Matrix3::from_row_slice(&rotation),
            Vector3::from_column_slice(&translation),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl CamPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

impl EgoPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Metric extent of the ground-plane image each view is warped into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpmSpec {
    pub plane_height: f64,
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub out_width: usize,
    pub out_height: usize,
    #[serde(default = "default_horizon_eps")]
    pub horizon_eps: f64,
}

fn default_horizon_eps() -> f64 {
    DEFAULT_HORIZON_EPS
}

impl Default for IpmSpec {
    fn default() -> Self {
        Self {
            plane_height: 1.0,
            x_range: (-5.0, 5.0),
            z_range: (3.0, 29.0),
            out_width: 800,
            out_height: 400,
            horizon_eps: DEFAULT_HORIZON_EPS,
        }
    }
}

impl IpmSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.x_range.0 < self.x_range.1) {
            return Err(GeometryError::InvalidIpmSpec(format!(
                "x_range {:?} is empty",
                self.x_range
            )));
        }
        if !(self.z_range.0 > 0.0 && self.z_range.0 < self.z_range.1) {
            return Err(GeometryError::InvalidIpmSpec(format!(
                "z_range {:?} must be positive and non-empty",
                self.z_range
            )));
        }
        if self.out_width == 0 || self.out_height == 0 {
            return Err(GeometryError::InvalidIpmSpec(
                "output dimensions must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_range.1 - self.x_range.0) / self.out_width as f64
    }

    pub fn cell_depth(&self) -> f64 {
        (self.z_range.1 - self.z_range.0) / self.out_height as f64
    }

    /// Plane point at the centre of output cell `(col, row)`; rows run along +z.
    pub fn cell_center(&self, col: usize, row: usize) -> CamPoint {
        CamPoint {
            x: self.x_range.0 + (col as f64 + 0.5) * self.cell_width(),
            y: self.plane_height,
            z: self.z_range.0 + (row as f64 + 0.5) * self.cell_depth(),
        }
    }

    /// Output cell containing the plane point `(x, z)`, half-open on the max edges.
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let col = ((x - self.x_range.0) / self.cell_width()).floor();
        let row = ((z - self.z_range.0) / self.cell_depth()).floor();
        if col >= 0.0 && row >= 0.0 && col < self.out_width as f64 && row < self.out_height as f64
        {
            Some((col as usize, row as usize))
        } else {
            None
        }
    }
}

pub fn cam_to_pixel(p: CamPoint, k: &CameraIntrinsics) -> Result<PixelCoord, GeometryError> {
    if !(p.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(p.z));
    }
    Ok(PixelCoord {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
    })
}

/// Back-projects a pixel onto the plane `Y_c = spec.plane_height`.
pub fn pixel_to_cam_on_plane(
    px: PixelCoord,
    k: &CameraIntrinsics,
    spec: &IpmSpec,
) -> Result<CamPoint, GeometryError> {
    let horizon = k.cy + spec.horizon_eps;
    if !(px.v > horizon) {
        return Err(GeometryError::HorizonSingularity { v: px.v, horizon });
    }
    let y = spec.plane_height;
    let z = k.fy * y / (px.v - k.cy);
    let x = (px.u - k.cx) * z / k.fx;
    Ok(CamPoint { x, y, z })
}

pub fn ego_to_cam(p: EgoPoint, e: &CameraExtrinsics) -> CamPoint {
    let c = e.rotation * Vector3::new(p.x, p.y, p.z) + e.translation;
    CamPoint {
        x: c.x,
        y: c.y,
        z: c.z,
    }
}

pub fn cam_to_ego(p: CamPoint, e: &CameraExtrinsics) -> EgoPoint {
    let w = e.rotation.transpose() * (Vector3::new(p.x, p.y, p.z) - e.translation);
    EgoPoint {
        x: w.x,
        y: w.y,
        z: w.z,
    }
}

/// Ground-plane area (square metres) covered by the pixel at `px`, from the
/// Jacobian of the back-projection. Grows as `z^3`, which is the far-field
/// stretching that makes distant content blurry after the warp.
pub fn pixel_ground_footprint(
    px: PixelCoord,
    k: &CameraIntrinsics,
    spec: &IpmSpec,
) -> Result<f64, GeometryError> {
    let p = pixel_to_cam_on_plane(px, k, spec)?;
    // dz/dv = -z^2 / (fy h), dx/du = z / fx, dx/dv only shears.
    Ok(p.z.powi(3) / (k.fx * k.fy * spec.plane_height.abs()))
}

/// Warps a pixel-frame class raster onto the camera-frame ground plane.
///
/// Every output cell samples the nearest source pixel of its plane centre;
/// cells that fall outside the image get [`VOID`].
pub fn ipm_warp(
    image: &SemanticGrid,
    k: &CameraIntrinsics,
    spec: &IpmSpec,
) -> Result<SemanticGrid, GeometryError> {
    if image.width() != k.width || image.height() != k.height {
        return Err(GeometryError::ImageSizeMismatch {
            got_w: image.width(),
            got_h: image.height(),
            want_w: k.width,
            want_h: k.height,
        });
    }
    let lut = ipm_lookup(k, spec);
    let mut out = SemanticGrid::filled(spec.out_width, spec.out_height, VOID);
    for (cell, src) in lut.iter().enumerate() {
        if let Some(idx) = src {
            out.data_mut()[cell] = image.data()[*idx as usize];
        }
    }
    Ok(out)
}

/// For each output cell of the warp (row-major), the source pixel index it
/// samples, or `None` when out of frame.
pub fn ipm_lookup(k: &CameraIntrinsics, spec: &IpmSpec) -> Vec<Option<u32>> {
    let mut lut = Vec::with_capacity(spec.out_width * spec.out_height);
    for row in 0..spec.out_height {
        for col in 0..spec.out_width {
            let p = spec.cell_center(col, row);
            let src = cam_to_pixel(p, k)
                .ok()
                .and_then(|px| k.nearest_pixel(px))
                .map(|(c, r)| (r * k.width + c) as u32);
            lut.push(src);
        }
    }
    lut
}
