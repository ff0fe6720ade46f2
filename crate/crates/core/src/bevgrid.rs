//! Metric BEV rasters: class-ID grids, polyline rasterization and the
//! re-projection of ego-frame ground truth into each camera's ground plane.

use std::fs;
use std::io::{BufReader, Cursor};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    cam_to_ego, cam_to_pixel, CameraExtrinsics, CameraIntrinsics, IpmSpec,
};

/// Class ID for cells without an observation.
pub const VOID: u8 = 255;
pub const BACKGROUND: u8 = 0;

/// Slack on the band test so cells exactly `width / 2` away are excluded
/// regardless of rounding in the centre computation.
const BAND_SLACK: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum GridError {
    #[error("polyline needs at least two distinct points (got {0})")]
    DegeneratePolyline(usize),
    #[error("line width {width} is below the grid resolution {resolution}")]
    WidthBelowResolution { width: f64, resolution: f64 },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("grid is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    SizeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub z_range: (f64, f64),
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x_range: (-15.0, 15.0),
            z_range: (-30.0, 30.0),
            resolution: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub ix: usize,
    pub iz: usize,
}

impl GridSpec {
    pub fn new(x_range: (f64, f64), z_range: (f64, f64), resolution: f64) -> Result<Self, GridError> {
        let s = Self {
            x_range,
            z_range,
            resolution,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.resolution > 0.0) {
            return Err(GridError::InvalidSpec(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        for (name, (lo, hi)) in [("x", self.x_range), ("z", self.z_range)] {
            let cells = (hi - lo) / self.resolution;
            if !(cells >= 1.0) || (cells - cells.round()).abs() > 1e-6 {
                return Err(GridError::InvalidSpec(format!(
                    "{name} extent ({lo}, {hi}) is not a whole number of {} m cells",
                    self.resolution
                )));
            }
        }
        Ok(())
    }

    /// Cells along x (raster width).
    pub fn nx(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.resolution).round() as usize
    }

    /// Cells along z (raster height).
    pub fn nz(&self) -> usize {
        ((self.z_range.1 - self.z_range.0) / self.resolution).round() as usize
    }

    pub fn len(&self) -> usize {
        self.nx() * self.nz()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell containing the ground point `(x, z)`. Cells are half-open, so the
    /// max edges are outside the grid.
    pub fn world_to_cell(&self, x: f64, z: f64) -> Option<CellIndex> {
        let fx = ((x - self.x_range.0) / self.resolution).floor();
        let fz = ((z - self.z_range.0) / self.resolution).floor();
        if fx >= 0.0 && fz >= 0.0 && fx < self.nx() as f64 && fz < self.nz() as f64 {
            Some(CellIndex {
                ix: fx as usize,
                iz: fz as usize,
            })
        } else {
            None
        }
    }

    pub fn cell_center(&self, c: CellIndex) -> (f64, f64) {
        (
            self.x_range.0 + (c.ix as f64 + 0.5) * self.resolution,
            self.z_range.0 + (c.iz as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous grid coordinates (cell units) of a ground point.
    fn to_grid(&self, x: f64, z: f64) -> (f64, f64) {
        (
            (x - self.x_range.0) / self.resolution,
            (z - self.z_range.0) / self.resolution,
        )
    }

    /// `(x_min, x_max, z_min, z_max)` of the extent scaled about its centre.
    pub fn scaled_extent(&self, factor: f64) -> (f64, f64, f64, f64) {
        let cx = 0.5 * (self.x_range.0 + self.x_range.1);
        let cz = 0.5 * (self.z_range.0 + self.z_range.1);
        let hx = 0.5 * (self.x_range.1 - self.x_range.0) * factor;
        let hz = 0.5 * (self.z_range.1 - self.z_range.0) * factor;
        (cx - hx, cx + hx, cz - hz, cz + hz)
    }
}

/// Which coordinate frame a raster lives in; stored in the JSON sidecar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frame", rename_all = "snake_case")]
pub enum GridGeometry {
    Ego(GridSpec),
    Camera(IpmSpec),
    Pixel { width: usize, height: usize },
}

/// Row-major raster of class IDs. Row index runs along z (or image v),
/// column index along x (or image u).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticGrid {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SemanticGrid {
    pub fn filled(width: usize, height: usize, class_id: u8) -> Self {
        Self {
            width,
            height,
            data: vec![class_id; width * height],
        }
    }

    pub fn for_spec(spec: &GridSpec, class_id: u8) -> Self {
        Self::filled(spec.nx(), spec.nz(), class_id)
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, GridError> {
        if data.len() != width * height {
            return Err(GridError::SizeMismatch {
                got_w: data.len(),
                got_h: 1,
                want_w: width,
                want_h: height,
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, class_id: u8) {
        self.data[row * self.width + col] = class_id;
    }

    pub fn at(&self, c: CellIndex) -> u8 {
        self.get(c.ix, c.iz)
    }

    pub fn check_size(&self, width: usize, height: usize) -> Result<(), GridError> {
        if self.width != width || self.height != height {
            return Err(GridError::SizeMismatch {
                got_w: self.width,
                got_h: self.height,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }

    /// Sorted set of class IDs present.
    pub fn classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    /// `(col, row)` of every cell holding `class_id`.
    pub fn cells_of(&self, class_id: u8) -> Vec<(i64, i64)> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == class_id)
            .map(|(i, _)| ((i % self.width) as i64, (i / self.width) as i64))
            .collect()
    }

    pub fn count(&self, class_id: u8) -> usize {
        self.data.iter().filter(|&&v| v == class_id).count()
    }

    /// Binary P5 PGM, one byte per cell.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        PnmEncoder::new(&mut buf)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(
                &self.data,
                self.width as u32,
                self.height as u32,
                ExtendedColorType::L8,
            )
            .expect("in-memory PGM encoding cannot fail");
        buf
    }

    pub fn from_pgm_bytes(bytes: &[u8], path: &Path) -> Result<Self, GridError> {
        let fmt = |e: image::ImageError| GridError::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let dec = PnmDecoder::new(BufReader::new(Cursor::new(bytes))).map_err(fmt)?;
        if dec.color_type() != image::ColorType::L8 {
            return Err(GridError::Format {
                path: path.to_path_buf(),
                message: format!("expected 8-bit graymap, found {:?}", dec.color_type()),
            });
        }
        let (w, h) = dec.dimensions();
        let mut data = vec![0u8; dec.total_bytes() as usize];
        dec.read_image(&mut data).map_err(fmt)?;
        Self::from_raw(w as usize, h as usize, data)
    }

    /// Writes `path` (PGM) and the geometry sidecar next to it (`.json`).
    pub fn save(&self, path: &Path, geometry: &GridGeometry) -> Result<(), GridError> {
        write_file(path, &self.to_pgm_bytes())?;
        let sidecar = serde_json::to_vec_pretty(geometry).expect("geometry serializes");
        write_file(&path.with_extension("json"), &sidecar)
    }

    pub fn load(path: &Path) -> Result<(Self, GridGeometry), GridError> {
        let bytes = fs::read(path).map_err(|source| GridError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let grid = Self::from_pgm_bytes(&bytes, path)?;
        let side = path.with_extension("json");
        let text = fs::read(&side).map_err(|source| GridError::Io {
            path: side.clone(),
            source,
        })?;
        let geometry: GridGeometry =
            serde_json::from_slice(&text).map_err(|e| GridError::Format {
                path: side,
                message: e.to_string(),
            })?;
        Ok((grid, geometry))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), GridError> {
    fs::write(path, bytes).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Paints every cell within `width / 2` of the polyline, plus every cell the
/// polyline passes through, with `class_id`. Later calls overwrite earlier ones.
pub fn rasterize_polyline(
    points: &[(f64, f64)],
    width: f64,
    class_id: u8,
    spec: &GridSpec,
    grid: &mut SemanticGrid,
) -> Result<(), GridError> {
    let distinct = points.windows(2).any(|w| w[0] != w[1]);
    if points.len() < 2 || !distinct {
        return Err(GridError::DegeneratePolyline(points.len()));
    }
    if width < spec.resolution {
        return Err(GridError::WidthBelowResolution {
            width,
            resolution: spec.resolution,
        });
    }
    grid.check_size(spec.nx(), spec.nz())?;
    let half = 0.5 * width;
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        paint_band(a, b, half, class_id, spec, grid);
        paint_traversal(a, b, class_id, spec, grid);
    }
    Ok(())
}

fn paint_band(
    a: (f64, f64),
    b: (f64, f64),
    half: f64,
    class_id: u8,
    spec: &GridSpec,
    grid: &mut SemanticGrid,
) {
    let lo = spec.to_grid(a.0.min(b.0) - half, a.1.min(b.1) - half);
    let hi = spec.to_grid(a.0.max(b.0) + half, a.1.max(b.1) + half);
    let clamp = |v: f64, n: usize| v.floor().clamp(0.0, n as f64 - 1.0) as usize;
    let (x0, x1) = (clamp(lo.0, spec.nx()), clamp(hi.0, spec.nx()));
    let (z0, z1) = (clamp(lo.1, spec.nz()), clamp(hi.1, spec.nz()));
    let (dx, dz) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dz * dz;
    for iz in z0..=z1 {
        for ix in x0..=x1 {
            let (cx, cz) = spec.cell_center(CellIndex { ix, iz });
            let t = if len2 > 0.0 {
                (((cx - a.0) * dx + (cz - a.1) * dz) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, pz) = (a.0 + t * dx - cx, a.1 + t * dz - cz);
            if (px * px + pz * pz).sqrt() + BAND_SLACK < half {
                grid.set(ix, iz, class_id);
            }
        }
    }
}

/// Voxel traversal over half-open cells: marks every cell containing some
/// point of the closed segment.
fn paint_traversal(
    a: (f64, f64),
    b: (f64, f64),
    class_id: u8,
    spec: &GridSpec,
    grid: &mut SemanticGrid,
) {
    let (ga, gb) = (spec.to_grid(a.0, a.1), spec.to_grid(b.0, b.1));
    let mut cell = [ga.0.floor() as i64, ga.1.floor() as i64];
    let start = [ga.0, ga.1];
    let dir = [gb.0 - ga.0, gb.1 - ga.1];
    let mut step = [0i64; 2];
    let mut t_max = [f64::INFINITY; 2];
    let mut t_delta = [f64::INFINITY; 2];
    for k in 0..2 {
        if dir[k] > 0.0 {
            step[k] = 1;
            t_max[k] = ((cell[k] + 1) as f64 - start[k]) / dir[k];
            t_delta[k] = 1.0 / dir[k];
        } else if dir[k] < 0.0 {
            step[k] = -1;
            t_max[k] = (cell[k] as f64 - start[k]) / dir[k];
            t_delta[k] = -1.0 / dir[k];
        }
    }
    // Moving in +k enters the next cell at t_max; moving in -k only leaves the
    // current cell strictly after t_max.
    let crosses = |k: usize, t: f64| if step[k] > 0 { t <= 1.0 } else { t < 1.0 };
    let (nx, nz) = (spec.nx() as i64, spec.nz() as i64);
    loop {
        if cell[0] >= 0 && cell[1] >= 0 && cell[0] < nx && cell[1] < nz {
            grid.set(cell[0] as usize, cell[1] as usize, class_id);
        }
        let t = t_max[0].min(t_max[1]);
        let move_x = t_max[0] == t && crosses(0, t);
        let move_z = t_max[1] == t && crosses(1, t);
        if !move_x && !move_z {
            break;
        }
        if move_x {
            cell[0] += step[0];
            t_max[0] += t_delta[0];
        }
        if move_z {
            cell[1] += step[1];
            t_max[1] += t_delta[1];
        }
    }
}

/// Re-projects ego-frame ground truth into a camera's ground-plane grid.
///
/// Each camera cell centre on the plane `Y_c = plane_height` is mapped to the
/// ego frame and takes the class of the ego cell it lands in. Cells outside
/// the ego grid or outside the image frame become [`VOID`].
pub fn ego_gt_to_camera_gt(
    ego_gt: &SemanticGrid,
    grid: &GridSpec,
    e: &CameraExtrinsics,
    k: &CameraIntrinsics,
    spec: &IpmSpec,
) -> SemanticGrid {
    let mut out = SemanticGrid::filled(spec.out_width, spec.out_height, VOID);
    for row in 0..spec.out_height {
        for col in 0..spec.out_width {
            let p = spec.cell_center(col, row);
            let visible = cam_to_pixel(p, k)
                .ok()
                .and_then(|px| k.nearest_pixel(px))
                .is_some();
            if !visible {
                continue;
            }
            let w = cam_to_ego(p, e);
            if let Some(c) = grid.world_to_cell(w.x, w.z) {
                out.set(col, row, ego_gt.at(c));
            }
        }
    }
    out
}
