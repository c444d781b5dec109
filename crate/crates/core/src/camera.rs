//! Pinhole intrinsics and depth back-projection.
//!
//! Pixel `(x, y)` refers to the centre of column `x`, row `y`; image `y`
//! grows downward and camera `Z` points into the scene.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::DepthMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Depth scale: map units to millimetres.
    pub s: f64,
}

impl CameraIntrinsics {
    /// Centred principal point and square pixels for a `resolution`-wide
    /// square image with focal length `focal` pixels.
    pub fn centred(resolution: usize, focal: f64) -> Self {
        let c = (resolution as f64 - 1.0) / 2.0;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            s: 1.0,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.s]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.s <= 0.0 {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        let inside = (-0.5..width as f64 - 0.5).contains(&self.cx)
            && (-0.5..height as f64 - 0.5).contains(&self.cy);
        if !inside {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside {width}x{height} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    /// Metric point for pixel `(x, y)` with map depth `depth`.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> [f64; 3] {
        let z = self.s * depth;
        [(x - self.cx) * z / self.fx, (y - self.cy) * z / self.fy, z]
    }

    /// Perspective projection of a camera-frame point to pixel coordinates.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            p[0] * self.fx / p[2] + self.cx,
            p[1] * self.fy / p[2] + self.cy,
        ]
    }

    /// Metric size of one pixel at map depth `depth`.
    pub fn pixel_footprint(&self, depth: f64) -> f64 {
        self.s * depth / self.fx.min(self.fy)
    }
}

/// Result of back-projecting one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BackProjected {
    Point([f64; 3]),
    /// Non-positive or non-finite depth at this pixel.
    Invalid {
        x: usize,
        y: usize,
        depth: f64,
    },
}

/// Back-projects the listed pixels of `depth` into camera-frame millimetres.
///
/// Out-of-bounds pixels are an error; pixels with unusable depth are
/// reported as [`BackProjected::Invalid`] while the rest are returned.
pub fn back_project(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    pixels: &[(usize, usize)],
) -> Result<Vec<BackProjected>> {
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= depth.width() || y >= depth.height() {
                return Err(Error::Input(format!(
                    "pixel ({x}, {y}) outside {}x{} depth map",
                    depth.width(),
                    depth.height()
                )));
            }
            let d = depth.get(x, y);
            Ok(if d.is_finite() && d > 0.0 {
                BackProjected::Point(intrinsics.unproject(x as f64, y as f64, d))
            } else {
                BackProjected::Invalid { x, y, depth: d }
            })
        })
        .collect()
}
