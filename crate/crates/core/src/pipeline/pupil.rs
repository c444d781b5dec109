//! Metric pupil diameter from a depth map and a pupil mask.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{back_project, BackProjected, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Mask};

pub const MIN_PUPIL_PIXELS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilMeasurement {
    pub diameter_mm: f64,
    pub fit_rms_mm: f64,
    pub n_boundary_points: usize,
}

/// Pixels on either side of the mask edge: set pixels touching an unset
/// 8-neighbour and unset pixels touching a set one. Their centres straddle
/// the true contour, so a circle through them is not biased inward.
pub fn boundary_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let v = mask.get(x, y);
            if mask.has_neighbour(x, y, !v) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Least-squares plane through `points`: (centroid, unit normal, in-plane
/// axes). Rejects point sets that do not span two dimensions.
pub fn fit_plane(
    points: &[Vector3<f64>],
) -> Result<(Vector3<f64>, Vector3<f64>, [Vector3<f64>; 2])> {
    if points.len() < 3 {
        return Err(Error::Input(format!(
            "plane fit needs 3 points, got {}",
            points.len()
        )));
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (small, mid, large) = (order[0], order[1], order[2]);
    let top = eig.eigenvalues[large];
    if !(top > 0.0) || eig.eigenvalues[mid] <= 1e-9 * top {
        return Err(Error::Input(
            "degenerate boundary: points are collinear".into(),
        ));
    }
    let col = |i: usize| eig.eigenvectors.column(i).into_owned();
    Ok((c, col(small), [col(large), col(mid)]))
}

/// Algebraic (Kåsa) circle fit: returns (centre, radius).
pub fn fit_circle(points: &[[f64; 2]]) -> Result<([f64; 2], f64)> {
    if points.len() < 3 {
        return Err(Error::Input(format!(
            "circle fit needs 3 points, got {}",
            points.len()
        )));
    }
    // x² + y² + D x + E y + F = 0 in the least-squares sense
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for &[x, y] in points {
        let row = Vector3::new(x, y, 1.0);
        ata += row * row.transpose();
        atb -= row * (x * x + y * y);
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::Input("degenerate boundary: circle fit is singular".into()))?
        .solve(&atb);
    let (cx, cy) = (-sol[0] / 2.0, -sol[1] / 2.0);
    let r2 = cx * cx + cy * cy - sol[2];
    if !(r2 > 0.0) {
        return Err(Error::Input("degenerate boundary: no real circle".into()));
    }
    Ok(([cx, cy], r2.sqrt()))
}

pub fn measure_pupil(
    depth: &DepthMap,
    mask: &Mask,
    intrinsics: &CameraIntrinsics,
) -> Result<PupilMeasurement> {
    if mask.width() != depth.width() || mask.height() != depth.height() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs depth {}x{}",
            mask.width(),
            mask.height(),
            depth.width(),
            depth.height()
        )));
    }
    if mask.count() < MIN_PUPIL_PIXELS {
        return Err(Error::Input(format!(
            "pupil mask has {} pixels, need at least {MIN_PUPIL_PIXELS}",
            mask.count()
        )));
    }
    let pixels = boundary_pixels(mask);
    let points: Vec<Vector3<f64>> = back_project(depth, intrinsics, &pixels)?
        .into_iter()
        .filter_map(|b| match b {
            BackProjected::Point(p) => Some(Vector3::from(p)),
            BackProjected::Invalid { .. } => None,
        })
        .collect();
    let (centroid, _, [u, v]) = fit_plane(&points)?;
    let flat: Vec<[f64; 2]> = points
        .iter()
        .map(|p| {
            let d = p - centroid;
            [d.dot(&u), d.dot(&v)]
        })
        .collect();
    let ([cx, cy], r) = fit_circle(&flat)?;
    let rms = (flat
        .iter()
        .map(|&[x, y]| ((x - cx).hypot(y - cy) - r).powi(2))
        .sum::<f64>()
        / flat.len() as f64)
        .sqrt();
    let diameter = 2.0 * r;
    if !(diameter > 0.0 && diameter < 12.0) {
        return Err(Error::Numerical(format!(
            "fitted pupil diameter {diameter:.3} mm outside (0, 12)"
        )));
    }
    Ok(PupilMeasurement {
        diameter_mm: diameter,
        fit_rms_mm: rms,
        n_boundary_points: points.len(),
    })
}
