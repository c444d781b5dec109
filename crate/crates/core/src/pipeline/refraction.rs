//! Apparent pupil size seen through a spherical cornea.
//!
//! Two-dimensional trace in the meridional plane. The corneal apex is at
//! the origin, `z` points into the eye, the centre of curvature sits at
//! `(0, R)` and the pupil lies in the plane `z = H`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorneaModel {
    pub radius_mm: f64,
    pub chamber_depth_mm: f64,
    pub refractive_index: f64,
    pub pupil_diameter_mm: f64,
}

impl Default for CorneaModel {
    fn default() -> Self {
        Self {
            radius_mm: 8.0,
            chamber_depth_mm: 2.7,
            refractive_index: 1.35,
            pupil_diameter_mm: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApparentSize {
    pub angle_deg: f64,
    pub actual_mm: f64,
    pub observed_mm: f64,
    pub error_pct: f64,
}

type V2 = [f64; 2];

fn dot(a: V2, b: V2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Snell refraction of unit direction `i` at a surface with unit normal
/// `n` facing the incoming ray, going from index `n1` to `n2`.
fn refract(i: V2, n: V2, n1: f64, n2: f64) -> Option<V2> {
    let eta = n1 / n2;
    let cos_i = -dot(n, i);
    let k = 1.0 - eta * eta * (1.0 - cos_i * cos_i);
    if k < 0.0 {
        return None;
    }
    let c = eta * cos_i - k.sqrt();
    Some([eta * i[0] + c * n[0], eta * i[1] + c * n[1]])
}

impl CorneaModel {
    fn validate(&self) -> Result<()> {
        let ok = self.radius_mm > 0.0
            && self.chamber_depth_mm > 0.0
            && self.chamber_depth_mm < self.radius_mm
            && self.refractive_index >= 1.0
            && self.pupil_diameter_mm > 0.0
            && self.pupil_diameter_mm / 2.0 < self.radius_mm;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cornea model {self:?}")))
        }
    }

    /// Surface point and outward unit normal at polar angle `phi` measured
    /// from the optical axis at the centre of curvature.
    fn surface(&self, phi: f64) -> (V2, V2) {
        let r = self.radius_mm;
        let normal = [phi.sin(), -phi.cos()];
        ([r * phi.sin(), r - r * phi.cos()], normal)
    }

    /// Where the ray that leaves the cornea at `phi` heading along `out`
    /// crosses the pupil plane inside the eye, or `None` on total internal
    /// reflection.
    fn internal_hit(&self, phi: f64, out: V2) -> Option<f64> {
        let (p, n) = self.surface(phi);
        // trace backwards: enter from outside travelling along -out
        let w = refract([-out[0], -out[1]], n, 1.0, self.refractive_index)?;
        let t = (self.chamber_depth_mm - p[1]) / w[1];
        Some(p[0] + t * w[0])
    }

    /// Exit angle on the cornea of the ray from pupil-plane point `x` that
    /// leaves along `out`.
    fn solve_exit(&self, x: f64, out: V2) -> Result<f64> {
        // the cap in front of the pupil plane
        let limit = (1.0 - self.chamber_depth_mm / self.radius_mm).acos();
        let g = |phi: f64| self.internal_hit(phi, out).map(|h| h - x);
        let (mut lo, mut hi) = (-limit, limit);
        let (Some(mut g_lo), Some(g_hi)) = (g(lo), g(hi)) else {
            return Err(Error::Numerical(
                "total internal reflection at the cornea".into(),
            ));
        };
        if g_lo.signum() == g_hi.signum() {
            return Err(Error::Numerical(format!(
                "no corneal exit point for pupil edge {x} mm toward {out:?}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let gm = g(mid).ok_or_else(|| {
                Error::Numerical("total internal reflection at the cornea".into())
            })?;
            if gm.signum() == g_lo.signum() {
                lo = mid;
                g_lo = gm;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Observed pupil diameter for a camera rotated `angle_deg` away from
    /// the optical axis within the meridional plane.
    ///
    /// Each pupil edge is traced to the cornea along the ray that emerges
    /// parallel to the viewing direction; the emerging ray, extended back
    /// undeviated, meets the pupil plane at the edge's apparent position.
    /// The observed size is the distance between the two apparent edges, so
    /// a refractive index of 1 reproduces the true diameter at any angle.
    pub fn apparent_size(&self, angle_deg: f64) -> Result<ApparentSize> {
        self.validate()?;
        if !(0.0..=60.0).contains(&angle_deg) {
            return Err(Error::Config(format!(
                "view angle {angle_deg} outside [0, 60] degrees"
            )));
        }
        let a = angle_deg.to_radians();
        let out = [a.sin(), -a.cos()];
        let half = self.pupil_diameter_mm / 2.0;
        let mut apparent = [0.0; 2];
        for (slot, edge) in apparent.iter_mut().zip([-half, half]) {
            let phi = self.solve_exit(edge, out)?;
            let (p, _) = self.surface(phi);
            let t = (self.chamber_depth_mm - p[1]) / out[1];
            *slot = p[0] + t * out[0];
        }
        let observed = (apparent[1] - apparent[0]).abs();
        Ok(ApparentSize {
            angle_deg,
            actual_mm: self.pupil_diameter_mm,
            observed_mm: observed,
            error_pct: (observed - self.pupil_diameter_mm) / self.pupil_diameter_mm * 100.0,
        })
    }
}

/// [`CorneaModel::apparent_size`] with explicit parameters.
pub fn refraction_apparent_size(
    radius_mm: f64,
    chamber_depth_mm: f64,
    refractive_index: f64,
    true_diameter_mm: f64,
    view_angle_deg: f64,
) -> Result<ApparentSize> {
    CorneaModel {
        radius_mm,
        chamber_depth_mm,
        refractive_index,
        pupil_diameter_mm: true_diameter_mm,
    }
    .apparent_size(view_angle_deg)
}
