//! Ray casting and shading.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{SceneSpec, IRIS_ALBEDO, PUPIL_ALBEDO, SCLERA_ALBEDO};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::image::{DepthMap, GrayImage, Mask, DEPTH_MAX_MM, DEPTH_MIN_MM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    Skin,
    Sclera,
    Iris,
    Pupil,
}

impl Surface {
    pub fn is_eyeball(self) -> bool {
        self != Surface::Skin
    }
}

/// Everything about a rendered view that does not depend on the light
/// intensity or the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGeometry {
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthMap,
    /// Noiseless intensity per unit light: albedo * cos / distance².
    pub radiance: Vec<f64>,
    pub labels: Vec<Surface>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub image: GrayImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub spec: SceneSpec,
}

/// Ground-truth eye features in image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub pupil: Mask,
    pub eyeball: Mask,
    /// Upper lid margin, pixel `(x, y)` samples ordered left to right.
    pub top_curve: Vec<[f64; 2]>,
    pub bottom_curve: Vec<[f64; 2]>,
    /// Unit gaze in the camera frame.
    pub gaze: [f64; 3],
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    centre: Vector3<f64>,
    gaze: Vector3<f64>,
    cos_pupil: f64,
    cos_iris: f64,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let r = spec.eyeball.radius_mm;
        let half_angle = |radius: f64| (radius / r).asin().cos();
        Self {
            spec,
            centre: Vector3::from(spec.eyeball.centre_mm),
            gaze: Vector3::from(spec.pupil.gaze),
            cos_pupil: half_angle(spec.pupil.diameter_mm / 2.0),
            cos_iris: half_angle(spec.eyeball.iris_radius_mm),
        }
    }

    /// Skin height and its x/y partial derivatives.
    fn skin(&self, x: f64, y: f64) -> (f64, f64, f64) {
        let s = &self.spec.skin;
        let (ex, ey) = (self.centre.x, self.centre.y);
        let apex = self.centre.z - self.spec.eyeball.radius_mm;
        let (dx, dy) = (x - ex, y - ey);
        let mut h = apex - s.lid_offset_mm + s.curvature * (dx * dx + dy * dy);
        let mut hx = 2.0 * s.curvature * dx;
        let mut hy = 2.0 * s.curvature * dy;
        // (amplitude, centre offset, sigma) of the bumps toward the camera
        for (amp, ox, oy, sigma) in [(s.brow_mm, 0.0, -14.0, 7.0), (s.cheek_mm, 3.0, 17.0, 9.0)] {
            let (bx, by) = (dx - ox, dy - oy);
            let g = amp * (-(bx * bx + by * by) / (2.0 * sigma * sigma)).exp();
            h -= g;
            hx += g * bx / (sigma * sigma);
            hy += g * by / (sigma * sigma);
        }
        (h, hx, hy)
    }

    /// Lid margins at face-frame `x`: (top y, bottom y), or `None` outside
    /// the lateral extent.
    fn lids(&self, x: f64) -> Option<(f64, f64)> {
        let l = &self.spec.eyelids;
        let u = (x - self.centre.x) / l.half_width_mm;
        if u.abs() >= 1.0 {
            return None;
        }
        let k = 1.0 - u * u;
        Some((
            self.centre.y - l.upper_mm * k,
            self.centre.y + l.lower_mm * k,
        ))
    }

    fn in_aperture(&self, x: f64, y: f64) -> bool {
        self.lids(x)
            .is_some_and(|(top, bottom)| y > top && y < bottom)
    }

    /// Nearest ray parameter hitting the eyeball sphere.
    fn hit_sphere(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let oc = o - self.centre;
        let r = self.spec.eyeball.radius_mm;
        let a = d.dot(d);
        let b = oc.dot(d);
        let c = oc.dot(&oc) - r * r;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let s = (-b - disc.sqrt()) / a;
        (s > 0.0).then_some(s)
    }

    /// First crossing of the ray with the skin heightfield.
    fn hit_skin(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let f = |s: f64| {
            let p = o + d * s;
            p.z - self.skin(p.x, p.y).0
        };
        // march in 0.25 mm depth steps, then bisect the bracket
        let step = 0.25 / d.z.abs().max(1e-6);
        let mut lo = 0.0;
        if f(lo) >= 0.0 {
            return None;
        }
        let limit = 4.0 * DEPTH_MAX_MM / d.z.abs().max(1e-6);
        let mut hi = step;
        loop {
            let f_hi = f(hi);
            if f_hi >= 0.0 {
                break;
            }
            lo = hi;
            hi += step;
            if hi > limit {
                return None;
            }
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    fn eye_label(&self, p: &Vector3<f64>) -> Surface {
        let cos = (p - self.centre).normalize().dot(&self.gaze);
        if cos > self.cos_pupil {
            Surface::Pupil
        } else if cos > self.cos_iris {
            Surface::Iris
        } else {
            Surface::Sclera
        }
    }

    /// Surface point on the eyelid margin at lateral position `x`.
    fn lid_point(&self, x: f64, y: f64) -> Vector3<f64> {
        let r = self.spec.eyeball.radius_mm;
        let (dx, dy) = (x - self.centre.x, y - self.centre.y);
        let rho2 = dx * dx + dy * dy;
        let z = if rho2 < r * r {
            self.centre.z - (r * r - rho2).sqrt()
        } else {
            self.skin(x, y).0
        };
        Vector3::new(x, y, z)
    }
}

/// Ray casts every pixel. Fails if any visible surface lies outside the
/// supported depth range.
pub fn geometry(spec: &SceneSpec, resolution: usize) -> Result<SceneGeometry> {
    spec.validate()?;
    if resolution < 2 {
        return Err(Error::Config(format!("resolution {resolution} too small")));
    }
    let scene = Scene::new(spec);
    let k = spec.camera.intrinsics(resolution);
    let pose = &spec.camera.pose;
    let rot = pose.rotation();
    let inv = rot.inverse();
    let t = Vector3::from(pose.translation_mm);
    let origin = inv * (-t);
    let light = Vector3::from(spec.camera.light_mm);

    let n = resolution * resolution;
    let mut depth = Vec::with_capacity(n);
    let mut radiance = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for py in 0..resolution {
        for px in 0..resolution {
            let dir_cam = Vector3::new((px as f64 - k.cx) / k.fx, (py as f64 - k.cy) / k.fy, 1.0);
            let dir = inv * dir_cam;
            let eye = scene.hit_sphere(&origin, &dir).filter(|&s| {
                let p = origin + dir * s;
                scene.in_aperture(p.x, p.y)
            });
            let skin = scene.hit_skin(&origin, &dir).filter(|&s| {
                let p = origin + dir * s;
                !scene.in_aperture(p.x, p.y)
            });
            let (s, label, normal) = match (eye, skin) {
                (Some(se), sk) if sk.is_none_or(|ss| se <= ss) => {
                    let p = origin + dir * se;
                    (se, scene.eye_label(&p), (p - scene.centre).normalize())
                }
                (_, Some(ss)) => {
                    let p = origin + dir * ss;
                    let (_, hx, hy) = scene.skin(p.x, p.y);
                    (ss, Surface::Skin, Vector3::new(hx, hy, -1.0).normalize())
                }
                (_, None) => match scene.hit_skin(&origin, &dir) {
                    // ray slips through the lid opening beside the eyeball
                    Some(ss) => {
                        let p = origin + dir * ss;
                        let (_, hx, hy) = scene.skin(p.x, p.y);
                        (ss, Surface::Skin, Vector3::new(hx, hy, -1.0).normalize())
                    }
                    None => {
                        return Err(Error::Input(format!("pixel ({px}, {py}) sees no surface")))
                    }
                },
            };
            let p_face = origin + dir * s;
            let p = rot * p_face + t;
            if !(DEPTH_MIN_MM..=DEPTH_MAX_MM).contains(&p.z) {
                return Err(Error::Input(format!(
                    "scene depth {:.2} mm at pixel ({px}, {py}) outside [{DEPTH_MIN_MM}, {DEPTH_MAX_MM}] mm",
                    p.z
                )));
            }
            let n_cam = rot * normal;
            let to_light = light - p;
            let dist2 = to_light.norm_squared();
            let cos = n_cam.dot(&to_light.normalize()).max(0.0);
            let albedo = match label {
                Surface::Skin => spec.albedo,
                Surface::Sclera => SCLERA_ALBEDO,
                Surface::Iris => IRIS_ALBEDO,
                Surface::Pupil => PUPIL_ALBEDO,
            };
            depth.push(p.z);
            radiance.push(albedo * cos / dist2);
            labels.push(label);
        }
    }
    Ok(SceneGeometry {
        intrinsics: k,
        depth: DepthMap::new(resolution, resolution, depth)?,
        radiance,
        labels,
    })
}

/// Light, quantize to 8 bits, then add seeded Gaussian noise.
pub fn shade(geometry: &SceneGeometry, theta_light: f64, theta_noise: f64, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = geometry
        .radiance
        .iter()
        .map(|&r| {
            let clean = (r * theta_light).round().clamp(0.0, 255.0);
            let z: f64 = StandardNormal.sample(&mut rng);
            (clean + theta_noise * z).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    let (w, h) = (geometry.depth.width(), geometry.depth.height());
    GrayImage::new(w, h, pixels).expect("radiance matches depth dims")
}

pub fn render(spec: &SceneSpec, resolution: usize) -> Result<SamplePair> {
    let geo = geometry(spec, resolution)?;
    let image = shade(&geo, spec.theta_light, spec.theta_noise, spec.seed);
    Ok(SamplePair {
        image,
        depth: geo.depth,
        intrinsics: geo.intrinsics,
        spec: *spec,
    })
}

impl SceneGeometry {
    pub fn of(spec: &SceneSpec, resolution: usize) -> Result<Self> {
        geometry(spec, resolution)
    }

    pub fn mask(&self, pred: impl Fn(Surface) -> bool) -> Mask {
        let w = self.depth.width();
        Mask::from_fn(w, self.depth.height(), |x, y| pred(self.labels[y * w + x]))
    }

    pub fn segmentation(&self, spec: &SceneSpec) -> Segmentation {
        let scene = Scene::new(spec);
        let pose = &spec.camera.pose;
        let mut top = Vec::new();
        let mut bottom = Vec::new();
        let w = spec.eyelids.half_width_mm;
        let samples = 21;
        for i in 0..samples {
            let u = -0.9 + 1.8 * i as f64 / (samples - 1) as f64;
            let x = scene.centre.x + u * w;
            let (yt, yb) = scene.lids(x).expect("|u| < 1");
            for (y, out) in [(yt, &mut top), (yb, &mut bottom)] {
                let p = pose.to_camera(scene.lid_point(x, y));
                let [px, py] = self.intrinsics.project([p.x, p.y, p.z]);
                out.push([px, py]);
            }
        }
        Segmentation {
            pupil: self.mask(|s| s == Surface::Pupil),
            eyeball: self.mask(Surface::is_eyeball),
            top_curve: top,
            bottom_curve: bottom,
            gaze: spec.gaze_camera(),
        }
    }
}

pub fn ground_truth_segmentation(spec: &SceneSpec, resolution: usize) -> Result<Segmentation> {
    Ok(geometry(spec, resolution)?.segmentation(spec))
}
