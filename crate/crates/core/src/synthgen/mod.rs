//! Procedural periocular scenes with exact depth ground truth.
//!
//! Scene geometry lives in a face frame (x right, y down, z away from the
//! camera, millimetres). The camera pose maps face coordinates into the
//! camera frame; with the identity pose the two coincide.

mod dataset;
mod render;
mod stream;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};

pub use dataset::{
    generate_dataset, load_dataset, read_sample, write_sample, Dataset, LoadedSample, Manifest,
    ManifestEntry, SampleMeta, Split, FORMAT_VERSION,
};
pub use render::{
    geometry, ground_truth_segmentation, render, shade, SamplePair, SceneGeometry, Segmentation,
    Surface,
};
pub use stream::{
    load_stream, render_stream, save_stream, StreamFile, StreamPlan, SyntheticProvider,
    SyntheticStream,
};

pub const SCLERA_ALBEDO: f64 = 0.8;
pub const IRIS_ALBEDO: f64 = 0.35;
pub const PUPIL_ALBEDO: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eyeball {
    /// Sphere centre in the face frame.
    pub centre_mm: [f64; 3],
    pub radius_mm: f64,
    /// Radius of the iris boundary circle.
    pub iris_radius_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pupil {
    pub diameter_mm: f64,
    /// Unit gaze direction in the face frame; `(0, 0, -1)` looks into the
    /// camera.
    pub gaze: [f64; 3],
}

/// Upper and lower lid margins as quadratics over the eye's lateral
/// extent: `y = ey - upper * (1 - u^2)` and `y = ey + lower * (1 - u^2)`
/// with `u = (x - ex) / half_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eyelids {
    pub half_width_mm: f64,
    pub upper_mm: f64,
    pub lower_mm: f64,
}

impl Eyelids {
    pub fn aperture_mm(&self) -> f64 {
        self.upper_mm + self.lower_mm
    }
}

/// Smooth skin heightfield around the eye.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Skin {
    /// How far the lid skin sits in front of the eyeball apex.
    pub lid_offset_mm: f64,
    /// Quadratic recession away from the eye, mm per mm².
    pub curvature: f64,
    /// Brow ridge height toward the camera.
    pub brow_mm: f64,
    /// Cheekbone height toward the camera.
    pub cheek_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CameraPose {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    /// Added after rotation: `p_cam = R p_face + t`.
    pub translation_mm: [f64; 3],
}

impl CameraPose {
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.yaw_deg.to_radians())
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.pitch_deg.to_radians())
            * Rotation3::from_axis_angle(&Vector3::z_axis(), self.roll_deg.to_radians())
    }

    pub fn to_camera(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + Vector3::from(self.translation_mm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSetup {
    /// Focal length as a multiple of the image width, so intrinsics scale
    /// with resolution.
    pub focal_per_width: f64,
    pub pose: CameraPose,
    /// Point light position in the camera frame.
    pub light_mm: [f64; 3],
}

impl CameraSetup {
    pub fn intrinsics(&self, resolution: usize) -> CameraIntrinsics {
        CameraIntrinsics::centred(resolution, self.focal_per_width * resolution as f64)
    }
}

impl Default for CameraSetup {
    fn default() -> Self {
        Self {
            focal_per_width: 300.0 / 256.0,
            pose: CameraPose::default(),
            light_mm: [10.0, 0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Seeds the sensor noise.
    pub seed: u64,
    pub eyeball: Eyeball,
    pub pupil: Pupil,
    pub eyelids: Eyelids,
    pub skin: Skin,
    pub theta_light: f64,
    pub theta_noise: f64,
    pub camera: CameraSetup,
    /// Skin albedo standing in for skin tone under IR illumination.
    pub albedo: f64,
}

/// Unit gaze from horizontal and vertical angles; positive pitch looks up.
pub fn gaze_from_angles(yaw_deg: f64, pitch_deg: f64) -> [f64; 3] {
    let (y, p) = (yaw_deg.to_radians(), pitch_deg.to_radians());
    [y.sin() * p.cos(), -p.sin(), -y.cos() * p.cos()]
}

/// Skin-tone bands (albedo ranges) with their relative frequencies, darkest
/// first.
const SKIN_TONES: [(f64, f64, u32); 5] = [
    (0.20, 0.34, 15),
    (0.34, 0.48, 17),
    (0.48, 0.62, 30),
    (0.62, 0.76, 32),
    (0.76, 0.90, 26),
];

/// Draws a skin albedo following the tone distribution of the reference
/// avatar population.
pub fn sample_albedo<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let total: u32 = SKIN_TONES.iter().map(|t| t.2).sum();
    let mut pick = rng.random_range(0..total);
    for &(lo, hi, w) in &SKIN_TONES {
        if pick < w {
            return rng.random_range(lo..hi);
        }
        pick -= w;
    }
    unreachable!("weights cover the range")
}

impl SceneSpec {
    /// A centred, camera-facing eye with a 4 mm pupil.
    pub fn canonical() -> Self {
        Self {
            seed: 0,
            eyeball: Eyeball {
                centre_mm: [0.0, 0.0, 47.0],
                radius_mm: 12.0,
                iris_radius_mm: 6.0,
            },
            pupil: Pupil {
                diameter_mm: 4.0,
                gaze: [0.0, 0.0, -1.0],
            },
            eyelids: Eyelids {
                half_width_mm: 14.0,
                upper_mm: 5.0,
                lower_mm: 4.0,
            },
            skin: Skin {
                lid_offset_mm: 1.0,
                curvature: 0.006,
                brow_mm: 4.0,
                cheek_mm: 3.0,
            },
            theta_light: 3.0e5,
            theta_noise: 2.0,
            camera: CameraSetup::default(),
            albedo: 0.6,
        }
    }

    /// Random scene; every field is a deterministic function of `seed`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = &mut rng;
        let radius = r.random_range(11.5..12.5);
        let apex = r.random_range(30.0..40.0);
        let centre = [
            r.random_range(-2.0..2.0),
            r.random_range(-2.0..2.0),
            apex + radius,
        ];
        let gaze = gaze_from_angles(r.random_range(-15.0..15.0), r.random_range(-10.0..10.0));
        Self {
            seed,
            eyeball: Eyeball {
                centre_mm: centre,
                radius_mm: radius,
                iris_radius_mm: r.random_range(5.5..6.5),
            },
            pupil: Pupil {
                diameter_mm: r.random_range(2.0..8.0),
                gaze,
            },
            eyelids: Eyelids {
                half_width_mm: r.random_range(12.5..15.5),
                upper_mm: r.random_range(3.0..6.0),
                lower_mm: r.random_range(2.0..5.0),
            },
            skin: Skin {
                lid_offset_mm: r.random_range(0.5..2.0),
                curvature: r.random_range(0.003..0.009),
                brow_mm: r.random_range(2.0..6.0),
                cheek_mm: r.random_range(1.0..5.0),
            },
            theta_light: r.random_range(2.4e5..3.6e5),
            theta_noise: r.random_range(1.0..3.0),
            camera: CameraSetup::default(),
            albedo: sample_albedo(r),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let e = &self.eyeball;
        if !(e.radius_mm > 0.0) || !e.centre_mm.iter().all(|v| v.is_finite()) {
            return bad(format!("invalid eyeball {e:?}"));
        }
        let d = self.pupil.diameter_mm;
        if !(2.0..=8.0).contains(&d) {
            return bad(format!("pupil diameter {d} mm outside [2, 8]"));
        }
        if !(e.iris_radius_mm > d / 2.0 && e.iris_radius_mm < e.radius_mm) {
            return bad(format!(
                "iris radius {} must lie between the pupil radius and the eyeball radius",
                e.iris_radius_mm
            ));
        }
        let g = Vector3::from(self.pupil.gaze);
        if (g.norm() - 1.0).abs() > 1e-9 {
            return bad(format!("gaze {:?} is not a unit vector", self.pupil.gaze));
        }
        let l = &self.eyelids;
        if !(l.half_width_mm > 0.0 && l.upper_mm >= 0.0 && l.lower_mm >= 0.0) {
            return bad(format!("invalid eyelids {l:?}"));
        }
        let s = &self.skin;
        if ![s.lid_offset_mm, s.curvature, s.brow_mm, s.cheek_mm]
            .iter()
            .all(|v| v.is_finite())
        {
            return bad(format!("invalid skin {s:?}"));
        }
        if !(self.theta_light >= 0.0 && self.theta_light.is_finite()) {
            return bad(format!("theta_light {} must be >= 0", self.theta_light));
        }
        if !(self.theta_noise >= 0.0 && self.theta_noise.is_finite()) {
            return bad(format!("theta_noise {} must be >= 0", self.theta_noise));
        }
        if !(0.2..=0.9).contains(&self.albedo) {
            return bad(format!("albedo {} outside [0.2, 0.9]", self.albedo));
        }
        if !(self.camera.focal_per_width > 0.0) {
            return bad("focal length must be positive".into());
        }
        Ok(())
    }

    /// Centre of the pupil on the eyeball surface, camera frame.
    pub fn pupil_centre_camera(&self) -> [f64; 3] {
        let c = Vector3::from(self.eyeball.centre_mm);
        let g = Vector3::from(self.pupil.gaze);
        self.camera
            .pose
            .to_camera(c + g * self.eyeball.radius_mm)
            .into()
    }

    /// Gaze direction in the camera frame.
    pub fn gaze_camera(&self) -> [f64; 3] {
        (self.camera.pose.rotation() * Vector3::from(self.pupil.gaze)).into()
    }
}
