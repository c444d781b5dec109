use proptest::prelude::*;

use super::*;
use crate::camera::{back_project, BackProjected};
use crate::synthgen::{gaze_from_angles, render_stream, SceneSpec, StreamPlan, SyntheticProvider};

/// Provider driven by a per-frame openness (px) and horizontal gaze yaw.
struct Scripted {
    openness: Vec<f64>,
    yaw_deg: Vec<f64>,
}

impl Scripted {
    fn new(openness: Vec<f64>, yaw_deg: Vec<f64>) -> Self {
        assert_eq!(openness.len(), yaw_deg.len());
        Self { openness, yaw_deg }
    }

    fn frames(&self) -> FrameStream {
        FrameStream::new(vec![GrayImage::filled(8, 8, 0); self.openness.len()], 1).unwrap()
    }
}

impl SegmentationProvider for Scripted {
    fn eyelid_outline(
        &self,
        index: usize,
        _: &GrayImage,
    ) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
        let o = self.openness[index];
        let top = (0..9)
            .map(|i| {
                let x = 10.0 + 2.0 * i as f64;
                [x, 30.0 - o / 2.0 + 0.05 * (x - 18.0).powi(2)]
            })
            .collect();
        let bottom = (0..9)
            .map(|i| {
                let x = 10.0 + 2.0 * i as f64;
                [x, 30.0 + o / 2.0 - 0.03 * (x - 18.0).powi(2)]
            })
            .collect();
        Ok((top, bottom))
    }

    fn gaze(&self, index: usize, _: &GrayImage) -> Result<[f64; 3]> {
        Ok(gaze_from_angles(self.yaw_deg[index], 0.0))
    }

    fn pupil_mask(&self, _: usize, _: &GrayImage) -> Result<Mask> {
        Ok(Mask::empty(8, 8))
    }
}

fn tau(t: f64) -> GateConfig {
    GateConfig {
        openness_tolerance: t,
        ..GateConfig::default()
    }
}

#[test]
fn midpoint_of_exact_parabola() {
    let curve: Vec<[f64; 2]> = (0..7)
        .map(|i| {
            let x = i as f64;
            [x, 2.0 + 0.5 * (x - 3.0).powi(2)]
        })
        .collect();
    assert!((curve_midpoint_y(&curve).unwrap() - 2.0).abs() < 1e-12);
    assert!(curve_midpoint_y(&curve[..4]).is_err());
}

#[test]
fn threshold_examples() {
    // six straight frames at 1 fps fill the calibration window
    let p = Scripted::new(vec![5.0, 7.0, 9.0, 6.0, 5.0, 8.0], vec![0.0; 6]);
    let t = determine_threshold(&p.frames(), &p, &tau(1.0)).unwrap();
    assert!((t - 9.0).abs() < 1e-9, "{t}");
    let t = determine_threshold(&p.frames(), &p, &tau(0.95)).unwrap();
    assert!((t - 8.55).abs() < 1e-9, "{t}");
}

#[test]
fn threshold_ignores_averted_frames() {
    let p = Scripted::new(
        vec![5.0, 12.0, 7.0, 6.0, 5.0, 4.0],
        vec![0.0, 20.0, 0.0, 0.0, 3.0, 0.0],
    );
    let t = determine_threshold(&p.frames(), &p, &tau(1.0)).unwrap();
    assert!((t - 7.0).abs() < 1e-9);
}

#[test]
fn threshold_rejects_all_averted_and_short_streams() {
    let p = Scripted::new(vec![8.0; 6], vec![15.0; 6]);
    assert!(matches!(
        determine_threshold(&p.frames(), &p, &tau(1.0)),
        Err(Error::Input(_))
    ));
    let p = Scripted::new(vec![8.0; 5], vec![0.0; 5]);
    assert!(determine_threshold(&p.frames(), &p, &tau(1.0)).is_err());
}

#[test]
fn collect_stops_at_capacity_in_order() {
    let p = Scripted::new(vec![9.0; 20], vec![0.0; 20]);
    let c = gate_and_collect(&p.frames(), &p, 8.0, &GateConfig::default()).unwrap();
    assert_eq!(c.indices, (0..8).collect::<Vec<_>>());
    assert_eq!(c.frames.len(), 8);
    assert!(c.complete);
}

#[test]
fn blinks_are_excluded_and_short_streams_flagged() {
    let openness = vec![9.0, 9.0, 3.0, 0.0, 3.0, 9.0, 9.0, 9.0, 2.0, 9.0];
    let p = Scripted::new(openness, vec![0.0; 10]);
    let c = gate_and_collect(&p.frames(), &p, 8.5, &GateConfig::default()).unwrap();
    assert_eq!(c.indices, vec![0, 1, 5, 6, 7, 9]);
    assert!(!c.complete);
}

#[test]
fn gate_config_validation() {
    let mut c = GateConfig::default();
    assert!(c.validate().is_ok());
    c.capacity = 2;
    assert!(c.validate().is_err());
    c = tau(0.0);
    assert!(c.validate().is_err());
    c = tau(1.5);
    assert!(c.validate().is_err());
}

#[test]
fn gaze_angle_of_axis_and_non_unit() {
    assert_eq!(gaze_angle_deg(CAMERA_AXIS).unwrap(), 0.0);
    let g = gaze_from_angles(7.0, 0.0);
    assert!((gaze_angle_deg(g).unwrap() - 7.0).abs() < 1e-9);
    assert!(gaze_angle_deg([0.0, 0.0, -2.0]).is_err());
}

#[test]
fn rendered_gaze_sweep_passes_exactly_the_central_frames() {
    let plan = StreamPlan {
        fps: 10,
        frames: 80,
        resolution: 64,
        gaze_sweep_deg: 10.0,
        sweep_period_s: 4.0,
        blink_period_s: 0.0,
        blink_frames: 0,
    };
    let s = render_stream(&SceneSpec::canonical(), &plan).unwrap();
    let provider = SyntheticProvider::new(s.segmentations.clone());
    let config = GateConfig {
        capacity: 1000,
        ..GateConfig::default()
    };
    let threshold = determine_threshold(&s.stream, &provider, &config).unwrap();
    let c = gate_and_collect(&s.stream, &provider, threshold, &config).unwrap();
    let expected: Vec<usize> = (0..plan.frames)
        .filter(|&i| {
            let t = i as f64 / plan.fps as f64;
            let yaw = 10.0 * (std::f64::consts::TAU * t / 4.0).sin();
            yaw.abs() <= 5.0 + 1e-9
        })
        .collect();
    assert_eq!(c.indices, expected);
    for (&i, f) in c.indices.iter().zip(&c.frames) {
        assert!(frame_passes(&provider, i, f, threshold, &config).unwrap());
    }
}

fn constant(v: f64) -> DepthMap {
    DepthMap::filled(3, 2, v)
}

#[test]
fn aggregation_examples() {
    let mut maps: Vec<DepthMap> = (0..5).map(|_| constant(10.0)).collect();
    maps.push(constant(30.0));
    let a = aggregate_depths(&maps, OutlierMode::Mad, 3.5).unwrap();
    assert!(a.map.values().iter().all(|&v| v == 10.0));
    assert_eq!(a.n_excluded, 6);
    assert_eq!(a.n_maps, 6);

    let same = vec![DepthMap::new(2, 1, vec![3.0, 4.0]).unwrap(); 4];
    let a = aggregate_depths(&same, OutlierMode::Mad, 3.5).unwrap();
    assert_eq!(a.map, same[0]);
    assert_eq!(a.n_excluded, 0);

    assert!(aggregate_depths(&maps[..2], OutlierMode::Mad, 3.5).is_err());
    let mixed = vec![constant(1.0), constant(1.0), DepthMap::filled(2, 2, 1.0)];
    assert!(aggregate_depths(&mixed, OutlierMode::Mad, 3.5).is_err());
}

#[test]
fn modified_z_score_oracle() {
    let values = [10.0, 11.0, 12.0, 10.5, 11.5, 40.0, 9.0];
    // median 11, deviations [1,0,1,0.5,0.5,29,2] -> MAD 1
    let keep = survivors(&values, OutlierMode::Mad, 3.5);
    let oracle: Vec<bool> = values
        .iter()
        .map(|v: &f64| (0.6745 * (v - 11.0) / 1.0).abs() <= 3.5)
        .collect();
    assert_eq!(keep, oracle);
    assert_eq!(keep.iter().filter(|&&k| !k).count(), 1);
}

#[test]
fn two_sigma_mode() {
    let values = [10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 40.0];
    let keep = survivors(&values, OutlierMode::TwoSigma, 3.5);
    assert_eq!(keep.iter().filter(|&&k| !k).count(), 1);
    assert!(!keep[9]);
    let maps: Vec<DepthMap> = values.iter().map(|&v| constant(v)).collect();
    let a = aggregate_depths(&maps, OutlierMode::TwoSigma, 3.5).unwrap();
    assert!(a.map.values().iter().all(|&v| v == 10.0));
}

proptest! {
    #[test]
    fn aggregation_is_permutation_invariant(
        values in prop::collection::vec(prop::collection::vec(20.0f64..90.0, 4), 3..9),
        rot in 0usize..8,
    ) {
        let maps: Vec<DepthMap> = values.iter().map(|v| DepthMap::new(2, 2, v.clone()).unwrap()).collect();
        let mut shuffled = maps.clone();
        shuffled.rotate_left(rot % maps.len());
        shuffled.reverse();
        for mode in [OutlierMode::Mad, OutlierMode::TwoSigma] {
            let a = aggregate_depths(&maps, mode, 3.5).unwrap();
            let b = aggregate_depths(&shuffled, mode, 3.5).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn aggregate_lies_within_survivor_range(
        values in prop::collection::vec(prop::collection::vec(20.0f64..90.0, 3), 3..9),
    ) {
        let maps: Vec<DepthMap> = values.iter().map(|v| DepthMap::new(3, 1, v.clone()).unwrap()).collect();
        let a = aggregate_depths(&maps, OutlierMode::Mad, 3.5).unwrap();
        for px in 0..3 {
            let column: Vec<f64> = values.iter().map(|v| v[px]).collect();
            let keep = survivors(&column, OutlierMode::Mad, 3.5);
            let kept: Vec<f64> = column.iter().zip(&keep).filter(|(_, &k)| k).map(|(&v, _)| v).collect();
            let lo = kept.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = a.map.values()[px];
            prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
        }
    }

    #[test]
    fn back_projection_reprojects_to_pixel(
        x in 0usize..256, y in 0usize..256, d in 20.0f64..90.0,
        fx in 50.0f64..500.0, fy in 50.0f64..500.0, s in 0.5f64..2.0,
    ) {
        let k = CameraIntrinsics { fx, fy, cx: 127.5, cy: 120.0, s };
        let depth = DepthMap::filled(256, 256, d);
        let BackProjected::Point(p) = back_project(&depth, &k, &[(x, y)]).unwrap()[0] else {
            panic!("positive depth reported invalid");
        };
        let [u, v] = k.project(p);
        prop_assert!((u - x as f64).abs() < 1e-9 && (v - y as f64).abs() < 1e-9);
    }
}

const RES: usize = 256;
const FOCAL: f64 = 300.0;

/// Depth and mask of a 4 mm disc on a plane through (0, 0, z0) whose normal
/// is tilted `tilt_deg` about the camera y axis.
fn disc_scene(z0: f64, tilt_deg: f64, diameter: f64) -> (DepthMap, Mask, CameraIntrinsics) {
    let k = CameraIntrinsics::centred(RES, FOCAL);
    let t = tilt_deg.to_radians();
    let n = Vector3::new(t.sin(), 0.0, -t.cos());
    let c = Vector3::new(0.0, 0.0, z0);
    let mut depth = Vec::with_capacity(RES * RES);
    let mut bits = Vec::with_capacity(RES * RES);
    for y in 0..RES {
        for x in 0..RES {
            let ray = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
            let z = n.dot(&c) / n.dot(&ray);
            let p = ray * z;
            depth.push(z);
            bits.push((p - c).norm() <= diameter / 2.0);
        }
    }
    (
        DepthMap::new(RES, RES, depth).unwrap(),
        Mask::new(RES, RES, bits).unwrap(),
        k,
    )
}

#[test]
fn flat_disc_oracle() {
    for tilt in [0.0, 25.0] {
        let (depth, mask, k) = disc_scene(40.0, tilt, 4.0);
        let m = measure_pupil(&depth, &mask, &k).unwrap();
        let footprint = k.pixel_footprint(40.0);
        assert!(
            (m.diameter_mm - 4.0).abs() <= footprint,
            "tilt {tilt}: {m:?}"
        );
        assert!(m.fit_rms_mm < footprint);
    }
}

#[test]
fn dilation_grows_by_about_two_footprints() {
    let (depth, mask, k) = disc_scene(40.0, 0.0, 4.0);
    let footprint = k.pixel_footprint(40.0);
    let a = measure_pupil(&depth, &mask, &k).unwrap().diameter_mm;
    let b = measure_pupil(&depth, &mask.dilate(), &k)
        .unwrap()
        .diameter_mm;
    let growth = (b - a) / footprint;
    // a 3x3 dilation reaches sqrt(2) px along diagonals, so slightly over 2
    assert!((1.5..=3.0).contains(&growth), "grew by {growth} footprints");
}

#[test]
fn measurement_invariant_to_quarter_turns() {
    let (depth, mask, k) = disc_scene(35.0, 20.0, 4.0);
    let a = measure_pupil(&depth, &mask, &k).unwrap();
    let b = measure_pupil(&depth.rotate90(), &mask.rotate90(), &k).unwrap();
    assert!((a.diameter_mm - b.diameter_mm).abs() < 1e-9);
    assert_eq!(a.n_boundary_points, b.n_boundary_points);
}

#[test]
fn degenerate_inputs_rejected() {
    let line: Vec<Vector3<f64>> = (0..10)
        .map(|i| Vector3::new(i as f64, 2.0 * i as f64, 40.0))
        .collect();
    assert!(fit_plane(&line).is_err());
    assert!(fit_circle(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).is_err());

    let k = CameraIntrinsics::centred(64, 75.0);
    let depth = DepthMap::filled(64, 64, 40.0);
    let tiny = Mask::from_fn(64, 64, |x, y| {
        (30..34).contains(&x) && (30..34).contains(&y)
    });
    assert_eq!(tiny.count(), 16);
    assert!(matches!(
        measure_pupil(&depth, &tiny, &k),
        Err(Error::Input(_))
    ));
    assert!(measure_pupil(&DepthMap::filled(32, 32, 40.0), &tiny, &k).is_err());
}

#[test]
fn circle_fit_exact_on_circle() {
    let pts: Vec<[f64; 2]> = (0..12)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 12.0;
            [1.0 + 2.5 * a.cos(), -3.0 + 2.5 * a.sin()]
        })
        .collect();
    let ([cx, cy], r) = fit_circle(&pts).unwrap();
    assert!((cx - 1.0).abs() < 1e-12 && (cy + 3.0).abs() < 1e-12 && (r - 2.5).abs() < 1e-12);
}

#[test]
fn boundary_straddles_the_edge() {
    let mask = Mask::from_fn(6, 6, |x, y| (2..4).contains(&x) && (2..4).contains(&y));
    let b = boundary_pixels(&mask);
    // the 2x2 block plus its 12-pixel ring
    assert_eq!(b.len(), 16);
    assert!(b
        .iter()
        .all(|&(x, y)| (1..5).contains(&x) && (1..5).contains(&y)));
}

#[test]
fn refraction_without_index_change_is_exact() {
    for angle in (0..=60).step_by(10) {
        let r = refraction_apparent_size(8.0, 2.7, 1.0, 4.0, angle as f64).unwrap();
        assert!((r.observed_mm - 4.0).abs() < 1e-9, "{r:?}");
        assert!(r.error_pct.abs() < 1e-7);
    }
}

#[test]
fn refraction_error_is_monotone_in_angle() {
    let errs: Vec<f64> = (0..=60)
        .step_by(10)
        .map(|a| {
            CorneaModel::default()
                .apparent_size(a as f64)
                .unwrap()
                .error_pct
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] >= w[0]), "{errs:?}");
}

#[test]
fn refraction_rejects_bad_inputs() {
    let m = CorneaModel::default();
    assert!(m.apparent_size(-1.0).is_err());
    assert!(m.apparent_size(61.0).is_err());
    assert!(refraction_apparent_size(8.0, 9.0, 1.35, 4.0, 0.0).is_err());
    assert!(refraction_apparent_size(8.0, 2.7, 0.9, 4.0, 0.0).is_err());
}

#[test]
fn region_mae_per_mask() {
    let pred = DepthMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let gt = DepthMap::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let regions = vec![
        ("top".to_string(), Mask::from_fn(2, 2, |_, y| y == 0)),
        ("none".to_string(), Mask::empty(2, 2)),
        ("all".to_string(), Mask::from_fn(2, 2, |_, _| true)),
    ];
    let r = region_mae(&pred, &gt, &regions).unwrap();
    assert_eq!(r["top"], 0.5);
    assert_eq!(r["all"], 1.5);
    assert!(!r.contains_key("none"));
}
