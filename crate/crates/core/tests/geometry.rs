mod common;

use approx::assert_relative_eq;
use bimapper::bevgrid::{SemanticGrid, VOID};
use bimapper::geometry::{
    cam_to_ego, cam_to_pixel, ego_to_cam, ipm_warp, pixel_to_cam_on_plane, CamPoint,
    CameraExtrinsics, CameraIntrinsics, EgoPoint, IpmSpec,
};
use bimapper::synthworld::WorldConfig;
use nalgebra::Vector3;
use proptest::prelude::*;

fn desk_camera() -> CameraIntrinsics {
    WorldConfig::default().intrinsics
}

#[test]
fn ten_thousand_round_trips_within_tolerance() {
    let worst = common::geometry_roundtrip_worst(10_000, 3);
    assert!(worst <= 1.0, "worst error is {worst} x tolerance");
}

proptest! {
    #[test]
    fn yaw_extrinsics_round_trip(
        yaw in -7.0f64..7.0,
        pos in prop::array::uniform3(-3.0f64..3.0),
        p in prop::array::uniform3(-50.0f64..50.0),
    ) {
        let e = CameraExtrinsics::from_yaw(yaw, Vector3::from(pos));
        let q = EgoPoint::new(p[0], p[1], p[2]);
        let back = cam_to_ego(ego_to_cam(q, &e), &e);
        assert_relative_eq!(back.x, q.x, epsilon = 1e-11, max_relative = 1e-9);
        assert_relative_eq!(back.y, q.y, epsilon = 1e-11, max_relative = 1e-9);
        assert_relative_eq!(back.z, q.z, epsilon = 1e-11, max_relative = 1e-9);
    }

    #[test]
    fn yaw_rotation_is_proper(yaw in -7.0f64..7.0) {
        let e = CameraExtrinsics::from_yaw(yaw, Vector3::zeros());
        let r = e.rotation();
        prop_assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ground_points_project_below_horizon_and_back(
        x in -10.0f64..10.0,
        z in 0.5f64..80.0,
    ) {
        let k = desk_camera();
        let spec = IpmSpec::default();
        let p = CamPoint::new(x, spec.plane_height, z);
        let px = cam_to_pixel(p, &k).unwrap();
        prop_assert!(px.v > k.cy);
        let back = pixel_to_cam_on_plane(px, &k, &spec).unwrap();
        assert_relative_eq!(back.x, x, epsilon = 1e-11, max_relative = 1e-9);
        assert_relative_eq!(back.z, z, epsilon = 1e-11, max_relative = 1e-9);
    }

    #[test]
    fn cell_centres_map_to_their_own_cell(col in 0usize..40, row in 0usize..16) {
        let spec = WorldConfig::default().ipm;
        let c = spec.cell_center(col, row);
        prop_assert_eq!(spec.cell_of(c.x, c.z), Some((col, row)));
    }

    #[test]
    fn farther_ground_rows_appear_higher(z1 in 1.0f64..40.0, dz in 0.01f64..40.0) {
        let k = desk_camera();
        let near = cam_to_pixel(CamPoint::new(0.0, 1.0, z1), &k).unwrap();
        let far = cam_to_pixel(CamPoint::new(0.0, 1.0, z1 + dz), &k).unwrap();
        prop_assert!(far.v < near.v);
    }
}

#[test]
fn points_behind_the_camera_do_not_project() {
    let k = desk_camera();
    assert!(cam_to_pixel(CamPoint::new(0.0, 1.0, -2.0), &k).is_err());
    assert!(cam_to_pixel(CamPoint::new(0.0, 1.0, 0.0), &k).is_err());
}

#[test]
fn horizon_pixels_are_rejected() {
    let k = desk_camera();
    let spec = IpmSpec::default();
    let px = bimapper::geometry::PixelCoord::new(10.0, k.cy);
    assert!(pixel_to_cam_on_plane(px, &k, &spec).is_err());
}

#[test]
fn uniform_image_warps_to_uniform_plane() {
    let cfg = WorldConfig::default();
    let k = cfg.intrinsics;
    let img = SemanticGrid::filled(k.width, k.height, 2);
    let out = ipm_warp(&img, &k, &cfg.ipm).unwrap();
    let mut seen = 0;
    for row in 0..out.height() {
        for col in 0..out.width() {
            let c = cfg.ipm.cell_center(col, row);
            let in_frame = cam_to_pixel(c, &k)
                .ok()
                .and_then(|px| k.nearest_pixel(px))
                .is_some();
            let v = out.get(col, row);
            assert_eq!(v, if in_frame { 2 } else { VOID }, "cell ({col}, {row})");
            seen += usize::from(in_frame);
        }
    }
    assert!(seen > 0);
}

#[test]
fn wrong_image_size_is_rejected() {
    let cfg = WorldConfig::default();
    let img = SemanticGrid::filled(3, 3, 0);
    assert!(ipm_warp(&img, &cfg.intrinsics, &cfg.ipm).is_err());
}
