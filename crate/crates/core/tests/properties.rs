use std::collections::HashSet;

use clusterfusion_core::fusion::{tile_index, voxel_downsample, voxel_key};
use clusterfusion_core::geom::{enu_from_geodetic, geodetic_from_enu, quat_exp, EnuPoint, GnssFix, Pose};
use clusterfusion_core::relpose::{chained_relative_pose, CoreTransforms};
use clusterfusion_core::wire::{decode_frame, encode_frame, Frame, Message};
use nalgebra::Vector3;
use proptest::prelude::*;

fn pose() -> impl Strategy<Value = Pose> {
    (
        prop::array::uniform3(-3.0..3.0f64),
        prop::array::uniform3(-500.0..500.0f64),
    )
        .prop_map(|(r, t)| Pose::new(quat_exp(&Vector3::from(r)), Vector3::from(t)))
}

proptest! {
    #[test]
    fn compose_with_inverse_is_identity(a in pose(), p in prop::array::uniform3(-100.0..100.0f64)) {
        let p = Vector3::from(p);
        let back = a.inverse().compose(&a).transform_point(&p);
        prop_assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn identity_cores_chain_to_plain_relative_pose(k1 in pose(), k2 in pose()) {
        let chain = chained_relative_pose(&k1, &k2, &Pose::identity(), &Pose::identity());
        prop_assert!(chain.rotation.angle_to(&(k1.rotation * k2.rotation.inverse())) < 1e-12);
        prop_assert!((chain.translation - (k1.translation - k2.translation)).norm() < 1e-9);
    }

    #[test]
    fn enu_round_trip(e in -5000.0..5000.0f64, n in -5000.0..5000.0f64, u in -100.0..500.0f64,
                      lat in -70.0..70.0f64, lon in -179.0..179.0f64) {
        let origin = GnssFix::new(0.0, lat, lon, 50.0);
        let fix = geodetic_from_enu(&EnuPoint::new(e, n, u), &origin).unwrap();
        let back = enu_from_geodetic(&fix, &origin).unwrap().to_vector();
        prop_assert!((back - Vector3::new(e, n, u)).norm() < 1e-6);
    }

    #[test]
    fn downsample_keeps_one_point_per_voxel(
        pts in prop::collection::vec(prop::array::uniform3(-20.0..20.0f64), 1..400),
        v in 0.1..3.0f64,
    ) {
        let pts: Vec<Vector3<f64>> = pts.into_iter().map(Vector3::from).collect();
        let keys: HashSet<_> = pts.iter().filter_map(|p| voxel_key(p, v)).collect();
        let out = voxel_downsample(&pts, v).unwrap();
        prop_assert_eq!(out.len(), keys.len());
        let got: HashSet<_> = out.iter().filter_map(|p| voxel_key(p, v)).collect();
        prop_assert_eq!(got, keys);
    }

    #[test]
    fn tiles_partition_the_plane(x in -1e4..1e4f64, y in -1e4..1e4f64, d in 1.0..200.0f64) {
        let (ix, iy) = tile_index(&Vector3::new(x, y, 0.0), d).unwrap();
        prop_assert!(ix as f64 * d <= x && x < (ix + 1) as f64 * d);
        prop_assert!(iy as f64 * d <= y && y < (iy + 1) as f64 * d);
    }

    #[test]
    fn broadcast_frames_round_trip(version in any::<u64>(), seq in any::<u64>(), cores in prop::collection::vec(pose(), 0..6)) {
        let mut c = CoreTransforms::new(0);
        for (i, p) in cores.into_iter().enumerate() {
            c.set(i as u32 + 1, p);
        }
        let frame = Frame { seq, sender: 0, message: Message::RelPoseBroadcast { version, cores: c } };
        let bytes = encode_frame(&frame).unwrap();
        let (back, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, frame);
    }
}
