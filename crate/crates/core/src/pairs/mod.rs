//! Two-view geometry for building training pairs: posed views, co-visibility,
//! pair sampling, a toy renderer and single-image homography pairs.

pub mod camera;
pub mod covis;
pub mod homography;
pub mod render;
pub mod sample;

pub use camera::{CameraView, Intrinsics};
pub use covis::{covisibility_ratio, Covisibility, DEFAULT_TAU};
pub use homography::{homography_pair, homography_pair_with, HomographyParams};
pub use render::{render_toy_scene, Rect, Scene, Texture};
pub use sample::{
    load_scene_dir, read_manifest, resolve, sample_pair_indices, sample_pairs, save_scene_dir, write_manifest,
    PairManifestEntry,
};

#[cfg(test)]
mod tests {
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::render::{forward_pose, random_pose, Facing};
    use super::*;
    use crate::error::Error;
    use crate::pairs::camera::look_at;

    fn plane_scene() -> Scene {
        Scene {
            rects: vec![Scene::wall(2.0, 50.0, Texture::Noise { seed: 5, cell: 0.02 })],
            ..Default::default()
        }
    }

    fn shifted(scene: &Scene, dx: f64) -> (CameraView, CameraView) {
        let k = Intrinsics::centered(64, 48, 60.0);
        let a = render_toy_scene(scene, "a", 64, 48, k, forward_pose(Vector3::zeros())).unwrap();
        let b = render_toy_scene(scene, "b", 64, 48, k, forward_pose(Vector3::new(dx, 0.0, 0.0))).unwrap();
        (a, b)
    }

    #[test]
    fn identical_views_are_fully_covisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pose = random_pose(&mut rng).unwrap();
        let v = render_toy_scene(&Scene::random(3), "v", 32, 24, Intrinsics::centered(32, 24, 70.0), pose).unwrap();
        let c = covisibility_ratio(&v, &v, DEFAULT_TAU).unwrap();
        assert_eq!((c.v_ab, c.v_ba, c.covis), (1.0, 1.0, 1.0));
    }

    #[test]
    fn pure_shift_matches_analytic_overlap() {
        let scene = plane_scene();
        for dx in [0.1, 0.35, 0.8] {
            let (a, b) = shifted(&scene, dx);
            let shift_px = a.intrinsics.fx * dx / 2.0;
            let analytic = (64.0 - shift_px) / 64.0;
            let c = covisibility_ratio(&a, &b, DEFAULT_TAU).unwrap();
            assert!((c.covis - analytic).abs() <= 0.02, "{dx}: {} vs {analytic}", c.covis);
        }
    }

    #[test]
    fn covis_non_increasing_in_baseline() {
        let scene = plane_scene();
        let mut last = 1.0;
        for k in 0..14 {
            let (a, b) = shifted(&scene, 0.2 * k as f64);
            let c = covisibility_ratio(&a, &b, DEFAULT_TAU).unwrap().covis;
            assert!(c <= last, "{k}: {c} > {last}");
            last = c;
        }
        assert_eq!(last, 0.0);
    }

    #[test]
    fn symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = Scene::random(8);
        let k = Intrinsics::centered(24, 24, 70.0);
        let a = render_toy_scene(&scene, "a", 24, 24, k, random_pose(&mut rng).unwrap()).unwrap();
        let b = render_toy_scene(&scene, "b", 24, 24, k, random_pose(&mut rng).unwrap()).unwrap();
        let ab = covisibility_ratio(&a, &b, DEFAULT_TAU).unwrap();
        let ba = covisibility_ratio(&b, &a, DEFAULT_TAU).unwrap();
        assert_eq!(ab.covis, ba.covis);
        assert_eq!((ab.v_ab, ab.v_ba), (ba.v_ba, ba.v_ab));
    }

    #[test]
    fn opposite_cameras_on_one_sided_planes() {
        let mut front = Scene::wall(2.0, 10.0, Texture::Solid([1.0; 3]));
        front.facing = Facing::Negative;
        let mut back = Scene::wall(-1.0, 10.0, Texture::Solid([0.5; 3]));
        back.facing = Facing::Positive;
        let scene = Scene {
            rects: vec![front, back],
            ..Default::default()
        };
        let k = Intrinsics::centered(16, 16, 60.0);
        let a = render_toy_scene(&scene, "a", 16, 16, k, forward_pose(Vector3::zeros())).unwrap();
        let pose_b = look_at(
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
        )
        .unwrap();
        let b = render_toy_scene(&scene, "b", 16, 16, k, pose_b).unwrap();
        assert!(a.depth.data.iter().all(|&d| d == 2.0));
        assert!(b.depth.data.iter().all(|&d| d == 5.0));
        assert_eq!(covisibility_ratio(&a, &b, DEFAULT_TAU).unwrap().covis, 0.0);
    }

    #[test]
    fn occluded_pixels_fail_the_depth_test() {
        // a 1 m quad in front of a 2 m wall; the second camera looks past
        // the quad's edge so part of the wall it sees is hidden from the first
        let scene = Scene {
            rects: vec![
                Scene::wall(2.0, 20.0, Texture::Solid([1.0; 3])),
                Rect {
                    axis: 2,
                    coord: 1.0,
                    min: [-0.2, -1.0],
                    max: [0.2, 1.0],
                    texture: Texture::Solid([0.0; 3]),
                    facing: Facing::Both,
                },
            ],
            ..Default::default()
        };
        let k = Intrinsics::centered(32, 32, 60.0);
        let a = render_toy_scene(&scene, "a", 32, 32, k, forward_pose(Vector3::zeros())).unwrap();
        let b = render_toy_scene(&scene, "b", 32, 32, k, forward_pose(Vector3::new(0.3, 0.0, 0.0))).unwrap();
        let (visible, finite) = covis::visible_count(&b, &a, DEFAULT_TAU);
        assert_eq!(finite, 32 * 32);
        // wall pixels of b behind the quad as seen from a
        let mut occluded = 0;
        for y in 0..32 {
            for x in 0..32 {
                if b.depth_at(y, x) != 2.0 {
                    continue;
                }
                let p = b.to_world(&(b.intrinsics.ray(x as f64, y as f64) * 2.0));
                if p.x.abs() < 0.4 && p.y.abs() < 1.9 {
                    let q = a.to_camera(&p);
                    let hit_quad = (q.x / q.z).abs() * 1.0 < 0.2 - 1e-9 && (q.y / q.z).abs() < 1.0;
                    if hit_quad {
                        occluded += 1;
                    }
                }
            }
        }
        assert!(occluded > 0);
        assert!(visible <= finite - occluded, "{visible} {finite} {occluded}");
    }

    #[test]
    fn no_geometry_is_an_error() {
        let k = Intrinsics::centered(8, 8, 60.0);
        let empty = render_toy_scene(&Scene::default(), "e", 8, 8, k, forward_pose(Vector3::zeros())).unwrap();
        assert!(matches!(
            covisibility_ratio(&empty, &empty, DEFAULT_TAU),
            Err(Error::Empty(_))
        ));
    }

    fn views(n: usize, same: bool) -> Vec<CameraView> {
        let scene = plane_scene();
        let k = Intrinsics::centered(32, 24, 60.0);
        (0..n)
            .map(|i| {
                let x = if same { 0.0 } else { 0.15 * i as f64 };
                render_toy_scene(
                    &scene,
                    format!("v{i}"),
                    32,
                    24,
                    k,
                    forward_pose(Vector3::new(x, 0.0, 0.0)),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn sampling_contract() {
        let vs = views(3, false);
        let all = sample_pairs(&vs, 0.0, 1.0, 1000, 0).unwrap();
        assert!(all.len() <= 3);
        let vs = views(6, false);
        let binned = sample_pairs(&vs, 0.6, 0.9, 1000, 0).unwrap();
        assert!(!binned.is_empty());
        assert!(binned.iter().all(|e| (0.6..=0.9).contains(&e.covis)));
        let capped = sample_pairs(&vs, 0.0, 1.0, 4, 7).unwrap();
        assert_eq!(capped.len(), 4);
        assert_eq!(capped, sample_pairs(&vs, 0.0, 1.0, 4, 7).unwrap());
        assert!(sample_pairs(&vs, 0.5, 0.5, 4, 7).is_err());
    }

    #[test]
    fn binning_excludes_identical_views() {
        let vs = views(3, true);
        assert!(sample_pairs(&vs, 0.4, 0.5, 1000, 0).unwrap().is_empty());
        assert_eq!(sample_pairs(&vs, 0.9, 1.0, 1000, 0).unwrap().len(), 3);
    }

    #[test]
    fn scene_dir_and_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vs = views(3, false);
        sample::save_scene_dir(dir.path(), &vs).unwrap();
        let loaded = sample::load_scene_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in vs.iter().zip(&loaded) {
            assert_eq!(a.pose, b.pose);
            assert_eq!(
                a.depth.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.depth.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let entries = sample_pairs(&loaded, 0.0, 1.0, 10, 0).unwrap();
        let path = dir.path().join("pairs.jsonl");
        sample::write_manifest(&path, &entries).unwrap();
        assert_eq!(sample::read_manifest(&path).unwrap(), entries);
    }
}
