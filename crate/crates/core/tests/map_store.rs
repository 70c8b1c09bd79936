mod common;

use common::*;
use rand::Rng;
use vloc::features::FeaturePyramid;
use vloc::map::{build_node, DepthPoint, MapDatabase, MapNode};
use vloc::selection::{SelectionConfig, SelectionStrategy};
use vloc::{Point3, Pose3};

fn nodes_at(positions: &[(f64, f64)]) -> Vec<MapNode> {
    let mut r = rng(1);
    let template = random_database(&mut r).nodes()[0].clone();
    positions
        .iter()
        .enumerate()
        .map(|(i, (x, y))| MapNode {
            node_id: i as u64,
            capture_pose: Pose3::from_xyz_yaw(*x, *y, 0.0, 0.0),
            ..template.clone()
        })
        .collect()
}

#[test]
fn nearest_node_matches_linear_scan() {
    let mut r = rng(3);
    let positions: Vec<(f64, f64)> = (0..100).map(|_| (r.random_range(-50.0..50.0), r.random_range(-50.0..50.0))).collect();
    let db = MapDatabase::new(nodes_at(&positions)).unwrap();
    for _ in 0..2000 {
        let q = Pose3::from_xyz_yaw(r.random_range(-60.0..60.0), r.random_range(-60.0..60.0), 0.0, 0.0);
        let mut best = (f64::INFINITY, 0u64);
        for n in db.nodes() {
            let d = (n.capture_pose.position - q.position).norm_squared();
            if d < best.0 || (d == best.0 && n.node_id < best.1) {
                best = (d, n.node_id);
            }
        }
        assert_eq!(db.nearest_node(&q).unwrap().node_id, best.1);
    }
}

#[test]
fn large_database_file_round_trip() {
    let mut r = rng(4);
    let mut nodes = Vec::new();
    while nodes.len() < 1000 {
        for mut n in random_database(&mut r).nodes().iter().cloned() {
            n.node_id = nodes.len() as u64;
            nodes.push(n);
        }
    }
    let db = MapDatabase::new(nodes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.alm");
    db.save(&path).unwrap();
    let back = MapDatabase::load(&path).unwrap();
    assert_eq!(back, db);
    let again = dir.path().join("again.alm");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn empty_database_file_loads_and_queries_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.alm");
    MapDatabase::new(Vec::new()).unwrap().save(&path).unwrap();
    let db = MapDatabase::load(&path).unwrap();
    assert!(db.is_empty());
    assert!(db.nearest_node(&Pose3::identity()).is_err());
}

fn flat_pyramid(heat: impl Fn(usize, usize, u8) -> f32) -> FeaturePyramid {
    let mut p = FeaturePyramid::zeros(128, 96);
    for level in p.levels_mut() {
        let s = level.scale();
        for v in 0..level.height() {
            for u in 0..level.width() {
                level.set_heat(u, v, heat(u, v, s));
                level.descriptor_mut(u, v)[0] = 1.0;
            }
        }
    }
    p
}

#[test]
fn coincident_depth_points_select_by_tie_break() {
    let p = flat_pyramid(|_, _, _| 0.5);
    let depth = vec![
        DepthPoint {
            u: 64.0,
            v: 48.0,
            world: Point3::new(5.0, 0.0, 1.0),
        };
        20
    ];
    let cfg = SelectionConfig {
        per_level: [8, 8, 8],
        ..Default::default()
    };
    let node = build_node(&p, &depth, Pose3::identity(), 0, 0, &cfg).unwrap();
    for level in &node.levels {
        assert_eq!(level.keypoints.len(), 8);
        assert!(level.keypoints.iter().all(|k| k.u == 64.0 / f32::from(level.scale)));
    }
}

#[test]
fn weighted_selection_favours_the_attentive_region() {
    // Heat 1 in the left quarter of the image, 0.01 elsewhere.
    let p = flat_pyramid(|u, _, s| if (u * usize::from(s)) < 32 { 1.0 } else { 0.01 });
    let mut r = rng(8);
    let depth: Vec<DepthPoint> = (0..600)
        .map(|_| DepthPoint {
            u: r.random_range(0.0..127.0),
            v: r.random_range(0.0..95.0),
            world: Point3::new(r.random_range(5.0..20.0), 0.0, 1.0),
        })
        .collect();
    let cfg = SelectionConfig {
        per_level: [32, 32, 32],
        strategy: SelectionStrategy::Wfps,
        ..Default::default()
    };
    let node = build_node(&p, &depth, Pose3::identity(), 0, 7, &cfg).unwrap();
    let level = node.level(2).unwrap();
    let inside = level.keypoints.iter().filter(|k| k.u * 2.0 < 31.0).count();
    assert!(inside * 10 >= level.keypoints.len() * 8, "{inside}/{}", level.keypoints.len());

    let mut bytes = Vec::new();
    MapDatabase::new(vec![node.clone()]).unwrap().write_to(&mut bytes).unwrap();
    let back = MapDatabase::read_from(&mut std::io::Cursor::new(bytes)).unwrap();
    assert_eq!(back.nodes()[0], node);
}

#[test]
fn build_without_depth_points_errors() {
    let p = flat_pyramid(|_, _, _| 1.0);
    assert!(build_node(&p, &[], Pose3::identity(), 0, 0, &SelectionConfig::default()).is_err());
}
