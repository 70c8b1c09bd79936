//! Independent oracles and random generators shared by the integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vloc::eval::ErrorRecord;
use vloc::features::{DenseFeatureLevel, FeaturePyramid, DESCRIPTOR_DIM, SCALES};
use vloc::map::{MapDatabase, MapKeypoint, MapLevel, MapNode};
use vloc::matching::{CostVolume, CostVolumeConfig};
use vloc::selection::Candidate;
use vloc::{Point3, Pose3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Greedy max-min selection recomputing every nearest distance from scratch.
/// Starts at `start`; ties go to the lowest index.
pub fn brute_force_greedy(c: &[Candidate], n: usize, start: usize, weighted: bool) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (i, ci) in c.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&j| ((ci.u - c[j].u).powi(2) + (ci.v - c[j].v).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            let score = if weighted { ci.weight * d } else { d };
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// First index holding the maximum weight.
pub fn first_max_weight(c: &[Candidate]) -> usize {
    let max = c.iter().map(|x| x.weight).fold(f64::NEG_INFINITY, f64::max);
    c.iter().position(|x| x.weight == max).unwrap()
}

/// Random candidates; every other instance sits on a coarse integer lattice
/// so that distance ties occur.
pub fn random_candidates(r: &mut ChaCha8Rng, len: usize, lattice: bool) -> Vec<Candidate> {
    (0..len)
        .map(|_| {
            let (u, v) = if lattice {
                (r.random_range(0..12) as f64, r.random_range(0..12) as f64)
            } else {
                (r.random_range(0.0..320.0), r.random_range(0.0..240.0))
            };
            Candidate::new(u, v, r.random_range(0.0..=1.0), Point3::origin())
        })
        .collect()
}

fn odd(r: &mut ChaCha8Rng, max_half: usize) -> usize {
    2 * r.random_range(0..=max_half) + 1
}

pub fn random_grid(r: &mut ChaCha8Rng) -> CostVolumeConfig {
    CostVolumeConfig::new(
        [odd(r, 3), odd(r, 3), odd(r, 3)],
        r.random_range(0.01..1.0),
        r.random_range(0.01..1.0),
        r.random_range(0.0005..0.02),
    )
    .unwrap()
}

/// Random cost volume with a random validity mask; at least one entry is valid.
pub fn random_volume(r: &mut ChaCha8Rng) -> CostVolume {
    let grid = random_grid(r);
    let n_keypoints = r.random_range(1..=16);
    let len = n_keypoints * grid.node_count();
    let raw: Vec<f64> = (0..len).map(|_| r.random_range(0.0..2.0)).collect();
    let mut valid: Vec<bool> = (0..len).map(|_| r.random_bool(0.8)).collect();
    valid[r.random_range(0..len)] = true;
    CostVolume {
        grid,
        n_keypoints,
        raw,
        valid,
    }
}

pub fn random_pose(r: &mut ChaCha8Rng) -> Pose3 {
    Pose3::from_xyz_yaw(
        r.random_range(-100.0..100.0),
        r.random_range(-100.0..100.0),
        r.random_range(-2.0..2.0),
        r.random_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

fn random_descriptor(r: &mut ChaCha8Rng) -> [f32; DESCRIPTOR_DIM] {
    std::array::from_fn(|_| r.random_range(-1.0f32..1.0))
}

pub fn random_database(r: &mut ChaCha8Rng) -> MapDatabase {
    let nodes = (0..r.random_range(1..=6))
        .map(|i| MapNode {
            node_id: i as u64 * 3 + r.random_range(0..3),
            capture_pose: random_pose(r),
            camera_id: r.random_range(0..3),
            levels: SCALES.map(|scale| MapLevel {
                scale,
                keypoints: (0..r.random_range(0..40))
                    .map(|_| MapKeypoint {
                        u: r.random_range(0.0f32..320.0),
                        v: r.random_range(0.0f32..240.0),
                        weight: r.random_range(0.0f32..=1.0),
                        world: Point3::new(r.random_range(-50.0..50.0), r.random_range(-50.0..50.0), r.random_range(0.0..6.0)),
                        descriptor: random_descriptor(r),
                    })
                    .collect(),
            }),
        })
        .collect();
    MapDatabase::new(nodes).unwrap()
}

pub fn random_pyramid(r: &mut ChaCha8Rng) -> FeaturePyramid {
    let (w, h) = (r.random_range(16..80u32), r.random_range(16..80u32));
    let levels = SCALES.map(|s| {
        let (lw, lh) = ((w / u32::from(s)) as usize, (h / u32::from(s)) as usize);
        let desc = (0..lw * lh * DESCRIPTOR_DIM).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let heat = (0..lw * lh).map(|_| r.random_range(0.0f32..=1.0)).collect();
        DenseFeatureLevel::from_parts(s, lw, lh, desc, heat).unwrap()
    });
    FeaturePyramid::new(w, h, levels).unwrap()
}

/// Error decomposition by explicit rotation matrices: the position error is
/// rotated into the ground-truth vehicle frame and the yaw error is read off
/// the relative rotation `R_gt^T R_est`.
pub fn decompose_oracle(est: &Pose3, gt: &Pose3) -> (f64, f64, f64, f64) {
    let rg = gt.rotation_matrix();
    let re = est.rotation_matrix();
    let d = est.position - gt.position;
    let local = rg.transpose() * d;
    let rel = rg.transpose() * re;
    let yaw = rel[(1, 0)].atan2(rel[(0, 0)]).to_degrees();
    ((d.x * d.x + d.y * d.y).sqrt(), local.x, local.y, yaw)
}

/// Random per-frame records with about a fifth of the frames unavailable.
pub fn random_records(r: &mut ChaCha8Rng, n: usize) -> Vec<ErrorRecord> {
    (0..n)
        .map(|i| {
            if r.random_bool(0.2) {
                return ErrorRecord::unavailable(i as f64);
            }
            // Values on a 0.05 lattice land exactly on the thresholds sometimes.
            let lon = r.random_range(-8..=8) as f64 * 0.05;
            let lat = r.random_range(-8..=8) as f64 * 0.05;
            ErrorRecord {
                timestamp: i as f64,
                available: true,
                horizontal: (lon * lon + lat * lat).sqrt(),
                longitudinal: lon,
                lateral: lat,
                yaw_deg: r.random_range(-10..=10) as f64 * 0.1,
            }
        })
        .collect()
}
