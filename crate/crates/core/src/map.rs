//! Localization map: per-image nodes of selected keypoints with descriptors,
//! attention weights and world coordinates.
//!
//! Map file layout, little-endian throughout:
//!
//! ```text
//! "ALMP" | version u16 | node count u32
//! per node: node_id u64 | position 3 x f64 | quaternion (w, x, y, z) 4 x f64
//!           | camera_id u16
//!           | 3 x { scale u8 | count u16
//!                   | count x { u f32 | v f32 | weight f32 | world 3 x f64 | descriptor 8 x f32 } }
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::features::{FeaturePyramid, DESCRIPTOR_DIM, SCALES};
use crate::geometry::{bilinear_heat, bilinear_sample, Point3, Pose3};
use crate::selection::{preselect, select, Candidate, SelectionConfig};

const MAP_MAGIC: &[u8; 4] = b"ALMP";
const MAP_VERSION: u16 = 1;

/// A selected keypoint in its level's pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapKeypoint {
    pub u: f32,
    pub v: f32,
    pub weight: f32,
    pub world: Point3,
    pub descriptor: [f32; DESCRIPTOR_DIM],
}

impl MapKeypoint {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.u.is_finite() && self.v.is_finite()) {
            return Err("non-finite pixel".into());
        }
        if !(0.0..=1.0).contains(&self.weight) {
            return Err(format!("weight {} outside [0,1]", self.weight));
        }
        if self.world.iter().any(|c| !c.is_finite()) {
            return Err("non-finite world point".into());
        }
        if self.descriptor.iter().any(|d| !d.is_finite()) {
            return Err("non-finite descriptor".into());
        }
        Ok(())
    }
}

/// Keypoints selected on one pyramid level of a map image.
#[derive(Clone, Debug, PartialEq)]
pub struct MapLevel {
    pub scale: u8,
    pub keypoints: Vec<MapKeypoint>,
}

/// One map image.
#[derive(Clone, Debug, PartialEq)]
pub struct MapNode {
    pub node_id: u64,
    /// Ground-truth vehicle pose at capture.
    pub capture_pose: Pose3,
    pub camera_id: u16,
    /// Levels ordered like [`SCALES`].
    pub levels: [MapLevel; 3],
}

impl MapNode {
    pub fn level(&self, scale: u8) -> Option<&MapLevel> {
        self.levels.iter().find(|l| l.scale == scale)
    }

    pub fn keypoint_count(&self) -> usize {
        self.levels.iter().map(|l| l.keypoints.len()).sum()
    }
}

/// A pixel with known world coordinates (image pixel units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthPoint {
    pub u: f64,
    pub v: f64,
    pub world: Point3,
}

/// Select keypoints for one map image.
///
/// Only pixels with known 3D coordinates are candidates. Per level, the
/// candidates are randomly preselected, then picked by the configured
/// strategy using heatmap weights; descriptors are read off the level by
/// bilinear interpolation.
pub fn build_node(
    pyramid: &FeaturePyramid,
    depth_points: &[DepthPoint],
    capture_pose: Pose3,
    camera_id: u16,
    node_id: u64,
    cfg: &SelectionConfig,
) -> Result<MapNode> {
    if depth_points.is_empty() {
        return Err(Error::MapBuild {
            scale: SCALES[0],
            reason: "no depth points".into(),
        });
    }
    let (iw, ih) = (f64::from(pyramid.image_width()), f64::from(pyramid.image_height()));
    if let Some(p) = depth_points
        .iter()
        .find(|p| !(p.u >= 0.0 && p.v >= 0.0 && p.u < iw && p.v < ih))
    {
        return Err(Error::MapBuild {
            scale: SCALES[0],
            reason: format!("depth point ({}, {}) outside the {iw}x{ih} image", p.u, p.v),
        });
    }

    let mut levels = Vec::with_capacity(3);
    for (li, level) in pyramid.levels().iter().enumerate() {
        let s = f64::from(level.scale());
        let candidates: Vec<Candidate> = depth_points
            .iter()
            .filter_map(|p| {
                let (u, v) = (p.u / s, p.v / s);
                let heat = bilinear_heat(level, u, v).ok()?;
                Some(Candidate::new(u, v, heat.clamp(0.0, 1.0), p.world))
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::MapBuild {
                scale: level.scale(),
                reason: "no candidates inside the level".into(),
            });
        }
        let (k, n) = cfg.clamped_counts(li, candidates.len());
        let level_seed = cfg
            .seed
            .wrapping_add(node_id.wrapping_mul(0x9E37_79B9_7F4A_7C15))
            .wrapping_add(u64::from(level.scale()));
        let pool = preselect(&candidates, k, level_seed)?;
        let picked = select(&pool, n, cfg.strategy)?;
        let keypoints = picked
            .into_iter()
            .map(|i| {
                let c = &pool[i];
                let d = bilinear_sample(level, c.u, c.v)?;
                Ok(MapKeypoint {
                    u: c.u as f32,
                    v: c.v as f32,
                    weight: c.weight as f32,
                    world: c.world,
                    descriptor: d.map(|x| x as f32),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        levels.push(MapLevel {
            scale: level.scale(),
            keypoints,
        });
    }
    Ok(MapNode {
        node_id,
        capture_pose,
        camera_id,
        levels: levels.try_into().expect("three levels"),
    })
}

/// Nodes plus a sweep index over capture `x` for nearest-position queries.
#[derive(Clone, Debug, Default)]
pub struct MapDatabase {
    nodes: Vec<MapNode>,
    by_x: Vec<usize>,
}

impl PartialEq for MapDatabase {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl MapDatabase {
    pub fn new(nodes: Vec<MapNode>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if !seen.insert(n.node_id) {
                return Err(Error::format(
                    format!("node[{i}].node_id"),
                    format!("duplicate id {}", n.node_id),
                ));
            }
        }
        let mut by_x: Vec<usize> = (0..nodes.len()).collect();
        by_x.sort_by(|&a, &b| {
            nodes[a].capture_pose.position.x.total_cmp(&nodes[b].capture_pose.position.x)
        });
        Ok(Self { nodes, by_x })
    }

    pub fn nodes(&self) -> &[MapNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node whose capture position is closest to `query`; ties go to the lowest id.
    pub fn nearest_node(&self, query: &Pose3) -> Result<&MapNode> {
        self.nearest_filtered(query, None)
    }

    /// As [`Self::nearest_node`], restricted to nodes captured by `camera_id`.
    pub fn nearest_node_for_camera(&self, query: &Pose3, camera_id: u16) -> Result<&MapNode> {
        self.nearest_filtered(query, Some(camera_id))
    }

    fn nearest_filtered(&self, query: &Pose3, camera: Option<u16>) -> Result<&MapNode> {
        if self.nodes.is_empty() {
            return Err(Error::Query("map database is empty".into()));
        }
        let q = query.position;
        let start = self
            .by_x
            .partition_point(|&i| self.nodes[i].capture_pose.position.x < q.x);
        let mut best: Option<(f64, u64, usize)> = None;
        let consider = |i: usize, best: &mut Option<(f64, u64, usize)>| {
            let n = &self.nodes[i];
            if camera.is_some_and(|c| c != n.camera_id) {
                return;
            }
            let d2 = (n.capture_pose.position - q).norm_squared();
            let better = match best {
                None => true,
                Some((bd, bid, _)) => d2 < *bd || (d2 == *bd && n.node_id < *bid),
            };
            if better {
                *best = Some((d2, n.node_id, i));
            }
        };
        // sweep outwards in x; stop once the x gap alone exceeds the best distance
        let mut hi = start;
        let mut lo = start;
        loop {
            let bound = best.map_or(f64::INFINITY, |b| b.0);
            let next_hi = (hi < self.by_x.len()).then(|| {
                let dx = self.nodes[self.by_x[hi]].capture_pose.position.x - q.x;
                dx * dx
            });
            let next_lo = (lo > 0).then(|| {
                let dx = q.x - self.nodes[self.by_x[lo - 1]].capture_pose.position.x;
                dx * dx
            });
            let mut progressed = false;
            if let Some(g) = next_hi {
                if g <= bound {
                    consider(self.by_x[hi], &mut best);
                    hi += 1;
                    progressed = true;
                }
            }
            if let Some(g) = next_lo {
                if g <= best.map_or(f64::INFINITY, |b| b.0) {
                    consider(self.by_x[lo - 1], &mut best);
                    lo -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        match best {
            Some((_, _, i)) => Ok(&self.nodes[i]),
            None => Err(Error::Query(format!(
                "no map node for camera {}",
                camera.unwrap_or_default()
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| self.write_to(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAP_MAGIC)?;
        w.write_u16::<LittleEndian>(MAP_VERSION)?;
        let count = u32::try_from(self.nodes.len())
            .map_err(|_| Error::Config("too many nodes for the map format".into()))?;
        w.write_u32::<LittleEndian>(count)?;
        for node in &self.nodes {
            w.write_u64::<LittleEndian>(node.node_id)?;
            for c in node.capture_pose.position.iter() {
                w.write_f64::<LittleEndian>(*c)?;
            }
            for c in node.capture_pose.quaternion_wxyz() {
                w.write_f64::<LittleEndian>(c)?;
            }
            w.write_u16::<LittleEndian>(node.camera_id)?;
            for level in &node.levels {
                w.write_u8(level.scale)?;
                let n = u16::try_from(level.keypoints.len()).map_err(|_| {
                    Error::Config(format!("node {} has too many keypoints", node.node_id))
                })?;
                w.write_u16::<LittleEndian>(n)?;
                for kp in &level.keypoints {
                    w.write_f32::<LittleEndian>(kp.u)?;
                    w.write_f32::<LittleEndian>(kp.v)?;
                    w.write_f32::<LittleEndian>(kp.weight)?;
                    for c in kp.world.iter() {
                        w.write_f64::<LittleEndian>(*c)?;
                    }
                    for d in kp.descriptor {
                        w.write_f32::<LittleEndian>(d)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Parse and validate a map. Errors name the offending record.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |field: String| move |e: std::io::Error| Error::format(field, format!("truncated ({e})"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc("magic".into()))?;
        if &magic != MAP_MAGIC {
            return Err(Error::format("magic", format!("expected \"ALMP\", found {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(trunc("version".into()))?;
        if version != MAP_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(trunc("node count".into()))?;
        let mut nodes = Vec::with_capacity(count.min(1 << 16) as usize);
        for ni in 0..count as usize {
            let f = |name: &str| format!("node[{ni}].{name}");
            let node_id = r.read_u64::<LittleEndian>().map_err(trunc(f("node_id")))?;
            let mut raw = [0.0f64; 7];
            r.read_f64_into::<LittleEndian>(&mut raw).map_err(trunc(f("capture_pose")))?;
            let capture_pose = Pose3::from_raw_parts([raw[0], raw[1], raw[2]], raw[3], raw[4], raw[5], raw[6])
                .map_err(|e| Error::format(f("capture_pose"), e.to_string()))?;
            let camera_id = r.read_u16::<LittleEndian>().map_err(trunc(f("camera_id")))?;
            let mut levels = Vec::with_capacity(3);
            for expected in SCALES {
                let lf = |name: &str| format!("node[{ni}].level[s={expected}].{name}");
                let scale = r.read_u8().map_err(trunc(lf("scale")))?;
                if scale != expected {
                    return Err(Error::format(lf("scale"), format!("expected {expected}, found {scale}")));
                }
                let n = r.read_u16::<LittleEndian>().map_err(trunc(lf("count")))? as usize;
                let mut keypoints = Vec::with_capacity(n);
                for ki in 0..n {
                    let kf = format!("node[{ni}].level[s={expected}].keypoint[{ki}]");
                    let mut head = [0.0f32; 3];
                    r.read_f32_into::<LittleEndian>(&mut head).map_err(trunc(kf.clone()))?;
                    let mut world = [0.0f64; 3];
                    r.read_f64_into::<LittleEndian>(&mut world).map_err(trunc(kf.clone()))?;
                    let mut descriptor = [0.0f32; DESCRIPTOR_DIM];
                    r.read_f32_into::<LittleEndian>(&mut descriptor).map_err(trunc(kf.clone()))?;
                    let kp = MapKeypoint {
                        u: head[0],
                        v: head[1],
                        weight: head[2],
                        world: Point3::from(world),
                        descriptor,
                    };
                    kp.validate().map_err(|reason| Error::format(kf, reason))?;
                    keypoints.push(kp);
                }
                levels.push(MapLevel { scale, keypoints });
            }
            nodes.push(MapNode {
                node_id,
                capture_pose,
                camera_id,
                levels: levels.try_into().expect("three levels"),
            });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("trailer", "unexpected bytes after last node"));
        }
        Self::new(nodes)
    }
}
