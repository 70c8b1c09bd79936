//! On-disk sequence layout read by `build-map` and `localize`.
//!
//! ```text
//! DIR/cameras.json
//! DIR/mapping/trajectory.csv            ground-truth poses of the mapping trial
//! DIR/mapping/frames/000123_cam0.alfp   feature pyramid (or .png image)
//! DIR/mapping/depth/000123_cam0.csv     u,v,x,y,z pixels with known 3D points
//! DIR/query/trajectory.csv              ground truth of the query trial
//! DIR/query/motion.csv                  incremental motion per frame
//! DIR/query/priors.csv                  prior pose per frame
//! DIR/query/frames/000123_cam0.alfp
//! ```

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vloc::features::{export_pyramid, extract_pyramid, import_pyramid, FeaturePyramid, GradientExtractor, GrayRaster};
use vloc::geometry::{CameraModel, Point3, Pose3};
use vloc::map::DepthPoint;
use vloc::pipeline::{load_trajectory, read_motion, save_trajectory, write_motion, CameraView, FrameInput, StampedPose};
use vloc::synth::BenchmarkScene;

#[derive(serde::Serialize, serde::Deserialize)]
struct CameraRecord {
    camera_id: u16,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    /// Vehicle-from-camera translation.
    position: [f64; 3],
    /// Vehicle-from-camera rotation `[w, x, y, z]`.
    quaternion_wxyz: [f64; 4],
}

#[derive(serde::Serialize, serde::Deserialize)]
struct DepthRow {
    u: f64,
    v: f64,
    x: f64,
    y: f64,
    z: f64,
}

pub fn frame_name(index: usize, camera_id: u16) -> String {
    format!("{index:06}_cam{camera_id}")
}

pub fn write_cameras(dir: &Path, cams: &[(u16, CameraModel)]) -> Result<()> {
    let records: Vec<CameraRecord> = cams
        .iter()
        .map(|(id, c)| {
            let p = c.extrinsic.position;
            CameraRecord {
                camera_id: *id,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                position: [p.x, p.y, p.z],
                quaternion_wxyz: c.extrinsic.quaternion_wxyz(),
            }
        })
        .collect();
    serde_json::to_writer_pretty(File::create(dir.join("cameras.json"))?, &records)?;
    Ok(())
}

pub fn read_cameras(dir: &Path) -> Result<Vec<(u16, CameraModel)>> {
    let path = dir.join("cameras.json");
    let records: Vec<CameraRecord> =
        serde_json::from_reader(File::open(&path).with_context(|| format!("opening {}", path.display()))?)
            .with_context(|| format!("parsing {}", path.display()))?;
    records
        .into_iter()
        .map(|r| {
            let [qw, qx, qy, qz] = r.quaternion_wxyz;
            let extrinsic = Pose3::from_raw_parts(r.position, qw, qx, qy, qz)?;
            let cam = CameraModel::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height, extrinsic)?;
            Ok((r.camera_id, cam))
        })
        .collect()
}

fn write_depth(path: &Path, points: &[DepthPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(DepthRow {
            u: p.u,
            v: p.v,
            x: p.world.x,
            y: p.world.y,
            z: p.world.z,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn read_depth(path: &Path) -> Result<Vec<DepthPoint>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for row in r.deserialize::<DepthRow>() {
        let row = row.with_context(|| format!("reading {}", path.display()))?;
        out.push(DepthPoint {
            u: row.u,
            v: row.v,
            world: Point3::new(row.x, row.y, row.z),
        });
    }
    Ok(out)
}

/// Load a frame's pyramid from `.alfp`, or extract it from a `.png` image.
fn read_pyramid(frames_dir: &Path, name: &str) -> Result<FeaturePyramid> {
    let alfp = frames_dir.join(format!("{name}.alfp"));
    if alfp.exists() {
        return import_pyramid(&alfp).with_context(|| format!("reading {}", alfp.display()));
    }
    let png = frames_dir.join(format!("{name}.png"));
    if png.exists() {
        let raster = GrayRaster::open(&png).with_context(|| format!("reading {}", png.display()))?;
        return Ok(extract_pyramid(&raster, &GradientExtractor)?);
    }
    bail!("no {name}.alfp or {name}.png in {}", frames_dir.display())
}

/// Write a rendered benchmark scene with per-frame priors.
pub fn write_scene(dir: &Path, scene: &BenchmarkScene, priors: &[Pose3]) -> Result<()> {
    let cams: Vec<(u16, CameraModel)> = scene.world.cameras.iter().enumerate().map(|(i, c)| (i as u16, *c)).collect();
    for sub in ["mapping/frames", "mapping/depth", "query/frames"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    write_cameras(dir, &cams)?;
    fs::write(dir.join("world.txt"), scene.world.spec.to_text())?;

    let stamp = |poses: &[Pose3]| -> Vec<StampedPose> {
        poses
            .iter()
            .zip(&scene.world.timestamps)
            .map(|(p, t)| StampedPose {
                timestamp: *t,
                pose: *p,
            })
            .collect()
    };
    let map_poses: Vec<Pose3> = scene.mapping.iter().map(|m| m.ground_truth).collect();
    save_trajectory(&stamp(&map_poses), dir.join("mapping/trajectory.csv"))?;
    for (t, mf) in scene.mapping.iter().enumerate() {
        for (view, depth) in mf.frame.views.iter().zip(&mf.depth_points) {
            let name = frame_name(t, view.camera_id);
            export_pyramid(&view.pyramid, dir.join("mapping/frames").join(format!("{name}.alfp")))?;
            write_depth(&dir.join("mapping/depth").join(format!("{name}.csv")), depth)?;
        }
    }

    save_trajectory(&stamp(&scene.world.trajectory), dir.join("query/trajectory.csv"))?;
    save_trajectory(&stamp(priors), dir.join("query/priors.csv"))?;
    let motion: Vec<_> = scene.queries.iter().map(|f| (f.timestamp, f.incremental_motion)).collect();
    write_motion(&motion, File::create(dir.join("query/motion.csv"))?)?;
    for (t, f) in scene.queries.iter().enumerate() {
        for view in &f.views {
            let name = frame_name(t, view.camera_id);
            export_pyramid(&view.pyramid, dir.join("query/frames").join(format!("{name}.alfp")))?;
        }
    }
    Ok(())
}

pub struct Dataset {
    pub dir: PathBuf,
    pub cameras: Vec<(u16, CameraModel)>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            cameras: read_cameras(dir)?,
        })
    }

    pub fn mapping_trajectory(&self) -> Result<Vec<StampedPose>> {
        Ok(load_trajectory(self.dir.join("mapping/trajectory.csv"))?)
    }

    pub fn query_priors(&self) -> Result<Vec<StampedPose>> {
        Ok(load_trajectory(self.dir.join("query/priors.csv"))?)
    }

    fn views(&self, trial: &str, index: usize) -> Result<Vec<CameraView>> {
        let frames = self.dir.join(trial).join("frames");
        self.cameras
            .iter()
            .map(|(id, cam)| {
                Ok(CameraView {
                    camera_id: *id,
                    camera: *cam,
                    pyramid: read_pyramid(&frames, &frame_name(index, *id))?,
                })
            })
            .collect()
    }

    /// Views of mapping frame `index` with their depth points.
    pub fn mapping_frame(&self, index: usize) -> Result<(Vec<CameraView>, Vec<Vec<DepthPoint>>)> {
        let views = self.views("mapping", index)?;
        let depth = views
            .iter()
            .map(|v| read_depth(&self.dir.join("mapping/depth").join(format!("{}.csv", frame_name(index, v.camera_id)))))
            .collect::<Result<Vec<_>>>()?;
        Ok((views, depth))
    }

    /// Query frame `index` with its incremental motion.
    pub fn query_frame(&self, index: usize, motion: &[(f64, vloc::PoseSE2Offset)]) -> Result<FrameInput> {
        let Some(&(timestamp, incremental_motion)) = motion.get(index) else {
            bail!("motion.csv has no row for frame {index}");
        };
        Ok(FrameInput {
            timestamp,
            views: self.views("query", index)?,
            incremental_motion,
        })
    }

    pub fn query_motion(&self) -> Result<Vec<(f64, vloc::PoseSE2Offset)>> {
        let path = self.dir.join("query/motion.csv");
        Ok(read_motion(File::open(&path).with_context(|| format!("opening {}", path.display()))?)?)
    }
}
