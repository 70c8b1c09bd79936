//! Pose algebra, pinhole projection, and bilinear descriptor sampling.
//!
//! Conventions used throughout the crate:
//!
//! - World frame is right-handed with `z` up. Heading `psi` is measured
//!   counter-clockwise from world `+x`.
//! - Vehicle frame: `x` forward, `y` left, `z` up.
//! - Camera frame: `x` right, `y` down, `z` along the optical axis.
//! - A level coordinate `u_s` relates to an image pixel `u` by `u_s = u / s`,
//!   so descriptor cell `(i, j)` sits exactly at level coordinate `(i, j)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::features::{DenseFeatureLevel, DESCRIPTOR_DIM};

/// A 3D point in the world frame, meters.
pub type Point3 = nalgebra::Point3<f64>;

/// Minimum camera depth for a projection to count as valid.
pub const DEPTH_MIN: f64 = 0.1;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Full 6-DoF pose, world-from-body.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3 {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    /// Planar pose at height `z` with heading `yaw` and no roll or pitch.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self {
            position: Vector3::new(x, y, z),
            orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
        }
    }

    /// Build from raw quaternion coefficients without renormalizing, so that
    /// stored values round-trip bit-exactly. Fails if the norm is off by more
    /// than `1e-9`.
    pub fn from_raw_parts(position: [f64; 3], qw: f64, qx: f64, qy: f64, qz: f64) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-9 {
            return Err(Error::format(
                "orientation",
                format!("quaternion norm {norm} is not 1 within 1e-9"),
            ));
        }
        if position.iter().any(|c| !c.is_finite()) {
            return Err(Error::format("position", "non-finite component"));
        }
        Ok(Self {
            position: Vector3::from(position),
            orientation: UnitQuaternion::new_unchecked(q),
        })
    }

    /// Quaternion coefficients in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Heading angle of the body `x` axis projected onto the world horizontal plane.
    pub fn heading(&self) -> f64 {
        let r = self.orientation.to_rotation_matrix();
        let m = r.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.orientation.to_rotation_matrix().matrix()
    }

    /// `self * other`: express `other` (given in this pose's body frame) in the world.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            position: self.position + self.orientation * other.position,
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let inv = self.orientation.inverse();
        Pose3 {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.position + self.orientation * p.coords)
    }

    pub fn is_valid(&self) -> bool {
        let n = self.orientation.quaternion().norm();
        self.position.iter().all(|c| c.is_finite()) && (n - 1.0).abs() <= 1e-9
    }
}

/// Horizontal position and heading offset relative to an anchor pose.
///
/// `dx`/`dy` are meters in the anchor's horizontal (heading-aligned) frame,
/// `dpsi` is radians, wrapped to `(-pi, pi]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseSE2Offset {
    pub dx: f64,
    pub dy: f64,
    pub dpsi: f64,
}

impl PoseSE2Offset {
    pub fn new(dx: f64, dy: f64, dpsi: f64) -> Self {
        Self {
            dx,
            dy,
            dpsi: wrap_angle(dpsi),
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Group inverse: `apply_offset(apply_offset(p, o), o.inverse()) == p`.
    pub fn inverse(&self) -> Self {
        let (s, c) = self.dpsi.sin_cos();
        // R(-dpsi) * (dx, dy), negated
        let ix = -(c * self.dx + s * self.dy);
        let iy = -(-s * self.dx + c * self.dy);
        Self::new(ix, iy, -self.dpsi)
    }

    /// Offset that carries `from` onto `to` in the horizontal plane.
    pub fn between(from: &Pose3, to: &Pose3) -> Self {
        let psi = from.heading();
        let (s, c) = psi.sin_cos();
        let d = to.position - from.position;
        Self::new(c * d.x + s * d.y, -s * d.x + c * d.y, to.heading() - psi)
    }
}

/// Perturb `anchor` by a horizontal offset in its own heading frame and a
/// rotation of `dpsi` about the world vertical axis. Height, roll and pitch
/// are unchanged.
pub fn apply_offset(anchor: &Pose3, offset: &PoseSE2Offset) -> Pose3 {
    let psi = anchor.heading();
    let (s, c) = psi.sin_cos();
    let shift = Vector3::new(c * offset.dx - s * offset.dy, s * offset.dx + c * offset.dy, 0.0);
    Pose3 {
        position: anchor.position + shift,
        orientation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), offset.dpsi)
            * anchor.orientation,
    }
}

/// Pinhole camera with a vehicle-from-camera extrinsic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub extrinsic: Pose3,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        extrinsic: Pose3,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera looking along the vehicle `x` axis, mounted at `height` meters.
    pub fn forward_facing(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, mount_height: f64) -> Result<Self> {
        Self::new(fx, fy, cx, cy, width, height, Self::forward_extrinsic(mount_height, 0.0))
    }

    /// Vehicle-from-camera pose for a camera at `mount_height` whose optical
    /// axis is the vehicle `x` axis rotated by `yaw` about vehicle `z`.
    pub fn forward_extrinsic(mount_height: f64, yaw: f64) -> Pose3 {
        // columns: camera x (right), y (down), z (forward) in vehicle coordinates
        let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix() * base;
        Pose3 {
            position: Vector3::new(0.0, 0.0, mount_height),
            orientation: UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < f64::from(self.width)
            && self.cy >= 0.0
            && self.cy < f64::from(self.height);
        if !ok {
            return Err(Error::Config(format!(
                "camera intrinsics out of range: fx={} fy={} cx={} cy={} size={}x{}",
                self.fx, self.fy, self.cx, self.cy, self.width, self.height
            )));
        }
        if !self.extrinsic.is_valid() {
            return Err(Error::Config("camera extrinsic is not a valid pose".into()));
        }
        Ok(())
    }
}

/// A projected pixel with its camera depth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// World-to-image mapping for one camera at one vehicle pose. Precomputes the
/// camera-from-world transform so repeated projections stay cheap.
#[derive(Clone, Copy, Debug)]
pub struct Projector {
    rot: Matrix3<f64>,
    origin: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: f64,
    height: f64,
}

impl Projector {
    pub fn new(vehicle_pose: &Pose3, cam: &CameraModel) -> Self {
        let world_from_cam = vehicle_pose.compose(&cam.extrinsic);
        Self {
            rot: world_from_cam.rotation_matrix().transpose(),
            origin: world_from_cam.position,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: f64::from(cam.width),
            height: f64::from(cam.height),
        }
    }

    /// Camera-frame coordinates of a world point.
    pub fn to_camera(&self, p: &Point3) -> Vector3<f64> {
        self.rot * (p.coords - self.origin)
    }

    pub fn project(&self, p: &Point3) -> Option<Projection> {
        let pc = self.to_camera(p);
        if !(pc.z > DEPTH_MIN) {
            return None;
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        if u >= 0.0 && u < self.width && v >= 0.0 && v < self.height {
            Some(Projection { u, v, depth: pc.z })
        } else {
            None
        }
    }
}

/// Project a world point into the camera mounted on a vehicle at `vehicle_pose`.
/// Returns `None` behind the near plane or outside the image.
pub fn project_point(p: &Point3, vehicle_pose: &Pose3, cam: &CameraModel) -> Option<Projection> {
    Projector::new(vehicle_pose, cam).project(p)
}

/// Bilinearly interpolated descriptor at level coordinates `(u, v)`.
///
/// Valid for `0 <= u <= width - 1`, `0 <= v <= height - 1`; integer
/// coordinates return the stored cell exactly.
pub fn bilinear_sample(level: &DenseFeatureLevel, u: f64, v: f64) -> Result<[f64; DESCRIPTOR_DIM]> {
    let (w, h) = (level.width(), level.height());
    let in_range = w > 0
        && h > 0
        && u >= 0.0
        && v >= 0.0
        && u <= (w - 1) as f64
        && v <= (h - 1) as f64;
    if !in_range {
        return Err(Error::OutOfRange {
            u,
            v,
            width: w,
            height: h,
        });
    }
    Ok(sample_unchecked(level, u, v))
}

/// Bilinear sample without the range check. Callers must guarantee the
/// coordinates are inside the level.
#[inline]
pub(crate) fn sample_unchecked(level: &DenseFeatureLevel, u: f64, v: f64) -> [f64; DESCRIPTOR_DIM] {
    let (w, h) = (level.width(), level.height());
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = u - x0 as f64;
    let b = v - y0 as f64;
    let weights = [
        (1.0 - a) * (1.0 - b),
        a * (1.0 - b),
        (1.0 - a) * b,
        a * b,
    ];
    let cells = [
        level.descriptor(x0, y0),
        level.descriptor(x1, y0),
        level.descriptor(x0, y1),
        level.descriptor(x1, y1),
    ];
    let mut out = [0.0; DESCRIPTOR_DIM];
    for (wt, cell) in weights.iter().zip(cells.iter()) {
        if *wt == 0.0 {
            continue;
        }
        for (o, c) in out.iter_mut().zip(cell.iter()) {
            *o += wt * f64::from(*c);
        }
    }
    out
}

/// Bilinearly interpolated heatmap value; same domain as [`bilinear_sample`].
pub fn bilinear_heat(level: &DenseFeatureLevel, u: f64, v: f64) -> Result<f64> {
    let (w, h) = (level.width(), level.height());
    if !(w > 0 && h > 0 && u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return Err(Error::OutOfRange {
            u,
            v,
            width: w,
            height: h,
        });
    }
    let x0 = (u.floor() as usize).min(w - 1);
    let y0 = (v.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let a = u - x0 as f64;
    let b = v - y0 as f64;
    let hv = |x, y| f64::from(level.heat(x, y));
    Ok((1.0 - a) * (1.0 - b) * hv(x0, y0)
        + a * (1.0 - b) * hv(x1, y0)
        + (1.0 - a) * b * hv(x0, y1)
        + a * b * hv(x1, y1))
}
