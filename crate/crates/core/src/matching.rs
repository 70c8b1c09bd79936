//! Weighted feature matching over a pose cost volume.
//!
//! Around a prior pose, an evenly spaced `n_x x n_y x n_psi` grid of candidate
//! offsets is evaluated. Each map keypoint is projected into the online
//! descriptor map under every candidate, and its cost is the Euclidean
//! distance between the stored descriptor and the bilinearly sampled one.
//! Costs pass through a small per-node network, are averaged across keypoints
//! (plainly or weighted by attention), and turned into per-axis probability
//! distributions whose means give a sub-grid offset estimate.
//!
//! The default probability head applies one softmax over the whole grid and
//! sums out the other two axes. Averaging costs over the other axes before a
//! per-axis softmax is available as [`ProbabilityHead::AxisAverage`]; with
//! many keypoints the averaged profile is dominated by misaligned nodes and
//! the estimate collapses towards the grid centre.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{DenseFeatureLevel, DESCRIPTOR_DIM};
use crate::geometry::{apply_offset, sample_unchecked, CameraModel, Pose3, PoseSE2Offset, Projector};
use crate::map::{MapKeypoint, MapNode};

/// Candidate offset grid centred on the prior (the centre node is zero offset).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CostVolumeConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub n_psi: usize,
    /// Meters.
    pub step_x: f64,
    pub step_y: f64,
    /// Radians.
    pub step_psi: f64,
}

impl CostVolumeConfig {
    pub fn new(n: [usize; 3], step_x: f64, step_y: f64, step_psi: f64) -> Result<Self> {
        let cfg = Self {
            n_x: n[0],
            n_y: n[1],
            n_psi: n[2],
            step_x,
            step_y,
            step_psi,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default grid for a pyramid scale: 11 nodes per axis at
    /// 0.5 m / 0.4 deg (s = 8), 0.25 m / 0.2 deg (s = 4), 0.05 m / 0.05 deg (s = 2).
    pub fn default_for_scale(scale: u8) -> Self {
        let (step, deg) = match scale {
            8 => (0.5, 0.4),
            4 => (0.25, 0.2),
            _ => (0.05, 0.05),
        };
        Self {
            n_x: 11,
            n_y: 11,
            n_psi: 11,
            step_x: step,
            step_y: step,
            step_psi: f64::to_radians(deg),
        }
    }

    /// Counts must be odd so that a node sits on the prior. Singleton axes
    /// (count 1) are accepted and pin that component to zero.
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_x", self.n_x), ("n_y", self.n_y), ("n_psi", self.n_psi)] {
            if n == 0 || n % 2 == 0 {
                return Err(Error::Config(format!("{name} = {n} must be odd and positive")));
            }
        }
        for (name, s) in [("step_x", self.step_x), ("step_y", self.step_y), ("step_psi", self.step_psi)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} = {s} must be positive")));
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.n_x * self.n_y * self.n_psi
    }

    fn axis(n: usize, step: f64) -> Vec<f64> {
        let half = (n / 2) as f64;
        (0..n).map(|i| (i as f64 - half) * step).collect()
    }

    pub fn x_values(&self) -> Vec<f64> {
        Self::axis(self.n_x, self.step_x)
    }

    pub fn y_values(&self) -> Vec<f64> {
        Self::axis(self.n_y, self.step_y)
    }

    pub fn psi_values(&self) -> Vec<f64> {
        Self::axis(self.n_psi, self.step_psi)
    }

    /// Flat node index, `psi` fastest.
    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_y + j) * self.n_psi + k
    }

    pub fn offset(&self, i: usize, j: usize, k: usize) -> PoseSE2Offset {
        let half = |n: usize| (n / 2) as f64;
        PoseSE2Offset::new(
            (i as f64 - half(self.n_x)) * self.step_x,
            (j as f64 - half(self.n_y)) * self.step_y,
            (k as f64 - half(self.n_psi)) * self.step_psi,
        )
    }

    /// All candidate offsets in flat node order.
    pub fn offsets(&self) -> Vec<PoseSE2Offset> {
        let mut out = Vec::with_capacity(self.node_count());
        for i in 0..self.n_x {
            for j in 0..self.n_y {
                for k in 0..self.n_psi {
                    out.push(self.offset(i, j, k));
                }
            }
        }
        out
    }
}

/// Per-keypoint matching costs over the offset grid.
///
/// Layout is keypoint-major: `raw[p * nodes + node_index(i, j, k)]`. Entries
/// whose projection left the image are masked invalid and hold `0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    pub grid: CostVolumeConfig,
    pub n_keypoints: usize,
    pub raw: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CostVolume {
    pub fn node_count(&self) -> usize {
        self.grid.node_count()
    }

    #[inline]
    pub fn index(&self, p: usize, i: usize, j: usize, k: usize) -> usize {
        p * self.node_count() + self.grid.node_index(i, j, k)
    }

    pub fn keypoint_slice(&self, p: usize) -> (&[f64], &[bool]) {
        let n = self.node_count();
        (&self.raw[p * n..(p + 1) * n], &self.valid[p * n..(p + 1) * n])
    }
}

#[inline]
fn descriptor_distance(a: &[f32; DESCRIPTOR_DIM], b: &[f64; DESCRIPTOR_DIM]) -> f64 {
    let mut acc = 0.0;
    for k in 0..DESCRIPTOR_DIM {
        let d = f64::from(a[k]) - b[k];
        acc += d * d;
    }
    acc.sqrt()
}

/// Evaluate every keypoint against every candidate pose around `prior`.
pub fn build_cost_volume(
    keypoints: &[MapKeypoint],
    level: &DenseFeatureLevel,
    prior: &Pose3,
    cam: &CameraModel,
    grid: &CostVolumeConfig,
) -> Result<CostVolume> {
    grid.validate()?;
    if keypoints.is_empty() {
        return Err(Error::Matching(format!(
            "no keypoints at level s={}",
            level.scale()
        )));
    }
    let projectors: Vec<Projector> = grid
        .offsets()
        .iter()
        .map(|o| Projector::new(&apply_offset(prior, o), cam))
        .collect();
    let nodes = projectors.len();
    let s = f64::from(level.scale());
    let (max_u, max_v) = ((level.width() - 1) as f64, (level.height() - 1) as f64);

    let mut raw = vec![0.0; keypoints.len() * nodes];
    let mut valid = vec![false; keypoints.len() * nodes];
    raw.par_chunks_mut(nodes)
        .zip(valid.par_chunks_mut(nodes))
        .zip(keypoints.par_iter())
        .for_each(|((costs, mask), kp)| {
            for (n, proj) in projectors.iter().enumerate() {
                let Some(px) = proj.project(&kp.world) else {
                    continue;
                };
                let (u, v) = (px.u / s, px.v / s);
                if u > max_u || v > max_v {
                    continue;
                }
                let sample = sample_unchecked(level, u, v);
                costs[n] = descriptor_distance(&kp.descriptor, &sample);
                mask[n] = true;
            }
        });
    Ok(CostVolume {
        grid: *grid,
        n_keypoints: keypoints.len(),
        raw,
        valid,
    })
}

/// [`build_cost_volume`] for the node's keypoints at the level's scale.
pub fn build_node_cost_volume(
    node: &MapNode,
    level: &DenseFeatureLevel,
    prior: &Pose3,
    cam: &CameraModel,
    grid: &CostVolumeConfig,
) -> Result<CostVolume> {
    let keypoints = node
        .level(level.scale())
        .map(|l| l.keypoints.as_slice())
        .unwrap_or(&[]);
    build_cost_volume(keypoints, level, prior, cam, grid)
}

pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
fn leaky(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

/// Per-node network applied to each scalar cost: affine 1->8, leaky ReLU,
/// affine 8->8, leaky ReLU, affine 8->1.
///
/// Regularizer weight file layout, little-endian:
/// `"ALRW" | version u16 | 3 x { in u16 | out u16 | weights f32 [out][in] | biases f32 [out] }`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerWeights {
    pub w1: [f32; 8],
    pub b1: [f32; 8],
    pub w2: [[f32; 8]; 8],
    pub b2: [f32; 8],
    pub w3: [f32; 8],
    pub b3: f32,
}

const REG_MAGIC: &[u8; 4] = b"ALRW";
const REG_VERSION: u16 = 1;

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self::identity()
    }
}

impl RegularizerWeights {
    /// Routes the cost through channel 0 unchanged; exact for non-negative
    /// costs, which is all the cost volume produces.
    pub fn identity() -> Self {
        let mut w = Self {
            w1: [0.0; 8],
            b1: [0.0; 8],
            w2: [[0.0; 8]; 8],
            b2: [0.0; 8],
            w3: [0.0; 8],
            b3: 0.0,
        };
        w.w1[0] = 1.0;
        w.w2[0][0] = 1.0;
        w.w3[0] = 1.0;
        w
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(self.w2.iter().flatten()).chain(&self.b2).chain(&self.w3).all(|x| x.is_finite())
            && self.b3.is_finite()
    }

    pub fn eval(&self, cost: f64) -> f64 {
        let mut h1 = [0.0f64; 8];
        for (h, (w, b)) in h1.iter_mut().zip(self.w1.iter().zip(&self.b1)) {
            *h = leaky(f64::from(*w) * cost + f64::from(*b));
        }
        let mut out = f64::from(self.b3);
        for (row, (b, w3)) in self.w2.iter().zip(self.b2.iter().zip(&self.w3)) {
            let mut acc = f64::from(*b);
            for (w, h) in row.iter().zip(&h1) {
                acc += f64::from(*w) * h;
            }
            out += f64::from(*w3) * leaky(acc);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), |w| self.write_to(w))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(REG_MAGIC)?;
        w.write_u16::<LittleEndian>(REG_VERSION)?;
        let layer = |w: &mut W, fan_in: u16, fan_out: u16, weights: &[f32], biases: &[f32]| -> Result<()> {
            w.write_u16::<LittleEndian>(fan_in)?;
            w.write_u16::<LittleEndian>(fan_out)?;
            for x in weights.iter().chain(biases) {
                w.write_f32::<LittleEndian>(*x)?;
            }
            Ok(())
        };
        layer(w, 1, 8, &self.w1, &self.b1)?;
        let w2: Vec<f32> = self.w2.iter().flatten().copied().collect();
        layer(w, 8, 8, &w2, &self.b2)?;
        layer(w, 8, 1, &self.w3, &[self.b3])?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let trunc = |field: &'static str| move |e: std::io::Error| Error::format(field, format!("truncated ({e})"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(trunc("magic"))?;
        if &magic != REG_MAGIC {
            return Err(Error::format("magic", format!("expected \"ALRW\", found {magic:?}")));
        }
        let version = r.read_u16::<LittleEndian>().map_err(trunc("version"))?;
        if version != REG_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let mut layers: Vec<(Vec<f32>, Vec<f32>)> = Vec::with_capacity(3);
        for (li, (ei, eo)) in [(1u16, 8u16), (8, 8), (8, 1)].into_iter().enumerate() {
            let field = ["layer[0]", "layer[1]", "layer[2]"][li];
            let fan_in = r.read_u16::<LittleEndian>().map_err(trunc(field))?;
            let fan_out = r.read_u16::<LittleEndian>().map_err(trunc(field))?;
            if (fan_in, fan_out) != (ei, eo) {
                return Err(Error::format(
                    field,
                    format!("dims {fan_in}->{fan_out}, expected {ei}->{eo}"),
                ));
            }
            let mut weights = vec![0.0f32; usize::from(ei) * usize::from(eo)];
            r.read_f32_into::<LittleEndian>(&mut weights).map_err(trunc(field))?;
            let mut biases = vec![0.0f32; usize::from(eo)];
            r.read_f32_into::<LittleEndian>(&mut biases).map_err(trunc(field))?;
            layers.push((weights, biases));
        }
        let mut w2 = [[0.0f32; 8]; 8];
        for (row, chunk) in w2.iter_mut().zip(layers[1].0.chunks(8)) {
            row.copy_from_slice(chunk);
        }
        let out = Self {
            w1: layers[0].0.clone().try_into().expect("8 weights"),
            b1: layers[0].1.clone().try_into().expect("8 biases"),
            w2,
            b2: layers[1].1.clone().try_into().expect("8 biases"),
            w3: layers[2].0.clone().try_into().expect("8 weights"),
            b3: layers[2].1[0],
        };
        if !out.is_finite() {
            return Err(Error::format("parameters", "non-finite value"));
        }
        Ok(out)
    }
}

/// Apply the per-node network to every valid cost. Invalid entries are kept as is.
pub fn regularize(vol: &CostVolume, weights: &RegularizerWeights) -> CostVolume {
    let mut out = vol.clone();
    out.raw
        .par_iter_mut()
        .zip(vol.valid.par_iter())
        .for_each(|(c, &ok)| {
            if ok {
                *c = weights.eval(*c);
            }
        });
    out
}

/// How keypoint costs are combined at each grid node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginalization {
    ReduceAverage,
    WeightedAverage,
}

impl std::fmt::Display for Marginalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Marginalization::ReduceAverage => "Reduce",
            Marginalization::WeightedAverage => "Weighted",
        })
    }
}

/// Keypoint-averaged costs over the grid. A node is unavailable when no
/// keypoint projected validly there.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalCosts {
    pub grid: CostVolumeConfig,
    pub costs: Vec<f64>,
    pub available: Vec<bool>,
}

impl MarginalCosts {
    pub fn new(grid: CostVolumeConfig, costs: Vec<f64>) -> Self {
        let available = vec![true; costs.len()];
        Self {
            grid,
            costs,
            available,
        }
    }

    pub fn any_available(&self) -> bool {
        self.available.iter().any(|a| *a)
    }
}

/// Collapse the keypoint axis. Invalid keypoint entries are excluded from
/// the average; weighted averages with zero total valid weight leave the
/// node unavailable. Accumulation runs in ascending keypoint order.
pub fn marginalize(vol: &CostVolume, weights: &[f64], mode: Marginalization) -> Result<MarginalCosts> {
    if weights.len() != vol.n_keypoints {
        return Err(Error::Matching(format!(
            "{} attention weights for {} keypoints",
            weights.len(),
            vol.n_keypoints
        )));
    }
    let nodes = vol.node_count();
    let mut sum = vec![0.0f64; nodes];
    let mut norm = vec![0.0f64; nodes];
    for p in 0..vol.n_keypoints {
        let (costs, mask) = vol.keypoint_slice(p);
        let w = match mode {
            Marginalization::ReduceAverage => 1.0,
            Marginalization::WeightedAverage => weights[p],
        };
        for n in 0..nodes {
            if mask[n] {
                sum[n] += w * costs[n];
                norm[n] += w;
            }
        }
    }
    let mut costs = vec![0.0; nodes];
    let mut available = vec![false; nodes];
    for n in 0..nodes {
        if norm[n] > 0.0 {
            costs[n] = sum[n] / norm[n];
            available[n] = true;
        }
    }
    Ok(MarginalCosts {
        grid: vol.grid,
        costs,
        available,
    })
}

/// Average marginal costs of several cameras node by node, over the cameras
/// for which the node is available.
pub fn fuse_marginals(parts: &[MarginalCosts]) -> Result<MarginalCosts> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Matching("no marginal cost volumes to fuse".into()))?;
    if parts.iter().any(|p| p.grid != first.grid) {
        return Err(Error::Matching("cannot fuse volumes over different grids".into()));
    }
    let nodes = first.costs.len();
    let mut costs = vec![0.0; nodes];
    let mut available = vec![false; nodes];
    for n in 0..nodes {
        let (mut s, mut c) = (0.0, 0.0);
        for p in parts {
            if p.available[n] {
                s += p.costs[n];
                c += 1.0;
            }
        }
        if c > 0.0 {
            costs[n] = s / c;
            available[n] = true;
        }
    }
    Ok(MarginalCosts {
        grid: first.grid,
        costs,
        available,
    })
}

/// How per-axis probabilities are formed from the 3D cost grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbabilityHead {
    /// Average cost over the two other axes, then softmax along the axis.
    AxisAverage,
    /// Softmax over the full grid, then sum out the two other axes.
    #[default]
    JointSoftmax,
}

/// Probabilities over one axis of the grid with their mean and variance.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AxisDistribution {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    pub expected: f64,
    pub variance: f64,
}

impl AxisDistribution {
    fn from_probs(values: Vec<f64>, probs: Vec<f64>) -> Self {
        let expected: f64 = values.iter().zip(&probs).map(|(z, p)| p * z).sum();
        let variance: f64 = values
            .iter()
            .zip(&probs)
            .map(|(z, p)| p * (z - expected) * (z - expected))
            .sum();
        Self {
            values,
            probs,
            expected,
            variance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginalDistributions {
    pub x: AxisDistribution,
    pub y: AxisDistribution,
    pub psi: AxisDistribution,
}

impl MarginalDistributions {
    pub fn expected_offset(&self) -> PoseSE2Offset {
        PoseSE2Offset::new(self.x.expected, self.y.expected, self.psi.expected)
    }

    pub fn axes(&self) -> [&AxisDistribution; 3] {
        [&self.x, &self.y, &self.psi]
    }
}

/// Softmax of `-cost / temperature` over entries that are `Some`.
fn softmax_neg(costs: &[Option<f64>], temperature: f64) -> Vec<f64> {
    let max_logit = costs
        .iter()
        .flatten()
        .map(|c| -c / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = costs
        .iter()
        .map(|c| c.map_or(0.0, |c| (-c / temperature - max_logit).exp()))
        .collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-axis probability distributions using the default head.
pub fn marginal_distributions(costs: &MarginalCosts, temperature: f64) -> Result<MarginalDistributions> {
    marginal_distributions_with(costs, temperature, ProbabilityHead::default())
}

pub fn marginal_distributions_with(
    costs: &MarginalCosts,
    temperature: f64,
    head: ProbabilityHead,
) -> Result<MarginalDistributions> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    if !costs.any_available() {
        return Err(Error::Matching("every grid node is unavailable".into()));
    }
    let g = &costs.grid;
    if let Some(i) = (0..costs.costs.len()).find(|&i| costs.available[i] && !costs.costs[i].is_finite()) {
        return Err(Error::Matching(format!("non-finite cost at node {i}")));
    }
    let dims = [g.n_x, g.n_y, g.n_psi];
    let axis_of = |flat: usize| -> [usize; 3] {
        let k = flat % g.n_psi;
        let j = (flat / g.n_psi) % g.n_y;
        let i = flat / (g.n_psi * g.n_y);
        [i, j, k]
    };
    let probs: [Vec<f64>; 3] = match head {
        ProbabilityHead::AxisAverage => {
            let mut sums = dims.map(|n| vec![0.0f64; n]);
            let mut counts = dims.map(|n| vec![0usize; n]);
            for (flat, (&c, &ok)) in costs.costs.iter().zip(&costs.available).enumerate() {
                if !ok {
                    continue;
                }
                let idx = axis_of(flat);
                for a in 0..3 {
                    sums[a][idx[a]] += c;
                    counts[a][idx[a]] += 1;
                }
            }
            [0, 1, 2].map(|a| {
                let avg: Vec<Option<f64>> = sums[a]
                    .iter()
                    .zip(&counts[a])
                    .map(|(s, &n)| (n > 0).then(|| s / n as f64))
                    .collect();
                softmax_neg(&avg, temperature)
            })
        }
        ProbabilityHead::JointSoftmax => {
            let all: Vec<Option<f64>> = costs
                .costs
                .iter()
                .zip(&costs.available)
                .map(|(c, ok)| ok.then_some(*c))
                .collect();
            let joint = softmax_neg(&all, temperature);
            let mut out = dims.map(|n| vec![0.0f64; n]);
            for (flat, p) in joint.iter().enumerate() {
                let idx = axis_of(flat);
                for a in 0..3 {
                    out[a][idx[a]] += p;
                }
            }
            out
        }
    };
    let [px, py, ppsi] = probs;
    Ok(MarginalDistributions {
        x: AxisDistribution::from_probs(g.x_values(), px),
        y: AxisDistribution::from_probs(g.y_values(), py),
        psi: AxisDistribution::from_probs(g.psi_values(), ppsi),
    })
}

/// Variance limits per axis (m^2, m^2, rad^2).
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VarianceThresholds {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl VarianceThresholds {
    /// `(2 * step)^2` per axis of the given (finest) grid.
    pub fn from_grid(grid: &CostVolumeConfig) -> Self {
        Self {
            x: (2.0 * grid.step_x).powi(2),
            y: (2.0 * grid.step_y).powi(2),
            psi: (2.0 * grid.step_psi).powi(2),
        }
    }
}

impl Default for VarianceThresholds {
    fn default() -> Self {
        Self::from_grid(&CostVolumeConfig::default_for_scale(2))
    }
}

/// Available iff every axis variance is at most its threshold.
pub fn availability(m: &MarginalDistributions, thresholds: &VarianceThresholds) -> bool {
    m.x.variance <= thresholds.x && m.y.variance <= thresholds.y && m.psi.variance <= thresholds.psi
}
