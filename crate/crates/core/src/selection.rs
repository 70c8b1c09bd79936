//! Attentive keypoint selection: random preselection followed by farthest
//! point sampling, optionally weighted by attention scores.
//!
//! Plain FPS picks, at every step, the unselected candidate whose distance to
//! the nearest already-selected candidate is largest. Weighted FPS scales that
//! distance by the candidate's attention weight, so it trades geometric spread
//! against reliability. Distances are Euclidean in level pixel units and ties
//! go to the lowest candidate index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Point3;

/// A 2D pixel with known 3D coordinates, eligible for selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    /// Level-scale pixel coordinates.
    pub u: f64,
    pub v: f64,
    /// Attention weight in `[0, 1]`.
    pub weight: f64,
    pub world: Point3,
}

impl Candidate {
    pub fn new(u: f64, v: f64, weight: f64, world: Point3) -> Self {
        Self { u, v, weight, world }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionStrategy {
    Fps,
    Wfps,
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectionStrategy::Fps => "FPS",
            SelectionStrategy::Wfps => "WFPS",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SelectionConfig {
    /// Candidates randomly kept before farthest point sampling.
    pub preselect: usize,
    /// Keypoints per level, ordered like [`crate::features::SCALES`] (s = 2, 4, 8).
    pub per_level: [usize; 3],
    pub seed: u64,
    pub strategy: SelectionStrategy,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            preselect: 2048,
            per_level: [128, 128, 128],
            seed: 0,
            strategy: SelectionStrategy::Wfps,
        }
    }
}

impl SelectionConfig {
    /// Effective `(preselect, n_s)` for a level given the candidate count,
    /// clamped so that `n_s <= preselect <= available`.
    pub fn clamped_counts(&self, level_index: usize, available: usize) -> (usize, usize) {
        let mut k = self.preselect;
        let mut n = self.per_level[level_index];
        if k > available {
            k = available;
        }
        if n > k {
            log::warn!("requested {n} keypoints but only {k} candidates preselected; clamping");
            n = k;
        }
        (k, n)
    }
}

/// Draw `k` distinct candidates uniformly without replacement. The result
/// keeps the input order and is deterministic in `seed`.
pub fn preselect(candidates: &[Candidate], k: usize, seed: u64) -> Result<Vec<Candidate>> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidates to preselect from".into()));
    }
    if k >= candidates.len() {
        return Ok(candidates.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| candidates[i]).collect())
}

#[inline]
fn distance(a: &Candidate, b: &Candidate) -> f64 {
    let du = a.u - b.u;
    let dv = a.v - b.v;
    (du * du + dv * dv).sqrt()
}

fn greedy(candidates: &[Candidate], n: usize, seed_index: usize, weighted: bool) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::Selection("no candidates".into()));
    }
    if n > candidates.len() {
        return Err(Error::Selection(format!(
            "requested {n} points from {} candidates",
            candidates.len()
        )));
    }
    if seed_index >= candidates.len() {
        return Err(Error::Selection(format!("seed index {seed_index} out of range")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut order = Vec::with_capacity(n);
    let mut selected = vec![false; candidates.len()];
    let mut nearest = vec![f64::INFINITY; candidates.len()];
    let mut current = seed_index;
    loop {
        order.push(current);
        selected[current] = true;
        if order.len() == n {
            break;
        }
        let anchor = &candidates[current];
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for (i, c) in candidates.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let d = distance(c, anchor);
            if d < nearest[i] {
                nearest[i] = d;
            }
            let score = if weighted { c.weight * nearest[i] } else { nearest[i] };
            if score > best_score {
                best_score = score;
                best = Some(i);
            }
        }
        current = best.expect("an unselected candidate remains");
    }
    Ok(order)
}

/// Farthest point sampling starting from `seed_index` (index 0 when `None`).
pub fn fps(candidates: &[Candidate], n: usize, seed_index: Option<usize>) -> Result<Vec<usize>> {
    greedy(candidates, n, seed_index.unwrap_or(0), false)
}

/// Weighted farthest point sampling. Without an explicit seed it starts from
/// the highest-weight candidate (lowest index among equals). When every
/// weight is zero all scores tie and the order degenerates to ascending index.
pub fn wfps(candidates: &[Candidate], n: usize, seed_index: Option<usize>) -> Result<Vec<usize>> {
    let seed = match seed_index {
        Some(s) => s,
        None => highest_weight(candidates),
    };
    greedy(candidates, n, seed, true)
}

fn highest_weight(candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.weight > candidates[best].weight {
            best = i;
        }
    }
    best
}

/// Run the configured strategy with its default seed.
pub fn select(candidates: &[Candidate], n: usize, strategy: SelectionStrategy) -> Result<Vec<usize>> {
    match strategy {
        SelectionStrategy::Fps => fps(candidates, n, None),
        SelectionStrategy::Wfps => wfps(candidates, n, None),
    }
}
