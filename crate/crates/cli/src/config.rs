//! Run configuration shared by all subcommands.
//!
//! The `--config` file uses the same `key = value` format as world spec
//! files. World keys go to [`WorldSpec`]; the keys below tune map building and
//! localization:
//!
//! | key | value |
//! |-----|-------|
//! | `strategy` | `fps` or `wfps` |
//! | `preselect` | candidates kept before selection |
//! | `keypoints` | keypoints per level (all levels) |
//! | `selection_seed` | preselection seed |
//! | `marginalization` | `reduce` or `weighted` |
//! | `head` | `joint_softmax` or `axis_average` |
//! | `temperature` | softmax temperature |
//! | `grid_s8`, `grid_s4`, `grid_s2` | `n_x,n_y,n_psi,step_x_m,step_y_m,step_psi_deg` |
//! | `regularizer` | path to a regularizer weight file, applied at every level |
//! | `prior_mode` | `perturbed` or `dead_reckoning` |

use std::path::Path;

use anyhow::{bail, Context, Result};
use vloc::matching::{CostVolumeConfig, Marginalization, ProbabilityHead, RegularizerWeights, VarianceThresholds};
use vloc::pipeline::{LocalizerConfig, MapConfig};
use vloc::selection::SelectionStrategy;
use vloc::synth::{BenchmarkConfig, PriorMode, WorldSpec};

#[derive(Clone, Debug, Default)]
pub struct RunConfig {
    pub spec: WorldSpec,
    pub map: MapConfig,
    pub localizer: LocalizerConfig,
    pub prior_mode: PriorMode,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            for (n, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!("{}:{}: expected key = value", path.display(), n + 1);
                };
                cfg.set(k.trim(), v.trim(), base)
                    .with_context(|| format!("{}:{}", path.display(), n + 1))?;
            }
        }
        cfg.spec.validate()?;
        cfg.localizer.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()> {
        let sel = &mut self.map.selection;
        match key {
            "strategy" => {
                sel.strategy = match value {
                    "fps" => SelectionStrategy::Fps,
                    "wfps" => SelectionStrategy::Wfps,
                    _ => bail!("unknown strategy {value:?}"),
                }
            }
            "preselect" => sel.preselect = value.parse()?,
            "keypoints" => sel.per_level = [value.parse()?; 3],
            "selection_seed" => sel.seed = value.parse()?,
            "marginalization" => {
                self.localizer.marginalization = match value {
                    "reduce" => Marginalization::ReduceAverage,
                    "weighted" => Marginalization::WeightedAverage,
                    _ => bail!("unknown marginalization {value:?}"),
                }
            }
            "head" => {
                self.localizer.head = match value {
                    "joint_softmax" => ProbabilityHead::JointSoftmax,
                    "axis_average" => ProbabilityHead::AxisAverage,
                    _ => bail!("unknown head {value:?}"),
                }
            }
            "temperature" => self.localizer.temperature = value.parse()?,
            "grid_s8" | "grid_s4" | "grid_s2" => {
                let nums: Vec<f64> = value
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()?;
                if nums.len() != 6 {
                    bail!("grid needs n_x,n_y,n_psi,step_x,step_y,step_psi_deg");
                }
                let grid = CostVolumeConfig::new(
                    [nums[0] as usize, nums[1] as usize, nums[2] as usize],
                    nums[3],
                    nums[4],
                    nums[5].to_radians(),
                )?;
                let index = match key {
                    "grid_s8" => 0,
                    "grid_s4" => 1,
                    _ => 2,
                };
                self.localizer.levels[index].grid = grid;
                if index == 2 {
                    self.localizer.thresholds = VarianceThresholds::from_grid(&grid);
                }
            }
            "regularizer" => {
                let w = RegularizerWeights::load(base.join(value))?;
                for level in &mut self.localizer.levels {
                    level.regularizer = w.clone();
                }
            }
            "prior_mode" => {
                self.prior_mode = match value {
                    "perturbed" => PriorMode::Perturbed,
                    "dead_reckoning" => PriorMode::DeadReckoning,
                    _ => bail!("unknown prior mode {value:?}"),
                }
            }
            _ => self.spec.set(key, value).map_err(anyhow::Error::msg)?,
        }
        Ok(())
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            spec: self.spec.clone(),
            map: self.map.clone(),
            localizer: self.localizer.clone(),
            prior_mode: self.prior_mode,
        }
    }
}
