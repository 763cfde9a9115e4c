//! Run configuration files.
//!
//! One `dotted.key = value` pair per line; `#` starts a comment and lists are
//! comma separated:
//!
//! ```text
//! task = task2
//! preprocess.spacing = 0.5, 0.5, 2
//! inference.stride = 80,80,16
//! model.weights = fold0.vskw, fold1.vskw
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augmentation::{AugmentationPolicy, TransformParams};
use crate::error::{arg_err, Error, Result};
use crate::inference::SlidingWindowConfig;
use crate::network::NetworkConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Task {
    /// One mid-RT scan.
    #[default]
    Task1,
    /// Mid-RT scan, registered pre-RT scan, pre-RT GTVp mask, pre-RT GTVn mask.
    Task2,
}

impl Task {
    /// Input channels that hold binary masks.
    pub fn mask_channels(self) -> Vec<usize> {
        match self {
            Task::Task1 => Vec::new(),
            Task::Task2 => vec![2, 3],
        }
    }

    pub fn network(self) -> NetworkConfig {
        match self {
            Task::Task1 => NetworkConfig::task1(),
            Task::Task2 => NetworkConfig::task2(),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "task1" | "1" => Ok(Task::Task1),
            "task2" | "2" => Ok(Task::Task2),
            other => arg_err(format!("unknown task `{other}` (expected task1 or task2)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Task1 => "task1",
            Task::Task2 => "task2",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub network: NetworkConfig,
    /// Spacing (mm) the network works at.
    pub working_spacing: [f64; 3],
    pub window: SlidingWindowConfig,
    /// One weight file per ensemble member.
    pub weights: Vec<PathBuf>,
    pub policy: AugmentationPolicy,
    pub params: TransformParams,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(Task::Task1)
    }
}

const TOTAL_ITERS: u64 = 100_000;

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let exempt = task.mask_channels();
        Self {
            task,
            network: task.network(),
            working_spacing: [0.5, 0.5, 2.0],
            window: SlidingWindowConfig { exempt_channels: exempt.clone(), ..SlidingWindowConfig::default() },
            weights: Vec::new(),
            policy: AugmentationPolicy::scheduled(TOTAL_ITERS),
            params: TransformParams { exempt_channels: exempt, ..TransformParams::default() },
            seed: 0,
        }
    }

    /// Parses config text. `task_override` wins over a `task` key in the text.
    pub fn parse(text: &str, task_override: Option<Task>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return arg_err(format!("config line {}: expected `key = value`", n + 1));
            };
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (n + 1, v.trim().to_string())).is_some() {
                return arg_err(format!("config line {}: duplicate key `{key}`", n + 1));
            }
        }
        let task = match (task_override, entries.remove("task")) {
            (Some(t), _) => t,
            (None, Some((_, v))) => v.parse()?,
            (None, None) => Task::Task1,
        };
        let mut cfg = Self::for_task(task);
        for (key, (line, value)) in &entries {
            cfg.apply(key, value).map_err(|e| Error::Argument(format!("config line {line} (`{key}`): {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, task_override: Option<Task>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, task_override)
            }
            None => {
                let cfg = Self::for_task(task_override.unwrap_or_default());
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = scalar(v)?,
            "preprocess.spacing" => self.working_spacing = triple(v)?,
            "network.base_width" => self.network.base_width = scalar(v)?,
            "network.num_stages" => self.network.num_stages = scalar(v)?,
            "network.kernel_plan" => self.network.kernel_plan = list(v)?,
            "network.convs_per_stage" => self.network.convs_per_stage = scalar(v)?,
            "network.num_classes" => self.network.num_classes = scalar(v)?,
            "inference.patch_size" => self.window.patch_size = triple(v)?,
            "inference.stride" => self.window.stride = triple(v)?,
            "inference.weighting" => self.window.weighting = v.parse()?,
            "inference.gaussian_edge" => self.window.gaussian_edge_value = scalar(v)?,
            "model.weights" => {
                self.weights = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
            }
            "augmentation.p_start" => self.policy.p_start = scalar(v)?,
            "augmentation.p_end" => self.policy.p_end = scalar(v)?,
            "augmentation.step" => self.policy.step = scalar(v)?,
            "augmentation.total_iters" => self.policy.total_iters = scalar(v)?,
            "augmentation.constant_p" => self.policy.constant_p = Some(scalar(v)?),
            "augmentation.transforms" => self.policy.transforms = list(v)?,
            "augmentation.mirror_axes" => {
                let axes: Vec<bool> = list(v)?;
                self.params.mirror_axes = axes
                    .try_into()
                    .map_err(|_| Error::Argument("expected three booleans".into()))?;
            }
            "augmentation.max_rotation" => self.params.max_rotation_deg = scalar(v)?,
            "augmentation.gamma" => self.params.gamma_range = pair(v)?,
            "augmentation.bias_order" => self.params.bias_order = scalar(v)?,
            "augmentation.bias_amplitude" => self.params.bias_amplitude = pair(v)?,
            "augmentation.bias_coefficient" => self.params.bias_coefficient = scalar(v)?,
            "augmentation.noise_sigma" => self.params.noise_sigma = pair(v)?,
            "augmentation.ghost_shift" => self.params.ghost_shift = pair(v)?,
            "augmentation.ghost_weight" => self.params.ghost_weight = pair(v)?,
            _ => return arg_err("unknown key"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.window.validate()?;
        self.policy.validate()?;
        self.params.validate()?;
        crate::volume::check_spacing(self.working_spacing)?;
        if self.task == Task::Task2 && self.network.in_channels != 4 {
            return arg_err("task2 needs a 4-channel network");
        }
        let div = self.network.divisor();
        if self.window.patch_size.iter().any(|&p| p % div != 0) {
            return arg_err(format!(
                "patch size {:?} must be divisible by {div} for a {}-stage network",
                self.window.patch_size, self.network.num_stages
            ));
        }
        Ok(())
    }
}

fn scalar<T: FromStr>(v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Argument(format!("cannot parse `{}`", v.trim())))
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(scalar).collect()
}

fn triple<T: FromStr>(v: &str) -> Result<[T; 3]> {
    list(v)?.try_into().map_err(|_| Error::Argument(format!("expected three values, got `{v}`")))
}

fn pair<T: FromStr>(v: &str) -> Result<(T, T)> {
    let mut items: Vec<T> = list(v)?;
    if items.len() != 2 {
        return arg_err(format!("expected two values, got `{v}`"));
    }
    let b = items.pop().unwrap();
    let a = items.pop().unwrap();
    Ok((a, b))
}
