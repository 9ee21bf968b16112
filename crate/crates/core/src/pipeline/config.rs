use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::isu::UpdateKind;
use crate::ssm::ScanKernel;

/// Architecture of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub levels: usize,
    /// Update iterations per level.
    pub iters: usize,
    /// Point count per level, finest first.
    pub points: Vec<usize>,
    /// Feature, context and hidden width `C`.
    pub channels: usize,
    /// Motion feature width `C₂`.
    pub motion_channels: usize,
    /// Neighborhood size for grouping and cost volumes.
    pub k: usize,
    /// Neighbors used when upsampling to a finer level.
    pub upsample_k: usize,
    pub update: UpdateKind,
    /// Mamba blocks per update operator.
    pub blocks: usize,
    /// SSM state size `S`.
    pub state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub scan: ScanKernel,
    pub seed: u64,
    pub zero_flow_head: bool,
    pub zero_output_proj: bool,
    /// Loss weight per level, finest first.
    pub alpha: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 2,
            iters: 2,
            points: vec![256, 64],
            channels: 32,
            motion_channels: 32,
            k: 16,
            upsample_k: 3,
            update: UpdateKind::IsuFio,
            blocks: 2,
            state: 8,
            expand: 2,
            conv_width: 3,
            scan: ScanKernel::Sequential,
            seed: 0,
            zero_flow_head: true,
            zero_output_proj: true,
            alpha: vec![0.16, 0.08, 0.04, 0.02],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn list_string<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl NetworkConfig {
    pub const KEYS: [&'static str; 17] = [
        "levels",
        "iters",
        "points",
        "channels",
        "motion_channels",
        "k",
        "upsample_k",
        "update",
        "blocks",
        "state",
        "expand",
        "conv_width",
        "scan",
        "seed",
        "zero_flow_head",
        "zero_output_proj",
        "alpha",
    ];

    /// Sets one option from its textual form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "levels" => self.levels = parse(key, value)?,
            "iters" => self.iters = parse(key, value)?,
            "points" => self.points = parse_list(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "motion_channels" => self.motion_channels = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "upsample_k" => self.upsample_k = parse(key, value)?,
            "update" => self.update = value.trim().parse()?,
            "blocks" => self.blocks = parse(key, value)?,
            "state" => self.state = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "conv_width" => self.conv_width = parse(key, value)?,
            "scan" => {
                self.scan = match value.trim() {
                    "sequential" => ScanKernel::Sequential,
                    "parallel" => ScanKernel::parallel(),
                    other => return Err(Error::Config(format!("unknown scan kernel `{other}`"))),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "zero_flow_head" => self.zero_flow_head = parse_bool(key, value)?,
            "zero_output_proj" => self.zero_output_proj = parse_bool(key, value)?,
            "alpha" => self.alpha = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Every option as `(key, value)` text, in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let scan = match self.scan {
            ScanKernel::Sequential => "sequential",
            ScanKernel::Blocked { .. } => "parallel",
        };
        vec![
            ("levels", self.levels.to_string()),
            ("iters", self.iters.to_string()),
            ("points", list_string(&self.points)),
            ("channels", self.channels.to_string()),
            ("motion_channels", self.motion_channels.to_string()),
            ("k", self.k.to_string()),
            ("upsample_k", self.upsample_k.to_string()),
            ("update", self.update.name().to_string()),
            ("blocks", self.blocks.to_string()),
            ("state", self.state.to_string()),
            ("expand", self.expand.to_string()),
            ("conv_width", self.conv_width.to_string()),
            ("scan", scan.to_string()),
            ("seed", self.seed.to_string()),
            ("zero_flow_head", self.zero_flow_head.to_string()),
            ("zero_output_proj", self.zero_output_proj.to_string()),
            ("alpha", list_string(&self.alpha)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.levels == 0 {
            return fail("at least one level is required".into());
        }
        if self.iters == 0 {
            return fail("at least one iteration per level is required".into());
        }
        if self.points.len() != self.levels {
            return fail(format!(
                "{} point counts given for {} levels",
                self.points.len(),
                self.levels
            ));
        }
        if self.points.contains(&0) || self.points.windows(2).any(|w| w[1] >= w[0]) {
            return fail(format!(
                "point counts must be positive and strictly decreasing, got {:?}",
                self.points
            ));
        }
        if self.channels == 0 || self.motion_channels == 0 || self.state == 0 || self.expand == 0 {
            return fail("channel widths and state size must be positive".into());
        }
        if self.k == 0 || self.upsample_k == 0 {
            return fail("neighborhood sizes must be positive".into());
        }
        if self.conv_width.is_multiple_of(2) {
            return fail(format!("depthwise kernel width must be odd, got {}", self.conv_width));
        }
        if self.update != UpdateKind::ConvGru && self.blocks == 0 {
            return fail("at least one Mamba block is required".into());
        }
        if self.alpha.len() < self.levels {
            return fail(format!(
                "{} loss weights given for {} levels",
                self.alpha.len(),
                self.levels
            ));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0)) {
            return fail("loss weights must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Scenes per step.
    pub batch: usize,
    /// Length of the cosine schedule.
    pub total_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch: 1,
            total_steps: 1000,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 7] = ["lr", "lr_min", "beta1", "beta2", "adam_eps", "weight_decay", "batch"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "lr_min" => self.lr_min = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch", self.batch.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(Error::Config("need 0 <= lr_min <= lr and lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decay rates must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "adam_eps must be positive and weight_decay non-negative".into(),
            ));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}
