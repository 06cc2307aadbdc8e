//! Plain-text run configuration: `section.key = value` lines, `#` comments.
//! Unknown keys are rejected. [`RunConfig::to_text`] writes the resolved
//! configuration in the same format, so a saved file reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::guidance::{default_y2_weight, GuidanceMode, GuidanceSpec};
use crate::sampling::{Method, SolverConfig};
use crate::schedule::NoiseSchedule;
use crate::training::{TrainConfig, TrainLength};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_count: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub few_shot: f64,

    pub schedule_kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub schedule_steps: u32,

    pub model_width: usize,

    pub dpm_batch: usize,
    pub dpm_iterations: usize,
    pub dpm_lr: f64,
    pub dpm_cond_dropout: f64,

    pub seg_batch: usize,
    pub seg_iterations: usize,
    pub seg_lr: f64,

    pub filter_eta: f64,
    pub filter_batch: usize,
    pub filter_epochs: usize,
    pub filter_lr: f64,

    pub solver_method: Method,
    pub solver_steps: usize,

    pub guidance_mode: String,
    pub guidance_value: f64,
    pub guidance_use_y1: bool,
    pub guidance_use_y2: bool,
    /// `None` selects one percent of the pixel count.
    pub guidance_y2_weight: Option<f64>,
    pub guidance_drop_half: bool,

    pub expansion_candidates: usize,
    pub expansion_budget: usize,
    pub expansion_seeds: Vec<u64>,
    pub expansion_width: usize,
    pub expansion_batch: usize,
    pub expansion_epochs: usize,
    pub expansion_lr: f64,
}

impl Default for RunConfig {
    /// The 64x64 few-shot experiment sized for a desktop CPU.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_count: 304,
            data_height: 64,
            data_width: 64,
            few_shot: 0.1,
            schedule_kind: "linear".into(),
            beta_min: 0.1,
            beta_max: 20.0,
            schedule_steps: 1000,
            model_width: 8,
            dpm_batch: 8,
            dpm_iterations: 3000,
            dpm_lr: 2e-3,
            dpm_cond_dropout: 0.0,
            seg_batch: 8,
            seg_iterations: 800,
            seg_lr: 2e-3,
            filter_eta: 0.065,
            filter_batch: 16,
            filter_epochs: 50,
            filter_lr: 1e-2,
            solver_method: Method::DpmPp2M,
            solver_steps: 20,
            guidance_mode: "temperature".into(),
            guidance_value: 1.0,
            guidance_use_y1: true,
            guidance_use_y2: true,
            guidance_y2_weight: None,
            guidance_drop_half: false,
            expansion_candidates: 100,
            expansion_budget: 500,
            expansion_seeds: vec![0, 1, 2],
            expansion_width: 8,
            expansion_batch: 16,
            expansion_epochs: 50,
            expansion_lr: 1e-2,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Tiny 32x32 configuration for smoke tests.
    pub fn small() -> Self {
        RunConfig {
            data_count: 60,
            data_height: 32,
            data_width: 32,
            few_shot: 0.2,
            model_width: 4,
            dpm_iterations: 30,
            seg_iterations: 30,
            dpm_batch: 4,
            seg_batch: 4,
            filter_epochs: 3,
            solver_steps: 4,
            expansion_candidates: 4,
            expansion_seeds: vec![0],
            expansion_width: 4,
            expansion_epochs: 2,
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "run.seed" => self.seed = parse(key, v)?,
            "data.count" => self.data_count = parse(key, v)?,
            "data.height" => self.data_height = parse(key, v)?,
            "data.width" => self.data_width = parse(key, v)?,
            "data.few_shot" => self.few_shot = parse(key, v)?,
            "schedule.kind" => match v {
                "linear" | "cosine" => self.schedule_kind = v.into(),
                _ => return Err(Error::invalid(format!("schedule.kind must be linear or cosine, got `{v}`"))),
            },
            "schedule.beta_min" => self.beta_min = parse(key, v)?,
            "schedule.beta_max" => self.beta_max = parse(key, v)?,
            "schedule.steps" => self.schedule_steps = parse(key, v)?,
            "model.width" => self.model_width = parse(key, v)?,
            "dpm.batch" => self.dpm_batch = parse(key, v)?,
            "dpm.iterations" => self.dpm_iterations = parse(key, v)?,
            "dpm.lr" => self.dpm_lr = parse(key, v)?,
            "dpm.cond_dropout" => self.dpm_cond_dropout = parse(key, v)?,
            "seg.batch" => self.seg_batch = parse(key, v)?,
            "seg.iterations" => self.seg_iterations = parse(key, v)?,
            "seg.lr" => self.seg_lr = parse(key, v)?,
            "filter.eta" => self.filter_eta = parse(key, v)?,
            "filter.batch" => self.filter_batch = parse(key, v)?,
            "filter.epochs" => self.filter_epochs = parse(key, v)?,
            "filter.lr" => self.filter_lr = parse(key, v)?,
            "solver.method" => self.solver_method = v.parse()?,
            "solver.steps" => self.solver_steps = parse(key, v)?,
            "guidance.mode" => match v {
                "temperature" | "scale" | "off" => self.guidance_mode = v.into(),
                _ => return Err(Error::invalid(format!("guidance.mode must be temperature, scale or off, got `{v}`"))),
            },
            "guidance.value" => self.guidance_value = parse(key, v)?,
            "guidance.use_y1" => self.guidance_use_y1 = parse_bool(key, v)?,
            "guidance.use_y2" => self.guidance_use_y2 = parse_bool(key, v)?,
            "guidance.y2_weight" => {
                self.guidance_y2_weight = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "guidance.drop_half" => self.guidance_drop_half = parse_bool(key, v)?,
            "expansion.candidates" => self.expansion_candidates = parse(key, v)?,
            "expansion.budget" => self.expansion_budget = parse(key, v)?,
            "expansion.seeds" => {
                self.expansion_seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?;
            }
            "expansion.width" => self.expansion_width = parse(key, v)?,
            "expansion.batch" => self.expansion_batch = parse(key, v)?,
            "expansion.epochs" => self.expansion_epochs = parse(key, v)?,
            "expansion.lr" => self.expansion_lr = parse(key, v)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        self.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_text(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.guidance()?.map(|g| g.validate()).transpose()?;
        if !(self.few_shot > 0.0 && self.few_shot <= 1.0) {
            return Err(Error::invalid("data.few_shot must be in (0, 1]"));
        }
        if !(self.filter_eta > 0.0 && self.filter_eta <= 1.0) {
            return Err(Error::invalid("filter.eta must be in (0, 1]"));
        }
        if self.expansion_seeds.is_empty() {
            return Err(Error::invalid("expansion.seeds must list at least one seed"));
        }
        if self.solver_steps == 0 {
            return Err(Error::invalid("solver.steps must be positive"));
        }
        for t in [self.dpm_train(), self.seg_train(), self.filter_train()] {
            t.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule_kind.as_str() {
            "cosine" => NoiseSchedule::cosine(self.schedule_steps),
            _ => NoiseSchedule::linear(self.beta_min, self.beta_max, self.schedule_steps),
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig::new(self.solver_method, self.solver_steps)
    }

    /// `None` when guidance is off.
    pub fn guidance(&self) -> Result<Option<GuidanceSpec>> {
        let mode = match self.guidance_mode.as_str() {
            "off" => return Ok(None),
            "scale" => GuidanceMode::Scale(self.guidance_value),
            _ => GuidanceMode::Temperature(self.guidance_value),
        };
        let spec = GuidanceSpec {
            use_y1: self.guidance_use_y1,
            use_y2: self.guidance_use_y2,
            mode,
            y2_weight: self
                .guidance_y2_weight
                .unwrap_or_else(|| default_y2_weight(self.data_height, self.data_width)),
            drop_half: self.guidance_drop_half,
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    pub fn dpm_train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.dpm_batch,
            length: TrainLength::Iterations(self.dpm_iterations),
            learning_rate: self.dpm_lr,
            seed: 0,
            cond_dropout: self.dpm_cond_dropout,
        }
    }

    pub fn seg_train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.seg_batch,
            length: TrainLength::Iterations(self.seg_iterations),
            learning_rate: self.seg_lr,
            seed: 0,
            cond_dropout: 0.0,
        }
    }

    pub fn filter_train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.filter_batch,
            length: TrainLength::Epochs(self.filter_epochs),
            learning_rate: self.filter_lr,
            seed: 0,
            cond_dropout: 0.0,
        }
    }

    pub fn validator_train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.expansion_batch,
            length: TrainLength::Epochs(self.expansion_epochs),
            learning_rate: self.expansion_lr,
            seed: 0,
            cond_dropout: 0.0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("run.seed", self.seed.to_string());
        kv("data.count", self.data_count.to_string());
        kv("data.height", self.data_height.to_string());
        kv("data.width", self.data_width.to_string());
        kv("data.few_shot", self.few_shot.to_string());
        kv("schedule.kind", self.schedule_kind.clone());
        kv("schedule.beta_min", self.beta_min.to_string());
        kv("schedule.beta_max", self.beta_max.to_string());
        kv("schedule.steps", self.schedule_steps.to_string());
        kv("model.width", self.model_width.to_string());
        kv("dpm.batch", self.dpm_batch.to_string());
        kv("dpm.iterations", self.dpm_iterations.to_string());
        kv("dpm.lr", self.dpm_lr.to_string());
        kv("dpm.cond_dropout", self.dpm_cond_dropout.to_string());
        kv("seg.batch", self.seg_batch.to_string());
        kv("seg.iterations", self.seg_iterations.to_string());
        kv("seg.lr", self.seg_lr.to_string());
        kv("filter.eta", self.filter_eta.to_string());
        kv("filter.batch", self.filter_batch.to_string());
        kv("filter.epochs", self.filter_epochs.to_string());
        kv("filter.lr", self.filter_lr.to_string());
        kv("solver.method", self.solver_method.to_string());
        kv("solver.steps", self.solver_steps.to_string());
        kv("guidance.mode", self.guidance_mode.clone());
        kv("guidance.value", self.guidance_value.to_string());
        kv("guidance.use_y1", self.guidance_use_y1.to_string());
        kv("guidance.use_y2", self.guidance_use_y2.to_string());
        kv(
            "guidance.y2_weight",
            self.guidance_y2_weight.map_or("auto".into(), |w| w.to_string()),
        );
        kv("guidance.drop_half", self.guidance_drop_half.to_string());
        kv("expansion.candidates", self.expansion_candidates.to_string());
        kv("expansion.budget", self.expansion_budget.to_string());
        let seeds: Vec<String> = self.expansion_seeds.iter().map(u64::to_string).collect();
        kv("expansion.seeds", seeds.join(","));
        kv("expansion.width", self.expansion_width.to_string());
        kv("expansion.batch", self.expansion_batch.to_string());
        kv("expansion.epochs", self.expansion_epochs.to_string());
        kv("expansion.lr", self.expansion_lr.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::small();
        cfg.set("guidance.mode", "scale").unwrap();
        cfg.set("guidance.value", "2").unwrap();
        cfg.set("guidance.y2_weight", "3.5").unwrap();
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_errors() {
        let err = RunConfig::parse_text("dpm.iteratoins = 5").unwrap_err();
        assert!(err.to_string().contains("dpm.iteratoins"));
        assert!(RunConfig::parse_text("dpm.lr = fast").is_err());
        assert!(RunConfig::parse_text("no equals sign").is_err());
        assert!(RunConfig::parse_text("filter.eta = 0").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse_text("# header\n\nrun.seed = 7 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn guidance_off_yields_none() {
        let mut cfg = RunConfig::default();
        cfg.set("guidance.mode", "off").unwrap();
        assert!(cfg.guidance().unwrap().is_none());
        assert_eq!(RunConfig::default().guidance().unwrap().unwrap().y2_weight, 64.0 * 64.0 * 0.01);
    }
}
