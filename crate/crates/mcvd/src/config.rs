//! Run configuration: one merged view of data generation, layout, model,
//! schedule, training and sampling settings. Serialized as flat key-value
//! text with dotted keys (`train.p_mask = 0.5`), embedded verbatim into
//! checkpoints and written as a sidecar next to produced artifacts.

use std::collections::BTreeMap;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{ShapeKind, SyntheticSpec};
use crate::denoiser::{ConditioningMode, DenoiserConfig};
use crate::error::{McvdError, Result};
use crate::masking::{BlockLayout, MaskingRegime, TaskKind};
use crate::sampler::SamplerKind;
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub p_mask: f64,
    pub regime: MaskingRegime,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub ema: bool,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub stride: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            p_mask: 0.5,
            regime: MaskingRegime::PastFuture,
            batch_size: 8,
            steps: 5000,
            lr: 2e-4,
            seed: 0,
            checkpoint_interval: 1000,
            ema: true,
            ema_decay: 0.999,
            clip_norm: 1.0,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub conditioning: ConditioningMode,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    pub embedding_dim: usize,
    pub embedding_constant: f64,
    pub groups: usize,
    pub heads: usize,
    pub cond_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            conditioning: ConditioningMode::Concat,
            base_width: 32,
            channel_multipliers: vec![1, 2, 2],
            attention_resolutions: vec![4],
            num_res_blocks: 1,
            embedding_dim: 128,
            embedding_constant: 10_000.0,
            groups: 8,
            heads: 4,
            cond_width: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSection {
    pub kind: SamplerKind,
    pub steps: usize,
    pub seed: u64,
    pub task: TaskKind,
    pub blocks: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            kind: SamplerKind::Ddpm,
            steps: 100,
            seed: 0,
            task: TaskKind::FuturePrediction,
            blocks: 1,
        }
    }
}

/// The merged run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub layout: BlockLayout,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub train: TrainSection,
    pub sample: SampleSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: SyntheticSpec::default(),
            layout: BlockLayout::new(2, 4, 0, 16, 16, 1).unwrap(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            train: TrainSection {
                regime: MaskingRegime::None,
                ..Default::default()
            },
            sample: SampleSection::default(),
        }
    }
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            conditioning: self.model.conditioning,
            base_width: self.model.base_width,
            channel_multipliers: self.model.channel_multipliers.clone(),
            attention_resolutions: self.model.attention_resolutions.clone(),
            num_res_blocks: self.model.num_res_blocks,
            embedding_dim: self.model.embedding_dim,
            embedding_constant: self.model.embedding_constant,
            groups: self.model.groups,
            heads: self.model.heads,
            cond_width: self.model.cond_width,
            layout: self.layout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.denoiser_config().validate()?;
        if !(0.0..=1.0).contains(&self.train.p_mask) {
            return Err(McvdError::config("train.p_mask must lie in [0, 1]"));
        }
        if self.train.batch_size == 0 {
            return Err(McvdError::config("train.batch_size must be >= 1"));
        }
        match self.train.regime {
            MaskingRegime::PastOnly if self.layout.future != 0 => {
                return Err(McvdError::config(
                    "regime past requires layout.future = 0 (future conditioning is omitted)",
                ));
            }
            MaskingRegime::PastFuture if self.layout.past == 0 || self.layout.future == 0 => {
                return Err(McvdError::config(
                    "regime past_future requires past > 0 and future > 0",
                ));
            }
            _ => {}
        }
        if self.sample.steps == 0 || self.sample.steps > self.schedule.steps {
            return Err(McvdError::config(
                "sample.steps must satisfy 1 <= steps <= schedule.steps",
            ));
        }
        if self.sample.blocks == 0 {
            return Err(McvdError::config("sample.blocks must be >= 1"));
        }
        if (self.data.height, self.data.width, self.data.channels)
            != (self.layout.height, self.layout.width, self.layout.channels)
        {
            return Err(McvdError::config(
                "data frame geometry must match layout geometry",
            ));
        }
        Ok(())
    }

    /// Flat dotted-key serialization; keys are sorted so the text (and the
    /// fingerprint derived from it) is canonical.
    pub fn to_flat_text(&self) -> String {
        let mut kv = BTreeMap::new();
        let d = &self.data;
        kv.insert("data.height".to_string(), d.height.to_string());
        kv.insert("data.width".into(), d.width.to_string());
        kv.insert("data.channels".into(), d.channels.to_string());
        kv.insert("data.num_shapes".into(), d.num_shapes.to_string());
        kv.insert("data.shape_kinds".into(), join(&d.shape_kinds));
        kv.insert("data.shape_size".into(), d.shape_size.to_string());
        kv.insert("data.min_speed".into(), d.min_speed.to_string());
        kv.insert("data.max_speed".into(), d.max_speed.to_string());
        kv.insert("data.bounce_prob".into(), d.bounce_prob.to_string());
        kv.insert("data.video_len".into(), d.video_len.to_string());
        kv.insert("data.seed".into(), d.seed.to_string());

        let l = &self.layout;
        kv.insert("layout.past".into(), l.past.to_string());
        kv.insert("layout.current".into(), l.current.to_string());
        kv.insert("layout.future".into(), l.future.to_string());
        kv.insert("layout.height".into(), l.height.to_string());
        kv.insert("layout.width".into(), l.width.to_string());
        kv.insert("layout.channels".into(), l.channels.to_string());

        let m = &self.model;
        kv.insert("model.conditioning".into(), m.conditioning.to_string());
        kv.insert("model.base_width".into(), m.base_width.to_string());
        kv.insert(
            "model.channel_multipliers".into(),
            join(&m.channel_multipliers),
        );
        kv.insert(
            "model.attention_resolutions".into(),
            join(&m.attention_resolutions),
        );
        kv.insert("model.num_res_blocks".into(), m.num_res_blocks.to_string());
        kv.insert("model.embedding_dim".into(), m.embedding_dim.to_string());
        kv.insert(
            "model.embedding_constant".into(),
            m.embedding_constant.to_string(),
        );
        kv.insert("model.groups".into(), m.groups.to_string());
        kv.insert("model.heads".into(), m.heads.to_string());
        kv.insert("model.cond_width".into(), m.cond_width.to_string());

        let s = &self.schedule;
        kv.insert("schedule.kind".into(), s.kind.to_string());
        kv.insert("schedule.steps".into(), s.steps.to_string());
        kv.insert("schedule.beta_start".into(), s.beta_start.to_string());
        kv.insert("schedule.beta_end".into(), s.beta_end.to_string());

        let t = &self.train;
        kv.insert("train.p_mask".into(), t.p_mask.to_string());
        kv.insert("train.regime".into(), t.regime.to_string());
        kv.insert("train.batch_size".into(), t.batch_size.to_string());
        kv.insert("train.steps".into(), t.steps.to_string());
        kv.insert("train.lr".into(), t.lr.to_string());
        kv.insert("train.seed".into(), t.seed.to_string());
        kv.insert(
            "train.checkpoint_interval".into(),
            t.checkpoint_interval.to_string(),
        );
        kv.insert("train.ema".into(), t.ema.to_string());
        kv.insert("train.ema_decay".into(), t.ema_decay.to_string());
        kv.insert("train.clip_norm".into(), t.clip_norm.to_string());
        kv.insert("train.stride".into(), t.stride.to_string());

        let sp = &self.sample;
        kv.insert("sample.kind".into(), sp.kind.to_string());
        kv.insert("sample.steps".into(), sp.steps.to_string());
        kv.insert("sample.seed".into(), sp.seed.to_string());
        kv.insert("sample.task".into(), sp.task.to_string());
        kv.insert("sample.blocks".into(), sp.blocks.to_string());

        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parses flat dotted-key text on top of the defaults. Lines are
    /// `key = value`; `#` starts a comment; unknown keys are errors.
    pub fn from_flat_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_flat_text(text)?;
        Ok(cfg)
    }

    pub fn apply_flat_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                McvdError::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one dotted key from its string form (used by both config files
    /// and CLI overrides).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            v.parse()
                .map_err(|e| McvdError::config(format!("invalid value {v:?} for {key}: {e}")))
        }
        fn plist<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
        where
            T::Err: std::fmt::Display,
        {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| p(key, s.trim()))
                .collect()
        }
        match key {
            "data.height" => self.data.height = p(key, value)?,
            "data.width" => self.data.width = p(key, value)?,
            "data.channels" => self.data.channels = p(key, value)?,
            "data.num_shapes" => self.data.num_shapes = p(key, value)?,
            "data.shape_kinds" => self.data.shape_kinds = plist::<ShapeKind>(key, value)?,
            "data.shape_size" => self.data.shape_size = p(key, value)?,
            "data.min_speed" => self.data.min_speed = p(key, value)?,
            "data.max_speed" => self.data.max_speed = p(key, value)?,
            "data.bounce_prob" => self.data.bounce_prob = p(key, value)?,
            "data.video_len" => self.data.video_len = p(key, value)?,
            "data.seed" => self.data.seed = p(key, value)?,
            "layout.past" => self.layout.past = p(key, value)?,
            "layout.current" => self.layout.current = p(key, value)?,
            "layout.future" => self.layout.future = p(key, value)?,
            "layout.height" => self.layout.height = p(key, value)?,
            "layout.width" => self.layout.width = p(key, value)?,
            "layout.channels" => self.layout.channels = p(key, value)?,
            "model.conditioning" => self.model.conditioning = p(key, value)?,
            "model.base_width" => self.model.base_width = p(key, value)?,
            "model.channel_multipliers" => {
                self.model.channel_multipliers = plist(key, value)?;
            }
            "model.attention_resolutions" => {
                self.model.attention_resolutions = plist(key, value)?;
            }
            "model.num_res_blocks" => self.model.num_res_blocks = p(key, value)?,
            "model.embedding_dim" => self.model.embedding_dim = p(key, value)?,
            "model.embedding_constant" => self.model.embedding_constant = p(key, value)?,
            "model.groups" => self.model.groups = p(key, value)?,
            "model.heads" => self.model.heads = p(key, value)?,
            "model.cond_width" => self.model.cond_width = p(key, value)?,
            "schedule.kind" => self.schedule.kind = p(key, value)?,
            "schedule.steps" => self.schedule.steps = p(key, value)?,
            "schedule.beta_start" => self.schedule.beta_start = p(key, value)?,
            "schedule.beta_end" => self.schedule.beta_end = p(key, value)?,
            "train.p_mask" => self.train.p_mask = p(key, value)?,
            "train.regime" => self.train.regime = p(key, value)?,
            "train.batch_size" => self.train.batch_size = p(key, value)?,
            "train.steps" => self.train.steps = p(key, value)?,
            "train.lr" => self.train.lr = p(key, value)?,
            "train.seed" => self.train.seed = p(key, value)?,
            "train.checkpoint_interval" => self.train.checkpoint_interval = p(key, value)?,
            "train.ema" => self.train.ema = p(key, value)?,
            "train.ema_decay" => self.train.ema_decay = p(key, value)?,
            "train.clip_norm" => self.train.clip_norm = p(key, value)?,
            "train.stride" => self.train.stride = p(key, value)?,
            "sample.kind" => self.sample.kind = p(key, value)?,
            "sample.steps" => self.sample.steps = p(key, value)?,
            "sample.seed" => self.sample.seed = p(key, value)?,
            "sample.task" => self.sample.task = p(key, value)?,
            "sample.blocks" => self.sample.blocks = p(key, value)?,
            other => {
                return Err(McvdError::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical flat text.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_flat_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.train.p_mask = 0.25;
        cfg.model.channel_multipliers = vec![1, 2, 4];
        cfg.layout.future = 2;
        cfg.sample.task = TaskKind::Interpolation;
        let text = cfg.to_flat_text();
        let back = RunConfig::from_flat_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn comments_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.apply_flat_text("# comment\ntrain.p_mask = 0.75 # inline\n\n")
            .unwrap();
        assert_eq!(cfg.train.p_mask, 0.75);
        assert!(cfg.apply_flat_text("train.nope = 1").is_err());
        assert!(cfg.apply_flat_text("train.p_mask: 0.5").is_err());
        assert!(cfg.apply_flat_text("train.p_mask = abc").is_err());
    }

    #[test]
    fn validation_catches_regime_layout_conflicts() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.train.regime = MaskingRegime::PastOnly;
        cfg.layout.future = 2;
        cfg.data.video_len = 20;
        // Geometry still matches, but past-only forbids future conditioning.
        assert!(cfg.validate().is_err());
        cfg.layout.future = 0;
        cfg.validate().unwrap();
        cfg.train.regime = MaskingRegime::PastFuture;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.train.seed = 99;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
