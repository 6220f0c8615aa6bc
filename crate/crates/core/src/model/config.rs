use std::fmt;
use std::str::FromStr;

use toml::Value;

use crate::config_value::{
    as_bool, as_f64, as_list, as_parsed, as_str, as_usize, int, list, string, uint,
};
use crate::error::{Error, Result};
use crate::templates::{StaticFilter, TemplateKind};
use crate::tensor::{ReduceMode, LEAKY_SLOPE};

/// How a motion template is fused back into the frame features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Micro,
    Global,
    Adaptive,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Micro, FusionMode::Global, FusionMode::Adaptive];

    /// Micro and adaptive fusion operate frame by frame and therefore
    /// truncate the sequence to the template length.
    pub fn truncates(self) -> bool {
        !matches!(self, FusionMode::Global)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Micro => "micro",
            FusionMode::Global => "global",
            FusionMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(FusionMode::Micro),
            "global" => Ok(FusionMode::Global),
            "adaptive" => Ok(FusionMode::Adaptive),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (expected micro, global or adaptive)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BieConfig {
    /// `None` disables every behavioral information extractor.
    pub template: Option<TemplateKind>,
    pub fusion: FusionMode,
    /// Bit `s` enables the extractor of stage `s` (0-based).
    pub stages: u8,
}

impl BieConfig {
    pub fn enabled_at(&self, stage: usize) -> Option<TemplateKind> {
        self.template.filter(|_| self.stages & (1 << stage) != 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MfaConfig {
    /// When false the sequence is pooled directly by `final_reduce`.
    pub enabled: bool,
    pub window: usize,
    pub within: ReduceMode,
    pub final_reduce: ReduceMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: [usize; 3],
    pub height: usize,
    pub width: usize,
    pub slope: f64,
    pub bie: BieConfig,
    pub mfa: MfaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [32, 64, 128],
            height: 64,
            width: 44,
            slope: LEAKY_SLOPE,
            bie: BieConfig {
                template: Some(TemplateKind::StaticExcl(StaticFilter::Median)),
                fusion: FusionMode::Adaptive,
                stages: 0b111,
            },
            mfa: MfaConfig {
                enabled: true,
                window: 7,
                within: ReduceMode::Max,
                final_reduce: ReduceMode::Max,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c[0] == 0 || c[0] >= c[1] || c[1] >= c[2] {
            return Err(Error::Config(format!(
                "channel plan {c:?} must be positive and strictly increasing"
            )));
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(4)
            || !self.width.is_multiple_of(4)
        {
            return Err(Error::Config(format!(
                "input {}x{} must be positive and divisible by 4 (two 2x2 pools)",
                self.height, self.width
            )));
        }
        if self.bie.stages > 0b111 {
            return Err(Error::Config(format!(
                "bie.stages bitmask {} covers more than 3 stages",
                self.bie.stages
            )));
        }
        if self.mfa.enabled && self.mfa.window < 3 {
            return Err(Error::Config(format!(
                "mfa.window must be at least 3, got {}",
                self.mfa.window
            )));
        }
        for (key, mode) in [
            ("mfa.within", self.mfa.within),
            ("mfa.final", self.mfa.final_reduce),
        ] {
            if mode == ReduceMode::Median {
                return Err(Error::Config(format!("{key} must be max or mean")));
            }
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(Error::Config(format!(
                "model.slope {} must be >= 0",
                self.slope
            )));
        }
        Ok(())
    }

    /// Shape of the sequence-level feature map.
    pub fn feature_shape(&self) -> [usize; 3] {
        [self.channels[2], self.height / 4, self.width / 4]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape().iter().product()
    }

    /// Frames surviving each stage's fusion, given `n` input frames, or the
    /// stage (1-based) at which the sequence becomes too short.
    pub fn frames_after_stages(&self, n: usize) -> std::result::Result<usize, (usize, usize)> {
        let mut frames = n;
        for stage in 0..3 {
            if let Some(kind) = self.bie.enabled_at(stage) {
                if frames < kind.min_frames() {
                    return Err((stage + 1, kind.min_frames()));
                }
                if self.bie.fusion.truncates() {
                    frames = kind.output_len(frames);
                }
            }
        }
        Ok(frames)
    }

    /// Smallest input length the network accepts.
    pub fn min_frames(&self) -> usize {
        let need_at_end = if self.mfa.enabled { self.mfa.window } else { 1 };
        (1..)
            .find(|&n| matches!(self.frames_after_stages(n), Ok(m) if m >= need_at_end))
            .expect("some length always suffices")
    }

    /// Leading frames dropped by truncating fusion, and the surviving count:
    /// the BIE-free network run on `frames[lead..lead + len]` sees exactly the
    /// appearance path of this configuration.
    pub fn appearance_window(&self, n: usize) -> Option<(usize, usize)> {
        let mut lead = 0;
        let mut frames = n;
        for stage in 0..3 {
            if let Some(kind) = self.bie.enabled_at(stage) {
                if frames < kind.min_frames() {
                    return None;
                }
                if self.bie.fusion.truncates() {
                    lead += kind.center_offset();
                    frames = kind.output_len(frames);
                }
            }
        }
        Some((lead, frames))
    }
}

impl ModelConfig {
    pub const KEYS: [&'static str; 11] = [
        "model.channels",
        "model.height",
        "model.width",
        "model.slope",
        "bie.template",
        "bie.fusion",
        "bie.stages",
        "mfa.enabled",
        "mfa.window",
        "mfa.within",
        "mfa.final",
    ];

    /// Sets one dotted key; returns `Ok(false)` for keys this section does not own.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<bool> {
        match key {
            "model.channels" => {
                let c = as_list(key, v, as_usize)?;
                self.channels = c.try_into().map_err(|c: Vec<usize>| {
                    Error::Config(format!("`{key}` needs 3 entries, got {}", c.len()))
                })?;
            }
            "model.height" => self.height = as_usize(key, v)?,
            "model.width" => self.width = as_usize(key, v)?,
            "model.slope" => self.slope = as_f64(key, v)?,
            "bie.template" => {
                self.bie.template = match as_str(key, v)? {
                    "none" => None,
                    _ => Some(as_parsed(key, v)?),
                }
            }
            "bie.fusion" => self.bie.fusion = as_parsed(key, v)?,
            "bie.stages" => {
                self.bie.stages = u8::try_from(as_usize(key, v)?)
                    .map_err(|_| Error::Config(format!("`{key}` must be a bitmask below 8")))?
            }
            "mfa.enabled" => self.mfa.enabled = as_bool(key, v)?,
            "mfa.window" => self.mfa.window = as_usize(key, v)?,
            "mfa.within" => self.mfa.within = as_parsed(key, v)?,
            "mfa.final" => self.mfa.final_reduce = as_parsed(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        vec![
            ("model.channels", list(&self.channels, |c| uint(c as u64))),
            ("model.height", uint(self.height as u64)),
            ("model.width", uint(self.width as u64)),
            ("model.slope", Value::Float(self.slope)),
            (
                "bie.template",
                string(
                    self.bie
                        .template
                        .map_or("none".to_string(), |t| t.to_string()),
                ),
            ),
            ("bie.fusion", string(self.bie.fusion)),
            ("bie.stages", int(self.bie.stages)),
            ("mfa.enabled", Value::Boolean(self.mfa.enabled)),
            ("mfa.window", uint(self.mfa.window as u64)),
            ("mfa.within", string(self.mfa.within)),
            ("mfa.final", string(self.mfa.final_reduce)),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_feature_shape() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_shape(), [128, 16, 11]);
        assert_eq!(cfg.feature_len(), 22_528);
    }

    #[test]
    fn min_frames_accounts_for_truncation() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.min_frames(), 7);
        cfg.bie.template = Some(TemplateKind::MultiDiff);
        cfg.bie.fusion = FusionMode::Micro;
        assert_eq!(cfg.min_frames(), 13);
        assert_eq!(cfg.appearance_window(20), Some((3, 14)));
        cfg.bie.fusion = FusionMode::Global;
        assert_eq!(cfg.min_frames(), 7);
        assert_eq!(cfg.appearance_window(20), Some((0, 20)));
    }

    #[test]
    fn entries_round_trip() {
        let mut cfg = ModelConfig {
            channels: [8, 16, 32],
            ..Default::default()
        };
        cfg.bie.template = None;
        cfg.mfa.within = ReduceMode::Mean;
        let mut back = ModelConfig::default();
        for (k, v) in cfg.entries() {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.entries().len(), ModelConfig::KEYS.len());
        assert!(!back.set("train.iterations", &Value::Integer(1)).unwrap());
        assert!(back
            .set("bie.fusion", &Value::String("sideways".into()))
            .is_err());
    }

    #[test]
    fn rejects_bad_plans() {
        let cfg = ModelConfig {
            channels: [32, 32, 64],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            width: 42,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.mfa.window = 2;
        assert!(cfg.validate().is_err());
    }
}
