//! Model and training configuration.
//!
//! The training file is grouped the way the hyperparameter table of the
//! method groups them: values under `inherited` apply to every regime, and
//! each regime group overrides what it names.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wag::WagVariant;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
    /// Filled in from the vocabulary when a model is built.
    #[serde(default)]
    pub vocab_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub adapter_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            heads: 4,
            encoder_layers: 3,
            decoder_layers: 3,
            ffn: 128,
            max_positions: 128,
            vocab_size: 0,
            dropout: 0.1,
            attention_dropout: 0.0,
            adapter_dropout: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of {} heads",
                self.hidden, self.heads
            )));
        }
        if self.ffn == 0 || self.encoder_layers == 0 || self.decoder_layers == 0 || self.max_positions < 2 {
            return Err(Error::Config("layer counts, ffn size and max positions must be positive".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("adapter_dropout", self.adapter_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Baseline,
    Glm,
    Kd,
    Leakdistill,
}

impl Regime {
    pub fn uses_adapters(self) -> bool {
        matches!(self, Regime::Glm | Regime::Leakdistill)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Glm => "glm",
            Regime::Kd => "kd",
            Regime::Leakdistill => "leakdistill",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "glm" => Ok(Regime::Glm),
            "kd" => Ok(Regime::Kd),
            "leakdistill" => Ok(Regime::Leakdistill),
            _ => Err(Error::Config(format!("unknown regime `{s}` (baseline|glm|kd|leakdistill)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Const,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Train,
    Freeze,
}

/// A fixed leak-pass weight or a linear ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Fixed(f64),
    Schedule {
        start: f64,
        end: f64,
        /// `None` ramps over the whole run.
        total_steps: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inherited {
    pub optimizer: String,
    pub batch_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub grad_accum: usize,
    pub weight_decay: f64,
    pub lr: f64,
    pub beam_size: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_sched: Option<LrSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beam_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<BetaSetting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_temp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<DecoderMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wag: Option<WagVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detach_teacher: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterGroup {
    pub activation: String,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub dev_fraction: f64,
    pub smatch_restarts: usize,
    pub bucket_size: usize,
    pub model: Architecture,
    pub inherited: Inherited,
    pub spring: Overrides,
    pub adapter: AdapterGroup,
    pub glm: Overrides,
    pub kd: Overrides,
    pub leakdistill: Overrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            seed: 7,
            epochs: 30,
            dev_fraction: 0.1,
            smatch_restarts: 10,
            bucket_size: 200,
            model: Architecture {
                hidden: m.hidden,
                heads: m.heads,
                encoder_layers: m.encoder_layers,
                decoder_layers: m.decoder_layers,
                ffn: m.ffn,
                max_positions: m.max_positions,
            },
            inherited: Inherited {
                optimizer: "adam".into(),
                batch_size: 16,
                dropout: m.dropout,
                attention_dropout: m.attention_dropout,
                grad_accum: 1,
                weight_decay: 0.004,
                lr: 3e-4,
                beam_size: 4,
            },
            spring: Overrides {
                lr_sched: Some(LrSchedule::Linear),
                mask_range: Some([0.0, 0.15]),
                ..Default::default()
            },
            adapter: AdapterGroup {
                activation: "gelu".into(),
                dropout: m.adapter_dropout,
            },
            glm: Overrides {
                lr_sched: Some(LrSchedule::Linear),
                mask_range: Some([0.0, 0.15]),
                wag: Some(WagVariant::Full),
                ..Default::default()
            },
            kd: Overrides {
                alpha: Some(10.0),
                lr_sched: Some(LrSchedule::Linear),
                weight_decay: Some(0.0001),
                decoder: Some(DecoderMode::Freeze),
                mask_range: Some([0.0, 0.15]),
                kl_temp: Some(1.0),
                ..Default::default()
            },
            leakdistill: Overrides {
                lr_sched: Some(LrSchedule::Linear),
                kl_temp: Some(1.0),
                alpha: Some(20.0),
                beta: Some(BetaSetting::Schedule {
                    start: 90.0,
                    end: 10.0,
                    total_steps: None,
                }),
                mask_range: Some([0.0, 0.15]),
                wag: Some(WagVariant::Full),
                detach_teacher: Some(false),
                ..Default::default()
            },
        }
    }
}

/// Every setting a regime runs with, after overrides are applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSettings {
    pub regime: Regime,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub lr_sched: LrSchedule,
    pub weight_decay: f64,
    pub mask_range: [f64; 2],
    pub beam_size: usize,
    pub alpha: f64,
    pub beta: BetaSetting,
    pub kl_temp: f64,
    pub freeze_decoder: bool,
    pub wag: WagVariant,
    pub detach_teacher: bool,
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.check()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.inherited.optimizer != "adam" {
            return Err(Error::Config(format!(
                "optimizer `{}` is not available (adam)",
                self.inherited.optimizer
            )));
        }
        if self.adapter.activation != "gelu" {
            return Err(Error::Config(format!(
                "adapter activation `{}` is not available (gelu)",
                self.adapter.activation
            )));
        }
        if self.inherited.batch_size == 0 || self.inherited.grad_accum == 0 {
            return Err(Error::Config("batch size and gradient accumulation must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("dev_fraction must lie in [0, 1)".into()));
        }
        self.model_config().check()?;
        for r in [Regime::Baseline, Regime::Glm, Regime::Kd, Regime::Leakdistill] {
            let s = self.settings(r);
            let [lo, hi] = s.mask_range;
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("{}: mask range [{lo}, {hi}] is invalid", r.name())));
            }
            if s.alpha < 0.0 || s.kl_temp <= 0.0 || s.lr <= 0.0 || s.beam_size == 0 {
                return Err(Error::Config(format!(
                    "{}: need alpha >= 0, kl_temp > 0, lr > 0, beam_size >= 1",
                    r.name()
                )));
            }
            let beta_ok = match s.beta {
                BetaSetting::Fixed(b) => b >= 0.0,
                BetaSetting::Schedule { start, end, .. } => start >= 0.0 && end >= 0.0,
            };
            if !beta_ok {
                return Err(Error::Config(format!("{}: beta must be non-negative", r.name())));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            hidden: self.model.hidden,
            heads: self.model.heads,
            encoder_layers: self.model.encoder_layers,
            decoder_layers: self.model.decoder_layers,
            ffn: self.model.ffn,
            max_positions: self.model.max_positions,
            vocab_size: 0,
            dropout: self.inherited.dropout,
            attention_dropout: self.inherited.attention_dropout,
            adapter_dropout: self.adapter.dropout,
        }
    }

    /// Inherited values overridden by the regime's own group. The plain
    /// baseline reads the `spring` group.
    pub fn settings(&self, regime: Regime) -> RegimeSettings {
        let g = match regime {
            Regime::Baseline => &self.spring,
            Regime::Glm => &self.glm,
            Regime::Kd => &self.kd,
            Regime::Leakdistill => &self.leakdistill,
        };
        let base = &self.spring;
        RegimeSettings {
            regime,
            batch_size: self.inherited.batch_size,
            grad_accum: self.inherited.grad_accum,
            lr: g.lr.or(base.lr).unwrap_or(self.inherited.lr),
            lr_sched: g.lr_sched.or(base.lr_sched).unwrap_or(LrSchedule::Const),
            weight_decay: g.weight_decay.unwrap_or(self.inherited.weight_decay),
            mask_range: g.mask_range.or(base.mask_range).unwrap_or([0.0, 0.0]),
            beam_size: g.beam_size.or(base.beam_size).unwrap_or(self.inherited.beam_size),
            alpha: g.alpha.unwrap_or(0.0),
            beta: g.beta.unwrap_or(BetaSetting::Fixed(0.0)),
            kl_temp: g.kl_temp.unwrap_or(1.0),
            freeze_decoder: g.decoder == Some(DecoderMode::Freeze),
            wag: g.wag.unwrap_or(WagVariant::Full),
            detach_teacher: g.detach_teacher.unwrap_or(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_checks() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn regime_groups_override_inherited_values() {
        let c = TrainConfig::default();
        let kd = c.settings(Regime::Kd);
        assert_eq!((kd.alpha, kd.weight_decay, kd.freeze_decoder), (10.0, 0.0001, true));
        let ld = c.settings(Regime::Leakdistill);
        assert_eq!(ld.alpha, 20.0);
        assert_eq!(ld.weight_decay, 0.004);
        assert!(matches!(ld.beta, BetaSetting::Schedule { start, end, total_steps: None } if start == 90.0 && end == 10.0));
        assert_eq!(c.settings(Regime::Baseline).mask_range, [0.0, 0.15]);
    }

    #[test]
    fn unsupported_values_are_config_errors() {
        let mut c = TrainConfig::default();
        c.inherited.optimizer = "radam".into();
        assert!(matches!(c.check(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.model.heads = 5;
        assert!(matches!(c.check(), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        c.glm.mask_range = Some([0.3, 0.1]);
        assert!(matches!(c.check(), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json("{\"seed\": 1}"), Err(Error::Schema(_))));
    }
}
