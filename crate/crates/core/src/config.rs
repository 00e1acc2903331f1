//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key is optional and falls back to its default. Rendering
//! writes every key once, in declaration order, so parse → render → parse is
//! a fixed point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::ReferencePairing;
use crate::diffusion::GuidanceMode;
use crate::error::{Error, Result};

/// A value that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render_value(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse().map_err(|_| Error::Config(format!("cannot parse {s:?} as {}", stringify!($t))))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u64, usize, f64, bool);

impl ConfigValue for Option<f64> {
    fn parse_value(s: &str) -> Result<Self> {
        if s == "none" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }

    fn render_value(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

impl ConfigValue for ReferencePairing {
    fn parse_value(s: &str) -> Result<Self> {
        ReferencePairing::parse(s).map_err(|e| Error::Config(e.to_string()))
    }

    fn render_value(&self) -> String {
        self.name().to_string()
    }
}

impl ConfigValue for GuidanceMode {
    fn parse_value(s: &str) -> Result<Self> {
        GuidanceMode::parse(s)
    }

    fn render_value(&self) -> String {
        self.name().to_string()
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $name:ident: $t:ty = $default:expr,)*) => {
        /// Every tunable of a run. See the module docs for the file format.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $t,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($name) => self.$name = <$t as ConfigValue>::parse_value(value)
                        .map_err(|e| Error::Config(format!("{key}: {e}")))?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Every key in declaration order.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($name), self.$name.render_value());)*
                out
            }
        }
    };
}

run_config! {
    /// Master seed; every random stream derives from it.
    seed: u64 = 0,
    image_size: usize = 32,
    normals_per_texture: usize = 24,
    anomalies_per_category: usize = 24,
    train_fraction: f64 = 1.0 / 3.0,
    reference_pairing: ReferencePairing = ReferencePairing::SameTypeRandom,
    timesteps: usize = 1000,
    beta_min: f64 = 1e-4,
    beta_max: f64 = 0.02,
    ddim_steps: usize = 30,
    /// Clip for the predicted clean latent during sampling.
    clamp_x0: Option<f64> = None,
    /// Pixels per latent cell side.
    latent_factor: usize = 2,
    base_width: usize = 32,
    mid_width: usize = 64,
    text_width: usize = 32,
    time_width: usize = 32,
    vlm_width: usize = 32,
    vlm_heads: usize = 2,
    vlm_layers: usize = 2,
    vlm_patch: usize = 4,
    vlm_visual_scale: f64 = 0.05,
    vlm_attention_gain: f64 = 5.0,
    /// Width of the cross-modal feature.
    feature_width: usize = 32,
    /// Blend weight of the adapter branch.
    gamma: f64 = 1.0,
    /// Guidance descent steps per sample.
    asea_steps: usize = 3,
    asea_alpha: f64 = 0.1,
    /// Carry each sample's guidance variable across training iterations
    /// instead of restarting from zero.
    persistent_guidance: bool = false,
    pretrain_steps: usize = 3000,
    /// Peak pre-training rate; it decays to zero on a cosine.
    pretrain_learning_rate: f64 = 1e-3,
    /// Decay of the weight average kept during pre-training; 0 keeps the
    /// last iterate instead.
    pretrain_ema: f64 = 0.999,
    adapter_steps: usize = 1000,
    learning_rate: f64 = 1e-4,
    weight_decay: f64 = 0.01,
    batch_size: usize = 16,
    /// Probability of each of the three dropout events.
    dropout: f64 = 0.05,
    guidance_scale: f64 = 7.5,
    guidance_mode: GuidanceMode = GuidanceMode::Joint,
    /// Anomalies generated by `sample`; `eval` trains the downstream
    /// segmenter on all of them.
    samples: usize = 500,
    /// Anomalies regenerated per row of the `eval` sweep.
    sweep_samples: usize = 50,
    segmenter_width: usize = 16,
    segmenter_steps: usize = 600,
    segmenter_learning_rate: f64 = 2e-3,
    /// Run the guidance-steps and blend-weight sweep during `eval`.
    eval_sweep: bool = true,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    n + 1
                )));
            }
            config.set(key, value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// First 16 hex digits of the SHA-256 of the rendered configuration.
    pub fn hash(&self) -> String {
        Sha256::digest(self.render().as_bytes())[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("timesteps", self.timesteps),
            ("ddim_steps", self.ddim_steps),
            ("latent_factor", self.latent_factor),
            ("batch_size", self.batch_size),
            ("vlm_patch", self.vlm_patch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.latent_factor)
            || !(self.image_size / self.latent_factor).is_multiple_of(2)
        {
            return Err(Error::Config(
                "image_size / latent_factor must be a positive even number".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.pretrain_ema) {
            return Err(Error::Config(format!(
                "pretrain_ema {} outside [0, 1)",
                self.pretrain_ema
            )));
        }
        if !(0.0..=1.0 / 3.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1/3]",
                self.dropout
            )));
        }
        let finite = [
            self.gamma,
            self.asea_alpha,
            self.learning_rate,
            self.pretrain_learning_rate,
            self.weight_decay,
            self.guidance_scale,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("numeric settings must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = RunConfig::default();
        let text = c.render();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.render(), text);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        assert_eq!(back.hash(), c.hash());
        assert_ne!(
            RunConfig {
                seed: 1,
                ..c.clone()
            }
            .hash(),
            c.hash()
        );
    }

    #[test]
    fn partial_files_and_errors() {
        let c =
            RunConfig::parse("# comment\n\nseed = 9\nclamp_x0 = 1.5\nguidance_mode = separate\n")
                .unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.clamp_x0, Some(1.5));
        assert_eq!(c.guidance_mode, GuidanceMode::Separate);
        assert_eq!(c.gamma, 1.0);
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("dropout = 0.5").is_err());
        assert!(RunConfig::parse("image_size = 34").is_err());
    }

    #[test]
    fn reference_defaults() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.asea_steps, c.ddim_steps), (1.0, 3, 30));
        assert_eq!(
            (c.learning_rate, c.weight_decay, c.dropout, c.guidance_scale),
            (1e-4, 0.01, 0.05, 7.5)
        );
    }
}
