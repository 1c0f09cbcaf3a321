use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// The six ablation variants; flags are (variational, skips, dilated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Vae,
    Dvae,
    Unet,
    Dunet,
    Dvunet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Ae,
        ModelKind::Vae,
        ModelKind::Dvae,
        ModelKind::Unet,
        ModelKind::Dunet,
        ModelKind::Dvunet,
    ];

    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            ModelKind::Ae => (false, false, false),
            ModelKind::Vae => (true, false, false),
            ModelKind::Dvae => (true, false, true),
            ModelKind::Unet => (false, true, false),
            ModelKind::Dunet => (false, true, true),
            ModelKind::Dvunet => (true, true, true),
        }
    }

    pub fn from_flags(variational: bool, skips: bool, dilated: bool) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.flags() == (variational, skips, dilated))
    }

    /// Structure tag such as `V+U+D`, or `-` for the plain autoencoder.
    pub fn structure(self) -> String {
        ModelConfig::new(self, 1, 1).structure()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ae => "AE",
            ModelKind::Vae => "VAE",
            ModelKind::Dvae => "DVAE",
            ModelKind::Unet => "UNET",
            ModelKind::Dunet => "DUNET",
            ModelKind::Dvunet => "DVUNET",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(ModelKind::Ae),
            "vae" => Ok(ModelKind::Vae),
            "dvae" => Ok(ModelKind::Dvae),
            "unet" => Ok(ModelKind::Unet),
            "dunet" => Ok(ModelKind::Dunet),
            "dvunet" => Ok(ModelKind::Dvunet),
            _ => Err(ModelError::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth_n: usize,
    pub base_channels: usize,
    pub variational: bool,
    pub skips: bool,
    pub dilated: bool,
    /// `(freq, time)` dilation per encoder block; used only when `dilated`.
    pub dilation_schedule: Vec<(usize, usize)>,
    pub kl_weight: f64,
    /// `(channels, height = bins, width = frames)`.
    pub input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn new(kind: ModelKind, depth_n: usize, base_channels: usize) -> Self {
        let (variational, skips, dilated) = kind.flags();
        Self {
            depth_n,
            base_channels,
            variational,
            skips,
            dilated,
            dilation_schedule: Self::default_dilations(depth_n),
            kl_weight: 1e-3,
            input_shape: [1, 512, 512],
        }
    }

    /// `2^min(i - 1, 4)` for block `i`, same in both axes.
    pub fn default_dilations(depth_n: usize) -> Vec<(usize, usize)> {
        (1..=depth_n)
            .map(|i| {
                let d = 1usize << (i - 1).min(4);
                (d, d)
            })
            .collect()
    }

    pub fn with_input(mut self, height: usize, width: usize) -> Self {
        self.input_shape = [1, height, width];
        self
    }

    /// Named variant for the flag combination; `None` for the two unnamed combinations.
    pub fn kind(&self) -> Option<ModelKind> {
        ModelKind::from_flags(self.variational, self.skips, self.dilated)
    }

    /// Structure tag derived from the flags.
    pub fn structure(&self) -> String {
        let parts: Vec<&str> = [(self.variational, "V"), (self.skips, "U"), (self.dilated, "D")]
            .into_iter()
            .filter_map(|(on, s)| on.then_some(s))
            .collect();
        if parts.is_empty() {
            "-".into()
        } else {
            parts.join("+")
        }
    }

    /// Number of leading blocks that double channels: `ceil((N + 1) / 2)`.
    pub fn standard_blocks(&self) -> usize {
        (self.depth_n + 2) / 2
    }

    /// Output channels of each encoder block.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let n_std = self.standard_blocks();
        (1..=self.depth_n)
            .map(|i| self.base_channels << (i.min(n_std) - 1))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth_n < 1 {
            return bad("depth_n must be >= 1".into());
        }
        if self.base_channels < 1 {
            return bad("base_channels must be >= 1".into());
        }
        let [c, h, w] = self.input_shape;
        if c != 1 {
            return bad(format!("input must have 1 channel, got {c}"));
        }
        let f = 1usize << self.depth_n;
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return bad(format!("input {h}x{w} not divisible by 2^depth_n = {f}"));
        }
        if self.dilated {
            if self.dilation_schedule.len() != self.depth_n {
                return bad(format!(
                    "dilation_schedule has {} entries, depth_n is {}",
                    self.dilation_schedule.len(),
                    self.depth_n
                ));
            }
            if self.dilation_schedule.iter().any(|&(a, b)| a == 0 || b == 0) {
                return bad("dilation rates must be >= 1".into());
            }
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return bad("kl_weight must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure_tags() {
        let tags: Vec<String> = ModelKind::ALL.iter().map(|k| k.structure()).collect();
        assert_eq!(tags, ["-", "V", "V+D", "U", "U+D", "V+U+D"]);
        assert_eq!("DVUNET".parse::<ModelKind>().unwrap(), ModelKind::Dvunet);
        assert!("resnet".parse::<ModelKind>().is_err());
    }

    #[test]
    fn channel_schedules() {
        assert_eq!(
            ModelConfig::new(ModelKind::Dunet, 4, 8).channel_schedule(),
            [8, 16, 32, 32]
        );
        assert_eq!(ModelConfig::new(ModelKind::Ae, 1, 4).channel_schedule(), [4]);
        assert_eq!(ModelConfig::new(ModelKind::Ae, 3, 8).channel_schedule(), [8, 16, 16]);
        assert_eq!(
            ModelConfig::new(ModelKind::Ae, 5, 16).channel_schedule(),
            [16, 32, 64, 64, 64]
        );
        assert_eq!(
            ModelConfig::default_dilations(6),
            [(1, 1), (2, 2), (4, 4), (8, 8), (16, 16), (16, 16)]
        );
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::new(ModelKind::Dvunet, 3, 8);
        assert!(c.validate().is_ok());
        c.dilation_schedule.pop();
        assert!(c.validate().is_err());
        let c = ModelConfig::new(ModelKind::Ae, 3, 8).with_input(20, 16);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new(ModelKind::Ae, 0, 8);
        c.dilation_schedule.clear();
        assert!(c.validate().is_err());
    }
}
