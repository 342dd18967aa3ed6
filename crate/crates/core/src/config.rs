//! Model configuration and the plain-text `key = value` format shared with
//! run configs and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{config, Error, Result};

/// Network variant. `Rfnet` is the attention-fused dual-branch model; the
/// others are the ablation baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Rfnet,
    SingleRgb,
    RgbdStack,
    RgbdConcat,
    RgbRgb,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SingleRgb,
        Variant::RgbdStack,
        Variant::RgbdConcat,
        Variant::RgbRgb,
        Variant::Rfnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rfnet => "rfnet",
            Variant::SingleRgb => "single_rgb",
            Variant::RgbdStack => "rgbd_stack",
            Variant::RgbdConcat => "rgbd_concat",
            Variant::RgbRgb => "rgb_rgb",
        }
    }

    pub fn is_dual_branch(self) -> bool {
        matches!(self, Variant::Rfnet | Variant::RgbdConcat | Variant::RgbRgb)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub decoder_width: usize,
    pub spp_grids: Vec<usize>,
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl ModelConfig {
    /// ResNet-18 widths, 128-wide decoder, 19 + 1 classes at 768 x 768.
    pub fn full(variant: Variant) -> Self {
        Self {
            variant,
            stage_widths: [64, 128, 256, 512],
            blocks_per_stage: 2,
            decoder_width: 128,
            spp_grids: vec![1, 2, 4, 8],
            num_classes: 20,
            input_height: 768,
            input_width: 768,
        }
    }

    /// Eighth-width network for CPU experiments on 64 x 64 inputs.
    pub fn toy(variant: Variant, num_classes: usize) -> Self {
        Self {
            variant,
            stage_widths: [8, 16, 32, 64],
            blocks_per_stage: 2,
            decoder_width: 32,
            spp_grids: vec![1, 2],
            num_classes,
            input_height: 64,
            input_width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0
            || self.input_width == 0
            || self.input_height % 32 != 0
            || self.input_width % 32 != 0
        {
            return config(format!(
                "input {}x{} must be positive multiples of 32",
                self.input_height, self.input_width
            ));
        }
        if self.num_classes < 2 {
            return config("num_classes must be at least 2");
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage == 0 {
            return config("stage widths and blocks_per_stage must be positive");
        }
        if self.decoder_width == 0 {
            return config("decoder_width must be positive");
        }
        let levels = self.spp_grids.len();
        if levels == 0 || self.decoder_width % levels != 0 {
            return config(format!(
                "decoder_width {} must split evenly over {levels} pyramid levels",
                self.decoder_width
            ));
        }
        let plane = (self.input_height / 32).min(self.input_width / 32);
        if let Some(g) = self.spp_grids.iter().find(|&&g| g == 0 || g > plane) {
            return config(format!("pyramid grid {g} exceeds the {plane}-cell encoder output"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "variant = {}\nstage_widths = {}\nblocks_per_stage = {}\ndecoder_width = {}\n\
             spp_grids = {}\nnum_classes = {}\ninput_height = {}\ninput_width = {}\n",
            self.variant,
            join(&self.stage_widths),
            self.blocks_per_stage,
            self.decoder_width,
            join(&self.spp_grids),
            self.num_classes,
            self.input_height,
            self.input_width,
        )
    }

    /// Reads model keys from `kv`, starting from the toy preset.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let variant = match kv.get("variant") {
            Some(v) => v.parse()?,
            None => Variant::Rfnet,
        };
        let mut cfg = Self::toy(variant, kv.parse_or("num_classes", 5)?);
        if let Some(w) = kv.get("stage_widths") {
            let w = parse_list(w)?;
            cfg.stage_widths = w
                .try_into()
                .map_err(|_| Error::Config("stage_widths needs exactly 4 entries".into()))?;
        }
        cfg.blocks_per_stage = kv.parse_or("blocks_per_stage", cfg.blocks_per_stage)?;
        cfg.decoder_width = kv.parse_or("decoder_width", cfg.decoder_width)?;
        if let Some(g) = kv.get("spp_grids") {
            cfg.spp_grids = parse_list(g)?;
        }
        cfg.input_height = kv.parse_or("input_height", cfg.input_height)?;
        cfg.input_width = kv.parse_or("input_width", cfg.input_width)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad integer {p:?} in list {s:?}")))
        })
        .collect()
}

/// Ordered `key = value` pairs. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return config(format!("line {}: expected `key = value`, got {raw:?}", i + 1));
            };
            let key = k.trim();
            if key.is_empty() {
                return config(format!("line {}: empty key", i + 1));
            }
            if map.insert(key.to_string(), v.trim().to_string()).is_some() {
                return config(format!("line {}: duplicate key {key:?}", i + 1));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_of_model_config() {
        let mut cfg = ModelConfig::toy(Variant::RgbdConcat, 6);
        cfg.spp_grids = vec![1];
        let back = ModelConfig::from_kv(&KeyValues::parse(&cfg.to_kv()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ModelConfig::toy(Variant::Rfnet, 5);
        cfg.input_height = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy(Variant::Rfnet, 1);
        assert!(cfg.validate().is_err());
        cfg.num_classes = 3;
        cfg.spp_grids = vec![1, 2, 4];
        assert!(cfg.validate().is_err(), "grid 4 exceeds the 2x2 encoder output");
        assert!(ModelConfig::full(Variant::Rfnet).validate().is_ok());
    }

    #[test]
    fn kv_rejects_garbage() {
        assert!(KeyValues::parse("a = 1\nno equals here").is_err());
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        let kv = KeyValues::parse("# comment\n  epochs = 3 # trailing\n").unwrap();
        assert_eq!(kv.parse_or("epochs", 0usize).unwrap(), 3);
        assert!("nope".parse::<Variant>().is_err());
    }
}
