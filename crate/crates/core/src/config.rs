//! Plain-text run configuration: UTF-8 `key = value` lines, `#` comments.
//! Unknown and repeated keys are rejected. [`RunConfig::to_text`] writes
//! every key in a fixed order, and parsing that text gives back the same
//! configuration.

use std::path::Path;
use std::str::FromStr;

use idsr_tensor::RmsPropConfig;

use crate::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::losses::{JointWeights, SsimConstants};
use crate::network::{ExtractorConfig, GeneratorConfig};
use crate::training::{LossKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train_fraction: f64,
    /// `None` pairs every probe with every different-identity gallery.
    pub negatives_per_probe: Option<usize>,
    pub generator: GeneratorConfig,
    pub extractor: ExtractorConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        Self {
            data,
            train_fraction: 0.75,
            negatives_per_probe: None,
            generator: GeneratorConfig::default(),
            extractor: ExtractorConfig::default(),
            train: TrainConfig {
                seed: data.seed,
                ..TrainConfig::default()
            },
        }
    }
}

const KEYS: [&str; 31] = [
    "ids",
    "per_id",
    "hr_size",
    "scale",
    "blur_sigma",
    "seed",
    "train_fraction",
    "negatives_per_probe",
    "gen_channels",
    "gen_head_kernel",
    "gen_refine_kernel",
    "gen_tail_kernel",
    "gen_slope",
    "gen_bicubic_skip",
    "ext_channels",
    "ext_kernel",
    "descriptor_dim",
    "ext_slope",
    "loss",
    "lr",
    "lr_decay",
    "rho",
    "epsilon",
    "batch_size",
    "extractor_epochs",
    "generator_epochs",
    "lambda1",
    "lambda2",
    "alpha",
    "beta",
    "ssim_patch",
];

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Config { line: n + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(err(format!("unknown key `{key}`")));
            }
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|r| err(format!("{key}: {r}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, reason } => Error::Config {
                line,
                reason: format!("{}: {reason}", path.display()),
            },
            other => other,
        })
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (g, e, t) = (&mut self.generator, &mut self.extractor, &mut self.train);
        match key {
            "ids" => self.data.ids = parse(v)?,
            "per_id" => self.data.per_id = parse(v)?,
            "hr_size" => self.data.hr_size = parse(v)?,
            "scale" => self.data.scale = parse(v)?,
            "blur_sigma" => self.data.blur_sigma = parse(v)?,
            "seed" => self.data.seed = parse(v)?,
            "train_fraction" => self.train_fraction = parse(v)?,
            "negatives_per_probe" => self.negatives_per_probe = if v == "all" { None } else { Some(parse(v)?) },
            "gen_channels" => g.channels = parse_list(v)?,
            "gen_head_kernel" => g.head_kernel = parse(v)?,
            "gen_refine_kernel" => g.refine_kernel = if v == "none" { None } else { Some(parse(v)?) },
            "gen_tail_kernel" => g.tail_kernel = parse(v)?,
            "gen_slope" => g.leaky_slope = parse(v)?,
            "gen_bicubic_skip" => g.bicubic_skip = parse(v)?,
            "ext_channels" => e.channels = parse_list(v)?,
            "ext_kernel" => e.kernel = parse(v)?,
            "descriptor_dim" => e.descriptor_dim = parse(v)?,
            "ext_slope" => e.leaky_slope = parse(v)?,
            "loss" => t.loss = v.parse().map_err(|e: Error| e.to_string())?,
            "lr" => t.optimizer.lr = parse(v)?,
            "lr_decay" => t.optimizer.lr_decay = parse(v)?,
            "rho" => t.optimizer.rho = parse(v)?,
            "epsilon" => t.optimizer.epsilon = parse(v)?,
            "batch_size" => t.batch_size = parse(v)?,
            "extractor_epochs" => t.extractor_epochs = parse(v)?,
            "generator_epochs" => t.generator_epochs = parse(v)?,
            "lambda1" => t.lambda1 = parse(v)?,
            "lambda2" => t.lambda2 = parse(v)?,
            "alpha" => t.weights.alpha = parse(v)?,
            "beta" => t.weights.beta = parse(v)?,
            "ssim_patch" => t.ssim.patch = parse(v)?,
            _ => unreachable!("key list checked by caller"),
        }
        self.sync();
        Ok(())
    }

    /// Propagates values shared between sections.
    fn sync(&mut self) {
        self.generator.scale = self.data.scale;
        self.extractor.input_height = self.data.hr_size;
        self.extractor.input_width = self.data.hr_size;
        self.train.seed = self.data.seed;
    }

    fn get(&self, key: &str) -> String {
        let (g, e, t) = (&self.generator, &self.extractor, &self.train);
        match key {
            "ids" => self.data.ids.to_string(),
            "per_id" => self.data.per_id.to_string(),
            "hr_size" => self.data.hr_size.to_string(),
            "scale" => self.data.scale.to_string(),
            "blur_sigma" => self.data.blur_sigma.to_string(),
            "seed" => self.data.seed.to_string(),
            "train_fraction" => self.train_fraction.to_string(),
            "negatives_per_probe" => self.negatives_per_probe.map_or("all".into(), |k| k.to_string()),
            "gen_channels" => list(&g.channels),
            "gen_head_kernel" => g.head_kernel.to_string(),
            "gen_refine_kernel" => g.refine_kernel.map_or("none".into(), |k| k.to_string()),
            "gen_tail_kernel" => g.tail_kernel.to_string(),
            "gen_slope" => g.leaky_slope.to_string(),
            "gen_bicubic_skip" => g.bicubic_skip.to_string(),
            "ext_channels" => list(&e.channels),
            "ext_kernel" => e.kernel.to_string(),
            "descriptor_dim" => e.descriptor_dim.to_string(),
            "ext_slope" => e.leaky_slope.to_string(),
            "loss" => t.loss.to_string(),
            "lr" => t.optimizer.lr.to_string(),
            "lr_decay" => t.optimizer.lr_decay.to_string(),
            "rho" => t.optimizer.rho.to_string(),
            "epsilon" => t.optimizer.epsilon.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "extractor_epochs" => t.extractor_epochs.to_string(),
            "generator_epochs" => t.generator_epochs.to_string(),
            "lambda1" => t.lambda1.to_string(),
            "lambda2" => t.lambda2.to_string(),
            "alpha" => t.weights.alpha.to_string(),
            "beta" => t.weights.beta.to_string(),
            "ssim_patch" => t.ssim.patch.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.ids == 0 || d.per_id == 0 || d.scale == 0 || d.hr_size % d.scale != 0 {
            return Err(Error::Invalid(format!(
                "need ids, per_id > 0 and hr_size {} divisible by scale {}",
                d.hr_size, d.scale
            )));
        }
        if !(d.blur_sigma > 0.0) {
            return Err(Error::Invalid(format!("blur_sigma must be positive, got {}", d.blur_sigma)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Invalid(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        JointWeights::new(self.train.weights.alpha, self.train.weights.beta)?;
        SsimConstants::new(self.train.ssim.c1, self.train.ssim.c2, self.train.ssim.patch)?;
        self.train.validate()?;
        self.generator.validate()?;
        self.extractor.validate()
    }

    pub fn optimizer(&self) -> RmsPropConfig {
        self.train.optimizer
    }

    /// Training settings with the loss replaced.
    pub fn train_with_loss(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            loss,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_text_is_a_fixed_point() {
        let text = RunConfig::default().to_text();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.to_text(), text);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# experiment\nids = 8  # small\nloss = joint\nnegatives_per_probe = 3\nscale = 4\ngen_channels = 4,4,4\n").unwrap();
        assert_eq!(cfg.data.ids, 8);
        assert_eq!(cfg.train.loss, LossKind::Joint);
        assert_eq!(cfg.negatives_per_probe, Some(3));
        assert_eq!(cfg.generator.scale, 4);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        for (text, line) in [("bogus = 1", 1), ("ids = 3\nids = 4", 2), ("\nlr", 2), ("lr = fast", 1)] {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(RunConfig::parse("scale = 3").is_err());
    }
}
