//! Model and training configuration with a flat `key = value` text form.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::encoder::EncoderDims;
use crate::error::{Error, Result};
use crate::generator::{AttentionMode, GeneratorKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_points: usize,
    pub sa1_points: usize,
    pub sa1_channels: usize,
    pub patch_points: usize,
    pub patch_channels: usize,
    pub seed_points: usize,
    pub seed_channels: usize,
    pub coarse_points: usize,
    pub channels: usize,
    pub rates: Vec<usize>,
    pub k_group: usize,
    pub k_attention: usize,
    pub k_interp: usize,
    pub seed_attention: AttentionMode,
    pub layer_attention: AttentionMode,
    pub generator: GeneratorKind,
    pub precision: Precision,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size model: 2048 input points, 128 patches, 256 seeds, 512
    /// coarse points and rates 1, 4, 8.
    pub fn paper() -> Self {
        ModelConfig {
            input_points: 2048,
            sa1_points: 512,
            sa1_channels: 128,
            patch_points: 128,
            patch_channels: 256,
            seed_points: 256,
            seed_channels: 128,
            coarse_points: 512,
            channels: 128,
            rates: vec![1, 4, 8],
            k_group: 16,
            k_attention: 16,
            k_interp: 3,
            seed_attention: AttentionMode::None,
            layer_attention: AttentionMode::Softmax,
            generator: GeneratorKind::UpTrans,
            precision: Precision::F32,
            seed: 0,
        }
    }

    /// [`ModelConfig::paper`] with rates 1, 4, 4 (8192 output points).
    pub fn shapenet55() -> Self {
        ModelConfig {
            rates: vec![1, 4, 4],
            ..ModelConfig::paper()
        }
    }

    /// Laptop-scale model: 512 points in, 512 out.
    pub fn desk() -> Self {
        ModelConfig {
            input_points: 512,
            sa1_points: 256,
            sa1_channels: 32,
            patch_points: 64,
            patch_channels: 64,
            seed_points: 128,
            seed_channels: 32,
            coarse_points: 128,
            channels: 32,
            rates: vec![1, 2, 2],
            ..ModelConfig::paper()
        }
    }

    /// Smallest useful model, for gradient checks and smoke tests.
    pub fn tiny() -> Self {
        ModelConfig {
            input_points: 48,
            sa1_points: 24,
            sa1_channels: 6,
            patch_points: 8,
            patch_channels: 8,
            seed_points: 16,
            seed_channels: 6,
            coarse_points: 16,
            channels: 6,
            rates: vec![1, 2],
            k_group: 4,
            k_attention: 4,
            k_interp: 3,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(ModelConfig::tiny()),
            "paper" => Ok(ModelConfig::paper()),
            "shapenet55" => Ok(ModelConfig::shapenet55()),
            "desk" => Ok(ModelConfig::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn seed_rate(&self) -> usize {
        self.seed_points / self.patch_points.max(1)
    }

    /// Point counts `N_0, N_1, ..., N_L`.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.coarse_points];
        for &r in &self.rates {
            sizes.push(sizes.last().unwrap() * r);
        }
        sizes
    }

    pub fn output_points(&self) -> usize {
        *self.stage_sizes().last().unwrap()
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            sa1_points: self.sa1_points,
            sa1_channels: self.sa1_channels,
            patch_points: self.patch_points,
            patch_channels: self.patch_channels,
            k_group: self.k_group,
            k_attention: self.k_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("input_points", self.input_points),
            ("sa1_points", self.sa1_points),
            ("sa1_channels", self.sa1_channels),
            ("patch_points", self.patch_points),
            ("patch_channels", self.patch_channels),
            ("seed_points", self.seed_points),
            ("seed_channels", self.seed_channels),
            ("coarse_points", self.coarse_points),
            ("channels", self.channels),
            ("k_group", self.k_group),
            ("k_attention", self.k_attention),
            ("k_interp", self.k_interp),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.rates.is_empty() || self.rates.contains(&0) {
            return bad("rates must be a nonempty list of positive integers".into());
        }
        if self.sa1_points > self.input_points {
            return bad("sa1_points exceeds input_points".into());
        }
        if self.patch_points > self.sa1_points {
            return bad("patch_points exceeds sa1_points".into());
        }
        if self.seed_points % self.patch_points != 0 {
            return bad("seed_points must be a multiple of patch_points".into());
        }
        if self.coarse_points > self.seed_points + self.input_points {
            return bad("coarse_points exceeds seeds plus input points".into());
        }
        if self.k_group > self.input_points.min(self.sa1_points) {
            return bad("k_group exceeds the points available for grouping".into());
        }
        if self.k_interp > self.seed_points {
            return bad("k_interp exceeds seed_points".into());
        }
        if self.k_attention > self.coarse_points.min(self.patch_points) {
            return bad("k_attention exceeds coarse_points or patch_points".into());
        }
        self.seed_attention.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.layer_attention.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Sets one field from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "input_points" => self.input_points = parse(key, v)?,
            "sa1_points" => self.sa1_points = parse(key, v)?,
            "sa1_channels" => self.sa1_channels = parse(key, v)?,
            "patch_points" => self.patch_points = parse(key, v)?,
            "patch_channels" => self.patch_channels = parse(key, v)?,
            "seed_points" => self.seed_points = parse(key, v)?,
            "seed_channels" => self.seed_channels = parse(key, v)?,
            "coarse_points" => self.coarse_points = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "rates" => {
                self.rates = v
                    .split(',')
                    .map(|r| parse(key, r.trim()))
                    .collect::<Result<_>>()?
            }
            "k_group" => self.k_group = parse(key, v)?,
            "k_attention" => self.k_attention = parse(key, v)?,
            "k_interp" => self.k_interp = parse(key, v)?,
            "seed_attention" => self.seed_attention = v.parse()?,
            "layer_attention" => self.layer_attention = v.parse()?,
            "generator" => self.generator = v.parse()?,
            "precision" => self.precision = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "input_points",
            "sa1_points",
            "sa1_channels",
            "patch_points",
            "patch_channels",
            "seed_points",
            "seed_channels",
            "coarse_points",
            "channels",
            "rates",
            "k_group",
            "k_attention",
            "k_interp",
            "seed_attention",
            "layer_attention",
            "generator",
            "precision",
            "seed",
        ]
    }

    pub fn to_text(&self) -> String {
        let rates: Vec<String> = self.rates.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("input_points", self.input_points.to_string());
        put("sa1_points", self.sa1_points.to_string());
        put("sa1_channels", self.sa1_channels.to_string());
        put("patch_points", self.patch_points.to_string());
        put("patch_channels", self.patch_channels.to_string());
        put("seed_points", self.seed_points.to_string());
        put("seed_channels", self.seed_channels.to_string());
        put("coarse_points", self.coarse_points.to_string());
        put("channels", self.channels.to_string());
        put("rates", rates.join(","));
        put("k_group", self.k_group.to_string());
        put("k_attention", self.k_attention.to_string());
        put("k_interp", self.k_interp.to_string());
        put("seed_attention", self.seed_attention.to_string());
        put("layer_attention", self.layer_attention.to_string());
        put("generator", self.generator.to_string());
        put("precision", self.precision.to_string());
        put("seed", self.seed.to_string());
        s
    }

    /// Reads a full config: an optional `preset` line first, then overrides.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = match entries.iter().find(|e| e.key == "preset") {
            Some(e) => ModelConfig::preset(&e.value)?,
            None => ModelConfig::desk(),
        };
        for e in entries.iter().filter(|e| e.key != "preset") {
            cfg.set(&e.key, &e.value).map_err(|err| at_line(e.line, err))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn at_line(line: usize, err: Error) -> Error {
    match err {
        Error::Config(m) => Error::Config(format!("line {line}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Multiply the learning rate by `lr_decay` every this many steps.
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Samples whose gradients are averaged per update.
    pub accumulate: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            learning_rate: 1e-3,
            lr_decay: 0.1,
            decay_every: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            accumulate: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let decays = if self.decay_every == 0 { 0 } else { step / self.decay_every };
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.accumulate == 0 {
            return bad("accumulate must be at least 1");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "steps" => self.steps = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "decay_every" => self.decay_every = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "accumulate" => self.accumulate = parse(key, v)?,
            "train_seed" => self.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        &[
            "steps",
            "learning_rate",
            "lr_decay",
            "decay_every",
            "beta1",
            "beta2",
            "adam_eps",
            "accumulate",
            "train_seed",
        ]
    }

    pub fn to_text(&self) -> String {
        format!(
            "steps = {}\nlearning_rate = {}\nlr_decay = {}\ndecay_every = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\naccumulate = {}\ntrain_seed = {}\n",
            self.steps,
            self.learning_rate,
            self.lr_decay,
            self.decay_every,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.accumulate,
            self.seed
        )
    }
}

/// One `key = value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits config text into entries, skipping blanks and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<ConfigEntry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push(ConfigEntry {
            line: i + 1,
            key: k.trim().to_string(),
            value: v.trim().to_string(),
        });
    }
    Ok(out)
}

/// Model and training settings read from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunSettings {
    /// Starts from the `preset` named in the text (desk by default) and
    /// applies every other entry; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut model = match entries.iter().find(|e| e.key == "preset") {
            Some(e) => ModelConfig::preset(&e.value)?,
            None => ModelConfig::desk(),
        };
        let mut train = TrainConfig::default();
        for e in entries.iter().filter(|e| e.key != "preset") {
            let r = if ModelConfig::keys().contains(&e.key.as_str()) {
                model.set(&e.key, &e.value)
            } else if TrainConfig::keys().contains(&e.key.as_str()) {
                train.set(&e.key, &e.value)
            } else {
                Err(Error::Config(format!("unknown key {:?}", e.key)))
            };
            r.map_err(|err| at_line(e.line, err))?;
        }
        Ok(RunSettings { model, train })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        format!("{}{}", self.model.to_text(), self.train.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_report_stage_sizes() {
        assert_eq!(ModelConfig::paper().stage_sizes(), vec![512, 512, 2048, 16384]);
        assert_eq!(ModelConfig::shapenet55().output_points(), 8192);
        assert_eq!(ModelConfig::desk().stage_sizes(), vec![128, 128, 256, 512]);
        for c in [ModelConfig::paper(), ModelConfig::shapenet55(), ModelConfig::desk()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::paper().seed_rate(), 2);
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::desk();
        c.layer_attention = AttentionMode::Scaled(2.5);
        c.generator = GeneratorKind::Folding;
        let text = format!("preset = paper\n{}", c.to_text());
        assert_eq!(ModelConfig::from_text(&text).unwrap(), c);

        let s = RunSettings {
            model: c,
            train: TrainConfig {
                learning_rate: 3e-4,
                ..Default::default()
            },
        };
        assert_eq!(RunSettings::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = RunSettings::from_text("channels = 8\nwidth = 3\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(RunSettings::from_text("rates = 1,x").is_err());
        assert!(RunSettings::from_text("no equals sign").is_err());
        let mut c = ModelConfig::desk();
        c.rates.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn step_decay() {
        let t = TrainConfig {
            decay_every: 10,
            ..Default::default()
        };
        assert_eq!(t.learning_rate_at(9), 1e-3);
        assert!((t.learning_rate_at(10) - 1e-4).abs() < 1e-18);
    }
}
