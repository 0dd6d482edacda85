//! Run configuration: a line-oriented `key = value` file. `#` starts a
//! comment. Unknown keys are errors. The canonical form lists every key in
//! sorted order; its SHA-256 (without `out`) is embedded in checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use occflow_core::cowmask::CowmaskParams;
use occflow_core::data::SceneConfig;
use occflow_core::flow::TransformKind;
use occflow_core::losses::LossConfig;
use occflow_core::model::ModelConfig;
use rand::Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Baseline,
    Oc,
    Tc,
    Octc,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Baseline, Strategy::Oc, Strategy::Tc, Strategy::Octc];

    pub fn occlusion(self) -> bool {
        matches!(self, Strategy::Oc | Strategy::Octc)
    }

    pub fn transformation(self) -> bool {
        matches!(self, Strategy::Tc | Strategy::Octc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Oc => "oc",
            Strategy::Tc => "tc",
            Strategy::Octc => "octc",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| anyhow!("unknown strategy `{s}` (baseline, oc, tc, octc)"))
    }
}

/// Update rule applied after clipping. Both use a constant step size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Heavy-ball momentum SGD.
    Sgd,
    /// Adam with `beta1 = momentum`, `beta2 = 0.999`.
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

impl FromStr for Optimizer {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => bail!("unknown optimizer `{other}` (sgd, adam)"),
        }
    }
}

/// Transform families available to transformation consistency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum TransformFamily {
    HFlip,
    /// One of the three quarter-turn rotations, chosen uniformly.
    Rot,
}

impl TransformFamily {
    pub fn name(self) -> &'static str {
        match self {
            TransformFamily::HFlip => "hflip",
            TransformFamily::Rot => "rot",
        }
    }

    pub fn sample(self, rng: &mut impl Rng) -> TransformKind {
        match self {
            TransformFamily::HFlip => TransformKind::HFlip,
            TransformFamily::Rot => [
                TransformKind::Rot90Cw,
                TransformKind::Rot180,
                TransformKind::Rot270Cw,
            ][rng.random_range(0..3)],
        }
    }
}

impl FromStr for TransformFamily {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hflip" | "h" | "H" => Ok(TransformFamily::HFlip),
            "rot" | "r" | "R" => Ok(TransformFamily::Rot),
            other => bail!("unknown transform family `{other}` (hflip, rot)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub cowmask: CowmaskParams,
    pub scene: SceneConfig,
    pub k_set: Vec<usize>,
    pub transforms: Vec<TransformFamily>,
    pub steps: usize,
    /// Labeled pairs per step (gradients are summed over the batch).
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip.
    pub clip: f64,
    /// Use the ground-truth `L_base` term; off for purely self-supervised runs.
    pub supervised: bool,
    pub seed: u64,
    /// Seed of the synthetic train/eval splits, shared across runs.
    pub data_seed: u64,
    pub train_sequences: usize,
    pub eval_sequences: usize,
    /// Gaps used by the evaluation split.
    pub eval_k: Vec<usize>,
    pub eval_every: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Baseline,
            model: ModelConfig {
                feature_channels: 16,
                downsample: 4,
                radius: 3,
                hidden_channels: 24,
                context_channels: 8,
                iterations: 4,
                seed: 0,
            },
            loss: LossConfig::default(),
            cowmask: CowmaskParams::default(),
            scene: SceneConfig::default(),
            k_set: vec![1, 2],
            transforms: vec![TransformFamily::HFlip, TransformFamily::Rot],
            steps: 1000,
            batch: 1,
            learning_rate: 1e-3,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
            clip: 1.0,
            supervised: true,
            seed: 0,
            data_seed: 1000,
            train_sequences: 32,
            eval_sequences: 20,
            eval_k: vec![1, 2],
            eval_every: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<T>().map_err(|e| anyhow!("`{p}`: {e}")))
        .collect()
}

fn pair(s: &str) -> Result<(f64, f64)> {
    match list::<f64>(s)?.as_slice() {
        [a] => Ok((*a, *a)),
        [a, b] => Ok((*a, *b)),
        _ => bail!("expected `lo,hi`, got `{s}`"),
    }
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| anyhow!("{key} = `{v}`: {e}"))
}

impl RunConfig {
    /// Defaults adjusted to a strategy's preset: TC variants hop over
    /// `k in {1, 2}` with flips and rotations.
    pub fn preset(strategy: Strategy) -> Self {
        let mut c = Self {
            strategy,
            ..Self::default()
        };
        if !strategy.transformation() {
            c.k_set = vec![1];
        }
        c
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "strategy" => self.strategy = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "lr" => self.learning_rate = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "supervised" => self.supervised = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_sequences" => self.train_sequences = parse(key, v)?,
            "eval_sequences" => self.eval_sequences = parse(key, v)?,
            "eval_k" => self.eval_k = list(v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "k_set" => self.k_set = list(v)?,
            "transforms" => self.transforms = list(v)?,
            "out" => self.out = PathBuf::from(v),
            "width" => self.scene.width = parse(key, v)?,
            "height" => self.scene.height = parse(key, v)?,
            "frames" => self.scene.frames = parse(key, v)?,
            "sprites" => {
                let (a, b) = pair(v)?;
                self.scene.sprites = (a as usize, b as usize);
            }
            "max_speed" => self.scene.max_speed = parse(key, v)?,
            "background_speed" => self.scene.background_speed = parse(key, v)?,
            "subpixel" => self.scene.subpixel = parse(key, v)?,
            "feature_channels" => self.model.feature_channels = parse(key, v)?,
            "downsample" => self.model.downsample = parse(key, v)?,
            "radius" => self.model.radius = parse(key, v)?,
            "hidden_channels" => self.model.hidden_channels = parse(key, v)?,
            "context_channels" => self.model.context_channels = parse(key, v)?,
            "iterations" => {
                self.model.iterations = parse(key, v)?;
                self.loss.iterations = self.model.iterations;
            }
            "gamma" => self.loss.gamma = parse(key, v)?,
            "lambda1" => self.loss.lambda1 = parse(key, v)?,
            "lambda2" => self.loss.lambda2 = parse(key, v)?,
            "epsilon" => self.loss.epsilon = parse(key, v)?,
            "zero_star" => self.loss.zero_star = parse(key, v)?,
            "mask_bce" => self.loss.mask_bce = parse(key, v)?,
            "cowmask_sigma" => self.cowmask.sigma = pair(v)?,
            "cowmask_proportion" => self.cowmask.proportion = pair(v)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Every key with its value, in canonical (sorted) order.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let m = &self.model;
        let l = &self.loss;
        let s = &self.scene;
        let fams: Vec<&str> = self.transforms.iter().map(|t| t.name()).collect();
        BTreeMap::from([
            ("strategy", self.strategy.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("momentum", self.momentum.to_string()),
            ("optimizer", self.optimizer.name().to_string()),
            ("clip", self.clip.to_string()),
            ("supervised", self.supervised.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_sequences", self.train_sequences.to_string()),
            ("eval_sequences", self.eval_sequences.to_string()),
            ("eval_k", join(&self.eval_k)),
            ("eval_every", self.eval_every.to_string()),
            ("k_set", join(&self.k_set)),
            ("transforms", fams.join(",")),
            ("out", self.out.display().to_string()),
            ("width", s.width.to_string()),
            ("height", s.height.to_string()),
            ("frames", s.frames.to_string()),
            ("sprites", format!("{},{}", s.sprites.0, s.sprites.1)),
            ("max_speed", s.max_speed.to_string()),
            ("background_speed", s.background_speed.to_string()),
            ("subpixel", s.subpixel.to_string()),
            ("feature_channels", m.feature_channels.to_string()),
            ("downsample", m.downsample.to_string()),
            ("radius", m.radius.to_string()),
            ("hidden_channels", m.hidden_channels.to_string()),
            ("context_channels", m.context_channels.to_string()),
            ("iterations", m.iterations.to_string()),
            ("gamma", l.gamma.to_string()),
            ("lambda1", l.lambda1.to_string()),
            ("lambda2", l.lambda2.to_string()),
            ("epsilon", l.epsilon.to_string()),
            ("zero_star", l.zero_star.to_string()),
            ("mask_bce", l.mask_bce.to_string()),
            (
                "cowmask_sigma",
                format!("{},{}", self.cowmask.sigma.0, self.cowmask.sigma.1),
            ),
            (
                "cowmask_proportion",
                format!("{},{}", self.cowmask.proportion.0, self.cowmask.proportion.1),
            ),
        ])
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{raw}`", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text)
    }

    pub fn canonical(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// SHA-256 of the canonical form without the output directory.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.cowmask.validate()?;
        self.model.check_extent(self.scene.width, self.scene.height)?;
        if self.model.iterations != self.loss.iterations {
            bail!(
                "model iterations {} differ from loss iterations {}",
                self.model.iterations,
                self.loss.iterations
            );
        }
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            bail!("k_set must contain positive gaps");
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            bail!("eval_k must contain positive gaps");
        }
        let max_k = self.k_set.iter().chain(&self.eval_k).max().copied().unwrap_or(1);
        if self.scene.frames <= max_k {
            bail!("{} frames cannot provide a gap of {max_k}", self.scene.frames);
        }
        if self.strategy.transformation() && self.transforms.is_empty() {
            bail!("strategy {} needs at least one transform family", self.strategy);
        }
        if self.batch == 0 {
            bail!("batch must be >= 1");
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.clip > 0.0) {
            bail!("need lr > 0, momentum in [0, 1), clip > 0");
        }
        if !self.supervised && !self.strategy.occlusion() && !self.strategy.transformation() {
            bail!("an unsupervised baseline has no loss terms");
        }
        if self.train_sequences == 0 || self.eval_sequences == 0 {
            bail!("train and eval splits must be non-empty");
        }
        Ok(())
    }
}
