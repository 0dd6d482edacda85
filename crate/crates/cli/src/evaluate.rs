//! Benchmark evaluation: EPE and Fl overall and per frame gap, plus mask
//! accuracy wherever ground-truth masks exist.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Result};
use occflow_core::data::{generate_scenes, make_occlusion_pair, TrainSample};
use occflow_core::flow::{epe, fl_outlier_rate, FlowField, OcclusionMask};
use occflow_core::model::{Checkpoint, FlowModel};
use occflow_core::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Mixed into `data_seed` so the held-out split never shares scenes with
/// the training split.
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

pub trait FlowPredictor {
    /// Final flow and, if available, per-pixel visibility in `[0, 1]`.
    fn predict(&self, first: &Image, second: &Image) -> Result<(FlowField, Option<Vec<f32>>)>;
}

impl FlowPredictor for FlowModel {
    fn predict(&self, first: &Image, second: &Image) -> Result<(FlowField, Option<Vec<f32>>)> {
        let out = self.forward(first, second)?;
        let vis = out.final_visibility();
        Ok((out.final_flow().clone(), Some(vis)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub first: Image,
    pub second: Image,
    pub k: usize,
    pub gt_flow: FlowField,
    pub gt_occlusion: Option<OcclusionMask>,
}

impl EvalPair {
    /// Wraps a sample that carries ground-truth flow.
    pub fn from_sample(s: TrainSample) -> Result<Self> {
        let Some(gt_flow) = s.gt_flow else {
            bail!("sample without ground-truth flow cannot be evaluated");
        };
        Ok(Self {
            first: s.first,
            second: s.second,
            k: s.k,
            gt_flow,
            gt_occlusion: s.gt_occlusion,
        })
    }
}

/// Every `(t, t + k)` pair of the held-out scenes for each `k` in
/// `cfg.eval_k`.
pub fn benchmark_pairs(cfg: &RunConfig) -> Result<Vec<EvalPair>> {
    let scenes = generate_scenes(&cfg.scene, cfg.eval_sequences, cfg.data_seed ^ EVAL_SEED_SALT)?;
    let mut pairs = Vec::new();
    for scene in &scenes {
        let frames: Vec<Image> = (0..scene.frames).map(|t| scene.render_frame(t)).collect();
        for &k in &cfg.eval_k {
            for t in 0..scene.frames.saturating_sub(k) {
                let (gt_flow, occ) = scene.ground_truth(t, k)?;
                pairs.push(EvalPair {
                    first: frames[t].clone(),
                    second: frames[t + k].clone(),
                    k,
                    gt_flow,
                    gt_occlusion: Some(occ),
                });
            }
        }
    }
    Ok(pairs)
}

/// One cow-mask occlusion pair per frame of the held-out scenes, with
/// zero ground-truth flow and the mask as ground-truth visibility.
pub fn occlusion_pairs(cfg: &RunConfig) -> Result<Vec<EvalPair>> {
    let scenes = generate_scenes(&cfg.scene, cfg.eval_sequences, cfg.data_seed ^ EVAL_SEED_SALT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed ^ EVAL_SEED_SALT);
    rng.set_stream(u64::MAX);
    let mut pairs = Vec::new();
    for scene in &scenes {
        for t in 0..scene.frames {
            let s = make_occlusion_pair(&scene.render_frame(t), &cfg.cowmask, &mut rng)?;
            pairs.push(EvalPair::from_sample(s)?);
        }
    }
    Ok(pairs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub pairs: usize,
    pub epe: f64,
    pub fl: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub overall: Metrics,
    pub per_k: BTreeMap<usize, Metrics>,
    /// Thresholded visibility vs ground truth, over pairs with masks.
    pub mask_accuracy: Option<f64>,
}

#[derive(Default)]
struct Acc {
    pairs: usize,
    epe: f64,
    fl: f64,
}

impl Acc {
    fn add(&mut self, e: f64, f: f64) {
        self.pairs += 1;
        self.epe += e;
        self.fl += f;
    }

    fn metrics(&self) -> Metrics {
        let n = self.pairs.max(1) as f64;
        Metrics {
            pairs: self.pairs,
            epe: self.epe / n,
            fl: self.fl / n,
        }
    }
}

/// Pair-averaged metrics. Every pair of a split has the same extent, so
/// this equals the pixel average.
pub fn evaluate<P: FlowPredictor + ?Sized>(pred: &P, pairs: &[EvalPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        bail!("evaluation split is empty");
    }
    let mut all = Acc::default();
    let mut per_k: BTreeMap<usize, Acc> = BTreeMap::new();
    let (mut correct, mut masked) = (0usize, 0usize);
    for p in pairs {
        let (flow, vis) = pred.predict(&p.first, &p.second)?;
        let e = epe(&flow, &p.gt_flow, None)?;
        let f = fl_outlier_rate(&flow, &p.gt_flow, None)?;
        all.add(e, f);
        per_k.entry(p.k).or_default().add(e, f);
        if let (Some(gt), Some(vis)) = (&p.gt_occlusion, vis) {
            if vis.len() != gt.values().len() {
                bail!("visibility has {} pixels, mask has {}", vis.len(), gt.values().len());
            }
            for (&v, &o) in vis.iter().zip(gt.values()) {
                correct += usize::from((v >= 0.5) == (o >= 0.5));
            }
            masked += vis.len();
        }
    }
    Ok(EvalReport {
        overall: all.metrics(),
        per_k: per_k.iter().map(|(&k, a)| (k, a.metrics())).collect(),
        mask_accuracy: (masked > 0).then(|| correct as f64 / masked as f64),
    })
}

/// Loads `ckpt` for `cfg`, rejecting it if the embedded hash differs.
pub fn load_model(cfg: &RunConfig, ckpt: Checkpoint) -> Result<FlowModel> {
    Ok(ckpt.into_model(cfg.model.clone(), &cfg.hash())?)
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, name: &str, m: &Metrics| {
            let _ = writeln!(s, "{name:<8} pairs={:<5} epe={:.6} fl={:.6}", m.pairs, m.epe, m.fl);
        };
        line(&mut s, "overall", &self.overall);
        for (k, m) in &self.per_k {
            line(&mut s, &format!("k={k}"), m);
        }
        match self.mask_accuracy {
            Some(a) => {
                let _ = writeln!(s, "mask_accuracy={a:.6}");
            }
            None => s.push_str("mask_accuracy=n/a\n"),
        }
        s
    }
}
