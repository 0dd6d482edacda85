//! Training loop: builds per-step batches for a strategy, evaluates the
//! combined objective on a fresh graph and applies a clipped optimizer step.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use occflow_core::data::{generate_sequences, make_occlusion_pair, FrameHopSampler, TrainSample};
use occflow_core::flow::{transform_image, GeoTransform};
use occflow_core::losses::{
    mask_match_loss, sequence_loss, total_loss, transformation_consistency_loss, zero_forcing_loss,
    LossComponents, LossConfig,
};
use occflow_core::model::{forward_graph, write_checkpoint, Checkpoint, FlowModel, GraphOutput, ModelConfig, ParamVars};
use occflow_core::tensor::{Graph, Scalar, Var};
use occflow_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Optimizer, RunConfig};
use crate::evaluate::{benchmark_pairs, evaluate, EvalPair, EvalReport};

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    Base,
    ZeroForcing,
    MaskMatch,
    Consistency,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Base => "base",
            Component::ZeroForcing => "zf",
            Component::MaskMatch => "mm",
            Component::Consistency => "tr",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss components a configuration trains with, in log order.
pub fn active_components(cfg: &RunConfig) -> Vec<Component> {
    let mut c = Vec::new();
    if cfg.supervised {
        c.push(Component::Base);
    }
    if cfg.strategy.occlusion() {
        c.extend([Component::ZeroForcing, Component::MaskMatch]);
    }
    if cfg.strategy.transformation() {
        c.push(Component::Consistency);
    }
    c
}

/// A pair seen under a geometric transform.
#[derive(Clone, Debug)]
pub struct ConsistencyPair {
    pub sample: TrainSample,
    pub transform: GeoTransform,
    /// The pair is the batch's labeled pair, whose predictions are reused.
    pub shares_labeled: bool,
}

/// Everything one optimisation step looks at.
#[derive(Clone, Debug, Default)]
pub struct StepBatch {
    pub labeled: Option<TrainSample>,
    pub consistency: Vec<ConsistencyPair>,
    pub occlusion: Option<TrainSample>,
    /// `(I, I)` pair for the extra zero-forcing term.
    pub identical: Option<Image>,
}

pub struct Objective {
    pub total: Var,
    pub components: LossComponents,
}

fn run<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    a: &Image,
    b: &Image,
) -> Result<GraphOutput> {
    let ia = g.input(&a.to_tensor());
    let ib = g.input(&b.to_tensor());
    Ok(forward_graph(g, pv, cfg, ia, ib)?)
}

fn mean<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
}

/// The combined objective of one batch on `g`. Generic so the same code can
/// be gradient-checked in `f64`.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    model: &ModelConfig,
    loss: &LossConfig,
    batch: &StepBatch,
) -> Result<Objective> {
    let mut c = LossComponents::default();
    let mut labeled_flows = None;
    if let Some(s) = &batch.labeled {
        let Some(gt) = &s.gt_flow else {
            bail!("labeled pair without ground truth");
        };
        let out = run(g, pv, model, &s.first, &s.second)?;
        c.base = Some(sequence_loss(g, &out.flows, gt, None, loss)?);
        labeled_flows = Some(out.flows);
    }

    let mut tr = Vec::new();
    for p in &batch.consistency {
        let orig = match (&labeled_flows, p.shares_labeled) {
            (Some(f), true) => f.clone(),
            (None, true) => bail!("consistency pair refers to a missing labeled pair"),
            _ => run(g, pv, model, &p.sample.first, &p.sample.second)?.flows,
        };
        let ta = transform_image(&p.sample.first, &p.transform)?;
        let tb = transform_image(&p.sample.second, &p.transform)?;
        let trans = run(g, pv, model, &ta, &tb)?.flows;
        tr.push(transformation_consistency_loss(g, &orig, &trans, &p.transform, loss)?.loss);
    }
    c.consistency = mean(g, &tr)?;

    let mut zf = Vec::new();
    if let Some(s) = &batch.occlusion {
        let Some(mask) = &s.gt_occlusion else {
            bail!("occlusion pair without its mask");
        };
        let out = run(g, pv, model, &s.first, &s.second)?;
        zf.push(zero_forcing_loss(g, &out.flows, loss)?);
        c.mask_match = Some(mask_match_loss(g, &out.visibility, mask, loss)?);
    }
    if let Some(img) = &batch.identical {
        let out = run(g, pv, model, img, img)?;
        zf.push(zero_forcing_loss(g, &out.flows, loss)?);
    }
    if let Some((&first, rest)) = zf.split_first() {
        let mut acc = first;
        for &t in rest {
            acc = g.add(acc, t)?;
        }
        c.zero_forcing = Some(acc);
    }

    let total = total_loss(g, &c, loss)?;
    Ok(Objective { total, components: c })
}

/// Values of one step, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub components: Vec<(Component, f64)>,
    pub total: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn get(&self, c: Component) -> Option<f64> {
        self.components.iter().find(|(k, _)| *k == c).map(|&(_, v)| v)
    }
}

fn component_values<T: Scalar>(
    g: &Graph<T>,
    c: &LossComponents,
    active: &[Component],
) -> Result<Vec<(Component, f64)>> {
    active
        .iter()
        .map(|&k| {
            let v = match k {
                Component::Base => c.base,
                Component::ZeroForcing => c.zero_forcing,
                Component::MaskMatch => c.mask_match,
                Component::Consistency => c.consistency,
            };
            let v = match v {
                Some(v) => g.scalar(v)?.into_f64(),
                None => bail!("component {k} missing from the batch"),
            };
            Ok((k, v))
        })
        .collect()
}

pub struct Trainer {
    cfg: RunConfig,
    model: FlowModel,
    velocity: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    labeled: FrameHopSampler,
    hops: FrameHopSampler,
    active: Vec<Component>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.seed = cfg.seed;
        let model = FlowModel::new(model_cfg)?;
        let sequences = generate_sequences(&cfg.scene, cfg.train_sequences, cfg.data_seed)?;
        let labeled = FrameHopSampler::new(sequences.clone(), &[1])?;
        let hops = FrameHopSampler::new(sequences, &cfg.k_set)?;
        let velocity: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let second_moment = velocity.clone();
        let active = active_components(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg,
            model,
            velocity,
            second_moment,
            rng,
            labeled,
            hops,
            active,
            step: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &FlowModel {
        &self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn active(&self) -> &[Component] {
        &self.active
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.cfg.hash())
    }

    fn random_transform(&mut self, img: &Image) -> GeoTransform {
        let fam = self.cfg.transforms[self.rng.random_range(0..self.cfg.transforms.len())];
        GeoTransform::new(fam.sample(&mut self.rng), img.width(), img.height())
    }

    /// Draws the next batch element for the configured strategy.
    pub fn next_batch(&mut self) -> Result<StepBatch> {
        let mut b = StepBatch::default();
        let anchor = self.labeled.sample(&mut self.rng);
        if self.cfg.strategy.transformation() {
            if self.cfg.supervised {
                let t = self.random_transform(&anchor.first);
                b.consistency.push(ConsistencyPair {
                    sample: anchor.clone(),
                    transform: t,
                    shares_labeled: true,
                });
            }
            let hop = self.hops.sample(&mut self.rng);
            let t = self.random_transform(&hop.first);
            b.consistency.push(ConsistencyPair {
                sample: hop,
                transform: t,
                shares_labeled: false,
            });
        }
        if self.cfg.strategy.occlusion() {
            b.occlusion = Some(make_occlusion_pair(&anchor.first, &self.cfg.cowmask, &mut self.rng)?);
            if self.cfg.loss.zero_star {
                b.identical = Some(anchor.first.clone());
            }
        }
        if self.cfg.supervised {
            b.labeled = Some(anchor);
        }
        Ok(b)
    }

    /// One optimisation step; aborts on a non-finite loss.
    pub fn step(&mut self) -> Result<StepRecord> {
        let n = self.cfg.batch;
        let mut grads: Vec<Vec<f64>> = self.velocity.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut sums = vec![0.0; self.active.len()];
        let mut total = 0.0;
        for _ in 0..n {
            let batch = self.next_batch()?;
            let mut g = Graph::<f32>::new();
            let (pv, vars) = self.model.register(&mut g);
            let obj = objective(&mut g, &pv, &self.cfg.model, &self.cfg.loss, &batch)?;
            let comps = component_values(&g, &obj.components, &self.active)?;
            let t = g.scalar(obj.total)?.into_f64();
            if !t.is_finite() || comps.iter().any(|(_, v)| !v.is_finite()) {
                let parts: Vec<String> = comps.iter().map(|(k, v)| format!("{k}={v}")).collect();
                bail!(
                    "non-finite loss at step {}: total={t} ({})",
                    self.step,
                    parts.join(", ")
                );
            }
            g.backward(obj.total)?;
            for (acc, &v) in grads.iter_mut().zip(&vars) {
                if let Some(gr) = g.grad(v) {
                    for (a, &x) in acc.iter_mut().zip(gr) {
                        *a += x as f64 / n as f64;
                    }
                }
            }
            for (s, (_, v)) in sums.iter_mut().zip(&comps) {
                *s += v / n as f64;
            }
            total += t / n as f64;
        }

        let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() {
            bail!("non-finite gradient at step {} (total loss {total})", self.step);
        }
        let scale = if norm > self.cfg.clip { self.cfg.clip / norm } else { 1.0 };
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        let t = (self.step + 1) as i32;
        let params = self.model.params_mut().iter_mut();
        for ((((_, p), m), v), gr) in params.zip(&mut self.velocity).zip(&mut self.second_moment).zip(&grads) {
            for (((w, m), v), &d) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(gr) {
                let d = d * scale;
                let delta = match self.cfg.optimizer {
                    Optimizer::Sgd => {
                        *m = mu * *m + d;
                        *m
                    }
                    Optimizer::Adam => {
                        *m = mu * *m + (1.0 - mu) * d;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
                        let mh = *m / (1.0 - mu.powi(t));
                        let vh = *v / (1.0 - ADAM_BETA2.powi(t));
                        mh / (vh.sqrt() + ADAM_EPS)
                    }
                };
                *w -= (lr * delta) as f32;
            }
        }

        let rec = StepRecord {
            step: self.step,
            components: self.active.iter().copied().zip(sums).collect(),
            total,
            grad_norm: norm,
        };
        self.step += 1;
        Ok(rec)
    }
}

/// What a finished run produced.
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    /// `(step, report)` for every evaluation, the last one after training.
    pub evals: Vec<(usize, EvalReport)>,
    pub model: FlowModel,
    pub checkpoint: Checkpoint,
}

impl TrainSummary {
    pub fn final_eval(&self) -> &EvalReport {
        &self.evals.last().expect("final evaluation").1
    }
}

pub fn metrics_header(active: &[Component]) -> String {
    let mut h = vec!["step".to_string()];
    h.extend(active.iter().map(|c| c.name().to_string()));
    h.extend(["total".into(), "grad_norm".into()]);
    h.join(",")
}

fn metrics_row(r: &StepRecord) -> String {
    let mut row = vec![r.step.to_string()];
    row.extend(r.components.iter().map(|(_, v)| format!("{v:.6e}")));
    row.push(format!("{:.6e}", r.total));
    row.push(format!("{:.6e}", r.grad_norm));
    row.join(",")
}

fn eval_row(step: usize, r: &EvalReport) -> String {
    let mut row = vec![
        step.to_string(),
        format!("{:.6}", r.overall.epe),
        format!("{:.6}", r.overall.fl),
    ];
    for m in r.per_k.values() {
        row.push(format!("{:.6}", m.epe));
        row.push(format!("{:.6}", m.fl));
    }
    row.push(r.mask_accuracy.map_or("".into(), |a| format!("{a:.6}")));
    row.join(",")
}

struct Logs {
    metrics: BufWriter<File>,
    eval: BufWriter<File>,
    dir: PathBuf,
}

impl Logs {
    fn create(cfg: &RunConfig, active: &[Component]) -> Result<Self> {
        let dir = cfg.out.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.txt"), cfg.canonical())?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{}", metrics_header(active))?;
        let mut eval = BufWriter::new(File::create(dir.join("eval.csv"))?);
        let mut h = vec!["step".to_string(), "epe".into(), "fl".into()];
        for k in &cfg.eval_k {
            h.push(format!("epe_k{k}"));
            h.push(format!("fl_k{k}"));
        }
        h.push("mask_accuracy".into());
        writeln!(eval, "{}", h.join(","))?;
        Ok(Self { metrics, eval, dir })
    }
}

/// Trains for `cfg.steps` steps. With `write` the config, metrics,
/// evaluations and final checkpoint go to `cfg.out`.
pub fn train(cfg: &RunConfig, write: bool) -> Result<TrainSummary> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let pairs: Vec<EvalPair> = benchmark_pairs(cfg)?;
    let mut logs = if write {
        Some(Logs::create(cfg, trainer.active())?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    for step in 0..cfg.steps {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            let r = evaluate(trainer.model(), &pairs)?;
            if let Some(l) = &mut logs {
                writeln!(l.eval, "{}", eval_row(step, &r))?;
            }
            evals.push((step, r));
        }
        let rec = trainer.step()?;
        if let Some(l) = &mut logs {
            writeln!(l.metrics, "{}", metrics_row(&rec))?;
        }
        records.push(rec);
    }
    let r = evaluate(trainer.model(), &pairs)?;
    let checkpoint = trainer.checkpoint();
    if let Some(mut l) = logs {
        writeln!(l.eval, "{}", eval_row(cfg.steps, &r))?;
        l.metrics.flush()?;
        l.eval.flush()?;
        write_checkpoint(l.dir.join("model.ckpt"), &checkpoint)?;
        fs::write(l.dir.join("eval.txt"), r.to_text())?;
    }
    evals.push((cfg.steps, r));
    Ok(TrainSummary {
        records,
        evals,
        model: trainer.model().clone(),
        checkpoint,
    })
}
