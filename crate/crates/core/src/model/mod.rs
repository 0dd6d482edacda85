//! A small recurrent flow estimator with an occlusion channel.
//!
//! Layout: a shared two-layer convolutional encoder at `1/downsample`
//! resolution; context features and the initial hidden state come from the
//! first frame's encoding. Every iteration looks up a `(2r+1)^2` window of
//! feature correlations around the current flow, encodes it together with
//! the flow, runs a convolutional GRU with 1x1 kernels and predicts a flow
//! increment plus an occlusion logit. Flow and logits are upsampled
//! bilinearly to input resolution after every iteration.

mod checkpoint;

pub use checkpoint::{hex, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::flow::FlowField;
use crate::image::Image;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Occlusion logits are clamped to this magnitude before the sigmoid so the
/// visibility probability stays strictly inside (0, 1).
pub const LOGIT_CLAMP: f64 = 15.0;
const FEATURE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub feature_channels: usize,
    /// 1, 2 or 4.
    pub downsample: usize,
    pub radius: usize,
    pub hidden_channels: usize,
    pub context_channels: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            downsample: 2,
            radius: 3,
            hidden_channels: 48,
            context_channels: 16,
            iterations: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(invalid(format!(
                "downsample factor {} must be 1, 2 or 4",
                self.downsample
            )));
        }
        if self.radius == 0 || self.iterations == 0 {
            return Err(invalid("radius and iterations must be >= 1"));
        }
        if self.feature_channels == 0 || self.hidden_channels == 0 || self.context_channels == 0 {
            return Err(invalid("channel counts must be >= 1"));
        }
        Ok(())
    }

    pub fn check_extent(&self, width: usize, height: usize) -> Result<()> {
        let d = self.downsample;
        if width == 0 || height == 0 || width % d != 0 || height % d != 0 {
            return Err(invalid(format!(
                "image extent {width}x{height} is not divisible by downsample factor {d}"
            )));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        (2 * self.radius + 1).pow(2)
    }

    /// Names and shapes of every parameter, in registration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let f = self.feature_channels;
        let h = self.hidden_channels;
        let c = self.context_channels;
        let gru_in = h + f + c + 2;
        let mut out = Vec::new();
        let mut add = |name: &str, o: usize, i: usize, k: usize, bias: bool| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            if bias {
                out.push((format!("{name}.bias"), vec![o]));
            }
        };
        let mut conv = |name: &str, o: usize, i: usize, k: usize| add(name, o, i, k, true);
        conv("encoder.conv1", f, 3, 3);
        conv("context.hidden", h, f, 1);
        conv("context.features", c, f, 1);
        conv("motion.conv1", f, self.window() + 2, 1);
        conv("motion.conv2", f, f, 3);
        conv("gru.z", h, gru_in, 1);
        conv("gru.r", h, gru_in, 1);
        conv("gru.q", h, gru_in, 1);
        conv("head.conv1", f, h, 3);
        conv("head.conv2", 2, f, 3);
        conv("occlusion.conv1", f, h, 3);
        conv("occlusion.conv2", 1, f, 3);
        // No bias: the per-channel centring that follows would cancel it.
        add("encoder.conv2", f, f, 3, false);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Parameters as graph leaves, looked up by name.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    pub fn new(named: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: named.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }
}

/// Graph nodes produced by one forward pass.
pub struct GraphOutput {
    /// Full-resolution `1 x 2 x H x W` flow, one per iteration.
    pub flows: Vec<Var>,
    /// Full-resolution `1 x 1 x H x W` occlusion logits.
    pub occlusion_logits: Vec<Var>,
    /// Visibility probabilities `sigmoid(clamp(logit))`.
    pub visibility: Vec<Var>,
}

/// Inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub flows: Vec<FlowField>,
    /// Per-pixel logits, row-major, one list per iteration.
    pub occlusion_logits: Vec<Vec<f32>>,
}

impl ModelOutput {
    pub fn final_flow(&self) -> &FlowField {
        self.flows.last().expect("at least one iteration")
    }

    /// `sigmoid(clamp(logit))` for the final iteration.
    pub fn final_visibility(&self) -> Vec<f32> {
        self.occlusion_logits
            .last()
            .expect("at least one iteration")
            .iter()
            .map(|&l| visibility(l as f64) as f32)
            .collect()
    }
}

pub fn visibility(logit: f64) -> f64 {
    1.0 / (1.0 + (-logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: ModelConfig,
    params: Vec<(String, Tensor<f32>)>,
}

impl FlowModel {
    /// Uniform init in `[-a, a]`, `a = sqrt(1 / fan_in)`, for weights and
    /// biases alike.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut fan_in = 1;
        for (name, shape) in config.parameter_shapes() {
            if shape.len() == 4 {
                fan_in = shape[1] * shape[2] * shape[3];
            }
            let a = (1.0 / fan_in as f64).sqrt() as f32;
            let t = Tensor::from_fn(shape, |_| rng.random_range(-a..=a))?;
            params.push((name, t));
        }
        Ok(Self { config, params })
    }

    /// Builds a model from named tensors, checking them against `config`.
    pub fn from_params(config: ModelConfig, params: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (got_name, t)) in expected.iter().zip(&params) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameter values cast to `T`, marked as requiring gradients.
    pub fn param_tensors<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|(_, t)| t.cast::<T>().with_requires_grad(true))
            .collect()
    }

    pub fn bind(&self, vars: &[Var]) -> Result<ParamVars> {
        if vars.len() != self.params.len() {
            return Err(invalid(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(ParamVars::new(
            self.params.iter().map(|(n, _)| n.clone()).zip(vars.iter().copied()),
        ))
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn register<T: Scalar>(&self, g: &mut Graph<T>) -> (ParamVars, Vec<Var>) {
        let vars: Vec<Var> = self
            .param_tensors::<T>()
            .iter()
            .map(|t| g.variable(t))
            .collect();
        let pv = self.bind(&vars).expect("one var per parameter");
        (pv, vars)
    }

    /// Inference in `f32`.
    pub fn forward(&self, a: &Image, b: &Image) -> Result<ModelOutput> {
        let mut g = Graph::<f32>::new();
        let pv = ParamVars::new(
            self.params
                .iter()
                .map(|(n, t)| (n.clone(), g.input(&t.clone().with_requires_grad(false)))),
        );
        let ia = g.input(&image_tensor(a)?);
        let ib = g.input(&image_tensor(b)?);
        let out = forward_graph(&mut g, &pv, &self.config, ia, ib)?;
        let (w, h) = (a.width(), a.height());
        let flows = out
            .flows
            .iter()
            .map(|&f| FlowField::from_tensor_data(g.shape(f), g.value(f)))
            .collect::<Result<Vec<_>>>()?;
        let logits = out
            .occlusion_logits
            .iter()
            .map(|&l| g.value(l).to_vec())
            .collect::<Vec<_>>();
        debug_assert!(logits.iter().all(|l| l.len() == w * h));
        Ok(ModelOutput {
            flows,
            occlusion_logits: logits,
        })
    }
}

fn image_tensor<T: Scalar>(img: &Image) -> Result<Tensor<T>> {
    if img.channels() != 3 {
        return Err(invalid(format!(
            "model expects 3-channel images, got {}",
            img.channels()
        )));
    }
    Ok(img.to_tensor())
}

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = pv.var(&format!("{name}.weight"))?;
    let b = pv.var(&format!("{name}.bias"))?;
    let (o, k) = {
        let s = g.shape(w);
        (s[0], s[2])
    };
    let y = g.conv2d(x, w, stride, k / 2)?;
    let b = g.reshape(b, vec![o, 1, 1])?;
    g.add(y, b)
}

/// L2-normalised feature map at `1/downsample` resolution of a `1 x 3 x H x W` image in
/// `[0, 1]`.
pub fn encode<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, cfg: &ModelConfig, img: Var) -> Result<Var> {
    let s = g.shape(img).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Shape {
            op: "encode",
            lhs: s,
            rhs: vec![1, 3, 0, 0],
        });
    }
    cfg.check_extent(s[3], s[2])?;
    let x = g.scale(img, 2.0);
    let x = g.offset(x, -1.0);
    let s1 = if cfg.downsample >= 2 { 2 } else { 1 };
    let s2 = if cfg.downsample == 4 { 2 } else { 1 };
    let x = conv(g, pv, "encoder.conv1", x, s1)?;
    let x = g.relu(x);
    let w = pv.var("encoder.conv2.weight")?;
    let x = g.conv2d(x, w, s2, 1)?;
    // Zero-mean channels, then unit-length feature vectors, so the
    // correlation peaks at the match rather than at the brightest neighbour.
    let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
    let m = g.sum_axis(x, 3)?;
    let m = g.sum_axis(m, 2)?;
    let m = g.scale(m, 1.0 / (h * w) as f64);
    let x = g.sub(x, m)?;
    let sq = g.square(x);
    let n = g.sum_axis(sq, 1)?;
    let n = g.offset(n, FEATURE_EPS);
    let n = g.sqrt(n);
    g.div(x, n)
}

/// Constant `1 x 2 x (K h) x w` tensor whose `k`-th block holds the pixel
/// grid shifted by the `k`-th window offset.
fn window_grid<T: Scalar>(g: &mut Graph<T>, w: usize, h: usize, radius: usize) -> Result<Var> {
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    let k = offsets.len();
    let plane = k * h * w;
    let mut data = vec![T::zero(); 2 * plane];
    for (i, &(dx, dy)) in offsets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let j = (i * h + y) * w + x;
                data[j] = T::of_f64((x as isize + dx) as f64);
                data[plane + j] = T::of_f64((y as isize + dy) as f64);
            }
        }
    }
    g.constant(vec![1, 2, k * h, w], data)
}

/// For every pixel `p` and offset `d` in the `(2r+1)^2` window, the dot
/// product of `f1(p)` with `f2` sampled bilinearly at `p + flow(p) + d`,
/// divided by `sqrt(C)`. Returns `1 x (2r+1)^2 x h x w`, offsets ordered
/// row by row (`dy` outer, `dx` inner).
pub fn correlation_lookup<T: Scalar>(
    g: &mut Graph<T>,
    f1: Var,
    f2: Var,
    flow: Var,
    radius: usize,
) -> Result<Var> {
    let s1 = g.shape(f1).to_vec();
    let s2 = g.shape(f2).to_vec();
    let sf = g.shape(flow).to_vec();
    if s1 != s2 || s1.len() != 4 || s1[0] != 1 || sf != [1, 2, s1[2], s1[3]] {
        return Err(Error::Shape {
            op: "correlation_lookup",
            lhs: s1,
            rhs: sf,
        });
    }
    let (c, h, w) = (s1[1], s1[2], s1[3]);
    let k = (2 * radius + 1).pow(2);
    let grid = window_grid(g, w, h, radius)?;
    let tiled_flow = g.concat(&vec![flow; k], 2)?;
    let coords = g.add(grid, tiled_flow)?;
    let sampled = g.bilinear_sample(f2, coords)?;
    let tiled_f1 = g.concat(&vec![f1; k], 2)?;
    let prod = g.mul(sampled, tiled_f1)?;
    let corr = g.sum_axis(prod, 1)?;
    let corr = g.scale(corr, 1.0 / (c as f64).sqrt());
    g.reshape(corr, vec![1, k, h, w])
}

/// Recurrent state carried between iterations.
pub struct IterState {
    pub hidden: Var,
    pub context: Var,
}

/// One refinement step: returns the new state, the coarse flow increment
/// and the coarse occlusion logit.
pub fn iterate<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    state: IterState,
    corr: Var,
    flow: Var,
) -> Result<(IterState, Var, Var)> {
    let m = g.concat(&[corr, flow], 1)?;
    let m = conv(g, pv, "motion.conv1", m, 1)?;
    let m = g.relu(m);
    let m = conv(g, pv, "motion.conv2", m, 1)?;
    let m = g.relu(m);
    let x = g.concat(&[m, state.context, flow], 1)?;

    let hx = g.concat(&[state.hidden, x], 1)?;
    let z = conv(g, pv, "gru.z", hx, 1)?;
    let z = g.sigmoid(z);
    let r = conv(g, pv, "gru.r", hx, 1)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, state.hidden)?;
    let rhx = g.concat(&[rh, x], 1)?;
    let q = conv(g, pv, "gru.q", rhx, 1)?;
    let q = g.tanh(q);
    // h' = h + z (q - h)
    let dq = g.sub(q, state.hidden)?;
    let zdq = g.mul(z, dq)?;
    let hidden = g.add(state.hidden, zdq)?;

    let o = conv(g, pv, "head.conv1", hidden, 1)?;
    let o = g.relu(o);
    let delta = conv(g, pv, "head.conv2", o, 1)?;
    // The occlusion channel reads the same state through its own layers.
    let o = conv(g, pv, "occlusion.conv1", hidden, 1)?;
    let o = g.relu(o);
    let logit = conv(g, pv, "occlusion.conv2", o, 1)?;
    Ok((
        IterState {
            hidden,
            context: state.context,
        },
        delta,
        logit,
    ))
}

/// Sampling coordinates that upsample an `h x w` map by `d` with
/// pixel-centre alignment.
fn upsample_grid<T: Scalar>(g: &mut Graph<T>, w: usize, h: usize, d: usize) -> Result<Var> {
    let (fw, fh) = (w * d, h * d);
    let n = fw * fh;
    let mut data = vec![T::zero(); 2 * n];
    for y in 0..fh {
        for x in 0..fw {
            data[y * fw + x] = T::of_f64((x as f64 + 0.5) / d as f64 - 0.5);
            data[n + y * fw + x] = T::of_f64((y as f64 + 0.5) / d as f64 - 0.5);
        }
    }
    g.constant(vec![1, 2, fh, fw], data)
}

/// Full forward pass on `1 x 3 x H x W` images with values in `[0, 1]`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    img_a: Var,
    img_b: Var,
) -> Result<GraphOutput> {
    if g.shape(img_a) != g.shape(img_b) {
        return Err(Error::Shape {
            op: "forward",
            lhs: g.shape(img_a).to_vec(),
            rhs: g.shape(img_b).to_vec(),
        });
    }
    let f1 = encode(g, pv, cfg, img_a)?;
    let f2 = encode(g, pv, cfg, img_b)?;
    let (h, w) = (g.shape(f1)[2], g.shape(f1)[3]);
    let d = cfg.downsample;

    let hidden = conv(g, pv, "context.hidden", f1, 1)?;
    let hidden = g.tanh(hidden);
    let context = conv(g, pv, "context.features", f1, 1)?;
    let context = g.relu(context);
    let mut state = IterState { hidden, context };

    let mut flow = g.constant(vec![1, 2, h, w], vec![T::zero(); 2 * h * w])?;
    let up = if d > 1 { Some(upsample_grid(g, w, h, d)?) } else { None };
    let mut out = GraphOutput {
        flows: Vec::with_capacity(cfg.iterations),
        occlusion_logits: Vec::with_capacity(cfg.iterations),
        visibility: Vec::with_capacity(cfg.iterations),
    };
    for _ in 0..cfg.iterations {
        let corr = correlation_lookup(g, f1, f2, flow, cfg.radius)?;
        let (next, delta, logit) = iterate(g, pv, state, corr, flow)?;
        state = next;
        flow = g.add(flow, delta)?;
        let (full_flow, full_logit) = match up {
            Some(grid) => {
                let both = g.concat(&[flow, logit], 1)?;
                let both = g.bilinear_sample(both, grid)?;
                let f = g.slice(both, 1, 0, 2)?;
                let f = g.scale(f, d as f64);
                let l = g.slice(both, 1, 2, 1)?;
                (f, l)
            }
            None => (flow, logit),
        };
        let clamped = g.clamp(full_logit, -LOGIT_CLAMP, LOGIT_CLAMP);
        let vis = g.sigmoid(clamped);
        out.flows.push(full_flow);
        out.occlusion_logits.push(full_logit);
        out.visibility.push(vis);
    }
    Ok(out)
}
