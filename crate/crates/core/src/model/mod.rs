//! Toy four-stage classifier with LSTC (or plain strided) downsampling, its
//! optimizer and schedule, the training loop and score-level ensembles.
//!
//! Pipeline per sample `[3, T, V]`:
//! linear embedding + positional table, then `[MLP block -> downsample] x 3`,
//! a final MLP block, global mean pooling and a linear head.

mod ensemble;
mod optim;
mod train;

pub use ensemble::{ensemble_accuracy, ensemble_scores, EnsembleKind};
pub use optim::{clip_global_norm, lr_at, AdamW, Schedule};
pub use train::{
    evaluate, smooth_labels, train, write_metrics_csv, EpochLog, EvalResult, TrainConfig, TrainOutcome,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentError;
use crate::io::{Bundle, IoError};
use crate::lstc::{lstc_forward, LongKernelSpec, LongKernelVariant, LstcError, LstcLayer, LstcVars, SHORT_KERNEL, SHORT_PAD};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("gradient of `{0}` is not finite")]
    NonFiniteGrad(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Lstc(#[from] LstcError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// Temporal downsampling used between stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Downsample {
    Lstc(LongKernelVariant),
    /// Plain 7-tap stride-2 convolution, i.e. the short branch alone.
    TConv,
}

impl fmt::Display for Downsample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Downsample::Lstc(v) => f.write_str(v.name()),
            Downsample::TConv => f.write_str("tconv"),
        }
    }
}

impl FromStr for Downsample {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "tconv" {
            return Ok(Downsample::TConv);
        }
        s.parse::<LongKernelVariant>().map(Downsample::Lstc).map_err(|e| e.to_string())
    }
}

impl TryFrom<String> for Downsample {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Downsample> for String {
    fn from(d: Downsample) -> Self {
        d.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelConfig {
    pub in_channels: usize,
    pub c_embed: usize,
    pub t_in: usize,
    pub joints: usize,
    pub n_classes: usize,
    /// Hidden width of each MLP block as a multiple of the stage width.
    pub mlp_ratio: usize,
    pub downsample: Vec<Downsample>,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            c_embed: 8,
            t_in: 32,
            joints: 8,
            n_classes: 4,
            mlp_ratio: 2,
            downsample: vec![Downsample::Lstc(LongKernelVariant::First3Last3); 3],
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    /// Stage widths `[C, 2C, 2C, 2C]`.
    pub fn widths(&self) -> [usize; 4] {
        let c = self.c_embed;
        [c, 2 * c, 2 * c, 2 * c]
    }

    pub fn with_downsample(mut self, d: Downsample) -> Self {
        self.downsample = vec![d; 3];
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.t_in == 0 || self.t_in % 8 != 0 {
            return err(format!("t_in = {} must be a positive multiple of 8", self.t_in));
        }
        if self.in_channels == 0 || self.c_embed == 0 || self.joints == 0 || self.mlp_ratio == 0 {
            return err("channel, joint and ratio sizes must be positive".into());
        }
        if self.n_classes < 2 {
            return err(format!("n_classes = {} must be at least 2", self.n_classes));
        }
        if self.downsample.len() != 3 {
            return err(format!("need exactly 3 downsampling layers, got {}", self.downsample.len()));
        }
        Ok(())
    }

    /// Feature shape before pooling: `(2C, T/8, V)`.
    pub fn prepool_shape(&self) -> [usize; 3] {
        [2 * self.c_embed, self.t_in / 8, self.joints]
    }
}

/// Parameter shapes in creation order.
fn layout(cfg: &ToyModelConfig) -> Vec<(String, Vec<usize>)> {
    let w = cfg.widths();
    let (c, t, v) = (cfg.c_embed, cfg.t_in, cfg.joints);
    let mut out = vec![
        ("embed.W".to_string(), vec![c, cfg.in_channels]),
        ("embed.b".to_string(), vec![c]),
        ("pos".to_string(), vec![c, t, v]),
    ];
    for (s, &width) in w.iter().enumerate() {
        let h = cfg.mlp_ratio * width;
        out.push((format!("stage{s}.fc1.W"), vec![h, width]));
        out.push((format!("stage{s}.fc1.b"), vec![h]));
        out.push((format!("stage{s}.fc2.W"), vec![width, h]));
        out.push((format!("stage{s}.fc2.b"), vec![width]));
        if s < 3 {
            let (ci, co, ts) = (width, w[s + 1], t >> s);
            match cfg.downsample[s] {
                Downsample::TConv => out.push((format!("down{s}.w"), vec![co, ci, SHORT_KERNEL, 1])),
                Downsample::Lstc(variant) => {
                    let taps = LongKernelSpec::for_input(variant, ts).map(|sp| sp.tap_count()).unwrap_or(0);
                    let shapes = [
                        ("w_short", vec![co, ci, SHORT_KERNEL, 1]),
                        ("w_long", vec![co, ci, taps, 1]),
                        ("P_s.W", vec![co, co]),
                        ("P_s.b", vec![co]),
                        ("P_l.W", vec![co, co]),
                        ("P_l.b", vec![co]),
                        ("mu", vec![co, ts / 2, v]),
                    ];
                    out.extend(shapes.into_iter().map(|(n, sh)| (format!("down{s}.{n}"), sh)));
                }
            }
        }
    }
    out.push(("head.W".to_string(), vec![cfg.n_classes, w[3]]));
    out.push(("head.b".to_string(), vec![cfg.n_classes]));
    out
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-bound..=bound))
}

/// Parameters of a built model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    cfg: ToyModelConfig,
    params: Vec<(String, Tensor)>,
}

/// Hands out recorded parameter handles in creation order.
struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        self.next += 1;
        self.vars[self.next - 1]
    }
}

/// Tape handles of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub prepool: Var,
    pub logits: Var,
}

impl ToyModel {
    /// Builds and initializes a model: linear maps and kernels from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the positional table from
    /// `N(0, 0.02^2)`, LSTC `mu` at zero.
    pub fn new(cfg: ToyModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pos_init = Normal::new(0.0, 0.02).expect("valid normal");
        let w = cfg.widths();
        let mut params = Vec::new();
        let mut pending = layout(&cfg).into_iter();
        let mut push = |params: &mut Vec<(String, Tensor)>, t: Tensor| {
            let (name, shape) = pending.next().expect("layout covers every tensor");
            debug_assert_eq!(shape.as_slice(), t.shape(), "{name}");
            params.push((name, t));
        };
        push(&mut params, uniform(&[cfg.c_embed, cfg.in_channels], cfg.in_channels, &mut rng));
        push(&mut params, uniform(&[cfg.c_embed], cfg.in_channels, &mut rng));
        push(&mut params, Tensor::from_fn(vec![cfg.c_embed, cfg.t_in, cfg.joints], |_| pos_init.sample(&mut rng)));
        for (s, &width) in w.iter().enumerate() {
            let h = cfg.mlp_ratio * width;
            push(&mut params, uniform(&[h, width], width, &mut rng));
            push(&mut params, uniform(&[h], width, &mut rng));
            push(&mut params, uniform(&[width, h], h, &mut rng));
            push(&mut params, uniform(&[width], h, &mut rng));
            if s < 3 {
                let (ci, co, ts) = (width, w[s + 1], cfg.t_in >> s);
                match cfg.downsample[s] {
                    Downsample::TConv => push(&mut params, uniform(&[co, ci, SHORT_KERNEL, 1], ci * SHORT_KERNEL, &mut rng)),
                    Downsample::Lstc(variant) => {
                        let layer = LstcLayer::init(ci, co, ts, cfg.joints, variant, &mut rng)?;
                        for (_, t) in layer.params.named() {
                            push(&mut params, t.clone());
                        }
                    }
                }
            }
        }
        push(&mut params, uniform(&[cfg.n_classes, w[3]], w[3], &mut rng));
        push(&mut params, uniform(&[cfg.n_classes], w[3], &mut rng));
        Ok(Self { cfg, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(cfg: ToyModelConfig, params: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let expect = layout(&cfg);
        if expect.len() != params.len() {
            return Err(ModelError::Config(format!("expected {} tensors, got {}", expect.len(), params.len())));
        }
        for ((name, shape), (n, t)) in expect.iter().zip(&params) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!("expected `{name}` {shape:?}, got `{n}` {:?}", t.shape())));
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone().into_param())).collect()
    }

    /// Records every parameter as a constant.
    pub fn record_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    fn mlp_block(tape: &mut Tape, x: Var, p: &mut Cursor) -> Result<Var, ModelError> {
        let (w1, b1, w2, b2) = (p.take(), p.take(), p.take(), p.take());
        let h = tape.linear_channels(x, w1, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.linear_channels(h, w2, b2)?;
        Ok(tape.add(x, h)?)
    }

    /// Forward pass of one `[C_in, T, V]` sample given handles from
    /// [`ToyModel::record`] or [`ToyModel::record_frozen`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<ForwardVars, ModelError> {
        let cfg = &self.cfg;
        let want = [cfg.in_channels, cfg.t_in, cfg.joints];
        if tape.value(x).shape() != want {
            return Err(TensorError::Dimension {
                op: "model",
                detail: format!("input {:?}, expected {want:?}", tape.value(x).shape()),
            }
            .into());
        }
        let mut p = Cursor { vars, next: 0 };
        let (we, be, pos) = (p.take(), p.take(), p.take());
        let h = tape.linear_channels(x, we, be)?;
        let mut h = tape.add(h, pos)?;
        for s in 0..4 {
            h = Self::mlp_block(tape, h, &mut p)?;
            if s < 3 {
                h = match cfg.downsample[s] {
                    Downsample::TConv => tape.conv_time(h, p.take(), 2, SHORT_PAD)?,
                    Downsample::Lstc(variant) => {
                        let spec = LongKernelSpec::for_input(variant, cfg.t_in >> s)?;
                        let lv = LstcVars {
                            w_short: p.take(),
                            w_long: p.take(),
                            ps_w: p.take(),
                            ps_b: p.take(),
                            pl_w: p.take(),
                            pl_b: p.take(),
                            mu: p.take(),
                        };
                        lstc_forward(tape, h, &lv, &spec)?
                    }
                };
            }
        }
        let prepool = h;
        let pooled = tape.global_pool_mean(prepool)?;
        let (wh, bh) = (p.take(), p.take());
        let logits = tape.linear_channels(pooled, wh, bh)?;
        Ok(ForwardVars { prepool, logits })
    }

    /// Logits of one sample, without gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.record_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    /// Pre-pooling features of one sample.
    pub fn features(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars = self.record_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out.prepool).clone())
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new(serde_json::json!({ "kind": "toy_model", "config": self.cfg }));
        for (n, t) in &self.params {
            b.push(n.clone(), t.clone());
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self, ModelError> {
        if b.meta.get("kind").and_then(|k| k.as_str()) != Some("toy_model") {
            return Err(ModelError::Config("bundle does not hold a toy model".into()));
        }
        let cfg: ToyModelConfig =
            serde_json::from_value(b.meta["config"].clone()).map_err(|e| ModelError::Config(e.to_string()))?;
        Self::from_params(cfg, b.tensors.clone())
    }
}
