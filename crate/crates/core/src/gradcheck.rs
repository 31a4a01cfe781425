//! Analytic-vs-finite-difference gradient comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lstc::{lstc_forward, LongKernelVariant, LstcError, LstcLayer, LstcVars};
use crate::model::{smooth_labels, ModelError, ToyModel, ToyModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Test hook: negate the analytic gradient of the named tensor.
    pub flip_sign_of: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            flip_sign_of: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// Largest `|a - n| / max(|a|, |n|)` over elements that fail the absolute test.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients of `loss` against central differences for every
/// element of every tensor in `params`. `build` must be a pure function of
/// the parameter values.
pub fn gradcheck<F>(params: &[(String, Tensor)], opts: &GradcheckOptions, build: F) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone().into_param()))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let mut analytic = tape
            .grad(vars[pi])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        if opts.flip_sign_of.as_deref() == Some(name.as_str()) {
            analytic.iter_mut().for_each(|g| *g = -*g);
        }
        let mut check = ParamCheck {
            name: name.clone(),
            numel: t.numel(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            passed: true,
        };
        for i in 0..t.numel() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + opts.step;
            let up = eval(&values)?;
            values[pi].data_mut()[i] = orig - opts.step;
            let down = eval(&values)?;
            values[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let abs = (analytic[i] - numeric).abs();
            let scale = analytic[i].abs().max(numeric.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            check.max_abs_err = check.max_abs_err.max(abs);
            let ok = abs <= opts.abs_tol || rel <= opts.rel_tol;
            if !ok {
                check.passed = false;
            }
            if !ok || abs > opts.abs_tol {
                if rel > check.max_rel_err {
                    check.max_rel_err = rel;
                    check.worst_index = i;
                }
            }
        }
        report.push(check);
    }
    Ok(GradcheckReport { params: report })
}

/// Largest size allowed on any axis of a stack check.
pub const MAX_CHECK_DIM: usize = 8;

/// A stack of LSTC layers checked under a random linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstcCheckConfig {
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub layers: usize,
    pub variant: LongKernelVariant,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for LstcCheckConfig {
    fn default() -> Self {
        let o = GradcheckOptions::default();
        Self {
            channels: 3,
            frames: 8,
            joints: 4,
            layers: 1,
            variant: LongKernelVariant::First3Last3,
            seed: 0,
            step: o.step,
            rel_tol: o.rel_tol,
            abs_tol: o.abs_tol,
        }
    }
}

impl LstcCheckConfig {
    pub fn validate(&self) -> Result<(), LstcError> {
        let dims = [self.channels, self.frames, self.joints];
        if dims.iter().any(|&d| d == 0 || d > MAX_CHECK_DIM) {
            return Err(LstcError::Config(format!("dims {dims:?} must lie in 1..={MAX_CHECK_DIM}")));
        }
        if self.layers == 0 || self.frames % (1 << self.layers) != 0 {
            return Err(LstcError::Config(format!("{} frames cannot be halved {} times", self.frames, self.layers)));
        }
        Ok(())
    }

    pub fn options(&self, flip_sign_of: Option<String>) -> GradcheckOptions {
        GradcheckOptions { step: self.step, rel_tol: self.rel_tol, abs_tol: self.abs_tol, flip_sign_of }
    }
}

fn random_like(t: &Tensor, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(-0.5..0.5))
}

/// Checks every parameter of every layer (`layer{i}.w_short`, ...) plus the
/// input. `mu` is drawn at random: at its zero initialization the clamped
/// cosine norm is not differentiable.
pub fn check_lstc_stack(cfg: &LstcCheckConfig, opts: &GradcheckOptions) -> Result<GradcheckReport, LstcError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::new();
    let mut specs = Vec::new();
    for i in 0..cfg.layers {
        let t = cfg.frames >> i;
        let mut layer = LstcLayer::init(cfg.channels, cfg.channels, t, cfg.joints, cfg.variant, &mut rng)?;
        layer.params.mu = random_like(&layer.params.mu, &mut rng);
        specs.push(layer.spec.clone());
        params.extend(layer.params.named().map(|(n, t)| (format!("layer{i}.{n}"), t.clone())));
    }
    let x = Tensor::from_fn(vec![cfg.channels, cfg.frames, cfg.joints], |_| rng.random_range(-1.0..1.0));
    let out_t = cfg.frames >> cfg.layers;
    let readout = Tensor::from_fn(vec![cfg.channels, out_t, cfg.joints], |_| rng.random_range(-1.0..1.0));
    params.push(("input".to_string(), x));
    let n_layers = cfg.layers;
    Ok(gradcheck(&params, opts, |tape, v| {
        let mut h = v[7 * n_layers];
        for (i, spec) in specs.iter().enumerate() {
            let p = &v[7 * i..7 * i + 7];
            let lv = LstcVars { w_short: p[0], w_long: p[1], ps_w: p[2], ps_b: p[3], pl_w: p[4], pl_b: p[5], mu: p[6] };
            h = lstc_forward(tape, h, &lv, spec).map_err(|e| match e {
                LstcError::Tensor(t) => t,
                other => TensorError::Usage(other.to_string()),
            })?;
        }
        let r = tape.constant(readout.clone());
        let y = tape.mul(h, r)?;
        tape.sum(y)
    })?)
}

/// Checks every parameter of a toy model under the smoothed KL loss on two
/// random samples. Every `mu` is moved off zero first.
pub fn check_toy_model(cfg: &ToyModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport, ModelError> {
    let mut model = ToyModel::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.params_mut() {
        if name.ends_with(".mu") {
            *t = random_like(t, &mut rng);
        }
    }
    let shape = vec![cfg.in_channels, cfg.t_in, cfg.joints];
    let xs: Vec<Tensor> = (0..2).map(|_| Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0))).collect();
    let mut target = Vec::new();
    for i in 0..2 {
        let mut y = vec![0.0; cfg.n_classes];
        y[i % cfg.n_classes] = 1.0;
        target.extend(smooth_labels(&y, 0.1));
    }
    let names: Vec<(String, Tensor)> = model.params().to_vec();
    let report = gradcheck(&names, opts, |tape, v| {
        let logits = xs
            .iter()
            .map(|x| {
                let xv = tape.constant(x.clone());
                model.forward(tape, v, xv).map(|o| o.logits).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::Usage(other.to_string()),
                })
            })
            .collect::<Result<Vec<Var>, _>>()?;
        let stacked = tape.stack(&logits)?;
        tape.kl_loss(stacked, &target)
    })?;
    Ok(report)
}
