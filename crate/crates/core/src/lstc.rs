//! Long-short term temporal convolution.
//!
//! One layer halves the temporal axis of a `[C_in, T, V]` feature map and maps
//! it to `C_out` channels by fusing two branches:
//!
//! - short: 7-tap stride-2 convolution, zero pad `(3, 2)`;
//! - long: stride-1 convolution whose kernel spans `T/2 + 3` frames but only
//!   carries weights at a sparse tap set (first three and last three by
//!   default), zero pad `(1, 1)`.
//!
//! Both outputs are `[C_out, T/2, V]`. They are projected into an alignment
//! space, compared by channel-axis cosine similarity (and a learnable `mu`
//! compared against the projected long features), and fused as
//! `F_s + (S_sl + S_mu_l) * F_l` with the weight broadcast over channels.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const SHORT_KERNEL: usize = 7;
pub const SHORT_PAD: (usize, usize) = (3, 2);
pub const LONG_PAD: (usize, usize) = (1, 1);
pub const COSINE_EPS: f64 = 1e-8;

/// Checkpoint names of the layer's tensors, in canonical order.
pub const PARAM_NAMES: [&str; 7] = ["w_short", "w_long", "P_s.W", "P_s.b", "P_l.W", "P_l.b", "mu"];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LstcError {
    #[error("invalid LSTC configuration: {0}")]
    Config(String),
    #[error("LSTC input: {0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Tap layouts for the long branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongKernelVariant {
    /// Offsets `{0,1,2}` and `{T/2, T/2+1, T/2+2}`.
    First3Last3,
    /// The first four and the last four positions of the span.
    First4Last4,
    /// Five taps spread evenly over the span, both ends included.
    Uniform5,
    /// Every even offset of the span.
    EveryOther,
}

impl LongKernelVariant {
    pub const ALL: [LongKernelVariant; 4] = [
        LongKernelVariant::Uniform5,
        LongKernelVariant::First3Last3,
        LongKernelVariant::First4Last4,
        LongKernelVariant::EveryOther,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LongKernelVariant::First3Last3 => "first3_last3",
            LongKernelVariant::First4Last4 => "first4_last4",
            LongKernelVariant::Uniform5 => "uniform5",
            LongKernelVariant::EveryOther => "every_other",
        }
    }
}

impl fmt::Display for LongKernelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LongKernelVariant {
    type Err = LstcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| LstcError::Config(format!("unknown long-kernel variant `{s}`")))
    }
}

/// Tap offsets of the long kernel for one input length.
///
/// Offsets are listed in kernel order and may repeat when the span is too
/// short to keep the two groups apart (e.g. `T = 4`); a repeated offset then
/// carries two independent weights that add up, so the learnable count is
/// always `|active_indices|` per channel pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LongKernelSpec {
    half_t: usize,
    variant: LongKernelVariant,
    taps: Vec<usize>,
}

impl LongKernelSpec {
    pub fn new(variant: LongKernelVariant, half_t: usize) -> Result<Self, LstcError> {
        if half_t == 0 {
            return Err(LstcError::Config("half_T must be at least 1".into()));
        }
        let span = half_t + 3;
        let taps = match variant {
            LongKernelVariant::First3Last3 => vec![0, 1, 2, half_t, half_t + 1, half_t + 2],
            LongKernelVariant::First4Last4 => {
                let mut t: Vec<usize> = (0..4).collect();
                t.extend(span - 4..span);
                t
            }
            LongKernelVariant::Uniform5 => (0..5)
                .map(|k| ((k * (span - 1)) as f64 / 4.0).round() as usize)
                .collect(),
            LongKernelVariant::EveryOther => (0..span).step_by(2).collect(),
        };
        Ok(Self { half_t, variant, taps })
    }

    /// Spec for a layer whose input has `t` frames.
    pub fn for_input(variant: LongKernelVariant, t: usize) -> Result<Self, LstcError> {
        if t % 2 != 0 {
            return Err(LstcError::Validation(format!("temporal length {t} is odd")));
        }
        Self::new(variant, t / 2)
    }

    pub fn half_t(&self) -> usize {
        self.half_t
    }

    pub fn span(&self) -> usize {
        self.half_t + 3
    }

    pub fn variant(&self) -> LongKernelVariant {
        self.variant
    }

    pub fn active_indices(&self) -> &[usize] {
        &self.taps
    }

    pub fn tap_count(&self) -> usize {
        self.taps.len()
    }
}

/// Learnable tensors of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LstcParams {
    /// `[C_out, C_in, 7, 1]`
    pub w_short: Tensor,
    /// `[C_out, C_in, |taps|, 1]`, one weight per active tap.
    pub w_long: Tensor,
    /// `[D, C_out]`
    pub ps_w: Tensor,
    /// `[D]`
    pub ps_b: Tensor,
    pub pl_w: Tensor,
    pub pl_b: Tensor,
    /// `[D, T/2, V]`
    pub mu: Tensor,
}

impl LstcParams {
    pub fn named(&self) -> [(&'static str, &Tensor); 7] {
        [
            ("w_short", &self.w_short),
            ("w_long", &self.w_long),
            ("P_s.W", &self.ps_w),
            ("P_s.b", &self.ps_b),
            ("P_l.W", &self.pl_w),
            ("P_l.b", &self.pl_b),
            ("mu", &self.mu),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 7] {
        [
            ("w_short", &mut self.w_short),
            ("w_long", &mut self.w_long),
            ("P_s.W", &mut self.ps_w),
            ("P_s.b", &mut self.ps_b),
            ("P_l.W", &mut self.pl_w),
            ("P_l.b", &mut self.pl_b),
            ("mu", &mut self.mu),
        ]
    }

    /// Records every tensor as a trainable leaf.
    pub fn record(&self, tape: &mut Tape) -> LstcVars {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone().into_param());
        LstcVars {
            w_short: leaf(&self.w_short),
            w_long: leaf(&self.w_long),
            ps_w: leaf(&self.ps_w),
            ps_b: leaf(&self.ps_b),
            pl_w: leaf(&self.pl_w),
            pl_b: leaf(&self.pl_b),
            mu: leaf(&self.mu),
        }
    }
}

/// Tape handles for [`LstcParams`].
#[derive(Debug, Clone, Copy)]
pub struct LstcVars {
    pub w_short: Var,
    pub w_long: Var,
    pub ps_w: Var,
    pub ps_b: Var,
    pub pl_w: Var,
    pub pl_b: Var,
    pub mu: Var,
}

impl LstcVars {
    pub fn all(&self) -> [Var; 7] {
        [self.w_short, self.w_long, self.ps_w, self.ps_b, self.pl_w, self.pl_b, self.mu]
    }
}

/// A configured layer: sizes, tap layout and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LstcLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub joints: usize,
    pub spec: LongKernelSpec,
    pub params: LstcParams,
}

fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

impl LstcLayer {
    /// Kernels and projections draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
    /// `mu` starts at zero. The alignment width equals `c_out`.
    pub fn init(
        c_in: usize,
        c_out: usize,
        t_in: usize,
        joints: usize,
        variant: LongKernelVariant,
        rng: &mut impl Rng,
    ) -> Result<Self, LstcError> {
        if c_in == 0 || c_out == 0 || joints == 0 {
            return Err(LstcError::Config("channel and joint counts must be positive".into()));
        }
        if t_in < 2 {
            return Err(LstcError::Config(format!("input length {t_in} too short to halve")));
        }
        let spec = LongKernelSpec::for_input(variant, t_in)?;
        let d = c_out;
        let half = t_in / 2;
        let taps = spec.tap_count();
        let params = LstcParams {
            w_short: uniform(vec![c_out, c_in, SHORT_KERNEL, 1], 1.0 / ((c_in * SHORT_KERNEL) as f64).sqrt(), rng),
            w_long: uniform(vec![c_out, c_in, taps, 1], 1.0 / ((c_in * taps) as f64).sqrt(), rng),
            ps_w: uniform(vec![d, c_out], 1.0 / (c_out as f64).sqrt(), rng),
            ps_b: uniform(vec![d], 1.0 / (c_out as f64).sqrt(), rng),
            pl_w: uniform(vec![d, c_out], 1.0 / (c_out as f64).sqrt(), rng),
            pl_b: uniform(vec![d], 1.0 / (c_out as f64).sqrt(), rng),
            mu: Tensor::zeros(vec![d, half, joints]),
        };
        Ok(Self { c_in, c_out, t_in, joints, spec, params })
    }

    /// Rebuilds a layer from stored tensors, checking every shape.
    pub fn from_params(
        c_in: usize,
        c_out: usize,
        t_in: usize,
        joints: usize,
        variant: LongKernelVariant,
        params: LstcParams,
    ) -> Result<Self, LstcError> {
        let spec = LongKernelSpec::for_input(variant, t_in)?;
        let d = c_out;
        let expect: [(&str, Vec<usize>); 7] = [
            ("w_short", vec![c_out, c_in, SHORT_KERNEL, 1]),
            ("w_long", vec![c_out, c_in, spec.tap_count(), 1]),
            ("P_s.W", vec![d, c_out]),
            ("P_s.b", vec![d]),
            ("P_l.W", vec![d, c_out]),
            ("P_l.b", vec![d]),
            ("mu", vec![d, t_in / 2, joints]),
        ];
        for ((name, shape), (_, t)) in expect.iter().zip(params.named()) {
            if t.shape() != shape.as_slice() {
                return Err(LstcError::Config(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(Self { c_in, c_out, t_in, joints, spec, params })
    }

    pub fn t_out(&self) -> usize {
        self.t_in / 2
    }

    pub fn param_count(&self) -> usize {
        learnable_param_count(self.c_in, self.c_out, self.c_out, self.t_in, self.joints, &self.spec)
    }

    /// Eager forward pass on a fresh tape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LstcError> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.params.record(&mut tape);
        let y = lstc_forward(&mut tape, xv, &vars, &self.spec)?;
        Ok(tape.value(y).clone())
    }
}

fn check_even(tape: &Tape, x: Var) -> Result<usize, LstcError> {
    let (_, t, _) = tape.value(x).dims3("lstc")?;
    if t % 2 != 0 || t < 2 {
        return Err(LstcError::Validation(format!("temporal length {t} must be even and >= 2")));
    }
    Ok(t)
}

/// 7-tap stride-2 convolution producing `[C_out, T/2, V]`.
pub fn short_branch(tape: &mut Tape, x: Var, w_short: Var) -> Result<Var, LstcError> {
    check_even(tape, x)?;
    if tape.value(w_short).shape().get(2) != Some(&SHORT_KERNEL) {
        return Err(LstcError::Validation(format!(
            "short kernel must have {SHORT_KERNEL} taps, got shape {:?}",
            tape.value(w_short).shape()
        )));
    }
    Ok(tape.conv_time(x, w_short, 2, SHORT_PAD)?)
}

/// Sparse long-range convolution producing `[C_out, T/2, V]`:
/// `y[n] = Σ_c Σ_{i ∈ taps} w[c, i] · x_pad[n + i]`.
pub fn long_branch(tape: &mut Tape, x: Var, w_long: Var, spec: &LongKernelSpec) -> Result<Var, LstcError> {
    let t = check_even(tape, x)?;
    if spec.half_t() * 2 != t {
        return Err(LstcError::Validation(format!(
            "long kernel built for T = {}, input has T = {t}",
            spec.half_t() * 2
        )));
    }
    Ok(tape.tap_conv(x, w_long, spec.active_indices(), spec.span(), 1, LONG_PAD)?)
}

/// Similarity-weighted fusion. Returns the fused features and the `[1, T/2, V]`
/// fusion weight `S_sl + S_mu_l`.
pub fn fuse_with_weight(tape: &mut Tape, fs: Var, fl: Var, p: &LstcVars) -> Result<(Var, Var), LstcError> {
    if tape.value(fs).shape() != tape.value(fl).shape() {
        return Err(TensorError::Dimension {
            op: "fuse",
            detail: format!("{:?} vs {:?}", tape.value(fs).shape(), tape.value(fl).shape()),
        }
        .into());
    }
    let fs_aligned = tape.linear_channels(fs, p.ps_w, p.ps_b)?;
    let fl_aligned = tape.linear_channels(fl, p.pl_w, p.pl_b)?;
    if tape.value(p.mu).shape() != tape.value(fl_aligned).shape() {
        return Err(TensorError::Dimension {
            op: "fuse",
            detail: format!("mu {:?} vs aligned features {:?}", tape.value(p.mu).shape(), tape.value(fl_aligned).shape()),
        }
        .into());
    }
    let s_sl = tape.cosine_sim_channel(fs_aligned, fl_aligned, COSINE_EPS)?;
    let s_mu = tape.cosine_sim_channel(p.mu, fl_aligned, COSINE_EPS)?;
    let weight = tape.add(s_sl, s_mu)?;
    let weighted = tape.scale_positions(weight, fl)?;
    let out = tape.add(fs, weighted)?;
    Ok((out, weight))
}

pub fn fuse(tape: &mut Tape, fs: Var, fl: Var, p: &LstcVars) -> Result<Var, LstcError> {
    fuse_with_weight(tape, fs, fl, p).map(|(out, _)| out)
}

pub fn lstc_forward(tape: &mut Tape, x: Var, p: &LstcVars, spec: &LongKernelSpec) -> Result<Var, LstcError> {
    let fs = short_branch(tape, x, p.w_short)?;
    let fl = long_branch(tape, x, p.w_long, spec)?;
    fuse(tape, fs, fl, p)
}

/// Per-branch learnable counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub short: usize,
    pub long: usize,
    pub projections: usize,
    pub mu: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.short + self.long + self.projections + self.mu
    }
}

pub fn param_breakdown(c_in: usize, c_out: usize, d: usize, t: usize, v: usize, spec: &LongKernelSpec) -> ParamBreakdown {
    ParamBreakdown {
        short: c_out * c_in * SHORT_KERNEL,
        long: c_out * c_in * spec.tap_count(),
        projections: 2 * (d * c_out + d),
        mu: d * (t / 2) * v,
    }
}

pub fn learnable_param_count(c_in: usize, c_out: usize, d: usize, t: usize, v: usize, spec: &LongKernelSpec) -> usize {
    param_breakdown(c_in, c_out, d, t, v, spec).total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn tap_sets_match_the_named_layouts() {
        let s = LongKernelSpec::new(LongKernelVariant::First3Last3, 32).unwrap();
        assert_eq!(s.active_indices(), &[0, 1, 2, 32, 33, 34]);
        assert_eq!(s.span(), 35);
        let s = LongKernelSpec::new(LongKernelVariant::First4Last4, 32).unwrap();
        assert_eq!(s.active_indices(), &[0, 1, 2, 3, 31, 32, 33, 34]);
        let s = LongKernelSpec::new(LongKernelVariant::Uniform5, 32).unwrap();
        assert_eq!(s.active_indices(), &[0, 9, 17, 26, 34]);
        let s = LongKernelSpec::new(LongKernelVariant::EveryOther, 8).unwrap();
        assert_eq!(s.active_indices(), &[0, 2, 4, 6, 8, 10]);
        for variant in LongKernelVariant::ALL {
            for half in 1..40 {
                let s = LongKernelSpec::new(variant, half).unwrap();
                assert!(s.active_indices().iter().all(|&i| i < s.span()), "{variant} {half}");
            }
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in LongKernelVariant::ALL {
            assert_eq!(v.name().parse::<LongKernelVariant>().unwrap(), v);
        }
        assert!("first5_last5".parse::<LongKernelVariant>().is_err());
    }

    #[test]
    fn short_branch_shape() {
        let mut r = rng();
        let mut tape = Tape::new();
        let x = tape.constant(random(vec![2, 64, 25], &mut r));
        let w = tape.constant(random(vec![2, 2, 7, 1], &mut r));
        let y = short_branch(&mut tape, x, w).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 32, 25]);
    }

    #[test]
    fn short_branch_center_tap_subsamples() {
        let mut r = rng();
        let xin = random(vec![2, 16, 3], &mut r);
        let mut w = Tensor::zeros(vec![2, 2, 7, 1]);
        // Center tap sits at offset 3, which the left pad of 3 aligns with frame 2n.
        w.data_mut()[3] = 1.0;
        w.data_mut()[(2 + 1) * 7 + 3] = 1.0;
        let mut tape = Tape::new();
        let x = tape.constant(xin.clone());
        let wv = tape.constant(w);
        let y = short_branch(&mut tape, x, wv).unwrap();
        let y = tape.value(y);
        for c in 0..2 {
            for n in 0..8 {
                for v in 0..3 {
                    assert_eq!(y.at3(c, n, v), xin.at3(c, 2 * n, v));
                }
            }
        }
    }

    #[test]
    fn odd_length_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 9, 1]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 7, 1]));
        assert!(matches!(short_branch(&mut tape, x, w), Err(LstcError::Validation(_))));
        assert!(LongKernelSpec::for_input(LongKernelVariant::First3Last3, 9).is_err());
    }

    #[test]
    fn long_branch_span_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![1, 16, 1]));
        let w = tape.constant(Tensor::zeros(vec![1, 1, 6, 1]));
        let spec = LongKernelSpec::new(LongKernelVariant::First3Last3, 4).unwrap();
        assert!(matches!(long_branch(&mut tape, x, w, &spec), Err(LstcError::Validation(_))));
    }

    #[test]
    fn long_branch_shape_at_64() {
        let mut r = rng();
        let spec = LongKernelSpec::for_input(LongKernelVariant::First3Last3, 64).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random(vec![3, 64, 5], &mut r));
        let w = tape.constant(random(vec![4, 3, 6, 1], &mut r));
        let y = long_branch(&mut tape, x, w, &spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 32, 5]);
    }

    #[test]
    fn long_branch_ignores_inactive_frame() {
        // With pad 1, output n reads frames n-1..n+1 and n+31..n+33; frame 16
        // is never read by n = 0.
        let mut r = rng();
        let spec = LongKernelSpec::for_input(LongKernelVariant::First3Last3, 64).unwrap();
        let xin = random(vec![2, 64, 3], &mut r);
        let w = random(vec![2, 2, 6, 1], &mut r);
        let run = |x: Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let wv = tape.constant(w.clone());
            let y = long_branch(&mut tape, xv, wv, &spec).unwrap();
            tape.value(y).clone()
        };
        let base = run(xin.clone());
        let mut moved = xin.clone();
        for c in 0..2 {
            for v in 0..3 {
                let i = moved.idx3(c, 16, v);
                moved.data_mut()[i] += 123.0;
            }
        }
        let after = run(moved);
        for c in 0..2 {
            for v in 0..3 {
                assert_eq!(base.at3(c, 0, v).to_bits(), after.at3(c, 0, v).to_bits());
            }
        }
    }

    #[test]
    fn fuse_zero_long_returns_short() {
        let mut r = rng();
        let layer = LstcLayer::init(3, 3, 8, 2, LongKernelVariant::First3Last3, &mut r).unwrap();
        let mut tape = Tape::new();
        let p = layer.params.record(&mut tape);
        let fs = tape.constant(random(vec![3, 4, 2], &mut r));
        let fl = tape.constant(Tensor::zeros(vec![3, 4, 2]));
        let out = fuse(&mut tape, fs, fl, &p).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(fs).data());
    }

    #[test]
    fn fuse_maximal_similarity_doubles_long() {
        // Identity projections without bias and mu == F_l make both
        // similarities exactly 1.
        let mut r = rng();
        let (c, t, v) = (3, 4, 2);
        let fl_t = random(vec![c, t, v], &mut r);
        let fs_t = fl_t.clone();
        let eye = Tensor::from_fn(vec![c, c], |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 });
        let params = LstcParams {
            w_short: Tensor::zeros(vec![c, c, 7, 1]),
            w_long: Tensor::zeros(vec![c, c, 6, 1]),
            ps_w: eye.clone(),
            ps_b: Tensor::zeros(vec![c]),
            pl_w: eye,
            pl_b: Tensor::zeros(vec![c]),
            mu: fl_t.clone(),
        };
        let mut tape = Tape::new();
        let p = params.record(&mut tape);
        let fs = tape.constant(fs_t.clone());
        let fl = tape.constant(fl_t.clone());
        let (out, weight) = fuse_with_weight(&mut tape, fs, fl, &p).unwrap();
        assert!(tape.value(weight).data().iter().all(|w| (w - 2.0).abs() < 1e-12));
        for ((o, s), l) in tape.value(out).data().iter().zip(fs_t.data()).zip(fl_t.data()) {
            assert!((o - (s + 2.0 * l)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_except_short_is_plain_strided_conv() {
        let mut r = rng();
        let mut layer = LstcLayer::init(2, 3, 8, 2, LongKernelVariant::First3Last3, &mut r).unwrap();
        for (name, t) in layer.params.named_mut() {
            if name != "w_short" {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = random(vec![2, 8, 2], &mut r);
        let y = layer.forward(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(layer.params.w_short.clone());
        let plain = tape.conv_time(xv, wv, 2, SHORT_PAD).unwrap();
        assert_eq!(y.data(), tape.value(plain).data());
    }

    #[test]
    fn three_layers_reach_an_eighth() {
        let mut r = rng();
        let mut x = random(vec![2, 64, 3], &mut r);
        let mut c = 2;
        for c_out in [4, 4, 4] {
            let layer = LstcLayer::init(c, c_out, x.shape()[1], 3, LongKernelVariant::First3Last3, &mut r).unwrap();
            x = layer.forward(&x).unwrap();
            c = c_out;
        }
        assert_eq!(x.shape(), &[4, 8, 3]);
    }

    #[test]
    fn param_counts() {
        let spec = |v| LongKernelSpec::new(v, 32).unwrap();
        let c = 5;
        let long = |v| param_breakdown(c, c, c, 64, 25, &spec(v)).long;
        assert_eq!(long(LongKernelVariant::First3Last3), 6 * c * c);
        assert_eq!(long(LongKernelVariant::First4Last4), 8 * c * c);
        assert_eq!(long(LongKernelVariant::Uniform5), 5 * c * c);
        let s = spec(LongKernelVariant::First3Last3);
        assert_eq!(
            learnable_param_count(3, 4, 4, 16, 5, &LongKernelSpec::new(LongKernelVariant::First3Last3, 8).unwrap()),
            4 * 3 * 7 + 4 * 3 * 6 + 2 * (4 * 4 + 4) + 4 * 8 * 5
        );
        let mut r = rng();
        let layer = LstcLayer::init(3, 4, 64, 25, LongKernelVariant::First3Last3, &mut r).unwrap();
        let stored: usize = layer.params.named().iter().map(|(_, t)| t.numel()).sum();
        assert_eq!(stored, layer.param_count());
        assert_eq!(s.tap_count(), 6);
    }

    #[test]
    fn from_params_checks_shapes() {
        let mut r = rng();
        let layer = LstcLayer::init(2, 3, 8, 2, LongKernelVariant::Uniform5, &mut r).unwrap();
        let ok = LstcLayer::from_params(2, 3, 8, 2, LongKernelVariant::Uniform5, layer.params.clone());
        assert_eq!(ok.unwrap(), layer);
        let bad = LstcLayer::from_params(2, 3, 8, 2, LongKernelVariant::First3Last3, layer.params.clone());
        assert!(matches!(bad, Err(LstcError::Config(_))));
    }
}
