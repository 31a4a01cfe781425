//! Synthetic labeled skeleton sequences for desk-scale training.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentError, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub n_views: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            n_per_class: 100,
            channels: 3,
            frames: 32,
            joints: 8,
            n_views: 3,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

/// Per-class motion: `base + amp · sin(2π·freq·t/T + phase)` per channel and joint.
struct ClassMotion {
    amp: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

/// Rotation angle of view `k` about the vertical axis, spread over ±45°.
pub fn view_angle(k: usize, n_views: usize) -> f64 {
    if n_views <= 1 {
        0.0
    } else {
        -FRAC_PI_4 + k as f64 * (2.0 * FRAC_PI_4) / (n_views - 1) as f64
    }
}

/// Rotates channels (x, z) of a `[C, T, V]` tensor about the y axis in place.
fn rotate_y(x: &mut Tensor, angle: f64) {
    let (c, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c < 3 || angle == 0.0 {
        return;
    }
    let (s, co) = angle.sin_cos();
    for f in 0..t {
        for j in 0..v {
            let (ix, iz) = (x.idx3(0, f, j), x.idx3(2, f, j));
            let (px, pz) = (x.data()[ix], x.data()[iz]);
            x.data_mut()[ix] = co * px + s * pz;
            x.data_mut()[iz] = -s * px + co * pz;
        }
    }
}

fn noise(sigma: f64) -> Result<Normal<f64>, AugmentError> {
    Normal::new(0.0, sigma).map_err(|e| AugmentError::Config(e.to_string()))
}

/// Generates `n_classes · n_per_class` one-hot samples of shape `[C, T, V]`,
/// class-major, sample `i` of each class captured from view `i % n_views`.
/// Channels beyond the first three are not rotated.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<Sample>, AugmentError> {
    if cfg.n_classes < 2 {
        return Err(AugmentError::Config("synthetic data needs at least two classes".into()));
    }
    if cfg.channels == 0 || cfg.frames == 0 || cfg.joints == 0 || cfg.n_views == 0 {
        return Err(AugmentError::Config("synthetic dimensions must be positive".into()));
    }
    if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
        return Err(AugmentError::Config(format!("noise_sigma = {} must be non-negative", cfg.noise_sigma)));
    }
    let (c, t, v) = (cfg.channels, cfg.frames, cfg.joints);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<f64> = (0..c * v).map(|_| rng.random_range(-1.0..1.0)).collect();
    let classes: Vec<ClassMotion> = (0..cfg.n_classes)
        .map(|_| ClassMotion {
            amp: (0..c * v).map(|_| rng.random_range(0.2..0.6)).collect(),
            freq: (0..v).map(|_| rng.random_range(1..=3) as f64).collect(),
            phase: (0..c * v).map(|_| rng.random_range(0.0..2.0 * PI)).collect(),
        })
        .collect();
    let normal = noise(cfg.noise_sigma)?;

    let mut out = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for (k, m) in classes.iter().enumerate() {
        for i in 0..cfg.n_per_class {
            let view = i % cfg.n_views;
            let mut x = Tensor::from_fn(vec![c, t, v], |idx| {
                let (ch, f, j) = (idx / (t * v), (idx / v) % t, idx % v);
                let cv = ch * v + j;
                base[cv] + m.amp[cv] * (2.0 * PI * m.freq[j] * f as f64 / t as f64 + m.phase[cv]).sin()
            });
            rotate_y(&mut x, view_angle(view, cfg.n_views));
            if cfg.noise_sigma > 0.0 {
                x.data_mut().iter_mut().for_each(|p| *p += normal.sample(&mut rng));
            }
            out.push(Sample::one_hot(format!("synth-c{k}-{i:04}"), x, k, cfg.n_classes, view as u32)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongRangeConfig {
    pub n_per_class: usize,
    pub frames: usize,
    pub joints: usize,
    /// Length of each informative segment at the two ends of the sequence.
    pub segment: usize,
    pub amplitude: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for LongRangeConfig {
    fn default() -> Self {
        Self {
            n_per_class: 100,
            frames: 64,
            joints: 4,
            segment: 8,
            amplitude: 1.0,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

/// Two-class task decided only by whether the motion sign at the start of the
/// sequence (inside its first third) agrees with the one at its end (inside
/// its last third). Class 0: signs agree, class 1: they differ. Each end on its
/// own carries no class information. Samples are class-major.
pub fn synth_long_range(cfg: &LongRangeConfig) -> Result<Vec<Sample>, AugmentError> {
    let (t, v, seg) = (cfg.frames, cfg.joints, cfg.segment);
    if seg == 0 || 3 * seg > t || v == 0 {
        return Err(AugmentError::Config(format!("segment {seg} must fit in a third of {t} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base: Vec<f64> = (0..3 * v).map(|_| rng.random_range(-1.0..1.0)).collect();
    let normal = noise(cfg.noise_sigma.max(0.0))?;
    let bump = |f: usize| (PI * (f as f64 + 0.5) / seg as f64).sin();
    let mut out = Vec::with_capacity(2 * cfg.n_per_class);
    for i in 0..2 * cfg.n_per_class {
        let class = i / cfg.n_per_class;
        let head: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let tail = if class == 0 { head } else { -head };
        let mut x = Tensor::from_fn(vec![3, t, v], |idx| base[(idx / (t * v)) * v + idx % v]);
        for f in 0..seg {
            for j in 0..v {
                for ch in 0..3 {
                    let a = cfg.amplitude * bump(f) * if ch == 1 { 1.0 } else { 0.5 };
                    let i0 = x.idx3(ch, f, j);
                    let i1 = x.idx3(ch, t - seg + f, j);
                    x.data_mut()[i0] += head * a;
                    x.data_mut()[i1] += tail * a;
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            x.data_mut().iter_mut().for_each(|p| *p += normal.sample(&mut rng));
        }
        out.push(Sample::one_hot(format!("longrange-{i:04}"), x, class, 2, 0)?);
    }
    Ok(out)
}

/// Deterministic split into (train, held-out) with `held_out` of every
/// `every` samples going to the held-out set.
pub fn split_every(samples: Vec<Sample>, every: usize, held_out: usize) -> (Vec<Sample>, Vec<Sample>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if i % every < held_out {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (train, test)
}
