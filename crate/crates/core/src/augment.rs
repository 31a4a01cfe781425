//! Enhanced joint-mixing augmentation.
//!
//! Samples are first aligned to a dataset-wide frame and body count by cyclic
//! repetition, then mixed with partners from the same minibatch:
//!
//! - temporal mix: splice a contiguous block of frames from the partner;
//! - spatial mix: swap whole body parts with the partner;
//! - additive mix: `x = λ·a + (1-λ)·b`, `λ ~ Beta(2, 2)`.
//!
//! Labels follow the share of content taken from each parent. Under
//! view-consistent mode partners always share the sample's view group.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::skeleton::{Body, Frame, Joint, SkeletonSequence};
use crate::tensor::{Tensor, TensorError};

const NTU25_PARTITION: &str = include_str!("../data/ntu25_partition.json");

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("cannot mix view group {a} with view group {b} in view-consistent mode")]
    Pairing { a: u32, b: u32 },
    #[error("sample shapes differ: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("augmentation config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A training-ready sample: `x` is `[C, T, V·M]`, `y` a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x: Tensor,
    pub y: Vec<f64>,
    pub view_group: u32,
}

impl Sample {
    pub fn new(id: impl Into<String>, x: Tensor, y: Vec<f64>, view_group: u32) -> Result<Self, AugmentError> {
        x.dims3("Sample").map_err(AugmentError::Tensor)?;
        let sum: f64 = y.iter().sum();
        if y.is_empty() || y.iter().any(|&p| p < 0.0 || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(AugmentError::Validation(format!("label is not a probability vector (sum {sum})")));
        }
        Ok(Self { id: id.into(), x, y, view_group })
    }

    pub fn one_hot(id: impl Into<String>, x: Tensor, class: usize, n_classes: usize, view_group: u32) -> Result<Self, AugmentError> {
        if class >= n_classes {
            return Err(AugmentError::Validation(format!("class {class} outside 0..{n_classes}")));
        }
        let mut y = vec![0.0; n_classes];
        y[class] = 1.0;
        Self::new(id, x, y, view_group)
    }

    /// Index of the dominant label entry (first one on ties).
    pub fn class(&self) -> usize {
        argmax(&self.y)
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.x.shape()[2]
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_temporal: f64,
    pub p_spatial: f64,
    pub p_additive: f64,
    /// Both shape parameters of the Beta distribution for λ.
    pub beta_alpha: f64,
    pub view_consistent: bool,
    pub rng_seed: u64,
    /// Test hook: use this additive λ instead of sampling one.
    pub force_lambda: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_temporal: 0.5,
            p_spatial: 0.5,
            p_additive: 0.5,
            beta_alpha: 2.0,
            view_consistent: true,
            rng_seed: 0,
            force_lambda: None,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn disabled() -> Self {
        Self { p_temporal: 0.0, p_spatial: 0.0, p_additive: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, p) in [("p_temporal", self.p_temporal), ("p_spatial", self.p_spatial), ("p_additive", self.p_additive)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.beta_alpha > 0.0 && self.beta_alpha.is_finite()) {
            return Err(AugmentError::Config(format!("beta_alpha = {} must be positive", self.beta_alpha)));
        }
        if let Some(l) = self.force_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(AugmentError::Config(format!("force_lambda = {l} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.p_temporal == 0.0 && self.p_spatial == 0.0 && self.p_additive == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub joints: Vec<usize>,
}

/// Named joint groups covering every joint of one body exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartition {
    parts: Vec<BodyPart>,
    joints: usize,
}

impl BodyPartition {
    pub fn new(parts: Vec<BodyPart>) -> Result<Self, AugmentError> {
        let joints: usize = parts.iter().map(|p| p.joints.len()).sum();
        let mut seen = vec![false; joints];
        for p in &parts {
            if p.joints.is_empty() {
                return Err(AugmentError::Config(format!("body part `{}` is empty", p.name)));
            }
            for &j in &p.joints {
                if j >= joints || seen[j] {
                    return Err(AugmentError::Config(format!(
                        "partition does not cover joints 0..{joints} exactly once (joint {j} in `{}`)",
                        p.name
                    )));
                }
                seen[j] = true;
            }
        }
        if parts.len() < 2 {
            return Err(AugmentError::Config("spatial mixing needs at least two body parts".into()));
        }
        Ok(Self { parts, joints })
    }

    pub fn ntu25() -> Self {
        Self::from_json(NTU25_PARTITION).expect("bundled NTU partition is valid")
    }

    /// One part per joint.
    pub fn singletons(joints: usize) -> Result<Self, AugmentError> {
        Self::new((0..joints).map(|j| BodyPart { name: format!("joint{j}"), joints: vec![j] }).collect())
    }

    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let parts: Vec<BodyPart> = serde_json::from_str(text).map_err(|e| AugmentError::Config(e.to_string()))?;
        Self::new(parts)
    }

    pub fn parts(&self) -> &[BodyPart] {
        &self.parts
    }

    /// Joints per body.
    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }
}

/// Which operator produced a mixing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MixOp {
    Temporal,
    Spatial,
    Additive,
}

/// Provenance of one mixing step applied to a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixEvent {
    pub op: MixOp,
    pub partner: usize,
    pub partner_view: u32,
    /// Weight given to the partner's label.
    pub partner_weight: f64,
}

/// Pads a raw sequence to `t_max` frames and `m_max` bodies by cyclic
/// repetition and merges the body axis into the joint axis (`m * V + v`).
///
/// Frames without any body are dropped before repetition; frames with more
/// than `m_max` bodies keep the first `m_max`.
pub fn align_sample(
    raw: &SkeletonSequence,
    t_max: usize,
    m_max: usize,
    id: impl Into<String>,
    y: Vec<f64>,
    view_group: u32,
) -> Result<Sample, AugmentError> {
    let frames: Vec<&Frame> = raw.occupied_frames().collect();
    if frames.is_empty() {
        return Err(AugmentError::Validation("sequence has no frame with a body".into()));
    }
    if t_max == 0 || m_max == 0 {
        return Err(AugmentError::Validation("alignment targets must be positive".into()));
    }
    if frames.len() > t_max {
        return Err(AugmentError::Validation(format!("{} frames exceed the alignment length {t_max}", frames.len())));
    }
    let v = raw.joints_per_body().unwrap_or(0);
    if v == 0 {
        return Err(AugmentError::Validation("bodies carry no joints".into()));
    }
    let mut x = Tensor::zeros(vec![3, t_max, v * m_max]);
    for t in 0..t_max {
        let bodies = &frames[t % frames.len()].bodies;
        for m in 0..m_max {
            let body = &bodies[m % bodies.len().min(m_max)];
            for (j, joint) in body.joints.iter().enumerate() {
                for c in 0..3 {
                    let i = x.idx3(c, t, m * v + j);
                    x.data_mut()[i] = joint.pos[c];
                }
            }
        }
    }
    Sample::new(id, x, y, view_group)
}

/// Splits a merged `[3, T, V·M]` tensor back into a sequence of `M` bodies.
pub fn unmerge_bodies(x: &Tensor, joints_per_body: usize) -> Result<SkeletonSequence, AugmentError> {
    let (c, t, vm) = x.dims3("unmerge_bodies")?;
    if c != 3 || joints_per_body == 0 || vm % joints_per_body != 0 {
        return Err(AugmentError::Shape(x.shape().to_vec(), vec![3, t, joints_per_body]));
    }
    let frames = (0..t)
        .map(|f| Frame {
            bodies: (0..vm / joints_per_body)
                .map(|m| Body {
                    id: m as u64,
                    joints: (0..joints_per_body)
                        .map(|j| Joint {
                            pos: [0, 1, 2].map(|ch| x.at3(ch, f, m * joints_per_body + j)),
                            tracking: 2,
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    Ok(SkeletonSequence { frames, metadata: None })
}

fn check_pair(a: &Sample, b: &Sample, view_consistent: bool) -> Result<(), AugmentError> {
    if a.x.shape() != b.x.shape() {
        return Err(AugmentError::Shape(a.x.shape().to_vec(), b.x.shape().to_vec()));
    }
    if a.y.len() != b.y.len() {
        return Err(AugmentError::Validation(format!("label sizes differ: {} vs {}", a.y.len(), b.y.len())));
    }
    if view_consistent && a.view_group != b.view_group {
        return Err(AugmentError::Pairing { a: a.view_group, b: b.view_group });
    }
    Ok(())
}

/// `(1 - w)·a + w·b`, returning a parent unchanged at either endpoint.
fn blend(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    if w == 0.0 {
        a.to_vec()
    } else if w == 1.0 {
        b.to_vec()
    } else {
        a.iter().zip(b).map(|(x, y)| (1.0 - w) * x + w * y).collect()
    }
}

fn mixed(a: &Sample, x: Tensor, y: Vec<f64>) -> Sample {
    Sample { id: a.id.clone(), x, y, view_group: a.view_group }
}

/// `x = λ·a.x + (1-λ)·b.x`, `y = λ·a.y + (1-λ)·b.y`.
pub fn additive_mix(a: &Sample, b: &Sample, lambda: f64, view_consistent: bool) -> Result<Sample, AugmentError> {
    check_pair(a, b, view_consistent)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::Validation(format!("lambda {lambda} outside [0, 1]")));
    }
    let w = 1.0 - lambda;
    let x = Tensor::new(a.x.shape().to_vec(), blend(a.x.data(), b.x.data(), w))?;
    Ok(mixed(a, x, blend(&a.y, &b.y, w)))
}

/// Replaces frames `offset..offset + len` of `a` with the same frames of `b`.
pub fn temporal_splice(a: &Sample, b: &Sample, len: usize, offset: usize, view_consistent: bool) -> Result<Sample, AugmentError> {
    check_pair(a, b, view_consistent)?;
    let (c, t, v) = a.x.dims3("temporal_mix")?;
    if offset + len > t {
        return Err(AugmentError::Validation(format!("block {offset}+{len} exceeds {t} frames")));
    }
    let mut x = a.x.clone();
    for ch in 0..c {
        let lo = (ch * t + offset) * v;
        let hi = (ch * t + offset + len) * v;
        x.data_mut()[lo..hi].copy_from_slice(&b.x.data()[lo..hi]);
    }
    Ok(mixed(a, x, blend(&a.y, &b.y, len as f64 / t as f64)))
}

fn beta(alpha: f64) -> Result<Beta<f64>, AugmentError> {
    Beta::new(alpha, alpha).map_err(|e| AugmentError::Config(e.to_string()))
}

/// Draws `λ ~ Beta(α, α)`, splices `round(λ·T)` frames at a uniform offset.
/// Returns the mixed sample and the partner's label weight.
pub fn temporal_mix(a: &Sample, b: &Sample, alpha: f64, view_consistent: bool, rng: &mut impl Rng) -> Result<(Sample, f64), AugmentError> {
    let t = a.frames();
    let lambda = beta(alpha)?.sample(rng);
    let len = ((lambda * t as f64).round() as usize).min(t);
    let offset = rng.random_range(0..=t - len);
    let s = temporal_splice(a, b, len, offset, view_consistent)?;
    Ok((s, len as f64 / t as f64))
}

/// Replaces the joints of the selected parts (in every body slot) of `a` with
/// those of `b`. `mask[k]` selects part `k`.
pub fn spatial_swap(a: &Sample, b: &Sample, partition: &BodyPartition, mask: &[bool], view_consistent: bool) -> Result<Sample, AugmentError> {
    check_pair(a, b, view_consistent)?;
    let (c, t, vm) = a.x.dims3("spatial_mix")?;
    let v = partition.joints();
    if vm % v != 0 {
        return Err(AugmentError::Config(format!("partition covers {v} joints but samples have {vm}")));
    }
    if mask.len() != partition.parts().len() {
        return Err(AugmentError::Validation(format!("mask has {} entries for {} parts", mask.len(), partition.parts().len())));
    }
    let mut x = a.x.clone();
    let mut swapped = 0;
    for (part, _) in partition.parts().iter().zip(mask).filter(|(_, &on)| on) {
        for m in 0..vm / v {
            for &j in &part.joints {
                swapped += 1;
                for ch in 0..c {
                    for f in 0..t {
                        let i = x.idx3(ch, f, m * v + j);
                        x.data_mut()[i] = b.x.data()[i];
                    }
                }
            }
        }
    }
    Ok(mixed(a, x, blend(&a.y, &b.y, swapped as f64 / vm as f64)))
}

/// Swaps a uniformly drawn non-empty, non-full subset of body parts.
pub fn spatial_mix(a: &Sample, b: &Sample, partition: &BodyPartition, view_consistent: bool, rng: &mut impl Rng) -> Result<(Sample, f64), AugmentError> {
    let k = partition.parts().len();
    let mask = loop {
        let m: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
        let on = m.iter().filter(|&&x| x).count();
        if on > 0 && on < k {
            break m;
        }
    };
    let s = spatial_swap(a, b, partition, &mask, view_consistent)?;
    let rho = blend_weight(&mask, partition);
    Ok((s, rho))
}

fn blend_weight(mask: &[bool], partition: &BodyPartition) -> f64 {
    let swapped: usize = partition.parts().iter().zip(mask).filter(|(_, &on)| on).map(|(p, _)| p.joints.len()).sum();
    swapped as f64 / partition.joints() as f64
}

/// Candidate partners per sample.
struct Partners {
    groups: Vec<Vec<usize>>,
}

impl Partners {
    fn new(batch: &[Sample], view_consistent: bool) -> Self {
        let n = batch.len();
        if !view_consistent {
            return Self { groups: vec![(0..n).collect()] };
        }
        let mut by_view: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, s) in batch.iter().enumerate() {
            by_view.entry(s.view_group).or_default().push(i);
        }
        Self { groups: batch.iter().map(|s| by_view[&s.view_group].clone()).collect() }
    }

    fn draw(&self, i: usize, rng: &mut impl Rng) -> usize {
        if self.groups.len() == 1 {
            let all = &self.groups[0];
            return all[rng.random_range(0..all.len())];
        }
        let group = &self.groups[i];
        if group.len() == 1 {
            return i;
        }
        // Uniform over the other members of the group.
        let k = rng.random_range(0..group.len() - 1);
        let own = group.iter().position(|&j| j == i).unwrap();
        group[if k >= own { k + 1 } else { k }]
    }
}

/// One partner per sample: among same-view members (self when alone) under
/// view-consistent mode, otherwise uniform over the whole batch.
pub fn pair_for_mix(batch: &[Sample], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let partners = Partners::new(batch, cfg.view_consistent);
    (0..batch.len()).map(|i| (i, partners.draw(i, rng))).collect()
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-sample stream derived from a batch key and the sample id, so results
/// do not depend on processing order.
fn sample_rng(batch_key: u64, id: &str) -> ChaCha8Rng {
    let mut z = batch_key ^ fnv1a(id);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Applies temporal, spatial and additive mixing, each independently with its
/// probability, in that order, each step with a freshly drawn partner from the
/// original batch.
pub fn apply_pipeline(batch: &[Sample], cfg: &AugmentConfig, partition: Option<&BodyPartition>, rng: &mut impl Rng) -> Result<Vec<Sample>, AugmentError> {
    apply_pipeline_traced(batch, cfg, partition, rng).map(|(s, _)| s)
}

/// [`apply_pipeline`] plus the mixing steps applied to each sample.
pub fn apply_pipeline_traced(
    batch: &[Sample],
    cfg: &AugmentConfig,
    partition: Option<&BodyPartition>,
    rng: &mut impl Rng,
) -> Result<(Vec<Sample>, Vec<Vec<MixEvent>>), AugmentError> {
    cfg.validate()?;
    if cfg.p_spatial > 0.0 && partition.is_none() {
        return Err(AugmentError::Config("spatial mixing enabled without a body partition".into()));
    }
    let batch_key: u64 = rng.random();
    let partners = Partners::new(batch, cfg.view_consistent);
    let additive = beta(cfg.beta_alpha)?;
    let mut out = Vec::with_capacity(batch.len());
    let mut trace = Vec::with_capacity(batch.len());
    for (i, sample) in batch.iter().enumerate() {
        let mut r = sample_rng(batch_key, &sample.id);
        let mut cur = sample.clone();
        let mut events = Vec::new();
        let use_t = r.random_bool(cfg.p_temporal);
        let use_s = r.random_bool(cfg.p_spatial);
        let use_a = r.random_bool(cfg.p_additive);
        if use_t {
            let j = partners.draw(i, &mut r);
            let (s, w) = temporal_mix(&cur, &batch[j], cfg.beta_alpha, cfg.view_consistent, &mut r)?;
            cur = s;
            events.push(MixEvent { op: MixOp::Temporal, partner: j, partner_view: batch[j].view_group, partner_weight: w });
        }
        if use_s {
            let j = partners.draw(i, &mut r);
            let (s, w) = spatial_mix(&cur, &batch[j], partition.unwrap(), cfg.view_consistent, &mut r)?;
            cur = s;
            events.push(MixEvent { op: MixOp::Spatial, partner: j, partner_view: batch[j].view_group, partner_weight: w });
        }
        if use_a {
            let j = partners.draw(i, &mut r);
            let lambda = match cfg.force_lambda {
                Some(l) => l,
                None => additive.sample(&mut r),
            };
            cur = additive_mix(&cur, &batch[j], lambda, cfg.view_consistent)?;
            events.push(MixEvent { op: MixOp::Additive, partner: j, partner_view: batch[j].view_group, partner_weight: 1.0 - lambda });
        }
        out.push(cur);
        trace.push(events);
    }
    Ok((out, trace))
}
