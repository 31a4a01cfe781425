//! NTU RGB+D `.skeleton` text format.
//!
//! Layout, one item per line:
//!
//! ```text
//! <frame count>
//! per frame:   <body count>
//! per body:    <body id> + 9 body-info fields
//!              <joint count>
//!              per joint: x y z depthX depthY colorX colorY oriW oriX oriY oriZ trackingState
//! ```
//!
//! Only the camera-space `(x, y, z)` and the tracking state are kept.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NTU_JOINTS: usize = 25;
const BODY_INFO_FIELDS: usize = 10;
const JOINT_FIELDS: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unexpected end of input, expected {expected}")]
    Truncated { line: usize, expected: String },
    #[error("invalid sample name `{0}`: expected SsssCcccPpppRrrrAaaa")]
    SampleName(String),
}

impl ParseError {
    /// 1-based line number the error points at, when it has one.
    pub fn line(&self) -> Option<usize> {
        match self {
            ParseError::Syntax { line, .. } | ParseError::Truncated { line, .. } => Some(*line),
            ParseError::SampleName(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub pos: [f64; 3],
    pub tracking: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub id: u64,
    pub joints: Vec<Joint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Frame {
    pub bodies: Vec<Body>,
}

/// Fields encoded in an NTU sample name such as `S001C002P003R002A013`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub setup: u32,
    pub camera: u32,
    pub performer: u32,
    pub replication: u32,
    pub action: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub frames: Vec<Frame>,
    pub metadata: Option<SampleMetadata>,
}

impl SkeletonSequence {
    /// Joints per body, taken from the first body present.
    pub fn joints_per_body(&self) -> Option<usize> {
        self.frames
            .iter()
            .flat_map(|f| f.bodies.first())
            .map(|b| b.joints.len())
            .next()
    }

    pub fn max_bodies(&self) -> usize {
        self.frames.iter().map(|f| f.bodies.len()).max().unwrap_or(0)
    }

    /// Frames that contain at least one body.
    pub fn occupied_frames(&self) -> impl Iterator<Item = &Frame> {
        self.frames.iter().filter(|f| !f.bodies.is_empty())
    }

    /// Translates every joint so the first body's root joint in the first
    /// occupied frame sits at the origin.
    pub fn centered(&self) -> SkeletonSequence {
        let origin = self
            .occupied_frames()
            .next()
            .and_then(|f| f.bodies[0].joints.first())
            .map(|j| j.pos)
            .unwrap_or([0.0; 3]);
        let mut out = self.clone();
        for j in out.frames.iter_mut().flat_map(|f| f.bodies.iter_mut()).flat_map(|b| b.joints.iter_mut()) {
            for (p, o) in j.pos.iter_mut().zip(origin) {
                *p -= o;
            }
        }
        out
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self, expected: impl FnOnce() -> String) -> Result<(usize, &'a str), ParseError> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Ok((i + 1, l));
            }
        }
        Err(ParseError::Truncated { line: self.last + 1, expected: expected() })
    }

    fn rest_is_blank(&mut self) -> Option<usize> {
        self.inner.by_ref().find(|(_, l)| !l.trim().is_empty()).map(|(i, _)| i + 1)
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> ParseError {
    ParseError::Syntax { line, msg: msg.into() }
}

fn single_count(line: usize, text: &str, what: &str) -> Result<usize, ParseError> {
    let mut toks = text.split_whitespace();
    let tok = toks.next().ok_or_else(|| syntax(line, format!("missing {what}")))?;
    if toks.next().is_some() {
        return Err(syntax(line, format!("expected a single {what}, found extra fields")));
    }
    tok.parse().map_err(|_| syntax(line, format!("{what} `{tok}` is not a non-negative integer")))
}

/// Parses the NTU `.skeleton` text layout.
pub fn parse_ntu_skeleton(bytes: &[u8]) -> Result<SkeletonSequence, ParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        syntax(line, "invalid UTF-8")
    })?;
    let mut lines = Lines::new(text);
    let (ln, l) = lines.next(|| "frame count".into())?;
    let n_frames = single_count(ln, l, "frame count")?;
    let mut joints_per_body: Option<usize> = None;
    let mut frames = Vec::new();
    for f in 0..n_frames {
        let (ln, l) = lines.next(|| format!("body count of frame {} of {n_frames}", f + 1))?;
        let n_bodies = single_count(ln, l, "body count")?;
        let mut bodies = Vec::new();
        for b in 0..n_bodies {
            let (ln, l) = lines.next(|| format!("info line of body {} in frame {}", b + 1, f + 1))?;
            let info: Vec<&str> = l.split_whitespace().collect();
            if info.len() != BODY_INFO_FIELDS {
                return Err(syntax(ln, format!("body info needs {BODY_INFO_FIELDS} fields, found {}", info.len())));
            }
            let id = info[0]
                .parse::<u64>()
                .map_err(|_| syntax(ln, format!("body id `{}` is not an integer", info[0])))?;
            for tok in &info[1..] {
                if !tok.parse::<f64>().is_ok_and(f64::is_finite) {
                    return Err(syntax(ln, format!("body info field `{tok}` is not numeric")));
                }
            }
            let (ln, l) = lines.next(|| format!("joint count of body {} in frame {}", b + 1, f + 1))?;
            let n_joints = single_count(ln, l, "joint count")?;
            match joints_per_body {
                None => joints_per_body = Some(n_joints),
                Some(n) if n != n_joints => {
                    return Err(syntax(ln, format!("joint count {n_joints} differs from earlier bodies ({n})")));
                }
                _ => {}
            }
            let mut joints = Vec::with_capacity(n_joints.min(NTU_JOINTS * 4));
            for j in 0..n_joints {
                let (ln, l) = lines.next(|| format!("joint {} of body {} in frame {}", j + 1, b + 1, f + 1))?;
                joints.push(parse_joint(ln, l)?);
            }
            bodies.push(Body { id, joints });
        }
        frames.push(Frame { bodies });
    }
    if let Some(line) = lines.rest_is_blank() {
        return Err(syntax(line, format!("unexpected data after the declared {n_frames} frames")));
    }
    Ok(SkeletonSequence { frames, metadata: None })
}

fn parse_joint(ln: usize, l: &str) -> Result<Joint, ParseError> {
    let toks: Vec<&str> = l.split_whitespace().collect();
    if toks.len() != JOINT_FIELDS {
        return Err(syntax(ln, format!("joint line needs {JOINT_FIELDS} fields, found {}", toks.len())));
    }
    let mut vals = [0.0; JOINT_FIELDS - 1];
    for (v, tok) in vals.iter_mut().zip(&toks) {
        *v = tok
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| syntax(ln, format!("joint field `{tok}` is not a finite number")))?;
    }
    let tracking = toks[JOINT_FIELDS - 1]
        .parse::<u8>()
        .map_err(|_| syntax(ln, format!("tracking state `{}` is not an integer", toks[JOINT_FIELDS - 1])))?;
    Ok(Joint { pos: [vals[0], vals[1], vals[2]], tracking })
}

/// Writes a sequence in the `.skeleton` layout. Dropped fields are written as
/// zeros.
pub fn write_ntu_skeleton(seq: &SkeletonSequence) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", seq.frames.len());
    for f in &seq.frames {
        let _ = writeln!(out, "{}", f.bodies.len());
        for b in &f.bodies {
            let _ = writeln!(out, "{} 0 0 0 0 0 0 0 0 2", b.id);
            let _ = writeln!(out, "{}", b.joints.len());
            for j in &b.joints {
                let [x, y, z] = j.pos;
                let _ = writeln!(out, "{x} {y} {z} 0 0 0 0 0 0 0 0 {}", j.tracking);
            }
        }
    }
    out
}

/// Extracts setup/camera/performer/replication/action from an NTU sample
/// name. Directory components and the extension are ignored.
pub fn parse_sample_metadata(name: &str) -> Result<SampleMetadata, ParseError> {
    let base = name.rsplit(['/', '\\']).next().unwrap_or(name);
    let stem = base.split('.').next().unwrap_or(base);
    let bad = || ParseError::SampleName(name.to_string());
    if stem.len() != 20 || !stem.is_ascii() {
        return Err(bad());
    }
    let field = |i: usize, tag: u8| -> Result<u32, ParseError> {
        let s = &stem.as_bytes()[i * 4..i * 4 + 4];
        if s[0] != tag || !s[1..].iter().all(u8::is_ascii_digit) {
            return Err(bad());
        }
        Ok(std::str::from_utf8(&s[1..]).unwrap().parse().unwrap())
    };
    Ok(SampleMetadata {
        setup: field(0, b'S')?,
        camera: field(1, b'C')?,
        performer: field(2, b'P')?,
        replication: field(3, b'R')?,
        action: field(4, b'A')?,
    })
}
