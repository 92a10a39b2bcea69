//! Deterministic synthetic scenes: painted shapes as ground truth and
//! corrupted softmax volumes with controllable error modes.
//!
//! Every frame is a pure function of the spec, the sequence number and the
//! frame position, seeded through a counter-based hash of the three.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{corpus, npy};
use crate::segments::{extract_segments, SegmentSet, SegmentSource};
use crate::volume::{LabelMap, ProbabilityVolume, IGNORE_LABEL};

pub const NO_SHAPE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("shape {index} ({h}x{w} at {r},{c}) does not fit into {height}x{width}")]
    ShapeOutOfBounds {
        index: usize,
        r: f64,
        c: f64,
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Npy(#[from] npy::NpyError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class_id: u8,
    /// Top-left corner.
    pub r: f64,
    pub c: f64,
    pub h: usize,
    pub w: usize,
    /// Displacement per frame.
    pub vr: f64,
    pub vc: f64,
}

impl fmt::Display for ShapeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ShapeKind::Rect => "rect",
            ShapeKind::Ellipse => "ellipse",
        };
        write!(
            f,
            "{kind},{},{},{},{},{},{},{}",
            self.class_id, self.r, self.c, self.h, self.w, self.vr, self.vc
        )
    }
}

impl FromStr for ShapeSpec {
    type Err = String;

    /// `kind,class,r,c,h,w[,vr,vc]`
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 6 && parts.len() != 8 {
            return Err(format!("shape needs 6 or 8 fields, got {}", parts.len()));
        }
        let kind = match parts[0] {
            "rect" => ShapeKind::Rect,
            "ellipse" => ShapeKind::Ellipse,
            k => return Err(format!("unknown shape kind {k:?}")),
        };
        let num = |i: usize| parts[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1));
        let int = |i: usize| parts[i].parse::<usize>().map_err(|e| format!("field {}: {e}", i + 1));
        Ok(ShapeSpec {
            kind,
            class_id: parts[1].parse().map_err(|e| format!("class: {e}"))?,
            r: num(2)?,
            c: num(3)?,
            h: int(4)?,
            w: int(5)?,
            vr: if parts.len() == 8 { num(6)? } else { 0.0 },
            vc: if parts.len() == 8 { num(7)? } else { 0.0 },
        })
    }
}

/// Scene and noise parameters. Class 0 is background and the last class is
/// the rare class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Random shapes of the common classes per scene.
    pub shapes: usize,
    /// Random small shapes of the rare class per scene.
    pub rare_shapes: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Relative draw weights of the common classes `1..classes-1`.
    pub class_weights: Vec<f64>,
    /// Row band (fractions of the height) holding the rare shapes.
    pub rare_band: (f64, f64),
    /// Logit of the predicted class.
    pub strength: f64,
    /// Per-class uniform logit noise amplitude.
    pub noise: f64,
    pub temperature: f64,
    /// Added temperature within two pixels of a class boundary.
    pub boundary_temperature: f64,
    /// Strength of the competing class near boundaries, relative to
    /// `strength`; 0 disables boundary flips.
    pub boundary_flip: f64,
    pub label_swap_rate: f64,
    pub fp_blob_rate: f64,
    pub fn_suppression_rate: f64,
    /// Share of rare-class probability kept in suppressed shapes.
    pub fn_factor: f64,
    pub flicker: f64,
    pub max_speed: f64,
    /// Chance of an unlabeled rectangle in a frame's ground truth.
    pub ignore_rate: f64,
    /// Chance that a frame has no ground truth in a written corpus.
    pub unlabeled_fraction: f64,
    /// Frames per sequence in a written corpus.
    pub sequence_length: usize,
    /// Replaces the random shapes when non-empty.
    pub fixed_shapes: Vec<ShapeSpec>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            height: 64,
            width: 96,
            classes: 6,
            shapes: 6,
            rare_shapes: 2,
            min_size: 6,
            max_size: 22,
            class_weights: Vec::new(),
            rare_band: (0.45, 0.85),
            strength: 4.0,
            noise: 1.5,
            temperature: 1.0,
            boundary_temperature: 1.5,
            boundary_flip: 1.0,
            label_swap_rate: 0.1,
            fp_blob_rate: 0.3,
            fn_suppression_rate: 0.5,
            fn_factor: 0.3,
            flicker: 0.0,
            max_speed: 2.0,
            ignore_rate: 0.2,
            unlabeled_fraction: 0.0,
            sequence_length: 1,
            fixed_shapes: Vec::new(),
        }
    }
}

impl SceneSpec {
    /// A spec without any noise: Bayes decisions reproduce the labels.
    pub fn noiseless() -> Self {
        Self {
            noise: 0.0,
            temperature: 0.01,
            boundary_temperature: 0.0,
            boundary_flip: 0.0,
            label_swap_rate: 0.0,
            fp_blob_rate: 0.0,
            fn_suppression_rate: 0.0,
            ignore_rate: 0.0,
            ..Self::default()
        }
    }

    /// The rare class covers about 1% of the pixels and half of its shapes
    /// are suppressed in the prediction.
    pub fn imbalanced() -> Self {
        Self {
            rare_shapes: 4,
            fn_suppression_rate: 0.5,
            ..Self::default()
        }
    }

    /// Moving shapes observed over `length` frames, with flicker.
    pub fn flickering(length: usize) -> Self {
        Self {
            flicker: 0.2,
            sequence_length: length,
            ..Self::default()
        }
    }

    pub fn rare_class(&self) -> u8 {
        (self.classes - 1) as u8
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.classes < 3 || self.classes > IGNORE_LABEL as usize {
            return bad(format!("classes must be in [3, 255), got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 {
            return bad("resolution must be positive".into());
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad("need 1 <= min_size <= max_size".into());
        }
        if !(self.temperature > 0.0) || self.boundary_temperature < 0.0 {
            return bad("temperature must be positive".into());
        }
        if !(self.strength > 0.0) || self.noise < 0.0 || self.boundary_flip < 0.0 {
            return bad("strength must be positive, noise and boundary_flip non-negative".into());
        }
        for (name, v) in [
            ("label_swap_rate", self.label_swap_rate),
            ("fp_blob_rate", self.fp_blob_rate),
            ("fn_suppression_rate", self.fn_suppression_rate),
            ("fn_factor", self.fn_factor),
            ("flicker", self.flicker),
            ("ignore_rate", self.ignore_rate),
            ("unlabeled_fraction", self.unlabeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is not in [0, 1]"));
            }
        }
        if !(0.0 <= self.rare_band.0 && self.rare_band.0 < self.rare_band.1 && self.rare_band.1 <= 1.0) {
            return bad("rare_band must satisfy 0 <= lo < hi <= 1".into());
        }
        if !self.class_weights.is_empty()
            && (self.class_weights.len() != self.classes - 2 || self.class_weights.iter().any(|w| !(*w >= 0.0)))
        {
            return bad(format!("class_weights needs {} non-negative values", self.classes - 2));
        }
        if self.sequence_length == 0 {
            return bad("sequence_length must be at least 1".into());
        }
        for (index, s) in self.fixed_shapes.iter().enumerate() {
            if s.class_id == 0 || s.class_id as usize >= self.classes {
                return bad(format!("shape {index} has class {} outside 1..{}", s.class_id, self.classes));
            }
            if s.h == 0
                || s.w == 0
                || s.r < 0.0
                || s.c < 0.0
                || s.r.round() as usize + s.h > self.height
                || s.c.round() as usize + s.w > self.width
            {
                return Err(SynthError::ShapeOutOfBounds {
                    index,
                    r: s.r,
                    c: s.c,
                    h: s.h,
                    w: s.w,
                    height: self.height,
                    width: self.width,
                });
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. `shape` may repeat.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut spec = SceneSpec::default();
        spec.apply(text)?;
        Ok(spec)
    }

    /// Overrides the fields named in `key = value` lines and validates.
    pub fn apply(&mut self, text: &str) -> Result<(), SynthError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SynthError::Parse {
                line: n + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|message| SynthError::Parse { line: n + 1, message })?;
        }
        self.validate()
    }

    /// Named starting points: `default`, `noiseless`, `imbalanced` and
    /// `flickering` (sequences of ten frames).
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "noiseless" => Some(Self::noiseless()),
            "imbalanced" => Some(Self::imbalanced()),
            "flickering" => Some(Self::flickering(10)),
            _ => None,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
        }
        fn list(v: &str) -> Result<Vec<f64>, String> {
            v.split(',').map(|s| num::<f64>(s.trim())).collect()
        }
        match key {
            "seed" => self.seed = num(value)?,
            "height" => self.height = num(value)?,
            "width" => self.width = num(value)?,
            "classes" => self.classes = num(value)?,
            "shapes" => self.shapes = num(value)?,
            "rare_shapes" => self.rare_shapes = num(value)?,
            "min_size" => self.min_size = num(value)?,
            "max_size" => self.max_size = num(value)?,
            "class_weights" => self.class_weights = list(value)?,
            "rare_band" => match list(value)?.as_slice() {
                &[lo, hi] => self.rare_band = (lo, hi),
                _ => return Err("rare_band takes two values".into()),
            },
            "strength" => self.strength = num(value)?,
            "noise" => self.noise = num(value)?,
            "temperature" => self.temperature = num(value)?,
            "boundary_temperature" => self.boundary_temperature = num(value)?,
            "boundary_flip" => self.boundary_flip = num(value)?,
            "label_swap_rate" => self.label_swap_rate = num(value)?,
            "fp_blob_rate" => self.fp_blob_rate = num(value)?,
            "fn_suppression_rate" => self.fn_suppression_rate = num(value)?,
            "fn_factor" => self.fn_factor = num(value)?,
            "flicker" => self.flicker = num(value)?,
            "max_speed" => self.max_speed = num(value)?,
            "ignore_rate" => self.ignore_rate = num(value)?,
            "unlabeled_fraction" => self.unlabeled_fraction = num(value)?,
            "sequence_length" => self.sequence_length = num(value)?,
            "shape" => self.fixed_shapes.push(value.parse()?),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// The spec as `key = value` lines accepted by [`SceneSpec::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("height = {}", self.height),
            format!("width = {}", self.width),
            format!("classes = {}", self.classes),
            format!("shapes = {}", self.shapes),
            format!("rare_shapes = {}", self.rare_shapes),
            format!("min_size = {}", self.min_size),
            format!("max_size = {}", self.max_size),
        ];
        if !self.class_weights.is_empty() {
            lines.push(format!("class_weights = {}", join(&self.class_weights)));
        }
        lines.extend([
            format!("rare_band = {},{}", self.rare_band.0, self.rare_band.1),
            format!("strength = {}", self.strength),
            format!("noise = {}", self.noise),
            format!("temperature = {}", self.temperature),
            format!("boundary_temperature = {}", self.boundary_temperature),
            format!("boundary_flip = {}", self.boundary_flip),
            format!("label_swap_rate = {}", self.label_swap_rate),
            format!("fp_blob_rate = {}", self.fp_blob_rate),
            format!("fn_suppression_rate = {}", self.fn_suppression_rate),
            format!("fn_factor = {}", self.fn_factor),
            format!("flicker = {}", self.flicker),
            format!("max_speed = {}", self.max_speed),
            format!("ignore_rate = {}", self.ignore_rate),
            format!("unlabeled_fraction = {}", self.unlabeled_fraction),
            format!("sequence_length = {}", self.sequence_length),
        ]);
        lines.extend(self.fixed_shapes.iter().map(|s| format!("shape = {s}")));
        lines.join("\n") + "\n"
    }
}

/// Ground-truth facts known by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTruth {
    /// Shape id painted into the prediction at every pixel, or [`NO_SHAPE`].
    pub shape_map: Vec<u32>,
    /// Per shape: painted into the prediction of this frame.
    pub predicted: Vec<bool>,
    /// Per shape: centroid of its ground-truth footprint, if visible.
    pub centroids: Vec<Option<(f64, f64)>>,
    /// Rare shapes whose probability was suppressed.
    pub suppressed: Vec<u32>,
    /// Number of false-positive blobs painted.
    pub fp_blobs: usize,
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub probs: ProbabilityVolume,
    pub labels: LabelMap,
    /// Segments of `labels`.
    pub gt_segments: SegmentSet,
    /// Labels of a less noisy reference prediction.
    pub pseudo: LabelMap,
    pub truth: FrameTruth,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let key = parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

const LAYOUT: u64 = 1;
const FRAME: u64 = 2;
const REFERENCE: u64 = 3;

struct Layout {
    shapes: Vec<ShapeSpec>,
    /// Fixed per-shape uniform draws deciding suppression, so higher rates
    /// suppress supersets of shapes.
    suppress_draw: Vec<f64>,
    /// Class painted instead of the true one, fixed for the whole sequence.
    swap_to: Vec<Option<u8>>,
}

fn layout(spec: &SceneSpec, sequence: u64) -> Layout {
    let mut rng = stream(spec.seed, &[LAYOUT, sequence]);
    let mut shapes = spec.fixed_shapes.clone();
    if shapes.is_empty() {
        let common = spec.classes - 2;
        let weights = if spec.class_weights.is_empty() { vec![1.0; common] } else { spec.class_weights.clone() };
        let total: f64 = weights.iter().sum();
        for _ in 0..spec.shapes {
            let mut pick = rng.random::<f64>() * total;
            let mut class = common;
            for (i, w) in weights.iter().enumerate() {
                if pick < *w {
                    class = i + 1;
                    break;
                }
                pick -= w;
            }
            let h = rng.random_range(spec.min_size..=spec.max_size).min(spec.height);
            let w = rng.random_range(spec.min_size..=spec.max_size).min(spec.width);
            shapes.push(random_shape(&mut rng, spec, class as u8, h, w, (0.0, 1.0)));
        }
        let rare_h = (spec.min_size + 2).min(spec.height);
        let rare_w = (spec.min_size / 2).max(2).min(spec.width);
        for _ in 0..spec.rare_shapes {
            let h = rng.random_range(spec.min_size.min(rare_h)..=rare_h);
            let w = rng.random_range(2.min(rare_w)..=rare_w);
            shapes.push(random_shape(&mut rng, spec, spec.rare_class(), h, w, spec.rare_band));
        }
    }
    let suppress_draw = shapes.iter().map(|_| rng.random()).collect();
    let q = spec.classes as u8;
    let swap_to = shapes
        .iter()
        .map(|s| {
            let swap = rng.random::<f64>() < spec.label_swap_rate;
            let mut to = rng.random_range(1..q - 1);
            if to == s.class_id {
                to = if to + 1 < q - 1 { to + 1 } else { 1 };
            }
            (swap && s.class_id != spec.rare_class() && to != s.class_id).then_some(to)
        })
        .collect();
    Layout {
        shapes,
        suppress_draw,
        swap_to,
    }
}

fn random_shape(rng: &mut ChaCha8Rng, spec: &SceneSpec, class_id: u8, h: usize, w: usize, band: (f64, f64)) -> ShapeSpec {
    let kind = if rng.random::<bool>() { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let lo = (band.0 * spec.height as f64).floor();
    let hi = ((band.1 * spec.height as f64).ceil() - h as f64).max(lo);
    let r = rng.random_range(lo..=hi).min((spec.height - h) as f64);
    let c = rng.random_range(0.0..=(spec.width - w) as f64);
    let speed = spec.max_speed;
    let (vr, vc) = if speed > 0.0 {
        (rng.random_range(-speed..=speed), rng.random_range(-speed..=speed))
    } else {
        (0.0, 0.0)
    };
    ShapeSpec {
        kind,
        class_id,
        r,
        c,
        h,
        w,
        vr,
        vc,
    }
}

/// Position at frame `t`, reflecting at the frame borders.
fn position(shape: &ShapeSpec, t: usize, height: usize, width: usize) -> (f64, f64) {
    let reflect = |p0: f64, v: f64, extent: f64| {
        if extent <= 0.0 {
            return 0.0;
        }
        let period = 2.0 * extent;
        let p = (p0 + v * t as f64).rem_euclid(period);
        if p > extent {
            period - p
        } else {
            p
        }
    };
    (
        reflect(shape.r, shape.vr, (height - shape.h.min(height)) as f64),
        reflect(shape.c, shape.vc, (width - shape.w.min(width)) as f64),
    )
}

fn covers(kind: ShapeKind, r0: usize, c0: usize, h: usize, w: usize, r: usize, c: usize) -> bool {
    if r < r0 || c < c0 || r >= r0 + h || c >= c0 + w {
        return false;
    }
    match kind {
        ShapeKind::Rect => true,
        ShapeKind::Ellipse => {
            let dr = (r as f64 + 0.5 - (r0 as f64 + h as f64 / 2.0)) / (h as f64 / 2.0);
            let dc = (c as f64 + 0.5 - (c0 as f64 + w as f64 / 2.0)) / (w as f64 / 2.0);
            dr * dr + dc * dc <= 1.0
        }
    }
}

fn paint(map: &mut [u32], width: usize, height: usize, kind: ShapeKind, r0: usize, c0: usize, h: usize, w: usize, id: u32) {
    for r in r0..(r0 + h).min(height) {
        for c in c0..(c0 + w).min(width) {
            if covers(kind, r0, c0, h, w, r, c) {
                map[r * width + c] = id;
            }
        }
    }
}

/// Smooth noise in [0, 1]: bilinear interpolation of uniform values on a
/// coarse grid.
fn value_noise(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: usize) -> Vec<f64> {
    let gh = height / cell + 2;
    let gw = width / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random()).collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let fr = r as f64 / cell as f64;
        let (i, a) = (fr.floor() as usize, fr.fract());
        for c in 0..width {
            let fc = c as f64 / cell as f64;
            let (j, b) = (fc.floor() as usize, fc.fract());
            let g = |i: usize, j: usize| grid[i * gw + j];
            out.push(
                (1.0 - a) * ((1.0 - b) * g(i, j) + b * g(i, j + 1)) + a * ((1.0 - b) * g(i + 1, j) + b * g(i + 1, j + 1)),
            );
        }
    }
    out
}

/// Chebyshev distance (1 or 2) to the nearest pixel with another label, and
/// that label.
fn near_boundary(labels: &[u8], height: usize, width: usize, z: usize) -> Option<(usize, u8)> {
    let (r, c) = ((z / width) as i64, (z % width) as i64);
    let own = labels[z];
    for d in 1..=2i64 {
        for dr in -d..=d {
            for dc in -d..=d {
                if dr.abs().max(dc.abs()) != d {
                    continue;
                }
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= height as i64 || cc >= width as i64 {
                    continue;
                }
                let other = labels[(rr * width as i64 + cc) as usize];
                if other != own {
                    return Some((d as usize, other));
                }
            }
        }
    }
    None
}

fn softmax(logits: &[f64], temperature: f64, out: &mut Vec<f64>) {
    out.clear();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.extend(logits.iter().map(|l| ((l - max) / temperature).exp()));
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
}

/// Region-level override of the predicted class and its competitor.
#[derive(Clone, Copy)]
struct Override {
    strength: f64,
    competitor: u8,
    competitor_strength: f64,
}

/// Frame `t` of sequence `sequence`.
fn render(spec: &SceneSpec, sequence: u64, t: usize, layout: &Layout) -> SynthFrame {
    let (h, w, q) = (spec.height, spec.width, spec.classes);
    let n = h * w;
    let mut rng = stream(spec.seed, &[FRAME, sequence, t as u64]);
    let shapes = &layout.shapes;

    // Ground truth and prediction layers of shape ids.
    let mut gt_ids = vec![NO_SHAPE; n];
    let mut pred_ids = vec![NO_SHAPE; n];
    let mut predicted = vec![true; shapes.len()];
    let mut swapped: Vec<Option<(u8, f64, f64)>> = vec![None; shapes.len()];
    for (i, s) in shapes.iter().enumerate() {
        let (r, c) = position(s, t, h, w);
        let (r0, c0) = (r.round() as usize, c.round() as usize);
        paint(&mut gt_ids, w, h, s.kind, r0, c0, s.h, s.w, i as u32);
        let flicker = rng.random::<f64>() < spec.flicker;
        predicted[i] = t == 0 || !flicker;
        let a = rng.random_range(0.5..0.9);
        let b = a * rng.random_range(0.4..0.85);
        swapped[i] = layout.swap_to[i].map(|to| (to, a, b));
        if predicted[i] {
            paint(&mut pred_ids, w, h, s.kind, r0, c0, s.h, s.w, i as u32);
        }
    }
    let class_of = |id: u32| if id == NO_SHAPE { 0u8 } else { shapes[id as usize].class_id };
    let gt: Vec<u8> = gt_ids.iter().map(|&id| class_of(id)).collect();
    let mut pred: Vec<u8> = pred_ids.iter().map(|&id| class_of(id)).collect();
    let mut overrides: Vec<Option<Override>> = vec![None; n];
    for z in 0..n {
        let id = pred_ids[z];
        if id != NO_SHAPE {
            if let Some((to, a, b)) = swapped[id as usize] {
                pred[z] = to;
                overrides[z] = Some(Override {
                    strength: a,
                    competitor: shapes[id as usize].class_id,
                    competitor_strength: b,
                });
            }
        }
    }

    // False-positive blobs, kept three pixels away from ground truth of
    // their class.
    let mut fp_blobs = 0;
    let mut in_blob = vec![false; n];
    for _ in 0..spec.shapes.max(1) {
        let attempt = rng.random::<f64>() < spec.fp_blob_rate;
        let class = rng.random_range(1..q as u8 - 1);
        let bh = rng.random_range(3..=10usize).min(h);
        let bw = rng.random_range(3..=10usize).min(w);
        let r0 = rng.random_range(0..=h - bh);
        let c0 = rng.random_range(0..=w - bw);
        let a = rng.random_range(0.4..1.0);
        let b = a * rng.random_range(0.3..0.8);
        if !attempt {
            continue;
        }
        let margin = 3;
        let clear = (r0.saturating_sub(margin)..(r0 + bh + margin).min(h))
            .all(|r| {
                (c0.saturating_sub(margin)..(c0 + bw + margin).min(w)).all(|c| {
                    let z = r * w + c;
                    gt[z] != class && pred[z] != class && !in_blob[z]
                })
            });
        if !clear {
            continue;
        }
        fp_blobs += 1;
        for r in r0..r0 + bh {
            for c in c0..c0 + bw {
                if covers(ShapeKind::Ellipse, r0, c0, bh, bw, r, c) {
                    let z = r * w + c;
                    overrides[z] = Some(Override {
                        strength: a,
                        competitor: pred[z],
                        competitor_strength: b,
                    });
                    pred[z] = class;
                    pred_ids[z] = NO_SHAPE;
                    in_blob[z] = true;
                }
            }
        }
    }

    let rare = spec.rare_class();
    let suppressed: Vec<u32> = (0..shapes.len())
        .filter(|&i| shapes[i].class_id == rare && layout.suppress_draw[i] < spec.fn_suppression_rate)
        .map(|i| i as u32)
        .collect();
    let flip = value_noise(&mut rng, h, w, 4);
    let mut data = Vec::with_capacity(n * q);
    let mut logits = vec![0.0; q];
    let mut p = Vec::with_capacity(q);
    for z in 0..n {
        for l in logits.iter_mut() {
            *l = if spec.noise > 0.0 { rng.random::<f64>() * spec.noise } else { 0.0 };
        }
        let own = pred[z] as usize;
        let boundary = near_boundary(&pred, h, w, z);
        let mut temperature = spec.temperature;
        if boundary.is_some() {
            temperature += spec.boundary_temperature;
        }
        match (overrides[z], boundary) {
            (Some(o), _) => {
                logits[own] += spec.strength * o.strength;
                if o.competitor as usize != own {
                    logits[o.competitor as usize] += spec.strength * o.competitor_strength;
                }
            }
            (None, Some((d, other))) => {
                logits[own] += spec.strength;
                let scale = if d == 1 { 1.0 } else { 0.8 };
                logits[other as usize] += spec.strength * spec.boundary_flip * (0.2 + 0.9 * flip[z]) * scale;
            }
            (None, None) => logits[own] += spec.strength,
        }
        softmax(&logits, temperature, &mut p);
        if pred[z] == rare && suppressed.contains(&pred_ids[z]) {
            let moved = p[rare as usize] * (1.0 - spec.fn_factor);
            p[rare as usize] -= moved;
            p[0] += moved;
        }
        data.extend(p.iter().map(|&v| v as f32));
    }
    let probs = ProbabilityVolume::new(h, w, q, data).expect("generated distributions are valid");

    let mut labels = LabelMap::new(h, w, gt.clone()).expect("classes below the ignore label");
    if rng.random::<f64>() < spec.ignore_rate {
        let ih = rng.random_range(1..=(h / 4).max(1));
        let iw = rng.random_range(1..=(w / 4).max(1));
        let r0 = rng.random_range(0..=h - ih);
        let c0 = rng.random_range(0..=w - iw);
        for r in r0..r0 + ih {
            for c in c0..c0 + iw {
                labels.set(r, c, IGNORE_LABEL);
            }
        }
    }

    let mut centroids = vec![(0.0, 0.0, 0usize); shapes.len()];
    for (z, &id) in gt_ids.iter().enumerate() {
        if id != NO_SHAPE {
            let e = &mut centroids[id as usize];
            e.0 += (z / w) as f64;
            e.1 += (z % w) as f64;
            e.2 += 1;
        }
    }
    let centroids = centroids
        .into_iter()
        .map(|(r, c, k)| (k > 0).then(|| (r / k as f64, c / k as f64)))
        .collect();
    let predicted = (0..shapes.len()).map(|i| predicted[i] && pred_ids.contains(&(i as u32))).collect();

    let pseudo = reference_labels(spec, sequence, t, &gt, &pred_ids, shapes);
    let gt_segments = extract_segments(&labels, None).tagged(
        corpus::frame_id(&sequence_name(sequence), t as u32),
        SegmentSource::GroundTruth,
    );
    SynthFrame {
        probs,
        labels,
        gt_segments,
        pseudo,
        truth: FrameTruth {
            shape_map: pred_ids,
            predicted,
            centroids,
            suppressed,
            fp_blobs,
        },
    }
}

/// A stronger model's labels: ground truth with mild boundary flips and
/// occasional misses of flickering shapes.
fn reference_labels(spec: &SceneSpec, sequence: u64, t: usize, gt: &[u8], pred_ids: &[u32], shapes: &[ShapeSpec]) -> LabelMap {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, &[REFERENCE, sequence, t as u64]);
    let flip = value_noise(&mut rng, h, w, 4);
    let mut out = gt.to_vec();
    for z in 0..h * w {
        if let Some((1, other)) = near_boundary(gt, h, w, z) {
            if spec.boundary_flip > 0.0 && flip[z] > 0.85 {
                out[z] = other;
            }
        }
        let id = pred_ids[z];
        if id != NO_SHAPE && shapes[id as usize].class_id == spec.rare_class() && gt[z] == spec.rare_class() {
            out[z] = gt[z];
        }
    }
    LabelMap::new(h, w, out).expect("classes below the ignore label")
}

pub fn sequence_name(sequence: u64) -> String {
    format!("seq{sequence:04}")
}

/// A single scene: sequence `index`, first frame.
pub fn generate_frame(spec: &SceneSpec, index: u64) -> Result<SynthFrame, SynthError> {
    spec.validate()?;
    Ok(render(spec, index, 0, &layout(spec, index)))
}

/// `length` frames of sequence `sequence` with persistent shapes moving at
/// their velocities. Flickering shapes vanish from the prediction of single
/// frames but stay in the ground truth; the first frame always shows them.
pub fn generate_sequence(spec: &SceneSpec, sequence: u64, length: usize) -> Result<Vec<SynthFrame>, SynthError> {
    spec.validate()?;
    let layout = layout(spec, sequence);
    Ok((0..length).map(|t| render(spec, sequence, t, &layout)).collect())
}

fn write_sequence(spec: &SceneSpec, s: u64, frames: usize, root: &Path) -> Result<Vec<corpus::FrameEntry>, SynthError> {
    let length = spec.sequence_length.min(frames - s as usize * spec.sequence_length);
    let name = sequence_name(s);
    let mut label_rng = stream(spec.seed, &[4, s]);
    let mut entries = Vec::with_capacity(length);
    for (t, frame) in generate_sequence(spec, s, length)?.into_iter().enumerate() {
        let stem = format!("{name}_{t:06}");
        let probs = root.join("frames").join(format!("{stem}_probs.npy"));
        npy::write_volume(&frame.probs, &probs)?;
        let labeled = label_rng.random::<f64>() >= spec.unlabeled_fraction;
        let gt = if labeled {
            let p = root.join("frames").join(format!("{stem}_gt.npy"));
            npy::write_labels(&frame.labels, &p)?;
            Some(p)
        } else {
            None
        };
        let pseudo = root.join("frames").join(format!("{stem}_pseudo.npy"));
        npy::write_labels(&frame.pseudo, &pseudo)?;
        entries.push(corpus::FrameEntry {
            sequence_id: name.clone(),
            frame_index: t as u32,
            probs,
            gt,
            pseudo: Some(pseudo),
        });
    }
    Ok(entries)
}

/// Writes `frames` frames as a corpus with manifest under `root`, in
/// sequences of `spec.sequence_length` frames.
pub fn write_corpus(spec: &SceneSpec, frames: usize, root: &Path) -> Result<Vec<corpus::FrameEntry>, SynthError> {
    spec.validate()?;
    std::fs::create_dir_all(root.join("frames"))?;
    let sequences = frames.div_ceil(spec.sequence_length) as u64;
    let written: Vec<Vec<corpus::FrameEntry>> = (0..sequences)
        .into_par_iter()
        .map(|s| write_sequence(spec, s, frames, root))
        .collect::<Result<_, _>>()?;
    let entries: Vec<corpus::FrameEntry> = written.into_iter().flatten().collect();
    corpus::write_manifest(&entries, root)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decision::bayes_decide;
    use crate::segments::match_segments;

    #[test]
    fn noiseless_frames_decode_exactly() {
        let spec = SceneSpec::noiseless();
        for i in 0..5 {
            let f = generate_frame(&spec, i).unwrap();
            assert_eq!(bayes_decide(&f.probs), f.labels);
            let pred = extract_segments(&f.labels, None);
            let m = match_segments(&pred, &f.gt_segments).unwrap();
            assert!(m.predicted.iter().all(|p| p.iou == 1.0));
        }
    }

    #[test]
    fn blobs_are_false_positives() {
        let spec = SceneSpec {
            fp_blob_rate: 1.0,
            ..SceneSpec::noiseless()
        };
        let f = generate_frame(&spec, 3).unwrap();
        assert!(f.truth.fp_blobs > 0);
        let pred = extract_segments(&bayes_decide(&f.probs), None);
        let m = match_segments(&pred, &f.gt_segments).unwrap();
        assert_eq!(m.predicted.iter().filter(|p| p.is_fp).count(), f.truth.fp_blobs);
    }

    #[test]
    fn frames_are_deterministic_and_normalized() {
        let spec = SceneSpec::default();
        let a = generate_frame(&spec, 11).unwrap();
        let b = generate_frame(&spec, 11).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.labels, b.labels);
        for p in a.probs.pixels() {
            let s: f64 = p.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn static_sequence_repeats() {
        let spec = SceneSpec {
            max_speed: 0.0,
            ..SceneSpec::noiseless()
        };
        let frames = generate_sequence(&spec, 0, 3).unwrap();
        assert_eq!(frames[0].labels, frames[2].labels);
        assert_eq!(frames[0].probs, frames[1].probs);
    }

    #[test]
    fn moving_shape_centroids() {
        let spec = SceneSpec {
            fixed_shapes: vec!["rect,1,2,2,4,4,0,2".parse().unwrap()],
            ..SceneSpec::noiseless()
        };
        let frames = generate_sequence(&spec, 0, 3).unwrap();
        let c: Vec<(f64, f64)> = frames.iter().map(|f| f.truth.centroids[0].unwrap()).collect();
        assert_eq!(c[1].1 - c[0].1, 2.0);
        assert_eq!(c[2].1 - c[1].1, 2.0);
        assert_eq!(c[0].0, c[2].0);
    }

    #[test]
    fn full_flicker_keeps_only_first_frame() {
        let spec = SceneSpec {
            fixed_shapes: vec!["ellipse,2,5,5,8,8".parse().unwrap()],
            flicker: 1.0,
            ..SceneSpec::noiseless()
        };
        let frames = generate_sequence(&spec, 0, 4).unwrap();
        let shown: Vec<bool> = frames.iter().map(|f| f.truth.predicted[0]).collect();
        assert_eq!(shown, vec![true, false, false, false]);
    }

    #[test]
    fn out_of_bounds_shape() {
        let spec = SceneSpec {
            fixed_shapes: vec!["rect,1,60,90,8,8".parse().unwrap()],
            ..SceneSpec::default()
        };
        assert!(matches!(generate_frame(&spec, 0), Err(SynthError::ShapeOutOfBounds { .. })));
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SceneSpec {
            fixed_shapes: vec!["rect,1,2,2,4,4,0,2".parse().unwrap()],
            class_weights: vec![1.0, 2.0, 1.0, 1.0],
            ..SceneSpec::default()
        };
        assert_eq!(SceneSpec::parse(&spec.to_text()).unwrap(), spec);
        assert!(SceneSpec::parse("colour = red").is_err());
        assert!(SceneSpec::parse("flicker = 2").is_err());
    }
}
