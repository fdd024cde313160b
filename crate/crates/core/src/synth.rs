//! Deterministic synthetic tubelet scenarios with scripted relations.
//!
//! Entities idle near well-separated home positions. A relation moves the
//! subject (and for pursuit behaviors, the object) through a short sequence
//! of scripted phases relative to the object; six-frame linear transitions
//! connect idle and scripted poses. Relations in a video are sequential, so
//! at most one pair interacts at a time.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GtRelation, Video, DATASET_SCHEMA};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Span, Tubelet};
use crate::numcore::RngState;

pub const CATEGORIES: [&str; 5] = ["person", "dog", "ball", "car", "bicycle"];

const BOX_MIN: f64 = 0.075;
const BOX_MAX: f64 = 0.095;
const HOME_LO: f64 = 0.15;
const HOME_HI: f64 = 0.85;
const HOME_SEP: f64 = 0.40;
const BOUND_LO: f64 = 0.06;
const BOUND_HI: f64 = 0.94;
const TRANSITION: usize = 6;
const EDGE: usize = 8;
const GAP: usize = 14;
/// Clearance of scripted paths from bystanders, in box widths.
const CLEARANCE: f64 = 2.4;
const DRIFT: f64 = 0.005;
const PURSUIT_TRAVEL: f64 = 0.22;
const SWEEP_END: f64 = 2.6;
const MAX_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    /// Subject trails a moving object, gap shrinking.
    Chase,
    /// Subject leads a moving object, gap growing.
    Flee,
    /// Subject slides in from the left until adjacent.
    Approach,
    /// Left contact, then the subject sweeps away to the left.
    MoveAway,
    /// Adjacent on the left, then on the right.
    NextTo,
    /// Smaller subject partially hidden behind the object.
    Behind,
    /// Contact on top, then underneath.
    Touch,
    /// Contact on top, then the subject sweeps upward.
    Throw,
}

impl Behavior {
    pub const ALL: [Behavior; 8] = [
        Behavior::Chase,
        Behavior::Flee,
        Behavior::Approach,
        Behavior::MoveAway,
        Behavior::NextTo,
        Behavior::Behind,
        Behavior::Touch,
        Behavior::Throw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Behavior::Chase => "chase",
            Behavior::Flee => "flee",
            Behavior::Approach => "approach",
            Behavior::MoveAway => "move_away",
            Behavior::NextTo => "next_to",
            Behavior::Behind => "behind",
            Behavior::Touch => "touch",
            Behavior::Throw => "throw",
        }
    }

    /// Symmetric behaviors also hold with roles swapped, so the converse
    /// relation is annotated too.
    pub fn symmetric(&self) -> bool {
        matches!(self, Behavior::NextTo | Behavior::Touch)
    }

    fn moves_object(&self) -> bool {
        matches!(self, Behavior::Chase | Behavior::Flee)
    }

    /// Named phases, in order.
    pub fn phases(&self) -> &'static [Phase] {
        use Phase::*;
        match self {
            Behavior::Chase => &[Trail],
            Behavior::Flee => &[Lead],
            Behavior::Approach => &[SlideIn],
            Behavior::MoveAway => &[ContactLeft, SweepLeft],
            Behavior::NextTo => &[ContactLeft, ContactRight],
            Behavior::Behind => &[Occluded],
            Behavior::Touch => &[ContactTop, ContactBottom],
            Behavior::Throw => &[ContactTop, SweepUp],
        }
    }
}

impl FromStr for Behavior {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Behavior::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown behavior {s:?}")))
    }
}

/// A scripted pose family. Each phase occupies an equal share of the span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Trail,
    Lead,
    SlideIn,
    ContactLeft,
    ContactRight,
    ContactTop,
    ContactBottom,
    SweepLeft,
    SweepUp,
    Occluded,
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

#[derive(Clone, Copy, Debug)]
struct Entity {
    w: f64,
    h: f64,
    category: usize,
    home: (f64, f64),
    phase: f64,
}

impl Entity {
    fn idle(&self, t: usize) -> (f64, f64) {
        let a = self.phase + t as f64 * 0.09;
        (self.home.0 + DRIFT * a.sin(), self.home.1 + DRIFT * (1.3 * a).cos())
    }
}

/// Scripted pose at fraction `u ∈ [0,1]` of a relation.
#[derive(Clone, Copy, Debug)]
struct Pose {
    subject: (f64, f64),
    object: (f64, f64),
    subject_scale: f64,
}

#[derive(Clone, Copy, Debug)]
struct Script {
    behavior: Behavior,
    dir: (f64, f64),
}

impl Script {
    fn pose(&self, s: &Entity, o: &Entity, u: f64) -> Pose {
        let wx = 0.5 * (s.w + o.w);
        let hy = 0.5 * (s.h + o.h);
        let phases = self.behavior.phases();
        let n = phases.len() as f64;
        let idx = ((u * n).floor() as usize).min(phases.len() - 1);
        let v = (u * n - idx as f64).clamp(0.0, 1.0);
        let mut obj = o.home;
        let (dx, dy) = self.dir;
        let mut scale = 1.0;
        let off = match phases[idx] {
            Phase::Trail => {
                obj = (o.home.0 + dx * PURSUIT_TRAVEL * u, o.home.1 + dy * PURSUIT_TRAVEL * u);
                let g = lerp(3.0, 2.4, u) * wx;
                (-dx * g, -dy * g)
            }
            Phase::Lead => {
                obj = (o.home.0 + dx * PURSUIT_TRAVEL * u, o.home.1 + dy * PURSUIT_TRAVEL * u);
                let g = lerp(2.4, 3.0, u) * wx;
                (dx * g, dy * g)
            }
            Phase::SlideIn => (-lerp(3.0, 1.05, u) * wx, 0.0),
            Phase::ContactLeft => (-1.02 * wx, 0.0),
            Phase::ContactRight => (1.02 * wx, 0.0),
            Phase::ContactTop => (0.0, -1.02 * hy),
            Phase::ContactBottom => (0.0, 1.02 * hy),
            Phase::SweepLeft => (-lerp(1.02, SWEEP_END, v) * wx, 0.0),
            Phase::SweepUp => (0.0, -lerp(1.02, SWEEP_END, v) * hy),
            Phase::Occluded => {
                scale = 0.7;
                (lerp(-0.15, 0.15, u) * o.w, -0.25 * o.h)
            }
        };
        Pose {
            subject: (obj.0 + off.0, obj.1 + off.1),
            object: obj,
            subject_scale: scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub split: String,
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub num_entities: usize,
    pub predicates: Vec<Behavior>,
    pub relations_per_video: usize,
    /// Relation lengths are drawn by picking one range uniformly, then a
    /// length uniformly inside it (inclusive).
    pub span_ranges: Vec<(usize, usize)>,
    /// Box-centre jitter standard deviation.
    pub noise: f64,
    pub seed: u64,
    /// Forces the first relation of every video to this behavior.
    #[serde(default)]
    pub planted: Option<Behavior>,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_entities < 2 {
            return Err(Error::invalid("scenario needs at least 2 entities"));
        }
        if self.planted.is_some_and(|b| !self.predicates.contains(&b)) {
            return Err(Error::invalid("planted behavior is not among the predicates"));
        }
        if self.predicates.is_empty() {
            return Err(Error::invalid("scenario needs at least one predicate"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("bad jitter {}", self.noise)));
        }
        if self.span_ranges.is_empty() || self.span_ranges.iter().any(|&(lo, hi)| lo < 2 || hi < lo) {
            return Err(Error::invalid("span ranges must be non-empty with 2 <= lo <= hi"));
        }
        let longest = self.span_ranges.iter().map(|r| r.1).max().unwrap_or(0);
        let need = self.min_frames(longest);
        if self.relations_per_video > 0 && need > self.frames_per_video {
            return Err(Error::invalid(format!(
                "infeasible scenario: {} relations of up to {longest} frames need {need} frames, video has {}",
                self.relations_per_video, self.frames_per_video
            )));
        }
        Ok(())
    }

    fn min_frames(&self, span: usize) -> usize {
        let r = self.relations_per_video;
        2 * EDGE + r * span + r.saturating_sub(1) * GAP
    }

    fn video_id(&self, i: usize) -> String {
        format!("{}-{}-{i:04}", self.name, self.split)
    }
}

fn place_entities(n: usize, rng: &mut RngState) -> Option<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..500 {
            let home = (rng.range(HOME_LO, HOME_HI), rng.range(HOME_LO, HOME_HI));
            if out.iter().all(|e| dist(e.home, home) >= HOME_SEP) {
                let w = rng.range(BOX_MIN, BOX_MAX);
                out.push(Entity {
                    w,
                    h: w * rng.range(0.92, 1.08),
                    category: rng.below(CATEGORIES.len()),
                    home,
                    phase: rng.range(0.0, std::f64::consts::TAU),
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(out)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn in_bounds(p: (f64, f64)) -> bool {
    (BOUND_LO..=BOUND_HI).contains(&p.0) && (BOUND_LO..=BOUND_HI).contains(&p.1)
}

/// Path of a relation (including transitions) keeps inside the frame and
/// away from bystanders.
fn feasible(script: &Script, ents: &[Entity], s: usize, o: usize) -> bool {
    let clear = CLEARANCE * BOX_MAX;
    let ok = |p: (f64, f64), who: usize| {
        in_bounds(p)
            && ents
                .iter()
                .enumerate()
                .all(|(i, e)| i == s || i == o || i == who || dist(e.home, p) >= clear)
    };
    let steps = 40;
    for i in 0..=steps {
        let u = i as f64 / steps as f64;
        let p = script.pose(&ents[s], &ents[o], u);
        if !ok(p.subject, s) || !ok(p.object, o) {
            return false;
        }
        for (a, b, who) in [
            (ents[s].home, script.pose(&ents[s], &ents[o], 0.0).subject, s),
            (ents[s].home, script.pose(&ents[s], &ents[o], 1.0).subject, s),
            (ents[o].home, script.pose(&ents[s], &ents[o], 1.0).object, o),
        ] {
            if !ok((lerp(a.0, b.0, u), lerp(a.1, b.1, u)), who) {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Copy, Debug)]
struct Planned {
    script: Script,
    s: usize,
    o: usize,
    span: Span,
    predicate: usize,
}

fn plan_spans(spec: &ScenarioSpec, rng: &mut RngState) -> Vec<Span> {
    let r = spec.relations_per_video;
    let lens: Vec<usize> = (0..r)
        .map(|_| {
            let (lo, hi) = spec.span_ranges[rng.below(spec.span_ranges.len())];
            lo + rng.below(hi - lo + 1)
        })
        .collect();
    let need = 2 * EDGE + lens.iter().sum::<usize>() + r.saturating_sub(1) * GAP;
    let slack = spec.frames_per_video - need;
    // Split the slack into r + 1 random parts.
    let mut cuts: Vec<usize> = (0..r).map(|_| rng.below(slack + 1)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(r);
    let mut t = EDGE;
    let mut prev = 0;
    for (i, len) in lens.into_iter().enumerate() {
        t += cuts[i] - prev;
        prev = cuts[i];
        spans.push(Span::new(t, t + len));
        t += len + GAP;
    }
    spans
}

fn pursuit_dir(rng: &mut RngState) -> Vec<(f64, f64)> {
    let mut angles: Vec<f64> = (0..13).map(|i| (-45.0 + 7.5 * i as f64).to_radians()).collect();
    rng.shuffle(&mut angles);
    angles.into_iter().map(|a| (a.cos(), a.sin())).collect()
}

fn plan_video(spec: &ScenarioSpec, rng: &mut RngState) -> Option<(Vec<Entity>, Vec<Planned>)> {
    let ents = place_entities(spec.num_entities, rng)?;
    let spans = plan_spans(spec, rng);
    let mut pairs: Vec<(usize, usize)> = (0..ents.len())
        .flat_map(|s| (0..ents.len()).filter(move |&o| o != s).map(move |o| (s, o)))
        .collect();
    let mut plans = Vec::with_capacity(spans.len());
    for (i, span) in spans.into_iter().enumerate() {
        let drawn = rng.below(spec.predicates.len());
        let predicate = match spec.planted {
            Some(b) if i == 0 => spec.predicates.iter().position(|&p| p == b).unwrap_or(drawn),
            _ => drawn,
        };
        let behavior = spec.predicates[predicate];
        let dirs = if behavior.moves_object() {
            pursuit_dir(rng)
        } else {
            vec![(1.0, 0.0)]
        };
        rng.shuffle(&mut pairs);
        let found = pairs.iter().find_map(|&(s, o)| {
            dirs.iter().find_map(|&dir| {
                let script = Script { behavior, dir };
                feasible(&script, &ents, s, o).then_some(Planned {
                    script,
                    s,
                    o,
                    span,
                    predicate,
                })
            })
        })?;
        plans.push(found);
    }
    Some((ents, plans))
}

fn render(spec: &ScenarioSpec, ents: &[Entity], plans: &[Planned], rng: &mut RngState) -> Vec<Tubelet> {
    let n = spec.frames_per_video;
    let mut centers: Vec<Vec<(f64, f64)>> = ents.iter().map(|e| (0..n).map(|t| e.idle(t)).collect()).collect();
    let mut scales: Vec<Vec<f64>> = vec![vec![1.0; n]; ents.len()];
    for p in plans {
        let (s, o) = (&ents[p.s], &ents[p.o]);
        let len = p.span.len();
        // Static-object scripts follow the object's idle drift.
        let pose_at = |t: usize| {
            let u = if len > 1 { (t - p.span.start) as f64 / (len - 1) as f64 } else { 0.0 };
            let mut q = p.script.pose(s, o, u);
            if !p.script.behavior.moves_object() {
                let d = o.idle(t);
                q.subject.0 += d.0 - o.home.0;
                q.subject.1 += d.1 - o.home.1;
            }
            q
        };
        for t in p.span.start..p.span.end {
            let q = pose_at(t);
            centers[p.s][t] = q.subject;
            scales[p.s][t] = q.subject_scale;
            if p.script.behavior.moves_object() {
                centers[p.o][t] = q.object;
            }
        }
        let first = pose_at(p.span.start);
        let last = pose_at(p.span.end - 1);
        for k in 0..TRANSITION {
            let a = (k + 1) as f64 / (TRANSITION + 1) as f64;
            if let Some(t) = (p.span.start + k).checked_sub(TRANSITION) {
                let i = centers[p.s][t];
                centers[p.s][t] = (lerp(i.0, first.subject.0, a), lerp(i.1, first.subject.1, a));
                scales[p.s][t] = lerp(1.0, first.subject_scale, a);
            }
            let t = p.span.end + k;
            if t < n {
                let i = centers[p.s][t];
                centers[p.s][t] = (lerp(last.subject.0, i.0, a), lerp(last.subject.1, i.1, a));
                scales[p.s][t] = lerp(last.subject_scale, 1.0, a);
                if p.script.behavior.moves_object() {
                    let i = centers[p.o][t];
                    centers[p.o][t] = (lerp(last.object.0, i.0, a), lerp(last.object.1, i.1, a));
                }
            }
        }
    }
    ents.iter()
        .enumerate()
        .map(|(id, e)| {
            let mut boxes = Vec::with_capacity(n);
            let mut frame_scores = Vec::with_capacity(n);
            for t in 0..n {
                let (ex, ey) = if spec.noise > 0.0 {
                    (spec.noise * rng.normal(), spec.noise * rng.normal())
                } else {
                    (0.0, 0.0)
                };
                let sc = scales[id][t];
                let (w, h) = (e.w * sc, e.h * sc);
                let (cx, cy) = centers[id][t];
                boxes.push(BBox::from_center_clamped(cx + ex, cy + ey, w, h, 0.01));
                frame_scores.push((1.0 - 3.0 * (ex.abs() + ey.abs()) / w).clamp(0.3, 1.0));
            }
            let score = frame_scores.iter().sum::<f64>() / n as f64;
            Tubelet {
                id,
                category: e.category,
                score,
                t_begin: 0,
                boxes,
                frame_scores: Some(frame_scores),
            }
        })
        .collect()
}

fn generate_video(spec: &ScenarioSpec, index: usize) -> Result<Video> {
    let mut rng = RngState::new(spec.seed).derive(index as u64);
    for _ in 0..MAX_TRIES {
        let Some((ents, plans)) = plan_video(spec, &mut rng) else {
            continue;
        };
        let tubelets = render(spec, &ents, &plans, &mut rng);
        let mut relations = Vec::new();
        for p in &plans {
            relations.push(GtRelation {
                subject_id: p.s,
                object_id: p.o,
                predicate: p.predicate,
                span: p.span,
            });
            if p.script.behavior.symmetric() {
                relations.push(GtRelation {
                    subject_id: p.o,
                    object_id: p.s,
                    predicate: p.predicate,
                    span: p.span,
                });
            }
        }
        return Ok(Video {
            video_id: spec.video_id(index),
            num_frames: spec.frames_per_video,
            tubelets,
            relations,
        });
    }
    Err(Error::invalid(format!(
        "infeasible scenario: could not lay out {} entities for {}",
        spec.num_entities,
        spec.video_id(index)
    )))
}

/// Generates a dataset split; each video draws from its own stream derived
/// from the spec seed and its index.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    spec.validate()?;
    let videos = (0..spec.num_videos)
        .into_par_iter()
        .map(|i| generate_video(spec, i))
        .collect::<Result<Vec<_>>>()?;
    let d = Dataset {
        schema_version: DATASET_SCHEMA,
        name: spec.name.clone(),
        split: spec.split.clone(),
        categories: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        predicates: spec.predicates.iter().map(|b| b.name().to_string()).collect(),
        videos,
    };
    d.validate()?;
    Ok(d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// Predicates with disjoint per-frame signatures.
    Separable,
    /// Predicates sharing contact phases; two pairs have near-equal mean
    /// features and differ only in how frames split between phases.
    Compositional,
    /// Separable predicates at short, medium and long spans.
    Duration,
}

impl SuiteKind {
    pub const ALL: [SuiteKind; 3] = [SuiteKind::Separable, SuiteKind::Compositional, SuiteKind::Duration];

    pub fn name(&self) -> &'static str {
        match self {
            SuiteKind::Separable => "separable",
            SuiteKind::Compositional => "compositional",
            SuiteKind::Duration => "duration",
        }
    }

    /// Train and test specs.
    pub fn specs(&self, seed: u64) -> (ScenarioSpec, ScenarioSpec) {
        use Behavior::*;
        let (predicates, train, test, frames, ranges) = match self {
            SuiteKind::Separable => (vec![Chase, NextTo, Behind, Touch], 60, 20, 130, vec![(30, 45)]),
            SuiteKind::Compositional => (vec![NextTo, Touch, Throw, MoveAway], 100, 30, 130, vec![(30, 45)]),
            SuiteKind::Duration => (
                vec![Chase, NextTo, Behind, Touch],
                60,
                30,
                380,
                vec![(12, 26), (40, 100), (120, 170)],
            ),
        };
        let base = RngState::new(seed);
        let mk = |split: &str, n, stream| ScenarioSpec {
            name: self.name().to_string(),
            split: split.to_string(),
            num_videos: n,
            frames_per_video: frames,
            num_entities: 3,
            predicates: predicates.clone(),
            relations_per_video: 2,
            span_ranges: ranges.clone(),
            noise: 0.003,
            seed: base.derive(stream).seed(),
            planted: None,
        };
        (mk("train", train, 1), mk("test", test, 2))
    }
}

impl FromStr for SuiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SuiteKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown suite {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Suite {
    pub kind: SuiteKind,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn make_suite(kind: SuiteKind, seed: u64) -> Result<Suite> {
    let (a, b) = kind.specs(seed);
    Ok(Suite {
        kind,
        train: generate(&a)?,
        test: generate(&b)?,
    })
}

/// All three fixed suites.
pub fn make_suites(seed: u64) -> Result<Vec<Suite>> {
    SuiteKind::ALL.iter().map(|&k| make_suite(k, seed)).collect()
}
