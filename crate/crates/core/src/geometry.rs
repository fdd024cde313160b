//! Boxes, tubelets, ordered tubelet pairs and volume IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(self.x1) && in_unit(self.y1) && in_unit(self.x2) && in_unit(self.y2)) {
            return Err(Error::data(format!("box {self:?} outside [0,1]")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::data(format!("box {self:?} has non-positive extent")));
        }
        Ok(())
    }

    /// Box of the given center and size, clamped into the unit square with
    /// a minimum extent of `min_side`.
    pub fn from_center_clamped(cx: f64, cy: f64, w: f64, h: f64, min_side: f64) -> BBox {
        let clamp_axis = |c: f64, s: f64| {
            let s = s.clamp(min_side, 1.0);
            let lo = (c - s / 2.0).clamp(0.0, 1.0 - min_side);
            let hi = (c + s / 2.0).clamp(lo + min_side, 1.0);
            (lo, hi)
        };
        let (x1, x2) = clamp_axis(cx, w);
        let (y1, y2) = clamp_axis(cy, h);
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Area of the smallest box enclosing both.
    pub fn enclosing_area(&self, other: &BBox) -> f64 {
        (self.x2.max(other.x2) - self.x1.min(other.x1)) * (self.y2.max(other.y2) - self.y1.min(other.y1))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }
}

pub fn frame_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }

    pub fn contains_span(&self, other: &Span) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn intersect(&self, other: &Span) -> Option<Span> {
        let s = Span::new(self.start.max(other.start), self.end.min(other.end));
        (!s.is_empty()).then_some(s)
    }

    /// Temporal IoU.
    pub fn tiou(&self, other: &Span) -> f64 {
        let inter = self.intersect(other).map_or(0, |s| s.len());
        let union = self.len() + other.len() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// One tracked object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tubelet {
    pub id: usize,
    pub category: usize,
    /// Track-level detection confidence.
    pub score: f64,
    pub t_begin: usize,
    pub boxes: Vec<BBox>,
    /// Optional per-frame confidences, aligned with `boxes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_scores: Option<Vec<f64>>,
}

impl Tubelet {
    pub fn span(&self) -> Span {
        Span::new(self.t_begin, self.t_begin + self.boxes.len())
    }

    pub fn box_at(&self, t: usize) -> Option<&BBox> {
        t.checked_sub(self.t_begin).and_then(|i| self.boxes.get(i))
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::data(format!("tubelet {} has no boxes", self.id)));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::data(format!("tubelet {} score outside [0,1]", self.id)));
        }
        if let Some(fs) = &self.frame_scores {
            if fs.len() != self.boxes.len() {
                return Err(Error::data(format!(
                    "tubelet {} has {} frame scores for {} boxes",
                    self.id,
                    fs.len(),
                    self.boxes.len()
                )));
            }
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    /// Copy restricted to `span`, or `None` when they do not overlap.
    pub fn restrict(&self, span: &Span) -> Option<Tubelet> {
        let s = self.span().intersect(span)?;
        let lo = s.start - self.t_begin;
        let hi = s.end - self.t_begin;
        Some(Tubelet {
            id: self.id,
            category: self.category,
            score: self.score,
            t_begin: s.start,
            boxes: self.boxes[lo..hi].to_vec(),
            frame_scores: self.frame_scores.as_ref().map(|f| f[lo..hi].to_vec()),
        })
    }

    /// Mean detection confidence over `span` (per-frame scores if present).
    pub fn mean_score(&self, span: &Span) -> f64 {
        match (&self.frame_scores, self.span().intersect(span)) {
            (Some(fs), Some(s)) => {
                let slice = &fs[s.start - self.t_begin..s.end - self.t_begin];
                slice.iter().sum::<f64>() / slice.len() as f64
            }
            _ => self.score,
        }
    }
}

/// Ordered (subject, object) pair of co-occurring tubelets.
#[derive(Clone, Debug, PartialEq)]
pub struct TubeletPair<'a> {
    pub subject: &'a Tubelet,
    pub object: &'a Tubelet,
    pub overlap: Span,
}

impl<'a> TubeletPair<'a> {
    pub fn new(subject: &'a Tubelet, object: &'a Tubelet) -> Option<Self> {
        let overlap = subject.span().intersect(&object.span())?;
        Some(TubeletPair {
            subject,
            object,
            overlap,
        })
    }

    /// (subject box, object box) on frame `t`; both exist for `t` in the overlap.
    pub fn boxes_at(&self, t: usize) -> Option<(&BBox, &BBox)> {
        Some((self.subject.box_at(t)?, self.object.box_at(t)?))
    }

    pub fn key(&self) -> (usize, usize) {
        (self.subject.id, self.object.id)
    }
}

/// All ordered pairs `(i, j)`, `i != j`, whose spans overlap.
pub fn make_pairs(tubelets: &[Tubelet]) -> Vec<TubeletPair<'_>> {
    let mut out = Vec::new();
    for (i, s) in tubelets.iter().enumerate() {
        for (j, o) in tubelets.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(p) = TubeletPair::new(s, o) {
                out.push(p);
            }
        }
    }
    out
}

/// Volume IoU over the union of both temporal spans.
pub fn viou(a: &Tubelet, b: &Tubelet) -> f64 {
    let sa = a.span();
    let sb = b.span();
    let lo = sa.start.min(sb.start);
    let hi = sa.end.max(sb.end);
    let mut inter = 0.0;
    let mut union = 0.0;
    for t in lo..hi {
        match (a.box_at(t), b.box_at(t)) {
            (Some(ba), Some(bb)) => {
                let i = ba.intersection_area(bb);
                inter += i;
                union += ba.area() + bb.area() - i;
            }
            (Some(x), None) | (None, Some(x)) => union += x.area(),
            (None, None) => {}
        }
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A ⟨subject, predicate, object⟩ triplet localized by two tracks and a span.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationInstance {
    pub subject_cat: usize,
    pub predicate: usize,
    pub object_cat: usize,
    pub subject_track: Tubelet,
    pub object_track: Tubelet,
    pub span: Span,
    pub score: f64,
}

impl RelationInstance {
    pub fn labels(&self) -> (usize, usize, usize) {
        (self.subject_cat, self.predicate, self.object_cat)
    }
}

/// Matching score between two relation instances: the smaller of the
/// subject and object vIoU, each track first restricted to its instance span.
pub fn viou_pair(pred: &RelationInstance, gt: &RelationInstance) -> f64 {
    let role = |p: &Tubelet, g: &Tubelet| match (p.restrict(&pred.span), g.restrict(&gt.span)) {
        (Some(a), Some(b)) => viou(&a, &b),
        _ => 0.0,
    };
    role(&pred.subject_track, &gt.subject_track).min(role(&pred.object_track, &gt.object_track))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tube(id: usize, t0: usize, len: usize, b: BBox) -> Tubelet {
        Tubelet {
            id,
            category: 0,
            score: 1.0,
            t_begin: t0,
            boxes: vec![b; len],
            frame_scores: None,
        }
    }

    fn unit() -> BBox {
        BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(0.2, 0.2, 0.1, 0.5).is_err());
        assert!(BBox::new(0.0, 0.0, 1.2, 0.5).is_err());
        assert!(BBox::new(0.1, 0.1, 0.2, 0.2).is_ok());
    }

    #[test]
    fn frame_iou_examples() {
        let a = BBox::new(0.1, 0.1, 0.4, 0.5).unwrap();
        assert_eq!(frame_iou(&a, &a), 1.0);
        let b = BBox::new(0.5, 0.5, 0.9, 0.9).unwrap();
        assert_eq!(frame_iou(&a, &b), 0.0);
        let half = BBox::new(0.0, 0.0, 0.5, 1.0).unwrap();
        assert_eq!(frame_iou(&unit(), &half), 0.5);
    }

    #[test]
    fn pairs_from_spans() {
        let b = unit();
        let ts = vec![tube(0, 0, 10, b), tube(1, 5, 10, b), tube(2, 20, 10, b)];
        let pairs = make_pairs(&ts);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].key(), (0, 1));
        assert_eq!(pairs[1].key(), (1, 0));
        assert_eq!(pairs[0].overlap, Span::new(5, 10));

        let co: Vec<_> = (0..4).map(|i| tube(i, 0, 5, b)).collect();
        assert_eq!(make_pairs(&co).len(), 12);
        assert!(make_pairs(&[]).is_empty());
        assert!(make_pairs(&[tube(0, 0, 3, b), tube(1, 3, 3, b)]).is_empty());
    }

    #[test]
    fn viou_examples() {
        let b = BBox::new(0.2, 0.2, 0.6, 0.7).unwrap();
        let a = tube(0, 0, 10, b);
        assert_eq!(viou(&a, &a), 1.0);
        assert_eq!(viou(&a, &tube(1, 10, 5, b)), 0.0);
        let c = tube(1, 5, 10, b);
        assert!((viou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn viou_pair_examples() {
        let b = BBox::new(0.2, 0.2, 0.6, 0.7).unwrap();
        let far = BBox::new(0.7, 0.7, 0.9, 0.9).unwrap();
        let rel = |s: Tubelet, o: Tubelet, span: Span| RelationInstance {
            subject_cat: 0,
            predicate: 0,
            object_cat: 0,
            subject_track: s,
            object_track: o,
            span,
            score: 1.0,
        };
        let gt = rel(tube(0, 0, 20, b), tube(1, 0, 20, b), Span::new(0, 10));
        assert_eq!(viou_pair(&gt, &gt), 1.0);

        let bad_obj = rel(tube(0, 0, 20, b), tube(1, 0, 20, far), Span::new(0, 10));
        assert_eq!(viou_pair(&bad_obj, &gt), 0.0);

        // Subject identical, object shifted in time: 1/3.
        let gt2 = rel(tube(0, 0, 15, b), tube(1, 0, 10, b), Span::new(0, 15));
        let pred = rel(tube(0, 0, 15, b), tube(1, 5, 10, b), Span::new(0, 15));
        assert!((viou_pair(&pred, &gt2) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tiou_and_restrict() {
        assert_eq!(Span::new(0, 10).tiou(&Span::new(5, 15)), 5.0 / 15.0);
        assert_eq!(Span::new(0, 10).tiou(&Span::new(10, 15)), 0.0);
        let t = tube(3, 4, 6, unit());
        let r = t.restrict(&Span::new(0, 7)).unwrap();
        assert_eq!(r.span(), Span::new(4, 7));
        assert!(t.restrict(&Span::new(10, 12)).is_none());
    }

    #[test]
    fn mean_score_uses_frame_scores() {
        let mut t = tube(0, 2, 4, unit());
        t.score = 0.5;
        assert_eq!(t.mean_score(&Span::new(0, 10)), 0.5);
        t.frame_scores = Some(vec![1.0, 0.8, 0.6, 0.4]);
        assert!((t.mean_score(&Span::new(3, 5)) - 0.7).abs() < 1e-15);
    }
}
