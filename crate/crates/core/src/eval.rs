//! Relation tagging and detection metrics.
//!
//! Detection matching is greedy in rank order: a prediction is a hit when
//! its (subject, predicate, object) labels equal those of a still-unmatched
//! GT relation and their pair vIoU reaches the threshold; among several
//! candidates the largest vIoU wins (then the lowest GT index).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::geometry::{viou_pair, RelationInstance};
use crate::stage2::ScoredTriplet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub viou_thresh: f64,
    pub precision_at: Vec<usize>,
    pub recall_at: Vec<usize>,
    /// Spans shorter than this are short.
    pub short_below: usize,
    /// Spans at least this long are long; the rest are medium.
    pub long_from: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            viou_thresh: 0.5,
            precision_at: vec![1, 5, 10],
            recall_at: vec![50, 100],
            short_below: 30,
            long_from: 120,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Short,
    Medium,
    Long,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Short, Bucket::Medium, Bucket::Long];

    pub fn of(len: usize, cfg: &EvalConfig) -> Bucket {
        if len < cfg.short_below {
            Bucket::Short
        } else if len < cfg.long_from {
            Bucket::Medium
        } else {
            Bucket::Long
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Medium => "medium",
            Bucket::Long => "long",
        }
    }
}

/// Ranked predictions and GT of one video.
#[derive(Clone, Debug)]
pub struct VideoResult {
    pub video_id: String,
    /// Sorted by score, descending; callers apply their tie-break first.
    pub predictions: Vec<RelationInstance>,
    pub gt: Vec<RelationInstance>,
}

/// Groups ranked triplets by video and resolves their tracks.
pub fn video_results(dataset: &Dataset, triplets: &[ScoredTriplet]) -> Result<Vec<VideoResult>> {
    let mut by_video: BTreeMap<&str, Vec<&ScoredTriplet>> = BTreeMap::new();
    for t in triplets {
        by_video.entry(t.video_id.as_str()).or_default().push(t);
    }
    dataset
        .videos
        .iter()
        .map(|v| {
            let mut ts: Vec<ScoredTriplet> = by_video
                .get(v.video_id.as_str())
                .map(|x| x.iter().map(|t| (*t).clone()).collect())
                .unwrap_or_default();
            crate::stage2::rank_triplets(&mut ts);
            Ok(VideoResult {
                video_id: v.video_id.clone(),
                predictions: ts.iter().map(|t| t.to_instance(v)).collect::<Result<_>>()?,
                gt: v.gt_instances(),
            })
        })
        .collect()
}

/// Greedy matching in rank order; entry `i` is the GT index matched by
/// prediction `i`.
pub fn greedy_match(preds: &[RelationInstance], gt: &[RelationInstance], thresh: f64) -> Vec<Option<usize>> {
    let mut used = vec![false; gt.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(f64, usize)> = None;
            for (g, gi) in gt.iter().zip(0..) {
                if used[gi] || g.labels() != p.labels() {
                    continue;
                }
                let v = viou_pair(p, g);
                if v >= thresh && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, gi));
                }
            }
            let m = best.map(|(_, gi)| gi);
            if let Some(gi) = m {
                used[gi] = true;
            }
            m
        })
        .collect()
}

/// Non-interpolated AP of a ranked hit list against `num_gt` relations.
fn ap_from_hits(hits: impl IntoIterator<Item = bool>, num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (i, h) in hits.into_iter().enumerate() {
        if h {
            tp += 1;
            sum += tp as f64 / (i + 1) as f64;
        }
    }
    sum / num_gt as f64
}

/// Detection AP of one video. The flag is set when GT is empty, in which
/// case AP is reported as 0.
pub fn detection_ap(preds: &[RelationInstance], gt: &[RelationInstance], thresh: f64) -> (f64, bool) {
    if gt.is_empty() {
        return (0.0, true);
    }
    let m = greedy_match(preds, gt, thresh);
    (ap_from_hits(m.iter().map(Option::is_some), gt.len()), false)
}

/// Distinct labels in rank order (first occurrence keeps the max score).
fn distinct_labels(preds: &[RelationInstance]) -> Vec<(usize, usize, usize)> {
    let mut seen = BTreeSet::new();
    preds.iter().map(RelationInstance::labels).filter(|l| seen.insert(*l)).collect()
}

/// Tagging precision at K for one video; missing slots count as misses.
pub fn video_precision_at(preds: &[RelationInstance], gt: &[RelationInstance], k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let truth: BTreeSet<_> = gt.iter().map(RelationInstance::labels).collect();
    let hits = distinct_labels(preds).into_iter().take(k).filter(|l| truth.contains(l)).count();
    hits as f64 / k as f64
}

/// Mean tagging P@K over videos with at least one GT relation.
pub fn tagging_precision(results: &[VideoResult], k: usize) -> f64 {
    mean(results.iter().filter(|r| !r.gt.is_empty()).map(|r| video_precision_at(&r.predictions, &r.gt, k)))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// AP of one video restricted to the GT in `bucket`. Predictions matched to
/// GT of another bucket are dropped from the ranking rather than counted as
/// false positives. `None` when the bucket has no GT in this video.
pub fn bucket_ap(r: &VideoResult, bucket: Bucket, cfg: &EvalConfig) -> Option<f64> {
    let in_bucket: Vec<bool> = r.gt.iter().map(|g| Bucket::of(g.span.len(), cfg) == bucket).collect();
    let n = in_bucket.iter().filter(|&&b| b).count();
    if n == 0 {
        return None;
    }
    let m = greedy_match(&r.predictions, &r.gt, cfg.viou_thresh);
    let hits = m.iter().filter_map(|x| match x {
        Some(gi) if !in_bucket[*gi] => None,
        Some(_) => Some(true),
        None => Some(false),
    });
    Some(ap_from_hits(hits, n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Tagging precision keyed by K.
    pub p_at: BTreeMap<usize, f64>,
    /// Detection mAP (mean per-video AP).
    pub map: f64,
    /// Detection recall keyed by N.
    pub recall_at: BTreeMap<usize, f64>,
    /// Detection mAP per duration bucket; absent buckets have no GT.
    pub per_duration: BTreeMap<Bucket, f64>,
    pub num_videos: usize,
    pub num_gt: usize,
    /// Videos without GT, excluded from every per-video average.
    pub empty_gt_videos: usize,
}

pub fn evaluate(results: &[VideoResult], cfg: &EvalConfig) -> MetricReport {
    let scored: Vec<&VideoResult> = results.iter().filter(|r| !r.gt.is_empty()).collect();
    let p_at = cfg.precision_at.iter().map(|&k| (k, tagging_precision(results, k))).collect();
    let map = mean(scored.iter().map(|r| detection_ap(&r.predictions, &r.gt, cfg.viou_thresh).0));
    let num_gt: usize = results.iter().map(|r| r.gt.len()).sum();
    let matches: Vec<Vec<Option<usize>>> = results
        .iter()
        .map(|r| greedy_match(&r.predictions, &r.gt, cfg.viou_thresh))
        .collect();
    let recall_at = cfg
        .recall_at
        .iter()
        .map(|&n| {
            let tp: usize = matches.iter().map(|m| m.iter().take(n).filter(|x| x.is_some()).count()).sum();
            (n, if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 })
        })
        .collect();
    let mut per_duration = BTreeMap::new();
    for b in Bucket::ALL {
        let aps: Vec<f64> = results.iter().filter_map(|r| bucket_ap(r, b, cfg)).collect();
        if !aps.is_empty() {
            per_duration.insert(b, mean(aps.into_iter()));
        }
    }
    MetricReport {
        p_at,
        map,
        recall_at,
        per_duration,
        num_videos: results.len(),
        num_gt,
        empty_gt_videos: results.len() - scored.len(),
    }
}

impl MetricReport {
    /// Aligned two-column table.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = Vec::new();
        for (k, v) in &self.p_at {
            rows.push((format!("tagging P@{k}"), format!("{v:.4}")));
        }
        rows.push(("detection mAP".into(), format!("{:.4}", self.map)));
        for (n, v) in &self.recall_at {
            rows.push((format!("detection R@{n}"), format!("{v:.4}")));
        }
        for b in Bucket::ALL {
            let v = self.per_duration.get(&b).map_or("-".to_string(), |v| format!("{v:.4}"));
            rows.push((format!("mAP {}", b.name()), v));
        }
        rows.push(("videos".into(), self.num_videos.to_string()));
        rows.push(("gt relations".into(), self.num_gt.to_string()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>8}");
        }
        out
    }

    /// `bucket,map` CSV of the duration breakdown.
    pub fn duration_csv(&self) -> String {
        let mut out = String::from("bucket,map\n");
        for b in Bucket::ALL {
            let v = self.per_duration.get(&b).map_or(String::new(), |v| format!("{v}"));
            let _ = writeln!(out, "{},{v}", b.name());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Span, Tubelet};

    fn track(id: usize, start: usize, end: usize) -> Tubelet {
        Tubelet {
            id,
            category: 0,
            score: 1.0,
            t_begin: start,
            boxes: vec![BBox::new(0.1, 0.1, 0.3, 0.3).unwrap(); end - start],
            frame_scores: None,
        }
    }

    fn inst(pred: usize, span: (usize, usize), score: f64) -> RelationInstance {
        RelationInstance {
            subject_cat: 0,
            predicate: pred,
            object_cat: 1,
            subject_track: track(0, 0, 100),
            object_track: track(1, 0, 100),
            span: Span::new(span.0, span.1),
            score,
        }
    }

    #[test]
    fn tagging_example() {
        let gt = vec![inst(0, (0, 10), 1.0), inst(1, (0, 10), 1.0)];
        let preds = vec![inst(0, (0, 10), 0.9), inst(2, (0, 10), 0.8), inst(0, (20, 30), 0.75), inst(1, (0, 10), 0.7)];
        assert_eq!(video_precision_at(&preds, &gt, 1), 1.0);
        assert!((video_precision_at(&preds, &gt, 5) - 0.4).abs() < 1e-15);
        assert_eq!(video_precision_at(&[], &gt, 1), 0.0);
    }

    #[test]
    fn ap_examples() {
        let gt = vec![inst(0, (0, 10), 1.0)];
        assert_eq!(detection_ap(&[inst(0, (0, 10), 0.9)], &gt, 0.5).0, 1.0);
        let two = vec![inst(1, (0, 10), 0.9), inst(0, (0, 10), 0.8)];
        assert_eq!(detection_ap(&two, &gt, 0.5).0, 0.5);
        assert_eq!(detection_ap(&[inst(2, (0, 10), 0.9)], &gt, 0.5).0, 0.0);
        assert_eq!(detection_ap(&two, &[], 0.5), (0.0, true));
        // Temporal mismatch fails the vIoU test.
        assert_eq!(detection_ap(&[inst(0, (5, 40), 0.9)], &gt, 0.5).0, 0.0);
    }

    #[test]
    fn one_gt_is_never_matched_twice() {
        let gt = vec![inst(0, (0, 10), 1.0)];
        let preds = vec![inst(0, (0, 10), 0.9), inst(0, (0, 10), 0.8)];
        assert_eq!(greedy_match(&preds, &gt, 0.5), vec![Some(0), None]);
    }

    #[test]
    fn perfect_video_scores_one_everywhere() {
        let gt = vec![inst(0, (0, 40), 1.0)];
        let r = VideoResult {
            video_id: "v".into(),
            predictions: gt.clone(),
            gt,
        };
        let cfg = EvalConfig {
            precision_at: vec![1],
            ..EvalConfig::default()
        };
        let m = evaluate(&[r], &cfg);
        assert_eq!(m.p_at[&1], 1.0);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.recall_at[&50], 1.0);
        assert_eq!(m.per_duration[&Bucket::Medium], 1.0);
        assert!(!m.per_duration.contains_key(&Bucket::Long));
    }

    #[test]
    fn bucket_ignores_other_bucket_matches() {
        let gt = vec![inst(0, (0, 10), 1.0), inst(1, (0, 150), 1.0)];
        let preds = vec![inst(1, (0, 150), 0.9), inst(0, (0, 10), 0.8)];
        let r = VideoResult {
            video_id: "v".into(),
            predictions: preds,
            gt,
        };
        let cfg = EvalConfig::default();
        assert_eq!(bucket_ap(&r, Bucket::Short, &cfg), Some(1.0));
        assert_eq!(bucket_ap(&r, Bucket::Long, &cfg), Some(1.0));
        assert_eq!(bucket_ap(&r, Bucket::Medium, &cfg), None);
    }

    #[test]
    fn report_renders() {
        let gt = vec![inst(0, (0, 40), 1.0)];
        let r = VideoResult {
            video_id: "v".into(),
            predictions: vec![],
            gt,
        };
        let m = evaluate(&[r], &EvalConfig::default());
        assert!(m.to_table().contains("detection mAP"));
        assert!(m.duration_csv().starts_with("bucket,map\nshort,\nmedium,0\n"));
        let js = serde_json::to_string(&m).unwrap();
        let back: MetricReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, m);
    }
}
