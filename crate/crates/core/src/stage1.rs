//! Interaction proposals: per-frame interactivityness over a temporal
//! window, its training loop, and 1D watershed segmentation of score tracks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Video};
use crate::error::{Error, Result};
use crate::features::{ExternalStore, PairFrameFeatures};
use crate::geometry::{frame_iou, make_pairs, Span, TubeletPair};
use crate::model::{sgd_batch_step, PairModel, StepOptions};
use crate::numcore::{bce_logit_loss, sigmoid, Matrix, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    /// Window size `m`.
    pub window: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Negatives kept per positive each epoch.
    pub neg_ratio: usize,
    /// Descending watershed levels in (0,1).
    pub thresholds: Vec<f64>,
    pub min_len: usize,
    pub dedup_tiou: f64,
    /// Global gradient-norm clip for each SGD step.
    pub clip_norm: Option<f64>,
    /// Per-frame IoU a detected track needs against a GT track to inherit
    /// its label.
    pub match_iou: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            window: 30,
            epochs: 20,
            lr: 0.01,
            batch: 128,
            neg_ratio: 3,
            thresholds: vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4],
            min_len: 5,
            dedup_tiou: 0.8,
            match_iou: 0.5,
            clip_norm: Some(1.0),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.batch == 0 || self.min_len == 0 {
            return Err(Error::invalid("stage1: window, batch and min_len must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("stage1: bad learning rate {}", self.lr)));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::invalid("stage1: thresholds must be non-empty and inside (0,1)"));
        }
        if !(0.0..=1.0).contains(&self.dedup_tiou) {
            return Err(Error::invalid("stage1: dedup_tiou must be in [0,1]"));
        }
        Ok(())
    }
}

/// Interactivityness per overlap frame of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTrack {
    pub subject_id: usize,
    pub object_id: usize,
    pub overlap: Span,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionProposal {
    pub video_id: String,
    pub subject_id: usize,
    pub object_id: usize,
    pub span: Span,
    pub mean_score: f64,
    pub subject_score: f64,
    pub object_score: f64,
}

/// Local row indices of the `m`-frame window centred on local frame `f` of
/// an `n`-frame overlap, edge-replicated at both ends.
pub fn window_rows(n: usize, f: usize, m: usize) -> Vec<usize> {
    let last = n.saturating_sub(1) as isize;
    let start = f as isize - (m / 2) as isize;
    (0..m as isize).map(|r| (start + r).clamp(0, last) as usize).collect()
}

/// `m × F` window around absolute frame `t`.
pub fn window_features(feats: &PairFrameFeatures, t: usize, m: usize) -> Result<Matrix> {
    if !feats.overlap.contains(t) {
        return Err(Error::invalid(format!("frame {t} outside overlap {:?}", feats.overlap)));
    }
    let rows = window_rows(feats.overlap.len(), feats.local(t), m);
    Ok(feats.frames.gather_rows(&rows))
}

fn cats(feats: &PairFrameFeatures) -> (usize, usize) {
    (feats.subject_cat, feats.object_cat)
}

/// Interactivityness of absolute frame `t`.
pub fn score_frame(model: &PairModel, feats: &PairFrameFeatures, t: usize, m: usize) -> Result<f64> {
    let w = window_features(feats, t, m)?;
    Ok(sigmoid(model.logits(&w, cats(feats))?[0]))
}

/// Scores every overlap frame; embeddings are computed once per frame and
/// pooled per window.
pub fn score_track(model: &PairModel, feats: &PairFrameFeatures, m: usize) -> Result<ScoreTrack> {
    let n = feats.overlap.len();
    let cache = model.frame_cache(&feats.frames, cats(feats))?;
    let scores = (0..n)
        .map(|f| Ok(sigmoid(model.pooled_logits(&cache, &window_rows(n, f, m))?[0])))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTrack {
        subject_id: feats.subject_id,
        object_id: feats.object_id,
        overlap: feats.overlap,
        scores,
    })
}

/// 0/1 label per overlap frame: inside a GT span whose subject and object
/// tracks both match the pair's tubelets on that frame.
pub fn frame_labels(video: &Video, pair: &TubeletPair<'_>, match_iou: f64) -> Vec<u8> {
    let mut labels = vec![0u8; pair.overlap.len()];
    for r in &video.relations {
        let (Some(gs), Some(go)) = (video.tubelet(r.subject_id), video.tubelet(r.object_id)) else {
            continue;
        };
        let Some(span) = r.span.intersect(&pair.overlap) else {
            continue;
        };
        for t in span.start..span.end {
            let i = t - pair.overlap.start;
            if labels[i] == 1 {
                continue;
            }
            let (s, o) = pair.boxes_at(t).expect("overlap frame");
            let hit = match (gs.box_at(t), go.box_at(t)) {
                (Some(a), Some(b)) => frame_iou(s, a) >= match_iou && frame_iou(o, b) >= match_iou,
                _ => false,
            };
            if hit {
                labels[i] = 1;
            }
        }
    }
    labels
}

/// Pair features plus frame labels for every pair in a dataset.
pub struct LabeledPairs {
    pub pairs: Vec<PairFrameFeatures>,
    pub labels: Vec<Vec<u8>>,
}

pub fn label_dataset(
    dataset: &Dataset,
    model: &PairModel,
    externals: &ExternalStore,
    match_iou: f64,
) -> Result<LabeledPairs> {
    let per_video: Vec<Result<Vec<(PairFrameFeatures, Vec<u8>)>>> = dataset
        .videos
        .par_iter()
        .map(|v| {
            make_pairs(&v.tubelets)
                .iter()
                .map(|p| Ok((model.pair_features(p, &v.video_id, externals)?, frame_labels(v, p, match_iou))))
                .collect()
        })
        .collect();
    let mut out = LabeledPairs {
        pairs: Vec::new(),
        labels: Vec::new(),
    };
    for v in per_video {
        for (f, l) in v? {
            out.pairs.push(f);
            out.labels.push(l);
        }
    }
    Ok(out)
}

/// Trains the single-logit interactivityness head (and trunk) with BCE.
/// Returns the mean loss of each epoch, which is also stored in
/// `model.meta`.
pub fn train_stage1(
    dataset: &Dataset,
    model: &mut PairModel,
    cfg: &Stage1Config,
    externals: &ExternalStore,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.encoder.head_w.value.cols != 1 {
        return Err(Error::invalid("stage1 model needs a single-logit head"));
    }
    let data = label_dataset(dataset, model, externals, cfg.match_iou)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, labels) in data.labels.iter().enumerate() {
        for (f, &l) in labels.iter().enumerate() {
            if l == 1 {
                pos.push((p, f, 1u8));
            } else {
                neg.push((p, f, 0u8));
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::Training("stage1: dataset has no positive frames".into()));
    }
    let m = cfg.window;
    let per_sample = |model: &PairModel, &(p, f, label): &(usize, usize, u8)| {
        let feats = &data.pairs[p];
        let rows = feats.frames.gather_rows(&window_rows(feats.overlap.len(), f, m));
        model.sample_grads(&rows, cats(feats), |l| {
            let (loss, d) = bce_logit_loss(l[0], label)?;
            Ok((loss, vec![d]))
        })
    };
    let opts = StepOptions {
        lr: cfg.lr,
        freeze_trunk: false,
        clip_norm: cfg.clip_norm,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut neg);
        let keep = neg.len().min(pos.len() * cfg.neg_ratio);
        let mut samples: Vec<(usize, usize, u8)> = pos.iter().chain(&neg[..keep]).copied().collect();
        rng.shuffle(&mut samples);
        let mut total = 0.0;
        for (step, batch) in samples.chunks(cfg.batch).enumerate() {
            let loss = sgd_batch_step(model, batch, opts, per_sample)
                .map_err(|e| at_step(e, epoch, step))?;
            total += loss * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log::info!("stage1 epoch {} loss {mean:.6}", epoch + 1);
        curve.push(mean);
    }
    model.meta.epochs_run += cfg.epochs;
    model.meta.final_loss = curve.last().copied();
    model.meta.loss_curve.extend_from_slice(&curve);
    Ok(curve)
}

pub(crate) fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {} step {}: {msg}", epoch + 1, step + 1)),
        other => other,
    }
}

/// A candidate or kept segment of a score track, in track-local frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub span: Span,
    pub mean_score: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Maximal runs with score ≥ τ and length ≥ `min_len`, for every τ.
pub fn watershed_candidates(scores: &[f64], thresholds: &[f64], min_len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    for &tau in thresholds {
        let mut start = None;
        for t in 0..=scores.len() {
            let above = t < scores.len() && scores[t] >= tau;
            match (above, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    if t - s >= min_len {
                        out.push(Segment {
                            span: Span::new(s, t),
                            mean_score: mean(&scores[s..t]),
                        });
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    out
}

/// Greedy temporal NMS by descending mean score (ties: earlier, then
/// shorter span first). Output is sorted by span.
pub fn dedup_segments(mut cands: Vec<Segment>, dedup_tiou: f64) -> Vec<Segment> {
    cands.sort_by(|a, b| {
        b.mean_score
            .total_cmp(&a.mean_score)
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.end.cmp(&b.span.end))
    });
    let mut kept: Vec<Segment> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.span.tiou(&c.span) <= dedup_tiou) {
            kept.push(c);
        }
    }
    kept.sort_by_key(|s| s.span);
    kept
}

/// Multi-threshold run extraction followed by greedy dedup.
pub fn watershed_1d(scores: &[f64], thresholds: &[f64], min_len: usize, dedup_tiou: f64) -> Vec<Segment> {
    dedup_segments(watershed_candidates(scores, thresholds, min_len), dedup_tiou)
}

/// Proposals for one video: every pair is scored, segmented and the
/// results are concatenated in (subject, object, span) order.
pub fn generate_proposals(
    video: &Video,
    model: &PairModel,
    cfg: &Stage1Config,
    externals: &ExternalStore,
) -> Result<Vec<InteractionProposal>> {
    let pairs = make_pairs(&video.tubelets);
    let per_pair: Vec<Result<Vec<InteractionProposal>>> = pairs
        .par_iter()
        .map(|pair| {
            let feats = model.pair_features(pair, &video.video_id, externals)?;
            let track = score_track(model, &feats, cfg.window)?;
            Ok(proposals_from_track(&video.video_id, pair, &track, cfg))
        })
        .collect();
    let mut out = Vec::new();
    for p in per_pair {
        out.extend(p?);
    }
    out.sort_by(|a, b| (a.subject_id, a.object_id, a.span).cmp(&(b.subject_id, b.object_id, b.span)));
    Ok(out)
}

/// Segments a score track into proposals with absolute spans.
pub fn proposals_from_track(
    video_id: &str,
    pair: &TubeletPair<'_>,
    track: &ScoreTrack,
    cfg: &Stage1Config,
) -> Vec<InteractionProposal> {
    let off = track.overlap.start;
    watershed_1d(&track.scores, &cfg.thresholds, cfg.min_len, cfg.dedup_tiou)
        .into_iter()
        .map(|seg| {
            let span = Span::new(seg.span.start + off, seg.span.end + off);
            InteractionProposal {
                video_id: video_id.to_string(),
                subject_id: pair.subject.id,
                object_id: pair.object.id,
                span,
                mean_score: seg.mean_score,
                subject_score: pair.subject.mean_score(&span),
                object_score: pair.object.mean_score(&span),
            }
        })
        .collect()
}

/// Proposals for every video, in dataset order.
pub fn propose_dataset(
    dataset: &Dataset,
    model: &PairModel,
    cfg: &Stage1Config,
    externals: &ExternalStore,
) -> Result<Vec<InteractionProposal>> {
    let per_video: Vec<Result<Vec<InteractionProposal>>> = dataset
        .videos
        .par_iter()
        .map(|v| generate_proposals(v, model, cfg, externals))
        .collect();
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::Variant;
    use crate::features::FeatureConfig;
    use crate::geometry::{BBox, Tubelet};

    const TH: [f64; 6] = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];

    fn spans(segs: &[Segment]) -> Vec<(usize, usize)> {
        segs.iter().map(|s| (s.span.start, s.span.end)).collect()
    }

    #[test]
    fn window_rows_replicate_edges() {
        assert_eq!(window_rows(100, 50, 30), (35..65).collect::<Vec<_>>());
        let w = window_rows(100, 0, 30);
        assert_eq!(w.len(), 30);
        assert!(w[..15].iter().all(|&r| r == 0));
        assert_eq!(&w[15..], &(0..15).collect::<Vec<_>>()[..]);
        let w = window_rows(3, 2, 6);
        assert_eq!(w, vec![0, 0, 1, 2, 2, 2]);
    }

    #[test]
    fn watershed_examples() {
        let all_high = vec![0.95; 20];
        assert_eq!(spans(&watershed_1d(&all_high, &TH, 5, 0.8)), vec![(0, 20)]);
        assert!(watershed_1d(&[0.1; 20], &TH, 5, 0.8).is_empty());
        let mut bimodal = vec![0.9; 10];
        bimodal.extend([0.1; 10]);
        bimodal.extend([0.9; 10]);
        assert_eq!(spans(&watershed_1d(&bimodal, &TH, 5, 0.8)), vec![(0, 10), (20, 30)]);
    }

    #[test]
    fn watershed_nested_basins() {
        // A peak inside a plateau survives as its own proposal when its
        // temporal IoU with the plateau is small.
        let mut s = vec![0.5; 40];
        for v in &mut s[10..16] {
            *v = 0.95;
        }
        let out = watershed_1d(&s, &TH, 5, 0.8);
        assert_eq!(spans(&out), vec![(0, 40), (10, 16)]);
        let again = dedup_segments(out.clone(), 0.8);
        assert_eq!(again, out);
    }

    #[test]
    fn short_runs_are_dropped() {
        let mut s = vec![0.0; 20];
        for v in &mut s[3..7] {
            *v = 1.0;
        }
        assert!(watershed_1d(&s, &TH, 5, 0.8).is_empty());
    }

    fn toy_video() -> Video {
        let mk = |id, x: f64| Tubelet {
            id,
            category: id,
            score: 0.9,
            t_begin: 0,
            boxes: (0..40).map(|t| BBox::new(x, 0.1 + t as f64 * 0.01, x + 0.1, 0.2 + t as f64 * 0.01).unwrap()).collect(),
            frame_scores: None,
        };
        Video {
            video_id: "v0".into(),
            num_frames: 40,
            tubelets: vec![mk(0, 0.1), mk(1, 0.4)],
            relations: vec![crate::dataset::GtRelation {
                subject_id: 0,
                object_id: 1,
                predicate: 0,
                span: Span::new(10, 25),
            }],
        }
    }

    fn toy_model(seed: u64) -> PairModel {
        let f = FeatureConfig::new(true, false, true, 8, 2, &[]).unwrap();
        PairModel::new(f, 8, 4, 1, Variant::Literal, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn labels_follow_gt_tracks() {
        let v = toy_video();
        let pairs = make_pairs(&v.tubelets);
        let fwd = pairs.iter().find(|p| p.key() == (0, 1)).unwrap();
        let rev = pairs.iter().find(|p| p.key() == (1, 0)).unwrap();
        let l = frame_labels(&v, fwd, 0.5);
        assert_eq!(l.iter().filter(|&&x| x == 1).count(), 15);
        assert!(l[10..25].iter().all(|&x| x == 1));
        assert!(frame_labels(&v, rev, 0.5).iter().all(|&x| x == 0));
    }

    #[test]
    fn fast_track_matches_per_frame_scoring() {
        let v = toy_video();
        let m = toy_model(2);
        let pairs = make_pairs(&v.tubelets);
        let feats = m.pair_features(&pairs[0], "v0", &ExternalStore::new()).unwrap();
        let track = score_track(&m, &feats, 30).unwrap();
        for t in [0, 7, 20, 39] {
            assert_eq!(track.scores[t], score_frame(&m, &feats, t, 30).unwrap());
        }
    }

    #[test]
    fn zero_head_scores_sigmoid_bias() {
        let v = toy_video();
        let mut m = toy_model(2);
        m.encoder.head_w.value.fill(0.0);
        m.encoder.head_b.value.data[0] = 0.3;
        let pairs = make_pairs(&v.tubelets);
        let feats = m.pair_features(&pairs[0], "v0", &ExternalStore::new()).unwrap();
        assert!((score_frame(&m, &feats, 5, 30).unwrap() - sigmoid(0.3)).abs() < 1e-15);
    }

    #[test]
    fn score_invariant_to_window_order() {
        let v = toy_video();
        let m = toy_model(9);
        let pairs = make_pairs(&v.tubelets);
        let feats = m.pair_features(&pairs[0], "v0", &ExternalStore::new()).unwrap();
        let w = window_features(&feats, 20, 30).unwrap();
        let rev: Vec<usize> = (0..30).rev().collect();
        let a = m.logits(&w, (0, 1)).unwrap()[0];
        let b = m.logits(&w.gather_rows(&rev), (0, 1)).unwrap()[0];
        assert!((a - b).abs() < 1e-9);
    }

    fn toy_dataset(relations: bool) -> Dataset {
        let mut v = toy_video();
        if !relations {
            v.relations.clear();
        }
        Dataset {
            schema_version: crate::dataset::DATASET_SCHEMA,
            name: "toy".into(),
            split: "train".into(),
            categories: vec!["a".into(), "b".into()],
            predicates: vec!["p".into()],
            videos: vec![v],
        }
    }

    #[test]
    fn no_positive_frames_is_a_training_error() {
        let mut m = toy_model(1);
        let err = train_stage1(
            &toy_dataset(false),
            &mut m,
            &Stage1Config::default(),
            &ExternalStore::new(),
            &mut RngState::new(0),
        )
        .unwrap_err();
        assert_eq!(err.kind(), "training");
    }

    #[test]
    fn training_is_deterministic_and_separates() {
        let cfg = Stage1Config {
            epochs: 15,
            batch: 16,
            lr: 0.05,
            ..Stage1Config::default()
        };
        let run = || {
            let mut m = toy_model(3);
            let c = train_stage1(&toy_dataset(true), &mut m, &cfg, &ExternalStore::new(), &mut RngState::new(5)).unwrap();
            (m, c)
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
        assert!(c1.last().unwrap() < &c1[0], "{c1:?}");
        assert_eq!(m1.meta.epochs_run, 15);
    }
}
