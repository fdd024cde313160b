//! Predicate prediction over interaction proposals and triplet assembly.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Video};
use crate::error::{Error, Result};
use crate::features::{ExternalStore, PairFrameFeatures};
use crate::geometry::{viou_pair, RelationInstance, Span, TubeletPair};
use crate::model::{sgd_batch_step, FrameCache, PairModel, StepOptions};
use crate::numcore::{ce_loss, softmax, RngState};
use crate::stage1::{at_step, InteractionProposal};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Frames sampled per span (`n`).
    pub n_sample: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Predicates emitted per proposal.
    pub top_p: usize,
    /// Train only the new head, keeping the stage-1 trunk fixed.
    pub freeze_trunk: bool,
    /// vIoU a proposal needs with a GT relation to become a training sample.
    pub match_viou: f64,
    /// Global gradient-norm clip for each SGD step.
    pub clip_norm: Option<f64>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            n_sample: 25,
            epochs: 10,
            lr: 0.01,
            batch: 128,
            top_p: 3,
            freeze_trunk: false,
            match_viou: 0.5,
            clip_norm: Some(5.0),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.n_sample == 0 || self.batch == 0 || self.top_p == 0 {
            return Err(Error::invalid("stage2: n_sample, batch and top_p must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("stage2: bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// `n` evenly spaced frames of `span`: `start + floor(i·len/n)`.
pub fn sample_frames(span: Span, n: usize) -> Vec<usize> {
    let len = span.len();
    (0..n).map(|i| span.start + i * len / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredicateModel {
    pub model: PairModel,
    pub n_sample: usize,
}

impl PredicateModel {
    /// Shares the stage-1 trunk and starts a fresh `num_predicates`-way head.
    pub fn from_stage1(stage1: &PairModel, num_predicates: usize, n_sample: usize, rng: &mut RngState) -> Result<Self> {
        if num_predicates < 2 {
            return Err(Error::invalid("predicate model needs at least 2 classes"));
        }
        Ok(PredicateModel {
            model: stage1.with_fresh_head(num_predicates, rng),
            n_sample,
        })
    }

    pub fn num_predicates(&self) -> usize {
        self.model.encoder.head_w.value.cols
    }

    /// Predicate distribution for `span` of a pair whose frame cache is
    /// already computed, sorted by probability (ties: lower predicate id).
    pub fn predict_cached(&self, feats: &PairFrameFeatures, cache: &FrameCache, span: Span) -> Result<Vec<(usize, f64)>> {
        if !feats.overlap.contains_span(&span) || span.is_empty() {
            return Err(Error::invalid(format!("span {span:?} outside overlap {:?}", feats.overlap)));
        }
        let rows: Vec<usize> = sample_frames(span, self.n_sample).into_iter().map(|t| feats.local(t)).collect();
        let probs = softmax(&self.model.pooled_logits(cache, &rows)?)?;
        let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    pub fn predict(&self, feats: &PairFrameFeatures, span: Span) -> Result<Vec<(usize, f64)>> {
        let cache = self.model.frame_cache(&feats.frames, (feats.subject_cat, feats.object_cat))?;
        self.predict_cached(feats, &cache, span)
    }
}

/// One stage-2 training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Sample {
    pub video: usize,
    pub subject_id: usize,
    pub object_id: usize,
    pub span: Span,
    pub label: usize,
}

fn proposal_instance(video: &Video, p: &InteractionProposal) -> Option<RelationInstance> {
    let s = video.tubelet(p.subject_id)?;
    let o = video.tubelet(p.object_id)?;
    Some(RelationInstance {
        subject_cat: s.category,
        predicate: 0,
        object_cat: o.category,
        subject_track: s.clone(),
        object_track: o.clone(),
        span: p.span,
        score: p.mean_score,
    })
}

/// GT relations plus proposals overlapping a GT relation at vIoU ≥
/// `match_viou`, labeled with the best-overlapping GT's predicate.
///
/// GT relations reference the video's own tubelet list, so their pairs are
/// used as-is.
pub fn stage2_samples(dataset: &Dataset, proposals: &[InteractionProposal], match_viou: f64) -> Vec<Stage2Sample> {
    let index: BTreeMap<&str, usize> = dataset.videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
    let mut out: Vec<Stage2Sample> = Vec::new();
    let gts: Vec<Vec<RelationInstance>> = dataset.videos.iter().map(Video::gt_instances).collect();
    for (vi, v) in dataset.videos.iter().enumerate() {
        for r in &v.relations {
            out.push(Stage2Sample {
                video: vi,
                subject_id: r.subject_id,
                object_id: r.object_id,
                span: r.span,
                label: r.predicate,
            });
        }
    }
    for p in proposals {
        let Some(&vi) = index.get(p.video_id.as_str()) else {
            continue;
        };
        let Some(inst) = proposal_instance(&dataset.videos[vi], p) else {
            continue;
        };
        let mut best: Option<(f64, usize)> = None;
        for g in &gts[vi] {
            let v = viou_pair(&inst, g);
            if v >= match_viou && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g.predicate));
            }
        }
        if let Some((_, label)) = best {
            out.push(Stage2Sample {
                video: vi,
                subject_id: p.subject_id,
                object_id: p.object_id,
                span: p.span,
                label,
            });
        }
    }
    out
}

type PairKey = (usize, usize, usize);

/// Feature matrices for every (video, subject, object) triple referenced by
/// `keys`.
fn pair_feature_map(
    dataset: &Dataset,
    keys: impl IntoIterator<Item = PairKey>,
    model: &PairModel,
    externals: &ExternalStore,
) -> Result<BTreeMap<PairKey, PairFrameFeatures>> {
    let keys: Vec<PairKey> = keys.into_iter().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let built: Vec<Result<(PairKey, PairFrameFeatures)>> = keys
        .par_iter()
        .map(|&(vi, s, o)| {
            let v = &dataset.videos[vi];
            let (ts, to) = match (v.tubelet(s), v.tubelet(o)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::data(format!("{}: unknown tubelet pair ({s}, {o})", v.video_id))),
            };
            let pair = TubeletPair::new(ts, to)
                .ok_or_else(|| Error::data(format!("{}: tubelets {s} and {o} never overlap", v.video_id)))?;
            Ok(((vi, s, o), model.pair_features(&pair, &v.video_id, externals)?))
        })
        .collect();
    built.into_iter().collect()
}

/// Fine-tunes (or, with `freeze_trunk`, head-trains) the predicate model
/// with softmax cross-entropy. Returns the per-epoch mean loss.
pub fn train_stage2(
    dataset: &Dataset,
    proposals: &[InteractionProposal],
    model: &mut PredicateModel,
    cfg: &Stage2Config,
    externals: &ExternalStore,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.num_predicates() != dataset.predicates.len() {
        return Err(Error::invalid(format!(
            "predicate head has {} classes, dataset has {}",
            model.num_predicates(),
            dataset.predicates.len()
        )));
    }
    let mut samples = stage2_samples(dataset, proposals, cfg.match_viou);
    if samples.is_empty() {
        return Err(Error::Training("stage2: no labeled samples".into()));
    }
    let feats = pair_feature_map(
        dataset,
        samples.iter().map(|s| (s.video, s.subject_id, s.object_id)),
        &model.model,
        externals,
    )?;
    let n = model.n_sample;
    let per_sample = |m: &PairModel, s: &Stage2Sample| {
        let f = &feats[&(s.video, s.subject_id, s.object_id)];
        let rows: Vec<usize> = sample_frames(s.span, n).into_iter().map(|t| f.local(t)).collect();
        m.sample_grads(&f.frames.gather_rows(&rows), (f.subject_cat, f.object_cat), |l| ce_loss(l, s.label))
    };
    let opts = StepOptions {
        lr: cfg.lr,
        freeze_trunk: cfg.freeze_trunk,
        clip_norm: cfg.clip_norm,
    };
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut samples);
        let mut total = 0.0;
        for (step, batch) in samples.chunks(cfg.batch).enumerate() {
            let loss = sgd_batch_step(&mut model.model, batch, opts, per_sample).map_err(|e| at_step(e, epoch, step))?;
            total += loss * batch.len() as f64;
        }
        let mean = total / samples.len() as f64;
        log::info!("stage2 epoch {} loss {mean:.6}", epoch + 1);
        curve.push(mean);
    }
    let meta = &mut model.model.meta;
    meta.epochs_run += cfg.epochs;
    meta.final_loss = curve.last().copied();
    meta.loss_curve.extend_from_slice(&curve);
    Ok(curve)
}

/// Fraction of stage-2 training samples whose argmax is the label.
pub fn training_accuracy(
    dataset: &Dataset,
    proposals: &[InteractionProposal],
    model: &PredicateModel,
    cfg: &Stage2Config,
    externals: &ExternalStore,
) -> Result<f64> {
    let samples = stage2_samples(dataset, proposals, cfg.match_viou);
    if samples.is_empty() {
        return Ok(0.0);
    }
    let feats = pair_feature_map(
        dataset,
        samples.iter().map(|s| (s.video, s.subject_id, s.object_id)),
        &model.model,
        externals,
    )?;
    let mut hits = 0usize;
    for s in &samples {
        let ranked = model.predict(&feats[&(s.video, s.subject_id, s.object_id)], s.span)?;
        hits += usize::from(ranked[0].0 == s.label);
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub video_id: String,
    pub subject_id: usize,
    pub object_id: usize,
    pub subject_cat: usize,
    pub predicate: usize,
    pub object_cat: usize,
    pub span: Span,
    pub predicate_prob: f64,
    pub subject_score: f64,
    pub object_score: f64,
    pub final_score: f64,
}

impl ScoredTriplet {
    pub fn labels(&self) -> (usize, usize, usize) {
        (self.subject_cat, self.predicate, self.object_cat)
    }

    /// Resolves the tubelet references against `video`.
    pub fn to_instance(&self, video: &Video) -> Result<RelationInstance> {
        let get = |id| {
            video
                .tubelet(id)
                .cloned()
                .ok_or_else(|| Error::data(format!("{}: triplet references unknown tubelet {id}", video.video_id)))
        };
        Ok(RelationInstance {
            subject_cat: self.subject_cat,
            predicate: self.predicate,
            object_cat: self.object_cat,
            subject_track: get(self.subject_id)?,
            object_track: get(self.object_id)?,
            span: self.span,
            score: self.final_score,
        })
    }
}

/// Descending final score; ties by (subject, object, span start, predicate).
pub fn rank_triplets(ts: &mut [ScoredTriplet]) {
    ts.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then(a.subject_id.cmp(&b.subject_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.span.start.cmp(&b.span.start))
            .then(a.span.end.cmp(&b.span.end))
            .then(a.predicate.cmp(&b.predicate))
    });
}

/// Top-`top_p` predicates per proposal of one video, ranked.
pub fn assemble_triplets(
    video: &Video,
    proposals: &[InteractionProposal],
    model: &PredicateModel,
    top_p: usize,
    externals: &ExternalStore,
) -> Result<Vec<ScoredTriplet>> {
    let mut by_pair: BTreeMap<(usize, usize), Vec<&InteractionProposal>> = BTreeMap::new();
    for p in proposals.iter().filter(|p| p.video_id == video.video_id) {
        by_pair.entry((p.subject_id, p.object_id)).or_default().push(p);
    }
    let mut out = Vec::new();
    for ((s, o), props) in by_pair {
        let (ts, to) = match (video.tubelet(s), video.tubelet(o)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::data(format!("{}: proposal references unknown tubelet", video.video_id))),
        };
        let pair = TubeletPair::new(ts, to)
            .ok_or_else(|| Error::data(format!("{}: proposal pair ({s}, {o}) never overlaps", video.video_id)))?;
        let feats = model.model.pair_features(&pair, &video.video_id, externals)?;
        let cache = model.model.frame_cache(&feats.frames, (feats.subject_cat, feats.object_cat))?;
        for p in props {
            let ranked = model.predict_cached(&feats, &cache, p.span)?;
            for &(predicate, prob) in ranked.iter().take(top_p) {
                out.push(ScoredTriplet {
                    video_id: video.video_id.clone(),
                    subject_id: s,
                    object_id: o,
                    subject_cat: ts.category,
                    predicate,
                    object_cat: to.category,
                    span: p.span,
                    predicate_prob: prob,
                    subject_score: p.subject_score,
                    object_score: p.object_score,
                    final_score: prob * p.subject_score * p.object_score,
                });
            }
        }
    }
    rank_triplets(&mut out);
    Ok(out)
}

/// Triplets for every video, grouped in dataset order and ranked within
/// each video.
pub fn detect_dataset(
    dataset: &Dataset,
    proposals: &[InteractionProposal],
    model: &PredicateModel,
    top_p: usize,
    externals: &ExternalStore,
) -> Result<Vec<ScoredTriplet>> {
    let per_video: Vec<Result<Vec<ScoredTriplet>>> = dataset
        .videos
        .par_iter()
        .map(|v| assemble_triplets(v, proposals, model, top_p, externals))
        .collect();
    let mut out = Vec::new();
    for v in per_video {
        out.extend(v?);
    }
    Ok(out)
}
