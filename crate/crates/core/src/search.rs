//! Query by primitive example: single-frame examples pick primitives, and
//! proposals are ranked by the assignment mass they put on them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::encoding;
use crate::error::{Error, Result};
use crate::features::{single_frame_features, ExternalStore};
use crate::geometry::{BBox, Span, TubeletPair};
use crate::model::{FrameCache, PairModel};
use crate::numcore::{sq_dist, Matrix};
use crate::stage1::InteractionProposal;
use crate::stage2::sample_frames;

/// One example frame: a subject and object box, optionally with their
/// category ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryExample {
    pub subject: BBox,
    pub object: BBox,
    #[serde(default)]
    pub categories: Option<(usize, usize)>,
}

/// Nearest primitive per example, sorted and deduplicated. Only the
/// non-temporal channels are computed; external channels stay zero.
pub fn resolve_query(examples: &[QueryExample], model: &PairModel) -> Result<Vec<usize>> {
    if !model.is_trained() {
        return Err(Error::invalid("search needs a trained model"));
    }
    if examples.is_empty() {
        return Err(Error::invalid("query has no examples"));
    }
    let c = &model.encoder.primitives.value;
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        ex.subject.validate()?;
        ex.object.validate()?;
        let row = single_frame_features(&ex.subject, &ex.object, ex.categories, &model.features, model.lang.as_ref())?;
        let r = encoding::embed(&Matrix::row_vector(row), &model.encoder)?;
        let mut best = (f64::INFINITY, 0);
        for k in 0..c.rows {
            let d = sq_dist(r.row(0), c.row(k));
            if d < best.0 {
                best = (d, k);
            }
        }
        out.push(best.1);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Relevance of every primitive for `span`: the summed assignment weight of
/// its `n` sampled frames. Entries are nonnegative and sum to `n`.
pub fn relevance(cache: &FrameCache, overlap: Span, span: Span, n: usize) -> Vec<f64> {
    let mut r = vec![0.0; cache.z.cols];
    for t in sample_frames(span, n) {
        for (acc, z) in r.iter_mut().zip(cache.z.row(t - overlap.start)) {
            *acc += z;
        }
    }
    r
}

/// Relevance of primitive `k` alone.
pub fn proposal_relevance(cache: &FrameCache, overlap: Span, span: Span, n: usize, k: usize) -> f64 {
    relevance(cache, overlap, span, n)[k]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub rank: usize,
    pub video_id: String,
    pub subject_id: usize,
    pub object_id: usize,
    pub span: Span,
    pub score: f64,
}

/// Ranks `proposals` by summed relevance of the `query` primitives. Ties
/// break by (video id, span start), then pair and span end.
pub fn search(
    query: &[usize],
    proposals: &[InteractionProposal],
    dataset: &Dataset,
    model: &PairModel,
    n: usize,
    top_r: usize,
    externals: &ExternalStore,
) -> Result<Vec<SearchHit>> {
    let k = model.num_primitives();
    let mut query = query.to_vec();
    query.sort_unstable();
    query.dedup();
    if let Some(&bad) = query.iter().find(|&&q| q >= k) {
        return Err(Error::invalid(format!("primitive {bad} out of range (K={k})")));
    }
    let mut groups: BTreeMap<(&str, usize, usize), Vec<&InteractionProposal>> = BTreeMap::new();
    for p in proposals {
        groups.entry((p.video_id.as_str(), p.subject_id, p.object_id)).or_default().push(p);
    }
    let groups: Vec<_> = groups.into_iter().collect();
    let scored: Vec<Result<Vec<SearchHit>>> = groups
        .par_iter()
        .map(|((vid, s, o), props)| {
            let video = dataset
                .videos
                .iter()
                .find(|v| v.video_id == *vid)
                .ok_or_else(|| Error::data(format!("proposal video {vid} not in dataset")))?;
            let (ts, to) = match (video.tubelet(*s), video.tubelet(*o)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::data(format!("{vid}: proposal references unknown tubelet"))),
            };
            let pair = TubeletPair::new(ts, to).ok_or_else(|| Error::data(format!("{vid}: pair ({s}, {o}) never overlaps")))?;
            let feats = model.pair_features(&pair, vid, externals)?;
            let cache = model.frame_cache(&feats.frames, (feats.subject_cat, feats.object_cat))?;
            props
                .iter()
                .map(|p| {
                    if !feats.overlap.contains_span(&p.span) || p.span.is_empty() {
                        return Err(Error::data(format!("{vid}: proposal span {:?} outside overlap", p.span)));
                    }
                    let r = relevance(&cache, feats.overlap, p.span, n);
                    // Large queries are scored through the complement, using
                    // sum_k r_k = n, so a query of every primitive ties at n
                    // exactly.
                    let score = if 2 * query.len() <= k {
                        query.iter().map(|&q| r[q]).sum()
                    } else {
                        let mut inq = vec![false; k];
                        for &q in &query {
                            inq[q] = true;
                        }
                        n as f64 - (0..k).filter(|&j| !inq[j]).map(|j| r[j]).sum::<f64>()
                    };
                    Ok(SearchHit {
                        rank: 0,
                        video_id: vid.to_string(),
                        subject_id: *s,
                        object_id: *o,
                        span: p.span,
                        score,
                    })
                })
                .collect()
        })
        .collect();
    let mut hits = Vec::new();
    for s in scored {
        hits.extend(s?);
    }
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.span.start.cmp(&b.span.start))
            .then(a.subject_id.cmp(&b.subject_id))
            .then(a.object_id.cmp(&b.object_id))
            .then(a.span.end.cmp(&b.span.end))
    });
    hits.truncate(top_r);
    for (i, h) in hits.iter_mut().enumerate() {
        h.rank = i + 1;
    }
    Ok(hits)
}
