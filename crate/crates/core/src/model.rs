//! Pair model: feature layout, class-embedding table and encoder, plus the
//! deterministic mini-batch SGD driver shared by both stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{self, init_params, EncoderDims, EncoderGrads, EncoderParams, Variant};
use crate::error::{Error, Result};
use crate::features::{build_pair_features, write_language, ExternalStore, FeatureConfig, PairFrameFeatures};
use crate::geometry::TubeletPair;
use crate::numcore::{sgd_step, Matrix, ParamSet, ParamTensor, RngState};

/// Samples per gradient chunk. Chunk sums are reduced in order, so results
/// do not depend on the thread count.
const GRAD_CHUNK: usize = 16;

/// Init scale of the category table. Unit-scale rows dominate the per-frame
/// layer norm and let the model memorize category pairs.
const LANG_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairModel {
    pub features: FeatureConfig,
    /// `num_classes × E`, present iff the language channel is enabled.
    pub lang: Option<ParamTensor>,
    pub encoder: EncoderParams,
    pub meta: TrainMeta,
}

impl PairModel {
    pub fn new(
        features: FeatureConfig,
        embed_dim: usize,
        primitives: usize,
        head: usize,
        variant: Variant,
        rng: &mut RngState,
    ) -> Result<Self> {
        features.validate()?;
        let dims = EncoderDims {
            input: features.dim(),
            embed: embed_dim,
            primitives,
            head,
        };
        let encoder = init_params(dims, variant, rng)?;
        let lang = features.uses_language().then(|| {
            let (n, e) = (features.num_classes, features.embed_dim);
            ParamTensor::new("lang", Matrix::from_vec(n, e, (0..n * e).map(|_| LANG_INIT_STD * rng.normal()).collect()).unwrap())
        });
        Ok(PairModel {
            features,
            lang,
            encoder,
            meta: TrainMeta {
                seed: rng.seed(),
                ..TrainMeta::default()
            },
        })
    }

    pub fn num_primitives(&self) -> usize {
        self.encoder.primitives.value.rows
    }

    pub fn is_trained(&self) -> bool {
        self.meta.epochs_run > 0
    }

    /// Copy sharing the trunk (embedding table, layer norm, projection,
    /// primitives) with a freshly initialized `h`-way head.
    pub fn with_fresh_head(&self, h: usize, rng: &mut RngState) -> PairModel {
        let mut m = self.clone();
        m.encoder.reset_head(h, rng);
        m.meta = TrainMeta {
            seed: rng.seed(),
            ..TrainMeta::default()
        };
        m.zero_grads();
        m
    }

    /// Writes the current class embeddings into the language block of `rows`.
    pub fn prepare(&self, rows: &mut Matrix, cats: (usize, usize)) -> Result<()> {
        if let (Some(off), Some(table)) = (self.features.language_offset(), &self.lang) {
            write_language(rows, off, table, cats.0, cats.1)?;
        }
        Ok(())
    }

    /// Feature matrix for a pair's overlap, taking external channels for
    /// `video_id` from `externals`.
    pub fn pair_features(
        &self,
        pair: &TubeletPair<'_>,
        video_id: &str,
        externals: &ExternalStore,
    ) -> Result<PairFrameFeatures> {
        let ext = externals.get(video_id).map(Vec::as_slice).unwrap_or(&[]);
        build_pair_features(pair, &self.features, self.lang.as_ref(), ext)
    }

    pub fn logits(&self, rows: &Matrix, cats: (usize, usize)) -> Result<Vec<f64>> {
        let mut s = rows.clone();
        self.prepare(&mut s, cats)?;
        encoding::forward(&s, &self.encoder).map(|(l, _)| l)
    }

    /// Per-frame embeddings and assignments for a whole pair, for scoring
    /// many windows or samples of the same pair.
    pub fn frame_cache(&self, rows: &Matrix, cats: (usize, usize)) -> Result<FrameCache> {
        let mut s = rows.clone();
        self.prepare(&mut s, cats)?;
        let r = encoding::embed(&s, &self.encoder)?;
        let z = encoding::soft_assign(&r, &self.encoder.primitives.value, self.encoder.beta).z;
        Ok(FrameCache { r, z })
    }

    /// Logits of the encoding pooled over `idx` (repeats allowed). Matches
    /// `logits` on the gathered rows exactly, since every stage before
    /// pooling is row-wise.
    pub fn pooled_logits(&self, cache: &FrameCache, idx: &[usize]) -> Result<Vec<f64>> {
        let enc = encoding::encode_rows(&cache.r, &cache.z, idx, &self.encoder);
        encoding::head_forward(&enc, &self.encoder)
    }

    /// One sample's loss and gradients. `loss_fn` maps logits to
    /// `(loss, dloss/dlogits)`.
    pub fn sample_grads<F>(&self, rows: &Matrix, cats: (usize, usize), loss_fn: F) -> Result<(f64, SampleGrads)>
    where
        F: FnOnce(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        let mut s = rows.clone();
        self.prepare(&mut s, cats)?;
        let (logits, cache) = encoding::forward(&s, &self.encoder)?;
        let (loss, dl) = loss_fn(&logits)?;
        let want_input = self.lang.is_some();
        let mut g = encoding::backward(&dl, &cache, &self.encoder, want_input)?;
        let lang = match (g.input.take(), self.features.language_offset(), &self.lang) {
            (Some(dx), Some(off), Some(table)) => {
                let e = table.value.cols;
                let mut ds = vec![0.0; e];
                let mut dobj = vec![0.0; e];
                for i in 0..dx.rows {
                    let r = dx.row(i);
                    for t in 0..e {
                        ds[t] += r[off + t];
                        dobj[t] += r[off + e + t];
                    }
                }
                Some(LangGrad {
                    subject_cat: cats.0,
                    object_cat: cats.1,
                    subject: ds,
                    object: dobj,
                })
            }
            _ => None,
        };
        Ok((loss, SampleGrads { encoder: g, lang }))
    }
}

impl ParamSet for PairModel {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v = self.encoder.tensors();
        if let Some(l) = &self.lang {
            v.push(l);
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v = self.encoder.tensors_mut();
        if let Some(l) = &mut self.lang {
            v.push(l);
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct LangGrad {
    pub subject_cat: usize,
    pub object_cat: usize,
    pub subject: Vec<f64>,
    pub object: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FrameCache {
    pub r: Matrix,
    pub z: Matrix,
}

#[derive(Clone, Debug)]
pub struct SampleGrads {
    pub encoder: EncoderGrads,
    pub lang: Option<LangGrad>,
}

/// Dense gradient buffer laid out like `PairModel::tensors()`.
struct GradBuffer(Vec<Vec<f64>>);

impl GradBuffer {
    fn zeros_like(m: &PairModel) -> Self {
        GradBuffer(m.tensors().iter().map(|t| vec![0.0; t.value.len()]).collect())
    }

    fn add_sample(&mut self, g: &SampleGrads) {
        let e = &g.encoder;
        let srcs: [&[f64]; 7] = [
            &e.ln_gain,
            &e.ln_bias,
            &e.w.data,
            &e.b,
            &e.primitives.data,
            &e.head_w.data,
            &e.head_b,
        ];
        for (dst, src) in self.0.iter_mut().zip(srcs) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        if let Some(l) = &g.lang {
            let table = &mut self.0[7];
            let w = l.subject.len();
            for (t, v) in l.subject.iter().enumerate() {
                table[l.subject_cat * w + t] += v;
            }
            for (t, v) in l.object.iter().enumerate() {
                table[l.object_cat * w + t] += v;
            }
        }
    }

    fn add(&mut self, other: &GradBuffer) {
        for (dst, src) in self.0.iter_mut().zip(&other.0) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// Options for [`sgd_batch_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepOptions {
    pub lr: f64,
    /// Update only the head; trunk gradients are discarded.
    pub freeze_trunk: bool,
    /// Rescale the mean gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

/// Computes the mean loss and gradient over `batch`, then applies one SGD
/// step. Non-finite losses or gradients abort with a numeric error.
pub fn sgd_batch_step<S, F>(model: &mut PairModel, batch: &[S], opts: StepOptions, per_sample: F) -> Result<f64>
where
    S: Sync,
    F: Fn(&PairModel, &S) -> Result<(f64, SampleGrads)> + Sync,
{
    if batch.is_empty() {
        return Ok(0.0);
    }
    let frozen: &PairModel = model;
    let partials: Vec<Result<(f64, GradBuffer)>> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut buf = GradBuffer::zeros_like(frozen);
            let mut loss = 0.0;
            for s in chunk {
                let (l, g) = per_sample(frozen, s)?;
                loss += l;
                buf.add_sample(&g);
            }
            Ok((loss, buf))
        })
        .collect();
    let mut total = GradBuffer::zeros_like(model);
    let mut loss = 0.0;
    for p in partials {
        let (l, b) = p?;
        loss += l;
        total.add(&b);
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
    }
    for (i, (t, g)) in model.tensors_mut().into_iter().zip(&total.0).enumerate() {
        // Encoder order puts head_w/head_b at indices 5 and 6.
        let is_head = i == 5 || i == 6;
        t.zero_grad();
        if opts.freeze_trunk && !is_head {
            continue;
        }
        for (a, b) in t.grad.data.iter_mut().zip(g) {
            *a = b * scale;
        }
        if !t.grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {}", t.name)));
        }
    }
    if let Some(c) = opts.clip_norm {
        let norm = model
            .tensors()
            .iter()
            .flat_map(|t| t.grad.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > c {
            let f = c / norm;
            for t in model.tensors_mut() {
                t.grad.scale(f);
            }
        }
    }
    sgd_step(model, opts.lr);
    if !model.encoder.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(loss)
}

/// Dimensions of one random gradient-check case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub variant: Variant,
    pub frames: usize,
    pub input: usize,
    pub embed: usize,
    pub primitives: usize,
    pub head: usize,
    pub max_rel_error: f64,
}

/// Finite-difference check of the whole model (class-embedding table,
/// layer norm, projection, primitives and head) at a random configuration
/// drawn from `seed`. `multi_class` selects a softmax head with
/// cross-entropy; otherwise a single sigmoid output with BCE.
pub fn stack_grad_check(variant: Variant, multi_class: bool, seed: u64) -> Result<GradCheckCase> {
    let mut rng = RngState::new(seed);
    let classes = 2 + rng.below(3);
    let ext = [("ext".to_string(), 1 + rng.below(3))];
    let use_mask = rng.below(2) == 1;
    let n_ext = rng.below(2);
    let mut features = crate::features::FeatureConfig::new(true, use_mask, true, 2, classes, &ext[..n_ext])?;
    features.embed_dim = 2 + rng.below(2);
    let embed = 2 + rng.below(5);
    let primitives = 1 + rng.below(5);
    let head = if multi_class { 2 + rng.below(3) } else { 1 };
    let mut m = PairModel::new(features, embed, primitives, head, variant, &mut rng)?;
    for t in m.tensors_mut() {
        for x in t.value.data.iter_mut() {
            *x += 0.1 * rng.normal();
        }
    }
    let frames = 2 + rng.below(7);
    let f = m.features.dim();
    let rows = Matrix::from_vec(frames, f, (0..frames * f).map(|_| rng.normal()).collect())?;
    let cats = (rng.below(classes), rng.below(classes));
    let label = rng.below(head.max(2));
    let loss_of = |logits: &[f64]| -> Result<(f64, Vec<f64>)> {
        if head == 1 {
            let (l, d) = crate::numcore::bce_logit_loss(logits[0], label as u8)?;
            Ok((l, vec![d]))
        } else {
            crate::numcore::ce_loss(logits, label)
        }
    };
    let (_, g) = m.sample_grads(&rows, cats, loss_of)?;
    let mut buf = GradBuffer::zeros_like(&m);
    buf.add_sample(&g);
    for (t, gb) in m.tensors_mut().into_iter().zip(&buf.0) {
        t.grad.data.copy_from_slice(gb);
    }
    let err = crate::numcore::grad_check(
        &mut m,
        |m: &PairModel| {
            m.logits(&rows, cats)
                .and_then(|l| loss_of(&l))
                .map(|(l, _)| l)
                .unwrap_or(f64::NAN)
        },
        1e-5,
    )?;
    Ok(GradCheckCase {
        variant,
        frames,
        input: f,
        embed,
        primitives,
        head,
        max_rel_error: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{ce_loss, grad_check};

    fn small_model(seed: u64, variant: Variant) -> PairModel {
        let features = FeatureConfig::new(true, false, true, 8, 3, &[]).unwrap();
        let mut rng = RngState::new(seed);
        PairModel::new(features, 4, 3, 2, variant, &mut rng).unwrap()
    }

    fn random_rows(n: usize, f: usize, rng: &mut RngState) -> Matrix {
        Matrix::from_vec(n, f, (0..n * f).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn random_stack_configs_pass_grad_check() {
        for v in Variant::ALL {
            for multi in [false, true] {
                for seed in 0..4 {
                    let c = stack_grad_check(v, multi, seed).unwrap();
                    assert!(c.max_rel_error < 1e-4, "{c:?}");
                }
            }
        }
    }

    #[test]
    fn language_gradient_flows_into_table() {
        for v in Variant::ALL {
            let mut m = small_model(3, v);
            let mut rng = RngState::new(4);
            let rows = random_rows(5, m.features.dim(), &mut rng);
            let cats = (2, 0);
            let (_, g) = m.sample_grads(&rows, cats, |l| ce_loss(l, 1)).unwrap();
            let mut buf = GradBuffer::zeros_like(&m);
            buf.add_sample(&g);
            for (t, gb) in m.tensors_mut().into_iter().zip(&buf.0) {
                t.grad.data.copy_from_slice(gb);
            }
            let err = grad_check(
                &mut m,
                |m: &PairModel| ce_loss(&m.logits(&rows, cats).unwrap(), 1).unwrap().0,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{v:?}: {err}");
        }
    }

    #[test]
    fn batch_step_is_deterministic_and_lowers_loss() {
        let mut rng = RngState::new(5);
        let f = small_model(1, Variant::Literal).features.dim();
        let data: Vec<(Matrix, usize)> = (0..40)
            .map(|i| {
                let mut r = random_rows(6, f, &mut rng);
                let label = i % 2;
                for j in 0..6 {
                    r.row_mut(j)[0] += if label == 1 { 3.0 } else { -3.0 };
                }
                (r, label)
            })
            .collect();
        let run = || {
            let mut m = small_model(7, Variant::Literal);
            let mut losses = Vec::new();
            for _ in 0..30 {
                let l = sgd_batch_step(
                    &mut m,
                    &data,
                    StepOptions {
                        lr: 0.01,
                        freeze_trunk: false,
                        clip_norm: None,
                    },
                    |m, (rows, y)| m.sample_grads(rows, (0, 1), |l| ce_loss(l, *y)),
                )
                .unwrap();
                losses.push(l);
            }
            (m, losses)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1.encoder, m2.encoder);
        assert!(l1.last().unwrap() < &l1[0], "{l1:?}");
    }

    #[test]
    fn frozen_trunk_only_moves_head() {
        let mut m = small_model(8, Variant::Aggregate);
        let before = m.clone();
        let mut rng = RngState::new(9);
        let rows = random_rows(4, m.features.dim(), &mut rng);
        sgd_batch_step(
            &mut m,
            &[(rows, 1usize)],
            StepOptions {
                lr: 0.1,
                freeze_trunk: true,
                clip_norm: None,
            },
            |m, (rows, y)| m.sample_grads(rows, (0, 0), |l| ce_loss(l, *y)),
        )
        .unwrap();
        assert_eq!(m.encoder.w, before.encoder.w);
        assert_eq!(m.encoder.primitives, before.encoder.primitives);
        assert_eq!(m.lang, before.lang);
        assert_ne!(m.encoder.head_w.value, before.encoder.head_w.value);
    }
}
