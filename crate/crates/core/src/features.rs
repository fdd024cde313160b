//! Per-frame feature rows for a tubelet pair.
//!
//! A row is the concatenation of the enabled channels in their declared
//! order. Geometry channels (motion, mask) are computed from the two boxes;
//! the language channel looks up a learnable class-embedding table; external
//! channels are read from precomputed per-video files.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{frame_iou, BBox, Span, TubeletPair};
use crate::numcore::{Matrix, ParamTensor};

pub const MOTION_DIM: usize = 10;
pub const DEFAULT_MASK_GRID: usize = 8;
pub const DEFAULT_EMBED_DIM: usize = 16;

const LOG_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Channel {
    Motion,
    Mask { grid: usize },
    Language,
    External { name: String, dim: usize },
}

impl Channel {
    /// Geometry and class channels can be computed from a single frame.
    pub fn is_temporal_free(&self) -> bool {
        !matches!(self, Channel::External { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub channels: Vec<Channel>,
    /// Class-embedding width `E` (language channel contributes `2E`).
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl FeatureConfig {
    /// Standard channel order: motion, mask, language, externals.
    pub fn new(
        use_motion: bool,
        use_mask: bool,
        use_language: bool,
        mask_grid: usize,
        num_classes: usize,
        external_channels: &[(String, usize)],
    ) -> Result<Self> {
        let mut channels = Vec::new();
        if use_motion {
            channels.push(Channel::Motion);
        }
        if use_mask {
            channels.push(Channel::Mask { grid: mask_grid });
        }
        if use_language {
            channels.push(Channel::Language);
        }
        for (name, dim) in external_channels {
            channels.push(Channel::External {
                name: name.clone(),
                dim: *dim,
            });
        }
        let cfg = FeatureConfig {
            channels,
            embed_dim: DEFAULT_EMBED_DIM,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("feature config enables no channel"));
        }
        for c in &self.channels {
            match c {
                Channel::Mask { grid } if *grid < 2 => {
                    return Err(Error::invalid("mask grid must be at least 2"))
                }
                Channel::External { dim: 0, name } => {
                    return Err(Error::invalid(format!("external channel {name} has zero dim")))
                }
                Channel::Language if self.embed_dim == 0 || self.num_classes == 0 => {
                    return Err(Error::invalid("language channel needs classes and embed_dim > 0"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn channel_dim(&self, c: &Channel) -> usize {
        match c {
            Channel::Motion => MOTION_DIM,
            Channel::Mask { grid } => 2 * grid * grid,
            Channel::Language => 2 * self.embed_dim,
            Channel::External { dim, .. } => *dim,
        }
    }

    /// Total row width `F`.
    pub fn dim(&self) -> usize {
        self.channels.iter().map(|c| self.channel_dim(c)).sum()
    }

    /// `(channel, column offset, width)` for each channel in order.
    pub fn layout(&self) -> Vec<(&Channel, usize, usize)> {
        let mut off = 0;
        self.channels
            .iter()
            .map(|c| {
                let d = self.channel_dim(c);
                let r = (c, off, d);
                off += d;
                r
            })
            .collect()
    }

    pub fn language_offset(&self) -> Option<usize> {
        self.layout()
            .into_iter()
            .find(|(c, _, _)| matches!(c, Channel::Language))
            .map(|(_, off, _)| off)
    }

    pub fn uses_language(&self) -> bool {
        self.channels.contains(&Channel::Language)
    }
}

/// Relative geometry of a subject/object box pair:
/// `[Δcx/ws, Δcy/hs, ln(ws/wo), ln(hs/ho), IoU, area_s, area_o,
///   intersection/enclosing-area, cx_s, cy_s]` with Δ = object − subject.
pub fn motion_feature(s: &BBox, o: &BBox) -> [f64; MOTION_DIM] {
    let (ws, hs) = (s.width(), s.height());
    let (wo, ho) = (o.width(), o.height());
    let (cxs, cys) = s.center();
    let (cxo, cyo) = o.center();
    let ratio = |a: f64, b: f64| (a / b.max(LOG_CLAMP)).max(LOG_CLAMP).ln();
    [
        (cxo - cxs) / ws.max(LOG_CLAMP),
        (cyo - cys) / hs.max(LOG_CLAMP),
        ratio(ws, wo),
        ratio(hs, ho),
        frame_iou(s, o),
        s.area(),
        o.area(),
        s.intersection_area(o) / s.enclosing_area(o).max(LOG_CLAMP),
        cxs,
        cys,
    ]
}

fn coverage_map(b: &BBox, grid: usize, out: &mut [f64]) {
    let cell = 1.0 / grid as f64;
    for r in 0..grid {
        let y0 = r as f64 * cell;
        let oy = (b.y2.min(y0 + cell) - b.y1.max(y0)).max(0.0);
        for c in 0..grid {
            let x0 = c as f64 * cell;
            let ox = (b.x2.min(x0 + cell) - b.x1.max(x0)).max(0.0);
            out[r * grid + c] = (ox * oy / (cell * cell)).min(1.0);
        }
    }
}

/// Two `grid × grid` occupancy maps (subject then object), row-major.
pub fn mask_feature(s: &BBox, o: &BBox, grid: usize) -> Vec<f64> {
    let g2 = grid * grid;
    let mut out = vec![0.0; 2 * g2];
    coverage_map(s, grid, &mut out[..g2]);
    coverage_map(o, grid, &mut out[g2..]);
    out
}

/// Concatenated subject and object class embeddings.
pub fn language_feature(subject_cat: usize, object_cat: usize, table: &ParamTensor) -> Result<Vec<f64>> {
    let n = table.value.rows;
    if subject_cat >= n || object_cat >= n {
        return Err(Error::invalid(format!(
            "category ({subject_cat}, {object_cat}) out of range for {n} classes"
        )));
    }
    let mut out = Vec::with_capacity(2 * table.value.cols);
    out.extend_from_slice(table.value.row(subject_cat));
    out.extend_from_slice(table.value.row(object_cat));
    Ok(out)
}

/// Overwrites the language block of every row with the current embeddings.
pub(crate) fn write_language(
    rows: &mut Matrix,
    offset: usize,
    table: &ParamTensor,
    subject_cat: usize,
    object_cat: usize,
) -> Result<()> {
    let lang = language_feature(subject_cat, object_cat, table)?;
    for i in 0..rows.rows {
        rows.row_mut(i)[offset..offset + lang.len()].copy_from_slice(&lang);
    }
    Ok(())
}

/// Precomputed per-frame vectors for one video and one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalFeatures {
    pub video_id: String,
    pub channel_name: String,
    pub dim: usize,
    pub frames: BTreeMap<usize, Vec<f64>>,
}

impl ExternalFeatures {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in &self.frames {
            if v.len() != self.dim {
                return Err(Error::data(format!(
                    "{}/{}: frame {f} has {} values, expected {}",
                    self.video_id,
                    self.channel_name,
                    v.len(),
                    self.dim
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(format!(
                    "{}/{}: frame {f} has non-finite values",
                    self.video_id, self.channel_name
                )));
            }
        }
        Ok(())
    }
}

/// Feature rows for the overlap frames of one pair.
/// External channels per video id.
pub type ExternalStore = BTreeMap<String, Vec<ExternalFeatures>>;

#[derive(Clone, Debug, PartialEq)]
pub struct PairFrameFeatures {
    pub subject_id: usize,
    pub object_id: usize,
    pub subject_cat: usize,
    pub object_cat: usize,
    pub overlap: Span,
    /// One row per overlap frame, in frame order.
    pub frames: Matrix,
}

impl PairFrameFeatures {
    /// Row index of absolute frame `t`.
    pub fn local(&self, t: usize) -> usize {
        t - self.overlap.start
    }
}

/// Builds the `N × F` feature matrix for a pair's overlap.
///
/// `table` is required when the language channel is enabled. Externals are
/// looked up by channel name and must cover every overlap frame.
pub fn build_pair_features(
    pair: &TubeletPair<'_>,
    cfg: &FeatureConfig,
    table: Option<&ParamTensor>,
    externals: &[ExternalFeatures],
) -> Result<PairFrameFeatures> {
    let n = pair.overlap.len();
    let mut frames = Matrix::zeros(n, cfg.dim());
    for (ch, off, dim) in cfg.layout() {
        match ch {
            Channel::Motion => {
                for (i, t) in (pair.overlap.start..pair.overlap.end).enumerate() {
                    let (s, o) = pair.boxes_at(t).expect("overlap frame");
                    frames.row_mut(i)[off..off + dim].copy_from_slice(&motion_feature(s, o));
                }
            }
            Channel::Mask { grid } => {
                for (i, t) in (pair.overlap.start..pair.overlap.end).enumerate() {
                    let (s, o) = pair.boxes_at(t).expect("overlap frame");
                    frames.row_mut(i)[off..off + dim].copy_from_slice(&mask_feature(s, o, *grid));
                }
            }
            Channel::Language => {
                let table = table.ok_or_else(|| Error::invalid("language channel needs an embedding table"))?;
                let lang = language_feature(pair.subject.category, pair.object.category, table)?;
                for i in 0..n {
                    frames.row_mut(i)[off..off + dim].copy_from_slice(&lang);
                }
            }
            Channel::External { name, dim: want } => {
                let ext = externals
                    .iter()
                    .find(|e| &e.channel_name == name)
                    .ok_or_else(|| Error::data(format!("missing external channel {name}")))?;
                if ext.dim != *want {
                    return Err(Error::data(format!(
                        "external channel {name} has dim {}, config declares {want}",
                        ext.dim
                    )));
                }
                for (i, t) in (pair.overlap.start..pair.overlap.end).enumerate() {
                    let v = ext.frames.get(&t).ok_or_else(|| {
                        Error::data(format!("external channel {name} missing frame {t} of {}", ext.video_id))
                    })?;
                    frames.row_mut(i)[off..off + dim].copy_from_slice(v);
                }
            }
        }
    }
    Ok(PairFrameFeatures {
        subject_id: pair.subject.id,
        object_id: pair.object.id,
        subject_cat: pair.subject.category,
        object_cat: pair.object.category,
        overlap: pair.overlap,
        frames,
    })
}

/// Single-frame row from the non-temporal channels only; external columns
/// stay zero and a missing category pair leaves the language block zero.
pub fn single_frame_features(
    s: &BBox,
    o: &BBox,
    cats: Option<(usize, usize)>,
    cfg: &FeatureConfig,
    table: Option<&ParamTensor>,
) -> Result<Vec<f64>> {
    let mut row = vec![0.0; cfg.dim()];
    for (ch, off, dim) in cfg.layout() {
        match ch {
            Channel::Motion => row[off..off + dim].copy_from_slice(&motion_feature(s, o)),
            Channel::Mask { grid } => row[off..off + dim].copy_from_slice(&mask_feature(s, o, *grid)),
            Channel::Language => {
                if let (Some((sc, oc)), Some(t)) = (cats, table) {
                    row[off..off + dim].copy_from_slice(&language_feature(sc, oc, t)?);
                }
            }
            Channel::External { .. } => {}
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Tubelet;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn tube(id: usize, cat: usize, t0: usize, boxes: Vec<BBox>) -> Tubelet {
        Tubelet {
            id,
            category: cat,
            score: 1.0,
            t_begin: t0,
            boxes,
            frame_scores: None,
        }
    }

    #[test]
    fn motion_identical_boxes() {
        let b = bx(0.2, 0.3, 0.4, 0.7);
        let m = motion_feature(&b, &b);
        let a = b.area();
        let expect = [0.0, 0.0, 0.0, 0.0, 1.0, a, a, 1.0, 0.3, 0.5];
        for (x, y) in m.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12, "{m:?}");
        }
    }

    #[test]
    fn motion_disjoint_and_width_ratio() {
        let s = bx(0.1, 0.1, 0.3, 0.2);
        let o = bx(0.6, 0.6, 0.7, 0.7);
        let m = motion_feature(&s, &o);
        assert_eq!(m[4], 0.0);
        assert!((m[2] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn motion_extreme_aspect_is_finite() {
        let s = bx(0.0, 0.0, 1.0, 1e-9);
        let o = bx(0.5, 0.0, 0.5 + 1e-9, 1.0);
        assert!(motion_feature(&s, &o).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mask_examples() {
        let full = bx(0.0, 0.0, 1.0, 1.0);
        let m = mask_feature(&full, &bx(0.9, 0.9, 1.0, 1.0), 8);
        assert!(m[..64].iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(m[64], 0.0);
        let q = mask_feature(&bx(0.0, 0.0, 0.5, 0.5), &full, 2);
        assert_eq!(&q[..4], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn language_examples() {
        let table = ParamTensor::new(
            "lang",
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        );
        assert_eq!(language_feature(1, 1, &table).unwrap(), vec![3.0, 4.0, 3.0, 4.0]);
        let zeros = ParamTensor::new("lang", Matrix::zeros(3, 4));
        assert_eq!(language_feature(0, 2, &zeros).unwrap(), vec![0.0; 8]);
        assert!(language_feature(2, 0, &table).is_err());
    }

    #[test]
    fn build_shapes_and_channel_order() {
        let s = tube(0, 0, 0, vec![bx(0.1, 0.1, 0.3, 0.3); 30]);
        let o = tube(1, 1, 5, vec![bx(0.2, 0.2, 0.5, 0.4); 25]);
        let pair = TubeletPair::new(&s, &o).unwrap();

        let motion_only = FeatureConfig::new(true, false, false, 8, 2, &[]).unwrap();
        let f = build_pair_features(&pair, &motion_only, None, &[]).unwrap();
        assert_eq!(f.frames.shape(), (25, 10));

        let mut ext = ExternalFeatures {
            video_id: "v".into(),
            channel_name: "i3d".into(),
            dim: 3,
            frames: BTreeMap::new(),
        };
        for t in 5..30 {
            ext.frames.insert(t, vec![t as f64, 1.0, 2.0]);
        }
        let table = ParamTensor::new("lang", Matrix::filled(2, 16, 0.5));
        let all = FeatureConfig::new(true, true, true, 8, 2, &[("i3d".into(), 3)]).unwrap();
        assert_eq!(all.dim(), 10 + 128 + 32 + 3);
        let f = build_pair_features(&pair, &all, Some(&table), std::slice::from_ref(&ext)).unwrap();
        assert_eq!(f.frames.shape(), (25, 173));
        assert_eq!(f.frames.get(0, 170), 5.0);

        // Reordered declaration permutes the column blocks.
        let mut rev = all.clone();
        rev.channels.reverse();
        let g = build_pair_features(&pair, &rev, Some(&table), std::slice::from_ref(&ext)).unwrap();
        for i in 0..25 {
            let a = f.frames.row(i);
            let b = g.frames.row(i);
            assert_eq!(&a[0..10], &b[163..173]);
            assert_eq!(&a[10..138], &b[35..163]);
            assert_eq!(&a[138..170], &b[3..35]);
            assert_eq!(&a[170..173], &b[0..3]);
        }

        ext.frames.remove(&17);
        let err = build_pair_features(&pair, &all, Some(&table), &[ext]).unwrap_err();
        assert!(err.to_string().contains("frame 17"), "{err}");
    }

    #[test]
    fn config_rejects_empty() {
        assert!(FeatureConfig::new(false, false, false, 8, 2, &[]).is_err());
        assert!(FeatureConfig::new(false, true, false, 1, 2, &[]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0.0f64..0.8, 0.0f64..0.8, 0.01f64..0.2, 0.01f64..0.2)
                .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
        }

        proptest! {
            #[test]
            fn translation_consistent(s in arb_box(), o in arb_box(), dx in -0.0f64..0.19, dy in 0.0f64..0.19) {
                let a = motion_feature(&s, &o);
                let b = motion_feature(&s.translated(dx, dy), &o.translated(dx, dy));
                for k in 0..8 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9, "component {k}: {} vs {}", a[k], b[k]);
                }
                prop_assert!((b[8] - a[8] - dx).abs() < 1e-12);
                prop_assert!((b[9] - a[9] - dy).abs() < 1e-12);
            }

            #[test]
            fn always_finite(s in arb_box(), o in arb_box()) {
                prop_assert!(motion_feature(&s, &o).iter().all(|v| v.is_finite()));
                prop_assert!(mask_feature(&s, &o, 8).iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
            }
        }
    }
}
