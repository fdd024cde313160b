//! On-disk model checkpoints: named parameter arrays with shapes, the run
//! configuration that produced them and training metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::dataset::Dataset;
use crate::encoding::{EncoderParams, Variant};
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::io;
use crate::model::{PairModel, TrainMeta};
use crate::numcore::{Matrix, ParamSet, ParamTensor};
use crate::stage2::PredicateModel;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: CheckpointKind,
    pub config: RunConfig,
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    pub features: FeatureConfig,
    pub variant: Variant,
    pub beta: f64,
    /// Frames sampled per span; stage-2 checkpoints only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_sample: Option<usize>,
    pub params: Vec<NamedArray>,
    pub meta: TrainMeta,
}

impl Checkpoint {
    fn from_model(kind: CheckpointKind, model: &PairModel, cfg: &RunConfig, labels: &Dataset) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            kind,
            config: cfg.clone(),
            categories: labels.categories.clone(),
            predicates: labels.predicates.clone(),
            features: model.features.clone(),
            variant: model.encoder.variant,
            beta: model.encoder.beta,
            n_sample: None,
            params: model
                .tensors()
                .iter()
                .map(|t| NamedArray {
                    name: t.name.clone(),
                    shape: [t.value.rows, t.value.cols],
                    data: t.value.data.clone(),
                })
                .collect(),
            meta: model.meta.clone(),
        }
    }

    pub fn stage1(model: &PairModel, cfg: &RunConfig, labels: &Dataset) -> Self {
        Self::from_model(CheckpointKind::Stage1, model, cfg, labels)
    }

    pub fn stage2(model: &PredicateModel, cfg: &RunConfig, labels: &Dataset) -> Self {
        let mut c = Self::from_model(CheckpointKind::Stage2, &model.model, cfg, labels);
        c.n_sample = Some(model.n_sample);
        c
    }

    fn tensor(&self, name: &str) -> Result<ParamTensor> {
        let a = self
            .params
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Schema(format!("checkpoint has no parameter {name}")))?;
        let m = Matrix::from_vec(a.shape[0], a.shape[1], a.data.clone())
            .map_err(|_| Error::Schema(format!("parameter {name}: data does not fit shape {:?}", a.shape)))?;
        Ok(ParamTensor::new(name, m))
    }

    /// Rebuilds the model, checking every shape against the feature layout.
    pub fn to_pair_model(&self) -> Result<PairModel> {
        self.features.validate()?;
        let encoder = EncoderParams {
            variant: self.variant,
            beta: self.beta,
            ln_gain: self.tensor("ln_gain")?,
            ln_bias: self.tensor("ln_bias")?,
            w: self.tensor("w")?,
            b: self.tensor("b")?,
            primitives: self.tensor("primitives")?,
            head_w: self.tensor("head_w")?,
            head_b: self.tensor("head_b")?,
        };
        encoder.validate().map_err(|e| Error::Schema(e.to_string()))?;
        if encoder.w.value.rows != self.features.dim() {
            return Err(Error::Schema(format!(
                "w has {} input rows but the feature layout has {}",
                encoder.w.value.rows,
                self.features.dim()
            )));
        }
        let lang = if self.features.uses_language() {
            let t = self.tensor("lang")?;
            let want = (self.features.num_classes, self.features.embed_dim);
            if t.value.shape() != want {
                return Err(Error::Schema(format!("lang has shape {:?}, expected {want:?}", t.value.shape())));
            }
            Some(t)
        } else {
            None
        };
        let known = ["ln_gain", "ln_bias", "w", "b", "primitives", "head_w", "head_b", "lang"];
        if let Some(a) = self.params.iter().find(|a| !known.contains(&a.name.as_str())) {
            return Err(Error::Schema(format!("unknown parameter {}", a.name)));
        }
        let model = PairModel {
            features: self.features.clone(),
            lang,
            encoder,
            meta: self.meta.clone(),
        };
        if model.tensors().len() != self.params.len() {
            return Err(Error::Schema("checkpoint lists a parameter more than once".into()));
        }
        Ok(model)
    }

    pub fn to_stage1(&self) -> Result<PairModel> {
        self.expect(CheckpointKind::Stage1)?;
        let m = self.to_pair_model()?;
        if m.encoder.head_b.value.cols != 1 {
            return Err(Error::Schema("stage-1 head must have one output".into()));
        }
        Ok(m)
    }

    pub fn to_stage2(&self) -> Result<PredicateModel> {
        self.expect(CheckpointKind::Stage2)?;
        let model = self.to_pair_model()?;
        let n_sample = self.n_sample.ok_or_else(|| Error::Schema("stage-2 checkpoint without n_sample".into()))?;
        if model.encoder.head_b.value.cols != self.predicates.len() {
            return Err(Error::Schema(format!(
                "head has {} outputs for {} predicates",
                model.encoder.head_b.value.cols,
                self.predicates.len()
            )));
        }
        Ok(PredicateModel { model, n_sample })
    }

    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Schema(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)));
        }
        Ok(())
    }

    /// Errors if `model` asks for a different shape than the checkpoint holds.
    pub fn check_model_config(&self, model: &ModelConfig) -> Result<()> {
        let w = self.tensor("w")?;
        let c = self.tensor("primitives")?;
        let mismatches = [
            ("embed_dim", model.embed_dim, w.value.cols),
            ("primitives", model.primitives, c.value.rows),
        ];
        for (name, want, got) in mismatches {
            if want != got {
                return Err(Error::Schema(format!("config {name}={want} but checkpoint has {got}")));
            }
        }
        if model.variant != self.variant {
            return Err(Error::Schema(format!(
                "config variant {} but checkpoint has {}",
                model.variant.name(),
                self.variant.name()
            )));
        }
        Ok(())
    }

    /// Errors unless `dataset` uses the label sets the model was trained on.
    pub fn check_labels(&self, dataset: &Dataset) -> Result<()> {
        if dataset.categories != self.categories || dataset.predicates != self.predicates {
            return Err(Error::data(format!(
                "{}/{} uses different labels than the checkpoint",
                dataset.name, dataset.split
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Loads a checkpoint, refusing other schema versions before parsing
    /// the rest.
    pub fn load(path: &Path) -> Result<Self> {
        let v: serde_json::Value = io::read_json(path)?;
        match v.get("schema_version").and_then(|x| x.as_u64()) {
            Some(s) if s == CHECKPOINT_SCHEMA as u64 => {}
            Some(s) => {
                return Err(Error::Schema(format!(
                    "{}: checkpoint schema {s}, expected {CHECKPOINT_SCHEMA}",
                    path.display()
                )))
            }
            None => return Err(Error::Schema(format!("{}: missing schema_version", path.display()))),
        }
        let c: Checkpoint = serde_json::from_value(v).map_err(|e| Error::Json {
            path: path.display().to_string(),
            source: e,
        })?;
        c.to_pair_model()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngState;
    use crate::synth::{make_suite, SuiteKind};

    fn setup() -> (PairModel, RunConfig, Dataset) {
        let d = make_suite(SuiteKind::Separable, 1).unwrap().test;
        let mut cfg = RunConfig::default();
        cfg.model.embed_dim = 6;
        cfg.model.primitives = 3;
        let f = cfg.model.features(d.categories.len()).unwrap();
        let mut m = PairModel::new(f, 6, 3, 1, Variant::Literal, &mut RngState::new(2)).unwrap();
        m.meta.loss_curve = vec![0.1 + 1e-17, 1.0 / 3.0];
        m.meta.final_loss = Some(1.0 / 3.0);
        (m, cfg, d)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, cfg, d) = setup();
        let dir = std::env::temp_dir().join(format!("tuberel-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("s1.json");
        Checkpoint::stage1(&m, &cfg, &d).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        let m2 = back.to_stage1().unwrap();
        assert_eq!(m, m2);
        assert!(back.to_stage2().is_err());
        back.check_model_config(&cfg.model).unwrap();
        let mut other = cfg.model.clone();
        other.primitives = 4;
        assert!(matches!(back.check_model_config(&other), Err(Error::Schema(_))));

        let mut rng = RngState::new(3);
        let pm = PredicateModel::from_stage1(&m2, d.predicates.len(), 25, &mut rng).unwrap();
        let p2 = dir.join("s2.json");
        Checkpoint::stage2(&pm, &cfg, &d).save(&p2).unwrap();
        assert_eq!(Checkpoint::load(&p2).unwrap().to_stage2().unwrap(), pm);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn schema_and_shape_mismatches_are_refused() {
        let (m, cfg, d) = setup();
        let dir = std::env::temp_dir().join(format!("tuberel-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut c = Checkpoint::stage1(&m, &cfg, &d);
        c.schema_version = 99;
        let p = dir.join("v.json");
        c.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Schema(_))));

        let mut c = Checkpoint::stage1(&m, &cfg, &d);
        let w = c.params.iter_mut().find(|a| a.name == "w").unwrap();
        w.shape = [w.shape[0] - 1, w.shape[1]];
        w.data.truncate(w.shape[0] * w.shape[1]);
        assert!(matches!(c.to_pair_model(), Err(Error::Schema(_))));

        let mut c = Checkpoint::stage1(&m, &cfg, &d);
        c.params.retain(|a| a.name != "lang");
        assert!(c.to_pair_model().is_err());
        assert!(matches!(Checkpoint::load(&dir.join("missing.json")), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
