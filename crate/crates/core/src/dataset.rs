//! Video datasets: tubelets plus ground-truth relations, and their on-disk
//! JSON form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RelationInstance, Span, Tubelet};
use crate::io;

pub const DATASET_SCHEMA: u32 = 1;

/// Ground-truth relation; tracks are referenced by tubelet id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subject_id: usize,
    pub object_id: usize,
    pub predicate: usize,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub video_id: String,
    pub num_frames: usize,
    pub tubelets: Vec<Tubelet>,
    pub relations: Vec<GtRelation>,
}

impl Video {
    pub fn tubelet(&self, id: usize) -> Option<&Tubelet> {
        self.tubelets.iter().find(|t| t.id == id)
    }

    /// GT relations resolved against this video's tubelets.
    pub fn gt_instances(&self) -> Vec<RelationInstance> {
        self.relations
            .iter()
            .map(|r| {
                let s = self.tubelet(r.subject_id).expect("validated subject id");
                let o = self.tubelet(r.object_id).expect("validated object id");
                RelationInstance {
                    subject_cat: s.category,
                    predicate: r.predicate,
                    object_cat: o.category,
                    subject_track: s.clone(),
                    object_track: o.clone(),
                    span: r.span,
                    score: 1.0,
                }
            })
            .collect()
    }

    pub fn validate(&self, num_predicates: usize, num_categories: usize) -> Result<()> {
        for (i, t) in self.tubelets.iter().enumerate() {
            t.validate()?;
            if t.category >= num_categories {
                return Err(Error::data(format!(
                    "{}: tubelet {} has category {} of {num_categories}",
                    self.video_id, t.id, t.category
                )));
            }
            if self.tubelets[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::data(format!("{}: duplicate tubelet id {}", self.video_id, t.id)));
            }
            if t.span().end > self.num_frames {
                return Err(Error::data(format!("{}: tubelet {} exceeds video", self.video_id, t.id)));
            }
        }
        for r in &self.relations {
            let (s, o) = match (self.tubelet(r.subject_id), self.tubelet(r.object_id)) {
                (Some(s), Some(o)) => (s, o),
                _ => {
                    return Err(Error::data(format!(
                        "{}: relation references unknown tubelet",
                        self.video_id
                    )))
                }
            };
            if r.predicate >= num_predicates {
                return Err(Error::data(format!("{}: predicate {} out of range", self.video_id, r.predicate)));
            }
            if r.span.is_empty() || !s.span().contains_span(&r.span) || !o.span().contains_span(&r.span) {
                return Err(Error::data(format!(
                    "{}: relation span {:?} not within both tracks",
                    self.video_id, r.span
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    pub name: String,
    pub split: String,
    pub categories: Vec<String>,
    pub predicates: Vec<String>,
    pub videos: Vec<Video>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA {
            return Err(Error::Schema(format!(
                "dataset schema {} (expected {DATASET_SCHEMA})",
                self.schema_version
            )));
        }
        for v in &self.videos {
            v.validate(self.predicates.len(), self.categories.len())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: Dataset = io::read_json(path)?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn predicate_id(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p == name)
    }
}
