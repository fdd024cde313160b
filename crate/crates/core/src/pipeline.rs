//! End-to-end runs: train both stages, propose, detect and evaluate, plus
//! the ablation sweeps built on top.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::encoding::Variant;
use crate::error::{Error, Result};
use crate::eval::{evaluate, video_results, MetricReport};
use crate::features::ExternalStore;
use crate::model::PairModel;
use crate::numcore::RngState;
use crate::stage1::{propose_dataset, train_stage1, InteractionProposal};
use crate::stage2::{detect_dataset, train_stage2, PredicateModel, ScoredTriplet};

/// RNG streams derived from the run seed.
pub mod streams {
    pub const STAGE1_INIT: u64 = 1;
    pub const STAGE1_TRAIN: u64 = 2;
    pub const STAGE2_INIT: u64 = 3;
    pub const STAGE2_TRAIN: u64 = 4;
}

pub fn check_compatible(train: &Dataset, test: &Dataset) -> Result<()> {
    if train.predicates != test.predicates || train.categories != test.categories {
        return Err(Error::data(format!(
            "{}/{} and {}/{} use different label sets",
            train.name, train.split, test.name, test.split
        )));
    }
    Ok(())
}

pub fn init_stage1(train: &Dataset, cfg: &RunConfig) -> Result<PairModel> {
    let features = cfg.model.features(train.categories.len())?;
    let mut rng = RngState::new(cfg.seed).derive(streams::STAGE1_INIT);
    PairModel::new(features, cfg.model.embed_dim, cfg.model.primitives, 1, cfg.model.variant, &mut rng)
}

pub fn run_stage1(train: &Dataset, cfg: &RunConfig, externals: &ExternalStore) -> Result<PairModel> {
    let mut model = init_stage1(train, cfg)?;
    let mut rng = RngState::new(cfg.seed).derive(streams::STAGE1_TRAIN);
    train_stage1(train, &mut model, &cfg.stage1, externals, &mut rng)?;
    Ok(model)
}

pub fn run_stage2(
    train: &Dataset,
    proposals: &[InteractionProposal],
    stage1: &PairModel,
    cfg: &RunConfig,
    externals: &ExternalStore,
) -> Result<PredicateModel> {
    let mut init = RngState::new(cfg.seed).derive(streams::STAGE2_INIT);
    let mut model = PredicateModel::from_stage1(stage1, train.predicates.len(), cfg.stage2.n_sample, &mut init)?;
    let mut rng = RngState::new(cfg.seed).derive(streams::STAGE2_TRAIN);
    train_stage2(train, proposals, &mut model, &cfg.stage2, externals, &mut rng)?;
    Ok(model)
}

pub fn detect_and_evaluate(
    test: &Dataset,
    stage1: &PairModel,
    stage2: &PredicateModel,
    cfg: &RunConfig,
    externals: &ExternalStore,
) -> Result<(Vec<InteractionProposal>, Vec<ScoredTriplet>, MetricReport)> {
    let proposals = propose_dataset(test, stage1, &cfg.stage1, externals)?;
    let detections = detect_dataset(test, &proposals, stage2, cfg.stage2.top_p, externals)?;
    let report = evaluate(&video_results(test, &detections)?, &cfg.eval);
    Ok((proposals, detections, report))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub stage1: PairModel,
    pub stage2: PredicateModel,
    pub train_proposals: Vec<InteractionProposal>,
    pub test_proposals: Vec<InteractionProposal>,
    pub detections: Vec<ScoredTriplet>,
    pub report: MetricReport,
}

/// Stage 1 on `train`, proposals on `train` for stage 2, then detection
/// and evaluation on `test`.
pub fn run_pipeline(train: &Dataset, test: &Dataset, cfg: &RunConfig, externals: &ExternalStore) -> Result<PipelineOutput> {
    cfg.validate()?;
    check_compatible(train, test)?;
    let stage1 = run_stage1(train, cfg, externals)?;
    let train_proposals = propose_dataset(train, &stage1, &cfg.stage1, externals)?;
    let stage2 = run_stage2(train, &train_proposals, &stage1, cfg, externals)?;
    let (test_proposals, detections, report) = detect_and_evaluate(test, &stage1, &stage2, cfg, externals)?;
    Ok(PipelineOutput {
        stage1,
        stage2,
        train_proposals,
        test_proposals,
        detections,
        report,
    })
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub primitives: usize,
    pub report: MetricReport,
}

pub const ABLATION_K: [usize; 5] = [1, 8, 32, 64, 128];

pub fn ablate_k(train: &Dataset, test: &Dataset, cfg: &RunConfig, ks: &[usize]) -> Result<Vec<AblationRow>> {
    ks.iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.model.primitives = k;
            let out = run_pipeline(train, test, &c, &ExternalStore::new())?;
            Ok(AblationRow {
                variant: c.model.variant,
                primitives: k,
                report: out.report,
            })
        })
        .collect()
}

/// Runs every encoding variant; avgpool uses a single primitive since its
/// encoding ignores the codebook.
pub fn ablate_variant(train: &Dataset, test: &Dataset, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.model.variant = v;
            if v == Variant::AvgPool {
                c.model.primitives = 1;
            }
            let out = run_pipeline(train, test, &c, &ExternalStore::new())?;
            Ok(AblationRow {
                variant: v,
                primitives: c.model.primitives,
                report: out.report,
            })
        })
        .collect()
}

/// Aligned table of ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "variant", "K", "P@1", "P@5", "P@10", "mAP", "R@50", "R@100"
    );
    for r in rows {
        let p = |k| r.report.p_at.get(&k).copied().unwrap_or(0.0);
        let rc = |n| r.report.recall_at.get(&n).copied().unwrap_or(0.0);
        out.push_str(&format!(
            "{:<10} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            r.variant.name(),
            r.primitives,
            p(1),
            p(5),
            p(10),
            r.report.map,
            rc(50),
            rc(100)
        ));
    }
    out
}
