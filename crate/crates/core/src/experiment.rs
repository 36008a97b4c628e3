//! Episodic evaluation with ablation switches.
//!
//! Episode `i` of fold `f` is always drawn from the seed
//! `derive_seed([base, f, i])`, so different variants and ensemble sizes are
//! compared on the same episodes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boosting::{build_ensemble, fuse, kshot_average_baseline, trace, BoostConfig, Expert, ExpertTrace};
use crate::embedding::{feature_difference_kshot, masked_pool, relevance, ClassVector, RelevanceVector};
use crate::episode::{ClassIndex, Episode, FoldSplit, LabeledExample, Phase};
use crate::error::{FsError, Result};
use crate::head::{predict, HeadParams};
use crate::mask::BinaryMask;
use crate::metrics::{ClassTally, Confusion};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KShotMode {
    /// One prediction per support, averaged.
    Average,
    /// One class vector and relevance vector from all supports jointly.
    #[default]
    Joint,
}

impl std::str::FromStr for KShotMode {
    type Err = FsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "average" => Ok(KShotMode::Average),
            "joint" => Ok(KShotMode::Joint),
            other => Err(FsError::Data(format!("unknown k-shot mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for KShotMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KShotMode::Average => "average",
            KShotMode::Joint => "joint",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub use_relevance: bool,
    pub use_boosting: bool,
    pub kshot_mode: KShotMode,
}

impl Ablation {
    pub const B: Ablation = Ablation::new(false, false);
    pub const B_C1: Ablation = Ablation::new(true, false);
    pub const B_C2: Ablation = Ablation::new(false, true);
    pub const B_C1_C2: Ablation = Ablation::new(true, true);

    pub const fn new(use_relevance: bool, use_boosting: bool) -> Self {
        Self {
            use_relevance,
            use_boosting,
            kshot_mode: KShotMode::Joint,
        }
    }

    pub const fn with_mode(mut self, mode: KShotMode) -> Self {
        self.kshot_mode = mode;
        self
    }

    fn one_shot_name(&self) -> &'static str {
        match (self.use_relevance, self.use_boosting) {
            (false, false) => "B",
            (true, false) => "B+C1",
            (false, true) => "B+C2",
            (true, true) => "B+C1+C2",
        }
    }

    /// Name of the variant these flags select for `k` supports.
    ///
    /// With one support both k-shot modes reduce to the one-shot pipeline.
    pub fn variant_name(&self, k: usize) -> String {
        let base = self.one_shot_name();
        match (k, self.kshot_mode, self.use_relevance && self.use_boosting) {
            (1, _, _) => base.to_string(),
            (_, KShotMode::Average, true) => "Average".to_string(),
            (_, KShotMode::Joint, true) => "Our-K-shot".to_string(),
            (_, mode, false) => format!("{base} ({mode})"),
        }
    }
}

/// Help text mapping flag combinations onto variant names.
pub const ABLATION_TABLE: &str = "\
variant      --use-relevance  --use-boosting  --kshot-mode
B            false            false           (k = 1)
B+C1         true             false           (k = 1)
B+C2         false            true            (k = 1)
B+C1+C2      true             true            (k = 1)
Average      true             true            average (k > 1)
Our-K-shot   true             true            joint   (k > 1)";

pub fn episode_seed(base: u64, fold: usize, index: usize) -> u64 {
    derive_seed(&[base, fold as u64, index as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub episodes: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub boost: BoostConfig,
    /// Keep per-episode expert traces.
    pub record_traces: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            episodes: 200,
            seed: 0,
            ablation: Ablation::B_C1_C2,
            boost: BoostConfig::default(),
            record_traces: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(FsError::Data("k must be at least 1".into()));
        }
        if self.episodes == 0 {
            return Err(FsError::Data("episodes must be at least 1".into()));
        }
        self.boost.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePrediction {
    pub binary: BinaryMask,
    pub foreground_probs: Vec<f32>,
    /// Empty without boosting.
    pub experts: Vec<Expert>,
}

fn relevance_for(supports: &[(Tensor, BinaryMask)], use_relevance: bool) -> Result<RelevanceVector> {
    if use_relevance {
        relevance(&feature_difference_kshot(supports)?)
    } else {
        Ok(RelevanceVector::uniform(supports[0].0.chw()?.0))
    }
}

/// Predictions for each ensemble size in `sizes`. Without boosting the
/// sizes are ignored and every entry is the same plain prediction.
pub fn predict_episode_sweep(
    params: &HeadParams,
    supports: &[(Tensor, BinaryMask)],
    query: &Tensor,
    ablation: &Ablation,
    boost: &BoostConfig,
    sizes: &[usize],
) -> Result<Vec<EpisodePrediction>> {
    if supports.is_empty() {
        return Err(FsError::Data("at least one support is required".into()));
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(FsError::Data(format!("invalid ensemble sizes {sizes:?}")));
    }
    if supports.len() > 1 && ablation.kshot_mode == KShotMode::Average {
        return sizes
            .iter()
            .map(|&n| {
                let cfg = BoostConfig {
                    num_experts: n,
                    ..boost.clone()
                };
                let res = kshot_average_baseline(
                    params,
                    supports,
                    query,
                    ablation.use_relevance,
                    ablation.use_boosting.then_some(&cfg),
                )?;
                Ok(EpisodePrediction {
                    foreground_probs: res.foreground_probs().to_vec(),
                    binary: res.fused_binary,
                    experts: if ablation.use_boosting { res.experts } else { Vec::new() },
                })
            })
            .collect();
    }

    let r = relevance_for(supports, ablation.use_relevance)?;
    if !ablation.use_boosting {
        let pooled = supports
            .iter()
            .map(|(f, m)| masked_pool(f, m))
            .collect::<Result<Vec<_>>>()?;
        let pred = predict(&params.weights(), &ClassVector::mean(&pooled)?, query, &r)?;
        let one = EpisodePrediction {
            foreground_probs: pred.foreground_probs().to_vec(),
            binary: pred.binary,
            experts: Vec::new(),
        };
        return Ok(vec![one; sizes.len()]);
    }
    // iterates do not depend on how many follow, so smaller ensembles are
    // prefixes of the largest one
    let largest = *sizes.iter().max().expect("non-empty");
    let cfg = BoostConfig {
        num_experts: largest,
        ..boost.clone()
    };
    let experts = build_ensemble(params, supports, &r, &cfg)?;
    sizes
        .iter()
        .map(|&n| {
            let res = fuse(&experts[..n.min(experts.len())], query, &r, params)?;
            Ok(EpisodePrediction {
                foreground_probs: res.foreground_probs().to_vec(),
                binary: res.fused_binary,
                experts: res.experts,
            })
        })
        .collect()
}

pub fn predict_episode(
    params: &HeadParams,
    supports: &[(Tensor, BinaryMask)],
    query: &Tensor,
    ablation: &Ablation,
    boost: &BoostConfig,
) -> Result<EpisodePrediction> {
    let mut v = predict_episode_sweep(params, supports, query, ablation, boost, &[boost.num_experts])?;
    Ok(v.pop().expect("one size"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub seed: u64,
    pub class_id: u32,
    pub confusion: Confusion,
    pub iou: f64,
    pub trace: Option<Vec<ExpertTrace>>,
}

#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold: usize,
    pub outcomes: Vec<EpisodeOutcome>,
    pub tally: ClassTally,
}

impl FoldReport {
    fn from_outcomes(fold: usize, outcomes: Vec<EpisodeOutcome>) -> Self {
        let mut tally = ClassTally::new();
        for o in &outcomes {
            tally.add_counts(o.class_id, o.confusion, o.iou);
        }
        Self { fold, outcomes, tally }
    }

    pub fn miou(&self) -> f64 {
        self.tally.miou().expect("a fold report has at least one episode")
    }

    pub fn episode_ious(&self) -> Vec<f64> {
        self.outcomes.iter().map(|o| o.iou).collect()
    }
}

/// The `index`-th test episode of a fold.
pub fn fold_episode(
    dataset: &[LabeledExample],
    index: &ClassIndex,
    split: &FoldSplit,
    k: usize,
    seed: u64,
    episode: usize,
) -> Result<Episode> {
    let mut rng = Rng::new(episode_seed(seed, split.fold, episode));
    let (supports, query) = index.sample(split, k, Phase::Test, &mut rng)?;
    Ok(Episode {
        supports: supports.into_iter().map(|i| dataset[i].clone()).collect(),
        query: dataset[query].clone(),
    })
}

/// Evaluates the fold once per ensemble size in `sizes`, on one shared set
/// of episodes. Reports come back in the order of `sizes`.
pub fn sweep_fold(
    dataset: &[LabeledExample],
    split: &FoldSplit,
    params: &HeadParams,
    config: &EvalConfig,
    sizes: &[usize],
) -> Result<Vec<FoldReport>> {
    config.validate()?;
    split.validate()?;
    let index = ClassIndex::new(dataset);
    let per_episode: Vec<Vec<EpisodeOutcome>> = (0..config.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = fold_episode(dataset, &index, split, config.k, config.seed, i)?;
            let gt = ep.query.feature_mask();
            let preds = predict_episode_sweep(
                params,
                &ep.support_pairs(),
                &ep.query.features,
                &config.ablation,
                &config.boost,
                sizes,
            )?;
            preds
                .into_iter()
                .map(|p| {
                    let confusion = Confusion::of(&p.binary, &gt)?;
                    Ok(EpisodeOutcome {
                        index: i,
                        seed: episode_seed(config.seed, split.fold, i),
                        class_id: ep.class_id(),
                        iou: confusion.iou(),
                        confusion,
                        trace: (config.record_traces && !p.experts.is_empty()).then(|| trace(&p.experts)),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut by_size: Vec<Vec<EpisodeOutcome>> = vec![Vec::with_capacity(config.episodes); sizes.len()];
    for outcomes in per_episode {
        for (slot, o) in by_size.iter_mut().zip(outcomes) {
            slot.push(o);
        }
    }
    Ok(by_size
        .into_iter()
        .map(|o| FoldReport::from_outcomes(split.fold, o))
        .collect())
}

pub fn evaluate_fold(
    dataset: &[LabeledExample],
    split: &FoldSplit,
    params: &HeadParams,
    config: &EvalConfig,
) -> Result<FoldReport> {
    let mut v = sweep_fold(dataset, split, params, config, &[config.boost.num_experts])?;
    Ok(v.pop().expect("one size"))
}
