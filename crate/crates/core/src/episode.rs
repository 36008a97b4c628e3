//! Labeled examples, fold splits and episode sampling.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{FsError, Result};
use crate::mask::BinaryMask;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image's backbone features and its ground-truth mask.
///
/// The mask lives at the original resolution; the stride to the feature grid
/// is whatever `mask / features` works out to, as long as it is an integer
/// and equal along both axes.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub class_id: u32,
    pub features: Tensor,
    pub mask: BinaryMask,
}

impl LabeledExample {
    pub fn new(class_id: u32, features: Tensor, mask: BinaryMask) -> Result<Self> {
        let (_, h, w) = features.chw()?;
        let (mh, mw) = mask.dims();
        if mh < h || mw < w || mh % h != 0 || mw % w != 0 || mh / h != mw / w {
            return Err(FsError::shape(format!(
                "mask {mh}x{mw} is not an integer-stride upsampling of features {h}x{w}"
            )));
        }
        Ok(Self {
            class_id,
            features,
            mask,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn stride(&self) -> usize {
        self.mask.height() / self.features.shape()[1]
    }

    /// Ground truth at feature resolution.
    pub fn feature_mask(&self) -> BinaryMask {
        let (_, h, w) = self.features.chw().expect("rank-3 features");
        self.mask
            .downsample(h, w)
            .expect("stride validated at construction")
    }
}

/// Checks that every example in a dataset shares one feature dimension.
pub fn validate_dataset(dataset: &[LabeledExample]) -> Result<usize> {
    let d = dataset
        .first()
        .ok_or_else(|| FsError::Data("empty dataset".into()))?
        .feature_dim();
    if let Some((i, e)) = dataset
        .iter()
        .enumerate()
        .find(|(_, e)| e.feature_dim() != d)
    {
        return Err(FsError::Data(format!(
            "example {i} has feature dim {}, expected {d}",
            e.feature_dim()
        )));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<LabeledExample>,
    pub query: LabeledExample,
}

impl Episode {
    pub fn class_id(&self) -> u32 {
        self.query.class_id
    }

    pub fn k(&self) -> usize {
        self.supports.len()
    }

    /// Support features paired with their feature-resolution masks.
    pub fn support_pairs(&self) -> Vec<(Tensor, BinaryMask)> {
        self.supports
            .iter()
            .map(|s| (s.features.clone(), s.feature_mask()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub test_classes: BTreeSet<u32>,
    pub train_classes: BTreeSet<u32>,
}

impl FoldSplit {
    pub fn new(
        fold: usize,
        test_classes: impl IntoIterator<Item = u32>,
        train_classes: impl IntoIterator<Item = u32>,
    ) -> Result<Self> {
        let split = Self {
            fold,
            test_classes: test_classes.into_iter().collect(),
            train_classes: train_classes.into_iter().collect(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.test_classes.intersection(&self.train_classes).next() {
            return Err(FsError::Data(format!(
                "fold {}: class {c} is both a train and a test class",
                self.fold
            )));
        }
        Ok(())
    }

    /// Contiguous-block cross-validation: fold `f` tests on classes
    /// `[f * n / folds, (f + 1) * n / folds)` and trains on the rest.
    pub fn cross_validation(num_classes: u32, num_folds: usize) -> Result<Vec<FoldSplit>> {
        if num_folds == 0 || num_classes < num_folds as u32 {
            return Err(FsError::Data(format!(
                "cannot split {num_classes} classes into {num_folds} folds"
            )));
        }
        (0..num_folds)
            .map(|f| {
                let lo = (f as u32 * num_classes) / num_folds as u32;
                let hi = ((f as u32 + 1) * num_classes) / num_folds as u32;
                FoldSplit::new(f, lo..hi, (0..num_classes).filter(|c| *c < lo || *c >= hi))
            })
            .collect()
    }

    pub fn classes(&self, phase: Phase) -> &BTreeSet<u32> {
        match phase {
            Phase::Train => &self.train_classes,
            Phase::Test => &self.test_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

/// Per-class example indices, built once per dataset.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl ClassIndex {
    pub fn new(dataset: &[LabeledExample]) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, e) in dataset.iter().enumerate() {
            by_class.entry(e.class_id).or_default().push(i);
        }
        Self { by_class }
    }

    pub fn examples_of(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn eligible(&self, classes: &BTreeSet<u32>, k: usize) -> Vec<u32> {
        classes
            .iter()
            .copied()
            .filter(|c| self.examples_of(*c).len() > k)
            .collect()
    }

    /// Example indices `(supports, query)` for one episode.
    pub fn sample(
        &self,
        split: &FoldSplit,
        k: usize,
        phase: Phase,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, usize)> {
        if k == 0 {
            return Err(FsError::Data("episodes need k >= 1 supports".into()));
        }
        let eligible = self.eligible(split.classes(phase), k);
        if eligible.is_empty() {
            return Err(FsError::Data(format!(
                "fold {}: no {phase:?} class has at least {} examples",
                split.fold,
                k + 1
            )));
        }
        let class = eligible[rng.below(eligible.len())];
        let pool = self.examples_of(class);
        let picks = rng.choose_distinct(pool.len(), k + 1);
        let query = pool[picks[k]];
        let supports = picks[..k].iter().map(|&p| pool[p]).collect();
        Ok((supports, query))
    }
}

/// Draws one episode: a uniformly chosen eligible class of the phase, then
/// `k + 1` distinct examples of it in random support/query roles.
pub fn sample_episode(
    dataset: &[LabeledExample],
    split: &FoldSplit,
    k: usize,
    phase: Phase,
    rng: &mut Rng,
) -> Result<Episode> {
    let index = ClassIndex::new(dataset);
    let (supports, query) = index.sample(split, k, phase, rng)?;
    Ok(Episode {
        supports: supports.into_iter().map(|i| dataset[i].clone()).collect(),
        query: dataset[query].clone(),
    })
}
