//! Intersection-over-union scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FsError, Result};
use crate::mask::BinaryMask;

/// Pixel counts for one prediction against its ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn of(pred: &BinaryMask, gt: &BinaryMask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(FsError::shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn union(&self) -> u64 {
        self.tp + self.fp + self.fn_
    }

    /// IoU of this single prediction; 1 when both masks are empty.
    pub fn iou(&self) -> f64 {
        if self.union() == 0 {
            1.0
        } else {
            self.tp as f64 / self.union() as f64
        }
    }
}

/// `|pred & gt| / |pred | gt|`; two empty masks score 1.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    Ok(Confusion::of(pred, gt)?.iou())
}

/// Counts pooled over every test episode of one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub episodes: u64,
    /// Sum of per-episode IoUs, for the per-episode-mean variant.
    pub episode_iou_sum: f64,
}

impl ClassScore {
    pub fn new(class_id: u32) -> Self {
        Self {
            class_id,
            ..Default::default()
        }
    }

    pub fn add(&mut self, pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
        let c = Confusion::of(pred, gt)?;
        let episode_iou = c.iou();
        self.add_counts(c, episode_iou);
        Ok(episode_iou)
    }

    pub fn add_counts(&mut self, c: Confusion, episode_iou: f64) {
        self.tp += c.tp;
        self.fp += c.fp;
        self.fn_ += c.fn_;
        self.episodes += 1;
        self.episode_iou_sum += episode_iou;
    }

    pub fn merge(&mut self, other: &ClassScore) {
        debug_assert_eq!(self.class_id, other.class_id);
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.episodes += other.episodes;
        self.episode_iou_sum += other.episode_iou_sum;
    }

    /// False when no pixel was ever predicted or labeled foreground.
    pub fn is_defined(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    /// `TP / (TP + FP + FN)`, or 0 when undefined (see [`is_defined`](Self::is_defined)).
    pub fn iou(&self) -> f64 {
        if self.is_defined() {
            self.tp as f64 / (self.tp + self.fp + self.fn_) as f64
        } else {
            0.0
        }
    }

    pub fn mean_episode_iou(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.episode_iou_sum / self.episodes as f64
        }
    }
}

/// Per-class tallies keyed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassTally {
    scores: BTreeMap<u32, ClassScore>,
}

impl ClassTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: u32, pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
        self.scores
            .entry(class_id)
            .or_insert_with(|| ClassScore::new(class_id))
            .add(pred, gt)
    }

    pub fn add_counts(&mut self, class_id: u32, c: Confusion, episode_iou: f64) {
        self.scores
            .entry(class_id)
            .or_insert_with(|| ClassScore::new(class_id))
            .add_counts(c, episode_iou);
    }

    pub fn merge(&mut self, other: &ClassTally) {
        for (id, s) in &other.scores {
            self.scores
                .entry(*id)
                .or_insert_with(|| ClassScore::new(*id))
                .merge(s);
        }
    }

    pub fn scores(&self) -> Vec<ClassScore> {
        self.scores.values().cloned().collect()
    }

    pub fn miou(&self) -> Result<f64> {
        miou(&self.scores())
    }
}

/// Unweighted mean of per-class IoUs.
pub fn miou(per_class: &[ClassScore]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(FsError::Data("mIoU of no classes".into()));
    }
    Ok(per_class.iter().map(ClassScore::iou).sum::<f64>() / per_class.len() as f64)
}

/// Mean over folds.
pub fn crossval_report(per_fold_miou: &[f64]) -> Result<f64> {
    if per_fold_miou.is_empty() {
        return Err(FsError::Data("cross-validation report of no folds".into()));
    }
    Ok(per_fold_miou.iter().sum::<f64>() / per_fold_miou.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn m(data: &[u8]) -> BinaryMask {
        BinaryMask::new(2, 2, data.to_vec()).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&m(&[1, 0, 1, 0]), &m(&[1, 0, 1, 0])).unwrap(), 1.0);
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[1, 0, 0, 0])).unwrap(), 0.5);
        assert_eq!(iou(&m(&[1, 1, 0, 0]), &m(&[0, 0, 1, 0])).unwrap(), 0.0);
        assert_eq!(iou(&m(&[0; 4]), &m(&[0; 4])).unwrap(), 1.0);
        assert_eq!(iou(&m(&[0; 4]), &m(&[0, 1, 0, 0])).unwrap(), 0.0);
        assert!(iou(&m(&[0; 4]), &BinaryMask::zeros(1, 4)).is_err());
    }

    #[test]
    fn miou_examples() {
        let a = ClassScore { class_id: 0, tp: 1, fp: 2, fn_: 2, episodes: 1, episode_iou_sum: 0.2 };
        let b = ClassScore { class_id: 1, tp: 3, fp: 1, fn_: 1, episodes: 1, episode_iou_sum: 0.6 };
        assert!((miou(std::slice::from_ref(&a)).unwrap() - 0.2).abs() < 1e-12);
        assert!((miou(&[a, b]).unwrap() - 0.4).abs() < 1e-12);
        assert!(miou(&[]).is_err());
        assert!(!ClassScore::new(3).is_defined());
        assert_eq!(ClassScore::new(3).iou(), 0.0);
    }

    #[test]
    fn crossval_examples() {
        assert!((crossval_report(&[0.4, 0.6]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(crossval_report(&[0.37]).unwrap(), 0.37);
        assert!(crossval_report(&[]).is_err());
    }

    #[test]
    fn random_tally_matches_recount() {
        let mut rng = Rng::new(12);
        let mut tally = ClassTally::new();
        let mut episodes = Vec::new();
        for _ in 0..60 {
            let class = rng.below(5) as u32;
            let p = BinaryMask::from_fn(4, 4, |_, _| rng.uniform() < 0.4);
            let g = BinaryMask::from_fn(4, 4, |_, _| rng.uniform() < 0.4);
            tally.add(class, &p, &g).unwrap();
            episodes.push((class, p, g));
        }
        // recount from scratch, cell by cell
        let mut per_class = Vec::new();
        for class in 0..5u32 {
            let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
            for (c, p, g) in &episodes {
                if *c != class {
                    continue;
                }
                for i in 0..16 {
                    match (p.data()[i], g.data()[i]) {
                        (1, 1) => tp += 1.0,
                        (1, 0) => fp += 1.0,
                        (0, 1) => fneg += 1.0,
                        _ => {}
                    }
                }
            }
            per_class.push(tp / (tp + fp + fneg));
        }
        let want = per_class.iter().sum::<f64>() / 5.0;
        assert!((tally.miou().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn merge_is_order_independent() {
        let mut rng = Rng::new(13);
        let items: Vec<_> = (0..20)
            .map(|_| {
                (
                    rng.below(3) as u32,
                    BinaryMask::from_fn(3, 3, |_, _| rng.uniform() < 0.5),
                    BinaryMask::from_fn(3, 3, |_, _| rng.uniform() < 0.5),
                )
            })
            .collect();
        let mut fwd = ClassTally::new();
        for (c, p, g) in &items {
            fwd.add(*c, p, g).unwrap();
        }
        let mut halves = (ClassTally::new(), ClassTally::new());
        for (i, (c, p, g)) in items.iter().rev().enumerate() {
            let t = if i % 2 == 0 { &mut halves.0 } else { &mut halves.1 };
            t.add(*c, p, g).unwrap();
        }
        halves.1.merge(&halves.0);
        for (a, b) in fwd.scores().iter().zip(halves.1.scores()) {
            assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
        }
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 12), b in proptest::collection::vec(0u8..2, 12)) {
            let (pa, pb) = (BinaryMask::new(3, 4, a).unwrap(), BinaryMask::new(3, 4, b).unwrap());
            let x = iou(&pa, &pb).unwrap();
            prop_assert_eq!(x, iou(&pb, &pa).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            if !pa.is_empty() {
                prop_assert_eq!(x == 1.0, pa == pb);
            }
        }
    }
}
