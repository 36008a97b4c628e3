//! Masked class-feature pooling and closed-form feature relevance.

use crate::error::{FsError, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

/// Pooled class feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassVector(Vec<f32>);

impl ClassVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(FsError::shape("empty class vector"));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(FsError::NonFinite("class vector".into()));
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Element-wise mean of several class vectors.
    pub fn mean(vectors: &[ClassVector]) -> Result<ClassVector> {
        let first = vectors
            .first()
            .ok_or_else(|| FsError::Data("mean of no class vectors".into()))?;
        let d = first.dim();
        let mut acc = vec![0.0f64; d];
        for v in vectors {
            if v.dim() != d {
                return Err(FsError::shape(format!("class vector dim {} vs {d}", v.dim())));
            }
            for (a, &x) in acc.iter_mut().zip(&v.0) {
                *a += x as f64;
            }
        }
        let n = vectors.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        ClassVector::from_f64(&acc)
    }
}

/// Unit-norm per-channel relevance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceVector(Vec<f32>);

impl RelevanceVector {
    /// All entries `1/sqrt(d)`; reduces the weighted cosine to the plain one.
    pub fn uniform(d: usize) -> Self {
        assert!(d > 0);
        Self(vec![(1.0 / (d as f64).sqrt()) as f32; d])
    }

    /// Normalizes `values`; fails on a (near) zero vector.
    pub fn from_unnormalized(values: &[f64]) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(FsError::Data(format!("cannot normalize vector with norm {norm}")));
        }
        Ok(Self(values.iter().map(|&v| (v / norm) as f32).collect()))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Below this norm the difference vector is treated as zero.
pub const RELEVANCE_ZERO_NORM: f64 = 1e-8;

fn check_mask(features: &Tensor, mask: &BinaryMask) -> Result<(usize, usize)> {
    let (d, h, w) = features.chw()?;
    if mask.dims() != (h, w) {
        return Err(FsError::shape(format!(
            "mask {:?} does not match feature grid {h}x{w}",
            mask.dims()
        )));
    }
    Ok((d, h * w))
}

/// Per-channel sums over foreground and background cells, plus counts.
fn split_sums(features: &Tensor, mask: &BinaryMask) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    let (d, hw) = check_mask(features, mask)?;
    let m = mask.data();
    let data = features.data();
    let mut fg = vec![0.0f64; d];
    let mut bg = vec![0.0f64; d];
    for c in 0..d {
        let plane = &data[c * hw..(c + 1) * hw];
        for (&v, &b) in plane.iter().zip(m) {
            if b == 1 {
                fg[c] += v as f64;
            } else {
                bg[c] += v as f64;
            }
        }
    }
    let n_fg = mask.foreground_count();
    Ok((fg, bg, n_fg, hw - n_fg))
}

/// Mean feature column over the foreground cells of `mask`.
pub fn masked_pool(features: &Tensor, mask: &BinaryMask) -> Result<ClassVector> {
    let (fg, _, n_fg, _) = split_sums(features, mask)?;
    if n_fg == 0 {
        return Err(FsError::EmptyMask);
    }
    let n = n_fg as f64;
    ClassVector::from_f64(&fg.iter().map(|s| s / n).collect::<Vec<_>>())
}

fn difference_inner(features: &Tensor, mask: &BinaryMask, support: Option<usize>) -> Result<Vec<f64>> {
    let (fg, bg, n_fg, n_bg) = split_sums(features, mask)?;
    if n_fg == 0 || n_bg == 0 {
        return Err(FsError::DegenerateMask { support });
    }
    let (nf, nb) = (n_fg as f64, n_bg as f64);
    Ok(fg.iter().zip(&bg).map(|(f, b)| f / nf - b / nb).collect())
}

/// Foreground mean minus background mean, per channel.
pub fn feature_difference(features: &Tensor, mask: &BinaryMask) -> Result<Vec<f64>> {
    difference_inner(features, mask, None)
}

/// Sum of per-support foreground-minus-background differences.
pub fn feature_difference_kshot(supports: &[(Tensor, BinaryMask)]) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for (k, (features, mask)) in supports.iter().enumerate() {
        let phi = difference_inner(features, mask, Some(k))?;
        match acc.as_mut() {
            None => acc = Some(phi),
            Some(a) => {
                if a.len() != phi.len() {
                    return Err(FsError::shape(format!(
                        "support {k} has feature dim {}, expected {}",
                        phi.len(),
                        a.len()
                    )));
                }
                a.iter_mut().zip(&phi).for_each(|(x, y)| *x += y);
            }
        }
    }
    acc.ok_or_else(|| FsError::Data("no supports".into()))
}

/// Maximizer of `phi . r` over the unit sphere: `phi / |phi|`.
///
/// A (near) zero `phi` has no unique maximizer; the uniform vector is
/// returned instead.
pub fn relevance(phi: &[f64]) -> Result<RelevanceVector> {
    if phi.is_empty() {
        return Err(FsError::shape("empty difference vector"));
    }
    if !phi.iter().all(|v| v.is_finite()) {
        return Err(FsError::NonFinite("difference vector".into()));
    }
    let norm = phi.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < RELEVANCE_ZERO_NORM {
        return Ok(RelevanceVector::uniform(phi.len()));
    }
    RelevanceVector::from_unnormalized(phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn grid_2x2() -> Tensor {
        Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn pool_diagonal() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(masked_pool(&grid_2x2(), &m).unwrap().values(), &[2.5]);
    }

    #[test]
    fn pool_all_ones_is_mean() {
        let mut rng = Rng::new(3);
        let f = Tensor::randn(vec![3, 4, 5], 1.0, &mut rng);
        let p = masked_pool(&f, &BinaryMask::ones(4, 5)).unwrap();
        for c in 0..3 {
            let mean: f64 = f.data()[c * 20..(c + 1) * 20].iter().map(|&v| v as f64).sum::<f64>() / 20.0;
            assert!((p.values()[c] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_singleton_is_column() {
        let mut rng = Rng::new(4);
        let f = Tensor::randn(vec![4, 3, 3], 1.0, &mut rng);
        let m = BinaryMask::from_fn(3, 3, |y, x| (y, x) == (1, 2));
        let p = masked_pool(&f, &m).unwrap();
        for c in 0..4 {
            assert_eq!(p.values()[c], f.get(&[c, 1, 2]));
        }
    }

    #[test]
    fn pool_errors() {
        assert!(matches!(
            masked_pool(&grid_2x2(), &BinaryMask::zeros(2, 2)),
            Err(FsError::EmptyMask)
        ));
        assert!(matches!(
            masked_pool(&grid_2x2(), &BinaryMask::ones(2, 3)),
            Err(FsError::Shape(_))
        ));
    }

    #[test]
    fn difference_single_cell() {
        let m = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(feature_difference(&grid_2x2(), &m).unwrap(), vec![-2.0]);
    }

    #[test]
    fn difference_of_constant_field_is_zero() {
        let f = Tensor::full(vec![3, 4, 4], 1.5);
        let m = BinaryMask::from_fn(4, 4, |y, x| (y + x) % 2 == 0);
        assert!(feature_difference(&f, &m).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn difference_rejects_degenerate_masks() {
        for m in [BinaryMask::ones(2, 2), BinaryMask::zeros(2, 2)] {
            assert!(matches!(
                feature_difference(&grid_2x2(), &m),
                Err(FsError::DegenerateMask { support: None })
            ));
        }
        let good = (grid_2x2(), BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap());
        let bad = (grid_2x2(), BinaryMask::ones(2, 2));
        assert!(matches!(
            feature_difference_kshot(&[good, bad]),
            Err(FsError::DegenerateMask { support: Some(1) })
        ));
    }

    #[test]
    fn difference_is_pool_gap() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let f = Tensor::randn(vec![4, 6, 5], 1.0, &mut rng);
            let m = BinaryMask::from_fn(6, 5, |_, _| rng.uniform() < 0.4);
            if m.foreground_count() == 0 || m.background_count() == 0 {
                continue;
            }
            let phi = feature_difference(&f, &m).unwrap();
            let fg = masked_pool(&f, &m).unwrap();
            let bg = masked_pool(&f, &m.invert()).unwrap();
            for c in 0..4 {
                let gap = fg.values()[c] as f64 - bg.values()[c] as f64;
                assert!((phi[c] - gap).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn kshot_reductions() {
        let mut rng = Rng::new(9);
        let f = Tensor::randn(vec![5, 4, 4], 1.0, &mut rng);
        let m = BinaryMask::from_fn(4, 4, |y, _| y < 2);
        let one = feature_difference(&f, &m).unwrap();
        assert_eq!(feature_difference_kshot(&[(f.clone(), m.clone())]).unwrap(), one);
        let three = feature_difference_kshot(&vec![(f, m); 3]).unwrap();
        for (a, b) in three.iter().zip(&one) {
            assert!((a - 3.0 * b).abs() < 1e-12);
        }
        let r1 = relevance(&one).unwrap();
        let r3 = relevance(&three).unwrap();
        for (a, b) in r1.values().iter().zip(r3.values()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn relevance_examples() {
        assert_eq!(relevance(&[3.0, 4.0]).unwrap().values(), &[0.6, 0.8]);
        let u = relevance(&[0.0; 4]).unwrap();
        assert_eq!(u, RelevanceVector::uniform(4));
        assert_eq!(u.values()[0], 0.5);
        assert!(relevance(&[f64::NAN]).is_err());
    }

    #[test]
    fn relevance_beats_random_directions() {
        let mut rng = Rng::new(21);
        let phi: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let r = relevance(&phi).unwrap().to_f64();
        let best: f64 = phi.iter().zip(&r).map(|(a, b)| a * b).sum();
        for _ in 0..10_000 {
            let u: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let val: f64 = phi.iter().zip(&u).map(|(a, b)| a * b / n).sum();
            assert!(best >= val);
        }
    }

    proptest! {
        #[test]
        fn relevance_is_unit_and_scale_invariant(
            phi in proptest::collection::vec(-10.0f64..10.0, 1..32),
            c in 0.01f64..100.0,
        ) {
            let r = relevance(&phi).unwrap();
            let n: f64 = r.to_f64().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
            let scaled: Vec<f64> = phi.iter().map(|v| v * c).collect();
            let rs = relevance(&scaled).unwrap();
            for (a, b) in r.values().iter().zip(rs.values()) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
