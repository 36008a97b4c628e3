//! Cosine similarity maps between a class vector and a feature map.
//!
//! The relevance-weighted form multiplies both the class vector and every
//! feature column by `r` before taking the cosine. This is a cosine under the
//! diagonal metric `diag(r^2)`, not a one-sided reweighting.

use crate::embedding::{ClassVector, RelevanceVector};
use crate::error::{FsError, Result};
use crate::tensor::Tensor;

/// Added to the cosine denominator so zero columns map to zero similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap(Tensor);

impl SimilarityMap {
    pub fn new(map: Tensor) -> Result<Self> {
        if map.rank() != 2 {
            return Err(FsError::shape(format!(
                "similarity map must be rank 2, got {:?}",
                map.shape()
            )));
        }
        Ok(Self(map))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn values(&self) -> &[f32] {
        self.0.data()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }
}

/// Feature columns pre-multiplied by a relevance vector, with their norms.
///
/// Neither depends on the class vector, so one instance serves every
/// similarity evaluation (and gradient) against the same feature map.
#[derive(Clone, Debug)]
pub struct WeightedFeatures {
    d: usize,
    h: usize,
    w: usize,
    relevance: Vec<f64>,
    /// Channel-major `[d, h*w]`.
    columns: Vec<f64>,
    norms: Vec<f64>,
}

impl WeightedFeatures {
    pub fn new(features: &Tensor, relevance: &[f64]) -> Result<Self> {
        let (d, h, w) = features.chw()?;
        if relevance.len() != d {
            return Err(FsError::shape(format!(
                "relevance has {} entries, features have {d} channels",
                relevance.len()
            )));
        }
        let hw = h * w;
        let mut columns = Vec::with_capacity(d * hw);
        for (c, &rc) in relevance.iter().enumerate() {
            columns.extend(features.data()[c * hw..(c + 1) * hw].iter().map(|&v| v as f64 * rc));
        }
        let mut norms = vec![0.0f64; hw];
        for c in 0..d {
            for (n, &v) in norms.iter_mut().zip(&columns[c * hw..(c + 1) * hw]) {
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        Ok(Self {
            d,
            h,
            w,
            relevance: relevance.to_vec(),
            columns,
            norms,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d, self.h, self.w)
    }

    fn weighted_class(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.relevance).map(|(a, r)| a * r).collect()
    }

    /// Per-position similarity for class vector `f` (unweighted input).
    pub fn similarity(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.d, "class vector dim");
        let a = self.weighted_class(f);
        let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let hw = self.h * self.w;
        let mut dots = vec![0.0f64; hw];
        for (c, &ac) in a.iter().enumerate() {
            for (s, &b) in dots.iter_mut().zip(&self.columns[c * hw..(c + 1) * hw]) {
                *s += ac * b;
            }
        }
        dots.iter_mut()
            .zip(&self.norms)
            .for_each(|(s, &bn)| *s /= a_norm * bn + COSINE_EPS);
        dots
    }

    /// Vector-Jacobian product: given `dL/dsigma`, returns `dL/df`.
    pub fn similarity_backward(&self, f: &[f64], dsigma: &[f64]) -> Vec<f64> {
        let hw = self.h * self.w;
        assert_eq!(dsigma.len(), hw);
        let a = self.weighted_class(f);
        let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut dots = vec![0.0f64; hw];
        for (c, &ac) in a.iter().enumerate() {
            for (s, &b) in dots.iter_mut().zip(&self.columns[c * hw..(c + 1) * hw]) {
                *s += ac * b;
            }
        }
        // sigma_i = n_i / D_i with D_i = |a| |b_i| + eps.
        // d sigma_i / d a = b_i / D_i - n_i |b_i| a / (D_i^2 |a|)
        let mut coef = vec![0.0f64; hw];
        let mut radial = 0.0f64;
        for i in 0..hw {
            let denom = a_norm * self.norms[i] + COSINE_EPS;
            coef[i] = dsigma[i] / denom;
            radial += dsigma[i] * dots[i] * self.norms[i] / (denom * denom);
        }
        let radial_scale = if a_norm > 0.0 { radial / a_norm } else { 0.0 };
        let mut da = vec![0.0f64; self.d];
        for c in 0..self.d {
            let col = &self.columns[c * hw..(c + 1) * hw];
            da[c] = crate::tensor::kernel::dot(&coef, col) - radial_scale * a[c];
        }
        da.iter_mut()
            .zip(&self.relevance)
            .for_each(|(g, r)| *g *= r);
        da
    }
}

fn check_dims(f: &ClassVector, features: &Tensor) -> Result<(usize, usize)> {
    let (d, h, w) = features.chw()?;
    if f.dim() != d {
        return Err(FsError::shape(format!(
            "class vector dim {} vs feature channels {d}",
            f.dim()
        )));
    }
    Ok((h, w))
}

/// Plain cosine between `f` and every feature column.
pub fn cosine_map(f: &ClassVector, features: &Tensor) -> Result<SimilarityMap> {
    let (h, w) = check_dims(f, features)?;
    let ones = vec![1.0; f.dim()];
    let wf = WeightedFeatures::new(features, &ones)?;
    SimilarityMap::new(Tensor::from_f64(vec![h, w], &wf.similarity(&f.to_f64()))?)
}

/// Cosine between `f * r` and every `F_i * r`.
pub fn weighted_cosine_map(
    f: &ClassVector,
    features: &Tensor,
    r: &RelevanceVector,
) -> Result<SimilarityMap> {
    let (h, w) = check_dims(f, features)?;
    if r.dim() != f.dim() {
        return Err(FsError::shape(format!(
            "relevance dim {} vs class vector dim {}",
            r.dim(),
            f.dim()
        )));
    }
    let wf = WeightedFeatures::new(features, &r.to_f64())?;
    SimilarityMap::new(Tensor::from_f64(vec![h, w], &wf.similarity(&f.to_f64()))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn cosine_oracle(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb + COSINE_EPS)
    }

    fn column(f: &Tensor, y: usize, x: usize) -> Vec<f64> {
        (0..f.shape()[0]).map(|c| f.get(&[c, y, x]) as f64).collect()
    }

    #[test]
    fn self_and_orthogonal() {
        let f = ClassVector::new(vec![1.0, 2.0]).unwrap();
        let feats = Tensor::new(vec![2, 1, 2], vec![1.0, -2.0, 2.0, 1.0]).unwrap();
        let m = cosine_map(&f, &feats).unwrap();
        assert!((m.values()[0] - 1.0).abs() < 1e-6);
        assert!(m.values()[1].abs() < 1e-7);
    }

    #[test]
    fn random_matches_oracle() {
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let feats = Tensor::randn(vec![3, 2, 2], 1.0, &mut rng);
            let f = ClassVector::new((0..3).map(|_| rng.normal() as f32).collect()).unwrap();
            let r = crate::embedding::relevance(&(0..3).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
            let plain = cosine_map(&f, &feats).unwrap();
            let weighted = weighted_cosine_map(&f, &feats, &r).unwrap();
            let fr: Vec<f64> = f.to_f64().iter().zip(r.to_f64()).map(|(a, b)| a * b).collect();
            for y in 0..2 {
                for x in 0..2 {
                    let col = column(&feats, y, x);
                    let want = cosine_oracle(&f.to_f64(), &col);
                    assert!((plain.values()[y * 2 + x] as f64 - want).abs() < 1e-6);
                    let colr: Vec<f64> = col.iter().zip(r.to_f64()).map(|(a, b)| a * b).collect();
                    let want = cosine_oracle(&fr, &colr);
                    assert!((weighted.values()[y * 2 + x] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn one_hot_relevance_gives_sign() {
        let feats = Tensor::new(vec![2, 1, 3], vec![5.0, 1.0, 3.0, -2.0, 0.0, -4.0]).unwrap();
        let f = ClassVector::new(vec![0.5, -1.0]).unwrap();
        let r = RelevanceVector::from_unnormalized(&[0.0, 1.0]).unwrap();
        let m = weighted_cosine_map(&f, &feats, &r).unwrap();
        // channel 1 of columns: -2, 0, -4; f_1 = -1
        let v = m.values();
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let f = ClassVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let feats = Tensor::zeros(vec![2, 2, 2]);
        assert!(matches!(cosine_map(&f, &feats), Err(FsError::Shape(_))));
        let f2 = ClassVector::new(vec![1.0, 2.0]).unwrap();
        assert!(weighted_cosine_map(&f2, &feats, &RelevanceVector::uniform(3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let feats = Tensor::randn(vec![4, 3, 3], 1.0, &mut rng);
        let r: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let wf = WeightedFeatures::new(&feats, &r).unwrap();
        let f: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
        let loss = |x: &[f64]| -> f64 { wf.similarity(x).iter().zip(&g).map(|(s, g)| s * g).sum() };
        let analytic = wf.similarity_backward(&f, &g);
        for c in 0..4 {
            let h = 1e-5;
            let mut p = f.clone();
            p[c] += h;
            let mut m = f.clone();
            m[c] -= h;
            let num = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((num - analytic[c]).abs() < 1e-7, "{c}: {num} vs {}", analytic[c]);
        }
    }

    proptest! {
        #[test]
        fn bounded_symmetric_and_scale_invariant(
            seed in 0u64..1000,
            c in 0.01f32..50.0,
        ) {
            let mut rng = Rng::new(seed);
            let d = 1 + rng.below(6);
            let feats = Tensor::randn(vec![d, 3, 4], 1.0, &mut rng);
            let f = ClassVector::new((0..d).map(|_| rng.normal() as f32).collect()).unwrap();
            let r = crate::embedding::relevance(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap();
            let base = weighted_cosine_map(&f, &feats, &r).unwrap();
            for &v in base.values() {
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
            }
            let scaled = ClassVector::new(f.values().iter().map(|v| v * c).collect()).unwrap();
            let s = weighted_cosine_map(&scaled, &feats, &r).unwrap();
            // exact up to the epsilon in the denominator
            let rv = r.to_f64();
            let fr: f64 = f.to_f64().iter().zip(&rv).map(|(a, b)| (a * b).powi(2)).sum::<f64>().sqrt();
            for (i, (a, b)) in base.values().iter().zip(s.values()).enumerate() {
                let (y, x) = (i / 4, i % 4);
                let col: f64 = (0..d).map(|ch| (feats.get(&[ch, y, x]) as f64 * rv[ch]).powi(2)).sum::<f64>().sqrt();
                let tol = 1e-6 + 2.0 * COSINE_EPS / ((c as f64).min(1.0) * fr * col);
                prop_assert!(((a - b) as f64).abs() < tol);
            }
            let neg_f = ClassVector::new(f.values().iter().map(|v| -v).collect()).unwrap();
            let neg = weighted_cosine_map(&neg_f, &feats.scale(-1.0).unwrap(), &r).unwrap();
            for (a, b) in base.values().iter().zip(neg.values()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            let uni = weighted_cosine_map(&f, &feats, &RelevanceVector::uniform(d)).unwrap();
            let plain = cosine_map(&f, &feats).unwrap();
            // uniform weights shrink both norms by sqrt(d), which only moves
            // the epsilon's relative size
            let fnorm: f64 = f.to_f64().iter().map(|v| v * v).sum::<f64>().sqrt();
            for (i, (a, b)) in uni.values().iter().zip(plain.values()).enumerate() {
                let col: f64 = (0..d).map(|ch| (feats.get(&[ch, i / 4, i % 4]) as f64).powi(2)).sum::<f64>().sqrt();
                let tol = 1e-6 + COSINE_EPS * d as f64 / (fnorm * col);
                prop_assert!(((a - b) as f64).abs() < tol);
            }
        }
    }
}
