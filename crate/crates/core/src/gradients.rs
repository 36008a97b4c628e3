//! Analytic gradients of the support/query loss and a central-difference
//! checker.
//!
//! The chain is cross-entropy <- 1x1 conv <- ReLU <- 3x3 conv <- concat <-
//! weighted cosine. The relevance vector is a constant of the chain.

use crate::embedding::{ClassVector, RelevanceVector};
use crate::error::{FsError, Result};
use crate::head::{HeadParams, HeadWeights, Wrt};
use crate::mask::BinaryMask;
use crate::similarity::WeightedFeatures;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradBundle {
    pub loss: f64,
    /// `dL/df`, present when requested.
    pub d_class_vector: Option<Vec<f64>>,
    /// `dL/dparams`, present when requested.
    pub d_params: Option<HeadWeights>,
}

fn check_target(features: &Tensor, target: &BinaryMask) -> Result<(usize, usize)> {
    let (_, h, w) = features.chw()?;
    if target.dims() != (h, w) {
        return Err(FsError::shape(format!(
            "target {:?} vs feature grid {h}x{w}",
            target.dims()
        )));
    }
    Ok((h, w))
}

/// Loss of the full pipeline for an `f64` class vector and `f64` weights.
pub fn pipeline_loss(
    weights: &HeadWeights,
    f: &[f64],
    features: &Tensor,
    r: &[f64],
    target: &BinaryMask,
) -> Result<f64> {
    let (h, w) = check_target(features, target)?;
    let wf = WeightedFeatures::new(features, r)?;
    let sim = wf.similarity(f);
    let act = weights.forward(&weights.feature_response(features)?, &sim, h, w);
    Ok(act.loss_and_grad(target).0)
}

/// Gradient bundle for `f64` inputs; see [`backward`].
pub fn backward_f64(
    weights: &HeadWeights,
    f: &[f64],
    features: &Tensor,
    r: &[f64],
    target: &BinaryMask,
    wrt: Wrt,
) -> Result<GradBundle> {
    let (h, w) = check_target(features, target)?;
    let wf = WeightedFeatures::new(features, r)?;
    if f.len() != weights.d {
        return Err(FsError::shape(format!(
            "class vector dim {} vs head dim {}",
            f.len(),
            weights.d
        )));
    }
    let sim = wf.similarity(f);
    let act = weights.forward(&weights.feature_response(features)?, &sim, h, w);
    let (loss, dlogits) = act.loss_and_grad(target);
    let (dsim, d_params) = weights.backward(
        &act,
        &dlogits,
        &sim,
        wrt.params().then_some(features),
        wrt.class_vector(),
    );
    let d_class_vector = dsim.map(|ds| wf.similarity_backward(f, &ds));
    let finite = loss.is_finite()
        && d_class_vector
            .as_ref()
            .is_none_or(|g| g.iter().all(|v| v.is_finite()))
        && d_params.as_ref().is_none_or(HeadWeights::is_finite);
    if !finite {
        return Err(FsError::NonFinite("backward pass".into()));
    }
    Ok(GradBundle {
        loss,
        d_class_vector,
        d_params,
    })
}

/// Exact gradients of the cross-entropy between the head's prediction on
/// `features` (conditioned on `f` and `r`) and `target`.
pub fn backward(
    params: &HeadParams,
    f: &ClassVector,
    features: &Tensor,
    r: &RelevanceVector,
    target: &BinaryMask,
    wrt: Wrt,
) -> Result<GradBundle> {
    if r.dim() != f.dim() {
        return Err(FsError::shape(format!(
            "relevance dim {} vs class vector dim {}",
            r.dim(),
            f.dim()
        )));
    }
    backward_f64(&params.weights(), &f.to_f64(), features, &r.to_f64(), target, wrt)
}

/// Central differences `(L(x + h e_i) - L(x - h e_i)) / 2h`.
pub fn finite_diff_oracle(loss: impl Fn(&[f64]) -> f64, point: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let plus = loss(&x);
            x[i] = orig - step;
            let minus = loss(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `max_i |a_i - b_i| / max_i |b_i|`, the error measure used by the
/// gradient checks.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::relevance;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn instance(seed: u64, d: usize, h: usize, w: usize) -> (HeadParams, Vec<f64>, Tensor, Vec<f64>, BinaryMask) {
        let mut rng = Rng::new(seed);
        let mut p = HeadParams::init(d, &mut rng);
        p.conv1_bias = Tensor::randn(vec![crate::head::HIDDEN_CHANNELS], 0.2, &mut rng);
        p.conv2_bias = Tensor::randn(vec![2], 0.2, &mut rng);
        let f: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let feats = Tensor::randn(vec![d, h, w], 1.0, &mut rng);
        let r = relevance(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap().to_f64();
        let target = BinaryMask::from_fn(h, w, |_, _| rng.uniform() < 0.5);
        (p, f, feats, r, target)
    }

    #[test]
    fn quadratic_and_constant() {
        let g = finite_diff_oracle(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-3);
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let g = finite_diff_oracle(|_| 3.5, &[1.0, -2.0, 0.0], 1e-3);
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn dead_head_has_zero_class_gradient() {
        let (_, f, feats, r, target) = instance(1, 3, 4, 4);
        let mut p = HeadParams::zeros(3);
        p.conv2_bias = Tensor::new(vec![2], vec![0.3, -0.1]).unwrap();
        let g = backward_f64(&p.weights(), &f, &feats, &r, &target, Wrt::ClassVector).unwrap();
        assert!(g.d_class_vector.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_gradient_matches_finite_differences() {
        let (p, f, feats, r, target) = instance(2, 3, 4, 4);
        let w = p.weights();
        let g = backward_f64(&w, &f, &feats, &r, &target, Wrt::ClassVector).unwrap();
        let num = finite_diff_oracle(|x| pipeline_loss(&w, x, &feats, &r, &target).unwrap(), &f, 1e-3);
        let err = max_relative_error(g.d_class_vector.as_ref().unwrap(), &num);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn class_gradient_orthogonal_to_class_vector() {
        for seed in 0..5 {
            let (p, f, feats, r, target) = instance(10 + seed, 5, 5, 5);
            let g = backward_f64(&p.weights(), &f, &feats, &r, &target, Wrt::ClassVector)
                .unwrap()
                .d_class_vector
                .unwrap();
            // the weighted cosine sees f only through f * r, and is
            // invariant to scaling it
            let dot: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dot.abs() <= 1e-4 * gn * fnorm, "seed {seed}: {dot}");
        }
    }

    #[test]
    fn both_equals_separate_calls() {
        let (p, f, feats, r, target) = instance(3, 4, 3, 5);
        let w = p.weights();
        let both = backward_f64(&w, &f, &feats, &r, &target, Wrt::Both).unwrap();
        let cv = backward_f64(&w, &f, &feats, &r, &target, Wrt::ClassVector).unwrap();
        let pr = backward_f64(&w, &f, &feats, &r, &target, Wrt::Params).unwrap();
        assert_eq!(both.d_class_vector, cv.d_class_vector);
        assert_eq!(both.d_params, pr.d_params);
        assert!(cv.d_params.is_none() && pr.d_class_vector.is_none());
        assert_eq!(both.loss, cv.loss);
    }

    #[test]
    fn shape_errors() {
        let (p, _, feats, r, _) = instance(4, 3, 4, 4);
        let f = ClassVector::new(vec![1.0; 3]).unwrap();
        let bad_target = BinaryMask::zeros(3, 3);
        let r = RelevanceVector::from_unnormalized(&r).unwrap();
        assert!(backward(&p, &f, &feats, &r, &bad_target, Wrt::Both).is_err());
        let f2 = ClassVector::new(vec![1.0; 2]).unwrap();
        assert!(backward(&p, &f2, &feats, &r, &BinaryMask::zeros(4, 4), Wrt::Both).is_err());
    }
}
