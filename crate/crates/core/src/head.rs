//! Two-layer convolutional prediction head.
//!
//! Input is the similarity map (channel 0) stacked on the `d` feature
//! channels. Layer 1 is a 3x3 convolution to [`HIDDEN_CHANNELS`] channels
//! followed by ReLU, layer 2 a 1x1 convolution to two logits (background,
//! foreground).
//!
//! Parameters are stored as `f32` tensors ([`HeadParams`]); all arithmetic
//! runs on an `f64` copy ([`HeadWeights`]). The first-layer response to the
//! feature channels does not depend on the similarity map, so
//! [`HeadWeights::feature_response`] computes it once per feature map and
//! [`HeadWeights::forward`] only adds the similarity channel on top.

use crate::embedding::{masked_pool, relevance, ClassVector, RelevanceVector};
use crate::episode::{ClassIndex, FoldSplit, LabeledExample, Phase};
use crate::error::{FsError, Result};
use crate::mask::BinaryMask;
use crate::rng::{derive_seed, Rng};
use crate::similarity::{SimilarityMap, WeightedFeatures};
use crate::tensor::{kernel, Tensor};

pub const HIDDEN_CHANNELS: usize = 128;
pub const KERNEL: usize = 3;
const KK: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv1_weights: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weights: Tensor,
    pub conv2_bias: Tensor,
}

impl HeadParams {
    pub fn new(
        conv1_weights: Tensor,
        conv1_bias: Tensor,
        conv2_weights: Tensor,
        conv2_bias: Tensor,
    ) -> Result<Self> {
        let d = match *conv1_weights.shape() {
            [HIDDEN_CHANNELS, c, KERNEL, KERNEL] if c >= 2 => c - 1,
            _ => {
                return Err(FsError::shape(format!(
                    "conv1 weights must be [{HIDDEN_CHANNELS}, d+1, 3, 3], got {:?}",
                    conv1_weights.shape()
                )))
            }
        };
        let checks: [(&Tensor, &[usize], &str); 3] = [
            (&conv1_bias, &[HIDDEN_CHANNELS], "conv1 bias"),
            (&conv2_weights, &[2, HIDDEN_CHANNELS, 1, 1], "conv2 weights"),
            (&conv2_bias, &[2], "conv2 bias"),
        ];
        for (t, want, name) in checks {
            if t.shape() != want {
                return Err(FsError::shape(format!(
                    "{name} must be {want:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        let p = Self {
            conv1_weights,
            conv1_bias,
            conv2_weights,
            conv2_bias,
        };
        debug_assert_eq!(p.feature_dim(), d);
        Ok(p)
    }

    /// Kaiming-normal weights (fan-in scaled), zero biases.
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        let fan1 = ((d + 1) * KK) as f64;
        let fan2 = HIDDEN_CHANNELS as f64;
        Self {
            conv1_weights: Tensor::randn(
                vec![HIDDEN_CHANNELS, d + 1, KERNEL, KERNEL],
                (2.0 / fan1).sqrt(),
                rng,
            ),
            conv1_bias: Tensor::zeros(vec![HIDDEN_CHANNELS]),
            conv2_weights: Tensor::randn(vec![2, HIDDEN_CHANNELS, 1, 1], (2.0 / fan2).sqrt(), rng),
            conv2_bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            conv1_weights: Tensor::zeros(vec![HIDDEN_CHANNELS, d + 1, KERNEL, KERNEL]),
            conv1_bias: Tensor::zeros(vec![HIDDEN_CHANNELS]),
            conv2_weights: Tensor::zeros(vec![2, HIDDEN_CHANNELS, 1, 1]),
            conv2_bias: Tensor::zeros(vec![2]),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.conv1_weights.shape()[1] - 1
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [
            &self.conv1_weights,
            &self.conv1_bias,
            &self.conv2_weights,
            &self.conv2_bias,
        ]
    }

    pub fn weights(&self) -> HeadWeights {
        HeadWeights {
            d: self.feature_dim(),
            w1: self.conv1_weights.to_f64(),
            b1: self.conv1_bias.to_f64(),
            w2: self.conv2_weights.to_f64(),
            b2: self.conv2_bias.to_f64(),
        }
    }
}

/// `f64` head parameters; also the shape of parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights {
    pub d: usize,
    /// `[128, d+1, 3, 3]`
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `[2, 128]`
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct Activations {
    pub h: usize,
    pub w: usize,
    /// Layer-1 pre-activations, `[128, h*w]`.
    pub pre: Vec<f64>,
    /// `[2, h*w]`
    pub logits: Vec<f64>,
}

impl Activations {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Foreground probability per position.
    pub fn foreground_probs(&self) -> Vec<f64> {
        let hw = self.hw();
        (0..hw)
            .map(|i| kernel::softmax_pair(self.logits[i], self.logits[hw + i]).1)
            .collect()
    }

    /// Mean per-position cross-entropy against `target` and its gradient
    /// with respect to the logits.
    pub fn loss_and_grad(&self, target: &BinaryMask) -> (f64, Vec<f64>) {
        let hw = self.hw();
        let n = hw as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; 2 * hw];
        for i in 0..hw {
            let (l0, l1) = (self.logits[i], self.logits[hw + i]);
            let t = target.data()[i] as usize;
            loss += log_sum_exp(l0, l1) - if t == 1 { l1 } else { l0 };
            let (p0, p1) = kernel::softmax_pair(l0, l1);
            grad[i] = (p0 - (t == 0) as u8 as f64) / n;
            grad[hw + i] = (p1 - (t == 1) as u8 as f64) / n;
        }
        (loss / n, grad)
    }
}

#[inline]
fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Which leaves a backward pass differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    ClassVector,
    Params,
    Both,
}

impl Wrt {
    pub fn class_vector(self) -> bool {
        matches!(self, Wrt::ClassVector | Wrt::Both)
    }

    pub fn params(self) -> bool {
        matches!(self, Wrt::Params | Wrt::Both)
    }
}

impl HeadWeights {
    pub fn zeros_like(&self) -> Self {
        Self {
            d: self.d,
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    pub fn to_params(&self) -> Result<HeadParams> {
        HeadParams::new(
            Tensor::from_f64(vec![HIDDEN_CHANNELS, self.d + 1, KERNEL, KERNEL], &self.w1)?,
            Tensor::from_f64(vec![HIDDEN_CHANNELS], &self.b1)?,
            Tensor::from_f64(vec![2, HIDDEN_CHANNELS, 1, 1], &self.w2)?,
            Tensor::from_f64(vec![2], &self.b2)?,
        )
    }

    pub fn slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &HeadWeights) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Bias plus the layer-1 response to the feature channels, `[128, h*w]`.
    pub fn feature_response(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (d, h, w) = features.chw()?;
        if d != self.d {
            return Err(FsError::shape(format!(
                "head expects {} feature channels, got {d}",
                self.d
            )));
        }
        let mut pre = kernel::broadcast_bias(&self.b1, h * w);
        kernel::conv_accumulate(
            &features.to_f64(),
            d,
            h,
            w,
            &self.w1,
            d + 1,
            1,
            HIDDEN_CHANNELS,
            KERNEL,
            &mut pre,
        );
        Ok(pre)
    }

    /// Completes the forward pass for one similarity map.
    pub fn forward(&self, feature_response: &[f64], sim: &[f64], h: usize, w: usize) -> Activations {
        let hw = h * w;
        assert_eq!(sim.len(), hw);
        assert_eq!(feature_response.len(), HIDDEN_CHANNELS * hw);
        let mut pre = feature_response.to_vec();
        kernel::conv_accumulate(sim, 1, h, w, &self.w1, self.d + 1, 0, HIDDEN_CHANNELS, KERNEL, &mut pre);
        let mut logits = kernel::broadcast_bias(&self.b2, hw);
        for o in 0..2 {
            let out = &mut logits[o * hw..(o + 1) * hw];
            for c in 0..HIDDEN_CHANNELS {
                let wv = self.w2[o * HIDDEN_CHANNELS + c];
                for (l, &p) in out.iter_mut().zip(&pre[c * hw..(c + 1) * hw]) {
                    *l += wv * p.max(0.0);
                }
            }
        }
        Activations { h, w, pre, logits }
    }

    /// Backpropagates `dlogits` through the head.
    ///
    /// Returns the gradient with respect to the similarity map (when
    /// `want_sim`) and the parameter gradient (when `features` is given).
    pub fn backward(
        &self,
        act: &Activations,
        dlogits: &[f64],
        sim: &[f64],
        features: Option<&Tensor>,
        want_sim: bool,
    ) -> (Option<Vec<f64>>, Option<HeadWeights>) {
        let (h, w) = (act.h, act.w);
        let hw = h * w;
        let mut dpre = vec![0.0f64; HIDDEN_CHANNELS * hw];
        for o in 0..2 {
            let g = &dlogits[o * hw..(o + 1) * hw];
            for c in 0..HIDDEN_CHANNELS {
                let wv = self.w2[o * HIDDEN_CHANNELS + c];
                for (dp, &gi) in dpre[c * hw..(c + 1) * hw].iter_mut().zip(g) {
                    *dp += wv * gi;
                }
            }
        }
        for (dp, &p) in dpre.iter_mut().zip(&act.pre) {
            if p <= 0.0 {
                *dp = 0.0;
            }
        }

        let dparams = features.map(|features| {
            let mut g = self.zeros_like();
            for o in 0..2 {
                let dl = &dlogits[o * hw..(o + 1) * hw];
                g.b2[o] = dl.iter().sum();
                for c in 0..HIDDEN_CHANNELS {
                    let hidden: Vec<f64> = act.pre[c * hw..(c + 1) * hw].iter().map(|p| p.max(0.0)).collect();
                    g.w2[o * HIDDEN_CHANNELS + c] = kernel::dot(dl, &hidden);
                }
            }
            for c in 0..HIDDEN_CHANNELS {
                g.b1[c] = dpre[c * hw..(c + 1) * hw].iter().sum();
            }
            kernel::conv_weight_grad(sim, 1, h, w, &dpre, HIDDEN_CHANNELS, KERNEL, self.d + 1, 0, &mut g.w1);
            kernel::conv_weight_grad(
                &features.to_f64(),
                self.d,
                h,
                w,
                &dpre,
                HIDDEN_CHANNELS,
                KERNEL,
                self.d + 1,
                1,
                &mut g.w1,
            );
            g
        });

        let dsim = want_sim.then(|| {
            let mut ds = vec![0.0f64; hw];
            kernel::conv_input_grad(&dpre, HIDDEN_CHANNELS, h, w, &self.w1, self.d + 1, 0, 1, KERNEL, &mut ds);
            ds
        });
        (dsim, dparams)
    }
}

/// Head output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedMask {
    pub logits: Tensor,
    pub probs: Tensor,
    pub binary: BinaryMask,
}

impl PredictedMask {
    pub fn from_logits(logits: &[f64], h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        let mut probs = vec![0.0; 2 * hw];
        for i in 0..hw {
            let (p0, p1) = kernel::softmax_pair(logits[i], logits[hw + i]);
            probs[i] = p0;
            probs[hw + i] = p1;
        }
        let probs = Tensor::from_f64(vec![2, h, w], &probs)?;
        let binary = BinaryMask::new(h, w, probs.data()[hw..].iter().map(|&p| (p > 0.5) as u8).collect())?;
        Ok(Self {
            logits: Tensor::from_f64(vec![2, h, w], logits)?,
            probs,
            binary,
        })
    }

    /// Builds a prediction from per-position foreground probabilities.
    pub fn from_foreground_probs(fg: &[f64], h: usize, w: usize) -> Result<Self> {
        let hw = h * w;
        let mut logits = Vec::with_capacity(2 * hw);
        logits.extend(std::iter::repeat_n(0.0, hw));
        logits.extend(fg.iter().map(|&p| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            (p / (1.0 - p)).ln()
        }));
        let mut probs = Vec::with_capacity(2 * hw);
        probs.extend(fg.iter().map(|p| 1.0 - p));
        probs.extend_from_slice(fg);
        let probs = Tensor::from_f64(vec![2, h, w], &probs)?;
        let binary = BinaryMask::new(h, w, fg.iter().map(|&p| (p > 0.5) as u8).collect())?;
        Ok(Self {
            logits: Tensor::from_f64(vec![2, h, w], &logits)?,
            probs,
            binary,
        })
    }

    pub fn foreground_probs(&self) -> &[f32] {
        let hw = self.binary.len();
        &self.probs.data()[hw..]
    }
}

/// Runs the head on a similarity map and the feature map it came from.
pub fn head_forward(params: &HeadParams, sim: &SimilarityMap, features: &Tensor) -> Result<PredictedMask> {
    let (_, h, w) = features.chw()?;
    if sim.dims() != (h, w) {
        return Err(FsError::shape(format!(
            "similarity map {:?} vs feature grid {h}x{w}",
            sim.dims()
        )));
    }
    let weights = params.weights();
    let response = weights.feature_response(features)?;
    let sim: Vec<f64> = sim.values().iter().map(|&v| v as f64).collect();
    let act = weights.forward(&response, &sim, h, w);
    PredictedMask::from_logits(&act.logits, h, w)
}

/// Mean per-position cross-entropy of the prediction's logits.
pub fn cross_entropy(pred: &PredictedMask, target: &BinaryMask) -> Result<f64> {
    let hw = pred.binary.len();
    if pred.binary.dims() != target.dims() {
        return Err(FsError::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.binary.dims(),
            target.dims()
        )));
    }
    let l = pred.logits.data();
    let mut loss = 0.0;
    for i in 0..hw {
        let (l0, l1) = (l[i] as f64, l[hw + i] as f64);
        loss += log_sum_exp(l0, l1) - if target.data()[i] == 1 { l1 } else { l0 };
    }
    Ok(loss / hw as f64)
}

/// Support-conditioned inference without boosting: pool, weight, compare,
/// run the head.
pub fn predict(
    weights: &HeadWeights,
    f: &ClassVector,
    features: &Tensor,
    r: &RelevanceVector,
) -> Result<PredictedMask> {
    let (_, h, w) = features.chw()?;
    let wf = WeightedFeatures::new(features, &r.to_f64())?;
    let sim = wf.similarity(&f.to_f64());
    let act = weights.forward(&weights.feature_response(features)?, &sim, h, w);
    PredictedMask::from_logits(&act.logits, h, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 7e-3,
            iterations: 2000,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.batch_size == 0 {
            return Err(FsError::Data(format!(
                "invalid training config: lr={} batch={}",
                self.learning_rate, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainedHead {
    pub params: HeadParams,
    /// Mean batch loss before each update.
    pub losses: Vec<f64>,
}

/// Loss and parameter gradient for one support/query pair.
fn episode_param_grad(
    weights: &HeadWeights,
    support: &LabeledExample,
    query: &LabeledExample,
    use_relevance: bool,
) -> Result<(f64, HeadWeights)> {
    let s_mask = support.feature_mask();
    let f = masked_pool(&support.features, &s_mask)?;
    let r = if use_relevance {
        relevance(&crate::embedding::feature_difference(&support.features, &s_mask)?)?
    } else {
        RelevanceVector::uniform(f.dim())
    };
    let (_, h, w) = query.features.chw()?;
    let wf = WeightedFeatures::new(&query.features, &r.to_f64())?;
    let sim = wf.similarity(&f.to_f64());
    let act = weights.forward(&weights.feature_response(&query.features)?, &sim, h, w);
    let (loss, dlogits) = act.loss_and_grad(&query.feature_mask());
    let (_, grad) = weights.backward(&act, &dlogits, &sim, Some(&query.features), false);
    Ok((loss, grad.expect("parameter gradient requested")))
}

/// Episodic SGD on the head parameters with one-shot training episodes.
pub fn train_head(
    dataset: &[LabeledExample],
    split: &FoldSplit,
    config: &TrainConfig,
    use_relevance: bool,
) -> Result<TrainedHead> {
    config.validate()?;
    let d = crate::episode::validate_dataset(dataset)?;
    let index = ClassIndex::new(dataset);
    if index.eligible(&split.train_classes, 1).is_empty() {
        return Err(FsError::Data(format!(
            "fold {}: no train class has two examples",
            split.fold
        )));
    }
    let mut init_rng = Rng::new(derive_seed(&[config.seed, 0]));
    let mut episode_rng = Rng::new(derive_seed(&[config.seed, 1]));
    let mut weights = HeadParams::init(d, &mut init_rng).weights();
    let mut losses = Vec::with_capacity(config.iterations);
    let scale = 1.0 / config.batch_size as f64;
    for it in 0..config.iterations {
        let mut grad = weights.zeros_like();
        let mut loss = 0.0;
        for _ in 0..config.batch_size {
            let (supports, query) = index.sample(split, 1, Phase::Train, &mut episode_rng)?;
            let (l, g) = episode_param_grad(&weights, &dataset[supports[0]], &dataset[query], use_relevance)?;
            loss += l;
            grad.axpy(1.0, &g);
        }
        weights.axpy(-config.learning_rate * scale, &grad);
        if !weights.is_finite() {
            return Err(FsError::NonFinite(format!("head training at iteration {it}")));
        }
        losses.push(loss * scale);
        log::debug!("iteration {it}: loss {:.6}", loss * scale);
    }
    Ok(TrainedHead {
        params: weights.to_params()?,
        losses,
    })
}
