//! Gradient-guided ensemble inference.
//!
//! At test time the class vector is refined by descending the loss of
//! segmenting the support image(s) with the frozen head. Every iterate is an
//! expert; each expert segments the query and the predictions are averaged
//! with weights given by how well the expert segmented the supports.

use serde::{Deserialize, Serialize};

use crate::embedding::{feature_difference, masked_pool, relevance, ClassVector, RelevanceVector};
use crate::error::{FsError, Result};
use crate::head::{Activations, HeadParams, HeadWeights, PredictedMask};
use crate::mask::BinaryMask;
use crate::metrics::iou;
use crate::similarity::WeightedFeatures;
use crate::tensor::{kernel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = FsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(FsError::Data(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub num_experts: usize,
    pub step_size: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self {
            num_experts: 10,
            step_size: 1e-2,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(FsError::Data("num_experts must be at least 1".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(FsError::Data(format!("invalid step size {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub f: ClassVector,
    /// Mean support IoU of this expert's support predictions, in `[0, 1]`.
    pub confidence: f64,
    /// Support loss summed over the supports.
    pub support_loss: f64,
}

/// One row of a per-episode boosting trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrace {
    pub expert: usize,
    pub support_loss: f64,
    pub confidence: f64,
}

pub fn trace(experts: &[Expert]) -> Vec<ExpertTrace> {
    experts
        .iter()
        .enumerate()
        .map(|(i, e)| ExpertTrace {
            expert: i + 1,
            support_loss: e.support_loss,
            confidence: e.confidence,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleResult {
    /// `[2, h, w]`, channel 1 foreground.
    pub fused_probs: Tensor,
    pub fused_binary: BinaryMask,
    pub experts: Vec<Expert>,
    /// Foreground probabilities of each member prediction, in input order.
    pub per_expert_query_probs: Vec<Vec<f64>>,
}

impl EnsembleResult {
    pub fn foreground_probs(&self) -> &[f32] {
        &self.fused_probs.data()[self.fused_binary.len()..]
    }
}

/// A feature map prepared for repeated head evaluations with varying class
/// vectors.
pub struct PreparedInput {
    weighted: WeightedFeatures,
    response: Vec<f64>,
    h: usize,
    w: usize,
}

impl PreparedInput {
    pub fn new(weights: &HeadWeights, features: &Tensor, r: &RelevanceVector) -> Result<Self> {
        let (_, h, w) = features.chw()?;
        Ok(Self {
            weighted: WeightedFeatures::new(features, &r.to_f64())?,
            response: weights.feature_response(features)?,
            h,
            w,
        })
    }

    pub fn run(&self, weights: &HeadWeights, f: &[f64]) -> (Vec<f64>, Activations) {
        let sim = self.weighted.similarity(f);
        let act = weights.forward(&self.response, &sim, self.h, self.w);
        (sim, act)
    }

    /// Background and foreground probability planes.
    pub fn probs(&self, weights: &HeadWeights, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (_, act) = self.run(weights, f);
        split_probs(&act.logits, self.h * self.w)
    }
}

fn split_probs(logits: &[f64], hw: usize) -> (Vec<f64>, Vec<f64>) {
    let mut bg = Vec::with_capacity(hw);
    let mut fg = Vec::with_capacity(hw);
    for i in 0..hw {
        let (p0, p1) = kernel::softmax_pair(logits[i], logits[hw + i]);
        bg.push(p0);
        fg.push(p1);
    }
    (bg, fg)
}

/// Thresholds foreground probabilities the way [`PredictedMask`] does.
fn binarize(fg: &[f64], h: usize, w: usize) -> Result<BinaryMask> {
    BinaryMask::new(h, w, fg.iter().map(|&p| ((p as f32) > 0.5) as u8).collect())
}

fn check_supports(supports: &[(Tensor, BinaryMask)]) -> Result<()> {
    if supports.is_empty() {
        return Err(FsError::Data("at least one support is required".into()));
    }
    for (k, (features, mask)) in supports.iter().enumerate() {
        let (_, h, w) = features.chw()?;
        if mask.dims() != (h, w) {
            return Err(FsError::shape(format!(
                "support {k}: mask {:?} vs feature grid {h}x{w}",
                mask.dims()
            )));
        }
        if mask.foreground_count() == 0 || mask.background_count() == 0 {
            return Err(FsError::DegenerateMask { support: Some(k) });
        }
    }
    Ok(())
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Generates `config.num_experts` experts starting from the mean pooled
/// class vector of the supports.
///
/// Each step evaluates every support with the current class vector, records
/// the mean support IoU and summed loss, and takes one optimizer step on the
/// summed loss. The stored experts are the pre-update iterates.
pub fn build_ensemble(
    params: &HeadParams,
    supports: &[(Tensor, BinaryMask)],
    r: &RelevanceVector,
    config: &BoostConfig,
) -> Result<Vec<Expert>> {
    config.validate()?;
    check_supports(supports)?;
    let weights = params.weights();
    let pooled = supports
        .iter()
        .map(|(f, m)| masked_pool(f, m))
        .collect::<Result<Vec<_>>>()?;
    let mut f = ClassVector::mean(&pooled)?;
    let prepared = supports
        .iter()
        .map(|(features, _)| PreparedInput::new(&weights, features, r))
        .collect::<Result<Vec<_>>>()?;

    let d = f.dim();
    let mut adam = AdamState {
        m: vec![0.0; d],
        v: vec![0.0; d],
        t: 0,
    };
    let k = supports.len() as f64;
    let mut experts = Vec::with_capacity(config.num_experts);
    for n in 0..config.num_experts {
        let fv = f.to_f64();
        let last = n + 1 == config.num_experts;
        let mut loss = 0.0;
        let mut confidence = 0.0;
        let mut grad = vec![0.0f64; d];
        for (p, (_, mask)) in prepared.iter().zip(supports) {
            let (sim, act) = p.run(&weights, &fv);
            let (l, dlogits) = act.loss_and_grad(mask);
            loss += l;
            let (_, fg) = split_probs(&act.logits, p.h * p.w);
            confidence += iou(&binarize(&fg, p.h, p.w)?, mask)?;
            if !last {
                let (dsim, _) = weights.backward(&act, &dlogits, &sim, None, true);
                let g = p.weighted.similarity_backward(&fv, &dsim.expect("requested"));
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        if !loss.is_finite() {
            if experts.is_empty() {
                return Err(FsError::NonFinite("support loss of the initial expert".into()));
            }
            log::warn!(
                "boosting diverged at expert {}; keeping the first {}",
                n + 1,
                experts.len()
            );
            break;
        }
        experts.push(Expert {
            f: f.clone(),
            confidence: confidence / k,
            support_loss: loss,
        });
        if last {
            break;
        }
        if !grad.iter().all(|g| g.is_finite()) {
            log::warn!("non-finite support gradient at expert {}; stopping", n + 1);
            break;
        }
        let next: Vec<f64> = match config.optimizer {
            Optimizer::Sgd => fv
                .iter()
                .zip(&grad)
                .map(|(x, g)| x - config.step_size * g)
                .collect(),
            Optimizer::Adam => {
                adam.t += 1;
                let bc1 = 1.0 - config.beta1.powi(adam.t);
                let bc2 = 1.0 - config.beta2.powi(adam.t);
                (0..d)
                    .map(|i| {
                        adam.m[i] = config.beta1 * adam.m[i] + (1.0 - config.beta1) * grad[i];
                        adam.v[i] = config.beta2 * adam.v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
                        let m_hat = adam.m[i] / bc1;
                        let v_hat = adam.v[i] / bc2;
                        fv[i] - config.step_size * m_hat / (v_hat.sqrt() + config.epsilon)
                    })
                    .collect()
            }
        };
        match ClassVector::from_f64(&next) {
            Ok(v) => f = v,
            Err(_) => {
                log::warn!(
                    "boosting update {} produced a non-finite class vector; keeping {} experts",
                    n + 1,
                    experts.len()
                );
                break;
            }
        }
    }
    Ok(experts)
}

/// Sort key that makes fusion independent of expert order.
fn expert_order(a: &Expert, b: &Expert) -> std::cmp::Ordering {
    a.confidence
        .total_cmp(&b.confidence)
        .then_with(|| {
            a.f.values()
                .iter()
                .zip(b.f.values())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .then_with(|| a.support_loss.total_cmp(&b.support_loss))
}

/// Confidence-weighted average of the experts' query probabilities,
/// thresholded at 0.5. Falls back to a plain average when the confidences
/// sum to (nearly) zero.
pub fn fuse(
    experts: &[Expert],
    query_features: &Tensor,
    r: &RelevanceVector,
    params: &HeadParams,
) -> Result<EnsembleResult> {
    if experts.is_empty() {
        return Err(FsError::Data("cannot fuse an empty ensemble".into()));
    }
    let weights = params.weights();
    let query = PreparedInput::new(&weights, query_features, r)?;
    for e in experts {
        if e.f.dim() != weights.d {
            return Err(FsError::shape(format!(
                "expert dim {} vs head dim {}",
                e.f.dim(),
                weights.d
            )));
        }
    }
    let members: Vec<(Vec<f64>, Vec<f64>)> = experts
        .iter()
        .map(|e| query.probs(&weights, &e.f.to_f64()))
        .collect();

    let mut order: Vec<usize> = (0..experts.len()).collect();
    order.sort_by(|&a, &b| expert_order(&experts[a], &experts[b]));
    // experts sharing a class vector predict the same thing; merge them so
    // that repeated iterates (e.g. a zero step size) fuse exactly
    let mut groups: Vec<(usize, f64, usize)> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some((rep, conf, count)) if experts[*rep].f == experts[i].f => {
                *conf += experts[i].confidence;
                *count += 1;
            }
            _ => groups.push((i, experts[i].confidence, 1)),
        }
    }
    let total: f64 = groups.iter().map(|g| g.1).sum();
    let n = experts.len() as f64;
    let weighted: Vec<(f64, &(Vec<f64>, Vec<f64>))> = groups
        .iter()
        .map(|&(rep, conf, count)| {
            let wt = if total < 1e-8 { count as f64 / n } else { conf / total };
            (wt, &members[rep])
        })
        .collect();
    let result = combine(&weighted, query.h, query.w)?;
    Ok(EnsembleResult {
        fused_probs: result.0,
        fused_binary: result.1,
        experts: experts.to_vec(),
        per_expert_query_probs: members.into_iter().map(|(_, fg)| fg).collect(),
    })
}

fn combine(parts: &[(f64, &(Vec<f64>, Vec<f64>))], h: usize, w: usize) -> Result<(Tensor, BinaryMask)> {
    let hw = h * w;
    let mut bg = vec![0.0f64; hw];
    let mut fg = vec![0.0f64; hw];
    for (wt, (pb, pf)) in parts {
        for i in 0..hw {
            bg[i] += wt * pb[i];
            fg[i] += wt * pf[i];
        }
    }
    let binary = binarize(&fg, h, w)?;
    bg.extend_from_slice(&fg);
    Ok((Tensor::from_f64(vec![2, h, w], &bg)?, binary))
}

/// One-shot inference without an ensemble. Matches a single-expert
/// [`fuse`] bit for bit.
pub fn base_inference(
    params: &HeadParams,
    f: &ClassVector,
    query_features: &Tensor,
    r: &RelevanceVector,
) -> Result<PredictedMask> {
    crate::head::predict(&params.weights(), f, query_features, r)
}

/// Independent per-support predictions averaged with equal weights.
///
/// Each support gets its own class vector and, with `use_relevance`, its own
/// relevance vector. With `boost`, each support is additionally expanded to
/// its own guided ensemble before averaging.
pub fn kshot_average_baseline(
    params: &HeadParams,
    supports: &[(Tensor, BinaryMask)],
    query_features: &Tensor,
    use_relevance: bool,
    boost: Option<&BoostConfig>,
) -> Result<EnsembleResult> {
    check_supports(supports)?;
    let (_, h, w) = query_features.chw()?;
    let mut members = Vec::with_capacity(supports.len());
    let mut experts = Vec::new();
    let mut per_support = Vec::with_capacity(supports.len());
    for (features, mask) in supports {
        let r = if use_relevance {
            relevance(&feature_difference(features, mask)?)?
        } else {
            RelevanceVector::uniform(features.chw()?.0)
        };
        let ensemble = match boost {
            Some(cfg) => build_ensemble(params, &[(features.clone(), mask.clone())], &r, cfg)?,
            None => vec![Expert {
                f: masked_pool(features, mask)?,
                confidence: 1.0,
                support_loss: 0.0,
            }],
        };
        let res = fuse(&ensemble, query_features, &r, params)?;
        let hw = h * w;
        let planes = (
            res.fused_probs.data()[..hw].iter().map(|&v| v as f64).collect::<Vec<_>>(),
            res.fused_probs.data()[hw..].iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        per_support.push(planes.1.clone());
        members.push(planes);
        experts.extend(res.experts);
    }
    let k = supports.len() as f64;
    let weighted: Vec<(f64, &(Vec<f64>, Vec<f64>))> = members.iter().map(|m| (1.0 / k, m)).collect();
    let (fused_probs, fused_binary) = combine(&weighted, h, w)?;
    Ok(EnsembleResult {
        fused_probs,
        fused_binary,
        experts,
        per_expert_query_probs: per_support,
    })
}
