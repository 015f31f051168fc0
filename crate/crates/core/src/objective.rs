//! Contrastive objective with hard positives.
//!
//! For anchor `i` with a hard-positive audio `j` and a hard-positive image `k`,
//! the positive responses are the masked responses of the pairs
//! `(A_i, V_i)`, `(A_j, V_i)`, `(A_i, V_k)` and `(A_j, V_k)`. The negative
//! aggregate sums `exp(mean response)` of `A_i` against each negative image.
//! The per-anchor loss is `-log(P / (P + N))` with `P` the sum of the
//! exponentiated positives. Dropping the three hard-positive terms gives the
//! baseline objective.

use std::collections::BTreeMap;

use crate::attention::{
    mean_response, masked_response, masked_response_grad_with_mask, pseudo_mask, response_map,
    response_map_grad, PseudoMask,
};
use crate::encoders::{
    backprop_audio, backprop_vision, encode_audio, encode_vision, AudioFeature, EncoderParams,
    VisionFeature,
};
use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::synthdata::Dataset;

/// Lower clamp on the `P / (P + N)` argument of the log.
pub const LOG_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseBundle {
    pub anchor: usize,
    pub hard_audio: Option<usize>,
    pub hard_vision: Option<usize>,
    pub p_b: f64,
    /// `None` when the term is dropped.
    pub p_a: Option<f64>,
    pub p_v: Option<f64>,
    pub p_c: Option<f64>,
    pub p_i: f64,
    pub n_i: f64,
}

impl ResponseBundle {
    pub fn new(p_b: f64, p_a: Option<f64>, p_v: Option<f64>, p_c: Option<f64>, n_i: f64) -> Self {
        let p_i = p_b.exp() + [p_a, p_v, p_c].iter().flatten().map(|p| p.exp()).sum::<f64>();
        Self {
            anchor: 0,
            hard_audio: None,
            hard_vision: None,
            p_b,
            p_a,
            p_v,
            p_c,
            p_i,
            n_i,
        }
    }

    /// Same bundle with only the base positive.
    pub fn without_hard_positives(&self) -> Self {
        Self {
            hard_audio: None,
            hard_vision: None,
            anchor: self.anchor,
            ..Self::new(self.p_b, None, None, None, self.n_i)
        }
    }

    fn is_finite(&self) -> bool {
        [self.p_b, self.p_i, self.n_i]
            .iter()
            .chain([self.p_a, self.p_v, self.p_c].iter().flatten())
            .all(|v| v.is_finite())
    }
}

/// `(p_b, p_a, p_v, p_c)` from the pairs `(i,i)`, `(j,i)`, `(i,k)`, `(j,k)`.
pub fn positive_responses(
    a_i: &AudioFeature,
    v_i: &VisionFeature,
    a_j: &AudioFeature,
    v_k: &VisionFeature,
    epsilon: f64,
    tau: f64,
) -> Result<[f64; 4]> {
    let term = |a: &AudioFeature, v: &VisionFeature| -> Result<f64> {
        let alpha = response_map(a, v)?;
        masked_response(&pseudo_mask(&alpha, epsilon, tau)?, &alpha)
    };
    Ok([term(a_i, v_i)?, term(a_j, v_i)?, term(a_i, v_k)?, term(a_j, v_k)?])
}

/// `Σ_l exp(mean(α(A_i, V_l)))`; zero for an empty set.
pub fn negative_response(a_i: &AudioFeature, negatives: &[&VisionFeature]) -> Result<f64> {
    negatives
        .iter()
        .map(|v| Ok(mean_response(&response_map(a_i, v)?).exp()))
        .sum()
}

/// `-log(p / (p + n))` with the argument clamped below at [`LOG_CLAMP`].
pub fn anchor_loss(p_i: f64, n_i: f64) -> f64 {
    let arg = p_i / (p_i + n_i);
    if arg < LOG_CLAMP {
        -LOG_CLAMP.ln()
    } else {
        (p_i + n_i).ln() - p_i.ln()
    }
}

fn mean_loss(bundles: &[ResponseBundle], drop_hard: bool) -> Result<f64> {
    if bundles.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for b in bundles {
        if !b.is_finite() {
            return Err(Error::NonFinite("response bundle"));
        }
        let p = if drop_hard { b.p_b.exp() } else { b.p_i };
        total += anchor_loss(p, b.n_i);
    }
    Ok(total / bundles.len() as f64)
}

/// Mean over the batch of `-log(P_i / (P_i + N_i))` with all present positive terms.
pub fn loss_hp(bundles: &[ResponseBundle]) -> Result<f64> {
    mean_loss(bundles, false)
}

/// Baseline loss: only the base positive `exp(p_b)` in the numerator.
pub fn loss_vanilla(bundles: &[ResponseBundle]) -> Result<f64> {
    mean_loss(bundles, true)
}

/// One anchor of a minibatch: dataset positions of the anchor, its sampled
/// hard positives (absent for the baseline) and the negatives it is contrasted with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub hard_audio: Option<usize>,
    pub hard_vision: Option<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub epsilon: f64,
    pub tau: f64,
    /// Treat the pseudo mask as a constant during backpropagation.
    pub stop_grad_mask: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            epsilon: crate::attention::DEFAULT_EPSILON,
            tau: crate::attention::DEFAULT_TAU,
            stop_grad_mask: false,
        }
    }
}

/// Result of evaluating the objective on a minibatch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub loss: f64,
    pub bundles: Vec<ResponseBundle>,
    pub grads: Option<EncoderParams>,
    /// Pseudo masks of the positive terms, per anchor in `b, a, v, c` order.
    pub masks: Vec<Vec<PseudoMask>>,
}

/// Loss of the plans without gradients.
pub fn batch_loss(params: &EncoderParams, data: &Dataset, plans: &[AnchorPlan], cfg: &ObjectiveConfig) -> Result<f64> {
    evaluate_batch(params, data, plans, cfg, false, None).map(|e| e.loss)
}

/// Loss and exact gradient with respect to every encoder parameter.
pub fn loss_grad(
    params: &EncoderParams,
    data: &Dataset,
    plans: &[AnchorPlan],
    cfg: &ObjectiveConfig,
) -> Result<(f64, EncoderParams)> {
    let eval = evaluate_batch(params, data, plans, cfg, true, None)?;
    let grads = eval.grads.expect("gradients requested");
    if !grads.is_finite() {
        return Err(Error::NonFinite("parameter gradient"));
    }
    Ok((eval.loss, grads))
}

#[derive(Default)]
struct FeatureCache {
    audio: BTreeMap<usize, AudioFeature>,
    vision: BTreeMap<usize, VisionFeature>,
}

impl FeatureCache {
    fn audio(&mut self, params: &EncoderParams, data: &Dataset, i: usize) -> Result<AudioFeature> {
        if let Some(a) = self.audio.get(&i) {
            return Ok(a.clone());
        }
        let a = encode_audio(params, &data.samples[i].audio)?;
        self.audio.insert(i, a.clone());
        Ok(a)
    }

    fn vision(&mut self, params: &EncoderParams, data: &Dataset, i: usize) -> Result<VisionFeature> {
        if let Some(v) = self.vision.get(&i) {
            return Ok(v.clone());
        }
        let v = encode_vision(params, &data.samples[i].image)?;
        self.vision.insert(i, v.clone());
        Ok(v)
    }
}

/// Full forward (and optionally backward) pass.
///
/// `frozen_masks`, when given, replaces the pseudo masks of the positive terms
/// by constants; gradients then never flow through the mask.
pub fn evaluate_batch(
    params: &EncoderParams,
    data: &Dataset,
    plans: &[AnchorPlan],
    cfg: &ObjectiveConfig,
    want_grad: bool,
    frozen_masks: Option<&[Vec<PseudoMask>]>,
) -> Result<BatchEval> {
    let n = data.len();
    for plan in plans {
        let ids = [Some(plan.anchor), plan.hard_audio, plan.hard_vision];
        if ids.iter().flatten().chain(&plan.negatives).any(|&x| x >= n) {
            return Err(Error::InvalidConfig(format!("plan for anchor {} indexes past the dataset", plan.anchor)));
        }
    }
    let mut cache = FeatureCache::default();
    let mut grad_audio: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut grad_vision: BTreeMap<usize, Grid3> = BTreeMap::new();
    let scale = if plans.is_empty() { 0.0 } else { 1.0 / plans.len() as f64 };
    let mut total = 0.0;
    let mut bundles = Vec::with_capacity(plans.len());
    let mut all_masks = Vec::with_capacity(plans.len());

    for (pi, plan) in plans.iter().enumerate() {
        let i = plan.anchor;
        // Positive pairs in b, a, v, c order as (audio index, vision index).
        let mut pairs = vec![(i, i)];
        if let Some(j) = plan.hard_audio {
            pairs.push((j, i));
        }
        if let Some(k) = plan.hard_vision {
            pairs.push((i, k));
        }
        if let (Some(j), Some(k)) = (plan.hard_audio, plan.hard_vision) {
            pairs.push((j, k));
        }

        let mut responses = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        for (t, &(x, y)) in pairs.iter().enumerate() {
            let a = cache.audio(params, data, x)?;
            let v = cache.vision(params, data, y)?;
            let alpha = response_map(&a, &v)?;
            let (mask, frozen) = match frozen_masks {
                Some(f) => (f[pi][t].clone(), true),
                None => (pseudo_mask(&alpha, cfg.epsilon, cfg.tau)?, false),
            };
            let (value, dvalue) =
                masked_response_grad_with_mask(&alpha, &mask, cfg.tau, cfg.stop_grad_mask || frozen)?;
            responses.push((value, dvalue));
            masks.push(mask);
        }

        let a_i = cache.audio(params, data, i)?;
        let mut neg_means = Vec::with_capacity(plan.negatives.len());
        for &l in &plan.negatives {
            let v = cache.vision(params, data, l)?;
            neg_means.push(mean_response(&response_map(&a_i, &v)?));
        }

        let p_exp: Vec<f64> = responses.iter().map(|(v, _)| v.exp()).collect();
        let n_exp: Vec<f64> = neg_means.iter().map(|m| m.exp()).collect();
        let p_sum: f64 = p_exp.iter().sum();
        let n_sum: f64 = n_exp.iter().sum();
        let loss = anchor_loss(p_sum, n_sum);
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        total += loss;

        let value_of = |t: Option<usize>| t.map(|t| responses[t].0);
        let (ta, tv, tc) = match (plan.hard_audio.is_some(), plan.hard_vision.is_some()) {
            (true, true) => (Some(1), Some(2), Some(3)),
            (true, false) => (Some(1), None, None),
            (false, true) => (None, Some(1), None),
            (false, false) => (None, None, None),
        };
        let mut bundle = ResponseBundle::new(responses[0].0, value_of(ta), value_of(tv), value_of(tc), n_sum);
        bundle.anchor = i;
        bundle.hard_audio = plan.hard_audio;
        bundle.hard_vision = plan.hard_vision;
        bundles.push(bundle);

        if want_grad && p_sum / (p_sum + n_sum) >= LOG_CLAMP {
            let d_p = -n_sum / (p_sum * (p_sum + n_sum)) * scale;
            let d_n = scale / (p_sum + n_sum);
            for (t, &(x, y)) in pairs.iter().enumerate() {
                let g = d_p * p_exp[t];
                if g == 0.0 {
                    continue;
                }
                let upstream: Vec<f64> = responses[t].1.iter().map(|d| g * d).collect();
                let a = cache.audio(params, data, x)?;
                let v = cache.vision(params, data, y)?;
                accumulate(&mut grad_audio, &mut grad_vision, x, y, &a, &v, &upstream)?;
            }
            for (&l, &e) in plan.negatives.iter().zip(&n_exp) {
                let v = cache.vision(params, data, l)?;
                let g = d_n * e / v.0.sites() as f64;
                let upstream = vec![g; v.0.sites()];
                accumulate(&mut grad_audio, &mut grad_vision, i, l, &a_i, &v, &upstream)?;
            }
        }
        all_masks.push(masks);
    }

    let grads = if want_grad {
        let mut grads = EncoderParams::zeros(params.shape)?;
        for (x, g) in &grad_audio {
            let a = &cache.audio[x];
            backprop_audio(params, &data.samples[*x].audio, a, g, &mut grads, false);
        }
        for (y, g) in &grad_vision {
            let v = &cache.vision[y];
            backprop_vision(params, &data.samples[*y].image, v, g, &mut grads, false);
        }
        Some(grads)
    } else {
        None
    };

    Ok(BatchEval {
        loss: total * scale,
        bundles,
        grads,
        masks: all_masks,
    })
}

fn accumulate(
    grad_audio: &mut BTreeMap<usize, Vec<f64>>,
    grad_vision: &mut BTreeMap<usize, Grid3>,
    x: usize,
    y: usize,
    a: &AudioFeature,
    v: &VisionFeature,
    upstream: &[f64],
) -> Result<()> {
    let (ga, gv) = response_map_grad(a, v, upstream)?;
    let acc = grad_audio.entry(x).or_insert_with(|| vec![0.0; ga.len()]);
    for (d, s) in acc.iter_mut().zip(&ga) {
        *d += s;
    }
    let acc = grad_vision
        .entry(y)
        .or_insert_with(|| Grid3::zeros(gv.channels, gv.height, gv.width));
    for (d, s) in acc.data.iter_mut().zip(&gv.data) {
        *d += s;
    }
    Ok(())
}
