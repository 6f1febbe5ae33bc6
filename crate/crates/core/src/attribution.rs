//! Localization maps from attention: plain rollout, gradient-weighted rollout
//! and the relevance-weighted variant.
//!
//! Every block contributes a factor `row_normalize(I + E_h(·))` and the
//! factors are multiplied deepest block first, `Â⁽ᴷ⁾ ··· Â⁽¹⁾`. The class
//! token row of the product, minus its own entry, is the patch map.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{self, GradStack};
use crate::error::{Error, Result};
use crate::model::{AttentionStack, ForwardOptions, Target, Vit};
use crate::tensor::{self, Tensor, TensorStack};

/// Per-block relevances for the softmax layers, `h×s×s` each.
pub type RelevanceStack = TensorStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSource {
    Ar,
    Gar,
    Lrp,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapSource::Ar => "ar",
            MapSource::Gar => "gar",
            MapSource::Lrp => "lrp",
        })
    }
}

impl FromStr for MapSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(MapSource::Ar),
            "gar" => Ok(MapSource::Gar),
            "lrp" => Ok(MapSource::Lrp),
            _ => Err(format!("unknown map method {s:?} (ar, gar, lrp)")),
        }
    }
}

/// Scalar whose gradient weights the attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradTarget {
    #[default]
    Logit,
    Probability,
}

impl GradTarget {
    pub fn for_class(self, class: usize) -> Target {
        match self {
            GradTarget::Logit => Target::Logit(class),
            GradTarget::Probability => Target::Probability(class),
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradTarget::Logit => "logit",
            GradTarget::Probability => "probability",
        })
    }
}

impl FromStr for GradTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logit" => Ok(GradTarget::Logit),
            "probability" | "prob" => Ok(GradTarget::Probability),
            _ => Err(format!("unknown gradient target {s:?} (logit, probability)")),
        }
    }
}

/// Where the negative-part clamp sits relative to the head mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClampOrder {
    /// `E_h(clamp(∇ ⊙ M))`
    #[default]
    BeforeMean,
    /// `clamp(E_h(∇ ⊙ M))`
    AfterMean,
}

impl FromStr for ClampOrder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "before_mean" => Ok(ClampOrder::BeforeMean),
            "after_mean" => Ok(ClampOrder::AfterMean),
            _ => Err(format!("unknown clamp order {s:?} (before_mean, after_mean)")),
        }
    }
}

impl fmt::Display for ClampOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClampOrder::BeforeMean => "before_mean",
            ClampOrder::AfterMean => "after_mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutOptions {
    pub clamp: ClampOrder,
    /// Row-normalize each `I + E_h(·)` factor.
    pub normalize: bool,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            clamp: ClampOrder::BeforeMean,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    /// `g×g`, row-major in patch order.
    pub grid: Tensor,
    pub source: MapSource,
    pub target_class: Option<usize>,
}

impl LocalizationMap {
    pub fn size(&self) -> usize {
        self.grid.shape()[0]
    }
}

fn check_square_stack(stack: &TensorStack, what: &str) -> Result<usize> {
    if stack.depth() == 0 {
        return Err(Error::invalid(format!("{what} stack is empty")));
    }
    let mut s = None;
    for t in stack.blocks() {
        match t.shape() {
            [_, a, b] if a == b && s.is_none_or(|s| s == *a) => s = Some(*a),
            other => {
                return Err(Error::shape(format!(
                    "{what} blocks must share an h×s×s shape, got {other:?}"
                )))
            }
        }
    }
    Ok(s.expect("nonempty"))
}

fn rollout_product(factors: impl Iterator<Item = Result<Tensor>>, s: usize) -> Result<Tensor> {
    let mut acc = Tensor::identity(s);
    for f in factors {
        acc = tensor::matmul(&f?, &acc)?;
    }
    Ok(acc)
}

fn block_factor(mean: Tensor, normalize: bool) -> Result<Tensor> {
    let s = mean.shape()[0];
    let mut m = mean;
    for i in 0..s {
        m.data_mut()[i * s + i] += 1.0;
    }
    if normalize {
        tensor::row_normalize(&m)
    } else {
        Ok(m)
    }
}

/// Plain attention rollout.
pub fn attention_rollout(attn: &AttentionStack) -> Result<Tensor> {
    attention_rollout_with(attn, true)
}

pub fn attention_rollout_with(attn: &AttentionStack, normalize: bool) -> Result<Tensor> {
    let s = check_square_stack(attn, "attention")?;
    rollout_product(
        attn.blocks()
            .iter()
            .map(|m| block_factor(tensor::mean_leading(m)?, normalize)),
        s,
    )
}

/// Head mean of the positive part of `grad ⊙ weight`.
fn weighted_mean(grad: &Tensor, weight: &Tensor, clamp: ClampOrder) -> Result<Tensor> {
    if grad.shape() != weight.shape() {
        return Err(Error::shape(format!(
            "gradient {:?} vs weight {:?}",
            grad.shape(),
            weight.shape()
        )));
    }
    let prod: Vec<f64> = grad
        .data()
        .iter()
        .zip(weight.data())
        .map(|(g, w)| {
            let v = g * w;
            match clamp {
                ClampOrder::BeforeMean => v.max(0.0),
                ClampOrder::AfterMean => v,
            }
        })
        .collect();
    let mean = tensor::mean_leading(&Tensor::from_parts(grad.shape().to_vec(), prod))?;
    Ok(match clamp {
        ClampOrder::BeforeMean => mean,
        ClampOrder::AfterMean => mean.map(|v| v.max(0.0)),
    })
}

fn weighted_rollout(
    grads: &GradStack,
    weights: &TensorStack,
    opts: &RolloutOptions,
    what: &str,
) -> Result<Tensor> {
    let s = check_square_stack(weights, what)?;
    weights.check_matches(grads)?;
    rollout_product(
        grads
            .blocks()
            .iter()
            .zip(weights.blocks())
            .map(|(g, w)| block_factor(weighted_mean(g, w, opts.clamp)?, opts.normalize)),
        s,
    )
}

/// Gradient-weighted rollout with the default options.
pub fn grad_attention_rollout(attn: &AttentionStack, grads: &GradStack) -> Result<Tensor> {
    grad_attention_rollout_with(attn, grads, &RolloutOptions::default())
}

pub fn grad_attention_rollout_with(
    attn: &AttentionStack,
    grads: &GradStack,
    opts: &RolloutOptions,
) -> Result<Tensor> {
    weighted_rollout(grads, attn, opts, "attention")
}

/// Rollout of `clamp(∇M ⊙ R)` with caller-supplied relevances.
pub fn relevance_rollout(grads: &GradStack, relevances: Option<&RelevanceStack>) -> Result<Tensor> {
    relevance_rollout_with(grads, relevances, &RolloutOptions::default())
}

pub fn relevance_rollout_with(
    grads: &GradStack,
    relevances: Option<&RelevanceStack>,
    opts: &RolloutOptions,
) -> Result<Tensor> {
    let rel = relevances.ok_or_else(|| Error::invalid("relevance stack is required"))?;
    weighted_rollout(grads, rel, opts, "relevance")
}

/// Row 0 of the rollout without its first entry, as a `g×g` grid.
pub fn extract_cls_map(
    rollout: &Tensor,
    source: MapSource,
    target_class: Option<usize>,
) -> Result<LocalizationMap> {
    let (s, s2) = rollout.dims2()?;
    if s != s2 || s < 2 {
        return Err(Error::shape(format!("rollout must be s×s, got {s}×{s2}")));
    }
    let n = s - 1;
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::shape(format!("s−1 = {n} is not a perfect square")));
    }
    let grid = Tensor::new(vec![g, g], rollout.row(0)[1..].to_vec())?;
    Ok(LocalizationMap {
        grid,
        source,
        target_class,
    })
}

/// Bilinear resize with aligned corners, so corner values are kept exactly and
/// constant maps stay constant.
pub fn upsample_map(map: &Tensor, out_size: usize) -> Result<Tensor> {
    let (gh, gw) = map.dims2()?;
    if out_size == 0 || out_size < gh.max(gw) {
        return Err(Error::invalid(format!(
            "output size {out_size} smaller than the {gh}×{gw} map"
        )));
    }
    let coords = |g: usize| -> Vec<(usize, usize, f64)> {
        (0..out_size)
            .map(|o| {
                if g == 1 || out_size == 1 {
                    return (0, 0, 0.0);
                }
                let pos = o as f64 * (g - 1) as f64 / (out_size - 1) as f64;
                let lo = (pos.floor() as usize).min(g - 2);
                (lo, lo + 1, pos - lo as f64)
            })
            .collect()
    };
    let ys = coords(gh);
    let xs = coords(gw);
    let mut out = Vec::with_capacity(out_size * out_size);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = map.get2(y0, x0) * (1.0 - fx) + map.get2(y0, x1) * fx;
            let bot = map.get2(y1, x0) * (1.0 - fx) + map.get2(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(Tensor::from_parts(vec![out_size, out_size], out))
}

/// Map method for a whole image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapOptions {
    pub source: MapSource,
    pub grad_target: GradTarget,
    pub rollout: RolloutOptions,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            source: MapSource::Gar,
            grad_target: GradTarget::Logit,
            rollout: RolloutOptions::default(),
        }
    }
}

/// Everything one eval forward yields for localization.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub map: LocalizationMap,
    pub attention: AttentionStack,
    pub gradients: Option<GradStack>,
}

/// Runs the model on `image` and builds the map for `class` (the predicted
/// class when `None`). AR ignores the class.
pub fn explain(vit: &Vit, image: &Tensor, class: Option<usize>, opts: &MapOptions) -> Result<Explanation> {
    match opts.source {
        MapSource::Ar => {
            let r = vit.forward(image, None)?;
            let predicted = crate::model::argmax(&r.logits);
            let rollout = attention_rollout_with(&r.attention, opts.rollout.normalize)?;
            Ok(Explanation {
                map: extract_cls_map(&rollout, MapSource::Ar, None)?,
                predicted,
                logits: r.logits,
                attention: r.attention,
                gradients: None,
            })
        }
        MapSource::Gar => {
            // the logits do not depend on the target, so predict first when needed
            let (class, mut r) = match class {
                Some(c) => {
                    let target = opts.grad_target.for_class(c);
                    let r = vit.forward_with(image, &ForwardOptions { target: Some(target), ..Default::default() })?;
                    (c, r)
                }
                None => {
                    let r = vit.forward(image, None)?;
                    let c = crate::model::argmax(&r.logits);
                    let target = opts.grad_target.for_class(c);
                    let r = vit.forward_with(image, &ForwardOptions { target: Some(target), ..Default::default() })?;
                    (c, r)
                }
            };
            let out = r.target_node.take().expect("target recorded");
            let grads = autodiff::backward_attention_grads(&r.tape, out)?;
            let rollout = grad_attention_rollout_with(&r.attention, &grads, &opts.rollout)?;
            Ok(Explanation {
                map: extract_cls_map(&rollout, MapSource::Gar, Some(class))?,
                predicted: crate::model::argmax(&r.logits),
                logits: r.logits,
                attention: r.attention,
                gradients: Some(grads),
            })
        }
        MapSource::Lrp => Err(Error::invalid(
            "relevance maps need externally supplied relevances; use relevance_rollout",
        )),
    }
}
