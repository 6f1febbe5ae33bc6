//! Central-difference oracle for the attention gradients.
//!
//! Each attention entry of block `b` is perturbed on its own through
//! [`Injection::Block`]; later blocks recompute their attention from the
//! perturbed activations, so the result is the same total derivative that the
//! tape returns.

use rand_distr::{Distribution, Normal};

use crate::attribution::GradTarget;
use crate::autodiff::{self, GradStack};
use crate::error::{Error, Result};
use crate::model::{AttentionStack, ForwardOptions, Injection, Target, Vit};
use crate::seed;
use crate::tensor::{Tensor, TensorStack};

fn scalar(vit: &Vit, image: &Tensor, target: Target, injection: Injection<'_>) -> Result<f64> {
    let r = vit.forward_with(
        image,
        &ForwardOptions {
            injection,
            ..Default::default()
        },
    )?;
    Ok(match target {
        Target::Logit(c) => r.logits[c],
        Target::Probability(c) => {
            let p = crate::tensor::softmax_rows(&Tensor::vector(r.logits)?)?;
            p.data()[c]
        }
        Target::Loss(c) => {
            let p = crate::tensor::softmax_rows(&Tensor::vector(r.logits)?)?;
            -p.data()[c].ln()
        }
    })
}

/// `(f(M+εE) − f(M−εE)) / 2ε` for every attention entry, `f` the class logit.
pub fn finite_difference_attention_grads(
    vit: &Vit,
    image: &Tensor,
    class: usize,
    eps: f64,
) -> Result<GradStack> {
    finite_difference_for(vit, image, Target::Logit(class), eps)
}

pub fn finite_difference_for(vit: &Vit, image: &Tensor, target: Target, eps: f64) -> Result<GradStack> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
    }
    let c = target.class();
    if c >= vit.config.num_classes {
        return Err(Error::invalid(format!("class {c} out of range")));
    }
    let recorded = vit.forward(image, None)?.attention;
    let mut grads = Vec::with_capacity(recorded.depth());
    for (b, base) in recorded.blocks().iter().enumerate() {
        let mut g = Tensor::zeros(base.shape());
        let mut probe = base.clone();
        for k in 0..base.len() {
            let orig = probe.data()[k];
            probe.data_mut()[k] = orig + eps;
            let up = scalar(vit, image, target, Injection::Block(b, &probe))?;
            probe.data_mut()[k] = orig - eps;
            let down = scalar(vit, image, target, Injection::Block(b, &probe))?;
            probe.data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(TensorStack::new(grads))
}

/// Recorded attention and its tape gradients for one image and target.
pub fn analytic_attention_grads(
    vit: &Vit,
    image: &Tensor,
    target: Target,
    sabotage_softmax: bool,
) -> Result<(AttentionStack, GradStack)> {
    let r = vit.forward_with(
        image,
        &ForwardOptions {
            target: Some(target),
            sabotage_softmax,
            ..Default::default()
        },
    )?;
    let out = r.target_node.expect("target recorded");
    let grads = autodiff::backward_attention_grads(&r.tape, out)?;
    Ok((r.attention, grads))
}

/// Location of an entry inside a gradient stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub block: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<Entry>,
    /// Largest magnitude in the reference stack.
    pub scale: f64,
}

/// Relative error `|a−b| / max(|a|, |b|, floor·scale)`, `scale` the largest
/// reference magnitude. The floor keeps entries that are zero up to rounding
/// from dominating the maximum.
pub fn compare(analytic: &GradStack, reference: &GradStack, floor: f64) -> Result<Comparison> {
    analytic.check_matches(reference)?;
    let scale = reference
        .blocks()
        .iter()
        .map(Tensor::max_abs)
        .fold(0.0, f64::max);
    let tiny = floor * scale;
    let mut out = Comparison {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        scale,
    };
    for (b, (ta, tr)) in analytic.blocks().iter().zip(reference.blocks()).enumerate() {
        let s = ta.shape()[2];
        for (k, (&a, &r)) in ta.data().iter().zip(tr.data()).enumerate() {
            let diff = (a - r).abs();
            let denom = a.abs().max(r.abs()).max(tiny);
            let rel = if denom > 0.0 { diff / denom } else { 0.0 };
            out.max_abs_error = out.max_abs_error.max(diff);
            if rel > out.max_rel_error || out.worst.is_none() {
                out.max_rel_error = rel;
                out.worst = Some(Entry {
                    block: b,
                    head: k / (s * s),
                    row: k / s % s,
                    col: k % s,
                });
            }
        }
    }
    Ok(out)
}

/// Default floor for [`compare`].
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub comparison: Comparison,
    pub analytic: GradStack,
    pub numeric: GradStack,
}

pub fn check(
    vit: &Vit,
    image: &Tensor,
    class: usize,
    target: GradTarget,
    eps: f64,
    sabotage_softmax: bool,
) -> Result<GradCheckReport> {
    let t = target.for_class(class);
    let (_, analytic) = analytic_attention_grads(vit, image, t, sabotage_softmax)?;
    let numeric = finite_difference_for(vit, image, t, eps)?;
    let comparison = compare(&analytic, &numeric, REL_FLOOR)?;
    Ok(GradCheckReport {
        comparison,
        analytic,
        numeric,
    })
}

/// Redraws every weight from `N(0, std²)` (gains around 1) so that a freshly
/// initialised toy model has gradients well away from rounding noise.
pub fn scramble_params(vit: &mut Vit, seed_value: u64, std: f64) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = seed::rng(&[seed_value, 0x6ead]);
    let names: Vec<String> = vit.params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(vit.params.tensors_mut()) {
        let gain = name.starts_with("norm") || name.contains(".norm");
        let gain = gain && name.ends_with(".weight");
        for v in t.data_mut() {
            let z: f64 = normal.sample(&mut rng);
            *v = if gain { 1.0 + z } else { z };
        }
    }
    Ok(())
}

/// Deterministic test image in `[0, 1)`.
pub fn random_image(cfg: &crate::model::ModelConfig, seed_value: u64) -> Tensor {
    use rand::Rng;
    let mut rng = seed::rng(&[seed_value, 0x1a9e]);
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let data = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::from_parts(vec![cfg.image_size, cfg.image_size, cfg.channels], data)
}
