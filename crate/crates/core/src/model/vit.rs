//! Vision transformer with recorded attention and p-ADL insertion points.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ModelConfig, PadlPosition};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::padl::{self, Branch, Mode, PadlIntermediate, PadlParams};
use crate::seed;
use crate::tensor::{Tensor, TensorStack};

/// Per-block attention probabilities, each `h×s×s`.
pub type AttentionStack = TensorStack;

const INIT_STD: f64 = 0.02;

/// Truncated normal at ±2σ.
fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    /// `d×3d`, columns ordered Q | K | V, heads contiguous inside each.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

const BLOCK_FIELDS: [&str; 12] = [
    "norm1.weight",
    "norm1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.weight",
    "norm2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl BlockParams {
    fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        BlockParams {
            norm1_gain: Tensor::full(&[d], 1.0),
            norm1_bias: Tensor::zeros(&[d]),
            qkv_weight: trunc_normal(rng, &[d, 3 * d], INIT_STD),
            qkv_bias: Tensor::zeros(&[3 * d]),
            proj_weight: trunc_normal(rng, &[d, d], INIT_STD),
            proj_bias: Tensor::zeros(&[d]),
            norm2_gain: Tensor::full(&[d], 1.0),
            norm2_bias: Tensor::zeros(&[d]),
            fc1_weight: trunc_normal(rng, &[d, hidden], INIT_STD),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: trunc_normal(rng, &[hidden, d], INIT_STD),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.qkv_weight,
            &self.qkv_bias,
            &self.proj_weight,
            &self.proj_bias,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    /// Zeroes every attention and MLP weight and bias, leaving the residual path.
    pub fn zero_branches(&mut self) {
        for t in [
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ] {
            t.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitParams {
    /// `P·P·C × d`
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    /// `1×d`
    pub cls_token: Tensor,
    /// `s×d`
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    /// `d × num_classes`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl VitParams {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = seed::rng(&[cfg.seed, 0x1417]);
        let d = cfg.embed_dim;
        let patch_weight = trunc_normal(&mut rng, &[cfg.patch_dim(), d], INIT_STD);
        let pos_embed = trunc_normal(&mut rng, &[cfg.seq_len(), d], INIT_STD);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams::init(cfg, &mut rng))
            .collect();
        let head_weight = trunc_normal(&mut rng, &[d, cfg.num_classes], INIT_STD);
        VitParams {
            patch_weight,
            patch_bias: Tensor::zeros(&[d]),
            cls_token: Tensor::zeros(&[1, d]),
            pos_embed,
            blocks,
            norm_gain: Tensor::full(&[d], 1.0),
            norm_bias: Tensor::zeros(&[d]),
            head_weight,
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        }
    }

    /// All parameters in checkpoint order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (b, block) in self.blocks.iter().enumerate() {
            for (field, t) in BLOCK_FIELDS.iter().zip(block.tensors()) {
                out.push((format!("blocks.{b}.{field}"), t));
            }
        }
        out.push(("norm.weight".to_string(), &self.norm_gain));
        out.push(("norm.bias".to_string(), &self.norm_bias));
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Mutable view in the same order as [`VitParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for block in &mut self.blocks {
            out.extend(block.tensors_mut());
        }
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_tensors(&self) -> usize {
        8 + 12 * self.blocks.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Node ids of the parameters as pushed onto a tape.
struct ParamNodes {
    ids: Vec<NodeId>,
}

impl ParamNodes {
    fn push(tape: &mut Tape, params: &VitParams, trainable: bool) -> Self {
        let ids = params
            .named()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        ParamNodes { ids }
    }

    fn stem(&self) -> (NodeId, NodeId, NodeId, NodeId) {
        (self.ids[0], self.ids[1], self.ids[2], self.ids[3])
    }

    fn block(&self, b: usize) -> &[NodeId] {
        &self.ids[4 + 12 * b..4 + 12 * (b + 1)]
    }

    fn tail(&self) -> &[NodeId] {
        &self.ids[self.ids.len() - 4..]
    }
}

/// Which attention probabilities to replace during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub enum Injection<'a> {
    #[default]
    None,
    /// Every block uses the given probabilities.
    Full(&'a AttentionStack),
    /// Only block `b` uses the given `h×s×s` probabilities.
    Block(usize, &'a Tensor),
}

/// Scalar to differentiate, recorded on the tape after the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Pre-softmax logit of a class.
    Logit(usize),
    /// Post-softmax probability of a class.
    Probability(usize),
    /// Cross-entropy against a label.
    Loss(usize),
}

impl Target {
    pub fn class(self) -> usize {
        match self {
            Target::Logit(c) | Target::Probability(c) | Target::Loss(c) => c,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub target: Option<Target>,
    pub injection: Injection<'a>,
    /// Seed of the per-forward p-ADL stream; block `b` draws from `(seed, b)`.
    pub padl_seed: u64,
    /// Whether parameters get gradients (training).
    pub trainable: bool,
    pub sabotage_softmax: bool,
}

impl Default for ForwardOptions<'_> {
    fn default() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            target: None,
            injection: Injection::None,
            padl_seed: 0,
            trainable: false,
            sabotage_softmax: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub attention: AttentionStack,
    /// Output embeddings of the last block, `s×d`.
    pub final_embeddings: Tensor,
    pub tape: Tape,
    pub target_node: Option<NodeId>,
    pub logits_node: NodeId,
    /// p-ADL intermediates per block (train mode only).
    pub padl: Vec<Option<PadlIntermediate>>,
    param_nodes: Vec<NodeId>,
}

impl ForwardResult {
    /// Tape nodes of the parameters, in [`VitParams::named`] order.
    pub fn param_nodes(&self) -> &[NodeId] {
        &self.param_nodes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub params: VitParams,
}

/// Splits an `H×W×C` image into raster-ordered flattened `P×P×C` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::shape(format!("image must be H×W×C, got {s:?}"))),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}×{w} is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * plen);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..patch {
                let row = (py * patch + y) * w + px * patch;
                out.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![gh * gw, plen], out))
}

/// Predicted class: arg-max with the lowest index winning ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn classify(result: &ForwardResult) -> (usize, &[f64]) {
    (argmax(&result.logits), &result.logits)
}

impl Vit {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = VitParams::init(&config);
        Ok(Vit { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: VitParams) -> Result<Self> {
        config.validate()?;
        let expected = VitParams::expected_shapes(&config);
        let got: Vec<_> = params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected != got {
            return Err(Error::shape("parameter shapes do not match the model config"));
        }
        Ok(Vit { config, params })
    }

    fn padl_params(&self) -> PadlParams {
        PadlParams {
            drop_threshold: self.config.padl_drop_threshold,
            drop_rate: self.config.padl_embedding_drop_rate,
            exempt_cls: self.config.padl_exempt_cls,
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.image_size, c.image_size, c.channels];
        if image.shape() != want {
            return Err(Error::shape(format!(
                "image shape {:?}, model expects {want:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Eval-mode forward, optionally recording a class-logit target.
    pub fn forward(&self, image: &Tensor, target_class: Option<usize>) -> Result<ForwardResult> {
        self.forward_with(
            image,
            &ForwardOptions {
                target: target_class.map(Target::Logit),
                ..Default::default()
            },
        )
    }

    pub fn forward_with(&self, image: &Tensor, opts: &ForwardOptions<'_>) -> Result<ForwardResult> {
        self.check_image(image)?;
        let cfg = &self.config;
        match opts.injection {
            Injection::None => {}
            Injection::Full(stack) => {
                if stack.depth() != cfg.depth {
                    return Err(Error::shape(format!(
                        "injected stack has {} blocks, model has {}",
                        stack.depth(),
                        cfg.depth
                    )));
                }
                for t in stack.blocks() {
                    self.check_attention_shape(t)?;
                }
            }
            Injection::Block(b, t) => {
                if b >= cfg.depth {
                    return Err(Error::shape(format!("injected block {b} out of range")));
                }
                self.check_attention_shape(t)?;
            }
        }
        if let Some(c) = opts.target.map(Target::class) {
            if c >= cfg.num_classes {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
        }

        let mut tape = Tape::new();
        tape.set_softmax_jacobian_sabotage(opts.sabotage_softmax);
        let nodes = ParamNodes::push(&mut tape, &self.params, opts.trainable);

        let patches = tape.leaf(patchify(image, cfg.patch_size)?);
        let mut x = self.record_embed(&mut tape, &nodes, patches)?;

        let mut padl_log = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let injected = match opts.injection {
                Injection::Full(stack) => Some(&stack.blocks()[b]),
                Injection::Block(ib, t) if ib == b => Some(t),
                _ => None,
            };
            let mut rng = seed::rng(&[opts.padl_seed, b as u64]);
            let (out, inter) =
                self.record_block(&mut tape, nodes.block(b), x, opts.mode, &mut rng, injected)?;
            x = out;
            padl_log.push(inter);
        }
        let final_embeddings = tape.value(x).clone();

        let tail = nodes.tail();
        let normed = tape.layer_norm(x, tail[0], tail[1])?;
        let cls = tape.select_row(normed, 0)?;
        let logits_raw = tape.matmul(cls, tail[2])?;
        let logits_node = tape.add_row(logits_raw, tail[3])?;

        let target_node = match opts.target {
            None => None,
            Some(Target::Logit(c)) => Some(tape.entry(logits_node, c)?),
            Some(Target::Probability(c)) => {
                let p = tape.softmax_rows(logits_node)?;
                Some(tape.entry(p, c)?)
            }
            Some(Target::Loss(c)) => Some(tape.cross_entropy(logits_node, c)?),
        };

        let logits = tape.value(logits_node).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        let attention = TensorStack::new(
            tape.watched()
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
        );
        Ok(ForwardResult {
            logits,
            attention,
            final_embeddings,
            tape,
            target_node,
            logits_node,
            padl: padl_log,
            param_nodes: nodes.ids,
        })
    }

    fn check_attention_shape(&self, t: &Tensor) -> Result<()> {
        let s = self.config.seq_len();
        let want = [self.config.heads, s, s];
        if t.shape() != want {
            return Err(Error::shape(format!(
                "injected attention {:?}, expected {want:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    fn record_embed(&self, tape: &mut Tape, nodes: &ParamNodes, patches: NodeId) -> Result<NodeId> {
        let (w, bias, cls, pos) = nodes.stem();
        let proj = tape.matmul(patches, w)?;
        let proj = tape.add_row(proj, bias)?;
        let seq = tape.concat_rows(vec![cls, proj])?;
        tape.add(seq, pos)
    }

    fn record_padl<R: Rng>(
        &self,
        tape: &mut Tape,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(NodeId, Option<PadlIntermediate>)> {
        if mode == Mode::Eval {
            return Ok((x, None));
        }
        let params = self.padl_params();
        let branch = padl::choose_branch(rng, params.drop_rate);
        let mean = padl::mean_attention(tape.value(x))?;
        let out = match branch {
            Branch::Drop => tape.scale_rows(x, padl::drop_scale(&mean, &params))?,
            Branch::Importance => tape.importance_scale(x, params.exempt_cls)?,
        };
        let inter = PadlIntermediate {
            importance_map: padl::importance_map(&mean),
            drop_mask: padl::drop_mask(&mean, params.drop_threshold),
            mean_attention: mean,
            branch,
        };
        Ok((out, Some(inter)))
    }

    /// Pre-norm encoder block. Returns the output node; the attention
    /// probabilities are watched on the tape.
    fn record_block<R: Rng>(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        x: NodeId,
        mode: Mode,
        rng: &mut R,
        injected: Option<&Tensor>,
    ) -> Result<(NodeId, Option<PadlIntermediate>)> {
        let cfg = &self.config;
        let (d, h, dh) = (cfg.embed_dim, cfg.heads, cfg.head_dim());

        let n1 = tape.layer_norm(x, p[0], p[1])?;
        let qkv = tape.matmul(n1, p[2])?;
        let qkv = tape.add_row(qkv, p[3])?;

        let probs = match injected {
            Some(t) => tape.leaf(t.clone()),
            None => {
                let mut heads = Vec::with_capacity(h);
                for i in 0..h {
                    let q = tape.slice_cols(qkv, i * dh, dh)?;
                    let k = tape.slice_cols(qkv, d + i * dh, dh)?;
                    let mut scores = tape.matmul_bt(q, k)?;
                    if cfg.scale_attention {
                        scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                    }
                    heads.push(tape.softmax_rows(scores)?);
                }
                tape.stack(heads)?
            }
        };
        tape.watch(probs);

        let mut z = Vec::with_capacity(h);
        for i in 0..h {
            let v = tape.slice_cols(qkv, 2 * d + i * dh, dh)?;
            let a = tape.slab(probs, i)?;
            z.push(tape.matmul(a, v)?);
        }
        let z = tape.concat_cols(z)?;
        let attn = tape.matmul(z, p[4])?;
        let attn = tape.add_row(attn, p[5])?;
        let mut x = tape.add(x, attn)?;

        let mut inter = None;
        if cfg.padl_position == PadlPosition::BetweenMsaMlp {
            (x, inter) = self.record_padl(tape, x, mode, rng)?;
        }

        let n2 = tape.layer_norm(x, p[6], p[7])?;
        let hid = tape.matmul(n2, p[8])?;
        let hid = tape.add_row(hid, p[9])?;
        let hid = tape.gelu(hid)?;
        let mlp = tape.matmul(hid, p[10])?;
        let mlp = tape.add_row(mlp, p[11])?;
        x = tape.add(x, mlp)?;

        if cfg.padl_position == PadlPosition::AfterMlp {
            (x, inter) = self.record_padl(tape, x, mode, rng)?;
        }
        Ok((x, inter))
    }

    /// Patch embedding, class token and positions: `O⁽⁰⁾`, `s×d`.
    pub fn embed(&self, patches: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (n, plen) = patches.dims2()?;
        if n + 1 != cfg.seq_len() || plen != cfg.patch_dim() {
            return Err(Error::shape(format!(
                "{n} patches of length {plen}; model expects {} of length {}",
                cfg.num_patches(),
                cfg.patch_dim()
            )));
        }
        let mut tape = Tape::new();
        let nodes = ParamNodes::push(&mut tape, &self.params, false);
        let p = tape.leaf(patches.clone());
        let out = self.record_embed(&mut tape, &nodes, p)?;
        Ok(tape.value(out).clone())
    }

    /// One encoder block on its own: `(O_out, M_att)`.
    pub fn encoder_block_forward<R: Rng>(
        &self,
        block: usize,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor)> {
        if block >= self.config.depth {
            return Err(Error::invalid(format!("block {block} out of range")));
        }
        let s = self.config.seq_len();
        if input.shape() != [s, self.config.embed_dim] {
            return Err(Error::shape(format!("block input {:?}", input.shape())));
        }
        if !input.is_finite() {
            return Err(Error::invalid("non-finite block input"));
        }
        let mut tape = Tape::new();
        let nodes = ParamNodes::push(&mut tape, &self.params, false);
        let x = tape.leaf(input.clone());
        let (out, _) = self.record_block(&mut tape, nodes.block(block), x, mode, rng, None)?;
        let att = tape.watched()[0];
        Ok((tape.value(out).clone(), tape.value(att).clone()))
    }
}

impl VitParams {
    /// Expected `(name, shape)` list for a config, in checkpoint order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let hidden = cfg.mlp_hidden();
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![cfg.seq_len(), d]),
        ];
        let block_shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, hidden],
            vec![hidden],
            vec![hidden, d],
            vec![d],
        ];
        for b in 0..cfg.depth {
            for (field, shape) in BLOCK_FIELDS.iter().zip(&block_shapes) {
                out.push((format!("blocks.{b}.{field}"), shape.clone()));
            }
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push(("norm.bias".to_string(), vec![d]));
        out.push(("head.weight".to_string(), vec![d, cfg.num_classes]));
        out.push(("head.bias".to_string(), vec![cfg.num_classes]));
        out
    }
}

/// Sum of each attention row, for invariant checks.
pub fn attention_row_sums(att: &Tensor) -> Vec<f64> {
    let s = *att.shape().last().expect("rank >= 1");
    att.data().chunks_exact(s).map(|r| r.iter().sum()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(cfg: &ModelConfig, s: u64) -> Tensor {
        let mut rng = seed::rng(&[s]);
        let n = cfg.image_size * cfg.image_size * cfg.channels;
        Tensor::new(
            vec![cfg.image_size, cfg.image_size, cfg.channels],
            (0..n).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patchify_examples() {
        let img = Tensor::zeros(&[224, 224, 3]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[196, 768]);
        let img = Tensor::zeros(&[64, 64, 3]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[64, 192]);
        let img = Tensor::zeros(&[65, 65, 3]);
        assert!(patchify(&img, 8).is_err());
    }

    #[test]
    fn patchify_is_a_raster_permutation() {
        // 4×4 single channel, value = y*4+x
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        let mut all = p.data().to_vec();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, img.data());
    }

    #[test]
    fn embed_zero_image_gives_positions() {
        let mut vit = Vit::new(ModelConfig::toy()).unwrap();
        vit.params.patch_weight.data_mut().fill(0.0);
        let cfg = &vit.config;
        let patches = Tensor::zeros(&[cfg.num_patches(), cfg.patch_dim()]);
        let o = vit.embed(&patches).unwrap();
        assert_eq!(o, vit.params.pos_embed);
        assert!(vit.embed(&Tensor::zeros(&[3, cfg.patch_dim()])).is_err());
    }

    #[test]
    fn embed_swapping_patches_swaps_rows() {
        let mut vit = Vit::new(ModelConfig::toy()).unwrap();
        vit.params.pos_embed.data_mut().fill(0.0);
        let cfg = vit.config.clone();
        let img = random_image(&cfg, 1);
        let p = patchify(&img, cfg.patch_size).unwrap();
        let mut rows: Vec<Vec<f64>> = (0..cfg.num_patches()).map(|i| p.row(i).to_vec()).collect();
        rows.swap(0, 3);
        let swapped = Tensor::from_rows(&rows).unwrap();
        let a = vit.embed(&p).unwrap();
        let b = vit.embed(&swapped).unwrap();
        assert_eq!(a.row(1), b.row(4));
        assert_eq!(a.row(4), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(0), b.row(0));
    }

    #[test]
    fn deit_base_embedding_shape() {
        let cfg = ModelConfig::deit_base();
        let vit = Vit::new(cfg.clone()).unwrap();
        let o = vit
            .embed(&Tensor::zeros(&[cfg.num_patches(), cfg.patch_dim()]))
            .unwrap();
        assert_eq!(o.shape(), &[197, 768]);
    }

    #[test]
    fn eval_block_ignores_rng_and_padl_settings() {
        let cfg = ModelConfig::toy();
        let vit = Vit::new(cfg.clone()).unwrap();
        let mut other = vit.clone();
        other.config.padl_drop_threshold = 0.1;
        other.config.padl_embedding_drop_rate = 1.0;
        let input = vit.embed(&patchify(&random_image(&cfg, 3), cfg.patch_size).unwrap()).unwrap();
        let (a, att) = vit
            .encoder_block_forward(0, &input, Mode::Eval, &mut seed::rng(&[1]))
            .unwrap();
        let (b, _) = other
            .encoder_block_forward(0, &input, Mode::Eval, &mut seed::rng(&[2]))
            .unwrap();
        assert_eq!(a, b);
        for sum in attention_row_sums(&att) {
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_branches_reduce_block_to_padl() {
        let cfg = ModelConfig::toy();
        let mut vit = Vit::new(cfg.clone()).unwrap();
        vit.params.blocks[0].zero_branches();
        let input = vit.embed(&patchify(&random_image(&cfg, 4), cfg.patch_size).unwrap()).unwrap();
        let params = vit.padl_params();
        for s in 0..6 {
            let (out, _) = vit
                .encoder_block_forward(0, &input, Mode::Train, &mut seed::rng(&[s]))
                .unwrap();
            let (expect, _) =
                padl::apply_padl(&input, &params, &mut seed::rng(&[s]), Mode::Train).unwrap();
            assert_eq!(out, expect);
        }
    }

    #[test]
    fn injecting_recorded_attention_reproduces_logits() {
        let cfg = ModelConfig::toy();
        let vit = Vit::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 9);
        let plain = vit.forward(&img, None).unwrap();
        let again = vit
            .forward_with(
                &img,
                &ForwardOptions {
                    injection: Injection::Full(&plain.attention),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(plain.logits, again.logits);
        assert_eq!(plain.logits.len(), cfg.num_classes);

        let wrong = TensorStack::new(vec![Tensor::zeros(&[2, 5, 5])]);
        let err = vit.forward_with(
            &img,
            &ForwardOptions {
                injection: Injection::Full(&wrong),
                ..Default::default()
            },
        );
        assert!(err.is_err());
    }

    #[test]
    fn eval_forward_is_deterministic_and_row_stochastic() {
        let cfg = ModelConfig::desk();
        let vit = Vit::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 10);
        let a = vit.forward(&img, None).unwrap();
        let b = vit.forward(&img, None).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.attention.depth(), cfg.depth);
        for att in a.attention.blocks() {
            assert_eq!(att.shape(), &[cfg.heads, cfg.seq_len(), cfg.seq_len()]);
            assert!(att.data().iter().all(|v| *v >= 0.0));
            for sum in attention_row_sums(att) {
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        let replayed = a.tape.replay().unwrap();
        assert_eq!(replayed[a.logits_node.index()].data(), a.logits.as_slice());
    }

    #[test]
    fn deit_base_attention_stack_shape() {
        let cfg = ModelConfig {
            num_classes: 10,
            ..ModelConfig::deit_base()
        };
        let vit = Vit::new(cfg.clone()).unwrap();
        let out = vit.forward(&Tensor::full(&[224, 224, 3], 0.5), None).unwrap();
        assert_eq!(out.attention.depth(), 12);
        for att in out.attention.blocks() {
            assert_eq!(att.shape(), &[12, 197, 197]);
        }
    }

    #[test]
    fn classify_tie_breaks_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 1.0, 0.0]), 2);
    }

    #[test]
    fn train_mode_records_padl_branches() {
        let cfg = ModelConfig::toy();
        let vit = Vit::new(cfg.clone()).unwrap();
        let img = random_image(&cfg, 2);
        let out = vit
            .forward_with(
                &img,
                &ForwardOptions {
                    mode: Mode::Train,
                    padl_seed: 77,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(out.padl.iter().all(Option::is_some));
        let eval = vit.forward(&img, None).unwrap();
        assert!(eval.padl.iter().all(Option::is_none));
    }
}
