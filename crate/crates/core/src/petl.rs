//! Transfer methods on top of a pretrained backbone.
//!
//! Every method produces a [`Model`]: the backbone copy, the method's new
//! parameters and a fresh downstream head, with each parameter's `trainable`
//! flag forming the mask the optimizer obeys.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{is_bias_name, ParamGroup, ParamStore, Parameter};
use crate::tensor::{Element, Tensor};
use crate::vit::{
    add_linear, block_prefix, check_backbone, cls_output, embed, encode, linear_head, BlockHook,
    ForwardOutput, NoHook, ViTConfig,
};

pub const PROMPT_NAME: &str = "prompt.tokens";
pub const ALPHA_NAME: &str = "side.alpha_logit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Full,
    Linear,
    PartialK,
    MlpK,
    Bias,
    Adapter,
    Sidetune,
    Vpt,
    Dvpt,
}

impl MethodKind {
    pub const ALL: [MethodKind; 9] = [
        MethodKind::Full,
        MethodKind::Linear,
        MethodKind::PartialK,
        MethodKind::MlpK,
        MethodKind::Bias,
        MethodKind::Adapter,
        MethodKind::Sidetune,
        MethodKind::Vpt,
        MethodKind::Dvpt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Full => "full",
            MethodKind::Linear => "linear",
            MethodKind::PartialK => "partial_k",
            MethodKind::MlpK => "mlp_k",
            MethodKind::Bias => "bias",
            MethodKind::Adapter => "adapter",
            MethodKind::Sidetune => "sidetune",
            MethodKind::Vpt => "vpt",
            MethodKind::Dvpt => "dvpt",
        }
    }

    /// Whether any backbone parameter is trainable under this kind.
    pub fn tunes_backbone(self) -> bool {
        matches!(self, MethodKind::Full | MethodKind::PartialK | MethodKind::Bias)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvptMode {
    /// One `d`-vector added to every prompt row.
    #[default]
    Shared,
    /// A distinct `d`-vector per prompt row.
    Specific,
}

impl fmt::Display for DvptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DvptMode::Shared => "shared",
            DvptMode::Specific => "specific",
        })
    }
}

fn default_adapter_dim() -> usize {
    8
}
fn default_prompt_count() -> usize {
    4
}
fn default_metanet_layers() -> usize {
    4
}
fn default_metanet_input_dim() -> usize {
    48
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PetlMethodConfig {
    pub kind: MethodKind,
    /// Trailing blocks for `partial_k`, head layers for `mlp_k`.
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_adapter_dim")]
    pub adapter_dim: usize,
    #[serde(default = "default_prompt_count")]
    pub prompt_count: usize,
    #[serde(default = "default_metanet_layers")]
    pub metanet_layers: usize,
    #[serde(default)]
    pub dvpt_mode: DvptMode,
    /// Length of the pooled-image vector fed to the Meta-Net and the side network.
    #[serde(default = "default_metanet_input_dim")]
    pub metanet_input_dim: usize,
    /// Display name in tables; derived from the kind and knobs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl PetlMethodConfig {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            k: 0,
            adapter_dim: default_adapter_dim(),
            prompt_count: default_prompt_count(),
            metanet_layers: default_metanet_layers(),
            dvpt_mode: DvptMode::Shared,
            metanet_input_dim: default_metanet_input_dim(),
            label: None,
        }
    }

    pub fn full() -> Self {
        Self::new(MethodKind::Full)
    }

    pub fn linear() -> Self {
        Self::new(MethodKind::Linear)
    }

    pub fn partial(k: usize) -> Self {
        Self {
            k,
            ..Self::new(MethodKind::PartialK)
        }
    }

    pub fn mlp(k: usize) -> Self {
        Self {
            k,
            ..Self::new(MethodKind::MlpK)
        }
    }

    pub fn bias() -> Self {
        Self::new(MethodKind::Bias)
    }

    pub fn adapter(r: usize) -> Self {
        Self {
            adapter_dim: r,
            ..Self::new(MethodKind::Adapter)
        }
    }

    pub fn sidetune() -> Self {
        Self::new(MethodKind::Sidetune)
    }

    pub fn vpt(p: usize) -> Self {
        Self {
            prompt_count: p,
            ..Self::new(MethodKind::Vpt)
        }
    }

    pub fn dvpt(p: usize, layers: usize, mode: DvptMode) -> Self {
        Self {
            prompt_count: p,
            metanet_layers: layers,
            dvpt_mode: mode,
            ..Self::new(MethodKind::Dvpt)
        }
    }

    pub fn with_input_dim(mut self, dim: usize) -> Self {
        self.metanet_input_dim = dim;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn uses_prompts(&self) -> bool {
        matches!(self.kind, MethodKind::Vpt | MethodKind::Dvpt)
    }

    pub fn uses_pooled_input(&self) -> bool {
        matches!(self.kind, MethodKind::Dvpt | MethodKind::Sidetune)
    }

    /// Table name such as `adapter-8`, `dvpt-specific-d4`.
    pub fn display_name(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.kind {
            MethodKind::PartialK => format!("partial-{}", self.k),
            MethodKind::MlpK => format!("mlp-{}", self.k),
            MethodKind::Adapter => format!("adapter-{}", self.adapter_dim),
            MethodKind::Vpt => format!("vpt-p{}", self.prompt_count),
            MethodKind::Dvpt => format!(
                "dvpt-{}-p{}-d{}",
                self.dvpt_mode, self.prompt_count, self.metanet_layers
            ),
            k => k.name().to_string(),
        }
    }

    /// Checks the knobs against each other and against the backbone shape.
    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("{}: {m}", self.display_name())));
        match self.kind {
            MethodKind::PartialK if self.k > vit.num_layers => {
                return fail(format!("k = {} exceeds {} layers", self.k, vit.num_layers))
            }
            MethodKind::MlpK if self.k == 0 => return fail("mlp_k needs k >= 1".into()),
            MethodKind::Adapter if self.adapter_dim == 0 => return fail("adapter_dim must be >= 1".into()),
            MethodKind::Vpt | MethodKind::Dvpt if self.prompt_count == 0 => {
                return fail("prompt_count must be >= 1; use a plain forward for no prompts".into())
            }
            MethodKind::Dvpt if self.metanet_layers == 0 => return fail("metanet_layers must be >= 1".into()),
            _ => {}
        }
        if self.uses_pooled_input() {
            pool_grid(vit, self.metanet_input_dim)?;
        }
        Ok(())
    }
}

/// Side of the square pooling grid giving `input_dim = C·g²` for `vit`'s images.
pub fn pool_grid(vit: &ViTConfig, input_dim: usize) -> Result<usize> {
    let c = vit.image_channels;
    let bad = || {
        Error::Config(format!(
            "metanet_input_dim {input_dim} is not C·g² for a grid g dividing image size {:?} (C = {c})",
            vit.image_size
        ))
    };
    if input_dim == 0 || input_dim % c != 0 {
        return Err(bad());
    }
    let cells = input_dim / c;
    let g = (cells as f64).sqrt().round() as usize;
    if g * g != cells || g == 0 || vit.image_size[0] % g != 0 || vit.image_size[1] % g != 0 {
        return Err(bad());
    }
    Ok(g)
}

/// Average-pools `[B, C, H, W]` images to a `g×g` grid per channel and
/// flattens to `[B, C·g·g]` (channel, grid row, grid column).
pub fn pool_images<E: Element>(images: &Tensor<E>, grid: usize) -> Result<Tensor<E>> {
    let s = images.shape();
    if s.len() != 4 || grid == 0 || s[2] % grid != 0 || s[3] % grid != 0 {
        return Err(Error::Config(format!("cannot pool images of shape {s:?} to a {grid}x{grid} grid")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (bh, bw) = (h / grid, w / grid);
    let inv = E::of(1.0 / (bh * bw) as f64);
    let src = images.data();
    let mut out = Vec::with_capacity(b * c * grid * grid);
    for n in 0..b {
        for ch in 0..c {
            let plane = &src[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            for gy in 0..grid {
                for gx in 0..grid {
                    let mut acc = E::zero();
                    for y in gy * bh..(gy + 1) * bh {
                        for x in gx * bw..(gx + 1) * bw {
                            acc += plane[y * w + x];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    Tensor::new(vec![b, c * grid * grid], out)
}

/// A backbone adapted for one downstream task by one method.
#[derive(Clone, Debug)]
pub struct Model<E> {
    /// Backbone shape with the downstream class count.
    pub vit: ViTConfig,
    pub method: PetlMethodConfig,
    pub params: ParamStore<E>,
}

fn add_linear_zero_out<E: Element, R: Rng>(
    store: &mut ParamStore<E>,
    rng: &mut R,
    prefix: &str,
    out_f: usize,
    in_f: usize,
    group: ParamGroup,
    zero: bool,
) -> Result<()> {
    add_linear(store, rng, prefix, out_f, in_f, group)?;
    if zero {
        let w = store.get_mut(&format!("{prefix}.weight"))?;
        w.value.data_mut().iter_mut().for_each(|v| *v = E::zero());
    }
    Ok(())
}

/// Output width of the Meta-Net's last layer.
pub fn metanet_out_dim(method: &PetlMethodConfig, d: usize) -> usize {
    match method.dvpt_mode {
        DvptMode::Shared => d,
        DvptMode::Specific => method.prompt_count * d,
    }
}

/// `(out, in)` of each Meta-Net layer: input → d → … → d → output.
pub fn metanet_layer_dims(method: &PetlMethodConfig, d: usize) -> Vec<(usize, usize)> {
    let l = method.metanet_layers;
    (0..l)
        .map(|i| {
            let inp = if i == 0 { method.metanet_input_dim } else { d };
            let out = if i + 1 == l { metanet_out_dim(method, d) } else { d };
            (out, inp)
        })
        .collect()
}

/// Copies the backbone (dropping any upstream head), attaches the method's
/// new parameters and a fresh head, and sets the trainable mask.
pub fn build_method<E: Element, R: Rng>(
    method: &PetlMethodConfig,
    backbone: &ParamStore<E>,
    vit: &ViTConfig,
    rng: &mut R,
) -> Result<Model<E>> {
    vit.validate()?;
    method.validate(vit)?;
    check_backbone(backbone, vit)?;
    let d = vit.width;
    let n = vit.num_layers;
    let mut params = ParamStore::new();
    for p in backbone.iter().filter(|p| !p.name.starts_with("head.")) {
        let mut p = p.clone();
        p.grad = None;
        p.trainable = match method.kind {
            MethodKind::Full => true,
            MethodKind::PartialK => (n - method.k..n).any(|i| p.name.starts_with(&format!("{}.", block_prefix(i)))),
            MethodKind::Bias => is_bias_name(&p.name),
            _ => false,
        };
        params.insert(p)?;
    }

    match method.kind {
        MethodKind::Adapter => {
            let r = method.adapter_dim;
            for i in 0..n {
                for site in ["adapter_attn", "adapter_mlp"] {
                    let pre = format!("{}.{site}", block_prefix(i));
                    add_linear_zero_out(&mut params, rng, &format!("{pre}.down"), r, d, ParamGroup::Adapters, false)?;
                    add_linear_zero_out(&mut params, rng, &format!("{pre}.up"), d, r, ParamGroup::Adapters, true)?;
                }
            }
        }
        MethodKind::Sidetune => {
            add_linear(&mut params, rng, "side.0", d, method.metanet_input_dim, ParamGroup::Side)?;
            add_linear(&mut params, rng, "side.1", d, d, ParamGroup::Side)?;
            params.insert(Parameter::new(ALPHA_NAME, Tensor::zeros(vec![1]), ParamGroup::Side))?;
        }
        MethodKind::Vpt | MethodKind::Dvpt => {
            let p = method.prompt_count;
            let a = (6.0 / (p + d) as f64).sqrt();
            let data = (0..p * d).map(|_| E::of(rng.random_range(-a..a))).collect();
            params.insert(Parameter::new(PROMPT_NAME, Tensor::new(vec![p, d], data)?, ParamGroup::Prompts))?;
            if method.kind == MethodKind::Dvpt {
                let dims = metanet_layer_dims(method, d);
                let last = dims.len() - 1;
                for (i, &(out, inp)) in dims.iter().enumerate() {
                    add_linear_zero_out(&mut params, rng, &format!("metanet.{i}"), out, inp, ParamGroup::Metanet, i == last)?;
                }
            }
        }
        _ => {}
    }

    if method.kind == MethodKind::MlpK {
        for i in 0..method.k {
            let out = if i + 1 == method.k { vit.num_classes } else { d };
            add_linear(&mut params, rng, &format!("head.mlp.{i}"), out, d, ParamGroup::Head)?;
        }
    } else {
        add_linear(&mut params, rng, "head", vit.num_classes, d, ParamGroup::Head)?;
    }
    Ok(Model {
        vit: vit.clone(),
        method: method.clone(),
        params,
    })
}

/// Trainable-parameter count with a breakdown by group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
    pub by_group: BTreeMap<ParamGroup, usize>,
}

/// Enumerates the mask and sums trainable sizes.
pub fn count_trainable<E: Element>(store: &ParamStore<E>) -> ParamCount {
    let mut by_group: BTreeMap<ParamGroup, usize> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
    let mut trainable = 0;
    for p in store.iter().filter(|p| p.trainable) {
        trainable += p.numel();
        *by_group.get_mut(&p.group).expect("all groups present") += p.numel();
    }
    ParamCount {
        trainable,
        total: store.total_numel(),
        by_group,
    }
}

/// The explicit mask: every parameter name with its trainable flag.
pub fn trainable_mask<E: Element>(store: &ParamStore<E>) -> Vec<(String, bool)> {
    store.iter().map(|p| (p.name.clone(), p.trainable)).collect()
}

fn linear_size(out: usize, inp: usize) -> usize {
    out * inp + out
}

/// Parameters of one encoder block.
pub fn block_size(d: usize) -> usize {
    4 * d + 4 * linear_size(d, d) + linear_size(4 * d, d) + linear_size(d, 4 * d)
}

/// Every backbone parameter (no head).
pub fn backbone_size(vit: &ViTConfig) -> usize {
    let d = vit.width;
    linear_size(d, vit.patch_dim()) + (1 + vit.num_patches()) * d + d + vit.num_layers * block_size(d)
}

pub fn metanet_size(method: &PetlMethodConfig, d: usize) -> usize {
    metanet_layer_dims(method, d)
        .into_iter()
        .map(|(o, i)| linear_size(o, i))
        .sum()
}

/// Trainable count derived from the architecture alone, without building the model.
pub fn closed_form_trainable(method: &PetlMethodConfig, vit: &ViTConfig) -> usize {
    let d = vit.width;
    let n = vit.num_layers;
    let c = vit.num_classes;
    let head = linear_size(c, d);
    match method.kind {
        MethodKind::Full => backbone_size(vit) + head,
        MethodKind::Linear => head,
        MethodKind::PartialK => method.k * block_size(d) + head,
        MethodKind::MlpK => (method.k - 1) * linear_size(d, d) + head,
        // Patch bias, then per block: two LN shifts, four attention biases, fc1 and fc2 biases.
        MethodKind::Bias => d + n * (2 * d + 4 * d + 4 * d + d) + head,
        MethodKind::Adapter => {
            let r = method.adapter_dim;
            2 * n * (d * r + r + r * d + d) + head
        }
        MethodKind::Sidetune => linear_size(d, method.metanet_input_dim) + linear_size(d, d) + 1 + head,
        MethodKind::Vpt => method.prompt_count * d + head,
        MethodKind::Dvpt => method.prompt_count * d + metanet_size(method, d) + head,
    }
}

/// Inserts a bottleneck `x + up(relu(down(x)))` on both sub-layer branches of every block.
pub struct AdapterHook<'a, E> {
    pub store: &'a ParamStore<E>,
}

impl<E: Element> AdapterHook<'_, E> {
    fn apply(&self, g: &mut Graph<E>, layer: usize, site: &str, x: Var) -> Result<Var> {
        let pre = format!("{}.{site}", block_prefix(layer));
        adapter_forward(g, self.store, &pre, x)
    }
}

impl<E: Element> BlockHook<E> for AdapterHook<'_, E> {
    fn after_attention(&self, g: &mut Graph<E>, layer: usize, branch: Var) -> Result<Var> {
        self.apply(g, layer, "adapter_attn", branch)
    }

    fn after_mlp(&self, g: &mut Graph<E>, layer: usize, branch: Var) -> Result<Var> {
        self.apply(g, layer, "adapter_mlp", branch)
    }
}

/// `x + up(relu(down(x)))` with parameters under `prefix`.
pub fn adapter_forward<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear_head(g, store, &format!("{prefix}.down"), x)?;
    let h = g.relu(h);
    let h = linear_head(g, store, &format!("{prefix}.up"), h)?;
    g.add(x, h)
}

/// ReLU stack of `{prefix}.{i}` linear layers, no activation after the last.
fn mlp_stack<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear_head(g, store, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Meta-Net output π for `[B, input_dim]` pooled images: `[B, d]` when shared,
/// `[B, p, d]` when specific.
pub fn meta_net_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    method: &PetlMethodConfig,
    d: usize,
    pooled: Var,
) -> Result<Var> {
    let s = g.shape(pooled).to_vec();
    if s.len() != 2 || s[1] != method.metanet_input_dim {
        return Err(Error::Config(format!(
            "Meta-Net expects [B, {}] input, got {s:?}",
            method.metanet_input_dim
        )));
    }
    let pi = mlp_stack(g, store, "metanet", method.metanet_layers, pooled)?;
    match method.dvpt_mode {
        DvptMode::Shared => Ok(pi),
        DvptMode::Specific => g.reshape(pi, &[s[0], method.prompt_count, d]),
    }
}

/// `P(x) = P + π` as `[B, p, d]`.
pub fn dynamic_prompts<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    method: &PetlMethodConfig,
    d: usize,
    pooled: Var,
) -> Result<Var> {
    let b = g.shape(pooled)[0];
    let p = method.prompt_count;
    let prompts = g.param(store, PROMPT_NAME)?;
    let prompts = g.broadcast_to(prompts, &[b, p, d])?;
    let pi = meta_net_forward(g, store, method, d, pooled)?;
    let pi = match method.dvpt_mode {
        DvptMode::Shared => {
            let pi = g.reshape(pi, &[b, 1, d])?;
            g.broadcast_to(pi, &[b, p, d])?
        }
        DvptMode::Specific => pi,
    };
    g.add(prompts, pi)
}

/// Tokens `[x_0, P, E_0]` through all blocks; returns the `[B, d]` `[CLS]` output.
fn prompted_encode<E: Element>(
    g: &mut Graph<E>,
    model: &Model<E>,
    images: &Tensor<E>,
    prompts: Option<Var>,
    hook: &dyn BlockHook<E>,
    trace: &mut ForwardOutput,
) -> Result<Var> {
    let e = embed(g, &model.params, &model.vit, images)?;
    trace.inputs.push(e.pixels);
    let tokens = match prompts {
        Some(p) => g.concat_seq(&[e.cls, p, e.patches])?,
        None => g.concat_seq(&[e.cls, e.patches])?,
    };
    let x = encode(g, &model.params, &model.vit, tokens, hook, &mut trace.seq_lens)?;
    cls_output(g, x)
}

fn new_trace(model: &Model<impl Element>) -> ForwardOutput {
    ForwardOutput {
        logits: Var::PLACEHOLDER,
        seq_lens: Vec::with_capacity(model.vit.num_layers),
        prompts: None,
        inputs: Vec::new(),
    }
}

fn check_kind<E>(model: &Model<E>, kinds: &[MethodKind], op: &str) -> Result<()> {
    if !kinds.contains(&model.method.kind) {
        return Err(Error::Config(format!(
            "{op} does not apply to method `{}`",
            model.method.kind
        )));
    }
    if model.method.uses_prompts() && model.method.prompt_count == 0 {
        return Err(Error::Config("prompt_count must be >= 1".into()));
    }
    Ok(())
}

fn pooled_input<E: Element>(
    g: &mut Graph<E>,
    model: &Model<E>,
    images: &Tensor<E>,
    trace: &mut ForwardOutput,
) -> Result<Var> {
    let grid = pool_grid(&model.vit, model.method.metanet_input_dim)?;
    let pooled = g.input(pool_images(images, grid)?);
    trace.inputs.push(pooled);
    Ok(pooled)
}

/// Fixed prompts: `[x_0, P, E_0]` into the first block, propagated features after.
pub fn vpt_forward<E: Element>(g: &mut Graph<E>, model: &Model<E>, images: &Tensor<E>) -> Result<ForwardOutput> {
    check_kind(model, &[MethodKind::Vpt, MethodKind::Dvpt], "vpt_forward")?;
    let mut out = new_trace(model);
    let b = images.shape().first().copied().unwrap_or(0);
    let p = g.param(&model.params, PROMPT_NAME)?;
    let p = g.broadcast_to(p, &[b, model.method.prompt_count, model.vit.width])?;
    out.prompts = Some(p);
    let cls = prompted_encode(g, model, images, Some(p), &NoHook, &mut out)?;
    out.logits = linear_head(g, &model.params, "head", cls)?;
    Ok(out)
}

/// Instance-wise prompts `P(x) = P + π(x)` in place of `P`, otherwise as [`vpt_forward`].
pub fn dvpt_forward<E: Element>(g: &mut Graph<E>, model: &Model<E>, images: &Tensor<E>) -> Result<ForwardOutput> {
    check_kind(model, &[MethodKind::Dvpt], "dvpt_forward")?;
    let mut out = new_trace(model);
    let pooled = pooled_input(g, model, images, &mut out)?;
    let p = dynamic_prompts(g, &model.params, &model.method, model.vit.width, pooled)?;
    out.prompts = Some(p);
    let cls = prompted_encode(g, model, images, Some(p), &NoHook, &mut out)?;
    out.logits = linear_head(g, &model.params, "head", cls)?;
    Ok(out)
}

/// Head on `α·x_N + (1−α)·side(x)` with `α = sigmoid(side.alpha_logit)`.
pub fn sidetune_forward<E: Element>(g: &mut Graph<E>, model: &Model<E>, images: &Tensor<E>) -> Result<ForwardOutput> {
    check_kind(model, &[MethodKind::Sidetune], "sidetune_forward")?;
    let mut out = new_trace(model);
    let cls = prompted_encode(g, model, images, None, &NoHook, &mut out)?;
    let pooled = pooled_input(g, model, images, &mut out)?;
    let side = mlp_stack(g, &model.params, "side", 2, pooled)?;
    let shape = g.shape(cls).to_vec();
    let logit = g.param(&model.params, ALPHA_NAME)?;
    let alpha = g.sigmoid(logit);
    let neg = g.scale(logit, -1.0);
    let beta = g.sigmoid(neg);
    let alpha = g.broadcast_to(alpha, &shape)?;
    let beta = g.broadcast_to(beta, &shape)?;
    let a = g.mul(alpha, cls)?;
    let b = g.mul(beta, side)?;
    let mixed = g.add(a, b)?;
    out.logits = linear_head(g, &model.params, "head", mixed)?;
    Ok(out)
}

/// Logits for a `[B, C, H, W]` batch under the model's method.
pub fn forward<E: Element>(g: &mut Graph<E>, model: &Model<E>, images: &Tensor<E>) -> Result<ForwardOutput> {
    match model.method.kind {
        MethodKind::Vpt => vpt_forward(g, model, images),
        MethodKind::Dvpt => dvpt_forward(g, model, images),
        MethodKind::Sidetune => sidetune_forward(g, model, images),
        kind => {
            let mut out = new_trace(model);
            let hook = AdapterHook { store: &model.params };
            let hook: &dyn BlockHook<E> = if kind == MethodKind::Adapter { &hook } else { &NoHook };
            let cls = prompted_encode(g, model, images, None, hook, &mut out)?;
            out.logits = if kind == MethodKind::MlpK {
                mlp_stack(g, &model.params, "head.mlp", model.method.k, cls)?
            } else {
                linear_head(g, &model.params, "head", cls)?
            };
            Ok(out)
        }
    }
}
