//! Pre-norm Vision Transformer backbone.
//!
//! Images are split into `h×w` patches, each flattened and linearly projected
//! to width `d`, with learned positional embeddings added to the patch tokens
//! and to the `[CLS]` token. `N` encoder blocks follow, and the head reads the
//! final `[CLS]` embedding. There is no final layer norm: with `N = 0` the
//! logits are exactly `head(x_0)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{is_bias_name, ParamGroup, ParamStore, Parameter};
use crate::tensor::{Element, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub num_layers: usize,
    pub width: usize,
    pub num_heads: usize,
    #[serde(default = "default_channels")]
    pub image_channels: usize,
    /// `[height, width]` in pixels.
    pub image_size: [usize; 2],
    /// `[height, width]` of one patch.
    pub patch_size: [usize; 2],
    pub num_classes: usize,
}

impl ViTConfig {
    /// Default working size: 4 layers, width 32, 4 heads, 16×16 RGB, 4×4 patches.
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            width: 32,
            num_heads: 4,
            image_channels: 3,
            image_size: [16, 16],
            patch_size: [4, 4],
            num_classes: 8,
        }
    }

    /// Gradient-check size: 2 layers, width 16, 4 heads, 8×8 RGB, 2×2 patches.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            width: 16,
            num_heads: 4,
            image_channels: 3,
            image_size: [8, 8],
            patch_size: [2, 2],
            num_classes: 10,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let [ih, iw] = self.image_size;
        let [ph, pw] = self.patch_size;
        let fail = |m: &str| Err(Error::Config(format!("invalid ViT config: {m}")));
        if self.width == 0 || self.num_heads == 0 || self.num_classes == 0 || self.image_channels == 0 {
            return fail("width, heads, channels and classes must be positive");
        }
        if self.width % self.num_heads != 0 {
            return fail("width must be divisible by num_heads");
        }
        if ph == 0 || pw == 0 || ih == 0 || iw == 0 || ih % ph != 0 || iw % pw != 0 {
            return fail("patch size must divide image size");
        }
        Ok(())
    }

    /// Patch count `m`.
    pub fn num_patches(&self) -> usize {
        (self.image_size[0] / self.patch_size[0]) * (self.image_size[1] / self.patch_size[1])
    }

    /// Flattened patch length `C·h·w`.
    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch_size[0] * self.patch_size[1]
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    /// Token count entering each block when `prompts` prompt tokens are inserted.
    pub fn seq_len(&self, prompts: usize) -> usize {
        1 + prompts + self.num_patches()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_size[0], self.image_size[1]]
    }
}

/// Accounting group of a backbone or head parameter, derived from its name.
pub fn backbone_group(name: &str) -> ParamGroup {
    if name.starts_with("head.") {
        ParamGroup::Head
    } else if is_bias_name(name) {
        ParamGroup::Biases
    } else {
        ParamGroup::Backbone
    }
}

pub fn block_prefix(layer: usize) -> String {
    format!("blocks.{layer}")
}

/// Samples from N(0, std²) truncated to ±2·std by rejection.
pub fn trunc_normal<E: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<E> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break E::of(v);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn add_param<E: Element>(store: &mut ParamStore<E>, name: String, value: Tensor<E>) {
    let group = backbone_group(&name);
    store.insert(Parameter::new(name, value, group)).expect("unique backbone names");
}

/// Adds a `[out, in]` weight and `[out]` bias named `{prefix}.weight` / `{prefix}.bias`.
pub fn add_linear<E: Element, R: Rng>(
    store: &mut ParamStore<E>,
    rng: &mut R,
    prefix: &str,
    out_f: usize,
    in_f: usize,
    group: ParamGroup,
) -> Result<()> {
    store.insert(Parameter::new(
        format!("{prefix}.weight"),
        trunc_normal(rng, &[out_f, in_f], INIT_STD),
        group,
    ))?;
    store.insert(Parameter::new(
        format!("{prefix}.bias"),
        Tensor::zeros(vec![out_f]),
        if group.is_backbone() { ParamGroup::Biases } else { group },
    ))?;
    Ok(())
}

/// Freshly initialized backbone plus head, all parameters trainable.
pub fn init_backbone<E: Element, R: Rng>(cfg: &ViTConfig, rng: &mut R) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let d = cfg.width;
    let m = cfg.num_patches();
    let mut s = ParamStore::new();
    add_param(&mut s, "patch_embed.weight".into(), trunc_normal(rng, &[d, cfg.patch_dim()], INIT_STD));
    add_param(&mut s, "patch_embed.bias".into(), Tensor::zeros(vec![d]));
    add_param(&mut s, "pos_embed".into(), trunc_normal(rng, &[1 + m, d], INIT_STD));
    add_param(&mut s, "cls_token".into(), trunc_normal(rng, &[d], INIT_STD));
    for i in 0..cfg.num_layers {
        let p = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            add_param(&mut s, format!("{p}.{ln}.scale"), Tensor::full(vec![d], E::one()));
            add_param(&mut s, format!("{p}.{ln}.shift"), Tensor::zeros(vec![d]));
        }
        for proj in ["q", "k", "v", "o"] {
            add_param(&mut s, format!("{p}.attn.{proj}.weight"), trunc_normal(rng, &[d, d], INIT_STD));
            add_param(&mut s, format!("{p}.attn.{proj}.bias"), Tensor::zeros(vec![d]));
        }
        add_param(&mut s, format!("{p}.mlp.fc1.weight"), trunc_normal(rng, &[4 * d, d], INIT_STD));
        add_param(&mut s, format!("{p}.mlp.fc1.bias"), Tensor::zeros(vec![4 * d]));
        add_param(&mut s, format!("{p}.mlp.fc2.weight"), trunc_normal(rng, &[d, 4 * d], INIT_STD));
        add_param(&mut s, format!("{p}.mlp.fc2.bias"), Tensor::zeros(vec![d]));
    }
    add_linear(&mut s, rng, "head", cfg.num_classes, d, ParamGroup::Head)?;
    Ok(s)
}

/// Names every backbone parameter (excluding the head) must have for `cfg`.
pub fn backbone_param_names(cfg: &ViTConfig) -> Vec<String> {
    let mut names = vec![
        "patch_embed.weight".to_string(),
        "patch_embed.bias".to_string(),
        "pos_embed".to_string(),
        "cls_token".to_string(),
    ];
    for i in 0..cfg.num_layers {
        let p = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            names.push(format!("{p}.{ln}.scale"));
            names.push(format!("{p}.{ln}.shift"));
        }
        for proj in ["q", "k", "v", "o"] {
            names.push(format!("{p}.attn.{proj}.weight"));
            names.push(format!("{p}.attn.{proj}.bias"));
        }
        for fc in ["fc1", "fc2"] {
            names.push(format!("{p}.mlp.{fc}.weight"));
            names.push(format!("{p}.mlp.{fc}.bias"));
        }
    }
    names
}

/// Checks that `store` holds every backbone parameter with the shape `cfg` implies.
pub fn check_backbone<E: Element>(store: &ParamStore<E>, cfg: &ViTConfig) -> Result<()> {
    let d = cfg.width;
    for name in backbone_param_names(cfg) {
        let p = store.get(&name)?;
        let expected: Vec<usize> = if name == "patch_embed.weight" {
            vec![d, cfg.patch_dim()]
        } else if name == "pos_embed" {
            vec![1 + cfg.num_patches(), d]
        } else if name.ends_with("fc1.weight") {
            vec![4 * d, d]
        } else if name.ends_with("fc1.bias") {
            vec![4 * d]
        } else if name.ends_with("fc2.weight") {
            vec![d, 4 * d]
        } else if name.contains(".attn.") && name.ends_with("weight") {
            vec![d, d]
        } else {
            vec![d]
        };
        if p.value.shape() != expected.as_slice() {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, config expects {expected:?}",
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// `[B, C, H, W]` images to `[B, m, C·h·w]` flattened patches (patch grid row-major,
/// each patch flattened channel, row, column).
pub fn patchify<E: Element>(images: &Tensor<E>, cfg: &ViTConfig) -> Result<Tensor<E>> {
    let [c, ih, iw] = cfg.image_shape();
    let s = images.shape();
    if s.len() != 4 || s[1..] != [c, ih, iw] {
        return Err(Error::Config(format!(
            "image batch shape {s:?} does not match config {:?}",
            [c, ih, iw]
        )));
    }
    let b = s[0];
    let [ph, pw] = cfg.patch_size;
    let (gh, gw) = (ih / ph, iw / pw);
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for n in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..ph {
                        let row = ((n * c + ch) * ih + py * ph + y) * iw + px * pw;
                        out.extend_from_slice(&src[row..row + pw]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, cfg.patch_dim()], out)
}

/// Output of the embedding stage for a batch.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    /// `[B, 1, d]`: `[CLS]` plus its positional embedding.
    pub cls: Var,
    /// `[B, m, d]`: projected patches plus positional embeddings.
    pub patches: Var,
    /// The `[B, m, C·h·w]` pixel leaf.
    pub pixels: Var,
}

/// Embeds a `[B, C, H, W]` batch.
pub fn embed<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    images: &Tensor<E>,
) -> Result<Embedded> {
    let b = images.shape().first().copied().unwrap_or(0);
    let (m, d) = (cfg.num_patches(), cfg.width);
    let pixels = g.input(patchify(images, cfg)?);
    let w = g.param(store, "patch_embed.weight")?;
    let bias = g.param(store, "patch_embed.bias")?;
    let projected = g.linear(pixels, w, Some(bias))?;
    let pos = g.param(store, "pos_embed")?;
    let pos_patch = g.slice(pos, 0, 1, m)?;
    let pos_patch = g.broadcast_to(pos_patch, &[b, m, d])?;
    let patches = g.add(projected, pos_patch)?;

    let cls = g.param(store, "cls_token")?;
    let cls = g.reshape(cls, &[1, d])?;
    let pos_cls = g.slice(pos, 0, 0, 1)?;
    let cls = g.add(cls, pos_cls)?;
    let cls = g.broadcast_to(cls, &[b, 1, d])?;
    Ok(Embedded { cls, patches, pixels })
}

/// Single-image patch embedding: `[C, H, W]` to `[m, d]`.
pub fn patch_embed<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    image: &Tensor<E>,
) -> Result<Var> {
    let batch = image.clone().reshape(
        std::iter::once(1)
            .chain(image.shape().iter().copied())
            .collect::<Vec<_>>(),
    )?;
    let e = embed(g, store, cfg, &batch)?;
    g.reshape(e.patches, &[cfg.num_patches(), cfg.width])
}

/// Extension points inside an encoder block, applied to each sub-layer's
/// branch output before its residual addition.
pub trait BlockHook<E: Element> {
    fn after_attention(&self, _g: &mut Graph<E>, _layer: usize, branch: Var) -> Result<Var> {
        Ok(branch)
    }

    fn after_mlp(&self, _g: &mut Graph<E>, _layer: usize, branch: Var) -> Result<Var> {
        Ok(branch)
    }
}

/// The plain block.
pub struct NoHook;

impl<E: Element> BlockHook<E> for NoHook {}

/// Multi-head self-attention over `[B, T, d]` (already normalized) tokens.
/// Returns the projected output and the `[B·heads, T, T]` attention weights.
pub fn self_attention<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    layer: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let (heads, dh) = (cfg.num_heads, cfg.head_dim());
    let p = block_prefix(layer);
    let proj = |g: &mut Graph<E>, name: &str| -> Result<Var> {
        let w = g.param(store, &format!("{p}.attn.{name}.weight"))?;
        let bias = g.param(store, &format!("{p}.attn.{name}.bias"))?;
        let y = g.linear(x, w, Some(bias))?;
        let y = g.reshape(y, &[b, t, heads, dh])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * heads, t, dh])
    };
    let q = proj(g, "q")?;
    let k = proj(g, "k")?;
    let v = proj(g, "v")?;
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    let w = g.param(store, &format!("{p}.attn.o.weight"))?;
    let bias = g.param(store, &format!("{p}.attn.o.bias"))?;
    let out = g.linear(ctx, w, Some(bias))?;
    Ok((out, weights))
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `+ MLP(LN(·))` with a GELU MLP of width 4d.
/// Accepts `[T, d]` or `[B, T, d]` tokens and returns the same shape.
pub fn encoder_layer<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    layer: usize,
    tokens: Var,
    hook: &dyn BlockHook<E>,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let x = match shape.len() {
        2 => g.reshape(tokens, &[1, shape[0], shape[1]])?,
        3 => tokens,
        _ => return Err(Error::dim("encoder_layer", &shape, &[cfg.width])),
    };
    if *shape.last().unwrap() != cfg.width {
        return Err(Error::dim("encoder_layer", &shape, &[cfg.width]));
    }
    let p = block_prefix(layer);
    let ln = |g: &mut Graph<E>, x: Var, name: &str| -> Result<Var> {
        let scale = g.param(store, &format!("{p}.{name}.scale"))?;
        let shift = g.param(store, &format!("{p}.{name}.shift"))?;
        g.layer_norm(x, scale, shift, LAYER_NORM_EPS)
    };

    let h = ln(g, x, "ln1")?;
    let (attn, _) = self_attention(g, store, cfg, layer, h)?;
    let attn = hook.after_attention(g, layer, attn)?;
    let x = g.add(x, attn)?;

    let h = ln(g, x, "ln2")?;
    let w1 = g.param(store, &format!("{p}.mlp.fc1.weight"))?;
    let b1 = g.param(store, &format!("{p}.mlp.fc1.bias"))?;
    let w2 = g.param(store, &format!("{p}.mlp.fc2.weight"))?;
    let b2 = g.param(store, &format!("{p}.mlp.fc2.bias"))?;
    let h = g.linear(h, w1, Some(b1))?;
    let h = g.gelu(h);
    let h = g.linear(h, w2, Some(b2))?;
    let h = hook.after_mlp(g, layer, h)?;
    let out = g.add(x, h)?;

    if shape.len() == 2 {
        g.reshape(out, &shape)
    } else {
        Ok(out)
    }
}

/// Runs all `N` blocks, recording the sequence length entering each one.
pub fn encode<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    tokens: Var,
    hook: &dyn BlockHook<E>,
    seq_lens: &mut Vec<usize>,
) -> Result<Var> {
    let mut x = tokens;
    for layer in 0..cfg.num_layers {
        let s = g.shape(x);
        seq_lens.push(s[s.len() - 2]);
        x = encoder_layer(g, store, cfg, layer, x, hook)?;
    }
    Ok(x)
}

/// `[B, T, d]` to the `[B, d]` `[CLS]` embeddings.
pub fn cls_output<E: Element>(g: &mut Graph<E>, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let cls = g.slice(tokens, 1, 0, 1)?;
    g.reshape(cls, &[s[0], s[2]])
}

/// Linear head `{prefix}.weight · x + {prefix}.bias`.
pub fn linear_head<E: Element>(g: &mut Graph<E>, store: &ParamStore<E>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    g.linear(x, w, Some(b))
}

/// Logits for a batch plus the sequence length observed at each block input.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub seq_lens: Vec<usize>,
    /// The prompt rows inserted after `[CLS]`, if any.
    pub prompts: Option<Var>,
    /// Every leaf derived from the input images.
    pub inputs: Vec<Var>,
}

/// Plain ViT: `[x_0, E_0]` through `N` blocks, `head(x_N)`.
pub fn vit_forward<E: Element>(
    g: &mut Graph<E>,
    store: &ParamStore<E>,
    cfg: &ViTConfig,
    images: &Tensor<E>,
) -> Result<ForwardOutput> {
    let e = embed(g, store, cfg, images)?;
    let tokens = g.concat_seq(&[e.cls, e.patches])?;
    let mut seq_lens = Vec::with_capacity(cfg.num_layers);
    let x = encode(g, store, cfg, tokens, &NoHook, &mut seq_lens)?;
    let cls = cls_output(g, x)?;
    let logits = linear_head(g, store, "head", cls)?;
    Ok(ForwardOutput {
        logits,
        seq_lens,
        prompts: None,
        inputs: vec![e.pixels],
    })
}

/// Stacks `[C, H, W]` images into one `[B, C, H, W]` tensor.
pub fn stack_images<E: Element>(images: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("stack_images", &shape, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend(shape);
    Tensor::new(out_shape, data)
}
