//! Vision Transformer assembly: patch embedding (2D/3D images or
//! precomputed token sequences), class token, learnable positional
//! encodings, pre-norm transformer blocks with a pluggable attention
//! mechanism, and a classification head read off the class token.
//!
//! Parameter naming is the stable contract shared by checkpoints and the
//! weight-transfer procedure; see [`ViTConfig::expected_parameters`].

use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_forward, normalize_over_axis, AttentionConfig, AttentionParams, Mechanism,
    AFFINE_NAMES, PROJ_NAMES,
};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Binder, ParamStore};
use crate::rng::Stream;
use crate::scalar::Element;
use crate::shape::numel;
use crate::tensor::{Graph, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// What the model consumes and how it is sliced into tokens.
/// 3D patch sizes are (depth, height, width).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputKind {
    Image2d { channels: usize, height: usize, width: usize, patch: [usize; 2] },
    Image3d { channels: usize, depth: usize, height: usize, width: usize, patch: [usize; 3] },
    TokenSequence { dim: usize },
}

impl InputKind {
    /// Flattened per-token dimension.
    pub fn token_dim(&self) -> usize {
        match self {
            InputKind::Image2d { channels, patch, .. } => patch[0] * patch[1] * channels,
            InputKind::Image3d { channels, patch, .. } => {
                patch[0] * patch[1] * patch[2] * channels
            }
            InputKind::TokenSequence { dim } => *dim,
        }
    }

    /// Patch count for image inputs; token sequences vary per sample.
    pub fn token_count(&self) -> Option<usize> {
        match self {
            InputKind::Image2d { height, width, patch, .. } => {
                Some((height / patch[0]) * (width / patch[1]))
            }
            InputKind::Image3d { depth, height, width, patch, .. } => {
                Some((depth / patch[0]) * (height / patch[1]) * (width / patch[2]))
            }
            InputKind::TokenSequence { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, extent: usize, p: usize| -> Result<()> {
            if extent == 0 || p == 0 {
                return Err(Error::Config(format!("{name}: extent and patch must be positive")));
            }
            if extent % p != 0 {
                return Err(Error::Config(format!(
                    "{name} {extent} is not divisible by patch size {p}"
                )));
            }
            Ok(())
        };
        match self {
            InputKind::Image2d { channels, height, width, patch } => {
                if *channels == 0 {
                    return Err(Error::Config("channels must be positive".into()));
                }
                check("height", *height, patch[0])?;
                check("width", *width, patch[1])
            }
            InputKind::Image3d { channels, depth, height, width, patch } => {
                if *channels == 0 {
                    return Err(Error::Config("channels must be positive".into()));
                }
                check("depth", *depth, patch[0])?;
                check("height", *height, patch[1])?;
                check("width", *width, patch[2])
            }
            InputKind::TokenSequence { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("token dim must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub input: InputKind,
    /// Token embedding dimension D'.
    pub model_dim: usize,
    pub attention: AttentionConfig,
    pub layers: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    /// Positional table covers max_sequence patch tokens plus the class token.
    pub max_sequence: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Zeros,
    Ones,
    TruncNormal,
}

/// Registration entry: name, shape and initializer.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        self.input.validate()?;
        self.attention.validate()?;
        if self.attention.model_dim != self.model_dim {
            return Err(Error::Config(format!(
                "attention.model_dim {} disagrees with model_dim {}",
                self.attention.model_dim, self.model_dim
            )));
        }
        if self.layers == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("layers and mlp_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if let Some(n) = self.input.token_count() {
            if n > self.max_sequence {
                return Err(Error::Config(format!(
                    "token count {n} exceeds max_sequence {}",
                    self.max_sequence
                )));
            }
        }
        Ok(())
    }

    /// 2D image preset: patch (16,16), D'=1024, D=512, 8 layers, 8 heads,
    /// MLP 1024.
    pub fn vit_2d(
        mechanism: Mechanism,
        channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Self {
        let input = InputKind::Image2d { channels, height, width, patch: [16, 16] };
        let max_sequence = input.token_count().unwrap();
        ViTConfig {
            input,
            model_dim: 1024,
            attention: AttentionConfig::new(mechanism, 1024, 512, 8),
            layers: 8,
            mlp_dim: 1024,
            num_classes,
            max_sequence,
        }
    }

    /// Whole-slide preset for precomputed token sequences: D'=512, D=512,
    /// 2 layers, 8 heads, MLP 512.
    pub fn vit_wsi(mechanism: Mechanism, token_dim: usize, num_classes: usize) -> Self {
        ViTConfig {
            input: InputKind::TokenSequence { dim: token_dim },
            model_dim: 512,
            attention: AttentionConfig::new(mechanism, 512, 512, 8),
            layers: 2,
            mlp_dim: 512,
            num_classes,
            max_sequence: 16_384,
        }
    }

    /// 3D volume preset: patch 16x16 spatially, 4 deep; D'=1024, D=512,
    /// 8 layers, 8 heads, MLP 1024.
    pub fn vit_3d(
        mechanism: Mechanism,
        channels: usize,
        depth: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Self {
        let input = InputKind::Image3d { channels, depth, height, width, patch: [4, 16, 16] };
        let max_sequence = input.token_count().unwrap();
        ViTConfig {
            input,
            model_dim: 1024,
            attention: AttentionConfig::new(mechanism, 1024, 512, 8),
            layers: 8,
            mlp_dim: 1024,
            num_classes,
            max_sequence,
        }
    }

    /// Every parameter this config owns, in registration order.
    pub fn expected_parameters(&self) -> Vec<ParamSpec> {
        let dp = self.model_dim;
        let d = self.attention.inner_dim;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: InitKind| {
            out.push(ParamSpec { name, shape, init });
        };
        push("embed.weight".into(), vec![self.input.token_dim(), dp], InitKind::TruncNormal);
        push("embed.bias".into(), vec![dp], InitKind::Zeros);
        push("cls_token".into(), vec![dp], InitKind::Zeros);
        push("pos_embed".into(), vec![self.max_sequence + 1, dp], InitKind::TruncNormal);
        for i in 0..self.layers {
            let scope = format!("blocks.{i}");
            push(format!("{scope}.ln1.weight"), vec![dp], InitKind::Ones);
            push(format!("{scope}.ln1.bias"), vec![dp], InitKind::Zeros);
            for name in PROJ_NAMES {
                let shape = if name == "w_o" { vec![d, dp] } else { vec![dp, d] };
                push(format!("{scope}.attn.{name}"), shape, InitKind::TruncNormal);
            }
            if self.attention.mechanism == Mechanism::SeqNormFree {
                for name in AFFINE_NAMES {
                    let init = if name.starts_with("gamma") { InitKind::Ones } else { InitKind::Zeros };
                    push(format!("{scope}.attn.{name}"), vec![d], init);
                }
            }
            push(format!("{scope}.ln2.weight"), vec![dp], InitKind::Ones);
            push(format!("{scope}.ln2.bias"), vec![dp], InitKind::Zeros);
            push(format!("{scope}.mlp.fc1.weight"), vec![dp, self.mlp_dim], InitKind::TruncNormal);
            push(format!("{scope}.mlp.fc1.bias"), vec![self.mlp_dim], InitKind::Zeros);
            push(format!("{scope}.mlp.fc2.weight"), vec![self.mlp_dim, dp], InitKind::TruncNormal);
            push(format!("{scope}.mlp.fc2.bias"), vec![dp], InitKind::Zeros);
        }
        push("norm.weight".into(), vec![dp], InitKind::Ones);
        push("norm.bias".into(), vec![dp], InitKind::Zeros);
        push("head.weight".into(), vec![dp, self.num_classes], InitKind::TruncNormal);
        push("head.bias".into(), vec![self.num_classes], InitKind::Zeros);
        out
    }

    /// Total scalar parameter count implied by the config.
    pub fn parameter_count(&self) -> usize {
        self.expected_parameters().iter().map(|p| numel(&p.shape)).sum()
    }

    /// True if checkpoints can transfer between the two configs: identical
    /// architecture up to the attention internals (mechanism, eps).
    pub fn transfer_compatible(&self, other: &ViTConfig) -> bool {
        self.input == other.input
            && self.model_dim == other.model_dim
            && self.attention.inner_dim == other.attention.inner_dim
            && self.attention.heads == other.attention.heads
            && self.layers == other.layers
            && self.mlp_dim == other.mlp_dim
            && self.num_classes == other.num_classes
            && self.max_sequence == other.max_sequence
    }
}

/// A tokenized input batch: `tokens` is [batch, seq, dim] row-major; the
/// optional mask is [batch, seq] with 1 at real positions, 0 at padding.
pub struct TokenBatch<T: Element> {
    pub tokens: Vec<T>,
    pub batch: usize,
    pub seq: usize,
    pub dim: usize,
    pub mask: Option<Vec<T>>,
}

impl<T: Element> TokenBatch<T> {
    pub fn new(
        tokens: Vec<T>,
        batch: usize,
        seq: usize,
        dim: usize,
        mask: Option<Vec<T>>,
    ) -> Result<Self> {
        if tokens.len() != batch * seq * dim {
            return Err(Error::BadShape {
                op: "token_batch",
                detail: format!("{} values vs {batch}x{seq}x{dim}", tokens.len()),
            });
        }
        if let Some(m) = &mask {
            if m.len() != batch * seq {
                return Err(Error::BadShape {
                    op: "token_batch",
                    detail: format!("mask has {} values, expected {batch}x{seq}", m.len()),
                });
            }
        }
        Ok(TokenBatch { tokens, batch, seq, dim, mask })
    }

    /// Patchifies a batch of equally-shaped images.
    pub fn from_images(input: &InputKind, images: &[&[f32]]) -> Result<Self> {
        input.validate()?;
        let dim = input.token_dim();
        let n = input
            .token_count()
            .ok_or_else(|| Error::Config("from_images requires an image input kind".into()))?;
        let mut tokens = Vec::with_capacity(images.len() * n * dim);
        for img in images {
            let toks = match input {
                InputKind::Image2d { channels, height, width, patch } => {
                    patchify_2d(img, *channels, *height, *width, patch[0], patch[1])?
                }
                InputKind::Image3d { channels, depth, height, width, patch } => patchify_3d(
                    img, *channels, *depth, *height, *width, patch[0], patch[1], patch[2],
                )?,
                InputKind::TokenSequence { .. } => unreachable!(),
            };
            tokens.extend(toks.iter().map(|&v| T::from_f32(v).unwrap()));
        }
        TokenBatch::new(tokens, images.len(), n, dim, None)
    }

    /// Pads variable-length token sequences to the batch maximum and
    /// masks the padding.
    pub fn from_token_sequences(dim: usize, seqs: &[&[f32]]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::BadShape { op: "token_batch", detail: "empty batch".into() });
        }
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() % dim != 0 || s.is_empty() {
                return Err(Error::BadShape {
                    op: "token_batch",
                    detail: format!("sequence of {} values is not a multiple of dim {dim}", s.len()),
                });
            }
            lens.push(s.len() / dim);
        }
        let max = *lens.iter().max().unwrap();
        let uniform = lens.iter().all(|&l| l == max);
        let mut tokens = Vec::with_capacity(seqs.len() * max * dim);
        let mut mask = Vec::with_capacity(seqs.len() * max);
        for (s, &len) in seqs.iter().zip(&lens) {
            tokens.extend(s.iter().map(|&v| T::from_f32(v).unwrap()));
            tokens.extend(std::iter::repeat(T::zero()).take((max - len) * dim));
            mask.extend(std::iter::repeat(T::one()).take(len));
            mask.extend(std::iter::repeat(T::zero()).take(max - len));
        }
        TokenBatch::new(tokens, seqs.len(), max, dim, if uniform { None } else { Some(mask) })
    }
}

/// Non-overlapping raster-order patches, each flattened channel-last.
/// Input layout is [C, H, W] row-major.
pub fn patchify_2d(
    img: &[f32],
    channels: usize,
    height: usize,
    width: usize,
    ph: usize,
    pw: usize,
) -> Result<Vec<f32>> {
    let kind = InputKind::Image2d { channels, height, width, patch: [ph, pw] };
    kind.validate()?;
    if img.len() != channels * height * width {
        return Err(Error::BadShape {
            op: "patchify",
            detail: format!("{} values vs {channels}x{height}x{width}", img.len()),
        });
    }
    let (gh, gw) = (height / ph, width / pw);
    let mut out = Vec::with_capacity(gh * gw * ph * pw * channels);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..ph {
                for px in 0..pw {
                    let (y, x) = (gy * ph + py, gx * pw + px);
                    for c in 0..channels {
                        out.push(img[(c * height + y) * width + x]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// 3D variant; input layout [C, D, H, W], patch (pd, ph, pw).
#[allow(clippy::too_many_arguments)]
pub fn patchify_3d(
    img: &[f32],
    channels: usize,
    depth: usize,
    height: usize,
    width: usize,
    pd: usize,
    ph: usize,
    pw: usize,
) -> Result<Vec<f32>> {
    let kind = InputKind::Image3d { channels, depth, height, width, patch: [pd, ph, pw] };
    kind.validate()?;
    if img.len() != channels * depth * height * width {
        return Err(Error::BadShape {
            op: "patchify",
            detail: format!("{} values vs {channels}x{depth}x{height}x{width}", img.len()),
        });
    }
    let (gd, gh, gw) = (depth / pd, height / ph, width / pw);
    let mut out = Vec::with_capacity(gd * gh * gw * pd * ph * pw * channels);
    for gz in 0..gd {
        for gy in 0..gh {
            for gx in 0..gw {
                for pz in 0..pd {
                    for py in 0..ph {
                        for px in 0..pw {
                            let (z, y, x) = (gz * pd + pz, gy * ph + py, gx * pw + px);
                            for c in 0..channels {
                                out.push(img[((c * depth + z) * height + y) * width + x]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// LayerNorm over the feature (last) axis.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    normalize_over_axis(x, x.rank() - 1, weight, bias, LAYER_NORM_EPS, None)
}

/// A configured model plus its parameter store.
pub struct ViTModel<T: Element> {
    pub config: ViTConfig,
    pub params: ParamStore<T>,
}

/// One forward pass: logits plus the parameter bindings, so gradients
/// can be read back by name after `backward`.
pub struct ForwardPass<T: Element> {
    pub logits: Tensor<T>,
    pub bound: Vec<(String, Tensor<T>)>,
}

impl<T: Element> ViTModel<T> {
    /// Fresh model; weights are truncated-normal (std 0.02) keyed by
    /// (seed, parameter name), norms start at identity, class token at
    /// zero.
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Stream::new(seed);
        let mut params = ParamStore::new();
        for spec in config.expected_parameters() {
            let n = numel(&spec.shape);
            let data: Vec<T> = match spec.init {
                InitKind::Zeros => vec![T::zero(); n],
                InitKind::Ones => vec![T::one(); n],
                InitKind::TruncNormal => {
                    let mut s = root.named(&spec.name);
                    (0..n).map(|_| T::from_f64(s.trunc_gaussian(INIT_STD)).unwrap()).collect()
                }
            };
            params.insert(&spec.name, data, &spec.shape)?;
        }
        Ok(ViTModel { config, params })
    }

    /// Wraps an existing store (e.g. from a checkpoint), validating that
    /// it matches the config exactly.
    pub fn from_store(config: ViTConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = config.expected_parameters();
        let mut offending = Vec::new();
        for spec in &expected {
            match params.get(&spec.name) {
                Some(p) if p.shape == spec.shape => {}
                _ => offending.push(spec.name.clone()),
            }
        }
        for name in params.names() {
            if !expected.iter().any(|s| s.name == name) {
                offending.push(name.to_string());
            }
        }
        if !offending.is_empty() {
            offending.sort();
            offending.dedup();
            return Err(Error::ShapeVsConfig { names: offending });
        }
        Ok(ViTModel { config, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.total_elements()
    }

    /// Full forward pass to logits [B, num_classes].
    pub fn forward(
        &self,
        graph: &Graph<T>,
        batch: &TokenBatch<T>,
        trainable: bool,
    ) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        let dim = cfg.input.token_dim();
        if batch.dim != dim {
            return Err(Error::BadShape {
                op: "forward",
                detail: format!("token dim {} does not match config {}", batch.dim, dim),
            });
        }
        if batch.seq > cfg.max_sequence {
            return Err(Error::Config(format!(
                "sequence length {} exceeds the positional table ({})",
                batch.seq, cfg.max_sequence
            )));
        }
        let (b, n, dp) = (batch.batch, batch.seq, cfg.model_dim);
        let mut binder = Binder::new(graph, &self.params, trainable);

        let x = graph.constant(batch.tokens.clone(), &[b, n, dim])?;
        let x = x.matmul(&binder.bind("embed.weight")?)?.add(&binder.bind("embed.bias")?)?;
        let cls = binder.bind("cls_token")?.reshape(&[1, 1, dp])?.expand(&[b, 1, dp])?;
        let seq = ops::concat(&[&cls, &x], 1)?;
        let pos = binder.bind("pos_embed")?.slice(0, 0, n + 1)?;
        let mut seq = seq.add(&pos)?;

        // class token is always a real position
        let mask = match &batch.mask {
            Some(m) => {
                let mut full = Vec::with_capacity(b * (n + 1));
                for row in m.chunks(n) {
                    full.push(T::one());
                    full.extend_from_slice(row);
                }
                Some(graph.constant(full, &[b, n + 1])?)
            }
            None => None,
        };

        for i in 0..cfg.layers {
            let scope = format!("blocks.{i}");
            let ln1 = layer_norm(
                &seq,
                &binder.bind(&format!("{scope}.ln1.weight"))?,
                &binder.bind(&format!("{scope}.ln1.bias"))?,
            )?;
            let attn_params =
                AttentionParams::bind(&mut binder, &format!("{scope}.attn"), &cfg.attention)?;
            let att = attention_forward(&cfg.attention, &attn_params, &ln1, mask.as_ref())?;
            let h = seq.add(&att)?;
            let ln2 = layer_norm(
                &h,
                &binder.bind(&format!("{scope}.ln2.weight"))?,
                &binder.bind(&format!("{scope}.ln2.bias"))?,
            )?;
            let m = ln2
                .matmul(&binder.bind(&format!("{scope}.mlp.fc1.weight"))?)?
                .add(&binder.bind(&format!("{scope}.mlp.fc1.bias"))?)?
                .gelu()
                .matmul(&binder.bind(&format!("{scope}.mlp.fc2.weight"))?)?
                .add(&binder.bind(&format!("{scope}.mlp.fc2.bias"))?)?;
            seq = h.add(&m)?;
        }

        let fin = layer_norm(&seq, &binder.bind("norm.weight")?, &binder.bind("norm.bias")?)?;
        let cls_out = fin.slice(1, 0, 1)?.reshape(&[b, dp])?;
        let logits = cls_out.matmul(&binder.bind("head.weight")?)?.add(&binder.bind("head.bias")?)?;
        Ok(ForwardPass { logits, bound: binder.into_bound() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(mechanism: Mechanism) -> ViTConfig {
        ViTConfig {
            input: InputKind::Image2d { channels: 1, height: 16, width: 16, patch: [8, 8] },
            model_dim: 12,
            attention: AttentionConfig::new(mechanism, 12, 8, 2),
            layers: 2,
            mlp_dim: 16,
            num_classes: 2,
            max_sequence: 4,
        }
    }

    #[test]
    fn patchify_2d_spec_dimensions() {
        let img = vec![0.0f32; 3 * 224 * 224];
        let toks = patchify_2d(&img, 3, 224, 224, 16, 16).unwrap();
        assert_eq!(toks.len(), 196 * 768);

        let kind = InputKind::Image2d { channels: 3, height: 1024, width: 1024, patch: [16, 16] };
        assert_eq!(kind.token_count(), Some(4096));

        let kind3 =
            InputKind::Image3d { channels: 1, depth: 32, height: 256, width: 256, patch: [4, 16, 16] };
        assert_eq!(kind3.token_count(), Some(2048));
        assert_eq!(kind3.token_dim(), 1024);
    }

    #[test]
    fn patchify_rejects_non_divisible_axis() {
        let img = vec![0.0f32; 10 * 10];
        let err = patchify_2d(&img, 1, 10, 10, 3, 5).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("height"), "error should name the axis: {msg}");
    }

    #[test]
    fn patchify_is_raster_order_channel_last() {
        // 1x4x4 image, patch 2x2: patch (0,0) = rows 0..2, cols 0..2
        let img: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let toks = patchify_2d(&img, 1, 4, 4, 2, 2).unwrap();
        assert_eq!(&toks[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&toks[4..8], &[2.0, 3.0, 6.0, 7.0]);

        // two channels: channel-last inside each pixel
        let mut img2 = vec![0.0f32; 2 * 2 * 2];
        for (i, v) in img2.iter_mut().enumerate() {
            *v = i as f32;
        }
        let toks2 = patchify_2d(&img2, 2, 2, 2, 2, 2).unwrap();
        // pixel (0,0): c0 at 0, c1 at 4
        assert_eq!(&toks2[0..2], &[0.0, 4.0]);
    }

    #[test]
    fn preset_hyperparameters_match_expected_values() {
        let c2 = ViTConfig::vit_2d(Mechanism::SeqNormFree, 3, 224, 224, 2);
        assert_eq!(
            (c2.model_dim, c2.attention.inner_dim, c2.layers, c2.attention.heads, c2.mlp_dim),
            (1024, 512, 8, 8, 1024)
        );
        match &c2.input {
            InputKind::Image2d { patch, .. } => assert_eq!(patch, &[16, 16]),
            _ => panic!("wrong input kind"),
        }
        let cw = ViTConfig::vit_wsi(Mechanism::Vanilla, 768, 2);
        assert_eq!(
            (cw.model_dim, cw.attention.inner_dim, cw.layers, cw.attention.heads, cw.mlp_dim),
            (512, 512, 2, 8, 512)
        );
        let c3 = ViTConfig::vit_3d(Mechanism::SimA, 1, 32, 256, 256, 2);
        assert_eq!(
            (c3.model_dim, c3.attention.inner_dim, c3.layers, c3.attention.heads, c3.mlp_dim),
            (1024, 512, 8, 8, 1024)
        );
        match &c3.input {
            InputKind::Image3d { patch, .. } => assert_eq!(patch, &[4, 16, 16]),
            _ => panic!("wrong input kind"),
        }
        c2.validate().unwrap();
        cw.validate().unwrap();
        c3.validate().unwrap();
    }

    #[test]
    fn constructed_model_matches_config_parameter_count() {
        for mech in Mechanism::ALL {
            let cfg = tiny_config(mech);
            let model: ViTModel<f32> = ViTModel::new(cfg.clone(), 1).unwrap();
            assert_eq!(model.num_parameters(), cfg.parameter_count());
        }
    }

    #[test]
    fn forward_shape_and_finiteness_at_init() {
        let cfg = tiny_config(Mechanism::SeqNormFree);
        let model: ViTModel<f32> = ViTModel::new(cfg.clone(), 7).unwrap();
        let img = vec![0.25f32; 16 * 16];
        let batch =
            TokenBatch::<f32>::from_images(&cfg.input, &[&img[..], &img[..], &img[..]]).unwrap();
        let g = Graph::new();
        let pass = model.forward(&g, &batch, false).unwrap();
        assert_eq!(pass.logits.shape(), vec![3, 2]);
        assert!(pass.logits.to_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let cfg = tiny_config(Mechanism::SeqNormFree);
        let model: ViTModel<f64> = ViTModel::new(cfg.clone(), 3).unwrap();
        let mut s = Stream::new(5);
        let img: Vec<f32> = (0..256).map(|_| s.gaussian() as f32).collect();
        let other: Vec<f32> = (0..256).map(|_| s.gaussian() as f32).collect();
        let batch =
            TokenBatch::<f64>::from_images(&cfg.input, &[&img[..], &other[..], &img[..]]).unwrap();
        let g = Graph::new();
        let logits = model.forward(&g, &batch, false).unwrap().logits.to_vec();
        assert_eq!(&logits[0..2], &logits[4..6], "rows 0 and 2 saw the same input");
        assert_ne!(&logits[0..2], &logits[2..4]);
    }

    #[test]
    fn fixed_seed_forward_is_bit_identical() {
        let cfg = tiny_config(Mechanism::SeqNormFree);
        let img = vec![0.5f32; 256];
        let run = || -> Vec<f64> {
            let model: ViTModel<f64> = ViTModel::new(cfg.clone(), 11).unwrap();
            let batch = TokenBatch::<f64>::from_images(&cfg.input, &[&img[..]]).unwrap();
            let g = Graph::new();
            model.forward(&g, &batch, false).unwrap().logits.to_vec()
        };
        crate::kernels::set_parallel(false);
        let a = run();
        let b = run();
        crate::kernels::set_parallel(true);
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_beyond_positional_table_is_config_error() {
        let cfg = tiny_config(Mechanism::Vanilla);
        let model: ViTModel<f32> = ViTModel::new(cfg, 1).unwrap();
        let tokens = vec![0.0f32; 2 * 9 * 64];
        let batch = TokenBatch::new(tokens, 2, 9, 64, None).unwrap();
        let g = Graph::new();
        assert!(matches!(model.forward(&g, &batch, false), Err(Error::Config(_))));
    }

    #[test]
    fn store_mismatch_lists_offending_names() {
        let cfg = tiny_config(Mechanism::SeqNormFree);
        let vanilla = tiny_config(Mechanism::Vanilla);
        let donor: ViTModel<f32> = ViTModel::new(vanilla, 1).unwrap();
        match ViTModel::from_store(cfg, donor.params) {
            Err(Error::ShapeVsConfig { names }) => {
                assert!(names.iter().any(|n| n.contains("gamma_q")));
            }
            other => panic!("expected ShapeVsConfig, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn variable_length_sequences_pad_and_mask() {
        let a = vec![1.0f32; 3 * 4];
        let b = vec![2.0f32; 5 * 4];
        let batch = TokenBatch::<f32>::from_token_sequences(4, &[&a[..], &b[..]]).unwrap();
        assert_eq!((batch.batch, batch.seq, batch.dim), (2, 5, 4));
        let mask = batch.mask.expect("ragged batch needs a mask");
        assert_eq!(mask, vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(batch.tokens[3 * 4..5 * 4], vec![0.0; 8][..]);
    }
}
