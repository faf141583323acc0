//! A small ViT-style segmentation network.
//!
//! Tokens come from non-overlapping patches, pass through pre-norm transformer
//! blocks and are decoded by a per-dataset linear map to `patch_size² · K`
//! logits per token. When `moe_enabled` is set, the second FFN projection of
//! every block is split into a shared expert of width `(1-α)·C` and one
//! dataset-specific expert of width `α·C` per dataset; their outputs are
//! concatenated along the channel axis.
//!
//! Logit rows produced by [`decode`] are in *patch order*: row
//! `token · p² + (y mod p) · p + (x mod p)` holds pixel `(y, x)`. Use
//! [`PatchOrder`] to move label maps and logit fields between pixel order and
//! patch order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, BinaryTensor};
use crate::rng::{self, Slot};
use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub ffn_hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub num_datasets: usize,
    pub alpha: f64,
    pub moe_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 32,
            ffn_hidden: 64,
            depth: 2,
            heads: 2,
            num_classes: 4,
            num_datasets: 1,
            alpha: 0.25,
            moe_enabled: false,
        }
    }
}

impl ModelConfig {
    /// Reference configuration used for parameter accounting.
    pub fn toy() -> Self {
        ModelConfig {
            embed_dim: 64,
            ffn_hidden: 256,
            depth: 4,
            heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        if self.num_classes == 0 || self.num_datasets == 0 {
            return bad("num_classes and num_datasets must be >= 1".into());
        }
        alpha_split(self.alpha, self.embed_dim)?;
        Ok(())
    }

    pub fn ffn_out(&self) -> usize {
        self.embed_dim
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// `(shared, specific)` output widths of the second FFN projection.
    pub fn expert_widths(&self) -> (usize, usize) {
        if self.moe_enabled {
            let specific = alpha_split(self.alpha, self.ffn_out()).expect("validated");
            (self.ffn_out() - specific, specific)
        } else {
            (self.ffn_out(), 0)
        }
    }
}

/// Width `α·C` of a specific expert; errors unless it is a whole number.
pub fn alpha_split(alpha: f64, channels: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    let w = alpha * channels as f64;
    let r = w.round();
    if (w - r).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "alpha {alpha} gives non-integral specific width {w} for C = {channels}"
        )));
    }
    Ok(r as usize)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub norm1: Norm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub norm2: Norm<T>,
    pub ffn_in: Linear<T>,
    pub shared_expert: Linear<T>,
    pub specific_experts: Vec<Linear<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<T> {
    pub proj: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    pub patch_embed: Linear<T>,
    pub pos_embed: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm: Norm<T>,
    pub decoders: Vec<DecoderParams<T>>,
}

type MapFn<'a, 's, T, U> = &'a mut dyn FnMut(&str, &'s T) -> U;

impl<T> Linear<T> {
    fn map<'s, U>(&'s self, prefix: &str, f: MapFn<'_, 's, T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> Norm<T> {
    fn map<'s, U>(&'s self, prefix: &str, f: MapFn<'_, 's, T, U>) -> Norm<U> {
        Norm {
            gain: f(&format!("{prefix}.gain"), &self.gain),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<T> NetParams<T> {
    /// Rebuild the structure with every buffer transformed by `f(name, buffer)`.
    /// Buffers are visited in a fixed order which also defines checkpoint order.
    pub fn map<'s, U>(&'s self, f: MapFn<'_, 's, T, U>) -> NetParams<U> {
        let patch_embed = self.patch_embed.map("patch_embed", f);
        let pos_embed = f("pos_embed", &self.pos_embed);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let p = format!("blocks.{i}");
                BlockParams {
                    norm1: b.norm1.map(&format!("{p}.norm1"), f),
                    query: b.query.map(&format!("{p}.attn.query"), f),
                    key: b.key.map(&format!("{p}.attn.key"), f),
                    value: b.value.map(&format!("{p}.attn.value"), f),
                    output: b.output.map(&format!("{p}.attn.output"), f),
                    norm2: b.norm2.map(&format!("{p}.norm2"), f),
                    ffn_in: b.ffn_in.map(&format!("{p}.ffn.fc1"), f),
                    shared_expert: b.shared_expert.map(&format!("{p}.ffn.shared"), f),
                    specific_experts: b
                        .specific_experts
                        .iter()
                        .enumerate()
                        .map(|(t, e)| e.map(&format!("{p}.ffn.specific.{t}"), f))
                        .collect(),
                }
            })
            .collect();
        let norm = self.norm.map("norm", f);
        let decoders = self
            .decoders
            .iter()
            .enumerate()
            .map(|(t, d)| DecoderParams {
                proj: d.proj.map(&format!("decoders.{t}"), f),
            })
            .collect();
        NetParams {
            patch_embed,
            pos_embed,
            blocks,
            norm,
            decoders,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &T)) {
        self.map(&mut |name, t| f(name, t));
    }

    /// Buffers in visit order.
    pub fn flatten(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    /// Mutable buffers in visit order.
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        fn lin<T>(l: &mut Linear<T>, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
            f(&format!("{p}.weight"), &mut l.weight);
            f(&format!("{p}.bias"), &mut l.bias);
        }
        fn nrm<T>(l: &mut Norm<T>, p: &str, f: &mut dyn FnMut(&str, &mut T)) {
            f(&format!("{p}.gain"), &mut l.gain);
            f(&format!("{p}.bias"), &mut l.bias);
        }
        lin(&mut self.patch_embed, "patch_embed", f);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            nrm(&mut b.norm1, &format!("{p}.norm1"), f);
            lin(&mut b.query, &format!("{p}.attn.query"), f);
            lin(&mut b.key, &format!("{p}.attn.key"), f);
            lin(&mut b.value, &format!("{p}.attn.value"), f);
            lin(&mut b.output, &format!("{p}.attn.output"), f);
            nrm(&mut b.norm2, &format!("{p}.norm2"), f);
            lin(&mut b.ffn_in, &format!("{p}.ffn.fc1"), f);
            lin(&mut b.shared_expert, &format!("{p}.ffn.shared"), f);
            for (t, e) in b.specific_experts.iter_mut().enumerate() {
                lin(e, &format!("{p}.ffn.specific.{t}"), f);
            }
        }
        nrm(&mut self.norm, "norm", f);
        for (t, d) in self.decoders.iter_mut().enumerate() {
            lin(&mut d.proj, &format!("decoders.{t}"), f);
        }
    }
}

fn trunc_normal(shape: &[usize], seed: u64, name: &str) -> Tensor {
    let mut rng = rng::stream(seed, name, 0, Slot::Init);
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        if z.abs() <= 2.0 {
            break z * INIT_STD;
        }
    })
}

fn init_linear(prefix: &str, fan_in: usize, fan_out: usize, seed: u64) -> Linear<Tensor> {
    Linear {
        weight: trunc_normal(&[fan_in, fan_out], seed, &format!("{prefix}.weight")),
        bias: Tensor::zeros(&[fan_out]),
    }
}

fn init_norm(d: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::full(&[d], 1.0),
        bias: Tensor::zeros(&[d]),
    }
}

fn init_decoder(config: &ModelConfig, t: usize, classes: usize, seed: u64) -> DecoderParams<Tensor> {
    let p2 = config.patch_size * config.patch_size;
    DecoderParams {
        proj: init_linear(&format!("decoders.{t}"), config.embed_dim, p2 * classes, seed),
    }
}

/// Network parameters plus the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub config: ModelConfig,
    pub params: NetParams<Tensor>,
}

impl SegNet {
    /// Fresh network with `config.num_datasets` decoders of `config.num_classes`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let classes = vec![config.num_classes; config.num_datasets];
        Self::init_with_classes(config, &classes, seed)
    }

    /// Fresh network with one decoder per entry of `decoder_classes`.
    pub fn init_with_classes(config: &ModelConfig, decoder_classes: &[usize], seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.num_datasets = decoder_classes.len();
        config.validate()?;
        if decoder_classes.contains(&0) {
            return Err(Error::Config("decoder with zero classes".into()));
        }
        let d = config.embed_dim;
        let hidden = config.ffn_hidden;
        let (shared_w, specific_w) = config.expert_widths();
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("blocks.{i}");
                let specific_experts = if config.moe_enabled {
                    (0..config.num_datasets)
                        .map(|t| init_linear(&format!("{p}.ffn.specific.{t}"), hidden, specific_w, seed))
                        .collect()
                } else {
                    Vec::new()
                };
                BlockParams {
                    norm1: init_norm(d),
                    query: init_linear(&format!("{p}.attn.query"), d, d, seed),
                    key: init_linear(&format!("{p}.attn.key"), d, d, seed),
                    value: init_linear(&format!("{p}.attn.value"), d, d, seed),
                    output: init_linear(&format!("{p}.attn.output"), d, d, seed),
                    norm2: init_norm(d),
                    ffn_in: init_linear(&format!("{p}.ffn.fc1"), d, hidden, seed),
                    shared_expert: init_linear(&format!("{p}.ffn.shared"), hidden, shared_w, seed),
                    specific_experts,
                }
            })
            .collect();
        let params = NetParams {
            patch_embed: init_linear("patch_embed", config.patch_dim(), d, seed),
            pos_embed: trunc_normal(&[config.num_tokens(), d], seed, "pos_embed"),
            blocks,
            norm: init_norm(d),
            decoders: decoder_classes
                .iter()
                .enumerate()
                .map(|(t, &k)| init_decoder(&config, t, k, seed))
                .collect(),
        };
        Ok(SegNet { config, params })
    }

    pub fn decoder_classes(&self) -> Vec<usize> {
        let p2 = self.config.patch_size * self.config.patch_size;
        self.params
            .decoders
            .iter()
            .map(|d| d.proj.bias.numel() / p2)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Leaves for every buffer. `trainable = false` gives constants, which is
    /// the no-gradient evaluation mode.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> NetParams<Var> {
        self.params.map(&mut |_, t| {
            if trainable {
                graph.param(t)
            } else {
                graph.constant(t.clone())
            }
        })
    }

    /// Convert a plain-FFN network into FFN-MoE form with `num_datasets`
    /// specific experts. The shared expert keeps the first `(1-α)·C` output
    /// channels of the pre-trained second projection and every specific expert
    /// receives a copy of the remaining `α·C`, so the converted network computes
    /// exactly the same function. Decoders are copied from decoder 0 when the
    /// class counts agree and freshly initialized otherwise.
    pub fn to_moe(&self, alpha: f64, decoder_classes: &[usize], seed: u64) -> Result<SegNet> {
        if self.config.moe_enabled {
            return Err(Error::Config("network already has FFN-MoE experts".into()));
        }
        let mut config = self.config.clone();
        config.moe_enabled = true;
        config.alpha = alpha;
        config.num_datasets = decoder_classes.len();
        config.validate()?;
        let (shared_w, _) = config.expert_widths();
        let mut params = self.with_decoders_params(&config, decoder_classes, seed)?;
        for block in &mut params.blocks {
            let full = block.shared_expert.clone();
            let (shared, specific) = split_linear_cols(&full, shared_w);
            block.shared_expert = shared;
            block.specific_experts = vec![specific; config.num_datasets];
        }
        Ok(SegNet { config, params })
    }

    /// Same backbone with one decoder per entry of `decoder_classes` (MDF).
    pub fn with_decoders(&self, decoder_classes: &[usize], seed: u64) -> Result<SegNet> {
        if self.config.moe_enabled && decoder_classes.len() != self.config.num_datasets {
            return Err(Error::Config(
                "cannot change dataset count of an FFN-MoE network".into(),
            ));
        }
        let mut config = self.config.clone();
        config.num_datasets = decoder_classes.len();
        let params = self.with_decoders_params(&config, decoder_classes, seed)?;
        Ok(SegNet { config, params })
    }

    fn with_decoders_params(
        &self,
        config: &ModelConfig,
        decoder_classes: &[usize],
        seed: u64,
    ) -> Result<NetParams<Tensor>> {
        if decoder_classes.is_empty() || decoder_classes.contains(&0) {
            return Err(Error::Config("need at least one decoder with >= 1 class".into()));
        }
        let own = self.decoder_classes();
        let mut params = self.params.clone();
        params.decoders = decoder_classes
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                if own[0] == k {
                    self.params.decoders[0].clone()
                } else {
                    init_decoder(config, t, k, seed)
                }
            })
            .collect();
        Ok(params)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({
            "config": self.config,
            "decoder_classes": self.decoder_classes(),
        });
        let tensors: Vec<(String, BinaryTensor)> = self
            .params
            .flatten()
            .into_iter()
            .map(|(n, t)| (n, BinaryTensor::from_tensor_f64(t)))
            .collect();
        io::encode_checkpoint(&header, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.checkpoint_bytes())
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<SegNet> {
        let (meta, tensors) = io::decode_checkpoint(bytes).map_err(Error::Model)?;
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Model(format!("checkpoint config: {e}")))?;
        let classes: Vec<usize> = serde_json::from_value(meta["decoder_classes"].clone())
            .map_err(|e| Error::Model(format!("checkpoint decoder classes: {e}")))?;
        let mut net = SegNet::init_with_classes(&config, &classes, 0)
            .map_err(|e| Error::Model(e.to_string()))?;
        let mut by_name: BTreeMap<String, BinaryTensor> = tensors.into_iter().collect();
        let mut failure = None;
        net.params.for_each_mut(&mut |name, t| {
            match by_name.remove(name) {
                Some(b) if b.dims == t.shape() => *t = b.to_tensor(),
                Some(b) => {
                    failure.get_or_insert(format!("{name}: shape {:?} vs {:?}", b.dims, t.shape()));
                }
                None => {
                    failure.get_or_insert(format!("missing tensor {name}"));
                }
            };
        });
        if let Some(f) = failure {
            return Err(Error::Model(f));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Model(format!("unexpected tensor {extra}")));
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<SegNet> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Evaluate without gradients. Returns per-image logits in pixel order
    /// (`H×W×K`) and mean-pooled final token features.
    pub fn predict(&self, images: &[&Tensor], dataset_id: usize) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = forward(&mut g, &self.config, &p, images, dataset_id)?;
        let order = PatchOrder::new(&self.config);
        let k = g.value(out.logits).cols();
        let per_image = order.len();
        let logits = g
            .value(out.logits)
            .data()
            .chunks(per_image * k)
            .map(|chunk| order.logits_to_pixels(chunk, k))
            .collect();
        let d = self.config.embed_dim;
        let n = self.config.num_tokens();
        let features = g
            .value(out.tokens)
            .data()
            .chunks(n * d)
            .map(|img| {
                let mut f = vec![0.0; d];
                for tok in img.chunks(d) {
                    for (o, v) in f.iter_mut().zip(tok) {
                        *o += v;
                    }
                }
                f.iter_mut().for_each(|v| *v /= n as f64);
                f
            })
            .collect();
        Ok((logits, features))
    }
}

fn split_linear_cols(l: &Linear<Tensor>, at: usize) -> (Linear<Tensor>, Linear<Tensor>) {
    let (rows, cols) = (l.weight.rows(), l.weight.cols());
    let take = |lo: usize, hi: usize| {
        let w: Vec<f64> = (0..rows)
            .flat_map(|r| l.weight.data()[r * cols + lo..r * cols + hi].to_vec())
            .collect();
        Linear {
            weight: Tensor::new(vec![rows, hi - lo], w).unwrap(),
            bias: Tensor::new(vec![hi - lo], l.bias.data()[lo..hi].to_vec()).unwrap(),
        }
    };
    (take(0, at), take(at, cols))
}

/// Permutation between pixel order (`y·W + x`) and patch order.
#[derive(Debug, Clone)]
pub struct PatchOrder {
    /// `pixel_of_row[r]` is the pixel index held by patch-order row `r`.
    pixel_of_row: Vec<usize>,
}

impl PatchOrder {
    pub fn new(config: &ModelConfig) -> Self {
        let (s, p) = (config.image_size, config.patch_size);
        let grid = s / p;
        let mut pixel_of_row = vec![0; s * s];
        for y in 0..s {
            for x in 0..s {
                let token = (y / p) * grid + x / p;
                let row = token * p * p + (y % p) * p + x % p;
                pixel_of_row[row] = y * s + x;
            }
        }
        PatchOrder { pixel_of_row }
    }

    pub fn len(&self) -> usize {
        self.pixel_of_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_of_row.is_empty()
    }

    pub fn pixel_of_row(&self, row: usize) -> usize {
        self.pixel_of_row[row]
    }

    /// Reorder a per-pixel vector into patch order.
    pub fn to_patch_order<T: Copy>(&self, pixels: &[T]) -> Vec<T> {
        self.pixel_of_row.iter().map(|&p| pixels[p]).collect()
    }

    /// Convert one image's patch-order `(H·W)×K` logits into an `H×W×K` tensor.
    pub fn logits_to_pixels(&self, rows: &[f64], k: usize) -> Tensor {
        let n = self.len();
        let mut out = vec![0.0; n * k];
        for (r, &pix) in self.pixel_of_row.iter().enumerate() {
            out[pix * k..(pix + 1) * k].copy_from_slice(&rows[r * k..(r + 1) * k]);
        }
        let s = (n as f64).sqrt().round() as usize;
        Tensor::new(vec![s, s, k], out).unwrap()
    }
}

/// Flatten an `H×W×3` image into `N_tokens × (p²·3)` rows, row-major within a
/// patch with channels innermost.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Vec<f64>> {
    let s = config.image_size;
    if image.shape() != [s, s, 3] {
        return Err(Error::Dimension {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: vec![s, s, 3],
        });
    }
    let p = config.patch_size;
    let grid = s / p;
    let data = image.data();
    let mut out = Vec::with_capacity(s * s * 3);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..p {
                let y = gy * p + py;
                let start = (y * s + gx * p) * 3;
                out.extend_from_slice(&data[start..start + p * 3]);
            }
        }
    }
    Ok(out)
}

/// Patch embedding of a batch: `(B·N) × d` tokens including position vectors.
pub fn patch_embed(
    graph: &mut Graph,
    config: &ModelConfig,
    params: &NetParams<Var>,
    images: &[&Tensor],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(images.len() * config.image_size * config.image_size * 3);
    for img in images {
        rows.extend(patchify(img, config)?);
    }
    let n = images.len() * config.num_tokens();
    let x = graph.constant(Tensor::new(vec![n, config.patch_dim()], rows)?);
    let t = graph.matmul(x, params.patch_embed.weight)?;
    let t = graph.add_broadcast(t, params.patch_embed.bias)?;
    graph.add_broadcast(t, params.pos_embed)
}

fn linear(graph: &mut Graph, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = graph.matmul(x, l.weight)?;
    graph.add_broadcast(y, l.bias)
}

/// Pre-norm multi-head self-attention with residual: `x + Attn(LN(x))`.
/// `x` holds `batch` images of equal token count stacked by rows.
pub fn mhsa(
    graph: &mut Graph,
    config: &ModelConfig,
    block: &BlockParams<Var>,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let rows = graph.value(x).rows();
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Dimension {
            op: "mhsa",
            lhs: vec![rows],
            rhs: vec![batch],
        });
    }
    let n = rows / batch;
    let d = config.embed_dim;
    let dh = d / config.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let h = graph.layer_norm(x, block.norm1.gain, block.norm1.bias, LN_EPS)?;
    let q = linear(graph, h, &block.query)?;
    let k = linear(graph, h, &block.key)?;
    let v = linear(graph, h, &block.value)?;
    let mut per_image = Vec::with_capacity(batch);
    for b in 0..batch {
        let r = (b * n, (b + 1) * n);
        let mut heads = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let c = (hd * dh, (hd + 1) * dh);
            let qh = graph.slice(q, r, c)?;
            let kh = graph.slice(k, r, c)?;
            let vh = graph.slice(v, r, c)?;
            let scores = graph.matmul_nt(qh, kh)?;
            let scores = graph.scale(scores, scale);
            let attn = graph.softmax_rows(scores)?;
            heads.push(graph.matmul(attn, vh)?);
        }
        per_image.push(if heads.len() == 1 {
            heads[0]
        } else {
            graph.concat_cols(&heads)?
        });
    }
    let o = if per_image.len() == 1 {
        per_image[0]
    } else {
        graph.concat_rows(&per_image)?
    };
    let o = linear(graph, o, &block.output)?;
    graph.add(x, o)
}

/// FFN sub-layer with residual: `x + Concat(Shared(F), Specific_t(F))` where
/// `F = ReLU(LN(x)·W₁ + b₁)`. Without experts the shared projection is the
/// full second FFN layer.
pub fn ffn_moe(
    graph: &mut Graph,
    config: &ModelConfig,
    block: &BlockParams<Var>,
    x: Var,
    dataset_id: usize,
) -> Result<Var> {
    let h = graph.layer_norm(x, block.norm2.gain, block.norm2.bias, LN_EPS)?;
    let f = linear(graph, h, &block.ffn_in)?;
    let f = graph.relu(f);
    let shared = linear(graph, f, &block.shared_expert)?;
    let out = if config.moe_enabled {
        let expert = block.specific_experts.get(dataset_id).ok_or_else(|| {
            Error::Routing(format!(
                "dataset {dataset_id} has no specific expert ({} available)",
                block.specific_experts.len()
            ))
        })?;
        let specific = linear(graph, f, expert)?;
        graph.concat_cols(&[shared, specific])?
    } else {
        shared
    };
    graph.add(x, out)
}

/// Per-token linear decoder: `(B·N)×d → (B·N·p²)×K` in patch order.
pub fn decode(
    graph: &mut Graph,
    config: &ModelConfig,
    params: &NetParams<Var>,
    tokens: Var,
    dataset_id: usize,
) -> Result<Var> {
    let dec = params.decoders.get(dataset_id).ok_or_else(|| {
        Error::Routing(format!(
            "no decoder for dataset {dataset_id} ({} available)",
            params.decoders.len()
        ))
    })?;
    let logits = linear(graph, tokens, &dec.proj)?;
    let p2 = config.patch_size * config.patch_size;
    let width = graph.value(logits).cols();
    let rows = graph.value(logits).rows();
    graph.reshape(logits, &[rows * p2, width / p2])
}

pub struct ForwardOut {
    /// Patch-order logits, `(B·H·W) × K`.
    pub logits: Var,
    /// Final normalized tokens, `(B·N) × d`.
    pub tokens: Var,
}

pub fn forward(
    graph: &mut Graph,
    config: &ModelConfig,
    params: &NetParams<Var>,
    images: &[&Tensor],
    dataset_id: usize,
) -> Result<ForwardOut> {
    if dataset_id >= params.decoders.len() {
        return Err(Error::Routing(format!(
            "dataset {dataset_id} out of range ({} decoders)",
            params.decoders.len()
        )));
    }
    let mut x = patch_embed(graph, config, params, images)?;
    for block in &params.blocks {
        x = mhsa(graph, config, block, x, images.len())?;
        x = ffn_moe(graph, config, block, x, dataset_id)?;
    }
    let tokens = graph.layer_norm(x, params.norm.gain, params.norm.bias, LN_EPS)?;
    let logits = decode(graph, config, params, tokens, dataset_id)?;
    Ok(ForwardOut { logits, tokens })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "SDF")]
    Sdf,
    #[serde(rename = "MDF")]
    Mdf,
    #[serde(rename = "MoE-MDF")]
    MoeMdf,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdf" => Ok(Regime::Sdf),
            "mdf" => Ok(Regime::Mdf),
            "moe-mdf" | "moe_mdf" | "moemdf" => Ok(Regime::MoeMdf),
            _ => Err(Error::Config(format!("unknown regime `{s}`"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Sdf => "SDF",
            Regime::Mdf => "MDF",
            Regime::MoeMdf => "MoE-MDF",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    /// Backbone parameters shared by every dataset (for MoE-MDF: without the
    /// dataset-specific experts).
    pub backbone: u64,
    /// All decoders together.
    pub decoders: u64,
    /// All dataset-specific experts together.
    pub experts: u64,
    /// Parameters needed to serve one dataset.
    pub total_single: u64,
    /// Parameters needed to serve every dataset.
    pub total_multiple: u64,
}

/// Closed-form parameter count for serving `decoder_classes.len()` datasets.
pub fn param_count(config: &ModelConfig, regime: Regime, decoder_classes: &[usize]) -> Result<ParamReport> {
    config.validate()?;
    let t = decoder_classes.len() as u64;
    if t == 0 {
        return Err(Error::Config("need at least one dataset".into()));
    }
    let d = config.embed_dim as u64;
    let hidden = config.ffn_hidden as u64;
    let c = config.ffn_out() as u64;
    let p2 = (config.patch_size * config.patch_size) as u64;
    let lin = |i: u64, o: u64| i * o + o;
    let specific = if regime == Regime::MoeMdf {
        alpha_split(config.alpha, config.ffn_out())? as u64
    } else {
        0
    };
    let stem = lin(config.patch_dim() as u64, d) + config.num_tokens() as u64 * d;
    let block = 4 * d + 4 * lin(d, d) + lin(d, hidden) + lin(hidden, c - specific);
    let backbone = stem + config.depth as u64 * block + 2 * d;
    let expert_set = config.depth as u64 * lin(hidden, specific);
    let dec: Vec<u64> = decoder_classes
        .iter()
        .map(|&k| lin(d, p2 * k as u64))
        .collect();
    let decoders: u64 = dec.iter().sum();
    let report = match regime {
        Regime::Sdf => ParamReport {
            backbone,
            decoders,
            experts: 0,
            total_single: backbone + dec[0],
            total_multiple: t * backbone + decoders,
        },
        Regime::Mdf => ParamReport {
            backbone,
            decoders,
            experts: 0,
            total_single: backbone + dec[0],
            total_multiple: backbone + decoders,
        },
        Regime::MoeMdf => ParamReport {
            backbone,
            decoders,
            experts: t * expert_set,
            total_single: backbone + expert_set + dec[0],
            total_multiple: backbone + t * expert_set + decoders,
        },
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            ffn_hidden: 16,
            depth: 1,
            heads: 2,
            num_classes: 3,
            num_datasets: 1,
            alpha: 0.25,
            moe_enabled: false,
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = small();
        c.image_size = 10;
        assert!(c.validate().is_err());
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small();
        c.alpha = 0.3;
        assert!(c.validate().is_err());
        for alpha in [0.0, 0.125, 0.25, 0.5, 1.0] {
            let c = ModelConfig { alpha, moe_enabled: true, ..small() };
            assert!(c.validate().is_ok());
            let (s, t) = c.expert_widths();
            assert_eq!(s + t, c.ffn_out());
        }
    }

    #[test]
    fn alpha_quarter_widths() {
        let c = ModelConfig {
            embed_dim: 64,
            heads: 4,
            alpha: 0.25,
            moe_enabled: true,
            ..ModelConfig::default()
        };
        assert_eq!(c.expert_widths(), (48, 16));
    }

    #[test]
    fn token_count() {
        let c = ModelConfig { image_size: 32, patch_size: 8, ..ModelConfig::default() };
        assert_eq!(c.num_tokens(), 16);
    }

    #[test]
    fn patch_embed_zero_image_gives_position_vectors() {
        let c = small();
        let net = SegNet::init(&c, 3).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let img = Tensor::zeros(&[8, 8, 3]);
        let t = patch_embed(&mut g, &c, &p, &[&img]).unwrap();
        assert_eq!(g.value(t).data(), net.params.pos_embed.data());
    }

    #[test]
    fn single_pixel_touches_only_its_token() {
        let c = small();
        let mut net = SegNet::init(&c, 3).unwrap();
        net.params.pos_embed = Tensor::zeros(net.params.pos_embed.shape());
        let mut img = Tensor::zeros(&[8, 8, 3]);
        // pixel (5, 2) lives in token row 1, col 0 -> token 2
        img.data_mut()[(5 * 8 + 2) * 3 + 1] = 1.0;
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let t = patch_embed(&mut g, &c, &p, &[&img]).unwrap();
        for (tok, row) in g.value(t).data().chunks(8).enumerate() {
            let nonzero = row.iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, tok == 2, "token {tok}");
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let c = small();
        let net = SegNet::init(&c, 3).unwrap();
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let img = Tensor::zeros(&[4, 4, 3]);
        assert!(matches!(
            patch_embed(&mut g, &c, &p, &[&img]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn routing_errors() {
        let c = ModelConfig { moe_enabled: true, num_datasets: 2, ..small() };
        let net = SegNet::init(&c, 1).unwrap();
        let img = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(net.predict(&[&img], 2), Err(Error::Routing(_))));
        assert!(net.predict(&[&img], 1).is_ok());
    }

    #[test]
    fn patch_order_roundtrip() {
        let c = small();
        let order = PatchOrder::new(&c);
        let pixels: Vec<usize> = (0..64).collect();
        let rows = order.to_patch_order(&pixels);
        // first patch covers rows 0..4, cols 0..4
        assert_eq!(&rows[..5], &[0, 1, 2, 3, 8]);
        let mut seen = rows.clone();
        seen.sort_unstable();
        assert_eq!(seen, pixels);
    }

    #[test]
    fn checkpoint_roundtrip_and_mismatch() {
        let c = ModelConfig { moe_enabled: true, num_datasets: 2, ..small() };
        let net = SegNet::init(&c, 9).unwrap();
        let bytes = net.checkpoint_bytes();
        let back = SegNet::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.checkpoint_bytes(), bytes);
        assert!(matches!(
            SegNet::from_checkpoint_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn second_layer_closed_form() {
        // (256·48 + 48) + 4·(256·16 + 16) vs 4·(256·64 + 64)
        let toy = ModelConfig { alpha: 0.25, ..ModelConfig::toy() };
        let classes = [4; 4];
        let moe = param_count(&toy, Regime::MoeMdf, &classes).unwrap();
        let mdf = param_count(&toy, Regime::Mdf, &classes).unwrap();
        let depth = toy.depth as u64;
        let moe_second = (256 * 48 + 48) + 4 * (256 * 16 + 16);
        assert_eq!(moe_second, 28_784);
        assert_eq!(4 * (256 * 64 + 64), 65_792);
        let plain_second = 256 * 64 + 64;
        assert_eq!(
            moe.total_multiple,
            mdf.total_multiple + depth * (moe_second - plain_second)
        );
    }
}
