//! Teacher/student segmentation networks and the patch discriminators.
//!
//! The segmentation network is an encoder/decoder with instance-normalized
//! convolution blocks, max-pool downsampling, nearest-neighbour upsampling
//! and skip concatenation. Block `n` uses `k * 2^n` filters; every block
//! except the first encoder block starts with dropout. Besides per-voxel
//! class probabilities the forward pass exposes a [`FeaturePyramid`]: the
//! upsampled latents flowing between decoder scales (deepest level is the
//! upsampled center-block output), which the hierarchical discriminator
//! consumes scale by scale.
//!
//! Both discriminators are fully convolutional with four stride-2 blocks of
//! `k * 2^b` filters and a stride-1 output convolution, so score maps are
//! `input / 16` per axis. The hierarchical variant concatenates one pyramid
//! level in front of each block after the first; the plain variant sees only
//! `(x_pre, segmentation)`.
//!
//! Canonical parameter names (used by checkpoints, optimizers, gradients):
//! `encoder.<n>.{conv1,conv2}.{weight,bias}`, `encoder.<n>.{norm1,norm2}.{gamma,beta}`,
//! `center.*`, `decoder.<n>.*`, `output.{weight,bias}` for the segmentation
//! network; `block.<b>.conv.{weight,bias}`, `block.<b>.norm.{gamma,beta}`,
//! `final.{weight,bias}` for discriminators.

pub mod layers;

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::checkpoint::TensorArchive;
use crate::rng::{self, StreamDomain};
use crate::scalar::Scalar;
use crate::tensor::{concat_channels, split_channels, Tensor};
use layers::{
    dropout_backward, dropout_forward, leaky_relu_backward, leaky_relu_forward, maxpool2_backward,
    maxpool2_forward, softmax_channels, softmax_channels_backward, upsample2_backward,
    upsample2_forward, Conv, InstanceNorm, InstanceNormCache,
};

pub const CHECKPOINT_META_VERSION: u32 = 1;

/// Architecture hyper-parameters shared by the segmentation networks and the
/// discriminators built against them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Base filter count.
    pub k: usize,
    /// Encoder/decoder depth.
    pub scales: usize,
    /// Dropout probability.
    pub dropout_p: f64,
    /// Leaky ReLU negative slope.
    pub lrelu_slope: f64,
    /// Input channels (modalities) of the segmentation network.
    pub in_channels: usize,
    pub num_classes: usize,
    /// Spatial rank: 2 or 3.
    pub spatial_rank: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            k: 32,
            scales: 4,
            dropout_p: 0.2,
            lrelu_slope: 0.01,
            in_channels: 4,
            num_classes: 4,
            spatial_rank: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.scales < 1 {
            return Err(Error::Config("scales must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return Err(Error::Config(format!(
                "spatial_rank {} (want 2 or 3)",
                self.spatial_rank
            )));
        }
        if self.in_channels < 1 || self.num_classes < 2 {
            return Err(Error::Config(
                "need >= 1 input channel and >= 2 classes".into(),
            ));
        }
        Ok(())
    }

    /// Filters at scale `n`.
    pub fn filters(&self, n: usize) -> usize {
        self.k << n
    }

    fn check_input_dims(&self, dims: &[usize]) -> Result<()> {
        let div = 1usize << self.scales;
        if dims.len() != self.spatial_rank {
            return Err(Error::Shape(format!(
                "input rank {} != configured spatial rank {}",
                dims.len(),
                self.spatial_rank
            )));
        }
        for (axis, &d) in dims.iter().enumerate() {
            if d % div != 0 || d == 0 {
                return Err(Error::Shape(format!(
                    "input axis {axis} = {d} not divisible by 2^scales = {div}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-scale latents exposed by the segmentation decoder: level `n` has
/// spatial dims `input / 2^n` and `k * 2^(n+1)` channels.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_spatial(&self, n: usize) -> &[usize] {
        &self.levels[n].shape()[1..]
    }
}

/// Discriminator output: one raw (unbounded) score per receptive-field patch,
/// spatial dims `input / 16`.
#[derive(Debug, Clone)]
pub struct PatchScoreMap<T> {
    pub scores: Tensor<T>,
}

impl<T: Scalar> PatchScoreMap<T> {
    pub fn dims(&self) -> &[usize] {
        self.scores.shape()
    }
}

/// Named gradient accumulator keyed by canonical parameter names.
#[derive(Debug, Clone)]
pub struct GradStore<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for GradStore<T> {
    fn default() -> Self {
        GradStore {
            grads: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> GradStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, name: String, grad: Tensor<T>) {
        match self.grads.get_mut(&name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.grads.insert(name, grad);
            }
        }
    }

    pub fn merge(&mut self, other: GradStore<T>) {
        for (name, grad) in other.grads {
            self.accumulate(name, grad);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn scale(&mut self, s: T) {
        for grad in self.grads.values_mut() {
            grad.scale(s);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Anything with named trainable parameters.
pub trait ParamSet<T: Scalar> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

/// Exact count of trainable scalars.
pub fn count_parameters<T: Scalar>(net: &dyn ParamSet<T>) -> usize {
    let mut count = 0usize;
    net.visit_params(&mut |_, t| count += t.len());
    count
}

/// Fingerprint of the full parameter state (order-stable by canonical name).
pub fn params_digest<T: Scalar>(net: &dyn ParamSet<T>) -> u64 {
    let mut bytes = Vec::new();
    net.visit_params(&mut |name, t| {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes_vec());
        }
    });
    crate::io::checkpoint::fnv1a64(&bytes)
}

// ---------------------------------------------------------------------------
// Segmentation network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct CilPair<T> {
    conv: Conv<T>,
    norm: InstanceNorm<T>,
}

#[derive(Debug, Clone)]
struct SegBlock<T> {
    has_dropout: bool,
    cil1: CilPair<T>,
    cil2: CilPair<T>,
}

impl<T: Scalar> SegBlock<T> {
    fn init(
        in_c: usize,
        out_c: usize,
        has_dropout: bool,
        cfg: &NetworkConfig,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let rank = cfg.spatial_rank;
        let slope = cfg.lrelu_slope;
        SegBlock {
            has_dropout,
            cil1: CilPair {
                conv: Conv::init(in_c, out_c, 3, 1, 1, 1, rank, slope, rng),
                norm: InstanceNorm::init(out_c),
            },
            cil2: CilPair {
                conv: Conv::init(out_c, out_c, 3, 1, 1, 1, rank, slope, rng),
                norm: InstanceNorm::init(out_c),
            },
        }
    }
}

#[derive(Debug)]
struct SegBlockCache<T> {
    dropout_mask: Option<Vec<bool>>,
    conv1_in: Tensor<T>,
    norm1: InstanceNormCache<T>,
    act1_in: Tensor<T>,
    conv2_in: Tensor<T>,
    norm2: InstanceNormCache<T>,
    act2_in: Tensor<T>,
}

/// The teacher/student segmentation network.
#[derive(Debug, Clone)]
pub struct SegNet<T> {
    pub config: NetworkConfig,
    encoders: Vec<SegBlock<T>>,
    center: SegBlock<T>,
    decoders: Vec<SegBlock<T>>,
    output: Conv<T>,
}

/// Output of a segmentation forward pass.
#[derive(Debug, Clone)]
pub struct SegForward<T> {
    /// Per-voxel class probabilities, `[num_classes, spatial...]`.
    pub probs: Tensor<T>,
    pub pyramid: FeaturePyramid<T>,
}

#[derive(Debug)]
pub struct SegCache<T> {
    enc: Vec<SegBlockCache<T>>,
    pools: Vec<(Vec<usize>, Vec<u32>)>,
    center: SegBlockCache<T>,
    dec: Vec<SegBlockCache<T>>,
    output_in: Tensor<T>,
    probs: Tensor<T>,
}

impl<T: Scalar> SegNet<T> {
    pub fn init(config: NetworkConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let s = config.scales;
        let mut encoders = Vec::with_capacity(s);
        for n in 0..s {
            let in_c = if n == 0 {
                config.in_channels
            } else {
                config.filters(n - 1)
            };
            encoders.push(SegBlock::init(in_c, config.filters(n), n != 0, &config, rng));
        }
        let center = SegBlock::init(config.filters(s - 1), config.filters(s), true, &config, rng);
        let mut decoders = Vec::with_capacity(s);
        for n in 0..s {
            // Input: upsampled latents from below concatenated with the skip.
            let in_c = config.filters(n + 1) + config.filters(n);
            decoders.push(SegBlock::init(in_c, config.filters(n), true, &config, rng));
        }
        let output = Conv::init(
            config.k,
            config.num_classes,
            1,
            1,
            0,
            0,
            config.spatial_rank,
            config.lrelu_slope,
            rng,
        );
        Ok(SegNet {
            config,
            encoders,
            center,
            decoders,
            output,
        })
    }

    /// Seeded construction helper.
    pub fn init_seeded(config: NetworkConfig, seed: u64, role_tag: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, StreamDomain::Init, role_tag, 0);
        Self::init(config, &mut rng)
    }

    fn block_forward(
        &self,
        block: &SegBlock<T>,
        x: &Tensor<T>,
        rng: &mut Option<&mut ChaCha12Rng>,
    ) -> Result<(Tensor<T>, SegBlockCache<T>)> {
        let slope = T::from_f64(self.config.lrelu_slope);
        let (conv1_in, dropout_mask) = match (block.has_dropout, rng.as_deref_mut()) {
            (true, Some(r)) if self.config.dropout_p > 0.0 => {
                let (dropped, mask) = dropout_forward(x, self.config.dropout_p, r);
                (dropped, Some(mask))
            }
            _ => (x.clone(), None),
        };
        let z1 = block.cil1.conv.forward(&conv1_in)?;
        let (act1_in, norm1) = block.cil1.norm.forward(&z1);
        let h1 = leaky_relu_forward(&act1_in, slope);
        let z2 = block.cil2.conv.forward(&h1)?;
        let (act2_in, norm2) = block.cil2.norm.forward(&z2);
        let out = leaky_relu_forward(&act2_in, slope);
        Ok((
            out,
            SegBlockCache {
                dropout_mask,
                conv1_in,
                norm1,
                act1_in,
                conv2_in: h1,
                norm2,
                act2_in,
            },
        ))
    }

    fn block_backward(
        &self,
        block: &SegBlock<T>,
        cache: &SegBlockCache<T>,
        gy: &Tensor<T>,
        prefix: &str,
        grads: &mut GradStore<T>,
    ) -> Tensor<T> {
        let slope = T::from_f64(self.config.lrelu_slope);
        let g = leaky_relu_backward(&cache.act2_in, gy, slope);
        let (g, ggamma, gbeta) = block.cil2.norm.backward(&cache.norm2, &g);
        grads.accumulate(format!("{prefix}.norm2.gamma"), ggamma);
        grads.accumulate(format!("{prefix}.norm2.beta"), gbeta);
        let (g, gw, gb) = block.cil2.conv.backward(&cache.conv2_in, &g);
        grads.accumulate(format!("{prefix}.conv2.weight"), gw);
        grads.accumulate(format!("{prefix}.conv2.bias"), gb);
        let g = leaky_relu_backward(&cache.act1_in, &g, slope);
        let (g, ggamma, gbeta) = block.cil1.norm.backward(&cache.norm1, &g);
        grads.accumulate(format!("{prefix}.norm1.gamma"), ggamma);
        grads.accumulate(format!("{prefix}.norm1.beta"), gbeta);
        let (g, gw, gb) = block.cil1.conv.backward(&cache.conv1_in, &g);
        grads.accumulate(format!("{prefix}.conv1.weight"), gw);
        grads.accumulate(format!("{prefix}.conv1.bias"), gb);
        match &cache.dropout_mask {
            Some(mask) => dropout_backward(&g, mask, self.config.dropout_p),
            None => g,
        }
    }

    /// Forward pass. `dropout_rng: Some(_)` enables stochastic mode (training
    /// and MC sampling); `None` disables dropout and is fully deterministic.
    pub fn forward(
        &self,
        x: &Tensor<T>,
        dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<SegForward<T>> {
        self.forward_cached(x, dropout_rng).map(|(out, _)| out)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor<T>,
        mut dropout_rng: Option<&mut ChaCha12Rng>,
    ) -> Result<(SegForward<T>, SegCache<T>)> {
        if x.shape()[0] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {}",
                self.config.in_channels,
                x.shape()[0]
            )));
        }
        self.config.check_input_dims(&x.shape()[1..])?;
        let s = self.config.scales;

        let mut enc_caches = Vec::with_capacity(s);
        let mut enc_outs: Vec<Tensor<T>> = Vec::with_capacity(s);
        let mut pools = Vec::with_capacity(s);
        let mut a = x.clone();
        for block in &self.encoders {
            let (e, cache) = self.block_forward(block, &a, &mut dropout_rng)?;
            enc_caches.push(cache);
            let (pooled, argmax) = maxpool2_forward(&e);
            pools.push((e.shape().to_vec(), argmax));
            enc_outs.push(e);
            a = pooled;
        }
        let (center_out, center_cache) = self.block_forward(&self.center, &a, &mut dropout_rng)?;

        // Decoder: upsampled latents double as the feature pyramid.
        let mut levels: Vec<Option<Tensor<T>>> = vec![None; s];
        let mut dec_caches: Vec<Option<SegBlockCache<T>>> = (0..s).map(|_| None).collect();
        let mut below = center_out;
        let mut d0 = None;
        for n in (0..s).rev() {
            let u = upsample2_forward(&below);
            levels[n] = Some(u.clone());
            let cat = concat_channels(&[&u, &enc_outs[n]])?;
            let (d, cache) = self.block_forward(&self.decoders[n], &cat, &mut dropout_rng)?;
            dec_caches[n] = Some(cache);
            if n == 0 {
                d0 = Some(d);
                break;
            }
            below = d;
        }
        let output_in = d0.expect("scales >= 1");
        let logits = self.output.forward(&output_in)?;
        let probs = softmax_channels(&logits);

        let pyramid = FeaturePyramid {
            levels: levels.into_iter().map(|l| l.expect("filled")).collect(),
        };
        Ok((
            SegForward {
                probs: probs.clone(),
                pyramid,
            },
            SegCache {
                enc: enc_caches,
                pools,
                center: center_cache,
                dec: dec_caches.into_iter().map(|c| c.expect("filled")).collect(),
                output_in,
                probs,
            },
        ))
    }

    /// Backward pass: `g_probs` is the loss gradient with respect to the
    /// probabilities; `g_pyramid[n]`, when present, is the gradient flowing
    /// back into pyramid level `n` (from the hierarchical discriminator).
    /// Returns parameter gradients and the input gradient.
    pub fn backward(
        &self,
        cache: &SegCache<T>,
        g_probs: &Tensor<T>,
        g_pyramid: &[Option<Tensor<T>>],
    ) -> (GradStore<T>, Tensor<T>) {
        let s = self.config.scales;
        debug_assert!(g_pyramid.len() == s || g_pyramid.is_empty());
        let mut grads = GradStore::new();

        let g_logits = softmax_channels_backward(&cache.probs, g_probs);
        let (g_d, gw, gb) = self.output.backward(&cache.output_in, &g_logits);
        grads.accumulate("output.weight".into(), gw);
        grads.accumulate("output.bias".into(), gb);

        // Decoder chain upward: d[0] -> ... -> center.
        let mut g_skips: Vec<Option<Tensor<T>>> = (0..s).map(|_| None).collect();
        let mut g_d = g_d;
        let mut g_center = None;
        for n in 0..s {
            let g_cat = self.block_backward(
                &self.decoders[n],
                &cache.dec[n],
                &g_d,
                &format!("decoder.{n}"),
                &mut grads,
            );
            let u_ch = self.config.filters(n + 1);
            let skip_ch = self.config.filters(n);
            let mut parts = split_channels(&g_cat, &[u_ch, skip_ch]);
            let g_skip = parts.pop().expect("two parts");
            let mut g_u = parts.pop().expect("two parts");
            g_skips[n] = Some(g_skip);
            if let Some(Some(gp)) = g_pyramid.get(n) {
                g_u.add_assign(gp);
            }
            let g_below = upsample2_backward(&g_u);
            if n + 1 == s {
                g_center = Some(g_below);
            } else {
                g_d = g_below;
            }
        }

        let g_center = g_center.expect("set at deepest scale");
        let mut g_pool_out =
            self.block_backward(&self.center, &cache.center, &g_center, "center", &mut grads);

        // Encoder chain downward.
        let mut g_x = None;
        for n in (0..s).rev() {
            let (ref in_shape, ref argmax) = cache.pools[n];
            let mut g_e = maxpool2_backward(in_shape, argmax, &g_pool_out);
            if let Some(g_skip) = &g_skips[n] {
                g_e.add_assign(g_skip);
            }
            let g_in = self.block_backward(
                &self.encoders[n],
                &cache.enc[n],
                &g_e,
                &format!("encoder.{n}"),
                &mut grads,
            );
            if n == 0 {
                g_x = Some(g_in);
            } else {
                g_pool_out = g_in;
            }
        }
        (grads, g_x.expect("scales >= 1"))
    }

    pub fn to_archive(&self, role: &str) -> TensorArchive<T> {
        let meta = serde_json::json!({
            "net": "segnet",
            "version": CHECKPOINT_META_VERSION,
            "role": role,
            "config": self.config,
        });
        let mut archive = TensorArchive::new(meta);
        self.visit_params(&mut |name, t| archive.insert(name, t.clone()));
        archive
    }

    pub fn from_archive(archive: &TensorArchive<T>) -> Result<(Self, String)> {
        if archive.meta["net"] != "segnet" {
            return Err(Error::Checkpoint(format!(
                "expected a segnet checkpoint, found {:?}",
                archive.meta["net"]
            )));
        }
        let config: NetworkConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
        let role = archive.meta["role"].as_str().unwrap_or("unknown").to_string();
        let mut net = SegNet::init_seeded(config, 0, 0)?;
        load_params(&mut net, archive)?;
        Ok((net, role))
    }

    pub fn save(&self, path: &std::path::Path, role: &str) -> Result<()> {
        self.to_archive(role).write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, String)> {
        let archive = TensorArchive::read(path)?;
        Self::from_archive(&archive)
    }
}

fn visit_block<T: Scalar>(
    block: &SegBlock<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor<T>),
) {
    f(&format!("{prefix}.conv1.weight"), &block.cil1.conv.weight);
    f(&format!("{prefix}.conv1.bias"), &block.cil1.conv.bias);
    f(&format!("{prefix}.norm1.gamma"), &block.cil1.norm.gamma);
    f(&format!("{prefix}.norm1.beta"), &block.cil1.norm.beta);
    f(&format!("{prefix}.conv2.weight"), &block.cil2.conv.weight);
    f(&format!("{prefix}.conv2.bias"), &block.cil2.conv.bias);
    f(&format!("{prefix}.norm2.gamma"), &block.cil2.norm.gamma);
    f(&format!("{prefix}.norm2.beta"), &block.cil2.norm.beta);
}

fn visit_block_mut<T: Scalar>(
    block: &mut SegBlock<T>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<T>),
) {
    f(&format!("{prefix}.conv1.weight"), &mut block.cil1.conv.weight);
    f(&format!("{prefix}.conv1.bias"), &mut block.cil1.conv.bias);
    f(&format!("{prefix}.norm1.gamma"), &mut block.cil1.norm.gamma);
    f(&format!("{prefix}.norm1.beta"), &mut block.cil1.norm.beta);
    f(&format!("{prefix}.conv2.weight"), &mut block.cil2.conv.weight);
    f(&format!("{prefix}.conv2.bias"), &mut block.cil2.conv.bias);
    f(&format!("{prefix}.norm2.gamma"), &mut block.cil2.norm.gamma);
    f(&format!("{prefix}.norm2.beta"), &mut block.cil2.norm.beta);
}

impl<T: Scalar> ParamSet<T> for SegNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (n, b) in self.encoders.iter().enumerate() {
            visit_block(b, &format!("encoder.{n}"), f);
        }
        visit_block(&self.center, "center", f);
        for (n, b) in self.decoders.iter().enumerate() {
            visit_block(b, &format!("decoder.{n}"), f);
        }
        f("output.weight", &self.output.weight);
        f("output.bias", &self.output.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, b) in self.encoders.iter_mut().enumerate() {
            visit_block_mut(b, &format!("encoder.{n}"), f);
        }
        visit_block_mut(&mut self.center, "center", f);
        for (n, b) in self.decoders.iter_mut().enumerate() {
            visit_block_mut(b, &format!("decoder.{n}"), f);
        }
        f("output.weight", &mut self.output.weight);
        f("output.bias", &mut self.output.bias);
    }
}

/// Fill a network's parameters from an archive; names and shapes must match
/// exactly, and the archive must contain no extras.
pub fn load_params<T: Scalar>(
    net: &mut impl ParamSet<T>,
    archive: &TensorArchive<T>,
) -> Result<()> {
    let mut missing = Vec::new();
    let mut used = 0usize;
    let mut shape_err = None;
    net.visit_params_mut(&mut |name, t| {
        match archive.get(name) {
            Some(src) => {
                if src.shape() != t.shape() {
                    shape_err.get_or_insert_with(|| {
                        format!(
                            "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                            src.shape(),
                            t.shape()
                        )
                    });
                } else {
                    *t = src.clone();
                    used += 1;
                }
            }
            None => missing.push(name.to_string()),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::Checkpoint(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint missing parameters: {missing:?}"
        )));
    }
    if used != archive.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model consumed {used}",
            archive.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Patch discriminators
// ---------------------------------------------------------------------------

pub const DISC_BLOCKS: usize = 4;

#[derive(Debug, Clone)]
struct DiscBlock<T> {
    conv: Conv<T>,
    norm: Option<InstanceNorm<T>>,
}

/// Discriminator construction parameters. `network` mirrors the segmentation
/// config it pairs with, except `in_channels` counts the pre-contrast stack
/// fed to the discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub network: NetworkConfig,
    pub hierarchical: bool,
}

/// Fully convolutional patch discriminator; hierarchical mode injects one
/// pyramid level before each block after the first.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator<T> {
    pub config: DiscriminatorConfig,
    blocks: Vec<DiscBlock<T>>,
    final_conv: Conv<T>,
}

#[derive(Debug)]
pub struct DiscCache<T> {
    block_inputs: Vec<Tensor<T>>,
    norms: Vec<Option<InstanceNormCache<T>>>,
    act_ins: Vec<Tensor<T>>,
    final_in: Tensor<T>,
}

/// Gradients flowing out of a discriminator backward pass.
#[derive(Debug)]
pub struct DiscInputGrads<T> {
    pub g_xpre: Tensor<T>,
    pub g_seg: Tensor<T>,
    /// Per pyramid level; `None` where the level was not consumed.
    pub g_pyramid: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> PatchDiscriminator<T> {
    /// Channels injected in front of block `b` (1-based), beyond the HD
    /// feature stream itself.
    fn injected_channels(cfg: &DiscriminatorConfig, b: usize) -> usize {
        if !cfg.hierarchical || b < 2 {
            return 0;
        }
        let level = b - 1;
        if level < cfg.network.scales {
            // Pyramid level `n` carries k * 2^(n+1) channels.
            cfg.network.filters(level + 1)
        } else {
            0
        }
    }

    pub fn init(config: DiscriminatorConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.network.validate()?;
        let net = &config.network;
        let rank = net.spatial_rank;
        let slope = net.lrelu_slope;
        let mut blocks = Vec::with_capacity(DISC_BLOCKS);
        let mut prev_out = net.in_channels + net.num_classes;
        for b in 1..=DISC_BLOCKS {
            let in_c = prev_out + Self::injected_channels(&config, b);
            let out_c = net.filters(b);
            blocks.push(DiscBlock {
                conv: Conv::init(in_c, out_c, 4, 2, 1, 1, rank, slope, rng),
                norm: (b >= 2).then(|| InstanceNorm::init(out_c)),
            });
            prev_out = out_c;
        }
        // Stride-1 output conv with asymmetric padding preserves dims.
        let final_conv = Conv::init(prev_out, 1, 4, 1, 1, 2, rank, slope, rng);
        Ok(PatchDiscriminator {
            config,
            blocks,
            final_conv,
        })
    }

    pub fn init_seeded(config: DiscriminatorConfig, seed: u64, role_tag: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, StreamDomain::Init, role_tag, 0);
        Self::init(config, &mut rng)
    }

    pub fn hierarchical(&self) -> bool {
        self.config.hierarchical
    }

    fn check_inputs(
        &self,
        x_pre: &Tensor<T>,
        seg: &Tensor<T>,
        pyramid: Option<&FeaturePyramid<T>>,
    ) -> Result<()> {
        let net = &self.config.network;
        let spatial = &x_pre.shape()[1..];
        if x_pre.shape()[0] != net.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} pre-contrast channels, got {}",
                net.in_channels,
                x_pre.shape()[0]
            )));
        }
        if seg.shape()[0] != net.num_classes || &seg.shape()[1..] != spatial {
            return Err(Error::Shape(format!(
                "segmentation input {:?} incompatible with x_pre {:?} / {} classes",
                seg.shape(),
                x_pre.shape(),
                net.num_classes
            )));
        }
        let div = 1usize << DISC_BLOCKS;
        for (axis, &d) in spatial.iter().enumerate() {
            if d % div != 0 || d == 0 {
                return Err(Error::Shape(format!(
                    "discriminator input axis {axis} = {d} not divisible by {div}"
                )));
            }
        }
        if self.config.hierarchical {
            let pyr = pyramid.ok_or_else(|| {
                Error::Shape("hierarchical discriminator needs a feature pyramid".into())
            })?;
            for b in 2..=DISC_BLOCKS {
                let level = b - 1;
                if Self::injected_channels(&self.config, b) == 0 {
                    continue;
                }
                if level >= pyr.num_levels() {
                    return Err(Error::Shape(format!(
                        "pyramid level {level} missing (pyramid has {})",
                        pyr.num_levels()
                    )));
                }
                let expect: Vec<usize> = spatial.iter().map(|&d| d >> level).collect();
                if pyr.level_spatial(level) != expect.as_slice() {
                    return Err(Error::Shape(format!(
                        "pyramid level {level}: dims {:?}, discriminator expects {:?}",
                        pyr.level_spatial(level),
                        expect
                    )));
                }
                let expect_ch = self.config.network.filters(level + 1);
                if pyr.levels[level].shape()[0] != expect_ch {
                    return Err(Error::Shape(format!(
                        "pyramid level {level}: {} channels, discriminator expects {expect_ch}",
                        pyr.levels[level].shape()[0]
                    )));
                }
            }
        } else if pyramid.is_some() {
            return Err(Error::Shape(
                "non-hierarchical discriminator takes no pyramid".into(),
            ));
        }
        Ok(())
    }

    /// Score a `(x_pre, segmentation[, pyramid])` sample.
    pub fn forward(
        &self,
        x_pre: &Tensor<T>,
        seg: &Tensor<T>,
        pyramid: Option<&FeaturePyramid<T>>,
    ) -> Result<PatchScoreMap<T>> {
        self.forward_cached(x_pre, seg, pyramid).map(|(s, _)| s)
    }

    pub fn forward_cached(
        &self,
        x_pre: &Tensor<T>,
        seg: &Tensor<T>,
        pyramid: Option<&FeaturePyramid<T>>,
    ) -> Result<(PatchScoreMap<T>, DiscCache<T>)> {
        self.check_inputs(x_pre, seg, pyramid)?;
        let slope = T::from_f64(self.config.network.lrelu_slope);
        let mut block_inputs = Vec::with_capacity(DISC_BLOCKS);
        let mut norms = Vec::with_capacity(DISC_BLOCKS);
        let mut act_ins = Vec::with_capacity(DISC_BLOCKS);
        let mut a = concat_channels(&[x_pre, seg])?;
        for (i, block) in self.blocks.iter().enumerate() {
            let b = i + 1;
            if Self::injected_channels(&self.config, b) > 0 {
                let level = &pyramid.expect("validated").levels[b - 1];
                a = concat_channels(&[&a, level])?;
            }
            block_inputs.push(a.clone());
            let z = block.conv.forward(&a)?;
            let act_in = match &block.norm {
                Some(norm) => {
                    let (normed, cache) = norm.forward(&z);
                    norms.push(Some(cache));
                    normed
                }
                None => {
                    norms.push(None);
                    z
                }
            };
            a = leaky_relu_forward(&act_in, slope);
            act_ins.push(act_in);
        }
        let final_in = a;
        let raw = self.final_conv.forward(&final_in)?;
        let spatial = raw.shape()[1..].to_vec();
        let scores = raw.reshaped(&spatial)?;
        Ok((
            PatchScoreMap { scores },
            DiscCache {
                block_inputs,
                norms,
                act_ins,
                final_in,
            },
        ))
    }

    /// Backward from the score gradient to parameter and input gradients.
    pub fn backward(
        &self,
        cache: &DiscCache<T>,
        g_scores: &Tensor<T>,
    ) -> Result<(GradStore<T>, DiscInputGrads<T>)> {
        let net = &self.config.network;
        let slope = T::from_f64(net.lrelu_slope);
        let mut grads = GradStore::new();
        let mut shape = vec![1usize];
        shape.extend_from_slice(g_scores.shape());
        let g_raw = g_scores.clone().reshaped(&shape)?;
        let (mut g_a, gw, gb) = self.final_conv.backward(&cache.final_in, &g_raw);
        grads.accumulate("final.weight".into(), gw);
        grads.accumulate("final.bias".into(), gb);

        let mut g_pyramid: Vec<Option<Tensor<T>>> = vec![None; net.scales];
        for i in (0..DISC_BLOCKS).rev() {
            let b = i + 1;
            let block = &self.blocks[i];
            let g = leaky_relu_backward(&cache.act_ins[i], &g_a, slope);
            let g = match (&block.norm, &cache.norms[i]) {
                (Some(norm), Some(ncache)) => {
                    let (g, ggamma, gbeta) = norm.backward(ncache, &g);
                    grads.accumulate(format!("block.{b}.norm.gamma"), ggamma);
                    grads.accumulate(format!("block.{b}.norm.beta"), gbeta);
                    g
                }
                _ => g,
            };
            let (g_in, gw, gb) = block.conv.backward(&cache.block_inputs[i], &g);
            grads.accumulate(format!("block.{b}.conv.weight"), gw);
            grads.accumulate(format!("block.{b}.conv.bias"), gb);
            let injected = Self::injected_channels(&self.config, b);
            if injected > 0 {
                let main_ch = g_in.shape()[0] - injected;
                let mut parts = split_channels(&g_in, &[main_ch, injected]);
                let g_level = parts.pop().expect("two parts");
                g_a = parts.pop().expect("two parts");
                g_pyramid[b - 1] = Some(g_level);
            } else {
                g_a = g_in;
            }
        }
        // g_a is now the gradient of concat(x_pre, seg).
        let pre_ch = net.in_channels;
        let seg_ch = net.num_classes;
        let mut parts = split_channels(&g_a, &[pre_ch, seg_ch]);
        let g_seg = parts.pop().expect("two parts");
        let g_xpre = parts.pop().expect("two parts");
        Ok((
            grads,
            DiscInputGrads {
                g_xpre,
                g_seg,
                g_pyramid,
            },
        ))
    }

    pub fn to_archive(&self) -> TensorArchive<T> {
        let meta = serde_json::json!({
            "net": "discriminator",
            "version": CHECKPOINT_META_VERSION,
            "config": self.config,
        });
        let mut archive = TensorArchive::new(meta);
        self.visit_params(&mut |name, t| archive.insert(name, t.clone()));
        archive
    }

    pub fn from_archive(archive: &TensorArchive<T>) -> Result<Self> {
        if archive.meta["net"] != "discriminator" {
            return Err(Error::Checkpoint(format!(
                "expected a discriminator checkpoint, found {:?}",
                archive.meta["net"]
            )));
        }
        let config: DiscriminatorConfig = serde_json::from_value(archive.meta["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
        let mut net = PatchDiscriminator::init_seeded(config, 0, 0)?;
        load_params(&mut net, archive)?;
        Ok(net)
    }
}

impl<T: Scalar> ParamSet<T> for PatchDiscriminator<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, block) in self.blocks.iter().enumerate() {
            let b = i + 1;
            f(&format!("block.{b}.conv.weight"), &block.conv.weight);
            f(&format!("block.{b}.conv.bias"), &block.conv.bias);
            if let Some(norm) = &block.norm {
                f(&format!("block.{b}.norm.gamma"), &norm.gamma);
                f(&format!("block.{b}.norm.beta"), &norm.beta);
            }
        }
        f("final.weight", &self.final_conv.weight);
        f("final.bias", &self.final_conv.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let b = i + 1;
            f(&format!("block.{b}.conv.weight"), &mut block.conv.weight);
            f(&format!("block.{b}.conv.bias"), &mut block.conv.bias);
            if let Some(norm) = &mut block.norm {
                f(&format!("block.{b}.norm.gamma"), &mut norm.gamma);
                f(&format!("block.{b}.norm.beta"), &mut norm.beta);
            }
        }
        f("final.weight", &mut self.final_conv.weight);
        f("final.bias", &mut self.final_conv.bias);
    }
}

/// Argmax over the class axis, producing a label map.
pub fn probs_to_labels<T: Scalar>(probs: &Tensor<T>) -> crate::volumes::SegmentationMap {
    let c = probs.shape()[0];
    let spatial: usize = probs.shape()[1..].iter().product();
    let pd = probs.data();
    let mut labels = vec![0u8; spatial];
    for (i, l) in labels.iter_mut().enumerate() {
        let mut best = pd[i];
        let mut best_c = 0usize;
        for ch in 1..c {
            let v = pd[ch * spatial + i];
            if v > best {
                best = v;
                best_c = ch;
            }
        }
        *l = best_c as u8;
    }
    crate::volumes::SegmentationMap::new(
        Tensor::from_vec(&probs.shape()[1..], labels).expect("sized"),
    )
    .expect("argmax labels < num_classes")
}

/// One-hot encode a label map as class probabilities.
pub fn labels_to_onehot<T: Scalar>(
    seg: &crate::volumes::SegmentationMap,
    num_classes: usize,
) -> Tensor<T> {
    let spatial: usize = seg.dims().iter().product();
    let mut shape = vec![num_classes];
    shape.extend_from_slice(seg.dims());
    let mut out = Tensor::zeros(&shape);
    let od = out.data_mut();
    for (i, &l) in seg.labels().data().iter().enumerate() {
        od[l as usize * spatial + i] = T::one();
    }
    out
}
