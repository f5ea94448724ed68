//! The two networks: S-Net (per-pixel class probabilities) and R-Net
//! (non-negative per-column layer thicknesses).
//!
//! Both share a U-Net trunk: at every encoder level two 3x3 conv + ReLU
//! blocks followed by 2x2 max pooling, two conv blocks at the bottleneck, and
//! at every decoder level nearest-neighbour upsampling, concatenation with the
//! matching encoder features (encoder first), and two conv blocks. A final 1x1
//! convolution maps to the output channels. R-Net flattens the trunk output
//! into one dense layer whose ReLU keeps every thickness non-negative.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::topology::ThicknessMap;

/// Initial weights of the R-Net dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseInit {
    /// Zero weights, bias set to `dense_bias_init`.
    Zero,
    /// He-normal weights, bias set to `dense_bias_init`.
    He,
    /// Output `(k, j)` starts as the sum of head channel `k` down column
    /// `j`, so a head that emits class indicators reads out thicknesses
    /// from the first step. Every weight stays trainable.
    ColumnSum,
}

/// Initial weights of the R-Net trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkInit {
    /// He-normal everywhere, as in S-Net.
    He,
    /// The full-resolution path (first encoder block, last decoder block,
    /// head) starts as a channel identity and the upsampled input of the
    /// last decoder block starts at zero, so the trunk initially passes its
    /// non-negative input through. Deeper levels keep He weights and join
    /// in as soon as those zero weights move. The pass-through is exact
    /// only when `base_channels` and `rnet_head_channels` are at least
    /// `num_classes` and `num_boundaries`; narrower nets drop channels.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub num_classes: usize,
    pub num_boundaries: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub rnet_head_channels: usize,
    pub rnet_trunk_init: TrunkInit,
    pub dense_init: DenseInit,
    pub dense_bias_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch_height: 128,
            patch_width: 128,
            num_classes: 10,
            num_boundaries: 9,
            base_channels: 16,
            levels: 4,
            rnet_head_channels: 9,
            rnet_trunk_init: TrunkInit::Identity,
            dense_init: DenseInit::ColumnSum,
            dense_bias_init: 0.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.patch_height == 0 || self.patch_width == 0 || self.base_channels == 0 {
            return cfg("patch extents and base_channels must be positive".into());
        }
        if self.levels == 0 || self.levels > 16 {
            return cfg(format!("levels must be in 1..=16, got {}", self.levels));
        }
        let step = 1usize << self.levels;
        if !self.patch_height.is_multiple_of(step) || !self.patch_width.is_multiple_of(step) {
            return cfg(format!(
                "patch {}x{} not divisible by 2^{} = {step}",
                self.patch_height, self.patch_width, self.levels
            ));
        }
        if self.num_classes < 2 || self.num_boundaries + 1 != self.num_classes {
            return cfg(format!(
                "num_boundaries ({}) must equal num_classes ({}) - 1",
                self.num_boundaries, self.num_classes
            ));
        }
        if self.num_classes > 255 {
            return cfg("at most 255 classes are supported".into());
        }
        if self.rnet_head_channels == 0 {
            return cfg("rnet_head_channels must be positive".into());
        }
        Ok(())
    }

    /// Parses a plain-text `key = value` file whose keys mirror the fields.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let cfg: NetConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        toml::to_string(self).expect("NetConfig serializes")
    }

    /// Short content hash used to check weight/config compatibility.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("NetConfig serializes");
        let digest = Sha256::digest(canon.as_bytes());
        hex::encode(&digest[..8])
    }

    /// Channel width at encoder `level`; `level == levels` is the bottleneck.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    SNet,
    RNet,
}

/// One step of the layer description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { name: String, in_channels: usize, out_channels: usize, kernel: usize },
    Relu,
    MaxPool,
    Upsample,
    ConcatSkip { level: usize },
    Dense { name: String, inputs: usize, outputs: usize },
    Softmax,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    kernels: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Debug, Clone)]
struct UNet {
    encoder: Vec<[ConvLayer; 2]>,
    bottleneck: [ConvLayer; 2],
    decoder: Vec<[ConvLayer; 2]>,
    head: ConvLayer,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayer {
    weights: ParamId,
    bias: ParamId,
}

/// A constructed network: layer description, parameters and configuration.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    kind: NetKind,
    config: NetConfig,
    layers: Vec<LayerSpec>,
    trunk: UNet,
    dense: Option<DenseLayer>,
    pub params: ParamSet<T>,
}

struct Builder<'a, T: Scalar> {
    params: ParamSet<T>,
    layers: Vec<LayerSpec>,
    /// `None` builds a zero-filled skeleton for loading stored weights.
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<T: Scalar> Builder<'_, T> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Tensor::zeros(shape);
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64(normal.sample(rng)))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> Result<ConvLayer> {
        let w = self.he(&[cout, cin, k, k], cin * k * k);
        let kernels = self.params.add(format!("{name}.weight"), w)?;
        let bias = self.params.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        self.layers.push(LayerSpec::Conv {
            name: name.to_string(),
            in_channels: cin,
            out_channels: cout,
            kernel: k,
        });
        Ok(ConvLayer { kernels, bias, padding: (k - 1) / 2 })
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Result<[ConvLayer; 2]> {
        let a = self.conv(&format!("{name}.conv0"), cin, cout, 3)?;
        self.layers.push(LayerSpec::Relu);
        let b = self.conv(&format!("{name}.conv1"), cout, cout, 3)?;
        self.layers.push(LayerSpec::Relu);
        Ok([a, b])
    }

    fn unet(&mut self, cfg: &NetConfig, in_channels: usize, out_channels: usize) -> Result<UNet> {
        let mut encoder = Vec::with_capacity(cfg.levels);
        let mut cin = in_channels;
        for level in 0..cfg.levels {
            encoder.push(self.block(&format!("enc{level}"), cin, cfg.width(level))?);
            self.layers.push(LayerSpec::MaxPool);
            cin = cfg.width(level);
        }
        let bottleneck = self.block("bottleneck", cin, cfg.width(cfg.levels))?;
        let mut decoder: Vec<Option<[ConvLayer; 2]>> = vec![None; cfg.levels];
        for level in (0..cfg.levels).rev() {
            self.layers.push(LayerSpec::Upsample);
            self.layers.push(LayerSpec::ConcatSkip { level });
            let cin = cfg.width(level) + cfg.width(level + 1);
            decoder[level] = Some(self.block(&format!("dec{level}"), cin, cfg.width(level))?);
        }
        let head = self.conv("head", cfg.width(0), out_channels, 1)?;
        Ok(UNet {
            encoder,
            bottleneck,
            decoder: decoder.into_iter().map(|d| d.expect("all levels built")).collect(),
            head,
        })
    }
}

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds S-Net: `1 x H x W` image to `C x H x W` logits.
pub fn build_snet<T: Scalar>(config: &NetConfig, seed: u64) -> Result<Network<T>> {
    snet_with(config, Some(&mut seeded(seed)))
}

fn snet_with<T: Scalar>(config: &NetConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Network<T>> {
    config.validate()?;
    let mut b = Builder { params: ParamSet::new(), layers: Vec::new(), rng };
    let trunk = b.unet(config, 1, config.num_classes)?;
    b.layers.push(LayerSpec::Softmax);
    Ok(Network {
        kind: NetKind::SNet,
        config: config.clone(),
        layers: b.layers,
        trunk,
        dense: None,
        params: b.params,
    })
}

/// Builds R-Net: `C x H x W` probabilities to `B * W` non-negative thicknesses.
pub fn build_rnet<T: Scalar>(config: &NetConfig, seed: u64) -> Result<Network<T>> {
    rnet_with(config, Some(&mut seeded(seed)))
}

fn rnet_with<T: Scalar>(config: &NetConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Network<T>> {
    config.validate()?;
    let mut b = Builder { params: ParamSet::new(), layers: Vec::new(), rng };
    let trunk = b.unet(config, config.num_classes, config.rnet_head_channels)?;
    if config.rnet_trunk_init == TrunkInit::Identity {
        if config.base_channels < config.num_classes || config.rnet_head_channels < config.num_boundaries {
            log::warn!(
                "identity trunk with {} base / {} head channels cannot pass {} classes through",
                config.base_channels,
                config.rnet_head_channels,
                config.num_classes
            );
        }
        for name in ["enc0.conv0", "enc0.conv1", "dec0.conv0", "dec0.conv1", "head"] {
            let id = b.params.id_of(&format!("{name}.weight")).expect("trunk layer exists");
            dirac(&mut b.params.get_mut(id).value);
        }
    }
    let inputs = config.rnet_head_channels * config.patch_height * config.patch_width;
    let outputs = config.num_boundaries * config.patch_width;
    let weights = match config.dense_init {
        DenseInit::Zero => Tensor::zeros(&[outputs, inputs]),
        DenseInit::He => b.he(&[outputs, inputs], inputs),
        DenseInit::ColumnSum => column_sum(config),
    };
    let weights = b.params.add("dense.weight", weights)?;
    let bias = b
        .params
        .add("dense.bias", Tensor::full(&[outputs], T::from_f64(config.dense_bias_init)))?;
    b.layers.push(LayerSpec::Dense { name: "dense".into(), inputs, outputs });
    b.layers.push(LayerSpec::Relu);
    Ok(Network {
        kind: NetKind::RNet,
        config: config.clone(),
        layers: b.layers,
        trunk,
        dense: Some(DenseLayer { weights, bias }),
        params: b.params,
    })
}

/// Identity kernel: output channel `c` copies input channel `c` through the
/// centre tap; every other weight is zero.
fn dirac<T: Scalar>(kernels: &mut Tensor<T>) {
    let (cout, cin, kh, kw) = {
        let s = kernels.shape();
        (s[0], s[1], s[2], s[3])
    };
    kernels.fill(T::zero());
    let data = kernels.data_mut();
    for c in 0..cout.min(cin) {
        data[((c * cin + c) * kh + kh / 2) * kw + kw / 2] = T::one();
    }
}

fn column_sum<T: Scalar>(config: &NetConfig) -> Tensor<T> {
    let (h, w) = (config.patch_height, config.patch_width);
    let inputs = config.rnet_head_channels * h * w;
    let mut weights = Tensor::zeros(&[config.num_boundaries * w, inputs]);
    let data = weights.data_mut();
    for k in 0..config.num_boundaries.min(config.rnet_head_channels) {
        for j in 0..w {
            let row = (k * w + j) * inputs;
            for r in 0..h {
                data[row + (k * h + r) * w + j] = T::one();
            }
        }
    }
    weights
}

pub fn build<T: Scalar>(kind: NetKind, config: &NetConfig, seed: u64) -> Result<Network<T>> {
    match kind {
        NetKind::SNet => build_snet(config, seed),
        NetKind::RNet => build_rnet(config, seed),
    }
}

/// Builds the network structure for `kind` and fills it with `params`,
/// matched by name. Every parameter must be present with the right shape.
pub fn assemble<T: Scalar>(kind: NetKind, config: &NetConfig, params: ParamSet<T>) -> Result<Network<T>> {
    let mut net = match kind {
        NetKind::SNet => snet_with::<T>(config, None)?,
        NetKind::RNet => rnet_with::<T>(config, None)?,
    };
    if params.len() != net.params.len() {
        return Err(Error::Incompatible(format!(
            "expected {} parameter tensors, found {}",
            net.params.len(),
            params.len()
        )));
    }
    let mut supplied = params;
    for slot in net.params.iter_mut() {
        let id = supplied
            .id_of(&slot.name)
            .ok_or_else(|| Error::Incompatible(format!("missing parameter {}", slot.name)))?;
        let src = supplied.get_mut(id);
        if src.value.shape() != slot.value.shape() {
            return Err(Error::Incompatible(format!(
                "parameter {} has shape {:?}, expected {:?}",
                slot.name,
                src.value.shape(),
                slot.value.shape()
            )));
        }
        std::mem::swap(&mut slot.value, &mut src.value);
    }
    Ok(net)
}

impl<T: Scalar> Network<T> {
    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. })).count()
    }

    pub fn pool_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::MaxPool)).count()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let c = match self.kind {
            NetKind::SNet => 1,
            NetKind::RNet => self.config.num_classes,
        };
        [c, self.config.patch_height, self.config.patch_width]
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            NetKind::SNet => self.config.num_classes * self.config.patch_height * self.config.patch_width,
            NetKind::RNet => self.config.num_boundaries * self.config.patch_width,
        }
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            kind: self.kind,
            config: self.config.clone(),
            layers: self.layers.clone(),
            trunk: self.trunk.clone(),
            dense: self.dense,
            params: self.params.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expected = self.input_shape();
        if x.shape() != expected {
            return Err(Error::shape(
                match self.kind {
                    NetKind::SNet => "snet_forward",
                    NetKind::RNet => "rnet_forward",
                },
                format!("expected input {expected:?}, got {:?}", x.shape()),
            ));
        }
        Ok(())
    }

    fn conv_relu(&self, tape: &mut Tape<T>, x: Var, layer: ConvLayer) -> Result<Var> {
        let y = tape.conv2d(&self.params, x, layer.kernels, layer.bias, layer.padding)?;
        tape.relu(y)
    }

    pub fn trunk_forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut skips = Vec::with_capacity(self.trunk.encoder.len());
        for [a, b] in &self.trunk.encoder {
            h = self.conv_relu(tape, h, *a)?;
            h = self.conv_relu(tape, h, *b)?;
            skips.push(h);
            h = tape.maxpool2x2(h)?;
        }
        let [a, b] = self.trunk.bottleneck;
        h = self.conv_relu(tape, h, a)?;
        h = self.conv_relu(tape, h, b)?;
        for (level, [a, b]) in self.trunk.decoder.iter().enumerate().rev() {
            let up = tape.upsample2x2(h)?;
            let cat = tape.concat_channels(skips[level], up)?;
            h = self.conv_relu(tape, cat, *a)?;
            h = self.conv_relu(tape, h, *b)?;
        }
        let head = self.trunk.head;
        tape.conv2d(&self.params, h, head.kernels, head.bias, head.padding)
    }

    /// Records the forward pass on `tape`. For S-Net the result is the
    /// pre-softmax logits `[C, H, W]`; for R-Net the rectified thickness
    /// vector `[B * W]`, laid out layer-major (`k * W + column`).
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let trunk = self.trunk_forward(tape, input)?;
        match self.dense {
            None => Ok(trunk),
            Some(d) => {
                let y = tape.dense(&self.params, trunk, d.weights, d.bias)?;
                tape.relu(y)
            }
        }
    }

    /// R-Net forward over several inputs at once: the trunk runs per input
    /// and the dense layer once on the stacked `[N, features]` rows, giving
    /// `[N, B * W]`.
    pub fn forward_batch(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let Some(d) = self.dense else {
            return Err(Error::invalid("forward_batch", "only R-Net has a dense layer to batch"));
        };
        let mut trunks = Vec::with_capacity(inputs.len());
        for &x in inputs {
            self.check_input(tape.value(x))?;
            trunks.push(self.trunk_forward(tape, x)?);
        }
        let rows = tape.stack(&trunks)?;
        let y = tape.dense(&self.params, rows, d.weights, d.bias)?;
        tape.relu(y)
    }

    /// Per-pixel class probabilities for one image patch.
    pub fn snet_forward(&self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.kind != NetKind::SNet {
            return Err(Error::invalid("snet_forward", "network is not an S-Net"));
        }
        self.check_input(patch)?;
        let mut tape = Tape::new();
        let x = tape.input(patch.clone())?;
        let logits = self.forward(&mut tape, x)?;
        let probs = tape.softmax(logits)?;
        Ok(tape.into_value(probs))
    }

    /// Non-negative `B x W` thickness map for one probability patch.
    pub fn rnet_forward(&self, probs: &Tensor<T>) -> Result<ThicknessMap> {
        if self.kind != NetKind::RNet {
            return Err(Error::invalid("rnet_forward", "network is not an R-Net"));
        }
        self.check_input(probs)?;
        let mut tape = Tape::new();
        let x = tape.input(probs.clone())?;
        let y = self.forward(&mut tape, x)?;
        let out = tape.into_value(y);
        ThicknessMap::new(
            self.config.num_boundaries,
            self.config.patch_width,
            out.data().iter().map(|v| v.as_f64()).collect(),
        )
    }
}
