//! The 3D U-Net shared by the locator and the segmenter.
//!
//! Analysis path: per level two (3³ conv, BN, ReLU) units, then 2³ max
//! pooling except at the bottom. Synthesis path: per level a 2³ stride-2
//! up-convolution, concatenation with the analysis features of the same
//! resolution, and two (3³ conv, BN, ReLU) units. A 1³ convolution maps
//! the top features to one logit channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Dims;

use super::layers::{
    batchnorm_backward, batchnorm_forward, concat_channels, conv3d_backward, conv3d_forward,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, split_channels,
    upconv2_backward, upconv2_forward, BatchNorm, BnCache, Conv3d, PoolIndices, UpConv,
};
use super::{Mode, Real, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Resolution levels; `levels - 1` poolings.
    pub levels: usize,
    /// Channels at the top level; doubled per level down.
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 8,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn with_base_channels(base_channels: usize) -> Self {
        Self {
            base_channels,
            ..Self::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Every spatial input dim must be a multiple of this (8 for four levels).
    pub fn size_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("unet", format!("all sizes must be >= 1: {self:?}")));
        }
        if self.levels > 8 {
            return Err(Error::config("unet.levels", "at most 8 levels"));
        }
        Ok(())
    }

    pub fn check_input(&self, dims: Dims) -> Result<()> {
        let d = self.size_divisor();
        if dims.iter().any(|&v| v == 0 || v % d != 0) {
            return Err(Error::Shape(format!(
                "input dims {dims:?} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }

    /// 3³ convolutions plus up-convolutions; the final 1³ projection is not
    /// counted. Four levels give 8 + 3 + 6 = 17.
    pub fn conv_layer_count(&self) -> usize {
        2 * self.levels + 3 * (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<T> {
    pub conv: Conv3d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Real> ConvBn<T> {
    fn new(in_ch: usize, out_ch: usize) -> Self {
        Self {
            conv: Conv3d::zeros(in_ch, out_ch, 3),
            bn: BatchNorm::new(out_ch),
        }
    }

    fn cast<U: Real>(&self) -> ConvBn<U> {
        ConvBn {
            conv: self.conv.cast(),
            bn: self.bn.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DownBlock<T> {
    pub convs: [ConvBn<T>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock<T> {
    pub up: UpConv<T>,
    pub convs: [ConvBn<T>; 2],
}

/// Parameters of one network. `up[l]` produces level `l` from level `l + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<T> {
    pub config: UNetConfig,
    pub down: Vec<DownBlock<T>>,
    pub up: Vec<UpBlock<T>>,
    pub head: Conv3d<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// BN running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub data: &'a [T],
}

struct CbrCache<T> {
    input: Tensor5<T>,
    bn: BnCache<T>,
    out: Tensor5<T>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache<T> {
    down: Vec<[CbrCache<T>; 2]>,
    pools: Vec<PoolIndices>,
    up_inputs: Vec<Tensor5<T>>,
    up: Vec<[CbrCache<T>; 2]>,
    head_input: Tensor5<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Hash of every ReLU on/off state and every pooling argmax. Two passes
    /// with equal signatures lie on the same linear piece of the network.
    pub fn kink_signature(&self) -> u64 {
        let mut h = Fnv::default();
        for c in self.down.iter().chain(&self.up).flatten() {
            for &v in c.out.data() {
                h.write_u8((v > T::zero()) as u8);
            }
        }
        for p in &self.pools {
            for &i in &p.argmax {
                h.write_u64(i as u64);
            }
        }
        h.0
    }

    fn bn_caches(&self) -> impl Iterator<Item = &BnCache<T>> {
        self.down.iter().chain(&self.up).flatten().map(|c| &c.bn)
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write_u8(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.write_u8(b);
        }
    }
}

fn cbr_forward<T: Real>(x: &Tensor5<T>, unit: &ConvBn<T>, mode: Mode) -> Result<CbrCache<T>> {
    let pre = conv3d_forward(x, &unit.conv)?;
    let (normed, bn) = batchnorm_forward(&pre, &unit.bn, mode)?;
    Ok(CbrCache {
        input: x.clone(),
        bn,
        out: relu_forward(&normed),
    })
}

fn cbr_backward<T: Real>(cache: &CbrCache<T>, unit: &ConvBn<T>, grad_out: &Tensor5<T>, grads: &mut ConvBn<T>) -> Tensor5<T> {
    let g = relu_backward(&cache.out, grad_out);
    let (g, dgamma, dbeta) = batchnorm_backward(&cache.bn, &unit.bn, &g);
    grads.bn.gamma = dgamma;
    grads.bn.beta = dbeta;
    let cg = conv3d_backward(&cache.input, &unit.conv, &g);
    grads.conv.weight = cg.weight;
    grads.conv.bias = cg.bias;
    cg.input
}

impl<T: Real> UNetModel<T> {
    /// Layout with zero convolution weights and identity batch norms.
    pub fn zeros(config: UNetConfig) -> Self {
        let down = (0..config.levels)
            .map(|l| {
                let in_ch = if l == 0 { config.in_channels } else { config.channels(l - 1) };
                let ch = config.channels(l);
                DownBlock {
                    convs: [ConvBn::new(in_ch, ch), ConvBn::new(ch, ch)],
                }
            })
            .collect();
        let up = (0..config.levels - 1)
            .map(|l| {
                let ch = config.channels(l);
                UpBlock {
                    up: UpConv::zeros(config.channels(l + 1), ch),
                    convs: [ConvBn::new(2 * ch, ch), ConvBn::new(ch, ch)],
                }
            })
            .collect();
        Self {
            config,
            down,
            up,
            head: Conv3d::zeros(config.channels(0), config.out_channels, 1),
        }
    }

    /// Weights and biases uniform in ±1/√fan_in, unit BN scale and zero
    /// shift. He-normal weights (2.4× larger) train far slower under Adam.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut model = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut [T], b: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        };
        for block in &mut model.down {
            for unit in &mut block.convs {
                let fan_in = unit.conv.in_ch * unit.conv.taps();
                fill(&mut unit.conv.weight, &mut unit.conv.bias, fan_in);
            }
        }
        for block in &mut model.up {
            let fan_in = block.up.in_ch;
            fill(&mut block.up.weight, &mut block.up.bias, fan_in);
            for unit in &mut block.convs {
                let fan_in = unit.conv.in_ch * unit.conv.taps();
                fill(&mut unit.conv.weight, &mut unit.conv.bias, fan_in);
            }
        }
        let fan_in = model.head.in_ch;
        fill(&mut model.head.weight, &mut model.head.bias, fan_in);
        Ok(model)
    }

    pub fn cast<U: Real>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config,
            down: self
                .down
                .iter()
                .map(|b| DownBlock {
                    convs: [b.convs[0].cast(), b.convs[1].cast()],
                })
                .collect(),
            up: self
                .up
                .iter()
                .map(|b| UpBlock {
                    up: b.up.cast(),
                    convs: [b.convs[0].cast(), b.convs[1].cast()],
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    /// Every tensor, trainable and buffer, in serialization order.
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        self.layout()
            .into_iter()
            .zip(self.slices())
            .map(|((name, shape, kind), data)| TensorView { name, shape, kind, data })
            .collect()
    }

    /// Mutable access to every tensor, same order as [`UNetModel::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, ParamKind, &mut [T])> {
        let layout = self.layout();
        layout
            .into_iter()
            .zip(self.slices_mut())
            .map(|((name, shape, kind), data)| (name, shape, kind, data))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        self.tensors_mut()
            .into_iter()
            .filter(|t| t.2 == ParamKind::Trainable)
            .map(|t| t.3)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.kind == ParamKind::Trainable)
            .map(|t| t.data.len())
            .sum()
    }

    fn layout(&self) -> Vec<(String, Vec<usize>, ParamKind)> {
        let mut out = Vec::new();
        for (l, block) in self.down.iter().enumerate() {
            for (j, unit) in block.convs.iter().enumerate() {
                conv_bn_layout(&mut out, &format!("down{l}.conv{j}"), unit);
            }
        }
        for (l, block) in self.up.iter().enumerate() {
            out.push((format!("up{l}.upconv.weight"), block.up.weight_shape(), ParamKind::Trainable));
            out.push((format!("up{l}.upconv.bias"), vec![block.up.out_ch], ParamKind::Trainable));
            for (j, unit) in block.convs.iter().enumerate() {
                conv_bn_layout(&mut out, &format!("up{l}.conv{j}"), unit);
            }
        }
        out.push(("head.weight".into(), self.head.weight_shape(), ParamKind::Trainable));
        out.push(("head.bias".into(), vec![self.head.out_ch], ParamKind::Trainable));
        out
    }

    fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for block in &self.down {
            for unit in &block.convs {
                out.extend(conv_bn_slices(unit));
            }
        }
        for block in &self.up {
            out.push(&block.up.weight);
            out.push(&block.up.bias);
            for unit in &block.convs {
                out.extend(conv_bn_slices(unit));
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for block in &mut self.down {
            for unit in &mut block.convs {
                out.extend(conv_bn_slices_mut(unit));
            }
        }
        for block in &mut self.up {
            out.push(&mut block.up.weight);
            out.push(&mut block.up.bias);
            for unit in &mut block.convs {
                out.extend(conv_bn_slices_mut(unit));
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Forward pass keeping activations for [`UNetModel::backward`].
    pub fn forward_cached(&self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        let cfg = &self.config;
        cfg.check_input(x.dims())?;
        if x.channels() != cfg.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {}",
                cfg.in_channels,
                x.channels()
            )));
        }
        let levels = cfg.levels;
        let mut down = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels - 1);
        let mut h = x.clone();
        for (l, block) in self.down.iter().enumerate() {
            let c0 = cbr_forward(&h, &block.convs[0], mode)?;
            let c1 = cbr_forward(&c0.out, &block.convs[1], mode)?;
            if l + 1 < levels {
                let (pooled, idx) = maxpool2_forward(&c1.out)?;
                pools.push(idx);
                h = pooled;
            }
            down.push([c0, c1]);
        }

        let mut x_up = down[levels - 1][1].out.clone();
        let mut up_inputs = vec![Tensor5::zeros(1, 1, [1, 1, 1]); levels - 1];
        let mut up: Vec<Option<[CbrCache<T>; 2]>> = (0..levels - 1).map(|_| None).collect();
        for l in (0..levels - 1).rev() {
            let block = &self.up[l];
            let u = upconv2_forward(&x_up, &block.up)?;
            let cat = concat_channels(&u, &down[l][1].out)?;
            let c0 = cbr_forward(&cat, &block.convs[0], mode)?;
            let c1 = cbr_forward(&c0.out, &block.convs[1], mode)?;
            up_inputs[l] = std::mem::replace(&mut x_up, c1.out.clone());
            up[l] = Some([c0, c1]);
        }
        let logits = conv3d_forward(&x_up, &self.head)?;
        Ok((
            logits,
            ForwardCache {
                down,
                pools,
                up_inputs,
                up: up.into_iter().map(|c| c.expect("every level visited")).collect(),
                head_input: x_up,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        Ok(self.forward_cached(x, mode)?.0)
    }

    /// Train-mode forward that also folds the batch statistics into the
    /// running estimates.
    pub fn forward_train(&mut self, x: &Tensor5<T>) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        let (out, cache) = self.forward_cached(x, Mode::Train)?;
        self.update_running_stats(&cache);
        Ok((out, cache))
    }

    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        let units = self
            .down
            .iter_mut()
            .flat_map(|b| b.convs.iter_mut())
            .chain(self.up.iter_mut().flat_map(|b| b.convs.iter_mut()));
        for (unit, bn) in units.zip(cache.bn_caches()) {
            if bn.mode == Mode::Train {
                unit.bn.update_running(&bn.batch_mean, &bn.batch_var);
            }
        }
    }

    /// Gradients of every trainable tensor (as a model of the same layout;
    /// its buffers are meaningless) and of the input.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor5<T>) -> (UNetModel<T>, Tensor5<T>) {
        let levels = self.config.levels;
        let mut grads = UNetModel::zeros(self.config);

        let head = conv3d_backward(&cache.head_input, &self.head, grad_logits);
        grads.head.weight = head.weight;
        grads.head.bias = head.bias;
        let mut g = head.input;

        let mut skip_grads: Vec<Option<Tensor5<T>>> = (0..levels).map(|_| None).collect();
        for l in 0..levels - 1 {
            let block = &self.up[l];
            let gb = &mut grads.up[l];
            g = cbr_backward(&cache.up[l][1], &block.convs[1], &g, &mut gb.convs[1]);
            g = cbr_backward(&cache.up[l][0], &block.convs[0], &g, &mut gb.convs[0]);
            let (g_up, g_skip) = split_channels(&g, self.config.channels(l));
            skip_grads[l] = Some(g_skip);
            let ug = upconv2_backward(&cache.up_inputs[l], &block.up, &g_up);
            gb.up.weight = ug.weight;
            gb.up.bias = ug.bias;
            g = ug.input;
        }

        for l in (0..levels).rev() {
            let mut gh = if l == levels - 1 {
                g
            } else {
                let mut s = skip_grads[l].take().expect("skip gradient set");
                s.add_assign(&maxpool2_backward(&cache.pools[l], &g));
                s
            };
            let block = &self.down[l];
            let gb = &mut grads.down[l];
            gh = cbr_backward(&cache.down[l][1], &block.convs[1], &gh, &mut gb.convs[1]);
            g = cbr_backward(&cache.down[l][0], &block.convs[0], &gh, &mut gb.convs[0]);
        }
        for unit in grads
            .down
            .iter_mut()
            .flat_map(|b| b.convs.iter_mut())
            .chain(grads.up.iter_mut().flat_map(|b| b.convs.iter_mut()))
        {
            unit.bn.running_mean.fill(T::zero());
            unit.bn.running_var.fill(T::zero());
        }
        (grads, g)
    }
}

fn conv_bn_layout<T: Real>(out: &mut Vec<(String, Vec<usize>, ParamKind)>, prefix: &str, unit: &ConvBn<T>) {
    let ch = unit.bn.channels();
    out.push((format!("{prefix}.weight"), unit.conv.weight_shape(), ParamKind::Trainable));
    out.push((format!("{prefix}.bias"), vec![unit.conv.out_ch], ParamKind::Trainable));
    out.push((format!("{prefix}.bn.gamma"), vec![ch], ParamKind::Trainable));
    out.push((format!("{prefix}.bn.beta"), vec![ch], ParamKind::Trainable));
    out.push((format!("{prefix}.bn.running_mean"), vec![ch], ParamKind::Buffer));
    out.push((format!("{prefix}.bn.running_var"), vec![ch], ParamKind::Buffer));
}

fn conv_bn_slices<T>(unit: &ConvBn<T>) -> [&[T]; 6] {
    [
        &unit.conv.weight,
        &unit.conv.bias,
        &unit.bn.gamma,
        &unit.bn.beta,
        &unit.bn.running_mean,
        &unit.bn.running_var,
    ]
}

fn conv_bn_slices_mut<T>(unit: &mut ConvBn<T>) -> [&mut [T]; 6] {
    [
        &mut unit.conv.weight,
        &mut unit.conv.bias,
        &mut unit.bn.gamma,
        &mut unit.bn.beta,
        &mut unit.bn.running_mean,
        &mut unit.bn.running_var,
    ]
}
