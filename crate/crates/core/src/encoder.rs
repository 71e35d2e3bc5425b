//! DenseNet-lite feature extractor.
//!
//! Layout, for `blocks = B`, `layers_per_block = L`, `growth_rate = g`,
//! `initial_channels = C₀`, output channels `D`:
//!
//! * stem: 3×3 conv `1 → C₀` with bias, stride `downsample / 2^(B−1)`
//! * dense layer with `c` input channels: per-channel affine `(γ, β)`, ReLU,
//!   3×3 conv `c → g` (no bias); its output is concatenated onto its input
//! * transition between blocks, `c` channels: affine, ReLU, 1×1 conv
//!   `c → ⌊c/2⌋` (no bias), 2×2 average pool
//! * head after the last block, `c` channels: affine, ReLU, 1×1 conv `c → D`
//!   with bias
//!
//! Every activation entering a convolution is multiplied by the spatial
//! validity mask, so padded regions behave exactly like zero padding.
//!
//! Trainable scalar count (what [`param_count`] returns):
//!
//! ```text
//! stem        9·C₀ + C₀
//! dense layer 2c + 9·g·c                  for c = c_b + j·g, j = 0..L
//! transition  2c + c·⌊c/2⌋                for c = c_b + L·g
//! head        2c + c·D + D                for c = c_{B−1} + L·g
//! ```
//!
//! with `c_0 = C₀` and `c_{b+1} = ⌊(c_b + L·g)/2⌋`. With `B = 0` only the stem
//! exists and `D` must equal `C₀`. The desk default (3 blocks × 4 layers,
//! growth 12, stem 32, D 128) has 94 616 scalars.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub initial_channels: usize,
    /// Channel count D of the feature map handed to the decoders.
    pub out_channels: usize,
    /// Total spatial reduction; a power of two.
    pub downsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            blocks: 3,
            layers_per_block: 4,
            growth_rate: 12,
            initial_channels: 32,
            out_channels: 128,
            downsample_factor: 8,
        }
    }

    /// Larger preset with D = 684.
    pub fn full_scale() -> Self {
        EncoderConfig {
            blocks: 3,
            layers_per_block: 16,
            growth_rate: 24,
            initial_channels: 48,
            out_channels: 684,
            downsample_factor: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f == 0 || !f.is_power_of_two() {
            return Err(Error::Config(format!("downsample_factor {f} is not a power of two")));
        }
        if self.initial_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.blocks == 0 {
            if self.out_channels != self.initial_channels {
                return Err(Error::Config(format!(
                    "with zero blocks the stem output ({}) is the feature map, but out_channels is {}",
                    self.initial_channels, self.out_channels
                )));
            }
        } else {
            let pools = 1usize << (self.blocks - 1);
            if f < pools {
                return Err(Error::Config(format!(
                    "{} blocks pool by {pools}, more than downsample_factor {f}",
                    self.blocks
                )));
            }
            if self.layers_per_block == 0 || self.growth_rate == 0 {
                return Err(Error::Config("dense blocks need layers and a growth rate".into()));
            }
        }
        Ok(())
    }

    pub fn stem_stride(&self) -> usize {
        if self.blocks == 0 {
            self.downsample_factor
        } else {
            self.downsample_factor >> (self.blocks - 1)
        }
    }

    /// Channels entering each block.
    fn block_inputs(&self) -> Vec<usize> {
        let mut c = self.initial_channels;
        let mut out = Vec::with_capacity(self.blocks);
        for _ in 0..self.blocks {
            out.push(c);
            c = (c + self.layers_per_block * self.growth_rate) / 2;
        }
        out
    }
}

/// Exact trainable-scalar count of an encoder built from `config`.
pub fn param_count(config: &EncoderConfig) -> usize {
    let c0 = config.initial_channels;
    let mut total = 9 * c0 + c0;
    let (l, g) = (config.layers_per_block, config.growth_rate);
    for (b, cb) in config.block_inputs().into_iter().enumerate() {
        for j in 0..l {
            let c = cb + j * g;
            total += 2 * c + 9 * g * c;
        }
        let c = cb + l * g;
        total += if b + 1 < config.blocks {
            2 * c + c * (c / 2)
        } else {
            2 * c + c * config.out_channels + config.out_channels
        };
    }
    total
}

/// Encoder output: features `[D×H×W]` on the tape plus the cell mask.
#[derive(Clone, Debug)]
pub struct FeatureMap<T> {
    pub features: Var,
    /// `[H×W]`, 1 where the cell covers at least one real pixel.
    pub mask: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl<T: Scalar> FeatureMap<T> {
    /// Number of cells M = H·W.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Content vectors as a `[D×M]` matrix; column `i` is `a_i`.
    pub fn flat(&self, tape: &mut Tape<T>) -> Result<Var> {
        tape.reshape(self.features, &[self.channels, self.cells()])
    }

    pub fn valid_cells(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != T::zero()).count()
    }
}

#[derive(Clone, Debug)]
struct Affine {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Debug)]
struct DenseLayer {
    norm: Affine,
    conv: ParamId,
}

#[derive(Clone, Debug)]
struct Transition {
    norm: Affine,
    conv: ParamId,
    bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem_w: ParamId,
    stem_b: ParamId,
    blocks: Vec<(Vec<DenseLayer>, Transition)>,
}

fn affine<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<Affine> {
    Ok(Affine {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()), true)?,
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true)?,
    })
}

impl Encoder {
    /// Registers encoder parameters under `prefix` and initializes them.
    pub fn new<T: Scalar, R: Rng>(config: EncoderConfig, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c0 = config.initial_channels;
        let stem_w = store.add(format!("{prefix}.stem.weight"), Init::HeNormal.sample(&[c0, 1, 3, 3], rng), true)?;
        let stem_b = store.add(format!("{prefix}.stem.bias"), Tensor::zeros(&[c0]), true)?;
        let (l, g) = (config.layers_per_block, config.growth_rate);
        let mut blocks = Vec::with_capacity(config.blocks);
        for (b, cb) in config.block_inputs().into_iter().enumerate() {
            let mut layers = Vec::with_capacity(l);
            for j in 0..l {
                let c = cb + j * g;
                let name = format!("{prefix}.block{b}.layer{j}");
                layers.push(DenseLayer {
                    norm: affine(store, &format!("{name}.norm"), c)?,
                    conv: store.add(format!("{name}.conv"), Init::HeNormal.sample(&[g, c, 3, 3], rng), true)?,
                });
            }
            let c = cb + l * g;
            let last = b + 1 == config.blocks;
            let (name, out) = if last {
                (format!("{prefix}.head"), config.out_channels)
            } else {
                (format!("{prefix}.transition{b}"), c / 2)
            };
            let transition = Transition {
                norm: affine(store, &format!("{name}.norm"), c)?,
                conv: store.add(format!("{name}.conv"), Init::HeNormal.sample(&[out, c, 1, 1], rng), true)?,
                bias: if last {
                    Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out]), true)?)
                } else {
                    None
                },
            };
            blocks.push((layers, transition));
        }
        Ok(Encoder {
            config,
            stem_w,
            stem_b,
            blocks,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Ids of every encoder parameter.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.stem_w, self.stem_b];
        for (layers, t) in &self.blocks {
            for l in layers {
                ids.extend([l.norm.gamma, l.norm.beta, l.conv]);
            }
            ids.extend([t.norm.gamma, t.norm.beta, t.conv]);
            ids.extend(t.bias);
        }
        ids
    }

    /// Encodes `image[H₀×W₀]` (ink high, values in `[0,1]`) with its pixel mask.
    /// Both are padded bottom/right to a multiple of the downsample factor.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        pixel_mask: &Tensor<T>,
    ) -> Result<FeatureMap<T>> {
        if image.rank() != 2 || image.shape() != pixel_mask.shape() {
            return Err(Error::dim("encode", image.shape(), pixel_mask.shape()));
        }
        let (h0, w0) = (image.shape()[0], image.shape()[1]);
        let f = self.config.downsample_factor;
        if h0 == 0 || w0 == 0 {
            return Err(Error::Input(format!("image {h0}×{w0} is empty")));
        }
        let (ph, pw) = (h0.div_ceil(f) * f, w0.div_ceil(f) * f);
        let mut img = pad_to(image, ph, pw);
        let pmask = pad_to(pixel_mask, ph, pw);
        // Ink under the mask must not leak into valid cells through the stem.
        for (v, &m) in img.data_mut().iter_mut().zip(pmask.data()) {
            *v *= m;
        }

        let s = self.config.stem_stride();
        let mut mask = or_pool(&pmask, s);
        let x = tape.constant(img.reshape(&[1, ph, pw])?);
        let w = tape.param(store, self.stem_w);
        let b = tape.param(store, self.stem_b);
        let x = tape.conv2d(x, w, s, 1)?;
        let x = tape.add_rows(x, b)?;
        let mut cur = apply_mask(tape, x, &mask)?;
        let mut channels = self.config.initial_channels;

        for (bi, (layers, trans)) in self.blocks.iter().enumerate() {
            for layer in layers {
                let a = self.activate(tape, store, cur, &layer.norm, &mask)?;
                let k = tape.param(store, layer.conv);
                let y = tape.conv2d(a, k, 1, 1)?;
                cur = tape.concat(&[cur, y])?;
            }
            let a = self.activate(tape, store, cur, &trans.norm, &mask)?;
            let k = tape.param(store, trans.conv);
            let y = tape.conv2d(a, k, 1, 0)?;
            channels = tape.shape(y)[0];
            if bi + 1 < self.blocks.len() {
                cur = tape.avg_pool2(y)?;
                mask = or_pool(&mask, 2);
            } else {
                let bias = trans.bias.expect("head has a bias");
                let bias = tape.param(store, bias);
                let y = tape.add_rows(y, bias)?;
                cur = apply_mask(tape, y, &mask)?;
            }
        }
        let shape = tape.shape(cur).to_vec();
        Ok(FeatureMap {
            features: cur,
            height: shape[1],
            width: shape[2],
            channels,
            mask,
        })
    }

    fn activate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        norm: &Affine,
        mask: &Tensor<T>,
    ) -> Result<Var> {
        let g = tape.param(store, norm.gamma);
        let b = tape.param(store, norm.beta);
        let y = tape.mul_rows(x, g)?;
        let y = tape.add_rows(y, b)?;
        let y = tape.relu(y)?;
        apply_mask(tape, y, mask)
    }
}

/// Multiplies every channel plane of `x[C×H×W]` by `mask[H×W]`.
fn apply_mask<T: Scalar>(tape: &mut Tape<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    let c = tape.shape(x)[0];
    if mask.data().iter().all(|&v| v != T::zero()) {
        return Ok(x);
    }
    let mut full = Vec::with_capacity(c * mask.numel());
    for _ in 0..c {
        full.extend_from_slice(mask.data());
    }
    let mut shape = vec![c];
    shape.extend_from_slice(mask.shape());
    let m = tape.constant(Tensor::new(&shape, full)?);
    tape.mul(x, m)
}

/// Zero-pads a `[H×W]` tensor on the bottom/right.
pub(crate) fn pad_to<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (th, tw) = (t.shape()[0], t.shape()[1]);
    if th == h && tw == w {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..th.min(h) {
        out.data_mut()[y * w..y * w + tw.min(w)].copy_from_slice(&t.data()[y * tw..y * tw + tw.min(w)]);
    }
    out
}

/// Logical-OR pooling of a `[H×W]` 0/1 mask with a `k×k` window and stride k.
pub(crate) fn or_pool<T: Scalar>(mask: &Tensor<T>, k: usize) -> Tensor<T> {
    if k == 1 {
        return mask.clone();
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor::zeros(&[oh, ow]);
    for oy in 0..oh {
        for ox in 0..ow {
            let any = (0..k).any(|dy| (0..k).any(|dx| mask.data()[(oy * k + dy) * w + ox * k + dx] != T::zero()));
            if any {
                out.data_mut()[oy * ow + ox] = T::one();
            }
        }
    }
    out
}
