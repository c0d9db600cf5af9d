use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_weights, join, EncoderBlock, InitScheme, Module, Slot, KERNEL};
use crate::tensor::{Graph, Mode, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Channels of one image of the pair; the network sees twice this.
    pub image_channels: usize,
    pub slope: f32,
    pub init: InitScheme,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            base_channels: 64,
            image_channels: 3,
            slope: 0.2,
            init: InitScheme::default(),
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::invalid("discriminator channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.slope) {
            return Err(Error::invalid(format!("activation slope {} outside [0, 1)", self.slope)));
        }
        Ok(())
    }

    /// Side of the score map for a square `size` input: three halvings,
    /// then two stride-1 4×4 convolutions with padding 1.
    pub fn patch_size(size: usize) -> usize {
        (size / 8).saturating_sub(2)
    }
}

/// Patch classifier over a channel-concatenated (satellite, map) pair.
///
/// Four conv stages (64, 128, 256, 512 filters at the default width; stride
/// 2, 2, 2, 1; no normalization on the first) and a 1-channel stride-1 head,
/// giving a 30×30 grid of probabilities for a 256×256 pair.
#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    pub stages: Vec<EncoderBlock>,
    pub head_kernel: Tensor,
    pub head_bias: Tensor,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut in_ch = 2 * config.image_channels;
        let mut stages = Vec::with_capacity(4);
        for (i, stride) in [2, 2, 2, 1].into_iter().enumerate() {
            let out_ch = config.base_channels << i;
            stages.push(EncoderBlock::new(in_ch, out_ch, i != 0, stride, config.slope, config.init, rng)?);
            in_ch = out_ch;
        }
        let head_kernel = init_weights(&[1, in_ch, KERNEL, KERNEL], config.init, rng)?;
        let head_bias = Tensor::parameter(&[1], vec![0.0])?;
        Ok(Discriminator {
            config,
            stages,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Per-patch probability that `map_img` is the real map for `satellite`.
    pub fn forward(&mut self, g: &mut Graph, satellite: Var, map_img: Var, mode: Mode) -> Result<Var> {
        if g.shape(satellite) != g.shape(map_img) {
            return Err(Error::shape(format!(
                "pair halves differ: {:?} vs {:?}",
                g.shape(satellite),
                g.shape(map_img)
            )));
        }
        let [_, c, _, _] = g.value(satellite).dims4()?;
        if c != self.config.image_channels {
            return Err(Error::shape(format!(
                "discriminator expects {}-channel images, got {c}",
                self.config.image_channels
            )));
        }
        let mut x = g.concat_channels(satellite, map_img)?;
        for stage in &mut self.stages {
            x = stage.forward(g, x, mode)?;
        }
        let k = g.param(&self.head_kernel);
        let b = g.param(&self.head_bias);
        let logits = g.conv2d(x, k, Some(b), 1, 1)?;
        Ok(g.sigmoid(logits))
    }

    pub fn score(&mut self, satellite: &Tensor, map_img: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut g = Graph::new();
        let s = g.constant(satellite.clone());
        let m = g.constant(map_img.clone());
        let y = self.forward(&mut g, s, m, mode)?;
        Ok(g.value(y).clone())
    }
}

impl Module for Discriminator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        f(join(prefix, "head.kernel"), &self.head_kernel, Slot::Param);
        f(join(prefix, "head.bias"), &self.head_bias, Slot::Param);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        f(join(prefix, "head.kernel"), &mut self.head_kernel, Slot::Param);
        f(join(prefix, "head.bias"), &mut self.head_bias, Slot::Param);
    }
}
