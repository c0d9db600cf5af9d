use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Activation, DecoderBlock, EncoderBlock, InitScheme, Module, Slot};
use crate::tensor::{Graph, Mode, Tensor, Var};

/// U-Net shape knobs. The default is the 8-level, 256×256 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of down-sampling blocks; inputs must be at least `2^depth`.
    pub depth: usize,
    /// Channels of the first encoder block; deeper blocks double up to 8×.
    pub base_channels: usize,
    pub image_channels: usize,
    pub dropout: f32,
    /// How many of the innermost decoder blocks apply dropout.
    pub dropout_blocks: usize,
    pub encoder_slope: f32,
    pub decoder_slope: f32,
    pub init: InitScheme,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            depth: 8,
            base_channels: 64,
            image_channels: 3,
            dropout: 0.5,
            dropout_blocks: 3,
            encoder_slope: 0.2,
            decoder_slope: 0.0,
            init: InitScheme::default(),
        }
    }
}

impl GeneratorConfig {
    /// Output channels of each encoder block, outermost first.
    pub fn channel_plan(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| self.base_channels * (1usize << i.min(3)))
            .collect()
    }

    /// Smallest accepted spatial size.
    pub fn min_size(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid("generator depth must be at least 2"));
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::invalid("generator channel counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        for slope in [self.encoder_slope, self.decoder_slope] {
            if !(0.0..1.0).contains(&slope) {
                return Err(Error::invalid(format!("activation slope {slope} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Checks that an `h × w` image can pass through the U-Net.
    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let min = self.min_size();
        for (name, d) in [("height", h), ("width", w)] {
            if !d.is_power_of_two() || d < min {
                return Err(Error::shape(format!(
                    "generator needs power-of-two spatial dims >= {min}, got {name} {d}"
                )));
            }
        }
        Ok(())
    }
}

/// U-Net: `depth` encoder blocks, `depth - 1` decoder blocks each joined to
/// the mirrored encoder output, and a transposed-conv + tanh output stage.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    pub encoders: Vec<EncoderBlock>,
    pub decoders: Vec<DecoderBlock>,
    pub output: DecoderBlock,
}

impl Generator {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let plan = config.channel_plan();
        let n = config.depth;
        let init = config.init;

        let mut encoders = Vec::with_capacity(n);
        let mut in_ch = config.image_channels;
        for (i, &out_ch) in plan.iter().enumerate() {
            // outermost and bottleneck blocks are not normalized
            let bn = i != 0 && i != n - 1;
            encoders.push(EncoderBlock::new(in_ch, out_ch, bn, 2, config.encoder_slope, init, rng)?);
            in_ch = out_ch;
        }

        // decoder j (1-based) is concatenated with encoder n - j
        let mut decoders = Vec::with_capacity(n - 1);
        for j in 1..n {
            let out_ch = plan[n - 1 - j];
            let rate = if j <= config.dropout_blocks { config.dropout } else { 0.0 };
            let act = Activation::LeakyRelu(config.decoder_slope);
            decoders.push(DecoderBlock::new(in_ch, out_ch, true, rate, act, init, rng)?);
            in_ch = 2 * out_ch;
        }
        let output = DecoderBlock::new(in_ch, config.image_channels, false, 0.0, Activation::Tanh, init, rng)?;
        Ok(Generator {
            config,
            encoders,
            decoders,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Translates a `[B, C, H, W]` batch; returns the output and the
    /// bottleneck activation.
    pub fn forward_traced<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let [_, c, h, w] = g.value(input).dims4()?;
        if c != self.config.image_channels {
            return Err(Error::shape(format!(
                "generator expects {} channels, got {c}",
                self.config.image_channels
            )));
        }
        self.config.check_input_size(h, w)?;

        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut x = input;
        for enc in &mut self.encoders {
            x = enc.forward(g, x, mode)?;
            skips.push(x);
        }
        let bottleneck = x;
        let n = skips.len();
        for (j, dec) in self.decoders.iter_mut().enumerate() {
            x = dec.forward(g, x, Some(skips[n - 2 - j]), mode, rng)?;
        }
        let out = self.output.forward(g, x, None, mode, rng)?;
        Ok((out, bottleneck))
    }

    pub fn forward<R: Rng + ?Sized>(&mut self, g: &mut Graph, input: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        Ok(self.forward_traced(g, input, mode, rng)?.0)
    }

    /// Runs the generator outside any training graph.
    pub fn translate<R: Rng + ?Sized>(&mut self, input: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let y = self.forward(&mut g, x, mode, rng)?;
        Ok(g.value(y).clone())
    }
}

impl Module for Generator {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, Slot)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (j, d) in self.decoders.iter().enumerate() {
            d.visit(&join(prefix, &format!("dec{}", j + 1)), f);
        }
        self.output.visit(&join(prefix, "out"), f);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor, Slot)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("enc{}", i + 1)), f);
        }
        for (j, d) in self.decoders.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("dec{}", j + 1)), f);
        }
        self.output.visit_mut(&join(prefix, "out"), f);
    }
}
