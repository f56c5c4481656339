//! Whole-model assembly: configuration, the published scales, parameter
//! accounting, and analytic FLOP estimates.
//!
//! Parameter and FLOP reports are computed two independent ways: from the
//! built tensor registry, and analytically from the config alone. Tests
//! hold the two routes to each other and to hand counts.

use crate::decoder::Decoder;
use crate::encoder::NestEncoder;
use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::{Element, Tensor};

/// The published model sizes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Scale {
    S,
    B,
    L,
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s" | "small" => Ok(Scale::S),
            "b" | "base" => Ok(Scale::B),
            "l" | "large" => Ok(Scale::L),
            other => Err(Error::config(format!("unknown scale {other:?}, expected S, B, or L"))),
        }
    }
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scale::S => "S",
            Scale::B => "B",
            Scale::L => "L",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub classes: usize,
    pub patch: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub mlp_ratio: usize,
    pub block_aggregation: bool,
    pub window: [usize; 3],
}

impl ModelConfig {
    pub fn scale(s: Scale) -> Self {
        let (depths, heads, widths) = match s {
            Scale::S => (vec![2, 2, 8], vec![2, 4, 8], vec![64, 128, 256]),
            Scale::B => (vec![2, 2, 8], vec![4, 8, 16], vec![128, 256, 512]),
            Scale::L => (vec![2, 2, 20], vec![6, 12, 24], vec![192, 384, 768]),
        };
        let w0 = widths[0];
        ModelConfig {
            in_channels: 1,
            classes: 133,
            patch: 4,
            decoder_widths: vec![widths[1], w0, w0 / 2, w0 / 4],
            depths,
            heads,
            widths,
            mlp_ratio: 4,
            block_aggregation: true,
            window: [96; 3],
        }
    }

    /// Smallest config that exercises every code path: useful for gradient
    /// checks and overfit tests.
    pub fn micro() -> Self {
        ModelConfig {
            in_channels: 1,
            classes: 2,
            patch: 2,
            depths: vec![1, 1, 1],
            heads: vec![2, 4, 8],
            widths: vec![8, 16, 32],
            decoder_widths: vec![16, 8, 4],
            mlp_ratio: 4,
            block_aggregation: true,
            window: [16; 3],
        }
    }

    pub fn levels(&self) -> usize {
        self.depths.len()
    }

    /// Block grid edge at a hierarchy: halves per level so the last
    /// hierarchy attends globally; 1 everywhere when aggregation is off.
    pub fn block_grid(&self, level: usize) -> usize {
        if self.block_aggregation {
            1 << (self.levels() - 1 - level)
        } else {
            1
        }
    }

    /// (block grid g, block count T = g^3, tokens per block n) at a level.
    pub fn block_geometry(&self, level: usize) -> Result<(usize, usize, usize)> {
        if level >= self.levels() {
            return Err(Error::config(format!(
                "hierarchy {level} out of range for {} levels",
                self.levels()
            )));
        }
        let g = self.block_grid(level);
        let halve = 1usize << level;
        let mut n = 1usize;
        for &w in &self.window {
            let grid = w / self.patch;
            if w % self.patch != 0 || grid % (halve * g) != 0 {
                return Err(Error::config(format!(
                    "window {:?} is incompatible with hierarchy {level}: token extent {grid} \
                     must be divisible by {}",
                    self.window,
                    halve * g
                )));
            }
            n *= grid / halve / g;
        }
        Ok((g, g * g * g, n))
    }

    fn image_stages(&self) -> usize {
        match self.patch {
            2 => 1,
            _ => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels == 0 || self.heads.len() != levels || self.widths.len() != levels {
            return Err(Error::config(format!(
                "depths, heads, and widths must have equal nonzero length, got {}/{}/{}",
                self.depths.len(),
                self.heads.len(),
                self.widths.len()
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::config("every hierarchy needs at least one layer"));
        }
        if self.patch != 2 && self.patch != 4 {
            return Err(Error::config(format!(
                "patch size must be 2 or 4 to close the decoder upsampling chain, got {}",
                self.patch
            )));
        }
        for l in 0..levels {
            if self.heads[l] == 0 || self.widths[l] % self.heads[l] != 0 {
                return Err(Error::config(format!(
                    "hierarchy {l}: width {} is not divisible by {} heads",
                    self.widths[l], self.heads[l]
                )));
            }
            if l + 1 < levels && self.widths[l + 1] != 2 * self.widths[l] {
                return Err(Error::config(format!(
                    "aggregation doubles channels, so widths must double per hierarchy, got {:?}",
                    self.widths
                )));
            }
            self.block_geometry(l)?;
        }
        let stages = levels - 1 + self.image_stages();
        if self.decoder_widths.len() != stages {
            return Err(Error::config(format!(
                "{levels} hierarchies with patch {} need {stages} decoder widths, got {:?}",
                self.patch, self.decoder_widths
            )));
        }
        for i in 0..levels - 1 {
            if self.decoder_widths[i] != self.widths[levels - 2 - i] {
                return Err(Error::config(format!(
                    "decoder stage {i} concatenates the width-{} hierarchy skip, so \
                     decoder_widths[{i}] must equal it, got {}",
                    self.widths[levels - 2 - i],
                    self.decoder_widths[i]
                )));
            }
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be at least 1"));
        }
        if self.classes < 2 {
            return Err(Error::config("segmentation needs at least 2 classes"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be at least 1"));
        }
        Ok(())
    }
}

pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub encoder: NestEncoder<E>,
    pub decoder: Decoder<E>,
    params: Vec<(String, Tensor<E>)>,
}

impl<E: Element> Model<E> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let encoder = NestEncoder::new(
            &mut pb,
            config.in_channels,
            config.patch,
            config.window,
            &config.depths,
            &config.heads,
            &config.widths,
            config.mlp_ratio,
            config.block_aggregation,
        )?;
        let decoder = Decoder::new(
            &mut pb,
            config.in_channels,
            config.patch,
            &config.widths,
            &config.decoder_widths,
            config.classes,
        )?;
        Ok(Model { config: config.clone(), encoder, decoder, params: pb.finish() })
    }

    /// Named parameters in creation order; the order fixes optimizer and
    /// checkpoint layout.
    pub fn params(&self) -> &[(String, Tensor<E>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<E>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Logits (B, classes, H, W, D) for a window-shaped input.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 5 || sh[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "model expects (batch, {}, H, W, D), got {sh:?}",
                self.config.in_channels
            )));
        }
        if sh[2..] != self.config.window {
            return Err(Error::shape(format!(
                "model was built for window {:?}, got input extents {:?}",
                self.config.window,
                &sh[2..]
            )));
        }
        let enc = self.encoder.forward(x)?;
        self.decoder.decode(x, &enc.skips, &enc.output)
    }

    pub fn count_params(&self) -> u64 {
        self.params.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Per-module totals from the live registry, grouped by the first two
    /// name components, in creation order.
    pub fn param_report(&self) -> ParamReport {
        let mut groups: Vec<(String, u64)> = Vec::new();
        for (name, t) in &self.params {
            let key: String = name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            match groups.last_mut() {
                Some((k, v)) if *k == key => *v += t.numel() as u64,
                _ => groups.push((key, t.numel() as u64)),
            }
        }
        let total = groups.iter().map(|(_, v)| v).sum();
        ParamReport { groups, total }
    }
}

pub struct ParamReport {
    pub groups: Vec<(String, u64)>,
    pub total: u64,
}

/// Forward-pass FLOP estimate for one window at batch 1. Conventions: a
/// multiply-accumulate is 2 FLOPs; matmuls, convolutions, and the attention
/// score/mix products are counted; norms, activations, softmax, pooling,
/// and standalone bias adds are not.
pub struct FlopsReport {
    pub groups: Vec<(String, u64)>,
    /// Attention score and mix FLOPs per hierarchy, summed over its layers.
    pub attention: Vec<u64>,
    pub total: u64,
}

fn linear_params(i: usize, o: usize) -> u64 {
    (i * o + o) as u64
}

fn conv_params(kvol: usize, cin: usize, cout: usize) -> u64 {
    (kvol * cin * cout + cout) as u64
}

impl ModelConfig {
    /// Analytic parameter count; mirrors exactly what `Model::build`
    /// allocates, without building anything.
    pub fn param_report(&self) -> Result<ParamReport> {
        self.validate()?;
        let levels = self.levels();
        let p3 = self.patch * self.patch * self.patch;
        let mut groups: Vec<(String, u64)> = Vec::new();
        groups.push(("encoder.embed".into(), linear_params(self.in_channels * p3, self.widths[0])));
        for l in 0..levels {
            let (_, t, n) = self.block_geometry(l)?;
            let c = self.widths[l];
            let h = c * self.mlp_ratio;
            let layer = 2 * c as u64
                + linear_params(c, 3 * c)
                + linear_params(c, c)
                + 2 * c as u64
                + linear_params(c, h)
                + linear_params(h, c);
            groups.push((format!("encoder.h{l}"), (t * n * c) as u64 + self.depths[l] as u64 * layer));
            if l + 1 < levels {
                groups.push((format!("encoder.agg{l}"), conv_params(27, c, 2 * c)));
            }
        }
        groups.push(("encoder.norm".into(), 2 * self.widths[levels - 1] as u64));

        let bottom = self.widths[levels - 1];
        groups.push(("decoder.bottleneck".into(), conv_params(27, bottom, bottom)));
        let mut cin = bottom;
        for (i, &cout) in self.decoder_widths.iter().enumerate() {
            if i >= levels - 1 {
                let j = i - (levels - 1);
                let halve = self.patch >> (j + 1) == 2;
                let res_in = if halve { cout } else { self.in_channels };
                let mut sum = if halve { conv_params(27, self.in_channels, cout) } else { 0 };
                sum += conv_params(27, res_in, cout) + conv_params(27, cout, cout);
                if res_in != cout {
                    sum += conv_params(1, res_in, cout);
                }
                groups.push((format!("decoder.imageskip{j}"), sum));
            }
            let stage = conv_params(8, cin, cout)
                + conv_params(27, 2 * cout, cout)
                + conv_params(27, cout, cout)
                + conv_params(1, 2 * cout, cout);
            groups.push((format!("decoder.stage{i}"), stage));
            cin = cout;
        }
        groups.push(("decoder.head".into(), linear_params(cin, self.classes)));
        let total = groups.iter().map(|(_, v)| v).sum();
        Ok(ParamReport { groups, total })
    }

    /// Analytic forward FLOPs for one window; see [`FlopsReport`] for the
    /// counting conventions.
    pub fn flops_report(&self) -> Result<FlopsReport> {
        self.validate()?;
        let levels = self.levels();
        let matmul = |m: u64, k: u64, n: u64| 2 * m * k * n;
        let conv = |kvol: u64, cin: u64, cout: u64, vox: u64| 2 * kvol * cin * cout * vox;
        let vox_at = |halve: usize| -> u64 {
            self.window.iter().map(|&w| (w / self.patch / halve) as u64).product()
        };

        let mut groups: Vec<(String, u64)> = Vec::new();
        let mut attention = Vec::with_capacity(levels);
        let p3 = (self.patch * self.patch * self.patch) as u64;
        groups.push((
            "encoder.embed".into(),
            matmul(vox_at(1), self.in_channels as u64 * p3, self.widths[0] as u64),
        ));
        for l in 0..levels {
            let (_, t, n) = self.block_geometry(l)?;
            let (t, n) = (t as u64, n as u64);
            let c = self.widths[l] as u64;
            let tokens = t * n;
            let attn_layer = 2 * matmul(t * n, n, c);
            let layer = matmul(tokens, c, 3 * c)
                + attn_layer
                + matmul(tokens, c, c)
                + 2 * matmul(tokens, c, c * self.mlp_ratio as u64);
            let d = self.depths[l] as u64;
            attention.push(d * attn_layer);
            groups.push((format!("encoder.h{l}"), d * layer));
            if l + 1 < levels {
                groups.push((format!("encoder.agg{l}"), conv(27, c, 2 * c, vox_at(1 << l))));
            }
        }

        let bottom = self.widths[levels - 1] as u64;
        groups.push(("decoder.bottleneck".into(), conv(27, bottom, bottom, vox_at(1 << (levels - 1)))));
        let mut cin = bottom;
        for (i, &cout) in self.decoder_widths.iter().enumerate() {
            let cout = cout as u64;
            // The bottleneck sits at the coarsest token grid; each stage
            // doubles every axis, ending at the window extents.
            let stage_in = self.stage_vox(i);
            let stage_out = 8 * stage_in;
            if i >= levels - 1 {
                let j = i - (levels - 1);
                let pre = self.patch >> (j + 1) == 2;
                let res_in = if pre { cout } else { self.in_channels as u64 };
                let mut skip = if pre { conv(27, self.in_channels as u64, cout, stage_out) } else { 0 };
                skip += conv(27, res_in, cout, stage_out) + conv(27, cout, cout, stage_out);
                if res_in != cout {
                    skip += conv(1, res_in, cout, stage_out);
                }
                groups.push((format!("decoder.imageskip{j}"), skip));
            }
            let stage = conv(8, cin, cout, stage_in)
                + conv(27, 2 * cout, cout, stage_out)
                + conv(27, cout, cout, stage_out)
                + conv(1, 2 * cout, cout, stage_out);
            groups.push((format!("decoder.stage{i}"), stage));
            cin = cout;
        }
        let window_vox: u64 = self.window.iter().map(|&w| w as u64).product();
        groups.push(("decoder.head".into(), matmul(window_vox, cin, self.classes as u64)));
        let total = groups.iter().map(|(_, v)| v).sum();
        Ok(FlopsReport { groups, attention, total })
    }

    /// Voxels entering decoder stage `i`.
    fn stage_vox(&self, i: usize) -> u64 {
        let coarse = 1usize << (self.levels() - 1);
        self.window.iter().map(|&w| ((w / self.patch / coarse) << i) as u64).product()
    }
}
