//! U-shaped convolutional decoder: a bottleneck conv on the coarsest
//! encoder features, then transposed-conv upsampling stages that
//! concatenate a skip and run an instance-norm residual block. The two
//! finest stages take their skips from the raw input volume rather than
//! the encoder. A 1^3 conv head emits per-class logits; softmax is the
//! caller's business.

use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::{Element, Tensor};

/// Epsilon inside every instance-norm denominator.
pub const IN_EPS: f64 = 1e-5;
/// Negative slope of the decoder activations.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Two 3^3 convs with instance norm, a 1^3 conv shortcut when channels
/// change, and the activation applied after the sum.
pub struct ResidualBlock<E: Element> {
    conv1_w: Tensor<E>,
    conv1_b: Tensor<E>,
    conv2_w: Tensor<E>,
    conv2_b: Tensor<E>,
    shortcut: Option<(Tensor<E>, Tensor<E>)>,
}

impl<E: Element> ResidualBlock<E> {
    pub fn new(pb: &mut ParamBuilder<E>, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        let shortcut = if cin != cout {
            Some((
                pb.he_uniform(format!("{prefix}.shortcut.weight"), &[cout, cin, 1, 1, 1], cin)?,
                pb.zeros(format!("{prefix}.shortcut.bias"), &[cout])?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            conv1_w: pb.he_uniform(format!("{prefix}.conv1.weight"), &[cout, cin, 3, 3, 3], cin * 27)?,
            conv1_b: pb.zeros(format!("{prefix}.conv1.bias"), &[cout])?,
            conv2_w: pb.he_uniform(format!("{prefix}.conv2.weight"), &[cout, cout, 3, 3, 3], cout * 27)?,
            conv2_b: pb.zeros(format!("{prefix}.conv2.bias"), &[cout])?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let eps = E::from_f64(IN_EPS);
        let slope = E::from_f64(LEAKY_SLOPE);
        let h = x
            .conv3d(&self.conv1_w, &self.conv1_b, [1; 3], [1; 3])?
            .instance_norm(eps)?
            .leaky_relu(slope)
            .conv3d(&self.conv2_w, &self.conv2_b, [1; 3], [1; 3])?
            .instance_norm(eps)?;
        let shortcut = match &self.shortcut {
            Some((w, b)) => x.conv3d(w, b, [1; 3], [0; 3])?,
            None => x.clone(),
        };
        Ok(shortcut.add(&h)?.leaky_relu(slope))
    }
}

/// One upsampling stage: 2^3 stride-2 transposed conv, concat with the
/// stage's skip, residual block back down to the stage width.
struct DecoderStage<E: Element> {
    up_w: Tensor<E>,
    up_b: Tensor<E>,
    res: ResidualBlock<E>,
    cout: usize,
}

impl<E: Element> DecoderStage<E> {
    fn new(pb: &mut ParamBuilder<E>, prefix: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(DecoderStage {
            up_w: pb.he_uniform(format!("{prefix}.up.weight"), &[cin, cout, 2, 2, 2], cin * 8)?,
            up_b: pb.zeros(format!("{prefix}.up.bias"), &[cout])?,
            res: ResidualBlock::new(pb, &format!("{prefix}.res"), 2 * cout, cout)?,
            cout,
        })
    }

    fn forward(&self, x: &Tensor<E>, skip: &Tensor<E>, stage: usize) -> Result<Tensor<E>> {
        let up = x.conv_transpose3d(&self.up_w, &self.up_b, [2; 3], [0; 3])?;
        let want: Vec<usize> = {
            let mut s = up.shape().to_vec();
            s[1] = self.cout;
            s
        };
        if skip.shape() != want.as_slice() {
            return Err(Error::shape(format!(
                "decoder stage {stage} expects skip {want:?}, got {:?}",
                skip.shape()
            )));
        }
        self.res.forward(&Tensor::concat(&[up, skip.clone()], 1)?)
    }
}

/// Skip taken from the raw input volume: an optional stride-2 3^3 conv to
/// reach the stage's resolution, then a residual block to its width.
struct ImageSkip<E: Element> {
    pre: Option<(Tensor<E>, Tensor<E>)>,
    res: ResidualBlock<E>,
}

impl<E: Element> ImageSkip<E> {
    fn new(
        pb: &mut ParamBuilder<E>,
        prefix: &str,
        cin: usize,
        cout: usize,
        halve: bool,
    ) -> Result<Self> {
        if halve {
            let pre_w = pb.he_uniform(format!("{prefix}.pre.weight"), &[cout, cin, 3, 3, 3], cin * 27)?;
            let pre_b = pb.zeros(format!("{prefix}.pre.bias"), &[cout])?;
            Ok(ImageSkip {
                pre: Some((pre_w, pre_b)),
                res: ResidualBlock::new(pb, &format!("{prefix}.res"), cout, cout)?,
            })
        } else {
            Ok(ImageSkip { pre: None, res: ResidualBlock::new(pb, &format!("{prefix}.res"), cin, cout)? })
        }
    }

    fn forward(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        match &self.pre {
            Some((w, b)) => self.res.forward(&image.conv3d(w, b, [2; 3], [1; 3])?),
            None => self.res.forward(image),
        }
    }
}

pub struct Decoder<E: Element> {
    bottleneck_w: Tensor<E>,
    bottleneck_b: Tensor<E>,
    stages: Vec<DecoderStage<E>>,
    image_skips: Vec<ImageSkip<E>>,
    head_w: Tensor<E>,
    head_b: Tensor<E>,
}

impl<E: Element> Decoder<E> {
    /// `widths` are the encoder hierarchy widths; `decoder_widths` lists the
    /// output channels of each upsampling stage, coarsest first. The first
    /// `widths.len() - 1` stages consume encoder skips (so their widths must
    /// match the skip widths); the rest consume image-derived skips and
    /// restore the remaining factor-of-patch resolution.
    pub fn new(
        pb: &mut ParamBuilder<E>,
        in_channels: usize,
        patch: usize,
        widths: &[usize],
        decoder_widths: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let levels = widths.len();
        let image_stages = match patch {
            2 => 1,
            4 => 2,
            _ => {
                return Err(Error::config(format!(
                    "patch size must be 2 or 4 to close the upsampling chain, got {patch}"
                )))
            }
        };
        if levels == 0 || decoder_widths.len() != levels - 1 + image_stages {
            return Err(Error::config(format!(
                "{levels} hierarchies with patch {patch} need {} decoder widths, got {:?}",
                levels - 1 + image_stages,
                decoder_widths
            )));
        }
        if classes == 0 {
            return Err(Error::config("the head needs at least one class"));
        }
        let bottom = widths[levels - 1];
        let bottleneck_w =
            pb.he_uniform("decoder.bottleneck.weight", &[bottom, bottom, 3, 3, 3], bottom * 27)?;
        let bottleneck_b = pb.zeros("decoder.bottleneck.bias", &[bottom])?;
        let mut stages = Vec::with_capacity(decoder_widths.len());
        let mut image_skips = Vec::with_capacity(image_stages);
        let mut cin = bottom;
        for (i, &cout) in decoder_widths.iter().enumerate() {
            if i < levels - 1 {
                let want = widths[levels - 2 - i];
                if cout != want {
                    return Err(Error::config(format!(
                        "decoder stage {i} concatenates the width-{want} hierarchy skip, \
                         so its width must be {want}, got {cout}"
                    )));
                }
            } else {
                let j = i - (levels - 1);
                image_skips.push(ImageSkip::new(
                    pb,
                    &format!("decoder.imageskip{j}"),
                    in_channels,
                    cout,
                    patch >> (j + 1) == 2,
                )?);
            }
            stages.push(DecoderStage::new(pb, &format!("decoder.stage{i}"), cin, cout)?);
            cin = cout;
        }
        let head_w = pb.he_uniform("decoder.head.weight", &[classes, cin, 1, 1, 1], cin)?;
        let head_b = pb.zeros("decoder.head.bias", &[classes])?;
        Ok(Decoder { bottleneck_w, bottleneck_b, stages, image_skips, head_w, head_b })
    }

    /// `skips` are the encoder hierarchy outputs, finest first, and
    /// `encoded` is the final encoder output. Returns logits
    /// (B, classes, H, W, D) at the resolution of `image`.
    pub fn decode(
        &self,
        image: &Tensor<E>,
        skips: &[Tensor<E>],
        encoded: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let enc_stages = self.stages.len() - self.image_skips.len();
        if skips.len() != enc_stages {
            return Err(Error::shape(format!(
                "decoder expects {enc_stages} encoder skips, got {}",
                skips.len()
            )));
        }
        let mut x = encoded.conv3d(&self.bottleneck_w, &self.bottleneck_b, [1; 3], [1; 3])?;
        for (i, stage) in self.stages.iter().enumerate() {
            let skip = if i < enc_stages {
                skips[enc_stages - 1 - i].clone()
            } else {
                self.image_skips[i - enc_stages].forward(image)?
            };
            x = stage.forward(&x, &skip, i)?;
        }
        x.conv3d(&self.head_w, &self.head_b, [1; 3], [0; 3])
    }
}
