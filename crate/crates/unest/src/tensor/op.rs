use super::{Element, Tensor};

/// Graph edge: the op that produced a tensor plus its inputs, in a fixed
/// order the backward dispatch relies on.
pub struct Op<E: Element> {
    pub kind: OpKind<E>,
    pub parents: Vec<Tensor<E>>,
}

/// Every differentiable primitive. Parent order per variant:
/// binary ops `[lhs, rhs]`; `BiasAdd` `[x, bias]`; `LayerNorm` `[x, scale, shift]`;
/// convolutions `[x, weight, bias]`; everything else `[x]` or the concat list.
pub enum OpKind<E: Element> {
    Add,
    Sub,
    Mul,
    Div,
    AddScalar(E),
    MulScalar(E),
    /// x + bias where bias.shape is a trailing suffix of x.shape.
    BiasAdd,
    /// Batched matrix product; rhs is rank 2 (shared) or has equal leading dims.
    Matmul,
    Gelu,
    LeakyRelu(E),
    /// ln(max(x, floor)); gradient is 0 where the floor clamped.
    Ln { floor: E },
    Softmax { axis: usize },
    LogSoftmax { axis: usize },
    /// Normalizes the last axis; scale/shift have that axis's length.
    LayerNorm { eps: E },
    /// Normalizes all axes after (batch, channel); no learnable parameters.
    InstanceNorm { eps: E },
    Conv3d { stride: [usize; 3], pad: [usize; 3] },
    ConvTranspose3d { stride: [usize; 3], pad: [usize; 3] },
    /// `argmax` holds, per output element, the flat input index of its source.
    MaxPool3d { kernel: [usize; 3], stride: [usize; 3], argmax: Vec<usize> },
    Reshape,
    Permute { axes: Vec<usize> },
    Concat { axis: usize },
    Slice { start: Vec<usize>, len: Vec<usize> },
    SumAll,
    SumAxis { axis: usize },
    /// Index of the max along an axis; has no adjoint, so backward through it
    /// is an error rather than a silent zero.
    ArgmaxAxis { axis: usize },
}

impl<E: Element> OpKind<E> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::BiasAdd => "bias_add",
            OpKind::Matmul => "matmul",
            OpKind::Gelu => "gelu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Ln { .. } => "ln",
            OpKind::Softmax { .. } => "softmax",
            OpKind::LogSoftmax { .. } => "log_softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::InstanceNorm { .. } => "instance_norm",
            OpKind::Conv3d { .. } => "conv3d",
            OpKind::ConvTranspose3d { .. } => "conv_transpose3d",
            OpKind::MaxPool3d { .. } => "max_pool3d",
            OpKind::Reshape => "reshape",
            OpKind::Permute { .. } => "permute",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SumAll => "sum_all",
            OpKind::SumAxis { .. } => "sum_axis",
            OpKind::ArgmaxAxis { .. } => "argmax_axis",
        }
    }
}
