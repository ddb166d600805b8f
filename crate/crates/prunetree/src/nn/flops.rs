//! Per-sample FLOP accounting, computed in closed form from the topology.
//!
//! Conventions: a convolution costs `2 * c_out * c_in * k^2 * h_out * w_out`
//! (multiply-accumulate counted as two operations, bias ignored), a dense
//! layer `2 * d_in * d_out`, and every elementwise stage (affine, relu,
//! shortcut add) or pooled output element one operation. The counts are
//! exact integers, so candidate comparisons never hinge on float rounding.

use crate::nn::spec::{ConvSpec, NetworkSpec};

/// Cost of one convolution at the given output size.
pub fn conv_term(spec: &ConvSpec, h_out: usize, w_out: usize) -> u64 {
    2 * spec.out_channels as u64
        * spec.in_channels as u64
        * (spec.kernel * spec.kernel) as u64
        * (h_out * w_out) as u64
}

/// Cost of one dense layer.
pub fn dense_term(d_in: usize, d_out: usize) -> u64 {
    2 * d_in as u64 * d_out as u64
}

/// Per-sample forward cost of the whole network.
pub fn count_flops(spec: &NetworkSpec) -> u64 {
    let (_, mut h, mut w) = spec.input_shape;
    let mut total = 0u64;
    for stage in &spec.stages {
        for block in &stage.blocks {
            let (h1, w1) = (
                block.conv1.out_size(h).expect("validated spec"),
                block.conv1.out_size(w).expect("validated spec"),
            );
            total += conv_term(&block.conv1, h1, w1);
            let plane1 = (block.conv1.out_channels * h1 * w1) as u64;
            total += 2 * plane1; // affine + relu
            let (h2, w2) = (
                block.conv2.out_size(h1).expect("validated spec"),
                block.conv2.out_size(w1).expect("validated spec"),
            );
            total += conv_term(&block.conv2, h2, w2);
            let plane2 = (block.conv2.out_channels * h2 * w2) as u64;
            total += 2 * plane2; // affine + relu
            if block.removable {
                total += plane2; // shortcut add
            }
            h = h2;
            w = w2;
        }
    }
    total += spec.rep_dim() as u64; // pooled output elements
    total += dense_term(spec.head.in_features, spec.head.num_classes);
    total
}
