//! Network topology.
//!
//! A network is a sequence of stages feeding a dense classification head.
//! Each stage is a chain of two-conv blocks at a fixed output width:
//!
//! - The first block of a stage is the projection slot. It may change the
//!   channel count and apply the stage stride, carries no shortcut, and is
//!   never removable.
//! - Every later block preserves shape and adds an identity shortcut around
//!   its conv branch; exactly these blocks are removable.
//!
//! Block data path: `conv1 -> affine -> relu -> conv2 -> affine (-> +input)
//! -> relu`. The per-channel affine (a learned scale and shift per output
//! channel) stands in for normalization; there are no running statistics, so
//! the forward pass is a pure function of parameters and input.
//!
//! After the last stage, spatial dimensions are collapsed by global average
//! pooling; the pooled feature vector is both the representation surface used
//! for similarity comparisons and the head input.
//!
//! Topology carries no parameter values. Parameter storage lives in
//! [`crate::nn::model::Params`] and is shaped by this spec.

use crate::{Error, Result};

/// One convolution: dimensions and geometry only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel side length.
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// 3x3 convolution with same-padding at stride 1.
    pub fn k3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            padding: 1,
        }
    }

    /// Number of weight values (`out * in * k * k`).
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    /// Output spatial side for an input side, or None if the input is too
    /// small for the kernel.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// Two-conv block. `removable` is true exactly when the block has an
/// identity shortcut, which requires shape preservation (stride 1 and equal
/// input/output widths).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub removable: bool,
}

impl ResidualBlockSpec {
    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }
}

/// A chain of blocks at one output width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub blocks: Vec<ResidualBlockSpec>,
    /// Output width of every block in the stage.
    pub out_channels: usize,
    /// Spatial stride applied by the first block (1 or 2).
    pub stride: usize,
}

/// Dense classification head applied to pooled features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub in_features: usize,
    pub num_classes: usize,
}

/// Full network topology.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub stages: Vec<Stage>,
    pub head: HeadSpec,
    /// Input image shape as (channels, height, width).
    pub input_shape: (usize, usize, usize),
}

impl NetworkSpec {
    /// Builds the standard staged network: `widths[i]` output channels and
    /// `blocks[i]` blocks in stage `i`, with `strides[i]` applied by the
    /// stage's first block. Every stage gets one projection block followed by
    /// `blocks[i] - 1` removable blocks.
    pub fn staged(
        input_shape: (usize, usize, usize),
        widths: &[usize],
        blocks: &[usize],
        strides: &[usize],
        num_classes: usize,
    ) -> Result<Self> {
        if widths.len() != blocks.len() || widths.len() != strides.len() {
            return Err(Error::validation(format!(
                "stage lists disagree: {} widths, {} block counts, {} strides",
                widths.len(),
                blocks.len(),
                strides.len()
            )));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut in_ch = input_shape.0;
        for ((&w, &n), &s) in widths.iter().zip(blocks).zip(strides) {
            if n == 0 {
                return Err(Error::validation("stage with zero blocks".to_string()));
            }
            let mut stage_blocks = Vec::with_capacity(n);
            stage_blocks.push(ResidualBlockSpec {
                conv1: ConvSpec::k3(in_ch, w, s),
                conv2: ConvSpec::k3(w, w, 1),
                removable: false,
            });
            for _ in 1..n {
                stage_blocks.push(ResidualBlockSpec {
                    conv1: ConvSpec::k3(w, w, 1),
                    conv2: ConvSpec::k3(w, w, 1),
                    removable: true,
                });
            }
            stages.push(Stage {
                blocks: stage_blocks,
                out_channels: w,
                stride: s,
            });
            in_ch = w;
        }
        let spec = NetworkSpec {
            stages,
            head: HeadSpec {
                in_features: in_ch,
                num_classes,
            },
            input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Width of the pooled representation (last stage width, or the input
    /// channel count for a head-only network).
    pub fn rep_dim(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.out_channels)
            .unwrap_or(self.input_shape.0)
    }

    /// Spatial side length entering each stage, plus the final side after the
    /// last stage. `spatial[i]` feeds stage `i`.
    pub fn spatial_sides(&self) -> Vec<usize> {
        let mut sides = Vec::with_capacity(self.stages.len() + 1);
        let mut side = self.input_shape.1;
        sides.push(side);
        for stage in &self.stages {
            for block in &stage.blocks {
                side = block.conv1.out_size(side).unwrap_or(0);
                side = block.conv2.out_size(side).unwrap_or(0);
            }
            sides.push(side);
        }
        sides
    }

    /// Total learnable parameter count implied by the topology.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for stage in &self.stages {
            for block in &stage.blocks {
                // conv weights + bias, plus scale and shift per conv output.
                count += block.conv1.weight_len() + 3 * block.conv1.out_channels;
                count += block.conv2.weight_len() + 3 * block.conv2.out_channels;
            }
        }
        count += self.head.in_features * self.head.num_classes + self.head.num_classes;
        count
    }

    /// Checks every structural invariant. All public constructors and every
    /// surgery call run this before handing a spec out.
    pub fn validate(&self) -> Result<()> {
        let (in_ch, in_h, in_w) = self.input_shape;
        if in_ch == 0 || in_h == 0 || in_w == 0 {
            return Err(Error::validation("input shape has a zero dimension".to_string()));
        }
        if in_h != in_w {
            return Err(Error::validation(format!(
                "input must be square, got {}x{}",
                in_h, in_w
            )));
        }
        if self.head.num_classes < 2 {
            return Err(Error::validation(format!(
                "head needs at least 2 classes, got {}",
                self.head.num_classes
            )));
        }
        let mut ch = in_ch;
        let mut side = in_h;
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.blocks.is_empty() {
                return Err(Error::validation(format!("stage {} has no blocks", si)));
            }
            if stage.stride != 1 && stage.stride != 2 {
                return Err(Error::validation(format!(
                    "stage {} stride must be 1 or 2, got {}",
                    si, stage.stride
                )));
            }
            for (bi, block) in stage.blocks.iter().enumerate() {
                let ctx = format!("stage {} block {}", si, bi);
                for (name, conv) in [("conv1", &block.conv1), ("conv2", &block.conv2)] {
                    if conv.in_channels == 0 || conv.out_channels == 0 {
                        return Err(Error::validation(format!(
                            "{} {} has a zero channel count",
                            ctx, name
                        )));
                    }
                    if conv.kernel == 0 {
                        return Err(Error::validation(format!("{} {} has kernel 0", ctx, name)));
                    }
                    if conv.stride != 1 && conv.stride != 2 {
                        return Err(Error::validation(format!(
                            "{} {} stride must be 1 or 2",
                            ctx, name
                        )));
                    }
                }
                if block.conv1.in_channels != ch {
                    return Err(Error::validation(format!(
                        "{} expects {} input channels, previous width is {}",
                        ctx, block.conv1.in_channels, ch
                    )));
                }
                if block.conv1.out_channels != block.conv2.in_channels {
                    return Err(Error::validation(format!(
                        "{} conv1 out {} does not feed conv2 in {}",
                        ctx, block.conv1.out_channels, block.conv2.in_channels
                    )));
                }
                if block.conv2.out_channels != stage.out_channels {
                    return Err(Error::validation(format!(
                        "{} conv2 out {} does not match stage width {}",
                        ctx, block.conv2.out_channels, stage.out_channels
                    )));
                }
                if block.conv2.stride != 1 {
                    return Err(Error::validation(format!("{} conv2 must have stride 1", ctx)));
                }
                let expected_stride = if bi == 0 { stage.stride } else { 1 };
                if block.conv1.stride != expected_stride {
                    return Err(Error::validation(format!(
                        "{} conv1 stride {} does not match stage position (expected {})",
                        ctx, block.conv1.stride, expected_stride
                    )));
                }
                if bi == 0 {
                    // The projection slot never carries an identity shortcut.
                    if block.removable {
                        return Err(Error::validation(format!("{} (projection) marked removable", ctx)));
                    }
                } else {
                    if !block.removable {
                        return Err(Error::validation(format!(
                            "{} is shape-preserving but not marked removable",
                            ctx
                        )));
                    }
                    if block.in_channels() != block.out_channels() {
                        return Err(Error::validation(format!(
                            "{} has an identity shortcut but changes width {} -> {}",
                            ctx,
                            block.in_channels(),
                            block.out_channels()
                        )));
                    }
                }
                for conv in [&block.conv1, &block.conv2] {
                    side = conv.out_size(side).ok_or_else(|| {
                        Error::validation(format!("{} kernel larger than padded input", ctx))
                    })?;
                    if side == 0 {
                        return Err(Error::validation(format!(
                            "{} produces an empty spatial output",
                            ctx
                        )));
                    }
                }
                ch = block.out_channels();
            }
        }
        if self.head.in_features != ch {
            return Err(Error::validation(format!(
                "head expects {} features, network produces {}",
                self.head.in_features, ch
            )));
        }
        Ok(())
    }

    // ---- canonical text form ----------------------------------------------

    /// Renders the topology as canonical text: fixed field order, single
    /// spaces, one line per element. Two equal specs always render to
    /// identical bytes, so this form is safe to embed in checkpoints.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        out.push_str("prunetree-spec v1\n");
        out.push_str(&format!(
            "input {} {} {}\n",
            self.input_shape.0, self.input_shape.1, self.input_shape.2
        ));
        out.push_str(&format!(
            "head {} {}\n",
            self.head.in_features, self.head.num_classes
        ));
        for stage in &self.stages {
            out.push_str(&format!(
                "stage out={} stride={}\n",
                stage.out_channels, stage.stride
            ));
            for block in &stage.blocks {
                out.push_str(&format!(
                    "block removable={} conv1 {} conv2 {}\n",
                    u8::from(block.removable),
                    conv_text(&block.conv1),
                    conv_text(&block.conv2),
                ));
            }
        }
        out
    }

    /// Parses the canonical text form and validates the result.
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "prunetree-spec v1" {
            return Err(Error::validation(format!(
                "unsupported spec header {:?}",
                header
            )));
        }
        let input = parse_fields(lines.next(), "input", 3)?;
        let head = parse_fields(lines.next(), "head", 2)?;
        let mut stages: Vec<Stage> = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match parts.next() {
                Some("stage") => {
                    let out = parse_kv(parts.next(), "out")?;
                    let stride = parse_kv(parts.next(), "stride")?;
                    stages.push(Stage {
                        blocks: Vec::new(),
                        out_channels: out,
                        stride,
                    });
                }
                Some("block") => {
                    let stage = stages.last_mut().ok_or_else(|| {
                        Error::validation("block line before any stage line".to_string())
                    })?;
                    let removable = parse_kv::<u8>(parts.next(), "removable")? != 0;
                    let rest: Vec<&str> = parts.collect();
                    if rest.len() != 12 || rest[0] != "conv1" || rest[6] != "conv2" {
                        return Err(Error::validation(format!("malformed block line {:?}", line)));
                    }
                    let conv1 = parse_conv(&rest[1..6])?;
                    let conv2 = parse_conv(&rest[7..12])?;
                    stage.blocks.push(ResidualBlockSpec {
                        conv1,
                        conv2,
                        removable,
                    });
                }
                other => {
                    return Err(Error::validation(format!(
                        "unexpected spec line starting with {:?}",
                        other.unwrap_or("")
                    )));
                }
            }
        }
        let spec = NetworkSpec {
            stages,
            head: HeadSpec {
                in_features: head[0],
                num_classes: head[1],
            },
            input_shape: (input[0], input[1], input[2]),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_text(c: &ConvSpec) -> String {
    format!(
        "{} {} {} {} {}",
        c.in_channels, c.out_channels, c.kernel, c.stride, c.padding
    )
}

fn parse_conv(fields: &[&str]) -> Result<ConvSpec> {
    let v: Vec<usize> = fields
        .iter()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| Error::validation(format!("bad conv field {:?}", f)))
        })
        .collect::<Result<_>>()?;
    Ok(ConvSpec {
        in_channels: v[0],
        out_channels: v[1],
        kernel: v[2],
        stride: v[3],
        padding: v[4],
    })
}

fn parse_fields(line: Option<&str>, key: &str, n: usize) -> Result<Vec<usize>> {
    let line = line.ok_or_else(|| Error::validation(format!("missing {} line", key)))?;
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::validation(format!("expected {} line, got {:?}", key, line)));
    }
    let v: Vec<usize> = parts
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::validation(format!("bad {} field {:?}", key, p)))
        })
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::validation(format!(
            "{} line has {} fields, expected {}",
            key,
            v.len(),
            n
        )));
    }
    Ok(v)
}

fn parse_kv<T: std::str::FromStr>(part: Option<&str>, key: &str) -> Result<T> {
    let part = part.ok_or_else(|| Error::validation(format!("missing {}=", key)))?;
    let value = part
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| Error::validation(format!("expected {}=..., got {:?}", key, part)))?;
    value
        .parse::<T>()
        .map_err(|_| Error::validation(format!("bad value for {}: {:?}", key, value)))
}
