//! Model state: parameter storage, initialization, and inference.
//!
//! Parameters are stored per tensor in declaration order (for each stage,
//! for each block: conv1 weights/bias, its affine scale/shift, conv2
//! weights/bias, its affine scale/shift; then head weights/bias). The
//! flattened view of that order is the checkpoint payload and the layout
//! contract for surgery transplants.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;
use crate::nn::dataset::{Batch, Dataset};
use crate::nn::ops::{self, ConvDims};
use crate::nn::spec::NetworkSpec;
use crate::rng::{self, tags};
use crate::{Error, Result};

// ---- parameter store ------------------------------------------------------

/// Parameters of one block, shaped by its `ResidualBlockSpec`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub conv1_w: Vec<f32>,
    pub conv1_b: Vec<f32>,
    pub aff1_scale: Vec<f32>,
    pub aff1_shift: Vec<f32>,
    pub conv2_w: Vec<f32>,
    pub conv2_b: Vec<f32>,
    pub aff2_scale: Vec<f32>,
    pub aff2_shift: Vec<f32>,
}

/// Head parameters: weights `[classes][features]` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

/// Complete parameter store, mirroring the topology.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub stages: Vec<Vec<BlockParams>>,
    pub head: HeadParams,
}

impl Params {
    /// Zero-valued parameters shaped by `spec`.
    pub fn zeros(spec: &NetworkSpec) -> Params {
        let stages = spec
            .stages
            .iter()
            .map(|stage| {
                stage
                    .blocks
                    .iter()
                    .map(|b| BlockParams {
                        conv1_w: vec![0.0; b.conv1.weight_len()],
                        conv1_b: vec![0.0; b.conv1.out_channels],
                        aff1_scale: vec![0.0; b.conv1.out_channels],
                        aff1_shift: vec![0.0; b.conv1.out_channels],
                        conv2_w: vec![0.0; b.conv2.weight_len()],
                        conv2_b: vec![0.0; b.conv2.out_channels],
                        aff2_scale: vec![0.0; b.conv2.out_channels],
                        aff2_shift: vec![0.0; b.conv2.out_channels],
                    })
                    .collect()
            })
            .collect();
        Params {
            stages,
            head: HeadParams {
                w: vec![0.0; spec.head.in_features * spec.head.num_classes],
                b: vec![0.0; spec.head.num_classes],
            },
        }
    }

    /// Every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        let mut list = Vec::new();
        for stage in &self.stages {
            for b in stage {
                list.extend([
                    &b.conv1_w,
                    &b.conv1_b,
                    &b.aff1_scale,
                    &b.aff1_shift,
                    &b.conv2_w,
                    &b.conv2_b,
                    &b.aff2_scale,
                    &b.aff2_shift,
                ]);
            }
        }
        list.push(&self.head.w);
        list.push(&self.head.b);
        list
    }

    /// Mutable view of every tensor in declaration order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        let mut list = Vec::new();
        for stage in &mut self.stages {
            for b in stage {
                list.extend([
                    &mut b.conv1_w,
                    &mut b.conv1_b,
                    &mut b.aff1_scale,
                    &mut b.aff1_shift,
                    &mut b.conv2_w,
                    &mut b.conv2_b,
                    &mut b.aff2_scale,
                    &mut b.aff2_shift,
                ]);
            }
        }
        list.push(&mut self.head.w);
        list.push(&mut self.head.b);
        list
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Declaration-order flat view (checkpoint payload order).
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.count());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    /// Rebuilds a store shaped by `spec` from a declaration-order flat slice.
    pub fn from_flat(spec: &NetworkSpec, flat: &[f32]) -> Result<Params> {
        let mut params = Params::zeros(spec);
        let expected = params.count();
        if flat.len() != expected {
            return Err(Error::validation(format!(
                "parameter payload has {} values, spec requires {}",
                flat.len(),
                expected
            )));
        }
        let mut pos = 0;
        for t in params.tensors_mut() {
            let len = t.len();
            t.copy_from_slice(&flat[pos..pos + len]);
            pos += len;
        }
        Ok(params)
    }

    /// Checks tensor lengths against the spec's declared dimensions.
    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.stages.len() != spec.stages.len() {
            return Err(Error::validation("parameter/spec stage count mismatch".to_string()));
        }
        for (si, (ps, ss)) in self.stages.iter().zip(&spec.stages).enumerate() {
            if ps.len() != ss.blocks.len() {
                return Err(Error::validation(format!(
                    "stage {} has {} parameter blocks for {} spec blocks",
                    si,
                    ps.len(),
                    ss.blocks.len()
                )));
            }
            for (bi, (p, b)) in ps.iter().zip(&ss.blocks).enumerate() {
                let checks = [
                    (p.conv1_w.len(), b.conv1.weight_len(), "conv1 weights"),
                    (p.conv1_b.len(), b.conv1.out_channels, "conv1 bias"),
                    (p.aff1_scale.len(), b.conv1.out_channels, "affine1 scale"),
                    (p.aff1_shift.len(), b.conv1.out_channels, "affine1 shift"),
                    (p.conv2_w.len(), b.conv2.weight_len(), "conv2 weights"),
                    (p.conv2_b.len(), b.conv2.out_channels, "conv2 bias"),
                    (p.aff2_scale.len(), b.conv2.out_channels, "affine2 scale"),
                    (p.aff2_shift.len(), b.conv2.out_channels, "affine2 shift"),
                ];
                for (got, want, what) in checks {
                    if got != want {
                        return Err(Error::validation(format!(
                            "stage {} block {} {}: {} values for declared {}",
                            si, bi, what, got, want
                        )));
                    }
                }
            }
        }
        if self.head.w.len() != spec.head.in_features * spec.head.num_classes
            || self.head.b.len() != spec.head.num_classes
        {
            return Err(Error::validation("head parameter shape mismatch".to_string()));
        }
        Ok(())
    }
}

// ---- model state ----------------------------------------------------------

/// A network with its parameters and training bookkeeping.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub spec: NetworkSpec,
    pub params: Params,
    /// Base seed for this model's own random streams (epoch shuffling).
    pub rng_seed: u64,
    /// Total epochs this parameter set has been trained, across calls.
    pub epoch_counter: u64,
}

/// He fan-in initialization: conv and dense weights are zero-mean normal
/// with variance `2 / fan_in`; biases and affine shifts start at zero,
/// affine scales at one. Sampling order is declaration order from a single
/// stream, so equal seeds give bit-identical models.
pub fn init_model(spec: &NetworkSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[tags::INIT]);
    let mut params = Params::zeros(spec);
    for (ps, ss) in params.stages.iter_mut().zip(&spec.stages) {
        for (p, b) in ps.iter_mut().zip(&ss.blocks) {
            let std1 = (2.0 / (b.conv1.in_channels * b.conv1.kernel * b.conv1.kernel) as f64).sqrt();
            fill_normal(&mut rng, &mut p.conv1_w, std1);
            p.aff1_scale.fill(1.0);
            let std2 = (2.0 / (b.conv2.in_channels * b.conv2.kernel * b.conv2.kernel) as f64).sqrt();
            fill_normal(&mut rng, &mut p.conv2_w, std2);
            p.aff2_scale.fill(1.0);
        }
    }
    let std_head = (2.0 / spec.head.in_features as f64).sqrt();
    fill_normal(&mut rng, &mut params.head.w, std_head);
    Ok(ModelState {
        spec: spec.clone(),
        params,
        rng_seed: seed,
        epoch_counter: 0,
    })
}

fn fill_normal(rng: &mut impl Rng, dst: &mut [f32], std: f64) {
    for v in dst {
        let z: f64 = rng.sample(StandardNormal);
        *v = (z * std) as f32;
    }
}

// ---- ablation hooks -------------------------------------------------------

/// Virtual structure removal applied during a forward pass, without touching
/// parameters. Zeroing a channel's conv weights, bias, and affine scale and
/// shift makes that channel's post-affine activation exactly zero, so these
/// hooks zero activations directly; skipping a removable block is the
/// identity map. Both are observationally equal to structural removal.
#[derive(Debug, Clone)]
pub enum Ablation<'a> {
    /// Bypass one removable block.
    SkipBlock { stage: usize, block: usize },
    /// Zero post-affine conv1 channels of one block (block-interior width).
    InteriorChannels {
        stage: usize,
        block: usize,
        channels: &'a [usize],
    },
    /// Zero these stage-output channels in every block of the stage.
    StageChannels { stage: usize, channels: &'a [usize] },
}

fn zero_channels(data: &mut [f32], n: usize, c: usize, plane: usize, channels: &[usize]) {
    for i in 0..n {
        for &ch in channels {
            let base = (i * c + ch) * plane;
            data[base..base + plane].fill(0.0);
        }
    }
}

// ---- forward --------------------------------------------------------------

/// Output of a forward pass: class scores and the pooled pre-head features.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Matrix,
    pub rep: Matrix,
}

/// Activation tensor threaded between blocks.
pub(crate) struct Activation {
    pub data: Vec<f32>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ModelState {
    /// Runs the network on a batch. The batch shape must match the spec's
    /// input shape.
    pub fn forward(&self, batch: &Batch) -> Result<Forward> {
        self.forward_ablated(batch, None)
    }

    /// Forward pass with an optional virtual removal applied.
    pub(crate) fn forward_ablated(&self, batch: &Batch, ablation: Option<&Ablation>) -> Result<Forward> {
        let (n, c, h, w) = batch.shape();
        let (sc, sh, sw) = self.spec.input_shape;
        if (c, h, w) != (sc, sh, sw) {
            return Err(Error::validation(format!(
                "batch shape {}x{}x{} does not match network input {}x{}x{}",
                c, h, w, sc, sh, sw
            )));
        }
        if n == 0 {
            return Err(Error::validation("empty batch".to_string()));
        }
        let act = Activation {
            data: batch.data().to_vec(),
            c,
            h,
            w,
        };
        Ok(self.forward_tail(0, 0, act, n, ablation))
    }

    /// Continues the forward pass from the input of `(stage, block)` to the
    /// logits. `(0, 0)` is a full pass.
    pub(crate) fn forward_tail(
        &self,
        start_stage: usize,
        start_block: usize,
        mut act: Activation,
        n: usize,
        ablation: Option<&Ablation>,
    ) -> Forward {
        for (si, stage) in self.spec.stages.iter().enumerate().skip(start_stage) {
            let first_block = if si == start_stage { start_block } else { 0 };
            for (bi, block) in stage.blocks.iter().enumerate().skip(first_block) {
                act = self.run_block(si, bi, block, act, n, ablation);
            }
        }
        self.finish_head(act, n)
    }

    /// Collects the activation entering every block (and the final stage
    /// output), for callers that re-run suffixes of the network many times.
    pub(crate) fn forward_collecting(&self, batch: &Batch) -> Result<(Forward, Vec<Vec<Activation>>)> {
        let (n, c, h, w) = batch.shape();
        let (sc, sh, sw) = self.spec.input_shape;
        if (c, h, w) != (sc, sh, sw) {
            return Err(Error::validation(format!(
                "batch shape {}x{}x{} does not match network input {}x{}x{}",
                c, h, w, sc, sh, sw
            )));
        }
        let mut act = Activation {
            data: batch.data().to_vec(),
            c,
            h,
            w,
        };
        let mut inputs: Vec<Vec<Activation>> = Vec::with_capacity(self.spec.stages.len());
        for (si, stage) in self.spec.stages.iter().enumerate() {
            let mut stage_inputs = Vec::with_capacity(stage.blocks.len());
            for (bi, block) in stage.blocks.iter().enumerate() {
                stage_inputs.push(Activation {
                    data: act.data.clone(),
                    c: act.c,
                    h: act.h,
                    w: act.w,
                });
                act = self.run_block(si, bi, block, act, n, None);
            }
            inputs.push(stage_inputs);
        }
        Ok((self.finish_head(act, n), inputs))
    }

    fn run_block(
        &self,
        si: usize,
        bi: usize,
        block: &crate::nn::spec::ResidualBlockSpec,
        act: Activation,
        n: usize,
        ablation: Option<&Ablation>,
    ) -> Activation {
        if let Some(Ablation::SkipBlock { stage, block }) = ablation {
            if *stage == si && *block == bi {
                return act;
            }
        }
        let p = &self.params.stages[si][bi];
        let d1 = ConvDims::from_spec(&block.conv1, act.h, act.w);
        let mut a1 = vec![0.0f32; n * d1.out_len()];
        ops::conv2d(&d1, n, &act.data, &p.conv1_w, &p.conv1_b, &mut a1);
        let plane1 = d1.h_out * d1.w_out;
        let mut h1 = vec![0.0f32; a1.len()];
        ops::affine(n, d1.c_out, plane1, &a1, &p.aff1_scale, &p.aff1_shift, &mut h1);
        if let Some(Ablation::InteriorChannels { stage, block, channels }) = ablation {
            if *stage == si && *block == bi {
                zero_channels(&mut h1, n, d1.c_out, plane1, channels);
            }
        }
        ops::relu_inplace(&mut h1);

        let d2 = ConvDims::from_spec(&block.conv2, d1.h_out, d1.w_out);
        let mut a2 = vec![0.0f32; n * d2.out_len()];
        ops::conv2d(&d2, n, &h1, &p.conv2_w, &p.conv2_b, &mut a2);
        let plane2 = d2.h_out * d2.w_out;
        let mut z2 = vec![0.0f32; a2.len()];
        ops::affine(n, d2.c_out, plane2, &a2, &p.aff2_scale, &p.aff2_shift, &mut z2);
        if let Some(Ablation::StageChannels { stage, channels }) = ablation {
            if *stage == si {
                zero_channels(&mut z2, n, d2.c_out, plane2, channels);
            }
        }
        if block.removable {
            // Identity shortcut: shapes are preserved by the removability
            // invariant, so the input adds elementwise.
            ops::add_inplace(&mut z2, &act.data);
        }
        ops::relu_inplace(&mut z2);
        Activation {
            data: z2,
            c: d2.c_out,
            h: d2.h_out,
            w: d2.w_out,
        }
    }

    fn finish_head(&self, act: Activation, n: usize) -> Forward {
        let plane = act.h * act.w;
        let mut rep = vec![0.0f32; n * act.c];
        ops::gap(n, act.c, plane, &act.data, &mut rep);
        let head = &self.spec.head;
        let mut logits = vec![0.0f32; n * head.num_classes];
        ops::dense(
            n,
            head.in_features,
            head.num_classes,
            &rep,
            &self.params.head.w,
            &self.params.head.b,
            &mut logits,
        );
        Forward {
            logits: Matrix::from_vec(logits, n, head.num_classes).expect("shape by construction"),
            rep: Matrix::from_vec(rep, n, act.c).expect("shape by construction"),
        }
    }

    // ---- evaluation ---------------------------------------------------------

    /// Classification accuracy on a dataset. Prediction is the argmax of the
    /// logits; ties resolve to the lowest class index. Pure: repeated calls
    /// return identical results and leave the model untouched.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::validation("evaluate called with an empty dataset".to_string()));
        }
        data.validate(self.spec.head.num_classes)?;
        let mut correct = 0usize;
        let chunk = 256;
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let indices: Vec<usize> = (start..end).collect();
            let batch = data.images.select(&indices)?;
            let fwd = self.forward(&batch)?;
            for (row, &label) in (0..batch.len()).zip(&data.labels[start..end]) {
                let scores = fwd.logits.row(row);
                let mut best = 0usize;
                for (c, &s) in scores.iter().enumerate().skip(1) {
                    if s > scores[best] {
                        best = c;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f64 / n as f64)
    }

    /// Pooled pre-head features for a probe batch of at least 4 images,
    /// one row per probe image. Read-only.
    pub fn extract_representation(&self, probe: &Batch) -> Result<Matrix> {
        if probe.len() < 4 {
            return Err(Error::validation(format!(
                "representation probe needs at least 4 images, got {}",
                probe.len()
            )));
        }
        let fwd = self.forward(probe)?;
        if !fwd.rep.is_finite() {
            return Err(Error::validation("non-finite representation entries".to_string()));
        }
        Ok(fwd.rep)
    }
}
