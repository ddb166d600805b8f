//! Minibatch SGD with momentum, weight decay, and a step learning-rate
//! schedule.
//!
//! Shuffle order is drawn from a stream derived from the model's seed and
//! its lifetime epoch counter, so training is reproducible across process
//! runs and resumes: epoch 7 shuffles the same way whether it was reached
//! in one call or two.

use rand::seq::SliceRandom;

use crate::nn::dataset::Dataset;
use crate::nn::model::{BlockParams, ModelState, Params};
use crate::nn::ops::{self, ConvDims};
use crate::rng::{self, tags};
use crate::{Error, Result};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Step schedule: `(epoch, multiplier)` pairs with strictly increasing
    /// epochs. At local epoch `e` the effective rate is `learning_rate`
    /// times the multiplier of the last entry with epoch `<= e` (1.0 before
    /// any entry). Epochs are counted within the call, starting at zero.
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Plain SGD with no normalization layers is sensitive to the step
        // size: much above 1e-3 the deeper configurations lose every relu
        // within a few batches and never recover.
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1".to_string()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be finite and >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must be in [0, 1)".to_string()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::validation("weight_decay must be finite and >= 0".to_string()));
        }
        let mut prev: Option<usize> = None;
        for &(epoch, mult) in &self.lr_schedule {
            if let Some(p) = prev {
                if epoch <= p {
                    return Err(Error::validation(
                        "lr_schedule epochs must be strictly increasing".to_string(),
                    ));
                }
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return Err(Error::validation(
                    "lr_schedule multipliers must be finite and positive".to_string(),
                ));
            }
            prev = Some(epoch);
        }
        Ok(())
    }

    /// Effective rate at a local (within-call) epoch index.
    pub fn rate_at(&self, local_epoch: usize) -> f64 {
        let mut mult = 1.0;
        for &(epoch, m) in &self.lr_schedule {
            if epoch <= local_epoch {
                mult = m;
            } else {
                break;
            }
        }
        self.learning_rate * mult
    }
}

/// Summary of a completed training call.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Mean cross-entropy over the final epoch; `None` when `epochs == 0`.
    pub final_loss: Option<f64>,
}

/// Trains the model in place. The dataset is shuffled each epoch; the final
/// short batch is kept. A non-finite loss aborts with `TrainingDiverged` at
/// the model's lifetime epoch. Momentum velocity is local to the call.
pub fn train(model: &mut ModelState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::validation("training dataset is empty".to_string()));
    }
    data.validate(model.spec.head.num_classes)?;
    let (_, c, h, w) = data.images.shape();
    if (c, h, w) != model.spec.input_shape {
        return Err(Error::validation(format!(
            "training images are {}x{}x{}, network expects {}x{}x{}",
            c, h, w, model.spec.input_shape.0, model.spec.input_shape.1, model.spec.input_shape.2
        )));
    }

    let n = data.len();
    let momentum = cfg.momentum as f32;
    let decay = cfg.weight_decay as f32;
    let mut velocity = Params::zeros(&model.spec);
    let mut final_loss = None;

    for local_epoch in 0..cfg.epochs {
        let lr = cfg.rate_at(local_epoch) as f32;
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(model.rng_seed, &[tags::EPOCH, model.epoch_counter]);
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.images.select(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (tape, logits) = forward_train(model, batch.data(), batch.len());
            let (loss, dlogits) = ops::softmax_cross_entropy(
                &logits,
                batch.len(),
                model.spec.head.num_classes,
                &labels,
            );
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: model.epoch_counter,
                });
            }
            loss_sum += loss * batch.len() as f64;
            let grads = backward(model, &tape, &dlogits);
            apply_sgd(&mut model.params, &grads, &mut velocity, lr, momentum, decay);
        }
        final_loss = Some(loss_sum / n as f64);
        model.epoch_counter += 1;
    }

    Ok(TrainReport {
        epochs_run: cfg.epochs,
        final_loss,
    })
}

fn apply_sgd(
    params: &mut Params,
    grads: &Params,
    velocity: &mut Params,
    lr: f32,
    momentum: f32,
    decay: f32,
) {
    let g_list = grads.tensors();
    let mut p_list = params.tensors_mut();
    let mut v_list = velocity.tensors_mut();
    for ((p, g), v) in p_list.iter_mut().zip(&g_list).zip(v_list.iter_mut()) {
        for ((pw, &gw), vw) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vw = momentum * *vw + gw + decay * *pw;
            *pw -= lr * *vw;
        }
    }
}

// ---- tape ------------------------------------------------------------------

struct BlockTape {
    stage: usize,
    block: usize,
    /// Block input (conv1's input and, for removable blocks, the shortcut).
    x: Vec<f32>,
    /// conv1 raw output, before its affine.
    a1: Vec<f32>,
    /// conv1 branch after relu (conv2's input).
    h1: Vec<f32>,
    /// conv2 raw output, before its affine.
    a2: Vec<f32>,
    /// Block output, after shortcut add and relu.
    y: Vec<f32>,
    d1: ConvDims,
    d2: ConvDims,
    removable: bool,
}

struct Tape {
    blocks: Vec<BlockTape>,
    /// Pooled features entering the head.
    rep: Vec<f32>,
    /// Spatial plane of the final stage output, for pooling backward.
    last_c: usize,
    last_plane: usize,
    n: usize,
}

fn forward_train(model: &ModelState, images: &[f32], n: usize) -> (Tape, Vec<f32>) {
    let (c0, h0, w0) = model.spec.input_shape;
    let mut x = images.to_vec();
    let mut c = c0;
    let mut hh = h0;
    let mut ww = w0;
    let mut blocks = Vec::new();

    for (si, stage) in model.spec.stages.iter().enumerate() {
        for (bi, block) in stage.blocks.iter().enumerate() {
            let p = &model.params.stages[si][bi];
            let d1 = ConvDims::from_spec(&block.conv1, hh, ww);
            let mut a1 = vec![0.0f32; n * d1.out_len()];
            ops::conv2d(&d1, n, &x, &p.conv1_w, &p.conv1_b, &mut a1);
            let mut h1 = vec![0.0f32; a1.len()];
            ops::affine(n, d1.c_out, d1.h_out * d1.w_out, &a1, &p.aff1_scale, &p.aff1_shift, &mut h1);
            ops::relu_inplace(&mut h1);

            let d2 = ConvDims::from_spec(&block.conv2, d1.h_out, d1.w_out);
            let mut a2 = vec![0.0f32; n * d2.out_len()];
            ops::conv2d(&d2, n, &h1, &p.conv2_w, &p.conv2_b, &mut a2);
            let mut y = vec![0.0f32; a2.len()];
            ops::affine(n, d2.c_out, d2.h_out * d2.w_out, &a2, &p.aff2_scale, &p.aff2_shift, &mut y);
            if block.removable {
                ops::add_inplace(&mut y, &x);
            }
            ops::relu_inplace(&mut y);

            c = d2.c_out;
            hh = d2.h_out;
            ww = d2.w_out;
            let x_prev = std::mem::replace(&mut x, y.clone());
            blocks.push(BlockTape {
                stage: si,
                block: bi,
                x: x_prev,
                a1,
                h1,
                a2,
                y,
                d1,
                d2,
                removable: block.removable,
            });
        }
    }

    let plane = hh * ww;
    let mut rep = vec![0.0f32; n * c];
    ops::gap(n, c, plane, &x, &mut rep);
    let head = &model.spec.head;
    let mut logits = vec![0.0f32; n * head.num_classes];
    ops::dense(
        n,
        head.in_features,
        head.num_classes,
        &rep,
        &model.params.head.w,
        &model.params.head.b,
        &mut logits,
    );
    (
        Tape {
            blocks,
            rep,
            last_c: c,
            last_plane: plane,
            n,
        },
        logits,
    )
}

fn backward(model: &ModelState, tape: &Tape, dlogits: &[f32]) -> Params {
    let n = tape.n;
    let head = &model.spec.head;
    let mut grads = Params::zeros(&model.spec);

    let mut drep = vec![0.0f32; tape.rep.len()];
    ops::dense_grad(
        n,
        head.in_features,
        head.num_classes,
        &tape.rep,
        &model.params.head.w,
        dlogits,
        &mut drep,
        &mut grads.head.w,
        &mut grads.head.b,
    );

    let mut dy = vec![0.0f32; n * tape.last_c * tape.last_plane];
    ops::gap_grad(n, tape.last_c, tape.last_plane, &drep, &mut dy);

    for bt in tape.blocks.iter().rev() {
        let p = &model.params.stages[bt.stage][bt.block];
        let g: &mut BlockParams = &mut grads.stages[bt.stage][bt.block];

        // Through the output relu: mask by the forward output.
        let mut ds = vec![0.0f32; dy.len()];
        ops::relu_grad(&bt.y, &dy, &mut ds);

        // Shortcut branch contributes ds directly to the block input.
        let mut dx = vec![0.0f32; bt.x.len()];
        if bt.removable {
            dx.copy_from_slice(&ds);
        }

        // Second affine, then conv2.
        let mut da2 = vec![0.0f32; bt.a2.len()];
        ops::affine_grad(
            n,
            bt.d2.c_out,
            bt.d2.h_out * bt.d2.w_out,
            &bt.a2,
            &p.aff2_scale,
            &ds,
            &mut da2,
            &mut g.aff2_scale,
            &mut g.aff2_shift,
        );
        let mut dh1 = vec![0.0f32; bt.h1.len()];
        ops::conv2d_grad_input(&bt.d2, n, &da2, &p.conv2_w, &mut dh1);
        ops::conv2d_grad_params(&bt.d2, n, &bt.h1, &da2, &mut g.conv2_w, &mut g.conv2_b);

        // Interior relu, first affine, conv1.
        let mut dz1 = vec![0.0f32; dh1.len()];
        ops::relu_grad(&bt.h1, &dh1, &mut dz1);
        let mut da1 = vec![0.0f32; bt.a1.len()];
        ops::affine_grad(
            n,
            bt.d1.c_out,
            bt.d1.h_out * bt.d1.w_out,
            &bt.a1,
            &p.aff1_scale,
            &dz1,
            &mut da1,
            &mut g.aff1_scale,
            &mut g.aff1_shift,
        );
        let mut dx_main = vec![0.0f32; bt.x.len()];
        ops::conv2d_grad_input(&bt.d1, n, &da1, &p.conv1_w, &mut dx_main);
        ops::conv2d_grad_params(&bt.d1, n, &bt.x, &da1, &mut g.conv1_w, &mut g.conv1_b);

        ops::add_inplace(&mut dx, &dx_main);
        dy = dx;
    }

    grads
}
