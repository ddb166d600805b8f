//! Structural removal: rebuilds a smaller network whose surviving
//! parameters are transplanted bit-for-bit from the parent.
//!
//! Removing a whole block drops it from its stage. Removing a filter group
//! rewires every consumer of the removed channels: interior conv1 channels
//! slice their own conv2's input, while stage output channels slice the
//! conv2 of every block in the stage, the conv1 of every later block in the
//! stage, and the downstream consumer (next stage's projection conv or the
//! head's weight columns). Identity shortcuts survive because producers and
//! consumers shrink together.

use crate::criteria::{self, Criterion, StructureId};
use crate::nn::dataset::Batch;
use crate::nn::flops::count_flops;
use crate::nn::model::ModelState;
use crate::nn::spec::NetworkSpec;
use crate::{Error, Result};

/// A pruned network derived from a parent.
#[derive(Debug, Clone)]
pub struct Subnetwork {
    pub model: ModelState,
    /// Removal steps applied, in order. Channel indices in each step refer
    /// to the network as it stood after the previous steps.
    pub removed: Vec<StructureId>,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// Topology after removing one structure, without touching parameters.
/// Cheap; used for capacity planning.
pub fn spec_after(spec: &NetworkSpec, s: &StructureId) -> Result<NetworkSpec> {
    criteria::validate_structure(spec, s)?;
    let mut out = spec.clone();
    match s {
        StructureId::LayerBlock { stage, block } => {
            out.stages[*stage].blocks.remove(*block);
        }
        StructureId::FilterGroup {
            stage,
            block,
            conv: 1,
            channels,
        } => {
            let b = &mut out.stages[*stage].blocks[*block];
            b.conv1.out_channels -= channels.len();
            b.conv2.in_channels -= channels.len();
        }
        StructureId::FilterGroup { stage, channels, .. } => {
            let width = out.stages[*stage].out_channels - channels.len();
            out.stages[*stage].out_channels = width;
            for (bi, b) in out.stages[*stage].blocks.iter_mut().enumerate() {
                b.conv2.out_channels = width;
                if bi > 0 {
                    b.conv1.in_channels = width;
                    // Shape preservation for shortcut blocks: interior width
                    // tracks the stage width only through conv1's input;
                    // conv1.out stays as is unless it was the stage width.
                }
            }
            if *stage + 1 < out.stages.len() {
                out.stages[*stage + 1].blocks[0].conv1.in_channels = width;
            } else {
                out.head.in_features = width;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

fn keep_list(width: usize, remove: &[usize]) -> Vec<usize> {
    let mut drop = vec![false; width];
    for &ch in remove {
        drop[ch] = true;
    }
    (0..width).filter(|&i| !drop[i]).collect()
}

/// Rows of a `[out][row_len]` tensor, keeping `keep` in order.
fn take_rows(w: &[f32], row_len: usize, keep: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(keep.len() * row_len);
    for &r in keep {
        out.extend_from_slice(&w[r * row_len..(r + 1) * row_len]);
    }
    out
}

fn take_indices(v: &[f32], keep: &[usize]) -> Vec<f32> {
    keep.iter().map(|&i| v[i]).collect()
}

/// Input-channel slices of a conv weight tensor `[c_out][c_in][k*k]`.
fn take_in_slices(w: &[f32], c_out: usize, c_in: usize, ksq: usize, keep: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(c_out * keep.len() * ksq);
    for co in 0..c_out {
        for &ci in keep {
            let base = (co * c_in + ci) * ksq;
            out.extend_from_slice(&w[base..base + ksq]);
        }
    }
    out
}

/// Feature columns of the head weight tensor `[classes][features]`.
fn take_head_cols(w: &[f32], classes: usize, features: usize, keep: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(classes * keep.len());
    for cls in 0..classes {
        let row = &w[cls * features..(cls + 1) * features];
        out.extend(keep.iter().map(|&f| row[f]));
    }
    out
}

/// Removes one structure from the parent, transplanting every surviving
/// parameter unchanged. The result is validated against its own topology.
pub fn remove_structure(parent: &ModelState, s: &StructureId) -> Result<Subnetwork> {
    parent.params.validate_against(&parent.spec)?;
    let new_spec = spec_after(&parent.spec, s)?;
    let mut params = parent.params.clone();

    match s {
        StructureId::LayerBlock { stage, block } => {
            params.stages[*stage].remove(*block);
        }
        StructureId::FilterGroup {
            stage,
            block,
            conv: 1,
            channels,
        } => {
            let b = &parent.spec.stages[*stage].blocks[*block];
            let keep = keep_list(b.conv1.out_channels, channels);
            let ksq = b.conv1.kernel * b.conv1.kernel;
            let p = &mut params.stages[*stage][*block];
            p.conv1_w = take_rows(&p.conv1_w, b.conv1.in_channels * ksq, &keep);
            p.conv1_b = take_indices(&p.conv1_b, &keep);
            p.aff1_scale = take_indices(&p.aff1_scale, &keep);
            p.aff1_shift = take_indices(&p.aff1_shift, &keep);
            let ksq2 = b.conv2.kernel * b.conv2.kernel;
            p.conv2_w = take_in_slices(&p.conv2_w, b.conv2.out_channels, b.conv2.in_channels, ksq2, &keep);
        }
        StructureId::FilterGroup { stage, channels, .. } => {
            let width = parent.spec.stages[*stage].out_channels;
            let keep = keep_list(width, channels);
            for (bi, b) in parent.spec.stages[*stage].blocks.iter().enumerate() {
                let p = &mut params.stages[*stage][bi];
                let ksq2 = b.conv2.kernel * b.conv2.kernel;
                p.conv2_w = take_rows(&p.conv2_w, b.conv2.in_channels * ksq2, &keep);
                p.conv2_b = take_indices(&p.conv2_b, &keep);
                p.aff2_scale = take_indices(&p.aff2_scale, &keep);
                p.aff2_shift = take_indices(&p.aff2_shift, &keep);
                if bi > 0 {
                    let ksq1 = b.conv1.kernel * b.conv1.kernel;
                    p.conv1_w = take_in_slices(&p.conv1_w, b.conv1.out_channels, b.conv1.in_channels, ksq1, &keep);
                }
            }
            if *stage + 1 < parent.spec.stages.len() {
                let nb = &parent.spec.stages[*stage + 1].blocks[0];
                let ksq = nb.conv1.kernel * nb.conv1.kernel;
                let p = &mut params.stages[*stage + 1][0];
                p.conv1_w = take_in_slices(&p.conv1_w, nb.conv1.out_channels, nb.conv1.in_channels, ksq, &keep);
            } else {
                let head = &parent.spec.head;
                params.head.w = take_head_cols(&params.head.w, head.num_classes, head.in_features, &keep);
            }
        }
    }

    params.validate_against(&new_spec)?;
    let flops_before = count_flops(&parent.spec);
    let flops_after = count_flops(&new_spec);
    Ok(Subnetwork {
        model: ModelState {
            spec: new_spec,
            params,
            rng_seed: parent.rng_seed,
            epoch_counter: parent.epoch_counter,
        },
        removed: vec![s.clone()],
        flops_before,
        flops_after,
    })
}

// ---- candidate construction -------------------------------------------------

/// Knobs for building the per-iteration candidate pair.
#[derive(Debug, Clone)]
pub struct CandidateOptions {
    pub criterion: Criterion,
    /// Channels per filter group.
    pub group_size: usize,
    /// Half-width of the capacity band, as a fraction of the target delta.
    pub tau: f64,
    /// Capacity target to use when no removable block is left; callers pass
    /// the most recent block delta they observed.
    pub fallback_delta: Option<u64>,
}

/// The two candidates of one iteration. A `None` side is exhausted: no
/// structure of that family can be removed (or, for filters, no selection
/// lands inside the capacity band).
#[derive(Debug)]
pub struct Candidates {
    pub layer: Option<Subnetwork>,
    pub filter: Option<Subnetwork>,
    /// FLOP reduction the filter side aimed to match.
    pub target_delta: Option<u64>,
}

/// Builds the capacity-matched candidate pair.
///
/// Layer side: the lowest-scoring removable block. Filter side: lowest-
/// scoring groups removed greedily, re-scored after every removal, until
/// the total FLOP reduction reaches `(1 - tau) * target` while never
/// exceeding `(1 + tau) * target`; the target is the layer side's own
/// reduction when it exists.
pub fn make_candidates(parent: &ModelState, probe: &Batch, opts: &CandidateOptions) -> Result<Candidates> {
    if !(opts.tau >= 0.0 && opts.tau < 1.0) {
        return Err(Error::validation("tau must be in [0, 1)".to_string()));
    }
    let blocks = criteria::enumerate_layer_blocks(&parent.spec);
    let layer = if blocks.is_empty() {
        None
    } else {
        let ranked = criteria::rank_structures(parent, probe, opts.criterion, &blocks)?;
        Some(remove_structure(parent, &ranked[0].structure)?)
    };

    let parent_flops = count_flops(&parent.spec);
    let target = match (&layer, opts.fallback_delta) {
        (Some(sub), _) => Some(sub.flops_before - sub.flops_after),
        (None, Some(d)) => Some(d),
        (None, None) => {
            // No block ever existed: anchor capacity to the single cheapest
            // group so the first iteration is well defined.
            let groups = criteria::enumerate_filter_groups(&parent.spec, opts.group_size);
            if groups.is_empty() {
                None
            } else {
                let ranked = criteria::rank_structures(parent, probe, opts.criterion, &groups)?;
                let after = spec_after(&parent.spec, &ranked[0].structure)?;
                Some(parent_flops - count_flops(&after))
            }
        }
    };

    let filter = match target {
        None => None,
        Some(target) => build_filter_candidate(parent, probe, opts, target)?,
    };

    Ok(Candidates {
        layer,
        filter,
        target_delta: target,
    })
}

fn build_filter_candidate(
    parent: &ModelState,
    probe: &Batch,
    opts: &CandidateOptions,
    target: u64,
) -> Result<Option<Subnetwork>> {
    let lo = (1.0 - opts.tau) * target as f64;
    let hi = (1.0 + opts.tau) * target as f64;
    let mut working = parent.clone();
    let mut removed: Vec<StructureId> = Vec::new();
    let mut delta: u64 = 0;

    while (delta as f64) < lo {
        let groups = criteria::enumerate_filter_groups(&working.spec, opts.group_size);
        if groups.is_empty() {
            return Ok(None);
        }
        let ranked = criteria::rank_structures(&working, probe, opts.criterion, &groups)?;
        let current = count_flops(&working.spec);
        let mut picked = None;
        for cand in &ranked {
            let after = spec_after(&working.spec, &cand.structure)?;
            let step = current - count_flops(&after);
            if (delta + step) as f64 <= hi {
                picked = Some((cand.structure.clone(), step));
                break;
            }
        }
        let Some((structure, step)) = picked else {
            // Every remaining group would overshoot the band.
            return Ok(None);
        };
        let sub = remove_structure(&working, &structure)?;
        working = sub.model;
        removed.push(structure);
        delta += step;
    }

    let flops_before = count_flops(&parent.spec);
    Ok(Some(Subnetwork {
        flops_after: flops_before - delta,
        flops_before,
        model: working,
        removed,
    }))
}
