//! The pruning loop: at each iteration build one layer candidate and one
//! capacity-matched filter candidate, briefly fine-tune both, and keep the
//! one whose pooled representation stays most similar to the parent's.
//! The survivor becomes the next parent.
//!
//! A random-walk mode replaces the similarity comparison with a fair coin
//! and is otherwise identical; it is the control arm for evaluating whether
//! the similarity signal earns its cost.

pub mod rundir;

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::criteria::{Criterion, StructureId};
use crate::nn::dataset::{Batch, Dataset};
use crate::nn::flops::count_flops;
use crate::nn::model::ModelState;
use crate::nn::train::{train, TrainConfig};
use crate::rng::{self, tags};
use crate::similarity::{cka, SimilarityMetric};
use crate::surgery::{self, CandidateOptions, Subnetwork};
use crate::{Error, Result};

/// How the per-iteration winner is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Representation similarity against the parent decides.
    CkaGuided,
    /// A fair coin decides; the control arm.
    RandomWalk,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::CkaGuided => write!(f, "cka"),
            Method::RandomWalk => write!(f, "random-walk"),
        }
    }
}

/// Which structure family won an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Layer,
    Filter,
}

impl std::fmt::Display for Choice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Choice::Layer => write!(f, "L"),
            Choice::Filter => write!(f, "F"),
        }
    }
}

/// The selection rule: the layer candidate wins whenever its similarity,
/// helped by the margin, at least matches the filter candidate's. Exact
/// ties go to the layer side.
pub fn choose(cka_layer: f64, cka_filter: f64, epsilon: f64) -> Choice {
    if cka_layer + epsilon >= cka_filter {
        Choice::Layer
    } else {
        Choice::Filter
    }
}

/// Engine knobs. Training hyperparameters travel separately in a
/// [`TrainConfig`]; its `epochs` field is ignored here because the engine
/// decides epoch counts per phase.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Maximum pruning iterations.
    pub iterations: usize,
    /// Margin added to the layer candidate's similarity before comparison.
    pub epsilon: f64,
    /// Fine-tune epochs each candidate gets before the comparison.
    pub recovery_epochs: usize,
    /// Per-iteration epoch budget; the winner trains for this minus the
    /// recovery epochs it already received (floored at zero).
    pub post_select_epochs: usize,
    pub method: Method,
    pub metric: SimilarityMetric,
    pub criterion: Criterion,
    pub seed: u64,
    /// Stop after the first iteration whose held-out accuracy drops below
    /// the unpruned baseline.
    pub stop_on_negative_delta: bool,
    /// Probe examples drawn from the training set for similarity and
    /// divergence scoring.
    pub probe_size: usize,
    /// Channels per filter group.
    pub group_size: usize,
    /// Half-width of the capacity matching band.
    pub tau: f64,
    /// 2 trains the two candidates on separate threads; 1 is sequential.
    /// Results are identical either way.
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            iterations: 8,
            epsilon: 0.0,
            recovery_epochs: 10,
            post_select_epochs: 10,
            method: Method::CkaGuided,
            metric: SimilarityMetric::Linear,
            criterion: Criterion::KlDivergence,
            seed: 0,
            stop_on_negative_delta: false,
            probe_size: 256,
            group_size: 4,
            tau: 0.1,
            workers: 1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("iterations must be at least 1".to_string()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::validation("epsilon must be finite and >= 0".to_string()));
        }
        if self.probe_size < 4 {
            return Err(Error::validation("probe_size must be at least 4".to_string()));
        }
        if self.group_size == 0 {
            return Err(Error::validation("group_size must be at least 1".to_string()));
        }
        if !(self.tau >= 0.0 && self.tau < 1.0) {
            return Err(Error::validation("tau must be in [0, 1)".to_string()));
        }
        if self.workers == 0 {
            return Err(Error::validation("workers must be at least 1".to_string()));
        }
        Ok(())
    }
}

/// Everything recorded about one iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub chosen: Choice,
    /// Similarity of each recovered candidate to the parent; absent for an
    /// exhausted or disqualified side, and always absent in random-walk runs.
    pub cka_layer: Option<f64>,
    pub cka_filter: Option<f64>,
    /// Removal steps of the winning candidate.
    pub removed: Vec<StructureId>,
    /// Per-candidate FLOP reductions and the band target the filter side
    /// aimed for.
    pub layer_delta: Option<u64>,
    pub filter_delta: Option<u64>,
    pub target_delta: Option<u64>,
    /// Winner's reduction this iteration.
    pub delta_flops: u64,
    pub flops_after: u64,
    /// Cumulative reduction against the original network, in percent.
    pub flop_reduction_pct: f64,
    /// Held-out accuracy after the winner's extra training.
    pub accuracy_after: f64,
    pub layer_exhausted: bool,
    pub filter_exhausted: bool,
    /// A side that diverged during recovery or lost its representation.
    pub disqualified: Option<Choice>,
    pub notes: String,
    #[serde(skip)]
    pub wall_secs: f64,
}

/// The most recent model whose held-out accuracy still matched the
/// baseline.
#[derive(Debug, Clone)]
pub struct BestModel {
    pub iteration: usize,
    pub accuracy: f64,
    pub model: ModelState,
}

/// Outcome of a full run.
#[derive(Debug)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub original_flops: u64,
    pub baseline_accuracy: f64,
    pub records: Vec<IterationRecord>,
    pub final_model: ModelState,
    pub best_positive: Option<BestModel>,
}

impl RunResult {
    /// One letter per iteration, e.g. "LFFL".
    pub fn compact_trace(&self) -> String {
        compact_trace(&self.records)
    }
}

pub fn compact_trace(records: &[IterationRecord]) -> String {
    records.iter().map(|r| r.chosen.to_string()).collect()
}

/// Run-length form with superscript counts, e.g. "L,F²,L³".
pub fn rle_trace(records: &[IterationRecord]) -> String {
    const SUPS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    let mut parts: Vec<String> = Vec::new();
    let mut iter = records.iter().peekable();
    while let Some(rec) = iter.next() {
        let mut count = 1usize;
        while iter.peek().map(|r| r.chosen) == Some(rec.chosen) {
            iter.next();
            count += 1;
        }
        let mut part = rec.chosen.to_string();
        if count > 1 {
            part.extend(count.to_string().chars().map(|c| SUPS[c as usize - '0' as usize]));
        }
        parts.push(part);
    }
    parts.join(",")
}

/// How many iterations chose each family.
pub fn layer_filter_counts(records: &[IterationRecord]) -> (usize, usize) {
    let layers = records.iter().filter(|r| r.chosen == Choice::Layer).count();
    (layers, records.len() - layers)
}

/// Per-iteration callback; receives each record and the surviving model.
pub type Observer<'a> = dyn FnMut(&IterationRecord, &ModelState) -> Result<()> + 'a;

struct Branch {
    model: ModelState,
    removed: Vec<StructureId>,
    delta: u64,
}

/// Runs the pruning loop.
///
/// `parent` is the trained network to shrink. Candidates re-seed their own
/// training streams from `(seed, iteration, side)`, so a run is a pure
/// function of its inputs. The observer fires after every iteration, before
/// the next one starts; returning an error from it aborts the run.
pub fn run(
    parent: &ModelState,
    train_data: &Dataset,
    heldout: &Dataset,
    cfg: &EngineConfig,
    tune: &TrainConfig,
    observer: &mut Observer,
) -> Result<RunResult> {
    cfg.validate()?;
    tune.validate()?;
    parent.params.validate_against(&parent.spec)?;
    let classes = parent.spec.head.num_classes;
    train_data.validate(classes)?;
    heldout.validate(classes)?;

    let original_flops = count_flops(&parent.spec);
    let baseline_accuracy = parent.evaluate(heldout)?;
    if baseline_accuracy < 1.5 / classes as f64 {
        log::warn!(
            "baseline held-out accuracy {:.4} is near chance for {} classes; \
             pruning decisions on this model are unlikely to be meaningful",
            baseline_accuracy,
            classes
        );
    }

    let m = cfg.probe_size.min(train_data.len());
    if m < 4 {
        return Err(Error::validation(format!(
            "training set has {} examples; at least 4 are needed for the probe",
            train_data.len()
        )));
    }
    let mut probe_rng = rng::stream(cfg.seed, &[tags::PROBE]);
    let mut probe_idx = rand::seq::index::sample(&mut probe_rng, train_data.len(), m).into_vec();
    probe_idx.sort_unstable();
    let probe = train_data.images.select(&probe_idx)?;

    let mut coin = rng::stream(cfg.seed, &[tags::COIN]);
    let mut current = parent.clone();
    let mut last_layer_delta: Option<u64> = None;
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut best_positive: Option<BestModel> = None;

    for k in 0..cfg.iterations {
        let started = Instant::now();
        let opts = CandidateOptions {
            criterion: cfg.criterion,
            group_size: cfg.group_size,
            tau: cfg.tau,
            fallback_delta: last_layer_delta,
        };
        let cands = surgery::make_candidates(&current, &probe, &opts)?;
        let layer_exhausted = cands.layer.is_none();
        let filter_exhausted = cands.filter.is_none();
        if layer_exhausted && filter_exhausted {
            log::info!("iteration {}: no structure left to remove, stopping", k);
            break;
        }
        if let Some(l) = &cands.layer {
            last_layer_delta = Some(l.flops_before - l.flops_after);
        }

        let mut notes: Vec<String> = Vec::new();
        if layer_exhausted {
            notes.push("layer side exhausted".to_string());
        }
        if filter_exhausted {
            notes.push("filter side exhausted".to_string());
        }

        let target_delta = cands.target_delta;
        let layer_delta = cands.layer.as_ref().map(|s| s.flops_before - s.flops_after);
        let filter_delta = cands.filter.as_ref().map(|s| s.flops_before - s.flops_after);

        let prep = |sub: Subnetwork, side: u64| -> Branch {
            let mut model = sub.model;
            model.rng_seed = rng::derive(cfg.seed, &[tags::CANDIDATE, k as u64, side]);
            model.epoch_counter = 0;
            Branch {
                delta: sub.flops_before - sub.flops_after,
                removed: sub.removed,
                model,
            }
        };
        let layer_branch = cands.layer.map(|s| prep(s, tags::BRANCH_LAYER));
        let filter_branch = cands.filter.map(|s| prep(s, tags::BRANCH_FILTER));

        let recovery = TrainConfig {
            epochs: cfg.recovery_epochs,
            ..tune.clone()
        };

        let outcome = match cfg.method {
            Method::CkaGuided => decide_by_similarity(
                &current,
                layer_branch,
                filter_branch,
                &probe,
                train_data,
                &recovery,
                cfg,
                &mut notes,
            )?,
            Method::RandomWalk => {
                // Draw every iteration so the coin stream position does not
                // depend on exhaustion history.
                let heads = coin.next_u32() & 1 == 0;
                decide_by_coin(heads, layer_branch, filter_branch, train_data, &recovery, &mut notes)?
            }
        };
        let Decision {
            chosen,
            mut winner,
            cka_layer,
            cka_filter,
            disqualified,
        } = outcome;

        let post = cfg.post_select_epochs.saturating_sub(cfg.recovery_epochs);
        if post > 0 {
            train(
                &mut winner.model,
                train_data,
                &TrainConfig {
                    epochs: post,
                    ..tune.clone()
                },
            )?;
        }
        let accuracy_after = winner.model.evaluate(heldout)?;
        let flops_after = count_flops(&winner.model.spec);

        let record = IterationRecord {
            k,
            chosen,
            cka_layer,
            cka_filter,
            removed: winner.removed,
            layer_delta,
            filter_delta,
            target_delta,
            delta_flops: winner.delta,
            flops_after,
            flop_reduction_pct: 100.0 * (original_flops - flops_after) as f64 / original_flops as f64,
            accuracy_after,
            layer_exhausted,
            filter_exhausted,
            disqualified,
            notes: notes.join("; "),
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "iteration {}: chose {} ({} removed, {:.2}% cumulative reduction, accuracy {:.4}, {:.1}s)",
            k,
            chosen,
            record.removed.len(),
            record.flop_reduction_pct,
            accuracy_after,
            record.wall_secs
        );
        observer(&record, &winner.model)?;
        let negative = accuracy_after < baseline_accuracy;
        if !negative {
            best_positive = Some(BestModel {
                iteration: k,
                accuracy: accuracy_after,
                model: winner.model.clone(),
            });
        }
        current = winner.model;
        records.push(record);
        if cfg.stop_on_negative_delta && negative {
            log::info!(
                "iteration {}: accuracy {:.4} fell below baseline {:.4}, stopping",
                k,
                accuracy_after,
                baseline_accuracy
            );
            break;
        }
    }

    Ok(RunResult {
        method: cfg.method,
        seed: cfg.seed,
        original_flops,
        baseline_accuracy,
        records,
        final_model: current,
        best_positive,
    })
}

struct Decision {
    chosen: Choice,
    winner: Branch,
    cka_layer: Option<f64>,
    cka_filter: Option<f64>,
    disqualified: Option<Choice>,
}

/// Recovery-trains a branch; `Ok(None)` means the branch diverged and is
/// out of the running, any other failure propagates.
fn recover(branch: &mut Branch, data: &Dataset, cfg: &TrainConfig) -> Result<Option<Error>> {
    match train(&mut branch.model, data, cfg) {
        Ok(_) => Ok(None),
        Err(e @ Error::TrainingDiverged { .. }) => Ok(Some(e)),
        Err(e) => Err(e),
    }
}

#[allow(clippy::too_many_arguments)]
fn decide_by_similarity(
    parent: &ModelState,
    layer: Option<Branch>,
    filter: Option<Branch>,
    probe: &Batch,
    data: &Dataset,
    recovery: &TrainConfig,
    cfg: &EngineConfig,
    notes: &mut Vec<String>,
) -> Result<Decision> {
    let parent_rep = parent.extract_representation(probe)?;

    // Recovery-train whichever branches exist, in parallel when allowed.
    let mut layer = layer;
    let mut filter = filter;
    let (layer_fail, filter_fail) = match (&mut layer, &mut filter) {
        (Some(l), Some(f)) if cfg.workers >= 2 => std::thread::scope(|scope| -> Result<_> {
            let handle = scope.spawn(|| recover(l, data, recovery));
            let f_fail = recover(f, data, recovery)?;
            let l_fail = handle.join().expect("recovery thread panicked")?;
            Ok((l_fail, f_fail))
        })?,
        (l, f) => {
            let l_fail = match l {
                Some(b) => recover(b, data, recovery)?,
                None => None,
            };
            let f_fail = match f {
                Some(b) => recover(b, data, recovery)?,
                None => None,
            };
            (l_fail, f_fail)
        }
    };

    // Score a recovered branch; a degenerate representation disqualifies it
    // the same way divergence does.
    let score = |branch: &Branch| -> Result<std::result::Result<f64, Error>> {
        let rep = match branch.model.extract_representation(probe) {
            Ok(r) => r,
            Err(e @ Error::DegenerateRepresentation(_)) => return Ok(Err(e)),
            Err(e) => return Err(e),
        };
        match cka(&cfg.metric, &parent_rep, &rep) {
            Ok(v) => Ok(Ok(v)),
            Err(e @ Error::DegenerateRepresentation(_)) => Ok(Err(e)),
            Err(e) => Err(e),
        }
    };

    let mut disqualified = None;
    let mut first_failure: Option<Error> = None;
    let mut evaluate_side = |branch: Option<Branch>,
                             fail: Option<Error>,
                             side: Choice,
                             notes: &mut Vec<String>|
     -> Result<Option<(Branch, f64)>> {
        let Some(branch) = branch else { return Ok(None) };
        if let Some(e) = fail {
            notes.push(format!("{} candidate disqualified: {}", side, e));
            disqualified = Some(side);
            first_failure.get_or_insert(e);
            return Ok(None);
        }
        match score(&branch)? {
            Ok(v) => Ok(Some((branch, v))),
            Err(e) => {
                notes.push(format!("{} candidate disqualified: {}", side, e));
                disqualified = Some(side);
                first_failure.get_or_insert(e);
                Ok(None)
            }
        }
    };

    let layer_scored = evaluate_side(layer, layer_fail, Choice::Layer, notes)?;
    let filter_scored = evaluate_side(filter, filter_fail, Choice::Filter, notes)?;

    match (layer_scored, filter_scored) {
        (Some((lb, ls)), Some((fb, fs))) => {
            let chosen = choose(ls, fs, cfg.epsilon);
            let winner = match chosen {
                Choice::Layer => lb,
                Choice::Filter => fb,
            };
            Ok(Decision {
                chosen,
                winner,
                cka_layer: Some(ls),
                cka_filter: Some(fs),
                disqualified,
            })
        }
        (Some((lb, ls)), None) => Ok(Decision {
            chosen: Choice::Layer,
            winner: lb,
            cka_layer: Some(ls),
            cka_filter: None,
            disqualified,
        }),
        (None, Some((fb, fs))) => Ok(Decision {
            chosen: Choice::Filter,
            winner: fb,
            cka_layer: None,
            cka_filter: Some(fs),
            disqualified,
        }),
        (None, None) => Err(first_failure
            .unwrap_or_else(|| Error::validation("no viable candidate this iteration".to_string()))),
    }
}

fn decide_by_coin(
    heads: bool,
    layer: Option<Branch>,
    filter: Option<Branch>,
    data: &Dataset,
    recovery: &TrainConfig,
    notes: &mut Vec<String>,
) -> Result<Decision> {
    let desired = if heads { Choice::Layer } else { Choice::Filter };
    // Order of preference: the coin's side, then the other if forced.
    let (first, second) = match desired {
        Choice::Layer => ((Choice::Layer, layer), (Choice::Filter, filter)),
        Choice::Filter => ((Choice::Filter, filter), (Choice::Layer, layer)),
    };
    let mut disqualified = None;
    let mut first_failure: Option<Error> = None;
    for (side, branch) in [first, second] {
        let Some(mut branch) = branch else {
            if side == desired {
                notes.push(format!("coin chose {} but that side is exhausted", side));
            }
            continue;
        };
        match recover(&mut branch, data, recovery)? {
            None => {
                return Ok(Decision {
                    chosen: side,
                    winner: branch,
                    cka_layer: None,
                    cka_filter: None,
                    disqualified,
                });
            }
            Some(e) => {
                notes.push(format!("{} candidate disqualified: {}", side, e));
                disqualified = Some(side);
                first_failure.get_or_insert(e);
            }
        }
    }
    Err(first_failure.unwrap_or_else(|| Error::validation("no viable candidate this iteration".to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::NetworkSpec;
    use crate::nn::synth::{synthetic_dataset, Split};

    #[test]
    fn selection_rule_prefers_layer_on_ties_and_margins() {
        assert_eq!(choose(0.9, 0.9, 0.0), Choice::Layer);
        assert_eq!(choose(0.89, 0.9, 0.0), Choice::Filter);
        assert_eq!(choose(0.89, 0.9, 0.02), Choice::Layer);
        assert_eq!(choose(0.95, 0.9, 0.0), Choice::Layer);
    }

    fn record_with(chosen: Choice) -> IterationRecord {
        IterationRecord {
            k: 0,
            chosen,
            cka_layer: None,
            cka_filter: None,
            removed: vec![],
            layer_delta: None,
            filter_delta: None,
            target_delta: None,
            delta_flops: 0,
            flops_after: 0,
            flop_reduction_pct: 0.0,
            accuracy_after: 0.0,
            layer_exhausted: false,
            filter_exhausted: false,
            disqualified: None,
            notes: String::new(),
            wall_secs: 0.0,
        }
    }

    #[test]
    fn trace_renderings() {
        use Choice::*;
        let records: Vec<_> = [Layer, Filter, Filter, Layer, Layer, Layer]
            .into_iter()
            .map(record_with)
            .collect();
        assert_eq!(compact_trace(&records), "LFFLLL");
        assert_eq!(rle_trace(&records), "L,F²,L³");
        assert_eq!(layer_filter_counts(&records), (4, 2));
        assert_eq!(rle_trace(&[]), "");
        let twelve: Vec<_> = (0..12).map(|_| record_with(Filter)).collect();
        assert_eq!(rle_trace(&twelve), "F¹²");
    }

    #[test]
    fn config_validation_catches_bad_knobs() {
        let ok = EngineConfig::default();
        ok.validate().unwrap();
        for f in [
            |c: &mut EngineConfig| c.iterations = 0,
            |c: &mut EngineConfig| c.epsilon = -0.1,
            |c: &mut EngineConfig| c.probe_size = 3,
            |c: &mut EngineConfig| c.group_size = 0,
            |c: &mut EngineConfig| c.tau = 1.0,
            |c: &mut EngineConfig| c.workers = 0,
        ] {
            let mut bad = EngineConfig::default();
            f(&mut bad);
            assert!(bad.validate().is_err());
        }
    }

    fn tiny_setup() -> (ModelState, Dataset, Dataset) {
        let spec = NetworkSpec::staged((1, 6, 6), &[4, 4], &[2, 2], &[1, 2], 3).unwrap();
        let mut model = crate::nn::init_model(&spec, 1).unwrap();
        let train_data = synthetic_dataset(9, 3, 48, 6, Split::Train).unwrap();
        let heldout = synthetic_dataset(9, 3, 24, 6, Split::Heldout).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: vec![],
        };
        train(&mut model, &train_data, &cfg).unwrap();
        (model, train_data, heldout)
    }

    fn tiny_engine_config(method: Method) -> EngineConfig {
        EngineConfig {
            iterations: 2,
            recovery_epochs: 1,
            post_select_epochs: 2,
            method,
            probe_size: 8,
            group_size: 2,
            seed: 5,
            ..EngineConfig::default()
        }
    }

    fn tiny_tune() -> TrainConfig {
        TrainConfig {
            epochs: 0,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: vec![],
        }
    }

    #[test]
    fn guided_run_shrinks_the_network_deterministically() {
        let (model, train_data, heldout) = tiny_setup();
        let cfg = tiny_engine_config(Method::CkaGuided);
        let mut observed = 0usize;
        let a = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |rec, m| {
            assert_eq!(count_flops(&m.spec), rec.flops_after);
            observed += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(observed, a.records.len());
        assert!(!a.records.is_empty());
        let mut prev = a.original_flops;
        for rec in &a.records {
            assert!(rec.flops_after < prev, "flops must strictly decrease");
            prev = rec.flops_after;
            // Both candidates existed here, so both similarities are known
            // and the choice follows the rule.
            if let (Some(l), Some(f)) = (rec.cka_layer, rec.cka_filter) {
                assert_eq!(rec.chosen, choose(l, f, cfg.epsilon));
            }
            assert!((0.0..=100.0).contains(&rec.flop_reduction_pct));
        }

        let b = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.compact_trace(), b.compact_trace());
        assert_eq!(a.baseline_accuracy, b.baseline_accuracy);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert_eq!(x.cka_layer, y.cka_layer);
            assert_eq!(x.cka_filter, y.cka_filter);
            assert_eq!(x.accuracy_after, y.accuracy_after);
            assert_eq!(x.flops_after, y.flops_after);
            assert_eq!(x.removed, y.removed);
        }
        assert_eq!(
            a.final_model.params.flatten(),
            b.final_model.params.flatten()
        );
    }

    #[test]
    fn parallel_recovery_matches_sequential() {
        let (model, train_data, heldout) = tiny_setup();
        let mut cfg = tiny_engine_config(Method::CkaGuided);
        let seq = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| Ok(())).unwrap();
        cfg.workers = 2;
        let par = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| Ok(())).unwrap();
        assert_eq!(seq.compact_trace(), par.compact_trace());
        for (x, y) in seq.records.iter().zip(&par.records) {
            assert_eq!(x.cka_layer, y.cka_layer);
            assert_eq!(x.accuracy_after, y.accuracy_after);
        }
        assert_eq!(
            seq.final_model.params.flatten(),
            par.final_model.params.flatten()
        );
    }

    #[test]
    fn random_walk_records_no_similarity() {
        let (model, train_data, heldout) = tiny_setup();
        let cfg = tiny_engine_config(Method::RandomWalk);
        let res = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| Ok(())).unwrap();
        assert!(!res.records.is_empty());
        for rec in &res.records {
            assert!(rec.cka_layer.is_none());
            assert!(rec.cka_filter.is_none());
        }
        // Same seed, same walk.
        let again = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| Ok(())).unwrap();
        assert_eq!(res.compact_trace(), again.compact_trace());
    }

    #[test]
    fn layer_exhaustion_forces_filter_choices() {
        // Single-block stage: no removable block exists, every iteration
        // must choose filters until those run out too.
        let spec = NetworkSpec::staged((1, 6, 6), &[6], &[1], &[1], 3).unwrap();
        let mut model = crate::nn::init_model(&spec, 2).unwrap();
        let train_data = synthetic_dataset(11, 3, 32, 6, Split::Train).unwrap();
        let heldout = synthetic_dataset(11, 3, 16, 6, Split::Heldout).unwrap();
        let tune = tiny_tune();
        train(
            &mut model,
            &train_data,
            &TrainConfig {
                epochs: 2,
                ..tune.clone()
            },
        )
        .unwrap();
        let cfg = EngineConfig {
            iterations: 12,
            recovery_epochs: 1,
            post_select_epochs: 1,
            probe_size: 8,
            group_size: 2,
            seed: 3,
            ..EngineConfig::default()
        };
        let res = run(&model, &train_data, &heldout, &cfg, &tune, &mut |_, _| Ok(())).unwrap();
        assert!(!res.records.is_empty());
        // Exhaustion stops the loop before the iteration budget.
        assert!(res.records.len() < cfg.iterations);
        for rec in &res.records {
            assert_eq!(rec.chosen, Choice::Filter);
            assert!(rec.layer_exhausted);
            assert!(rec.cka_layer.is_none());
        }
        // Nothing removable is left at the end.
        assert!(crate::criteria::enumerate_filter_groups(&res.final_model.spec, cfg.group_size).is_empty());
    }

    #[test]
    fn observer_errors_abort_the_run() {
        let (model, train_data, heldout) = tiny_setup();
        let cfg = tiny_engine_config(Method::CkaGuided);
        let err = run(&model, &train_data, &heldout, &cfg, &tiny_tune(), &mut |_, _| {
            Err(Error::validation("observer bail".to_string()))
        });
        assert!(err.is_err());
    }
}
