//! Renders a finished run (and its per-iteration survivors) into a
//! directory of artifacts: a JSON trace, a terse text summary, a CSV table,
//! and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{compact_trace, layer_filter_counts, rle_trace, IterationRecord, Method, RunResult};
use crate::nn::checkpoint::save_checkpoint;
use crate::nn::model::ModelState;
use crate::Result;

/// Output directory for one run.
pub struct RunDir {
    dir: PathBuf,
    keep_iterates: bool,
}

impl RunDir {
    /// Creates the directory (and parents). With `keep_iterates` every
    /// iteration's surviving model is checkpointed as `iter_<k>.prnet`.
    pub fn create(dir: impl Into<PathBuf>, keep_iterates: bool) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(RunDir { dir, keep_iterates })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    /// Observer hook for [`super::run`].
    pub fn observe(&self, rec: &IterationRecord, model: &ModelState) -> Result<()> {
        if self.keep_iterates {
            save_checkpoint(model, &self.dir.join(format!("iter_{}.prnet", rec.k)))?;
        }
        Ok(())
    }

    /// Writes trace.json, trace.txt, iterations.csv, final.prnet and, when
    /// some iterate held the baseline accuracy, best_positive.prnet.
    pub fn finish(&self, result: &RunResult) -> Result<()> {
        fs::write(self.dir.join("trace.json"), render_trace_json(result)?)?;
        fs::write(self.dir.join("trace.txt"), render_trace_txt(result))?;
        fs::write(self.dir.join("iterations.csv"), render_iterations_csv(&result.records))?;
        save_checkpoint(&result.final_model, &self.dir.join("final.prnet"))?;
        if let Some(best) = &result.best_positive {
            save_checkpoint(&best.model, &self.dir.join("best_positive.prnet"))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TraceDoc<'a> {
    method: Method,
    seed: u64,
    original_flops: u64,
    baseline_accuracy: f64,
    final_flops: u64,
    final_accuracy: Option<f64>,
    flop_reduction_pct: f64,
    trace: String,
    best_positive_iteration: Option<usize>,
    best_positive_accuracy: Option<f64>,
    records: &'a [IterationRecord],
}

pub fn render_trace_json(result: &RunResult) -> Result<String> {
    let final_flops = result
        .records
        .last()
        .map(|r| r.flops_after)
        .unwrap_or(result.original_flops);
    let doc = TraceDoc {
        method: result.method,
        seed: result.seed,
        original_flops: result.original_flops,
        baseline_accuracy: result.baseline_accuracy,
        final_flops,
        final_accuracy: result.records.last().map(|r| r.accuracy_after),
        flop_reduction_pct: 100.0 * (result.original_flops - final_flops) as f64
            / result.original_flops as f64,
        trace: compact_trace(&result.records),
        best_positive_iteration: result.best_positive.as_ref().map(|b| b.iteration),
        best_positive_accuracy: result.best_positive.as_ref().map(|b| b.accuracy),
        records: &result.records,
    };
    let mut text = serde_json::to_string_pretty(&doc).expect("trace serialization cannot fail");
    text.push('\n');
    Ok(text)
}

pub fn render_trace_txt(result: &RunResult) -> String {
    let (layers, filters) = layer_filter_counts(&result.records);
    let final_flops = result
        .records
        .last()
        .map(|r| r.flops_after)
        .unwrap_or(result.original_flops);
    let mut out = String::new();
    out.push_str(&format!("method {} seed {}\n", result.method, result.seed));
    out.push_str(&format!("trace {}\n", compact_trace(&result.records)));
    out.push_str(&format!("runs {}\n", rle_trace(&result.records)));
    out.push_str(&format!("layer {} filter {}\n", layers, filters));
    out.push_str(&format!(
        "flops {} -> {} ({:.2}% reduction)\n",
        result.original_flops,
        final_flops,
        100.0 * (result.original_flops - final_flops) as f64 / result.original_flops as f64
    ));
    out.push_str(&format!("baseline accuracy {:.4}\n", result.baseline_accuracy));
    if let Some(rec) = result.records.last() {
        out.push_str(&format!("final accuracy {:.4}\n", rec.accuracy_after));
    }
    out
}

fn fmt_cka(v: Option<f64>) -> String {
    v.map(|x| format!("{:.6}", x)).unwrap_or_default()
}

pub fn render_iterations_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from("k,chosen,cka_layer,cka_filter,flops_after,flop_reduction_pct,accuracy_after\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.2},{:.4}\n",
            r.k,
            r.chosen,
            fmt_cka(r.cka_layer),
            fmt_cka(r.cka_filter),
            r.flops_after,
            r.flop_reduction_pct,
            r.accuracy_after
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{BestModel, Choice};
    use crate::nn::checkpoint::load_checkpoint;
    use crate::nn::spec::NetworkSpec;

    fn sample_record(k: usize, chosen: Choice, cka: Option<(f64, f64)>) -> IterationRecord {
        IterationRecord {
            k,
            chosen,
            cka_layer: cka.map(|c| c.0),
            cka_filter: cka.map(|c| c.1),
            removed: vec![],
            layer_delta: Some(100),
            filter_delta: Some(90),
            target_delta: Some(100),
            delta_flops: 100,
            flops_after: 1000 - 100 * (k as u64 + 1),
            flop_reduction_pct: 10.0 * (k as f64 + 1.0),
            accuracy_after: 0.875,
            layer_exhausted: false,
            filter_exhausted: false,
            disqualified: None,
            notes: String::new(),
            wall_secs: 0.0,
        }
    }

    fn sample_result() -> RunResult {
        let spec = NetworkSpec::staged((1, 6, 6), &[3], &[1], &[1], 3).unwrap();
        let model = crate::nn::init_model(&spec, 7).unwrap();
        RunResult {
            method: Method::CkaGuided,
            seed: 7,
            original_flops: 1000,
            baseline_accuracy: 0.9,
            records: vec![
                sample_record(0, Choice::Layer, Some((0.987654321, 0.95))),
                sample_record(1, Choice::Filter, None),
            ],
            best_positive: Some(BestModel {
                iteration: 0,
                accuracy: 0.91,
                model: model.clone(),
            }),
            final_model: model,
        }
    }

    #[test]
    fn csv_has_pinned_header_and_formats() {
        let result = sample_result();
        let csv = render_iterations_csv(&result.records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,chosen,cka_layer,cka_filter,flops_after,flop_reduction_pct,accuracy_after"
        );
        assert_eq!(lines.next().unwrap(), "0,L,0.987654,0.950000,900,10.00,0.8750");
        // Absent similarities leave their fields empty.
        assert_eq!(lines.next().unwrap(), "1,F,,,800,20.00,0.8750");
        assert!(lines.next().is_none());
    }

    #[test]
    fn text_summary_mentions_trace_and_counts() {
        let txt = render_trace_txt(&sample_result());
        assert!(txt.contains("trace LF\n"));
        assert!(txt.contains("layer 1 filter 1\n"));
        assert!(txt.contains("baseline accuracy 0.9000"));
    }

    #[test]
    fn directory_render_round_trips_checkpoints() {
        let result = sample_result();
        let tmp = tempfile::tempdir().unwrap();
        let dir = RunDir::create(tmp.path().join("run"), true).unwrap();
        for rec in &result.records {
            dir.observe(rec, &result.final_model).unwrap();
        }
        dir.finish(&result).unwrap();
        for name in [
            "trace.json",
            "trace.txt",
            "iterations.csv",
            "final.prnet",
            "best_positive.prnet",
            "iter_0.prnet",
            "iter_1.prnet",
        ] {
            assert!(dir.path().join(name).exists(), "{} missing", name);
        }
        let loaded = load_checkpoint(&dir.path().join("final.prnet")).unwrap();
        assert_eq!(loaded.spec, result.final_model.spec);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("trace.json")).unwrap()).unwrap();
        assert_eq!(json["trace"], "LF");
        assert_eq!(json["records"].as_array().unwrap().len(), 2);
        // Wall-clock time is nondeterministic and must stay out of the trace.
        assert!(json["records"][0].get("wall_secs").is_none());
    }
}
