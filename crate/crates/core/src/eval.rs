//! Perplexity, throughput, exit sweeps, variant comparison and
//! activation-variance profiles.
//!
//! Sign convention: `ppl_delta_pct > 0` means the exit is *worse* than the
//! full model. Published tables sometimes list these increases as negative
//! "PPL decrease" values; [`ExitRow::published_ppl_decrease`] gives that
//! form.

use std::cmp::Ordering;
use std::io::{Read, Write};

use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Phase;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::training::cross_entropy;

/// Windows evaluated per graph.
const EVAL_GROUP: usize = 8;

/// Mean next-token cross-entropy (nats) and the number of scored tokens,
/// over non-overlapping windows of `window` tokens.
pub fn mean_cross_entropy<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    exit_layer: Option<usize>,
    window: usize,
) -> Result<(f64, usize)> {
    if corpus.len() < 2 {
        return Err(Error::Empty("perplexity needs at least two tokens"));
    }
    let k = exit_layer.unwrap_or(model.config().layers);
    let windows = corpus.eval_windows(window)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for group in windows.chunks(EVAL_GROUP) {
        let batch = Batch::stack(group);
        let logits = model.exit_logits_at(&batch.inputs, batch.layout, k)?;
        let n = batch.targets.iter().flatten().count();
        total += cross_entropy(&logits, &batch.targets)? * n as f64;
        count += n;
    }
    Ok((total / count as f64, count))
}

/// `exp(mean cross-entropy)` over windows of the model's context length.
pub fn perplexity<T: Scalar>(model: &Model<T>, corpus: &Corpus, exit_layer: Option<usize>) -> Result<f64> {
    perplexity_with_window(model, corpus, exit_layer, model.config().max_seq_len)
}

pub fn perplexity_with_window<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    exit_layer: Option<usize>,
    window: usize,
) -> Result<f64> {
    Ok(mean_cross_entropy(model, corpus, exit_layer, window)?.0.exp())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    /// Median tokens per second over the timed repeats.
    pub tok_per_s: f64,
    pub samples: Vec<f64>,
    pub threads: usize,
}

/// Worker threads available to the matrix kernels.
pub fn thread_count() -> usize {
    std::env::var("MATMUL_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Greedy-generation throughput: one untimed warm-up, then the median of
/// `repeats` timed runs.
pub fn throughput<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    n_tokens: usize,
    exit_layer: Option<usize>,
    repeats: usize,
) -> Result<Throughput> {
    if repeats < 3 {
        return Err(Error::Config(format!("throughput needs at least 3 repeats, got {repeats}")));
    }
    model.generate(prompt, n_tokens, exit_layer)?;
    let samples = (0..repeats)
        .map(|_| {
            let g = model.generate(prompt, n_tokens, exit_layer)?;
            Ok(n_tokens as f64 / g.elapsed.as_secs_f64().max(1e-12))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Throughput {
        tok_per_s: median(&samples),
        samples,
        threads: thread_count(),
    })
}

/// `ppl_delta / speed_gain`, defined only for a positive speed gain.
pub fn quality_speed_ratio(ppl_delta_pct: f64, speed_gain_pct: f64) -> Option<f64> {
    (speed_gain_pct > 0.0).then(|| ppl_delta_pct / speed_gain_pct)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitRow {
    pub exit_layer: usize,
    pub ppl: f64,
    pub tok_per_s: f64,
    pub ppl_delta_pct: f64,
    pub speed_gain_pct: f64,
    pub ratio: Option<f64>,
}

impl ExitRow {
    /// The delta in "PPL decrease" form (increase reported as negative).
    pub fn published_ppl_decrease(&self) -> f64 {
        -self.ppl_delta_pct
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExitSweepReport {
    pub variant: String,
    pub rows: Vec<ExitRow>,
}

pub const SWEEP_HEADER: [&str; 7] = [
    "variant",
    "exit_layer",
    "ppl",
    "tok_per_s",
    "ppl_delta_pct",
    "speed_gain_pct",
    "ratio",
];

const NA: &str = "NA";

impl ExitSweepReport {
    /// Derives deltas and ratios from raw `(layer, ppl, tok/s)` triples;
    /// the row at `full_layer` is the reference.
    pub fn from_measurements(
        variant: &str,
        full_layer: usize,
        measurements: &[(usize, f64, f64)],
    ) -> Result<Self> {
        let &(_, ppl_full, tok_full) = measurements
            .iter()
            .find(|m| m.0 == full_layer)
            .ok_or_else(|| Error::Config(format!("sweep lacks the full-model row (layer {full_layer})")))?;
        let rows = measurements
            .iter()
            .map(|&(exit_layer, ppl, tok_per_s)| {
                let (ppl_delta_pct, speed_gain_pct) = if exit_layer == full_layer {
                    (0.0, 0.0)
                } else {
                    ((ppl / ppl_full - 1.0) * 100.0, (tok_per_s / tok_full - 1.0) * 100.0)
                };
                ExitRow {
                    exit_layer,
                    ppl,
                    tok_per_s,
                    ppl_delta_pct,
                    speed_gain_pct,
                    ratio: quality_speed_ratio(ppl_delta_pct, speed_gain_pct),
                }
            })
            .collect();
        Ok(ExitSweepReport {
            variant: variant.to_string(),
            rows,
        })
    }

    pub fn full_layer(&self) -> usize {
        self.rows.iter().map(|r| r.exit_layer).max().unwrap_or(0)
    }

    pub fn row(&self, layer: usize) -> Option<&ExitRow> {
        self.rows.iter().find(|r| r.exit_layer == layer)
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.exit_layer).collect();
        l.sort_unstable();
        l
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(SWEEP_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                self.variant.clone(),
                r.exit_layer.to_string(),
                r.ppl.to_string(),
                r.tok_per_s.to_string(),
                r.ppl_delta_pct.to_string(),
                r.speed_gain_pct.to_string(),
                r.ratio.map_or_else(|| NA.to_string(), |v| v.to_string()),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses a sweep CSV (one variant per file).
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |m: String| Error::Format(m);
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != SWEEP_HEADER {
            return Err(bad(format!("unexpected sweep header {header:?}")));
        }
        let mut variant = None;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| bad(format!("bad number '{}'", &rec[i])))
            };
            variant.get_or_insert_with(|| rec[0].to_string());
            rows.push(ExitRow {
                exit_layer: rec[1].parse().map_err(|_| bad(format!("bad layer '{}'", &rec[1])))?,
                ppl: num(2)?,
                tok_per_s: num(3)?,
                ppl_delta_pct: num(4)?,
                speed_gain_pct: num(5)?,
                ratio: if &rec[6] == NA { None } else { Some(num(6)?) },
            });
        }
        Ok(ExitSweepReport {
            variant: variant.ok_or_else(|| bad("sweep CSV has no rows".into()))?,
            rows,
        })
    }
}

/// Generation settings used for the timing half of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimingSpec {
    pub prompt: Vec<usize>,
    pub n_tokens: usize,
    pub repeats: usize,
}

/// Perplexity and throughput at each exit layer; must include layer `L`.
pub fn exit_sweep<T: Scalar>(
    model: &Model<T>,
    variant: &str,
    corpus: &Corpus,
    exit_layers: &[usize],
    window: usize,
    timing: &TimingSpec,
) -> Result<ExitSweepReport> {
    let full = model.config().layers;
    if !exit_layers.contains(&full) {
        return Err(Error::Config(format!("exit layers must include the full depth {full}")));
    }
    let mut measurements = Vec::with_capacity(exit_layers.len());
    for &k in exit_layers {
        let ppl = perplexity_with_window(model, corpus, Some(k), window)?;
        let tp = throughput(model, &timing.prompt, timing.n_tokens, Some(k), timing.repeats)?;
        measurements.push((k, ppl, tp.tok_per_s));
    }
    ExitSweepReport::from_measurements(variant, full, &measurements)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Viability {
    Excellent,
    Poor,
}

impl Viability {
    pub fn as_str(self) -> &'static str {
        match self {
            Viability::Excellent => "excellent",
            Viability::Poor => "poor",
        }
    }
}

/// Exit at `3L/4` with at most this perplexity increase counts as viable.
pub const VIABILITY_THRESHOLD_PCT: f64 = 10.0;

pub fn viability(ppl_delta_pct: f64) -> Viability {
    if ppl_delta_pct <= VIABILITY_THRESHOLD_PCT {
        Viability::Excellent
    } else {
        Viability::Poor
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub variant: String,
    pub quality_rank: usize,
    pub speed_rank: usize,
    pub full_ppl: f64,
    pub full_tok_per_s: f64,
    pub probe_layer: usize,
    pub probe_ppl_delta_pct: f64,
    pub viability: Viability,
    /// Non-final exit with the lowest quality-speed ratio, if any.
    pub optimal_exit_layer: Option<usize>,
    pub optimal_ratio: Option<f64>,
}

pub const COMPARISON_HEADER: [&str; 10] = [
    "variant",
    "quality_rank",
    "speed_rank",
    "full_ppl",
    "full_tok_per_s",
    "probe_layer",
    "probe_ppl_delta_pct",
    "viability",
    "optimal_exit_layer",
    "optimal_ratio",
];

/// Perplexities closer than this count as tied.
pub const PPL_TIE: f64 = 1e-9;

/// Ranks variants by full-model perplexity (ties broken by speed rank) and
/// by full-model throughput, and grades exit viability at `3L/4`.
pub fn compare_variants(reports: &[ExitSweepReport]) -> Result<Vec<ComparisonRow>> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two sweep reports".into()));
    }
    let layers = reports[0].layers();
    if reports.iter().any(|r| r.layers() != layers) {
        return Err(Error::Config("sweep reports cover different exit layers".into()));
    }
    let full = reports[0].full_layer();
    let probe = 3 * full / 4;
    if !layers.contains(&probe) {
        return Err(Error::Config(format!("sweeps lack the 3L/4 exit (layer {probe})")));
    }
    let full_row = |r: &ExitSweepReport| r.row(full).cloned().expect("full layer present");
    let n = reports.len();

    let mut by_speed: Vec<usize> = (0..n).collect();
    by_speed.sort_by(|&a, &b| {
        full_row(&reports[b])
            .tok_per_s
            .total_cmp(&full_row(&reports[a]).tok_per_s)
    });
    let mut speed_rank = vec![0; n];
    for (rank, &i) in by_speed.iter().enumerate() {
        speed_rank[i] = rank + 1;
    }

    let mut by_quality: Vec<usize> = (0..n).collect();
    by_quality.sort_by(|&a, &b| {
        let (pa, pb) = (full_row(&reports[a]).ppl, full_row(&reports[b]).ppl);
        if (pa - pb).abs() <= PPL_TIE {
            speed_rank[a].cmp(&speed_rank[b])
        } else {
            pa.partial_cmp(&pb).unwrap_or(Ordering::Equal)
        }
    });

    Ok(by_quality
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let r = &reports[i];
            let fr = full_row(r);
            let pr = r.row(probe).expect("probe layer present");
            let best = r
                .rows
                .iter()
                .filter(|row| row.exit_layer != full)
                .filter_map(|row| row.ratio.map(|q| (row.exit_layer, q)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            ComparisonRow {
                variant: r.variant.clone(),
                quality_rank: rank + 1,
                speed_rank: speed_rank[i],
                full_ppl: fr.ppl,
                full_tok_per_s: fr.tok_per_s,
                probe_layer: probe,
                probe_ppl_delta_pct: pr.ppl_delta_pct,
                viability: viability(pr.ppl_delta_pct),
                optimal_exit_layer: best.map(|b| b.0),
                optimal_ratio: best.map(|b| b.1),
            }
        })
        .collect())
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(COMPARISON_HEADER).map_err(io)?;
    let opt = |v: Option<String>| v.unwrap_or_else(|| NA.to_string());
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.quality_rank.to_string(),
            r.speed_rank.to_string(),
            r.full_ppl.to_string(),
            r.full_tok_per_s.to_string(),
            r.probe_layer.to_string(),
            r.probe_ppl_delta_pct.to_string(),
            r.viability.as_str().to_string(),
            opt(r.optimal_exit_layer.map(|l| l.to_string())),
            opt(r.optimal_ratio.map(|q| q.to_string())),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Population standard deviation of each post-block hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceProfile {
    pub stds: Vec<f64>,
}

pub const VARIANCE_HEADER: [&str; 3] = ["variant", "layer", "std"];

impl VarianceProfile {
    pub fn write_csv<W: Write>(&self, variant: &str, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(VARIANCE_HEADER).map_err(io)?;
        for (l, s) in self.stds.iter().enumerate() {
            w.write_record([variant.to_string(), (l + 1).to_string(), s.to_string()])
                .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn population_std<T: Scalar>(values: &[T]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Per-layer activation spread on an inference-phase forward pass.
pub fn variance_profile<T: Scalar>(model: &Model<T>, probe: &Batch) -> Result<VarianceProfile> {
    if probe.inputs.is_empty() {
        return Err(Error::Empty("variance probe batch is empty"));
    }
    let mut g = Graph::inference();
    let trace = model.forward_full(
        &mut g,
        &probe.inputs,
        probe.layout,
        Phase::Infer,
        &mut rand::rngs::mock::StepRng::new(0, 0),
    )?;
    Ok(VarianceProfile {
        stds: trace
            .hidden_per_layer
            .iter()
            .map(|&h| population_std(g.value(h).data()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_reproduces_headline_arithmetic() {
        let r = quality_speed_ratio(26.0, 32.4).unwrap();
        assert!((r - 0.80).abs() < 0.005);
        assert!(quality_speed_ratio(5.0, 0.0).is_none());
        assert!(quality_speed_ratio(5.0, -3.0).is_none());
    }

    #[test]
    fn published_sign_mapping() {
        let rep = ExitSweepReport::from_measurements("v1", 24, &[(18, 1.18, 42.4), (24, 1.13, 32.0)])
            .unwrap();
        let row = rep.row(18).unwrap();
        assert!((row.ppl_delta_pct - 4.4248).abs() < 1e-3);
        assert!((row.published_ppl_decrease() - (-4.0)).abs() <= 0.5);
        assert!((row.speed_gain_pct - 32.5).abs() < 1e-9);
    }

    #[test]
    fn full_row_is_zero_and_required() {
        let rep = ExitSweepReport::from_measurements("x", 8, &[(8, 3.0, 10.0)]).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!((rep.rows[0].ppl_delta_pct, rep.rows[0].speed_gain_pct), (0.0, 0.0));
        assert_eq!(rep.rows[0].ratio, None);
        assert!(ExitSweepReport::from_measurements("x", 8, &[(6, 3.0, 10.0)]).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[4.0, 4.0, 4.0]), 4.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rep = ExitSweepReport::from_measurements(
            "v1",
            8,
            &[(2, 17.123456789, 91.5), (6, 9.87654321, 61.25), (8, 9.1, 50.0)],
        )
        .unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let back = ExitSweepReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rep);
        let triples: Vec<_> = back.rows.iter().map(|r| (r.exit_layer, r.ppl, r.tok_per_s)).collect();
        assert_eq!(ExitSweepReport::from_measurements("v1", 8, &triples).unwrap(), rep);
    }

    fn report(name: &str, ppl_full: f64, tok_full: f64, ppl_probe: f64) -> ExitSweepReport {
        ExitSweepReport::from_measurements(
            name,
            24,
            &[(18, ppl_probe, tok_full * 1.3), (24, ppl_full, tok_full)],
        )
        .unwrap()
    }

    #[test]
    fn ranking_and_viability() {
        let rows = compare_variants(&[report("slow", 2.0, 10.0, 3.0), report("fast", 1.0, 20.0, 1.04)])
            .unwrap();
        assert_eq!(rows[0].variant, "fast");
        assert_eq!((rows[0].quality_rank, rows[0].speed_rank), (1, 1));
        assert_eq!((rows[1].quality_rank, rows[1].speed_rank), (2, 2));
        assert_eq!(rows[0].viability, Viability::Excellent);
        assert_eq!(rows[1].viability, Viability::Poor);
        assert_eq!(viability(4.0), Viability::Excellent);
        assert_eq!(viability(48.3), Viability::Poor);
    }

    #[test]
    fn ppl_tie_uses_speed() {
        let rows = compare_variants(&[report("a", 1.5, 10.0, 1.6), report("b", 1.5, 30.0, 1.6)])
            .unwrap();
        assert_eq!(rows[0].variant, "b");
        assert_eq!(rows[0].quality_rank, 1);
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = report("a", 1.0, 10.0, 1.1);
        let b = ExitSweepReport::from_measurements("b", 24, &[(12, 2.0, 20.0), (24, 1.0, 10.0)]).unwrap();
        assert!(compare_variants(&[a.clone(), b]).is_err());
        assert!(compare_variants(&[a]).is_err());
    }
}
