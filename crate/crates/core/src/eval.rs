//! Passkey evaluation: greedy decoding, exact-match scoring, and accuracy
//! grids over (context length, depth) cells.

use crate::data::PasskeySample;
use crate::error::{Error, Result};
use crate::model::{self, DecoderWeights, ModelConfig};
use crate::tensor::Scalar;

/// Index of the largest logit; ties resolve to the lowest token id.
fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate().skip(1) {
        if v.to_f64() > row[best].to_f64() {
            best = i;
        }
    }
    best
}

/// Greedy continuation: repeatedly run the full forward pass and append the
/// argmax token. `max_new = 0` yields an empty continuation.
pub fn greedy_decode<S: Scalar>(
    weights: &DecoderWeights<S>,
    cfg: &ModelConfig,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument {
            op: "greedy_decode",
            msg: "prompt must be non-empty".into(),
        });
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let logits = model::forward(&tokens, weights, cfg)?;
        let v = cfg.vocab_size;
        let last = &logits.data()[(tokens.len() - 1) * v..];
        let next = argmax(&last[..v]);
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

/// Exact-match scoring with one teacher-forced forward pass. Greedy decoding
/// and teacher forcing agree on the all-or-nothing verdict: while every
/// prediction matches the answer the two trajectories are identical, and the
/// first mismatch settles the sample as wrong either way.
pub fn score_sample<S: Scalar>(
    weights: &DecoderWeights<S>,
    cfg: &ModelConfig,
    sample: &PasskeySample,
) -> Result<bool> {
    let ids = sample.token_ids();
    if sample.answer_start == 0 || sample.answer_start >= ids.len() {
        return Err(Error::InvalidArgument {
            op: "score_sample",
            msg: format!("answer_start {} out of range for {} tokens", sample.answer_start, ids.len()),
        });
    }
    let logits = model::forward(&ids[..ids.len() - 1], weights, cfg)?;
    let v = cfg.vocab_size;
    for p in sample.answer_start..ids.len() {
        let row = &logits.data()[(p - 1) * v..p * v];
        if argmax(row) != ids[p] {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub context_length: usize,
    pub depth: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// Aggregate per-sample verdicts into (context_length, depth) cells, sorted
/// by length then depth.
pub fn run_grid_with<F>(mut scorer: F, samples: &[PasskeySample]) -> Result<Vec<GridCell>>
where
    F: FnMut(&PasskeySample) -> Result<bool>,
{
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(usize, u64), (f64, usize, usize)> = BTreeMap::new();
    for s in samples {
        let correct = scorer(s)?;
        let e = cells.entry((s.context_length, s.depth.to_bits())).or_insert((s.depth, 0, 0));
        e.1 += correct as usize;
        e.2 += 1;
    }
    Ok(cells
        .into_iter()
        .map(|((ctx, _), (depth, correct, n))| GridCell {
            context_length: ctx,
            depth,
            accuracy: correct as f64 / n as f64,
            n,
        })
        .collect())
}

pub fn run_grid<S: Scalar>(
    weights: &DecoderWeights<S>,
    cfg: &ModelConfig,
    samples: &[PasskeySample],
) -> Result<Vec<GridCell>> {
    run_grid_with(|s| score_sample(weights, cfg, s), samples)
}

pub const GRID_HEADER: &str = "context_length,depth,accuracy,n";

pub fn grid_to_csv(cells: &[GridCell]) -> String {
    let mut out = String::from(GRID_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!("{},{},{},{}\n", c.context_length, c.depth, c.accuracy, c.n));
    }
    out
}

pub fn parse_grid_csv(text: &str) -> Result<Vec<GridCell>> {
    let bad = |line: usize, msg: String| Error::InvalidArgument {
        op: "parse_grid_csv",
        msg: format!("line {line}: {msg}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != GRID_HEADER {
                return Err(bad(1, format!("expected header {GRID_HEADER:?}, got {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 columns, got {}", cols.len())));
        }
        out.push(GridCell {
            context_length: cols[0].parse().map_err(|e| bad(i + 1, format!("{e}")))?,
            depth: cols[1].parse().map_err(|e| bad(i + 1, format!("{e}")))?,
            accuracy: cols[2].parse().map_err(|e| bad(i + 1, format!("{e}")))?,
            n: cols[3].parse().map_err(|e| bad(i + 1, format!("{e}")))?,
        });
    }
    Ok(out)
}

/// Mean accuracy over cells selected by the predicate; None if none match.
pub fn mean_accuracy_where<F>(cells: &[GridCell], pred: F) -> Option<f64>
where
    F: Fn(&GridCell) -> bool,
{
    let picked: Vec<f64> = cells.iter().filter(|c| pred(c)).map(|c| c.accuracy).collect();
    if picked.is_empty() {
        None
    } else {
        Some(picked.iter().sum::<f64>() / picked.len() as f64)
    }
}
