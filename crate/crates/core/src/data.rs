//! Byte-level data: tokenizer, passkey retrieval samples, evaluation grids
//! and a synthetic pretraining corpus.
//!
//! Tokens are raw bytes, so vocab is always 256 and round-trips are exact.
//! Passkey samples embed a digit key in digit-free filler at a controlled
//! depth. Corpus documents state named facts and restate them later, so
//! next-byte prediction pays for carrying those facts across segment
//! boundaries. Everything is reproducible from a single u64 seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 256;
pub const DEFAULT_KEY_DIGITS: usize = 5;

/// Passkey query appended after the haystack; the answer digits follow it.
pub const QUERY_SUFFIX: &str = " What is the pass key? The pass key is ";

/// Evaluation depths shared by every grid: needle at the start, quarter
/// points, and flush against the query.
pub const GRID_DEPTHS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize_bytes(tokens: &[usize]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::TokenOutOfRange { id: t, vocab: VOCAB_SIZE })
        })
        .collect()
}

pub fn detokenize(tokens: &[usize]) -> Result<String> {
    let bytes = detokenize_bytes(tokens)?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument {
        op: "detokenize",
        msg: format!("tokens are not valid utf-8: {e}"),
    })
}

const FILLER_SENTENCES: [&str; 12] = [
    "The grass is green. ",
    "The sky is blue. ",
    "The sun is yellow. ",
    "Here we go. ",
    "There and back again. ",
    "The river runs quietly. ",
    "A light wind moves the trees. ",
    "Nothing else happens here. ",
    "The road is long and flat. ",
    "Clouds drift over the hills. ",
    "The night was calm. ",
    "Dust settles on the shelf. ",
];

/// Digit-free filler of exactly `len` bytes (ASCII, safe to cut anywhere).
fn filler(rng: &mut impl Rng, len: usize) -> String {
    let mut out = String::with_capacity(len + 32);
    while out.len() < len {
        out.push_str(FILLER_SENTENCES[rng.gen_range(0..FILLER_SENTENCES.len())]);
    }
    out.truncate(len);
    out
}

fn random_key(rng: &mut impl Rng, digits: usize) -> String {
    let d = Uniform::new(0u8, 10);
    (0..digits).map(|_| char::from(b'0' + d.sample(rng))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasskeySample {
    /// Haystack, query suffix, then the answer digits. Byte ids.
    pub tokens: Vec<u8>,
    pub context_length: usize,
    pub depth: f64,
    pub key: String,
    /// Index of the first answer token; the answer runs to the end.
    pub answer_start: usize,
}

impl PasskeySample {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&b| b as usize).collect()
    }

    /// Everything the model sees before it must produce the answer.
    pub fn prompt_ids(&self) -> Vec<usize> {
        self.tokens[..self.answer_start].iter().map(|&b| b as usize).collect()
    }

    pub fn answer_ids(&self) -> Vec<usize> {
        self.tokens[self.answer_start..].iter().map(|&b| b as usize).collect()
    }

    /// Next-token training triple: inputs tokens[..T-1], targets tokens[1..],
    /// and an include mask that keeps only answer positions in the loss.
    pub fn training_triple(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let ids = self.token_ids();
        let inputs = ids[..ids.len() - 1].to_vec();
        let targets = ids[1..].to_vec();
        let mask = (0..targets.len()).map(|t| t + 1 >= self.answer_start).collect();
        (inputs, targets, mask)
    }
}

fn needle_text(key: &str) -> String {
    format!("The pass key is {key}. Remember it.")
}

/// One sample: needle placed at floor(depth * (context_length - needle_len))
/// inside digit-free filler, then the query suffix and the answer digits.
pub fn make_passkey_sample(
    context_length: usize,
    depth: f64,
    key_digits: usize,
    seed: u64,
) -> Result<PasskeySample> {
    let arg = |msg: String| Error::InvalidArgument { op: "make_passkey_sample", msg };
    if !(0.0..=1.0).contains(&depth) {
        return Err(arg(format!("depth must be in [0, 1], got {depth}")));
    }
    if key_digits == 0 {
        return Err(arg("key_digits must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = random_key(&mut rng, key_digits);
    let needle = needle_text(&key);
    if context_length < needle.len() {
        return Err(arg(format!(
            "context of {context_length} bytes cannot hold a {}-byte needle",
            needle.len()
        )));
    }
    let start = (depth * (context_length - needle.len()) as f64).floor() as usize;
    let start = start.min(context_length - needle.len());

    let mut text = String::with_capacity(context_length + QUERY_SUFFIX.len() + key_digits);
    text.push_str(&filler(&mut rng, start));
    text.push_str(&needle);
    text.push_str(&filler(&mut rng, context_length - start - needle.len()));
    debug_assert_eq!(text.len(), context_length);
    text.push_str(QUERY_SUFFIX);
    let answer_start = text.len();
    text.push_str(&key);

    Ok(PasskeySample {
        tokens: text.into_bytes(),
        context_length,
        depth,
        key,
        answer_start,
    })
}

/// Cross product of lengths and depths, `samples_per_cell` each. Cells draw
/// from disjoint slices of the seed stream, so re-running a subset of the
/// grid reproduces the same samples.
pub fn make_eval_grid(
    context_lengths: &[usize],
    depths: &[f64],
    samples_per_cell: usize,
    key_digits: usize,
    seed: u64,
) -> Result<Vec<PasskeySample>> {
    let mut out = Vec::with_capacity(context_lengths.len() * depths.len() * samples_per_cell);
    for (ci, &ctx) in context_lengths.iter().enumerate() {
        for (di, &depth) in depths.iter().enumerate() {
            let cell = ci * depths.len() + di;
            for s in 0..samples_per_cell {
                let idx = (cell * samples_per_cell + s) as u64;
                let sample_seed = crate::seeds::mix(seed, crate::seeds::stream::EVAL, idx);
                out.push(make_passkey_sample(ctx, depth, key_digits, sample_seed)?);
            }
        }
    }
    Ok(out)
}

/// Grid lengths in segment multiples {1, 2, 4, 8, 16}; training only ever
/// sees up to 4 segments, so the upper half probes extrapolation.
pub fn grid_lengths(segment_length: usize) -> Vec<usize> {
    [1, 2, 4, 8, 16].iter().map(|m| m * segment_length).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub docs: usize,
    pub median_tokens: f64,
    pub mean_tokens: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl CorpusSpec {
    /// Defaults sized so most documents fit inside one 64-token segment.
    pub fn desk() -> Self {
        CorpusSpec {
            docs: 4096,
            median_tokens: 40.0,
            mean_tokens: 42.0,
            min_tokens: 8,
            max_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.docs == 0 || !(self.mean_tokens > self.median_tokens) || !(self.median_tokens > 0.0)
        {
            return Err(Error::InvalidArgument {
                op: "CorpusSpec",
                msg: format!(
                    "need docs > 0 and mean ({}) > median ({}) > 0 for a lognormal length model",
                    self.mean_tokens, self.median_tokens
                ),
            });
        }
        if self.min_tokens == 0 || self.max_tokens <= self.min_tokens {
            return Err(Error::InvalidArgument {
                op: "CorpusSpec",
                msg: format!("bad length clamp [{}, {}]", self.min_tokens, self.max_tokens),
            });
        }
        Ok(())
    }
}

/// Documents with lognormal length skew: mu = ln(median),
/// sigma^2 = 2 ln(mean / median). Text is filler prose, one doc per entry.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<String>> {
    spec.validate()?;
    let mut rng = crate::seeds::rng(seed, crate::seeds::stream::CORPUS, 0);
    let mu = spec.median_tokens.ln();
    let sigma = (2.0 * (spec.mean_tokens / spec.median_tokens).ln()).sqrt();
    let lengths = LogNormal::new(mu, sigma).map_err(|e| Error::InvalidArgument {
        op: "generate_corpus",
        msg: e.to_string(),
    })?;
    let mut docs = Vec::with_capacity(spec.docs);
    for _ in 0..spec.docs {
        let len = (lengths.sample(&mut rng).round() as usize).clamp(spec.min_tokens, spec.max_tokens);
        docs.push(filler(&mut rng, len));
    }
    Ok(docs)
}

/// Corpus flattened to one byte stream with newline separators; training
/// reads fixed windows by index with wrap-around, so any step's batch is a
/// pure function of the stream and the step number.
pub struct PackedCorpus {
    stream: Vec<u8>,
}

impl PackedCorpus {
    pub fn pack(docs: &[String]) -> Result<Self> {
        let mut stream = Vec::new();
        for d in docs {
            stream.extend_from_slice(d.as_bytes());
            stream.push(b'\n');
        }
        if stream.is_empty() {
            return Err(Error::InvalidArgument {
                op: "PackedCorpus",
                msg: "corpus is empty".into(),
            });
        }
        Ok(PackedCorpus { stream })
    }

    pub fn len(&self) -> usize {
        self.stream.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stream.is_empty()
    }

    /// Number of aligned `seq_len` blocks; the tail short of a full block is
    /// dropped.
    pub fn blocks(&self, seq_len: usize) -> usize {
        (self.stream.len().saturating_sub(1)) / seq_len
    }

    /// Block `index mod blocks` as a next-token pair of length `seq_len`.
    /// Blocks are fixed and aligned, so every revisit of an index sees the
    /// same bytes at the same positions.
    pub fn window(&self, index: u64, seq_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let blocks = self.blocks(seq_len);
        if blocks == 0 {
            return Err(Error::InvalidArgument {
                op: "PackedCorpus::window",
                msg: format!(
                    "stream of {} bytes cannot fill a window of {} + 1",
                    self.stream.len(),
                    seq_len
                ),
            });
        }
        let at = (index % blocks as u64) as usize * seq_len;
        let chunk = &self.stream[at..at + seq_len + 1];
        let ids: Vec<usize> = chunk.iter().map(|&b| b as usize).collect();
        Ok((ids[..seq_len].to_vec(), ids[1..].to_vec()))
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::InvalidArgument {
            op: "write_jsonl",
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::InvalidArgument {
            op: "read_jsonl",
            msg: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn tokenize_round_trips_arbitrary_bytes() {
        assert!(tokenize("").is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes: Vec<u8> = (0..1024).map(|_| rng.gen()).collect();
        let ids = tokenize_bytes(&bytes);
        assert!(ids.iter().all(|&t| t < VOCAB_SIZE));
        assert_eq!(detokenize_bytes(&ids).unwrap(), bytes);
        assert!(detokenize_bytes(&[256]).is_err());
    }

    #[test]
    fn sample_layout_matches_the_declared_fields() {
        let s = make_passkey_sample(256, 0.5, 5, 77).unwrap();
        assert_eq!(s.tokens.len(), 256 + QUERY_SUFFIX.len() + 5);
        assert_eq!(s.answer_start, 256 + QUERY_SUFFIX.len());
        assert_eq!(&s.tokens[s.answer_start..], s.key.as_bytes());
        assert_eq!(s.key.len(), 5);
        assert!(s.key.bytes().all(|b| b.is_ascii_digit()));
        assert_eq!(s.prompt_ids().len() + s.answer_ids().len(), s.token_ids().len());
    }

    #[test]
    fn depth_controls_needle_position_exactly() {
        for digits in [4usize, 5] {
            let key_probe = make_passkey_sample(300, 0.0, digits, 5).unwrap();
            let needle_len = needle_text(&key_probe.key).len();

            let s0 = make_passkey_sample(300, 0.0, digits, 5).unwrap();
            let needle = needle_text(&s0.key);
            assert!(s0.tokens.starts_with(needle.as_bytes()));

            let s1 = make_passkey_sample(300, 1.0, digits, 5).unwrap();
            let needle = needle_text(&s1.key);
            assert_eq!(&s1.tokens[300 - needle.len()..300], needle.as_bytes());

            let mid = make_passkey_sample(300, 0.4, digits, 5).unwrap();
            let needle = needle_text(&mid.key);
            let want = ((300 - needle_len) as f64 * 0.4).floor() as usize;
            assert_eq!(&mid.tokens[want..want + needle.len()], needle.as_bytes());
        }
    }

    #[test]
    fn too_short_context_is_an_error() {
        let err = make_passkey_sample(10, 0.5, 5, 1).unwrap_err();
        assert!(err.to_string().contains("cannot hold"), "{err}");
        assert!(make_passkey_sample(64, 0.5, 5, 1).is_ok());
        assert!(make_passkey_sample(64, 1.5, 5, 1).is_err());
        assert!(make_passkey_sample(64, 0.5, 0, 1).is_err());
    }

    #[test]
    fn key_digits_appear_exactly_once_in_the_haystack() {
        for seed in 0..20 {
            let s = make_passkey_sample(512, 0.37, 5, seed).unwrap();
            let hay = &s.tokens[..s.context_length];
            let key = s.key.as_bytes();
            let hits = hay.windows(key.len()).filter(|w| *w == key).count();
            assert_eq!(hits, 1, "seed {seed}");
            // Outside the needle the haystack carries no digits at all.
            let digit_count = hay.iter().filter(|b| b.is_ascii_digit()).count();
            assert_eq!(digit_count, key.len(), "seed {seed}");
        }
    }

    #[test]
    fn samples_are_seed_deterministic() {
        let a = make_passkey_sample(256, 0.25, 5, 9).unwrap();
        let b = make_passkey_sample(256, 0.25, 5, 9).unwrap();
        let c = make_passkey_sample(256, 0.25, 5, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tokens, c.tokens);
    }

    #[test]
    fn grid_covers_every_cell_and_cells_are_distinct() {
        let lens = [128usize, 256];
        let grid = make_eval_grid(&lens, &GRID_DEPTHS, 3, 5, 42).unwrap();
        assert_eq!(grid.len(), 2 * 5 * 3);
        for &ctx in &lens {
            for &d in &GRID_DEPTHS {
                let n = grid
                    .iter()
                    .filter(|s| s.context_length == ctx && s.depth == d)
                    .count();
                assert_eq!(n, 3);
            }
        }
        let again = make_eval_grid(&lens, &GRID_DEPTHS, 3, 5, 42).unwrap();
        assert_eq!(grid, again);

        let mut token_sets: Vec<&Vec<u8>> = grid.iter().map(|s| &s.tokens).collect();
        token_sets.sort();
        token_sets.dedup();
        assert_eq!(token_sets.len(), grid.len(), "duplicate samples across cells");

        assert!(make_eval_grid(&[], &GRID_DEPTHS, 3, 5, 1).unwrap().is_empty());
    }

    #[test]
    fn grid_lengths_are_segment_multiples() {
        assert_eq!(grid_lengths(64), vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn finetune_and_eval_streams_do_not_collide() {
        // 1k samples each from the two seed streams, same base seed: no
        // token sequence may repeat, or eval would score memorized text.
        let base = 1234u64;
        let mut all: Vec<Vec<u8>> = Vec::new();
        for i in 0..1000u64 {
            let s = make_passkey_sample(128, 0.5, 5, seeds::mix(base, seeds::stream::FINETUNE, i))
                .unwrap();
            all.push(s.tokens);
        }
        for i in 0..1000u64 {
            let s = make_passkey_sample(128, 0.5, 5, seeds::mix(base, seeds::stream::EVAL, i))
                .unwrap();
            all.push(s.tokens);
        }
        let total = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), total, "collision between fine-tune and eval data");
    }

    #[test]
    fn training_triple_masks_exactly_the_answer() {
        let s = make_passkey_sample(200, 0.75, 5, 3).unwrap();
        let (inputs, targets, mask) = s.training_triple();
        assert_eq!(inputs.len(), s.tokens.len() - 1);
        assert_eq!(targets.len(), mask.len());
        let kept: Vec<usize> = targets
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect();
        assert_eq!(kept, s.answer_ids());
    }

    #[test]
    fn corpus_lengths_match_the_spec_distribution() {
        let spec = CorpusSpec::desk();
        let docs = generate_corpus(&spec, 7).unwrap();
        assert_eq!(docs.len(), spec.docs);
        let mut lens: Vec<usize> = docs.iter().map(|d| d.len()).collect();
        lens.sort_unstable();
        let median = lens[lens.len() / 2] as f64;
        assert!(
            (median - spec.median_tokens).abs() / spec.median_tokens < 0.15,
            "median {median}"
        );
        let fit = lens.iter().filter(|&&l| l <= 64).count() as f64 / lens.len() as f64;
        assert!(fit >= 0.9, "only {fit:.3} of docs fit one segment");
        assert!(lens.iter().all(|&l| (spec.min_tokens..=spec.max_tokens).contains(&l)));
        assert_eq!(docs, generate_corpus(&spec, 7).unwrap());
        assert_ne!(docs, generate_corpus(&spec, 8).unwrap());
    }

    #[test]
    fn packed_corpus_windows_are_stable_and_wrap() {
        let docs = vec!["abcdef".to_string(), "ghij".to_string()];
        let packed = PackedCorpus::pack(&docs).unwrap();
        assert_eq!(packed.len(), 12); // 6 + 1 + 4 + 1
        assert_eq!(packed.blocks(4), 2); // trailing 3 bytes dropped
        let (x0, y0) = packed.window(0, 4).unwrap();
        assert_eq!(x0, tokenize("abcd"));
        assert_eq!(y0, tokenize("bcde"));
        let (x1, _) = packed.window(1, 4).unwrap();
        assert_eq!(x1, tokenize("ef\ng"));
        // Indices cycle over the fixed blocks.
        assert_eq!(packed.window(2, 4).unwrap(), packed.window(0, 4).unwrap());
        assert_eq!(packed.window(1_000_003, 4).unwrap(), packed.window(1, 4).unwrap());
        assert!(packed.window(0, 12).is_err());
    }

    #[test]
    fn jsonl_round_trips_samples_and_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("samples.jsonl");
        let samples: Vec<PasskeySample> = (0..5)
            .map(|i| make_passkey_sample(128, 0.25 * i as f64, 5, i as u64).unwrap())
            .collect();
        write_jsonl(&p, &samples).unwrap();
        let back: Vec<PasskeySample> = read_jsonl(&p).unwrap();
        assert_eq!(samples, back);

        let c = dir.path().join("corpus.jsonl");
        let docs = generate_corpus(&CorpusSpec { docs: 50, ..CorpusSpec::desk() }, 3).unwrap();
        write_jsonl(&c, &docs).unwrap();
        let back: Vec<String> = read_jsonl(&c).unwrap();
        assert_eq!(docs, back);
    }
}
