//! Segmented causal attention with an additive compressive memory.
//!
//! A sequence is processed in fixed-length segments. Within a segment,
//! standard causal softmax attention runs as usual. Across segments, each
//! head carries a running associative matrix M [Dk, Dv] and normalizer
//! N [Dk] built from feature-mapped keys, σ(x) = ELU(x) + 1:
//!
//!   retrieve:  A_mem = σ(Q) M / (σ(Q) N + eps)
//!   update:    M += σ(K)ᵀ V,   N += Σ_s σ(K)_s
//!
//! Retrieval happens *before* the segment's own keys are folded in, so
//! memory only ever describes earlier segments. A per-head scalar gate
//! α = hard_sigmoid(raw) blends the two read-outs:
//!
//!   A = α · A_mem + (1 − α) · A_local
//!
//! With memory disabled the layer degrades to hard-segmented local
//! attention: no information crosses a segment boundary.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_model: usize,
    pub d_key: usize,
    pub d_value: usize,
    pub segment_length: usize,
    pub memory_enabled: bool,
    /// Stop gradients at the retrieve step so memory contributes values but
    /// no cross-segment gradient path.
    pub memory_detach: bool,
    pub causal: bool,
    /// Initial raw gate value; hard_sigmoid(0) = 0.5 starts heads neutral.
    pub balance_init: f64,
    pub epsilon_retrieve: f64,
}

impl AttentionConfig {
    pub fn new(heads: usize, d_model: usize, segment_length: usize) -> Self {
        let dh = if heads == 0 { 0 } else { d_model / heads };
        AttentionConfig {
            heads,
            d_model,
            d_key: dh,
            d_value: dh,
            segment_length,
            memory_enabled: true,
            memory_detach: false,
            causal: true,
            balance_init: 0.0,
            epsilon_retrieve: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.heads == 0 || self.d_model == 0 || self.d_key == 0 || self.d_value == 0 {
            return bad(format!(
                "attention dims must be positive: heads={} d_model={} d_key={} d_value={}",
                self.heads, self.d_model, self.d_key, self.d_value
            ));
        }
        if self.segment_length == 0 {
            return bad("segment_length must be at least 1".into());
        }
        if self.heads * self.d_value != self.d_model {
            return bad(format!(
                "heads x d_value ({} x {}) must equal d_model ({}) for a square output projection",
                self.heads, self.d_value, self.d_model
            ));
        }
        if !self.causal {
            return bad("only causal attention is implemented".into());
        }
        if !(self.epsilon_retrieve > 0.0) {
            return bad(format!(
                "epsilon_retrieve must be positive, got {}",
                self.epsilon_retrieve
            ));
        }
        if !self.balance_init.is_finite() {
            return bad(format!("balance_init must be finite, got {}", self.balance_init));
        }
        Ok(())
    }
}

/// Per-head compressive memory. Immutable value: updates return a new state.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState<S> {
    /// [H, Dk, Dv]
    pub m: Tensor<S>,
    /// [H, Dk]
    pub n: Tensor<S>,
}

impl<S: Scalar> MemoryState<S> {
    pub fn zeros(heads: usize, d_key: usize, d_value: usize) -> Self {
        MemoryState {
            m: Tensor::zeros(&[heads, d_key, d_value]),
            n: Tensor::zeros(&[heads, d_key]),
        }
    }
}

/// Projection weights and the raw balance gate for one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<S> {
    /// [d_model, H·Dk]
    pub w_q: Tensor<S>,
    /// [d_model, H·Dk]
    pub w_k: Tensor<S>,
    /// [d_model, H·Dv]
    pub w_v: Tensor<S>,
    /// [H·Dv, d_model]
    pub w_o: Tensor<S>,
    /// [H]
    pub gate_raw: Tensor<S>,
}

impl<S: Scalar> AttentionWeights<S> {
    pub fn random(cfg: &AttentionConfig, std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite");
        let mut draw = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| S::from_f64(normal.sample(rng)))
        };
        let (h, d, dk, dv) = (cfg.heads, cfg.d_model, cfg.d_key, cfg.d_value);
        AttentionWeights {
            w_q: draw(&[d, h * dk]),
            w_k: draw(&[d, h * dk]),
            w_v: draw(&[d, h * dv]),
            w_o: draw(&[h * dv, d]),
            gate_raw: Tensor::full(&[h], S::from_f64(cfg.balance_init)),
        }
    }

    /// Current per-head blend factors.
    pub fn alphas(&self) -> Vec<f64> {
        self.gate_raw.data().iter().map(|&r| hard_sigmoid(r.to_f64())).collect()
    }
}

/// clamp(x/6 + 1/2, 0, 1): saturates at x <= -3 and x >= 3.
pub fn hard_sigmoid(x: f64) -> f64 {
    (x / 6.0 + 0.5).clamp(0.0, 1.0)
}

/// (start, len) spans covering `total` tokens in order; the last span is
/// shorter when the length does not divide evenly.
pub fn segment_spans(total: usize, segment_length: usize) -> Vec<(usize, usize)> {
    assert!(segment_length > 0, "segment_length must be positive");
    let mut spans = Vec::with_capacity(total.div_ceil(segment_length));
    let mut start = 0;
    while start < total {
        let len = segment_length.min(total - start);
        spans.push((start, len));
        start += len;
    }
    spans
}

/// Tape handles for one layer's attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub gate_raw: Var,
}

impl AttentionVars {
    pub fn bind_params<S: Scalar>(tape: &mut Tape<S>, w: &AttentionWeights<S>) -> Self {
        AttentionVars {
            w_q: tape.param(w.w_q.clone()),
            w_k: tape.param(w.w_k.clone()),
            w_v: tape.param(w.w_v.clone()),
            w_o: tape.param(w.w_o.clone()),
            gate_raw: tape.param(w.gate_raw.clone()),
        }
    }

    pub fn bind_consts<S: Scalar>(tape: &mut Tape<S>, w: &AttentionWeights<S>) -> Self {
        AttentionVars {
            w_q: tape.leaf(w.w_q.clone()),
            w_k: tape.leaf(w.w_k.clone()),
            w_v: tape.leaf(w.w_v.clone()),
            w_o: tape.leaf(w.w_o.clone()),
            gate_raw: tape.leaf(w.gate_raw.clone()),
        }
    }
}

/// Full segmented pass over x [T, d_model] on an existing tape. Memory is
/// created fresh at zero here; no state survives the call. When `rope_base`
/// is set, rotary encoding (absolute positions, position 0 = first row of x)
/// is applied to the local q/k only; the memory path sees unrotated
/// projections, since the associative store has no notion of position.
pub fn forward_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    vars: &AttentionVars,
    cfg: &AttentionConfig,
    rope_base: Option<f64>,
) -> Result<Var> {
    cfg.validate()?;
    let xv = tape.value(x);
    if xv.rank() != 2 || xv.shape()[1] != cfg.d_model {
        return Err(Error::InvalidArgument {
            op: "attention",
            msg: format!("input must be [T, {}], got {:?}", cfg.d_model, xv.shape()),
        });
    }
    let total = xv.shape()[0];
    if total == 0 {
        return Err(Error::InvalidArgument {
            op: "attention",
            msg: "empty sequence".into(),
        });
    }
    let (h, dk, dv) = (cfg.heads, cfg.d_key, cfg.d_value);
    let scale = 1.0 / (dk as f64).sqrt();

    let mut m = tape.leaf(Tensor::zeros(&[h, dk, dv]));
    let mut n = tape.leaf(Tensor::zeros(&[h, dk]));
    let mut outs = Vec::new();

    for (start, _len) in segment_spans(total, cfg.segment_length) {
        let len = _len;
        let xs = tape.slice_rows(x, start, len)?;
        let q_flat = tape.matmul(xs, vars.w_q)?;
        let k_flat = tape.matmul(xs, vars.w_k)?;
        let v_flat = tape.matmul(xs, vars.w_v)?;
        let q = tape.split_heads(q_flat, h)?;
        let k = tape.split_heads(k_flat, h)?;
        let v = tape.split_heads(v_flat, h)?;

        let (q_loc, k_loc) = match rope_base {
            Some(base) => (tape.rope(q, base, start)?, tape.rope(k, base, start)?),
            None => (q, k),
        };
        let scores = tape.matmul_nt(q_loc, k_loc)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.causal_softmax(scaled)?;
        let a_local = tape.matmul(probs, v)?;

        let a = if cfg.memory_enabled {
            // Read from the state accumulated over *previous* segments.
            let (m_r, n_r) = if cfg.memory_detach {
                (tape.detach(m), tape.detach(n))
            } else {
                (m, n)
            };
            let sq = tape.elu_plus_one(q)?;
            let num = tape.matmul(sq, m_r)?;
            let n_col = tape.reshape(n_r, &[h, dk, 1])?;
            let den = tape.matmul(sq, n_col)?;
            let a_mem = tape.row_normalize(num, den, cfg.epsilon_retrieve)?;
            let blended = tape.gate_combine(a_mem, a_local, vars.gate_raw)?;

            // Only now fold this segment's keys and values in.
            let sk = tape.elu_plus_one(k)?;
            let m_delta = tape.matmul_tn(sk, v)?;
            m = tape.add(m, m_delta)?;
            let n_delta = tape.sum_axis1(sk)?;
            n = tape.add(n, n_delta)?;
            blended
        } else {
            a_local
        };

        let merged = tape.merge_heads(a)?;
        outs.push(tape.matmul(merged, vars.w_o)?);
    }
    tape.concat_rows(&outs)
}

/// One-shot convenience wrapper over [`forward_graph`].
pub fn infini_forward<S: Scalar>(
    x: &Tensor<S>,
    weights: &AttentionWeights<S>,
    cfg: &AttentionConfig,
    rope_base: Option<f64>,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = AttentionVars::bind_consts(&mut tape, weights);
    let out = forward_graph(&mut tape, xv, &vars, cfg, rope_base)?;
    Ok(tape.value(out).clone())
}

/// Causal softmax attention over already-projected heads:
/// q, k [H, S, Dk] and v [H, S, Dv], scores scaled by 1/sqrt(Dk).
pub fn local_causal_attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<Tensor<S>> {
    if q.rank() != 3 {
        return Err(Error::InvalidArgument {
            op: "local_causal_attention",
            msg: format!("q must be [H, S, Dk], got {:?}", q.shape()),
        });
    }
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let kv = tape.leaf(k.clone());
    let vv = tape.leaf(v.clone());
    let scores = tape.matmul_nt(qv, kv)?;
    let scaled = tape.scale(scores, 1.0 / (q.shape()[2] as f64).sqrt())?;
    let probs = tape.causal_softmax(scaled)?;
    let out = tape.matmul(probs, vv)?;
    Ok(tape.value(out).clone())
}

/// σ(q) M / (σ(q) N + eps) for q [H, S, Dk]. The feature map is applied
/// inside; pass raw query projections.
pub fn memory_retrieve<S: Scalar>(
    q: &Tensor<S>,
    mem: &MemoryState<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    let (h, dk) = match mem.n.shape() {
        [h, dk] => (*h, *dk),
        other => {
            return Err(Error::InvalidArgument {
                op: "memory_retrieve",
                msg: format!("normalizer must be [H, Dk], got {:?}", other),
            })
        }
    };
    let mut tape = Tape::new();
    let qv = tape.leaf(q.clone());
    let mv = tape.leaf(mem.m.clone());
    let nv = tape.leaf(mem.n.clone());
    let sq = tape.elu_plus_one(qv)?;
    let num = tape.matmul(sq, mv)?;
    let n_col = tape.reshape(nv, &[h, dk, 1])?;
    let den = tape.matmul(sq, n_col)?;
    let out = tape.row_normalize(num, den, eps)?;
    Ok(tape.value(out).clone())
}

/// M += σ(k)ᵀ v, N += Σ_s σ(k)_s for k [H, S, Dk], v [H, S, Dv].
/// Returns the updated state; the original is untouched.
pub fn memory_update<S: Scalar>(
    mem: &MemoryState<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
) -> Result<MemoryState<S>> {
    let mut tape = Tape::new();
    let kv = tape.leaf(k.clone());
    let vv = tape.leaf(v.clone());
    let mv = tape.leaf(mem.m.clone());
    let nv = tape.leaf(mem.n.clone());
    let sk = tape.elu_plus_one(kv)?;
    let m_delta = tape.matmul_tn(sk, vv)?;
    let m_new = tape.add(mv, m_delta)?;
    let n_delta = tape.sum_axis1(sk)?;
    let n_new = tape.add(nv, n_delta)?;
    Ok(MemoryState {
        m: tape.value(m_new).clone(),
        n: tape.value(n_new).clone(),
    })
}

/// Per-head blend of memory and local read-outs by raw gate values.
pub fn combine<S: Scalar>(
    a_mem: &Tensor<S>,
    a_local: &Tensor<S>,
    gate_raw: &[f64],
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let mv = tape.leaf(a_mem.clone());
    let lv = tape.leaf(a_local.clone());
    let raw = tape.leaf(Tensor::from_vec(
        &[gate_raw.len()],
        gate_raw.iter().map(|&r| S::from_f64(r)).collect(),
    )?);
    let out = tape.gate_combine(mv, lv, raw)?;
    Ok(tape.value(out).clone())
}
