//! One decoding branch: embedding, two stacked GRU cells around the
//! attention module, and a maxout output layer.
//!
//! Per step, with previous token `y`:
//!
//! ```text
//! ĥ_t = GRU₁(h_{t−1}, E y)
//! α_t, c_t = attend(ĥ_t, F, β_t)
//! h_t = GRU₂(ĥ_t, c_t)
//! u   = W_y E y + W_h h_t + W_t c_t + b_u          ∈ R^d
//! z_t = W_o maxout₂(u) + b_o                        ∈ R^K
//! ```
//!
//! The initial state is `h_0 = tanh(W_init · mean_valid(a) + b_init)`.

use std::cmp::Ordering;

use rand::Rng;

use crate::attention::{attend, coverage_update, AttentionCache, AttentionConfig, AttentionParams, AttentionState};
use crate::data::vocab::{TokenId, EOS, PAD, SOS};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Order in which a branch emits the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    L2R,
    R2L,
}

impl Direction {
    /// Token fed at the first step.
    pub fn start_token(self) -> TokenId {
        match self {
            Direction::L2R => SOS,
            Direction::R2L => EOS,
        }
    }

    /// Token predicted after the last symbol.
    pub fn end_token(self) -> TokenId {
        match self {
            Direction::L2R => EOS,
            Direction::R2L => SOS,
        }
    }

    /// Target symbols in emission order.
    pub fn order(self, target: &[TokenId]) -> Vec<TokenId> {
        match self {
            Direction::L2R => target.to_vec(),
            Direction::R2L => target.iter().rev().copied().collect(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    /// GRU state size n (also the embedding size).
    pub hidden: usize,
    /// Attention / pre-maxout size d; must be even.
    pub attn_dim: usize,
    /// Number of classes K including the reserved markers.
    pub vocab_size: usize,
    pub attention: AttentionConfig,
}

impl DecoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        DecoderConfig {
            hidden: 64,
            attn_dim: 128,
            vocab_size,
            attention: AttentionConfig::default(),
        }
    }

    pub fn full_scale(vocab_size: usize) -> Self {
        DecoderConfig {
            hidden: 256,
            attn_dim: 512,
            vocab_size,
            attention: AttentionConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attn_dim == 0 || self.attn_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "hidden ({}) must be positive and attn_dim ({}) positive and even",
                self.hidden, self.attn_dim
            )));
        }
        if self.vocab_size <= 3 {
            return Err(Error::Config("vocabulary has no symbols besides the markers".into()));
        }
        self.attention.validate()
    }
}

/// Weights of one GRU cell (`W·` act on the input, `U·` on the state).
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_c: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_c: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_c: ParamId,
}

impl GruParams {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = |name: &str, cols: usize, rng: &mut R| store.add(format!("{prefix}.{name}"), init.sample(&[hidden, cols], rng), true);
        let w_z = w("w_z", input, rng)?;
        let w_r = w("w_r", input, rng)?;
        let w_c = w("w_c", input, rng)?;
        let u_z = w("u_z", hidden, rng)?;
        let u_r = w("u_r", hidden, rng)?;
        let u_c = w("u_c", hidden, rng)?;
        let mut b = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::zeros(&[hidden]), true);
        Ok(GruParams {
            w_z,
            w_r,
            w_c,
            u_z,
            u_r,
            u_c,
            b_z: b("b_z")?,
            b_r: b("b_r")?,
            b_c: b("b_c")?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_z, self.w_r, self.w_c, self.u_z, self.u_r, self.u_c, self.b_z, self.b_r, self.b_c,
        ]
    }
}

/// Standard GRU recurrence on column vectors:
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// h̃ = tanh(W_c x + U_c (r ⊙ h) + b_c)
/// h' = (1 − z) ⊙ h + z ⊙ h̃
/// ```
pub fn gru_step<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cell: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let gate = |tape: &mut Tape<T>, w: ParamId, u: ParamId, b: ParamId, h: Var| -> Result<Var> {
        let w = tape.param(store, w);
        let u = tape.param(store, u);
        let b = tape.param(store, b);
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add_rows(s, b)
    };
    let z = gate(tape, cell.w_z, cell.u_z, cell.b_z, h_prev)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, cell.w_r, cell.u_r, cell.b_r, h_prev)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, cell.w_c, cell.u_c, cell.b_c, rh)?;
    let cand = tape.tanh(cand)?;
    let keep = tape.scale_shift(z, -T::one(), T::one())?;
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(z, cand)?;
    tape.add(old, new)
}

/// All parameters of one branch.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub embedding: ParamId,
    pub gru1: GruParams,
    pub gru2: GruParams,
    pub w_init: ParamId,
    pub b_init: ParamId,
    pub w_y: ParamId,
    pub w_h: ParamId,
    pub w_t: ParamId,
    pub b_u: ParamId,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub attention: AttentionParams,
}

/// A decoding branch: parameters plus the direction it reads the target in.
#[derive(Clone, Debug)]
pub struct Branch {
    pub name: String,
    pub direction: Direction,
    pub config: DecoderConfig,
    pub params: BranchParams,
}

impl Branch {
    /// Registers parameters under `name.` with the given initializer.
    pub fn new<T: Scalar, R: Rng>(
        name: &str,
        direction: Direction,
        config: DecoderConfig,
        feat_channels: usize,
        store: &mut ParamStore<T>,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (n, d, k) = (config.hidden, config.attn_dim, config.vocab_size);
        let mut mat = |p: &str, shape: &[usize], rng: &mut R| store.add(format!("{name}.{p}"), init.sample(shape, rng), true);
        let embedding = mat("embedding", &[k, n], rng)?;
        let w_init = mat("w_init", &[n, feat_channels], rng)?;
        let w_y = mat("w_y", &[d, n], rng)?;
        let w_h = mat("w_h", &[d, n], rng)?;
        let w_t = mat("w_t", &[d, feat_channels], rng)?;
        let w_o = mat("w_o", &[k, d / 2], rng)?;
        let b_init = store.add(format!("{name}.b_init"), Tensor::zeros(&[n]), true)?;
        let b_u = store.add(format!("{name}.b_u"), Tensor::zeros(&[d]), true)?;
        let b_o = store.add(format!("{name}.b_o"), Tensor::zeros(&[k]), true)?;
        let gru1 = GruParams::new(store, &format!("{name}.gru1"), n, n, init, rng)?;
        let gru2 = GruParams::new(store, &format!("{name}.gru2"), feat_channels, n, init, rng)?;
        let attention = AttentionParams::new(
            config.attention.clone(),
            store,
            &format!("{name}.attention"),
            n,
            d,
            feat_channels,
            init,
            rng,
        )?;
        Ok(Branch {
            name: name.to_string(),
            direction,
            config,
            params: BranchParams {
                embedding,
                gru1,
                gru2,
                w_init,
                b_init,
                w_y,
                w_h,
                w_t,
                b_u,
                w_o,
                b_o,
                attention,
            },
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let p = &self.params;
        let mut ids = vec![p.embedding, p.w_init, p.b_init, p.w_y, p.w_h, p.w_t, p.b_u, p.w_o, p.b_o];
        ids.extend(p.gru1.param_ids());
        ids.extend(p.gru2.param_ids());
        ids.extend(p.attention.param_ids());
        ids
    }
}

/// Recurrent state carried between steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub attention: AttentionState,
}

/// Everything one step produces.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[K×1]`
    pub logits: Var,
    /// Maxout output `[d/2×1]`, the input of the classifier.
    pub features: Var,
    /// `[H×W]`
    pub alpha: Var,
    pub h_hat: Var,
    pub state: DecoderState,
}

/// Per-image context of a branch: attention cache and initial state.
pub struct BranchContext<'f, T: Scalar> {
    pub fmap: &'f FeatureMap<T>,
    pub cache: AttentionCache,
    pub initial: DecoderState,
}

impl Branch {
    /// Computes the attention cache and `h_0` for one feature map.
    pub fn prepare<'f, T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fmap: &'f FeatureMap<T>,
    ) -> Result<BranchContext<'f, T>> {
        let cache = AttentionCache::new(tape, store, &self.params.attention, fmap)?;
        let valid = fmap.valid_cells();
        if valid == 0 {
            return Err(Error::DegenerateMask);
        }
        let inv = T::one() / T::of(valid as f64);
        let weights: Vec<T> = fmap.mask.data().iter().map(|&m| if m != T::zero() { inv } else { T::zero() }).collect();
        let weights = tape.constant(Tensor::new(&[fmap.cells(), 1], weights)?);
        let mean = tape.matmul(cache.content, weights)?;
        let w = tape.param(store, self.params.w_init);
        let b = tape.param(store, self.params.b_init);
        let h0 = tape.matmul(w, mean)?;
        let h0 = tape.add_rows(h0, b)?;
        let h0 = tape.tanh(h0)?;
        let attention = AttentionState::new(tape, fmap.height, fmap.width);
        Ok(BranchContext {
            fmap,
            cache,
            initial: DecoderState { h: h0, attention },
        })
    }

    /// One decoding step fed with `y_prev`.
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        ctx: &BranchContext<'_, T>,
        state: &DecoderState,
        y_prev: TokenId,
    ) -> Result<StepOutput> {
        if y_prev as usize >= self.config.vocab_size {
            return Err(Error::Vocabulary(format!(
                "token id {y_prev} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let p = &self.params;
        let table = tape.param(store, p.embedding);
        let emb = tape.embed(table, y_prev as usize)?;
        let h_hat = gru_step(tape, store, &p.gru1, emb, state.h)?;
        let (alpha, c) = attend(tape, store, &p.attention, h_hat, ctx.fmap, &ctx.cache, &state.attention)?;
        let attention = coverage_update(tape, &state.attention, alpha)?;
        let h = gru_step(tape, store, &p.gru2, c, h_hat)?;

        let w_y = tape.param(store, p.w_y);
        let w_h = tape.param(store, p.w_h);
        let w_t = tape.param(store, p.w_t);
        let b_u = tape.param(store, p.b_u);
        let u = tape.matmul(w_y, emb)?;
        let hu = tape.matmul(w_h, h)?;
        let u = tape.add(u, hu)?;
        let cu = tape.matmul(w_t, c)?;
        let u = tape.add(u, cu)?;
        let u = tape.add_rows(u, b_u)?;
        let features = tape.maxout_pairs(u)?;
        let w_o = tape.param(store, p.w_o);
        let b_o = tape.param(store, p.b_o);
        let logits = tape.matmul(w_o, features)?;
        let logits = tape.add_rows(logits, b_o)?;
        Ok(StepOutput {
            logits,
            features,
            alpha,
            h_hat,
            state: DecoderState { h, attention },
        })
    }
}

/// Teacher-forced outputs of one branch.
#[derive(Clone, Debug)]
pub struct BranchOutput {
    /// `T+1` logit vectors `[K×1]`; the last predicts the end marker.
    pub logits: Vec<Var>,
    pub features: Vec<Var>,
    pub alphas: Vec<Var>,
    pub direction: Direction,
    /// Coverage state after the last step.
    pub attention: AttentionState,
}

impl Branch {
    /// Feeds the gold sequence: L2R reads `⟨sos⟩ Y₁..Y_T`, R2L reads
    /// `⟨eos⟩ Y_T..Y₁`.
    pub fn decode_teacher_forced<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fmap: &FeatureMap<T>,
        target: &[TokenId],
    ) -> Result<BranchOutput> {
        if target.is_empty() {
            return Err(Error::Input("teacher forcing needs a nonempty target".into()));
        }
        let ctx = self.prepare(tape, store, fmap)?;
        let mut inputs = vec![self.direction.start_token()];
        inputs.extend(self.direction.order(target));
        let mut state = ctx.initial.clone();
        let mut out = BranchOutput {
            logits: Vec::with_capacity(inputs.len()),
            features: Vec::with_capacity(inputs.len()),
            alphas: Vec::with_capacity(inputs.len()),
            direction: self.direction,
            attention: state.attention.clone(),
        };
        for &y in &inputs {
            let step = self.step(tape, store, &ctx, &state, y)?;
            out.logits.push(step.logits);
            out.features.push(step.features);
            out.alphas.push(step.alpha);
            state = step.state;
        }
        out.attention = state.attention;
        Ok(out)
    }
}

/// Result of free-running decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Symbols in reading (left-to-right) order, markers excluded.
    pub tokens: Vec<TokenId>,
    /// Tokens in emission order including the end marker when reached.
    pub emitted: Vec<TokenId>,
    /// True when `max_len` symbols were produced without an end marker.
    pub truncated: bool,
    /// Sum of log-probabilities of the emitted tokens.
    pub log_prob: f64,
    /// Attention maps, one per emitted token, as `[H×W]` row-major values.
    pub alphas: Vec<Vec<f64>>,
}

impl Decoded {
    /// Length-normalized log-probability used to rank beam hypotheses.
    pub fn score(&self) -> f64 {
        if self.emitted.is_empty() {
            0.0
        } else {
            self.log_prob / self.emitted.len() as f64
        }
    }
}

fn allowed(direction: Direction, token: TokenId) -> bool {
    token != PAD && token != direction.start_token()
}

/// Log-probabilities of the next token; disallowed tokens get −∞.
fn next_log_probs<T: Scalar>(tape: &mut Tape<T>, logits: Var, direction: Direction) -> Result<Vec<f64>> {
    let lp = tape.log_softmax(logits, 0)?;
    Ok(tape
        .value(lp)
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(direction, i as TokenId) { v.as_f64() } else { f64::NEG_INFINITY })
        .collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Branch {
    /// Greedy decoding: feeds back its own argmax until the end marker or
    /// `max_len` symbols.
    pub fn decode_greedy<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fmap: &FeatureMap<T>,
        max_len: usize,
    ) -> Result<Decoded> {
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let ctx = self.prepare(tape, store, fmap)?;
        let mut state = ctx.initial.clone();
        let mut prev = self.direction.start_token();
        let mut emitted = Vec::new();
        let mut alphas = Vec::new();
        let mut log_prob = 0.0;
        let mut truncated = true;
        for _ in 0..max_len {
            let step = self.step(tape, store, &ctx, &state, prev)?;
            let lps = next_log_probs(tape, step.logits, self.direction)?;
            let tok = argmax(&lps) as TokenId;
            log_prob += lps[tok as usize];
            emitted.push(tok);
            alphas.push(tape.value(step.alpha).to_f64_vec());
            if tok == self.direction.end_token() {
                truncated = false;
                break;
            }
            state = step.state;
            prev = tok;
        }
        Ok(self.finish(emitted, truncated, log_prob, alphas))
    }

    fn finish(&self, emitted: Vec<TokenId>, truncated: bool, log_prob: f64, alphas: Vec<Vec<f64>>) -> Decoded {
        let end = self.direction.end_token();
        let symbols: Vec<TokenId> = emitted.iter().copied().filter(|&t| t != end).collect();
        Decoded {
            tokens: self.direction.order(&symbols),
            emitted,
            truncated,
            log_prob,
            alphas,
        }
    }

    /// Beam search ranked by length-normalized log-probability. Hypotheses
    /// that emit the end marker leave the beam; after `max_len` steps the
    /// surviving hypotheses compete as truncated outputs. Width 1 reproduces
    /// [`Branch::decode_greedy`].
    pub fn decode_beam<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fmap: &FeatureMap<T>,
        width: usize,
        max_len: usize,
    ) -> Result<Decoded> {
        if width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        struct Hyp {
            emitted: Vec<TokenId>,
            log_prob: f64,
            state: DecoderState,
            alphas: Vec<Vec<f64>>,
        }
        let ctx = self.prepare(tape, store, fmap)?;
        let end = self.direction.end_token();
        let mut live = vec![Hyp {
            emitted: Vec::new(),
            log_prob: 0.0,
            state: ctx.initial.clone(),
            alphas: Vec::new(),
        }];
        let mut done: Vec<Decoded> = Vec::new();
        for _ in 0..max_len {
            let mut steps = Vec::with_capacity(live.len());
            let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
            for (hi, hyp) in live.iter().enumerate() {
                let prev = hyp.emitted.last().copied().unwrap_or(self.direction.start_token());
                let step = self.step(tape, store, &ctx, &hyp.state, prev)?;
                let lps = next_log_probs(tape, step.logits, self.direction)?;
                for (tok, &lp) in lps.iter().enumerate() {
                    if lp.is_finite() {
                        cands.push((hyp.log_prob + lp, hi, tok as TokenId));
                    }
                }
                steps.push(step);
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for &(lp, hi, tok) in cands.iter().take(width) {
                let parent = &live[hi];
                let mut emitted = parent.emitted.clone();
                emitted.push(tok);
                let mut alphas = parent.alphas.clone();
                alphas.push(tape.value(steps[hi].alpha).to_f64_vec());
                if tok == end {
                    done.push(self.finish(emitted, false, lp, alphas));
                } else {
                    next.push(Hyp {
                        emitted,
                        log_prob: lp,
                        state: steps[hi].state.clone(),
                        alphas,
                    });
                }
            }
            live = next;
            if live.is_empty() {
                break;
            }
        }
        for hyp in live {
            done.push(self.finish(hyp.emitted, true, hyp.log_prob, hyp.alphas));
        }
        let mut best = 0;
        for (i, d) in done.iter().enumerate() {
            if d.score() > done[best].score() {
                best = i;
            }
        }
        Ok(done.swap_remove(best))
    }
}
