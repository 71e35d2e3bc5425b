//! Multi-scale coverage attention.
//!
//! The coverage map `β_t` (running sum of past attention maps) is convolved by
//! a small and a large kernel; both responses are projected to the attention
//! dimension and combined with the projected query `ĥ_t` and the projected
//! features:
//!
//! ```text
//! e_t = v_aᵀ tanh(W_ĥ ĥ_t + U_f F + b + W_s (U_s * β_t) + W_l (U_l * β_t))
//! α_t = masked_softmax(e_t)            over the M cells
//! c_t = Σ_i α_{t,i} a_i
//! ```

use rand::Rng;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Output channels of each coverage convolution.
    pub coverage_channels: usize,
    pub small_kernel: usize,
    /// `None` disables the large-kernel branch (classic single-scale coverage).
    pub large_kernel: Option<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            coverage_channels: 64,
            small_kernel: 5,
            large_kernel: Some(11),
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        let check_odd = |k: usize| {
            if k % 2 == 0 {
                Err(Error::Config(format!("coverage kernel {k} must be odd")))
            } else {
                Ok(())
            }
        };
        check_odd(self.small_kernel)?;
        if let Some(kl) = self.large_kernel {
            check_odd(kl)?;
            if self.small_kernel >= kl {
                return Err(Error::Config(format!(
                    "small kernel {} must be smaller than large kernel {kl}",
                    self.small_kernel
                )));
            }
        }
        if self.coverage_channels == 0 {
            return Err(Error::Config("coverage_channels must be positive".into()));
        }
        Ok(())
    }
}

/// Scalars in the two coverage convolutions `U_s` and `U_l` (no bias).
pub fn kernel_combo_params(small: usize, large: usize, coverage_channels: usize) -> Result<usize> {
    for k in [small, large] {
        if k % 2 == 0 {
            return Err(Error::Config(format!("coverage kernel {k} must be odd")));
        }
    }
    Ok(coverage_channels * (small * small + large * large))
}

/// Parameters of one branch's attention module.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub config: AttentionConfig,
    /// `[C×1×k_s×k_s]`
    pub u_s: ParamId,
    /// `[C×1×k_l×k_l]`
    pub u_l: Option<ParamId>,
    /// `[d×D]`, the 1×1 convolution over the feature map
    pub u_f: ParamId,
    /// `[d]`
    pub bias: ParamId,
    /// `[d×n]`
    pub w_h: ParamId,
    /// `[d×C]`
    pub w_s: ParamId,
    /// `[d×C]`
    pub w_l: Option<ParamId>,
    /// `[1×d]`
    pub v_a: ParamId,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        config: AttentionConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        hidden: usize,
        attn_dim: usize,
        feat_channels: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.coverage_channels;
        let ks = config.small_kernel;
        let u_s = store.add(format!("{prefix}.u_s"), init.sample(&[c, 1, ks, ks], rng), true)?;
        let u_l = match config.large_kernel {
            Some(kl) => Some(store.add(format!("{prefix}.u_l"), init.sample(&[c, 1, kl, kl], rng), true)?),
            None => None,
        };
        let u_f = store.add(format!("{prefix}.u_f"), init.sample(&[attn_dim, feat_channels], rng), true)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[attn_dim]), true)?;
        let w_h = store.add(format!("{prefix}.w_h"), init.sample(&[attn_dim, hidden], rng), true)?;
        let w_s = store.add(format!("{prefix}.w_s"), init.sample(&[attn_dim, c], rng), true)?;
        let w_l = match config.large_kernel {
            Some(_) => Some(store.add(format!("{prefix}.w_l"), init.sample(&[attn_dim, c], rng), true)?),
            None => None,
        };
        let v_a = store.add(format!("{prefix}.v_a"), init.sample(&[1, attn_dim], rng), true)?;
        Ok(AttentionParams {
            config,
            u_s,
            u_l,
            u_f,
            bias,
            w_h,
            w_s,
            w_l,
            v_a,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.u_s];
        ids.extend(self.u_l);
        ids.extend([self.u_f, self.bias, self.w_h, self.w_s]);
        ids.extend(self.w_l);
        ids.push(self.v_a);
        ids
    }
}

/// Coverage accumulator and attention history of one decoding branch.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// `β_t`, `[H×W]`
    pub beta: Var,
    /// `α_1..α_{t−1}`, each `[H×W]`
    pub history: Vec<Var>,
    height: usize,
    width: usize,
}

impl AttentionState {
    /// Zero coverage over the feature grid.
    pub fn new<T: Scalar>(tape: &mut Tape<T>, height: usize, width: usize) -> Self {
        AttentionState {
            beta: tape.constant(Tensor::zeros(&[height, width])),
            history: Vec::new(),
            height,
            width,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Adds `alpha[H×W]` to the coverage map and appends it to the history.
pub fn coverage_update<T: Scalar>(tape: &mut Tape<T>, state: &AttentionState, alpha: Var) -> Result<AttentionState> {
    let shape = tape.shape(alpha);
    if shape != [state.height, state.width] {
        return Err(Error::dim("coverage_update", &[state.height, state.width], shape));
    }
    let beta = tape.add(state.beta, alpha)?;
    let mut history = state.history.clone();
    history.push(alpha);
    Ok(AttentionState {
        beta,
        history,
        height: state.height,
        width: state.width,
    })
}

/// Per-image quantities shared by every decoding step of one branch.
#[derive(Clone, Copy, Debug)]
pub struct AttentionCache {
    /// `[D×M]` content vectors
    pub content: Var,
    /// `U_f F + b`, `[d×M]`
    pub projected: Var,
}

impl AttentionCache {
    pub fn new<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        params: &AttentionParams,
        fmap: &FeatureMap<T>,
    ) -> Result<Self> {
        let content = fmap.flat(tape)?;
        let u_f = tape.param(store, params.u_f);
        let bias = tape.param(store, params.bias);
        let projected = tape.matmul(u_f, content)?;
        let projected = tape.add_rows(projected, bias)?;
        Ok(AttentionCache { content, projected })
    }
}

/// Weighted sum of content columns: `content[D×M] · alpha` → `[D×1]`.
pub fn context<T: Scalar>(tape: &mut Tape<T>, content: Var, alpha: Var) -> Result<Var> {
    let m = tape.value(alpha).numel();
    let col = tape.reshape(alpha, &[m, 1])?;
    tape.matmul(content, col)
}

/// One attention step: returns `(α_t [H×W], c_t [D×1])`. The coverage state
/// is not advanced; call [`coverage_update`] with the returned map.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &AttentionParams,
    h_hat: Var,
    fmap: &FeatureMap<T>,
    cache: &AttentionCache,
    state: &AttentionState,
) -> Result<(Var, Var)> {
    let (h, w) = (fmap.height, fmap.width);
    if state.grid() != (h, w) {
        return Err(Error::dim("attend", &[state.height, state.width], &[h, w]));
    }
    let m = h * w;
    let c = params.config.coverage_channels;
    let beta = tape.reshape(state.beta, &[1, h, w])?;

    let ks = params.config.small_kernel;
    let u_s = tape.param(store, params.u_s);
    let a_s = tape.conv2d(beta, u_s, 1, ks / 2)?;
    let a_s = tape.reshape(a_s, &[c, m])?;
    let w_s = tape.param(store, params.w_s);
    let s_term = tape.matmul(w_s, a_s)?;
    let mut energy = tape.add(cache.projected, s_term)?;

    if let (Some(u_l), Some(w_l), Some(kl)) = (params.u_l, params.w_l, params.config.large_kernel) {
        let u_l = tape.param(store, u_l);
        let a_l = tape.conv2d(beta, u_l, 1, kl / 2)?;
        let a_l = tape.reshape(a_l, &[c, m])?;
        let w_l = tape.param(store, w_l);
        let l_term = tape.matmul(w_l, a_l)?;
        energy = tape.add(energy, l_term)?;
    }

    let w_h = tape.param(store, params.w_h);
    let query = tape.matmul(w_h, h_hat)?;
    let energy = tape.add_rows(energy, query)?;
    let energy = tape.tanh(energy)?;
    let v_a = tape.param(store, params.v_a);
    let scores = tape.matmul(v_a, energy)?;
    let mask = fmap.mask.clone().reshape(&[m])?;
    let alpha = tape.softmax_masked(scores, Some(&mask), 1)?;
    let ctx = context(tape, cache.content, alpha)?;
    let alpha = tape.reshape(alpha, &[h, w])?;
    Ok((alpha, ctx))
}
