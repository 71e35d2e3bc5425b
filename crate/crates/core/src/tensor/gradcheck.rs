//! Central finite-difference verification of tape gradients.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Per-tensor outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Coordinate (row-major index) where the worst error occurred.
    pub worst_coord: usize,
    /// Coordinates that needed the extrapolated estimate.
    pub refined: usize,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self, threshold: f64) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !(e.max_rel_error < threshold)).collect()
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.failures(threshold).is_empty()
    }
}

/// Sampling policy for large tensors.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Tensors with at most this many elements are checked exhaustively.
    pub full_check_limit: usize,
    /// Coordinates sampled from larger tensors.
    pub sampled_coords: usize,
    pub seed: u64,
    /// Pass threshold used to steer refinement. Coordinates whose plain
    /// central difference comes within a factor of ten of it are re-estimated
    /// with Ridders' extrapolation. `None` disables refinement.
    pub refine_above: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            full_check_limit: 256,
            sampled_coords: 64,
            seed: 0x5eed,
            refine_above: None,
        }
    }
}

/// Fraction of the pass threshold above which a coordinate is refined.
const REFINE_MARGIN: f64 = 0.1;
const RIDDERS_START: f64 = 1e-2;
const RIDDERS_SHRINK: f64 = 2.0;
const RIDDERS_TABLE: usize = 12;

/// Ridders' method: central differences at geometrically shrinking steps,
/// combined by polynomial extrapolation toward a zero step. The estimate with
/// the smallest internal error bound wins, which keeps large steps when the
/// function is smooth (beating round-off) and falls back to small steps when
/// a large one straddles a kink.
pub fn ridders(mut central: impl FnMut(f64) -> Result<f64>, start: f64) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut table = vec![vec![0.0; RIDDERS_TABLE]; RIDDERS_TABLE];
    let mut h = start;
    table[0][0] = central(h)?;
    let (mut best, mut best_err) = (table[0][0], f64::INFINITY);
    for i in 1..RIDDERS_TABLE {
        h /= RIDDERS_SHRINK;
        table[0][i] = central(h)?;
        let mut fac = c2;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (table[j][i] - table[j - 1][i])
                .abs()
                .max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= best_err {
                best_err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * best_err {
            break;
        }
    }
    Ok(best)
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Computes analytic gradients of `f` with one backward pass and compares
/// them against central differences for every trainable tensor in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, options: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    let grads = tape.backward(loss)?;
    let analytic: HashMap<ParamId, Tensor<f64>> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .map(|id| (id, grads.param_or_zero(store, id)))
        .collect();
    check_against(store, f, &analytic, options)
}

/// Compares supplied analytic gradients with central differences of `f`.
pub fn check_against<F>(
    store: &ParamStore<f64>,
    f: F,
    analytic: &HashMap<ParamId, Tensor<f64>>,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let numel = store.tensor(id).numel();
        let coords: Vec<usize> = if numel <= options.full_check_limit {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ (id.index() as u64).wrapping_mul(0x9e37_79b9));
            let mut picked = rand::seq::index::sample(&mut rng, numel, options.sampled_coords.min(numel)).into_vec();
            picked.sort_unstable();
            picked
        };
        let grad = analytic
            .get(&id)
            .ok_or_else(|| Error::Tape(format!("no analytic gradient for {}", store.name(id))))?;
        let mut entry = GradCheckEntry {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_coord: 0,
            refined: 0,
        };
        for &c in &coords {
            let orig = store.tensor(id).data()[c];
            work.tensor_mut(id).data_mut()[c] = orig + options.eps;
            let plus = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[c] = orig - options.eps;
            let minus = evaluate(&work, &f)?;
            work.tensor_mut(id).data_mut()[c] = orig;
            let mut err = relative_error(grad.data()[c], (plus - minus) / (2.0 * options.eps));
            // once a refined estimate has failed, the tensor's verdict is settled
            let settled = options.refine_above.is_some_and(|t| !(entry.max_rel_error < t)) && entry.refined > 0;
            if options.refine_above.is_some_and(|t| !(err < t * REFINE_MARGIN)) && !settled {
                let numeric = ridders(
                    |h| {
                        work.tensor_mut(id).data_mut()[c] = orig + h;
                        let plus = evaluate(&work, &f);
                        work.tensor_mut(id).data_mut()[c] = orig - h;
                        let minus = evaluate(&work, &f);
                        work.tensor_mut(id).data_mut()[c] = orig;
                        Ok((plus? - minus?) / (2.0 * h))
                    },
                    RIDDERS_START,
                )?;
                err = relative_error(grad.data()[c], numeric);
                entry.refined += 1;
            }
            if err > entry.max_rel_error || err.is_nan() {
                entry.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                entry.worst_coord = c;
            }
        }
        report.entries.push(entry);
    }
    Ok(report)
}
