//! Training objective: cross-entropy per branch plus a temperature-softened
//! KL term coupling the two branches step by step.
//!
//! ```text
//! L = CE_first + CE_second + λ · S² Σ_i Σ_j p_ij · log(p_ij / q_ij)
//! p_i = softmax(z_first_i / S),   q_i = softmax(z_second_aligned_i / S)
//! ```

use crate::data::vocab::TokenId;
use crate::decoder::{BranchOutput, Direction};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Loss terms of one sample (or one batch after averaging).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub ce_l2r: T,
    pub ce_r2l: T,
    pub kl: T,
    pub total: T,
    pub lambda: T,
    pub temperature: T,
}

impl<T: Scalar> LossBreakdown<T> {
    /// Recombines the terms in the same order the tape does.
    pub fn resum(&self) -> T {
        self.ce_l2r + self.ce_r2l + self.kl * self.lambda
    }

    /// Elementwise mean of per-sample breakdowns.
    pub fn mean(items: &[LossBreakdown<T>]) -> Option<LossBreakdown<T>> {
        let first = items.first()?;
        let n = T::of(items.len() as f64);
        let avg = |f: fn(&LossBreakdown<T>) -> T| items.iter().map(f).fold(T::zero(), |a, b| a + b) / n;
        Some(LossBreakdown {
            ce_l2r: avg(|b| b.ce_l2r),
            ce_r2l: avg(|b| b.ce_r2l),
            kl: avg(|b| b.kl),
            total: avg(|b| b.total),
            lambda: first.lambda,
            temperature: first.temperature,
        })
    }
}

fn check_temperature(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {s}")))
    }
}

/// Temperature-softened probabilities of a plain logit vector.
pub fn soften<T: Scalar>(logits: &[T], s: f64) -> Result<Vec<T>> {
    check_temperature(s)?;
    if logits.is_empty() {
        return Ok(Vec::new());
    }
    let s = T::of(s);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| ((z - max) / s).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Reverses step order. Applying it twice is the identity.
pub fn reverse_steps<V: Clone>(steps: &[V]) -> Vec<V> {
    steps.iter().rev().cloned().collect()
}

/// Drops the end-marker prediction of a teacher-forced branch and, for a
/// right-to-left branch, reverses the remaining `T` steps so position `i`
/// predicts target symbol `i`.
pub fn align_steps(output: &BranchOutput, target_len: usize) -> Result<Vec<Var>> {
    if output.logits.len() != target_len + 1 {
        return Err(Error::Alignment(format!(
            "branch produced {} steps for a target of {target_len} symbols",
            output.logits.len()
        )));
    }
    let symbols = &output.logits[..target_len];
    Ok(match output.direction {
        Direction::L2R => symbols.to_vec(),
        Direction::R2L => reverse_steps(symbols),
    })
}

/// Right-to-left outputs in left-to-right order.
pub fn align_r2l(r2l: &BranchOutput, target_len: usize) -> Result<Vec<Var>> {
    if r2l.direction != Direction::R2L {
        return Err(Error::Alignment("align_r2l expects a right-to-left branch".into()));
    }
    align_steps(r2l, target_len)
}

/// Softened KL between aligned step sequences, scaled by `S²`.
///
/// With `detach_target` the second operand is treated as a constant.
pub fn kl_loss<T: Scalar>(tape: &mut Tape<T>, first: &[Var], second: &[Var], s: f64, detach_target: bool) -> Result<Var> {
    check_temperature(s)?;
    if first.len() != second.len() || first.is_empty() {
        return Err(Error::Alignment(format!(
            "cannot pair {} steps with {} steps",
            first.len(),
            second.len()
        )));
    }
    let inv = T::one() / T::of(s);
    let mut total: Option<Var> = None;
    for (&p_logits, &q_logits) in first.iter().zip(second) {
        if tape.shape(p_logits) != tape.shape(q_logits) {
            return Err(Error::Alignment(format!(
                "class counts differ: {:?} vs {:?}",
                tape.shape(p_logits),
                tape.shape(q_logits)
            )));
        }
        let q_logits = if detach_target { tape.detach(q_logits) } else { q_logits };
        let zp = tape.scale(p_logits, inv)?;
        let zq = tape.scale(q_logits, inv)?;
        let log_p = tape.log_softmax(zp, 0)?;
        let log_q = tape.log_softmax(zq, 0)?;
        let p = tape.exp(log_p)?;
        let diff = tape.sub(log_p, log_q)?;
        let term = tape.mul(p, diff)?;
        let term = tape.sum(term)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let total = total.expect("at least one step");
    tape.scale(total, T::of(s * s))
}

/// Gold tokens a branch predicts: the target in its reading order followed
/// by its end marker.
pub fn gold_sequence(target: &[TokenId], direction: Direction) -> Vec<TokenId> {
    let mut gold = direction.order(target);
    gold.push(direction.end_token());
    gold
}

/// Summed cross-entropy of one teacher-forced branch.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, output: &BranchOutput, target: &[TokenId]) -> Result<Var> {
    let gold = gold_sequence(target, output.direction);
    if gold.len() != output.logits.len() {
        return Err(Error::Alignment(format!(
            "{} logit steps for {} gold tokens",
            output.logits.len(),
            gold.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&z, &y) in output.logits.iter().zip(&gold) {
        let k = tape.value(z).numel();
        if y as usize >= k {
            return Err(Error::Vocabulary(format!("target token {y} outside {k} classes")));
        }
        let lp = tape.log_softmax(z, 0)?;
        let nll = tape.pick(lp, y as usize)?;
        total = Some(match total {
            None => nll,
            Some(acc) => tape.add(acc, nll)?,
        });
    }
    let total = total.expect("gold sequence is never empty");
    tape.scale(total, -T::one())
}

/// Loss value on the tape plus its breakdown.
pub struct Loss<T> {
    pub var: Var,
    pub breakdown: LossBreakdown<T>,
}

/// Full objective for a pair of branches teacher-forced on the same target.
/// The first branch's cross-entropy is reported as `ce_l2r` and the second's
/// as `ce_r2l`, whatever their directions.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    first: &BranchOutput,
    second: &BranchOutput,
    target: &[TokenId],
    lambda: f64,
    s: f64,
    detach_target: bool,
) -> Result<Loss<T>> {
    let ce_a = ce_loss(tape, first, target)?;
    let ce_b = ce_loss(tape, second, target)?;
    let a = align_steps(first, target.len())?;
    let b = align_steps(second, target.len())?;
    let kl = kl_loss(tape, &a, &b, s, detach_target)?;
    let ce = tape.add(ce_a, ce_b)?;
    let weighted = tape.scale(kl, T::of(lambda))?;
    let total = tape.add(ce, weighted)?;
    let item = |tape: &Tape<T>, v: Var| tape.value(v).item();
    Ok(Loss {
        var: total,
        breakdown: LossBreakdown {
            ce_l2r: item(tape, ce_a),
            ce_r2l: item(tape, ce_b),
            kl: item(tape, kl),
            total: item(tape, total),
            lambda: T::of(lambda),
            temperature: T::of(s),
        },
    })
}

/// Objective of a single branch trained alone.
pub fn single_loss<T: Scalar>(tape: &mut Tape<T>, output: &BranchOutput, target: &[TokenId], s: f64) -> Result<Loss<T>> {
    let ce = ce_loss(tape, output, target)?;
    let v = tape.value(ce).item();
    let (ce_l2r, ce_r2l) = match output.direction {
        Direction::L2R => (v, T::zero()),
        Direction::R2L => (T::zero(), v),
    };
    Ok(Loss {
        var: ce,
        breakdown: LossBreakdown {
            ce_l2r,
            ce_r2l,
            kl: T::zero(),
            total: v,
            lambda: T::zero(),
            temperature: T::of(s),
        },
    })
}

/// Stand-alone helper for tests and tools: KL of plain logit rows.
pub fn kl_value<T: Scalar>(first: &[Tensor<T>], second: &[Tensor<T>], s: f64) -> Result<T> {
    let mut tape = Tape::inference();
    let a: Vec<Var> = first.iter().map(|t| tape.constant(t.clone())).collect();
    let b: Vec<Var> = second.iter().map(|t| tape.constant(t.clone())).collect();
    let v = kl_loss(&mut tape, &a, &b, s, false)?;
    Ok(tape.value(v).item())
}
