//! Connectionist temporal classification: the blank-interleaved lattice,
//! forward/backward recursions in log space, the loss, and its gradient
//! with respect to the log-probability inputs.

use crate::error::{Error, Result};
use crate::graph::{logaddexp, Graph, NodeId};
use crate::tensor::Tensor;

/// Class id reserved for the blank label; real symbols use 1..=C.
pub const BLANK: usize = 0;

/// Minimum number of frames that can emit `target`: its length plus one
/// mandatory blank between each adjacent repeated pair.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub struct CtcLattice {
    /// Blank-interleaved target: blank, t1, blank, t2, ..., blank.
    pub extended: Vec<usize>,
    /// alpha[t][s]: log-sum over prefixes emitting frames 0..=t, in state s.
    pub alpha: Vec<Vec<f64>>,
    /// beta[t][s]: log-sum over suffixes from state s after frame t; the
    /// emission at t itself is excluded, so alpha + beta scores whole paths.
    pub beta: Vec<Vec<f64>>,
    pub log_prob: f64,
}

/// Check that every row of `log_probs` is a loosely valid log-distribution.
pub(crate) fn validate_log_rows(log_probs: &Tensor) -> Result<()> {
    if log_probs.rank() != 2 {
        return Err(Error::Dim(format!(
            "log probs must be [T, C+1], got {:?}",
            log_probs.shape
        )));
    }
    let (t_len, c1) = (log_probs.rows(), log_probs.cols());
    if t_len == 0 || c1 < 2 {
        return Err(Error::Dim(format!(
            "need at least one frame and two classes, got [{t_len}, {c1}]"
        )));
    }
    for t in 0..t_len {
        let row = log_probs.row(t);
        if row.iter().any(|x| x.is_nan() || *x > 1e-3) {
            return Err(Error::Contract(format!("frame {t} is not a log-distribution")));
        }
        let mass = crate::graph::logsumexp(row);
        if mass.abs() > 1e-3 {
            return Err(Error::Contract(format!(
                "frame {t} log-probabilities sum to e^{mass:.6}, expected 1"
            )));
        }
    }
    Ok(())
}

fn validate_inputs(log_probs: &Tensor, target: &[usize]) -> Result<()> {
    validate_log_rows(log_probs)?;
    let (t_len, c1) = (log_probs.rows(), log_probs.cols());
    for &c in target {
        if c == BLANK || c >= c1 {
            return Err(Error::Contract(format!(
                "target symbol {c} outside 1..{c1} (0 is the blank)"
            )));
        }
    }
    if t_len < min_frames(target) {
        return Err(Error::InfeasibleTarget(format!(
            "{} frames cannot emit a target needing {}",
            t_len,
            min_frames(target)
        )));
    }
    Ok(())
}

/// Run the forward and backward recursions and cross-check them: the total
/// path mass recovered at every frame must agree with the forward result.
pub fn ctc_lattice(log_probs: &Tensor, target: &[usize]) -> Result<CtcLattice> {
    validate_inputs(log_probs, target)?;
    let (t_len, _) = (log_probs.rows(), log_probs.cols());
    let mut extended = Vec::with_capacity(2 * target.len() + 1);
    extended.push(BLANK);
    for &c in target {
        extended.push(c);
        extended.push(BLANK);
    }
    let s_len = extended.len();
    let ninf = f64::NEG_INFINITY;
    let y = |t: usize, k: usize| log_probs.row(t)[k];

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = y(0, extended[0]);
    if s_len > 1 {
        alpha[0][1] = y(0, extended[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = logaddexp(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2] {
                acc = logaddexp(acc, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = if acc == ninf { ninf } else { acc + y(t, extended[s]) };
        }
    }
    let mut log_prob = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_prob = logaddexp(log_prob, alpha[t_len - 1][s_len - 2]);
    }
    if log_prob == ninf {
        return Err(Error::Numeric {
            node: 0,
            msg: "no alignment has nonzero probability".into(),
        });
    }

    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + y(t + 1, extended[s]);
            if s + 1 < s_len {
                acc = logaddexp(acc, beta[t + 1][s + 1] + y(t + 1, extended[s + 1]));
            }
            if s + 2 < s_len && extended[s + 2] != BLANK && extended[s + 2] != extended[s] {
                acc = logaddexp(acc, beta[t + 1][s + 2] + y(t + 1, extended[s + 2]));
            }
            beta[t][s] = acc;
        }
    }

    for t in 0..t_len {
        let mut lp = ninf;
        for s in 0..s_len {
            lp = logaddexp(lp, alpha[t][s] + beta[t][s]);
        }
        if (lp - log_prob).abs() > 1e-9 * log_prob.abs().max(1.0) {
            return Err(Error::Numeric {
                node: 0,
                msg: format!(
                    "lattice self-check failed at frame {t}: {lp} vs {log_prob}"
                ),
            });
        }
    }
    Ok(CtcLattice { extended, alpha, beta, log_prob })
}

/// CTC loss −ln P(target | log_probs) and its gradient with respect to every
/// log-probability entry (the entries are treated as free variables).
pub fn ctc_loss_grad(log_probs: &Tensor, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let lat = ctc_lattice(log_probs, target)?;
    let (t_len, c1) = (log_probs.rows(), log_probs.cols());
    let mut grad = vec![0.0; t_len * c1];
    let mut per_class = vec![f64::NEG_INFINITY; c1];
    for t in 0..t_len {
        per_class.fill(f64::NEG_INFINITY);
        for (s, &k) in lat.extended.iter().enumerate() {
            per_class[k] = logaddexp(per_class[k], lat.alpha[t][s] + lat.beta[t][s]);
        }
        for (k, &mass) in per_class.iter().enumerate() {
            if mass != f64::NEG_INFINITY {
                grad[t * c1 + k] = -((mass - lat.log_prob).exp());
            }
        }
    }
    Ok((-lat.log_prob, grad))
}

/// Graph node version: a scalar loss whose backward pass deposits the
/// lattice gradient into the log-probability node.
pub fn ctc_loss(g: &mut Graph, log_probs: NodeId, target: &[usize]) -> Result<NodeId> {
    let (loss, grad) = ctc_loss_grad(g.value(log_probs), target)?;
    g.precomputed_loss(log_probs, loss, grad)
}
