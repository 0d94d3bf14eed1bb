//! Loss builders on the autodiff graph. All return `1×1` nodes averaged
//! over the batch rows.

use ndarray::Array2;

use super::graph::{Graph, Var};

pub(crate) fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), c));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}

/// Mean cross-entropy of `softmax(logits)` against integer labels.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let (b, c) = g.value(logits).dim();
    debug_assert_eq!(b, labels.len());
    let ls = g.log_softmax(logits);
    let mask = g.constant(one_hot(labels, c));
    let picked = g.mul(ls, mask);
    let total = g.sum(picked);
    g.scale(total, -1.0 / b as f64)
}

/// Mean over rows of `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_divergence(g: &mut Graph, teacher: Var, student: Var, temperature: f64) -> Var {
    let b = g.value(teacher).nrows();
    let t = g.scale(teacher, 1.0 / temperature);
    let s = g.scale(student, 1.0 / temperature);
    let log_p = g.log_softmax(t);
    let log_q = g.log_softmax(s);
    let p = g.exp(log_p);
    let diff = g.sub(log_p, log_q);
    let terms = g.mul(p, diff);
    let total = g.sum(terms);
    g.scale(total, 1.0 / b as f64)
}

/// Half squared norm of a set of nodes; a probe loss whose gradient is the
/// value itself.
pub fn half_squared_norm(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc: Option<Var> = None;
    for &v in vars {
        let sq = g.square(v);
        let s = g.sum(sq);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    let acc = acc.unwrap_or_else(|| g.constant(Array2::zeros((1, 1))));
    g.scale(acc, 0.5)
}
