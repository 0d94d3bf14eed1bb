//! Stratified aggregation of per-client logits.
//!
//! Each client's logits are first reweighted column-wise by that client's
//! column of `U_col` (in-model weighting). The per-sample `m × c` stack is then
//! contracted with the row of `U_row` selected by the sample's target label
//! (inter-model weighting):
//!
//! ```text
//! P(i, j) = Σ_k U_row(y_i, k) · U_col(j, k) · P_k(i, j)
//! ```

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nnkit::{Graph, Var};
use crate::stratify::CapabilityMatrices;

/// Logits of one client on a labelled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitBatch {
    pub logits: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LogitBatch {
    pub fn new(logits: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if logits.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} logit rows but {} labels",
                logits.nrows(),
                labels.len()
            )));
        }
        let c = logits.ncols();
        if let Some(&label) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::LabelOutOfRange { label, n_classes: c });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite logits"));
        }
        Ok(Self { logits, labels })
    }
}

fn check_client(caps: &CapabilityMatrices, k: usize, c: usize) -> Result<()> {
    if k >= caps.n_clients() {
        return Err(Error::shape(format!(
            "client {k} out of range for {} clients",
            caps.n_clients()
        )));
    }
    if c != caps.n_classes() {
        return Err(Error::shape(format!(
            "logits have {c} classes, capability matrices {}",
            caps.n_classes()
        )));
    }
    Ok(())
}

/// In-model weighting: column `j` of `logits` scaled by `U_col(j, k)`.
pub fn in_model_weight(logits: &Array2<f64>, caps: &CapabilityMatrices, k: usize) -> Result<Array2<f64>> {
    check_client(caps, k, logits.ncols())?;
    let col = caps.u_col.column(k).insert_axis(ndarray::Axis(0));
    Ok(logits * &col)
}

/// Weighted ensemble logits `P` (`b × c`).
pub fn stratified_aggregate(per_client: &[LogitBatch], caps: &CapabilityMatrices) -> Result<Array2<f64>> {
    let first = per_client
        .first()
        .ok_or_else(|| Error::invalid("no client logits to aggregate"))?;
    if per_client.len() != caps.n_clients() {
        return Err(Error::shape(format!(
            "{} client logit batches for {} clients",
            per_client.len(),
            caps.n_clients()
        )));
    }
    let dim = first.logits.dim();
    let labels = &first.labels;
    for (k, batch) in per_client.iter().enumerate() {
        if batch.logits.dim() != dim {
            return Err(Error::shape(format!(
                "client {k} logits are {:?}, expected {dim:?}",
                batch.logits.dim()
            )));
        }
        if &batch.labels != labels {
            return Err(Error::shape(format!("client {k} carries a different label vector")));
        }
    }
    check_labels(labels, caps.n_classes())?;

    let mut out = Array2::zeros(dim);
    for (k, batch) in per_client.iter().enumerate() {
        let weighted = in_model_weight(&batch.logits, caps, k)?;
        for (i, &y) in labels.iter().enumerate() {
            let v = caps.u_row[[y, k]];
            out.row_mut(i).scaled_add(v, &weighted.row(i));
        }
    }
    Ok(out)
}

fn check_labels(labels: &[usize], c: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= c) {
        Some(&label) => Err(Error::LabelOutOfRange { label, n_classes: c }),
        None => Ok(()),
    }
}

/// Per-client elementwise weight `W_k(i, j) = U_row(y_i, k) · U_col(j, k)`.
pub fn combined_weights(caps: &CapabilityMatrices, labels: &[usize], k: usize) -> Array2<f64> {
    let c = caps.n_classes();
    Array2::from_shape_fn((labels.len(), c), |(i, j)| caps.u_row[[labels[i], k]] * caps.u_col[[j, k]])
}

/// Differentiable stratified aggregation of client logit nodes.
pub fn stratified_aggregate_graph(
    g: &mut Graph,
    client_logits: &[Var],
    labels: &[usize],
    caps: &CapabilityMatrices,
) -> Result<Var> {
    if client_logits.len() != caps.n_clients() || client_logits.is_empty() {
        return Err(Error::shape(format!(
            "{} client logit nodes for {} clients",
            client_logits.len(),
            caps.n_clients()
        )));
    }
    check_labels(labels, caps.n_classes())?;
    let mut acc: Option<Var> = None;
    for (k, &logits) in client_logits.iter().enumerate() {
        check_client(caps, k, g.value(logits).ncols())?;
        let w = g.constant(combined_weights(caps, labels, k));
        let term = g.mul(logits, w);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one client"))
}

/// Row-wise argmax with ties broken toward the lowest class index.
pub fn hard_labels(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
