//! Minimal differentiable-model layer: an autodiff tape, a small
//! architecture registry, losses, optimisers and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod loss;
pub mod model;
pub mod optim;

use ndarray::Array2;

pub use graph::{log_softmax_rows, softmax_rows, Gradients, Graph, Var};
pub use model::{
    batch_moments, build_classifier, build_generator, build_generator_with, generate,
    generator_input, BnStatSet, BnStats, DiffModel, Forward, GeneratorSpec, Layer, Mode,
    ModelKind, ParamSlot, CLASSIFIER_ARCHITECTURES,
};
pub use optim::{Optimizer, OptimizerKind};

use crate::error::{Error, Result};

/// Evaluate a loss built on top of `model`'s forward pass and return its
/// value with the gradient w.r.t. the flat parameter vector.
///
/// The closure receives the graph and the bound forward pass, so any
/// composition of the [`loss`] builders (or of raw graph ops on
/// `Forward::params`) can be differentiated.
pub fn loss_and_grad<F>(model: &DiffModel, input: &Array2<f64>, mode: Mode, loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph, &Forward) -> Var,
{
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let fwd = model.forward(&mut g, x, mode, true)?;
    let l = loss(&mut g, &fwd);
    let value = g.scalar(l);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: format!("loss_and_grad on `{}`", model.architecture_tag()),
            step: 0,
            value,
        });
    }
    let grads = g.backward(l);
    Ok((value, model.flat_grad(&grads, &fwd)))
}
