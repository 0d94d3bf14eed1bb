use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Batch-norm numerical floor added to the variance before normalising.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.1;
const LEAKY_SLOPE: f64 = 0.1;

/// Classifier architectures known to [`build_classifier`].
pub const CLASSIFIER_ARCHITECTURES: &[&str] = &["mlp_small", "mlp_wide", "cnn_small"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    BatchNorm {
        width: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    /// Single-input-channel 1-D valid convolution over the feature vector.
    Conv1d {
        length: usize,
        kernel: usize,
        channels: usize,
    },
}

impl Layer {
    fn output_width(&self, input: usize) -> usize {
        match *self {
            Layer::Linear { outputs, .. } => outputs,
            Layer::BatchNorm { .. } | Layer::LeakyRelu { .. } => input,
            Layer::Conv1d {
                length,
                kernel,
                channels,
            } => (length - kernel + 1) * channels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Generator {
        noise_dim: usize,
        n_classes: usize,
        conditional: bool,
    },
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean and (biased) variance of one batch-norm layer's input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn initial(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

/// Per-layer batch-norm statistics, ordered by layer depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStatSet {
    pub layers: Vec<BnStats>,
}

/// Result of binding a model onto a [`Graph`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub output: Var,
    /// One node per manifest slot, in manifest order.
    pub params: Vec<Var>,
    /// Input activations of each batch-norm layer.
    pub bn_inputs: Vec<Var>,
    mode: Mode,
}

/// A differentiable model: layer list, flat parameters with a named manifest,
/// and batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffModel {
    pub(crate) tag: String,
    pub(crate) kind: ModelKind,
    pub(crate) input_dim: usize,
    pub(crate) n_outputs: usize,
    pub(crate) layers: Vec<Layer>,
    pub(crate) manifest: Vec<ParamSlot>,
    pub(crate) params: Vec<f64>,
    pub(crate) running: Vec<BnStats>,
    pub(crate) seed: u64,
}

fn classifier_layers(tag: &str, feature_dim: usize, c: usize) -> Result<Vec<Layer>> {
    let lrelu = Layer::LeakyRelu { slope: LEAKY_SLOPE };
    let layers = match tag {
        "mlp_small" => vec![
            Layer::Linear {
                inputs: feature_dim,
                outputs: 32,
            },
            Layer::BatchNorm { width: 32 },
            lrelu.clone(),
            Layer::Linear {
                inputs: 32,
                outputs: c,
            },
        ],
        "mlp_wide" => vec![
            Layer::Linear {
                inputs: feature_dim,
                outputs: 64,
            },
            Layer::BatchNorm { width: 64 },
            lrelu.clone(),
            Layer::Linear {
                inputs: 64,
                outputs: 48,
            },
            Layer::BatchNorm { width: 48 },
            lrelu.clone(),
            Layer::Linear {
                inputs: 48,
                outputs: c,
            },
        ],
        "cnn_small" => {
            if feature_dim < 3 {
                return Err(Error::invalid(format!(
                    "cnn_small needs feature_dim >= 3, got {feature_dim}"
                )));
            }
            let conv = Layer::Conv1d {
                length: feature_dim,
                kernel: 3,
                channels: 6,
            };
            let width = conv.output_width(feature_dim);
            vec![
                conv,
                Layer::BatchNorm { width },
                lrelu.clone(),
                Layer::Linear {
                    inputs: width,
                    outputs: 24,
                },
                lrelu,
                Layer::Linear {
                    inputs: 24,
                    outputs: c,
                },
            ]
        }
        other => return Err(Error::UnknownArchitecture(other.to_string())),
    };
    Ok(layers)
}

/// Build an initialised classifier from the architecture registry.
pub fn build_classifier(tag: &str, feature_dim: usize, c: usize, seed: u64) -> Result<DiffModel> {
    if feature_dim == 0 || c < 2 {
        return Err(Error::invalid(format!(
            "classifier needs feature_dim >= 1 and c >= 2 (got {feature_dim}, {c})"
        )));
    }
    let layers = classifier_layers(tag, feature_dim, c)?;
    Ok(DiffModel::assemble(
        tag.to_string(),
        ModelKind::Classifier,
        feature_dim,
        layers,
        seed,
    ))
}

/// Shape of the conditional generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub noise_dim: usize,
    pub n_classes: usize,
    pub output_dim: usize,
    pub hidden: usize,
    pub conditional: bool,
}

impl GeneratorSpec {
    pub fn new(noise_dim: usize, n_classes: usize, output_dim: usize) -> Self {
        Self {
            noise_dim,
            n_classes,
            output_dim,
            hidden: 64,
            conditional: true,
        }
    }
}

/// Label-conditional generator mapping `noise ⊕ one_hot(label)` to a
/// synthetic feature vector.
pub fn build_generator(noise_dim: usize, c: usize, output_dim: usize, seed: u64) -> Result<DiffModel> {
    build_generator_with(&GeneratorSpec::new(noise_dim, c, output_dim), seed)
}

pub fn build_generator_with(spec: &GeneratorSpec, seed: u64) -> Result<DiffModel> {
    if spec.noise_dim == 0 || spec.output_dim == 0 || spec.hidden == 0 || spec.n_classes < 2 {
        return Err(Error::invalid(format!("invalid generator spec {spec:?}")));
    }
    let input_dim = spec.noise_dim + if spec.conditional { spec.n_classes } else { 0 };
    let h = spec.hidden;
    let lrelu = Layer::LeakyRelu { slope: 0.2 };
    let layers = vec![
        Layer::Linear {
            inputs: input_dim,
            outputs: h,
        },
        Layer::BatchNorm { width: h },
        lrelu.clone(),
        Layer::Linear {
            inputs: h,
            outputs: h,
        },
        Layer::BatchNorm { width: h },
        lrelu,
        Layer::Linear {
            inputs: h,
            outputs: spec.output_dim,
        },
    ];
    let tag = if spec.conditional {
        "generator"
    } else {
        "generator_unconditional"
    };
    Ok(DiffModel::assemble(
        tag.to_string(),
        ModelKind::Generator {
            noise_dim: spec.noise_dim,
            n_classes: spec.n_classes,
            conditional: spec.conditional,
        },
        input_dim,
        layers,
        seed,
    ))
}

impl DiffModel {
    pub(crate) fn assemble(
        tag: String,
        kind: ModelKind,
        input_dim: usize,
        layers: Vec<Layer>,
        seed: u64,
    ) -> Self {
        let mut manifest = Vec::new();
        let mut running = Vec::new();
        let mut offset = 0;
        let mut width = input_dim;
        let mut slot = |name: String, rows: usize, cols: usize, offset: &mut usize| {
            manifest.push(ParamSlot {
                name,
                rows,
                cols,
                offset: *offset,
            });
            *offset += rows * cols;
        };
        for (i, layer) in layers.iter().enumerate() {
            match *layer {
                Layer::Linear { inputs, outputs } => {
                    slot(format!("layer{i}.weight"), inputs, outputs, &mut offset);
                    slot(format!("layer{i}.bias"), 1, outputs, &mut offset);
                }
                Layer::BatchNorm { width } => {
                    slot(format!("layer{i}.gamma"), 1, width, &mut offset);
                    slot(format!("layer{i}.beta"), 1, width, &mut offset);
                    running.push(BnStats::initial(width));
                }
                Layer::Conv1d {
                    kernel, channels, ..
                } => {
                    slot(format!("layer{i}.kernel"), kernel, channels, &mut offset);
                    slot(format!("layer{i}.bias"), 1, channels, &mut offset);
                }
                Layer::LeakyRelu { .. } => {}
            }
            width = layer.output_width(width);
        }
        let n_outputs = width;

        let mut rng = rng::rng_for(seed, &[rng::tag("init")]);
        let mut params = vec![0.0; offset];
        for s in &manifest {
            let dst = &mut params[s.offset..s.offset + s.len()];
            if s.name.ends_with(".gamma") {
                dst.fill(1.0);
            } else if s.name.ends_with(".beta") {
                dst.fill(0.0);
            } else {
                // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases share the
                // fan-in of their weight matrix.
                let fan_in = if s.name.ends_with(".bias") {
                    manifest
                        .iter()
                        .rev()
                        .find(|w| w.offset < s.offset)
                        .map_or(1, |w| w.rows)
                } else {
                    s.rows
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in dst {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }

        Self {
            tag,
            kind,
            input_dim,
            n_outputs,
            layers,
            manifest,
            params,
            running,
            seed,
        }
    }

    pub fn architecture_tag(&self) -> &str {
        &self.tag
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn manifest(&self) -> &[ParamSlot] {
        &self.manifest
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, manifest expects {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Two models share a structure when their layer lists coincide.
    pub fn same_structure(&self, other: &DiffModel) -> bool {
        self.tag == other.tag && self.layers == other.layers && self.kind == other.kind
    }

    /// Copy parameters and running statistics from a model with the same
    /// structure.
    pub fn load_state_from(&mut self, other: &DiffModel) -> Result<()> {
        if !self.same_structure(other) {
            return Err(Error::ArchitectureMismatch(format!(
                "cannot load `{}` state into `{}`",
                other.tag, self.tag
            )));
        }
        self.params.clone_from(&other.params);
        self.running.clone_from(&other.running);
        Ok(())
    }

    pub fn bn_layer_count(&self) -> usize {
        self.running.len()
    }

    /// Stored running statistics.
    pub fn bn_running_stats(&self) -> Result<BnStatSet> {
        if self.running.is_empty() {
            return Err(Error::NoBnLayers(self.tag.clone()));
        }
        Ok(BnStatSet {
            layers: self.running.clone(),
        })
    }

    pub(crate) fn set_running(&mut self, running: Vec<BnStats>) {
        self.running = running;
    }

    fn slot_matrix(&self, slot: &ParamSlot) -> Array2<f64> {
        Array2::from_shape_vec(
            (slot.rows, slot.cols),
            self.params[slot.offset..slot.offset + slot.len()].to_vec(),
        )
        .expect("manifest slot shape")
    }

    /// Bind the model onto `g` and run it on `input`.
    ///
    /// With `trainable` the parameter leaves receive gradients. In
    /// [`Mode::Train`] batch-norm normalises with batch statistics; the running
    /// statistics are only updated through [`DiffModel::commit_batch_stats`].
    pub fn forward(&self, g: &mut Graph, input: Var, mode: Mode, trainable: bool) -> Result<Forward> {
        let (rows, cols) = g.value(input).dim();
        if cols != self.input_dim {
            return Err(Error::shape(format!(
                "`{}` expects {} input columns, got {cols}",
                self.tag, self.input_dim
            )));
        }
        if rows == 0 {
            return Err(Error::shape("empty batch"));
        }
        let params: Vec<Var> = self
            .manifest
            .iter()
            .map(|s| {
                let m = self.slot_matrix(s);
                if trainable {
                    g.param(m)
                } else {
                    g.constant(m)
                }
            })
            .collect();

        let mut slot = 0;
        let mut bn_idx = 0;
        let mut bn_inputs = Vec::with_capacity(self.running.len());
        let mut x = input;
        for layer in &self.layers {
            x = match *layer {
                Layer::Linear { .. } => {
                    let y = g.matmul(x, params[slot]);
                    let y = g.add_row(y, params[slot + 1]);
                    slot += 2;
                    y
                }
                Layer::Conv1d {
                    length,
                    kernel,
                    channels,
                } => {
                    let positions = length - kernel + 1;
                    let index: Vec<usize> = (0..rows)
                        .flat_map(|r| {
                            (0..positions)
                                .flat_map(move |p| (0..kernel).map(move |t| r * length + p + t))
                        })
                        .collect();
                    let patches = g.gather(x, index, rows * positions, kernel);
                    let y = g.matmul(patches, params[slot]);
                    let y = g.add_row(y, params[slot + 1]);
                    slot += 2;
                    g.reshape(y, rows, positions * channels)
                }
                Layer::BatchNorm { .. } => {
                    bn_inputs.push(x);
                    let normalised = match mode {
                        Mode::Train => {
                            let (mean, var) = batch_moments(g, x);
                            let neg = g.scale(mean, -1.0);
                            let centered = g.add_row(x, neg);
                            let shifted = g.add_scalar(var, BN_EPS);
                            let inv = g.powf(shifted, -0.5);
                            g.mul_row(centered, inv)
                        }
                        Mode::Eval => {
                            let stats = &self.running[bn_idx];
                            let neg_mean = g.constant(row(stats.mean.iter().map(|m| -m)));
                            let inv = g.constant(row(stats.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt())));
                            let centered = g.add_row(x, neg_mean);
                            g.mul_row(centered, inv)
                        }
                    };
                    bn_idx += 1;
                    let y = g.mul_row(normalised, params[slot]);
                    let y = g.add_row(y, params[slot + 1]);
                    slot += 2;
                    y
                }
                Layer::LeakyRelu { slope } => g.leaky_relu(x, slope),
            };
        }

        Ok(Forward {
            output: x,
            params,
            bn_inputs,
            mode,
        })
    }

    /// Fold the batch statistics of a train-mode forward pass into the
    /// running estimates.
    pub fn commit_batch_stats(&mut self, g: &Graph, fwd: &Forward) {
        if fwd.mode != Mode::Train {
            return;
        }
        for (stats, &x) in self.running.iter_mut().zip(&fwd.bn_inputs) {
            let batch = plain_moments(g.value(x));
            for (r, b) in stats.mean.iter_mut().zip(&batch.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in stats.var.iter_mut().zip(&batch.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Concatenate parameter gradients in manifest order.
    pub fn flat_grad(&self, grads: &super::graph::Gradients, fwd: &Forward) -> Vec<f64> {
        let mut out = vec![0.0; self.params.len()];
        for (slot, &v) in self.manifest.iter().zip(&fwd.params) {
            if let Some(d) = grads.wrt(v) {
                for (dst, src) in out[slot.offset..slot.offset + slot.len()]
                    .iter_mut()
                    .zip(d.iter())
                {
                    *dst = *src;
                }
            }
        }
        out
    }

    /// Raw output logits for a plain batch. Never mutates the model.
    pub fn forward_logits(&self, batch: &Array2<f64>, mode: Mode) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let fwd = self.forward(&mut g, x, mode, false)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Batch statistics of each batch-norm layer's input for `batch`, with
    /// the model in eval mode.
    pub fn bn_batch_stats(&self, batch: &Array2<f64>) -> Result<BnStatSet> {
        if self.running.is_empty() {
            return Err(Error::NoBnLayers(self.tag.clone()));
        }
        if batch.nrows() < 2 {
            return Err(Error::BatchTooSmall(batch.nrows()));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let fwd = self.forward(&mut g, x, Mode::Eval, false)?;
        Ok(BnStatSet {
            layers: fwd.bn_inputs.iter().map(|&v| plain_moments(g.value(v))).collect(),
        })
    }
}

/// Differentiable column mean and biased column variance of `x`.
pub fn batch_moments(g: &mut Graph, x: Var) -> (Var, Var) {
    let mean = g.col_mean(x);
    let neg = g.scale(mean, -1.0);
    let centered = g.add_row(x, neg);
    let sq = g.square(centered);
    let var = g.col_mean(sq);
    (mean, var)
}

fn plain_moments(x: &Array2<f64>) -> BnStats {
    let n = x.nrows() as f64;
    let mean: Vec<f64> = x.columns().into_iter().map(|c| c.sum() / n).collect();
    let var = x
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
        .collect();
    BnStats { mean, var }
}

pub(crate) fn row(values: impl IntoIterator<Item = f64>) -> Array2<f64> {
    let v: Vec<f64> = values.into_iter().collect();
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row")
}

/// Constant generator input: noise rows, optionally followed by one-hot
/// labels.
pub fn generator_input(noise: &Array2<f64>, labels: &[usize], generator: &DiffModel) -> Result<Array2<f64>> {
    let ModelKind::Generator {
        noise_dim,
        n_classes,
        conditional,
    } = generator.kind
    else {
        return Err(Error::invalid("generator_input needs a generator model"));
    };
    if noise.ncols() != noise_dim || noise.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "noise is {:?}, expected ({}, {noise_dim})",
            noise.dim(),
            labels.len()
        )));
    }
    if !conditional {
        return Ok(noise.clone());
    }
    let mut input = Array2::zeros((labels.len(), noise_dim + n_classes));
    for (i, &y) in labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                n_classes,
            });
        }
        input
            .row_mut(i)
            .slice_mut(ndarray::s![..noise_dim])
            .assign(&noise.row(i));
        input[[i, noise_dim + y]] = 1.0;
    }
    Ok(input)
}

/// Generator output for fixed noise and labels.
pub fn generate(generator: &DiffModel, noise: &Array2<f64>, labels: &[usize], mode: Mode) -> Result<Array2<f64>> {
    let input = generator_input(noise, labels, generator)?;
    generator.forward_logits(&input, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn batch(rows: usize, cols: usize, offset: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| offset + ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0)
    }

    #[test]
    fn classifier_shape_contract() {
        let m = build_classifier("mlp_small", 8, 10, 0).unwrap();
        let out = m.forward_logits(&batch(4, 8, 0.0), Mode::Eval).unwrap();
        assert_eq!(out.dim(), (4, 10));
        assert_eq!(m.n_outputs(), 10);
    }

    #[test]
    fn builds_are_deterministic_per_seed() {
        let a = build_classifier("mlp_small", 8, 10, 3).unwrap();
        let b = build_classifier("mlp_small", 8, 10, 3).unwrap();
        let c = build_classifier("mlp_small", 8, 10, 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn registry_variants_differ_in_size() {
        let sizes: Vec<usize> = CLASSIFIER_ARCHITECTURES
            .iter()
            .map(|t| build_classifier(t, 8, 10, 0).unwrap().n_params())
            .collect();
        assert_ne!(sizes[0], sizes[1]);
        assert_ne!(sizes[0], sizes[2]);
        for tag in CLASSIFIER_ARCHITECTURES {
            assert!(build_classifier(tag, 8, 10, 0).unwrap().bn_layer_count() >= 1);
        }
    }

    #[test]
    fn unknown_architecture_is_rejected() {
        assert!(matches!(
            build_classifier("resnet152", 8, 10, 0),
            Err(Error::UnknownArchitecture(_))
        ));
    }

    #[test]
    fn generator_shape_and_conditioning() {
        let gen = build_generator(16, 10, 8, 0).unwrap();
        let noise = batch(32, 16, 0.0);
        let labels: Vec<usize> = (0..32).map(|i| i % 10).collect();
        let out = generate(&gen, &noise, &labels, Mode::Eval).unwrap();
        assert_eq!(out.dim(), (32, 8));
        let again = generate(&gen, &noise, &labels, Mode::Eval).unwrap();
        assert_eq!(out, again);
        let shifted: Vec<usize> = labels.iter().map(|y| (y + 1) % 10).collect();
        let other = generate(&gen, &noise, &shifted, Mode::Eval).unwrap();
        assert_ne!(out, other);
    }

    #[test]
    fn generator_rejects_zero_noise_dim() {
        assert!(build_generator(0, 10, 8, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = build_classifier("mlp_small", 8, 10, 0).unwrap();
        assert!(matches!(
            m.forward_logits(&batch(4, 7, 0.0), Mode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let mut m = build_classifier("mlp_wide", 8, 10, 0).unwrap();
        let last: Vec<ParamSlot> = m.manifest().iter().rev().take(2).cloned().collect();
        for s in last {
            m.params_mut()[s.offset..s.offset + s.len()].fill(0.0);
        }
        let out = m.forward_logits(&batch(5, 8, 0.0), Mode::Eval).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_pure_and_row_independent() {
        for tag in CLASSIFIER_ARCHITECTURES {
            let m = build_classifier(tag, 8, 10, 1).unwrap();
            let before = m.clone();
            let b = batch(8, 8, 0.3);
            let first = m.forward_logits(&b, Mode::Eval).unwrap();
            let second = m.forward_logits(&b, Mode::Eval).unwrap();
            assert_eq!(first, second);
            assert_eq!(m, before);
            let single = m
                .forward_logits(&b.slice(ndarray::s![2..3, ..]).to_owned(), Mode::Eval)
                .unwrap();
            for (a, b) in single.row(0).iter().zip(first.row(2).iter()) {
                assert!((a - b).abs() < 1e-12, "{tag}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fresh_running_stats_follow_init_convention() {
        let m = build_classifier("mlp_wide", 8, 10, 0).unwrap();
        let stats = m.bn_running_stats().unwrap();
        assert_eq!(stats.layers.len(), 2);
        let widths: Vec<usize> = stats.layers.iter().map(BnStats::width).collect();
        let bn_widths: Vec<usize> = m
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::BatchNorm { width } => Some(*width),
                _ => None,
            })
            .collect();
        assert_eq!(widths, bn_widths);
        for l in &stats.layers {
            assert!(l.mean.iter().all(|&v| v == 0.0));
            assert!(l.var.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn running_stats_require_bn_layers() {
        let mut m = build_classifier("mlp_small", 8, 10, 0).unwrap();
        m.running.clear();
        assert!(matches!(m.bn_running_stats(), Err(Error::NoBnLayers(_))));
    }

    #[test]
    fn batch_stats_edge_cases() {
        let m = build_classifier("mlp_wide", 4, 3, 0).unwrap();
        let same = Array2::from_shape_fn((5, 4), |(_, j)| j as f64 * 0.5);
        for layer in m.bn_batch_stats(&same).unwrap().layers {
            assert!(layer.var.iter().all(|&v| v.abs() < 1e-24));
        }

        let b = batch(6, 4, 0.1);
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[b.view(), b.view()]).unwrap();
        let s1 = m.bn_batch_stats(&b).unwrap();
        let s2 = m.bn_batch_stats(&doubled).unwrap();
        for (a, b) in s1.layers.iter().zip(&s2.layers) {
            for (x, y) in a.mean.iter().chain(&a.var).zip(b.mean.iter().chain(&b.var)) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        assert!(matches!(
            m.bn_batch_stats(&array![[1.0, 2.0, 3.0, 4.0]]),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_stats_match_two_pass_oracle() {
        // Oracle: hidden pre-BN activations of mlp_small are x·W + b; compute
        // their mean, then the mean squared deviation, in two passes.
        let m = build_classifier("mlp_small", 3, 4, 5).unwrap();
        let x = batch(9, 3, 0.2);
        let w = m.slot_matrix(&m.manifest()[0]);
        let bias = m.slot_matrix(&m.manifest()[1]);
        let hidden = x.dot(&w) + &bias;
        let stats = m.bn_batch_stats(&x).unwrap();
        for j in 0..hidden.ncols() {
            let col: Vec<f64> = hidden.column(j).to_vec();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
            assert!(rel(stats.layers[0].mean[j], mean) < 1e-6);
            assert!(rel(stats.layers[0].var[j], var) < 1e-6);
        }
    }

    #[test]
    fn conv_variant_handles_small_inputs() {
        assert!(build_classifier("cnn_small", 2, 4, 0).is_err());
        let m = build_classifier("cnn_small", 5, 4, 0).unwrap();
        let out = m.forward_logits(&batch(3, 5, 0.0), Mode::Train).unwrap();
        assert_eq!(out.dim(), (3, 4));
    }
}
