//! Network descriptions, weight initialisation, and forward/backward passes.

use std::fmt;

use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_gradcheck, GradCheckable, GradcheckOptions, GradcheckReport, PatternHasher, Probe};
use crate::layers::{self, cross_entropy, softmax};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PEDESTRIAN: &str = "pedestrian";
pub const EYE: &str = "eye";

/// Index of the positive class (pedestrian present / eyes open).
pub const POSITIVE: usize = 1;
pub const NEGATIVE: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dense {
        outputs: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    name: String,
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Validates that the layers chain from `input_shape` to a softmax over
    /// exactly two logits.
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = ModelSpec {
            name: name.into(),
            input_shape,
            layers,
        };
        let shapes = spec.activation_shapes()?;
        let last = shapes.last().expect("input shape always present");
        if spec.layers.last() != Some(&LayerSpec::Softmax) || last[..] != [2] {
            return Err(Error::dim(format!(
                "model `{}` must end in a softmax over 2 logits, ends in {last:?}",
                spec.name
            )));
        }
        if spec.layers[..spec.layers.len() - 1].contains(&LayerSpec::Softmax) {
            return Err(Error::dim("softmax is only allowed as the final layer"));
        }
        Ok(spec)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Shape entering each layer, followed by the final output shape.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        if shape.contains(&0) {
            return Err(Error::dim("input shape has a zero dimension"));
        }
        let mut out = vec![shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (*layer, &shape[..]) {
                (LayerSpec::Conv { filters, kernel, stride, padding }, &[_, h, w]) => {
                    if stride == 0 || filters == 0 || kernel == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(Error::dim(format!("layer {i}: invalid convolution for {shape:?}")));
                    }
                    vec![filters, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1]
                }
                (LayerSpec::MaxPool2, &[c, h, w]) if h % 2 == 0 && w % 2 == 0 => vec![c, h / 2, w / 2],
                (LayerSpec::Relu, _) => shape,
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (LayerSpec::Dense { outputs }, &[_]) if outputs > 0 => vec![outputs],
                (LayerSpec::Softmax, &[k]) if k >= 2 => shape,
                _ => {
                    return Err(Error::dim(format!(
                        "layer {i} ({layer:?}) cannot follow shape {shape:?}"
                    )))
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Shapes of all parameters, weights before bias for each layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let shapes = self.activation_shapes().expect("validated at construction");
        let mut out = Vec::new();
        for (layer, input) in self.layers.iter().zip(&shapes) {
            match *layer {
                LayerSpec::Conv { filters, kernel, .. } => {
                    out.push(vec![filters, input[0], kernel, kernel]);
                    out.push(vec![filters]);
                }
                LayerSpec::Dense { outputs } => {
                    out.push(vec![outputs, input[0]]);
                    out.push(vec![outputs]);
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Looks up one of the two built-in architectures by name.
    pub fn by_name(name: &str) -> Option<ModelSpec> {
        match name {
            PEDESTRIAN => Some(build_pedestrian_net()),
            EYE => Some(build_eye_net()),
            _ => None,
        }
    }
}

fn conv3x3(filters: usize) -> LayerSpec {
    LayerSpec::Conv {
        filters,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

/// Two 3x3 convolution stages over a 1x128x64 grayscale window.
pub fn build_pedestrian_net() -> ModelSpec {
    use LayerSpec::*;
    ModelSpec::new(
        PEDESTRIAN,
        [1, 128, 64],
        vec![conv3x3(8), Relu, MaxPool2, conv3x3(16), Relu, MaxPool2, Flatten, Dense { outputs: 2 }, Softmax],
    )
    .expect("pedestrian architecture is consistent")
}

/// One 3x3 convolution stage over a 1x24x24 grayscale eye crop.
pub fn build_eye_net() -> ModelSpec {
    use LayerSpec::*;
    ModelSpec::new(
        EYE,
        [1, 24, 24],
        vec![conv3x3(8), Relu, MaxPool2, Flatten, Dense { outputs: 2 }, Softmax],
    )
    .expect("eye architecture is consistent")
}

/// Trained (or freshly initialised) parameters for a [`ModelSpec`].
#[derive(Clone, PartialEq)]
pub struct ModelWeights {
    spec: ModelSpec,
    params: Vec<Tensor>,
}

impl fmt::Debug for ModelWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelWeights")
            .field("spec", &self.spec.name)
            .field("params", &self.params.len())
            .finish()
    }
}

impl ModelWeights {
    pub fn new(spec: ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::dim(format!(
                "model `{}` has {} parameter tensors, got {}",
                spec.name,
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if p.shape() != &s[..] {
                return Err(Error::dim(format!(
                    "parameter {i} of `{}` should be {s:?}, got {:?}",
                    spec.name,
                    p.shape()
                )));
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter {i} has non-finite values")));
            }
        }
        Ok(ModelWeights { spec, params })
    }

    /// All-zero parameters.
    pub fn zeros(spec: ModelSpec) -> Self {
        let params = spec.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        ModelWeights { spec, params }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Errors with [`Error::SpecMismatch`] unless these weights belong to
    /// the named architecture.
    pub fn expect_model(&self, name: &str) -> Result<()> {
        if self.spec.name != name {
            return Err(Error::SpecMismatch {
                expected: name.to_string(),
                found: self.spec.name.clone(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.spec.input_shape {
            return Err(Error::dim(format!(
                "model `{}` expects input {:?}, got {:?}",
                self.spec.name,
                self.spec.input_shape,
                image.shape()
            )));
        }
        Ok(())
    }

    /// Runs every layer, keeping the input of each one for backprop.
    pub fn forward_trace(&self, image: &Tensor) -> Result<Trace> {
        self.check_input(image)?;
        let mut inputs = Vec::with_capacity(self.spec.layers.len());
        let mut current = image.clone();
        let mut p = 0;
        for layer in &self.spec.layers {
            let next = match *layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let out = layers::conv2d_forward(&current, &self.params[p], &self.params[p + 1], stride, padding)?;
                    p += 2;
                    out
                }
                LayerSpec::Relu => layers::relu_forward(&current),
                LayerSpec::MaxPool2 => layers::maxpool2_forward(&current)?,
                LayerSpec::Flatten => {
                    let n = current.len();
                    current.clone().reshape(&[n])?
                }
                LayerSpec::Dense { .. } => {
                    let out = layers::dense_forward(&current, &self.params[p], &self.params[p + 1])?;
                    p += 2;
                    out
                }
                LayerSpec::Softmax => softmax(&current)?,
            };
            inputs.push(std::mem::replace(&mut current, next));
        }
        Ok(Trace {
            inputs,
            output: current,
        })
    }

    /// Softmax scores for one image; index 1 is the positive class.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(image)?.output)
    }

    /// Backpropagates a gradient with respect to the logits (the softmax
    /// input). Returns parameter gradients in parameter order and, when
    /// `want_input_grad` is set, the gradient with respect to the image.
    pub fn backward(&self, trace: &Trace, logit_grad: &Tensor, want_input_grad: bool) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        let layers = &self.spec.layers;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut p = self.params.len();
        let mut upstream = logit_grad.clone();
        let first_param_layer = layers.iter().position(LayerSpec::has_params);
        for (i, layer) in layers.iter().enumerate().rev() {
            let input = &trace.inputs[i];
            upstream = match *layer {
                LayerSpec::Softmax => continue,
                LayerSpec::Conv { stride, padding, .. } => {
                    p -= 2;
                    // The first conv layer only needs an input gradient for gradchecks.
                    let need_dx = want_input_grad || Some(i) != first_param_layer;
                    let g = layers::conv2d_backward_inner(input, &self.params[p], stride, padding, &upstream, need_dx)?;
                    let [dk, db]: [Tensor; 2] = g.param_grads.try_into().expect("conv has two params");
                    grads[p] = Some(dk);
                    grads[p + 1] = Some(db);
                    g.input_grad
                }
                LayerSpec::Dense { .. } => {
                    p -= 2;
                    let g = layers::dense_backward(input, &self.params[p], &self.params[p + 1], &upstream)?;
                    let [dw, db]: [Tensor; 2] = g.param_grads.try_into().expect("dense has two params");
                    grads[p] = Some(dw);
                    grads[p + 1] = Some(db);
                    g.input_grad
                }
                LayerSpec::Relu => layers::relu_backward(input, &upstream)?.input_grad,
                LayerSpec::MaxPool2 => layers::maxpool2_backward(input, &upstream)?.input_grad,
                LayerSpec::Flatten => upstream.reshape(input.shape())?,
            };
        }
        let grads = grads.into_iter().map(|g| g.expect("every parameter visited")).collect();
        Ok((grads, want_input_grad.then_some(upstream)))
    }

    /// Cross-entropy loss, softmax scores, and parameter gradients for one
    /// labelled image.
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<(f64, Tensor, Vec<Tensor>)> {
        let trace = self.forward_trace(image)?;
        let (loss, logit_grad) = cross_entropy(&trace.output, label)?;
        let (grads, _) = self.backward(&trace, &logit_grad, false)?;
        Ok((loss, trace.output, grads))
    }
}

/// Per-layer inputs recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    /// Signature of the active ReLU units and pooling argmaxes. Two forward
    /// passes with the same pattern lie in the same linear region.
    pub fn pattern(&self, spec: &ModelSpec) -> u64 {
        let mut h = PatternHasher::new();
        for (layer, input) in spec.layers.iter().zip(&self.inputs) {
            match layer {
                LayerSpec::Relu => {
                    for chunk in input.data().chunks(64) {
                        let mut bits = 0u64;
                        for (b, &v) in chunk.iter().enumerate() {
                            if v > 0.0 {
                                bits |= 1 << b;
                            }
                        }
                        h.write(bits);
                    }
                }
                LayerSpec::MaxPool2 => {
                    let (idx, _) = layers::pool_argmax(input).expect("pool input validated");
                    for i in idx {
                        h.write(i as u64);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

/// He-uniform initialisation: weights drawn from `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`, biases zero. Draws are taken in parameter order,
/// row-major, from a single [`Rng`] seeded with `seed`.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> ModelWeights {
    let mut rng = Rng::new(seed);
    let params = spec
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(&shape);
            }
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor::from_parts(shape, data)
        })
        .collect();
    ModelWeights {
        spec: spec.clone(),
        params,
    }
}

/// Whole network plus one labelled input, exposed for finite-difference
/// checking. The checked tensors are the image followed by every parameter.
#[derive(Debug, Clone)]
pub struct NetworkFragment {
    spec: ModelSpec,
    tensors: Vec<Tensor>,
    label: usize,
}

impl NetworkFragment {
    pub fn new(weights: &ModelWeights, image: Tensor, label: usize) -> Result<Self> {
        weights.check_input(&image)?;
        let mut tensors = vec![image];
        tensors.extend(weights.params.iter().cloned());
        Ok(NetworkFragment {
            spec: weights.spec.clone(),
            tensors,
            label,
        })
    }

    fn weights(&self) -> ModelWeights {
        ModelWeights {
            spec: self.spec.clone(),
            params: self.tensors[1..].to_vec(),
        }
    }
}

impl GradCheckable for NetworkFragment {
    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn evaluate(&self) -> Result<Probe> {
        let trace = self.weights().forward_trace(&self.tensors[0])?;
        let (loss, _) = cross_entropy(trace.output(), self.label)?;
        Ok(Probe {
            loss,
            pattern: trace.pattern(&self.spec),
        })
    }

    fn gradients(&self) -> Result<Vec<Tensor>> {
        let weights = self.weights();
        let trace = weights.forward_trace(&self.tensors[0])?;
        let (_, logit_grad) = cross_entropy(trace.output(), self.label)?;
        let (grads, input_grad) = weights.backward(&trace, &logit_grad, true)?;
        let mut all = vec![input_grad.expect("requested")];
        all.extend(grads);
        Ok(all)
    }
}

/// Gradient check of a freshly initialised network on a uniform random
/// image. Weights, image, label and the sampled entries all derive from
/// `seed`; `max_entries_per_tensor` bounds the cost on large layers.
pub fn random_network_gradcheck(spec: &ModelSpec, seed: u64, max_entries_per_tensor: Option<usize>) -> Result<GradcheckReport> {
    let weights = init_weights(spec, seed);
    let mut rng = Rng::new(seed.wrapping_add(1));
    let [c, h, w] = spec.input_shape();
    let image = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.next_f64()).collect())?;
    let label = rng.below(2) as usize;
    let mut fragment = NetworkFragment::new(&weights, image, label)?;
    let options = GradcheckOptions {
        max_entries_per_tensor,
        seed: seed.wrapping_add(2),
        ..GradcheckOptions::default()
    };
    finite_difference_gradcheck(&mut fragment, &options)
}

/// A single dense layer with objective `sum(c * y)` for fixed coefficients
/// `c`. Linear, so central differences are exact up to rounding.
#[derive(Debug, Clone)]
pub struct DenseFragment {
    tensors: Vec<Tensor>,
    coefficients: Tensor,
}

impl DenseFragment {
    /// `tensors` are `[input, weights, bias]`.
    pub fn new(input: Tensor, weights: Tensor, bias: Tensor, coefficients: Tensor) -> Result<Self> {
        let y = layers::dense_forward(&input, &weights, &bias)?;
        y.same_shape(&coefficients, "dense objective coefficients")?;
        Ok(DenseFragment {
            tensors: vec![input, weights, bias],
            coefficients,
        })
    }
}

impl GradCheckable for DenseFragment {
    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn evaluate(&self) -> Result<Probe> {
        let y = layers::dense_forward(&self.tensors[0], &self.tensors[1], &self.tensors[2])?;
        let loss = y.data().iter().zip(self.coefficients.data()).map(|(a, b)| a * b).sum();
        Ok(Probe { loss, pattern: 0 })
    }

    fn gradients(&self) -> Result<Vec<Tensor>> {
        let g = layers::dense_backward(&self.tensors[0], &self.tensors[1], &self.tensors[2], &self.coefficients)?;
        let mut all = vec![g.input_grad];
        all.extend(g.param_grads);
        Ok(all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pedestrian_architecture() {
        let spec = build_pedestrian_net();
        let convs: Vec<_> = spec.conv_layers().collect();
        assert_eq!(convs.len(), 2);
        for c in convs {
            assert!(matches!(c, LayerSpec::Conv { stride: 1, padding: 1, .. }));
        }
        let shapes = spec.param_shapes();
        assert_eq!(shapes[4], vec![2, 16 * 32 * 16]);
        assert_eq!(shapes[4][1], 8192);
    }

    #[test]
    fn eye_architecture() {
        let spec = build_eye_net();
        let convs: Vec<_> = spec.conv_layers().collect();
        assert_eq!(convs.len(), 1);
        assert!(matches!(convs[0], LayerSpec::Conv { stride: 1, padding: 1, .. }));
        assert_eq!(spec.param_shapes()[2], vec![2, 1152]);
    }

    #[test]
    fn zero_weights_give_even_scores() {
        for spec in [build_pedestrian_net(), build_eye_net()] {
            let [c, h, w] = spec.input_shape();
            let w0 = ModelWeights::zeros(spec);
            let p = w0.predict(&Tensor::zeros(&[c, h, w])).unwrap();
            assert_eq!(p.data(), &[0.5, 0.5]);
            let p = w0.predict(&Tensor::filled(&[c, h, w], 0.7)).unwrap();
            assert_eq!(p.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = build_eye_net();
        let a = init_weights(&spec, 11);
        let b = init_weights(&spec, 11);
        assert_eq!(a, b);
        assert_ne!(a, init_weights(&spec, 12));
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.params()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(a.params()[1].data().iter().all(|&v| v == 0.0));
        assert!(a.params()[3].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_rejects_wrong_shape() {
        let w = init_weights(&build_eye_net(), 1);
        assert!(matches!(w.predict(&Tensor::zeros(&[1, 24, 23])), Err(Error::Dimension(_))));
    }

    #[test]
    fn predict_scores_sum_to_one() {
        let w = init_weights(&build_eye_net(), 4);
        let mut rng = Rng::new(2);
        for _ in 0..10 {
            let img = Tensor::new(vec![1, 24, 24], (0..576).map(|_| rng.next_f64()).collect()).unwrap();
            let p = w.predict(&img).unwrap();
            assert!((p.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn spec_rejects_inconsistent_chain() {
        use LayerSpec::*;
        assert!(ModelSpec::new("bad", [1, 5, 5], vec![MaxPool2, Flatten, Dense { outputs: 2 }, Softmax]).is_err());
        assert!(ModelSpec::new("bad", [1, 4, 4], vec![Flatten, Dense { outputs: 3 }, Softmax]).is_err());
        assert!(ModelSpec::new("bad", [1, 4, 4], vec![Flatten, Dense { outputs: 2 }]).is_err());
    }

    #[test]
    fn expect_model_reports_mismatch() {
        let w = ModelWeights::zeros(build_eye_net());
        assert!(w.expect_model(EYE).is_ok());
        assert!(matches!(w.expect_model(PEDESTRIAN), Err(Error::SpecMismatch { .. })));
    }
}
