//! Small models with closed-form gradients.
//!
//! Parameters are stored flat. Layout, layer by layer: the weight matrix
//! (`output × input`, row-major) followed by its bias vector.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::numerics::ParamVector;

/// Denominator floor for [`fd_check`]; coordinates whose gradients are
/// smaller than this are compared on an absolute scale.
pub const FD_REL_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    LinearRegression,
    SoftmaxClassifier,
    /// One hidden `tanh` layer followed by a softmax output.
    Mlp1h,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LinearRegression => "linear_regression",
            ModelKind::SoftmaxClassifier => "softmax_classifier",
            ModelKind::Mlp1h => "mlp1h",
        }
    }

    pub fn is_classifier(self) -> bool {
        !matches!(self, ModelKind::LinearRegression)
    }
}

/// A contiguous `rows × cols` block of the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl BlockShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Biases and single-row/column weights are treated as vectors.
    pub fn is_matrix(&self) -> bool {
        self.rows > 1 && self.cols > 1
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Supervision attached to a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Row-major `n × output_dim` regression targets.
    Values {
        data: Vec<f64>,
        dim: usize,
    },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values { data, dim } => data.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn target(&self, i: usize) -> Target<'_> {
        match self {
            Labels::Classes(c) => Target::Class(c[i]),
            Labels::Values { data, dim } => Target::Values(&data[i * dim..(i + 1) * dim]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f64]),
}

/// Anything that can be iterated as `(input, target)` pairs in a fixed order.
pub trait Samples {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input(&self, i: usize) -> &[f64];
    fn target(&self, i: usize) -> Target<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// An owned minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Labels,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Labels) -> Result<Self> {
        if input_dim == 0 || !inputs.len().is_multiple_of(input_dim) {
            return Err(Error::invalid("batch inputs not a multiple of input_dim"));
        }
        let n = inputs.len() / input_dim;
        if n == 0 {
            return Err(Error::invalid("batch must contain at least one sample"));
        }
        check_dim(n, labels.len())?;
        Ok(Self {
            inputs,
            input_dim,
            labels,
        })
    }
}

impl Samples for Batch {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn target(&self, i: usize) -> Target<'_> {
        self.labels.target(i)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    kind: ModelKind,
    input_dim: usize,
    output_dim: usize,
    hidden_dim: usize,
    bias: bool,
    blocks: Vec<BlockShape>,
    param_dim: usize,
}

impl Model {
    pub fn linear_regression(input_dim: usize, output_dim: usize) -> Self {
        Self::build(ModelKind::LinearRegression, input_dim, output_dim, 0, true)
    }

    pub fn softmax_classifier(input_dim: usize, classes: usize) -> Self {
        Self::build(ModelKind::SoftmaxClassifier, input_dim, classes, 0, true)
    }

    pub fn mlp1h(input_dim: usize, hidden_dim: usize, classes: usize) -> Self {
        Self::build(ModelKind::Mlp1h, input_dim, classes, hidden_dim, true)
    }

    /// Drops the bias vectors of a linear model. Hidden layers keep theirs.
    pub fn without_bias(self) -> Self {
        Self::build(
            self.kind,
            self.input_dim,
            self.output_dim,
            self.hidden_dim,
            false,
        )
    }

    fn build(
        kind: ModelKind,
        input_dim: usize,
        output_dim: usize,
        hidden_dim: usize,
        bias: bool,
    ) -> Self {
        assert!(
            input_dim > 0 && output_dim > 0,
            "model dims must be positive"
        );
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |rows: usize, cols: usize| {
            blocks.push(BlockShape { rows, cols, offset });
            offset += rows * cols;
        };
        match kind {
            ModelKind::LinearRegression | ModelKind::SoftmaxClassifier => {
                push(output_dim, input_dim);
                if bias {
                    push(output_dim, 1);
                }
            }
            ModelKind::Mlp1h => {
                assert!(hidden_dim > 0, "mlp1h needs a hidden layer");
                push(hidden_dim, input_dim);
                push(hidden_dim, 1);
                push(output_dim, hidden_dim);
                if bias {
                    push(output_dim, 1);
                }
            }
        }
        Self {
            kind,
            input_dim,
            output_dim,
            hidden_dim,
            bias,
            blocks,
            param_dim: offset,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn layer_shapes(&self) -> &[BlockShape] {
        &self.blocks
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) for every parameter, drawn in flat order.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut data = Vec::with_capacity(self.param_dim);
        for (i, block) in self.blocks.iter().enumerate() {
            // A bias block shares the fan-in of the weight block before it.
            let fan_in = if block.cols == 1 && i > 0 {
                self.blocks[i - 1].cols
            } else {
                block.cols
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            data.extend((0..block.len()).map(|_| rng.random_range(-bound..=bound)));
        }
        ParamVector::from_vec_unchecked(data)
    }

    fn check(&self, theta: &ParamVector, samples: &dyn Samples) -> Result<()> {
        check_dim(self.param_dim, theta.dim())?;
        check_dim(self.input_dim, samples.input_dim())?;
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    /// Mean loss over `samples`.
    pub fn forward_loss(&self, theta: &ParamVector, samples: &dyn Samples) -> Result<f64> {
        self.check(theta, samples)?;
        let mut scratch = Scratch::new(self);
        let mut total = 0.0;
        for i in 0..samples.len() {
            total += self.sample(
                theta.as_slice(),
                samples.input(i),
                samples.target(i),
                None,
                &mut scratch,
            )?;
        }
        Ok(total / samples.len() as f64)
    }

    /// Gradient of [`Model::forward_loss`], accumulated in sample order and then
    /// divided by the batch size.
    pub fn gradient(&self, theta: &ParamVector, samples: &dyn Samples) -> Result<ParamVector> {
        self.loss_and_gradient(theta, samples).map(|(_, g)| g)
    }

    pub fn loss_and_gradient(
        &self,
        theta: &ParamVector,
        samples: &dyn Samples,
    ) -> Result<(f64, ParamVector)> {
        self.check(theta, samples)?;
        let mut scratch = Scratch::new(self);
        let mut grad = vec![0.0; self.param_dim];
        let mut total = 0.0;
        for i in 0..samples.len() {
            total += self.sample(
                theta.as_slice(),
                samples.input(i),
                samples.target(i),
                Some(&mut grad),
                &mut scratch,
            )?;
        }
        let n = samples.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        let grad = ParamVector::from_vec_unchecked(grad).ensure_finite("gradient")?;
        Ok((total / n, grad))
    }

    /// Mean loss and, for classifiers, the fraction of correctly ranked samples.
    pub fn evaluate(&self, theta: &ParamVector, samples: &dyn Samples) -> Result<Evaluation> {
        self.check(theta, samples)?;
        let mut scratch = Scratch::new(self);
        let mut total = 0.0;
        let mut correct = 0usize;
        for i in 0..samples.len() {
            let target = samples.target(i);
            total += self.sample(
                theta.as_slice(),
                samples.input(i),
                target,
                None,
                &mut scratch,
            )?;
            if let Target::Class(c) = target {
                if argmax(&scratch.out) == c {
                    correct += 1;
                }
            }
        }
        let n = samples.len() as f64;
        Ok(Evaluation {
            loss: total / n,
            accuracy: self.kind.is_classifier().then(|| correct as f64 / n),
        })
    }

    /// Forward pass for one sample; adds its (unnormalised) gradient to `grad`.
    /// Leaves the output activations in `scratch.out`.
    fn sample(
        &self,
        theta: &[f64],
        x: &[f64],
        target: Target<'_>,
        grad: Option<&mut [f64]>,
        s: &mut Scratch,
    ) -> Result<f64> {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::SoftmaxClassifier => {
                let w = self.blocks[0];
                let b = self.bias.then(|| self.blocks[1]);
                affine(theta, w, b, x, &mut s.out);
                let loss = self.head(target, s)?;
                if let Some(grad) = grad {
                    backprop_affine(grad, w, b, x, &s.dout);
                }
                Ok(loss)
            }
            ModelKind::Mlp1h => {
                let (w1, b1, w2) = (self.blocks[0], self.blocks[1], self.blocks[2]);
                let b2 = self.bias.then(|| self.blocks[3]);
                affine(theta, w1, Some(b1), x, &mut s.hidden);
                for h in &mut s.hidden {
                    *h = h.tanh();
                }
                affine(theta, w2, b2, &s.hidden, &mut s.out);
                let loss = self.head(target, s)?;
                if let Some(grad) = grad {
                    backprop_affine(grad, w2, b2, &s.hidden, &s.dout);
                    let w2v = &theta[w2.range()];
                    for (j, dh) in s.dhidden.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (o, d) in s.dout.iter().enumerate() {
                            acc += w2v[o * w2.cols + j] * d;
                        }
                        let h = s.hidden[j];
                        *dh = acc * (1.0 - h * h);
                    }
                    backprop_affine(grad, w1, Some(b1), x, &s.dhidden);
                }
                Ok(loss)
            }
        }
    }

    /// Applies the loss head to `s.out`, writing d(loss)/d(out) to `s.dout`.
    fn head(&self, target: Target<'_>, s: &mut Scratch) -> Result<f64> {
        match (self.kind.is_classifier(), target) {
            (true, Target::Class(c)) => {
                if c >= self.output_dim {
                    return Err(Error::invalid(format!(
                        "class {c} out of range for {} outputs",
                        self.output_dim
                    )));
                }
                let max = s.out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (d, &o) in s.dout.iter_mut().zip(&s.out) {
                    *d = (o - max).exp();
                    z += *d;
                }
                for d in &mut s.dout {
                    *d /= z;
                }
                let loss = max + z.ln() - s.out[c];
                s.dout[c] -= 1.0;
                Ok(loss)
            }
            (false, Target::Values(t)) => {
                check_dim(self.output_dim, t.len())?;
                let mut loss = 0.0;
                for ((d, &o), &t) in s.dout.iter_mut().zip(&s.out).zip(t) {
                    *d = o - t;
                    loss += 0.5 * *d * *d;
                }
                Ok(loss)
            }
            _ => Err(Error::invalid(format!(
                "{} cannot be trained on these targets",
                self.kind.name()
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

struct Scratch {
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
    out: Vec<f64>,
    dout: Vec<f64>,
}

impl Scratch {
    fn new(model: &Model) -> Self {
        Self {
            hidden: vec![0.0; model.hidden_dim],
            dhidden: vec![0.0; model.hidden_dim],
            out: vec![0.0; model.output_dim],
            dout: vec![0.0; model.output_dim],
        }
    }
}

fn affine(theta: &[f64], w: BlockShape, b: Option<BlockShape>, x: &[f64], out: &mut [f64]) {
    let wv = &theta[w.range()];
    for (o, y) in out.iter_mut().enumerate() {
        let row = &wv[o * w.cols..(o + 1) * w.cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        if let Some(b) = b {
            acc += theta[b.offset + o];
        }
        *y = acc;
    }
}

fn backprop_affine(
    grad: &mut [f64],
    w: BlockShape,
    b: Option<BlockShape>,
    x: &[f64],
    dout: &[f64],
) {
    let gw = &mut grad[w.range()];
    for (o, &d) in dout.iter().enumerate() {
        for (g, &xi) in gw[o * w.cols..(o + 1) * w.cols].iter_mut().zip(x) {
            *g += d * xi;
        }
    }
    if let Some(b) = b {
        for (g, &d) in grad[b.range()].iter_mut().zip(dout) {
            *g += d;
        }
    }
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

pub fn forward_loss(model: &Model, theta: &ParamVector, batch: &dyn Samples) -> Result<f64> {
    model.forward_loss(theta, batch)
}

pub fn gradient(model: &Model, theta: &ParamVector, batch: &dyn Samples) -> Result<ParamVector> {
    model.gradient(theta, batch)
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central finite differences with step `eps`.
pub fn fd_check(model: &Model, theta: &ParamVector, batch: &dyn Samples, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = model.gradient(theta, batch)?;
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.dim() {
        let orig = theta[i];
        probe.as_mut_slice()[i] = orig + eps;
        let up = model.forward_loss(&probe, batch)?;
        probe.as_mut_slice()[i] = orig - eps;
        let down = model.forward_loss(&probe, batch)?;
        probe.as_mut_slice()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(FD_REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
