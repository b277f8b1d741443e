//! Concept predictor: a small MLP trained with manual backpropagation.
//!
//! The output layer emits one logit per concept column. Independent concepts
//! pass through a sigmoid; mutually exclusive groups through a softmax over
//! the group's columns. Losses use natural logs (probabilities clamped to
//! [1e-12, 1-1e-12] inside the logs only; gradients use the raw values).
//! Training is plain Adam over shuffled mini-batches, bit-reproducible for a
//! fixed seed because every random draw comes from named substreams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng;
use crate::schema::ConceptSchema;

pub(crate) const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation value.
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// One dense layer: `w` is out x in, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// [d, hidden..., k]
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
    /// Fingerprint of the concept schema the model was trained against.
    pub schema_fingerprint: u64,
}

/// Linear map from concept probabilities to class logits (joint mode only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    /// r x k, row-major.
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Hidden-layer shape of the concept predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            hidden: vec![64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Weight of the concept loss inside the joint objective.
    pub lambda_c: f64,
    /// Joint training fine-tunes from the independent solution unless this
    /// is turned off.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            weight_decay: 1e-5,
            lambda_c: 1.0,
            warm_start: true,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 || self.weight_decay.is_nan() {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        if self.lambda_c < 0.0 || self.lambda_c.is_nan() {
            return Err(Error::InvalidArgument("lambda_c must be >= 0".into()));
        }
        Ok(())
    }
}

/// Serialized predictor: the MLP plus, for joint models, the label head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorBundle {
    pub params: MlpParams,
    pub head: Option<LinearHead>,
}

impl PredictorBundle {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("predictor serializes")
    }

    pub fn from_json(json: &str) -> Result<PredictorBundle> {
        let bundle: PredictorBundle = serde_json::from_str(json)
            .map_err(|e| Error::Dataset(format!("unparseable predictor JSON: {e}")))?;
        bundle.params.validate()?;
        Ok(bundle)
    }
}

impl MlpParams {
    fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Dataset("predictor needs at least one layer".into()));
        }
        if self.layers.len() != self.layer_sizes.len() - 1 {
            return Err(Error::Dataset(format!(
                "{} layers for {} layer sizes",
                self.layers.len(),
                self.layer_sizes.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let (inp, out) = (self.layer_sizes[i], self.layer_sizes[i + 1]);
            if layer.w.rows() != out || layer.w.cols() != inp || layer.b.len() != out {
                return Err(Error::Dataset(format!(
                    "layer {i} shape {}x{} does not map {inp} -> {out}",
                    layer.w.rows(),
                    layer.w.cols()
                )));
            }
            if layer.w.data().iter().chain(&layer.b).any(|v| !v.is_finite()) {
                return Err(Error::Dataset(format!("layer {i} holds non-finite values")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty sizes")
    }

    /// Raw concept logits for every row of `x` (n x k).
    pub fn logits(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols(), self.input_dim(), "input width mismatch");
        let mut a = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(&a, layer);
            if i + 1 < self.layers.len() {
                for v in z.data_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            a = z;
        }
        a
    }
}

/// `a` (n x in) through `w` (out x in) plus bias: n x out.
fn affine(a: &Matrix, layer: &Layer) -> Matrix {
    let n = a.rows();
    let (out, inp) = (layer.w.rows(), layer.w.cols());
    let mut z = Matrix::zeros(n, out);
    for i in 0..n {
        let row = a.row(i);
        let zi = z.row_mut(i);
        for (o, zo) in zi.iter_mut().enumerate() {
            let wrow = layer.w.row(o);
            let mut acc = layer.b[o];
            for j in 0..inp {
                acc += wrow[j] * row[j];
            }
            *zo = acc;
        }
    }
    z
}

/// Xavier-uniform initialization; biases start at zero.
pub fn init_params(
    input_dim: usize,
    schema: &ConceptSchema,
    arch: &MlpArch,
    seed: u64,
) -> MlpParams {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(&arch.hidden);
    sizes.push(schema.k());
    let mut rng = rng::substream(seed, "mlp.init");
    let layers = sizes
        .windows(2)
        .map(|pair| {
            let (inp, out) = (pair[0], pair[1]);
            let limit = (6.0 / (inp + out) as f64).sqrt();
            let data: Vec<f64> = (0..out * inp)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            Layer {
                w: Matrix::from_vec(out, inp, data),
                b: vec![0.0; out],
            }
        })
        .collect();
    MlpParams {
        layer_sizes: sizes,
        activation: arch.activation,
        layers,
        schema_fingerprint: schema.fingerprint(),
    }
}

fn init_head(k: usize, n_classes: usize, seed: u64) -> LinearHead {
    let mut rng = rng::substream(seed, "mlp.head.init");
    let limit = (6.0 / (k + n_classes) as f64).sqrt();
    let data: Vec<f64> = (0..n_classes * k)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    LinearHead {
        w: Matrix::from_vec(n_classes, k, data),
        b: vec![0.0; n_classes],
    }
}

/// Sigmoid for independents, stabilized softmax within each group.
pub fn probs_from_logits(logits: &[f64], schema: &ConceptSchema) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    for &j in &schema.independents {
        p[j] = sigmoid(logits[j]);
    }
    for group in &schema.groups {
        softmax_into(logits, group, &mut p);
    }
    p
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(logits: &[f64], idx: &[usize], out: &mut [f64]) {
    let max = idx
        .iter()
        .map(|&j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &j in idx {
        let e = (logits[j] - max).exp();
        out[j] = e;
        sum += e;
    }
    for &j in idx {
        out[j] /= sum;
    }
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// Mean concept loss over the batch: binary cross-entropy summed over
/// independent concepts plus cross-entropy summed over groups, natural log.
pub fn concept_loss(params: &MlpParams, batch: &Dataset) -> f64 {
    let logits = params.logits(&batch.x);
    concept_loss_from_logits(&logits, batch)
}

fn concept_loss_from_logits(logits: &Matrix, batch: &Dataset) -> f64 {
    let schema = &batch.schema;
    let n = batch.n();
    let mut total = 0.0;
    for i in 0..n {
        let p = probs_from_logits(logits.row(i), schema);
        let c = batch.c.row(i);
        for &j in &schema.independents {
            total -= c[j] * clamped_ln(p[j]) + (1.0 - c[j]) * clamped_ln(1.0 - p[j]);
        }
        for group in &schema.groups {
            for &j in group {
                if c[j] == 1.0 {
                    total -= clamped_ln(p[j]);
                }
            }
        }
    }
    total / n as f64
}

/// Mean label cross-entropy of the linear head applied to concept
/// probabilities.
fn label_loss_from_logits(logits: &Matrix, head: &LinearHead, batch: &Dataset) -> f64 {
    let schema = &batch.schema;
    let n = batch.n();
    let mut total = 0.0;
    for i in 0..n {
        let p = probs_from_logits(logits.row(i), schema);
        let y_logits = head_logits(head, &p);
        let y_probs = softmax_vec(&y_logits);
        total -= clamped_ln(y_probs[batch.y[i]]);
    }
    total / n as f64
}

fn head_logits(head: &LinearHead, p: &[f64]) -> Vec<f64> {
    (0..head.w.rows())
        .map(|r| {
            let wrow = head.w.row(r);
            head.b[r] + wrow.iter().zip(p).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect()
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Forward pass keeping every pre-activation, for backprop.
struct ForwardTrace {
    /// activations[0] = input batch; activations[l+1] = output of layer l
    /// (post-activation for hidden layers, raw logits for the last).
    activations: Vec<Matrix>,
    /// Pre-activation values per hidden layer.
    pre: Vec<Matrix>,
}

fn forward_trace(params: &MlpParams, x: &Matrix) -> ForwardTrace {
    let mut activations = vec![x.clone()];
    let mut pre = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(activations.last().expect("nonempty"), layer);
        if i + 1 < params.layers.len() {
            pre.push(z.clone());
            let mut a = z;
            for v in a.data_mut() {
                *v = params.activation.apply(*v);
            }
            activations.push(a);
        } else {
            activations.push(z);
        }
    }
    ForwardTrace { activations, pre }
}

/// Flat gradient buffers mirroring MlpParams / LinearHead layout.
struct Grads {
    layers: Vec<Layer>,
    head: Option<LinearHead>,
}

fn zero_grads(params: &MlpParams, head: Option<&LinearHead>) -> Grads {
    Grads {
        layers: params
            .layers
            .iter()
            .map(|l| Layer {
                w: Matrix::zeros(l.w.rows(), l.w.cols()),
                b: vec![0.0; l.b.len()],
            })
            .collect(),
        head: head.map(|h| LinearHead {
            w: Matrix::zeros(h.w.rows(), h.w.cols()),
            b: vec![0.0; h.b.len()],
        }),
    }
}

/// Computes the batch loss and fills `grads`. The joint objective is
/// `label_loss + lambda_c * concept_loss`; independent training is the
/// special case with no head, minimizing the concept loss alone.
fn loss_and_grads(
    params: &MlpParams,
    head: Option<&LinearHead>,
    batch: &Dataset,
    lambda_c: f64,
    grads: &mut Grads,
) -> f64 {
    let schema = &batch.schema;
    let n = batch.n();
    let n_f = n as f64;
    let trace = forward_trace(params, &batch.x);
    let logits = trace.activations.last().expect("has output");
    let k = schema.k();

    // d(loss)/d(concept logits), accumulated over both loss terms.
    let mut dlogits = Matrix::zeros(n, k);
    let mut loss = 0.0;

    for i in 0..n {
        let p = probs_from_logits(logits.row(i), schema);
        let c = batch.c.row(i);

        // Concept term: dL_C/dz_j = (p_j - c_j) / n for both head types.
        if lambda_c > 0.0 || head.is_none() {
            let weight = if head.is_none() { 1.0 } else { lambda_c };
            let mut sample_loss = 0.0;
            for &j in &schema.independents {
                sample_loss -=
                    c[j] * clamped_ln(p[j]) + (1.0 - c[j]) * clamped_ln(1.0 - p[j]);
            }
            for group in &schema.groups {
                for &j in group {
                    if c[j] == 1.0 {
                        sample_loss -= clamped_ln(p[j]);
                    }
                }
            }
            loss += weight * sample_loss / n_f;
            let drow = dlogits.row_mut(i);
            for j in 0..k {
                drow[j] += weight * (p[j] - c[j]) / n_f;
            }
        }

        // Label term through the head, softmax over classes.
        if let Some(head) = head {
            let y_logits = head_logits(head, &p);
            let y_probs = softmax_vec(&y_logits);
            loss -= clamped_ln(y_probs[batch.y[i]]) / n_f;

            let mut dy = y_probs;
            dy[batch.y[i]] -= 1.0;
            for v in &mut dy {
                *v /= n_f;
            }
            // Head parameter gradients: dW2 = dy^T p, db2 = dy.
            let hg = grads.head.as_mut().expect("head grads allocated");
            for (r, &dyr) in dy.iter().enumerate() {
                let grow = hg.w.row_mut(r);
                for j in 0..k {
                    grow[j] += dyr * p[j];
                }
                hg.b[r] += dyr;
            }
            // dL_Y/dp = W2^T dy, then through sigmoid/softmax into dlogits.
            let mut dp = vec![0.0; k];
            for (r, &dyr) in dy.iter().enumerate() {
                let wrow = head.w.row(r);
                for j in 0..k {
                    dp[j] += wrow[j] * dyr;
                }
            }
            let drow = dlogits.row_mut(i);
            for &j in &schema.independents {
                drow[j] += dp[j] * p[j] * (1.0 - p[j]);
            }
            for group in &schema.groups {
                let dot: f64 = group.iter().map(|&j| dp[j] * p[j]).sum();
                for &j in group {
                    drow[j] += p[j] * (dp[j] - dot);
                }
            }
        }
    }

    // Backward through the dense stack.
    let mut dz = dlogits;
    for l in (0..params.layers.len()).rev() {
        let a_prev = &trace.activations[l];
        let g = &mut grads.layers[l];
        let inp = g.w.cols();
        for i in 0..n {
            let dzi = dz.row(i);
            let ai = a_prev.row(i);
            for (o, &d) in dzi.iter().enumerate() {
                let grow = g.w.row_mut(o);
                if d != 0.0 {
                    for j in 0..inp {
                        grow[j] += d * ai[j];
                    }
                }
                g.b[o] += d;
            }
        }
        if l > 0 {
            let w = &params.layers[l].w;
            let mut da = Matrix::zeros(n, inp);
            for i in 0..n {
                let dzi = dz.row(i);
                let dai = da.row_mut(i);
                for (o, &d) in dzi.iter().enumerate() {
                    if d != 0.0 {
                        let wrow = w.row(o);
                        for j in 0..inp {
                            dai[j] += d * wrow[j];
                        }
                    }
                }
            }
            let pre = &trace.pre[l - 1];
            for i in 0..n {
                let dai = da.row_mut(i);
                let pi = pre.row(i);
                for j in 0..inp {
                    dai[j] *= params.activation.grad(pi[j]);
                }
            }
            dz = da;
        }
    }
    loss
}

/// Adam state per tensor.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, values: &mut [f64], grads: &[f64], lr: f64, t: usize) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - B1.powi(t as i32);
        let bc2 = 1.0 - B2.powi(t as i32);
        for i in 0..values.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            values[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

struct Trainer {
    weight_adam: Vec<Adam>,
    bias_adam: Vec<Adam>,
    head_w_adam: Option<Adam>,
    head_b_adam: Option<Adam>,
    t: usize,
}

impl Trainer {
    fn new(params: &MlpParams, head: Option<&LinearHead>) -> Trainer {
        Trainer {
            weight_adam: params
                .layers
                .iter()
                .map(|l| Adam::new(l.w.data().len()))
                .collect(),
            bias_adam: params.layers.iter().map(|l| Adam::new(l.b.len())).collect(),
            head_w_adam: head.map(|h| Adam::new(h.w.data().len())),
            head_b_adam: head.map(|h| Adam::new(h.b.len())),
            t: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut MlpParams,
        head: Option<&mut LinearHead>,
        grads: &mut Grads,
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let g = &mut grads.layers[l];
            // Coupled decay on weight matrices only; biases stay unpenalized.
            if weight_decay > 0.0 {
                for (gv, wv) in g.w.data_mut().iter_mut().zip(layer.w.data()) {
                    *gv += weight_decay * wv;
                }
            }
            self.weight_adam[l].step(layer.w.data_mut(), g.w.data(), lr, self.t);
            self.bias_adam[l].step(&mut layer.b, &g.b, lr, self.t);
        }
        if let Some(head) = head {
            let hg = grads.head.as_mut().expect("head grads");
            if weight_decay > 0.0 {
                for (gv, wv) in hg.w.data_mut().iter_mut().zip(head.w.data()) {
                    *gv += weight_decay * wv;
                }
            }
            self.head_w_adam
                .as_mut()
                .expect("head adam")
                .step(head.w.data_mut(), hg.w.data(), lr, self.t);
            self.head_b_adam
                .as_mut()
                .expect("head adam")
                .step(&mut head.b, &hg.b, lr, self.t);
        }
    }
}

fn run_epochs(
    params: &mut MlpParams,
    mut head: Option<&mut LinearHead>,
    train: &Dataset,
    hyper: &TrainHyper,
    shuffle_label: &str,
) -> Result<()> {
    let n = train.n();
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::substream(hyper.seed, shuffle_label);
    let mut trainer = Trainer::new(params, head.as_deref());
    let lambda = hyper.lambda_c;
    for epoch in 0..hyper.epochs {
        // Fisher-Yates from the named substream, stable across platforms.
        for i in (1..n).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(hyper.batch_size) {
            let batch = train.subset(chunk);
            let mut grads = zero_grads(params, head.as_deref());
            let loss = loss_and_grads(params, head.as_deref(), &batch, lambda, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            trainer.apply(params, head.as_deref_mut(), &mut grads, hyper.learning_rate, hyper.weight_decay);
        }
    }
    Ok(())
}

/// Trains the concept predictor alone, minimizing the concept loss.
pub fn train_independent(train: &Dataset, arch: &MlpArch, hyper: &TrainHyper) -> Result<MlpParams> {
    hyper.validate()?;
    let mut params = init_params(train.x.cols(), &train.schema, arch, hyper.seed);
    run_epochs(&mut params, None, train, hyper, "mlp.shuffle")?;
    Ok(params)
}

/// Joint training: label cross-entropy through a linear head over concept
/// probabilities, plus `lambda_c` times the concept loss. Warm-starts from
/// the independent solution unless `hyper.warm_start` is off.
pub fn train_joint(
    train: &Dataset,
    arch: &MlpArch,
    hyper: &TrainHyper,
) -> Result<(MlpParams, LinearHead)> {
    hyper.validate()?;
    let mut params = if hyper.warm_start {
        train_independent(train, arch, hyper)?
    } else {
        init_params(train.x.cols(), &train.schema, arch, hyper.seed)
    };
    let mut head = init_head(train.schema.k(), train.schema.n_classes(), hyper.seed);
    run_epochs(&mut params, Some(&mut head), train, hyper, "mlp.joint.shuffle")?;
    Ok((params, head))
}

/// Mutable reference to the `i`-th parameter under the flat ordering
/// (per layer: weights then biases; then head weights and biases).
fn param_slot<'a>(
    params: &'a mut MlpParams,
    head: &'a mut Option<LinearHead>,
    mut i: usize,
) -> &'a mut f64 {
    for layer in &mut params.layers {
        let w = layer.w.data_mut();
        if i < w.len() {
            return &mut w[i];
        }
        i -= w.len();
        if i < layer.b.len() {
            return &mut layer.b[i];
        }
        i -= layer.b.len();
    }
    let h = head.as_mut().expect("parameter index within range");
    let w = h.w.data_mut();
    if i < w.len() {
        return &mut w[i];
    }
    i -= w.len();
    &mut h.b[i]
}

fn flatten_grads(grads: &Grads) -> Vec<f64> {
    let mut flat = Vec::new();
    for layer in &grads.layers {
        flat.extend_from_slice(layer.w.data());
        flat.extend_from_slice(&layer.b);
    }
    if let Some(h) = &grads.head {
        flat.extend_from_slice(h.w.data());
        flat.extend_from_slice(&h.b);
    }
    flat
}

/// Max relative error between analytic and central-finite-difference
/// gradients of the active loss (concept loss when `head` is absent, joint
/// loss otherwise) over every parameter. Intended for small batches.
pub fn gradient_check(
    params: &MlpParams,
    head: Option<&LinearHead>,
    batch: &Dataset,
    lambda_c: f64,
) -> f64 {
    assert!(batch.n() <= 8, "gradient check is for small batches");
    const STEP: f64 = 1e-5;
    let mut params = params.clone();
    let mut head = head.cloned();

    let mut grads = zero_grads(&params, head.as_ref());
    loss_and_grads(&params, head.as_ref(), batch, lambda_c, &mut grads);
    let analytic = flatten_grads(&grads);

    fn loss_of(
        params: &MlpParams,
        head: Option<&LinearHead>,
        batch: &Dataset,
        lambda_c: f64,
    ) -> f64 {
        let logits = params.logits(&batch.x);
        let concept = concept_loss_from_logits(&logits, batch);
        match head {
            None => concept,
            Some(h) => label_loss_from_logits(&logits, h, batch) + lambda_c * concept,
        }
    }

    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        let original = *param_slot(&mut params, &mut head, i);
        *param_slot(&mut params, &mut head, i) = original + STEP;
        let up = loss_of(&params, head.as_ref(), batch, lambda_c);
        *param_slot(&mut params, &mut head, i) = original - STEP;
        let down = loss_of(&params, head.as_ref(), batch, lambda_c);
        *param_slot(&mut params, &mut head, i) = original;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (g - numeric).abs() / f64::max(1.0, g.abs() + numeric.abs());
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Hard concept values from probabilities: independents threshold strictly
/// above 0.5; groups one-hot their argmax (ties to the lowest index).
pub fn binarize_row(probs: &[f64], schema: &ConceptSchema) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    for &j in &schema.independents {
        out[j] = if probs[j] > 0.5 { 1.0 } else { 0.0 };
    }
    for group in &schema.groups {
        let mut best = group[0];
        for &j in group {
            if probs[j] > probs[best] {
                best = j;
            }
        }
        out[best] = 1.0;
    }
    out
}

pub fn binarize_matrix(probs: &Matrix, schema: &ConceptSchema) -> Matrix {
    let rows: Vec<Vec<f64>> = (0..probs.rows())
        .map(|i| binarize_row(probs.row(i), schema))
        .collect();
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Dataset;

    fn schema_1ind() -> ConceptSchema {
        ConceptSchema::new(
            vec!["c0".into()],
            vec![],
            vec![0],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn schema_group3() -> ConceptSchema {
        ConceptSchema::new(
            vec!["g0".into(), "g1".into(), "g2".into()],
            vec![vec![0, 1, 2]],
            vec![],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn zeroed(params: &mut MlpParams) {
        for layer in &mut params.layers {
            for v in layer.w.data_mut() {
                *v = 0.0;
            }
            for v in &mut layer.b {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn zero_weights_give_symmetric_losses() {
        let schema = schema_1ind();
        let x = Matrix::from_rows(&[vec![0.3, -0.4]]);
        let c = Matrix::from_rows(&[vec![1.0]]);
        let ds = Dataset::new(x, c, vec![0], vec![0], schema.clone()).unwrap();
        let mut params = init_params(2, &schema, &MlpArch::default(), 0);
        zeroed(&mut params);
        assert!((concept_loss(&params, &ds) - 0.5f64.ln().abs()).abs() < 1e-12);

        let schema = schema_group3();
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let c = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]);
        let ds = Dataset::new(x, c, vec![1], vec![0], schema.clone()).unwrap();
        let mut params = init_params(2, &schema, &MlpArch::default(), 0);
        zeroed(&mut params);
        assert!((concept_loss(&params, &ds) - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_loss_on_a_fixed_linear_model() {
        // Single linear layer, d=1, one independent concept:
        // z = 2x - 1; rows x=1 (c=1) and x=0 (c=0).
        let schema = schema_1ind();
        let x = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        let c = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        let ds = Dataset::new(x, c, vec![0, 0], vec![0, 1], schema.clone()).unwrap();
        let params = MlpParams {
            layer_sizes: vec![1, 1],
            activation: Activation::Relu,
            layers: vec![Layer {
                w: Matrix::from_vec(1, 1, vec![2.0]),
                b: vec![-1.0],
            }],
            schema_fingerprint: schema.fingerprint(),
        };
        let p1 = 1.0 / (1.0 + (-1.0f64).exp());
        let p2 = 1.0 / (1.0 + (1.0f64).exp());
        let expected = (-(p1.ln()) - (1.0 - p2).ln()) / 2.0;
        assert!((concept_loss(&params, &ds) - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_probabilities_are_uniform() {
        let schema = schema_group3();
        let mut params = init_params(4, &schema, &MlpArch::default(), 0);
        zeroed(&mut params);
        let x = Matrix::from_rows(&[vec![0.5, -2.0, 3.0, 0.0]]);
        let logits = params.logits(&x);
        let p = probs_from_logits(logits.row(0), &schema);
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    fn separable_toy(n: usize, seed: u64) -> Dataset {
        let mut rng = crate::rng::substream(seed, "test.toy");
        let schema = schema_1ind();
        let mut xs = Vec::new();
        let mut cs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let c: f64 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            let noise: f64 = rng.gen_range(-0.2..0.2);
            xs.push(vec![2.0 * c - 1.0 + noise]);
            cs.push(vec![c]);
            ys.push(c as usize);
        }
        let ids = (0..n as u64).collect();
        Dataset::new(Matrix::from_rows(&xs), Matrix::from_rows(&cs), ys, ids, schema).unwrap()
    }

    /// Plain logistic regression on the same data, as an independent check
    /// that the task is learnable to 100% training accuracy.
    fn logistic_oracle_accuracy(ds: &Dataset) -> f64 {
        let n = ds.n();
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..2000 {
            let (mut gw, mut gb) = (0.0, 0.0);
            for i in 0..n {
                let z = w * ds.x.get(i, 0) + b;
                let p = sigmoid(z);
                let d = p - ds.c.get(i, 0);
                gw += d * ds.x.get(i, 0) / n as f64;
                gb += d / n as f64;
            }
            w -= 0.5 * gw;
            b -= 0.5 * gb;
        }
        let hits = (0..n)
            .filter(|&i| ((sigmoid(w * ds.x.get(i, 0) + b) > 0.5) as usize as f64) == ds.c.get(i, 0))
            .count();
        hits as f64 / n as f64
    }

    fn concept_train_accuracy(params: &MlpParams, ds: &Dataset) -> f64 {
        let logits = params.logits(&ds.x);
        let mut hits = 0;
        for i in 0..ds.n() {
            let p = probs_from_logits(logits.row(i), &ds.schema);
            let hard = binarize_row(&p, &ds.schema);
            if hard == ds.c.row(i) {
                hits += 1;
            }
        }
        hits as f64 / ds.n() as f64
    }

    #[test]
    fn separable_concept_reaches_the_logistic_oracle() {
        let ds = separable_toy(200, 11);
        assert_eq!(logistic_oracle_accuracy(&ds), 1.0);
        let hyper = TrainHyper {
            epochs: 30,
            ..TrainHyper::default()
        };
        let params = train_independent(&ds, &MlpArch::default(), &hyper).unwrap();
        assert_eq!(concept_train_accuracy(&params, &ds), 1.0);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = separable_toy(64, 3);
        let hyper = TrainHyper {
            epochs: 5,
            seed: 9,
            ..TrainHyper::default()
        };
        let a = train_independent(&ds, &MlpArch::default(), &hyper).unwrap();
        let b = train_independent(&ds, &MlpArch::default(), &hyper).unwrap();
        assert_eq!(a, b);
        let (ja, ha) = train_joint(&ds, &MlpArch::default(), &hyper).unwrap();
        let (jb, hb) = train_joint(&ds, &MlpArch::default(), &hyper).unwrap();
        assert_eq!(ja, jb);
        assert_eq!(ha, hb);
    }

    #[test]
    fn zero_epochs_is_rejected_and_divergence_is_reported() {
        let ds = separable_toy(16, 5);
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        assert!(train_independent(&ds, &MlpArch::default(), &hyper).is_err());

        // Adam moves each parameter by about one learning rate per step, so a
        // pathological rate launches every weight to ~1e300 after the first
        // single-row batch. The second row's forward pass then overflows, the
        // max-stabilized group softmax turns the non-finite logits into NaN
        // probabilities, and training must stop with a divergence error
        // instead of continuing on NaN parameters.
        let schema = schema_group3();
        let x = Matrix::from_rows(&[vec![1e10, -1e10], vec![-1e10, 1e10]]);
        let c = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let bad = Dataset::new(x, c, vec![0, 0], vec![0, 1], schema).unwrap();
        let hyper = TrainHyper {
            batch_size: 1,
            learning_rate: 1e300,
            ..TrainHyper::default()
        };
        let err = train_independent(&bad, &MlpArch::default(), &hyper).unwrap_err();
        match err {
            crate::error::Error::Diverged { epoch, .. } => assert_eq!(epoch, 0),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn gradient_check_passes_for_both_losses() {
        let ds = separable_toy(6, 21);
        let params = init_params(1, &ds.schema, &MlpArch::default(), 4);
        assert!(gradient_check(&params, None, &ds, 0.0) <= 1e-4);
        let head = init_head(ds.schema.k(), ds.schema.n_classes(), 4);
        assert!(gradient_check(&params, Some(&head), &ds, 1.0) <= 1e-4);
        // lambda 0 restricts the joint loss to the label term.
        assert!(gradient_check(&params, Some(&head), &ds, 0.0) <= 1e-4);
    }

    #[test]
    fn binarize_follows_the_stated_conventions() {
        let schema = ConceptSchema::new(
            vec!["i".into(), "g0".into(), "g1".into()],
            vec![vec![1, 2]],
            vec![0],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        // Independent exactly at 0.5 stays 0; group tie goes to the lower
        // index.
        assert_eq!(binarize_row(&[0.5, 0.5, 0.5], &schema), vec![0.0, 1.0, 0.0]);
        assert_eq!(binarize_row(&[0.51, 0.2, 0.6], &schema), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn predictor_bundle_round_trips_through_json() {
        let ds = separable_toy(32, 8);
        let hyper = TrainHyper {
            epochs: 2,
            ..TrainHyper::default()
        };
        let (params, head) = train_joint(&ds, &MlpArch::default(), &hyper).unwrap();
        let bundle = PredictorBundle {
            params,
            head: Some(head),
        };
        let back = PredictorBundle::from_json(&bundle.to_json_pretty()).unwrap();
        assert_eq!(bundle, back);
    }

    #[test]
    fn lambda_extremes_match_their_limits() {
        let ds = separable_toy(120, 30);
        let base = TrainHyper {
            epochs: 20,
            seed: 2,
            ..TrainHyper::default()
        };
        // Huge lambda: the joint objective is dominated by the concept loss,
        // so concept accuracy must land within half a point of independent
        // training.
        let independent = train_independent(&ds, &MlpArch::default(), &base).unwrap();
        let acc_ind = concept_train_accuracy(&independent, &ds);
        let hyper = TrainHyper {
            lambda_c: 1e6,
            ..base.clone()
        };
        let (joint, _) = train_joint(&ds, &MlpArch::default(), &hyper).unwrap();
        let acc_joint = concept_train_accuracy(&joint, &ds);
        assert!(
            acc_joint >= acc_ind - 0.005,
            "joint {acc_joint} vs independent {acc_ind}"
        );

        // Rising lambda must not worsen the final concept loss.
        let mut losses = Vec::new();
        for lambda in [0.1, 1.0, 100.0] {
            let hyper = TrainHyper {
                lambda_c: lambda,
                ..base.clone()
            };
            let (params, _) = train_joint(&ds, &MlpArch::default(), &hyper).unwrap();
            losses.push(concept_loss(&params, &ds));
        }
        assert!(
            losses[0] >= losses[1] - 1e-6 && losses[1] >= losses[2] - 1e-6,
            "concept losses {losses:?} not non-increasing in lambda"
        );
    }
}
