//! Dense feed-forward networks with exact backpropagation.
//!
//! Weights are row-major `(out_dim, in_dim)`. Everything is `f64`. Batched
//! inputs and outputs are flat row-major buffers of `rows * dim` scalars.
//!
//! A network also carries its Adam moment estimates so that a checkpoint
//! captures the full optimizer state alongside the parameters.

use matrixmultiply::dgemm;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output. ReLU at 0 has
    /// derivative 0.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine layer followed by an element-wise activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Row-major, `out_dim * in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = 1.0 / (in_dim as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            in_dim,
            out_dim,
            activation,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return shape_err(format!(
                "dense {in_dim}->{out_dim}: got {} weights and {} biases",
                weight.len(),
                bias.len()
            ));
        }
        Ok(Self {
            in_dim,
            out_dim,
            activation,
            weight,
            bias,
        })
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Gradient (or any other tensor set) with the same shape as a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub layers: Vec<LayerGradient>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradient) -> Result<()> {
        if !self.same_shape(other) {
            return shape_err("gradient add: shapes differ");
        }
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn same_shape(&self, other: &Gradient) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.len() == b.weight.len() && a.bias.len() == b.bias.len()
            })
    }

    fn matches(&self, net: &Mlp) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weight.len() == l.weight.len() && g.bias.len() == l.bias.len()
            })
    }

    /// Index of the first layer holding a non-finite entry.
    fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            l.weight
                .iter()
                .chain(l.bias.iter())
                .any(|g| !g.is_finite())
        })
    }
}

/// Euclidean norm over the concatenation of every entry of every gradient.
pub fn global_norm(gradients: &[&Gradient]) -> f64 {
    gradients
        .iter()
        .map(|g| g.squared_norm())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub norm_before: f64,
    pub norm_after: f64,
    /// Factor every entry was multiplied by (1 when no clipping happened).
    pub scale: f64,
}

/// Rescales a gradient set in place so that its global norm is at most
/// `max_norm`. Gradients already within the bound are left untouched.
pub fn clip_by_global_norm(gradients: &mut [&mut Gradient], max_norm: f64) -> Result<ClipOutcome> {
    if !(max_norm > 0.0) || !max_norm.is_finite() {
        return Err(Error::Config(format!(
            "clip norm must be positive and finite, got {max_norm}"
        )));
    }
    let norm = gradients
        .iter()
        .map(|g| g.squared_norm())
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient global norm is {norm}")));
    }
    if norm <= max_norm {
        return Ok(ClipOutcome {
            norm_before: norm,
            norm_after: norm,
            scale: 1.0,
        });
    }
    let mut scale = max_norm / norm;
    for g in gradients.iter_mut() {
        g.scale(scale);
    }
    let norm_of = |gs: &[&mut Gradient]| gs.iter().map(|g| g.squared_norm()).sum::<f64>().sqrt();
    let mut after = norm_of(gradients);
    // rounding can leave the rescaled norm an ulp above the bound
    while after > max_norm {
        let shrink = 1.0 - f64::EPSILON;
        for g in gradients.iter_mut() {
            g.scale(shrink);
        }
        scale *= shrink;
        after = norm_of(gradients);
    }
    Ok(ClipOutcome {
        norm_before: norm,
        norm_after: after,
        scale,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// A zero learning rate is accepted: it freezes parameters while still
    /// advancing the moment estimates.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Gradient,
    pub second_moment: Gradient,
}

impl AdamState {
    fn fresh(net_layers: &[Dense]) -> Self {
        let zeros = Gradient {
            layers: net_layers
                .iter()
                .map(|l| LayerGradient {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        };
        Self {
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

/// Activation record of one batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    rows: usize,
    /// `activations[0]` is the input; `activations[k + 1]` is layer k's output.
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A multilayer perceptron together with its Adam state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
    adam: AdamState,
    /// Bumped on every parameter mutation; tapes remember it.
    #[serde(skip)]
    version: u64,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("network needs at least one layer");
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return shape_err(format!(
                    "layer {k} emits {} values but layer {} expects {}",
                    pair[0].out_dim,
                    k + 1,
                    pair[1].in_dim
                ));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return shape_err(format!("layer {k} has a zero dimension"));
            }
            if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return shape_err(format!("layer {k} storage does not match its dims"));
            }
        }
        let adam = AdamState::fresh(&layers);
        Ok(Self {
            layers,
            adam,
            version: 0,
        })
    }

    /// Randomly initialised network: `input_dim -> widths[0] -> ... ` with the
    /// given activation per layer.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        spec: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.len());
        let mut prev = input_dim;
        for &(width, act) in spec {
            layers.push(Dense::init(prev, width, act, rng));
            prev = width;
        }
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Direct mutable access to the layers. Shapes must not be changed.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return shape_err(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            ));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Checks the invariants a deserialised network must satisfy.
    pub fn validate(&self) -> Result<()> {
        Self::from_layers(self.layers.clone())?;
        if !self.adam.first_moment.matches(self) || !self.adam.second_moment.matches(self) {
            return shape_err("Adam moments do not mirror parameter shapes");
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.activation == b.activation
            })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        self.forward_batch(input, 1)
    }

    /// Batched forward pass over `rows` inputs stored row-major.
    pub fn forward_batch(&self, input: &[f64], rows: usize) -> Result<(Vec<f64>, Tape)> {
        self.check_input(input, rows)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let next = layer_forward(layer, activations.last().unwrap(), rows);
            activations.push(next);
        }
        let output = activations.last().unwrap().clone();
        Ok((
            output,
            Tape {
                version: self.version,
                rows,
                activations,
            },
        ))
    }

    /// Forward pass that keeps no activation record.
    pub fn predict_batch(&self, input: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_input(input, rows)?;
        if self.layers.iter().all(is_direct) {
            let d = self.input_dim();
            let first = &self.layers[0];
            let mut cols = Vec::with_capacity(d * BLOCK);
            return Ok(self.predict_blocks(rows, |start, n, z| {
                cols.clear();
                cols.resize(d * n, 0.0);
                for r in 0..n {
                    for k in 0..d {
                        cols[k * n + r] = input[(start + r) * d + k];
                    }
                }
                accumulate_columns(first, &cols, n, z, true);
            }));
        }
        let mut current = layer_forward(&self.layers[0], input, rows);
        for layer in &self.layers[1..] {
            current = layer_forward(layer, &current, rows);
        }
        Ok(current)
    }

    /// Pushes blocks of rows through an all-direct network in feature-major
    /// layout. `first` fills the pre-activation columns of the first layer
    /// for rows `start..start + n`.
    fn predict_blocks(&self, rows: usize, mut first: impl FnMut(usize, usize, &mut [f64])) -> Vec<f64> {
        let width = self.layers.iter().map(|l| l.out_dim).max().unwrap_or(0);
        let out_dim = self.output_dim();
        let mut out = vec![0.0; rows * out_dim];
        let (mut a, mut b) = (vec![0.0; width * BLOCK], vec![0.0; width * BLOCK]);
        for start in (0..rows).step_by(BLOCK) {
            let n = BLOCK.min(rows - start);
            let l0 = &self.layers[0];
            first(start, n, &mut a[..l0.out_dim * n]);
            activate(l0, &mut a[..l0.out_dim * n]);
            for layer in &self.layers[1..] {
                accumulate_columns(layer, &a[..layer.in_dim * n], n, &mut b[..layer.out_dim * n], true);
                activate(layer, &mut b[..layer.out_dim * n]);
                std::mem::swap(&mut a, &mut b);
            }
            for k in 0..out_dim {
                for r in 0..n {
                    out[(start + r) * out_dim + k] = a[k * n + r];
                }
            }
        }
        out
    }

    /// Forward pass over inputs `[prefix_g, suffix_gj]` for `groups` prefixes
    /// with `per_group` suffixes each, without materialising the
    /// concatenation. Identical to [`Mlp::predict_batch`] on the stacked rows.
    pub fn predict_grouped(&self, prefix: &[f64], groups: usize, suffix: &[f64], per_group: usize) -> Result<Vec<f64>> {
        let d = self.input_dim();
        let rows = groups * per_group;
        if groups == 0 || per_group == 0 || prefix.len() % groups != 0 {
            return shape_err("grouped input needs at least one group of equal-sized prefixes");
        }
        let pd = prefix.len() / groups;
        if pd > d || suffix.len() != rows * (d - pd) {
            return shape_err(format!(
                "grouped input of {pd} + {} values per row does not match {d} network inputs",
                suffix.len() / rows
            ));
        }
        let sd = d - pd;
        if !self.layers.iter().all(is_direct) {
            let mut input = Vec::with_capacity(rows * d);
            for g in 0..groups {
                for j in 0..per_group {
                    input.extend_from_slice(&prefix[g * pd..(g + 1) * pd]);
                    let r = g * per_group + j;
                    input.extend_from_slice(&suffix[r * sd..(r + 1) * sd]);
                }
            }
            return self.predict_batch(&input, rows);
        }
        let first = &self.layers[0];
        let outd = first.out_dim;
        // bias plus prefix terms, summed once per group in input order
        let base: Vec<f64> = (0..groups)
            .flat_map(|g| {
                (0..outd).map(move |o| {
                    let w = &first.weight[o * d..o * d + pd];
                    let mut acc = first.bias[o];
                    for (&p, &wk) in prefix[g * pd..(g + 1) * pd].iter().zip(w) {
                        acc += p * wk;
                    }
                    acc
                })
            })
            .collect();
        let tail = Dense {
            in_dim: sd,
            out_dim: outd,
            activation: Activation::Identity,
            weight: (0..outd).flat_map(|o| first.weight[o * d + pd..(o + 1) * d].iter().copied()).collect(),
            bias: vec![0.0; outd],
        };
        let mut cols = Vec::with_capacity(sd * BLOCK);
        Ok(self.predict_blocks(rows, |start, n, z| {
            let mut r = 0;
            while r < n {
                let g = (start + r) / per_group;
                let end = ((g + 1) * per_group - start).min(n);
                for o in 0..outd {
                    z[o * n + r..o * n + end].fill(base[g * outd + o]);
                }
                r = end;
            }
            cols.clear();
            cols.resize(sd * n, 0.0);
            for r in 0..n {
                for k in 0..sd {
                    cols[k * n + r] = suffix[(start + r) * sd + k];
                }
            }
            accumulate_columns(&tail, &cols, n, z, false);
        }))
    }

    fn check_input(&self, input: &[f64], rows: usize) -> Result<()> {
        let d = self.input_dim();
        if rows == 0 || input.len() != rows * d {
            return shape_err(format!(
                "network expects {rows} rows of {d} inputs, got {} values",
                input.len()
            ));
        }
        Ok(())
    }

    /// Gradient of `sum_rows <output_row, cotangent_row>` with respect to every
    /// parameter, plus the cotangent with respect to the input.
    pub fn backward(&self, tape: &Tape, output_cotangent: &[f64]) -> Result<(Gradient, Vec<f64>)> {
        let mut grad = Gradient::zeros_like(self);
        let input_cot = self.backward_into(tape, output_cotangent, &mut grad)?;
        Ok((grad, input_cot))
    }

    /// Like [`Mlp::backward`] but accumulates into an existing gradient.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_cotangent: &[f64],
        grad: &mut Gradient,
    ) -> Result<Vec<f64>> {
        if tape.version != self.version || tape.activations.len() != self.layers.len() + 1 {
            return shape_err("tape was not produced by this network's current parameters");
        }
        if !grad.matches(self) {
            return shape_err("gradient accumulator does not match network");
        }
        let rows = tape.rows;
        if output_cotangent.len() != rows * self.output_dim() {
            return shape_err(format!(
                "cotangent has {} values, expected {}",
                output_cotangent.len(),
                rows * self.output_dim()
            ));
        }
        let mut upstream = output_cotangent.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let x = &tape.activations[k];
            let y = &tape.activations[k + 1];
            let (ind, outd) = (layer.in_dim, layer.out_dim);
            // dZ = dY * f'(Y)
            for (u, &yv) in upstream.iter_mut().zip(y.iter()) {
                *u *= layer.activation.derivative_from_output(yv);
            }
            let lg = &mut grad.layers[k];
            // dW += dZ^T X
            unsafe {
                dgemm(
                    outd,
                    rows,
                    ind,
                    1.0,
                    upstream.as_ptr(),
                    1,
                    outd as isize,
                    x.as_ptr(),
                    ind as isize,
                    1,
                    1.0,
                    lg.weight.as_mut_ptr(),
                    ind as isize,
                    1,
                );
            }
            for row in upstream.chunks_exact(outd) {
                for (b, d) in lg.bias.iter_mut().zip(row) {
                    *b += d;
                }
            }
            // dX = dZ W
            let mut down = vec![0.0; rows * ind];
            unsafe {
                dgemm(
                    rows,
                    outd,
                    ind,
                    1.0,
                    upstream.as_ptr(),
                    outd as isize,
                    1,
                    layer.weight.as_ptr(),
                    ind as isize,
                    1,
                    0.0,
                    down.as_mut_ptr(),
                    ind as isize,
                    1,
                );
            }
            upstream = down;
        }
        Ok(upstream)
    }

    /// One bias-corrected Adam update. The step counter is advanced before the
    /// bias correction is computed.
    pub fn adam_step(&mut self, grad: &Gradient, config: &AdamConfig, direction: Direction) -> Result<()> {
        config.validate()?;
        if !grad.matches(self) {
            return shape_err("Adam: gradient shape does not match network");
        }
        if let Some(layer) = grad.first_non_finite_layer() {
            return Err(Error::Numeric(format!(
                "non-finite gradient entry in layer {layer}"
            )));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = *config;
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let sign = match direction {
            Direction::Ascend => 1.0,
            Direction::Descend => -1.0,
        };
        let params = self
            .layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()));
        let moments = self
            .adam
            .first_moment
            .iter_mut()
            .zip(self.adam.second_moment.iter_mut());
        for ((p, (m, v)), &g) in params.zip(moments).zip(grad.iter()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p += sign * lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        self.version += 1;
        Ok(())
    }
}

/// `target <- alpha * online + (1 - alpha) * target`, element-wise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("polyak alpha must lie in [0, 1], got {alpha}")));
    }
    if !target.same_shape(online) {
        return shape_err("polyak update between networks of different shapes");
    }
    let keep = 1.0 - alpha;
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (tw, ow) in t.weight.iter_mut().zip(&o.weight) {
            *tw = alpha * ow + keep * *tw;
        }
        for (tb, ob) in t.bias.iter_mut().zip(&o.bias) {
            *tb = alpha * ob + keep * *tb;
        }
    }
    target.version += 1;
    Ok(())
}

/// Layers with at most this many weights run through [`affine_rows`] rather
/// than a general matrix product, whose packing overhead dominates when the
/// layer is narrow.
const DIRECT_WEIGHTS: usize = 64 * 64;

fn is_direct(layer: &Dense) -> bool {
    layer.in_dim * layer.out_dim <= DIRECT_WEIGHTS
}

/// Weight matrix laid out input-major, so that row `k` holds the weights of
/// input `k` for every output unit.
fn transposed(layer: &Dense) -> Vec<f64> {
    let (ind, outd) = (layer.in_dim, layer.out_dim);
    let mut wt = vec![0.0; ind * outd];
    for o in 0..outd {
        for k in 0..ind {
            wt[k * outd + o] = layer.weight[o * ind + k];
        }
    }
    wt
}

/// Row-by-row `z = b + sum_k x_k W[:, k]`, summed in input order.
fn affine_rows(layer: &Dense, x: &[f64], rows: usize) -> Vec<f64> {
    let (ind, outd) = (layer.in_dim, layer.out_dim);
    let wt = transposed(layer);
    let mut z = vec![0.0; rows * outd];
    for (zr, xr) in z.chunks_exact_mut(outd).zip(x.chunks_exact(ind)) {
        zr.copy_from_slice(&layer.bias);
        for (k, &xv) in xr.iter().enumerate() {
            for (zv, &w) in zr.iter_mut().zip(&wt[k * outd..(k + 1) * outd]) {
                *zv += xv * w;
            }
        }
    }
    z
}

/// Rows pushed through the network together by the feature-major path;
/// sized so a block of every feature stays in L1.
const BLOCK: usize = 256;

/// Feature-major [`affine_rows`]: `x` holds `in_dim` columns of `rows`
/// values and `z` receives `out_dim` columns. Each output is summed in the
/// same order as the row kernel, so both give identical values. With `seed`
/// unset the bias is skipped and the products are added to what `z` holds.
#[inline(always)]
fn affine_columns_body(layer: &Dense, x: &[f64], rows: usize, z: &mut [f64], seed: bool) {
    let ind = layer.in_dim;
    for (o, zo) in z.chunks_exact_mut(rows).take(layer.out_dim).enumerate() {
        if seed {
            zo.fill(layer.bias[o]);
        }
        for (k, xk) in x.chunks_exact(rows).take(ind).enumerate() {
            let w = layer.weight[o * ind + k];
            for (zv, &xv) in zo.iter_mut().zip(xk) {
                *zv += xv * w;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn affine_columns_avx2(layer: &Dense, x: &[f64], rows: usize, z: &mut [f64], seed: bool) {
    affine_columns_body(layer, x, rows, z, seed)
}

// Wider registers only change how many rows are updated at once; every
// output is still summed in input order, so results do not depend on the
// feature being present.
fn accumulate_columns(layer: &Dense, x: &[f64], rows: usize, z: &mut [f64], seed: bool) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        unsafe { affine_columns_avx2(layer, x, rows, z, seed) };
        return;
    }
    affine_columns_body(layer, x, rows, z, seed);
}

fn affine_gemm(layer: &Dense, x: &[f64], rows: usize) -> Vec<f64> {
    let (ind, outd) = (layer.in_dim, layer.out_dim);
    let mut z = Vec::with_capacity(rows * outd);
    for _ in 0..rows {
        z.extend_from_slice(&layer.bias);
    }
    // Z = X W^T + b
    unsafe {
        dgemm(
            rows,
            ind,
            outd,
            1.0,
            x.as_ptr(),
            ind as isize,
            1,
            layer.weight.as_ptr(),
            1,
            ind as isize,
            1.0,
            z.as_mut_ptr(),
            outd as isize,
            1,
        );
    }
    z
}

fn activate(layer: &Dense, z: &mut [f64]) {
    if layer.activation != Activation::Identity {
        for v in z {
            *v = layer.activation.apply(*v);
        }
    }
}

fn layer_forward(layer: &Dense, x: &[f64], rows: usize) -> Vec<f64> {
    let mut z = if is_direct(layer) {
        affine_rows(layer, x, rows)
    } else {
        affine_gemm(layer, x, rows)
    };
    activate(layer, &mut z);
    z
}
