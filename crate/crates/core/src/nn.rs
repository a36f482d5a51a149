//! Dense multilayer perceptrons with hand-written reverse mode.
//!
//! Every network is a chain of affine layers with ReLU between them. The last
//! layer either stays linear (critics) or is squashed by `bound * tanh(z)`
//! (policies). Weight matrices are stored row-major with shape
//! `(out_dim, in_dim)`; inputs are batches laid out one sample per row.
//!
//! Only the chain rule for this architecture is implemented: `forward_tape`
//! records the layer inputs, `backward` replays them in reverse.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRDCNN01";

/// Output transform applied after the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// Identity, used by the critics.
    Linear,
    /// `bound * tanh(z)`, used by the policy so actions stay in `[-bound, bound]`.
    Tanh { bound: f64 },
}

impl Head {
    fn apply(self, z: &mut Array2<f64>) {
        if let Head::Tanh { bound } = self {
            z.mapv_inplace(|v| bound * v.tanh());
        }
    }
}

/// Weights and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// `weights[l]` has shape `(sizes[l + 1], sizes[l])`.
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Gradient (or any other tensor set) shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradient {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, c: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * c);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * c);
        }
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &Gradient) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// All entries, weights first (layer by layer, row-major), then biases.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
    }

    fn congruent(&self, net: &Mlp) -> bool {
        self.weights.len() == net.weights.len()
            && self.weights.iter().zip(&net.weights).all(|(a, b)| a.dim() == b.dim())
            && self.biases.iter().zip(&net.biases).all(|(a, b)| a.len() == b.len())
    }
}

/// Intermediate values kept from a forward pass for use by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each affine layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
    head: Head,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

impl Mlp {
    /// A network whose every weight and bias is zero.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let weights = sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Uniform fan-in initialisation: every weight and bias of a layer with
    /// fan-in `f` is drawn from `U(-1/sqrt(f), 1/sqrt(f))`. When
    /// `final_bound` is set, the last layer uses `U(-final_bound, final_bound)`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], final_bound: Option<f64>, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let layers = net.weights.len();
        for l in 0..layers {
            let bound = match final_bound {
                Some(b) if l + 1 == layers => b,
                _ => 1.0 / (sizes[l] as f64).sqrt(),
            };
            if !(bound > 0.0 && bound.is_finite()) {
                return Err(Error::Config(format!("init bound must be positive, got {bound}")));
            }
            let dist = Uniform::new_inclusive(-bound, bound)
                .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
            net.weights[l].mapv_inplace(|_| dist.sample(rng));
            net.biases[l].mapv_inplace(|_| dist.sample(rng));
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Batched forward pass; one sample per row.
    pub fn forward(&self, input: ArrayView2<f64>, head: Head) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let last = self.num_layers() - 1;
        let mut x = self.affine(0, input);
        for l in 1..=last {
            x.mapv_inplace(relu);
            x = self.affine(l, x.view());
        }
        head.apply(&mut x);
        Ok(x)
    }

    /// Forward pass on a single sample.
    pub fn forward_one(&self, input: &[f64], head: Head) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::Config(format!("input view: {e}")))?;
        Ok(self.forward(view, head)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, input: ArrayView2<f64>, head: Head) -> Result<Tape> {
        self.check_input(input.ncols())?;
        let last = self.num_layers() - 1;
        let mut inputs = Vec::with_capacity(self.num_layers());
        inputs.push(input.to_owned());
        let mut x = self.affine(0, input);
        for l in 1..=last {
            x.mapv_inplace(relu);
            let next = self.affine(l, x.view());
            inputs.push(x);
            x = next;
        }
        head.apply(&mut x);
        Ok(Tape {
            inputs,
            output: x,
            head,
        })
    }

    /// Reverse pass. `upstream` is dL/d(output) for the batch loss L, so a
    /// mean-reduced loss must already carry its `1/N` factor. Returns the
    /// parameter gradient and dL/d(input).
    pub fn backward(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<(Gradient, Array2<f64>)> {
        let (grad, input) = self.reverse(tape, upstream, true, true)?;
        Ok((grad.expect("requested"), input.expect("requested")))
    }

    /// Parameter gradient only.
    pub fn param_gradient(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<Gradient> {
        Ok(self.reverse(tape, upstream, true, false)?.0.expect("requested"))
    }

    /// dL/d(input) only.
    pub fn input_gradient(&self, tape: &Tape, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.reverse(tape, upstream, false, true)?.1.expect("requested"))
    }

    fn reverse(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Gradient>, Option<Array2<f64>>)> {
        if upstream.dim() != tape.output.dim() {
            return Err(Error::shape(
                "mlp backward upstream",
                format!("{:?}", tape.output.dim()),
                format!("{:?}", upstream.dim()),
            ));
        }
        if tape.inputs.len() != self.num_layers() || tape.inputs[0].ncols() != self.input_dim() {
            return Err(Error::shape("mlp backward tape", self.num_layers(), tape.inputs.len()));
        }
        let mut delta = upstream.to_owned();
        if let Head::Tanh { bound } = tape.head {
            // y = b tanh(z)  =>  dy/dz = b (1 - (y/b)^2)
            Zip::from(&mut delta).and(&tape.output).for_each(|d, &y| {
                let t = y / bound;
                *d *= bound * (1.0 - t * t);
            });
        }
        let mut grad = want_params.then(|| Gradient::zeros_like(self));
        for l in (0..self.num_layers()).rev() {
            let a = &tape.inputs[l];
            if let Some(g) = grad.as_mut() {
                g.weights[l] = delta.t().dot(a);
                g.biases[l] = delta.sum_axis(Axis(0));
            }
            if l == 0 && !want_input {
                break;
            }
            let mut da = delta.dot(&self.weights[l]);
            if l > 0 {
                // a = relu(z), so the mask a > 0 equals z > 0.
                Zip::from(&mut da).and(a).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            delta = da;
        }
        Ok((grad, want_input.then_some(delta)))
    }

    fn affine(&self, l: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights[l].t());
        z += &self.biases[l];
        z
    }

    /// Visits every parameter mutably, in the same order as [`Gradient::iter`].
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .flat_map(|w| w.iter_mut())
            .chain(self.biases.iter_mut().flat_map(|b| b.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .chain(self.biases.iter().flat_map(|b| b.iter().copied()))
    }

    fn congruent(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes
    }

    /// Serialises in the `PRDCNN01` layout: magic, `u32` layer count `L`,
    /// `L + 1` `u32` layer sizes, then per layer the row-major weights
    /// followed by the biases, all as little-endian `f64`.
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = ByteWriter::new(out);
        w.bytes(CHECKPOINT_MAGIC)?;
        w.u32(self.num_layers() as u32)?;
        for &s in &self.sizes {
            w.u32(s as u32)?;
        }
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            for &v in wt.iter() {
                w.f64(v)?;
            }
            for &v in b.iter() {
                w.f64(v)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = ByteReader::new(input);
        r.magic(CHECKPOINT_MAGIC)?;
        let layers = r.u32("layer count")? as usize;
        if layers == 0 || layers > 1024 {
            return Err(r.error(format!("implausible layer count {layers}")));
        }
        let mut sizes = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            let s = r.u32("layer size")? as usize;
            if s == 0 || s > 1 << 20 {
                return Err(r.error(format!("implausible layer size {s}")));
            }
            sizes.push(s);
        }
        let mut net = Self::zeros(&sizes)?;
        for l in 0..layers {
            let (rows, cols) = net.weights[l].dim();
            let w = r.f64s(rows * cols, "weights")?;
            net.weights[l] = Array2::from_shape_vec((rows, cols), w)
                .map_err(|e| Error::Config(format!("weight shape: {e}")))?;
            net.biases[l] = Array1::from(r.f64s(rows, "biases")?);
        }
        r.expect_eof()?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Config(format!(
            "an MLP needs at least an input and an output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("layer sizes must be positive, got {sizes:?}")));
    }
    Ok(())
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Gradient,
    second_moment: Gradient,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Result<Self> {
        Self::with_constants(net, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants(net: &Mlp, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        for (name, v) in [("beta1", beta1), ("beta2", beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(epsilon > 0.0 && epsilon < 1e-2) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1e-2), got {epsilon}")));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first_moment: Gradient::zeros_like(net),
            second_moment: Gradient::zeros_like(net),
        })
    }

    pub fn first_moment(&self) -> &Gradient {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Gradient {
        &self.second_moment
    }

    /// One descent step. A non-finite gradient leaves both the parameters and
    /// the optimizer state untouched.
    pub fn step(&mut self, net: &mut Mlp, grad: &Gradient) -> Result<()> {
        if !grad.congruent(net) || !self.first_moment.congruent(net) {
            return Err(Error::shape(
                "adam step",
                format!("{:?}", net.sizes()),
                "incongruent gradient or optimizer state",
            ));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at adam step {}",
                self.step_count + 1
            )));
        }
        self.step_count += 1;
        let t = self.step_count as f64;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..net.num_layers() {
            Zip::from(&mut net.weights[l])
                .and(&mut self.first_moment.weights[l])
                .and(&mut self.second_moment.weights[l])
                .and(&grad.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut net.biases[l])
                .and(&mut self.first_moment.biases[l])
                .and(&mut self.second_moment.biases[l])
                .and(&grad.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn polyak_blend(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {tau}")));
    }
    if !target.congruent(online) {
        return Err(Error::shape(
            "polyak blend",
            format!("{:?}", online.sizes()),
            format!("{:?}", target.sizes()),
        ));
    }
    for (t, o) in target.params_mut().zip(online.params()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}
