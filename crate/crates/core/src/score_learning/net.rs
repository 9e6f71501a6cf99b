//! Dense feedforward networks with batched reverse-mode gradients.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};

/// Smooth elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Softplus => softplus(z),
        }
    }

    #[inline]
    pub(crate) fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(z),
        }
    }

    #[inline]
    pub(crate) fn deriv2(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 0.0,
            Activation::Softplus => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::Format(format!("unknown activation {s:?}"))),
        }
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One affine map followed by an activation. `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    layers: Vec<Layer>,
}

/// Intermediate values of a batched forward pass, kept for the backward pass.
pub(crate) struct Tape {
    /// `inputs[l]` is the input to layer `l`; the last entry is the network output.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub(crate) fn output(&self) -> &Array2<f64> {
        self.inputs.last().expect("non-empty tape")
    }
}

impl FeedforwardNet {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim(pair[0].output_dim(), pair[1].input_dim())?;
        }
        for layer in &layers {
            check_dim(layer.output_dim(), layer.bias.len())?;
            check_finite("network weights", layer.weight.as_slice().unwrap_or(&[]))?;
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `output`.
    /// Weights are drawn from `N(0, 1/fan_in)`, biases start at zero.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let scale = (1.0 / w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[1], w[0]), || {
                    scale * rng.sample::<f64, _>(StandardNormal)
                });
                Layer {
                    weight,
                    bias: Array1::zeros(w[1]),
                    activation: if i + 2 == sizes.len() { output } else { hidden },
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    /// A single identity-activation layer computing `W x + b`.
    pub fn linear(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        Self::from_layers(vec![Layer {
            weight,
            bias,
            activation: Activation::Identity,
        }])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Flat parameters: per layer, the weight matrix row-major then the bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.num_params(), params.len())?;
        check_finite("network parameters", params)?;
        let mut offset = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in l.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(xs).into_raw_vec_and_offset().0)
    }

    /// Row-wise forward pass over a `batch x in` matrix.
    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = xs.to_owned();
        for l in &self.layers {
            let mut z = h.dot(&l.weight.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            h = z;
        }
        h
    }

    pub(crate) fn forward_tape(&self, xs: ArrayView2<'_, f64>) -> Tape {
        let mut inputs = vec![xs.to_owned()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut z = inputs.last().expect("input").dot(&l.weight.t());
            z += &l.bias;
            let h = z.mapv(|v| l.activation.apply(v));
            pre.push(z);
            inputs.push(h);
        }
        Tape { inputs, pre }
    }

    /// Reverse pass for the contraction `Σ_rows ⟨output_row, upstream_row⟩`.
    /// Returns the input gradient (`batch x in`) and accumulates into `param_grad`.
    pub(crate) fn backward_tape(
        &self,
        tape: &Tape,
        upstream: Array2<f64>,
        param_grad: &mut [f64],
    ) -> Array2<f64> {
        let offsets = self.offsets();
        let mut grad = upstream;
        for (idx, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[idx];
            if l.activation != Activation::Identity {
                grad.zip_mut_with(z, |g, &zv| *g *= l.activation.deriv(zv));
            }
            let gw = grad.t().dot(&tape.inputs[idx]);
            let off = offsets[idx];
            let nw = l.weight.len();
            for (dst, src) in param_grad[off..off + nw].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            for (dst, src) in param_grad[off + nw..off + nw + l.bias.len()]
                .iter_mut()
                .zip(grad.sum_axis(Axis(0)).iter())
            {
                *dst += src;
            }
            grad = grad.dot(&l.weight);
        }
        grad
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for l in &self.layers {
            out.push(acc);
            acc += l.weight.len() + l.bias.len();
        }
        out
    }

    /// Gradients of `⟨forward(x), upstream⟩` with respect to the input and the parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.output_dim(), upstream.len())?;
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let tape = self.forward_tape(xs);
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
        let mut pg = vec![0.0; self.num_params()];
        let gi = self.backward_tape(&tape, up, &mut pg);
        Ok((gi.into_raw_vec_and_offset().0, pg))
    }

    /// Value and parameter gradient of `Σ_rows Σ_a ∂out_a/∂in_a` (the input-Jacobian trace),
    /// using one forward-tangent and one reverse pass per input coordinate.
    pub(crate) fn jacobian_trace_with_grad(
        &self,
        xs: ArrayView2<'_, f64>,
        scale: f64,
        param_grad: &mut [f64],
    ) -> f64 {
        let d = self.input_dim();
        debug_assert_eq!(d, self.output_dim());
        let tape = self.forward_tape(xs);
        let offsets = self.offsets();
        let b = xs.nrows();
        let mut total = 0.0;
        for a in 0..d {
            // forward tangents along e_a
            let mut tangents = Vec::with_capacity(self.layers.len() + 1);
            let mut t0 = Array2::<f64>::zeros((b, d));
            t0.column_mut(a).fill(1.0);
            tangents.push(t0);
            let mut pre_tangents = Vec::with_capacity(self.layers.len());
            for (idx, l) in self.layers.iter().enumerate() {
                let zt = tangents[idx].dot(&l.weight.t());
                let mut ht = zt.clone();
                ht.zip_mut_with(&tape.pre[idx], |v, &z| *v *= l.activation.deriv(z));
                pre_tangents.push(zt);
                tangents.push(ht);
            }
            total += tangents.last().expect("output tangent").column(a).sum();

            // reverse pass through the tangent computation
            let mut hbar = Array2::<f64>::zeros((b, self.output_dim()));
            let mut htbar = Array2::<f64>::zeros((b, self.output_dim()));
            htbar.column_mut(a).fill(scale);
            for (idx, l) in self.layers.iter().enumerate().rev() {
                let z = &tape.pre[idx];
                let zt = &pre_tangents[idx];
                let mut ztbar = htbar.clone();
                let mut zbar = hbar;
                ndarray::Zip::from(&mut zbar)
                    .and(&mut ztbar)
                    .and(z)
                    .and(zt)
                    .for_each(|zb, ztb, &zv, &ztv| {
                        let s1 = l.activation.deriv(zv);
                        let s2 = l.activation.deriv2(zv);
                        *zb = s1 * *zb + s2 * ztv * *ztb;
                        *ztb *= s1;
                    });
                let gw = zbar.t().dot(&tape.inputs[idx]) + ztbar.t().dot(&tangents[idx]);
                let off = offsets[idx];
                let nw = l.weight.len();
                for (dst, src) in param_grad[off..off + nw].iter_mut().zip(gw.iter()) {
                    *dst += src;
                }
                for (dst, src) in param_grad[off + nw..off + nw + l.bias.len()]
                    .iter_mut()
                    .zip(zbar.sum_axis(Axis(0)).iter())
                {
                    *dst += src;
                }
                hbar = zbar.dot(&l.weight);
                htbar = ztbar.dot(&l.weight);
            }
        }
        total
    }
}

/// How the noise level enters a conditional network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Append `ln σ` to the input vector.
    #[default]
    ConcatLogSigma,
}

/// Optional per-noise rescaling of the network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputScaling {
    #[default]
    None,
    /// Divide the output by `σ`.
    InverseSigma,
}

/// A network evaluated at `(x, σ)`; used for score networks, encoders and decoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalNet {
    net: FeedforwardNet,
    conditioning: Conditioning,
    output_scaling: OutputScaling,
}

const CHECKPOINT_MAGIC: &str = "ncksvgd-net v1";

impl ConditionalNet {
    pub fn new(net: FeedforwardNet, conditioning: Conditioning, output_scaling: OutputScaling) -> Result<Self> {
        if net.input_dim() < 2 {
            return Err(Error::InvalidParameter(
                "conditional network needs at least one data input plus ln sigma".into(),
            ));
        }
        Ok(Self {
            net,
            conditioning,
            output_scaling,
        })
    }

    /// Softplus MLP mapping `d` data inputs (plus `ln σ`) through `hidden` widths to `out` outputs.
    pub fn mlp(d: usize, hidden: &[usize], out: usize, output_scaling: OutputScaling, seed: u64) -> Result<Self> {
        let mut sizes = vec![d + 1];
        sizes.extend_from_slice(hidden);
        sizes.push(out);
        let net = FeedforwardNet::new(&sizes, Activation::Softplus, Activation::Identity, seed)?;
        Self::new(net, Conditioning::ConcatLogSigma, output_scaling)
    }

    pub fn net(&self) -> &FeedforwardNet {
        &self.net
    }
    pub fn net_mut(&mut self) -> &mut FeedforwardNet {
        &mut self.net
    }
    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }
    pub fn output_scaling(&self) -> OutputScaling {
        self.output_scaling
    }

    /// Dimension of the data input (excluding the noise feature).
    pub fn input_dim(&self) -> usize {
        self.net.input_dim() - 1
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn out_scale(&self, sigma: f64) -> f64 {
        match self.output_scaling {
            OutputScaling::None => 1.0,
            OutputScaling::InverseSigma => 1.0 / sigma,
        }
    }

    fn augment(&self, xs: ArrayView2<'_, f64>, sigmas: &[f64]) -> Array2<f64> {
        let (b, d) = xs.dim();
        let mut aug = Array2::zeros((b, d + 1));
        aug.slice_mut(ndarray::s![.., ..d]).assign(&xs);
        for (i, s) in sigmas.iter().enumerate() {
            aug[[i, d]] = s.ln();
        }
        aug
    }

    pub fn forward(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        self.forward_batch(xs, sigma).into_raw_vec_and_offset().0
    }

    pub fn forward_batch(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
        let sigmas = vec![sigma; xs.nrows()];
        self.forward_batch_sigmas(xs, &sigmas)
    }

    /// Forward pass where row `i` uses noise level `sigmas[i]`.
    pub fn forward_batch_sigmas(&self, xs: ArrayView2<'_, f64>, sigmas: &[f64]) -> Array2<f64> {
        let mut out = self.net.forward_batch(self.augment(xs, sigmas).view());
        self.scale_rows(&mut out, sigmas);
        out
    }

    fn scale_rows(&self, out: &mut Array2<f64>, sigmas: &[f64]) {
        if self.output_scaling != OutputScaling::None {
            for (mut row, &s) in out.rows_mut().into_iter().zip(sigmas) {
                row *= self.out_scale(s);
            }
        }
    }

    pub(crate) fn forward_tape(&self, xs: ArrayView2<'_, f64>, sigmas: &[f64]) -> (Tape, Array2<f64>) {
        let tape = self.net.forward_tape(self.augment(xs, sigmas).view());
        let mut out = tape.output().clone();
        self.scale_rows(&mut out, sigmas);
        (tape, out)
    }

    /// Reverse pass with upstream on the scaled output; returns data-input gradients.
    pub(crate) fn backward_tape(
        &self,
        tape: &Tape,
        mut upstream: Array2<f64>,
        sigmas: &[f64],
        param_grad: &mut [f64],
    ) -> Array2<f64> {
        self.scale_rows(&mut upstream, sigmas);
        let g = self.net.backward_tape(tape, upstream, param_grad);
        let d = self.input_dim();
        g.slice(ndarray::s![.., ..d]).to_owned()
    }

    /// Gradient of `⟨forward(x, σ), upstream⟩` with respect to `x`.
    pub fn input_vjp(&self, x: &[f64], sigma: f64, upstream: &[f64]) -> Vec<f64> {
        let xs = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("row");
        let (tape, _) = self.forward_tape(xs, &[sigma]);
        let mut scratch = vec![0.0; self.net.num_params()];
        self.backward_tape(&tape, up, &[sigma], &mut scratch)
            .into_raw_vec_and_offset()
            .0
    }

    /// Input Jacobians for every row: entry `[i, o, a] = ∂out_o(x_i)/∂x_a`, flattened as `n x (h*d)`.
    pub(crate) fn input_jacobians(&self, xs: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
        let (n, d) = xs.dim();
        let h = self.output_dim();
        let sigmas = vec![sigma; n];
        let (tape, _) = self.forward_tape(xs, &sigmas);
        let mut jac = Array2::zeros((n, h * d));
        let mut scratch = vec![0.0; self.net.num_params()];
        for o in 0..h {
            let mut up = Array2::zeros((n, h));
            up.column_mut(o).fill(1.0);
            let g = self.backward_tape(&tape, up, &sigmas, &mut scratch);
            jac.slice_mut(ndarray::s![.., o * d..(o + 1) * d]).assign(&g);
        }
        jac
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let conditioning = match self.conditioning {
            Conditioning::ConcatLogSigma => "concat_log_sigma",
        };
        let scaling = match self.output_scaling {
            OutputScaling::None => "none",
            OutputScaling::InverseSigma => "inverse_sigma",
        };
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "conditioning {conditioning}")?;
        writeln!(w, "output_scaling {scaling}")?;
        for l in self.net.layers() {
            writeln!(w, "layer {} {} {}", l.input_dim(), l.output_dim(), l.activation)?;
        }
        writeln!(w, "params {}", self.net.num_params())?;
        writeln!(w, "end")?;
        let mut bytes = Vec::with_capacity(self.net.num_params() * 8);
        for p in self.net.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint header ended early".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let mut conditioning = None;
        let mut scaling = None;
        let mut shapes = Vec::new();
        let mut count = None;
        loop {
            let l = next_line(&mut r)?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::Format(format!("bad checkpoint line {l:?}"));
            match fields.as_slice() {
                ["conditioning", "concat_log_sigma"] => conditioning = Some(Conditioning::ConcatLogSigma),
                ["output_scaling", "none"] => scaling = Some(OutputScaling::None),
                ["output_scaling", "inverse_sigma"] => scaling = Some(OutputScaling::InverseSigma),
                ["layer", i, o, act] => shapes.push((
                    i.parse::<usize>().map_err(|_| bad())?,
                    o.parse::<usize>().map_err(|_| bad())?,
                    act.parse::<Activation>()?,
                )),
                ["params", c] => count = Some(c.parse::<usize>().map_err(|_| bad())?),
                ["end"] => break,
                _ => return Err(bad()),
            }
        }
        let (Some(conditioning), Some(scaling), Some(count)) = (conditioning, scaling, count) else {
            return Err(Error::Format("checkpoint header incomplete".into()));
        };
        let layers = shapes
            .into_iter()
            .map(|(i, o, activation)| Layer {
                weight: Array2::zeros((o, i)),
                bias: Array1::zeros(o),
                activation,
            })
            .collect();
        let mut net = FeedforwardNet::from_layers(layers)?;
        check_dim(net.num_params(), count)?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                bytes.len()
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        net.set_params(&params)?;
        Self::new(net, conditioning, scaling)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
