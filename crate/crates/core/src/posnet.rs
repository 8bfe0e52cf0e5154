//! Per-station positioning network: residual convolution blocks over the
//! real CSI tensor followed by fully connected layers, with hand-written
//! reverse-mode gradients.
//!
//! Parameters are stored in one flat vector. Every residual block holds two
//! same-padded stride-1 convolutions and a shortcut; the shortcut is the
//! identity when channel counts agree and a bias-free 1x1 projection
//! otherwise. There is no activation after the residual sum.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::CsiTensor;
use crate::geometry::WorldCoord2D;
use crate::rng::TaskRng;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosnetError {
    #[error("input shape {got:?} does not match architecture input {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{got} weights supplied for a batch of {expected}")]
    WeightLength { expected: usize, got: usize },
    #[error("parameter vector has length {got}, architecture needs {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("non-finite value in layer {layer}")]
    NonFinite { layer: String },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Relu => z.max(0.0),
            Self::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    0.01 * z
                }
            }
            Self::Tanh => z.tanh(),
            Self::Identity => z,
        }
    }

    /// Derivative expressed through pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Relu => f64::from(u8::from(z > 0.0)),
            Self::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.01
                }
            }
            Self::Tanh => 1.0 - a * a,
            Self::Identity => 1.0,
        }
    }

    fn init_gain(self) -> f64 {
        match self {
            Self::Relu | Self::LeakyRelu => 6.0,
            Self::Tanh | Self::Identity => 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub n_residual_blocks: usize,
    /// Output channels of each residual block.
    pub conv_channels: Vec<usize>,
    /// Odd spatial kernel size.
    pub kernel_size: usize,
    /// Fully connected widths; the last one is the 2-D output.
    pub fc_widths: Vec<usize>,
    pub activation: Activation,
    /// Antenna dimension of the input tensor.
    pub input_antennas: usize,
    /// Subcarrier dimension of the input tensor.
    pub input_subcarriers: usize,
    /// Multiplier applied to the CSI tensor before the first layer.
    #[serde(default = "one")]
    pub input_scale: f64,
    /// Final affine map `offset + scale * z`, so the network emits metres.
    #[serde(default = "one")]
    pub output_scale: f64,
    #[serde(default)]
    pub output_offset: [f64; 2],
}

fn one() -> f64 {
    1.0
}

impl ArchSpec {
    /// Two residual blocks and three dense layers.
    pub fn standard(input_antennas: usize, input_subcarriers: usize) -> Self {
        Self {
            n_residual_blocks: 2,
            conv_channels: vec![4, 8],
            kernel_size: 3,
            fc_widths: vec![128, 64, 2],
            activation: Activation::Relu,
            input_antennas,
            input_subcarriers,
            input_scale: 1.0,
            output_scale: 1.0,
            output_offset: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), PosnetError> {
        let bad = |m: String| Err(PosnetError::InvalidArch(m));
        if self.conv_channels.len() != self.n_residual_blocks {
            return bad(format!(
                "{} conv channel counts for {} residual blocks",
                self.conv_channels.len(),
                self.n_residual_blocks
            ));
        }
        if self.conv_channels.contains(&0) {
            return bad("conv channel counts must be positive".into());
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if self.fc_widths.last() != Some(&2) || self.fc_widths.contains(&0) {
            return bad("fc_widths must be positive and end with the 2-D output".into());
        }
        if self.input_antennas == 0 || self.input_subcarriers == 0 {
            return bad("input dimensions must be positive".into());
        }
        if !(self.input_scale.is_finite() && self.output_scale.is_finite() && self.output_scale != 0.0) {
            return bad("input_scale and output_scale must be finite, output_scale non-zero".into());
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).n_params
    }

    /// Multiply-accumulate count of one forward pass:
    /// `sum c_in c_out w h s^2` over convolutions plus `sum f_in f_out` over
    /// dense layers.
    pub fn forward_macs(&self) -> u64 {
        let l = Layout::new(self);
        let hw = (l.h * l.w) as u64;
        let conv: u64 = l
            .blocks
            .iter()
            .flat_map(|b| [Some(&b.conv_a), Some(&b.conv_b), b.skip.as_ref()])
            .flatten()
            .map(|c| (c.c_in * c.c_out * c.k * c.k) as u64 * hw)
            .sum();
        let fc: u64 = l.fcs.iter().map(|f| (f.n_in * f.n_out) as u64).sum();
        conv + fc
    }

    /// Per-iteration cost of one station's update with `n_validation`
    /// validation samples and `n_csi` CSI in the batch.
    pub fn iteration_complexity(&self, n_validation: usize, n_csi: usize) -> u64 {
        (n_validation + 2 * n_csi) as u64 * self.forward_macs()
    }
}

#[derive(Debug, Clone)]
struct Conv {
    c_in: usize,
    c_out: usize,
    k: usize,
    w_off: usize,
    b_off: Option<usize>,
}

impl Conv {
    fn n_weights(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }
}

#[derive(Debug, Clone)]
struct Block {
    conv_a: Conv,
    conv_b: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    h: usize,
    w: usize,
    blocks: Vec<Block>,
    fcs: Vec<Dense>,
    n_params: usize,
}

impl Layout {
    fn new(arch: &ArchSpec) -> Self {
        let (h, w) = (arch.input_antennas, arch.input_subcarriers);
        let mut off = 0;
        let mut conv = |c_in, c_out, k, bias: bool| {
            let w_off = off;
            off += c_out * c_in * k * k;
            let b_off = bias.then(|| {
                let b = off;
                off += c_out;
                b
            });
            Conv { c_in, c_out, k, w_off, b_off }
        };
        let mut c_in = 2;
        let mut blocks = Vec::new();
        for &c_out in &arch.conv_channels {
            let conv_a = conv(c_in, c_out, arch.kernel_size, true);
            let conv_b = conv(c_out, c_out, arch.kernel_size, true);
            let skip = (c_in != c_out).then(|| conv(c_in, c_out, 1, false));
            blocks.push(Block { conv_a, conv_b, skip });
            c_in = c_out;
        }
        let mut n_in = c_in * h * w;
        let mut fcs = Vec::new();
        for &n_out in &arch.fc_widths {
            let w_off = off;
            off += n_in * n_out;
            let b_off = off;
            off += n_out;
            fcs.push(Dense { n_in, n_out, w_off, b_off });
            n_in = n_out;
        }
        Self { h, w, blocks, fcs, n_params: off }
    }

    fn flat_len(&self) -> usize {
        self.fcs[0].n_in
    }

    /// Human-readable name of the layer that owns parameter `idx`.
    fn layer_of(&self, idx: usize) -> String {
        for (r, b) in self.blocks.iter().enumerate() {
            for (name, c) in [("conv_a", Some(&b.conv_a)), ("conv_b", Some(&b.conv_b)), ("skip", b.skip.as_ref())] {
                if let Some(c) = c {
                    let end = c.b_off.map_or(c.w_off + c.n_weights(), |b| b + c.c_out);
                    if (c.w_off..end).contains(&idx) {
                        return format!("block{r}.{name}");
                    }
                }
            }
        }
        for (n, f) in self.fcs.iter().enumerate() {
            if (f.w_off..f.b_off + f.n_out).contains(&idx) {
                return format!("fc{n}");
            }
        }
        "unknown".into()
    }
}

/// Accumulates `out[oc] += conv(input)` for one convolution with same padding.
fn conv_forward(p: &[f64], c: &Conv, h: usize, w: usize, input: &[f64], out: &mut [f64]) {
    let hw = h * w;
    let pad = (c.k / 2) as isize;
    for oc in 0..c.c_out {
        let o = &mut out[oc * hw..(oc + 1) * hw];
        match c.b_off {
            Some(b) => o.fill(p[b + oc]),
            None => o.fill(0.0),
        }
        for ic in 0..c.c_in {
            let x = &input[ic * hw..(ic + 1) * hw];
            for ky in 0..c.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..c.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let wv = p[c.w_off + ((oc * c.c_in + ic) * c.k + ky) * c.k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let irow = &x[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Back-propagates `d_out` through one convolution: accumulates parameter
/// gradients into `g` and, when requested, input gradients into `d_in`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    p: &[f64],
    g: &mut [f64],
    c: &Conv,
    h: usize,
    w: usize,
    input: &[f64],
    d_out: &[f64],
    mut d_in: Option<&mut [f64]>,
) {
    let hw = h * w;
    let pad = (c.k / 2) as isize;
    for oc in 0..c.c_out {
        let dout = &d_out[oc * hw..(oc + 1) * hw];
        if let Some(b) = c.b_off {
            g[b + oc] += dout.iter().sum::<f64>();
        }
        for ic in 0..c.c_in {
            let x = &input[ic * hw..(ic + 1) * hw];
            for ky in 0..c.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..c.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let widx = c.w_off + ((oc * c.c_in + ic) * c.k + ky) * c.k + kx;
                    let wv = p[widx];
                    let sx0 = (x0 as isize + dx) as usize;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &dout[y * w + x0..y * w + x1];
                        let irow = &x[sy * w + sx0..sy * w + sx0 + len];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(di) = d_in.as_deref_mut() {
                            let dirow = &mut di[ic * hw + sy * w + sx0..ic * hw + sy * w + sx0 + len];
                            for (dv, ov) in dirow.iter_mut().zip(drow) {
                                *dv += wv * ov;
                            }
                        }
                    }
                    g[widx] += acc;
                }
            }
        }
    }
}

#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Activations kept for the backward pass, reused across samples.
struct Workspace {
    /// Input to each block plus the output of the last one.
    block_io: Vec<Vec<f64>>,
    za: Vec<Vec<f64>>,
    aa: Vec<Vec<f64>>,
    fc_in: Vec<Vec<f64>>,
    fc_z: Vec<Vec<f64>>,
    d_io: Vec<f64>,
    d_io_next: Vec<f64>,
    d_a: Vec<f64>,
    d_fc: Vec<f64>,
    d_fc_next: Vec<f64>,
}

pub(crate) struct Engine<'a> {
    arch: &'a ArchSpec,
    params: &'a [f64],
    layout: Layout,
    ws: Workspace,
}

impl<'a> Engine<'a> {
    fn new(m: &'a ModelParams) -> Result<Self, PosnetError> {
        let layout = Layout::new(&m.arch);
        if m.params.len() != layout.n_params {
            return Err(PosnetError::ParamLength { expected: layout.n_params, got: m.params.len() });
        }
        let hw = layout.h * layout.w;
        let mut chans = vec![2];
        chans.extend(&m.arch.conv_channels);
        let max_c = *chans.iter().max().expect("non-empty");
        let ws = Workspace {
            block_io: chans.iter().map(|c| vec![0.0; c * hw]).collect(),
            za: m.arch.conv_channels.iter().map(|c| vec![0.0; c * hw]).collect(),
            aa: m.arch.conv_channels.iter().map(|c| vec![0.0; c * hw]).collect(),
            fc_in: layout.fcs.iter().map(|f| vec![0.0; f.n_in]).collect(),
            fc_z: layout.fcs.iter().map(|f| vec![0.0; f.n_out]).collect(),
            d_io: vec![0.0; max_c * hw],
            d_io_next: vec![0.0; max_c * hw],
            d_a: vec![0.0; max_c * hw],
            d_fc: vec![0.0; layout.fcs.iter().map(|f| f.n_in.max(f.n_out)).max().unwrap_or(2)],
            d_fc_next: vec![0.0; layout.fcs.iter().map(|f| f.n_in.max(f.n_out)).max().unwrap_or(2)],
        };
        Ok(Self { arch: &m.arch, params: &m.params, layout, ws })
    }

    fn check_shape(&self, x: &CsiTensor) -> Result<(), PosnetError> {
        let got = (x.n_antennas, x.n_subcarriers);
        let expected = (self.layout.h, self.layout.w);
        if got != expected || x.data.len() != 2 * got.0 * got.1 {
            return Err(PosnetError::ShapeMismatch { expected, got });
        }
        Ok(())
    }

    fn forward(&mut self, x: &CsiTensor) -> Result<WorldCoord2D, PosnetError> {
        self.check_shape(x)?;
        let (h, w) = (self.layout.h, self.layout.w);
        let hw = h * w;
        let p = self.params;
        let act = self.arch.activation;
        let ws = &mut self.ws;
        for (d, s) in ws.block_io[0].iter_mut().zip(&x.data) {
            *d = s * self.arch.input_scale;
        }
        for (r, b) in self.layout.blocks.iter().enumerate() {
            let (head, tail) = ws.block_io.split_at_mut(r + 1);
            let input = &head[r];
            let out = &mut tail[0];
            conv_forward(p, &b.conv_a, h, w, input, &mut ws.za[r]);
            for (a, z) in ws.aa[r].iter_mut().zip(&ws.za[r]) {
                *a = act.apply(*z);
            }
            conv_forward(p, &b.conv_b, h, w, &ws.aa[r], out);
            match &b.skip {
                None => {
                    for (o, i) in out.iter_mut().zip(input.iter()) {
                        *o += i;
                    }
                }
                Some(s) => {
                    let mut proj = vec![0.0; b.conv_b.c_out * hw];
                    conv_forward(p, s, h, w, input, &mut proj);
                    for (o, i) in out.iter_mut().zip(&proj) {
                        *o += i;
                    }
                }
            }
            if !out.iter().all(|v| v.is_finite()) {
                return Err(PosnetError::NonFinite { layer: format!("block{r}") });
            }
        }
        let n_fc = self.layout.fcs.len();
        ws.fc_in[0].copy_from_slice(&ws.block_io[self.layout.blocks.len()]);
        for (n, f) in self.layout.fcs.iter().enumerate() {
            let z = &mut ws.fc_z[n];
            let xin = &ws.fc_in[n];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &p[f.w_off + o * f.n_in..f.w_off + (o + 1) * f.n_in];
                *zo = p[f.b_off + o] + row.iter().zip(xin).map(|(a, b)| a * b).sum::<f64>();
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(PosnetError::NonFinite { layer: format!("fc{n}") });
            }
            if n + 1 < n_fc {
                let (z, next) = (&ws.fc_z[n], &mut ws.fc_in[n + 1]);
                for (a, zv) in next.iter_mut().zip(z) {
                    *a = act.apply(*zv);
                }
            }
        }
        let z = &ws.fc_z[n_fc - 1];
        let s = self.arch.output_scale;
        let off = self.arch.output_offset;
        Ok(WorldCoord2D::new(off[0] + s * z[0], off[1] + s * z[1]))
    }

    /// Accumulates `d(loss)/d(params)` into `g` given `d(loss)/d(output)`.
    /// Must follow `forward` on the same sample.
    fn backward(&mut self, d_out: [f64; 2], g: &mut [f64]) {
        let (h, w) = (self.layout.h, self.layout.w);
        let hw = h * w;
        let p = self.params;
        let act = self.arch.activation;
        let ws = &mut self.ws;
        let n_fc = self.layout.fcs.len();
        let s = self.arch.output_scale;
        ws.d_fc[..2].copy_from_slice(&[s * d_out[0], s * d_out[1]]);
        for n in (0..n_fc).rev() {
            let f = &self.layout.fcs[n];
            let xin = &ws.fc_in[n];
            let dz = &ws.d_fc[..f.n_out];
            for (o, &d) in dz.iter().enumerate() {
                g[f.b_off + o] += d;
                let grow = &mut g[f.w_off + o * f.n_in..f.w_off + (o + 1) * f.n_in];
                for (gv, xv) in grow.iter_mut().zip(xin) {
                    *gv += d * xv;
                }
            }
            let dx = &mut ws.d_fc_next[..f.n_in];
            dx.fill(0.0);
            for (o, &d) in dz.iter().enumerate() {
                let row = &p[f.w_off + o * f.n_in..f.w_off + (o + 1) * f.n_in];
                for (dv, wv) in dx.iter_mut().zip(row) {
                    *dv += d * wv;
                }
            }
            if n > 0 {
                // through the activation feeding this layer
                let z = &ws.fc_z[n - 1];
                for ((dv, zv), av) in dx.iter_mut().zip(z).zip(xin) {
                    *dv *= act.derivative(*zv, *av);
                }
            }
            std::mem::swap(&mut ws.d_fc, &mut ws.d_fc_next);
        }
        let n_blocks = self.layout.blocks.len();
        if n_blocks == 0 {
            return;
        }
        let flat = self.layout.flat_len();
        ws.d_io[..flat].copy_from_slice(&ws.d_fc[..flat]);
        for r in (0..n_blocks).rev() {
            let b = &self.layout.blocks[r];
            let c_in = b.conv_a.c_in;
            let c_out = b.conv_b.c_out;
            let input = &ws.block_io[r];
            let d_out = &ws.d_io[..c_out * hw];
            let d_in = &mut ws.d_io_next[..c_in * hw];
            let need_input_grad = r > 0;
            d_in.fill(0.0);
            // shortcut
            match &b.skip {
                None => d_in.copy_from_slice(d_out),
                Some(sk) => conv_backward(p, g, sk, h, w, input, d_out, need_input_grad.then_some(&mut *d_in)),
            }
            let d_a = &mut ws.d_a[..c_out * hw];
            d_a.fill(0.0);
            conv_backward(p, g, &b.conv_b, h, w, &ws.aa[r], d_out, Some(&mut *d_a));
            for ((dv, zv), av) in d_a.iter_mut().zip(&ws.za[r]).zip(&ws.aa[r]) {
                *dv *= act.derivative(*zv, *av);
            }
            conv_backward(p, g, &b.conv_a, h, w, input, d_a, need_input_grad.then_some(&mut *d_in));
            std::mem::swap(&mut ws.d_io, &mut ws.d_io_next);
        }
    }

    fn check_grad(&self, g: &[f64]) -> Result<(), PosnetError> {
        match g.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(PosnetError::NonFinite { layer: format!("{} (gradient)", self.layout.layer_of(i)) }),
            None => Ok(()),
        }
    }
}

/// A training pair: network input and target position.
pub type Pair<'a> = (&'a CsiTensor, WorldCoord2D);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Self) {
        for (x, y) in self.0.iter_mut().zip(&other.0) {
            *x += a * y;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl ModelParams {
    pub fn zeros(arch: ArchSpec) -> Result<Self, PosnetError> {
        arch.validate()?;
        let n = arch.n_params();
        Ok(Self { arch, params: vec![0.0; n] })
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(arch: ArchSpec, rng: &mut TaskRng) -> Result<Self, PosnetError> {
        let mut m = Self::zeros(arch)?;
        let layout = Layout::new(&m.arch);
        let gain = m.arch.activation.init_gain();
        let mut fill = |off: usize, len: usize, fan_in: usize| {
            let bound = (gain / fan_in as f64).sqrt();
            for v in &mut m.params[off..off + len] {
                *v = rng.random_range(-bound..=bound);
            }
        };
        for b in &layout.blocks {
            for c in [Some(&b.conv_a), Some(&b.conv_b), b.skip.as_ref()].into_iter().flatten() {
                fill(c.w_off, c.n_weights(), c.c_in * c.k * c.k);
            }
        }
        for f in &layout.fcs {
            fill(f.w_off, f.n_in * f.n_out, f.n_in);
        }
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn engine(&self) -> Result<Engine<'_>, PosnetError> {
        Engine::new(self)
    }

    pub fn forward(&self, x: &CsiTensor) -> Result<WorldCoord2D, PosnetError> {
        self.engine()?.forward(x)
    }

    pub fn predict_batch<'x>(
        &self,
        xs: impl IntoIterator<Item = &'x CsiTensor>,
    ) -> Result<Vec<WorldCoord2D>, PosnetError> {
        let mut e = self.engine()?;
        xs.into_iter().map(|x| e.forward(x)).collect()
    }

    /// Mean squared positioning error `(1/N) sum ||p - F(x)||^2`.
    pub fn labeled_loss(&self, batch: &[Pair<'_>]) -> Result<f64, PosnetError> {
        if batch.is_empty() {
            return Err(PosnetError::EmptyBatch);
        }
        let mut e = self.engine()?;
        let mut total = 0.0;
        for (x, p) in batch {
            total += e.forward(x)?.distance_sq(*p);
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss `(1/N) sum w_n ||p_n - F(x_n)||^2` and its exact gradient. With no
    /// weights every sample has weight one.
    pub fn grad(&self, batch: &[Pair<'_>], weights: Option<&[f64]>) -> Result<(f64, GradientVector), PosnetError> {
        if batch.is_empty() {
            return Err(PosnetError::EmptyBatch);
        }
        if let Some(w) = weights {
            if w.len() != batch.len() {
                return Err(PosnetError::WeightLength { expected: batch.len(), got: w.len() });
            }
        }
        let inv_n = 1.0 / batch.len() as f64;
        let mut g = GradientVector::zeros(self.n_params());
        let mut e = self.engine()?;
        let mut loss = 0.0;
        for (i, (x, p)) in batch.iter().enumerate() {
            let wgt = weights.map_or(1.0, |w| w[i]);
            let f = e.forward(x)?;
            loss += wgt * f.distance_sq(*p);
            if wgt != 0.0 {
                let c = 2.0 * wgt * inv_n;
                e.backward([c * (f.x - p.x), c * (f.y - p.y)], &mut g.0);
            }
        }
        e.check_grad(&g.0)?;
        Ok((loss * inv_n, g))
    }

    /// Gradient of each per-sample loss `||p_n - F(x_n)||^2`, unscaled.
    pub fn per_sample_grads(&self, batch: &[Pair<'_>]) -> Result<Vec<GradientVector>, PosnetError> {
        let mut e = self.engine()?;
        let n = self.n_params();
        batch
            .iter()
            .map(|(x, p)| {
                let f = e.forward(x)?;
                let mut g = GradientVector::zeros(n);
                e.backward([2.0 * (f.x - p.x), 2.0 * (f.y - p.y)], &mut g.0);
                e.check_grad(&g.0)?;
                Ok(g)
            })
            .collect()
    }

    /// Jacobian of the output with respect to the parameters, one row per
    /// output coordinate.
    pub fn output_jacobian(&self, x: &CsiTensor) -> Result<[GradientVector; 2], PosnetError> {
        let mut e = self.engine()?;
        let n = self.n_params();
        let mut rows = [GradientVector::zeros(n), GradientVector::zeros(n)];
        for (k, row) in rows.iter_mut().enumerate() {
            e.forward(x)?;
            let mut d = [0.0; 2];
            d[k] = 1.0;
            e.backward(d, &mut row.0);
        }
        Ok(rows)
    }

    /// `omega - lr * g`
    pub fn sgd_step(&self, g: &GradientVector, lr: f64) -> Self {
        let mut out = self.clone();
        out.apply_step(g, lr);
        out
    }

    pub fn apply_step(&mut self, g: &GradientVector, lr: f64) {
        for (w, d) in self.params.iter_mut().zip(&g.0) {
            *w -= lr * d;
        }
    }

    pub fn to_checkpoint(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint {
            format_version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            params: self.params.clone(),
        })
        .expect("model serialises")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PosnetError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| PosnetError::Checkpoint(e.to_string()))?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(PosnetError::Version(c.format_version));
        }
        c.arch.validate()?;
        let expected = c.arch.n_params();
        if c.params.len() != expected {
            return Err(PosnetError::ParamLength { expected, got: c.params.len() });
        }
        Ok(Self { arch: c.arch, params: c.params })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    arch: ArchSpec,
    params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::task_rng;
    use rand_distr::{Distribution, StandardNormal};

    pub(crate) fn tiny_arch(act: Activation) -> ArchSpec {
        ArchSpec {
            n_residual_blocks: 2,
            conv_channels: vec![3, 3],
            kernel_size: 3,
            fc_widths: vec![6, 5, 2],
            activation: act,
            input_antennas: 3,
            input_subcarriers: 4,
            input_scale: 1.0,
            output_scale: 1.0,
            output_offset: [0.0, 0.0],
        }
    }

    fn random_tensor(h: usize, w: usize, rng: &mut TaskRng) -> CsiTensor {
        CsiTensor {
            n_antennas: h,
            n_subcarriers: w,
            data: (0..2 * h * w).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = ModelParams::zeros(tiny_arch(Activation::Relu)).unwrap();
        let x = random_tensor(3, 4, &mut task_rng(1, &[]));
        assert_eq!(m.forward(&x).unwrap(), WorldCoord2D::new(0.0, 0.0));
    }

    #[test]
    fn zero_convs_reduce_to_dense_network() {
        let mut arch = tiny_arch(Activation::Tanh);
        arch.conv_channels = vec![2, 2];
        let mut rng = task_rng(2, &[]);
        let mut m = ModelParams::init(arch.clone(), &mut rng).unwrap();
        let layout = Layout::new(&arch);
        for b in &layout.blocks {
            for c in [&b.conv_a, &b.conv_b] {
                let end = c.b_off.unwrap() + c.c_out;
                m.params[c.w_off..end].fill(0.0);
            }
        }
        let mut dense_arch = arch.clone();
        dense_arch.n_residual_blocks = 0;
        dense_arch.conv_channels.clear();
        let first_fc = layout.fcs[0].w_off;
        let dense = ModelParams { arch: dense_arch, params: m.params[first_fc..].to_vec() };
        let x = random_tensor(3, 4, &mut rng);
        let a = m.forward(&x).unwrap();
        let b = dense.forward(&x).unwrap();
        assert!(a.distance(b) < 1e-14);
    }

    #[test]
    fn labeled_loss_examples() {
        let m = ModelParams::zeros(tiny_arch(Activation::Relu)).unwrap();
        let x = random_tensor(3, 4, &mut task_rng(3, &[]));
        assert_eq!(m.labeled_loss(&[(&x, WorldCoord2D::new(0.0, 0.0))]).unwrap(), 0.0);
        assert_eq!(m.labeled_loss(&[(&x, WorldCoord2D::new(3.0, 4.0))]).unwrap(), 25.0);
        let batch = [(&x, WorldCoord2D::new(1.0, 0.0)), (&x, WorldCoord2D::new(0.0, 2.0))];
        assert_eq!(m.labeled_loss(&batch).unwrap(), 2.5);
        assert_eq!(m.labeled_loss(&[]), Err(PosnetError::EmptyBatch));
    }

    #[test]
    fn shape_mismatch_detected() {
        let m = ModelParams::zeros(tiny_arch(Activation::Relu)).unwrap();
        let x = random_tensor(4, 4, &mut task_rng(4, &[]));
        assert!(matches!(m.forward(&x), Err(PosnetError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_layer_named() {
        let mut m = ModelParams::zeros(tiny_arch(Activation::Relu)).unwrap();
        let fc1 = Layout::new(&m.arch).fcs[1].b_off;
        m.params[fc1] = f64::NAN;
        let x = random_tensor(3, 4, &mut task_rng(5, &[]));
        assert_eq!(m.forward(&x), Err(PosnetError::NonFinite { layer: "fc1".into() }));
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let m = ModelParams::init(tiny_arch(Activation::Tanh), &mut task_rng(6, &[])).unwrap();
        let x = random_tensor(3, 4, &mut task_rng(7, &[]));
        let p = m.forward(&x).unwrap();
        let (loss, g) = m.grad(&[(&x, p)], None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn weighted_gradient_is_linear() {
        let mut rng = task_rng(8, &[]);
        let m = ModelParams::init(tiny_arch(Activation::Tanh), &mut rng).unwrap();
        let xs: Vec<_> = (0..4).map(|_| random_tensor(3, 4, &mut rng)).collect();
        let batch: Vec<Pair> = xs.iter().map(|x| (x, WorldCoord2D::new(1.0, -2.0))).collect();
        let (_, g1) = m.grad(&batch, None).unwrap();
        let (_, g2) = m.grad(&batch, Some(&[2.0; 4])).unwrap();
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sgd_step_examples() {
        let m = ModelParams::init(tiny_arch(Activation::Relu), &mut task_rng(9, &[])).unwrap();
        let zero = GradientVector::zeros(m.n_params());
        assert_eq!(m.sgd_step(&zero, 0.1), m);
        let g = GradientVector(m.params.clone());
        assert!(m.sgd_step(&g, 1.0).params.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = ModelParams::init(tiny_arch(Activation::LeakyRelu), &mut task_rng(10, &[])).unwrap();
        let back = ModelParams::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
        let bumped = m.to_checkpoint().replace("\"format_version\": 1", "\"format_version\": 9");
        assert_eq!(ModelParams::from_checkpoint(&bumped), Err(PosnetError::Version(9)));
    }

    #[test]
    fn complexity_counts() {
        let a = tiny_arch(Activation::Relu);
        // block0: 2->3 conv (54) + 3->3 conv (81) + 1x1 skip (6); block1: 81 + 81
        let conv = (2 * 3 * 9 + 3 * 3 * 9 + 2 * 3 + 3 * 3 * 9 + 3 * 3 * 9) * 12;
        let fc = 36 * 6 + 6 * 5 + 5 * 2;
        assert_eq!(a.forward_macs(), (conv + fc) as u64);
        assert_eq!(a.iteration_complexity(10, 3), 16 * a.forward_macs());
    }

    #[test]
    fn invalid_arch_rejected() {
        let mut a = tiny_arch(Activation::Relu);
        a.kernel_size = 2;
        assert!(a.validate().is_err());
        let mut a = tiny_arch(Activation::Relu);
        a.fc_widths = vec![4, 3];
        assert!(a.validate().is_err());
    }
}
