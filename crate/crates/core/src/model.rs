//! Fully-connected networks with exact reverse- and forward-mode derivatives.
//!
//! Parameters live in one flat vector, layer-major, and within a layer the
//! `fan_out × fan_in` weight matrix (row-major, one row per output unit)
//! precedes the `fan_out` biases. Jacobian columns, kernel code and the
//! checkpoint file all share this layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::distill::loss::{LossKind, LossTargets};
use crate::error::{Error, Result};
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`. For ReLU,
    /// `a > 0` iff the preactivation is positive, so the subgradient at zero
    /// is 0.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `N(0, 2/fan_in)` weights, zero biases.
    #[default]
    HeNormal,
    /// `U(-0.05, 0.05)` weights, zero biases.
    SmallUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub init: Init,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: usize,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        Self {
            layer_widths,
            activation,
            init: Init::HeNormal,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidSpec("an MLP needs at least input and output widths".into()));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    fan_in: w[0],
                    fan_out: w[1],
                    w_offset: offset,
                    b_offset: offset + w[0] * w[1],
                };
                offset += (w[0] + 1) * w[1];
                shape
            })
            .collect()
    }
}

/// Flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|x| x.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub step_index: u64,
    pub epoch_index: u64,
}

/// Per-layer activations retained for the backward pass; `acts[0]` is the
/// input and the last entry holds the logits.
struct Trace {
    acts: Vec<Vec<f64>>,
}

pub fn init(spec: &MlpSpec) -> Result<Checkpoint> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let mut params = vec![0.0; spec.num_params()];
    for layer in spec.layers() {
        let w = &mut params[layer.w_offset..layer.b_offset];
        match spec.init {
            Init::HeNormal => {
                let scale = (2.0 / layer.fan_in as f64).sqrt();
                w.iter_mut().for_each(|x| *x = scale * rng::normal(&mut rng));
            }
            Init::SmallUniform => {
                w.iter_mut().for_each(|x| *x = rng.random_range(-0.05..0.05));
            }
        }
    }
    Ok(Checkpoint {
        spec: spec.clone(),
        params: ParamVector(params),
        step_index: 0,
        epoch_index: 0,
    })
}

impl Checkpoint {
    pub fn new(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.num_params() {
            return Err(Error::dims("checkpoint params", spec.num_params(), params.len()));
        }
        Ok(Self {
            spec,
            params,
            step_index: 0,
            epoch_index: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("network input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.spec.layers();
        let p = &self.params.0;
        let mut acts = Vec::with_capacity(layers.len() + 1);
        acts.push(x.to_vec());
        for (l, shape) in layers.iter().enumerate() {
            let input = &acts[l];
            let last = l + 1 == layers.len();
            let out: Vec<f64> = (0..shape.fan_out)
                .map(|o| {
                    let row = &p[shape.w_offset + o * shape.fan_in..shape.w_offset + (o + 1) * shape.fan_in];
                    let z = p[shape.b_offset + o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
                    if last {
                        z
                    } else {
                        self.spec.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        Trace { acts }
    }

    /// Accumulate `scale · J(x)ᵀ·v` into `out` using a recorded trace.
    fn backward_into(&self, trace: &Trace, v: &[f64], scale: f64, out: &mut [f64]) {
        let layers = self.spec.layers();
        let p = &self.params.0;
        let mut delta: Vec<f64> = v.iter().map(|x| x * scale).collect();
        for l in (0..layers.len()).rev() {
            let shape = layers[l];
            let input = &trace.acts[l];
            for o in 0..shape.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut out[shape.w_offset + o * shape.fan_in..shape.w_offset + (o + 1) * shape.fan_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
                out[shape.b_offset + o] += d;
            }
            if l > 0 {
                let mut prev = vec![0.0; shape.fan_in];
                for o in 0..shape.fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &p[shape.w_offset + o * shape.fan_in..shape.w_offset + (o + 1) * shape.fan_in];
                    prev.iter_mut().zip(row).for_each(|(acc, w)| *acc += w * d);
                }
                for (i, acc) in prev.iter_mut().enumerate() {
                    *acc *= self.spec.activation.derivative_from_output(input[i]);
                }
                delta = prev;
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).acts.pop().expect("non-empty trace"))
    }

    /// Logits for every row, flattened example-major (`n × d`).
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<f64>> {
        for x in xs {
            self.check_input(x)?;
        }
        let rows = par::map_slice(xs, |x| self.trace(x).acts.pop().expect("non-empty trace"));
        Ok(rows.concat())
    }

    /// Row-major `d × P` Jacobian of the logits, one backward pass per output.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x);
        let d = self.output_dim();
        let np = self.num_params();
        let mut jac = vec![0.0; d * np];
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            self.backward_into(&trace, &e, 1.0, &mut jac[k * np..(k + 1) * np]);
            e[k] = 0.0;
        }
        Ok(jac)
    }

    /// Vector-Jacobian product `J(x)ᵀ·v` (length P).
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_params()];
        self.vjp_accumulate(x, v, 1.0, &mut out)?;
        Ok(out)
    }

    /// `out += scale · J(x)ᵀ·v`.
    pub fn vjp_accumulate(&self, x: &[f64], v: &[f64], scale: f64, out: &mut [f64]) -> Result<()> {
        self.check_input(x)?;
        if v.len() != self.output_dim() {
            return Err(Error::dims("vjp cotangent", self.output_dim(), v.len()));
        }
        if out.len() != self.num_params() {
            return Err(Error::dims("vjp output", self.num_params(), out.len()));
        }
        let trace = self.trace(x);
        self.backward_into(&trace, v, scale, out);
        Ok(())
    }

    /// Jacobian-vector product `J(x)·u` (length d) by forward-mode tangents.
    pub fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if u.len() != self.num_params() {
            return Err(Error::dims("jvp tangent", self.num_params(), u.len()));
        }
        let layers = self.spec.layers();
        let p = &self.params.0;
        let mut a = x.to_vec();
        let mut ta = vec![0.0; x.len()];
        for (l, shape) in layers.iter().enumerate() {
            let last = l + 1 == layers.len();
            let mut next = vec![0.0; shape.fan_out];
            let mut tnext = vec![0.0; shape.fan_out];
            for o in 0..shape.fan_out {
                let wr = shape.w_offset + o * shape.fan_in..shape.w_offset + (o + 1) * shape.fan_in;
                let w = &p[wr.clone()];
                let dw = &u[wr];
                let mut z = p[shape.b_offset + o];
                let mut tz = u[shape.b_offset + o];
                for i in 0..shape.fan_in {
                    z += w[i] * a[i];
                    tz += w[i] * ta[i] + dw[i] * a[i];
                }
                if last {
                    next[o] = z;
                    tnext[o] = tz;
                } else {
                    let act = self.spec.activation.apply(z);
                    next[o] = act;
                    tnext[o] = tz * self.spec.activation.derivative_from_output(act);
                }
            }
            a = next;
            ta = tnext;
        }
        Ok(ta)
    }

    /// Batch-mean loss and its exact parameter gradient. Per-example
    /// gradients may be computed in parallel; they are summed in index order.
    pub fn loss_and_grad(
        &self,
        xs: &[&[f64]],
        kind: &LossKind,
        targets: &LossTargets<'_>,
    ) -> Result<(f64, ParamVector)> {
        if xs.is_empty() {
            return Err(Error::InvalidSpec("loss gradient needs a nonempty batch".into()));
        }
        targets.check(xs.len(), self.output_dim())?;
        for x in xs {
            self.check_input(x)?;
        }
        let b = xs.len();
        let np = self.num_params();
        let per_example = par::map_range(b, |i| -> Result<(f64, Vec<f64>)> {
            let trace = self.trace(xs[i]);
            let logits = trace.acts.last().expect("non-empty trace");
            let (loss, dlogits) = kind.value_and_grad(logits, targets.teacher_row(i), targets.label(i))?;
            let mut g = vec![0.0; np];
            self.backward_into(&trace, &dlogits, 1.0, &mut g);
            Ok((loss, g))
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; np];
        for item in per_example {
            let (loss, g) = item?;
            total += loss;
            grad.iter_mut().zip(&g).for_each(|(acc, x)| *acc += x);
        }
        let inv = 1.0 / b as f64;
        grad.iter_mut().for_each(|x| *x *= inv);
        Ok((total * inv, ParamVector(grad)))
    }

    /// Gradient of the batch-mean loss.
    pub fn loss_grad(&self, xs: &[&[f64]], kind: &LossKind, targets: &LossTargets<'_>) -> Result<ParamVector> {
        Ok(self.loss_and_grad(xs, kind, targets)?.1)
    }

    /// Copy of this checkpoint with the last layer's weights and biases
    /// multiplied by `c`.
    pub fn with_scaled_output_layer(&self, c: f64) -> Self {
        let mut out = self.clone();
        let last = *self.spec.layers().last().expect("validated spec");
        let end = last.b_offset + last.fan_out;
        out.params.0[last.w_offset..end].iter_mut().for_each(|x| *x *= c);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save(self, path)
    }
}

/// Anything exposing logits and exact tangent products; kernel code is
/// generic over this so wrapped networks (e.g. rescaled outputs) share it.
pub trait TangentModel: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn num_params(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>>;
    fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>>;
    /// Training step the parameters come from, when known.
    fn step_index(&self) -> u64 {
        0
    }
}

impl TangentModel for Checkpoint {
    fn input_dim(&self) -> usize {
        Checkpoint::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        Checkpoint::output_dim(self)
    }
    fn num_params(&self) -> usize {
        Checkpoint::num_params(self)
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Checkpoint::forward(self, x)
    }
    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        Checkpoint::jacobian(self, x)
    }
    fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Checkpoint::vjp(self, x, v)
    }
    fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Checkpoint::jvp(self, x, u)
    }
    fn step_index(&self) -> u64 {
        self.step_index
    }
}

/// The network `x ↦ scale · f(x)`; its kernel is `scale² ·` the inner kernel.
pub struct ScaledOutput<'a, M: TangentModel> {
    pub inner: &'a M,
    pub scale: f64,
}

impl<M: TangentModel> TangentModel for ScaledOutput<'_, M> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inner.forward(x)?.into_iter().map(|v| v * self.scale).collect())
    }
    fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inner.jacobian(x)?.into_iter().map(|v| v * self.scale).collect())
    }
    fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inner.vjp(x, v)?.into_iter().map(|g| g * self.scale).collect())
    }
    fn jvp(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inner.jvp(x, u)?.into_iter().map(|v| v * self.scale).collect())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KDCL";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Serialize to the `KDCL` binary format (all integers little-endian).
pub fn encode(c: &Checkpoint) -> Vec<u8> {
    let widths = &c.spec.layer_widths;
    let mut buf = Vec::with_capacity(27 + 4 * widths.len() + 8 * c.params.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for &w in widths {
        buf.extend_from_slice(&(w as u32).to_le_bytes());
    }
    buf.push(c.spec.activation.code());
    buf.extend_from_slice(&c.spec.seed.to_le_bytes());
    buf.extend_from_slice(&(c.params.len() as u64).to_le_bytes());
    for x in &c.params.0 {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated checkpoint: need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parse the `KDCL` binary format. Step and epoch indices are not part of
/// the format and come back as zero; the init scheme reads back as He.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}")));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().expect("2 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version: expected {CHECKPOINT_VERSION}, found {version}"
        )));
    }
    let count = cur.u32("width count")? as usize;
    if count > (bytes.len() - cur.pos) / 4 {
        return Err(Error::Format(format!("truncated checkpoint: {count} widths declared")));
    }
    let mut widths = Vec::with_capacity(count);
    for _ in 0..count {
        widths.push(cur.u32("layer width")? as usize);
    }
    let activation = Activation::from_code(cur.take(1, "activation")?[0])?;
    let seed = cur.u64("seed")?;
    let np = cur.u64("parameter count")? as usize;
    let spec = MlpSpec {
        layer_widths: widths,
        activation,
        init: Init::HeNormal,
        seed,
    };
    spec.validate().map_err(|e| Error::Format(e.to_string()))?;
    if np != spec.num_params() {
        return Err(Error::Format(format!(
            "parameter count {np} does not match layer widths (expected {})",
            spec.num_params()
        )));
    }
    let raw = cur.take(np.checked_mul(8).ok_or_else(|| Error::Format("parameter count overflow".into()))?, "parameters")?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len() - cur.pos)));
    }
    Checkpoint::new(spec, ParamVector(params))
}

/// Write a checkpoint atomically (temp file + rename).
pub fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(c))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
