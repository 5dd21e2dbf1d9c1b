//! The activation layer: forward computes `y = f(x)` and retains a
//! [`SavedActivation`] according to the chosen strategy; backward
//! reconstructs `f'` from what was saved and multiplies by the upstream
//! gradient. Also: analytic memory accounting for layer blocks.
//!
//! Strategies:
//!
//! - `Baseline` — save the input tensor, backward uses exact `f'(x)`.
//! - `Bitset` — save the output (sharing the returned buffer, no copy) plus
//!   one packed indicator bit per element; backward evaluates the branch
//!   approximation `q(y)`.
//! - `SignBit` — save `y - C` with the indicator in the freed sign bit; zero
//!   extra bytes, but the saved tensor replaces the output, so the consumer
//!   has to be supplied explicitly (see [`forward_signbit_fused`]).
//! - `PrecisionBit` — the output's mantissa LSB is overwritten with the
//!   indicator and that modified value *is* the layer output; forward is no
//!   longer exact to the last bit.
//!
//! Kernels walk contiguous chunks with a branch-free inner loop: both branch
//! approximations are evaluated and the indicator selects between them.
//! Gradient math runs in f64 regardless of the storage format.

use std::sync::Arc;

use crate::activation::{q_eval_clamped, ActivationKind, Branch};
use crate::codec::PackedBits;
use crate::{Error, Result};

/// What a layer keeps for the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Baseline,
    Bitset,
    SignBit,
    PrecisionBit,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Baseline,
        Strategy::Bitset,
        Strategy::SignBit,
        Strategy::PrecisionBit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Bitset => "bitset",
            Strategy::SignBit => "sign-bit",
            Strategy::PrecisionBit => "precision-bit",
        }
    }

    pub fn parse_name(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Strategy::Baseline),
            "bitset" | "invact" => Ok(Strategy::Bitset),
            "sign-bit" | "signbit" => Ok(Strategy::SignBit),
            "precision-bit" | "precisionbit" | "lsb" => Ok(Strategy::PrecisionBit),
            other => Err(Error::Parse(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Storage format of tensor elements. Training formats are binary16 and
/// binary32; binary64 exists for the double-precision equivalence study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementFormat {
    F16,
    F32,
    F64,
}

impl ElementFormat {
    pub fn bytes(self) -> usize {
        match self {
            ElementFormat::F16 => 2,
            ElementFormat::F32 => 4,
            ElementFormat::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementFormat::F16 => "binary16",
            ElementFormat::F32 => "binary32",
            ElementFormat::F64 => "binary64",
        }
    }

    pub fn parse_name(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "binary16" | "f16" | "half" => Ok(ElementFormat::F16),
            "binary32" | "f32" | "float" => Ok(ElementFormat::F32),
            "binary64" | "f64" | "double" => Ok(ElementFormat::F64),
            other => Err(Error::Parse(format!("unknown element format {other:?}"))),
        }
    }

    /// One ulp at the magnitude of `v`.
    pub fn ulp(self, v: f64) -> f64 {
        let v = v.abs();
        match self {
            ElementFormat::F16 => {
                let h = half::f16::from_f64(v);
                (half::f16::from_bits(h.to_bits() + 1).to_f64() - h.to_f64()).abs()
            }
            ElementFormat::F32 => {
                let f = v as f32;
                (f32::from_bits(f.to_bits() + 1) - f) as f64
            }
            ElementFormat::F64 => f64::from_bits(v.to_bits() + 1) - v,
        }
    }
}

#[derive(Debug)]
enum Storage {
    F16(Vec<u16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Storage {
    fn len(&self) -> usize {
        match self {
            Storage::F16(v) => v.len(),
            Storage::F32(v) => v.len(),
            Storage::F64(v) => v.len(),
        }
    }

    fn format(&self) -> ElementFormat {
        match self {
            Storage::F16(_) => ElementFormat::F16,
            Storage::F32(_) => ElementFormat::F32,
            Storage::F64(_) => ElementFormat::F64,
        }
    }
}

/// A flat array of elements plus shape metadata. Cloning shares the buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    data: Arc<Storage>,
    shape: Vec<usize>,
}

impl Tensor {
    pub fn from_f64(values: &[f64], shape: &[usize], format: ElementFormat) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} wants {n} elements, got {}",
                values.len()
            )));
        }
        let data = match format {
            ElementFormat::F16 => Storage::F16(
                values
                    .iter()
                    .map(|&v| half::f16::from_f64(v).to_bits())
                    .collect(),
            ),
            ElementFormat::F32 => Storage::F32(values.iter().map(|&v| v as f32).collect()),
            ElementFormat::F64 => Storage::F64(values.to_vec()),
        };
        Ok(Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
        })
    }

    pub fn flat(values: &[f64], format: ElementFormat) -> Tensor {
        Self::from_f64(values, &[values.len()], format).unwrap()
    }

    /// Wraps an f32 buffer without conversion.
    pub fn from_f32_vec(values: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Argument(format!(
                "shape {shape:?} wants {n} elements, got {}",
                values.len()
            )));
        }
        Ok(Tensor {
            data: Arc::new(Storage::F32(values)),
            shape: shape.to_vec(),
        })
    }

    /// The backing f32 slice, when this tensor is binary32.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &*self.data {
            Storage::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn format(&self) -> ElementFormat {
        self.data.format()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        match &*self.data {
            Storage::F16(v) => half::f16::from_bits(v[i]).to_f64(),
            Storage::F32(v) => v[i] as f64,
            Storage::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Raw bit pattern of element `i`, zero-extended to u64.
    pub fn bits(&self, i: usize) -> u64 {
        match &*self.data {
            Storage::F16(v) => v[i] as u64,
            Storage::F32(v) => v[i].to_bits() as u64,
            Storage::F64(v) => v[i].to_bits(),
        }
    }

    /// True when both tensors view the same allocation.
    pub fn shares_buffer(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    pub fn byte_size(&self) -> usize {
        self.len() * self.format().bytes()
    }
}

// Element-level codecs the kernels are monomorphized over. binary16 elements
// are their raw bits (u16).
trait Elem: Copy + Send + Sync + 'static {
    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;
    fn with_lsb(self, s: bool) -> Self;
    fn lsb(self) -> bool;
    /// Nonnegative magnitude in this format with the sign bit set to `s`.
    fn sign_encode(magnitude: f64, s: bool) -> Self;
    /// (|value|, sign bit).
    fn sign_decode(self) -> (f64, bool);
    fn into_storage(v: Vec<Self>) -> Storage;
    fn slice(s: &Storage) -> &[Self];
}

impl Elem for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn with_lsb(self, s: bool) -> Self {
        f32::from_bits(if s {
            self.to_bits() | 1
        } else {
            self.to_bits() & !1
        })
    }
    #[inline]
    fn lsb(self) -> bool {
        self.to_bits() & 1 == 1
    }
    #[inline]
    fn sign_encode(magnitude: f64, s: bool) -> Self {
        let bits = (magnitude as f32).to_bits();
        f32::from_bits(if s { bits | 0x8000_0000 } else { bits })
    }
    #[inline]
    fn sign_decode(self) -> (f64, bool) {
        (self.abs() as f64, self.is_sign_negative())
    }
    fn into_storage(v: Vec<Self>) -> Storage {
        Storage::F32(v)
    }
    fn slice(s: &Storage) -> &[Self] {
        match s {
            Storage::F32(v) => v,
            _ => unreachable!("format mismatch"),
        }
    }
}

impl Elem for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        v
    }
    #[inline]
    fn with_lsb(self, s: bool) -> Self {
        f64::from_bits(if s {
            self.to_bits() | 1
        } else {
            self.to_bits() & !1
        })
    }
    #[inline]
    fn lsb(self) -> bool {
        self.to_bits() & 1 == 1
    }
    #[inline]
    fn sign_encode(magnitude: f64, s: bool) -> Self {
        let bits = magnitude.to_bits();
        f64::from_bits(if s { bits | (1u64 << 63) } else { bits })
    }
    #[inline]
    fn sign_decode(self) -> (f64, bool) {
        (self.abs(), self.is_sign_negative())
    }
    fn into_storage(v: Vec<Self>) -> Storage {
        Storage::F64(v)
    }
    fn slice(s: &Storage) -> &[Self] {
        match s {
            Storage::F64(v) => v,
            _ => unreachable!("format mismatch"),
        }
    }
}

impl Elem for u16 {
    #[inline]
    fn widen(self) -> f64 {
        half::f16::from_bits(self).to_f64()
    }
    #[inline]
    fn narrow(v: f64) -> Self {
        half::f16::from_f64(v).to_bits()
    }
    #[inline]
    fn with_lsb(self, s: bool) -> Self {
        if s {
            self | 1
        } else {
            self & !1
        }
    }
    #[inline]
    fn lsb(self) -> bool {
        self & 1 == 1
    }
    #[inline]
    fn sign_encode(magnitude: f64, s: bool) -> Self {
        let bits = half::f16::from_f64(magnitude).to_bits();
        if s {
            bits | 0x8000
        } else {
            bits
        }
    }
    #[inline]
    fn sign_decode(self) -> (f64, bool) {
        (
            half::f16::from_bits(self & 0x7FFF).to_f64(),
            self & 0x8000 != 0,
        )
    }
    fn into_storage(v: Vec<Self>) -> Storage {
        Storage::F16(v)
    }
    fn slice(s: &Storage) -> &[Self] {
        match s {
            Storage::F16(v) => v,
            _ => unreachable!("format mismatch"),
        }
    }
}

/// What the layer retained for backward.
#[derive(Debug, Clone)]
pub enum SavedPayload {
    /// Baseline: a copy of the input tensor.
    Input(Tensor),
    /// Bitset: the output tensor (buffer shared with the returned `ys`) plus
    /// one indicator bit per element.
    OutputWithBits { output: Tensor, bits: PackedBits },
    /// SignBit: `y - C` per element with the indicator in the sign bit.
    SignEncoded(Tensor),
    /// PrecisionBit: the output itself, whose mantissa LSB is the indicator.
    LsbEncoded(Tensor),
}

/// The per-layer context produced by [`forward`] and consumed by
/// [`backward`].
#[derive(Debug, Clone)]
pub struct SavedActivation {
    pub kind: ActivationKind,
    pub strategy: Strategy,
    pub format: ElementFormat,
    pub n: usize,
    pub payload: SavedPayload,
}

impl SavedActivation {
    /// Bytes this context holds beyond the tensor the next layer keeps
    /// anyway: the full input copy for Baseline, the packed bits for Bitset,
    /// nothing for the embedded encodings.
    pub fn extra_bytes(&self) -> usize {
        match &self.payload {
            SavedPayload::Input(t) => t.byte_size(),
            SavedPayload::OutputWithBits { bits, .. } => bits.storage_bytes(),
            SavedPayload::SignEncoded(_) | SavedPayload::LsbEncoded(_) => 0,
        }
    }
}

/// Splits `0..n` into byte-aligned chunks and maps `work` over them, on this
/// thread or across a scoped pool.
fn run_chunked<T: Send>(
    n: usize,
    threads: usize,
    work: impl Fn(usize, usize) -> T + Sync,
) -> Vec<T> {
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.max(1).min(n);
    // chunk starts stay multiples of 8 so per-chunk bit packing concatenates
    let chunk = n.div_ceil(threads).div_ceil(8).max(1) * 8;
    let ranges: Vec<(usize, usize)> = (0..n)
        .step_by(chunk)
        .map(|start| (start, (start + chunk).min(n)))
        .collect();
    if ranges.len() == 1 {
        let (s, e) = ranges[0];
        return vec![work(s, e)];
    }
    let mut out: Vec<Option<T>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let work = &work;
        let handles: Vec<_> = ranges
            .iter()
            .map(|&(s, e)| scope.spawn(move || work(s, e)))
            .collect();
        for (slot, h) in out.iter_mut().zip(handles) {
            *slot = Some(h.join().expect("kernel thread panicked"));
        }
    });
    out.into_iter().map(|o| o.unwrap()).collect()
}

fn forward_typed<E: Elem>(
    kind: ActivationKind,
    strategy: Strategy,
    src: &[E],
    threads: usize,
) -> (Vec<E>, Option<PackedBits>, Option<Vec<E>>) {
    let t = kind.threshold();
    let c = kind.min_value();
    let n = src.len();

    let chunks = run_chunked(n, threads, |start, end| {
        let m = end - start;
        let mut ys: Vec<E> = Vec::with_capacity(m);
        let mut bit_bytes: Vec<u8> = match strategy {
            Strategy::Bitset => vec![0u8; m.div_ceil(8)],
            _ => Vec::new(),
        };
        let mut enc: Vec<E> = match strategy {
            Strategy::SignBit => Vec::with_capacity(m),
            _ => Vec::new(),
        };
        for (j, &xe) in src[start..end].iter().enumerate() {
            let x = xe.widen();
            let y = kind.eval(x);
            let s = x < t;
            match strategy {
                Strategy::Baseline => ys.push(E::narrow(y)),
                Strategy::Bitset => {
                    ys.push(E::narrow(y));
                    bit_bytes[j / 8] |= (s as u8) << (j % 8);
                }
                Strategy::SignBit => {
                    ys.push(E::narrow(y));
                    enc.push(E::sign_encode((y - c).max(0.0), s));
                }
                Strategy::PrecisionBit => ys.push(E::narrow(y).with_lsb(s)),
            }
        }
        (ys, bit_bytes, enc)
    });

    let mut ys = Vec::with_capacity(n);
    let mut bit_bytes = Vec::with_capacity(n.div_ceil(8));
    let mut enc = Vec::new();
    for (cy, cb, ce) in chunks {
        ys.extend(cy);
        bit_bytes.extend(cb);
        enc.extend(ce);
    }
    let bits = (strategy == Strategy::Bitset).then(|| PackedBits::from_raw(bit_bytes, n));
    let enc = (strategy == Strategy::SignBit).then_some(enc);
    (ys, bits, enc)
}

/// Applies the activation elementwise and builds the saved context for the
/// chosen strategy.
pub fn forward(
    kind: ActivationKind,
    strategy: Strategy,
    xs: &Tensor,
) -> (Tensor, SavedActivation) {
    forward_threaded(kind, strategy, xs, 1)
}

/// [`forward`] with the kernel split across `threads` worker threads.
pub fn forward_threaded(
    kind: ActivationKind,
    strategy: Strategy,
    xs: &Tensor,
    threads: usize,
) -> (Tensor, SavedActivation) {
    fn go<E: Elem>(
        kind: ActivationKind,
        strategy: Strategy,
        xs: &Tensor,
        threads: usize,
    ) -> (Tensor, SavedActivation) {
        let (ys, bits, enc) = forward_typed::<E>(kind, strategy, E::slice(&xs.data), threads);
        let ys = Tensor {
            data: Arc::new(E::into_storage(ys)),
            shape: xs.shape.clone(),
        };
        let payload = match strategy {
            Strategy::Baseline => SavedPayload::Input(xs.clone()),
            Strategy::Bitset => SavedPayload::OutputWithBits {
                output: ys.clone(),
                bits: bits.unwrap(),
            },
            Strategy::SignBit => SavedPayload::SignEncoded(Tensor {
                data: Arc::new(E::into_storage(enc.unwrap())),
                shape: xs.shape.clone(),
            }),
            Strategy::PrecisionBit => SavedPayload::LsbEncoded(ys.clone()),
        };
        let ctx = SavedActivation {
            kind,
            strategy,
            format: xs.format(),
            n: xs.len(),
            payload,
        };
        (ys, ctx)
    }

    match xs.format() {
        ElementFormat::F16 => go::<u16>(kind, strategy, xs, threads),
        ElementFormat::F32 => go::<f32>(kind, strategy, xs, threads),
        ElementFormat::F64 => go::<f64>(kind, strategy, xs, threads),
    }
}

/// The sign-bit strategy as it has to be used in practice: the exact output
/// is handed to the consumer (the next layer's transform) and only the
/// sign-encoded tensor is retained, so nothing but the encoded tensor
/// outlives this call. A plain [`forward`] with `Strategy::SignBit` exists
/// for testing, but the strategy is not a drop-in replacement — whatever
/// follows the activation has to be told about the encoding, which is why
/// this fused entry point is the supported form.
pub fn forward_signbit_fused<R>(
    kind: ActivationKind,
    xs: &Tensor,
    consumer: impl FnOnce(&Tensor) -> R,
) -> (R, SavedActivation) {
    let (ys, ctx) = forward(kind, Strategy::SignBit, xs);
    (consumer(&ys), ctx)
}

fn backward_typed<E: Elem>(ctx: &SavedActivation, dys: &Tensor, threads: usize) -> Vec<E> {
    let kind = ctx.kind;
    let dsrc: &[E] = E::slice(&dys.data);
    let n = dsrc.len();
    let c = kind.min_value();

    let chunks: Vec<Vec<E>> = match &ctx.payload {
        SavedPayload::Input(xs) => {
            let xsrc: &[E] = E::slice(&xs.data);
            run_chunked(n, threads, |start, end| {
                xsrc[start..end]
                    .iter()
                    .zip(&dsrc[start..end])
                    .map(|(&xe, &de)| E::narrow(de.widen() * kind.derivative(xe.widen())))
                    .collect()
            })
        }
        SavedPayload::OutputWithBits { output, bits } => {
            let ysrc: &[E] = E::slice(&output.data);
            run_chunked(n, threads, |start, end| {
                (start..end)
                    .map(|i| {
                        let y = ysrc[i].widen();
                        let ql = q_eval_clamped(kind, y, Branch::Left);
                        let qr = q_eval_clamped(kind, y, Branch::Right);
                        let q = if bits.get(i) { ql } else { qr };
                        E::narrow(dsrc[i].widen() * q)
                    })
                    .collect()
            })
        }
        SavedPayload::SignEncoded(enc) => {
            let esrc: &[E] = E::slice(&enc.data);
            run_chunked(n, threads, |start, end| {
                esrc[start..end]
                    .iter()
                    .zip(&dsrc[start..end])
                    .map(|(&ee, &de)| {
                        let (magnitude, s) = ee.sign_decode();
                        let y = magnitude + c;
                        let ql = q_eval_clamped(kind, y, Branch::Left);
                        let qr = q_eval_clamped(kind, y, Branch::Right);
                        let q = if s { ql } else { qr };
                        E::narrow(de.widen() * q)
                    })
                    .collect()
            })
        }
        SavedPayload::LsbEncoded(enc) => {
            let esrc: &[E] = E::slice(&enc.data);
            run_chunked(n, threads, |start, end| {
                esrc[start..end]
                    .iter()
                    .zip(&dsrc[start..end])
                    .map(|(&ee, &de)| {
                        let s = ee.lsb();
                        let y = ee.widen();
                        let ql = q_eval_clamped(kind, y, Branch::Left);
                        let qr = q_eval_clamped(kind, y, Branch::Right);
                        let q = if s { ql } else { qr };
                        E::narrow(de.widen() * q)
                    })
                    .collect()
            })
        }
    };
    let mut out = Vec::with_capacity(n);
    for chunk in chunks {
        out.extend(chunk);
    }
    out
}

/// Gradient of the loss with respect to the layer input, from the saved
/// context and the upstream gradient.
pub fn backward(ctx: &SavedActivation, dys: &Tensor) -> Result<Tensor> {
    backward_threaded(ctx, dys, 1)
}

/// [`backward`] with the kernel split across `threads` worker threads.
pub fn backward_threaded(ctx: &SavedActivation, dys: &Tensor, threads: usize) -> Result<Tensor> {
    if dys.len() != ctx.n {
        return Err(Error::Argument(format!(
            "upstream gradient has {} elements, context has {}",
            dys.len(),
            ctx.n
        )));
    }
    if dys.format() != ctx.format {
        return Err(Error::Argument(format!(
            "upstream gradient is {}, context is {}",
            dys.format().name(),
            ctx.format.name()
        )));
    }
    let shape = dys.shape().to_vec();
    let data = match ctx.format {
        ElementFormat::F16 => Storage::F16(backward_typed::<u16>(ctx, dys, threads)),
        ElementFormat::F32 => Storage::F32(backward_typed::<f32>(ctx, dys, threads)),
        ElementFormat::F64 => Storage::F64(backward_typed::<f64>(ctx, dys, threads)),
    };
    Ok(Tensor {
        data: Arc::new(data),
        shape,
    })
}

// ---------------------------------------------------------------------------
// Analytic memory accounting
// ---------------------------------------------------------------------------

/// One layer in a block description, with the tensors it saves for backward
/// expressed per token.
#[derive(Debug, Clone)]
pub enum LayerSpec {
    /// Affine layer: saves its input (`in_features` per token).
    Linear {
        label: String,
        in_features: usize,
        out_features: usize,
    },
    /// Pointwise activation over `width` features.
    Activation { label: String, width: usize },
    /// A layer that saves nothing for backward (the case where inverted
    /// activations cannot help).
    Stateless { label: String, width: usize },
    /// Opaque layer that saves `per_token` elements and keeps its input
    /// alive (stand-in for norms, attention internals, ...).
    Saved { label: String, per_token: usize },
}

impl LayerSpec {
    pub fn label(&self) -> &str {
        match self {
            LayerSpec::Linear { label, .. }
            | LayerSpec::Activation { label, .. }
            | LayerSpec::Stateless { label, .. }
            | LayerSpec::Saved { label, .. } => label,
        }
    }

    /// Elements saved per token under the baseline policy.
    fn baseline_elems(&self) -> usize {
        match self {
            LayerSpec::Linear { in_features, .. } => *in_features,
            LayerSpec::Activation { width, .. } => *width,
            LayerSpec::Stateless { .. } => 0,
            LayerSpec::Saved { per_token, .. } => *per_token,
        }
    }

    /// Whether this layer keeps its own input alive for backward — the
    /// condition under which the preceding activation's output is shared
    /// instead of stored twice.
    fn saves_input(&self, strategy: Strategy) -> bool {
        match self {
            LayerSpec::Linear { .. } | LayerSpec::Saved { .. } => true,
            LayerSpec::Stateless { .. } => false,
            // an inverted activation saves its output, not its input
            LayerSpec::Activation { .. } => strategy == Strategy::Baseline,
        }
    }
}

/// A sequence of layers evaluated over `tokens` positions.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub name: String,
    pub tokens: usize,
    pub layers: Vec<LayerSpec>,
}

impl BlockSpec {
    /// `key=value` form: `name`, `tokens`, then `layer0..layerN` entries of
    /// the shape `linear <label> <in> <out>`, `activation <label> <width>`,
    /// `stateless <label> <width>`, or `saved <label> <per_token>`.
    pub fn to_kv(&self) -> String {
        let mut kv = crate::kv::KvFile::new();
        kv.push("name", &self.name);
        kv.push("tokens", self.tokens);
        for (i, layer) in self.layers.iter().enumerate() {
            let value = match layer {
                LayerSpec::Linear {
                    label,
                    in_features,
                    out_features,
                } => format!("linear {label} {in_features} {out_features}"),
                LayerSpec::Activation { label, width } => format!("activation {label} {width}"),
                LayerSpec::Stateless { label, width } => format!("stateless {label} {width}"),
                LayerSpec::Saved { label, per_token } => format!("saved {label} {per_token}"),
            };
            kv.push(format!("layer{i}"), value);
        }
        kv.render()
    }

    pub fn from_kv(text: &str) -> Result<BlockSpec> {
        let kv = crate::kv::KvFile::parse(text)?;
        let name = kv.require("name")?.to_string();
        let tokens = kv.require_usize("tokens")?;
        let mut layers = Vec::new();
        while let Some(entry) = kv.get(&format!("layer{}", layers.len())) {
            let parts: Vec<&str> = entry.split_whitespace().collect();
            let parse_num = |s: &str| -> Result<usize> {
                s.parse()
                    .map_err(|e| Error::Parse(format!("layer entry {entry:?}: {e}")))
            };
            let layer = match parts.as_slice() {
                ["linear", label, input, output] => LayerSpec::Linear {
                    label: label.to_string(),
                    in_features: parse_num(input)?,
                    out_features: parse_num(output)?,
                },
                ["activation", label, width] => LayerSpec::Activation {
                    label: label.to_string(),
                    width: parse_num(width)?,
                },
                ["stateless", label, width] => LayerSpec::Stateless {
                    label: label.to_string(),
                    width: parse_num(width)?,
                },
                ["saved", label, per_token] => LayerSpec::Saved {
                    label: label.to_string(),
                    per_token: parse_num(per_token)?,
                },
                _ => {
                    return Err(Error::Parse(format!(
                        "unrecognized layer entry {entry:?}"
                    )))
                }
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Parse("block spec has no layers".to_string()));
        }
        Ok(BlockSpec {
            name,
            tokens,
            layers,
        })
    }
}

/// The `kind` / `strategy` / `format` triple the CLI reads from a layer
/// config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub kind: ActivationKind,
    pub strategy: Strategy,
    pub format: ElementFormat,
}

impl LayerConfig {
    pub fn to_kv(&self) -> String {
        let mut kv = crate::kv::KvFile::new();
        kv.push("kind", self.kind.name());
        kv.push("strategy", self.strategy.name());
        kv.push("format", self.format.name());
        kv.render()
    }

    pub fn from_kv(text: &str) -> Result<LayerConfig> {
        let kv = crate::kv::KvFile::parse(text)?;
        Ok(LayerConfig {
            kind: ActivationKind::parse_name(kv.require("kind")?)?,
            strategy: Strategy::parse_name(kv.require("strategy")?)?,
            format: ElementFormat::parse_name(kv.require("format")?)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerBytes {
    pub label: String,
    pub baseline: usize,
    pub with_strategy: usize,
}

/// Per-layer and total saved-activation bytes for one strategy vs baseline.
#[derive(Debug, Clone)]
pub struct MemoryEstimate {
    pub block: String,
    pub strategy: Strategy,
    pub format: ElementFormat,
    pub per_layer: Vec<LayerBytes>,
    pub baseline_total: usize,
    pub total: usize,
    pub warnings: Vec<String>,
}

impl MemoryEstimate {
    /// Fraction of baseline bytes saved, in `[0, 1)`.
    pub fn saving(&self) -> f64 {
        if self.baseline_total == 0 {
            0.0
        } else {
            1.0 - self.total as f64 / self.baseline_total as f64
        }
    }
}

/// Analytic byte totals for a block. An activation layer contributes only
/// its indicator bytes when the following layer saves its input (the shared
/// tensor is charged to that layer); otherwise no sharing is possible, the
/// layer falls back to baseline accounting, and a warning is emitted.
pub fn estimate_memory(
    spec: &BlockSpec,
    strategy: Strategy,
    format: ElementFormat,
) -> MemoryEstimate {
    let width = format.bytes();
    let mut per_layer = Vec::new();
    let mut warnings = Vec::new();
    let (mut baseline_total, mut total) = (0usize, 0usize);

    for (i, layer) in spec.layers.iter().enumerate() {
        let n = spec.tokens * layer.baseline_elems();
        let baseline = n * width;
        let with_strategy = match layer {
            LayerSpec::Activation { label, .. } if strategy != Strategy::Baseline => {
                let next_saves = spec
                    .layers
                    .get(i + 1)
                    .map(|next| next.saves_input(strategy))
                    .unwrap_or(false);
                if next_saves {
                    match strategy {
                        Strategy::Bitset => n.div_ceil(8),
                        Strategy::SignBit | Strategy::PrecisionBit => 0,
                        Strategy::Baseline => unreachable!(),
                    }
                } else {
                    warnings.push(format!(
                        "activation {label:?} is not followed by a layer that saves its \
                         input; no saving applies"
                    ));
                    baseline
                }
            }
            _ => baseline,
        };
        baseline_total += baseline;
        total += with_strategy;
        per_layer.push(LayerBytes {
            label: layer.label().to_string(),
            baseline,
            with_strategy,
        });
    }

    MemoryEstimate {
        block: spec.name.clone(),
        strategy,
        format,
        per_layer,
        baseline_total,
        total,
        warnings,
    }
}

/// `Linear(d → e·d) → activation → Linear(e·d → d)` over `tokens` positions.
pub fn mlp_block_spec(d: usize, expansion: usize, tokens: usize) -> BlockSpec {
    let h = d * expansion;
    BlockSpec {
        name: format!("mlp d={d} x{expansion} tokens={tokens}"),
        tokens,
        layers: vec![
            LayerSpec::Linear {
                label: "fc1".into(),
                in_features: d,
                out_features: h,
            },
            LayerSpec::Activation {
                label: "act".into(),
                width: h,
            },
            LayerSpec::Linear {
                label: "fc2".into(),
                in_features: h,
                out_features: d,
            },
        ],
    }
}

/// A transformer-shaped stand-in: per layer a norm, fused QKV projection,
/// attention internals, output projection, second norm, and the MLP. The
/// attention internals are modeled flash-style (no seq² score tensors).
pub fn transformer_block_spec(
    n_layers: usize,
    d: usize,
    expansion: usize,
    seq: usize,
) -> BlockSpec {
    let h = d * expansion;
    let mut layers = Vec::new();
    for l in 0..n_layers {
        layers.extend([
            LayerSpec::Saved {
                label: format!("l{l}.ln1"),
                per_token: d,
            },
            LayerSpec::Linear {
                label: format!("l{l}.qkv"),
                in_features: d,
                out_features: 3 * d,
            },
            LayerSpec::Saved {
                label: format!("l{l}.attn"),
                per_token: 2 * d,
            },
            LayerSpec::Linear {
                label: format!("l{l}.proj"),
                in_features: d,
                out_features: d,
            },
            LayerSpec::Saved {
                label: format!("l{l}.ln2"),
                per_token: d,
            },
            LayerSpec::Linear {
                label: format!("l{l}.fc1"),
                in_features: d,
                out_features: h,
            },
            LayerSpec::Activation {
                label: format!("l{l}.act"),
                width: h,
            },
            LayerSpec::Linear {
                label: format!("l{l}.fc2"),
                in_features: h,
                out_features: d,
            },
        ]);
    }
    BlockSpec {
        name: format!("transformer {n_layers}x(d={d}, x{expansion}) seq={seq}"),
        tokens: seq,
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::frozen_bounds;

    fn ramp(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn forward_bitset_examples() {
        let t = ActivationKind::Gelu.threshold();
        let xs = Tensor::flat(&[0.0], ElementFormat::F32);
        let (ys, ctx) = forward(ActivationKind::Gelu, Strategy::Bitset, &xs);
        assert_eq!(ys.get(0), 0.0);
        match &ctx.payload {
            SavedPayload::OutputWithBits { bits, .. } => assert!(!bits.get(0)),
            _ => panic!("wrong payload"),
        }

        let xs = Tensor::flat(&[t - 1.0, t + 1.0], ElementFormat::F32);
        let (_, ctx) = forward(ActivationKind::Gelu, Strategy::Bitset, &xs);
        match &ctx.payload {
            SavedPayload::OutputWithBits { bits, .. } => {
                assert!(bits.get(0));
                assert!(!bits.get(1));
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn bitset_context_shares_the_output_buffer_and_costs_bits_only() {
        let xs = Tensor::flat(&ramp(1024, -3.0, 3.0), ElementFormat::F32);
        let (ys, ctx) = forward(ActivationKind::Silu, Strategy::Bitset, &xs);
        assert_eq!(ctx.extra_bytes(), 128);
        match &ctx.payload {
            SavedPayload::OutputWithBits { output, .. } => {
                assert!(output.shares_buffer(&ys));
            }
            _ => panic!("wrong payload"),
        }
    }

    #[test]
    fn extra_bytes_per_strategy() {
        let xs = Tensor::flat(&ramp(100, -2.0, 2.0), ElementFormat::F16);
        for (strategy, expect) in [
            (Strategy::Baseline, 200),
            (Strategy::Bitset, 13),
            (Strategy::SignBit, 0),
            (Strategy::PrecisionBit, 0),
        ] {
            let (_, ctx) = forward(ActivationKind::Gelu, strategy, &xs);
            assert_eq!(ctx.extra_bytes(), expect, "{}", strategy.name());
        }
    }

    #[test]
    fn forward_purity() {
        let xs = Tensor::flat(&ramp(501, -6.0, 6.0), ElementFormat::F32);
        for kind in ActivationKind::ALL {
            let exact: Vec<u64> = (0..xs.len())
                .map(|i| (kind.eval(xs.get(i)) as f32).to_bits() as u64)
                .collect();
            for strategy in [Strategy::Bitset, Strategy::SignBit] {
                let (ys, _) = forward(kind, strategy, &xs);
                for (i, &bits) in exact.iter().enumerate() {
                    assert_eq!(ys.bits(i), bits, "{} {}", kind.name(), strategy.name());
                }
            }
            let (ys, _) = forward(kind, Strategy::PrecisionBit, &xs);
            for (i, &bits) in exact.iter().enumerate() {
                let diff = (ys.get(i) - f32::from_bits(bits as u32) as f64).abs();
                assert!(diff <= ElementFormat::F32.ulp(ys.get(i)));
            }
        }
    }

    #[test]
    fn baseline_backward_is_exact_derivative() {
        let xs = Tensor::flat(&ramp(101, -4.0, 4.0), ElementFormat::F64);
        let dys = Tensor::flat(&vec![1.0; 101], ElementFormat::F64);
        for kind in ActivationKind::ALL {
            let (_, ctx) = forward(kind, Strategy::Baseline, &xs);
            let dxs = backward(&ctx, &dys).unwrap();
            for i in 0..xs.len() {
                assert_eq!(dxs.get(i), kind.derivative(xs.get(i)));
            }
        }
    }

    #[test]
    fn bitset_backward_at_zero_is_half() {
        let xs = Tensor::flat(&[0.0], ElementFormat::F64);
        let dys = Tensor::flat(&[1.0], ElementFormat::F64);
        let (_, ctx) = forward(ActivationKind::Gelu, Strategy::Bitset, &xs);
        let dxs = backward(&ctx, &dys).unwrap();
        let bound = frozen_bounds(ActivationKind::Gelu, Branch::Right).linf;
        assert!((dxs.get(0) - 0.5).abs() <= bound);
    }

    #[test]
    fn bitset_tracks_baseline_within_the_frozen_bound() {
        let n = 4001;
        let xs_vals = ramp(n, -8.0, 8.0);
        let dys_vals: Vec<f64> = (0..n).map(|i| ((i * 37) % 13) as f64 / 6.0 - 1.0).collect();
        for kind in ActivationKind::ALL {
            let t = kind.threshold();
            let xs = Tensor::flat(&xs_vals, ElementFormat::F64);
            let dys = Tensor::flat(&dys_vals, ElementFormat::F64);
            let (_, exact_ctx) = forward(kind, Strategy::Baseline, &xs);
            let (_, inv_ctx) = forward(kind, Strategy::Bitset, &xs);
            let exact = backward(&exact_ctx, &dys).unwrap();
            let approx = backward(&inv_ctx, &dys).unwrap();
            for i in 0..n {
                let branch = if xs_vals[i] < t {
                    Branch::Left
                } else {
                    Branch::Right
                };
                let bound = frozen_bounds(kind, branch).linf * dys_vals[i].abs();
                assert!(
                    (exact.get(i) - approx.get(i)).abs() <= bound + 1e-15,
                    "{} x={} exact={} approx={}",
                    kind.name(),
                    xs_vals[i],
                    exact.get(i),
                    approx.get(i)
                );
            }
        }
    }

    #[test]
    fn strategy_disagreement_is_explained_by_format_rounding() {
        // All three compressed strategies evaluate the same q on a y that
        // was rounded through the storage format, so any pairwise gradient
        // difference must fit inside q's swing over a couple of ulps of y.
        // That swing is a few ulps where q is smooth, but grows to
        // O(sqrt(ulp)) at the sqrt singularities (the branch junction, and
        // y -> 0- on the gelu left branch); the band below measures it
        // directly instead of hard-coding either regime.
        let xs_vals = ramp(2001, -6.0, 6.0);
        let dys_vals: Vec<f64> = xs_vals.iter().map(|&x| (x * 0.7).sin() + 1.5).collect();
        for kind in ActivationKind::ALL {
            let t = kind.threshold();
            let c = kind.min_value();
            for format in [ElementFormat::F32, ElementFormat::F64] {
                let xs = Tensor::from_f64(&xs_vals, &[xs_vals.len()], format).unwrap();
                let dys = Tensor::from_f64(&dys_vals, &[dys_vals.len()], format).unwrap();
                let grads: Vec<Vec<f64>> =
                    [Strategy::Bitset, Strategy::SignBit, Strategy::PrecisionBit]
                        .iter()
                        .map(|&s| {
                            let (_, ctx) = forward(kind, s, &xs);
                            backward(&ctx, &dys).unwrap().to_f64_vec()
                        })
                        .collect();
                for i in 0..xs_vals.len() {
                    let y = kind.eval(xs_vals[i]);
                    let branch = if xs_vals[i] < t {
                        Branch::Left
                    } else {
                        Branch::Right
                    };
                    // widest y perturbation any encoding can introduce
                    let delta = 2.0 * format.ulp(y.abs().max((y - c).abs()));
                    let band: Vec<f64> = [y - delta, y, y + delta]
                        .iter()
                        .map(|&yp| q_eval_clamped(kind, yp, branch))
                        .collect();
                    let spread = band.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - band.iter().cloned().fold(f64::INFINITY, f64::min);
                    for (a, b) in [(0usize, 1usize), (0, 2), (1, 2)] {
                        let (a, b) = (grads[a][i], grads[b][i]);
                        let scale = a.abs().max(b.abs()).max(dys_vals[i].abs());
                        let tol = dys_vals[i].abs() * spread + 8.0 * format.ulp(scale);
                        assert!(
                            (a - b).abs() <= tol,
                            "{} {} x={} {a} vs {b} (band {spread:e})",
                            kind.name(),
                            format.name(),
                            xs_vals[i]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn threaded_kernels_match_single_thread() {
        let xs_vals = ramp(1000, -5.0, 5.0);
        let dys_vals: Vec<f64> = xs_vals.iter().map(|&x| x.cos()).collect();
        let xs = Tensor::flat(&xs_vals, ElementFormat::F32);
        let dys = Tensor::flat(&dys_vals, ElementFormat::F32);
        for strategy in Strategy::ALL {
            let (ys1, ctx1) = forward(ActivationKind::Gelu, strategy, &xs);
            let (ys4, ctx4) = forward_threaded(ActivationKind::Gelu, strategy, &xs, 4);
            for i in 0..xs.len() {
                assert_eq!(ys1.bits(i), ys4.bits(i));
            }
            let dx1 = backward(&ctx1, &dys).unwrap();
            let dx4 = backward_threaded(&ctx4, &dys, 4).unwrap();
            for i in 0..xs.len() {
                assert_eq!(dx1.bits(i), dx4.bits(i), "{}", strategy.name());
            }
        }
    }

    #[test]
    fn backward_rejects_mismatched_shapes() {
        let xs = Tensor::flat(&[0.0, 1.0], ElementFormat::F32);
        let (_, ctx) = forward(ActivationKind::Gelu, Strategy::Bitset, &xs);
        let dys = Tensor::flat(&[1.0], ElementFormat::F32);
        assert!(backward(&ctx, &dys).is_err());
    }

    #[test]
    fn fused_signbit_hands_exact_output_to_the_consumer() {
        let xs = Tensor::flat(&ramp(64, -3.0, 3.0), ElementFormat::F32);
        let ((sum, seen), ctx) = forward_signbit_fused(ActivationKind::Silu, &xs, |ys| {
            (ys.to_f64_vec().iter().sum::<f64>(), ys.len())
        });
        assert_eq!(seen, 64);
        let direct: f64 = (0..64)
            .map(|i| (ActivationKind::Silu.eval(xs.get(i)) as f32) as f64)
            .sum();
        assert!((sum - direct).abs() < 1e-9);
        assert_eq!(ctx.extra_bytes(), 0);
        let dys = Tensor::flat(&vec![1.0; 64], ElementFormat::F32);
        assert!(backward(&ctx, &dys).is_ok());
    }

    #[test]
    fn mlp_memory_matches_the_saving_rule() {
        // d=1024, 4x expansion, binary16: baseline (d+4d+4d)·N·2 bytes,
        // inverted (d+4d)·N·2 + ceil(4d·N/8)
        let d = 1024;
        let n_tokens = 128;
        let spec = mlp_block_spec(d, 4, n_tokens);
        let baseline = estimate_memory(&spec, Strategy::Baseline, ElementFormat::F16);
        assert_eq!(baseline.baseline_total, (d + 4 * d + 4 * d) * n_tokens * 2);
        assert_eq!(baseline.total, baseline.baseline_total);
        let inv = estimate_memory(&spec, Strategy::Bitset, ElementFormat::F16);
        assert_eq!(
            inv.total,
            (d + 4 * d) * n_tokens * 2 + (4 * d * n_tokens).div_ceil(8)
        );
        assert!(inv.warnings.is_empty());
        assert!(inv.total < inv.baseline_total);
        // the activation layer itself shrinks 16x: 2 bytes -> 1 bit
        let act = &inv.per_layer[1];
        assert_eq!(act.baseline / act.with_strategy, 16);
    }

    #[test]
    fn activation_before_stateless_layer_saves_nothing() {
        let spec = BlockSpec {
            name: "act-then-stateless".into(),
            tokens: 10,
            layers: vec![
                LayerSpec::Activation {
                    label: "act".into(),
                    width: 8,
                },
                LayerSpec::Stateless {
                    label: "drop".into(),
                    width: 8,
                },
            ],
        };
        let est = estimate_memory(&spec, Strategy::Bitset, ElementFormat::F32);
        assert_eq!(est.warnings.len(), 1);
        assert_eq!(est.total, est.baseline_total);
        assert_eq!(est.saving(), 0.0);
    }

    #[test]
    fn transformer_preset_saves_about_a_quarter() {
        let spec = transformer_block_spec(12, 768, 4, 1024);
        let est = estimate_memory(&spec, Strategy::Bitset, ElementFormat::F16);
        let saving = est.saving();
        assert!(
            (0.10..0.40).contains(&saving),
            "whole-model saving = {saving}"
        );
    }
}
