//! Lloyd-Max k-bit quantization of the activation gradient, used as the
//! accuracy baseline the inverted-activation approximations are compared
//! against.
//!
//! The quantizer targets the random variable `g = f'(X)` with `X` drawn from
//! a declared measure. Cells live in gradient-value space (the nearest-level
//! partition of `f'` values); each level is the conditional mean of `g` over
//! its cell, which is the Lloyd-Max fixed point and the MSE-optimal k-bit
//! quantizer of the gradient. A layer using it stores one k-bit cell index
//! per element at forward time and multiplies the upstream gradient by the
//! cell's level in backward.

use crate::activation::{ActivationKind, ErrorReport, Measure};
use crate::kv::KvFile;
use crate::math;
use crate::{Error, Result};

const BUILD_GRID: usize = 1_000_000;
// The 8-bit gaussian build walks single grid points across cell edges for a
// long stretch before the partition stabilizes (~12k iterations), so the cap
// sits well above that.
const MAX_ITERS: usize = 50_000;
const FIXED_POINT_TOL: f64 = 1e-10;

/// A converged Lloyd-Max quantizer for one activation's gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerTable {
    pub kind: ActivationKind,
    pub bits: u8,
    /// `2^bits - 1` strictly increasing cell edges in gradient-value space.
    pub boundaries: Vec<f64>,
    /// `2^bits` quantized gradient values, one per cell.
    pub levels: Vec<f64>,
    pub measure: Measure,
}

/// The sample of `x` values a measure provides for building and evaluating
/// quantizers: uniform over [-12, 12] or stratified N(0,1) quantiles.
pub(crate) fn measure_grid(measure: Measure, n: usize) -> Vec<f64> {
    match measure {
        Measure::UniformGrid => (0..n)
            .map(|i| -12.0 + 24.0 * (i as f64 + 0.5) / n as f64)
            .collect(),
        Measure::GaussianPushforward => math::gaussian_quantile_grid(n),
    }
}

/// Runs Lloyd-Max alternation to convergence from uniformly spaced initial
/// levels, over a 10⁶-point sample of `f'(x)` under the measure.
pub fn build_quantizer(
    kind: ActivationKind,
    bits: u8,
    measure: Measure,
) -> Result<QuantizerTable> {
    if bits == 0 || bits > 8 {
        return Err(Error::Argument(format!(
            "bits must be in 1..=8, got {bits}"
        )));
    }
    let mut grads: Vec<f64> = measure_grid(measure, BUILD_GRID)
        .into_iter()
        .map(|x| kind.derivative(x))
        .collect();
    grads.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut prefix = Vec::with_capacity(grads.len() + 1);
    prefix.push(0.0);
    for &g in &grads {
        prefix.push(prefix.last().unwrap() + g);
    }

    let n_levels = 1usize << bits;
    let (lo, hi) = (grads[0], *grads.last().unwrap());
    let span = hi - lo;
    let mut levels: Vec<f64> = (0..n_levels)
        .map(|j| lo + span * (j as f64 + 0.5) / n_levels as f64)
        .collect();

    for iter in 0..MAX_ITERS {
        let mut delta: f64 = 0.0;
        let mut start = 0usize;
        let mut next = Vec::with_capacity(n_levels);
        for j in 0..n_levels {
            let end = if j + 1 < n_levels {
                let edge = 0.5 * (levels[j] + levels[j + 1]);
                grads.partition_point(|&g| g < edge)
            } else {
                grads.len()
            };
            let level = if end > start {
                (prefix[end] - prefix[start]) / (end - start) as f64
            } else {
                levels[j] // empty cell: level stays put
            };
            delta = delta.max((level - levels[j]).abs());
            next.push(level);
            start = end;
        }
        levels = next;
        if delta <= FIXED_POINT_TOL {
            let boundaries = levels.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
            return Ok(QuantizerTable {
                kind,
                bits,
                boundaries,
                levels,
                measure,
            });
        }
        if iter + 1 == MAX_ITERS {
            return Err(Error::NonConvergence(format!(
                "Lloyd-Max for {} at {bits} bits ({}) still moving {delta:.3e} after {MAX_ITERS} iterations",
                kind.name(),
                measure.name(),
            )));
        }
    }
    unreachable!()
}

impl QuantizerTable {
    /// Cell index of a gradient value.
    #[inline]
    pub fn code_of(&self, grad: f64) -> u8 {
        self.boundaries.partition_point(|&b| b < grad) as u8
    }

    /// Forward-time capture: the k-bit code of `f'(x)` for each input.
    pub fn encode(&self, xs: &[f64]) -> Vec<u8> {
        xs.iter()
            .map(|&x| self.code_of(self.kind.derivative(x)))
            .collect()
    }

    /// The quantized gradient for a code.
    #[inline]
    pub fn level(&self, code: u8) -> Result<f64> {
        self.levels.get(code as usize).copied().ok_or_else(|| {
            Error::Argument(format!(
                "code {code} out of range for a {}-bit table",
                self.bits
            ))
        })
    }

    /// Serializes to the shared `key=value` text format.
    pub fn to_kv(&self) -> String {
        let mut kv = KvFile::new();
        kv.push("kind", self.kind.name());
        kv.push("bits", self.bits);
        kv.push("measure", self.measure.name());
        for (i, &b) in self.boundaries.iter().enumerate() {
            kv.push_f64(format!("boundary{i}"), b);
        }
        for (i, &l) in self.levels.iter().enumerate() {
            kv.push_f64(format!("level{i}"), l);
        }
        kv.render()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        let kind = ActivationKind::parse_name(kv.require("kind")?)?;
        let bits: u8 = kv
            .require("bits")?
            .parse()
            .map_err(|e| Error::Parse(format!("bits: {e}")))?;
        let measure = Measure::parse_name(kv.require("measure")?)?;
        let n_levels = 1usize << bits;
        let mut levels = Vec::with_capacity(n_levels);
        for i in 0..n_levels {
            levels.push(kv.require_f64(&format!("level{i}"))?);
        }
        let mut boundaries = Vec::with_capacity(n_levels - 1);
        for i in 0..n_levels - 1 {
            boundaries.push(kv.require_f64(&format!("boundary{i}"))?);
        }
        Ok(QuantizerTable {
            kind,
            bits,
            boundaries,
            levels,
            measure,
        })
    }
}

/// L2/L∞ of (quantized `f'` − exact `f'`) over `n_points` drawn under the
/// table's measure, with the same report conventions as
/// [`crate::activation::approx_error`].
pub fn quantizer_error(table: &QuantizerTable, n_points: usize) -> ErrorReport {
    let errs: Vec<f64> = measure_grid(table.measure, n_points)
        .into_iter()
        .map(|x| {
            let g = table.kind.derivative(x);
            table.levels[table.code_of(g) as usize] - g
        })
        .collect();
    ErrorReport::from_errors(
        &errs,
        format!(
            "{} {}-bit {} n={}",
            table.kind.name(),
            table.bits,
            table.measure.name(),
            n_points
        ),
    )
}

/// Backward pass from saved k-bit codes: `dx = dy · level[code]`.
pub fn quantized_backward(table: &QuantizerTable, codes: &[u8], dys: &[f64]) -> Result<Vec<f64>> {
    if codes.len() != dys.len() {
        return Err(Error::Argument(format!(
            "codes ({}) and gradients ({}) disagree in length",
            codes.len(),
            dys.len()
        )));
    }
    let mut dxs = Vec::with_capacity(dys.len());
    for (&code, &dy) in codes.iter().zip(dys) {
        dxs.push(dy * table.level(code)?);
    }
    Ok(dxs)
}
