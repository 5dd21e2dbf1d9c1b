//! Throughput micro-benchmarks: the four block shapes exercised by the CLI
//! `bench` subcommand, timed for the baseline and bitset strategies.
//!
//! Timing methodology: per-trial wall time with `Instant`, medians over the
//! completed trials after a warmup, single thread unless asked otherwise.
//! CPU numbers are what they are — the point of the report is the ratio
//! between strategies under identical work, not absolute throughput.

use std::time::Instant;

use crate::activation::ActivationKind;
use crate::layer::{
    self, mlp_block_spec, BlockSpec, ElementFormat, LayerSpec, Strategy, Tensor,
};
use crate::tape::rng::SplitMix64;
use crate::{Error, Result};

/// The benchmarked block shapes. Published experiment sizes; [`BenchPreset::desk_scale`]
/// shrinks them to something a workstation finishes in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    /// Activation over a flat tensor.
    PlainAct,
    /// Linear(d→d) followed by the activation.
    LinearAct,
    /// Linear(d→h) → activation → Linear(h→d).
    Mlp,
    /// f(X·Wg) ⊙ (X·Wu).
    Geglu,
}

#[derive(Debug, Clone)]
pub struct BenchPreset {
    pub name: &'static str,
    pub kind: PresetKind,
    /// Rows of the input (elements for `PlainAct`).
    pub batch: usize,
    /// Feature dimension (unused by `PlainAct`).
    pub features: usize,
    /// Hidden dimension for `Mlp` / output dimension for `Geglu`.
    pub hidden: usize,
}

impl BenchPreset {
    /// The published experiment shapes: plain nonlinearity at 2²⁵ elements,
    /// the block tests at batch 2¹⁵ with d = 2¹⁰ and hidden 4·2¹⁰.
    pub fn published_shapes() -> Vec<BenchPreset> {
        vec![
            BenchPreset {
                name: "plain-act",
                kind: PresetKind::PlainAct,
                batch: 1 << 25,
                features: 1,
                hidden: 1,
            },
            BenchPreset {
                name: "linear-act",
                kind: PresetKind::LinearAct,
                batch: 1 << 15,
                features: 1 << 10,
                hidden: 1 << 10,
            },
            BenchPreset {
                name: "mlp",
                kind: PresetKind::Mlp,
                batch: 1 << 15,
                features: 1 << 10,
                hidden: 4 << 10,
            },
            BenchPreset {
                name: "geglu",
                kind: PresetKind::Geglu,
                batch: 1 << 15,
                features: 1 << 10,
                hidden: 4 << 10,
            },
        ]
    }

    pub fn by_name(name: &str) -> Result<BenchPreset> {
        Self::published_shapes()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Argument(format!("unknown preset {name:?}")))
    }

    /// Shrinks the batch so one trial runs in seconds on a CPU: 2²⁵ → 2²²
    /// for the plain preset, deeper cuts for the matmul-bound blocks. The
    /// divisor is recorded in the report metadata.
    pub fn desk_scale(&self) -> (BenchPreset, usize) {
        let shrink = match self.kind {
            PresetKind::PlainAct => 8,    // 2^25 -> 2^22 elements
            PresetKind::LinearAct => 32,  // batch 2^15 -> 2^10
            PresetKind::Mlp | PresetKind::Geglu => 128, // batch 2^15 -> 2^8
        };
        let mut scaled = self.clone();
        scaled.batch = (self.batch / shrink).max(1);
        (scaled, shrink)
    }

    pub fn shape_desc(&self) -> String {
        match self.kind {
            PresetKind::PlainAct => format!("elements={}", self.batch),
            PresetKind::LinearAct => format!("batch={} d={}", self.batch, self.features),
            PresetKind::Mlp => format!(
                "batch={} d={} hidden={}",
                self.batch, self.features, self.hidden
            ),
            PresetKind::Geglu => format!(
                "batch={} d={} out={}",
                self.batch, self.features, self.hidden
            ),
        }
    }

    /// The matching analytic block description (activation width per token).
    pub fn block_spec(&self) -> BlockSpec {
        match self.kind {
            PresetKind::PlainAct => BlockSpec {
                name: "plain-act".into(),
                tokens: self.batch,
                layers: vec![LayerSpec::Activation {
                    label: "act".into(),
                    width: 1,
                }],
            },
            PresetKind::LinearAct => BlockSpec {
                name: "linear-act".into(),
                tokens: self.batch,
                layers: vec![
                    LayerSpec::Linear {
                        label: "fc".into(),
                        in_features: self.features,
                        out_features: self.features,
                    },
                    LayerSpec::Activation {
                        label: "act".into(),
                        width: self.features,
                    },
                    // the block under test ends at the activation; a
                    // consumer that saves its input stands in for the rest
                    // of the network
                    LayerSpec::Saved {
                        label: "consumer".into(),
                        per_token: 0,
                    },
                ],
            },
            PresetKind::Mlp => mlp_block_spec(self.features, self.hidden / self.features, self.batch),
            PresetKind::Geglu => BlockSpec {
                name: "geglu".into(),
                tokens: self.batch,
                layers: vec![
                    LayerSpec::Linear {
                        label: "gate".into(),
                        in_features: self.features,
                        out_features: self.hidden,
                    },
                    LayerSpec::Activation {
                        label: "act".into(),
                        width: self.hidden,
                    },
                    LayerSpec::Saved {
                        label: "hadamard".into(),
                        per_token: self.hidden, // the up projection it multiplies
                    },
                    LayerSpec::Linear {
                        label: "up".into(),
                        in_features: self.features,
                        out_features: self.hidden,
                    },
                ],
            },
        }
    }
}

/// Wall-time medians and saved-activation bytes for one strategy.
#[derive(Debug, Clone)]
pub struct StrategyTiming {
    pub strategy: Strategy,
    pub median_forward_s: f64,
    pub median_backward_s: f64,
    /// Bytes of activation state the block keeps alive for backward.
    pub saved_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub preset: String,
    pub shape: String,
    pub format: ElementFormat,
    pub kind: ActivationKind,
    pub trials: usize,
    pub warmup: usize,
    /// Batch divisor applied by desk scaling (1 = full scale).
    pub shrink: usize,
    pub threads: usize,
    pub baseline: StrategyTiming,
    pub candidate: StrategyTiming,
    /// (candidate forward+backward) / (baseline forward+backward).
    pub time_ratio: f64,
    /// baseline saved bytes − candidate saved bytes.
    pub bytes_saved: usize,
    /// Set when `trials` is below 20 — medians are noisy.
    pub low_confidence: bool,
    pub metadata: Vec<(String, String)>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Row-major f32 matmul with a contiguous inner loop; `out += a·b`.
fn matmul_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row_out = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let row_b = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += av * bv;
            }
        }
    }
}

/// `out += aᵀ·b` where `a` is m×k, `b` is m×n, `out` is k×n.
fn matmul_tn_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for row in 0..m {
        for i in 0..k {
            let av = a[row * k + i];
            if av == 0.0 {
                continue;
            }
            let row_b = &b[row * n..(row + 1) * n];
            let row_out = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row_out.iter_mut().zip(row_b) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` where `a` is m×n, `b` is k×n, `out` is m×k.
fn matmul_nt_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let row_a = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let row_b = &b[j * n..(j + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in row_a.iter().zip(row_b) {
                acc += av * bv;
            }
            out[i * k + j] += acc;
        }
    }
}

fn random_f32(n: usize, rng: &mut SplitMix64, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.normal() as f32 * scale).collect()
}

struct TrialTimes {
    forward_s: f64,
    backward_s: f64,
    saved_bytes: usize,
}

fn run_trial(
    preset: &BenchPreset,
    kind: ActivationKind,
    strategy: Strategy,
    threads: usize,
    xs: &Tensor,
    weights: &[Vec<f32>],
) -> TrialTimes {
    let b = preset.batch;
    let d = preset.features;
    let h = preset.hidden;
    match preset.kind {
        PresetKind::PlainAct => {
            let start = Instant::now();
            let (ys, ctx) = layer::forward_threaded(kind, strategy, xs, threads);
            let forward_s = start.elapsed().as_secs_f64();
            let saved_bytes = ctx.extra_bytes();
            let dys = ys; // reuse as the upstream gradient; same shape/format
            let start = Instant::now();
            let dxs = layer::backward_threaded(&ctx, &dys, threads).unwrap();
            let backward_s = start.elapsed().as_secs_f64();
            std::hint::black_box(dxs.get(0));
            TrialTimes {
                forward_s,
                backward_s,
                saved_bytes,
            }
        }
        PresetKind::LinearAct => {
            let x = xs.as_f32().unwrap();
            let w = &weights[0];
            let start = Instant::now();
            let mut y1 = vec![0.0f32; b * d];
            matmul_f32(x, w, &mut y1, b, d, d);
            let y1 = Tensor::from_f32_vec(y1, &[b, d]).unwrap();
            let (a, ctx) = layer::forward_threaded(kind, strategy, &y1, threads);
            let forward_s = start.elapsed().as_secs_f64();
            // activation state: baseline keeps y1 (its input); bitset keeps
            // only the bits since `a` is kept by the downstream consumer
            let saved_bytes = xs.byte_size() + ctx.extra_bytes();
            let da = a;
            let start = Instant::now();
            let dy1 = layer::backward_threaded(&ctx, &da, threads).unwrap();
            let mut dw = vec![0.0f32; d * d];
            matmul_tn_f32(x, dy1.as_f32().unwrap(), &mut dw, b, d, d);
            let mut dx = vec![0.0f32; b * d];
            matmul_nt_f32(dy1.as_f32().unwrap(), w, &mut dx, b, d, d);
            let backward_s = start.elapsed().as_secs_f64();
            std::hint::black_box((dw[0], dx[0]));
            TrialTimes {
                forward_s,
                backward_s,
                saved_bytes,
            }
        }
        PresetKind::Mlp => {
            let x = xs.as_f32().unwrap();
            let (w1, w2) = (&weights[0], &weights[1]);
            let start = Instant::now();
            let mut y1 = vec![0.0f32; b * h];
            matmul_f32(x, w1, &mut y1, b, d, h);
            let y1 = Tensor::from_f32_vec(y1, &[b, h]).unwrap();
            let (a, ctx) = layer::forward_threaded(kind, strategy, &y1, threads);
            let mut y2 = vec![0.0f32; b * d];
            matmul_f32(a.as_f32().unwrap(), w2, &mut y2, b, h, d);
            let forward_s = start.elapsed().as_secs_f64();
            let saved_bytes = xs.byte_size() + ctx.extra_bytes() + a.byte_size();
            let start = Instant::now();
            let dy2 = y2;
            let mut da = vec![0.0f32; b * h];
            matmul_nt_f32(&dy2, w2, &mut da, b, d, h);
            let mut dw2 = vec![0.0f32; h * d];
            matmul_tn_f32(a.as_f32().unwrap(), &dy2, &mut dw2, b, h, d);
            let da = Tensor::from_f32_vec(da, &[b, h]).unwrap();
            let dy1 = layer::backward_threaded(&ctx, &da, threads).unwrap();
            let mut dw1 = vec![0.0f32; d * h];
            matmul_tn_f32(x, dy1.as_f32().unwrap(), &mut dw1, b, d, h);
            let mut dx = vec![0.0f32; b * d];
            matmul_nt_f32(dy1.as_f32().unwrap(), w1, &mut dx, b, h, d);
            let backward_s = start.elapsed().as_secs_f64();
            std::hint::black_box((dw1[0], dw2[0], dx[0]));
            TrialTimes {
                forward_s,
                backward_s,
                saved_bytes,
            }
        }
        PresetKind::Geglu => {
            let x = xs.as_f32().unwrap();
            let (wg, wu) = (&weights[0], &weights[1]);
            let start = Instant::now();
            let mut g = vec![0.0f32; b * h];
            matmul_f32(x, wg, &mut g, b, d, h);
            let g = Tensor::from_f32_vec(g, &[b, h]).unwrap();
            let (a, ctx) = layer::forward_threaded(kind, strategy, &g, threads);
            let mut u = vec![0.0f32; b * h];
            matmul_f32(x, wu, &mut u, b, d, h);
            let av = a.as_f32().unwrap();
            let out: Vec<f32> = av.iter().zip(&u).map(|(&g, &u)| g * u).collect();
            let forward_s = start.elapsed().as_secs_f64();
            // the Hadamard saves both operands; `a` is shared with the
            // bitset context, `u` is saved either way
            let saved_bytes =
                xs.byte_size() + ctx.extra_bytes() + a.byte_size() + u.len() * 4;
            let start = Instant::now();
            let dout = out;
            let da: Vec<f32> = dout.iter().zip(&u).map(|(&d, &u)| d * u).collect();
            let du: Vec<f32> = dout.iter().zip(av).map(|(&d, &a)| d * a).collect();
            let da = Tensor::from_f32_vec(da, &[b, h]).unwrap();
            let dg = layer::backward_threaded(&ctx, &da, threads).unwrap();
            let mut dwg = vec![0.0f32; d * h];
            matmul_tn_f32(x, dg.as_f32().unwrap(), &mut dwg, b, d, h);
            let mut dwu = vec![0.0f32; d * h];
            matmul_tn_f32(x, &du, &mut dwu, b, d, h);
            let mut dx = vec![0.0f32; b * d];
            matmul_nt_f32(dg.as_f32().unwrap(), wg, &mut dx, b, h, d);
            matmul_nt_f32(&du, wu, &mut dx, b, h, d);
            let backward_s = start.elapsed().as_secs_f64();
            std::hint::black_box((dwg[0], dwu[0], dx[0]));
            TrialTimes {
                forward_s,
                backward_s,
                saved_bytes,
            }
        }
    }
}

/// Times the preset under the baseline strategy and `candidate` on
/// identical inputs and returns the paired report.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    preset: &BenchPreset,
    kind: ActivationKind,
    format: ElementFormat,
    candidate: Strategy,
    trials: usize,
    warmup: usize,
    threads: usize,
    shrink: usize,
) -> Result<BenchReport> {
    if trials == 0 {
        return Err(Error::Argument("trials must be at least 1".to_string()));
    }
    if candidate == Strategy::Baseline {
        return Err(Error::Argument(
            "candidate strategy must differ from the baseline".to_string(),
        ));
    }
    if preset.kind != PresetKind::PlainAct && format != ElementFormat::F32 {
        return Err(Error::Argument(
            "matmul presets run in binary32 only".to_string(),
        ));
    }
    let mut rng = SplitMix64::new(0xBE5C);
    let (xs, weights): (Tensor, Vec<Vec<f32>>) = match preset.kind {
        PresetKind::PlainAct => {
            let vals: Vec<f64> = (0..preset.batch).map(|_| rng.normal()).collect();
            (
                Tensor::from_f64(&vals, &[preset.batch], format)?,
                Vec::new(),
            )
        }
        PresetKind::LinearAct => {
            let d = preset.features;
            let x = random_f32(preset.batch * d, &mut rng, 1.0);
            let w = random_f32(d * d, &mut rng, 1.0 / (d as f32).sqrt());
            (Tensor::from_f32_vec(x, &[preset.batch, d])?, vec![w])
        }
        PresetKind::Mlp | PresetKind::Geglu => {
            let (d, h) = (preset.features, preset.hidden);
            let x = random_f32(preset.batch * d, &mut rng, 1.0);
            let w1 = random_f32(d * h, &mut rng, 1.0 / (d as f32).sqrt());
            let w2 = if preset.kind == PresetKind::Mlp {
                random_f32(h * d, &mut rng, 1.0 / (h as f32).sqrt())
            } else {
                random_f32(d * h, &mut rng, 1.0 / (d as f32).sqrt())
            };
            (Tensor::from_f32_vec(x, &[preset.batch, d])?, vec![w1, w2])
        }
    };

    let time_strategy = |strategy: Strategy| -> StrategyTiming {
        let mut fwd = Vec::with_capacity(trials);
        let mut bwd = Vec::with_capacity(trials);
        let mut saved_bytes = 0;
        for i in 0..warmup + trials {
            let times = run_trial(preset, kind, strategy, threads, &xs, &weights);
            if i >= warmup {
                fwd.push(times.forward_s);
                bwd.push(times.backward_s);
                saved_bytes = times.saved_bytes;
            }
        }
        StrategyTiming {
            strategy,
            median_forward_s: median(fwd),
            median_backward_s: median(bwd),
            saved_bytes,
        }
    };

    let baseline = time_strategy(Strategy::Baseline);
    let candidate = time_strategy(candidate);
    let time_ratio = (candidate.median_forward_s + candidate.median_backward_s)
        / (baseline.median_forward_s + baseline.median_backward_s);
    let bytes_saved = baseline.saved_bytes.saturating_sub(candidate.saved_bytes);

    Ok(BenchReport {
        preset: preset.name.to_string(),
        shape: preset.shape_desc(),
        format,
        kind,
        trials,
        warmup,
        shrink,
        threads,
        baseline,
        candidate,
        time_ratio,
        bytes_saved,
        low_confidence: trials < 20,
        metadata: vec![
            ("target_arch".into(), std::env::consts::ARCH.into()),
            ("os".into(), std::env::consts::OS.into()),
        ],
    })
}
