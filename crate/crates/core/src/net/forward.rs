//! Forward evaluation, reverse-mode backward pass and forward-mode tangents.
//!
//! Activations are row-major `(samples * m) x channels` buffers. Circular
//! convolutions are lowered to im2col + GEMM so the whole mini-batch (or the
//! whole tangent frame) goes through one matrix product per layer.

use nalgebra::DMatrix;

use super::{ConvStack, Layout, NetworkParameters, BN_EPS};
use crate::dynamics::{StepModel, TangentModel};
use crate::error::{check_len, Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the batch-norm.
    Train,
    /// Frozen running statistics.
    Infer,
}

/// Samples per parallel task. Fixed so reductions never depend on thread count.
pub(crate) const SAMPLES_PER_TASK: usize = 32;

fn im2col(src: &[f64], m: usize, ch: usize, k: usize) -> Vec<f64> {
    let rows = src.len() / ch;
    let pad = (k / 2) as isize;
    let width = k * ch;
    let mut out = vec![0.0; rows * width];
    for base in (0..rows).step_by(m) {
        for n in 0..m {
            let dst = &mut out[(base + n) * width..(base + n + 1) * width];
            for t in 0..k {
                let sn = (n as isize + t as isize - pad).rem_euclid(m as isize) as usize;
                dst[t * ch..(t + 1) * ch]
                    .copy_from_slice(&src[(base + sn) * ch..(base + sn + 1) * ch]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto their source rows.
fn col2im(g: &[f64], m: usize, ch: usize, k: usize) -> Vec<f64> {
    let width = k * ch;
    let rows = g.len() / width;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; rows * ch];
    for base in (0..rows).step_by(m) {
        for n in 0..m {
            let srow = &g[(base + n) * width..(base + n + 1) * width];
            for t in 0..k {
                let sn = (n as isize + t as isize - pad).rem_euclid(m as isize) as usize;
                let dst = &mut out[(base + sn) * ch..(base + sn + 1) * ch];
                for (d, s) in dst.iter_mut().zip(&srow[t * ch..(t + 1) * ch]) {
                    *d += s;
                }
            }
        }
    }
    out
}

fn broadcast_bias(rows: usize, bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * bias.len());
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    out
}

fn add_column_sums(g: &[f64], cols: usize, acc: &mut [f64]) {
    for row in g.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn ensure_finite(layer: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{layer} activations")))
    }
}

/// Views of the convolution weights.
struct Kernels<'a> {
    s: ConvStack,
    w2: MatRef<'a>,
    b2: &'a [f64],
    w3: MatRef<'a>,
    b3: &'a [f64],
    w4: MatRef<'a>,
    b4: f64,
}

impl<'a> Kernels<'a> {
    fn new(w: &'a [f64], l: &Layout, s: ConvStack) -> Self {
        let f3 = 3 * s.bilinear_filters;
        let c3 = 2 * s.bilinear_filters;
        Self {
            s,
            w2: MatRef::row_major(&w[l.w2..l.b2], s.bilinear_kernel, f3),
            b2: &w[l.b2..l.w3],
            w3: MatRef::row_major(&w[l.w3..l.b3], s.hidden_kernel * c3, s.hidden_filters),
            b3: &w[l.b3..l.w4],
            w4: MatRef::row_major(&w[l.w4..l.b4], s.output_kernel * s.hidden_filters, 1),
            b4: w[l.b4],
        }
    }
}

/// Intermediate activations of the convolution stack for one chunk.
pub(crate) struct StackCache {
    z2: Vec<f64>,
    out2: Vec<f64>,
    u: Vec<f64>,
    r3: Vec<f64>,
    out3: Vec<f64>,
    s4: Vec<f64>,
}

fn stack_forward(k: &Kernels<'_>, z: &[f64], m: usize) -> Result<(Vec<f64>, StackCache)> {
    let s = &k.s;
    let rows = z.len();
    let f = s.bilinear_filters;
    let h = s.hidden_filters;

    let z2 = im2col(z, m, 1, s.bilinear_kernel);
    let mut out2 = broadcast_bias(rows, k.b2);
    gemm(1.0, MatRef::row_major(&z2, rows, s.bilinear_kernel), k.w2, 1.0, &mut out2);
    ensure_finite("bilinear", &out2)?;

    let mut u = vec![0.0; rows * 2 * f];
    for (urow, orow) in u.chunks_exact_mut(2 * f).zip(out2.chunks_exact(3 * f)) {
        urow[..f].copy_from_slice(&orow[..f]);
        for c in 0..f {
            urow[f + c] = orow[f + c] * orow[2 * f + c];
        }
    }
    let r: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
    let r3 = im2col(&r, m, 2 * f, s.hidden_kernel);
    let mut out3 = broadcast_bias(rows, k.b3);
    gemm(
        1.0,
        MatRef::row_major(&r3, rows, s.hidden_kernel * 2 * f),
        k.w3,
        1.0,
        &mut out3,
    );
    ensure_finite("hidden", &out3)?;

    let act3: Vec<f64> = out3.iter().map(|&v| v.max(0.0)).collect();
    let s4 = im2col(&act3, m, h, s.output_kernel);
    let mut out4 = vec![k.b4; rows];
    gemm(
        1.0,
        MatRef::row_major(&s4, rows, s.output_kernel * h),
        k.w4,
        1.0,
        &mut out4,
    );
    ensure_finite("output", &out4)?;

    Ok((
        out4,
        StackCache {
            z2,
            out2,
            u,
            r3,
            out3,
            s4,
        },
    ))
}

/// Accumulates kernel/bias gradients into `grad` and returns d(loss)/dz.
fn stack_backward(
    k: &Kernels<'_>,
    l: &Layout,
    c: &StackCache,
    g4: &[f64],
    m: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let s = &k.s;
    let rows = g4.len();
    let f = s.bilinear_filters;
    let h = s.hidden_filters;
    let w4_width = s.output_kernel * h;
    let w3_width = s.hidden_kernel * 2 * f;

    // output layer
    gemm(
        1.0,
        MatRef::row_major(&c.s4, rows, w4_width).t(),
        MatRef::row_major(g4, rows, 1),
        1.0,
        &mut grad[l.w4..l.b4],
    );
    grad[l.b4] += g4.iter().sum::<f64>();
    let mut g_s4 = vec![0.0; rows * w4_width];
    gemm(1.0, MatRef::row_major(g4, rows, 1), k.w4.t(), 0.0, &mut g_s4);
    let mut g3 = col2im(&g_s4, m, h, s.output_kernel);
    for (g, &pre) in g3.iter_mut().zip(&c.out3) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }

    // hidden layer
    gemm(
        1.0,
        MatRef::row_major(&c.r3, rows, w3_width).t(),
        MatRef::row_major(&g3, rows, h),
        1.0,
        &mut grad[l.w3..l.b3],
    );
    add_column_sums(&g3, h, &mut grad[l.b3..l.w4]);
    let mut g_r3 = vec![0.0; rows * w3_width];
    gemm(1.0, MatRef::row_major(&g3, rows, h), k.w3.t(), 0.0, &mut g_r3);
    let mut g_u = col2im(&g_r3, m, 2 * f, s.hidden_kernel);
    for (g, &pre) in g_u.iter_mut().zip(&c.u) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }

    // bilinear block
    let mut g2 = vec![0.0; rows * 3 * f];
    for ((grow, urow), orow) in g2
        .chunks_exact_mut(3 * f)
        .zip(g_u.chunks_exact(2 * f))
        .zip(c.out2.chunks_exact(3 * f))
    {
        grow[..f].copy_from_slice(&urow[..f]);
        for ch in 0..f {
            let gp = urow[f + ch];
            grow[f + ch] = gp * orow[2 * f + ch];
            grow[2 * f + ch] = gp * orow[f + ch];
        }
    }
    gemm(
        1.0,
        MatRef::row_major(&c.z2, rows, s.bilinear_kernel).t(),
        MatRef::row_major(&g2, rows, 3 * f),
        1.0,
        &mut grad[l.w2..l.b2],
    );
    add_column_sums(&g2, 3 * f, &mut grad[l.b2..l.w3]);
    let mut g_z2 = vec![0.0; rows * s.bilinear_kernel];
    gemm(1.0, MatRef::row_major(&g2, rows, 3 * f), k.w2.t(), 0.0, &mut g_z2);
    col2im(&g_z2, m, 1, s.bilinear_kernel)
}

/// Cache of one application of the network to a batch.
pub(crate) struct ApplyCache {
    m: usize,
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: f64,
    stacks: Vec<StackCache>,
}

/// Batch-norm statistics used by one application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct BatchStats {
    pub mean: f64,
    pub var: f64,
}

/// One application `y = x + f(x)` to a batch of row-major states.
pub(crate) fn apply(
    params: &NetworkParameters,
    x: &[f64],
    m: usize,
    mode: Mode,
) -> Result<(Vec<f64>, ApplyCache, BatchStats)> {
    if m == 0 || x.is_empty() || x.len() % m != 0 {
        return Err(Error::Dimension {
            context: "network input",
            expected: m,
            actual: x.len(),
        });
    }
    let stats = match mode {
        Mode::Train => {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            BatchStats { mean, var }
        }
        Mode::Infer => BatchStats {
            mean: params.running_mean,
            var: params.running_var,
        },
    };
    let inv_std = 1.0 / (stats.var + BN_EPS).sqrt();
    let l = params.layout();
    let (gamma, beta) = (params.weights[l.bn_scale], params.weights[l.bn_shift]);
    let xhat: Vec<f64> = x.iter().map(|v| (v - stats.mean) * inv_std).collect();

    let mut y = x.to_vec();
    let mut stacks = Vec::new();
    if let Some(s) = params.architecture().stack {
        let kernels = Kernels::new(&params.weights, l, s);
        let z: Vec<f64> = xhat.iter().map(|v| gamma * v + beta).collect();
        let results = par::map_chunks(&z, SAMPLES_PER_TASK * m, |_, zc| {
            stack_forward(&kernels, zc, m)
        });
        let mut offset = 0;
        for r in results {
            let (out4, cache) = r?;
            for (yi, o) in y[offset..offset + out4.len()].iter_mut().zip(&out4) {
                *yi += o;
            }
            offset += out4.len();
            stacks.push(cache);
        }
    }
    Ok((
        y,
        ApplyCache {
            m,
            mode,
            xhat,
            inv_std,
            stacks,
        },
        stats,
    ))
}

/// Back-propagates `g_y` through one application, accumulating into `grad`.
/// Returns the gradient with respect to the application's input.
pub(crate) fn apply_backward(
    params: &NetworkParameters,
    cache: &ApplyCache,
    g_y: &[f64],
    grad: &mut [f64],
) -> Vec<f64> {
    let mut g_x = g_y.to_vec();
    let Some(s) = params.architecture().stack else {
        return g_x;
    };
    let l = params.layout();
    let m = cache.m;
    let kernels = Kernels::new(&params.weights, l, s);
    let chunk = SAMPLES_PER_TASK * m;
    let parts = par::map_range(cache.stacks.len(), |ci| {
        let lo = ci * chunk;
        let hi = (lo + chunk).min(g_y.len());
        let mut partial = vec![0.0; l.len];
        let g_z = stack_backward(&kernels, l, &cache.stacks[ci], &g_y[lo..hi], m, &mut partial);
        (partial, g_z)
    });
    let mut g_z = Vec::with_capacity(g_y.len());
    for (partial, gz) in parts {
        for (g, p) in grad.iter_mut().zip(&partial) {
            *g += p;
        }
        g_z.extend(gz);
    }

    let gamma = params.weights[l.bn_scale];
    grad[l.bn_scale] += g_z.iter().zip(&cache.xhat).map(|(g, xh)| g * xh).sum::<f64>();
    grad[l.bn_shift] += g_z.iter().sum::<f64>();
    let scale = gamma * cache.inv_std;
    match cache.mode {
        Mode::Train => {
            let n = g_z.len() as f64;
            let mean_g = g_z.iter().sum::<f64>() / n;
            let mean_gx = g_z.iter().zip(&cache.xhat).map(|(g, xh)| g * xh).sum::<f64>() / n;
            for ((gx, gz), xh) in g_x.iter_mut().zip(&g_z).zip(&cache.xhat) {
                *gx += scale * (gz - mean_g - xh * mean_gx);
            }
        }
        Mode::Infer => {
            for (gx, gz) in g_x.iter_mut().zip(&g_z) {
                *gx += scale * gz;
            }
        }
    }
    g_x
}

/// `G(x) = x + f(x)` for a single state.
pub fn forward(params: &NetworkParameters, x: &[f64], mode: Mode) -> Result<Vec<f64>> {
    forward_batch(params, x, x.len(), mode)
}

/// Applies the network to every row-major state of length `m` in `xs`.
pub fn forward_batch(
    params: &NetworkParameters,
    xs: &[f64],
    m: usize,
    mode: Mode,
) -> Result<Vec<f64>> {
    apply(params, xs, m, mode).map(|(y, _, _)| y)
}

/// Infer-mode output at `x`; each column of `tangents` is replaced by its
/// image under the network Jacobian at `x`.
pub fn jvp(params: &NetworkParameters, x: &[f64], tangents: &mut DMatrix<f64>) -> Result<Vec<f64>> {
    let m = x.len();
    check_len("jvp tangent rows", m, tangents.nrows())?;
    let l = params.layout();
    let inv_std = 1.0 / (params.running_var + BN_EPS).sqrt();
    let (gamma, beta) = (params.weights[l.bn_scale], params.weights[l.bn_shift]);
    let Some(s) = params.architecture().stack else {
        return Ok(x.to_vec());
    };
    let k = Kernels::new(&params.weights, l, s);
    let z: Vec<f64> = x
        .iter()
        .map(|v| gamma * (v - params.running_mean) * inv_std + beta)
        .collect();
    let (out4, c) = stack_forward(&k, &z, m)?;
    let y: Vec<f64> = x.iter().zip(&out4).map(|(a, b)| a + b).collect();

    let q = tangents.ncols();
    if q == 0 {
        return Ok(y);
    }
    let rows = q * m;
    let f = s.bilinear_filters;
    let h = s.hidden_filters;
    // column-major storage: each tangent vector is one contiguous "sample"
    let v = tangents.as_mut_slice();
    let dz: Vec<f64> = v.iter().map(|t| gamma * inv_std * t).collect();
    let dz2 = im2col(&dz, m, 1, s.bilinear_kernel);
    let mut d2 = vec![0.0; rows * 3 * f];
    gemm(1.0, MatRef::row_major(&dz2, rows, s.bilinear_kernel), k.w2, 0.0, &mut d2);

    let mut du = vec![0.0; rows * 2 * f];
    for (r, (durow, drow)) in du.chunks_exact_mut(2 * f).zip(d2.chunks_exact(3 * f)).enumerate() {
        let n = r % m;
        let orow = &c.out2[n * 3 * f..(n + 1) * 3 * f];
        let urow = &c.u[n * 2 * f..(n + 1) * 2 * f];
        for ch in 0..f {
            durow[ch] = if urow[ch] > 0.0 { drow[ch] } else { 0.0 };
            let prod = drow[f + ch] * orow[2 * f + ch] + orow[f + ch] * drow[2 * f + ch];
            durow[f + ch] = if urow[f + ch] > 0.0 { prod } else { 0.0 };
        }
    }
    let dr3 = im2col(&du, m, 2 * f, s.hidden_kernel);
    let mut d3 = vec![0.0; rows * h];
    gemm(
        1.0,
        MatRef::row_major(&dr3, rows, s.hidden_kernel * 2 * f),
        k.w3,
        0.0,
        &mut d3,
    );
    for (r, drow) in d3.chunks_exact_mut(h).enumerate() {
        let n = r % m;
        for (d, &pre) in drow.iter_mut().zip(&c.out3[n * h..(n + 1) * h]) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }
    }
    let ds4 = im2col(&d3, m, h, s.output_kernel);
    let mut d4 = vec![0.0; rows];
    gemm(
        1.0,
        MatRef::row_major(&ds4, rows, s.output_kernel * h),
        k.w4,
        0.0,
        &mut d4,
    );
    for (t, d) in v.iter_mut().zip(&d4) {
        *t += d;
    }
    Ok(y)
}

/// The trained network as a one-step resolvent on an `m`-point domain.
#[derive(Clone, Copy, Debug)]
pub struct Surrogate<'a> {
    pub params: &'a NetworkParameters,
    pub m: usize,
    pub h: f64,
}

impl StepModel for Surrogate<'_> {
    fn dim(&self) -> usize {
        self.m
    }

    fn step_batch(&self, states: &mut [f64]) -> Result<()> {
        let y = forward_batch(self.params, states, self.m, Mode::Infer)?;
        states.copy_from_slice(&y);
        Ok(())
    }
}

impl TangentModel for Surrogate<'_> {
    type Workspace = ();

    fn time_step(&self) -> f64 {
        self.h
    }

    fn workspace(&self) {}

    fn step_with_tangents(
        &self,
        _ws: &mut (),
        x: &mut [f64],
        frame: &mut DMatrix<f64>,
    ) -> Result<()> {
        let y = jvp(self.params, x, frame)?;
        x.copy_from_slice(&y);
        Ok(())
    }
}
