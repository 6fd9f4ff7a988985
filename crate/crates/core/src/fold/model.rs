//! The folding network: a pointwise encoder with max pooling, followed by
//! two folding layers that each concatenate the codeword to their input
//! points. Parameters live in one flat vector so the optimizer and gradient
//! checks can treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cloud::Point3;
use crate::error::{Error, Result};

/// Negative slope of the decoder's LeakyReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

const ENCODER_CHUNK: usize = 256;

/// Layer widths. The codeword length is the last encoder width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub encoder: [usize; 4],
    /// Hidden widths of each folding layer; both end in a width-3 output.
    pub folding_hidden: [usize; 2],
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            encoder: [128; 4],
            folding_hidden: [64, 64],
        }
    }
}

impl ModelDims {
    pub fn codeword_len(&self) -> usize {
        self.encoder[3]
    }

    fn validate(&self) -> Result<()> {
        if self.encoder.iter().chain(&self.folding_hidden).any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Offsets of one affine layer inside the flat parameter vector. Weights
/// are stored input-major: `w[i * out + j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: usize,
    pub b: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.inp * self.out + self.out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldingModel {
    pub dims: ModelDims,
    pub seed: u64,
    pub params: Vec<f64>,
    encoder: Vec<Dense>,
    folds: [Vec<Dense>; 2],
}

#[inline]
fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `out = b + x W`
fn dense_forward(params: &[f64], l: &Dense, x: &[f64], out: &mut [f64]) {
    out.copy_from_slice(&params[l.b..l.b + l.out]);
    for (i, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &params[l.w + i * l.out..l.w + (i + 1) * l.out];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += a * w;
        }
    }
}

/// Accumulates `dW += x ⊗ dz` and `db += dz`; writes `W dz` into `dx`.
fn dense_backward(params: &[f64], grad: &mut [f64], l: &Dense, x: &[f64], dz: &[f64], dx: Option<&mut [f64]>) {
    for (i, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let g = &mut grad[l.w + i * l.out..l.w + (i + 1) * l.out];
        for (gw, &d) in g.iter_mut().zip(dz) {
            *gw += a * d;
        }
    }
    for (gb, &d) in grad[l.b..l.b + l.out].iter_mut().zip(dz) {
        *gb += d;
    }
    if let Some(dx) = dx {
        for (i, slot) in dx.iter_mut().enumerate() {
            let row = &params[l.w + i * l.out..l.w + (i + 1) * l.out];
            let mut s = 0.0;
            for (&w, &d) in row.iter().zip(dz) {
                s += w * d;
            }
            *slot = s;
        }
    }
}

/// Max-pooled encoder output with, per channel, the lowest index of a point
/// attaining the maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct Codeword {
    pub values: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// Per-point pre-activations of one folding layer's hidden layers.
#[derive(Debug, Clone)]
struct PointTrace {
    hidden: [Vec<f64>; 2],
}

/// Everything the decoder backward pass needs.
#[derive(Debug, Clone)]
pub struct FoldTrace {
    /// Input points of each folding layer (the grid, then the first fold).
    inputs: [Vec<Point3>; 2],
    traces: [Vec<PointTrace>; 2],
    pub output: Vec<Point3>,
}

impl FoldingModel {
    /// Seeded uniform initialization in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(seed: u64, dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut offset = 0;
        let mut layer = |inp: usize, out: usize| {
            let l = Dense {
                inp,
                out,
                w: offset,
                b: offset + inp * out,
            };
            offset += l.len();
            l
        };
        let mut encoder = Vec::with_capacity(4);
        let mut prev = 3;
        for &w in &dims.encoder {
            encoder.push(layer(prev, w));
            prev = w;
        }
        let c = dims.codeword_len();
        let [h1, h2] = dims.folding_hidden;
        let mut fold_layers = || vec![layer(3 + c, h1), layer(h1, h2), layer(h2, 3)];
        let folds = [fold_layers(), fold_layers()];

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; offset];
        for l in encoder.iter().chain(folds.iter().flatten()) {
            let bound = 1.0 / (l.inp as f64).sqrt();
            for p in &mut params[l.w..l.w + l.len()] {
                *p = rng.gen_range(-bound..bound);
            }
        }
        Ok(FoldingModel {
            dims,
            seed,
            params,
            encoder,
            folds,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn encoder_layers(&self) -> &[Dense] {
        &self.encoder
    }

    pub fn folding_layers(&self) -> &[Vec<Dense>; 2] {
        &self.folds
    }

    /// Encoder output for one point; pre-activations are appended to `trace`
    /// when given.
    fn encode_point(&self, p: &Point3, mut trace: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let mut x: Vec<f64> = p.to_vec();
        for l in &self.encoder {
            let mut z = vec![0.0; l.out];
            dense_forward(&self.params, l, &x, &mut z);
            x = z.iter().map(|&v| v.max(0.0)).collect();
            if let Some(t) = trace.as_deref_mut() {
                t.push(z);
            }
        }
        x
    }

    pub fn encode_with_argmax(&self, points: &[Point3]) -> Result<Codeword> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("cannot encode an empty cloud".into()));
        }
        let partial: Vec<Codeword> = points
            .par_chunks(ENCODER_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let base = ci * ENCODER_CHUNK;
                let mut values = self.encode_point(&chunk[0], None);
                let mut argmax = vec![base; values.len()];
                for (k, p) in chunk.iter().enumerate().skip(1) {
                    let h = self.encode_point(p, None);
                    for (c, &v) in h.iter().enumerate() {
                        if v > values[c] || v.is_nan() {
                            values[c] = v;
                            argmax[c] = base + k;
                        }
                    }
                }
                Codeword { values, argmax }
            })
            .collect();
        let mut it = partial.into_iter();
        let mut acc = it.next().unwrap();
        for cw in it {
            for c in 0..acc.values.len() {
                if cw.values[c] > acc.values[c] || cw.values[c].is_nan() {
                    acc.values[c] = cw.values[c];
                    acc.argmax[c] = cw.argmax[c];
                }
            }
        }
        if acc.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "encoder activation" });
        }
        Ok(acc)
    }

    /// Channelwise maximum of the pointwise encoder over the cloud.
    pub fn encode_cloud(&self, points: &[Point3]) -> Result<Vec<f64>> {
        Ok(self.encode_with_argmax(points)?.values)
    }

    /// Codeword contribution plus bias of a folding layer's first affine map.
    fn code_bias(&self, l: &Dense, code: &[f64]) -> Vec<f64> {
        let mut out = self.params[l.b..l.b + l.out].to_vec();
        for (c, &y) in code.iter().enumerate() {
            let row = &self.params[l.w + (3 + c) * l.out..l.w + (4 + c) * l.out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += y * w;
            }
        }
        out
    }

    fn fold_layer(&self, f: usize, inputs: &[Point3], code: &[f64]) -> (Vec<PointTrace>, Vec<Point3>) {
        let [l0, l1, l2] = [self.folds[f][0], self.folds[f][1], self.folds[f][2]];
        let bias = self.code_bias(&l0, code);
        inputs
            .par_iter()
            .map(|p| {
                let mut z0 = bias.clone();
                for (i, &a) in p.iter().enumerate() {
                    let row = &self.params[l0.w + i * l0.out..l0.w + (i + 1) * l0.out];
                    for (o, &w) in z0.iter_mut().zip(row) {
                        *o += a * w;
                    }
                }
                let a0: Vec<f64> = z0.iter().map(|&z| leaky(z)).collect();
                let mut z1 = vec![0.0; l1.out];
                dense_forward(&self.params, &l1, &a0, &mut z1);
                let a1: Vec<f64> = z1.iter().map(|&z| leaky(z)).collect();
                let mut out = [0.0; 3];
                dense_forward(&self.params, &l2, &a1, &mut out);
                (PointTrace { hidden: [z0, z1] }, out)
            })
            .unzip()
    }

    pub fn fold_traced(&self, grid: &[Point3], code: &[f64]) -> Result<FoldTrace> {
        if code.len() != self.dims.codeword_len() {
            return Err(Error::InvalidArgument(format!(
                "codeword has {} entries, model expects {}",
                code.len(),
                self.dims.codeword_len()
            )));
        }
        if code.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "codeword" });
        }
        let (t0, mid) = self.fold_layer(0, grid, code);
        let (t1, output) = self.fold_layer(1, &mid, code);
        if output.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "folded points" });
        }
        Ok(FoldTrace {
            inputs: [grid.to_vec(), mid],
            traces: [t0, t1],
            output,
        })
    }

    /// Folds the grid points with the given codeword. Output is index-aligned
    /// with `grid`.
    pub fn fold(&self, grid: &[Point3], code: &[f64]) -> Result<Vec<Point3>> {
        Ok(self.fold_traced(grid, code)?.output)
    }

    /// Backpropagates `d_out` (gradient w.r.t. the folded points) into
    /// `grad`, returning the gradient w.r.t. the codeword.
    pub fn fold_backward(&self, trace: &FoldTrace, code: &[f64], d_out: &[Point3], grad: &mut [f64]) -> Vec<f64> {
        let mut d_code = vec![0.0; code.len()];
        let mut upstream: Vec<Point3> = d_out.to_vec();
        for f in (0..2).rev() {
            let [l0, l1, l2] = [self.folds[f][0], self.folds[f][1], self.folds[f][2]];
            let mut dz0_sum = vec![0.0; l0.out];
            let mut d_inputs = vec![[0.0; 3]; upstream.len()];
            let mut a0 = vec![0.0; l0.out];
            let mut a1 = vec![0.0; l1.out];
            let mut da1 = vec![0.0; l1.out];
            let mut da0 = vec![0.0; l0.out];
            for (i, d) in upstream.iter().enumerate() {
                let t = &trace.traces[f][i];
                for (a, &z) in a0.iter_mut().zip(&t.hidden[0]) {
                    *a = leaky(z);
                }
                for (a, &z) in a1.iter_mut().zip(&t.hidden[1]) {
                    *a = leaky(z);
                }
                dense_backward(&self.params, grad, &l2, &a1, d, Some(&mut da1));
                let dz1: Vec<f64> = da1.iter().zip(&t.hidden[1]).map(|(&g, &z)| g * leaky_grad(z)).collect();
                dense_backward(&self.params, grad, &l1, &a0, &dz1, Some(&mut da0));
                let dz0: Vec<f64> = da0.iter().zip(&t.hidden[0]).map(|(&g, &z)| g * leaky_grad(z)).collect();
                // point rows of the first layer
                let p = &trace.inputs[f][i];
                let mut dp = [0.0; 3];
                for k in 0..3 {
                    let off = l0.w + k * l0.out;
                    let mut s = 0.0;
                    for j in 0..l0.out {
                        grad[off + j] += p[k] * dz0[j];
                        s += self.params[off + j] * dz0[j];
                    }
                    dp[k] = s;
                }
                d_inputs[i] = dp;
                for (s, &d) in dz0_sum.iter_mut().zip(&dz0) {
                    *s += d;
                }
            }
            for (gb, &d) in grad[l0.b..l0.b + l0.out].iter_mut().zip(&dz0_sum) {
                *gb += d;
            }
            for (c, &y) in code.iter().enumerate() {
                let off = l0.w + (3 + c) * l0.out;
                let mut s = 0.0;
                for j in 0..l0.out {
                    grad[off + j] += y * dz0_sum[j];
                    s += self.params[off + j] * dz0_sum[j];
                }
                d_code[c] += s;
            }
            upstream = d_inputs;
        }
        d_code
    }

    /// Backpropagates the codeword gradient through max pooling into the
    /// encoder. Only the argmax points receive gradient.
    pub fn encode_backward(&self, points: &[Point3], codeword: &Codeword, d_code: &[f64], grad: &mut [f64]) {
        let mut winners: Vec<usize> = codeword.argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        let width = self.dims.codeword_len();
        for &p in &winners {
            let mut dh = vec![0.0; width];
            let mut any = false;
            for c in 0..width {
                if codeword.argmax[c] == p && d_code[c] != 0.0 {
                    dh[c] = d_code[c];
                    any = true;
                }
            }
            if !any {
                continue;
            }
            let mut zs = Vec::with_capacity(4);
            self.encode_point(&points[p], Some(&mut zs));
            let mut upstream = dh;
            for li in (0..self.encoder.len()).rev() {
                let l = self.encoder[li];
                let dz: Vec<f64> = upstream
                    .iter()
                    .zip(&zs[li])
                    .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                    .collect();
                let input: Vec<f64> = if li == 0 {
                    points[p].to_vec()
                } else {
                    zs[li - 1].iter().map(|&z| z.max(0.0)).collect()
                };
                if li == 0 {
                    dense_backward(&self.params, grad, &l, &input, &dz, None);
                } else {
                    let mut dx = vec![0.0; l.inp];
                    dense_backward(&self.params, grad, &l, &input, &dz, Some(&mut dx));
                    upstream = dx;
                }
            }
        }
    }
}

/// FNV-1a over the little-endian bytes of the parameters.
pub fn params_checksum(params: &[f64]) -> u64 {
    crate::bitstream::fnv1a(params.iter().flat_map(|p| p.to_le_bytes()))
}
