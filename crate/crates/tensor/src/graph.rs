//! Reverse-mode tape.
//!
//! A [`Graph`] is built fresh for each forward pass. Every operation appends a
//! node holding its value plus whatever it needs for the backward sweep;
//! [`Graph::backward`] then walks the tape in reverse.

use std::collections::HashMap;

use rustfft::num_complex::Complex;

use crate::conv::{col2im_rows, im2col_rows, reflect_index, ConvGeom};
use crate::error::{Result, TensorError};
use crate::real::{lit, matmul, matmul_ld, Real};
use crate::spectral::{dft2, idft2_unnormalized, one_sided_width};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor: `group` names the owning parameter set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub group: u16,
    pub index: u32,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cin: usize,
    },
    ReflectPad {
        x: Var,
        pad: usize,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Sum(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    RowNormalize {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    MatMulNT(Var, Var),
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    LogSigmoidMean {
        x: Var,
        sign: T,
    },
    SquaredErrorMean {
        x: Var,
        target: T,
    },
    SpectralEnergy {
        x: Var,
        one_sided: bool,
        spectra: Vec<Vec<Complex<T>>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(TensorError::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A leaf; with `requires_grad` its gradient is kept after backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf. Repeated calls with the same id return the same node,
    /// so a parameter used twice on the tape accumulates one gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to leaf `v`; interior
    /// gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// All parameter gradients produced by the last backward sweep.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        let mut ids: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        ids.sort();
        ids.into_iter().filter_map(move |(id, v)| self.grad(v).map(|g| (id, g)))
    }

    fn image_dims(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => shape_err(format!("{what}: expected C×H×W, got {s:?}")),
        }
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            &[c] => Ok((1, c)),
            s => shape_err(format!("{what}: expected a matrix, got {s:?}")),
        }
    }

    // ----- convolution ---------------------------------------------------

    /// Zero-padded convolution; `w` is `Cout×Cin×k×k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.image_dims(x, "conv2d input")?;
        let (cout, k) = match self.shape(w) {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => return shape_err(format!("conv2d weight {s:?} does not match {cin} input channels")),
        };
        if let Some(b) = b {
            if self.value(b).numel() != cout {
                return shape_err(format!("conv2d bias must have {cout} elements"));
            }
        }
        let (oh, ow) = match (
            ConvGeom::out_extent(h, k, stride, pad),
            ConvGeom::out_extent(wd, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return shape_err(format!("conv2d: {h}×{wd} input too small for kernel {k} with pad {pad}")),
        };
        let geom = ConvGeom {
            channels: cin,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let (rows, npos) = (geom.rows(), geom.positions());
        let mut out = vec![T::zero(); cout * npos];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut cols = Vec::new();
        for chunk in geom.row_chunks() {
            let (start, npc) = (chunk.start * ow, chunk.len() * ow);
            cols.resize(rows * npc, T::zero());
            im2col_rows(xv, &geom, chunk, &mut cols);
            matmul_ld(cout, rows, npc, wv, rows, false, &cols, npc, false, &mut out[start..], npos, false);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), geom.positions());
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d { x, w, b, geom, cout },
            &parents,
        ))
    }

    /// Transposed convolution; `w` is `Cin×Cout×k×k`.
    /// Output extent is `(H−1)·stride − 2·pad + k + output_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.image_dims(x, "conv_transpose2d input")?;
        let (cout, k) = match self.shape(w) {
            &[ci, co, k1, k2] if ci == cin && k1 == k2 => (co, k1),
            s => {
                return shape_err(format!(
                    "conv_transpose2d weight {s:?} does not match {cin} input channels"
                ))
            }
        };
        let extent = |n: usize| ((n - 1) * stride + k + output_pad).checked_sub(2 * pad);
        let (oh, ow) = match (extent(h), extent(wd)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return shape_err("conv_transpose2d: empty output".into()),
        };
        if ConvGeom::out_extent(oh, k, stride, pad) != Some(h) || ConvGeom::out_extent(ow, k, stride, pad) != Some(wd) {
            return shape_err("conv_transpose2d: output_pad inconsistent with stride".into());
        }
        let geom = ConvGeom {
            channels: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad,
            oh: h,
            ow: wd,
        };
        let (rows, npos) = (geom.rows(), geom.positions());
        let mut out = vec![T::zero(); cout * oh * ow];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut cols = Vec::new();
        for chunk in geom.row_chunks() {
            let (start, npc) = (chunk.start * wd, chunk.len() * wd);
            cols.resize(rows * npc, T::zero());
            matmul_ld(rows, cin, npc, wv, rows, true, &xv[start..], npos, false, &mut cols, npc, false);
            col2im_rows(&cols, &geom, chunk, &mut out);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.value(b).data(), oh * ow);
        }
        let value = Tensor::new(&[cout, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, cin }, &parents))
    }

    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "reflect_pad")?;
        if pad >= h || pad >= w {
            return shape_err(format!("reflect_pad {pad} needs input larger than {h}×{w}"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * ph * pw);
        for ci in 0..c {
            for y in 0..ph {
                let sy = reflect_index(y as isize - pad as isize, h);
                for xx in 0..pw {
                    let sx = reflect_index(xx as isize - pad as isize, w);
                    out.push(src[(ci * h + sy) * w + sx]);
                }
            }
        }
        let value = Tensor::new(&[c, ph, pw], out)?;
        Ok(self.push(value, Op::ReflectPad { x, pad }, &[x]))
    }

    /// Per-channel normalization to zero mean, unit (biased) variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "instance_norm")?;
        let n = h * w;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * n];
        let mut inv_std = Vec::with_capacity(c);
        let nf = lit::<T>(n as f64);
        for ci in 0..c {
            let plane = &src[ci * n..(ci + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nf;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + lit(eps)).sqrt();
            for (o, &v) in out[ci * n..(ci + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(&[c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    // ----- elementwise -----------------------------------------------------

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = lit::<T>(slope);
        self.unary(x, Op::LeakyRelu(x, s), move |v| if v > T::zero() { v } else { v * s })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        self.unary(x, Op::Scale(x, s), move |v| v * s)
    }

    fn binary_same(&mut self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `Σ weight·term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, wgt) in terms {
            let scaled = self.scale(v, wgt);
            acc = Some(match acc {
                None => scaled,
                Some(a) => self.add(a, scaled)?,
            });
        }
        Ok(acc.unwrap_or_else(|| self.constant(Tensor::scalar(T::zero()))))
    }

    // ----- matrices --------------------------------------------------------

    /// `x·wᵀ + b` with `x: N×I`, `w: O×I`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, i) = self.matrix_dims(x, "linear input")?;
        let (o, wi) = self.matrix_dims(w, "linear weight")?;
        if wi != i {
            return shape_err(format!("linear: input width {i} vs weight {o}×{wi}"));
        }
        let mut out = vec![T::zero(); n * o];
        matmul(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != o {
                return shape_err(format!("linear bias must have {o} elements"));
            }
            for row in out.chunks_exact_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bias) {
                    *v += bb;
                }
            }
        }
        let value = Tensor::new(&[n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Feature vectors at flat spatial indices: `C×H×W` → `S×C`.
    pub fn gather_locations(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "gather_locations")?;
        let hw = h * w;
        if let Some(&bad) = idx.iter().find(|&&i| i >= hw) {
            return shape_err(format!("location {bad} outside {h}×{w} map"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            for ci in 0..c {
                out.push(src[ci * hw + i]);
            }
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        Ok(self.push(value, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    /// Rows scaled to unit length: `x / (‖x‖ + eps)`.
    pub fn row_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "row_normalize")?;
        let eps = lit::<T>(eps);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        let mut norms = Vec::with_capacity(n);
        for row in src.chunks_exact(d.max(1)).take(n) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm + eps;
            out.extend(row.iter().map(|&v| v / denom));
            norms.push(norm);
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(value, Op::RowNormalize { x, norms, eps }, &[x]))
    }

    /// `a·bᵀ` with `a: M×K`, `b: N×K`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt lhs")?;
        let (n, kb) = self.matrix_dims(b, "matmul_nt rhs")?;
        if k != kb {
            return shape_err(format!("matmul_nt: inner dims {k} vs {kb}"));
        }
        let mut out = vec![T::zero(); m * n];
        matmul(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    /// Row-wise inner products, `N×D, N×D → N×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(a, "row_dot")?;
        if self.matrix_dims(b, "row_dot")? != (n, d) {
            return shape_err("row_dot: operands differ in shape".into());
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks_exact(d)
            .zip(self.value(b).data().chunks_exact(d))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let value = Tensor::new(&[n, 1], out)?;
        Ok(self.push(value, Op::RowDot(a, b), &[a, b]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = self.matrix_dims(a, "concat_cols")?;
        let (nb, q) = self.matrix_dims(b, "concat_cols")?;
        if n != nb {
            return shape_err(format!("concat_cols: {n} vs {nb} rows"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (p + q));
        for r in 0..n {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let value = Tensor::new(&[n, p + q], out)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Stack row blocks (vectors count as one row).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows of nothing".into());
        }
        let (_, d) = self.matrix_dims(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, dd) = self.matrix_dims(p, "concat_rows")?;
            if dd != d {
                return shape_err(format!("concat_rows: width {dd} vs {d}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, d], out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    // ----- losses ----------------------------------------------------------

    /// Mean over rows of `logsumexp(row) − row[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || targets.iter().any(|&t| t >= c) || n == 0 {
            return shape_err(format!("cross_entropy: {n}×{c} logits with targets {targets:?}"));
        }
        let lv = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &t) in lv.chunks_exact(c).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::scalar(total / lit(n as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `mean(log σ(sign·x))`, evaluated stably.
    pub fn log_sigmoid_mean(&mut self, x: Var, sign: f64) -> Var {
        let s = lit::<T>(sign);
        let v = self.value(x);
        let n = v.numel().max(1);
        let total: T = v.data().iter().map(|&z| log_sigmoid(s * z)).sum();
        self.push(Tensor::scalar(total / lit(n as f64)), Op::LogSigmoidMean { x, sign: s }, &[x])
    }

    /// `mean((x − target)²)`.
    pub fn squared_error_mean(&mut self, x: Var, target: f64) -> Var {
        let t = lit::<T>(target);
        let v = self.value(x);
        let n = v.numel().max(1);
        let total: T = v.data().iter().map(|&z| (z - t) * (z - t)).sum();
        self.push(Tensor::scalar(total / lit(n as f64)), Op::SquaredErrorMean { x, target: t }, &[x])
    }

    /// `Σ_c Σ_bins |DFT₂(x_c)|²`, unnormalized. With `one_sided` only the
    /// `⌊W/2⌋+1` non-negative width frequencies are summed.
    pub fn spectral_energy(&mut self, x: Var, one_sided: bool) -> Result<Var> {
        let (c, h, w) = self.image_dims(x, "spectral_energy")?;
        let kept = if one_sided { one_sided_width(w) } else { w };
        let src = self.value(x).data();
        let mut total = T::zero();
        let mut spectra = Vec::with_capacity(c);
        for ci in 0..c {
            let spec = dft2(&src[ci * h * w..(ci + 1) * h * w], h, w);
            for u in 0..h {
                for v in 0..kept {
                    total += spec[u * w + v].norm_sqr();
                }
            }
            spectra.push(spec);
        }
        Ok(self.push(Tensor::scalar(total), Op::SpectralEnergy { x, one_sided, spectra }, &[x]))
    }

    // ----- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar node. Gradients of every node that
    /// requires them are retained until the next call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss(numel));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|g| Tensor::new(node.value.shape(), g).expect("grad shape")))
            .collect();
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cout } => {
                let (rows, npos) = (geom.rows(), geom.positions());
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        accumulate_channel_sums(db, g, npos);
                    }
                }
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = Vec::new();
                for chunk in geom.row_chunks() {
                    let (start, npc) = (chunk.start * geom.ow, chunk.len() * geom.ow);
                    cols.resize(rows * npc, T::zero());
                    if need_w {
                        im2col_rows(xv, geom, chunk.clone(), &mut cols);
                        let dw = self.slot(grads, *w).expect("requires grad");
                        matmul_ld(*cout, npc, rows, &g[start..], npos, false, &cols, npc, true, dw, rows, true);
                    }
                    if need_x {
                        matmul_ld(rows, *cout, npc, wv, rows, true, &g[start..], npos, false, &mut cols, npc, false);
                        let dx = self.slot(grads, *x).expect("requires grad");
                        col2im_rows(&cols, geom, chunk, dx);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => {
                let (rows, npos) = (geom.rows(), geom.positions());
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        accumulate_channel_sums(db, g, geom.h * geom.w);
                    }
                }
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                if need_x || need_w {
                    let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                    let mut dcols = Vec::new();
                    for chunk in geom.row_chunks() {
                        let (start, npc) = (chunk.start * geom.ow, chunk.len() * geom.ow);
                        dcols.resize(rows * npc, T::zero());
                        im2col_rows(g, geom, chunk, &mut dcols);
                        if let Some(dw) = self.slot(grads, *w) {
                            matmul_ld(*cin, npc, rows, &xv[start..], npos, false, &dcols, npc, true, dw, rows, true);
                        }
                        if let Some(dx) = self.slot(grads, *x) {
                            matmul_ld(*cin, rows, npc, wv, rows, false, &dcols, npc, false, &mut dx[start..], npos, true);
                        }
                    }
                }
            }
            Op::ReflectPad { x, pad } => {
                let (c, h, w) = match self.shape(*x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                if let Some(dx) = self.slot(grads, *x) {
                    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                    for ci in 0..c {
                        for y in 0..ph {
                            let sy = reflect_index(y as isize - *pad as isize, h);
                            for xx in 0..pw {
                                let sx = reflect_index(xx as isize - *pad as isize, w);
                                dx[(ci * h + sy) * w + sx] += g[(ci * ph + y) * pw + xx];
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = inv_std.len();
                    let n = out.len() / c;
                    let nf = lit::<T>(n as f64);
                    for ci in 0..c {
                        let y = &out[ci * n..(ci + 1) * n];
                        let dy = &g[ci * n..(ci + 1) * n];
                        let mean_dy = dy.iter().copied().sum::<T>() / nf;
                        let mean_dyy = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((d, &dyv), &yv) in dx[ci * n..(ci + 1) * n].iter_mut().zip(dy).zip(y) {
                            *d += inv_std[ci] * (dyv - mean_dy - yv * mean_dyy);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if v > T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(out) {
                        *d += gv * (T::one() - y * y);
                    }
                }
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        } else if v < T::zero() {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        for (dd, &gv) in d.iter_mut().zip(g) {
                            *dd += gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    for (dd, &gv) in d.iter_mut().zip(g) {
                        *dd += gv;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for (dd, &gv) in d.iter_mut().zip(g) {
                        *dd -= gv;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let gv = g[0];
                    dx.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.matrix_dims(*x, "").expect("checked");
                let o = out.len() / n.max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    matmul(n, o, i, g, false, self.value(*w).data(), false, dx, true);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    matmul(o, n, i, g, true, self.value(*x).data(), false, dw, true);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks_exact(o) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                let (c, h, w) = match self.shape(*x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let hw = h * w;
                if let Some(dx) = self.slot(grads, *x) {
                    for (s, &loc) in idx.iter().enumerate() {
                        for ci in 0..c {
                            dx[ci * hw + loc] += g[s * c + ci];
                        }
                    }
                }
            }
            Op::RowNormalize { x, norms, eps } => {
                let xv = self.value(*x).data();
                let d = xv.len() / norms.len().max(1);
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let denom = norm + *eps;
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let coef = if norm > T::zero() {
                            dot / (denom * denom * norm)
                        } else {
                            T::zero()
                        };
                        for ((dd, &gv), &xvv) in dx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(xr) {
                            *dd += gv / denom - xvv * coef;
                        }
                    }
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.matrix_dims(*a, "").expect("checked");
                let (n, _) = self.matrix_dims(*b, "").expect("checked");
                if let Some(da) = self.slot(grads, *a) {
                    matmul(m, n, k, g, false, self.value(*b).data(), false, da, true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    matmul(n, m, k, g, true, self.value(*a).data(), false, db, true);
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let d = av.len() / g.len().max(1);
                if let Some(da) = self.slot(grads, *a) {
                    for (k, v) in da.iter_mut().enumerate() {
                        *v += g[k / d] * bv[k];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (k, v) in db.iter_mut().enumerate() {
                        *v += g[k / d] * av[k];
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (n, p) = self.matrix_dims(*a, "").expect("checked");
                let (_, q) = self.matrix_dims(*b, "").expect("checked");
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..n {
                        for (d, &gv) in da[r * p..(r + 1) * p].iter_mut().zip(&g[r * (p + q)..r * (p + q) + p]) {
                            *d += gv;
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..n {
                        for (d, &gv) in db[r * q..(r + 1) * q].iter_mut().zip(&g[r * (p + q) + p..(r + 1) * (p + q)]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &gv) in dp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += gv;
                        }
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / lit(n as f64);
                if let Some(dl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::LogSigmoidMean { x, sign } => {
                let xv = self.value(*x).data();
                let scale = g[0] / lit(xv.len().max(1) as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &z) in dx.iter_mut().zip(xv) {
                        // d/dz log σ(s·z) = s·σ(−s·z)
                        *d += scale * *sign * sigmoid(-(*sign * z));
                    }
                }
            }
            Op::SquaredErrorMean { x, target } => {
                let xv = self.value(*x).data();
                let scale = g[0] * lit(2.0) / lit(xv.len().max(1) as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &z) in dx.iter_mut().zip(xv) {
                        *d += scale * (z - *target);
                    }
                }
            }
            Op::SpectralEnergy { x, one_sided, spectra } => {
                let (_, h, w) = match self.shape(*x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let kept = if *one_sided { one_sided_width(w) } else { w };
                if let Some(dx) = self.slot(grads, *x) {
                    // ∂/∂x Σ_{k∈S}|F_k|² = 2·Re Σ_{k∈S} F_k·e^{+iθ(k,x)}
                    let two = lit::<T>(2.0) * g[0];
                    for (ci, spec) in spectra.iter().enumerate() {
                        let mut masked = spec.clone();
                        for u in 0..h {
                            for v in kept..w {
                                masked[u * w + v] = Complex::new(T::zero(), T::zero());
                            }
                        }
                        let back = idft2_unnormalized(&masked, h, w);
                        for (d, z) in dx[ci * h * w..(ci + 1) * h * w].iter_mut().zip(&back) {
                            *d += two * z.re;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_channel_sums<T: Real>(db: &mut [T], g: &[T], plane: usize) {
    for (d, chunk) in db.iter_mut().zip(g.chunks_exact(plane)) {
        *d += chunk.iter().copied().sum::<T>();
    }
}

/// `log σ(z) = −softplus(−z)`.
pub fn log_sigmoid<T: Real>(z: T) -> T {
    let zero = T::zero();
    -((-z).max(zero) + (-(z.abs())).exp().ln_1p())
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
