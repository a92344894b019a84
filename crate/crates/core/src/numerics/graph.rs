//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] walks it in reverse. The graph is consumed
//! by `backward`; a new one is built for every training step.
//!
//! Broadcasting is deliberately narrow: in `add`, `sub` and `mul` the right
//! operand may have a shape that is a trailing suffix of the left operand's
//! shape (including the scalar shape `[]`) and is repeated over the leading
//! dimensions. Anything else is a shape error.

use crate::error::{shape_err, Error, Result};
use crate::numerics::tensor::{split_axis, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<E: Real> {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor<E>]) -> Result<Tensor<E>>;
    /// Gradient with respect to each input, each flat and of the input's length.
    fn backward(&self, inputs: &[&Tensor<E>], output: &Tensor<E>, grad_out: &[E]) -> Vec<Vec<E>>;
}

enum Op<E: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    MatMul {
        a: Var,
        b: Var,
        shared: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    LayerNorm(Var, Vec<E>),
    BatchNorm(Var, Vec<E>),
    NormalizeRows(Var, Vec<E>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_h: usize,
        pad_w: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Custom(Box<dyn CustomOp<E>>, Vec<Var>),
}

struct Node<E: Real> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recorded computation of one forward pass.
pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
}

/// Gradients of leaf nodes after [`Graph::backward`].
pub struct Gradients<E: Real> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Real> Gradients<E> {
    /// `None` for constants, for nodes that do not reach the loss, and for
    /// interior nodes (their gradients are released during the sweep).
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn suffix_of(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn gelu_parts<E: Real>(x: E) -> (E, E) {
    // tanh approximation of GELU; returns (value, derivative)
    let c = E::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = E::lit(0.044715);
    let half = E::lit(0.5);
    let one = E::one();
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + E::lit(3.0) * a * x * x);
    (y, dy)
}

/// Flat input index for every flat output index of a permutation.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = in_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += out_strides_in[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides_in[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}

fn im2col<E: Real>(x: &[E], cin: usize, len: usize, k: usize, pad: usize, cols: &mut [E]) {
    // cols: (len, cin*k)
    let ck = cin * k;
    for l in 0..len {
        let row = &mut cols[l * ck..(l + 1) * ck];
        for c in 0..cin {
            let xs = &x[c * len..(c + 1) * len];
            for t in 0..k {
                let pos = l + t;
                row[c * k + t] = if pos >= pad && pos - pad < len {
                    xs[pos - pad]
                } else {
                    E::zero()
                };
            }
        }
    }
}

fn row_iter<E: Real>(data: &[E], d: usize) -> impl Iterator<Item = &[E]> {
    data.chunks_exact(d)
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input: receives a gradient on `backward`.
    pub fn leaf(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_of(sb, sa) {
            return shape_err(op, format!("{sb:?} does not broadcast onto {sa:?}"));
        }
        Ok(())
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(E, E) -> E) -> Tensor<E> {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let nb = tb.len();
        let data = ta
            .data()
            .chunks_exact(nb)
            .flat_map(|chunk| chunk.iter().zip(tb).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(ta.shape(), data).expect("broadcast preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| x * c).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Sum of several same-shaped (or suffix-broadcast) terms, left to right.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Invalid("add_all of no terms".into()))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    /// `a (..., m, k) x b` where `b` is either `(k, n)`, shared across the
    /// leading dimensions of `a`, or `(..., k, n)` with the same leading
    /// dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: rank < 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: inner dims differ"));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != *lead {
            return shape_err("matmul", format!("{sa:?} x {sb:?}: batch dims differ"));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![E::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            if shared {
                E::gemm(false, false, batch * m, k, n, E::one(), da, db, E::zero(), &mut out);
            } else {
                for i in 0..batch {
                    E::gemm(
                        false,
                        false,
                        m,
                        k,
                        n,
                        E::one(),
                        &da[i * m * k..(i + 1) * m * k],
                        &db[i * k * n..(i + 1) * k * n],
                        E::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::MatMul {
                a,
                b,
                shared,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of rank {}", s.len()));
        }
        let map = permute_map(&s, perm);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Permute(a, perm.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return shape_err("transpose", "rank < 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    fn rowwise(&self, a: Var, f: impl Fn(&[E], &mut [E])) -> Tensor<E> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = vec![E::zero(); t.len()];
        for (src, dst) in t.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            f(src, dst);
        }
        Tensor::new(t.shape(), out).unwrap()
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.rowwise(a, |x, y| {
            let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
            let mut s = E::zero();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mx).exp();
                s += *yi;
            }
            for yi in y.iter_mut() {
                *yi /= s;
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.rowwise(a, |x, y| {
            let mx = x.iter().copied().fold(E::neg_infinity(), E::max);
            let lse = mx + x.iter().map(|&xi| (xi - mx).exp()).sum::<E>().ln();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = xi - lse;
            }
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| gelu_parts(x).0).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x.tanh()).collect()).unwrap();
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = E::lit(self.value(a).len() as f64);
        let s = self.sum(a);
        self.scale(s, E::one() / n)
    }

    /// Normalizes each last-axis row to zero mean and unit population
    /// variance; `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, a: Var, eps: E) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        if d < 2 {
            return shape_err("layer_norm", "last dimension must be at least 2");
        }
        let dn = E::lit(d as f64);
        let mut rstd = Vec::with_capacity(t.len() / d);
        let mut out = vec![E::zero(); t.len()];
        for (x, y) in row_iter(t.data(), d).zip(out.chunks_exact_mut(d)) {
            let mean = x.iter().copied().sum::<E>() / dn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / dn;
            let r = E::one() / (var + eps).sqrt();
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = (xi - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LayerNorm(a, rstd), rg))
    }

    /// Per-channel normalization of `(B, C, ...)` over the batch and all
    /// trailing axes, using the batch's own population statistics. Returns the
    /// normalized node together with the per-channel mean and population
    /// variance that were used.
    pub fn batch_norm(&mut self, a: Var, eps: E) -> Result<(Var, Vec<E>, Vec<E>)> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() < 2 {
            return shape_err("batch_norm", format!("{s:?}: need (B, C, ...)"));
        }
        let (b, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let count = E::lit((b * inner) as f64);
        let x = t.data();
        let mut means = vec![E::zero(); c];
        let mut vars = vec![E::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                means[ci] += x[off..off + inner].iter().copied().sum::<E>();
            }
        }
        means.iter_mut().for_each(|m| *m /= count);
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                vars[ci] += x[off..off + inner]
                    .iter()
                    .map(|&v| (v - means[ci]) * (v - means[ci]))
                    .sum::<E>();
            }
        }
        vars.iter_mut().for_each(|v| *v /= count);
        let rstd: Vec<E> = vars.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
        let mut out = vec![E::zero(); x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * inner;
                for j in off..off + inner {
                    out[j] = (x[j] - means[ci]) * rstd[ci];
                }
            }
        }
        let out = Tensor::new(s, out)?;
        let rg = self.rg(&[a]);
        let v = self.push(out, Op::BatchNorm(a, rstd), rg);
        Ok((v, means, vars))
    }

    /// Scales each last-axis row to unit Euclidean norm. Zero rows are an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let d = *t.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(t.len() / d);
        let mut out = vec![E::zero(); t.len()];
        for (x, y) in row_iter(t.data(), d).zip(out.chunks_exact_mut(d)) {
            let n = x.iter().map(|&v| v * v).sum::<E>().sqrt();
            if !(n > E::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!("cannot normalize row with norm {n}")));
            }
            for (yi, &xi) in y.iter_mut().zip(x) {
                *yi = xi / n;
            }
            norms.push(n);
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a, norms), rg))
    }

    /// Cross-correlation of `x (B, C_in, L)` with `w (C_out, C_in, K)` and
    /// optional bias `(C_out)`; odd `K` with symmetric zero padding keeps `L`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return shape_err("conv1d", format!("input {sx:?}, kernel {sw:?}"));
        }
        let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("conv1d kernel size {k} must be odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv1d", format!("bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let pad = (k - 1) / 2;
        let ck = cin * k;
        let mut out = vec![E::zero(); bsz * cout * len];
        let mut cols = vec![E::zero(); len * ck];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for bi in 0..bsz {
                im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, pad, &mut cols);
                let o = &mut out[bi * cout * len..(bi + 1) * cout * len];
                if let Some(bd) = bd {
                    for (row, &bias) in o.chunks_exact_mut(len).zip(bd) {
                        row.iter_mut().for_each(|v| *v = bias);
                    }
                }
                E::gemm(false, true, cout, ck, len, E::one(), wd, &cols, E::one(), o);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(Tensor::new(&[bsz, cout, len], out)?, Op::Conv1d { x, w, b, pad }, rg))
    }

    /// 2-D cross-correlation of `x (B, C_in, H, W)` with `w (C_out, C_in, KH, KW)`,
    /// odd kernels, same padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return shape_err("conv2d", format!("input {sx:?}, kernel {sw:?}"));
        }
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} channels", self.shape(b)));
            }
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![E::zero(); bsz * cout * h * wd];
        for bi in 0..bsz {
            for o in 0..cout {
                let dst = &mut out[(bi * cout + o) * h * wd..(bi * cout + o + 1) * h * wd];
                if let Some(b) = b {
                    let bias = self.value(b).data()[o];
                    dst.iter_mut().for_each(|v| *v = bias);
                }
                for c in 0..cin {
                    let src = &xs[(bi * cin + c) * h * wd..(bi * cin + c + 1) * h * wd];
                    for i in 0..kh {
                        for j in 0..kw {
                            let wv = ws[((o * cin + c) * kh + i) * kw + j];
                            if wv == E::zero() {
                                continue;
                            }
                            for r in 0..h {
                                let sr = r + i;
                                if sr < ph || sr - ph >= h {
                                    continue;
                                }
                                let srow = &src[(sr - ph) * wd..(sr - ph + 1) * wd];
                                let drow = &mut dst[r * wd..(r + 1) * wd];
                                // columns q with 0 <= q + j - pw < wd
                                let lo = pw.saturating_sub(j);
                                let hi = (wd + pw).saturating_sub(j).min(wd);
                                for q in lo..hi {
                                    drow[q] += wv * srow[q + j - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(
            Tensor::new(&[bsz, cout, h, wd], out)?,
            Op::Conv2d {
                x,
                w,
                b,
                pad_h: ph,
                pad_w: pw,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`, keeping the axis.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return shape_err("narrow", format!("{s:?} axis {axis} [{start}, {})", start + len));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Narrow { a, axis, start }, rg))
    }

    /// Index `i` along `axis`, dropping the axis.
    pub fn select(&mut self, a: Var, axis: usize, i: usize) -> Result<Var> {
        let v = self.narrow(a, axis, i, 1)?;
        let mut shape = self.shape(v).to_vec();
        shape.remove(axis);
        self.reshape(v, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
            {
                return shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Stacks equally shaped parts on a new axis.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = self.shape(p).to_vec();
            if axis > s.len() {
                return shape_err("stack", format!("axis {axis} for {s:?}"));
            }
            s.insert(axis, 1);
            lifted.push(self.reshape(p, &s)?);
        }
        self.concat(&lifted, axis)
    }

    /// Rows of `table (V, D)` picked by `ids`, shaped `lead ++ [D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return shape_err("gather", format!("table {s:?}, {} ids for {lead:?}", ids.len()));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("index {bad} out of range for {v} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(&[table]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<E>>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let vals: Vec<&Tensor<E>> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Custom(op, inputs.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, consuming the graph.
    pub fn backward(self, loss: Var) -> Result<Gradients<E>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", ln.value.shape()));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<E>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![E::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            backprop(&nodes, node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| match (&n.op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(n.value.shape(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Adds `f(j)` into the gradient slot of `v` for every flat index `j`.
fn acc<E: Real>(nodes: &[Node<E>], grads: &mut [Option<Vec<E>>], v: Var, f: impl Fn(usize) -> E) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().enumerate().for_each(|(j, x)| *x += f(j)),
        slot @ None => *slot = Some((0..n).map(f).collect()),
    }
}

fn acc_vec<E: Real>(nodes: &[Node<E>], grads: &mut [Option<Vec<E>>], v: Var, c: Vec<E>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(c).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(c),
    }
}

fn reduce_to_suffix<E: Real>(g: &[E], nb: usize, f: impl Fn(usize) -> E) -> Vec<E> {
    let mut out = vec![E::zero(); nb];
    for (j, &gj) in g.iter().enumerate() {
        out[j % nb] += gj * f(j);
    }
    out
}

fn backprop<E: Real>(nodes: &[Node<E>], node: &Node<E>, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |j| g[j]);
            if nodes[b.0].requires_grad {
                let nb = nodes[b.0].value.len();
                acc_vec(nodes, grads, *b, reduce_to_suffix(g, nb, |_| E::one()));
            }
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |j| g[j]);
            if nodes[b.0].requires_grad {
                let nb = nodes[b.0].value.len();
                acc_vec(nodes, grads, *b, reduce_to_suffix(g, nb, |_| -E::one()));
            }
        }
        Op::Mul(a, b) => {
            let (da, db) = (val(*a), val(*b));
            let nb = db.len();
            acc(nodes, grads, *a, |j| g[j] * db[j % nb]);
            if nodes[b.0].requires_grad {
                acc_vec(nodes, grads, *b, reduce_to_suffix(g, nb, |j| da[j]));
            }
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, |j| g[j] * *c),
        Op::MatMul {
            a,
            b,
            shared,
            batch,
            m,
            k,
            n,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let (da, db) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                let mut ga = vec![E::zero(); batch * m * k];
                if *shared {
                    E::gemm(false, true, batch * m, n, k, E::one(), g, db, E::zero(), &mut ga);
                } else {
                    for i in 0..batch {
                        E::gemm(
                            false,
                            true,
                            m,
                            n,
                            k,
                            E::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            E::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                acc_vec(nodes, grads, *a, ga);
            }
            if nodes[b.0].requires_grad {
                let mut gb = vec![E::zero(); db.len()];
                if *shared {
                    E::gemm(true, false, k, batch * m, n, E::one(), da, g, E::zero(), &mut gb);
                } else {
                    for i in 0..batch {
                        E::gemm(
                            true,
                            false,
                            k,
                            m,
                            n,
                            E::one(),
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            E::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                        );
                    }
                }
                acc_vec(nodes, grads, *b, gb);
            }
        }
        Op::Permute(a, perm) => {
            if nodes[a.0].requires_grad {
                let map = permute_map(nodes[a.0].value.shape(), perm);
                let mut ga = vec![E::zero(); g.len()];
                for (j, &src) in map.iter().enumerate() {
                    ga[src] = g[j];
                }
                acc_vec(nodes, grads, *a, ga);
            }
        }
        Op::Reshape(a) => acc(nodes, grads, *a, |j| g[j]),
        Op::Softmax(a) => {
            let d = *node.value.shape().last().unwrap_or(&1);
            let mut ga = vec![E::zero(); g.len()];
            for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                let dot: E = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = p * (q - dot);
                }
            }
            acc_vec(nodes, grads, *a, ga);
        }
        Op::LogSoftmax(a) => {
            let d = *node.value.shape().last().unwrap_or(&1);
            let mut ga = vec![E::zero(); g.len()];
            for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(ga.chunks_exact_mut(d)) {
                let s: E = gr.iter().copied().sum();
                for ((o, &ly), &q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = q - ly.exp() * s;
                }
            }
            acc_vec(nodes, grads, *a, ga);
        }
        Op::Gelu(a) => {
            let x = val(*a);
            acc(nodes, grads, *a, |j| g[j] * gelu_parts(x[j]).1);
        }
        Op::Tanh(a) => acc(nodes, grads, *a, |j| g[j] * (E::one() - y[j] * y[j])),
        Op::Sum(a) => acc(nodes, grads, *a, |_| g[0]),
        Op::LayerNorm(a, rstd) => {
            let d = *node.value.shape().last().unwrap_or(&1);
            let dn = E::lit(d as f64);
            let mut ga = vec![E::zero(); g.len()];
            for (r, ((xh, gr), out)) in y
                .chunks_exact(d)
                .zip(g.chunks_exact(d))
                .zip(ga.chunks_exact_mut(d))
                .enumerate()
            {
                let mg = gr.iter().copied().sum::<E>() / dn;
                let mgx = gr.iter().zip(xh).map(|(&p, &q)| p * q).sum::<E>() / dn;
                for ((o, &q), &h) in out.iter_mut().zip(gr).zip(xh) {
                    *o = rstd[r] * (q - mg - h * mgx);
                }
            }
            acc_vec(nodes, grads, *a, ga);
        }
        Op::BatchNorm(a, rstd) => {
            let s = node.value.shape();
            let (b, c) = (s[0], s[1]);
            let inner: usize = s[2..].iter().product();
            let count = E::lit((b * inner) as f64);
            let mut mg = vec![E::zero(); c];
            let mut mgx = vec![E::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * inner;
                    for j in off..off + inner {
                        mg[ci] += g[j];
                        mgx[ci] += g[j] * y[j];
                    }
                }
            }
            let mut ga = vec![E::zero(); g.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * inner;
                    let (m1, m2) = (mg[ci] / count, mgx[ci] / count);
                    for j in off..off + inner {
                        ga[j] = rstd[ci] * (g[j] - m1 - y[j] * m2);
                    }
                }
            }
            acc_vec(nodes, grads, *a, ga);
        }
        Op::NormalizeRows(a, norms) => {
            let d = *node.value.shape().last().unwrap_or(&1);
            let mut ga = vec![E::zero(); g.len()];
            for (r, ((yr, gr), out)) in y
                .chunks_exact(d)
                .zip(g.chunks_exact(d))
                .zip(ga.chunks_exact_mut(d))
                .enumerate()
            {
                let dot: E = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((o, &p), &q) in out.iter_mut().zip(yr).zip(gr) {
                    *o = (q - p * dot) / norms[r];
                }
            }
            acc_vec(nodes, grads, *a, ga);
        }
        Op::Conv1d { x, w, b, pad } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (bsz, cin, len) = (sx[0], sx[1], sx[2]);
            let (cout, k) = (sw[0], sw[2]);
            let ck = cin * k;
            let (xd, wd) = (val(*x), val(*w));
            let mut cols = vec![E::zero(); len * ck];
            let mut gw = vec![E::zero(); wd.len()];
            let mut gx = vec![E::zero(); xd.len()];
            let mut gcols = vec![E::zero(); len * ck];
            for bi in 0..bsz {
                let go = &g[bi * cout * len..(bi + 1) * cout * len];
                if nodes[w.0].requires_grad {
                    im2col(&xd[bi * cin * len..(bi + 1) * cin * len], cin, len, k, *pad, &mut cols);
                    E::gemm(false, false, cout, len, ck, E::one(), go, &cols, E::one(), &mut gw);
                }
                if nodes[x.0].requires_grad {
                    E::gemm(true, false, len, cout, ck, E::one(), go, wd, E::zero(), &mut gcols);
                    let gxb = &mut gx[bi * cin * len..(bi + 1) * cin * len];
                    for l in 0..len {
                        for c in 0..cin {
                            for t in 0..k {
                                let pos = l + t;
                                if pos >= *pad && pos - *pad < len {
                                    gxb[c * len + pos - *pad] += gcols[l * ck + c * k + t];
                                }
                            }
                        }
                    }
                }
            }
            acc_vec(nodes, grads, *x, gx);
            acc_vec(nodes, grads, *w, gw);
            if let Some(b) = b {
                if nodes[b.0].requires_grad {
                    let mut gb = vec![E::zero(); cout];
                    for (r, row) in g.chunks_exact(len).enumerate() {
                        gb[r % cout] += row.iter().copied().sum::<E>();
                    }
                    acc_vec(nodes, grads, *b, gb);
                }
            }
        }
        Op::Conv2d { x, w, b, pad_h, pad_w } => {
            let sx = nodes[x.0].value.shape();
            let sw = nodes[w.0].value.shape();
            let (bsz, cin, h, wdt) = (sx[0], sx[1], sx[2], sx[3]);
            let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
            let (ph, pw) = (*pad_h, *pad_w);
            let (xd, wd) = (val(*x), val(*w));
            let mut gx = vec![E::zero(); xd.len()];
            let mut gw = vec![E::zero(); wd.len()];
            let plane = h * wdt;
            for bi in 0..bsz {
                for o in 0..cout {
                    let go = &g[(bi * cout + o) * plane..(bi * cout + o + 1) * plane];
                    for c in 0..cin {
                        let xoff = (bi * cin + c) * plane;
                        for i in 0..kh {
                            for j in 0..kw {
                                let widx = ((o * cin + c) * kh + i) * kw + j;
                                let wv = wd[widx];
                                let lo = pw.saturating_sub(j);
                                let hi = (wdt + pw).saturating_sub(j).min(wdt);
                                let mut gwv = E::zero();
                                for r in 0..h {
                                    let sr = r + i;
                                    if sr < ph || sr - ph >= h {
                                        continue;
                                    }
                                    let srow = xoff + (sr - ph) * wdt;
                                    for q in lo..hi {
                                        let gq = go[r * wdt + q];
                                        gwv += gq * xd[srow + q + j - pw];
                                        gx[srow + q + j - pw] += gq * wv;
                                    }
                                }
                                gw[widx] += gwv;
                            }
                        }
                    }
                }
            }
            acc_vec(nodes, grads, *x, gx);
            acc_vec(nodes, grads, *w, gw);
            if let Some(b) = b {
                if nodes[b.0].requires_grad {
                    let mut gb = vec![E::zero(); cout];
                    for (r, p) in g.chunks_exact(plane).enumerate() {
                        gb[r % cout] += p.iter().copied().sum::<E>();
                    }
                    acc_vec(nodes, grads, *b, gb);
                }
            }
        }
        Op::Narrow { a, axis, start } => {
            if nodes[a.0].requires_grad {
                let sa = nodes[a.0].value.shape();
                let (outer, n, inner) = split_axis(sa, *axis);
                let len = node.value.shape()[*axis];
                let mut ga = vec![E::zero(); nodes[a.0].value.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc_vec(nodes, grads, *a, ga);
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.shape()[*axis];
                if nodes[p.0].requires_grad {
                    let mut gp = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[s..s + n * inner]);
                    }
                    acc_vec(nodes, grads, p, gp);
                }
                offset += n;
            }
        }
        Op::Gather(table, ids) => {
            if nodes[table.0].requires_grad {
                let d = nodes[table.0].value.shape()[1];
                let mut gt = vec![E::zero(); nodes[table.0].value.len()];
                for (r, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += g[r * d + c];
                    }
                }
                acc_vec(nodes, grads, *table, gt);
            }
        }
        Op::Custom(op, inputs) => {
            let vals: Vec<&Tensor<E>> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let gs = op.backward(&vals, &node.value, g);
            for (&v, gv) in inputs.iter().zip(gs) {
                acc_vec(nodes, grads, v, gv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_x() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_only_on_trailing_suffix() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let ok = g.constant(Tensor::zeros(&[3]));
        let bad = g.constant(Tensor::zeros(&[2]));
        let s = g.constant(Tensor::scalar(1.0));
        assert!(g.add(a, ok).is_ok());
        assert!(g.add(a, s).is_ok());
        assert!(g.add(a, bad).is_err());
        assert!(g.mul(ok, a).is_err());
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = g.constant(Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(z, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[i][j][k] = z[j][k][i]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
    }

    #[test]
    fn narrow_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let parts: Vec<Var> = (0..3).map(|i| g.narrow(x, 1, i, 1).unwrap()).collect();
        let y = g.concat(&parts, 1).unwrap();
        assert_eq!(g.value(x), g.value(y));
    }

    #[test]
    fn batched_matmul_matches_loop() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 2, 1], vec![1.0, 1.0, 2.0, -1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 2.0]);
    }
}
