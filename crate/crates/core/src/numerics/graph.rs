//! Wengert-list tape over matrix-valued nodes.
//!
//! A [`Graph`] borrows a [`ParamStore`] for its lifetime; parameter nodes read
//! the store directly so no weights are copied per step. [`Graph::backward`]
//! returns owned [`Gradients`] that can be folded into the store once the
//! graph has been dropped.

use super::kernels::{self, gemm, gemm_strided, moments, sigmoid, StridedRef};
use super::{round_to_precision, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// Named, ordered collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Total number of scalar entries over all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Global L2 norm over the gradients of trainable parameters.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddRow { x: Var, row: Var },
    Relu { x: Var },
    Silu { x: Var },
    Sigmoid { x: Var },
    Glu { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    BagMean { table: Var, bags: Vec<Vec<usize>> },
    ConcatCols { a: Var, b: Var },
    Unfold { x: Var, kernel: usize, stride: usize },
    DepthwiseConv { x: Var, w: Var, b: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum { x: Var },
    Mean { x: Var },
    WeightedSum { xs: Vec<Var>, ws: Vec<f64> },
    ScalarLoss { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Reverse-mode tape.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout: Option<ChaCha8Rng>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout = Some(rng);
        self
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        round_to_precision(value.data_mut());
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant or differentiable input leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    /// `a · b`, or `a · bᵀ` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let n = if trans_b { br } else { bc };
        let kb = if trans_b { bc } else { br };
        assert_eq!(k, kb, "matmul inner extent mismatch");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out).unwrap();
        self.push(t, Op::MatMul { a, b, trans_b })
    }

    /// `x · w + b` with `w` stored `in × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (m, k) = self.dims(x);
        let (wk, n) = self.dims(w);
        assert_eq!(k, wk, "linear input width {k} vs weight rows {wk}");
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), n, "bias length");
            for row in out.chunks_exact_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            if b.is_some() { 1.0 } else { 0.0 },
        );
        let t = Tensor::new(vec![m, n], out).unwrap();
        self.push(t, Op::Linear { x, w, b })
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale { a, c })
    }

    /// Adds a length-`cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, n) = self.dims(x);
        let r = self.value(row).data();
        assert_eq!(r.len(), n, "add_row width");
        let mut t = self.value(x).clone();
        for chunk in t.data_mut().chunks_exact_mut(n) {
            for (v, b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        self.push(t, Op::AddRow { x, row })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu { x })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::silu);
        self.push(t, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid { x })
    }

    /// Gated linear unit over the column halves: `a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Var {
        let (m, n2) = self.dims(x);
        assert!(n2 % 2 == 0, "glu needs an even width");
        let n = n2 / 2;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n2) {
            for j in 0..n {
                out.push(row[j] * sigmoid(row[n + j]));
            }
        }
        let t = Tensor::new(vec![m, n], out).unwrap();
        self.push(t, Op::Glu { x })
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            kernels::softmax_in_place(row);
        }
        self.push(t, Op::Softmax { x })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (_, n) = self.dims(x);
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            let z = kernels::lse(row);
            for v in row.iter_mut() {
                *v -= z;
            }
        }
        self.push(t, Op::LogSoftmax { x })
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert!(g.len() == n && b.len() == n, "layer_norm parameter width");
        let xs = self.value(x).data();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in xs.chunks_exact(n) {
            let (mean, r) = moments(row, eps);
            rstd.push(r);
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(vec![m, n], out).unwrap();
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (rows, d) = self.dims(table);
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "embedding id {i} out of range {rows}");
            out.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out).unwrap();
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row `i` of the output is the mean of `table` rows listed in `bags[i]`;
    /// an empty bag gives the zero row.
    pub fn bag_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Var {
        let (rows, d) = self.dims(table);
        let tab = self.value(table).data();
        let mut out = vec![0.0; bags.len() * d];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let dst = &mut out[i * d..(i + 1) * d];
            for &s in bag {
                assert!(s < rows, "bag index {s} out of range {rows}");
                for (o, v) in dst.iter_mut().zip(&tab[s * d..(s + 1) * d]) {
                    *o += v;
                }
            }
            let inv = 1.0 / bag.len() as f64;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let t = Tensor::new(vec![bags.len(), d], out).unwrap();
        self.push(
            t,
            Op::BagMean {
                table,
                bags: bags.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, ca) = self.dims(a);
        let (mb, cb) = self.dims(b);
        assert_eq!(m, mb, "concat_cols row mismatch");
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (ca + cb));
        for i in 0..m {
            out.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::new(vec![m, ca + cb], out).unwrap();
        self.push(t, Op::ConcatCols { a, b })
    }

    /// Sliding windows over rows: output row `t` concatenates input rows
    /// `t·stride .. t·stride + kernel`. No padding.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Var {
        let (rows, c) = self.dims(x);
        assert!(rows >= kernel, "unfold needs at least {kernel} rows");
        let out_rows = (rows - kernel) / stride + 1;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(out_rows * kernel * c);
        for t in 0..out_rows {
            let start = t * stride * c;
            out.extend_from_slice(&xs[start..start + kernel * c]);
        }
        let t = Tensor::new(vec![out_rows, kernel * c], out).unwrap();
        self.push(t, Op::Unfold { x, kernel, stride })
    }

    /// Per-channel convolution along rows with zero "same" padding.
    /// `w` is `kernel × channels`, `kernel` odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (t_len, c) = self.dims(x);
        let (k, wc) = self.dims(w);
        assert!(wc == c && k % 2 == 1, "depthwise kernel shape");
        let pad = (k - 1) / 2;
        let (xs, ws, bs) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = Vec::with_capacity(t_len * c);
        for _ in 0..t_len {
            out.extend_from_slice(bs);
        }
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize + j as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                let dst = &mut out[t * c..(t + 1) * c];
                for ch in 0..c {
                    dst[ch] += ws[j * c + ch] * xs[src * c + ch];
                }
            }
        }
        let t = Tensor::new(vec![t_len, c], out).unwrap();
        self.push(t, Op::DepthwiseConv { x, w, b })
    }

    /// Scaled dot-product attention split over `heads` column groups.
    /// With `causal`, query `i` only attends to keys `j ≤ i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, d) = self.dims(q);
        let (tk, dk_all) = self.dims(k);
        assert_eq!(dk_all, d, "attention key width");
        assert_eq!(self.dims(v), (tk, d), "attention value shape");
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        assert!(tk > 0, "attention over zero keys");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * d];
        for h in 0..heads {
            let off = h * tq * tk;
            gemm_strided(
                tq,
                dk,
                tk,
                StridedRef::new(qs, h * dk, d as isize, 1),
                StridedRef::new(ks, h * dk, 1, d as isize),
                &mut probs,
                off,
                tk as isize,
                0.0,
            );
            for i in 0..tq {
                let row = &mut probs[off + i * tk..off + (i + 1) * tk];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        *s * scale
                    };
                }
                kernels::softmax_in_place(row);
            }
            gemm_strided(
                tq,
                tk,
                dk,
                StridedRef::new(&probs, off, tk as isize, 1),
                StridedRef::new(vs, h * dk, d as isize, 1),
                &mut out,
                h * dk,
                d as isize,
                0.0,
            );
        }
        let t = Tensor::new(vec![tq, d], out).unwrap();
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Inverted dropout; identity when the graph has no dropout RNG or `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 || self.dropout.is_none() {
            return x;
        }
        let n = self.value(x).len();
        let rng = self.dropout.as_mut().expect("checked above");
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data).unwrap();
        self.push(t, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x })
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[Var], ws: &[f64]) -> Var {
        assert_eq!(xs.len(), ws.len());
        let mut s = 0.0;
        for (x, w) in xs.iter().zip(ws) {
            let t = self.value(*x);
            assert_eq!(t.len(), 1, "weighted_sum expects scalars");
            s += w * t.item();
        }
        self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                xs: xs.to_vec(),
                ws: ws.to_vec(),
            },
        )
    }

    /// Scalar node whose value and gradient w.r.t. `x` were computed outside
    /// the tape (fused loss kernels).
    pub fn scalar_loss(&mut self, x: Var, value: f64, grad: Tensor) -> Var {
        assert_eq!(grad.shape(), self.value(x).shape(), "loss gradient shape");
        self.push(
            Tensor::scalar(value),
            Op::ScalarLoss {
                x,
                grad: grad.into_data(),
            },
        )
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.value(root).len()]);
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(gy);
                }
                op => self.backprop(op, Var(i), &gy, &mut grads),
            }
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (ParamId(p), v)))
            .collect();
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop(&self, op: &Op, y: Var, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = self.value(y).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = buf(grads, *a, m * k);
                if *trans_b {
                    gemm(m, n, k, gy, false, bv, false, da, 1.0);
                } else {
                    gemm(m, n, k, gy, false, bv, true, da, 1.0);
                }
                let db = buf(grads, *b, k * n);
                if *trans_b {
                    gemm(n, m, k, gy, true, av, false, db, 1.0);
                } else {
                    gemm(k, m, n, av, true, gy, false, db, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims(*x);
                let n = self.value(*w).cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let dx = buf(grads, *x, m * k);
                gemm(m, n, k, gy, false, wv, true, dx, 1.0);
                let dw = buf(grads, *w, k * n);
                gemm(k, m, n, xv, true, gy, false, dw, 1.0);
                if let Some(b) = b {
                    let db = buf(grads, *b, n);
                    for row in gy.chunks_exact(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                acc(grads, *a, gy, 1.0);
                acc(grads, *b, gy, 1.0);
            }
            Op::Sub { a, b } => {
                acc(grads, *a, gy, 1.0);
                acc(grads, *b, gy, -1.0);
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, v)| g * v).collect();
                let gb: Vec<f64> = gy.iter().zip(av).map(|(g, v)| g * v).collect();
                acc(grads, *a, &ga, 1.0);
                acc(grads, *b, &gb, 1.0);
            }
            Op::Scale { a, c } => acc(grads, *a, gy, *c),
            Op::AddRow { x, row } => {
                acc(grads, *x, gy, 1.0);
                let n = self.value(*row).len();
                let dr = buf(grads, *row, n);
                for chunk in gy.chunks_exact(n) {
                    for (d, g) in dr.iter_mut().zip(chunk) {
                        *d += g;
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let g: Vec<f64> = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(grads, *x, &g, 1.0);
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let g: Vec<f64> = gy
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| {
                        let s = sigmoid(*v);
                        g * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                acc(grads, *x, &g, 1.0);
            }
            Op::Sigmoid { x } => {
                let yv = self.value(y).data();
                let g: Vec<f64> = gy
                    .iter()
                    .zip(yv)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                acc(grads, *x, &g, 1.0);
            }
            Op::Glu { x } => {
                let (m, n2) = self.dims(*x);
                let n = n2 / 2;
                let xv = self.value(*x).data();
                let dx = buf(grads, *x, m * n2);
                for i in 0..m {
                    for j in 0..n {
                        let a = xv[i * n2 + j];
                        let s = sigmoid(xv[i * n2 + n + j]);
                        let g = gy[i * n + j];
                        dx[i * n2 + j] += g * s;
                        dx[i * n2 + n + j] += g * a * s * (1.0 - s);
                    }
                }
            }
            Op::Softmax { x } => {
                let n = self.value(y).cols();
                let yv = self.value(y).data();
                let mut g = vec![0.0; yv.len()];
                for ((gr, yr), out) in gy
                    .chunks_exact(n)
                    .zip(yv.chunks_exact(n))
                    .zip(g.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, &g, 1.0);
            }
            Op::LogSoftmax { x } => {
                let n = self.value(y).cols();
                let yv = self.value(y).data();
                let mut g = vec![0.0; yv.len()];
                for ((gr, yr), out) in gy
                    .chunks_exact(n)
                    .zip(yv.chunks_exact(n))
                    .zip(g.chunks_exact_mut(n))
                {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                acc(grads, *x, &g, 1.0);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma).data();
                {
                    let dg = buf(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gy[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let db = buf(grads, *beta, n);
                    for row in gy.chunks_exact(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                let dx = buf(grads, *x, m * n);
                let inv_n = 1.0 / n as f64;
                for i in 0..m {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..n {
                        let dh = gy[i * n + j] * gv[j];
                        s1 += dh;
                        s2 += dh * xhat[i * n + j];
                    }
                    for j in 0..n {
                        let dh = gy[i * n + j] * gv[j];
                        dx[i * n + j] +=
                            rstd[i] * (dh - s1 * inv_n - xhat[i * n + j] * s2 * inv_n);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (rows, d) = self.dims(*table);
                let dt = buf(grads, *table, rows * d);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gy[i * d + j];
                    }
                }
            }
            Op::BagMean { table, bags } => {
                let (rows, d) = self.dims(*table);
                let dt = buf(grads, *table, rows * d);
                for (i, bag) in bags.iter().enumerate() {
                    if bag.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / bag.len() as f64;
                    for &s in bag {
                        for j in 0..d {
                            dt[s * d + j] += gy[i * d + j] * inv;
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (m, ca) = self.dims(*a);
                let cb = self.value(*b).cols();
                let w = ca + cb;
                {
                    let da = buf(grads, *a, m * ca);
                    for i in 0..m {
                        for j in 0..ca {
                            da[i * ca + j] += gy[i * w + j];
                        }
                    }
                }
                let db = buf(grads, *b, m * cb);
                for i in 0..m {
                    for j in 0..cb {
                        db[i * cb + j] += gy[i * w + ca + j];
                    }
                }
            }
            Op::Unfold { x, kernel, stride } => {
                let (rows, c) = self.dims(*x);
                let out_rows = self.value(y).rows();
                let width = kernel * c;
                let dx = buf(grads, *x, rows * c);
                for t in 0..out_rows {
                    let start = t * stride * c;
                    for (d, g) in dx[start..start + width]
                        .iter_mut()
                        .zip(&gy[t * width..(t + 1) * width])
                    {
                        *d += g;
                    }
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (t_len, c) = self.dims(*x);
                let k = self.value(*w).rows();
                let pad = (k - 1) / 2;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                {
                    let db = buf(grads, *b, c);
                    for row in gy.chunks_exact(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                }
                let mut dw = vec![0.0; k * c];
                let mut dx = vec![0.0; t_len * c];
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src < 0 || src >= t_len as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            let g = gy[t * c + ch];
                            dw[j * c + ch] += g * xv[src * c + ch];
                            dx[src * c + ch] += g * wv[j * c + ch];
                        }
                    }
                }
                acc(grads, *w, &dw, 1.0);
                acc(grads, *x, &dx, 1.0);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, gy, grads),
            Op::Dropout { x, mask } => {
                let g: Vec<f64> = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(grads, *x, &g, 1.0);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                let dx = buf(grads, *x, n);
                for d in dx.iter_mut() {
                    *d += gy[0];
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let dx = buf(grads, *x, n);
                let g = gy[0] / n as f64;
                for d in dx.iter_mut() {
                    *d += g;
                }
            }
            Op::WeightedSum { xs, ws } => {
                for (x, w) in xs.iter().zip(ws) {
                    acc(grads, *x, gy, *w);
                }
            }
            Op::ScalarLoss { x, grad } => acc(grads, *x, grad, gy[0]),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, d) = self.dims(q);
        let tk = self.value(k).rows();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; tq * d];
        let mut dkey = vec![0.0; tk * d];
        let mut dv = vec![0.0; tk * d];
        let mut dp = vec![0.0; tq * tk];
        for h in 0..heads {
            let off = h * tq * tk;
            // dP = dO · Vᵀ
            gemm_strided(
                tq,
                dk,
                tk,
                StridedRef::new(gy, h * dk, d as isize, 1),
                StridedRef::new(vs, h * dk, 1, d as isize),
                &mut dp,
                0,
                tk as isize,
                0.0,
            );
            // dV += Pᵀ · dO
            gemm_strided(
                tk,
                tq,
                dk,
                StridedRef::new(probs, off, 1, tk as isize),
                StridedRef::new(gy, h * dk, d as isize, 1),
                &mut dv,
                h * dk,
                d as isize,
                1.0,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), scaled
            for i in 0..tq {
                let p = &probs[off + i * tk..off + (i + 1) * tk];
                let row = &mut dp[i * tk..(i + 1) * tk];
                let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                for (r, pv) in row.iter_mut().zip(p) {
                    *r = pv * (*r - dot) * scale;
                }
            }
            gemm_strided(
                tq,
                tk,
                dk,
                StridedRef::new(&dp, 0, tk as isize, 1),
                StridedRef::new(ks, h * dk, d as isize, 1),
                &mut dq,
                h * dk,
                d as isize,
                1.0,
            );
            gemm_strided(
                tk,
                tq,
                dk,
                StridedRef::new(&dp, 0, 1, tk as isize),
                StridedRef::new(qs, h * dk, d as isize, 1),
                &mut dkey,
                h * dk,
                d as isize,
                1.0,
            );
        }
        acc(grads, q, &dq, 1.0);
        acc(grads, k, &dkey, 1.0);
        acc(grads, v, &dv, 1.0);
    }
}

fn buf(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    let slot = &mut grads[v.0];
    slot.get_or_insert_with(|| vec![0.0; n])
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], scale: f64) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += scale * x;
            }
        }
        slot @ None => {
            *slot = Some(if scale == 1.0 {
                g.to_vec()
            } else {
                g.iter().map(|x| scale * x).collect()
            });
        }
    }
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a leaf or parameter node; `None` when the
    /// root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds `scale · grad` to the stored gradient of every trainable parameter.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, v) in &self.params {
            let Some(g) = self.wrt(*v) else { continue };
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += scale * src;
            }
        }
    }
}
