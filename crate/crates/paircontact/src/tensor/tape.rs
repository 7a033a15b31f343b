//! Reverse-mode differentiation tape.
//!
//! Nodes live in an arena owned by [`Tape`]; [`Var`] is a copyable handle.
//! Each operation records an [`Op`] holding parent ids plus whatever small
//! payload its backward rule needs. `backward` walks the arena in reverse
//! and accumulates gradients per node.
//!
//! The op set is exactly what the pipeline needs: affine algebra, attention
//! primitives (softmax rows, layer norm, concat/slice), gather/scatter for
//! multi-view lifting, bilinear upsampling and 2x2 transposed convolution
//! for the decoders, and two smooth helpers (`sinc_sqrt`, `versin_sqrt`)
//! for the axis-angle rotation used in pose refinement.

use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    AddN(Vec<usize>),
    AddRow(usize, usize),
    OuterSum(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    ScalarAffine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    RowSums(usize),
    SumAll(usize),
    MeanAll(usize),
    Gelu(usize),
    Sigmoid(usize),
    Exp(usize),
    LnClamped(usize, f64),
    PowConst(usize, f64),
    SqrtEps(usize),
    Clamp(usize, f64, f64),
    MinElem(usize, usize),
    MaxElem(usize, usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    ScatterAddRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    UpsampleBilinear {
        x: usize,
        h_in: usize,
        w_in: usize,
        h_out: usize,
        w_out: usize,
    },
    ConvT2x2 {
        x: usize,
        w: usize,
        b: usize,
        h: usize,
        wgrid: usize,
    },
    CeMeanRows {
        logits: usize,
        labels: Rc<Vec<usize>>,
    },
    SincSqrt(usize),
    VersinSqrt(usize),
    Skew3(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Arena of recorded operations.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `var`; zeros if the node is unreachable.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        match &self.grads[var.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Register a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Register a tensor that only carries data; gradients are still
    /// accumulated but callers simply never read them.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    fn with<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[id].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..nodes.len()).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let mut send = |pid: usize, contrib: Tensor| {
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[pid].value.shape(),
                    "gradient shape mismatch for node {pid}"
                );
                match &mut grads[pid] {
                    Some(acc) => acc.add_in_place(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddN(parents) => {
                    for &p in parents {
                        send(p, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    let (n, m) = g.shape();
                    let mut rg = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            rg.data_mut()[c] += g.get(r, c);
                        }
                    }
                    send(*a, g);
                    send(*row, rg);
                }
                Op::OuterSum(col, row) => {
                    let (n, m) = g.shape();
                    let mut cg = Tensor::zeros(n, 1);
                    let mut rg = Tensor::zeros(1, m);
                    for r in 0..n {
                        for c in 0..m {
                            cg.data_mut()[r] += g.get(r, c);
                            rg.data_mut()[c] += g.get(r, c);
                        }
                    }
                    send(*col, cg);
                    send(*row, rg);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = self.with(*b, |bv| g.zip(bv, |gi, bi| gi * bi));
                    let gb = self.with(*a, |av| g.zip(av, |gi, ai| gi * ai));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Div(a, b) => {
                    let (ga, gb) = self.with(*a, |av| {
                        self.with(*b, |bv| {
                            let ga = g.zip(bv, |gi, bi| gi / bi);
                            let mut gb = Tensor::zeros(g.rows(), g.cols());
                            for i in 0..g.len() {
                                gb.data_mut()[i] =
                                    -g.data()[i] * av.data()[i] / (bv.data()[i] * bv.data()[i]);
                            }
                            (ga, gb)
                        })
                    });
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::ScalarAffine(a, mul) => {
                    send(*a, g.map(|x| x * mul));
                }
                Op::MatMul(a, b) => {
                    let ga = self.with(*b, |bv| g.matmul(&bv.transpose()));
                    let gb = self.with(*a, |av| av.transpose().matmul(&g));
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::ConcatRows(parents) => {
                    let mut r0 = 0;
                    for &p in parents {
                        let pr = self.with(p, |pv| pv.rows());
                        let cols = g.cols();
                        let mut chunk = Tensor::zeros(pr, cols);
                        chunk
                            .data_mut()
                            .copy_from_slice(&g.data()[r0 * cols..(r0 + pr) * cols]);
                        send(p, chunk);
                        r0 += pr;
                    }
                }
                Op::SliceRows(a, r0, r1) => {
                    let (ar, ac) = self.with(*a, |av| av.shape());
                    let mut ga = Tensor::zeros(ar, ac);
                    ga.data_mut()[r0 * ac..r1 * ac].copy_from_slice(g.data());
                    send(*a, ga);
                }
                Op::ConcatCols(parents) => {
                    let mut c0 = 0;
                    for &p in parents {
                        let pc = self.with(p, |pv| pv.cols());
                        let mut chunk = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            for c in 0..pc {
                                chunk.set(r, c, g.get(r, c0 + c));
                            }
                        }
                        send(p, chunk);
                        c0 += pc;
                    }
                }
                Op::SliceCols(a, c0, c1) => {
                    let (ar, ac) = self.with(*a, |av| av.shape());
                    let mut ga = Tensor::zeros(ar, ac);
                    for r in 0..ar {
                        for c in *c0..*c1 {
                            ga.set(r, c, g.get(r, c - c0));
                        }
                    }
                    send(*a, ga);
                }
                Op::RowSums(a) => {
                    let (ar, ac) = self.with(*a, |av| av.shape());
                    let ga = Tensor::from_fn(ar, ac, |r, _| g.get(r, 0));
                    send(*a, ga);
                }
                Op::SumAll(a) => {
                    let (ar, ac) = self.with(*a, |av| av.shape());
                    send(*a, Tensor::full(ar, ac, g.item()));
                }
                Op::MeanAll(a) => {
                    let (ar, ac) = self.with(*a, |av| av.shape());
                    let n = (ar * ac) as f64;
                    send(*a, Tensor::full(ar, ac, g.item() / n));
                }
                Op::Gelu(a) => {
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, x| gi * gelu_grad(x))
                    });
                    send(*a, ga);
                }
                Op::Sigmoid(a) => {
                    // y available as this node's value
                    let ga = g.zip(&node.value, |gi, y| gi * y * (1.0 - y));
                    send(*a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip(&node.value, |gi, y| gi * y);
                    send(*a, ga);
                }
                Op::LnClamped(a, eps) => {
                    let eps = *eps;
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, x| if x > eps { gi / x } else { 0.0 })
                    });
                    send(*a, ga);
                }
                Op::PowConst(a, p) => {
                    let p = *p;
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, x| gi * p * x.powf(p - 1.0))
                    });
                    send(*a, ga);
                }
                Op::SqrtEps(a) => {
                    let ga = g.zip(&node.value, |gi, y| gi * 0.5 / y);
                    send(*a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, x| if x > lo && x < hi { gi } else { 0.0 })
                    });
                    send(*a, ga);
                }
                Op::MinElem(a, b) => {
                    // ties route to the first operand
                    let (ga, gb) = self.with(*a, |av| {
                        self.with(*b, |bv| {
                            let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                                if av.get(r, c) <= bv.get(r, c) {
                                    g.get(r, c)
                                } else {
                                    0.0
                                }
                            });
                            let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                                if av.get(r, c) <= bv.get(r, c) {
                                    0.0
                                } else {
                                    g.get(r, c)
                                }
                            });
                            (ga, gb)
                        })
                    });
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::MaxElem(a, b) => {
                    let (ga, gb) = self.with(*a, |av| {
                        self.with(*b, |bv| {
                            let ga = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                                if av.get(r, c) >= bv.get(r, c) {
                                    g.get(r, c)
                                } else {
                                    0.0
                                }
                            });
                            let gb = Tensor::from_fn(g.rows(), g.cols(), |r, c| {
                                if av.get(r, c) >= bv.get(r, c) {
                                    0.0
                                } else {
                                    g.get(r, c)
                                }
                            });
                            (ga, gb)
                        })
                    });
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::SoftmaxRows(a) => {
                    // dx = (g - sum(g*y per row)) * y
                    let y = &node.value;
                    let mut ga = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for c in 0..y.cols() {
                            dot += g.get(r, c) * y.get(r, c);
                        }
                        for c in 0..y.cols() {
                            ga.set(r, c, (g.get(r, c) - dot) * y.get(r, c));
                        }
                    }
                    send(*a, ga);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (gx, ggamma, gbeta) = self.with(*x, |xv| {
                        self.with(*gamma, |gv| layer_norm_backward(xv, gv, *eps, &g))
                    });
                    send(*x, gx);
                    send(*gamma, ggamma);
                    send(*beta, gbeta);
                }
                Op::GatherRows { x, idx } => {
                    let (xr, xc) = self.with(*x, |xv| xv.shape());
                    let mut gx = Tensor::zeros(xr, xc);
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for c in 0..xc {
                            gx.data_mut()[src_r * xc + c] += g.get(out_r, c);
                        }
                    }
                    send(*x, gx);
                }
                Op::ScatterAddRows { x, idx } => {
                    let xc = self.with(*x, |xv| xv.cols());
                    let mut gx = Tensor::zeros(idx.len(), xc);
                    for (src_r, &dst_r) in idx.iter().enumerate() {
                        for c in 0..xc {
                            gx.set(src_r, c, g.get(dst_r, c));
                        }
                    }
                    send(*x, gx);
                }
                Op::UpsampleBilinear {
                    x,
                    h_in,
                    w_in,
                    h_out,
                    w_out,
                } => {
                    let ch = self.with(*x, |xv| xv.cols());
                    let mut gx = Tensor::zeros(h_in * w_in, ch);
                    bilinear_taps(*h_in, *w_in, *h_out, *w_out, |op, taps| {
                        for &(ip, w) in taps {
                            for c in 0..ch {
                                gx.data_mut()[ip * ch + c] += w * g.get(op, c);
                            }
                        }
                    });
                    send(*x, gx);
                }
                Op::ConvT2x2 { x, w, b, h, wgrid } => {
                    let (gx, gw, gb) = self.with(*x, |xv| {
                        self.with(*w, |wv| convt2x2_backward(xv, wv, *h, *wgrid, &g))
                    });
                    send(*x, gx);
                    send(*w, gw);
                    send(*b, gb);
                }
                Op::CeMeanRows { logits, labels } => {
                    let gl = self.with(*logits, |lv| {
                        let n = lv.rows() as f64;
                        let mut gl = Tensor::zeros(lv.rows(), lv.cols());
                        for r in 0..lv.rows() {
                            let row = lv.row(r);
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                            for c in 0..lv.cols() {
                                let p = (row[c] - mx).exp() / z;
                                let y = if labels[r] == c { 1.0 } else { 0.0 };
                                gl.set(r, c, g.item() * (p - y) / n);
                            }
                        }
                        gl
                    });
                    send(*logits, gl);
                }
                Op::SincSqrt(a) => {
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, u| gi * sinc_sqrt_grad(u))
                    });
                    send(*a, ga);
                }
                Op::VersinSqrt(a) => {
                    let ga = self.with(*a, |av| {
                        g.zip(av, |gi, u| gi * versin_sqrt_grad(u))
                    });
                    send(*a, ga);
                }
                Op::Skew3(a) => {
                    let gx = g.get(2, 1) - g.get(1, 2);
                    let gy = g.get(0, 2) - g.get(2, 0);
                    let gz = g.get(1, 0) - g.get(0, 1);
                    send(*a, Tensor::from_vec(1, 3, vec![gx, gy, gz]));
                }
            }
        }
        Grads {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| if matches!(nodes[i].op, Op::Leaf) { g } else { None })
                .collect(),
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.with(self.id, |t| t.clone())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.with(self.id, |t| t.shape())
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    pub fn item(&self) -> f64 {
        self.tape.with(self.id, |t| t.item())
    }

    fn binary(self, other: Var<'t>, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = self
            .tape
            .with(self.id, |a| self.tape.with(other.id, |b| f(a, b)));
        self.tape.push(v, op)
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = self.tape.with(self.id, f);
        self.tape.push(v, op)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.zip(b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn add_n(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty(), "add_n of empty list");
        let mut v = vars[0].value();
        for w in &vars[1..] {
            tape.with(w.id, |t| v.add_in_place(t));
        }
        tape.push(v, Op::AddN(vars.iter().map(|v| v.id).collect()))
    }

    /// Broadcast-add a 1xM row to every row of an NxM matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                assert_eq!(a.cols(), r.cols(), "add_row width mismatch");
                assert_eq!(r.rows(), 1, "add_row expects a 1xM row");
                Tensor::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + r.get(0, j))
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// `out[i][j] = col[i] + row[j]` for an Nx1 column and a 1xM row.
    pub fn outer_sum(self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |col, r| {
                assert_eq!(col.cols(), 1, "outer_sum expects Nx1 column");
                assert_eq!(r.rows(), 1, "outer_sum expects 1xM row");
                Tensor::from_fn(col.rows(), r.cols(), |i, j| col.get(i, 0) + r.get(0, j))
            },
            Op::OuterSum(self.id, row.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.zip(b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.zip(b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.zip(b, |x, y| x / y), Op::Div(self.id, other.id))
    }

    /// `mul * x + add`, elementwise with scalar coefficients.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        self.unary(
            |a| a.map(|x| mul * x + add),
            Op::ScalarAffine(self.id, mul),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(|a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn concat_rows(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty(), "concat_rows of empty list");
        let cols = vars[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in vars {
            tape.with(v.id, |t| {
                assert_eq!(t.cols(), cols, "concat_rows width mismatch");
                rows += t.rows();
                data.extend_from_slice(t.data());
            });
        }
        tape.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(vars.iter().map(|v| v.id).collect()),
        )
    }

    pub fn slice_rows(self, r0: usize, r1: usize) -> Var<'t> {
        self.unary(
            |a| {
                assert!(r0 <= r1 && r1 <= a.rows(), "slice_rows out of range");
                let mut out = Tensor::zeros(r1 - r0, a.cols());
                out.data_mut()
                    .copy_from_slice(&a.data()[r0 * a.cols()..r1 * a.cols()]);
                out
            },
            Op::SliceRows(self.id, r0, r1),
        )
    }

    pub fn concat_cols(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty(), "concat_cols of empty list");
        let rows = vars[0].rows();
        let widths: Vec<usize> = vars.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, total);
        let mut c0 = 0;
        for (v, w) in vars.iter().zip(&widths) {
            tape.with(v.id, |t| {
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                for r in 0..rows {
                    for c in 0..*w {
                        out.set(r, c0 + c, t.get(r, c));
                    }
                }
            });
            c0 += w;
        }
        tape.push(out, Op::ConcatCols(vars.iter().map(|v| v.id).collect()))
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Var<'t> {
        self.unary(
            |a| {
                assert!(c0 <= c1 && c1 <= a.cols(), "slice_cols out of range");
                Tensor::from_fn(a.rows(), c1 - c0, |r, c| a.get(r, c0 + c))
            },
            Op::SliceCols(self.id, c0, c1),
        )
    }

    pub fn row_sums(self) -> Var<'t> {
        self.unary(
            |a| Tensor::from_fn(a.rows(), 1, |r, _| a.row(r).iter().sum()),
            Op::RowSums(self.id),
        )
    }

    pub fn sum_all(self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.sum()), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        self.unary(
            |a| {
                assert!(!a.is_empty(), "mean_all of empty tensor");
                Tensor::scalar(a.sum() / a.len() as f64)
            },
            Op::MeanAll(self.id),
        )
    }

    pub fn gelu(self) -> Var<'t> {
        self.unary(|a| a.map(gelu), Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|a| a.map(f64::exp), Op::Exp(self.id))
    }

    /// `ln(max(x, eps))`; gradient is zero where the clamp is active.
    pub fn ln_clamped(self, eps: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| x.max(eps).ln()), Op::LnClamped(self.id, eps))
    }

    /// `x^p` for non-negative inputs.
    pub fn pow_const(self, p: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| x.powf(p)), Op::PowConst(self.id, p))
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(self, eps: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| (x + eps).sqrt()), Op::SqrtEps(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(|a| a.map(|x| x.clamp(lo, hi)), Op::Clamp(self.id, lo, hi))
    }

    pub fn min_elem(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a.zip(b, f64::min),
            Op::MinElem(self.id, other.id),
        )
    }

    pub fn max_elem(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a.zip(b, f64::max),
            Op::MaxElem(self.id, other.id),
        )
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(
            |a| {
                let mut out = Tensor::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    let row = a.row(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for c in 0..a.cols() {
                        let e = (row[c] - mx).exp();
                        out.set(r, c, e);
                        z += e;
                    }
                    for c in 0..a.cols() {
                        out.set(r, c, out.get(r, c) / z);
                    }
                }
                out
            },
            Op::SoftmaxRows(self.id),
        )
    }

    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let v = self.tape.with(self.id, |x| {
            self.tape.with(gamma.id, |gm| {
                self.tape.with(beta.id, |bt| {
                    assert_eq!(gm.rows(), 1);
                    assert_eq!(bt.rows(), 1);
                    assert_eq!(gm.cols(), x.cols());
                    let mut out = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let n = row.len() as f64;
                        let mu = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        for c in 0..x.cols() {
                            out.set(r, c, (row[c] - mu) * inv * gm.get(0, c) + bt.get(0, c));
                        }
                    }
                    out
                })
            })
        });
        self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let idx = Rc::new(idx.to_vec());
        let v = self.tape.with(self.id, |a| {
            let mut out = Tensor::zeros(idx.len(), a.cols());
            for (r, &src) in idx.iter().enumerate() {
                for c in 0..a.cols() {
                    out.set(r, c, a.get(src, c));
                }
            }
            out
        });
        self.tape.push(v, Op::GatherRows { x: self.id, idx })
    }

    /// Scatter rows of self into an `n_rows` tensor, adding on collisions.
    pub fn scatter_add_rows(self, idx: &[usize], n_rows: usize) -> Var<'t> {
        let idx = Rc::new(idx.to_vec());
        let v = self.tape.with(self.id, |a| {
            assert_eq!(a.rows(), idx.len(), "scatter index count mismatch");
            let mut out = Tensor::zeros(n_rows, a.cols());
            for (r, &dst) in idx.iter().enumerate() {
                for c in 0..a.cols() {
                    out.data_mut()[dst * a.cols() + c] += a.get(r, c);
                }
            }
            out
        });
        self.tape.push(
            v,
            Op::ScatterAddRows { x: self.id, idx },
        )
    }

    /// Bilinear upsampling of an `h_in x w_in` grid stored as rows
    /// (`h_in*w_in` x C) to `h_out x w_out`.
    pub fn upsample_bilinear(self, h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Var<'t> {
        let v = self.tape.with(self.id, |a| {
            assert_eq!(a.rows(), h_in * w_in, "upsample input grid mismatch");
            let ch = a.cols();
            let mut out = Tensor::zeros(h_out * w_out, ch);
            bilinear_taps(h_in, w_in, h_out, w_out, |op, taps| {
                for &(ip, w) in taps {
                    for c in 0..ch {
                        out.data_mut()[op * ch + c] += w * a.get(ip, c);
                    }
                }
            });
            out
        });
        self.tape.push(
            v,
            Op::UpsampleBilinear {
                x: self.id,
                h_in,
                w_in,
                h_out,
                w_out,
            },
        )
    }

    /// 2x2 stride-2 transposed convolution over an `h x w` grid.
    ///
    /// `self` is (h*w) x Cin, `weight` is Cin x (4*Cout) with one Cin x Cout
    /// block per output sub-position, `bias` is 1 x Cout shared across
    /// sub-positions. Output is (2h*2w) x Cout.
    pub fn conv_t2x2(self, weight: Var<'t>, bias: Var<'t>, h: usize, w: usize) -> Var<'t> {
        let v = self.tape.with(self.id, |x| {
            self.tape.with(weight.id, |wt| {
                self.tape.with(bias.id, |b| {
                    assert_eq!(x.rows(), h * w, "conv_t2x2 grid mismatch");
                    assert_eq!(wt.cols() % 4, 0);
                    let cout = wt.cols() / 4;
                    assert_eq!(b.cols(), cout);
                    let mut out = Tensor::zeros(4 * h * w, cout);
                    for k in 0..4 {
                        let (di, dj) = (k / 2, k % 2);
                        let wk = Tensor::from_fn(x.cols(), cout, |r, c| wt.get(r, k * cout + c));
                        let yk = x.matmul(&wk);
                        for i in 0..h {
                            for j in 0..w {
                                let dst = (2 * i + di) * 2 * w + (2 * j + dj);
                                for c in 0..cout {
                                    out.set(dst, c, yk.get(i * w + j, c) + b.get(0, c));
                                }
                            }
                        }
                    }
                    out
                })
            })
        });
        self.tape.push(
            v,
            Op::ConvT2x2 {
                x: self.id,
                w: weight.id,
                b: bias.id,
                h,
                wgrid: w,
            },
        )
    }

    /// Mean multi-class cross-entropy over rows of logits.
    pub fn ce_mean_rows(self, labels: &[usize]) -> Var<'t> {
        let labels = Rc::new(labels.to_vec());
        let v = self.tape.with(self.id, |lv| {
            assert_eq!(lv.rows(), labels.len(), "label count mismatch");
            assert!(lv.rows() > 0, "ce over empty rows");
            let mut total = 0.0;
            for r in 0..lv.rows() {
                let row = lv.row(r);
                assert!(labels[r] < lv.cols(), "label out of range");
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                total += z.ln() + mx - row[labels[r]];
            }
            Tensor::scalar(total / lv.rows() as f64)
        });
        self.tape.push(
            v,
            Op::CeMeanRows {
                logits: self.id,
                labels,
            },
        )
    }

    /// `sin(sqrt(u))/sqrt(u)` as a smooth function of `u = theta^2`.
    pub fn sinc_sqrt(self) -> Var<'t> {
        self.unary(|a| a.map(sinc_sqrt), Op::SincSqrt(self.id))
    }

    /// `(1 - cos(sqrt(u)))/u` as a smooth function of `u = theta^2`.
    pub fn versin_sqrt(self) -> Var<'t> {
        self.unary(|a| a.map(versin_sqrt), Op::VersinSqrt(self.id))
    }

    /// Skew-symmetric 3x3 matrix of a 1x3 vector.
    pub fn skew3(self) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.shape(), (1, 3), "skew3 expects a 1x3 vector");
                let (x, y, z) = (a.get(0, 0), a.get(0, 1), a.get(0, 2));
                Tensor::from_vec(3, 3, vec![0.0, -z, y, z, 0.0, -x, -y, x, 0.0])
            },
            Op::Skew3(self.id),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

// sin(theta)/theta and (1-cos(theta))/theta^2 as functions of u = theta^2,
// with Taylor branches below u = 1e-2 where the direct formulas cancel.

pub(crate) fn sinc_sqrt(u: f64) -> f64 {
    if u < 1e-2 {
        1.0 - u / 6.0 + u * u / 120.0 - u * u * u / 5040.0
    } else {
        let t = u.sqrt();
        t.sin() / t
    }
}

fn sinc_sqrt_grad(u: f64) -> f64 {
    if u < 1e-2 {
        -1.0 / 6.0 + u / 60.0 - u * u / 1680.0
    } else {
        let t = u.sqrt();
        (t * t.cos() - t.sin()) / (2.0 * t * t * t)
    }
}

pub(crate) fn versin_sqrt(u: f64) -> f64 {
    if u < 1e-2 {
        0.5 - u / 24.0 + u * u / 720.0 - u * u * u / 40320.0
    } else {
        let t = u.sqrt();
        (1.0 - t.cos()) / u
    }
}

fn versin_sqrt_grad(u: f64) -> f64 {
    if u < 1e-2 {
        -1.0 / 24.0 + u / 360.0 - u * u / 13440.0
    } else {
        let t = u.sqrt();
        (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * u * u)
    }
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n_rows, n_cols) = x.shape();
    let n = n_cols as f64;
    let mut gx = Tensor::zeros(n_rows, n_cols);
    let mut ggamma = Tensor::zeros(1, n_cols);
    let mut gbeta = Tensor::zeros(1, n_cols);
    for r in 0..n_rows {
        let row = x.row(r);
        let mu = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
        let gy: Vec<f64> = (0..n_cols).map(|c| g.get(r, c) * gamma.get(0, c)).collect();
        let mean_gy = gy.iter().sum::<f64>() / n;
        let mean_gy_xhat = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for c in 0..n_cols {
            gx.set(r, c, (gy[c] - mean_gy - xhat[c] * mean_gy_xhat) * inv);
            ggamma.data_mut()[c] += g.get(r, c) * xhat[c];
            gbeta.data_mut()[c] += g.get(r, c);
        }
    }
    (gx, ggamma, gbeta)
}

/// Visit every output pixel of a bilinear upsample with its (input, weight)
/// taps. Half-pixel-center convention, clamped at borders.
fn bilinear_taps(
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    mut visit: impl FnMut(usize, &[(usize, f64)]),
) {
    let sy = h_in as f64 / h_out as f64;
    let sx = w_in as f64 / w_out as f64;
    for oy in 0..h_out {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h_in - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let wy = fy - y0 as f64;
        for ox in 0..w_out {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w_in - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let wx = fx - x0 as f64;
            let taps = [
                (y0 * w_in + x0, (1.0 - wy) * (1.0 - wx)),
                (y0 * w_in + x1, (1.0 - wy) * wx),
                (y1 * w_in + x0, wy * (1.0 - wx)),
                (y1 * w_in + x1, wy * wx),
            ];
            visit(oy * w_out + ox, &taps);
        }
    }
}

fn convt2x2_backward(
    x: &Tensor,
    wt: &Tensor,
    h: usize,
    w: usize,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let cin = x.cols();
    let cout = wt.cols() / 4;
    let mut gx = Tensor::zeros(h * w, cin);
    let mut gw = Tensor::zeros(cin, 4 * cout);
    let mut gb = Tensor::zeros(1, cout);
    for k in 0..4 {
        let (di, dj) = (k / 2, k % 2);
        // de-interleave the k-th output sub-grid
        let mut gk = Tensor::zeros(h * w, cout);
        for i in 0..h {
            for j in 0..w {
                let src = (2 * i + di) * 2 * w + (2 * j + dj);
                for c in 0..cout {
                    gk.set(i * w + j, c, g.get(src, c));
                    gb.data_mut()[c] += g.get(src, c);
                }
            }
        }
        let wk = Tensor::from_fn(cin, cout, |r, c| wt.get(r, k * cout + c));
        let gxk = gk.matmul(&wk.transpose());
        gx.add_in_place(&gxk);
        let gwk = x.transpose().matmul(&gk);
        for r in 0..cin {
            for c in 0..cout {
                gw.data_mut()[r * 4 * cout + k * cout + c] = gwk.get(r, c);
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against analytic gradients for a scalar
    /// function of several tensor inputs.
    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&Tape, &[Var<'_>]) -> f64 + Copy,
        grads_of: impl Fn(&Tape, &[Var<'_>]) -> (Vec<Tensor>, f64),
        tol: f64,
    ) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let (analytic, _) = grads_of(&tape, &vars);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            for e in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= h;
                let tp = Tape::new();
                let vp: Vec<Var> = plus.iter().map(|t| tp.leaf(t.clone())).collect();
                let fp = build(&tp, &vp);
                let tm = Tape::new();
                let vm: Vec<Var> = minus.iter().map(|t| tm.leaf(t.clone())).collect();
                let fm = build(&tm, &vm);
                let fd = (fp - fm) / (2.0 * h);
                let an = analytic[i].data()[e];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < tol,
                    "input {i} elem {e}: fd={fd} analytic={an}"
                );
            }
        }
    }

    fn check(inputs: &[Tensor], build: impl for<'a> Fn(&'a Tape, &[Var<'a>]) -> Var<'a> + Copy) {
        fd_check(
            inputs,
            |t, v| build(t, v).item(),
            |t, v| {
                let loss = build(t, v);
                let val = loss.item();
                let g = t.backward(loss);
                (v.iter().map(|x| g.get(*x)).collect(), val)
            },
            1e-5,
        );
    }

    fn rnd(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(rows, cols, 0.7, &mut rng)
    }

    #[test]
    fn grad_matmul_chain() {
        let a = rnd(3, 4, 1);
        let b = rnd(4, 2, 2);
        check(&[a, b], |_, v| v[0].matmul(v[1]).gelu().sum_all());
    }

    #[test]
    fn grad_elementwise_ops() {
        let a = rnd(2, 3, 3);
        let b = rnd(2, 3, 4);
        check(&[a.clone(), b.clone()], |_, v| {
            v[0].mul(v[1]).add(v[0].sub(v[1])).mean_all()
        });
        check(&[a.clone()], |_, v| v[0].sigmoid().sum_all());
        check(&[a.clone()], |_, v| v[0].exp().mean_all());
        check(&[a.clone()], |_, v| v[0].affine(2.5, -1.0).sum_all());
        // strictly positive inputs for ln/pow/sqrt
        let p = a.map(|x| x.abs() + 0.5);
        check(&[p.clone()], |_, v| v[0].ln_clamped(1e-12).sum_all());
        check(&[p.clone()], |_, v| v[0].pow_const(2.0).sum_all());
        check(&[p.clone()], |_, v| v[0].sqrt_eps(1e-12).sum_all());
        check(&[p], |_, v| v[0].row_sums().pow_const(2.0).sum_all());
    }

    #[test]
    fn grad_div() {
        let a = rnd(2, 2, 5);
        let b = rnd(2, 2, 6).map(|x| x.abs() + 1.0);
        check(&[a, b], |_, v| v[0].div(v[1]).sum_all());
    }

    #[test]
    fn grad_broadcasts() {
        let a = rnd(3, 4, 7);
        let row = rnd(1, 4, 8);
        check(&[a, row], |_, v| v[0].add_row(v[1]).gelu().sum_all());
        let col = rnd(3, 1, 9);
        let row2 = rnd(1, 5, 10);
        check(&[col, row2], |_, v| {
            v[0].outer_sum(v[1]).pow_const(2.0).sum_all()
        });
    }

    #[test]
    fn grad_softmax_layernorm() {
        let a = rnd(3, 5, 11);
        let w = rnd(5, 1, 12);
        check(&[a.clone(), w.clone()], |_, v| {
            v[0].softmax_rows().matmul(v[1]).sum_all()
        });
        let gamma = rnd(1, 5, 13).map(|x| x + 1.5);
        let beta = rnd(1, 5, 14);
        check(&[a, gamma, beta, w], |_, v| {
            v[0].layer_norm(v[1], v[2], 1e-5).matmul(v[3]).sum_all()
        });
    }

    #[test]
    fn grad_concat_slice() {
        let a = rnd(2, 3, 15);
        let b = rnd(1, 3, 16);
        check(&[a.clone(), b.clone()], |t, v| {
            Var::concat_rows(t, &[v[0], v[1]])
                .slice_rows(1, 3)
                .gelu()
                .sum_all()
        });
        let c = rnd(2, 2, 17);
        check(&[a, c], |t, v| {
            Var::concat_cols(t, &[v[0], v[1]])
                .slice_cols(2, 5)
                .pow_const(2.0)
                .sum_all()
        });
    }

    #[test]
    fn grad_transpose_minmax_clamp() {
        let a = rnd(2, 3, 18);
        let b = rnd(2, 3, 19);
        check(&[a.clone(), b.clone()], |_, v| {
            v[0].min_elem(v[1]).add(v[0].max_elem(v[1])).sum_all()
        });
        check(&[a.clone()], |_, v| v[0].transpose().gelu().sum_all());
        // keep away from clamp kinks
        let inside = a.map(|x| x.clamp(-0.8, 0.8) * 0.5);
        check(&[inside], |_, v| v[0].clamp(-1.0, 1.0).sum_all());
    }

    #[test]
    fn grad_gather_scatter() {
        let a = rnd(5, 2, 20);
        check(&[a.clone()], |_, v| {
            v[0].gather_rows(&[0, 2, 2, 4]).pow_const(2.0).sum_all()
        });
        let b = rnd(4, 2, 21);
        check(&[b], |_, v| {
            v[0].scatter_add_rows(&[1, 0, 1, 3], 5)
                .pow_const(2.0)
                .sum_all()
        });
    }

    #[test]
    fn grad_upsample() {
        let a = rnd(4, 1, 22); // 2x2 grid, 1 channel
        check(&[a], |_, v| {
            v[0].upsample_bilinear(2, 2, 4, 4).pow_const(2.0).sum_all()
        });
    }

    #[test]
    fn grad_convt2x2() {
        let x = rnd(4, 3, 23); // 2x2 grid, 3 channels
        let w = rnd(3, 8, 24); // 4 blocks x 2 out channels
        let b = rnd(1, 2, 25);
        check(&[x, w, b], |_, v| {
            v[0].conv_t2x2(v[1], v[2], 2, 2).gelu().sum_all()
        });
    }

    #[test]
    fn grad_ce() {
        let logits = rnd(5, 3, 26);
        check(&[logits], |_, v| v[0].ce_mean_rows(&[0, 2, 1, 1, 0]));
    }

    #[test]
    fn grad_rotation_helpers() {
        let u = Tensor::from_vec(1, 3, vec![0.3, 0.9, 2.5]);
        check(&[u.clone()], |_, v| v[0].sinc_sqrt().sum_all());
        check(&[u], |_, v| v[0].versin_sqrt().sum_all());
        // Taylor branch
        let tiny = Tensor::from_vec(1, 2, vec![1e-5, 4e-3]);
        check(&[tiny.clone()], |_, v| v[0].sinc_sqrt().sum_all());
        check(&[tiny], |_, v| v[0].versin_sqrt().sum_all());
        let w = rnd(1, 3, 27);
        let m = rnd(3, 3, 28);
        check(&[w, m], |_, v| v[0].skew3().mul(v[1]).sum_all());
    }

    #[test]
    fn taylor_branches_are_continuous() {
        for f in [sinc_sqrt, versin_sqrt, sinc_sqrt_grad, versin_sqrt_grad] {
            let below = f(1e-2 - 1e-9);
            let above = f(1e-2 + 1e-9);
            assert!((below - above).abs() < 1e-9, "{below} vs {above}");
        }
    }

    #[test]
    fn upsample_identity_when_same_size() {
        let tape = Tape::new();
        let x = tape.leaf(rnd(6, 2, 29));
        let y = x.upsample_bilinear(2, 3, 2, 3);
        assert_eq!(x.value(), y.value());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(rnd(4, 7, 30));
        let s = x.softmax_rows().value();
        for r in 0..4 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
