//! Reverse-mode automatic differentiation over `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//!
//! Gradients are first order only. Quantities that are themselves gradients
//! (the per-sample loss gradient used as a representation element) are built
//! in closed form as ordinary graph expressions, so their own derivatives come
//! out of the same backward pass.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

/// Views a tensor as a matrix. Panics if it is not 2-D.
pub fn as_matrix(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

pub fn from_matrix(m: Array2<f64>) -> Tensor {
    m.into_dyn()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `a · bᵀ`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MulScalarVar(usize, usize),
    Relu(usize),
    Exp(usize),
    Softplus(usize),
    Log1mExp(usize, f64),
    SumAll(usize),
    SumRows(usize),
    RowDot(usize, usize),
    L2NormalizeRows(usize, f64),
    LogSoftmaxRows(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    PickPerRow(usize, Rc<Vec<usize>>),
    SelectRows(usize, Rc<Vec<usize>>),
    GatherSub {
        a: usize,
        ia: Rc<Vec<usize>>,
        b: usize,
        ib: Rc<Vec<usize>>,
    },
    GroupedDot {
        u: usize,
        v: usize,
        group: Rc<Vec<usize>>,
        width: usize,
    },
    Conv2d(usize, usize, ConvGeometry),
    AddChannelBias(usize, usize),
    GlobalAvgPool(usize),
    MaxPool2(usize, Rc<Vec<usize>>),
    Reshape(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_matrix(&self, value: Array2<f64>) -> Var<'_> {
        self.constant(value.into_dyn())
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn unary(&self, x: usize, value: Tensor, op: Op) -> Var<'_> {
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let ng = self.needs(a) || self.needs(b);
        self.push(value, op, ng)
    }
}

/// Gradients produced by [`Var::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

fn log_softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// `ln(max(1 - e^x, eps))` for `x <= 0`, and whether the clamp engaged.
pub fn log1m_exp(x: f64, eps: f64) -> (f64, bool) {
    let one_minus = -x.exp_m1();
    if one_minus > eps {
        (one_minus.ln(), false)
    } else {
        (eps.ln(), true)
    }
}

fn im2col(
    img: ndarray::ArrayView3<f64>,
    k: usize,
    geo: ConvGeometry,
    out_h: usize,
    out_w: usize,
) -> Array2<f64> {
    let (c, h, w) = img.dim();
    let mut cols = Array2::zeros((c * k * k, out_h * out_w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * out_w + ox] = img[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<f64>,
    mut img: ndarray::ArrayViewMut3<f64>,
    k: usize,
    geo: ConvGeometry,
    out_h: usize,
    out_w: usize,
) {
    let (c, h, w) = img.dim();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                for oy in 0..out_h {
                    let iy = (oy * geo.stride + ky) as isize - geo.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * geo.stride + kx) as isize - geo.padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[ci, iy as usize, ix as usize]] += src[oy * out_w + ox];
                    }
                }
            }
        }
    }
}

fn conv_out(size: usize, k: usize, geo: ConvGeometry) -> usize {
    (size + 2 * geo.padding - k) / geo.stride + 1
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on tensor of shape {:?}", v.shape());
        v.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn matrix(&self) -> Array2<f64> {
        as_matrix(&self.value()).to_owned()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = as_matrix(&a).dot(&as_matrix(&b));
        self.tape
            .binary(self.id, other.id, out.into_dyn(), Op::MatMul(self.id, other.id))
    }

    /// `self · otherᵀ`; the natural form of a linear layer with weight `[out, in]`.
    pub fn matmul_t(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = as_matrix(&a).dot(&as_matrix(&b).t());
        self.tape
            .binary(self.id, other.id, out.into_dyn(), Op::MatMulT(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let out = &*self.value() + &*other.value();
        self.tape
            .binary(self.id, other.id, out, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let out = &*self.value() - &*other.value();
        self.tape
            .binary(self.id, other.id, out, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let out = &*self.value() * &*other.value();
        self.tape
            .binary(self.id, other.id, out, Op::Mul(self.id, other.id))
    }

    /// `[n, d] + [d]`
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let a = self.value();
        let r = row.value();
        let r1 = r
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("row bias must be 1-D");
        let out = &as_matrix(&a) + &r1;
        self.tape
            .binary(self.id, row.id, out.into_dyn(), Op::AddRow(self.id, row.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let out = self.value().mapv(|v| v * c);
        self.tape.unary(self.id, out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let out = self.value().mapv(|v| v + c);
        self.tape.unary(self.id, out, Op::AddScalar(self.id))
    }

    /// Multiplies every entry by a one-element variable.
    pub fn mul_scalar_var(&self, s: Var<'t>) -> Var<'t> {
        let c = s.scalar();
        let out = self.value().mapv(|v| v * c);
        self.tape
            .binary(self.id, s.id, out, Op::MulScalarVar(self.id, s.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().mapv(|v| v.max(0.0));
        self.tape.unary(self.id, out, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().mapv(f64::exp);
        self.tape.unary(self.id, out, Op::Exp(self.id))
    }

    /// `ln(1 + e^x)`
    pub fn softplus(&self) -> Var<'t> {
        let out = self.value().mapv(softplus);
        self.tape.unary(self.id, out, Op::Softplus(self.id))
    }

    /// `ln(max(1 - e^x, eps))`; the clamped region has zero gradient.
    pub fn log1m_exp(&self, eps: f64) -> Var<'t> {
        let out = self.value().mapv(|v| log1m_exp(v, eps).0);
        self.tape.unary(self.id, out, Op::Log1mExp(self.id, eps))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value().sum());
        self.tape.unary(self.id, out, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[n, d] -> [n]`
    pub fn sum_rows(&self) -> Var<'t> {
        let out = as_matrix(&self.value()).sum_axis(Axis(1));
        self.tape.unary(self.id, out.into_dyn(), Op::SumRows(self.id))
    }

    /// Row-wise inner products of two `[n, d]` matrices.
    pub fn row_dot(&self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let out = (&as_matrix(&a) * &as_matrix(&b)).sum_axis(Axis(1));
        self.tape
            .binary(self.id, other.id, out.into_dyn(), Op::RowDot(self.id, other.id))
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn l2_normalize_rows(&self, floor: f64) -> Var<'t> {
        let x = self.value();
        let m = as_matrix(&x);
        let mut out = m.to_owned();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(floor);
            row.mapv_inplace(|v| v / n);
        }
        self.tape
            .unary(self.id, out.into_dyn(), Op::L2NormalizeRows(self.id, floor))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let out = log_softmax_rows(as_matrix(&self.value()));
        self.tape
            .unary(self.id, out.into_dyn(), Op::LogSoftmaxRows(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let out = log_softmax_rows(as_matrix(&self.value())).mapv(f64::exp);
        self.tape.unary(self.id, out.into_dyn(), Op::SoftmaxRows(self.id))
    }

    /// `[n, d] -> [n]`, stable log-sum-exp per row.
    pub fn logsumexp_rows(&self) -> Var<'t> {
        let x = self.value();
        let m = as_matrix(&x);
        let out: Array1<f64> = m
            .rows()
            .into_iter()
            .map(|row| {
                let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        self.tape
            .unary(self.id, out.into_dyn(), Op::LogSumExpRows(self.id))
    }

    /// `out[r] = self[r, idx[r]]`
    pub fn pick_per_row(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let m = as_matrix(&x);
        assert_eq!(m.nrows(), idx.len());
        let out: Array1<f64> = idx.iter().enumerate().map(|(r, &c)| m[[r, c]]).collect();
        self.tape.unary(
            self.id,
            out.into_dyn(),
            Op::PickPerRow(self.id, Rc::new(idx.to_vec())),
        )
    }

    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = as_matrix(&x).select(Axis(0), idx);
        self.tape.unary(
            self.id,
            out.into_dyn(),
            Op::SelectRows(self.id, Rc::new(idx.to_vec())),
        )
    }

    /// `out[m] = self[ia[m]] - other[ib[m]]`
    pub fn gather_sub(&self, ia: &[usize], other: Var<'t>, ib: &[usize]) -> Var<'t> {
        assert_eq!(ia.len(), ib.len());
        let a = self.value();
        let b = other.value();
        let am = as_matrix(&a);
        let bm = as_matrix(&b);
        assert_eq!(am.ncols(), bm.ncols());
        let mut out = Array2::zeros((ia.len(), am.ncols()));
        for (m, mut row) in out.rows_mut().into_iter().enumerate() {
            Zip::from(&mut row)
                .and(am.row(ia[m]))
                .and(bm.row(ib[m]))
                .for_each(|o, &x, &y| *o = x - y);
        }
        self.tape.binary(
            self.id,
            other.id,
            out.into_dyn(),
            Op::GatherSub {
                a: self.id,
                ia: Rc::new(ia.to_vec()),
                b: other.id,
                ib: Rc::new(ib.to_vec()),
            },
        )
    }

    /// For `self = u [M, P]` and `v [G·width, P]`, returns `[M, width]` with
    /// `out[m, k] = u[m] · v[group[m]·width + k]`.
    pub fn grouped_dot(&self, v: Var<'t>, group: &[usize], width: usize) -> Var<'t> {
        let uv = self.value();
        let vv = v.value();
        let um = as_matrix(&uv);
        let vm = as_matrix(&vv);
        assert_eq!(um.nrows(), group.len());
        let mut out = Array2::zeros((group.len(), width));
        for (m, &g) in group.iter().enumerate() {
            let block = vm.slice(s![g * width..(g + 1) * width, ..]);
            out.row_mut(m).assign(&block.dot(&um.row(m)));
        }
        self.tape.binary(
            self.id,
            v.id,
            out.into_dyn(),
            Op::GroupedDot {
                u: self.id,
                v: v.id,
                group: Rc::new(group.to_vec()),
                width,
            },
        )
    }

    /// `x [N, C, H, W]` convolved with `w [O, C, k, k]`.
    pub fn conv2d(&self, w: Var<'t>, geo: ConvGeometry) -> Var<'t> {
        let x = self.value();
        let wv = w.value();
        let (n, c, h, wd) = dims4(&x);
        let (o, wc, k, k2) = dims4(&wv);
        assert_eq!(c, wc, "conv input channels");
        assert_eq!(k, k2, "square kernels only");
        let (oh, ow) = (conv_out(h, k, geo), conv_out(wd, k, geo));
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let wmat = wv.view().into_shape_with_order((o, c * k * k)).unwrap();
        let wmat = wmat.into_dimensionality::<Ix2>().unwrap();
        let mut out = ndarray::Array4::zeros((n, o, oh, ow));
        for i in 0..n {
            let cols = im2col(x4.index_axis(Axis(0), i), k, geo, oh, ow);
            let y = wmat.dot(&cols);
            out.index_axis_mut(Axis(0), i)
                .assign(&y.into_shape_with_order((o, oh, ow)).unwrap());
        }
        self.tape
            .binary(self.id, w.id, out.into_dyn(), Op::Conv2d(self.id, w.id, geo))
    }

    /// `[N, C, H, W] + [C]`
    pub fn add_channel_bias(&self, b: Var<'t>) -> Var<'t> {
        let x = self.value();
        let bv = b.value();
        let mut out = (*x).clone();
        for (ci, mut plane) in out.axis_iter_mut(Axis(1)).enumerate() {
            let bias = bv[[ci]];
            plane.mapv_inplace(|v| v + bias);
        }
        self.tape
            .binary(self.id, b.id, out, Op::AddChannelBias(self.id, b.id))
    }

    /// `[N, C, H, W] -> [N, C]`
    pub fn global_avg_pool(&self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let flat = x.view().into_shape_with_order((n, c, h * w)).unwrap();
        let out = flat.mean_axis(Axis(2)).unwrap();
        self.tape
            .unary(self.id, out.into_dyn(), Op::GlobalAvgPool(self.id))
    }

    /// 2×2 max pooling with stride 2.
    pub fn max_pool2(&self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = dims4(&x);
        let (oh, ow) = (h / 2, w / 2);
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array4::zeros((n, c, oh, ow));
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for i in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                                let v = x4[[i, ci, iy, ix]];
                                if v > best {
                                    best = v;
                                    best_at = ((i * c + ci) * h + iy) * w + ix;
                                }
                            }
                        }
                        out[[i, ci, y, xx]] = best;
                        arg.push(best_at);
                    }
                }
            }
        }
        self.tape
            .unary(self.id, out.into_dyn(), Op::MaxPool2(self.id, Rc::new(arg)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let out = x
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.tape.unary(self.id, out, Op::Reshape(self.id))
    }

    /// Gradient of this scalar with respect to every node that needs one.
    pub fn backward(&self) -> Gradients {
        let nodes = self.tape.nodes.borrow();
        assert_eq!(nodes[self.id].value.len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.id + 1];
        grads[self.id] = Some(ArrayD::from_elem(nodes[self.id].value.raw_dim(), 1.0));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let ng = |p: usize| nodes[p].needs_grad;
            let val = |p: usize| Rc::clone(&nodes[p].value);
            macro_rules! send {
                ($p:expr, $t:expr) => {{
                    let p = $p;
                    if ng(p) {
                        let t = $t;
                        accumulate(&mut grads[p], t);
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let gm = as_matrix(&g);
                    send!(*a, gm.dot(&as_matrix(&val(*b)).t()).into_dyn());
                    send!(*b, as_matrix(&val(*a)).t().dot(&gm).into_dyn());
                }
                Op::MatMulT(a, b) => {
                    let gm = as_matrix(&g);
                    send!(*a, gm.dot(&as_matrix(&val(*b))).into_dyn());
                    send!(*b, gm.t().dot(&as_matrix(&val(*a))).into_dyn());
                }
                Op::Add(a, b) => {
                    send!(*a, g.clone());
                    send!(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send!(*a, g.clone());
                    send!(*b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    send!(*a, &g * &*val(*b));
                    send!(*b, &g * &*val(*a));
                }
                Op::AddRow(a, r) => {
                    send!(*a, g.clone());
                    send!(*r, as_matrix(&g).sum_axis(Axis(0)).into_dyn());
                }
                Op::Scale(a, c) => send!(*a, g.mapv(|v| v * c)),
                Op::AddScalar(a) => send!(*a, g.clone()),
                Op::MulScalarVar(a, sv) => {
                    let c = val(*sv).iter().next().copied().unwrap();
                    send!(*a, g.mapv(|v| v * c));
                    let total = (&g * &*val(*a)).sum();
                    send!(*sv, ArrayD::from_elem(val(*sv).raw_dim(), total));
                }
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&*val(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    send!(*a, d);
                }
                Op::Exp(a) => send!(*a, &g * &*node.value),
                Op::Softplus(a) => send!(*a, &g * &val(*a).mapv(sigmoid)),
                Op::Log1mExp(a, eps) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(&*val(*a)).for_each(|d, &x| {
                        let one_minus = -x.exp_m1();
                        *d = if one_minus > *eps {
                            *d * (-x.exp() / one_minus)
                        } else {
                            0.0
                        };
                    });
                    send!(*a, d);
                }
                Op::SumAll(a) => {
                    let s = g.iter().next().copied().unwrap();
                    send!(*a, ArrayD::from_elem(val(*a).raw_dim(), s));
                }
                Op::SumRows(a) => {
                    let x = val(*a);
                    let (r, c) = as_matrix(&x).dim();
                    let g1 = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                    let d = Array2::from_shape_fn((r, c), |(i, _)| g1[i]);
                    send!(*a, d.into_dyn());
                }
                Op::RowDot(a, b) => {
                    let g1 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .insert_axis(Axis(1));
                    send!(*a, (&as_matrix(&val(*b)) * &g1).into_dyn());
                    send!(*b, (&as_matrix(&val(*a)) * &g1).into_dyn());
                }
                Op::L2NormalizeRows(a, floor) => {
                    let x = val(*a);
                    let xm = as_matrix(&x);
                    let ym = as_matrix(&node.value);
                    let gm = as_matrix(&g);
                    let mut d = Array2::zeros(xm.dim());
                    for r in 0..xm.nrows() {
                        let norm = xm.row(r).dot(&xm.row(r)).sqrt();
                        if norm > *floor {
                            let y = ym.row(r);
                            let gy = gm.row(r).dot(&y);
                            let dr = (&gm.row(r) - &(&y * gy)) / norm;
                            d.row_mut(r).assign(&dr);
                        } else {
                            d.row_mut(r).assign(&(&gm.row(r) / *floor));
                        }
                    }
                    send!(*a, d.into_dyn());
                }
                Op::LogSoftmaxRows(a) => {
                    let gm = as_matrix(&g);
                    let p = as_matrix(&node.value).mapv(f64::exp);
                    let gs = gm.sum_axis(Axis(1)).insert_axis(Axis(1));
                    send!(*a, (&gm - &(&p * &gs)).into_dyn());
                }
                Op::SoftmaxRows(a) => {
                    let gm = as_matrix(&g);
                    let p = as_matrix(&node.value);
                    let gp = (&gm * &p).sum_axis(Axis(1)).insert_axis(Axis(1));
                    send!(*a, (&p * &(&gm - &gp)).into_dyn());
                }
                Op::LogSumExpRows(a) => {
                    let x = val(*a);
                    let xm = as_matrix(&x);
                    let lse = node
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .insert_axis(Axis(1))
                        .to_owned();
                    let g1 = g
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap()
                        .insert_axis(Axis(1))
                        .to_owned();
                    let p = (&xm - &lse).mapv(f64::exp);
                    send!(*a, (&p * &g1).into_dyn());
                }
                Op::PickPerRow(a, idx) => {
                    let x = val(*a);
                    let mut d = Array2::zeros(as_matrix(&x).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        d[[r, c]] = g[[r]];
                    }
                    send!(*a, d.into_dyn());
                }
                Op::SelectRows(a, idx) => {
                    let x = val(*a);
                    let gm = as_matrix(&g);
                    let mut d = Array2::zeros(as_matrix(&x).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &gm.row(r);
                    }
                    send!(*a, d.into_dyn());
                }
                Op::GatherSub { a, ia, b, ib } => {
                    let gm = as_matrix(&g);
                    if ng(*a) {
                        let mut d = Array2::zeros(as_matrix(&val(*a)).dim());
                        for (r, &src) in ia.iter().enumerate() {
                            let mut row = d.row_mut(src);
                            row += &gm.row(r);
                        }
                        accumulate(&mut grads[*a], d.into_dyn());
                    }
                    if ng(*b) {
                        let mut d = Array2::zeros(as_matrix(&val(*b)).dim());
                        for (r, &src) in ib.iter().enumerate() {
                            let mut row = d.row_mut(src);
                            row -= &gm.row(r);
                        }
                        accumulate(&mut grads[*b], d.into_dyn());
                    }
                }
                Op::GroupedDot { u, v, group, width } => {
                    let gm = as_matrix(&g);
                    let uv = val(*u);
                    let vv = val(*v);
                    let um = as_matrix(&uv);
                    let vm = as_matrix(&vv);
                    if ng(*u) {
                        let mut du = Array2::zeros(um.dim());
                        for (m, &grp) in group.iter().enumerate() {
                            let block = vm.slice(s![grp * width..(grp + 1) * width, ..]);
                            du.row_mut(m).assign(&block.t().dot(&gm.row(m)));
                        }
                        accumulate(&mut grads[*u], du.into_dyn());
                    }
                    if ng(*v) {
                        let mut dv = Array2::zeros(vm.dim());
                        for (m, &grp) in group.iter().enumerate() {
                            for k in 0..*width {
                                let coef = gm[[m, k]];
                                if coef != 0.0 {
                                    let mut row = dv.row_mut(grp * width + k);
                                    row.scaled_add(coef, &um.row(m));
                                }
                            }
                        }
                        accumulate(&mut grads[*v], dv.into_dyn());
                    }
                }
                Op::Conv2d(xi, wi, geo) => {
                    let x = val(*xi);
                    let wv = val(*wi);
                    let (n, c, h, wd) = dims4(&x);
                    let (o, _, k, _) = dims4(&wv);
                    let (_, _, oh, ow) = dims4(&g);
                    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let wmat = wv
                        .view()
                        .into_shape_with_order((o, c * k * k))
                        .unwrap()
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let mut dw = Array2::<f64>::zeros((o, c * k * k));
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, wd));
                    for i in 0..n {
                        let gy = g4
                            .index_axis(Axis(0), i)
                            .to_owned()
                            .into_shape_with_order((o, oh * ow))
                            .unwrap();
                        if ng(*wi) {
                            let cols = im2col(x4.index_axis(Axis(0), i), k, *geo, oh, ow);
                            dw += &gy.dot(&cols.t());
                        }
                        if ng(*xi) {
                            let dcols = wmat.t().dot(&gy);
                            col2im(
                                dcols.view(),
                                dx.index_axis_mut(Axis(0), i),
                                k,
                                *geo,
                                oh,
                                ow,
                            );
                        }
                    }
                    if ng(*wi) {
                        let dw = dw.into_shape_with_order(wv.raw_dim()).unwrap();
                        accumulate(&mut grads[*wi], dw);
                    }
                    if ng(*xi) {
                        accumulate(&mut grads[*xi], dx.into_dyn());
                    }
                }
                Op::AddChannelBias(a, b) => {
                    send!(*a, g.clone());
                    if ng(*b) {
                        let c = val(*b).len();
                        let db: Array1<f64> =
                            (0..c).map(|ci| g.index_axis(Axis(1), ci).sum()).collect();
                        accumulate(&mut grads[*b], db.into_dyn());
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let x = val(*a);
                    let (n, c, h, w) = dims4(&x);
                    let scale = 1.0 / (h * w) as f64;
                    let gm = as_matrix(&g);
                    let d = ndarray::Array4::from_shape_fn((n, c, h, w), |(i, ci, _, _)| {
                        gm[[i, ci]] * scale
                    });
                    send!(*a, d.into_dyn());
                }
                Op::MaxPool2(a, arg) => {
                    let x = val(*a);
                    let mut d = ArrayD::<f64>::zeros(x.raw_dim());
                    {
                        let flat = d.as_slice_mut().expect("contiguous");
                        for (o, &src) in g.iter().zip(arg.iter()) {
                            flat[src] += o;
                        }
                    }
                    send!(*a, d);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).raw_dim();
                    let d = g
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(shape)
                        .unwrap();
                    send!(*a, d);
                }
            }
        }
        Gradients { grads }
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}
