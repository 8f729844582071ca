//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every tensor in a forward pass is a [`Var`] indexing into a [`Tape`].
//! Ops compute eagerly and record enough structure for [`Tape::backward`]
//! to accumulate gradients of a scalar output with respect to every
//! trainable leaf. All tensors are rank-2; vectors are 1 x d rows and
//! scalars are 1 x 1.
//!
//! The tape is generic over the element type so training can run in
//! single precision while gradient verification runs in double.

use ndarray::{s, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type the pipeline is generic over (f32 for training, f64 for
/// finite-difference verification).
pub trait Elem: ndarray::NdFloat {
    const DTYPE: &'static str;
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

enum Op<F: Elem> {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, F),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRow(Var),
    BroadcastCol(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MulConst(Var, Array2<F>),
    AddConst(Var),
}

struct Node<F: Elem> {
    value: Array2<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to tape leaves.
pub struct Gradients<F: Elem> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Elem> Gradients<F> {
    /// Gradient for `v` if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zeros when no path reached it.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Array2<F> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

/// Wengert list holding forward values and backward structure.
pub struct Tape<F: Elem> {
    nodes: Vec<Node<F>>,
    kink_margin: f64,
}

impl<F: Elem> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |x| seen at any kinked nonlinearity (ReLU) input so far.
    /// Finite-difference checks use this to reject instances sampled too
    /// close to a non-differentiable point.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a 1 x 1 node.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        let needs_grad = match &op {
            Op::Leaf { trainable } => *trainable,
            other => parents_of(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf { trainable: true })
    }

    /// Frozen leaf; gradients never flow into it.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf { trainable: false })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "div: shape mismatch");
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k1) = self.shape(a);
        let (k2, _) = self.shape(b);
        assert_eq!(k1, k2, "matmul: inner dimensions differ");
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: F) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let input = &self.nodes[a.0].value;
        let mut margin = f64::INFINITY;
        for &x in input.iter() {
            margin = margin.min(x.as_f64().abs());
        }
        self.kink_margin = self.kink_margin.min(margin);
        let v = input.mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.ln());
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    /// Sum over rows: n x d -> 1 x d.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(0))
            .insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// Sum over columns: n x d -> n x 1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Repeat a 1 x d row n times.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let (r, d) = self.shape(a);
        assert_eq!(r, 1, "broadcast_row expects a 1 x d input");
        let v = self.nodes[a.0]
            .value
            .broadcast((n, d))
            .expect("broadcast_row")
            .to_owned();
        self.push(v, Op::BroadcastRow(a))
    }

    /// Repeat an n x 1 column d times.
    pub fn broadcast_col(&mut self, a: Var, d: usize) -> Var {
        let (n, c) = self.shape(a);
        assert_eq!(c, 1, "broadcast_col expects an n x 1 input");
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((n, d));
        for i in 0..n {
            let x = src[[i, 0]];
            v.row_mut(i).fill(x);
        }
        self.push(v, Op::BroadcastCol(a))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_of(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (n, d) = x.dim();
        let mut v = Array2::zeros((n, d));
        for i in 0..n {
            let row = x.row(i);
            let m = row.fold(F::neg_infinity(), |acc, &x| acc.max(x));
            let lse = row.fold(F::zero(), |acc, &x| acc + (x - m).exp()).ln() + m;
            for j in 0..d {
                v[[i, j]] = row[j] - lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Select rows by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = &self.nodes[a.0].value;
        let d = src.ncols();
        let mut v = Array2::zeros((idx.len(), d));
        for (out_i, &src_i) in idx.iter().enumerate() {
            v.row_mut(out_i).assign(&src.row(src_i));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "concat_rows: column mismatch");
        let v = ndarray::concatenate(
            Axis(0),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat_rows");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat_cols: row mismatch");
        let v = ndarray::concatenate(
            Axis(1),
            &[self.nodes[a.0].value.view(), self.nodes[b.0].value.view()],
        )
        .expect("concat_cols");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![start..start + len, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    /// Elementwise product with a constant array (masking); no gradient
    /// flows into the constant.
    pub fn mul_const(&mut self, a: Var, c: &Array2<F>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulConst(a, c.clone()))
    }

    /// Elementwise sum with a constant array (positional encodings,
    /// additive attention masks).
    pub fn add_const(&mut self, a: Var, c: &Array2<F>) -> Var {
        assert_eq!(self.shape(a), c.dim(), "add_const: shape mismatch");
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddConst(a))
    }

    /// Row-wise l2 normalization, composed from primitives so gradients
    /// flow. Rows must have nonzero norm; callers validate beforehand.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let (_, d) = self.shape(a);
        let sq = self.mul(a, a);
        let ss = self.sum_cols(sq);
        let norm = self.sqrt(ss);
        let denom = self.broadcast_col(norm, d);
        self.div(a, denom)
    }

    /// Mean over rows: n x d -> 1 x d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Gradients of the 1 x 1 node `root` with respect to all leaves.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(
            self.shape(root),
            (1, 1),
            "backward root must be a 1 x 1 scalar"
        );
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { trainable } => {
                    if *trainable {
                        grads[id] = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, g.clone());
                    self.acc(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    self.acc(&mut grads, *a, &g * &self.nodes[b.0].value);
                    self.acc(&mut grads, *b, &g * &self.nodes[a.0].value);
                }
                Op::Div(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    self.acc(&mut grads, *a, &g / vb);
                    let gb = &g * &node.value / vb;
                    self.acc(&mut grads, *b, gb.mapv(|x| -x));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    self.acc(&mut grads, *a, ga);
                    self.acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => self.acc(&mut grads, *a, g.t().to_owned()),
                Op::Scale(a, k) => self.acc(&mut grads, *a, g.mapv(|x| x * *k)),
                Op::AddScalar(a) => self.acc(&mut grads, *a, g),
                Op::Relu(a) => {
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > F::zero() { F::one() } else { F::zero() });
                    self.acc(&mut grads, *a, &g * &mask);
                }
                Op::Exp(a) => self.acc(&mut grads, *a, &g * &node.value),
                Op::Ln(a) => self.acc(&mut grads, *a, &g / &self.nodes[a.0].value),
                Op::Sqrt(a) => {
                    let two = F::from_f64(2.0);
                    let ga = &g / &node.value.mapv(|x| x * two);
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.shape(*a);
                    self.acc(&mut grads, *a, Array2::from_elem(shape, g[[0, 0]]));
                }
                Op::SumRows(a) => {
                    let (n, d) = self.shape(*a);
                    self.acc(&mut grads, *a, g.broadcast((n, d)).unwrap().to_owned());
                }
                Op::SumCols(a) => {
                    let (n, d) = self.shape(*a);
                    let mut ga = Array2::zeros((n, d));
                    for i in 0..n {
                        ga.row_mut(i).fill(g[[i, 0]]);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::BroadcastRow(a) => {
                    self.acc(&mut grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::BroadcastCol(a) => {
                    self.acc(&mut grads, *a, g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::SoftmaxRows(a) => {
                    let sm = &node.value;
                    let weighted = &g * sm;
                    let row_dot = weighted.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = sm * &(&g - &row_dot.broadcast(g.dim()).unwrap());
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = node.value.mapv(|x| x.exp());
                    let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&sm * &row_sum.broadcast(g.dim()).unwrap());
                    self.acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let shape = self.shape(*a);
                    let mut ga = Array2::zeros(shape);
                    for (out_i, &src_i) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src_i);
                        row += &g.row(out_i);
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.shape(*a).0;
                    self.acc(&mut grads, *a, g.slice(s![..na, ..]).to_owned());
                    self.acc(&mut grads, *b, g.slice(s![na.., ..]).to_owned());
                }
                Op::ConcatCols(a, b) => {
                    let da = self.shape(*a).1;
                    self.acc(&mut grads, *a, g.slice(s![.., ..da]).to_owned());
                    self.acc(&mut grads, *b, g.slice(s![.., da..]).to_owned());
                }
                Op::SliceRows(a, start) => {
                    let shape = self.shape(*a);
                    let mut ga = Array2::zeros(shape);
                    let len = g.nrows();
                    ga.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let shape = self.shape(*a);
                    let mut ga = Array2::zeros(shape);
                    let len = g.ncols();
                    ga.slice_mut(s![.., *start..*start + len]).assign(&g);
                    self.acc(&mut grads, *a, ga);
                }
                Op::MulConst(a, c) => self.acc(&mut grads, *a, &g * c),
                Op::AddConst(a) => self.acc(&mut grads, *a, g),
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Array2<F>>], target: Var, delta: Array2<F>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn parents_of<F: Elem>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::MatMul(a, b)
        | Op::ConcatRows(a, b)
        | Op::ConcatCols(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Sqrt(a)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::BroadcastRow(a)
        | Op::BroadcastCol(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::GatherRows(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::MulConst(a, _)
        | Op::AddConst(a) => vec![*a],
    }
}

/// Row-wise softmax of a plain array (shared by tape and inference code).
pub fn softmax_of<F: Elem>(x: &Array2<F>) -> Array2<F> {
    let (n, d) = x.dim();
    let mut v = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let m = row.fold(F::neg_infinity(), |acc, &x| acc.max(x));
        let mut denom = F::zero();
        for j in 0..d {
            let e = (row[j] - m).exp();
            v[[i, j]] = e;
            denom = denom + e;
        }
        for j in 0..d {
            v[[i, j]] = v[[i, j]] / denom;
        }
    }
    v
}
