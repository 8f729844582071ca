//! Neural building blocks: parameter storage, linear/attention layers,
//! positional encodings, and the Adam optimizer.

use crate::tape::{Elem, Tape, Var};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;

/// Named parameter tensors with a stable iteration order.
#[derive(Clone)]
pub struct ParamSet<F: Elem> {
    entries: IndexMap<String, Array2<F>>,
}

impl<F: Elem> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Elem> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> &Array2<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

/// Registers parameters from a [`ParamSet`] onto a tape, remembering the
/// (name, var) association so gradients can be read back out by name.
pub struct Binder<'a, F: Elem> {
    tape: &'a mut Tape<F>,
    params: &'a ParamSet<F>,
    trainable: bool,
    bound: Vec<(String, Var)>,
}

impl<'a, F: Elem> Binder<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, params: &'a ParamSet<F>, trainable: bool) -> Self {
        Binder {
            tape,
            params,
            trainable,
            bound: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: &str) -> Var {
        let value = self.params.get(name).clone();
        let var = if self.trainable {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.push((name.to_string(), var));
        var
    }

    /// The underlying tape, for building ops after (or between) binds.
    pub fn tape(&mut self) -> &mut Tape<F> {
        self.tape
    }

    pub fn finish(self) -> Vec<(String, Var)> {
        self.bound
    }
}

// ---------------------------------------------------------------------------
// Layers

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

pub fn init_linear<F: Elem, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) {
    let std = (2.0 / (d_in + d_out) as f64).sqrt();
    let w = Array2::from_shape_fn((d_in, d_out), |_| {
        F::from_f64(F::std_normal(rng).as_f64() * std)
    });
    params.insert(format!("{prefix}.w"), w);
    params.insert(format!("{prefix}.b"), Array2::zeros((1, d_out)));
}

pub fn bind_linear<F: Elem>(b: &mut Binder<F>, prefix: &str) -> LinearVars {
    LinearVars {
        w: b.bind(&format!("{prefix}.w")),
        b: b.bind(&format!("{prefix}.b")),
    }
}

pub fn linear<F: Elem>(tape: &mut Tape<F>, x: Var, l: &LinearVars) -> Var {
    let n = tape.shape(x).0;
    let xw = tape.matmul(x, l.w);
    let bias = tape.broadcast_row(l.b, n);
    tape.add(xw, bias)
}

#[derive(Clone, Copy)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

pub fn init_layer_norm<F: Elem>(params: &mut ParamSet<F>, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gamma"), Array2::ones((1, d)));
    params.insert(format!("{prefix}.beta"), Array2::zeros((1, d)));
}

pub fn bind_layer_norm<F: Elem>(b: &mut Binder<F>, prefix: &str) -> LayerNormVars {
    LayerNormVars {
        gamma: b.bind(&format!("{prefix}.gamma")),
        beta: b.bind(&format!("{prefix}.beta")),
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm<F: Elem>(tape: &mut Tape<F>, x: Var, ln: &LayerNormVars) -> Var {
    let (n, d) = tape.shape(x);
    let inv_d = F::from_f64(1.0 / d as f64);
    let sum = tape.sum_cols(x);
    let mean = tape.scale(sum, inv_d);
    let mean_b = tape.broadcast_col(mean, d);
    let centered = tape.sub(x, mean_b);
    let sq = tape.mul(centered, centered);
    let var_sum = tape.sum_cols(sq);
    let var = tape.scale(var_sum, inv_d);
    let var_eps = tape.add_scalar(var, F::from_f64(LAYER_NORM_EPS));
    let std = tape.sqrt(var_eps);
    let std_b = tape.broadcast_col(std, d);
    let normed = tape.div(centered, std_b);
    let gamma_b = tape.broadcast_row(ln.gamma, n);
    let beta_b = tape.broadcast_row(ln.beta, n);
    let scaled = tape.mul(normed, gamma_b);
    tape.add(scaled, beta_b)
}

#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
    pub heads: usize,
}

pub fn init_attention<F: Elem, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d: usize,
    rng: &mut R,
) {
    init_linear(params, &format!("{prefix}.q"), d, d, rng);
    init_linear(params, &format!("{prefix}.k"), d, d, rng);
    init_linear(params, &format!("{prefix}.v"), d, d, rng);
    init_linear(params, &format!("{prefix}.o"), d, d, rng);
}

pub fn bind_attention<F: Elem>(b: &mut Binder<F>, prefix: &str, heads: usize) -> AttentionVars {
    AttentionVars {
        wq: bind_linear(b, &format!("{prefix}.q")),
        wk: bind_linear(b, &format!("{prefix}.k")),
        wv: bind_linear(b, &format!("{prefix}.v")),
        wo: bind_linear(b, &format!("{prefix}.o")),
        heads,
    }
}

/// Multi-head attention. `queries` come from one sequence, `keys_values`
/// from another (pass the same var for self-attention). `mask` is an
/// additive logit mask (0 to keep, a large negative to drop). When
/// `attn_probe` is given, the head-averaged attention weights are pushed
/// into it.
pub fn multi_head_attention<F: Elem>(
    tape: &mut Tape<F>,
    queries: Var,
    keys_values: Var,
    att: &AttentionVars,
    mask: Option<&Array2<F>>,
    mut attn_probe: Option<&mut Vec<Array2<F>>>,
) -> Var {
    let d = tape.shape(queries).1;
    assert_eq!(
        d % att.heads,
        0,
        "model width {d} not divisible by {} heads",
        att.heads
    );
    let head_dim = d / att.heads;
    let q = linear(tape, queries, &att.wq);
    let k = linear(tape, keys_values, &att.wk);
    let v = linear(tape, keys_values, &att.wv);
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());

    let mut merged: Option<Var> = None;
    let mut probe_acc: Option<Array2<F>> = None;
    for h in 0..att.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let kt = tape.transpose(kh);
        let logits_raw = tape.matmul(qh, kt);
        let mut logits = tape.scale(logits_raw, scale);
        if let Some(m) = mask {
            logits = tape.add_const(logits, m);
        }
        let weights = tape.softmax_rows(logits);
        if attn_probe.is_some() {
            let w = tape.value(weights).clone();
            probe_acc = Some(match probe_acc.take() {
                Some(acc) => acc + &w,
                None => w,
            });
        }
        let out_h = tape.matmul(weights, vh);
        merged = Some(match merged {
            Some(acc) => tape.concat_cols(acc, out_h),
            None => out_h,
        });
    }
    if let (Some(probe), Some(acc)) = (attn_probe.as_deref_mut(), probe_acc) {
        probe.push(acc.mapv(|x| x / F::from_f64(att.heads as f64)));
    }
    linear(tape, merged.expect("at least one head"), &att.wo)
}

#[derive(Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: LinearVars,
    pub w2: LinearVars,
}

pub fn init_feed_forward<F: Elem, R: Rng>(
    params: &mut ParamSet<F>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear(params, &format!("{prefix}.ff1"), d, hidden, rng);
    init_linear(params, &format!("{prefix}.ff2"), hidden, d, rng);
}

pub fn bind_feed_forward<F: Elem>(b: &mut Binder<F>, prefix: &str) -> FeedForwardVars {
    FeedForwardVars {
        w1: bind_linear(b, &format!("{prefix}.ff1")),
        w2: bind_linear(b, &format!("{prefix}.ff2")),
    }
}

pub fn feed_forward<F: Elem>(tape: &mut Tape<F>, x: Var, ff: &FeedForwardVars) -> Var {
    let h = linear(tape, x, &ff.w1);
    let a = tape.relu(h);
    linear(tape, a, &ff.w2)
}

// ---------------------------------------------------------------------------
// Positional encodings

/// Standard sinusoidal positional encoding for a sequence of `len` tokens.
pub fn sinusoidal_seq<F: Elem>(len: usize, d: usize) -> Array2<F> {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d / 2 {
            let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = F::from_f64(rate.sin());
            pe[[pos, 2 * i + 1]] = F::from_f64(rate.cos());
        }
    }
    pe
}

/// 2D positional encoding for a `rows` x `cols` patch grid, flattened
/// row-major: the first half of each feature encodes the row index, the
/// second half the column index.
pub fn sinusoidal_grid<F: Elem>(rows: usize, cols: usize, d: usize) -> Array2<F> {
    assert_eq!(d % 2, 0, "grid positional encoding needs even width");
    let half = d / 2;
    let row_pe = sinusoidal_seq::<F>(rows, half);
    let col_pe = sinusoidal_seq::<F>(cols, half);
    let mut pe = Array2::zeros((rows * cols, d));
    for r in 0..rows {
        for c in 0..cols {
            let p = r * cols + c;
            for j in 0..half {
                pe[[p, j]] = row_pe[[r, j]];
                pe[[p, half + j]] = col_pe[[c, j]];
            }
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction.
pub struct Adam<F: Elem> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: IndexMap<String, Array2<F>>,
    v: IndexMap<String, Array2<F>>,
}

impl<F: Elem> Adam<F> {
    pub fn new(lr: F) -> Self {
        Adam {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &IndexMap<String, Array2<F>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let one = F::one();
            m.zip_mut_with(grad, |m, &g| *m = self.beta1 * *m + (one - self.beta1) * g);
            v.zip_mut_with(grad, |v, &g| *v = self.beta2 * *v + (one - self.beta2) * g * g);
            let p = params.get_mut(name);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let m_hat = m / bc1;
                    let v_hat = v / bc2;
                    *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_identity_passes_through() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("l.w", Array2::eye(3));
        params.insert("l.b", Array2::zeros((1, 3)));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &params, false);
        let l = bind_linear(&mut binder, "l");
        drop(binder);
        let x = tape.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let y = linear(&mut tape, x, &l);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn layer_norm_output_is_standardized_before_affine() {
        let mut params: ParamSet<f64> = ParamSet::new();
        init_layer_norm(&mut params, "ln", 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &params, false);
        let ln = bind_layer_norm(&mut binder, "ln");
        drop(binder);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Array2::from_shape_fn((4, 8), |_| f64::std_normal(&mut rng) * 3.0 + 1.0);
        let xv = tape.constant(x);
        let y = layer_norm(&mut tape, xv, &ln);
        for row in tape.value(y).rows() {
            let mean = row.sum() / 8.0;
            let var = row.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn uniform_attention_averages_values() {
        // Zero query/key projections force equal logits; identity value
        // and output projections expose the raw average.
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("a.q.w", Array2::zeros((4, 4)));
        params.insert("a.q.b", Array2::zeros((1, 4)));
        params.insert("a.k.w", Array2::zeros((4, 4)));
        params.insert("a.k.b", Array2::zeros((1, 4)));
        params.insert("a.v.w", Array2::eye(4));
        params.insert("a.v.b", Array2::zeros((1, 4)));
        params.insert("a.o.w", Array2::eye(4));
        params.insert("a.o.b", Array2::zeros((1, 4)));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &params, false);
        let att = bind_attention(&mut binder, "a", 1);
        drop(binder);
        let x = tape.constant(array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 2.0, 0.0, 0.0],
            [0.0, 0.0, 3.0, 0.0]
        ]);
        let y = multi_head_attention(&mut tape, x, x, &att, None, None);
        let expect = array![[1.0 / 3.0, 2.0 / 3.0, 1.0, 0.0]];
        for i in 0..3 {
            for j in 0..4 {
                assert!((tape.value(y)[[i, j]] - expect[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grid_encoding_distinguishes_rows_and_columns() {
        let pe = sinusoidal_grid::<f64>(3, 4, 8);
        assert_eq!(pe.dim(), (12, 8));
        // Same row, different column: first half equal, second half not.
        let a = pe.row(0);
        let b = pe.row(1);
        for j in 0..4 {
            assert_eq!(a[j], b[j]);
        }
        assert!((0..4).any(|j| (a[4 + j] - b[4 + j]).abs() > 1e-6));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert("x", array![[5.0, -3.0]]);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let grad = params.get("x").mapv(|x| 2.0 * x);
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), grad);
            opt.step(&mut params, &grads);
        }
        for &x in params.get("x").iter() {
            assert!(x.abs() < 1e-3);
        }
    }
}
