//! Query-conditioned graph attention (QGA) unit.
//!
//! A unit takes `n` input nodes `X_in` (`n × d`) and a token-level query
//! `Q` (`M × d`) and runs four steps:
//!
//! 1. query condition: `α = softmax_rows(X_in Qᵀ)`, `X̂ = X_in + α Q`;
//! 2. adjacency: `A = softmax_rows((X̂ W_av)(X̂ W_ak)ᵀ)`, no scaling;
//! 3. graph attention: `X⁽ʰ⁾ = ReLU((A + I) X⁽ʰ⁻¹⁾ W⁽ʰ⁾)`, `X⁽⁰⁾ = X̂`,
//!    `X_out = X̂ + X⁽ᴴ⁾` (`A + I` is not renormalised);
//! 4. pooling: `β = softmax(X_out W_p)`, `x_p = Σ βᵢ x_outᵢ`.
//!
//! None of the maps in steps 2–4 carry a bias.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{data_err, Result};
use crate::nn::{elu, elu_grad, relu, uniform_fan_in, Linear};
use crate::params::{join, ParamVisit};
use crate::tensor::{dot, softmax, softmax_backward, softmax_rows_backward, Matrix, Real};

/// Learnable weights of one unit; shared by every unit of a level.
#[derive(Clone, Debug, PartialEq)]
pub struct QgaParams<T> {
    /// `d × d/2`
    pub w_av: Matrix<T>,
    /// `d × d/2`
    pub w_ak: Matrix<T>,
    /// `H` matrices of `d × d`.
    pub w_graph: Vec<Matrix<T>>,
    /// `d × 1`
    pub w_p: Matrix<T>,
}

impl<T: Real> QgaParams<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, layers: usize, rng: &mut R) -> Self {
        Self {
            w_av: uniform_fan_in(hidden, hidden / 2, hidden, rng),
            w_ak: uniform_fan_in(hidden, hidden / 2, hidden, rng),
            w_graph: (0..layers).map(|_| uniform_fan_in(hidden, hidden, hidden, rng)).collect(),
            w_p: uniform_fan_in(hidden, 1, hidden, rng),
        }
    }

    pub fn zeros(hidden: usize, layers: usize) -> Self {
        Self {
            w_av: Matrix::zeros(hidden, hidden / 2),
            w_ak: Matrix::zeros(hidden, hidden / 2),
            w_graph: (0..layers).map(|_| Matrix::zeros(hidden, hidden)).collect(),
            w_p: Matrix::zeros(hidden, 1),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_av.rows()
    }
}

impl<T: Real> ParamVisit<T> for QgaParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Matrix<T>)) {
        f(join(prefix, "w_av"), &self.w_av);
        f(join(prefix, "w_ak"), &self.w_ak);
        for (h, w) in self.w_graph.iter().enumerate() {
            f(join(prefix, &alloc::format!("w_graph{h}")), w);
        }
        f(join(prefix, "w_p"), &self.w_p);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Matrix<T>)) {
        f(join(prefix, "w_av"), &mut self.w_av);
        f(join(prefix, "w_ak"), &mut self.w_ak);
        for (h, w) in self.w_graph.iter_mut().enumerate() {
            f(join(prefix, &alloc::format!("w_graph{h}")), w);
        }
        f(join(prefix, "w_p"), &mut self.w_p);
    }
}

/// How a unit sees the question.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a, T> {
    /// No query condition: `X̂ = X_in`.
    Off,
    /// Token-wise condition on `Q`.
    Tokens(&'a Matrix<T>),
    /// Global condition: `X̂ = ELU([X_in ; f_Q] W_g + b_g)` per node.
    Global { query: &'a [T], fuse: &'a Linear<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct QgaOutput<T> {
    pub x_out: Matrix<T>,
    pub pooled: Vec<T>,
    /// `n × M` word attention; absent without token-wise conditioning.
    pub alpha: Option<Matrix<T>>,
    /// `n × n` adjacency; absent in sum-pool mode.
    pub adjacency: Option<Matrix<T>>,
    /// Pooling weights; absent in sum-pool mode.
    pub beta: Option<Vec<T>>,
}

fn check_finite<T: Real>(m: &Matrix<T>, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(data_err!("non-finite entry in {what}"))
    }
}

/// `α = softmax_rows(X_in Qᵀ)`, `X̂ = X_in + α Q`.
pub fn query_condition<T: Real>(x_in: &Matrix<T>, q: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    if x_in.rows() == 0 || q.rows() == 0 {
        return Err(data_err!("query condition needs at least one node and one word"));
    }
    check_finite(x_in, "node features")?;
    check_finite(q, "query")?;
    let alpha = x_in.matmul_nt(q).softmax_rows();
    let mut x_hat = alpha.matmul(q);
    x_hat.add_assign(x_in);
    Ok((x_hat, alpha))
}

/// `A = softmax_rows((X̂ W_av)(X̂ W_ak)ᵀ)`.
pub fn build_adjacency<T: Real>(x_hat: &Matrix<T>, w_av: &Matrix<T>, w_ak: &Matrix<T>) -> Matrix<T> {
    x_hat.matmul(w_av).matmul_nt(&x_hat.matmul(w_ak)).softmax_rows()
}

/// `H` graph layers with skip connections; returns `X̂ + X⁽ᴴ⁾`.
pub fn graph_attention<T: Real>(x_hat: &Matrix<T>, adjacency: &Matrix<T>, w_graph: &[Matrix<T>]) -> Matrix<T> {
    let b = adjacency.add(&Matrix::identity(adjacency.rows()));
    let mut z = x_hat.clone();
    for w in w_graph {
        z = b.matmul(&z).matmul(w).map(relu);
    }
    z.add(x_hat)
}

/// `β = softmax(X_out W_p)`, `x_p = Σ βᵢ x_outᵢ`.
pub fn pool_nodes<T: Real>(x_out: &Matrix<T>, w_p: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let beta = softmax(x_out.matmul(w_p).data());
    let pooled = x_out.vecmat(&beta);
    (pooled, beta)
}

#[derive(Clone, Debug)]
enum CondTape<T> {
    Off,
    Tokens { query: Matrix<T>, alpha: Matrix<T> },
    Global { input: Matrix<T>, preact: Matrix<T> },
}

/// Intermediate activations of one unit invocation.
#[derive(Clone, Debug)]
pub struct QgaTape<T> {
    sumpool: bool,
    nodes: usize,
    cond: CondTape<T>,
    x_hat: Matrix<T>,
    proj_v: Matrix<T>,
    proj_k: Matrix<T>,
    adjacency: Matrix<T>,
    /// `X⁽ʰ⁻¹⁾` for each layer.
    layer_inputs: Vec<Matrix<T>>,
    /// `(A + I) X⁽ʰ⁻¹⁾` for each layer.
    mixed: Vec<Matrix<T>>,
    /// Pre-ReLU activations for each layer.
    preacts: Vec<Matrix<T>>,
    x_out: Matrix<T>,
    beta: Vec<T>,
}

impl<T: Real> QgaTape<T> {
    /// Sign pattern of every ReLU pre-activation, used to detect kinks.
    pub fn relu_signs(&self, out: &mut Vec<bool>) {
        for p in &self.preacts {
            out.extend(p.data().iter().map(|&v| v > T::zero()));
        }
    }
}

/// Runs the unit. In sum-pool mode the unit is replaced by `x_p = Σᵢ x_inᵢ`
/// and none of the attention steps run.
pub fn qga_forward<T: Real>(
    x_in: &Matrix<T>,
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    sumpool: bool,
) -> Result<QgaOutput<T>> {
    qga_forward_taped(x_in, cond, params, sumpool).map(|(out, _)| out)
}

pub fn qga_forward_taped<T: Real>(
    x_in: &Matrix<T>,
    cond: Conditioning<'_, T>,
    params: &QgaParams<T>,
    sumpool: bool,
) -> Result<(QgaOutput<T>, QgaTape<T>)> {
    if x_in.rows() == 0 {
        return Err(data_err!("QGA unit received no nodes"));
    }
    check_finite(x_in, "node features")?;
    if sumpool {
        let pooled = x_in.sum_rows();
        let out = QgaOutput { x_out: x_in.clone(), pooled, alpha: None, adjacency: None, beta: None };
        let tape = QgaTape {
            sumpool: true,
            nodes: x_in.rows(),
            cond: CondTape::Off,
            x_hat: Matrix::zeros(0, 0),
            proj_v: Matrix::zeros(0, 0),
            proj_k: Matrix::zeros(0, 0),
            adjacency: Matrix::zeros(0, 0),
            layer_inputs: Vec::new(),
            mixed: Vec::new(),
            preacts: Vec::new(),
            x_out: Matrix::zeros(0, 0),
            beta: Vec::new(),
        };
        return Ok((out, tape));
    }

    let (x_hat, cond_tape) = match cond {
        Conditioning::Off => (x_in.clone(), CondTape::Off),
        Conditioning::Tokens(q) => {
            let (x_hat, alpha) = query_condition(x_in, q)?;
            (x_hat, CondTape::Tokens { query: q.clone(), alpha })
        }
        Conditioning::Global { query, fuse } => {
            let d = x_in.cols();
            let mut input = Matrix::zeros(x_in.rows(), d + query.len());
            for i in 0..x_in.rows() {
                let row = input.row_mut(i);
                row[..d].copy_from_slice(x_in.row(i));
                row[d..].copy_from_slice(query);
            }
            let preact = fuse.forward(&input);
            (preact.map(elu), CondTape::Global { input, preact })
        }
    };

    let proj_v = x_hat.matmul(&params.w_av);
    let proj_k = x_hat.matmul(&params.w_ak);
    let adjacency = proj_v.matmul_nt(&proj_k).softmax_rows();
    let b = adjacency.add(&Matrix::identity(adjacency.rows()));

    let layers = params.w_graph.len();
    let mut layer_inputs = Vec::with_capacity(layers);
    let mut mixed = Vec::with_capacity(layers);
    let mut preacts = Vec::with_capacity(layers);
    let mut z = x_hat.clone();
    for w in &params.w_graph {
        let bz = b.matmul(&z);
        let u = bz.matmul(w);
        let next = u.map(relu);
        layer_inputs.push(core::mem::replace(&mut z, next));
        mixed.push(bz);
        preacts.push(u);
    }
    let x_out = z.add(&x_hat);
    let (pooled, beta) = pool_nodes(&x_out, &params.w_p);

    let alpha = match &cond_tape {
        CondTape::Tokens { alpha, .. } => Some(alpha.clone()),
        _ => None,
    };
    let out = QgaOutput {
        x_out: x_out.clone(),
        pooled,
        alpha,
        adjacency: Some(adjacency.clone()),
        beta: Some(beta.clone()),
    };
    let tape = QgaTape {
        sumpool: false,
        nodes: x_in.rows(),
        cond: cond_tape,
        x_hat,
        proj_v,
        proj_k,
        adjacency,
        layer_inputs,
        mixed,
        preacts,
        x_out,
        beta,
    };
    Ok((out, tape))
}

/// Gradients with respect to a unit's inputs.
#[derive(Clone, Debug)]
pub struct QgaInputGrads<T> {
    pub x_in: Matrix<T>,
    /// Present with token-wise conditioning.
    pub query: Option<Matrix<T>>,
    /// Present with global conditioning.
    pub global_query: Option<Vec<T>>,
}

/// Backward pass from `dL/dx_p`. Parameter gradients accumulate into
/// `grads`; with global conditioning the fuse layer's gradients accumulate
/// into `fuse_grads`.
pub fn qga_backward<T: Real>(
    tape: &QgaTape<T>,
    grad_pooled: &[T],
    params: &QgaParams<T>,
    grads: &mut QgaParams<T>,
    fuse: Option<(&Linear<T>, &mut Linear<T>)>,
) -> QgaInputGrads<T> {
    let d = grad_pooled.len();
    if tape.sumpool {
        let mut x_in = Matrix::zeros(tape.nodes, d);
        for i in 0..tape.nodes {
            x_in.row_mut(i).copy_from_slice(grad_pooled);
        }
        return QgaInputGrads { x_in, query: None, global_query: None };
    }
    let n = tape.nodes;

    // Pooling.
    let g_beta: Vec<T> = (0..n).map(|i| dot(tape.x_out.row(i), grad_pooled)).collect();
    let g_e = softmax_backward(&tape.beta, &g_beta);
    let mut g_xout = Matrix::zeros(n, d);
    for i in 0..n {
        let row = g_xout.row_mut(i);
        for j in 0..d {
            row[j] = tape.beta[i] * grad_pooled[j] + g_e[i] * params.w_p.get(j, 0);
        }
    }
    grads.w_p.add_assign(&tape.x_out.matmul_tn(&Matrix::from_vec(n, 1, g_e)));

    // Skip connection and graph layers.
    let mut g_xhat = g_xout.clone();
    let b = tape.adjacency.add(&Matrix::identity(n));
    let mut g_b = Matrix::zeros(n, n);
    let mut g_z = g_xout;
    for h in (0..params.w_graph.len()).rev() {
        let mut g_u = g_z;
        for (g, &u) in g_u.data_mut().iter_mut().zip(tape.preacts[h].data()) {
            if u <= T::zero() {
                *g = T::zero();
            }
        }
        grads.w_graph[h].add_assign(&tape.mixed[h].matmul_tn(&g_u));
        let g_mixed = g_u.matmul_nt(&params.w_graph[h]);
        g_b.add_assign(&g_mixed.matmul_nt(&tape.layer_inputs[h]));
        g_z = b.matmul_tn(&g_mixed);
    }
    g_xhat.add_assign(&g_z);

    // Adjacency (the identity part of B carries no gradient).
    let g_e = softmax_rows_backward(&tape.adjacency, &g_b);
    let g_pv = g_e.matmul(&tape.proj_k);
    let g_pk = g_e.matmul_tn(&tape.proj_v);
    grads.w_av.add_assign(&tape.x_hat.matmul_tn(&g_pv));
    grads.w_ak.add_assign(&tape.x_hat.matmul_tn(&g_pk));
    g_xhat.add_assign(&g_pv.matmul_nt(&params.w_av));
    g_xhat.add_assign(&g_pk.matmul_nt(&params.w_ak));

    // Query condition.
    match &tape.cond {
        CondTape::Off => QgaInputGrads { x_in: g_xhat, query: None, global_query: None },
        CondTape::Tokens { query, alpha } => {
            let mut g_x = g_xhat.clone();
            let g_alpha = g_xhat.matmul_nt(query);
            let mut g_q = alpha.matmul_tn(&g_xhat);
            let g_s = softmax_rows_backward(alpha, &g_alpha);
            g_x.add_assign(&g_s.matmul(query));
            // x_in is recoverable as X̂ − αQ, but the tape keeps X̂ only;
            // X_in = X̂ − αQ exactly up to rounding, so recompute it.
            let x_in = {
                let mut m = tape.x_hat.clone();
                let aq = alpha.matmul(query);
                for (a, &b) in m.data_mut().iter_mut().zip(aq.data()) {
                    *a -= b;
                }
                m
            };
            g_q.add_assign(&g_s.matmul_tn(&x_in));
            QgaInputGrads { x_in: g_x, query: Some(g_q), global_query: None }
        }
        CondTape::Global { input, preact } => {
            let (fuse, fuse_grads) = fuse.expect("global conditioning needs fuse parameters");
            let mut g_pre = g_xhat;
            for (g, &p) in g_pre.data_mut().iter_mut().zip(preact.data()) {
                *g *= elu_grad(p);
            }
            let g_input = fuse.backward(input, &g_pre, fuse_grads);
            let mut g_x = Matrix::zeros(n, d);
            let mut g_fq = vec![T::zero(); input.cols() - d];
            for i in 0..n {
                let row = g_input.row(i);
                g_x.row_mut(i).copy_from_slice(&row[..d]);
                for (a, &b) in g_fq.iter_mut().zip(&row[d..]) {
                    *a += b;
                }
            }
            QgaInputGrads { x_in: g_x, query: None, global_query: Some(g_fq) }
        }
    }
}
