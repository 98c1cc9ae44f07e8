//! Differentiable building blocks with explicit backward passes.
//!
//! Backward functions accumulate (`+=`) into a gradient struct of the same
//! type as the parameters and return the gradient with respect to the input.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{join, ParamVisit};
use crate::tensor::{axpy, Matrix, Real};

#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// ELU derivative expressed through its input.
#[inline]
pub fn elu_grad<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Uniform fan-in initialisation, `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    rng: &mut R,
) -> Matrix<T> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// `y = x W + b`, with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_fan_in(input, output, input, rng),
            bias: uniform_fan_in(1, output, input, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }
    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (o, &bi) in y.row_mut(i).iter_mut().zip(b) {
                *o += bi;
            }
        }
        y
    }

    pub fn forward_vec(&self, x: &[T]) -> Vec<T> {
        let mut y = self.weight.vecmat(x);
        for (o, &bi) in y.iter_mut().zip(self.bias.data()) {
            *o += bi;
        }
        y
    }

    pub fn backward(&self, x: &Matrix<T>, grad_out: &Matrix<T>, grads: &mut Self) -> Matrix<T> {
        grads.weight.add_assign(&x.matmul_tn(grad_out));
        for i in 0..grad_out.rows() {
            for (b, &g) in grads.bias.data_mut().iter_mut().zip(grad_out.row(i)) {
                *b += g;
            }
        }
        grad_out.matmul_nt(&self.weight)
    }

    pub fn backward_vec(&self, x: &[T], grad_out: &[T], grads: &mut Self) -> Vec<T> {
        for (i, &xi) in x.iter().enumerate() {
            if xi != T::zero() {
                axpy(xi, grad_out, grads.weight.row_mut(i));
            }
        }
        for (b, &g) in grads.bias.data_mut().iter_mut().zip(grad_out) {
            *b += g;
        }
        (0..self.weight.rows())
            .map(|i| crate::tensor::dot(self.weight.row(i), grad_out))
            .collect()
    }
}

impl<T: Real> ParamVisit<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Matrix<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Matrix<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Width-3 temporal convolution with zero same-padding, stride 1, a bias and
/// no activation. Tap `o ∈ {0,1,2}` reads position `s + o − 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalConv<T> {
    /// `3·d_in × d_out`; rows `[o·d_in, (o+1)·d_in)` hold tap `o`.
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> TemporalConv<T> {
    pub const WINDOW: usize = 3;

    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let fan_in = Self::WINDOW * input;
        Self {
            weight: uniform_fan_in(fan_in, output, fan_in, rng),
            bias: uniform_fan_in(1, output, fan_in, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(Self::WINDOW * input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows() / Self::WINDOW
    }

    fn unfold(&self, x: &Matrix<T>) -> Matrix<T> {
        let (s_len, d_in) = x.shape();
        let mut u = Matrix::zeros(s_len, Self::WINDOW * d_in);
        for s in 0..s_len {
            let row = u.row_mut(s);
            for o in 0..Self::WINDOW {
                let src = s as isize + o as isize - 1;
                if src >= 0 && (src as usize) < s_len {
                    row[o * d_in..(o + 1) * d_in].copy_from_slice(x.row(src as usize));
                }
            }
        }
        u
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let u = self.unfold(x);
        let mut y = u.matmul(&self.weight);
        for i in 0..y.rows() {
            for (o, &b) in y.row_mut(i).iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        y
    }

    pub fn backward(&self, x: &Matrix<T>, grad_out: &Matrix<T>, grads: &mut Self) -> Matrix<T> {
        let u = self.unfold(x);
        grads.weight.add_assign(&u.matmul_tn(grad_out));
        for i in 0..grad_out.rows() {
            for (b, &g) in grads.bias.data_mut().iter_mut().zip(grad_out.row(i)) {
                *b += g;
            }
        }
        let gu = grad_out.matmul_nt(&self.weight);
        let (s_len, d_in) = x.shape();
        let mut gx = Matrix::zeros(s_len, d_in);
        for s in 0..s_len {
            for o in 0..Self::WINDOW {
                let src = s as isize + o as isize - 1;
                if src >= 0 && (src as usize) < s_len {
                    let g = &gu.row(s)[o * d_in..(o + 1) * d_in];
                    for (a, &b) in gx.row_mut(src as usize).iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        gx
    }
}

impl<T: Real> ParamVisit<T> for TemporalConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Matrix<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Matrix<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Single-direction GRU cell (reset, update, candidate gate order).
///
/// ```text
/// r  = σ(x Wxr + bxr + h Whr + bhr)
/// z  = σ(x Wxz + bxz + h Whz + bhz)
/// n  = tanh(x Wxn + bxn + r ⊙ (h Whn + bhn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<T> {
    pub w_input: Matrix<T>,
    pub w_hidden: Matrix<T>,
    pub b_input: Matrix<T>,
    pub b_hidden: Matrix<T>,
}

/// Per-step activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruTape<T> {
    inputs: Matrix<T>,
    h_prev: Vec<Vec<T>>,
    r: Vec<Vec<T>>,
    z: Vec<Vec<T>>,
    n: Vec<Vec<T>>,
    hn_lin: Vec<Vec<T>>,
}

impl<T: Real> Gru<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_input: uniform_fan_in(input, 3 * hidden, hidden, rng),
            w_hidden: uniform_fan_in(hidden, 3 * hidden, hidden, rng),
            b_input: uniform_fan_in(1, 3 * hidden, hidden, rng),
            b_hidden: uniform_fan_in(1, 3 * hidden, hidden, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_input: Matrix::zeros(input, 3 * hidden),
            w_hidden: Matrix::zeros(hidden, 3 * hidden),
            b_input: Matrix::zeros(1, 3 * hidden),
            b_hidden: Matrix::zeros(1, 3 * hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.rows()
    }

    /// Runs over the rows of `inputs` in order starting from `h = 0`;
    /// returns one hidden state per row.
    pub fn forward(&self, inputs: &Matrix<T>) -> (Matrix<T>, GruTape<T>) {
        let h_dim = self.hidden_dim();
        let steps = inputs.rows();
        let ax_all = inputs.matmul(&self.w_input);
        let mut tape = GruTape {
            inputs: inputs.clone(),
            h_prev: Vec::with_capacity(steps),
            r: Vec::with_capacity(steps),
            z: Vec::with_capacity(steps),
            n: Vec::with_capacity(steps),
            hn_lin: Vec::with_capacity(steps),
        };
        let mut out = Matrix::zeros(steps, h_dim);
        let mut h = vec![T::zero(); h_dim];
        let bx = self.b_input.data();
        let bh = self.b_hidden.data();
        for t in 0..steps {
            let ax = ax_all.row(t);
            let ah = self.w_hidden.vecmat(&h);
            let mut r = vec![T::zero(); h_dim];
            let mut z = vec![T::zero(); h_dim];
            let mut n = vec![T::zero(); h_dim];
            let mut hn = vec![T::zero(); h_dim];
            let mut h_next = vec![T::zero(); h_dim];
            for j in 0..h_dim {
                r[j] = sigmoid(ax[j] + bx[j] + ah[j] + bh[j]);
                z[j] = sigmoid(ax[h_dim + j] + bx[h_dim + j] + ah[h_dim + j] + bh[h_dim + j]);
                hn[j] = ah[2 * h_dim + j] + bh[2 * h_dim + j];
                n[j] = (ax[2 * h_dim + j] + bx[2 * h_dim + j] + r[j] * hn[j]).tanh();
                h_next[j] = (T::one() - z[j]) * n[j] + z[j] * h[j];
            }
            out.row_mut(t).copy_from_slice(&h_next);
            tape.h_prev.push(core::mem::replace(&mut h, h_next));
            tape.r.push(r);
            tape.z.push(z);
            tape.n.push(n);
            tape.hn_lin.push(hn);
        }
        (out, tape)
    }

    /// `grad_states` holds `dL/dh_t` for every emitted state; returns
    /// `dL/dinputs`.
    pub fn backward(&self, tape: &GruTape<T>, grad_states: &Matrix<T>, grads: &mut Self) -> Matrix<T> {
        let h_dim = self.hidden_dim();
        let steps = tape.inputs.rows();
        let mut g_ax_all = Matrix::zeros(steps, 3 * h_dim);
        let mut g_next = vec![T::zero(); h_dim];
        for t in (0..steps).rev() {
            let (h_prev, r, z, n, hn) = (&tape.h_prev[t], &tape.r[t], &tape.z[t], &tape.n[t], &tape.hn_lin[t]);
            let mut g_ah = vec![T::zero(); 3 * h_dim];
            let mut g_hprev = vec![T::zero(); h_dim];
            {
                let g_ax = g_ax_all.row_mut(t);
                for j in 0..h_dim {
                    let g_h = grad_states.get(t, j) + g_next[j];
                    let g_n = g_h * (T::one() - z[j]);
                    let g_z = g_h * (h_prev[j] - n[j]);
                    g_hprev[j] = g_h * z[j];
                    let g_an = g_n * (T::one() - n[j] * n[j]);
                    let g_r = g_an * hn[j];
                    let g_ar = g_r * r[j] * (T::one() - r[j]);
                    let g_az = g_z * z[j] * (T::one() - z[j]);
                    g_ax[j] = g_ar;
                    g_ax[h_dim + j] = g_az;
                    g_ax[2 * h_dim + j] = g_an;
                    g_ah[j] = g_ar;
                    g_ah[h_dim + j] = g_az;
                    g_ah[2 * h_dim + j] = g_an * r[j];
                }
            }
            for (i, &hp) in h_prev.iter().enumerate() {
                if hp != T::zero() {
                    axpy(hp, &g_ah, grads.w_hidden.row_mut(i));
                }
            }
            for (b, &g) in grads.b_hidden.data_mut().iter_mut().zip(&g_ah) {
                *b += g;
            }
            for (i, gh) in g_hprev.iter_mut().enumerate() {
                *gh += crate::tensor::dot(self.w_hidden.row(i), &g_ah);
            }
            g_next = g_hprev;
        }
        grads.w_input.add_assign(&tape.inputs.matmul_tn(&g_ax_all));
        for t in 0..steps {
            for (b, &g) in grads.b_input.data_mut().iter_mut().zip(g_ax_all.row(t)) {
                *b += g;
            }
        }
        g_ax_all.matmul_nt(&self.w_input)
    }
}

impl<T: Real> ParamVisit<T> for Gru<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Matrix<T>)) {
        f(join(prefix, "w_input"), &self.w_input);
        f(join(prefix, "w_hidden"), &self.w_hidden);
        f(join(prefix, "b_input"), &self.b_input);
        f(join(prefix, "b_hidden"), &self.b_hidden);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &mut Matrix<T>)) {
        f(join(prefix, "w_input"), &mut self.w_input);
        f(join(prefix, "w_hidden"), &mut self.w_hidden);
        f(join(prefix, "b_input"), &mut self.b_input);
        f(join(prefix, "b_hidden"), &mut self.b_hidden);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window transcription, independent of the im2col path.
    fn conv_oracle(x: &[Vec<f64>], taps: &[Vec<Vec<f64>>; 3], bias: &[f64]) -> Vec<Vec<f64>> {
        let s_len = x.len();
        let d_out = bias.len();
        let mut out = vec![vec![0.0; d_out]; s_len];
        for s in 0..s_len {
            for j in 0..d_out {
                let mut acc = bias[j];
                for (o, tap) in taps.iter().enumerate() {
                    let src = s as isize + o as isize - 1;
                    if src < 0 || src as usize >= s_len {
                        continue;
                    }
                    for (i, xi) in x[src as usize].iter().enumerate() {
                        acc += xi * tap[i][j];
                    }
                }
                out[s][j] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        // S=4, d_in=3, d=2, hand-set kernel.
        let x = vec![
            vec![1.0, 0.0, -1.0],
            vec![0.5, 2.0, 1.0],
            vec![-1.0, 1.0, 0.0],
            vec![3.0, -2.0, 0.5],
        ];
        let taps = [
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, -1.0]],
            vec![vec![2.0, 1.0], vec![-1.0, 0.5], vec![0.0, 1.0]],
            vec![vec![0.5, 0.5], vec![1.0, 0.0], vec![-2.0, 1.0]],
        ];
        let bias = [0.1, -0.2];
        let mut w = Vec::new();
        for tap in &taps {
            for row in tap {
                w.extend_from_slice(row);
            }
        }
        let conv = TemporalConv {
            weight: Matrix::from_vec(9, 2, w),
            bias: Matrix::from_vec(1, 2, bias.to_vec()),
        };
        let y = conv.forward(&Matrix::from_rows(&x));
        let expect = conv_oracle(&x, &taps, &bias);
        // Frozen values from the oracle for the first position:
        // x[-1]=0, x[0]·tap1 = (2+0+0, 1+0-1)=(2,0), x[1]·tap2 = (0.25+2-2, 0.25+0+1)=(0.25,1.25)
        assert!((expect[0][0] - 2.35).abs() < 1e-12 && (expect[0][1] - 1.05).abs() < 1e-12);
        for s in 0..4 {
            for j in 0..2 {
                assert!((y.get(s, j) - expect[s][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_single_frame_uses_center_tap_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = TemporalConv::<f64>::new(3, 2, &mut rng);
        let x = Matrix::from_vec(1, 3, vec![0.3, -0.7, 1.1]);
        let y = conv.forward(&x);
        let center = Matrix::from_vec(3, 2, conv.weight.data()[6..12].to_vec());
        let expect = x.matmul(&center);
        for j in 0..2 {
            assert!((y.get(0, j) - expect.get(0, j) - conv.bias.get(0, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut conv = TemporalConv::<f64>::new(3, 4, &mut rng);
        conv.bias.fill(0.0);
        let y = conv.forward(&Matrix::zeros(5, 3));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_nothing_but_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = TemporalConv::<f64>::new(3, 4, &mut rng);
        conv.bias.fill(0.0);
        let x = uniform_fan_in::<f64, _>(6, 3, 1, &mut rng);
        let y = uniform_fan_in::<f64, _>(6, 3, 1, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut combo = x.clone();
        combo.scale(a);
        let mut yb = y.clone();
        yb.scale(b);
        combo.add_assign(&yb);
        let lhs = conv.forward(&combo);
        let mut rhs = conv.forward(&x);
        rhs.scale(a);
        let mut ry = conv.forward(&y);
        ry.scale(b);
        rhs.add_assign(&ry);
        assert!(lhs.max_abs_diff(&rhs) < 1e-6);
    }

    /// Step-by-step GRU recurrence written with scalar loops.
    fn gru_oracle(g: &Gru<f64>, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h_dim = g.hidden_dim();
        let mut h = vec![0.0; h_dim];
        let mut out = Vec::new();
        for x in xs {
            let gate = |col: usize, with_h: bool| {
                let mut a = g.b_input.get(0, col);
                for (i, xi) in x.iter().enumerate() {
                    a += xi * g.w_input.get(i, col);
                }
                let mut b = g.b_hidden.get(0, col);
                for (i, hi) in h.iter().enumerate() {
                    b += hi * g.w_hidden.get(i, col);
                }
                if with_h {
                    (a, b)
                } else {
                    (a + b, 0.0)
                }
            };
            let mut next = vec![0.0; h_dim];
            for j in 0..h_dim {
                let r = 1.0 / (1.0 + (-gate(j, false).0).exp());
                let z = 1.0 / (1.0 + (-gate(h_dim + j, false).0).exp());
                let (a, b) = gate(2 * h_dim + j, true);
                let n = (a + r * b).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_matches_unrolled_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Gru::<f64>::new(3, 2, &mut rng);
        let xs = vec![vec![0.2, -0.4, 1.0], vec![1.5, 0.3, -0.2], vec![-0.7, 0.9, 0.1]];
        let (out, _) = g.forward(&Matrix::from_rows(&xs));
        let expect = gru_oracle(&g, &xs);
        for t in 0..3 {
            for j in 0..2 {
                assert!((out.get(t, j) - expect[t][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = Gru::<f64>::new(3, 2, &mut rng);
        let x = uniform_fan_in::<f64, _>(4, 3, 1, &mut rng);
        let weights = uniform_fan_in::<f64, _>(4, 2, 1, &mut rng);
        let loss = |g: &Gru<f64>, x: &Matrix<f64>| -> f64 {
            let (h, _) = g.forward(x);
            h.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = g.forward(&x);
        let mut grads = Gru::zeros(3, 2);
        let gx = g.backward(&tape, &weights, &mut grads);
        let eps = 1e-6;
        let base = g.flatten();
        let analytic = grads.flatten();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut gp = g.clone();
            gp.unflatten(&p);
            p[i] -= 2.0 * eps;
            let mut gm = g.clone();
            gm.unflatten(&p);
            let fd = (loss(&gp, &x) - loss(&gm, &x)) / (2.0 * eps);
            assert!((fd - analytic[i]).abs() < 1e-7, "param {i}: {fd} vs {}", analytic[i]);
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&g, &xp) - loss(&g, &xm)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn linear_backward_vec_matches_matrix_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Linear::<f64>::new(4, 3, &mut rng);
        let x = [0.1, -0.3, 0.5, 2.0];
        let g = [1.0, -2.0, 0.5];
        let mut g1 = Linear::zeros(4, 3);
        let mut g2 = Linear::zeros(4, 3);
        let gx1 = l.backward_vec(&x, &g, &mut g1);
        let gx2 = l.backward(&Matrix::row_vector(&x), &Matrix::row_vector(&g), &mut g2);
        assert_eq!(g1.weight.max_abs_diff(&g2.weight), 0.0);
        for (a, b) in gx1.iter().zip(gx2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let y = l.forward_vec(&x);
        let y2 = l.forward(&Matrix::row_vector(&x));
        assert!(y.iter().zip(y2.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
