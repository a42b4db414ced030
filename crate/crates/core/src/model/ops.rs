//! Dense kernels with hand-written backward passes. All matrices are f64 and
//! row-major unless a view says otherwise.

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view out of bounds");
        View { data, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

pub struct ViewMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(span(rows, cols, rs, cs) <= data.len(), "view out of bounds");
        ViewMut { data, rows, cols, rs, cs }
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm(alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape differs");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        for i in 0..c.rows {
            for j in 0..c.cols {
                let x = &mut c.data[i * c.rs + j * c.cs];
                *x *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked against its slice on construction,
    // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// `y = x @ w + bias` for `x: rows x inp`, `w: inp x out`.
pub fn linear(x: &[f64], rows: usize, inp: usize, w: &[f64], bias: &[f64], out: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(bias);
    }
    gemm(1.0, View::new(x, rows, inp), View::new(w, inp, out), 1.0, ViewMut::new(&mut y, rows, out));
    y
}

/// Accumulates weight and bias gradients of [`linear`] and returns `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    inp: usize,
    out: usize,
    w: &[f64],
    dw: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    gemm(1.0, View::new(x, rows, inp).t(), View::new(dy, rows, out), 1.0, ViewMut::new(dw, inp, out));
    for row in dy.chunks_exact(out) {
        for (d, g) in dbias.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![0.0; rows * inp];
    gemm(1.0, View::new(dy, rows, out), View::new(w, inp, out).t(), 0.0, ViewMut::new(&mut dx, rows, inp));
    dx
}

pub const LN_EPS: f64 = 1e-5;

pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub fn layer_norm(x: &[f64], dim: usize, gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..dim {
            let h = (row[i] - mean) * s;
            xhat[r * dim + i] = h;
            y[r * dim + i] = h * gain[i] + bias[i];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    dy: &[f64],
    dim: usize,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let o = r * dim;
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..dim {
            let g = dy[o + i];
            let h = cache.xhat[o + i];
            dgain[i] += g * h;
            dbias[i] += g;
            dxhat[i] = g * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * h;
        }
        mean_d /= dim as f64;
        mean_dx /= dim as f64;
        let s = cache.rstd[r];
        for i in 0..dim {
            dx[o + i] = s * (dxhat[i] - mean_d - cache.xhat[o + i] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &mut [f64], cols: usize) {
    for row in logits.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
}

/// Given `d loss / d log_softmax(z)`, returns `d loss / d z`.
pub fn log_softmax_backward(log_probs: &[f64], dlogp: &[f64], cols: usize) -> Vec<f64> {
    let mut dz = vec![0.0; dlogp.len()];
    for ((out, lp), g) in dz
        .chunks_exact_mut(cols)
        .zip(log_probs.chunks_exact(cols))
        .zip(dlogp.chunks_exact(cols))
    {
        let total: f64 = g.iter().sum();
        for c in 0..cols {
            out[c] = g[c] - lp[c].exp() * total;
        }
    }
    dz
}

/// Multi-head self-attention core over a packed `len x 3H` `[Q | K | V]`
/// buffer. Returns the concatenated head outputs (`len x H`) and the
/// attention probabilities (`heads x len x len`).
pub fn attention(qkv: &[f64], len: usize, hidden: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let stride = 3 * hidden;
    let mut probs = vec![0.0; heads * len * len];
    let mut ctx = vec![0.0; len * hidden];
    for h in 0..heads {
        let q = View::strided(&qkv[h * d..], len, d, stride, 1);
        let k = View::strided(&qkv[hidden + h * d..], len, d, stride, 1);
        let v = View::strided(&qkv[2 * hidden + h * d..], len, d, stride, 1);
        let p = &mut probs[h * len * len..(h + 1) * len * len];
        gemm(scale, q, k.t(), 0.0, ViewMut::new(p, len, len));
        for row in p.chunks_exact_mut(len) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let p = View::new(&probs[h * len * len..(h + 1) * len * len], len, len);
        gemm(1.0, p, v, 0.0, ViewMut::strided(&mut ctx[h * d..], len, d, hidden, 1));
    }
    (ctx, probs)
}

pub fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    dctx: &[f64],
    len: usize,
    hidden: usize,
    heads: usize,
) -> Vec<f64> {
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let stride = 3 * hidden;
    let mut dqkv = vec![0.0; len * stride];
    let mut dp = vec![0.0; len * len];
    for h in 0..heads {
        let q = View::strided(&qkv[h * d..], len, d, stride, 1);
        let k = View::strided(&qkv[hidden + h * d..], len, d, stride, 1);
        let v = View::strided(&qkv[2 * hidden + h * d..], len, d, stride, 1);
        let p_slice = &probs[h * len * len..(h + 1) * len * len];
        let p = View::new(p_slice, len, len);
        let dc = View::strided(&dctx[h * d..], len, d, hidden, 1);

        gemm(1.0, p.t(), dc, 0.0, ViewMut::strided(&mut dqkv[2 * hidden + h * d..], len, d, stride, 1));
        gemm(1.0, dc, v.t(), 0.0, ViewMut::new(&mut dp, len, len));
        for (drow, prow) in dp.chunks_exact_mut(len).zip(p_slice.chunks_exact(len)) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (g, &pv) in drow.iter_mut().zip(prow) {
                *g = pv * (*g - dot) * scale;
            }
        }
        let ds = View::new(&dp, len, len);
        gemm(1.0, ds, k, 0.0, ViewMut::strided(&mut dqkv[h * d..], len, d, stride, 1));
        gemm(1.0, ds.t(), q, 0.0, ViewMut::strided(&mut dqkv[hidden + h * d..], len, d, stride, 1));
    }
    dqkv
}

/// Sinusoidal position table, `positions x dim`.
pub fn sinusoidal_table(positions: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; positions * dim];
    for pos in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}
