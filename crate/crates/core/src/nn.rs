//! Dense layers with hand-written backward passes.
//!
//! Activations are row-major `rows × cols` matrices. Parameters live in one
//! flat `f64` buffer; layers hold offsets into it, and gradients accumulate
//! into a buffer of the same layout.

use matrixmultiply::dgemm;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn added(&self, other: &Mat) -> Mat {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    /// Adds `pattern` (a `p × cols` block) to every consecutive group of `p` rows.
    pub fn add_tiled(&self, pattern: &Mat) -> Mat {
        debug_assert_eq!(self.cols, pattern.cols);
        debug_assert_eq!(self.rows % pattern.rows, 0);
        let mut out = self.clone();
        let block = pattern.data.len();
        for chunk in out.data.chunks_exact_mut(block) {
            for (a, b) in chunk.iter_mut().zip(&pattern.data) {
                *a += b;
            }
        }
        out
    }

    /// Sums consecutive groups of `p` rows into one `p × cols` block.
    pub fn fold_tiled(&self, p: usize) -> Mat {
        let mut out = Mat::zeros(p, self.cols);
        let block = p * self.cols;
        for chunk in self.data.chunks_exact(block) {
            for (a, b) in out.data.iter_mut().zip(chunk) {
                *a += b;
            }
        }
        out
    }

    /// Stacks `copies` repetitions of `self` vertically.
    pub fn tile(&self, copies: usize) -> Mat {
        let mut data = Vec::with_capacity(self.data.len() * copies);
        for _ in 0..copies {
            data.extend_from_slice(&self.data);
        }
        Mat::from_vec(self.rows * copies, self.cols, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` on raw row-major slices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is m×k (or k×m when transposed), b is k×n (or n×k).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides and dimensions describe in-bounds views of the slices.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    /// Offset of the `d_in × d_out` weight block.
    pub w: usize,
    pub b: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.d_in);
        let mut y = Mat::zeros(x.rows, self.d_out);
        let bias = &p[self.b..self.b + self.d_out];
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(bias);
        }
        let w = &p[self.w..self.w + self.d_in * self.d_out];
        gemm(x.rows, self.d_in, self.d_out, &x.data, false, w, false, &mut y.data, 1.0);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: &Mat, dy: &Mat) -> Mat {
        self.backward_params(g, x, dy);
        let mut dx = Mat::zeros(x.rows, self.d_in);
        let w = &p[self.w..self.w + self.d_in * self.d_out];
        gemm(dy.rows, self.d_out, self.d_in, &dy.data, false, w, true, &mut dx.data, 0.0);
        dx
    }

    pub fn backward_params(&self, g: &mut [f64], x: &Mat, dy: &Mat) {
        let gw = &mut g[self.w..self.w + self.d_in * self.d_out];
        gemm(self.d_in, x.rows, self.d_out, &x.data, true, &dy.data, false, gw, 1.0);
        let gb = &mut g[self.b..self.b + self.d_out];
        for r in 0..dy.rows {
            for (a, v) in gb.iter_mut().zip(dy.row(r)) {
                *a += v;
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, LnCache) {
        let d = self.dim;
        let gain = &p[self.gain..self.gain + d];
        let bias = &p[self.bias..self.bias + d];
        let mut xhat = Mat::zeros(x.rows, d);
        let mut y = Mat::zeros(x.rows, d);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(s);
            let xh = xhat.row_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
            let yr = &mut y.data[r * d..(r + 1) * d];
            for c in 0..d {
                yr[c] = xhat.data[r * d + c] * gain[c] + bias[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &LnCache, dy: &Mat) -> Mat {
        let d = self.dim;
        let gain = &p[self.gain..self.gain + d];
        let mut dx = Mat::zeros(dy.rows, d);
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            {
                let (gg, gb) = (self.gain, self.bias);
                for c in 0..d {
                    g[gg + c] += dyr[c] * xh[c];
                    g[gb + c] += dyr[c];
                }
            }
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for c in 0..d {
                let dxh = dyr[c] * gain[c];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[c];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            let s = cache.rstd[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                let dxh = dyr[c] * gain[c];
                out[c] = s * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Mat) -> Mat {
    let data = x
        .data
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}

pub fn gelu_backward(x: &Mat, dy: &Mat) -> Mat {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &d)| {
            let u = GELU_C * (v + 0.044715 * v * v * v);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
            d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Two-layer perceptron `l2(gelu(l1(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

impl Mlp {
    pub fn forward(&self, p: &[f64], x: &Mat) -> (Mat, MlpCache) {
        let pre = self.l1.forward(p, x);
        let act = gelu(&pre);
        let y = self.l2.forward(p, &act);
        (
            y,
            MlpCache {
                x: x.clone(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &MlpCache, dy: &Mat) -> Mat {
        let dact = self.l2.backward(p, g, &cache.act, dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        self.l1.backward(p, g, &cache.x, &dpre)
    }
}

/// Multi-head scaled dot-product attention with separate query, key, value
/// and output projections. Rows of the query input are grouped per sample
/// in blocks of `lq`, key/value rows in blocks of `lk`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q_in: Mat,
    k_in: Mat,
    v_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<f64>,
    mixed: Mat,
    lq: usize,
    lk: usize,
}

impl Attention {
    pub fn forward(
        &self,
        p: &[f64],
        q_in: &Mat,
        k_in: &Mat,
        v_in: &Mat,
        lq: usize,
        lk: usize,
    ) -> (Mat, AttnCache) {
        let d = self.q.d_out;
        let h = self.heads;
        let dh = d / h;
        let batch = q_in.rows / lq;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(p, q_in);
        let k = self.k.forward(p, k_in);
        let v = self.v.forward(p, v_in);
        let mut probs = vec![0.0; batch * h * lq * lk];
        let mut mixed = Mat::zeros(q.rows, d);
        let mut scores = vec![0.0; lk];
        for b in 0..batch {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..lq {
                    let qrow = &q.row(b * lq + i)[off..off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &k.row(b * lk + j)[off..off + dh];
                        *s = scale * qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let pbase = ((b * h + hd) * lq + i) * lk;
                    let out = &mut mixed.data[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    for j in 0..lk {
                        let pj = scores[j] / z;
                        probs[pbase + j] = pj;
                        let vrow = &v.data[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        for (o, vv) in out.iter_mut().zip(vrow) {
                            *o += pj * vv;
                        }
                    }
                }
            }
        }
        let y = self.o.forward(p, &mixed);
        (
            y,
            AttnCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                q,
                k,
                v,
                probs,
                mixed,
                lq,
                lk,
            },
        )
    }

    /// Returns gradients for the query, key and value inputs.
    pub fn backward(&self, p: &[f64], g: &mut [f64], c: &AttnCache, dy: &Mat) -> (Mat, Mat, Mat) {
        let d = self.q.d_out;
        let h = self.heads;
        let dh = d / h;
        let (lq, lk) = (c.lq, c.lk);
        let batch = c.q.rows / lq;
        let scale = 1.0 / (dh as f64).sqrt();
        let dmixed = self.o.backward(p, g, &c.mixed, dy);
        let mut dq = Mat::zeros(c.q.rows, d);
        let mut dk = Mat::zeros(c.k.rows, d);
        let mut dv = Mat::zeros(c.v.rows, d);
        let mut dp = vec![0.0; lk];
        for b in 0..batch {
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..lq {
                    let pbase = ((b * h + hd) * lq + i) * lk;
                    let probs = &c.probs[pbase..pbase + lk];
                    let dout = &dmixed.data[(b * lq + i) * d + off..(b * lq + i) * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..lk {
                        let vrow = &c.v.data[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        dp[j] = dout.iter().zip(vrow).map(|(a, v)| a * v).sum();
                        dot += dp[j] * probs[j];
                        let dvrow = &mut dv.data[(b * lk + j) * d + off..(b * lk + j) * d + off + dh];
                        for (a, o) in dvrow.iter_mut().zip(dout) {
                            *a += probs[j] * o;
                        }
                    }
                    let qrow_start = (b * lq + i) * d + off;
                    for j in 0..lk {
                        let ds = probs[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow_start = (b * lk + j) * d + off;
                        for t in 0..dh {
                            dq.data[qrow_start + t] += ds * c.k.data[krow_start + t];
                            dk.data[krow_start + t] += ds * c.q.data[qrow_start + t];
                        }
                    }
                }
            }
        }
        let dq_in = self.q.backward(p, g, &c.q_in, &dq);
        let dk_in = self.k.backward(p, g, &c.k_in, &dk);
        let dv_in = self.v.backward(p, g, &c.v_in, &dv);
        (dq_in, dk_in, dv_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn dot(a: &Mat, b: &Mat) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Checks `d<w, f(x)>/dx` and the parameter gradient by central differences.
    fn check<F>(params: &mut [f64], x: &Mat, w: &Mat, f: F, analytic: (Vec<f64>, Mat))
    where
        F: Fn(&[f64], &Mat) -> Mat,
    {
        let h = 1e-6;
        let (gp, gx) = analytic;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up = dot(&f(params, x), w);
            params[i] = orig - h;
            let dn = dot(&f(params, x), w);
            params[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gp[i]).abs() <= 1e-6 * fd.abs().max(1.0), "param {i}: {fd} vs {}", gp[i]);
        }
        let mut xp = x.clone();
        for i in 0..x.data.len() {
            let orig = xp.data[i];
            xp.data[i] = orig + h;
            let up = dot(&f(params, &xp), w);
            xp.data[i] = orig - h;
            let dn = dot(&f(params, &xp), w);
            xp.data[i] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() <= 1e-6 * fd.abs().max(1.0), "input {i}");
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear { w: 0, b: 12, d_in: 3, d_out: 4 };
        let mut p = random(&mut rng, 16);
        let x = Mat::from_vec(5, 3, random(&mut rng, 15));
        let w = Mat::from_vec(5, 4, random(&mut rng, 20));
        let mut g = vec![0.0; 16];
        let dx = lin.backward(&p, &mut g, &x, &w);
        check(&mut p, &x, &w, |p, x| lin.forward(p, x), (g, dx));
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ln = LayerNorm { gain: 0, bias: 6, dim: 6 };
        let mut p = random(&mut rng, 12);
        let x = Mat::from_vec(4, 6, random(&mut rng, 24));
        let w = Mat::from_vec(4, 6, random(&mut rng, 24));
        let (_, cache) = ln.forward(&p, &x);
        let mut g = vec![0.0; 12];
        let dx = ln.backward(&p, &mut g, &cache, &w);
        check(&mut p, &x, &w, |p, x| ln.forward(p, x).0, (g, dx));
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp {
            l1: Linear { w: 0, b: 12, d_in: 3, d_out: 4 },
            l2: Linear { w: 16, b: 24, d_in: 4, d_out: 2 },
        };
        let mut p = random(&mut rng, 26);
        let x = Mat::from_vec(3, 3, random(&mut rng, 9));
        let w = Mat::from_vec(3, 2, random(&mut rng, 6));
        let (_, cache) = mlp.forward(&p, &x);
        let mut g = vec![0.0; 26];
        let dx = mlp.backward(&p, &mut g, &cache, &w);
        check(&mut p, &x, &w, |p, x| mlp.forward(p, x).0, (g, dx));
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 4;
        let lin = |i: usize| Linear { w: i * 20, b: i * 20 + 16, d_in: d, d_out: d };
        let att = Attention { q: lin(0), k: lin(1), v: lin(2), o: lin(3), heads: 2 };
        let mut p = random(&mut rng, 80);
        let (batch, lq, lk) = (2, 3, 5);
        let q_in = Mat::from_vec(batch * lq, d, random(&mut rng, batch * lq * d));
        let kv = Mat::from_vec(batch * lk, d, random(&mut rng, batch * lk * d));
        let w = Mat::from_vec(batch * lq, d, random(&mut rng, batch * lq * d));
        let (_, cache) = att.forward(&p, &q_in, &kv, &kv, lq, lk);
        let mut g = vec![0.0; 80];
        let (dq, dk, dv) = att.backward(&p, &mut g, &cache, &w);
        check(&mut p, &q_in, &w, |p, x| att.forward(p, x, &kv, &kv, lq, lk).0, (g, dq));
        // key/value path, parameters already checked
        let dkv = dk.added(&dv);
        let mut g2 = vec![0.0; 80];
        let (_, c2) = att.forward(&p, &q_in, &kv, &kv, lq, lk);
        att.backward(&p, &mut g2, &c2, &w);
        check(&mut p, &kv, &w, |p, x| att.forward(p, &q_in, x, x, lq, lk).0, (g2, dkv));
    }

    #[test]
    fn tiling_helpers() {
        let pat = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let x = Mat::zeros(4, 2);
        let y = x.add_tiled(&pat);
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.fold_tiled(2).data, vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(pat.tile(2).data, y.data);
    }

    #[test]
    fn gelu_derivative() {
        let x = Mat::from_vec(1, 5, vec![-3.0, -0.5, 0.0, 0.7, 2.5]);
        let ones = Mat::from_vec(1, 5, vec![1.0; 5]);
        let d = gelu_backward(&x, &ones);
        for i in 0..5 {
            let h = 1e-6;
            let up = gelu(&Mat::from_vec(1, 1, vec![x.data[i] + h])).data[0];
            let dn = gelu(&Mat::from_vec(1, 1, vec![x.data[i] - h])).data[0];
            assert!(((up - dn) / (2.0 * h) - d.data[i]).abs() < 1e-8);
        }
    }
}
