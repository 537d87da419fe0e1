//! Pre-norm causal transformer with a tied output head. Activations are
//! row-major `[tokens, features]`; all matrix products go through
//! [`Real::gemm`].

use super::{Batch, BlockLayout, Layout, ModelConfig};
use crate::error::Result;
use crate::params::ParamVector;
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

/// Mean next-token cross-entropy (nats) over every position of `batch`.
pub fn forward_loss<T: Real>(params: &ParamVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<T> {
    prepare(params, cfg, batch)?;
    let layout = cfg.layout();
    let fwd = forward(params.as_slice(), cfg, &layout, batch, false);
    Ok(fwd.loss)
}

/// Per-position cross-entropy terms whose mean is [`forward_loss`].
pub(crate) fn token_losses<T: Real>(params: &ParamVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<Vec<T>> {
    prepare(params, cfg, batch)?;
    let layout = cfg.layout();
    Ok(forward(params.as_slice(), cfg, &layout, batch, false).token_losses)
}

/// Gradient of [`forward_loss`] with respect to every parameter.
pub fn backward<T: Real>(
    params: &ParamVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<ParamVector<T>> {
    Ok(loss_and_grad(params, cfg, batch)?.1)
}

pub fn loss_and_grad<T: Real>(
    params: &ParamVector<T>,
    cfg: &ModelConfig,
    batch: &Batch,
) -> Result<(T, ParamVector<T>)> {
    prepare(params, cfg, batch)?;
    let layout = cfg.layout();
    let fwd = forward(params.as_slice(), cfg, &layout, batch, true);
    let grad = backprop(params.as_slice(), cfg, &layout, batch, &fwd);
    Ok((fwd.loss, ParamVector::from_vec(grad)))
}

fn prepare<T: Real>(params: &ParamVector<T>, cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    cfg.validate()?;
    params.check_len("params", cfg.param_count())?;
    batch.check(cfg)
}

struct Dims {
    rows: usize,
    pos: usize,
    n: usize,
    d: usize,
    heads: usize,
    hd: usize,
    vocab: usize,
}

impl Dims {
    fn new(cfg: &ModelConfig, batch: &Batch) -> Self {
        let rows = batch.rows();
        let pos = batch.positions();
        Dims {
            rows,
            pos,
            n: rows * pos,
            d: cfg.embed_dim,
            heads: cfg.num_heads,
            hd: cfg.head_dim(),
            vocab: cfg.vocab_size,
        }
    }
}

struct Norm<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: Norm<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    ln2: Norm<T>,
    h2: Vec<T>,
    pre_gelu: Vec<T>,
    gelu_tanh: Vec<T>,
    post_gelu: Vec<T>,
}

struct Forward<T> {
    loss: T,
    token_losses: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: Option<Norm<T>>,
    hf: Vec<T>,
    /// Softmax probabilities, only kept when a backward pass follows.
    probs: Vec<T>,
}

/// `c (+)= a @ b` for row-major operands given as (data, row stride, col stride).
#[allow(clippy::too_many_arguments)]
fn mm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], usize, usize),
    b: (&[T], usize, usize),
    c: (&mut [T], usize, usize),
    alpha: T,
    accumulate: bool,
) {
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(
        m,
        k,
        n,
        alpha,
        a.0,
        a.1 as isize,
        a.2 as isize,
        b.0,
        b.1 as isize,
        b.2 as isize,
        beta,
        c.0,
        c.1 as isize,
        c.2 as isize,
    );
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn col_sum_into<T: Real>(grad: &mut [T], dy: &[T]) {
    for row in dy.chunks_exact(grad.len()) {
        for (g, &v) in grad.iter_mut().zip(row) {
            *g += v;
        }
    }
}

fn layer_norm<T: Real>(x: &[T], gain: &[T], bias: &[T], d: usize) -> (Vec<T>, Norm<T>) {
    let n = x.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let eps = T::of(LN_EPS);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[i * d + j] = h;
            out[i * d + j] = h * gain[j] + bias[j];
        }
    }
    (out, Norm { xhat, rstd })
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_back<T: Real>(
    dy: &[T],
    norm: &Norm<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
    d: usize,
) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (i, &r) in norm.rstd.iter().enumerate() {
        let dy_row = &dy[i * d..(i + 1) * d];
        let xh = &norm.xhat[i * d..(i + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgain[j] += dy_row[j] * xh[j];
            dbias[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gain[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let dx_row = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            dx_row[j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU (tanh approximation); returns the activation and the tanh term.
fn gelu<T: Real>(x: T) -> (T, T) {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    (half * x * (T::one() + t), t)
}

fn gelu_grad<T: Real>(x: T, t: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn forward<T: Real>(
    p: &[T],
    cfg: &ModelConfig,
    layout: &Layout,
    batch: &Batch,
    keep: bool,
) -> Forward<T> {
    let dm = Dims::new(cfg, batch);
    let (n, d) = (dm.n, dm.d);

    let mut x = vec![T::zero(); n * d];
    let wte = &p[layout.wte.clone()];
    let wpe = &p[layout.wpe.clone()];
    for r in 0..dm.rows {
        let row = batch.row(r);
        for t in 0..dm.pos {
            let tok = row[t] as usize;
            let dst = &mut x[(r * dm.pos + t) * d..(r * dm.pos + t + 1) * d];
            for j in 0..d {
                dst[j] = wte[tok * d + j] + wpe[t * d + j];
            }
        }
    }

    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for blk in &layout.blocks {
        let (x_next, cache) = block_forward(p, blk, &dm, x);
        x = x_next;
        if keep {
            blocks.push(cache);
        }
    }

    let (hf, lnf) = layer_norm(&x, &p[layout.lnf_g.clone()], &p[layout.lnf_b.clone()], d);

    let v = dm.vocab;
    let mut logits = vec![T::zero(); n * v];
    // logits = hf @ wte^T
    mm(n, d, v, (&hf, d, 1), (wte, 1, d), (&mut logits, v, 1), T::one(), false);

    let mut total = T::zero();
    let mut token_losses = Vec::with_capacity(if keep { 0 } else { n });
    for r in 0..dm.rows {
        let row = batch.row(r);
        for t in 0..dm.pos {
            let i = r * dm.pos + t;
            let target = row[t + 1] as usize;
            let z = &mut logits[i * v..(i + 1) * v];
            let mut max = T::neg_infinity();
            for &zz in z.iter() {
                max = max.max(zz);
            }
            let shifted_target = z[target] - max;
            let mut sum = T::zero();
            for zz in z.iter_mut() {
                *zz = (*zz - max).exp();
                sum += *zz;
            }
            let term = sum.ln() - shifted_target;
            total += term;
            if !keep {
                token_losses.push(term);
            }
            if keep {
                let inv = T::one() / sum;
                for zz in z.iter_mut() {
                    *zz *= inv;
                }
            }
        }
    }
    let loss = total / T::of(n as f64);

    Forward {
        loss,
        token_losses,
        blocks,
        lnf: keep.then_some(lnf),
        hf: if keep { hf } else { Vec::new() },
        probs: if keep { logits } else { Vec::new() },
    }
}

fn block_forward<T: Real>(p: &[T], blk: &BlockLayout, dm: &Dims, x_in: Vec<T>) -> (Vec<T>, BlockCache<T>) {
    let (n, d, hd) = (dm.n, dm.d, dm.hd);
    let d3 = 3 * d;
    let f = 4 * d;

    let (h1, ln1) = layer_norm(&x_in, &p[blk.ln1_g.clone()], &p[blk.ln1_b.clone()], d);
    let mut qkv = vec![T::zero(); n * d3];
    mm(n, d, d3, (&h1, d, 1), (&p[blk.w_qkv.clone()], d3, 1), (&mut qkv, d3, 1), T::one(), false);
    add_bias(&mut qkv, &p[blk.b_qkv.clone()]);

    let s = dm.pos;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut probs = vec![T::zero(); dm.rows * dm.heads * s * s];
    let mut att = vec![T::zero(); n * d];
    for b in 0..dm.rows {
        let base = b * s * d3;
        for h in 0..dm.heads {
            let pm = &mut probs[(b * dm.heads + h) * s * s..(b * dm.heads + h + 1) * s * s];
            let q = &qkv[base + h * hd..];
            let k = &qkv[base + d + h * hd..];
            let v = &qkv[base + 2 * d + h * hd..];
            // scores = q k^T * scale
            mm(s, hd, s, (q, d3, 1), (k, 1, d3), (pm, s, 1), scale, false);
            for i in 0..s {
                let row = &mut pm[i * s..(i + 1) * s];
                let mut max = T::neg_infinity();
                for &z in &row[..=i] {
                    max = max.max(z);
                }
                let mut sum = T::zero();
                for z in &mut row[..=i] {
                    *z = (*z - max).exp();
                    sum += *z;
                }
                let inv = T::one() / sum;
                for z in &mut row[..=i] {
                    *z *= inv;
                }
                row[i + 1..].fill(T::zero());
            }
            let out = &mut att[b * s * d + h * hd..];
            mm(s, s, hd, (pm, s, 1), (v, d3, 1), (out, d, 1), T::one(), false);
        }
    }

    let mut x_mid = vec![T::zero(); n * d];
    mm(n, d, d, (&att, d, 1), (&p[blk.w_o.clone()], d, 1), (&mut x_mid, d, 1), T::one(), false);
    add_bias(&mut x_mid, &p[blk.b_o.clone()]);
    for (o, &xi) in x_mid.iter_mut().zip(&x_in) {
        *o += xi;
    }

    let (h2, ln2) = layer_norm(&x_mid, &p[blk.ln2_g.clone()], &p[blk.ln2_b.clone()], d);
    let mut pre_gelu = vec![T::zero(); n * f];
    mm(n, d, f, (&h2, d, 1), (&p[blk.w_fc.clone()], f, 1), (&mut pre_gelu, f, 1), T::one(), false);
    add_bias(&mut pre_gelu, &p[blk.b_fc.clone()]);
    let (post_gelu, gelu_tanh): (Vec<T>, Vec<T>) = pre_gelu.iter().map(|&z| gelu(z)).unzip();

    let mut x_out = vec![T::zero(); n * d];
    mm(n, f, d, (&post_gelu, f, 1), (&p[blk.w_proj.clone()], d, 1), (&mut x_out, d, 1), T::one(), false);
    add_bias(&mut x_out, &p[blk.b_proj.clone()]);
    for (o, &xm) in x_out.iter_mut().zip(&x_mid) {
        *o += xm;
    }

    let cache = BlockCache {
        ln1,
        h1,
        qkv,
        probs,
        att,
        ln2,
        h2,
        pre_gelu,
        gelu_tanh,
        post_gelu,
    };
    (x_out, cache)
}

fn backprop<T: Real>(p: &[T], cfg: &ModelConfig, layout: &Layout, batch: &Batch, fwd: &Forward<T>) -> Vec<T> {
    let dm = Dims::new(cfg, batch);
    let (n, d, v) = (dm.n, dm.d, dm.vocab);
    let mut g = vec![T::zero(); p.len()];

    // dlogits = (softmax - onehot) / n
    let inv_n = T::one() / T::of(n as f64);
    let mut dlogits = fwd.probs.clone();
    for r in 0..dm.rows {
        let row = batch.row(r);
        for t in 0..dm.pos {
            let i = r * dm.pos + t;
            dlogits[i * v + row[t + 1] as usize] -= T::one();
        }
    }
    for z in dlogits.iter_mut() {
        *z *= inv_n;
    }

    let wte = &p[layout.wte.clone()];
    let mut dhf = vec![T::zero(); n * d];
    mm(n, v, d, (&dlogits, v, 1), (wte, d, 1), (&mut dhf, d, 1), T::one(), false);
    // dwte += dlogits^T @ hf
    mm(v, n, d, (&dlogits, 1, v), (&fwd.hf, d, 1), (&mut g[layout.wte.clone()], d, 1), T::one(), true);

    let mut dx = vec![T::zero(); n * d];
    {
        let lnf = fwd.lnf.as_ref().expect("forward kept caches");
        let (dg, db) = split_two(&mut g, layout.lnf_g.clone(), layout.lnf_b.clone());
        layer_norm_back(&dhf, lnf, &p[layout.lnf_g.clone()], dg, db, &mut dx, d);
    }

    for (blk, cache) in layout.blocks.iter().zip(&fwd.blocks).rev() {
        dx = block_backward(p, &mut g, blk, cache, &dm, dx);
    }

    let s = dm.pos;
    for r in 0..dm.rows {
        let row = batch.row(r);
        for t in 0..s {
            let tok = row[t] as usize;
            let src = &dx[(r * s + t) * d..(r * s + t + 1) * d];
            let wte_off = layout.wte.start + tok * d;
            let wpe_off = layout.wpe.start + t * d;
            for j in 0..d {
                g[wte_off + j] += src[j];
                g[wpe_off + j] += src[j];
            }
        }
    }
    g
}

fn split_two<T>(g: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    debug_assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

fn block_backward<T: Real>(
    p: &[T],
    g: &mut [T],
    blk: &BlockLayout,
    c: &BlockCache<T>,
    dm: &Dims,
    dx_out: Vec<T>,
) -> Vec<T> {
    let (n, d, hd, s) = (dm.n, dm.d, dm.hd, dm.pos);
    let d3 = 3 * d;
    let f = 4 * d;

    // MLP: x_out = x_mid + gelu(h2 Wfc + bfc) Wproj + bproj
    mm(f, n, d, (&c.post_gelu, 1, f), (&dx_out, d, 1), (&mut g[blk.w_proj.clone()], d, 1), T::one(), true);
    col_sum_into(&mut g[blk.b_proj.clone()], &dx_out);
    let mut dpre = vec![T::zero(); n * f];
    mm(n, d, f, (&dx_out, d, 1), (&p[blk.w_proj.clone()], 1, d), (&mut dpre, f, 1), T::one(), false);
    for ((dz, &z), &t) in dpre.iter_mut().zip(&c.pre_gelu).zip(&c.gelu_tanh) {
        *dz *= gelu_grad(z, t);
    }
    mm(d, n, f, (&c.h2, 1, d), (&dpre, f, 1), (&mut g[blk.w_fc.clone()], f, 1), T::one(), true);
    col_sum_into(&mut g[blk.b_fc.clone()], &dpre);
    let mut dh2 = vec![T::zero(); n * d];
    mm(n, f, d, (&dpre, f, 1), (&p[blk.w_fc.clone()], 1, f), (&mut dh2, d, 1), T::one(), false);

    let mut dx_mid = dx_out;
    {
        let (dg, db) = split_two(g, blk.ln2_g.clone(), blk.ln2_b.clone());
        layer_norm_back(&dh2, &c.ln2, &p[blk.ln2_g.clone()], dg, db, &mut dx_mid, d);
    }

    // attention: x_mid = x_in + att Wo + bo
    mm(d, n, d, (&c.att, 1, d), (&dx_mid, d, 1), (&mut g[blk.w_o.clone()], d, 1), T::one(), true);
    col_sum_into(&mut g[blk.b_o.clone()], &dx_mid);
    let mut datt = vec![T::zero(); n * d];
    mm(n, d, d, (&dx_mid, d, 1), (&p[blk.w_o.clone()], 1, d), (&mut datt, d, 1), T::one(), false);

    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dqkv = vec![T::zero(); n * d3];
    let mut dp = vec![T::zero(); s * s];
    for b in 0..dm.rows {
        let base = b * s * d3;
        for h in 0..dm.heads {
            let pm = &c.probs[(b * dm.heads + h) * s * s..(b * dm.heads + h + 1) * s * s];
            let da = &datt[b * s * d + h * hd..];
            let q = &c.qkv[base + h * hd..];
            let k = &c.qkv[base + d + h * hd..];
            let v = &c.qkv[base + 2 * d + h * hd..];
            // dP = dA v^T
            mm(s, hd, s, (da, d, 1), (v, 1, d3), (&mut dp, s, 1), T::one(), false);
            // dV = P^T dA
            mm(s, s, hd, (pm, 1, s), (da, d, 1), (&mut dqkv[base + 2 * d + h * hd..], d3, 1), T::one(), true);
            // softmax backward, in place on dp
            for i in 0..s {
                let prow = &pm[i * s..(i + 1) * s];
                let drow = &mut dp[i * s..(i + 1) * s];
                let mut dot = T::zero();
                for j in 0..=i {
                    dot += prow[j] * drow[j];
                }
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot);
                }
                drow[i + 1..].fill(T::zero());
            }
            // dQ = dS K * scale ; dK = dS^T Q * scale
            mm(s, s, hd, (&dp, s, 1), (k, d3, 1), (&mut dqkv[base + h * hd..], d3, 1), scale, true);
            mm(s, s, hd, (&dp, 1, s), (q, d3, 1), (&mut dqkv[base + d + h * hd..], d3, 1), scale, true);
        }
    }

    mm(d, n, d3, (&c.h1, 1, d), (&dqkv, d3, 1), (&mut g[blk.w_qkv.clone()], d3, 1), T::one(), true);
    col_sum_into(&mut g[blk.b_qkv.clone()], &dqkv);
    let mut dh1 = vec![T::zero(); n * d];
    mm(n, d3, d, (&dqkv, d3, 1), (&p[blk.w_qkv.clone()], 1, d3), (&mut dh1, d, 1), T::one(), false);

    let mut dx_in = dx_mid;
    let (dg, db) = split_two(g, blk.ln1_g.clone(), blk.ln1_b.clone());
    layer_norm_back(&dh1, &c.ln1, &p[blk.ln1_g.clone()], dg, db, &mut dx_in, d);
    dx_in
}
