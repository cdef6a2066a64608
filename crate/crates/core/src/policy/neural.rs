use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{check_len, Policy, TrainablePolicy};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    pub vocab_size: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    /// Maximum number of positions; also the policy's `max_len`.
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_dim() -> usize {
    32
}
fn default_layers() -> usize {
    2
}
fn default_context() -> usize {
    32
}
fn default_init_std() -> f64 {
    0.1
}

impl NeuralConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            dim: default_dim(),
            layers: default_layers(),
            context: default_context(),
            init_std: default_init_std(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.dim == 0 || self.context == 0 {
            return Err(Error::Config(
                "neural policy needs positive vocab_size, dim and context".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
///
/// Canonical order: token embedding `(vocab+1) × dim` (last row is the
/// begin marker), position embedding `context × dim`, then per layer
/// `wq, wk, wv, wo, w1` (`dim × dim` each), `b1`, `w2`, `b2`, and finally
/// the output projection `dim × vocab` and its bias. Matrices are row-major
/// with the input dimension first (`y = x · W`).
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    pos: usize,
    layers: usize,
    layer_stride: usize,
    w_out: usize,
    b_out: usize,
    total: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl Layout {
    fn new(c: &NeuralConfig) -> Self {
        let d = c.dim;
        let tok = 0;
        let pos = tok + (c.vocab_size + 1) * d;
        let layers = pos + c.context * d;
        let layer_stride = 6 * d * d + 2 * d;
        let w_out = layers + c.layers * layer_stride;
        let b_out = w_out + d * c.vocab_size;
        Self {
            tok,
            pos,
            layers,
            layer_stride,
            w_out,
            b_out,
            total: b_out + c.vocab_size,
        }
    }

    fn layer(&self, l: usize, d: usize) -> LayerOffsets {
        let base = self.layers + l * self.layer_stride;
        let dd = d * d;
        LayerOffsets {
            wq: base,
            wk: base + dd,
            wv: base + 2 * dd,
            wo: base + 3 * dd,
            w1: base + 4 * dd,
            b1: base + 5 * dd,
            w2: base + 5 * dd + d,
            b2: base + 6 * dd + d,
        }
    }
}

/// A small causal autoregressor: token + position embeddings, `layers`
/// residual blocks of single-head causal attention followed by a tanh MLP,
/// and a linear read-out. No normalisation layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyAutoregressor {
    config: NeuralConfig,
    params: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    mid: Vec<f64>,
    act: Vec<f64>,
}

struct Forward {
    n: usize,
    layers: Vec<LayerCache>,
    out: Vec<f64>,
}

// y[r, :] = x[r, :] · W  (x: n×a, W: a×b)
fn matmul(x: &[f64], w: &[f64], n: usize, a: usize, b: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * b];
    for r in 0..n {
        let xr = &x[r * a..(r + 1) * a];
        let yr = &mut y[r * b..(r + 1) * b];
        for (i, &xi) in xr.iter().enumerate() {
            let wi = &w[i * b..(i + 1) * b];
            for (yj, wij) in yr.iter_mut().zip(wi) {
                *yj += xi * wij;
            }
        }
    }
    y
}

// dW += xᵀ · dy
fn acc_weight_grad(dw: &mut [f64], x: &[f64], dy: &[f64], n: usize, a: usize, b: usize) {
    for r in 0..n {
        let dyr = &dy[r * b..(r + 1) * b];
        for i in 0..a {
            let xi = x[r * a + i];
            if xi == 0.0 {
                continue;
            }
            for (g, d) in dw[i * b..(i + 1) * b].iter_mut().zip(dyr) {
                *g += xi * d;
            }
        }
    }
}

// dx += dy · Wᵀ
fn acc_input_grad(dx: &mut [f64], dy: &[f64], w: &[f64], n: usize, a: usize, b: usize) {
    for r in 0..n {
        let dyr = &dy[r * b..(r + 1) * b];
        for i in 0..a {
            let wi = &w[i * b..(i + 1) * b];
            dx[r * a + i] += wi.iter().zip(dyr).map(|(w, d)| w * d).sum::<f64>();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl TinyAutoregressor {
    pub fn new(config: NeuralConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::Config(format!("init_std: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<f64> = (0..layout.total).map(|_| normal.sample(&mut rng)).collect();
        let d = config.dim;
        for l in 0..config.layers {
            let o = layout.layer(l, d);
            params[o.b1..o.b1 + d].fill(0.0);
            params[o.b2..o.b2 + d].fill(0.0);
        }
        params[layout.b_out..].fill(0.0);
        Ok(Self { config, params })
    }

    pub fn from_params(config: NeuralConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let total = Layout::new(&config).total;
        if params.len() != total {
            return Err(Error::Config(format!(
                "neural policy expects {total} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NeuralConfig {
        &self.config
    }

    fn input_ids(&self, prompt: &[TokenId], tail: &[TokenId]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(1 + prompt.len() + tail.len());
        ids.push(self.config.vocab_size);
        ids.extend(prompt.iter().chain(tail).map(|&t| t as usize));
        if ids.len() > self.config.context {
            return Err(Error::Length {
                len: ids.len() - 1,
                max_len: self.config.context - 1,
            });
        }
        Ok(ids)
    }

    fn forward(&self, ids: &[usize]) -> Forward {
        let c = &self.config;
        let d = c.dim;
        let n = ids.len();
        let lay = Layout::new(c);
        let p = &self.params;
        let scale = 1.0 / (d as f64).sqrt();

        let mut h = vec![0.0; n * d];
        for (t, &id) in ids.iter().enumerate() {
            let te = &p[lay.tok + id * d..lay.tok + (id + 1) * d];
            let pe = &p[lay.pos + t * d..lay.pos + (t + 1) * d];
            for (j, hv) in h[t * d..(t + 1) * d].iter_mut().enumerate() {
                *hv = te[j] + pe[j];
            }
        }

        let mut caches = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let o = lay.layer(l, d);
            let q = matmul(&h, &p[o.wq..o.wq + d * d], n, d, d);
            let k = matmul(&h, &p[o.wk..o.wk + d * d], n, d, d);
            let v = matmul(&h, &p[o.wv..o.wv + d * d], n, d, d);
            let mut attn = vec![0.0; n * n];
            let mut ctx = vec![0.0; n * d];
            for t in 0..n {
                let qt = &q[t * d..(t + 1) * d];
                let scores: Vec<f64> = (0..=t)
                    .map(|j| dot(qt, &k[j * d..(j + 1) * d]) * scale)
                    .collect();
                let probs = super::softmax(&scores);
                for (j, &a) in probs.iter().enumerate() {
                    attn[t * n + j] = a;
                    for (cv, vv) in ctx[t * d..(t + 1) * d]
                        .iter_mut()
                        .zip(&v[j * d..(j + 1) * d])
                    {
                        *cv += a * vv;
                    }
                }
            }
            let attn_out = matmul(&ctx, &p[o.wo..o.wo + d * d], n, d, d);
            let mid: Vec<f64> = h.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
            let mut pre = matmul(&mid, &p[o.w1..o.w1 + d * d], n, d, d);
            for r in 0..n {
                for (x, b) in pre[r * d..(r + 1) * d].iter_mut().zip(&p[o.b1..o.b1 + d]) {
                    *x += b;
                }
            }
            let act: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
            let mut mlp = matmul(&act, &p[o.w2..o.w2 + d * d], n, d, d);
            for r in 0..n {
                for (x, b) in mlp[r * d..(r + 1) * d].iter_mut().zip(&p[o.b2..o.b2 + d]) {
                    *x += b;
                }
            }
            let next: Vec<f64> = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
            caches.push(LayerCache {
                input: std::mem::replace(&mut h, next),
                q,
                k,
                v,
                attn,
                ctx,
                mid,
                act,
            });
        }
        Forward {
            n,
            layers: caches,
            out: h,
        }
    }

    fn logits_at(&self, hidden: &[f64], row: usize) -> Vec<f64> {
        let d = self.config.dim;
        let vsz = self.config.vocab_size;
        let lay = Layout::new(&self.config);
        let w = &self.params[lay.w_out..lay.w_out + d * vsz];
        let mut out = self.params[lay.b_out..lay.b_out + vsz].to_vec();
        for (i, &x) in hidden[row * d..(row + 1) * d].iter().enumerate() {
            for (o, wij) in out.iter_mut().zip(&w[i * vsz..(i + 1) * vsz]) {
                *o += x * wij;
            }
        }
        out
    }

    fn backward(&self, ids: &[usize], fwd: &Forward, dout: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let d = c.dim;
        let n = fwd.n;
        let lay = Layout::new(c);
        let p = &self.params;
        let scale = 1.0 / (d as f64).sqrt();

        let mut dh = vec![0.0; n * d];
        let vsz = c.vocab_size;
        acc_weight_grad(
            &mut grad[lay.w_out..lay.w_out + d * vsz],
            &fwd.out,
            dout,
            n,
            d,
            vsz,
        );
        for r in 0..n {
            for (g, dv) in grad[lay.b_out..lay.b_out + vsz]
                .iter_mut()
                .zip(&dout[r * vsz..(r + 1) * vsz])
            {
                *g += dv;
            }
        }
        acc_input_grad(&mut dh, dout, &p[lay.w_out..lay.w_out + d * vsz], n, d, vsz);

        for l in (0..c.layers).rev() {
            let o = lay.layer(l, d);
            let cache = &fwd.layers[l];

            // next = mid + act·W2 + b2
            let dmlp = &dh;
            acc_weight_grad(&mut grad[o.w2..o.w2 + d * d], &cache.act, dmlp, n, d, d);
            for r in 0..n {
                for (g, dv) in grad[o.b2..o.b2 + d]
                    .iter_mut()
                    .zip(&dmlp[r * d..(r + 1) * d])
                {
                    *g += dv;
                }
            }
            let mut dact = vec![0.0; n * d];
            acc_input_grad(&mut dact, dmlp, &p[o.w2..o.w2 + d * d], n, d, d);
            let dpre: Vec<f64> = dact
                .iter()
                .zip(&cache.act)
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            acc_weight_grad(&mut grad[o.w1..o.w1 + d * d], &cache.mid, &dpre, n, d, d);
            for r in 0..n {
                for (g, dv) in grad[o.b1..o.b1 + d]
                    .iter_mut()
                    .zip(&dpre[r * d..(r + 1) * d])
                {
                    *g += dv;
                }
            }
            let mut dmid = dh.clone();
            acc_input_grad(&mut dmid, &dpre, &p[o.w1..o.w1 + d * d], n, d, d);

            // mid = input + ctx·Wo
            acc_weight_grad(&mut grad[o.wo..o.wo + d * d], &cache.ctx, &dmid, n, d, d);
            let mut dctx = vec![0.0; n * d];
            acc_input_grad(&mut dctx, &dmid, &p[o.wo..o.wo + d * d], n, d, d);

            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            for t in 0..n {
                let dct = &dctx[t * d..(t + 1) * d];
                let mut da = vec![0.0; t + 1];
                for (j, daj) in da.iter_mut().enumerate() {
                    let a = cache.attn[t * n + j];
                    *daj = dot(dct, &cache.v[j * d..(j + 1) * d]);
                    for (g, x) in dv[j * d..(j + 1) * d].iter_mut().zip(dct) {
                        *g += a * x;
                    }
                }
                let mean: f64 = (0..=t).map(|j| cache.attn[t * n + j] * da[j]).sum();
                for (j, daj) in da.iter().enumerate() {
                    let ds = cache.attn[t * n + j] * (daj - mean) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        dq[t * d + i] += ds * cache.k[j * d + i];
                        dk[j * d + i] += ds * cache.q[t * d + i];
                    }
                }
            }
            let mut dinput = dmid;
            for (w, dy) in [(o.wq, &dq), (o.wk, &dk), (o.wv, &dv)] {
                acc_weight_grad(&mut grad[w..w + d * d], &cache.input, dy, n, d, d);
                acc_input_grad(&mut dinput, dy, &p[w..w + d * d], n, d, d);
            }
            dh = dinput;
        }

        for (t, &id) in ids.iter().enumerate() {
            let src = &dh[t * d..(t + 1) * d];
            for (g, x) in grad[lay.tok + id * d..lay.tok + (id + 1) * d]
                .iter_mut()
                .zip(src)
            {
                *g += x;
            }
            for (g, x) in grad[lay.pos + t * d..lay.pos + (t + 1) * d]
                .iter_mut()
                .zip(src)
            {
                *g += x;
            }
        }
    }
}

impl Policy for TinyAutoregressor {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.context
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn next_token_logits(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        check_len(self, prompt, prefix)?;
        let ids = self.input_ids(prompt, prefix)?;
        let fwd = self.forward(&ids);
        Ok(self.logits_at(&fwd.out, fwd.n - 1))
    }

    fn response_logits(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        check_len(self, prompt, response)?;
        if response.is_empty() {
            return Ok(Vec::new());
        }
        let ids = self.input_ids(prompt, &response[..response.len() - 1])?;
        let fwd = self.forward(&ids);
        Ok((0..response.len())
            .map(|t| self.logits_at(&fwd.out, prompt.len() + t))
            .collect())
    }

    fn backprop_response(
        &self,
        prompt: &[TokenId],
        response: &[TokenId],
        dlogits: &[Vec<f64>],
        grad: &mut [f64],
    ) -> Result<()> {
        check_len(self, prompt, response)?;
        if response.is_empty() {
            return Ok(());
        }
        let ids = self.input_ids(prompt, &response[..response.len() - 1])?;
        let fwd = self.forward(&ids);
        let vsz = self.config.vocab_size;
        let mut dout = vec![0.0; fwd.n * vsz];
        for (t, dl) in dlogits.iter().enumerate().take(response.len()) {
            let row = prompt.len() + t;
            dout[row * vsz..(row + 1) * vsz].copy_from_slice(dl);
        }
        self.backward(&ids, &fwd, &dout, grad);
        Ok(())
    }
}

impl TrainablePolicy for TinyAutoregressor {
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::softmax;

    fn small() -> NeuralConfig {
        NeuralConfig {
            vocab_size: 5,
            dim: 8,
            layers: 2,
            context: 12,
            init_std: 0.3,
        }
    }

    #[test]
    fn default_dimensions() {
        let c = NeuralConfig::new(4);
        assert_eq!((c.dim, c.layers, c.context), (32, 2, 32));
        let m = TinyAutoregressor::new(c, 0).unwrap();
        assert_eq!(m.max_len(), 32);
    }

    #[test]
    fn teacher_forced_logits_match_incremental() {
        let m = TinyAutoregressor::new(small(), 3).unwrap();
        let prompt = [1, 4, 0];
        let resp = [2, 2, 3, 0];
        let tf = m.response_logits(&prompt, &resp).unwrap();
        for t in 0..resp.len() {
            let inc = m.next_token_logits(&prompt, &resp[..t]).unwrap();
            for (a, b) in tf[t].iter().zip(&inc) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn causal_under_future_perturbation() {
        let m = TinyAutoregressor::new(small(), 9).unwrap();
        let prompt = [3, 1];
        let a = m.response_logits(&prompt, &[0, 1, 2, 3, 4]).unwrap();
        // change token at response position 3; distributions at positions ≤ 3 only
        // see tokens before position 3
        let b = m.response_logits(&prompt, &[0, 1, 2, 0, 1]).unwrap();
        for t in 0..=3 {
            assert_eq!(a[t], b[t], "position {t} saw the future");
        }
        assert_ne!(a[4], b[4]);
    }

    #[test]
    fn distributions_normalise() {
        let m = TinyAutoregressor::new(NeuralConfig::new(7), 2).unwrap();
        for t in 0..5u32 {
            let prefix: Vec<u32> = (0..t).map(|i| i % 7).collect();
            let s: f64 = softmax(&m.next_token_logits(&[6, 5], &prefix).unwrap())
                .iter()
                .sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_limit_is_length_error() {
        let m = TinyAutoregressor::new(small(), 0).unwrap();
        assert!(m.response_logits(&[0; 6], &[1; 6]).is_ok());
        assert!(matches!(
            m.response_logits(&[0; 6], &[1; 7]),
            Err(Error::Length { .. })
        ));
        assert!(matches!(
            m.next_token_logits(&[0; 6], &[1; 6]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn param_count_matches_layout() {
        let c = small();
        let m = TinyAutoregressor::new(c.clone(), 0).unwrap();
        let d = c.dim;
        let want = (c.vocab_size + 1) * d
            + c.context * d
            + c.layers * (6 * d * d + 2 * d)
            + d * c.vocab_size
            + c.vocab_size;
        assert_eq!(m.params().len(), want);
        assert!(TinyAutoregressor::from_params(c, vec![0.0; want - 1]).is_err());
    }
}
