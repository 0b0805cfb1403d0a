//! The 2-layer pre-norm transformer encoder with manual forward and reverse
//! passes.
//!
//! Parameters live in one flat `ParamVector` with a fixed, documented layout
//! (see [`ParamLayout`]); the attention slice (Wq, Wk, Wv, Wo over both
//! layers, 131072 coordinates) is the object every diagnostic perturbs or
//! projects. The backward pass can route parameter gradients into three
//! different sinks: accumulated over the batch (training), per-example
//! attention rows (per-example SVD), or nowhere (input-embedding gradients
//! only, for centroids).

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

use crate::data::{Batch, OpKind};
use crate::rng::RngStream;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Fixed hyperparameters of the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Architecture {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Task heads: 1 single-task, 4 multitask.
    pub n_task_heads: usize,
}

impl Architecture {
    pub fn single_task() -> Self {
        Self::with_heads(1)
    }

    pub fn multitask() -> Self {
        Self::with_heads(4)
    }

    pub fn with_heads(n_task_heads: usize) -> Self {
        Architecture {
            d_model: 128,
            n_heads: 4,
            head_dim: 32,
            d_ff: 256,
            n_layers: 2,
            vocab: 97,
            seq_len: 2,
            n_task_heads,
        }
    }

    /// Attention parameter count: n_layers · 4 · d_model².
    pub fn attn_len(&self) -> usize {
        self.n_layers * 4 * self.d_model * self.d_model
    }
}

/// Flat parameter state. The layout, in order:
///
/// 1. token embedding `vocab × d_model`
/// 2. position embedding `seq_len × d_model`
/// 3. per layer: ln1 γ, ln1 β, Wq, Wk, Wv, Wo (each `d_model × d_model`,
///    no bias), ln2 γ, ln2 β, W_ff1 `d_model × d_ff`, b_ff1, W_ff2
///    `d_ff × d_model`, b_ff2
/// 4. final ln γ, β
/// 5. per task head: W_head `d_model × vocab`, b_head
///
/// All weight matrices are row-major `[input][output]`; activations are row
/// vectors multiplied on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

type Range = std::ops::Range<usize>;

/// Offsets of every logical tensor inside the flat vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub arch: Architecture,
    tok_emb: Range,
    pos_emb: Range,
    layers: Vec<LayerRanges>,
    lnf_gamma: Range,
    lnf_beta: Range,
    heads: Vec<(Range, Range)>,
    total: usize,
}

#[derive(Debug, Clone)]
struct LayerRanges {
    ln1_gamma: Range,
    ln1_beta: Range,
    wq: Range,
    wk: Range,
    wv: Range,
    wo: Range,
    ln2_gamma: Range,
    ln2_beta: Range,
    w_ff1: Range,
    b_ff1: Range,
    w_ff2: Range,
    b_ff2: Range,
}

impl ParamLayout {
    pub fn new(arch: Architecture) -> Self {
        let d = arch.d_model;
        let mut off = 0usize;
        let mut seg = |len: usize| {
            let r = off..off + len;
            off += len;
            r
        };
        let tok_emb = seg(arch.vocab * d);
        let pos_emb = seg(arch.seq_len * d);
        let mut layers = Vec::with_capacity(arch.n_layers);
        for _ in 0..arch.n_layers {
            layers.push(LayerRanges {
                ln1_gamma: seg(d),
                ln1_beta: seg(d),
                wq: seg(d * d),
                wk: seg(d * d),
                wv: seg(d * d),
                wo: seg(d * d),
                ln2_gamma: seg(d),
                ln2_beta: seg(d),
                w_ff1: seg(d * arch.d_ff),
                b_ff1: seg(arch.d_ff),
                w_ff2: seg(arch.d_ff * d),
                b_ff2: seg(d),
            });
        }
        let lnf_gamma = seg(d);
        let lnf_beta = seg(d);
        let mut heads = Vec::with_capacity(arch.n_task_heads);
        for _ in 0..arch.n_task_heads {
            let w = seg(d * arch.vocab);
            let b = seg(arch.vocab);
            heads.push((w, b));
        }
        ParamLayout {
            arch,
            tok_emb,
            pos_emb,
            layers,
            lnf_gamma,
            lnf_beta,
            heads,
            total: off,
        }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    /// The eight attention weight ranges in slice order:
    /// layer-major, then Wq, Wk, Wv, Wo.
    pub fn attention_ranges(&self) -> Vec<Range> {
        let mut out = Vec::with_capacity(self.arch.n_layers * 4);
        for l in &self.layers {
            out.push(l.wq.clone());
            out.push(l.wk.clone());
            out.push(l.wv.clone());
            out.push(l.wo.clone());
        }
        out
    }

    pub fn attn_len(&self) -> usize {
        self.arch.attn_len()
    }

    /// Gather the attention slice into a contiguous vector.
    pub fn extract_attention(&self, params: &ParamVector) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.attn_len());
        for r in self.attention_ranges() {
            out.extend_from_slice(&params.data[r]);
        }
        out
    }

    /// Scatter a contiguous attention vector back into the flat layout.
    pub fn insert_attention(&self, params: &mut ParamVector, attn: &[f64]) {
        debug_assert_eq!(attn.len(), self.attn_len());
        let mut at = 0;
        for r in self.attention_ranges() {
            let len = r.len();
            params.data[r].copy_from_slice(&attn[at..at + len]);
            at += len;
        }
    }

    /// `params + eps * dir` on the attention slice only; everything else is
    /// untouched.
    pub fn perturbed_along_attention(
        &self,
        params: &ParamVector,
        dir: &[f64],
        eps: f64,
    ) -> ParamVector {
        debug_assert_eq!(dir.len(), self.attn_len());
        let mut out = params.clone();
        let mut at = 0;
        for r in self.attention_ranges() {
            for (dst, &d) in out.data[r].iter_mut().zip(&dir[at..]) {
                *dst += eps * d;
            }
            at += r.len();
        }
        out
    }

    pub fn attention_norm(&self, params: &ParamVector) -> f64 {
        let mut s = 0.0;
        for r in self.attention_ranges() {
            s += crate::linalg::dot(&params.data[r.clone()], &params.data[r]);
        }
        s.sqrt()
    }

    /// (weight range, bias range) of one task head.
    pub fn head_ranges(&self, head: usize) -> (Range, Range) {
        self.heads[head].clone()
    }

    /// Ranges of all non-attention parameters (for scope-isolation checks).
    pub fn non_attention_ranges(&self) -> Vec<Range> {
        let mut attn = self.attention_ranges();
        attn.sort_by_key(|r| r.start);
        let mut out = Vec::new();
        let mut at = 0usize;
        for r in attn {
            if at < r.start {
                out.push(at..r.start);
            }
            at = r.end;
        }
        if at < self.total {
            out.push(at..self.total);
        }
        out
    }
}

fn view2<'a>(data: &'a [f64], r: &Range, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &data[r.clone()]).expect("layout shape")
}

fn view2_mut<'a>(
    data: &'a mut [f64],
    r: &Range,
    rows: usize,
    cols: usize,
) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut data[r.clone()]).expect("layout shape")
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_prime(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.3989422804014327;
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

struct LnCache {
    /// Normalized rows before the affine transform.
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
    /// γ ⊙ xhat + β, the tensor fed downstream.
    out: Array2<f64>,
}

struct LayerCache {
    ln1: LnCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Row-softmax attention probabilities, `batch × heads × seq × seq`.
    probs: Vec<f64>,
    ctx: Array2<f64>,
    resid1: Array2<f64>,
    ln2: LnCache,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    resid2: Array2<f64>,
}

/// Forward intermediates for one batch; everything the reverse pass needs.
pub struct ForwardCache {
    pub batch_size: usize,
    x0: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    /// Mean over the two positions of the final layer-norm output.
    pub pooled: Array2<f64>,
}

/// Where parameter gradients go during the reverse pass.
pub enum GradSink<'a> {
    /// Accumulate the batch-summed gradient of every parameter.
    Params(&'a mut ParamVector),
    /// Write each example's attention-weight gradient into its own row
    /// (`batch × attn_len`); non-attention gradients are skipped.
    PerExampleAttention(&'a mut Array2<f64>),
    /// Input-embedding gradients only.
    InputsOnly,
}

pub struct Model {
    pub arch: Architecture,
    pub layout: ParamLayout,
}

impl Model {
    pub fn new(arch: Architecture) -> Self {
        let layout = ParamLayout::new(arch);
        Model { arch, layout }
    }

    /// Scaled-Gaussian init: embeddings and weight matrices `N(0, 1/fan_in)`
    /// (embeddings use `fan_in = d_model`), layer-norm γ = 1, β and biases 0.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamVector {
        let mut p = ParamVector::zeros(self.layout.total_len());
        let d = self.arch.d_model;
        let fill = |data: &mut [f64], r: &Range, std: f64, rng: &mut RngStream| {
            for x in data[r.clone()].iter_mut() {
                *x = rng.normal_f64() * std;
            }
        };
        let set_one = |data: &mut [f64], r: &Range| {
            for x in data[r.clone()].iter_mut() {
                *x = 1.0;
            }
        };
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let inv_sqrt_ff = 1.0 / (self.arch.d_ff as f64).sqrt();
        fill(&mut p.data, &self.layout.tok_emb, inv_sqrt_d, rng);
        fill(&mut p.data, &self.layout.pos_emb, inv_sqrt_d, rng);
        for l in 0..self.arch.n_layers {
            let lr = self.layout.layers[l].clone();
            set_one(&mut p.data, &lr.ln1_gamma);
            fill(&mut p.data, &lr.wq, inv_sqrt_d, rng);
            fill(&mut p.data, &lr.wk, inv_sqrt_d, rng);
            fill(&mut p.data, &lr.wv, inv_sqrt_d, rng);
            fill(&mut p.data, &lr.wo, inv_sqrt_d, rng);
            set_one(&mut p.data, &lr.ln2_gamma);
            fill(&mut p.data, &lr.w_ff1, inv_sqrt_d, rng);
            fill(&mut p.data, &lr.w_ff2, inv_sqrt_ff, rng);
        }
        set_one(&mut p.data, &self.layout.lnf_gamma);
        for h in 0..self.arch.n_task_heads {
            let (w, _b) = self.layout.heads[h].clone();
            fill(&mut p.data, &w, inv_sqrt_d, rng);
        }
        p
    }

    /// Token + position embeddings for a batch of (a, b) pairs:
    /// `2·batch × d_model`, rows interleaved as (pos0, pos1) per example.
    pub fn embed(&self, params: &ParamVector, pairs: &[(u8, u8)]) -> Result<Array2<f64>> {
        let d = self.arch.d_model;
        let tok = view2(&params.data, &self.layout.tok_emb, self.arch.vocab, d);
        let pos = view2(&params.data, &self.layout.pos_emb, self.arch.seq_len, d);
        let mut x0 = Array2::zeros((2 * pairs.len(), d));
        for (i, &(a, b)) in pairs.iter().enumerate() {
            if a as usize >= self.arch.vocab || b as usize >= self.arch.vocab {
                return Err(Error::Model(format!("token out of vocab: ({a},{b})")));
            }
            for dim in 0..d {
                x0[[2 * i, dim]] = tok[[a as usize, dim]] + pos[[0, dim]];
                x0[[2 * i + 1, dim]] = tok[[b as usize, dim]] + pos[[1, dim]];
            }
        }
        Ok(x0)
    }

    fn layer_norm(&self, x: &Array2<f64>, gamma: &[f64], beta: &[f64]) -> LnCache {
        let (rows, d) = x.dim();
        let mut xhat = Array2::zeros((rows, d));
        let mut out = Array2::zeros((rows, d));
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = x.row(r);
            let row = row.as_slice().unwrap();
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                xhat[[r, c]] = xh;
                out[[r, c]] = gamma[c] * xh + beta[c];
            }
        }
        LnCache { xhat, inv_std, out }
    }

    /// dL/dx for a layer norm given dL/dout and the cache; accumulates
    /// dγ/dβ into the provided slices when present.
    fn layer_norm_backward(
        &self,
        dout: &Array2<f64>,
        cache: &LnCache,
        gamma: &[f64],
        mut dgamma_dbeta: Option<(&mut [f64], &mut [f64])>,
    ) -> Array2<f64> {
        let (rows, d) = dout.dim();
        let mut dx = Array2::zeros((rows, d));
        for r in 0..rows {
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let dxh = dout[[r, c]] * gamma[c];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * cache.xhat[[r, c]];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let is = cache.inv_std[r];
            for c in 0..d {
                let dxh = dout[[r, c]] * gamma[c];
                dx[[r, c]] = is * (dxh - mean_dxhat - cache.xhat[[r, c]] * mean_dxhat_xhat);
            }
            if let Some((ref mut dg, ref mut db)) = dgamma_dbeta {
                for c in 0..d {
                    dg[c] += dout[[r, c]] * cache.xhat[[r, c]];
                    db[c] += dout[[r, c]];
                }
            }
        }
        dx
    }

    /// Encoder forward from embedded inputs through the final layer norm and
    /// mean pooling over the two positions.
    pub fn encode(&self, params: &ParamVector, x0: Array2<f64>) -> ForwardCache {
        let d = self.arch.d_model;
        let rows = x0.nrows();
        let batch = rows / 2;
        let n_heads = self.arch.n_heads;
        let hd = self.arch.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut layers = Vec::with_capacity(self.arch.n_layers);
        let mut x = x0.clone();
        for l in 0..self.arch.n_layers {
            let lr = self.layout.layers[l].clone();
            let ln1 = self.layer_norm(
                &x,
                &params.data[lr.ln1_gamma.clone()],
                &params.data[lr.ln1_beta.clone()],
            );
            let wq = view2(&params.data, &lr.wq, d, d);
            let wk = view2(&params.data, &lr.wk, d, d);
            let wv = view2(&params.data, &lr.wv, d, d);
            let wo = view2(&params.data, &lr.wo, d, d);
            let q = ln1.out.dot(&wq);
            let k = ln1.out.dot(&wk);
            let v = ln1.out.dot(&wv);

            let mut probs = vec![0.0f64; batch * n_heads * 4];
            let mut ctx = Array2::zeros((rows, d));
            for i in 0..batch {
                let (r0, r1) = (2 * i, 2 * i + 1);
                for h in 0..n_heads {
                    let base = h * hd;
                    let qs0 = &q.row(r0).to_slice().unwrap()[base..base + hd];
                    let qs1 = &q.row(r1).to_slice().unwrap()[base..base + hd];
                    let ks0 = &k.row(r0).to_slice().unwrap()[base..base + hd];
                    let ks1 = &k.row(r1).to_slice().unwrap()[base..base + hd];
                    let s = [
                        crate::linalg::dot(qs0, ks0) * scale,
                        crate::linalg::dot(qs0, ks1) * scale,
                        crate::linalg::dot(qs1, ks0) * scale,
                        crate::linalg::dot(qs1, ks1) * scale,
                    ];
                    let pbase = (i * n_heads + h) * 4;
                    for row in 0..2 {
                        let (a, b) = (s[2 * row], s[2 * row + 1]);
                        let m = a.max(b);
                        let ea = libm::exp(a - m);
                        let eb = libm::exp(b - m);
                        let z = ea + eb;
                        probs[pbase + 2 * row] = ea / z;
                        probs[pbase + 2 * row + 1] = eb / z;
                    }
                    for c in 0..hd {
                        let v0 = v[[r0, base + c]];
                        let v1 = v[[r1, base + c]];
                        ctx[[r0, base + c]] = probs[pbase] * v0 + probs[pbase + 1] * v1;
                        ctx[[r1, base + c]] = probs[pbase + 2] * v0 + probs[pbase + 3] * v1;
                    }
                }
            }
            let attn_out = ctx.dot(&wo);
            let resid1 = &x + &attn_out;

            let ln2 = self.layer_norm(
                &resid1,
                &params.data[lr.ln2_gamma.clone()],
                &params.data[lr.ln2_beta.clone()],
            );
            let w1 = view2(&params.data, &lr.w_ff1, d, self.arch.d_ff);
            let w2 = view2(&params.data, &lr.w_ff2, self.arch.d_ff, d);
            let mut ff_pre = ln2.out.dot(&w1);
            {
                let b1 = &params.data[lr.b_ff1.clone()];
                for mut row in ff_pre.rows_mut() {
                    for (x, b) in row.iter_mut().zip(b1) {
                        *x += b;
                    }
                }
            }
            let ff_act = ff_pre.mapv(gelu);
            let mut ff_out = ff_act.dot(&w2);
            {
                let b2 = &params.data[lr.b_ff2.clone()];
                for mut row in ff_out.rows_mut() {
                    for (x, b) in row.iter_mut().zip(b2) {
                        *x += b;
                    }
                }
            }
            let resid2 = &resid1 + &ff_out;

            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                resid1,
                ln2,
                ff_pre,
                ff_act,
                resid2,
            });
            x = layers.last().unwrap().resid2.clone();
        }

        let lnf = self.layer_norm(
            &x,
            &params.data[self.layout.lnf_gamma.clone()],
            &params.data[self.layout.lnf_beta.clone()],
        );
        let mut pooled = Array2::zeros((batch, d));
        for i in 0..batch {
            for c in 0..d {
                pooled[[i, c]] = 0.5 * (lnf.out[[2 * i, c]] + lnf.out[[2 * i + 1, c]]);
            }
        }

        ForwardCache {
            batch_size: batch,
            x0,
            layers,
            lnf,
            pooled,
        }
    }

    pub fn forward(&self, params: &ParamVector, pairs: &[(u8, u8)]) -> Result<ForwardCache> {
        let x0 = self.embed(params, pairs)?;
        Ok(self.encode(params, x0))
    }

    /// Logits of one task head from a finished forward pass.
    pub fn logits(&self, params: &ParamVector, cache: &ForwardCache, head: usize) -> Array2<f64> {
        let (w, b) = self.layout.heads[head].clone();
        let wv = view2(&params.data, &w, self.arch.d_model, self.arch.vocab);
        let mut logits = cache.pooled.dot(&wv);
        let bias = &params.data[b];
        for mut row in logits.rows_mut() {
            for (x, bb) in row.iter_mut().zip(bias) {
                *x += bb;
            }
        }
        logits
    }

    pub fn forward_logits(
        &self,
        params: &ParamVector,
        pairs: &[(u8, u8)],
        head: usize,
    ) -> Result<Array2<f64>> {
        if head >= self.arch.n_task_heads {
            return Err(Error::Model(format!("head {head} out of range")));
        }
        let cache = self.forward(params, pairs)?;
        Ok(self.logits(params, &cache, head))
    }

    /// Mean cross-entropy over the batch for one head.
    pub fn mean_cross_entropy(logits: &Array2<f64>, labels: &[u8]) -> f64 {
        let n = logits.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let row = logits.row(i);
            let row = row.as_slice().unwrap();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|&l| libm::exp(l - m)).sum::<f64>());
            total += lse - row[labels[i] as usize];
        }
        total / n as f64
    }

    /// d(mean CE)/dlogits = (softmax − onehot) / batch.
    fn ce_dlogits(logits: &Array2<f64>, labels: &[u8]) -> Array2<f64> {
        let (n, v) = logits.dim();
        let mut d = Array2::zeros((n, v));
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let row = logits.row(i);
            let row = row.as_slice().unwrap();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &l in row {
                z += libm::exp(l - m);
            }
            for c in 0..v {
                d[[i, c]] = libm::exp(row[c] - m) / z * inv_n;
            }
            d[[i, labels[i] as usize]] -= inv_n;
        }
        d
    }

    /// Reverse pass from per-head dlogits down to the embedded inputs.
    ///
    /// Returns per-example input-embedding gradients (`batch × 2·d_model`,
    /// both positions flattened). Parameter gradients go to `sink`.
    pub fn backward(
        &self,
        params: &ParamVector,
        cache: &ForwardCache,
        dlogits_per_head: &[(usize, Array2<f64>)],
        sink: &mut GradSink,
    ) -> Array2<f64> {
        let d = self.arch.d_model;
        let batch = cache.batch_size;
        let rows = 2 * batch;
        let n_heads = self.arch.n_heads;
        let hd = self.arch.head_dim;
        let scale = 1.0 / (hd as f64).sqrt();

        // Head + pooling.
        let mut dpooled: Array2<f64> = Array2::zeros((batch, d));
        for (head, dlogits) in dlogits_per_head {
            let (wr, br) = self.layout.heads[*head].clone();
            let wv = view2(&params.data, &wr, d, self.arch.vocab);
            dpooled = dpooled + dlogits.dot(&wv.t());
            if let GradSink::Params(grad) = sink {
                let dw = cache.pooled.t().dot(dlogits);
                let mut gw = view2_mut(&mut grad.data, &wr, d, self.arch.vocab);
                gw += &dw;
                let gb = &mut grad.data[br];
                for (c, g) in gb.iter_mut().enumerate() {
                    *g += dlogits.column(c).sum();
                }
            }
        }
        let mut dlnf_out = Array2::zeros((rows, d));
        for i in 0..batch {
            for c in 0..d {
                let g = 0.5 * dpooled[[i, c]];
                dlnf_out[[2 * i, c]] = g;
                dlnf_out[[2 * i + 1, c]] = g;
            }
        }

        // Final layer norm.
        let lnf_gamma = self.layout.lnf_gamma.clone();
        let lnf_beta = self.layout.lnf_beta.clone();
        let mut dresid = {
            let gamma = params.data[lnf_gamma.clone()].to_vec();
            match sink {
                GradSink::Params(grad) => {
                    let (gslice, rest) = {
                        // Two disjoint borrows into the flat gradient.
                        let data = &mut grad.data;
                        let (a, b) = data.split_at_mut(lnf_beta.start);
                        (&mut a[lnf_gamma.clone()], &mut b[..lnf_beta.len()])
                    };
                    self.layer_norm_backward(&dlnf_out, &cache.lnf, &gamma, Some((gslice, rest)))
                }
                _ => self.layer_norm_backward(&dlnf_out, &cache.lnf, &gamma, None),
            }
        };

        // Layers in reverse.
        for l in (0..self.arch.n_layers).rev() {
            let lr = self.layout.layers[l].clone();
            let lc = &cache.layers[l];
            let layer_input: &Array2<f64> = if l == 0 {
                &cache.x0
            } else {
                &cache.layers[l - 1].resid2
            };

            // -- MLP block: resid2 = resid1 + W2·gelu(W1·ln2(resid1)+b1)+b2
            let dff_out = &dresid;
            let w2 = view2(&params.data, &lr.w_ff2, self.arch.d_ff, d);
            let dff_act = dff_out.dot(&w2.t());
            let mut dff_pre = dff_act;
            for (dp, fp) in dff_pre.iter_mut().zip(lc.ff_pre.iter()) {
                *dp *= gelu_prime(*fp);
            }
            if let GradSink::Params(grad) = sink {
                let dw2 = lc.ff_act.t().dot(dff_out);
                let mut g = view2_mut(&mut grad.data, &lr.w_ff2, self.arch.d_ff, d);
                g += &dw2;
                for (c, gb) in grad.data[lr.b_ff2.clone()].iter_mut().enumerate() {
                    *gb += dff_out.column(c).sum();
                }
                let dw1 = lc.ln2.out.t().dot(&dff_pre);
                let mut g = view2_mut(&mut grad.data, &lr.w_ff1, d, self.arch.d_ff);
                g += &dw1;
                for (c, gb) in grad.data[lr.b_ff1.clone()].iter_mut().enumerate() {
                    *gb += dff_pre.column(c).sum();
                }
            }
            let w1 = view2(&params.data, &lr.w_ff1, d, self.arch.d_ff);
            let dln2_out = dff_pre.dot(&w1.t());
            let gamma2 = params.data[lr.ln2_gamma.clone()].to_vec();
            let dresid1_ln = match sink {
                GradSink::Params(grad) => {
                    let data = &mut grad.data;
                    let (a, b) = data.split_at_mut(lr.ln2_beta.start);
                    self.layer_norm_backward(
                        &dln2_out,
                        &lc.ln2,
                        &gamma2,
                        Some((&mut a[lr.ln2_gamma.clone()], &mut b[..lr.ln2_beta.len()])),
                    )
                }
                _ => self.layer_norm_backward(&dln2_out, &lc.ln2, &gamma2, None),
            };
            let dresid1 = &dresid + &dresid1_ln;

            // -- Attention block: resid1 = x + Wo·attend(q,k,v)
            let dattn_out = &dresid1;
            let wo = view2(&params.data, &lr.wo, d, d);
            let dctx = dattn_out.dot(&wo.t());
            match sink {
                GradSink::Params(grad) => {
                    let dwo = lc.ctx.t().dot(dattn_out);
                    let mut g = view2_mut(&mut grad.data, &lr.wo, d, d);
                    g += &dwo;
                }
                GradSink::PerExampleAttention(per_ex) => {
                    accumulate_per_example(per_ex, self, l, 3, &lc.ctx, dattn_out);
                }
                GradSink::InputsOnly => {}
            }

            let mut dq = Array2::zeros((rows, d));
            let mut dk = Array2::zeros((rows, d));
            let mut dv = Array2::zeros((rows, d));
            for i in 0..batch {
                let (r0, r1) = (2 * i, 2 * i + 1);
                for h in 0..n_heads {
                    let base = h * hd;
                    let pbase = (i * n_heads + h) * 4;
                    let p = &lc.probs[pbase..pbase + 4];
                    // dprobs and dv from ctx = probs · v
                    let mut dprobs = [0.0f64; 4];
                    for c in 0..hd {
                        let d0 = dctx[[r0, base + c]];
                        let d1 = dctx[[r1, base + c]];
                        let v0 = lc.v[[r0, base + c]];
                        let v1 = lc.v[[r1, base + c]];
                        dprobs[0] += d0 * v0;
                        dprobs[1] += d0 * v1;
                        dprobs[2] += d1 * v0;
                        dprobs[3] += d1 * v1;
                        dv[[r0, base + c]] += p[0] * d0 + p[2] * d1;
                        dv[[r1, base + c]] += p[1] * d0 + p[3] * d1;
                    }
                    // softmax backward per query row, then score scale
                    let mut ds = [0.0f64; 4];
                    for row in 0..2 {
                        let (p0, p1) = (p[2 * row], p[2 * row + 1]);
                        let (g0, g1) = (dprobs[2 * row], dprobs[2 * row + 1]);
                        let inner = g0 * p0 + g1 * p1;
                        ds[2 * row] = p0 * (g0 - inner) * scale;
                        ds[2 * row + 1] = p1 * (g1 - inner) * scale;
                    }
                    // scores[r][c] = q_r · k_c
                    for c in 0..hd {
                        let k0 = lc.k[[r0, base + c]];
                        let k1 = lc.k[[r1, base + c]];
                        let q0 = lc.q[[r0, base + c]];
                        let q1 = lc.q[[r1, base + c]];
                        dq[[r0, base + c]] += ds[0] * k0 + ds[1] * k1;
                        dq[[r1, base + c]] += ds[2] * k0 + ds[3] * k1;
                        dk[[r0, base + c]] += ds[0] * q0 + ds[2] * q1;
                        dk[[r1, base + c]] += ds[1] * q0 + ds[3] * q1;
                    }
                }
            }

            match sink {
                GradSink::Params(grad) => {
                    let dwq = lc.ln1.out.t().dot(&dq);
                    let mut g = view2_mut(&mut grad.data, &lr.wq, d, d);
                    g += &dwq;
                    let dwk = lc.ln1.out.t().dot(&dk);
                    let mut g = view2_mut(&mut grad.data, &lr.wk, d, d);
                    g += &dwk;
                    let dwv = lc.ln1.out.t().dot(&dv);
                    let mut g = view2_mut(&mut grad.data, &lr.wv, d, d);
                    g += &dwv;
                }
                GradSink::PerExampleAttention(per_ex) => {
                    accumulate_per_example(per_ex, self, l, 0, &lc.ln1.out, &dq);
                    accumulate_per_example(per_ex, self, l, 1, &lc.ln1.out, &dk);
                    accumulate_per_example(per_ex, self, l, 2, &lc.ln1.out, &dv);
                }
                GradSink::InputsOnly => {}
            }

            let wq = view2(&params.data, &lr.wq, d, d);
            let wk = view2(&params.data, &lr.wk, d, d);
            let wv = view2(&params.data, &lr.wv, d, d);
            let dln1_out = dq.dot(&wq.t()) + dk.dot(&wk.t()) + dv.dot(&wv.t());
            let gamma1 = params.data[lr.ln1_gamma.clone()].to_vec();
            let dx_ln = match sink {
                GradSink::Params(grad) => {
                    let data = &mut grad.data;
                    let (a, b) = data.split_at_mut(lr.ln1_beta.start);
                    self.layer_norm_backward(
                        &dln1_out,
                        &lc.ln1,
                        &gamma1,
                        Some((&mut a[lr.ln1_gamma.clone()], &mut b[..lr.ln1_beta.len()])),
                    )
                }
                _ => self.layer_norm_backward(&dln1_out, &lc.ln1, &gamma1, None),
            };
            dresid = &dresid1 + &dx_ln;
            let _ = layer_input;
        }

        // Embedding gradients.
        if let GradSink::Params(grad) = sink {
            // Reconstruct token indices from x0 is impossible; the caller
            // passes pairs via the dedicated entry points below, which handle
            // embeddings. Here we only handle the positional sum.
            // (This branch is unreachable from public entry points; see
            // `loss_and_grads`.)
            let _ = grad;
        }

        let mut input_grads = Array2::zeros((batch, 2 * d));
        for i in 0..batch {
            for c in 0..d {
                input_grads[[i, c]] = dresid[[2 * i, c]];
                input_grads[[i, d + c]] = dresid[[2 * i + 1, c]];
            }
        }
        input_grads
    }

    /// Mean CE loss and full parameter gradient for one or more heads on one
    /// batch. The returned loss is the sum over the listed heads of each
    /// head's mean CE; the gradient matches it.
    pub fn loss_and_grads(
        &self,
        params: &ParamVector,
        batch: &Batch,
        heads: &[(usize, OpKind)],
    ) -> Result<(f64, Vec<f64>, ParamVector)> {
        let cache = self.forward(params, &batch.pairs)?;
        let mut dlogits_per_head = Vec::with_capacity(heads.len());
        let mut per_head_losses = Vec::with_capacity(heads.len());
        let mut total = 0.0;
        for &(head, op) in heads {
            let logits = self.logits(params, &cache, head);
            let labels = batch.labels(op);
            let loss = Self::mean_cross_entropy(&logits, labels);
            if !loss.is_finite() {
                return Err(Error::Model(format!("non-finite loss {loss}")));
            }
            per_head_losses.push(loss);
            total += loss;
            dlogits_per_head.push((head, Self::ce_dlogits(&logits, labels)));
        }
        let mut grad = ParamVector::zeros(self.layout.total_len());
        let input_grads = {
            let mut sink = GradSink::Params(&mut grad);
            self.backward(params, &cache, &dlogits_per_head, &mut sink)
        };
        self.accumulate_embedding_grads(&mut grad, &batch.pairs, &input_grads);
        Ok((total, per_head_losses, grad))
    }

    fn accumulate_embedding_grads(
        &self,
        grad: &mut ParamVector,
        pairs: &[(u8, u8)],
        input_grads: &Array2<f64>,
    ) {
        let d = self.arch.d_model;
        let tok_start = self.layout.tok_emb.start;
        let pos_start = self.layout.pos_emb.start;
        for (i, &(a, b)) in pairs.iter().enumerate() {
            for c in 0..d {
                grad.data[tok_start + a as usize * d + c] += input_grads[[i, c]];
                grad.data[tok_start + b as usize * d + c] += input_grads[[i, d + c]];
                grad.data[pos_start + c] += input_grads[[i, c]];
                grad.data[pos_start + d + c] += input_grads[[i, d + c]];
            }
        }
    }

    /// Convenience: loss and gradient for a single head.
    pub fn loss_and_param_grad(
        &self,
        params: &ParamVector,
        batch: &Batch,
        head: usize,
        op: OpKind,
    ) -> Result<(f64, ParamVector)> {
        let (loss, _, grad) = self.loss_and_grads(params, batch, &[(head, op)])?;
        Ok((loss, grad))
    }

    /// Loss only (used by finite-difference oracles).
    pub fn loss_only(
        &self,
        params: &ParamVector,
        batch: &Batch,
        heads: &[(usize, OpKind)],
    ) -> Result<f64> {
        let cache = self.forward(params, &batch.pairs)?;
        let mut total = 0.0;
        for &(head, op) in heads {
            let logits = self.logits(params, &cache, head);
            total += Self::mean_cross_entropy(&logits, batch.labels(op));
        }
        Ok(total)
    }

    /// Centroids: per-probe gradient of the true-label logit with respect to
    /// the embedded input, flattened to `R^{2·d_model}`. One row per probe.
    pub fn centroids(
        &self,
        params: &ParamVector,
        pairs: &[(u8, u8)],
        labels: &[u8],
        head: usize,
    ) -> Result<Array2<f64>> {
        let cache = self.forward(params, pairs)?;
        let n = pairs.len();
        let mut dlogits = Array2::zeros((n, self.arch.vocab));
        for i in 0..n {
            dlogits[[i, labels[i] as usize]] = 1.0;
        }
        let mut sink = GradSink::InputsOnly;
        let grads = self.backward(params, &cache, &[(head, dlogits)], &mut sink);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Model("non-finite centroid".into()));
        }
        Ok(grads)
    }

    /// Single-probe centroid.
    pub fn centroid(
        &self,
        params: &ParamVector,
        x: (u8, u8),
        label: u8,
        head: usize,
    ) -> Result<Vec<f64>> {
        let c = self.centroids(params, &[x], &[label], head)?;
        Ok(c.row(0).to_vec())
    }

    /// Per-example attention-slice gradients of the per-example CE loss
    /// (not mean-reduced): `batch × attn_len`.
    pub fn per_example_attention_grads(
        &self,
        params: &ParamVector,
        pairs: &[(u8, u8)],
        labels: &[u8],
        head: usize,
    ) -> Result<Array2<f64>> {
        let cache = self.forward(params, pairs)?;
        let logits = self.logits(params, &cache, head);
        let n = pairs.len();
        // Per-example loss: dlogits = softmax − onehot (no 1/n).
        let mut dlogits = Self::ce_dlogits(&logits, labels);
        dlogits *= n as f64;
        let mut per_ex = Array2::zeros((n, self.layout.attn_len()));
        {
            let mut sink = GradSink::PerExampleAttention(&mut per_ex);
            self.backward(params, &cache, &[(head, dlogits)], &mut sink);
        }
        Ok(per_ex)
    }

    /// Fraction of argmax-correct predictions.
    pub fn accuracy(
        &self,
        params: &ParamVector,
        pairs: &[(u8, u8)],
        labels: &[u8],
        head: usize,
    ) -> Result<f64> {
        let accs = self.accuracy_heads(params, pairs, &[(head, labels)])?;
        Ok(accs[0])
    }

    /// Accuracy of several heads over the same inputs with one encoder pass,
    /// evaluated in chunks to bound memory.
    pub fn accuracy_heads(
        &self,
        params: &ParamVector,
        pairs: &[(u8, u8)],
        head_labels: &[(usize, &[u8])],
    ) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Err(Error::Model("empty dataset".into()));
        }
        let mut correct = vec![0usize; head_labels.len()];
        const CHUNK: usize = 2048;
        let mut at = 0;
        while at < pairs.len() {
            let hi = (at + CHUNK).min(pairs.len());
            let cache = self.forward(params, &pairs[at..hi])?;
            for (slot, &(head, labels)) in head_labels.iter().enumerate() {
                let logits = self.logits(params, &cache, head);
                for i in 0..logits.nrows() {
                    let row = logits.row(i);
                    let row = row.as_slice().unwrap();
                    let mut best = 0usize;
                    for c in 1..row.len() {
                        if row[c] > row[best] {
                            best = c;
                        }
                    }
                    if best == labels[at + i] as usize {
                        correct[slot] += 1;
                    }
                }
            }
            at = hi;
        }
        Ok(correct
            .into_iter()
            .map(|c| c as f64 / pairs.len() as f64)
            .collect())
    }
}

/// Scatter one attention weight-matrix gradient per example:
/// `dW_ex = x_exᵀ · dy_ex` over the example's two rows, written at the slice
/// offset of matrix `which` (0..4 = q, k, v, o) of layer `l`.
fn accumulate_per_example(
    per_ex: &mut Array2<f64>,
    model: &Model,
    layer: usize,
    which: usize,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) {
    let d = model.arch.d_model;
    let mat_base = (layer * 4 + which) * d * d;
    let batch = per_ex.nrows();
    for i in 0..batch {
        let row = per_ex.row_mut(i);
        let row = row.into_slice().unwrap();
        for pos in 0..2 {
            let r = 2 * i + pos;
            let xr = x.row(r);
            let xr = xr.as_slice().unwrap();
            let dyr = dy.row(r);
            let dyr = dyr.as_slice().unwrap();
            for (in_dim, &xv) in xr.iter().enumerate() {
                if xv != 0.0 {
                    let dst = &mut row[mat_base + in_dim * d..mat_base + (in_dim + 1) * d];
                    for (dd, &g) in dst.iter_mut().zip(dyr) {
                        *dd += xv * g;
                    }
                }
            }
        }
    }
}
