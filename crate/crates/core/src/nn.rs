//! Layers with hand-written forward and backward passes.
//!
//! Each layer owns [`ParamId`]s into a [`ParamStore`]. `forward` reads the
//! store and returns its output plus a cache; `backward` consumes the cache
//! and the upstream gradient, accumulates parameter gradients into the store
//! and returns the gradient with respect to the layer input.
//!
//! Inputs are matrices `[rows x features]`; a sequence of `K` tokens is a
//! `K x d` matrix.

use crate::rng::SeededRng;
use crate::tensor::{
    axpy, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, shape_err, softmax_in_place, ParamId, ParamStore,
    Real, Tensor, TensorError,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters. Weights are Gaussian with the
/// given standard deviation; biases and layer-norm shifts start at zero and
/// layer-norm gains at one.
pub struct ParamInit<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut SeededRng,
    pub std: f64,
}

impl<F: Real> ParamInit<'_, F> {
    pub fn gaussian(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let t = Tensor::randn(shape, self.std, self.rng);
        self.store.insert(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::filled(shape, F::one()))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: self.gaussian(&format!("{name}.weight"), &[d_in, d_out]),
            bias: self.zeros(&format!("{name}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> LayerNorm {
        LayerNorm {
            gain: self.ones(&format!("{name}.gain"), &[d]),
            bias: self.zeros(&format!("{name}.bias"), &[d]),
            d,
        }
    }

    pub fn attention(&mut self, name: &str, d: usize, heads: usize) -> Attention {
        assert!(
            heads > 0 && d % heads == 0,
            "d={d} not divisible by heads={heads}"
        );
        Attention {
            query: self.linear(&format!("{name}.query"), d, d),
            key: self.linear(&format!("{name}.key"), d, d),
            value: self.linear(&format!("{name}.value"), d, d),
            output: self.linear(&format!("{name}.output"), d, d),
            heads,
            d,
        }
    }

    pub fn block(&mut self, name: &str, d: usize, heads: usize, d_ff: usize) -> TransformerBlock {
        TransformerBlock {
            ln_attn: self.layer_norm(&format!("{name}.ln_attn"), d),
            attn: self.attention(&format!("{name}.attn"), d, heads),
            ln_ff: self.layer_norm(&format!("{name}.ln_ff"), d),
            ff_in: self.linear(&format!("{name}.ff_in"), d, d_ff),
            ff_out: self.linear(&format!("{name}.ff_out"), d_ff, d),
        }
    }
}

/// `y = x W + b` with `W: [d_in x d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<Tensor<F>, TensorError> {
        if x.cols() != self.d_in {
            return Err(shape_err(
                "linear",
                format!("input width {} but layer expects {}", x.cols(), self.d_in),
            ));
        }
        let n = x.rows();
        let bias = store.value(self.bias).data();
        let mut y = Tensor::zeros(&[n, self.d_out]);
        for i in 0..n {
            y.row_mut(i).copy_from_slice(bias);
        }
        gemm_acc(
            n,
            self.d_in,
            self.d_out,
            x.data(),
            store.value(self.weight).data(),
            y.data_mut(),
        );
        Ok(y)
    }

    /// `x` is the forward input. Returns `dx`.
    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let n = x.rows();
        {
            let (_, db) = store.split(self.bias);
            for i in 0..n {
                axpy(F::one(), dy.row(i), db.data_mut());
            }
        }
        let (w, dw) = store.split(self.weight);
        gemm_at_b_acc(n, self.d_in, self.d_out, x.data(), dy.data(), dw.data_mut());
        let mut dx = Tensor::zeros(&[n, self.d_in]);
        gemm_a_bt_acc(n, self.d_in, self.d_out, dy.data(), w.data(), dx.data_mut());
        dx
    }

    /// Backward pass when the input gradient is not needed.
    pub fn backward_params_only<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        x: &Tensor<F>,
        dy: &Tensor<F>,
    ) {
        let n = x.rows();
        {
            let (_, db) = store.split(self.bias);
            for i in 0..n {
                axpy(F::one(), dy.row(i), db.data_mut());
            }
        }
        let (_, dw) = store.split(self.weight);
        gemm_at_b_acc(n, self.d_in, self.d_out, x.data(), dy.data(), dw.data_mut());
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    normalized: Tensor<F>,
    inv_std: Vec<F>,
}

/// Per-row layer normalization: `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &[F],
    bias: &[F],
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>), TensorError> {
    let d = x.cols();
    if d == 0 || gain.len() != d || bias.len() != d {
        return Err(shape_err(
            "layer_norm",
            format!("width {d}, gain {}, bias {}", gain.len(), bias.len()),
        ));
    }
    let n = x.len() / d;
    let inv_d = F::one() / F::lit(d as f64);
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        let row = &mut normalized.data_mut()[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let s = F::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv_std.push(s);
        let out = &mut y.data_mut()[i * d..(i + 1) * d];
        let row = &normalized.data()[i * d..(i + 1) * d];
        for j in 0..d {
            out[j] = row[j] * gain[j] + bias[j];
        }
    }
    Ok((
        y,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

impl LayerNorm {
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, LayerNormCache<F>), TensorError> {
        layer_norm(
            x,
            store.value(self.gain).data(),
            store.value(self.bias).data(),
            F::lit(LAYER_NORM_EPS),
        )
    }

    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &LayerNormCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let d = self.d;
        let n = dy.len() / d;
        let inv_d = F::one() / F::lit(d as f64);
        {
            let (_, dbias) = store.split(self.bias);
            for i in 0..n {
                axpy(F::one(), &dy.data()[i * d..(i + 1) * d], dbias.data_mut());
            }
        }
        let (gain, dgain) = store.split(self.gain);
        let gain = gain.data();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dxhat = vec![F::zero(); d];
        for i in 0..n {
            let xhat = &cache.normalized.data()[i * d..(i + 1) * d];
            let dyr = &dy.data()[i * d..(i + 1) * d];
            let dg = dgain.data_mut();
            for j in 0..d {
                dg[j] += dyr[j] * xhat[j];
                dxhat[j] = dyr[j] * gain[j];
            }
            let mean_dxhat = dxhat.iter().copied().sum::<F>() * inv_d;
            let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
            let s = cache.inv_std[i];
            let out = &mut dx.data_mut()[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.044_715;

/// Tanh-approximation GELU:
/// `gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    half * x * (F::one() + (k * (x + F::lit(GELU_C) * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::lit(0.5);
    let c = F::lit(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x)
}

/// Multi-head scaled dot-product self-attention without positional terms.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    input: Tensor<F>,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    /// One `K x K` row-stochastic matrix per head.
    pub weights: Vec<Tensor<F>>,
    context: Tensor<F>,
}

/// Copies columns `[h*dh, (h+1)*dh)` of `x` into a contiguous `n x dh` buffer.
fn head_slice<F: Real>(x: &Tensor<F>, h: usize, dh: usize) -> Vec<F> {
    let n = x.rows();
    let d = x.cols();
    let mut out = Vec::with_capacity(n * dh);
    for i in 0..n {
        out.extend_from_slice(&x.data()[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn head_scatter_add<F: Real>(dst: &mut Tensor<F>, src: &[F], h: usize, dh: usize) {
    let d = dst.cols();
    let n = dst.rows();
    for i in 0..n {
        let row = &mut dst.data_mut()[i * d + h * dh..i * d + (h + 1) * dh];
        axpy(F::one(), &src[i * dh..(i + 1) * dh], row);
    }
}

impl Attention {
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, AttentionCache<F>), TensorError> {
        if x.cols() != self.d || self.d % self.heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!(
                    "input width {} model dim {} heads {}",
                    x.cols(),
                    self.d,
                    self.heads
                ),
            ));
        }
        let n = x.rows();
        let dh = self.d / self.heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let q = self.query.forward(store, x)?;
        let k = self.key.forward(store, x)?;
        let v = self.value.forward(store, x)?;
        let mut context = Tensor::zeros(&[n, self.d]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let mut scores = Tensor::zeros(&[n, n]);
            gemm_a_bt_acc(n, n, dh, &qh, &kh, scores.data_mut());
            for row in scores.data_mut().chunks_mut(n) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_in_place(row);
            }
            let mut ctx = vec![F::zero(); n * dh];
            gemm_acc(n, n, dh, scores.data(), &vh, &mut ctx);
            head_scatter_add(&mut context, &ctx, h, dh);
            weights.push(scores);
        }
        let out = self.output.forward(store, &context)?;
        Ok((
            out,
            AttentionCache {
                input: x.clone(),
                q,
                k,
                v,
                weights,
                context,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &AttentionCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let n = cache.input.rows();
        let dh = self.d / self.heads;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let dcontext = self.output.backward(store, &cache.context, dy);
        let mut dq = Tensor::zeros(&[n, self.d]);
        let mut dk = Tensor::zeros(&[n, self.d]);
        let mut dv = Tensor::zeros(&[n, self.d]);
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = head_slice(&cache.q, h, dh);
            let kh = head_slice(&cache.k, h, dh);
            let vh = head_slice(&cache.v, h, dh);
            let dctx = head_slice(&dcontext, h, dh);
            // ctx = A V
            let mut da = Tensor::zeros(&[n, n]);
            gemm_a_bt_acc(n, n, dh, &dctx, &vh, da.data_mut());
            let mut dvh = vec![F::zero(); n * dh];
            gemm_at_b_acc(n, n, dh, a.data(), &dctx, &mut dvh);
            // A = softmax(S), S = scale * Q K^T
            let mut ds = crate::tensor::softmax_rows_backward(a, &da);
            ds.scale(scale);
            let mut dqh = vec![F::zero(); n * dh];
            gemm_acc(n, n, dh, ds.data(), &kh, &mut dqh);
            let mut dkh = vec![F::zero(); n * dh];
            gemm_at_b_acc(n, n, dh, ds.data(), &qh, &mut dkh);
            head_scatter_add(&mut dq, &dqh, h, dh);
            head_scatter_add(&mut dk, &dkh, h, dh);
            head_scatter_add(&mut dv, &dvh, h, dh);
        }
        let mut dx = self.query.backward(store, &cache.input, &dq);
        dx.add_assign(&self.key.backward(store, &cache.input, &dk))
            .expect("same shape");
        dx.add_assign(&self.value.backward(store, &cache.input, &dv))
            .expect("same shape");
        dx
    }
}

/// Functional form of [`Attention::forward`] returning only the output.
pub fn multi_head_attention<F: Real>(
    x: &Tensor<F>,
    store: &ParamStore<F>,
    attn: &Attention,
) -> Result<Tensor<F>, TensorError> {
    attn.forward(store, x).map(|(y, _)| y)
}

/// Pre-norm transformer layer:
/// `h = x + Attn(LN(x))`, `y = h + W2 gelu(W1 LN(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln_attn: LayerNormCache<F>,
    attn: AttentionCache<F>,
    ln_ff: LayerNormCache<F>,
    ff_input: Tensor<F>,
    ff_pre: Tensor<F>,
    ff_act: Tensor<F>,
}

impl<F: Real> BlockCache<F> {
    pub fn attention_weights(&self) -> &[Tensor<F>] {
        &self.attn.weights
    }
}

impl TransformerBlock {
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Tensor<F>,
    ) -> Result<(Tensor<F>, BlockCache<F>), TensorError> {
        let (xn, ln_attn) = self.ln_attn.forward(store, x)?;
        let (a, attn) = self.attn.forward(store, &xn)?;
        let mut h = x.clone();
        h.add_assign(&a)?;
        let (hn, ln_ff) = self.ln_ff.forward(store, &h)?;
        let ff_pre = self.ff_in.forward(store, &hn)?;
        let mut ff_act = ff_pre.clone();
        ff_act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let f = self.ff_out.forward(store, &ff_act)?;
        let mut y = h;
        y.add_assign(&f)?;
        Ok((
            y,
            BlockCache {
                ln_attn,
                attn,
                ln_ff,
                ff_input: hn,
                ff_pre,
                ff_act,
            },
        ))
    }

    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &BlockCache<F>,
        dy: &Tensor<F>,
    ) -> Tensor<F> {
        let mut dact = self.ff_out.backward(store, &cache.ff_act, dy);
        for (g, &pre) in dact.data_mut().iter_mut().zip(cache.ff_pre.data()) {
            *g *= gelu_grad(pre);
        }
        let dhn = self.ff_in.backward(store, &cache.ff_input, &dact);
        let mut dh = self.ln_ff.backward(store, &cache.ln_ff, &dhn);
        dh.add_assign(dy).expect("same shape");
        let dxn = self.attn.backward(store, &cache.attn, &dh);
        let mut dx = self.ln_attn.backward(store, &cache.ln_attn, &dxn);
        dx.add_assign(&dh).expect("same shape");
        dx
    }
}

/// Stack of transformer blocks followed by a final layer norm and mean pooling
/// over rows. Used by both the text encoder and the knowledge encoder.
#[derive(Debug, Clone)]
pub struct PooledEncoder {
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PooledEncoderCache<F> {
    pub blocks: Vec<BlockCache<F>>,
    ln_final: LayerNormCache<F>,
    rows: usize,
}

impl PooledEncoder {
    /// Returns the mean-pooled `[1 x d]` representation.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: Tensor<F>,
    ) -> Result<(Tensor<F>, PooledEncoderCache<F>), TensorError> {
        let rows = x.rows();
        let mut h = x;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, c) = block.forward(store, &h)?;
            caches.push(c);
            h = next;
        }
        let (hn, ln_final) = self.ln_final.forward(store, &h)?;
        let d = hn.cols();
        let mut pooled = Tensor::zeros(&[1, d]);
        let inv = F::one() / F::lit(rows as f64);
        for i in 0..rows {
            axpy(inv, hn.row(i), pooled.data_mut());
        }
        Ok((
            pooled,
            PooledEncoderCache {
                blocks: caches,
                ln_final,
                rows,
            },
        ))
    }

    /// `dpooled` is `[1 x d]`; returns the gradient for the `rows x d` input.
    pub fn backward<F: Real>(
        &self,
        store: &mut ParamStore<F>,
        cache: &PooledEncoderCache<F>,
        dpooled: &Tensor<F>,
    ) -> Tensor<F> {
        let d = dpooled.cols();
        let inv = F::one() / F::lit(cache.rows as f64);
        let mut dhn = Tensor::zeros(&[cache.rows, d]);
        for i in 0..cache.rows {
            axpy(inv, dpooled.data(), dhn.row_mut(i));
        }
        let mut dh = self.ln_final.backward(store, &cache.ln_final, &dhn);
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = block.backward(store, c, &dh);
        }
        dh
    }
}
