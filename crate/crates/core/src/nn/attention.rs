use rand_chacha::ChaCha8Rng;

use super::layers::{Activation, LayerNorm, LayerNormCache, Linear};
use super::params::{NetParams, ParamId};
use super::tensor::{matmul, matmul_nt, matmul_tn, softmax_rows, Tensor};
use crate::error::{Error, Result};

/// Multi-head scaled dot-product attention with per-head slices of full-width
/// projections `W^Q`, `W^K`, `W^V` and an output projection `W^O`.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub width: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    weights: Vec<Tensor>,
    concat: Tensor,
}

impl AttentionCache {
    /// Softmax weights of head `h`, `[queries, keys]`.
    pub fn weights(&self, h: usize) -> &Tensor {
        &self.weights[h]
    }
}

/// Gradients with respect to the three attention inputs.
pub struct AttentionGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
        }
        let mut mk = |s: &str| p.add_uniform(&format!("{name}.{s}"), group, &[width, width], width, rng);
        Ok(Self {
            wq: mk("wq")?,
            wk: mk("wk")?,
            wv: mk("wv")?,
            wo: mk("wo")?,
            width,
            heads,
        })
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward(
        &self,
        p: &NetParams,
        q_in: &Tensor,
        k_in: &Tensor,
        v_in: &Tensor,
    ) -> Result<(Tensor, AttentionCache)> {
        let (_, dq) = q_in.dims2()?;
        let (nk, dk) = k_in.dims2()?;
        let (nv, dv) = v_in.dims2()?;
        if dq != self.width || dk != self.width || dv != self.width || nk != nv || nk == 0 {
            return Err(Error::Shape(format!(
                "attention inputs {:?} {:?} {:?} for width {}",
                q_in.shape(),
                k_in.shape(),
                v_in.shape(),
                self.width
            )));
        }
        let q = matmul(q_in, p.value(self.wq))?;
        let k = matmul(k_in, p.value(self.wk))?;
        let v = matmul(v_in, p.value(self.wv))?;
        let hw = self.head_width();
        let scale = 1.0 / (hw as f64).sqrt();
        let mut concat = Tensor::zeros(&[q.dims2()?.0, self.width]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.columns(h * hw, hw)?;
            let kh = k.columns(h * hw, hw)?;
            let vh = v.columns(h * hw, hw)?;
            let a = softmax_rows(&matmul_nt(&qh, &kh)?.scale(scale))?;
            concat.set_columns(h * hw, &matmul(&a, &vh)?)?;
            weights.push(a);
        }
        let out = matmul(&concat, p.value(self.wo))?;
        Ok((
            out,
            AttentionCache {
                q_in: q_in.clone(),
                k_in: k_in.clone(),
                v_in: v_in.clone(),
                q,
                k,
                v,
                weights,
                concat,
            },
        ))
    }

    pub fn backward(
        &self,
        p: &mut NetParams,
        cache: &AttentionCache,
        dout: &Tensor,
        param_grads: bool,
    ) -> Result<AttentionGrads> {
        let hw = self.head_width();
        let scale = 1.0 / (hw as f64).sqrt();
        let dconcat = matmul_nt(dout, p.value(self.wo))?;
        let mut dq = Tensor::zeros(cache.q.shape());
        let mut dk = Tensor::zeros(cache.k.shape());
        let mut dv = Tensor::zeros(cache.v.shape());
        for h in 0..self.heads {
            let a = &cache.weights[h];
            let qh = cache.q.columns(h * hw, hw)?;
            let kh = cache.k.columns(h * hw, hw)?;
            let vh = cache.v.columns(h * hw, hw)?;
            let doh = dconcat.columns(h * hw, hw)?;
            let da = matmul_nt(&doh, &vh)?;
            dv.set_columns(h * hw, &matmul_tn(a, &doh)?)?;
            let (rows, cols) = a.dims2()?;
            let mut ds = vec![0.0; rows * cols];
            for i in 0..rows {
                let ar = a.row(i);
                let dar = da.row(i);
                let dot: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for j in 0..cols {
                    ds[i * cols + j] = ar[j] * (dar[j] - dot) * scale;
                }
            }
            let ds = Tensor::new(&[rows, cols], ds)?;
            dq.set_columns(h * hw, &matmul(&ds, &kh)?)?;
            dk.set_columns(h * hw, &matmul_tn(&ds, &qh)?)?;
        }
        if param_grads {
            p.accumulate(self.wo, &matmul_tn(&cache.concat, dout)?)?;
            p.accumulate(self.wq, &matmul_tn(&cache.q_in, &dq)?)?;
            p.accumulate(self.wk, &matmul_tn(&cache.k_in, &dk)?)?;
            p.accumulate(self.wv, &matmul_tn(&cache.v_in, &dv)?)?;
        }
        Ok(AttentionGrads {
            dq: matmul_nt(&dq, p.value(self.wq))?,
            dk: matmul_nt(&dk, p.value(self.wk))?,
            dv: matmul_nt(&dv, p.value(self.wv))?,
        })
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

impl Mlp {
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(p, &format!("{name}.fc1"), group, width, hidden, true, rng)?,
            fc2: Linear::new(p, &format!("{name}.fc2"), group, hidden, width, true, rng)?,
        })
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        let pre = self.fc1.forward(p, x)?;
        let hidden = Activation::Gelu.forward(&pre);
        let y = self.fc2.forward(p, &hidden)?;
        Ok((
            y,
            MlpCache {
                x: x.clone(),
                pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, p: &mut NetParams, c: &MlpCache, dy: &Tensor, param_grads: bool) -> Result<Tensor> {
        let dh = if param_grads {
            self.fc2.backward(p, &c.hidden, dy)?
        } else {
            self.fc2.backward_input(p, dy)?
        };
        let dpre = Activation::Gelu.backward(&c.pre, &dh)?;
        if param_grads {
            self.fc1.backward(p, &c.x, &dpre)
        } else {
            self.fc1.backward_input(p, &dpre)
        }
    }
}

/// Pre-norm transformer block: `x += MSA(LN(x)); x += MLP(LN(x))`.
#[derive(Clone, Copy, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttentionCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        width: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), group, width)?,
            attn: MultiHeadAttention::new(p, &format!("{name}.attn"), group, width, heads, rng)?,
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), group, width)?,
            mlp: Mlp::new(p, &format!("{name}.mlp"), group, width, mlp_hidden, rng)?,
        })
    }

    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (h1, ln1) = self.ln1.forward(p, x)?;
        let (a, attn) = self.attn.forward(p, &h1, &h1, &h1)?;
        let x1 = x.add(&a)?;
        let (h2, ln2) = self.ln2.forward(p, &x1)?;
        let (m, mlp) = self.mlp.forward(p, &h2)?;
        let x2 = x1.add(&m)?;
        Ok((x2, BlockCache { ln1, attn, ln2, mlp }))
    }

    pub fn backward(&self, p: &mut NetParams, c: &BlockCache, dy: &Tensor, param_grads: bool) -> Result<Tensor> {
        let dh2 = self.mlp.backward(p, &c.mlp, dy, param_grads)?;
        let dx1 = dy.add(&self.ln2.backward(p, &c.ln2, &dh2, param_grads)?)?;
        let g = self.attn.backward(p, &c.attn, &dx1, param_grads)?;
        let dh1 = g.dq.add(&g.dk)?.add(&g.dv)?;
        dx1.add(&self.ln1.backward(p, &c.ln1, &dh1, param_grads)?)
    }
}

/// Stack of transformer blocks over a token sequence `[tokens, width]`.
#[derive(Clone, Debug)]
pub struct LayerStack {
    pub blocks: Vec<TransformerBlock>,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct StackCache {
    blocks: Vec<BlockCache>,
}

impl LayerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p: &mut NetParams,
        name: &str,
        group: &str,
        depth: usize,
        width: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(p, &format!("{name}.{i}"), group, width, heads, mlp_hidden, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, width })
    }

    /// Output plus the activation after every block.
    pub fn forward(&self, p: &NetParams, x: &Tensor) -> Result<(Tensor, Vec<Tensor>, StackCache)> {
        if x.dims2()?.1 != self.width {
            return Err(Error::Shape(format!("tokens {:?} for width {}", x.shape(), self.width)));
        }
        let mut h = x.clone();
        let mut hidden = Vec::with_capacity(self.blocks.len());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h)?;
            hidden.push(y.clone());
            caches.push(c);
            h = y;
        }
        Ok((h, hidden, StackCache { blocks: caches }))
    }

    pub fn backward(&self, p: &mut NetParams, c: &StackCache, dy: &Tensor, param_grads: bool) -> Result<Tensor> {
        let mut g = dy.clone();
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            g = b.backward(p, bc, &g, param_grads)?;
        }
        Ok(g)
    }

    /// Zero `W^O` and the second MLP layer so every block reduces to its residual path.
    pub fn zero_output_projections(&self, p: &mut NetParams) -> Result<()> {
        for b in &self.blocks {
            let mut ids = vec![b.attn.wo, b.mlp.fc2.w];
            ids.extend(b.mlp.fc2.b);
            for id in ids {
                let z = Tensor::zeros(p.value(id).shape());
                p.set_value(id, z)?;
            }
        }
        Ok(())
    }
}

/// Convenience wrapper returning the output and per-block hidden activations.
pub fn layer_stack_forward(stack: &LayerStack, p: &NetParams, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (y, hidden, _) = stack.forward(p, x)?;
    Ok((y, hidden))
}

/// Single attention call with fresh parameters already registered in `p`.
pub fn multi_head_attention(
    attn: &MultiHeadAttention,
    p: &NetParams,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    attn.forward(p, q, k, v).map(|(o, _)| o)
}
