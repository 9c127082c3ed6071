//! Transformer machinery shared by the structure predictor and the
//! sub-generators: scaled dot-product attention, multi-head attention with
//! per-head projections, and the two-sublayer conditional block.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Linear map `x·W + b` with `W: [in, out]`, `b: [out]`.
pub struct Linear<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: init_param(rng, &[fan_in, fan_out], std),
            bias: Tensor::param(&[fan_out], vec![S::zero(); fan_out]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Gain/bias pair for layer normalization over the last axis.
pub struct LayerNorm<S: Scalar> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::param(&[dim], vec![S::one(); dim]),
            bias: Tensor::param(&[dim], vec![S::zero(); dim]),
            eps: S::from_f64_c(1e-5),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

pub fn init_param<S: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::new(0.0, std).unwrap();
    let data: Vec<S> = (0..shape.iter().product())
        .map(|_| S::from_f64_c(dist.sample(rng)))
        .collect();
    Tensor::param(shape, data)
}

/// Additive causal mask: `[seq, seq]` with a large negative constant above
/// the diagonal so position `t` only attends to positions `<= t`.
pub fn causal_mask<S: Scalar>(seq: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); seq * seq];
    for i in 0..seq {
        for j in (i + 1)..seq {
            data[i * seq + j] = S::neg_mask();
        }
    }
    Tensor::from_vec(&[seq, seq], data)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k + mask)·V`.
pub fn attention<S: Scalar>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    mask: Option<&Tensor<S>>,
) -> Result<Tensor<S>> {
    let dq = q.shape();
    let dk = k.shape();
    if dq.last() != dk.last() {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            lhs: dq,
            rhs: dk,
        });
    }
    let scale = S::one() / S::from_usize(*dq.last().unwrap()).unwrap().sqrt();
    let mut scores = q.matmul(&k.transpose())?.scale(scale);
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    scores.softmax().matmul(v)
}

/// One attention head's projections.
pub struct AttentionHead<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
}

/// Multi-head attention with per-head Q/K/V projections and an output
/// projection from the concatenated heads back to the model dimension.
pub struct MultiHeadAttention<S: Scalar> {
    pub heads: Vec<AttentionHead<S>>,
    pub wo: Tensor<S>,
    pub d_k: usize,
}

impl<S: Scalar> MultiHeadAttention<S> {
    pub fn new<R: Rng>(rng: &mut R, hidden: usize, n_head: usize) -> Self {
        assert_eq!(
            hidden % n_head,
            0,
            "hidden size {hidden} not divisible by {n_head} heads"
        );
        let d_k = hidden / n_head;
        let std = 1.0 / (hidden as f64).sqrt();
        let heads = (0..n_head)
            .map(|_| AttentionHead {
                wq: init_param(rng, &[hidden, d_k], std),
                wk: init_param(rng, &[hidden, d_k], std),
                wv: init_param(rng, &[hidden, d_k], std),
            })
            .collect();
        MultiHeadAttention {
            heads,
            wo: init_param(rng, &[hidden, hidden], std),
            d_k,
        }
    }

    pub fn forward(
        &self,
        x_q: &Tensor<S>,
        x_kv: &Tensor<S>,
        mask: Option<&Tensor<S>>,
    ) -> Result<Tensor<S>> {
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = x_q.matmul(&head.wq)?;
            let k = x_kv.matmul(&head.wk)?;
            let v = x_kv.matmul(&head.wv)?;
            outs.push(attention(&q, &k, &v, mask)?);
        }
        Tensor::concat_cols(&outs)?.matmul(&self.wo)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        for (i, h) in self.heads.iter().enumerate() {
            out.push((format!("{prefix}.head{i}.wq"), h.wq.clone()));
            out.push((format!("{prefix}.head{i}.wk"), h.wk.clone()));
            out.push((format!("{prefix}.head{i}.wv"), h.wv.clone()));
        }
        out.push((format!("{prefix}.wo"), self.wo.clone()));
    }
}

/// Two-sublayer conditional transformer block: causal (optional) self
/// attention, cross attention over the conditional memory, then a
/// position-wise feed-forward. Residual + post-norm around each sublayer.
pub struct TransformerBlock<S: Scalar> {
    pub self_attn: MultiHeadAttention<S>,
    pub cross_attn: MultiHeadAttention<S>,
    pub ff1: Linear<S>,
    pub ff2: Linear<S>,
    pub ln1: LayerNorm<S>,
    pub ln2: LayerNorm<S>,
    pub ln3: LayerNorm<S>,
}

/// Block output plus the normed cross-attention sublayer activations, which
/// the structure predictor exposes as per-position phase vectors.
pub struct BlockOutput<S: Scalar> {
    pub out: Tensor<S>,
    pub cross: Tensor<S>,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn new<R: Rng>(rng: &mut R, hidden: usize, n_head: usize) -> Self {
        TransformerBlock {
            self_attn: MultiHeadAttention::new(rng, hidden, n_head),
            cross_attn: MultiHeadAttention::new(rng, hidden, n_head),
            ff1: Linear::new(rng, hidden, hidden * 4),
            ff2: Linear::new(rng, hidden * 4, hidden),
            ln1: LayerNorm::new(hidden),
            ln2: LayerNorm::new(hidden),
            ln3: LayerNorm::new(hidden),
        }
    }

    pub fn forward(
        &self,
        z: &Tensor<S>,
        cond: &Tensor<S>,
        causal: bool,
    ) -> Result<BlockOutput<S>> {
        let mask = if causal {
            Some(causal_mask::<S>(z.shape()[0]))
        } else {
            None
        };
        let sa = self.self_attn.forward(z, z, mask.as_ref())?;
        let h_self = self.ln1.forward(&z.add(&sa)?)?;
        let ca = self.cross_attn.forward(&h_self, cond, None)?;
        let h_cond = self.ln2.forward(&h_self.add(&ca)?)?;
        let ff = self.ff2.forward(&self.ff1.forward(&h_cond)?.silu())?;
        let out = self.ln3.forward(&h_cond.add(&ff)?)?;
        Ok(BlockOutput { out, cross: h_cond })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.self_attn.collect_params(&format!("{prefix}.self_attn"), out);
        self.cross_attn.collect_params(&format!("{prefix}.cross_attn"), out);
        self.ff1.collect_params(&format!("{prefix}.ff1"), out);
        self.ff2.collect_params(&format!("{prefix}.ff2"), out);
        self.ln1.collect_params(&format!("{prefix}.ln1"), out);
        self.ln2.collect_params(&format!("{prefix}.ln2"), out);
        self.ln3.collect_params(&format!("{prefix}.ln3"), out);
    }
}
