//! Sub-generator output component: phase-aware feature fusion (cat and attn
//! modes), the position classifier, and N sub-generators sharing trunk
//! blocks with per-generator independent blocks.

use rand::Rng;

use crate::config::FusionMode;
use crate::corpus::{END, EOPHASE, START};
use crate::nn::{init_param, Linear, TransformerBlock};
use crate::tensor::{Reduction, Result, Scalar, Tensor, TensorError};

/// Fused conditional input for one sub-generator.
pub struct PhaseAwareFeature<S: Scalar> {
    pub mode: FusionMode,
    /// `[4, H]` memory rows fed to cross-attention: image, ingredient,
    /// position, and phase sources kept as separate rows.
    pub rows: Tensor<S>,
    /// `[1, H]` projection of the fused constituents; input of the position
    /// classifier.
    pub pooled: Tensor<S>,
}

/// Fusion parameters for both modes.
pub struct FusionParams<S: Scalar> {
    /// cat mode: projection of the `[1, 4H]` concatenation to H.
    cat_proj: Linear<S>,
    /// attn mode: query maps from cat(F_pos, F_phase) for image/ingredient rows.
    w1: Linear<S>,
    w2: Linear<S>,
    /// attn mode: projection of cat(F_img_attn, F_ingr_attn) to H.
    attn_proj: Linear<S>,
}

impl<S: Scalar> FusionParams<S> {
    pub fn new<R: Rng>(rng: &mut R, hidden: usize) -> Self {
        FusionParams {
            cat_proj: Linear::new(rng, 4 * hidden, hidden),
            w1: Linear::new(rng, 2 * hidden, hidden),
            w2: Linear::new(rng, 2 * hidden, hidden),
            attn_proj: Linear::new(rng, 2 * hidden, hidden),
        }
    }

    /// Concatenation fusion: `⟨F_img, F_ingr, F_pos, F_phase⟩` (pooled rows)
    /// joined on the feature axis and projected to H.
    pub fn fuse_cat(
        &self,
        f_img: &Tensor<S>,
        f_ingr: &Tensor<S>,
        f_pos: &Tensor<S>,
        f_phase: &Tensor<S>,
    ) -> Result<PhaseAwareFeature<S>> {
        let pre = Tensor::concat_cols(&[
            f_img.clone(),
            f_ingr.clone(),
            f_pos.clone(),
            f_phase.clone(),
        ])?;
        let pooled = self.cat_proj.forward(&pre)?;
        let rows = Tensor::concat_rows(&[
            f_img.clone(),
            f_ingr.clone(),
            f_pos.clone(),
            f_phase.clone(),
        ])?;
        Ok(PhaseAwareFeature {
            mode: FusionMode::Cat,
            rows,
            pooled,
        })
    }

    /// Attention fusion: cat(F_pos, F_phase) is projected into a query that
    /// attends over image rows (W_1) and ingredient rows (W_2); the attended
    /// outputs are concatenated and projected to H.
    pub fn fuse_attn(
        &self,
        f_img_seq: &Tensor<S>,
        f_ingr_seq: &Tensor<S>,
        f_pos: &Tensor<S>,
        f_phase: &Tensor<S>,
    ) -> Result<PhaseAwareFeature<S>> {
        if f_img_seq.shape()[0] == 0 || f_ingr_seq.shape()[0] == 0 {
            return Err(TensorError::BadShape {
                op: "fuse_attn",
                expected: "non-empty feature sequences".into(),
                got: vec![f_img_seq.shape()[0], f_ingr_seq.shape()[0]],
            });
        }
        let pp = Tensor::concat_cols(&[f_pos.clone(), f_phase.clone()])?;
        let img_attn = attend_rows(&self.w1.forward(&pp)?, f_img_seq)?;
        let ingr_attn = attend_rows(&self.w2.forward(&pp)?, f_ingr_seq)?;
        let pooled = self
            .attn_proj
            .forward(&Tensor::concat_cols(&[img_attn.clone(), ingr_attn.clone()])?)?;
        let rows = Tensor::concat_rows(&[img_attn, ingr_attn, f_pos.clone(), f_phase.clone()])?;
        Ok(PhaseAwareFeature {
            mode: FusionMode::Attn,
            rows,
            pooled,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.cat_proj.collect_params(&format!("{prefix}.cat_proj"), out);
        self.w1.collect_params(&format!("{prefix}.w1"), out);
        self.w2.collect_params(&format!("{prefix}.w2"), out);
        self.attn_proj.collect_params(&format!("{prefix}.attn_proj"), out);
    }
}

/// Softmax-weighted combination of `rows` with weights from `query · rowᵀ`.
fn attend_rows<S: Scalar>(query: &Tensor<S>, rows: &Tensor<S>) -> Result<Tensor<S>> {
    let scale = S::one() / S::from_usize(rows.shape()[1]).unwrap().sqrt();
    let scores = query.matmul(&rows.transpose())?.scale(scale);
    scores.softmax().matmul(rows)
}

/// One-hot phase-position vector projected to H.
pub struct PositionEncoder<S: Scalar> {
    pub max_phases: usize,
    proj: Linear<S>,
}

impl<S: Scalar> PositionEncoder<S> {
    pub fn new<R: Rng>(rng: &mut R, max_phases: usize, hidden: usize) -> Self {
        PositionEncoder {
            max_phases,
            proj: Linear::new(rng, max_phases, hidden),
        }
    }

    pub fn forward(&self, phase_index: usize) -> Result<Tensor<S>> {
        assert!(phase_index < self.max_phases, "phase index out of range");
        let mut one_hot = vec![S::zero(); self.max_phases];
        one_hot[phase_index] = S::one();
        self.proj.forward(&Tensor::from_vec(&[1, self.max_phases], one_hot))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

/// Linear + softmax head verifying that the fused feature carries phase
/// position information.
pub struct PositionClassifier<S: Scalar> {
    head: Linear<S>,
}

impl<S: Scalar> PositionClassifier<S> {
    pub fn new<R: Rng>(rng: &mut R, hidden: usize, max_phases: usize) -> Self {
        PositionClassifier {
            head: Linear::new(rng, hidden, max_phases),
        }
    }

    pub fn logits(&self, pooled_r: &Tensor<S>) -> Result<Tensor<S>> {
        self.head.forward(pooled_r)
    }

    pub fn loss(&self, pooled_r: &Tensor<S>, phase_index: usize) -> Result<Tensor<S>> {
        self.logits(pooled_r)?
            .cross_entropy(&[phase_index], Reduction::Sum)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.head.collect_params(&format!("{prefix}.head"), out);
    }
}

/// N sub-generators: a shared trunk of transformer blocks followed by
/// per-generator independent blocks, with a common token embedding and
/// output head.
pub struct GeneratorEnsemble<S: Scalar> {
    pub n_generators: usize,
    pub vocab_size: usize,
    token_embedding: Tensor<S>,
    token_position: Tensor<S>,
    shared: Vec<TransformerBlock<S>>,
    independent: Vec<Vec<TransformerBlock<S>>>,
    output: Linear<S>,
    max_positions: usize,
}

impl<S: Scalar> GeneratorEnsemble<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        hidden: usize,
        n_head: usize,
        n_shared: usize,
        n_indep: usize,
        n_generators: usize,
        max_positions: usize,
    ) -> Self {
        GeneratorEnsemble {
            n_generators,
            vocab_size,
            token_embedding: init_param(rng, &[vocab_size, hidden], 0.1),
            token_position: init_param(rng, &[max_positions, hidden], 0.1),
            shared: (0..n_shared)
                .map(|_| TransformerBlock::new(rng, hidden, n_head))
                .collect(),
            independent: (0..n_generators)
                .map(|_| {
                    (0..n_indep)
                        .map(|_| TransformerBlock::new(rng, hidden, n_head))
                        .collect()
                })
                .collect(),
            output: Linear::new(rng, hidden, vocab_size),
            max_positions,
        }
    }

    /// Causal forward of `tokens` (starting with `[START]`) through the
    /// shared trunk and generator `g_id`'s independent blocks, cross-attending
    /// over the fused memory `r`. Returns one logits row per input position.
    pub fn forward(&self, g_id: usize, tokens: &[usize], r: &Tensor<S>) -> Result<Tensor<S>> {
        if g_id >= self.n_generators {
            return Err(TensorError::TargetOutOfRange {
                index: g_id,
                vocab: self.n_generators,
            });
        }
        let capped = &tokens[..tokens.len().min(self.max_positions)];
        let emb = self.token_embedding.embedding(capped)?;
        let pos: Vec<usize> = (0..capped.len()).collect();
        let mut h = emb.add(&self.token_position.embedding(&pos)?)?;
        for block in self.shared.iter().chain(&self.independent[g_id]) {
            h = block.forward(&h, r, true)?.out;
        }
        self.output.forward(&h)
    }

    /// Sum of per-position cross-entropies for one phase.
    pub fn generation_loss(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        logits.cross_entropy(targets, Reduction::Sum)
    }

    /// Greedy decode until `[EOPHASE]`/`[END]` or `max_tokens`, continuing
    /// the recipe after `prefix` (the earlier phases' tokens, which the
    /// decoder sees through causal self-attention). Returns the newly
    /// emitted token ids without the terminator.
    pub fn decode_phase(
        &self,
        g_id: usize,
        prefix: &[usize],
        r: &Tensor<S>,
        max_tokens: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = Vec::with_capacity(prefix.len() + 1 + max_tokens);
        tokens.push(START);
        tokens.extend_from_slice(prefix);
        let mut out = Vec::new();
        while out.len() < max_tokens && tokens.len() < self.max_positions {
            let logits = self.forward(g_id, &tokens, r)?;
            let shape = logits.shape();
            let data = logits.data();
            let last = &data[(shape[0] - 1) * shape[1]..];
            let mut best = 0;
            for (i, v) in last.iter().enumerate() {
                if *v > last[best] {
                    best = i;
                }
            }
            if best == EOPHASE || best == END {
                break;
            }
            tokens.push(best);
            out.push(best);
        }
        Ok(out)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.token_embedding"), self.token_embedding.clone()));
        out.push((format!("{prefix}.token_position"), self.token_position.clone()));
        for (i, b) in self.shared.iter().enumerate() {
            b.collect_params(&format!("{prefix}.shared{i}"), out);
        }
        for (g, blocks) in self.independent.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                b.collect_params(&format!("{prefix}.gen{g}.indep{i}"), out);
            }
        }
        self.output.collect_params(&format!("{prefix}.output"), out);
    }

    /// Shared-trunk parameters only (used by the gradient-accumulation
    /// property test).
    pub fn trunk_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, b) in self.shared.iter().enumerate() {
            b.collect_params(&format!("shared{i}"), &mut out);
        }
        out
    }
}
