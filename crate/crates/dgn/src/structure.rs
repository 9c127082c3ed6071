//! Global structure prediction: an autoregressive transformer over phase
//! labels conditioned on the fused image/ingredient memory F_kv. Emits the
//! sub-generator label sequence and the per-phase vectors F_phase taken from
//! the final block's cross-attention output.

use rand::Rng;

use crate::nn::{init_param, Linear, TransformerBlock};
use crate::tensor::{Reduction, Result, Scalar, Tensor, TensorError};

/// Sequence-axis concatenation of image rows followed by ingredient rows.
pub fn build_condition<S: Scalar>(f_img: &Tensor<S>, f_ingr: &Tensor<S>) -> Result<Tensor<S>> {
    if f_img.shape().last() != f_ingr.shape().last() {
        return Err(TensorError::ShapeMismatch {
            op: "build_condition",
            lhs: f_img.shape(),
            rhs: f_ingr.shape(),
        });
    }
    Tensor::concat_rows(&[f_img.clone(), f_ingr.clone()])
}

/// Predicted sub-generator sequence with per-step phase vectors.
pub struct StructurePrediction<S: Scalar> {
    /// Chosen labels, one per phase (teacher-forced: argmax per gold slot).
    pub labels: Vec<usize>,
    /// `[S, H]` final-block cross-attention rows, one per phase.
    pub phase_vectors: Tensor<S>,
    /// Raw output scores, one row per decoded position (incl. the stop slot).
    pub logits: Tensor<S>,
}

impl<S: Scalar> StructurePrediction<S> {
    pub fn probabilities(&self) -> Tensor<S> {
        self.logits.softmax()
    }
}

pub struct StructurePredictor<S: Scalar> {
    pub n_generators: usize,
    pub max_phases: usize,
    /// Rows `0..N` embed generator labels, row `N` embeds `[START]`.
    label_embedding: Tensor<S>,
    position_embedding: Tensor<S>,
    blocks: Vec<TransformerBlock<S>>,
    output: Linear<S>,
}

impl<S: Scalar> StructurePredictor<S> {
    /// Output class for the stop label.
    pub fn end_class(&self) -> usize {
        self.n_generators
    }

    fn start_row(&self) -> usize {
        self.n_generators
    }

    pub fn new<R: Rng>(
        rng: &mut R,
        hidden: usize,
        n_head: usize,
        n_layers: usize,
        n_generators: usize,
        max_phases: usize,
    ) -> Self {
        StructurePredictor {
            n_generators,
            max_phases,
            label_embedding: init_param(rng, &[n_generators + 1, hidden], 0.1),
            position_embedding: init_param(rng, &[max_phases + 1, hidden], 0.1),
            blocks: (0..n_layers)
                .map(|_| TransformerBlock::new(rng, hidden, n_head))
                .collect(),
            output: Linear::new(rng, hidden, n_generators + 1),
        }
    }

    fn embed(&self, label_rows: &[usize]) -> Result<Tensor<S>> {
        let emb = self.label_embedding.embedding(label_rows)?;
        let pos: Vec<usize> = (0..label_rows.len()).collect();
        emb.add(&self.position_embedding.embedding(&pos)?)
    }

    /// Run the block stack over an embedded label prefix. Returns the final
    /// output states and the final block's cross-attention rows.
    fn run(&self, z: &Tensor<S>, f_kv: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut h = z.clone();
        let mut cross = z.clone();
        for block in &self.blocks {
            let out = block.forward(&h, f_kv, true)?;
            h = out.out;
            cross = out.cross;
        }
        Ok((h, cross))
    }

    /// Teacher-forced pass over gold labels `g_1..g_S` (without `[START]`,
    /// which is prepended internally). Output row `i` scores the label of
    /// phase `i+1`; the last row scores the stop decision.
    pub fn forward_teacher_forced(
        &self,
        f_kv: &Tensor<S>,
        gold: &[usize],
    ) -> Result<StructurePrediction<S>> {
        assert!(
            gold.len() <= self.max_phases,
            "{} gold phases exceed max {}",
            gold.len(),
            self.max_phases
        );
        for &g in gold {
            if g >= self.n_generators {
                return Err(TensorError::TargetOutOfRange {
                    index: g,
                    vocab: self.n_generators,
                });
            }
        }
        let mut rows = vec![self.start_row()];
        rows.extend_from_slice(gold);
        let z = self.embed(&rows)?;
        let (h, cross) = self.run(&z, f_kv)?;
        let logits = self.output.forward(&h)?;
        let s = gold.len();
        let labels = argmax_rows(&logits.narrow_rows(0, s.max(1)));
        // the phase vector for phase i is the state at the input position of
        // g_i (after consuming the label), so it carries the phase identity
        // through the residual path rather than only the noisy prediction
        let phase_vectors = if s == 0 {
            cross.narrow_rows(0, 1)
        } else {
            cross.narrow_rows(1, s)
        };
        Ok(StructurePrediction {
            labels,
            phase_vectors,
            logits,
        })
    }

    /// Sum of per-phase cross-entropies; [`crate::tensor::IGNORE_INDEX`]
    /// positions contribute zero.
    pub fn structure_loss(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
        logits.cross_entropy(targets, Reduction::Sum)
    }

    /// Greedy autoregressive decode; stops at the stop label or after
    /// `max_phases` labels, always emitting at least one label.
    pub fn decode(&self, f_kv: &Tensor<S>) -> Result<StructurePrediction<S>> {
        let mut labels: Vec<usize> = Vec::new();
        let mut logits_rows: Vec<Tensor<S>> = Vec::new();
        while labels.len() < self.max_phases {
            let mut rows = vec![self.start_row()];
            rows.extend_from_slice(&labels);
            let z = self.embed(&rows)?;
            let (h, _) = self.run(&z, f_kv)?;
            let last = rows.len() - 1;
            let logits = self.output.forward(&h.narrow_rows(last, 1))?;
            let scores = logits.data();
            let mut best = argmax(&scores);
            if best == self.end_class() {
                if labels.is_empty() {
                    // stop label cannot come first: take the runner-up once
                    let mut masked = scores.clone();
                    masked[best] = S::neg_infinity();
                    best = argmax(&masked);
                } else {
                    break;
                }
            }
            labels.push(best);
            logits_rows.push(logits.detach());
        }
        // final pass over the complete label sequence yields the post-label
        // states used as phase vectors, matching forward_teacher_forced
        let mut rows = vec![self.start_row()];
        rows.extend_from_slice(&labels);
        let z = self.embed(&rows)?;
        let (_, cross) = self.run(&z, f_kv)?;
        Ok(StructurePrediction {
            labels: labels.clone(),
            phase_vectors: cross.narrow_rows(1, labels.len()).detach(),
            logits: Tensor::concat_rows(&logits_rows)?,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.label_embedding"), self.label_embedding.clone()));
        out.push((
            format!("{prefix}.position_embedding"),
            self.position_embedding.clone(),
        ));
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        self.output.collect_params(&format!("{prefix}.output"), out);
    }
}

fn argmax<S: Scalar>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn argmax_rows<S: Scalar>(t: &Tensor<S>) -> Vec<usize> {
    let shape = t.shape();
    let (m, n) = (shape[0], shape[1]);
    let data = t.data();
    (0..m).map(|i| argmax(&data[i * n..(i + 1) * n])).collect()
}
