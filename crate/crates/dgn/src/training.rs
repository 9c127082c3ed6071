//! Combined objective, Adam optimizer with lr decay and gradient clipping,
//! the teacher-forced training loop, binary checkpointing, and two-stage
//! greedy inference.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{FusionMode, RunConfig};
use crate::corpus::{ImageInput, RecipeRecord, Vocabulary, END, EOPHASE};
use crate::encoders::{ImageEncoder, IngredientEncoder, IngredientFeature};
use crate::generator::{
    FusionParams, GeneratorEnsemble, PhaseAwareFeature, PositionClassifier, PositionEncoder,
};
use crate::structure::{build_condition, StructurePredictor, StructurePrediction};
use crate::tensor::{Scalar, Tensor, TensorError};

const CKPT_MAGIC: &[u8; 4] = b"DGNC";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("recipe {0} has no pseudo labels; run the labeling stage first")]
    Unlabeled(String),
    #[error("recipe {id}: pseudo label {label} exceeds generator count {n}")]
    LabelOutOfRange { id: String, label: usize, n: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Component losses and their weights; `total` is the exact weighted sum.
pub struct LossBundle<S: Scalar> {
    pub l_pre: Tensor<S>,
    pub l_gen: Tensor<S>,
    pub l_pos: Tensor<S>,
    pub lambda: (f64, f64, f64),
}

impl<S: Scalar> LossBundle<S> {
    /// `L = λ1·L_pre + λ2·L_gen + λ3·L_pos`.
    pub fn total(&self) -> Tensor<S> {
        let (l1, l2, l3) = self.lambda;
        self.l_pre
            .scale(S::from_f64_c(l1))
            .add(&self.l_gen.scale(S::from_f64_c(l2)))
            .unwrap()
            .add(&self.l_pos.scale(S::from_f64_c(l3)))
            .unwrap()
    }
}

/// Adam first/second moments keyed by parameter name, plus the step counter.
pub struct AdamState<S: Scalar> {
    pub step: u64,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        AdamState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update over all parameters that received gradients, after global
/// norm clipping at `clip` (0 disables). Parameters without gradients are
/// left untouched.
pub fn adam_step<S: Scalar>(
    params: &[(String, Tensor<S>)],
    state: &mut AdamState<S>,
    lr: f64,
    clip: f64,
) -> Result<(), TensorError> {
    let grads: Vec<Option<Vec<S>>> = params.iter().map(|(_, p)| p.grad()).collect();
    let mut norm_sq = S::zero();
    for g in grads.iter().flatten() {
        for v in g {
            if !v.is_finite() {
                return Err(TensorError::NonFinite("gradient"));
            }
            norm_sq += *v * *v;
        }
    }
    let norm = norm_sq.sqrt();
    let clip_s = S::from_f64_c(clip);
    let scale = if clip > 0.0 && norm > clip_s {
        clip_s / norm
    } else {
        S::one()
    };

    state.step += 1;
    let t = state.step;
    let b1 = S::from_f64_c(BETA1);
    let b2 = S::from_f64_c(BETA2);
    let eps = S::from_f64_c(ADAM_EPS);
    let corr1 = S::from_f64_c(1.0 - BETA1.powi(t as i32));
    let corr2 = S::from_f64_c(1.0 - BETA2.powi(t as i32));
    let lr_s = S::from_f64_c(lr);

    for ((name, p), grad) in params.iter().zip(grads) {
        let Some(grad) = grad else { continue };
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
        let mut data = p.data();
        for i in 0..grad.len() {
            let g = grad[i] * scale;
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            data[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
        p.set_data(data);
    }
    Ok(())
}

/// The full model: encoders, structure predictor, fusion, position head, and
/// the sub-generator ensemble, built from one [`RunConfig`].
pub struct DgnModel<S: Scalar> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub raw_dim: usize,
    pub image_encoder: ImageEncoder<S>,
    pub ingredient_encoder: IngredientEncoder<S>,
    pub structure: StructurePredictor<S>,
    pub fusion: FusionParams<S>,
    pub position_encoder: PositionEncoder<S>,
    pub position_classifier: PositionClassifier<S>,
    pub ensemble: GeneratorEnsemble<S>,
}

/// Per-recipe teacher-forced losses plus the generated-token count.
pub struct RecipeLosses<S: Scalar> {
    pub l_pre: Tensor<S>,
    pub l_gen: Tensor<S>,
    pub l_pos: Tensor<S>,
    pub n_tokens: usize,
}

impl<S: Scalar> DgnModel<S> {
    pub fn new<R: Rng>(rng: &mut R, config: RunConfig, vocab: Vocabulary, raw_dim: usize) -> Self {
        let m = &config.model;
        let h = m.hidden;
        DgnModel {
            image_encoder: ImageEncoder::new(rng, raw_dim, h),
            ingredient_encoder: IngredientEncoder::new(rng, vocab.len(), h),
            structure: StructurePredictor::new(
                rng,
                h,
                m.n_head,
                m.n_struct_layers,
                m.n_generators,
                m.max_phases,
            ),
            fusion: FusionParams::new(rng, h),
            position_encoder: PositionEncoder::new(rng, m.max_phases, h),
            position_classifier: PositionClassifier::new(rng, h, m.max_phases),
            ensemble: GeneratorEnsemble::new(
                rng,
                vocab.len(),
                h,
                m.n_head,
                m.n_shared,
                m.n_indep,
                m.n_generators,
                // room for the worst-case phase-prefixed input: every phase
                // at its token cap plus terminators, plus [START]
                (m.max_phases * (m.max_phase_tokens + 1) + 1).max(m.max_recipe_tokens + 2),
            ),
            config,
            vocab,
            raw_dim,
        }
    }

    /// Every parameter in a fixed, name-stable order.
    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.image_encoder.collect_params("image", &mut out);
        self.ingredient_encoder.collect_params("ingredient", &mut out);
        self.structure.collect_params("structure", &mut out);
        self.fusion.collect_params("fusion", &mut out);
        self.position_encoder.collect_params("position", &mut out);
        self.position_classifier.collect_params("pos_cls", &mut out);
        self.ensemble.collect_params("ensemble", &mut out);
        out
    }

    /// Parameters the optimizer updates (respects `freeze_image_encoder`).
    pub fn trainable_params(&self) -> Vec<(String, Tensor<S>)> {
        self.named_params()
            .into_iter()
            .filter(|(name, _)| {
                !(self.config.model.freeze_image_encoder && name.starts_with("image."))
            })
            .collect()
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    fn encode_inputs(
        &self,
        image: &ImageInput,
        ingredients: &[String],
    ) -> Result<(Tensor<S>, IngredientFeature<S>), TensorError> {
        let f_img = self.image_encoder.forward(image)?;
        let ingr = self.ingredient_encoder.forward(ingredients, &self.vocab)?;
        Ok((f_img, ingr))
    }

    fn fuse(
        &self,
        f_img: &Tensor<S>,
        ingr: &IngredientFeature<S>,
        f_pos: &Tensor<S>,
        f_phase: &Tensor<S>,
    ) -> Result<PhaseAwareFeature<S>, TensorError> {
        match self.config.fusion {
            FusionMode::Cat => self.fusion.fuse_cat(f_img, &ingr.pooled, f_pos, f_phase),
            FusionMode::Attn => self.fusion.fuse_attn(f_img, &ingr.sequence, f_pos, f_phase),
        }
    }

    /// Token ids of phase `p` with its terminator (`[EOPHASE]`, or `[END]`
    /// on the final phase), capped at `max_phase_tokens`.
    fn phase_targets(&self, rec: &RecipeRecord, p: usize) -> Vec<usize> {
        let mut ids = self.vocab.encode(&rec.phase_tokens(p));
        ids.truncate(self.config.model.max_phase_tokens);
        ids.push(if p + 1 == rec.phases.len() { END } else { EOPHASE });
        ids
    }

    /// Teacher-forced forward of one recipe; gold phases are routed to the
    /// sub-generators named by their pseudo labels.
    pub fn recipe_losses(&self, rec: &RecipeRecord) -> Result<RecipeLosses<S>, TrainError> {
        let (f_img, ingr) = self.encode_inputs(&rec.image, &rec.ingredients)?;

        if self.config.model.baseline {
            // whole-recipe single decoder: no structure, no position head
            let mut targets = self.vocab.encode(&rec.all_tokens());
            targets.truncate(self.config.model.max_recipe_tokens);
            targets.push(END);
            let mut inputs = vec![crate::corpus::START];
            inputs.extend_from_slice(&targets[..targets.len() - 1]);
            let r = Tensor::concat_rows(&[f_img, ingr.sequence.clone()])?;
            let logits = self.ensemble.forward(0, &inputs, &r)?;
            let l_gen = GeneratorEnsemble::generation_loss(&logits, &targets)?;
            return Ok(RecipeLosses {
                l_pre: Tensor::scalar(S::zero()),
                l_gen,
                l_pos: Tensor::scalar(S::zero()),
                n_tokens: targets.len(),
            });
        }

        let labels = rec
            .pseudo_labels
            .as_ref()
            .ok_or_else(|| TrainError::Unlabeled(rec.id.clone()))?;
        for &g in labels {
            if g >= self.config.model.n_generators {
                return Err(TrainError::LabelOutOfRange {
                    id: rec.id.clone(),
                    label: g,
                    n: self.config.model.n_generators,
                });
            }
        }

        let f_kv = build_condition(&f_img, &ingr.sequence)?;
        let pred = self.structure.forward_teacher_forced(&f_kv, labels)?;
        let mut struct_targets = labels.clone();
        struct_targets.push(self.structure.end_class());
        let l_pre = StructurePredictor::structure_loss(&pred.logits, &struct_targets)?;

        let mut l_gen = Tensor::scalar(S::zero());
        let mut l_pos = Tensor::scalar(S::zero());
        let mut n_tokens = 0;
        let mut context: Vec<usize> = Vec::new();
        for (p, &g) in labels.iter().enumerate() {
            let f_pos = self.position_encoder.forward(p)?;
            let f_phase = pred.phase_vectors.narrow_rows(p, 1);
            let r = self.fuse(&f_img, &ingr, &f_pos, &f_phase)?;
            // fused rows plus the raw ingredient token rows: phase decoders
            // can attend individual ingredients, not just their mean
            let memory = Tensor::concat_rows(&[r.rows.clone(), ingr.sequence.clone()])?;
            // the gold tokens of earlier phases prefix the decoder input, so
            // each phase sees the recipe so far through causal
            // self-attention; the loss covers only the current phase
            let phase = self.phase_targets(rec, p);
            let mut inputs = vec![crate::corpus::START];
            inputs.extend_from_slice(&context);
            inputs.extend_from_slice(&phase[..phase.len() - 1]);
            let mut targets = vec![crate::tensor::IGNORE_INDEX; context.len()];
            targets.extend_from_slice(&phase);
            let logits = self.ensemble.forward(g, &inputs, &memory)?;
            l_gen = l_gen.add(&GeneratorEnsemble::generation_loss(&logits, &targets)?)?;
            l_pos = l_pos.add(&self.position_classifier.loss(&r.pooled, p)?)?;
            n_tokens += phase.len();
            context.extend_from_slice(&phase);
        }
        Ok(RecipeLosses {
            l_pre,
            l_gen,
            l_pos,
            n_tokens,
        })
    }

    /// Teacher-forced perplexity over generated-token positions.
    pub fn perplexity(&self, corpus: &[RecipeRecord]) -> Result<f64, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mut nll = 0.0;
        let mut count = 0usize;
        for rec in corpus {
            let losses = self.recipe_losses(rec)?;
            nll += losses.l_gen.item().to_f64().unwrap();
            count += losses.n_tokens;
        }
        Ok((nll / count as f64).exp())
    }
}

/// Deterministic train/validation index split derived from the seed alone.
pub fn train_val_split(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51DE_5EED);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).ceil() as usize).min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ppl: f64,
    pub lr: f64,
}

/// Learning rate for a given epoch index under the multiplicative schedule.
pub fn lr_at_epoch(base: f64, decay: f64, epoch: usize) -> f64 {
    base * decay.powi(epoch as i32)
}

fn mean_total_loss<S: Scalar>(model: &DgnModel<S>, recipes: &[&RecipeRecord]) -> Result<f64, TrainError> {
    let lambda = (
        model.config.train.lambda_pre,
        model.config.train.lambda_gen,
        model.config.train.lambda_pos,
    );
    let mut total = 0.0;
    for rec in recipes {
        let l = model.recipe_losses(rec)?;
        let bundle = LossBundle {
            l_pre: l.l_pre,
            l_gen: l.l_gen,
            l_pos: l.l_pos,
            lambda,
        };
        total += bundle.total().item().to_f64().unwrap();
    }
    Ok(total / recipes.len() as f64)
}

/// Run `epochs` epochs of teacher-forced training. `rng` drives batch
/// shuffling only; `start_epoch` offsets the lr schedule so resumed runs
/// continue the decay. Per-epoch metrics are returned and optionally written
/// as JSONL.
pub fn train<S: Scalar>(
    model: &DgnModel<S>,
    corpus: &[RecipeRecord],
    adam: &mut AdamState<S>,
    rng: &mut ChaCha8Rng,
    start_epoch: usize,
    epochs: usize,
    mut metrics_out: Option<&mut dyn Write>,
) -> Result<Vec<EpochMetrics>, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let tc = model.config.train.clone();
    let (train_idx, val_idx) = train_val_split(corpus.len(), tc.val_fraction, tc.seed);
    let train_set: Vec<&RecipeRecord> = train_idx.iter().map(|&i| &corpus[i]).collect();
    let val_set: Vec<RecipeRecord> = val_idx.iter().map(|&i| corpus[i].clone()).collect();
    let params = model.trainable_params();
    let lambda = (tc.lambda_pre, tc.lambda_gen, tc.lambda_pos);

    let mut history = Vec::new();
    for e in 0..epochs {
        let epoch = start_epoch + e;
        let lr = lr_at_epoch(tc.learning_rate, tc.lr_decay, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let mut l_pre = Tensor::scalar(S::zero());
            let mut l_gen = Tensor::scalar(S::zero());
            let mut l_pos = Tensor::scalar(S::zero());
            for &i in chunk {
                let l = model.recipe_losses(train_set[i])?;
                l_pre = l_pre.add(&l.l_pre)?;
                l_gen = l_gen.add(&l.l_gen)?;
                l_pos = l_pos.add(&l.l_pos)?;
            }
            let inv = S::from_f64_c(1.0 / chunk.len() as f64);
            let bundle = LossBundle {
                l_pre: l_pre.scale(inv),
                l_gen: l_gen.scale(inv),
                l_pos: l_pos.scale(inv),
                lambda,
            };
            let total = bundle.total();
            epoch_loss += total.item().to_f64().unwrap() * chunk.len() as f64;
            model.zero_grads();
            total.backward()?;
            adam_step(&params, adam, lr, tc.grad_clip)?;
        }
        model.zero_grads();

        let train_loss = epoch_loss / train_set.len() as f64;
        let (val_loss, val_ppl) = if val_set.is_empty() {
            (train_loss, f64::NAN)
        } else {
            let refs: Vec<&RecipeRecord> = val_set.iter().collect();
            (mean_total_loss(model, &refs)?, model.perplexity(&val_set)?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_ppl,
            lr,
        };
        if let Some(out) = metrics_out.as_deref_mut() {
            writeln!(out, "{}", serde_json::to_string(&metrics).unwrap())?;
        }
        history.push(metrics);
    }
    Ok(history)
}

/// Output of the two-stage inference pipeline for one input.
pub struct GeneratedRecipe<S: Scalar> {
    pub structure: StructurePrediction<S>,
    pub token_ids: Vec<usize>,
    pub text: String,
}

/// Two-stage greedy inference: decode the structure, then each phase through
/// its predicted sub-generator, and concatenate (capped at
/// `max_recipe_tokens`).
pub fn generate_recipe<S: Scalar>(
    model: &DgnModel<S>,
    image: &ImageInput,
    ingredients: &[String],
) -> Result<GeneratedRecipe<S>, TrainError> {
    let (f_img, ingr) = model.encode_inputs(image, ingredients)?;
    let cap = model.config.model.max_recipe_tokens;

    if model.config.model.baseline {
        let r = Tensor::concat_rows(&[f_img, ingr.sequence.clone()])?;
        let token_ids = model.ensemble.decode_phase(0, &[], &r, cap)?;
        let text = model.vocab.decode(&token_ids).join(" ");
        return Ok(GeneratedRecipe {
            structure: StructurePrediction {
                labels: vec![0],
                phase_vectors: Tensor::zeros(&[1, model.config.model.hidden]),
                logits: Tensor::zeros(&[1, 2]),
            },
            token_ids,
            text,
        });
    }

    let f_kv = build_condition(&f_img, &ingr.sequence)?;
    let structure = model.structure.decode(&f_kv)?;
    let mut token_ids = Vec::new();
    let mut context: Vec<usize> = Vec::new();
    for (p, &g) in structure.labels.iter().enumerate() {
        let f_pos = model.position_encoder.forward(p)?;
        let f_phase = structure.phase_vectors.narrow_rows(p, 1);
        let r = model.fuse(&f_img, &ingr, &f_pos, &f_phase)?;
        let memory = Tensor::concat_rows(&[r.rows.clone(), ingr.sequence.clone()])?;
        let phase_ids = model.ensemble.decode_phase(
            g,
            &context,
            &memory,
            model.config.model.max_phase_tokens,
        )?;
        context.extend_from_slice(&phase_ids);
        context.push(EOPHASE);
        token_ids.extend(phase_ids);
        if token_ids.len() >= cap {
            token_ids.truncate(cap);
            break;
        }
    }
    let text = model.vocab.decode(&token_ids).join(" ");
    Ok(GeneratedRecipe {
        structure,
        token_ids,
        text,
    })
}

// ---- checkpointing ----

#[derive(Serialize, Deserialize)]
struct CkptMeta {
    run: RunConfig,
    vocab: Vec<String>,
    raw_dim: usize,
}

fn write_table<S: Scalar, W: Write>(
    w: &mut W,
    entries: &[(String, Vec<usize>, Vec<S>)],
) -> std::io::Result<()> {
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for (name, dims, data) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_f64().unwrap().to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let b = read_exact_vec(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let b = read_exact_vec(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_table<S: Scalar, R: Read>(
    r: &mut R,
) -> Result<Vec<(String, Vec<usize>, Vec<S>)>, TrainError> {
    let count = read_u64(r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let name = String::from_utf8(read_exact_vec(r, name_len)?)
            .map_err(|e| TrainError::Checkpoint(format!("bad parameter name: {e}")))?;
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let b = read_exact_vec(r, 8)?;
            data.push(S::from_f64_c(f64::from_le_bytes(b.try_into().unwrap())));
        }
        out.push((name, dims, data));
    }
    Ok(out)
}

/// Serialize the full training state: config + vocab, parameters, Adam
/// moments, epoch counter, and RNG state.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &DgnModel<S>,
    adam: &AdamState<S>,
    epoch: usize,
    rng: &ChaCha8Rng,
) -> Result<(), TrainError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(epoch as u64).to_le_bytes())?;

    let meta = CkptMeta {
        run: model.config.clone(),
        vocab: model.vocab.id_to_token.clone(),
        raw_dim: model.raw_dim,
    };
    let json = serde_json::to_vec(&meta).unwrap();
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;

    let params: Vec<(String, Vec<usize>, Vec<S>)> = model
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.shape(), p.data()))
        .collect();
    write_table(&mut w, &params)?;

    w.write_all(&adam.step.to_le_bytes())?;
    let moments: Vec<(String, Vec<usize>, Vec<S>)> = adam
        .moments
        .iter()
        .map(|(n, (m, v))| {
            let mut flat = m.clone();
            flat.extend_from_slice(v);
            (n.clone(), vec![2, m.len()], flat)
        })
        .collect();
    write_table(&mut w, &moments)?;

    w.write_all(&rng.get_seed())?;
    w.write_all(&rng.get_word_pos().to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Restore a checkpoint; the returned pieces continue training bit-exactly.
pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(DgnModel<S>, AdamState<S>, usize, ChaCha8Rng), TrainError> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let magic = read_exact_vec(&mut r, 4)?;
    if magic != CKPT_MAGIC {
        return Err(TrainError::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(TrainError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let epoch = read_u64(&mut r)? as usize;
    let json_len = read_u64(&mut r)? as usize;
    let meta: CkptMeta = serde_json::from_slice(&read_exact_vec(&mut r, json_len)?)
        .map_err(|e| TrainError::Checkpoint(format!("bad config json: {e}")))?;

    let mut token_to_id = std::collections::HashMap::new();
    for (i, t) in meta.vocab.iter().enumerate() {
        token_to_id.insert(t.clone(), i);
    }
    let vocab = Vocabulary {
        token_to_id,
        id_to_token: meta.vocab,
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let model = DgnModel::new(&mut init_rng, meta.run, vocab, meta.raw_dim);

    let table = read_table::<S, _>(&mut r)?;
    let mut by_name: BTreeMap<String, Tensor<S>> = model.named_params().into_iter().collect();
    if table.len() != by_name.len() {
        return Err(TrainError::Checkpoint(format!(
            "parameter count mismatch: file has {}, model has {}",
            table.len(),
            by_name.len()
        )));
    }
    for (name, dims, data) in table {
        let p = by_name
            .remove(&name)
            .ok_or_else(|| TrainError::Checkpoint(format!("unknown parameter {name}")))?;
        if p.shape() != dims {
            return Err(TrainError::Checkpoint(format!(
                "shape mismatch for {name}: file {dims:?}, model {:?}",
                p.shape()
            )));
        }
        p.set_data(data);
    }

    let step = read_u64(&mut r)?;
    let mut moments = BTreeMap::new();
    for (name, dims, flat) in read_table::<S, _>(&mut r)? {
        let half = dims[1];
        let (m, v) = flat.split_at(half);
        moments.insert(name, (m.to_vec(), v.to_vec()));
    }
    let adam = AdamState { step, moments };

    let seed: [u8; 32] = read_exact_vec(&mut r, 32)?.try_into().unwrap();
    let pos = u128::from_le_bytes(read_exact_vec(&mut r, 16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);

    Ok((model, adam, epoch, rng))
}
