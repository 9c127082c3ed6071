//! Desk-scale trainable encoders producing image features F_img and
//! ingredient features F_ingr, both projected to the model hidden size.

use log::warn;
use rand::Rng;

use crate::corpus::{ImageInput, Vocabulary, MAX_INGR_TOKENS};
use crate::nn::{init_param, Linear};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

const CONV_CHANNELS: usize = 4;
const CONV_KSIZE: usize = 3;

/// Image encoder: raw feature vectors pass through one trainable linear map;
/// small grids pass through two convolution layers, global mean pooling, and
/// a linear map. Either path ends at dimension H.
pub struct ImageEncoder<S: Scalar> {
    pub raw_dim: usize,
    pub hidden: usize,
    feat_proj: Linear<S>,
    conv1: Tensor<S>,
    conv2: Tensor<S>,
    grid_proj: Linear<S>,
}

impl<S: Scalar> ImageEncoder<S> {
    pub fn new<R: Rng>(rng: &mut R, raw_dim: usize, hidden: usize) -> Self {
        ImageEncoder {
            raw_dim,
            hidden,
            feat_proj: Linear::new(rng, raw_dim, hidden),
            conv1: init_param(rng, &[CONV_CHANNELS, CONV_KSIZE * CONV_KSIZE], 0.3),
            conv2: init_param(
                rng,
                &[CONV_CHANNELS, CONV_CHANNELS * CONV_KSIZE * CONV_KSIZE],
                0.3,
            ),
            grid_proj: Linear::new(rng, CONV_CHANNELS, hidden),
        }
    }

    /// Encode to a `[1, H]` feature row.
    pub fn forward(&self, image: &ImageInput) -> Result<Tensor<S>> {
        match image {
            ImageInput::Feature(raw) => {
                if raw.len() != self.raw_dim {
                    return Err(TensorError::BadShape {
                        op: "encode_image",
                        expected: format!("feature vector of length {}", self.raw_dim),
                        got: vec![raw.len()],
                    });
                }
                let x = Tensor::from_vec(
                    &[1, raw.len()],
                    raw.iter().map(|&v| S::from_f64_c(v)).collect(),
                );
                self.feat_proj.forward(&x)
            }
            ImageInput::Grid(rows) => {
                let h = rows.len();
                let w = rows.first().map(|r| r.len()).unwrap_or(0);
                if h < 2 * CONV_KSIZE - 1 || w < 2 * CONV_KSIZE - 1
                    || rows.iter().any(|r| r.len() != w)
                {
                    return Err(TensorError::BadShape {
                        op: "encode_image",
                        expected: format!("rectangular grid at least {0}x{0}", 2 * CONV_KSIZE - 1),
                        got: vec![h, w],
                    });
                }
                let data: Vec<S> = rows
                    .iter()
                    .flat_map(|r| r.iter().map(|&v| S::from_f64_c(v)))
                    .collect();
                let x = Tensor::from_vec(&[1, h * w], data);
                let c1 = x.conv2d(&self.conv1, h, w, CONV_KSIZE)?.silu();
                let (oh, ow) = (h - CONV_KSIZE + 1, w - CONV_KSIZE + 1);
                let c2 = c1.conv2d(&self.conv2, oh, ow, CONV_KSIZE)?.silu();
                // global mean pool over spatial positions -> [1, channels]
                let pooled = c2.transpose().mean_rows();
                self.grid_proj.forward(&pooled)
            }
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        self.feat_proj.collect_params(&format!("{prefix}.feat_proj"), out);
        out.push((format!("{prefix}.conv1"), self.conv1.clone()));
        out.push((format!("{prefix}.conv2"), self.conv2.clone()));
        self.grid_proj.collect_params(&format!("{prefix}.grid_proj"), out);
    }
}

/// Per-token and pooled ingredient features.
pub struct IngredientFeature<S: Scalar> {
    /// `[seq_ingr, H]` token rows (at most [`MAX_INGR_TOKENS`]).
    pub sequence: Tensor<S>,
    /// `[1, H]` mean over token rows.
    pub pooled: Tensor<S>,
}

/// Ingredient encoder: embedding lookup plus a linear projection; the pooled
/// vector is the mean over token positions.
pub struct IngredientEncoder<S: Scalar> {
    pub embedding: Tensor<S>,
    proj: Linear<S>,
}

impl<S: Scalar> IngredientEncoder<S> {
    pub fn new<R: Rng>(rng: &mut R, vocab_size: usize, hidden: usize) -> Self {
        IngredientEncoder {
            embedding: init_param(rng, &[vocab_size, hidden], 0.1),
            proj: Linear::new(rng, hidden, hidden),
        }
    }

    pub fn forward(&self, tokens: &[String], vocab: &Vocabulary) -> Result<IngredientFeature<S>> {
        let mut ids = vocab.encode(tokens);
        if ids.is_empty() {
            ids.push(crate::corpus::UNK);
        }
        if ids.len() > MAX_INGR_TOKENS {
            warn!(
                "ingredient list of {} tokens truncated to {}",
                ids.len(),
                MAX_INGR_TOKENS
            );
            ids.truncate(MAX_INGR_TOKENS);
        }
        let seq = self.proj.forward(&self.embedding.embedding(&ids)?)?;
        let pooled = seq.mean_rows();
        Ok(IngredientFeature {
            sequence: seq,
            pooled,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.embedding"), self.embedding.clone()));
        self.proj.collect_params(&format!("{prefix}.proj"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageInput, RecipeRecord, Vocabulary};
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        let rec = RecipeRecord::new(
            "r".into(),
            ImageInput::Feature(vec![0.0]),
            vec!["onion".into(), "garlic".into(), "salt".into()],
            vec!["chop onion garlic salt".into()],
        )
        .unwrap();
        Vocabulary::build(&[rec], 1)
    }

    #[test]
    fn zero_feature_input_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = ImageEncoder::<f64>::new(&mut rng, 6, 8);
        let out = enc.forward(&ImageInput::Feature(vec![0.0; 6])).unwrap();
        assert_eq!(out.data(), enc.feat_proj.bias.data());
    }

    #[test]
    fn both_paths_output_hidden_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoder::<f64>::new(&mut rng, 4, 8);
        let a = enc.forward(&ImageInput::Feature(vec![0.5; 4])).unwrap();
        assert_eq!(a.shape(), vec![1, 8]);
        let grid = vec![vec![0.1; 7]; 6];
        let b = enc.forward(&ImageInput::Grid(grid)).unwrap();
        assert_eq!(b.shape(), vec![1, 8]);
    }

    #[test]
    fn wrong_dimensionality_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ImageEncoder::<f64>::new(&mut rng, 4, 8);
        assert!(enc.forward(&ImageInput::Feature(vec![0.0; 5])).is_err());
        assert!(enc
            .forward(&ImageInput::Grid(vec![vec![0.0; 2]; 2]))
            .is_err());
    }

    #[test]
    fn conv_path_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::<f64>::new(&mut rng, 4, 6);
        let grid = ImageInput::Grid(
            (0..6)
                .map(|i| (0..6).map(|j| 0.1 * (i * 6 + j) as f64 - 1.0).collect())
                .collect(),
        );
        let run = |enc: &ImageEncoder<f64>| enc.forward(&grid).unwrap().silu().sum().item();
        enc.forward(&grid).unwrap().silu().sum().backward().unwrap();
        for p in [&enc.conv1, &enc.conv2, &enc.grid_proj.weight] {
            let coords: Vec<usize> = (0..p.numel().min(32)).collect();
            let worst = finite_difference_check(p, &coords, 1e-5, || run(&enc));
            assert!(worst < 1e-4, "rel err {worst}");
        }
    }

    #[test]
    fn single_token_pooled_equals_projected_row() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = IngredientEncoder::<f64>::new(&mut rng, v.len(), 8);
        let feat = enc.forward(&["onion".to_string()], &v).unwrap();
        assert_eq!(feat.sequence.shape(), vec![1, 8]);
        assert_eq!(feat.pooled.data(), feat.sequence.data());
    }

    #[test]
    fn pooled_vector_is_permutation_invariant() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = IngredientEncoder::<f64>::new(&mut rng, v.len(), 8);
        let a = enc
            .forward(&["onion".into(), "garlic".into(), "salt".into()], &v)
            .unwrap();
        let b = enc
            .forward(&["salt".into(), "onion".into(), "garlic".into()], &v)
            .unwrap();
        for (x, y) in a.pooled.data().iter().zip(b.pooled.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_ne!(a.sequence.data(), b.sequence.data());
    }

    #[test]
    fn long_ingredient_list_truncated_to_cap() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = IngredientEncoder::<f64>::new(&mut rng, v.len(), 4);
        let tokens: Vec<String> = (0..31).map(|_| "onion".to_string()).collect();
        let feat = enc.forward(&tokens, &v).unwrap();
        assert_eq!(feat.sequence.shape()[0], 30);
    }

    #[test]
    fn encoders_are_deterministic() {
        let v = vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let enc = IngredientEncoder::<f64>::new(&mut rng, v.len(), 8);
        let a = enc.forward(&["garlic".into()], &v).unwrap();
        let b = enc.forward(&["garlic".into()], &v).unwrap();
        assert_eq!(a.sequence.data(), b.sequence.data());
    }
}
