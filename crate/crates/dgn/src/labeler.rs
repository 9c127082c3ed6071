//! Pseudo-label assignment for recipe phases: verb extraction against a
//! lexicon, distributional verb embeddings, mean-verb phase representations,
//! and seeded k-means clustering.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{RecipeRecord, COOK_VERBS, FINISH_VERBS, PREP_VERBS};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("k-means needs at least k={k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("model has no centroids; fit it first")]
    Unfit,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Embedding dimension for verb vectors.
pub const EMBED_DIM: usize = 32;

const PROJECTION_SEED: u64 = 0x5EED_E4B;

/// Set of verb surface forms used to spot verbs in tokenized steps.
#[derive(Debug, Clone)]
pub struct VerbLexicon {
    verbs: HashSet<String>,
}

impl VerbLexicon {
    pub fn new<I: IntoIterator<Item = String>>(verbs: I) -> Self {
        let verbs: HashSet<String> = verbs.into_iter().map(|v| v.to_lowercase()).collect();
        assert!(!verbs.is_empty(), "verb lexicon must be non-empty");
        VerbLexicon { verbs }
    }

    /// The built-in lexicon covering the synthetic grammar.
    pub fn builtin() -> Self {
        VerbLexicon::new(
            PREP_VERBS
                .iter()
                .chain(COOK_VERBS.iter())
                .chain(FINISH_VERBS.iter())
                .map(|s| s.to_string()),
        )
    }

    /// One verb per line, UTF-8.
    pub fn from_file(path: &Path) -> Result<Self, LabelError> {
        let text = fs::read_to_string(path)?;
        let verbs: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Ok(VerbLexicon::new(verbs))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.verbs.contains(token)
    }
}

/// Ordered sublist of tokens present in the lexicon.
pub fn extract_verbs(tokens: &[String], lexicon: &VerbLexicon) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| lexicon.contains(t))
        .cloned()
        .collect()
}

/// Distributional verb embeddings: a within-phase verb co-occurrence matrix,
/// row-normalized and projected to [`EMBED_DIM`] with a fixed-seed Gaussian
/// projection. Verbs appearing in the same phase land near each other.
#[derive(Debug, Clone)]
pub struct VerbEmbeddings {
    index: BTreeMap<String, usize>,
    vectors: Vec<Vec<f64>>,
}

impl VerbEmbeddings {
    pub fn train(corpus: &[RecipeRecord], lexicon: &VerbLexicon) -> Self {
        // collect lexicon verbs present in the corpus, in stable order
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for rec in corpus {
            for p in 0..rec.phases.len() {
                for v in extract_verbs(&rec.phase_tokens(p), lexicon) {
                    let next = index.len();
                    index.entry(v).or_insert(next);
                }
            }
        }
        let n = index.len().max(1);
        let mut cooc = vec![0.0f64; n * n];
        for rec in corpus {
            for p in 0..rec.phases.len() {
                let verbs = extract_verbs(&rec.phase_tokens(p), lexicon);
                let ids: Vec<usize> = verbs.iter().map(|v| index[v]).collect();
                // distinct verbs only: the self-diagonal would dominate
                // every row and wash out the within-phase signal
                for &a in &ids {
                    for &b in &ids {
                        if a != b {
                            cooc[a * n + b] += 1.0;
                        }
                    }
                }
            }
        }
        // row-normalize to co-occurrence distributions
        normalize_rows(&mut cooc, n);
        // two-step smoothing (A + A²): verbs sharing neighbours get nearly
        // identical rows even if they rarely co-occur directly, which keeps
        // rare verbs attached to their distributional cluster
        let mut smoothed = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut v = cooc[i * n + j];
                for m in 0..n {
                    v += cooc[i * n + m] * cooc[m * n + j];
                }
                smoothed[i * n + j] = v;
            }
        }
        normalize_rows(&mut smoothed, n);
        let vectors = if n <= EMBED_DIM {
            // the rows already fit: zero-pad instead of projecting, which
            // preserves the co-occurrence geometry exactly
            (0..n)
                .map(|i| {
                    let mut v = smoothed[i * n..(i + 1) * n].to_vec();
                    v.resize(EMBED_DIM, 0.0);
                    v
                })
                .collect()
        } else {
            // fixed random projection to EMBED_DIM
            let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
            let normal = Normal::new(0.0, 1.0 / (EMBED_DIM as f64).sqrt()).unwrap();
            let proj: Vec<f64> = (0..n * EMBED_DIM).map(|_| normal.sample(&mut rng)).collect();
            (0..n)
                .map(|i| {
                    (0..EMBED_DIM)
                        .map(|d| {
                            (0..n)
                                .map(|j| smoothed[i * n + j] * proj[j * EMBED_DIM + d])
                                .sum()
                        })
                        .collect()
                })
                .collect()
        };
        VerbEmbeddings { index, vectors }
    }

    pub fn get(&self, verb: &str) -> Option<&[f64]> {
        self.index.get(verb).map(|&i| self.vectors[i].as_slice())
    }
}

fn normalize_rows(matrix: &mut [f64], n: usize) {
    for row in matrix.chunks_mut(n) {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
    }
}

/// Mean verb embedding of one phase.
#[derive(Debug, Clone)]
pub struct PhaseRepresentation {
    pub vector: Vec<f64>,
    pub verb_count: usize,
}

pub fn phase_representation(
    phase_steps: &[Vec<String>],
    lexicon: &VerbLexicon,
    embeddings: &VerbEmbeddings,
) -> PhaseRepresentation {
    let mut vector = vec![0.0; EMBED_DIM];
    let mut count = 0usize;
    for step in phase_steps {
        for verb in extract_verbs(step, lexicon) {
            if let Some(e) = embeddings.get(&verb) {
                for (a, b) in vector.iter_mut().zip(e) {
                    *a += b;
                }
                count += 1;
            }
        }
    }
    if count > 0 {
        for v in vector.iter_mut() {
            *v /= count as f64;
        }
    }
    PhaseRepresentation {
        vector,
        verb_count: count,
    }
}

#[derive(Debug, Clone)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse_trace: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by Euclidean distance; ties go to the lowest index.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Number of k-means++ restarts; the run with the lowest final SSE wins.
const KMEANS_RESTARTS: u64 = 8;

/// Lloyd's algorithm with k-means++ initialization and [`KMEANS_RESTARTS`]
/// deterministic restarts derived from the given seed; the restart with the
/// lowest final SSE is returned (first one on ties).
pub fn kmeans_fit(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansModel, LabelError> {
    let mut best: Option<KMeansModel> = None;
    for i in 0..KMEANS_RESTARTS {
        let sub = seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let model = kmeans_once(points, k, sub)?;
        let better = match &best {
            None => true,
            Some(b) => model.sse_trace.last() < b.sse_trace.last(),
        };
        if better {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// One Lloyd run. Stops when assignments are stable or after 100 iterations.
fn kmeans_once(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansModel, LabelError> {
    let n = points.len();
    if n < k {
        return Err(LabelError::TooFewPoints { k, n });
    }
    assert!(k >= 1);
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut x: f64 = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if x < d {
                    pick = i;
                    break;
                }
                x -= d;
            }
            pick
        };
        centroids.push(points[chosen].clone());
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, centroids.last().unwrap());
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut assignment: Vec<usize> = points
        .iter()
        .map(|p| nearest_centroid(p, &centroids))
        .collect();
    let mut sse_trace = Vec::new();
    for _ in 0..100 {
        // update step
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
            // empty clusters keep their previous centroid
        }
        // assignment step
        let next: Vec<usize> = points
            .iter()
            .map(|p| nearest_centroid(p, &centroids))
            .collect();
        let sse: f64 = points
            .iter()
            .zip(&next)
            .map(|(p, &a)| dist2(p, &centroids[a]))
            .sum();
        if let Some(&prev) = sse_trace.last() {
            debug_assert!(
                sse <= prev + 1e-9,
                "Lloyd iteration increased SSE: {prev} -> {sse}"
            );
        }
        sse_trace.push(sse);
        if next == assignment {
            break;
        }
        assignment = next;
    }

    Ok(KMeansModel {
        k,
        centroids,
        sse_trace,
    })
}

impl KMeansModel {
    pub fn assign(&self, point: &[f64]) -> usize {
        nearest_centroid(point, &self.centroids)
    }
}

/// Attach a pseudo label (sub-generator id) to every phase of every record.
pub fn assign_pseudo_labels(
    corpus: &mut [RecipeRecord],
    lexicon: &VerbLexicon,
    embeddings: &VerbEmbeddings,
    model: &KMeansModel,
) -> Result<(), LabelError> {
    if model.centroids.is_empty() {
        return Err(LabelError::Unfit);
    }
    for rec in corpus.iter_mut() {
        let mut labels = Vec::with_capacity(rec.phases.len());
        for p in 0..rec.phases.len() {
            let rep = phase_representation(&rec.phase_steps(p), lexicon, embeddings);
            if rep.verb_count == 0 {
                warn!("record {}: phase {p} has no verbs; labeling from zero vector", rec.id);
            }
            labels.push(model.assign(&rep.vector));
        }
        rec.pseudo_labels = Some(labels);
    }
    Ok(())
}

/// All phase representations of a corpus, flattened in record order.
pub fn corpus_phase_points(
    corpus: &[RecipeRecord],
    lexicon: &VerbLexicon,
    embeddings: &VerbEmbeddings,
) -> Vec<Vec<f64>> {
    let mut points = Vec::new();
    for rec in corpus {
        for p in 0..rec.phases.len() {
            points.push(phase_representation(&rec.phase_steps(p), lexicon, embeddings).vector);
        }
    }
    points
}
