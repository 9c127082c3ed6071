//! Release gate: the nine acceptance criteria, one pass/fail line each.
//!
//! Everything runs inside a single test so the expensive artifacts (the two
//! planted corpora, their pseudo labels, and the four trained models) are
//! built once and shared. Run with `--nocapture` to watch the per-criterion
//! lines; the test fails if any criterion fails.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgn::config::{FusionMode, RunConfig};
use dgn::corpus::{
    generate_synthetic, planted_phase_types, PhaseType, RecipeRecord, SynthConfig, Vocabulary,
    SYNTH_IMAGE_DIM,
};
use dgn::gradcheck;
use dgn::labeler::{
    assign_pseudo_labels, corpus_phase_points, kmeans_fit, KMeansModel, VerbEmbeddings,
    VerbLexicon,
};
use dgn::metrics;
use dgn::structure::build_condition;
use dgn::training::{
    generate_recipe, load_checkpoint, save_checkpoint, train, AdamState, DgnModel,
};

const CORPUS_SEED: u64 = 42;
const CORPUS_SIZE: usize = 2000;
const HELD_OUT: usize = 200;
const STRUCT_EPOCHS: usize = 10;

// criteria 4-6 compare architectures in the undertrained big-corpus regime,
// where the perplexity ordering reflects generalization rather than which
// model memorizes a small corpus first
const TREND_SEED: u64 = 43;
const TREND_SIZE: usize = 6000;
const TREND_EPOCHS: usize = 4;

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn check(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!("criterion {id} ({name}): {verdict} — {detail}");
        if !pass {
            self.failures.push(format!("criterion {id} ({name}): {detail}"));
        }
    }
}

#[test]
fn acceptance() {
    let mut gate = Gate {
        failures: Vec::new(),
    };

    criterion_1_gradient_fidelity(&mut gate);
    criterion_2_metric_oracles(&mut gate);

    // shared artifacts for criteria 3-8
    let mut corpus = generate_synthetic(&SynthConfig {
        seed: CORPUS_SEED,
        n_recipes: CORPUS_SIZE,
        n_phase_types: 3,
        noise: 0.05,
    });
    let lexicon = VerbLexicon::builtin();
    let embeddings = VerbEmbeddings::train(&corpus, &lexicon);
    let points = corpus_phase_points(&corpus, &lexicon, &embeddings);
    let kmeans = kmeans_fit(&points, 3, 0).unwrap();
    assign_pseudo_labels(&mut corpus, &lexicon, &embeddings, &kmeans).unwrap();

    criterion_7_clustering(&mut gate, &corpus, &points, &kmeans);

    let train_set = &corpus[..CORPUS_SIZE - HELD_OUT];
    let held_out = &corpus[CORPUS_SIZE - HELD_OUT..];

    let t_struct = Instant::now();
    let struct_model = fit(train_set, trend_config(FusionMode::Attn, false, STRUCT_EPOCHS));
    let structure_secs = t_struct.elapsed().as_secs_f64();
    criterion_3_structure_recovery(&mut gate, &struct_model, train_set, held_out, structure_secs);

    // separate, larger corpus for the architecture-trend criteria
    let mut trend_corpus = generate_synthetic(&SynthConfig {
        seed: TREND_SEED,
        n_recipes: TREND_SIZE,
        n_phase_types: 3,
        noise: 0.05,
    });
    let trend_embeddings = VerbEmbeddings::train(&trend_corpus, &lexicon);
    let trend_points = corpus_phase_points(&trend_corpus, &lexicon, &trend_embeddings);
    let trend_kmeans = kmeans_fit(&trend_points, 3, 0).unwrap();
    assign_pseudo_labels(&mut trend_corpus, &lexicon, &trend_embeddings, &trend_kmeans).unwrap();
    let trend_train = &trend_corpus[..TREND_SIZE - HELD_OUT];
    let trend_held = &trend_corpus[TREND_SIZE - HELD_OUT..];

    let attn = fit(trend_train, trend_config(FusionMode::Attn, false, TREND_EPOCHS));
    let cat = fit(trend_train, trend_config(FusionMode::Cat, false, TREND_EPOCHS));
    let base = fit(trend_train, trend_config(FusionMode::Attn, true, TREND_EPOCHS));

    let ppl_attn = attn.perplexity(trend_held).unwrap();
    let ppl_cat = cat.perplexity(trend_held).unwrap();
    let ppl_base = base.perplexity(trend_held).unwrap();
    criterion_4_table_i_trend(&mut gate, ppl_attn, ppl_cat, ppl_base);
    criterion_5_table_iv_trend(&mut gate, ppl_attn, ppl_base);
    criterion_6_table_v_trend(&mut gate, &attn, &base, trend_held);

    criterion_8_overfit(&mut gate, &corpus[..16]);
    criterion_9_reproducibility(&mut gate, &corpus[..32]);

    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}

// ---- criterion 1 ----

fn criterion_1_gradient_fidelity(gate: &mut Gate) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_op = "";
    for (op, err) in gradcheck::op_checks() {
        if err > worst {
            worst = err;
            worst_op = op;
        }
    }
    let full = gradcheck::full_model_check(16, 2).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && full < 1e-4 && secs < 120.0;
    gate.check(
        1,
        "gradient fidelity",
        pass,
        format!("worst op {worst_op} rel err {worst:.2e}, full model {full:.2e}, {secs:.1}s"),
    );
}

// ---- criterion 2 ----

/// Clipped n-gram match count, independently of the metric under test: each
/// hypothesis n-gram claims one unused reference occurrence.
fn oracle_clipped_matches(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let grams = |s: &[String]| -> Vec<Vec<String>> {
        if s.len() < n {
            return Vec::new();
        }
        s.windows(n).map(|w| w.to_vec()).collect()
    };
    let hyp_grams = grams(hyp);
    let mut available = grams(reference);
    let mut matches = 0;
    for g in &hyp_grams {
        if let Some(i) = available.iter().position(|r| r == g) {
            available.swap_remove(i);
            matches += 1;
        }
    }
    (matches, hyp_grams.len())
}

/// Corpus BLEU recomputed from the pinned definition via the claiming oracle.
fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (h, r) in hyps.iter().zip(refs) {
            let (m, t) = oracle_clipped_matches(h, r, n);
            num += m;
            den += t;
        }
        let (num, den) = if n >= 2 { (num + 1, den + 1) } else { (num, den) };
        if num == 0 || den == 0 {
            return 0.0;
        }
        log_sum += (num as f64 / den as f64).ln() / 4.0;
    }
    let hyp_len: usize = hyps.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let bp = if hyp_len >= ref_len {
        1.0
    } else if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * log_sum.exp()
}

/// ROUGE-L recomputed from a full LCS dynamic-programming table.
fn oracle_rouge_l(hyp: &[String], reference: &[String]) -> f64 {
    let (m, n) = (hyp.len(), reference.len());
    if m == 0 || n == 0 {
        return 0.0;
    }
    let mut dp = vec![vec![0usize; n + 1]; m + 1];
    for i in 1..=m {
        for j in 1..=n {
            dp[i][j] = if hyp[i - 1] == reference[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    let lcs = dp[m][n] as f64;
    let p = lcs / m as f64;
    let r = lcs / n as f64;
    if p + r == 0.0 {
        return 0.0;
    }
    let beta2 = 12.0;
    (1.0 + beta2) * r * p / (r + beta2 * p)
}

fn criterion_2_metric_oracles(gate: &mut Gate) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let alphabet: Vec<String> = ('a'..='j').map(|c| c.to_string()).collect();
    let mut worst_bleu: f64 = 0.0;
    let mut worst_rouge: f64 = 0.0;
    for _ in 0..100 {
        let mut sample = |max_len: usize| -> Vec<String> {
            let len = rng.gen_range(1..=max_len);
            (0..len)
                .map(|_| alphabet[rng.gen_range(0..alphabet.len())].clone())
                .collect()
        };
        let hyp = sample(30);
        let reference = sample(30);
        let got = metrics::bleu(&[hyp.clone()], &[reference.clone()]).unwrap();
        worst_bleu = worst_bleu.max((got - oracle_bleu(&[hyp.clone()], &[reference.clone()])).abs());
        let got = metrics::rouge_l(&hyp, &reference);
        worst_rouge = worst_rouge.max((got - oracle_rouge_l(&hyp, &reference)).abs());
    }
    let mut ppl_bitwise = true;
    for _ in 0..100 {
        let nll: f64 = rng.gen_range(0.0..5000.0);
        let n = rng.gen_range(1..2000usize);
        let got = metrics::perplexity_from_nll(nll, n).unwrap();
        ppl_bitwise &= got.to_bits() == (nll / n as f64).exp().to_bits();
    }
    let pass = worst_bleu < 1e-9 && worst_rouge < 1e-9 && ppl_bitwise;
    gate.check(
        2,
        "metric oracles",
        pass,
        format!(
            "bleu max dev {worst_bleu:.2e}, rouge-l max dev {worst_rouge:.2e}, ppl identity bitwise: {ppl_bitwise}"
        ),
    );
}

// ---- shared training helpers ----

fn trend_config(fusion: FusionMode, baseline: bool, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.fusion = fusion;
    cfg.train.epochs = epochs;
    cfg.train.val_fraction = 0.0;
    if baseline {
        // matched budget: the single decoder gets all five blocks in one
        // path (2 shared + 3 independent vs the ensemble's 2 + 3x1)
        cfg.model.baseline = true;
        cfg.model.n_generators = 1;
        cfg.model.n_indep = 3;
    }
    cfg
}

fn fit(train_set: &[RecipeRecord], cfg: RunConfig) -> DgnModel<f64> {
    let vocab = Vocabulary::build(train_set, 1);
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let epochs = cfg.train.epochs;
    let model = DgnModel::<f64>::new(&mut init_rng, cfg, vocab, SYNTH_IMAGE_DIM);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.train.seed + 1);
    train(&model, train_set, &mut adam, &mut rng, 0, epochs, None).unwrap();
    model
}

// ---- criterion 3 ----

/// Majority planted type per cluster id — the label permutation fixed by
/// the clustering stage.
fn cluster_type_map(corpus: &[RecipeRecord]) -> Vec<Option<PhaseType>> {
    let mut votes: Vec<HashMap<PhaseType, usize>> = vec![HashMap::new(); 3];
    for rec in corpus {
        let types = planted_phase_types(rec).unwrap();
        for (&l, &t) in rec.pseudo_labels.as_ref().unwrap().iter().zip(&types) {
            *votes[l].entry(t).or_default() += 1;
        }
    }
    votes
        .iter()
        .map(|v| v.iter().max_by_key(|(_, &c)| c).map(|(&t, _)| t))
        .collect()
}

fn criterion_3_structure_recovery(
    gate: &mut Gate,
    model: &DgnModel<f64>,
    train_set: &[RecipeRecord],
    held_out: &[RecipeRecord],
    train_secs: f64,
) {
    let to_type = cluster_type_map(train_set);
    let mut hits = 0;
    for rec in held_out {
        let f_img = model.image_encoder.forward(&rec.image).unwrap();
        let ingr = model
            .ingredient_encoder
            .forward(&rec.ingredients, &model.vocab)
            .unwrap();
        let f_kv = build_condition(&f_img, &ingr.sequence).unwrap();
        let decoded = model.structure.decode(&f_kv).unwrap().labels;
        let mapped: Vec<Option<PhaseType>> = decoded.iter().map(|&l| to_type[l]).collect();
        // every recipe realizes its full template, so recovery is exact
        // equality after the cluster-to-type mapping
        let planted: Vec<Option<PhaseType>> =
            planted_phase_types(rec).unwrap().iter().map(|&t| Some(t)).collect();
        if mapped == planted {
            hits += 1;
        }
    }
    let rate = hits as f64 / held_out.len() as f64;
    let pass = rate >= 0.90 && STRUCT_EPOCHS <= 30 && train_secs < 900.0;
    gate.check(
        3,
        "structure recovery",
        pass,
        format!(
            "{hits}/{} held-out structures recovered ({:.1}%), {STRUCT_EPOCHS} epochs, {train_secs:.0}s",
            held_out.len(),
            100.0 * rate
        ),
    );
}

// ---- criteria 4-6 ----

fn criterion_4_table_i_trend(gate: &mut Gate, ppl_attn: f64, ppl_cat: f64, ppl_base: f64) {
    let rel_gain = (ppl_base - ppl_attn) / ppl_base;
    let near_tie = ppl_attn <= ppl_cat * 1.01;
    let pass = rel_gain >= 0.03 && near_tie;
    gate.check(
        4,
        "Table I trend",
        pass,
        format!(
            "ppl attn {ppl_attn:.4} vs baseline {ppl_base:.4} ({:.1}% lower), cat {ppl_cat:.4} (attn within 1%: {near_tie})",
            100.0 * rel_gain
        ),
    );
}

fn criterion_5_table_iv_trend(gate: &mut Gate, ppl_attn: f64, ppl_base: f64) {
    gate.check(
        5,
        "Table IV trend",
        ppl_attn < ppl_base,
        format!("ppl N=3 {ppl_attn:.4} < N=1 {ppl_base:.4}"),
    );
}

fn criterion_6_table_v_trend(
    gate: &mut Gate,
    dgn: &DgnModel<f64>,
    base: &DgnModel<f64>,
    held_out: &[RecipeRecord],
) {
    let stats = |model: &DgnModel<f64>| {
        let mut lens = 0usize;
        let mut vocab_used: HashSet<usize> = HashSet::new();
        let n = held_out.len().min(100);
        for rec in &held_out[..n] {
            let generated = generate_recipe(model, &rec.image, &rec.ingredients).unwrap();
            lens += generated.token_ids.len();
            vocab_used.extend(generated.token_ids.iter().copied());
        }
        (lens as f64 / n as f64, vocab_used.len())
    };
    let (len_dgn, vocab_dgn) = stats(dgn);
    let (len_base, vocab_base) = stats(base);
    let pass = len_dgn > len_base && vocab_dgn > vocab_base;
    gate.check(
        6,
        "Table V trend",
        pass,
        format!(
            "mean length {len_dgn:.1} vs {len_base:.1}, generated vocab {vocab_dgn} vs {vocab_base}"
        ),
    );
}

// ---- criterion 7 ----

fn criterion_7_clustering(
    gate: &mut Gate,
    corpus: &[RecipeRecord],
    points: &[Vec<f64>],
    kmeans: &KMeansModel,
) {
    // purity of the fitted model against the planted types
    let mut types = Vec::new();
    for rec in corpus {
        types.extend(planted_phase_types(rec).unwrap());
    }
    let assignments: Vec<usize> = points.iter().map(|p| kmeans.assign(p)).collect();
    let mut votes: Vec<HashMap<PhaseType, usize>> = vec![HashMap::new(); kmeans.k];
    for (&a, &t) in assignments.iter().zip(&types) {
        *votes[a].entry(t).or_default() += 1;
    }
    let majority: Vec<Option<PhaseType>> = votes
        .iter()
        .map(|v| v.iter().max_by_key(|(_, &c)| c).map(|(&t, _)| t))
        .collect();
    let hits = assignments
        .iter()
        .zip(&types)
        .filter(|(&a, &t)| majority[a] == Some(t))
        .count();
    let purity = hits as f64 / points.len() as f64;

    // SSE monotone on every run across seeds
    let mut monotone = true;
    for seed in 0..5 {
        let model = kmeans_fit(points, 3, seed).unwrap();
        monotone &= model
            .sse_trace
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-9);
    }
    let pass = purity >= 0.95 && monotone;
    gate.check(
        7,
        "clustering quality",
        pass,
        format!("purity {purity:.4}, SSE non-increasing across 5 seeds: {monotone}"),
    );
}

// ---- criterion 8 ----

fn criterion_8_overfit(gate: &mut Gate, subset: &[RecipeRecord]) {
    let mut cfg = RunConfig::default();
    cfg.train.val_fraction = 0.0;
    cfg.train.batch_size = 4;
    let vocab = Vocabulary::build(subset, 1);
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let model = DgnModel::<f64>::new(&mut init_rng, cfg, vocab, SYNTH_IMAGE_DIM);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut epochs_used = 0;
    let mut ppl = model.perplexity(subset).unwrap();
    while epochs_used < 200 && ppl >= 1.3 {
        train(&model, subset, &mut adam, &mut rng, epochs_used, 10, None).unwrap();
        epochs_used += 10;
        ppl = model.perplexity(subset).unwrap();
    }
    gate.check(
        8,
        "overfit sanity",
        ppl < 1.3,
        format!("train ppl {ppl:.4} after {epochs_used} epochs on 16 recipes"),
    );
}

// ---- criterion 9 ----

fn criterion_9_reproducibility(gate: &mut Gate, subset: &[RecipeRecord]) {
    let small = || {
        let mut cfg = RunConfig::default();
        cfg.model.hidden = 16;
        cfg.model.n_head = 2;
        cfg.model.n_struct_layers = 1;
        cfg.model.n_shared = 1;
        cfg.train.val_fraction = 0.25;
        let vocab = Vocabulary::build(subset, 1);
        let mut init_rng = ChaCha8Rng::seed_from_u64(5);
        DgnModel::<f64>::new(&mut init_rng, cfg, vocab, SYNTH_IMAGE_DIM)
    };

    // two consecutive runs are bit-identical
    let run = || {
        let model = small();
        let mut adam = AdamState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let history = train(&model, subset, &mut adam, &mut rng, 0, 2, None).unwrap();
        (model, history)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    let mut identical = h1
        .iter()
        .zip(&h2)
        .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits()
            && a.val_loss.to_bits() == b.val_loss.to_bits());
    for ((_, a), (_, b)) in m1.named_params().iter().zip(m2.named_params()) {
        identical &= a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
    }

    // checkpoint roundtrip preserves the next training step bitwise
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = small();
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    train(&model, subset, &mut adam, &mut rng, 0, 1, None).unwrap();
    save_checkpoint(&path, &model, &adam, 1, &rng).unwrap();
    let cont = train(&model, subset, &mut adam, &mut rng, 1, 1, None).unwrap();
    let (model2, mut adam2, epoch2, mut rng2) = load_checkpoint::<f64>(&path).unwrap();
    let resumed = train(&model2, subset, &mut adam2, &mut rng2, epoch2, 1, None).unwrap();
    let roundtrip = cont[0].train_loss.to_bits() == resumed[0].train_loss.to_bits()
        && model
            .named_params()
            .iter()
            .zip(model2.named_params())
            .all(|((_, a), (_, b))| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });

    let pass = identical && roundtrip;
    gate.check(
        9,
        "reproducibility",
        pass,
        format!("rerun bit-identical: {identical}, checkpoint next-step bitwise: {roundtrip}"),
    );
}
