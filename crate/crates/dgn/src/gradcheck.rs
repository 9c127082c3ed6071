//! Finite-difference verification suite: every differentiable op plus a full
//! model forward, reported as (name, worst relative error) pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::corpus::{ImageInput, RecipeRecord, Vocabulary};
use crate::tensor::{finite_difference_check, Reduction, Tensor};
use crate::training::{DgnModel, LossBundle, TrainError};

const FD_H: f64 = 1e-5;

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let data: Vec<f64> = (0..shape.iter().product())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    Tensor::param(shape, data)
}

fn check<F: FnMut() -> f64>(param: &Tensor<f64>, loss: F) -> f64 {
    let coords: Vec<usize> = (0..param.numel()).collect();
    finite_difference_check(param, &coords, FD_H, loss)
}

/// Per-op gradient checks; each entry is (op name, worst relative error).
pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();

    let a = rand_param(&mut rng, &[3, 4]);
    let b = rand_param(&mut rng, &[3, 4]);
    let run = |a: &Tensor<f64>, b: &Tensor<f64>| a.add(b).unwrap().silu().sum().item();
    a.add(&b).unwrap().silu().sum().backward().unwrap();
    out.push(("add", check(&a, || run(&a, &b))));
    a.zero_grad();

    let row = rand_param(&mut rng, &[4]);
    let run = |a: &Tensor<f64>, r: &Tensor<f64>| a.add_row(r).unwrap().silu().sum().item();
    a.add_row(&row).unwrap().silu().sum().backward().unwrap();
    out.push(("add_row", check(&row, || run(&a, &row))));
    a.zero_grad();

    let run = |a: &Tensor<f64>, b: &Tensor<f64>| a.mul(b).unwrap().silu().sum().item();
    a.mul(&b).unwrap().silu().sum().backward().unwrap();
    out.push(("mul", check(&a, || run(&a, &b))));
    a.zero_grad();

    let m = rand_param(&mut rng, &[3, 5]);
    let n = rand_param(&mut rng, &[5, 2]);
    let run = |m: &Tensor<f64>, n: &Tensor<f64>| m.matmul(n).unwrap().silu().sum().item();
    m.matmul(&n).unwrap().silu().sum().backward().unwrap();
    out.push(("matmul_lhs", check(&m, || run(&m, &n))));
    out.push(("matmul_rhs", check(&n, || run(&m, &n))));

    let run = |a: &Tensor<f64>| a.scale(1.7).silu().sum().item();
    a.scale(1.7).silu().sum().backward().unwrap();
    out.push(("scale", check(&a, || run(&a))));
    a.zero_grad();

    let run = |a: &Tensor<f64>| a.transpose().silu().sum().item();
    a.transpose().silu().sum().backward().unwrap();
    out.push(("transpose", check(&a, || run(&a))));
    a.zero_grad();

    let c = rand_param(&mut rng, &[2, 4]);
    let run = |a: &Tensor<f64>, c: &Tensor<f64>| {
        Tensor::concat_rows(&[a.clone(), c.clone()])
            .unwrap()
            .silu()
            .sum()
            .item()
    };
    Tensor::concat_rows(&[a.clone(), c.clone()])
        .unwrap()
        .silu()
        .sum()
        .backward()
        .unwrap();
    out.push(("concat_rows", check(&c, || run(&a, &c))));
    a.zero_grad();

    let d = rand_param(&mut rng, &[3, 2]);
    let run = |a: &Tensor<f64>, d: &Tensor<f64>| {
        Tensor::concat_cols(&[a.clone(), d.clone()])
            .unwrap()
            .silu()
            .sum()
            .item()
    };
    Tensor::concat_cols(&[a.clone(), d.clone()])
        .unwrap()
        .silu()
        .sum()
        .backward()
        .unwrap();
    out.push(("concat_cols", check(&d, || run(&a, &d))));
    a.zero_grad();

    let run = |a: &Tensor<f64>| a.narrow_rows(1, 2).silu().sum().item();
    a.narrow_rows(1, 2).silu().sum().backward().unwrap();
    out.push(("narrow_rows", check(&a, || run(&a))));
    a.zero_grad();

    let table = rand_param(&mut rng, &[5, 3]);
    let ids = [0usize, 2, 2, 4];
    let run = |t: &Tensor<f64>| t.embedding(&ids).unwrap().silu().sum().item();
    table.embedding(&ids).unwrap().silu().sum().backward().unwrap();
    out.push(("embedding", check(&table, || run(&table))));

    let run = |a: &Tensor<f64>| a.mean_rows().silu().sum().item();
    a.mean_rows().silu().sum().backward().unwrap();
    out.push(("mean_rows", check(&a, || run(&a))));
    a.zero_grad();

    let run = |a: &Tensor<f64>| a.sum().item();
    a.sum().backward().unwrap();
    out.push(("sum", check(&a, || run(&a))));
    a.zero_grad();

    let run = |a: &Tensor<f64>| a.softmax().silu().sum().item();
    a.softmax().silu().sum().backward().unwrap();
    out.push(("softmax", check(&a, || run(&a))));
    a.zero_grad();

    let targets = [1usize, 3, 0];
    let run = |a: &Tensor<f64>| a.cross_entropy(&targets, Reduction::Mean).unwrap().item();
    a.cross_entropy(&targets, Reduction::Mean)
        .unwrap()
        .backward()
        .unwrap();
    out.push(("cross_entropy", check(&a, || run(&a))));
    a.zero_grad();

    let gain = rand_param(&mut rng, &[4]);
    let bias = rand_param(&mut rng, &[4]);
    let run = |a: &Tensor<f64>, g: &Tensor<f64>, bi: &Tensor<f64>| {
        a.layer_norm(g, bi, 1e-5).unwrap().silu().sum().item()
    };
    a.layer_norm(&gain, &bias, 1e-5)
        .unwrap()
        .silu()
        .sum()
        .backward()
        .unwrap();
    out.push(("layer_norm_input", check(&a, || run(&a, &gain, &bias))));
    out.push(("layer_norm_gain", check(&gain, || run(&a, &gain, &bias))));
    a.zero_grad();

    let run = |a: &Tensor<f64>| a.silu().sum().item();
    a.silu().sum().backward().unwrap();
    out.push(("silu", check(&a, || run(&a))));
    a.zero_grad();

    let img = rand_param(&mut rng, &[1, 25]);
    let kern = rand_param(&mut rng, &[2, 9]);
    let run = |i: &Tensor<f64>, k: &Tensor<f64>| {
        i.conv2d(k, 5, 5, 3).unwrap().silu().sum().item()
    };
    img.conv2d(&kern, 5, 5, 3)
        .unwrap()
        .silu()
        .sum()
        .backward()
        .unwrap();
    out.push(("conv2d_input", check(&img, || run(&img, &kern))));
    out.push(("conv2d_kernel", check(&kern, || run(&img, &kern))));

    out
}

fn toy_batch() -> (Vec<RecipeRecord>, Vocabulary) {
    let mut recipes = Vec::new();
    for (i, (steps, labels)) in [
        (
            vec!["chop onion and garlic .", "boil rice in water ."],
            vec![0usize, 1],
        ),
        (
            vec!["heat oil in a pan .", "serve with parsley ."],
            vec![1, 2],
        ),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rec = RecipeRecord::new(
            format!("g{i}"),
            ImageInput::Feature(vec![0.3 * (i as f64 + 1.0); 4]),
            vec!["onion".into(), "rice".into(), "oil".into()],
            steps.into_iter().map(String::from).collect(),
        )
        .unwrap();
        rec.pseudo_labels = Some(labels);
        recipes.push(rec);
    }
    let vocab = Vocabulary::build(&recipes, 1);
    (recipes, vocab)
}

/// Worst relative error of a full-model combined-loss gradient over a
/// two-recipe batch with two phases each, checked on `coords_per_param`
/// sampled coordinates of every parameter.
pub fn full_model_check(hidden: usize, coords_per_param: usize) -> Result<f64, TrainError> {
    let (recipes, vocab) = toy_batch();
    let mut cfg = RunConfig::default();
    cfg.model.hidden = hidden;
    cfg.model.n_head = 2;
    cfg.model.n_struct_layers = 1;
    cfg.model.n_shared = 1;
    cfg.model.n_indep = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model: DgnModel<f64> = DgnModel::new(&mut rng, cfg, vocab, 4);

    let batch_loss = |model: &DgnModel<f64>| -> f64 {
        let mut total = 0.0;
        for rec in &recipes {
            let l = model.recipe_losses(rec).unwrap();
            let bundle = LossBundle {
                l_pre: l.l_pre,
                l_gen: l.l_gen,
                l_pos: l.l_pos,
                lambda: (1.0, 1.0, 0.1),
            };
            total += bundle.total().item();
        }
        total
    };

    // one backward over the whole batch
    let mut graph_total: Option<Tensor<f64>> = None;
    for rec in &recipes {
        let l = model.recipe_losses(rec)?;
        let t = LossBundle {
            l_pre: l.l_pre,
            l_gen: l.l_gen,
            l_pos: l.l_pos,
            lambda: (1.0, 1.0, 0.1),
        }
        .total();
        graph_total = Some(match graph_total {
            None => t,
            Some(acc) => acc.add(&t)?,
        });
    }
    graph_total.unwrap().backward()?;

    let mut worst = 0.0f64;
    for (_, p) in model.named_params() {
        if p.grad().is_none() {
            continue;
        }
        let stride = (p.numel() / coords_per_param).max(1);
        let coords: Vec<usize> = (0..p.numel()).step_by(stride).take(coords_per_param).collect();
        let err = finite_difference_check(&p, &coords, FD_H, || batch_loss(&model));
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
