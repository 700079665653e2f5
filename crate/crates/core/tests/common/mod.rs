#![allow(dead_code)]

use adarank::adapt::{objective_grads, sigmoid, ste_backward, MergeContext, TaskReduction};
use adarank::linalg::Matrix;
use adarank::merge::{merge_relaxed, Lambda};
use adarank::nn::{Activation, Backbone, LossKind, ModelSpec};
use adarank::spectral::{build_task_vectors, decompose, BaseKind, SpectralSet, TaskVectorSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_backbone(rng: &mut ChaCha8Rng, spec: &ModelSpec, scale: f64) -> Backbone {
    Backbone(
        spec.layer_shapes()
            .into_iter()
            .map(|(r, c)| random_matrix(rng, r, c, scale))
            .collect(),
    )
}

/// Small two-task, two-layer network with random base, task vectors and heads.
pub struct Toy {
    pub spec: ModelSpec,
    pub tv: TaskVectorSet,
    pub spectra: SpectralSet,
    pub heads: Vec<Matrix>,
    pub inputs: Vec<Matrix>,
    pub labels: Vec<Vec<usize>>,
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        input_dim: 4,
        hidden_dims: vec![6, 5],
        num_classes_per_task: vec![3, 4],
        activation: Activation::Tanh,
    };
    let base = random_backbone(&mut rng, &spec, 0.6);
    let fts: Vec<Backbone> = (0..2)
        .map(|_| {
            let delta = random_backbone(&mut rng, &spec, 0.3);
            Backbone(
                base.layers()
                    .iter()
                    .zip(delta.layers())
                    .map(|(b, d)| b.add(d).unwrap())
                    .collect(),
            )
        })
        .collect();
    let tv = build_task_vectors(&base, &fts, BaseKind::Pretrained).unwrap();
    let spectra = decompose(&tv, false).unwrap();
    let heads = (0..2)
        .map(|t| {
            let (r, c) = spec.head_shape(t);
            random_matrix(&mut rng, r, c, 1.0)
        })
        .collect();
    let inputs: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, 7, 4, 1.5)).collect();
    let labels = (0..2)
        .map(|t| (0..7).map(|_| rng.random_range(0..spec.num_classes_per_task[t])).collect())
        .collect();
    Toy {
        spec,
        tv,
        spectra,
        heads,
        inputs,
        labels,
    }
}

type Values = Vec<Vec<Vec<f64>>>;

fn relaxed(logits: &Values, temperature: f64) -> Values {
    logits
        .iter()
        .map(|ls| ls.iter().map(|l| l.iter().map(|x| sigmoid(x / temperature)).collect()).collect())
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Worst relative error between analytic and central-difference gradients
/// of mask logits (relaxed path) and coefficients on the toy network.
pub fn worst_gradient_error(kind: LossKind, seed: u64) -> f64 {
    let toy = toy(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let temperature = 2.0;
    let logits: Values = toy
        .spectra
        .per_task
        .iter()
        .map(|layers| layers.iter().map(|s| (0..s.rank()).map(|_| rng.random_range(-3.0..3.0)).collect()).collect())
        .collect();
    let lambda = Lambda {
        values: vec![vec![0.7, 1.1], vec![0.4, 0.9]],
    };
    let batches: Vec<(Matrix, Option<Vec<usize>>)> = toy
        .inputs
        .iter()
        .zip(&toy.labels)
        .map(|(x, y)| (x.clone(), (kind == LossKind::CrossEntropy).then(|| y.clone())))
        .collect();
    let ctx = MergeContext {
        spec: &toy.spec,
        base: &toy.tv.base,
        spectra: &toy.spectra,
        heads: &toy.heads,
    };
    let loss = |logits: &Values, lambda: &Lambda| -> f64 {
        let values = relaxed(logits, temperature);
        let merged = merge_relaxed(&toy.tv.base, &toy.spectra, &values, lambda).unwrap();
        objective_grads(&ctx, &merged, &values, lambda, &batches, kind, TaskReduction::Sum)
            .unwrap()
            .total
    };

    let values = relaxed(&logits, temperature);
    let merged = merge_relaxed(&toy.tv.base, &toy.spectra, &values, &lambda).unwrap();
    let g = objective_grads(&ctx, &merged, &values, &lambda, &batches, kind, TaskReduction::Sum).unwrap();
    assert!((g.total - loss(&logits, &lambda)).abs() < 1e-14);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..2 {
        for l in 0..2 {
            let analytic = ste_backward(&g.mask[t][l], &logits[t][l], temperature);
            for r in 0..logits[t][l].len() {
                let mut plus = logits.clone();
                plus[t][l][r] += h;
                let mut minus = logits.clone();
                minus[t][l][r] -= h;
                let fd = (loss(&plus, &lambda) - loss(&minus, &lambda)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[r], fd));
            }
            let mut plus = lambda.clone();
            plus.values[t][l] += h;
            let mut minus = lambda.clone();
            minus.values[t][l] -= h;
            let fd = (loss(&logits, &plus) - loss(&logits, &minus)) / (2.0 * h);
            worst = worst.max(rel_err(g.lambda[t][l], fd));
        }
    }
    worst
}
