#![allow(dead_code)]

use dynalay::linalg::{dot, norm2, random_vector};
use dynalay::oracle::{finite_diff_grad_oracle, unrolled_backward_oracle};
use dynalay::{fpi_backward, fpi_forward, Activation, DenseMatrix, FpiConfig, FpiLayer};
use rand::Rng;

pub fn tight(tol: f64) -> FpiConfig {
    FpiConfig {
        max_iter: 10_000,
        ..FpiConfig::default().with_tolerances(tol, tol)
    }
}

pub fn random_tanh_layer<R: Rng>(rng: &mut R, max_dim: usize, square: bool) -> (FpiLayer, Vec<f64>) {
    let d = rng.gen_range(1..=max_dim);
    let m = if square { d } else { rng.gen_range(1..=max_dim) };
    let scale = rng.gen_range(0.2..2.0);
    let layer = FpiLayer::random(d, m, scale, Activation::Tanh, 0.9, rng).unwrap();
    let x = random_vector(m, 1.0, rng);
    (layer, x)
}

/// Same shapes as `template`, entries from `flat` in `w_z, w_x, b` order.
pub fn with_params(template: &FpiLayer, flat: &[f64]) -> FpiLayer {
    let (d, m) = (template.state_dim(), template.input_dim());
    let (wz, rest) = flat.split_at(d * d);
    let (wx, b) = rest.split_at(d * m);
    FpiLayer::new(
        DenseMatrix::new(d, d, wz.to_vec()).unwrap(),
        DenseMatrix::new(d, m, wx.to_vec()).unwrap(),
        b.to_vec(),
        template.act,
        template.contraction_target,
    )
    .unwrap()
}

pub fn flat_params(layer: &FpiLayer) -> Vec<f64> {
    let mut v = layer.w_z.data().to_vec();
    v.extend_from_slice(layer.w_x.data());
    v.extend_from_slice(&layer.b);
    v
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(b).max(1e-12)
}

/// Worst relative error over the parameter blocks and the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradErrors {
    pub vs_unrolled: f64,
    pub vs_fd: f64,
}

/// Loss `⟨c, z*(θ, x)⟩`; compares the implicit gradient against the unrolled
/// and central-difference oracles.
pub fn gradient_errors<R: Rng>(layer: &FpiLayer, x: &[f64], rng: &mut R, k_unroll: usize, h: f64) -> GradErrors {
    let cfg = tight(1e-13);
    let c = random_vector(layer.state_dim(), 1.0, rng);
    let z = fpi_forward(layer, x, &cfg).unwrap().z_star;
    let imp = fpi_backward(layer, &z, x, &c, &cfg).unwrap();
    let unr = unrolled_backward_oracle(layer, x, &z, k_unroll, &c).unwrap();

    let blocks = |g: &dynalay::layers::FpiParamGrads| [g.w_z.data().to_vec(), g.w_x.data().to_vec(), g.b.clone()];
    let imp_blocks = blocks(&imp.grad_params);
    let unr_blocks = blocks(&unr.grad_params);

    let theta = flat_params(layer);
    let fd = finite_diff_grad_oracle(
        |t| dot(&c, &fpi_forward(&with_params(layer, t), x, &cfg).unwrap().z_star),
        &theta,
        h,
    )
    .unwrap();
    let fd_x = finite_diff_grad_oracle(|xx| dot(&c, &fpi_forward(layer, xx, &cfg).unwrap().z_star), x, h).unwrap();
    let (d, m) = (layer.state_dim(), layer.input_dim());
    let fd_blocks = [fd[..d * d].to_vec(), fd[d * d..d * d + d * m].to_vec(), fd[d * d + d * m..].to_vec()];

    let mut e = GradErrors::default();
    for i in 0..3 {
        e.vs_unrolled = e.vs_unrolled.max(rel_err(&imp_blocks[i], &unr_blocks[i]));
        e.vs_fd = e.vs_fd.max(rel_err(&imp_blocks[i], &fd_blocks[i]));
    }
    e.vs_unrolled = e.vs_unrolled.max(rel_err(&imp.grad_x, &unr.grad_x));
    e.vs_fd = e.vs_fd.max(rel_err(&imp.grad_x, &fd_x));
    e
}

/// Largest `‖f(z₁) − f(z₂)‖ / ‖z₁ − z₂‖` over `pairs` random state pairs.
pub fn monte_carlo_lipschitz<R: Rng>(layer: &FpiLayer, x: &[f64], pairs: usize, rng: &mut R) -> f64 {
    let d = layer.state_dim();
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let z1 = random_vector(d, 2.0, rng);
        let z2 = random_vector(d, 2.0, rng);
        let gap = norm2(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
        if gap == 0.0 {
            continue;
        }
        let f1 = layer.forward(&z1, x).unwrap();
        let f2 = layer.forward(&z2, x).unwrap();
        let out = norm2(&f1.iter().zip(&f2).map(|(a, b)| a - b).collect::<Vec<_>>());
        worst = worst.max(out / gap);
    }
    worst
}
