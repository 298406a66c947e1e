//! Central finite-difference gradient verification.
//!
//! This is the independent oracle for the autodiff engine: it only ever calls
//! forward passes, perturbing raw buffers one coordinate at a time, and never
//! touches `backward()`. Checks are meaningful at `f64`; at `f32` the
//! difference quotient drowns in rounding error.

use crate::tensor::Tensor;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely: |a − n| / max(|a|, |n|, 1).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Numeric gradient of `loss_fn` w.r.t. one coordinate of `t`, central
/// difference with step `h`.
pub fn numeric_grad_at(loss_fn: &mut dyn FnMut() -> f64, t: &Tensor<f64>, idx: usize, h: f64) -> f64 {
    t.nudge(idx, h);
    let up = loss_fn();
    t.nudge(idx, -2.0 * h);
    let down = loss_fn();
    t.nudge(idx, h);
    (up - down) / (2.0 * h)
}

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares analytic gradients (already populated on the tensors by a prior
/// `backward()`) against central finite differences of `loss_fn`.
///
/// `coords_per_tensor` caps how many coordinates are probed per tensor
/// (`None` = all), sampled deterministically by striding.
pub fn compare_grads(
    loss_fn: &mut dyn FnMut() -> f64,
    tensors: &[(String, Tensor<f64>)],
    h: f64,
    coords_per_tensor: Option<usize>,
) -> CheckReport {
    let mut report = CheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };
    for (name, t) in tensors {
        let analytic = t
            .grad()
            .unwrap_or_else(|| panic!("no gradient populated on `{name}`"));
        let n = t.len();
        let take = coords_per_tensor.unwrap_or(n).min(n);
        let stride = (n / take).max(1);
        let mut checked = 0;
        let mut idx = 0;
        while checked < take && idx < n {
            let numeric = numeric_grad_at(loss_fn, t, idx, h);
            let err = rel_err(analytic[idx], numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), idx, analytic[idx], numeric));
            }
            report.coords_checked += 1;
            checked += 1;
            idx += stride;
        }
    }
    report
}

/// One-shot check: runs `loss_fn` once through `build_loss` to populate
/// gradients, then sweeps finite differences. Tensors are zero-grad'ed first.
pub fn check(
    build_loss: &mut dyn FnMut() -> Tensor<f64>,
    tensors: &[(String, Tensor<f64>)],
    h: f64,
    coords_per_tensor: Option<usize>,
) -> CheckReport {
    for (_, t) in tensors {
        t.zero_grad();
    }
    let loss = build_loss();
    loss.backward();
    let mut eval = || build_loss().item();
    compare_grads(&mut eval, tensors, h, coords_per_tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_grads_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(vec![3, 2], 1.0, &mut rng);
            let a = Tensor::param(vec![4, 3], a.to_vec());
            let b = Tensor::param(vec![3, 2], b.to_vec());
            let w = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
            let (ac, bc, wc) = (a.clone(), b.clone(), w.clone());
            let mut build = move || ac.matmul(&bc).mul(&wc).sum_all();
            let report = check(
                &mut build,
                &[("a".into(), a.clone()), ("b".into(), b.clone())],
                1e-3,
                None,
            );
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn softmax_grads_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::param(vec![8], Tensor::<f64>::randn(vec![8], 1.0, &mut rng).to_vec());
            let w = Tensor::<f64>::randn(vec![8], 1.0, &mut rng);
            let (xc, wc) = (x.clone(), w.clone());
            let mut build = move || xc.softmax(0).mul(&wc).sum_all();
            let report = check(&mut build, &[("x".into(), x.clone())], 1e-3, None);
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn layer_norm_grads_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = Tensor::param(vec![2, 6], Tensor::<f64>::randn(vec![2, 6], 1.0, &mut rng).to_vec());
            let gain = Tensor::param(vec![6], Tensor::<f64>::randn(vec![6], 0.5, &mut rng).to_vec());
            let bias = Tensor::param(vec![6], Tensor::<f64>::randn(vec![6], 0.5, &mut rng).to_vec());
            let w = Tensor::<f64>::randn(vec![2, 6], 1.0, &mut rng);
            let (xc, gc, bc, wc) = (x.clone(), gain.clone(), bias.clone(), w.clone());
            let mut build = move || xc.layer_norm(&gc, &bc, 1e-5).mul(&wc).sum_all();
            let report = check(
                &mut build,
                &[("x".into(), x.clone()), ("gain".into(), gain.clone()), ("bias".into(), bias.clone())],
                1e-3,
                None,
            );
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gelu_grads_at_fixed_points() {
        let x = Tensor::<f64>::param(vec![4], vec![-2.0, -0.5, 0.5, 2.0]);
        let xc = x.clone();
        let mut build = move || xc.gelu().sum_all();
        let report = check(&mut build, &[("x".into(), x.clone())], 1e-3, None);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x = Tensor::param(vec![6], Tensor::<f64>::randn(vec![6], 1.0, &mut rng).to_vec());
            let xc = x.clone();
            let mut build = move || xc.cross_entropy(2);
            let report = check(&mut build, &[("x".into(), x.clone())], 1e-3, None);
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");

            // closed form
            let probs = x.softmax(0).to_vec();
            let grad = x.grad().unwrap();
            for (i, (&g, &p)) in grad.iter().zip(&probs).enumerate() {
                let expect = if i == 2 { p - 1.0 } else { p };
                assert!((g - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rows_grads_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let x = Tensor::param(vec![3, 4], Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng).to_vec());
            let w = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
            let (xc, wc) = (x.clone(), w.clone());
            let mut build = move || xc.normalize_rows().mul(&wc).sum_all();
            let report = check(&mut build, &[("x".into(), x.clone())], 1e-3, None);
            assert!(report.passes(1e-4), "seed {seed}: {report:?}");
        }
    }
}
