use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ApproxError;
use crate::engine::{Engine, Eval, EvalResult, TapeEngine};
use crate::tensor::{AdamW, Tensor};

pub const HIDDEN: usize = 16;

/// Softmax surrogate `S(x)_i = x_i * T(sum_j relu((x_j/2 + 1)^3))`.
///
/// `T` is a 1-16-16-1 relu network approximating a reciprocal. Its input is
/// scaled by `1/dim`, folded into the first layer's weights at evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxEstimator {
    pub dim: usize,
    pub params: BTreeMap<String, Tensor>,
    pub frozen: bool,
}

impl SoftmaxEstimator {
    pub fn new(dim: usize, seed: u64) -> Result<Self, ApproxError> {
        if dim < 2 {
            return Err(ApproxError::InvalidSpec(format!("estimator row length must be at least 2, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| {
            let d = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("positive std");
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| d.sample(&mut rng)).collect()).expect("shape")
        };
        let mut params = BTreeMap::new();
        params.insert("l1.weight".into(), normal(1, HIDDEN));
        params.insert("l1.bias".into(), Tensor::full(&[HIDDEN], 0.1));
        params.insert("l2.weight".into(), normal(HIDDEN, HIDDEN));
        params.insert("l2.bias".into(), Tensor::full(&[HIDDEN], 0.1));
        params.insert("l3.weight".into(), normal(HIDDEN, 1));
        params.insert("l3.bias".into(), Tensor::zeros(&[1]));
        Ok(SoftmaxEstimator { dim, params, frozen: true })
    }

    fn p<E: Engine>(&self, eng: &mut E, name: &str) -> EvalResult<E::Value> {
        eng.param(&format!("est.{name}"), &self.params[name])
    }

    /// `T` applied to a column of row statistics `z`, shape `[rows x 1]`.
    pub fn reciprocal<E: Engine>(&self, eng: &mut E, z: &E::Value) -> EvalResult<E::Value> {
        let w1 = self.p(eng, "l1.weight")?;
        let w1 = eng.scale(&w1, 1.0 / self.dim as f64)?;
        let b1 = self.p(eng, "l1.bias")?;
        let w2 = self.p(eng, "l2.weight")?;
        let b2 = self.p(eng, "l2.bias")?;
        let w3 = self.p(eng, "l3.weight")?;
        let b3 = self.p(eng, "l3.bias")?;
        let a = eng.matmul(z, &w1)?;
        let a = eng.add(&a, &b1)?;
        let a = eng.relu(&a)?;
        let a = eng.matmul(&a, &w2)?;
        let a = eng.add(&a, &b2)?;
        let a = eng.relu(&a)?;
        let a = eng.matmul(&a, &w3)?;
        eng.add(&a, &b3)
    }

    /// The row statistic `z = sum_j relu((x_j/2 + 1)^3)`, shape `[rows x 1]`.
    pub fn row_statistic<E: Engine>(&self, eng: &mut E, x: &E::Value) -> EvalResult<E::Value> {
        let h = eng.scale(x, 0.5)?;
        let one = eng.constant(Tensor::scalar(1.0))?;
        let u = eng.add(&h, &one)?;
        let u2 = eng.mul(&u, &u)?;
        let u3 = eng.mul(&u2, &u)?;
        let r = eng.relu(&u3)?;
        eng.sum_axis(&r, 1, true)
    }

    /// Row-wise estimate over a `[rows x len]` matrix of scores.
    pub fn forward<E: Engine>(&self, eng: &mut E, x: &E::Value) -> EvalResult<E::Value> {
        let z = self.row_statistic(eng, x)?;
        let t = self.reciprocal(eng, &z)?;
        eng.mul(x, &t)
    }

    pub fn estimate(&self, x: &Tensor) -> EvalResult<Tensor> {
        let m = if x.rank() == 1 { x.reshape(&[1, x.len()])? } else { x.clone() };
        let out = self.forward(&mut Eval, &m)?;
        Ok(out.reshape(x.shape())?)
    }

    /// Per-element MSE against exact softmax over the rows of `x`.
    pub fn mse(&self, x: &Tensor) -> EvalResult<f64> {
        let est = self.estimate(x)?;
        Ok(est.mse(&x.softmax(x.rank() - 1)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub dim: usize,
    pub seed: u64,
    pub max_steps: usize,
    pub lr: f64,
    pub batch: usize,
    /// Rows in the generated pool; a tenth is held out.
    pub pool_rows: usize,
    /// Early-stop once the running train MSE reaches this.
    pub target_mse: f64,
    /// Held-out MSE above which training is reported as not converged.
    pub converge_mse: f64,
    pub log_every: usize,
}

impl EstimatorConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        EstimatorConfig {
            dim,
            seed,
            max_steps: 100_000,
            lr: 1e-3,
            batch: 256,
            pool_rows: 40_960,
            target_mse: 1e-6,
            converge_mse: 1e-4,
            log_every: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorReport {
    pub dim: usize,
    pub steps: usize,
    pub train_mse: f64,
    pub heldout_mse: f64,
    pub reached_target: bool,
}

impl EstimatorReport {
    pub fn to_kv(&self) -> String {
        format!(
            "dim={}\nsteps={}\ntrain_mse={:e}\nheldout_mse={:e}\nreached_target={}\n",
            self.dim, self.steps, self.train_mse, self.heldout_mse, self.reached_target
        )
    }
}

/// Uniform `[-3, 3]` rows of length `dim`.
pub fn sample_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Tensor {
    Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-3.0..=3.0)).collect()).expect("shape")
}

/// Trains `T` on random rows until the running MSE reaches the target or
/// the step budget runs out. Never fails on accuracy; see [`train_estimator`].
pub fn fit_estimator(cfg: &EstimatorConfig) -> Result<(SoftmaxEstimator, EstimatorReport), ApproxError> {
    let mut est = SoftmaxEstimator::new(cfg.dim, cfg.seed)?;
    if cfg.batch == 0 || cfg.pool_rows < 10 {
        return Err(ApproxError::InvalidSpec("estimator batch and pool must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_50f7);
    let pool = sample_rows(&mut rng, cfg.pool_rows, cfg.dim);
    let held = cfg.pool_rows / 10;
    let heldout = pool.slice_rows(0, held)?;
    let train = pool.slice_rows(held, cfg.pool_rows)?;
    let train_rows = cfg.pool_rows - held;
    let mut opt = AdamW::new(cfg.lr, 0.0);
    let mut steps = 0;
    let mut reached = false;
    let window = cfg.log_every.max(1);
    let mut acc = 0.0;
    let mut acc_n = 0;
    while steps < cfg.max_steps {
        let ids: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..train_rows)).collect();
        let x = train.gather_rows(&ids)?;
        let target = x.softmax(1)?;
        let mut eng = TapeEngine::new(|_: &str| true);
        let xv = eng.constant(x)?;
        let out = est.forward(&mut eng, &xv)?;
        let tv = eng.constant(target)?;
        let loss = eng.tape.mean_squared(out, tv)?;
        let lv = eng.tape.value(loss).item();
        let grads = eng.tape.backward(loss)?;
        let mut updates: Vec<(String, Tensor, Tensor)> = eng
            .trainable_params()
            .into_iter()
            .map(|(name, var)| {
                let key = name.trim_start_matches("est.").to_string();
                let g = grads.get(var).cloned().unwrap_or_else(|| Tensor::zeros(est.params[&key].shape()));
                (key.clone(), est.params[&key].clone(), g)
            })
            .collect();
        drop(eng);
        opt.step(updates.iter_mut().map(|(n, p, g)| (n.as_str(), p, &*g)))?;
        for (n, p, _) in updates {
            est.params.insert(n, p);
        }
        steps += 1;
        acc += lv;
        acc_n += 1;
        if acc_n == window {
            let running = acc / acc_n as f64;
            acc = 0.0;
            acc_n = 0;
            if running <= cfg.target_mse {
                reached = true;
                break;
            }
        }
    }
    let train_mse = est.mse(&train)?;
    let heldout_mse = est.mse(&heldout)?;
    let report = EstimatorReport { dim: cfg.dim, steps, train_mse, heldout_mse, reached_target: reached };
    Ok((est, report))
}

/// [`fit_estimator`] gated on held-out accuracy.
pub fn train_estimator(cfg: &EstimatorConfig) -> Result<(SoftmaxEstimator, EstimatorReport), ApproxError> {
    let (est, report) = fit_estimator(cfg)?;
    if report.heldout_mse > cfg.converge_mse || !report.heldout_mse.is_finite() {
        return Err(ApproxError::DidNotConverge { report, estimator: Box::new(est) });
    }
    Ok((est, report))
}

/// Lowest MSE any estimator of this form can reach on `rows`: the best
/// per-row multiplier `c` for `x_i * c`, solved in closed form.
pub fn structural_floor(rows: &Tensor) -> f64 {
    let (n, d) = (rows.shape()[0], rows.shape()[1]);
    let sm = rows.softmax(1).expect("finite rows");
    let mut total = 0.0;
    for r in 0..n {
        let (mut xs, mut xx) = (0.0, 0.0);
        for j in 0..d {
            xs += rows.at(r, j) * sm.at(r, j);
            xx += rows.at(r, j) * rows.at(r, j);
        }
        let c = if xx > 0.0 { xs / xx } else { 0.0 };
        for j in 0..d {
            total += (rows.at(r, j) * c - sm.at(r, j)).powi(2);
        }
    }
    total / (n * d) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Primitive, Traced};

    #[test]
    fn rejects_short_rows() {
        assert!(matches!(SoftmaxEstimator::new(1, 0), Err(ApproxError::InvalidSpec(_))));
    }

    #[test]
    fn symmetric_row_gives_equal_entries() {
        let est = SoftmaxEstimator::new(2, 1).unwrap();
        let x = Tensor::matrix(1, 2, vec![2.0, 2.0]).unwrap();
        let z = est.row_statistic(&mut Eval, &x).unwrap();
        assert_eq!(z.item(), 16.0);
        let t = est.reciprocal(&mut Eval, &z).unwrap().item();
        let out = est.estimate(&x).unwrap();
        assert_eq!(out.data(), &[2.0 * t, 2.0 * t]);
    }

    #[test]
    fn permutation_equivariant_and_proportional() {
        let est = SoftmaxEstimator::new(5, 2).unwrap();
        let x = Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, -2.9]);
        let p = Tensor::vector(vec![2.5, 0.3, -2.9, -1.2, 0.0]);
        let ex = est.estimate(&x).unwrap();
        let ep = est.estimate(&p).unwrap();
        let perm = [2, 0, 4, 1, 3];
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(ep.data()[i], ex.data()[src]);
        }
        let ratios: Vec<f64> = [0, 1, 2, 4].iter().map(|&i| ex.data()[i] / x.data()[i]).collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() <= 1e-12 * ratios[0].abs().max(1.0));
        }
        assert_eq!(ex.data()[3], 0.0);
    }

    #[test]
    fn only_add_mul_relu() {
        let est = SoftmaxEstimator::new(4, 3).unwrap();
        let mut t = Traced::new(Eval);
        let x = Tensor::zeros(&[3, 4]);
        est.forward(&mut t, &x).unwrap();
        assert!(t.trace.he_compatible());
        assert_eq!(t.trace.count(Primitive::Relu), 3);
    }

    #[test]
    fn short_training_approaches_structural_floor() {
        let mut cfg = EstimatorConfig::new(8, 7);
        cfg.max_steps = 3000;
        cfg.pool_rows = 4096;
        let (est, report) = fit_estimator(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows = sample_rows(&mut rng, 2000, 8);
        let floor = structural_floor(&rows);
        let initial = SoftmaxEstimator::new(8, 7).unwrap().mse(&rows).unwrap();
        assert!(report.heldout_mse < initial, "{report:?}");
        assert!(est.mse(&rows).unwrap() < 3.0 * floor, "mse {} floor {floor}", est.mse(&rows).unwrap());
        assert!(report.heldout_mse <= 10.0 * report.train_mse);
    }

    #[test]
    fn gate_reports_non_convergence() {
        let mut cfg = EstimatorConfig::new(4, 8);
        cfg.max_steps = 10;
        cfg.pool_rows = 512;
        match train_estimator(&cfg) {
            Err(ApproxError::DidNotConverge { report, estimator }) => {
                assert_eq!(report.steps, 10);
                assert_eq!(estimator.dim, 4);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
