//! Log-densities, KL divergence, entropy and reparametrized sampling.
//!
//! Graph-level functions work on batches: every input is a `rows × d` node
//! and every output is a `[rows]` vector with one value per row. The value
//! types ([`DiagGaussian`], [`BernoulliVec`], [`CategoricalDist`]) are thin
//! single-example wrappers that evaluate the same graph code on a scratch tape.

use std::f64::consts::PI;

use crate::autodiff::{sigmoid, Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Batched diagonal Gaussian on a tape; variances are stored as log-variances.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNode {
    pub mean: Var,
    pub log_var: Var,
}

/// `mean + exp(log_var / 2) ⊙ eps`.
pub fn reparam_sample(tape: &mut Tape, q: GaussianNode, eps: Var) -> Result<Var> {
    let half = tape.scale(q.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let dev = tape.mul(std, eps)?;
    tape.add(q.mean, dev)
}

/// Closed-form `KL(q || p)` summed over the latent dimensions of each row.
pub fn kl_diag_gaussians(tape: &mut Tape, q: GaussianNode, p: GaussianNode) -> Result<Var> {
    // variance ratio as exp(lv_q − lv_p) so that q = p gives exactly 0
    let log_ratio = tape.sub(q.log_var, p.log_var)?;
    let var_ratio = tape.exp(log_ratio)?;
    let diff = tape.sub(q.mean, p.mean)?;
    let sq = tape.square(diff)?;
    let neg_p = tape.neg(p.log_var)?;
    let inv_p_var = tape.exp(neg_p)?;
    let maha = tape.mul(sq, inv_p_var)?;
    let inner = tape.sub(var_ratio, log_ratio)?;
    let inner = tape.add(inner, maha)?;
    let inner = tape.add_const(inner, -1.0)?;
    let per_dim = tape.scale(inner, 0.5)?;
    tape.sum_rows(per_dim)
}

/// `Σ x log p + (1 − x) log(1 − p)` with `p = sigmoid(logits)`, computed as
/// `x·l − softplus(l)` so saturated logits never produce `log 0`.
pub fn bernoulli_log_prob(tape: &mut Tape, x: Var, logits: Var) -> Result<Var> {
    let xl = tape.mul(x, logits)?;
    let sp = tape.activation(Activation::Softplus, logits)?;
    let per_dim = tape.sub(xl, sp)?;
    tape.sum_rows(per_dim)
}

pub fn gaussian_log_prob(tape: &mut Tape, x: Var, g: GaussianNode) -> Result<Var> {
    let diff = tape.sub(x, g.mean)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(g.log_var)?;
    let inv_var = tape.exp(neg_lv)?;
    let maha = tape.mul(sq, inv_var)?;
    let inner = tape.add(maha, g.log_var)?;
    let inner = tape.add_const(inner, LN_2PI)?;
    let per_dim = tape.scale(inner, -0.5)?;
    tape.sum_rows(per_dim)
}

/// Row-wise `−Σ p log p` from log-probabilities.
pub fn categorical_entropy(tape: &mut Tape, log_probs: Var) -> Result<Var> {
    let probs = tape.exp(log_probs)?;
    let plogp = tape.mul(probs, log_probs)?;
    let s = tape.sum_rows(plogp)?;
    tape.neg(s)
}

fn as_row(t: &Tensor) -> Result<Tensor> {
    t.reshape(&[1, t.numel()])
}

fn single(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v).item()
}

/// Diagonal Gaussian over a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() || mean.rank() != 1 {
            return Err(Error::shape("DiagGaussian", mean.shape(), log_var.shape()));
        }
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Tensor::zeros(&[dim]),
            log_var: Tensor::zeros(&[dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn variance(&self) -> Tensor {
        self.log_var.map(f64::exp)
    }

    pub fn std_dev(&self) -> Tensor {
        self.log_var.map(|v| (0.5 * v).exp())
    }

    fn on_tape(&self, tape: &mut Tape) -> Result<GaussianNode> {
        Ok(GaussianNode {
            mean: tape.leaf(as_row(&self.mean)?),
            log_var: tape.leaf(as_row(&self.log_var)?),
        })
    }

    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        if eps.shape() != self.mean.shape() {
            return Err(Error::shape("reparam_sample", self.mean.shape(), eps.shape()));
        }
        let mut tape = Tape::new();
        let q = self.on_tape(&mut tape)?;
        let e = tape.leaf(as_row(eps)?);
        let z = reparam_sample(&mut tape, q, e)?;
        tape.value(z).reshape(&[self.dim()])
    }

    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        if self.dim() != p.dim() {
            return Err(Error::shape("kl_diag_gaussians", self.mean.shape(), p.mean.shape()));
        }
        let mut tape = Tape::new();
        let q = self.on_tape(&mut tape)?;
        let p = p.on_tape(&mut tape)?;
        let kl = kl_diag_gaussians(&mut tape, q, p)?;
        single(&tape, kl)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape("gaussian_log_prob", self.mean.shape(), x.shape()));
        }
        let mut tape = Tape::new();
        let g = self.on_tape(&mut tape)?;
        let x = tape.leaf(as_row(x)?);
        let lp = gaussian_log_prob(&mut tape, x, g)?;
        single(&tape, lp)
    }

    /// Density at `x` (not log).
    pub fn density(&self, x: &[f64]) -> f64 {
        let mut log = 0.0;
        for ((&xi, &m), &lv) in x.iter().zip(self.mean.data()).zip(self.log_var.data()) {
            log += -0.5 * ((2.0 * PI).ln() + lv + (xi - m) * (xi - m) / lv.exp());
        }
        log.exp()
    }
}

/// Independent Bernoulli variables parametrized by their logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliVec {
    pub logits: Tensor,
}

impl BernoulliVec {
    pub fn from_logits(logits: Tensor) -> Self {
        BernoulliVec { logits }
    }

    /// Success probabilities, each in `(0, 1)` for moderate logits.
    pub fn probs(&self) -> Tensor {
        self.logits.map(sigmoid)
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        if x.shape() != self.logits.shape() {
            return Err(Error::shape("bernoulli_log_prob", self.logits.shape(), x.shape()));
        }
        check_binary(x)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(as_row(x)?);
        let l = tape.leaf(as_row(&self.logits)?);
        let lp = bernoulli_log_prob(&mut tape, xv, l)?;
        single(&tape, lp)
    }
}

pub fn check_binary(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Domain {
            op: "bernoulli_log_prob",
            reason: format!("non-binary observation {v}"),
        }),
        None => Ok(()),
    }
}

/// Discrete distribution over `L` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    pub probs: Tensor,
}

impl CategoricalDist {
    pub fn new(probs: Tensor) -> Result<Self> {
        let sum = probs.sum();
        if probs.data().iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain {
                op: "CategoricalDist",
                reason: format!("not a distribution (sum {sum})"),
            });
        }
        Ok(CategoricalDist { probs })
    }

    pub fn uniform(classes: usize) -> Self {
        CategoricalDist {
            probs: Tensor::full(&[classes], 1.0 / classes as f64),
        }
    }

    pub fn from_log_probs(log_probs: &[f64]) -> Result<Self> {
        CategoricalDist::new(Tensor::vector(log_probs.iter().map(|v| v.exp()).collect())?)
    }

    pub fn num_classes(&self) -> usize {
        self.probs.numel()
    }

    /// `−Σ p log p` with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .data()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Most probable class; lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(self.probs.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn vec1(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    fn random_gaussian(d: usize, rng: &mut ChaCha8Rng) -> DiagGaussian {
        DiagGaussian::new(
            vec1(&(0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>()),
            vec1(&(0..d).map(|_| rng.random_range(-1.5..1.0)).collect::<Vec<_>>()),
        )
        .unwrap()
    }

    #[test]
    fn reparam_examples() {
        let q = DiagGaussian::new(vec1(&[0.3, -1.0]), vec1(&[0.2, 1.0])).unwrap();
        assert_eq!(q.sample(&vec1(&[0.0, 0.0])).unwrap(), q.mean);
        let unit = DiagGaussian::standard(1);
        assert_eq!(unit.sample(&vec1(&[1.5])).unwrap().data(), &[1.5]);
        assert!(q.sample(&vec1(&[0.0])).is_err());
    }

    #[test]
    fn reparam_is_affine_in_noise() {
        let q = DiagGaussian::new(vec1(&[0.5, 2.0, -1.0]), vec1(&[0.0, -0.7, 0.9])).unwrap();
        let e1 = vec1(&[0.25, -1.0, 2.0]);
        let e2 = vec1(&[1.0, 0.5, -0.5]);
        let (a, b) = (2.0, -0.5);
        let combo = vec1(&e1.data().iter().zip(e2.data()).map(|(x, y)| a * x + b * y).collect::<Vec<_>>());
        let lhs = q.sample(&combo).unwrap();
        let d1 = q.sample(&e1).unwrap().sub(&q.mean).unwrap();
        let d2 = q.sample(&e2).unwrap().sub(&q.mean).unwrap();
        for i in 0..3 {
            let rhs = a * d1.data()[i] + b * d2.data()[i] + q.mean.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn reparam_moments_monte_carlo() {
        let q = DiagGaussian::new(vec1(&[1.0]), vec1(&[(0.25f64).ln()])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| q.sample(&vec1(&[rng.sample(StandardNormal)])).unwrap().data()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se_mean = (0.25 / n as f64).sqrt();
        let se_var = 0.25 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 1.0).abs() < 4.0 * se_mean, "{mean}");
        assert!((var - 0.25).abs() < 4.0 * se_var, "{var}");
    }

    #[test]
    fn kl_examples() {
        let p = DiagGaussian::new(vec1(&[0.4, -0.2]), vec1(&[0.3, -0.1])).unwrap();
        assert_eq!(p.kl(&p).unwrap(), 0.0);
        let q = DiagGaussian::new(vec1(&[1.0]), vec1(&[0.0])).unwrap();
        assert!((q.kl(&DiagGaussian::standard(1)).unwrap() - 0.5).abs() < 1e-15);
        assert!(q.kl(&DiagGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_non_negative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let q = random_gaussian(4, &mut rng);
            let p = random_gaussian(4, &mut rng);
            assert!(q.kl(&p).unwrap() > 0.0);
            assert!(q.kl(&q).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn bernoulli_examples() {
        let half = BernoulliVec::from_logits(vec1(&[0.0]));
        assert!((half.log_prob(&vec1(&[1.0])).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        let sharp = BernoulliVec::from_logits(vec1(&[40.0, -40.0]));
        assert!(sharp.log_prob(&vec1(&[1.0, 0.0])).unwrap().abs() < 1e-15);
        assert!(half.log_prob(&vec1(&[0.5])).is_err());
    }

    #[test]
    fn bernoulli_stable_form_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let probs: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..0.99)).collect();
            let x: Vec<f64> = (0..8).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
            let naive: f64 = x
                .iter()
                .zip(&probs)
                .map(|(x, p)| x * p.ln() + (1.0 - x) * (1.0 - p).ln())
                .sum();
            let stable = BernoulliVec::from_logits(vec1(&logits)).log_prob(&vec1(&x)).unwrap();
            assert!((stable - naive).abs() < 1e-10, "{stable} {naive}");
        }
    }

    #[test]
    fn gaussian_log_prob_examples() {
        let g = DiagGaussian::new(vec1(&[0.7]), vec1(&[0.0])).unwrap();
        let at_mean = g.log_prob(&vec1(&[0.7])).unwrap();
        assert!((at_mean + 0.918_938_533_204_672_7).abs() < 1e-12);
        let at_sigma = g.log_prob(&vec1(&[1.7])).unwrap();
        assert!((at_sigma - (at_mean - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        let g = DiagGaussian::new(vec1(&[0.3]), vec1(&[(0.8f64).ln()])).unwrap();
        let (lo, hi, n) = (-10.0, 10.0, 20_000);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let x = lo + (i as f64 + 0.5) * h;
                g.log_prob(&vec1(&[x])).unwrap().exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn entropy_examples() {
        assert!((CategoricalDist::uniform(10).entropy() - 10f64.ln()).abs() < 1e-12);
        let one_hot = CategoricalDist::new(vec1(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(one_hot.entropy(), 0.0);
        let c = CategoricalDist::new(vec1(&[0.5, 0.25, 0.25])).unwrap();
        assert!((c.entropy() - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!(CategoricalDist::new(vec1(&[0.5, 0.6])).is_err());
    }

    #[test]
    fn entropy_maximal_at_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let l = rng.random_range(2..12);
            let w: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
            let s: f64 = w.iter().sum();
            let c = CategoricalDist::new(vec1(&w.iter().map(|v| v / s).collect::<Vec<_>>())).unwrap();
            assert!(c.entropy() <= (l as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn graph_entropy_matches_value_entropy() {
        let lp = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let mut t = Tape::new();
        let v = t.leaf(Tensor::matrix(1, 3, lp.to_vec()).unwrap());
        let h = categorical_entropy(&mut t, v).unwrap();
        let direct = CategoricalDist::from_log_probs(&lp).unwrap().entropy();
        assert!((t.scalar(h).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn log_probs_and_kl_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut m = || Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (a, b, c, x) = (m(), m(), m(), m());
        let (a2, b2, c2) = (a.clone(), b.clone(), c.clone());
        // KL w.r.t. each of the four inputs, by packing them through a leaf
        for which in 0..4 {
            let (a, b, c, x) = (a.clone(), b.clone(), c.clone(), x.clone());
            let at = [&a, &b, &c, &x][which].clone();
            let err = grad_check(
                move |t, v| {
                    let mut ins = [a.clone(), b.clone(), c.clone(), x.clone()].map(|tt| t.leaf(tt));
                    ins[which] = v;
                    let q = GaussianNode { mean: ins[0], log_var: ins[1] };
                    let p = GaussianNode { mean: ins[2], log_var: ins[3] };
                    let kl = kl_diag_gaussians(t, q, p)?;
                    t.sum(kl)
                },
                &at,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "kl input {which}: {err}");
        }
        let bits = Tensor::matrix(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = grad_check(
            move |t, l| {
                let x = t.leaf(bits.clone());
                let lp = bernoulli_log_prob(t, x, l)?;
                t.sum(lp)
            },
            &a2,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "bernoulli {err}");
        let target = c2.clone();
        let err = grad_check(
            move |t, lv| {
                let x = t.leaf(target.clone());
                let mean = t.leaf(b2.clone());
                let lp = gaussian_log_prob(t, x, GaussianNode { mean, log_var: lv })?;
                t.sum(lp)
            },
            &c2,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "gaussian {err}");
    }
}
