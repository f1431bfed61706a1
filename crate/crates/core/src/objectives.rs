//! Training objectives as differentiable graphs.
//!
//! All objectives are maximized. Batch functions return one value per
//! example; [`total_objective`] averages them per example so the meaning of
//! `alpha` does not depend on the batch size. Noise is passed explicitly to
//! the batch builders so tests can match it across formulations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Reduce, Tape, Var};
use crate::distributions::{categorical_entropy, kl_diag_gaussians, reparam_sample};
use crate::error::{Error, Result};
use crate::model::{CcVae, ModelRef};
use crate::tensor::Tensor;

/// Per-example means of each term and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveTerms {
    pub labeled_elbo: f64,
    pub unlabeled_bound: f64,
    pub classifier_loss: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Graph handle for the total objective plus its term values.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveGraph {
    pub total: Var,
    pub terms: ObjectiveTerms,
}

/// Standard normal noise of the given shape.
pub fn standard_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

fn check_noise(eps: &Tensor, rows: usize, k: usize) -> Result<()> {
    if eps.shape() != [rows, k] {
        return Err(Error::shape("noise", eps.shape(), &[rows, k]));
    }
    Ok(())
}

/// `log p(x|z̃) − KL(q(z|x,y) || p(z|y))` per row, with `z̃` drawn from
/// `q(z|x,y)` using `eps` (rows × K). Adds `log p(y)` when the class prior is learned.
pub fn labeled_elbo_graph(
    tape: &mut Tape,
    m: ModelRef<'_>,
    x: Var,
    labels: &[usize],
    eps: &Tensor,
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if labels.len() != rows {
        return Err(Error::shape("labeled_elbo", tape.shape(x), &[labels.len()]));
    }
    check_noise(eps, rows, m.arch.latent_dim)?;
    let q = m.encode(tape, x, labels)?;
    let p = m.prior(tape, labels)?;
    let e = tape.leaf(eps.clone());
    let z = reparam_sample(tape, q, e)?;
    let lik = m.decode(tape, z)?;
    let ll = m.log_likelihood(tape, x, lik)?;
    let kl = kl_diag_gaussians(tape, q, p)?;
    let mut elbo = tape.sub(ll, kl)?;
    if m.arch.learn_class_prior {
        let lpy = m.class_log_prior(tape, labels)?;
        elbo = tape.add(elbo, lpy)?;
    }
    Ok(elbo)
}

/// Per-class bound terms, rows × L: entry `(i, y)` is
/// `log p(x_i|z̃_iy) − KL(q(z|x_i,y) || p(z|y))`.
///
/// `eps` has one row per (example, class) pair in example-major order.
/// The recognition trunk runs once for the whole batch.
pub fn per_class_terms_graph(tape: &mut Tape, m: ModelRef<'_>, x: Var, eps: &Tensor) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let l = m.arch.num_classes;
    check_noise(eps, rows * l, m.arch.latent_dim)?;
    let q = m.encode_all_classes(tape, x)?;
    let classes: Vec<usize> = (0..rows).flat_map(|_| 0..l).collect();
    let p = m.prior(tape, &classes)?;
    let e = tape.leaf(eps.clone());
    let z = reparam_sample(tape, q, e)?;
    let lik = m.decode(tape, z)?;
    let x_tiled = tape.gather_rows(x, (0..rows).flat_map(|i| std::iter::repeat_n(i, l)).collect())?;
    let ll = m.log_likelihood(tape, x_tiled, lik)?;
    let kl = kl_diag_gaussians(tape, q, p)?;
    let mut terms = tape.sub(ll, kl)?;
    if m.arch.learn_class_prior {
        let lpy = m.class_log_prior(tape, &classes)?;
        terms = tape.add(terms, lpy)?;
    }
    tape.reshape(terms, &[rows, l])
}

/// `Σ_y q(y|x) · term_y` per row, given `log q(y|x)` (rows × L).
pub fn ustar_from_terms(tape: &mut Tape, terms: Var, log_q: Var) -> Result<Var> {
    let q = tape.exp(log_q)?;
    let weighted = tape.mul(q, terms)?;
    tape.sum_rows(weighted)
}

/// `U*` per row: the class-marginalized bound without the entropy of `q(y|x)`.
pub fn unlabeled_bound_ustar_graph(tape: &mut Tape, m: ModelRef<'_>, x: Var, eps: &Tensor) -> Result<Var> {
    let terms = per_class_terms_graph(tape, m, x, eps)?;
    let log_q = m.classifier_log_probs(tape, x)?;
    ustar_from_terms(tape, terms, log_q)
}

/// `U = U* + H(q(y|x))` per row.
pub fn unlabeled_bound_full_graph(tape: &mut Tape, m: ModelRef<'_>, x: Var, eps: &Tensor) -> Result<Var> {
    let terms = per_class_terms_graph(tape, m, x, eps)?;
    let log_q = m.classifier_log_probs(tape, x)?;
    let ustar = ustar_from_terms(tape, terms, log_q)?;
    let h = categorical_entropy(tape, log_q)?;
    tape.add(ustar, h)
}

/// `log q(y|x)` per row.
pub fn classifier_graph(tape: &mut Tape, m: ModelRef<'_>, x: Var, labels: &[usize]) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if labels.len() != rows {
        return Err(Error::shape("classifier_loss", tape.shape(x), &[labels.len()]));
    }
    let lp = m.classifier_log_probs(tape, x)?;
    tape.pick_cols(lp, labels.to_vec())
}

/// A labeled minibatch: rows × D inputs plus one class index per row.
#[derive(Debug, Clone, Copy)]
pub struct Labeled<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
}

fn rows_of(x: &Tensor) -> usize {
    if x.numel() == 0 {
        0
    } else {
        x.shape()[0]
    }
}

/// `S = mean L + mean U* + alpha · mean C` on a fresh noise draw.
///
/// Either batch may be absent (or empty), but not both; an absent kind
/// contributes 0 to the total.
pub fn total_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    m: ModelRef<'_>,
    labeled: Option<Labeled<'_>>,
    unlabeled: Option<&Tensor>,
    alpha: f64,
    rng: &mut R,
) -> Result<ObjectiveGraph> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be finite and non-negative, got {alpha}")));
    }
    let labeled = labeled.filter(|b| rows_of(b.x) > 0);
    let unlabeled = unlabeled.filter(|x| rows_of(x) > 0);
    if labeled.is_none() && unlabeled.is_none() {
        return Err(Error::Dataset("both labeled and unlabeled batches are empty".into()));
    }
    let k = m.arch.latent_dim;
    let mut parts = Vec::new();
    let mut terms = ObjectiveTerms {
        labeled_elbo: 0.0,
        unlabeled_bound: 0.0,
        classifier_loss: 0.0,
        total: 0.0,
        alpha,
    };
    if let Some(b) = labeled {
        let n = rows_of(b.x);
        let x = tape.leaf(b.x.clone());
        let eps = standard_noise(rng, n, k);
        let elbo = labeled_elbo_graph(tape, m, x, b.y, &eps)?;
        let elbo = tape.reduce(Reduce::Mean, elbo)?;
        terms.labeled_elbo = tape.scalar(elbo)?;
        parts.push(elbo);
        if alpha > 0.0 {
            let c = classifier_graph(tape, m, x, b.y)?;
            let c = tape.reduce(Reduce::Mean, c)?;
            terms.classifier_loss = tape.scalar(c)?;
            parts.push(tape.scale(c, alpha)?);
        }
    }
    if let Some(xu) = unlabeled {
        let n = rows_of(xu);
        let x = tape.leaf(xu.clone());
        let eps = standard_noise(rng, n * m.arch.num_classes, k);
        let u = unlabeled_bound_ustar_graph(tape, m, x, &eps)?;
        let u = tape.reduce(Reduce::Mean, u)?;
        terms.unlabeled_bound = tape.scalar(u)?;
        parts.push(u);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    terms.total = tape.scalar(total)?;
    Ok(ObjectiveGraph { total, terms })
}

fn single_row(m: &CcVae, x: &Tensor) -> Result<Tensor> {
    if x.numel() != m.arch.data_dim {
        return Err(Error::shape("input", x.shape(), &[m.arch.data_dim]));
    }
    x.reshape(&[1, m.arch.data_dim])
}

fn eval_single<F>(m: &CcVae, x: &Tensor, build: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, ModelRef<'_>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(single_row(m, x)?);
    let out = build(&mut tape, m.view(), xv)?;
    tape.value(out).data().first().copied().ok_or(Error::NonFinite { op: "objective" })
}

/// Single-example labeled ELBO with noise `eps` (length K).
pub fn labeled_elbo(m: &CcVae, x: &Tensor, y: usize, eps: &Tensor) -> Result<f64> {
    let eps = eps.reshape(&[1, eps.numel()])?;
    eval_single(m, x, |t, mr, xv| labeled_elbo_graph(t, mr, xv, &[y], &eps))
}

/// Single-example `U*` with one noise row per class (L × K).
pub fn unlabeled_bound_ustar(m: &CcVae, x: &Tensor, eps: &Tensor) -> Result<f64> {
    eval_single(m, x, |t, mr, xv| unlabeled_bound_ustar_graph(t, mr, xv, eps))
}

/// Single-example `U = U* + H(q(y|x))` with one noise row per class.
pub fn unlabeled_bound_full(m: &CcVae, x: &Tensor, eps: &Tensor) -> Result<f64> {
    eval_single(m, x, |t, mr, xv| unlabeled_bound_full_graph(t, mr, xv, eps))
}

/// `log q(y|x)` for one example.
pub fn classifier_loss(m: &CcVae, x: &Tensor, y: usize) -> Result<f64> {
    eval_single(m, x, |t, mr, xv| classifier_graph(t, mr, xv, &[y]))
}
