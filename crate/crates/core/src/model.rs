//! The class-conditional VAE: per-class Gaussian priors, a recognition
//! network whose latent mean is shifted by a per-class bias, a generative
//! network, and a softmax or ordmax classifier with its own trunk.
//!
//! Graph-building methods live on [`ModelRef`], a borrowed view of an
//! architecture plus a parameter store, so gradient checks can evaluate the
//! same code against perturbed copies of the parameters.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax_row, Activation, ParamStore, Tape, Var};
use crate::distributions::{BernoulliVec, CategoricalDist, DiagGaussian, GaussianNode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Softmax,
    Ordmax,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Ordmax => "ordmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Bernoulli,
    Gaussian,
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub recognition_hidden: Vec<usize>,
    pub generative_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub activation: Activation,
    pub output: OutputKind,
    /// Gaussian output only: one learned log-variance per data dimension,
    /// independent of `z`, instead of a variance head.
    pub global_variance: bool,
    pub head: HeadKind,
    /// Raw label values in class-index order; ordmax centers and absolute
    /// label errors are computed from these.
    pub label_values: Vec<f64>,
    pub learn_class_prior: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Architecture(m));
        if self.data_dim == 0 || self.latent_dim == 0 {
            return bad("data and latent dimensions must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("need at least one class".into());
        }
        if self.head == HeadKind::Ordmax && self.num_classes < 2 {
            return bad("ordmax needs at least two classes".into());
        }
        let layers = self
            .recognition_hidden
            .iter()
            .chain(&self.generative_hidden)
            .chain(&self.classifier_hidden);
        if layers.into_iter().any(|&h| h == 0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if self.label_values.len() != self.num_classes {
            return bad(format!(
                "{} label values for {} classes",
                self.label_values.len(),
                self.num_classes
            ));
        }
        if self.label_values.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("label values must be strictly increasing".into());
        }
        Ok(())
    }

    /// Label values `0, 1, ..., L-1`.
    pub fn default_labels(num_classes: usize) -> Vec<f64> {
        (0..num_classes).map(|v| v as f64).collect()
    }
}

/// `labels − mean(labels)`.
pub fn make_ordinal_centers(labels: &[f64]) -> Result<Tensor> {
    if labels.is_empty() || labels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Architecture(
            "ordinal labels must be non-empty and strictly increasing".into(),
        ));
    }
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    Tensor::vector(labels.iter().map(|v| v - mean).collect())
}

/// Max-subtracted softmax.
pub fn softmax_probs(logits: &Tensor) -> Result<CategoricalDist> {
    CategoricalDist::from_log_probs(&log_softmax_row(logits.data()).collect::<Vec<_>>())
}

/// Ordinal softmax on a tape: `log p_k ∝ −(u − µ_k)² / s` with `s = exp(log_s)`.
///
/// `u` is `rows × 1`, `log_s` a single element, `centers` the fixed `µ_k`.
pub fn ordmax_log_probs(tape: &mut Tape, u: Var, log_s: Var, centers: &Tensor) -> Result<Var> {
    let l = centers.numel();
    let ones = tape.leaf(Tensor::ones(&[1, l]));
    let spread = tape.matmul(u, ones)?;
    let neg_centers = tape.leaf(centers.scale(-1.0));
    let diff = tape.add_row(spread, neg_centers)?;
    let sq = tape.square(diff)?;
    let neg_log_s = tape.neg(log_s)?;
    let inv_s = tape.exp(neg_log_s)?;
    let scaled = tape.mul_scalar(sq, inv_s)?;
    let exponents = tape.neg(scaled)?;
    tape.log_softmax(exponents)
}

/// Ordmax probabilities for a single mapping value `u` and scale `s > 0`.
pub fn ordmax_probs(u: f64, s: f64, centers: &Tensor) -> Result<CategoricalDist> {
    if !(s > 0.0) {
        return Err(Error::Domain {
            op: "ordmax_probs",
            reason: format!("scale must be positive, got {s}"),
        });
    }
    if centers.data().windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Domain {
            op: "ordmax_probs",
            reason: "centers must be strictly increasing".into(),
        });
    }
    let mut tape = Tape::new();
    let u = tape.leaf(Tensor::matrix(1, 1, vec![u])?);
    let log_s = tape.leaf(Tensor::scalar(s.ln()));
    let lp = ordmax_log_probs(&mut tape, u, log_s, centers)?;
    CategoricalDist::from_log_probs(tape.value(lp).data())
}

/// Counts recognition-trunk evaluations.
#[derive(Debug, Default)]
pub struct PassCounter {
    calls: AtomicUsize,
    rows: AtomicUsize,
}

impl PassCounter {
    /// Number of trunk forward evaluations (one per batch).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Number of examples pushed through the trunk.
    pub fn rows(&self) -> usize {
        self.rows.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
        self.rows.store(0, Ordering::Relaxed);
    }

    fn record(&self, rows: usize) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.rows.fetch_add(rows, Ordering::Relaxed);
    }
}

/// Output of one recognition-trunk pass: the class-free part of `q(z|x,y)`.
#[derive(Debug, Clone, Copy)]
pub struct Recognition {
    /// `f(x)`, rows × K
    pub mean: Var,
    /// `g(x)`, rows × K; shared by all classes
    pub log_var: Var,
}

/// Parameters of `p(x|z)` on a tape.
#[derive(Debug, Clone, Copy)]
pub enum LikelihoodNode {
    Bernoulli { logits: Var },
    Gaussian(GaussianNode),
}

/// Parameters of `p(x|z)` for a single latent vector.
#[derive(Debug, Clone, PartialEq)]
pub enum LikelihoodParams {
    Bernoulli(BernoulliVec),
    Gaussian(DiagGaussian),
}

impl LikelihoodParams {
    /// Distribution mean: success probabilities or the Gaussian mean.
    pub fn mean(&self) -> Tensor {
        match self {
            LikelihoodParams::Bernoulli(b) => b.probs(),
            LikelihoodParams::Gaussian(g) => g.mean.clone(),
        }
    }
}

pub mod names {
    pub const ENC_TRUNK: &str = "enc.trunk";
    pub const ENC_MEAN: &str = "enc.mean";
    pub const ENC_LOGVAR: &str = "enc.logvar";
    pub const CLASS_BIAS: &str = "enc.class_bias";
    pub const PRIOR_MEAN: &str = "prior.mean";
    pub const PRIOR_LOGVAR: &str = "prior.logvar";
    pub const CLASS_LOGITS: &str = "prior.class_logits";
    pub const CLS_TRUNK: &str = "cls.trunk";
    pub const SOFTMAX: &str = "cls.softmax";
    pub const ORDMAX: &str = "cls.ordmax";
    pub const ORDMAX_LOG_S: &str = "cls.ordmax.log_s";
    pub const DEC_TRUNK: &str = "dec.trunk";
    pub const DEC_OUT: &str = "dec.out";
    pub const DEC_LOGVAR: &str = "dec.logvar";
    pub const DEC_GLOBAL_LOGVAR: &str = "dec.global_logvar";
}

fn w_name(prefix: &str) -> String {
    format!("{prefix}.w")
}

fn b_name(prefix: &str) -> String {
    format!("{prefix}.b")
}

fn layer_prefix(trunk: &str, i: usize) -> String {
    format!("{trunk}.{i}")
}

/// Borrowed model: architecture plus a parameter store.
#[derive(Clone, Copy)]
pub struct ModelRef<'a> {
    pub arch: &'a Architecture,
    pub params: &'a ParamStore,
    pub counter: &'a PassCounter,
}

impl<'a> ModelRef<'a> {
    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        match labels.iter().find(|&&y| y >= self.arch.num_classes) {
            Some(&y) => Err(Error::LabelOutOfRange {
                label: y,
                classes: self.arch.num_classes,
            }),
            None => Ok(()),
        }
    }

    fn affine(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(self.params, &w_name(prefix))?;
        let b = tape.param(self.params, &b_name(prefix))?;
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }

    fn trunk(&self, tape: &mut Tape, name: &str, layers: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            let pre = self.affine(tape, &layer_prefix(name, i), h)?;
            h = tape.activation(self.arch.activation, pre)?;
        }
        Ok(h)
    }

    /// One pass of the recognition trunk and its two heads.
    pub fn recognize(&self, tape: &mut Tape, x: Var) -> Result<Recognition> {
        let rows = tape.shape(x)[0];
        self.counter.record(rows);
        let h = self.trunk(tape, names::ENC_TRUNK, self.arch.recognition_hidden.len(), x)?;
        let mean = self.affine(tape, names::ENC_MEAN, h)?;
        let log_var = self.affine(tape, names::ENC_LOGVAR, h)?;
        Ok(Recognition { mean, log_var })
    }

    /// `q(z|x,y)` for one label per row of `x`.
    pub fn encode(&self, tape: &mut Tape, x: Var, labels: &[usize]) -> Result<GaussianNode> {
        self.check_labels(labels)?;
        let r = self.recognize(tape, x)?;
        self.with_class_bias(tape, r, labels, labels.iter().enumerate().map(|(i, _)| i).collect())
    }

    /// `q(z|x,y)` for every class from a single trunk pass.
    ///
    /// Output rows are example-major: row `i·L + y` belongs to example `i`
    /// and class `y`.
    pub fn encode_all_classes(&self, tape: &mut Tape, x: Var) -> Result<GaussianNode> {
        let rows = tape.shape(x)[0];
        let l = self.arch.num_classes;
        let r = self.recognize(tape, x)?;
        let classes: Vec<usize> = (0..rows).flat_map(|_| 0..l).collect();
        let examples: Vec<usize> = (0..rows).flat_map(|i| std::iter::repeat_n(i, l)).collect();
        self.with_class_bias(tape, r, &classes, examples)
    }

    fn with_class_bias(
        &self,
        tape: &mut Tape,
        r: Recognition,
        classes: &[usize],
        examples: Vec<usize>,
    ) -> Result<GaussianNode> {
        let bias_table = tape.param(self.params, names::CLASS_BIAS)?;
        let bias = tape.gather_rows(bias_table, classes.to_vec())?;
        let base = tape.gather_rows(r.mean, examples.clone())?;
        let mean = tape.add(base, bias)?;
        let log_var = tape.gather_rows(r.log_var, examples)?;
        Ok(GaussianNode { mean, log_var })
    }

    /// `p(z|y)` for one label per output row.
    pub fn prior(&self, tape: &mut Tape, labels: &[usize]) -> Result<GaussianNode> {
        self.check_labels(labels)?;
        let m = tape.param(self.params, names::PRIOR_MEAN)?;
        let lv = tape.param(self.params, names::PRIOR_LOGVAR)?;
        Ok(GaussianNode {
            mean: tape.gather_rows(m, labels.to_vec())?,
            log_var: tape.gather_rows(lv, labels.to_vec())?,
        })
    }

    /// `log p(y)` repeated for each requested label, as a `[rows]` vector.
    pub fn class_log_prior(&self, tape: &mut Tape, labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let logits = tape.param(self.params, names::CLASS_LOGITS)?;
        let row = tape.reshape(logits, &[1, self.arch.num_classes])?;
        let lp = tape.log_softmax(row)?;
        let picked = tape.gather_rows(lp, vec![0; labels.len()])?;
        tape.pick_cols(picked, labels.to_vec())
    }

    /// The scalar ordmax mapping `wᵀh(x) + b`, rows × 1.
    pub fn ordinal_mapping(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.trunk(tape, names::CLS_TRUNK, self.arch.classifier_hidden.len(), x)?;
        self.affine(tape, names::ORDMAX, h)
    }

    /// `log q(y|x)`, rows × L.
    pub fn classifier_log_probs(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.arch.head {
            HeadKind::Softmax => {
                let h = self.trunk(tape, names::CLS_TRUNK, self.arch.classifier_hidden.len(), x)?;
                let logits = self.affine(tape, names::SOFTMAX, h)?;
                tape.log_softmax(logits)
            }
            HeadKind::Ordmax => {
                let u = self.ordinal_mapping(tape, x)?;
                let log_s = tape.param(self.params, names::ORDMAX_LOG_S)?;
                let centers = make_ordinal_centers(&self.arch.label_values)?;
                ordmax_log_probs(tape, u, log_s, &centers)
            }
        }
    }

    /// Parameters of `p(x|z)` for each row of `z`.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<LikelihoodNode> {
        let k = tape.shape(z).get(1).copied().unwrap_or(0);
        if k != self.arch.latent_dim {
            return Err(Error::shape("decode", tape.shape(z), &[self.arch.latent_dim]));
        }
        let h = self.trunk(tape, names::DEC_TRUNK, self.arch.generative_hidden.len(), z)?;
        let out = self.affine(tape, names::DEC_OUT, h)?;
        match self.arch.output {
            OutputKind::Bernoulli => Ok(LikelihoodNode::Bernoulli { logits: out }),
            OutputKind::Gaussian => {
                let log_var = if self.arch.global_variance {
                    let rows = tape.shape(z)[0];
                    let g = tape.param(self.params, names::DEC_GLOBAL_LOGVAR)?;
                    tape.gather_rows(g, vec![0; rows])?
                } else {
                    self.affine(tape, names::DEC_LOGVAR, h)?
                };
                Ok(LikelihoodNode::Gaussian(GaussianNode { mean: out, log_var }))
            }
        }
    }

    /// `log p(x|z)` per row.
    pub fn log_likelihood(&self, tape: &mut Tape, x: Var, lik: LikelihoodNode) -> Result<Var> {
        match lik {
            LikelihoodNode::Bernoulli { logits } => crate::distributions::bernoulli_log_prob(tape, x, logits),
            LikelihoodNode::Gaussian(g) => crate::distributions::gaussian_log_prob(tape, x, g),
        }
    }
}

/// A model together with its parameters.
#[derive(Debug, Clone)]
pub struct CcVae {
    pub arch: Architecture,
    pub params: ParamStore,
    counter: Arc<PassCounter>,
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

impl CcVae {
    /// Fresh parameters, deterministic in `seed`.
    ///
    /// Affine weights are uniform in `±sqrt(6 / (fan_in + fan_out))` and
    /// biases zero. The softmax output map starts at zero so that the fresh
    /// classifier is exactly uniform. Priors start at the standard normal
    /// for every class, class biases at zero, and the ordmax scale at
    /// `(µ_L − µ_1)²`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, k, l) = (arch.data_dim, arch.latent_dim, arch.num_classes);

        let mut add_affine = |p: &mut ParamStore, prefix: &str, i: usize, o: usize, zero: bool| -> Result<()> {
            let w = if zero { Tensor::zeros(&[i, o]) } else { glorot(i, o, &mut rng) };
            p.insert(&w_name(prefix), w)?;
            p.insert(&b_name(prefix), Tensor::zeros(&[o]))
        };
        let mut trunk = |p: &mut ParamStore, name: &str, input: usize, hidden: &[usize]| -> Result<usize> {
            let mut width = input;
            for (i, &h) in hidden.iter().enumerate() {
                add_affine(p, &layer_prefix(name, i), width, h, false)?;
                width = h;
            }
            Ok(width)
        };

        let h_enc = trunk(&mut p, names::ENC_TRUNK, d, &arch.recognition_hidden)?;
        let h_cls = trunk(&mut p, names::CLS_TRUNK, d, &arch.classifier_hidden)?;
        let h_dec = trunk(&mut p, names::DEC_TRUNK, k, &arch.generative_hidden)?;
        add_affine(&mut p, names::ENC_MEAN, h_enc, k, false)?;
        add_affine(&mut p, names::ENC_LOGVAR, h_enc, k, false)?;
        match arch.head {
            HeadKind::Softmax => add_affine(&mut p, names::SOFTMAX, h_cls, l, true)?,
            HeadKind::Ordmax => add_affine(&mut p, names::ORDMAX, h_cls, 1, false)?,
        }
        add_affine(&mut p, names::DEC_OUT, h_dec, d, false)?;
        if arch.output == OutputKind::Gaussian {
            if arch.global_variance {
                p.insert(names::DEC_GLOBAL_LOGVAR, Tensor::zeros(&[d]))?;
            } else {
                add_affine(&mut p, names::DEC_LOGVAR, h_dec, d, false)?;
            }
        }

        p.insert(names::CLASS_BIAS, Tensor::zeros(&[l, k]))?;
        p.insert(names::PRIOR_MEAN, Tensor::zeros(&[l, k]))?;
        p.insert(names::PRIOR_LOGVAR, Tensor::zeros(&[l, k]))?;
        p.insert_with(names::CLASS_LOGITS, Tensor::zeros(&[l]), arch.learn_class_prior)?;
        if arch.head == HeadKind::Ordmax {
            let c = make_ordinal_centers(&arch.label_values)?;
            let span = c.data()[l - 1] - c.data()[0];
            p.insert(names::ORDMAX_LOG_S, Tensor::scalar((span * span).ln()))?;
        }
        Ok(CcVae {
            arch,
            params: p,
            counter: Arc::default(),
        })
    }

    /// Rebuilds a model from stored parameters, checking every expected name and shape.
    pub fn from_parts(arch: Architecture, params: ParamStore) -> Result<Self> {
        let template = CcVae::init(arch.clone(), 0)?;
        for (name, p) in template.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(CcVae {
            arch,
            params,
            counter: Arc::default(),
        })
    }

    pub fn view(&self) -> ModelRef<'_> {
        ModelRef {
            arch: &self.arch,
            params: &self.params,
            counter: &self.counter,
        }
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    fn row_input(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() != self.arch.data_dim {
            return Err(Error::shape("input", x.shape(), &[self.arch.data_dim]));
        }
        x.reshape(&[1, self.arch.data_dim])
    }

    fn gaussian_row(tape: &Tape, g: GaussianNode, row: usize) -> Result<DiagGaussian> {
        DiagGaussian::new(
            Tensor::vector(tape.value(g.mean).row(row).to_vec())?,
            Tensor::vector(tape.value(g.log_var).row(row).to_vec())?,
        )
    }

    pub fn encode(&self, x: &Tensor, y: usize) -> Result<DiagGaussian> {
        let mut tape = Tape::new();
        let xv = tape.leaf(self.row_input(x)?);
        let q = self.view().encode(&mut tape, xv, &[y])?;
        Self::gaussian_row(&tape, q, 0)
    }

    /// One posterior per class, from a single recognition-trunk pass.
    pub fn encode_all_classes(&self, x: &Tensor) -> Result<Vec<DiagGaussian>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(self.row_input(x)?);
        let q = self.view().encode_all_classes(&mut tape, xv)?;
        (0..self.arch.num_classes).map(|y| Self::gaussian_row(&tape, q, y)).collect()
    }

    pub fn prior(&self, y: usize) -> Result<DiagGaussian> {
        if y >= self.arch.num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: self.arch.num_classes,
            });
        }
        DiagGaussian::new(
            Tensor::vector(self.params.value(names::PRIOR_MEAN)?.row(y).to_vec())?,
            Tensor::vector(self.params.value(names::PRIOR_LOGVAR)?.row(y).to_vec())?,
        )
    }

    /// `p(y)`: softmax of the class logits (uniform unless learned).
    pub fn class_prior(&self) -> Result<CategoricalDist> {
        softmax_probs(self.params.value(names::CLASS_LOGITS)?)
    }

    pub fn classify(&self, x: &Tensor) -> Result<CategoricalDist> {
        let mut tape = Tape::new();
        let xv = tape.leaf(self.row_input(x)?);
        let lp = self.view().classifier_log_probs(&mut tape, xv)?;
        CategoricalDist::from_log_probs(tape.value(lp).data())
    }

    /// `log q(y|x)` for every row of `x` (rows × D), evaluated in chunks.
    pub fn classify_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d != self.arch.data_dim {
            return Err(Error::shape("classify", x.shape(), &[n, self.arch.data_dim]));
        }
        const CHUNK: usize = 500;
        let mut out = Vec::with_capacity(n * self.arch.num_classes);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(x.gather_rows(&idx)?);
            let lp = self.view().classifier_log_probs(&mut tape, xv)?;
            out.extend_from_slice(tape.value(lp).data());
        }
        Tensor::matrix(n, self.arch.num_classes, out)
    }

    /// Predicted class index per row (argmax, lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let lp = self.classify_batch(x)?;
        Ok((0..lp.shape()[0]).map(|i| crate::tensor::argmax(lp.row(i))).collect())
    }

    pub fn decode(&self, z: &Tensor) -> Result<LikelihoodParams> {
        if z.numel() != self.arch.latent_dim {
            return Err(Error::shape("decode", z.shape(), &[self.arch.latent_dim]));
        }
        let mut tape = Tape::new();
        let zv = tape.leaf(z.reshape(&[1, self.arch.latent_dim])?);
        let lik = self.view().decode(&mut tape, zv)?;
        let row = |v: Var| Tensor::vector(tape.value(v).row(0).to_vec());
        Ok(match lik {
            LikelihoodNode::Bernoulli { logits } => LikelihoodParams::Bernoulli(BernoulliVec::from_logits(row(logits)?)),
            LikelihoodNode::Gaussian(g) => LikelihoodParams::Gaussian(DiagGaussian::new(row(g.mean)?, row(g.log_var)?)?),
        })
    }

    /// Mean of `p(x|z)` for every row of `z` (rows × K).
    pub fn decode_mean_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.leaf(z.clone());
        let lik = self.view().decode(&mut tape, zv)?;
        Ok(match lik {
            LikelihoodNode::Bernoulli { logits } => tape.value(logits).map(crate::autodiff::sigmoid),
            LikelihoodNode::Gaussian(g) => tape.value(g.mean).clone(),
        })
    }

    /// `z_t = (1 − t) µ_from + t µ_to` for `steps` evenly spaced `t` in `[0, 1]`.
    pub fn interpolate_latents(&self, from: usize, to: usize, steps: usize) -> Result<Vec<Tensor>> {
        if steps < 2 {
            return Err(Error::Domain {
                op: "interpolate_latents",
                reason: format!("need at least 2 steps, got {steps}"),
            });
        }
        let a = self.prior(from)?.mean;
        let b = self.prior(to)?.mean;
        (0..steps)
            .map(|i| {
                let t = i as f64 / (steps - 1) as f64;
                Tensor::vector(
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| (1.0 - t) * x + t * y)
                        .collect(),
                )
            })
            .collect()
    }

    /// The current ordmax scale `s`, if this model has an ordmax head.
    pub fn ordmax_scale(&self) -> Option<f64> {
        self.params
            .value(names::ORDMAX_LOG_S)
            .ok()
            .map(|t| t.data()[0].exp())
    }
}
