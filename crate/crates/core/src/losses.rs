//! The adversarial objective, the domain-adaptation cross-entropy, the
//! domain-classifier softmax loss, and their sum.
//!
//! Expectations are minibatch means. Probabilities are clamped to
//! `[EPS, 1 - EPS]` before taking logs; the number of clamped scores is
//! recorded in the report. Gradients pass straight through the clamp.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Two-term adversarial objective.
    L,
    /// Four-term adversarial objective over both domains.
    L1,
    /// Domain-classifier softmax log-loss.
    L2,
    /// `L1 + L2`.
    E,
    /// Generator objective being minimized.
    G,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L => "L",
            LossKind::L1 => "L1",
            LossKind::L2 => "L2",
            LossKind::E => "E",
            LossKind::G => "G",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "L" => LossKind::L,
            "L1" => LossKind::L1,
            "L2" => LossKind::L2,
            "E" => LossKind::E,
            "G" => LossKind::G,
            _ => return Err(Error::Invalid(format!("unknown loss {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub name: LossKind,
    pub value: f64,
    pub breakdown: IndexMap<String, f64>,
    pub batch_size: usize,
    /// Scores that hit the clamp.
    pub clamped: usize,
}

impl LossReport {
    fn from_terms(name: LossKind, terms: Vec<(&str, f64)>, batch_size: usize, clamped: usize) -> Self {
        let value = terms.iter().map(|(_, v)| v).sum();
        Self {
            name,
            value,
            breakdown: terms.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            batch_size,
            clamped,
        }
    }

    /// Renames every breakdown term `k` to `k{suffix}`, e.g. to tell two
    /// domains apart in one log.
    pub fn with_suffix(mut self, suffix: &str) -> Self {
        self.breakdown = self
            .breakdown
            .into_iter()
            .map(|(k, v)| (format!("{k}{suffix}"), v))
            .collect();
        self
    }

    /// `iteration<TAB>name<TAB>value<TAB>term=value,term=value`
    pub fn log_line(&self, iteration: u64) -> String {
        let terms: Vec<String> = self.breakdown.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{iteration}\t{}\t{}\t{}", self.name, self.value, terms.join(","))
    }
}

/// One parsed loss-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub iteration: u64,
    pub name: LossKind,
    pub value: f64,
    pub breakdown: Vec<(String, f64)>,
}

pub fn parse_log_line(line: &str) -> Result<LogLine> {
    let bad = |m: &str| Error::Parse {
        line: 1,
        message: format!("{m}: {line:?}"),
    };
    let fields: Vec<&str> = line.split('\t').collect();
    let [iteration, name, value, terms] = fields[..] else {
        return Err(bad("expected 4 tab-separated fields"));
    };
    let mut breakdown = Vec::new();
    if !terms.is_empty() {
        for t in terms.split(',') {
            let (k, v) = t.split_once('=').ok_or_else(|| bad("term without '='"))?;
            breakdown.push((k.to_string(), v.parse().map_err(|_| bad("bad term value"))?));
        }
    }
    Ok(LogLine {
        iteration: iteration.parse().map_err(|_| bad("bad iteration"))?,
        name: name.parse()?,
        value: value.parse().map_err(|_| bad("bad value"))?,
        breakdown,
    })
}

/// Mean of `log(s)` (or `log(1 - s)` when `complement`) and its gradient.
fn mean_log<T: Real>(scores: &[T], complement: bool) -> (f64, Vec<T>, usize) {
    let n = scores.len() as f64;
    let mut sum = 0.0;
    let mut clamped = 0;
    let grads = scores
        .iter()
        .map(|&s| {
            let raw = s.as_f64();
            let c = raw.clamp(EPS, 1.0 - EPS);
            if c != raw {
                clamped += 1;
            }
            if complement {
                sum += (1.0 - c).ln();
                T::from_f64(-1.0 / (n * (1.0 - c)))
            } else {
                sum += c.ln();
                T::from_f64(1.0 / (n * c))
            }
        })
        .collect();
    (sum / n, grads, clamped)
}

fn non_empty<T>(batches: &[&[T]]) -> Result<()> {
    if batches.iter().any(|b| b.is_empty()) {
        return Err(Error::Invalid("loss needs non-empty batches".into()));
    }
    Ok(())
}

/// `mean log D(x) + mean log(1 - D(G(z)))`, with gradients w.r.t. both
/// score batches.
pub fn gan_loss_grad<T: Real>(real: &[T], fake: &[T]) -> Result<(LossReport, Vec<T>, Vec<T>)> {
    non_empty(&[real, fake])?;
    let (r, gr, cr) = mean_log(real, false);
    let (f, gf, cf) = mean_log(fake, true);
    let report = LossReport::from_terms(LossKind::L, vec![("real", r), ("fake", f)], real.len(), cr + cf);
    Ok((report, gr, gf))
}

pub fn gan_loss(real_scores: &[f64], fake_scores: &[f64]) -> Result<LossReport> {
    Ok(gan_loss_grad(real_scores, fake_scores)?.0)
}

/// Gradients of the four-term objective, in argument order.
pub type L1Grads<T> = [Vec<T>; 4];

pub fn da_l1_grad<T: Real>(
    real_s: &[T],
    real_l: &[T],
    fake_s: &[T],
    fake_l: &[T],
) -> Result<(LossReport, L1Grads<T>)> {
    non_empty(&[real_s, real_l, fake_s, fake_l])?;
    let (a, ga, ca) = mean_log(real_s, false);
    let (b, gb, cb) = mean_log(real_l, false);
    let (c, gc, cc) = mean_log(fake_s, true);
    let (d, gd, cd) = mean_log(fake_l, true);
    let report = LossReport::from_terms(
        LossKind::L1,
        vec![("real_s", a), ("real_l", b), ("fake_s", c), ("fake_l", d)],
        real_s.len(),
        ca + cb + cc + cd,
    );
    Ok((report, [ga, gb, gc, gd]))
}

pub fn da_l1(
    real_s: &[f64],
    real_l: &[f64],
    fake_s: &[f64],
    fake_l: &[f64],
) -> Result<LossReport> {
    Ok(da_l1_grad(real_s, real_l, fake_s, fake_l)?.0)
}

/// Mean negative log-softmax of the true class, with the gradient w.r.t.
/// the `(N, k)` logits.
pub fn da_l2_grad<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(LossReport, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::Invalid(format!("logits must be (N, k), got {shape:?}")));
    }
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::Invalid(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Invalid(format!("label {bad} out of range for {k} classes")));
    }
    let mut total = 0.0;
    let mut grad = Tensor::zeros(shape);
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        total += log_z - row[labels[i]].as_f64();
        for (j, g) in grad.data_mut()[i * k..(i + 1) * k].iter_mut().enumerate() {
            let p = (row[j].as_f64() - log_z).exp();
            let target = if j == labels[i] { 1.0 } else { 0.0 };
            *g = T::from_f64((p - target) / n as f64);
        }
    }
    let report = LossReport::from_terms(LossKind::L2, vec![("softmax", total / n as f64)], n, 0);
    Ok((report, grad))
}

pub fn da_l2(logits: &Tensor<f64>, labels: &[usize]) -> Result<LossReport> {
    Ok(da_l2_grad(logits, labels)?.0)
}

pub fn da_energy(l1: &LossReport, l2: &LossReport) -> Result<LossReport> {
    if l1.name != LossKind::L1 || l2.name != LossKind::L2 {
        return Err(Error::Invalid(format!(
            "energy needs (L1, L2) reports, got ({}, {})",
            l1.name, l2.name
        )));
    }
    Ok(LossReport::from_terms(
        LossKind::E,
        vec![("L1", l1.value), ("L2", l2.value)],
        l1.batch_size,
        l1.clamped + l2.clamped,
    ))
}

/// Which generator objective to descend.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// `-mean log D(G(z))`: generated images treated as real.
    NonSaturating,
    /// `mean log(1 - D(G(z)))`, the literal minimax term.
    Saturating,
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Saturating => "saturating",
        })
    }
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "saturating" => Ok(GeneratorLoss::Saturating),
            _ => Err(Error::Invalid(format!("unknown generator loss {s:?}"))),
        }
    }
}

/// Generator objective (to be minimized) and its gradient w.r.t. the
/// fake scores.
pub fn generator_loss_grad<T: Real>(fake: &[T], kind: GeneratorLoss) -> Result<(LossReport, Vec<T>)> {
    non_empty(&[fake])?;
    let (value, grad, clamped) = match kind {
        GeneratorLoss::NonSaturating => {
            let (v, g, c) = mean_log(fake, false);
            (-v, g.into_iter().map(|x| -x).collect(), c)
        }
        GeneratorLoss::Saturating => mean_log(fake, true),
    };
    let report = LossReport::from_terms(LossKind::G, vec![("fake", value)], fake.len(), clamped);
    Ok((report, grad))
}
