//! Single-sample Monte-Carlo ELBO.
//!
//! The likelihood term is the mean over the examples in the episode; the
//! weight KL is summed over every Gaussian parameter; the winner KL is
//! summed over blocks and averaged over examples, since winner posteriors
//! are input dependent.

use crate::autodiff::{gaussian_log_ratio, Tape, Var, LOG_VAR_FLOOR, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::layers::{Network, Phase, TaskType, WinnerSample};
use crate::rng::RngStream;
use crate::tensor::{log_softmax_in_place, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboBreakdown {
    /// `−CE` or `−MSE`.
    pub likelihood_term: f64,
    pub kl_xi: f64,
    pub kl_w: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn new(likelihood_term: f64, kl_xi: f64, kl_w: f64) -> Self {
        Self {
            likelihood_term,
            kl_xi,
            kl_w,
            total: likelihood_term - kl_xi - kl_w,
        }
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[ElboBreakdown]) -> ElboBreakdown {
        if items.is_empty() {
            return ElboBreakdown::default();
        }
        let n = items.len() as f64;
        let sum = |f: fn(&ElboBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        ElboBreakdown::new(sum(|b| b.likelihood_term), sum(|b| b.kl_xi), sum(|b| b.kl_w))
    }
}

/// Supervision for one set of inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Classes(Vec<usize>),
    /// `[N, out_dim]` real targets.
    Values(Tensor<T>),
}

impl<T: Real> Targets<T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_type(&self) -> TaskType {
        match self {
            Targets::Classes(_) => TaskType::Classification,
            Targets::Values(_) => TaskType::Regression,
        }
    }
}

/// `−ln max(probs[target], 1e−12)`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, target: usize) -> Result<T> {
    let p = probs.data().get(target).ok_or(Error::Index {
        index: target,
        len: probs.len(),
    })?;
    Ok(-p.max(T::lit(PROB_FLOOR)).ln())
}

/// `Σ_r Σ_j ξ̂_{r,j} (ln π_{r,j} − ln(1/J))` with `π_r = softmax(logits_r)`.
///
/// Equals the Categorical log-ratio exactly when ξ̂ is one-hot.
pub fn mc_kl_categorical<T: Real>(winner: &WinnerSample<T>) -> T {
    let group = winner.block_size();
    let log_j = T::from_usize(group).expect("count").ln();
    let mut log_pi = winner.logits.data().to_vec();
    log_pi.chunks_mut(group).for_each(log_softmax_in_place);
    winner
        .xi_relaxed
        .data()
        .iter()
        .zip(&log_pi)
        .map(|(&xi, &lp)| xi * (lp + log_j))
        .sum()
}

/// `Σ [ln N(ŵ; μ, σ²) − ln N(ŵ; 0, 1)]`.
pub fn mc_kl_gaussian<T: Real>(w_hat: &Tensor<T>, mu: &Tensor<T>, log_var: &Tensor<T>) -> Result<T> {
    if w_hat.shape() != mu.shape() || mu.shape() != log_var.shape() {
        return Err(Error::dim("mc_kl_gaussian", w_hat.shape(), mu.shape()));
    }
    Ok(gaussian_log_ratio(w_hat.data(), mu.data(), log_var.data()))
}

/// `Σ −0.5 (1 + ln σ² − σ² − μ²)`.
pub fn closed_form_kl_gaussian<T: Real>(mu: &Tensor<T>, log_var: &Tensor<T>) -> Result<T> {
    if mu.shape() != log_var.shape() {
        return Err(Error::dim("closed_form_kl_gaussian", mu.shape(), log_var.shape()));
    }
    let floor = T::lit(LOG_VAR_FLOOR);
    let half = T::lit(0.5);
    Ok(mu
        .data()
        .iter()
        .zip(log_var.data())
        .map(|(&m, &lv)| {
            let lv = lv.max(floor);
            -half * (T::one() + lv - lv.exp() - m * m)
        })
        .sum())
}

/// Tape handles of the negative ELBO and its parts.
#[derive(Debug)]
pub struct ElboNodes {
    /// `−L`, the quantity SGD minimizes.
    pub loss: Var,
    pub likelihood: Var,
    pub kl_xi: Option<Var>,
    pub kl_w: Option<Var>,
}

/// Build the negative ELBO of one episode on `tape`, drawing one fresh
/// sample of every weight and winner from `rng`.
pub fn elbo_on_tape<T: Real>(
    tape: &mut Tape<T>,
    net: &Network<T>,
    params: &[Var],
    x: &Tensor<T>,
    targets: &Targets<T>,
    rng: &mut RngStream,
    tau: T,
) -> Result<ElboNodes> {
    if targets.is_empty() || x.shape()[0] == 0 {
        return Err(Error::Contract("ELBO of an empty episode".into()));
    }
    if targets.len() != x.shape()[0] {
        return Err(Error::dim("task_elbo", x.shape(), &[targets.len()]));
    }
    if targets.task_type() != net.arch().task {
        return Err(Error::Config(format!(
            "{} targets for a {} network",
            targets.task_type(),
            net.arch().task
        )));
    }
    let xv = tape.constant(x.clone());
    let trace = net.forward(tape, params, xv, rng, Phase::Train, tau)?;

    let nll = match targets {
        Targets::Classes(c) => tape.cross_entropy(trace.output, c)?,
        Targets::Values(v) => tape.squared_error(trace.output, v)?,
    };

    let mut kl_xi = None;
    let inv_rows = T::one() / T::from_usize(trace.rows).expect("count");
    for &(relaxed, logits, group) in &trace.relaxed_winners {
        let log_pi = tape.log_softmax_groups(logits, group)?;
        let log_ratio = tape.add_scalar(log_pi, T::from_usize(group).expect("count").ln())?;
        let weighted = tape.mul(relaxed, log_ratio)?;
        let total = tape.sum(weighted)?;
        let per_example = tape.scale(total, inv_rows)?;
        kl_xi = Some(match kl_xi {
            Some(acc) => tape.add(acc, per_example)?,
            None => per_example,
        });
    }

    let mut kl_w = None;
    for &(w, mu, lv) in &trace.weight_samples {
        let term = tape.gaussian_kl_mc(w, mu, lv)?;
        kl_w = Some(match kl_w {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }

    let mut loss = nll;
    for kl in [kl_xi, kl_w].into_iter().flatten() {
        loss = tape.add(loss, kl)?;
    }
    Ok(ElboNodes {
        loss,
        likelihood: nll,
        kl_xi,
        kl_w,
    })
}

impl ElboNodes {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> ElboBreakdown {
        let v = |var: Option<Var>| var.map_or(0.0, |x| tape.value(x).item().as_f64());
        ElboBreakdown::new(-v(Some(self.likelihood)), v(self.kl_xi), v(self.kl_w))
    }
}

/// One-sample ELBO of an episode.
pub fn task_elbo<T: Real>(
    net: &Network<T>,
    x: &Tensor<T>,
    targets: &Targets<T>,
    rng: &mut RngStream,
    tau: T,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let nodes = elbo_on_tape(&mut tape, net, &params, x, targets, rng, tau)?;
    Ok(nodes.breakdown(&tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::relax_with_noise;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(&t(&[3], &[0.0, 1.0, 0.0]), 1).unwrap().abs() < 1e-12);
        let u = cross_entropy(&t(&[4], &[0.25; 4]), 2).unwrap();
        assert!((u - 1.386_294_4).abs() < 1e-6);
        let floored = cross_entropy(&t(&[2], &[1.0, 0.0]), 1).unwrap();
        assert!(floored.is_finite() && floored <= -(1e-12f64).ln() + 1e-9);
        assert!(matches!(
            cross_entropy(&t(&[2], &[0.5, 0.5]), 2),
            Err(Error::Index { .. })
        ));
    }

    fn sample(logits: &[f64], relaxed: &[f64]) -> WinnerSample<f64> {
        let n = logits.len();
        WinnerSample {
            xi_relaxed: t(&[1, n], relaxed),
            xi_hard: t(&[1, n], relaxed),
            logits: t(&[1, n], logits),
        }
    }

    #[test]
    fn categorical_kl_examples() {
        let uniform = relax_with_noise(&t(&[1, 3], &[0.7; 3]), &t(&[1, 3], &[0.3, -0.2, 1.0]), 0.67).unwrap();
        assert!(mc_kl_categorical(&uniform).abs() < 1e-12);

        let p = [0.268_941_4, 0.731_058_6];
        let kl = mc_kl_categorical(&sample(&[0.0, 1.0], &p));
        let expected = 0.268_941_4 * 0.268_941_4f64.ln() + 0.731_058_6 * 0.731_058_6f64.ln() - 0.5f64.ln();
        assert!((kl - expected).abs() < 1e-6);
        // 0.2689·ln 0.2689 + 0.7311·ln 0.7311 + ln 2
        assert!((kl - 0.110_944).abs() < 1e-5);

        let saturated = mc_kl_categorical(&sample(&[-40.0, 40.0], &[0.0, 1.0]));
        assert!((saturated - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn gaussian_kl_examples() {
        let w = t(&[3], &[0.3, -1.7, 2.2]);
        let zero = mc_kl_gaussian(&w, &Tensor::zeros(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert!(zero.abs() < 1e-12);
        let single = mc_kl_gaussian(&t(&[1], &[1.0]), &t(&[1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert!((single - 0.5).abs() < 1e-12);
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_kl_gaussian(&t(&[1], &[0.0]), &t(&[1], &[0.0])).unwrap(), 0.0);
        let a = closed_form_kl_gaussian(&t(&[1], &[1.0]), &t(&[1], &[0.25f64.ln()])).unwrap();
        assert!((a - 0.818_147).abs() < 1e-5);
        let b = closed_form_kl_gaussian(&t(&[1], &[0.0]), &t(&[1], &[2f64.ln()])).unwrap();
        assert!((b - 0.5 * (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((b - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn mc_kl_mean_matches_closed_form() {
        let mu = t(&[1], &[1.0]);
        let lv = t(&[1], &[0.25f64.ln()]);
        let mut rng = RngStream::new(8, 1);
        let m = 100_000;
        let mean: f64 = (0..m)
            .map(|_| {
                let eps = rng.sample_std_normal::<f64>(1);
                let w = crate::layers::reparam(&mu, &lv, &eps);
                mc_kl_gaussian(&w, &mu, &lv).unwrap()
            })
            .sum::<f64>()
            / m as f64;
        assert!((mean - 0.8182).abs() < 0.01, "{mean}");
    }

    #[test]
    fn breakdown_identity() {
        let b = ElboBreakdown::new(-1.25, 0.5, 3.0);
        assert!((b.total - (b.likelihood_term - b.kl_xi - b.kl_w)).abs() < 1e-12);
        let m = ElboBreakdown::mean(&[b, ElboBreakdown::new(-0.75, 0.0, 1.0)]);
        assert!((m.total - (m.likelihood_term - m.kl_xi - m.kl_w)).abs() < 1e-12);
    }
}
