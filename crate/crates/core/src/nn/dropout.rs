//! Learnable Bernoulli dropout over hidden units: posterior representation,
//! hard sampling for inference, concrete relaxation for training, and the
//! Gaussian-prior KL approximation.

use rand::Rng;

use super::NetworkParams;
use crate::error::{Error, Result};

/// Drop probability every logit starts from.
pub const INITIAL_DROP_PROBABILITY: f64 = 0.1;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary entropy in nats; zero at the endpoints.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// How a Bayesian model was trained and is to be ensembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PosteriorMode {
    EndToEnd,
    Modular,
}

impl PosteriorMode {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorMode::EndToEnd => "end-to-end",
            PosteriorMode::Modular => "modular",
        }
    }
}

impl std::str::FromStr for PosteriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "end-to-end" => Ok(PosteriorMode::EndToEnd),
            "modular" => Ok(PosteriorMode::Modular),
            _ => Err(Error::invalid(format!("unknown posterior mode `{s}`"))),
        }
    }
}

/// Dropout distribution over one network: nominal weights plus one drop
/// logit per hidden unit (`sigmoid(logit)` is the drop probability).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPosterior {
    pub nominal: NetworkParams,
    pub dropout_logits: Vec<f64>,
    pub prior_stddev: f64,
    pub temperature: f64,
}

impl DropoutPosterior {
    pub fn new(nominal: NetworkParams, drop_probability: f64) -> Result<Self> {
        if !(drop_probability > 0.0 && drop_probability < 1.0) {
            return Err(Error::invalid(format!(
                "drop probability {drop_probability} outside (0,1)"
            )));
        }
        let logit = (drop_probability / (1.0 - drop_probability)).ln();
        let units = nominal.hidden_units();
        Ok(Self {
            nominal,
            dropout_logits: vec![logit; units],
            prior_stddev: 1.0,
            temperature: 0.1,
        })
    }

    pub fn with_logits(nominal: NetworkParams, dropout_logits: Vec<f64>) -> Result<Self> {
        if dropout_logits.len() != nominal.hidden_units() {
            return Err(Error::invalid(format!(
                "{} dropout logits for {} hidden units",
                dropout_logits.len(),
                nominal.hidden_units()
            )));
        }
        Ok(Self {
            nominal,
            dropout_logits,
            prior_stddev: 1.0,
            temperature: 0.1,
        })
    }

    pub fn drop_probabilities(&self) -> Vec<f64> {
        self.dropout_logits.iter().map(|&a| sigmoid(a)).collect()
    }

    /// Hard Bernoulli keep mask: 0 for dropped units, 1 otherwise.
    pub fn sample_keep_mask<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.dropout_logits
            .iter()
            .map(|&a| {
                let u: f64 = rng.random();
                if u < sigmoid(a) {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Relaxed keep mask `1 - z` with `z = concrete_mask(logit, u, temperature)`
    /// for the supplied uniform draws, plus `d keep / d logit` per unit.
    pub fn relaxed_keep_mask(&self, draws: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut keep = Vec::with_capacity(draws.len());
        let mut dkeep = Vec::with_capacity(draws.len());
        for (&a, &u) in self.dropout_logits.iter().zip(draws) {
            let z = concrete_mask(a, u, self.temperature)?;
            keep.push(1.0 - z);
            dkeep.push(-z * (1.0 - z) / self.temperature);
        }
        Ok((keep, dkeep))
    }
}

/// Nominal parameters with the outgoing weights of every dropped hidden unit
/// zeroed, each unit dropped independently with probability `sigmoid(logit)`.
pub fn sample_dropout_realization<R: Rng + ?Sized>(
    posterior: &DropoutPosterior,
    rng: &mut R,
) -> NetworkParams {
    let keep = posterior.sample_keep_mask(rng);
    realization_from_mask(&posterior.nominal, &keep)
}

pub(crate) fn realization_from_mask(nominal: &NetworkParams, keep: &[f64]) -> NetworkParams {
    let mut params = nominal.clone();
    let sizes = nominal.layer_sizes().to_vec();
    let mut unit = 0;
    for l in 1..nominal.layer_count() {
        let (n_hidden, n_next) = (sizes[l], sizes[l + 1]);
        let w = params.weights_mut(l);
        for u in 0..n_hidden {
            if keep[unit + u] == 0.0 {
                for o in 0..n_next {
                    w[o * n_hidden + u] = 0.0;
                }
            }
        }
        unit += n_hidden;
    }
    params
}

/// Gumbel-sigmoid relaxation of a drop indicator:
/// `sigmoid((logit + ln u - ln(1-u)) / temperature)`.
pub fn concrete_mask(logit: f64, uniform_draw: f64, temperature: f64) -> Result<f64> {
    if !(uniform_draw > 0.0 && uniform_draw < 1.0) {
        return Err(Error::invalid(format!(
            "uniform draw {uniform_draw} must lie strictly inside (0,1)"
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let noise = uniform_draw.ln() - (1.0 - uniform_draw).ln();
    Ok(sigmoid((logit + noise) / temperature))
}

/// Value and gradients of the scaled KL term.
#[derive(Clone, Debug)]
pub struct KlTerm {
    pub value: f64,
    /// Same layout as the nominal parameters (only incoming weight rows of
    /// hidden units are non-zero).
    pub grad_params: Vec<f64>,
    pub grad_logits: Vec<f64>,
}

/// `(1/beta) * sum_u [ (1-p_u) |w_u|^2 / (2 s^2) - H_b(p_u) ]` over hidden
/// units, `w_u` the unit's incoming weight row and `s` the prior stddev.
pub fn kl_regularizer(posterior: &DropoutPosterior, beta: f64) -> Result<KlTerm> {
    if !(beta > 0.0) {
        return Err(Error::invalid("beta must be positive"));
    }
    let nominal = &posterior.nominal;
    let inv_beta = if beta.is_infinite() { 0.0 } else { 1.0 / beta };
    let prior_var = posterior.prior_stddev * posterior.prior_stddev;
    let mut value = 0.0;
    let mut grad_params = vec![0.0; nominal.len()];
    let mut grad_logits = vec![0.0; posterior.dropout_logits.len()];
    let sizes = nominal.layer_sizes();
    let mut unit = 0;
    for l in 0..nominal.layer_count() - 1 {
        let n_in = sizes[l];
        let wr = nominal.weight_range(l);
        let w = nominal.weights(l);
        for u in 0..sizes[l + 1] {
            let alpha = posterior.dropout_logits[unit];
            let p = sigmoid(alpha);
            let row = &w[u * n_in..(u + 1) * n_in];
            let sq: f64 = row.iter().map(|x| x * x).sum();
            let c = sq / (2.0 * prior_var);
            value += inv_beta * ((1.0 - p) * c - binary_entropy(p));
            // dp/dalpha = p(1-p); dH/dp = ln((1-p)/p) = -alpha
            let dp = p * (1.0 - p);
            grad_logits[unit] = inv_beta * (-c * dp + alpha * dp);
            let gscale = inv_beta * (1.0 - p) / prior_var;
            for (g, x) in grad_params[wr.start + u * n_in..wr.start + (u + 1) * n_in]
                .iter_mut()
                .zip(row)
            {
                *g = gscale * x;
            }
            unit += 1;
        }
    }
    Ok(KlTerm {
        value,
        grad_params,
        grad_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputHead;
    use crate::seed::rng_for;

    fn posterior(logit: f64) -> DropoutPosterior {
        let mut rng = rng_for(11, &[]);
        let nominal = NetworkParams::init_uniform(&[3, 6, 4], OutputHead::Softmax, &mut rng).unwrap();
        DropoutPosterior::with_logits(nominal, vec![logit; 6]).unwrap()
    }

    #[test]
    fn concrete_mask_values() {
        assert!((concrete_mask(0.0, 0.5, 0.1).unwrap() - 0.5).abs() < 1e-15);
        assert!((concrete_mask(0.0, 0.9, 1.0).unwrap() - 0.9).abs() < 1e-12);
        assert!(concrete_mask(0.0, 0.0, 0.1).is_err());
        assert!(concrete_mask(0.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn concrete_mask_hardens_at_low_temperature() {
        // threshold at u = sigmoid(-logit)
        let logit = 0.8;
        let thr = sigmoid(-logit);
        assert!(concrete_mask(logit, thr + 0.01, 1e-3).unwrap() > 0.99);
        assert!(concrete_mask(logit, thr - 0.01, 1e-3).unwrap() < 0.01);
    }

    #[test]
    fn zero_drop_probability_keeps_nominal() {
        let post = posterior(-30.0);
        let mut rng = rng_for(1, &[]);
        for _ in 0..20 {
            assert_eq!(sample_dropout_realization(&post, &mut rng), post.nominal);
        }
    }

    #[test]
    fn full_drop_gives_uniform_output() {
        let mut post = posterior(30.0);
        // zero output biases so the dropped network is exactly uniform
        post.nominal.biases_mut(1).iter_mut().for_each(|b| *b = 0.0);
        let mut rng = rng_for(2, &[]);
        let real = sample_dropout_realization(&post, &mut rng);
        assert!(real.weights(1).iter().all(|&w| w == 0.0));
        let out = real.forward(&[0.4, -1.0, 2.0], None).unwrap();
        assert!(out.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn empirical_drop_rate() {
        let logit = (0.1f64 / 0.9).ln();
        let post = posterior(logit);
        let mut rng = rng_for(3, &[]);
        let mut dropped = 0usize;
        let n = 10_000;
        for _ in 0..n {
            if post.sample_keep_mask(&mut rng)[0] == 0.0 {
                dropped += 1;
            }
        }
        let rate = dropped as f64 / n as f64;
        assert!((rate - 0.1).abs() < 0.01, "rate {rate}");
    }

    #[test]
    fn realization_matches_masked_forward() {
        let post = posterior(0.0);
        let mut rng = rng_for(4, &[]);
        let keep = post.sample_keep_mask(&mut rng);
        let real = realization_from_mask(&post.nominal, &keep);
        let x = [0.3, 0.2, -0.8];
        assert_eq!(
            real.forward(&x, None).unwrap(),
            post.nominal.forward(&x, Some(&keep)).unwrap()
        );
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let post = posterior(0.0);
        let a: Vec<_> = (0..5)
            .scan(rng_for(9, &[]), |r, _| Some(post.sample_keep_mask(r)))
            .collect();
        let b: Vec<_> = (0..5)
            .scan(rng_for(9, &[]), |r, _| Some(post.sample_keep_mask(r)))
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn kl_at_half_with_zero_weights() {
        let nominal = NetworkParams::zeros(&[3, 6, 4], OutputHead::Softmax).unwrap();
        let post = DropoutPosterior::with_logits(nominal, vec![0.0; 6]).unwrap();
        let kl = kl_regularizer(&post, 10.0).unwrap();
        assert!((kl.value + 6.0 * std::f64::consts::LN_2 / 10.0).abs() < 1e-14);
        let kl = kl_regularizer(&post, f64::INFINITY).unwrap();
        assert_eq!(kl.value, 0.0);
        assert!(kl_regularizer(&post, 0.0).is_err());
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let post = posterior(-1.3);
        let mut post = post;
        post.dropout_logits = vec![-1.3, 0.2, 0.9, -2.2, 1.7, -0.4];
        let beta = 3.0;
        let kl = kl_regularizer(&post, beta).unwrap();
        let h = 1e-6;
        for i in 0..post.nominal.len() {
            let mut a = post.clone();
            a.nominal.as_mut_slice()[i] += h;
            let mut b = post.clone();
            b.nominal.as_mut_slice()[i] -= h;
            let fd = (kl_regularizer(&a, beta).unwrap().value - kl_regularizer(&b, beta).unwrap().value)
                / (2.0 * h);
            assert!((fd - kl.grad_params[i]).abs() <= 1e-4 * fd.abs().max(1e-6), "param {i}");
        }
        for u in 0..6 {
            let mut a = post.clone();
            a.dropout_logits[u] += h;
            let mut b = post.clone();
            b.dropout_logits[u] -= h;
            let fd = (kl_regularizer(&a, beta).unwrap().value - kl_regularizer(&b, beta).unwrap().value)
                / (2.0 * h);
            assert!((fd - kl.grad_logits[u]).abs() <= 1e-4 * fd.abs().max(1e-6), "logit {u}");
        }
    }
}
