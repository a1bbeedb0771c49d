//! Exhaustive reference receivers: the exact symbol posterior over `S^K`
//! and bitwise-MAP decoding by codebook enumeration.

use num_complex::Complex64;

use crate::channel::{noiseless_output, CMatrix, Nonlinearity};
use crate::error::{Error, Result};
use crate::modem::Constellation;
use crate::polar::CodeSpec;

pub const MAX_JOINT_HYPOTHESES: usize = 1 << 20;
pub const MAX_MESSAGE_BITS: usize = 16;

/// Posterior over all joint symbol vectors and its per-user marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPosterior {
    /// Indexed by `sum_k s_k |S|^k`.
    pub joint: Vec<f64>,
    /// `marginals[k * |S| + s]`.
    pub marginals: Vec<f64>,
}

/// Enumerates every joint symbol vector once for a channel, so repeated
/// posteriors only pay for the distance evaluations.
#[derive(Clone, Debug)]
pub struct MapDetector {
    users: usize,
    classes: usize,
    sigma: f64,
    means: Vec<Vec<Complex64>>,
}

impl MapDetector {
    pub fn new(
        h: &CMatrix,
        sigma: f64,
        constellation: &Constellation,
        users: usize,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if users != h.cols() {
            return Err(Error::invalid(format!(
                "{users} users for a channel with {} columns",
                h.cols()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::invalid("noise level must be non-negative"));
        }
        let classes = constellation.size();
        let total = (classes as f64).powi(users as i32);
        if total > MAX_JOINT_HYPOTHESES as f64 {
            return Err(Error::invalid(format!(
                "{classes}^{users} joint hypotheses exceed the oracle limit"
            )));
        }
        let total = total as usize;
        let means = (0..total)
            .map(|j| {
                let s: Vec<Complex64> = digits(j, classes, users)
                    .map(|ix| constellation.point(ix))
                    .collect();
                noiseless_output(nonlinearity, h, &s)
            })
            .collect();
        Ok(Self {
            users,
            classes,
            sigma,
            means,
        })
    }

    pub fn posterior(&self, y: &[Complex64]) -> Result<MapPosterior> {
        if self.means.first().is_some_and(|m| m.len() != y.len()) {
            return Err(Error::invalid("observation length does not match the channel"));
        }
        let dist: Vec<f64> = self
            .means
            .iter()
            .map(|m| m.iter().zip(y).map(|(a, b)| (a - b).norm_sqr()).sum())
            .collect();
        let mut joint = if self.sigma == 0.0 {
            let mut best = 0;
            for (j, &d) in dist.iter().enumerate() {
                if d < dist[best] {
                    best = j;
                }
            }
            let mut p = vec![0.0; dist.len()];
            p[best] = 1.0;
            p
        } else {
            let scale = 1.0 / (2.0 * self.sigma * self.sigma);
            let min = dist.iter().cloned().fold(f64::INFINITY, f64::min);
            dist.iter().map(|&d| (-(d - min) * scale).exp()).collect()
        };
        let z: f64 = joint.iter().sum();
        joint.iter_mut().for_each(|p| *p /= z);
        let mut marginals = vec![0.0; self.users * self.classes];
        for (j, &p) in joint.iter().enumerate() {
            for (k, ix) in digits(j, self.classes, self.users).enumerate() {
                marginals[k * self.classes + ix] += p;
            }
        }
        Ok(MapPosterior { joint, marginals })
    }
}

fn digits(mut j: usize, base: usize, count: usize) -> impl Iterator<Item = usize> {
    (0..count).map(move |_| {
        let d = j % base;
        j /= base;
        d
    })
}

/// Exact posterior `∝ exp(-|y - f(Hs)|^2 / (2 sigma^2))` over `S^K`, with
/// `f` the identity or `tanh(0.5 ·)` on real and imaginary parts.
pub fn map_oracle_detect(
    h: &CMatrix,
    y: &[Complex64],
    sigma: f64,
    constellation: &Constellation,
    users: usize,
    nonlinearity: Nonlinearity,
) -> Result<MapPosterior> {
    MapDetector::new(h, sigma, constellation, users, nonlinearity)?.posterior(y)
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Codebook of a code with at most [`MAX_MESSAGE_BITS`] message bits.
#[derive(Clone, Debug)]
pub struct Codebook {
    words: Vec<Vec<u8>>,
}

impl Codebook {
    pub fn new(code: &CodeSpec) -> Result<Self> {
        let m = code.message_length();
        if m > MAX_MESSAGE_BITS {
            return Err(Error::invalid(format!(
                "{m} message bits exceed the enumeration limit of {MAX_MESSAGE_BITS}"
            )));
        }
        let words = (0..1usize << m)
            .map(|j| {
                let msg: Vec<u8> = (0..m).map(|b| ((j >> b) & 1) as u8).collect();
                code.encode(&msg)
            })
            .collect::<Result<_>>()?;
        Ok(Self { words })
    }

    /// Bitwise-MAP decisions; a bit is 1 only when its posterior strictly
    /// favours 1.
    pub fn decode(&self, llr: &[f64]) -> Result<Vec<u8>> {
        let n = self.words[0].len();
        if llr.len() != n {
            return Err(Error::invalid(format!("{} LLRs for length {n}", llr.len())));
        }
        let log1: Vec<f64> = llr.iter().map(|&l| log_sigmoid(l)).collect();
        let log0: Vec<f64> = llr.iter().map(|&l| log_sigmoid(-l)).collect();
        let mut acc = vec![[f64::NEG_INFINITY; 2]; n];
        for w in &self.words {
            let lp: f64 = w
                .iter()
                .enumerate()
                .map(|(v, &b)| if b == 1 { log1[v] } else { log0[v] })
                .sum();
            for (a, &b) in acc.iter_mut().zip(w) {
                a[b as usize] = log_add(a[b as usize], lp);
            }
        }
        Ok(acc.iter().map(|a| u8::from(a[1] > a[0])).collect())
    }
}

pub fn ml_oracle_decode(code: &CodeSpec, llr: &[f64]) -> Result<Vec<u8>> {
    Codebook::new(code)?.decode(llr)
}
