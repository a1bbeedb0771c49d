//! Weighted belief propagation over a Tanner graph, with frequentist
//! multi-loss training and Bayesian (end-to-end and modular) variants.
//!
//! Messages follow the tanh-domain flooding schedule: variable-to-check
//! messages are `tanh` of half the weighted LLR sum, check-to-variable
//! messages are `2 atanh` of the product of the other incoming messages.
//! The soft output `L` lies in (-1, 1) and maps to `P(bit = 1) = (1 + L) / 2`.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modem::LLR_CLIP;
use crate::nn::{
    binary_entropy, concrete_mask, sigmoid, AdamConfig, AdamState, PosteriorMode, Trained,
};
use crate::seed::{open_unit, rng_for, tag};
use crate::tanner::TannerGraph;

pub const DEFAULT_ITERATIONS: usize = 5;
pub const DEFAULT_ENSEMBLE: usize = 3;
pub const ATANH_CLIP: f64 = 1.0 - 1e-7;

/// Per-iteration, per-edge weights on check-to-variable messages.
#[derive(Clone, Debug, PartialEq)]
pub struct WbpParams {
    iterations: usize,
    edge_count: usize,
    /// Iteration-major: `weights[q * edge_count + e]`.
    weights: Vec<f64>,
}

impl WbpParams {
    /// All weights 1, i.e. plain BP.
    pub fn ones(graph: &TannerGraph, iterations: usize) -> Result<Self> {
        Self::from_weights(
            graph.edge_count(),
            iterations,
            vec![1.0; graph.edge_count() * iterations],
        )
    }

    pub fn from_weights(edge_count: usize, iterations: usize, weights: Vec<f64>) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::invalid("WBP needs at least one iteration"));
        }
        if weights.len() != edge_count * iterations {
            return Err(Error::invalid(format!(
                "{} weights for {iterations} iterations of {edge_count} edges",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("non-finite WBP weight"));
        }
        Ok(Self {
            iterations,
            edge_count,
            weights,
        })
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights of iteration `q` (0-based).
    pub fn iteration_weights(&self, q: usize) -> &[f64] {
        &self.weights[q * self.edge_count..(q + 1) * self.edge_count]
    }

    /// One line per iteration listing edge weights in edge order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for q in 0..self.iterations {
            write_line(&mut out, self.iteration_weights(q));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let rows = parse_rows(text.lines().enumerate(), path)?;
        let edges = rows.first().map_or(0, |(_, r)| r.len());
        if let Some((ln, _)) = rows.iter().find(|(_, r)| r.len() != edges) {
            return Err(parse_error(path, *ln, "ragged weight line"));
        }
        let iterations = rows.len();
        Self::from_weights(
            edges,
            iterations,
            rows.into_iter().flat_map(|(_, r)| r).collect(),
        )
        .map_err(|e| parse_error(path, 1, &e.to_string()))
    }
}

fn write_line(out: &mut String, values: &[f64]) {
    let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
    writeln!(out, "{}", line.join(" ")).unwrap();
}

fn parse_error(path: &Path, line: usize, reason: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    }
}

fn parse_rows<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
    path: &Path,
) -> Result<Vec<(usize, Vec<f64>)>> {
    lines
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .map(|(ln, l)| {
            l.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| parse_error(path, ln, &format!("`{t}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(|r| (ln, r))
        })
        .collect()
}

/// Soft output to `P(bit = 1)`.
pub fn soft_to_probability(l: f64) -> f64 {
    0.5 * (1.0 + l)
}

/// Bit 1 iff `L > 0`; exact zeros decide 0.
pub fn hard_decide(soft: &[f64]) -> Vec<u8> {
    soft.iter().map(|&l| (l > 0.0) as u8).collect()
}

fn check_llrs(graph: &TannerGraph, llr: &[f64]) -> Result<Vec<f64>> {
    if llr.len() != graph.variable_count() {
        return Err(Error::invalid(format!(
            "{} LLRs for {} variable nodes",
            llr.len(),
            graph.variable_count()
        )));
    }
    if llr.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN LLR"));
    }
    Ok(llr.iter().map(|v| v.clamp(-LLR_CLIP, LLR_CLIP)).collect())
}

/// Intermediates of one message-passing iteration.
#[derive(Clone, Debug)]
struct IterTrace {
    mvc: Vec<f64>,
    /// Unclipped product of the other incoming messages at each check.
    prod: Vec<f64>,
    mcv: Vec<f64>,
    /// `llr + sum_e w_e mcv_e` per variable.
    sums: Vec<f64>,
}

fn variable_update(graph: &TannerGraph, llr: &[f64], w: &[f64], mcv_prev: &[f64], mvc: &mut [f64]) {
    let mut contrib = Vec::new();
    let mut suffix = Vec::new();
    for (v, &l) in llr.iter().enumerate() {
        let es = graph.variable_edges(v);
        contrib.clear();
        contrib.extend(es.iter().map(|&e| w[e] * mcv_prev[e]));
        suffix.clear();
        suffix.resize(es.len() + 1, 0.0);
        for i in (0..es.len()).rev() {
            suffix[i] = suffix[i + 1] + contrib[i];
        }
        let mut prefix = 0.0;
        for (i, &e) in es.iter().enumerate() {
            mvc[e] = (0.5 * (l + (prefix + suffix[i + 1]))).tanh();
            prefix += contrib[i];
        }
    }
}

fn check_update(graph: &TannerGraph, mvc: &[f64], prod: &mut [f64], mcv: &mut [f64]) {
    let mut log_suffix = Vec::new();
    let mut neg_suffix = Vec::new();
    for c in 0..graph.check_count() {
        let es = graph.check_edges(c);
        let d = es.len();
        log_suffix.clear();
        log_suffix.resize(d + 1, 0.0);
        neg_suffix.clear();
        neg_suffix.resize(d + 1, false);
        for i in (0..d).rev() {
            let x = mvc[es[i]];
            log_suffix[i] = log_suffix[i + 1] + x.abs().ln();
            neg_suffix[i] = neg_suffix[i + 1] ^ x.is_sign_negative();
        }
        let (mut log_prefix, mut neg_prefix) = (0.0, false);
        for (i, &e) in es.iter().enumerate() {
            let mag = (log_prefix + log_suffix[i + 1]).exp();
            let t = if neg_prefix ^ neg_suffix[i + 1] { -mag } else { mag };
            prod[e] = t;
            mcv[e] = 2.0 * t.abs().min(ATANH_CLIP).atanh().copysign(t);
            let x = mvc[e];
            log_prefix += x.abs().ln();
            neg_prefix ^= x.is_sign_negative();
        }
    }
}

fn output_sums(graph: &TannerGraph, llr: &[f64], w: &[f64], mcv: &[f64]) -> Vec<f64> {
    llr.iter()
        .enumerate()
        .map(|(v, &l)| {
            let s: f64 = graph.variable_edges(v).iter().map(|&e| w[e] * mcv[e]).sum();
            l + s
        })
        .collect()
}

fn soft_output(sums: &[f64]) -> Vec<f64> {
    sums.iter().map(|s| (0.5 * s).tanh()).collect()
}

fn iterate(graph: &TannerGraph, llr: &[f64], w: &[f64], mcv_prev: &[f64]) -> IterTrace {
    let e = graph.edge_count();
    let mut mvc = vec![0.0; e];
    variable_update(graph, llr, w, mcv_prev, &mut mvc);
    let mut prod = vec![0.0; e];
    let mut mcv = vec![0.0; e];
    check_update(graph, &mvc, &mut prod, &mut mcv);
    let sums = output_sums(graph, llr, w, &mcv);
    IterTrace {
        mvc,
        prod,
        mcv,
        sums,
    }
}

/// Runs `weights.len() / E` iterations starting from `mcv_init`.
fn forward(graph: &TannerGraph, llr: &[f64], weights: &[f64], mcv_init: &[f64]) -> Vec<IterTrace> {
    let e = graph.edge_count();
    let iters = if e == 0 { 1 } else { weights.len() / e };
    let mut traces: Vec<IterTrace> = Vec::with_capacity(iters);
    for q in 0..iters {
        let prev = traces.last().map_or(mcv_init, |t| &t.mcv);
        let t = iterate(graph, llr, &weights[q * e..(q + 1) * e], prev);
        traces.push(t);
    }
    traces
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Bitwise cross-entropy of `P(bit=1) = sigmoid(s)` against `bits`.
fn bce(sums: &[f64], bits: &[u8]) -> f64 {
    sums.iter()
        .zip(bits)
        .map(|(&s, &b)| softplus(s) - b as f64 * s)
        .sum()
}

/// Accumulates `dL/dw` for the cross-entropy at every traced iteration
/// (scaled by `scale`) into `g_w`, which has the layout of `weights`.
fn backward(
    graph: &TannerGraph,
    bits: &[u8],
    weights: &[f64],
    mcv_init: &[f64],
    traces: &[IterTrace],
    scale: f64,
    g_w: &mut [f64],
) {
    let e_count = graph.edge_count();
    let mut g_from_next = vec![0.0; e_count];
    let mut g_mcv = vec![0.0; e_count];
    let mut g_mvc = vec![0.0; e_count];
    let mut g_a = vec![0.0; e_count];
    for q in (0..traces.len()).rev() {
        let w = &weights[q * e_count..(q + 1) * e_count];
        let gw = &mut g_w[q * e_count..(q + 1) * e_count];
        let tr = &traces[q];
        let prev = if q == 0 { mcv_init } else { &traces[q - 1].mcv };
        g_mcv.copy_from_slice(&g_from_next);
        for (v, &s) in tr.sums.iter().enumerate() {
            let gs = (sigmoid(s) - bits[v] as f64) * scale;
            for &e in graph.variable_edges(v) {
                g_mcv[e] += gs * w[e];
                gw[e] += gs * tr.mcv[e];
            }
        }
        // check node: d prod_e / d mvc_k = product over the check without e and k
        for c in 0..graph.check_count() {
            let es = graph.check_edges(c);
            let d = es.len();
            let gt: Vec<f64> = es
                .iter()
                .map(|&e| {
                    let t = tr.prod[e];
                    if t.abs() < ATANH_CLIP {
                        g_mcv[e] * 2.0 / (1.0 - t * t)
                    } else {
                        0.0
                    }
                })
                .collect();
            let x: Vec<f64> = es.iter().map(|&e| tr.mvc[e]).collect();
            let mut suf = vec![1.0; d + 1];
            let mut suf_g = vec![0.0; d + 1];
            for i in (0..d).rev() {
                suf[i] = suf[i + 1] * x[i];
                suf_g[i] = suf_g[i + 1] * x[i] + gt[i] * suf[i + 1];
            }
            let (mut pre, mut pre_g) = (1.0, 0.0);
            for i in 0..d {
                g_mvc[es[i]] = pre_g * suf[i + 1] + pre * suf_g[i + 1];
                pre_g = pre_g * x[i] + gt[i] * pre;
                pre *= x[i];
            }
        }
        for e in 0..e_count {
            let m = tr.mvc[e];
            g_a[e] = g_mvc[e] * 0.5 * (1.0 - m * m);
        }
        for v in 0..graph.variable_count() {
            let es = graph.variable_edges(v);
            let total: f64 = es.iter().map(|&e| g_a[e]).sum();
            for &e in es {
                let others = total - g_a[e];
                gw[e] += prev[e] * others;
                g_from_next[e] = w[e] * others;
            }
        }
    }
}

/// Soft outputs `L^(q)` of every iteration.
pub fn wbp_trace(params: &WbpParams, llr: &[f64], graph: &TannerGraph) -> Result<Vec<Vec<f64>>> {
    check_params(params, graph)?;
    let llr = check_llrs(graph, llr)?;
    let init = vec![0.0; graph.edge_count()];
    Ok(forward(graph, &llr, &params.weights, &init)
        .iter()
        .map(|t| soft_output(&t.sums))
        .collect())
}

fn check_params(params: &WbpParams, graph: &TannerGraph) -> Result<()> {
    if params.edge_count != graph.edge_count() {
        return Err(Error::invalid(format!(
            "weights for {} edges, graph has {}",
            params.edge_count,
            graph.edge_count()
        )));
    }
    Ok(())
}

/// Final soft output after all iterations.
pub fn wbp_infer(params: &WbpParams, llr: &[f64], graph: &TannerGraph) -> Result<Vec<f64>> {
    Ok(wbp_trace(params, llr, graph)?.pop().unwrap())
}

/// Unweighted BP with `iterations` iterations.
pub fn bp_infer(llr: &[f64], graph: &TannerGraph, iterations: usize) -> Result<Vec<f64>> {
    wbp_infer(&WbpParams::ones(graph, iterations)?, llr, graph)
}

/// Multiplicative Bernoulli dropout on edge weights: each weight is kept
/// with probability `1 - sigmoid(logit)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WbpPosterior {
    pub nominal: WbpParams,
    /// Same layout as the nominal weights.
    pub dropout_logits: Vec<f64>,
    pub mode: PosteriorMode,
    pub ensemble_size: usize,
    pub prior_stddev: f64,
    pub temperature: f64,
}

impl WbpPosterior {
    pub fn new(
        nominal: WbpParams,
        dropout_logits: Vec<f64>,
        mode: PosteriorMode,
        ensemble_size: usize,
    ) -> Result<Self> {
        if dropout_logits.len() != nominal.weights.len() {
            return Err(Error::invalid(format!(
                "{} dropout logits for {} weights",
                dropout_logits.len(),
                nominal.weights.len()
            )));
        }
        if ensemble_size == 0 {
            return Err(Error::invalid("ensemble size must be at least 1"));
        }
        Ok(Self {
            nominal,
            dropout_logits,
            mode,
            ensemble_size,
            prior_stddev: 1.0,
            temperature: 0.1,
        })
    }

    /// Posterior that never drops a weight.
    pub fn without_dropout(nominal: WbpParams, mode: PosteriorMode, ensemble_size: usize) -> Result<Self> {
        let n = nominal.weights.len();
        Self::new(nominal, vec![f64::NEG_INFINITY; n], mode, ensemble_size)
    }

    pub fn drop_probabilities(&self) -> Vec<f64> {
        self.dropout_logits.iter().map(|&a| sigmoid(a)).collect()
    }

    /// Effective weights of iteration `q` for one hard mask draw.
    fn sample_iteration<R: Rng + ?Sized>(&self, q: usize, rng: &mut R) -> Vec<f64> {
        let e = self.nominal.edge_count;
        let range = q * e..(q + 1) * e;
        self.nominal.weights[range.clone()]
            .iter()
            .zip(&self.dropout_logits[range])
            .map(|(&w, &a)| {
                let u: f64 = rng.random();
                if u < sigmoid(a) {
                    0.0
                } else {
                    w
                }
            })
            .collect()
    }

    /// Header line `mode J`, then per iteration a weights line followed by a
    /// logits line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.mode.name(), self.ensemble_size);
        let e = self.nominal.edge_count;
        for q in 0..self.nominal.iterations {
            write_line(&mut out, self.nominal.iteration_weights(q));
            write_line(&mut out, &self.dropout_logits[q * e..(q + 1) * e]);
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_error(path, 1, "empty posterior file"))?;
        let mut parts = header.split_whitespace();
        let mode: PosteriorMode = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|e: Error| parse_error(path, 1, &e.to_string()))?;
        let ensemble: usize = parts
            .next()
            .and_then(|j| j.parse().ok())
            .ok_or_else(|| parse_error(path, 1, "missing ensemble size"))?;
        let rows = parse_rows(lines, path)?;
        if rows.is_empty() || rows.len() % 2 != 0 {
            return Err(parse_error(path, 1, "expected weight/logit line pairs"));
        }
        let edges = rows[0].1.len();
        if let Some((ln, _)) = rows.iter().find(|(_, r)| r.len() != edges) {
            return Err(parse_error(path, *ln, "ragged line"));
        }
        let mut weights = Vec::new();
        let mut logits = Vec::new();
        for pair in rows.chunks(2) {
            weights.extend(&pair[0].1);
            logits.extend(&pair[1].1);
        }
        let nominal = WbpParams::from_weights(edges, rows.len() / 2, weights)
            .map_err(|e| parse_error(path, 2, &e.to_string()))?;
        Self::new(nominal, logits, mode, ensemble)
            .map_err(|e| parse_error(path, 1, &e.to_string()))
    }
}

/// `J` sampled weight realizations of a posterior.
#[derive(Clone, Debug)]
pub struct WeightRealizations {
    iterations: usize,
    /// `members[j]` holds iteration-major effective weights.
    members: Vec<Vec<f64>>,
}

impl WeightRealizations {
    /// Member `j` draws iteration `q` from the stream `(seed, q, j)`.
    pub fn sample(posterior: &WbpPosterior, ensemble_size: usize, seed: u64) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(Error::invalid("ensemble size must be at least 1"));
        }
        let iterations = posterior.nominal.iterations;
        let members = (0..ensemble_size)
            .map(|j| {
                (0..iterations)
                    .flat_map(|q| {
                        let mut rng = rng_for(seed, &[tag::INFER_MASK, q as u64, j as u64]);
                        posterior.sample_iteration(q, &mut rng)
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            iterations,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, j: usize) -> Result<WbpParams> {
        let w = self.members[j].clone();
        WbpParams::from_weights(w.len() / self.iterations, self.iterations, w)
    }

    /// Average of the final soft outputs of full runs of every member.
    pub fn infer_end_to_end(&self, graph: &TannerGraph, llr: &[f64]) -> Result<Vec<f64>> {
        let llr = check_llrs(graph, llr)?;
        self.check_graph(graph)?;
        let init = vec![0.0; graph.edge_count()];
        let outs: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|w| soft_output(&forward(graph, &llr, w, &init).pop().unwrap().sums))
            .collect();
        Ok(average(&outs))
    }

    /// Ensembles inside every iteration: variable-to-check messages are
    /// averaged over members before the check update; the last iteration's
    /// soft output is the member average of that iteration run from the
    /// ensembled incoming messages.
    pub fn infer_modular(&self, graph: &TannerGraph, llr: &[f64]) -> Result<Vec<f64>> {
        Ok(self.infer_modular_trace(graph, llr)?.soft)
    }

    /// Modular inference exposing the ensembled messages of every iteration.
    pub fn infer_modular_trace(&self, graph: &TannerGraph, llr: &[f64]) -> Result<ModularTrace> {
        let llr = check_llrs(graph, llr)?;
        self.check_graph(graph)?;
        let e = graph.edge_count();
        let mut mcv = vec![0.0; e];
        let mut mvc_history = Vec::new();
        for q in 0..self.iterations - 1 {
            let (mvc, next) = self.ensembled_iteration(graph, &llr, q, &mcv);
            mvc_history.push(mvc);
            mcv = next;
        }
        let q = self.iterations - 1;
        let outs: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|w| soft_output(&iterate(graph, &llr, &w[q * e..(q + 1) * e], &mcv).sums))
            .collect();
        Ok(ModularTrace {
            ensembled_mvc: mvc_history,
            soft: average(&outs),
        })
    }

    fn ensembled_iteration(
        &self,
        graph: &TannerGraph,
        llr: &[f64],
        q: usize,
        mcv_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let e = graph.edge_count();
        let per_member: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|w| {
                let mut mvc = vec![0.0; e];
                variable_update(graph, llr, &w[q * e..(q + 1) * e], mcv_prev, &mut mvc);
                mvc
            })
            .collect();
        let mvc = average(&per_member);
        let mut prod = vec![0.0; e];
        let mut mcv = vec![0.0; e];
        check_update(graph, &mvc, &mut prod, &mut mcv);
        (mvc, mcv)
    }

    fn check_graph(&self, graph: &TannerGraph) -> Result<()> {
        let want = graph.edge_count() * self.iterations;
        if self.members.iter().any(|m| m.len() != want) {
            return Err(Error::invalid("weight realizations do not match the graph"));
        }
        Ok(())
    }
}

/// Ensembled messages of the first `Q - 1` iterations and the final soft
/// output of modular inference.
#[derive(Clone, Debug)]
pub struct ModularTrace {
    pub ensembled_mvc: Vec<Vec<f64>>,
    pub soft: Vec<f64>,
}

fn average(members: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = members[0].clone();
    for m in &members[1..] {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let j = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= j);
    acc
}

fn require_mode(posterior: &WbpPosterior, mode: PosteriorMode) -> Result<()> {
    if posterior.mode != mode {
        return Err(Error::invalid(format!(
            "posterior mode is {}, expected {}",
            posterior.mode.name(),
            mode.name()
        )));
    }
    Ok(())
}

/// Average of `J` full-run soft outputs under sampled weight realizations.
pub fn bayesian_wbp_infer(
    posterior: &WbpPosterior,
    llr: &[f64],
    graph: &TannerGraph,
    ensemble_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    require_mode(posterior, PosteriorMode::EndToEnd)?;
    WeightRealizations::sample(posterior, ensemble_size, seed)?.infer_end_to_end(graph, llr)
}

/// Modular inference with ensembling inside each iteration.
pub fn modular_bayesian_wbp_infer(
    posterior: &WbpPosterior,
    llr: &[f64],
    graph: &TannerGraph,
    ensemble_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    require_mode(posterior, PosteriorMode::Modular)?;
    WeightRealizations::sample(posterior, ensemble_size, seed)?.infer_modular(graph, llr)
}

/// One supervised decoder example: channel LLRs and the transmitted
/// codeword.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingFrame {
    pub llrs: Vec<f64>,
    pub bits: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WbpTrainConfig {
    pub iterations: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub drop_probability: f64,
    pub ensemble_size: usize,
    /// When false the Bayesian trainers keep every weight and never move
    /// the dropout logits.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for WbpTrainConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            steps: 500,
            learning_rate: 1e-3,
            beta: 1e4,
            drop_probability: crate::nn::INITIAL_DROP_PROBABILITY,
            ensemble_size: DEFAULT_ENSEMBLE,
            dropout: true,
            seed: 0,
        }
    }
}

fn prepare_frames(graph: &TannerGraph, frames: &[TrainingFrame]) -> Result<Vec<TrainingFrame>> {
    if frames.is_empty() {
        return Err(Error::config("training_frames", "no decoder training frames"));
    }
    frames
        .iter()
        .map(|f| {
            if f.bits.len() != graph.variable_count() || f.bits.iter().any(|&b| b > 1) {
                return Err(Error::invalid("training frame bits do not match the graph"));
            }
            Ok(TrainingFrame {
                llrs: check_llrs(graph, &f.llrs)?,
                bits: f.bits.clone(),
            })
        })
        .collect()
}

/// Multi-loss over all iterations, weights initialized to 1.
pub fn train_wbp_frequentist(
    graph: &TannerGraph,
    frames: &[TrainingFrame],
    config: &WbpTrainConfig,
) -> Result<Trained<WbpParams>> {
    let frames = prepare_frames(graph, frames)?;
    let mut params = WbpParams::ones(graph, config.iterations)?;
    let init = vec![0.0; graph.edge_count()];
    let scale = 1.0 / (frames.len() * graph.variable_count().max(1)) as f64;
    let mut adam = AdamState::new(params.weights.len(), AdamConfig::with_lr(config.learning_rate));
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let per_frame: Vec<(f64, Vec<f64>)> = frames
            .par_iter()
            .map(|f| {
                let traces = forward(graph, &f.llrs, &params.weights, &init);
                let loss: f64 = traces.iter().map(|t| bce(&t.sums, &f.bits)).sum();
                let mut g = vec![0.0; params.weights.len()];
                backward(graph, &f.bits, &params.weights, &init, &traces, scale, &mut g);
                (loss * scale, g)
            })
            .collect();
        let (loss, grads) = reduce(per_frame, params.weights.len());
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("WBP training step {step}"),
            });
        }
        curve.push(loss);
        adam.step(&mut params.weights, &grads)
            .map_err(|e| e.context(&format!("WBP training step {step}")))?;
    }
    Ok(Trained {
        model: params,
        curves: vec![curve],
    })
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, len: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = vec![0.0; len];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss, grads)
}

/// Scaled KL of the edge-weight dropout posterior: value and gradients with
/// respect to the weights and the logits.
fn weight_kl(weights: &[f64], logits: &[f64], prior_stddev: f64, beta: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let inv_beta = if beta.is_infinite() { 0.0 } else { 1.0 / beta };
    let var = prior_stddev * prior_stddev;
    let mut value = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut ga = vec![0.0; logits.len()];
    for i in 0..weights.len() {
        let (w, a) = (weights[i], logits[i]);
        let p = sigmoid(a);
        let c = w * w / (2.0 * var);
        value += inv_beta * ((1.0 - p) * c - binary_entropy(p));
        let dp = p * (1.0 - p);
        ga[i] = inv_beta * (-c * dp + a * dp);
        gw[i] = inv_beta * (1.0 - p) * w / var;
    }
    (value, gw, ga)
}

/// Relaxed keep masks for `frames` frames over `range` of the weight
/// vector, drawn from one stream per (iteration, step).
struct RelaxedMasks {
    keep: Vec<f64>,
    dkeep: Vec<f64>,
}

fn relaxed_masks(
    logits: &[f64],
    first_iteration: usize,
    edges: usize,
    frames: usize,
    step: usize,
    config: &WbpTrainConfig,
    temperature: f64,
) -> Result<Vec<RelaxedMasks>> {
    // masks[f] covers all iterations in `logits`, iteration-major
    let iters = if edges == 0 { 0 } else { logits.len() / edges };
    let n = logits.len();
    let mut out: Vec<RelaxedMasks> = (0..frames)
        .map(|_| RelaxedMasks {
            keep: vec![1.0; n],
            dkeep: vec![0.0; n],
        })
        .collect();
    if !config.dropout {
        return Ok(out);
    }
    for q in 0..iters {
        let stream = (first_iteration + q) as u64;
        let mut rng = rng_for(config.seed, &[tag::TRAIN_MASK, stream, step as u64]);
        for m in out.iter_mut() {
            for i in q * edges..(q + 1) * edges {
                let z = concrete_mask(logits[i], open_unit(&mut rng), temperature)?;
                m.keep[i] = 1.0 - z;
                m.dkeep[i] = -z * (1.0 - z) / temperature;
            }
        }
    }
    Ok(out)
}

/// Optimizes nominal weights and dropout logits of `iters` consecutive
/// iterations starting at `first_iteration`, with the data loss at every
/// one of those iterations, starting from `mcv_init` per frame.
#[allow(clippy::too_many_arguments)]
fn train_posterior_block(
    graph: &TannerGraph,
    frames: &[TrainingFrame],
    mcv_init: &[Vec<f64>],
    first_iteration: usize,
    iters: usize,
    config: &WbpTrainConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let e = graph.edge_count();
    let n = e * iters;
    let logit0 = (config.drop_probability / (1.0 - config.drop_probability)).ln();
    // theta = [nominal weights, dropout logits]
    let mut theta = vec![1.0; n];
    theta.extend(std::iter::repeat_n(logit0, n));
    let (prior_stddev, temperature) = (1.0, 0.1);
    let scale = 1.0 / (frames.len() * graph.variable_count().max(1)) as f64;
    let mut adam = AdamState::new(2 * n, AdamConfig::with_lr(config.learning_rate));
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (nominal, logits) = theta.split_at(n);
        let masks = relaxed_masks(logits, first_iteration, e, frames.len(), step, config, temperature)?;
        let per_frame: Vec<(f64, Vec<f64>)> = frames
            .par_iter()
            .zip(&masks)
            .zip(mcv_init)
            .map(|((f, m), init)| {
                let weff: Vec<f64> = nominal.iter().zip(&m.keep).map(|(w, k)| w * k).collect();
                let traces = forward(graph, &f.llrs, &weff, init);
                let loss: f64 = traces.iter().map(|t| bce(&t.sums, &f.bits)).sum();
                let mut g_eff = vec![0.0; n];
                backward(graph, &f.bits, &weff, init, &traces, scale, &mut g_eff);
                let mut g = vec![0.0; 2 * n];
                for i in 0..n {
                    g[i] = g_eff[i] * m.keep[i];
                    g[n + i] = g_eff[i] * nominal[i] * m.dkeep[i];
                }
                (loss * scale, g)
            })
            .collect();
        let (mut loss, mut grads) = reduce(per_frame, 2 * n);
        let (kl, gw, ga) = weight_kl(nominal, logits, prior_stddev, config.beta);
        loss += kl;
        for i in 0..n {
            grads[i] += gw[i];
            if config.dropout {
                grads[n + i] += ga[i];
            } else {
                grads[n + i] = 0.0;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("WBP iteration {} training step {step}", first_iteration + 1),
            });
        }
        curve.push(loss);
        adam.step(&mut theta, &grads)
            .map_err(|e| e.context(&format!("WBP training step {step}")))?;
    }
    let logits = theta.split_off(n);
    Ok((theta, logits, curve))
}

/// One posterior over all iterations jointly.
pub fn train_wbp_bayesian(
    graph: &TannerGraph,
    frames: &[TrainingFrame],
    config: &WbpTrainConfig,
) -> Result<Trained<WbpPosterior>> {
    let frames = prepare_frames(graph, frames)?;
    check_drop_probability(config)?;
    let init = vec![vec![0.0; graph.edge_count()]; frames.len()];
    let (w, logits, curve) =
        train_posterior_block(graph, &frames, &init, 0, config.iterations, config)?;
    let nominal = WbpParams::from_weights(graph.edge_count(), config.iterations, w)?;
    Ok(Trained {
        model: WbpPosterior::new(nominal, logits, PosteriorMode::EndToEnd, config.ensemble_size)?,
        curves: vec![curve],
    })
}

fn check_drop_probability(config: &WbpTrainConfig) -> Result<()> {
    if !(config.drop_probability > 0.0 && config.drop_probability < 1.0) {
        return Err(Error::config(
            "drop_probability",
            format!("{} outside (0,1)", config.drop_probability),
        ));
    }
    if config.iterations == 0 {
        return Err(Error::config("q_decoder", "must be positive"));
    }
    Ok(())
}

/// Per-iteration posteriors trained in order; iteration `q` learns from the
/// ensembled messages produced by the already trained iterations.
pub fn train_wbp_modular_bayesian(
    graph: &TannerGraph,
    frames: &[TrainingFrame],
    config: &WbpTrainConfig,
) -> Result<Trained<WbpPosterior>> {
    let frames = prepare_frames(graph, frames)?;
    check_drop_probability(config)?;
    let e = graph.edge_count();
    let mut mcv: Vec<Vec<f64>> = vec![vec![0.0; e]; frames.len()];
    let mut weights = Vec::with_capacity(e * config.iterations);
    let mut logits = Vec::with_capacity(e * config.iterations);
    let mut curves = Vec::with_capacity(config.iterations);
    for q in 0..config.iterations {
        let (w, a, curve) = train_posterior_block(graph, &frames, &mcv, q, 1, config)?;
        curves.push(curve);
        if q + 1 < config.iterations {
            let post = WbpPosterior::new(
                WbpParams::from_weights(e, 1, w.clone())?,
                a.clone(),
                PosteriorMode::Modular,
                config.ensemble_size,
            )?;
            // same streams as inference draws for iteration q
            let shifted = WeightRealizations {
                iterations: 1,
                members: (0..config.ensemble_size)
                    .map(|j| {
                        let mut rng = rng_for(config.seed, &[tag::INFER_MASK, q as u64, j as u64]);
                        post.sample_iteration(0, &mut rng)
                    })
                    .collect(),
            };
            mcv = frames
                .par_iter()
                .zip(&mcv)
                .map(|(f, prev)| shifted.ensembled_iteration(graph, &f.llrs, 0, prev).1)
                .collect();
        }
        weights.extend(w);
        logits.extend(a);
    }
    let nominal = WbpParams::from_weights(e, config.iterations, weights)?;
    Ok(Trained {
        model: WbpPosterior::new(nominal, logits, PosteriorMode::Modular, config.ensemble_size)?,
        curves,
    })
}

/// Mean multi-loss of `params` over `frames`, as minimized by frequentist
/// training.
pub fn multi_loss(graph: &TannerGraph, params: &WbpParams, frames: &[TrainingFrame]) -> Result<f64> {
    let frames = prepare_frames(graph, frames)?;
    check_params(params, graph)?;
    let init = vec![0.0; graph.edge_count()];
    let scale = 1.0 / (frames.len() * graph.variable_count().max(1)) as f64;
    Ok(frames
        .iter()
        .map(|f| {
            forward(graph, &f.llrs, &params.weights, &init)
                .iter()
                .map(|t| bce(&t.sums, &f.bits))
                .sum::<f64>()
                * scale
        })
        .sum())
}

/// Analytic gradient of [`multi_loss`] with respect to the weights.
pub fn multi_loss_gradient(
    graph: &TannerGraph,
    params: &WbpParams,
    frames: &[TrainingFrame],
) -> Result<Vec<f64>> {
    let frames = prepare_frames(graph, frames)?;
    check_params(params, graph)?;
    let init = vec![0.0; graph.edge_count()];
    let scale = 1.0 / (frames.len() * graph.variable_count().max(1)) as f64;
    let mut g = vec![0.0; params.weights.len()];
    for f in &frames {
        let traces = forward(graph, &f.llrs, &params.weights, &init);
        backward(graph, &f.bits, &params.weights, &init, &traces, scale, &mut g);
    }
    Ok(g)
}
