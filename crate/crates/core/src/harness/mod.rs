//! Experiment orchestration: configuration files, the detector/decoder
//! pipeline over blocks and SNR points, metric CSVs, sweeps and oracles.

pub mod oracle;
pub mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::channel::{exp_decay_matrix, load_channel_trace, make_block, BlockConfig, CMatrix, Nonlinearity, TransmissionBlock};
use crate::deepsic::{
    bayesian_infer, blackbox_detect, blackbox_detect_train, deepsic_infer, modular_bayesian_infer,
    train_bayesian_e2e, train_frequentist, train_modular_bayesian, DeepSicTrainConfig, PilotData,
    SoftSymbols,
};
use crate::error::{Error, Result};
use crate::metrics::{ber, ece, prediction_records, ser};
use crate::modem::{llr_from_soft_bits, symbols_per_word, Constellation, ConstellationKind};
use crate::polar::{polar_128_64, CodeSpec};
use crate::seed::{derive_seed, rng_for, tag};
use crate::tanner::{tanner_graph, TannerGraph};
use crate::wbp::{
    bp_infer, hard_decide, train_wbp_bayesian, train_wbp_frequentist, train_wbp_modular_bayesian,
    wbp_infer, TrainingFrame, WbpParams, WbpPosterior, WbpTrainConfig, WeightRealizations,
};

use self::oracle::{Codebook, MapDetector};
use self::plot::csv_error;

#[derive(Clone, Debug, PartialEq)]
pub enum ChannelSpec {
    Linear,
    Tanh,
    /// Recorded matrices replayed one per block over a linear channel.
    Trace { path: PathBuf, matrices: Vec<CMatrix> },
}

impl ChannelSpec {
    fn nonlinearity(&self) -> Nonlinearity {
        match self {
            ChannelSpec::Tanh => Nonlinearity::Tanh,
            _ => Nonlinearity::Linear,
        }
    }

    fn describe(&self) -> String {
        match self {
            ChannelSpec::Linear => "linear".into(),
            ChannelSpec::Tanh => "tanh".into(),
            ChannelSpec::Trace { path, .. } => format!("trace:{}", path.display()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DetectorMode {
    Frequentist,
    Bayesian,
    ModularBayesian,
    BlackBox,
}

impl DetectorMode {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorMode::Frequentist => "F",
            DetectorMode::Bayesian => "B",
            DetectorMode::ModularBayesian => "MB",
            DetectorMode::BlackBox => "blackbox",
        }
    }
}

impl std::str::FromStr for DetectorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f" => Ok(Self::Frequentist),
            "b" => Ok(Self::Bayesian),
            "mb" => Ok(Self::ModularBayesian),
            "blackbox" => Ok(Self::BlackBox),
            _ => Err(Error::config("detector_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderMode {
    None,
    Frequentist,
    Bayesian,
    ModularBayesian,
    PlainBp,
}

impl DecoderMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderMode::None => "none",
            DecoderMode::Frequentist => "F",
            DecoderMode::Bayesian => "B",
            DecoderMode::ModularBayesian => "MB",
            DecoderMode::PlainBp => "plainBP",
        }
    }
}

impl std::str::FromStr for DecoderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "f" => Ok(Self::Frequentist),
            "b" => Ok(Self::Bayesian),
            "mb" => Ok(Self::ModularBayesian),
            "plainbp" => Ok(Self::PlainBp),
            _ => Err(Error::config("decoder_mode", format!("unknown mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CodeChoice {
    Polar128_64,
    Hamming74,
    File(PathBuf),
}

impl CodeChoice {
    fn build(&self) -> Result<CodeSpec> {
        match self {
            CodeChoice::Polar128_64 => Ok(polar_128_64()),
            CodeChoice::Hamming74 => Ok(CodeSpec::hamming74()),
            CodeChoice::File(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                CodeSpec::from_text(&text, p)
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            CodeChoice::Polar128_64 => "polar128_64".into(),
            CodeChoice::Hamming74 => "hamming74".into(),
            CodeChoice::File(p) => format!("file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub channel: ChannelSpec,
    pub constellation: ConstellationKind,
    pub users: usize,
    pub antennas: usize,
    pub q_detector: usize,
    pub q_decoder: usize,
    pub pilots: usize,
    pub info: usize,
    pub blocks: usize,
    pub snr_db: Vec<f64>,
    pub detector_mode: DetectorMode,
    pub decoder_mode: DecoderMode,
    pub j_detector: usize,
    pub j_decoder: usize,
    pub detector_beta: f64,
    pub decoder_beta: f64,
    pub detector_steps: usize,
    pub detector_lr: f64,
    pub decoder_steps: usize,
    pub decoder_lr: f64,
    pub drop_probability: f64,
    pub seed: u64,
    pub ece_bins: usize,
    pub code: CodeChoice,
    /// SNR of the offline decoder training transmissions; defaults to the
    /// midpoint of the evaluated SNR range.
    pub decoder_train_snr_db: Option<f64>,
    pub decoder_train_blocks: usize,
    pub decoder_train_frames: usize,
    pub decoder_file: Option<PathBuf>,
    /// File name of the metric CSV inside the output directory.
    pub output: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            channel: ChannelSpec::Linear,
            constellation: ConstellationKind::Qpsk,
            users: 4,
            antennas: 4,
            q_detector: crate::deepsic::DEFAULT_ITERATIONS,
            q_decoder: crate::wbp::DEFAULT_ITERATIONS,
            pilots: 384,
            info: 14976,
            blocks: 10,
            snr_db: vec![14.0],
            detector_mode: DetectorMode::Frequentist,
            decoder_mode: DecoderMode::None,
            j_detector: crate::deepsic::DEFAULT_ENSEMBLE,
            j_decoder: crate::wbp::DEFAULT_ENSEMBLE,
            detector_beta: 1e4,
            decoder_beta: 1e4,
            detector_steps: 500,
            detector_lr: 5e-3,
            decoder_steps: 500,
            decoder_lr: 1e-3,
            drop_probability: crate::nn::INITIAL_DROP_PROBABILITY,
            seed: 0,
            ece_bins: crate::metrics::DEFAULT_BINS,
            code: CodeChoice::Polar128_64,
            decoder_train_snr_db: None,
            decoder_train_blocks: 1,
            decoder_train_frames: 200,
            decoder_file: None,
            output: "metrics.csv".into(),
        }
    }
}

const KEYS: &[&str] = &[
    "channel",
    "constellation",
    "users",
    "antennas",
    "q_detector",
    "q_decoder",
    "pilots",
    "info",
    "blocks",
    "snr_db",
    "detector_mode",
    "decoder_mode",
    "j_detector",
    "j_decoder",
    "beta",
    "detector_beta",
    "decoder_beta",
    "detector_steps",
    "detector_lr",
    "decoder_steps",
    "decoder_lr",
    "drop_probability",
    "seed",
    "ece_bins",
    "code",
    "decoder_train_snr_db",
    "decoder_train_blocks",
    "decoder_train_frames",
    "decoder_file",
    "output",
];

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment and relative paths
    /// resolve against `base_dir`.
    pub fn parse(text: &str, path: &Path, base_dir: &Path) -> Result<Self> {
        let mut entries: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
            let k = k.trim();
            let key = KEYS
                .iter()
                .find(|&&known| known == k)
                .ok_or_else(|| err(format!("unknown key `{k}`")))?;
            if entries.insert(key, (n + 1, v.trim().to_string())).is_some() {
                return Err(err(format!("duplicate key `{k}`")));
            }
        }
        let mut c = Self::default();
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) }
        };
        let get = |key: &str| entries.get(key);
        fn num<T: std::str::FromStr>(path: &Path, key: &str, e: Option<&(usize, String)>, slot: &mut T) -> Result<()>
        where
            T::Err: std::fmt::Display,
        {
            if let Some((line, v)) = e {
                *slot = v.parse().map_err(|err: T::Err| Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    reason: format!("`{key}`: {err}"),
                })?;
            }
            Ok(())
        }
        num(path, "users", get("users"), &mut c.users)?;
        num(path, "antennas", get("antennas"), &mut c.antennas)?;
        num(path, "q_detector", get("q_detector"), &mut c.q_detector)?;
        num(path, "q_decoder", get("q_decoder"), &mut c.q_decoder)?;
        num(path, "pilots", get("pilots"), &mut c.pilots)?;
        num(path, "info", get("info"), &mut c.info)?;
        num(path, "j_detector", get("j_detector"), &mut c.j_detector)?;
        num(path, "j_decoder", get("j_decoder"), &mut c.j_decoder)?;
        let mut beta = 1e4;
        num(path, "beta", get("beta"), &mut beta)?;
        c.detector_beta = beta;
        c.decoder_beta = beta;
        num(path, "detector_beta", get("detector_beta"), &mut c.detector_beta)?;
        num(path, "decoder_beta", get("decoder_beta"), &mut c.decoder_beta)?;
        num(path, "detector_steps", get("detector_steps"), &mut c.detector_steps)?;
        num(path, "detector_lr", get("detector_lr"), &mut c.detector_lr)?;
        num(path, "decoder_steps", get("decoder_steps"), &mut c.decoder_steps)?;
        num(path, "decoder_lr", get("decoder_lr"), &mut c.decoder_lr)?;
        num(path, "drop_probability", get("drop_probability"), &mut c.drop_probability)?;
        num(path, "seed", get("seed"), &mut c.seed)?;
        num(path, "ece_bins", get("ece_bins"), &mut c.ece_bins)?;
        num(path, "decoder_train_blocks", get("decoder_train_blocks"), &mut c.decoder_train_blocks)?;
        num(path, "decoder_train_frames", get("decoder_train_frames"), &mut c.decoder_train_frames)?;
        if let Some(e) = get("decoder_train_snr_db") {
            let mut v = 0.0;
            num(path, "decoder_train_snr_db", Some(e), &mut v)?;
            c.decoder_train_snr_db = Some(v);
        }
        if let Some((line, v)) = get("snr_db") {
            c.snr_db = v
                .split(',')
                .map(|t| {
                    t.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: *line,
                        reason: format!("`snr_db`: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
        }
        let at_line = |key: &str, e: Error| match (e, get(key)) {
            (Error::Config { reason, .. }, Some((line, _))) => Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                reason: format!("`{key}`: {reason}"),
            },
            (e, _) => e,
        };
        if let Some((_, v)) = get("constellation") {
            c.constellation = v.parse().map_err(|e| at_line("constellation", e))?;
        }
        if let Some((_, v)) = get("detector_mode") {
            c.detector_mode = v.parse().map_err(|e| at_line("detector_mode", e))?;
        }
        if let Some((_, v)) = get("decoder_mode") {
            c.decoder_mode = v.parse().map_err(|e| at_line("decoder_mode", e))?;
        }
        if let Some((line, v)) = get("code") {
            c.code = match v.as_str() {
                "polar128_64" => CodeChoice::Polar128_64,
                "hamming74" => CodeChoice::Hamming74,
                other => match other.strip_prefix("file:") {
                    Some(p) => CodeChoice::File(resolve(p)),
                    None => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: *line,
                            reason: format!("unknown code `{other}`"),
                        })
                    }
                },
            };
        }
        if let Some((_, v)) = get("decoder_file") {
            c.decoder_file = Some(resolve(v));
        }
        if let Some((_, v)) = get("output") {
            c.output = v.clone();
        }
        let explicit_blocks = match get("blocks") {
            Some(e) => {
                let mut b = 0usize;
                num(path, "blocks", Some(e), &mut b)?;
                Some(b)
            }
            None => None,
        };
        if let Some((line, v)) = get("channel") {
            c.channel = match v.as_str() {
                "linear" => ChannelSpec::Linear,
                "tanh" => ChannelSpec::Tanh,
                other => match other.strip_prefix("trace:") {
                    Some(p) => {
                        let p = resolve(p.trim());
                        let matrices = load_channel_trace(&p)?;
                        ChannelSpec::Trace { path: p, matrices }
                    }
                    None => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: *line,
                            reason: format!("unknown channel `{other}`"),
                        })
                    }
                },
            };
        }
        c.blocks = match (&c.channel, explicit_blocks) {
            (ChannelSpec::Trace { matrices, .. }, None) => matrices.len(),
            (_, Some(b)) => b,
            (_, None) => c.blocks,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, path, base)
    }

    pub fn decoding(&self) -> bool {
        self.decoder_mode != DecoderMode::None
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("antennas", self.antennas),
            ("q_detector", self.q_detector),
            ("q_decoder", self.q_decoder),
            ("pilots", self.pilots),
            ("info", self.info),
            ("blocks", self.blocks),
            ("j_detector", self.j_detector),
            ("j_decoder", self.j_decoder),
            ("detector_steps", self.detector_steps),
            ("ece_bins", self.ece_bins),
            ("decoder_train_blocks", self.decoder_train_blocks),
            ("decoder_train_frames", self.decoder_train_frames),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::config("snr_db", "expected a non-empty list of finite values"));
        }
        for (field, v) in [
            ("detector_beta", self.detector_beta),
            ("decoder_beta", self.decoder_beta),
            ("detector_lr", self.detector_lr),
            ("decoder_lr", self.decoder_lr),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.drop_probability > 0.0 && self.drop_probability < 1.0) {
            return Err(Error::config("drop_probability", "must lie in (0,1)"));
        }
        if let ChannelSpec::Trace { matrices, .. } = &self.channel {
            if self.blocks > matrices.len() {
                return Err(Error::config(
                    "blocks",
                    format!("{} blocks but the trace holds {}", self.blocks, matrices.len()),
                ));
            }
            if matrices.iter().any(|m| m.rows() != self.antennas || m.cols() != self.users) {
                return Err(Error::config("channel", "trace matrices do not match antennas x users"));
            }
        }
        if self.decoding() {
            let code = self.code.build()?;
            let per_word = symbols_per_word(code.block_length(), Constellation::new(self.constellation).bits_per_symbol());
            if self.info % per_word != 0 {
                return Err(Error::config(
                    "info",
                    format!("must be a multiple of {per_word} symbols per codeword"),
                ));
            }
        }
        Ok(())
    }

    /// Canonical text of every setting that influences results.
    pub fn canonical(&self) -> String {
        let snr: Vec<String> = self.snr_db.iter().map(|s| s.to_string()).collect();
        let train_snr = self.decoder_train_snr_db.map_or_else(|| "mid".into(), |s| s.to_string());
        format!(
            "channel={}\nconstellation={}\nusers={}\nantennas={}\nq_detector={}\nq_decoder={}\npilots={}\ninfo={}\nblocks={}\nsnr_db={}\ndetector_mode={}\ndecoder_mode={}\nj_detector={}\nj_decoder={}\ndetector_beta={}\ndecoder_beta={}\ndetector_steps={}\ndetector_lr={}\ndecoder_steps={}\ndecoder_lr={}\ndrop_probability={}\nseed={}\nece_bins={}\ncode={}\ndecoder_train_snr_db={}\ndecoder_train_blocks={}\ndecoder_train_frames={}\n",
            self.channel.describe(),
            self.constellation.name(),
            self.users,
            self.antennas,
            self.q_detector,
            self.q_decoder,
            self.pilots,
            self.info,
            self.blocks,
            snr.join(","),
            self.detector_mode.name(),
            self.decoder_mode.name(),
            self.j_detector,
            self.j_decoder,
            self.detector_beta,
            self.decoder_beta,
            self.detector_steps,
            self.detector_lr,
            self.decoder_steps,
            self.decoder_lr,
            self.drop_probability,
            self.seed,
            self.ece_bins,
            self.code.describe(),
            train_snr,
            self.decoder_train_blocks,
            self.decoder_train_frames,
        )
    }

    /// 64-bit FNV-1a hash of [`Self::canonical`], as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a(self.canonical().as_bytes()))
    }

    pub fn decoder_train_snr(&self) -> f64 {
        self.decoder_train_snr_db.unwrap_or_else(|| {
            let lo = self.snr_db.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = self.snr_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        })
    }

    fn channel_matrix(&self, block: usize) -> CMatrix {
        match &self.channel {
            ChannelSpec::Trace { matrices, .. } => matrices[block % matrices.len()].clone(),
            _ => exp_decay_matrix(self.antennas, self.users),
        }
    }

    fn block_config(&self, snr_db: f64) -> BlockConfig {
        BlockConfig {
            users: self.users,
            antennas: self.antennas,
            pilots: self.pilots,
            info: self.info,
            snr_db,
            nonlinearity: self.channel.nonlinearity(),
        }
    }

    fn detector_training(&self, seed: u64) -> DeepSicTrainConfig {
        DeepSicTrainConfig {
            iterations: self.q_detector,
            steps: self.detector_steps,
            learning_rate: self.detector_lr,
            beta: self.detector_beta,
            drop_probability: self.drop_probability,
            ensemble_size: self.j_detector,
            dropout: true,
            seed,
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// One row of the metric CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub fingerprint: String,
    pub block: usize,
    pub snr_db: f64,
    pub detector_mode: String,
    pub decoder_mode: String,
    pub ser: f64,
    /// Absent when nothing is decoded.
    pub ber: Option<f64>,
    pub ece: f64,
    pub runtime_ms: u64,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "fingerprint",
    "block",
    "snr_db",
    "detector_mode",
    "decoder_mode",
    "ser",
    "ber",
    "ece",
    "runtime_ms",
];

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record([
            r.fingerprint.clone(),
            r.block.to_string(),
            r.snr_db.to_string(),
            r.detector_mode.clone(),
            r.decoder_mode.clone(),
            r.ser.to_string(),
            r.ber.map_or_else(String::new, |b| b.to_string()),
            r.ece.to_string(),
            r.runtime_ms.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: "unexpected metric CSV columns".into(),
        });
    }
    reader
        .records()
        .enumerate()
        .map(|(i, row)| {
            let row = row.map_err(|e| csv_error(path, e))?;
            let err = |what: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                reason: format!("invalid {what}"),
            };
            let f = |j: usize, what: &str| row[j].parse::<f64>().map_err(|_| err(what));
            Ok(MetricRecord {
                fingerprint: row[0].to_string(),
                block: row[1].parse().map_err(|_| err("block"))?,
                snr_db: f(2, "snr_db")?,
                detector_mode: row[3].to_string(),
                decoder_mode: row[4].to_string(),
                ser: f(5, "ser")?,
                ber: if row[6].is_empty() { None } else { Some(f(6, "ber")?) },
                ece: f(7, "ece")?,
                runtime_ms: row[8].parse().map_err(|_| err("runtime_ms"))?,
            })
        })
        .collect()
}

/// A decoder ready for inference.
#[derive(Clone, Debug, PartialEq)]
pub enum DecoderModel {
    PlainBp { iterations: usize },
    Frequentist(WbpParams),
    /// End-to-end or modular, following the posterior's mode.
    Bayesian(WbpPosterior),
}

impl DecoderModel {
    /// First line names the kind (`plainBP Q`, `F` or `posterior`), the rest
    /// is the model's own text format.
    pub fn to_text(&self) -> String {
        match self {
            DecoderModel::PlainBp { iterations } => format!("plainBP {iterations}\n"),
            DecoderModel::Frequentist(p) => format!("F\n{}", p.to_text()),
            DecoderModel::Bayesian(p) => format!("posterior\n{}", p.to_text()),
        }
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let (head, rest) = text.split_once('\n').unwrap_or((text, ""));
        let mut parts = head.split_whitespace();
        let err = |reason: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            reason: reason.into(),
        };
        match parts.next() {
            Some("plainBP") => Ok(DecoderModel::PlainBp {
                iterations: parts
                    .next()
                    .and_then(|q| q.parse().ok())
                    .ok_or_else(|| err("missing iteration count"))?,
            }),
            Some("F") => Ok(DecoderModel::Frequentist(WbpParams::from_text(rest, path)?)),
            Some("posterior") => Ok(DecoderModel::Bayesian(WbpPosterior::from_text(rest, path)?)),
            _ => Err(err("unknown decoder kind")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    fn matches(&self, mode: DecoderMode) -> bool {
        use crate::nn::PosteriorMode;
        match (self, mode) {
            (DecoderModel::PlainBp { .. }, DecoderMode::PlainBp) => true,
            (DecoderModel::Frequentist(_), DecoderMode::Frequentist) => true,
            (DecoderModel::Bayesian(p), DecoderMode::Bayesian) => p.mode == PosteriorMode::EndToEnd,
            (DecoderModel::Bayesian(p), DecoderMode::ModularBayesian) => p.mode == PosteriorMode::Modular,
            _ => false,
        }
    }
}

/// Decoder with its ensemble drawn once per block.
enum BlockDecoder<'a> {
    PlainBp(usize),
    Frequentist(&'a WbpParams),
    EndToEnd(WeightRealizations),
    Modular(WeightRealizations),
}

impl<'a> BlockDecoder<'a> {
    fn new(model: &'a DecoderModel, ensemble: usize, seed: u64) -> Result<Self> {
        use crate::nn::PosteriorMode;
        Ok(match model {
            DecoderModel::PlainBp { iterations } => BlockDecoder::PlainBp(*iterations),
            DecoderModel::Frequentist(p) => BlockDecoder::Frequentist(p),
            DecoderModel::Bayesian(p) => {
                let r = WeightRealizations::sample(p, ensemble, seed)?;
                match p.mode {
                    PosteriorMode::EndToEnd => BlockDecoder::EndToEnd(r),
                    PosteriorMode::Modular => BlockDecoder::Modular(r),
                }
            }
        })
    }

    fn decode(&self, graph: &TannerGraph, llr: &[f64]) -> Result<Vec<u8>> {
        let soft = match self {
            BlockDecoder::PlainBp(q) => bp_infer(llr, graph, *q)?,
            BlockDecoder::Frequentist(p) => wbp_infer(p, llr, graph)?,
            BlockDecoder::EndToEnd(r) => r.infer_end_to_end(graph, llr)?,
            BlockDecoder::Modular(r) => r.infer_modular(graph, llr)?,
        };
        Ok(hard_decide(&soft))
    }
}

/// Detector soft outputs on the information part of `block`, after
/// training from scratch on its pilots.
pub fn detect_block(
    config: &ExperimentConfig,
    block: &TransmissionBlock,
    seed: u64,
) -> Result<SoftSymbols> {
    let pilot_features = block.features(block.pilot_range());
    let labels = &block.symbols[..block.pilot_count * block.users];
    let pilots = PilotData {
        features: &pilot_features,
        labels,
    };
    let info = block.features(block.info_range());
    let (k, n, s) = (config.users, config.antennas, Constellation::new(config.constellation).size());
    let tc = config.detector_training(seed);
    match config.detector_mode {
        DetectorMode::Frequentist => deepsic_infer(&train_frequentist(&pilots, k, n, s, &tc)?.model, &info),
        DetectorMode::Bayesian => {
            let post = train_bayesian_e2e(&pilots, k, n, s, &tc)?.model;
            bayesian_infer(&post, &info, config.j_detector, seed)
        }
        DetectorMode::ModularBayesian => {
            let post = train_modular_bayesian(&pilots, k, n, s, &tc)?.model;
            modular_bayesian_infer(&post, &info, config.j_detector, seed)
        }
        DetectorMode::BlackBox => blackbox_detect(&blackbox_detect_train(&pilots, k, n, s, &tc)?.model, &info),
    }
}

/// Channel LLRs of every codeword, `[user][word]`, from soft symbols.
fn codeword_llrs(
    soft: &SoftSymbols,
    constellation: &Constellation,
    block_length: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let per_word = symbols_per_word(block_length, constellation.bits_per_symbol());
    let words = soft.len() / per_word;
    (0..soft.users)
        .map(|k| {
            (0..words)
                .map(|w| {
                    let mut bits = Vec::with_capacity(per_word * constellation.bits_per_symbol());
                    for i in w * per_word..(w + 1) * per_word {
                        bits.extend(constellation.soft_bit_marginals(soft.get(i, k))?);
                    }
                    bits.truncate(block_length);
                    Ok(llr_from_soft_bits(&bits))
                })
                .collect()
        })
        .collect()
}

fn soft_from_marginals(marginals: Vec<Vec<f64>>, users: usize, classes: usize) -> SoftSymbols {
    SoftSymbols {
        users,
        classes,
        probs: marginals.into_iter().flatten().collect(),
    }
}

/// Options that do not affect results.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Record wall-clock block times; otherwise `runtime_ms` is 0 so the
    /// CSV is reproducible byte for byte.
    pub timing: bool,
}

struct CodedContext<'a> {
    code: CodeSpec,
    graph: TannerGraph,
    decoder: &'a DecoderModel,
}

fn block_jobs(config: &ExperimentConfig) -> Vec<(usize, usize)> {
    (0..config.snr_db.len())
        .flat_map(|s| (0..config.blocks).map(move |b| (s, b)))
        .collect()
}

fn simulate_block(
    config: &ExperimentConfig,
    coded: Option<&CodedContext<'_>>,
    fingerprint: &str,
    (si, b): (usize, usize),
    timing: bool,
) -> Result<MetricRecord> {
    let start = Instant::now();
    let snr = config.snr_db[si];
    let ctx = |phase: &str| format!("block {b} at {snr} dB, {phase}");
    let constellation = Constellation::new(config.constellation);
    let mut rng = rng_for(config.seed, &[tag::CHANNEL, si as u64, b as u64]);
    let block = make_block(
        &config.block_config(snr),
        &constellation,
        coded.map(|c| &c.code),
        &config.channel_matrix(b),
        &mut rng,
    )
    .map_err(|e| e.context(&ctx("block generation")))?;
    let train_seed = derive_seed(config.seed, &[tag::BLOCK, si as u64, b as u64]);
    let soft = detect_block(config, &block, train_seed).map_err(|e| e.context(&ctx("detection")))?;
    let truth = &block.symbols[block.pilot_count * config.users..];
    let decisions = soft.hard_decisions();
    let symbol_errors = ser(&decisions, truth)?;
    let records = prediction_records(&decisions, &soft.confidences(), truth, config.users)?;
    let (calibration, _) = ece(&records, config.ece_bins)?;
    let bit_errors = match coded {
        None => None,
        Some(c) => {
            let seed = derive_seed(config.seed, &[tag::DECODER, si as u64, b as u64]);
            let dec = BlockDecoder::new(c.decoder, config.j_decoder, seed)?;
            Some(
                decode_messages(&block, &soft, &constellation, c, &dec)
                    .map_err(|e| e.context(&ctx("decoding")))?,
            )
        }
    };
    Ok(MetricRecord {
        fingerprint: fingerprint.to_string(),
        block: b,
        snr_db: snr,
        detector_mode: config.detector_mode.name().into(),
        decoder_mode: config.decoder_mode.name().into(),
        ser: symbol_errors,
        ber: bit_errors,
        ece: calibration,
        runtime_ms: if timing { start.elapsed().as_millis() as u64 } else { 0 },
    })
}

fn decode_messages(
    block: &TransmissionBlock,
    soft: &SoftSymbols,
    constellation: &Constellation,
    coded: &CodedContext<'_>,
    decoder: &BlockDecoder<'_>,
) -> Result<f64> {
    let llrs = codeword_llrs(soft, constellation, coded.code.block_length())?;
    let mut estimated = Vec::new();
    let mut truth = Vec::new();
    for (k, words) in llrs.iter().enumerate() {
        for (w, llr) in words.iter().enumerate() {
            let hard = decoder.decode(&coded.graph, llr)?;
            estimated.extend(coded.code.recover_message(&hard)?.message);
            truth.extend_from_slice(&block.messages[k][w]);
        }
    }
    ber(&estimated, &truth)
}

/// Simulates every (SNR, block) pair; records come out in SNR-major,
/// block-minor order regardless of scheduling.
pub fn simulate(
    config: &ExperimentConfig,
    decoder: Option<&DecoderModel>,
    timing: bool,
) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    let coded = match (config.decoding(), decoder) {
        (false, _) => None,
        (true, None) => return Err(Error::config("decoder_mode", "decoding requested without a decoder")),
        (true, Some(d)) => {
            if !d.matches(config.decoder_mode) {
                return Err(Error::config("decoder_file", "decoder kind does not match decoder_mode"));
            }
            let code = config.code.build()?;
            let graph = tanner_graph(&code);
            Some(CodedContext { code, graph, decoder: d })
        }
    };
    let fingerprint = config.fingerprint();
    block_jobs(config)
        .into_par_iter()
        .map(|job| simulate_block(config, coded.as_ref(), &fingerprint, job, timing))
        .collect()
}

/// Supervised decoder frames: detector LLRs of offline coded transmissions
/// at the decoder training SNR, paired with the sent codewords.
pub fn decoder_training_frames(config: &ExperimentConfig) -> Result<Vec<TrainingFrame>> {
    let code = config.code.build()?;
    let constellation = Constellation::new(config.constellation);
    let snr = config.decoder_train_snr();
    let mut frames = Vec::new();
    for tb in 0..config.decoder_train_blocks {
        if frames.len() >= config.decoder_train_frames {
            break;
        }
        let ctx = format!("decoder training block {tb}");
        let mut rng = rng_for(config.seed, &[tag::DECODER, u64::MAX, tb as u64]);
        let block = make_block(
            &config.block_config(snr),
            &constellation,
            Some(&code),
            &config.channel_matrix(tb),
            &mut rng,
        )
        .map_err(|e| e.context(&ctx))?;
        let seed = derive_seed(config.seed, &[tag::DECODER, u64::MAX - 1, tb as u64]);
        let soft = detect_block(config, &block, seed).map_err(|e| e.context(&ctx))?;
        let llrs = codeword_llrs(&soft, &constellation, code.block_length())?;
        let words = llrs.first().map_or(0, |w| w.len());
        // interleave users so a frame cap keeps every user represented
        for w in 0..words {
            for (k, user) in llrs.iter().enumerate() {
                frames.push(TrainingFrame {
                    llrs: user[w].clone(),
                    bits: block.codewords[k][w].clone(),
                });
            }
        }
    }
    frames.truncate(config.decoder_train_frames);
    Ok(frames)
}

/// Trains the decoder named by `decoder_mode` offline.
pub fn train_decoder(config: &ExperimentConfig) -> Result<DecoderModel> {
    config.validate()?;
    if config.decoder_mode == DecoderMode::None {
        return Err(Error::config("decoder_mode", "no decoder to train"));
    }
    if config.decoder_mode == DecoderMode::PlainBp {
        return Ok(DecoderModel::PlainBp {
            iterations: config.q_decoder,
        });
    }
    let graph = tanner_graph(&config.code.build()?);
    let frames = decoder_training_frames(config)?;
    let tc = WbpTrainConfig {
        iterations: config.q_decoder,
        steps: config.decoder_steps,
        learning_rate: config.decoder_lr,
        beta: config.decoder_beta,
        drop_probability: config.drop_probability,
        ensemble_size: config.j_decoder,
        dropout: true,
        seed: derive_seed(config.seed, &[tag::DECODER, u64::MAX - 2]),
    };
    let ctx = |e: Error| e.context("decoder training");
    Ok(match config.decoder_mode {
        DecoderMode::Frequentist => DecoderModel::Frequentist(train_wbp_frequentist(&graph, &frames, &tc).map_err(ctx)?.model),
        DecoderMode::Bayesian => DecoderModel::Bayesian(train_wbp_bayesian(&graph, &frames, &tc).map_err(ctx)?.model),
        DecoderMode::ModularBayesian => {
            DecoderModel::Bayesian(train_wbp_modular_bayesian(&graph, &frames, &tc).map_err(ctx)?.model)
        }
        DecoderMode::None | DecoderMode::PlainBp => unreachable!(),
    })
}

/// Where `train-decoder` stores its model and `run` looks for it.
pub fn decoder_path(config: &ExperimentConfig, out_dir: &Path) -> PathBuf {
    config
        .decoder_file
        .clone()
        .unwrap_or_else(|| out_dir.join(format!("decoder_{}_{}.txt", config.decoder_mode.name(), config.fingerprint())))
}

fn obtain_decoder(config: &ExperimentConfig, out_dir: &Path) -> Result<Option<DecoderModel>> {
    if !config.decoding() {
        return Ok(None);
    }
    let path = decoder_path(config, out_dir);
    if path.exists() {
        return DecoderModel::load(&path).map(Some);
    }
    if config.decoder_mode != DecoderMode::PlainBp {
        log::warn!("no decoder at {}; training one in-process", path.display());
    }
    train_decoder(config).map(Some)
}

/// Runs the configured experiment and writes its CSV into the output
/// directory.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<Vec<MetricRecord>> {
    let decoder = obtain_decoder(config, &options.out_dir)?;
    let records = simulate(config, decoder.as_ref(), options.timing)?;
    write_records(&options.out_dir.join(&config.output), &records)?;
    Ok(records)
}

/// Mean metrics over the blocks of one (config, SNR) point.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub fingerprint: String,
    pub snr_db: f64,
    pub detector_mode: String,
    pub decoder_mode: String,
    pub blocks: usize,
    pub ser: f64,
    pub ber: Option<f64>,
    pub ece: f64,
    /// Iteration counts of the producing config, when known.
    pub q_detector: Option<usize>,
    pub q_decoder: Option<usize>,
}

/// Groups by (fingerprint, modes, SNR) in first-appearance order and
/// averages each metric over the group's blocks.
pub fn aggregate(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut ber_counts: Vec<usize> = Vec::new();
    for r in records {
        let at = rows.iter().position(|s| {
            s.fingerprint == r.fingerprint
                && s.detector_mode == r.detector_mode
                && s.decoder_mode == r.decoder_mode
                && s.snr_db.to_bits() == r.snr_db.to_bits()
        });
        let i = at.unwrap_or_else(|| {
            rows.push(SummaryRow {
                fingerprint: r.fingerprint.clone(),
                snr_db: r.snr_db,
                detector_mode: r.detector_mode.clone(),
                decoder_mode: r.decoder_mode.clone(),
                blocks: 0,
                ser: 0.0,
                ber: None,
                ece: 0.0,
                q_detector: None,
                q_decoder: None,
            });
            ber_counts.push(0);
            rows.len() - 1
        });
        let s = &mut rows[i];
        s.blocks += 1;
        s.ser += r.ser;
        s.ece += r.ece;
        if let Some(b) = r.ber {
            s.ber = Some(s.ber.unwrap_or(0.0) + b);
            ber_counts[i] += 1;
        }
    }
    for (s, &nb) in rows.iter_mut().zip(&ber_counts) {
        let n = s.blocks as f64;
        s.ser /= n;
        s.ece /= n;
        s.ber = s.ber.map(|b| b / nb as f64);
    }
    rows
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "fingerprint",
        "snr_db",
        "detector_mode",
        "decoder_mode",
        "q_detector",
        "q_decoder",
        "blocks",
        "ser",
        "ber",
        "ece",
    ])
        .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record([
            r.fingerprint.clone(),
            r.snr_db.to_string(),
            r.detector_mode.clone(),
            r.decoder_mode.clone(),
            r.q_detector.map_or_else(String::new, |q| q.to_string()),
            r.q_decoder.map_or_else(String::new, |q| q.to_string()),
            r.blocks.to_string(),
            r.ser.to_string(),
            r.ber.map_or_else(String::new, |b| b.to_string()),
            r.ece.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs each configuration in order and writes `sweep.csv` (every record)
/// and `sweep_summary.csv` (block means) into the output directory.
pub fn sweep(configs: &[ExperimentConfig], options: &RunOptions) -> Result<Vec<MetricRecord>> {
    let mut all = Vec::new();
    let mut summary = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        let ctx = |e: Error| e.context(&format!("sweep entry {i}"));
        let decoder = obtain_decoder(c, &options.out_dir).map_err(ctx)?;
        let records = simulate(c, decoder.as_ref(), options.timing).map_err(ctx)?;
        summary.extend(aggregate(&records).into_iter().map(|mut row| {
            row.q_detector = Some(c.q_detector);
            row.q_decoder = c.decoding().then_some(c.q_decoder);
            row
        }));
        all.extend(records);
    }
    write_records(&options.out_dir.join("sweep.csv"), &all)?;
    write_summary(&options.out_dir.join("sweep_summary.csv"), &summary)?;
    Ok(all)
}

/// Exact-MAP detection (and bitwise-MAP decoding for short codes) on the
/// same blocks a run would simulate.
pub fn run_oracles(config: &ExperimentConfig, timing: bool) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    let constellation = Constellation::new(config.constellation);
    let codebook = if config.decoding() {
        let code = config.code.build()?;
        match Codebook::new(&code) {
            Ok(cb) => Some((code, cb)),
            Err(e) => {
                log::warn!("decoding oracle skipped: {e}");
                None
            }
        }
    } else {
        None
    };
    let fingerprint = config.fingerprint();
    block_jobs(config)
        .into_par_iter()
        .map(|(si, b)| {
            let start = Instant::now();
            let snr = config.snr_db[si];
            let mut rng = rng_for(config.seed, &[tag::CHANNEL, si as u64, b as u64]);
            let h = config.channel_matrix(b);
            let block = make_block(
                &config.block_config(snr),
                &constellation,
                config.decoding().then(|| config.code.build()).transpose()?.as_ref(),
                &h,
                &mut rng,
            )?;
            let map = MapDetector::new(&h, block.noise_stddev, &constellation, config.users, config.channel.nonlinearity())?;
            let marginals = block
                .info_range()
                .map(|i| map.posterior(block.output(i)).map(|p| p.marginals))
                .collect::<Result<Vec<_>>>()?;
            let soft = soft_from_marginals(marginals, config.users, constellation.size());
            let truth = &block.symbols[block.pilot_count * config.users..];
            let decisions = soft.hard_decisions();
            let records = prediction_records(&decisions, &soft.confidences(), truth, config.users)?;
            let bit_errors = match &codebook {
                None => None,
                Some((code, cb)) => {
                    let llrs = codeword_llrs(&soft, &constellation, code.block_length())?;
                    let mut est = Vec::new();
                    let mut sent = Vec::new();
                    for (k, words) in llrs.iter().enumerate() {
                        for (w, llr) in words.iter().enumerate() {
                            est.extend(code.recover_message(&cb.decode(llr)?)?.message);
                            sent.extend_from_slice(&block.messages[k][w]);
                        }
                    }
                    Some(ber(&est, &sent)?)
                }
            };
            Ok(MetricRecord {
                fingerprint: fingerprint.clone(),
                block: b,
                snr_db: snr,
                detector_mode: "MAP".into(),
                decoder_mode: if bit_errors.is_some() { "ML".into() } else { "none".into() },
                ser: ser(&decisions, truth)?,
                ber: bit_errors,
                ece: ece(&records, config.ece_bins)?.0,
                runtime_ms: if timing { start.elapsed().as_millis() as u64 } else { 0 },
            })
        })
        .collect()
}
