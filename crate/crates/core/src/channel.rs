//! Synthetic MIMO channels, block framing and channel-trace ingestion.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::modem::{pad_bits, symbols_per_word, Constellation};
use crate::polar::CodeSpec;

/// Dense complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mul_vec(&self, s: &[Complex64]) -> Vec<Complex64> {
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(s)
                    .map(|(h, x)| h * x)
                    .sum()
            })
            .collect()
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Spatial exponential power decay: entry `(n, k) = exp(-|n - k|)`.
pub fn exp_decay_matrix(n: usize, k: usize) -> CMatrix {
    let mut m = CMatrix::zeros(n, k);
    for r in 0..n {
        for c in 0..k {
            m[(r, c)] = Complex64::new((-(r as f64 - c as f64).abs()).exp(), 0.0);
        }
    }
    m
}

/// Per-real-dimension noise stddev for `snr_db = 10 log10(1 / (2 sigma^2))`.
pub fn noise_stddev(snr_db: f64) -> f64 {
    (10f64.powf(-snr_db / 10.0) / 2.0).sqrt()
}

fn complex_noise<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(sigma * re, sigma * im)
}

/// `y = H s + w` with circularly-symmetric Gaussian `w`.
pub fn apply_linear_channel<R: Rng + ?Sized>(
    h: &CMatrix,
    s: &[Complex64],
    sigma: f64,
    rng: &mut R,
) -> Vec<Complex64> {
    let mut y = h.mul_vec(s);
    if sigma > 0.0 {
        for v in &mut y {
            *v += complex_noise(sigma, rng);
        }
    }
    y
}

fn tanh_parts(z: Complex64) -> Complex64 {
    Complex64::new(z.re.tanh(), z.im.tanh())
}

/// `y = tanh(0.5 H s + w)`, the tanh acting on real and imaginary parts
/// separately.
pub fn apply_tanh_channel<R: Rng + ?Sized>(
    h: &CMatrix,
    s: &[Complex64],
    sigma: f64,
    rng: &mut R,
) -> Vec<Complex64> {
    h.mul_vec(s)
        .into_iter()
        .map(|v| {
            let w = if sigma > 0.0 {
                complex_noise(sigma, rng)
            } else {
                Complex64::new(0.0, 0.0)
            };
            tanh_parts(0.5 * v + w)
        })
        .collect()
}

/// Noiseless channel mean for a given nonlinearity, used by the MAP oracle.
pub fn noiseless_output(kind: Nonlinearity, h: &CMatrix, s: &[Complex64]) -> Vec<Complex64> {
    match kind {
        Nonlinearity::Linear => h.mul_vec(s),
        Nonlinearity::Tanh => h.mul_vec(s).into_iter().map(|v| tanh_parts(0.5 * v)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Linear,
    Tanh,
}

impl Nonlinearity {
    pub fn apply<R: Rng + ?Sized>(
        &self,
        h: &CMatrix,
        s: &[Complex64],
        sigma: f64,
        rng: &mut R,
    ) -> Vec<Complex64> {
        match self {
            Nonlinearity::Linear => apply_linear_channel(h, s, sigma, rng),
            Nonlinearity::Tanh => apply_tanh_channel(h, s, sigma, rng),
        }
    }
}

/// Stacks `[Re y; Im y]` into a real feature vector of length `2N`.
pub fn stack_real(y: &[Complex64]) -> Vec<f64> {
    y.iter().map(|v| v.re).chain(y.iter().map(|v| v.im)).collect()
}

/// Framing parameters of one transmission block.
#[derive(Clone, Debug)]
pub struct BlockConfig {
    pub users: usize,
    pub antennas: usize,
    pub pilots: usize,
    pub info: usize,
    pub snr_db: f64,
    pub nonlinearity: Nonlinearity,
}

/// One block: `pilots` known symbols followed by `info` information symbols.
#[derive(Clone, Debug)]
pub struct TransmissionBlock {
    pub users: usize,
    pub antennas: usize,
    pub pilot_count: usize,
    pub info_count: usize,
    /// Point indices, `symbols[i * users + k]`.
    pub symbols: Vec<usize>,
    /// Channel outputs, `outputs[i * antennas + n]`.
    pub outputs: Vec<Complex64>,
    pub channel_matrix: CMatrix,
    pub noise_stddev: f64,
    pub snr_db: f64,
    /// Coded runs: `messages[k][w]` and `codewords[k][w]` for codeword `w`
    /// of user `k`, carried by consecutive info symbols.
    pub messages: Vec<Vec<Vec<u8>>>,
    pub codewords: Vec<Vec<Vec<u8>>>,
}

impl TransmissionBlock {
    pub fn total(&self) -> usize {
        self.pilot_count + self.info_count
    }

    pub fn pilot_range(&self) -> std::ops::Range<usize> {
        0..self.pilot_count
    }

    pub fn info_range(&self) -> std::ops::Range<usize> {
        self.pilot_count..self.total()
    }

    pub fn output(&self, i: usize) -> &[Complex64] {
        &self.outputs[i * self.antennas..(i + 1) * self.antennas]
    }

    pub fn symbols_at(&self, i: usize) -> &[usize] {
        &self.symbols[i * self.users..(i + 1) * self.users]
    }

    /// Stacked real features of the outputs in `range`, row per time index.
    pub fn features(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        range.flat_map(|i| stack_real(self.output(i))).collect()
    }

    /// Symbol labels of user `k` over `range`.
    pub fn user_symbols(&self, k: usize, range: std::ops::Range<usize>) -> Vec<usize> {
        range.map(|i| self.symbols[i * self.users + k]).collect()
    }

    pub fn is_coded(&self) -> bool {
        !self.codewords.is_empty()
    }
}

/// Generates a block over channel `h`. Uncoded runs draw every symbol
/// uniformly; coded runs draw uniform messages, encode, pad each codeword
/// with zero bits to a multiple of the bits per symbol and modulate.
pub fn make_block<R: Rng + ?Sized>(
    config: &BlockConfig,
    constellation: &Constellation,
    code: Option<&CodeSpec>,
    h: &CMatrix,
    rng: &mut R,
) -> Result<TransmissionBlock> {
    let (k_users, n_ant) = (config.users, config.antennas);
    if k_users == 0 || n_ant == 0 {
        return Err(Error::config("users", "users and antennas must be positive"));
    }
    if config.pilots == 0 {
        return Err(Error::config("pilots", "at least one pilot is required"));
    }
    if h.rows() != n_ant || h.cols() != k_users {
        return Err(Error::config(
            "channel",
            format!(
                "channel matrix is {}x{}, expected {n_ant}x{k_users}",
                h.rows(),
                h.cols()
            ),
        ));
    }
    let total = config.pilots + config.info;
    let size = constellation.size();
    let mut symbols = vec![0usize; total * k_users];
    for i in 0..config.pilots {
        for k in 0..k_users {
            symbols[i * k_users + k] = rng.random_range(0..size);
        }
    }
    let mut messages = Vec::new();
    let mut codewords = Vec::new();
    match code {
        None => {
            for i in config.pilots..total {
                for k in 0..k_users {
                    symbols[i * k_users + k] = rng.random_range(0..size);
                }
            }
        }
        Some(code) => {
            let r = constellation.bits_per_symbol();
            let per_word = symbols_per_word(code.block_length(), r);
            if config.info % per_word != 0 {
                return Err(Error::config(
                    "info",
                    format!(
                        "{} info symbols is not a multiple of {per_word} symbols per codeword",
                        config.info
                    ),
                ));
            }
            let words = config.info / per_word;
            for k in 0..k_users {
                let mut user_msgs = Vec::with_capacity(words);
                let mut user_cws = Vec::with_capacity(words);
                for w in 0..words {
                    let m: Vec<u8> = (0..code.message_length())
                        .map(|_| rng.random_range(0..2u8))
                        .collect();
                    let c = code.encode(&m)?;
                    let idx = constellation.modulate(&pad_bits(&c, r))?;
                    for (j, s) in idx.into_iter().enumerate() {
                        let i = config.pilots + w * per_word + j;
                        symbols[i * k_users + k] = s;
                    }
                    user_msgs.push(m);
                    user_cws.push(c);
                }
                messages.push(user_msgs);
                codewords.push(user_cws);
            }
        }
    }
    let sigma = noise_stddev(config.snr_db);
    let mut outputs = Vec::with_capacity(total * n_ant);
    for i in 0..total {
        let s: Vec<Complex64> = symbols[i * k_users..(i + 1) * k_users]
            .iter()
            .map(|&ix| constellation.point(ix))
            .collect();
        outputs.extend(config.nonlinearity.apply(h, &s, sigma, rng));
    }
    Ok(TransmissionBlock {
        users: k_users,
        antennas: n_ant,
        pilot_count: config.pilots,
        info_count: config.info,
        symbols,
        outputs,
        channel_matrix: h.clone(),
        noise_stddev: sigma,
        snr_db: config.snr_db,
        messages,
        codewords,
    })
}

/// Writes channel matrices in the trace text format: a header `N K B`,
/// then `B` blocks of `N` rows with `K` space-separated `re,im` entries.
pub fn format_channel_trace(matrices: &[CMatrix]) -> Result<String> {
    let (n, k) = matrices
        .first()
        .map(|m| (m.rows(), m.cols()))
        .ok_or_else(|| Error::invalid("empty channel trace"))?;
    let mut out = format!("{n} {k} {}\n", matrices.len());
    for m in matrices {
        if m.rows() != n || m.cols() != k {
            return Err(Error::invalid("all trace matrices must share one shape"));
        }
        for r in 0..n {
            let row: Vec<String> = (0..k)
                .map(|c| format!("{},{}", m[(r, c)].re, m[(r, c)].im))
                .collect();
            writeln!(out, "{}", row.join(" ")).unwrap();
        }
    }
    Ok(out)
}

pub fn write_channel_trace(path: &Path, matrices: &[CMatrix]) -> Result<()> {
    std::fs::write(path, format_channel_trace(matrices)?).map_err(|e| Error::io(path, e))
}

pub fn parse_channel_trace(text: &str, path: &Path) -> Result<Vec<CMatrix>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| err(hline, format!("bad header: {e}")))?;
    let [n, k, b] = dims[..] else {
        return Err(err(hline, "header must be `N K B`".into()));
    };
    if n == 0 || k == 0 {
        return Err(err(hline, "N and K must be positive".into()));
    }
    let mut out = Vec::with_capacity(b);
    for block in 0..b {
        let mut data = Vec::with_capacity(n * k);
        for _ in 0..n {
            let (ln, line) = lines.next().ok_or_else(|| {
                err(
                    text.lines().count() + 1,
                    format!("unexpected end of file in block {block}"),
                )
            })?;
            let entries: Vec<&str> = line.split_whitespace().collect();
            if entries.len() != k {
                return Err(err(ln, format!("expected {k} entries, found {}", entries.len())));
            }
            for e in entries {
                let (re, im) = e
                    .split_once(',')
                    .ok_or_else(|| err(ln, format!("entry `{e}` is not `re,im`")))?;
                let re: f64 = re.parse().map_err(|_| err(ln, format!("bad real part `{re}`")))?;
                let im: f64 = im.parse().map_err(|_| err(ln, format!("bad imaginary part `{im}`")))?;
                data.push(Complex64::new(re, im));
            }
        }
        out.push(CMatrix::from_rows(n, k, data)?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(err(ln, "trailing data after last block".into()));
    }
    Ok(out)
}

pub fn load_channel_trace(path: &Path) -> Result<Vec<CMatrix>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_channel_trace(&text, path)
}

/// Optional per-symbol dump of a block: one row per (time, user).
pub fn block_csv(block_index: usize, block: &TransmissionBlock, constellation: &Constellation) -> String {
    let mut out = String::from("block,i,user,tx_bits,tx_symbol_re,tx_symbol_im");
    for n in 0..block.antennas {
        write!(out, ",y{n}_re,y{n}_im").unwrap();
    }
    out.push('\n');
    for i in 0..block.total() {
        for k in 0..block.users {
            let s = block.symbols[i * block.users + k];
            let bits: String = constellation
                .label_bits(s)
                .iter()
                .map(|b| char::from(b'0' + b))
                .collect();
            let p = constellation.point(s);
            write!(out, "{block_index},{i},{k},{bits},{},{}", p.re, p.im).unwrap();
            for y in block.output(i) {
                write!(out, ",{},{}", y.re, y.im).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::ConstellationKind;
    use crate::seed::rng_for;

    #[test]
    fn exp_decay_entries() {
        let h = exp_decay_matrix(4, 4);
        assert_eq!(h[(0, 0)].re, 1.0);
        assert!((h[(0, 1)].re - 0.36788).abs() < 1e-5);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(h[(r, c)], h[(c, r)]);
            }
        }
    }

    #[test]
    fn noiseless_channels() {
        let mut rng = rng_for(0, &[]);
        let h = exp_decay_matrix(2, 2);
        let s = [Complex64::new(0.3, -0.2), Complex64::new(-1.0, 0.5)];
        assert_eq!(apply_linear_channel(&h, &s, 0.0, &mut rng), h.mul_vec(&s));
        let zero = [Complex64::new(0.0, 0.0); 2];
        assert!(apply_tanh_channel(&h, &zero, 0.0, &mut rng).iter().all(|v| v.norm() == 0.0));
        let one = CMatrix::identity(1);
        let y = apply_tanh_channel(&one, &[Complex64::new(1.0, 0.0)], 0.0, &mut rng);
        assert!((y[0].re - 0.46212).abs() < 1e-5);
        let big = apply_tanh_channel(&one, &[Complex64::new(20.0, -20.0)], 0.0, &mut rng);
        assert!(big[0].re >= 0.995 && big[0].im <= -0.995);
    }

    #[test]
    fn noise_moments() {
        let mut rng = rng_for(5, &[]);
        let h = CMatrix::identity(2);
        let s = [Complex64::new(0.7, -0.7), Complex64::new(-1.0, 0.0)];
        let sigma = 0.4;
        let n = 100_000;
        let mut mean = [Complex64::new(0.0, 0.0); 2];
        let mut power = [0.0; 2];
        for _ in 0..n {
            let y = apply_linear_channel(&h, &s, sigma, &mut rng);
            for j in 0..2 {
                mean[j] += y[j];
                power[j] += (y[j] - s[j]).norm_sqr();
            }
        }
        let tol = 3.0 * sigma / (n as f64).sqrt();
        for j in 0..2 {
            let m = mean[j] / n as f64;
            assert!((m.re - s[j].re).abs() < tol && (m.im - s[j].im).abs() < tol);
            let var = power[j] / n as f64;
            assert!((var / (2.0 * sigma * sigma) - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn empirical_snr_matches_configuration() {
        let c = Constellation::new(ConstellationKind::Qpsk);
        let h = CMatrix::identity(1);
        let cfg = BlockConfig {
            users: 1,
            antennas: 1,
            pilots: 1,
            info: 100_000,
            snr_db: 9.0,
            nonlinearity: Nonlinearity::Linear,
        };
        let mut rng = rng_for(6, &[]);
        let block = make_block(&cfg, &c, None, &h, &mut rng).unwrap();
        let (mut sig, mut noise) = (0.0, 0.0);
        for i in 0..block.total() {
            let x = c.point(block.symbols_at(i)[0]);
            sig += x.norm_sqr();
            noise += (block.output(i)[0] - x).norm_sqr();
        }
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 9.0).abs() < 0.1, "snr {snr}");
    }

    #[test]
    fn block_sizes_and_config_errors() {
        let c = Constellation::new(ConstellationKind::Qpsk);
        let h = exp_decay_matrix(4, 4);
        let mut rng = rng_for(1, &[]);
        let cfg = BlockConfig {
            users: 4,
            antennas: 4,
            pilots: 128,
            info: 15232,
            snr_db: 10.0,
            nonlinearity: Nonlinearity::Linear,
        };
        let b = make_block(&cfg, &c, None, &h, &mut rng).unwrap();
        assert_eq!(b.total(), 15360);
        let mut bad = cfg.clone();
        bad.pilots = 0;
        assert!(matches!(make_block(&bad, &c, None, &h, &mut rng), Err(Error::Config { .. })));
        let mut bad = cfg;
        bad.antennas = 3;
        assert!(matches!(make_block(&bad, &c, None, &h, &mut rng), Err(Error::Config { .. })));
    }

    #[test]
    fn trace_roundtrip_is_bit_exact() {
        let mut rng = rng_for(2, &[]);
        let mats: Vec<CMatrix> = (0..10)
            .map(|_| {
                let data = (0..6)
                    .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
                    .collect();
                CMatrix::from_rows(2, 3, data).unwrap()
            })
            .collect();
        let text = format_channel_trace(&mats).unwrap();
        let back = parse_channel_trace(&text, Path::new("mem")).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back, mats);
    }

    #[test]
    fn trace_errors_carry_line_numbers() {
        let text = "2 2 1\n1,0 0,0\n0,0 oops\n";
        match parse_channel_trace(text, Path::new("t.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "2 2 2\n1,0 0,0\n0,0 1,0\n";
        assert!(matches!(parse_channel_trace(text, Path::new("t")), Err(Error::Parse { .. })));
        assert!(matches!(parse_channel_trace("2 x\n", Path::new("t")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn block_csv_has_row_per_symbol() {
        let c = Constellation::new(ConstellationKind::Bpsk);
        let h = CMatrix::identity(2);
        let cfg = BlockConfig {
            users: 2,
            antennas: 2,
            pilots: 3,
            info: 2,
            snr_db: 5.0,
            nonlinearity: Nonlinearity::Tanh,
        };
        let b = make_block(&cfg, &c, None, &h, &mut rng_for(3, &[])).unwrap();
        let csv = block_csv(0, &b, &c);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 5 * 2);
        assert_eq!(lines[0], "block,i,user,tx_bits,tx_symbol_re,tx_symbol_im,y0_re,y0_im,y1_re,y1_im");
    }
}
