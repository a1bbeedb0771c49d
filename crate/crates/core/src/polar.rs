//! Linear block codes: polar construction, generator-matrix encoding,
//! parity-check derivation and message recovery.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gf2::Gf2Matrix;

/// A binary linear code described by its generator and parity-check
/// matrices. Codewords are `c = G^T m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSpec {
    generator: Gf2Matrix,
    parity_check: Gf2Matrix,
    frozen_set: Vec<usize>,
    /// Codeword coordinates whose columns of `G` are independent.
    info_positions: Vec<usize>,
    /// Inverse of `G` restricted to `info_positions`.
    recovery: Gf2Matrix,
}

/// Result of inverting the encoder on a hard-decided word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recovered {
    pub message: Vec<u8>,
    /// Set when the input word is not a codeword; `message` is then the
    /// best-effort solution on the information coordinates.
    pub non_codeword: bool,
}

/// Bhattacharyya parameters of the synthetic channels of `F^{⊗n}` for a
/// BEC with erasure probability `z0`, in natural index order.
pub fn bhattacharyya_parameters(n: u32, z0: f64) -> Vec<f64> {
    let len = 1usize << n;
    (0..len)
        .map(|i| {
            // the least significant index bit is the innermost polarization step
            let mut z = z0;
            for b in 0..n {
                z = if (i >> b) & 1 == 1 { z * z } else { 2.0 * z - z * z };
            }
            z
        })
        .collect()
}

/// Row `i` of `F^{⊗n}` with `F = [[1,0],[1,1]]`: entry `j` is set iff the
/// bits of `j` are a subset of the bits of `i`.
pub fn kronecker_row(i: usize, len: usize) -> Vec<u8> {
    (0..len).map(|j| (i & j == j) as u8).collect()
}

impl CodeSpec {
    /// Builds a code from its generator and derives `H` as a null-space
    /// basis of `G`.
    pub fn from_generator(generator: Gf2Matrix, frozen_set: Vec<usize>) -> Result<Self> {
        let parity_check = generator.null_space();
        Self::with_parity_check(generator, parity_check, frozen_set)
    }

    pub fn with_parity_check(
        generator: Gf2Matrix,
        parity_check: Gf2Matrix,
        frozen_set: Vec<usize>,
    ) -> Result<Self> {
        let m_len = generator.rows();
        if parity_check.cols() != generator.cols() {
            return Err(Error::invalid("G and H_pc disagree on block length"));
        }
        if !generator.mul(&parity_check.transpose())?.is_zero() {
            return Err(Error::invalid("H_pc G^T is not zero"));
        }
        let mut reduced = generator.clone();
        let info_positions = reduced.rref();
        if info_positions.len() != m_len {
            return Err(Error::invalid(format!(
                "generator has rank {} < {m_len}",
                info_positions.len()
            )));
        }
        let recovery = generator
            .select_cols(&info_positions)
            .inverse()
            .ok_or_else(|| Error::invalid("information submatrix is singular"))?;
        Ok(Self {
            generator,
            parity_check,
            frozen_set,
            info_positions,
            recovery,
        })
    }

    pub fn block_length(&self) -> usize {
        self.generator.cols()
    }

    pub fn message_length(&self) -> usize {
        self.generator.rows()
    }

    pub fn generator(&self) -> &Gf2Matrix {
        &self.generator
    }

    pub fn parity_check(&self) -> &Gf2Matrix {
        &self.parity_check
    }

    pub fn frozen_set(&self) -> &[usize] {
        &self.frozen_set
    }

    /// Non-frozen indices of the polar transform, ascending (empty for
    /// non-polar codes).
    pub fn information_set(&self) -> Vec<usize> {
        if self.frozen_set.is_empty() {
            return Vec::new();
        }
        (0..self.block_length())
            .filter(|i| !self.frozen_set.contains(i))
            .collect()
    }

    pub fn encode(&self, message: &[u8]) -> Result<Vec<u8>> {
        if message.len() != self.message_length() {
            return Err(Error::invalid(format!(
                "message length {} != {}",
                message.len(),
                self.message_length()
            )));
        }
        if let Some(b) = message.iter().find(|&&b| b > 1) {
            return Err(Error::invalid(format!("non-binary message bit {b}")));
        }
        Ok(self.generator.left_mul_vec(message))
    }

    pub fn syndrome(&self, word: &[u8]) -> Vec<u8> {
        self.parity_check.mul_vec(word)
    }

    pub fn is_codeword(&self, word: &[u8]) -> bool {
        self.syndrome(word).iter().all(|&s| s == 0)
    }

    /// Solves `G^T m = c` on the information coordinates.
    pub fn recover_message(&self, word: &[u8]) -> Result<Recovered> {
        if word.len() != self.block_length() {
            return Err(Error::invalid(format!(
                "word length {} != {}",
                word.len(),
                self.block_length()
            )));
        }
        let restricted: Vec<u8> = self.info_positions.iter().map(|&p| word[p]).collect();
        let message = self.recovery.left_mul_vec(&restricted);
        Ok(Recovered {
            message,
            non_codeword: !self.is_codeword(word),
        })
    }

    /// The `(7,4)` Hamming code with generator `[I | P]` and the standard
    /// parity-check matrix `[P^T | I]`.
    pub fn hamming74() -> Self {
        let p = [[1u8, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]];
        let g: Vec<Vec<u8>> = (0..4)
            .map(|r| {
                let mut row = vec![0u8; 7];
                row[r] = 1;
                row[4..].copy_from_slice(&p[r]);
                row
            })
            .collect();
        let h: Vec<Vec<u8>> = (0..3)
            .map(|c| {
                let mut row: Vec<u8> = p.iter().map(|pr| pr[c]).collect();
                row.extend((0..3).map(|j| (j == c) as u8));
                row
            })
            .collect();
        Self::with_parity_check(
            Gf2Matrix::from_rows(&g).unwrap(),
            Gf2Matrix::from_rows(&h).unwrap(),
            Vec::new(),
        )
        .expect("hamming fixture is consistent")
    }

    /// Plain-text export: `C M R` dimensions line, then the `M` rows of `G`
    /// and the `R` rows of `H_pc` as 0/1 strings.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{} {} {}\n",
            self.block_length(),
            self.message_length(),
            self.parity_check.rows()
        );
        for m in [&self.generator, &self.parity_check] {
            for r in 0..m.rows() {
                let s: String = m.row_bits(r).iter().map(|&b| char::from(b'0' + b)).collect();
                writeln!(out, "{s}").unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (ln, header) = lines.next().ok_or_else(|| err(1, "empty code file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(ln, format!("bad dimensions: {e}")))?;
        let [c, m, r] = dims[..] else {
            return Err(err(ln, "dimensions line must be `C M R`".into()));
        };
        let mut read = |count: usize| -> Result<Vec<Vec<u8>>> {
            (0..count)
                .map(|_| {
                    let (ln, l) = lines.next().ok_or_else(|| err(ln, "truncated matrix".into()))?;
                    if l.len() != c {
                        return Err(err(ln, format!("row of length {}, expected {c}", l.len())));
                    }
                    l.bytes()
                        .map(|b| match b {
                            b'0' => Ok(0),
                            b'1' => Ok(1),
                            _ => Err(err(ln, format!("invalid character `{}`", b as char))),
                        })
                        .collect()
                })
                .collect()
        };
        let g = read(m)?;
        let h = read(r)?;
        let zero_rows = |n| Gf2Matrix::zeros(n, c);
        let g = if m == 0 { zero_rows(0) } else { Gf2Matrix::from_rows(&g)? };
        let h = if r == 0 { zero_rows(0) } else { Gf2Matrix::from_rows(&h)? };
        Self::with_parity_check(g, h, Vec::new())
    }
}

/// Polar code of length `block_length` (a power of two) carrying
/// `message_length` bits. The frozen set holds the `C - M` synthetic
/// channels with the largest Bhattacharyya parameter for a BEC with erasure
/// probability `design_parameter`; ties freeze the lower index.
pub fn build_polar_code(
    block_length: usize,
    message_length: usize,
    design_parameter: f64,
) -> Result<CodeSpec> {
    if !block_length.is_power_of_two() || block_length < 2 {
        return Err(Error::invalid(format!(
            "block length {block_length} is not a power of two"
        )));
    }
    if message_length == 0 || message_length > block_length {
        return Err(Error::invalid(format!(
            "message length {message_length} outside 1..={block_length}"
        )));
    }
    let n = block_length.trailing_zeros();
    let z = bhattacharyya_parameters(n, design_parameter);
    let mut order: Vec<usize> = (0..block_length).collect();
    // most reliable first; among equal parameters prefer the higher index
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(b.cmp(&a)));
    let mut info: Vec<usize> = order[..message_length].to_vec();
    info.sort_unstable();
    let frozen: Vec<usize> = (0..block_length).filter(|i| !info.contains(i)).collect();
    let rows: Vec<Vec<u8>> = info.iter().map(|&i| kronecker_row(i, block_length)).collect();
    CodeSpec::from_generator(Gf2Matrix::from_rows(&rows)?, frozen)
}

/// The (128, 64) configuration used throughout the experiments.
pub fn polar_128_64() -> CodeSpec {
    build_polar_code(128, 64, 0.5).expect("valid polar parameters")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use rand::Rng;

    fn random_bits(len: usize, rng: &mut impl Rng) -> Vec<u8> {
        (0..len).map(|_| rng.random_range(0..2u8)).collect()
    }

    #[test]
    fn small_polar_information_set() {
        // classic N = 8, K = 4 BEC(0.5) construction
        let code = build_polar_code(8, 4, 0.5).unwrap();
        assert_eq!(code.information_set(), vec![3, 5, 6, 7]);
        assert_eq!(code.frozen_set(), &[0, 1, 2, 4]);
    }

    #[test]
    fn polar_dimensions_and_ranks() {
        let code = polar_128_64();
        assert_eq!(code.generator().rows(), 64);
        assert_eq!(code.generator().cols(), 128);
        assert_eq!(code.generator().rank(), 64);
        assert_eq!(code.parity_check().rank(), 64);
        assert_eq!(code.encode(&[0; 64]).unwrap(), vec![0; 128]);
        for r in 0..64 {
            assert!(code.is_codeword(&code.generator().row_bits(r)));
        }
    }

    #[test]
    fn polar_encoding_matches_transform() {
        // c = u F^{⊗n} with the message placed on the information set
        let code = polar_128_64();
        let info = code.information_set();
        let mut rng = rng_for(1, &[]);
        for _ in 0..20 {
            let m = random_bits(64, &mut rng);
            let mut u = vec![0u8; 128];
            for (b, &i) in m.iter().zip(&info) {
                u[i] = *b;
            }
            let mut c = vec![0u8; 128];
            for (i, &ui) in u.iter().enumerate() {
                if ui == 1 {
                    for (cj, rj) in c.iter_mut().zip(kronecker_row(i, 128)) {
                        *cj ^= rj;
                    }
                }
            }
            assert_eq!(code.encode(&m).unwrap(), c);
        }
    }

    #[test]
    fn linearity_and_recovery() {
        let code = polar_128_64();
        let mut rng = rng_for(2, &[]);
        for _ in 0..50 {
            let a = random_bits(64, &mut rng);
            let b = random_bits(64, &mut rng);
            let x: Vec<u8> = a.iter().zip(&b).map(|(p, q)| p ^ q).collect();
            let ca = code.encode(&a).unwrap();
            let cb = code.encode(&b).unwrap();
            let cx: Vec<u8> = ca.iter().zip(&cb).map(|(p, q)| p ^ q).collect();
            assert_eq!(code.encode(&x).unwrap(), cx);
            let rec = code.recover_message(&ca).unwrap();
            assert_eq!(rec.message, a);
            assert!(!rec.non_codeword);
        }
        assert_eq!(code.recover_message(&[0; 128]).unwrap().message, vec![0; 64]);
    }

    #[test]
    fn flipped_bit_is_flagged() {
        let code = polar_128_64();
        let mut rng = rng_for(3, &[]);
        let mut c = code.encode(&random_bits(64, &mut rng)).unwrap();
        c[17] ^= 1;
        // syndrome oracle: H_pc c != 0
        assert!(code.syndrome(&c).iter().any(|&s| s == 1));
        assert!(code.recover_message(&c).unwrap().non_codeword);
    }

    #[test]
    fn bad_inputs_rejected() {
        let code = polar_128_64();
        assert!(code.encode(&[0; 63]).is_err());
        let mut m = vec![0u8; 64];
        m[0] = 2;
        assert!(code.encode(&m).is_err());
        assert!(build_polar_code(100, 50, 0.5).is_err());
    }

    #[test]
    fn hamming_codebook_matches_textbook() {
        let code = CodeSpec::hamming74();
        // textbook systematic (7,4): parity p1 = d1+d2+d4, p2 = d1+d3+d4, p3 = d2+d3+d4
        for v in 0..16u8 {
            let d: Vec<u8> = (0..4).map(|b| (v >> (3 - b)) & 1).collect();
            let expect = vec![
                d[0],
                d[1],
                d[2],
                d[3],
                d[0] ^ d[1] ^ d[3],
                d[0] ^ d[2] ^ d[3],
                d[1] ^ d[2] ^ d[3],
            ];
            assert_eq!(code.encode(&d).unwrap(), expect);
            assert!(code.is_codeword(&expect));
        }
        assert_eq!(code.parity_check().count_ones(), 12);
    }

    #[test]
    fn text_roundtrip() {
        let code = CodeSpec::hamming74();
        let text = code.to_text();
        assert!(text.starts_with("7 4 3\n1000110\n"));
        let back = CodeSpec::from_text(&text, Path::new("mem")).unwrap();
        assert_eq!(back.generator(), code.generator());
        assert_eq!(back.parity_check(), code.parity_check());
        assert!(matches!(
            CodeSpec::from_text("7 4 3\n10001\n", Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
