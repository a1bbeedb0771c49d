//! Constellations with Gray labeling, symbol mapping, soft-bit marginals and
//! LLR formation.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;

use crate::error::{Error, Result};

/// LLR magnitude cap.
pub const LLR_CLIP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConstellationKind {
    Bpsk,
    Qpsk,
    Psk8,
}

impl ConstellationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ConstellationKind::Bpsk => "bpsk",
            ConstellationKind::Qpsk => "qpsk",
            ConstellationKind::Psk8 => "psk8",
        }
    }
}

impl std::str::FromStr for ConstellationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bpsk" => Ok(Self::Bpsk),
            "qpsk" => Ok(Self::Qpsk),
            "psk8" | "8psk" | "8-psk" => Ok(Self::Psk8),
            other => Err(Error::config(
                "constellation",
                format!("unknown constellation `{other}`"),
            )),
        }
    }
}

/// Unit-energy PSK constellation. Point index `l` sits at angle order `l`
/// around the circle and carries the Gray code of `l` as its bit label
/// (most significant bit first), so neighbours differ in one bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    kind: ConstellationKind,
    points: Vec<Complex64>,
    labels: Vec<u32>,
    bits_per_symbol: usize,
}

fn gray(l: u32) -> u32 {
    l ^ (l >> 1)
}

impl Constellation {
    pub fn new(kind: ConstellationKind) -> Self {
        let (bits_per_symbol, points): (usize, Vec<Complex64>) = match kind {
            ConstellationKind::Bpsk => (1, vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)]),
            ConstellationKind::Qpsk => (
                2,
                [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
                    .iter()
                    .map(|&(re, im)| Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2))
                    .collect(),
            ),
            ConstellationKind::Psk8 => (
                3,
                (0..8)
                    .map(|l| Complex64::from_polar(1.0, PI * l as f64 / 4.0))
                    .collect(),
            ),
        };
        let labels = (0..points.len() as u32).map(gray).collect();
        Self {
            kind,
            points,
            labels,
            bits_per_symbol,
        }
    }

    pub fn kind(&self) -> ConstellationKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits_per_symbol
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    /// Bit label of point `index`, most significant bit first.
    pub fn label_bits(&self, index: usize) -> Vec<u8> {
        let r = self.bits_per_symbol;
        (0..r)
            .map(|b| ((self.labels[index] >> (r - 1 - b)) & 1) as u8)
            .collect()
    }

    /// Point index carrying the given label.
    pub fn index_of_bits(&self, bits: &[u8]) -> Result<usize> {
        if bits.len() != self.bits_per_symbol {
            return Err(Error::invalid(format!(
                "expected {} bits, got {}",
                self.bits_per_symbol,
                bits.len()
            )));
        }
        let mut label = 0u32;
        for &b in bits {
            if b > 1 {
                return Err(Error::invalid(format!("non-binary bit value {b}")));
            }
            label = (label << 1) | b as u32;
        }
        Ok(self.labels.iter().position(|&l| l == label).unwrap())
    }

    /// Maps a bit stream to point indices, `r` bits per symbol. The caller
    /// pads to a multiple of `r` (see [`pad_bits`]).
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<usize>> {
        let r = self.bits_per_symbol;
        if bits.len() % r != 0 {
            return Err(Error::invalid(format!(
                "bit count {} not a multiple of {r}",
                bits.len()
            )));
        }
        bits.chunks(r).map(|c| self.index_of_bits(c)).collect()
    }

    /// Inverse of [`Self::modulate`] on hard point indices.
    pub fn demodulate_hard(&self, indices: &[usize]) -> Vec<u8> {
        indices.iter().flat_map(|&i| self.label_bits(i)).collect()
    }

    /// `P(bit b = 1)` for each label position given a probability vector over
    /// the points.
    pub fn soft_bit_marginals(&self, probs: &[f64]) -> Result<Vec<f64>> {
        if probs.len() != self.size() {
            return Err(Error::invalid(format!(
                "probability vector of length {} for {} points",
                probs.len(),
                self.size()
            )));
        }
        let r = self.bits_per_symbol;
        let mut out = vec![0.0; r];
        for (idx, &p) in probs.iter().enumerate() {
            for (b, o) in out.iter_mut().enumerate() {
                if (self.labels[idx] >> (r - 1 - b)) & 1 == 1 {
                    *o += p;
                }
            }
        }
        Ok(out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Index of the nearest point (ties to the lowest index).
    pub fn nearest(&self, y: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (y - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Pads with zero bits up to a multiple of `r`.
pub fn pad_bits(bits: &[u8], r: usize) -> Vec<u8> {
    let mut out = bits.to_vec();
    while out.len() % r != 0 {
        out.push(0);
    }
    out
}

/// Number of symbols carrying one `len`-bit word after padding.
pub fn symbols_per_word(len: usize, r: usize) -> usize {
    len.div_ceil(r)
}

/// `log(c / (1 - c))` clipped to `±LLR_CLIP`; positive when bit 1 is more
/// likely.
pub fn llr_from_soft_bit(c: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    let v = if c <= 0.0 {
        -LLR_CLIP
    } else if c >= 1.0 {
        LLR_CLIP
    } else {
        (c / (1.0 - c)).ln()
    };
    v.clamp(-LLR_CLIP, LLR_CLIP)
}

pub fn llr_from_soft_bits(c: &[f64]) -> Vec<f64> {
    c.iter().map(|&v| llr_from_soft_bit(v)).collect()
}

/// Hard decision by maximum probability, ties to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all() -> Vec<Constellation> {
        [ConstellationKind::Bpsk, ConstellationKind::Qpsk, ConstellationKind::Psk8]
            .into_iter()
            .map(Constellation::new)
            .collect()
    }

    #[test]
    fn unit_energy_and_gray_neighbours() {
        for c in all() {
            assert_eq!(c.size(), 1 << c.bits_per_symbol());
            for p in c.points() {
                assert!((p.norm() - 1.0).abs() < 1e-12);
            }
            let mut seen: Vec<Vec<u8>> = (0..c.size()).map(|i| c.label_bits(i)).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), c.size(), "labeling must be a bijection");
            if c.size() > 2 {
                for i in 0..c.size() {
                    let j = (i + 1) % c.size();
                    let diff = c
                        .label_bits(i)
                        .iter()
                        .zip(c.label_bits(j))
                        .filter(|(a, b)| **a != *b)
                        .count();
                    assert_eq!(diff, 1);
                }
            }
        }
    }

    #[test]
    fn mapping_examples() {
        let bpsk = Constellation::new(ConstellationKind::Bpsk);
        let s = bpsk.modulate(&[0, 1]).unwrap();
        assert_eq!(bpsk.point(s[0]), Complex64::new(1.0, 0.0));
        assert_eq!(bpsk.point(s[1]), Complex64::new(-1.0, 0.0));

        let qpsk = Constellation::new(ConstellationKind::Qpsk);
        let p = qpsk.point(qpsk.modulate(&[0, 0]).unwrap()[0]);
        assert!((p - Complex64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2)).norm() < 1e-15);

        let psk8 = Constellation::new(ConstellationKind::Psk8);
        assert!((psk8.point(2) - Complex64::new(0.0, 1.0)).norm() < 1e-15);
        assert!(psk8.modulate(&[0, 1]).is_err());
    }

    #[test]
    fn soft_bit_examples() {
        let qpsk = Constellation::new(ConstellationKind::Qpsk);
        assert_eq!(qpsk.soft_bit_marginals(&[0.25; 4]).unwrap(), vec![0.5, 0.5]);
        // point labeled (1,0) is index 3 (gray(3) = 0b10)
        assert_eq!(qpsk.label_bits(3), vec![1, 0]);
        assert_eq!(qpsk.soft_bit_marginals(&[0.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, 0.0]);
        // brute force: labels 00, 01, 11, 10
        let probs = [0.7, 0.1, 0.1, 0.1];
        let mut expect = [0.0; 2];
        for (i, p) in probs.iter().enumerate() {
            for (b, e) in expect.iter_mut().enumerate() {
                if qpsk.label_bits(i)[b] == 1 {
                    *e += p;
                }
            }
        }
        let got = qpsk.soft_bit_marginals(&probs).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-15 && (got[1] - expect[1]).abs() < 1e-15);
        assert!((got[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn llr_examples() {
        assert_eq!(llr_from_soft_bit(0.5), 0.0);
        assert!((llr_from_soft_bit(0.7311) - 1.0).abs() < 1e-3);
        assert_eq!(llr_from_soft_bit(1.0), LLR_CLIP);
        assert_eq!(llr_from_soft_bit(0.0), -LLR_CLIP);
        assert!(llr_from_soft_bit(0.51) > 0.0 && llr_from_soft_bit(0.49) < 0.0);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    proptest! {
        #[test]
        fn modulate_then_demodulate_is_identity(bits in proptest::collection::vec(0u8..2, 0..60), k in 0usize..3) {
            let c = &all()[k];
            let padded = pad_bits(&bits, c.bits_per_symbol());
            let sym = c.modulate(&padded).unwrap();
            prop_assert_eq!(c.demodulate_hard(&sym), padded);
        }

        #[test]
        fn soft_bits_are_linear_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 8),
                                             b in proptest::collection::vec(0.0f64..1.0, 8),
                                             t in 0.0f64..1.0) {
            let c = Constellation::new(ConstellationKind::Psk8);
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (pa, pb) = (norm(&a), norm(&b));
            let mix: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let (ma, mb, mm) = (c.soft_bit_marginals(&pa).unwrap(), c.soft_bit_marginals(&pb).unwrap(),
                                c.soft_bit_marginals(&mix).unwrap());
            for i in 0..3 {
                prop_assert!((0.0..=1.0).contains(&mm[i]));
                prop_assert!((mm[i] - (t * ma[i] + (1.0 - t) * mb[i])).abs() < 1e-12);
            }
        }
    }
}
