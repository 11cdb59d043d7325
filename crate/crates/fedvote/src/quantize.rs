//! Weight quantization: stochastic rounding onto discrete levels, the
//! norm-scaled one-bit gradient quantizer used by the compressed-update
//! baseline, probability clipping, and the bit-level wire formats.
//!
//! Both stochastic rounders are unbiased: conditioned on the input vector,
//! the expected rounded value equals the input coordinate by coordinate.
//! That property is what lets a vote over rounded weights stand in for an
//! average of real ones, and the tests here check it by Monte Carlo.

use crate::error::{Error, Result};
use crate::nn::{LatentWeights, LayerShape, NormalizationFn};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Quantization level sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    /// {-1, +1}
    Binary,
    /// {-1, 0, +1}
    Ternary,
}

impl Level {
    /// Serialized payload size for `dim` coordinates: one bit per binary
    /// weight, two bits per ternary weight.
    pub fn payload_bytes(&self, dim: usize) -> usize {
        match self {
            Level::Binary => dim.div_ceil(8),
            Level::Ternary => dim.div_ceil(4),
        }
    }
}

/// A vector of quantized weights, each entry drawn from the level set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedWeights {
    level: Level,
    values: Vec<i8>,
}

impl QuantizedWeights {
    pub fn new(level: Level, values: Vec<i8>) -> Result<Self> {
        let ok = match level {
            Level::Binary => values.iter().all(|&v| v == 1 || v == -1),
            Level::Ternary => values.iter().all(|&v| (-1..=1).contains(&v)),
        };
        if !ok {
            return Err(Error::invalid(format!(
                "values outside the {level:?} level set"
            )));
        }
        Ok(QuantizedWeights { level, values })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    /// Serializes to the packed wire format.
    pub fn pack(&self) -> Vec<u8> {
        match self.level {
            Level::Binary => {
                let mut bytes = vec![0u8; self.level.payload_bytes(self.values.len())];
                for (i, &v) in self.values.iter().enumerate() {
                    if v == 1 {
                        bytes[i / 8] |= 1 << (i % 8);
                    }
                }
                bytes
            }
            Level::Ternary => {
                let mut bytes = vec![0u8; self.level.payload_bytes(self.values.len())];
                for (i, &v) in self.values.iter().enumerate() {
                    let code: u8 = match v {
                        0 => 0b00,
                        1 => 0b01,
                        _ => 0b10,
                    };
                    bytes[i / 4] |= code << (2 * (i % 4));
                }
                bytes
            }
        }
    }

    /// Parses the packed wire format produced by [`pack`](Self::pack).
    ///
    /// `dim` disambiguates the tail of the last byte; unused tail bits must
    /// be zero, and the ternary code `11` is rejected.
    pub fn unpack(level: Level, dim: usize, bytes: &[u8]) -> Result<Self> {
        let expected = level.payload_bytes(dim);
        if bytes.len() != expected {
            return Err(Error::invalid(format!(
                "payload of {} bytes, expected {expected} for {dim} {level:?} weights",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(dim);
        match level {
            Level::Binary => {
                for i in 0..dim {
                    values.push(if bytes[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 });
                }
                for i in dim..expected * 8 {
                    if bytes[i / 8] >> (i % 8) & 1 == 1 {
                        return Err(Error::invalid("nonzero padding bits in binary payload"));
                    }
                }
            }
            Level::Ternary => {
                for i in 0..dim {
                    values.push(match bytes[i / 4] >> (2 * (i % 4)) & 0b11 {
                        0b00 => 0,
                        0b01 => 1,
                        0b10 => -1,
                        _ => {
                            return Err(Error::invalid(format!(
                                "invalid ternary code 11 at coordinate {i}"
                            )))
                        }
                    });
                }
                for i in dim..expected * 4 {
                    if bytes[i / 4] >> (2 * (i % 4)) & 0b11 != 0 {
                        return Err(Error::invalid("nonzero padding bits in ternary payload"));
                    }
                }
            }
        }
        Ok(QuantizedWeights { level, values })
    }
}

fn check_normalized(w: &[f64]) -> Result<()> {
    for (i, &v) in w.iter().enumerate() {
        if !v.is_finite() || v.abs() > 1.0 {
            return Err(Error::domain(format!(
                "normalized weight {v} at coordinate {i} lies outside [-1, 1]"
            )));
        }
    }
    Ok(())
}

/// Rounds normalized weights onto {-1, +1}: coordinate `i` becomes +1 with
/// probability `(w[i] + 1) / 2`, independently across coordinates. The
/// expectation of the result equals `w` exactly.
pub fn sto_round_binary<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Result<QuantizedWeights> {
    check_normalized(w)?;
    let values = w
        .iter()
        .map(|&v| {
            let p = (v + 1.0) / 2.0;
            if rng.random::<f64>() < p {
                1
            } else {
                -1
            }
        })
        .collect();
    Ok(QuantizedWeights {
        level: Level::Binary,
        values,
    })
}

/// Rounds normalized weights onto {-1, 0, +1}: coordinate `i` becomes
/// sign(w[i]) with probability |w[i]| and 0 otherwise. Also unbiased.
pub fn sto_round_ternary<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Result<QuantizedWeights> {
    check_normalized(w)?;
    let values = w
        .iter()
        .map(|&v| {
            let u = rng.random::<f64>();
            if v >= 0.0 {
                if u < v {
                    1
                } else {
                    0
                }
            } else if u < -v {
                -1
            } else {
                0
            }
        })
        .collect();
    Ok(QuantizedWeights {
        level: Level::Ternary,
        values,
    })
}

/// Closed form for the expected squared rounding error of the binary
/// rounder on `w`: sum of (1 - w[i]^2), i.e. `d - ||w||^2`.
pub fn binary_quant_error_expectation(w: &[f64]) -> Result<f64> {
    check_normalized(w)?;
    Ok(w.iter().map(|&v| 1.0 - v * v).sum())
}

/// One-bit norm-scaled gradient quantizer: coordinate `i` becomes
/// `||x|| * sign(x[i])` with probability `|x[i]| / ||x||`, else 0. Unbiased,
/// with expected squared error `||x||_2 ||x||_1 - ||x||_2^2`.
pub fn qsgd_quantize<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gradient quantizer input must be finite"));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter()
        .map(|&v| {
            let p = v.abs() / norm;
            if rng.random::<f64>() < p {
                norm * v.signum()
            } else {
                0.0
            }
        })
        .collect())
}

/// Closed form for the expected squared error of [`qsgd_quantize`].
pub fn qsgd_error_expectation(x: &[f64]) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gradient quantizer input must be finite"));
    }
    let l2 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let l1 = x.iter().map(|v| v.abs()).sum::<f64>();
    Ok(l2 * l1 - l2 * l2)
}

/// Clipping bounds for vote probabilities. Keeping probabilities away from
/// 0 and 1 keeps the reconstructed latent weights finite and leaves every
/// coordinate a chance to flip in later rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub p_min: f64,
    pub p_max: f64,
}

impl ClipBounds {
    pub fn new(p_min: f64, p_max: f64) -> Result<Self> {
        if !(p_min.is_finite() && p_max.is_finite()) || p_min <= 0.0 || p_max >= 1.0 || p_min >= p_max
        {
            return Err(Error::invalid(format!(
                "clip bounds must satisfy 0 < p_min < p_max < 1, got [{p_min}, {p_max}]"
            )));
        }
        Ok(ClipBounds { p_min, p_max })
    }

    /// Symmetric bounds `[p_min, 1 - p_min]`.
    pub fn symmetric(p_min: f64) -> Result<Self> {
        ClipBounds::new(p_min, 1.0 - p_min)
    }

    /// Clamps each probability into `[p_min, p_max]`. Inputs must already
    /// be probabilities.
    pub fn clip(&self, p: &[f64]) -> Result<Vec<f64>> {
        for (i, &v) in p.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::domain(format!(
                    "vote probability {v} at coordinate {i} lies outside [0, 1]"
                )));
            }
        }
        Ok(p.iter().map(|&v| v.clamp(self.p_min, self.p_max)).collect())
    }
}

impl Default for ClipBounds {
    fn default() -> Self {
        ClipBounds {
            p_min: 0.001,
            p_max: 0.999,
        }
    }
}

/// Rebuilds latent weights from a soft vote: clips each probability, maps
/// it to the matching normalized weight `2p - 1`, and inverts the
/// normalization. The result satisfies `|phi(h_i)| <= 2 p_max - 1`.
pub fn reconstruct_from_soft_vote(
    p: &[f64],
    clip: &ClipBounds,
    phi: &NormalizationFn,
    shapes: Vec<LayerShape>,
) -> Result<LatentWeights> {
    let clipped = clip.clip(p)?;
    let values = clipped
        .iter()
        .map(|&v| phi.inverse(2.0 * v - 1.0))
        .collect::<Result<Vec<f64>>>()?;
    LatentWeights::new(values, shapes)
}
