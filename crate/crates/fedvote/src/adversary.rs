//! Byzantine client behaviors.
//!
//! All attacks are applied by the simulator on the attacker's side of the
//! uplink: honest clients never see them, and an attack configured with
//! zero attackers leaves a run untouched. Payload attacks replace what an
//! attacker uploads; the data attack corrupts an attacker's shard before
//! training starts.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::quantize::{Level, QuantizedWeights};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    /// Upload the negation of the honestly computed payload.
    InverseSign,
    /// Train on label-flipped data and upload the honest result of that.
    DataPoison,
    /// Upload noise shaped like an honest payload.
    RandomPerturbation,
    /// Upload the negation of the honest participants' aggregate.
    OmniscientOpposite,
}

/// Which clients are compromised and how they behave.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackPlan {
    kind: AttackKind,
    attackers: BTreeSet<usize>,
}

impl AttackPlan {
    /// Marks the first `num_attackers` client ids as compromised.
    pub fn new(kind: AttackKind, num_attackers: usize, total_clients: usize) -> Result<Self> {
        if kind == AttackKind::None && num_attackers > 0 {
            return Err(Error::config(format!(
                "{num_attackers} attackers configured without an attack kind"
            )));
        }
        if num_attackers >= total_clients && num_attackers > 0 {
            return Err(Error::config(format!(
                "{num_attackers} attackers leave no honest client among {total_clients}"
            )));
        }
        Ok(AttackPlan {
            kind,
            attackers: (0..num_attackers).collect(),
        })
    }

    pub fn none() -> Self {
        AttackPlan {
            kind: AttackKind::None,
            attackers: BTreeSet::new(),
        }
    }

    pub fn kind(&self) -> AttackKind {
        self.kind
    }

    pub fn is_attacker(&self, client: usize) -> bool {
        self.attackers.contains(&client)
    }

    pub fn attacker_count(&self) -> usize {
        self.attackers.len()
    }

    /// True when the plan changes anything at all.
    pub fn is_active(&self) -> bool {
        self.kind != AttackKind::None && !self.attackers.is_empty()
    }
}

/// Negates a quantized payload entry by entry; zeros stay zero.
pub fn inverse_sign(payload: &QuantizedWeights) -> QuantizedWeights {
    let flipped: Vec<i8> = payload.values().iter().map(|&v| -v).collect();
    QuantizedWeights::new(payload.level(), flipped).expect("negation stays on the level set")
}

/// Negates a real-valued payload.
pub fn inverse_sign_real(payload: &[f64]) -> Vec<f64> {
    payload.iter().map(|&v| -v).collect()
}

/// Replaces every label `y` with `classes - 1 - y`. An involution: applying
/// it twice restores the shard.
pub fn poison_labels(shard: &Dataset) -> Dataset {
    let classes = shard.classes();
    let labels: Vec<usize> = shard.labels().iter().map(|&y| classes - 1 - y).collect();
    Dataset::new(
        shard.inputs().to_vec(),
        labels,
        shard.input_dim(),
        classes,
    )
    .expect("complemented labels stay in range")
}

/// Draws a quantized payload uniformly over the level set.
pub fn random_perturbation<R: Rng + ?Sized>(
    level: Level,
    dim: usize,
    rng: &mut R,
) -> QuantizedWeights {
    let values: Vec<i8> = match level {
        Level::Binary => (0..dim)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect(),
        Level::Ternary => (0..dim).map(|_| rng.random_range(-1i8..=1)).collect(),
    };
    QuantizedWeights::new(level, values).expect("draws stay on the level set")
}

/// First two moments of a pool of honest payloads, used to disguise noise
/// as a plausible upload.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HonestStats {
    pub mean: f64,
    pub std: f64,
}

impl HonestStats {
    /// Pools every coordinate of every honest payload.
    pub fn from_payloads(payloads: &[Vec<f64>]) -> Result<Self> {
        let count: usize = payloads.iter().map(Vec::len).sum();
        if count == 0 {
            return Err(Error::config(
                "no honest payloads to estimate perturbation statistics from",
            ));
        }
        let mean = payloads.iter().flatten().sum::<f64>() / count as f64;
        let var = payloads
            .iter()
            .flatten()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<f64>()
            / count as f64;
        Ok(HonestStats {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Draws a real payload from a Gaussian with the honest pool's moments.
pub fn random_perturbation_real<R: Rng + ?Sized>(
    dim: usize,
    stats: HonestStats,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !stats.mean.is_finite() || !stats.std.is_finite() || stats.std < 0.0 {
        return Err(Error::config(format!(
            "perturbation statistics are unusable: mean {}, std {}",
            stats.mean, stats.std
        )));
    }
    if stats.std == 0.0 {
        return Ok(vec![stats.mean; dim]);
    }
    let normal = Normal::new(stats.mean, stats.std).expect("validated above");
    Ok((0..dim).map(|_| normal.sample(rng)).collect())
}

/// The strongest payload attack: upload the exact negation of what the
/// honest participants collectively decided.
pub fn omniscient_opposite(honest_consensus: &QuantizedWeights) -> QuantizedWeights {
    inverse_sign(honest_consensus)
}

/// Real-payload variant: negation of the honest participants' mean payload.
pub fn omniscient_opposite_real(honest_mean: &[f64]) -> Vec<f64> {
    inverse_sign_real(honest_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    #[test]
    fn inverse_sign_flips_and_preserves_zeros() {
        let q = QuantizedWeights::new(Level::Ternary, vec![1, 0, -1, 0]).unwrap();
        let flipped = inverse_sign(&q);
        assert_eq!(flipped.values(), &[-1, 0, 1, 0]);
        // all-zero ternary payload is a fixed point
        let zeros = QuantizedWeights::new(Level::Ternary, vec![0, 0, 0]).unwrap();
        assert_eq!(inverse_sign(&zeros).values(), &[0, 0, 0]);
        assert_eq!(inverse_sign(&inverse_sign(&q)), q);
        assert_eq!(inverse_sign_real(&[0.5, -2.0, 0.0]), vec![-0.5, 2.0, 0.0]);
    }

    #[test]
    fn label_poisoning_complements_labels() {
        let two = Dataset::new(vec![0.0; 4], vec![0, 1], 2, 2).unwrap();
        assert_eq!(poison_labels(&two).labels(), &[1, 0]);

        let ten = Dataset::new(vec![0.0; 3], vec![3, 9, 0], 1, 10).unwrap();
        let poisoned = poison_labels(&ten);
        assert_eq!(poisoned.labels(), &[6, 0, 9]);
        assert_eq!(poison_labels(&poisoned).labels(), ten.labels());
    }

    #[test]
    fn binary_perturbation_is_roughly_balanced_and_replayable() {
        let mut rng = stream(1, StreamKind::Attack, 0, 0);
        let trials = 100_000;
        let q = random_perturbation(Level::Binary, trials, &mut rng);
        let plus = q.values().iter().filter(|&&v| v == 1).count() as f64 / trials as f64;
        assert!((plus - 0.5).abs() < 0.01, "fraction of +1 draws {plus}");

        let a = random_perturbation(Level::Binary, 64, &mut stream(2, StreamKind::Attack, 5, 3));
        let b = random_perturbation(Level::Binary, 64, &mut stream(2, StreamKind::Attack, 5, 3));
        assert_eq!(a, b);
    }

    #[test]
    fn ternary_perturbation_hits_all_levels() {
        let mut rng = stream(3, StreamKind::Attack, 0, 0);
        let q = random_perturbation(Level::Ternary, 30_000, &mut rng);
        let mut counts = [0usize; 3];
        for &v in q.values() {
            counts[(v + 1) as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let frac = c as f64 / 30_000.0;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "level {i} frequency {frac}");
        }
    }

    #[test]
    fn gaussian_perturbation_matches_supplied_moments() {
        let stats = HonestStats { mean: -0.3, std: 2.0 };
        let mut rng = stream(4, StreamKind::Attack, 0, 0);
        let x = random_perturbation_real(50_000, stats, &mut rng).unwrap();
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        assert!((mean + 0.3).abs() < 3.0 * 2.0 / (50_000f64).sqrt(), "mean {mean}");
        assert!((std - 2.0).abs() < 0.05, "std {std}");

        let degenerate = HonestStats { mean: 1.5, std: 0.0 };
        assert_eq!(
            random_perturbation_real(3, degenerate, &mut rng).unwrap(),
            vec![1.5, 1.5, 1.5]
        );
        let bad = HonestStats { mean: f64::NAN, std: 1.0 };
        assert!(matches!(
            random_perturbation_real(3, bad, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn honest_stats_pool_all_coordinates() {
        let stats =
            HonestStats::from_payloads(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap();
        assert_eq!(stats.mean, 4.0);
        assert_eq!(stats.std, 5.0f64.sqrt());
        assert!(HonestStats::from_payloads(&[]).is_err());
    }

    #[test]
    fn omniscient_opposite_negates_the_consensus() {
        let consensus = QuantizedWeights::new(Level::Binary, vec![1, 1, -1]).unwrap();
        assert_eq!(omniscient_opposite(&consensus).values(), &[-1, -1, 1]);
        assert_eq!(omniscient_opposite_real(&[0.25, -1.0]), vec![-0.25, 1.0]);
    }

    #[test]
    fn attack_plan_marks_low_ids_and_validates() {
        let plan = AttackPlan::new(AttackKind::InverseSign, 3, 10).unwrap();
        assert!(plan.is_attacker(0) && plan.is_attacker(2));
        assert!(!plan.is_attacker(3));
        assert_eq!(plan.attacker_count(), 3);
        assert!(plan.is_active());

        assert!(!AttackPlan::none().is_active());
        assert!(!AttackPlan::new(AttackKind::InverseSign, 0, 10).unwrap().is_active());
        assert!(AttackPlan::new(AttackKind::InverseSign, 10, 10).is_err());
        assert!(AttackPlan::new(AttackKind::None, 1, 10).is_err());
    }
}
