//! Server-side vote aggregation.
//!
//! Uploaded quantized weight vectors are combined in two ways: a plurality
//! vote picks the most common level per coordinate (the discrete global
//! model), and a soft vote records the per-coordinate fraction of +1 votes
//! (the distribution the next round's weights are rounded from). The
//! reputation state turns per-client agreement with the plurality outcome
//! into aggregation weights, which shrinks the influence of clients that
//! keep voting against the consensus. The robust baselines the scheme is
//! compared against live here too.

use crate::error::{Error, Result};
use crate::quantize::{Level, QuantizedWeights};
use rand::Rng;

/// One round's uploads: `M` quantized vectors of equal dimension and level,
/// tagged with the sending client's id.
#[derive(Debug, Clone)]
pub struct VoteBatch {
    level: Level,
    dim: usize,
    client_ids: Vec<usize>,
    values: Vec<i8>,
}

impl VoteBatch {
    pub fn new(entries: Vec<(usize, QuantizedWeights)>) -> Result<Self> {
        let (first_id, first) = entries
            .first()
            .ok_or_else(|| Error::invalid("vote batch must contain at least one vote"))?;
        let level = first.level();
        let dim = first.dim();
        let _ = first_id;
        let mut client_ids = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len() * dim);
        for (id, vote) in &entries {
            if vote.level() != level {
                return Err(Error::invalid("votes mix quantization levels"));
            }
            if vote.dim() != dim {
                return Err(Error::invalid(format!(
                    "vote from client {id} has dimension {}, expected {dim}",
                    vote.dim()
                )));
            }
            if client_ids.contains(id) {
                return Err(Error::invalid(format!("duplicate vote from client {id}")));
            }
            client_ids.push(*id);
            values.extend_from_slice(vote.values());
        }
        Ok(VoteBatch {
            level,
            dim,
            client_ids,
            values,
        })
    }

    pub fn voters(&self) -> usize {
        self.client_ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn client_ids(&self) -> &[usize] {
        &self.client_ids
    }

    pub fn row(&self, m: usize) -> &[i8] {
        &self.values[m * self.dim..(m + 1) * self.dim]
    }
}

/// Per-coordinate probability that the global weight is +1.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftVote {
    p: Vec<f64>,
}

impl SoftVote {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("soft vote entries must lie in [0, 1]"));
        }
        Ok(SoftVote { p })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }
}

/// Plurality vote per coordinate, ties broken uniformly at random among the
/// tied levels. For binary votes this is the sign of the coordinate sum.
pub fn plurality<R: Rng + ?Sized>(batch: &VoteBatch, rng: &mut R) -> QuantizedWeights {
    let m = batch.voters();
    let d = batch.dim();
    let mut out = Vec::with_capacity(d);
    match batch.level() {
        Level::Binary => {
            for i in 0..d {
                let mut sum = 0i64;
                for r in 0..m {
                    sum += batch.values[r * d + i] as i64;
                }
                out.push(if sum > 0 {
                    1
                } else if sum < 0 {
                    -1
                } else if rng.random::<bool>() {
                    1
                } else {
                    -1
                });
            }
        }
        Level::Ternary => {
            for i in 0..d {
                let mut counts = [0u32; 3]; // indices: -1, 0, +1
                for r in 0..m {
                    counts[(batch.values[r * d + i] + 1) as usize] += 1;
                }
                let best = *counts.iter().max().unwrap();
                let tied: Vec<i8> = (-1..=1)
                    .filter(|&v| counts[(v + 1) as usize] == best)
                    .collect();
                out.push(if tied.len() == 1 {
                    tied[0]
                } else {
                    tied[rng.random_range(0..tied.len())]
                });
            }
        }
    }
    QuantizedWeights::new(batch.level(), out).expect("plurality output stays on the level set")
}

/// Unweighted soft vote: the fraction of +1 votes per coordinate, computed
/// in integer arithmetic so the result is an exact count over `M`.
///
/// Ternary votes generalize naturally: a 0 vote contributes half, so the
/// result is `(mean vote + 1) / 2` and reconstructing `2p - 1` still
/// recovers the mean of the uploaded weights.
pub fn soft_vote(batch: &VoteBatch) -> SoftVote {
    let m = batch.voters();
    let d = batch.dim();
    let mut p = Vec::with_capacity(d);
    for i in 0..d {
        let mut sum = 0i64;
        for r in 0..m {
            sum += batch.values[r * d + i] as i64;
        }
        p.push((sum + m as i64) as f64 / (2 * m) as f64);
    }
    SoftVote { p }
}

/// Soft vote with per-client aggregation weights (nonnegative, summing to
/// one within 1e-9).
///
/// Equal weights take the unweighted integer path, so a uniformly weighted
/// vote is bit-for-bit identical to [`soft_vote`]; in particular the first
/// round under fresh (uniform) reputations matches the unweighted rule
/// exactly.
pub fn weighted_soft_vote(batch: &VoteBatch, weights: &[f64]) -> Result<SoftVote> {
    let m = batch.voters();
    if weights.len() != m {
        return Err(Error::invalid(format!(
            "{} aggregation weights for {m} votes",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("aggregation weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "aggregation weights sum to {total}, expected 1"
        )));
    }
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(soft_vote(batch));
    }
    let d = batch.dim();
    let mut p = vec![0.0; d];
    for (r, &w) in weights.iter().enumerate() {
        let row = batch.row(r);
        for i in 0..d {
            p[i] += w * (row[i] as f64 + 1.0) / 2.0;
        }
    }
    // weights sum to 1 only within tolerance; pull tiny overshoots back in
    for v in &mut p {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(SoftVote { p })
}

/// Fraction of coordinates where a client's vote matches the consensus
/// vector. 1 means full agreement, 0 exact opposition.
pub fn credibility_score(vote: &[i8], consensus: &QuantizedWeights) -> Result<f64> {
    if vote.len() != consensus.dim() {
        return Err(Error::invalid(format!(
            "vote has {} coordinates, consensus has {}",
            vote.len(),
            consensus.dim()
        )));
    }
    let matches = vote
        .iter()
        .zip(consensus.values())
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / vote.len() as f64)
}

/// Exponential moving average of per-client credibility scores, plus the
/// normalization that turns it into aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationState {
    nu: Vec<f64>,
    beta: f64,
}

impl ReputationState {
    /// Fresh state: every client starts equally credible at 1/M.
    pub fn new(clients: usize, beta: f64) -> Result<Self> {
        if clients == 0 {
            return Err(Error::invalid("reputation needs at least one client"));
        }
        ReputationState::from_nu(vec![1.0 / clients as f64; clients], beta)
    }

    pub fn from_nu(nu: Vec<f64>, beta: f64) -> Result<Self> {
        if !beta.is_finite() || !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(format!(
                "reputation memory factor must lie in [0, 1], got {beta}"
            )));
        }
        if nu.is_empty() || nu.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("reputations must be nonnegative"));
        }
        Ok(ReputationState { nu, beta })
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Folds one round of credibility scores into the moving average:
    /// `nu <- beta * nu + (1 - beta) * scores`.
    pub fn update(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.nu.len() {
            return Err(Error::invalid(format!(
                "{} credibility scores for {} clients",
                scores.len(),
                self.nu.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite() || !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("credibility scores must lie in [0, 1]"));
        }
        for (nu, &cr) in self.nu.iter_mut().zip(scores) {
            *nu = self.beta * *nu + (1.0 - self.beta) * cr;
        }
        Ok(())
    }

    /// Normalizes the reputations into aggregation weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        let total: f64 = self.nu.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateState(
                "all reputations are zero, no aggregation weights exist".into(),
            ));
        }
        Ok(self.nu.iter().map(|v| v / total).collect())
    }
}

/// Upper bound on the probability that a one-shot plurality vote over `m`
/// independent voters, each wrong with mean probability `s < 1/2`, errs:
/// `(2 s e^(1 - 2 s))^(m / 2)`.
pub fn one_shot_error_bound(s: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("vote needs at least one voter"));
    }
    if !s.is_finite() || s <= 0.0 || s >= 0.5 {
        return Err(Error::domain(format!(
            "the bound holds for mean error rates in (0, 0.5), got {s}"
        )));
    }
    let base = 2.0 * s * (1.0 - 2.0 * s).exp();
    Ok(base.powf(m as f64 / 2.0))
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid("aggregation needs at least one update"))?;
    let d = first.len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(Error::invalid(format!(
                "update {i} has {} coordinates, expected {d}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("update {i} contains non-finite values")));
        }
    }
    Ok(d)
}

/// Coordinate-wise median across updates; for an even count, the mean of
/// the two middle values.
pub fn coordinate_median(updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_rows(updates)?;
    let m = updates.len();
    let mut out = Vec::with_capacity(d);
    let mut column = vec![0.0; m];
    for i in 0..d {
        for (r, row) in updates.iter().enumerate() {
            column[r] = row[i];
        }
        column.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.push(if m % 2 == 1 {
            column[m / 2]
        } else {
            (column[m / 2 - 1] + column[m / 2]) / 2.0
        });
    }
    Ok(out)
}

/// Picks the update whose summed squared distance to its `M - f - 2`
/// nearest peers is smallest (ties: lowest index). Requires `M >= f + 3`
/// so every update has at least one scored neighbor.
pub fn krum_select(updates: &[Vec<f64>], assumed_attackers: usize) -> Result<usize> {
    let _ = check_rows(updates)?;
    let m = updates.len();
    if m < assumed_attackers + 3 {
        return Err(Error::invalid(format!(
            "selection over {m} updates cannot tolerate {assumed_attackers} attackers (needs at least {})",
            assumed_attackers + 3
        )));
    }
    let neighbors = m - assumed_attackers - 2;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..m {
        let mut dists: Vec<f64> = (0..m)
            .filter(|&j| j != i)
            .map(|j| {
                updates[i]
                    .iter()
                    .zip(&updates[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let score: f64 = dists[..neighbors].iter().sum();
        if score < best.0 {
            best = (score, i);
        }
    }
    Ok(best.1)
}

/// Majority vote over per-coordinate gradient signs. The payload is a
/// binary vote batch, so this shares the plurality implementation.
pub fn signsgd_majority<R: Rng + ?Sized>(
    signs: &VoteBatch,
    rng: &mut R,
) -> Result<QuantizedWeights> {
    if signs.level() != Level::Binary {
        return Err(Error::invalid("sign votes must be binary"));
    }
    Ok(plurality(signs, rng))
}
