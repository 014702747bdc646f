//! Global uniform masking followed by a disjoint split of the visible tokens
//! into two equal-size views.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Graph, Var};
use crate::patching::TokenSequence;
use crate::rng::{Purpose, StreamRng};

/// Default global mask ratio.
pub const DEFAULT_MASK_RATIO: f64 = 0.6;

/// One image's masking outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub patches: usize,
    /// Mask ratio, stored as raw bits so the plan stays `Eq`.
    ratio_bits: u64,
    /// Ascending union of both groups.
    pub visible: Vec<usize>,
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
    /// Visible token dropped to make the count even, if any.
    pub discarded: Option<usize>,
    pub seed: u64,
    pub substream: u64,
}

/// `⌊(1 − r)·N⌋`. A 1e-9 slack absorbs decimal ratios that are not exact in
/// binary (e.g. `(1 − 0.9)·10` evaluates just below 1).
pub fn visible_count(patches: usize, ratio: f64) -> usize {
    ((1.0 - ratio) * patches as f64 + 1e-9).floor() as usize
}

fn check_ratio(patches: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let n = visible_count(patches, ratio);
    if patches < 2 || n < 2 {
        return Err(Error::Ratio { patches, ratio });
    }
    Ok(n)
}

/// Tokens each branch receives: `⌊n_even / 2⌋`.
pub fn branch_size(patches: usize, ratio: f64) -> Result<usize> {
    Ok(check_ratio(patches, ratio)? / 2)
}

/// Mask ratio experienced by a single branch.
pub fn effective_branch_ratio(patches: usize, ratio: f64) -> Result<f64> {
    let half = branch_size(patches, ratio)?;
    Ok((patches - half) as f64 / patches as f64)
}

impl PartitionPlan {
    pub fn ratio(&self) -> f64 {
        f64::from_bits(self.ratio_bits)
    }

    /// Builds a plan from explicit groups (tests and degenerate probes).
    pub fn from_groups(patches: usize, group_a: Vec<usize>, group_b: Vec<usize>) -> Result<Self> {
        let mut visible: Vec<usize> = group_a.iter().chain(&group_b).copied().collect();
        visible.sort_unstable();
        visible.dedup();
        let plan = PartitionPlan {
            patches,
            ratio_bits: (1.0 - visible.len() as f64 / patches as f64).to_bits(),
            visible,
            group_a,
            group_b,
            discarded: None,
            seed: 0,
            substream: 0,
        };
        plan.validate_bounds()?;
        Ok(plan)
    }

    fn validate_bounds(&self) -> Result<()> {
        for &i in self.group_a.iter().chain(&self.group_b) {
            if i >= self.patches {
                return Err(Error::CorruptPlan(format!("index {i} out of range for {} patches", self.patches)));
            }
        }
        if self.group_a.is_empty() || self.group_b.is_empty() {
            return Err(Error::CorruptPlan("empty group".into()));
        }
        Ok(())
    }

    /// Checks every structural invariant of a sampled plan.
    pub fn validate(&self) -> Result<()> {
        self.validate_bounds()?;
        let strictly_ascending = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !strictly_ascending(&self.group_a) || !strictly_ascending(&self.group_b) {
            return Err(Error::CorruptPlan("groups must be strictly ascending".into()));
        }
        if self.group_a.len() != self.group_b.len() {
            return Err(Error::CorruptPlan("groups differ in size".into()));
        }
        if self.group_a.iter().any(|i| self.group_b.binary_search(i).is_ok()) {
            return Err(Error::CorruptPlan("groups overlap".into()));
        }
        if !strictly_ascending(&self.visible)
            || self
                .group_a
                .iter()
                .chain(&self.group_b)
                .any(|i| self.visible.binary_search(i).is_err())
        {
            return Err(Error::CorruptPlan("groups not contained in the visible set".into()));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        let mut p = self.clone();
        std::mem::swap(&mut p.group_a, &mut p.group_b);
        p
    }

    /// Text dump: a header, then one line per group with `index:(row,col)`
    /// entries in ascending order.
    pub fn to_text(&self, grid_w: usize) -> String {
        let mut out = String::new();
        let half = self.group_a.len();
        let _ = writeln!(
            out,
            "# patches={} ratio={} visible={} per_branch={} effective_ratio={}",
            self.patches,
            self.ratio(),
            self.visible.len(),
            half,
            (self.patches - half) as f64 / self.patches as f64
        );
        for (name, group) in [("group_a", &self.group_a), ("group_b", &self.group_b)] {
            let _ = write!(out, "{name}");
            for &i in group {
                let _ = write!(out, "\t{i}:({},{})", i / grid_w, i % grid_w);
            }
            out.push('\n');
        }
        out
    }
}

/// Samples the visible set uniformly without replacement, then splits it
/// uniformly into two halves. An odd visible count drops one uniformly
/// chosen token.
pub fn sample_partition(patches: usize, ratio: f64, rng: &mut StreamRng) -> Result<PartitionPlan> {
    let n = check_ratio(patches, ratio)?;
    let start = rng.state();

    // Partial Fisher-Yates: the first n slots are a uniformly ordered sample.
    let mut order: Vec<usize> = (0..patches).collect();
    for i in 0..n {
        let j = rng.random_range(i..patches);
        order.swap(i, j);
    }
    let mut chosen = order[..n].to_vec();
    let discarded = if n % 2 == 1 { chosen.pop() } else { None };

    let half = chosen.len() / 2;
    let mut group_a = chosen[..half].to_vec();
    let mut group_b = chosen[half..].to_vec();
    group_a.sort_unstable();
    group_b.sort_unstable();
    chosen.sort_unstable();

    Ok(PartitionPlan {
        patches,
        ratio_bits: ratio.to_bits(),
        visible: chosen,
        group_a,
        group_b,
        discarded,
        seed: start.seed,
        substream: start.substream,
    })
}

/// Gathers the two views from a token sequence; gradients scatter back to
/// the gathered rows only.
pub fn apply_partition(g: &mut Graph<'_>, tokens: &TokenSequence, plan: &PartitionPlan) -> Result<(Var, Var)> {
    if plan.patches != tokens.len() {
        return Err(Error::CorruptPlan(format!(
            "plan covers {} patches but the sequence has {}",
            plan.patches,
            tokens.len()
        )));
    }
    plan.validate_bounds()?;
    let a = g.gather_rows(tokens.tokens, &plan.group_a)?;
    let b = g.gather_rows(tokens.tokens, &plan.group_b)?;
    Ok((a, b))
}

/// Fraction of `trials` independent plans in which each index lands in
/// group A. Trial `t` uses partition substream `t` of `seed`.
pub fn coverage_histogram(patches: usize, ratio: f64, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::Config("coverage_histogram needs at least one trial".into()));
    }
    let mut counts = vec![0u64; patches];
    for t in 0..trials {
        let mut rng = StreamRng::new(seed, Purpose::Partition, t as u64);
        let plan = sample_partition(patches, ratio, &mut rng)?;
        for &i in &plan.group_a {
            counts[i] += 1;
        }
    }
    Ok(counts.into_iter().map(|c| c as f64 / trials as f64).collect())
}
