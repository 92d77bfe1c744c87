//! Index selection rules.
//!
//! Non-adaptive rules draw from a fixed distribution. Adaptive rules look at
//! sketched losses through a [`LossSource`], which lets the solver decide how
//! losses are produced and charged.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SbpError};
use crate::sketching::{frobenius_probabilities, uniform_probabilities, SketchSet};

/// Rule selector plus its scalar parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RuleKind {
    Uniform,
    RowNorm,
    MaxDistance,
    Proportional,
    Capped { theta: f64 },
    SketchMotzkin { beta: usize },
    /// Three-layer rule: weighted block, threshold inside the block, uniform draw.
    General { theta: f64, beta: usize },
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Uniform => "uniform",
            RuleKind::RowNorm => "rownorm",
            RuleKind::MaxDistance => "maxdist",
            RuleKind::Proportional => "proportional",
            RuleKind::Capped { .. } => "capped",
            RuleKind::SketchMotzkin { .. } => "skm",
            RuleKind::General { .. } => "general",
        }
    }

    /// Parse a CLI rule name; `theta` and `beta` fill in the parameters the rule needs.
    pub fn parse(name: &str, theta: Option<f64>, beta: Option<usize>) -> Result<Self> {
        let need_beta = || beta.ok_or_else(|| SbpError::InvalidParameter(format!("rule {name} needs beta")));
        Ok(match name {
            "uniform" => RuleKind::Uniform,
            "rownorm" => RuleKind::RowNorm,
            "maxdist" => RuleKind::MaxDistance,
            "proportional" => RuleKind::Proportional,
            "capped" => RuleKind::Capped {
                theta: theta.unwrap_or(0.5),
            },
            "skm" => RuleKind::SketchMotzkin { beta: need_beta()? },
            "general" => RuleKind::General {
                theta: theta.unwrap_or(0.5),
                beta: need_beta()?,
            },
            other => return Err(SbpError::InvalidParameter(format!("unknown rule {other:?}"))),
        })
    }

    /// Rules that need every loss at every iteration.
    pub fn needs_all_losses(&self) -> bool {
        matches!(
            self,
            RuleKind::MaxDistance | RuleKind::Proportional | RuleKind::Capped { .. }
        )
    }

    pub fn is_adaptive(&self) -> bool {
        !matches!(self, RuleKind::Uniform | RuleKind::RowNorm)
    }

    pub fn theta(&self) -> Option<f64> {
        match *self {
            RuleKind::Capped { theta } | RuleKind::General { theta, .. } => Some(theta),
            _ => None,
        }
    }

    pub fn beta(&self) -> Option<usize> {
        match *self {
            RuleKind::SketchMotzkin { beta } | RuleKind::General { beta, .. } => Some(beta),
            _ => None,
        }
    }

    fn validate(&self, q: usize) -> Result<()> {
        if let Some(theta) = self.theta() {
            if !(0.0..=1.0).contains(&theta) {
                return Err(SbpError::InvalidParameter(format!("theta = {theta} outside [0, 1]")));
            }
        }
        if let Some(beta) = self.beta() {
            if beta == 0 || beta > q {
                return Err(SbpError::InvalidParameter(format!("beta = {beta} outside [1, {q}]")));
            }
        }
        Ok(())
    }
}

/// Distribution over size-β blocks of sketch indices.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockDistribution {
    Uniform,
    /// `p(τ) ∝ Σ_{i∈τ} w_i`.
    Weighted(Vec<f64>),
}

/// Where adaptive rules read sketched losses from.
pub trait LossSource {
    /// Number of sketches `q`.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `g_i` at the current iterate.
    fn loss(&mut self, i: usize) -> f64;

    /// All `q` losses at the current iterate.
    fn all_losses(&mut self) -> &[f64];
}

/// A [`LossSource`] over precomputed values.
#[derive(Clone, Copy, Debug)]
pub struct StaticLosses<'a>(pub &'a [f64]);

impl LossSource for StaticLosses<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn loss(&mut self, i: usize) -> f64 {
        self.0[i]
    }

    fn all_losses(&mut self) -> &[f64] {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CandidateSet {
    /// Every index in `[0, q)`.
    All,
    Subset(Vec<usize>),
}

impl CandidateSet {
    pub fn contains(&self, i: usize) -> bool {
        match self {
            CandidateSet::All => true,
            CandidateSet::Subset(s) => s.contains(&i),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTrace {
    pub chosen: usize,
    pub candidates: CandidateSet,
    /// Loss evaluations spent on this selection.
    pub losses_evaluated: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Chosen(SelectionTrace),
    /// Every sketched loss is zero: `x` solves the system.
    Converged,
}

impl Selection {
    fn simple(chosen: usize, losses_evaluated: usize) -> Self {
        Selection::Chosen(SelectionTrace {
            chosen,
            candidates: CandidateSet::All,
            losses_evaluated,
        })
    }

    pub fn chosen(&self) -> Option<usize> {
        match self {
            Selection::Chosen(t) => Some(t.chosen),
            Selection::Converged => None,
        }
    }
}

fn validate_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(SbpError::InvalidProbability("empty distribution".into()));
    }
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(SbpError::InvalidProbability(format!("entry {i} is {v}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 * (p.len() as f64).max(1.0) {
        return Err(SbpError::InvalidProbability(format!("entries sum to {sum}")));
    }
    Ok(())
}

pub fn select_uniform<R: Rng + ?Sized>(rng: &mut R, q: usize) -> usize {
    rng.random_range(0..q)
}

/// Draw `i` with probability `p_i`. Zero entries are allowed and never drawn.
pub fn select_weighted<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> Result<usize> {
    validate_distribution(p)?;
    let dist = WeightedIndex::new(p).map_err(|e| SbpError::InvalidProbability(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// Smallest index attaining the largest loss.
pub fn select_max_distance(losses: &[f64]) -> Selection {
    match argmax(losses.iter().copied().enumerate()) {
        Some((i, g)) if g > 0.0 => Selection::simple(i, losses.len()),
        _ => Selection::Converged,
    }
}

fn argmax(items: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in items {
        match best {
            Some((_, b)) if g <= b => {}
            _ => best = Some((i, g)),
        }
    }
    best
}

/// Draw `i` with probability `g_i / Σ_j g_j`.
pub fn select_proportional<R: Rng + ?Sized>(rng: &mut R, losses: &[f64]) -> Selection {
    let total: f64 = losses.iter().sum();
    if !(total > 0.0) {
        return Selection::Converged;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &g) in losses.iter().enumerate() {
        if g > 0.0 {
            acc += g;
            last_positive = i;
            if target < acc {
                return Selection::simple(i, losses.len());
            }
        }
    }
    Selection::simple(last_positive, losses.len())
}

/// Threshold `θ·max g + (1−θ)·E_p[g]`, never above the maximum.
pub fn capped_threshold(losses: &[f64], theta: f64, reference_p: &[f64]) -> f64 {
    let max = losses.iter().copied().fold(0.0, f64::max);
    let mean: f64 = losses.iter().zip(reference_p).map(|(g, p)| g * p).sum();
    (theta * max + (1.0 - theta) * mean).min(max)
}

/// Build `W = {i : g_i ≥ threshold}` and draw from it with weights `reference_p`.
pub fn select_capped<R: Rng + ?Sized>(
    rng: &mut R,
    losses: &[f64],
    theta: f64,
    reference_p: &[f64],
) -> Result<Selection> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(SbpError::InvalidParameter(format!("theta = {theta} outside [0, 1]")));
    }
    if reference_p.len() != losses.len() {
        return Err(SbpError::DimensionMismatch(format!(
            "{} losses but {} reference probabilities",
            losses.len(),
            reference_p.len()
        )));
    }
    validate_distribution(reference_p)?;
    Ok(capped_unchecked(rng, losses, theta, reference_p))
}

fn capped_unchecked<R: Rng + ?Sized>(rng: &mut R, losses: &[f64], theta: f64, reference_p: &[f64]) -> Selection {
    let max = losses.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Selection::Converged;
    }
    let threshold = capped_threshold(losses, theta, reference_p);
    let set: Vec<usize> = (0..losses.len())
        .filter(|&i| losses[i] >= threshold && losses[i] > 0.0)
        .collect();
    let weights: Vec<f64> = set.iter().map(|&i| reference_p[i]).collect();
    let chosen = draw_from_subset(rng, &set, &weights);
    Selection::Chosen(SelectionTrace {
        chosen,
        candidates: CandidateSet::Subset(set),
        losses_evaluated: losses.len(),
    })
}

/// Draw from `set` proportionally to `weights`; uniform if the weights vanish.
fn draw_from_subset<R: Rng + ?Sized>(rng: &mut R, set: &[usize], weights: &[f64]) -> usize {
    match WeightedIndex::new(weights) {
        Ok(d) => set[d.sample(rng)],
        Err(_) => set[rng.random_range(0..set.len())],
    }
}

/// Block sampler for [`BlockDistribution`], holding a prebuilt weighted index.
#[derive(Clone, Debug)]
pub struct BlockSampler {
    q: usize,
    beta: usize,
    anchor: Option<WeightedIndex<f64>>,
}

impl BlockSampler {
    pub fn new(q: usize, beta: usize, dist: &BlockDistribution) -> Result<Self> {
        if beta == 0 || beta > q {
            return Err(SbpError::InvalidParameter(format!("beta = {beta} outside [1, {q}]")));
        }
        let anchor = match dist {
            BlockDistribution::Uniform => None,
            BlockDistribution::Weighted(w) => {
                if w.len() != q {
                    return Err(SbpError::DimensionMismatch(format!(
                        "{} block weights for {q} sketches",
                        w.len()
                    )));
                }
                if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(SbpError::InvalidProbability("negative block weight".into()));
                }
                // All-zero weights make every block equally likely.
                WeightedIndex::new(w).ok()
            }
        };
        Ok(Self { q, beta, anchor })
    }

    /// Draw `τ`, a size-β subset without replacement.
    ///
    /// Weighted case: pick one anchor `j ∝ w_j`, then `β−1` more uniformly from
    /// the rest. Then `P(τ) = Σ_{j∈τ} (w_j/W) / C(q−1, β−1) ∝ Σ_{j∈τ} w_j`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        match &self.anchor {
            None => rand::seq::index::sample(rng, self.q, self.beta).into_vec(),
            Some(dist) => {
                let j = dist.sample(rng);
                let mut block = Vec::with_capacity(self.beta);
                block.push(j);
                for k in rand::seq::index::sample(rng, self.q - 1, self.beta - 1) {
                    block.push(if k >= j { k + 1 } else { k });
                }
                block
            }
        }
    }
}

/// Argmax of the losses over a block (smallest index on ties), with the block's losses.
fn block_argmax(src: &mut dyn LossSource, block: &[usize]) -> (usize, f64) {
    let mut sorted = block.to_vec();
    sorted.sort_unstable();
    argmax(sorted.iter().map(|&i| (i, src.loss(i)))).expect("nonempty block")
}

/// Sketch-Motzkin selection: argmax of the loss over a random block.
///
/// A block whose losses all vanish is redrawn once; if that fails too the
/// full loss vector decides between the global argmax and convergence.
pub fn select_sketch_motzkin<R: Rng + ?Sized>(
    rng: &mut R,
    src: &mut dyn LossSource,
    sampler: &BlockSampler,
) -> Selection {
    let mut evaluated = 0;
    for _ in 0..2 {
        let block = sampler.sample(rng);
        evaluated += block.len();
        let (i, g) = block_argmax(src, &block);
        if g > 0.0 {
            return Selection::Chosen(SelectionTrace {
                chosen: i,
                candidates: CandidateSet::Subset(block),
                losses_evaluated: evaluated,
            });
        }
    }
    let q = src.len();
    match select_max_distance(src.all_losses()) {
        Selection::Chosen(mut t) => {
            t.losses_evaluated = evaluated + q;
            Selection::Chosen(t)
        }
        Selection::Converged => Selection::Converged,
    }
}

/// General three-layer rule: block `τ ∼ p1`, threshold with `p2` uniform on `τ`,
/// uniform draw on the candidate set.
pub fn select_general<R: Rng + ?Sized>(
    rng: &mut R,
    src: &mut dyn LossSource,
    sampler: &BlockSampler,
    theta: f64,
) -> Selection {
    let mut evaluated = 0;
    for _ in 0..2 {
        let mut block = sampler.sample(rng);
        block.sort_unstable();
        evaluated += block.len();
        let g: Vec<f64> = block.iter().map(|&i| src.loss(i)).collect();
        let max = g.iter().copied().fold(0.0, f64::max);
        if !(max > 0.0) {
            continue;
        }
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let threshold = (theta * max + (1.0 - theta) * mean).min(max);
        let set: Vec<usize> = block
            .iter()
            .zip(&g)
            .filter(|(_, &gi)| gi >= threshold && gi > 0.0)
            .map(|(&i, _)| i)
            .collect();
        let chosen = set[rng.random_range(0..set.len())];
        return Selection::Chosen(SelectionTrace {
            chosen,
            candidates: CandidateSet::Subset(set),
            losses_evaluated: evaluated,
        });
    }
    let q = src.len();
    match select_max_distance(src.all_losses()) {
        Selection::Chosen(mut t) => {
            t.losses_evaluated = evaluated + q;
            Selection::Chosen(t)
        }
        Selection::Converged => Selection::Converged,
    }
}

/// A configured rule with its own RNG stream.
#[derive(Clone, Debug)]
pub struct SamplingRule {
    kind: RuleKind,
    q: usize,
    reference_p: Vec<f64>,
    reference_index: Option<WeightedIndex<f64>>,
    blocks: Option<BlockSampler>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl SamplingRule {
    /// Defaults: row-norm reference for `RowNorm` and `Capped`, row-norm
    /// weighted blocks for `SketchMotzkin` and `General`.
    pub fn new(kind: RuleKind, sketch: &SketchSet, seed: u64) -> Result<Self> {
        let q = sketch.len();
        let reference = match kind {
            RuleKind::Uniform => uniform_probabilities(q),
            _ => frobenius_probabilities(sketch),
        };
        let blocks = BlockDistribution::Weighted(sketch.frobenius_weights().to_vec());
        Self::with_distributions(kind, q, reference, blocks, seed)
    }

    pub fn with_distributions(
        kind: RuleKind,
        q: usize,
        reference_p: Vec<f64>,
        blocks: BlockDistribution,
        seed: u64,
    ) -> Result<Self> {
        if q == 0 {
            return Err(SbpError::InvalidParameter("no sketches to sample from".into()));
        }
        kind.validate(q)?;
        if reference_p.len() != q {
            return Err(SbpError::DimensionMismatch(format!(
                "{} reference probabilities for {q} sketches",
                reference_p.len()
            )));
        }
        validate_distribution(&reference_p)?;
        let reference_index = match kind {
            RuleKind::RowNorm => Some(
                WeightedIndex::new(&reference_p).map_err(|e| SbpError::InvalidProbability(e.to_string()))?,
            ),
            _ => None,
        };
        let blocks = match kind.beta() {
            Some(beta) => Some(BlockSampler::new(q, beta, &blocks)?),
            None => None,
        };
        Ok(Self {
            kind,
            q,
            reference_p,
            reference_index,
            blocks,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn reference_p(&self) -> &[f64] {
        &self.reference_p
    }

    pub fn select(&mut self, src: &mut dyn LossSource) -> Selection {
        debug_assert_eq!(src.len(), self.q);
        match self.kind {
            RuleKind::Uniform => Selection::simple(select_uniform(&mut self.rng, self.q), 0),
            RuleKind::RowNorm => {
                let dist = self.reference_index.as_ref().expect("built for rownorm");
                Selection::simple(dist.sample(&mut self.rng), 0)
            }
            RuleKind::MaxDistance => select_max_distance(src.all_losses()),
            RuleKind::Proportional => select_proportional(&mut self.rng, src.all_losses()),
            RuleKind::Capped { theta } => {
                let losses = src.all_losses();
                capped_unchecked(&mut self.rng, losses, theta, &self.reference_p)
            }
            RuleKind::SketchMotzkin { .. } => {
                let sampler = self.blocks.as_ref().expect("built with beta");
                select_sketch_motzkin(&mut self.rng, src, sampler)
            }
            RuleKind::General { theta, .. } => {
                let sampler = self.blocks.as_ref().expect("built with beta");
                select_general(&mut self.rng, src, sampler, theta)
            }
        }
    }
}
