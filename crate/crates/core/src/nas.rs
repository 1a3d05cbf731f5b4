//! Training-free architecture search: random sampling plus single-step
//! mutation hill-climbing, scored by a structural entropy proxy under
//! parameter and MAC budgets.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{count_flops, ArchSpec, BlockSpec, ModelConfig, Nonlinearity, Op, Variant};
use crate::error::{Error, Result};

/// One downsampling stage: a stride-2 block followed by stride-1 repeats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpace {
    pub widths: Vec<usize>,
    pub min_repeats: usize,
    pub max_repeats: usize,
    pub nl: Nonlinearity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub kernels: Vec<usize>,
    /// Expanded width as a multiple of the block's output width.
    pub expansion_ratios: Vec<f32>,
    pub stem_widths: Vec<usize>,
    pub stages: Vec<StageSpace>,
    pub head_dims: (usize, usize),
    pub input_hw: usize,
    /// SE on every block.
    pub se: bool,
    /// Stages (0-based) whose last block carries STAM.
    pub stam_stages: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        let stage = |widths: &[usize], min_repeats, max_repeats, nl| StageSpace {
            widths: widths.to_vec(),
            min_repeats,
            max_repeats,
            nl,
        };
        Self {
            kernels: vec![3, 5, 7],
            expansion_ratios: vec![1.0, 1.5, 2.0, 3.0, 4.0],
            stem_widths: vec![8, 16],
            stages: vec![
                stage(&[8, 16], 1, 2, Nonlinearity::Re),
                stage(&[16, 24, 32], 2, 4, Nonlinearity::Re),
                stage(&[40, 48, 56, 64], 2, 8, Nonlinearity::Hs),
                stage(&[64, 72, 80, 96], 1, 4, Nonlinearity::Hs),
            ],
            head_dims: (512, 128),
            input_hw: 224,
            se: true,
            stam_stages: vec![1, 2],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("search space: {m}")));
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return bad("kernels must be a non-empty list of odd sizes".into());
        }
        if self.expansion_ratios.is_empty()
            || self.expansion_ratios.iter().any(|r| r.is_nan() || *r < 1.0)
        {
            return bad("expansion ratios must be ≥ 1".into());
        }
        if self.stem_widths.is_empty() || self.stem_widths.contains(&0) {
            return bad("stem widths must be positive".into());
        }
        let stride = 2usize << self.stages.len().min(16);
        if stride != 32 {
            return bad(format!(
                "{} stages give total stride {stride}; the fixed pattern needs 4",
                self.stages.len()
            ));
        }
        if !self.input_hw.is_multiple_of(32) || self.input_hw == 0 {
            return bad("input side must be a multiple of 32".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.widths.is_empty() || s.widths.contains(&0) {
                return bad(format!("stage {i} needs positive widths"));
            }
            let min = if self.stam_stages.contains(&i) { 2 } else { 1 };
            if s.min_repeats < min || s.max_repeats < s.min_repeats {
                return bad(format!("stage {i} repeats must satisfy {min} ≤ min ≤ max"));
            }
        }
        if let Some(s) = self.stam_stages.iter().find(|s| **s >= self.stages.len()) {
            return bad(format!("STAM stage {s} does not exist"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let space: Self = toml::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("search space: {e}")))?;
        space.validate()?;
        Ok(space)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("search space serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_params: u64,
    pub max_macs: u64,
    pub min_depth: usize,
    pub max_depth: usize,
    /// Classifier width used when costing candidates.
    pub classes: usize,
}

impl Budget {
    pub fn new(max_params: u64, max_macs: u64) -> Self {
        Self {
            max_params,
            max_macs,
            min_depth: 1,
            max_depth: 64,
            classes: 22,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Limit {
    Params,
    Macs,
    MinDepth,
    MaxDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Violation {
    pub limit: Limit,
    pub measured: u64,
    pub bound: u64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (what, rel) = match self.limit {
            Limit::Params => ("params", ">"),
            Limit::Macs => ("MACs", ">"),
            Limit::MinDepth => ("depth", "<"),
            Limit::MaxDepth => ("depth", ">"),
        };
        write!(f, "{what} {} {rel} limit {}", self.measured, self.bound)
    }
}

/// Baseline-variant cost of `spec`: `(params, macs)`.
pub fn baseline_cost(spec: &ArchSpec, classes: usize) -> (u64, u64) {
    let spec = spec.clone().with_classes(classes);
    let r = count_flops(
        &spec,
        Variant::Baseline,
        &ModelConfig::default(),
        spec.input_hw,
    );
    (r.total_params(), r.total_macs())
}

/// Every breached budget, empty when the spec fits.
pub fn check_constraints(spec: &ArchSpec, budget: &Budget) -> Vec<Violation> {
    let (params, macs) = baseline_cost(spec, budget.classes);
    let depth = spec.blocks.len() as u64;
    let mut v = Vec::new();
    if params > budget.max_params {
        v.push(Violation {
            limit: Limit::Params,
            measured: params,
            bound: budget.max_params,
        });
    }
    if macs > budget.max_macs {
        v.push(Violation {
            limit: Limit::Macs,
            measured: macs,
            bound: budget.max_macs,
        });
    }
    if depth < budget.min_depth as u64 {
        v.push(Violation {
            limit: Limit::MinDepth,
            measured: depth,
            bound: budget.min_depth as u64,
        });
    }
    if depth > budget.max_depth as u64 {
        v.push(Violation {
            limit: Limit::MaxDepth,
            measured: depth,
            bound: budget.max_depth as u64,
        });
    }
    v
}

pub const DEFAULT_BETA: f64 = 0.5;

/// Per-layer `ln(c_in · k² / groups)` over the stem, every block's expand,
/// depthwise and projection convs, and the head convs.
pub fn entropy_terms(spec: &ArchSpec) -> Vec<f64> {
    let ln = |cin: usize, k: usize, groups: usize| ((cin * k * k) as f64 / groups as f64).ln();
    let mut t = vec![ln(3, spec.stem.kernel, 1)];
    for (i, b) in spec.blocks.iter().enumerate() {
        t.push(ln(spec.block_input(i), 1, 1));
        t.push(ln(b.exp, b.kernel, b.exp));
        t.push(ln(b.exp, 1, 1));
    }
    t.push(ln(spec.last_width(), 1, 1));
    t.push(ln(spec.head_dims.0, 1, 1));
    t.push(ln(spec.head_dims.1, 1, 1));
    t
}

/// `Σ terms − β · stddev(terms)` (population deviation).
pub fn entropy_score(spec: &ArchSpec, beta: f64) -> f64 {
    let t = entropy_terms(spec);
    let n = t.len() as f64;
    let sum: f64 = t.iter().sum();
    let mean = sum / n;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    sum - beta * var.sqrt()
}

/// Choice indices that determine one candidate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genome {
    stem: usize,
    /// Per stage: width index and per-block `(kernel, ratio)` indices.
    stages: Vec<(usize, Vec<(usize, usize)>)>,
}

impl Genome {
    pub fn sample(space: &SearchSpace, rng: &mut ChaCha8Rng) -> Self {
        let stages = space
            .stages
            .iter()
            .map(|s| {
                let width = rng.gen_range(0..s.widths.len());
                let n = rng.gen_range(s.min_repeats..=s.max_repeats);
                let blocks = (0..n)
                    .map(|_| {
                        (
                            rng.gen_range(0..space.kernels.len()),
                            rng.gen_range(0..space.expansion_ratios.len()),
                        )
                    })
                    .collect();
                (width, blocks)
            })
            .collect();
        Self {
            stem: rng.gen_range(0..space.stem_widths.len()),
            stages,
        }
    }

    pub fn to_spec(&self, space: &SearchSpace) -> ArchSpec {
        let mut blocks = Vec::new();
        for (si, (w, genes)) in self.stages.iter().enumerate() {
            let stage = &space.stages[si];
            let out = stage.widths[*w];
            let last = genes.len() - 1;
            for (bi, (k, r)) in genes.iter().enumerate() {
                let ratio = space.expansion_ratios[*r];
                let exp = ((out as f32 * ratio).round() as usize).max(out);
                blocks.push(BlockSpec::mbconv(
                    space.kernels[*k],
                    exp,
                    out,
                    space.se,
                    bi == last && bi > 0 && space.stam_stages.contains(&si),
                    stage.nl,
                    if bi == 0 { 2 } else { 1 },
                ));
            }
        }
        ArchSpec {
            input_hw: space.input_hw,
            stem: BlockSpec {
                op: Op::Conv,
                kernel: 3,
                exp: 0,
                out: space.stem_widths[self.stem],
                se: false,
                stam: false,
                nl: Some(Nonlinearity::Hs),
                stride: 2,
            },
            blocks,
            head_dims: space.head_dims,
            num_classes: None,
        }
    }

    /// Changes exactly one choice; stays inside the space.
    pub fn mutate(&self, space: &SearchSpace, rng: &mut ChaCha8Rng) -> Self {
        let mut g = self.clone();
        loop {
            let si = rng.gen_range(0..g.stages.len());
            let stage = &space.stages[si];
            let (width, genes) = &mut g.stages[si];
            let changed = match rng.gen_range(0..5) {
                0 => reroll(&mut g.stem, space.stem_widths.len(), rng),
                1 => reroll(width, stage.widths.len(), rng),
                2 => {
                    let b = rng.gen_range(0..genes.len());
                    reroll(&mut genes[b].0, space.kernels.len(), rng)
                }
                3 => {
                    let b = rng.gen_range(0..genes.len());
                    reroll(&mut genes[b].1, space.expansion_ratios.len(), rng)
                }
                _ => {
                    if rng.gen_bool(0.5) && genes.len() < stage.max_repeats {
                        let k = rng.gen_range(0..space.kernels.len());
                        let r = rng.gen_range(0..space.expansion_ratios.len());
                        genes.push((k, r));
                        true
                    } else if genes.len() > stage.min_repeats {
                        genes.pop();
                        true
                    } else {
                        false
                    }
                }
            };
            if changed {
                return g;
            }
        }
    }
}

fn reroll(slot: &mut usize, n: usize, rng: &mut ChaCha8Rng) -> bool {
    if n < 2 {
        return false;
    }
    let step = rng.gen_range(1..n);
    *slot = (*slot + step) % n;
    true
}

/// Draws one candidate uniformly per dimension.
pub fn sample_arch(space: &SearchSpace, rng: &mut ChaCha8Rng) -> ArchSpec {
    Genome::sample(space, rng).to_spec(space)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub iter: usize,
    pub score: f64,
    pub params: u64,
    pub macs: u64,
    pub feasible: bool,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub best: ArchSpec,
    pub best_score: f64,
    pub best_params: u64,
    pub best_macs: u64,
    pub log: Vec<Candidate>,
}

impl SearchOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("iter,score,params,macs,feasible\n");
        for c in &self.log {
            s += &format!(
                "{},{:.6},{},{},{}\n",
                c.iter, c.score, c.params, c.macs, c.feasible
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub iters: usize,
    pub seed: u64,
    pub beta: f64,
    /// Fresh random start every this many iterations.
    pub restart_every: usize,
}

impl SearchConfig {
    pub fn new(iters: usize, seed: u64) -> Self {
        Self {
            iters,
            seed,
            beta: DEFAULT_BETA,
            restart_every: 100,
        }
    }
}

struct Scored {
    genome: Genome,
    spec: ArchSpec,
    score: f64,
    params: u64,
    macs: u64,
    excess: f64,
}

/// Higher score wins; ties go to fewer params, then the smaller spec.
fn better(a: &Scored, b: &Scored) -> bool {
    match a.score.total_cmp(&b.score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.params, &a.spec) < (b.params, &b.spec),
    }
}

fn evaluate(genome: Genome, space: &SearchSpace, budget: &Budget, beta: f64) -> Scored {
    let spec = genome.to_spec(space);
    let (params, macs) = baseline_cost(&spec, budget.classes);
    let violations = check_constraints(&spec, budget);
    let excess = violations
        .iter()
        .map(|v| (v.measured as f64 - v.bound as f64).abs() / v.bound.max(1) as f64)
        .sum();
    Scored {
        score: entropy_score(&spec, beta),
        genome,
        spec,
        params,
        macs,
        excess,
    }
}

/// Runs the search; `best` maximizes the score among feasible candidates.
pub fn search(space: &SearchSpace, budget: &Budget, cfg: &SearchConfig) -> Result<SearchOutcome> {
    space.validate()?;
    if cfg.iters == 0 {
        return Err(Error::InvalidArgument(
            "search needs at least one iteration".into(),
        ));
    }
    let restart = cfg.restart_every.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current: Option<Scored> = None;
    let mut best: Option<Scored> = None;
    let mut log = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let genome = match &current {
            Some(c) if iter % restart != 0 => c.genome.mutate(space, &mut rng),
            _ => Genome::sample(space, &mut rng),
        };
        let cand = evaluate(genome, space, budget, cfg.beta);
        let feasible = cand.excess == 0.0;
        log.push(Candidate {
            iter,
            score: cand.score,
            params: cand.params,
            macs: cand.macs,
            feasible,
        });
        if feasible && best.as_ref().is_none_or(|b| better(&cand, b)) {
            best = Some(Scored {
                genome: cand.genome.clone(),
                spec: cand.spec.clone(),
                ..cand
            });
        }
        let accept = match &current {
            _ if iter % restart == 0 => true,
            None => true,
            Some(c) if c.excess > 0.0 => cand.excess < c.excess,
            Some(c) => feasible && better(&cand, c),
        };
        if accept {
            current = Some(cand);
        }
    }
    let best = best.ok_or(Error::InfeasibleBudget(cfg.iters))?;
    Ok(SearchOutcome {
        best: best.spec,
        best_score: best.score,
        best_params: best.params,
        best_macs: best.macs,
        log,
    })
}

/// The stem-only floor of any candidate in `space`: smallest widths,
/// fewest repeats, smallest kernel and ratio.
pub fn minimal_spec(space: &SearchSpace) -> ArchSpec {
    let argmin = |v: &[usize]| (0..v.len()).min_by_key(|&i| v[i]).unwrap_or(0);
    let kmin = argmin(&space.kernels);
    let rmin = (0..space.expansion_ratios.len())
        .min_by(|&a, &b| space.expansion_ratios[a].total_cmp(&space.expansion_ratios[b]))
        .unwrap_or(0);
    Genome {
        stem: argmin(&space.stem_widths),
        stages: space
            .stages
            .iter()
            .map(|s| (argmin(&s.widths), vec![(kmin, rmin); s.min_repeats]))
            .collect(),
    }
    .to_spec(space)
}
