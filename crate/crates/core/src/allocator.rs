//! Global compression-ratio allocation by pooled singular-value truncation.
//!
//! Every matrix is Frobenius-normalized, its singular values go into one
//! pool (per group), and the globally smallest are truncated until the
//! parameter budget `(1 − target_cr)·P₀` is met. Storage during allocation
//! uses the low-rank model `r(m+n)`; [`plan_to_layer_budgets`] then maps
//! each ratio onto the dictionary/code storage model via `solve_ks`.
//!
//! Guards `cr_min ≤ cr_i ≤ cr_max` become rank bounds. A matrix whose
//! factorized form cannot beat dense storage is left DENSE.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorizer::solve_ks;
use crate::linalg;
use crate::tensorio::WeightMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    #[default]
    Global,
    PerProjectionType,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorConfig {
    pub target_cr: f64,
    #[serde(default)]
    pub cr_min: f64,
    #[serde(default = "default_cr_max")]
    pub cr_max: f64,
    #[serde(default)]
    pub grouping: Grouping,
}

fn default_cr_max() -> f64 {
    0.9
}

impl AllocatorConfig {
    pub fn new(target_cr: f64) -> Self {
        Self {
            target_cr,
            cr_min: 0.0,
            cr_max: default_cr_max(),
            grouping: Grouping::Global,
        }
    }

    /// No guards: `cr_min = 0`, `cr_max = 1`.
    pub fn unguarded(target_cr: f64) -> Self {
        Self {
            cr_max: 1.0,
            ..Self::new(target_cr)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.target_cr > 0.0 && self.target_cr < 1.0) {
            return bad(format!("target_cr {} must be in (0, 1)", self.target_cr));
        }
        if !(0.0..=1.0).contains(&self.cr_min) || !(0.0..=1.0).contains(&self.cr_max) {
            return bad(format!("guards [{}, {}] must lie in [0, 1]", self.cr_min, self.cr_max));
        }
        if self.cr_min > self.cr_max {
            return bad(format!("cr_min {} exceeds cr_max {}", self.cr_min, self.cr_max));
        }
        Ok(())
    }
}

/// Singular values of a Frobenius-normalized matrix, descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub name: String,
    pub m: usize,
    pub n: usize,
    /// Custom grouping tag, if any.
    #[serde(default)]
    pub tag: Option<String>,
    pub sigma: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn params(&self) -> u64 {
        (self.m * self.n) as u64
    }
}

pub fn compute_spectrum(w: &WeightMatrix, tag: Option<String>) -> Result<Spectrum> {
    let a = w.to_mat();
    let norm = linalg::frobenius(a.as_ref());
    if norm == 0.0 {
        return Err(Error::ZeroMatrix(w.name().to_string()));
    }
    let scaled = faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / norm);
    let mut sigma = linalg::singular_values(scaled.as_ref())?;
    sigma.sort_by(|x, y| y.total_cmp(x));
    Ok(Spectrum {
        name: w.name().to_string(),
        m: w.rows(),
        n: w.cols(),
        tag,
        sigma,
    })
}

pub fn compute_spectra(weights: &[WeightMatrix]) -> Result<Vec<Spectrum>> {
    weights.iter().map(|w| compute_spectrum(w, None)).collect()
}

/// `1 − r(m+n)/(mn)`.
pub fn low_rank_cr(r: usize, m: usize, n: usize) -> f64 {
    1.0 - (r * (m + n)) as f64 / (m * n) as f64
}

/// Largest rank whose low-rank CR is at least `cr`.
pub fn rank_for_cr(m: usize, n: usize, cr: f64) -> usize {
    let l = m.min(n);
    let guess = ((1.0 - cr) * (m * n) as f64 / (m + n) as f64).floor().clamp(0.0, l as f64) as usize;
    let mut r = guess;
    while r < l && low_rank_cr(r + 1, m, n) >= cr {
        r += 1;
    }
    while r > 0 && low_rank_cr(r, m, n) < cr {
        r -= 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardBounds {
    pub r_min: usize,
    pub r_max: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub dense: bool,
}

pub fn guard_bounds(m: usize, n: usize, cfg: &AllocatorConfig) -> GuardBounds {
    let l = m.min(n);
    let (mn, mpn) = (m * n, m + n);
    // cr_min = 0 leaves the top unconstrained; non-beneficial ranks are
    // caught by the reclassification step instead
    let r_max = if cfg.cr_min <= 0.0 { l } else { rank_for_cr(m, n, cfg.cr_min) };
    // smallest r with cr(r) <= cr_max; may exceed L
    let mut r_min = ((1.0 - cfg.cr_max) * mn as f64 / mpn as f64).ceil().max(0.0) as usize;
    while r_min > 0 && low_rank_cr(r_min - 1, m, n) <= cfg.cr_max {
        r_min -= 1;
    }
    while low_rank_cr(r_min, m, n) > cfg.cr_max {
        r_min += 1;
    }
    let dense = r_min * mpn >= mn || r_min > r_max;
    GuardBounds {
        r_min,
        r_max,
        t_min: l - r_max,
        t_max: l.saturating_sub(r_min),
        dense,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Factorize,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanMode {
    Dynamic,
    Static,
    /// Per-matrix ratios from the theoretical-loss baseline allocator.
    V2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanEntry {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub group: String,
    pub status: Status,
    pub r: usize,
    pub t: usize,
    pub cr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
}

impl PlanEntry {
    /// Parameter count under the low-rank model, `mn` when dense.
    pub fn params(&self) -> u64 {
        match self.status {
            Status::Dense => (self.m * self.n) as u64,
            Status::Factorize => (self.r * (self.m + self.n)) as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocationPlan {
    pub target_cr: f64,
    pub mode: PlanMode,
    pub matrices: Vec<PlanEntry>,
    /// Total truncations over FACTORIZE matrices.
    #[serde(rename = "K")]
    pub k_total: u64,
    pub p0: u64,
    pub p_target: f64,
    pub achieved_params: u64,
    pub achieved_cr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks_ratio: Option<f64>,
    pub config: AllocatorConfig,
}

/// Group key of a matrix name: its last dotted/slashed component, with a
/// trailing `weight` dropped (`layers.3.mlp.up_proj.weight` → `up_proj`).
pub fn projection_type(name: &str) -> &str {
    let mut parts = name.rsplit(['.', '/']).filter(|p| !p.is_empty());
    match parts.next() {
        Some("weight") => parts.next().unwrap_or(name),
        Some(p) => p,
        None => name,
    }
}

fn group_key(spec: &Spectrum, grouping: Grouping) -> Result<String> {
    Ok(match grouping {
        Grouping::Global => "all".to_string(),
        Grouping::PerProjectionType => projection_type(&spec.name).to_string(),
        Grouping::Custom => spec
            .tag
            .clone()
            .ok_or_else(|| Error::InvalidArgument(format!("custom grouping: {:?} has no group tag", spec.name)))?,
    })
}

struct Candidate {
    sigma: f64,
    len: usize,
    matrix: usize,
    pos: usize,
}

/// Pooled selection within one group. Returns final `(dense, r)` per member.
fn allocate_group(
    specs: &[Spectrum],
    members: &[usize],
    budget: f64,
    cfg: &AllocatorConfig,
    forced: &BTreeSet<usize>,
) -> Result<BTreeMap<usize, (bool, usize)>> {
    let bounds: BTreeMap<usize, GuardBounds> =
        members.iter().map(|&i| (i, guard_bounds(specs[i].m, specs[i].n, cfg))).collect();
    let mut dense: BTreeSet<usize> = members
        .iter()
        .copied()
        .filter(|i| forced.contains(i) || bounds[i].dense)
        .collect();

    loop {
        let active: Vec<usize> = members.iter().copied().filter(|i| !dense.contains(i)).collect();
        let dense_params: u64 = dense.iter().map(|&i| specs[i].params()).sum();

        // optional truncations beyond the mandatory tail, smallest first
        let mut pool = Vec::new();
        for &i in &active {
            let sp = &specs[i];
            let b = bounds[&i];
            let l = sp.len();
            for t in b.t_min..b.t_max {
                let pos = l - 1 - t;
                pool.push(Candidate {
                    sigma: sp.sigma[pos],
                    len: l,
                    matrix: i,
                    pos,
                });
            }
        }
        pool.sort_by(|a, b| {
            a.sigma
                .total_cmp(&b.sigma)
                .then(b.len.cmp(&a.len))
                .then(a.matrix.cmp(&b.matrix))
                .then(b.pos.cmp(&a.pos))
        });

        let ranks_at = |j: usize| -> BTreeMap<usize, usize> {
            let mut r: BTreeMap<usize, usize> = active.iter().map(|&i| (i, bounds[&i].r_max)).collect();
            for c in &pool[..j] {
                *r.get_mut(&c.matrix).expect("active") -= 1;
            }
            r
        };
        let params_at = |j: usize| -> u64 {
            dense_params
                + ranks_at(j)
                    .iter()
                    .map(|(&i, &r)| ((r * (specs[i].m + specs[i].n)) as u64).min(specs[i].params()))
                    .sum::<u64>()
        };

        if params_at(pool.len()) as f64 > budget {
            return Err(Error::Unreachable(format!(
                "at most {} of {} parameters can be removed, budget is {budget}",
                members.iter().map(|&i| specs[i].params()).sum::<u64>() - params_at(pool.len()),
                members.iter().map(|&i| specs[i].params()).sum::<u64>(),
            )));
        }
        // minimal prefix meeting the budget
        let (mut lo, mut hi) = (0usize, pool.len());
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if params_at(mid) as f64 <= budget {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        let ranks = ranks_at(lo);
        let newly_dense: Vec<usize> = ranks
            .iter()
            .filter(|(&i, &r)| r * (specs[i].m + specs[i].n) >= specs[i].m * specs[i].n)
            .map(|(&i, _)| i)
            .collect();
        if newly_dense.is_empty() {
            let mut out: BTreeMap<usize, (bool, usize)> = ranks.into_iter().map(|(i, r)| (i, (false, r))).collect();
            out.extend(dense.iter().map(|&i| (i, (true, specs[i].len()))));
            return Ok(out);
        }
        dense.extend(newly_dense);
    }
}

pub fn allocate(specs: &[Spectrum], cfg: &AllocatorConfig) -> Result<AllocationPlan> {
    allocate_with_forced_dense(specs, cfg, &BTreeSet::new())
}

/// As [`allocate`], with the matrices at `forced` indices held DENSE.
pub fn allocate_with_forced_dense(
    specs: &[Spectrum],
    cfg: &AllocatorConfig,
    forced: &BTreeSet<usize>,
) -> Result<AllocationPlan> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::InvalidArgument("no matrices to allocate".into()));
    }
    for s in specs {
        if s.m == 0 || s.n == 0 || s.len() != s.m.min(s.n) {
            return Err(Error::InvalidArgument(format!(
                "spectrum {:?} has {} values for a {}x{} matrix",
                s.name,
                s.len(),
                s.m,
                s.n
            )));
        }
    }
    let keys = specs.iter().map(|s| group_key(s, cfg.grouping)).collect::<Result<Vec<_>>>()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }

    let mut result = BTreeMap::new();
    for members in groups.values() {
        // proportional share of the global budget
        let p0_g: u64 = members.iter().map(|&i| specs[i].params()).sum();
        let budget = (1.0 - cfg.target_cr) * p0_g as f64;
        result.extend(allocate_group(specs, members, budget, cfg, forced)?);
    }

    let matrices = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (dense, r) = result[&i];
            let l = s.len();
            PlanEntry {
                name: s.name.clone(),
                m: s.m,
                n: s.n,
                group: keys[i].clone(),
                status: if dense { Status::Dense } else { Status::Factorize },
                r,
                t: l - r,
                cr: if dense { 0.0 } else { low_rank_cr(r, s.m, s.n) },
                k: None,
                s: None,
            }
        })
        .collect();
    Ok(finish_plan(cfg.target_cr, PlanMode::Dynamic, matrices, *cfg, None))
}

fn finish_plan(
    target_cr: f64,
    mode: PlanMode,
    matrices: Vec<PlanEntry>,
    config: AllocatorConfig,
    ks_ratio: Option<f64>,
) -> AllocationPlan {
    let p0: u64 = matrices.iter().map(|e| (e.m * e.n) as u64).sum();
    let achieved_params: u64 = matrices.iter().map(PlanEntry::params).sum();
    AllocationPlan {
        target_cr,
        mode,
        k_total: matrices
            .iter()
            .filter(|e| e.status == Status::Factorize)
            .map(|e| e.t as u64)
            .sum(),
        p0,
        p_target: (1.0 - target_cr) * p0 as f64,
        achieved_params,
        achieved_cr: 1.0 - achieved_params as f64 / p0 as f64,
        ks_ratio,
        config,
        matrices,
    }
}

/// Uniform ratio for every matrix, bypassing pooled allocation.
/// `shapes` are `(name, m, n, group)`.
pub fn static_plan(shapes: &[(String, usize, usize, String)], cr: f64) -> Result<AllocationPlan> {
    ratio_plan(shapes, &vec![cr; shapes.len()], cr, PlanMode::Static)
}

/// Plan with externally chosen per-matrix ratios. Ratios ≤ 0 mean DENSE.
pub fn ratio_plan(
    shapes: &[(String, usize, usize, String)],
    crs: &[f64],
    target_cr: f64,
    mode: PlanMode,
) -> Result<AllocationPlan> {
    let cfg = AllocatorConfig {
        target_cr,
        cr_min: 0.0,
        cr_max: 1.0,
        grouping: Grouping::Global,
    };
    cfg.validate()?;
    if shapes.is_empty() {
        return Err(Error::InvalidArgument("no matrices to allocate".into()));
    }
    if crs.len() != shapes.len() {
        return Err(Error::DimensionMismatch(format!("{} ratios for {} matrices", crs.len(), shapes.len())));
    }
    let mut matrices = Vec::with_capacity(shapes.len());
    for ((name, m, n, group), &cr) in shapes.iter().zip(crs) {
        if !(cr.is_finite() && cr < 1.0) {
            return Err(Error::InvalidArgument(format!("{name:?}: ratio {cr} must be finite and < 1")));
        }
        let l = m.min(n);
        let (status, r, cr) = if cr <= 0.0 {
            (Status::Dense, *l, 0.0)
        } else {
            (Status::Factorize, rank_for_cr(*m, *n, cr), cr)
        };
        matrices.push(PlanEntry {
            name: name.clone(),
            m: *m,
            n: *n,
            group: group.clone(),
            status,
            r,
            t: l - r,
            cr,
            k: None,
            s: None,
        });
    }
    Ok(finish_plan(target_cr, mode, matrices, cfg, None))
}

fn fill_ks(plan: &mut AllocationPlan, ks_ratio: f64) -> Result<BTreeSet<usize>> {
    let mut failed = BTreeSet::new();
    for (i, e) in plan.matrices.iter_mut().enumerate() {
        if e.status == Status::Dense {
            e.k = None;
            e.s = None;
            continue;
        }
        match solve_ks(e.m, e.n, e.cr, ks_ratio) {
            Ok((k, s)) => {
                e.k = Some(k);
                e.s = Some(s);
            }
            Err(Error::BudgetTooTight { .. }) => {
                failed.insert(i);
            }
            // cr = 1 (rank 0) has no dictionary form either
            Err(Error::InvalidArgument(_)) if e.cr >= 1.0 => {
                failed.insert(i);
            }
            Err(err) => return Err(err),
        }
    }
    Ok(failed)
}

fn mark_dense(plan: &mut AllocationPlan, idx: &BTreeSet<usize>) {
    for &i in idx {
        let e = &mut plan.matrices[i];
        e.status = Status::Dense;
        e.r = e.m.min(e.n);
        e.t = 0;
        e.cr = 0.0;
        e.k = None;
        e.s = None;
    }
}

/// Attaches `(k, s)` to every FACTORIZE entry. Entries with no feasible
/// sparsity become DENSE; in dynamic plans the remaining matrices are
/// re-allocated once to recover the budget.
pub fn plan_to_layer_budgets(plan: &AllocationPlan, specs: &[Spectrum], ks_ratio: f64) -> Result<AllocationPlan> {
    if !(ks_ratio > 1.0) {
        return Err(Error::InvalidArgument(format!("ks_ratio {ks_ratio} must exceed 1")));
    }
    let mut out = plan.clone();
    let failed = fill_ks(&mut out, ks_ratio)?;
    if !failed.is_empty() {
        match plan.mode {
            PlanMode::Static | PlanMode::V2 => mark_dense(&mut out, &failed),
            PlanMode::Dynamic => {
                if specs.len() != plan.matrices.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "{} spectra for {} plan entries",
                        specs.len(),
                        plan.matrices.len()
                    )));
                }
                let mut forced: BTreeSet<usize> = plan
                    .matrices
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.status == Status::Dense)
                    .map(|(i, _)| i)
                    .collect();
                forced.extend(failed);
                out = allocate_with_forced_dense(specs, &plan.config, &forced)?;
                let again = fill_ks(&mut out, ks_ratio)?;
                if !again.is_empty() {
                    mark_dense(&mut out, &again);
                }
            }
        }
    }
    let mut out = finish_plan(out.target_cr, out.mode, out.matrices, out.config, Some(ks_ratio));
    if out.mode == PlanMode::Dynamic && out.achieved_params as f64 > out.p_target {
        return Err(Error::Unreachable(format!(
            "{} parameters after DENSE reclassification exceed budget {}",
            out.achieved_params, out.p_target
        )));
    }
    out.ks_ratio = Some(ks_ratio);
    Ok(out)
}

impl AllocationPlan {
    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        let plan: Self = serde_json::from_slice(bytes)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn entry(&self, name: &str) -> Option<&PlanEntry> {
        self.matrices.iter().find(|e| e.name == name)
    }

    /// Replays every plan invariant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("invalid plan: {m}")));
        self.config.validate()?;
        if self.matrices.is_empty() {
            return bad("no matrices".into());
        }
        let mut names = BTreeSet::new();
        for e in &self.matrices {
            let l = e.m.min(e.n);
            if e.m == 0 || e.n == 0 {
                return bad(format!("{:?} has an empty shape", e.name));
            }
            if !names.insert(&e.name) {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            if e.r > l || e.t != l - e.r {
                return bad(format!("{:?}: r = {}, t = {} inconsistent with L = {l}", e.name, e.r, e.t));
            }
            match e.status {
                Status::Dense => {
                    if e.cr != 0.0 || e.k.is_some() || e.s.is_some() {
                        return bad(format!("{:?}: DENSE entries carry cr = 0 and no (k, s)", e.name));
                    }
                }
                Status::Factorize => {
                    match self.mode {
                        PlanMode::Dynamic => {
                            if e.r * (e.m + e.n) >= e.m * e.n {
                                return bad(format!("{:?}: rank {} is not beneficial", e.name, e.r));
                            }
                            if e.cr != low_rank_cr(e.r, e.m, e.n) {
                                return bad(format!("{:?}: cr {} does not match rank {}", e.name, e.cr, e.r));
                            }
                            if e.cr < self.config.cr_min || e.cr > self.config.cr_max {
                                return bad(format!("{:?}: cr {} outside guards", e.name, e.cr));
                            }
                        }
                        PlanMode::Static | PlanMode::V2 => {
                            if self.mode == PlanMode::Static && e.cr != self.target_cr {
                                return bad(format!("{:?}: static entry must carry cr = target", e.name));
                            }
                            if !(e.cr > 0.0 && e.cr < 1.0) || e.r != rank_for_cr(e.m, e.n, e.cr) {
                                return bad(format!("{:?}: cr {} does not match rank {}", e.name, e.cr, e.r));
                            }
                        }
                    }
                    match (e.k, e.s) {
                        (None, None) => {}
                        (Some(k), Some(s)) if s >= 1 && s <= k && k <= e.m => {}
                        _ => return bad(format!("{:?}: invalid (k, s)", e.name)),
                    }
                }
            }
        }
        let p0: u64 = self.matrices.iter().map(|e| (e.m * e.n) as u64).sum();
        let achieved: u64 = self.matrices.iter().map(PlanEntry::params).sum();
        if p0 != self.p0 || achieved != self.achieved_params {
            return bad("parameter totals do not match entries".into());
        }
        if self.mode == PlanMode::Dynamic && achieved as f64 > (1.0 - self.target_cr) * p0 as f64 {
            return bad(format!("achieved {achieved} parameters exceed the budget"));
        }
        Ok(())
    }
}
