//! Mixtures of HMMs: the H3M type, EM estimation from raw sequences with grouped
//! assignment variables, and sampled hierarchical EM built on top of it.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::check_probabilities;
use crate::hmm::fit::{data_floor, initial_model, run_from, validate_seqs};
use crate::hmm::{forward_backward, FitConfig, Hmm, Sequence, SuffStats};
use crate::logspace::{ln, relative_change, softmax_in_place};
use crate::seed::{derive_seed, rng_for};

/// Responsibility mass below which an EM component counts as empty.
pub const EMPTY_COMPONENT_MASS: f64 = 1e-8;

/// Baum-Welch iterations used to warm-start a component.
pub const WARM_START_ITERS: usize = 3;

/// Random initializations tried by [`em_h3m`].
pub const EM_RESTARTS: usize = 3;

/// A mixture of `K` HMMs that share `S`, `M` and `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct H3m {
    omega: Vec<f64>,
    components: Vec<Hmm>,
}

impl H3m {
    pub fn new(omega: Vec<f64>, components: Vec<Hmm>) -> Result<Self> {
        if components.is_empty() || omega.len() != components.len() {
            return Err(Error::invalid(format!(
                "H3M with {} weights and {} components",
                omega.len(),
                components.len()
            )));
        }
        check_probabilities(&omega, "mixture weights")?;
        let first = &components[0];
        for c in &components[1..] {
            if c.n_states() != first.n_states()
                || c.n_mix() != first.n_mix()
                || c.dim() != first.dim()
            {
                return Err(Error::Incompatible(format!(
                    "component with (S={}, M={}, d={}) in a mixture of (S={}, M={}, d={})",
                    c.n_states(),
                    c.n_mix(),
                    c.dim(),
                    first.n_states(),
                    first.n_mix(),
                    first.dim()
                )));
            }
        }
        Ok(Self { omega, components })
    }

    /// Equal weights over `components`.
    pub fn uniform(components: Vec<Hmm>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(vec![1.0 / k as f64; components.len()], components)
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn components(&self) -> &[Hmm] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn n_states(&self) -> usize {
        self.components[0].n_states()
    }

    pub fn n_mix(&self) -> usize {
        self.components[0].n_mix()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Draws a component by `omega`, then a sequence from it. Returns the component index too.
    pub fn sample_with_rng<R: Rng + ?Sized>(
        &self,
        len: usize,
        id: String,
        rng: &mut R,
    ) -> (usize, Sequence) {
        let k = crate::gaussian::sample_categorical(&self.omega, rng);
        (k, self.components[k].sample_with_rng(len, id, rng))
    }
}

/// Indices of sequences that share one assignment variable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssignmentGroup {
    pub members: Vec<usize>,
}

impl AssignmentGroup {
    /// One group per sequence: plain EM.
    pub fn singletons(n: usize) -> Vec<Self> {
        (0..n).map(|i| Self { members: vec![i] }).collect()
    }

    /// Groups sequences sharing a label, ordered by first appearance.
    pub fn from_labels<T: PartialEq>(labels: &[T]) -> Vec<Self> {
        let mut keys: Vec<&T> = Vec::new();
        let mut groups: Vec<Self> = Vec::new();
        for (i, l) in labels.iter().enumerate() {
            match keys.iter().position(|k| *k == l) {
                Some(g) => groups[g].members.push(i),
                None => {
                    keys.push(l);
                    groups.push(Self { members: vec![i] });
                }
            }
        }
        groups
    }
}

fn check_partition(groups: &[AssignmentGroup], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::invalid("empty assignment group"));
        }
        for &i in &g.members {
            if i >= n {
                return Err(Error::invalid(format!("group member {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("sequence {i} appears in two groups")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("sequence {i} is in no group")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EmH3mFit {
    pub model: H3m,
    /// `G x K` posterior of each group's assignment variable under `model`.
    pub responsibilities: DMatrix<f64>,
    /// Total data log-likelihood before each M-step; the last entry belongs to `model`.
    pub ll_trace: Vec<f64>,
    /// Indices into `ll_trace` after which at least one empty component was re-seeded.
    pub reseeds: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmH3mFit {
    /// Component with the largest responsibility for every group.
    pub fn hard_assignments(&self) -> Vec<usize> {
        argmax_rows(&self.responsibilities)
    }
}

pub(crate) fn argmax_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .map(|r| {
            let mut best = 0;
            for c in 1..m.ncols() {
                if m[(r, c)] > m[(r, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn warm_start(seqs: &[&Sequence], s: usize, m: usize, cfg: &FitConfig, floor: f64) -> Result<Hmm> {
    let init = initial_model(seqs, s, m, cfg, floor)?;
    Ok(run_from(init, seqs, WARM_START_ITERS, cfg, floor)?.model)
}

struct EStep {
    fbs: Vec<Vec<crate::hmm::FbStats>>,
    resp: DMatrix<f64>,
    group_ll: DMatrix<f64>,
    total: f64,
}

fn estep(model: &H3m, seqs: &[&Sequence], groups: &[AssignmentGroup]) -> Result<EStep> {
    let k = model.n_components();
    let fbs = seqs
        .par_iter()
        .map(|q| {
            model
                .components
                .iter()
                .map(|c| forward_backward(c, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut resp = DMatrix::zeros(groups.len(), k);
    let mut group_ll = DMatrix::zeros(groups.len(), k);
    let mut total = 0.0;
    let mut row = vec![0.0; k];
    for (g, grp) in groups.iter().enumerate() {
        for (c, r) in row.iter_mut().enumerate() {
            let ll: f64 = grp.members.iter().map(|&n| fbs[n][c].log_likelihood).sum();
            group_ll[(g, c)] = ll;
            *r = ln(model.omega[c]) + ll;
        }
        total += softmax_in_place(&mut row);
        for (c, &r) in row.iter().enumerate() {
            resp[(g, c)] = r;
        }
    }
    Ok(EStep {
        fbs,
        resp,
        group_ll,
        total,
    })
}

/// EM for an H3M on raw sequences where every group shares one assignment variable.
/// Keeps the best of [`EM_RESTARTS`] random initializations.
pub fn em_h3m(
    seqs: &[Sequence],
    groups: &[AssignmentGroup],
    k: usize,
    s: usize,
    m: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<EmH3mFit> {
    em_h3m_restarts(seqs, groups, k, s, m, cfg, EM_RESTARTS, seed)
}

/// [`em_h3m`] with an explicit number of random initializations; the run with the
/// largest final log-likelihood wins, earlier runs winning ties.
#[allow(clippy::too_many_arguments)]
pub fn em_h3m_restarts(
    seqs: &[Sequence],
    groups: &[AssignmentGroup],
    k: usize,
    s: usize,
    m: usize,
    cfg: &FitConfig,
    restarts: usize,
    seed: u64,
) -> Result<EmH3mFit> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    // With one component every initialization is the pooled fit.
    let runs = if k == 1 { 1 } else { restarts };
    let mut best: Option<EmH3mFit> = None;
    for r in 0..runs {
        let fit = em_h3m_once(seqs, groups, k, s, m, cfg, derive_seed(seed, &[r as u64]))?;
        let better = match &best {
            Some(b) => fit.ll_trace.last() > b.ll_trace.last(),
            None => true,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one run"))
}

fn em_h3m_once(
    seqs: &[Sequence],
    groups: &[AssignmentGroup],
    k: usize,
    s: usize,
    m: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<EmH3mFit> {
    cfg.validate()?;
    if k == 0 || s == 0 || m == 0 {
        return Err(Error::invalid("K, S and M must be at least 1"));
    }
    let refs: Vec<&Sequence> = seqs.iter().collect();
    validate_seqs(&refs)?;
    check_partition(groups, seqs.len())?;
    let floor = data_floor(seqs.iter().flat_map(|q| q.frames.iter()), cfg.cov_floor);
    let n_groups = groups.len();
    let mut rng = rng_for(seed, &[0]);

    // Random hard partition of the groups into K sets.
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut rng);
    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let set: Vec<&Sequence> = order
            .iter()
            .skip(c)
            .step_by(k)
            .flat_map(|&g| groups[g].members.iter().map(|&n| &seqs[n]))
            .collect();
        let set = if set.is_empty() {
            vec![&seqs[rng.random_range(0..seqs.len())]]
        } else {
            set
        };
        components.push(warm_start(&set, s, m, cfg, floor)?);
    }
    let mut model = H3m::uniform(components)?;

    let mut trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut current = estep(&model, &refs, groups)?;
    loop {
        trace.push(current.total);
        let n = trace.len();
        if n >= 2 && !reseeds.contains(&(n - 2)) && relative_change(trace[n - 2], trace[n - 1]) < cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let (next, reseeded) = mstep(&model, &refs, groups, &current, s, m, cfg, floor)?;
        if reseeded {
            reseeds.push(trace.len() - 1);
        }
        model = next;
        iterations += 1;
        current = estep(&model, &refs, groups)?;
    }
    Ok(EmH3mFit {
        model,
        responsibilities: current.resp,
        ll_trace: trace,
        reseeds,
        iterations,
        converged,
    })
}

#[allow(clippy::too_many_arguments)]
fn mstep(
    model: &H3m,
    seqs: &[&Sequence],
    groups: &[AssignmentGroup],
    e: &EStep,
    s: usize,
    m: usize,
    cfg: &FitConfig,
    floor: f64,
) -> Result<(H3m, bool)> {
    let k = model.n_components();
    let n_groups = groups.len();
    let mass: Vec<f64> = (0..k).map(|c| e.resp.column(c).sum()).collect();
    let mut omega: Vec<f64> = mass.iter().map(|v| v / n_groups as f64).collect();
    let mut components = (0..k)
        .into_par_iter()
        .map(|c| {
            let mut stats = SuffStats::new(&model.components[c]).with_fixed_initial(cfg.fixed_initial);
            for (g, grp) in groups.iter().enumerate() {
                let w = e.resp[(g, c)];
                for &n in &grp.members {
                    stats.add(seqs[n], &e.fbs[n][c], w);
                }
            }
            stats.reestimate(&model.components[c], floor)
        })
        .collect::<Result<Vec<_>>>()?;

    let starved: Vec<usize> = (0..k).filter(|&c| mass[c] < EMPTY_COMPONENT_MASS).collect();
    let mut reseeded = false;
    if !starved.is_empty() && n_groups >= k {
        // Worst-explained groups first, scored by mean per-sequence mixture log-likelihood.
        let mut score: Vec<(f64, usize)> = groups
            .iter()
            .enumerate()
            .map(|(g, grp)| {
                let mut row: Vec<f64> = (0..k)
                    .map(|c| ln(model.omega[c]) + e.group_ll[(g, c)])
                    .collect();
                (softmax_in_place(&mut row) / grp.members.len() as f64, g)
            })
            .collect();
        score.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (&c, &(_, g)) in starved.iter().zip(&score) {
            let set: Vec<&Sequence> = groups[g].members.iter().map(|&n| seqs[n]).collect();
            components[c] = warm_start(&set, s, m, cfg, floor)?;
            omega[c] = 1.0 / n_groups as f64;
            reseeded = true;
        }
    }
    let total: f64 = omega.iter().sum();
    omega.iter_mut().for_each(|w| *w /= total);
    Ok((H3m::new(omega, components)?, reseeded))
}

/// Splits `n` into parts proportional to `weights` by largest remainder, each part at least one.
pub fn allocate_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let k = weights.len();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(k.max(1) * 2) {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    // Every base component contributes at least one sequence, taken from the largest parts.
    while let Some(z) = counts.iter().position(|&c| c == 0) {
        let donor = (0..k).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap();
        if counts[donor] <= 1 {
            counts[z] = 1;
        } else {
            counts[donor] -= 1;
            counts[z] = 1;
        }
    }
    counts
}

#[derive(Clone, Debug)]
pub struct ShemFit {
    pub model: H3m,
    /// Reduced component for each base component.
    pub assignments: Vec<usize>,
    pub em: EmH3mFit,
}

/// Sampled hierarchical EM: draw real sequences from every base component and fit a
/// `k_r`-component H3M with one assignment variable per base component.
pub fn shem_h3m(
    base: &H3m,
    k_r: usize,
    n: usize,
    t_sample: usize,
    cfg: &FitConfig,
    seed: u64,
) -> Result<ShemFit> {
    if t_sample == 0 {
        return Err(Error::invalid("sample length must be at least 1"));
    }
    if n < base.n_components() {
        return Err(Error::invalid(format!(
            "N = {n} is smaller than the number of base components {}",
            base.n_components()
        )));
    }
    let counts = allocate_counts(base.omega(), n);
    let mut seqs = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(base.n_components());
    for (i, (hmm, &ni)) in base.components().iter().zip(&counts).enumerate() {
        let mut rng = rng_for(seed, &[1, i as u64]);
        let start = seqs.len();
        for r in 0..ni {
            seqs.push(hmm.sample_with_rng(t_sample, format!("b{i}-{r}"), &mut rng));
        }
        groups.push(AssignmentGroup {
            members: (start..seqs.len()).collect(),
        });
    }
    let em = em_h3m(
        &seqs,
        &groups,
        k_r,
        base.n_states(),
        base.n_mix(),
        cfg,
        derive_seed(seed, &[2]),
    )?;
    Ok(ShemFit {
        model: em.model.clone(),
        assignments: em.hard_assignments(),
        em,
    })
}
