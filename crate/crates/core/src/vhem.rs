//! Variational hierarchical EM: reduces a base H3M to one with fewer components by
//! fitting the reduced model to virtual samples drawn from the base, computed in
//! closed form.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{gmm_bound, EtaMatrix, Gaussian, Gmm, DEFAULT_COV_FLOOR};
use crate::h3m_em::{argmax_rows, H3m};
use crate::hmm::Hmm;
use crate::logspace::{ln, relative_change, softmax_in_place};
use crate::seed::rng_for;

/// Virtual samples per base component when no total is given.
pub const VIRTUAL_SAMPLES_PER_COMPONENT: usize = 10_000;

/// Aggregate weight below which a reduced component counts as empty.
pub const EMPTY_CLUSTER_MASS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct VhemConfig {
    /// Number of reduced components.
    pub k_r: usize,
    /// Total number of virtual samples; `None` means 10^4 per base component.
    pub n_virtual: Option<usize>,
    /// Length of the virtual sequences.
    pub tau: usize,
    pub max_iters: usize,
    /// Stop once the relative change of the bound drops below this.
    pub tol: f64,
    /// Independent initializations; the best final bound wins.
    pub restarts: usize,
    pub seed: u64,
    /// Covariance eigenvalue floor as a fraction of the base model's per-dimension variance.
    pub cov_floor: f64,
    /// Standard deviation of the initial mean perturbation, as a fraction of the data scale.
    pub init_jitter: f64,
    /// Re-seeds allowed per run for clusters left empty at convergence.
    pub max_reseeds: usize,
}

impl VhemConfig {
    pub fn new(k_r: usize) -> Self {
        Self {
            k_r,
            n_virtual: None,
            tau: 10,
            max_iters: 100,
            tol: 1e-5,
            restarts: 3,
            seed: 0,
            cov_floor: DEFAULT_COV_FLOOR,
            init_jitter: 0.01,
            max_reseeds: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_r == 0 {
            return Err(Error::invalid("the reduced model needs at least one component"));
        }
        if self.tau == 0 {
            return Err(Error::invalid("virtual sequence length must be at least 1"));
        }
        if self.n_virtual == Some(0) {
            return Err(Error::invalid("number of virtual samples must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("at least one restart is required"));
        }
        if !(self.tol > 0.0) || !(self.cov_floor > 0.0) || !(self.init_jitter >= 0.0) {
            return Err(Error::invalid("tol and cov_floor must be positive, init_jitter non-negative"));
        }
        Ok(())
    }

    /// Total virtual samples for a base model with `k_b` components.
    pub fn virtual_samples(&self, k_b: usize) -> f64 {
        self.n_virtual
            .unwrap_or(VIRTUAL_SAMPLES_PER_COMPONENT * k_b) as f64
    }
}

/// Optimal variational parameters and summary statistics for one (base HMM, reduced HMM) pair.
///
/// Times are 0-based: `t = 0` is the first virtual frame.
#[derive(Clone, Debug)]
pub struct PairEstep {
    pub s_b: usize,
    pub s_r: usize,
    pub tau: usize,
    /// Expected log-likelihood bound between emission GMMs, `S_b x S_r`.
    pub lgmm: DMatrix<f64>,
    /// Component responsibilities for every (base state, reduced state), indexed `beta * S_r + rho`.
    pub eta: Vec<EtaMatrix>,
    /// Initial reduced-state posterior, `S_r x S_b`: entry `(rho, beta)`.
    pub phi_init: DMatrix<f64>,
    /// Transition posteriors for `t >= 1`, indexed `[(rho_prev * S_b + beta) * S_r + rho]`.
    /// `phi[0]` is empty.
    pub phi: Vec<Vec<f64>>,
    /// Expected log-likelihood bound of a virtual sequence of length `tau`.
    pub l_hmm: f64,
    /// Joint state marginals per time, `S_r x S_b`.
    pub nu: Vec<DMatrix<f64>>,
    /// Reduced-state transition marginals for `t >= 1`, indexed `[(rho_prev * S_r + rho) * S_b + beta]`.
    /// `xi[0]` is empty.
    pub xi: Vec<Vec<f64>>,
    /// Expected count of each reduced state at `t = 0`.
    pub nu1_hat: DVector<f64>,
    /// Expected joint state counts summed over time, `S_r x S_b`.
    pub nu_hat: DMatrix<f64>,
    /// Expected reduced-state transition counts, `S_r x S_r`.
    pub xi_hat: DMatrix<f64>,
}

impl PairEstep {
    /// Transition posterior of `rho` at time `t >= 1` given the previous reduced state and current base state.
    pub fn phi_at(&self, t: usize, rho_prev: usize, beta: usize, rho: usize) -> f64 {
        self.phi[t][(rho_prev * self.s_b + beta) * self.s_r + rho]
    }

    pub fn xi_at(&self, t: usize, rho_prev: usize, rho: usize, beta: usize) -> f64 {
        self.xi[t][(rho_prev * self.s_r + rho) * self.s_b + beta]
    }

    pub fn eta_at(&self, beta: usize, rho: usize) -> &EtaMatrix {
        &self.eta[beta * self.s_r + rho]
    }
}

/// Variational E-step between two HMMs for virtual sequences of length `tau`.
pub fn hmm_pair_estep(base: &Hmm, reduced: &Hmm, tau: usize) -> Result<PairEstep> {
    if tau == 0 {
        return Err(Error::invalid("virtual sequence length must be at least 1"));
    }
    if base.dim() != reduced.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: reduced.dim(),
        });
    }
    let (sb, sr) = (base.n_states(), reduced.n_states());
    let mut lgmm = DMatrix::zeros(sb, sr);
    let mut eta = Vec::with_capacity(sb * sr);
    for (b, gb) in base.emissions().iter().enumerate() {
        for (r, gr) in reduced.emissions().iter().enumerate() {
            let bound = gmm_bound(gb, gr)?;
            lgmm[(b, r)] = bound.value;
            eta.push(bound.eta);
        }
    }
    let log_ar = reduced.trans().map(ln);
    let ab = base.trans();

    // Backward pass: `next[(beta, rho)]` is the optimal bound of the remaining frames.
    let mut next = DMatrix::<f64>::zeros(sb, sr);
    let mut phi = vec![Vec::new(); tau];
    let mut scores = vec![0.0; sr];
    for t in (1..tau).rev() {
        let mut v = DMatrix::zeros(sb, sr);
        let mut p = vec![0.0; sr * sb * sr];
        for rp in 0..sr {
            for b in 0..sb {
                for r in 0..sr {
                    scores[r] = log_ar[(rp, r)] + lgmm[(b, r)] + next[(b, r)];
                }
                v[(b, rp)] = softmax_in_place(&mut scores);
                p[(rp * sb + b) * sr..(rp * sb + b + 1) * sr].copy_from_slice(&scores);
            }
        }
        let mut l = DMatrix::zeros(sb, sr);
        for bp in 0..sb {
            for rp in 0..sr {
                let mut acc = 0.0;
                for b in 0..sb {
                    let w = ab[(bp, b)];
                    if w > 0.0 {
                        acc += w * v[(b, rp)];
                    }
                }
                l[(bp, rp)] = acc;
            }
        }
        next = l;
        phi[t] = p;
    }
    let mut phi_init = DMatrix::zeros(sr, sb);
    let mut l_hmm = 0.0;
    for b in 0..sb {
        for r in 0..sr {
            scores[r] = ln(reduced.pi()[r]) + lgmm[(b, r)] + next[(b, r)];
        }
        let lse = softmax_in_place(&mut scores);
        for r in 0..sr {
            phi_init[(r, b)] = scores[r];
        }
        let w = base.pi()[b];
        if w > 0.0 {
            l_hmm += w * lse;
        }
    }

    // Forward pass for the summary statistics.
    let mut nu = Vec::with_capacity(tau);
    let mut xi = vec![Vec::new(); tau];
    let first = DMatrix::from_fn(sr, sb, |r, b| base.pi()[b] * phi_init[(r, b)]);
    nu.push(first);
    for t in 1..tau {
        let w = &nu[t - 1] * ab;
        let mut x = vec![0.0; sr * sr * sb];
        let mut n_t = DMatrix::zeros(sr, sb);
        for rp in 0..sr {
            for r in 0..sr {
                for b in 0..sb {
                    let val = w[(rp, b)] * phi[t][(rp * sb + b) * sr + r];
                    x[(rp * sr + r) * sb + b] = val;
                    n_t[(r, b)] += val;
                }
            }
        }
        nu.push(n_t);
        xi[t] = x;
    }
    let nu1_hat = DVector::from_fn(sr, |r, _| nu[0].row(r).sum());
    let mut nu_hat = DMatrix::zeros(sr, sb);
    for n in &nu {
        nu_hat += n;
    }
    let mut xi_hat = DMatrix::zeros(sr, sr);
    for x in xi.iter().skip(1) {
        for rp in 0..sr {
            for r in 0..sr {
                xi_hat[(rp, r)] += x[(rp * sr + r) * sb..(rp * sr + r + 1) * sb].iter().sum::<f64>();
            }
        }
    }
    Ok(PairEstep {
        s_b: sb,
        s_r: sr,
        tau,
        lgmm,
        eta,
        phi_init,
        phi,
        l_hmm,
        nu,
        xi,
        nu1_hat,
        nu_hat,
        xi_hat,
    })
}

/// Pair E-steps between every base and reduced component, indexed `i * K_r + j`.
pub fn all_pair_esteps(base: &H3m, reduced: &H3m, tau: usize) -> Result<Vec<PairEstep>> {
    let kr = reduced.n_components();
    (0..base.n_components() * kr)
        .into_par_iter()
        .map(|ij| hmm_pair_estep(&base.components()[ij / kr], &reduced.components()[ij % kr], tau))
        .collect()
}

/// Cluster posteriors of the base components and the total bound they attain.
///
/// `lhmm` is `K_b x K_r`; every base component stands for `n_virtual * omega_i` virtual sequences.
pub fn compute_zhat(base: &H3m, reduced: &H3m, lhmm: &DMatrix<f64>, n_virtual: f64) -> (DMatrix<f64>, f64) {
    let (kb, kr) = (base.n_components(), reduced.n_components());
    let mut z = DMatrix::zeros(kb, kr);
    let mut total = 0.0;
    let mut row = vec![0.0; kr];
    for i in 0..kb {
        let ni = n_virtual * base.omega()[i];
        for (j, r) in row.iter_mut().enumerate() {
            *r = ln(reduced.omega()[j]) + if ni > 0.0 { ni * lhmm[(i, j)] } else { 0.0 };
        }
        total += softmax_in_place(&mut row);
        for (j, &v) in row.iter().enumerate() {
            z[(i, j)] = v;
        }
    }
    (z, total)
}

/// Everything the M-step needs from one E-step, plus the run history.
#[derive(Clone, Debug)]
pub struct VhemState {
    pub reduced: H3m,
    /// `K_b x K_r` cluster posteriors under `reduced`.
    pub zhat: DMatrix<f64>,
    /// Pair E-steps under `reduced`, indexed `i * K_r + j`.
    pub pairs: Vec<PairEstep>,
    pub n_virtual: f64,
    /// Bound after every E-step; the last entry belongs to `reduced`.
    pub trace: Vec<f64>,
    /// Indices into `trace` after which components were re-seeded.
    pub reseeds: Vec<usize>,
}

impl VhemState {
    /// Runs the E-step for `reduced`.
    pub fn new(base: &H3m, reduced: H3m, tau: usize, n_virtual: f64) -> Result<Self> {
        let pairs = all_pair_esteps(base, &reduced, tau)?;
        let lhmm = lhmm_matrix(&pairs, base.n_components(), reduced.n_components());
        let (zhat, bound) = compute_zhat(base, &reduced, &lhmm, n_virtual);
        Ok(Self {
            reduced,
            zhat,
            pairs,
            n_virtual,
            trace: vec![bound],
            reseeds: Vec::new(),
        })
    }

    pub fn pair(&self, i: usize, j: usize) -> &PairEstep {
        &self.pairs[i * self.reduced.n_components() + j]
    }

    /// Expected log-likelihood bounds, `K_b x K_r`.
    pub fn lhmm(&self) -> DMatrix<f64> {
        let kr = self.reduced.n_components();
        lhmm_matrix(&self.pairs, self.pairs.len() / kr, kr)
    }

    pub fn bound(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }

    pub fn assignments(&self) -> Vec<usize> {
        argmax_rows(&self.zhat)
    }
}

fn lhmm_matrix(pairs: &[PairEstep], kb: usize, kr: usize) -> DMatrix<f64> {
    DMatrix::from_fn(kb, kr, |i, j| pairs[i * kr + j].l_hmm)
}

#[derive(Clone, Debug)]
pub struct MstepOutcome {
    pub model: H3m,
    /// Reduced components that received no mass and were replaced by a base component.
    pub reseeded: Vec<usize>,
}

/// Closed-form re-estimation of the reduced model from the state's statistics.
///
/// `floor` is the absolute covariance eigenvalue floor. A reduced component with aggregate
/// weight below [`EMPTY_CLUSTER_MASS`] is replaced by a copy of the worst-represented base component.
pub fn mstep(base: &H3m, state: &VhemState, floor: f64) -> Result<MstepOutcome> {
    let (kb, kr) = (base.n_components(), state.reduced.n_components());
    let z = &state.zhat;
    let mut omega: Vec<f64> = (0..kr).map(|j| z.column(j).sum() / kb as f64).collect();
    let weight = |i: usize, j: usize| z[(i, j)] * base.omega()[i];
    let mass: Vec<f64> = (0..kr).map(|j| (0..kb).map(|i| weight(i, j)).sum()).collect();

    let mut components = (0..kr)
        .into_par_iter()
        .map(|j| {
            let old = &state.reduced.components()[j];
            if mass[j] < EMPTY_CLUSTER_MASS {
                return Ok(old.clone());
            }
            reestimate_component(base, state, j, &weight, floor)
        })
        .collect::<Result<Vec<_>>>()?;

    let starved: Vec<usize> = (0..kr).filter(|&j| mass[j] < EMPTY_CLUSTER_MASS).collect();
    if !starved.is_empty() {
        let lhmm = state.lhmm();
        let mut order: Vec<(f64, usize)> = (0..kb)
            .map(|i| (lhmm.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (&j, &(_, i)) in starved.iter().zip(order.iter().cycle()) {
            components[j] = base.components()[i].clone();
            omega[j] = 1.0 / kb as f64;
        }
    }
    let total: f64 = omega.iter().sum();
    omega.iter_mut().for_each(|w| *w /= total);
    Ok(MstepOutcome {
        model: H3m::new(omega, components)?,
        reseeded: starved,
    })
}

fn reestimate_component(
    base: &H3m,
    state: &VhemState,
    j: usize,
    weight: &dyn Fn(usize, usize) -> f64,
    floor: f64,
) -> Result<Hmm> {
    let old = &state.reduced.components()[j];
    let kb = base.n_components();
    let sr = old.n_states();
    let d = old.dim();

    let mut pi = vec![0.0; sr];
    let mut trans = DMatrix::zeros(sr, sr);
    for i in 0..kb {
        let w = weight(i, j);
        if w == 0.0 {
            continue;
        }
        let p = state.pair(i, j);
        for r in 0..sr {
            pi[r] += w * p.nu1_hat[r];
        }
        trans += &p.xi_hat * w;
    }
    let pi = normalized(&pi).unwrap_or_else(|| old.pi().to_vec());
    let mut a = old.trans().clone();
    for r in 0..sr {
        let row: Vec<f64> = trans.row(r).iter().copied().collect();
        if let Some(p) = normalized(&row) {
            for (c, v) in p.into_iter().enumerate() {
                a[(r, c)] = v;
            }
        }
    }

    let mut emissions = Vec::with_capacity(sr);
    for r in 0..sr {
        let old_gmm = &old.emissions()[r];
        let ml = old_gmm.n_components();
        let mut mass = vec![0.0; ml];
        let mut first = vec![DVector::<f64>::zeros(d); ml];
        // (weight, base Gaussian, reduced component) triples feeding this state's GMM.
        let mut terms: Vec<(f64, &Gaussian, usize)> = Vec::new();
        for i in 0..kb {
            let w = weight(i, j);
            if w == 0.0 {
                continue;
            }
            let p = state.pair(i, j);
            let bh = &base.components()[i];
            for b in 0..p.s_b {
                let wb = w * p.nu_hat[(r, b)];
                if wb == 0.0 {
                    continue;
                }
                let gb = &bh.emissions()[b];
                let eta = p.eta_at(b, r);
                for (m, g) in gb.components().iter().enumerate() {
                    let wm = wb * gb.weights()[m];
                    for l in 0..ml {
                        let wl = wm * eta.get(m, l);
                        if wl == 0.0 {
                            continue;
                        }
                        mass[l] += wl;
                        first[l].axpy(wl, g.mean(), 1.0);
                        terms.push((wl, g, l));
                    }
                }
            }
        }
        let total: f64 = mass.iter().sum();
        if !(total > 0.0) {
            emissions.push(old_gmm.clone());
            continue;
        }
        let means: Vec<DVector<f64>> = (0..ml)
            .map(|l| {
                if mass[l] > 0.0 {
                    &first[l] / mass[l]
                } else {
                    old_gmm.components()[l].mean().clone()
                }
            })
            .collect();
        let mut second = vec![DMatrix::<f64>::zeros(d, d); ml];
        for &(wl, g, l) in &terms {
            let dm = g.mean() - &means[l];
            second[l] += g.cov() * wl;
            second[l].ger(wl, &dm, &dm, 1.0);
        }
        let mut comps = Vec::with_capacity(ml);
        for l in 0..ml {
            if mass[l] > 0.0 {
                comps.push(Gaussian::with_floor(
                    means[l].clone(),
                    &second[l] / mass[l],
                    floor,
                )?);
            } else {
                comps.push(old_gmm.components()[l].clone());
            }
        }
        emissions.push(Gmm::new(mass.iter().map(|v| v / total).collect(), comps)?);
    }
    Hmm::new(pi, a, emissions)
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if total > 0.0 && total.is_finite() {
        Some(v.iter().map(|x| x / total).collect())
    } else {
        None
    }
}

/// Per-dimension variance of all base emission Gaussians pooled with equal weight.
pub fn base_scale(base: &H3m) -> DVector<f64> {
    let gaussians: Vec<&Gaussian> = base
        .components()
        .iter()
        .flat_map(|h| h.emissions().iter())
        .flat_map(|g| g.components().iter())
        .collect();
    let n = gaussians.len() as f64;
    let d = base.dim();
    let mut mean = DVector::zeros(d);
    for g in &gaussians {
        mean += g.mean() / n;
    }
    DVector::from_fn(d, |k, _| {
        gaussians
            .iter()
            .map(|g| g.cov()[(k, k)] + (g.mean()[k] - mean[k]).powi(2))
            .sum::<f64>()
            / n
    })
}

/// Absolute covariance floor for reductions of `base`.
pub fn covariance_floor(base: &H3m, rel: f64) -> f64 {
    let var = base_scale(base).mean();
    if var > 0.0 {
        rel * var
    } else {
        rel
    }
}

/// Random initial reduced model: distinct base components drawn by weight, means jittered.
pub fn initial_reduced<R: Rng + ?Sized>(base: &H3m, cfg: &VhemConfig, rng: &mut R) -> Result<H3m> {
    let kb = base.n_components();
    let scale = base_scale(base).map(f64::sqrt);
    let mut picks = Vec::with_capacity(cfg.k_r);
    let mut pool: Vec<usize> = (0..kb).collect();
    while picks.len() < cfg.k_r {
        if pool.is_empty() {
            pool = (0..kb).collect();
        }
        let w: Vec<f64> = pool.iter().map(|&i| base.omega()[i]).collect();
        let k = if w.iter().sum::<f64>() > 0.0 {
            crate::gaussian::sample_categorical(&w, rng)
        } else {
            rng.random_range(0..pool.len())
        };
        picks.push(pool.swap_remove(k));
    }
    let components = picks
        .into_iter()
        .map(|i| jitter(&base.components()[i], &scale, cfg.init_jitter, rng))
        .collect::<Result<Vec<_>>>()?;
    H3m::uniform(components)
}

fn jitter<R: Rng + ?Sized>(hmm: &Hmm, scale: &DVector<f64>, amount: f64, rng: &mut R) -> Result<Hmm> {
    if amount == 0.0 {
        return Ok(hmm.clone());
    }
    let emissions = hmm
        .emissions()
        .iter()
        .map(|g| {
            let comps = g
                .components()
                .iter()
                .map(|c| {
                    let mean = DVector::from_fn(c.dim(), |k, _| {
                        let e: f64 = rng.sample(StandardNormal);
                        c.mean()[k] + amount * scale[k] * e
                    });
                    Gaussian::new(mean, c.cov().clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Gmm::new(g.weights().to_vec(), comps)
        })
        .collect::<Result<Vec<_>>>()?;
    Hmm::new(hmm.pi().to_vec(), hmm.trans().clone(), emissions)
}

/// Hard clustering of the base components and the reduced model as cluster centers.
#[derive(Clone, Debug)]
pub struct ClusteringResult {
    /// Reduced component for each base component.
    pub assignments: Vec<usize>,
    pub centers: H3m,
}

impl ClusteringResult {
    /// Members of every cluster, in base order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.centers.n_components()];
        for (i, &j) in self.assignments.iter().enumerate() {
            out[j].push(i);
        }
        out
    }

    pub fn is_surjective(&self) -> bool {
        self.clusters().iter().all(|c| !c.is_empty())
    }
}

#[derive(Clone, Debug)]
pub struct VhemOutput {
    pub result: ClusteringResult,
    /// Final E-step of the winning restart.
    pub state: VhemState,
    pub iterations: usize,
    pub converged: bool,
    /// Final bound of every restart.
    pub restart_bounds: Vec<f64>,
    pub best_restart: usize,
}

/// Iterates E- and M-steps from `init` until the bound stabilizes.
pub fn vhem_from(base: &H3m, init: H3m, cfg: &VhemConfig) -> Result<(VhemState, usize, bool)> {
    cfg.validate()?;
    check_compatible(base, &init)?;
    let n_virtual = cfg.virtual_samples(base.n_components());
    let floor = covariance_floor(base, cfg.cov_floor);
    let kb = base.n_components();
    let mut state = VhemState::new(base, init, cfg.tau, n_virtual)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut reseeds_left = cfg.max_reseeds;
    loop {
        let n = state.trace.len();
        let settled = n >= 2
            && !state.reseeds.contains(&(n - 2))
            && relative_change(state.trace[n - 2], state.trace[n - 1]) < cfg.tol;
        if settled {
            // Converged; a cluster nobody picks gets one more chance from a poorly fitted base component.
            let empty = empty_clusters(&state);
            if empty.is_empty() || kb < cfg.k_r || reseeds_left == 0 {
                converged = true;
                break;
            }
            if iterations >= cfg.max_iters {
                break;
            }
            reseeds_left -= 1;
            let reduced = reseed_empty(base, &state, &empty)?;
            let mark = n - 1;
            let (trace, mut reseeds) = (std::mem::take(&mut state.trace), std::mem::take(&mut state.reseeds));
            state = VhemState::new(base, reduced, cfg.tau, n_virtual)?;
            let bound = state.trace[0];
            state.trace = trace;
            state.trace.push(bound);
            reseeds.push(mark);
            state.reseeds = reseeds;
            iterations += 1;
            continue;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        let outcome = mstep(base, &state, floor)?;
        let mark = n - 1;
        let (trace, mut reseeds) = (std::mem::take(&mut state.trace), std::mem::take(&mut state.reseeds));
        if !outcome.reseeded.is_empty() {
            reseeds.push(mark);
        }
        state = VhemState::new(base, outcome.model, cfg.tau, n_virtual)?;
        let bound = state.trace[0];
        state.trace = trace;
        state.trace.push(bound);
        state.reseeds = reseeds;
        iterations += 1;
    }
    Ok((state, iterations, converged))
}

fn check_compatible(base: &H3m, reduced: &H3m) -> Result<()> {
    if base.dim() != reduced.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.dim(),
            found: reduced.dim(),
        });
    }
    Ok(())
}

fn empty_clusters(state: &VhemState) -> Vec<usize> {
    let kr = state.reduced.n_components();
    let mut used = vec![false; kr];
    for j in state.assignments() {
        used[j] = true;
    }
    (0..kr).filter(|&j| !used[j]).collect()
}

fn reseed_empty(base: &H3m, state: &VhemState, empty: &[usize]) -> Result<H3m> {
    let assign = state.assignments();
    let lhmm = state.lhmm();
    let kr = state.reduced.n_components();
    let mut sizes = vec![0usize; kr];
    for &j in &assign {
        sizes[j] += 1;
    }
    let mut candidates: Vec<(f64, usize)> = assign
        .iter()
        .enumerate()
        .filter(|&(_, &j)| sizes[j] >= 2)
        .map(|(i, &j)| (lhmm[(i, j)], i))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut omega = state.reduced.omega().to_vec();
    let mut components = state.reduced.components().to_vec();
    for (&j, &(_, i)) in empty.iter().zip(&candidates) {
        let owner = assign[i];
        if sizes[owner] < 2 {
            continue;
        }
        sizes[owner] -= 1;
        sizes[j] += 1;
        components[j] = base.components()[i].clone();
        omega[j] = 1.0 / base.n_components() as f64;
    }
    let total: f64 = omega.iter().sum();
    omega.iter_mut().for_each(|w| *w /= total);
    H3m::new(omega, components)
}

/// Reduces `base` to `cfg.k_r` components, keeping the best of `cfg.restarts` runs.
///
/// Runs whose hard assignments use every reduced component are preferred; among those the
/// largest final bound wins.
pub fn vhem_reduce(base: &H3m, cfg: &VhemConfig) -> Result<VhemOutput> {
    cfg.validate()?;
    let mut best: Option<(bool, f64, usize, VhemState, usize, bool)> = None;
    let mut bounds = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let mut rng = rng_for(cfg.seed, &[r as u64]);
        let init = initial_reduced(base, cfg, &mut rng)?;
        let (state, iters, conv) = vhem_from(base, init, cfg)?;
        let bound = state.bound();
        bounds.push(bound);
        let surjective = empty_clusters(&state).is_empty();
        let better = match &best {
            None => true,
            Some((s, b, ..)) => (surjective, bound) > (*s, *b),
        };
        if better {
            best = Some((surjective, bound, r, state, iters, conv));
        }
    }
    let (_, _, best_restart, state, iterations, converged) = best.expect("at least one restart");
    Ok(VhemOutput {
        result: ClusteringResult {
            assignments: state.assignments(),
            centers: state.reduced.clone(),
        },
        state,
        iterations,
        converged,
        restart_bounds: bounds,
        best_restart,
    })
}
