//! Baum-Welch estimation from multiple sequences.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{forward_backward, FbStats, Hmm, Sequence};
use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Gmm, DEFAULT_COV_FLOOR};
use crate::logspace::{log_sum_exp, relative_change};

/// Smallest probability kept for transitions and initial states during re-estimation.
pub const PROB_FLOOR: f64 = 1e-300;

/// How Baum-Welch builds its starting emissions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HmmInit {
    /// Split each sequence into `S` contiguous blocks of equal length; block `s` seeds state `s`.
    Segments,
    /// Sort the pooled frames on their first coordinate and cut them into `S` equal-count slices.
    Quantiles,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood change drops below this.
    pub tol: f64,
    /// Covariance eigenvalue floor, as a fraction of the pooled per-dimension data variance.
    pub cov_floor: f64,
    pub init: HmmInit,
    /// EM iterations used to fit the per-state GMMs at initialization.
    pub inner_iters: usize,
    /// Keep the initial state distribution at its (uniform) starting value instead of
    /// re-estimating it. With one training sequence the estimate is a point mass on the
    /// state of the first frame.
    pub fixed_initial: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            cov_floor: DEFAULT_COV_FLOOR,
            init: HmmInit::Segments,
            inner_iters: 10,
            fixed_initial: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        if !(self.cov_floor > 0.0) {
            return Err(Error::invalid("cov_floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BaumWelchFit {
    pub model: Hmm,
    /// Total data log-likelihood before each re-estimation; the last entry belongs to `model`.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Absolute covariance floor for a pooled frame set.
pub(crate) fn data_floor<'a>(frames: impl Iterator<Item = &'a DVector<f64>>, rel: f64) -> f64 {
    let mut n = 0usize;
    let mut mean: Option<DVector<f64>> = None;
    let mut m2: Option<DVector<f64>> = None;
    for f in frames {
        n += 1;
        match (&mut mean, &mut m2) {
            (Some(mu), Some(s2)) => {
                let delta = f - &*mu;
                *mu += &delta / n as f64;
                let delta2 = f - &*mu;
                *s2 += delta.component_mul(&delta2);
            }
            _ => {
                mean = Some(f.clone());
                m2 = Some(DVector::zeros(f.len()));
            }
        }
    }
    let var = match m2 {
        Some(s2) if n > 1 => s2.mean() / n as f64,
        _ => 0.0,
    };
    if var > 0.0 {
        rel * var
    } else {
        rel
    }
}

/// Accumulated Baum-Welch statistics for one HMM, shifted by the current component means.
#[derive(Clone, Debug)]
pub struct SuffStats {
    s: usize,
    m: usize,
    pi: Vec<f64>,
    trans: DMatrix<f64>,
    occ: Vec<f64>,
    first: Vec<DVector<f64>>,
    second: Vec<DMatrix<f64>>,
    centers: Vec<DVector<f64>>,
    fixed_initial: bool,
}

impl SuffStats {
    pub fn new(model: &Hmm) -> Self {
        let (s, m, d) = (model.n_states(), model.n_mix(), model.dim());
        let centers = model
            .emissions()
            .iter()
            .flat_map(|e| e.components().iter().map(|g| g.mean().clone()))
            .collect();
        Self {
            s,
            m,
            pi: vec![0.0; s],
            trans: DMatrix::zeros(s, s),
            occ: vec![0.0; s * m],
            first: vec![DVector::zeros(d); s * m],
            second: vec![DMatrix::zeros(d, d); s * m],
            centers,
            fixed_initial: false,
        }
    }

    /// Makes [`SuffStats::reestimate`] keep the model's initial state distribution.
    pub fn with_fixed_initial(mut self, fixed: bool) -> Self {
        self.fixed_initial = fixed;
        self
    }

    /// Adds one sequence's posteriors scaled by `weight`.
    pub fn add(&mut self, seq: &Sequence, fb: &FbStats, weight: f64) {
        if weight == 0.0 {
            return;
        }
        let (s, m) = (self.s, self.m);
        for st in 0..s {
            self.pi[st] += weight * fb.gamma[(0, st)];
        }
        for x in &fb.xi {
            self.trans += x * weight;
        }
        for (t, y) in seq.frames.iter().enumerate() {
            for k in 0..s * m {
                let r = weight * fb.mix_post[t * s * m + k];
                if r == 0.0 {
                    continue;
                }
                let dy = y - &self.centers[k];
                self.occ[k] += r;
                self.first[k].axpy(r, &dy, 1.0);
                self.second[k].ger(r, &dy, &dy, 1.0);
            }
        }
    }

    /// Maximum-likelihood parameters given the accumulated statistics.
    ///
    /// States or components that received no mass keep their current parameters.
    pub fn reestimate(&self, model: &Hmm, floor: f64) -> Result<Hmm> {
        let (s, m) = (self.s, self.m);
        let pi = if self.fixed_initial {
            model.pi().to_vec()
        } else {
            normalize_floored(&self.pi).unwrap_or_else(|| model.pi().to_vec())
        };
        let mut trans = model.trans().clone();
        for r in 0..s {
            let row: Vec<f64> = self.trans.row(r).iter().copied().collect();
            if let Some(p) = normalize_floored(&row) {
                for (c, v) in p.into_iter().enumerate() {
                    trans[(r, c)] = v;
                }
            }
        }
        let mut emissions = Vec::with_capacity(s);
        for st in 0..s {
            let occ = &self.occ[st * m..(st + 1) * m];
            let total: f64 = occ.iter().sum();
            let old = &model.emissions()[st];
            if !(total > 0.0) {
                emissions.push(old.clone());
                continue;
            }
            let mut comps = Vec::with_capacity(m);
            for k in 0..m {
                let idx = st * m + k;
                if !(occ[k] > 0.0) {
                    comps.push(old.components()[k].clone());
                    continue;
                }
                let delta = &self.first[idx] / occ[k];
                let mean = &self.centers[idx] + &delta;
                let cov = &self.second[idx] / occ[k] - &delta * delta.transpose();
                comps.push(Gaussian::with_floor(mean, cov, floor)?);
            }
            let weights = occ.iter().map(|o| o / total).collect();
            emissions.push(Gmm::new(weights, comps)?);
        }
        Hmm::new(pi, trans, emissions)
    }
}

fn normalize_floored(v: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = v.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let floored: Vec<f64> = v.iter().map(|x| (x / total).max(PROB_FLOOR)).collect();
    let t2: f64 = floored.iter().sum();
    Some(floored.into_iter().map(|x| x / t2).collect())
}

/// EM fit of a GMM to a frame set, initialized from equal-count slices along the first coordinate.
pub fn fit_gmm(frames: &[&DVector<f64>], m: usize, iters: usize, floor: f64) -> Result<Gmm> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot fit a GMM to zero frames"));
    }
    if m == 0 {
        return Err(Error::invalid("GMM needs at least one component"));
    }
    let n = frames.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| frames[a][0].total_cmp(&frames[b][0]).then(a.cmp(&b)));
    let mut comps = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for k in 0..m {
        let lo = k * n / m;
        let hi = ((k + 1) * n / m).max(lo + 1).min(n);
        let lo = lo.min(hi - 1);
        let chunk: Vec<&DVector<f64>> = order[lo..hi].iter().map(|&i| frames[i]).collect();
        let w = vec![1.0; chunk.len()];
        comps.push(weighted_gaussian(&chunk, &w, floor)?);
        weights.push((hi - lo) as f64);
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut gmm = Gmm::new(weights, comps)?;
    if m == 1 {
        return Ok(gmm);
    }
    let mut resp = vec![0.0; n * m];
    let mut buf = vec![0.0; m];
    for _ in 0..iters {
        for (i, y) in frames.iter().enumerate() {
            gmm.component_log_densities(y, &mut buf);
            let lse = log_sum_exp(&buf);
            for k in 0..m {
                resp[i * m + k] = (buf[k] - lse).exp();
            }
        }
        let mut comps = Vec::with_capacity(m);
        let mut weights = Vec::with_capacity(m);
        for k in 0..m {
            let w: Vec<f64> = (0..n).map(|i| resp[i * m + k]).collect();
            let mass: f64 = w.iter().sum();
            if mass > 1e-12 {
                comps.push(weighted_gaussian(frames, &w, floor)?);
            } else {
                comps.push(gmm.components()[k].clone());
            }
            weights.push(mass / n as f64);
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        gmm = Gmm::new(weights, comps)?;
    }
    Ok(gmm)
}

fn weighted_gaussian(frames: &[&DVector<f64>], w: &[f64], floor: f64) -> Result<Gaussian> {
    let d = frames[0].len();
    let mass: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (f, &wi) in frames.iter().zip(w) {
        mean.axpy(wi / mass, f, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (f, &wi) in frames.iter().zip(w) {
        let dy = *f - &mean;
        cov.ger(wi / mass, &dy, &dy, 1.0);
    }
    Gaussian::with_floor(mean, cov, floor)
}

pub(crate) fn initial_model(
    seqs: &[&Sequence],
    s: usize,
    m: usize,
    cfg: &FitConfig,
    floor: f64,
) -> Result<Hmm> {
    let pi = vec![1.0 / s as f64; s];
    let trans = if s == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        DMatrix::from_fn(s, s, |i, j| if i == j { 0.8 } else { 0.2 / (s - 1) as f64 })
    };
    let all: Vec<&DVector<f64>> = seqs.iter().flat_map(|q| q.frames.iter()).collect();
    let mut pools: Vec<Vec<&DVector<f64>>> = vec![Vec::new(); s];
    match cfg.init {
        HmmInit::Segments => {
            for q in seqs {
                let t_len = q.len();
                for (t, f) in q.frames.iter().enumerate() {
                    pools[t * s / t_len].push(f);
                }
            }
        }
        HmmInit::Quantiles => {
            let mut sorted = all.clone();
            sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let n = sorted.len();
            for (i, f) in sorted.into_iter().enumerate() {
                pools[i * s / n].push(f);
            }
        }
    }
    let emissions = pools
        .iter()
        .map(|p| {
            let src = if p.is_empty() { &all } else { p };
            fit_gmm(src, m, cfg.inner_iters, floor)
        })
        .collect::<Result<Vec<_>>>()?;
    Hmm::new(pi, trans, emissions)
}

pub(crate) fn validate_seqs(seqs: &[&Sequence]) -> Result<usize> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("at least one sequence is required"))?;
    let d = first.dim();
    for q in seqs {
        if q.is_empty() {
            return Err(Error::invalid(format!("sequence '{}' is empty", q.id)));
        }
        if let Some(f) = q.frames.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: f.len(),
            });
        }
    }
    Ok(d)
}

/// One E-step over all sequences followed by the corresponding re-estimation.
///
/// Returns the re-estimated model and the log-likelihood of the model it started from.
pub(crate) fn bw_step(model: &Hmm, seqs: &[&Sequence], floor: f64, fixed_initial: bool) -> Result<(Hmm, f64)> {
    let fbs = seqs
        .par_iter()
        .map(|q| forward_backward(model, q))
        .collect::<Result<Vec<_>>>()?;
    let mut stats = SuffStats::new(model).with_fixed_initial(fixed_initial);
    let mut ll = 0.0;
    for (q, fb) in seqs.iter().zip(&fbs) {
        stats.add(q, fb, 1.0);
        ll += fb.log_likelihood;
    }
    Ok((stats.reestimate(model, floor)?, ll))
}

pub(crate) fn total_ll(model: &Hmm, seqs: &[&Sequence]) -> Result<f64> {
    let lls = seqs
        .par_iter()
        .map(|q| super::log_likelihood(model, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(lls.iter().sum())
}

/// Runs Baum-Welch from `model` for at most `max_iters` iterations or until the relative
/// log-likelihood change drops below `cfg.tol`.
pub(crate) fn run_from(
    mut model: Hmm,
    seqs: &[&Sequence],
    max_iters: usize,
    cfg: &FitConfig,
    floor: f64,
) -> Result<BaumWelchFit> {
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let (next, ll) = bw_step(&model, seqs, floor, cfg.fixed_initial)?;
        if let Some(&prev) = trace.last() {
            if relative_change(prev, ll) < cfg.tol {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        model = next;
        iterations += 1;
    }
    if !converged {
        trace.push(total_ll(&model, seqs)?);
    }
    Ok(BaumWelchFit {
        model,
        ll_trace: trace,
        iterations,
        converged,
    })
}

/// Fits an `S`-state HMM with `M`-component GMM emissions to a set of sequences.
pub fn baum_welch(seqs: &[Sequence], s: usize, m: usize, cfg: &FitConfig) -> Result<BaumWelchFit> {
    let refs: Vec<&Sequence> = seqs.iter().collect();
    baum_welch_refs(&refs, s, m, cfg)
}

pub(crate) fn baum_welch_refs(
    seqs: &[&Sequence],
    s: usize,
    m: usize,
    cfg: &FitConfig,
) -> Result<BaumWelchFit> {
    cfg.validate()?;
    validate_seqs(seqs)?;
    if s == 0 || m == 0 {
        return Err(Error::invalid("S and M must be at least 1"));
    }
    let floor = data_floor(seqs.iter().flat_map(|q| q.frames.iter()), cfg.cov_floor);
    let model = initial_model(seqs, s, m, cfg, floor)?;
    run_from(model, seqs, cfg.max_iters, cfg, floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::sample;

    fn two_state(gap: f64) -> Hmm {
        Hmm::new(
            vec![0.5, 0.5],
            DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]),
            vec![
                Gmm::single(Gaussian::univariate(0.0, 1.0).unwrap()),
                Gmm::single(Gaussian::univariate(gap, 1.0).unwrap()),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_state_recovers_sample_moments() {
        let seq = Sequence::from_scalars("a", &[1.0, 2.0, 4.0, 7.0]).unwrap();
        let fit = baum_welch(std::slice::from_ref(&seq), 1, 1, &FitConfig::default()).unwrap();
        let g = &fit.model.emissions()[0].components()[0];
        assert!((g.mean()[0] - 3.5).abs() < 1e-12);
        assert!((g.cov()[(0, 0)] - 5.25).abs() < 1e-12);
    }

    #[test]
    fn identical_frames_hit_the_floor() {
        let seq = Sequence::from_scalars("a", &[2.0; 10]).unwrap();
        let fit = baum_welch(&[seq], 2, 1, &FitConfig::default()).unwrap();
        for e in fit.model.emissions() {
            assert!(e.components()[0].cov()[(0, 0)] >= 1e-6);
        }
    }

    #[test]
    fn ll_trace_is_monotone() {
        let truth = two_state(3.0);
        let seqs: Vec<Sequence> = (0..5).map(|i| sample(&truth, 40, i).unwrap()).collect();
        for init in [HmmInit::Segments, HmmInit::Quantiles] {
            let cfg = FitConfig {
                init,
                ..FitConfig::default()
            };
            let fit = baum_welch(&seqs, 2, 2, &cfg).unwrap();
            for w in fit.ll_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{:?}", fit.ll_trace);
            }
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(baum_welch(&[], 2, 1, &FitConfig::default()).is_err());
    }
}
