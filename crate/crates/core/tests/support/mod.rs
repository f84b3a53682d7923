//! Independent reference computations and random instance generators shared by the
//! integration and acceptance tests. Nothing here calls the library's inference code.

#![allow(dead_code)]

use h3m::{Gaussian, Gmm, Hmm, H3m};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Random probability vector bounded away from zero.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
    let t: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / t).collect()
}

pub fn random_spd<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| 0.7 * normal(rng));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.2
}

pub fn random_gaussian<R: Rng>(rng: &mut R, d: usize, spread: f64) -> Gaussian {
    let mean = DVector::from_fn(d, |_, _| spread * normal(rng));
    Gaussian::new(mean, random_spd(rng, d)).unwrap()
}

pub fn random_hmm<R: Rng>(rng: &mut R, s: usize, m: usize, d: usize, spread: f64) -> Hmm {
    let pi = random_simplex(rng, s);
    let rows: Vec<Vec<f64>> = (0..s).map(|_| random_simplex(rng, s)).collect();
    let trans = DMatrix::from_fn(s, s, |r, c| rows[r][c]);
    let emissions = (0..s)
        .map(|_| {
            let comps = (0..m).map(|_| random_gaussian(rng, d, spread)).collect();
            Gmm::new(random_simplex(rng, m), comps).unwrap()
        })
        .collect();
    Hmm::new(pi, trans, emissions).unwrap()
}

pub fn random_h3m<R: Rng>(rng: &mut R, k: usize, s: usize, m: usize, d: usize, spread: f64) -> H3m {
    let comps = (0..k).map(|_| random_hmm(rng, s, m, d, spread)).collect();
    H3m::new(random_simplex(rng, k), comps).unwrap()
}

/// Univariate HMM with the given state means and one shared variance.
pub fn scalar_hmm(means: &[f64], var: f64, stay: f64) -> Hmm {
    let s = means.len();
    let trans = if s == 1 {
        DMatrix::from_element(1, 1, 1.0)
    } else {
        DMatrix::from_fn(s, s, |i, j| if i == j { stay } else { (1.0 - stay) / (s - 1) as f64 })
    };
    Hmm::new(
        vec![1.0 / s as f64; s],
        trans,
        means
            .iter()
            .map(|&m| Gmm::single(Gaussian::univariate(m, var).unwrap()))
            .collect(),
    )
    .unwrap()
}

/// E_{x ~ N(mb, Sb)} [log N(x; mr, Sr)] from explicit inverse and determinant.
pub fn expected_log_normal(mb: &DVector<f64>, sb: &DMatrix<f64>, mr: &DVector<f64>, sr: &DMatrix<f64>) -> f64 {
    let d = mb.len() as f64;
    let inv = sr.clone().try_inverse().unwrap();
    let diff = mr - mb;
    let quad = (diff.transpose() * &inv * &diff)[(0, 0)];
    let trace = (&inv * sb).trace();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + sr.determinant().ln() + trace + quad)
}

pub fn log_normal_pdf(x: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let inv = s.clone().try_inverse().unwrap();
    let diff = x - m;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + (diff.transpose() * inv * &diff)[(0, 0)])
}

pub fn draw_index<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn draw_gaussian<R: Rng>(rng: &mut R, m: &DVector<f64>, s: &DMatrix<f64>) -> DVector<f64> {
    let l = s.clone().cholesky().unwrap().l();
    let z = DVector::from_fn(m.len(), |_, _| normal(rng));
    m + l * z
}

/// Plain ancestral sampling of `len` frames.
pub fn draw_sequence<R: Rng>(rng: &mut R, h: &Hmm, len: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(len);
    let mut s = draw_index(rng, h.pi());
    for t in 0..len {
        if t > 0 {
            let row: Vec<f64> = h.trans().row(s).iter().copied().collect();
            s = draw_index(rng, &row);
        }
        let g = &h.emissions()[s];
        let m = draw_index(rng, g.weights());
        let c = &g.components()[m];
        out.push(draw_gaussian(rng, c.mean(), c.cov()));
    }
    out
}

pub fn emission_density(g: &Gmm, x: &DVector<f64>) -> f64 {
    g.weights()
        .iter()
        .zip(g.components())
        .map(|(w, c)| w * log_normal_pdf(x, c.mean(), c.cov()).exp())
        .sum()
}

/// Scaled forward algorithm in the probability domain.
pub fn forward_ll(h: &Hmm, frames: &[DVector<f64>]) -> f64 {
    let s = h.n_states();
    let mut alpha: Vec<f64> = (0..s).map(|i| h.pi()[i] * emission_density(&h.emissions()[i], &frames[0])).collect();
    let mut ll = 0.0;
    for t in 0..frames.len() {
        if t > 0 {
            alpha = (0..s)
                .map(|j| {
                    let pred: f64 = (0..s).map(|i| alpha[i] * h.trans()[(i, j)]).sum();
                    pred * emission_density(&h.emissions()[j], &frames[t])
                })
                .collect();
        }
        let c: f64 = alpha.iter().sum();
        ll += c.ln();
        alpha.iter_mut().for_each(|a| *a /= c);
    }
    ll
}

/// Sum over all state paths of the joint density; exponential in the length.
pub fn enumerate_ll(h: &Hmm, frames: &[DVector<f64>]) -> f64 {
    let s = h.n_states();
    let t_len = frames.len();
    let mut total = 0.0;
    for code in 0..s.pow(t_len as u32) {
        let path = digits(code, s, t_len);
        let mut p = h.pi()[path[0]];
        for t in 0..t_len {
            if t > 0 {
                p *= h.trans()[(path[t - 1], path[t])];
            }
            p *= emission_density(&h.emissions()[path[t]], &frames[t]);
        }
        total += p;
    }
    total.ln()
}

/// Base-`s` digits of `code`, most significant first, `len` of them.
pub fn digits(mut code: usize, s: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for k in (0..len).rev() {
        out[k] = code % s;
        code /= s;
    }
    out
}

/// Monte-Carlo estimate of E_base[log p(y_{1:tau} | reduced)] with its standard error.
pub fn mc_expected_ll<R: Rng>(rng: &mut R, base: &Hmm, reduced: &Hmm, tau: usize, n: usize) -> (f64, f64) {
    let vals: Vec<f64> = (0..n).map(|_| forward_ll(reduced, &draw_sequence(rng, base, tau))).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Factorized variational distribution over reduced state sequences given base state sequences:
/// an initial table `init[beta][rho]` and per-time tables `trans[t][(rho_prev, beta)][rho]`.
#[derive(Clone, Debug)]
pub struct Factorized {
    pub s_b: usize,
    pub s_r: usize,
    pub init: Vec<Vec<f64>>,
    pub trans: Vec<Vec<Vec<f64>>>,
}

impl Factorized {
    pub fn uniform(s_b: usize, s_r: usize, tau: usize) -> Self {
        let u = vec![1.0 / s_r as f64; s_r];
        Self {
            s_b,
            s_r,
            init: vec![u.clone(); s_b],
            trans: (0..tau).map(|_| vec![u.clone(); s_r * s_b]).collect(),
        }
    }

    fn block_mut(&mut self, block: (usize, usize)) -> &mut Vec<f64> {
        let (t, idx) = block;
        if t == 0 {
            &mut self.init[idx]
        } else {
            &mut self.trans[t][idx]
        }
    }
}

/// Emission bound table L(beta, rho) for single-Gaussian emissions.
pub fn emission_table(base: &Hmm, reduced: &Hmm) -> DMatrix<f64> {
    DMatrix::from_fn(base.n_states(), reduced.n_states(), |b, r| {
        assert_eq!(base.n_mix(), 1);
        assert_eq!(reduced.n_mix(), 1);
        let gb = &base.emissions()[b].components()[0];
        let gr = &reduced.emissions()[r].components()[0];
        expected_log_normal(gb.mean(), gb.cov(), gr.mean(), gr.cov())
    })
}

fn ln0(x: f64) -> f64 {
    if x > 0.0 {
        x.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// The sequence-level bound evaluated by full enumeration over base and reduced state sequences.
pub fn factorized_objective(base: &Hmm, reduced: &Hmm, lgmm: &DMatrix<f64>, q: &Factorized, tau: usize) -> f64 {
    let (sb, sr) = (base.n_states(), reduced.n_states());
    let mut total = 0.0;
    for bc in 0..sb.pow(tau as u32) {
        let beta = digits(bc, sb, tau);
        let mut pb = base.pi()[beta[0]];
        for t in 1..tau {
            pb *= base.trans()[(beta[t - 1], beta[t])];
        }
        if pb == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for rc in 0..sr.pow(tau as u32) {
            let rho = digits(rc, sr, tau);
            let mut qv = q.init[beta[0]][rho[0]];
            for t in 1..tau {
                qv *= q.trans[t][rho[t - 1] * sb + beta[t]][rho[t]];
            }
            if qv == 0.0 {
                continue;
            }
            let mut reward = ln0(reduced.pi()[rho[0]]) + lgmm[(beta[0], rho[0])];
            for t in 1..tau {
                reward += ln0(reduced.trans()[(rho[t - 1], rho[t])]) + lgmm[(beta[t], rho[t])];
            }
            inner += qv * (reward - qv.ln());
        }
        total += pb * inner;
    }
    total
}

/// Maximizes [`factorized_objective`] by exact block coordinate ascent. Each block is one
/// conditional distribution; the objective restricted to a block is linear plus a scaled
/// entropy, so probing it at the vertices and the barycenter identifies the block optimum.
pub fn maximize_factorized(base: &Hmm, reduced: &Hmm, tau: usize, sweeps: usize) -> (f64, Factorized) {
    let (sb, sr) = (base.n_states(), reduced.n_states());
    let lgmm = emission_table(base, reduced);
    let mut q = Factorized::uniform(sb, sr, tau);
    let mut blocks: Vec<(usize, usize)> = (0..sb).map(|b| (0, b)).collect();
    for t in 1..tau {
        blocks.extend((0..sr * sb).map(|i| (t, i)));
    }
    let mut value = factorized_objective(base, reduced, &lgmm, &q, tau);
    for _ in 0..sweeps {
        let before = value;
        for &blk in blocks.iter().chain(blocks.iter().rev()) {
            let mut probe = q.clone();
            let mut vertex = vec![0.0; sr];
            for r in 0..sr {
                let mut e = vec![0.0; sr];
                e[r] = 1.0;
                *probe.block_mut(blk) = e;
                vertex[r] = factorized_objective(base, reduced, &lgmm, &probe, tau);
            }
            *probe.block_mut(blk) = vec![1.0 / sr as f64; sr];
            let center = factorized_objective(base, reduced, &lgmm, &probe, tau);
            let weight = (center - vertex.iter().sum::<f64>() / sr as f64) / (sr as f64).ln();
            if !(weight > 1e-300) {
                continue;
            }
            let top = vertex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let un: Vec<f64> = vertex.iter().map(|v| ((v - top) / weight).exp()).collect();
            let z: f64 = un.iter().sum();
            *q.block_mut(blk) = un.into_iter().map(|v| v / z).collect();
        }
        value = factorized_objective(base, reduced, &lgmm, &q, tau);
        if (value - before).abs() < 1e-15 * value.abs().max(1.0) {
            break;
        }
    }
    (value, q)
}

/// Expected joint state counts and reduced transition counts under `p_base x q`, by enumeration.
/// Returns (first-frame reduced marginal, nu_hat[(rho, beta)], xi_hat[(rho_prev, rho)]).
pub fn enumerate_counts(base: &Hmm, q: &Factorized, tau: usize) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (sb, sr) = (q.s_b, q.s_r);
    let mut first = vec![0.0; sr];
    let mut nu = DMatrix::zeros(sr, sb);
    let mut xi = DMatrix::zeros(sr, sr);
    for bc in 0..sb.pow(tau as u32) {
        let beta = digits(bc, sb, tau);
        let mut pb = base.pi()[beta[0]];
        for t in 1..tau {
            pb *= base.trans()[(beta[t - 1], beta[t])];
        }
        for rc in 0..sr.pow(tau as u32) {
            let rho = digits(rc, sr, tau);
            let mut w = pb * q.init[beta[0]][rho[0]];
            for t in 1..tau {
                w *= q.trans[t][rho[t - 1] * sb + beta[t]][rho[t]];
            }
            first[rho[0]] += w;
            for t in 0..tau {
                nu[(rho[t], beta[t])] += w;
                if t > 0 {
                    xi[(rho[t - 1], rho[t])] += w;
                }
            }
        }
    }
    (first, nu, xi)
}
