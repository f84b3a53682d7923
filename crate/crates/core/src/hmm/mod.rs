//! Hidden Markov models with GMM emissions: likelihood, sampling and posterior inference.

pub(crate) mod fit;

pub use fit::{baum_welch, fit_gmm, BaumWelchFit, FitConfig, HmmInit, SuffStats};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{check_probabilities, sample_categorical, Gmm};
use crate::logspace::{ln, log_sum_exp};

/// An HMM with initial distribution `pi`, row-stochastic transitions and one GMM per state.
#[derive(Clone, Debug, PartialEq)]
pub struct Hmm {
    pi: Vec<f64>,
    trans: DMatrix<f64>,
    emissions: Vec<Gmm>,
}

impl Hmm {
    pub fn new(pi: Vec<f64>, trans: DMatrix<f64>, emissions: Vec<Gmm>) -> Result<Self> {
        let s = pi.len();
        if s == 0 {
            return Err(Error::invalid("HMM with zero states"));
        }
        if trans.nrows() != s || trans.ncols() != s || emissions.len() != s {
            return Err(Error::invalid(format!(
                "HMM with {s} states has a {}x{} transition matrix and {} emissions",
                trans.nrows(),
                trans.ncols(),
                emissions.len()
            )));
        }
        check_probabilities(&pi, "initial probabilities")?;
        for r in 0..s {
            let row: Vec<f64> = trans.row(r).iter().copied().collect();
            check_probabilities(&row, &format!("transition row {r}"))?;
        }
        let d = emissions[0].dim();
        let m = emissions[0].n_components();
        for e in &emissions {
            if e.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: e.dim(),
                });
            }
            if e.n_components() != m {
                return Err(Error::Incompatible(format!(
                    "emission GMMs have {m} and {} components",
                    e.n_components()
                )));
            }
        }
        Ok(Self {
            pi,
            trans,
            emissions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.emissions[0].dim()
    }

    pub fn n_mix(&self) -> usize {
        self.emissions[0].n_components()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn trans(&self) -> &DMatrix<f64> {
        &self.trans
    }

    pub fn emissions(&self) -> &[Gmm] {
        &self.emissions
    }

    /// Same distribution with hidden state `s` renamed to `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let s = self.n_states();
        let mut seen = vec![false; s];
        if perm.len() != s || perm.iter().any(|&p| p >= s || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("not a permutation of the hidden states"));
        }
        let mut pi = vec![0.0; s];
        let mut trans = DMatrix::zeros(s, s);
        let mut emissions = self.emissions.clone();
        for a in 0..s {
            pi[perm[a]] = self.pi[a];
            emissions[perm[a]] = self.emissions[a].clone();
            for b in 0..s {
                trans[(perm[a], perm[b])] = self.trans[(a, b)];
            }
        }
        Ok(Self {
            pi,
            trans,
            emissions,
        })
    }

    fn check_seq(&self, seq: &Sequence) -> Result<()> {
        if seq.frames.is_empty() {
            return Err(Error::invalid(format!("sequence '{}' is empty", seq.id)));
        }
        if let Some(f) = seq.frames.iter().find(|f| f.len() != self.dim()) {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: f.len(),
            });
        }
        Ok(())
    }

    /// `log c_{s,m} + log N(y_t)` for every frame, state and mixture component, laid out `[t][s][m]`.
    pub(crate) fn component_log_densities(&self, seq: &Sequence) -> Vec<f64> {
        let (s, m) = (self.n_states(), self.n_mix());
        let mut out = vec![0.0; seq.len() * s * m];
        for (t, y) in seq.frames.iter().enumerate() {
            for (st, e) in self.emissions.iter().enumerate() {
                let off = (t * s + st) * m;
                e.component_log_densities(y, &mut out[off..off + m]);
            }
        }
        out
    }

    pub fn sample_with_rng<R: Rng + ?Sized>(&self, len: usize, id: String, rng: &mut R) -> Sequence {
        let mut frames = Vec::with_capacity(len);
        let mut state = sample_categorical(&self.pi, rng);
        for t in 0..len {
            if t > 0 {
                let row: Vec<f64> = self.trans.row(state).iter().copied().collect();
                state = sample_categorical(&row, rng);
            }
            frames.push(self.emissions[state].sample(rng));
        }
        Sequence { id, frames }
    }
}

/// An observed sequence of `T >= 1` frames of dimension `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub frames: Vec<DVector<f64>>,
}

impl Sequence {
    pub fn new(id: impl Into<String>, frames: Vec<DVector<f64>>) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::invalid(format!("sequence '{id}' has no frames")));
        }
        let d = frames[0].len();
        if d == 0 {
            return Err(Error::invalid(format!("sequence '{id}' has zero-dimensional frames")));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: f.len(),
            });
        }
        Ok(Self { id, frames })
    }

    /// One-dimensional sequence from scalars.
    pub fn from_scalars(id: impl Into<String>, values: &[f64]) -> Result<Self> {
        Self::new(id, values.iter().map(|&v| DVector::from_element(1, v)).collect())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.len())
    }
}

/// Posterior statistics of one sequence under one HMM.
#[derive(Clone, Debug)]
pub struct FbStats {
    pub log_likelihood: f64,
    /// `T x S` state posteriors.
    pub gamma: DMatrix<f64>,
    /// `T - 1` matrices of `S x S` transition posteriors.
    pub xi: Vec<DMatrix<f64>>,
    /// Joint state/component posteriors laid out `[t][s][m]`.
    pub mix_post: Vec<f64>,
}

struct Lattice {
    log_alpha: DMatrix<f64>,
    log_b: DMatrix<f64>,
    comp: Vec<f64>,
    log_likelihood: f64,
}

fn forward(model: &Hmm, seq: &Sequence) -> Lattice {
    let (t_len, s, m) = (seq.len(), model.n_states(), model.n_mix());
    let comp = model.component_log_densities(seq);
    let log_b = DMatrix::from_fn(t_len, s, |t, st| {
        let off = (t * s + st) * m;
        log_sum_exp(&comp[off..off + m])
    });
    let log_a = model.trans.map(ln);
    let mut log_alpha = DMatrix::zeros(t_len, s);
    for st in 0..s {
        log_alpha[(0, st)] = ln(model.pi[st]) + log_b[(0, st)];
    }
    let mut buf = vec![0.0; s];
    for t in 1..t_len {
        for j in 0..s {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = log_alpha[(t - 1, i)] + log_a[(i, j)];
            }
            log_alpha[(t, j)] = log_sum_exp(&buf) + log_b[(t, j)];
        }
    }
    let last: Vec<f64> = log_alpha.row(t_len - 1).iter().copied().collect();
    Lattice {
        log_likelihood: log_sum_exp(&last),
        log_alpha,
        log_b,
        comp,
    }
}

/// `log p(y_{1:T} | model)` by the forward algorithm in the log domain.
pub fn log_likelihood(model: &Hmm, seq: &Sequence) -> Result<f64> {
    model.check_seq(seq)?;
    Ok(forward(model, seq).log_likelihood)
}

/// Exact state, transition and mixture-component posteriors plus the sequence log-likelihood.
pub fn forward_backward(model: &Hmm, seq: &Sequence) -> Result<FbStats> {
    model.check_seq(seq)?;
    let (t_len, s, m) = (seq.len(), model.n_states(), model.n_mix());
    let Lattice {
        log_alpha,
        log_b,
        comp,
        log_likelihood: ll,
    } = forward(model, seq);
    if !ll.is_finite() {
        return Err(Error::Numerical(format!(
            "sequence '{}' has zero likelihood under the model",
            seq.id
        )));
    }
    let log_a = model.trans.map(ln);
    let mut log_beta = DMatrix::zeros(t_len, s);
    let mut buf = vec![0.0; s];
    for t in (0..t_len - 1).rev() {
        for i in 0..s {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = log_a[(i, j)] + log_b[(t + 1, j)] + log_beta[(t + 1, j)];
            }
            log_beta[(t, i)] = log_sum_exp(&buf);
        }
    }
    let mut gamma = DMatrix::zeros(t_len, s);
    for t in 0..t_len {
        for st in 0..s {
            buf[st] = log_alpha[(t, st)] + log_beta[(t, st)];
        }
        let norm = log_sum_exp(&buf);
        for st in 0..s {
            gamma[(t, st)] = (buf[st] - norm).exp();
        }
    }
    let mut xi = Vec::with_capacity(t_len.saturating_sub(1));
    let mut pair = vec![0.0; s * s];
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..s {
            for j in 0..s {
                pair[i * s + j] =
                    log_alpha[(t, i)] + log_a[(i, j)] + log_b[(t + 1, j)] + log_beta[(t + 1, j)];
            }
        }
        let norm = log_sum_exp(&pair);
        xi.push(DMatrix::from_fn(s, s, |i, j| (pair[i * s + j] - norm).exp()));
    }
    let mut mix_post = vec![0.0; t_len * s * m];
    for t in 0..t_len {
        for st in 0..s {
            let off = (t * s + st) * m;
            let lb = log_b[(t, st)];
            for k in 0..m {
                mix_post[off + k] = gamma[(t, st)] * (comp[off + k] - lb).exp();
            }
        }
    }
    Ok(FbStats {
        log_likelihood: ll,
        gamma,
        xi,
        mix_post,
    })
}

/// Draws a sequence of length `len`; deterministic in `seed`.
pub fn sample(model: &Hmm, len: usize, seed: u64) -> Result<Sequence> {
    if len == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.sample_with_rng(len, format!("sample-{seed}"), &mut rng))
}
