//! Multi-level clustering of HMMs, clustering metrics, and the synthetic noisy-copy benchmark.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, Gmm};
use crate::h3m_em::{shem_h3m, H3m};
use crate::hmm::{baum_welch, FitConfig, Hmm, Sequence};
use crate::seed::{derive_seed, rng_for};
use crate::vhem::{hmm_pair_estep, vhem_reduce, VhemConfig};

/// One level of a hierarchy.
#[derive(Clone, Debug)]
pub struct Level {
    pub model: H3m,
    /// Cluster at this level for every component of the previous level.
    /// For the first level this is the identity.
    pub assignments: Vec<usize>,
    /// Final bound of the reduction that produced this level; `None` for the first level.
    pub bound: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
}

impl Hierarchy {
    /// Cluster at `level` of every input HMM, composing the per-level maps.
    pub fn input_assignments(&self, level: usize) -> Vec<usize> {
        let mut labels = self.levels[0].assignments.clone();
        for l in &self.levels[1..=level] {
            labels.iter_mut().for_each(|x| *x = l.assignments[*x]);
        }
        labels
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.model.n_components()).collect()
    }
}

/// Recursively reduces `inputs` to each size in `level_sizes` with VHEM.
///
/// The first level holds the inputs with equal weights. When `level_sizes[0]` is smaller than
/// the number of inputs, the input level is added in front of the requested ones.
pub fn build_hierarchy(inputs: &[Hmm], level_sizes: &[usize], cfg: &VhemConfig) -> Result<Hierarchy> {
    if inputs.is_empty() {
        return Err(Error::invalid("at least one input HMM is required"));
    }
    if level_sizes.is_empty() {
        return Err(Error::invalid("at least one level size is required"));
    }
    if level_sizes[0] > inputs.len() {
        return Err(Error::invalid(format!(
            "first level size {} exceeds the {} inputs",
            level_sizes[0],
            inputs.len()
        )));
    }
    if level_sizes.windows(2).any(|w| w[1] >= w[0]) || level_sizes.contains(&0) {
        return Err(Error::invalid("level sizes must be positive and strictly decreasing"));
    }
    let mut sizes = level_sizes.to_vec();
    if sizes[0] < inputs.len() {
        sizes.insert(0, inputs.len());
    }
    let first = H3m::uniform(inputs.to_vec())?;
    let mut levels = vec![Level {
        model: first,
        assignments: (0..inputs.len()).collect(),
        bound: None,
    }];
    for (l, &k) in sizes.iter().enumerate().skip(1) {
        let prev = &levels[l - 1].model;
        let level_cfg = VhemConfig {
            k_r: k,
            seed: derive_seed(cfg.seed, &[l as u64]),
            ..cfg.clone()
        };
        let out = vhem_reduce(prev, &level_cfg)?;
        if !out.result.is_surjective() {
            return Err(Error::Numerical(format!(
                "level {} left some of its {k} clusters empty",
                l + 1
            )));
        }
        levels.push(Level {
            model: out.result.centers,
            assignments: out.result.assignments,
            bound: Some(out.state.bound()),
        });
    }
    Ok(Hierarchy { levels })
}

/// Pair-counting Rand index between two labelings of the same items.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "labelings cover {} and {} items",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (n * (n - 1) / 2) as f64)
}

/// Sum over inputs of the expected log-likelihood bound under the assigned center.
pub fn clustering_expected_ll(
    inputs: &[Hmm],
    centers: &H3m,
    assignments: &[usize],
    tau: usize,
) -> Result<f64> {
    if inputs.len() != assignments.len() {
        return Err(Error::invalid(format!(
            "{} inputs but {} assignments",
            inputs.len(),
            assignments.len()
        )));
    }
    if let Some(&j) = assignments.iter().find(|&&j| j >= centers.n_components()) {
        return Err(Error::invalid(format!("assignment to missing center {j}")));
    }
    let values = inputs
        .par_iter()
        .zip(assignments.par_iter())
        .map(|(h, &j)| hmm_pair_estep(h, &centers.components()[j], tau).map(|p| p.l_hmm))
        .collect::<Result<Vec<_>>>()?;
    Ok(values.iter().sum())
}

/// Center with the largest expected log-likelihood bound for every input.
pub fn most_likely_centers(inputs: &[Hmm], centers: &H3m, tau: usize) -> Result<Vec<usize>> {
    inputs
        .par_iter()
        .map(|h| {
            let mut best = (f64::NEG_INFINITY, 0);
            for (j, c) in centers.components().iter().enumerate() {
                let l = hmm_pair_estep(h, c, tau)?.l_hmm;
                if l > best.0 {
                    best = (l, j);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Which emission parameter separates the original HMMs of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    MeansDiffer,
    VariancesDiffer,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::MeansDiffer => "means",
            Scenario::VariancesDiffer => "variances",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "means" | "a" => Ok(Scenario::MeansDiffer),
            "variances" | "b" => Ok(Scenario::VariancesDiffer),
            _ => Err(Error::invalid(format!(
                "unknown scenario '{s}' (expected means or variances)"
            ))),
        }
    }
}

const ORIGINAL_TRANS: [f64; 9] = [0.8, 0.1, 0.1, 0.2, 0.8, 0.0, 0.0, 0.2, 0.8];
const MEANS_A: [[f64; 3]; 4] = [[1.0, 2.0, 3.0], [3.0, 2.0, 1.0], [1.0, 2.0, 2.0], [1.0, 3.0, 3.0]];
const VAR_A: f64 = 0.5;
const MEANS_B: [f64; 3] = [1.0, 2.0, 3.0];
const VARS_B: [f64; 4] = [0.5, 0.1, 1.0, 0.05];

/// The four 3-state univariate source HMMs of a scenario.
pub fn synth_originals(scenario: Scenario) -> Vec<Hmm> {
    (0..4)
        .map(|c| {
            let (means, var) = match scenario {
                Scenario::MeansDiffer => (MEANS_A[c], VAR_A),
                Scenario::VariancesDiffer => (MEANS_B, VARS_B[c]),
            };
            let emissions = means
                .iter()
                .map(|&m| Gmm::single(Gaussian::univariate(m, var).expect("valid table entry")))
                .collect();
            Hmm::new(
                vec![1.0 / 3.0; 3],
                DMatrix::from_row_slice(3, 3, &ORIGINAL_TRANS),
                emissions,
            )
            .expect("valid table entry")
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    /// Number of source HMMs, at most 4.
    pub c: usize,
    /// Noisy copies per source HMM.
    pub k: usize,
    /// Variance of the observation noise.
    pub sigma_n2: f64,
    /// Length of the sequence each copy is fitted on.
    pub t_len: usize,
    pub scenario: Scenario,
}

impl SynthSpec {
    pub fn new(scenario: Scenario, k: usize, sigma_n2: f64) -> Self {
        Self {
            c: 4,
            k,
            sigma_n2,
            t_len: 100,
            scenario,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.c) {
            return Err(Error::invalid("the benchmark has between 2 and 4 source HMMs"));
        }
        if self.k == 0 || self.t_len == 0 {
            return Err(Error::invalid("copies and sequence length must be at least 1"));
        }
        if !(self.sigma_n2 > 0.0) || !self.sigma_n2.is_finite() {
            return Err(Error::invalid("noise variance must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthData {
    /// Noisy copies, grouped by source: copy `k` of source `c` sits at `c * K + k`.
    pub hmms: Vec<Hmm>,
    /// Source index of every copy.
    pub labels: Vec<usize>,
    pub originals: Vec<Hmm>,
}

/// Fits every noisy copy on a noise-corrupted sample of its source.
///
/// The copies keep the sources' uniform initial distribution: re-estimating it from a single
/// sequence would put all its mass on the state of the first frame.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    let cfg = FitConfig {
        fixed_initial: true,
        ..FitConfig::default()
    };
    synth_generate_with(spec, seed, &cfg)
}

/// [`synth_generate`] with explicit Baum-Welch settings for the copies.
pub fn synth_generate_with(spec: &SynthSpec, seed: u64, fit_cfg: &FitConfig) -> Result<SynthData> {
    spec.validate()?;
    let originals: Vec<Hmm> = synth_originals(spec.scenario).into_iter().take(spec.c).collect();
    let noise = Normal::new(0.0, spec.sigma_n2.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let hmms = (0..spec.c * spec.k)
        .into_par_iter()
        .map(|n| {
            let (c, k) = (n / spec.k, n % spec.k);
            let mut rng = rng_for(seed, &[c as u64, k as u64]);
            let clean = originals[c].sample_with_rng(spec.t_len, format!("c{c}-k{k}"), &mut rng);
            let frames = clean
                .frames
                .into_iter()
                .map(|f| f.map(|v| v + noise.sample(&mut rng)))
                .collect();
            let seq = Sequence::new(clean.id, frames)?;
            Ok(baum_welch(&[seq], 3, 1, fit_cfg)?.model)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = (0..spec.c * spec.k).map(|n| n / spec.k).collect();
    Ok(SynthData {
        hmms,
        labels,
        originals,
    })
}

/// Clustering algorithm compared in the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Vhem,
    Shem,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Vhem => "vhem",
            Method::Shem => "shem",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vhem" => Ok(Method::Vhem),
            "shem" => Ok(Method::Shem),
            _ => Err(Error::invalid(format!("unknown method '{s}' (expected vhem or shem)"))),
        }
    }
}

/// Outcome of clustering one set of HMMs.
#[derive(Clone, Debug)]
pub struct ClusteringReport {
    pub method: Method,
    pub rand_index: f64,
    /// Bound-based expected log-likelihood of the source HMMs under their most likely centers.
    pub expected_ll: f64,
    pub assignments: Vec<usize>,
    pub seconds: f64,
}

/// Settings shared by every cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub scenario: Scenario,
    pub ks: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    /// VHEM settings; `k_r` is replaced by the number of sources.
    pub vhem: VhemConfig,
    /// Sampled sequences per input HMM for SHEM.
    pub shem_per_input: usize,
    pub shem_t_sample: usize,
    pub shem_fit: FitConfig,
}

impl SweepConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            ks: vec![2, 4, 8, 16, 32],
            sigmas: vec![0.1, 0.5, 1.0],
            trials: 10,
            seed: 0,
            methods: vec![Method::Vhem, Method::Shem],
            vhem: VhemConfig::new(4),
            shem_per_input: 10,
            shem_t_sample: 10,
            shem_fit: FitConfig::default(),
        }
    }
}

/// Clusters the copies of one benchmark draw into as many groups as there are sources.
pub fn cluster_synth(data: &SynthData, method: Method, cfg: &SweepConfig, seed: u64) -> Result<ClusteringReport> {
    let start = Instant::now();
    let base = H3m::uniform(data.hmms.clone())?;
    let c = data.originals.len();
    let (centers, assignments) = match method {
        Method::Vhem => {
            let vcfg = VhemConfig {
                k_r: c,
                seed,
                ..cfg.vhem.clone()
            };
            let out = vhem_reduce(&base, &vcfg)?;
            (out.result.centers, out.result.assignments)
        }
        Method::Shem => {
            let n = cfg.shem_per_input * base.n_components();
            let fit = shem_h3m(&base, c, n, cfg.shem_t_sample, &cfg.shem_fit, seed)?;
            (fit.model, fit.assignments)
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    let tau = cfg.vhem.tau;
    let nearest = most_likely_centers(&data.originals, &centers, tau)?;
    Ok(ClusteringReport {
        method,
        rand_index: rand_index(&assignments, &data.labels)?,
        expected_ll: clustering_expected_ll(&data.originals, &centers, &nearest, tau)?,
        assignments,
        seconds,
    })
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub scenario: Scenario,
    pub k: usize,
    pub sigma_n2: f64,
    pub trial: usize,
    pub report: ClusteringReport,
}

/// Runs every (K, noise, trial) cell and method. Row order is fixed by the grid, not by scheduling.
///
/// Each cell's data depends only on the master seed and its own (K, noise, trial), so cells
/// give the same numbers whatever else is in the grid.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    for &k in &cfg.ks {
        for &s in &cfg.sigmas {
            for t in 0..cfg.trials {
                cells.push((k, s, t));
            }
        }
    }
    let per_cell = cells
        .par_iter()
        .map(|&(k, s, t)| {
            let cell = [k as u64, s.to_bits(), t as u64];
            let data_seed = derive_seed(cfg.seed, &[0, cell[0], cell[1], cell[2]]);
            let spec = SynthSpec::new(cfg.scenario, k, s);
            let data = synth_generate(&spec, data_seed)?;
            cfg.methods
                .iter()
                .enumerate()
                .map(|(mi, &m)| {
                    let seed = derive_seed(cfg.seed, &[1 + mi as u64, cell[0], cell[1], cell[2]]);
                    Ok(SweepRow {
                        scenario: cfg.scenario,
                        k,
                        sigma_n2: s,
                        trial: t,
                        report: cluster_synth(&data, m, cfg, seed)?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    // Method-major order: all rows of the first method, then the next.
    let mut rows = Vec::with_capacity(per_cell.len() * cfg.methods.len());
    for mi in 0..cfg.methods.len() {
        rows.extend(per_cell.iter().map(|r| r[mi].clone()));
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str = "method,scenario,K,sigma_n2,trial,rand,expected_ll,seconds";

/// Writes sweep rows as CSV. Wall times are left empty unless `timings` is set, so that
/// runs with the same seed produce identical bytes.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W, timings: bool) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        let secs = if timings {
            format!("{:.3}", r.report.seconds)
        } else {
            String::new()
        };
        writeln!(
            out,
            "{},{},{},{},{},{:.16e},{:.16e},{}",
            r.report.method,
            r.scenario,
            r.k,
            r.sigma_n2,
            r.trial,
            r.report.rand_index,
            r.report.expected_ll,
            secs
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rand_index_small_cases() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert!((rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(rand_index(&[0, 1, 2], &[0, 0, 0]).unwrap(), 0.0);
        assert!(rand_index(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn scenario_tables() {
        let a = synth_originals(Scenario::MeansDiffer);
        let means: Vec<Vec<f64>> = a
            .iter()
            .map(|h| h.emissions().iter().map(|g| g.components()[0].mean()[0]).collect())
            .collect();
        assert_eq!(means, vec![vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0], vec![1.0, 2.0, 2.0], vec![1.0, 3.0, 3.0]]);
        let b = synth_originals(Scenario::VariancesDiffer);
        let vars: Vec<f64> = b.iter().map(|h| h.emissions()[0].components()[0].cov()[(0, 0)]).collect();
        assert_eq!(vars, vec![0.5, 0.1, 1.0, 0.05]);
        assert_eq!(b[2].trans()[(1, 2)], 0.0);
    }

    #[test]
    fn csv_header_and_blank_timings() {
        let row = SweepRow {
            scenario: Scenario::MeansDiffer,
            k: 2,
            sigma_n2: 0.1,
            trial: 0,
            report: ClusteringReport {
                method: Method::Vhem,
                rand_index: 1.0,
                expected_ll: -12.5,
                assignments: vec![],
                seconds: 3.0,
            },
        };
        let mut buf = Vec::new();
        write_sweep_csv(std::slice::from_ref(&row), &mut buf, false).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert!(lines[1].starts_with("vhem,means,2,0.1,0,"));
        assert!(lines[1].ends_with(','));
    }
}
