use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, LabelMap};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StapleConfig {
    /// Stop once `max_r |Δp_r| + |Δq_r|` falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StapleConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StapleResult {
    /// Per-pixel posterior probability of foreground.
    pub probability: Vec<f64>,
    #[serde(skip)]
    pub fused: Option<BinaryMask>,
    /// Per-rater sensitivity; `None` when there is no foreground to measure it on.
    pub sensitivity: Vec<Option<f64>>,
    /// Per-rater specificity; `None` when there is no background.
    pub specificity: Vec<Option<f64>>,
    pub prior: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Observed-data log-likelihood evaluated at each E-step.
    pub log_likelihood: Vec<f64>,
}

impl StapleResult {
    pub fn fused(&self) -> &BinaryMask {
        self.fused.as_ref().expect("set on construction")
    }
}

/// Distinct rater vote patterns and how many pixels show each.
struct Patterns {
    votes: Vec<Vec<bool>>,
    counts: Vec<f64>,
    index: Vec<usize>,
}

fn patterns(raters: &[BinaryMask]) -> Patterns {
    let n = raters[0].data().len();
    let mut map: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut index = Vec::with_capacity(n);
    let mut votes = Vec::new();
    let mut counts = Vec::new();
    for i in 0..n {
        let key: Vec<bool> = raters.iter().map(|r| r.data()[i]).collect();
        let next = votes.len();
        let id = *map.entry(key.clone()).or_insert(next);
        if id == next {
            votes.push(key);
            counts.push(0.0);
        }
        counts[id] += 1.0;
        index.push(id);
    }
    Patterns {
        votes,
        counts,
        index,
    }
}

/// Binary STAPLE by expectation maximisation with a global prior equal to the
/// mean rater foreground fraction. Starts from the soft majority vote.
pub fn staple_fuse(raters: &[BinaryMask], cfg: &StapleConfig) -> Result<StapleResult> {
    if raters.is_empty() {
        return Err(Error::Domain("STAPLE needs at least one rater".into()));
    }
    let dims = raters[0].dims();
    if raters.iter().any(|r| r.dims() != dims) {
        return Err(contract("STAPLE raters differ in size"));
    }
    let n_raters = raters.len();
    let n_px = dims.0 * dims.1;
    let pat = patterns(raters);
    let prior = raters.iter().map(|r| r.count()).sum::<usize>() as f64 / (n_raters * n_px) as f64;

    let finish = |w: Vec<f64>, p: Vec<Option<f64>>, q: Vec<Option<f64>>, it, conv, ll| {
        let probability: Vec<f64> = pat.index.iter().map(|&k| w[k]).collect();
        let fused = BinaryMask::new(dims.0, dims.1, probability.iter().map(|&v| v >= 0.5).collect())?;
        Ok(StapleResult {
            probability,
            fused: Some(fused),
            sensitivity: p,
            specificity: q,
            prior,
            iterations: it,
            converged: conv,
            log_likelihood: ll,
        })
    };

    if prior == 0.0 || prior == 1.0 {
        let w = vec![prior; pat.votes.len()];
        let (p, q) = if prior == 0.0 { (None, Some(1.0)) } else { (Some(1.0), None) };
        return finish(w, vec![p; n_raters], vec![q; n_raters], 0, true, Vec::new());
    }

    let mut w: Vec<f64> = pat
        .votes
        .iter()
        .map(|v| v.iter().filter(|&&b| b).count() as f64 / n_raters as f64)
        .collect();
    let mut p = vec![0.0; n_raters];
    let mut q = vec![0.0; n_raters];
    m_step(&pat, &w, &mut p, &mut q);

    let mut ll = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut total = 0.0;
        for (k, votes) in pat.votes.iter().enumerate() {
            let (mut a, mut b) = (prior, 1.0 - prior);
            for (r, &d) in votes.iter().enumerate() {
                if d {
                    a *= p[r];
                    b *= 1.0 - q[r];
                } else {
                    a *= 1.0 - p[r];
                    b *= q[r];
                }
            }
            w[k] = if a + b > 0.0 { a / (a + b) } else { prior };
            total += pat.counts[k] * (a + b).ln();
        }
        ll.push(total);
        let (old_p, old_q) = (p.clone(), q.clone());
        m_step(&pat, &w, &mut p, &mut q);
        let delta = (0..n_raters)
            .map(|r| (p[r] - old_p[r]).abs() + (q[r] - old_q[r]).abs())
            .fold(0.0, f64::max);
        if delta < cfg.tol {
            converged = true;
            break;
        }
    }
    finish(
        w,
        p.into_iter().map(Some).collect(),
        q.into_iter().map(Some).collect(),
        iterations,
        converged,
        ll,
    )
}

/// Re-estimates sensitivities and specificities; a rater keeps its previous
/// value when the weight it would be measured on is zero.
fn m_step(pat: &Patterns, w: &[f64], p: &mut [f64], q: &mut [f64]) {
    for r in 0..p.len() {
        let (mut tp, mut fg, mut tn, mut bg) = (0.0, 0.0, 0.0, 0.0);
        for (k, votes) in pat.votes.iter().enumerate() {
            let c = pat.counts[k];
            fg += c * w[k];
            bg += c * (1.0 - w[k]);
            if votes[r] {
                tp += c * w[k];
            } else {
                tn += c * (1.0 - w[k]);
            }
        }
        if fg > 0.0 {
            p[r] = tp / fg;
        }
        if bg > 0.0 {
            q[r] = tn / bg;
        }
    }
}

/// Per-class STAPLE result of a multi-class fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStaple {
    pub class: u8,
    #[serde(flatten)]
    pub result: StapleResult,
}

/// One-vs-rest STAPLE per foreground class; each pixel takes the class of
/// highest consensus probability among those at or above 0.5 (lowest index on
/// ties), otherwise background.
pub fn staple_multiclass(
    runs: &[LabelMap],
    num_classes: usize,
    cfg: &StapleConfig,
) -> Result<(LabelMap, Vec<ClassStaple>)> {
    if runs.is_empty() {
        return Err(Error::Domain("fusion needs at least one run".into()));
    }
    let (h, w) = runs[0].dims();
    let per_class = (1..num_classes as u8)
        .map(|c| {
            let raters: Vec<BinaryMask> = runs.iter().map(|r| r.binary(c)).collect();
            Ok(ClassStaple {
                class: c,
                result: staple_fuse(&raters, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = (0..h * w)
        .map(|i| {
            let mut best = (0u8, 0.5);
            for cs in &per_class {
                let v = cs.result.probability[i];
                if v >= 0.5 && (best.0 == 0 || v > best.1) {
                    best = (cs.class, v);
                }
            }
            best.0
        })
        .collect();
    Ok((LabelMap::new(h, w, data)?, per_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn unanimous_raters_are_exact() {
        let m = mask(&[1, 0, 1, 1, 0, 0]);
        let r = staple_fuse(&[m.clone(), m.clone(), m.clone()], &StapleConfig::default()).unwrap();
        assert_eq!(r.fused(), &m);
        assert!(r.converged);
        assert!(r.sensitivity.iter().all(|&p| p == Some(1.0)));
        assert!(r.specificity.iter().all(|&q| q == Some(1.0)));
    }

    #[test]
    fn single_rater_passes_through() {
        let m = mask(&[0, 1, 1, 0]);
        assert_eq!(staple_fuse(std::slice::from_ref(&m), &StapleConfig::default()).unwrap().fused(), &m);
    }

    #[test]
    fn empty_raters_flag_undefined_sensitivity() {
        let e = mask(&[0, 0, 0]);
        let r = staple_fuse(&[e.clone(), e.clone()], &StapleConfig::default()).unwrap();
        assert!(r.fused().is_empty());
        assert_eq!(r.sensitivity, vec![None, None]);
        assert!(matches!(staple_fuse(&[], &StapleConfig::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn dissenting_rater_is_outvoted() {
        let a = mask(&[1, 1, 0, 0, 1, 0, 0, 0]);
        let b = mask(&[1, 1, 1, 1, 1, 0, 0, 0]);
        let r = staple_fuse(&[a.clone(), a.clone(), b], &StapleConfig::default()).unwrap();
        assert_eq!(r.fused(), &a);
        assert!(r.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn multiclass_single_run_and_ties() {
        let run = LabelMap::new(2, 2, vec![0, 1, 2, 2]).unwrap();
        let (fused, classes) = staple_multiclass(std::slice::from_ref(&run), 3, &StapleConfig::default()).unwrap();
        assert_eq!(fused, run);
        assert_eq!(classes.len(), 2);
        let a = LabelMap::new(1, 1, vec![1]).unwrap();
        let b = LabelMap::new(1, 1, vec![2]).unwrap();
        // symmetric disagreement: both classes reach the same probability
        let (fused, cs) = staple_multiclass(&[a, b], 3, &StapleConfig::default()).unwrap();
        assert_eq!(cs[0].result.probability, cs[1].result.probability);
        let expect = if cs[0].result.probability[0] >= 0.5 { 1 } else { 0 };
        assert_eq!(fused.data(), &[expect]);
    }
}
