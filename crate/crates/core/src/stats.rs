//! Small-sample tests used by the experiment summaries.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{Error, Result};

/// Exact permutation p-values are used up to this sample size.
pub const EXACT_SPEARMAN_MAX_N: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: usize,
    /// Pairs with `a > b`.
    pub losses: usize,
    /// Tied pairs, dropped from the test.
    pub ties: usize,
    /// One-sided p-value for `P(a < b) > 1/2`.
    pub p_value: f64,
}

/// One-sided paired sign test of the hypothesis that `a` tends to be smaller than `b`.
pub fn sign_test_less(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!(
            "sign test needs equal non-empty samples, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.len() - wins - losses;
    let n = wins + losses;
    let p_value = if n == 0 {
        1.0
    } else {
        let dist = Binomial::new(0.5, n as u64).map_err(|e| Error::invalid(e.to_string()))?;
        // P(X >= wins)
        if wins == 0 {
            1.0
        } else {
            dist.sf(wins as u64 - 1)
        }
    };
    Ok(SignTest {
        wins,
        losses,
        ties,
        p_value,
    })
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman needs two equal samples of length >= 2"));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpearmanTest {
    pub rho: f64,
    /// One-sided p-value for a negative association.
    pub p_value: f64,
}

/// Spearman correlation with a one-sided p-value for `rho < 0`: exact over all
/// permutations for small samples, Student-t approximation otherwise.
pub fn spearman_negative(x: &[f64], y: &[f64]) -> Result<SpearmanTest> {
    let rho = spearman_rho(x, y)?;
    let n = x.len();
    let p_value = if n <= EXACT_SPEARMAN_MAX_N {
        let rx = ranks(x);
        let ry = ranks(y);
        let perms = permutations(n);
        let hits = perms
            .iter()
            .filter(|p| {
                let permuted: Vec<f64> = p.iter().map(|&i| ry[i]).collect();
                pearson(&rx, &permuted) <= rho + 1e-12
            })
            .count();
        hits as f64 / perms.len() as f64
    } else if rho.abs() >= 1.0 {
        if rho < 0.0 {
            0.0
        } else {
            1.0
        }
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::invalid(e.to_string()))?
            .cdf(t)
    };
    Ok(SpearmanTest { rho, p_value })
}
