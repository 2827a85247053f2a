//! Significance testing: paired t-test, Mann-Whitney U, Bonferroni
//! correction and pairwise comparison grids.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::write_atomic;

/// Family-wise significance level before correction.
pub const FAMILY_ALPHA: f64 = 0.05;

/// Below this smaller-group size the U test enumerates exactly.
pub const MWU_EXACT_BELOW: usize = 8;
/// The exact path is also limited to this many pooled observations.
pub const MWU_EXACT_MAX_TOTAL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Set when the differences have zero variance; `p` is then 1.
    pub degenerate: bool,
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Two-sided paired Student's t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Input(format!(
            "paired t-test needs equal lengths >= 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_finite("a", a)?;
    check_finite("b", b)?;
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let df = n - 1.0;
    if !(var > 0.0) {
        return Ok(TTestResult { t: f64::NAN, df, p: 1.0, degenerate: true });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Input(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTestResult { t, df, p, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitneyResult {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Whether the exact permutation distribution was used.
    pub exact: bool,
}

/// Mid-ranks (1-based, ties averaged) of the pooled sample, doubled so they
/// are integers, plus the tie-group sizes.
fn doubled_midranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 average to (i+j+2)/2; doubled that is i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sided Mann-Whitney U test. Exact (conditional on ties) when the
/// smaller sample has fewer than [`MWU_EXACT_BELOW`] observations; otherwise
/// the tie-corrected normal approximation with continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Mann-Whitney U needs two non-empty samples".into()));
    }
    check_finite("a", a)?;
    check_finite("b", b)?;
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_midranks(&pooled);
    let w2: u64 = ranks[..n1].iter().sum();
    let u = w2 as f64 / 2.0 - (n1 * (n1 + 1)) as f64 / 2.0;

    if n1.min(n2) < MWU_EXACT_BELOW && n1 + n2 <= MWU_EXACT_MAX_TOTAL {
        // Whichever sample is smaller is enumerated; the rank-sum of `a` and
        // that of `b` are in one-to-one correspondence, so tails carry over.
        let (k, w) = if n1 <= n2 { (n1, w2) } else { (n2, ranks[n1..].iter().sum()) };
        let dist = exact_rank_sum_distribution(&ranks, k);
        let total: f64 = dist.iter().sum();
        let lower: f64 = dist[..=w as usize].iter().sum::<f64>() / total;
        let upper: f64 = dist[w as usize..].iter().sum::<f64>() / total;
        let p = (2.0 * lower.min(upper)).min(1.0);
        return Ok(MannWhitneyResult { u, p, exact: true });
    }

    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let n = n1f + n2f;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / (n * (n - 1.0));
    let var = n1f * n2f / 12.0 * ((n + 1.0) - tie_term);
    if !(var > 0.0) {
        return Ok(MannWhitneyResult { u, p: 1.0, exact: false });
    }
    let mu = n1f * n2f / 2.0;
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    // Two-sided normal tail: 2 * (1 - Phi(z)) = erfc(z / sqrt 2).
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(MannWhitneyResult { u, p, exact: false })
}

/// Counts of each doubled-rank sum over all `k`-subsets of `ranks`.
fn exact_rank_sum_distribution(ranks: &[u64], k: usize) -> Vec<f64> {
    let max_sum: u64 = {
        let mut r = ranks.to_vec();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r[..k].iter().sum()
    };
    let width = max_sum as usize + 1;
    // dp[j][s]: number of j-subsets of the ranks seen so far summing to s.
    let mut dp = vec![vec![0.0f64; width]; k + 1];
    dp[0][0] = 1.0;
    for &r in ranks {
        let r = r as usize;
        for j in (1..=k).rev() {
            let (lo, hi) = dp.split_at_mut(j);
            let prev = &lo[j - 1];
            let cur = &mut hi[0];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    dp.swap_remove(k)
}

/// Multiply each p-value by `m`, clamping at 1.
pub fn bonferroni(pvals: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < 1 {
        return Err(Error::Input("Bonferroni comparison count must be >= 1".into()));
    }
    Ok(pvals.iter().map(|p| (p * m as f64).min(1.0)).collect())
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("pearson needs two equal-length samples of size >= 2".into()));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Input("pearson is undefined for a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// The row setting is significantly higher than the column setting.
    Greater,
    Less,
    #[serde(rename = "n.s.")]
    NotSignificant,
}

impl Direction {
    pub fn symbol(self) -> &'static str {
        match self {
            Direction::Greater => "✓",
            Direction::Less => "✗",
            Direction::NotSignificant => "n.s.",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonGrid {
    pub labels: Vec<String>,
    /// Bonferroni-corrected p-values; the diagonal is 1.
    pub pvals: Vec<Vec<f64>>,
    pub direction: Vec<Vec<Direction>>,
    /// Per-comparison significance level, `0.05 / m`.
    pub alpha: f64,
    /// Number of comparisons `m = k (k - 1) / 2`.
    pub comparisons: usize,
    pub paired: bool,
    /// Pairs whose paired test was degenerate (zero-variance differences).
    pub degenerate: Vec<(usize, usize)>,
}

/// Test every pair of settings and correct over `k (k - 1) / 2`
/// comparisons. `paired` uses the paired t-test (repeat `i` of one setting is
/// paired with repeat `i` of the other); otherwise Mann-Whitney U.
pub fn significance_grid(results: &[(String, Vec<f64>)], paired: bool) -> Result<ComparisonGrid> {
    let k = results.len();
    if k < 2 {
        return Err(Error::Input("a significance grid needs at least two settings".into()));
    }
    if paired {
        let n = results[0].1.len();
        if let Some((name, v)) = results.iter().find(|(_, v)| v.len() != n) {
            return Err(Error::Input(format!(
                "paired grid needs equal-length vectors; {name} has {} vs {n}",
                v.len()
            )));
        }
    }
    let m = k * (k - 1) / 2;
    let alpha = FAMILY_ALPHA / m as f64;
    let mut pvals = vec![vec![1.0; k]; k];
    let mut direction = vec![vec![Direction::NotSignificant; k]; k];
    let mut degenerate = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&results[i].1, &results[j].1);
            let raw = if paired {
                let r = paired_t_test(a, b)?;
                if r.degenerate {
                    degenerate.push((i, j));
                }
                r.p
            } else {
                mann_whitney_u(a, b)?.p
            };
            let p = bonferroni(&[raw], m)?[0];
            pvals[i][j] = p;
            pvals[j][i] = p;
            if raw < alpha {
                let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                let (d_ij, d_ji) = if mean(a) > mean(b) {
                    (Direction::Greater, Direction::Less)
                } else {
                    (Direction::Less, Direction::Greater)
                };
                direction[i][j] = d_ij;
                direction[j][i] = d_ji;
            }
        }
    }
    Ok(ComparisonGrid {
        labels: results.iter().map(|(n, _)| n.clone()).collect(),
        pvals,
        direction,
        alpha,
        comparisons: m,
        paired,
        degenerate,
    })
}

impl ComparisonGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.pvals) {
            out.push_str(l);
            for p in row {
                let _ = write!(out, ",{p:.6e}");
            }
            out.push('\n');
        }
        out
    }

    /// Plain-text table of ✓ / ✗ / n.s. marks (row vs column).
    pub fn render_table(&self) -> String {
        let w = self.labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max(4);
        let mut out = format!("{:w$}", "");
        for l in &self.labels {
            let _ = write!(out, " | {l:^w$}");
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            let _ = write!(out, "{l:w$}");
            for j in 0..self.labels.len() {
                let mark = if i == j { "-" } else { self.direction[i][j].symbol() };
                let _ = write!(out, " | {mark:^w$}");
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "{} comparisons, corrected alpha = {:.1e} ({})",
            self.comparisons,
            self.alpha,
            if self.paired { "paired t-test" } else { "Mann-Whitney U" }
        );
        out
    }

    pub fn write(&self, csv_path: &Path, table_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        write_atomic(table_path, self.render_table().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_test_degenerate_cases() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert!(r.degenerate && r.p == 1.0);
        let b = [2.0, 3.0, 4.0, 5.0, 6.0];
        assert!(paired_t_test(&a, &b).unwrap().degenerate);
        assert!(paired_t_test(&a, &b[..4]).is_err());
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn t_test_known_value() {
        // d = (1, 2, 3, 4): mean 2.5, sd sqrt(5/3), t = 3.8730, df 3 -> p = 0.030466.
        let r = paired_t_test(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r.t - 3.872_983_346).abs() < 1e-8);
        assert!((r.p - 0.030_466).abs() < 1e-5, "{}", r.p);
    }

    #[test]
    fn mwu_examples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert!(r.exact);
        assert!((r.p - 0.1).abs() < 1e-12);
        assert_eq!(r.u, 0.0);
        let same = [1.0, 2.0, 2.0, 5.0];
        assert!((mann_whitney_u(&same, &same).unwrap().p - 1.0).abs() < 1e-12);
        let big: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert!(!r.exact && r.p > 0.95);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn mwu_all_tied() {
        let r = mann_whitney_u(&[1.0; 10], &[1.0; 12]).unwrap();
        assert_eq!(r.p, 1.0);
        let r = mann_whitney_u(&[1.0; 3], &[1.0; 2]).unwrap();
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn mwu_unbalanced_exact_uses_smaller_side() {
        let a = [0.5, 9.0, 9.5, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0];
        let b = [1.0, 2.0];
        let ab = mann_whitney_u(&a, &b).unwrap();
        let ba = mann_whitney_u(&b, &a).unwrap();
        assert!(ab.exact && ba.exact);
        assert!((ab.p - ba.p).abs() < 1e-12);
    }

    #[test]
    fn bonferroni_examples() {
        let r = bonferroni(&[0.01, 0.04], 2).unwrap();
        assert!((r[0] - 0.02).abs() < 1e-15 && (r[1] - 0.08).abs() < 1e-15);
        assert_eq!(bonferroni(&[0.9], 5).unwrap(), vec![1.0]);
        assert_eq!(bonferroni(&[0.3, 0.7], 1).unwrap(), vec![0.3, 0.7]);
        assert!(bonferroni(&[0.1], 0).is_err());
    }

    #[test]
    fn grid_basics() {
        let v = vec![0.5, 0.6, 0.55, 0.52, 0.58];
        let g = significance_grid(&[("a".into(), v.clone()), ("b".into(), v.clone())], true).unwrap();
        assert_eq!(g.comparisons, 1);
        assert_eq!(g.direction[0][1], Direction::NotSignificant);
        assert_eq!(g.degenerate, vec![(0, 1)]);

        let hi: Vec<f64> = v.iter().enumerate().map(|(i, x)| x + 0.3 + 0.01 * i as f64).collect();
        let lo: Vec<f64> = v.iter().map(|x| x - 0.3).collect();
        let g = significance_grid(
            &[("hi".into(), hi), ("mid".into(), v.clone()), ("lo".into(), lo)],
            true,
        )
        .unwrap();
        assert_eq!(g.comparisons, 3);
        assert!((g.alpha - 0.05 / 3.0).abs() < 1e-15);
        assert_eq!(g.direction[0][1], Direction::Greater);
        assert_eq!(g.direction[1][0], Direction::Less);
        for i in 0..3 {
            assert_eq!(g.pvals[i][i], 1.0);
            assert_eq!(g.direction[i][i], Direction::NotSignificant);
            for j in 0..3 {
                assert_eq!(g.pvals[i][j], g.pvals[j][i]);
            }
        }
        assert!(g.render_table().contains('✓'));
        assert_eq!(g.to_csv().lines().count(), 4);

        assert!(significance_grid(&[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![1.0])], true).is_err());
        assert!(significance_grid(&[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![1.0])], false).is_ok());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }
}
