//! Descriptive statistics, one-way ANOVA and Tukey HSD.
//!
//! The studentized range distribution is evaluated by direct numerical
//! integration:
//!
//! ```text
//! P(Q <= q; k, v) = ∫ f_s(s) W(q s; k) ds
//! W(w; k)         = k ∫ φ(z) [Φ(z) - Φ(z - w)]^(k-1) dz
//! ```
//!
//! where `s = sqrt(χ²_v / v)`. Both integrals use composite Simpson rules on
//! truncated ranges, good to about six decimals for the `k` and `v` met in
//! practice.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, Normal};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} groups, got {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("group {index} has {len} samples; at least 2 are required")]
    GroupTooSmall { index: usize, len: usize },
    #[error("non-finite observation in group {index}")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation (divides by n).
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Sample standard deviation (divides by n - 1); zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; NaN when either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub ss_between: f64,
    pub ss_within: f64,
    /// Zero within-group variance with differing means.
    pub degenerate: bool,
}

impl AnovaResult {
    pub fn ms_within(&self) -> f64 {
        self.ss_within / self.df_within as f64
    }
}

fn check_groups(groups: &[&[f64]]) -> Result<(), StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups { needed: 2, got: groups.len() });
    }
    for (index, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(StatsError::GroupTooSmall { index, len: g.len() });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(StatsError::NonFinite { index });
        }
    }
    Ok(())
}

pub fn one_way_anova(groups: &[&[f64]]) -> Result<AnovaResult, StatsError> {
    check_groups(groups)?;
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let k = groups.len();
    let grand = groups.iter().flat_map(|g| g.iter()).sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = mean(g);
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let (df_between, df_within) = (k - 1, n - k);
    let ms_between = ss_between / df_between as f64;
    let ms_within = ss_within / df_within as f64;
    let scale = groups
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |a, x| a.max(x.abs()))
        .max(1.0);
    let negligible = |ss: f64| ss <= (scale * 1e-12).powi(2) * n as f64;

    let (f, p, degenerate) = if negligible(ss_within) {
        if negligible(ss_between) {
            (0.0, 1.0, false)
        } else {
            (f64::INFINITY, 0.0, true)
        }
    } else if negligible(ss_between) {
        (0.0, 1.0, false)
    } else {
        let f = ms_between / ms_within;
        let dist = FisherSnedecor::new(df_between as f64, df_within as f64)
            .map_err(|e| StatsError::Invalid(e.to_string()))?;
        (f, dist.sf(f), false)
    };
    Ok(AnovaResult {
        f,
        p,
        df_between,
        df_within,
        ss_between,
        ss_within,
        degenerate,
    })
}

fn simpson(a: f64, b: f64, intervals: usize, f: impl Fn(f64) -> f64) -> f64 {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    acc * h / 3.0
}

/// Probability that the range of `k` standard normals is at most `w`.
fn normal_range_cdf(w: f64, k: usize, std_normal: &Normal) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let k_f = k as f64;
    let inner = simpson(-8.5, 8.5, 240, |z| {
        let d = std_normal.cdf(z) - std_normal.cdf(z - w);
        if d <= 0.0 {
            0.0
        } else {
            (-0.5 * z * z).exp() * d.powf(k_f - 1.0)
        }
    });
    (k_f * inner / (2.0 * std::f64::consts::PI).sqrt()).clamp(0.0, 1.0)
}

/// CDF of the studentized range for `k` means and `df` error degrees of
/// freedom. `df = f64::INFINITY` gives the normal-range limit.
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    assert!(k >= 2, "studentized range needs k >= 2");
    assert!(df >= 1.0, "studentized range needs df >= 1");
    if q <= 0.0 || q.is_nan() {
        return 0.0;
    }
    if q.is_infinite() {
        return 1.0;
    }
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    if df > 25_000.0 {
        return normal_range_cdf(q, k, &std_normal);
    }
    // Density of s = sqrt(chi2_df / df).
    let half = df / 2.0;
    let log_norm = half * df.ln() - ln_gamma(half) - (half - 1.0) * std::f64::consts::LN_2;
    let density = |s: f64| {
        if s <= 0.0 {
            0.0
        } else {
            (log_norm + (df - 1.0) * s.ln() - 0.5 * df * s * s).exp()
        }
    };
    let spread = 1.0 / (2.0 * df).sqrt();
    let lo = (1.0 - 14.0 * spread).max(0.0);
    let hi = 1.0 + 14.0 * spread + if df < 4.0 { 6.0 } else { 0.0 };
    let p = simpson(lo, hi, 320, |s| {
        let d = density(s);
        if d < 1e-300 {
            0.0
        } else {
            d * normal_range_cdf(q * s, k, &std_normal)
        }
    });
    p.clamp(0.0, 1.0)
}

/// Quantile of the studentized range by bisection on [`ptukey`].
pub fn qtukey(p: f64, k: usize, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&p), "probability must lie in [0, 1)");
    if p == 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while ptukey(hi, k, df) < p {
        hi *= 2.0;
        if hi > 1e4 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ptukey(mid, k, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyComparison {
    pub a: usize,
    pub b: usize,
    /// mean(b) - mean(a)
    pub mean_diff: f64,
    pub q: f64,
    pub p_adj: f64,
    pub lower: f64,
    pub upper: f64,
    pub reject: bool,
}

/// Tukey–Kramer pairwise comparisons at family-wise level `alpha`.
pub fn tukey_hsd(groups: &[&[f64]], alpha: f64) -> Result<Vec<TukeyComparison>, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let anova = one_way_anova(groups)?;
    let k = groups.len();
    let df = anova.df_within as f64;
    let msw = anova.ms_within();
    let q_crit = qtukey(1.0 - alpha, k, df);
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let mut out = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let diff = means[b] - means[a];
            let se = (msw / 2.0 * (1.0 / groups[a].len() as f64 + 1.0 / groups[b].len() as f64)).sqrt();
            let (q, p_adj) = if se > 0.0 {
                let q = diff.abs() / se;
                (q, 1.0 - ptukey(q, k, df))
            } else if diff == 0.0 {
                (0.0, 1.0)
            } else {
                (f64::INFINITY, 0.0)
            };
            let half_width = q_crit * se;
            out.push(TukeyComparison {
                a,
                b,
                mean_diff: diff,
                q,
                p_adj: p_adj.clamp(0.0, 1.0),
                lower: diff - half_width,
                upper: diff + half_width,
                reject: p_adj <= alpha,
            });
        }
    }
    Ok(out)
}

/// `**` for p ≤ 0.01, `*` for p ≤ 0.05, empty otherwise.
pub fn significance_stars(p: f64) -> &'static str {
    if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}
