//! Paired summary statistics: Diff%, ordinary least squares, Bland–Altman
//! limits of agreement, and the paired t-test with an exact Student-t CDF
//! evaluated through the regularized incomplete beta function.

use super::{MetricsError, Result};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for a single value.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Mean over subjects of `(gen - orig) / orig * 100`. Subjects with a zero
/// original value are excluded and counted; returns `None` when nothing
/// remains.
pub fn diff_percent(orig: &[f64], gen: &[f64]) -> (Option<f64>, usize) {
    assert_eq!(orig.len(), gen.len());
    let mut acc = 0.0;
    let mut n = 0usize;
    let mut excluded = 0usize;
    for (&o, &g) in orig.iter().zip(gen) {
        if o == 0.0 {
            excluded += 1;
        } else {
            acc += (g - o) / o * 100.0;
            n += 1;
        }
    }
    if n == 0 {
        (None, excluded)
    } else {
        (Some(acc / n as f64), excluded)
    }
}

/// Ordinary least squares of generated on original: slope, plus R² as the
/// squared Pearson correlation.
pub fn ols_slope_r2(orig: &[f64], gen: &[f64]) -> Result<(f64, f64)> {
    assert_eq!(orig.len(), gen.len());
    let n = orig.len();
    if n < 3 {
        return Err(MetricsError::TooFewSubjects { needed: 3, got: n });
    }
    let mx = mean(orig);
    let my = mean(gen);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in orig.iter().zip(gen) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(MetricsError::ZeroVariance("original values"));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        // a constant generated series: correlation undefined, report 0
        0.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok((slope, r2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
    pub sd_diff: f64,
}

/// Bias and 1.96-sigma limits of agreement of `gen - orig`.
pub fn bland_altman(orig: &[f64], gen: &[f64]) -> Result<BlandAltman> {
    assert_eq!(orig.len(), gen.len());
    if orig.len() < 2 {
        return Err(MetricsError::TooFewSubjects { needed: 2, got: orig.len() });
    }
    let diffs: Vec<f64> = orig.iter().zip(gen).map(|(&o, &g)| g - o).collect();
    let bias = mean(&diffs);
    let sd = sample_sd(&diffs);
    Ok(BlandAltman { bias, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd, sd_diff: sd })
}

/// Two-sided paired t-test on `gen - orig`.
pub fn paired_t_test(orig: &[f64], gen: &[f64]) -> Result<(f64, f64)> {
    assert_eq!(orig.len(), gen.len());
    let n = orig.len();
    if n < 2 {
        return Err(MetricsError::TooFewSubjects { needed: 2, got: n });
    }
    let diffs: Vec<f64> = orig.iter().zip(gen).map(|(&o, &g)| g - o).collect();
    let sd = sample_sd(&diffs);
    if sd == 0.0 {
        return Err(MetricsError::ZeroVariance("paired differences"));
    }
    let t = mean(&diffs) / (sd / (n as f64).sqrt());
    let p = student_t_p_two_sided(t, (n - 1) as f64);
    Ok((t, p))
}

/// P(|T| >= |t|) for Student's t with `df` degrees of freedom:
/// the regularized incomplete beta I_x(df/2, 1/2) at x = df/(df + t²).
pub fn student_t_p_two_sided(t: f64, df: f64) -> f64 {
    assert!(df > 0.0);
    if t == 0.0 {
        return 1.0;
    }
    let x = df / (df + t * t);
    reg_inc_beta(0.5 * df, 0.5, x)
}

/// Natural log of the gamma function (Lanczos approximation, g = 5,
/// accurate to ~1e-10 over positive arguments).
fn ln_gamma(x: f64) -> f64 {
    const COF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Continued-fraction for the incomplete beta (modified Lentz method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_IT: usize = 200;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_IT {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "x = {x} outside [0, 1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_bt =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}
