//! Tail probabilities of `Q = Σ λⱼ χ²₁` (independent one-df chi-squares).
//!
//! [`davies_pvalue`] inverts the characteristic function numerically with
//! error control (Davies, 1980, algorithm AS 155). [`liu_pvalue`] matches the
//! first four cumulants to a scaled non-central chi-square and is used as
//! the fallback when inversion fails.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::stats::noncentral_chi_square_sf;

/// Absolute accuracy requested from the inversion.
pub const DAVIES_ACCURACY: f64 = 1e-6;
/// Maximum number of integration terms.
pub const DAVIES_LIMIT: usize = 100_000;
/// Smallest p-value reported by [`davies_pvalue`].
pub const P_FLOOR: f64 = 1e-12;

const LOG28: f64 = 0.0866; // ln(2) / 8

/// Which tail method produced a p-value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Davies,
    Liu,
}

impl PValueMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PValueMethod::Davies => "davies",
            PValueMethod::Liu => "liu",
        }
    }
}

/// One weighted term `λ χ²_df(ncp)`.
#[derive(Debug, Clone, Copy)]
struct Term {
    lambda: f64,
    df: f64,
    ncp: f64,
}

struct Davies<'a> {
    terms: &'a [Term],
    /// Indices into `terms` sorted by decreasing `|λ|`.
    order: Vec<usize>,
    sigsq: f64,
    lmax: f64,
    lmin: f64,
    mean: f64,
    c: f64,
    intl: f64,
    ersm: f64,
    count: usize,
    limit: usize,
    fail: bool,
}

/// `ln(1 + x)` when `first`, else `ln(1 + x) − x`, accurate for small `x`.
fn log1(x: f64, first: bool) -> f64 {
    if x.abs() > 0.1 {
        return if first { x.ln_1p() } else { x.ln_1p() - x };
    }
    let mut y = x / (2.0 + x);
    let mut term = 2.0 * y * y * y;
    let mut k = 3.0;
    let mut s = if first { 2.0 } else { -x } * y;
    y *= y;
    let mut s1 = s + term / k;
    while s1 != s {
        k += 2.0;
        term *= y;
        s = s1;
        s1 = s + term / k;
    }
    s
}

fn exp1(x: f64) -> f64 {
    if x < -50.0 {
        0.0
    } else {
        x.exp()
    }
}

impl<'a> Davies<'a> {
    fn new(terms: &'a [Term], c: f64, limit: usize) -> Self {
        let mut order: Vec<usize> = (0..terms.len()).collect();
        order.sort_by(|&a, &b| terms[b].lambda.abs().total_cmp(&terms[a].lambda.abs()));
        Self {
            terms,
            order,
            sigsq: 0.0,
            lmax: 0.0,
            lmin: 0.0,
            mean: 0.0,
            c,
            intl: 0.0,
            ersm: 0.0,
            count: 0,
            limit,
            fail: false,
        }
    }

    fn counter(&mut self) -> Result<()> {
        self.count += 1;
        if self.count > self.limit {
            return Err(Error::Integration(4));
        }
        Ok(())
    }

    /// Chernoff-type bound on the tail beyond the returned cut-off.
    fn errbd(&mut self, u: f64) -> Result<(f64, f64)> {
        self.counter()?;
        let mut xconst = u * self.sigsq;
        let mut sum1 = u * xconst;
        let u = 2.0 * u;
        for t in self.terms.iter().rev() {
            let x = u * t.lambda;
            let y = 1.0 - x;
            xconst += t.lambda * (t.ncp / y + t.df) / y;
            sum1 += t.ncp * (x / y).powi(2) + t.df * (x * x / y + log1(-x, false));
        }
        Ok((exp1(-0.5 * sum1), xconst))
    }

    /// Cut-off beyond which the tail probability is below `accx`.
    fn ctff(&mut self, accx: f64, upn: &mut f64) -> Result<f64> {
        let mut u2 = *upn;
        let mut u1 = 0.0;
        let mut c1 = self.mean;
        let rb = 2.0 * if u2 > 0.0 { self.lmax } else { self.lmin };
        let mut c2;
        loop {
            let u = u2 / (1.0 + u2 * rb);
            let (bound, cx) = self.errbd(u)?;
            c2 = cx;
            if bound <= accx {
                break;
            }
            u1 = u2;
            c1 = c2;
            u2 *= 2.0;
        }
        while (c1 - self.mean) / (c2 - self.mean) < 0.9 {
            let u = 0.5 * (u1 + u2);
            let (bound, cx) = self.errbd(u / (1.0 + u * rb))?;
            if bound > accx {
                u1 = u;
                c1 = cx;
            } else {
                u2 = u;
                c2 = cx;
            }
        }
        *upn = u2;
        Ok(c2)
    }

    /// Bound on the integration error from truncating at `u`.
    fn truncation(&mut self, u: f64, tausq: f64) -> Result<f64> {
        self.counter()?;
        let mut sum1 = 0.0;
        let mut prod2 = 0.0;
        let mut prod3 = 0.0;
        let mut s = 0.0;
        let sum2 = (self.sigsq + tausq) * u * u;
        let mut prod1 = 2.0 * sum2;
        let u = 2.0 * u;
        for t in self.terms {
            let x = (u * t.lambda).powi(2);
            sum1 += t.ncp * x / (1.0 + x);
            if x > 1.0 {
                prod2 += t.df * x.ln();
                prod3 += t.df * log1(x, true);
                s += t.df;
            } else {
                prod1 += t.df * log1(x, true);
            }
        }
        sum1 *= 0.5;
        prod2 += prod1;
        prod3 += prod1;
        let x = exp1(-sum1 - 0.25 * prod2) / PI;
        let y = exp1(-sum1 - 0.25 * prod3) / PI;
        let mut err1 = if s == 0.0 { 1.0 } else { x * 2.0 / s };
        let err2 = if prod3 > 1.0 { 2.5 * y } else { 1.0 };
        if err2 < err1 {
            err1 = err2;
        }
        let x = 0.5 * sum2;
        let err2 = if x <= y { 1.0 } else { y / x };
        Ok(err1.min(err2))
    }

    /// Smallest truncation point (on a coarse grid) meeting `accx`.
    fn findu(&mut self, utx: &mut f64, accx: f64) -> Result<()> {
        const DIVIS: [f64; 4] = [2.0, 1.4, 1.2, 1.1];
        let mut ut = *utx;
        let mut u = ut / 4.0;
        if self.truncation(u, 0.0)? > accx {
            u = ut;
            while self.truncation(u, 0.0)? > accx {
                ut *= 4.0;
                u = ut;
            }
        } else {
            ut = u;
            u /= 4.0;
            while self.truncation(u, 0.0)? <= accx {
                ut = u;
                u /= 4.0;
            }
        }
        for d in DIVIS {
            let u = ut / d;
            if self.truncation(u, 0.0)? <= accx {
                ut = u;
            }
        }
        *utx = ut;
        Ok(())
    }

    /// Trapezoidal inversion sum; `main` disables the convergence-factor correction.
    fn integrate(&mut self, nterm: usize, interv: f64, tausq: f64, main: bool) {
        let inpi = interv / PI;
        for k in (0..=nterm).rev() {
            let u = (k as f64 + 0.5) * interv;
            let mut sum1 = -2.0 * u * self.c;
            let mut sum2 = sum1.abs();
            let mut sum3 = -0.5 * self.sigsq * u * u;
            for t in self.terms.iter().rev() {
                let x = 2.0 * t.lambda * u;
                let y = x * x;
                sum3 -= 0.25 * t.df * log1(y, true);
                let y = t.ncp * x / (1.0 + y);
                let z = t.df * x.atan() + y;
                sum1 += z;
                sum2 += z.abs();
                sum3 -= 0.5 * x * y;
            }
            let mut x = inpi * exp1(sum3) / u;
            if !main {
                x *= 1.0 - exp1(-0.5 * tausq * u * u);
            }
            self.intl += (0.5 * sum1).sin() * x;
            self.ersm += 0.5 * sum2 * x;
        }
    }

    /// Coefficient of `τ²` in the error from a convergence factor at `x`.
    fn cfe(&mut self, x: f64) -> Result<f64> {
        self.counter()?;
        let mut axl = x.abs();
        let sxl = if x > 0.0 { 1.0 } else { -1.0 };
        let mut sum1 = 0.0;
        for j in (0..self.order.len()).rev() {
            let t = self.terms[self.order[j]];
            if t.lambda * sxl > 0.0 {
                let lj = t.lambda.abs();
                let axl1 = axl - lj * (t.df + t.ncp);
                let axl2 = lj / LOG28;
                if axl1 > axl2 {
                    axl = axl1;
                } else {
                    if axl > axl2 {
                        axl = axl2;
                    }
                    sum1 = (axl - axl1) / lj;
                    for k in (0..j).rev() {
                        let tk = self.terms[self.order[k]];
                        sum1 += tk.df + tk.ncp;
                    }
                    break;
                }
            }
        }
        if sum1 > 100.0 {
            self.fail = true;
            return Ok(1.0);
        }
        Ok(2f64.powf(sum1 / 4.0) / (PI * axl * axl))
    }

    /// `P(Q < c)`.
    fn cdf(&mut self, accuracy: f64) -> Result<f64> {
        let mut acc1 = accuracy;
        let mut sd = self.sigsq;
        for t in self.terms {
            if t.df < 0.0 || t.ncp < 0.0 {
                return Err(Error::Integration(3));
            }
            sd += t.lambda * t.lambda * (2.0 * t.df + 4.0 * t.ncp);
            self.mean += t.lambda * (t.df + t.ncp);
            if self.lmax < t.lambda {
                self.lmax = t.lambda;
            } else if self.lmin > t.lambda {
                self.lmin = t.lambda;
            }
        }
        if sd == 0.0 {
            return Ok(if self.c > 0.0 { 1.0 } else { 0.0 });
        }
        if self.lmin == 0.0 && self.lmax == 0.0 && self.sigsq == 0.0 {
            return Err(Error::Integration(3));
        }
        let sd = sd.sqrt();
        let almx = self.lmax.max(-self.lmin);

        let mut utx = 16.0 / sd;
        let mut up = 4.5 / sd;
        let mut un = -up;
        self.findu(&mut utx, 0.5 * acc1)?;
        if self.c != 0.0 && almx > 0.07 * sd {
            let tausq = 0.25 * acc1 / self.cfe(self.c)?;
            if self.fail {
                self.fail = false;
            } else if self.truncation(utx, tausq)? < 0.2 * acc1 {
                self.sigsq += tausq;
                self.findu(&mut utx, 0.25 * acc1)?;
            }
        }
        acc1 *= 0.5;

        let mut remaining = self.limit as f64;
        loop {
            let d1 = self.ctff(acc1, &mut up)? - self.c;
            if d1 < 0.0 {
                return Ok(1.0);
            }
            let d2 = self.c - self.ctff(acc1, &mut un)?;
            if d2 < 0.0 {
                return Ok(0.0);
            }
            let intv = 2.0 * PI / d1.max(d2);
            let xnt = utx / intv;
            let xntm = 3.0 / acc1.sqrt();
            if xnt > xntm * 1.5 {
                if xntm > remaining {
                    return Err(Error::Integration(1));
                }
                let ntm = (xntm + 0.5).floor() as usize;
                let intv1 = utx / ntm as f64;
                let x = 2.0 * PI / intv1;
                if x > self.c.abs() {
                    let tausq = 0.33 * acc1 / (1.1 * (self.cfe(self.c - x)? + self.cfe(self.c + x)?));
                    if !self.fail {
                        acc1 *= 0.67;
                        self.integrate(ntm, intv1, tausq, false);
                        remaining -= xntm;
                        self.sigsq += tausq;
                        self.findu(&mut utx, 0.25 * acc1)?;
                        acc1 *= 0.75;
                        continue;
                    }
                }
            }
            if xnt > remaining {
                return Err(Error::Integration(1));
            }
            let nt = (xnt + 0.5).floor() as usize;
            self.integrate(nt, intv, 0.0, true);
            let value = 0.5 - self.intl;
            // round-off check allowing for radix 8 or 16 machines
            let up = self.ersm;
            let x = up + accuracy / 10.0;
            for rat in [1.0, 2.0, 4.0, 8.0] {
                if rat * x == rat * up {
                    return Err(Error::Integration(2));
                }
            }
            return Ok(value);
        }
    }
}

/// Positive weights, dropping those below `1e-10` of the largest.
fn effective_lambdas(lambdas: &[f64]) -> Result<Vec<f64>> {
    let max = lambdas.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::NoPositiveEigenvalues);
    }
    Ok(lambdas.iter().copied().filter(|&l| l > 1e-10 * max).collect())
}

/// `P(Σ λⱼ χ²₁ > q)` by characteristic-function inversion.
pub fn davies_pvalue(q: f64, lambdas: &[f64]) -> Result<f64> {
    let lambdas = effective_lambdas(lambdas)?;
    let terms: Vec<Term> = lambdas
        .iter()
        .map(|&lambda| Term {
            lambda,
            df: 1.0,
            ncp: 0.0,
        })
        .collect();
    let mut state = Davies::new(&terms, q, DAVIES_LIMIT);
    let cdf = state.cdf(DAVIES_ACCURACY)?;
    let p = 1.0 - cdf;
    if !p.is_finite() || p > 1.0 + 10.0 * DAVIES_ACCURACY || p < -10.0 * DAVIES_ACCURACY {
        return Err(Error::Integration(5));
    }
    Ok(p.clamp(P_FLOOR, 1.0))
}

/// Four-cumulant moment-matching approximation.
pub fn liu_pvalue(q: f64, lambdas: &[f64]) -> Result<f64> {
    let lambdas = effective_lambdas(lambdas)?;
    let c: [f64; 4] = std::array::from_fn(|k| lambdas.iter().map(|l| l.powi(k as i32 + 1)).sum());
    let mu_q = c[0];
    let sigma_q = (2.0 * c[1]).sqrt();
    let s1 = c[2] / c[1].powf(1.5);
    let s2 = c[3] / (c[1] * c[1]);
    let (a, delta, l) = if s1 * s1 > s2 {
        let a = 1.0 / (s1 - (s1 * s1 - s2).sqrt());
        let delta = s1 * a.powi(3) - a * a;
        (a, delta, a * a - 2.0 * delta)
    } else {
        let l = 1.0 / (s1 * s1);
        (l.sqrt(), 0.0, l)
    };
    let mu_x = l + delta;
    let sigma_x = std::f64::consts::SQRT_2 * a;
    let t = (q - mu_q) / sigma_q * sigma_x + mu_x;
    Ok(noncentral_chi_square_sf(t, l, delta).clamp(0.0, 1.0))
}

/// Davies with the moment-matching fallback.
pub fn quadform_pvalue(q: f64, lambdas: &[f64]) -> Result<(f64, PValueMethod)> {
    match davies_pvalue(q, lambdas) {
        Ok(p) => Ok((p, PValueMethod::Davies)),
        Err(Error::NoPositiveEigenvalues) => Err(Error::NoPositiveEigenvalues),
        Err(_) => Ok((liu_pvalue(q, lambdas)?, PValueMethod::Liu)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi_square_sf;
    use approx::assert_relative_eq;

    #[test]
    fn two_equal_weights_closed_form() {
        let p = davies_pvalue(5.991, &[1.0, 1.0]).unwrap();
        assert_relative_eq!(p, (-5.991f64 / 2.0).exp(), epsilon = 1e-5);
        assert_relative_eq!(p, 0.05, epsilon = 1e-4);
    }

    #[test]
    fn single_weight_is_one_df() {
        let p = davies_pvalue(3.841, &[1.0]).unwrap();
        assert_relative_eq!(p, chi_square_sf(3.841, 1.0), epsilon = 1e-5);
        assert_relative_eq!(p, 0.05, epsilon = 1e-4);
        let scaled = davies_pvalue(3.0 * 3.841, &[3.0]).unwrap();
        assert_relative_eq!(scaled, p, epsilon = 1e-5);
    }

    #[test]
    fn single_weight_below_the_mean() {
        for q in [0.01, 0.3, 1.0, 1.6] {
            let p = davies_pvalue(2.79 * q, &[2.79]).unwrap();
            assert_relative_eq!(p, chi_square_sf(q, 1.0), epsilon = 1e-6);
        }
    }

    #[test]
    fn equal_weights_match_chi_square() {
        for &(m, q) in &[(3usize, 2.0), (5, 11.07), (10, 4.0), (20, 31.4)] {
            let lambdas = vec![2.0; m];
            let exact = chi_square_sf(q / 2.0, m as f64);
            assert_relative_eq!(davies_pvalue(q, &lambdas).unwrap(), exact, epsilon = 1e-5);
            assert_relative_eq!(liu_pvalue(q, &lambdas).unwrap(), exact, epsilon = 1e-6);
        }
    }

    #[test]
    fn liu_close_for_two_units() {
        assert_relative_eq!(liu_pvalue(5.991, &[1.0, 1.0]).unwrap(), 0.05, epsilon = 2e-3);
        let one = liu_pvalue(3.841, &[1.0]).unwrap();
        assert_relative_eq!(one, chi_square_sf(3.841, 1.0), epsilon = 1e-9);
    }

    #[test]
    fn monotone_in_q() {
        let lambdas = [3.0, 1.5, 0.7, 0.2, 0.05];
        let mut last = 1.0;
        for i in 0..60 {
            let q = i as f64 * 0.5;
            let p = davies_pvalue(q, &lambdas).unwrap();
            assert!(p <= last + 2e-6, "p({q}) = {p} > {last}");
            last = p;
        }
    }

    #[test]
    fn extreme_tail_is_floored() {
        let p = davies_pvalue(500.0, &[1.0, 1.0]).unwrap();
        assert!(p >= P_FLOOR && p < 1e-6);
    }

    #[test]
    fn no_positive_weights() {
        assert!(matches!(davies_pvalue(1.0, &[0.0, 0.0]), Err(Error::NoPositiveEigenvalues)));
        assert!(matches!(liu_pvalue(1.0, &[]), Err(Error::NoPositiveEigenvalues)));
    }

    #[test]
    fn small_series_log() {
        for &x in &[0.05, -0.05, 1e-8, 0.099] {
            assert_relative_eq!(log1(x, true), x.ln_1p(), max_relative = 1e-13);
            assert_relative_eq!(log1(x, false), x.ln_1p() - x, max_relative = 1e-9, epsilon = 1e-20);
        }
    }
}
