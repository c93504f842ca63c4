//! Exponential data mixing law `P(r) = α + β·exp(γ·r)`.
//!
//! One law is fitted per domain from `(ratio, accuracy)` observations. With
//! two domains the first law is written in the mixing ratio `r` and the
//! second in `1 - r`; [`solve_optimal_ratio`] then maximizes the weighted sum
//! of the two fitted curves over `r ∈ [0, 1]`.
//!
//! Fitting uses variable projection: for fixed `γ` the best `(α, β)` is an
//! ordinary linear regression on `exp(γ·x)`, so only `γ` is searched, first
//! on a dense grid and then by golden-section refinement.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixObservation {
    pub domain: String,
    pub ratio: f64,
    pub accuracy: f64,
}

/// Which variable a domain's law is written in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawArgument {
    R,
    OneMinusR,
}

impl LawArgument {
    pub fn apply(self, r: f64) -> f64 {
        match self {
            LawArgument::R => r,
            LawArgument::OneMinusR => 1.0 - r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Law {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Law {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    /// `α + β·exp(γ·x)` in the law's own argument.
    pub fn at(&self, x: f64) -> f64 {
        self.alpha + self.beta * (self.gamma * x).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFit {
    pub domain: String,
    pub argument: LawArgument,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub rss: f64,
    pub observations: usize,
    /// Sign of `β·γ`: the direction of the curve in its own argument.
    pub slope_sign: i8,
    /// Always true for this family; kept in the output as a checked fact.
    pub monotone: bool,
}

impl DomainFit {
    pub fn law(&self) -> Law {
        Law::new(self.alpha, self.beta, self.gamma)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixLawFit {
    pub domains: Vec<DomainFit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitOptions {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub grid_points: usize,
    /// Grid values with `|γ|` below this are skipped.
    pub gamma_exclude: f64,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            gamma_min: -20.0,
            gamma_max: 20.0,
            grid_points: 4000,
            gamma_exclude: 1e-6,
            tol: 1e-8,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_min < self.gamma_max) || !self.gamma_min.is_finite() || !self.gamma_max.is_finite() {
            return Err(Error::Config(format!(
                "gamma range [{}, {}] is empty",
                self.gamma_min, self.gamma_max
            )));
        }
        if self.grid_points < 3 {
            return Err(Error::Config("grid_points must be >= 3".into()));
        }
        if !(self.tol > 0.0) || !(self.gamma_exclude >= 0.0) {
            return Err(Error::Config("tol must be > 0 and gamma_exclude >= 0".into()));
        }
        Ok(())
    }
}

/// Linear part for a fixed `γ`: `(α, β, rss)`.
fn project(xs: &[f64], ys: &[f64], gamma: f64) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let phi: Vec<f64> = xs.iter().map(|x| (gamma * x).exp()).collect();
    let phi_mean = phi.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (p, y) in phi.iter().zip(ys) {
        sxx += (p - phi_mean) * (p - phi_mean);
        sxy += (p - phi_mean) * (y - y_mean);
    }
    let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let alpha = y_mean - beta * phi_mean;
    let rss = phi
        .iter()
        .zip(ys)
        .map(|(p, y)| {
            let r = y - alpha - beta * p;
            r * r
        })
        .sum();
    (alpha, beta, rss)
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Fit one law to points `(x, y)` given in the law's own argument.
pub fn fit_law(points: &[(f64, f64)], opts: &FitOptions) -> Result<(Law, f64)> {
    opts.validate()?;
    let mut pts = points.to_vec();
    // Canonical order makes the fit independent of input order.
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if pts.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::Param("observations must be finite".into()));
    }
    let mut distinct = pts.iter().map(|p| p.0).collect::<Vec<_>>();
    distinct.dedup();
    if distinct.len() == 1 {
        return Err(Error::Degenerate(format!(
            "all {} observations share ratio {}",
            pts.len(),
            distinct[0]
        )));
    }
    if distinct.len() < 3 || pts.len() < 4 {
        return Err(Error::Underdetermined(format!(
            "need >= 4 observations at >= 3 distinct ratios, got {} at {}",
            pts.len(),
            distinct.len()
        )));
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let rss = |g: f64| project(&xs, &ys, g).2;

    let step = (opts.gamma_max - opts.gamma_min) / (opts.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..opts.grid_points)
        .map(|i| opts.gamma_min + step * i as f64)
        .filter(|g| g.abs() >= opts.gamma_exclude)
        .collect();
    if grid.is_empty() {
        return Err(Error::Config("gamma grid is empty after exclusion".into()));
    }
    let mut best = 0;
    let mut best_rss = f64::INFINITY;
    for (i, &g) in grid.iter().enumerate() {
        let r = rss(g);
        if r < best_rss {
            best_rss = r;
            best = i;
        }
    }
    let g0 = grid[best];
    let mut lo = if best > 0 { grid[best - 1] } else { g0 };
    let mut hi = if best + 1 < grid.len() { grid[best + 1] } else { g0 };
    // Keep the bracket on the sign of the grid winner so it never enters the
    // excluded band around zero.
    if g0 > 0.0 {
        lo = lo.max(opts.gamma_exclude);
    } else {
        hi = hi.min(-opts.gamma_exclude);
    }
    let mut gamma = if hi > lo { golden_min(rss, lo, hi, opts.tol) } else { g0 };
    if rss(g0) < rss(gamma) {
        gamma = g0;
    }
    let (alpha, beta, r) = project(&xs, &ys, gamma);
    Ok((Law::new(alpha, beta, gamma), r))
}

/// Fit both domains. Domains are ordered lexicographically unless `primary`
/// names the one whose law is written in `r`.
pub fn fit(observations: &[MixObservation], opts: &FitOptions, primary: Option<&str>) -> Result<MixLawFit> {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for o in observations {
        if !(0.0..=1.0).contains(&o.ratio) {
            return Err(Error::Param(format!("ratio {} outside [0, 1]", o.ratio)));
        }
        if !o.accuracy.is_finite() {
            return Err(Error::Param(format!("non-finite accuracy for domain {}", o.domain)));
        }
        groups.entry(o.domain.as_str()).or_default().push((o.ratio, o.accuracy));
    }
    if groups.len() != 2 {
        return Err(Error::Config(format!(
            "expected observations for exactly 2 domains, got {}",
            groups.len()
        )));
    }
    let mut names: Vec<&str> = groups.keys().copied().collect();
    if let Some(p) = primary {
        let pos = names
            .iter()
            .position(|n| *n == p)
            .ok_or_else(|| Error::Config(format!("primary domain {p:?} has no observations")))?;
        names.swap(0, pos);
    }
    let mut domains = Vec::with_capacity(2);
    for (idx, name) in names.iter().enumerate() {
        let argument = if idx == 0 { LawArgument::R } else { LawArgument::OneMinusR };
        let pts: Vec<(f64, f64)> = groups[name].iter().map(|&(r, y)| (argument.apply(r), y)).collect();
        let (law, rss) = fit_law(&pts, opts)?;
        let sign = (law.beta * law.gamma).signum();
        domains.push(DomainFit {
            domain: name.to_string(),
            argument,
            alpha: law.alpha,
            beta: law.beta,
            gamma: law.gamma,
            rss,
            observations: pts.len(),
            slope_sign: if law.beta == 0.0 { 0 } else { sign as i8 },
            monotone: true,
        });
    }
    Ok(MixLawFit { domains })
}

/// Fitted accuracy of a domain at mixing ratio `r`.
pub fn eval_law(fit: &DomainFit, r: f64) -> f64 {
    fit.law().at(fit.argument.apply(r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalRatio {
    pub r_star: f64,
    pub boundary_flag: bool,
    pub objective_at_r_star: f64,
    /// Golden-section maximizer; equals `r_star` within 1e-6 for interior optima.
    pub numeric_r_star: f64,
}

/// Weighted objective `w1·P1(r) + w2·P2(1 - r)`.
pub fn mix_objective(law1: &Law, law2: &Law, weights: (f64, f64), r: f64) -> f64 {
    weights.0 * law1.at(r) + weights.1 * law2.at(1.0 - r)
}

pub const CROSS_CHECK_TOL: f64 = 1e-6;

/// Maximize `w1·P1(r) + w2·P2(1 - r)` over `[0, 1]`.
pub fn solve_optimal_ratio(law1: &Law, law2: &Law, weights: (f64, f64)) -> Result<OptimalRatio> {
    let (w1, w2) = weights;
    if !(w1 >= 0.0 && w2 >= 0.0) || !w1.is_finite() || !w2.is_finite() || w1 + w2 == 0.0 {
        return Err(Error::Param(format!("weights must be >= 0 and not both zero, got ({w1}, {w2})")));
    }
    let f = |r: f64| mix_objective(law1, law2, weights, r);
    let numeric = golden_min(|r| -f(r), 0.0, 1.0, 1e-12);
    let numeric = [0.0, numeric, 1.0]
        .into_iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, r| if f(r) > acc.1 { (r, f(r)) } else { acc })
        .0;

    let p1 = w1 * law1.beta * law1.gamma;
    let p2 = w2 * law2.beta * law2.gamma;
    let mut candidates = vec![0.0, 1.0];
    let mut interior = None;
    if p1 > 0.0 && p2 > 0.0 {
        let slope = law1.gamma + law2.gamma;
        if slope == 0.0 {
            return Err(Error::DegenerateSlope);
        }
        let r = (p2.ln() + law2.gamma - p1.ln()) / slope;
        let second = w1 * law1.beta * law1.gamma.powi(2) * (law1.gamma * r).exp()
            + w2 * law2.beta * law2.gamma.powi(2) * (law2.gamma * (1.0 - r)).exp();
        if (0.0..=1.0).contains(&r) && second < 0.0 {
            interior = Some(r);
        }
        candidates.push(r.clamp(0.0, 1.0));
    }
    let (r_star, value) = candidates
        .into_iter()
        .map(|r| (r, f(r)))
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });
    if let Some(r) = interior {
        if (r - numeric).abs() > CROSS_CHECK_TOL {
            return Err(Error::CrossCheck { closed: r, numeric });
        }
    }
    Ok(OptimalRatio {
        r_star,
        boundary_flag: r_star == 0.0 || r_star == 1.0,
        objective_at_r_star: value,
        numeric_r_star: numeric,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CsvRow {
    domain: String,
    ratio: f64,
    accuracy: f64,
}

/// Read observations from a `domain,ratio,accuracy` CSV.
pub fn read_observations(path: &Path) -> Result<Vec<MixObservation>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["domain", "ratio", "accuracy"] {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            reason: format!("expected header domain,ratio,accuracy, got {}", headers.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<CsvRow>() {
        let row = row.map_err(|e| csv_error(path, e))?;
        out.push(MixObservation {
            domain: row.domain,
            ratio: row.ratio,
            accuracy: row.accuracy,
        });
    }
    Ok(out)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        let csv::ErrorKind::Io(io) = e.into_kind() else { unreachable!() };
        return Error::io(path, io);
    }
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse {
        path: path.into(),
        line,
        reason: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    const EQ1: Law = Law {
        alpha: 49.74,
        beta: -19.65,
        gamma: -9.46,
    };
    const EQ2: Law = Law {
        alpha: 89.9,
        beta: -71.6,
        gamma: -0.36,
    };

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn sample(law: &Law, n: usize) -> Vec<(f64, f64)> {
        (0..n).map(|i| {
            let x = i as f64 / (n - 1) as f64;
            (x, law.at(x))
        }).collect()
    }

    #[test]
    fn evaluates_hand_values() {
        assert!((EQ1.at(0.0) - 30.09).abs() < 1e-12);
        // Direct evaluation at the optimum below.
        let v = EQ1.at(0.2378);
        let expect = 49.74 - 19.65 * (-9.46f64 * 0.2378).exp();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 47.67).abs() < 0.01, "{v}");
    }

    #[test]
    fn optimal_ratio_from_reference_coefficients() {
        let opt = solve_optimal_ratio(&EQ1, &EQ2, (1.0, 1.0)).unwrap();
        assert!((opt.r_star - 0.2378).abs() < 5e-4, "{opt:?}");
        assert!(!opt.boundary_flag);
        assert!((opt.r_star - opt.numeric_r_star).abs() <= 1e-6);
        // Closed form, written out independently.
        let r = ((71.6f64 * 0.36).ln() - 0.36 - (19.65f64 * 9.46).ln()) / (-9.46 - 0.36);
        assert!((opt.r_star - r).abs() < 1e-12);
    }

    #[test]
    fn symmetric_laws_meet_in_the_middle() {
        let law = Law::new(10.0, -5.0, -3.0);
        let opt = solve_optimal_ratio(&law, &law, (1.0, 1.0)).unwrap();
        assert!((opt.r_star - 0.5).abs() < 1e-12);
    }

    #[test]
    fn flat_second_law_puts_optimum_at_one() {
        let opt = solve_optimal_ratio(&EQ1, &Law::new(50.0, 0.0, -1.0), (1.0, 1.0)).unwrap();
        assert_eq!(opt.r_star, 1.0);
        assert!(opt.boundary_flag);
    }

    #[test]
    fn opposite_slopes_are_degenerate() {
        let c = Law::new(1.0, 1.0, 2.0);
        let d = Law::new(1.0, -1.0, -2.0);
        assert!(matches!(solve_optimal_ratio(&c, &d, (1.0, 1.0)), Err(Error::DegenerateSlope)));
        // Without the sign condition the optimum is a boundary, not an error.
        let e = Law::new(1.0, -1.0, 2.0);
        let opt = solve_optimal_ratio(&c, &e, (1.0, 1.0)).unwrap();
        assert!(opt.boundary_flag);
        assert!(solve_optimal_ratio(&c, &d, (0.0, 0.0)).is_err());
    }

    #[test]
    fn closed_form_agrees_with_golden_section_on_random_concave_pairs() {
        let mut rng = SeededRng::new(1);
        let mut interior = 0;
        for _ in 0..200 {
            let l1 = Law::new(50.0, -rng.uniform_range(1.0, 40.0), -rng.uniform_range(0.1, 10.0));
            let l2 = Law::new(50.0, -rng.uniform_range(1.0, 40.0), -rng.uniform_range(0.1, 10.0));
            let w = (rng.uniform_range(0.2, 2.0), rng.uniform_range(0.2, 2.0));
            let opt = solve_optimal_ratio(&l1, &l2, w).unwrap();
            if !opt.boundary_flag {
                interior += 1;
                assert!((opt.r_star - opt.numeric_r_star).abs() <= 1e-6);
            }
            // Brute force on a fine grid never beats the returned optimum.
            let best = (0..=10_000)
                .map(|i| mix_objective(&l1, &l2, w, i as f64 / 10_000.0))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(opt.objective_at_r_star >= best - 1e-9);
        }
        assert!(interior > 50);
    }

    #[test]
    fn recovers_reference_law_from_eight_points() {
        let (law, rss) = fit_law(&sample(&EQ1, 8), &FitOptions::default()).unwrap();
        assert!(rel(law.alpha, EQ1.alpha) < 1e-3);
        assert!(rel(law.beta, EQ1.beta) < 1e-3);
        assert!(rel(law.gamma, EQ1.gamma) < 1e-3);
        assert!(rss < 1e-12);
    }

    #[test]
    fn recovers_random_planted_laws() {
        let mut rng = SeededRng::new(2);
        for _ in 0..50 {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let bsign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let law = Law::new(
                rng.uniform_range(20.0, 80.0),
                bsign * rng.uniform_range(5.0, 50.0),
                sign * rng.uniform_range(0.1, 15.0),
            );
            let (fit, _) = fit_law(&sample(&law, 8), &FitOptions::default()).unwrap();
            assert!(rel(fit.alpha, law.alpha) < 1e-3, "{law:?} {fit:?}");
            assert!(rel(fit.beta, law.beta) < 1e-3, "{law:?} {fit:?}");
            assert!(rel(fit.gamma, law.gamma) < 1e-3, "{law:?} {fit:?}");
        }
    }

    #[test]
    fn constant_observations_fit_a_flat_curve() {
        let pts: Vec<(f64, f64)> = [0.0, 0.3, 0.6, 1.0].iter().map(|&x| (x, 42.0)).collect();
        let (law, rss) = fit_law(&pts, &FitOptions::default()).unwrap();
        assert!(law.beta.abs() < 1e-6);
        assert!((law.alpha - 42.0).abs() < 1e-9);
        assert!(rss < 1e-12);
    }

    #[test]
    fn noisy_recovery() {
        let mut rng = SeededRng::new(3);
        let sigma = 0.2;
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let x = i as f64 / 11.0;
                (x, EQ1.at(x) + sigma * rng.normal())
            })
            .collect();
        let (law, rss) = fit_law(&pts, &FitOptions::default()).unwrap();
        assert!(rel(law.alpha, EQ1.alpha) < 0.1, "{law:?}");
        assert!(rel(law.beta, EQ1.beta) < 0.1, "{law:?}");
        assert!(rel(law.gamma, EQ1.gamma) < 0.1, "{law:?}");
        let per_dof = rss / (12.0 - 3.0);
        assert!(per_dof > 0.1 * sigma * sigma && per_dof < 4.0 * sigma * sigma, "{per_dof}");
    }

    #[test]
    fn fit_is_order_invariant() {
        let mut rng = SeededRng::new(4);
        let mut pts: Vec<(f64, f64)> = (0..9).map(|i| (i as f64 / 8.0, EQ2.at(i as f64 / 8.0) + rng.normal())).collect();
        let a = fit_law(&pts, &FitOptions::default()).unwrap();
        rng.shuffle(&mut pts);
        let b = fit_law(&pts, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_thin_data() {
        let opts = FitOptions::default();
        let same: Vec<(f64, f64)> = (0..5).map(|i| (0.5, i as f64)).collect();
        assert!(matches!(fit_law(&same, &opts), Err(Error::Degenerate(_))));
        let two = [(0.0, 1.0), (0.0, 2.0), (1.0, 3.0), (1.0, 4.0)];
        assert!(matches!(fit_law(&two, &opts), Err(Error::Underdetermined(_))));
        let three = [(0.0, 1.0), (0.5, 2.0), (1.0, 3.0)];
        assert!(matches!(fit_law(&three, &opts), Err(Error::Underdetermined(_))));
    }

    #[test]
    fn two_domain_fit_uses_complementary_arguments() {
        let mut obs = Vec::new();
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            obs.push(MixObservation { domain: "general".into(), ratio: r, accuracy: EQ1.at(r) });
            obs.push(MixObservation { domain: "bio".into(), ratio: r, accuracy: EQ2.at(1.0 - r) });
        }
        let fit = fit(&obs, &FitOptions::default(), Some("general")).unwrap();
        assert_eq!(fit.domains[0].domain, "general");
        assert_eq!(fit.domains[1].argument, LawArgument::OneMinusR);
        assert!(rel(fit.domains[1].gamma, EQ2.gamma) < 1e-3);
        assert!((eval_law(&fit.domains[1], 0.3) - EQ2.at(0.7)).abs() < 1e-6);
        assert_eq!(fit.domains[0].slope_sign, 1);

        let lex = super::fit(&obs, &FitOptions::default(), None).unwrap();
        assert_eq!(lex.domains[0].domain, "bio");
        assert!(super::fit(&obs, &FitOptions::default(), Some("other")).is_err());
        obs[0].ratio = 1.5;
        assert!(matches!(super::fit(&obs, &FitOptions::default(), None), Err(Error::Param(_))));
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.csv");
        std::fs::write(&path, "domain,ratio,accuracy\na,0.1,40\na,zero,41\n").unwrap();
        match read_observations(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "domain,ratio,accuracy\na,0.1,40\nb,0.2,41\n").unwrap();
        assert_eq!(read_observations(&path).unwrap().len(), 2);
        std::fs::write(&path, "dom,ratio,accuracy\n").unwrap();
        assert!(matches!(read_observations(&path), Err(Error::Parse { line: 1, .. })));
    }
}
