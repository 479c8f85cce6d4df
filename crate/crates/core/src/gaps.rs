//! Exact IID-versus-exchangeability gaps and the Monte Carlo coverage harness.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::distributions::{Distribution as _, WeightedIndex};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{conformal_p, p_table, NonconformityMeasure, PVariant};
use crate::error::{LabError, Result};
use crate::instances::instance_rng;
use crate::oracle::{check_e_exchangeable, check_e_iid, check_e_iid_poly, CheckReport};
use crate::space::{for_each_sequence, BagIndex, Distribution, ObservationSpace};
use crate::table::{BagPolynomial, FnTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    #[serde(rename = "N")]
    pub n: usize,
    /// Exact value as `numerator/denominator` in lowest terms.
    pub e_value_exact: String,
    pub e_value: f64,
    pub bits: f64,
    pub reference_asymptotic: f64,
    /// Bag-level IID check, valid for any length.
    pub validity_check: CheckReport,
    /// The same check on the dense table, when it fits in the budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_check: Option<CheckReport>,
    /// Mean of the table over the orbit carrying the evidence; above 1, so the
    /// table is not an exchangeability e-variable.
    pub exchangeability_orbit_mean: f64,
}

impl GapReport {
    pub fn ok(&self) -> bool {
        self.validity_check.ok && self.dense_check.as_ref().is_none_or(|r| r.ok)
    }
}

/// `lb(x)` for a big integer, accurate to double precision.
pub fn lb_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return x.to_f64().expect("fits").log2();
    }
    let shift = bits - 64;
    let top: BigUint = x >> shift;
    top.to_f64().expect("fits").log2() + shift as f64
}

/// `lb(num / den)`, both positive.
pub fn lb_ratio(r: &BigRational) -> f64 {
    let num = r.numer().to_biguint().expect("positive");
    let den = r.denom().to_biguint().expect("positive");
    lb_biguint(&num) - lb_biguint(&den)
}

fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or_else(|| lb_ratio(r).exp2())
}

fn pow_big(base: usize, exp: usize) -> BigUint {
    num_traits::pow(BigUint::from(base), exp)
}

fn factorial_big(k: usize) -> BigUint {
    (1..=k).fold(BigUint::one(), |acc, i| acc * BigUint::from(i))
}

pub fn binomial_big(n: usize, k: usize) -> BigUint {
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc = acc * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    acc
}

fn rational(num: BigUint, den: BigUint) -> BigRational {
    BigRational::new(num.into(), den.into())
}

/// `N lb e - 1/2 lb(2 pi N)`, the Stirling form of `lb(N^N / N!)`.
pub fn stirling_bits(n: usize) -> f64 {
    let n = n as f64;
    n * std::f64::consts::E.log2() - 0.5 * (2.0 * std::f64::consts::PI * n).log2()
}

/// `E = (N^N/N!) 1{sequence is a permutation of 0..N}` over `N` bare observations.
pub fn permutation_gap(n: usize, budget: u64) -> Result<GapReport> {
    if n == 0 {
        return Err(LabError::InvalidParameter("permutation gap needs N >= 1".into()));
    }
    if n > u32::MAX as usize {
        return Err(LabError::InvalidParameter(format!("N = {n} too large")));
    }
    let exact = rational(pow_big(n, n), factorial_big(n));
    let e_value = ratio_to_f64(&exact);
    if n == 1 {
        // a one-point space: E is the constant 1
        let check = CheckReport::new("ER", 1.0, 1.0, crate::oracle::Witness::None, crate::oracle::Tolerances::default().iid);
        return Ok(GapReport {
            n,
            e_value_exact: exact.to_string(),
            e_value,
            bits: 0.0,
            reference_asymptotic: stirling_bits(n),
            validity_check: check,
            dense_check: None,
            exchangeability_orbit_mean: e_value,
        });
    }
    let space = ObservationSpace::new(1, n)?;

    // the only bag carrying mass has every count 1; its orbit sum is N! * e = N^N
    let coefficient = pow_big(n, n).to_f64().unwrap_or(f64::INFINITY);
    let poly = BagPolynomial::new(n, vec![(vec![1; n], coefficient)]);
    let validity_check = check_e_iid_poly(&poly, crate::oracle::Tolerances::default().iid);

    let dense_check = match space.table_len(n, budget) {
        Ok(_) => {
            let table = FnTable::from_fn(space, n - 1, budget, |seq| {
                let mut seen = vec![false; n];
                for &z in seq {
                    if seen[z] {
                        return 0.0;
                    }
                    seen[z] = true;
                }
                e_value
            })?;
            Some(check_e_iid(&table, crate::oracle::Tolerances::default().iid))
        }
        Err(LabError::BudgetExceeded { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(GapReport {
        n,
        e_value_exact: exact.to_string(),
        e_value,
        bits: lb_ratio(&exact),
        reference_asymptotic: stirling_bits(n),
        validity_check,
        dense_check,
        exchangeability_orbit_mean: e_value,
    })
}

/// Binary sequences of length `N`: `E = 1{k ones} / max_p C(N,k) p^k (1-p)^(N-k)`.
pub fn binomial_gap(n: usize, k: usize, budget: u64) -> Result<GapReport> {
    if n == 0 || k > n {
        return Err(LabError::InvalidParameter(format!("binomial gap needs 0 <= k <= N, N >= 1; got N={n}, k={k}")));
    }
    // e = N^N / (C(N,k) k^k (N-k)^(N-k)), with 0^0 = 1
    let den = binomial_big(n, k) * pow_big(k, k) * pow_big(n - k, n - k);
    let exact = rational(pow_big(n, n), den);
    let e_value = ratio_to_f64(&exact);
    // orbit sum is C(N,k) e = 1 / ((k/N)^k (1-k/N)^(N-k)); counts are (zeros, ones)
    let coefficient = ratio_to_f64(&rational(pow_big(n, n), pow_big(k, k) * pow_big(n - k, n - k)));
    let poly = BagPolynomial::new(2, vec![(vec![(n - k) as u32, k as u32], coefficient)]);
    let tol = crate::oracle::Tolerances::default().iid;
    let validity_check = check_e_iid_poly(&poly, tol);

    let space = ObservationSpace::new(1, 2)?;
    let dense_check = match space.table_len(n, budget) {
        Ok(_) => {
            let table = FnTable::from_fn(space, n - 1, budget, |seq| {
                if seq.iter().filter(|&&z| z == 1).count() == k {
                    e_value
                } else {
                    0.0
                }
            })?;
            Some(check_e_iid(&table, tol))
        }
        Err(LabError::BudgetExceeded { .. }) => None,
        Err(e) => return Err(e),
    };

    Ok(GapReport {
        n,
        e_value_exact: exact.to_string(),
        e_value,
        bits: lb_ratio(&exact),
        reference_asymptotic: 0.5 * (n as f64).log2(),
        validity_check,
        dense_check,
        exchangeability_orbit_mean: e_value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub precondition: CheckReport,
    /// Largest over bags of the smallest value over that bag's orderings.
    pub max_min: f64,
    pub worst_bag: Vec<u32>,
    pub ok: bool,
}

/// For an exchangeability e-variable, the smallest value on each orbit is at most 1.
pub fn exchangeability_flatness(e: &FnTable, tol: f64) -> FlatnessReport {
    let precondition = check_e_exchangeable(e, tol);
    let index = BagIndex::new(e.space().z_card(), e.seq_len());
    let mut mins = vec![f64::INFINITY; index.count()];
    let mut scratch = vec![0u32; e.space().z_card()];
    let values = e.values();
    for_each_sequence(e.space().z_card(), e.seq_len(), |i, seq| {
        let r = index.rank_sequence(seq, &mut scratch);
        mins[r] = mins[r].min(values[i]);
    });
    let (rank, &max_min) = mins
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one bag");
    FlatnessReport {
        ok: precondition.ok && max_min <= 1.0 + tol,
        precondition,
        max_min,
        worst_bag: index.bag(rank).counts().to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitationReport {
    pub n: usize,
    pub min_p: f64,
    /// `1 / (n + 1)`.
    pub bound: f64,
    pub attained: bool,
    pub ok: bool,
}

/// Smallest conformal p-value over every training sequence, object and label.
pub fn limitation_check(a: &dyn NonconformityMeasure, space: &ObservationSpace, n: usize, budget: u64) -> Result<LimitationReport> {
    let table = p_table(a, space, n, PVariant::Deterministic, budget)?;
    let min_p = table.values().iter().copied().fold(f64::INFINITY, f64::min);
    let bound = 1.0 / (n + 1) as f64;
    Ok(LimitationReport { n, min_p, bound, attained: min_p == bound, ok: min_p >= bound })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub epsilon: f64,
    pub n: usize,
    pub trials: u64,
    pub seed: u64,
    pub smoothed: bool,
    pub errors: u64,
    pub miscoverage: f64,
    /// Binomial standard error `sqrt(eps (1 - eps) / trials)`.
    pub sigma: f64,
    /// `|miscoverage - eps| <= 3 sigma`.
    pub within_band: bool,
    /// `miscoverage <= eps + 3 sigma`.
    pub ok: bool,
}

pub const MIN_TRIALS: u64 = 1000;

/// Draws `trials` IID datasets of `n + 1` observations from `q` and counts how often the
/// true test label falls outside the conformal prediction set at level `eps`.
///
/// Trial `t` uses its own generator keyed by `(seed, t)`, so the result does not depend
/// on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn mc_coverage(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    q: &Distribution,
    n: usize,
    eps: f64,
    trials: u64,
    seed: u64,
    smoothed: bool,
) -> Result<CoverageReport> {
    if trials < MIN_TRIALS {
        return Err(LabError::InvalidParameter(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(LabError::InvalidParameter(format!("significance level {eps} outside [0,1)")));
    }
    if q.len() != space.z_card() {
        return Err(LabError::Dimension(format!("distribution has {} points, space has {}", q.len(), space.z_card())));
    }
    let weights = WeightedIndex::new(q.probs()).map_err(|e| LabError::InvalidDistribution(e.to_string()))?;
    let errors = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<u64> {
            let mut rng = instance_rng(seed, t);
            let obs: Vec<usize> = (0..=n).map(|_| weights.sample(&mut rng)).collect();
            let tau = if smoothed { Some(rng.gen::<f64>()) } else { None };
            let (x, y) = space.decode(obs[n]);
            let p = conformal_p(a, space, &obs[..n], x, y, tau)?;
            Ok(u64::from(p <= eps))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let miscoverage = errors as f64 / trials as f64;
    let sigma = (eps * (1.0 - eps) / trials as f64).sqrt();
    Ok(CoverageReport {
        epsilon: eps,
        n,
        trials,
        seed,
        smoothed,
        errors,
        miscoverage,
        sigma,
        within_band: (miscoverage - eps).abs() <= 3.0 * sigma,
        ok: miscoverage <= eps + 3.0 * sigma,
    })
}

/// Exact rational `N^N / N!`, exposed for reports and tests.
pub fn permutation_gap_exact(n: usize) -> BigRational {
    rational(pow_big(n, n), factorial_big(n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{ConstantScore, MinorityLabelScore};
    use crate::space::DEFAULT_BUDGET;

    #[test]
    fn permutation_gap_small() {
        let r = permutation_gap(3, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.e_value_exact, "9/2");
        assert_eq!(r.e_value, 4.5);
        assert!((r.bits - 2.1699).abs() < 1e-4);
        assert!(r.ok(), "{r:?}");
        assert!((r.validity_check.worst_value - 1.0).abs() < 1e-9);
        let dense = r.dense_check.unwrap();
        assert!((dense.worst_value - 1.0).abs() < 1e-9);

        let one = permutation_gap(1, DEFAULT_BUDGET).unwrap();
        assert_eq!(one.e_value, 1.0);
        assert_eq!(one.bits, 0.0);
    }

    #[test]
    fn stirling_error_shrinks() {
        let errs: Vec<f64> = (2..=8)
            .map(|n| {
                let r = permutation_gap_exact(n);
                (lb_ratio(&r) - stirling_bits(n)).abs()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn binomial_gap_examples() {
        let r = binomial_gap(3, 1, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.e_value_exact, "9/4");
        assert!((r.bits - 1.1699).abs() < 1e-4);
        assert!(r.ok(), "{r:?}");
        let r = binomial_gap(5, 0, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.e_value, 1.0);
        assert_eq!(r.bits, 0.0);
        assert!(r.ok());
    }

    #[test]
    fn big_integer_logarithm() {
        let x = pow_big(2, 200) * BigUint::from(3u32);
        assert!((lb_biguint(&x) - (200.0 + 3f64.log2())).abs() < 1e-12);
    }

    #[test]
    fn flatness_examples() {
        let space = ObservationSpace::new(1, 2).unwrap();
        let one = FnTable::constant(space, 2, 1.0, DEFAULT_BUDGET).unwrap();
        let r = exchangeability_flatness(&one, 1e-9);
        assert!(r.ok);
        assert_eq!(r.max_min, 1.0);
        // all mass of the bag {0,0,1} on one ordering
        let conc = FnTable::from_fn(space, 2, DEFAULT_BUDGET, |q| match q {
            [0, 0, 1] => 3.0,
            _ if q.iter().filter(|&&z| z == 1).count() == 1 => 0.0,
            _ => 1.0,
        })
        .unwrap();
        let r = exchangeability_flatness(&conc, 1e-9);
        assert!(r.ok);
        assert_eq!(r.max_min, 1.0);
    }

    #[test]
    fn limitation_examples() {
        let space = ObservationSpace::new(1, 2).unwrap();
        let r = limitation_check(&MinorityLabelScore { space }, &space, 3, DEFAULT_BUDGET).unwrap();
        assert!(r.ok && r.attained, "{r:?}");
        let r = limitation_check(&ConstantScore(0.0), &space, 3, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.min_p, 1.0);
        let r = limitation_check(&MinorityLabelScore { space }, &space, 0, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.min_p, 1.0);
    }

    #[test]
    fn coverage_is_reproducible() {
        let space = ObservationSpace::new(1, 2).unwrap();
        let q = Distribution::new(vec![0.3, 0.7]).unwrap();
        let a = MinorityLabelScore { space };
        let r1 = mc_coverage(&a, &space, &q, 5, 0.2, 2000, 9, true).unwrap();
        let r2 = mc_coverage(&a, &space, &q, 5, 0.2, 2000, 9, true).unwrap();
        assert_eq!(r1, r2);
        let zero = mc_coverage(&a, &space, &q, 5, 0.0, 1000, 9, false).unwrap();
        assert_eq!(zero.errors, 0);
        assert!(mc_coverage(&a, &space, &q, 5, 0.2, 10, 9, false).is_err());
    }
}
