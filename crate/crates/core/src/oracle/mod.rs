//! Exact membership checks for the p-/e-variable classes.
//!
//! Exchangeability checks reduce to orbit-uniform measures, one per bag, and
//! are therefore exact up to floating accumulation. IID checks maximise the
//! expectation over the simplex of generating distributions.

pub mod simplex;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::space::{for_each_sequence, Bag, BagIndex, DataSequence, Distribution};
use crate::table::{average_over_prefix, canonical_index, ext_real, orbit_sums, BagPolynomial, FnTable};

pub use simplex::{sup_over_simplex, SupResult};

/// The function classes a table can be checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    PR,
    PX,
    PtR,
    PtX,
    ER,
    EX,
    EtR,
    EtX,
    EiR,
    TestCondEX,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 10] = [
        ClassLabel::PR,
        ClassLabel::PX,
        ClassLabel::PtR,
        ClassLabel::PtX,
        ClassLabel::ER,
        ClassLabel::EX,
        ClassLabel::EtR,
        ClassLabel::EtX,
        ClassLabel::EiR,
        ClassLabel::TestCondEX,
    ];

    pub fn is_p_class(self) -> bool {
        matches!(self, ClassLabel::PR | ClassLabel::PX | ClassLabel::PtR | ClassLabel::PtX)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::PR => "PR",
            ClassLabel::PX => "PX",
            ClassLabel::PtR => "PtR",
            ClassLabel::PtX => "PtX",
            ClassLabel::ER => "ER",
            ClassLabel::EX => "EX",
            ClassLabel::EtR => "EtR",
            ClassLabel::EtX => "EtX",
            ClassLabel::EiR => "EiR",
            ClassLabel::TestCondEX => "TestCondEX",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        ClassLabel::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| LabError::InvalidParameter(format!("unknown class `{s}`")))
    }
}

/// Where a check attains its worst value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Witness {
    None,
    Bag(Bag),
    Distribution(Distribution),
    Sequence(DataSequence),
    Level {
        epsilon: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        bag: Option<Bag>,
        #[serde(skip_serializing_if = "Option::is_none")]
        distribution: Option<Distribution>,
    },
}

/// Verdict of a validity oracle.
///
/// `ok` is `worst_value <= bound + tolerance`; the bound is 1 for e-checks and
/// the offending level `epsilon` for p-checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub class: String,
    pub ok: bool,
    #[serde(with = "ext_real")]
    pub worst_value: f64,
    pub bound: f64,
    pub witness: Witness,
    pub tolerance: f64,
    /// False when an IID supremum search did not settle; the value is then a lower bound.
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl CheckReport {
    pub(crate) fn new(class: impl Into<String>, worst_value: f64, bound: f64, witness: Witness, tolerance: f64) -> Self {
        Self {
            class: class.into(),
            ok: worst_value <= bound + tolerance,
            worst_value,
            bound,
            witness,
            tolerance,
            converged: true,
        }
    }

    /// Fails this report with an explanatory class suffix unless `cond` holds.
    pub(crate) fn require(mut self, cond: bool, what: &str) -> Self {
        if !cond {
            self.ok = false;
            self.class = format!("{} (not {what})", self.class);
        }
        self
    }
}

/// Tolerances for the exchangeability and IID checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub exch: f64,
    pub iid: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { exch: 1e-9, iid: 1e-6 }
    }
}

/// `ok` iff every orbit mean is at most `1 + tol`; the worst bag is the witness.
pub fn check_e_exchangeable(table: &FnTable, tol: f64) -> CheckReport {
    let index = BagIndex::new(table.space().z_card(), table.seq_len());
    let sums = orbit_sums(table, &index);
    let (worst_rank, worst) = sums
        .iter()
        .enumerate()
        .map(|(r, s)| (r, s / index.bag(r).orbit_size()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one bag");
    CheckReport::new("EX", worst, 1.0, Witness::Bag(index.bag(worst_rank).clone()), tol)
}

/// Supremum over IID measures of the table's expectation, with the maximising `Q`.
pub fn sup_iid_expectation(table: &FnTable) -> SupResult {
    sup_over_simplex(&BagPolynomial::from_table(table))
}

/// `ok` iff `sup_Q E_{Q^N}[table] <= 1 + tol`.
pub fn check_e_iid(table: &FnTable, tol: f64) -> CheckReport {
    check_e_iid_poly(&BagPolynomial::from_table(table), tol)
}

/// IID e-check on a table given only through its orbit sums; used where the dense
/// table would exceed the budget but the table is known orbit by orbit.
pub fn check_e_iid_poly(poly: &BagPolynomial, tol: f64) -> CheckReport {
    let sup = sup_over_simplex(poly);
    let mut report = CheckReport::new("ER", sup.value, 1.0, Witness::Distribution(sup.argmax), tol);
    report.converged = sup.converged;
    report
}

/// Values of each orbit, sorted ascending, indexed by bag rank.
fn orbit_values(table: &FnTable, index: &BagIndex) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); index.count()];
    let mut scratch = vec![0u32; table.space().z_card()];
    let values = table.values();
    for_each_sequence(table.space().z_card(), table.seq_len(), |i, seq| {
        out[index.rank_sequence(seq, &mut scratch)].push(values[i]);
    });
    for v in out.iter_mut() {
        v.sort_by(f64::total_cmp);
    }
    out
}

/// `ok` iff on every orbit, at every realised level `eps`, the fraction of orderings
/// with value `<= eps` is at most `eps + tol`.
pub fn check_p_exchangeable(table: &FnTable, tol: f64) -> CheckReport {
    let index = BagIndex::new(table.space().z_card(), table.seq_len());
    let orbits = orbit_values(table, &index);
    let mut worst = (f64::NEG_INFINITY, 0.0, 0.0, 0usize); // (excess, fraction, eps, bag)
    for (rank, vals) in orbits.iter().enumerate() {
        let size = vals.len() as f64;
        let mut k = 0;
        while k < vals.len() {
            let eps = vals[k];
            let mut j = k;
            while j < vals.len() && vals[j] <= eps {
                j += 1;
            }
            let fraction = j as f64 / size;
            if eps < 1.0 && fraction - eps > worst.0 {
                worst = (fraction - eps, fraction, eps, rank);
            }
            k = j;
        }
    }
    if worst.0 == f64::NEG_INFINITY {
        // every value is >= 1: never below any level under 1
        return CheckReport::new("PX", 0.0, 0.0, Witness::None, tol);
    }
    let (_, fraction, eps, rank) = worst;
    CheckReport::new(
        "PX",
        fraction,
        eps,
        Witness::Level { epsilon: eps, bag: Some(index.bag(rank).clone()), distribution: None },
        tol,
    )
}

/// `ok` iff `sup_Q Q^N(table <= eps) <= eps + tol` for every level in `grid` and every
/// distinct table value below 1.
pub fn check_p_iid(table: &FnTable, grid: &[f64], tol: f64) -> CheckReport {
    let index = BagIndex::new(table.space().z_card(), table.seq_len());
    let orbits = orbit_values(table, &index);
    let mut levels: Vec<f64> = table.values().iter().chain(grid).copied().filter(|&e| (0.0..1.0).contains(&e)).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    let bags = index.bags();
    let mut worst: Option<(f64, f64, f64, Distribution, bool)> = None;
    for &eps in &levels {
        let terms = bags
            .iter()
            .zip(&orbits)
            .map(|(bag, vals)| (bag.counts().to_vec(), vals.partition_point(|&v| v <= eps) as f64))
            .collect();
        let sup = sup_over_simplex(&BagPolynomial::new(table.space().z_card(), terms));
        let excess = sup.value - eps;
        if worst.as_ref().is_none_or(|w| excess > w.0) {
            worst = Some((excess, sup.value, eps, sup.argmax, sup.converged));
        }
    }
    match worst {
        None => CheckReport::new("PR", 0.0, 0.0, Witness::None, tol),
        Some((_, value, eps, q, converged)) => {
            let mut r = CheckReport::new(
                "PR",
                value,
                eps,
                Witness::Level { epsilon: eps, bag: None, distribution: Some(q) },
                tol,
            );
            r.converged = converged;
            r
        }
    }
}

/// Invariance under every permutation of the first `prefix` positions, exact comparison.
fn invariant_over_prefix(table: &FnTable, prefix: usize) -> bool {
    let z = table.space().z_card();
    let values = table.values();
    let mut scratch = Vec::with_capacity(table.seq_len());
    let mut ok = true;
    for_each_sequence(z, table.seq_len(), |i, seq| {
        if ok && values[i] != values[canonical_index(seq, prefix, z, &mut scratch)] {
            ok = false;
        }
    });
    ok
}

/// Unchanged under all permutations of the training positions.
pub fn check_train_invariant(table: &FnTable) -> bool {
    invariant_over_prefix(table, table.n())
}

/// Unchanged under all permutations of all positions.
pub fn check_fully_invariant(table: &FnTable) -> bool {
    invariant_over_prefix(table, table.seq_len())
}

/// `cond` is indexed as a table over `(z_1, ..., z_n, z_{n+1})`, read as `G(z_1..z_n | z_{n+1})`.
/// `ok` iff for every sequence the average over training reorderings is at most `1 + tol`.
pub fn check_test_conditional(cond: &FnTable, tol: f64) -> CheckReport {
    let avg = average_over_prefix(cond, cond.n());
    let (worst_idx, worst) = avg
        .values()
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty table");
    let seq = DataSequence::new(cond.space(), avg.decode(worst_idx)).expect("decoded index is in range");
    CheckReport::new("TestCondEX", worst, 1.0, Witness::Sequence(seq), tol)
}

/// Dispatches to the checker(s) defining `class`.
pub fn check_class(table: &FnTable, class: ClassLabel, tol: Tolerances) -> CheckReport {
    use ClassLabel::*;
    let train = || Some((check_train_invariant(table), "train-invariant"));
    let (mut report, invariance) = match class {
        ER => (check_e_iid(table, tol.iid), None),
        EX => (check_e_exchangeable(table, tol.exch), None),
        EtR => (check_e_iid(table, tol.iid), train()),
        EtX => (check_e_exchangeable(table, tol.exch), train()),
        EiR => (check_e_iid(table, tol.iid), Some((check_fully_invariant(table), "fully invariant"))),
        TestCondEX => (check_test_conditional(table, tol.exch), None),
        PR => (check_p_iid(table, &[], tol.iid), None),
        PX => (check_p_exchangeable(table, tol.exch), None),
        PtR => (check_p_iid(table, &[], tol.iid), train()),
        PtX => (check_p_exchangeable(table, tol.exch), train()),
    };
    report.class = class.name().to_string();
    if let Some((holds, what)) = invariance {
        report = report.require(holds, what);
    }
    if class.is_p_class() {
        report = report.require(table.max_value() <= 1.0, "bounded by 1");
    }
    report
}
