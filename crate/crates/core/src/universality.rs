//! Reductions from IID prediction to (conformal) exchangeability prediction.
//!
//! * [`decompose`] splits an IID e-variable into an exchangeability factor and a
//!   fully invariant IID factor.
//! * [`minimal_g_kolmogorov`] and [`minimal_g_traininv`] build the pointwise
//!   smallest witness `G` allowed by the Kolmogorov and train-invariance
//!   inequalities. Both target classes are closed under taking smaller
//!   nonnegative functions, so such a `G` exists in the class iff the minimal one
//!   is in it; checking the minimal witness decides existence for the instance.
//! * [`full_p_chain`] and [`train_invariant_p_chain`] compose the steps into a
//!   certificate relating an IID p-predictor to a conformal predictor.
//!
//! Inequalities `A >= c B / C` are always checked as `A C >= c B`.

use serde::{Deserialize, Serialize};

use crate::calibration::{apply_calibrator, apply_e_to_p, Calibrator};
use crate::error::{LabError, Result};
use crate::oracle::{
    check_e_exchangeable, check_e_iid, check_fully_invariant, check_p_exchangeable, check_p_iid,
    check_test_conditional, check_train_invariant, sup_iid_expectation, CheckReport, Tolerances,
};
use crate::space::for_each_sequence;
use crate::table::{average_over_prefix, FnTable};

/// Relative inflation applied to chain witnesses so that equality cases of the
/// certificate inequalities survive floating-point rounding.
pub const ROUNDING_GUARD: f64 = 1.0 + 1e-12;

/// `e (|Y| - 1)`, the Kolmogorov-step constant.
pub fn kolmogorov_constant(y_card: usize) -> f64 {
    std::f64::consts::E * (y_card as f64 - 1.0)
}

/// Average over all `(n+1)!` reorderings of the arguments.
pub fn permutation_average(e: &FnTable) -> FnTable {
    average_over_prefix(e, e.seq_len())
}

/// Average over all `n!` reorderings of the training arguments, test fixed.
pub fn train_average(e: &FnTable) -> FnTable {
    average_over_prefix(e, e.n())
}

/// `a / b` with `0/0 = 1`.
fn ratio_zero_zero_one(a: f64, b: f64) -> f64 {
    if a == 0.0 && b == 0.0 {
        1.0
    } else {
        a / b
    }
}

/// `E = E' F` with `E'` an exchangeability e-variable and `F` a fully invariant IID e-variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub exch: FnTable,
    pub invariant: FnTable,
}

/// Splits `e` without checking that it is an IID e-variable.
pub fn decompose_unchecked(e: &FnTable) -> Decomposition {
    let invariant = permutation_average(e);
    let exch = e.zip_map(&invariant, ratio_zero_zero_one).expect("same shape");
    Decomposition { exch, invariant }
}

/// Splits an IID e-variable; rejects inputs failing the IID check, with the maximising `Q`.
pub fn decompose(e: &FnTable, tol: Tolerances) -> Result<Decomposition> {
    let report = check_e_iid(e, tol.iid);
    if !report.ok {
        return Err(stage_error("input in ER", &report));
    }
    Ok(decompose_unchecked(e))
}

/// Oracle verdicts on a decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub exch: CheckReport,
    pub invariant_full: bool,
    pub invariant_iid: CheckReport,
    /// `E' F = E` (relative 1e-12) wherever `F > 0`.
    pub reconstructs: bool,
    /// `F = 0` implies `E = 0` and `E' = 1`.
    pub zero_consistent: bool,
}

impl DecompositionCheck {
    pub fn ok(&self) -> bool {
        self.exch.ok && self.invariant_full && self.invariant_iid.ok && self.reconstructs && self.zero_consistent
    }
}

pub fn verify_decomposition(e: &FnTable, d: &Decomposition, tol: Tolerances) -> DecompositionCheck {
    let mut reconstructs = true;
    let mut zero_consistent = true;
    for ((&orig, &ex), &f) in e.values().iter().zip(d.exch.values()).zip(d.invariant.values()) {
        if f > 0.0 {
            let back = ex * f;
            if !(back == orig || (back - orig).abs() <= 1e-12 * orig.abs()) {
                reconstructs = false;
            }
        } else if orig != 0.0 || ex != 1.0 {
            zero_consistent = false;
        }
    }
    DecompositionCheck {
        exch: check_e_exchangeable(&d.exch, tol.exch),
        invariant_full: check_fully_invariant(&d.invariant),
        invariant_iid: check_e_iid(&d.invariant, tol.iid),
        reconstructs,
        zero_consistent,
    }
}

/// Pointwise product of an exchangeability e-variable and an invariant IID e-variable.
pub fn product_embed(exch: &FnTable, invariant: &FnTable, tol: Tolerances) -> Result<FnTable> {
    let r = check_e_exchangeable(exch, tol.exch);
    if !r.ok {
        return Err(stage_error("first factor in EX", &r));
    }
    if !check_fully_invariant(invariant) {
        return Err(LabError::StageFailed {
            stage: "second factor in EiR".into(),
            detail: "factor is not invariant under permutations".into(),
        });
    }
    let r = check_e_iid(invariant, tol.iid);
    if !r.ok {
        return Err(stage_error("second factor in EiR", &r));
    }
    exch.zip_map(invariant, crate::table::mul_ext)
}

fn stage_error(stage: &str, report: &CheckReport) -> LabError {
    LabError::StageFailed {
        stage: stage.to_string(),
        detail: serde_json::to_string(report).unwrap_or_else(|_| format!("{report:?}")),
    }
}

/// Walks every sequence and every false label `y != y_{n+1}`, calling
/// `f(index of the sequence, index of the sequence with its last label replaced by y)`.
fn for_each_false_label(table: &FnTable, mut f: impl FnMut(usize, usize)) {
    let space = *table.space();
    let n = table.n();
    let mut alt = vec![0; table.seq_len()];
    for_each_sequence(space.z_card(), table.seq_len(), |i, seq| {
        alt.copy_from_slice(seq);
        let test = seq[n];
        for y in 0..space.y_card() {
            if y == space.label(test) {
                continue;
            }
            alt[n] = space.with_label(test, y);
            f(i, table.index_of(&alt));
        }
    });
}

/// `H(z_1..z_{n+1}) = max_{y != y_{n+1}} T(z_1..z_n, x_{n+1}, y)`.
pub fn max_over_false_labels(t: &FnTable) -> FnTable {
    let mut out = vec![0.0f64; t.len()];
    let values = t.values();
    for_each_false_label(t, |i, j| out[i] = out[i].max(values[j]));
    FnTable::from_values(*t.space(), t.n(), out).expect("same shape as input")
}

/// Smallest `G` with `G(z_1..z_{n+1}) >= F(z_1..z_n, x_{n+1}, y) / (e (|Y|-1))` for all
/// `y != y_{n+1}`, together with its IID e-check.
pub fn minimal_g_kolmogorov(f: &FnTable, tol: Tolerances) -> Result<(FnTable, CheckReport)> {
    if !check_fully_invariant(f) {
        return Err(LabError::StageFailed {
            stage: "F in EiR".into(),
            detail: "F is not invariant under permutations".into(),
        });
    }
    let r = check_e_iid(f, tol.iid);
    if !r.ok {
        return Err(stage_error("F in EiR", &r));
    }
    let c = kolmogorov_constant(f.space().y_card());
    let g = max_over_false_labels(f).scale(1.0 / c);
    let report = check_e_iid(&g, tol.iid);
    Ok((g, report))
}

/// Smallest test-conditional `G` with
/// `G(z_1..z_n | z_{n+1}) * bar E(z_1..z_n, x, y) >= E(z_1..z_n, x, y) / (|Y| - 1)` for all
/// `y != y_{n+1}`, with `0/0 = 1`; returned as a table over `(z_1, ..., z_{n+1})`.
pub fn minimal_g_traininv(e: &FnTable, tol: Tolerances) -> Result<(FnTable, CheckReport)> {
    let r = check_e_exchangeable(e, tol.exch);
    if !r.ok {
        return Err(stage_error("E in EX", &r));
    }
    let g = traininv_witness(e);
    let report = check_test_conditional(&g, tol.exch);
    Ok((g, report))
}

fn traininv_witness(e: &FnTable) -> FnTable {
    let bar = train_average(e);
    let ratio = e.zip_map(&bar, ratio_zero_zero_one).expect("same shape");
    let k = e.space().y_card() as f64 - 1.0;
    max_over_false_labels(&ratio).scale(1.0 / k)
}

/// Largest `rhs / lhs` over all checked pairs, or infinity when some `lhs = 0 < rhs`.
#[derive(Debug, Clone, Copy)]
struct Pointwise {
    holds: bool,
    worst_ratio: f64,
    pairs: usize,
}

impl Pointwise {
    fn new() -> Self {
        Self { holds: true, worst_ratio: 0.0, pairs: 0 }
    }

    /// Records the requirement `small <= large`; NaN on either side fails.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn require(&mut self, small: f64, large: f64) {
        self.pairs += 1;
        if !(small <= large) {
            self.holds = false;
        }
        let r = if small == 0.0 {
            0.0
        } else if large == 0.0 {
            f64::INFINITY
        } else {
            small / large
        };
        if r > self.worst_ratio || r.is_nan() {
            self.worst_ratio = r;
        }
    }
}

/// Outcome of the Kolmogorov-step corollary: `E' >= E / (e (|Y|-1) G)` for every false label.
#[derive(Debug, Clone)]
pub struct KolmogorovChain {
    pub decomposition: Decomposition,
    pub g: FnTable,
    pub g_report: CheckReport,
    pub pointwise_ok: bool,
    /// Largest `E / (e (|Y|-1) E' G)` over sequences and false labels; at most 1 when `pointwise_ok`.
    pub worst_ratio: f64,
}

impl KolmogorovChain {
    pub fn ok(&self) -> bool {
        self.g_report.ok && self.pointwise_ok
    }
}

pub fn corollary_kolmogorov_chain(e: &FnTable, tol: Tolerances) -> Result<KolmogorovChain> {
    let decomposition = decompose(e, tol)?;
    let (g_min, _) = minimal_g_kolmogorov(&decomposition.invariant, tol)?;
    let g = g_min.scale(ROUNDING_GUARD);
    let g_report = check_e_iid(&g, tol.iid);
    let c = kolmogorov_constant(e.space().y_card());
    let mut pw = Pointwise::new();
    let (ev, exv, gv) = (e.values(), decomposition.exch.values(), g.values());
    for_each_false_label(e, |i, j| pw.require(ev[j], exv[j] * gv[i] * c));
    Ok(KolmogorovChain { decomposition, g, g_report, pointwise_ok: pw.holds, worst_ratio: pw.worst_ratio })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// IID p-predictor to conformal predictor, constant `e (|Y|-1)^2 / delta`.
    Full,
    /// Train-invariant IID p-predictor to conformal predictor, constant `e (|Y|-1) / delta`.
    TrainInvariant,
}

/// Certificate `P' <= constant * G^k * P^(1 - delta)` for every sequence and false label,
/// with `k = 2` in full mode and `k = 1` in train-invariant mode.
#[derive(Debug, Clone)]
pub struct ChainCertificate {
    pub mode: ChainMode,
    pub p_conformal: FnTable,
    pub g_iid: FnTable,
    pub delta: f64,
    pub y_card: usize,
    pub constant: f64,
    /// Oracle verdicts for every stage, in order.
    pub stages: Vec<(String, CheckReport)>,
    pub inequality_holds: bool,
    /// Largest `P' / (constant G^k P^(1-delta))`; at most 1 when the inequality holds.
    pub worst_ratio: f64,
    pub pairs_checked: usize,
    pub verified: bool,
}

impl ChainCertificate {
    /// Right-hand side of the certificate at sequence index `i` and false-label index `j`.
    pub fn bound(&self, p: &FnTable, i: usize, j: usize) -> f64 {
        let g = self.g_iid.values()[i];
        let gk = match self.mode {
            ChainMode::Full => g * g,
            ChainMode::TrainInvariant => g,
        };
        self.constant * gk * p.values()[j].powf(1.0 - self.delta)
    }

    pub fn summary(&self) -> ChainSummary {
        ChainSummary {
            mode: self.mode,
            delta: self.delta,
            y_card: self.y_card,
            constant: self.constant,
            verified: self.verified,
            inequality_holds: self.inequality_holds,
            worst_ratio: self.worst_ratio,
            pairs_checked: self.pairs_checked,
            stages: self.stages.iter().map(|(s, r)| StageSummary { stage: s.clone(), ok: r.ok, worst_value: r.worst_value, bound: r.bound }).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub ok: bool,
    #[serde(with = "crate::table::ext_real")]
    pub worst_value: f64,
    pub bound: f64,
}

/// Serializable view of a certificate without its tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub mode: ChainMode,
    pub delta: f64,
    pub y_card: usize,
    pub constant: f64,
    pub verified: bool,
    pub inequality_holds: bool,
    #[serde(with = "crate::table::ext_real")]
    pub worst_ratio: f64,
    pub pairs_checked: usize,
    pub stages: Vec<StageSummary>,
}

fn invariance_report(name: &str, holds: bool) -> CheckReport {
    CheckReport::new(name, if holds { 0.0 } else { 1.0 }, 0.0, crate::oracle::Witness::None, 0.0)
}

/// IID p-predictor to conformal predictor through calibration, the Kolmogorov step,
/// the train-invariance step and e-to-p calibration.
pub fn full_p_chain(p: &FnTable, delta: f64, tol: Tolerances) -> Result<ChainCertificate> {
    run_chain(p, delta, tol, ChainMode::Full)
}

/// As [`full_p_chain`] for a train-invariant input, skipping the train-invariance step.
pub fn train_invariant_p_chain(p: &FnTable, delta: f64, tol: Tolerances) -> Result<ChainCertificate> {
    run_chain(p, delta, tol, ChainMode::TrainInvariant)
}

fn run_chain(p: &FnTable, delta: f64, tol: Tolerances, mode: ChainMode) -> Result<ChainCertificate> {
    let calibrator = Calibrator::power(delta)?;
    let y_card = p.space().y_card();
    let k = y_card as f64 - 1.0;
    let mut stages: Vec<(String, CheckReport)> = Vec::new();
    let mut gate = |stage: &str, report: CheckReport| -> Result<()> {
        let ok = report.ok;
        stages.push((stage.to_string(), report));
        if ok {
            Ok(())
        } else {
            Err(stage_error(stage, &stages.last().expect("just pushed").1))
        }
    };

    gate("input P in PR", check_p_iid(p, &[], tol.iid))?;
    if mode == ChainMode::TrainInvariant {
        gate("input P train-invariant", invariance_report("PtR", check_train_invariant(p)))?;
    }

    // calibration
    let e = apply_calibrator(&calibrator, p);
    gate("calibrated E in ER", check_e_iid(&e, tol.iid))?;

    // Kolmogorov step
    let d = decompose_unchecked(&e);
    gate("E' in EX", check_e_exchangeable(&d.exch, tol.exch))?;
    gate("F invariant", invariance_report("EiR", check_fully_invariant(&d.invariant)))?;
    gate("F in ER", check_e_iid(&d.invariant, tol.iid))?;
    let g1 = max_over_false_labels(&d.invariant).scale(ROUNDING_GUARD / kolmogorov_constant(y_card));
    gate("G1 in ER", check_e_iid(&g1, tol.iid))?;

    let (e_final, g, constant) = match mode {
        ChainMode::Full => {
            let e2 = train_average(&d.exch);
            let g2 = traininv_witness(&d.exch).scale(ROUNDING_GUARD);
            gate("G2 test-conditional", check_test_conditional(&g2, tol.exch))?;
            let g = g1.zip_map(&g2, |a, b| (a * b).sqrt())?;
            gate("G in ER", check_e_iid(&g, tol.iid))?;
            (e2, g, kolmogorov_constant(y_card) * k / delta)
        }
        ChainMode::TrainInvariant => (d.exch.clone(), g1, kolmogorov_constant(y_card) / delta),
    };
    gate("E'' in EX", check_e_exchangeable(&e_final, tol.exch))?;
    gate("E'' train-invariant", invariance_report("EtX", check_train_invariant(&e_final)))?;

    // e-to-p calibration
    let p_conformal = apply_e_to_p(&e_final);
    gate("P' in PX", check_p_exchangeable(&p_conformal, tol.exch))?;
    gate("P' train-invariant", invariance_report("PtX", check_train_invariant(&p_conformal)))?;

    let mut cert = ChainCertificate {
        mode,
        p_conformal,
        g_iid: g,
        delta,
        y_card,
        constant,
        stages,
        inequality_holds: false,
        worst_ratio: 0.0,
        pairs_checked: 0,
        verified: false,
    };
    let mut pw = Pointwise::new();
    let pc = cert.p_conformal.values();
    for_each_false_label(p, |i, j| pw.require(pc[j], cert.bound(p, i, j)));
    cert.inequality_holds = pw.holds;
    cert.worst_ratio = pw.worst_ratio;
    cert.pairs_checked = pw.pairs;
    cert.verified = pw.holds && cert.stages.iter().all(|(_, r)| r.ok);
    Ok(cert)
}

/// Compares the right-hand sides of a train-invariant certificate and a full certificate
/// for the same input: returns `(holds, min ratio)` where `holds` means the
/// train-invariant bound is pointwise no larger than the full bound.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn compare_bounds(p: &FnTable, traininv: &ChainCertificate, full: &ChainCertificate) -> (bool, f64) {
    let mut holds = true;
    let mut min_ratio = f64::INFINITY;
    for_each_false_label(p, |i, j| {
        let a = traininv.bound(p, i, j);
        let b = full.bound(p, i, j);
        if !(a <= b) {
            holds = false;
        }
        if a > 0.0 {
            min_ratio = min_ratio.min(b / a);
        }
    });
    (holds, min_ratio)
}

/// Smallest admissible denominator for the Kolmogorov witness of `F`:
/// `sup_Q E_Q[max_{y != y_{n+1}} F(.., x_{n+1}, y)]`. The Kolmogorov step bounds it by
/// `e (|Y| - 1)`.
pub fn kolmogorov_tightness(f: &FnTable) -> f64 {
    sup_iid_expectation(&max_over_false_labels(f)).value
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ObservationSpace, DEFAULT_BUDGET};

    fn binary() -> ObservationSpace {
        ObservationSpace::new(1, 2).unwrap()
    }

    #[test]
    fn permutation_average_examples() {
        let sym = FnTable::from_values(binary(), 1, vec![0.2, 0.7, 0.7, 0.9]).unwrap();
        assert_eq!(permutation_average(&sym), sym);
        let e = FnTable::from_values(binary(), 1, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(permutation_average(&e).values(), &[1.0, 1.0, 1.0, 1.0]);
        // indicator of (0,0,1): orbit of size 3
        let s = ObservationSpace::new(1, 2).unwrap();
        let ind = FnTable::from_fn(s, 2, DEFAULT_BUDGET, |q| if q == [0, 0, 1] { 1.0 } else { 0.0 }).unwrap();
        let f = permutation_average(&ind);
        for (i, &v) in f.values().iter().enumerate() {
            let seq = f.decode(i);
            let in_orbit = seq.iter().filter(|&&z| z == 1).count() == 1;
            assert_eq!(v, if in_orbit { 1.0 / 3.0 } else { 0.0 });
        }
    }

    #[test]
    fn decompose_examples() {
        let tol = Tolerances::default();
        let one = FnTable::constant(binary(), 2, 1.0, DEFAULT_BUDGET).unwrap();
        let d = decompose(&one, tol).unwrap();
        assert_eq!(d.exch, one);
        assert_eq!(d.invariant, one);

        let e = FnTable::from_values(binary(), 1, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let d = decompose(&e, tol).unwrap();
        assert!(d.invariant.values().iter().all(|&v| v == 1.0));
        assert_eq!(d.exch, e);
        assert!(verify_decomposition(&e, &d, tol).ok());

        let too_big = FnTable::from_values(binary(), 1, vec![0.0, 5.0, 0.0, 0.0]).unwrap();
        assert!(matches!(decompose(&too_big, tol), Err(LabError::StageFailed { .. })));
    }

    #[test]
    fn product_embed_examples() {
        let tol = Tolerances::default();
        let one = FnTable::constant(binary(), 1, 1.0, DEFAULT_BUDGET).unwrap();
        let prod = product_embed(&one, &one, tol).unwrap();
        assert_eq!(prod, one);
        let ex = FnTable::from_values(binary(), 1, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(product_embed(&ex, &one, tol).unwrap(), ex);
        assert!(product_embed(&one, &ex, tol).is_err());
    }

    #[test]
    fn kolmogorov_worked_example() {
        // F(a,b) = F(b,a) = 2, F(a,a) = F(b,b) = 0; sup 4 q (1-q) = 1
        let f = FnTable::from_values(binary(), 1, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let (g, report) = minimal_g_kolmogorov(&f, Tolerances::default()).unwrap();
        let two_over_e = 2.0 / std::f64::consts::E;
        assert!((g.values()[0] - two_over_e).abs() < 1e-15);
        assert_eq!(g.values()[1], 0.0);
        assert_eq!(g.values()[2], 0.0);
        assert!((g.values()[3] - two_over_e).abs() < 1e-15);
        assert!(report.ok);
        assert!((report.worst_value - two_over_e).abs() < 1e-9);
        assert!((kolmogorov_tightness(&f) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn kolmogorov_constant_input() {
        let s = ObservationSpace::new(1, 3).unwrap();
        let one = FnTable::constant(s, 1, 1.0, DEFAULT_BUDGET).unwrap();
        let (g, r) = minimal_g_kolmogorov(&one, Tolerances::default()).unwrap();
        let c = 1.0 / (std::f64::consts::E * 2.0);
        assert!(g.values().iter().all(|&v| (v - c).abs() < 1e-15));
        assert!(r.ok);
    }

    #[test]
    fn train_average_examples() {
        let s = ObservationSpace::new(1, 2).unwrap();
        // n = 2: values 4 and 0 on the orderings (0,1,t) and (1,0,t)
        let e = FnTable::from_fn(s, 2, DEFAULT_BUDGET, |q| match &q[..2] {
            [0, 1] => 4.0,
            [1, 0] => 0.0,
            _ => 1.0,
        })
        .unwrap();
        let bar = train_average(&e);
        assert_eq!(bar.get(&[0, 1, 0]), 2.0);
        assert_eq!(bar.get(&[1, 0, 1]), 2.0);
        assert!(check_train_invariant(&bar));
        assert_eq!(train_average(&bar), bar);
    }

    #[test]
    fn traininv_on_invariant_input() {
        let s = ObservationSpace::new(1, 3).unwrap();
        let e = FnTable::from_fn(s, 2, DEFAULT_BUDGET, |q| (q[2] as f64 + 1.0) / 2.0 * 0.5).unwrap();
        let (g, r) = minimal_g_traininv(&e, Tolerances::default()).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.5));
        assert!(r.ok);
    }

    #[test]
    fn trivial_chains() {
        let tol = Tolerances::default();
        let one = FnTable::constant(binary(), 1, 1.0, DEFAULT_BUDGET).unwrap();
        let k = corollary_kolmogorov_chain(&one, tol).unwrap();
        assert!(k.ok());
        assert!(k.worst_ratio < 1.0);
        for delta in [0.1, 0.5] {
            let full = full_p_chain(&one, delta, tol).unwrap();
            assert!(full.verified, "{:?}", full.summary());
            let ti = train_invariant_p_chain(&one, delta, tol).unwrap();
            assert!(ti.verified, "{:?}", ti.summary());
            assert!(compare_bounds(&one, &ti, &full).0);
        }
    }
}
