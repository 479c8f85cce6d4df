//! Conformal predictors and conformal e-predictors over a finite observation space.
//!
//! A nonconformity measure scores a member of the augmented bag
//! `{z_1, ..., z_n, (x, y)}`. The conformal p-value ranks the test score
//! among all `n + 1` scores; the conformal e-value is the test score relative
//! to the average score.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::space::{bag_of_slice, for_each_sequence, Bag, BagIndex, Observation, ObservationSpace};
use crate::table::FnTable;

/// Scores a member of a bag; larger means stranger.
///
/// The bag is passed by counts, so a measure cannot depend on the order of the
/// training sequence.
pub trait NonconformityMeasure: Sync {
    fn score(&self, bag: &Bag, member: Observation) -> f64;
}

impl<F> NonconformityMeasure for F
where
    F: Fn(&Bag, Observation) -> f64 + Sync,
{
    fn score(&self, bag: &Bag, member: Observation) -> f64 {
        self(bag, member)
    }
}

/// Support-vector style binary score: 1 when the member's label is outnumbered,
/// among bag members with the same object, by some other label; 0 otherwise.
#[derive(Debug, Clone, Copy)]
pub struct MinorityLabelScore {
    pub space: ObservationSpace,
}

impl NonconformityMeasure for MinorityLabelScore {
    fn score(&self, bag: &Bag, member: Observation) -> f64 {
        let x = self.space.object(member);
        let own = bag.count(member);
        let best = (0..self.space.y_card()).map(|y| bag.count(self.space.encode(x, y))).max().unwrap_or(0);
        if own < best {
            1.0
        } else {
            0.0
        }
    }
}

/// Nearest-neighbour ratio over integer-coded objects, `d_same / (d_same + d_other)`.
///
/// `d_same` is the distance `|x - x'|` to the nearest other member with the same
/// label and `d_other` to the nearest member with a different label. A missing
/// neighbour counts as infinitely far; `0/0` and `inf/inf` score 1/2.
#[derive(Debug, Clone, Copy)]
pub struct NearestNeighbourScore {
    pub space: ObservationSpace,
}

impl NonconformityMeasure for NearestNeighbourScore {
    fn score(&self, bag: &Bag, member: Observation) -> f64 {
        let (x, y) = self.space.decode(member);
        let mut d_same = f64::INFINITY;
        let mut d_other = f64::INFINITY;
        for z in bag.support() {
            let (x2, y2) = self.space.decode(z);
            if z == member && bag.count(z) < 2 {
                continue;
            }
            let d = (x as f64 - x2 as f64).abs();
            if y2 == y {
                d_same = d_same.min(d);
            } else {
                d_other = d_other.min(d);
            }
        }
        match (d_same.is_infinite(), d_other.is_infinite()) {
            (true, true) => 0.5,
            (true, false) => 1.0,
            (false, true) => 0.0,
            (false, false) if d_same + d_other == 0.0 => 0.5,
            _ => d_same / (d_same + d_other),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantScore(pub f64);

impl NonconformityMeasure for ConstantScore {
    fn score(&self, _bag: &Bag, _member: Observation) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub bag_counts: Vec<u32>,
    pub member: Observation,
    pub score: f64,
}

/// Score looked up from a table of `(bag_counts, member) -> score`; absent pairs score `default`.
#[derive(Debug, Clone, Default)]
pub struct CustomScore {
    entries: HashMap<(Vec<u32>, Observation), f64>,
    pub default: f64,
}

impl CustomScore {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn from_entries(entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut map = HashMap::with_capacity(entries.len());
        for e in entries {
            if !(e.score >= 0.0) {
                return Err(LabError::Malformed(format!("negative or NaN score {}", e.score)));
            }
            if e.member >= e.bag_counts.len() || e.bag_counts[e.member] == 0 {
                return Err(LabError::Malformed(format!("member {} is not in bag {:?}", e.member, e.bag_counts)));
            }
            map.insert((e.bag_counts, e.member), e.score);
        }
        Ok(Self { entries: map, default: 0.0 })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_entries(&self) -> Vec<ScoreEntry> {
        let mut out: Vec<ScoreEntry> = self
            .entries
            .iter()
            .map(|((b, m), &s)| ScoreEntry { bag_counts: b.clone(), member: *m, score: s })
            .collect();
        out.sort_by(|a, b| (&a.bag_counts, a.member).cmp(&(&b.bag_counts, b.member)));
        out
    }
}

impl NonconformityMeasure for CustomScore {
    fn score(&self, bag: &Bag, member: Observation) -> f64 {
        // TODO: avoid the key allocation by storing bag ranks once the space is known at load time
        self.entries.get(&(bag.counts().to_vec(), member)).copied().unwrap_or(self.default)
    }
}

/// Scores of every member of the bag, indexed by observation (`NaN` where absent).
fn bag_scores(a: &dyn NonconformityMeasure, bag: &Bag) -> Vec<f64> {
    let mut out = vec![f64::NAN; bag.counts().len()];
    for z in bag.support() {
        out[z] = a.score(bag, z);
    }
    out
}

/// Counts `(#{alpha_i > alpha_test}, #{alpha_i == alpha_test})` over the bag.
fn rank_counts(bag: &Bag, scores: &[f64], test: Observation) -> (u32, u32) {
    let t = scores[test];
    let mut greater = 0;
    let mut equal = 0;
    for z in bag.support() {
        if scores[z] > t {
            greater += bag.count(z);
        } else if scores[z] == t {
            equal += bag.count(z);
        }
    }
    (greater, equal)
}

fn p_from_scores(bag: &Bag, scores: &[f64], test: Observation, tau: Option<f64>) -> f64 {
    let (greater, equal) = rank_counts(bag, scores, test);
    let len = bag.total() as f64;
    match tau {
        None => (greater + equal) as f64 / len,
        Some(t) => (greater as f64 + t * equal as f64) / len,
    }
}

fn e_from_scores(bag: &Bag, scores: &[f64], test: Observation) -> f64 {
    let total: f64 = bag.support().map(|z| bag.count(z) as f64 * scores[z]).sum();
    let num = bag.total() as f64 * scores[test];
    if total == 0.0 && num == 0.0 {
        1.0
    } else {
        num / total
    }
}

fn augmented_bag(space: &ObservationSpace, train: &[Observation], x: usize, y: usize) -> Result<(Bag, Observation)> {
    if x >= space.x_card() || y >= space.y_card() {
        return Err(LabError::InvalidParameter(format!("object {x} / label {y} outside space {space}")));
    }
    if let Some(&bad) = train.iter().find(|&&z| z >= space.z_card()) {
        return Err(LabError::ObservationOutOfRange { obs: bad, z_card: space.z_card() });
    }
    let test = space.encode(x, y);
    let mut bag = bag_of_slice(train, space.z_card());
    let mut counts = bag.counts().to_vec();
    counts[test] += 1;
    bag = Bag::from_counts(counts);
    Ok((bag, test))
}

fn check_tau(tau: Option<f64>) -> Result<()> {
    match tau {
        Some(t) if !(0.0..=1.0).contains(&t) => Err(LabError::InvalidParameter(format!("tau {t} outside [0,1]"))),
        _ => Ok(()),
    }
}

/// Conformal p-value of label `y` for object `x`; smoothed when `tau` is given.
pub fn conformal_p(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    train: &[Observation],
    x: usize,
    y: usize,
    tau: Option<f64>,
) -> Result<f64> {
    check_tau(tau)?;
    let (bag, test) = augmented_bag(space, train, x, y)?;
    Ok(p_from_scores(&bag, &bag_scores(a, &bag), test, tau))
}

/// Conformal e-value `(n+1) alpha_test / sum_i alpha_i`, with `0/0 = 1`.
pub fn conformal_e(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    train: &[Observation],
    x: usize,
    y: usize,
) -> Result<f64> {
    let (bag, test) = augmented_bag(space, train, x, y)?;
    Ok(e_from_scores(&bag, &bag_scores(a, &bag), test))
}

/// Binary conformal prediction: p and e for a score with range `{0, 1}`.
pub fn binary_conformal(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    train: &[Observation],
    x: usize,
    y: usize,
) -> Result<(f64, f64)> {
    let (bag, test) = augmented_bag(space, train, x, y)?;
    let scores = bag_scores(a, &bag);
    if let Some(z) = bag.support().find(|&z| scores[z] != 0.0 && scores[z] != 1.0) {
        return Err(LabError::NotBinary(scores[z]));
    }
    Ok((p_from_scores(&bag, &scores, test, None), e_from_scores(&bag, &scores, test)))
}

/// p-values and e-values of every candidate label for one test object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalOutput {
    pub p: Vec<f64>,
    pub e: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothed_p: Option<Vec<f64>>,
}

pub fn predict(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    train: &[Observation],
    x: usize,
    tau: Option<f64>,
) -> Result<ConformalOutput> {
    check_tau(tau)?;
    let mut p = Vec::with_capacity(space.y_card());
    let mut e = Vec::with_capacity(space.y_card());
    let mut smoothed = tau.map(|_| Vec::with_capacity(space.y_card()));
    for y in 0..space.y_card() {
        let (bag, test) = augmented_bag(space, train, x, y)?;
        let scores = bag_scores(a, &bag);
        p.push(p_from_scores(&bag, &scores, test, None));
        e.push(e_from_scores(&bag, &scores, test));
        if let Some(s) = smoothed.as_mut() {
            s.push(p_from_scores(&bag, &scores, test, tau));
        }
    }
    Ok(ConformalOutput { p, e, smoothed_p: smoothed })
}

/// `{y : p(y) > eps}`.
pub fn prediction_set(p: &[f64], eps: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(LabError::InvalidParameter(format!("significance level {eps} outside [0,1)")));
    }
    Ok(p.iter().enumerate().filter(|(_, &v)| v > eps).map(|(y, _)| y).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PVariant {
    Deterministic,
    Smoothed(f64),
}

/// Per-bag lookup of `f(bag, scores, test)` for every test observation in the bag.
fn bag_lookup<T: Clone + Default>(
    a: &dyn NonconformityMeasure,
    index: &BagIndex,
    f: impl Fn(&Bag, &[f64], Observation) -> T,
) -> Vec<Vec<T>> {
    index
        .bags()
        .iter()
        .map(|bag| {
            let scores = bag_scores(a, bag);
            let mut row = vec![T::default(); bag.counts().len()];
            for z in bag.support() {
                row[z] = f(bag, &scores, z);
            }
            row
        })
        .collect()
}

fn table_from_lookup(space: &ObservationSpace, n: usize, budget: u64, lookup: &[Vec<f64>], index: &BagIndex) -> Result<FnTable> {
    let len = space.table_len(n + 1, budget)?;
    let mut values = Vec::with_capacity(len);
    let mut scratch = vec![0u32; space.z_card()];
    for_each_sequence(space.z_card(), n + 1, |_, seq| {
        let rank = index.rank_sequence(seq, &mut scratch);
        values.push(lookup[rank][seq[n]]);
    });
    FnTable::from_values(*space, n, values)
}

/// Conformal p-table: entry at `(z_1..z_{n+1})` is the p-value with `z_{n+1}` as test observation.
pub fn p_table(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    n: usize,
    variant: PVariant,
    budget: u64,
) -> Result<FnTable> {
    space.table_len(n + 1, budget)?;
    let tau = match variant {
        PVariant::Deterministic => None,
        PVariant::Smoothed(t) => Some(t),
    };
    check_tau(tau)?;
    let index = BagIndex::new(space.z_card(), n + 1);
    let lookup = bag_lookup(a, &index, |bag, scores, z| p_from_scores(bag, scores, z, tau));
    table_from_lookup(space, n, budget, &lookup, &index)
}

/// Conformal e-table.
pub fn e_table(a: &dyn NonconformityMeasure, space: &ObservationSpace, n: usize, budget: u64) -> Result<FnTable> {
    space.table_len(n + 1, budget)?;
    let index = BagIndex::new(space.z_card(), n + 1);
    let lookup = bag_lookup(a, &index, e_from_scores);
    table_from_lookup(space, n, budget, &lookup, &index)
}

/// Outcome of checking that smoothed p-values are exactly uniform on every orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedExactness {
    /// `max |Pr(p <= eps) - eps|` over bags and realised levels.
    pub max_deviation: f64,
    pub levels_checked: usize,
}

/// Enumerates every orbit and, at each level realised by `tau in {0, 1/4, 1/2, 3/4, 1}`,
/// computes the exact probability (uniform ordering, uniform `tau`) that the smoothed
/// p-value is at most that level.
pub fn smoothed_exactness(
    a: &dyn NonconformityMeasure,
    space: &ObservationSpace,
    n: usize,
    budget: u64,
) -> Result<SmoothedExactness> {
    space.table_len(n + 1, budget)?;
    let index = BagIndex::new(space.z_card(), n + 1);
    let lookup = bag_lookup(a, &index, rank_counts);
    // orbit members grouped by bag: (lo, hi) range of the smoothed p-value as tau runs over [0, 1]
    let mut intervals: Vec<Vec<(f64, f64)>> = vec![Vec::new(); index.count()];
    let mut scratch = vec![0u32; space.z_card()];
    let len = (n + 1) as f64;
    for_each_sequence(space.z_card(), n + 1, |_, seq| {
        let rank = index.rank_sequence(seq, &mut scratch);
        let (greater, equal) = lookup[rank][seq[n]];
        intervals[rank].push((greater as f64 / len, (greater + equal) as f64 / len));
    });
    let mut max_dev = 0.0f64;
    let mut levels_checked = 0;
    for members in &intervals {
        let size = members.len() as f64;
        let mut levels: Vec<f64> = members
            .iter()
            .flat_map(|&(lo, hi)| [0.0, 0.25, 0.5, 0.75, 1.0].map(|t| lo + t * (hi - lo)))
            .collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for eps in levels {
            let prob: f64 = members.iter().map(|&(lo, hi)| ((eps - lo) / (hi - lo)).clamp(0.0, 1.0)).sum::<f64>() / size;
            max_dev = max_dev.max((prob - eps).abs());
            levels_checked += 1;
        }
    }
    Ok(SmoothedExactness { max_deviation: max_dev, levels_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_e_exchangeable, check_p_exchangeable, check_train_invariant};
    use crate::space::DEFAULT_BUDGET;

    fn s(x: usize, y: usize) -> ObservationSpace {
        ObservationSpace::new(x, y).unwrap()
    }

    /// Score read off a fixed per-observation list, independent of the bag.
    fn fixed(scores: &'static [f64]) -> impl Fn(&Bag, Observation) -> f64 + Sync {
        move |_: &Bag, z: Observation| scores[z]
    }

    #[test]
    fn p_value_counting() {
        // train scores 1, 3, 2 and candidate score 2: #{>= 2} = 3 of 4
        let sp = s(1, 4);
        let a = fixed(&[1.0, 3.0, 2.0, 2.0]);
        assert_eq!(conformal_p(&a, &sp, &[0, 1, 2], 0, 3, None).unwrap(), 0.75);

        assert_eq!(conformal_p(&ConstantScore(0.4), &sp, &[0, 1, 2], 0, 3, None).unwrap(), 1.0);

        let a = fixed(&[1.0, 1.0, 1.0, 9.0]);
        assert_eq!(conformal_p(&a, &sp, &[0, 1, 2], 0, 3, None).unwrap(), 0.25);
    }

    #[test]
    fn smoothed_p_value() {
        let sp = s(1, 4);
        let a = fixed(&[1.0, 3.0, 2.0, 2.0]);
        // one strictly greater, two equal (train 2 and the test itself)
        let p = conformal_p(&a, &sp, &[0, 1, 2], 0, 3, Some(0.5)).unwrap();
        assert_eq!(p, (1.0 + 0.5 * 2.0) / 4.0);
        assert!(conformal_p(&a, &sp, &[0, 1, 2], 0, 3, Some(1.5)).is_err());
    }

    #[test]
    fn e_value_examples() {
        let sp = s(1, 4);
        assert_eq!(conformal_e(&ConstantScore(2.0), &sp, &[0, 1, 2], 0, 3).unwrap(), 1.0);
        assert_eq!(conformal_e(&ConstantScore(0.0), &sp, &[0, 1, 2], 0, 3).unwrap(), 1.0);
        let unique = fixed(&[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(conformal_e(&unique, &sp, &[0, 1, 2], 0, 3).unwrap(), 4.0);
        let zero_test = fixed(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(conformal_e(&zero_test, &sp, &[0, 1, 2], 0, 3).unwrap(), 0.0);
    }

    #[test]
    fn binary_examples() {
        let sp = s(1, 2);
        let sv = fixed(&[0.0, 1.0]);
        // test score 0
        assert_eq!(binary_conformal(&sv, &sp, &[1, 0, 1], 0, 0).unwrap().0, 1.0);
        // two support vectors including the test among ten observations
        let train = [0, 0, 0, 0, 0, 0, 0, 0, 1];
        let (p, e) = binary_conformal(&sv, &sp, &train, 0, 1).unwrap();
        assert!((p - 0.2).abs() < 1e-15);
        assert_eq!(e, 5.0);
        // all support vectors
        let (p, e) = binary_conformal(&sv, &sp, &[1, 1, 1], 0, 1).unwrap();
        assert_eq!((p, e), (1.0, 1.0));
        assert!(matches!(
            binary_conformal(&ConstantScore(0.5), &sp, &[1], 0, 1),
            Err(LabError::NotBinary(_))
        ));
    }

    #[test]
    fn minority_score_marks_outnumbered_labels() {
        let sp = s(2, 2);
        let bag = Bag::from_counts(vec![2, 1, 0, 1]);
        let a = MinorityLabelScore { space: sp };
        assert_eq!(a.score(&bag, 0), 0.0);
        assert_eq!(a.score(&bag, 1), 1.0);
        assert_eq!(a.score(&bag, 3), 0.0);
    }

    #[test]
    fn nearest_neighbour_conventions() {
        let sp = s(3, 2);
        let a = NearestNeighbourScore { space: sp };
        // (0,0) and (2,0) share a label at distance 2; (1,1) is at distance 1
        let bag = bag_of_slice(&[sp.encode(0, 0), sp.encode(2, 0), sp.encode(1, 1)], 6);
        assert!((a.score(&bag, sp.encode(0, 0)) - 2.0 / 3.0).abs() < 1e-15);
        // (1,1) has no same-label neighbour
        assert_eq!(a.score(&bag, sp.encode(1, 1)), 1.0);
        let lonely = bag_of_slice(&[sp.encode(0, 0)], 6);
        assert_eq!(a.score(&lonely, sp.encode(0, 0)), 0.5);
    }

    #[test]
    fn prediction_set_examples() {
        let p = [0.25, 1.0, 0.5];
        assert_eq!(prediction_set(&p, 0.2).unwrap(), vec![0, 1, 2]);
        assert_eq!(prediction_set(&p, 0.3).unwrap(), vec![1, 2]);
        assert!(prediction_set(&p, 1.0).is_err());
        assert!(prediction_set(&p, 0.99).unwrap().len() == 1);
        let a = prediction_set(&p, 0.6).unwrap();
        let b = prediction_set(&p, 0.4).unwrap();
        assert!(a.iter().all(|y| b.contains(y)));
    }

    #[test]
    fn p_floor_keeps_every_label() {
        let sp = s(2, 3);
        let a = NearestNeighbourScore { space: sp };
        let out = predict(&a, &sp, &[0, 4, 5], 1, None).unwrap();
        assert!(out.p.iter().all(|&p| p >= 0.25));
        assert_eq!(prediction_set(&out.p, 0.2).unwrap().len(), 3);
    }

    #[test]
    fn tables_are_valid() {
        let sp = s(1, 3);
        let a = MinorityLabelScore { space: sp };
        let p = p_table(&a, &sp, 2, PVariant::Deterministic, DEFAULT_BUDGET).unwrap();
        assert!(check_p_exchangeable(&p, 1e-9).ok);
        assert!(check_train_invariant(&p));
        let e = e_table(&a, &sp, 2, DEFAULT_BUDGET).unwrap();
        assert!(check_e_exchangeable(&e, 1e-9).ok);
        assert!(check_train_invariant(&e));
        let c = p_table(&ConstantScore(1.0), &sp, 2, PVariant::Deterministic, DEFAULT_BUDGET).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn smoothed_is_exact() {
        let sp = s(2, 2);
        let r = smoothed_exactness(&NearestNeighbourScore { space: sp }, &sp, 3, DEFAULT_BUDGET).unwrap();
        assert!(r.max_deviation < 1e-12, "{r:?}");
        assert!(r.levels_checked > 0);
    }

    #[test]
    fn custom_score_json() {
        let js = r#"[{"bag_counts":[1,1],"member":1,"score":2.5},{"bag_counts":[2,0],"member":0,"score":0.5}]"#;
        let c = CustomScore::from_json(js).unwrap();
        assert_eq!(c.score(&Bag::from_counts(vec![1, 1]), 1), 2.5);
        assert_eq!(c.score(&Bag::from_counts(vec![1, 1]), 0), 0.0);
        assert_eq!(c.to_entries().len(), 2);
        assert!(CustomScore::from_json(r#"[{"bag_counts":[1,0],"member":1,"score":1}]"#).is_err());
    }
}
