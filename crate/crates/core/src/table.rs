//! Dense function tables over `Z^(n+1)` and the expectations computed from them.

use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::space::{
    decode_index, for_each_permutation, for_each_sequence, sequence_index, Bag, BagIndex, Distribution, Observation,
    ObservationSpace, MAX_ORBIT_LEN,
};

/// Values of a p-variable or e-variable on every sequence of length `n + 1`.
///
/// Entries are indexed row-major over positions (position 0 most significant).
/// `+inf` is allowed; negative entries and NaN are not.
#[derive(Debug, Clone, PartialEq)]
pub struct FnTable {
    space: ObservationSpace,
    n: usize,
    values: Vec<f64>,
}

impl FnTable {
    pub fn from_values(space: ObservationSpace, n: usize, values: Vec<f64>) -> Result<Self> {
        let expected = (space.z_card() as u128).checked_pow(n as u32 + 1).unwrap_or(u128::MAX);
        if values.len() as u128 != expected {
            return Err(LabError::Dimension(format!(
                "{} values for space {space} and n = {n}, expected {expected}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(LabError::Malformed(format!("table entry {v} is negative or NaN")));
        }
        Ok(Self { space, n, values })
    }

    pub fn constant(space: ObservationSpace, n: usize, c: f64, budget: u64) -> Result<Self> {
        let len = space.table_len(n + 1, budget)?;
        Self::from_values(space, n, vec![c; len])
    }

    /// Builds a table by evaluating `f` on every sequence.
    pub fn from_fn(
        space: ObservationSpace,
        n: usize,
        budget: u64,
        mut f: impl FnMut(&[Observation]) -> f64,
    ) -> Result<Self> {
        let len = space.table_len(n + 1, budget)?;
        let mut values = Vec::with_capacity(len);
        for_each_sequence(space.z_card(), n + 1, |_, seq| values.push(f(seq)));
        Self::from_values(space, n, values)
    }

    pub fn space(&self) -> &ObservationSpace {
        &self.space
    }

    /// Training length.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Sequence length `n + 1`.
    pub fn seq_len(&self) -> usize {
        self.n + 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, obs: &[Observation]) -> f64 {
        self.values[sequence_index(obs, self.space.z_card())]
    }

    pub fn set(&mut self, obs: &[Observation], v: f64) {
        let i = sequence_index(obs, self.space.z_card());
        self.values[i] = v;
    }

    pub fn index_of(&self, obs: &[Observation]) -> usize {
        sequence_index(obs, self.space.z_card())
    }

    pub fn decode(&self, idx: usize) -> Vec<Observation> {
        let mut out = vec![0; self.seq_len()];
        decode_index(idx, self.space.z_card(), &mut out);
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { space: self.space, n: self.n, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &FnTable, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            space: self.space,
            n: self.n,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &FnTable) -> Result<()> {
        if self.space != other.space || self.n != other.n {
            return Err(LabError::Dimension(format!(
                "table over {} with n = {} vs table over {} with n = {}",
                self.space, self.n, other.space, other.n
            )));
        }
        Ok(())
    }

    /// Bag ranks of every sequence, in table order.
    pub fn bag_ranks(&self, index: &BagIndex) -> Vec<usize> {
        let mut scratch = vec![0u32; self.space.z_card()];
        let mut ranks = Vec::with_capacity(self.len());
        for_each_sequence(self.space.z_card(), self.seq_len(), |_, seq| {
            ranks.push(index.rank_sequence(seq, &mut scratch));
        });
        ranks
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Deserialize)]
struct TableRepr {
    space: ObservationSpace,
    n: usize,
    #[serde(deserialize_with = "ext_real_vec::deserialize")]
    values: Vec<f64>,
}

impl Serialize for FnTable {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Borrowed<'a> {
            space: &'a ObservationSpace,
            n: usize,
            #[serde(serialize_with = "ext_real_vec::serialize_slice")]
            values: &'a [f64],
        }
        Borrowed { space: &self.space, n: self.n, values: &self.values }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FnTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = TableRepr::deserialize(deserializer)?;
        FnTable::from_values(repr.space, repr.n, repr.values).map_err(de::Error::custom)
    }
}

/// Extended nonnegative reals in JSON: finite numbers as numbers, `+inf` as the string `"inf"`.
pub mod ext_real {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else if v.is_infinite() {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ExtRealVisitor)
    }

    pub(crate) struct ExtRealVisitor;

    impl<'de> Visitor<'de> for ExtRealVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a number or the string \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("unexpected string `{other}` in numeric field"))),
            }
        }
    }
}

mod ext_real_vec {
    use super::*;
    use serde::de::{SeqAccess, Visitor};

    struct Wrapped(f64);

    impl<'de> Deserialize<'de> for Wrapped {
        fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
            d.deserialize_any(ext_real::ExtRealVisitor).map(Wrapped)
        }
    }

    pub fn serialize_slice<S: Serializer>(values: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        struct One(f64);
        impl Serialize for One {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                ext_real::serialize(&self.0, s)
            }
        }
        let mut seq = s.serialize_seq(Some(values.len()))?;
        for &v in values {
            seq.serialize_element(&One(v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Vec<f64>;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a list of extended reals")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Vec<f64>, A::Error> {
                let mut out = Vec::with_capacity(seq.size_hint().unwrap_or(0));
                while let Some(Wrapped(v)) = seq.next_element()? {
                    out.push(v);
                }
                Ok(out)
            }
        }
        d.deserialize_seq(V)
    }
}

/// `+inf * 0 = 0`, the measure-theoretic product.
#[inline]
pub fn mul_ext(value: f64, weight: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        value * weight
    }
}

/// Average of `table` over all `(n+1)!` reorderings of the bag's canonical representative.
///
/// Equals the table's expectation under the orbit-uniform exchangeable measure of the bag.
pub fn orbit_mean(table: &FnTable, bag: &Bag) -> Result<f64> {
    let len = table.seq_len();
    if bag.total() != len || bag.counts().len() != table.space().z_card() {
        return Err(LabError::Dimension(format!("bag of size {} for sequences of length {len}", bag.total())));
    }
    if len > MAX_ORBIT_LEN {
        return Err(LabError::OrbitTooLarge { max: MAX_ORBIT_LEN, got: len });
    }
    let mut members = bag.sorted_members();
    let mut sum = 0.0;
    let mut count = 0u64;
    for_each_permutation(&mut members, |perm| {
        sum += table.get(perm);
        count += 1;
    });
    Ok(sum / count as f64)
}

/// Result of an IID expectation, recording whether `inf * 0` had to be resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IidExpectation {
    pub value: f64,
    pub inf_times_zero: bool,
}

/// Exact `sum_seq table(seq) * prod_i Q(seq_i)` over every sequence.
pub fn iid_expectation(table: &FnTable, q: &Distribution) -> Result<f64> {
    Ok(iid_expectation_detailed(table, q)?.value)
}

pub fn iid_expectation_detailed(table: &FnTable, q: &Distribution) -> Result<IidExpectation> {
    if q.len() != table.space().z_card() {
        return Err(LabError::Dimension(format!(
            "distribution over {} points for z_card = {}",
            q.len(),
            table.space().z_card()
        )));
    }
    let mut value = 0.0;
    let mut flagged = false;
    let values = table.values();
    for_each_sequence(table.space().z_card(), table.seq_len(), |i, seq| {
        let w = q.sequence_prob(seq);
        let v = values[i];
        if w == 0.0 && v.is_infinite() {
            flagged = true;
        }
        value += mul_ext(v, w);
    });
    Ok(IidExpectation { value, inf_times_zero: flagged })
}

/// `E_Q^N[T] = sum_bags coeff(bag) * prod_z Q(z)^c_z` with `coeff(bag) = sum of T over the orbit`.
#[derive(Debug, Clone)]
pub struct BagPolynomial {
    z_card: usize,
    terms: Vec<(Vec<u32>, f64)>,
}

impl BagPolynomial {
    pub fn new(z_card: usize, terms: Vec<(Vec<u32>, f64)>) -> Self {
        let terms = terms.into_iter().filter(|(_, c)| *c != 0.0).collect();
        Self { z_card, terms }
    }

    pub fn from_table(table: &FnTable) -> Self {
        let index = BagIndex::new(table.space().z_card(), table.seq_len());
        let sums = orbit_sums(table, &index);
        Self::new(
            table.space().z_card(),
            index.bags().iter().zip(sums).map(|(b, s)| (b.counts().to_vec(), s)).collect(),
        )
    }

    pub fn z_card(&self) -> usize {
        self.z_card
    }

    pub fn terms(&self) -> &[(Vec<u32>, f64)] {
        &self.terms
    }

    pub fn has_infinite_coefficient(&self) -> bool {
        self.terms.iter().any(|(_, c)| c.is_infinite())
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(counts, c)| {
                let m: f64 = counts
                    .iter()
                    .zip(q)
                    .filter(|(&k, _)| k > 0)
                    .map(|(&k, &p)| p.powi(k as i32))
                    .product();
                mul_ext(*c, m)
            })
            .sum()
    }
}

/// Sum of table values over each orbit, indexed by bag rank.
pub fn orbit_sums(table: &FnTable, index: &BagIndex) -> Vec<f64> {
    let mut sums = vec![0.0; index.count()];
    let mut scratch = vec![0u32; table.space().z_card()];
    let values = table.values();
    for_each_sequence(table.space().z_card(), table.seq_len(), |i, seq| {
        sums[index.rank_sequence(seq, &mut scratch)] += values[i];
    });
    sums
}

/// Index of the sequence with its first `prefix` positions sorted.
pub(crate) fn canonical_index(seq: &[Observation], prefix: usize, z_card: usize, scratch: &mut Vec<Observation>) -> usize {
    scratch.clear();
    scratch.extend_from_slice(seq);
    scratch[..prefix].sort_unstable();
    sequence_index(scratch, z_card)
}

/// Averages the table over permutations of its first `prefix` positions.
pub(crate) fn average_over_prefix(table: &FnTable, prefix: usize) -> FnTable {
    let z = table.space().z_card();
    let len = table.seq_len();
    let mut sums = vec![0.0; table.len()];
    let mut counts = vec![0u32; table.len()];
    let mut canon = Vec::with_capacity(table.len());
    let mut scratch = Vec::with_capacity(len);
    let values = table.values();
    for_each_sequence(z, len, |i, seq| {
        let c = canonical_index(seq, prefix, z, &mut scratch);
        sums[c] += values[i];
        counts[c] += 1;
        canon.push(c);
    });
    let values = canon.iter().map(|&c| sums[c] / counts[c] as f64).collect();
    FnTable { space: *table.space(), n: table.n(), values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{enumerate_bags, DEFAULT_BUDGET};

    fn binary() -> ObservationSpace {
        ObservationSpace::new(1, 2).unwrap()
    }

    fn two_zero_table() -> FnTable {
        // table(0,1)=2, table(1,0)=0, else 1
        FnTable::from_values(binary(), 1, vec![1.0, 2.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn orbit_mean_examples() {
        let c = FnTable::constant(binary(), 2, 0.7, DEFAULT_BUDGET).unwrap();
        for bag in enumerate_bags(&binary(), 3) {
            assert!((orbit_mean(&c, &bag).unwrap() - 0.7).abs() < 1e-15);
        }
        let t = two_zero_table();
        assert_eq!(orbit_mean(&t, &Bag::from_counts(vec![1, 1])).unwrap(), 1.0);
        assert_eq!(orbit_mean(&t, &Bag::from_counts(vec![2, 0])).unwrap(), 1.0);
        let t = FnTable::from_values(binary(), 1, vec![5.0, 2.0, 0.0, 1.0]).unwrap();
        assert_eq!(orbit_mean(&t, &Bag::from_counts(vec![2, 0])).unwrap(), 5.0);
    }

    #[test]
    fn orbit_mean_rejects_wrong_bag_size() {
        let t = two_zero_table();
        assert!(orbit_mean(&t, &Bag::from_counts(vec![2, 1])).is_err());
    }

    #[test]
    fn iid_expectation_examples() {
        let one = FnTable::constant(binary(), 1, 1.0, DEFAULT_BUDGET).unwrap();
        let q = Distribution::new(vec![0.3, 0.7]).unwrap();
        assert!((iid_expectation(&one, &q).unwrap() - 1.0).abs() < 1e-15);

        let ind = FnTable::from_values(binary(), 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let half = Distribution::uniform(2);
        assert_eq!(iid_expectation(&ind, &half).unwrap(), 0.25);

        // q0^2 + 2 q0 q1 + q1^2 = 1 for every q
        for q0 in [0.0, 0.1, 0.37, 0.5, 0.9, 1.0] {
            let q = Distribution::new(vec![q0, 1.0 - q0]).unwrap();
            assert!((iid_expectation(&two_zero_table(), &q).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn inf_times_zero_is_flagged() {
        let t = FnTable::from_values(binary(), 0, vec![1.0, f64::INFINITY]).unwrap();
        let q = Distribution::new(vec![1.0, 0.0]).unwrap();
        let e = iid_expectation_detailed(&t, &q).unwrap();
        assert_eq!(e.value, 1.0);
        assert!(e.inf_times_zero);
    }

    #[test]
    fn json_round_trip_with_infinity() {
        let t = FnTable::from_values(binary(), 1, vec![0.5, f64::INFINITY, 0.0, 1.25]).unwrap();
        let s = t.to_json().unwrap();
        assert!(s.contains("\"inf\""));
        let back = FnTable::from_json(&s).unwrap();
        assert_eq!(back, t);
        let bad = r#"{"space":{"x_card":1,"y_card":2},"n":1,"values":[1,2,3]}"#;
        assert!(matches!(FnTable::from_json(bad), Err(LabError::Json(_))));
        let bad_space = r#"{"space":{"x_card":1,"y_card":1},"n":0,"values":[1]}"#;
        assert!(FnTable::from_json(bad_space).is_err());
    }

    #[test]
    fn bag_polynomial_matches_direct_expectation() {
        let s = ObservationSpace::new(1, 3).unwrap();
        let t = FnTable::from_fn(s, 2, DEFAULT_BUDGET, |seq| (seq[0] * 3 + seq[1] + 2 * seq[2]) as f64 * 0.1).unwrap();
        let poly = BagPolynomial::from_table(&t);
        let q = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let direct = iid_expectation(&t, &q).unwrap();
        assert!((poly.eval(q.probs()) - direct).abs() < 1e-14);
    }

    #[test]
    fn orbit_indicator_expectation_is_multinomial() {
        let s = ObservationSpace::new(1, 3).unwrap();
        let bag = Bag::from_counts(vec![2, 1, 0]);
        let t = FnTable::from_fn(s, 2, DEFAULT_BUDGET, |seq| {
            if crate::space::bag_of_slice(seq, 3) == bag {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let q = Distribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let closed_form = 3.0 * 0.2 * 0.2 * 0.5;
        assert!((iid_expectation(&t, &q).unwrap() - closed_form).abs() < 1e-15);
    }
}
