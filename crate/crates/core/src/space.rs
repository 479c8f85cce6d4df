//! Finite observation spaces, data sequences, bags and IID measures.
//!
//! Observations are integer indices `z` in `[0, x_card * y_card)`, decoded as
//! `x = z / y_card`, `y = z % y_card`. A data sequence of length `N = n + 1`
//! holds `n` training observations followed by the test observation.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Default cap on the number of dense table entries (`z_card^(n+1)`).
pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// Largest sequence length for which orbits are enumerated permutation by permutation.
pub const MAX_ORBIT_LEN: usize = 9;

/// Index of an observation in `Z = X × Y`.
pub type Observation = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct ObservationSpace {
    x_card: usize,
    y_card: usize,
}

#[derive(Deserialize)]
struct RawSpace {
    x_card: usize,
    y_card: usize,
}

impl TryFrom<RawSpace> for ObservationSpace {
    type Error = LabError;

    fn try_from(raw: RawSpace) -> Result<Self> {
        ObservationSpace::new(raw.x_card, raw.y_card)
    }
}

impl ObservationSpace {
    pub fn new(x_card: usize, y_card: usize) -> Result<Self> {
        if x_card == 0 || y_card < 2 {
            return Err(LabError::InvalidSpace { x_card, y_card });
        }
        Ok(Self { x_card, y_card })
    }

    /// Parses the `XxY` form used on the command line, e.g. `1x3`.
    pub fn parse(s: &str) -> Result<Self> {
        let (x, y) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| LabError::Malformed(format!("space `{s}` is not of the form XxY")))?;
        let x = x
            .trim()
            .parse()
            .map_err(|_| LabError::Malformed(format!("bad object count in `{s}`")))?;
        let y = y
            .trim()
            .parse()
            .map_err(|_| LabError::Malformed(format!("bad label count in `{s}`")))?;
        Self::new(x, y)
    }

    pub fn x_card(&self) -> usize {
        self.x_card
    }

    pub fn y_card(&self) -> usize {
        self.y_card
    }

    pub fn z_card(&self) -> usize {
        self.x_card * self.y_card
    }

    pub fn encode(&self, x: usize, y: usize) -> Observation {
        debug_assert!(x < self.x_card && y < self.y_card);
        x * self.y_card + y
    }

    pub fn decode(&self, z: Observation) -> (usize, usize) {
        (z / self.y_card, z % self.y_card)
    }

    pub fn object(&self, z: Observation) -> usize {
        z / self.y_card
    }

    pub fn label(&self, z: Observation) -> usize {
        z % self.y_card
    }

    /// Same object as `z`, label replaced by `y`.
    pub fn with_label(&self, z: Observation, y: usize) -> Observation {
        self.encode(self.object(z), y)
    }

    /// Number of sequences of length `len`, refusing anything above `budget`.
    pub fn table_len(&self, len: usize, budget: u64) -> Result<usize> {
        let needed = (self.z_card() as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
        if needed > budget as u128 {
            return Err(LabError::BudgetExceeded { needed, budget });
        }
        Ok(needed as usize)
    }
}

impl std::fmt::Display for ObservationSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.x_card, self.y_card)
    }
}

/// Training observations followed by one test observation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataSequence {
    obs: Vec<Observation>,
}

impl DataSequence {
    pub fn new(space: &ObservationSpace, obs: Vec<Observation>) -> Result<Self> {
        if obs.is_empty() {
            return Err(LabError::LengthMismatch { expected: 1, got: 0 });
        }
        if let Some(&bad) = obs.iter().find(|&&z| z >= space.z_card()) {
            return Err(LabError::ObservationOutOfRange { obs: bad, z_card: space.z_card() });
        }
        Ok(Self { obs })
    }

    pub fn obs(&self) -> &[Observation] {
        &self.obs
    }

    /// Training length `n`.
    pub fn n(&self) -> usize {
        self.obs.len() - 1
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn train(&self) -> &[Observation] {
        &self.obs[..self.obs.len() - 1]
    }

    pub fn test(&self) -> Observation {
        self.obs[self.obs.len() - 1]
    }

    pub fn into_inner(self) -> Vec<Observation> {
        self.obs
    }
}

/// Multiset of observations stored as a count profile over `Z`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Bag {
    counts: Vec<u32>,
}

impl Bag {
    pub fn from_counts(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|&c| c as usize).sum()
    }

    pub fn count(&self, z: Observation) -> u32 {
        self.counts[z]
    }

    /// Members in nondecreasing order; the canonical representative of the orbit.
    pub fn sorted_members(&self) -> Vec<Observation> {
        self.counts
            .iter()
            .enumerate()
            .flat_map(|(z, &c)| std::iter::repeat_n(z, c as usize))
            .collect()
    }

    /// Distinct members with positive count.
    pub fn support(&self) -> impl Iterator<Item = Observation> + '_ {
        self.counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(z, _)| z)
    }

    /// Number of distinct orderings, `N! / prod(c_z!)`.
    pub fn orbit_size(&self) -> f64 {
        multinomial(&self.counts)
    }
}

pub fn bag_of(seq: &DataSequence, space: &ObservationSpace) -> Bag {
    bag_of_slice(seq.obs(), space.z_card())
}

pub fn bag_of_slice(obs: &[Observation], z_card: usize) -> Bag {
    let mut counts = vec![0u32; z_card];
    for &z in obs {
        counts[z] += 1;
    }
    Bag { counts }
}

/// Multinomial coefficient as a float; exact for the sizes used here.
pub fn multinomial(counts: &[u32]) -> f64 {
    let mut acc = 1.0f64;
    let mut seen = 0u32;
    for &c in counts {
        for i in 1..=c {
            seen += 1;
            acc = acc * seen as f64 / i as f64;
        }
    }
    acc.round()
}

pub fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Probability profile `Q` over `Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(LabError::InvalidDistribution("empty profile".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LabError::InvalidDistribution(format!("negative or non-finite entry in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Builds a distribution from a point known to be on the simplex up to rounding.
    pub(crate) fn from_simplex_point(mut probs: Vec<f64>) -> Self {
        for p in probs.iter_mut() {
            *p = p.max(0.0);
        }
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Self { probs }
    }

    pub fn uniform(z_card: usize) -> Self {
        Self { probs: vec![1.0 / z_card as f64; z_card] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// `Q^N` probability of one particular sequence.
    pub fn sequence_prob(&self, obs: &[Observation]) -> f64 {
        obs.iter().map(|&z| self.probs[z]).product()
    }

    /// `prod_z Q(z)^c_z`, the probability of any single ordering of the bag.
    pub fn monomial(&self, counts: &[u32]) -> f64 {
        counts
            .iter()
            .zip(&self.probs)
            .filter(|(&c, _)| c > 0)
            .map(|(&c, &q)| q.powi(c as i32))
            .product()
    }
}

/// Rank/unrank of bags of a fixed size via the combinatorial number system.
///
/// A bag with sorted members `s_0 <= ... <= s_{N-1}` maps to the strictly
/// increasing `t_i = s_i + i`, whose colex rank `sum C(t_i, i + 1)` is the bag index.
#[derive(Debug, Clone)]
pub struct BagIndex {
    z_card: usize,
    len: usize,
    binom: Vec<Vec<u64>>,
    bags: Vec<Bag>,
}

impl BagIndex {
    pub fn new(z_card: usize, len: usize) -> Self {
        let rows = z_card + len + 1;
        let mut binom = vec![vec![0u64; len + 2]; rows];
        for row in binom.iter_mut() {
            row[0] = 1;
        }
        for r in 1..rows {
            for k in 1..=len + 1 {
                binom[r][k] = binom[r - 1][k - 1] + binom[r - 1][k];
            }
        }
        let mut index = Self { z_card, len, binom, bags: Vec::new() };
        let count = index.count();
        let mut bags = vec![Bag::from_counts(vec![0; z_card]); count];
        let mut counts = vec![0u32; z_card];
        compositions(&mut counts, 0, len as u32, &mut |c| {
            let rank = index.rank_counts(c);
            bags[rank] = Bag::from_counts(c.to_vec());
        });
        index.bags = bags;
        index
    }

    pub fn z_card(&self) -> usize {
        self.z_card
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Number of bags, `C(z_card + N - 1, N)`.
    pub fn count(&self) -> usize {
        if self.z_card == 0 {
            return 0;
        }
        self.binom[self.z_card + self.len - 1][self.len] as usize
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn bag(&self, rank: usize) -> &Bag {
        &self.bags[rank]
    }

    pub fn rank_counts(&self, counts: &[u32]) -> usize {
        let mut rank = 0u64;
        let mut i = 0usize;
        for (z, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                rank += self.binom[z + i][i + 1];
                i += 1;
            }
        }
        rank as usize
    }

    pub fn rank_bag(&self, bag: &Bag) -> usize {
        self.rank_counts(bag.counts())
    }

    /// Bag rank of a sequence, via a scratch count buffer.
    pub fn rank_sequence(&self, obs: &[Observation], scratch: &mut [u32]) -> usize {
        scratch.iter_mut().for_each(|c| *c = 0);
        for &z in obs {
            scratch[z] += 1;
        }
        self.rank_counts(scratch)
    }
}

fn compositions(counts: &mut [u32], pos: usize, remaining: u32, f: &mut impl FnMut(&[u32])) {
    if pos + 1 == counts.len() {
        counts[pos] = remaining;
        f(counts);
        counts[pos] = 0;
        return;
    }
    for c in (0..=remaining).rev() {
        counts[pos] = c;
        compositions(counts, pos + 1, remaining - c, f);
    }
    counts[pos] = 0;
}

/// All bags of size `len` over the space, in rank order.
pub fn enumerate_bags(space: &ObservationSpace, len: usize) -> Vec<Bag> {
    BagIndex::new(space.z_card(), len).bags
}

/// Odometer over all sequences of a given length in row-major order
/// (position 0 most significant).
#[derive(Debug, Clone)]
pub struct SequenceIter {
    z_card: usize,
    digits: Vec<Observation>,
    remaining: usize,
}

impl SequenceIter {
    fn new(z_card: usize, len: usize, total: usize) -> Self {
        Self { z_card, digits: vec![0; len], remaining: total }
    }

    fn step(&mut self) {
        for d in self.digits.iter_mut().rev() {
            *d += 1;
            if *d < self.z_card {
                return;
            }
            *d = 0;
        }
    }
}

impl Iterator for SequenceIter {
    type Item = Vec<Observation>;

    fn next(&mut self) -> Option<Vec<Observation>> {
        if self.remaining == 0 {
            return None;
        }
        let out = self.digits.clone();
        self.remaining -= 1;
        self.step();
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for SequenceIter {}

/// All sequences of length `len`, or `BudgetExceeded` when `z_card^len > budget`.
pub fn enumerate_sequences(space: &ObservationSpace, len: usize, budget: u64) -> Result<SequenceIter> {
    let total = space.table_len(len, budget)?;
    Ok(SequenceIter::new(space.z_card(), len, total))
}

/// Calls `f(index, sequence)` for every sequence of length `len` in row-major order.
pub fn for_each_sequence(z_card: usize, len: usize, mut f: impl FnMut(usize, &[Observation])) {
    let total = z_card.pow(len as u32);
    let mut digits = vec![0usize; len];
    for idx in 0..total {
        f(idx, &digits);
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < z_card {
                break;
            }
            *d = 0;
        }
    }
}

/// Row-major index of a sequence.
pub fn sequence_index(obs: &[Observation], z_card: usize) -> usize {
    obs.iter().fold(0usize, |acc, &z| acc * z_card + z)
}

/// Decodes a row-major index into `out`.
pub fn decode_index(mut idx: usize, z_card: usize, out: &mut [Observation]) {
    for slot in out.iter_mut().rev() {
        *slot = idx % z_card;
        idx /= z_card;
    }
}

/// Heap's algorithm: calls `f` on every permutation of `items` (including the identity).
pub fn for_each_permutation<T>(items: &mut [T], mut f: impl FnMut(&[T])) {
    let k = items.len();
    let mut c = vec![0usize; k];
    f(items);
    let mut i = 0;
    while i < k {
        if c[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(c[i], i);
            }
            f(items);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn space_round_trip() {
        let s = ObservationSpace::new(3, 4).unwrap();
        for z in 0..s.z_card() {
            let (x, y) = s.decode(z);
            assert_eq!(s.encode(x, y), z);
            assert_eq!(x, z / 4);
            assert_eq!(y, z % 4);
        }
        assert!(ObservationSpace::new(1, 1).is_err());
        assert!(ObservationSpace::new(0, 2).is_err());
        assert_eq!(ObservationSpace::parse("2x3").unwrap().z_card(), 6);
        assert!(ObservationSpace::parse("2-3").is_err());
    }

    #[test]
    fn bag_of_examples() {
        let s = ObservationSpace::new(1, 2).unwrap();
        let seq = DataSequence::new(&s, vec![0, 1, 0]).unwrap();
        assert_eq!(bag_of(&seq, &s).counts(), &[2, 1]);
        let seq = DataSequence::new(&s, vec![1, 1, 1, 1]).unwrap();
        assert_eq!(bag_of(&seq, &s).counts(), &[0, 4]);
        let s3 = ObservationSpace::new(1, 3).unwrap();
        let a = bag_of(&DataSequence::new(&s3, vec![2, 0, 1]).unwrap(), &s3);
        let b = bag_of(&DataSequence::new(&s3, vec![1, 2, 0]).unwrap(), &s3);
        assert_eq!(a, b);
    }

    #[test]
    fn sequence_rejects_out_of_range() {
        let s = ObservationSpace::new(1, 2).unwrap();
        assert!(DataSequence::new(&s, vec![0, 2]).is_err());
        assert!(DataSequence::new(&s, vec![]).is_err());
    }

    #[test]
    fn enumeration_counts() {
        for (y, len, bags, seqs) in [(2, 2, 3, 4), (3, 2, 6, 9), (2, 4, 5, 16)] {
            let s = ObservationSpace::new(1, y).unwrap();
            assert_eq!(enumerate_bags(&s, len).len(), bags);
            assert_eq!(enumerate_sequences(&s, len, DEFAULT_BUDGET).unwrap().count(), seqs);
        }
    }

    #[test]
    fn budget_is_enforced() {
        let s = ObservationSpace::new(2, 5).unwrap();
        assert!(matches!(
            enumerate_sequences(&s, 8, DEFAULT_BUDGET),
            Err(LabError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn bag_rank_is_a_bijection() {
        for (z, len) in [(2, 3), (3, 4), (4, 4), (8, 3)] {
            let idx = BagIndex::new(z, len);
            let mut seen = vec![false; idx.count()];
            for (r, bag) in idx.bags().iter().enumerate() {
                assert_eq!(bag.total(), len);
                assert_eq!(idx.rank_bag(bag), r);
                assert!(!seen[r]);
                seen[r] = true;
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn orbit_sizes_sum_to_table_len() {
        let s = ObservationSpace::new(2, 2).unwrap();
        let total: f64 = enumerate_bags(&s, 4).iter().map(Bag::orbit_size).sum();
        assert_eq!(total, 256.0);
    }

    #[test]
    fn heap_permutations_are_complete() {
        let mut items = [0, 1, 2, 3];
        let mut seen = std::collections::HashSet::new();
        for_each_permutation(&mut items, |p| {
            seen.insert(p.to_vec());
        });
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn index_round_trip() {
        let mut out = [0; 3];
        for_each_sequence(3, 3, |i, seq| {
            assert_eq!(sequence_index(seq, 3), i);
            decode_index(i, 3, &mut out);
            assert_eq!(&out, seq);
        });
    }
}
