//! Seeded random members of each function class.
//!
//! A nonnegative table is drawn (dense uniform or sparse) and then rescaled by
//! the relevant oracle's worst value so that it lands on the validity boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::calibration::apply_e_to_p;
use crate::error::{LabError, Result};
use crate::oracle::{check_e_exchangeable, check_test_conditional, sup_iid_expectation, ClassLabel};
use crate::space::ObservationSpace;
use crate::table::{average_over_prefix, FnTable};

/// Generator for instance `index` of a campaign keyed by `seed`; streams are independent.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Nonnegative table with at least one positive entry: uniform on `[0,1)`, or sparse
/// (about 60% zeros) with probability 1/2.
pub fn random_table(space: &ObservationSpace, n: usize, budget: u64, rng: &mut impl Rng) -> Result<FnTable> {
    let sparse = rng.gen_bool(0.5);
    let len = space.table_len(n + 1, budget)?;
    let mut values: Vec<f64> = (0..len)
        .map(|_| {
            if sparse && rng.gen_bool(0.6) {
                0.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    if values.iter().all(|&v| v == 0.0) {
        let i = rng.gen_range(0..len);
        values[i] = 1.0;
    }
    FnTable::from_values(*space, n, values)
}

fn rescale(table: FnTable, worst: f64) -> Result<FnTable> {
    if !(worst > 0.0 && worst.is_finite()) {
        return Err(LabError::InvalidParameter(format!("cannot rescale by worst value {worst}")));
    }
    Ok(table.scale(1.0 / worst))
}

/// IID e-variable on the boundary `sup_Q E_Q = 1`.
pub fn rescale_iid(table: FnTable) -> Result<FnTable> {
    let sup = sup_iid_expectation(&table).value;
    rescale(table, sup)
}

/// Exchangeability e-variable whose worst orbit mean is 1.
pub fn rescale_exchangeable(table: FnTable) -> Result<FnTable> {
    let worst = check_e_exchangeable(&table, 0.0).worst_value;
    rescale(table, worst)
}

/// Random member of `class` over `space` with training length `n`.
pub fn random_in_class(
    class: ClassLabel,
    space: &ObservationSpace,
    n: usize,
    budget: u64,
    rng: &mut impl Rng,
) -> Result<FnTable> {
    use ClassLabel::*;
    let raw = random_table(space, n, budget, rng)?;
    let len = n + 1;
    match class {
        ER => rescale_iid(raw),
        EX => rescale_exchangeable(raw),
        EtR => rescale_iid(average_over_prefix(&raw, n)),
        EtX => rescale_exchangeable(average_over_prefix(&raw, n)),
        EiR => rescale_iid(average_over_prefix(&raw, len)),
        TestCondEX => {
            let worst = check_test_conditional(&raw, 0.0).worst_value;
            rescale(raw, worst)
        }
        PR => Ok(apply_e_to_p(&rescale_iid(raw)?)),
        PX => Ok(apply_e_to_p(&rescale_exchangeable(raw)?)),
        PtR => Ok(apply_e_to_p(&rescale_iid(average_over_prefix(&raw, n))?)),
        PtX => Ok(apply_e_to_p(&rescale_exchangeable(average_over_prefix(&raw, n))?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{check_class, Tolerances};
    use crate::space::DEFAULT_BUDGET;

    #[test]
    fn random_members_pass_their_own_check() {
        let space = ObservationSpace::new(1, 3).unwrap();
        for (i, class) in ClassLabel::ALL.iter().enumerate() {
            let mut rng = instance_rng(11, i as u64);
            let t = random_in_class(*class, &space, 2, DEFAULT_BUDGET, &mut rng).unwrap();
            let r = check_class(&t, *class, Tolerances::default());
            assert!(r.ok, "{class}: {r:?}");
        }
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = instance_rng(3, 0).gen();
        let b: u64 = instance_rng(3, 0).gen();
        let c: u64 = instance_rng(3, 1).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
