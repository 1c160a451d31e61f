//! Thin deterministic wrapper around the sparse direct solver used for the
//! Newton correction equations.

use std::sync::Once;

use faer::linalg::solvers::Solve;
use faer::sparse::SparseColMat;

use crate::error::{Error, Result};

pub use faer::sparse::Triplet;

/// Entry in COO form; duplicates are summed on assembly.
pub type Entry = Triplet<usize, usize, f64>;

static INIT: Once = Once::new();

/// Force a sequential kernel schedule so factorizations are bit-reproducible
/// across runs and thread settings.
pub fn init_deterministic() {
    INIT.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Solve the n-by-n sparse system given in COO triplets. Returns the gauge
/// hint error if the factorization finds the matrix singular.
pub fn solve_sparse(n: usize, entries: &[Entry], rhs: &[f64]) -> Result<Vec<f64>> {
    init_deterministic();
    assert_eq!(rhs.len(), n);
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, entries)
        .map_err(|e| Error::RankDeficient(format!("bad sparse structure: {e:?}")))?;
    let lu = mat.sp_lu().map_err(|e| {
        Error::RankDeficient(format!(
            "singular Newton matrix ({e:?}); the multiplier gauge is only pinned \
             through the terminal cost, so check the terminal spec and weight"
        ))
    })?;
    let b = faer::Mat::from_fn(n, 1, |i, _| rhs[i]);
    let x = lu.solve(&b);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    // The factorization itself does not reject exact zero pivots; they
    // surface as non-finite solution entries instead.
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient(
            "singular Newton matrix (non-finite solve); the multiplier gauge is only \
             pinned through the terminal cost, so check the terminal spec and weight"
                .into(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        // [[2,1],[1,3]] x = [3,5] -> x = [4/5, 7/5]
        let entries = vec![
            Entry::new(0, 0, 2.0),
            Entry::new(0, 1, 1.0),
            Entry::new(1, 0, 0.5),
            Entry::new(1, 0, 0.5),
            Entry::new(1, 1, 3.0),
        ];
        let x = solve_sparse(2, &entries, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14);
        assert!((x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn flags_singular_matrix() {
        let entries = vec![
            Entry::new(0, 0, 1.0),
            Entry::new(0, 1, 1.0),
            Entry::new(1, 0, 1.0),
            Entry::new(1, 1, 1.0),
        ];
        assert!(solve_sparse(2, &entries, &[1.0, 1.0]).is_err());
    }
}
