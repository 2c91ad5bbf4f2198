use crate::codebook::Codebook;
use crate::error::{ensure, Result};
use crate::numkit::kernels::squared_distance;
use crate::numkit::{Tape, Tensor, Var};
use crate::par;

/// For each row of `f`, the index of the nearest row of `codes` by squared
/// Euclidean distance. Ties go to the lowest index.
pub fn nearest_codes(f: &Tensor, codes: &Tensor) -> Result<Vec<usize>> {
    ensure!(
        f.is_matrix() && codes.is_matrix() && f.cols() == codes.cols(),
        "vq_assign dimension mismatch: features {:?}, codebook {:?}",
        f.shape(),
        codes.shape()
    );
    Ok(par::map_indices(f.rows(), |i| {
        let row = f.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..codes.rows() {
            let d = squared_distance(row, codes.row(k));
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }))
}

/// Nearest-neighbor assignment: indices and the selected codebook rows.
pub fn vq_assign(f: &Tensor, codebook: &Codebook) -> Result<(Vec<usize>, Tensor)> {
    let idx = nearest_codes(f, codebook.embeddings())?;
    let z = codebook.embeddings().select_rows(&idx)?;
    Ok((idx, z))
}

/// Tape form: gradients of `z_hard` land on the selected codebook rows.
pub(crate) fn vq_assign_on_tape(tape: &mut Tape, f: Var, codes: Var) -> Result<(Vec<usize>, Var)> {
    let idx = nearest_codes(tape.value(f), tape.value(codes))?;
    let z = tape.gather_rows(codes, &idx)?;
    Ok((idx, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[Vec<f32>]) -> Codebook {
        Codebook::from_embeddings(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn nearest_by_inspection() {
        let cb = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let f = Tensor::from_rows(&[vec![0.9, 0.8]]).unwrap();
        let (idx, z) = vq_assign(&f, &cb).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(z.values(), &[1.0, 1.0]);
    }

    #[test]
    fn exact_hit_and_tie() {
        let cb = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let f = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let (idx, z) = vq_assign(&f, &cb).unwrap();
        assert_eq!(idx, vec![1, 0]);
        assert_eq!(squared_distance(f.row(0), z.row(0)), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let cb = book(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        let f = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        assert!(vq_assign(&f, &cb).is_err());
    }

    fn brute_force(f: &Tensor, c: &Tensor) -> Vec<usize> {
        (0..f.rows())
            .map(|i| {
                let dists: Vec<f64> = (0..c.rows())
                    .map(|k| {
                        f.row(i)
                            .iter()
                            .zip(c.row(k))
                            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                            .sum()
                    })
                    .collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                dists.iter().position(|&d| d == min).unwrap()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matches_exhaustive_scan(seed in any::<u64>(), n in 2usize..1025, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Tensor::randn(vec![n, d], 1.0, &mut rng);
            let f = Tensor::randn(vec![8, d], 1.0, &mut rng);
            prop_assert_eq!(nearest_codes(&f, &c).unwrap(), brute_force(&f, &c));
        }
    }
}
