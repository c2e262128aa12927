//! Dense helpers for the small symmetric problems that come up everywhere:
//! Jacobi eigendecomposition, seeded random rotations, and an exact
//! assignment solver for column matching.
//!
//! Everything here targets desk-scale matrices (N <= a few hundred), so the
//! implementations favor determinism and simplicity over asymptotics.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Eigenvalues of a symmetric matrix, sorted descending.
///
/// Classical Jacobi iteration: repeatedly zero the largest off-diagonal
/// entry with a Givens rotation. Unconditionally stable for symmetric
/// input, and plenty fast for the sizes we see.
pub fn symmetric_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![a[[0, 0]]];
    }

    let mut m = a.clone();
    let max_iter = 100 * n * n;
    let tol = 1e-14 * matrix_scale(a).max(1.0);

    for _ in 0..max_iter {
        let (p, q, max_off) = largest_off_diagonal(&m);
        if max_off < tol {
            break;
        }
        let (c, s) = jacobi_rotation(m[[p, p]], m[[q, q]], m[[p, q]]);
        apply_jacobi(&mut m, p, q, c, s);
    }

    let mut eig: Vec<f64> = (0..n).map(|i| m[[i, i]]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).expect("eigenvalues are finite"));
    eig
}

fn matrix_scale(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn largest_off_diagonal(m: &Array2<f64>) -> (usize, usize, f64) {
    let n = m.nrows();
    let (mut p, mut q, mut best) = (0, 1, -1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = m[[i, j]].abs();
            if v > best {
                best = v;
                p = i;
                q = j;
            }
        }
    }
    (p, q, best)
}

fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    // Stable computation of the rotation that annihilates apq.
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

fn apply_jacobi(m: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    let n = m.nrows();
    let app = m[[p, p]];
    let aqq = m[[q, q]];
    let apq = m[[p, q]];
    m[[p, p]] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
    m[[q, q]] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
    m[[p, q]] = 0.0;
    m[[q, p]] = 0.0;
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = m[[i, p]];
        let aiq = m[[i, q]];
        m[[i, p]] = c * aip - s * aiq;
        m[[p, i]] = m[[i, p]];
        m[[i, q]] = s * aip + c * aiq;
        m[[q, i]] = m[[i, q]];
    }
}

/// A uniformly seeded random rotation (orthogonal with determinant +1),
/// built from the QR factorization of a Gaussian matrix.
pub fn random_rotation(k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    assert!(k >= 1, "rotation dimension must be positive");
    let gauss = Array2::from_shape_fn((k, k), |_| standard_normal(rng));
    let mut q = gram_schmidt(&gauss, rng);
    if determinant(&q) < 0.0 {
        // Flip one column to land in SO(k).
        for i in 0..k {
            q[[i, k - 1]] = -q[[i, k - 1]];
        }
    }
    q
}

pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps us independent of distribution-crate stream details.
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Modified Gram-Schmidt orthonormalization of the columns of `a`.
/// Degenerate columns are re-drawn from the rng.
fn gram_schmidt(a: &Array2<f64>, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, k) = (a.nrows(), a.ncols());
    let mut q = a.clone();
    for j in 0..k {
        loop {
            for i in 0..j {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += q[[r, i]] * q[[r, j]];
                }
                for r in 0..n {
                    q[[r, j]] -= dot * q[[r, i]];
                }
            }
            let norm = (0..n).map(|r| q[[r, j]] * q[[r, j]]).sum::<f64>().sqrt();
            if norm > 1e-10 {
                for r in 0..n {
                    q[[r, j]] /= norm;
                }
                break;
            }
            for r in 0..n {
                q[[r, j]] = standard_normal(rng);
            }
        }
    }
    q
}

/// Determinant via LU with partial pivoting. Small matrices only.
pub fn determinant(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if m[[r, col]].abs() > m[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if m[[pivot, col]].abs() < 1e-300 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..n {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[pivot, c]];
                m[[pivot, c]] = tmp;
            }
            det = -det;
        }
        det *= m[[col, col]];
        for r in (col + 1)..n {
            let factor = m[[r, col]] / m[[col, col]];
            for c in col..n {
                m[[r, c]] -= factor * m[[col, c]];
            }
        }
    }
    det
}

/// Maximum-score assignment over a square score matrix, exact via bitmask
/// dynamic programming. Returns `perm` with `perm[row] = column`.
///
/// Exponential in k, so callers cap k (we use 12) and fall back to greedy.
pub fn exact_assignment(score: &Array2<f64>) -> Vec<usize> {
    let k = score.nrows();
    debug_assert_eq!(k, score.ncols());
    assert!(k <= 20, "exact assignment is limited to small k");
    let full = (1usize << k) - 1;
    // best[mask] = max total score assigning rows 0..popcount(mask) to the
    // column set `mask`; choice[mask] remembers the column of the last row.
    let mut best = vec![f64::NEG_INFINITY; full + 1];
    let mut choice = vec![usize::MAX; full + 1];
    best[0] = 0.0;
    for mask in 0..=full {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let row = (mask as u32).count_ones() as usize;
        if row == k {
            continue;
        }
        for col in 0..k {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let cand = best[mask] + score[[row, col]];
            if cand > best[next] {
                best[next] = cand;
                choice[next] = col;
            }
        }
    }
    let mut perm = vec![0usize; k];
    let mut mask = full;
    for row in (0..k).rev() {
        let col = choice[mask];
        perm[row] = col;
        mask &= !(1 << col);
    }
    perm
}

/// Greedy assignment: repeatedly take the best remaining (row, column) pair.
pub fn greedy_assignment(score: &Array2<f64>) -> Vec<usize> {
    let k = score.nrows();
    let mut perm = vec![usize::MAX; k];
    let mut row_used = vec![false; k];
    let mut col_used = vec![false; k];
    for _ in 0..k {
        let (mut br, mut bc, mut bs) = (0, 0, f64::NEG_INFINITY);
        for r in 0..k {
            if row_used[r] {
                continue;
            }
            for c in 0..k {
                if col_used[c] {
                    continue;
                }
                if score[[r, c]] > bs {
                    bs = score[[r, c]];
                    br = r;
                    bc = c;
                }
            }
        }
        perm[br] = bc;
        row_used[br] = true;
        col_used[bc] = true;
    }
    perm
}

/// Frobenius norm.
pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Max |A[i,j] - A[j,i]| over all pairs.
pub fn max_asymmetry(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    worst
}

/// Row-wise L2 norms.
pub fn row_norms(a: &Array2<f64>) -> Array1<f64> {
    Array1::from_iter(a.rows().into_iter().map(|r| r.dot(&r).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn jacobi_known_2x2() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let eig = symmetric_eigenvalues(&a);
        assert!((eig[0] - 3.0).abs() < 1e-12);
        assert!((eig[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_trace_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Array2::from_shape_fn((9, 9), |_| standard_normal(&mut rng));
        let a = g.t().dot(&g);
        let eig = symmetric_eigenvalues(&a);
        let trace: f64 = (0..9).map(|i| a[[i, i]]).sum();
        assert!((eig.iter().sum::<f64>() - trace).abs() < 1e-9 * trace.abs());
        assert!(eig.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rotation_is_orthogonal_with_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1usize, 2, 3, 5, 8] {
            let r = random_rotation(k, &mut rng);
            let gram = r.t().dot(&r);
            for i in 0..k {
                for j in 0..k {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - expect).abs() < 1e-10);
                }
            }
            assert!((determinant(&r) - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_assignment_beats_greedy_on_a_trap() {
        // Greedy grabs (0,0)=5 and is forced into 5+1=6; optimum is 4+4=8.
        let score = array![[5.0, 4.0], [4.0, 1.0]];
        let exact = exact_assignment(&score);
        assert_eq!(exact, vec![1, 0]);
        let greedy = greedy_assignment(&score);
        assert_eq!(greedy, vec![0, 1]);
    }

    #[test]
    fn determinant_of_permutation() {
        let p = array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]];
        assert!((determinant(&p) - 1.0).abs() < 1e-12);
        let swap = array![[0.0, 1.0], [1.0, 0.0]];
        assert!((determinant(&swap) + 1.0).abs() < 1e-12);
    }
}
