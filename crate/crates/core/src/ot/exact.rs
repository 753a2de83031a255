use super::CostMatrix;
use crate::{Error, Result};

/// Largest side accepted by [`exact_emd_bruteforce`] (8! = 40320 permutations).
pub const MAX_BRUTEFORCE: usize = 8;

/// Exact uniform-mass transport cost by enumerating every permutation.
///
/// Returns the average cost `(1/n)·Σᵢ D[i][σ(i)]` of the best permutation `σ`;
/// ties keep the lexicographically smallest permutation.
pub fn exact_emd_bruteforce(d: &CostMatrix) -> Result<(f64, Vec<usize>)> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(Error::Shape(format!("cost matrix is {n}x{}, expected square", d.ncols())));
    }
    if n > MAX_BRUTEFORCE {
        return Err(Error::Invalid(format!(
            "brute force limited to n <= {MAX_BRUTEFORCE}, got {n}"
        )));
    }
    let dv = d.values();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (f64::INFINITY, perm.clone());
    loop {
        let total: f64 = perm.iter().enumerate().map(|(i, &j)| dv[(i, j)]).sum();
        if total < best.0 {
            best = (total, perm.clone());
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok((best.0 / n as f64, best.1))
}

/// Advances to the next permutation in lexicographic order.
fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}
