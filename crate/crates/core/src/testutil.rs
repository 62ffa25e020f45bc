//! Brute-force helpers shared by unit tests.

use rand::Rng;

use crate::dist::dirichlet_sample;
use crate::hmm::EmissionTable;
use crate::matrix::Matrix;
use crate::rng::RngHandle;

/// Every path of length `t_len` over `m` states, in lexicographic order.
pub fn all_paths(t_len: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..t_len {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..m).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    out
}

pub fn random_instance(rng: &mut RngHandle, t_len: usize, m: usize) -> (EmissionTable, Vec<f64>, Matrix) {
    let loglik = Matrix::from_vec(t_len, m, (0..t_len * m).map(|_| -5.0 * rng.random::<f64>()).collect()).unwrap();
    let pi = dirichlet_sample(rng, &vec![1.0; m]).unwrap();
    let rows: Vec<Vec<f64>> = (0..m).map(|_| dirichlet_sample(rng, &vec![1.0; m]).unwrap()).collect();
    (EmissionTable { loglik }, pi, Matrix::from_rows(&rows).unwrap())
}
