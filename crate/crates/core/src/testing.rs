//! Seeded fixtures and dense reference computations shared by tests.

use ndarray::{concatenate, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::extended::AttentionWeights;
use crate::model::attention::{AttentionState, HeadState, Matrix};

pub fn random_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Standard-normal attention state; `n_source = 0` leaves out the source.
pub fn random_state(
    seed: u64,
    heads: usize,
    n_prompt: usize,
    n_target: usize,
    n_source: usize,
    head_dim: usize,
) -> AttentionState {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    AttentionState {
        heads: (0..heads)
            .map(|_| {
                let mut m = |r| random_matrix(&mut rng, r, head_dim);
                HeadState {
                    q_prompt: m(n_prompt),
                    q_target: m(n_target),
                    k_prompt: m(n_prompt),
                    k_target: m(n_target),
                    v_prompt: m(n_prompt),
                    v_target: m(n_target),
                    k_source: (n_source > 0).then(|| m(n_source)),
                    v_source: (n_source > 0).then(|| m(n_source)),
                }
            })
            .collect(),
    }
}

/// Scale keys, concatenate `[source, prompt, target]`, softmax, matmul.
pub fn dense_extended(head: &HeadState, w: &AttentionWeights) -> (Matrix, Matrix) {
    let q = concatenate(Axis(0), &[head.q_prompt.view(), head.q_target.view()]).unwrap();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    if let (Some(k), Some(v)) = (&head.k_source, &head.v_source) {
        ks.push(k * w.gamma_source);
        vs.push(v.clone());
    }
    ks.push(&head.k_prompt * w.gamma_prompt);
    vs.push(head.v_prompt.clone());
    ks.push(&head.k_target * w.gamma_target);
    vs.push(head.v_target.clone());
    let k = concatenate(Axis(0), &ks.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
    let v = concatenate(Axis(0), &vs.iter().map(|m| m.view()).collect::<Vec<_>>()).unwrap();
    let s = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    let mut a = s;
    for mut row in a.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let z = row.sum();
        row /= z;
    }
    let h = a.dot(&v);
    (a, h)
}
