//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reid_embed::data::EmbeddingSet;
use reid_embed::geometry::Matrix;
use reid_embed::losses::{batch_loss_with_weights, batch_weights, BatchLossConfig};
use reid_embed::network::ModelParams;
use reid_embed::geometry::pairwise_distances;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Labels `0,0,..,1,1,..` for P identities with K samples each.
pub fn pk_labels(p: usize, k: usize) -> Vec<u32> {
    (0..p * k).map(|i| (i / k) as u32).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Softmax computed with logsumexp in the plainest form.
pub fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| (v - lse).exp()).collect()
}

/// AP straight from its definition: for each relevant item, the fraction of
/// items ranked at or above it that are relevant; averaged over `n_gt`.
pub fn ap_oracle(relevance: &[bool], n_gt: usize) -> f64 {
    let mut total = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if !r {
            continue;
        }
        let above = &relevance[..=i];
        let hits = above.iter().filter(|&&x| x).count();
        total += hits as f64 / above.len() as f64;
    }
    total / n_gt as f64
}

/// Brute-force mean AP of `query` against the given gallery rows, optionally
/// dropping same-identity same-camera rows. Ties keep gallery order.
pub fn map_oracle(query: &EmbeddingSet, gallery: &EmbeddingSet, rows: &[usize], cross_camera: bool) -> (f64, usize) {
    let mut sum = 0.0;
    let mut scored = 0;
    for q in 0..query.len() {
        let (id, cam) = (query.identities[q], query.cameras[q]);
        let mut cand: Vec<(f64, usize)> = rows
            .iter()
            .filter(|&&g| !(cross_camera && gallery.identities[g] == id && gallery.cameras[g] == cam))
            .map(|&g| (euclid(query.embeddings.row(q), gallery.embeddings.row(g)), g))
            .collect();
        cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let rel: Vec<bool> = cand.iter().map(|&(_, g)| gallery.identities[g] == id).collect();
        let n_gt = rel.iter().filter(|&&r| r).count();
        if n_gt > 0 {
            sum += ap_oracle(&rel, n_gt);
            scored += 1;
        }
    }
    (sum / scored as f64, scored)
}

/// Loss of `forward(inputs)` with the weights frozen at `weights`.
fn frozen_loss(
    params: &ModelParams,
    inputs: &Matrix,
    labels: &[u32],
    cfg: &BatchLossConfig,
    weights: &[reid_embed::losses::WeightAssignment],
) -> f64 {
    let emb = params.forward(inputs).unwrap();
    batch_loss_with_weights(&emb, labels, cfg, weights).unwrap().loss
}

/// Norm-wise relative error between the analytic parameter gradient of
/// `batch_loss(forward(inputs))` and central differences with step `h`.
/// Sampling weights are drawn once at the unperturbed point and then held.
/// Returns the error and the analytic gradient norm.
pub fn gradient_check(
    params: &ModelParams,
    inputs: &Matrix,
    labels: &[u32],
    cfg: &BatchLossConfig,
    weight_seed: u64,
    h: f64,
) -> (f64, f64) {
    let emb = params.forward(inputs).unwrap();
    let dist = pairwise_distances(&emb, &emb, cfg.metric).unwrap();
    let mut wr = rng(weight_seed);
    let weights = batch_weights(&dist, labels, cfg.scheme, Some(&mut wr)).unwrap();
    let analytic = batch_loss_with_weights(&emb, labels, cfg, &weights).unwrap();
    let grads = params.backward(inputs, &analytic.grad_embeddings).unwrap();

    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut probe = params.clone();
    let analytic_flat: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let mut flat_index = 0;
    let tensor_count = params.tensors().len();
    for t in 0..tensor_count {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let orig = probe.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = frozen_loss(&probe, inputs, labels, cfg, &weights);
            probe.tensors_mut()[t][i] = orig - h;
            let down = frozen_loss(&probe, inputs, labels, cfg, &weights);
            probe.tensors_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_flat[flat_index];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            flat_index += 1;
        }
    }
    (diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-300), a2.sqrt())
}
