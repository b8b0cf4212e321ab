//! Contrastive and triplet losses over a PK batch.
//!
//! Every triplet variant is the same per-anchor expression
//! `m(sum_p w_p D_ap - sum_n w_n D_an)` where `m` is either the hinge
//! `[x + alpha]_+` or `softplus(x)`, and the sampling variant only decides
//! the weights:
//!
//! | variant | positives                     | negatives                      |
//! |---------|-------------------------------|--------------------------------|
//! | BA      | 1                             | 1                              |
//! | BH      | one-hot at argmax `D_ap`      | one-hot at argmin `D_an`       |
//! | BS      | one-hot drawn from softmax(D) | one-hot drawn from softmax(-D) |
//! | BW      | softmax(D)                    | softmax(-D)                    |
//!
//! Weights are constants in the backward pass. The gradient flows only
//! through the distances, so a BH/BS selection or a BW weight vector computed
//! at the current point is treated as fixed.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::geometry::{pairwise_distances, squared_distance, DistanceMatrix, Matrix, MetricKind};

/// Hard margin used for contrastive loss unless configured otherwise.
pub const CONTRASTIVE_MARGIN: f64 = 1.0;

/// Hard margin used for triplet loss when the hinge is selected without an explicit value.
pub const TRIPLET_HARD_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MarginSpec {
    Hard(f64),
    Softplus,
}

impl MarginSpec {
    pub fn validate(self) -> Result<Self> {
        match self {
            MarginSpec::Hard(a) if !a.is_finite() || a < 0.0 => {
                Err(Error::InvalidArgument(format!("hard margin must be finite and >= 0, got {a}")))
            }
            m => Ok(m),
        }
    }

    /// Triplet margin function and its derivative at `x = D_pos - D_neg`.
    fn triplet(self, x: f64) -> (f64, f64) {
        match self {
            MarginSpec::Hard(alpha) => {
                let z = x + alpha;
                if z > 0.0 {
                    (z, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            MarginSpec::Softplus => (softplus(x), sigmoid(x)),
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SamplingVariant {
    BatchAll,
    BatchHard,
    BatchSample,
    BatchWeighted,
}

impl SamplingVariant {
    pub const ALL: [SamplingVariant; 4] = [
        SamplingVariant::BatchAll,
        SamplingVariant::BatchHard,
        SamplingVariant::BatchSample,
        SamplingVariant::BatchWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplingVariant::BatchAll => "ba",
            SamplingVariant::BatchHard => "bh",
            SamplingVariant::BatchSample => "bs",
            SamplingVariant::BatchWeighted => "bw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ba" | "batch_all" => Some(SamplingVariant::BatchAll),
            "bh" | "batch_hard" => Some(SamplingVariant::BatchHard),
            "bs" | "batch_sample" => Some(SamplingVariant::BatchSample),
            "bw" | "batch_weighted" => Some(SamplingVariant::BatchWeighted),
            _ => None,
        }
    }
}

/// How batch-all is turned into a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum BaMode {
    /// Mean hinge over every valid (anchor, positive, negative) triplet.
    #[default]
    PerTriplet,
    /// Unit weights plugged into the per-anchor expression, i.e. a single
    /// hinge over `sum_p D_ap - sum_n D_an`.
    UnifiedLiteral,
}

impl BaMode {
    pub fn name(self) -> &'static str {
        match self {
            BaMode::PerTriplet => "per_triplet",
            BaMode::UnifiedLiteral => "unified_literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_triplet" => Some(BaMode::PerTriplet),
            "unified_literal" => Some(BaMode::UnifiedLiteral),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SamplingScheme {
    pub variant: SamplingVariant,
    pub ba_mode: BaMode,
}

impl SamplingScheme {
    pub fn new(variant: SamplingVariant) -> Self {
        Self { variant, ba_mode: BaMode::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    #[default]
    Triplet,
    Contrastive,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Contrastive => "contrastive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "triplet" => Some(LossKind::Triplet),
            "contrastive" => Some(LossKind::Contrastive),
            _ => None,
        }
    }
}

/// Positive and negative weights of one anchor. Indices are batch positions.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightAssignment {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub w_p: Vec<f64>,
    pub negatives: Vec<usize>,
    pub w_n: Vec<f64>,
}

impl WeightAssignment {
    /// `sum_p w_p D_ap - sum_n w_n D_an` for the anchor's distance row.
    pub fn weighted_gap(&self, row: &[f64]) -> f64 {
        let pos: f64 = self.positives.iter().zip(&self.w_p).map(|(&p, w)| w * row[p]).sum();
        let neg: f64 = self.negatives.iter().zip(&self.w_n).map(|(&n, w)| w * row[n]).sum();
        pos - neg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// d loss / d embedding, one row per batch entry.
    pub grad_embeddings: Matrix,
    pub anchors_used: usize,
    pub anchors_skipped: usize,
}

/// `y D^2 + (1 - y)[alpha - D^2]_+` and its derivative with respect to `D`.
pub fn contrastive_loss(d: f64, same_identity: bool, margin: MarginSpec) -> Result<(f64, f64)> {
    match margin.validate()? {
        MarginSpec::Hard(alpha) => {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::InvalidArgument(format!("distance must be finite and >= 0, got {d}")));
            }
            Ok(contrastive_pair(d, same_identity, MarginSpec::Hard(alpha)))
        }
        MarginSpec::Softplus => Err(Error::InvalidArgument(
            "contrastive loss takes a hard margin".into(),
        )),
    }
}

/// Pair loss used inside [`batch_loss`]. The softplus form replaces the
/// negative hinge `[alpha - D^2]_+` with `ln(1 + exp(-D^2))`.
fn contrastive_pair(d: f64, same_identity: bool, margin: MarginSpec) -> (f64, f64) {
    let d2 = d * d;
    if same_identity {
        return (d2, 2.0 * d);
    }
    match margin {
        MarginSpec::Hard(alpha) => {
            if alpha - d2 > 0.0 {
                (alpha - d2, -2.0 * d)
            } else {
                (0.0, 0.0)
            }
        }
        MarginSpec::Softplus => (softplus(-d2), -2.0 * d * sigmoid(-d2)),
    }
}

pub fn triplet_loss_raw(d_ap: f64, d_an: f64, margin: MarginSpec) -> Result<f64> {
    let margin = margin.validate()?;
    if !d_ap.is_finite() || !d_an.is_finite() || d_ap < 0.0 || d_an < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "triplet distances must be finite and >= 0, got ({d_ap}, {d_an})"
        )));
    }
    Ok(margin.triplet(d_ap - d_an).0)
}

/// Softmax of `logits` with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn draw_categorical(probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn one_hot(len: usize, at: usize) -> Vec<f64> {
    let mut w = vec![0.0; len];
    w[at] = 1.0;
    w
}

/// First index of the extreme value; `better(a, b)` is true when `a` beats `b`.
fn arg_extreme(values: impl Iterator<Item = f64>, better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = (0, f64::NAN);
    for (i, v) in values.enumerate() {
        if i == 0 || better(v, best.1) {
            best = (i, v);
        }
    }
    best.0
}

/// Splits the batch into the anchor's positives (same label, not itself) and negatives.
pub fn partition(anchor: usize, labels: &[u32]) -> (Vec<usize>, Vec<usize>) {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if l == labels[anchor] {
            positives.push(j);
        } else {
            negatives.push(j);
        }
    }
    (positives, negatives)
}

/// Weights of one anchor given its distance row to the whole batch.
///
/// Batch-sample needs `rng`; the other variants ignore it.
pub fn compute_weights(
    scheme: SamplingScheme,
    anchor: usize,
    anchor_row: &[f64],
    labels: &[u32],
    rng: Option<&mut dyn RngCore>,
) -> Result<WeightAssignment> {
    if anchor_row.len() != labels.len() || anchor >= labels.len() {
        return Err(Error::Shape(format!(
            "anchor {anchor} with a row of {} distances and {} labels",
            anchor_row.len(),
            labels.len()
        )));
    }
    let (positives, negatives) = partition(anchor, labels);
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument(format!("anchor {anchor} lacks a positive or a negative")));
    }
    let dp: Vec<f64> = positives.iter().map(|&p| anchor_row[p]).collect();
    let dn: Vec<f64> = negatives.iter().map(|&n| anchor_row[n]).collect();

    let (w_p, w_n) = match scheme.variant {
        SamplingVariant::BatchAll => (vec![1.0; dp.len()], vec![1.0; dn.len()]),
        SamplingVariant::BatchHard => {
            let hp = arg_extreme(dp.iter().copied(), |a, b| a > b);
            let hn = arg_extreme(dn.iter().copied(), |a, b| a < b);
            (one_hot(dp.len(), hp), one_hot(dn.len(), hn))
        }
        SamplingVariant::BatchWeighted => {
            let neg_logits: Vec<f64> = dn.iter().map(|d| -d).collect();
            (softmax(&dp), softmax(&neg_logits))
        }
        SamplingVariant::BatchSample => {
            let rng = rng.ok_or(Error::MissingRng)?;
            let neg_logits: Vec<f64> = dn.iter().map(|d| -d).collect();
            let sp = draw_categorical(&softmax(&dp), rng);
            let sn = draw_categorical(&softmax(&neg_logits), rng);
            (one_hot(dp.len(), sp), one_hot(dn.len(), sn))
        }
    };
    Ok(WeightAssignment { anchor, positives, w_p, negatives, w_n })
}

/// Per-anchor triplet loss for the given weights.
pub fn anchor_loss(weights: &WeightAssignment, anchor_row: &[f64], margin: MarginSpec) -> f64 {
    margin.triplet(weights.weighted_gap(anchor_row)).0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchLossConfig {
    pub loss_kind: LossKind,
    pub scheme: SamplingScheme,
    pub margin: MarginSpec,
    pub metric: MetricKind,
}

fn check_batch(embeddings: &Matrix, labels: &[u32]) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    if labels.len() < 4 {
        return Err(Error::InvalidArgument(format!("batch of {} is smaller than 4", labels.len())));
    }
    Ok(())
}

fn is_valid_anchor(anchor: usize, labels: &[u32]) -> bool {
    let own = labels[anchor];
    let has_pos = labels.iter().enumerate().any(|(j, &l)| j != anchor && l == own);
    let has_neg = labels.iter().any(|&l| l != own);
    has_pos && has_neg
}

/// Weights for every anchor that has at least one positive and one negative.
pub fn batch_weights(
    distances: &DistanceMatrix,
    labels: &[u32],
    scheme: SamplingScheme,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<Vec<WeightAssignment>> {
    if scheme.variant == SamplingVariant::BatchSample && rng.is_none() {
        return Err(Error::MissingRng);
    }
    let mut out = Vec::new();
    for a in (0..labels.len()).filter(|&a| is_valid_anchor(a, labels)) {
        let r: Option<&mut dyn RngCore> = match rng {
            Some(ref mut r) => Some(&mut **r),
            None => None,
        };
        out.push(compute_weights(scheme, a, distances.row(a), labels, r)?);
    }
    if out.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    Ok(out)
}

/// Mean loss over the batch with freshly computed weights.
pub fn batch_loss(
    embeddings: &Matrix,
    labels: &[u32],
    config: &BatchLossConfig,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossResult> {
    check_batch(embeddings, labels)?;
    let distances = pairwise_distances(embeddings, embeddings, config.metric)?;
    let weights = batch_weights(&distances, labels, config.scheme, rng)?;
    loss_from_weights(embeddings, labels, config, &distances, &weights)
}

/// Mean loss over the batch with the weights held fixed.
pub fn batch_loss_with_weights(
    embeddings: &Matrix,
    labels: &[u32],
    config: &BatchLossConfig,
    weights: &[WeightAssignment],
) -> Result<LossResult> {
    check_batch(embeddings, labels)?;
    if weights.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let distances = pairwise_distances(embeddings, embeddings, config.metric)?;
    loss_from_weights(embeddings, labels, config, &distances, weights)
}

fn loss_from_weights(
    embeddings: &Matrix,
    labels: &[u32],
    config: &BatchLossConfig,
    distances: &DistanceMatrix,
    weights: &[WeightAssignment],
) -> Result<LossResult> {
    let margin = config.margin.validate()?;
    let n = labels.len();
    // d loss / d D_ij
    let mut grad_d = Matrix::zeros(n, n);
    let mut loss = 0.0;

    match config.loss_kind {
        LossKind::Triplet
            if config.scheme.variant == SamplingVariant::BatchAll
                && config.scheme.ba_mode == BaMode::PerTriplet =>
        {
            let triplets: usize = weights.iter().map(|w| w.positives.len() * w.negatives.len()).sum();
            let scale = 1.0 / triplets as f64;
            for w in weights {
                let row = distances.row(w.anchor);
                for &p in &w.positives {
                    for &q in &w.negatives {
                        let (l, dl) = margin.triplet(row[p] - row[q]);
                        loss += l * scale;
                        if dl != 0.0 {
                            add(&mut grad_d, w.anchor, p, dl * scale);
                            add(&mut grad_d, w.anchor, q, -dl * scale);
                        }
                    }
                }
            }
        }
        LossKind::Triplet => {
            let scale = 1.0 / weights.len() as f64;
            for w in weights {
                let row = distances.row(w.anchor);
                let (l, dl) = margin.triplet(w.weighted_gap(row));
                loss += l * scale;
                if dl != 0.0 {
                    for (&p, wp) in w.positives.iter().zip(&w.w_p) {
                        add(&mut grad_d, w.anchor, p, dl * wp * scale);
                    }
                    for (&q, wn) in w.negatives.iter().zip(&w.w_n) {
                        add(&mut grad_d, w.anchor, q, -dl * wn * scale);
                    }
                }
            }
        }
        LossKind::Contrastive => {
            let scale = 1.0 / weights.len() as f64;
            for w in weights {
                let row = distances.row(w.anchor);
                let sum_p: f64 = w.w_p.iter().sum();
                let sum_n: f64 = w.w_n.iter().sum();
                for (idx, ws, total, same) in [
                    (&w.positives, &w.w_p, sum_p, true),
                    (&w.negatives, &w.w_n, sum_n, false),
                ] {
                    for (&j, wj) in idx.iter().zip(ws) {
                        if *wj == 0.0 {
                            continue;
                        }
                        let c = 0.5 * scale * wj / total;
                        let (l, dl) = contrastive_pair(row[j], same, margin);
                        loss += c * l;
                        if dl != 0.0 {
                            add(&mut grad_d, w.anchor, j, c * dl);
                        }
                    }
                }
            }
        }
    }

    let grad_embeddings = distance_backward(embeddings, &grad_d, config.metric);
    if !loss.is_finite() || !grad_embeddings.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok(LossResult {
        loss,
        grad_embeddings,
        anchors_used: weights.len(),
        anchors_skipped: n - weights.len(),
    })
}

fn add(m: &mut Matrix, i: usize, j: usize, v: f64) {
    m.set(i, j, m.get(i, j) + v);
}

/// Pushes `d loss / d D_ij` back onto the embeddings.
fn distance_backward(embeddings: &Matrix, grad_d: &Matrix, metric: MetricKind) -> Matrix {
    let n = embeddings.rows();
    let dim = embeddings.cols();
    let mut grad = Matrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..n {
            let g = grad_d.get(i, j);
            if g == 0.0 || i == j {
                continue;
            }
            let (xi, xj) = (embeddings.row(i), embeddings.row(j));
            let factor = g * metric.grad_factor(squared_distance(xi, xj));
            for k in 0..dim {
                let d = factor * (xi[k] - xj[k]);
                grad.set(i, k, grad.get(i, k) + d);
                grad.set(j, k, grad.get(j, k) - d);
            }
        }
    }
    grad
}
