//! Contrastive objectives over paired image/text embeddings.
//!
//! [`infonce`] is the symmetric two-direction softmax cross-entropy over the
//! `N x N` similarity matrix. [`dalip_loss`] adds a second InfoNCE term on
//! the second-order embeddings and mixes the two with `λ1`, `λ2` under a
//! single shared learnable temperature `τ = exp(log_tau)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over the batch, as the loss is usually written.
    Sum,
    /// Sum divided by the batch size.
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DalipObjectiveConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub log_tau: f64,
    pub normalize_second_order: bool,
    pub reduction: Reduction,
    /// Require `lambda1 + lambda2 == 1`.
    pub unit_sum: bool,
}

pub const DEFAULT_TAU: f64 = 0.07;

impl Default for DalipObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.6,
            log_tau: DEFAULT_TAU.ln(),
            normalize_second_order: true,
            reduction: Reduction::Mean,
            unit_sum: true,
        }
    }
}

impl DalipObjectiveConfig {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Param(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if self.unit_sum && (self.lambda1 + self.lambda2 - 1.0).abs() > 1e-12 {
            return Err(Error::Param(format!(
                "lambda1 + lambda2 must equal 1, got {} + {}",
                self.lambda1, self.lambda2
            )));
        }
        if !self.log_tau.is_finite() {
            return Err(Error::Param("log_tau must be finite".into()));
        }
        Ok(())
    }
}

/// First- and second-order embeddings of one batch of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image_first: Tensor,
    pub text_first: Tensor,
    pub image_second: Tensor,
    pub text_second: Tensor,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.image_first.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_first.rows();
        for t in [&self.text_first, &self.image_second, &self.text_second] {
            if t.rows() != n {
                return Err(Error::Shape {
                    op: "embedding batch",
                    left: self.image_first.shape(),
                    right: t.shape(),
                });
            }
        }
        if self.image_first.cols() != self.text_first.cols() {
            return Err(Error::Shape {
                op: "embedding batch",
                left: self.image_first.shape(),
                right: self.text_first.shape(),
            });
        }
        if self.image_second.cols() != self.text_second.cols() {
            return Err(Error::Shape {
                op: "embedding batch",
                left: self.image_second.shape(),
                right: self.text_second.shape(),
            });
        }
        for t in [&self.image_first, &self.text_first] {
            for r in 0..t.rows() {
                let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::Param(format!(
                        "first-order row {r} has norm {norm}, expected unit norm"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Symmetric InfoNCE on the tape. `tau` is a `1 x 1` node.
pub fn infonce_node(
    tape: &mut Tape,
    img: NodeId,
    txt: NodeId,
    tau: NodeId,
    reduction: Reduction,
) -> Result<NodeId> {
    let (n, d) = tape.shape(img);
    if tape.shape(txt) != (n, d) {
        return Err(Error::Shape {
            op: "infonce",
            left: (n, d),
            right: tape.shape(txt),
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let txt_t = tape.transpose(txt)?;
    let sim = tape.matmul(img, txt_t)?;
    let logits = tape.div_scalar(sim, tau)?;

    let image_to_text = tape.log_sum_exp_rows(logits)?;
    let logits_t = tape.transpose(logits)?;
    let text_to_image = tape.log_sum_exp_rows(logits_t)?;
    let eye = tape.constant(Tensor::eye(n));
    let matched = tape.hadamard(logits, eye)?;

    let a = tape.sum_all(image_to_text)?;
    let b = tape.sum_all(text_to_image)?;
    let m = tape.sum_all(matched)?;
    let m2 = tape.scale(m, 2.0)?;
    let ab = tape.add(a, b)?;
    let total = tape.sub(ab, m2)?;
    match reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => tape.scale(total, 1.0 / n as f64),
    }
}

pub fn infonce(img: &Tensor, txt: &Tensor, tau: f64, reduction: Reduction) -> Result<f64> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be > 0, got {tau}")));
    }
    if img.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let t = tape.constant(txt.clone());
    let tau = tape.constant(Tensor::scalar(tau)?);
    let loss = infonce_node(&mut tape, i, t, tau, reduction)?;
    tape.value(loss).item()
}

#[derive(Debug, Clone, Copy)]
pub struct DalipNodes {
    pub total: NodeId,
    pub first: NodeId,
    pub second: NodeId,
    pub tau: NodeId,
}

/// The combined objective on the tape; `log_tau` is a `1 x 1` node.
pub fn dalip_loss_node(
    tape: &mut Tape,
    first: (NodeId, NodeId),
    second: (NodeId, NodeId),
    log_tau: NodeId,
    cfg: &DalipObjectiveConfig,
) -> Result<DalipNodes> {
    cfg.validate()?;
    let tau = tape.exp(log_tau)?;
    let first_loss = infonce_node(tape, first.0, first.1, tau, cfg.reduction)?;
    let (zi, zt) = if cfg.normalize_second_order {
        (tape.l2_normalize(second.0)?, tape.l2_normalize(second.1)?)
    } else {
        second
    };
    let second_loss = infonce_node(tape, zi, zt, tau, cfg.reduction)?;
    let a = tape.scale(first_loss, cfg.lambda1)?;
    let b = tape.scale(second_loss, cfg.lambda2)?;
    let total = tape.add(a, b)?;
    Ok(DalipNodes {
        total,
        first: first_loss,
        second: second_loss,
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DalipLoss {
    pub total: f64,
    pub first: f64,
    pub second: f64,
}

pub fn dalip_loss(batch: &EmbeddingBatch, cfg: &DalipObjectiveConfig) -> Result<DalipLoss> {
    batch.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new();
    let fi = tape.constant(batch.image_first.clone());
    let ft = tape.constant(batch.text_first.clone());
    let si = tape.constant(batch.image_second.clone());
    let st = tape.constant(batch.text_second.clone());
    let log_tau = tape.leaf(Tensor::scalar(cfg.log_tau)?);
    let nodes = dalip_loss_node(&mut tape, (fi, ft), (si, st), log_tau, cfg)?;
    Ok(DalipLoss {
        total: tape.value(nodes.total).item()?,
        first: tape.value(nodes.first).item()?,
        second: tape.value(nodes.second).item()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalConfig {
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub normalize_second_order: bool,
}

impl RetrievalConfig {
    pub fn combined(k: usize, cfg: &DalipObjectiveConfig) -> Self {
        Self {
            k,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            normalize_second_order: cfg.normalize_second_order,
        }
    }

    pub fn first_only(k: usize) -> Self {
        Self {
            k,
            lambda1: 1.0,
            lambda2: 0.0,
            normalize_second_order: true,
        }
    }

    pub fn second_only(k: usize, normalize_second_order: bool) -> Self {
        Self {
            k,
            lambda1: 0.0,
            lambda2: 1.0,
            normalize_second_order,
        }
    }
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let (rows, cols) = t.shape();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = t.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|v| v * inv));
    }
    Tensor::new(rows, cols, out).expect("finite")
}

/// Combined similarity matrix `λ1·⟨f_I, f_T⟩ + λ2·⟨ẑ_I, ẑ_T⟩`.
pub fn similarity_matrix(batch: &EmbeddingBatch, cfg: &RetrievalConfig) -> Result<Tensor> {
    let n = batch.len();
    let mut sim = Tensor::zeros(n, n);
    if cfg.lambda1 != 0.0 {
        let s = batch.image_first.matmul(&batch.text_first.transpose())?;
        sim = sim.add(&s.scale(cfg.lambda1))?;
    }
    if cfg.lambda2 != 0.0 {
        let (zi, zt) = if cfg.normalize_second_order {
            (normalized_rows(&batch.image_second), normalized_rows(&batch.text_second))
        } else {
            (batch.image_second.clone(), batch.text_second.clone())
        };
        let s = zi.matmul(&zt.transpose())?;
        sim = sim.add(&s.scale(cfg.lambda2))?;
    }
    Ok(sim)
}

/// Candidate order for one query: descending similarity, ties to the lower index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Fraction of image rows whose paired text row (same index, or any text
/// row with the same label when `labels` is given) ranks within the top `k`.
pub fn retrieval_topk(batch: &EmbeddingBatch, cfg: &RetrievalConfig, labels: Option<&[usize]>) -> Result<f64> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Param(format!("k must be in 1..={n}, got {}", cfg.k)));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Param(format!("{} labels for {n} rows", l.len())));
        }
    }
    let sim = similarity_matrix(batch, cfg)?;
    let mut hits = 0usize;
    for i in 0..n {
        let top = &ranking(sim.row(i))[..cfg.k];
        let hit = match labels {
            None => top.contains(&i),
            Some(l) => top.iter().any(|&j| l[j] == l[i]),
        };
        hits += usize::from(hit);
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn orthonormal_pair() -> (Tensor, Tensor) {
        let e = Tensor::eye(2);
        (e.clone(), e)
    }

    fn unit_rows(rng: &mut SeededRng, n: usize, d: usize) -> Tensor {
        normalized_rows(&rng.normal_tensor(n, d, 1.0))
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let x = Tensor::row_vector(&[0.6, 0.8]).unwrap();
        assert_eq!(infonce(&x, &x, 0.5, Reduction::Sum).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_closed_form() {
        let (i, t) = orthonormal_pair();
        let loss = infonce(&i, &t, 1.0, Reduction::Sum).unwrap();
        let expect = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-9);
        let mean = infonce(&i, &t, 1.0, Reduction::Mean).unwrap();
        assert!((mean - expect / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_two_n_log_n() {
        for n in [2usize, 3, 7] {
            let x = Tensor::vstack(&vec![&Tensor::row_vector(&[0.0, 1.0]).unwrap(); n]).unwrap();
            let loss = infonce(&x, &x, 0.3, Reduction::Sum).unwrap();
            let expect = 2.0 * n as f64 * (n as f64).ln();
            assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
        }
    }

    #[test]
    fn parameter_errors() {
        let (i, t) = orthonormal_pair();
        assert!(matches!(infonce(&i, &t, 0.0, Reduction::Sum), Err(Error::Param(_))));
        assert!(matches!(infonce(&i, &t, -1.0, Reduction::Sum), Err(Error::Param(_))));
        let empty = Tensor::zeros(0, 2);
        assert!(matches!(infonce(&empty, &empty, 1.0, Reduction::Sum), Err(Error::EmptyBatch)));
        let cfg = DalipObjectiveConfig {
            lambda1: -0.1,
            unit_sum: false,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = DalipObjectiveConfig {
            lambda1: 0.5,
            lambda2: 0.6,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lower_temperature_sharpens_a_dominant_diagonal() {
        let (i, t) = orthonormal_pair();
        let sharp = infonce(&i, &t, 0.01, Reduction::Sum).unwrap();
        let soft = infonce(&i, &t, 1.0, Reduction::Sum).unwrap();
        assert!(sharp < soft);
        assert!(sharp < 1e-20);
    }

    fn random_batch(rng: &mut SeededRng, n: usize) -> EmbeddingBatch {
        EmbeddingBatch {
            image_first: unit_rows(rng, n, 4),
            text_first: unit_rows(rng, n, 4),
            image_second: rng.normal_tensor(n, 3, 1.0),
            text_second: rng.normal_tensor(n, 3, 1.0),
        }
    }

    #[test]
    fn lambda2_zero_is_bit_exact_first_term() {
        let mut rng = SeededRng::new(3);
        let batch = random_batch(&mut rng, 5);
        let cfg = DalipObjectiveConfig {
            lambda1: 0.4,
            lambda2: 0.0,
            unit_sum: false,
            reduction: Reduction::Sum,
            ..Default::default()
        };
        let total = dalip_loss(&batch, &cfg).unwrap().total;
        let first = infonce(&batch.image_first, &batch.text_first, cfg.log_tau.exp(), Reduction::Sum).unwrap();
        assert_eq!(total.to_bits(), (0.4 * first).to_bits());
    }

    #[test]
    fn lambda1_zero_reduces_to_closed_form() {
        let mut rng = SeededRng::new(4);
        let (i, t) = orthonormal_pair();
        let mut batch = random_batch(&mut rng, 2);
        batch.image_second = i;
        batch.text_second = t;
        let cfg = DalipObjectiveConfig {
            lambda1: 0.0,
            lambda2: 0.6,
            log_tau: 0.0,
            unit_sum: false,
            reduction: Reduction::Sum,
            ..Default::default()
        };
        let loss = dalip_loss(&batch, &cfg).unwrap().total;
        let expect = 0.6 * 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_on_identical_pairs() {
        let mut rng = SeededRng::new(5);
        let f = unit_rows(&mut rng, 4, 3);
        let g = unit_rows(&mut rng, 4, 3);
        let batch = EmbeddingBatch {
            image_first: f.clone(),
            text_first: g.clone(),
            image_second: f.clone(),
            text_second: g.clone(),
        };
        let cfg = DalipObjectiveConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            ..Default::default()
        };
        let loss = dalip_loss(&batch, &cfg).unwrap().total;
        let single = infonce(&f, &g, cfg.tau(), Reduction::Mean).unwrap();
        assert!((loss - single).abs() < 1e-12);
    }

    #[test]
    fn batch_permutation_invariance() {
        let mut rng = SeededRng::new(6);
        let batch = random_batch(&mut rng, 6);
        let perm = [4, 0, 5, 2, 1, 3];
        let permuted = EmbeddingBatch {
            image_first: batch.image_first.permute_rows(&perm).unwrap(),
            text_first: batch.text_first.permute_rows(&perm).unwrap(),
            image_second: batch.image_second.permute_rows(&perm).unwrap(),
            text_second: batch.text_second.permute_rows(&perm).unwrap(),
        };
        let cfg = DalipObjectiveConfig::default();
        let a = dalip_loss(&batch, &cfg).unwrap();
        let b = dalip_loss(&permuted, &cfg).unwrap();
        assert!((a.total - b.total).abs() <= 1e-12);
        assert!((a.first - b.first).abs() <= 1e-12);
        assert!((a.second - b.second).abs() <= 1e-12);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = SeededRng::new(8);
        for n in 1..8 {
            let b = random_batch(&mut rng, n);
            let l = dalip_loss(&b, &DalipObjectiveConfig::default()).unwrap();
            assert!(l.first >= -1e-12 && l.second >= -1e-12);
        }
    }

    #[test]
    fn retrieval_identical_and_reversed() {
        let mut rng = SeededRng::new(9);
        let f = unit_rows(&mut rng, 6, 4);
        let z = rng.normal_tensor(6, 3, 1.0);
        let batch = EmbeddingBatch {
            image_first: f.clone(),
            text_first: f.clone(),
            image_second: z.clone(),
            text_second: z.clone(),
        };
        let cfg = RetrievalConfig::combined(1, &DalipObjectiveConfig::default());
        assert_eq!(retrieval_topk(&batch, &cfg, None).unwrap(), 1.0);

        let e = Tensor::eye(4);
        let rev = e.permute_rows(&[3, 2, 1, 0]).unwrap();
        let batch = EmbeddingBatch {
            image_first: e.clone(),
            text_first: rev.clone(),
            image_second: e,
            text_second: rev,
        };
        assert_eq!(retrieval_topk(&batch, &cfg, None).unwrap(), 0.0);
        assert!(retrieval_topk(&batch, &RetrievalConfig { k: 5, ..cfg }, None).is_err());
    }

    /// Counts, for every query, how many candidates beat the match outright
    /// or tie with it from a lower index.
    fn brute_force_accuracy(sim: &Tensor, k: usize) -> f64 {
        let n = sim.rows();
        let mut hits = 0;
        for i in 0..n {
            let s = sim.get(i, i);
            let mut rank = 0;
            for j in 0..n {
                if sim.get(i, j) > s || (sim.get(i, j) == s && j < i) {
                    rank += 1;
                }
            }
            if rank < k {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let mut rng = SeededRng::new(10);
        for trial in 0..20 {
            let batch = EmbeddingBatch {
                image_first: unit_rows(&mut rng, 16, 8),
                text_first: unit_rows(&mut rng, 16, 8),
                image_second: rng.normal_tensor(16, 8, 1.0),
                text_second: rng.normal_tensor(16, 8, 1.0),
            };
            for k in [1, 3, 5] {
                let cfg = RetrievalConfig::combined(k, &DalipObjectiveConfig::default());
                let sim = similarity_matrix(&batch, &cfg).unwrap();
                assert_eq!(
                    retrieval_topk(&batch, &cfg, None).unwrap(),
                    brute_force_accuracy(&sim, k),
                    "trial {trial} k {k}"
                );
            }
        }
    }

    #[test]
    fn constant_similarity_breaks_ties_by_index() {
        let n = 5;
        let batch = EmbeddingBatch {
            image_first: Tensor::zeros(n, 3),
            text_first: Tensor::zeros(n, 3),
            image_second: Tensor::zeros(n, 2),
            text_second: Tensor::zeros(n, 2),
        };
        let cfg = RetrievalConfig::combined(1, &DalipObjectiveConfig::default());
        assert_eq!(retrieval_topk(&batch, &cfg, None).unwrap(), 1.0 / n as f64);
    }

    #[test]
    fn single_class_labels_always_hit() {
        let mut rng = SeededRng::new(12);
        let batch = random_batch(&mut rng, 6);
        let cfg = RetrievalConfig::combined(1, &DalipObjectiveConfig::default());
        assert_eq!(retrieval_topk(&batch, &cfg, Some(&[0; 6])).unwrap(), 1.0);
    }

    #[test]
    fn second_order_scale_does_not_change_retrieval() {
        let mut rng = SeededRng::new(13);
        let batch = random_batch(&mut rng, 12);
        let scaled = EmbeddingBatch {
            image_second: batch.image_second.scale(17.0),
            text_second: batch.text_second.scale(17.0),
            ..batch.clone()
        };
        let cfg = RetrievalConfig::combined(1, &DalipObjectiveConfig::default());
        assert_eq!(
            retrieval_topk(&batch, &cfg, None).unwrap(),
            retrieval_topk(&scaled, &cfg, None).unwrap()
        );
    }
}
