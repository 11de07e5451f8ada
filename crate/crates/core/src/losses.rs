//! Symmetric contrastive loss over an in-batch cosine similarity matrix and
//! the dual (bypass + prompted) loss built from it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::matrix::{dot, l2_norm, Matrix};
use crate::model::{EmbeddingVector, EncodedPairBatch};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub learnable: bool,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            learnable: true,
            tau_min: 1e-3,
            tau_max: 100.0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau_max) {
            return Err(Error::Config(format!(
                "temperature bounds [{}, {}] invalid",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.tau_min..=self.tau_max).contains(&self.temperature) {
            return Err(Error::Config(format!(
                "temperature {} outside [{}, {}]",
                self.temperature, self.tau_min, self.tau_max
            )));
        }
        Ok(())
    }

    /// Clamps a log-temperature into the configured bounds.
    pub fn clamp_log_tau<T: Scalar>(&self, log_tau: T) -> T {
        log_tau
            .max(T::lit(self.tau_min.ln()))
            .min(T::lit(self.tau_max.ln()))
    }
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Mean of the bypass and prompted contrastive losses.
    #[default]
    Dual,
    /// The prompted contrastive loss alone.
    PromptedOnly,
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == T::zero() || nb == T::zero() {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn cosine_similarity<T: Scalar>(a: &EmbeddingVector<T>, b: &EmbeddingVector<T>) -> Result<T> {
    cosine(&a.values, &b.values)
}

/// `S[i][j] = ⟨t_i, c_j⟩`, transcripts on rows, clips on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T>(pub Matrix<T>);

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn from_embeddings(texts: &Matrix<T>, clips: &Matrix<T>) -> Result<Self> {
        if texts.shape() != clips.shape() {
            return Err(Error::shape(format!("{:?}", texts.shape()), format!("{:?}", clips.shape())));
        }
        let n = texts.rows();
        let mut s = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                s.set(i, j, cosine(texts.row(i), clips.row(j))?);
            }
        }
        Ok(Self(s))
    }

    pub fn new(s: Matrix<T>) -> Result<Self> {
        if s.rows() != s.cols() || s.rows() == 0 {
            return Err(Error::shape("non-empty square matrix", format!("{:?}", s.shape())));
        }
        Ok(Self(s))
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Contrastive loss and its two directional terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub cl: f64,
    pub l_tc: f64,
    pub l_ct: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualLoss {
    pub total: f64,
    pub bypass: ContrastiveLoss,
    pub prompted: ContrastiveLoss,
}

fn check_inputs<T: Scalar>(s: &SimilarityMatrix<T>, tau: T) -> Result<()> {
    if !(tau > T::zero() && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if let Some(i) = s.0.first_non_finite() {
        return Err(Error::numeric_at("similarity entry is not finite", i));
    }
    Ok(())
}

/// Row-wise log-softmax of `S/τ`, max-subtracted.
fn log_softmax_rows<T: Scalar>(s: &Matrix<T>, tau: T) -> Matrix<T> {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for i in 0..s.rows() {
        let row = s.row(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x / tau));
        let lse = row.iter().map(|&x| (x / tau - max).exp()).sum::<T>().ln() + max;
        for (o, &x) in out.row_mut(i).iter_mut().zip(row) {
            *o = x / tau - lse;
        }
    }
    out
}

/// `(Ŷ_t, Ŷ_c)`: `Ŷ_t` normalises each row (transcript over clips), `Ŷ_c`
/// normalises each column (clip over transcripts). Both keep `S`'s layout.
pub fn prediction_probs<T: Scalar>(s: &SimilarityMatrix<T>, tau: T) -> Result<(Matrix<T>, Matrix<T>)> {
    check_inputs(s, tau)?;
    let yt = log_softmax_rows(&s.0, tau).map(|x| x.exp());
    let yc = log_softmax_rows(&s.0.transpose(), tau).map(|x| x.exp()).transpose();
    Ok((yt, yc))
}

pub fn contrastive_loss<T: Scalar>(s: &SimilarityMatrix<T>, tau: T) -> Result<ContrastiveLoss> {
    check_inputs(s, tau)?;
    let n = s.0.rows();
    let diag_mean = |lp: &Matrix<T>| -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..n {
            let v = lp.get(i, i).to_f64_lossy();
            if v == f64::NEG_INFINITY || lp.get(i, i).exp() == T::zero() {
                return Err(Error::numeric_at("diagonal prediction probability is zero", i));
            }
            acc += v;
        }
        Ok(-acc / n as f64)
    };
    let l_tc = diag_mean(&log_softmax_rows(&s.0, tau))?;
    let l_ct = diag_mean(&log_softmax_rows(&s.0.transpose(), tau))?;
    Ok(ContrastiveLoss {
        cl: 0.5 * (l_tc + l_ct),
        l_tc,
        l_ct,
    })
}

pub fn dual_loss<T: Scalar>(batch: &EncodedPairBatch<T>, tau: T) -> Result<DualLoss> {
    let sb = SimilarityMatrix::from_embeddings(&batch.text_embeddings_bypass, &batch.video_embeddings)?;
    let sp = SimilarityMatrix::from_embeddings(&batch.text_embeddings_prompted, &batch.video_embeddings)?;
    let bypass = contrastive_loss(&sb, tau)?;
    let prompted = contrastive_loss(&sp, tau)?;
    Ok(DualLoss {
        total: 0.5 * (bypass.cl + prompted.cl),
        bypass,
        prompted,
    })
}

/// Graph nodes of one contrastive loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub cl: NodeId,
    pub l_tc: NodeId,
    pub l_ct: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct DualLossNodes {
    pub total: NodeId,
    pub bypass: LossNodes,
    pub prompted: LossNodes,
}

/// Contrastive loss on the tape. `texts` and `clips` are raw `n × d`
/// embeddings, `log_tau` a `1 × 1` node holding `ln τ`.
pub fn contrastive_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    texts: NodeId,
    clips: NodeId,
    log_tau: NodeId,
) -> Result<LossNodes> {
    let t = g.l2_normalize_rows(texts)?;
    let c = g.l2_normalize_rows(clips)?;
    let s = g.matmul_nt(t, c);
    let neg = g.scale(log_tau, -T::one());
    let inv_tau = g.exp(neg);
    let logits = g.scale_by(s, inv_tau);
    let lp_t = g.log_softmax_rows(logits);
    let logits_t = g.transpose(logits);
    let lp_c = g.log_softmax_rows(logits_t);
    for lp in [lp_t, lp_c] {
        let v = g.value(lp);
        if let Some(i) = (0..v.rows()).find(|&i| !v.get(i, i).is_finite()) {
            return Err(Error::numeric_at("diagonal log-probability is not finite", i));
        }
    }
    let m_tc = g.diag_mean(lp_t);
    let m_ct = g.diag_mean(lp_c);
    let l_tc = g.scale(m_tc, -T::one());
    let l_ct = g.scale(m_ct, -T::one());
    let sum = g.add(l_tc, l_ct);
    let cl = g.scale(sum, T::lit(0.5));
    Ok(LossNodes { cl, l_tc, l_ct })
}

/// Dual loss on the tape. With [`LossMode::PromptedOnly`] the bypass term is
/// still computed for logging but `total` is the prompted loss alone.
pub fn dual_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    video: NodeId,
    prompted: NodeId,
    bypass: NodeId,
    log_tau: NodeId,
    mode: LossMode,
) -> Result<DualLossNodes> {
    let b = contrastive_loss_node(g, bypass, video, log_tau)?;
    let p = contrastive_loss_node(g, prompted, video, log_tau)?;
    let total = match mode {
        LossMode::Dual => {
            let s = g.add(b.cl, p.cl);
            g.scale(s, T::lit(0.5))
        }
        LossMode::PromptedOnly => p.cl,
    };
    Ok(DualLossNodes {
        total,
        bypass: b,
        prompted: p,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sim(rows: &[Vec<f64>]) -> SimilarityMatrix<f64> {
        SimilarityMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e = |v: &[f64]| EmbeddingVector::raw(v.to_vec());
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&e(&[1.0, 0.0]), &e(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&e(&[1.0, 1.0]), &e(&[1.0, 0.0])).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-6);
        assert!(cosine_similarity(&e(&[0.0, 0.0]), &e(&[1.0, 0.0])).is_err());
        let scaled: f64 = cosine(&[3.0, 1.5], &[0.2, 7.0]).unwrap();
        let base = cosine(&[2.0, 1.0], &[0.1, 3.5]).unwrap();
        assert!((scaled - base).abs() < 1e-15);
    }

    #[test]
    fn uniform_similarity_gives_uniform_probabilities() {
        let s = sim(&vec![vec![0.3; 4]; 4]);
        let (yt, yc) = prediction_probs(&s, 0.07).unwrap();
        for x in yt.as_slice().iter().chain(yc.as_slice()) {
            assert!((x - 0.25).abs() < 1e-12);
        }
        let l = contrastive_loss(&s, 0.5).unwrap();
        assert!((l.cl - 4f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_pair_at_unit_temperature() {
        let s = sim(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (yt, _) = prediction_probs(&s, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((yt.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((yt.get(0, 0) - 0.7311).abs() < 1e-4);
        let l = contrastive_loss(&s, 1.0).unwrap();
        assert!((l.cl - 0.3133).abs() < 1e-4);
        let (sharp, _) = prediction_probs(&s, 0.01).unwrap();
        assert!(sharp.get(0, 0) > 1.0 - 1e-12);
    }

    #[test]
    fn transpose_swaps_directions() {
        let s = sim(&[vec![0.9, 0.1, -0.3], vec![0.2, 0.5, 0.0], vec![0.7, -0.2, 0.4]]);
        let a = contrastive_loss(&s, 0.2).unwrap();
        let b = contrastive_loss(&s.transpose(), 0.2).unwrap();
        assert!((a.l_tc - b.l_ct).abs() < 1e-12);
        assert!((a.l_ct - b.l_tc).abs() < 1e-12);
        assert!((a.cl - b.cl).abs() < 1e-12);
        assert!(a.cl >= 0.0);
    }

    #[test]
    fn probabilities_are_normalised() {
        let s = sim(&[vec![0.9, 0.1, -0.3], vec![0.2, 0.5, 0.0], vec![0.7, -0.2, 0.4]]);
        let (yt, yc) = prediction_probs(&s, 0.07).unwrap();
        for i in 0..3 {
            assert!((yt.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(((0..3).map(|k| yc.get(k, i)).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_diagonal_probability_is_an_error() {
        let s = sim(&[vec![-1.0, 1.0], vec![1.0, -1.0]]);
        assert!(matches!(
            contrastive_loss(&s, 1e-3),
            Err(Error::Numeric { index: Some(0), .. })
        ));
        let bad = sim(&[vec![f64::NAN, 0.0], vec![0.0, 1.0]]);
        assert!(prediction_probs(&bad, 1.0).is_err());
    }

    #[test]
    fn dual_loss_reduces_to_contrastive() {
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = EncodedPairBatch::new(c.clone(), c.clone(), c).unwrap();
        let l = dual_loss(&b, 1.0).unwrap();
        assert!((l.total - 0.3133).abs() < 1e-4);
        assert_eq!(l.total, l.prompted.cl);
    }

    #[test]
    fn graph_matches_pure_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = Matrix::<f64>::normal(4, 6, 1.0, &mut rng);
        let p = Matrix::normal(4, 6, 1.0, &mut rng);
        let b = Matrix::normal(4, 6, 1.0, &mut rng);
        let tau = 0.3f64;
        let pure = dual_loss(&EncodedPairBatch::new(v.clone(), p.clone(), b.clone()).unwrap(), tau).unwrap();
        let mut g = Graph::new();
        let (vn, pn, bn) = (g.constant(v.clone()), g.constant(p.clone()), g.constant(b.clone()));
        let lt = g.constant(Matrix::filled(1, 1, tau.ln()));
        let nodes = dual_loss_node(&mut g, vn, pn, bn, lt, LossMode::Dual).unwrap();
        assert!((g.scalar(nodes.total) - pure.total).abs() < 1e-12);
        assert!((g.scalar(nodes.bypass.l_tc) - pure.bypass.l_tc).abs() < 1e-12);

        let perm = [2, 0, 3, 1];
        let pm = |m: &Matrix<f64>| Matrix::from_rows(&perm.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let permuted = dual_loss(&EncodedPairBatch::new(pm(&v), pm(&p), pm(&b)).unwrap(), tau).unwrap();
        assert!((permuted.total - pure.total).abs() < 1e-12);
    }

    fn loss_of(emb: &[Matrix<f64>; 3], log_tau: f64) -> f64 {
        let mut g = Graph::new();
        let n: Vec<_> = emb.iter().map(|m| g.constant(m.clone())).collect();
        let lt = g.constant(Matrix::filled(1, 1, log_tau));
        let l = dual_loss_node(&mut g, n[0], n[1], n[2], lt, LossMode::Dual).unwrap();
        g.scalar(l.total)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = [
            Matrix::<f64>::normal(4, 8, 1.0, &mut rng),
            Matrix::normal(4, 8, 1.0, &mut rng),
            Matrix::normal(4, 8, 1.0, &mut rng),
        ];
        let log_tau = 0.5f64.ln();
        let mut g = Graph::new();
        let n: Vec<_> = emb.iter().map(|m| g.leaf(m.clone(), true)).collect();
        let lt = g.leaf(Matrix::filled(1, 1, log_tau), true);
        let l = dual_loss_node(&mut g, n[0], n[1], n[2], lt, LossMode::Dual).unwrap();
        let grads = g.backward(l.total);
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / (a.abs() + b.abs()).max(1e-8);
        for k in 0..3 {
            let ga = grads.get(n[k]).unwrap();
            for idx in 0..emb[k].len() {
                let mut plus = emb.clone();
                plus[k].as_mut_slice()[idx] += h;
                let mut minus = emb.clone();
                minus[k].as_mut_slice()[idx] -= h;
                let fd = (loss_of(&plus, log_tau) - loss_of(&minus, log_tau)) / (2.0 * h);
                assert!(rel(ga.as_slice()[idx], fd) < 1e-6, "group {k} idx {idx}");
            }
        }
        let fd = (loss_of(&emb, log_tau + h) - loss_of(&emb, log_tau - h)) / (2.0 * h);
        assert!(rel(grads.get(lt).unwrap().get(0, 0), fd) < 1e-6);
    }

    #[test]
    fn gradient_descent_aligns_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Matrix::<f64>::normal(4, 8, 1.0, &mut rng);
        let mut c = Matrix::<f64>::normal(4, 8, 1.0, &mut rng);
        let log_tau = 0.1f64.ln();
        for _ in 0..500 {
            let mut g = Graph::new();
            let tn = g.leaf(t.clone(), true);
            let cn = g.leaf(c.clone(), true);
            let lt = g.constant(Matrix::filled(1, 1, log_tau));
            let l = contrastive_loss_node(&mut g, tn, cn, lt).unwrap();
            let grads = g.backward(l.cl);
            t = t.sub(&grads.get(tn).unwrap().scale(0.1));
            c = c.sub(&grads.get(cn).unwrap().scale(0.1));
        }
        let s = SimilarityMatrix::from_embeddings(&t, &c).unwrap().0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(s.get(i, i) > s.get(i, j) && s.get(j, j) > s.get(i, j));
                }
            }
        }
    }

    #[test]
    fn temperature_config() {
        ContrastiveConfig::default().validate().unwrap();
        let c = ContrastiveConfig::default();
        assert!((c.clamp_log_tau(10.0f64).exp() - 100.0).abs() < 1e-9);
        assert!((c.clamp_log_tau(-20.0f64).exp() - 1e-3).abs() < 1e-12);
        assert!(ContrastiveConfig { tau_min: 0.0, ..c }.validate().is_err());
    }
}
