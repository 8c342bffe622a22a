//! InfoNCE over in-batch negatives with cosine similarity, and its analytic
//! gradient with respect to the raw (unnormalized) embeddings.
//!
//! For anchor `i` the candidates are every positive in the batch: its own
//! positive `i+` and the `B - 1` positives of the other objects. With
//! `s_ik = cos(a_i, p_k)` the per-anchor loss is
//! `-log(exp(s_ii/τ) / Σ_k exp(s_ik/τ))` and the batch loss is the mean.

use super::ContrastiveError;
use crate::encoder::EmbeddingVector;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Per-anchor losses, mean equals `loss`.
    pub per_anchor: Vec<f64>,
    pub grad_anchors: Vec<Vec<f64>>,
    pub grad_positives: Vec<Vec<f64>>,
}

fn check_inputs(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<usize, ContrastiveError> {
    if anchors.len() != positives.len() {
        return Err(ContrastiveError::DegenerateBatch(format!(
            "{} anchors but {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    if anchors.len() < 2 {
        return Err(ContrastiveError::DegenerateBatch(format!(
            "batch size {} < 2",
            anchors.len()
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(ContrastiveError::InvalidConfig(format!("temperature must be positive, got {tau}")));
    }
    let d = anchors[0].len();
    if anchors.iter().chain(positives).any(|v| v.len() != d) {
        return Err(ContrastiveError::DegenerateBatch("embedding dimensions differ".into()));
    }
    Ok(anchors.len())
}

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v.iter().map(|x| x / n).collect(), n)
}

/// Loss value and gradients.
pub fn info_nce(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<LossOutput, ContrastiveError> {
    let b = check_inputs(anchors, positives, tau)?;
    let d = anchors[0].len();
    let (a_hat, a_norm): (Vec<_>, Vec<_>) = anchors.iter().map(|v| unit(v)).unzip();
    let (p_hat, p_norm): (Vec<_>, Vec<_>) = positives.iter().map(|v| unit(v)).unzip();

    let mut sim = vec![vec![0.0f64; b]; b];
    for i in 0..b {
        for k in 0..b {
            let s: f64 = a_hat[i].iter().zip(&p_hat[k]).map(|(x, y)| x * y).sum();
            if !s.is_finite() {
                return Err(ContrastiveError::NonFinite(format!("similarity ({i}, {k}) is {s}")));
            }
            sim[i][k] = s;
        }
    }

    let mut per_anchor = Vec::with_capacity(b);
    // dL/ds_ik
    let mut dsim = vec![vec![0.0f64; b]; b];
    for i in 0..b {
        let logits: Vec<f64> = sim[i].iter().map(|s| s / tau).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        per_anchor.push(lse - logits[i]);
        for k in 0..b {
            let p = (logits[k] - lse).exp();
            let target = if k == i { 1.0 } else { 0.0 };
            dsim[i][k] = (p - target) / (b as f64 * tau);
        }
    }
    let loss = per_anchor.iter().sum::<f64>() / b as f64;
    if !loss.is_finite() {
        return Err(ContrastiveError::NonFinite(format!("loss is {loss}")));
    }

    let mut grad_anchors = vec![vec![0.0f64; d]; b];
    let mut grad_positives = vec![vec![0.0f64; d]; b];
    for i in 0..b {
        for k in 0..b {
            let g = dsim[i][k];
            let s = sim[i][k];
            for j in 0..d {
                grad_anchors[i][j] += g * (p_hat[k][j] - s * a_hat[i][j]) / a_norm[i];
                grad_positives[k][j] += g * (a_hat[i][j] - s * p_hat[k][j]) / p_norm[k];
            }
        }
    }
    Ok(LossOutput {
        loss,
        per_anchor,
        grad_anchors,
        grad_positives,
    })
}

/// Average of the anchor→positive and positive→anchor directions.
pub fn info_nce_symmetric(
    anchors: &[Vec<f64>],
    positives: &[Vec<f64>],
    tau: f64,
) -> Result<LossOutput, ContrastiveError> {
    let fwd = info_nce(anchors, positives, tau)?;
    let bwd = info_nce(positives, anchors, tau)?;
    let avg = |x: &[Vec<f64>], y: &[Vec<f64>]| -> Vec<Vec<f64>> {
        x.iter()
            .zip(y)
            .map(|(u, v)| u.iter().zip(v).map(|(a, b)| 0.5 * (a + b)).collect())
            .collect()
    };
    Ok(LossOutput {
        loss: 0.5 * (fwd.loss + bwd.loss),
        per_anchor: fwd
            .per_anchor
            .iter()
            .zip(&bwd.per_anchor)
            .map(|(a, b)| 0.5 * (a + b))
            .collect(),
        grad_anchors: avg(&fwd.grad_anchors, &bwd.grad_positives),
        grad_positives: avg(&fwd.grad_positives, &bwd.grad_anchors),
    })
}

fn to_f64(v: &[EmbeddingVector]) -> Vec<Vec<f64>> {
    v.iter()
        .map(|e| e.values.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// Batch-mean InfoNCE of aligned anchor/positive embeddings.
pub fn info_nce_loss(
    anchor_embs: &[EmbeddingVector],
    positive_embs: &[EmbeddingVector],
    tau: f64,
) -> Result<f64, ContrastiveError> {
    Ok(info_nce(&to_f64(anchor_embs), &to_f64(positive_embs), tau)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent route: explicit normalized similarity matrix, plain
    /// (unstabilized) softmax, cross-entropy against the diagonal.
    pub(crate) fn oracle(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
        let normalize = |v: &Vec<f64>| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a: Vec<_> = anchors.iter().map(normalize).collect();
        let p: Vec<_> = positives.iter().map(normalize).collect();
        let b = a.len();
        let mut total = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..b)
                .map(|k| (a[i].iter().zip(&p[k]).map(|(x, y)| x * y).sum::<f64>() / tau).exp())
                .collect();
            let z: f64 = row.iter().sum();
            total += -(row[i] / z).ln();
        }
        total / b as f64
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut draw = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let a = (0..b).map(|_| draw()).collect();
        let p = (0..b).map(|_| draw()).collect();
        (a, p)
    }

    #[test]
    fn uniform_similarities_give_ln_b() {
        // All vectors identical: every similarity is 1.
        let v = vec![vec![0.3, -0.2, 0.9]; 4];
        for tau in [0.05, 0.1, 1.0, 7.0] {
            let out = info_nce(&v, &v, tau).unwrap();
            assert!((out.loss - 4f64.ln()).abs() < 1e-6, "tau {tau}: {}", out.loss);
        }
    }

    #[test]
    fn separable_closed_form() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let a = vec![e(0), e(1), e(2)];
        let out = info_nce(&a, &a, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((expected - 0.55144).abs() < 1e-5);
        for l in &out.per_anchor {
            assert!((l - expected).abs() < 1e-6);
        }
        assert!((out.loss - 0.551_444_6).abs() < 1e-6);
    }

    #[test]
    fn matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let b = rng.gen_range(2..=6);
            let d = rng.gen_range(2..=8);
            let tau = [0.05, 0.1, 1.0][rng.gen_range(0..3)];
            let (a, p) = random_batch(&mut rng, b, d);
            let got = info_nce(&a, &p, tau).unwrap().loss;
            assert!((got - oracle(&a, &p, tau)).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-5;
        for _ in 0..20 {
            let b = rng.gen_range(2..=5);
            let d = rng.gen_range(2..=8);
            let tau = [0.1, 0.5, 1.0][rng.gen_range(0..3)];
            let (a, p) = random_batch(&mut rng, b, d);
            let out = info_nce(&a, &p, tau).unwrap();
            for side in 0..2 {
                for i in 0..b {
                    for j in 0..d {
                        let (mut ap, mut pp) = (a.clone(), p.clone());
                        let (mut am, mut pm) = (a.clone(), p.clone());
                        if side == 0 {
                            ap[i][j] += h;
                            am[i][j] -= h;
                        } else {
                            pp[i][j] += h;
                            pm[i][j] -= h;
                        }
                        let num = (oracle(&ap, &pp, tau) - oracle(&am, &pm, tau)) / (2.0 * h);
                        let ana = if side == 0 { out.grad_anchors[i][j] } else { out.grad_positives[i][j] };
                        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                        assert!(rel < 1e-4, "side {side} ({i},{j}): {ana} vs {num}");
                    }
                }
            }
        }
    }

    #[test]
    fn lower_temperature_sharpens_separable_batches() {
        let a = vec![vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.2]];
        let mut last = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.05] {
            let l = info_nce(&a, &a, tau).unwrap().loss;
            assert!(l < last);
            assert!(l >= 0.0);
            last = l;
        }
    }

    #[test]
    fn symmetric_variant_is_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, p) = random_batch(&mut rng, 4, 5);
        let sym = info_nce_symmetric(&a, &p, 0.3).unwrap().loss;
        let expected = 0.5 * (oracle(&a, &p, 0.3) + oracle(&p, &a, 0.3));
        assert!((sym - expected).abs() < 1e-9);
    }

    #[test]
    fn error_cases() {
        let one = vec![vec![1.0, 0.0]];
        assert!(matches!(info_nce(&one, &one, 0.1), Err(ContrastiveError::DegenerateBatch(_))));
        let two = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(info_nce(&two, &one, 0.1), Err(ContrastiveError::DegenerateBatch(_))));
        assert!(matches!(info_nce(&two, &two, 0.0), Err(ContrastiveError::InvalidConfig(_))));
        let zero = vec![vec![0.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(info_nce(&zero, &two, 0.1), Err(ContrastiveError::NonFinite(_))));
        let nan = vec![vec![f64::NAN, 0.0], vec![0.0, 1.0]];
        assert!(matches!(info_nce(&nan, &two, 0.1), Err(ContrastiveError::NonFinite(_))));
    }

    #[test]
    fn embedding_vector_entry_point() {
        let mk = |v: &[f32]| EmbeddingVector::new(v.to_vec(), "t");
        let a = vec![mk(&[1.0, 0.0]), mk(&[0.0, 1.0])];
        let l = info_nce_loss(&a, &a, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - expected).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn loss_is_non_negative(seed in 0u64..10_000, b in 2usize..6, d in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, p) = random_batch(&mut rng, b, d);
            let l = info_nce(&a, &p, 0.1).unwrap().loss;
            proptest::prop_assert!(l >= 0.0);
        }
    }
}
