//! Cross-supervision: view assembly, attention-weighted view fusion into the
//! study feature v^k, the study→report contrastive objective, and the
//! total-loss composition with its ablation switches.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::GrayImage;
use crate::error::{Error, Result};
use crate::nn::{Linear, Param};
use crate::tensor::{Scalar, Tensor};
use crate::text::MEMORY_SLOTS;

/// Number of views every study is normalized to before fusion.
pub const FUSED_VIEWS: usize = 3;

/// Task and architecture switches mirroring the ablation matrix rows.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub temperature: f64,
    pub task1_enabled: bool,
    pub task2_enabled: bool,
    pub view_fusion_enabled: bool,
    pub rec_concat_enabled: bool,
    pub lsp_mode: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            task1_enabled: true,
            task2_enabled: true,
            view_fusion_enabled: true,
            rec_concat_enabled: true,
            lsp_mode: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !self.lsp_mode && !self.task1_enabled && !self.task2_enabled {
            return Err(Error::Config(
                "at least one task must be enabled unless running in label-supervised mode".into(),
            ));
        }
        Ok(())
    }
}

/// Normalize a study to exactly three views: a single view is repeated, two
/// views duplicate one of them, more than three are sampled without
/// replacement.
pub fn assemble_views(views: &[GrayImage], rng: &mut impl Rng) -> Result<[GrayImage; 3]> {
    match views.len() {
        0 => Err(Error::Data("study has no views".to_string())),
        1 => Ok([views[0].clone(), views[0].clone(), views[0].clone()]),
        2 => {
            let dup = rng.gen_range(0..2);
            let mut trio = vec![views[0].clone(), views[1].clone(), views[dup].clone()];
            trio.shuffle(rng);
            let mut it = trio.into_iter();
            Ok([it.next().unwrap(), it.next().unwrap(), it.next().unwrap()])
        }
        n => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            Ok([
                views[order[0]].clone(),
                views[order[1]].clone(),
                views[order[2]].clone(),
            ])
        }
    }
}

/// Two-layer perceptron scoring the three concatenated view features.
pub struct FusionHead<E: Scalar> {
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
}

impl<E: Scalar> FusionHead<E> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        FusionHead {
            fc1: Linear::new(FUSED_VIEWS * dim, dim, rng),
            fc2: Linear::new(dim, FUSED_VIEWS, rng),
        }
    }

    /// Raw attention score per view.
    pub fn scores(&self, f1: &Tensor<E>, f2: &Tensor<E>, f3: &Tensor<E>) -> Result<Tensor<E>> {
        let cat = Tensor::concat(&[f1.clone(), f2.clone(), f3.clone()], 0)?;
        self.fc2.forward_vec(&self.fc1.forward_vec(&cat)?.relu())
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<E>>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Softmax-normalized fusion: v = concat(w₁f₁, w₂f₂, w₃f₃) with the weights
/// computed by the fusion head. Without a head every weight is 1/3 (the
/// view-fusion ablation).
pub fn view_fusion<E: Scalar>(
    head: Option<&FusionHead<E>>,
    f1: &Tensor<E>,
    f2: &Tensor<E>,
    f3: &Tensor<E>,
) -> Result<Tensor<E>> {
    if f1.shape() != f2.shape() || f2.shape() != f3.shape() || f1.rank() != 1 {
        return Err(Error::Shape(format!(
            "view features must share one 1-D shape, got {:?}/{:?}/{:?}",
            f1.shape(),
            f2.shape(),
            f3.shape()
        )));
    }
    let weighted = match head {
        Some(head) => {
            let w = head.scores(f1, f2, f3)?.softmax(0)?;
            [
                f1.mul(&w.narrow(0, 0, 1)?)?,
                f2.mul(&w.narrow(0, 1, 1)?)?,
                f3.mul(&w.narrow(0, 2, 1)?)?,
            ]
        }
        None => {
            let third = E::from_f64(1.0 / FUSED_VIEWS as f64);
            [f1.scale(third), f2.scale(third), f3.scale(third)]
        }
    };
    Tensor::concat(&weighted, 0)
}

/// Reshape the fused study feature (3d) into the decoder's `[3×d]` memory.
pub fn study_memory<E: Scalar>(v: &Tensor<E>) -> Result<Tensor<E>> {
    if v.rank() != 1 || v.numel() % MEMORY_SLOTS != 0 {
        return Err(Error::Shape(format!(
            "study feature must be 1-D with a length divisible by {MEMORY_SLOTS}, got {:?}",
            v.shape()
        )));
    }
    v.reshape(&[MEMORY_SLOTS, v.numel() / MEMORY_SLOTS])
}

/// Linear projections aligning the visual (3d) and textual features in one
/// shared embedding space before the cosine.
pub struct ProjectionPair<E: Scalar> {
    pub visual: Linear<E>,
    pub textual: Linear<E>,
}

impl<E: Scalar> ProjectionPair<E> {
    /// Bias-free projections with fan-in scaled init: a bias term would hand
    /// the contrastive loss a degenerate optimum (all outputs collapse onto
    /// the bias direction, every cosine equal), and the cosine normalization
    /// makes the output scale irrelevant anyway.
    pub fn new(visual_dim: usize, text_dim: usize, shared_dim: usize, rng: &mut impl Rng) -> Self {
        ProjectionPair {
            visual: Linear::new_no_bias(visual_dim, shared_dim, (visual_dim as f64).powf(-0.5), rng),
            textual: Linear::new_no_bias(text_dim, shared_dim, (text_dim as f64).powf(-0.5), rng),
        }
    }

    /// Identity projections for algebraic identity tests (square dims only).
    pub fn identity(dim: usize) -> Self {
        ProjectionPair {
            visual: Linear::from_parts(Tensor::eye(dim), None),
            textual: Linear::from_parts(Tensor::eye(dim), None),
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<E>>) {
        self.visual.params(&format!("{prefix}.visual"), out);
        self.textual.params(&format!("{prefix}.textual"), out);
    }
}

fn l2_norm<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    Ok(x.mul(x)?.sum().sqrt())
}

/// Cosine similarity of two 1-D tensors as a `[1]` tensor on the graph.
pub fn cosine<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let na = l2_norm(a)?;
    let nb = l2_norm(b)?;
    if na.item()?.to_f64() == 0.0 || nb.item()?.to_f64() == 0.0 {
        return Err(Error::Numeric(
            "zero-norm feature in cosine similarity".to_string(),
        ));
    }
    a.mul(b)?.sum().div(&na.mul(&nb)?)
}

/// The study→report contrastive objective: for every study k the projected
/// study feature is pulled toward its own projected report feature against
/// the batch of reports,
/// mean over k of −log( exp(cos_kk/τ) / Σ_i exp(cos_ki/τ) ).
pub fn contrastive_loss<E: Scalar>(
    proj: &ProjectionPair<E>,
    study_features: &[Tensor<E>],
    report_features: &[Tensor<E>],
    temperature: f64,
) -> Result<Tensor<E>> {
    let b = study_features.len();
    if b == 0 || b != report_features.len() {
        return Err(Error::Contract(format!(
            "contrastive batch mismatch: {} studies vs {} reports",
            b,
            report_features.len()
        )));
    }
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let inv_tau = E::from_f64(1.0 / temperature);
    let vs: Vec<Tensor<E>> = study_features
        .iter()
        .map(|v| proj.visual.forward_vec(v))
        .collect::<Result<_>>()?;
    let ts: Vec<Tensor<E>> = report_features
        .iter()
        .map(|t| proj.textual.forward_vec(t))
        .collect::<Result<_>>()?;

    let mut total: Option<Tensor<E>> = None;
    for k in 0..b {
        let sims: Vec<Tensor<E>> = (0..b)
            .map(|i| Ok(cosine(&vs[k], &ts[i])?.scale(inv_tau)))
            .collect::<Result<_>>()?;
        let row = Tensor::concat(&sims, 0)?;
        let log_probs = row.log_softmax(0)?;
        let loss_k = log_probs.narrow(0, k, 1)?.neg();
        total = Some(match total {
            Some(t) => t.add(&loss_k)?,
            None => loss_k,
        });
    }
    Ok(total.expect("batch is non-empty").scale(E::from_f64(1.0 / b as f64)))
}

/// Sum the enabled task losses with unit weights; in label-supervised mode
/// the classification loss replaces both.
pub fn total_loss<E: Scalar>(
    cfg: &LossConfig,
    language: Option<Tensor<E>>,
    contrast: Option<Tensor<E>>,
    label_supervised: Option<Tensor<E>>,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if cfg.lsp_mode {
        return label_supervised
            .ok_or_else(|| Error::Contract("label-supervised mode needs a classification loss".into()));
    }
    let mut total: Option<Tensor<E>> = None;
    if cfg.task1_enabled {
        let lang = language.ok_or_else(|| Error::Contract("task 1 enabled but no language loss".into()))?;
        total = Some(lang);
    }
    if cfg.task2_enabled {
        let con = contrast.ok_or_else(|| Error::Contract("task 2 enabled but no contrastive loss".into()))?;
        total = Some(match total {
            Some(t) => t.add(&con)?,
            None => con,
        });
    }
    total.ok_or_else(|| Error::Contract("no loss term enabled".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::trunc_normal;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn img(value: f32) -> GrayImage {
        GrayImage { size: 2, pixels: vec![value; 4] }
    }

    #[test]
    fn assemble_views_covers_all_arities() {
        let mut r = rng(1);
        assert!(assemble_views(&[], &mut r).is_err());

        let one = assemble_views(&[img(0.1)], &mut r).unwrap();
        assert!(one.iter().all(|v| v.pixels[0] == 0.1));

        let two = assemble_views(&[img(0.1), img(0.2)], &mut r).unwrap();
        let mut vals: Vec<f32> = two.iter().map(|v| v.pixels[0]).collect();
        vals.sort_by(f32::total_cmp);
        assert!(vals == [0.1, 0.1, 0.2] || vals == [0.1, 0.2, 0.2]);

        let three = assemble_views(&[img(0.1), img(0.2), img(0.3)], &mut r).unwrap();
        let mut vals: Vec<f32> = three.iter().map(|v| v.pixels[0]).collect();
        vals.sort_by(f32::total_cmp);
        assert_eq!(vals, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn five_view_inclusion_frequency_matches_three_fifths() {
        let views: Vec<GrayImage> = (0..5).map(|i| img(i as f32 / 10.0)).collect();
        let mut r = rng(2);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let trio = assemble_views(&views, &mut r).unwrap();
            for v in &trio {
                let idx = (v.pixels[0] * 10.0).round() as usize;
                counts[idx] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.6).abs() <= 0.03, "view {i}: inclusion frequency {freq}");
        }
    }

    #[test]
    fn uniform_scores_reduce_fusion_to_plain_concat_over_three() {
        let mut r = rng(3);
        let head = FusionHead::<f64>::new(4, &mut r);
        // zero the score head so softmax is uniform
        head.fc2.weight.apply_update(|d| d.fill(0.0));
        head.fc2.bias.as_ref().unwrap().apply_update(|d| d.fill(0.0));
        let f1 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f2 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f3 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let v = view_fusion(Some(&head), &f1, &f2, &f3).unwrap();
        assert_eq!(v.shape(), &[12]);
        let expected: Vec<f64> = f1
            .to_vec()
            .into_iter()
            .chain(f2.to_vec())
            .chain(f3.to_vec())
            .map(|x| x / 3.0)
            .collect();
        for (a, b) in v.to_vec().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_views_fuse_into_three_thirds() {
        let mut r = rng(4);
        let head = FusionHead::<f64>::new(4, &mut r);
        let f = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let v = view_fusion(Some(&head), &f, &f, &f).unwrap().to_vec();
        // weights sum to one, and by symmetry of identical inputs each block
        // is the view scaled by its weight; the three blocks must sum to f
        let fv = f.to_vec();
        for j in 0..4 {
            let resum = v[j] + v[4 + j] + v[8 + j];
            assert!((resum - fv[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_weights_are_an_ordered_probability_vector() {
        let mut r = rng(5);
        let head = FusionHead::<f64>::new(4, &mut r);
        let f1 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f2 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f3 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let scores = head.scores(&f1, &f2, &f3).unwrap();
        let w = scores.softmax(0).unwrap().to_vec();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(w.iter().all(|&x| x > 0.0));
        // softmax is order-preserving in the raw scores
        let s = scores.to_vec();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s[i] > s[j], w[i] > w[j]);
            }
        }
    }

    #[test]
    fn fusion_head_gradients_match_finite_differences() {
        let mut r = rng(6);
        let head = FusionHead::<f64>::new(4, &mut r);
        let f1 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f2 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let f3 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let weights = trunc_normal::<f64>(&[12], 1.0, &mut r).detach();
        // differentiate with respect to the head parameters themselves
        let err = crate::tensor::grad_check_params(
            || Ok(view_fusion(Some(&head), &f1, &f2, &f3)?.mul(&weights)?.sum()),
            &[
                head.fc1.weight.clone(),
                head.fc1.bias.clone().unwrap(),
                head.fc2.weight.clone(),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn contrastive_singleton_batch_is_exactly_zero() {
        let proj = ProjectionPair::<f64>::identity(4);
        let v = trunc_normal::<f64>(&[4], 1.0, &mut rng(7)).detach();
        let t = trunc_normal::<f64>(&[4], 1.0, &mut rng(8)).detach();
        let loss = contrastive_loss(&proj, &[v], &[t], 0.5).unwrap().item().unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn contrastive_uniform_cosines_give_ln_b() {
        // all study features identical => every row of cosines is constant
        for b in [2usize, 4, 8] {
            let proj = ProjectionPair::<f64>::identity(4);
            let v = trunc_normal::<f64>(&[4], 1.0, &mut rng(9)).detach();
            let t = trunc_normal::<f64>(&[4], 1.0, &mut rng(10)).detach();
            let vs = vec![v; b];
            let ts = vec![t; b];
            let loss = contrastive_loss(&proj, &vs, &ts, 0.3).unwrap().item().unwrap();
            assert!((loss - (b as f64).ln()).abs() < 1e-9, "B={b}: {loss}");
        }
    }

    #[test]
    fn contrastive_two_by_two_closed_form() {
        // cosine diagonal 1, off-diagonal 0, τ=1:
        // loss = ln(1 + e^{-1})
        let proj = ProjectionPair::<f64>::identity(2);
        let v1 = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let v2 = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let loss = contrastive_loss(&proj, &[v1.clone(), v2.clone()], &[v1, v2], 1.0)
            .unwrap()
            .item()
            .unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn contrastive_rejects_mismatch_and_zero_norm() {
        let proj = ProjectionPair::<f64>::identity(2);
        let v = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(contrastive_loss(&proj, &[v.clone()], &[], 1.0).is_err());
        let zero = Tensor::zeros(&[2]);
        assert!(matches!(
            contrastive_loss(&proj, &[v.clone()], &[zero], 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn contrastive_is_invariant_to_power_of_two_feature_rescaling() {
        let proj = ProjectionPair::<f64>::identity(3);
        let mut r = rng(11);
        let vs: Vec<Tensor<f64>> =
            (0..3).map(|_| trunc_normal::<f64>(&[3], 1.0, &mut r).detach()).collect();
        let ts: Vec<Tensor<f64>> =
            (0..3).map(|_| trunc_normal::<f64>(&[3], 1.0, &mut r).detach()).collect();
        let base = contrastive_loss(&proj, &vs, &ts, 0.2).unwrap().item().unwrap();
        // scaling by powers of two is exact in binary floating point, so the
        // cosine normalization must cancel it bit for bit
        let mut scaled = vs.clone();
        scaled[1] = vs[1].scale(4.0).detach();
        let after = contrastive_loss(&proj, &scaled, &ts, 0.2).unwrap().item().unwrap();
        assert_eq!(base.to_bits(), after.to_bits());
        // arbitrary positive factors cancel to rounding error
        let mut scaled = vs.clone();
        scaled[2] = vs[2].scale(1.7).detach();
        let after = contrastive_loss(&proj, &scaled, &ts, 0.2).unwrap().item().unwrap();
        assert!((base - after).abs() < 1e-12);
    }

    #[test]
    fn lower_temperature_widens_hard_uniform_gap() {
        // hard-negative batch (orthogonal features) vs uniform batch
        let proj = ProjectionPair::<f64>::identity(2);
        let e1 = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let hard_v = vec![e1.clone(), e2.clone()];
        let hard_t = vec![e2.clone(), e1.clone()]; // mismatched: diagonal 0, off-diagonal 1
        let uni_v = vec![e1.clone(), e1.clone()];
        let uni_t = vec![e2.clone(), e2.clone()];
        let mut last_gap = f64::NEG_INFINITY;
        for tau in [1.0, 0.5, 0.1] {
            let hard = contrastive_loss(&proj, &hard_v, &hard_t, tau).unwrap().item().unwrap();
            let uniform = contrastive_loss(&proj, &uni_v, &uni_t, tau).unwrap().item().unwrap();
            let gap = hard - uniform;
            assert!(gap > last_gap, "gap not increasing at tau={tau}");
            last_gap = gap;
        }
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut r = rng(12);
        let proj = ProjectionPair::<f64>::new(4, 4, 3, &mut r);
        let v1 = trunc_normal::<f64>(&[4], 1.0, &mut r);
        let v2 = trunc_normal::<f64>(&[4], 1.0, &mut r);
        let t1 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let t2 = trunc_normal::<f64>(&[4], 1.0, &mut r).detach();
        let err = grad_check(
            |ins| {
                contrastive_loss(
                    &proj,
                    &[ins[0].clone(), ins[1].clone()],
                    &[t1.clone(), t2.clone()],
                    0.4,
                )
            },
            &[v1, v2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn total_loss_flag_matrix() {
        let lang = || Some(Tensor::scalar(2.0f64));
        let con = || Some(Tensor::scalar(0.5f64));

        let mut cfg = LossConfig::default();
        cfg.task2_enabled = false;
        let t = total_loss(&cfg, lang(), None, None).unwrap().item().unwrap();
        assert_eq!(t, 2.0);

        let mut cfg = LossConfig::default();
        cfg.task1_enabled = false;
        let t = total_loss(&cfg, None, con(), None).unwrap().item().unwrap();
        assert_eq!(t, 0.5);

        let cfg = LossConfig::default();
        let t = total_loss(&cfg, lang(), con(), None).unwrap().item().unwrap();
        assert!((t - 2.5).abs() < 1e-12);

        let mut cfg = LossConfig::default();
        cfg.lsp_mode = true;
        let t = total_loss(&cfg, None, None, Some(Tensor::scalar(0.25f64)))
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(t, 0.25);

        let mut cfg = LossConfig::default();
        cfg.task1_enabled = false;
        cfg.task2_enabled = false;
        assert!(matches!(total_loss::<f64>(&cfg, None, None, None), Err(Error::Config(_))));
    }

    #[test]
    fn study_memory_reshapes_three_slots() {
        let v = Tensor::<f64>::from_vec(&[6], (0..6).map(|i| i as f64).collect()).unwrap();
        let m = study_memory(&v).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert!(study_memory(&Tensor::<f64>::zeros(&[7])).is_err());
    }
}
