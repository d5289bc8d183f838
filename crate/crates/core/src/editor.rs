//! Multi-round null-space projected editing.
//!
//! Each round optimises per-question target values `v_j = h_j + delta_j`
//! against the current weights, then applies the closed-form ridge update
//! restricted to the null space of the preserved keys, mixing a clean-key
//! solution with one fitted on Gaussian-perturbed keys:
//!
//! ```text
//! W_i = W_{i-1} + (1 - lambda) * D0_i P + lambda * D1_i P
//! ```
//!
//! The loop stops early once `||W_i K1 - V1_i||_F < tau`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{capacity, AnswerPermutation};
use crate::error::{Error, Result};
use crate::generator::QuestionSpec;
use crate::rng;
use crate::toymodel::ModelState;

/// Orthogonal projector onto the null space of `K0 K0^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub p: DMatrix<f64>,
    /// Number of eigenvalues treated as zero, i.e. the null-space dimension.
    pub rank_deficiency: usize,
}

/// `P = U_hat U_hat^T` where `U_hat` are the eigenvectors of `K0 K0^T` whose
/// eigenvalue is at most `svd_zero_tol * lambda_max`.
pub fn build_projector(k0: &DMatrix<f64>, svd_zero_tol: f64) -> Result<Projector> {
    let d_k = k0.nrows();
    let eig = (k0 * k0.transpose()).symmetric_eigen();
    let cutoff = svd_zero_tol * eig.eigenvalues.max().max(0.0);
    let null: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .filter(|(&l, _)| l <= cutoff)
        .map(|(_, u)| u.into_owned())
        .collect();
    if null.is_empty() {
        return Err(Error::NoNullSpace { rank: d_k, dim: d_k });
    }
    let u_hat = DMatrix::from_columns(&null);
    Ok(Projector { p: &u_hat * u_hat.transpose(), rank_deficiency: null.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilizationMode {
    /// Some question still answers wrongly: clip `delta` to `epsilon * ||h||`.
    NotAllEdited,
    /// Every question already answers correctly: clip to `||h|| / (t - 1)`.
    AllEdited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    /// Maximum number of rounds.
    pub t: usize,
    /// Weight of the noisy-key update.
    pub lambda: f64,
    /// Editing-score threshold for early stop.
    pub tau: f64,
    /// Relative clip for `delta` while some question is unedited.
    pub epsilon: f64,
    /// Noise std relative to `mean ||k|| / sqrt(d_k)`.
    pub noise_sigma_rel: f64,
    /// Relative eigenvalue cutoff defining the null space.
    pub svd_zero_tol: f64,
    /// Gradient-descent steps for each `delta`.
    pub delta_steps: usize,
    pub delta_lr: f64,
    /// Seed of the per-round noise matrices.
    pub noise_seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            t: 3,
            lambda: 0.3,
            tau: 0.5,
            epsilon: 0.5,
            noise_sigma_rel: 0.1,
            svd_zero_tol: 1e-8,
            delta_steps: 200,
            delta_lr: 0.1,
            noise_seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("t must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda={} outside [0, 1]", self.lambda)));
        }
        if !(self.tau > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("tau and epsilon must be positive".into()));
        }
        if !(self.noise_sigma_rel >= 0.0) || !(self.svd_zero_tol > 0.0) || !(self.delta_lr > 0.0) {
            return Err(Error::Config("noise_sigma_rel, svd_zero_tol and delta_lr must be non-negative/positive".into()));
        }
        Ok(())
    }

    /// Upper bound on `||delta|| / ||h||` in the given mode.
    pub fn clip_ratio(&self, mode: StabilizationMode) -> f64 {
        match mode {
            StabilizationMode::AllEdited if self.t > 1 => 1.0 / (self.t - 1) as f64,
            _ => self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: StabilizationMode,
    /// Questions answering correctly before the round's update.
    pub correct_before: usize,
    /// `||V1 - W_{i-1} K1||_F`, the clean residual the round starts from.
    pub residual_norm: f64,
    /// Number of `delta_j` rescaled by the clip.
    pub clipped: usize,
    /// `||W_i - W_{i-1}||_F`.
    pub update_norm: f64,
    /// Editing score `||W_i K1 - V1_i||_F`.
    pub score: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditTrace {
    pub rounds: Vec<RoundRecord>,
    pub early_stopped: bool,
    /// Questions answering correctly after the last round.
    pub correct_after: usize,
    pub questions: usize,
    pub seconds: Option<f64>,
}

impl EditTrace {
    /// Copy without wall-clock fields, for byte-reproducible reports.
    pub fn without_timings(&self) -> Self {
        let mut t = self.clone();
        t.seconds = None;
        for r in &mut t.rounds {
            r.seconds = None;
        }
        t
    }

    pub fn all_edited(&self) -> bool {
        self.correct_after == self.questions
    }
}

/// Target values of one round.
#[derive(Debug, Clone)]
pub struct TargetValues {
    pub values: DMatrix<f64>,
    pub hidden: DMatrix<f64>,
    pub clipped: usize,
}

/// Runs gradient descent on `delta_j` from zero to minimise the answer loss of
/// `h_j + delta_j`, clips it according to `mode`, and returns `h_j + delta_j`
/// as columns.
pub fn solve_target_values<T: AsRef<[i64]>>(
    model: &ModelState,
    keys: &DMatrix<f64>,
    targets: &[T],
    mode: StabilizationMode,
    config: &EditConfig,
) -> Result<TargetValues> {
    if keys.ncols() != targets.len() {
        return Err(Error::Param(format!("{} keys for {} targets", keys.ncols(), targets.len())));
    }
    let hidden = model.w() * keys;
    let ratio = config.clip_ratio(mode);
    let mut values = hidden.clone();
    let mut clipped = 0;
    for (j, target) in targets.iter().enumerate() {
        let h = hidden.column(j).into_owned();
        let mut delta = DVector::zeros(h.len());
        for step in 0..config.delta_steps {
            let (loss, grad) = model.answer_loss_and_gradient(&(&h + &delta), target.as_ref())?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite answer loss for question {} at step {step}",
                    j + 1
                )));
            }
            delta.axpy(-config.delta_lr, &grad, 1.0);
        }
        let bound = ratio * h.norm();
        let norm = delta.norm();
        if norm > bound {
            delta *= bound / norm;
            clipped += 1;
        }
        values.set_column(j, &(h + delta));
    }
    Ok(TargetValues { values, hidden, clipped })
}

/// Minimiser of `||(W + D P) K - V||^2 + ||D P||^2` with `K = K1 + noise`:
///
/// `D P = R (I + K^T P K)^{-1} K^T P`, `R = V - W K`,
///
/// solved as a `u x u` symmetric positive-definite system.
pub fn closed_form_update(
    w: &DMatrix<f64>,
    k1: &DMatrix<f64>,
    v1: &DMatrix<f64>,
    projector: &Projector,
    noise: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let (d_v, d_k) = w.shape();
    let u = k1.ncols();
    let p = &projector.p;
    if k1.nrows() != d_k || v1.shape() != (d_v, u) || p.shape() != (d_k, d_k) {
        return Err(Error::Param(format!(
            "shape mismatch: W{:?} K1{:?} V1{:?} P{:?}",
            w.shape(),
            k1.shape(),
            v1.shape(),
            p.shape()
        )));
    }
    let keys = match noise {
        Some(eps) if eps.shape() != k1.shape() => {
            return Err(Error::Param(format!("noise {:?} vs K1 {:?}", eps.shape(), k1.shape())));
        }
        Some(eps) => k1 + eps,
        None => k1.clone(),
    };
    let residual = v1 - w * &keys;
    let kt_p = keys.transpose() * p;
    let system = DMatrix::identity(u, u) + &kt_p * &keys;
    let chol = system
        .cholesky()
        .ok_or_else(|| Error::Numeric("I + K^T P K is not positive definite".into()))?;
    Ok(residual * chol.solve(&kt_p))
}

/// Gaussian key noise with `sigma = sigma_rel * mean ||k_j|| / sqrt(d_k)`.
pub fn sample_noise_matrix(k1: &DMatrix<f64>, sigma_rel: f64, round_seed: u64, round: usize) -> DMatrix<f64> {
    let (d_k, u) = k1.shape();
    if sigma_rel == 0.0 || u == 0 {
        return DMatrix::zeros(d_k, u);
    }
    let mean_norm = k1.column_iter().map(|c| c.norm()).sum::<f64>() / u as f64;
    let sigma = sigma_rel * mean_norm / (d_k as f64).sqrt();
    let mut rng = rng::stream(round_seed, "key-noise", round as u64);
    DMatrix::from_fn(d_k, u, |_, _| sigma * rng.sample::<f64, _>(StandardNormal))
}

fn count_correct<T: AsRef<[i64]>>(model: &ModelState, keys: &DMatrix<f64>, targets: &[T]) -> Result<usize> {
    let h = model.w() * keys;
    let mut n = 0;
    for (j, t) in targets.iter().enumerate() {
        let t = t.as_ref();
        if model.decode_answer(&h.column(j).into_owned(), t.len())? == t {
            n += 1;
        }
    }
    Ok(n)
}

/// Checks that `targets[j]` is a valid answer to `questions[j]`.
pub fn validate_targets(questions: &[QuestionSpec], targets: &[AnswerPermutation]) -> Result<()> {
    if questions.len() != targets.len() {
        return Err(Error::Param(format!("{} questions for {} targets", questions.len(), targets.len())));
    }
    if questions.is_empty() {
        return Err(Error::Param("nothing to embed".into()));
    }
    for (q, t) in questions.iter().zip(targets) {
        let params = capacity(q.n, q.m)?;
        AnswerPermutation::new(t.values().to_vec(), q.a, &params)?;
    }
    Ok(())
}

/// Edits `model` so that every question generates its target answer.
pub fn embed(
    model: &ModelState,
    questions: &[QuestionSpec],
    targets: &[AnswerPermutation],
    config: &EditConfig,
) -> Result<(ModelState, EditTrace)> {
    let projector = build_projector(model.k0(), config.svd_zero_tol)?;
    embed_with_projector(model, questions, targets, config, &projector)
}

/// [`embed`] with a precomputed projector.
pub fn embed_with_projector(
    model: &ModelState,
    questions: &[QuestionSpec],
    targets: &[AnswerPermutation],
    config: &EditConfig,
    projector: &Projector,
) -> Result<(ModelState, EditTrace)> {
    validate_targets(questions, targets)?;
    let prompts: Vec<&str> = questions.iter().map(|q| q.prompt.as_str()).collect();
    embed_prompts(model, &prompts, targets, config, projector)
}

/// Core editing loop over arbitrary prompt/answer pairs. Targets only need to
/// be representable by the decoder.
pub fn embed_prompts<S: AsRef<str>, T: AsRef<[i64]>>(
    model: &ModelState,
    prompts: &[S],
    targets: &[T],
    config: &EditConfig,
    projector: &Projector,
) -> Result<(ModelState, EditTrace)> {
    config.validate()?;
    if prompts.len() != targets.len() || prompts.is_empty() {
        return Err(Error::Param(format!("{} prompts for {} targets", prompts.len(), targets.len())));
    }
    let start = Instant::now();
    let k1 = model.keys(prompts);
    let mut current = model.clone();
    let mut trace = EditTrace { questions: prompts.len(), ..EditTrace::default() };

    for round in 1..=config.t {
        let round_start = Instant::now();
        let correct_before = count_correct(&current, &k1, targets)?;
        let mode = if correct_before == targets.len() {
            StabilizationMode::AllEdited
        } else {
            StabilizationMode::NotAllEdited
        };
        let tv = solve_target_values(&current, &k1, targets, mode, config)?;
        let w = current.w();
        let clean = closed_form_update(w, &k1, &tv.values, projector, None)?;
        let mut update = clean * (1.0 - config.lambda);
        if config.lambda > 0.0 {
            let eps = sample_noise_matrix(&k1, config.noise_sigma_rel, config.noise_seed, round);
            update += closed_form_update(w, &k1, &tv.values, projector, Some(&eps))? * config.lambda;
        }
        let next = w + &update;
        let score = (&next * &k1 - &tv.values).norm();
        trace.rounds.push(RoundRecord {
            round,
            mode,
            correct_before,
            residual_norm: (&tv.values - &tv.hidden).norm(),
            clipped: tv.clipped,
            update_norm: update.norm(),
            score,
            seconds: Some(round_start.elapsed().as_secs_f64()),
        });
        if next.iter().any(|x| !x.is_finite()) || !score.is_finite() {
            trace.seconds = Some(start.elapsed().as_secs_f64());
            return Err(Error::Divergence { round, trace: Box::new(trace) });
        }
        current = current.with_weights(next);
        if score < config.tau {
            trace.early_stopped = round < config.t;
            break;
        }
    }
    trace.correct_after = count_correct(&current, &k1, targets)?;
    trace.seconds = Some(start.elapsed().as_secs_f64());
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng::stream(seed, "editor-test", 0);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn projector_of_basis_directions() {
        let (d_k, p) = (6, 2);
        let k0 = DMatrix::from_fn(d_k, p, |r, c| if r == c { 3.0 } else { 0.0 });
        let proj = build_projector(&k0, 1e-8).unwrap();
        let mut expected = DMatrix::zeros(d_k, d_k);
        for i in p..d_k {
            expected[(i, i)] = 1.0;
        }
        assert!((&proj.p - expected).norm() < 1e-10);
        assert_eq!(proj.rank_deficiency, d_k - p);
    }

    #[test]
    fn projector_invariants_on_random_keys() {
        let k0 = random_matrix(40, 15, 1);
        let proj = build_projector(&k0, 1e-8).unwrap();
        let p = &proj.p;
        assert!((p - p.transpose()).norm() <= 1e-8 * p.norm());
        assert!((p * p - p).norm() <= 1e-6 * p.norm());
        assert!((p * &k0).norm() <= 1e-5 * k0.norm());
        assert_eq!(proj.rank_deficiency, 25);
    }

    #[test]
    fn full_rank_keys_have_no_null_space() {
        let k0 = random_matrix(8, 10, 2);
        assert!(matches!(build_projector(&k0, 1e-8), Err(Error::NoNullSpace { .. })));
    }

    #[test]
    fn zero_residual_gives_zero_update() {
        let k0 = random_matrix(10, 4, 3);
        let proj = build_projector(&k0, 1e-8).unwrap();
        let w = random_matrix(5, 10, 4);
        let k1 = random_matrix(10, 2, 5);
        let v1 = &w * &k1;
        let d = closed_form_update(&w, &k1, &v1, &proj, None).unwrap();
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn update_annihilates_preserved_keys() {
        let k0 = random_matrix(12, 5, 6);
        let proj = build_projector(&k0, 1e-8).unwrap();
        let w = random_matrix(7, 12, 7);
        let k1 = random_matrix(12, 3, 8);
        let v1 = random_matrix(7, 3, 9);
        let eps = sample_noise_matrix(&k1, 0.3, 1, 1);
        for noise in [None, Some(&eps)] {
            let d = closed_form_update(&w, &k1, &v1, &proj, noise).unwrap();
            assert!((&d * &k0).norm() <= 1e-5 * d.norm() * k0.norm());
        }
    }

    #[test]
    fn update_matches_normal_equations_on_tiny_instance() {
        // u = 1, d_k = 4, d_v = 2; minimise J(D) = ||(W + D P) k - v||^2 + ||D P||^2
        // over the 8 entries of D by solving its normal equations directly.
        let k0 = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 0.0, -1.0]);
        let proj = build_projector(&k0, 1e-8).unwrap();
        let p = &proj.p;
        let w = DMatrix::from_row_slice(2, 4, &[0.5, -1.0, 0.2, 0.0, 1.5, 0.3, -0.7, 0.4]);
        let k = DMatrix::from_column_slice(4, 1, &[0.3, -0.2, 1.1, 0.6]);
        let v = DMatrix::from_column_slice(2, 1, &[2.0, -1.0]);

        // J is quadratic in vec(D); J(x) = ||A x - b||^2 + ||B x||^2 with x = vec(D) row-major.
        let n = 8;
        let pk = p * &k;
        let r0 = &v - &w * &k;
        let mut a = DMatrix::zeros(2, n);
        let mut bm = DMatrix::zeros(8, n);
        for i in 0..2 {
            for j in 0..4 {
                let col = i * 4 + j;
                a[(i, col)] = pk[(j, 0)];
                for c in 0..4 {
                    bm[(i * 4 + c, col)] = p[(j, c)];
                }
            }
        }
        let lhs = a.transpose() * &a + bm.transpose() * &bm;
        let rhs = a.transpose() * DVector::from_column_slice(r0.as_slice());
        // D itself is not unique (only D P matters), so take the minimum-norm solution.
        let x = lhs.svd(true, true).solve(&rhs, 1e-12).unwrap();
        let d = DMatrix::from_row_slice(2, 4, x.as_slice());
        let oracle = d * p;

        let ours = closed_form_update(&w, &k, &v, &proj, None).unwrap();
        assert!((ours - oracle).norm() < 1e-9);
    }

    #[test]
    fn noise_matrix_statistics() {
        let k1 = DMatrix::from_element(128, 8, 1.0);
        assert_eq!(sample_noise_matrix(&k1, 0.0, 1, 1), DMatrix::zeros(128, 8));
        let e = sample_noise_matrix(&k1, 0.5, 1, 1);
        let sigma = 0.5 * (128f64).sqrt() / (128f64).sqrt();
        let mean = e.mean();
        let std = (e.map(|x| (x - mean).powi(2)).sum() / (e.len() - 1) as f64).sqrt();
        assert!((std - sigma).abs() < 0.1 * sigma, "std {std} vs {sigma}");
        assert_ne!(e, sample_noise_matrix(&k1, 0.5, 1, 2));
        assert_eq!(e, sample_noise_matrix(&k1, 0.5, 1, 1));
    }

    #[test]
    fn clip_ratios() {
        let c = EditConfig::default();
        assert_eq!(c.clip_ratio(StabilizationMode::NotAllEdited), 0.5);
        assert_eq!(c.clip_ratio(StabilizationMode::AllEdited), 0.5);
        let c = EditConfig { t: 5, epsilon: 0.2, ..c };
        assert_eq!(c.clip_ratio(StabilizationMode::AllEdited), 0.25);
        let c = EditConfig { t: 1, ..c };
        assert_eq!(c.clip_ratio(StabilizationMode::AllEdited), 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(EditConfig::default().validate().is_ok());
        assert!(EditConfig { t: 0, ..EditConfig::default() }.validate().is_err());
        assert!(EditConfig { lambda: 1.5, ..EditConfig::default() }.validate().is_err());
        assert!(EditConfig { tau: 0.0, ..EditConfig::default() }.validate().is_err());
    }
}
