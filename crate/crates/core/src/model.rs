//! L2-regularized logistic regression fitted by IRLS, AUC, and cross-validated
//! selection of the regularization strength.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Encoder, Group, Instance};
use crate::error::{Error, Result};
use crate::util::{logistic, mean, rng_for, sha256_hex};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
/// Probability bounds used when a fit is flagged as separated.
pub const SEPARATION_CLAMP: f64 = 1e-6;
const PROBABILITY_FLOOR: f64 = 1e-15;

/// Default regularization grid searched by [`select_model`].
pub const DEFAULT_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Outcome predictor f(x, s).
    Outcome,
    /// Protected-attribute propensity g(x) = P(S = s− | x).
    Protected,
}

impl Target {
    fn label(self, inst: &Instance) -> u8 {
        match self {
            Target::Outcome => inst.y,
            Target::Protected => u8::from(inst.s == Group::Protected),
        }
    }
}

/// Anything that maps an instance to a probability in (0, 1).
pub trait Predictor: Sync {
    fn predict_proba(&self, instance: &Instance) -> Result<f64>;

    /// Whether predictions read the instance's protected label.
    fn includes_protected(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first, then one coefficient per design column.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub separation: bool,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn linear_predictor(x: &DMatrix<f64>, beta: &DVector<f64>) -> DVector<f64> {
    x * beta
}

fn penalized_loglik(
    eta: &DVector<f64>,
    y: &DVector<f64>,
    beta: &DVector<f64>,
    strength: f64,
) -> f64 {
    let ll: f64 = eta
        .iter()
        .zip(y.iter())
        .map(|(&e, &t)| t * e - softplus(e))
        .sum();
    let penalty: f64 = beta.iter().skip(1).map(|b| b * b).sum();
    ll - 0.5 * strength * penalty
}

/// Gradient of the penalized log-likelihood with the intercept left unpenalized.
pub fn penalized_gradient(
    design: &[Vec<f64>],
    labels: &[u8],
    coefficients: &[f64],
    strength: f64,
) -> Vec<f64> {
    let mut g = vec![0.0; coefficients.len()];
    for (row, &t) in design.iter().zip(labels) {
        let eta = coefficients[0]
            + row
                .iter()
                .zip(&coefficients[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        let r = t as f64 - logistic(eta);
        g[0] += r;
        for (gj, xj) in g[1..].iter_mut().zip(row) {
            *gj += r * xj;
        }
    }
    for (gj, b) in g[1..].iter_mut().zip(&coefficients[1..]) {
        *gj -= strength * b;
    }
    g
}

fn with_intercept(design: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = design.len();
    let p = design.first().map_or(0, |r| r.len());
    let mut m = DMatrix::zeros(n, p + 1);
    for (i, row) in design.iter().enumerate() {
        if row.len() != p {
            return Err(Error::Dimension {
                expected: p,
                actual: row.len(),
            });
        }
        m[(i, 0)] = 1.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite);
            }
            m[(i, j + 1)] = v;
        }
    }
    Ok(m)
}

/// Maximizes Σ[y·η − log(1 + e^η)] − (strength/2)·‖β₁..‖² by Newton/IRLS steps with
/// step halving. Stops when the largest coefficient update is below 1e-8 or after
/// 100 iterations.
pub fn fit_logistic(design: &[Vec<f64>], labels: &[u8], strength: f64) -> Result<LogisticFit> {
    if design.len() != labels.len() {
        return Err(Error::Dimension {
            expected: design.len(),
            actual: labels.len(),
        });
    }
    if !(strength >= 0.0 && strength.is_finite()) {
        return Err(Error::Config(format!(
            "strength {strength} must be nonnegative"
        )));
    }
    let positives = labels.iter().filter(|&&t| t == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::SingleClass);
    }
    let x = with_intercept(design)?;
    let y = DVector::from_iterator(labels.len(), labels.iter().map(|&t| t as f64));
    let p = x.ncols();
    let mut penalty = DMatrix::<f64>::identity(p, p) * strength;
    penalty[(0, 0)] = 0.0;

    let mut beta = DVector::<f64>::zeros(p);
    let mut eta = linear_predictor(&x, &beta);
    let mut objective = penalized_loglik(&eta, &y, &beta, strength);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let prob = eta.map(logistic);
        let w = prob.map(|q| q * (1.0 - q));
        let mut gradient = x.tr_mul(&(&y - &prob));
        for j in 1..p {
            gradient[j] -= strength * beta[j];
        }
        let xw = DMatrix::from_fn(x.nrows(), p, |i, j| x[(i, j)] * w[i]);
        let hessian = x.tr_mul(&xw) + &penalty;
        let step = match hessian.cholesky() {
            Some(ch) => ch.solve(&gradient),
            None if iterations > 1 => break,
            None => return Err(Error::Singular),
        };

        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let candidate = &beta + &step * scale;
            let eta_c = linear_predictor(&x, &candidate);
            let obj_c = penalized_loglik(&eta_c, &y, &candidate, strength);
            if obj_c >= objective - 1e-12 * objective.abs().max(1.0) {
                accepted = Some((candidate, eta_c, obj_c));
                break;
            }
            scale *= 0.5;
        }
        let Some((candidate, eta_c, obj_c)) = accepted else {
            converged = true;
            break;
        };
        let max_update = (&candidate - &beta).amax();
        beta = candidate;
        eta = eta_c;
        objective = obj_c;
        if max_update < TOLERANCE {
            converged = true;
            break;
        }
    }

    let separation = !converged && separates(&eta, labels);
    if !converged {
        log::warn!(
            "logistic fit did not converge after {iterations} iterations (separation: {separation})"
        );
    }
    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        iterations,
        converged,
        separation,
    })
}

/// True when the linear predictor orders every positive at or above every negative.
fn separates(eta: &DVector<f64>, labels: &[u8]) -> bool {
    let min_pos = eta
        .iter()
        .zip(labels)
        .filter(|(_, &t)| t == 1)
        .map(|(e, _)| *e)
        .fold(f64::INFINITY, f64::min);
    let max_neg = eta
        .iter()
        .zip(labels)
        .filter(|(_, &t)| t == 0)
        .map(|(e, _)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    min_pos >= max_neg
}

/// Area under the ROC curve in Mann–Whitney form; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&t| t == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Fitted logistic model together with the encoding it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityModel {
    pub target: Target,
    /// Intercept first, then one entry per `feature_columns` entry.
    pub coefficients: Vec<f64>,
    pub regularization_strength: f64,
    pub feature_columns: Vec<String>,
    /// Whether the protected indicator (1 = s−) is the last design column.
    pub includes_protected: bool,
    pub separation: bool,
    pub converged: bool,
    pub encoder: Encoder,
}

impl ProbabilityModel {
    pub fn design_row(&self, instance: &Instance) -> Result<Vec<f64>> {
        design_row(&self.encoder, self.includes_protected, instance)
    }

    pub fn linear_predictor(&self, instance: &Instance) -> Result<f64> {
        let row = self.design_row(instance)?;
        if row.len() + 1 != self.coefficients.len() {
            return Err(Error::SchemaMismatch(format!(
                "model has {} coefficients, instance encodes to {} columns",
                self.coefficients.len(),
                row.len()
            )));
        }
        Ok(self.coefficients[0]
            + row
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(a, b)| a * b)
                .sum::<f64>())
    }

    /// Coefficient of the protected indicator, if the model has one.
    pub fn protected_coefficient(&self) -> Option<f64> {
        self.includes_protected
            .then(|| *self.coefficients.last().expect("non-empty"))
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }
}

impl Predictor for ProbabilityModel {
    fn predict_proba(&self, instance: &Instance) -> Result<f64> {
        let p = logistic(self.linear_predictor(instance)?);
        let floor = if self.separation {
            SEPARATION_CLAMP
        } else {
            PROBABILITY_FLOOR
        };
        Ok(p.clamp(floor, 1.0 - floor))
    }

    fn includes_protected(&self) -> bool {
        self.includes_protected
    }
}

fn design_row(encoder: &Encoder, includes_protected: bool, inst: &Instance) -> Result<Vec<f64>> {
    let mut row = encoder.encode_row(&inst.x)?;
    if includes_protected {
        row.push(if inst.s == Group::Protected { 1.0 } else { 0.0 });
    }
    Ok(row)
}

/// Fits a model for `target` on `data` with a fixed strength, reusing `encoder`.
pub fn fit_model(
    data: &Dataset,
    encoder: &Encoder,
    target: Target,
    strength: f64,
) -> Result<ProbabilityModel> {
    let includes_protected = target == Target::Outcome;
    let design = data
        .instances
        .iter()
        .map(|i| design_row(encoder, includes_protected, i))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = data.instances.iter().map(|i| target.label(i)).collect();
    let fit = fit_logistic(&design, &labels, strength)?;
    let mut feature_columns = encoder.names.clone();
    if includes_protected {
        feature_columns.push(data.schema.protected_column.clone());
    }
    Ok(ProbabilityModel {
        target,
        coefficients: fit.coefficients,
        regularization_strength: strength,
        feature_columns,
        includes_protected,
        separation: fit.separation,
        converged: fit.converged,
        encoder: encoder.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelectionReport {
    pub target: Target,
    pub folds: usize,
    pub grid: Vec<f64>,
    /// Mean validation AUC per grid entry.
    pub cv_auc: Vec<f64>,
    pub chosen_strength: f64,
    /// Folds skipped because a part held a single class.
    pub skipped_folds: Vec<usize>,
    pub test_auc: Option<f64>,
}

/// Grid search over regularization strength by mean stratified k-fold AUC, then a
/// refit of the winner on all of `train`. Ties go to the smallest strength.
pub fn select_model(
    train: &Dataset,
    target: Target,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(ProbabilityModel, ModelSelectionReport)> {
    let encoder = Encoder::fit(train);
    select_model_with_encoder(train, &encoder, target, grid, folds, seed)
}

pub fn select_model_with_encoder(
    train: &Dataset,
    encoder: &Encoder,
    target: Target,
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(ProbabilityModel, ModelSelectionReport)> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty regularization grid".into()));
    }
    let includes_protected = target == Target::Outcome;
    let design = train
        .instances
        .iter()
        .map(|i| design_row(encoder, includes_protected, i))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = train.instances.iter().map(|i| target.label(i)).collect();

    // stratified assignment: shuffle each class, deal round-robin
    let mut fold_of = vec![0usize; labels.len()];
    let mut rng = rng_for(seed, &format!("cv-{target:?}"));
    for class in [0u8, 1] {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rows.shuffle(&mut rng);
        for (pos, r) in rows.into_iter().enumerate() {
            fold_of[r] = pos % folds;
        }
    }
    let has_both = |rows: &mut dyn Iterator<Item = usize>| {
        let (mut pos, mut neg) = (false, false);
        for r in rows {
            if labels[r] == 1 {
                pos = true
            } else {
                neg = true
            }
        }
        pos && neg
    };
    let mut usable = Vec::new();
    let mut skipped_folds = Vec::new();
    for k in 0..folds {
        let ok_val = has_both(&mut (0..labels.len()).filter(|&i| fold_of[i] == k));
        let ok_train = has_both(&mut (0..labels.len()).filter(|&i| fold_of[i] != k));
        if ok_val && ok_train {
            usable.push(k);
        } else {
            log::warn!("fold {k} of {folds} holds a single class and is skipped");
            skipped_folds.push(k);
        }
    }
    if usable.is_empty() {
        return Err(Error::AllFoldsDegenerate);
    }

    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| usable.iter().map(move |&k| (g, k)))
        .collect();
    let fold_aucs: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, k)| {
            let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
            for i in 0..labels.len() {
                if fold_of[i] == k {
                    vx.push(&design[i]);
                    vy.push(labels[i]);
                } else {
                    tx.push(design[i].clone());
                    ty.push(labels[i]);
                }
            }
            let fit = fit_logistic(&tx, &ty, grid[g])?;
            let scores: Vec<f64> = vx
                .iter()
                .map(|row| {
                    logistic(
                        fit.coefficients[0]
                            + row
                                .iter()
                                .zip(&fit.coefficients[1..])
                                .map(|(a, b)| a * b)
                                .sum::<f64>(),
                    )
                })
                .collect();
            auc(&scores, &vy)
        })
        .collect::<Result<_>>()?;
    let cv_auc: Vec<f64> = fold_aucs.chunks(usable.len()).map(mean).collect();

    let mut best = 0;
    for g in 1..grid.len() {
        let better =
            cv_auc[g] > cv_auc[best] || (cv_auc[g] == cv_auc[best] && grid[g] < grid[best]);
        if better {
            best = g;
        }
    }
    let chosen_strength = grid[best];
    let model = fit_model(train, encoder, target, chosen_strength)?;
    Ok((
        model,
        ModelSelectionReport {
            target,
            folds,
            grid: grid.to_vec(),
            cv_auc,
            chosen_strength,
            skipped_folds,
            test_auc: None,
        },
    ))
}

/// AUC of `model` on `data` for its own target.
pub fn evaluate_auc(model: &ProbabilityModel, data: &Dataset) -> Result<f64> {
    let scores = data
        .instances
        .iter()
        .map(|i| model.predict_proba(i))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = data
        .instances
        .iter()
        .map(|i| model.target.label(i))
        .collect();
    auc(&scores, &labels)
}
