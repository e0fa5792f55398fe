//! Mini-batch Adam on squared error through the sigmoid link, with a
//! validation grid over (k, l2) and a final refit on all data.

use super::{sigmoid, ModelError, ModelKind, OutcomeModel, LOGIT_CLAMP};
use crate::log::{InteractionRecord, LogDataset, OutcomeKind, StoryId, UserId};
use crate::{par, seed};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One scored interaction used for fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: UserId,
    pub story: StoryId,
    pub y: f64,
    pub day: i32,
}

/// Non-NA records as examples. `include_skipped = false` also drops the
/// zero-valued Skipped rows.
pub fn scored_examples(data: &LogDataset, include_skipped: bool) -> Vec<Example> {
    data.records()
        .iter()
        .filter(|r| include_skipped || r.outcome != OutcomeKind::Skipped)
        .filter_map(|r| {
            r.value().map(|y| Example {
                user: r.user_id,
                story: r.story_id,
                y,
                day: r.day,
            })
        })
        .collect()
}

pub(crate) fn fingerprint(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update(e.user.0.to_le_bytes());
        h.update(e.story.0.to_le_bytes());
        h.update(e.y.to_bits().to_le_bytes());
        h.update(e.day.to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub l2_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Train on Skipped (0.0) rows as well as viewed/started/completed.
    pub include_skipped: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2_grid: vec![1e-5, 1e-4, 1e-3],
            k_grid: vec![4, 8, 16],
            seed: 0,
            early_stop_patience: 5,
            include_skipped: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if self.l2_grid.is_empty() || self.k_grid.is_empty() {
            return bad("hyperparameter grids must be non-empty");
        }
        if self.l2_grid.iter().any(|l| !(*l >= 0.0)) || self.k_grid.contains(&0) {
            return bad("l2 must be >= 0 and k >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Random,
    /// Records on or after `test_from_day` form the test set; the rest is
    /// split at random into train and validation.
    TemporalThenRandom {
        test_from_day: i32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub validation_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
    pub mode: SplitMode,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.8,
            validation_frac: 0.1,
            test_frac: 0.1,
            seed: 0,
            mode: SplitMode::Random,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let f = [self.train_frac, self.validation_frac, self.test_frac];
        if f.iter().any(|x| !(*x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(ModelError::Config(
                "split fractions must be positive and sum to 1".into(),
            ));
        }
        Ok(())
    }

    /// Partition examples into (train, validation, test).
    pub fn split(
        &self,
        examples: &[Example],
    ) -> Result<(Vec<Example>, Vec<Example>, Vec<Example>), ModelError> {
        self.validate()?;
        let mut rng = seed::rng(seed::derive(self.seed, &[seed::tag("split")]));
        let (pool, test): (Vec<Example>, Vec<Example>) = match self.mode {
            SplitMode::Random => (examples.to_vec(), Vec::new()),
            SplitMode::TemporalThenRandom { test_from_day } => {
                examples.iter().partition(|e| e.day < test_from_day)
            }
        };
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        let n = pool.len() as f64;
        let (n_train, n_val) = match self.mode {
            SplitMode::Random => {
                let t = (self.train_frac * n).round() as usize;
                let v = ((self.validation_frac * n).round() as usize)
                    .min(pool.len() - t.min(pool.len()));
                (t.min(pool.len()), v)
            }
            SplitMode::TemporalThenRandom { .. } => {
                let share = self.train_frac / (self.train_frac + self.validation_frac);
                let t = ((share * n).round() as usize).min(pool.len());
                (t, pool.len() - t)
            }
        };
        let pick = |r: std::ops::Range<usize>| r.map(|i| pool[idx[i]]).collect::<Vec<_>>();
        let train = pick(0..n_train);
        let val = pick(n_train..n_train + n_val);
        let test = match self.mode {
            SplitMode::Random => pick(n_train + n_val..pool.len()),
            SplitMode::TemporalThenRandom { .. } => test,
        };
        Ok((train, val, test))
    }
}

/// Gradient of one record's loss with respect to every parameter it touches.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordGradient {
    pub beta0: f64,
    pub user_bias: f64,
    pub story_bias: f64,
    pub user_factors: Vec<f64>,
    pub story_factors: Vec<f64>,
}

impl RecordGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = vec![self.beta0, self.user_bias, self.story_bias];
        v.extend_from_slice(&self.user_factors);
        v.extend_from_slice(&self.story_factors);
        v
    }
}

/// Per-record loss: `(y - sigmoid(logit))^2 + l2 * |touched parameters|^2`.
pub fn record_loss(model: &OutcomeModel, user: UserId, story: StoryId, y: f64) -> f64 {
    let (ui, si) = (
        model.user_idx(user).expect("known user"),
        model.story_idx(story).expect("known story"),
    );
    let p = sigmoid(model.logit_idx(ui, si));
    let mut sq = model.beta0 * model.beta0;
    if model.kind.has_effects() {
        sq += model.user_bias[ui].powi(2) + model.story_bias[si].powi(2);
    }
    if model.kind.has_factors() {
        let k = model.k;
        sq += model.user_factors[ui * k..(ui + 1) * k]
            .iter()
            .map(|x| x * x)
            .sum::<f64>();
        sq += model.story_factors[si * k..(si + 1) * k]
            .iter()
            .map(|x| x * x)
            .sum::<f64>();
    }
    (y - p).powi(2) + model.l2 * sq
}

fn gradient_idx(model: &OutcomeModel, ui: usize, si: usize, y: f64) -> RecordGradient {
    let p = sigmoid(model.logit_idx(ui, si));
    let d = -2.0 * (y - p) * p * (1.0 - p);
    let l2 = model.l2;
    let mut g = RecordGradient {
        beta0: d + 2.0 * l2 * model.beta0,
        user_bias: 0.0,
        story_bias: 0.0,
        user_factors: Vec::new(),
        story_factors: Vec::new(),
    };
    if model.kind.has_effects() {
        g.user_bias = d + 2.0 * l2 * model.user_bias[ui];
        g.story_bias = d + 2.0 * l2 * model.story_bias[si];
    }
    if model.kind.has_factors() {
        let k = model.k;
        let a = &model.user_factors[ui * k..(ui + 1) * k];
        let b = &model.story_factors[si * k..(si + 1) * k];
        g.user_factors = (0..k).map(|f| d * b[f] + 2.0 * l2 * a[f]).collect();
        g.story_factors = (0..k).map(|f| d * a[f] + 2.0 * l2 * b[f]).collect();
    }
    g
}

/// Analytic gradient of [`record_loss`] for a scored record. `None` for
/// NotShown rows or entities unknown to the model.
pub fn gradient(model: &OutcomeModel, record: &InteractionRecord) -> Option<RecordGradient> {
    let y = record.value()?;
    Some(gradient_idx(
        model,
        model.user_idx(record.user_id)?,
        model.story_idx(record.story_id)?,
        y,
    ))
}

struct Adam {
    b1: f64,
    b2: f64,
    eps: f64,
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize, cfg: &TrainConfig) -> Adam {
        Adam {
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            lr: cfg.learning_rate,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.b1.powi(self.t);
        let c2 = 1.0 - self.b2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g;
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g;
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Flat parameter layout: [b0 | user_bias | story_bias | user_factors | story_factors].
struct Layout {
    nu: usize,
    ns: usize,
    k: usize,
}

impl Layout {
    fn len(&self) -> usize {
        1 + self.nu + self.ns + (self.nu + self.ns) * self.k
    }
    fn ub(&self) -> usize {
        1
    }
    fn sb(&self) -> usize {
        1 + self.nu
    }
    fn uf(&self) -> usize {
        1 + self.nu + self.ns
    }
    fn sf(&self) -> usize {
        1 + self.nu + self.ns + self.nu * self.k
    }

    fn pack(&self, m: &OutcomeModel) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(m.beta0);
        v.extend_from_slice(&m.user_bias);
        v.extend_from_slice(&m.story_bias);
        v.extend_from_slice(&m.user_factors);
        v.extend_from_slice(&m.story_factors);
        v
    }

    fn unpack(&self, v: &[f64], m: &mut OutcomeModel) {
        m.beta0 = v[0];
        m.user_bias.copy_from_slice(&v[self.ub()..self.sb()]);
        m.story_bias.copy_from_slice(&v[self.sb()..self.uf()]);
        m.user_factors.copy_from_slice(&v[self.uf()..self.sf()]);
        m.story_factors.copy_from_slice(&v[self.sf()..]);
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: OutcomeModel,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub val_mse: Option<f64>,
    pub epochs_run: usize,
}

fn mse_idx(model: &OutcomeModel, data: &[(usize, usize, f64)]) -> f64 {
    data.iter()
        .map(|&(u, s, y)| {
            let p = sigmoid(model.logit_idx(u, s).clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            (y - p) * (y - p)
        })
        .sum::<f64>()
        / data.len() as f64
}

/// Fit one model. With `val` the parameters from the best validation epoch
/// are kept and training stops after `early_stop_patience` epochs without
/// improvement; without it exactly `epochs` epochs run.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    kind: ModelKind,
    k: usize,
    l2: f64,
    users: &[UserId],
    stories: &[StoryId],
    train: &[Example],
    val: Option<&[Example]>,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<FitResult, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let mut model = OutcomeModel::zeros(kind, k, users.to_vec(), stories.to_vec());
    model.l2 = l2;
    model.seed = cfg.seed;
    let k = model.k;
    if k > 0 {
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::tag("init"), k as u64]));
        let normal = Normal::new(0.0, 0.1 / (k as f64).sqrt()).expect("valid sd");
        for x in model
            .user_factors
            .iter_mut()
            .chain(model.story_factors.iter_mut())
        {
            *x = normal.sample(&mut rng);
        }
    }
    let index = |e: &Example| {
        (
            model.user_idx(e.user).expect("user in model"),
            model.story_idx(e.story).expect("story in model"),
            e.y,
        )
    };
    let tr: Vec<(usize, usize, f64)> = train.iter().map(index).collect();
    let va: Option<Vec<(usize, usize, f64)>> = val
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().map(index).collect());

    let layout = Layout {
        nu: model.users().len(),
        ns: model.stories().len(),
        k,
    };
    let mut params = layout.pack(&model);
    let mut grad = vec![0.0; layout.len()];
    let mut adam = Adam::new(layout.len(), cfg);
    let mut order: Vec<usize> = (0..tr.len()).collect();
    let mut rng = seed::rng(seed::derive(
        cfg.seed,
        &[seed::tag("batches"), k as u64, l2.to_bits()],
    ));

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut epochs_run = 0;
    for epoch in 1..=epochs {
        epochs_run = epoch;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            layout.unpack(&params, &mut model);
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &b in batch {
                let (ui, si, y) = tr[b];
                let g = gradient_idx(&model, ui, si, y);
                let p = sigmoid(model.logit_idx(ui, si));
                loss_sum += (y - p) * (y - p);
                grad[0] += g.beta0 * scale;
                if kind.has_effects() {
                    grad[layout.ub() + ui] += g.user_bias * scale;
                    grad[layout.sb() + si] += g.story_bias * scale;
                }
                for f in 0..k {
                    grad[layout.uf() + ui * k + f] += g.user_factors[f] * scale;
                    grad[layout.sf() + si * k + f] += g.story_factors[f] * scale;
                }
            }
            adam.step(&mut params, &grad);
        }
        if !loss_sum.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        if let Some(va) = &va {
            layout.unpack(&params, &mut model);
            let mse = mse_idx(&model, va);
            let improved = best.as_ref().is_none_or(|(b, _, _)| mse < *b);
            if improved {
                best = Some((mse, epoch, params.clone()));
            } else if epoch - best.as_ref().unwrap().1 >= cfg.early_stop_patience {
                break;
            }
        }
    }
    match best {
        Some((mse, epoch, p)) => {
            layout.unpack(&p, &mut model);
            Ok(FitResult {
                model,
                best_epoch: epoch,
                val_mse: Some(mse),
                epochs_run,
            })
        }
        None => {
            layout.unpack(&params, &mut model);
            Ok(FitResult {
                model,
                best_epoch: epochs_run,
                val_mse: None,
                epochs_run,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub k: usize,
    pub l2: f64,
    pub val_mse: f64,
    pub test_mse: Option<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TuningReport {
    pub kind: ModelKind,
    pub rows: Vec<TuningRow>,
    pub selected: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// The selected candidate as fitted on the training split only.
    pub holdout_model: OutcomeModel,
}

impl TuningReport {
    pub fn best(&self) -> &TuningRow {
        &self.rows[self.selected]
    }
}

fn entities(examples: &[Example]) -> (Vec<UserId>, Vec<StoryId>) {
    let mut u: Vec<UserId> = examples.iter().map(|e| e.user).collect();
    let mut s: Vec<StoryId> = examples.iter().map(|e| e.story).collect();
    u.sort();
    u.dedup();
    s.sort();
    s.dedup();
    (u, s)
}

/// Tune (k, l2) on the validation split, then refit the winner on every
/// scored record for the number of epochs that won validation.
pub fn train(
    kind: ModelKind,
    data: &LogDataset,
    cfg: &TrainConfig,
    split: &SplitSpec,
) -> Result<(OutcomeModel, TuningReport), ModelError> {
    cfg.validate()?;
    let examples = scored_examples(data, cfg.include_skipped);
    if examples.is_empty() {
        return Err(ModelError::NoScorableRecords);
    }
    let (tr, va, te) = split.split(&examples)?;
    if tr.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let (users, stories) = entities(&examples);
    let ks: Vec<usize> = if kind.has_factors() {
        cfg.k_grid.clone()
    } else {
        vec![0]
    };
    let grid: Vec<(usize, f64)> = ks
        .iter()
        .flat_map(|&k| cfg.l2_grid.iter().map(move |&l| (k, l)))
        .collect();

    let fits = par::map(&grid, |&(k, l2)| {
        fit(
            kind,
            k,
            l2,
            &users,
            &stories,
            &tr,
            Some(&va),
            cfg,
            cfg.epochs,
        )
    });
    let mut rows = Vec::with_capacity(grid.len());
    let mut models = Vec::with_capacity(grid.len());
    for ((k, l2), f) in grid.iter().zip(fits) {
        let f = f?;
        let val_mse = f.val_mse.unwrap_or_else(|| mse_examples(&f.model, &tr));
        let test_mse = if te.is_empty() {
            None
        } else {
            Some(mse_examples(&f.model, &te))
        };
        rows.push(TuningRow {
            k: *k,
            l2: *l2,
            val_mse,
            test_mse,
            best_epoch: f.best_epoch,
        });
        models.push(f.model);
    }
    let selected = rows
        .iter()
        .enumerate()
        .min_by(|a, b| {
            a.1.val_mse
                .partial_cmp(&b.1.val_mse)
                .unwrap()
                .then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .unwrap();
    let win = rows[selected].clone();
    let mut final_fit = fit(
        kind,
        win.k,
        win.l2,
        &users,
        &stories,
        &examples,
        None,
        cfg,
        win.best_epoch,
    )?
    .model;
    final_fit.fingerprint = fingerprint(&examples);
    let mut holdout_model = models.swap_remove(selected);
    holdout_model.fingerprint = fingerprint(&tr);
    let report = TuningReport {
        kind,
        rows,
        selected,
        n_train: tr.len(),
        n_val: va.len(),
        n_test: te.len(),
        holdout_model,
    };
    Ok((final_fit, report))
}

pub(crate) fn mse_examples(model: &OutcomeModel, examples: &[Example]) -> f64 {
    examples
        .iter()
        .map(|e| (e.y - model.predict_value(e.user, e.story)).powi(2))
        .sum::<f64>()
        / examples.len() as f64
}
