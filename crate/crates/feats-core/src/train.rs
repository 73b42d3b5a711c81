//! Mini-batch training with early stopping and best-checkpoint restore,
//! plus the iterative head-count search and the tau grid search.

use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamSet};
use crate::model::{
    gather_standardized, FeatsModel, FfnnModel, ModelConfig, Standardizer, Task,
};
use crate::optim::{penalty_value, AdamConfig, Optimizer};
use crate::rng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stop patience, in epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.patience == 0
            || self.validation_fraction <= 0.0
            || self.validation_fraction >= 1.0
        {
            return Err(Error::Config(
                "train config fields must be positive (validation fraction in (0,1))".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training data loss plus the penalty term.
    pub train_loss: f64,
    /// Validation data loss.
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Anything the shared loop can train: owns parameters, builds a
/// link-space prediction node per batch.
pub(crate) trait TrainableModel {
    fn params_ref(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn task(&self) -> Task;
    fn penalty_coeffs(&self) -> (f64, f64);
    fn dims(&self) -> (usize, usize, usize);
    fn standardizer_ref(&self) -> Option<&Standardizer>;
    fn set_standardizer(&mut self, s: Standardizer);
    fn mark_fitted(&mut self);
    fn build_link_node(&self, g: &mut Graph, x_std: Tensor, z_std: Option<Tensor>) -> Result<NodeId>;
}

impl TrainableModel for FeatsModel {
    fn params_ref(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn task(&self) -> Task {
        self.task
    }
    fn penalty_coeffs(&self) -> (f64, f64) {
        (self.l1, self.l2)
    }
    fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.steps, self.p)
    }
    fn standardizer_ref(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }
    fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = Some(s);
    }
    fn mark_fitted(&mut self) {
        self.fitted = true;
    }
    fn build_link_node(&self, g: &mut Graph, x_std: Tensor, z_std: Option<Tensor>) -> Result<NodeId> {
        Ok(self.build_forward(g, x_std, z_std)?.link)
    }
}

impl TrainableModel for FfnnModel {
    fn params_ref(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn task(&self) -> Task {
        self.task
    }
    fn penalty_coeffs(&self) -> (f64, f64) {
        (0.0, 0.0)
    }
    fn dims(&self) -> (usize, usize, usize) {
        (self.m, self.steps, self.p)
    }
    fn standardizer_ref(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }
    fn set_standardizer(&mut self, s: Standardizer) {
        self.standardizer = Some(s);
    }
    fn mark_fitted(&mut self) {
        self.fitted = true;
    }
    fn build_link_node(&self, g: &mut Graph, x_std: Tensor, z_std: Option<Tensor>) -> Result<NodeId> {
        self.build_link(g, x_std, z_std)
    }
}

fn batch_targets(targets: &Targets, idx: &[usize]) -> Targets {
    targets.select(idx)
}

fn build_loss_node(
    g: &mut Graph,
    link: NodeId,
    task: Task,
    targets: &Targets,
    weights: Vec<f64>,
) -> Result<NodeId> {
    match (task, targets) {
        (Task::Continuous, Targets::Continuous(y)) => g.mse_loss(link, y.clone(), weights),
        (Task::Binary, Targets::Binary(y)) => g.bce_loss(link, y.clone(), weights),
        (Task::MultiClass(_), Targets::Classes { labels, .. }) => {
            g.ce_loss(link, labels.clone(), weights)
        }
        _ => Err(Error::Contract("task does not match target kind".into())),
    }
}

/// Weighted mean data loss over a set of rows, evaluated in chunks.
pub(crate) fn evaluate_data_loss<M: TrainableModel>(
    model: &M,
    ds: &PanelDataset,
    idx: &[usize],
) -> Result<f64> {
    let mut acc = 0.0;
    let mut wtotal = 0.0;
    for chunk in idx.chunks(1024) {
        let (x, z) = gather_standardized(ds, chunk, model.standardizer_ref());
        let mut g = Graph::new();
        let link = model.build_link_node(&mut g, x, z)?;
        let weights = ds.weights_rows(chunk);
        let wsum: f64 = weights.iter().sum();
        let targets = batch_targets(&ds.targets, chunk);
        let loss = build_loss_node(&mut g, link, model.task(), &targets, weights)?;
        acc += g.value(loss).item()? * wsum;
        wtotal += wsum;
    }
    Ok(acc / wtotal)
}

/// Train with mini-batches; returns per-epoch history and restores the
/// best-validation-loss parameters.
pub(crate) fn fit<M: TrainableModel>(
    model: &mut M,
    ds: &PanelDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    ds.validate()?;
    let (m, steps, p) = model.dims();
    if ds.m != m || ds.steps != steps || ds.p != p {
        return Err(Error::dimension(
            "training dataset",
            &[ds.m, ds.steps, ds.p],
            &[m, steps, p],
        ));
    }
    let n = ds.n();
    if n < 2 {
        return Err(Error::Data("training needs at least 2 samples".into()));
    }

    let split_rng = Prng::new(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    split_rng.derive(0).shuffle(&mut order);
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);

    model.set_standardizer(Standardizer::fit(ds, train_idx));

    let (l1, l2) = model.penalty_coeffs();
    let mut opt = Optimizer::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            l1,
            l2,
            ..AdamConfig::default()
        },
        model.params_ref(),
    );

    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_snapshot = model.params_ref().snapshot();
    let mut best_epoch = 0;
    let mut stale_epochs = 0;

    for epoch in 0..cfg.max_epochs {
        let mut perm = train_idx.to_vec();
        split_rng.derive(1 + epoch as u64).shuffle(&mut perm);

        let mut loss_acc = 0.0;
        let mut w_acc = 0.0;
        for chunk in perm.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            let (x, z) = gather_standardized(ds, chunk, model.standardizer_ref());
            let mut g = Graph::new();
            let link = model.build_link_node(&mut g, x, z)?;
            let weights = ds.weights_rows(chunk);
            let wsum: f64 = weights.iter().sum();
            let targets = batch_targets(&ds.targets, chunk);
            let loss = build_loss_node(&mut g, link, model.task(), &targets, weights)?;
            let loss_val = g.value(loss).item()?;
            if !loss_val.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}; last finite epoch {}",
                    epoch.saturating_sub(1)
                )));
            }
            g.backward(loss, model.params_mut())?;
            opt.step(model.params_mut())?;
            loss_acc += loss_val * wsum;
            w_acc += wsum;
        }
        let penalty = penalty_value(model.params_ref(), l1, l2);
        let train_loss = loss_acc / w_acc + penalty;
        let val_loss = evaluate_data_loss(model, ds, val_idx)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!(
                "validation loss diverged at epoch {epoch}; last finite epoch {}",
                epoch.saturating_sub(1)
            )));
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_snapshot = model.params_ref().snapshot();
            best_epoch = epoch;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    model.params_mut().restore(&best_snapshot);
    model.mark_fitted();
    history.best_epoch = best_epoch;
    history.best_val_loss = best_val;
    Ok(history)
}

impl FeatsModel {
    /// Fit this model on a dataset; standardization is refit on the
    /// training split and the best-validation parameters are kept.
    pub fn train(&mut self, ds: &PanelDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
        fit(self, ds, cfg)
    }
}

impl FfnnModel {
    pub fn train(&mut self, ds: &PanelDataset, cfg: &TrainConfig) -> Result<TrainHistory> {
        fit(self, ds, cfg)
    }
}

/// Convenience constructor-and-fit for the feed-forward baseline.
pub fn ffnn_baseline(
    ds: &PanelDataset,
    hidden: &[usize],
    task: Task,
    cfg: &TrainConfig,
) -> Result<(FfnnModel, TrainHistory)> {
    let mut model = FfnnModel::new(ds.m, ds.steps, ds.p, hidden, task, cfg.seed)?;
    let history = model.train(ds, cfg)?;
    Ok((model, history))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadSearchOptions {
    /// Starting head count; defaults to the series dimension m.
    pub initial: Option<usize>,
    /// Heads added per attempt.
    pub step: usize,
    /// Relative validation improvement below which the search stops.
    pub rel_threshold: f64,
    /// Hard cap on the head count.
    pub max_count: usize,
}

impl Default for HeadSearchOptions {
    fn default() -> Self {
        HeadSearchOptions {
            initial: None,
            step: 2,
            rel_threshold: 0.01,
            max_count: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadCountSearch {
    pub chosen: usize,
    /// (head count, best validation loss) per attempt.
    pub trace: Vec<(usize, f64)>,
}

/// Iteratively grow the head count until validation stops improving.
///
/// `template.heads[0]` supplies the per-head configuration; attempt i
/// trains with seed `cfg.seed + i`.
pub fn head_count_search(
    ds: &PanelDataset,
    template: &ModelConfig,
    cfg: &TrainConfig,
    options: &HeadSearchOptions,
) -> Result<HeadCountSearch> {
    let head_template = template
        .heads
        .first()
        .ok_or_else(|| Error::Config("head template required".into()))?
        .clone();
    let initial = options.initial.unwrap_or(ds.m).max(1);
    if options.step == 0 {
        return Err(Error::Config("head search step must be positive".into()));
    }

    let mut trace = Vec::new();
    let mut count = initial;
    let mut prev_metric = f64::INFINITY;
    let mut chosen = initial;
    let mut attempt = 0u64;
    loop {
        let mut config = template.clone();
        config.heads = (0..count).map(|_| head_template.clone()).collect();
        let mut member_cfg = *cfg;
        member_cfg.seed = cfg.seed + attempt;
        let mut model = FeatsModel::new(ds.m, ds.steps, ds.p, &config, member_cfg.seed)?;
        let history = model.train(ds, &member_cfg)?;
        let metric = history.best_val_loss;
        trace.push((count, metric));

        if prev_metric.is_finite() {
            let improvement = (prev_metric - metric) / prev_metric.abs().max(1e-12);
            if improvement < options.rel_threshold {
                break;
            }
        }
        chosen = count;
        prev_metric = metric;
        if count + options.step > options.max_count {
            break;
        }
        count += options.step;
        attempt += 1;
    }
    Ok(HeadCountSearch { chosen, trace })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TauSearch {
    pub best_tau: usize,
    /// (tau, best validation loss) per grid point.
    pub trace: Vec<(usize, f64)>,
}

/// Grid search over the window half-width; ties within `tie_rel` of the
/// best loss resolve toward the smaller tau.
pub fn tau_grid_search(
    ds: &PanelDataset,
    template: &ModelConfig,
    cfg: &TrainConfig,
    grid: &[usize],
    tie_rel: f64,
) -> Result<TauSearch> {
    if grid.is_empty() {
        return Err(Error::Config("tau grid must not be empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();

    let mut trace = Vec::new();
    for (i, &tau) in grid.iter().enumerate() {
        let mut config = template.clone();
        for head in &mut config.heads {
            head.tau = tau;
        }
        let mut member_cfg = *cfg;
        member_cfg.seed = cfg.seed + i as u64;
        let mut model = FeatsModel::new(ds.m, ds.steps, ds.p, &config, member_cfg.seed)?;
        let history = model.train(ds, &member_cfg)?;
        trace.push((tau, history.best_val_loss));
    }
    let best = trace
        .iter()
        .map(|&(_, v)| v)
        .fold(f64::INFINITY, f64::min);
    let best_tau = trace
        .iter()
        .find(|&&(_, v)| v <= best * (1.0 + tie_rel))
        .map(|&(t, _)| t)
        .unwrap();
    Ok(TauSearch { best_tau, trace })
}

/// Default tau search grid: 0 up to 20% of the series length.
pub fn default_tau_grid(steps: usize) -> Vec<usize> {
    let max_tau = ((steps.saturating_sub(1)) as f64 * 0.2).floor() as usize;
    (0..=max_tau).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Predictions;

    fn planted_dataset(n: usize, seed: u64, noise: f64) -> (PanelDataset, Vec<f64>) {
        // y = mean of series 0 over times 0..=4, plus optional noise
        let (m, steps) = (1, 8);
        let mut rng = Prng::new(seed);
        let mut x = Vec::with_capacity(n * m * steps);
        let mut y = Vec::with_capacity(n);
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            let row: Vec<f64> = (0..steps).map(|_| rng.next_normal()).collect();
            let feature: f64 = row[0..5].iter().sum::<f64>() / 5.0;
            truth.push(feature);
            y.push(feature + noise * rng.next_normal());
            x.extend(row);
        }
        (
            PanelDataset::new(m, steps, 0, x, vec![], Targets::Continuous(y)).unwrap(),
            truth,
        )
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..a.len() {
            cov += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma) * (a[i] - ma);
            vb += (b[i] - mb) * (b[i] - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn constant_target_converges_to_zero_mse() {
        let (mut ds, _) = planted_dataset(300, 1, 0.0);
        ds.targets = Targets::Continuous(vec![2.5; 300]);
        let mut model = FeatsModel::new(1, 8, 0, &ModelConfig::continuous(1, 0), 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 200,
            patience: 40,
            learning_rate: 0.03,
            seed: 2,
            ..TrainConfig::default()
        };
        let history = model.train(&ds, &cfg).unwrap();
        assert!(
            history.best_val_loss < 1e-3,
            "val loss {}",
            history.best_val_loss
        );
    }

    #[test]
    fn recovers_planted_linear_feature() {
        let (ds, truth) = planted_dataset(2500, 3, 0.05);
        let mut model = FeatsModel::new(1, 8, 0, &ModelConfig::continuous(1, 0), 4).unwrap();
        let cfg = TrainConfig {
            max_epochs: 150,
            patience: 15,
            learning_rate: 3e-3,
            seed: 4,
            ..TrainConfig::default()
        };
        model.train(&ds, &cfg).unwrap();
        let features = model.head_features(&ds).unwrap();
        let corr = correlation(features.data(), &truth).abs();
        assert!(corr > 0.99, "correlation {corr}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (ds, _) = planted_dataset(400, 5, 0.1);
        let cfg = TrainConfig {
            max_epochs: 12,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = FeatsModel::new(1, 8, 0, &ModelConfig::continuous(2, 1), 9).unwrap();
            model.train(&ds, &cfg).unwrap();
            model
                .params
                .entries()
                .iter()
                .flat_map(|e| e.value.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_aborts_with_training_error() {
        let (mut ds, _) = planted_dataset(200, 6, 0.0);
        // target scale chosen so the squared error overflows to infinity
        if let Targets::Continuous(y) = &mut ds.targets {
            for v in y.iter_mut() {
                *v = 1e200 + *v;
            }
        }
        let mut model = FeatsModel::new(1, 8, 0, &ModelConfig::continuous(1, 0), 7).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e3,
            max_epochs: 50,
            seed: 7,
            ..TrainConfig::default()
        };
        let err = model.train(&ds, &cfg).unwrap_err();
        assert!(matches!(err, Error::Training(_)), "{err}");
    }

    #[test]
    fn head_search_stops_on_pure_noise() {
        let mut rng = Prng::new(11);
        let n = 400;
        let x: Vec<f64> = (0..n * 6).map(|_| rng.next_normal()).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
        let ds = PanelDataset::new(2, 3, 0, x, vec![], Targets::Continuous(y)).unwrap();
        let cfg = TrainConfig {
            max_epochs: 20,
            seed: 11,
            ..TrainConfig::default()
        };
        let search = head_count_search(
            &ds,
            &ModelConfig::continuous(1, 0),
            &cfg,
            &HeadSearchOptions::default(),
        )
        .unwrap();
        assert_eq!(search.chosen, 2, "trace {:?}", search.trace);
    }

    #[test]
    fn head_search_degenerate_threshold_stops_immediately() {
        let (ds, _) = planted_dataset(300, 13, 0.1);
        let cfg = TrainConfig {
            max_epochs: 10,
            seed: 13,
            ..TrainConfig::default()
        };
        let search = head_count_search(
            &ds,
            &ModelConfig::continuous(1, 0),
            &cfg,
            &HeadSearchOptions {
                rel_threshold: 1.0,
                ..HeadSearchOptions::default()
            },
        )
        .unwrap();
        assert_eq!(search.chosen, 1);
        assert_eq!(search.trace.len(), 2);
    }

    #[test]
    fn tau_grid_singleton_and_empty() {
        let (ds, _) = planted_dataset(300, 15, 0.1);
        let cfg = TrainConfig {
            max_epochs: 8,
            seed: 15,
            ..TrainConfig::default()
        };
        let search =
            tau_grid_search(&ds, &ModelConfig::continuous(1, 0), &cfg, &[0], 0.01).unwrap();
        assert_eq!(search.best_tau, 0);
        let err = tau_grid_search(&ds, &ModelConfig::continuous(1, 0), &cfg, &[], 0.01);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn tau_grid_prefers_small_tau_on_pointwise_target() {
        // target depends on single time points only
        let (ds, _) = planted_dataset(1200, 17, 0.05);
        let cfg = TrainConfig {
            max_epochs: 40,
            patience: 8,
            seed: 17,
            ..TrainConfig::default()
        };
        let search =
            tau_grid_search(&ds, &ModelConfig::continuous(1, 0), &cfg, &[0, 2], 0.05).unwrap();
        assert_eq!(search.best_tau, 0, "trace {:?}", search.trace);
    }

    #[test]
    fn ffnn_fits_constant_target() {
        let (mut ds, _) = planted_dataset(300, 19, 0.0);
        ds.targets = Targets::Continuous(vec![1.0; 300]);
        let cfg = TrainConfig {
            max_epochs: 150,
            patience: 30,
            learning_rate: 0.03,
            seed: 19,
            ..TrainConfig::default()
        };
        let (model, history) = ffnn_baseline(&ds, &[16, 16], Task::Continuous, &cfg).unwrap();
        assert!(history.best_val_loss < 1e-3, "{}", history.best_val_loss);
        match model.predict(&ds).unwrap() {
            Predictions::Continuous(p) => assert!((p[0] - 1.0).abs() < 0.1),
            _ => panic!(),
        }
    }
}
