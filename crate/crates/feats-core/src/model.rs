//! The trainable FEATS machine: attention heads, optional GAM-nets, a
//! simple downstream model, penalties, and model-file serialization.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamSet};
use crate::layers::{
    feature_attention, AttentionSubnet, FeatureHead, GamNet, HeadForward, ScalingCoefficients,
};
use crate::optim::penalty_value;
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Continuous,
    Binary,
    MultiClass(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamKind {
    Linear,
    Logistic,
    Softmax,
    FeatureAttention,
}

fn default_hidden() -> Vec<usize> {
    vec![10, 10]
}

/// One head's structural choices: window half-width, subnet sizing, and
/// which series/time region it attends to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub tau: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Series indices the head attends to; all series when absent.
    #[serde(default)]
    pub series_subset: Option<Vec<usize>>,
    /// Inclusive time range the head attends to; all times when absent.
    #[serde(default)]
    pub time_window: Option<(usize, usize)>,
}

impl HeadConfig {
    pub fn plain(tau: usize) -> Self {
        HeadConfig {
            tau,
            hidden: default_hidden(),
            series_subset: None,
            time_window: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: Vec<HeadConfig>,
    pub downstream: DownstreamKind,
    pub task: Task,
    #[serde(default = "default_hidden")]
    pub gamnet_hidden: Vec<usize>,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
}

impl ModelConfig {
    pub fn continuous(n_heads: usize, tau: usize) -> Self {
        ModelConfig {
            heads: (0..n_heads).map(|_| HeadConfig::plain(tau)).collect(),
            downstream: DownstreamKind::Linear,
            task: Task::Continuous,
            gamnet_hidden: default_hidden(),
            l1: 0.0,
            l2: 0.0,
        }
    }

    pub fn binary(n_heads: usize, tau: usize) -> Self {
        ModelConfig {
            downstream: DownstreamKind::Logistic,
            task: Task::Binary,
            ..ModelConfig::continuous(n_heads, tau)
        }
    }

    pub fn multiclass(n_heads: usize, tau: usize, classes: usize) -> Self {
        ModelConfig {
            downstream: DownstreamKind::Softmax,
            task: Task::MultiClass(classes),
            ..ModelConfig::continuous(n_heads, tau)
        }
    }
}

/// Per-variable standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub z_mean: Vec<f64>,
    pub z_sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &PanelDataset, idx: &[usize]) -> Standardizer {
        let (m, steps, p) = (ds.m, ds.steps, ds.p);
        let mut x_mean = vec![0.0; m];
        let mut x_sd = vec![0.0; m];
        let count = (idx.len() * steps) as f64;
        for &i in idx {
            let row = ds.sample(i);
            for j in 0..m {
                for t in 0..steps {
                    x_mean[j] += row[j * steps + t];
                }
            }
        }
        for v in x_mean.iter_mut() {
            *v /= count;
        }
        for &i in idx {
            let row = ds.sample(i);
            for j in 0..m {
                for t in 0..steps {
                    let d = row[j * steps + t] - x_mean[j];
                    x_sd[j] += d * d;
                }
            }
        }
        for v in x_sd.iter_mut() {
            *v = (*v / count).sqrt();
            if *v < 1e-12 {
                *v = 1.0;
            }
        }
        let mut z_mean = vec![0.0; p];
        let mut z_sd = vec![0.0; p];
        if p > 0 {
            for &i in idx {
                for c in 0..p {
                    z_mean[c] += ds.z[i * p + c];
                }
            }
            for v in z_mean.iter_mut() {
                *v /= idx.len() as f64;
            }
            for &i in idx {
                for c in 0..p {
                    let d = ds.z[i * p + c] - z_mean[c];
                    z_sd[c] += d * d;
                }
            }
            for v in z_sd.iter_mut() {
                *v = (*v / idx.len() as f64).sqrt();
                if *v < 1e-12 {
                    *v = 1.0;
                }
            }
        }
        Standardizer {
            x_mean,
            x_sd,
            z_mean,
            z_sd,
        }
    }

    pub fn apply_x(&self, batch: &mut Tensor, m: usize, steps: usize) {
        let data = batch.data_mut();
        let row = m * steps;
        let rows = data.len() / row;
        for i in 0..rows {
            for j in 0..m {
                for t in 0..steps {
                    let idx = i * row + j * steps + t;
                    data[idx] = (data[idx] - self.x_mean[j]) / self.x_sd[j];
                }
            }
        }
    }

    pub fn apply_z(&self, batch: &mut Tensor) {
        let p = self.z_mean.len();
        let data = batch.data_mut();
        let rows = data.len() / p;
        for i in 0..rows {
            for c in 0..p {
                data[i * p + c] = (data[i * p + c] - self.z_mean[c]) / self.z_sd[c];
            }
        }
    }
}

/// Gather rows and standardize them with the model's fitted scaler.
pub(crate) fn gather_standardized(
    ds: &PanelDataset,
    idx: &[usize],
    std: Option<&Standardizer>,
) -> (Tensor, Option<Tensor>) {
    let mut x = ds.x_rows(idx);
    let mut z = ds.z_rows(idx);
    if let Some(s) = std {
        s.apply_x(&mut x, ds.m, ds.steps);
        if let Some(zt) = z.as_mut() {
            s.apply_z(zt);
        }
    }
    (x, z)
}

#[derive(Clone, Debug)]
pub struct BuiltHead {
    pub config: HeadConfig,
    pub head: FeatureHead,
    /// Column gather from the full panel when the head attends a subset.
    pub cols: Option<Vec<usize>>,
    /// Attended series indices, for embedding weights back into the full
    /// panel grid.
    pub series: Vec<usize>,
    pub time_offset: usize,
}

#[derive(Clone, Debug)]
enum Downstream {
    Linear {
        w: crate::graph::ParamId,
        b: crate::graph::ParamId,
    },
    Logistic {
        w: crate::graph::ParamId,
        b: crate::graph::ParamId,
    },
    Softmax {
        w: crate::graph::ParamId,
        b: crate::graph::ParamId,
    },
    FeatureAttention {
        subnet: AttentionSubnet,
        s: ScalingCoefficients,
    },
}

/// Node handles from a full model forward pass.
pub struct ForwardNodes {
    /// Link-space prediction: B x 1, or B x K logits for softmax.
    pub link: NodeId,
    /// B x H head features.
    pub features: NodeId,
    /// Feature-attention gates when that downstream is used.
    pub gates: Option<NodeId>,
    pub head_forwards: Vec<HeadForward>,
    pub gamnet_outputs: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Continuous(Vec<f64>),
    /// Probabilities of class 1.
    Binary(Vec<f64>),
    /// Row-major n x k class probabilities.
    Classes { probs: Vec<f64>, k: usize },
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Continuous(v) | Predictions::Binary(v) => v.len(),
            Predictions::Classes { probs, k } => probs.len() / k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
pub struct FeatsModel {
    pub(crate) params: ParamSet,
    pub m: usize,
    pub steps: usize,
    pub p: usize,
    pub task: Task,
    pub downstream_kind: DownstreamKind,
    pub seed: u64,
    pub l1: f64,
    pub l2: f64,
    pub gamnet_hidden: Vec<usize>,
    pub(crate) heads: Vec<BuiltHead>,
    pub(crate) gamnets: Vec<GamNet>,
    downstream: Downstream,
    pub standardizer: Option<Standardizer>,
    pub fitted: bool,
}

impl FeatsModel {
    pub fn new(m: usize, steps: usize, p: usize, config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.heads.is_empty() {
            return Err(Error::Config("a model needs at least one head".into()));
        }
        match (config.task, config.downstream) {
            (Task::Continuous, DownstreamKind::Linear)
            | (Task::Binary, DownstreamKind::Logistic)
            | (Task::MultiClass(_), DownstreamKind::Softmax)
            | (Task::Continuous, DownstreamKind::FeatureAttention)
            | (Task::Binary, DownstreamKind::FeatureAttention) => {}
            (task, ds) => {
                return Err(Error::Config(format!(
                    "downstream {ds:?} is incompatible with task {task:?}"
                )))
            }
        }
        if let Task::MultiClass(k) = config.task {
            if k < 2 {
                return Err(Error::Config("multiclass task needs at least 2 classes".into()));
            }
        }

        let mut params = ParamSet::new();
        let mut rng = Prng::new(seed);
        let mut heads = Vec::with_capacity(config.heads.len());
        for (i, hc) in config.heads.iter().enumerate() {
            let series: Vec<usize> = match &hc.series_subset {
                Some(sub) => {
                    if sub.is_empty() {
                        return Err(Error::Config(format!("head {i}: empty series subset")));
                    }
                    let mut seen = vec![false; m];
                    for &j in sub {
                        if j >= m {
                            return Err(Error::Config(format!(
                                "head {i}: series index {j} out of range [0, {m})"
                            )));
                        }
                        if seen[j] {
                            return Err(Error::Config(format!("head {i}: duplicate series index {j}")));
                        }
                        seen[j] = true;
                    }
                    sub.clone()
                }
                None => (0..m).collect(),
            };
            let (t0, t1) = match hc.time_window {
                Some((a, b)) => {
                    if a > b || b >= steps {
                        return Err(Error::Config(format!(
                            "head {i}: time window ({a}, {b}) out of range [0, {steps})"
                        )));
                    }
                    (a, b)
                }
                None => (0, steps - 1),
            };
            let steps_eff = t1 - t0 + 1;
            let cols: Option<Vec<usize>> = if series.len() == m && steps_eff == steps {
                None
            } else {
                let mut cols = Vec::with_capacity(series.len() * steps_eff);
                for &j in &series {
                    for t in t0..=t1 {
                        cols.push(j * steps + t);
                    }
                }
                Some(cols)
            };
            let head = FeatureHead::new(
                &mut params,
                &format!("head{i}"),
                series.len(),
                steps_eff,
                hc.tau,
                &hc.hidden,
                &mut rng,
            )?;
            heads.push(BuiltHead {
                config: hc.clone(),
                head,
                cols,
                series,
                time_offset: t0,
            });
        }

        let mut gamnets = Vec::new();
        for j in 0..p {
            gamnets.push(GamNet::new(
                &mut params,
                &format!("gam{j}"),
                &config.gamnet_hidden,
                &mut rng,
            )?);
        }

        let d = heads.len() + p;
        let downstream = match config.downstream {
            DownstreamKind::Linear | DownstreamKind::Logistic => {
                let bound = (6.0 / (d + 1) as f64).sqrt();
                let w_data: Vec<f64> = (0..d).map(|_| rng.next_uniform(bound)).collect();
                let w = params.add("downstream.w", Tensor::matrix(d, 1, w_data)?, false);
                let b = params.add("downstream.b", Tensor::from_vec(vec![0.0]), false);
                if config.downstream == DownstreamKind::Linear {
                    Downstream::Linear { w, b }
                } else {
                    Downstream::Logistic { w, b }
                }
            }
            DownstreamKind::Softmax => {
                let Task::MultiClass(k) = config.task else {
                    unreachable!("validated above")
                };
                let bound = (6.0 / (d + k) as f64).sqrt();
                let w_data: Vec<f64> = (0..d * k).map(|_| rng.next_uniform(bound)).collect();
                let w = params.add("downstream.w", Tensor::matrix(d, k, w_data)?, false);
                let b = params.add("downstream.b", Tensor::from_vec(vec![0.0; k]), false);
                Downstream::Softmax { w, b }
            }
            DownstreamKind::FeatureAttention => {
                let mut widths = vec![d];
                widths.extend_from_slice(&config.gamnet_hidden);
                widths.push(d);
                let subnet = AttentionSubnet::new(&mut params, "downstream.fa", &widths, &mut rng)?;
                let s = ScalingCoefficients::new(&mut params, "downstream.s", d);
                Downstream::FeatureAttention { subnet, s }
            }
        };

        Ok(FeatsModel {
            params,
            m,
            steps,
            p,
            task: config.task,
            downstream_kind: config.downstream,
            seed,
            l1: config.l1,
            l2: config.l2,
            gamnet_hidden: config.gamnet_hidden.clone(),
            heads,
            gamnets,
            downstream,
            standardizer: None,
            fitted: false,
        })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[BuiltHead] {
        &self.heads
    }

    pub fn gamnets(&self) -> &[GamNet] {
        &self.gamnets
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn head_configs(&self) -> Vec<HeadConfig> {
        self.heads.iter().map(|h| h.config.clone()).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            heads: self.head_configs(),
            downstream: self.downstream_kind,
            task: self.task,
            gamnet_hidden: self.gamnet_hidden.clone(),
            l1: self.l1,
            l2: self.l2,
        }
    }

    /// Evaluate the fitted ridge of static covariate `j` over raw values.
    pub fn gamnet_grid(&self, j: usize, grid: &[f64]) -> Result<Vec<f64>> {
        let gam = self
            .gamnets
            .get(j)
            .ok_or_else(|| Error::Argument(format!("no GAM-net for covariate {j}")))?;
        let std_grid: Vec<f64> = match &self.standardizer {
            Some(s) => grid.iter().map(|v| (v - s.z_mean[j]) / s.z_sd[j]).collect(),
            None => grid.to_vec(),
        };
        gam.evaluate_grid(&self.params, &std_grid)
    }

    /// Build the full forward graph on an already-standardized batch.
    pub(crate) fn build_forward(
        &self,
        g: &mut Graph,
        x_std: Tensor,
        z_std: Option<Tensor>,
    ) -> Result<ForwardNodes> {
        if x_std.cols() != self.m * self.steps {
            return Err(Error::dimension(
                "model input",
                x_std.shape(),
                &[self.m * self.steps],
            ));
        }
        let x_node = g.input(x_std);
        let z_node = match (self.p, z_std) {
            (0, _) => None,
            (p, Some(z)) => {
                if z.cols() != p {
                    return Err(Error::dimension("static input", z.shape(), &[p]));
                }
                Some(g.input(z))
            }
            (p, None) => {
                return Err(Error::dimension("static input", &[0], &[p]));
            }
        };

        let mut head_forwards = Vec::with_capacity(self.heads.len());
        let mut feature_nodes = Vec::with_capacity(self.heads.len());
        for built in &self.heads {
            let input = match &built.cols {
                Some(cols) => g.gather_cols(x_node, cols.clone())?,
                None => x_node,
            };
            let fwd = built.head.forward(g, &self.params, input)?;
            feature_nodes.push(fwd.feature);
            head_forwards.push(fwd);
        }
        let features = g.concat_cols(&feature_nodes)?;

        let mut gamnet_outputs = Vec::new();
        let mut o_parts = Vec::new();
        if let Some(zn) = z_node {
            for (j, gam) in self.gamnets.iter().enumerate() {
                let col = g.gather_cols(zn, vec![j])?;
                let out = gam.forward(g, &self.params, col)?;
                gamnet_outputs.push(out);
                o_parts.push(out);
            }
        }
        o_parts.push(features);
        let o = if o_parts.len() == 1 {
            features
        } else {
            g.concat_cols(&o_parts)?
        };

        let (link, gates) = match &self.downstream {
            Downstream::Linear { w, b }
            | Downstream::Logistic { w, b }
            | Downstream::Softmax { w, b } => {
                let wn = g.param(&self.params, *w);
                let bn = g.param(&self.params, *b);
                let lin = g.matmul(o, wn)?;
                (g.add_row(lin, bn)?, None)
            }
            Downstream::FeatureAttention { subnet, s } => {
                let (pred, gates) = feature_attention(g, &self.params, o, subnet, s)?;
                (pred, Some(gates))
            }
        };

        Ok(ForwardNodes {
            link,
            features,
            gates,
            head_forwards,
            gamnet_outputs,
        })
    }

    /// Forward one raw batch: standardizes with the fitted scaler when
    /// present and returns predictions, head features, and gates.
    pub fn forward_batch(&self, x_raw: &Tensor, z_raw: Option<&Tensor>) -> Result<ModelOutput> {
        let mut x = x_raw.clone();
        let mut z = z_raw.cloned();
        if let Some(s) = &self.standardizer {
            s.apply_x(&mut x, self.m, self.steps);
            if let Some(zt) = z.as_mut() {
                s.apply_z(zt);
            }
        }
        let mut g = Graph::new();
        let fwd = self.build_forward(&mut g, x, z)?;
        let link = g.value(fwd.link).clone();
        let predictions = link_to_predictions(&link, self.task)?;
        Ok(ModelOutput {
            predictions,
            features: g.value(fwd.features).clone(),
            gates: fwd.gates.map(|n| g.value(n).clone()),
        })
    }

    /// Predict a whole dataset in fixed-size chunks.
    pub fn predict(&self, ds: &PanelDataset) -> Result<Predictions> {
        if ds.m != self.m || ds.steps != self.steps || ds.p != self.p {
            return Err(Error::dimension(
                "predict dataset",
                &[ds.m, ds.steps, ds.p],
                &[self.m, self.steps, self.p],
            ));
        }
        let idx: Vec<usize> = (0..ds.n()).collect();
        let mut merged: Option<Predictions> = None;
        for chunk in idx.chunks(1024) {
            let (x, z) = gather_standardized(ds, chunk, self.standardizer.as_ref());
            let mut g = Graph::new();
            let fwd = self.build_forward(&mut g, x, z)?;
            let part = link_to_predictions(g.value(fwd.link), self.task)?;
            merged = Some(match merged.take() {
                None => part,
                Some(acc) => concat_predictions(acc, part),
            });
        }
        Ok(merged.unwrap_or(Predictions::Continuous(Vec::new())))
    }

    /// Head feature values for a whole dataset, n x H row-major.
    pub fn head_features(&self, ds: &PanelDataset) -> Result<Tensor> {
        let idx: Vec<usize> = (0..ds.n()).collect();
        let h = self.n_heads();
        let mut data = Vec::with_capacity(ds.n() * h);
        for chunk in idx.chunks(1024) {
            let (x, z) = gather_standardized(ds, chunk, self.standardizer.as_ref());
            let mut g = Graph::new();
            let fwd = self.build_forward(&mut g, x, z)?;
            data.extend_from_slice(g.value(fwd.features).data());
        }
        Tensor::matrix(ds.n(), h, data)
    }

    /// Data loss implied by the task (probabilities clamped before logs)
    /// plus the L1/L2 penalty on scaling coefficients.
    pub fn loss_value(&self, preds: &Predictions, targets: &Targets, weights: &[f64]) -> Result<f64> {
        let data = data_loss(preds, targets, weights)?;
        Ok(data + penalty_value(&self.params, self.l1, self.l2))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            created_with_seed: self.seed,
            m: self.m,
            steps: self.steps,
            p: self.p,
            task: self.task,
            downstream: self.downstream_kind,
            heads: self.head_configs(),
            gamnet_hidden: self.gamnet_hidden.clone(),
            penalties: PenaltyFile {
                l1: self.l1,
                l2: self.l2,
            },
            standardizer: self.standardizer.clone(),
            fitted: self.fitted,
            parameters: self
                .params
                .entries()
                .iter()
                .map(|e| ParamFile {
                    name: e.name.clone(),
                    shape: e.value.shape().to_vec(),
                    data: e.value.data().to_vec(),
                    scaling: e.is_scaling,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<FeatsModel> {
        let probe: VersionProbe = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("unreadable model file: {e}")))?;
        if probe.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: probe.format_version,
                supported: MODEL_FORMAT_VERSION,
            });
        }
        let file: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("malformed model file: {e}")))?;
        let config = ModelConfig {
            heads: file.heads.clone(),
            downstream: file.downstream,
            task: file.task,
            gamnet_hidden: file.gamnet_hidden.clone(),
            l1: file.penalties.l1,
            l2: file.penalties.l2,
        };
        let mut model = FeatsModel::new(file.m, file.steps, file.p, &config, file.created_with_seed)?;
        let by_name: HashMap<String, crate::graph::ParamId> = model
            .params
            .ids()
            .map(|id| (model.params.name(id).to_string(), id))
            .collect();
        if file.parameters.len() != model.params.len() {
            return Err(Error::Data(format!(
                "model file has {} parameters, structure expects {}",
                file.parameters.len(),
                model.params.len()
            )));
        }
        for pf in &file.parameters {
            let id = *by_name
                .get(&pf.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter '{}' in model file", pf.name)))?;
            let tensor = Tensor::new(pf.shape.clone(), pf.data.clone())
                .map_err(|_| Error::Data(format!("parameter '{}' has inconsistent shape", pf.name)))?;
            if tensor.shape() != model.params.value(id).shape() {
                return Err(Error::Data(format!(
                    "parameter '{}' shape {:?} does not match structure {:?}",
                    pf.name,
                    tensor.shape(),
                    model.params.value(id).shape()
                )));
            }
            if !tensor.all_finite() {
                return Err(Error::Data(format!(
                    "parameter '{}' has non-finite values",
                    pf.name
                )));
            }
            *model.params.value_mut(id) = tensor;
        }
        model.standardizer = file.standardizer;
        model.fitted = file.fitted;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_atomic(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<FeatsModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        FeatsModel::from_json(&text)
    }
}

pub struct ModelOutput {
    pub predictions: Predictions,
    /// B x H head features.
    pub features: Tensor,
    pub gates: Option<Tensor>,
}

/// Map link-space outputs to task-space predictions.
pub(crate) fn link_to_predictions(link: &Tensor, task: Task) -> Result<Predictions> {
    match task {
        Task::Continuous => Ok(Predictions::Continuous(link.data().to_vec())),
        Task::Binary => Ok(Predictions::Binary(
            link.data().iter().map(|&z| crate::tensor::sigmoid_scalar(z)).collect(),
        )),
        Task::MultiClass(k) => {
            if link.cols() != k {
                return Err(Error::dimension("class logits", link.shape(), &[k]));
            }
            let rows = link.rows();
            let mut probs = vec![0.0; rows * k];
            for i in 0..rows {
                crate::tensor::softmax_slice(
                    &link.data()[i * k..(i + 1) * k],
                    &mut probs[i * k..(i + 1) * k],
                );
            }
            Ok(Predictions::Classes { probs, k })
        }
    }
}

fn concat_predictions(a: Predictions, b: Predictions) -> Predictions {
    match (a, b) {
        (Predictions::Continuous(mut x), Predictions::Continuous(y)) => {
            x.extend(y);
            Predictions::Continuous(x)
        }
        (Predictions::Binary(mut x), Predictions::Binary(y)) => {
            x.extend(y);
            Predictions::Binary(x)
        }
        (Predictions::Classes { probs: mut x, k }, Predictions::Classes { probs: y, .. }) => {
            x.extend(y);
            Predictions::Classes { probs: x, k }
        }
        _ => unreachable!("chunks of one dataset share a task"),
    }
}

const PROB_CLAMP: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Weighted data loss: MSE, binary cross-entropy, or categorical
/// cross-entropy depending on the task.
pub fn data_loss(preds: &Predictions, targets: &Targets, weights: &[f64]) -> Result<f64> {
    let n = targets.len();
    if preds.len() != n || weights.len() != n {
        return Err(Error::dimension("loss lengths", &[preds.len()], &[n]));
    }
    let wsum: f64 = weights.iter().sum();
    match (preds, targets) {
        (Predictions::Continuous(p), Targets::Continuous(y)) => {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite target".into()));
            }
            let acc: f64 = (0..n).map(|i| weights[i] * (p[i] - y[i]).powi(2)).sum();
            Ok(acc / wsum)
        }
        (Predictions::Binary(p), Targets::Binary(y)) => {
            let acc: f64 = (0..n)
                .map(|i| {
                    let q = clamp_prob(p[i]);
                    -weights[i] * (y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln())
                })
                .sum();
            Ok(acc / wsum)
        }
        (Predictions::Classes { probs, k }, Targets::Classes { labels, .. }) => {
            let acc: f64 = (0..n)
                .map(|i| -weights[i] * clamp_prob(probs[i * k + labels[i]]).ln())
                .sum();
            Ok(acc / wsum)
        }
        _ => Err(Error::Contract("prediction kind does not match target kind".into())),
    }
}

/// Plain feed-forward baseline on the flattened panel plus statics.
#[derive(Debug)]
pub struct FfnnModel {
    pub(crate) params: ParamSet,
    pub widths: Vec<usize>,
    pub task: Task,
    pub m: usize,
    pub steps: usize,
    pub p: usize,
    pub seed: u64,
    layers: AttentionSubnet,
    pub standardizer: Option<Standardizer>,
    pub fitted: bool,
}

impl FfnnModel {
    pub fn new(m: usize, steps: usize, p: usize, hidden: &[usize], task: Task, seed: u64) -> Result<Self> {
        let input = m * steps + p;
        let output = match task {
            Task::MultiClass(k) => k,
            _ => 1,
        };
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let mut params = ParamSet::new();
        let mut rng = Prng::new(seed);
        let layers = AttentionSubnet::new(&mut params, "ffnn", &widths, &mut rng)?;
        Ok(FfnnModel {
            params,
            widths,
            task,
            m,
            steps,
            p,
            seed,
            layers,
            standardizer: None,
            fitted: false,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub(crate) fn build_link(&self, g: &mut Graph, x_std: Tensor, z_std: Option<Tensor>) -> Result<NodeId> {
        let rows = x_std.rows();
        let input = match z_std {
            None => g.input(x_std),
            Some(z) => {
                let mut data = Vec::with_capacity(rows * (x_std.cols() + z.cols()));
                for i in 0..rows {
                    data.extend_from_slice(&x_std.data()[i * x_std.cols()..(i + 1) * x_std.cols()]);
                    data.extend_from_slice(&z.data()[i * z.cols()..(i + 1) * z.cols()]);
                }
                let joined = Tensor::matrix(rows, x_std.cols() + z.cols(), data)?;
                g.input(joined)
            }
        };
        self.layers.forward(g, &self.params, input)
    }

    pub fn predict(&self, ds: &PanelDataset) -> Result<Predictions> {
        let idx: Vec<usize> = (0..ds.n()).collect();
        let mut merged: Option<Predictions> = None;
        for chunk in idx.chunks(1024) {
            let (x, z) = gather_standardized(ds, chunk, self.standardizer.as_ref());
            let mut g = Graph::new();
            let link = self.build_link(&mut g, x, z)?;
            let part = link_to_predictions(g.value(link), self.task)?;
            merged = Some(match merged.take() {
                None => part,
                Some(acc) => concat_predictions(acc, part),
            });
        }
        Ok(merged.unwrap_or(Predictions::Continuous(Vec::new())))
    }
}

#[derive(Serialize, Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct PenaltyFile {
    l1: f64,
    l2: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
    scaling: bool,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    created_with_seed: u64,
    m: usize,
    steps: usize,
    p: usize,
    task: Task,
    downstream: DownstreamKind,
    heads: Vec<HeadConfig>,
    gamnet_hidden: Vec<usize>,
    penalties: PenaltyFile,
    standardizer: Option<Standardizer>,
    fitted: bool,
    parameters: Vec<ParamFile>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn find_param(model: &FeatsModel, name: &str) -> crate::graph::ParamId {
        model
            .params
            .ids()
            .find(|&id| model.params.name(id) == name)
            .unwrap_or_else(|| panic!("no param {name}"))
    }

    #[test]
    fn single_head_identity_downstream() {
        let config = ModelConfig::continuous(1, 1);
        let mut model = FeatsModel::new(2, 8, 0, &config, 3).unwrap();
        let w = find_param(&model, "downstream.w");
        let b = find_param(&model, "downstream.b");
        model.params.value_mut(w).data_mut().copy_from_slice(&[1.0]);
        model.params.value_mut(b).data_mut().copy_from_slice(&[0.0]);

        let mut rng = Prng::new(5);
        let x = Tensor::matrix(3, 16, (0..48).map(|_| rng.next_normal()).collect()).unwrap();
        let out = model.forward_batch(&x, None).unwrap();
        match out.predictions {
            Predictions::Continuous(p) => {
                for (pred, feat) in p.iter().zip(out.features.data()) {
                    assert!((pred - feat).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn softmax_zero_final_layer_uniform() {
        let config = ModelConfig::multiclass(2, 0, 4);
        let mut model = FeatsModel::new(1, 5, 0, &config, 11).unwrap();
        let w = find_param(&model, "downstream.w");
        let b = find_param(&model, "downstream.b");
        model.params.value_mut(w).data_mut().fill(0.0);
        model.params.value_mut(b).data_mut().fill(0.0);

        let x = Tensor::matrix(2, 5, vec![0.3; 10]).unwrap();
        let out = model.forward_batch(&x, None).unwrap();
        match out.predictions {
            Predictions::Classes { probs, k } => {
                assert_eq!(k, 4);
                for &p in &probs {
                    assert!((p - 0.25).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn class_probabilities_sum_to_one() {
        let config = ModelConfig::multiclass(2, 1, 3);
        let model = FeatsModel::new(2, 6, 0, &config, 17).unwrap();
        let mut rng = Prng::new(23);
        let x = Tensor::matrix(5, 12, (0..60).map(|_| rng.next_normal()).collect()).unwrap();
        let out = model.forward_batch(&x, None).unwrap();
        match out.predictions {
            Predictions::Classes { probs, k } => {
                for i in 0..5 {
                    let s: f64 = probs[i * k..(i + 1) * k].iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
            _ => panic!(),
        }
    }

    #[test]
    fn two_head_forward_matches_independent_oracle() {
        // replay the whole forward pass with plain loops, no graph code
        let config = ModelConfig {
            heads: vec![HeadConfig::plain(1), HeadConfig::plain(0)],
            downstream: DownstreamKind::Linear,
            task: Task::Continuous,
            gamnet_hidden: vec![10, 10],
            l1: 0.0,
            l2: 0.0,
        };
        let model = FeatsModel::new(2, 10, 0, &config, 41).unwrap();
        let mut rng = Prng::new(42);
        let x: Vec<f64> = (0..20).map(|_| rng.next_normal()).collect();

        let dense = |input: &[f64], subnet: &AttentionSubnet, ps: &ParamSet| -> Vec<f64> {
            let mut cur = input.to_vec();
            for layer in 0..subnet.weights.len() {
                let w = ps.value(subnet.weights[layer]);
                let b = ps.value(subnet.biases[layer]);
                let (fan_in, fan_out) = (subnet.widths[layer], subnet.widths[layer + 1]);
                let mut next = vec![0.0; fan_out];
                for o in 0..fan_out {
                    let mut acc = b.data()[o];
                    for i in 0..fan_in {
                        acc += cur[i] * w.data()[i * fan_out + o];
                    }
                    next[o] = acc;
                }
                if layer + 1 < subnet.weights.len() {
                    for v in next.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                cur = next;
            }
            cur
        };
        let softmax = |v: &[f64]| -> Vec<f64> {
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = v.iter().map(|e| (e - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        };

        let ps = &model.params;
        let mut expected_features = Vec::new();
        for built in &model.heads {
            let head = &built.head;
            let (m, steps, tau) = (head.series, head.steps, head.tau);
            let w = 2 * tau + 1;
            let s1 = ps.value(head.s1.id).data();
            let s2 = ps.value(head.s2.id).data();
            let mut xi = vec![0.0; steps];
            for k in 0..steps {
                let mut patch = vec![0.0; m * w];
                for j in 0..m {
                    for l in 0..w {
                        let t = k as isize + l as isize - tau as isize;
                        if t >= 0 && (t as usize) < steps {
                            patch[j * w + l] = x[j * steps + t as usize];
                        }
                    }
                }
                let gates = softmax(&dense(&patch, &head.kernel, ps));
                xi[k] = (0..m * w).map(|i| gates[i] * s1[i] * patch[i]).sum();
            }
            let tgates = softmax(&dense(&xi, &head.time_net, ps));
            let feature: f64 = (0..steps).map(|k| tgates[k] * s2[k] * xi[k]).sum();
            expected_features.push(feature);
        }
        let wd = ps.value(find_param(&model, "downstream.w"));
        let bd = ps.value(find_param(&model, "downstream.b"));
        let expected = expected_features[0] * wd.data()[0] + expected_features[1] * wd.data()[1]
            + bd.data()[0];

        let xt = Tensor::matrix(1, 20, x).unwrap();
        let out = model.forward_batch(&xt, None).unwrap();
        match out.predictions {
            Predictions::Continuous(p) => {
                assert!((p[0] - expected).abs() < 1e-10, "{} vs {expected}", p[0])
            }
            _ => panic!(),
        }
    }

    #[test]
    fn loss_values_match_hand_formulas() {
        let config = ModelConfig::continuous(1, 0);
        let mut model = FeatsModel::new(1, 4, 0, &config, 1).unwrap();
        model.l1 = 0.5;
        // perfect predictions: loss is the penalty term alone
        let preds = Predictions::Continuous(vec![1.0, 2.0]);
        let targets = Targets::Continuous(vec![1.0, 2.0]);
        let loss = model.loss_value(&preds, &targets, &[1.0, 1.0]).unwrap();
        let expected_penalty = penalty_value(&model.params, 0.5, 0.0);
        assert!(expected_penalty > 0.0);
        assert!((loss - expected_penalty).abs() < 1e-12);

        // p = 0.5 everywhere: BCE is ln 2
        let preds = Predictions::Binary(vec![0.5, 0.5]);
        let targets = Targets::Binary(vec![0.0, 1.0]);
        let bce = data_loss(&preds, &targets, &[1.0, 1.0]).unwrap();
        assert!((bce - 2.0_f64.ln()).abs() < 1e-12);

        // uniform 3-class prediction: CE is ln 3
        let preds = Predictions::Classes {
            probs: vec![1.0 / 3.0; 6],
            k: 3,
        };
        let targets = Targets::Classes {
            labels: vec![0, 2],
            n_classes: 3,
            names: vec!["0".into(), "1".into(), "2".into()],
        };
        let ce = data_loss(&preds, &targets, &[1.0, 1.0]).unwrap();
        assert!((ce - 3.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn serialize_round_trip_bitwise() {
        let config = ModelConfig {
            heads: vec![
                HeadConfig::plain(2),
                HeadConfig {
                    tau: 1,
                    hidden: vec![6],
                    series_subset: Some(vec![0]),
                    time_window: Some((2, 9)),
                },
            ],
            downstream: DownstreamKind::FeatureAttention,
            task: Task::Continuous,
            gamnet_hidden: vec![8],
            l1: 0.01,
            l2: 0.001,
        };
        let mut model = FeatsModel::new(2, 12, 2, &config, 77).unwrap();
        model.standardizer = Some(Standardizer {
            x_mean: vec![0.1, -0.2],
            x_sd: vec![1.5, 0.7],
            z_mean: vec![0.0, 0.5],
            z_sd: vec![1.0, 2.0],
        });
        model.fitted = true;

        let json = model.to_json().unwrap();
        let back = FeatsModel::from_json(&json).unwrap();
        assert_eq!(model.params.len(), back.params.len());
        for (a, b) in model.params.entries().iter().zip(back.params.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
            assert_eq!(a.is_scaling, b.is_scaling);
        }
        assert_eq!(model.standardizer, back.standardizer);

        // predictions reproduce bit-exactly
        let mut rng = Prng::new(5);
        let x = Tensor::matrix(4, 24, (0..96).map(|_| rng.next_normal()).collect()).unwrap();
        let z = Tensor::matrix(4, 2, (0..8).map(|_| rng.next_normal()).collect()).unwrap();
        let a = model.forward_batch(&x, Some(&z)).unwrap();
        let b = back.forward_batch(&x, Some(&z)).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let config = ModelConfig::continuous(1, 0);
        let model = FeatsModel::new(1, 3, 0, &config, 1).unwrap();
        let json = model
            .to_json()
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        let err = FeatsModel::from_json(&json).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 99, .. }));
    }

    #[test]
    fn truncated_file_is_clean_error() {
        let config = ModelConfig::continuous(1, 0);
        let model = FeatsModel::new(1, 3, 0, &config, 1).unwrap();
        let json = model.to_json().unwrap();
        let truncated = &json[..json.len() / 2];
        let err = FeatsModel::from_json(truncated).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn ffnn_parameter_count_formula() {
        // 100 inputs, two hidden layers of 40, one output:
        // 100*40+40 + 40*40+40 + 40*1+1 = 5721
        let ffnn = FfnnModel::new(2, 50, 0, &[40, 40], Task::Continuous, 1).unwrap();
        assert_eq!(ffnn.parameter_count(), 5721);
    }

    #[test]
    fn incompatible_downstream_rejected() {
        let mut config = ModelConfig::continuous(1, 0);
        config.downstream = DownstreamKind::Logistic;
        let err = FeatsModel::new(1, 4, 0, &config, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn head_subset_out_of_range_rejected() {
        let mut config = ModelConfig::continuous(1, 0);
        config.heads[0].series_subset = Some(vec![2]);
        let err = FeatsModel::new(2, 4, 0, &config, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
