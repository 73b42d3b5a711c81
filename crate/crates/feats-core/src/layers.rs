//! Attention layer zoo: attention subnets with softmax gating,
//! convolutional attention with kernel subnets, stacked time attention,
//! sigmoid feature attention, and GAM-net ridge subnets.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamId, ParamSet};
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Small feed-forward network producing pre-activation scores.
///
/// Hidden layers use ReLU; the output layer is linear. Widths hold the
/// full chain `input -> hidden... -> output`.
#[derive(Clone, Debug)]
pub struct AttentionSubnet {
    pub widths: Vec<usize>,
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl AttentionSubnet {
    /// Glorot-uniform weights, zero biases.
    pub fn new(params: &mut ParamSet, name: &str, widths: &[usize], rng: &mut Prng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!(
                "subnet '{name}' needs input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("subnet '{name}' has a zero width")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.next_uniform(bound)).collect();
            weights.push(params.add(
                format!("{name}.w{layer}"),
                Tensor::matrix(fan_in, fan_out, data)?,
                false,
            ));
            biases.push(params.add(
                format!("{name}.b{layer}"),
                Tensor::from_vec(vec![0.0; fan_out]),
                false,
            ));
        }
        Ok(AttentionSubnet {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Forward a batch (rows = samples) to pre-activation scores.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, input: NodeId) -> Result<NodeId> {
        if g.value(input).cols() != self.input_width() {
            return Err(Error::dimension(
                "subnet input",
                g.value(input).shape(),
                &[self.input_width()],
            ));
        }
        let mut cur = input;
        let last = self.weights.len() - 1;
        for layer in 0..self.weights.len() {
            let w = g.param(params, self.weights[layer]);
            let b = g.param(params, self.biases[layer]);
            let lin = g.matmul(cur, w)?;
            cur = g.add_row(lin, b)?;
            if layer < last {
                cur = g.relu(cur);
            }
        }
        Ok(cur)
    }

    pub fn parameter_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|pair| pair[0] * pair[1] + pair[1])
            .sum()
    }
}

/// Trainable signed multipliers paired with attention gates; the only
/// parameters eligible for L1/L2 penalties.
#[derive(Clone, Debug)]
pub struct ScalingCoefficients {
    pub id: ParamId,
    pub len: usize,
}

impl ScalingCoefficients {
    /// Initialized to one so early training resembles plain averaging.
    pub fn new(params: &mut ParamSet, name: &str, len: usize) -> Self {
        let id = params.add(name, Tensor::from_vec(vec![1.0; len]), true);
        ScalingCoefficients { id, len }
    }

    pub fn node(&self, g: &mut Graph, params: &ParamSet) -> NodeId {
        g.param(params, self.id)
    }
}

/// Single-series attention layer: feature = sum_k softmax(subnet(x))_k * s_k * x_k.
///
/// Returns the feature column and the weight matrix W_k = A_k * s_k used
/// for attribution.
pub fn attention_feature(
    g: &mut Graph,
    params: &ParamSet,
    x: NodeId,
    subnet: &AttentionSubnet,
    s: &ScalingCoefficients,
) -> Result<(NodeId, NodeId)> {
    let len = g.value(x).cols();
    if subnet.input_width() != len || subnet.output_width() != len || s.len != len {
        return Err(Error::dimension(
            "attention_feature",
            g.value(x).shape(),
            &[subnet.input_width(), subnet.output_width(), s.len],
        ));
    }
    let scores = subnet.forward(g, params, x)?;
    let gates = g.softmax_rows(scores)?;
    let s_node = s.node(g, params);
    let weights = g.mul_row(gates, s_node)?;
    let weighted = g.mul(weights, x)?;
    let feature = g.row_sum(weighted)?;
    Ok((feature, weights))
}

/// One feature-engineering head: convolutional attention over sliding
/// windows followed by stacked time attention.
#[derive(Clone, Debug)]
pub struct FeatureHead {
    pub series: usize,
    pub steps: usize,
    pub tau: usize,
    pub kernel: AttentionSubnet,
    pub s1: ScalingCoefficients,
    pub time_net: AttentionSubnet,
    pub s2: ScalingCoefficients,
}

/// Node handles from a head's forward pass, kept for attribution.
#[derive(Clone, Copy, Debug)]
pub struct HeadForward {
    /// B x 1 generated feature.
    pub feature: NodeId,
    /// (B*steps) x (m*(2tau+1)) zero-padded windows.
    pub windows: NodeId,
    /// (B*steps) x (m*(2tau+1)) kernel gates, rows sum to one.
    pub kernel_gates: NodeId,
    /// B x steps intermediate features.
    pub intermediate: NodeId,
    /// B x steps time gates, rows sum to one.
    pub time_gates: NodeId,
}

impl FeatureHead {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        series: usize,
        steps: usize,
        tau: usize,
        hidden: &[usize],
        rng: &mut Prng,
    ) -> Result<Self> {
        if tau + 1 > steps {
            return Err(Error::Config(format!(
                "head '{name}': window half-width {tau} out of range for {steps} time points"
            )));
        }
        let window = series * (2 * tau + 1);
        let mut kernel_widths = vec![window];
        kernel_widths.extend_from_slice(hidden);
        kernel_widths.push(window);
        let mut time_widths = vec![steps];
        time_widths.extend_from_slice(hidden);
        time_widths.push(steps);

        let kernel = AttentionSubnet::new(params, &format!("{name}.kernel"), &kernel_widths, rng)?;
        let s1 = ScalingCoefficients::new(params, &format!("{name}.s1"), window);
        let time_net = AttentionSubnet::new(params, &format!("{name}.time"), &time_widths, rng)?;
        let s2 = ScalingCoefficients::new(params, &format!("{name}.s2"), steps);
        Ok(FeatureHead {
            series,
            steps,
            tau,
            kernel,
            s1,
            time_net,
            s2,
        })
    }

    /// Convolutional attention layer: intermediate features xi, one per
    /// focal time point, same kernel parameters at every position.
    pub fn conv_attention(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let batch = g.value(x).rows();
        let windows = g.windows(x, self.series, self.steps, self.tau)?;
        let scores = self.kernel.forward(g, params, windows)?;
        let gates = g.softmax_rows(scores)?;
        let s1_node = self.s1.node(g, params);
        let weighted_gates = g.mul_row(gates, s1_node)?;
        let contrib = g.mul(weighted_gates, windows)?;
        let xi_col = g.row_sum(contrib)?;
        let xi = g.reshape(xi_col, vec![batch, self.steps])?;
        Ok((xi, windows, gates))
    }

    /// Full head: conv attention then stacked time attention.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<HeadForward> {
        if g.value(x).cols() != self.series * self.steps {
            return Err(Error::dimension(
                "head input",
                g.value(x).shape(),
                &[self.series * self.steps],
            ));
        }
        let (xi, windows, kernel_gates) = self.conv_attention(g, params, x)?;
        let scores = self.time_net.forward(g, params, xi)?;
        let time_gates = g.softmax_rows(scores)?;
        let s2_node = self.s2.node(g, params);
        let weighted = g.mul_row(time_gates, s2_node)?;
        let contrib = g.mul(weighted, xi)?;
        let feature = g.row_sum(contrib)?;
        Ok(HeadForward {
            feature,
            windows,
            kernel_gates,
            intermediate: xi,
            time_gates,
        })
    }

    /// Flattened additive attribution weights W for a finished forward
    /// pass: feature = sum_{j,k} W[j,k] * x[j,k] for every sample.
    ///
    /// W[j,k] collects, over window offsets l with a valid focal index
    /// k-l, the kernel gate at (j,l) of window k-l times s1[j,l] times the
    /// time gate and s2 at k-l; focal indices outside the time range are
    /// dropped, matching the zero-padded window sums.
    pub fn attribution_weights(&self, g: &Graph, params: &ParamSet, fwd: &HeadForward) -> Tensor {
        let batch = g.value(fwd.time_gates).rows();
        let (m, steps, tau) = (self.series, self.steps, self.tau);
        let w = 2 * tau + 1;
        let kernel_gates = g.value(fwd.kernel_gates).data();
        let time_gates = g.value(fwd.time_gates).data();
        let s1 = params.value(self.s1.id).data();
        let s2 = params.value(self.s2.id).data();

        let mut out = vec![0.0; batch * m * steps];
        for b in 0..batch {
            for j in 0..m {
                for k in 0..steps {
                    let mut acc = 0.0;
                    for l in 0..w {
                        let offset = l as isize - tau as isize;
                        let focal = k as isize - offset;
                        if focal < 0 || focal >= steps as isize {
                            continue;
                        }
                        let focal = focal as usize;
                        let gate1 = kernel_gates[(b * steps + focal) * m * w + j * w + l];
                        let gate2 = time_gates[b * steps + focal];
                        acc += gate1 * s1[j * w + l] * gate2 * s2[focal];
                    }
                    out[b * m * steps + j * steps + k] = acc;
                }
            }
        }
        Tensor::matrix(batch, m * steps, out).unwrap()
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.parameter_count() + self.s1.len + self.time_net.parameter_count() + self.s2.len
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(&self.kernel.weights);
        ids.extend(&self.kernel.biases);
        ids.push(self.s1.id);
        ids.extend(&self.time_net.weights);
        ids.extend(&self.time_net.biases);
        ids.push(self.s2.id);
        ids
    }
}

/// Sigmoid feature-attention layer: y = sum_j sigmoid(e_j(O)) * s_j * O_j.
/// Gates are independent and do not sum to one.
pub fn feature_attention(
    g: &mut Graph,
    params: &ParamSet,
    o: NodeId,
    subnet: &AttentionSubnet,
    s: &ScalingCoefficients,
) -> Result<(NodeId, NodeId)> {
    let d = g.value(o).cols();
    if subnet.input_width() != d || subnet.output_width() != d || s.len != d {
        return Err(Error::dimension(
            "feature_attention",
            g.value(o).shape(),
            &[subnet.input_width(), subnet.output_width(), s.len],
        ));
    }
    let scores = subnet.forward(g, params, o)?;
    let gates = g.sigmoid(scores);
    let s_node = s.node(g, params);
    let weighted = g.mul_row(gates, s_node)?;
    let contrib = g.mul(weighted, o)?;
    let pred = g.row_sum(contrib)?;
    Ok((pred, gates))
}

/// GAM-net ridge function: a 1-in/1-out ReLU subnet transforming one
/// static covariate.
#[derive(Clone, Debug)]
pub struct GamNet {
    pub ridge: AttentionSubnet,
}

impl GamNet {
    pub fn new(params: &mut ParamSet, name: &str, hidden: &[usize], rng: &mut Prng) -> Result<Self> {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(GamNet {
            ridge: AttentionSubnet::new(params, name, &widths, rng)?,
        })
    }

    /// Transform a B x 1 covariate column.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, z: NodeId) -> Result<NodeId> {
        self.ridge.forward(g, params, z)
    }

    /// Evaluate the fitted ridge over a grid of covariate values.
    pub fn evaluate_grid(&self, params: &ParamSet, grid: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let z = g.input(Tensor::matrix(grid.len(), 1, grid.to_vec())?);
        let out = self.forward(&mut g, params, z)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(&self.ridge.weights);
        ids.extend(&self.ridge.biases);
        ids
    }
}
