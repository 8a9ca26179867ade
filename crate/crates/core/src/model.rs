//! Partitioned heteroscedastic networks.
//!
//! A model is split into a shared trunk (`z = f_trunk(x)`), a linear mean head,
//! a softplus scale head and, for Student models, a degrees-of-freedom head.
//! The mean-only projection keeps just the trunk and mean head, which are the
//! ancestors of the mean output.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::seed;

/// Lower bound on the scale output. Squared, this is the variance floor `1e-6`.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Student degrees of freedom are `DOF_SHIFT + softplus(.)`.
pub const DOF_SHIFT: f64 = 3.0;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn elu(width: usize) -> Self {
        Self {
            width,
            activation: Activation::Elu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub trunk: Vec<LayerSpec>,
    /// Adds a degrees-of-freedom head (Student models).
    pub dof_head: bool,
    pub dropout_rate: f64,
}

impl ArchitectureSpec {
    /// One hidden layer of 50 elu units, scalar input and output.
    pub fn convergence() -> Self {
        Self {
            input_dim: 1,
            output_dim: 1,
            trunk: vec![LayerSpec::elu(50)],
            dof_head: false,
            dropout_rate: 0.0,
        }
    }

    /// Two hidden layers of 50 elu units.
    pub fn tabular(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            trunk: vec![LayerSpec::elu(50), LayerSpec::elu(50)],
            dof_head: false,
            dropout_rate: 0.0,
        }
    }

    pub fn with_student(mut self, on: bool) -> Self {
        self.dof_head = on;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Architecture("input and output dims must be positive".into()));
        }
        if let Some(i) = self.trunk.iter().position(|l| l.width == 0) {
            return Err(Error::Architecture(format!("trunk layer {i} has zero width")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Architecture(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Width of the trunk output `z`.
    pub fn trunk_width(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, |l| l.width)
    }
}

/// Parameter partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Trunk,
    Mean,
    Scale,
    Dof,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Trunk, Partition::Mean, Partition::Scale, Partition::Dof];

    fn stream(self) -> u64 {
        match self {
            Partition::Trunk => 0,
            Partition::Mean => 1,
            Partition::Scale => 2,
            Partition::Dof => 3,
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Partition::Trunk => "trunk",
            Partition::Mean => "mean",
            Partition::Scale => "scale",
            Partition::Dof => "dof",
        };
        f.write_str(s)
    }
}

/// Parameters per partition, laid out as `[W0, b0, W1, b1, ...]` with
/// `W: [fan_in, fan_out]` and `b: [1, fan_out]`.
///
/// Tensors are reference counted: clones and projections share storage until
/// one side is mutated.
pub type ParamStore = BTreeMap<Partition, Vec<Arc<Tensor>>>;

#[derive(Debug, Clone)]
pub struct PartitionedModel {
    spec: ArchitectureSpec,
    seed: u64,
    params: ParamStore,
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized by construction")
}

fn dense_layers(seed: u64, partition: Partition, dims: &[(usize, usize)]) -> Vec<Arc<Tensor>> {
    let mut rng = seed::rng(seed, &[seed::tag::INIT, partition.stream()]);
    dims.iter()
        .flat_map(|&(fan_in, fan_out)| {
            [
                Arc::new(glorot(&mut rng, fan_in, fan_out)),
                Arc::new(Tensor::zeros(&[1, fan_out])),
            ]
        })
        .collect()
}

impl PartitionedModel {
    /// Builds a model with Glorot-uniform weights and zero biases. Each
    /// partition draws from its own stream keyed by `(seed, partition)`, so
    /// models of different head sets built from one seed share their trunk
    /// and mean head.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut dims = Vec::new();
        let mut fan_in = spec.input_dim;
        for layer in &spec.trunk {
            dims.push((fan_in, layer.width));
            fan_in = layer.width;
        }
        params.insert(Partition::Trunk, dense_layers(seed, Partition::Trunk, &dims));
        let z = spec.trunk_width();
        let head = [(z, spec.output_dim)];
        params.insert(Partition::Mean, dense_layers(seed, Partition::Mean, &head));
        params.insert(Partition::Scale, dense_layers(seed, Partition::Scale, &head));
        if spec.dof_head {
            params.insert(Partition::Dof, dense_layers(seed, Partition::Dof, &head));
        }
        Ok(Self { spec, seed, params })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean-only subnetwork sharing trunk and mean-head storage with `self`.
    pub fn mean_only_projection(&self) -> Self {
        let params = self
            .params
            .iter()
            .filter(|(p, _)| matches!(p, Partition::Trunk | Partition::Mean))
            .map(|(p, v)| (*p, v.clone()))
            .collect();
        Self {
            spec: self.spec.clone(),
            seed: self.seed,
            params,
        }
    }

    pub fn is_mean_only(&self) -> bool {
        !self.has(Partition::Scale)
    }

    pub fn has(&self, partition: Partition) -> bool {
        self.params.contains_key(&partition)
    }

    pub fn partitions(&self) -> impl Iterator<Item = Partition> + '_ {
        self.params.keys().copied()
    }

    pub fn params(&self, partition: Partition) -> &[Arc<Tensor>] {
        self.params.get(&partition).map_or(&[], |v| v.as_slice())
    }

    pub fn store(&self) -> &ParamStore {
        &self.params
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the whole parameter store. Layout is checked against the current one.
    pub fn set_store(&mut self, store: ParamStore) -> Result<()> {
        check_layout(&self.params, &store)?;
        self.params = store;
        Ok(())
    }

    /// Copies one partition's tensors from `other`.
    pub fn copy_partition_from(&mut self, other: &PartitionedModel, partition: Partition) -> Result<()> {
        let (Some(mine), Some(theirs)) = (self.params.get(&partition), other.params.get(&partition)) else {
            return Err(Error::InvalidArgument(format!("partition {partition} missing")));
        };
        if mine.len() != theirs.len() || mine.iter().zip(theirs).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidArgument(format!("partition {partition} layout differs")));
        }
        self.params.insert(partition, theirs.clone());
        Ok(())
    }

    pub fn partition_size(&self, partition: Partition) -> usize {
        self.params(partition).iter().map(|t| t.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().flatten().map(|t| t.len()).sum()
    }

    /// Builds the forward computation into `graph` for `rows` examples.
    pub fn build_forward(&self, graph: &mut Graph, rows: usize, options: ForwardOptions) -> Result<Wiring> {
        let x = graph.input(&[rows, self.spec.input_dim]);
        let mut params = Vec::new();
        let mut param_node = |graph: &mut Graph, partition: Partition, index: usize, shape: &[usize]| {
            let id = graph.parameter(shape);
            params.push((partition, index, id));
            id
        };

        let mut masks = Vec::new();
        let mut h = x;
        for (i, layer) in self.spec.trunk.iter().enumerate() {
            let w = self.params(Partition::Trunk)[2 * i].shape().to_vec();
            let b = self.params(Partition::Trunk)[2 * i + 1].shape().to_vec();
            let w = param_node(graph, Partition::Trunk, 2 * i, &w);
            let b = param_node(graph, Partition::Trunk, 2 * i + 1, &b);
            h = dense(graph, h, w, b)?;
            h = match layer.activation {
                Activation::Elu => graph.elu(h)?,
                Activation::Relu => graph.relu(h)?,
                Activation::Linear => h,
            };
            if options.dropout {
                let m = graph.input(&[rows, layer.width]);
                masks.push(m);
                h = graph.dropout_mask(h, m)?;
            }
        }
        let z = h;

        let mut head = |graph: &mut Graph, partition: Partition, input: NodeId| -> Result<NodeId> {
            let w = self.params(partition)[0].shape().to_vec();
            let b = self.params(partition)[1].shape().to_vec();
            let w = param_node(graph, partition, 0, &w);
            let b = param_node(graph, partition, 1, &b);
            dense(graph, input, w, b)
        };
        let mean = head(graph, Partition::Mean, z)?;

        let mut wiring = Wiring {
            x,
            params: Vec::new(),
            masks,
            z,
            mean,
            head_input: None,
            scale: None,
            variance: None,
            dof: None,
        };
        if self.has(Partition::Scale) && options.heads {
            let head_input = if options.shield_trunk {
                graph.stop_gradient(z)?
            } else {
                z
            };
            let pre = head(graph, Partition::Scale, head_input)?;
            let sp = graph.softplus(pre)?;
            let scale = graph.clamp_min(sp, SCALE_FLOOR)?;
            wiring.head_input = Some(head_input);
            wiring.scale = Some(scale);
            wiring.variance = Some(graph.square(scale)?);
            if self.has(Partition::Dof) {
                let pre = head(graph, Partition::Dof, head_input)?;
                let sp = graph.softplus(pre)?;
                wiring.dof = Some(graph.add_scalar(sp, DOF_SHIFT)?);
            }
        }
        wiring.params = params;
        Ok(wiring)
    }

    /// Predicts `(mean, squared scale, dof)` for the rows of `x`.
    pub fn predict_moments(&self, x: &Tensor, mode: PredictMode) -> Result<Moments> {
        let rows = x.rows();
        if x.cols() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                lhs: x.shape().to_vec(),
                rhs: vec![rows, self.spec.input_dim],
            });
        }
        let dropout = matches!(mode, PredictMode::Dropout { .. });
        let mut graph = Graph::new();
        let wiring = self.build_forward(
            &mut graph,
            rows,
            ForwardOptions {
                dropout,
                shield_trunk: false,
                heads: true,
            },
        )?;
        let masks = match mode {
            PredictMode::Dropout { mask_seed } => self.dropout_masks(rows, mask_seed),
            PredictMode::Deterministic => Vec::new(),
        };
        wiring.bind(&mut graph, self, x.clone(), &masks)?;
        graph.forward()?;
        let take = |id: Option<NodeId>| -> Result<Option<Tensor>> {
            id.map(|i| graph.value(i).cloned()).transpose()
        };
        Ok(Moments {
            mean: graph.value(wiring.mean)?.clone(),
            scale_sq: take(wiring.variance)?,
            dof: take(wiring.dof)?,
        })
    }

    /// Inverted-dropout masks for every trunk layer, a pure function of `(rows, mask_seed)`.
    pub fn dropout_masks(&self, rows: usize, mask_seed: u64) -> Vec<Tensor> {
        let rate = self.spec.dropout_rate;
        let keep = 1.0 - rate;
        self.spec
            .trunk
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let mut rng = seed::rng(mask_seed, &[seed::tag::DROPOUT, i as u64]);
                let data = (0..rows * layer.width)
                    .map(|_| {
                        if rate == 0.0 || rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Tensor::new(vec![rows, layer.width], data).expect("sized by construction")
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            seed: self.seed,
            partitions: self
                .params
                .iter()
                .map(|(p, v)| (*p, v.iter().map(|t| (**t).clone()).collect()))
                .collect(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        if cp.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported checkpoint version {}", cp.version)));
        }
        let reference = Self::build(cp.spec.clone(), cp.seed)?;
        let store: ParamStore = cp
            .partitions
            .into_iter()
            .map(|(p, v)| (p, v.into_iter().map(Arc::new).collect()))
            .collect();
        let mut expected = reference.params;
        expected.retain(|p, _| store.contains_key(p));
        check_layout(&expected, &store)?;
        Ok(Self {
            spec: cp.spec,
            seed: cp.seed,
            params: store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let cp: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(cp)
    }
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    let same = expected.len() == got.len()
        && expected.iter().zip(got).all(|((pa, va), (pb, vb))| {
            pa == pb && va.len() == vb.len() && va.iter().zip(vb).all(|(a, b)| a.shape() == b.shape())
        });
    if same {
        Ok(())
    } else {
        Err(Error::InvalidArgument("parameter layout does not match architecture".into()))
    }
}

fn dense(graph: &mut Graph, input: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let h = graph.matmul(input, w)?;
    let shape = graph.shape(h)?.to_vec();
    let bb = graph.broadcast(b, &shape)?;
    graph.add(h, bb)
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: spec, seed and flat parameter arrays per partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ArchitectureSpec,
    pub seed: u64,
    pub partitions: BTreeMap<Partition, Vec<Tensor>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Insert a dropout mask input after every trunk layer.
    pub dropout: bool,
    /// Feed the scale and dof heads `stop_gradient(z)` instead of `z`.
    pub shield_trunk: bool,
    /// Build the scale/dof heads when the model has them.
    pub heads: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            dropout: false,
            shield_trunk: false,
            heads: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    Deterministic,
    Dropout { mask_seed: u64 },
}

/// Node ids of one model's forward pass inside a graph.
#[derive(Debug, Clone)]
pub struct Wiring {
    pub x: NodeId,
    pub params: Vec<(Partition, usize, NodeId)>,
    pub masks: Vec<NodeId>,
    pub z: NodeId,
    pub mean: NodeId,
    /// Node the scale/dof heads consume: `z` or `stop_gradient(z)`.
    pub head_input: Option<NodeId>,
    pub scale: Option<NodeId>,
    pub variance: Option<NodeId>,
    pub dof: Option<NodeId>,
}

impl Wiring {
    /// Binds covariates, the model's current parameters and dropout masks.
    pub fn bind(&self, graph: &mut Graph, model: &PartitionedModel, x: Tensor, masks: &[Tensor]) -> Result<()> {
        graph.bind(self.x, x)?;
        self.bind_params(graph, model)?;
        if masks.len() != self.masks.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} dropout masks, got {}",
                self.masks.len(),
                masks.len()
            )));
        }
        for (&id, m) in self.masks.iter().zip(masks) {
            graph.bind(id, m.clone())?;
        }
        Ok(())
    }

    pub fn bind_params(&self, graph: &mut Graph, model: &PartitionedModel) -> Result<()> {
        for &(p, i, id) in &self.params {
            let t = model
                .params(p)
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("model lacks {p}[{i}]")))?;
            graph.bind(id, (**t).clone())?;
        }
        Ok(())
    }

    pub fn param_nodes(&self, partition: Partition) -> impl Iterator<Item = NodeId> + '_ {
        self.params.iter().filter(move |(p, _, _)| *p == partition).map(|&(_, _, id)| id)
    }
}

/// Raw head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: Tensor,
    /// Squared scale output; the variance for Normal heads.
    pub scale_sq: Option<Tensor>,
    pub dof: Option<Tensor>,
}
