//! Declarative network graphs, builders and parameter bookkeeping.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{init_fusion, FusionKind, FusionParams};
use crate::tensor::{Real, Tensor};

/// Channel widths of the CIFAR model: six 3×3 convolutions then the 1×1.
pub const CIFAR_WIDTHS: [usize; 7] = [96, 96, 192, 192, 192, 192, 192];
/// Side-branch attachment points of the CIFAR fusion network.
pub const CIFAR_BRANCH_POINTS: [&str; 2] = ["pool2", "pool3"];

pub const INPUT_NODE: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeKind {
    Input,
    Conv3x3,
    Conv1x1,
    MaxPool,
    Relu,
    Gap,
    Stack,
    Fuse,
    Fc,
    SoftmaxCe,
}

impl NodeKind {
    pub fn has_params(self) -> bool {
        matches!(
            self,
            NodeKind::Conv3x3 | NodeKind::Conv1x1 | NodeKind::Fuse | NodeKind::Fc
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    /// Output channels for conv and fc nodes; ignored elsewhere.
    pub out_channels: usize,
    pub inputs: Vec<String>,
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Basic,
    Branch,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub node: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_weight(&self) -> bool {
        self.name.ends_with(".weight")
    }
}

/// A network as an ordered DAG of layer nodes. Nodes may only reference
/// earlier nodes, so the list order is a topological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    pub branch_points: Vec<String>,
    pub fusion: Option<FusionKind>,
    pub k: usize,
    pub classes: usize,
    pub in_channels: usize,
}

impl GraphSpec {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Total branch count `S`, main branch included.
    pub fn branch_count(&self) -> usize {
        self.branch_points.len() + 1
    }

    pub fn fuse_node(&self) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.kind == NodeKind::Fuse)
    }

    pub fn logits_node(&self) -> Option<&NodeSpec> {
        let loss = self.nodes.iter().find(|n| n.kind == NodeKind::SoftmaxCe)?;
        self.node(&loss.inputs[0])
    }

    /// Output channel count of every node, in node order.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let input_ch = |i: usize| -> Result<usize> {
                let name = &node.inputs[i];
                self.nodes[..ch.len()]
                    .iter()
                    .position(|n| &n.name == name)
                    .map(|p| ch[p])
                    .ok_or_else(|| {
                        Error::Graph(format!(
                            "node {:?} references {name:?}, which is not an earlier node",
                            node.name
                        ))
                    })
            };
            let expected_inputs = match node.kind {
                NodeKind::Input => 0,
                NodeKind::Stack => node.inputs.len().max(1),
                _ => 1,
            };
            if node.inputs.len() != expected_inputs {
                return Err(Error::Graph(format!(
                    "node {:?} has {} inputs, expected {expected_inputs}",
                    node.name,
                    node.inputs.len()
                )));
            }
            let c = match node.kind {
                NodeKind::Input => self.in_channels,
                NodeKind::Conv3x3 | NodeKind::Conv1x1 | NodeKind::Fc => {
                    input_ch(0)?;
                    if node.out_channels == 0 {
                        return Err(Error::Graph(format!("node {:?} has zero width", node.name)));
                    }
                    node.out_channels
                }
                NodeKind::MaxPool | NodeKind::Relu | NodeKind::Gap | NodeKind::Fuse => input_ch(0)?,
                NodeKind::SoftmaxCe => input_ch(0)?,
                NodeKind::Stack => {
                    let first = input_ch(0)?;
                    for i in 1..node.inputs.len() {
                        if input_ch(i)? != first {
                            return Err(Error::Graph(format!(
                                "K mismatch across branches at {:?}",
                                node.name
                            )));
                        }
                    }
                    first
                }
            };
            ch.push(c);
        }
        Ok(ch)
    }

    /// Checks the structural invariants: unique names, references to earlier
    /// nodes only, one input and one loss node, and `conv1x1 → relu → gap`
    /// branches feeding the stack.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.name.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node name {:?}", n.name)));
            }
        }
        let count = |k: NodeKind| self.nodes.iter().filter(|n| n.kind == k).count();
        if self.nodes.first().map(|n| n.kind) != Some(NodeKind::Input) || count(NodeKind::Input) != 1 {
            return Err(Error::Graph("the first node must be the only input node".into()));
        }
        if count(NodeKind::SoftmaxCe) != 1 {
            return Err(Error::Graph("exactly one loss node is required".into()));
        }
        let ch = self.channels()?;
        let loss = self.nodes.iter().position(|n| n.kind == NodeKind::SoftmaxCe).unwrap();
        let logits = seen[self.nodes[loss].inputs[0].as_str()];
        if self.nodes[logits].kind != NodeKind::Fc || ch[logits] != self.classes {
            return Err(Error::Graph(format!(
                "loss must consume an fc node with {} outputs",
                self.classes
            )));
        }
        match (count(NodeKind::Stack), count(NodeKind::Fuse), self.fusion) {
            (0, 0, _) if self.branch_points.is_empty() => {}
            (1, 1, Some(_)) => {
                let stack = self.nodes.iter().find(|n| n.kind == NodeKind::Stack).unwrap();
                if stack.inputs.len() != self.branch_count() {
                    return Err(Error::Graph(format!(
                        "stack has {} inputs but S = {}",
                        stack.inputs.len(),
                        self.branch_count()
                    )));
                }
                for (s, gap_name) in stack.inputs.iter().enumerate() {
                    let conv = self.branch_conv(gap_name)?;
                    if ch[seen[conv.name.as_str()]] != self.k {
                        return Err(Error::Graph(format!(
                            "K mismatch across branches: {:?} has {} channels, K = {}",
                            conv.name,
                            ch[seen[conv.name.as_str()]],
                            self.k
                        )));
                    }
                    if s + 1 < stack.inputs.len() {
                        let point = &conv.inputs[0];
                        if *point != self.branch_points[s] {
                            return Err(Error::Graph(format!(
                                "branch {} starts at {point:?}, expected {:?}",
                                s + 1,
                                self.branch_points[s]
                            )));
                        }
                    }
                }
                let fuse = self.fuse_node().unwrap();
                if fuse.inputs[0] != stack.name {
                    return Err(Error::Graph("fuse node must consume the stack".into()));
                }
            }
            _ => {
                return Err(Error::Graph(
                    "fusion graphs need exactly one stack and one fuse node and a fusion kind".into(),
                ))
            }
        }
        for p in &self.branch_points {
            match self.node(p) {
                Some(n) if n.kind == NodeKind::MaxPool => {}
                Some(n) => {
                    return Err(Error::Graph(format!(
                        "branch point {p:?} is a {:?} node, not a pooling node",
                        n.kind
                    )))
                }
                None => return Err(Error::Graph(format!("branch point {p:?} does not exist"))),
            }
        }
        Ok(())
    }

    /// Follows `gap ← relu ← conv1x1` back from a stack input.
    fn branch_conv(&self, gap_name: &str) -> Result<&NodeSpec> {
        let step = |name: &str, kind: NodeKind| -> Result<&NodeSpec> {
            self.node(name)
                .filter(|n| n.kind == kind)
                .ok_or_else(|| {
                    Error::Graph(format!(
                        "branch feeding the stack must be conv1x1 → relu → gap (at {name:?})"
                    ))
                })
        };
        let gap = step(gap_name, NodeKind::Gap)?;
        let relu = step(&gap.inputs[0], NodeKind::Relu)?;
        step(&relu.inputs[0], NodeKind::Conv1x1)
    }

    /// Names of the 1×1 convolutions owned exclusively by side branches, shallowest first.
    pub fn side_branch_convs(&self) -> Vec<String> {
        let Some(stack) = self.nodes.iter().find(|n| n.kind == NodeKind::Stack) else {
            return Vec::new();
        };
        stack.inputs[..stack.inputs.len().saturating_sub(1)]
            .iter()
            .filter_map(|g| self.branch_conv(g).ok().map(|c| c.name.clone()))
            .collect()
    }

    /// Every learnable tensor with its shape and group, in node order.
    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let ch = self.channels()?;
        let branch_convs = self.side_branch_convs();
        let mut specs = Vec::new();
        for node in &self.nodes {
            if !node.kind.has_params() {
                continue;
            }
            let cin = ch[self.index_of(&node.inputs[0]).unwrap()];
            let group = if node.kind == NodeKind::Fuse {
                ParamGroup::Fusion
            } else if branch_convs.contains(&node.name) {
                ParamGroup::Branch
            } else {
                ParamGroup::Basic
            };
            let mut push = |suffix: &str, shape: Vec<usize>| {
                specs.push(ParamSpec {
                    name: format!("{}.{suffix}", node.name),
                    node: node.name.clone(),
                    shape,
                    group,
                })
            };
            match node.kind {
                NodeKind::Conv3x3 => {
                    push("weight", vec![node.out_channels, cin, 3, 3]);
                    push("bias", vec![node.out_channels]);
                }
                NodeKind::Conv1x1 => {
                    push("weight", vec![node.out_channels, cin, 1, 1]);
                    push("bias", vec![node.out_channels]);
                }
                NodeKind::Fc => {
                    push("weight", vec![node.out_channels, cin]);
                    push("bias", vec![node.out_channels]);
                }
                NodeKind::Fuse => match self.fusion {
                    Some(FusionKind::Lc) => {
                        push("weight", vec![self.k, self.branch_count()]);
                        push("bias", vec![self.k]);
                    }
                    Some(FusionKind::Conv) => {
                        push("weight", vec![self.branch_count()]);
                        push("bias", vec![1]);
                    }
                    _ => {}
                },
                _ => unreachable!(),
            }
        }
        Ok(specs)
    }

    pub fn param_breakdown(&self) -> Result<ParamBreakdown> {
        let mut b = ParamBreakdown::default();
        for spec in self.param_specs()? {
            match spec.group {
                ParamGroup::Basic => b.basic += spec.count(),
                ParamGroup::Branch => b.extra_branches += spec.count(),
                ParamGroup::Fusion => b.fusion += spec.count(),
            }
        }
        Ok(b)
    }
}

/// Parameter counts split into backbone, side branches and fusion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub basic: usize,
    pub extra_branches: usize,
    pub fusion: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.basic + self.extra_branches + self.fusion
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (basic) + {} (extra branches) + {} (fusion) = {}",
            self.basic,
            self.extra_branches,
            self.fusion,
            self.total()
        )
    }
}

/// Architecture description for [`build_generic_cfn`].
///
/// `widths` lists the 3×3 convolution widths followed by the width of the final
/// 1×1 convolution. A 2×2 max pool follows every second 3×3 convolution, so
/// pools are named `pool1`, `pool2`, … in depth order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub branch_points: Vec<String>,
    pub fusion: FusionKind,
    /// Side-branch width; defaults to the final 1×1 width.
    pub k: Option<usize>,
    pub classes: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn cifar_plain(classes: usize) -> Self {
        ModelConfig {
            widths: CIFAR_WIDTHS.to_vec(),
            branch_points: Vec::new(),
            fusion: FusionKind::Lc,
            k: None,
            classes,
            in_channels: 3,
        }
    }

    pub fn cifar_cfn(classes: usize, fusion: FusionKind) -> Self {
        ModelConfig {
            branch_points: CIFAR_BRANCH_POINTS.iter().map(|s| s.to_string()).collect(),
            fusion,
            ..Self::cifar_plain(classes)
        }
    }
}

/// The plain CIFAR network: six 3×3 convolutions, pools after the 2nd, 4th and
/// 6th, a 1×1 convolution, global average pooling and one fc layer.
pub fn build_plain_cifar_cnn(classes: usize) -> Result<GraphSpec> {
    build_generic_cfn(&ModelConfig::cifar_plain(classes))
}

/// The CIFAR fusion network: the plain network plus side branches at `pool2`
/// and `pool3`, fused with the main branch before a single fc layer.
pub fn build_cfn_cifar(classes: usize, fusion: FusionKind) -> Result<GraphSpec> {
    build_generic_cfn(&ModelConfig::cifar_cfn(classes, fusion))
}

pub fn build_generic_cfn(cfg: &ModelConfig) -> Result<GraphSpec> {
    if cfg.widths.len() < 2 {
        return Err(Error::Graph(
            "widths needs at least one 3x3 width and the final 1x1 width".into(),
        ));
    }
    if cfg.classes < 2 {
        return Err(Error::Graph(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.widths.contains(&0) || cfg.in_channels == 0 {
        return Err(Error::Graph("widths and in_channels must be positive".into()));
    }
    let main_width = *cfg.widths.last().unwrap();
    let k = cfg.k.unwrap_or(main_width);
    let side = !cfg.branch_points.is_empty();
    if side && k != main_width {
        return Err(Error::Graph(format!(
            "K mismatch across branches: K = {k} but the main 1x1 convolution has {main_width} channels"
        )));
    }

    let mut nodes = vec![NodeSpec {
        name: INPUT_NODE.into(),
        kind: NodeKind::Input,
        out_channels: cfg.in_channels,
        inputs: vec![],
    }];
    let mut prev = INPUT_NODE.to_string();
    let push = |nodes: &mut Vec<NodeSpec>, name: String, kind, out, input: &str| {
        nodes.push(NodeSpec {
            name: name.clone(),
            kind,
            out_channels: out,
            inputs: vec![input.to_string()],
        });
        name
    };
    let n3 = cfg.widths.len() - 1;
    for (i, &w) in cfg.widths[..n3].iter().enumerate() {
        let idx = i + 1;
        let conv = push(&mut nodes, format!("conv{idx}"), NodeKind::Conv3x3, w, &prev);
        prev = push(&mut nodes, format!("relu{idx}"), NodeKind::Relu, 0, &conv);
        if idx % 2 == 0 {
            prev = push(&mut nodes, format!("pool{}", idx / 2), NodeKind::MaxPool, 0, &prev);
        }
    }
    let last = n3 + 1;
    let conv = push(&mut nodes, format!("conv{last}"), NodeKind::Conv1x1, main_width, &prev);
    let relu = push(&mut nodes, format!("relu{last}"), NodeKind::Relu, 0, &conv);
    let main_gap = push(&mut nodes, "gap".into(), NodeKind::Gap, 0, &relu);

    // Order branch points by depth so the main branch stays last in the stack.
    let mut points = cfg.branch_points.clone();
    for p in &points {
        match nodes.iter().find(|n| &n.name == p) {
            Some(n) if n.kind == NodeKind::MaxPool => {}
            Some(n) => {
                return Err(Error::Graph(format!(
                    "branch point {p:?} is a {:?} node, not a pooling node",
                    n.kind
                )))
            }
            None => return Err(Error::Graph(format!("branch point {p:?} does not exist"))),
        }
    }
    points.sort_by_key(|p| nodes.iter().position(|n| &n.name == p));
    points.dedup();
    if points.len() != cfg.branch_points.len() {
        return Err(Error::Graph("duplicate branch points".into()));
    }

    let feature = if side {
        let mut gaps = Vec::new();
        for (j, p) in points.iter().enumerate() {
            let b = j + 1;
            let c = push(&mut nodes, format!("branch{b}.conv"), NodeKind::Conv1x1, k, p);
            let r = push(&mut nodes, format!("branch{b}.relu"), NodeKind::Relu, 0, &c);
            gaps.push(push(&mut nodes, format!("branch{b}.gap"), NodeKind::Gap, 0, &r));
        }
        gaps.push(main_gap);
        nodes.push(NodeSpec {
            name: "stack".into(),
            kind: NodeKind::Stack,
            out_channels: 0,
            inputs: gaps,
        });
        push(&mut nodes, "fuse".into(), NodeKind::Fuse, 0, "stack")
    } else {
        main_gap
    };
    let fc = push(&mut nodes, "fc".into(), NodeKind::Fc, cfg.classes, &feature);
    push(&mut nodes, "loss".into(), NodeKind::SoftmaxCe, 0, &fc);

    let graph = GraphSpec {
        nodes,
        branch_points: points,
        fusion: side.then_some(cfg.fusion),
        k,
        classes: cfg.classes,
        in_channels: cfg.in_channels,
    };
    graph.validate()?;
    Ok(graph)
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }
}

/// 64-bit FNV-1a, used to derive stable per-parameter seeds from names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a run seed with a stream id (splitmix64 finaliser).
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Description of the weight initialisation, recorded in run manifests.
pub const INIT_SCHEME: &str =
    "he-uniform(fan_in) weights, zero biases, fusion weights 1/S; per-tensor ChaCha8 stream seeded by mix(seed, fnv1a(name))";

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deterministic initialisation: conv and fc weights uniform in
    /// `±sqrt(6 / fan_in)`, biases zero, fusion weights `1/S` with zero bias.
    /// Each tensor draws from its own stream keyed by its name, so networks that
    /// share layer names get identical initial values for those layers.
    pub fn init(graph: &GraphSpec, seed: u64) -> Result<Self> {
        let mut params = Self::new();
        for spec in graph.param_specs()? {
            let tensor = if spec.group == ParamGroup::Fusion {
                continue;
            } else if spec.is_weight() {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, fnv1a(spec.name.as_bytes())));
                let data = (0..spec.count())
                    .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(&spec.shape, data)?
            } else {
                Tensor::zeros(&spec.shape)?
            };
            params.insert(spec.name, tensor);
        }
        if let (Some(kind), Some(fuse)) = (graph.fusion, graph.fuse_node()) {
            match init_fusion::<T>(kind, graph.k, graph.branch_count())? {
                FusionParams::Sum => {}
                FusionParams::Conv { weights, bias } | FusionParams::Lc { weights, bias } => {
                    params.insert(format!("{}.weight", fuse.name), weights);
                    params.insert(format!("{}.bias", fuse.name), bias);
                }
            }
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::Graph(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.tensors
            .values()
            .map(|t| t.sum_squares().to_f64_lossless())
            .sum()
    }

    /// The fusion module parameters of `graph`, if it has a fuse node.
    pub fn fusion_params(&self, graph: &GraphSpec) -> Result<Option<FusionParams<T>>> {
        let (Some(kind), Some(fuse)) = (graph.fusion, graph.fuse_node()) else {
            return Ok(None);
        };
        let w = || self.require(&format!("{}.weight", fuse.name)).cloned();
        let b = || self.require(&format!("{}.bias", fuse.name)).cloned();
        Ok(Some(match kind {
            FusionKind::Sum => FusionParams::Sum,
            FusionKind::Conv => FusionParams::Conv {
                weights: w()?,
                bias: b()?,
            },
            FusionKind::Lc => FusionParams::Lc {
                weights: w()?,
                bias: b()?,
            },
        }))
    }

    /// Checks that the tensor set matches `graph` exactly.
    pub fn check_against(&self, graph: &GraphSpec) -> Result<()> {
        let specs = graph.param_specs()?;
        if specs.len() != self.len() {
            return Err(Error::Graph(format!(
                "graph has {} parameter tensors, parameter set has {}",
                specs.len(),
                self.len()
            )));
        }
        for spec in specs {
            let t = self.require(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Graph(format!(
                    "parameter {:?} has shape {:?}, graph expects {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint>
    where
        crate::checkpoint::AnyTensor: From<Tensor<T>>,
    {
        let mut ck = Checkpoint::new();
        for (name, t) in &self.tensors {
            ck.push(name.clone(), t.clone())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        ModelParams {
            tensors: ck
                .entries()
                .iter()
                .map(|(n, t)| (n.clone(), t.to_real()))
                .collect(),
        }
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "input" => NodeKind::Input,
            "conv3x3" => NodeKind::Conv3x3,
            "conv1x1" => NodeKind::Conv1x1,
            "maxpool" => NodeKind::MaxPool,
            "relu" => NodeKind::Relu,
            "gap" => NodeKind::Gap,
            "stack" => NodeKind::Stack,
            "fuse" => NodeKind::Fuse,
            "fc" => NodeKind::Fc,
            "softmax_ce" => NodeKind::SoftmaxCe,
            other => return Err(Error::Graph(format!("unknown node kind {other:?}"))),
        })
    }
}
