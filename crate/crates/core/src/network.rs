//! Forward and backward execution of a [`GraphSpec`].
//!
//! Backward walks the node list in reverse. A node whose output feeds several
//! consumers receives the sum of their contributions, accumulated in reverse
//! node order; this is where the gradient at a side-branch input becomes the
//! sum over every branch that depends on it.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::fusion::{self, BranchStack, FuseTape};
use crate::layers::{
    self, ConvTape, GapTape, LinearTape, LossValue, PoolTape, ReluTape, SoftmaxCeTape,
};
use crate::model::{GraphSpec, ModelParams, NodeKind};
use crate::tensor::{Real, Tensor};

enum NodeTape<T: Real> {
    Input,
    Conv(ConvTape<T>),
    Pool(PoolTape),
    Relu(ReluTape<T>),
    Gap(GapTape),
    Stack,
    Fuse(FuseTape<T>),
    Fc(LinearTape<T>),
    Loss(SoftmaxCeTape<T>),
}

/// Saved state of one forward pass, consumed by [`backward`].
pub struct LayerTape<T: Real> {
    tapes: Vec<NodeTape<T>>,
    input_index: Vec<Vec<usize>>,
}

impl<T: Real> std::fmt::Debug for LayerTape<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerTape")
            .field("nodes", &self.tapes.len())
            .finish()
    }
}

/// Per-parameter gradients plus, optionally, gradients at node outputs.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub activations: BTreeMap<String, Tensor<T>>,
}

/// Knobs for [`backward_with`].
#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    /// `(consumer, producer)` edges along which no gradient is propagated.
    pub blocked_edges: Vec<(String, String)>,
    /// Keep the gradient at every node output in [`Gradients::activations`].
    pub keep_activation_grads: bool,
}

const WINDOW: usize = 2;

fn input_indices(graph: &GraphSpec) -> Result<Vec<Vec<usize>>> {
    graph
        .nodes
        .iter()
        .map(|n| {
            n.inputs
                .iter()
                .map(|i| {
                    graph
                        .index_of(i)
                        .ok_or_else(|| Error::Graph(format!("unknown input {i:?}")))
                })
                .collect()
        })
        .collect()
}

/// Runs every node. Returns node outputs (the loss node's slot holds the
/// per-sample probabilities), optional tapes and the loss when labels are given.
fn run<T: Real>(
    graph: &GraphSpec,
    params: &ModelParams<T>,
    input: &Tensor<T>,
    labels: Option<&[usize]>,
    keep_tapes: bool,
) -> Result<(Vec<Option<Tensor<T>>>, LayerTape<T>, Option<LossValue<T>>)> {
    let idx = input_indices(graph)?;
    let mut outs: Vec<Option<Tensor<T>>> = Vec::with_capacity(graph.nodes.len());
    let mut tapes = Vec::with_capacity(graph.nodes.len());
    let mut loss = None;
    for (i, node) in graph.nodes.iter().enumerate() {
        let arg = |j: usize| -> Result<&Tensor<T>> {
            outs[idx[i][j]]
                .as_ref()
                .ok_or_else(|| Error::Graph(format!("node {:?} has no value", node.name)))
        };
        let param = |suffix: &str| params.require(&format!("{}.{suffix}", node.name));
        let step: Result<(Option<Tensor<T>>, NodeTape<T>)> = (|| match node.kind {
            NodeKind::Input => {
                let (_, c, _, _) = input.dims4("network input")?;
                if c != graph.in_channels {
                    return Err(Error::ChannelMismatch {
                        input: c,
                        kernel: graph.in_channels,
                    });
                }
                Ok((Some(input.clone()), NodeTape::Input))
            }
            NodeKind::Conv3x3 | NodeKind::Conv1x1 => {
                let pad = if node.kind == NodeKind::Conv3x3 { 1 } else { 0 };
                let (y, t) = layers::conv2d(arg(0)?, param("weight")?, param("bias")?, 1, pad)?;
                Ok((Some(y), NodeTape::Conv(t)))
            }
            NodeKind::MaxPool => {
                let (y, t) = layers::maxpool2d(arg(0)?, WINDOW, WINDOW)?;
                Ok((Some(y), NodeTape::Pool(t)))
            }
            NodeKind::Relu => {
                let (y, t) = layers::relu(arg(0)?);
                Ok((Some(y), NodeTape::Relu(t)))
            }
            NodeKind::Gap => {
                let (y, t) = layers::gap(arg(0)?)?;
                Ok((Some(y), NodeTape::Gap(t)))
            }
            NodeKind::Stack => {
                let gaps = (0..node.inputs.len())
                    .map(|j| arg(j).cloned())
                    .collect::<Result<Vec<_>>>()?;
                let st = fusion::stack_branches(&gaps)?;
                Ok((Some(st.into_tensor()), NodeTape::Stack))
            }
            NodeKind::Fuse => {
                let fp = params
                    .fusion_params(graph)?
                    .ok_or_else(|| Error::Graph("fuse node without fusion kind".into()))?;
                let st = BranchStack::from_tensor(arg(0)?.clone())?;
                let (y, t) = fusion::fuse(&st, &fp)?;
                Ok((Some(y), NodeTape::Fuse(t)))
            }
            NodeKind::Fc => {
                let (y, t) = layers::linear(arg(0)?, param("weight")?, param("bias")?)?;
                Ok((Some(y), NodeTape::Fc(t)))
            }
            NodeKind::SoftmaxCe => match labels {
                Some(l) => {
                    let (lv, t) = layers::softmax_cross_entropy(arg(0)?, l)?;
                    let probs = lv.probs.clone();
                    loss = Some(lv);
                    Ok((Some(probs), NodeTape::Loss(t)))
                }
                None => Ok((None, NodeTape::Input)),
            },
        })();
        let (out, tape) = step.map_err(|e| e.at_node(&node.name))?;
        outs.push(out);
        tapes.push(if keep_tapes { tape } else { NodeTape::Input });
    }
    Ok((
        outs,
        LayerTape {
            tapes,
            input_index: idx,
        },
        loss,
    ))
}

/// Forward pass with loss; returns the tape needed by [`backward`].
pub fn forward<T: Real>(
    graph: &GraphSpec,
    params: &ModelParams<T>,
    input: &Tensor<T>,
    labels: &[usize],
) -> Result<(LossValue<T>, LayerTape<T>)> {
    let n = input.shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    let (_, tape, loss) = run(graph, params, input, Some(labels), true)?;
    Ok((loss.expect("graph has a loss node"), tape))
}

/// Output of every node except the loss, keyed by node name.
pub fn infer<T: Real>(
    graph: &GraphSpec,
    params: &ModelParams<T>,
    input: &Tensor<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let (outs, _, _) = run(graph, params, input, None, false)?;
    Ok(graph
        .nodes
        .iter()
        .zip(outs)
        .filter_map(|(n, o)| o.map(|t| (n.name.clone(), t)))
        .collect())
}

/// Logits `[N, C]` for a batch.
pub fn logits<T: Real>(
    graph: &GraphSpec,
    params: &ModelParams<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>> {
    let name = graph
        .logits_node()
        .ok_or_else(|| Error::Graph("graph has no logits node".into()))?
        .name
        .clone();
    let mut outs = infer(graph, params, input)?;
    Ok(outs.remove(&name).expect("logits computed"))
}

pub fn backward<T: Real>(graph: &GraphSpec, tape: &LayerTape<T>) -> Result<Gradients<T>> {
    backward_with(graph, tape, &BackwardOptions::default())
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => *acc = acc.add(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

pub fn backward_with<T: Real>(
    graph: &GraphSpec,
    tape: &LayerTape<T>,
    opts: &BackwardOptions,
) -> Result<Gradients<T>> {
    if tape.tapes.len() != graph.nodes.len()
        || !tape.tapes.iter().any(|t| matches!(t, NodeTape::Loss(_)))
    {
        return Err(Error::MissingTape);
    }
    let blocked: HashSet<(usize, usize)> = opts
        .blocked_edges
        .iter()
        .map(|(c, p)| {
            match (graph.index_of(c), graph.index_of(p)) {
                (Some(ci), Some(pi)) => Ok((ci, pi)),
                _ => Err(Error::Graph(format!("unknown edge {c:?} <- {p:?}"))),
            }
        })
        .collect::<Result<_>>()?;

    let n_nodes = graph.nodes.len();
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; n_nodes];
    let mut param_grads = BTreeMap::new();
    let mut activations = BTreeMap::new();

    for i in (0..n_nodes).rev() {
        let node = &graph.nodes[i];
        let upstream = grads[i].take();
        let send = |j: usize, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
            let producer = tape.input_index[i][j];
            if blocked.contains(&(i, producer)) {
                return Ok(());
            }
            accumulate(&mut grads[producer], g)
        };
        let name = |s: &str| format!("{}.{s}", node.name);
        let step = (|| -> Result<()> {
            match (&tape.tapes[i], upstream.as_ref()) {
                (NodeTape::Loss(t), _) => send(0, t.backward(T::one())?, &mut grads)?,
                (NodeTape::Input, _) => {}
                (NodeTape::Conv(t), Some(g)) => {
                    let cg = t.backward(g)?;
                    param_grads.insert(name("weight"), cg.kernel);
                    param_grads.insert(name("bias"), cg.bias);
                    send(0, cg.input, &mut grads)?;
                }
                (NodeTape::Fc(t), Some(g)) => {
                    let lg = t.backward(g)?;
                    param_grads.insert(name("weight"), lg.weight);
                    param_grads.insert(name("bias"), lg.bias);
                    send(0, lg.input, &mut grads)?;
                }
                (NodeTape::Fuse(t), Some(g)) => {
                    let fg = t.backward(g)?;
                    if let Some(w) = fg.weights {
                        param_grads.insert(name("weight"), w);
                    }
                    if let Some(b) = fg.bias {
                        param_grads.insert(name("bias"), b);
                    }
                    send(0, fg.stack, &mut grads)?;
                }
                (NodeTape::Pool(t), Some(g)) => send(0, t.backward(g)?, &mut grads)?,
                (NodeTape::Relu(t), Some(g)) => send(0, t.backward(g)?, &mut grads)?,
                (NodeTape::Gap(t), Some(g)) => send(0, t.backward(g)?, &mut grads)?,
                (NodeTape::Stack, Some(g)) => {
                    for (j, part) in fusion::unstack(g)?.into_iter().enumerate() {
                        send(j, part, &mut grads)?;
                    }
                }
                // No gradient reached this node (every consumer edge blocked).
                (_, None) => {}
            }
            Ok(())
        })();
        step.map_err(|e| e.at_node(&node.name))?;
        if opts.keep_activation_grads {
            if let Some(g) = upstream {
                activations.insert(node.name.clone(), g);
            }
        }
    }

    // Parameters cut off from the loss still get an (all-zero) gradient.
    for spec in graph.param_specs()? {
        if !param_grads.contains_key(&spec.name) {
            param_grads.insert(spec.name.clone(), Tensor::zeros(&spec.shape)?);
        }
    }
    Ok(Gradients {
        params: param_grads,
        activations,
    })
}
