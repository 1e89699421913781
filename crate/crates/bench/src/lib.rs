//! Benchmark fixtures for the criterion suites in `benches/`.

use cfn_core::fusion::{init_fusion, BranchStack, FusionParams};
use cfn_core::model::build_generic_cfn;
use cfn_core::{Fill, FusionKind, GraphSpec, ModelConfig, ModelParams, Tensor};

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::create(shape, Fill::Uniform { seed, lo: -1.0, hi: 1.0 }).expect("valid shape")
}

/// The toy network used by the convergence suite, with or without side branches.
pub fn toy_graph(fusion: Option<FusionKind>) -> GraphSpec {
    build_generic_cfn(&ModelConfig {
        widths: vec![8; 7],
        branch_points: match fusion {
            Some(_) => vec!["pool2".into(), "pool3".into()],
            None => vec![],
        },
        fusion: fusion.unwrap_or(FusionKind::Lc),
        k: None,
        classes: 3,
        in_channels: 3,
    })
    .expect("toy graph is valid")
}

pub fn toy_params(graph: &GraphSpec) -> ModelParams<f32> {
    ModelParams::init(graph, 1).expect("init")
}

/// A nonnegative branch stack `[n, k, s]` and default parameters for `kind`.
pub fn stack_fixture(kind: FusionKind, n: usize, k: usize, s: usize) -> (BranchStack<f32>, FusionParams<f32>) {
    let g = uniform(&[n, k, s], 7).relu();
    (
        BranchStack::from_tensor(g).expect("rank 3"),
        init_fusion(kind, k, s).expect("fusion params"),
    )
}
