use super::{GraphSpec, LayerSpec, PoolOp, StageSpec, StridePlacement};

fn stem() -> StageSpec {
    StageSpec {
        name: "conv1".into(),
        layers: vec![
            LayerSpec::Conv {
                in_channels: 3,
                out_channels: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                bias: false,
                batch_norm: true,
                repeat: 1,
            },
            LayerSpec::Pool { kernel: 3, stride: 2, padding: 1, op: PoolOp::Max },
        ],
    }
}

fn classifier() -> StageSpec {
    StageSpec {
        name: "fc".into(),
        layers: vec![LayerSpec::GlobalPool, LayerSpec::Fc { in_features: 2048, out_features: 1000, bias: true }],
    }
}

fn bottleneck_net(name: &str, mids: [usize; 4], groups: usize, se: Option<usize>, stride_on: StridePlacement) -> GraphSpec {
    let outs = [256, 512, 1024, 2048];
    let blocks = [3, 4, 6, 3];
    let mut stages = vec![stem()];
    let mut cin = 64;
    for i in 0..4 {
        stages.push(StageSpec {
            name: format!("conv{}_x", i + 2),
            layers: vec![LayerSpec::ResidualBlock {
                in_channels: cin,
                mid_channels: mids[i],
                out_channels: outs[i],
                stride: if i == 0 { 1 } else { 2 },
                groups,
                se_reduction: se,
                stride_on,
                repeat: blocks[i],
            }],
        });
        cin = outs[i];
    }
    stages.push(classifier());
    GraphSpec { name: name.into(), input_channels: 3, stages }
}

/// ResNet-50 with the stride on the leading 1×1 of each downsampling block.
pub fn resnet50_spec() -> GraphSpec {
    resnet50_spec_with(StridePlacement::First)
}

pub fn resnet50_spec_with(stride_on: StridePlacement) -> GraphSpec {
    bottleneck_net("resnet50", [64, 128, 256, 512], 1, None, stride_on)
}

/// SE-ResNeXt-50 (32×4d): 32-group 3×3 convs, SE with reduction 16 in every block.
pub fn se_resnext50_spec() -> GraphSpec {
    se_resnext50_spec_with(StridePlacement::First)
}

pub fn se_resnext50_spec_with(stride_on: StridePlacement) -> GraphSpec {
    bottleneck_net("se_resnext50", [128, 256, 512, 1024], 32, Some(16), stride_on)
}
