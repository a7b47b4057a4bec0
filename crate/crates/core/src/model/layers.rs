//! Graph-level building blocks shared by the extractor and the speaker
//! encoder. Every block reads its weights by name prefix from a
//! [`ParameterSet`], and has a matching `*_layout` describing those weights.

use crate::autodiff::{Float, Graph, Var};
use crate::model::params::{ParamSpec, ParameterSet};

pub const NORM_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;
pub const DOWNSAMPLE_KERNEL: usize = 5;
pub const TCN_KERNEL: usize = 3;

/// A graph bound to the parameter set it reads from.
pub struct Builder<'p, T: Float> {
    pub graph: Graph<'p, T>,
    params: &'p ParameterSet<T>,
}

impl<'p, T: Float> Builder<'p, T> {
    pub fn new(params: &'p ParameterSet<T>) -> Self {
        Self {
            graph: Graph::new(params.tensors()),
            params,
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.index_of(name).is_some()
    }

    /// Panics on unknown names: layouts and builders are kept in lockstep.
    pub fn p(&mut self, name: &str) -> Var {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from set"));
        self.graph.param(i)
    }

    pub fn pointwise(&mut self, name: &str, x: Var) -> Var {
        let w = self.p(name);
        self.graph.matmul(w, x)
    }

    pub fn prelu(&mut self, name: &str, x: Var) -> Var {
        let a = self.p(name);
        self.graph.prelu(x, a)
    }

    pub fn channel_norm(&mut self, prefix: &str, x: Var) -> Var {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        self.graph.channel_norm(x, g, b, NORM_EPS)
    }

    pub fn instance_norm(&mut self, prefix: &str, x: Var) -> Var {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        self.graph.instance_norm(x, g, b, NORM_EPS)
    }

    /// PReLU followed by channel norm, the post-convolution pair used inside blocks.
    pub fn act_norm(&mut self, prefix: &str, x: Var) -> Var {
        let a = self.prelu(&format!("{prefix}.prelu"), x);
        self.channel_norm(&format!("{prefix}.norm"), a)
    }
}

pub fn norm_layout(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::constant(format!("{prefix}.gamma"), channels, 1, 1.0),
        ParamSpec::constant(format!("{prefix}.beta"), channels, 1, 0.0),
    ]
}

fn act_norm_layout(prefix: &str, channels: usize) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::constant(format!("{prefix}.prelu"), 1, 1, PRELU_INIT)];
    v.extend(norm_layout(&format!("{prefix}.norm"), channels));
    v
}

/// Residual temporal block: 1x1 expand, PReLU, norm, depthwise dilated
/// conv, PReLU, norm, 1x1 contract, plus the input.
pub fn tcn_block_layout(prefix: &str, channels: usize, hidden: usize) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::conv(format!("{prefix}.expand.w"), hidden, channels)];
    v.extend(act_norm_layout(&format!("{prefix}.expand"), hidden));
    v.push(ParamSpec::fan_in(
        format!("{prefix}.dw.w"),
        hidden,
        TCN_KERNEL,
        TCN_KERNEL,
    ));
    v.extend(act_norm_layout(&format!("{prefix}.dw"), hidden));
    v.push(ParamSpec::conv(format!("{prefix}.contract.w"), channels, hidden));
    v
}

pub fn tcn_block<T: Float>(b: &mut Builder<'_, T>, prefix: &str, x: Var, dilation: usize) -> Var {
    let h = b.pointwise(&format!("{prefix}.expand.w"), x);
    let h = b.act_norm(&format!("{prefix}.expand"), h);
    let w = b.p(&format!("{prefix}.dw.w"));
    let h = b.graph.depthwise_conv(h, w, 1, dilation, dilation * (TCN_KERNEL - 1) / 2);
    let h = b.act_norm(&format!("{prefix}.dw"), h);
    let out = b.pointwise(&format!("{prefix}.contract.w"), h);
    b.graph.add(x, out)
}

/// Multi-resolution residual block: expand to `expanded` channels,
/// `depth` stride-2 depthwise downsamplings, nearest-neighbour upsampling
/// with same-scale skip additions, contract back, add the input.
pub fn u_conv_block_layout(
    prefix: &str,
    channels: usize,
    expanded: usize,
    depth: usize,
) -> Vec<ParamSpec> {
    let mut v = vec![ParamSpec::conv(format!("{prefix}.expand.w"), expanded, channels)];
    v.extend(act_norm_layout(&format!("{prefix}.expand"), expanded));
    for i in 1..=depth {
        v.push(ParamSpec::fan_in(
            format!("{prefix}.down{i}.w"),
            expanded,
            DOWNSAMPLE_KERNEL,
            DOWNSAMPLE_KERNEL,
        ));
        v.extend(act_norm_layout(&format!("{prefix}.down{i}"), expanded));
    }
    v.push(ParamSpec::conv(format!("{prefix}.contract.w"), channels, expanded));
    v
}

pub fn u_conv_block<T: Float>(b: &mut Builder<'_, T>, prefix: &str, x: Var, depth: usize) -> Var {
    let e = b.pointwise(&format!("{prefix}.expand.w"), x);
    let e = b.act_norm(&format!("{prefix}.expand"), e);
    let mut scales = Vec::with_capacity(depth + 1);
    scales.push(e);
    for i in 1..=depth {
        let w = b.p(&format!("{prefix}.down{i}.w"));
        let prev = *scales.last().expect("non-empty");
        let d = b
            .graph
            .depthwise_conv(prev, w, 2, 1, (DOWNSAMPLE_KERNEL - 1) / 2);
        let d = b.act_norm(&format!("{prefix}.down{i}"), d);
        scales.push(d);
    }
    let mut y = scales[depth];
    for i in (0..depth).rev() {
        let target = scales[i];
        let len = b.graph.shape(target).1;
        let up = b.graph.upsample(y, len);
        y = b.graph.add(up, target);
    }
    let out = b.pointwise(&format!("{prefix}.contract.w"), y);
    b.graph.add(x, out)
}

/// Length after one stride-2 downsampling step (`ceil(n / 2)`).
pub fn downsampled_len(n: usize) -> usize {
    let pad = (DOWNSAMPLE_KERNEL - 1) / 2;
    (n + 2 * pad - DOWNSAMPLE_KERNEL) / 2 + 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsampled_len_is_ceil_half() {
        for n in 1..100 {
            assert_eq!(downsampled_len(n), n.div_ceil(2));
        }
    }

    #[test]
    fn layouts_have_unique_names() {
        let mut v = tcn_block_layout("t", 4, 8);
        v.extend(u_conv_block_layout("u", 4, 8, 3));
        let set: std::collections::HashSet<_> = v.iter().map(|s| s.name.clone()).collect();
        assert_eq!(set.len(), v.len());
    }
}
