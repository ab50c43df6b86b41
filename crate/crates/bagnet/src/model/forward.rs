//! Forward pass: guidance blocks and the full two-branch network.

use super::{BgbParams, ConvParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, Scalar, Shape, Tensor, Var};

/// Whether batch norm uses batch statistics (and updates running moments)
/// or the stored running moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Test hooks threaded through the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hooks<T> {
    /// Replace every attention map with this constant. `Some(1.0)` turns the
    /// calibration products into exact identities.
    pub force_alpha: Option<T>,
}

/// Tape handles for one conv layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BgbVars {
    pub fuse_multi: ConvVars,
    pub fuse_full: ConvVars,
    pub proj_full: ConvVars,
    pub proj_multi: ConvVars,
}

/// Tape handles for every learnable tensor, in declaration order.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub stem_full: ConvVars,
    pub stem_multi: ConvVars,
    pub full_layers: Vec<ConvVars>,
    pub ms_layers: Vec<ConvVars>,
    pub bgbs: Vec<BgbVars>,
    pub head: ConvVars,
}

impl ModelVars {
    /// Push every learnable tensor onto the tape as a leaf.
    pub fn stage<T: Scalar>(
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        requires_grad: bool,
    ) -> ModelVars {
        let conv = |g: &mut Graph<T>, c: &ConvParams<T>| ConvVars {
            weight: g.leaf(c.weight.clone(), requires_grad),
            bias: g.leaf(c.bias.clone(), requires_grad),
            gamma: c.norm.as_ref().map(|n| g.leaf(n.gamma.clone(), requires_grad)),
            beta: c.norm.as_ref().map(|n| g.leaf(n.beta.clone(), requires_grad)),
        };
        ModelVars {
            stem_full: conv(g, &params.stem_full),
            stem_multi: conv(g, &params.stem_multi),
            full_layers: params.full_layers.iter().map(|c| conv(g, c)).collect(),
            ms_layers: params.ms_layers.iter().map(|c| conv(g, c)).collect(),
            bgbs: params
                .bgbs
                .iter()
                .map(|b| BgbVars {
                    fuse_multi: conv(g, &b.fuse_multi),
                    fuse_full: conv(g, &b.fuse_full),
                    proj_full: conv(g, &b.proj_full),
                    proj_multi: conv(g, &b.proj_multi),
                })
                .collect(),
            head: conv(g, &params.head),
        }
    }

    fn all_convs(&self) -> Vec<&ConvVars> {
        let mut v = vec![&self.stem_full, &self.stem_multi];
        v.extend(self.full_layers.iter());
        v.extend(self.ms_layers.iter());
        for b in &self.bgbs {
            v.push(&b.fuse_multi);
            v.push(&b.fuse_full);
            v.push(&b.proj_full);
            v.push(&b.proj_multi);
        }
        v.push(&self.head);
        v
    }

    /// Collect gradients into a flat vector matching
    /// [`ModelParams::flatten`] order. Fails if any learnable tensor has no
    /// gradient populated.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>) -> Result<Vec<T>> {
        let mut flat = Vec::new();
        let mut push = |v: Var| -> Result<()> {
            match g.grad(v) {
                Some(slice) => {
                    flat.extend_from_slice(slice);
                    Ok(())
                }
                None => Err(Error::Autodiff(
                    "a learnable tensor has no gradient populated; run backward first".into(),
                )),
            }
        };
        for c in self.all_convs() {
            push(c.weight)?;
            push(c.bias)?;
            if let Some(gm) = c.gamma {
                push(gm)?;
            }
            if let Some(bt) = c.beta {
                push(bt)?;
            }
        }
        Ok(flat)
    }
}

/// conv -> batch norm -> rectifier, the repeated unit of both branches.
fn conv_bn_act<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    params: &mut ConvParams<T>,
    vars: &ConvVars,
    mode: Mode,
) -> Result<Var> {
    let mut y = g.conv2d(x, vars.weight, vars.bias)?;
    if let Some(norm) = &mut params.norm {
        let (gamma, beta) = (vars.gamma.expect("norm staged"), vars.beta.expect("norm staged"));
        let bn_mode = match mode {
            Mode::Train => BnMode::Train {
                running: &mut norm.running,
                momentum: norm.momentum,
            },
            Mode::Infer => BnMode::Infer {
                running: &norm.running,
            },
        };
        y = g.batch_norm(y, gamma, beta, norm.eps, bn_mode)?;
    }
    g.relu(y)
}

/// Everything one guidance block computes, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BgbOutputs {
    /// Calibrated full-branch features, input to the next full-scale conv.
    pub full_out: Var,
    /// Calibrated multi-branch features, input to the next multi-scale conv.
    pub multi_out: Var,
    /// Attention map squeezed from the downsampled full-branch features;
    /// gates the fused multi-scale features.
    pub alpha_full: Var,
    /// Attention map squeezed from the upsampled multi-branch features;
    /// gates the fused full-scale features.
    pub alpha_multi: Var,
    /// Fused multi-scale features before gating.
    pub fused_multi: Var,
    /// Fused full-scale features before gating.
    pub fused_full: Var,
}

/// One bidirectional guidance block.
///
/// The full-branch features are pooled down `2^gap` to the multi branch's
/// resolution, concatenated with them and fused by a conv; a 1x1 projection
/// of the pooled features plus a sigmoid yields the attention map that
/// rescales the fusion. The mirrored path runs with the multi-branch
/// features upsampled to full resolution. Both attention maps are returned
/// alongside the calibrated features.
#[allow(clippy::too_many_arguments)]
pub fn bgb_forward<T: Scalar>(
    g: &mut Graph<T>,
    full: Var,
    multi: Var,
    params: &mut BgbParams<T>,
    vars: &BgbVars,
    gap: usize,
    mode: Mode,
    hooks: &Hooks<T>,
) -> Result<BgbOutputs> {
    let factor = 1usize << gap;

    // full -> multi direction
    let full_small = g.downsample2(full, factor)?;
    let cat_multi = g.concat_channels(multi, full_small)?;
    let fused_multi = conv_bn_act(g, cat_multi, &mut params.fuse_multi, &vars.fuse_multi, mode)?;
    let alpha_full = attention(g, full_small, &vars.proj_full, hooks)?;
    let multi_out = g.broadcast_mul(fused_multi, alpha_full)?;

    // multi -> full direction
    let multi_big = g.upsample2(multi, factor)?;
    let cat_full = g.concat_channels(full, multi_big)?;
    let fused_full = conv_bn_act(g, cat_full, &mut params.fuse_full, &vars.fuse_full, mode)?;
    let alpha_multi = attention(g, multi_big, &vars.proj_multi, hooks)?;
    let full_out = g.broadcast_mul(fused_full, alpha_multi)?;

    Ok(BgbOutputs {
        full_out,
        multi_out,
        alpha_full,
        alpha_multi,
        fused_multi,
        fused_full,
    })
}

fn attention<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    proj: &ConvVars,
    hooks: &Hooks<T>,
) -> Result<Var> {
    if let Some(forced) = hooks.force_alpha {
        let s = g.value(features).shape();
        let shape = Shape { n: s.n, c: 1, h: s.h, w: s.w };
        return Ok(g.constant(Tensor::full(shape, forced)));
    }
    let squeezed = g.conv2d(features, proj.weight, proj.bias)?;
    g.sigmoid(squeezed)
}

/// Result of a full forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Probability mask, `(n, 1, H, W)`, values in the open interval (0,1).
    pub mask: Var,
    /// Leaf handles for gradient extraction.
    pub vars: ModelVars,
    /// Per-block inspection data, in stage order.
    pub bgbs: Vec<BgbOutputs>,
}

/// Run the whole network on a batch of images.
///
/// Stage `s` (0-based) applies one conv to each branch and couples the
/// results through guidance block `s`; the multi branch is pooled on the way
/// into stages 1-4 and unpooled into stages 5-8. The ninth multi-scale conv
/// closes the decoder at full resolution, and the head maps the
/// concatenation of both branch outputs through a 1x1 conv and a sigmoid.
pub fn bagnet_forward<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ModelParams<T>,
    image: Var,
    mode: Mode,
    hooks: &Hooks<T>,
) -> Result<ForwardPass> {
    let config = params.config;
    config.validate()?;
    let shape = g.value(image).shape();
    if shape.c != config.input_channels {
        return Err(Error::ShapeMismatch {
            op: "bagnet_forward",
            lhs: format!("input {shape}"),
            rhs: format!("{} input channels expected", config.input_channels),
        });
    }
    let div = config.pool_factor();
    if !shape.h.is_multiple_of(div) || !shape.w.is_multiple_of(div) {
        return Err(Error::Config(format!(
            "input size {}x{} must be divisible by {div}",
            shape.h, shape.w
        )));
    }

    let vars = ModelVars::stage(g, params, mode == Mode::Train);
    let gaps = config.bgb_gaps();

    let mut full = conv_bn_act(g, image, &mut params.stem_full, &vars.stem_full, mode)?;
    let mut multi = conv_bn_act(g, image, &mut params.stem_multi, &vars.stem_multi, mode)?;

    let mut bgbs = Vec::with_capacity(config.n_bgb);
    for (s, &gap) in gaps.iter().enumerate() {
        if s >= 1 && s <= config.n_down {
            multi = g.downsample2(multi, 2)?;
        } else if s > config.n_down {
            multi = g.upsample2(multi, 2)?;
        }
        full = conv_bn_act(g, full, &mut params.full_layers[s], &vars.full_layers[s], mode)?;
        multi = conv_bn_act(g, multi, &mut params.ms_layers[s], &vars.ms_layers[s], mode)?;
        let out = bgb_forward(
            g,
            full,
            multi,
            &mut params.bgbs[s],
            &vars.bgbs[s],
            gap,
            mode,
            hooks,
        )
        .map_err(|e| e.context(format!("guidance block {s}")))?;
        full = out.full_out;
        multi = out.multi_out;
        bgbs.push(out);
    }

    // decoder-closing conv, back at full resolution
    let last = config.multi_scale_depth - 1;
    multi = g.upsample2(multi, 2)?;
    multi = conv_bn_act(g, multi, &mut params.ms_layers[last], &vars.ms_layers[last], mode)?;

    let head_in = g.concat_channels(full, multi)?;
    let logits = g.conv2d(head_in, vars.head.weight, vars.head.bias)?;
    let mask = g.sigmoid(logits)?;

    Ok(ForwardPass { mask, vars, bgbs })
}
