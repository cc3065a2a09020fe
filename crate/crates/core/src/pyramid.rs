//! Multi-scale detector network: toy backbone, top-down fusion, context
//! enhancement module and shared classification/regression heads.
//!
//! Every stage exposes an explicit forward pass that returns a cache and a
//! backward pass that consumes it; parameters and their gradients live in
//! [`ParamSet`]s laid out by [`Detector`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::LevelGrid;
use crate::error::{check_dim, Error, Result};
use crate::nn::{
    add_elementwise, concat_channels, relu_backward, relu_forward, split_channels, Conv2d, ConvSpec, ParamSet, Real,
    Tensor,
};

/// Prior foreground probability used to initialise the classification bias.
pub const CLS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    pub input_size: usize,
    pub num_levels: usize,
    pub strides: Vec<usize>,
    /// Backbone channel width per level.
    pub channels: Vec<usize>,
    /// Width entering the context module and the heads; must be divisible by 3.
    pub cem_channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    pub cem_enabled: bool,
    pub fpn_enabled: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            input_size: 128,
            num_levels: 6,
            strides: vec![4, 8, 16, 32, 64, 128],
            channels: vec![48; 6],
            cem_channels: 96,
            head_channels: 48,
            num_classes: 1,
            cem_enabled: true,
            fpn_enabled: true,
        }
    }
}

impl PyramidConfig {
    /// Same layout with uniform backbone width `backbone`, context/head width
    /// `neck` and head hidden width `head`.
    pub fn with_widths(mut self, backbone: usize, neck: usize, head: usize) -> Self {
        self.channels = vec![backbone; self.num_levels];
        self.cem_channels = neck;
        self.head_channels = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.num_levels == 0 || self.strides.len() != self.num_levels {
            return err(format!("num_levels {} but {} strides", self.num_levels, self.strides.len()));
        }
        if self.channels.len() != self.num_levels {
            return err(format!("num_levels {} but {} channel widths", self.num_levels, self.channels.len()));
        }
        if self.strides.windows(2).any(|w| w[1] <= w[0]) {
            return err(format!("strides must be strictly increasing: {:?}", self.strides));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s == 0 || !self.input_size.is_multiple_of(s)) {
            return err(format!("input_size {} not divisible by stride {s}", self.input_size));
        }
        let s0 = self.strides[0];
        if s0 < 2 || !s0.is_power_of_two() || self.strides.windows(2).any(|w| w[1] != 2 * w[0]) {
            return err(format!(
                "backbone needs a power-of-two first stride ≥ 2 and doubling strides, got {:?}",
                self.strides
            ));
        }
        if self.channels.contains(&0) || self.head_channels == 0 || self.num_classes == 0 {
            return err("channel counts and num_classes must be positive".into());
        }
        if self.cem_channels == 0 || !self.cem_channels.is_multiple_of(3) {
            return err(format!("cem_channels {} must be a positive multiple of 3", self.cem_channels));
        }
        Ok(())
    }

    pub fn grids(&self) -> Vec<LevelGrid> {
        self.strides
            .iter()
            .map(|&s| LevelGrid {
                stride: s,
                size: self.input_size / s,
            })
            .collect()
    }

    /// Number of stride-2 stem convolutions before the first level block.
    pub fn stem_depth(&self) -> usize {
        self.strides[0].trailing_zeros() as usize - 1
    }

    /// Closed-form parameter count.
    ///
    /// With `conv(i, o, k) = k²·i·o + o`, backbone widths `C_l`, context
    /// width `M`, head width `H` and `K` classes:
    /// - stem: `conv(3, C_0, 3) + (depth − 1)·conv(C_0, C_0, 3)`
    /// - level blocks: `conv(C_{l−1}, C_l, 3) + conv(C_l, C_l, 3)` with `C_{−1}` the stem output (or 3)
    /// - fusion, per `i < k−1`: `conv(C_{i+1}, C_i, 1) + 16·C_i²` (bias-free deconvolution)
    /// - projection where `C_l ≠ M`: `conv(C_l, M, 1)`
    /// - context module, per level: `Σ_{b=1..3} b·conv(M/3, M/3, 3)`
    /// - heads (shared): `conv(M, H, 3) + conv(H, H, 3) + conv(H, K, 1)` plus the same with 4 outputs
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| k * k * i * o + o;
        let c = &self.channels;
        let m = self.cem_channels;
        let h = self.head_channels;
        let depth = self.stem_depth();
        let mut total = 0;
        if depth > 0 {
            total += conv(3, c[0], 3) + (depth - 1) * conv(c[0], c[0], 3);
        }
        for l in 0..self.num_levels {
            let cin = if l == 0 {
                if depth > 0 {
                    c[0]
                } else {
                    3
                }
            } else {
                c[l - 1]
            };
            total += conv(cin, c[l], 3) + conv(c[l], c[l], 3);
        }
        if self.fpn_enabled {
            for i in 0..self.num_levels - 1 {
                total += conv(c[i + 1], c[i], 1) + 16 * c[i] * c[i];
            }
        }
        total += c.iter().filter(|&&cl| cl != m).map(|&cl| conv(cl, m, 1)).sum::<usize>();
        if self.cem_enabled {
            total += self.num_levels * 6 * conv(m / 3, m / 3, 3);
        }
        total += conv(m, h, 3) + conv(h, h, 3) + conv(h, self.num_classes, 1);
        total += conv(m, h, 3) + conv(h, h, 3) + conv(h, 4, 1);
        total
    }
}

/// Per-level feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Real> {
    pub levels: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelOutput<T: Real> {
    /// `(n, num_classes, H, W)` logits.
    pub cls: Tensor<T>,
    /// `(n, 4, H, W)` box deltas.
    pub reg: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T: Real> {
    pub levels: Vec<LevelOutput<T>>,
}

impl<T: Real> HeadOutputs<T> {
    pub fn zeros_like(&self) -> Self {
        HeadOutputs {
            levels: self
                .levels
                .iter()
                .map(|l| LevelOutput {
                    cls: Tensor::zeros(l.cls.shape()),
                    reg: Tensor::zeros(l.reg.shape()),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Followed by ReLU: `U(±√(6/fan_in))`.
    Relu,
    /// Linear output: `U(±√(3/fan_in))`.
    Linear,
    /// Classification logits: linear weights, prior-probability bias.
    Logits,
}

#[derive(Clone, Debug)]
struct LayerDef {
    conv: Conv2d,
    init: Init,
}

#[derive(Clone, Debug)]
struct Heads {
    cls: [Conv2d; 3],
    reg: [Conv2d; 3],
}

/// Network layout: which parameter indices each layer uses.
#[derive(Clone, Debug)]
pub struct Detector {
    config: PyramidConfig,
    names: Vec<(String, [usize; 4])>,
    defs: Vec<LayerDef>,
    stem: Vec<Conv2d>,
    blocks: Vec<[Conv2d; 2]>,
    smooth: Vec<Conv2d>,
    upsample: Vec<Conv2d>,
    project: Vec<Option<Conv2d>>,
    cem: Vec<[Vec<Conv2d>; 3]>,
    heads: Heads,
}

struct LayoutBuilder {
    names: Vec<(String, [usize; 4])>,
    defs: Vec<LayerDef>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, spec: ConvSpec, bias: bool, init: Init) -> Conv2d {
        self.names.push((format!("{name}.weight"), spec.weight_shape()));
        let weight = self.names.len() - 1;
        let bias = bias.then(|| {
            self.names.push((format!("{name}.bias"), [spec.out_channels, 1, 1, 1]));
            self.names.len() - 1
        });
        let conv = Conv2d { spec, weight, bias };
        self.defs.push(LayerDef {
            conv: conv.clone(),
            init,
        });
        conv
    }
}

/// Cached activations of one `conv → ReLU` step.
#[derive(Clone, Debug)]
struct ConvReluCache<T: Real> {
    input: Tensor<T>,
    pre: Tensor<T>,
}

fn conv_relu<T: Real>(conv: &Conv2d, p: &ParamSet<T>, x: Tensor<T>) -> Result<(Tensor<T>, ConvReluCache<T>)> {
    let pre = conv.forward(p, &x)?;
    let out = relu_forward(&pre);
    Ok((out, ConvReluCache { input: x, pre }))
}

fn conv_relu_backward<T: Real>(
    conv: &Conv2d,
    p: &ParamSet<T>,
    cache: &ConvReluCache<T>,
    grad: &Tensor<T>,
    g: &mut ParamSet<T>,
) -> Result<Tensor<T>> {
    let gpre = relu_backward(&cache.pre, grad)?;
    conv.backward(p, &cache.input, &gpre, g)
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T: Real> {
    stem: Vec<ConvReluCache<T>>,
    blocks: Vec<[ConvReluCache<T>; 2]>,
}

#[derive(Clone, Debug)]
pub struct FuseCache<T: Real> {
    /// `(smooth input, upsample input)` per fused level `i < k−1`.
    levels: Vec<(Tensor<T>, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct CemCache<T: Real> {
    /// Per branch, per stacked conv: (input, pre-activation).
    branches: Vec<Vec<(Tensor<T>, Tensor<T>)>>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T: Real> {
    input: Tensor<T>,
    cls: [ConvReluCache<T>; 2],
    cls_last: Tensor<T>,
    reg: [ConvReluCache<T>; 2],
    reg_last: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T: Real> {
    backbone: BackboneCache<T>,
    fuse: Option<FuseCache<T>>,
    project_inputs: Vec<Tensor<T>>,
    cem: Vec<Option<CemCache<T>>>,
    heads: Vec<HeadCache<T>>,
}

impl Detector {
    pub fn new(config: PyramidConfig) -> Result<Self> {
        config.validate()?;
        let k = config.num_levels;
        let c = config.channels.clone();
        let m = config.cem_channels;
        let h = config.head_channels;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            defs: Vec::new(),
        };

        let mut stem = Vec::new();
        let mut width = 3;
        for i in 0..config.stem_depth() {
            let spec = ConvSpec::new(width, c[0], 3).stride(2).padding(1);
            stem.push(b.conv(&format!("stem.{i}"), spec, true, Init::Relu));
            width = c[0];
        }
        let mut blocks = Vec::new();
        for (l, &cl) in c.iter().enumerate() {
            let down = b.conv(
                &format!("backbone.{l}.down"),
                ConvSpec::new(width, cl, 3).stride(2).padding(1),
                true,
                Init::Relu,
            );
            let conv = b.conv(&format!("backbone.{l}.conv"), ConvSpec::new(cl, cl, 3).padding(1), true, Init::Relu);
            blocks.push([down, conv]);
            width = cl;
        }
        let (mut smooth, mut upsample) = (Vec::new(), Vec::new());
        if config.fpn_enabled {
            for i in 0..k - 1 {
                smooth.push(b.conv(&format!("fpn.{i}.smooth"), ConvSpec::new(c[i + 1], c[i], 1), true, Init::Linear));
                upsample.push(b.conv(&format!("fpn.{i}.upsample"), ConvSpec::upsample2x(c[i], c[i]), false, Init::Linear));
            }
        }
        let project = c
            .iter()
            .enumerate()
            .map(|(l, &cl)| (cl != m).then(|| b.conv(&format!("project.{l}"), ConvSpec::new(cl, m, 1), true, Init::Linear)))
            .collect();
        let mut cem = Vec::new();
        if config.cem_enabled {
            let cb = m / 3;
            for l in 0..k {
                let branch = |b: &mut LayoutBuilder, depth: usize| -> Vec<Conv2d> {
                    (0..depth)
                        .map(|j| {
                            let spec = ConvSpec::new(cb, cb, 3).padding(depth).dilation(depth);
                            let init = if j + 1 < depth { Init::Relu } else { Init::Linear };
                            b.conv(&format!("cem.{l}.branch{depth}.{j}"), spec, true, init)
                        })
                        .collect()
                };
                cem.push([branch(&mut b, 1), branch(&mut b, 2), branch(&mut b, 3)]);
            }
        }
        let subnet = |b: &mut LayoutBuilder, name: &str, out: usize, last: Init| -> [Conv2d; 3] {
            [
                b.conv(&format!("head.{name}.0"), ConvSpec::new(m, h, 3).padding(1), true, Init::Relu),
                b.conv(&format!("head.{name}.1"), ConvSpec::new(h, h, 3).padding(1), true, Init::Relu),
                b.conv(&format!("head.{name}.out"), ConvSpec::new(h, out, 1), true, last),
            ]
        };
        let heads = Heads {
            cls: subnet(&mut b, "cls", config.num_classes, Init::Logits),
            reg: subnet(&mut b, "reg", 4, Init::Linear),
        };
        Ok(Detector {
            config,
            names: b.names,
            defs: b.defs,
            stem,
            blocks,
            smooth,
            upsample,
            project,
            cem,
            heads,
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    /// `(name, shape)` of every parameter tensor in layout order.
    pub fn param_layout(&self) -> &[(String, [usize; 4])] {
        &self.names
    }

    pub fn zero_params<T: Real>(&self) -> ParamSet<T> {
        let mut p = ParamSet::default();
        for (name, shape) in &self.names {
            p.push(name.clone(), Tensor::zeros(*shape));
        }
        p
    }

    /// Fan-in scaled uniform weights, zero biases except the classification
    /// output, whose bias starts at `logit(CLS_PRIOR)`.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zero_params::<T>();
        for def in &self.defs {
            let spec = def.conv.spec;
            let mut fan_in = spec.in_channels * spec.kernel * spec.kernel;
            if spec.transposed {
                fan_in /= spec.stride * spec.stride;
            }
            let gain = if def.init == Init::Relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in.max(1) as f64).sqrt();
            for v in p.get_mut(def.conv.weight).data_mut() {
                *v = T::of(rng.random_range(-bound..bound));
            }
            if let (Init::Logits, Some(bi)) = (def.init, def.conv.bias) {
                let prior = (CLS_PRIOR / (1.0 - CLS_PRIOR)).ln();
                p.get_mut(bi).fill(T::of(prior));
            }
        }
        p
    }

    fn check_params<T: Real>(&self, p: &ParamSet<T>) -> Result<()> {
        check_dim("Detector", "parameter tensors", self.names.len(), p.len())?;
        for (i, (name, shape)) in self.names.iter().enumerate() {
            if p.get(i).shape() != *shape {
                return Err(Error::Geometry {
                    op: "Detector",
                    msg: format!("parameter {name} has shape {:?}, expected {shape:?}", p.get(i).shape()),
                });
            }
        }
        Ok(())
    }

    pub fn backbone_forward<T: Real>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<(FeaturePyramid<T>, BackboneCache<T>)> {
        self.check_params(p)?;
        let size = self.config.input_size;
        check_dim("backbone_forward", "input height", size, image.h())?;
        check_dim("backbone_forward", "input width", size, image.w())?;
        check_dim("backbone_forward", "input channels", 3, image.c())?;
        let mut x = image.clone();
        let mut stem = Vec::new();
        for conv in &self.stem {
            let (y, cache) = conv_relu(conv, p, x)?;
            stem.push(cache);
            x = y;
        }
        let mut levels = Vec::new();
        let mut blocks = Vec::new();
        for [down, conv] in &self.blocks {
            let (y, c0) = conv_relu(down, p, x)?;
            let (s, c1) = conv_relu(conv, p, y)?;
            blocks.push([c0, c1]);
            levels.push(s.clone());
            x = s;
        }
        Ok((FeaturePyramid { levels }, BackboneCache { stem, blocks }))
    }

    /// Backpropagates per-level gradients of the backbone outputs.
    pub fn backbone_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &BackboneCache<T>,
        mut grads: Vec<Tensor<T>>,
        g: &mut ParamSet<T>,
    ) -> Result<()> {
        let k = self.blocks.len();
        check_dim("backbone_backward", "levels", k, grads.len())?;
        let mut carry: Option<Tensor<T>> = None;
        for l in (0..k).rev() {
            let mut gl = std::mem::replace(&mut grads[l], Tensor::zeros([0, 0, 0, 0]));
            if let Some(c) = carry.take() {
                gl.add_assign(&c)?;
            }
            let [down, conv] = &self.blocks[l];
            let [c0, c1] = &cache.blocks[l];
            let gy = conv_relu_backward(conv, p, c1, &gl, g)?;
            carry = Some(conv_relu_backward(down, p, c0, &gy, g)?);
        }
        let mut gx = carry.expect("at least one level");
        for (conv, c) in self.stem.iter().zip(&cache.stem).rev() {
            gx = conv_relu_backward(conv, p, c, &gx, g)?;
        }
        Ok(())
    }

    /// `E_{k−1} = S_{k−1}`, `E_i = S_i + upsample(smooth(S_{i+1}))`.
    pub fn topdown_fuse<T: Real>(&self, p: &ParamSet<T>, pyramid: &FeaturePyramid<T>) -> Result<(FeaturePyramid<T>, FuseCache<T>)> {
        if !self.config.fpn_enabled {
            return Err(Error::Config("topdown_fuse called with fpn_enabled = false".into()));
        }
        let s = &pyramid.levels;
        check_dim("topdown_fuse", "levels", self.config.num_levels, s.len())?;
        for i in 0..s.len() - 1 {
            if s[i].h() != 2 * s[i + 1].h() || s[i].w() != 2 * s[i + 1].w() {
                return Err(Error::Geometry {
                    op: "topdown_fuse",
                    msg: format!(
                        "level {i} is {}x{} but level {} is {}x{}; adjacent levels must differ by 2x",
                        s[i].h(),
                        s[i].w(),
                        i + 1,
                        s[i + 1].h(),
                        s[i + 1].w()
                    ),
                });
            }
        }
        let mut out = Vec::with_capacity(s.len());
        let mut cache = Vec::with_capacity(s.len() - 1);
        for i in 0..s.len() - 1 {
            let sm = self.smooth[i].forward(p, &s[i + 1])?;
            let up = self.upsample[i].forward(p, &sm)?;
            out.push(add_elementwise(&s[i], &up)?);
            cache.push((s[i + 1].clone(), sm));
        }
        out.push(s[s.len() - 1].clone());
        Ok((FeaturePyramid { levels: out }, FuseCache { levels: cache }))
    }

    /// Maps gradients w.r.t. `E` to gradients w.r.t. `S`.
    pub fn topdown_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &FuseCache<T>,
        grads: Vec<Tensor<T>>,
        g: &mut ParamSet<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut gs = grads.clone();
        for (i, (s_up, sm)) in cache.levels.iter().enumerate() {
            let g_sm = self.upsample[i].backward(p, sm, &grads[i], g)?;
            let g_up = self.smooth[i].backward(p, s_up, &g_sm, g)?;
            gs[i + 1].add_assign(&g_up)?;
        }
        Ok(gs)
    }

    /// Splits channels into three chunks; chunk `b` goes through `b` stacked
    /// 3×3 convolutions with dilation `b` (ReLU between them); outputs are
    /// concatenated back.
    pub fn cem_forward<T: Real>(&self, p: &ParamSet<T>, level: usize, x: &Tensor<T>) -> Result<(Tensor<T>, CemCache<T>)> {
        let branches = self
            .cem
            .get(level)
            .ok_or_else(|| Error::Config(format!("no context module for level {level} (cem_enabled = false?)")))?;
        check_dim("cem_forward", "channels", self.config.cem_channels, x.c())?;
        let chunks = split_channels(x, 3)?;
        let mut outs = Vec::with_capacity(3);
        let mut cache = Vec::with_capacity(3);
        for (chunk, convs) in chunks.into_iter().zip(branches) {
            let mut h = chunk;
            let mut bc = Vec::with_capacity(convs.len());
            for (j, conv) in convs.iter().enumerate() {
                let pre = conv.forward(p, &h)?;
                let next = if j + 1 < convs.len() { relu_forward(&pre) } else { pre.clone() };
                bc.push((h, pre));
                h = next;
            }
            outs.push(h);
            cache.push(bc);
        }
        Ok((concat_channels(&outs)?, CemCache { branches: cache }))
    }

    pub fn cem_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        level: usize,
        cache: &CemCache<T>,
        grad: &Tensor<T>,
        g: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let branches = &self.cem[level];
        let gchunks = split_channels(grad, 3)?;
        let mut gin = Vec::with_capacity(3);
        for ((gc, convs), bc) in gchunks.into_iter().zip(branches).zip(&cache.branches) {
            let mut gh = gc;
            for (j, conv) in convs.iter().enumerate().rev() {
                let (input, pre) = &bc[j];
                if j + 1 < convs.len() {
                    gh = relu_backward(pre, &gh)?;
                }
                gh = conv.backward(p, input, &gh, g)?;
            }
            gin.push(gh);
        }
        concat_channels(&gin)
    }

    fn head_forward<T: Real>(&self, p: &ParamSet<T>, x: &Tensor<T>) -> Result<(LevelOutput<T>, HeadCache<T>)> {
        let [c0, c1, c2] = &self.heads.cls;
        let (a, ca) = conv_relu(c0, p, x.clone())?;
        let (b, cb) = conv_relu(c1, p, a)?;
        let cls = c2.forward(p, &b)?;
        let [r0, r1, r2] = &self.heads.reg;
        let (a, ra) = conv_relu(r0, p, x.clone())?;
        let (rb_out, rb) = conv_relu(r1, p, a)?;
        let reg = r2.forward(p, &rb_out)?;
        Ok((
            LevelOutput { cls, reg },
            HeadCache {
                input: x.clone(),
                cls: [ca, cb],
                cls_last: b,
                reg: [ra, rb],
                reg_last: rb_out,
            },
        ))
    }

    pub fn head_backward<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &HeadCache<T>,
        grad: &LevelOutput<T>,
        g: &mut ParamSet<T>,
    ) -> Result<Tensor<T>> {
        let [c0, c1, c2] = &self.heads.cls;
        let gb = c2.backward(p, &cache.cls_last, &grad.cls, g)?;
        let ga = conv_relu_backward(c1, p, &cache.cls[1], &gb, g)?;
        let mut gx = conv_relu_backward(c0, p, &cache.cls[0], &ga, g)?;
        let [r0, r1, r2] = &self.heads.reg;
        let gb = r2.backward(p, &cache.reg_last, &grad.reg, g)?;
        let ga = conv_relu_backward(r1, p, &cache.reg[1], &gb, g)?;
        gx.add_assign(&conv_relu_backward(r0, p, &cache.reg[0], &ga, g)?)?;
        debug_assert_eq!(gx.shape(), cache.input.shape());
        Ok(gx)
    }

    /// Shared heads applied to every level.
    pub fn heads_forward<T: Real>(&self, p: &ParamSet<T>, pyramid: &FeaturePyramid<T>) -> Result<(HeadOutputs<T>, Vec<HeadCache<T>>)> {
        let mut levels = Vec::with_capacity(pyramid.levels.len());
        let mut caches = Vec::with_capacity(pyramid.levels.len());
        for x in &pyramid.levels {
            let (o, c) = self.head_forward(p, x)?;
            levels.push(o);
            caches.push(c);
        }
        Ok((HeadOutputs { levels }, caches))
    }

    /// Full image → head outputs pass, keeping everything needed for `backward`.
    pub fn forward<T: Real>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<(HeadOutputs<T>, ForwardCache<T>)> {
        let (s, backbone) = self.backbone_forward(p, image)?;
        let (e, fuse) = if self.config.fpn_enabled {
            let (e, c) = self.topdown_fuse(p, &s)?;
            (e, Some(c))
        } else {
            (s, None)
        };
        let mut feats = Vec::with_capacity(e.levels.len());
        let mut project_inputs = Vec::new();
        let mut cem = Vec::new();
        for (l, x) in e.levels.into_iter().enumerate() {
            let x = match &self.project[l] {
                Some(conv) => {
                    let y = conv.forward(p, &x)?;
                    project_inputs.push(x);
                    y
                }
                None => x,
            };
            if self.config.cem_enabled {
                let (y, c) = self.cem_forward(p, l, &x)?;
                cem.push(Some(c));
                feats.push(y);
            } else {
                cem.push(None);
                feats.push(x);
            }
        }
        let (out, heads) = self.heads_forward(p, &FeaturePyramid { levels: feats })?;
        Ok((
            out,
            ForwardCache {
                backbone,
                fuse,
                project_inputs,
                cem,
                heads,
            },
        ))
    }

    /// Gradients of `Σ grads ⊙ forward(p, image)` w.r.t. every parameter.
    pub fn backward<T: Real>(&self, p: &ParamSet<T>, cache: &ForwardCache<T>, grads: &HeadOutputs<T>) -> Result<ParamSet<T>> {
        let mut g = self.zero_params::<T>();
        self.backward_into(p, cache, grads, &mut g)?;
        Ok(g)
    }

    pub fn backward_into<T: Real>(
        &self,
        p: &ParamSet<T>,
        cache: &ForwardCache<T>,
        grads: &HeadOutputs<T>,
        g: &mut ParamSet<T>,
    ) -> Result<()> {
        let k = self.config.num_levels;
        check_dim("Detector::backward", "levels", k, grads.levels.len())?;
        let mut ge = Vec::with_capacity(k);
        let mut proj_iter = cache.project_inputs.iter();
        let mut proj_inputs = Vec::with_capacity(k);
        for l in 0..k {
            proj_inputs.push(if self.project[l].is_some() { proj_iter.next() } else { None });
        }
        for l in 0..k {
            let mut gx = self.head_backward(p, &cache.heads[l], &grads.levels[l], g)?;
            if let Some(c) = &cache.cem[l] {
                gx = self.cem_backward(p, l, c, &gx, g)?;
            }
            if let (Some(conv), Some(input)) = (&self.project[l], proj_inputs[l]) {
                gx = conv.backward(p, input, &gx, g)?;
            }
            ge.push(gx);
        }
        let gs = match &cache.fuse {
            Some(fc) => self.topdown_backward(p, fc, ge, g)?,
            None => ge,
        };
        self.backbone_backward(p, &cache.backbone, gs, g)
    }

    /// Forward pass without caching, for inference.
    pub fn infer<T: Real>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<HeadOutputs<T>> {
        Ok(self.forward(p, image)?.0)
    }
}
