//! The fusion segmentation network and its ablation variants.
//!
//! Both encoder branches are ResNet-18-style backbones (post-activation basic
//! blocks). After every stage the depth features are merged into the RGB
//! branch; the depth branch itself continues from its own unfused output.
//! A pyramid pooling block sits on the stride-32 fused map and a three-stage
//! decoder climbs back to stride 4 using skips tapped from the RGB branch
//! before the final ReLU of each stage, followed by a 4x bilinear resize.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfnet_autodiff::{BnMode, PoolOp, RunningStats, Tape, Tensor, Var};

use crate::config::{ModelConfig, Variant};
use crate::error::{config, Result};

/// Optimizer group of a parameter. Backbone weights are the ones that would
/// come from ImageNet pretraining, and get the reduced learning rate and
/// weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Pretrained,
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
    pub group: ParamGroup,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug)]
pub struct NamedStats {
    pub name: String,
    pub stats: RunningStats,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    conv: Conv,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
}

/// Squeeze-and-excitation gate: global pool, 1x1 conv, sigmoid.
#[derive(Clone, Copy, Debug)]
struct Gate {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum StageMix {
    /// Single-branch variants: gate the RGB features on their own.
    Se(Gate),
    /// Gate both branches and add; `halve` divides the sum by two.
    Afc { rgb: Gate, depth: Gate, halve: bool },
    /// Gate the 2C concatenation, then a 1x1 conv back to C channels.
    Concat { gate: Gate, restore: Conv },
}

#[derive(Clone, Debug)]
struct Spp {
    bottleneck: ConvBn,
    levels: Vec<(usize, ConvBn)>,
    fuse: ConvBn,
}

#[derive(Clone, Debug)]
struct Upsample {
    skip_stage: usize,
    skip: ConvBn,
    blend: ConvBn,
}

#[derive(Clone, Debug)]
struct Plan {
    rgb: Backbone,
    depth: Option<Backbone>,
    mix: Vec<StageMix>,
    spp: Spp,
    ups: Vec<Upsample>,
    classifier: Conv,
}

#[derive(Default)]
struct Registry {
    params: Vec<ParamSpec>,
    stats: Vec<(String, usize)>,
}

impl Registry {
    fn param(&mut self, name: String, dims: Vec<usize>, init: Init, group: ParamGroup) -> usize {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate {name}");
        self.params.push(ParamSpec {
            name,
            dims,
            init,
            group,
        });
        self.params.len() - 1
    }

    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Conv {
        let fan_in = cin * k * k;
        let weight = self.param(
            format!("{name}.weight"),
            vec![cout, cin, k, k],
            Init::Kaiming { fan_in },
            group,
        );
        let bias = bias.then(|| self.param(format!("{name}.bias"), vec![cout], Init::Zeros, group));
        Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, group: ParamGroup) -> ConvBn {
        let conv = self.conv(&format!("{name}.conv"), cin, cout, k, stride, false, group);
        let gamma = self.param(format!("{name}.bn.gamma"), vec![cout], Init::Ones, group);
        let beta = self.param(format!("{name}.bn.beta"), vec![cout], Init::Zeros, group);
        self.stats.push((format!("{name}.bn"), cout));
        ConvBn {
            conv,
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    fn gate(&mut self, name: &str, channels: usize) -> Gate {
        // Zeroed so every gate opens at exactly 0.5.
        let weight = self.param(
            format!("{name}.weight"),
            vec![channels, channels, 1, 1],
            Init::Zeros,
            ParamGroup::Fresh,
        );
        let bias = self.param(format!("{name}.bias"), vec![channels], Init::Zeros, ParamGroup::Fresh);
        Gate { weight, bias }
    }

    fn backbone(&mut self, prefix: &str, in_channels: usize, cfg: &ModelConfig) -> Backbone {
        let g = ParamGroup::Pretrained;
        let stem = self.conv_bn(&format!("{prefix}.stem"), in_channels, cfg.stage_widths[0], 7, 2, g);
        let mut cin = cfg.stage_widths[0];
        let mut stages = Vec::with_capacity(4);
        for (s, &cout) in cfg.stage_widths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(cfg.blocks_per_stage);
            for b in 0..cfg.blocks_per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                let conv1 = self.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride, g);
                let conv2 = self.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1, g);
                let shortcut =
                    (stride != 1 || cin != cout).then(|| self.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride, g));
                blocks.push(BasicBlock {
                    conv1,
                    conv2,
                    shortcut,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        Backbone { stem, stages }
    }
}

fn plan(cfg: &ModelConfig, reg: &mut Registry) -> Plan {
    let v = cfg.variant;
    let rgb_in = if v == Variant::RgbdStack { 4 } else { 3 };
    let rgb = reg.backbone("rgb", rgb_in, cfg);
    let depth = match v {
        Variant::Rfnet | Variant::RgbdConcat => Some(reg.backbone("depth", 1, cfg)),
        Variant::RgbRgb => Some(reg.backbone("depth", 3, cfg)),
        Variant::SingleRgb | Variant::RgbdStack => None,
    };
    let mix = cfg
        .stage_widths
        .iter()
        .enumerate()
        .map(|(s, &c)| match v {
            Variant::SingleRgb | Variant::RgbdStack => StageMix::Se(reg.gate(&format!("rgb.attn{}", s + 1), c)),
            Variant::Rfnet | Variant::RgbRgb => StageMix::Afc {
                rgb: reg.gate(&format!("rgb.attn{}", s + 1), c),
                depth: reg.gate(&format!("depth.attn{}", s + 1), c),
                halve: v == Variant::RgbRgb,
            },
            Variant::RgbdConcat => StageMix::Concat {
                gate: reg.gate(&format!("fuse{}.attn", s + 1), 2 * c),
                restore: reg.conv(&format!("fuse{}.restore", s + 1), 2 * c, c, 1, 1, true, ParamGroup::Fresh),
            },
        })
        .collect();

    let d = cfg.decoder_width;
    let fresh = ParamGroup::Fresh;
    let level_width = d / cfg.spp_grids.len();
    let bottleneck = reg.conv_bn("spp.bottleneck", cfg.stage_widths[3], d, 1, 1, fresh);
    let levels = cfg
        .spp_grids
        .iter()
        .map(|&g| (g, reg.conv_bn(&format!("spp.grid{g}"), d, level_width, 1, 1, fresh)))
        .collect::<Vec<_>>();
    let fuse = reg.conv_bn("spp.fuse", d + level_width * levels.len(), d, 1, 1, fresh);
    let spp = Spp {
        bottleneck,
        levels,
        fuse,
    };
    let ups = [2usize, 1, 0]
        .iter()
        .enumerate()
        .map(|(i, &s)| Upsample {
            skip_stage: s,
            skip: reg.conv_bn(&format!("decoder.up{}.skip", i + 1), cfg.stage_widths[s], d, 1, 1, fresh),
            blend: reg.conv_bn(&format!("decoder.up{}.blend", i + 1), d, d, 3, 1, fresh),
        })
        .collect();
    let classifier = reg.conv("decoder.classifier", d, cfg.num_classes, 1, 1, true, fresh);
    Plan {
        rgb,
        depth,
        mix,
        spp,
        ups,
        classifier,
    }
}

/// Parameter and batch-norm layouts implied by `cfg`, in registry order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut reg = Registry::default();
    plan(cfg, &mut reg);
    Ok(reg.params)
}

/// Trainable parameter count; batch-norm running statistics are buffers and
/// do not count.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_specs(cfg)?.iter().map(ParamSpec::numel).sum())
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, folded into the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Whether the forward pass normalizes with batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Node handles for everything the forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// One leaf per registry parameter, in registry order.
    pub params: Vec<Var>,
    pub rgb_stages: Vec<Var>,
    /// Empty for single-branch variants.
    pub depth_stages: Vec<Var>,
    /// Stage outputs after attention / fusion; these feed the next RGB stage.
    pub fused: Vec<Var>,
    /// Decoder skip sources: RGB-branch pre-ReLU sums at strides 4, 8, 16.
    pub skips: Vec<Var>,
    /// Every sigmoid gate vector computed on the way.
    pub gates: Vec<Var>,
    pub spp: Var,
    pub decoder: Vec<Var>,
    pub logits: Var,
}

enum Stats<'a> {
    Train(&'a mut [RunningStats]),
    Eval(&'a [RunningStats]),
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    vars: Vec<Var>,
    stats: Stats<'a>,
    gates: Vec<Var>,
}

impl Ctx<'_> {
    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let b = c.bias.map(|b| self.vars[b]);
        Ok(self.tape.conv2d(x, self.vars[c.weight], b, c.stride, c.pad)?)
    }

    fn conv_bn(&mut self, c: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv(&c.conv, x)?;
        let (g, b) = (self.vars[c.gamma], self.vars[c.beta]);
        let mode = match &mut self.stats {
            Stats::Train(s) => BnMode::Train(&mut s[c.stats]),
            Stats::Eval(s) => BnMode::Eval(&s[c.stats]),
        };
        let y = self.tape.batch_norm(y, g, b, mode)?;
        Ok(if relu { self.tape.relu(y)? } else { y })
    }

    /// Returns the block output and its pre-ReLU sum.
    fn block(&mut self, b: &BasicBlock, x: Var) -> Result<(Var, Var)> {
        let h = self.conv_bn(&b.conv1, x, true)?;
        let h = self.conv_bn(&b.conv2, h, false)?;
        let sc = match &b.shortcut {
            Some(s) => self.conv_bn(s, x, false)?,
            None => x,
        };
        let pre = self.tape.add(h, sc)?;
        Ok((self.tape.relu(pre)?, pre))
    }

    fn stem(&mut self, bb: &Backbone, x: Var) -> Result<Var> {
        let y = self.conv_bn(&bb.stem, x, true)?;
        Ok(self.tape.pool(PoolOp::Max, y, 3, 2, 1)?)
    }

    fn stage(&mut self, bb: &Backbone, s: usize, mut x: Var) -> Result<(Var, Var)> {
        let mut pre = x;
        for b in &bb.stages[s] {
            (x, pre) = self.block(b, x)?;
        }
        Ok((x, pre))
    }

    fn gate(&mut self, g: &Gate, x: Var) -> Result<Var> {
        let gate = se_gate(self.tape, x, self.vars[g.weight], self.vars[g.bias])?;
        self.gates.push(gate);
        Ok(gate)
    }

    fn mix(&mut self, m: &StageMix, x: Var, y: Option<Var>) -> Result<Var> {
        match (m, y) {
            (StageMix::Se(g), _) => {
                let gate = self.gate(g, x)?;
                Ok(self.tape.channel_scale(x, gate)?)
            }
            (StageMix::Afc { rgb, depth, halve }, Some(y)) => {
                let gx = self.gate(rgb, x)?;
                let gy = self.gate(depth, y)?;
                let z = afc_combine(self.tape, x, gx, y, gy)?;
                Ok(if *halve { self.tape.scale(z, 0.5)? } else { z })
            }
            (StageMix::Concat { gate, restore }, Some(y)) => {
                let cat = self.tape.concat_channels(&[x, y])?;
                let g = self.gate(gate, cat)?;
                let gated = self.tape.channel_scale(cat, g)?;
                self.conv(restore, gated)
            }
            (_, None) => unreachable!("fusion stage without a depth branch"),
        }
    }

    fn spp(&mut self, spp: &Spp, x: Var) -> Result<Var> {
        let (h, w) = spatial(self.tape, x);
        let base = self.conv_bn(&spp.bottleneck, x, true)?;
        let mut parts = vec![base];
        for (grid, level) in &spp.levels {
            let pooled = self.tape.adaptive_avg_pool(base, *grid)?;
            let y = self.conv_bn(level, pooled, true)?;
            parts.push(self.tape.bilinear_resize(y, h, w)?);
        }
        let cat = self.tape.concat_channels(&parts)?;
        self.conv_bn(&spp.fuse, cat, true)
    }

    fn upsample(&mut self, up: &Upsample, x: Var, skip: Var) -> Result<Var> {
        let (h, w) = spatial(self.tape, skip);
        let s = self.conv_bn(&up.skip, skip, true)?;
        let x = self.tape.bilinear_resize(x, h, w)?;
        let sum = self.tape.add(x, s)?;
        self.conv_bn(&up.blend, sum, true)
    }
}

fn spatial(tape: &Tape, v: Var) -> (usize, usize) {
    let d = tape.dims(v);
    (d[d.len() - 2], d[d.len() - 1])
}

/// Channel gate `sigmoid(conv1x1(gap(x)))` for `[C,H,W]` or `[N,C,H,W]`
/// features. Returns a `[N,C,1,1]` gate (or `[1,C,1,1]` for unbatched input).
pub fn se_gate(tape: &mut Tape, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = tape.global_avg_pool(x)?;
    let dims = tape.dims(pooled).to_vec();
    let pooled = if dims.len() == 1 {
        tape.reshape(pooled, &[1, dims[0], 1, 1])?
    } else {
        pooled
    };
    let logits = tape.conv2d(pooled, weight, Some(bias), 1, 0)?;
    Ok(tape.sigmoid(logits)?)
}

fn afc_combine(tape: &mut Tape, x: Var, gx: Var, y: Var, gy: Var) -> Result<Var> {
    let a = tape.channel_scale(x, gx)?;
    let b = tape.channel_scale(y, gy)?;
    Ok(tape.add(a, b)?)
}

/// Attention fusion `Z = X * gate1(X) + Y * gate2(Y)` where each gate is
/// [`se_gate`] with its own 1x1 conv parameters `(weight, bias)`.
pub fn afc_fuse(tape: &mut Tape, x: Var, y: Var, rgb_gate: (Var, Var), depth_gate: (Var, Var)) -> Result<Var> {
    if tape.dims(x) != tape.dims(y) {
        return Err(rfnet_autodiff::TensorError::Shape(format!(
            "afc: {:?} vs {:?}",
            tape.dims(x),
            tape.dims(y)
        ))
        .into());
    }
    let gx = se_gate(tape, x, rgb_gate.0, rgb_gate.1)?;
    let gy = se_gate(tape, y, depth_gate.0, depth_gate.1)?;
    afc_combine(tape, x, gx, y, gy)
}

/// The assembled network: parameters, batch-norm statistics and the plan
/// that wires them together.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    config: ModelConfig,
    params: Vec<Param>,
    stats: Vec<NamedStats>,
    plan: Plan,
}

impl NetworkGraph {
    /// Builds and initializes the network. Each parameter draws from its own
    /// RNG stream keyed by `seed` and its name, so identically named
    /// parameters start equal across variants.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::default();
        let plan = plan(config, &mut reg);
        let params = reg
            .params
            .into_iter()
            .map(|spec| {
                let value = match spec.init {
                    Init::Zeros => Tensor::zeros(&spec.dims),
                    Init::Ones => Tensor::ones(&spec.dims),
                    Init::Kaiming { fan_in } => {
                        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
                        Tensor::randn(&spec.dims, (2.0 / fan_in as f64).sqrt(), &mut rng)
                    }
                };
                Param {
                    name: spec.name,
                    value,
                    group: spec.group,
                }
            })
            .collect();
        let stats = reg
            .stats
            .into_iter()
            .map(|(name, c)| NamedStats {
                name,
                stats: RunningStats::new(c),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params,
            stats,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn stats(&self) -> &[NamedStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [NamedStats] {
        &mut self.stats
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    fn check_inputs(&self, rgb: &Tensor, depth: &Tensor) -> Result<()> {
        let (h, w) = (self.config.input_height, self.config.input_width);
        let ok = |t: &Tensor, c: usize| t.rank() == 4 && t.dims()[1..] == [c, h, w];
        if !ok(rgb, 3) {
            return config(format!("rgb input must be [N,3,{h},{w}], got {:?}", rgb.dims()));
        }
        if self.config.variant != Variant::SingleRgb && !(ok(depth, 1) && depth.dims()[0] == rgb.dims()[0]) {
            return config(format!("depth input must be [N,1,{h},{w}], got {:?}", depth.dims()));
        }
        Ok(())
    }

    /// Batched forward pass on `[N,3,H,W]` RGB and `[N,1,H,W]` depth (or a
    /// single unbatched sample).
    /// Train mode updates batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape, rgb: &Tensor, depth: &Tensor, mode: Mode) -> Result<ForwardTrace> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
        let (trace, stats) = self.forward_with(tape, params, rgb, depth, mode)?;
        if mode == Mode::Train {
            for (dst, src) in self.stats.iter_mut().zip(stats) {
                dst.stats = src;
            }
        }
        Ok(trace)
    }

    /// Forward pass with running statistics; leaves the graph untouched.
    pub fn forward_eval(&self, tape: &mut Tape, rgb: &Tensor, depth: &Tensor) -> Result<ForwardTrace> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect();
        Ok(self.forward_with(tape, params, rgb, depth, Mode::Eval)?.0)
    }

    /// Forward pass over caller-supplied parameter nodes (one per registry
    /// entry). Returns the trace and the running statistics the pass would
    /// leave behind, without committing them.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        params: Vec<Var>,
        rgb: &Tensor,
        depth: &Tensor,
        mode: Mode,
    ) -> Result<(ForwardTrace, Vec<RunningStats>)> {
        // A single [C,H,W] sample runs as a batch of one.
        let promote = |t: &Tensor| match t.rank() {
            3 => t.clone().reshape(&[&[1], t.dims()].concat()),
            _ => Ok(t.clone()),
        };
        let (rgb, depth) = (&promote(rgb)?, &promote(depth)?);
        self.check_inputs(rgb, depth)?;
        if params.len() != self.params.len() {
            return config(format!("{} parameter nodes for {} parameters", params.len(), self.params.len()));
        }
        let mut stats: Vec<RunningStats> = self.stats.iter().map(|s| s.stats.clone()).collect();
        let access = match mode {
            Mode::Train => Stats::Train(&mut stats),
            Mode::Eval => Stats::Eval(&stats),
        };
        let trace = run(&self.plan, &self.config, params, access, tape, rgb, depth)?;
        Ok((trace, stats))
    }
}

fn run(
    plan: &Plan,
    cfg: &ModelConfig,
    vars: Vec<Var>,
    stats: Stats<'_>,
    tape: &mut Tape,
    rgb: &Tensor,
    depth: &Tensor,
) -> Result<ForwardTrace> {
    let mut cx = Ctx {
        tape,
        vars,
        stats,
        gates: Vec::new(),
    };
    let rgb_v = cx.tape.constant(rgb.clone());
    let rgb_in = match cfg.variant {
        Variant::RgbdStack => {
            let d = cx.tape.constant(depth.clone());
            cx.tape.concat_channels(&[rgb_v, d])?
        }
        _ => rgb_v,
    };
    let depth_in = match cfg.variant {
        Variant::Rfnet | Variant::RgbdConcat => Some(cx.tape.constant(depth.clone())),
        Variant::RgbRgb => Some(rgb_v),
        _ => None,
    };

    let mut x = cx.stem(&plan.rgb, rgb_in)?;
    let mut d = match (&plan.depth, depth_in) {
        (Some(bb), Some(input)) => Some(cx.stem(bb, input)?),
        _ => None,
    };
    let (mut rgb_stages, mut depth_stages, mut fused, mut skips) = (vec![], vec![], vec![], vec![]);
    for s in 0..4 {
        let (out, pre) = cx.stage(&plan.rgb, s, x)?;
        rgb_stages.push(out);
        skips.push(pre);
        if let (Some(bb), Some(dv)) = (&plan.depth, d) {
            let (dout, _) = cx.stage(bb, s, dv)?;
            depth_stages.push(dout);
            d = Some(dout);
        }
        x = cx.mix(&plan.mix[s], out, d)?;
        fused.push(x);
    }

    let spp = cx.spp(&plan.spp, x)?;
    let mut y = spp;
    let mut decoder = Vec::with_capacity(plan.ups.len());
    for up in &plan.ups {
        y = cx.upsample(up, y, skips[up.skip_stage])?;
        decoder.push(y);
    }
    let small = cx.conv(&plan.classifier, y)?;
    decoder.push(small);
    let logits = cx
        .tape
        .bilinear_resize(small, cfg.input_height, cfg.input_width)?;

    Ok(ForwardTrace {
        params: cx.vars,
        rgb_stages,
        depth_stages,
        fused,
        skips,
        gates: cx.gates,
        spp,
        decoder,
        logits,
    })
}
