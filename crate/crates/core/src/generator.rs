//! The cascading residual generator and its efficient (grouped, tied) variant.
//!
//! Structure, for `B` cascading blocks of `U` residual units each:
//!
//! ```text
//! H0  = entry(X)
//! Hb  = fuse_b([H0, .., H(b-1), Cascade_b(H(b-1))])      b = 1..B
//! O   = HB + H0
//! SR  = exit(upsample_r(O))
//! ```
//!
//! and inside each cascading block, with `B0` its input,
//! `Bu = fuse_u([B0, .., B(u-1), Unit_u(B(u-1))])`. Fusion convs are 1x1
//! with no activation afterwards.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{make_conv_layer, Binding, Conv2d, ConvSpec, InitScheme, Initializer, ParamStore};
use crate::tensor::{Element, Tensor};

pub const SUPPORTED_SCALES: [u32; 3] = [2, 3, 4];

/// Declarative description of a generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Cascading blocks (`B`).
    pub blocks: usize,
    /// Residual units per cascading block (`U`).
    pub units: usize,
    pub channels: usize,
    /// Group count of the grouped 3x3 convs in efficient units and heads.
    pub group: usize,
    /// Share one residual unit's parameters across a cascading block.
    pub tied: bool,
    /// Use grouped-conv + pointwise residual units.
    pub efficient: bool,
    pub scales: Vec<u32>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::pcarn()
    }
}

impl ModelSpec {
    /// B = U = 3, 64 channels, standard residual units, scales 2/3/4.
    pub fn pcarn() -> Self {
        ModelSpec {
            blocks: 3,
            units: 3,
            channels: 64,
            group: 1,
            tied: false,
            efficient: false,
            scales: SUPPORTED_SCALES.to_vec(),
        }
    }

    /// Mobile variant: efficient units with group 4, tied within each block.
    pub fn pcarn_m() -> Self {
        ModelSpec {
            group: 4,
            tied: true,
            efficient: true,
            ..ModelSpec::pcarn()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::spec("blocks", "must be at least 1"));
        }
        if self.units == 0 {
            return Err(Error::spec("units", "must be at least 1"));
        }
        if self.channels == 0 {
            return Err(Error::spec("channels", "must be at least 1"));
        }
        if self.group == 0 {
            return Err(Error::spec("group", "must be at least 1"));
        }
        if !self.efficient && self.group != 1 {
            return Err(Error::spec("group", "grouping requires efficient units"));
        }
        if self.channels % self.group != 0 {
            return Err(Error::spec(
                "group",
                format!("{} does not divide channels {}", self.group, self.channels),
            ));
        }
        if self.scales.is_empty() {
            return Err(Error::spec("scales", "must list at least one scale"));
        }
        for (i, s) in self.scales.iter().enumerate() {
            if !SUPPORTED_SCALES.contains(s) {
                return Err(Error::spec("scales", format!("x{s} is not one of 2, 3, 4")));
            }
            if self.scales[..i].contains(s) {
                return Err(Error::spec("scales", format!("x{s} listed twice")));
            }
        }
        Ok(())
    }

    /// Group count used by the upsampling convs.
    pub fn head_groups(&self) -> usize {
        if self.efficient {
            self.group
        } else {
            1
        }
    }

    /// Short variant label such as `G4R` (group 4, tied).
    pub fn label(&self) -> String {
        format!("G{}{}", self.group, if self.tied { "R" } else { "" })
    }
}

#[derive(Clone, Debug)]
pub enum ResidualUnit {
    /// `relu(conv2(relu(conv1(x))) + x)`.
    Standard { conv1: Conv2d, conv2: Conv2d },
    /// `relu(pointwise(conv2_g(relu(conv1_g(x)))) + x)` with grouped 3x3s.
    Efficient {
        conv1: Conv2d,
        conv2: Conv2d,
        pointwise: Conv2d,
    },
}

impl ResidualUnit {
    pub fn convs(&self) -> Vec<&Conv2d> {
        match self {
            ResidualUnit::Standard { conv1, conv2 } => vec![conv1, conv2],
            ResidualUnit::Efficient {
                conv1,
                conv2,
                pointwise,
            } => vec![conv1, conv2, pointwise],
        }
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = match self {
            ResidualUnit::Standard { conv1, conv2 } => {
                let h = tape.relu(&conv1.forward(tape, p, x)?);
                conv2.forward(tape, p, &h)?
            }
            ResidualUnit::Efficient {
                conv1,
                conv2,
                pointwise,
            } => {
                let h = tape.relu(&conv1.forward(tape, p, x)?);
                let h = conv2.forward(tape, p, &h)?;
                pointwise.forward(tape, p, &h)?
            }
        };
        Ok(tape.relu(&tape.add(&h, x)?))
    }
}

/// Dense 1x1 fusion over every earlier state plus the newest output.
fn cascade<T: Element>(
    tape: &Tape<T>,
    p: &Binding<T>,
    input: &Var<T>,
    fusions: &[Conv2d],
    mut step: impl FnMut(usize, &Var<T>) -> Result<Var<T>>,
) -> Result<Var<T>> {
    let mut states = vec![input.clone()];
    for (i, fuse) in fusions.iter().enumerate() {
        let prev = states.last().expect("non-empty").clone();
        let out = step(i, &prev)?;
        let mut parts: Vec<&Var<T>> = states.iter().collect();
        parts.push(&out);
        let cat = tape.concat_channels(&parts)?;
        let fused = fuse.forward(tape, p, &cat)?;
        states.push(fused);
    }
    Ok(states.pop().expect("non-empty"))
}

#[derive(Clone, Debug)]
pub struct CascadingBlock {
    pub units: Vec<ResidualUnit>,
    pub fusions: Vec<Conv2d>,
}

impl CascadingBlock {
    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        cascade(tape, p, x, &self.fusions, |u, prev| self.units[u].forward(tape, p, prev))
    }

    /// Scalars owned by the residual units, counting tied tensors once.
    pub fn unit_params(&self) -> usize {
        self.units
            .iter()
            .flat_map(ResidualUnit::convs)
            .map(Conv2d::owned_params)
            .sum()
    }
}

/// Sub-pixel upsampler: each stage is conv -> pixel shuffle -> relu.
#[derive(Clone, Debug)]
pub struct UpsampleHead {
    pub scale: u32,
    pub stages: Vec<(Conv2d, usize)>,
}

impl UpsampleHead {
    fn factors(scale: u32) -> &'static [usize] {
        match scale {
            2 => &[2],
            3 => &[3],
            4 => &[2, 2],
            _ => unreachable!("validated scale"),
        }
    }

    pub fn forward<T: Element>(&self, tape: &Tape<T>, p: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        let mut h = x.clone();
        for (conv, r) in &self.stages {
            let y = conv.forward(tape, p, &h)?;
            h = tape.relu(&tape.pixel_shuffle(&y, *r)?);
        }
        Ok(h)
    }
}

/// One convolution of a traced forward pass with its output extents.
#[derive(Clone, Copy, Debug)]
pub struct TracedConv<'a> {
    pub layer: &'a Conv2d,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Clone)]
pub struct Generator<T: Element = f32> {
    pub spec: ModelSpec,
    pub entry: Conv2d,
    pub blocks: Vec<CascadingBlock>,
    pub fusions: Vec<Conv2d>,
    pub heads: Vec<UpsampleHead>,
    pub exit: Conv2d,
    pub store: ParamStore<T>,
    global_residual: bool,
}

/// Build and initialize a generator for `spec`.
pub fn build_generator<T: Element>(spec: &ModelSpec, scheme: InitScheme, seed: u64) -> Result<Generator<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(scheme, seed);
    let ch = spec.channels;
    let entry = make_conv_layer(&mut store, "entry", ConvSpec::new(3, ch, 3), None, &mut init)?;

    let mut blocks = Vec::with_capacity(spec.blocks);
    let mut fusions = Vec::with_capacity(spec.blocks);
    for b in 0..spec.blocks {
        let mut units = Vec::with_capacity(spec.units);
        let mut local = Vec::with_capacity(spec.units);
        for u in 0..spec.units {
            let prefix = format!("body.{b}.unit.{u}");
            let tie = |part: &str| spec.tied.then(|| format!("body.{b}.unit.{part}"));
            let mut conv = |part: &str, cs: ConvSpec| {
                make_conv_layer(&mut store, &format!("{prefix}.{part}"), cs, tie(part).as_deref(), &mut init)
            };
            let unit = if spec.efficient {
                ResidualUnit::Efficient {
                    conv1: conv("conv1", ConvSpec::new(ch, ch, 3).groups(spec.group))?,
                    conv2: conv("conv2", ConvSpec::new(ch, ch, 3).groups(spec.group))?,
                    pointwise: conv("pointwise", ConvSpec::new(ch, ch, 1))?,
                }
            } else {
                ResidualUnit::Standard {
                    conv1: conv("conv1", ConvSpec::new(ch, ch, 3))?,
                    conv2: conv("conv2", ConvSpec::new(ch, ch, 3))?,
                }
            };
            units.push(unit);
            local.push(make_conv_layer(
                &mut store,
                &format!("body.{b}.fuse.{u}"),
                ConvSpec::new((u + 2) * ch, ch, 1),
                None,
                &mut init,
            )?);
        }
        blocks.push(CascadingBlock {
            units,
            fusions: local,
        });
        fusions.push(make_conv_layer(
            &mut store,
            &format!("fuse.{b}"),
            ConvSpec::new((b + 2) * ch, ch, 1),
            None,
            &mut init,
        )?);
    }

    let mut scales = spec.scales.clone();
    scales.sort_unstable();
    let mut heads = Vec::with_capacity(scales.len());
    for &scale in &scales {
        let mut stages = Vec::new();
        for (i, &r) in UpsampleHead::factors(scale).iter().enumerate() {
            let cs = ConvSpec::new(ch, ch * r * r, 3).groups(spec.head_groups());
            let conv = make_conv_layer(&mut store, &format!("up{scale}.{i}"), cs, None, &mut init)?;
            stages.push((conv, r));
        }
        heads.push(UpsampleHead { scale, stages });
    }
    let exit = make_conv_layer(&mut store, "exit", ConvSpec::new(ch, 3, 3), None, &mut init)?;

    Ok(Generator {
        spec: spec.clone(),
        entry,
        blocks,
        fusions,
        heads,
        exit,
        store,
        global_residual: true,
    })
}

impl<T: Element> Generator<T> {
    pub fn head(&self, scale: u32) -> Result<&UpsampleHead> {
        self.heads
            .iter()
            .find(|h| h.scale == scale)
            .ok_or(Error::UnsupportedScale(scale))
    }

    /// Disable the final `O = HB + H0` addition (ablation only).
    pub fn set_global_residual(&mut self, enabled: bool) {
        self.global_residual = enabled;
    }

    /// Super-resolve `x` of shape (N,3,h,w) into (N,3,r*h,r*w).
    pub fn forward(&self, tape: &Tape<T>, p: &Binding<T>, x: &Var<T>, scale: u32) -> Result<Var<T>> {
        let head = self.head(scale)?;
        if x.shape().c != 3 {
            return Err(Error::shape("generator", format!("expected 3 input channels, got {}", x.shape().c)));
        }
        let h0 = self.entry.forward(tape, p, x)?;
        let hb = cascade(tape, p, &h0, &self.fusions, |b, prev| self.blocks[b].forward(tape, p, prev))?;
        let o = if self.global_residual {
            tape.add(&hb, &h0)?
        } else {
            hb
        };
        let up = head.forward(tape, p, &o)?;
        self.exit.forward(tape, p, &up)
    }

    /// Gradient-free forward on a plain tensor.
    pub fn infer(&self, x: &Tensor<T>, scale: u32) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let p = self.store.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&tape, &p, &xv, scale)?;
        drop(xv);
        Ok(std::sync::Arc::try_unwrap(y.shared_value()).unwrap_or_else(|a| (*a).clone()))
    }

    /// Every convolution in registration order, including every head.
    pub fn layers(&self) -> Vec<&Conv2d> {
        let mut out = vec![&self.entry];
        for (block, fuse) in self.blocks.iter().zip(&self.fusions) {
            for (unit, local) in block.units.iter().zip(&block.fusions) {
                out.extend(unit.convs());
                out.push(local);
            }
            out.push(fuse);
        }
        for head in &self.heads {
            out.extend(head.stages.iter().map(|(c, _)| c));
        }
        out.push(&self.exit);
        out
    }

    /// Convolutions executed by a forward pass at `scale` on an
    /// `lr_h x lr_w` input, with each one's output extents, in execution order.
    pub fn trace(&self, scale: u32, lr_h: usize, lr_w: usize) -> Result<Vec<TracedConv<'_>>> {
        let head = self.head(scale)?;
        let at = |layer, h, w| TracedConv {
            layer,
            out_h: h,
            out_w: w,
        };
        let mut out = vec![at(&self.entry, lr_h, lr_w)];
        for (block, fuse) in self.blocks.iter().zip(&self.fusions) {
            for (unit, local) in block.units.iter().zip(&block.fusions) {
                out.extend(unit.convs().into_iter().map(|c| at(c, lr_h, lr_w)));
                out.push(at(local, lr_h, lr_w));
            }
            out.push(at(fuse, lr_h, lr_w));
        }
        let (mut h, mut w) = (lr_h, lr_w);
        for (conv, r) in &head.stages {
            out.push(at(conv, h, w));
            h *= r;
            w *= r;
        }
        out.push(at(&self.exit, h, w));
        Ok(out)
    }

    /// Input widths of the global fusion convs, in block order.
    pub fn global_fusion_widths(&self) -> Vec<usize> {
        self.fusions.iter().map(|f| f.spec.cin).collect()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }
}
