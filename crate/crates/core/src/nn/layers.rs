use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::InitScheme;
use super::params::{Binding, ParamId, ParamStore};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Element, Shape, Tensor};

/// Seeded source of initial weights; draws happen in layer registration
/// order, so a fixed seed and architecture reproduce the same parameters.
pub struct Initializer {
    scheme: InitScheme,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(scheme: InitScheme, seed: u64) -> Self {
        Initializer {
            scheme,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    fn weight<T: Element>(&mut self, shape: Shape) -> Result<Tensor<T>> {
        self.scheme.sample(shape, &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1, same-padded convolution with bias.
    pub const fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        ConvSpec {
            cin,
            cout,
            kernel,
            stride: 1,
            groups: 1,
            bias: true,
        }
    }

    pub const fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub const fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.cout, self.cin / self.groups, self.kernel, self.kernel)
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().numel() + if self.bias { self.cout } else { 0 }
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom::new(self.stride, self.kernel / 2, self.groups)
    }

    fn validate(&self, name: &str) -> Result<()> {
        let fail = |detail: String| Err(Error::shape("conv layer", format!("{name}: {detail}")));
        if self.groups == 0 || self.stride == 0 || self.cin == 0 || self.cout == 0 {
            return fail(format!("degenerate spec {self:?}"));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel));
        }
        if self.cin % self.groups != 0 {
            return fail(format!("input channels {} not divisible by groups {}", self.cin, self.groups));
        }
        if self.cout % self.groups != 0 {
            return fail(format!("output channels {} not divisible by groups {}", self.cout, self.groups));
        }
        Ok(())
    }
}

/// A convolution whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    /// True when this layer aliases weights registered by an earlier layer.
    pub shared: bool,
}

impl Conv2d {
    pub fn forward<T: Element>(&self, tape: &Tape<T>, params: &Binding<T>, x: &Var<T>) -> Result<Var<T>> {
        tape.conv2d(
            x,
            params.var(self.weight),
            self.bias.map(|b| params.var(b)),
            self.spec.geom(),
        )
    }

    /// Learnable scalars this layer owns; zero for a shared (aliased) layer.
    pub fn owned_params(&self) -> usize {
        if self.shared {
            0
        } else {
            self.spec.param_count()
        }
    }

    /// Multiply-accumulates to produce an `out_h x out_w` map, bias excluded.
    pub fn mult_adds(&self, out_h: usize, out_w: usize) -> u64 {
        let s = &self.spec;
        (s.kernel * s.kernel * (s.cin / s.groups) * s.cout) as u64 * (out_h * out_w) as u64
    }
}

/// Register a convolution under `name`. When `tie_key` names a layer group
/// that already exists, the new layer aliases its tensors instead of
/// allocating new ones; shapes must agree.
pub fn make_conv_layer<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    spec: ConvSpec,
    tie_key: Option<&str>,
    init: &mut Initializer,
) -> Result<Conv2d> {
    spec.validate(name)?;
    let wname = format!("{name}.weight");
    let bname = format!("{name}.bias");
    if let Some(key) = tie_key {
        if let Some(ids) = store.tie_group(key).map(<[ParamId]>::to_vec) {
            let existing = store.shape_of(ids[0]);
            let has_bias = ids.len() == 2;
            if existing != spec.weight_shape() || has_bias != spec.bias {
                return Err(Error::TieConflict {
                    key: key.to_string(),
                    existing: format!("{existing} bias={has_bias}"),
                    requested: format!("{} bias={}", spec.weight_shape(), spec.bias),
                });
            }
            let canonical_w = store.name(ids[0]).to_string();
            let weight = store.alias(wname, &canonical_w)?;
            let bias = if has_bias {
                let canonical_b = store.name(ids[1]).to_string();
                Some(store.alias(bname, &canonical_b)?)
            } else {
                None
            };
            return Ok(Conv2d {
                name: name.to_string(),
                spec,
                weight,
                bias,
                shared: true,
            });
        }
    }
    let weight = store.insert(wname, init.weight(spec.weight_shape())?)?;
    let bias = if spec.bias {
        Some(store.insert(bname, Tensor::zeros([1, spec.cout, 1, 1]))?)
    } else {
        None
    };
    if let Some(key) = tie_key {
        store.set_tie_group(key, std::iter::once(weight).chain(bias).collect());
    }
    Ok(Conv2d {
        name: name.to_string(),
        spec,
        weight,
        bias,
        shared: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn init() -> Initializer {
        Initializer::new(InitScheme::default(), 0)
    }

    #[test]
    fn entry_conv_count() {
        let mut store = ParamStore::<f32>::new();
        make_conv_layer(&mut store, "entry", ConvSpec::new(3, 64, 3), None, &mut init()).unwrap();
        assert_eq!(store.num_params(), 1_792);
    }

    #[test]
    fn grouped_conv_count() {
        let mut store = ParamStore::<f32>::new();
        let layer = make_conv_layer(&mut store, "g", ConvSpec::new(64, 64, 3).groups(4), None, &mut init()).unwrap();
        // Enumerate the weight tensor rather than trusting the formula.
        let w = store.get(layer.weight);
        assert_eq!(w.shape(), Shape::new(64, 16, 3, 3));
        assert_eq!(w.data().len() + 64, 9_280);
        assert_eq!(store.num_params(), 9_280);
    }

    #[test]
    fn tie_key_aliases_once() {
        let mut store = ParamStore::<f32>::new();
        let mut i = init();
        let a = make_conv_layer(&mut store, "a", ConvSpec::new(8, 8, 3), Some("t"), &mut i).unwrap();
        let before = store.len();
        let b = make_conv_layer(&mut store, "b", ConvSpec::new(8, 8, 3), Some("t"), &mut i).unwrap();
        assert_eq!(store.len(), before);
        assert_eq!(a.weight, b.weight);
        assert!(b.shared && !a.shared);
        assert_eq!(store.resolve("b.bias"), a.bias);
        let err = make_conv_layer(&mut store, "c", ConvSpec::new(8, 16, 3), Some("t"), &mut i).unwrap_err();
        assert!(matches!(err, Error::TieConflict { .. }));
    }

    #[test]
    fn divisibility_checked() {
        let mut store = ParamStore::<f32>::new();
        let err = make_conv_layer(&mut store, "bad", ConvSpec::new(6, 8, 3).groups(4), None, &mut init()).unwrap_err();
        assert!(err.to_string().contains("input channels 6"));
    }
}
