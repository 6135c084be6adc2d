//! Define-by-run reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Tape`] records every op applied to [`Var`]s that require gradients,
//! together with a closure computing the vector-Jacobian product for each
//! input. [`Tape::backward`] walks the records in reverse creation order, so
//! accumulation into a shared input (fan-out, tied weights) happens in a
//! fixed order and is bitwise reproducible. A tape is built per step and
//! dropped afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Element, Shape, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<T: Element = f32> {
    id: usize,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Element> Var<T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Scalar value of a (1,1,1,1) variable.
    pub fn item(&self) -> T {
        self.value.item()
    }
}

/// One convolution executed on a tape, for instrumented cost counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRecord {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub groups: usize,
}

impl ConvRecord {
    /// Multiply-accumulates of this convolution, bias excluded.
    pub fn mult_adds(&self) -> u64 {
        let cin_g = (self.input.c / self.groups) as u64;
        (self.kernel * self.kernel) as u64
            * cin_g
            * self.output.c as u64
            * self.output.plane() as u64
            * self.output.n as u64
    }
}

/// Leaf gradients produced by [`Tape::backward`], keyed by variable id.
pub struct Gradients<T: Element = f32> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        self.grads.get(&var.id)
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        self.grads.remove(&var.id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
    conv_log: Option<RefCell<Vec<ConvRecord>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            conv_log: None,
        }
    }

    /// A tape that never records backward closures, for inference.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    /// Record the geometry of every convolution run on this tape.
    pub fn with_conv_log(mut self) -> Self {
        self.conv_log = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn conv_log(&self) -> Vec<ConvRecord> {
        self.conv_log
            .as_ref()
            .map(|l| l.borrow().clone())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.shared_leaf(Arc::new(value), requires_grad)
    }

    pub fn shared_leaf(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<T> {
        let requires_grad = requires_grad && self.grad_enabled;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            id: nodes.len() - 1,
            value,
            requires_grad,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    fn record(&self, value: Tensor<T>, parents: &[&Var<T>], backward: BackwardFn<T>) -> Var<T> {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(if requires_grad {
            Node {
                parents: parents.iter().map(|p| p.id).collect(),
                requires_grad,
                backward: Some(backward),
            }
        } else {
            Node {
                parents: Vec::new(),
                requires_grad,
                backward: None,
            }
        });
        Var {
            id: nodes.len() - 1,
            value: Arc::new(value),
            requires_grad,
        }
    }

    /// Propagate `d loss / d leaf` to every leaf reachable from `loss`.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.shape() != Shape::scalar() {
            return Err(Error::NonScalarLoss(loss.shape().to_string()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        let mut out = HashMap::new();
        if !loss.requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                if node.requires_grad {
                    out.insert(id, g);
                }
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    pub fn conv2d(
        &self,
        x: &Var<T>,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        geom: ConvGeom,
    ) -> Result<Var<T>> {
        let out = kernels::conv2d(x.value(), weight.value(), bias.map(|b| b.value()), geom)?;
        if let Some(log) = &self.conv_log {
            log.borrow_mut().push(ConvRecord {
                input: x.shape(),
                output: out.shape(),
                kernel: weight.shape().h,
                groups: geom.groups,
            });
        }
        let (xv, wv) = (x.shared_value(), weight.shared_value());
        let has_bias = bias.is_some();
        let backward: BackwardFn<T> = Box::new(move |g, needs| {
            let want_bias = has_bias && needs[2];
            let grads = kernels::conv2d_backward(&xv, &wv, g, geom, [needs[0], needs[1], want_bias]);
            let mut v = vec![grads.input, grads.weight];
            if has_bias {
                v.push(grads.bias);
            }
            v
        });
        Ok(match bias {
            Some(b) => self.record(out, &[x, weight, b], backward),
            None => self.record(out, &[x, weight], backward),
        })
    }

    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
        let xv = x.shared_value();
        self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = g.clone();
                for (d, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn leaky_relu(&self, x: &Var<T>, slope: f64) -> Var<T> {
        let s = T::from_f64(slope);
        let out = x.value().map(|v| if v > T::zero() { v } else { v * s });
        let xv = x.shared_value();
        self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = g.clone();
                for (d, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                    if v <= T::zero() {
                        *d = *d * s;
                    }
                }
                vec![Some(d)]
            }),
        )
    }

    /// Logistic sigmoid, clamped so every output lies strictly inside (0, 1)
    /// even where the exact value rounds to 0 or 1.
    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon();
        let out = x
            .value()
            .map(|v| (T::one() / (T::one() + (-v).exp())).max(lo).min(hi));
        let yv = Arc::new(out.clone());
        self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let mut d = g.clone();
                for (d, &y) in d.data_mut().iter_mut().zip(yv.data()) {
                    *d = *d * y * (T::one() - y);
                }
                vec![Some(d)]
            }),
        )
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{} vs {}", a.shape(), b.shape())));
        }
        let mut out = a.value().clone();
        out.add_assign(b.value());
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        ))
    }

    pub fn scale(&self, x: &Var<T>, factor: f64) -> Var<T> {
        let f = T::from_f64(factor);
        let out = x.value().map(|v| v * f);
        self.record(out, &[x], Box::new(move |g, _| vec![Some(g.map(|v| v * f))]))
    }

    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = kernels::pixel_shuffle(x.value(), r)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(kernels::pixel_unshuffle(g, r).expect("shape"))]),
        ))
    }

    pub fn avg_pool2(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = kernels::avg_pool2(x.value())?;
        Ok(self.record(
            out,
            &[x],
            Box::new(|g, _| vec![Some(kernels::avg_pool2_backward(g))]),
        ))
    }

    pub fn global_avg_pool(&self, x: &Var<T>) -> Var<T> {
        let out = kernels::global_avg_pool(x.value());
        let s = x.shape();
        self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let inv = T::from_f64(1.0 / s.plane() as f64);
                vec![Some(Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv))]
            }),
        )
    }

    pub fn concat_channels(&self, parts: &[&Var<T>]) -> Result<Var<T>> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let out = kernels::concat_channels(&values)?;
        let widths: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
        Ok(self.record(
            out,
            parts,
            Box::new(move |g, needs| {
                let mut c0 = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let part = need.then(|| kernels::slice_channels(g, c0, w));
                        c0 += w;
                        part
                    })
                    .collect()
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let total = x.value().data().iter().fold(T::zero(), |a, &b| a + b);
        let s = x.shape();
        self.record(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(s, g.item()))]),
        )
    }

    /// `sum(x * weights)` for a constant `weights` of the same shape.
    pub fn weighted_sum(&self, x: &Var<T>, weights: Tensor<T>) -> Result<Var<T>> {
        if x.shape() != weights.shape() {
            return Err(Error::shape("weighted_sum", format!("{} vs {}", x.shape(), weights.shape())));
        }
        let total = x
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.record(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, _| vec![Some(weights.map(|w| w * g.item()))]),
        ))
    }

    pub fn mean(&self, x: &Var<T>) -> Var<T> {
        let n = x.value().numel() as f64;
        let total = self.sum(x);
        self.scale(&total, 1.0 / n)
    }

    /// Mean absolute difference.
    pub fn l1(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_same("l1", a, b)?;
        let n = T::from_f64(a.value().numel() as f64);
        let total = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let (av, bv) = (a.shared_value(), b.shared_value());
        Ok(self.record(
            Tensor::scalar(total / n),
            &[a, b],
            Box::new(move |g, needs| {
                let scale = g.item() / n;
                let sign = Tensor::from_vec(
                    av.shape(),
                    av.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                )
                .expect("shape");
                vec![needs[0].then(|| sign.clone()), needs[1].then(|| sign.map(|v| -v))]
            }),
        ))
    }

    /// Mean squared difference.
    pub fn l2(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_same("l2", a, b)?;
        let n = T::from_f64(a.value().numel() as f64);
        let total = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let (av, bv) = (a.shared_value(), b.shared_value());
        Ok(self.record(
            Tensor::scalar(total / n),
            &[a, b],
            Box::new(move |g, needs| {
                let scale = (T::one() + T::one()) * g.item() / n;
                let d = Tensor::from_vec(
                    av.shape(),
                    av.data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| (x - y) * scale)
                        .collect(),
                )
                .expect("shape");
                vec![needs[0].then(|| d.clone()), needs[1].then(|| d.map(|v| -v))]
            }),
        ))
    }

    /// `-mean(log p)` when `positive`, else `-mean(log(1 - p))`, with `p`
    /// clamped to `[eps, 1 - eps]`. The clamp has zero gradient outside.
    pub fn neg_log_mean(&self, p: &Var<T>, positive: bool, eps: f64) -> Var<T> {
        let (lo, hi) = (T::from_f64(eps), T::from_f64(1.0 - eps));
        let n = T::from_f64(p.value().numel() as f64);
        let total = p.value().data().iter().fold(T::zero(), |acc, &v| {
            let c = v.max(lo).min(hi);
            acc + if positive { c.ln() } else { (T::one() - c).ln() }
        });
        let pv = p.shared_value();
        self.record(
            Tensor::scalar(-total / n),
            &[p],
            Box::new(move |g, _| {
                let scale = g.item() / n;
                vec![Some(pv.map(|v| {
                    if v < lo || v > hi {
                        T::zero()
                    } else if positive {
                        -scale / v
                    } else {
                        scale / (T::one() - v)
                    }
                }))]
            }),
        )
    }

    fn check_same(&self, op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{} vs {}", a.shape(), b.shape())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn([2, 3, 2, 2], |n, c, h, w| (n + c + h + w) as f64), true);
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn relu_dead_unit() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap(), true);
        let y = tape.relu(&x);
        assert_eq!(y.value().data(), &[0.0, 2.0]);
        let grads = tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn scalar_activations() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.0, -10.0]).unwrap());
        assert_eq!(tape.sigmoid(&x).value().at(0, 0, 0, 0), 0.5);
        assert_eq!(tape.leaky_relu(&x, 0.2).value().at(0, 0, 0, 1), -2.0);
        let big = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![80.0, -200.0]).unwrap());
        let s = tape.sigmoid(&big);
        assert!(s.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 1, 1]), true);
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 3.0), true);
        let y = tape.add(&x, &x).unwrap();
        let z = tape.add(&y, &x).unwrap();
        let grads = tape.backward(&tape.sum(&z)).unwrap();
        assert!(grads.get(&x).unwrap().data().iter().all(|&g| g == 3.0));
    }

    #[test]
    fn no_grad_tape_records_nothing_differentiable() {
        let tape = Tape::<f32>::no_grad();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let y = tape.sum(&tape.relu(&x));
        assert!(!y.requires_grad());
        assert_eq!(y.item(), 4.0);
        assert!(tape.backward(&y).unwrap().is_empty());
    }

    #[test]
    fn l1_of_identical_is_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 3, 4, 4], 0.3));
        assert_eq!(tape.l1(&x, &x).unwrap().item(), 0.0);
        let y = tape.constant(Tensor::full([1, 3, 4, 5], 0.3));
        assert!(tape.l1(&x, &y).is_err());
        assert!(tape.add(&x, &y).is_err());
    }

    #[test]
    fn conv_log_counts() {
        let tape = Tape::<f32>::new().with_conv_log();
        let x = tape.constant(Tensor::zeros([1, 64, 180, 320]));
        let w = tape.constant(Tensor::zeros([64, 64, 3, 3]));
        tape.conv2d(&x, &w, None, ConvGeom::same(3, 1)).unwrap();
        let log = tape.conv_log();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].mult_adds(), 9 * 64 * 64 * 320 * 180);
    }
}
