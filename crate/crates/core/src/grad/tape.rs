//! Recording tape for reverse-mode differentiation.
//!
//! A [`Tape`] either records (every op pushes a node holding its inputs) or
//! runs in inference mode, where values flow through [`Var`]s and are freed
//! as soon as the last handle drops. Model code is written once against the
//! tape and serves both purposes.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, Activation, BinaryOp, ConvSpec, Rearrange};
use crate::params::Param;
use crate::ssm::{self, ScanDirection};
use crate::tensor::{Scalar, Shape, Tensor};

pub type NodeId = usize;

/// A value flowing through the tape. Cloning is cheap.
#[derive(Clone)]
pub struct Var<T> {
    value: Arc<Tensor<T>>,
    id: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    /// Node index when the value is tracked for gradients.
    pub fn id(&self) -> Option<NodeId> {
        self.id
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value).clone()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

enum Op<T> {
    Leaf {
        name: Option<String>,
    },
    Conv {
        x: Var<T>,
        w: Var<T>,
        b: Option<Var<T>>,
        spec: ConvSpec,
    },
    LayerNorm {
        x: Var<T>,
        gamma: Var<T>,
        beta: Var<T>,
        eps: T,
    },
    Act {
        x: Var<T>,
        kind: Activation,
    },
    Softmax {
        x: Var<T>,
        y: Arc<Tensor<T>>,
        axis: usize,
    },
    Binary {
        a: Var<T>,
        b: Var<T>,
        op: BinaryOp,
    },
    Scale {
        x: Var<T>,
        k: T,
    },
    Gap {
        x: Var<T>,
    },
    Rearrange {
        x: Var<T>,
        r: usize,
        dir: Rearrange,
    },
    Concat {
        a: Var<T>,
        b: Var<T>,
    },
    Narrow {
        x: Var<T>,
        start: usize,
    },
    Reshape {
        x: Var<T>,
    },
    Resize {
        x: Var<T>,
    },
    Pad {
        x: Var<T>,
    },
    Crop {
        x: Var<T>,
    },
    Sum {
        x: Var<T>,
        mean: bool,
    },
    Gram {
        q: Var<T>,
        k: Var<T>,
        heads: usize,
    },
    HeadMix {
        attn: Var<T>,
        v: Var<T>,
        heads: usize,
    },
    CodebookMix {
        w: Var<T>,
        cb: Var<T>,
    },
    NormalizeSpatial {
        x: Var<T>,
        eps: T,
    },
    RouteFlatten {
        x: Var<T>,
        dir: ScanDirection,
    },
    RouteUnflatten {
        x: Var<T>,
        dir: ScanDirection,
    },
    Scan {
        inputs: ssm::ScanInputs<Var<T>>,
        states: Vec<T>,
    },
    /// Forward-only op injected from outside the crate.
    Opaque {
        name: String,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Conv { .. } => "conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Act { kind, .. } => kind.name(),
            Op::Softmax { .. } => "softmax",
            Op::Binary { op, .. } => op.name(),
            Op::Scale { .. } => "scale",
            Op::Gap { .. } => "global_avg_pool",
            Op::Rearrange { .. } => "pixel_rearrange",
            Op::Concat { .. } => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::Reshape { .. } => "reshape",
            Op::Resize { .. } => "resize_bilinear",
            Op::Pad { .. } => "reflect_pad",
            Op::Crop { .. } => "crop",
            Op::Sum { mean: false, .. } => "sum",
            Op::Sum { mean: true, .. } => "mean",
            Op::Gram { .. } => "channel_gram",
            Op::HeadMix { .. } => "head_mix",
            Op::CodebookMix { .. } => "codebook_mix",
            Op::NormalizeSpatial { .. } => "normalize_spatial",
            Op::RouteFlatten { .. } => "route_flatten",
            Op::RouteUnflatten { .. } => "route_unflatten",
            Op::Scan { .. } => "selective_scan",
            Op::Opaque { name, .. } => name,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    shape: Shape,
}

pub struct Tape<T> {
    recording: bool,
    nodes: RefCell<Vec<Node<T>>>,
    kinks: Cell<u64>,
    param_uses: RefCell<BTreeMap<String, usize>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    by_name: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked value; zero-filled if it did not influence the loss.
    pub fn of(&self, v: &Var<T>) -> Option<Tensor<T>> {
        let id = v.id?;
        Some(
            self.by_node
                .get(id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(v.shape())),
        )
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<T>> {
        self.by_name.get(name)
    }

    pub fn by_name(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_name
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor<T>> {
        self.by_name
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::recording()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records every op for a later backward pass.
    pub fn recording() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
            kinks: Cell::new(FNV_OFFSET),
            param_uses: RefCell::new(BTreeMap::new()),
        }
    }

    /// A tape that only computes values.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
            kinks: Cell::new(FNV_OFFSET),
            param_uses: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many times each named parameter entered this tape.
    pub fn param_uses(&self) -> BTreeMap<String, usize> {
        self.param_uses.borrow().clone()
    }

    /// Hash of the sign pattern seen by every ReLU and abs evaluated on this
    /// tape. Two evaluations with equal signatures took the same branch of
    /// every kink.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.get()
    }

    fn new_node(&self, op: Op<T>, shape: Shape) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape });
        nodes.len() - 1
    }

    /// Untracked constant.
    pub fn constant(&self, t: Tensor<T>) -> Var<T> {
        Var {
            value: Arc::new(t),
            id: None,
        }
    }

    /// Tracked leaf with an optional name under which its gradient is reported.
    pub fn variable(&self, name: Option<&str>, t: impl Into<Arc<Tensor<T>>>) -> Var<T> {
        let value = t.into();
        let id = self.recording.then(|| {
            self.new_node(
                Op::Leaf {
                    name: name.map(str::to_owned),
                },
                value.shape(),
            )
        });
        Var { value, id }
    }

    pub fn param(&self, p: &Param<T>) -> Var<T> {
        *self.param_uses.borrow_mut().entry(p.name.clone()).or_insert(0) += 1;
        self.variable(Some(&p.name), Arc::clone(&p.value))
    }

    fn push(&self, value: Tensor<T>, tracked: bool, op: impl FnOnce() -> Op<T>) -> Result<Var<T>> {
        let id = if self.recording && tracked {
            let op = op();
            if let Some(i) = value.first_non_finite() {
                return Err(Error::NonFinite {
                    op: op.name().to_owned(),
                    index: i,
                });
            }
            Some(self.new_node(op, value.shape()))
        } else {
            if let Some(i) = value.first_non_finite() {
                return Err(Error::NonFinite {
                    op: op().name().to_owned(),
                    index: i,
                });
            }
            None
        };
        Ok(Var {
            value: Arc::new(value),
            id,
        })
    }

    fn tracked(vars: &[&Var<T>]) -> bool {
        vars.iter().any(|v| v.id.is_some())
    }

    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>, spec: ConvSpec) -> Result<Var<T>> {
        let y = ops::conv2d_raw(x.value(), w.value(), b.map(|b| b.value()), spec)?;
        let tracked = Self::tracked(&[x, w]) || b.is_some_and(|b| b.id.is_some());
        self.push(y, tracked, || Op::Conv {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            spec,
        })
    }

    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: T) -> Result<Var<T>> {
        let y = ops::layer_norm(x.value(), gamma.value(), beta.value(), eps)?;
        self.push(y, Self::tracked(&[x, gamma, beta]), || Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            eps,
        })
    }

    pub fn act(&self, x: &Var<T>, kind: Activation) -> Result<Var<T>> {
        if matches!(kind, Activation::Relu | Activation::Abs) {
            let mut h = self.kinks.get();
            for &v in x.value().data() {
                let bit = if v > T::ZERO { 1 } else if v < T::ZERO { 2 } else { 3 };
                h = (h ^ bit).wrapping_mul(FNV_PRIME);
            }
            self.kinks.set(h);
        }
        let y = ops::activation(x.value(), kind);
        self.push(y, Self::tracked(&[x]), || Op::Act { x: x.clone(), kind })
    }

    pub fn relu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Relu)
    }

    pub fn gelu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Gelu)
    }

    pub fn silu(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Silu)
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Sigmoid)
    }

    pub fn softplus(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Softplus)
    }

    pub fn abs(&self, x: &Var<T>) -> Result<Var<T>> {
        self.act(x, Activation::Abs)
    }

    pub fn softmax(&self, x: &Var<T>, axis: usize) -> Result<Var<T>> {
        let y = Arc::new(ops::softmax(x.value(), axis)?);
        let tracked = Self::tracked(&[x]);
        let saved = Arc::clone(&y);
        self.push((*y).clone(), tracked, || Op::Softmax {
            x: x.clone(),
            y: saved,
            axis,
        })
    }

    pub fn binary(&self, a: &Var<T>, b: &Var<T>, op: BinaryOp) -> Result<Var<T>> {
        let y = ops::ew(a.value(), b.value(), op)?;
        self.push(y, Self::tracked(&[a, b]), || Op::Binary {
            a: a.clone(),
            b: b.clone(),
            op,
        })
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, BinaryOp::Mul)
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(a, b, BinaryOp::Div)
    }

    pub fn scale(&self, x: &Var<T>, k: T) -> Result<Var<T>> {
        let y = x.value().map(|v| v * k);
        self.push(y, Self::tracked(&[x]), || Op::Scale { x: x.clone(), k })
    }

    pub fn global_avg_pool(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = ops::global_avg_pool(x.value())?;
        self.push(y, Self::tracked(&[x]), || Op::Gap { x: x.clone() })
    }

    pub fn pixel_rearrange(&self, x: &Var<T>, r: usize, dir: Rearrange) -> Result<Var<T>> {
        let y = ops::pixel_rearrange(x.value(), r, dir)?;
        self.push(y, Self::tracked(&[x]), || Op::Rearrange { x: x.clone(), r, dir })
    }

    pub fn concat_channels(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let y = ops::concat_channels(a.value(), b.value())?;
        self.push(y, Self::tracked(&[a, b]), || Op::Concat {
            a: a.clone(),
            b: b.clone(),
        })
    }

    pub fn narrow_channels(&self, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
        let y = ops::narrow_channels(x.value(), start, len)?;
        self.push(y, Self::tracked(&[x]), || Op::Narrow { x: x.clone(), start })
    }

    pub fn reshape(&self, x: &Var<T>, shape: impl Into<Shape>) -> Result<Var<T>> {
        let y = x.to_tensor().reshape(shape)?;
        self.push(y, Self::tracked(&[x]), || Op::Reshape { x: x.clone() })
    }

    pub fn resize_bilinear(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        if (x.shape().h(), x.shape().w()) == (h, w) {
            return Ok(x.clone());
        }
        let y = ops::resize_bilinear(x.value(), h, w)?;
        self.push(y, Self::tracked(&[x]), || Op::Resize { x: x.clone() })
    }

    pub fn reflect_pad(&self, x: &Var<T>, pad_h: usize, pad_w: usize) -> Result<Var<T>> {
        let y = ops::reflect_pad(x.value(), pad_h, pad_w)?;
        self.push(y, Self::tracked(&[x]), || Op::Pad { x: x.clone() })
    }

    pub fn crop(&self, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
        let y = ops::crop(x.value(), h, w)?;
        self.push(y, Self::tracked(&[x]), || Op::Crop { x: x.clone() })
    }

    /// Sum of all elements as a (1, 1, 1, 1) tensor.
    pub fn sum(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = Tensor::scalar(x.value().sum());
        self.push(y, Self::tracked(&[x]), || Op::Sum {
            x: x.clone(),
            mean: false,
        })
    }

    pub fn mean(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = T::from_f64(x.value().numel().max(1) as f64);
        let y = Tensor::scalar(x.value().sum() / n);
        self.push(y, Self::tracked(&[x]), || Op::Sum {
            x: x.clone(),
            mean: true,
        })
    }

    pub fn channel_gram(&self, q: &Var<T>, k: &Var<T>, heads: usize) -> Result<Var<T>> {
        let y = ops::channel_gram(q.value(), k.value(), heads)?;
        self.push(y, Self::tracked(&[q, k]), || Op::Gram {
            q: q.clone(),
            k: k.clone(),
            heads,
        })
    }

    pub fn head_mix(&self, attn: &Var<T>, v: &Var<T>, heads: usize) -> Result<Var<T>> {
        let y = ops::head_mix(attn.value(), v.value(), heads)?;
        self.push(y, Self::tracked(&[attn, v]), || Op::HeadMix {
            attn: attn.clone(),
            v: v.clone(),
            heads,
        })
    }

    pub fn codebook_mix(&self, w: &Var<T>, cb: &Var<T>) -> Result<Var<T>> {
        let y = ops::codebook_mix(w.value(), cb.value())?;
        self.push(y, Self::tracked(&[w, cb]), || Op::CodebookMix {
            w: w.clone(),
            cb: cb.clone(),
        })
    }

    pub fn normalize_spatial(&self, x: &Var<T>, eps: T) -> Result<Var<T>> {
        let y = ops::normalize_spatial(x.value(), eps);
        self.push(y, Self::tracked(&[x]), || Op::NormalizeSpatial { x: x.clone(), eps })
    }

    pub fn route_flatten(&self, x: &Var<T>, dir: ScanDirection) -> Result<Var<T>> {
        let y = ssm::route_flatten(x.value(), dir);
        self.push(y, Self::tracked(&[x]), || Op::RouteFlatten { x: x.clone(), dir })
    }

    pub fn route_unflatten(&self, x: &Var<T>, dir: ScanDirection, h: usize, w: usize) -> Result<Var<T>> {
        let y = ssm::route_unflatten(x.value(), dir, h, w)?;
        self.push(y, Self::tracked(&[x]), || Op::RouteUnflatten { x: x.clone(), dir })
    }

    /// Selective scan over sequences laid out as (N, 1, L, C).
    pub fn selective_scan(&self, inputs: ssm::ScanInputs<Var<T>>) -> Result<Var<T>> {
        let values = inputs.map_ref(|v| v.value());
        let tracked = Self::tracked(&inputs.all());
        let keep = self.recording && tracked;
        let (y, states) = ssm::scan_forward(&values, keep)?;
        self.push(y, tracked, || Op::Scan { inputs, states })
    }

    /// Records a forward-only op whose value was computed elsewhere. A
    /// backward pass through it fails with [`Error::Unsupported`].
    pub fn opaque(&self, name: &str, inputs: &[&Var<T>], value: Tensor<T>) -> Result<Var<T>> {
        self.push(value, Self::tracked(inputs), || Op::Opaque { name: name.to_owned() })
    }

    /// Backpropagates from a scalar output.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if loss.value().numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        self.backward_with(loss, Tensor::ones(loss.shape()))
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with(&self, out: &Var<T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let mut by_name = BTreeMap::new();
        let Some(root) = out.id else {
            return Ok(Gradients { by_node: grads, by_name });
        };
        if seed.shape() != out.shape() {
            return Err(Error::shape(format!(
                "seed gradient {:?} does not match output {:?}",
                seed.shape(),
                out.shape()
            )));
        }
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            debug_assert_eq!(g.shape(), node.shape);
            if let Op::Leaf { name } = &node.op {
                if let Some(name) = name {
                    accumulate_named(&mut by_name, name, &g)?;
                }
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in vjp(&node.op, &g)? {
                if let Some(iid) = input {
                    accumulate(&mut grads[iid], gi)?;
                }
            }
            // interior gradients are not kept
        }
        Ok(Gradients { by_node: grads, by_name })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient shape {:?} does not match accumulator {:?}",
                    g.shape(),
                    acc.shape()
                )));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

fn accumulate_named<T: Scalar>(map: &mut BTreeMap<String, Tensor<T>>, name: &str, g: &Tensor<T>) -> Result<()> {
    let mut slot = map.remove(name);
    accumulate(&mut slot, g.clone())?;
    if let Some(t) = slot {
        map.insert(name.to_owned(), t);
    }
    Ok(())
}

type Contribs<T> = Vec<(Option<NodeId>, Tensor<T>)>;

/// Vector-Jacobian product of one node: gradient contributions to its inputs.
fn vjp<T: Scalar>(op: &Op<T>, g: &Tensor<T>) -> Result<Contribs<T>> {
    let mut out: Contribs<T> = Vec::new();
    match op {
        Op::Leaf { .. } => {}
        Op::Conv { x, w, b, spec } => {
            let (gx, gw, gb) = ops::conv2d_backward(x.value(), w.value(), *spec, g)?;
            out.push((x.id, gx));
            out.push((w.id, gw));
            if let Some(b) = b {
                out.push((b.id, gb.reshape(b.shape())?));
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (gx, gg, gb) = ops::layer_norm_backward(x.value(), gamma.value(), beta.value(), *eps, g)?;
            out.push((x.id, gx));
            out.push((gamma.id, gg));
            out.push((beta.id, gb));
        }
        Op::Act { x, kind } => out.push((x.id, ops::activation_backward(x.value(), *kind, g))),
        Op::Softmax { x, y, axis } => out.push((x.id, ops::softmax_backward(y, *axis, g)?)),
        Op::Binary { a, b, op } => {
            let (ga, gb) = ops::ew_backward(a.value(), b.value(), *op, g)?;
            out.push((a.id, ga));
            out.push((b.id, gb));
        }
        Op::Scale { x, k } => out.push((x.id, g.map(|v| v * *k))),
        Op::Gap { x } => out.push((x.id, ops::global_avg_pool_backward(x.shape(), g))),
        Op::Rearrange { x, r, dir } => {
            out.push((x.id, ops::pixel_rearrange(g, *r, dir.inverse())?));
        }
        Op::Concat { a, b } => {
            let ca = a.shape().c();
            out.push((a.id, ops::narrow_channels(g, 0, ca)?));
            out.push((b.id, ops::narrow_channels(g, ca, b.shape().c())?));
        }
        Op::Narrow { x, start } => {
            let s = x.shape();
            let len = g.shape().c();
            let mut gx = Tensor::zeros(s);
            for (dst, src) in gx.data_mut().chunks_mut(s.c()).zip(g.data().chunks(len)) {
                dst[*start..*start + len].copy_from_slice(src);
            }
            out.push((x.id, gx));
        }
        Op::Reshape { x } => out.push((x.id, g.clone().reshape(x.shape())?)),
        Op::Resize { x } => out.push((x.id, ops::resize_bilinear_backward(x.shape(), g))),
        Op::Pad { x } => out.push((x.id, ops::reflect_pad_backward(x.shape(), g))),
        Op::Crop { x } => out.push((x.id, ops::crop_backward(x.shape(), g))),
        Op::Sum { x, mean } => {
            let mut v = g.data()[0];
            if *mean {
                v = v / T::from_f64(x.value().numel().max(1) as f64);
            }
            out.push((x.id, Tensor::full(x.shape(), v)));
        }
        Op::Gram { q, k, heads } => {
            let (gq, gk) = ops::channel_gram_backward(q.value(), k.value(), *heads, g)?;
            out.push((q.id, gq));
            out.push((k.id, gk));
        }
        Op::HeadMix { attn, v, heads } => {
            let (ga, gv) = ops::head_mix_backward(attn.value(), v.value(), *heads, g)?;
            out.push((attn.id, ga));
            out.push((v.id, gv));
        }
        Op::CodebookMix { w, cb } => {
            let (gw, gcb) = ops::codebook_mix_backward(w.value(), cb.value(), g);
            out.push((w.id, gw));
            out.push((cb.id, gcb));
        }
        Op::NormalizeSpatial { x, eps } => {
            out.push((x.id, ops::normalize_spatial_backward(x.value(), *eps, g)));
        }
        Op::RouteFlatten { x, dir } => {
            let s = x.shape();
            out.push((x.id, ssm::route_unflatten(g, *dir, s.h(), s.w())?));
        }
        Op::RouteUnflatten { x, dir, .. } => out.push((x.id, ssm::route_flatten(g, *dir))),
        Op::Scan { inputs, states } => {
            let values = inputs.map_ref(|v| v.value());
            let grads = ssm::scan_backward(&values, states, g)?;
            let ids = inputs.map_ref(|v| v.id);
            for (id, gt) in ids.into_list().into_iter().zip(grads.into_list()) {
                out.push((id, gt));
            }
        }
        Op::Opaque { name, .. } => return Err(Error::Unsupported(name.clone())),
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], f: impl Fn(usize) -> f64) -> Tensor<f64> {
        let mut i = 0;
        Tensor::from_fn(shape, |_| {
            i += 1;
            f(i)
        })
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let tape = Tape::recording();
        let x = tape.variable(Some("x"), t([1, 2, 3, 4], |i| i as f64 * 0.1));
        let loss = tape.sum(&x).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert!(g.named("x").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn product_rule() {
        let tape = Tape::recording();
        let a = tape.variable(Some("a"), t([1, 2, 2, 3], |i| (i as f64).sin()));
        let b = tape.variable(Some("b"), t([1, 2, 2, 3], |i| (i as f64).cos()));
        let loss = tape.sum(&tape.mul(&a, &b).unwrap()).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.named("a").unwrap(), b.value());
        assert_eq!(g.named("b").unwrap(), a.value());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let tape = Tape::recording();
        let x = tape.variable(Some("x"), t([1, 1, 1, 3], |i| i as f64));
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.backward(&tape.sum(&y).unwrap()).unwrap();
        assert_eq!(g.named("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f32>::inference();
        let x = tape.variable(Some("x"), Tensor::ones([1, 2, 2, 2]));
        let y = tape.silu(&x).unwrap();
        assert!(y.id().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn opaque_node_blocks_backward() {
        let tape = Tape::recording();
        let x = tape.variable(Some("x"), t([1, 1, 1, 2], |i| i as f64));
        let q = tape.opaque("quantize", &[&x], x.value().map(|v| v.round())).unwrap();
        let err = tape.backward(&tape.sum(&q).unwrap()).err().unwrap();
        assert!(matches!(&err, Error::Unsupported(n) if n == "quantize"), "{err}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let tape = Tape::recording();
        let x = tape.variable(Some("x"), t([1, 1, 1, 2], |i| i as f64 - 1.0));
        let err = tape.div(&x, &x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }), "{err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::recording();
            let x = tape.variable(Some("x"), t([1, 3, 3, 4], |i| (i as f64 * 0.7).sin()));
            let y = tape.gelu(&tape.softmax(&x, 3).unwrap()).unwrap();
            let g = tape.backward(&tape.mean(&y).unwrap()).unwrap();
            g.named("x").unwrap().clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
