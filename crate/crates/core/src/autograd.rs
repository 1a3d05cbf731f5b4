//! A reverse-mode tape over [`Tensor`] values.
//!
//! Each op records its inputs and a vector-Jacobian closure. `backward`
//! walks the tape once in reverse. A tape is single-threaded; build one per
//! forward pass.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, Activation, ConvGeom, DeformGeom};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Ctx<'a> {
    grad: &'a [f32],
    inputs: &'a [&'a Tensor],
    output: &'a Tensor,
}

type Vjp = Box<dyn Fn(&Ctx) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    vjp: Option<Vjp>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.0.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

/// Parameters of one convolution as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Vec::new(), self.grad_enabled, None)
    }

    /// A non-differentiable input.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.value(v).dims().to_vec()
    }

    fn rc(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn push(&self, t: Tensor, parents: Vec<usize>, requires_grad: bool, vjp: Option<Vjp>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            parents,
            requires_grad,
            vjp: if requires_grad { vjp } else { None },
        });
        Var(nodes.len() - 1)
    }

    fn record(&self, t: Tensor, parents: &[Var], vjp: Vjp) -> Var {
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(
            t,
            parents.iter().map(|p| p.0).collect(),
            requires,
            Some(vjp),
        )
    }

    /// Reverse sweep from `out` seeded with ones. Gradients of interior
    /// nodes are consumed as the sweep passes them; leaves keep theirs.
    pub fn backward(&self, out: Var) -> Grads {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        if !nodes[out.0].requires_grad {
            return Grads(grads);
        }
        grads[out.0] = Some(vec![1.0; nodes[out.0].value.numel()]);
        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            let Some(vjp) = &node.vjp else { continue };
            let Some(g) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &*nodes[p].value).collect();
            let parent_grads = vjp(&Ctx {
                grad: &g,
                inputs: &inputs,
                output: &node.value,
            });
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Grads(grads)
    }

    pub fn conv2d(&self, x: Var, p: &ConvVars) -> Result<Var> {
        let xt = self.rc(x);
        let wt = self.rc(p.weight);
        let (n, cin, h, w) = xt.nchw()?;
        let [cout, cg, kh, kw] = wt.dims()[..] else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be rank 4, got {:?}", wt.dims()),
            ));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", "only square kernels are supported"));
        }
        if p.groups == 0 || cg * p.groups != cin {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels C_in={cin} do not match weight C_in/groups={cg} with groups={}",
                    p.groups
                ),
            ));
        }
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride: p.stride,
            pad: p.padding,
            groups: p.groups,
        };
        g.validate()?;
        let bt = match p.bias {
            Some(b) => {
                let b = self.rc(b);
                if b.dims() != [cout] {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias dims {:?} but C_out={cout}", b.dims()),
                    ));
                }
                Some(b)
            }
            None => None,
        };
        let y = kernels::conv2d_forward(xt.data(), wt.data(), bt.as_ref().map(|b| b.data()), &g);
        let (ho, wo) = g.out_hw();
        let out = Tensor::new(&[n, cout, ho, wo], y)?;
        let mut parents = vec![x, p.weight];
        parents.extend(p.bias);
        let has_bias = p.bias.is_some();
        Ok(self.record(
            out,
            &parents,
            Box::new(move |c| {
                let (dx, dw, db) =
                    kernels::conv2d_backward(c.inputs[0].data(), c.inputs[1].data(), c.grad, &g);
                let mut v = vec![Some(dx), Some(dw)];
                if has_bias {
                    v.push(Some(db));
                }
                v
            }),
        ))
    }

    /// Modulated deformable convolution, stride 1, "same" padding.
    /// `offsets` is `[n, 3*k*k, h, w]` (see [`DeformGeom`]).
    pub fn deform_conv2d(&self, x: Var, offsets: Var, weight: Var) -> Result<Var> {
        let xt = self.rc(x);
        let ot = self.rc(offsets);
        let wt = self.rc(weight);
        let (n, cin, h, w) = xt.nchw()?;
        let [cout, wc, k, k2] = wt.dims()[..] else {
            return Err(Error::shape("deform_conv2d", "weight must be rank 4"));
        };
        if wc != cin || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "deform_conv2d",
                format!("weight {:?} incompatible with C_in={cin}", wt.dims()),
            ));
        }
        if ot.dims() != [n, 3 * k * k, h, w] {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "offsets dims {:?}, expected {:?}",
                    ot.dims(),
                    [n, 3 * k * k, h, w]
                ),
            ));
        }
        let g = DeformGeom {
            n,
            cin,
            h,
            w,
            cout,
            k,
        };
        let (y, raw) = kernels::deform_conv_forward(xt.data(), ot.data(), wt.data(), &g);
        let out = Tensor::new(&[n, cout, h, w], y)?;
        Ok(self.record(
            out,
            &[x, offsets, weight],
            Box::new(move |c| {
                let (dx, doff, dw) = kernels::deform_conv_backward(
                    c.inputs[0].data(),
                    c.inputs[1].data(),
                    c.inputs[2].data(),
                    &raw,
                    c.grad,
                    &g,
                );
                vec![Some(dx), Some(doff), Some(dw)]
            }),
        ))
    }

    /// `coords: [n, 2, ho, wo]` holds row then column sampling positions.
    pub fn bilinear_sample(&self, x: Var, coords: Var) -> Result<Var> {
        let xt = self.rc(x);
        let ct = self.rc(coords);
        let (n, c, h, w) = xt.nchw()?;
        let (cn, two, ho, wo) = ct.nchw()?;
        if cn != n || two != 2 {
            return Err(Error::shape(
                "bilinear_sample",
                format!("coords dims {:?} for input {:?}", ct.dims(), xt.dims()),
            ));
        }
        if !ct.is_finite() {
            return Err(Error::NonFinite("bilinear_sample coordinates"));
        }
        let y = kernels::bilinear_sample_forward(xt.data(), ct.data(), (n, c, h, w), (ho, wo));
        let out = Tensor::new(&[n, c, ho, wo], y)?;
        Ok(self.record(
            out,
            &[x, coords],
            Box::new(move |ctx| {
                let (dx, dc) = kernels::bilinear_sample_backward(
                    ctx.inputs[0].data(),
                    ctx.inputs[1].data(),
                    ctx.grad,
                    (n, c, h, w),
                    (ho, wo),
                );
                vec![Some(dx), Some(dc)]
            }),
        ))
    }

    pub fn activation(&self, kind: Activation, x: Var) -> Var {
        let xt = self.rc(x);
        let data = xt.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(xt.dims(), data).expect("same dims");
        self.record(
            out,
            &[x],
            Box::new(move |c| {
                let d = c.inputs[0]
                    .data()
                    .iter()
                    .zip(c.output.data())
                    .zip(c.grad)
                    .map(|((&x, &y), &g)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn avg_pool(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xt = self.rc(x);
        let shape = xt.nchw()?;
        let (n, c, h, w) = shape;
        if k == 0 || stride == 0 || k > h || k > w {
            return Err(Error::shape(
                "avg_pool",
                format!("window {k} does not fit input H {h} W {w}"),
            ));
        }
        let y = kernels::avg_pool_forward(xt.data(), shape, k, stride);
        let out = Tensor::new(&[n, c, (h - k) / stride + 1, (w - k) / stride + 1], y)?;
        Ok(self.record(
            out,
            &[x],
            Box::new(move |ctx| vec![Some(kernels::avg_pool_backward(ctx.grad, shape, k, stride))]),
        ))
    }

    /// Mean over the full spatial extent; `[n,c,h,w] -> [n,c,1,1]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.value(x).nchw()?;
        if h != w {
            // Square window only; the backbone never produces anything else.
            return Err(Error::shape(
                "global_avg_pool",
                format!("non-square map {h}x{w}"),
            ));
        }
        self.avg_pool(x, h, 1)
    }

    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_channels", "no inputs"));
        }
        let ts: Vec<Rc<Tensor>> = xs.iter().map(|&v| self.rc(v)).collect();
        let (n, _, h, w) = ts[0].nchw()?;
        let mut chans = Vec::with_capacity(ts.len());
        for t in &ts {
            let (tn, tc, th, tw) = t.nchw()?;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("input {:?} does not match N={n} H={h} W={w}", t.dims()),
                ));
            }
            chans.push(tc);
        }
        let ctot: usize = chans.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (t, &c) in ts.iter().zip(&chans) {
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, ctot, h, w], data)?;
        Ok(self.record(
            out,
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<f32>> = chans
                    .iter()
                    .map(|&c| Vec::with_capacity(n * c * hw))
                    .collect();
                let mut pos = 0;
                for _ in 0..n {
                    for (g, &c) in grads.iter_mut().zip(&chans) {
                        g.extend_from_slice(&ctx.grad[pos..pos + c * hw]);
                        pos += c * hw;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Elementwise product; `b` may have extent 1 wherever `a` does not
    /// (same rank), and is broadcast there.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let at = self.rc(a);
        let bt = self.rc(b);
        let map = BroadcastMap::new("mul", at.dims(), bt.dims())?;
        let mut data = at.data().to_vec();
        map.for_each(|ia, ib| data[ia] *= bt.data()[ib]);
        let out = Tensor::new(at.dims(), data)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |c| {
                let (av, bv) = (c.inputs[0].data(), c.inputs[1].data());
                let mut da = vec![0.0f32; av.len()];
                let mut db = vec![0.0f32; bv.len()];
                map.for_each(|ia, ib| {
                    da[ia] = c.grad[ia] * bv[ib];
                    db[ib] += c.grad[ia] * av[ia];
                });
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let at = self.rc(a);
        let bt = self.rc(b);
        if at.dims() != bt.dims() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", at.dims(), bt.dims()),
            ));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(at.dims(), data)?;
        Ok(self.record(
            out,
            &[a, b],
            Box::new(|c| vec![Some(c.grad.to_vec()), Some(c.grad.to_vec())]),
        ))
    }

    pub fn add_scalar(&self, a: Var, s: f32) -> Var {
        let at = self.rc(a);
        let data = at.data().iter().map(|x| x + s).collect();
        let out = Tensor::new(at.dims(), data).expect("same dims");
        self.record(out, &[a], Box::new(|c| vec![Some(c.grad.to_vec())]))
    }

    pub fn reshape(&self, x: Var, dims: &[usize]) -> Result<Var> {
        let xt = self.rc(x);
        let out = Tensor::new(dims, xt.data().to_vec()).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {dims:?}", xt.dims()),
            )
        })?;
        Ok(self.record(out, &[x], Box::new(|c| vec![Some(c.grad.to_vec())])))
    }

    /// Sum of every element, accumulated in `f64`.
    pub fn sum(&self, x: Var) -> Var {
        let xt = self.rc(x);
        let s = xt.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let out = Tensor::new(&[1], vec![s]).expect("scalar");
        let n = xt.numel();
        self.record(out, &[x], Box::new(move |c| vec![Some(vec![c.grad[0]; n])]))
    }

    /// Mean softmax cross-entropy of `logits: [n, k]`. Returns the scalar
    /// loss variable and the softmax probabilities.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let lt = self.rc(logits);
        let [n, k] = lt.dims()[..] else {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [N, K], got {:?}", lt.dims()),
            ));
        };
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for batch of {n}", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let (loss, probs) = kernels::softmax_cross_entropy(lt.data(), labels, k);
        let probs = Tensor::new(&[n, k], probs)?;
        let p = probs.data().to_vec();
        let labels = labels.to_vec();
        let out = Tensor::new(&[1], vec![loss])?;
        let var = self.record(
            out,
            &[logits],
            Box::new(move |c| {
                let scale = c.grad[0] / n as f32;
                let mut d: Vec<f32> = p.iter().map(|v| v * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= scale;
                }
                vec![Some(d)]
            }),
        );
        Ok((var, probs))
    }
}

/// Index pairing for same-rank broadcasting of `b` onto `a`.
#[derive(Clone)]
struct BroadcastMap {
    a_dims: Vec<usize>,
    b_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {b:?} onto {a:?}"),
            ));
        }
        let mut strides = vec![0; b.len()];
        let mut acc = 1;
        for i in (0..b.len()).rev() {
            strides[i] = if b[i] == 1 { 0 } else { acc };
            acc *= b[i];
        }
        Ok(Self {
            a_dims: a.to_vec(),
            b_strides: strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let total: usize = self.a_dims.iter().product();
        if total == 0 {
            return;
        }
        let rank = self.a_dims.len();
        // Innermost run is contiguous in `a`; `b` advances by its stride.
        let inner = self.a_dims[rank - 1];
        let inner_stride = self.b_strides[rank - 1];
        let mut idx = vec![0usize; rank];
        let mut ia = 0;
        while ia < total {
            let ib0: usize = idx.iter().zip(&self.b_strides).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                f(ia + j, ib0 + j * inner_stride);
            }
            ia += inner;
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < self.a_dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
}
