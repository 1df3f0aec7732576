//! Reverse-mode differentiation over a recorded list of operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already topologically sorted and the
//! backward sweep is a single reverse walk. Parameters are borrowed, not
//! copied; gradients come back in an owned [`Gradients`] table once the graph
//! has been consumed.

use std::borrow::Cow;

use super::kernels::{self, ConvGeom, View};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        out_c: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        /// Geometry of the *forward* convolution this layer inverts.
        geom: ConvGeom,
        in_c: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        k: usize,
    },
    LogSoftmax {
        x: Var,
        k: usize,
    },
    Reshape(Var),
    ScaleRows {
        x: Var,
        mask: Var,
        m: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumRows {
        x: Var,
        k: usize,
    },
    Gather {
        x: Var,
        k: usize,
        idx: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    SoftmaxXent {
        logits: Var,
        k: usize,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f32]>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Moves the gradients of `vars` into the `grad` slots of `params`, in
    /// order. Untracked parameters are left without a gradient.
    pub fn assign<'t>(&mut self, vars: &[Var], params: impl IntoIterator<Item = &'t mut Tensor>) {
        for (v, p) in vars.iter().zip(params) {
            p.grad = self.take(*v);
        }
    }
}

fn dim_check(op: &'static str, axis: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            op,
            axis: axis.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

fn acc(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f32]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn grad_of(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Borrows a tensor as a leaf; tracked iff `t.requires_grad`.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Takes ownership of a tensor as a leaf; tracked iff `t.requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, needs)
    }

    /// Borrows an untracked leaf.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Copies the value of `v` into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let shape = n.shape.clone();
        let data = n.value.to_vec();
        self.push(shape, Cow::Owned(data), Op::Leaf, false)
    }

    /// Whether each ReLU input is positive, for every ReLU in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.node(v).value[0]
    }

    /// Valid 2-D convolution. `x` is `[C, H, W]` or `[N, C, H, W]`,
    /// `w` is `[C_out, C_in, kh, kw]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let xs = self.shape(x).to_vec();
        let (batched, n, c, h, wd) = match xs.as_slice() {
            [c, h, w] => (false, 1, *c, *h, *w),
            [n, c, h, w] => (true, *n, *c, *h, *w),
            _ => {
                return Err(Error::Shape {
                    op: OP,
                    msg: format!("input must be rank 3 or 4, got {xs:?}"),
                })
            }
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::Shape {
                op: OP,
                msg: format!("kernel must be rank 4, got {ws:?}"),
            });
        }
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        dim_check(OP, "in_channels", ws[1], c)?;
        dim_check(OP, "bias", oc, self.node(b).value.len())?;
        if h < kh {
            return Err(Error::Shape {
                op: OP,
                msg: format!("height {h} smaller than kernel height {kh}"),
            });
        }
        if wd < kw {
            return Err(Error::Shape {
                op: OP,
                msg: format!("width {wd} smaller than kernel width {kw}"),
            });
        }
        let geom = ConvGeom {
            batch: n,
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = vec![0.0; oc * geom.positions()];
        kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), &geom, oc, &mut out);
        let needs = self.grad_of(x) || self.grad_of(w) || self.grad_of(b);
        let shape = if batched {
            vec![n, oc, oh, ow]
        } else {
            vec![oc, oh, ow]
        };
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c: oc,
            },
            needs,
        ))
    }

    /// Transposed convolution inverting a valid convolution with the same
    /// kernel size and stride. `x` is `[N, C_in, H, W]`, `w` is
    /// `[C_in, C_out, kh, kw]`; output is `[N, C_out, (H−1)s+kh, (W−1)s+kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        if stride == 0 {
            return Err(Error::InvalidArgument(
                "conv_transpose2d stride must be >= 1".into(),
            ));
        }
        let xs = self.shape(x).to_vec();
        let [n, ic, h, wd] = xs[..] else {
            return Err(Error::Shape {
                op: OP,
                msg: format!("input must be rank 4, got {xs:?}"),
            });
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::Shape {
                op: OP,
                msg: format!("kernel must be rank 4, got {ws:?}"),
            });
        }
        dim_check(OP, "in_channels", ws[0], ic)?;
        let (oc, kh, kw) = (ws[1], ws[2], ws[3]);
        dim_check(OP, "bias", oc, self.node(b).value.len())?;
        let out_h = (h - 1) * stride + kh;
        let out_w = (wd - 1) * stride + kw;
        let geom = ConvGeom {
            batch: n,
            channels: oc,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
        };
        let hw = h * wd;
        let npos = n * hw;
        // xt[ic, N·HW]
        let mut xt = vec![0.0; ic * npos];
        kernels::swap_outer(self.value(x), n, ic, hw, &mut xt);
        // cols[oc·kh·kw, N·HW] = Wᵀ[P, ic] · xt[ic, N·HW]
        let p = geom.patch();
        let mut cols = vec![0.0; p * npos];
        kernels::gemm(
            p,
            ic,
            npos,
            View::t(self.value(w), p),
            View::rows(&xt, npos),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; n * oc * out_h * out_w];
        kernels::col2im(&cols, &geom, &mut out);
        let bias = self.value(b);
        for (i, plane) in out.chunks_exact_mut(out_h * out_w).enumerate() {
            let bv = bias[i % oc];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let needs = self.grad_of(x) || self.grad_of(w) || self.grad_of(b);
        Ok(self.push(
            vec![n, oc, out_h, out_w],
            Cow::Owned(out),
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_c: ic,
            },
            needs,
        ))
    }

    /// Fully connected layer. `x` is `[N_in]` or `[B, N_in]`, `w` is
    /// `[N_out, N_in]`, `b` is `[N_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let (batched, rows, inp) = match xs.as_slice() {
            [i] => (false, 1, *i),
            [r, i] => (true, *r, *i),
            _ => {
                return Err(Error::Shape {
                    op: OP,
                    msg: format!("input must be rank 1 or 2, got {xs:?}"),
                })
            }
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::Shape {
                op: OP,
                msg: format!("weight must be rank 2, got {ws:?}"),
            });
        }
        dim_check(OP, "in_features", ws[1], inp)?;
        let out = ws[0];
        dim_check(OP, "bias", out, self.node(b).value.len())?;
        let mut y = Vec::with_capacity(rows * out);
        let bias = self.value(b);
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        if rows <= kernels::THIN_ROWS {
            let (xv, wv) = (self.value(x), self.value(w));
            for (xr, yr) in xv.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
                for (yo, wr) in yr.iter_mut().zip(wv.chunks_exact(inp)) {
                    *yo += kernels::dot(wr, xr);
                }
            }
        } else {
            kernels::gemm(
                rows,
                inp,
                out,
                View::rows(self.value(x), inp),
                View::t(self.value(w), inp),
                1.0,
                &mut y,
            );
        }
        let needs = self.grad_of(x) || self.grad_of(w) || self.grad_of(b);
        let shape = if batched { vec![rows, out] } else { vec![out] };
        Ok(self.push(
            shape,
            Cow::Owned(y),
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            needs,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let value: Vec<f32> = self.value(x).iter().map(|v| f(*v)).collect();
        let needs = self.grad_of(x);
        self.push(shape, Cow::Owned(value), op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn last_axis(&self, op: &'static str, x: Var) -> Result<usize> {
        self.shape(x).last().copied().ok_or(Error::Shape {
            op,
            msg: "empty shape".into(),
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_axis("softmax", x)?;
        let mut out = vec![0.0; self.value(x).len()];
        kernels::softmax_rows(self.value(x), k, &mut out);
        let shape = self.shape(x).to_vec();
        let needs = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { x, k }, needs))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_axis("log_softmax", x)?;
        let mut out = vec![0.0; self.value(x).len()];
        kernels::log_softmax_rows(self.value(x), k, &mut out);
        let shape = self.shape(x).to_vec();
        let needs = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(out), Op::LogSoftmax { x, k }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        dim_check(
            "reshape",
            "numel",
            self.value(x).len(),
            shape.iter().product(),
        )?;
        let value = self.value(x).to_vec();
        let needs = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(value), Op::Reshape(x), needs))
    }

    /// `out[..., k, :] = mask[..., k] * x[..., k, :]` where the trailing axis
    /// of `x` has length `m` and `mask` has one entry per row of `x`.
    pub fn scale_rows(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let m = *xs.last().ok_or(Error::Shape {
            op: "scale_rows",
            msg: "empty shape".into(),
        })?;
        dim_check(
            "scale_rows",
            "rows",
            self.value(x).len() / m,
            self.value(mask).len(),
        )?;
        let mv = self.value(mask);
        let out: Vec<f32> = self
            .value(x)
            .chunks_exact(m)
            .zip(mv)
            .flat_map(|(row, s)| row.iter().map(move |v| v * s))
            .collect();
        let needs = self.grad_of(x) || self.grad_of(mask);
        Ok(self.push(xs, Cow::Owned(out), Op::ScaleRows { x, mask, m }, needs))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                msg: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok((
            self.shape(a).to_vec(),
            self.grad_of(a) || self.grad_of(b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary("add", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(shape, Cow::Owned(v), Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary("sub", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(shape, Cow::Owned(v), Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, needs) = self.binary("mul", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(shape, Cow::Owned(v), Op::Mul(a, b), needs))
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| *v as f64).sum();
        let needs = self.grad_of(x);
        self.push(vec![1], Cow::Owned(vec![s as f32]), Op::Sum(x), needs)
    }

    /// Mean of all elements, accumulated in `f64`.
    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let s: f64 = vals.iter().map(|v| *v as f64).sum::<f64>() / vals.len() as f64;
        let needs = self.grad_of(x);
        self.push(vec![1], Cow::Owned(vec![s as f32]), Op::Mean(x), needs)
    }

    /// Sums over the last axis: `[.., K]` → `[..]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let k = self.last_axis("sum_rows", x)?;
        let v: Vec<f32> = self
            .value(x)
            .chunks_exact(k)
            .map(|r| r.iter().map(|v| *v as f64).sum::<f64>() as f32)
            .collect();
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.grad_of(x);
        Ok(self.push(shape, Cow::Owned(v), Op::SumRows { x, k }, needs))
    }

    /// Picks `x[i, idx[i]]` from a `[N, K]` tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [n, k] = xs[..] else {
            return Err(Error::Shape {
                op: "gather",
                msg: format!("input must be rank 2, got {xs:?}"),
            });
        };
        dim_check("gather", "rows", n, idx.len())?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let vals = self.value(x);
        let v: Vec<f32> = idx.iter().enumerate().map(|(r, &i)| vals[r * k + i]).collect();
        let needs = self.grad_of(x);
        Ok(self.push(
            vec![n],
            Cow::Owned(v),
            Op::Gather {
                x,
                k,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (_, needs) = self.binary("mse", pred, target)?;
        let p = self.value(pred);
        let t = self.value(target);
        let s: f64 = p
            .iter()
            .zip(t)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![s as f32]),
            Op::Mse { pred, target },
            needs,
        ))
    }

    /// Mean over rows of `−log softmax(logits)[label]`. `logits` is `[K]` or
    /// `[N, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = self.last_axis("softmax_cross_entropy", logits)?;
        let rows = self.value(logits).len() / k;
        dim_check("softmax_cross_entropy", "rows", rows, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let mut logp = vec![0.0; rows * k];
        kernels::log_softmax_rows(self.value(logits), k, &mut logp);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(logp[r * k + l] as f64))
            .sum::<f64>()
            / rows as f64;
        let probs = logp.iter().map(|v| v.exp()).collect();
        let needs = self.grad_of(logits);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![loss as f32]),
            Op::SoftmaxXent {
                logits,
                k,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`. The graph can be
    /// differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        let numel = self.node(loss).value.len();
        if numel != 1 {
            return Err(Error::NonScalarLoss { numel });
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(node, &gout, &mut grads)?;
        }
        // Leaves that take part in the graph but are independent of the loss
        // still get an explicit zero gradient.
        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node<'a>,
        gout: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) -> Result<()> {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_c,
            } => {
                let mut gw = needs(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; len_of(*w)]));
                let mut gb = needs(*b).then(|| grads[b.0].take().unwrap_or_else(|| vec![0.0; len_of(*b)]));
                let mut gx = needs(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; len_of(*x)]));
                kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gout,
                    geom,
                    *out_c,
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                    gx.as_deref_mut(),
                );
                grads[w.0] = gw.or(grads[w.0].take());
                grads[b.0] = gb.or(grads[b.0].take());
                grads[x.0] = gx.or(grads[x.0].take());
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                in_c,
            } => {
                let oc = geom.channels;
                let plane = geom.height * geom.width;
                if needs(*b) {
                    let gb = acc(&mut grads[b.0], oc);
                    for (i, pl) in gout.chunks_exact(plane).enumerate() {
                        gb[i % oc] += pl.iter().map(|v| *v as f64).sum::<f64>() as f32;
                    }
                }
                let p = geom.patch();
                let npos = geom.positions();
                let mut gcols = vec![0.0; p * npos];
                kernels::im2col(gout, geom, &mut gcols);
                let hw = npos / geom.batch;
                if needs(*w) {
                    let mut xt = vec![0.0; in_c * npos];
                    kernels::swap_outer(self.value(*x), geom.batch, *in_c, hw, &mut xt);
                    let gw = acc(&mut grads[w.0], in_c * p);
                    kernels::gemm(
                        *in_c,
                        npos,
                        p,
                        View::rows(&xt, npos),
                        View::t(&gcols, npos),
                        1.0,
                        gw,
                    );
                }
                if needs(*x) {
                    let mut gxt = vec![0.0; in_c * npos];
                    kernels::gemm(
                        *in_c,
                        p,
                        npos,
                        View::rows(self.value(*w), p),
                        View::rows(&gcols, npos),
                        0.0,
                        &mut gxt,
                    );
                    let mut gx = vec![0.0; in_c * npos];
                    kernels::swap_outer(&gxt, *in_c, geom.batch, hw, &mut gx);
                    let slot = acc(&mut grads[x.0], len_of(*x));
                    slot.iter_mut().zip(gx).for_each(|(s, g)| *s += g);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                if needs(*b) {
                    let gb = acc(&mut grads[b.0], *out);
                    for row in gout.chunks_exact(*out) {
                        gb.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
                if needs(*w) && *rows <= kernels::THIN_ROWS {
                    let gw = acc(&mut grads[w.0], out * inp);
                    for (gr, xr) in gout.chunks_exact(*out).zip(self.value(*x).chunks_exact(*inp)) {
                        for (gwr, &go) in gw.chunks_exact_mut(*inp).zip(gr) {
                            kernels::axpy(go, xr, gwr);
                        }
                    }
                } else if needs(*w) {
                    let gw = acc(&mut grads[w.0], out * inp);
                    kernels::gemm(
                        *out,
                        *rows,
                        *inp,
                        View::t(gout, *out),
                        View::rows(self.value(*x), *inp),
                        1.0,
                        gw,
                    );
                }
                if needs(*x) && *rows <= kernels::THIN_ROWS {
                    let gx = acc(&mut grads[x.0], rows * inp);
                    for (gr, gxr) in gout.chunks_exact(*out).zip(gx.chunks_exact_mut(*inp)) {
                        for (wr, &go) in self.value(*w).chunks_exact(*inp).zip(gr) {
                            kernels::axpy(go, wr, gxr);
                        }
                    }
                } else if needs(*x) {
                    let gx = acc(&mut grads[x.0], rows * inp);
                    kernels::gemm(
                        *rows,
                        *out,
                        *inp,
                        View::rows(gout, *out),
                        View::rows(self.value(*w), *inp),
                        1.0,
                        gx,
                    );
                }
            }
            Op::Relu(x) => {
                let y = &node.value;
                let gx = acc(&mut grads[x.0], y.len());
                for ((s, g), v) in gx.iter_mut().zip(gout).zip(y.iter()) {
                    if *v > 0.0 {
                        *s += g;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = acc(&mut grads[x.0], y.len());
                for ((s, g), v) in gx.iter_mut().zip(gout).zip(y.iter()) {
                    *s += g * v * (1.0 - v);
                }
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = acc(&mut grads[x.0], y.len());
                for ((s, g), v) in gx.iter_mut().zip(gout).zip(y.iter()) {
                    *s += g * (1.0 - v * v);
                }
            }
            Op::Softmax { x, k } => {
                let y = &node.value;
                let gx = acc(&mut grads[x.0], y.len());
                for ((s, g), yr) in gx
                    .chunks_exact_mut(*k)
                    .zip(gout.chunks_exact(*k))
                    .zip(y.chunks_exact(*k))
                {
                    let dot: f32 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..*k {
                        s[j] += yr[j] * (g[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { x, k } => {
                let y = &node.value;
                let gx = acc(&mut grads[x.0], y.len());
                for ((s, g), yr) in gx
                    .chunks_exact_mut(*k)
                    .zip(gout.chunks_exact(*k))
                    .zip(y.chunks_exact(*k))
                {
                    let total: f32 = g.iter().sum();
                    for j in 0..*k {
                        s[j] += g[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) => {
                let gx = acc(&mut grads[x.0], gout.len());
                gx.iter_mut().zip(gout).for_each(|(s, g)| *s += g);
            }
            Op::Scale(x, c) => {
                let gx = acc(&mut grads[x.0], gout.len());
                gx.iter_mut().zip(gout).for_each(|(s, g)| *s += g * c);
            }
            Op::ScaleRows { x, mask, m } => {
                if needs(*x) {
                    let mv = self.value(*mask);
                    let gx = acc(&mut grads[x.0], gout.len());
                    for ((s, g), c) in gx.chunks_exact_mut(*m).zip(gout.chunks_exact(*m)).zip(mv) {
                        s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
                    }
                }
                if needs(*mask) {
                    let xv = self.value(*x);
                    let gm = acc(&mut grads[mask.0], len_of(*mask));
                    for ((s, g), xr) in gm.iter_mut().zip(gout.chunks_exact(*m)).zip(xv.chunks_exact(*m)) {
                        *s += g.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let gv = acc(&mut grads[v.0], gout.len());
                        gv.iter_mut().zip(gout).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    let gv = acc(&mut grads[a.0], gout.len());
                    gv.iter_mut().zip(gout).for_each(|(s, g)| *s += g);
                }
                if needs(*b) {
                    let gv = acc(&mut grads[b.0], gout.len());
                    gv.iter_mut().zip(gout).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let gv = acc(&mut grads[a.0], gout.len());
                    for ((s, g), o) in gv.iter_mut().zip(gout).zip(bv) {
                        *s += g * o;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let gv = acc(&mut grads[b.0], gout.len());
                    for ((s, g), o) in gv.iter_mut().zip(gout).zip(av) {
                        *s += g * o;
                    }
                }
            }
            Op::Sum(x) => {
                let gx = acc(&mut grads[x.0], len_of(*x));
                gx.iter_mut().for_each(|s| *s += gout[0]);
            }
            Op::Mean(x) => {
                let n = len_of(*x);
                let g = gout[0] / n as f32;
                let gx = acc(&mut grads[x.0], n);
                gx.iter_mut().for_each(|s| *s += g);
            }
            Op::SumRows { x, k } => {
                let gx = acc(&mut grads[x.0], len_of(*x));
                for (row, g) in gx.chunks_exact_mut(*k).zip(gout) {
                    row.iter_mut().for_each(|s| *s += g);
                }
            }
            Op::Gather { x, k, idx } => {
                let gx = acc(&mut grads[x.0], len_of(*x));
                for (r, (&i, g)) in idx.iter().zip(gout).enumerate() {
                    gx[r * k + i] += g;
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = 2.0 * gout[0] / p.len() as f32;
                if needs(*pred) {
                    let gv = acc(&mut grads[pred.0], p.len());
                    for ((s, a), b) in gv.iter_mut().zip(p).zip(t) {
                        *s += scale * (a - b);
                    }
                }
                if needs(*target) {
                    let gv = acc(&mut grads[target.0], p.len());
                    for ((s, a), b) in gv.iter_mut().zip(p).zip(t) {
                        *s -= scale * (a - b);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                k,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let scale = gout[0] / rows as f32;
                let gv = acc(&mut grads[logits.0], rows * k);
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..*k {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        gv[r * k + j] += scale * (probs[r * k + j] - onehot);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().into_param()
    }

    #[test]
    fn conv_output_size_for_dqn_first_layer() {
        let x = Tensor::zeros([6, 84, 84]);
        let w = Tensor::zeros([32, 6, 8, 8]);
        let b = Tensor::zeros([32]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
        let y = g.conv2d(xv, wv, bv, 4).unwrap();
        assert_eq!(g.shape(y), &[32, 20, 20]);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let x = Tensor::new([1, 4, 3], (0..12).map(|v| v as f32 * 0.3 - 1.0).collect()).unwrap();
        let w = Tensor::full([1, 1, 1, 1], 1.0);
        let b = Tensor::zeros([1]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
        let y = g.conv2d(xv, wv, bv, 1).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let x = Tensor::zeros([3, 10, 10]);
        let w = Tensor::zeros([4, 2, 3, 3]);
        let b = Tensor::zeros([4]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
        let err = g.conv2d(xv, wv, bv, 1).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");

        let small = Tensor::zeros([2, 2, 10]);
        let sv = g.param(&small);
        let w2 = Tensor::zeros([4, 2, 3, 3]);
        let w2v = g.param(&w2);
        let err = g.conv2d(sv, w2v, bv, 1).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn conv_output_shape_formula_exhaustive() {
        for h in 1..=30usize {
            for k in 1..=h.min(8) {
                for s in 1..=4 {
                    let x = Tensor::zeros([1, h, h]);
                    let w = Tensor::zeros([1, 1, k, k]);
                    let b = Tensor::zeros([1]);
                    let mut g = Graph::new();
                    let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
                    let y = g.conv2d(xv, wv, bv, s).unwrap();
                    let o = (h - k) / s + 1;
                    assert_eq!(g.shape(y), &[1, o, o], "h={h} k={k} s={s}");
                }
            }
        }
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Tensor::new([3], vec![0.5, -2.0, 7.25]).unwrap();
        let eye = Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let zero_b = Tensor::zeros([3]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&x), g.param(&eye), g.param(&zero_b));
        let y = g.linear(xv, wv, bv).unwrap();
        assert_eq!(g.value(y), x.data());

        let zw = Tensor::zeros([2, 3]);
        let b = Tensor::new([2], vec![1.5, -3.0]).unwrap();
        let (zv, bv2) = (g.param(&zw), g.param(&b));
        let y2 = g.linear(xv, zv, bv2).unwrap();
        assert_eq!(g.value(y2), b.data());
    }

    #[test]
    fn linear_dimension_mismatch() {
        let x = Tensor::zeros([4]);
        let w = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([2]);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.param(&x), g.param(&w), g.param(&b));
        assert!(matches!(g.linear(xv, wv, bv), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros([3]));
        let l = g.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((g.scalar(l) - 3f32.ln()).abs() < 1e-6);

        let sat = g.input(Tensor::new([3], vec![0.0, 1000.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(sat, &[1]).unwrap();
        assert!(g.scalar(l).is_finite());
        assert!(g.scalar(l) < 1e-6);

        assert!(matches!(
            g.softmax_cross_entropy(z, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = param(&[3], vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let zv = g.param(&z);
        let l = g.softmax_cross_entropy(zv, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let want = [e[0] / s - 1.0, e[1] / s, e[2] / s];
        for (a, b) in grads.get(zv).unwrap().iter().zip(want) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mse_basics_and_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.mse(a, a).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let b = g.add_scalar(a, 0.5);
        let l = g.mse(b, a).unwrap();
        assert!((g.scalar(l) - 0.25).abs() < 1e-7);
        let c = g.input(Tensor::zeros([3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn sum_gives_ones_and_constant_gives_zeros() {
        let p = param(&[2, 3], vec![0.1, -4.0, 2.0, 0.0, 9.0, 1.0]);
        let mut g = Graph::new();
        let pv = g.param(&p);
        let s = g.sum(pv);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(pv).unwrap().iter().all(|v| *v == 1.0));

        let mut g = Graph::new();
        let pv = g.param(&p);
        let c = g.input(Tensor::scalar(3.0));
        let loss = g.scale(c, 2.0);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(pv).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_twice_and_non_scalar_are_errors() {
        let p = param(&[3], vec![1.0, 2.0, 3.0]);
        let mut g = Graph::new();
        let pv = g.param(&p);
        let r = g.relu(pv);
        assert!(matches!(g.backward(r), Err(Error::NonScalarLoss { numel: 3 })));
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new([2, 4], vec![0.3, -1.0, 5.0, 2.0, 80.0, 80.0, -80.0, 0.0]).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn untracked_inputs_record_no_gradient() {
        let p = param(&[2], vec![1.0, 2.0]);
        let c = Tensor::new([2], vec![3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let pv = g.param(&p);
        let cv = g.param(&c);
        let m = g.mul(pv, cv).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(pv).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(cv).is_none());
    }
}
