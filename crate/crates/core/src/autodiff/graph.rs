use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, ConvGeom, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    /// Same shape, or either side a single-element tensor.
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    AddRowBias(Var, Var),
    /// x[i, j] * s[i]
    ScaleRows(Var, Var),
    RepeatRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    LinComb(Var, Vec<(f64, Var)>),
    BlockDot { coeffs: Var, v: Var, rank: usize },
    Retract(Var, f64),
    NormalizeRows(Var, f64),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Upsample2x(Var),
    ChannelBias(Var, Var),
    ToTokens(Var),
    FromTokens(Var),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Values are computed eagerly as ops are recorded;
/// [`Graph::backward`] walks the nodes in reverse creation order, which is a
/// valid reverse topological order because parents always precede children.
///
/// A graph lives for one forward pass. Interior mutability lets closures
/// (ODE right-hand sides, model forwards) share `&Graph`.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    bindings: RefCell<Vec<(u64, ParamId, Var)>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg_any(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked, for inputs under test.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter as a leaf. Frozen parameters are recorded as
    /// constants so no gradient work is spent on them.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push_rc(p.value_rc(), Op::Leaf, p.trainable);
        self.bindings.borrow_mut().push((store.store_id(), id, v));
        v
    }

    /// Binds a parameter by name; panics if absent (model code bug).
    pub fn param_named(&self, store: &ParamStore, name: &str) -> Var {
        let id = store
            .id(name)
            .unwrap_or_else(|| panic!("parameter {name} not registered"));
        self.param(store, id)
    }

    pub(crate) fn bindings(&self) -> Ref<'_, Vec<(u64, ParamId, Var)>> {
        self.bindings.borrow()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    // ---- element-wise ------------------------------------------------

    pub fn unary(&self, kind: Unary, x: Var) -> Var {
        let xv = self.value(x);
        let out = match kind {
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Relu => xv.map(|a| a.max(0.0)),
        };
        self.push(out, Op::Unary(kind, x), self.rg(x))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let out = if av.shape() == bv.shape() {
            av.zip_map(&bv, "elementwise", f)?
        } else if bv.len() == 1 {
            let s = bv.data()[0];
            av.map(|x| f(x, s))
        } else if av.len() == 1 {
            let s = av.data()[0];
            bv.map(|y| f(s, y))
        } else {
            return Err(Error::dim("elementwise", av.shape(), bv.shape()));
        };
        Ok(self.push(out, Op::Binary(kind, a, b), self.rg_any(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), self.rg(x))
    }

    /// `base + Σ cᵢ·xᵢ`, accumulated term by term in the given order.
    pub fn lincomb(&self, base: Var, terms: &[(f64, Var)]) -> Result<Var> {
        let bv = self.value(base);
        let vals: Vec<Rc<Tensor>> = terms.iter().map(|(_, v)| self.value(*v)).collect();
        for v in &vals {
            if v.shape() != bv.shape() {
                return Err(Error::dim("lincomb", bv.shape(), v.shape()));
            }
        }
        let slices: Vec<(f64, &[f64])> = terms.iter().zip(&vals).map(|((c, _), v)| (*c, v.data())).collect();
        let mut out = vec![0.0; bv.len()];
        lincomb_kernel(bv.data(), &slices, &mut out);
        let mut deps: Vec<Var> = terms.iter().map(|t| t.1).collect();
        deps.push(base);
        let rg = self.rg_any(&deps);
        Ok(self.push(
            Tensor::new(bv.shape().to_vec(), out)?,
            Op::LinComb(base, terms.to_vec()),
            rg,
        ))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(out, Op::Matmul(a, b), self.rg_any(&[a, b])))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), self.rg(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), self.rg(x)))
    }

    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(x), self.rg(x)))
    }

    // ---- reductions and losses ---------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(x))
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), self.rg(x))
    }

    /// Mean over all elements of `(a - b)²`, no ½ factor.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mse", av.shape(), bv.shape()));
        }
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(
            Tensor::scalar(s / av.len() as f64),
            Op::Mse(a, b),
            self.rg_any(&[a, b]),
        ))
    }

    // ---- broadcasting and indexing -----------------------------------

    /// Adds a length-`cols` bias to every row of a matrix.
    pub fn add_row_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (r, c) = xv.dims2("add_row_bias")?;
        if bv.len() != c {
            return Err(Error::dim("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRowBias(x, bias), self.rg_any(&[x, bias])))
    }

    /// Multiplies row `i` of a matrix by `s[i]`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, c) = xv.dims2("scale_rows")?;
        if sv.len() != r {
            return Err(Error::dim("scale_rows", xv.shape(), sv.shape()));
        }
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let f = sv.data()[i];
            out[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= f);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ScaleRows(x, s), self.rg_any(&[x, s])))
    }

    /// Repeats each row `times` times consecutively: [B×C] → [B·times × C].
    pub fn repeat_rows(&self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("repeat_rows")?;
        let mut out = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(xv.row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![r * times, c], out)?, Op::RepeatRows(x, times), self.rg(x)))
    }

    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(x, Rc::new(idx.to_vec())), self.rg(x)))
    }

    /// Writes row `j` of `x` to row `idx[j]` of a zero matrix with `n_rows` rows.
    pub fn scatter_rows(&self, x: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("scatter_rows")?;
        if r != idx.len() {
            return Err(Error::dim("scatter_rows", xv.shape(), &[idx.len()]));
        }
        let mut out = vec![0.0; n_rows * c];
        for (j, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(Error::contract(format!("scatter index {i} out of range for {n_rows} rows")));
            }
            out[i * c..(i + 1) * c].copy_from_slice(xv.row(j));
        }
        Ok(self.push(
            Tensor::new(vec![n_rows, c], out)?,
            Op::ScatterRows(x, Rc::new(idx.to_vec())),
            self.rg(x),
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
        let (r, _) = vals[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (vr, vc) = v.dims2("concat_cols")?;
            if vr != r {
                return Err(Error::dim("concat_cols", vals[0].shape(), v.shape()));
            }
            widths.push(vc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in &vals {
                out.extend_from_slice(v.row(i));
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            self.rg_any(parts),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
        let (_, c) = vals[0].dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for v in &vals {
            let (vr, vc) = v.dims2("concat_rows")?;
            if vc != c {
                return Err(Error::dim("concat_rows", vals[0].shape(), v.shape()));
            }
            rows += vr;
            out.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::new(vec![rows, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            self.rg_any(parts),
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::contract(format!("row slice {start}..{end} of {r} rows")));
        }
        let out = xv.data()[start * c..end * c].to_vec();
        Ok(self.push(Tensor::new(vec![end - start, c], out)?, Op::SliceRows(x, start), self.rg(x)))
    }

    // ---- model-specific fused ops ------------------------------------

    /// For `coeffs` [B × R·d] viewed as B blocks of R×d and `v` [B × d],
    /// returns [B × R] with entry (b, r) = Σ_k coeffs[b, r, k]·v[b, k].
    pub fn block_dot(&self, coeffs: Var, v: Var, rank: usize) -> Result<Var> {
        let (cv, vv) = (self.value(coeffs), self.value(v));
        let (b, rd) = cv.dims2("block_dot")?;
        let (b2, d) = vv.dims2("block_dot")?;
        if b != b2 || rd != rank * d {
            return Err(Error::dim("block_dot", cv.shape(), vv.shape()));
        }
        let mut out = vec![0.0; b * rank];
        for s in 0..b {
            let vrow = vv.row(s);
            for r in 0..rank {
                let base = s * rd + r * d;
                out[s * rank + r] = crate::tensor::dot(&cv.data()[base..base + d], vrow);
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, rank], out)?,
            Op::BlockDot { coeffs, v, rank },
            self.rg_any(&[coeffs, v]),
        ))
    }

    /// Row-wise scaled-tanh retraction: each row w ↦ (r·tanh(‖w‖/r)/‖w‖)·w.
    pub fn retract_rows(&self, w: Var, r_max: f64) -> Result<Var> {
        let wv = self.value(w);
        let (r, c) = wv.dims2("retract_rows")?;
        let mut out = wv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let s = retract_scale(crate::tensor::norm(row), r_max);
            row.iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::Retract(w, r_max), self.rg(w)))
    }

    /// Row-wise `x / sqrt(‖x‖² + eps²)`.
    pub fn normalize_rows(&self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("normalize_rows")?;
        let mut out = xv.data().to_vec();
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = (crate::tensor::dot(row, row) + eps * eps).sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::NormalizeRows(x, eps), self.rg(x)))
    }

    /// 2-d convolution, NCHW input [B × C_in × H × W], weights
    /// [C_out × C_in × k × k]. Bias is added separately.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            k: ws[2],
            stride,
            pad,
        };
        let (b, c_out) = (xs[0], ws[0]);
        let (ho, wo) = geom.out_hw();
        let (img, ncol, krows) = (geom.c_in * geom.h * geom.w, ho * wo, geom.col_rows());
        let mut cols = vec![0.0; krows * ncol];
        let mut out = vec![0.0; b * c_out * ncol];
        for s in 0..b {
            im2col(&xv.data()[s * img..(s + 1) * img], &geom, &mut cols);
            gemm(
                c_out,
                krows,
                ncol,
                wv.data(),
                false,
                &cols,
                false,
                &mut out[s * c_out * ncol..(s + 1) * c_out * ncol],
                0.0,
            );
        }
        Ok(self.push(
            Tensor::new(vec![b, c_out, ho, wo], out)?,
            Op::Conv2d { x, w, geom },
            self.rg_any(&[x, w]),
        ))
    }

    /// Nearest-neighbour 2× upsampling of NCHW input.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::dim("upsample2x", s, &[0, 0, 0, 0]));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv.data()[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            self.rg(x),
        ))
    }

    /// Adds `bias[b, c]` to every pixel of channel `c` of sample `b`.
    pub fn channel_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let s = xv.shape();
        if s.len() != 4 || bv.shape() != [s[0], s[1]] {
            return Err(Error::dim("channel_bias", s, bv.shape()));
        }
        let hw = s[2] * s[3];
        let mut out = xv.data().to_vec();
        for (p, chunk) in out.chunks_mut(hw).enumerate() {
            let b = bv.data()[p];
            chunk.iter_mut().for_each(|o| *o += b);
        }
        Ok(self.push(
            Tensor::new(s.to_vec(), out)?,
            Op::ChannelBias(x, bias),
            self.rg_any(&[x, bias]),
        ))
    }

    /// [B × C × H × W] → [B·H·W × C], tokens in row-major spatial order.
    pub fn to_tokens(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::dim("to_tokens", s, &[0, 0, 0, 0]));
        }
        let out = bchw_to_tokens(xv.data(), s[0], s[1], s[2] * s[3]);
        Ok(self.push(
            Tensor::new(vec![s[0] * s[2] * s[3], s[1]], out)?,
            Op::ToTokens(x),
            self.rg(x),
        ))
    }

    /// Inverse of [`Graph::to_tokens`].
    pub fn from_tokens(&self, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2("from_tokens")?;
        if r != batch * h * w {
            return Err(Error::dim("from_tokens", xv.shape(), &[batch, h, w]));
        }
        let out = tokens_to_bchw(xv.data(), batch, c, h * w);
        Ok(self.push(Tensor::new(vec![batch, c, h, w], out)?, Op::FromTokens(x), self.rg(x)))
    }

    // ---- backward ----------------------------------------------------

    /// Computes gradients of a scalar `loss` with respect to every node that
    /// requires one. Node gradients are recomputed from scratch on each call;
    /// accumulation across calls happens in [`ParamStore::accumulate_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Tensor::ones(nodes[loss.0].value.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scale factor r·tanh(n/r)/n of the retraction, with its limit 1 at n = 0.
pub fn retract_scale(n: f64, r_max: f64) -> f64 {
    if n < 1e-300 {
        1.0
    } else {
        r_max * (n / r_max).tanh() / n
    }
}

/// out = base + Σ cᵢ·xᵢ, accumulated in term order. Shared by every
/// integrator state type so tape and plain evaluation agree bit for bit.
pub fn lincomb_kernel(base: &[f64], terms: &[(f64, &[f64])], out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (c, x) in terms {
            acc += c * x[j];
        }
        *o = base[j] + acc;
    }
}

pub fn bchw_to_tokens(data: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * n * c];
    for s in 0..b {
        for ch in 0..c {
            for t in 0..n {
                out[(s * n + t) * c + ch] = data[(s * c + ch) * n + t];
            }
        }
    }
    out
}

pub fn tokens_to_bchw(data: &[f64], b: usize, c: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * c * n];
    for s in 0..b {
        for ch in 0..c {
            for t in 0..n {
                out[(s * c + ch) * n + t] = data[(s * n + t) * c + ch];
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], v: Var, g: Tensor) -> Result<()> {
    if !nodes[v.0].requires_grad {
        return Ok(());
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

/// Reduces a broadcast gradient back onto a single-element operand.
fn reduce_to(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |v: &Var| nodes[v.0].value.clone();
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            let gx = match kind {
                Unary::Tanh => g.zip_map(out, "tanh'", |g, y| g * (1.0 - y * y))?,
                Unary::Sigmoid => g.zip_map(out, "sigmoid'", |g, y| g * y * (1.0 - y))?,
                Unary::Relu => g.zip_map(out, "relu'", |g, y| if y > 0.0 { g } else { 0.0 })?,
            };
            accumulate(grads, nodes, *x, gx)?;
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(a), val(b));
            let expand = |t: &Tensor| -> Tensor {
                if t.shape() == g.shape() {
                    t.clone()
                } else {
                    Tensor::full(g.shape(), t.data()[0])
                }
            };
            let (ga, gb) = match kind {
                Binary::Add => (g.clone(), g.clone()),
                Binary::Sub => (g.clone(), g.scale(-1.0)),
                Binary::Mul => {
                    let ga = if rg(a) { g.zip_map(&expand(&bv), "mul'", |g, y| g * y)? } else { g.clone() };
                    let gb = if rg(b) { g.zip_map(&expand(&av), "mul'", |g, x| g * x)? } else { g.clone() };
                    (ga, gb)
                }
            };
            if rg(a) {
                accumulate(grads, nodes, *a, reduce_to(ga, &av))?;
            }
            if rg(b) {
                accumulate(grads, nodes, *b, reduce_to(gb, &bv))?;
            }
        }
        Op::Scale(x, s) => accumulate(grads, nodes, *x, g.scale(*s))?,
        Op::LinComb(base, terms) => {
            accumulate(grads, nodes, *base, g.clone())?;
            for (c, x) in terms {
                if rg(x) {
                    accumulate(grads, nodes, *x, g.scale(*c))?;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.dims2("matmul")?;
            let n = bv.shape()[1];
            if rg(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, *a, Tensor::new(vec![m, k], ga)?)?;
            }
            if rg(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, 0.0);
                accumulate(grads, nodes, *b, Tensor::new(vec![k, n], gb)?)?;
            }
        }
        Op::Transpose(x) => accumulate(grads, nodes, *x, g.transpose()?)?,
        Op::Reshape(x) => {
            let shape = val(x).shape().to_vec();
            accumulate(grads, nodes, *x, g.clone().reshape(&shape)?)?;
        }
        Op::SoftmaxRows(x) => {
            let (r, c) = out.dims2("softmax_rows")?;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let (y, gy) = (out.row(i), g.row(i));
                let inner = crate::tensor::dot(y, gy);
                for j in 0..c {
                    gx[i * c + j] = y[j] * (gy[j] - inner);
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
        }
        Op::Sum(x) => {
            let shape = val(x).shape().to_vec();
            accumulate(grads, nodes, *x, Tensor::full(&shape, g.data()[0]))?;
        }
        Op::Mean(x) => {
            let xv = val(x);
            accumulate(grads, nodes, *x, Tensor::full(xv.shape(), g.data()[0] / xv.len() as f64))?;
        }
        Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let f = 2.0 * g.data()[0] / av.len() as f64;
            let diff = av.sub(&bv)?;
            if rg(a) {
                accumulate(grads, nodes, *a, diff.scale(f))?;
            }
            if rg(b) {
                accumulate(grads, nodes, *b, diff.scale(-f))?;
            }
        }
        Op::AddRowBias(x, bias) => {
            accumulate(grads, nodes, *x, g.clone())?;
            if rg(bias) {
                let (r, c) = g.dims2("add_row_bias")?;
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in gb.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                let shape = val(bias).shape().to_vec();
                accumulate(grads, nodes, *bias, Tensor::new(shape, gb)?)?;
            }
        }
        Op::ScaleRows(x, s) => {
            let (xv, sv) = (val(x), val(s));
            let (r, c) = xv.dims2("scale_rows")?;
            if rg(x) {
                let mut gx = g.data().to_vec();
                for i in 0..r {
                    let f = sv.data()[i];
                    gx[i * c..(i + 1) * c].iter_mut().for_each(|o| *o *= f);
                }
                accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
            }
            if rg(s) {
                let gs: Vec<f64> = (0..r).map(|i| crate::tensor::dot(g.row(i), xv.row(i))).collect();
                let shape = sv.shape().to_vec();
                accumulate(grads, nodes, *s, Tensor::new(shape, gs)?)?;
            }
        }
        Op::RepeatRows(x, times) => {
            let (r, c) = val(x).dims2("repeat_rows")?;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for t in 0..*times {
                    for (o, v) in gx[i * c..(i + 1) * c].iter_mut().zip(g.row(i * times + t)) {
                        *o += v;
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
        }
        Op::GatherRows(x, idx) => {
            let (r, c) = val(x).dims2("gather_rows")?;
            let mut gx = vec![0.0; r * c];
            for (j, &i) in idx.iter().enumerate() {
                for (o, v) in gx[i * c..(i + 1) * c].iter_mut().zip(g.row(j)) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
        }
        Op::ScatterRows(x, idx) => accumulate(grads, nodes, *x, g.gather_rows(idx)?)?,
        Op::ConcatCols(parts) => {
            let (r, total) = g.dims2("concat_cols")?;
            let mut offset = 0;
            for p in parts {
                let (_, w) = val(p).dims2("concat_cols")?;
                if rg(p) {
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, nodes, *p, Tensor::new(vec![r, w], gp)?)?;
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let (_, c) = g.dims2("concat_rows")?;
            let mut row = 0;
            for p in parts {
                let (h, _) = val(p).dims2("concat_rows")?;
                if rg(p) {
                    let gp = g.data()[row * c..(row + h) * c].to_vec();
                    accumulate(grads, nodes, *p, Tensor::new(vec![h, c], gp)?)?;
                }
                row += h;
            }
        }
        Op::SliceRows(x, start) => {
            let (r, c) = val(x).dims2("slice_rows")?;
            let mut gx = vec![0.0; r * c];
            gx[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
        }
        Op::BlockDot { coeffs, v, rank } => {
            let (cv, vv) = (val(coeffs), val(v));
            let (b, rd) = cv.dims2("block_dot")?;
            let d = vv.shape()[1];
            if rg(coeffs) {
                let mut gc = vec![0.0; b * rd];
                for s in 0..b {
                    for r in 0..*rank {
                        let f = g.data()[s * rank + r];
                        let base = s * rd + r * d;
                        for (o, x) in gc[base..base + d].iter_mut().zip(vv.row(s)) {
                            *o = f * x;
                        }
                    }
                }
                accumulate(grads, nodes, *coeffs, Tensor::new(vec![b, rd], gc)?)?;
            }
            if rg(v) {
                let mut gv = vec![0.0; b * d];
                for s in 0..b {
                    for r in 0..*rank {
                        let f = g.data()[s * rank + r];
                        let base = s * rd + r * d;
                        for (o, c) in gv[s * d..(s + 1) * d].iter_mut().zip(&cv.data()[base..base + d]) {
                            *o += f * c;
                        }
                    }
                }
                accumulate(grads, nodes, *v, Tensor::new(vec![b, d], gv)?)?;
            }
        }
        Op::Retract(w, r_max) => {
            let wv = val(w);
            let (r, c) = wv.dims2("retract_rows")?;
            let mut gw = vec![0.0; r * c];
            for i in 0..r {
                let (row, grow) = (wv.row(i), g.row(i));
                let n = crate::tensor::norm(row);
                let s = retract_scale(n, *r_max);
                // d/dn of s(n), divided by n; zero in the n → 0 limit.
                let ds_over_n = if n < 1e-300 {
                    0.0
                } else {
                    let th = (n / r_max).tanh();
                    ((1.0 - th * th) * n - r_max * th) / (n * n) / n
                };
                let wg = crate::tensor::dot(row, grow);
                for j in 0..c {
                    gw[i * c + j] = s * grow[j] + ds_over_n * wg * row[j];
                }
            }
            accumulate(grads, nodes, *w, Tensor::new(vec![r, c], gw)?)?;
        }
        Op::NormalizeRows(x, eps) => {
            let xv = val(x);
            let (r, c) = xv.dims2("normalize_rows")?;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                let (row, grow) = (xv.row(i), g.row(i));
                let n = (crate::tensor::dot(row, row) + eps * eps).sqrt();
                let xg = crate::tensor::dot(row, grow) / (n * n * n);
                for j in 0..c {
                    gx[i * c + j] = grow[j] / n - xg * row[j];
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(vec![r, c], gx)?)?;
        }
        Op::Conv2d { x, w, geom } => {
            let (xv, wv) = (val(x), val(w));
            let (b, c_out) = (xv.shape()[0], wv.shape()[0]);
            let (ho, wo) = geom.out_hw();
            let (img, ncol, krows) = (geom.c_in * geom.h * geom.w, ho * wo, geom.col_rows());
            let mut cols = vec![0.0; krows * ncol];
            let mut gw = vec![0.0; c_out * krows];
            let mut gx = if rg(x) { vec![0.0; b * img] } else { Vec::new() };
            let mut gcols = vec![0.0; krows * ncol];
            for s in 0..b {
                let gs = &g.data()[s * c_out * ncol..(s + 1) * c_out * ncol];
                if rg(w) {
                    im2col(&xv.data()[s * img..(s + 1) * img], geom, &mut cols);
                    gemm(c_out, ncol, krows, gs, false, &cols, true, &mut gw, 1.0);
                }
                if rg(x) {
                    gemm(krows, c_out, ncol, wv.data(), true, gs, false, &mut gcols, 0.0);
                    col2im(&gcols, geom, &mut gx[s * img..(s + 1) * img]);
                }
            }
            if rg(w) {
                accumulate(grads, nodes, *w, Tensor::new(wv.shape().to_vec(), gw)?)?;
            }
            if rg(x) {
                accumulate(grads, nodes, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
        }
        Op::Upsample2x(x) => {
            let xv = val(x);
            let s = xv.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut gx = vec![0.0; xv.len()];
            for p in 0..planes {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        gx[(p * h + y / 2) * w + xx / 2] += g.data()[(p * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            accumulate(grads, nodes, *x, Tensor::new(s.to_vec(), gx)?)?;
        }
        Op::ChannelBias(x, bias) => {
            accumulate(grads, nodes, *x, g.clone())?;
            if rg(bias) {
                let s = g.shape();
                let hw = s[2] * s[3];
                let gb: Vec<f64> = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
                accumulate(grads, nodes, *bias, Tensor::new(vec![s[0], s[1]], gb)?)?;
            }
        }
        Op::ToTokens(x) => {
            let s = val(x).shape().to_vec();
            let gx = tokens_to_bchw(g.data(), s[0], s[1], s[2] * s[3]);
            accumulate(grads, nodes, *x, Tensor::new(s, gx)?)?;
        }
        Op::FromTokens(x) => {
            let s = out.shape();
            let gx = bchw_to_tokens(g.data(), s[0], s[1], s[2] * s[3]);
            accumulate(grads, nodes, *x, Tensor::new(val(x).shape().to_vec(), gx)?)?;
        }
    }
    Ok(())
}
