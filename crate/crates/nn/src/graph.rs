//! Reverse-mode tape. Nodes are created eagerly (forward values computed at
//! construction); `backward` walks the tape once in reverse. A node carries
//! gradient only if some ancestor leaf was created with `needs_grad = true`,
//! so frozen sub-networks cost forward time only.
//!
//! Shape conventions: `[N, C, L]` batched sequences, `[N, D]` matrices,
//! `[D]` vectors, `[1]` scalars. Misuse is a programming error and panics;
//! user-input validation lives in the calling crates.

use crate::kernels as k;
use crate::real::{c, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Scale(u32, f64),
    AddScalar(u32, f64),
    Relu(u32),
    LeakyRelu(u32, f64),
    Sigmoid(u32),
    Softplus(u32),
    Ln(u32),
    StopGrad(u32),
    Conv1d { x: u32, w: u32, b: u32, stride: usize, pad: usize },
    Linear { x: u32, w: u32, b: u32 },
    Reshape(u32),
    MatMulNT { a: u32, b: u32 },
    MatMulNN { a: u32, b: u32 },
    SoftmaxLast(u32),
    ConcatLast(Vec<u32>),
    SliceLast { x: u32, from: usize, to: usize },
    Upsample2(u32),
    AvgPool2(u32),
    InstanceNorm { x: u32, eps: f64 },
    MulChan { x: u32, s: u32 },
    AddChan { x: u32, s: u32 },
    ChanExpand { v: u32, l: usize },
    AddB1 { x: u32, y: u32 },
    MeanAll(u32),
    SumAll(u32),
    CosineRows { a: u32, b: u32 },
    BinarizeSte { x: u32, thr: f64 },
    QuantizeSte { e: u32, cb: u32 },
    GatherRows { cb: u32 },
    MinibatchStddev(u32),
}

#[derive(Clone, Debug)]
enum Aux<T> {
    None,
    One(Vec<T>),
    Two(Vec<T>, Vec<T>),
    Idx(Vec<usize>),
}

pub struct Graph<T: Real> {
    vals: Vec<Tensor<T>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    aux: Vec<Aux<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            vals: Vec::with_capacity(512),
            ops: Vec::with_capacity(512),
            needs: Vec::with_capacity(512),
            aux: Vec::with_capacity(512),
            grads: Vec::with_capacity(512),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs: bool, aux: Aux<T>) -> Var {
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        self.aux.push(aux);
        self.grads.push(None);
        Var(id)
    }

    fn n(&self, v: Var) -> bool {
        self.needs[v.0 as usize]
    }

    pub fn val(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0 as usize]
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0 as usize].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0 as usize].take()
    }

    // ── Node constructors ──────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.push(t, Op::Leaf, needs_grad, Aux::None)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "add shape mismatch");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data().iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a) || self.n(b);
        self.push(t, Op::Add(a.0, b.0), needs, Aux::None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "sub shape mismatch");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a) || self.n(b);
        self.push(t, Op::Sub(a.0, b.0), needs, Aux::None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "mul shape mismatch");
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a) || self.n(b);
        self.push(t, Op::Mul(a.0, b.0), needs, Aux::None)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sv: T = c(s);
        let data = self.val(a).data().iter().map(|&x| x * sv).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::Scale(a.0, s), needs, Aux::None)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sv: T = c(s);
        let data = self.val(a).data().iter().map(|&x| x + sv).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::AddScalar(a.0, s), needs, Aux::None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|&x| x.maxv(T::ZERO)).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::Relu(a.0), needs, Aux::None)
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let al: T = c(alpha);
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| if x > T::ZERO { x } else { x * al })
            .collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::LeakyRelu(a.0, alpha), needs, Aux::None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|&x| sigmoid_stable(x)).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::Sigmoid(a.0), needs, Aux::None)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|&x| softplus_stable(x)).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::Softplus(a.0), needs, Aux::None)
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.val(a).data().iter().map(|&x| x.ln()).collect();
        let t = Tensor::from_vec(self.val(a).shape(), data);
        let needs = self.n(a);
        self.push(t, Op::Ln(a.0), needs, Aux::None)
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let t = self.val(a).clone();
        self.push(t, Op::StopGrad(a.0), false, Aux::None)
    }

    /// x: [N, Cin, L], w: [Cout, Cin, K], b: [Cout].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xs, ws) = (self.val(x).shape().to_vec(), self.val(w).shape().to_vec());
        assert_eq!(xs.len(), 3, "conv1d input must be [N,C,L]");
        assert_eq!(ws.len(), 3, "conv1d weight must be [Cout,Cin,K]");
        assert_eq!(xs[1], ws[1], "conv1d channel mismatch");
        let (n, cin, l) = (xs[0], xs[1], xs[2]);
        let (cout, kk) = (ws[0], ws[2]);
        assert_eq!(self.val(b).shape(), &[cout], "conv1d bias shape");
        assert!(l + 2 * pad >= kk, "conv1d kernel larger than padded input");
        // Floor semantics: trailing positions that do not fit are dropped.
        let lout = (l + 2 * pad - kk) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, lout]);
        k::conv1d_fwd(
            self.val(x).data(),
            self.val(w).data(),
            self.val(b).data(),
            n,
            cin,
            l,
            cout,
            kk,
            stride,
            pad,
            out.data_mut(),
        );
        let needs = self.n(x) || self.n(w) || self.n(b);
        self.push(
            out,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            needs,
            Aux::None,
        )
    }

    /// x: [N, Din], w: [Dout, Din], b: [Dout].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.val(x).shape().to_vec(), self.val(w).shape().to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [N,D]");
        assert_eq!(ws.len(), 2, "linear weight must be [Dout,Din]");
        assert_eq!(xs[1], ws[1], "linear dim mismatch: {:?} vs {:?}", xs, ws);
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        assert_eq!(self.val(b).shape(), &[dout], "linear bias shape");
        let mut out = Tensor::zeros(&[n, dout]);
        k::linear_fwd(
            self.val(x).data(),
            self.val(w).data(),
            self.val(b).data(),
            n,
            din,
            dout,
            out.data_mut(),
        );
        let needs = self.n(x) || self.n(w) || self.n(b);
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, needs, Aux::None)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.val(x).reshaped(shape);
        let needs = self.n(x);
        self.push(t, Op::Reshape(x.0), needs, Aux::None)
    }

    /// a: [N, R, K], b: [N, S, K] -> [N, R, S].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (asp, bsp) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        assert_eq!(asp.len(), 3);
        assert_eq!(bsp.len(), 3);
        assert_eq!(asp[0], bsp[0], "matmul_nt batch mismatch");
        assert_eq!(asp[2], bsp[2], "matmul_nt inner-dim mismatch");
        let (n, r, s, kk) = (asp[0], asp[1], bsp[1], asp[2]);
        let mut out = Tensor::zeros(&[n, r, s]);
        k::matmul_nt_fwd(self.val(a).data(), self.val(b).data(), n, r, s, kk, out.data_mut());
        let needs = self.n(a) || self.n(b);
        self.push(out, Op::MatMulNT { a: a.0, b: b.0 }, needs, Aux::None)
    }

    /// a: [N, R, S], b: [N, S, K] -> [N, R, K].
    pub fn matmul_nn(&mut self, a: Var, b: Var) -> Var {
        let (asp, bsp) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        assert_eq!(asp.len(), 3);
        assert_eq!(bsp.len(), 3);
        assert_eq!(asp[0], bsp[0], "matmul_nn batch mismatch");
        assert_eq!(asp[2], bsp[1], "matmul_nn inner-dim mismatch");
        let (n, r, s, kk) = (asp[0], asp[1], asp[2], bsp[2]);
        let mut out = Tensor::zeros(&[n, r, kk]);
        k::matmul_nn_fwd(self.val(a).data(), self.val(b).data(), n, r, s, kk, out.data_mut());
        let needs = self.n(a) || self.n(b);
        self.push(out, Op::MatMulNN { a: a.0, b: b.0 }, needs, Aux::None)
    }

    /// Softmax over the last axis of a 3-D tensor.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let rows = xs[0] * xs[1];
        let t = xs[2];
        let mut out = Tensor::zeros(&xs);
        k::softmax_last_fwd(self.val(x).data(), rows, t, out.data_mut());
        let needs = self.n(x);
        self.push(out, Op::SoftmaxLast(x.0), needs, Aux::None)
    }

    /// Concatenate 3-D tensors along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.val(parts[0]).shape()[..2].to_vec();
        let mut total = 0usize;
        for &p in parts {
            let s = self.val(p).shape();
            assert_eq!(s.len(), 3);
            assert_eq!(&s[..2], &lead[..], "concat_last leading dims mismatch");
            total += s[2];
        }
        let rows = lead[0] * lead[1];
        let mut data = vec![T::ZERO; rows * total];
        let mut off = 0usize;
        for &p in parts {
            let d = self.val(p).shape()[2];
            let src = self.val(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
            off += d;
        }
        let t = Tensor::from_vec(&[lead[0], lead[1], total], data);
        let needs = parts.iter().any(|&p| self.n(p));
        self.push(t, Op::ConcatLast(parts.iter().map(|p| p.0).collect()), needs, Aux::None)
    }

    /// Slice columns [from, to) of a 2-D tensor.
    pub fn slice_last(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert!(from < to && to <= xs[1], "slice_last out of range");
        let (n, d) = (xs[0], xs[1]);
        let w = to - from;
        let mut data = vec![T::ZERO; n * w];
        for r in 0..n {
            data[r * w..(r + 1) * w].copy_from_slice(&self.val(x).data()[r * d + from..r * d + to]);
        }
        let t = Tensor::from_vec(&[n, w], data);
        let needs = self.n(x);
        self.push(t, Op::SliceLast { x: x.0, from, to }, needs, Aux::None)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let rows = xs[0] * xs[1];
        let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2] * 2]);
        k::upsample2_fwd(self.val(x).data(), rows, xs[2], out.data_mut());
        let needs = self.n(x);
        self.push(out, Op::Upsample2(x.0), needs, Aux::None)
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert!(xs[2] >= 2 && xs[2] % 2 == 0, "avgpool2 needs even length");
        let rows = xs[0] * xs[1];
        let mut out = Tensor::zeros(&[xs[0], xs[1], xs[2] / 2]);
        k::avgpool2_fwd(self.val(x).data(), rows, xs[2], out.data_mut());
        let needs = self.n(x);
        self.push(out, Op::AvgPool2(x.0), needs, Aux::None)
    }

    /// Per-(n, c) normalization to mean 0 / std 1 (population std, eps-guarded).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let rows = xs[0] * xs[1];
        let mut out = Tensor::zeros(&xs);
        let (mut mu, mut sd) = (Vec::new(), Vec::new());
        k::instnorm_fwd(self.val(x).data(), rows, xs[2], eps, out.data_mut(), &mut mu, &mut sd);
        let needs = self.n(x);
        self.push(out, Op::InstanceNorm { x: x.0, eps }, needs, Aux::One(sd))
    }

    /// x: [N, C, L] * s: [N, C] broadcast over L.
    pub fn mul_chan(&mut self, x: Var, s: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ss = self.val(s).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ss, vec![xs[0], xs[1]], "mul_chan style shape");
        let l = xs[2];
        let mut data = vec![T::ZERO; xs[0] * xs[1] * l];
        for r in 0..xs[0] * xs[1] {
            let sv = self.val(s).data()[r];
            let src = &self.val(x).data()[r * l..(r + 1) * l];
            for (o, &v) in data[r * l..(r + 1) * l].iter_mut().zip(src.iter()) {
                *o = v * sv;
            }
        }
        let t = Tensor::from_vec(&xs, data);
        let needs = self.n(x) || self.n(s);
        self.push(t, Op::MulChan { x: x.0, s: s.0 }, needs, Aux::None)
    }

    /// x: [N, C, L] + s: [N, C] broadcast over L.
    pub fn add_chan(&mut self, x: Var, s: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ss = self.val(s).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ss, vec![xs[0], xs[1]], "add_chan style shape");
        let l = xs[2];
        let mut data = vec![T::ZERO; xs[0] * xs[1] * l];
        for r in 0..xs[0] * xs[1] {
            let sv = self.val(s).data()[r];
            let src = &self.val(x).data()[r * l..(r + 1) * l];
            for (o, &v) in data[r * l..(r + 1) * l].iter_mut().zip(src.iter()) {
                *o = v + sv;
            }
        }
        let t = Tensor::from_vec(&xs, data);
        let needs = self.n(x) || self.n(s);
        self.push(t, Op::AddChan { x: x.0, s: s.0 }, needs, Aux::None)
    }

    /// v: [C] -> [1, C, l] (each channel constant along the length axis).
    pub fn chan_expand(&mut self, v: Var, l: usize) -> Var {
        let vs = self.val(v).shape().to_vec();
        assert_eq!(vs.len(), 1);
        let cch = vs[0];
        let mut data = vec![T::ZERO; cch * l];
        for ci in 0..cch {
            let val = self.val(v).data()[ci];
            for o in &mut data[ci * l..(ci + 1) * l] {
                *o = val;
            }
        }
        let t = Tensor::from_vec(&[1, cch, l], data);
        let needs = self.n(v);
        self.push(t, Op::ChanExpand { v: v.0, l }, needs, Aux::None)
    }

    /// x: [N, C, L] + y: [1, C, L] broadcast over the batch.
    pub fn add_b1(&mut self, x: Var, y: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        let ys = self.val(y).shape().to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ys, vec![1, xs[1], xs[2]], "add_b1 shape mismatch");
        let cl = xs[1] * xs[2];
        let mut data = vec![T::ZERO; xs[0] * cl];
        for ni in 0..xs[0] {
            for p in 0..cl {
                data[ni * cl + p] = self.val(x).data()[ni * cl + p] + self.val(y).data()[p];
            }
        }
        let t = Tensor::from_vec(&xs, data);
        let needs = self.n(x) || self.n(y);
        self.push(t, Op::AddB1 { x: x.0, y: y.0 }, needs, Aux::None)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in self.val(x).data() {
            acc += v.to_f64();
        }
        let m = acc / self.val(x).numel() as f64;
        let needs = self.n(x);
        self.push(Tensor::scalar(c(m)), Op::MeanAll(x.0), needs, Aux::None)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in self.val(x).data() {
            acc += v.to_f64();
        }
        let needs = self.n(x);
        self.push(Tensor::scalar(c(acc)), Op::SumAll(x.0), needs, Aux::None)
    }

    /// Row-wise cosine similarity of two [N, D] tensors -> [N].
    /// Zero-norm rows yield similarity 0 and propagate no gradient.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let asp = self.val(a).shape().to_vec();
        assert_eq!(asp.len(), 2);
        assert_eq!(self.val(b).shape(), &asp[..], "cosine_rows shape mismatch");
        let (n, d) = (asp[0], asp[1]);
        let mut out = Tensor::zeros(&[n]);
        let (mut na, mut nb) = (Vec::new(), Vec::new());
        k::cosine_rows_fwd(self.val(a).data(), self.val(b).data(), n, d, out.data_mut(), &mut na, &mut nb);
        let needs = self.n(a) || self.n(b);
        self.push(out, Op::CosineRows { a: a.0, b: b.0 }, needs, Aux::Two(na, nb))
    }

    /// Hard indicator 1[x >= thr]; backward is the straight-through identity.
    pub fn binarize_ste(&mut self, x: Var, thr: f64) -> Var {
        let tv: T = c(thr);
        let data = self
            .val(x)
            .data()
            .iter()
            .map(|&v| if v >= tv { T::ONE } else { T::ZERO })
            .collect();
        let t = Tensor::from_vec(self.val(x).shape(), data);
        let needs = self.n(x);
        self.push(t, Op::BinarizeSte { x: x.0, thr }, needs, Aux::None)
    }

    /// e: [N, C, Le], cb: [K, Le]. Per (n, c) row, the nearest codebook row
    /// (ties to the lowest index). Backward passes gradients straight through
    /// to e; the codebook receives none here (see `gather_rows` for the
    /// codebook-learning path).
    pub fn quantize_ste(&mut self, e: Var, cb: Var) -> (Var, Vec<usize>) {
        let es = self.val(e).shape().to_vec();
        let cs = self.val(cb).shape().to_vec();
        assert_eq!(es.len(), 3);
        assert_eq!(cs.len(), 2);
        assert_eq!(es[2], cs[1], "codebook entry length != Le");
        assert!(cs[0] >= 1, "empty codebook");
        let rows = es[0] * es[1];
        let mut out = Tensor::zeros(&es);
        let mut idx = Vec::new();
        k::nearest_codebook_rows(self.val(e).data(), self.val(cb).data(), rows, es[2], cs[0], out.data_mut(), &mut idx);
        let needs = self.n(e);
        let v = self.push(
            out,
            Op::QuantizeSte { e: e.0, cb: cb.0 },
            needs,
            Aux::Idx(idx.clone()),
        );
        (v, idx)
    }

    /// cb: [K, Le] gathered by row indices -> [N, C, Le] (shape from `shape`).
    /// Differentiable in the codebook (scatter-add backward).
    pub fn gather_rows(&mut self, cb: Var, indices: &[usize], shape: &[usize]) -> Var {
        let cs = self.val(cb).shape().to_vec();
        assert_eq!(cs.len(), 2);
        assert_eq!(shape.len(), 3);
        assert_eq!(shape[0] * shape[1], indices.len(), "gather_rows count");
        assert_eq!(shape[2], cs[1], "gather_rows entry length");
        let le = cs[1];
        let mut data = vec![T::ZERO; indices.len() * le];
        for (r, &ki) in indices.iter().enumerate() {
            assert!(ki < cs[0], "gather_rows index out of range");
            data[r * le..(r + 1) * le].copy_from_slice(&self.val(cb).data()[ki * le..(ki + 1) * le]);
        }
        let t = Tensor::from_vec(shape, data);
        let needs = self.n(cb);
        self.push(t, Op::GatherRows { cb: cb.0 }, needs, Aux::Idx(indices.to_vec()))
    }

    /// x: [N, C, L] -> [N, C+1, L] with the appended minibatch-stddev channel.
    pub fn minibatch_stddev(&mut self, x: Var) -> Var {
        let xs = self.val(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (n, cch, l) = (xs[0], xs[1], xs[2]);
        let mut out = Tensor::zeros(&[n, cch + 1, l]);
        let (mut mu, mut sd) = (Vec::new(), Vec::new());
        k::minibatch_stddev_fwd(self.val(x).data(), n, cch, l, out.data_mut(), &mut mu, &mut sd);
        let needs = self.n(x);
        self.push(out, Op::MinibatchStddev(x.0), needs, Aux::Two(mu, sd))
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Leaf gradients stay readable via
    /// `grad`/`take_grad`; intermediate gradients are freed as consumed.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.vals[loss.0 as usize].numel(), 1, "backward needs a scalar loss");
        assert!(self.needs[loss.0 as usize], "loss does not depend on any trainable leaf");
        self.grads[loss.0 as usize] = Some(vec![T::ONE]);
        for i in (0..=loss.0 as usize).rev() {
            if !self.needs[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch(i, &g);
        }
    }

    fn acc<'a>(grads: &'a mut [Option<Vec<T>>], needs: &[bool], parent: u32, len: usize) -> Option<&'a mut Vec<T>> {
        let p = parent as usize;
        if !needs[p] {
            return None;
        }
        Some(grads[p].get_or_insert_with(|| vec![T::ZERO; len]))
    }

    fn dispatch(&mut self, i: usize, g: &[T]) {
        let vals = &self.vals;
        let aux = &self.aux;
        let grads = &mut self.grads;
        let needs = &self.needs;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    for (dx, &gv) in ga.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
                if let Some(gb) = Self::acc(grads, needs, *b, g.len()) {
                    for (dx, &gv) in gb.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    for (dx, &gv) in ga.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
                if let Some(gb) = Self::acc(grads, needs, *b, g.len()) {
                    for (dx, &gv) in gb.iter_mut().zip(g.iter()) {
                        *dx -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let bv = vals[*b as usize].data();
                    for ((dx, &gv), &v) in ga.iter_mut().zip(g.iter()).zip(bv.iter()) {
                        *dx += gv * v;
                    }
                }
                if let Some(gb) = Self::acc(grads, needs, *b, g.len()) {
                    let av = vals[*a as usize].data();
                    for ((dx, &gv), &v) in gb.iter_mut().zip(g.iter()).zip(av.iter()) {
                        *dx += gv * v;
                    }
                }
            }
            Op::Scale(a, s) => {
                let sv: T = c(*s);
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    for (dx, &gv) in ga.iter_mut().zip(g.iter()) {
                        *dx += gv * sv;
                    }
                }
            }
            Op::AddScalar(a, _) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    for (dx, &gv) in ga.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let y = vals[i].data();
                    for ((dx, &gv), &yv) in ga.iter_mut().zip(g.iter()).zip(y.iter()) {
                        if yv > T::ZERO {
                            *dx += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, alpha) => {
                let al: T = c(*alpha);
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let x = vals[*a as usize].data();
                    for ((dx, &gv), &xv) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *dx += if xv > T::ZERO { gv } else { gv * al };
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let y = vals[i].data();
                    for ((dx, &gv), &yv) in ga.iter_mut().zip(g.iter()).zip(y.iter()) {
                        *dx += gv * yv * (T::ONE - yv);
                    }
                }
            }
            Op::Softplus(a) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let x = vals[*a as usize].data();
                    for ((dx, &gv), &xv) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *dx += gv * sigmoid_stable(xv);
                    }
                }
            }
            Op::Ln(a) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    let x = vals[*a as usize].data();
                    for ((dx, &gv), &xv) in ga.iter_mut().zip(g.iter()).zip(x.iter()) {
                        *dx += gv / xv;
                    }
                }
            }
            Op::StopGrad(_) => {}
            Op::Conv1d { x, w, b, stride, pad } => {
                let xs = vals[*x as usize].shape();
                let ws = vals[*w as usize].shape();
                let (n, cin, l) = (xs[0], xs[1], xs[2]);
                let (cout, kk) = (ws[0], ws[2]);
                let lout = (l + 2 * pad - kk) / stride + 1;
                if needs[*x as usize] {
                    let wdata = vals[*w as usize].data().to_vec();
                    let gx = Self::acc(grads, needs, *x, n * cin * l).unwrap();
                    k::conv1d_bwd_x(g, &wdata, n, cin, l, cout, kk, *stride, *pad, gx);
                }
                if needs[*w as usize] {
                    let xdata = vals[*x as usize].data().to_vec();
                    let gw = Self::acc(grads, needs, *w, cout * cin * kk).unwrap();
                    k::conv1d_bwd_w(g, &xdata, n, cin, l, cout, kk, *stride, *pad, gw);
                }
                if needs[*b as usize] {
                    let gb = Self::acc(grads, needs, *b, cout).unwrap();
                    k::conv1d_bwd_b(g, n, cout, lout, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = vals[*x as usize].shape();
                let ws = vals[*w as usize].shape();
                let (n, din, dout) = (xs[0], xs[1], ws[0]);
                // Split the three parent updates to satisfy the borrow checker:
                // copy the small operands when required.
                if needs[*x as usize] {
                    let wdata = vals[*w as usize].data().to_vec();
                    let gx = Self::acc(grads, needs, *x, n * din).unwrap();
                    k::linear_bwd(g, &[], &wdata, n, din, dout, Some(gx), None, None);
                }
                if needs[*w as usize] {
                    let xdata = vals[*x as usize].data().to_vec();
                    let gw = Self::acc(grads, needs, *w, dout * din).unwrap();
                    k::linear_bwd(g, &xdata, &[], n, din, dout, None, Some(gw), None);
                }
                if needs[*b as usize] {
                    let gb = Self::acc(grads, needs, *b, dout).unwrap();
                    k::linear_bwd(g, &[], &[], n, din, dout, None, None, Some(gb));
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = Self::acc(grads, needs, *a, g.len()) {
                    for (dx, &gv) in ga.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let asp = vals[*a as usize].shape();
                let bsp = vals[*b as usize].shape();
                let (n, r, s, kk) = (asp[0], asp[1], bsp[1], asp[2]);
                // da[n,r,k] += Σ_s g[n,r,s] * b[n,s,k]
                if needs[*a as usize] {
                    let bdata = vals[*b as usize].data().to_vec();
                    let ga = Self::acc(grads, needs, *a, n * r * kk).unwrap();
                    for ni in 0..n {
                        for ri in 0..r {
                            let grow = &g[(ni * r + ri) * s..(ni * r + ri + 1) * s];
                            let garow = &mut ga[(ni * r + ri) * kk..(ni * r + ri + 1) * kk];
                            for (si, &gv) in grow.iter().enumerate() {
                                let brow = &bdata[(ni * s + si) * kk..(ni * s + si + 1) * kk];
                                for (dx, &bv) in garow.iter_mut().zip(brow.iter()) {
                                    *dx += gv * bv;
                                }
                            }
                        }
                    }
                }
                // db[n,s,k] += Σ_r g[n,r,s] * a[n,r,k]
                if needs[*b as usize] {
                    let adata = vals[*a as usize].data().to_vec();
                    let gb = Self::acc(grads, needs, *b, n * s * kk).unwrap();
                    for ni in 0..n {
                        for ri in 0..r {
                            let grow = &g[(ni * r + ri) * s..(ni * r + ri + 1) * s];
                            let arow = &adata[(ni * r + ri) * kk..(ni * r + ri + 1) * kk];
                            for (si, &gv) in grow.iter().enumerate() {
                                let gbrow = &mut gb[(ni * s + si) * kk..(ni * s + si + 1) * kk];
                                for (dx, &av) in gbrow.iter_mut().zip(arow.iter()) {
                                    *dx += gv * av;
                                }
                            }
                        }
                    }
                }
            }
            Op::MatMulNN { a, b } => {
                let asp = vals[*a as usize].shape();
                let bsp = vals[*b as usize].shape();
                let (n, r, s, kk) = (asp[0], asp[1], asp[2], bsp[2]);
                // da[n,r,s] += Σ_k g[n,r,k] * b[n,s,k]
                if needs[*a as usize] {
                    let bdata = vals[*b as usize].data().to_vec();
                    let ga = Self::acc(grads, needs, *a, n * r * s).unwrap();
                    for ni in 0..n {
                        for ri in 0..r {
                            let grow = &g[(ni * r + ri) * kk..(ni * r + ri + 1) * kk];
                            let garow = &mut ga[(ni * r + ri) * s..(ni * r + ri + 1) * s];
                            for (si, dx) in garow.iter_mut().enumerate() {
                                let brow = &bdata[(ni * s + si) * kk..(ni * s + si + 1) * kk];
                                let mut acc = T::ZERO;
                                for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                                    acc += gv * bv;
                                }
                                *dx += acc;
                            }
                        }
                    }
                }
                // db[n,s,k] += Σ_r a[n,r,s] * g[n,r,k]
                if needs[*b as usize] {
                    let adata = vals[*a as usize].data().to_vec();
                    let gb = Self::acc(grads, needs, *b, n * s * kk).unwrap();
                    for ni in 0..n {
                        for ri in 0..r {
                            let arow = &adata[(ni * r + ri) * s..(ni * r + ri + 1) * s];
                            let grow = &g[(ni * r + ri) * kk..(ni * r + ri + 1) * kk];
                            for (si, &av) in arow.iter().enumerate() {
                                let gbrow = &mut gb[(ni * s + si) * kk..(ni * s + si + 1) * kk];
                                for (dx, &gv) in gbrow.iter_mut().zip(grow.iter()) {
                                    *dx += av * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast(a) => {
                if needs[*a as usize] {
                    let xs = vals[*a as usize].shape();
                    let rows = xs[0] * xs[1];
                    let t = xs[2];
                    let y = vals[i].data().to_vec();
                    let ga = Self::acc(grads, needs, *a, rows * t).unwrap();
                    k::softmax_last_bwd(g, &y, rows, t, ga);
                }
            }
            Op::ConcatLast(parts) => {
                let parts = parts.clone();
                let lead = vals[parts[0] as usize].shape()[..2].to_vec();
                let rows = lead[0] * lead[1];
                let total: usize = parts.iter().map(|&p| vals[p as usize].shape()[2]).sum();
                let mut off = 0usize;
                for &p in &parts {
                    let d = vals[p as usize].shape()[2];
                    if let Some(gp) = Self::acc(grads, needs, p, rows * d) {
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + d];
                            for (dx, &gv) in gp[r * d..(r + 1) * d].iter_mut().zip(src.iter()) {
                                *dx += gv;
                            }
                        }
                    }
                    off += d;
                }
            }
            Op::SliceLast { x, from, to } => {
                let xs = vals[*x as usize].shape();
                let (n, d) = (xs[0], xs[1]);
                let w = to - from;
                if let Some(gx) = Self::acc(grads, needs, *x, n * d) {
                    for r in 0..n {
                        for j in 0..w {
                            gx[r * d + from + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::Upsample2(a) => {
                if needs[*a as usize] {
                    let xs = vals[*a as usize].shape();
                    let rows = xs[0] * xs[1];
                    let l = xs[2];
                    let ga = Self::acc(grads, needs, *a, rows * l).unwrap();
                    k::upsample2_bwd(g, rows, l, ga);
                }
            }
            Op::AvgPool2(a) => {
                if needs[*a as usize] {
                    let xs = vals[*a as usize].shape();
                    let rows = xs[0] * xs[1];
                    let l = xs[2];
                    let ga = Self::acc(grads, needs, *a, rows * l).unwrap();
                    k::avgpool2_bwd(g, rows, l, ga);
                }
            }
            Op::InstanceNorm { x, eps } => {
                if needs[*x as usize] {
                    let xs = vals[*x as usize].shape();
                    let rows = xs[0] * xs[1];
                    let l = xs[2];
                    let y = vals[i].data().to_vec();
                    let sd = match &aux[i] {
                        Aux::One(sd) => sd.clone(),
                        _ => unreachable!("instance_norm aux"),
                    };
                    let gx = Self::acc(grads, needs, *x, rows * l).unwrap();
                    k::instnorm_bwd(g, &y, &sd, rows, l, *eps, gx);
                }
            }
            Op::MulChan { x, s } => {
                let xs = vals[*x as usize].shape();
                let (n, cch, l) = (xs[0], xs[1], xs[2]);
                if needs[*x as usize] {
                    let sdata = vals[*s as usize].data().to_vec();
                    let gx = Self::acc(grads, needs, *x, n * cch * l).unwrap();
                    for r in 0..n * cch {
                        let sv = sdata[r];
                        for (dx, &gv) in gx[r * l..(r + 1) * l].iter_mut().zip(g[r * l..(r + 1) * l].iter()) {
                            *dx += gv * sv;
                        }
                    }
                }
                if needs[*s as usize] {
                    let xdata = vals[*x as usize].data().to_vec();
                    let gs = Self::acc(grads, needs, *s, n * cch).unwrap();
                    for r in 0..n * cch {
                        let mut acc = 0.0f64;
                        for (gv, xv) in g[r * l..(r + 1) * l].iter().zip(xdata[r * l..(r + 1) * l].iter()) {
                            acc += gv.to_f64() * xv.to_f64();
                        }
                        gs[r] += c(acc);
                    }
                }
            }
            Op::AddChan { x, s } => {
                let xs = vals[*x as usize].shape();
                let (n, cch, l) = (xs[0], xs[1], xs[2]);
                if let Some(gx) = Self::acc(grads, needs, *x, n * cch * l) {
                    for (dx, &gv) in gx.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
                if let Some(gs) = Self::acc(grads, needs, *s, n * cch) {
                    for r in 0..n * cch {
                        let mut acc = 0.0f64;
                        for gv in &g[r * l..(r + 1) * l] {
                            acc += gv.to_f64();
                        }
                        gs[r] += c(acc);
                    }
                }
            }
            Op::ChanExpand { v, l } => {
                let cch = vals[*v as usize].shape()[0];
                if let Some(gv) = Self::acc(grads, needs, *v, cch) {
                    for ci in 0..cch {
                        let mut acc = 0.0f64;
                        for gg in &g[ci * l..(ci + 1) * l] {
                            acc += gg.to_f64();
                        }
                        gv[ci] += c(acc);
                    }
                }
            }
            Op::AddB1 { x, y } => {
                let xs = vals[*x as usize].shape();
                let (n, cl) = (xs[0], xs[1] * xs[2]);
                if let Some(gx) = Self::acc(grads, needs, *x, n * cl) {
                    for (dx, &gv) in gx.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
                if let Some(gy) = Self::acc(grads, needs, *y, cl) {
                    for ni in 0..n {
                        for p in 0..cl {
                            gy[p] += g[ni * cl + p];
                        }
                    }
                }
            }
            Op::MeanAll(a) => {
                let numel = vals[*a as usize].numel();
                let gv = g[0] * c(1.0 / numel as f64);
                if let Some(ga) = Self::acc(grads, needs, *a, numel) {
                    for dx in ga.iter_mut() {
                        *dx += gv;
                    }
                }
            }
            Op::SumAll(a) => {
                let numel = vals[*a as usize].numel();
                let gv = g[0];
                if let Some(ga) = Self::acc(grads, needs, *a, numel) {
                    for dx in ga.iter_mut() {
                        *dx += gv;
                    }
                }
            }
            Op::CosineRows { a, b } => {
                let asp = vals[*a as usize].shape();
                let (n, d) = (asp[0], asp[1]);
                let (na, nb) = match &aux[i] {
                    Aux::Two(na, nb) => (na.clone(), nb.clone()),
                    _ => unreachable!("cosine aux"),
                };
                let cosv = vals[i].data().to_vec();
                let adata = vals[*a as usize].data().to_vec();
                let bdata = vals[*b as usize].data().to_vec();
                // cosine_rows_bwd writes both sides; route through temporaries
                // so frozen parents stay untouched.
                let mut ga_tmp = vec![T::ZERO; n * d];
                let mut gb_tmp = vec![T::ZERO; n * d];
                k::cosine_rows_bwd(g, &adata, &bdata, &cosv, &na, &nb, n, d, &mut ga_tmp, &mut gb_tmp);
                if let Some(ga) = Self::acc(grads, needs, *a, n * d) {
                    for (dx, &gv) in ga.iter_mut().zip(ga_tmp.iter()) {
                        *dx += gv;
                    }
                }
                if let Some(gb) = Self::acc(grads, needs, *b, n * d) {
                    for (dx, &gv) in gb.iter_mut().zip(gb_tmp.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::BinarizeSte { x, .. } => {
                if let Some(gx) = Self::acc(grads, needs, *x, g.len()) {
                    for (dx, &gv) in gx.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::QuantizeSte { e, .. } => {
                // Straight-through to e; the codebook learns via gather_rows.
                if let Some(ge) = Self::acc(grads, needs, *e, g.len()) {
                    for (dx, &gv) in ge.iter_mut().zip(g.iter()) {
                        *dx += gv;
                    }
                }
            }
            Op::GatherRows { cb } => {
                let cs = vals[*cb as usize].shape();
                let le = cs[1];
                let idx = match &aux[i] {
                    Aux::Idx(idx) => idx.clone(),
                    _ => unreachable!("gather aux"),
                };
                if let Some(gcb) = Self::acc(grads, needs, *cb, cs[0] * le) {
                    for (r, &ki) in idx.iter().enumerate() {
                        for j in 0..le {
                            gcb[ki * le + j] += g[r * le + j];
                        }
                    }
                }
            }
            Op::MinibatchStddev(x) => {
                if needs[*x as usize] {
                    let xs = vals[*x as usize].shape();
                    let (n, cch, l) = (xs[0], xs[1], xs[2]);
                    let (mu, sd) = match &aux[i] {
                        Aux::Two(mu, sd) => (mu.clone(), sd.clone()),
                        _ => unreachable!("stddev aux"),
                    };
                    let xdata = vals[*x as usize].data().to_vec();
                    let gx = Self::acc(grads, needs, *x, n * cch * l).unwrap();
                    k::minibatch_stddev_bwd(g, &xdata, &mu, &sd, n, cch, l, gx);
                }
            }
        }
    }
}

#[inline]
fn sigmoid_stable<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
fn softplus_stable<T: Real>(x: T) -> T {
    x.maxv(T::ZERO) + (T::ONE + (-x.abs()).exp()).ln()
}
