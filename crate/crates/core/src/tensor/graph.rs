use super::conv::Conv3dGeometry;
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    MaxAxis { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    L2Normalize { input: Var, norms: Vec<T> },
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geometry: Conv3dGeometry,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are created in topological order, so reverse creation order is a
/// valid replay order for [`Graph::backward`]. Values are never mutated after
/// recording.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, update: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(update.data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(update),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = match kind {
            Binary::Add => |x: T, y: T| x + y,
            Binary::Sub => |x: T, y: T| x - y,
            Binary::Mul => |x: T, y: T| x * y,
            Binary::Div => |x: T, y: T| x / y,
        };
        let value = if va.shape == vb.shape {
            let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
            Tensor {
                shape: va.shape.clone(),
                data,
            }
        } else {
            let out = broadcast_shape(&va.shape, &vb.shape, name)?;
            let ls = broadcast_strides(&va.shape, &out);
            let rs = broadcast_strides(&vb.shape, &out);
            let mut data = vec![T::zero(); out.iter().product()];
            for_each_broadcast(&out, &ls, &rs, |o, l, r| data[o] = f(va.data[l], vb.data[r]));
            Tensor { shape: out, data }
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::MulScalar(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape.clone(),
                rhs: vb.shape.clone(),
            });
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut data = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &va.data, false, &vb.data, false, T::zero(), &mut data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: 2,
                shape: va.shape.clone(),
            });
        }
        let (r, c) = (va.shape[0], va.shape[1]);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Rectifier with derivative 0 at exactly 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if let Some((index, &v)) = va.data.iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: v.as_f64(),
            });
        }
        let value = va.map(|x| x.ln());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Log(a), rg))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if let Some((index, &v)) = va.data.iter().enumerate().find(|(_, &v)| !(v >= T::zero())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                index,
                value: v.as_f64(),
            });
        }
        let value = va.map(|x| x.sqrt());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sqrt(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let n = T::of_f64(va.numel() as f64);
        let s = va.data.iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
        let mut out = shape.to_vec();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        out
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        let shape = &self.nodes[a.0].value.shape;
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(&va.shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &va.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let shape = Self::reduced_shape(&va.shape, axis, keepdim);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis { input: a, axis }, rg))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_along(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.check_axis(a, axis, "max_along")?;
        let va = &self.nodes[a.0].value;
        let (outer, len, inner) = split_axis(&va.shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for k in 1..len {
                    let idx = (o * len + k) * inner + i;
                    if va.data[idx] > va.data[best] {
                        best = idx;
                    }
                }
                data[o * inner + i] = va.data[best];
                argmax[o * inner + i] = best;
            }
        }
        let shape = Self::reduced_shape(&va.shape, axis, keepdim);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data }, Op::MaxAxis { input: a, argmax }, rg))
    }

    /// Mean over every axis after the first two: `[batch, channels, ...] -> [batch, channels]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() < 3 {
            return Err(TensorError::Rank {
                op: "global_avg_pool",
                expected: 5,
                shape: va.shape.clone(),
            });
        }
        let (b, c) = (va.shape[0], va.shape[1]);
        let spatial: usize = va.shape[2..].iter().product();
        let scale = T::of_f64(1.0 / spatial as f64);
        let data = va
            .data
            .chunks(spatial)
            .map(|chunk| chunk.iter().fold(T::zero(), |acc, &v| acc + v) * scale)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![b, c], data }, Op::GlobalAvgPool(a), rg))
    }

    /// Scales every row of a `[batch, dim]` tensor to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.rank() != 2 {
            return Err(TensorError::Rank {
                op: "l2_normalize",
                expected: 2,
                shape: va.shape.clone(),
            });
        }
        let dim = va.shape[1];
        let mut norms = Vec::with_capacity(va.shape[0]);
        let mut data = Vec::with_capacity(va.numel());
        for (row, chunk) in va.data.chunks(dim.max(1)).enumerate() {
            let norm = chunk.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
            if !(norm.as_f64() >= 1e-12) {
                return Err(TensorError::DegenerateRow {
                    row,
                    norm: norm.as_f64(),
                });
            }
            data.extend(chunk.iter().map(|&v| v / norm));
            norms.push(norm);
        }
        let value = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::L2Normalize { input: a, norms }, rg))
    }

    /// 3D cross-correlation of `[batch, cin, d, h, w]` with `[cout, cin, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let geometry = Conv3dGeometry::new(&vi.shape, &vk.shape, stride, padding)?;
        let bias_data = match bias {
            Some(b) => {
                let vb = &self.nodes[b.0].value;
                if vb.shape != [geometry.out_channels] {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv3d bias",
                        lhs: vk.shape.clone(),
                        rhs: vb.shape.clone(),
                    });
                }
                Some(vb.data.as_slice())
            }
            None => None,
        };
        let data = geometry.forward(&vi.data, &vk.data, bias_data);
        let value = Tensor {
            shape: geometry.output_shape(),
            data,
        };
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                geometry,
            },
            rg,
        ))
    }

    /// Group normalization over `[batch, channels, ...]` with per-channel affine.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let vx = &self.nodes[input.0].value;
        if vx.rank() < 2 {
            return Err(TensorError::Rank {
                op: "group_norm",
                expected: 5,
                shape: vx.shape.clone(),
            });
        }
        let (b, c) = (vx.shape[0], vx.shape[1]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Groups { channels: c, groups });
        }
        for v in [gamma, beta] {
            let s = &self.nodes[v.0].value.shape;
            if s.as_slice() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "group_norm affine",
                    lhs: vx.shape.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let (vg, vb) = (&self.nodes[gamma.0].value.data, &self.nodes[beta.0].value.data);
        let spatial: usize = vx.shape[2..].iter().product();
        let cpg = c / groups;
        let group_len = cpg * spatial;
        let n = T::of_f64(group_len as f64);
        let mut mean = Vec::with_capacity(b * groups);
        let mut rstd = Vec::with_capacity(b * groups);
        let mut data = vec![T::zero(); vx.numel()];
        for (gi, chunk) in vx.data.chunks(group_len).enumerate() {
            let mu = chunk.iter().fold(T::zero(), |acc, &v| acc + v) / n;
            let var = chunk.iter().fold(T::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / n;
            let r = T::one() / (var + T::of_f64(EPS)).sqrt();
            let g = gi % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = g * cpg + j / spatial;
                data[gi * group_len + j] = (v - mu) * r * vg[ch] + vb[ch];
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Tensor {
            shape: vx.shape.clone(),
            data,
        };
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards every leaf that requires grad holds its total derivative
    /// (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_shape = self.nodes[loss.0].value.shape.clone();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(loss_shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].grad = Some(g);
                continue;
            }
            self.propagate(i, g, &mut grads);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let mut ga = needs(a).then(|| Tensor::<T>::zeros(va.shape.clone()));
                let mut gb = needs(b).then(|| Tensor::<T>::zeros(vb.shape.clone()));
                let out = &node.value.shape;
                let ls = broadcast_strides(&va.shape, out);
                let rs = broadcast_strides(&vb.shape, out);
                for_each_broadcast(out, &ls, &rs, |o, l, r| {
                    let go = g.data[o];
                    let (x, y) = (va.data[l], vb.data[r]);
                    let (da, db) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga.data[l] = ga.data[l] + da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb.data[r] = gb.data[r] + db;
                    }
                });
                if let Some(ga) = ga {
                    accumulate(&mut grads[a.0], ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = val(*a).shape.clone();
                accumulate(&mut grads[a.0], Tensor { shape, data: g.data });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], g.map(|x| x * c));
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                if needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), &g.data, false, &vb.data, true, T::zero(), &mut da);
                    accumulate(&mut grads[a.0], Tensor { shape: vec![m, k], data: da });
                }
                if needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), &va.data, true, &g.data, false, T::zero(), &mut db);
                    accumulate(&mut grads[b.0], Tensor { shape: vec![k, n], data: db });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape[0], node.value.shape[1]);
                let mut data = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = g.data[i * c + j];
                    }
                }
                accumulate(&mut grads[a.0], Tensor { shape: vec![c, r], data });
            }
            Op::Relu(a) => {
                let va = val(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&va.data)
                    .map(|(&go, &x)| if x > T::zero() { go } else { T::zero() })
                    .collect();
                accumulate(&mut grads[a.0], Tensor { shape: va.shape.clone(), data });
            }
            Op::Exp(a) => {
                let data = g.data.iter().zip(&node.value.data).map(|(&go, &y)| go * y).collect();
                accumulate(&mut grads[a.0], Tensor { shape: g.shape, data });
            }
            Op::Log(a) => {
                let data = g.data.iter().zip(&val(*a).data).map(|(&go, &x)| go / x).collect();
                accumulate(&mut grads[a.0], Tensor { shape: g.shape, data });
            }
            Op::Sqrt(a) => {
                let two = T::of_f64(2.0);
                let data = g.data.iter().zip(&node.value.data).map(|(&go, &y)| go / (two * y)).collect();
                accumulate(&mut grads[a.0], Tensor { shape: g.shape, data });
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], Tensor::full(val(*a).shape.clone(), g.data[0]));
            }
            Op::Mean(a) => {
                let va = val(*a);
                let v = g.data[0] / T::of_f64(va.numel() as f64);
                accumulate(&mut grads[a.0], Tensor::full(va.shape.clone(), v));
            }
            Op::SumAxis { input, axis } => {
                let vi = val(*input);
                let (outer, len, inner) = split_axis(&vi.shape, *axis);
                let mut data = vec![T::zero(); vi.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        data[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g.data[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(&mut grads[input.0], Tensor { shape: vi.shape.clone(), data });
            }
            Op::MaxAxis { input, argmax } => {
                let vi = val(*input);
                let mut data = vec![T::zero(); vi.numel()];
                for (&idx, &go) in argmax.iter().zip(&g.data) {
                    data[idx] = data[idx] + go;
                }
                accumulate(&mut grads[input.0], Tensor { shape: vi.shape.clone(), data });
            }
            Op::GlobalAvgPool(a) => {
                let va = val(*a);
                let spatial: usize = va.shape[2..].iter().product();
                let scale = T::of_f64(1.0 / spatial as f64);
                let mut data = Vec::with_capacity(va.numel());
                for &go in &g.data {
                    data.extend(std::iter::repeat_n(go * scale, spatial));
                }
                accumulate(&mut grads[a.0], Tensor { shape: va.shape.clone(), data });
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let dim = y.shape[1];
                let mut data = Vec::with_capacity(y.numel());
                for (r, (yr, gr)) in y.data.chunks(dim).zip(g.data.chunks(dim)).enumerate() {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    data.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / norms[r]));
                }
                accumulate(&mut grads[input.0], Tensor { shape: y.shape.clone(), data });
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                geometry,
            } => {
                let need = [needs(*input), needs(*kernel), bias.is_some_and(needs)];
                let (gi, gk, gb) = geometry.backward(&val(*input).data, &val(*kernel).data, &g.data, need);
                if let Some(data) = gi {
                    accumulate(&mut grads[input.0], Tensor { shape: val(*input).shape.clone(), data });
                }
                if let Some(data) = gk {
                    accumulate(&mut grads[kernel.0], Tensor { shape: val(*kernel).shape.clone(), data });
                }
                if let (Some(b), Some(data)) = (bias, gb) {
                    accumulate(&mut grads[b.0], Tensor { shape: val(*b).shape.clone(), data });
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let vx = val(*input);
                let vg = &val(*gamma).data;
                let c = vx.shape[1];
                let spatial: usize = vx.shape[2..].iter().product();
                let cpg = c / groups;
                let group_len = cpg * spatial;
                let n = T::of_f64(group_len as f64);
                let mut dx = vec![T::zero(); vx.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gi, chunk) in vx.data.chunks(group_len).enumerate() {
                    let grp = gi % groups;
                    let (mu, r) = (mean[gi], rstd[gi]);
                    let go = &g.data[gi * group_len..(gi + 1) * group_len];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for (j, (&x, &gv)) in chunk.iter().zip(go).enumerate() {
                        let ch = grp * cpg + j / spatial;
                        let xhat = (x - mu) * r;
                        let dxhat = gv * vg[ch];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma[ch] = dgamma[ch] + gv * xhat;
                        dbeta[ch] = dbeta[ch] + gv;
                    }
                    for (j, (&x, &gv)) in chunk.iter().zip(go).enumerate() {
                        let ch = grp * cpg + j / spatial;
                        let xhat = (x - mu) * r;
                        let dxhat = gv * vg[ch];
                        dx[gi * group_len + j] = r / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                if needs(*input) {
                    accumulate(&mut grads[input.0], Tensor { shape: vx.shape.clone(), data: dx });
                }
                if needs(*gamma) {
                    accumulate(&mut grads[gamma.0], Tensor { shape: vec![c], data: dgamma });
                }
                if needs(*beta) {
                    accumulate(&mut grads[beta.0], Tensor { shape: vec![c], data: dbeta });
                }
            }
        }
    }
}
