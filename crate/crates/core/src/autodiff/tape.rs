use super::kernels::{self, ConvGeom};
use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv3 {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
    Resize(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Sum(Var),
    Mean(Var),
    AvgPool(Var, usize),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records primitive applications in execution order; node ids are a
/// topological order by construction.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `v` when it is not on any path to
    /// the loss.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims4(t: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects NCHW, got {t:?}"))),
    }
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shape preserved")
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::c(GELU_C);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * a * x * x)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Batch layout of a matmul: `rows` of `a` per batch entry and whether `b` is
/// shared across the batch.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!("matmul needs rank>=2, got {a:?} x {b:?}")));
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        if b[0] != k {
            return Err(Error::Shape(format!("matmul inner dims: {a:?} x {b:?}")));
        }
        let m = numel(&a[..a.len() - 1]);
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(b[1]);
        return Ok(MatMulDims {
            batch: 1,
            m,
            k,
            n: b[1],
            shared_b: true,
            out_shape,
        });
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
        return Err(Error::Shape(format!("batched matmul: {a:?} x {b:?}")));
    }
    let batch = numel(&a[..a.len() - 2]);
    let m = a[a.len() - 2];
    let n = b[b.len() - 1];
    let mut out_shape = a[..a.len() - 1].to_vec();
    out_shape.push(n);
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        shared_b: false,
        out_shape,
    })
}

fn pool_out(len: usize, k: usize) -> usize {
    len.div_ceil(k)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest `|x|` fed to any ReLU or clamp boundary on the tape, i.e. the
    /// distance of the recorded point from the nearest kink. `None` if the
    /// tape has no such primitive.
    pub fn kink_margin(&self) -> Option<T> {
        let mut best: Option<T> = None;
        let mut see = |d: T| best = Some(best.map_or(d, |b: T| b.min(d)));
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => self.nodes[x.0].value.data().iter().for_each(|v| see(v.abs())),
                Op::Clamp(x, lo, hi) => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .for_each(|&v| see((v - lo).abs().min((v - hi).abs()))),
                _ => {}
            }
        }
        best
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or input under test).
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "div")?;
        if self.value(b).data().iter().any(|&v| v == T::zero()) {
            return Err(Error::InvalidArgument("division by zero".into()));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = map(self.value(a), |x| x * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = map(self.value(a), |x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `a (…, M, K) · b`, with `b` either a shared `(K, N)` matrix or a batch
    /// `(…, K, N)` matching `a`'s leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.value(a).shape(), self.value(b).shape())?;
        let mut out = vec![T::zero(); numel(&d.out_shape)];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if d.shared_b {
            kernels::gemm(d.m, d.k, d.n, ad, bd, &mut out);
        } else {
            let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
            for i in 0..d.batch {
                kernels::gemm(
                    d.m,
                    d.k,
                    d.n,
                    &ad[i * sa..(i + 1) * sa],
                    &bd[i * sb..(i + 1) * sb],
                    &mut out[i * so..(i + 1) * so],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(d.out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a `(C)` bias along the last axis of `x (…, C)`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        let c = *xs.last().ok_or_else(|| Error::Shape("bias on scalar".into()))?;
        if bs != [c] {
            return Err(Error::Shape(format!("bias {bs:?} for input {xs:?}")));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (n, cin, h, wd) = dims4(self.value(x).shape(), "conv2d input")?;
        let (cout, wcin, kh, kw) = dims4(self.value(w).shape(), "conv2d weight")?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: weight expects {wcin} input channels, got {cin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} does not fit {h}x{wd} (pad {pad})"
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Ok((
            n,
            cout,
            ConvGeom {
                cin,
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            },
        ))
    }

    /// 2-D convolution of `x (N,Ci,H,W)` with `w (Co,Ci,kh,kw)` and optional
    /// bias `(Co)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cout, g) = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?}, expected [{cout}]",
                    self.value(b).shape()
                )));
            }
        }
        let (krows, p) = (g.cols_rows(), g.cols_len());
        let in_len = g.cin * g.h * g.w;
        let mut cols = vec![T::zero(); krows * p];
        let mut out = vec![T::zero(); n * cout * p];
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        for i in 0..n {
            kernels::im2col(&xd[i * in_len..(i + 1) * in_len], &g, &mut cols);
            let o = &mut out[i * cout * p..(i + 1) * cout * p];
            if let Some(b) = b {
                for (co, &bv) in self.value(b).data().iter().enumerate() {
                    o[co * p..(co + 1) * p].fill(bv);
                }
            }
            kernels::gemm(cout, krows, p, wdat, &cols, o);
        }
        let mut vars = vec![x, w];
        vars.extend(b);
        let rg = self.rg(&vars);
        let t = Tensor::new(vec![n, cout, g.ho, g.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Depthwise 3×3 convolution (stride 1, zero padding 1) with per-channel
    /// bias. `w` has shape `(C,1,3,3)`.
    pub fn depthwise_conv3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.value(x).shape(), "depthwise input")?;
        if self.value(w).shape() != [c, 1, 3, 3] || self.value(b).shape() != [c] {
            return Err(Error::Shape(format!(
                "depthwise conv: weight {:?} / bias {:?} for {c} channels",
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); n * c * h * wd];
        for plane in 0..n * c {
            let ch = plane % c;
            let k = &wdat[ch * 9..ch * 9 + 9];
            let src = &xd[plane * h * wd..(plane + 1) * h * wd];
            let dst = &mut out[plane * h * wd..(plane + 1) * h * wd];
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bd[ch];
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * src[iy as usize * wd + ix as usize];
                        }
                    }
                    dst[y * wd + xx] = acc;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        let t = Tensor::new(vec![n, c, h, wd], out)?;
        Ok(self.push(t, Op::DepthwiseConv3 { x, w, b }, rg))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("layer_norm params for width {c}")));
        }
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xd = self.value(x).data();
        let rows = xd.len() / c;
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_c = T::one() / T::c(c as f64);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::c(LAYER_NORM_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + bt[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let t = Tensor::new(xs, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(xs, out)?, Op::Softmax(x), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.value(x), |v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = map(self.value(x), sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidArgument("log of non-positive value".into()));
        }
        let out = map(self.value(x), |v| v.ln());
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Clamps into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = map(self.value(x), |v| v.max(lo).min(hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// Bilinear resize of `x (N,C,H,W)` to `(N,C,oh,ow)` with half-pixel
    /// centres (align-corners off).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "resize")?;
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("resize to empty size".into()));
        }
        let ty = kernels::resize_taps(h, oh);
        let tx = kernels::resize_taps(w, ow);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::c(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::c(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::Resize(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let data = kernels::permute(self.value(x).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute(x, axes.to_vec()), rg))
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d])
            {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::c(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Average pooling with a `k×k` window and stride `k`. Trailing partial
    /// windows are averaged over their valid pixels.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x).shape(), "avg_pool")?;
        if k == 0 {
            return Err(Error::InvalidArgument("pool size 0".into()));
        }
        let (oh, ow) = (pool_out(h, k), pool_out(w, k));
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = (oy * k, ((oy + 1) * k).min(h));
                for ox in 0..ow {
                    let (x0, x1) = (ox * k, ((ox + 1) * k).min(w));
                    let mut s = T::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += src[y * w + xx];
                        }
                    }
                    out[plane * oh * ow + oy * ow + ox] = s / T::c(((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![n, c, oh, ow], out)?, Op::AvgPool(x, k), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, map(g, |v| -v));
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accum(grads, a, zip_map(g, self.value(b), |x, y| x * y));
                }
                if self.requires_grad(b) {
                    self.accum(grads, b, zip_map(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.requires_grad(a) {
                    self.accum(grads, a, zip_map(g, bv, |x, y| x / y));
                }
                if self.requires_grad(b) {
                    let q = zip_map(&node.value, bv, |o, y| -o / y);
                    self.accum(grads, b, zip_map(g, &q, |x, y| x * y));
                }
            }
            &Op::Scale(a, s) => self.accum(grads, a, map(g, |v| v * s)),
            &Op::AddScalar(a) => self.accum(grads, a, g.clone()),
            &Op::MatMul(a, b) => self.matmul_backward(a, b, g, grads)?,
            &Op::AddBias(x, b) => {
                self.accum(grads, x, g.clone());
                if self.requires_grad(b) {
                    let c = self.value(b).len();
                    let mut db = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, b, Tensor::new(vec![c], db)?);
                }
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(x, w, b, stride, pad, g, grads)?
            }
            &Op::DepthwiseConv3 { x, w, b } => self.depthwise_backward(x, w, b, g, grads)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, rstd, g, grads)?,
            &Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.chunks_mut(c))
                {
                    let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accum(grads, x, Tensor::new(y.shape().to_vec(), dx)?);
            }
            &Op::Gelu(x) => {
                let d = zip_map(g, self.value(x), |gv, xv| gv * gelu_grad(xv));
                self.accum(grads, x, d);
            }
            &Op::Relu(x) => {
                let d = zip_map(g, self.value(x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accum(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y));
                self.accum(grads, x, d);
            }
            &Op::Log(x) => {
                let d = zip_map(g, self.value(x), |gv, xv| gv / xv);
                self.accum(grads, x, d);
            }
            &Op::Clamp(x, lo, hi) => {
                let d = zip_map(g, self.value(x), |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.accum(grads, x, d);
            }
            &Op::Resize(x) => {
                let (n, c, h, w) = dims4(self.value(x).shape(), "resize")?;
                let (_, _, oh, ow) = dims4(g.shape(), "resize grad")?;
                let ty = kernels::resize_taps(h, oh);
                let tx = kernels::resize_taps(w, ow);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        let fy = T::c(fy);
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let fx = T::c(fx);
                            let gv = gs[oy * ow + ox];
                            let top = gv * (T::one() - fy);
                            let bot = gv * fy;
                            dst[y0 * w + x0] += top * (T::one() - fx);
                            dst[y0 * w + x1] += top * fx;
                            dst[y1 * w + x0] += bot * (T::one() - fx);
                            dst[y1 * w + x1] += bot * fx;
                        }
                    }
                }
                self.accum(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
            }
            &Op::Reshape(x) => {
                let t = g.clone().reshape(self.value(x).shape())?;
                self.accum(grads, x, t);
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let data = kernels::permute(g.data(), g.shape(), &inv);
                self.accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), data)?);
            }
            Op::Concat(xs, axis) => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in xs {
                    let vs = self.value(v).shape().to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accum(grads, v, Tensor::new(vs, d)?);
                    }
                    offset += chunk;
                }
            }
            &Op::Sum(x) => {
                let gv = g.item();
                self.accum(grads, x, Tensor::full(self.value(x).shape(), gv));
            }
            &Op::Mean(x) => {
                let t = self.value(x);
                let gv = g.item() / T::c(t.len() as f64);
                self.accum(grads, x, Tensor::full(t.shape(), gv));
            }
            &Op::AvgPool(x, k) => {
                let (n, c, h, w) = dims4(self.value(x).shape(), "avg_pool")?;
                let (oh, ow) = (pool_out(h, k), pool_out(w, k));
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        let (y0, y1) = (oy * k, ((oy + 1) * k).min(h));
                        for ox in 0..ow {
                            let (x0, x1) = (ox * k, ((ox + 1) * k).min(w));
                            let gv = g.data()[plane * oh * ow + oy * ow + ox]
                                / T::c(((y1 - y0) * (x1 - x0)) as f64);
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[plane * h * w + y * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accum(grads, x, Tensor::new(vec![n, c, h, w], dx)?);
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = matmul_dims(av.shape(), bv.shape())?;
        let (sa, sb, so) = (d.m * d.k, d.k * d.n, d.m * d.n);
        if self.requires_grad(a) {
            let mut da = vec![T::zero(); av.len()];
            for i in 0..d.batch {
                let bs = if d.shared_b { bv.data() } else { &bv.data()[i * sb..(i + 1) * sb] };
                kernels::gemm_a_bt(
                    d.m,
                    d.n,
                    d.k,
                    &g.data()[i * so..(i + 1) * so],
                    bs,
                    &mut da[i * sa..(i + 1) * sa],
                );
            }
            self.accum(grads, a, Tensor::new(av.shape().to_vec(), da)?);
        }
        if self.requires_grad(b) {
            let mut db = vec![T::zero(); bv.len()];
            for i in 0..d.batch {
                let dbs = if d.shared_b { &mut db[..] } else { &mut db[i * sb..(i + 1) * sb] };
                kernels::gemm_at_b(
                    d.k,
                    d.m,
                    d.n,
                    &av.data()[i * sa..(i + 1) * sa],
                    &g.data()[i * so..(i + 1) * so],
                    dbs,
                );
            }
            self.accum(grads, b, Tensor::new(bv.shape().to_vec(), db)?);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (n, cout, geom) = self.conv_geom(x, w, stride, pad)?;
        let (krows, p) = (geom.cols_rows(), geom.cols_len());
        let in_len = geom.cin * geom.h * geom.w;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut cols = vec![T::zero(); krows * p];
        let mut dcols = vec![T::zero(); krows * p];
        let mut dw = vec![T::zero(); if need_w { wdat.len() } else { 0 }];
        let mut dx = vec![T::zero(); if need_x { xd.len() } else { 0 }];
        for i in 0..n {
            let gi = &g.data()[i * cout * p..(i + 1) * cout * p];
            if need_w {
                kernels::im2col(&xd[i * in_len..(i + 1) * in_len], &geom, &mut cols);
                kernels::gemm_a_bt(cout, p, krows, gi, &cols, &mut dw);
            }
            if need_x {
                dcols.fill(T::zero());
                kernels::gemm_at_b(krows, cout, p, wdat, gi, &mut dcols);
                kernels::col2im(&dcols, &geom, &mut dx[i * in_len..(i + 1) * in_len]);
            }
        }
        if need_w {
            self.accum(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw)?);
        }
        if need_x {
            self.accum(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                let mut db = vec![T::zero(); cout];
                for i in 0..n {
                    for (co, d) in db.iter_mut().enumerate() {
                        *d += g.data()[(i * cout + co) * p..(i * cout + co + 1) * p]
                            .iter()
                            .copied()
                            .sum::<T>();
                    }
                }
                self.accum(grads, b, Tensor::new(vec![cout], db)?);
            }
        }
        Ok(())
    }

    fn depthwise_backward(&self, x: Var, w: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let (n, c, h, wd) = dims4(self.value(x).shape(), "depthwise input")?;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let mut dx = vec![T::zero(); xd.len()];
        let mut dw = vec![T::zero(); wdat.len()];
        let mut db = vec![T::zero(); c];
        for plane in 0..n * c {
            let ch = plane % c;
            let src = &xd[plane * h * wd..(plane + 1) * h * wd];
            let gs = &g.data()[plane * h * wd..(plane + 1) * h * wd];
            let dsrc = &mut dx[plane * h * wd..(plane + 1) * h * wd];
            for y in 0..h {
                for xx in 0..wd {
                    let gv = gs[y * wd + xx];
                    db[ch] += gv;
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let si = iy as usize * wd + ix as usize;
                            dw[ch * 9 + ky * 3 + kx] += gv * src[si];
                            dsrc[si] += gv * wdat[ch * 9 + ky * 3 + kx];
                        }
                    }
                }
            }
        }
        self.accum(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        self.accum(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw)?);
        self.accum(grads, b, Tensor::new(vec![c], db)?);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        rstd: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let gm = self.value(gamma).data();
        let c = gm.len();
        let rows = xhat.len() / c;
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); xhat.len()];
        let inv_c = T::one() / T::c(c as f64);
        for r in 0..rows {
            let gr = &g.data()[r * c..(r + 1) * c];
            let xr = &xhat[r * c..(r + 1) * c];
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for j in 0..c {
                dgamma[j] += gr[j] * xr[j];
                dbeta[j] += gr[j];
                let d = gr[j] * gm[j];
                mean_d += d;
                mean_dx += d * xr[j];
            }
            mean_d *= inv_c;
            mean_dx *= inv_c;
            for j in 0..c {
                let d = gr[j] * gm[j];
                dx[r * c + j] = rstd[r] * (d - mean_d - xr[j] * mean_dx);
            }
        }
        self.accum(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx)?);
        self.accum(grads, gamma, Tensor::new(vec![c], dgamma)?);
        self.accum(grads, beta, Tensor::new(vec![c], dbeta)?);
        Ok(())
    }
}
