//! Reverse-mode automatic differentiation over 5D tensors.
//!
//! The operator set is exactly what the reconstruction network and its
//! composite loss need: 3D convolution and its transpose, PReLU, channel
//! concatenation, elementwise arithmetic, separable Gaussian blur, 2x2
//! average pooling and a handful of reductions.
//!
//! Evaluation is eager: every `Tape` method computes its result immediately
//! and records the node for `backward`. Scalars are tensors of shape
//! `[1,1,1,1,1]`.

pub mod conv;
pub mod gradcheck;

use crate::error::{Error, Result};
use conv::ConvDims;

/// (b, c, d, h, w)
pub type Dims5 = [usize; 5];

pub fn numel(dims: Dims5) -> usize {
    dims.iter().product()
}

/// Dense row-major 5D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5 {
    pub dims: Dims5,
    pub data: Vec<f64>,
}

impl Tensor5 {
    pub fn zeros(dims: Dims5) -> Self {
        Self { dims, data: vec![0.0; numel(dims)] }
    }

    pub fn from_vec(dims: Dims5, data: Vec<f64>) -> Result<Self> {
        if data.len() != numel(dims) {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self { dims: [1, 1, 1, 1, 1], data: vec![v] }
    }

    pub fn random<R: rand::Rng>(dims: Dims5, rng: &mut R, lo: f64, hi: f64) -> Self {
        let data = (0..numel(dims)).map(|_| rng.random_range(lo..hi)).collect();
        Self { dims, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Convolution layer contract: standard layers use 3x3x3 kernels at stride
/// 1 or 2 (transaxial only); resolution-changing layers use 3x4x4 kernels at
/// stride 2 so that upsampling doubles h and w exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride_hw: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn standard(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: [3, 3, 3], stride_hw: 1, transposed: false }
    }

    pub fn downsample(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: [3, 3, 3], stride_hw: 2, transposed: false }
    }

    pub fn upsample(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: [3, 4, 4], stride_hw: 2, transposed: true }
    }

    /// Strided non-transposed 3x4x4 convolution; the exact adjoint of
    /// `upsample` with shared weights.
    pub fn downsample_344(in_channels: usize, out_channels: usize) -> Self {
        Self { in_channels, out_channels, kernel: [3, 4, 4], stride_hw: 2, transposed: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        match (self.kernel, self.stride_hw, self.transposed) {
            ([3, 3, 3], 1 | 2, false) => Ok(()),
            ([3, 4, 4], 2, _) => Ok(()),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported convolution: kernel {:?} stride {} transposed {}",
                self.kernel, self.stride_hw, self.transposed
            ))),
        }
    }

    /// Learnable weight tensor dims. Standard: [out_c, in_c, kd, kh, kw];
    /// transposed: [in_c, out_c, kd, kh, kw].
    pub fn weight_dims(&self) -> Dims5 {
        let [kd, kh, kw] = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kd, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kd, kh, kw]
        }
    }

    pub fn bias_dims(&self) -> Dims5 {
        [1, self.out_channels, 1, 1, 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, bias: Option<NodeId>, dims: ConvDims },
    ConvT { x: NodeId, w: NodeId, bias: Option<NodeId>, dims: ConvDims },
    PRelu { x: NodeId, slope: NodeId },
    Concat { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Abs { x: NodeId },
    Relu { x: NodeId },
    Scale { x: NodeId, s: NodeId },
    Recip { x: NodeId },
    AddConst { x: NodeId },
    MulConst { x: NodeId, c: f64 },
    PowConst { x: NodeId, p: f64 },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    MaxAll { x: NodeId, argmax: usize },
    Blur2d { x: NodeId, taps: Vec<f64> },
    AvgPool2 { x: NodeId },
}

struct Node {
    dims: Dims5,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Eager computation tape. Nodes are created in topological order, so the
/// backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor5, requires_grad: bool) -> NodeId {
        self.push(t.dims, t.data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor5) -> NodeId {
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor5::scalar(v), false)
    }

    pub fn dims(&self, id: NodeId) -> Dims5 {
        self.nodes[id.0].dims
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].values[0]
    }

    /// Gradient accumulated by the last `backward` call, if the node
    /// required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, dims: Dims5, values: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(values.len(), numel(dims));
        self.nodes.push(Node { dims, values, grad: None, requires_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn check_same_dims(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    // ----- network operators -------------------------------------------

    /// Zero-padded strided cross-correlation. Spatial dims are preserved at
    /// stride 1 and halved (rounding up) in h and w at stride 2.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        if spec.transposed {
            return Err(Error::InvalidConfig(
                "conv3d requires a non-transposed spec".into(),
            ));
        }
        let [b, c, d, h, wd] = self.dims(x);
        if c != spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, spec expects {}",
                spec.in_channels
            )));
        }
        if self.dims(w) != spec.weight_dims() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?}, spec expects {:?}",
                self.dims(w),
                spec.weight_dims()
            )));
        }
        if let Some(bias) = bias {
            if self.dims(bias) != spec.bias_dims() {
                return Err(Error::ShapeMismatch("bias dims".into()));
            }
        }
        let dims = ConvDims::new(
            b,
            spec.in_channels,
            spec.out_channels,
            [d, h, wd],
            spec.kernel,
            [1, spec.stride_hw, spec.stride_hw],
            [1, 1, 1],
        );
        let out = conv::forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            bias.map(|b| self.nodes[b.0].values.as_slice()),
            &dims,
        );
        let [od, oh, ow] = dims.out_spatial;
        let out_dims = [b, spec.out_channels, od, oh, ow];
        let rg = self.needs(&[x, w]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out_dims, out, rg, Op::Conv { x, w, bias, dims }))
    }

    /// Transposed convolution: the adjoint of `conv3d` with a 3x4x4 kernel
    /// at stride (1,2,2). Output h and w are exactly doubled.
    pub fn conv3d_transpose(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        spec: &ConvSpec,
    ) -> Result<NodeId> {
        spec.validate()?;
        if !spec.transposed {
            return Err(Error::InvalidConfig(
                "conv3d_transpose requires a transposed spec".into(),
            ));
        }
        let [b, c, d, h, wd] = self.dims(x);
        if c != spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {c} channels, spec expects {}",
                spec.in_channels
            )));
        }
        if self.dims(w) != spec.weight_dims() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?}, spec expects {:?}",
                self.dims(w),
                spec.weight_dims()
            )));
        }
        if let Some(bias) = bias {
            if self.dims(bias) != spec.bias_dims() {
                return Err(Error::ShapeMismatch("bias dims".into()));
            }
        }
        // The adjoint conv maps the doubled field back to this op's input:
        // its in side is this op's output, its out side is this op's input.
        let dims = ConvDims::new(
            b,
            spec.out_channels,
            spec.in_channels,
            [d, 2 * h, 2 * wd],
            spec.kernel,
            [1, 2, 2],
            [1, 1, 1],
        );
        if dims.out_spatial != [d, h, wd] {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv cannot map {:?} onto a doubled output",
                [d, h, wd]
            )));
        }
        let mut out = conv::input_grad(&self.nodes[x.0].values, &self.nodes[w.0].values, &dims);
        if let Some(bias) = bias {
            let bias_vals = self.nodes[bias.0].values.clone();
            let plane = dims.in_spatial.iter().product::<usize>();
            for bi in 0..b {
                for oc in 0..spec.out_channels {
                    let base = (bi * spec.out_channels + oc) * plane;
                    let bv = bias_vals[oc];
                    for v in &mut out[base..base + plane] {
                        *v += bv;
                    }
                }
            }
        }
        let out_dims = [b, spec.out_channels, d, 2 * h, 2 * wd];
        let rg = self.needs(&[x, w]) || bias.is_some_and(|b| self.needs(&[b]));
        Ok(self.push(out_dims, out, rg, Op::ConvT { x, w, bias, dims }))
    }

    /// Per-channel parametric rectifier: x for x >= 0, slope_c * x otherwise.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let dims = self.dims(x);
        let c = dims[1];
        if self.dims(slope) != [1, c, 1, 1, 1] {
            return Err(Error::ShapeMismatch(format!(
                "slope must have one entry per channel ({c}), got {:?}",
                self.dims(slope)
            )));
        }
        let plane = dims[2] * dims[3] * dims[4];
        let xv = &self.nodes[x.0].values;
        let sv = &self.nodes[slope.0].values;
        let mut out = vec![0.0; xv.len()];
        for b in 0..dims[0] {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let s = sv[ch];
                for i in base..base + plane {
                    let v = xv[i];
                    out[i] = if v >= 0.0 { v } else { s * v };
                }
            }
        }
        let rg = self.needs(&[x, slope]);
        Ok(self.push(dims, out, rg, Op::PRelu { x, slope }))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da[0] != db[0] || da[2..] != db[2..] {
            return Err(Error::ShapeMismatch(format!(
                "concat requires equal non-channel dims: {da:?} vs {db:?}"
            )));
        }
        let plane = da[2] * da[3] * da[4];
        let (ca, cb) = (da[1], db[1]);
        let out_dims = [da[0], ca + cb, da[2], da[3], da[4]];
        let mut out = Vec::with_capacity(numel(out_dims));
        for bi in 0..da[0] {
            let a_base = bi * ca * plane;
            let b_base = bi * cb * plane;
            out.extend_from_slice(&self.nodes[a.0].values[a_base..a_base + ca * plane]);
            out.extend_from_slice(&self.nodes[b.0].values[b_base..b_base + cb * plane]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out_dims, out, rg, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims(a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.dims(a), out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims(a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.dims(a), out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_dims(a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.dims(a), out, rg, Op::Mul { a, b }))
    }

    /// |x| with subgradient 0 at the kink.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.abs()).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::Abs { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.max(0.0)).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::Relu { x })
    }

    /// Broadcast-multiply a tensor by a scalar node.
    pub fn scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.dims(s) != [1, 1, 1, 1, 1] {
            return Err(Error::ShapeMismatch("scale factor must be a scalar node".into()));
        }
        let sv = self.scalar_value(s);
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * sv).collect();
        let rg = self.needs(&[x, s]);
        Ok(self.push(self.dims(x), out, rg, Op::Scale { x, s }))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| 1.0 / v).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::Recip { x })
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v + c).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::AddConst { x })
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v * c).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::MulConst { x, c })
    }

    /// x^p elementwise; callers must keep x positive where p is fractional.
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|v| v.powf(p)).collect();
        let rg = self.needs(&[x]);
        self.push(self.dims(x), out, rg, Op::PowConst { x, p })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.needs(&[x]);
        self.push([1, 1, 1, 1, 1], vec![s], rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].values.len();
        let s: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.needs(&[x]);
        self.push([1, 1, 1, 1, 1], vec![s / n as f64], rg, Op::MeanAll { x })
    }

    /// Maximum over all elements; the gradient flows to the first maximum.
    pub fn max_all(&mut self, x: NodeId) -> NodeId {
        let vals = &self.nodes[x.0].values;
        let mut argmax = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in vals.iter().enumerate() {
            if v > best {
                best = v;
                argmax = i;
            }
        }
        let rg = self.needs(&[x]);
        self.push([1, 1, 1, 1, 1], vec![best], rg, Op::MaxAll { x, argmax })
    }

    /// Separable valid-region blur over h and w with the given 1D taps;
    /// output h and w shrink by taps.len() - 1.
    pub fn blur2d(&mut self, x: NodeId, taps: &[f64]) -> Result<NodeId> {
        let [b, c, d, h, w] = self.dims(x);
        let k = taps.len();
        if k == 0 || h < k || w < k {
            return Err(Error::ShapeMismatch(format!(
                "blur window {k} does not fit in {h}x{w}"
            )));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        let xv = &self.nodes[x.0].values;
        // Pass over h, then w.
        let mut tmp = vec![0.0; b * c * d * oh * w];
        for img in 0..b * c * d {
            let src = &xv[img * h * w..(img + 1) * h * w];
            let dst = &mut tmp[img * oh * w..(img + 1) * oh * w];
            for row in 0..oh {
                for (t, tap) in taps.iter().enumerate() {
                    let s = &src[(row + t) * w..(row + t + 1) * w];
                    let d_row = &mut dst[row * w..(row + 1) * w];
                    for (o, &v) in d_row.iter_mut().zip(s) {
                        *o += tap * v;
                    }
                }
            }
        }
        let mut out = vec![0.0; b * c * d * oh * ow];
        for img in 0..b * c * d {
            let src = &tmp[img * oh * w..(img + 1) * oh * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for row in 0..oh {
                for col in 0..ow {
                    let mut acc = 0.0;
                    for (t, tap) in taps.iter().enumerate() {
                        acc += tap * src[row * w + col + t];
                    }
                    dst[row * ow + col] = acc;
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push([b, c, d, oh, ow], out, rg, Op::Blur2d { x, taps: taps.to_vec() }))
    }

    /// 2x2 average pooling over h and w (floor semantics: a trailing odd row
    /// or column is dropped).
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let [b, c, d, h, w] = self.dims(x);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::ShapeMismatch(format!("cannot pool {h}x{w}")));
        }
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; b * c * d * oh * ow];
        for img in 0..b * c * d {
            let src = &xv[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for row in 0..oh {
                for col in 0..ow {
                    dst[row * ow + col] = 0.25
                        * (src[2 * row * w + 2 * col]
                            + src[2 * row * w + 2 * col + 1]
                            + src[(2 * row + 1) * w + 2 * col]
                            + src[(2 * row + 1) * w + 2 * col + 1]);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push([b, c, d, oh, ow], out, rg, Op::AvgPool2 { x }))
    }

    // ----- backward ------------------------------------------------------

    /// Accumulate d(loss)/d(node) for every node that requires a gradient.
    /// `loss` must be a scalar node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.dims(loss) != [1, 1, 1, 1, 1] {
            return Err(Error::GraphContract(format!(
                "backward needs a scalar loss, got {:?}",
                self.dims(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Intermediate gradients are consumed here; only leaves keep
            // theirs for the caller.
            let g = match self.nodes[i].op {
                Op::Leaf => continue,
                _ => match self.nodes[i].grad.take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, bias, dims } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = conv::input_grad(&g, &self.nodes[w.0].values, &dims);
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = conv::weight_grad(&self.nodes[x.0].values, &g, &dims);
                        self.accumulate(w, &dw);
                    }
                    if let Some(bias) = bias {
                        if self.nodes[bias.0].requires_grad {
                            let db = conv::bias_grad(&g, &dims);
                            self.accumulate(bias, &db);
                        }
                    }
                }
                Op::ConvT { x, w, bias, dims } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = conv::forward(&g, &self.nodes[w.0].values, None, &dims);
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = conv::weight_grad(&g, &self.nodes[x.0].values, &dims);
                        self.accumulate(w, &dw);
                    }
                    if let Some(bias) = bias {
                        if self.nodes[bias.0].requires_grad {
                            // Bias feeds the in-side channels of the adjoint.
                            let plane = dims.in_spatial.iter().product::<usize>();
                            let mut db = vec![0.0; dims.in_c];
                            for b in 0..dims.batch {
                                for ch in 0..dims.in_c {
                                    let base = (b * dims.in_c + ch) * plane;
                                    db[ch] += g[base..base + plane].iter().sum::<f64>();
                                }
                            }
                            self.accumulate(bias, &db);
                        }
                    }
                }
                Op::PRelu { x, slope } => {
                    let dims = self.nodes[i].dims;
                    let c = dims[1];
                    let plane = dims[2] * dims[3] * dims[4];
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; g.len()];
                        let xv = &self.nodes[x.0].values;
                        let sv = &self.nodes[slope.0].values;
                        for b in 0..dims[0] {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let s = sv[ch];
                                for k in base..base + plane {
                                    dx[k] = if xv[k] >= 0.0 { g[k] } else { s * g[k] };
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[slope.0].requires_grad {
                        let mut ds = vec![0.0; c];
                        let xv = &self.nodes[x.0].values;
                        for b in 0..dims[0] {
                            for ch in 0..c {
                                let base = (b * c + ch) * plane;
                                let mut acc = 0.0;
                                for k in base..base + plane {
                                    if xv[k] < 0.0 {
                                        acc += xv[k] * g[k];
                                    }
                                }
                                ds[ch] += acc;
                            }
                        }
                        self.accumulate(slope, &ds);
                    }
                }
                Op::Concat { a, b } => {
                    let da = self.nodes[a.0].dims;
                    let db = self.nodes[b.0].dims;
                    let plane = da[2] * da[3] * da[4];
                    let (ca, cb) = (da[1], db[1]);
                    if self.nodes[a.0].requires_grad {
                        let mut ga = vec![0.0; numel(da)];
                        for bi in 0..da[0] {
                            let src = bi * (ca + cb) * plane;
                            let dst = bi * ca * plane;
                            ga[dst..dst + ca * plane]
                                .copy_from_slice(&g[src..src + ca * plane]);
                        }
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; numel(db)];
                        for bi in 0..da[0] {
                            let src = bi * (ca + cb) * plane + ca * plane;
                            let dst = bi * cb * plane;
                            gb[dst..dst + cb * plane]
                                .copy_from_slice(&g[src..src + cb * plane]);
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(a, &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        self.accumulate(b, &g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(a, &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        self.accumulate(b, &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b.0].values)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a.0].values)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Abs { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(gv, xv)| {
                                if *xv > 0.0 {
                                    *gv
                                } else if *xv < 0.0 {
                                    -*gv
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::Scale { x, s } => {
                    let sv = self.nodes[s.0].values[0];
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g.iter().map(|gv| gv * sv).collect();
                        self.accumulate(x, &dx);
                    }
                    if self.nodes[s.0].requires_grad {
                        let ds: f64 = g
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(gv, xv)| gv * xv)
                            .sum();
                        self.accumulate(s, &[ds]);
                    }
                }
                Op::Recip { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(gv, xv)| -gv / (xv * xv))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::AddConst { x } => {
                    if self.nodes[x.0].requires_grad {
                        self.accumulate(x, &g);
                    }
                }
                Op::MulConst { x, c } => {
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::PowConst { x, p } => {
                    if self.nodes[x.0].requires_grad {
                        let dx: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[x.0].values)
                            .map(|(gv, xv)| gv * p * xv.powf(p - 1.0))
                            .collect();
                        self.accumulate(x, &dx);
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x.0].requires_grad {
                        let dx = vec![g[0]; self.nodes[x.0].values.len()];
                        self.accumulate(x, &dx);
                    }
                }
                Op::MeanAll { x } => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.nodes[x.0].values.len();
                        let dx = vec![g[0] / n as f64; n];
                        self.accumulate(x, &dx);
                    }
                }
                Op::MaxAll { x, argmax } => {
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![0.0; self.nodes[x.0].values.len()];
                        dx[argmax] = g[0];
                        self.accumulate(x, &dx);
                    }
                }
                Op::Blur2d { x, ref taps } => {
                    if self.nodes[x.0].requires_grad {
                        let [b, c, d, h, w] = self.nodes[x.0].dims;
                        let k = taps.len();
                        let (oh, ow) = (h - k + 1, w - k + 1);
                        // Adjoint of the w pass, then of the h pass.
                        let mut tmp = vec![0.0; b * c * d * oh * w];
                        for img in 0..b * c * d {
                            let src = &g[img * oh * ow..(img + 1) * oh * ow];
                            let dst = &mut tmp[img * oh * w..(img + 1) * oh * w];
                            for row in 0..oh {
                                for col in 0..ow {
                                    let gv = src[row * ow + col];
                                    for (t, tap) in taps.iter().enumerate() {
                                        dst[row * w + col + t] += tap * gv;
                                    }
                                }
                            }
                        }
                        let mut dx = vec![0.0; b * c * d * h * w];
                        for img in 0..b * c * d {
                            let src = &tmp[img * oh * w..(img + 1) * oh * w];
                            let dst = &mut dx[img * h * w..(img + 1) * h * w];
                            for row in 0..oh {
                                for (t, tap) in taps.iter().enumerate() {
                                    let d_row = &mut dst[(row + t) * w..(row + t + 1) * w];
                                    let s_row = &src[row * w..(row + 1) * w];
                                    for (o, &v) in d_row.iter_mut().zip(s_row) {
                                        *o += tap * v;
                                    }
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
                Op::AvgPool2 { x } => {
                    if self.nodes[x.0].requires_grad {
                        let [b, c, d, h, w] = self.nodes[x.0].dims;
                        let (oh, ow) = (h / 2, w / 2);
                        let mut dx = vec![0.0; b * c * d * h * w];
                        for img in 0..b * c * d {
                            let src = &g[img * oh * ow..(img + 1) * oh * ow];
                            let dst = &mut dx[img * h * w..(img + 1) * h * w];
                            for row in 0..oh {
                                for col in 0..ow {
                                    let gv = 0.25 * src[row * ow + col];
                                    dst[2 * row * w + 2 * col] += gv;
                                    dst[2 * row * w + 2 * col + 1] += gv;
                                    dst[(2 * row + 1) * w + 2 * col] += gv;
                                    dst[(2 * row + 1) * w + 2 * col + 1] += gv;
                                }
                            }
                        }
                        self.accumulate(x, &dx);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }
}
