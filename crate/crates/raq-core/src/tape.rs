//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Tape`] records eagerly-evaluated operations as nodes in execution
//! order; [`Tape::backward`] sweeps the recorded graph in reverse and
//! accumulates adjoints. Parameter leaves link back to [`SharedTensor`]s,
//! so their gradients survive the tape.
//!
//! Conventions:
//! - values are `f32`, reductions (matmul, conv, sums, softmax) accumulate
//!   in `f64`;
//! - convolutions are cross-correlations, `H' = (H + 2*pad - k)/stride + 1`;
//! - shape errors are programming errors and panic;
//! - `backward` may be called repeatedly on one tape; parameter gradients
//!   accumulate until `zero_grad`.

use std::collections::HashMap;

use crate::tensor::{SharedTensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf {
        param: Option<SharedTensor>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Matmul(Var, Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    GatherRows {
        src: Var,
        indices: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    NarrowCols {
        src: Var,
        start: usize,
        len: usize,
    },
    NchwToRows {
        src: Var,
    },
    RowsToNchw {
        src: Var,
    },
    StraightThrough {
        encoder: Var,
    },
    PairwiseSqDist {
        points: Var,
        centers: Var,
    },
    SoftmaxRows(Var),
    SoftCentroids {
        attn: Var,
        points: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    // High-precision mirror for scalar reductions, so losses read in f64.
    scalar_f64: Option<f64>,
    adjoint: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<usize, Var>,
}

// When a soft-centroid denominator underflows to ~0 the cluster is dead for
// this iteration: it keeps its fallback row and passes no gradient.
const DEAD_CLUSTER_EPS: f64 = 1e-30;

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            scalar_f64: None,
            adjoint: None,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.id].value
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.id].value.len()
    }

    /// Scalar value of a 1-element node, in f64 precision when the node was
    /// produced by a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.id];
        assert_eq!(node.value.len(), 1, "scalar() on non-scalar node");
        node.scalar_f64.unwrap_or(node.value[0] as f64)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.id];
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    /// Gradient of the most recent backward sweep with respect to `v`.
    pub fn adjoint(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.id].adjoint.as_deref()
    }

    // ---- leaves ----

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
        )
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Var {
        self.push(shape.into(), data, Op::Leaf { param: None })
    }

    pub fn zeros(&mut self, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let n = shape.iter().product();
        self.constant_from(shape, vec![0.0; n])
    }

    /// Registers a parameter leaf. Repeat registrations of the same tensor
    /// on this tape return the same node.
    pub fn param(&mut self, p: &SharedTensor) -> Var {
        let key = std::rc::Rc::as_ptr(p) as usize;
        if let Some(&v) = self.param_cache.get(&key) {
            return v;
        }
        let t = p.borrow();
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                param: Some(p.clone()),
            },
        );
        drop(t);
        self.param_cache.insert(key, v);
        v
    }

    // ---- elementwise ----

    fn binary_shapes(&self, a: Var, b: Var, what: &str) -> Vec<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let na: usize = sa.iter().product();
        let nb: usize = sb.iter().product();
        if sa == sb {
            sa.to_vec()
        } else if nb == 1 {
            sa.to_vec()
        } else if na == 1 {
            sb.to_vec()
        } else {
            panic!("{what}: incompatible shapes {sa:?} vs {sb:?} (same-shape or scalar only)");
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shapes(a, b, "add");
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let out = broadcast_zip(va, vb, |x, y| x + y);
        let f64_pair = (self.nodes[a.id].scalar_f64, self.nodes[b.id].scalar_f64);
        let v = self.push(shape, out, Op::Add(a, b));
        if let (Some(x), Some(y)) = f64_pair {
            self.nodes[v.id].scalar_f64 = Some(x + y);
        }
        v
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shapes(a, b, "sub");
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let out = broadcast_zip(va, vb, |x, y| x - y);
        let f64_pair = (self.nodes[a.id].scalar_f64, self.nodes[b.id].scalar_f64);
        let v = self.push(shape, out, Op::Sub(a, b));
        if let (Some(x), Some(y)) = f64_pair {
            self.nodes[v.id].scalar_f64 = Some(x - y);
        }
        v
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let shape = self.binary_shapes(a, b, "mul");
        let (va, vb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        let out = broadcast_zip(va, vb, |x, y| x * y);
        self.push(shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.nodes[a.id].value.iter().map(|x| x * c).collect();
        let f = self.nodes[a.id].scalar_f64;
        let v = self.push(self.nodes[a.id].shape.clone(), out, Op::Scale(a, c));
        if let Some(x) = f {
            self.nodes[v.id].scalar_f64 = Some(x * c as f64);
        }
        v
    }

    pub fn add_const(&mut self, a: Var, c: f32) -> Var {
        let out = self.nodes[a.id].value.iter().map(|x| x + c).collect();
        let f = self.nodes[a.id].scalar_f64;
        let v = self.push(self.nodes[a.id].shape.clone(), out, Op::AddConst(a));
        if let Some(x) = f {
            self.nodes[v.id].scalar_f64 = Some(x + c as f64);
        }
        v
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| (1.0 / (1.0 + (-x as f64).exp())) as f32)
            .collect();
        self.push(self.nodes[a.id].shape.clone(), out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| (x as f64).tanh() as f32)
            .collect();
        self.push(self.nodes[a.id].shape.clone(), out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        self.push(self.nodes[a.id].shape.clone(), out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.id]
            .value
            .iter()
            .map(|&x| (x as f64).exp() as f32)
            .collect();
        self.push(self.nodes[a.id].shape.clone(), out, Op::Exp(a))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul: incompatible shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = &self.nodes[a.id].value;
        let vb = &self.nodes[b.id].value;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for t in 0..k {
                    acc += va[i * k + t] as f64 * vb[t * n + j] as f64;
                }
                out[i * n + j] = acc as f32;
            }
        }
        self.push(vec![m, n], out, Op::Matmul(a, b))
    }

    /// Full reduction to a single element.
    pub fn sum(&mut self, a: Var) -> Var {
        let acc: f64 = self.nodes[a.id].value.iter().map(|&x| x as f64).sum();
        let v = self.push(vec![1], vec![acc as f32], Op::Sum(a));
        self.nodes[v.id].scalar_f64 = Some(acc);
        v
    }

    // ---- convolutions ----

    fn conv_spec(&self, input: Var, kernel: Var, stride: usize, pad: usize) -> ConvSpec {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        assert!(si.len() == 4, "conv2d: input must be [B,C,H,W], got {si:?}");
        assert!(
            sk.len() == 4 && sk[2] == sk[3],
            "conv2d: kernel must be [F,C,k,k], got {sk:?}"
        );
        assert!(stride >= 1, "conv2d: stride must be >= 1");
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let k = sk[2];
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "conv2d: kernel {k} larger than padded input {h}x{w} (pad {pad})"
        );
        assert!(
            (h + 2 * pad - k) % stride == 0 && (w + 2 * pad - k) % stride == 0,
            "conv2d: non-integral output size for input {h}x{w}, kernel {k}, stride {stride}, pad {pad}"
        );
        ConvSpec {
            batch: b,
            in_channels: c,
            out_channels: sk[0],
            in_h: h,
            in_w: w,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
            kernel: k,
            stride,
            pad,
        }
    }

    /// 2-D cross-correlation. `input` is `[B,C,H,W]`, `kernel` `[F,C,k,k]`,
    /// `bias` (optional) `[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let spec = self.conv_spec(input, kernel, stride, pad);
        assert_eq!(
            self.shape(kernel)[1],
            spec.in_channels,
            "conv2d: kernel channel mismatch"
        );
        if let Some(bv) = bias {
            assert_eq!(
                self.numel(bv),
                spec.out_channels,
                "conv2d: bias length must equal output channels"
            );
        }
        let x = &self.nodes[input.id].value;
        let w = &self.nodes[kernel.id].value;
        let bvals = bias.map(|bv| self.nodes[bv.id].value.clone());
        let s = spec;
        let mut out = vec![0.0f32; s.batch * s.out_channels * s.out_h * s.out_w];
        for b in 0..s.batch {
            for f in 0..s.out_channels {
                let base_bias = bvals.as_ref().map_or(0.0f64, |bv| bv[f] as f64);
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        let mut acc = base_bias;
                        for c in 0..s.in_channels {
                            for ky in 0..s.kernel {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                if iy < 0 || iy >= s.in_h as isize {
                                    continue;
                                }
                                for kx in 0..s.kernel {
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if ix < 0 || ix >= s.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((b * s.in_channels + c) * s.in_h + iy as usize)
                                        * s.in_w
                                        + ix as usize;
                                    let wi = ((f * s.in_channels + c) * s.kernel + ky) * s.kernel
                                        + kx;
                                    acc += x[xi] as f64 * w[wi] as f64;
                                }
                            }
                        }
                        out[((b * s.out_channels + f) * s.out_h + oy) * s.out_w + ox] = acc as f32;
                    }
                }
            }
        }
        self.push(
            vec![s.batch, s.out_channels, s.out_h, s.out_w],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec: s,
            },
        )
    }

    /// Transposed 2-D convolution (the adjoint of [`Tape::conv2d`] as a map).
    /// `input` is `[B,C,H,W]`, `kernel` `[C,F,k,k]`, output
    /// `[B,F,(H-1)*stride - 2*pad + k, ...]`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        assert!(
            si.len() == 4,
            "conv_transpose2d: input must be [B,C,H,W], got {si:?}"
        );
        assert!(
            sk.len() == 4 && sk[2] == sk[3],
            "conv_transpose2d: kernel must be [C,F,k,k], got {sk:?}"
        );
        assert_eq!(sk[0], si[1], "conv_transpose2d: kernel channel mismatch");
        assert!(stride >= 1, "conv_transpose2d: stride must be >= 1");
        let k = sk[2];
        let out_h = (si[2] - 1) * stride + k;
        let out_w = (si[3] - 1) * stride + k;
        assert!(
            out_h > 2 * pad && out_w > 2 * pad,
            "conv_transpose2d: output size would be non-positive"
        );
        let spec = ConvSpec {
            batch: si[0],
            in_channels: si[1],
            out_channels: sk[1],
            in_h: si[2],
            in_w: si[3],
            out_h: out_h - 2 * pad,
            out_w: out_w - 2 * pad,
            kernel: k,
            stride,
            pad,
        };
        if let Some(bv) = bias {
            assert_eq!(
                self.numel(bv),
                spec.out_channels,
                "conv_transpose2d: bias length must equal output channels"
            );
        }
        let x = &self.nodes[input.id].value;
        let w = &self.nodes[kernel.id].value;
        let bvals = bias.map(|bv| self.nodes[bv.id].value.clone());
        let s = spec;
        let mut out = vec![0.0f32; s.batch * s.out_channels * s.out_h * s.out_w];
        for b in 0..s.batch {
            for f in 0..s.out_channels {
                let base_bias = bvals.as_ref().map_or(0.0f64, |bv| bv[f] as f64);
                for oy in 0..s.out_h {
                    for ox in 0..s.out_w {
                        let mut acc = base_bias;
                        for ky in 0..s.kernel {
                            let ty = oy as isize + s.pad as isize - ky as isize;
                            if ty < 0 || ty % s.stride as isize != 0 {
                                continue;
                            }
                            let iy = (ty / s.stride as isize) as usize;
                            if iy >= s.in_h {
                                continue;
                            }
                            for kx in 0..s.kernel {
                                let tx = ox as isize + s.pad as isize - kx as isize;
                                if tx < 0 || tx % s.stride as isize != 0 {
                                    continue;
                                }
                                let ix = (tx / s.stride as isize) as usize;
                                if ix >= s.in_w {
                                    continue;
                                }
                                for c in 0..s.in_channels {
                                    let xi = ((b * s.in_channels + c) * s.in_h + iy) * s.in_w + ix;
                                    let wi = ((c * s.out_channels + f) * s.kernel + ky) * s.kernel
                                        + kx;
                                    acc += x[xi] as f64 * w[wi] as f64;
                                }
                            }
                        }
                        out[((b * s.out_channels + f) * s.out_h + oy) * s.out_w + ox] = acc as f32;
                    }
                }
            }
        }
        self.push(
            vec![s.batch, s.out_channels, s.out_h, s.out_w],
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                spec: s,
            },
        )
    }

    // ---- structural ops ----

    /// Selects rows of a `[K,d]` matrix; backward scatter-adds into the rows.
    pub fn gather_rows(&mut self, src: Var, indices: &[u32]) -> Var {
        let ss = self.shape(src).to_vec();
        assert!(ss.len() == 2, "gather_rows: source must be [K,d]");
        let (k, d) = (ss[0], ss[1]);
        let sv = &self.nodes[src.id].value;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            let i = i as usize;
            assert!(i < k, "gather_rows: index {i} out of range for {k} rows");
            out.extend_from_slice(&sv[i * d..(i + 1) * d]);
        }
        self.push(
            vec![indices.len(), d],
            out,
            Op::GatherRows {
                src,
                indices: indices.to_vec(),
            },
        )
    }

    /// Stacks row matrices vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            assert!(
                sp.len() == 2 && sp[1] == d,
                "concat_rows: part shape {sp:?} incompatible with {d} columns"
            );
            rows += sp[0];
            out.extend_from_slice(&self.nodes[p.id].value);
        }
        self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Column slice `[start, start+len)` of a `[r,c]` matrix.
    pub fn narrow_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let ss = self.shape(src).to_vec();
        assert!(ss.len() == 2, "narrow_cols: source must be 2-D");
        let (r, c) = (ss[0], ss[1]);
        assert!(start + len <= c, "narrow_cols: slice out of range");
        let sv = &self.nodes[src.id].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&sv[i * c + start..i * c + start + len]);
        }
        self.push(vec![r, len], out, Op::NarrowCols { src, start, len })
    }

    /// `[B,C,H,W]` to `[B*H*W, C]` rows, one latent vector per spatial site.
    pub fn nchw_to_rows(&mut self, src: Var) -> Var {
        let ss = self.shape(src).to_vec();
        assert!(ss.len() == 4, "nchw_to_rows: source must be [B,C,H,W]");
        let (b, c, h, w) = (ss[0], ss[1], ss[2], ss[3]);
        let sv = &self.nodes[src.id].value;
        let mut out = vec![0.0f32; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let row = (bi * h + y) * w + x;
                        out[row * c + ci] = sv[((bi * c + ci) * h + y) * w + x];
                    }
                }
            }
        }
        self.push(vec![b * h * w, c], out, Op::NchwToRows { src })
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, src: Var, b: usize, c: usize, h: usize, w: usize) -> Var {
        let ss = self.shape(src).to_vec();
        assert!(
            ss.len() == 2 && ss[0] == b * h * w && ss[1] == c,
            "rows_to_nchw: source {ss:?} does not match [{b},{c},{h},{w}]"
        );
        let sv = &self.nodes[src.id].value;
        let mut out = vec![0.0f32; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let row = (bi * h + y) * w + x;
                        out[((bi * c + ci) * h + y) * w + x] = sv[row * c + ci];
                    }
                }
            }
        }
        self.push(vec![b, c, h, w], out, Op::RowsToNchw { src })
    }

    /// Straight-through estimator: forward takes the quantized values,
    /// backward passes the gradient to the encoder output unchanged.
    pub fn straight_through(&mut self, encoder: Var, quantized: &[f32]) -> Var {
        assert_eq!(
            self.numel(encoder),
            quantized.len(),
            "straight_through: value length mismatch"
        );
        self.push(
            self.shape(encoder).to_vec(),
            quantized.to_vec(),
            Op::StraightThrough { encoder },
        )
    }

    // ---- clustering ops ----

    /// `D[i][j] = ||points_i - centers_j||^2` for `[n,d]` x `[k,d]`.
    pub fn pairwise_sqdist(&mut self, points: Var, centers: Var) -> Var {
        let sp = self.shape(points).to_vec();
        let sc = self.shape(centers).to_vec();
        assert!(
            sp.len() == 2 && sc.len() == 2 && sp[1] == sc[1],
            "pairwise_sqdist: shapes {sp:?} vs {sc:?}"
        );
        let (n, d, k) = (sp[0], sp[1], sc[0]);
        let pv = &self.nodes[points.id].value;
        let cv = &self.nodes[centers.id].value;
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            for j in 0..k {
                let mut acc = 0.0f64;
                for t in 0..d {
                    let diff = pv[i * d + t] as f64 - cv[j * d + t] as f64;
                    acc += diff * diff;
                }
                out[i * k + j] = acc as f32;
            }
        }
        self.push(vec![n, k], out, Op::PairwiseSqDist { points, centers })
    }

    /// Row-wise softmax with max-subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, src: Var) -> Var {
        let ss = self.shape(src).to_vec();
        assert!(ss.len() == 2, "softmax_rows: source must be 2-D");
        let (n, k) = (ss[0], ss[1]);
        let sv = &self.nodes[src.id].value;
        let mut out = vec![0.0f32; n * k];
        for i in 0..n {
            let row = &sv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut denom = 0.0f64;
            let mut exps = vec![0.0f64; k];
            for j in 0..k {
                let e = (row[j] as f64 - max).exp();
                exps[j] = e;
                denom += e;
            }
            for j in 0..k {
                out[i * k + j] = (exps[j] / denom) as f32;
            }
        }
        self.push(vec![n, k], out, Op::SoftmaxRows(src))
    }

    /// Attention-weighted centroids: `out_j = sum_i A_ij x_i / sum_i A_ij`.
    /// A column whose attention mass underflows keeps `fallback`'s row and
    /// contributes no gradient.
    pub fn soft_centroids(&mut self, attn: Var, points: Var, fallback: &[f32]) -> Var {
        let sa = self.shape(attn).to_vec();
        let sp = self.shape(points).to_vec();
        assert!(
            sa.len() == 2 && sp.len() == 2 && sa[0] == sp[0],
            "soft_centroids: shapes {sa:?} vs {sp:?}"
        );
        let (n, k, d) = (sa[0], sa[1], sp[1]);
        assert_eq!(
            fallback.len(),
            k * d,
            "soft_centroids: fallback must be [k,d]"
        );
        let av = &self.nodes[attn.id].value;
        let pv = &self.nodes[points.id].value;
        let mut out = vec![0.0f32; k * d];
        for j in 0..k {
            let mut mass = 0.0f64;
            for i in 0..n {
                mass += av[i * k + j] as f64;
            }
            if mass <= DEAD_CLUSTER_EPS {
                out[j * d..(j + 1) * d].copy_from_slice(&fallback[j * d..(j + 1) * d]);
                continue;
            }
            for t in 0..d {
                let mut acc = 0.0f64;
                for i in 0..n {
                    acc += av[i * k + j] as f64 * pv[i * d + t] as f64;
                }
                out[j * d + t] = (acc / mass) as f32;
            }
        }
        self.push(vec![k, d], out, Op::SoftCentroids { attn, points })
    }

    // ---- composite helpers ----

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let n = self.numel(a);
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum(sq);
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean over rows of the squared row distance: `sum((a-b)^2) / rows`.
    pub fn mean_row_sqdist(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a);
        assert!(sa.len() == 2, "mean_row_sqdist: inputs must be 2-D");
        let rows = sa[0];
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        let s = self.sum(sq);
        self.scale(s, 1.0 / rows as f32)
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `root`. Node adjoints are cleared first;
    /// parameter gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.id].value.len(),
            1,
            "backward: root must be scalar"
        );
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[root.id].adjoint = Some(vec![1.0]);
        for id in (0..=root.id).rev() {
            if self.nodes[id].adjoint.is_none() {
                continue;
            }
            self.propagate(id);
        }
    }

    fn add_adjoint(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.id];
        let adj = node
            .adjoint
            .get_or_insert_with(|| vec![0.0; node.value.len()]);
        debug_assert_eq!(adj.len(), g.len());
        for (a, b) in adj.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn propagate(&mut self, id: usize) {
        let g = self.nodes[id].adjoint.clone().unwrap();
        // Ops read sibling node values; the clone above keeps borrows simple.
        match &self.nodes[id].op {
            Op::Leaf { param } => {
                if let Some(p) = param {
                    let p = p.clone();
                    let mut t = p.borrow_mut();
                    if t.is_param() {
                        t.accumulate_grad(&g);
                    }
                }
            }
            &Op::Add(a, b) => {
                self.backprop_binary(a, b, &g, |ga, gi| ga[gi], |gb, gi| gb[gi]);
            }
            &Op::Sub(a, b) => {
                self.backprop_binary(a, b, &g, |ga, gi| ga[gi], |gb, gi| -gb[gi]);
            }
            &Op::Mul(a, b) => {
                let va = self.nodes[a.id].value.clone();
                let vb = self.nodes[b.id].value.clone();
                let na = va.len();
                let nb = vb.len();
                let n = g.len();
                let mut ga = vec![0.0f32; na];
                let mut gb = vec![0.0f32; nb];
                if na == n && nb == n {
                    for i in 0..n {
                        ga[i] = g[i] * vb[i];
                        gb[i] = g[i] * va[i];
                    }
                } else if nb == 1 {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        ga[i] = g[i] * vb[0];
                        acc += g[i] as f64 * va[i] as f64;
                    }
                    gb[0] = acc as f32;
                } else {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        gb[i] = g[i] * va[0];
                        acc += g[i] as f64 * vb[i] as f64;
                    }
                    ga[0] = acc as f32;
                }
                self.add_adjoint(a, &ga);
                self.add_adjoint(b, &gb);
            }
            &Op::Scale(a, c) => {
                let ga: Vec<f32> = g.iter().map(|x| x * c).collect();
                self.add_adjoint(a, &ga);
            }
            &Op::AddConst(a) => {
                self.add_adjoint(a, &g);
            }
            &Op::Sigmoid(a) => {
                let out = self.nodes[id].value.clone();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&out)
                    .map(|(&gi, &s)| gi * s * (1.0 - s))
                    .collect();
                self.add_adjoint(a, &ga);
            }
            &Op::Tanh(a) => {
                let out = self.nodes[id].value.clone();
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&out)
                    .map(|(&gi, &t)| gi * (1.0 - t * t))
                    .collect();
                self.add_adjoint(a, &ga);
            }
            &Op::Relu(a) => {
                let inp = self.nodes[a.id].value.clone();
                // relu'(0) := 0
                let ga: Vec<f32> = g
                    .iter()
                    .zip(&inp)
                    .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                self.add_adjoint(a, &ga);
            }
            &Op::Exp(a) => {
                let out = self.nodes[id].value.clone();
                let ga: Vec<f32> = g.iter().zip(&out).map(|(&gi, &e)| gi * e).collect();
                self.add_adjoint(a, &ga);
            }
            &Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.shape(a);
                    (s[0], s[1])
                };
                let n = self.shape(b)[1];
                let va = self.nodes[a.id].value.clone();
                let vb = self.nodes[b.id].value.clone();
                let mut ga = vec![0.0f32; m * k];
                let mut gb = vec![0.0f32; k * n];
                for i in 0..m {
                    for t in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += g[i * n + j] as f64 * vb[t * n + j] as f64;
                        }
                        ga[i * k + t] = acc as f32;
                    }
                }
                for t in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for i in 0..m {
                            acc += va[i * k + t] as f64 * g[i * n + j] as f64;
                        }
                        gb[t * n + j] = acc as f32;
                    }
                }
                self.add_adjoint(a, &ga);
                self.add_adjoint(b, &gb);
            }
            &Op::Sum(a) => {
                let ga = vec![g[0]; self.nodes[a.id].value.len()];
                self.add_adjoint(a, &ga);
            }
            &Op::Conv2d {
                input,
                kernel,
                bias,
                spec: s,
            } => {
                let x = self.nodes[input.id].value.clone();
                let w = self.nodes[kernel.id].value.clone();
                let mut gx = vec![0.0f64; x.len()];
                let mut gw = vec![0.0f64; w.len()];
                let mut gb = vec![0.0f64; s.out_channels];
                for b in 0..s.batch {
                    for f in 0..s.out_channels {
                        for oy in 0..s.out_h {
                            for ox in 0..s.out_w {
                                let go = g
                                    [((b * s.out_channels + f) * s.out_h + oy) * s.out_w + ox]
                                    as f64;
                                if go == 0.0 {
                                    continue;
                                }
                                gb[f] += go;
                                for c in 0..s.in_channels {
                                    for ky in 0..s.kernel {
                                        let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                        if iy < 0 || iy >= s.in_h as isize {
                                            continue;
                                        }
                                        for kx in 0..s.kernel {
                                            let ix =
                                                (ox * s.stride + kx) as isize - s.pad as isize;
                                            if ix < 0 || ix >= s.in_w as isize {
                                                continue;
                                            }
                                            let xi = ((b * s.in_channels + c) * s.in_h
                                                + iy as usize)
                                                * s.in_w
                                                + ix as usize;
                                            let wi = ((f * s.in_channels + c) * s.kernel + ky)
                                                * s.kernel
                                                + kx;
                                            gx[xi] += go * w[wi] as f64;
                                            gw[wi] += go * x[xi] as f64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let gxf: Vec<f32> = gx.iter().map(|&v| v as f32).collect();
                let gwf: Vec<f32> = gw.iter().map(|&v| v as f32).collect();
                self.add_adjoint(input, &gxf);
                self.add_adjoint(kernel, &gwf);
                if let Some(bv) = bias {
                    let gbf: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                    self.add_adjoint(bv, &gbf);
                }
            }
            &Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                spec: s,
            } => {
                let x = self.nodes[input.id].value.clone();
                let w = self.nodes[kernel.id].value.clone();
                let mut gx = vec![0.0f64; x.len()];
                let mut gw = vec![0.0f64; w.len()];
                let mut gb = vec![0.0f64; s.out_channels];
                for b in 0..s.batch {
                    for f in 0..s.out_channels {
                        for iy in 0..s.in_h {
                            for ix in 0..s.in_w {
                                for ky in 0..s.kernel {
                                    let oy = (iy * s.stride + ky) as isize - s.pad as isize;
                                    if oy < 0 || oy >= s.out_h as isize {
                                        continue;
                                    }
                                    for kx in 0..s.kernel {
                                        let ox = (ix * s.stride + kx) as isize - s.pad as isize;
                                        if ox < 0 || ox >= s.out_w as isize {
                                            continue;
                                        }
                                        let go = g[((b * s.out_channels + f) * s.out_h
                                            + oy as usize)
                                            * s.out_w
                                            + ox as usize]
                                            as f64;
                                        if go == 0.0 {
                                            continue;
                                        }
                                        for c in 0..s.in_channels {
                                            let xi = ((b * s.in_channels + c) * s.in_h + iy)
                                                * s.in_w
                                                + ix;
                                            let wi = ((c * s.out_channels + f) * s.kernel + ky)
                                                * s.kernel
                                                + kx;
                                            gx[xi] += go * w[wi] as f64;
                                            gw[wi] += go * x[xi] as f64;
                                        }
                                    }
                                }
                            }
                        }
                        if bias.is_some() {
                            for oy in 0..s.out_h {
                                for ox in 0..s.out_w {
                                    gb[f] += g[((b * s.out_channels + f) * s.out_h + oy)
                                        * s.out_w
                                        + ox] as f64;
                                }
                            }
                        }
                    }
                }
                let gxf: Vec<f32> = gx.iter().map(|&v| v as f32).collect();
                let gwf: Vec<f32> = gw.iter().map(|&v| v as f32).collect();
                self.add_adjoint(input, &gxf);
                self.add_adjoint(kernel, &gwf);
                if let Some(bv) = bias {
                    let gbf: Vec<f32> = gb.iter().map(|&v| v as f32).collect();
                    self.add_adjoint(bv, &gbf);
                }
            }
            Op::GatherRows { src, indices } => {
                let src = *src;
                let indices = indices.clone();
                let d = self.shape(src)[1];
                let mut gs = vec![0.0f32; self.nodes[src.id].value.len()];
                for (r, &i) in indices.iter().enumerate() {
                    let i = i as usize;
                    for t in 0..d {
                        gs[i * d + t] += g[r * d + t];
                    }
                }
                self.add_adjoint(src, &gs);
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.id].value.len();
                    let slice = g[offset..offset + n].to_vec();
                    self.add_adjoint(p, &slice);
                    offset += n;
                }
            }
            &Op::NarrowCols { src, start, len } => {
                let (r, c) = {
                    let s = self.shape(src);
                    (s[0], s[1])
                };
                let mut gs = vec![0.0f32; r * c];
                for i in 0..r {
                    for t in 0..len {
                        gs[i * c + start + t] = g[i * len + t];
                    }
                }
                self.add_adjoint(src, &gs);
            }
            &Op::NchwToRows { src } => {
                let (b, c, h, w) = {
                    let s = self.shape(src);
                    (s[0], s[1], s[2], s[3])
                };
                let mut gs = vec![0.0f32; b * c * h * w];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let row = (bi * h + y) * w + x;
                                gs[((bi * c + ci) * h + y) * w + x] = g[row * c + ci];
                            }
                        }
                    }
                }
                self.add_adjoint(src, &gs);
            }
            &Op::RowsToNchw { src } => {
                let (b, c, h, w) = {
                    let s = self.shape(Var { id });
                    (s[0], s[1], s[2], s[3])
                };
                let mut gs = vec![0.0f32; b * h * w * c];
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let row = (bi * h + y) * w + x;
                                gs[row * c + ci] = g[((bi * c + ci) * h + y) * w + x];
                            }
                        }
                    }
                }
                self.add_adjoint(src, &gs);
            }
            &Op::StraightThrough { encoder } => {
                self.add_adjoint(encoder, &g);
            }
            &Op::PairwiseSqDist { points, centers } => {
                let (n, d) = {
                    let s = self.shape(points);
                    (s[0], s[1])
                };
                let k = self.shape(centers)[0];
                let pv = self.nodes[points.id].value.clone();
                let cv = self.nodes[centers.id].value.clone();
                let mut gp = vec![0.0f64; n * d];
                let mut gc = vec![0.0f64; k * d];
                for i in 0..n {
                    for j in 0..k {
                        let go = g[i * k + j] as f64;
                        if go == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            let diff = pv[i * d + t] as f64 - cv[j * d + t] as f64;
                            gp[i * d + t] += go * 2.0 * diff;
                            gc[j * d + t] -= go * 2.0 * diff;
                        }
                    }
                }
                let gpf: Vec<f32> = gp.iter().map(|&v| v as f32).collect();
                let gcf: Vec<f32> = gc.iter().map(|&v| v as f32).collect();
                self.add_adjoint(points, &gpf);
                self.add_adjoint(centers, &gcf);
            }
            &Op::SoftmaxRows(src) => {
                let (n, k) = {
                    let s = self.shape(Var { id });
                    (s[0], s[1])
                };
                let out = self.nodes[id].value.clone();
                let mut gs = vec![0.0f32; n * k];
                for i in 0..n {
                    let mut dot = 0.0f64;
                    for j in 0..k {
                        dot += g[i * k + j] as f64 * out[i * k + j] as f64;
                    }
                    for j in 0..k {
                        gs[i * k + j] =
                            (out[i * k + j] as f64 * (g[i * k + j] as f64 - dot)) as f32;
                    }
                }
                self.add_adjoint(src, &gs);
            }
            Op::SoftCentroids { attn, points, .. } => {
                let (attn, points) = (*attn, *points);
                let (n, k) = {
                    let s = self.shape(attn);
                    (s[0], s[1])
                };
                let d = self.shape(points)[1];
                let av = self.nodes[attn.id].value.clone();
                let pv = self.nodes[points.id].value.clone();
                let out = self.nodes[id].value.clone();
                let mut ga = vec![0.0f64; n * k];
                let mut gp = vec![0.0f64; n * d];
                for j in 0..k {
                    let mut mass = 0.0f64;
                    for i in 0..n {
                        mass += av[i * k + j] as f64;
                    }
                    if mass <= DEAD_CLUSTER_EPS {
                        continue;
                    }
                    for t in 0..d {
                        let go = g[j * d + t] as f64;
                        if go == 0.0 {
                            continue;
                        }
                        let cjt = out[j * d + t] as f64;
                        for i in 0..n {
                            let aij = av[i * k + j] as f64;
                            gp[i * d + t] += go * aij / mass;
                            ga[i * k + j] += go * (pv[i * d + t] as f64 - cjt) / mass;
                        }
                    }
                }
                let gaf: Vec<f32> = ga.iter().map(|&v| v as f32).collect();
                let gpf: Vec<f32> = gp.iter().map(|&v| v as f32).collect();
                self.add_adjoint(attn, &gaf);
                self.add_adjoint(points, &gpf);
            }
        }
    }

    fn backprop_binary(
        &mut self,
        a: Var,
        b: Var,
        g: &[f32],
        fa: impl Fn(&[f32], usize) -> f32,
        fb: impl Fn(&[f32], usize) -> f32,
    ) {
        let na = self.nodes[a.id].value.len();
        let nb = self.nodes[b.id].value.len();
        let n = g.len();
        let mut ga = vec![0.0f32; na];
        let mut gb = vec![0.0f32; nb];
        if na == n {
            for i in 0..n {
                ga[i] = fa(g, i);
            }
        } else {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += fa(g, i) as f64;
            }
            ga[0] = acc as f32;
        }
        if nb == n {
            for i in 0..n {
                gb[i] = fb(g, i);
            }
        } else {
            let mut acc = 0.0f64;
            for i in 0..n {
                acc += fb(g, i) as f64;
            }
            gb[0] = acc as f32;
        }
        self.add_adjoint(a, &ga);
        self.add_adjoint(b, &gb);
    }
}

fn broadcast_zip(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    if a.len() == b.len() {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else if b.len() == 1 {
        a.iter().map(|&x| f(x, b[0])).collect()
    } else {
        b.iter().map(|&y| f(a[0], y)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{shared, Tensor};
    use crate::testutil::{gradcheck, GradCheckOpts};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matmul_identity_and_vector() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = tape.constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let out = tape.matmul(a, eye);
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let v = tape.constant_from(vec![1, 2], vec![1.0, 2.0]);
        let w = tape.constant_from(vec![2, 1], vec![3.0, 4.0]);
        let s = tape.matmul(v, w);
        assert_eq!(tape.value(s), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.constant_from(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant_from(vec![2, 2], vec![0.0; 4]);
        tape.matmul(a, b);
    }

    #[test]
    fn elementwise_known_values() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![3], vec![0.0, -1.0, 1.0]);
        let s = tape.sigmoid(x);
        assert!((tape.value(s)[0] - 0.5).abs() < 1e-7);
        let t = tape.tanh(x);
        assert_eq!(tape.value(t)[0], 0.0);
        let r = tape.relu(x);
        assert_eq!(tape.value(r), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let p = shared(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).requires_grad(true));
        let mut tape = Tape::new();
        let v = tape.param(&p);
        let s = tape.sum(v);
        tape.backward(s);
        assert_eq!(p.borrow().grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn param_grads_accumulate_without_zero() {
        let p = shared(Tensor::new(vec![2], vec![1.0, 2.0]).requires_grad(true));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = tape.param(&p);
            let s = tape.sum(v);
            tape.backward(s);
        }
        assert_eq!(p.borrow().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_twice_on_two_roots_matches_combined_loss() {
        // Accumulating backward(L1) + backward(L2) equals backward(L1 + L2).
        let w = shared(Tensor::new(vec![2, 2], vec![0.3, -0.7, 0.2, 0.9]).requires_grad(true));
        let build = |tape: &mut Tape, w: Var| {
            let x = tape.constant_from(vec![1, 2], vec![0.5, -1.25]);
            let h = tape.matmul(x, w);
            let t = tape.tanh(h);
            let l1 = tape.sum(t);
            let sq = tape.mul(h, h);
            let l2 = tape.sum(sq);
            (l1, l2)
        };

        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let (l1, l2) = build(&mut tape, wv);
        tape.backward(l1);
        tape.backward(l2);
        let separate = w.borrow().grad().unwrap().to_vec();
        w.borrow_mut().zero_grad();

        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let (l1, l2) = build(&mut tape, wv);
        let both = tape.add(l1, l2);
        tape.backward(both);
        let combined = w.borrow().grad().unwrap().to_vec();

        for (a, b) in separate.iter().zip(&combined) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    #[should_panic(expected = "backward: root must be scalar")]
    fn backward_non_scalar_panics() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![2], vec![1.0, 2.0]);
        tape.backward(x);
    }

    #[test]
    fn conv_all_ones_and_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, 1, 3, 3], vec![1.0; 9]);
        let w = tape.constant_from(vec![1, 1, 2, 2], vec![1.0; 4]);
        let y = tape.conv2d(x, w, None, 1, 0);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[4.0; 4]);

        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = tape.constant_from(vec![1, 1, 3, 3], data.clone());
        let idk = tape.constant_from(vec![1, 1, 1, 1], vec![1.0]);
        let y = tape.conv2d(x, idk, None, 1, 0);
        assert_eq!(tape.value(y), data.as_slice());
    }

    #[test]
    fn conv_transpose_stamps_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, 1, 1, 1], vec![3.0]);
        let w = tape.constant_from(vec![1, 1, 2, 2], vec![1.0, 2.0, -1.0, 0.5]);
        let y = tape.conv_transpose2d(x, w, None, 1, 0);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[3.0, 6.0, -3.0, 1.5]);
    }

    #[test]
    fn conv_transpose_inverts_stride_two_shape() {
        // 4x4 -> conv s2 k4 p1 -> 2x2 -> transpose s2 k4 p1 -> 4x4
        let mut rng = StdRng::seed_from_u64(9);
        let mut tape = Tape::new();
        let x = tape.constant_from(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let w = tape.constant_from(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let down = tape.conv2d(x, w, None, 2, 1);
        assert_eq!(tape.shape(down), &[1, 1, 2, 2]);
        let wt = tape.constant_from(
            vec![1, 1, 4, 4],
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let up = tape.conv_transpose2d(down, wt, None, 2, 1);
        assert_eq!(tape.shape(up), &[1, 1, 4, 4]);
    }

    #[test]
    #[should_panic(expected = "non-integral output size")]
    fn conv_non_integral_output_panics() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![1, 1, 5, 5], vec![0.0; 25]);
        let w = tape.constant_from(vec![1, 1, 2, 2], vec![0.0; 4]);
        tape.conv2d(x, w, None, 2, 0);
    }

    #[test]
    fn gather_concat_narrow_roundtrip() {
        let mut tape = Tape::new();
        let m = tape.constant_from(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = tape.gather_rows(m, &[2, 0, 2]);
        assert_eq!(tape.value(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);

        let a = tape.constant_from(vec![1, 2], vec![7.0, 8.0]);
        let c = tape.concat_rows(&[m, a]);
        assert_eq!(tape.shape(c), &[4, 2]);
        assert_eq!(tape.value(c)[6..], [7.0, 8.0]);

        let n = tape.narrow_cols(c, 1, 1);
        assert_eq!(tape.value(n), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn gather_rows_backward_scatter_adds() {
        let p = shared(Tensor::new(vec![3, 2], vec![0.0; 6]).requires_grad(true));
        let mut tape = Tape::new();
        let m = tape.param(&p);
        let g = tape.gather_rows(m, &[1, 1, 2]);
        let s = tape.sum(g);
        tape.backward(s);
        assert_eq!(p.borrow().grad().unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn nchw_rows_roundtrip() {
        let mut rng = StdRng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![2, 3, 2, 2], data.clone());
        let rows = tape.nchw_to_rows(x);
        assert_eq!(tape.shape(rows), &[8, 3]);
        let back = tape.rows_to_nchw(rows, 2, 3, 2, 2);
        assert_eq!(tape.value(back), data.as_slice());
    }

    #[test]
    fn straight_through_forward_and_backward() {
        let p = shared(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, -0.5]).requires_grad(true));
        let mut tape = Tape::new();
        let z_e = tape.param(&p);
        let quantized = [0.0f32, 0.0, 1.0, -1.0];
        let st = tape.straight_through(z_e, &quantized);
        assert_eq!(tape.value(st), &quantized);
        let s = tape.sum(st);
        tape.backward(s);
        assert_eq!(p.borrow().grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_extremes() {
        let mut tape = Tape::new();
        let x = tape.constant_from(vec![2, 3], vec![1e4, 0.0, -1e4, 5.0, 5.0, 5.0]);
        let s = tape.softmax_rows(x);
        let v = tape.value(s);
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-6);
        let r1: f32 = v[3..6].iter().sum();
        assert!((r1 - 1.0).abs() < 1e-6);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn soft_centroids_weighted_mean_and_dead_column() {
        let mut tape = Tape::new();
        let attn = tape.constant_from(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let pts = tape.constant_from(vec![2, 1], vec![2.0, 4.0]);
        let fallback = [9.0f32, 7.0];
        let c = tape.soft_centroids(attn, pts, &fallback);
        let v = tape.value(c);
        assert!((v[0] - 3.0).abs() < 1e-6); // mean of both points
        assert_eq!(v[1], 7.0); // dead column keeps fallback
    }

    // ---- finite-difference oracles ----

    #[test]
    fn fd_matmul() {
        // The summed product is linear in each coordinate, so central
        // differences carry no truncation error; a large step keeps the f32
        // rounding contribution negligible.
        let mut rng = StdRng::seed_from_u64(11);
        let a = shared(
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(0.5..1.5)).collect())
                .requires_grad(true),
        );
        let b = shared(
            Tensor::new(vec![4, 2], (0..8).map(|_| rng.gen_range(0.5..1.5)).collect())
                .requires_grad(true),
        );
        gradcheck(
            &[a.clone(), b.clone()],
            |tape| {
                let av = tape.param(&a);
                let bv = tape.param(&b);
                let m = tape.matmul(av, bv);
                tape.sum(m)
            },
            GradCheckOpts {
                h: 1e-1,
                rtol: 1e-4,
                atol: 1e-4,
            },
        );
    }

    #[test]
    fn fd_elementwise_activations() {
        let mut rng = StdRng::seed_from_u64(5);
        for case in 0..25 {
            let vals: Vec<f32> = (0..4)
                .map(|_| {
                    // keep relu inputs away from the kink
                    let v: f32 = rng.gen_range(-2.0..2.0);
                    if v.abs() < 0.05 {
                        v + 0.1
                    } else {
                        v
                    }
                })
                .collect();
            let p = shared(Tensor::new(vec![4], vals).requires_grad(true));
            gradcheck(
                &[p.clone()],
                |tape| {
                    let x = tape.param(&p);
                    let y = match case % 4 {
                        0 => tape.sigmoid(x),
                        1 => tape.tanh(x),
                        2 => tape.relu(x),
                        _ => tape.exp(x),
                    };
                    let sq = tape.mul(y, y);
                    tape.sum(sq)
                },
                GradCheckOpts {
                    h: 1e-2,
                    rtol: 1e-4,
                    atol: 1e-4,
                },
            );
        }
    }

    #[test]
    fn fd_binary_ops_with_scalar_broadcast() {
        let mut rng = StdRng::seed_from_u64(17);
        let a = shared(
            Tensor::new(vec![2, 3], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        let s = shared(Tensor::new(vec![1], vec![rng.gen_range(0.5..1.5)]).requires_grad(true));
        gradcheck(
            &[a.clone(), s.clone()],
            |tape| {
                let av = tape.param(&a);
                let sv = tape.param(&s);
                let m = tape.mul(av, sv);
                let t = tape.add(m, sv);
                let u = tape.sub(t, av);
                let sq = tape.mul(u, u);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-2,
                rtol: 1e-3,
                atol: 1e-4,
            },
        );
    }

    #[test]
    fn fd_conv2d() {
        let mut rng = StdRng::seed_from_u64(23);
        let x = shared(
            Tensor::new(
                vec![1, 2, 5, 5],
                (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .requires_grad(true),
        );
        let w = shared(
            Tensor::new(
                vec![3, 2, 3, 3],
                (0..54).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .requires_grad(true),
        );
        let b = shared(
            Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        gradcheck(
            &[x.clone(), w.clone(), b.clone()],
            |tape| {
                let xv = tape.param(&x);
                let wv = tape.param(&w);
                let bv = tape.param(&b);
                let y = tape.conv2d(xv, wv, Some(bv), 2, 1);
                let sq = tape.mul(y, y);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-2,
                rtol: 1e-3,
                atol: 1e-3,
            },
        );
    }

    #[test]
    fn fd_conv_transpose2d() {
        let mut rng = StdRng::seed_from_u64(29);
        let x = shared(
            Tensor::new(
                vec![1, 2, 3, 3],
                (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .requires_grad(true),
        );
        let w = shared(
            Tensor::new(
                vec![2, 3, 4, 4],
                (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .requires_grad(true),
        );
        let b = shared(
            Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        gradcheck(
            &[x.clone(), w.clone(), b.clone()],
            |tape| {
                let xv = tape.param(&x);
                let wv = tape.param(&w);
                let bv = tape.param(&b);
                let y = tape.conv_transpose2d(xv, wv, Some(bv), 2, 1);
                let sq = tape.mul(y, y);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-2,
                rtol: 1e-3,
                atol: 1e-3,
            },
        );
    }

    #[test]
    fn fd_two_layer_mlp() {
        let mut rng = StdRng::seed_from_u64(31);
        let w1 = shared(
            Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(-0.8..0.8)).collect())
                .requires_grad(true),
        );
        let w2 = shared(
            Tensor::new(vec![4, 1], (0..4).map(|_| rng.gen_range(-0.8..0.8)).collect())
                .requires_grad(true),
        );
        let x: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        gradcheck(
            &[w1.clone(), w2.clone()],
            |tape| {
                let xv = tape.constant_from(vec![2, 3], x.clone());
                let w1v = tape.param(&w1);
                let w2v = tape.param(&w2);
                let h = tape.matmul(xv, w1v);
                let a = tape.tanh(h);
                let o = tape.matmul(a, w2v);
                let sq = tape.mul(o, o);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-2,
                rtol: 1e-4,
                atol: 1e-4,
            },
        );
    }

    #[test]
    fn fd_structural_ops() {
        let mut rng = StdRng::seed_from_u64(37);
        let m = shared(
            Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        gradcheck(
            &[m.clone()],
            |tape| {
                let mv = tape.param(&m);
                let g = tape.gather_rows(mv, &[3, 1, 1, 0]);
                let n = tape.narrow_cols(g, 1, 2);
                let c = tape.concat_rows(&[n, n]);
                let sq = tape.mul(c, c);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-2,
                rtol: 1e-3,
                atol: 1e-4,
            },
        );
    }

    #[test]
    fn fd_clustering_ops() {
        let mut rng = StdRng::seed_from_u64(41);
        let pts = shared(
            Tensor::new(vec![5, 2], (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        let ctr = shared(
            Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .requires_grad(true),
        );
        let fallback = vec![0.0f32; 6];
        gradcheck(
            &[pts.clone(), ctr.clone()],
            |tape| {
                let p = tape.param(&pts);
                let c = tape.param(&ctr);
                let d = tape.pairwise_sqdist(p, c);
                let neg = tape.scale(d, -1.0 / 0.5);
                let a = tape.softmax_rows(neg);
                let cent = tape.soft_centroids(a, p, &fallback);
                let sq = tape.mul(cent, cent);
                tape.sum(sq)
            },
            GradCheckOpts {
                h: 1e-3,
                rtol: 1e-2,
                atol: 1e-3,
            },
        );
    }

    #[test]
    fn forward_values_stay_finite_in_range() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let x = tape.constant_from(
                vec![2, 4],
                (0..8).map(|_| rng.gen_range(-10.0..10.0)).collect(),
            );
            let w = tape.constant_from(
                vec![4, 4],
                (0..16).map(|_| rng.gen_range(-10.0..10.0)).collect(),
            );
            let h = tape.matmul(x, w);
            let s = tape.sigmoid(h);
            let t = tape.tanh(h);
            let r = tape.relu(h);
            let sum = tape.concat_rows(&[s, t, r]);
            assert!(tape.value(sum).iter().all(|v| v.is_finite()));
        }
    }
}
