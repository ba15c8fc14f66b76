//! A small reverse-mode tape over `ndarray` arrays, f64 end to end.
//!
//! Covers exactly the ops the generator, the critics, and the composite
//! loss need: 2-D convolution (im2col + matmul), leaky ReLU / ReLU,
//! 2x2 max-pool, nearest-neighbor 2x upsampling, channel concatenation,
//! sigmoid/tanh, channel gating, global average pooling, a dense layer,
//! elementwise arithmetic, mean/abs/scale reductions, and a clamped
//! binary-cross-entropy mean. All computation is deterministic: matmuls
//! go through `matrixmultiply` (single-threaded) and every reduction has
//! a fixed order.

use ndarray::{Array2, Array4, ArrayD, Ix1, Ix2, Ix4};

pub type NodeId = usize;

/// Clamp bound used by [`Tape::bce_mean`].
pub const BCE_EPS: f64 = 1e-7;

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    LeakyRelu { input: NodeId, slope: f64 },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Tanh { input: NodeId },
    MaxPool2 { input: NodeId, winners: Vec<u8> },
    Upsample2 { input: NodeId },
    ConcatC { a: NodeId, b: NodeId, a_ch: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MulChannel { features: NodeId, gates: NodeId },
    GlobalAvgPool { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    MeanAll { input: NodeId },
    Abs { input: NodeId },
    Scale { input: NodeId, k: f64 },
    BceMean { prob: NodeId, target: ArrayD<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Grads {
    table: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.table.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        *self.nodes[id].value.first().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf4(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value.into_dyn(), Op::Leaf)
    }

    // -- elementwise -------------------------------------------------------

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[input]
            .value
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input].value.mapv(sigmoid);
        self.push(v, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input].value.mapv(f64::tanh);
        self.push(v, Op::Tanh { input })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: NodeId, k: f64) -> NodeId {
        let v = self.nodes[input].value.mapv(|x| x * k);
        self.push(v, Op::Scale { input, k })
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input].value.mapv(f64::abs);
        self.push(v, Op::Abs { input })
    }

    pub fn mean_all(&mut self, input: NodeId) -> NodeId {
        let x = &self.nodes[input].value;
        let m = x.iter().sum::<f64>() / x.len() as f64;
        self.push(ndarray::arr0(m).into_dyn(), Op::MeanAll { input })
    }

    /// Mean binary cross entropy of probabilities against a constant
    /// target, with probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_mean(&mut self, prob: NodeId, target: ArrayD<f64>) -> NodeId {
        let p = &self.nodes[prob].value;
        assert_eq!(p.shape(), target.shape(), "bce_mean shape mismatch");
        let mut sum = 0.0;
        for (&pi, &yi) in p.iter().zip(target.iter()) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            sum -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        let v = sum / p.len() as f64;
        self.push(ndarray::arr0(v).into_dyn(), Op::BceMean { prob, target })
    }

    // -- structured ops ----------------------------------------------------

    /// 2-D convolution over NCHW input with an OIHW weight and a per-output
    /// channel bias.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d input must be NCHW");
        let w = self.nodes[weight]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d weight must be OIHW");
        let b = self.nodes[bias]
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv2d bias must be 1-D");
        let (n, c, h, wdt) = x.dim();
        let (co, ci, kh, kw) = w.dim();
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(b.len(), co, "bias length mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x.to_owned(), kh, stride, pad, ho, wo);
        let w2 = w.to_shape((co, ci * kh * kw)).expect("weight reshape").to_owned();
        let out2 = w2.dot(&cols); // (co, n*ho*wo)

        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        {
            let out_slice = out.as_slice_mut().expect("contiguous");
            let o2 = out2.as_slice().expect("contiguous");
            let plane = ho * wo;
            for ni in 0..n {
                for ci_ in 0..co {
                    let dst = &mut out_slice[(ni * co + ci_) * plane..(ni * co + ci_ + 1) * plane];
                    let src = &o2[ci_ * (n * plane) + ni * plane..ci_ * (n * plane) + (ni + 1) * plane];
                    let bias_v = b[ci_];
                    for (d, s) in dst.iter_mut().zip(src.iter()) {
                        *d = s + bias_v;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Op::Conv2d { input, weight, bias, stride, pad, cols },
        )
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("max_pool2 input must be NCHW");
        let (n, c, h, w) = x.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut winners = vec![0u8; n * c * ho * wo];
        let mut idx = 0usize;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut which = 0u8;
                        for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                            let v = x[[ni, ci, 2 * oy + dy, 2 * ox + dx]];
                            if v > best {
                                best = v;
                                which = k as u8;
                            }
                        }
                        out[[ni, ci, oy, ox]] = best;
                        winners[idx] = which;
                        idx += 1;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MaxPool2 { input, winners })
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input]
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample2 input must be NCHW");
        let (n, c, h, w) = x.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[ni, ci, y, xx]] = x[[ni, ci, y / 2, xx / 2]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Upsample2 { input })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix4>().expect("NCHW");
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix4>().expect("NCHW");
        let (n, ca, h, w) = av.dim();
        let (nb, cb, hb, wb) = bv.dim();
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial mismatch");
        let mut out = Array4::<f64>::zeros((n, ca + cb, h, w));
        out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(&av);
        out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(&bv);
        self.push(out.into_dyn(), Op::ConcatC { a, b, a_ch: ca })
    }

    /// Scales each (N, C) feature plane of `features` by `gates[[n, c]]`.
    pub fn mul_channel(&mut self, features: NodeId, gates: NodeId) -> NodeId {
        let f = self.nodes[features].value.view().into_dimensionality::<Ix4>().expect("NCHW");
        let g = self.nodes[gates].value.view().into_dimensionality::<Ix2>().expect("NC");
        let (n, c, h, w) = f.dim();
        assert_eq!(g.dim(), (n, c), "gate shape mismatch");
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let gv = g[[ni, ci]];
                for y in 0..h {
                    for x in 0..w {
                        out[[ni, ci, y, x]] = f[[ni, ci, y, x]] * gv;
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::MulChannel { features, gates })
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let x = self.nodes[input].value.view().into_dimensionality::<Ix4>().expect("NCHW");
        let (n, c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for ni in 0..n {
            for ci in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        s += x[[ni, ci, y, xx]];
                    }
                }
                out[[ni, ci]] = s / (h * w) as f64;
            }
        }
        self.push(out.into_dyn(), Op::GlobalAvgPool { input })
    }

    /// Dense layer: (N, F) x (O, F)^T + bias -> (N, O).
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let x = self.nodes[input].value.view().into_dimensionality::<Ix2>().expect("NF input");
        let w = self.nodes[weight].value.view().into_dimensionality::<Ix2>().expect("OF weight");
        let b = self.nodes[bias].value.view().into_dimensionality::<Ix1>().expect("bias");
        let (n, f) = x.dim();
        let (o, f2) = w.dim();
        assert_eq!(f, f2, "linear feature mismatch");
        assert_eq!(b.len(), o, "linear bias mismatch");
        let mut out = x.dot(&w.t());
        for ni in 0..n {
            for oi in 0..o {
                out[[ni, oi]] += b[oi];
            }
        }
        self.push(out.into_dyn(), Op::Linear { input, weight, bias })
    }

    // -- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        let mut table: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        table[loss] = Some(ArrayD::ones(self.nodes[loss].value.raw_dim()));

        for id in (0..=loss).rev() {
            let Some(grad) = table[id].take() else { continue };
            self.accumulate_parents(id, &grad, &mut table);
            table[id] = Some(grad);
        }
        Grads { table }
    }

    fn accumulate_parents(&self, id: NodeId, grad: &ArrayD<f64>, table: &mut [Option<ArrayD<f64>>]) {
        let add_to = |table: &mut [Option<ArrayD<f64>>], target: NodeId, g: ArrayD<f64>| {
            match &mut table[target] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::LeakyRelu { input, slope } => {
                let x = &self.nodes[*input].value;
                let g = ndarray::Zip::from(grad)
                    .and(x)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { g * slope });
                add_to(table, *input, g);
            }
            Op::Relu { input } => {
                let x = &self.nodes[*input].value;
                let g = ndarray::Zip::from(grad)
                    .and(x)
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                add_to(table, *input, g);
            }
            Op::Sigmoid { input } => {
                let y = &self.nodes[id].value;
                let g = ndarray::Zip::from(grad)
                    .and(y)
                    .map_collect(|&g, &y| g * y * (1.0 - y));
                add_to(table, *input, g);
            }
            Op::Tanh { input } => {
                let y = &self.nodes[id].value;
                let g = ndarray::Zip::from(grad)
                    .and(y)
                    .map_collect(|&g, &y| g * (1.0 - y * y));
                add_to(table, *input, g);
            }
            Op::Add { a, b } => {
                add_to(table, *a, grad.clone());
                add_to(table, *b, grad.clone());
            }
            Op::Sub { a, b } => {
                add_to(table, *a, grad.clone());
                add_to(table, *b, grad.mapv(|g| -g));
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(table, *a, grad * bv);
                add_to(table, *b, grad * av);
            }
            Op::Scale { input, k } => {
                add_to(table, *input, grad.mapv(|g| g * k));
            }
            Op::Abs { input } => {
                let x = &self.nodes[*input].value;
                let g = ndarray::Zip::from(grad)
                    .and(x)
                    .map_collect(|&g, &x| g * x.signum_or_zero());
                add_to(table, *input, g);
            }
            Op::MeanAll { input } => {
                let x = &self.nodes[*input].value;
                let g0 = *grad.first().expect("scalar grad");
                let g = ArrayD::from_elem(x.raw_dim(), g0 / x.len() as f64);
                add_to(table, *input, g);
            }
            Op::BceMean { prob, target } => {
                let p = &self.nodes[*prob].value;
                let g0 = *grad.first().expect("scalar grad");
                let scale = g0 / p.len() as f64;
                let g = ndarray::Zip::from(p)
                    .and(target)
                    .map_collect(|&pi, &yi| {
                        if pi <= BCE_EPS || pi >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            scale * (pi - yi) / (pi * (1.0 - pi))
                        }
                    });
                add_to(table, *prob, g);
            }
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix4>().unwrap();
                let w = self.nodes[*weight].value.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, wdt) = x.dim();
                let (co, ci, kh, _) = w.dim();
                let g = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (_, _, ho, wo) = g.dim();
                let plane = ho * wo;
                let l = n * plane;

                // (co, n*ho*wo) gather of the output gradient
                let mut g2 = Array2::<f64>::zeros((co, l));
                {
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().unwrap();
                    let g2s = g2.as_slice_mut().unwrap();
                    for ni in 0..n {
                        for ci_ in 0..co {
                            let src = &gs[(ni * co + ci_) * plane..(ni * co + ci_ + 1) * plane];
                            let dst = &mut g2s[ci_ * l + ni * plane..ci_ * l + (ni + 1) * plane];
                            dst.copy_from_slice(src);
                        }
                    }
                }

                let dw2 = g2.dot(&cols.t()); // (co, ci*k*k)
                let dw = dw2
                    .to_shape((co, ci, kh, kh))
                    .expect("weight grad reshape")
                    .to_owned();
                let db = g2.sum_axis(ndarray::Axis(1));
                let w2 = w.to_shape((co, ci * kh * kh)).unwrap().to_owned();
                let dcols = w2.t().dot(&g2); // (ci*k*k, l)
                let dx = col2im(&dcols, (n, c, h, wdt), kh, *stride, *pad, ho, wo);

                add_to(table, *input, dx.into_dyn());
                add_to(table, *weight, dw.into_dyn());
                add_to(table, *bias, db.into_dyn());
            }
            Op::MaxPool2 { input, winners } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x.dim();
                let (ho, wo) = (h / 2, w / 2);
                let g = grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut idx = 0usize;
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let k = winners[idx] as usize;
                                idx += 1;
                                let (dy, dxx) = [(0, 0), (0, 1), (1, 0), (1, 1)][k];
                                dx[[ni, ci, 2 * oy + dy, 2 * ox + dxx]] += g[[ni, ci, oy, ox]];
                            }
                        }
                    }
                }
                add_to(table, *input, dx.into_dyn());
            }
            Op::Upsample2 { input } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x.dim();
                let g = grad.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dx[[ni, ci, y / 2, xx / 2]] += g[[ni, ci, y, xx]];
                            }
                        }
                    }
                }
                add_to(table, *input, dx.into_dyn());
            }
            Op::ConcatC { a, b, a_ch } => {
                let g = grad.view().into_dimensionality::<Ix4>().unwrap();
                let ga = g.slice(ndarray::s![.., ..*a_ch, .., ..]).to_owned();
                let gb = g.slice(ndarray::s![.., *a_ch.., .., ..]).to_owned();
                add_to(table, *a, ga.into_dyn());
                add_to(table, *b, gb.into_dyn());
            }
            Op::MulChannel { features, gates } => {
                let f = self.nodes[*features].value.view().into_dimensionality::<Ix4>().unwrap();
                let gt = self.nodes[*gates].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = f.dim();
                let mut df = Array4::<f64>::zeros((n, c, h, w));
                let mut dg = Array2::<f64>::zeros((n, c));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = gt[[ni, ci]];
                        let mut acc = 0.0;
                        for y in 0..h {
                            for x in 0..w {
                                let gout = g[[ni, ci, y, x]];
                                df[[ni, ci, y, x]] = gout * gv;
                                acc += gout * f[[ni, ci, y, x]];
                            }
                        }
                        dg[[ni, ci]] = acc;
                    }
                }
                add_to(table, *features, df.into_dyn());
                add_to(table, *gates, dg.into_dyn());
            }
            Op::GlobalAvgPool { input } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = x.dim();
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let inv = 1.0 / (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g[[ni, ci]] * inv;
                        for y in 0..h {
                            for xx in 0..w {
                                dx[[ni, ci, y, xx]] = gv;
                            }
                        }
                    }
                }
                add_to(table, *input, dx.into_dyn());
            }
            Op::Linear { input, weight, bias } => {
                let x = self.nodes[*input].value.view().into_dimensionality::<Ix2>().unwrap();
                let w = self.nodes[*weight].value.view().into_dimensionality::<Ix2>().unwrap();
                let g = grad.view().into_dimensionality::<Ix2>().unwrap();
                let dx = g.dot(&w); // (n, f)
                let dw = g.t().dot(&x); // (o, f)
                let db = g.sum_axis(ndarray::Axis(0)); // (o,)
                add_to(table, *input, dx.into_dyn());
                add_to(table, *weight, dw.into_dyn());
                add_to(table, *bias, db.into_dyn());
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &Array4<f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let l = n * ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, l));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * l;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst_base = row_base + (ni * ho + oy) * wo;
                        if iy < 0 || iy >= h as isize {
                            continue; // zeros already in place
                        }
                        let src_row = x_base + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst_base + ox] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array4<f64> {
    let (n, c, h, w) = in_dim;
    let l = n * ho * wo;
    let mut dx = Array4::<f64>::zeros((n, c, h, w));
    let ds = dcols.as_slice().expect("contiguous dcols");
    let xs = dx.as_slice_mut().expect("contiguous dx");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let row_base = row * l;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_base = row_base + (ni * ho + oy) * wo;
                        let dst_row = x_base + iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[dst_row + ix as usize] += ds[src_base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(d, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite difference on a scalar-valued function of one leaf.
    fn finite_diff<F>(x: &ArrayD<f64>, f: F, h: f64) -> ArrayD<f64>
    where
        F: Fn(&ArrayD<f64>) -> f64,
    {
        let mut g = ArrayD::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = x.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &ArrayD<f64>, b: &ArrayD<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                ((x - y) / denom).abs() < tol,
                "gradients differ: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1x3x3 input, 1x1x3x3 weight, pad 1: center output = full dot.
        let x = Array4::from_shape_vec((1, 1, 3, 3), (1..=9).map(|v| v as f64).collect()).unwrap();
        let w = Array4::from_shape_vec((1, 1, 3, 3), vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Array1::from_vec(vec![0.5]);
        let mut t = Tape::new();
        let xi = t.leaf4(x);
        let wi = t.leaf(w.into_dyn());
        let bi = t.leaf(b.into_dyn());
        let y = t.conv2d(xi, wi, bi, 1, 1);
        // identity kernel + bias
        let out = t.value(y).view().into_dimensionality::<Ix4>().unwrap().to_owned();
        for (i, v) in (1..=9).zip(out.iter()) {
            assert!((v - (i as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn conv2d_stride2_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn4(&mut rng, (2, 3, 7, 9));
        let w = randn4(&mut rng, (4, 3, 3, 3));
        let b = Array1::zeros(4);
        let mut t = Tape::new();
        let xi = t.leaf4(x);
        let wi = t.leaf(w.into_dyn());
        let bi = t.leaf(b.into_dyn());
        let y = t.conv2d(xi, wi, bi, 2, 1);
        assert_eq!(t.value(y).shape(), &[2, 4, 4, 5]);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = randn4(&mut rng, (2, 2, 6, 6)).into_dyn();
        let w0 = randn4(&mut rng, (3, 2, 3, 3)).into_dyn();
        let b0 = Array1::from_shape_fn(3, |_| rng.random_range(-0.5..0.5)).into_dyn();
        let target = ArrayD::from_elem(ndarray::IxDyn(&[2, 3, 3, 3]), 0.3);

        let eval = |x: &ArrayD<f64>, w: &ArrayD<f64>, b: &ArrayD<f64>| -> (Tape, NodeId, NodeId, NodeId, NodeId) {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.leaf(w.clone());
            let bi = t.leaf(b.clone());
            let c = t.conv2d(xi, wi, bi, 2, 1);
            let a = t.leaky_relu(c, 0.2);
            let s = t.sigmoid(a);
            let loss = t.bce_mean(s, target.clone());
            (t, loss, xi, wi, bi)
        };

        let (t, loss, xi, wi, bi) = eval(&x0, &w0, &b0);
        let grads = t.backward(loss);

        let fx = |x: &ArrayD<f64>| eval(x, &w0, &b0).0.scalar(eval(x, &w0, &b0).1);
        let fw = |w: &ArrayD<f64>| eval(&x0, w, &b0).0.scalar(eval(&x0, w, &b0).1);
        let fb = |b: &ArrayD<f64>| eval(&x0, &w0, b).0.scalar(eval(&x0, &w0, b).1);

        assert_close(grads.get(xi).unwrap(), &finite_diff(&x0, fx, 1e-5), 1e-6);
        assert_close(grads.get(wi).unwrap(), &finite_diff(&w0, fw, 1e-5), 1e-6);
        assert_close(grads.get(bi).unwrap(), &finite_diff(&b0, fb, 1e-5), 1e-6);
    }

    #[test]
    fn structured_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = randn4(&mut rng, (1, 2, 4, 4)).into_dyn();
        let g0 = Array2::from_shape_fn((1, 2), |_| rng.random_range(0.1..0.9)).into_dyn();

        // pool -> upsample -> gate -> concat -> gap -> linear -> mean
        let w0 = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0)).into_dyn();
        let b0 = Array1::from_vec(vec![0.1]).into_dyn();
        let eval = |x: &ArrayD<f64>, g: &ArrayD<f64>| -> f64 {
            let mut t = Tape::new();
            let xi = t.leaf(x.clone());
            let gi = t.leaf(g.clone());
            let wi = t.leaf(w0.clone());
            let bi = t.leaf(b0.clone());
            let p = t.max_pool2(xi);
            let u = t.upsample2(p);
            let m = t.mul_channel(u, gi);
            let cat = t.concat_channels(m, xi);
            let gap = t.global_avg_pool(cat);
            let lin = t.linear(gap, wi, bi);
            let taned = t.tanh(lin);
            let loss = t.mean_all(taned);
            t.scalar(loss)
        };

        let mut t = Tape::new();
        let xi = t.leaf(x0.clone());
        let gi = t.leaf(g0.clone());
        let wi = t.leaf(w0.clone());
        let bi = t.leaf(b0.clone());
        let p = t.max_pool2(xi);
        let u = t.upsample2(p);
        let m = t.mul_channel(u, gi);
        let cat = t.concat_channels(m, xi);
        let gap = t.global_avg_pool(cat);
        let lin = t.linear(gap, wi, bi);
        let taned = t.tanh(lin);
        let loss = t.mean_all(taned);
        let grads = t.backward(loss);

        let fx = |x: &ArrayD<f64>| eval(x, &g0);
        let fg = |g: &ArrayD<f64>| eval(&x0, g);
        assert_close(grads.get(xi).unwrap(), &finite_diff(&x0, fx, 1e-5), 1e-5);
        assert_close(grads.get(gi).unwrap(), &finite_diff(&g0, fg, 1e-5), 1e-5);
    }

    #[test]
    fn abs_and_sub_compose() {
        let mut t = Tape::new();
        let a = t.leaf(ndarray::arr0(0.2).into_dyn());
        let b = t.leaf(ndarray::arr0(0.7).into_dyn());
        let d = t.sub(a, b);
        let l = t.abs(d);
        assert!((t.scalar(l) - 0.5).abs() < 1e-15);
        let grads = t.backward(l);
        // d |a-b| / da = sign(a-b) = -1
        assert_eq!(grads.get(a).unwrap().first().copied(), Some(-1.0));
        assert_eq!(grads.get(b).unwrap().first().copied(), Some(1.0));
    }
}
