use super::conv;
use super::tape::{Op, Tape, Var};
use super::{AutodiffError, Tensor};

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sum_f64(xs: &[f32]) -> f64 {
    let mut lanes = [0f64; 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for c in chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l += *v as f64;
        }
    }
    let mut total: f64 = lanes.iter().sum();
    for v in rest {
        total += *v as f64;
    }
    total
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("map preserves shape")
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("zip preserves shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a.0, b.0)))
    }

    /// Multiplication by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a.0, c))
    }

    /// Addition of a scalar constant.
    pub fn shift(&mut self, a: Var, c: f32) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::Shift(a.0))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.shift(n, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f32::abs);
        self.push(v, Op::Abs(a.0))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(AutodiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let v = self.map(a, f32::ln);
        Ok(self.push(v, Op::Log(a.0)))
    }

    /// Clamp to `[0, 1]`; the gradient passes on the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.clamp(0.0, 1.0));
        self.push(v, Op::Clamp01(a.0))
    }

    /// Hard rounding forward, identity backward.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let v = self.map(a, f32::round);
        self.push(v, Op::RoundSte(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = sum_f64(self.value(a).data()) as f32;
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = (sum_f64(t.data()) / t.len() as f64) as f32;
        self.push(Tensor::scalar(m), Op::Mean(a.0))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut acc = 0f64;
        for (x, y) in ta.iter().zip(tb) {
            let d = (*x - *y) as f64;
            acc += d * d;
        }
        let m = (acc / ta.len() as f64) as f32;
        Ok(self.push(Tensor::scalar(m), Op::Mse(a.0, b.0)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let v = self.value(a).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a.0)))
    }

    /// `out[i] = src[index[i]]`, with output shape `shape`.
    pub fn gather(&mut self, src: Var, index: Vec<u32>, shape: &[usize]) -> Result<Var, AutodiffError> {
        let s = self.value(src).data();
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= s.len()) {
            return Err(AutodiffError::invalid("gather", format!("index {bad} out of range {}", s.len())));
        }
        let data = index.iter().map(|&i| s[i as usize]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Gather { src: src.0, index }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AutodiffError::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            for k in start..start + len {
                let row = base + k * inner;
                index.extend((row..row + inner).map(|i| i as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index, &out_shape)
    }

    /// Rectangular window of a 2-D tensor.
    pub fn crop2d(&mut self, a: Var, y: usize, x: usize, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || y + h > shape[0] || x + w > shape[1] || h == 0 || w == 0 {
            return Err(AutodiffError::invalid(
                "crop2d",
                format!("window ({y},{x},{h},{w}) outside {shape:?}"),
            ));
        }
        let width = shape[1];
        let mut index = Vec::with_capacity(h * w);
        for r in y..y + h {
            index.extend((r * width + x..r * width + x + w).map(|i| i as u32));
        }
        self.gather(a, index, &[h, w])
    }

    /// Repeat a 2-D tensor `reps.0` times along rows and `reps.1` along columns.
    pub fn tile2d(&mut self, a: Var, reps: (usize, usize)) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || reps.0 == 0 || reps.1 == 0 {
            return Err(AutodiffError::invalid("tile2d", format!("{shape:?} x {reps:?}")));
        }
        let (h, w) = (shape[0], shape[1]);
        let (oh, ow) = (h * reps.0, w * reps.1);
        let mut index = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                index.push(((r % h) * w + c % w) as u32);
            }
        }
        self.gather(a, index, &[oh, ow])
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let Some(&first) = inputs.first() else {
            return Err(AutodiffError::invalid("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(AutodiffError::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.0).collect(),
                axis,
            },
        ))
    }

    /// Softmax cross-entropy of 1-D `logits` against a class index.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.shape().len() != 1 {
            return Err(AutodiffError::invalid("cross_entropy", format!("logits shape {:?}", t.shape())));
        }
        if label >= t.len() {
            return Err(AutodiffError::Domain {
                op: "cross_entropy",
                detail: format!("label {label} with {} classes", t.len()),
            });
        }
        let lse = log_sum_exp(t.data());
        let loss = (lse - t.data()[label] as f64) as f32;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits: logits.0, label }))
    }

    pub(crate) fn backward_node(&self, i: usize, g: &[f32]) -> Vec<(usize, Vec<f32>)> {
        let node = &self.nodes[i];
        let val = |p: usize| self.nodes[p].value.data();
        let ew = |p: usize, f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            val(p).iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let ga = val(*b).iter().zip(g).map(|(y, gi)| y * gi).collect();
                let gb = val(*a).iter().zip(g).map(|(x, gi)| x * gi).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Shift(a) | Op::RoundSte(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => vec![(*a, ew(*a, &|x, gi| if x > 0.0 { gi } else { 0.0 }))],
            Op::Sigmoid(a) => {
                let out = node.value.data();
                vec![(*a, out.iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect())]
            }
            Op::Abs(a) => vec![(*a, ew(*a, &|x, gi| if x > 0.0 { gi } else if x < 0.0 { -gi } else { 0.0 }))],
            Op::Log(a) => vec![(*a, ew(*a, &|x, gi| gi / x))],
            Op::Clamp01(a) => vec![(*a, ew(*a, &|x, gi| if (0.0..=1.0).contains(&x) { gi } else { 0.0 }))],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![(g[0] as f64 / n as f64) as f32; n])]
            }
            Op::Mse(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let k = 2.0 * g[0] as f64 / xa.len() as f64;
                let ga: Vec<f32> = xa.iter().zip(xb).map(|(x, y)| (k * (*x - *y) as f64) as f32).collect();
                let gb = ga.iter().map(|v| -v).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Gather { src, index } => {
                let mut gs = vec![0f32; val(*src).len()];
                for (&j, &gi) in index.iter().zip(g) {
                    gs[j as usize] += gi;
                }
                vec![(*src, gs)]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<f32>> = inputs.iter().map(|&p| Vec::with_capacity(val(p).len())).collect();
                let mut offset = 0;
                for _ in 0..outer {
                    for (k, &p) in inputs.iter().enumerate() {
                        let chunk = self.nodes[p].value.shape()[*axis] * inner;
                        parts[k].extend_from_slice(&g[offset..offset + chunk]);
                        offset += chunk;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::CrossEntropy { logits, label } => {
                let z = val(*logits);
                let lse = log_sum_exp(z);
                let gl = z
                    .iter()
                    .enumerate()
                    .map(|(k, &zk)| {
                        let p = ((zk as f64) - lse).exp();
                        let t = if k == *label { 1.0 } else { 0.0 };
                        ((p - t) * g[0] as f64) as f32
                    })
                    .collect();
                vec![(*logits, gl)]
            }
            Op::Conv2d { input, kernel, bias } => {
                conv::conv2d_backward(&self.nodes[*input].value, &self.nodes[*kernel].value, g)
                    .into_iter()
                    .zip([Some(*input), Some(*kernel), *bias])
                    .filter_map(|(gr, p)| p.map(|p| (p, gr)))
                    .collect()
            }
            Op::ConvTemporal { input, kernel, bias } => {
                conv::conv_temporal_backward(&self.nodes[*input].value, &self.nodes[*kernel].value, g)
                    .into_iter()
                    .zip([Some(*input), Some(*kernel), *bias])
                    .filter_map(|(gr, p)| p.map(|p| (p, gr)))
                    .collect()
            }
            Op::AvgPool2(a) => vec![(*a, conv::avg_pool2_backward(self.nodes[*a].value.shape(), g))],
            Op::GlobalAvgPool(a) => vec![(*a, conv::global_avg_pool_backward(self.nodes[*a].value.shape(), g))],
            Op::Linear { input, weight, bias } => {
                let (gi, gw) = conv::linear_backward(&self.nodes[*input].value, &self.nodes[*weight].value, g);
                vec![(*input, gi), (*weight, gw), (*bias, g.to_vec())]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&p| &self.nodes[p].value).collect();
                op.backward(&values, &node.value, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gr, &p)| gr.map(|gr| (p, gr)))
                    .collect()
            }
        }
    }
}

fn log_sum_exp(z: &[f32]) -> f64 {
    let m = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let s: f64 = z.iter().map(|&x| (x as f64 - m).exp()).sum();
    m + s.ln()
}
