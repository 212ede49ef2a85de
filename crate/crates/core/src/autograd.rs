//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Ops are recorded in execution order; [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients. Leaves created with `requires_grad =
//! false` (input images) prune their subgraphs from the backward pass.

use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// Per-channel affine normalisation. `xhat` holds normalised inputs and
    /// `train` selects whether mean/variance depend on `x` (batch statistics).
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// `x [n,c,h,w] * s [n,1,1,1]`
    Scale { x: Var, s: Var },
    /// `x [n,c,h,w] * m [n,1,h,w]`
    Mask { x: Var, m: Var },
    Concat(Vec<Var>),
    Resize(Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Gap(Var),
    Replicate { x: Var, times: usize },
}

/// Statistics of one batch-norm evaluation in training mode.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (as used for running estimates).
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

/// Gradients indexed by [`Var`].
#[derive(Debug)]
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0.get_mut(v.0).and_then(Option::take)
    }
}

pub const BN_EPS: f64 = 1e-5;

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.values[v.0].shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs[1], ws[1], "conv input channels {} != weight channels {}", xs[1], ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let g = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], stride, pad);
        let out = kernels::conv_forward(
            self.values[x.0].data(),
            xs[0],
            &g,
            self.values[w.0].data(),
            b.map(|b| self.values[b.0].data()),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(
            Tensor::from_vec([xs[0], g.co, g.ho, g.wo], out),
            Op::Conv { x, w, b, stride, pad },
            ng,
        )
    }

    /// Batch normalisation with batch statistics over `(n, h, w)`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let [n, c, h, w] = self.shape(x);
        let m = n * h * w;
        let hw = h * w;
        let xv = self.values[x.0].data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for s_i in 0..n {
                let base = (s_i * c + ch) * hw;
                s += xv[base..base + hw].iter().sum::<f64>();
            }
            let mu = s / m as f64;
            let mut q = 0.0;
            for s_i in 0..n {
                let base = (s_i * c + ch) * hw;
                q += xv[base..base + hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = q / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|v| if m > 1 { v * m as f64 / (m - 1) as f64 } else { *v })
            .collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let out = self.normalize(x, gamma, beta, &mean, &inv_std, true);
        (out, stats)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Var {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, &inv_std, false)
    }

    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], train: bool) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let xv = self.values[x.0].data();
        let gv = self.values[gamma.0].data();
        let bv = self.values[beta.0].data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            Tensor::from_vec([n, c, h, w], out),
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(|v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values[x.0].map(stable_sigmoid);
        let ng = self.ng(&[x]);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut out = self.values[a.0].clone();
        out.add_assign(&self.values[b.0]);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Sums a non-empty list of same-shaped nodes left to right.
    pub fn sum_all(&mut self, items: &[Var]) -> Var {
        let mut acc = items[0];
        for &v in &items[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let av = self.values[a.0].data();
        let bv = self.values[b.0].data();
        let out = Tensor::from_vec(self.shape(a), av.iter().zip(bv).map(|(x, y)| x * y).collect());
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Multiplies every sample of `x` by the per-sample scalar in `s [n,1,1,1]`.
    pub fn scale(&mut self, x: Var, s: Var) -> Var {
        let xs = self.shape(x);
        assert_eq!(self.shape(s), [xs[0], 1, 1, 1], "scale expects [n,1,1,1] gate");
        let sl = xs[1] * xs[2] * xs[3];
        let sv = self.values[s.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (i, chunk) in out.data_mut().chunks_mut(sl.max(1)).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= sv[i]);
        }
        let ng = self.ng(&[x, s]);
        self.push(out, Op::Scale { x, s }, ng)
    }

    /// Multiplies `x [n,c,h,w]` by a spatial mask `m [n,1,h,w]` broadcast over channels.
    pub fn mask(&mut self, x: Var, m: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(self.shape(m), [n, 1, h, w], "mask shape mismatch");
        let hw = h * w;
        let mv = self.values[m.0].data().to_vec();
        let mut out = self.values[x.0].clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let s = i / c;
            for (v, mm) in plane.iter_mut().zip(&mv[s * hw..(s + 1) * hw]) {
                *v *= mm;
            }
        }
        let ng = self.ng(&[x, m]);
        self.push(out, Op::Mask { x, m }, ng)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, items: &[Var]) -> Var {
        assert!(!items.is_empty());
        let [n, _, h, w] = self.shape(items[0]);
        let mut c_total = 0;
        for &v in items {
            let s = self.shape(v);
            assert_eq!([s[0], s[2], s[3]], [n, h, w], "concat spatial/batch mismatch");
            c_total += s[1];
        }
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for s in 0..n {
            for &v in items {
                data.extend_from_slice(self.values[v.0].sample(s));
            }
        }
        let ng = self.ng(items);
        self.push(Tensor::from_vec([n, c_total, h, w], data), Op::Concat(items.to_vec()), ng)
    }

    /// Bilinear resize to `(oh, ow)` with half-pixel centres.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        if (h, w) == (oh, ow) {
            return x;
        }
        let out = kernels::resize_forward(self.values[x.0].data(), n * c, h, w, oh, ow);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec([n, c, oh, ow], out), Op::Resize(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.shape(x);
        self.resize(x, 2 * h, 2 * w)
    }

    pub fn max_pool3s2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (out, argmax, oh, ow) = kernels::maxpool_forward(self.values[x.0].data(), n * c, h, w);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec([n, c, oh, ow], out), Op::MaxPool { x, argmax }, ng)
    }

    /// Global average pooling to `[n, c, 1, 1]`.
    pub fn gap(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = (h * w) as f64;
        let data = self.values[x.0]
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec([n, c, 1, 1], data), Op::Gap(x), ng)
    }

    /// Repeats a single-channel map `times` times along channels.
    pub fn replicate(&mut self, x: Var, times: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(c, 1, "replicate expects one channel");
        let mut data = Vec::with_capacity(n * times * h * w);
        for s in 0..n {
            for _ in 0..times {
                data.extend_from_slice(self.values[x.0].sample(s));
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec([n, times, h, w], data), Op::Replicate { x, times }, ng)
    }

    /// Reverse pass seeded with `seed = ∂L/∂root`.
    pub fn backward(&self, root: Var, seed: Tensor) -> Grads {
        self.backward_multi(vec![(root, seed)])
    }

    /// Reverse pass from several outputs at once; seeds on the same node add.
    pub fn backward_multi(&self, seeds: Vec<(Var, Tensor)>) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.values.len()).map(|_| None).collect();
        let mut last = 0;
        for (root, seed) in seeds {
            assert_eq!(seed.shape(), self.shape(root), "seed shape mismatch");
            last = last.max(root.0);
            match &mut grads[root.0] {
                Some(acc) => acc.add_assign(&seed),
                slot @ None => *slot = Some(seed),
            }
        }
        for i in (0..=last).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs_grad[v.0] {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[0], ws[2], *stride, *pad);
                let need_dx = self.needs_grad[x.0];
                let cg = kernels::conv_backward(
                    self.values[x.0].data(),
                    xs[0],
                    &geom,
                    self.values[w.0].data(),
                    g.data(),
                    need_dx,
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::from_vec(xs, dx));
                }
                self.accumulate(grads, *w, Tensor::from_vec(ws, cg.dw));
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), cg.db));
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let m = (n * hw) as f64;
                let gv = self.values[gamma.0].data();
                let gd = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += gd[j] * xhat[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                if self.needs_grad[x.0] {
                    let mut dx = vec![0.0; gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if *train {
                                    k / m * (m * gd[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    k * gd[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], dx));
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma));
                self.accumulate(grads, *beta, Tensor::from_vec(self.shape(*beta), dbeta));
            }
            Op::Relu(x) => {
                let out = &self.values[i];
                let dx = Tensor::from_vec(
                    out.shape(),
                    out.data()
                        .iter()
                        .zip(g.data())
                        .map(|(o, gg)| if *o > 0.0 { *gg } else { 0.0 })
                        .collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let out = &self.values[i];
                let dx = Tensor::from_vec(
                    out.shape(),
                    out.data().iter().zip(g.data()).map(|(s, gg)| gg * s * (1.0 - s)).collect(),
                );
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let av = self.values[a.0].data();
                let bv = self.values[b.0].data();
                let sh = g.shape();
                if self.needs_grad[a.0] {
                    let da = g.data().iter().zip(bv).map(|(gg, y)| gg * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(sh, da));
                }
                if self.needs_grad[b.0] {
                    let db = g.data().iter().zip(av).map(|(gg, x)| gg * x).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(sh, db));
                }
            }
            Op::Scale { x, s } => {
                let xv = &self.values[x.0];
                let sv = self.values[s.0].data();
                let sl = xv.sample_len().max(1);
                if self.needs_grad[x.0] {
                    let mut dx = g.clone();
                    for (k, chunk) in dx.data_mut().chunks_mut(sl).enumerate() {
                        chunk.iter_mut().for_each(|v| *v *= sv[k]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs_grad[s.0] {
                    let ds = xv
                        .data()
                        .chunks(sl)
                        .zip(g.data().chunks(sl))
                        .map(|(xc, gc)| xc.iter().zip(gc).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::from_vec(self.shape(*s), ds));
                }
            }
            Op::Mask { x, m } => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let xv = self.values[x.0].data();
                let mv = self.values[m.0].data();
                let gd = g.data();
                if self.needs_grad[x.0] {
                    let mut dx = vec![0.0; gd.len()];
                    for (p, plane) in dx.chunks_mut(hw).enumerate() {
                        let s = p / c;
                        for (j, v) in plane.iter_mut().enumerate() {
                            *v = gd[p * hw + j] * mv[s * hw + j];
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], dx));
                }
                if self.needs_grad[m.0] {
                    let mut dm = vec![0.0; n * hw];
                    for p in 0..n * c {
                        let s = p / c;
                        for j in 0..hw {
                            dm[s * hw + j] += gd[p * hw + j] * xv[p * hw + j];
                        }
                    }
                    self.accumulate(grads, *m, Tensor::from_vec([n, 1, h, w], dm));
                }
            }
            Op::Concat(items) => {
                let [n, _, h, w] = g.shape();
                let hw = h * w;
                let total_c = g.c();
                let mut offset = 0;
                for v in items {
                    let c = self.shape(*v)[1];
                    if self.needs_grad[v.0] {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let base = (s * total_c + offset) * hw;
                            d.extend_from_slice(&g.data()[base..base + c * hw]);
                        }
                        self.accumulate(grads, *v, Tensor::from_vec([n, c, h, w], d));
                    }
                    offset += c;
                }
            }
            Op::Resize(x) => {
                let [n, c, h, w] = self.shape(*x);
                let [_, _, oh, ow] = g.shape();
                let dx = kernels::resize_backward(g.data(), n * c, h, w, oh, ow);
                self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], dx));
            }
            Op::MaxPool { x, argmax } => {
                let [n, c, h, w] = self.shape(*x);
                let [_, _, oh, ow] = g.shape();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for j in 0..oh * ow {
                        dx[p * h * w + argmax[p * oh * ow + j] as usize] += g.data()[p * oh * ow + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], dx));
            }
            Op::Gap(x) => {
                let [n, c, h, w] = self.shape(*x);
                let hw = h * w;
                let mut dx = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                self.accumulate(grads, *x, Tensor::from_vec([n, c, h, w], dx));
            }
            Op::Replicate { x, times } => {
                let [n, _, h, w] = self.shape(*x);
                let hw = h * w;
                let mut dx = vec![0.0; n * hw];
                for s in 0..n {
                    for t in 0..*times {
                        let base = (s * times + t) * hw;
                        for j in 0..hw {
                            dx[s * hw + j] += g.data()[base + j];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec([n, 1, h, w], dx));
            }
        }
    }
}
