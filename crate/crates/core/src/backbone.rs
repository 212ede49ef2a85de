//! Staged residual encoder (ResNet-50 topology at configurable width) and
//! the per-stage channel projections.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{Activation, ConvAct, ConvBnAct, Ctx, ParamGroup, Registry};
use crate::{Error, Result};

/// Widths and depths of the five backbone stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_widths: [usize; 5],
    pub blocks_per_stage: [usize; 5],
    pub input_channels: usize,
}

impl StagePlan {
    /// Full ResNet-50 layout.
    pub fn resnet50() -> Self {
        Self {
            stage_widths: [64, 256, 512, 1024, 2048],
            blocks_per_stage: [1, 3, 4, 6, 3],
            input_channels: 3,
        }
    }

    /// Default desk-scale plan.
    pub fn desk() -> Self {
        Self {
            stage_widths: [8, 16, 32, 64, 128],
            blocks_per_stage: [1, 1, 1, 1, 1],
            input_channels: 3,
        }
    }

    /// Smallest plan, used by gradient checks and fast training runs.
    pub fn tiny() -> Self {
        Self {
            stage_widths: [4, 8, 8, 16, 16],
            blocks_per_stage: [1, 1, 1, 1, 1],
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) || self.input_channels == 0 {
            return Err(Error::Config("stage widths and input channels must be >= 1".into()));
        }
        if self.blocks_per_stage[1..].contains(&0) {
            return Err(Error::Config("stages 2..5 need at least one block".into()));
        }
        Ok(())
    }
}

/// Total stride of stage `l` (1-based) output.
pub fn stage_stride(stage: usize) -> usize {
    1 << stage
}

/// Checks the encoder input contract: square, divisible by 32.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h != w {
        return Err(Error::InvalidSize {
            size: w,
            reason: "input must be square",
        });
    }
    if h == 0 || !h.is_multiple_of(32) {
        return Err(Error::InvalidSize {
            size: h,
            reason: "input size must be a positive multiple of 32",
        });
    }
    Ok(())
}

/// Residual bottleneck: 1×1 reduce, 3×3 (strided), 1×1 expand, plus shortcut.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    reduce: ConvBnAct,
    spatial: ConvBnAct,
    expand: ConvBnAct,
    shortcut: Option<ConvBnAct>,
}

impl Bottleneck {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize, stride: usize, group: ParamGroup) -> Self {
        let mid = (cout / 4).max(1);
        let shortcut = (cin != cout || stride != 1).then(|| {
            ConvBnAct::new(reg, &format!("{name}.shortcut"), cin, cout, 1, stride, Activation::Identity, group)
        });
        Self {
            reduce: ConvBnAct::new(reg, &format!("{name}.reduce"), cin, mid, 1, 1, Activation::Relu, group),
            spatial: ConvBnAct::new(reg, &format!("{name}.spatial"), mid, mid, 3, stride, Activation::Relu, group),
            expand: ConvBnAct::new(reg, &format!("{name}.expand"), mid, cout, 1, 1, Activation::Identity, group),
            shortcut,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        let y = self.reduce.forward(cx, x);
        let y = self.spatial.forward(cx, y);
        let y = self.expand.forward(cx, y);
        let skip = match &self.shortcut {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        let sum = cx.tape.add(y, skip);
        cx.tape.relu(sum)
    }
}

/// One residual stage; the first block carries the stride.
#[derive(Clone, Debug)]
pub struct Stage {
    blocks: Vec<Bottleneck>,
    pub out_channels: usize,
}

impl Stage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        blocks: usize,
        stride: usize,
        group: ParamGroup,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let (ci, s) = if i == 0 { (cin, stride) } else { (cout, 1) };
                Bottleneck::new(reg, &format!("{name}.block{i}"), ci, cout, s, group)
            })
            .collect();
        Self {
            blocks,
            out_channels: cout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        self.blocks.iter().fold(x, |acc, b| b.forward(cx, acc))
    }
}

/// Outputs of the five stages at strides 2, 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub stages: [Var; 5],
}

impl StageFeatures {
    /// Stage `l` output, 1-based.
    pub fn stage(&self, l: usize) -> Var {
        self.stages[l - 1]
    }
}

/// Perception encoder: stride-2 stem (stage 1), max-pool, stages 2..5.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvBnAct,
    stages: Vec<Stage>,
    plan: StagePlan,
}

impl Encoder {
    pub fn new(reg: &mut Registry, name: &str, plan: &StagePlan) -> Self {
        let w = plan.stage_widths;
        let g = ParamGroup::Backbone;
        let stem = ConvBnAct::new(reg, &format!("{name}.stem"), plan.input_channels, w[0], 7, 2, Activation::Relu, g);
        let stages = (1..5)
            .map(|i| {
                let stride = if i == 1 { 1 } else { 2 };
                Stage::new(
                    reg,
                    &format!("{name}.stage{}", i + 1),
                    w[i - 1],
                    w[i],
                    plan.blocks_per_stage[i],
                    stride,
                    g,
                )
            })
            .collect();
        Self {
            stem,
            stages,
            plan: plan.clone(),
        }
    }

    pub fn plan(&self) -> &StagePlan {
        &self.plan
    }

    pub fn encode(&self, cx: &mut Ctx<'_>, image: Var) -> Result<StageFeatures> {
        let [_, c, h, w] = cx.tape.shape(image);
        check_input_size(h, w)?;
        if c != self.plan.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} input channels, got {c}",
                self.plan.input_channels
            )));
        }
        let s1 = self.stem.forward(cx, image);
        let pooled = cx.tape.max_pool3s2(s1);
        let s2 = self.stages[0].forward(cx, pooled);
        let s3 = self.stages[1].forward(cx, s2);
        let s4 = self.stages[2].forward(cx, s3);
        let s5 = self.stages[3].forward(cx, s4);
        Ok(StageFeatures {
            stages: [s1, s2, s3, s4, s5],
        })
    }
}

/// 3×3 convolution unifying a feature map to the decoder width.
#[derive(Clone, Debug)]
pub struct Projection(ConvAct);

impl Projection {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize, act: Activation) -> Self {
        Self(ConvAct::new(reg, name, cin, cout, 3, act, ParamGroup::Other))
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Var {
        self.0.forward(cx, x)
    }

    pub fn out_channels(&self) -> usize {
        self.0.conv.out_channels
    }
}

/// Replicates a single-channel depth map to three channels.
pub fn depth_to_3ch(cx: &mut Ctx<'_>, depth: Var) -> Var {
    cx.tape.replicate(depth, 3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Mode};
    use crate::tensor::Tensor;

    fn build(plan: &StagePlan) -> (Encoder, crate::nn::ParamStore) {
        let mut reg = Registry::new();
        let enc = Encoder::new(&mut reg, "enc", plan);
        let store = init_params(reg.specs(), 1);
        (enc, store)
    }

    #[test]
    fn stage_sizes_at_352() {
        let (enc, store) = build(&StagePlan::tiny());
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x = cx.input(Tensor::full([1, 3, 352, 352], 0.3));
        let f = enc.encode(&mut cx, x).unwrap();
        let sizes: Vec<usize> = f.stages.iter().map(|v| cx.tape.shape(*v)[2]).collect();
        assert_eq!(sizes, vec![176, 88, 44, 22, 11]);
        let widths: Vec<usize> = f.stages.iter().map(|v| cx.tape.shape(*v)[1]).collect();
        assert_eq!(widths, StagePlan::tiny().stage_widths.to_vec());
    }

    #[test]
    fn rejects_indivisible_size() {
        let (enc, store) = build(&StagePlan::tiny());
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x = cx.input(Tensor::zeros([1, 3, 48, 48]));
        assert!(matches!(enc.encode(&mut cx, x), Err(Error::InvalidSize { .. })));
        let y = cx.input(Tensor::zeros([1, 3, 64, 32]));
        assert!(matches!(enc.encode(&mut cx, y), Err(Error::InvalidSize { .. })));
    }

    #[test]
    fn desk_plan_is_small() {
        let mut reg = Registry::new();
        Encoder::new(&mut reg, "enc", &StagePlan::desk());
        let store = init_params(reg.specs(), 0);
        assert!(store.trainable_count() <= 1_000_000);
    }

    #[test]
    fn projection_shapes_and_zero_weights() {
        let mut reg = Registry::new();
        let p = Projection::new(&mut reg, "p", 512, 64, Activation::Relu);
        let q = Projection::new(&mut reg, "q", 2048, 64, Activation::Sigmoid);
        let mut store = init_params(reg.specs(), 2);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x = cx.input(Tensor::full([1, 512, 22, 22], 0.1));
        let y = p.forward(&mut cx, x);
        assert_eq!(cx.tape.shape(y), [1, 64, 22, 22]);
        let x5 = cx.input(Tensor::full([1, 2048, 11, 11], 0.1));
        let y5 = q.forward(&mut cx, x5);
        assert_eq!(cx.tape.shape(y5), [1, 64, 11, 11]);
        drop(cx);

        store.fill_prefix("q.weight", 0.0);
        store.fill_prefix("q.bias", 0.75);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let x5 = cx.input(Tensor::from_fn([1, 2048, 11, 11], |[_, c, h, w]| (c + h * w) as f64));
        let y5 = q.forward(&mut cx, x5);
        let expect = 1.0 / (1.0 + (-0.75f64).exp());
        assert!(cx.value(y5).data().iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn depth_replication() {
        let store = crate::nn::ParamStore::new();
        let mut cx = Ctx::new(&store, Mode::Eval);
        let d = cx.input(Tensor::full([1, 1, 4, 4], 0.5));
        let r = depth_to_3ch(&mut cx, d);
        assert_eq!(cx.tape.shape(r), [1, 3, 4, 4]);
        assert!(cx.value(r).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn depth_replication_gradient_sums_replicas() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let d0 = Tensor::from_fn([1, 1, 4, 4], |_| rng.gen_range(0.0..1.0));
        let wts = Tensor::from_fn([1, 3, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let store = crate::nn::ParamStore::new();
        let f = |d: &Tensor| {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let dv = cx.tape.leaf(d.clone(), true);
            let r = depth_to_3ch(&mut cx, dv);
            let y = cx.tape.sigmoid(r);
            let val: f64 = cx.value(y).data().iter().zip(wts.data()).map(|(a, b)| a * b).sum();
            (cx, dv, y, val)
        };
        let (cx, dv, y, _) = f(&d0);
        let seed = wts.clone();
        let grads = cx.tape.backward(y, seed);
        let g = grads.get(dv).unwrap();
        for i in 0..16 {
            let h = 1e-6;
            let mut p = d0.clone();
            p.data_mut()[i] += h;
            let mut m = d0.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p).3 - f(&m).3) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8, "{fd} vs {}", g.data()[i]);
        }
    }
}
