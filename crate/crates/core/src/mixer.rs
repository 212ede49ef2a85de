//! Recoding mixers: backbone stages 2–5 re-encoding the MGU outputs with
//! step-by-step insertion of the level-2/3/4 balanced features.

use crate::autograd::Var;
use crate::backbone::{Stage, StagePlan};
use crate::nn::{Activation, ConvAct, Ctx, ParamGroup, Registry};
use crate::{Error, Result};

/// Mixer outputs at strides 4, 8, 16, 32.
#[derive(Clone, Copy, Debug)]
pub struct MixerOutputs {
    pub levels: [Var; 4],
}

impl MixerOutputs {
    /// Output for backbone stage `l` in `2..=5`.
    pub fn stage(&self, l: usize) -> Var {
        self.levels[l - 2]
    }
}

#[derive(Clone, Debug)]
pub struct Mixer {
    insert: [ConvAct; 3],
    stages: [Stage; 4],
}

impl Mixer {
    /// `in_channels` is the channel count of the MGU outputs.
    pub fn new(reg: &mut Registry, name: &str, plan: &StagePlan, in_channels: usize) -> Self {
        let w = plan.stage_widths;
        let b = plan.blocks_per_stage;
        let g = ParamGroup::Other;
        let bb = ParamGroup::Backbone;
        let insert = [
            ConvAct::new(reg, &format!("{name}.insert1"), in_channels, w[0], 3, Activation::Relu, g),
            ConvAct::new(reg, &format!("{name}.insert2"), in_channels, w[1], 3, Activation::Relu, g),
            ConvAct::new(reg, &format!("{name}.insert3"), in_channels, w[2], 3, Activation::Relu, g),
        ];
        let stages = [
            Stage::new(reg, &format!("{name}.stage2"), w[0], w[1], b[1], 1, bb),
            Stage::new(reg, &format!("{name}.stage3"), w[1], w[2], b[2], 2, bb),
            Stage::new(reg, &format!("{name}.stage4"), w[2], w[3], b[3], 2, bb),
            Stage::new(reg, &format!("{name}.stage5"), w[3], w[4], b[4], 2, bb),
        ];
        Self { insert, stages }
    }

    /// `b1`, `b2`, `b3` are the balanced features of levels 2, 3, 4.
    pub fn mix(&self, cx: &mut Ctx<'_>, b1: Var, b2: Var, b3: Var) -> Result<MixerOutputs> {
        let s1 = cx.tape.shape(b1);
        let s2 = cx.tape.shape(b2);
        let s3 = cx.tape.shape(b3);
        if s1[2] != 2 * s2[2] || s1[3] != 2 * s2[3] || s2[2] != 2 * s3[2] || s2[3] != 2 * s3[3] {
            return Err(Error::Shape(format!(
                "mixer inputs must be at strides 4/8/16: {s1:?}, {s2:?}, {s3:?}"
            )));
        }
        let x = self.insert[0].forward(cx, b1);
        let x2 = self.stages[0].forward(cx, x);

        let up2 = cx.tape.upsample2(b2);
        let ins2 = self.insert[1].forward(cx, up2);
        let sum3 = cx.tape.add(ins2, x2);
        let x3 = self.stages[1].forward(cx, sum3);

        let up3 = cx.tape.upsample2(b3);
        let ins3 = self.insert[2].forward(cx, up3);
        let sum4 = cx.tape.add(ins3, x3);
        let x4 = self.stages[2].forward(cx, sum4);

        let x5 = self.stages[3].forward(cx, x4);
        Ok(MixerOutputs {
            levels: [x2, x3, x4, x5],
        })
    }
}

/// Mixer-A (depth-led features) and Mixer-B (RGB-led features).
#[derive(Clone, Debug)]
pub struct MixerPair {
    pub a: Mixer,
    pub b: Mixer,
}

impl MixerPair {
    pub fn new(reg: &mut Registry, plan: &StagePlan, in_channels: usize) -> Self {
        Self {
            a: Mixer::new(reg, "mixer_a", plan, in_channels),
            b: Mixer::new(reg, "mixer_b", plan, in_channels),
        }
    }

    pub fn mix_pair(&self, cx: &mut Ctx<'_>, a: [Var; 3], b: [Var; 3]) -> Result<(MixerOutputs, MixerOutputs)> {
        let oa = self.a.mix(cx, a[0], a[1], a[2])?;
        let ob = self.b.mix(cx, b[0], b[1], b[2])?;
        Ok((oa, ob))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_inputs(seed: u64, c: usize, s: usize) -> [Tensor; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |h: usize| Tensor::from_fn([2, c, h, h], |_| rng.gen_range(0.0..1.0));
        [t(s), t(s / 2), t(s / 4)]
    }

    fn setup(plan: &StagePlan, seed: u64) -> (Mixer, ParamStore) {
        let mut reg = Registry::new();
        let m = Mixer::new(&mut reg, "mix", plan, 4);
        (m, init_params(reg.specs(), seed))
    }

    #[test]
    fn shapes_at_352() {
        let (m, store) = setup(&StagePlan::desk(), 0);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let b1 = cx.input(Tensor::full([1, 4, 88, 88], 0.1));
        let b2 = cx.input(Tensor::full([1, 4, 44, 44], 0.1));
        let b3 = cx.input(Tensor::full([1, 4, 22, 22], 0.1));
        let out = m.mix(&mut cx, b1, b2, b3).unwrap();
        let shapes: Vec<[usize; 4]> = out.levels.iter().map(|v| cx.tape.shape(*v)).collect();
        assert_eq!(
            shapes,
            vec![[1, 16, 88, 88], [1, 32, 44, 44], [1, 64, 22, 22], [1, 128, 11, 11]]
        );
    }

    #[test]
    fn stride_mismatch_is_rejected() {
        let (m, store) = setup(&StagePlan::tiny(), 0);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let b1 = cx.input(Tensor::zeros([1, 4, 16, 16]));
        let b2 = cx.input(Tensor::zeros([1, 4, 16, 16]));
        let b3 = cx.input(Tensor::zeros([1, 4, 4, 4]));
        assert!(matches!(m.mix(&mut cx, b1, b2, b3), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_insertion_vanishes() {
        let (m, mut store) = setup(&StagePlan::tiny(), 3);
        store.fill_prefix("mix.insert2", 0.0);
        let [b1v, _, _] = rand_inputs(1, 4, 16);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let b1 = cx.input(b1v);
        let b2 = cx.input(Tensor::zeros([2, 4, 8, 8]));
        let b3 = cx.input(Tensor::zeros([2, 4, 4, 4]));
        let out = m.mix(&mut cx, b1, b2, b3).unwrap();
        let direct = m.stages[1].forward(&mut cx, out.stage(2));
        assert_eq!(cx.value(direct), cx.value(out.stage(3)));
    }

    #[test]
    fn b3_perturbation_reaches_stage4_and_5_only() {
        let (m, store) = setup(&StagePlan::tiny(), 3);
        let [b1v, b2v, b3v] = rand_inputs(2, 4, 16);
        let run = |b3v: &Tensor| {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let (b1, b2, b3) = (cx.input(b1v.clone()), cx.input(b2v.clone()), cx.input(b3v.clone()));
            let out = m.mix(&mut cx, b1, b2, b3).unwrap();
            out.levels.map(|v| cx.value(v).clone())
        };
        let base = run(&b3v);
        let pert = run(&b3v.map(|v| v + 0.5));
        assert_eq!(base[0], pert[0]);
        assert_eq!(base[1], pert[1]);
        assert!(base[2] != pert[2]);
        assert!(base[3] != pert[3]);
        assert!(store.names().all(|n| !n.contains("insert4")));
    }

    #[test]
    fn pair_identical_and_independent() {
        let mut reg = Registry::new();
        let pair = MixerPair::new(&mut reg, &StagePlan::tiny(), 4);
        let specs = reg.into_specs();
        let [b1, b2, b3] = rand_inputs(4, 4, 16);

        // same params copied into both mixers → same outputs for same inputs
        let mut store = init_params(&specs, 1);
        let a_entries: Vec<(String, crate::nn::Param)> = store
            .iter()
            .filter(|(n, _)| n.starts_with("mixer_a"))
            .map(|(n, p)| (n.replacen("mixer_a", "mixer_b", 1), p.clone()))
            .collect();
        for (n, p) in a_entries {
            store.insert(n, p);
        }
        let mut cx = Ctx::new(&store, Mode::Eval);
        let ins = [cx.input(b1.clone()), cx.input(b2.clone()), cx.input(b3.clone())];
        let (oa, ob) = pair.mix_pair(&mut cx, ins, ins).unwrap();
        assert_eq!(oa.levels.len(), 4);
        for l in 0..4 {
            assert_eq!(cx.value(oa.levels[l]), cx.value(ob.levels[l]));
        }
        drop(cx);

        let mut differ = 0;
        for seed in 0..10 {
            let store = init_params(&specs, 50 + seed);
            let mut cx = Ctx::new(&store, Mode::Eval);
            let ins = [cx.input(b1.clone()), cx.input(b2.clone()), cx.input(b3.clone())];
            let (oa, ob) = pair.mix_pair(&mut cx, ins, ins).unwrap();
            if cx.value(oa.stage(5)) != cx.value(ob.stage(5)) {
                differ += 1;
            }
        }
        assert_eq!(differ, 10);
    }

    #[test]
    fn gradient_wrt_b2_matches_finite_differences() {
        let (m, store) = setup(&StagePlan::tiny(), 9);
        let [b1v, b2v, b3v] = rand_inputs(8, 4, 8);
        let f = |b2v: &Tensor| -> f64 {
            let mut cx = Ctx::new(&store, Mode::Train);
            let (b1, b2, b3) = (cx.input(b1v.clone()), cx.input(b2v.clone()), cx.input(b3v.clone()));
            let out = m.mix(&mut cx, b1, b2, b3).unwrap();
            out.levels.iter().map(|v| cx.value(*v).sum()).sum()
        };
        let mut cx = Ctx::new(&store, Mode::Train);
        let b1 = cx.input(b1v.clone());
        let b2 = cx.tape.leaf(b2v.clone(), true);
        let b3 = cx.input(b3v.clone());
        let out = m.mix(&mut cx, b1, b2, b3).unwrap();
        let seeds = out.levels.iter().map(|v| (*v, Tensor::full(cx.tape.shape(*v), 1.0))).collect();
        let grad = cx.tape.backward_multi(seeds).get(b2).unwrap().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let i = rng.gen_range(0..b2v.len());
            let h = 1e-5;
            let mut p = b2v.clone();
            p.data_mut()[i] += h;
            let mut q = b2v.clone();
            q.data_mut()[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel <= 1e-3, "idx {i}: analytic {a} fd {fd}");
        }
    }
}
