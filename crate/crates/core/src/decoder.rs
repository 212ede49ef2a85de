//! Hybrid branch decoder: level fusion, progressive (top-down) branch,
//! parallel (residual) branch, the optional edge guidance stream (OEGS) and
//! the prediction head.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::nn::{Activation, ConvAct, ConvBnAct, Conv2d, Ctx, ParamGroup, Registry};
use crate::{Error, Result};

/// Which decoder branches are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Progressive branch only.
    Fpn,
    /// Progressive and parallel branches.
    Pf,
    /// Progressive, parallel and the edge guidance stream.
    #[default]
    Full,
}

impl DecoderMode {
    pub fn has_parallel(self) -> bool {
        !matches!(self, DecoderMode::Fpn)
    }
    pub fn has_oegs(self) -> bool {
        matches!(self, DecoderMode::Full)
    }
}

const G: ParamGroup = ParamGroup::Other;

fn cbr(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> ConvBnAct {
    ConvBnAct::new(reg, name, cin, cout, 3, 1, Activation::Relu, G)
}

fn same_spatial(cx: &Ctx<'_>, vars: &[Var], what: &str) -> Result<()> {
    let first = cx.tape.shape(vars[0]);
    for v in &vars[1..] {
        let s = cx.tape.shape(*v);
        if (s[0], s[2], s[3]) != (first[0], first[2], first[3]) {
            return Err(Error::Shape(format!("{what}: {first:?} vs {s:?}")));
        }
    }
    Ok(())
}

/// Projects each same-level input, concatenates and convolves to one map.
#[derive(Clone, Debug)]
pub struct FuseLevels {
    projs: Vec<ConvBnAct>,
    merge: ConvBnAct,
}

impl FuseLevels {
    pub fn new(reg: &mut Registry, name: &str, in_channels: &[usize], channels: usize) -> Self {
        let projs = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| cbr(reg, &format!("{name}.proj{i}"), c, channels))
            .collect();
        Self {
            projs,
            merge: cbr(reg, &format!("{name}.merge"), channels * in_channels.len(), channels),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != self.projs.len() {
            return Err(Error::Shape(format!(
                "fuse expects {} inputs, got {}",
                self.projs.len(),
                inputs.len()
            )));
        }
        same_spatial(cx, inputs, "fuse_levels")?;
        let projected: Vec<Var> = self.projs.iter().zip(inputs).map(|(p, x)| p.forward(cx, *x)).collect();
        let cat = cx.tape.concat(&projected);
        Ok(self.merge.forward(cx, cat))
    }
}

/// Top-down branch; produces `F2..F5` and the stride-2 semantic guide `F1`.
#[derive(Clone, Debug)]
pub struct Progressive {
    lateral: [ConvAct; 4],
    smooth: [ConvBnAct; 4],
    guide: ConvBnAct,
}

#[derive(Clone, Copy, Debug)]
pub struct ProgressiveOutputs {
    /// `F2..F5`.
    pub f: [Var; 4],
    /// `F1` (alias `P1`), stride 2.
    pub f1: Var,
}

impl Progressive {
    pub fn new(reg: &mut Registry, name: &str, channels: usize) -> Self {
        let lateral = [2, 3, 4, 5].map(|l| {
            ConvAct::new(reg, &format!("{name}.lateral{l}"), channels, channels, 1, Activation::Identity, G)
        });
        let smooth = [2, 3, 4, 5].map(|l| cbr(reg, &format!("{name}.smooth{l}"), channels, channels));
        Self {
            lateral,
            smooth,
            guide: cbr(reg, &format!("{name}.guide"), channels, channels),
        }
    }

    /// `c` holds `C2..C5` at strides 4, 8, 16, 32.
    pub fn forward(&self, cx: &mut Ctx<'_>, c: [Var; 4]) -> ProgressiveOutputs {
        let lat5 = self.lateral[3].forward(cx, c[3]);
        let mut f = [self.smooth[3].forward(cx, lat5); 4];
        for i in (0..3).rev() {
            let lat = self.lateral[i].forward(cx, c[i]);
            let up = cx.tape.upsample2(f[i + 1]);
            let sum = cx.tape.add(lat, up);
            f[i] = self.smooth[i].forward(cx, sum);
        }
        let g = self.guide.forward(cx, f[0]);
        let f1 = cx.tape.upsample2(g);
        ProgressiveOutputs { f, f1 }
    }
}

/// Encoder low-level features feeding the edge stream.
#[derive(Clone, Copy, Debug)]
pub struct EdgeInputs {
    pub s1_depth: Var,
    pub s2_depth: Var,
    pub s1_rgb: Var,
    pub s2_rgb: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct OegsOutputs {
    pub edge: Var,
    /// Depth edge features after semantic suppression.
    pub ed: Var,
    /// RGB edge features after semantic suppression.
    pub er: Var,
    /// Spatial suppression mask in (0, 1), `[n, 1, h, w]`.
    pub mask: Var,
}

/// Optional edge guidance stream.
#[derive(Clone, Debug)]
pub struct Oegs {
    edge_d: ConvBnAct,
    edge_r: ConvBnAct,
    suppress: ConvAct,
}

impl Oegs {
    pub fn new(reg: &mut Registry, name: &str, s1_channels: usize, s2_channels: usize, channels: usize) -> Self {
        let cin = s1_channels + s2_channels;
        Self {
            edge_d: cbr(reg, &format!("{name}.edge_depth"), cin, channels),
            edge_r: cbr(reg, &format!("{name}.edge_rgb"), cin, channels),
            suppress: ConvAct::new(reg, &format!("{name}.suppress"), channels, 1, 3, Activation::Sigmoid, G),
        }
    }

    /// `edge = Gd·(Ed ⊙ m) + Gr·(Er ⊙ m)` with `m = σ(conv(F1))`; absent
    /// gates act as 1.
    pub fn forward(
        &self,
        cx: &mut Ctx<'_>,
        inp: EdgeInputs,
        f1: Var,
        gr: Option<Var>,
        gd: Option<Var>,
    ) -> Result<OegsOutputs> {
        let [_, _, h, w] = cx.tape.shape(inp.s1_depth);
        same_spatial(cx, &[inp.s1_depth, inp.s1_rgb, f1], "OEGS stride-2 inputs")?;
        same_spatial(cx, &[inp.s2_depth, inp.s2_rgb], "OEGS stride-4 inputs")?;
        let raw_d = {
            let up = cx.tape.resize(inp.s2_depth, h, w);
            let cat = cx.tape.concat(&[up, inp.s1_depth]);
            self.edge_d.forward(cx, cat)
        };
        let raw_r = {
            let up = cx.tape.resize(inp.s2_rgb, h, w);
            let cat = cx.tape.concat(&[up, inp.s1_rgb]);
            self.edge_r.forward(cx, cat)
        };
        let mask = self.suppress.forward(cx, f1);
        let ed = cx.tape.mask(raw_d, mask);
        let er = cx.tape.mask(raw_r, mask);
        let gated_d = match gd {
            Some(g) => cx.tape.scale(ed, g),
            None => ed,
        };
        let gated_r = match gr {
            Some(g) => cx.tape.scale(er, g),
            None => er,
        };
        let edge = cx.tape.add(gated_d, gated_r);
        Ok(OegsOutputs { edge, ed, er, mask })
    }
}

/// Residual branch: every level projected and brought to stride 2, summed.
#[derive(Clone, Debug)]
pub struct Parallel {
    paths: [ConvBnAct; 4],
    p2_edge: Option<ConvBnAct>,
    merge: ConvBnAct,
}

impl Parallel {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, with_edge: bool) -> Self {
        Self {
            paths: [2, 3, 4, 5].map(|l| cbr(reg, &format!("{name}.path{l}"), channels, channels)),
            p2_edge: with_edge.then(|| cbr(reg, &format!("{name}.p2_edge"), 2 * channels, channels)),
            merge: cbr(reg, &format!("{name}.merge"), channels, channels),
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, c: [Var; 4], edge: Option<Var>, out_hw: (usize, usize)) -> Result<Var> {
        let (h, w) = out_hw;
        let mut paths = Vec::with_capacity(4);
        for (i, p) in self.paths.iter().enumerate() {
            let y = p.forward(cx, c[i]);
            paths.push(cx.tape.resize(y, h, w));
        }
        match (&self.p2_edge, edge) {
            (Some(conv), Some(e)) => {
                same_spatial(cx, &[paths[0], e], "parallel P2 edge guidance")?;
                let cat = cx.tape.concat(&[paths[0], e]);
                paths[0] = conv.forward(cx, cat);
            }
            (None, None) => {}
            (Some(_), None) => return Err(Error::Shape("parallel branch expects edge features".into())),
            (None, Some(_)) => return Err(Error::Shape("parallel branch built without edge input".into())),
        }
        let sum = cx.tape.sum_all(&paths);
        Ok(self.merge.forward(cx, sum))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    pub saliency_logits: Var,
    pub edge_logits: Option<Var>,
    /// `C2..C5`.
    pub c: [Var; 4],
    pub progressive: ProgressiveOutputs,
    pub p: Option<Var>,
    pub oegs: Option<OegsOutputs>,
}

/// Inputs to the decoder for one forward pass.
#[derive(Clone, Debug)]
pub struct DecoderInputs {
    /// Per level (2..5), the feature maps to fuse into `C_l`.
    pub levels: [Vec<Var>; 4],
    pub edge: Option<EdgeInputs>,
    pub gr: Option<Var>,
    pub gd: Option<Var>,
    pub out_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Decoder {
    mode: DecoderMode,
    fuse: [FuseLevels; 4],
    progressive: Progressive,
    oegs: Option<Oegs>,
    parallel: Option<Parallel>,
    head: Conv2d,
    edge_head: Option<Conv2d>,
}

impl Decoder {
    /// `level_channels[l]` lists the channel counts fused at level `l + 2`;
    /// `low_channels` are encoder stage-1/2 widths for the edge stream.
    pub fn new(
        reg: &mut Registry,
        mode: DecoderMode,
        level_channels: [Vec<usize>; 4],
        low_channels: (usize, usize),
        channels: usize,
        edge_supervision: bool,
    ) -> Self {
        let fuse = [0, 1, 2, 3].map(|i| FuseLevels::new(reg, &format!("decoder.fuse{}", i + 2), &level_channels[i], channels));
        let progressive = Progressive::new(reg, "decoder.progressive", channels);
        let oegs = mode
            .has_oegs()
            .then(|| Oegs::new(reg, "decoder.oegs", low_channels.0, low_channels.1, channels));
        let parallel = mode
            .has_parallel()
            .then(|| Parallel::new(reg, "decoder.parallel", channels, mode.has_oegs()));
        let head_in = if mode.has_parallel() { 2 * channels } else { channels };
        let head = Conv2d::new(reg, "decoder.head", head_in, 1, 3, 1, true, G);
        let edge_head = (mode.has_oegs() && edge_supervision)
            .then(|| Conv2d::new(reg, "decoder.edge_head", channels, 1, 3, 1, true, G));
        Self {
            mode,
            fuse,
            progressive,
            oegs,
            parallel,
            head,
            edge_head,
        }
    }

    pub fn mode(&self) -> DecoderMode {
        self.mode
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, inp: &DecoderInputs) -> Result<DecoderOutputs> {
        let mut c = Vec::with_capacity(4);
        for (f, xs) in self.fuse.iter().zip(&inp.levels) {
            c.push(f.forward(cx, xs)?);
        }
        let c: [Var; 4] = [c[0], c[1], c[2], c[3]];
        let progressive = self.progressive.forward(cx, c);
        let [_, _, h2, w2] = cx.tape.shape(progressive.f1);

        let oegs = match &self.oegs {
            Some(o) => {
                let edge_in = inp
                    .edge
                    .ok_or_else(|| Error::Shape("edge stream needs encoder stage-1/2 features".into()))?;
                Some(o.forward(cx, edge_in, progressive.f1, inp.gr, inp.gd)?)
            }
            None => None,
        };
        let p = match &self.parallel {
            Some(par) => Some(par.forward(cx, c, oegs.map(|o| o.edge), (h2, w2))?),
            None => None,
        };
        let f2_up = cx.tape.resize(progressive.f[0], h2, w2);
        let head_in = match p {
            Some(p) => cx.tape.concat(&[f2_up, p]),
            None => f2_up,
        };
        let (oh, ow) = inp.out_hw;
        let logits2 = self.head.forward(cx, head_in);
        let saliency_logits = cx.tape.resize(logits2, oh, ow);
        let edge_logits = match (&self.edge_head, &oegs) {
            (Some(head), Some(o)) => {
                let e = head.forward(cx, o.edge);
                Some(cx.tape.resize(e, oh, ow))
            }
            _ => None,
        };
        Ok(DecoderOutputs {
            saliency_logits,
            edge_logits,
            c,
            progressive,
            p,
            oegs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn fuse_level2_shape() {
        let mut reg = Registry::new();
        let f = FuseLevels::new(&mut reg, "f", &[16, 16], 64);
        let store = init_params(reg.specs(), 0);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let a = cx.input(Tensor::full([1, 16, 88, 88], 0.2));
        let b = cx.input(Tensor::full([1, 16, 88, 88], 0.1));
        let c = f.forward(&mut cx, &[a, b]).unwrap();
        assert_eq!(cx.tape.shape(c), [1, 64, 88, 88]);
        let bad = cx.input(Tensor::zeros([1, 16, 44, 44]));
        assert!(matches!(f.forward(&mut cx, &[a, bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn fuse_is_not_symmetric() {
        let mut reg = Registry::new();
        let f = FuseLevels::new(&mut reg, "f", &[4, 4], 8);
        let specs = reg.into_specs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (av, bv) = (rt(&mut rng, [2, 4, 6, 6]), rt(&mut rng, [2, 4, 6, 6]));
        let mut differ = 0;
        for seed in 0..10 {
            let store = init_params(&specs, seed);
            let mut cx = Ctx::new(&store, Mode::Train);
            let (a, b) = (cx.input(av.clone()), cx.input(bv.clone()));
            let ab = f.forward(&mut cx, &[a, b]).unwrap();
            let ba = f.forward(&mut cx, &[b, a]).unwrap();
            if cx.value(ab) != cx.value(ba) {
                differ += 1;
            }
        }
        assert_eq!(differ, 10);
    }

    #[test]
    fn fuse_zero_inputs_zero_output() {
        let mut reg = Registry::new();
        let f = FuseLevels::new(&mut reg, "f", &[4, 4], 8);
        let store = init_params(reg.specs(), 0);
        let mut cx = Ctx::new(&store, Mode::Train);
        let a = cx.input(Tensor::zeros([2, 4, 6, 6]));
        let c = f.forward(&mut cx, &[a, a]).unwrap();
        assert!(cx.value(c).data().iter().all(|v| *v == 0.0));
    }

    fn levels(rng: &mut ChaCha8Rng, ch: usize, s: usize) -> [Tensor; 4] {
        [rt(rng, [1, ch, s, s]), rt(rng, [1, ch, s / 2, s / 2]), rt(rng, [1, ch, s / 4, s / 4]), rt(rng, [1, ch, s / 8, s / 8])]
    }

    fn bind4(cx: &mut Ctx<'_>, t: &[Tensor; 4]) -> [Var; 4] {
        [cx.input(t[0].clone()), cx.input(t[1].clone()), cx.input(t[2].clone()), cx.input(t[3].clone())]
    }

    #[test]
    fn progressive_strides_and_flow() {
        let mut reg = Registry::new();
        let p = Progressive::new(&mut reg, "p", 8);
        let store = init_params(reg.specs(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = levels(&mut rng, 8, 88);
        let run = |c: &[Tensor; 4]| {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let vars = bind4(&mut cx, c);
            let out = p.forward(&mut cx, vars);
            (cx.tape.shape(out.f[0]), cx.tape.shape(out.f1), cx.value(out.f[0]).clone())
        };
        let (s2, s1, base) = run(&c);
        assert_eq!(s2, [1, 8, 88, 88]);
        assert_eq!(s1, [1, 8, 176, 176]);
        let mut c5 = c.clone();
        c5[3] = c5[3].map(|v| v + 1.0);
        assert!(run(&c5).2 != base);
    }

    #[test]
    fn progressive_pure_function_of_c5_when_laterals_zeroed() {
        let mut reg = Registry::new();
        let p = Progressive::new(&mut reg, "p", 4);
        let mut store = init_params(reg.specs(), 4);
        for l in 2..5 {
            store.fill_prefix(&format!("p.lateral{l}."), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = levels(&mut rng, 4, 16);
        let f2 = |c: &[Tensor; 4]| {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let vars = bind4(&mut cx, c);
            let out = p.forward(&mut cx, vars).f[0];
            cx.value(out).clone()
        };
        let base = f2(&c);
        let mut other = levels(&mut rng, 4, 16);
        other[3] = c[3].clone();
        assert_eq!(f2(&other), base);
        other[3] = other[3].map(|v| v * 0.5);
        assert!(f2(&other) != base);
    }

    fn edge_inputs(cx: &mut Ctx<'_>, rng: &mut ChaCha8Rng, s1: usize) -> EdgeInputs {
        EdgeInputs {
            s1_depth: cx.input(rt(rng, [1, 4, s1, s1])),
            s2_depth: cx.input(rt(rng, [1, 8, s1 / 2, s1 / 2])),
            s1_rgb: cx.input(rt(rng, [1, 4, s1, s1])),
            s2_rgb: cx.input(rt(rng, [1, 8, s1 / 2, s1 / 2])),
        }
    }

    fn oegs_setup() -> (Oegs, ParamStore) {
        let mut reg = Registry::new();
        let o = Oegs::new(&mut reg, "o", 4, 8, 16);
        (o, init_params(reg.specs(), 1))
    }

    #[test]
    fn oegs_gate_annihilation_and_shape() {
        let (o, store) = oegs_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let inp = edge_inputs(&mut cx, &mut rng, 176);
        let f1 = cx.input(rt(&mut rng, [1, 16, 176, 176]));
        let zero = cx.input(Tensor::zeros([1, 1, 1, 1]));
        let out = o.forward(&mut cx, inp, f1, Some(zero), Some(zero)).unwrap();
        assert_eq!(cx.tape.shape(out.edge), [1, 16, 176, 176]);
        assert!(cx.value(out.edge).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oegs_semantic_suppression() {
        let (o, mut store) = oegs_setup();
        // mask → sigmoid(-40) everywhere
        store.fill_prefix("o.suppress.weight", 0.0);
        store.fill_prefix("o.suppress.bias", -40.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let inp = edge_inputs(&mut cx, &mut rng, 16);
        let f1 = cx.input(rt(&mut rng, [1, 16, 16, 16]));
        let out = o.forward(&mut cx, inp, f1, None, None).unwrap();
        assert!(cx.value(out.edge).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn oegs_dominance_is_scale_invariant() {
        let (o, store) = oegs_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let inp = edge_inputs(&mut cx, &mut rng, 16);
        let f1 = cx.input(rt(&mut rng, [1, 16, 16, 16]));
        let gr = cx.input(Tensor::full([1, 1, 1, 1], 0.3));
        let gd = cx.input(Tensor::full([1, 1, 1, 1], 0.6));
        let out = o.forward(&mut cx, inp, f1, Some(gr), Some(gd)).unwrap();
        let ed = cx.value(out.ed).data().to_vec();
        let er = cx.value(out.er).data().to_vec();
        for k in [0.5, 2.0, 17.0] {
            for (d, r) in ed.iter().zip(&er) {
                let before = 0.6 * d >= 0.3 * r;
                let after = k * 0.6 * d >= k * 0.3 * r;
                assert_eq!(before, after);
            }
        }
    }

    #[test]
    fn parallel_shapes_and_ablation() {
        let mut reg = Registry::new();
        let with = Parallel::new(&mut reg, "pe", 8, true);
        let without = Parallel::new(&mut reg, "pn", 8, false);
        let store = init_params(reg.specs(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = levels(&mut rng, 8, 88);
        let mut cx = Ctx::new(&store, Mode::Eval);
        let vars = bind4(&mut cx, &c);
        let edge = cx.input(rt(&mut rng, [1, 8, 176, 176]));
        let p = with.forward(&mut cx, vars, Some(edge), (176, 176)).unwrap();
        assert_eq!(cx.tape.shape(p), [1, 8, 176, 176]);
        let q = without.forward(&mut cx, vars, None, (176, 176)).unwrap();
        assert_eq!(cx.tape.shape(q), [1, 8, 176, 176]);
        assert!(without.forward(&mut cx, vars, Some(edge), (176, 176)).is_err());
    }

    #[test]
    fn parallel_depends_only_on_c3_when_other_paths_zeroed() {
        let mut reg = Registry::new();
        let par = Parallel::new(&mut reg, "p", 4, true);
        let mut store = init_params(reg.specs(), 2);
        for prefix in ["p.path2.", "p.path4.", "p.path5.", "p.p2_edge."] {
            store.fill_prefix(&format!("{prefix}conv"), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = levels(&mut rng, 4, 16);
        let edge = rt(&mut rng, [1, 4, 32, 32]);
        let run = |c: &[Tensor; 4], e: &Tensor| {
            let mut cx = Ctx::new(&store, Mode::Eval);
            let vars = bind4(&mut cx, c);
            let ev = cx.input(e.clone());
            let p = par.forward(&mut cx, vars, Some(ev), (32, 32)).unwrap();
            cx.value(p).clone()
        };
        let base = run(&c, &edge);
        let mut other = levels(&mut rng, 4, 16);
        other[1] = c[1].clone();
        assert_eq!(run(&other, &rt(&mut rng, [1, 4, 32, 32])), base);
        other[1] = other[1].map(|v| -v);
        assert!(run(&other, &edge) != base);
    }
}
