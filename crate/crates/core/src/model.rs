//! Full network assembly: encoders → MGUs → mixers → hybrid decoder.

use serde::{Deserialize, Serialize};

use crate::ablation::AblationFlags;
use crate::autograd::Var;
use crate::backbone::{check_input_size, depth_to_3ch, Encoder, Projection, StagePlan};
use crate::decoder::{Decoder, DecoderInputs, DecoderMode, DecoderOutputs, EdgeInputs};
use crate::gating::{EncoderWam, Mgu, SemanticMerge};
use crate::mixer::MixerPair;
use crate::nn::{init_params, Activation, Ctx, Mode, ParamSpec, ParamStore, Registry};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Architecture configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub plan: StagePlan,
    /// Width of projections, gates and decoder features (64 in the full model).
    pub feat_channels: usize,
    /// Square input resolution used for training and inference.
    pub input_size: usize,
    pub flags: AblationFlags,
    /// Read the MGU outputs as `Cat(addend, addend)` instead of a sum.
    pub concat_addends: bool,
    /// Emit edge logits and supervise them.
    pub edge_supervision: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Full-width model at 352×352.
    pub fn paper() -> Self {
        Self {
            plan: StagePlan::resnet50(),
            feat_channels: 64,
            input_size: 352,
            flags: AblationFlags::default(),
            concat_addends: false,
            edge_supervision: false,
        }
    }

    /// Desk-scale model: small plan, narrow decoder, 64×64 inputs.
    pub fn desk() -> Self {
        Self {
            plan: StagePlan::desk(),
            feat_channels: 16,
            input_size: 64,
            ..Self::paper()
        }
    }

    /// Smallest configuration, for gradient checks and quick runs.
    pub fn tiny() -> Self {
        Self {
            plan: StagePlan::tiny(),
            feat_channels: 8,
            input_size: 64,
            ..Self::paper()
        }
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        self.flags.validate()?;
        check_input_size(self.input_size, self.input_size)
            .map_err(|e| Error::Config(format!("input_size: {e}")))?;
        if self.feat_channels == 0 {
            return Err(Error::Config("feat_channels must be >= 1".into()));
        }
        if self.edge_supervision && self.flags.decoder_mode != DecoderMode::Full {
            return Err(Error::Config("edge_supervision requires decoder_mode = full".into()));
        }
        Ok(())
    }
}

/// Per-pass gate handles on the tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct GateVars {
    /// `Ga1..Ga3` (levels 2, 3, 4).
    pub ga: Option<[Var; 3]>,
    pub gb: Option<[Var; 3]>,
    pub gr: Option<Var>,
    pub gd: Option<Var>,
}

/// Gate values of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSet {
    pub ga: [f64; 3],
    pub gb: [f64; 3],
    pub gr: Option<f64>,
    pub gd: Option<f64>,
}

impl GateSet {
    pub fn all(&self) -> Vec<f64> {
        let mut v = self.ga.to_vec();
        v.extend(self.gb);
        v.extend(self.gr);
        v.extend(self.gd);
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    pub edge_logits: Option<Var>,
    pub gates: GateVars,
    pub decoder: DecoderOutputs,
}

impl ModelOutput {
    /// Reads per-sample gate values; `None` when the model is ungated.
    pub fn gate_sets(&self, cx: &Ctx<'_>) -> Option<Vec<GateSet>> {
        let (ga, gb) = (self.gates.ga?, self.gates.gb?);
        let n = cx.tape.shape(self.logits)[0];
        let read = |v: Var, s: usize| cx.value(v).data()[s];
        Some(
            (0..n)
                .map(|s| GateSet {
                    ga: ga.map(|v| read(v, s)),
                    gb: gb.map(|v| read(v, s)),
                    gr: self.gates.gr.map(|v| read(v, s)),
                    gd: self.gates.gd.map(|v| read(v, s)),
                })
                .collect(),
        )
    }
}

struct Modality {
    encoder: Encoder,
    proj: Option<[Projection; 4]>,
    semantic: Option<SemanticMerge>,
}

struct Encoded {
    stages: [Var; 5],
    /// Projected levels 2..5 and the semantic feature (mixer path only).
    projected: Option<([Var; 4], Var)>,
}

impl Modality {
    fn new(reg: &mut Registry, name: &str, cfg: &ModelConfig) -> Self {
        let encoder = Encoder::new(reg, &format!("enc_{name}"), &cfg.plan);
        let f = cfg.feat_channels;
        let w = cfg.plan.stage_widths;
        let (proj, semantic) = if cfg.flags.use_mixer {
            let proj = [1, 2, 3, 4].map(|i| {
                Projection::new(reg, &format!("proj_{name}{}", i + 1), w[i], f, Activation::Relu)
            });
            (Some(proj), Some(SemanticMerge::new(reg, &format!("semantic_{name}"), f)))
        } else {
            (None, None)
        };
        Self {
            encoder,
            proj,
            semantic,
        }
    }

    fn encode(&self, cx: &mut Ctx<'_>, image: Var) -> Result<Encoded> {
        let feats = self.encoder.encode(cx, image)?;
        let projected = match (&self.proj, &self.semantic) {
            (Some(proj), Some(sem)) => {
                let p = [0, 1, 2, 3].map(|i| proj[i].forward(cx, feats.stages[i + 1]));
                let s = sem.forward(cx, p[2], p[3])?;
                Some((p, s))
            }
            _ => None,
        };
        Ok(Encoded {
            stages: feats.stages,
            projected,
        })
    }
}

/// The gated recoding network.
pub struct Grnet {
    config: ModelConfig,
    rgb: Modality,
    depth: Option<Modality>,
    mgus: Option<[Mgu; 3]>,
    encoder_wam: Option<EncoderWam>,
    mixers: Option<MixerPair>,
    decoder: Decoder,
    specs: Vec<ParamSpec>,
}

impl std::fmt::Debug for Grnet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Grnet")
            .field("config", &self.config)
            .field("params", &self.specs.len())
            .finish()
    }
}

impl Grnet {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let flags = config.flags;
        let f = config.feat_channels;
        let w = config.plan.stage_widths;
        let mut reg = Registry::new();

        let rgb = Modality::new(&mut reg, "rgb", config);
        let depth = flags.use_depth.then(|| Modality::new(&mut reg, "depth", config));

        let (mgus, encoder_wam, mixers, level_channels) = if flags.use_mixer {
            let mgus = [2, 3, 4].map(|l| {
                Mgu::new(
                    &mut reg,
                    &format!("mgu{}", l - 1),
                    f,
                    flags.wam_variant,
                    flags.mgu_gating,
                    config.concat_addends,
                )
            });
            let enc_wam = (flags.decoder_mode.has_oegs() && flags.oegs_gating)
                .then(|| EncoderWam::new(&mut reg, "encoder_wam", f, flags.wam_variant));
            let mix_in = mgus[0].out_channels();
            let mixers = MixerPair::new(&mut reg, &config.plan, mix_in);
            let lc = [1, 2, 3, 4].map(|i| vec![w[i], w[i]]);
            (Some(mgus), enc_wam, Some(mixers), lc)
        } else {
            let per = if flags.use_depth { 2 } else { 1 };
            let lc = [1, 2, 3, 4].map(|i| vec![w[i]; per]);
            (None, None, None, lc)
        };

        let decoder = Decoder::new(
            &mut reg,
            flags.decoder_mode,
            level_channels,
            (w[0], w[1]),
            f,
            config.edge_supervision,
        );
        Ok(Self {
            config: config.clone(),
            rgb,
            depth,
            mgus,
            encoder_wam,
            mixers,
            decoder,
            specs: reg.into_specs(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        init_params(&self.specs, seed)
    }

    pub fn is_gated(&self) -> bool {
        self.mgus.as_ref().is_some_and(|m| m[0].is_gated())
    }

    /// Checks that `store` holds exactly this model's parameters.
    pub fn validate_params(&self, store: &ParamStore) -> Result<()> {
        for spec in &self.specs {
            match store.get(&spec.name) {
                None => return Err(Error::CheckpointMismatch(format!("missing parameter {}", spec.name))),
                Some(p) if p.value.shape() != spec.shape => {
                    return Err(Error::CheckpointMismatch(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        p.value.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if store.len() != self.specs.len() {
            let extra = store
                .names()
                .find(|n| !self.specs.iter().any(|s| &s.name == *n))
                .cloned()
                .unwrap_or_default();
            return Err(Error::CheckpointMismatch(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Forward pass. `rgb` is `[n,3,s,s]`, `depth` is `[n,1,s,s]`.
    pub fn forward(&self, cx: &mut Ctx<'_>, rgb: Var, depth: Var) -> Result<ModelOutput> {
        let [n, c, h, w] = cx.tape.shape(rgb);
        let ds = cx.tape.shape(depth);
        if c != 3 || ds != [n, 1, h, w] {
            return Err(Error::Shape(format!("rgb {:?} / depth {ds:?}", cx.tape.shape(rgb))));
        }
        check_input_size(h, w)?;

        let enc_r = self.rgb.encode(cx, rgb)?;
        let enc_d = match &self.depth {
            Some(m) => {
                let d3 = depth_to_3ch(cx, depth);
                Some(m.encode(cx, d3)?)
            }
            None => None,
        };

        let mut gates = GateVars::default();
        let levels: [Vec<Var>; 4] = match (&self.mgus, &self.mixers, &enc_d) {
            (Some(mgus), Some(mixers), Some(enc_d)) => {
                let (dp, dsem) = enc_d.projected.expect("mixer path projects depth");
                let (rp, rsem) = enc_r.projected.expect("mixer path projects rgb");
                let mut a = Vec::with_capacity(3);
                let mut b = Vec::with_capacity(3);
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                for (i, mgu) in mgus.iter().enumerate() {
                    let out = mgu.fuse(cx, dp[i], rp[i], dsem, rsem)?;
                    a.push(out.a);
                    b.push(out.b);
                    ga.extend(out.ga);
                    gb.extend(out.gb);
                }
                if ga.len() == 3 {
                    gates.ga = Some([ga[0], ga[1], ga[2]]);
                    gates.gb = Some([gb[0], gb[1], gb[2]]);
                }
                if let Some(ew) = &self.encoder_wam {
                    let (gr, gd) = ew.forward(cx, dp[0], rp[0], dsem, rsem)?;
                    gates.gr = Some(gr);
                    gates.gd = Some(gd);
                }
                let (ma, mb) = mixers.mix_pair(cx, [a[0], a[1], a[2]], [b[0], b[1], b[2]])?;
                [0, 1, 2, 3].map(|i| vec![ma.levels[i], mb.levels[i]])
            }
            _ => [1, 2, 3, 4].map(|i| {
                let mut v = vec![enc_r.stages[i]];
                if let Some(d) = &enc_d {
                    v.push(d.stages[i]);
                }
                v
            }),
        };

        let edge = match (&enc_d, self.decoder.mode().has_oegs()) {
            (Some(d), true) => Some(EdgeInputs {
                s1_depth: d.stages[0],
                s2_depth: d.stages[1],
                s1_rgb: enc_r.stages[0],
                s2_rgb: enc_r.stages[1],
            }),
            _ => None,
        };
        let dec = self.decoder.forward(
            cx,
            &DecoderInputs {
                levels,
                edge,
                gr: gates.gr,
                gd: gates.gd,
                out_hw: (h, w),
            },
        )?;
        Ok(ModelOutput {
            logits: dec.saliency_logits,
            edge_logits: dec.edge_logits,
            gates,
            decoder: dec,
        })
    }

    /// Eval-mode inference on a batch; returns probabilities `[n,1,s,s]` and
    /// gate values when the model is gated.
    pub fn predict(&self, store: &ParamStore, rgb: &Tensor, depth: &Tensor) -> Result<Prediction> {
        let mut cx = Ctx::new(store, Mode::Eval);
        let r = cx.input(rgb.clone());
        let d = cx.input(depth.clone());
        let out = self.forward(&mut cx, r, d)?;
        let probs = cx.value(out.logits).map(crate::objective::sigmoid);
        Ok(Prediction {
            logits: cx.value(out.logits).clone(),
            probs,
            gates: out.gate_sets(&cx),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub gates: Option<Vec<GateSet>>,
}
