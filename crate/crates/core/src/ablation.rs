//! Ablation flags, the nine component-study presets and the suite runner.

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderMode;
use crate::gating::WamVariant;
use crate::objective::LossMode;
use crate::{Error, Result};

/// Switches selecting which parts of the network and training recipe are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_depth: bool,
    pub use_mixer: bool,
    /// Off means MGU gates are fixed at 1.
    pub mgu_gating: bool,
    pub decoder_mode: DecoderMode,
    /// Off means the edge-stream gates `Gr`, `Gd` are fixed at 1.
    pub oegs_gating: bool,
    pub wam_variant: WamVariant,
    pub loss_mode: LossMode,
    pub augmentation: bool,
}

impl Default for AblationFlags {
    /// The full network with the MLP weight analysis and structure loss.
    fn default() -> Self {
        preset("grnet_mlp").expect("built-in preset")
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.use_mixer && !self.use_depth {
            return Err(Error::Config("use_mixer requires use_depth (MGUs balance two modalities)".into()));
        }
        if self.mgu_gating && !self.use_mixer {
            return Err(Error::Config("mgu_gating requires use_mixer".into()));
        }
        if self.decoder_mode == DecoderMode::Full && !self.use_mixer {
            return Err(Error::Config("decoder_mode = full requires use_mixer".into()));
        }
        if self.oegs_gating && self.decoder_mode != DecoderMode::Full {
            return Err(Error::Config("oegs_gating requires decoder_mode = full".into()));
        }
        Ok(())
    }
}

/// Row identifiers of the component study, in table order.
pub const PRESET_NAMES: [&str; 9] = [
    "w/o_depth",
    "en_fpn",
    "en_mix_minus_fpn",
    "en_mix_fpn",
    "en_mix_pf",
    "en_mix_de_minus",
    "en_mix_de",
    "structure_loss",
    "grnet_mlp",
];

/// Resolves a row name (or its 1-based row number) to a canonical name.
pub fn canonical_preset(name: &str) -> Result<&'static str> {
    let trimmed = name.trim();
    if let Ok(row) = trimmed.parse::<usize>() {
        if (1..=PRESET_NAMES.len()).contains(&row) {
            return Ok(PRESET_NAMES[row - 1]);
        }
    }
    let normalized = trimmed.to_ascii_lowercase().replace(['-', ' '], "_");
    let normalized = match normalized.as_str() {
        "w_o_depth" | "wo_depth" | "without_depth" => "w/o_depth".to_string(),
        _ => normalized,
    };
    PRESET_NAMES
        .iter()
        .copied()
        .find(|p| *p == normalized)
        .ok_or_else(|| Error::UnknownPreset {
            name: name.to_string(),
            valid: PRESET_NAMES.join(", "),
        })
}

pub fn preset(name: &str) -> Result<AblationFlags> {
    let base = AblationFlags {
        use_depth: true,
        use_mixer: false,
        mgu_gating: false,
        decoder_mode: DecoderMode::Fpn,
        oegs_gating: false,
        wam_variant: WamVariant::Simple,
        loss_mode: LossMode::Bce,
        augmentation: false,
    };
    let mixed = AblationFlags {
        use_mixer: true,
        mgu_gating: true,
        ..base
    };
    let full = AblationFlags {
        decoder_mode: DecoderMode::Full,
        oegs_gating: true,
        ..mixed
    };
    Ok(match canonical_preset(name)? {
        "w/o_depth" => AblationFlags {
            use_depth: false,
            ..base
        },
        "en_fpn" => base,
        "en_mix_minus_fpn" => AblationFlags {
            mgu_gating: false,
            ..mixed
        },
        "en_mix_fpn" => mixed,
        "en_mix_pf" => AblationFlags {
            decoder_mode: DecoderMode::Pf,
            ..mixed
        },
        "en_mix_de_minus" => AblationFlags {
            oegs_gating: false,
            ..full
        },
        "en_mix_de" => full,
        "structure_loss" => AblationFlags {
            loss_mode: LossMode::Structure,
            ..full
        },
        "grnet_mlp" => AblationFlags {
            loss_mode: LossMode::Structure,
            wam_variant: WamVariant::Mlp,
            ..full
        },
        other => unreachable!("unhandled preset {other}"),
    })
}

/// Outcome of one suite row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub preset: &'static str,
    /// Error text when the row failed.
    pub result: std::result::Result<crate::metrics::MetricReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str = "row,preset,mae,f_beta_max,f_beta_adaptive,f_w_beta,status";

    /// One line per row, in suite order.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let row = PRESET_NAMES.iter().position(|p| *p == r.preset).map_or(0, |i| i + 1);
            match &r.result {
                Ok(m) => writeln!(
                    s,
                    "{row},{},{},{},{},{},ok",
                    r.preset, m.mae, m.f_beta_max, m.f_beta_adaptive, m.f_w_beta
                ),
                Err(e) => writeln!(s, "{row},{},,,,,\"error: {}\"", r.preset, e.replace('"', "'")),
            }
            .unwrap();
        }
        s
    }

    pub fn get(&self, preset: &str) -> Option<&crate::metrics::MetricReport> {
        let name = canonical_preset(preset).ok()?;
        self.rows.iter().find(|r| r.preset == name)?.result.as_ref().ok()
    }
}

/// Trains and evaluates each row with the base configuration's seed, swapping
/// only the ablation flags. Row failures are recorded and the suite continues;
/// unknown row names fail up front.
pub fn run_ablation_suite(
    base_model: &crate::model::ModelConfig,
    base_train: &crate::trainer::TrainConfig,
    train_set: &[crate::datamodel::SamplePair],
    eval_set: &[crate::datamodel::SamplePair],
    rows: &[String],
) -> Result<AblationTable> {
    let names: Vec<&'static str> = rows.iter().map(|r| canonical_preset(r)).collect::<Result<_>>()?;
    let rows = names
        .into_iter()
        .map(|name| {
            let model = crate::model::ModelConfig {
                flags: preset(name).expect("canonical name"),
                ..base_model.clone()
            };
            let result = crate::trainer::train(&model, base_train, train_set)
                .and_then(|out| crate::trainer::evaluate(&out.checkpoint, eval_set))
                .map_err(|e| e.to_string());
            AblationRow { preset: name, result }
        })
        .collect();
    Ok(AblationTable { rows })
}
