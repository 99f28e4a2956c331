//! One trained model per setting of an ablation axis.

use datagen::DatasetBundle;
use fatformer::{ConditionMode, Interaction, LossMode, PromptMode};
use serde::Serialize;

use crate::evaluate::EvalReport;
use crate::train::train;
use crate::{HarnessError, Result, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Image and frequency branches of the adapter.
    Branches,
    Interaction,
    LossMode,
    /// Prompt mode crossed with condition mode.
    Prompt,
    /// Adapters and alignment switched on and off together.
    Components,
    AdapterCount,
    ContextCount,
    KernelSize,
    None,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::Branches,
        Axis::Interaction,
        Axis::LossMode,
        Axis::Prompt,
        Axis::Components,
        Axis::AdapterCount,
        Axis::ContextCount,
        Axis::KernelSize,
        Axis::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Branches => "branches",
            Axis::Interaction => "interaction",
            Axis::LossMode => "loss-mode",
            Axis::Prompt => "prompt",
            Axis::Components => "components",
            Axis::AdapterCount => "adapter-count",
            Axis::ContextCount => "context-count",
            Axis::KernelSize => "kernel-size",
            Axis::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
            HarnessError::Config(format!(
                "unknown ablation axis {s}; expected one of {}",
                names.join(", ")
            ))
        })
    }

    /// Row labels and configs, in table order.
    pub fn settings(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let row = |label: &str, c: TrainConfig| (label.to_string(), c);
        match self {
            Axis::Branches => vec![
                row("image", with(&|c| c.freq_branch = false)),
                row("frequency", with(&|c| c.image_branch = false)),
                row(
                    "image+frequency",
                    with(&|c| {
                        c.image_branch = true;
                        c.freq_branch = true;
                    }),
                ),
            ],
            Axis::Interaction => [Interaction::Inter, Interaction::Intra, Interaction::Both]
                .into_iter()
                .map(|m| (format!("{m:?}").to_lowercase(), with(&|c| c.interaction = m)))
                .collect(),
            Axis::LossMode => [
                ("linear_probe", LossMode::LinearProbe),
                ("contra", LossMode::Contrastive),
                ("aug_contra", LossMode::AugmentedContrastive),
            ]
            .into_iter()
            .map(|(l, m)| row(l, with(&|c| c.loss_mode = m)))
            .collect(),
            Axis::Prompt => [
                ("fixed+cls", PromptMode::Fixed, ConditionMode::Cls),
                ("fixed+patch", PromptMode::Fixed, ConditionMode::Patch),
                ("auto+cls", PromptMode::Auto, ConditionMode::Cls),
                ("auto+patch", PromptMode::Auto, ConditionMode::Patch),
            ]
            .into_iter()
            .map(|(l, p, k)| {
                row(
                    l,
                    with(&|c| {
                        c.prompt_mode = p;
                        c.condition_mode = k;
                    }),
                )
            })
            .collect(),
            Axis::Components => vec![
                row(
                    "none",
                    with(&|c| {
                        c.adapters = 0;
                        c.loss_mode = LossMode::Contrastive;
                        c.prompt_mode = PromptMode::Fixed;
                        c.epochs = 0;
                    }),
                ),
                row("adapters", with(&|c| c.loss_mode = LossMode::LinearProbe)),
                row(
                    "alignment",
                    with(&|c| {
                        c.adapters = 0;
                        c.loss_mode = LossMode::AugmentedContrastive;
                    }),
                ),
                row(
                    "adapters+alignment",
                    with(&|c| {
                        c.adapters = c.adapters.max(1);
                        c.loss_mode = LossMode::AugmentedContrastive;
                    }),
                ),
            ],
            Axis::AdapterCount => [2, 3, 4]
                .into_iter()
                .map(|n| (n.to_string(), with(&|c| c.adapters = n)))
                .collect(),
            Axis::ContextCount => [4, 8, 16]
                .into_iter()
                .map(|n| (n.to_string(), with(&|c| c.contexts = n)))
                .collect(),
            Axis::KernelSize => [1, 3, 5]
                .into_iter()
                .map(|k| (format!("{k}x{k}"), with(&|c| c.kernel_size = k)))
                .collect(),
            Axis::None => vec![row("full", base.clone())],
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub axis: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text table: setting, ACC_M, AP_M and the per-split ACC.
    pub fn render(&self) -> String {
        let mut out = format!("axis: {}\n", self.axis);
        out += &format!(
            "{:<20} {:>7} {:>7} {:>9} {:>11}\n",
            "setting", "ACC_M", "AP_M", "ACC in", "ACC cross"
        );
        for r in &self.rows {
            let acc = |s: &str| r.report.split(s).map_or(f64::NAN, |m| m.acc);
            out += &format!(
                "{:<20} {:>7.4} {:>7.4} {:>9.4} {:>11.4}\n",
                r.setting,
                r.report.acc_m,
                r.report.ap_m,
                acc("test_in"),
                acc("test_cross")
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table fields serialize")
    }
}

/// Trains every setting of `axis` on the same data with the base seed.
pub fn ablate(base: &TrainConfig, axis: Axis, data: &DatasetBundle) -> Result<AblationTable> {
    ablate_with(base, axis, data, |_, _| {})
}

/// As [`ablate`], calling `on_row` after each trained setting.
pub fn ablate_with(
    base: &TrainConfig,
    axis: Axis,
    data: &DatasetBundle,
    mut on_row: impl FnMut(usize, &AblationRow),
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (i, (setting, cfg)) in axis.settings(base).into_iter().enumerate() {
        let report = train(&cfg, data)?.report;
        let row = AblationRow { setting, report };
        on_row(i, &row);
        rows.push(row);
    }
    Ok(AblationTable {
        axis: axis.name().to_string(),
        rows,
    })
}
