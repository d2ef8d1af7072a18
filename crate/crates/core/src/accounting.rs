//! Closed-form trainable-parameter counts for ARC and the comparison methods.
//!
//! Method counts exclude the classification head; [`head_count`] reports it
//! separately. `D` is the embedding width and `L` the number of layers that
//! carry adapters.

use std::fmt;
use std::ops::RangeInclusive;

use crate::arc::{ArcConfig, Variant};
use crate::error::{Error, Result};
use crate::vit::BackboneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Adapter { bottleneck: u64 },
    VptShallow { prompts: u64 },
    VptDeep { prompts: u64 },
    Lora { matrices: u64, bottleneck: u64 },
    Ssf { operations: u64 },
    Arc { bottleneck: u64 },
    ArcAtt { bottleneck: u64 },
}

/// Raw knob values as they arrive from a command line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Knobs {
    pub bottleneck: Option<u64>,
    pub prompts: Option<u64>,
    pub matrices: Option<u64>,
    pub operations: Option<u64>,
}

pub const METHOD_NAMES: [&str; 7] = ["adapter", "vpt_shallow", "vpt_deep", "lora", "ssf", "arc", "arc_att"];

impl MethodSpec {
    /// Builds a spec from a method name, requiring exactly the knobs that
    /// method uses and rejecting the rest.
    pub fn from_knobs(method: &str, k: Knobs) -> Result<Self> {
        let wanted: &[&str] = match method {
            "adapter" | "arc" | "arc_att" => &["dprime"],
            "vpt_shallow" | "vpt_deep" => &["m"],
            "lora" => &["w", "dprime"],
            "ssf" => &["o"],
            other => {
                return Err(Error::Config(format!(
                    "unknown method `{other}` (expected one of {})",
                    METHOD_NAMES.join(", ")
                )))
            }
        };
        let given = [
            ("dprime", k.bottleneck),
            ("m", k.prompts),
            ("w", k.matrices),
            ("o", k.operations),
        ];
        for (name, value) in given {
            match (wanted.contains(&name), value) {
                (true, None) => return Err(Error::Config(format!("method `{method}` requires --{name}"))),
                (false, Some(_)) => return Err(Error::Config(format!("method `{method}` does not take --{name}"))),
                _ => {}
            }
        }
        let spec = match method {
            "adapter" => MethodSpec::Adapter { bottleneck: k.bottleneck.unwrap() },
            "arc" => MethodSpec::Arc { bottleneck: k.bottleneck.unwrap() },
            "arc_att" => MethodSpec::ArcAtt { bottleneck: k.bottleneck.unwrap() },
            "vpt_shallow" => MethodSpec::VptShallow { prompts: k.prompts.unwrap() },
            "vpt_deep" => MethodSpec::VptDeep { prompts: k.prompts.unwrap() },
            "lora" => MethodSpec::Lora {
                matrices: k.matrices.unwrap(),
                bottleneck: k.bottleneck.unwrap(),
            },
            _ => MethodSpec::Ssf { operations: k.operations.unwrap() },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Adapter { .. } => "adapter",
            MethodSpec::VptShallow { .. } => "vpt_shallow",
            MethodSpec::VptDeep { .. } => "vpt_deep",
            MethodSpec::Lora { .. } => "lora",
            MethodSpec::Ssf { .. } => "ssf",
            MethodSpec::Arc { .. } => "arc",
            MethodSpec::ArcAtt { .. } => "arc_att",
        }
    }

    fn validate(&self) -> Result<()> {
        let knobs: &[u64] = match self {
            MethodSpec::Adapter { bottleneck } | MethodSpec::Arc { bottleneck } | MethodSpec::ArcAtt { bottleneck } => {
                &[*bottleneck]
            }
            MethodSpec::VptShallow { prompts } | MethodSpec::VptDeep { prompts } => &[*prompts],
            MethodSpec::Lora { matrices, bottleneck } => &[*matrices, *bottleneck],
            MethodSpec::Ssf { operations } => &[*operations],
        };
        if knobs.contains(&0) {
            return Err(Error::Config(format!("{} knobs must be positive", self.name())));
        }
        Ok(())
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Adapter { bottleneck } | MethodSpec::Arc { bottleneck } | MethodSpec::ArcAtt { bottleneck } => {
                write!(f, "{}(D'={bottleneck})", self.name())
            }
            MethodSpec::VptShallow { prompts } | MethodSpec::VptDeep { prompts } => {
                write!(f, "{}(m={prompts})", self.name())
            }
            MethodSpec::Lora { matrices, bottleneck } => write!(f, "lora(w={matrices}, D'={bottleneck})"),
            MethodSpec::Ssf { operations } => write!(f, "ssf(o={operations})"),
        }
    }
}

fn check_shape(d: u64, l: u64) -> Result<()> {
    if d == 0 || l == 0 {
        return Err(Error::Config(format!("D and L must be positive, got D={d}, L={l}")));
    }
    Ok(())
}

/// Extra trainable parameters during fine-tuning.
pub fn count_finetune(spec: &MethodSpec, d: u64, l: u64) -> Result<u64> {
    check_shape(d, l)?;
    spec.validate()?;
    Ok(match *spec {
        MethodSpec::Adapter { bottleneck } => 2 * d * bottleneck * l,
        MethodSpec::VptShallow { prompts } => prompts * d,
        MethodSpec::VptDeep { prompts } => prompts * d * l,
        MethodSpec::Lora { matrices, bottleneck } => 2 * matrices * d * bottleneck * l,
        MethodSpec::Ssf { operations } => 2 * operations * d * l,
        MethodSpec::Arc { bottleneck } => 2 * (d * bottleneck + (bottleneck + d) * l),
        MethodSpec::ArcAtt { bottleneck } => d * bottleneck + (bottleneck + d) * l,
    })
}

/// Extra parameters left at inference; zero for methods that fold away.
pub fn count_inference(spec: &MethodSpec, d: u64, l: u64) -> Result<u64> {
    match spec {
        MethodSpec::Lora { .. } | MethodSpec::Ssf { .. } | MethodSpec::Arc { .. } | MethodSpec::ArcAtt { .. } => {
            check_shape(d, l)?;
            spec.validate()?;
            Ok(0)
        }
        _ => count_finetune(spec, d, l),
    }
}

/// Linear classification head: `D x K` weights plus `K` biases.
pub fn head_count(d: u64, classes: u64) -> u64 {
    d * classes + classes
}

/// Structural count for any buildable ARC config.
///
/// Bottleneck variant: each projection group stores `D x D'` (twice when the
/// up-projection is untied), once overall or once per inserted layer; each
/// (position, inserted layer) pair adds `D'` coefficients and `D` biases.
/// Full-rank variant: one `D x D` matrix per (position, inserted layer).
pub fn count_arc_config(config: &ArcConfig, backbone: &BackboneConfig) -> Result<u64> {
    config.validate(backbone)?;
    let d = backbone.embed_dim as u64;
    let dp = config.bottleneck as u64;
    let layers = config.layers(backbone).len() as u64;
    let positions = config.positions.len() as u64;
    Ok(match config.variant {
        Variant::FullRank => positions * layers * d * d,
        Variant::Bottleneck => {
            let per_group = if config.sharing.tied() { 1 } else { 2 } * d * dp;
            let copies = if config.sharing.across_layers() { 1 } else { layers };
            config.groups().len() as u64 * per_group * copies + positions * layers * (dp + d)
        }
    })
}

/// Class counts of the 19 VTAB-1k tasks (natural, specialized, structured).
pub const VTAB_CLASS_COUNTS: [u64; 19] = [
    100, 102, 47, 102, 37, 10, 397, // natural
    2, 10, 45, 5, // specialized
    8, 6, 6, 4, 16, 16, 18, 9, // structured
];

/// Head size averaged over the VTAB-1k tasks for width `d`.
pub fn mean_vtab_head(d: u64) -> f64 {
    let total: u64 = VTAB_CLASS_COUNTS.iter().map(|&k| head_count(d, k)).sum();
    total as f64 / VTAB_CLASS_COUNTS.len() as f64
}

/// Millions with two decimals, rounded half away from zero.
pub fn millions_rounded(count: f64) -> f64 {
    (count / 1e4).round() / 100.0
}

/// Millions with two decimals, truncated toward zero.
pub fn millions_truncated(count: f64) -> f64 {
    (count / 1e4).trunc() / 100.0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScalingRow {
    pub label: String,
    pub d: u64,
    pub l: u64,
    pub finetune: u64,
    pub inference: u64,
}

/// Standard backbone shapes `(name, D, L)`.
pub const BACKBONES: [(&str, u64, u64); 3] = [("ViT-B", 768, 12), ("ViT-L", 1024, 24), ("ViT-H", 1280, 32)];

fn row(spec: &MethodSpec, label: String, d: u64, l: u64) -> Result<ScalingRow> {
    Ok(ScalingRow {
        label,
        d,
        l,
        finetune: count_finetune(spec, d, l)?,
        inference: count_inference(spec, d, l)?,
    })
}

/// One row per standard backbone.
pub fn scaling_backbones(spec: &MethodSpec) -> Result<Vec<ScalingRow>> {
    BACKBONES
        .iter()
        .map(|&(name, d, l)| row(spec, name.to_string(), d, l))
        .collect()
}

/// One row per inserted-layer count at fixed width.
pub fn scaling_layers(spec: &MethodSpec, d: u64, layers: RangeInclusive<u64>) -> Result<Vec<ScalingRow>> {
    layers.map(|l| row(spec, format!("L={l}"), d, l)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::{Sharing, Site};
    use proptest::prelude::*;

    const ARC50: MethodSpec = MethodSpec::Arc { bottleneck: 50 };

    #[test]
    fn vit_b_arc_counts() {
        for (dp, want) in [(10, 34_032), (50, 96_432), (100, 174_432), (200, 330_432)] {
            assert_eq!(count_finetune(&MethodSpec::Arc { bottleneck: dp }, 768, 12).unwrap(), want);
        }
        assert_eq!(count_finetune(&ARC50, 1024, 24).unwrap(), 153_952);
    }

    #[test]
    fn inference_rows() {
        assert_eq!(count_inference(&ARC50, 768, 12).unwrap(), 0);
        assert_eq!(count_inference(&MethodSpec::Adapter { bottleneck: 8 }, 768, 12).unwrap(), 147_456);
        assert_eq!(count_inference(&MethodSpec::VptDeep { prompts: 10 }, 768, 12).unwrap(), 92_160);
        assert_eq!(count_finetune(&MethodSpec::VptShallow { prompts: 1 }, 768, 12).unwrap(), 768);
    }

    #[test]
    fn layer_slopes() {
        let c = |s: &MethodSpec, l| count_finetune(s, 768, l).unwrap();
        assert_eq!(c(&ARC50, 13) - c(&ARC50, 12), 1_636);
        let lora = MethodSpec::Lora { matrices: 2, bottleneck: 8 };
        assert_eq!(c(&lora, 13) - c(&lora, 12), 2 * 2 * 768 * 8);
    }

    #[test]
    fn knob_validation() {
        let k = Knobs { bottleneck: Some(50), ..Knobs::default() };
        assert_eq!(MethodSpec::from_knobs("arc", k).unwrap(), ARC50);
        assert!(MethodSpec::from_knobs("lora", k).is_err());
        assert!(MethodSpec::from_knobs("vpt_deep", k).is_err());
        assert!(MethodSpec::from_knobs("prefix", k).is_err());
        let zero = Knobs { bottleneck: Some(0), ..Knobs::default() };
        assert!(MethodSpec::from_knobs("arc", zero).is_err());
        assert!(count_finetune(&ARC50, 0, 12).is_err());
    }

    #[test]
    fn strategy_formulas() {
        let bb = BackboneConfig {
            embed_dim: 768,
            layers: 12,
            heads: 12,
            ..BackboneConfig::toy()
        };
        let (d, dp, l) = (768u64, 50u64, 12u64);
        let base = ArcConfig::default();
        let n = |s| count_arc_config(&base.clone().with_sharing(s), &bb).unwrap();
        assert_eq!(n(Sharing::IntraInter), count_finetune(&ARC50, d, l).unwrap());
        assert_eq!(n(Sharing::IntraInterStar), d * dp + 2 * (dp + d) * l);
        assert_eq!(n(Sharing::NonIntraInter), 2 * (2 * d * dp + (dp + d) * l));
        assert_eq!(n(Sharing::NonIntraNonInter), 2 * (2 * d * dp * l + (dp + d) * l));
        let att = base.with_positions(&[Site::BeforeMha]);
        assert_eq!(
            count_arc_config(&att, &bb).unwrap(),
            count_finetune(&MethodSpec::ArcAtt { bottleneck: 50 }, d, l).unwrap()
        );
    }

    #[test]
    fn mean_head_and_rounding() {
        assert_eq!(VTAB_CLASS_COUNTS.iter().sum::<u64>(), 940);
        let head = mean_vtab_head(768);
        assert!((head - 769.0 * 940.0 / 19.0).abs() < 1e-9);
        assert_eq!(millions_rounded(96_432.0 + head), 0.13);
        assert_eq!(millions_truncated(34_032.0 + head), 0.07);
    }

    #[test]
    fn scaling_tables() {
        let rows = scaling_backbones(&ARC50).unwrap();
        assert_eq!(rows[1].finetune, 153_952);
        assert!(rows.iter().all(|r| r.inference == 0));
        let rows = scaling_layers(&ARC50, 768, 1..=12).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.windows(2).all(|w| w[1].finetune - w[0].finetune == 1_636));
    }

    fn any_spec() -> impl Strategy<Value = MethodSpec> {
        (1u64..300, 1u64..8).prop_flat_map(|(a, b)| {
            prop_oneof![
                Just(MethodSpec::Adapter { bottleneck: a }),
                Just(MethodSpec::VptShallow { prompts: a }),
                Just(MethodSpec::VptDeep { prompts: a }),
                Just(MethodSpec::Lora { matrices: b, bottleneck: a }),
                Just(MethodSpec::Ssf { operations: a }),
                Just(MethodSpec::Arc { bottleneck: a }),
                Just(MethodSpec::ArcAtt { bottleneck: a }),
            ]
        })
    }

    fn bump(spec: MethodSpec) -> MethodSpec {
        match spec {
            MethodSpec::Adapter { bottleneck } => MethodSpec::Adapter { bottleneck: bottleneck + 1 },
            MethodSpec::VptShallow { prompts } => MethodSpec::VptShallow { prompts: prompts + 1 },
            MethodSpec::VptDeep { prompts } => MethodSpec::VptDeep { prompts: prompts + 1 },
            MethodSpec::Lora { matrices, bottleneck } => MethodSpec::Lora { matrices: matrices + 1, bottleneck },
            MethodSpec::Ssf { operations } => MethodSpec::Ssf { operations: operations + 1 },
            MethodSpec::Arc { bottleneck } => MethodSpec::Arc { bottleneck: bottleneck + 1 },
            MethodSpec::ArcAtt { bottleneck } => MethodSpec::ArcAtt { bottleneck: bottleneck + 1 },
        }
    }

    proptest! {
        #[test]
        fn counts_increase_in_every_knob(spec in any_spec(), d in 1u64..2048, l in 1u64..48) {
            let base = count_finetune(&spec, d, l).unwrap();
            prop_assert!(count_finetune(&bump(spec), d, l).unwrap() > base);
            prop_assert!(count_finetune(&spec, d + 1, l).unwrap() > base);
            if !matches!(spec, MethodSpec::VptShallow { .. }) {
                prop_assert!(count_finetune(&spec, d, l + 1).unwrap() > base);
            }
        }

        #[test]
        fn arc_marginal_layer_cost(d in 1u64..2048, dp in 1u64..512, l in 1u64..48) {
            let arc = MethodSpec::Arc { bottleneck: dp };
            let adapter = MethodSpec::Adapter { bottleneck: dp };
            prop_assert_eq!(
                count_finetune(&arc, d, l + 1).unwrap() - count_finetune(&arc, d, l).unwrap(),
                2 * (dp + d)
            );
            prop_assert_eq!(
                count_finetune(&adapter, d, l + 1).unwrap() - count_finetune(&adapter, d, l).unwrap(),
                2 * d * dp
            );
        }
    }
}
