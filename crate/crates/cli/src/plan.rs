//! Ablation plans: which variants to train, on which seeds and data.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use partialmine::datagen::SyntheticBenchmark;
use partialmine::labels::DomainId;
use partialmine::trainer::{Switches, TrainConfig};
use serde::{Deserialize, Serialize};

/// A named combination of method components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Internal domain only, plain partial-label loss.
    Single,
    /// Both domains, plain partial-label loss.
    Joint,
    Tw,
    TwTat,
    /// Task weighting, adversary and ensembling without the confidence gate.
    TwTatTe,
    TwUte,
    Full,
    FullWithoutTw,
    /// Holistic adversary on the trunk instead of per-category ones.
    Hat,
    HardLabel,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Single,
        Variant::Joint,
        Variant::Tw,
        Variant::TwTat,
        Variant::TwTatTe,
        Variant::TwUte,
        Variant::Full,
        Variant::FullWithoutTw,
        Variant::Hat,
        Variant::HardLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::Joint => "joint",
            Variant::Tw => "tw",
            Variant::TwTat => "tw+tat",
            Variant::TwTatTe => "tw+tat+te",
            Variant::TwUte => "tw+ute",
            Variant::Full => "full",
            Variant::FullWithoutTw => "full-tw",
            Variant::Hat => "hat",
            Variant::HardLabel => "hard_label",
        }
    }

    pub fn switches(self) -> Switches {
        let none = Switches::NONE;
        match self {
            Variant::Single | Variant::Joint => none,
            Variant::Tw => Switches { tw: true, ..none },
            Variant::TwTat => Switches { tw: true, tat: true, ..none },
            Variant::TwTatTe => Switches { tw: true, tat: true, ute: true, ..none },
            Variant::TwUte => Switches { tw: true, ute: true, uncertainty_gate: true, ..none },
            Variant::Full => Switches::default(),
            Variant::FullWithoutTw => Switches { tw: false, ..Switches::default() },
            Variant::Hat => Switches {
                tw: true,
                hat_instead_of_tat: true,
                ute: true,
                uncertainty_gate: true,
                ..none
            },
            Variant::HardLabel => Switches {
                tw: true,
                tat: true,
                hard_label_instead_of_ute: true,
                ..none
            },
        }
    }

    /// Whether the run sees only the internal domain.
    pub fn internal_only(self) -> bool {
        self == Variant::Single
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown variant {0:?}")]
pub struct UnknownVariant(pub String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let alias = match s {
            "tw+te" => "tw+tat+te",
            "full\u{2212}tw" | "full_tw" => "full-tw",
            "hard-label" => "hard_label",
            other => other,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| UnknownVariant(s.to_string()))
    }
}

impl TryFrom<String> for Variant {
    type Error = UnknownVariant;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.name().to_string()
    }
}

/// Where a plan's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkSource {
    /// Regenerated for every seed from this recipe.
    Synthetic(SyntheticBenchmark),
    /// A directory written by `generate`, shared by all seeds.
    Directory(PathBuf),
}

impl Default for BenchmarkSource {
    fn default() -> Self {
        BenchmarkSource::Synthetic(SyntheticBenchmark::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    LambdaTat,
    LambdaUte,
}

impl SweepParameter {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParameter::LambdaTat => vec![0.003, 0.01, 0.03, 0.1, 0.3],
            SweepParameter::LambdaUte => vec![3.0, 10.0, 30.0, 100.0, 300.0],
        }
    }
}

/// Repeats every (variant, seed) run at each value of one loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub parameter: SweepParameter,
    /// Defaults to the parameter's standard grid.
    #[serde(default)]
    pub values: Option<Vec<f64>>,
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        self.values.clone().unwrap_or_else(|| self.parameter.default_grid())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Report path used when the command line gives none.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub benchmark: BenchmarkSource,
    /// Base settings; each run overrides the switches and the seed.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Also train a domain probe on each run's common-category features.
    #[serde(default)]
    pub probe: bool,
    #[serde(default)]
    pub internal_domain: DomainId,
}

/// One training run of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
}

impl AblationPlan {
    /// Runs in report order: variant, then sweep value, then seed.
    pub fn runs(&self) -> Vec<RunSpec> {
        let points: Vec<Option<(SweepParameter, f64)>> = match &self.sweep {
            None => vec![None],
            Some(s) => s.values().into_iter().map(|v| Some((s.parameter, v))).collect(),
        };
        let mut out = Vec::new();
        for &variant in &self.variants {
            for point in &points {
                for &seed in &self.seeds {
                    let mut config = TrainConfig {
                        seed,
                        switches: variant.switches(),
                        ..self.train.clone()
                    };
                    match point {
                        Some((SweepParameter::LambdaTat, v)) => config.lambda_tat = *v,
                        Some((SweepParameter::LambdaUte, v)) => config.lambda_ute = *v,
                        None => {}
                    }
                    out.push(RunSpec { variant, seed, config });
                }
            }
        }
        out
    }
}
