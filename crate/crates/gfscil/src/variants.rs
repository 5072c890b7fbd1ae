//! Named training variants: the component ablation grid and the meta-stage
//! comparison methods.

use std::fmt;
use std::str::FromStr;

use gfscil_core::trainer::{MetaAlgorithm, TrainConfig};
use serde::{Deserialize, Serialize};

/// Component switches of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub mctf: bool,
    pub sir: bool,
    pub kd: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    /// Classic MAML meta stage, distillation and replay while fine-tuning.
    Maml,
    /// Chained meta stage without distillation or replay, which stay on
    /// while fine-tuning.
    MamlCl,
    /// Same as `G`.
    MamlClKdsir,
}

impl Variant {
    /// The eight ablation rows in table order.
    pub const ABLATION: [Variant; 8] =
        [Variant::Baseline, Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F, Variant::G];

    pub const META_COMPARISON: [Variant; 3] = [Variant::Maml, Variant::MamlCl, Variant::MamlClKdsir];

    pub fn flags(self) -> Flags {
        let f = |mctf, sir, kd| Flags { mctf, sir, kd };
        match self {
            Variant::Baseline => f(false, false, false),
            Variant::A => f(true, false, false),
            Variant::B => f(false, true, false),
            Variant::C => f(false, false, true),
            Variant::D => f(true, true, false),
            Variant::E => f(true, false, true),
            Variant::F => f(false, true, true),
            Variant::G | Variant::MamlClKdsir | Variant::MamlCl => f(true, true, true),
            Variant::Maml => f(false, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
            Variant::F => "f",
            Variant::G => "g",
            Variant::Maml => "maml",
            Variant::MamlCl => "maml-cl",
            Variant::MamlClKdsir => "maml-cl-kdsir",
        }
    }

    /// Sets the meta algorithm and loss switches of `cfg`; other fields are
    /// left alone.
    pub fn apply(self, cfg: &mut TrainConfig) {
        let flags = self.flags();
        cfg.use_kd = flags.kd;
        cfg.use_sir = flags.sir;
        cfg.meta_cl_loss = true;
        cfg.meta = if flags.mctf { MetaAlgorithm::Mctf } else { MetaAlgorithm::Plain };
        match self {
            Variant::Maml => cfg.meta = MetaAlgorithm::Maml,
            Variant::MamlCl => cfg.meta_cl_loss = false,
            _ => {}
        }
    }

    pub fn configure(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        self.apply(&mut out);
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("unknown variant {0:?} (expected baseline, a-g, maml, maml-cl or maml-cl-kdsir)")]
pub struct UnknownVariant(String);

impl FromStr for Variant {
    type Err = UnknownVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Variant::ABLATION
            .into_iter()
            .chain(Variant::META_COMPARISON)
            .find(|v| v.name() == lower)
            .ok_or_else(|| UnknownVariant(s.into()))
    }
}

/// Parses a comma-separated list such as `baseline,d,g`.
pub fn parse_list(s: &str) -> Result<Vec<Variant>, UnknownVariant> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}
