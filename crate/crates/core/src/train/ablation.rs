use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{GraphMode, RunConfig};
use crate::error::{Error, Result};

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Fixed graph from the edge-list file.
    UsePg,
    /// Graph from time features only.
    UseTg,
    /// Graph from node embeddings only.
    UseSg,
    Full,
    /// One pattern stream, no gating.
    NoDecouple,
    G2,
    G3,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::UsePg,
        Variant::UseTg,
        Variant::UseSg,
        Variant::Full,
        Variant::NoDecouple,
        Variant::G2,
        Variant::G3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UsePg => "use_pg",
            Variant::UseTg => "use_tg",
            Variant::UseSg => "use_sg",
            Variant::Full => "full",
            Variant::NoDecouple => "no_decouple",
            Variant::G2 => "g2",
            Variant::G3 => "g3",
        }
    }

    /// Rewrites `cfg` for this variant.
    pub fn apply(self, cfg: &mut RunConfig) -> Result<()> {
        match self {
            Variant::UsePg => {
                if cfg.data.graph.is_none() {
                    return Err(Error::config("data.graph: variant use_pg needs a graph file"));
                }
                cfg.graph.mode = GraphMode::Predefined;
            }
            Variant::UseTg => cfg.graph.mode = GraphMode::TemporalOnly,
            Variant::UseSg => cfg.graph.mode = GraphMode::SpatialOnly,
            Variant::Full => cfg.graph.mode = GraphMode::Fused,
            Variant::NoDecouple => cfg.model.patterns = 1,
            Variant::G2 => cfg.model.patterns = 2,
            Variant::G3 => cfg.model.patterns = 3,
        }
        cfg.validate()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['-', ' ', '='], "_");
        let v = match key.as_str() {
            "use_pg" | "pg" => Variant::UsePg,
            "use_tg" | "tg" => Variant::UseTg,
            "use_sg" | "sg" => Variant::UseSg,
            "full" => Variant::Full,
            "no_decouple" => Variant::NoDecouple,
            "g2" | "g_2" => Variant::G2,
            "g3" | "g_3" => Variant::G3,
            _ => {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                return Err(Error::config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                )));
            }
        };
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("G=3".parse::<Variant>().unwrap(), Variant::G3);
        assert!("use_xg".parse::<Variant>().is_err());
    }

    #[test]
    fn variants_rewrite_config() {
        let mut cfg = RunConfig::default();
        Variant::NoDecouple.apply(&mut cfg).unwrap();
        assert_eq!(cfg.model.patterns, 1);
        Variant::UseSg.apply(&mut cfg).unwrap();
        assert_eq!(cfg.graph.mode, GraphMode::SpatialOnly);
        let err = Variant::UsePg.apply(&mut cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
