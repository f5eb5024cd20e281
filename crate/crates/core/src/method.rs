//! Training strategies: loss choice, architectural flags and run labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::sampling::{MiningConfig, MiningMode};

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Triplet,
    SimCLR,
    MoCov2,
    BYOL,
    SimSiam,
    #[serde(rename = "BT", alias = "BarlowTwins")]
    BarlowTwins,
    VICReg,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Triplet,
        Method::SimCLR,
        Method::MoCov2,
        Method::BYOL,
        Method::SimSiam,
        Method::BarlowTwins,
        Method::VICReg,
    ];

    /// The pair-based methods.
    pub const SSL: [Method; 6] =
        [Method::SimCLR, Method::MoCov2, Method::BYOL, Method::SimSiam, Method::BarlowTwins, Method::VICReg];

    pub fn name(self) -> &'static str {
        match self {
            Method::Triplet => "Triplet",
            Method::SimCLR => "SimCLR",
            Method::MoCov2 => "MoCov2",
            Method::BYOL => "BYOL",
            Method::SimSiam => "SimSiam",
            Method::BarlowTwins => "BT",
            Method::VICReg => "VICReg",
        }
    }

    /// Whether embeddings are L2-normalized before the loss.
    pub fn normalizes_embeddings(self) -> bool {
        !matches!(self, Method::BarlowTwins | Method::VICReg)
    }

    pub fn flags(self) -> FeatureFlags {
        let (me, sg, pr, bn) = match self {
            Method::Triplet | Method::SimCLR => (false, false, false, false),
            Method::MoCov2 => (true, false, false, false),
            Method::BYOL => (true, true, true, true),
            Method::SimSiam => (false, true, true, true),
            Method::BarlowTwins | Method::VICReg => (false, false, false, true),
        };
        FeatureFlags { momentum_target: me, stop_gradient: sg, predictor: pr, batchnorm: bn }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Method::Triplet | Method::SimCLR | Method::MoCov2 => 1e-5,
            _ => 1e-4,
        }
    }

    pub fn uses_pairs(self) -> bool {
        self != Method::Triplet
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name().to_ascii_lowercase() == key)
            .or((key == "barlowtwins").then_some(Method::BarlowTwins))
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                Error::invalid(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Momentum target, stop-gradient, predictor, batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    pub momentum_target: bool,
    pub stop_gradient: bool,
    pub predictor: bool,
    pub batchnorm: bool,
}

impl FeatureFlags {
    pub fn of_encoder(cfg: &EncoderConfig) -> Self {
        Self {
            momentum_target: cfg.momentum_target,
            stop_gradient: cfg.stop_grad_target,
            predictor: cfg.predictor,
            batchnorm: cfg.predictor || (cfg.proj_batchnorm && cfg.projection && cfg.proj_layers > 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub mining: MiningConfig,
    /// Database negative ratio.
    pub eta: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self::preset(Method::SimCLR, 32, 1, 64, 1.0)
    }
}

impl MethodConfig {
    /// The standard feature set of `method`. Triplet ignores `proj_layers` and
    /// `embed_dim`: it embeds with the trunk output.
    pub fn preset(method: Method, input_dim: usize, proj_layers: usize, embed_dim: usize, eta: f64) -> Self {
        let f = method.flags();
        let mut encoder = EncoderConfig {
            input_dim,
            embed_dim,
            proj_layers,
            proj_batchnorm: f.batchnorm,
            predictor: f.predictor,
            momentum_target: f.momentum_target,
            stop_grad_target: f.stop_gradient,
            ..EncoderConfig::default()
        };
        if method == Method::Triplet {
            encoder.projection = false;
            encoder.embed_dim = encoder.trunk_out();
        }
        Self {
            loss: LossConfig::for_method(method),
            encoder,
            mining: MiningConfig::default(),
            eta: if method == Method::Triplet { 0.0 } else { eta },
        }
    }

    pub fn method(&self) -> Method {
        self.loss.method
    }

    /// Run label `Method-FC-L-D-η`, or `Triplet[-Random|-Partial]`.
    pub fn label(&self) -> String {
        match self.method() {
            Method::Triplet => match self.mining.mode {
                MiningMode::FullHnm => "Triplet".into(),
                MiningMode::Random => "Triplet-Random".into(),
                MiningMode::PartialHnm => "Triplet-Partial".into(),
            },
            m => format!("{}-FC-{}-{}-{}", m, self.encoder.proj_layers, self.encoder.embed_dim, self.eta),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.encoder.validate()?;
        self.mining.validate()?;
        let m = self.method();
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be a finite non-negative ratio, got {}", self.eta)));
        }
        if m == Method::Triplet && self.eta != 0.0 {
            return Err(Error::invalid("Triplet trains on mined triplets; eta must be 0"));
        }
        let prediction = matches!(m, Method::BYOL | Method::SimSiam);
        if self.encoder.predictor != prediction {
            return Err(Error::invalid(format!(
                "{m}: predictor must be {} (only the embedding-prediction loss uses it)",
                if prediction { "on" } else { "off" }
            )));
        }
        if prediction && !self.encoder.stop_grad_target && !self.encoder.momentum_target {
            return Err(Error::invalid(format!("{m} needs a target branch (momentum target or stop-gradient)")));
        }
        if m == Method::MoCov2 && !self.encoder.momentum_target {
            return Err(Error::invalid("MoCov2 computes keys with the momentum target; momentum_target must be on"));
        }
        Ok(())
    }

    pub fn flags(&self) -> FeatureFlags {
        FeatureFlags::of_encoder(&self.encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels() {
        assert_eq!(MethodConfig::preset(Method::SimCLR, 32, 1, 2048, 1.0).label(), "SimCLR-FC-1-2048-1");
        assert_eq!(MethodConfig::preset(Method::BarlowTwins, 32, 2, 4096, 1.0).label(), "BT-FC-2-4096-1");
        assert_eq!(MethodConfig::preset(Method::BYOL, 32, 2, 2048, 0.25).label(), "BYOL-FC-2-2048-0.25");
        let mut t = MethodConfig::preset(Method::Triplet, 32, 1, 64, 0.0);
        assert_eq!(t.label(), "Triplet");
        t.mining.mode = MiningMode::Random;
        assert_eq!(t.label(), "Triplet-Random");
    }

    #[test]
    fn presets_validate_and_match_table() {
        for m in Method::ALL {
            let cfg = MethodConfig::preset(m, 16, 2, 8, 0.5);
            cfg.validate().unwrap();
            assert_eq!(cfg.flags(), m.flags(), "{m}");
        }
        let f = Method::SimSiam.flags();
        assert!(!f.momentum_target && f.stop_gradient && f.predictor && f.batchnorm);
    }

    #[test]
    fn parse_and_serde() {
        assert_eq!("bt".parse::<Method>().unwrap(), Method::BarlowTwins);
        assert_eq!("BarlowTwins".parse::<Method>().unwrap(), Method::BarlowTwins);
        assert_eq!("byol".parse::<Method>().unwrap(), Method::BYOL);
        assert!("swav".parse::<Method>().is_err());
        assert_eq!(serde_json::to_string(&Method::BYOL).unwrap(), "\"BYOL\"");
        assert_eq!(serde_json::from_str::<Method>("\"BarlowTwins\"").unwrap(), Method::BarlowTwins);
        let cfg = MethodConfig::preset(Method::VICReg, 8, 2, 8, 1.0);
        let back: MethodConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        let bad = r#"{"eta": 1.0, "lambda2": 3}"#;
        assert!(serde_json::from_str::<MethodConfig>(bad).is_err());
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut cfg = MethodConfig::preset(Method::SimCLR, 8, 1, 8, 1.0);
        cfg.encoder.predictor = true;
        assert!(cfg.validate().is_err());
        let mut cfg = MethodConfig::preset(Method::MoCov2, 8, 1, 8, 1.0);
        cfg.encoder.momentum_target = false;
        assert!(cfg.validate().is_err());
        let mut cfg = MethodConfig::preset(Method::Triplet, 8, 1, 8, 0.0);
        cfg.eta = 1.0;
        assert!(cfg.validate().is_err());
    }
}
