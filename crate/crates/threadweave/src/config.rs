use std::path::Path;

use serde::{Deserialize, Serialize};
use threadweave_core::downstream::NestedCvConfig;
use threadweave_core::reparam::Strategy;
use threadweave_core::synthgen::SynthConfig;
use threadweave_core::trainer::{parse_domains, TrainConfig};

use crate::error::Result;
use crate::io::read_json;

/// Everything a run reads from its config file: the training keys at the
/// top level, plus `synth` and `cv` sections. The top-level `seed` is
/// propagated into both sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub cv: NestedCvConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub domains: Option<String>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let base = match path {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        Ok(base.with(overrides))
    }

    pub fn with(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.strategy {
            self.train.strategy = s;
        }
        if let Some(d) = &o.domains {
            self.train.domains = parse_domains(d);
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        self.synth.seed = self.train.seed;
        self.cv.seed = self.train.seed;
        self
    }
}

/// Provenance stored in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Echo<C> {
    pub command: String,
    pub seed: u64,
    pub config: C,
}
