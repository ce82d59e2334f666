//! Run configuration files (JSON).
//!
//! ```json
//! {
//!   "pyramid": [[8, 8, 4], [4, 4, 6], [2, 2, 8]],
//!   "seed": 7,
//!   "init": "seeded-uniform",
//!   "c_common": 4,
//!   "anchors": { "sizes": [32, 64, 128, 256], "aspect_ratios": [1, 1.5, 3, 0.6667, 0.3333] },
//!   "rf_chain": "vgg16.json"
//! }
//! ```
//!
//! Every key is optional except where a subcommand needs it; unknown keys
//! are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use featborrow::anchors::{design_scales, AnchorSpec, DEFAULT_IMAGE_SIZE};
use featborrow::fmb::validate_pyramid_shapes;
use featborrow::rf::ChainSpec;
use featborrow::{Error, InitMode, InitOptions, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorConfig {
    pub sizes: Vec<f64>,
    /// Derived from `sizes` when omitted.
    #[serde(default)]
    pub second_sizes: Option<Vec<f64>>,
    pub aspect_ratios: Vec<f64>,
    #[serde(default)]
    pub layer_aspect_ratios: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub image_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    pyramid: Vec<[usize; 3]>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    param_seed: Option<u64>,
    #[serde(default)]
    target_seed: Option<u64>,
    #[serde(default)]
    init: Option<InitMode>,
    #[serde(default)]
    c_common: Option<usize>,
    #[serde(default)]
    c_ctx: Option<usize>,
    #[serde(default)]
    value_bias: Option<bool>,
    #[serde(default)]
    combine_bias: Option<bool>,
    #[serde(default)]
    anchors: Option<AnchorConfig>,
    #[serde(default)]
    rf_chain: Option<PathBuf>,
    #[serde(default)]
    out_dir: Option<PathBuf>,
}

/// Validated configuration with defaults applied.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Per-layer `(h, w, c)`; empty when the config is only used for anchors/rf.
    pub pyramid: Vec<(usize, usize, usize)>,
    /// Seed of the synthetic input pyramid.
    pub seed: u64,
    pub init: InitOptions,
    /// Seed of the synthetic gradient-check target.
    pub target_seed: u64,
    pub anchors: AnchorSpec,
    pub rf_chain: ChainSpec,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn init_options(&self) -> InitOptions {
        self.init
    }

    pub fn require_pyramid(&self) -> Result<()> {
        if self.pyramid.is_empty() {
            return Err(Error::Validation {
                field: "pyramid".into(),
                constraint: "this command needs a pyramid".into(),
            });
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pyramid: Vec::new(),
            seed: 0,
            init: InitOptions::new(InitMode::SeededUniform, 1),
            target_seed: 2,
            anchors: AnchorSpec::reference(),
            rf_chain: ChainSpec::vgg16_ssd300(),
            out_dir: None,
        }
    }
}

fn anchor_spec(cfg: AnchorConfig) -> Result<AnchorSpec> {
    let image_size = cfg.image_size.unwrap_or(DEFAULT_IMAGE_SIZE);
    let second_sizes = match cfg.second_sizes {
        Some(s) => s,
        None if cfg.sizes.len() >= 2 => {
            design_scales(&cfg.sizes, image_size)
                .map_err(|e| prefix_field("anchors", e))?
                .second_sizes
        }
        None => Vec::new(),
    };
    let spec = AnchorSpec {
        sizes: cfg.sizes,
        second_sizes,
        aspect_ratios: cfg.aspect_ratios,
        layer_aspect_ratios: cfg.layer_aspect_ratios,
        image_size,
    };
    spec.validate().map_err(|e| prefix_field("anchors", e))?;
    Ok(spec)
}

fn prefix_field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, constraint } => Error::Validation {
            field: format!("{prefix}.{field}"),
            constraint,
        },
        other => other,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_chain(path: &Path) -> Result<ChainSpec> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Format {
        detail: format!("{}: {e}", path.display()),
    })
}

/// Parses and validates a config; relative paths inside it resolve against
/// the config file's directory.
pub fn parse_config_str(text: &str, base: &Path) -> Result<RunConfig> {
    let raw: RawConfig = serde_json::from_str(text).map_err(|e| Error::Format {
        detail: format!("config: {e}"),
    })?;
    let pyramid: Vec<_> = raw.pyramid.iter().map(|&[h, w, c]| (h, w, c)).collect();
    if !pyramid.is_empty() {
        validate_pyramid_shapes(&pyramid)?;
    }
    for (field, v) in [("c_common", raw.c_common), ("c_ctx", raw.c_ctx)] {
        if v == Some(0) {
            return Err(Error::Validation {
                field: field.into(),
                constraint: "channel count must be >= 1".into(),
            });
        }
    }
    let mut init = InitOptions::new(
        raw.init.unwrap_or(InitMode::SeededUniform),
        raw.param_seed.unwrap_or(raw.seed.wrapping_add(1)),
    );
    init.c_common = raw.c_common;
    init.c_ctx = raw.c_ctx;
    init.value_bias = raw.value_bias.unwrap_or(init.value_bias);
    init.combine_bias = raw.combine_bias.unwrap_or(init.combine_bias);

    let anchors = match raw.anchors {
        Some(a) => anchor_spec(a)?,
        None => AnchorSpec::reference(),
    };
    let rf_chain = match raw.rf_chain {
        Some(p) => load_chain(&base.join(p))?,
        None => ChainSpec::vgg16_ssd300(),
    };
    Ok(RunConfig {
        pyramid,
        seed: raw.seed,
        init,
        target_seed: raw.target_seed.unwrap_or(raw.seed.wrapping_add(2)),
        anchors,
        rf_chain,
        out_dir: raw.out_dir.map(|p| base.join(p)),
    })
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&read(path)?, base)
}
