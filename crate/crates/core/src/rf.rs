//! Accumulated stride ("jump") and theoretical receptive field of a layer
//! chain, via `rf += (k − 1)·jump; jump *= s`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::anchors::DETECTION_LAYERS;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGeom {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

impl LayerGeom {
    pub fn new(name: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerGeom {
            name: name.to_string(),
            kernel,
            stride,
            padding,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::validation(
                format!("layer `{}`", self.name),
                "kernel and stride must be >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub name: String,
    pub jump: usize,
    pub rf: usize,
    /// Output resolution, when an input size was given.
    pub out_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainGeom {
    pub stride: usize,
    pub rf: usize,
    pub trace: Vec<TraceEntry>,
}

impl ChainGeom {
    pub fn at(&self, name: &str) -> Option<&TraceEntry> {
        self.trace.iter().find(|t| t.name == name)
    }
}

pub fn chain_geometry(layers: &[LayerGeom], input_size: Option<usize>) -> Result<ChainGeom> {
    if layers.is_empty() {
        return Err(Error::validation("layers", "chain must not be empty"));
    }
    let (mut jump, mut rf, mut size) = (1usize, 1usize, input_size);
    let mut trace = Vec::with_capacity(layers.len());
    for layer in layers {
        layer.validate()?;
        rf += (layer.kernel - 1) * jump;
        jump *= layer.stride;
        size = match size {
            Some(s) => {
                let padded = s + 2 * layer.padding;
                if padded < layer.kernel {
                    return Err(Error::validation(
                        format!("layer `{}`", layer.name),
                        format!("kernel {} exceeds padded input {padded}", layer.kernel),
                    ));
                }
                Some((padded - layer.kernel) / layer.stride + 1)
            }
            None => None,
        };
        trace.push(TraceEntry {
            name: layer.name.clone(),
            jump,
            rf,
            out_size: size,
        });
    }
    Ok(ChainGeom {
        stride: jump,
        rf,
        trace,
    })
}

/// A layer chain with its detection taps, as read from a chain spec file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    #[serde(default)]
    pub input_size: Option<usize>,
    pub layers: Vec<LayerGeom>,
    #[serde(default)]
    pub detection_layers: Vec<String>,
}

impl ChainSpec {
    /// VGG-16 through `conv5_3`, a stride-2 `pool5`, `conv_fc6` (3x3),
    /// `conv_fc7` (1x1), and the extra `conv6_1` (1x1) / `conv6_2` (3x3, s2)
    /// pair. At 300 px input the detection grids are 38/19/10/5.
    pub fn vgg16_ssd300() -> Self {
        let conv = |name: &str| LayerGeom::new(name, 3, 1, 1);
        let layers = vec![
            conv("conv1_1"),
            conv("conv1_2"),
            LayerGeom::new("pool1", 2, 2, 0),
            conv("conv2_1"),
            conv("conv2_2"),
            LayerGeom::new("pool2", 2, 2, 0),
            conv("conv3_1"),
            conv("conv3_2"),
            conv("conv3_3"),
            // Padding stands in for ceil-mode pooling: 75 -> 38.
            LayerGeom::new("pool3", 2, 2, 1),
            conv("conv4_1"),
            conv("conv4_2"),
            conv("conv4_3"),
            LayerGeom::new("pool4", 2, 2, 0),
            conv("conv5_1"),
            conv("conv5_2"),
            conv("conv5_3"),
            LayerGeom::new("pool5", 2, 2, 1),
            conv("conv_fc6"),
            LayerGeom::new("conv_fc7", 1, 1, 0),
            LayerGeom::new("conv6_1", 1, 1, 0),
            LayerGeom::new("conv6_2", 3, 2, 1),
        ];
        ChainSpec {
            input_size: Some(300),
            layers,
            detection_layers: DETECTION_LAYERS
                .iter()
                .map(|l| l.name.to_string())
                .collect(),
        }
    }
}

/// Computed geometry of one detection layer next to the reference table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub name: String,
    pub stride: usize,
    pub rf: usize,
    pub out_size: Option<usize>,
    pub reference_stride: Option<usize>,
    pub reference_rf: Option<usize>,
}

impl AuditRow {
    pub fn stride_matches(&self) -> bool {
        self.reference_stride.is_none_or(|s| s == self.stride)
    }

    pub fn rf_delta(&self) -> Option<i64> {
        self.reference_rf.map(|r| r as i64 - self.rf as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfAudit {
    pub chain: ChainGeom,
    pub rows: Vec<AuditRow>,
}

/// Runs the chain and lines the detection taps up against the reference
/// strides and receptive fields.
pub fn audit(spec: &ChainSpec) -> Result<RfAudit> {
    let chain = chain_geometry(&spec.layers, spec.input_size)?;
    let rows = spec
        .detection_layers
        .iter()
        .map(|name| {
            let t = chain.at(name).ok_or_else(|| {
                Error::validation(
                    "detection_layers",
                    format!("no layer named `{name}` in chain"),
                )
            })?;
            let reference = DETECTION_LAYERS.iter().find(|l| l.name == name);
            Ok(AuditRow {
                name: name.clone(),
                stride: t.jump,
                rf: t.rf,
                out_size: t.out_size,
                reference_stride: reference.map(|l| l.stride),
                reference_rf: reference.map(|l| l.receptive_field),
            })
        })
        .collect::<Result<_>>()?;
    Ok(RfAudit { chain, rows })
}

impl fmt::Display for RfAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>6} {:>6} {:>6}", "layer", "jump", "rf", "size")?;
        for t in &self.chain.trace {
            let size = t.out_size.map_or("-".to_string(), |s| s.to_string());
            writeln!(f, "{:<10} {:>6} {:>6} {:>6}", t.name, t.jump, t.rf, size)?;
        }
        if self.rows.is_empty() {
            return Ok(());
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<10} {:>6} {:>8} {:>6} {:>8} {:>6}",
            "detection", "stride", "ref", "rf", "ref", "delta"
        )?;
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                f,
                "{:<10} {:>6} {:>8} {:>6} {:>8} {:>6}{}",
                r.name,
                r.stride,
                opt(r.reference_stride),
                r.rf,
                opt(r.reference_rf),
                r.rf_delta().map_or("-".to_string(), |d| format!("{d:+}")),
                if r.stride_matches() {
                    ""
                } else {
                    "  stride mismatch"
                }
            )?;
        }
        let flagged: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.rf_delta().is_some_and(|d| d != 0))
            .collect();
        if !flagged.is_empty() {
            write!(
                f,
                "note: computed theoretical receptive fields differ from the reference table at {} \
                 layer(s); the reference chain is not fully specified, so the deltas are reported, \
                 not tuned away",
                flagged.len()
            )?;
        }
        Ok(())
    }
}
