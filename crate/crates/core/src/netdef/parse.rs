//! Text configuration grammar: `[section]` headers, `key=value` lines and
//! `#` comments. Unknown keys inside known sections are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use super::{Anchor, ConvSpec, LayerSpec, NetworkDef};
use crate::augment::AugmentConfig;
use crate::ops::Activation;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CfgError {
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { name: String, line: usize },
    #[error("line {line}: first section must be [net], found [{name}]")]
    NetSectionFirst { name: String, line: usize },
    #[error("section [{section}] starting at line {line} is missing required key `{key}`")]
    MissingKey {
        section: String,
        key: &'static str,
        line: usize,
    },
    #[error("line {line}: malformed value: {detail}")]
    MalformedValue { line: usize, detail: String },
    #[error("configuration defines no layers")]
    EmptyNetwork,
}

impl CfgError {
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::UnknownSection { line, .. }
            | Self::NetSectionFirst { line, .. }
            | Self::MissingKey { line, .. }
            | Self::MalformedValue { line, .. } => Some(*line),
            Self::EmptyNetwork => None,
        }
    }
}

/// Everything a configuration file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCfg {
    pub net: NetworkDef,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

struct Section {
    name: String,
    line: usize,
    /// key -> (value, line)
    entries: BTreeMap<String, (String, usize)>,
}

impl Section {
    fn raw(&self, key: &'static str) -> Result<Option<(&str, usize)>, CfgError> {
        Ok(self.entries.get(key).map(|(v, l)| (v.as_str(), *l)))
    }

    fn parse<T: FromStr>(&self, key: &'static str) -> Result<Option<T>, CfgError> {
        match self.raw(key)? {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|_| CfgError::MalformedValue {
                line,
                detail: format!("`{key}={v}`"),
            }),
        }
    }

    fn or<T: FromStr>(&self, key: &'static str, default: T) -> Result<T, CfgError> {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &'static str) -> Result<T, CfgError> {
        self.parse(key)?.ok_or_else(|| CfgError::MissingKey {
            section: self.name.clone(),
            key,
            line: self.line,
        })
    }

    fn list<T: FromStr>(&self, key: &'static str) -> Result<Option<Vec<T>>, CfgError> {
        let Some((v, line)) = self.raw(key)? else {
            return Ok(None);
        };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>().map_err(|_| CfgError::MalformedValue {
                    line,
                    detail: format!("`{key}` entry `{s}`"),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn activation(&self) -> Result<Activation, CfgError> {
        match self.raw("activation")? {
            None => Ok(Activation::Linear),
            Some((v, line)) => Activation::from_name(v).ok_or_else(|| CfgError::MalformedValue {
                line,
                detail: format!("unknown activation `{v}`"),
            }),
        }
    }

    fn flag(&self, key: &'static str) -> Result<bool, CfgError> {
        match self.raw(key)? {
            None => Ok(false),
            Some(("0", _)) => Ok(false),
            Some(("1", _)) => Ok(true),
            Some((v, line)) => Err(CfgError::MalformedValue {
                line,
                detail: format!("`{key}={v}` must be 0 or 1"),
            }),
        }
    }
}

const LAYER_SECTIONS: [&str; 4] = ["convolutional", "shortcut", "dropout", "yolo"];

fn split_sections(text: &str) -> Result<Vec<Section>, CfgError> {
    let mut sections: Vec<Section> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CfgError::MalformedValue {
                    line,
                    detail: format!("unterminated section header `{s}`"),
                })?
                .trim()
                .to_string();
            let known = name == "net" || name == "network" || LAYER_SECTIONS.contains(&name.as_str());
            if !known {
                return Err(CfgError::UnknownSection { name, line });
            }
            sections.push(Section {
                name,
                line,
                entries: BTreeMap::new(),
            });
            continue;
        }
        let (key, value) = s.split_once('=').ok_or_else(|| CfgError::MalformedValue {
            line,
            detail: format!("expected key=value, got `{s}`"),
        })?;
        let section = sections.last_mut().ok_or_else(|| CfgError::MalformedValue {
            line,
            detail: "key outside of any section".into(),
        })?;
        section
            .entries
            .insert(key.trim().to_string(), (value.trim().to_string(), line));
    }
    Ok(sections)
}

fn parse_layer(section: &Section, index: usize) -> Result<LayerSpec, CfgError> {
    Ok(match section.name.as_str() {
        "convolutional" => LayerSpec::Convolutional(ConvSpec {
            filters: section.required("filters")?,
            size: section.required("size")?,
            stride: section.or("stride", 1)?,
            pad: section.or("pad", 0)?,
            batch_normalize: section.flag("batch_normalize")?,
            activation: section.activation()?,
        }),
        "shortcut" => {
            let from: i64 = section.required("from")?;
            let line = section.raw("from")?.map_or(section.line, |(_, l)| l);
            let absolute = if from < 0 { index as i64 + from } else { from };
            if absolute < 0 || absolute >= index as i64 {
                return Err(CfgError::MalformedValue {
                    line,
                    detail: format!("shortcut from={from} does not name an earlier layer"),
                });
            }
            LayerSpec::Shortcut {
                from: absolute as usize,
                activation: section.activation()?,
            }
        }
        "dropout" => LayerSpec::Dropout {
            probability: section.or("probability", 0.5)?,
        },
        "yolo" => {
            let values: Vec<f64> = section.list("anchors")?.ok_or_else(|| CfgError::MissingKey {
                section: section.name.clone(),
                key: "anchors",
                line: section.line,
            })?;
            if !values.len().is_multiple_of(2) {
                return Err(CfgError::MalformedValue {
                    line: section.raw("anchors")?.map_or(section.line, |(_, l)| l),
                    detail: "anchors must be w,h pairs".into(),
                });
            }
            LayerSpec::Yolo {
                anchors: values.chunks(2).map(|p| Anchor { w: p[0], h: p[1] }).collect(),
                classes: section.or("classes", 1)?,
            }
        }
        other => unreachable!("section [{other}] filtered by split_sections"),
    })
}

/// Parses a configuration. Shapes and profile rules are not checked here;
/// see [`NetworkDef::validate`].
pub fn parse_cfg(text: &str) -> Result<ParsedCfg, CfgError> {
    let sections = split_sections(text)?;
    let Some((net, rest)) = sections.split_first() else {
        return Err(CfgError::EmptyNetwork);
    };
    if net.name != "net" && net.name != "network" {
        return Err(CfgError::NetSectionFirst {
            name: net.name.clone(),
            line: net.line,
        });
    }
    if let Some(s) = rest.iter().find(|s| s.name == "net" || s.name == "network") {
        return Err(CfgError::MalformedValue {
            line: s.line,
            detail: "only one [net] section is allowed".into(),
        });
    }

    let d = TrainConfig::default();
    let train = TrainConfig {
        batch: net.or("batch", d.batch)?,
        subdivisions: net.or("subdivisions", d.subdivisions)?,
        momentum: net.or("momentum", d.momentum)?,
        decay: net.or("decay", d.decay)?,
        learning_rate: net.or("learning_rate", d.learning_rate)?,
        burn_in: net.or("burn_in", d.burn_in)?,
        max_batches: net.or("max_batches", d.max_batches)?,
        steps: net.list("steps")?.unwrap_or(d.steps),
        scales: net.list("scales")?.unwrap_or(d.scales),
        ignore_thresh: net.or("ignore_thresh", d.ignore_thresh)?,
    };
    let a = AugmentConfig::default();
    let augment = AugmentConfig {
        saturation: net.or("saturation", a.saturation)?,
        exposure: net.or("exposure", a.exposure)?,
        hue: net.or("hue", a.hue)?,
    };

    let layers = rest
        .iter()
        .enumerate()
        .map(|(i, s)| parse_layer(s, i))
        .collect::<Result<Vec<_>, _>>()?;
    if layers.is_empty() {
        return Err(CfgError::EmptyNetwork);
    }
    Ok(ParsedCfg {
        net: NetworkDef {
            input_width: net.required("width")?,
            input_height: net.required("height")?,
            input_channels: net.or("channels", 3)?,
            layers,
        },
        train,
        augment,
    })
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Prints a configuration that [`parse_cfg`] reads back to an equal value.
pub fn to_cfg_string(net: &NetworkDef, train: &TrainConfig, augment: &AugmentConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[net]");
    let _ = writeln!(s, "width={}", net.input_width);
    let _ = writeln!(s, "height={}", net.input_height);
    let _ = writeln!(s, "channels={}", net.input_channels);
    let _ = writeln!(s, "batch={}", train.batch);
    let _ = writeln!(s, "subdivisions={}", train.subdivisions);
    let _ = writeln!(s, "momentum={}", train.momentum);
    let _ = writeln!(s, "decay={}", train.decay);
    let _ = writeln!(s, "learning_rate={}", train.learning_rate);
    let _ = writeln!(s, "burn_in={}", train.burn_in);
    let _ = writeln!(s, "max_batches={}", train.max_batches);
    let _ = writeln!(s, "steps={}", join(&train.steps));
    let _ = writeln!(s, "scales={}", join(&train.scales));
    let _ = writeln!(s, "ignore_thresh={}", train.ignore_thresh);
    let _ = writeln!(s, "saturation={}", augment.saturation);
    let _ = writeln!(s, "exposure={}", augment.exposure);
    let _ = writeln!(s, "hue={}", augment.hue);
    for (i, layer) in net.layers.iter().enumerate() {
        let _ = writeln!(s, "\n# layer {i}");
        let _ = writeln!(s, "[{}]", layer.kind());
        match layer {
            LayerSpec::Convolutional(c) => {
                if c.batch_normalize {
                    let _ = writeln!(s, "batch_normalize=1");
                }
                let _ = writeln!(s, "filters={}", c.filters);
                let _ = writeln!(s, "size={}", c.size);
                let _ = writeln!(s, "stride={}", c.stride);
                let _ = writeln!(s, "pad={}", c.pad);
                let _ = writeln!(s, "activation={}", c.activation.name());
            }
            LayerSpec::Shortcut { from, activation } => {
                let _ = writeln!(s, "from={}", *from as i64 - i as i64);
                let _ = writeln!(s, "activation={}", activation.name());
            }
            LayerSpec::Dropout { probability } => {
                let _ = writeln!(s, "probability={probability}");
            }
            LayerSpec::Yolo { anchors, classes } => {
                let pairs: Vec<String> = anchors.iter().map(|a| format!("{},{}", a.w, a.h)).collect();
                let _ = writeln!(s, "anchors={}", pairs.join(", "));
                let _ = writeln!(s, "classes={classes}");
            }
        }
    }
    s
}
