use super::{parse_cfg, ParsedCfg};

/// Bundled reference network: 640x640 input, 80x80x18 head.
pub const REFERENCE_CFG: &str = include_str!("../../cfg/reference.cfg");

/// Parsed [`REFERENCE_CFG`].
pub fn reference_cfg() -> ParsedCfg {
    parse_cfg(REFERENCE_CFG).expect("bundled configuration parses")
}
