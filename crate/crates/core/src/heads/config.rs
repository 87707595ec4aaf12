use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Conventional head: trunk plus one predictor per task.
    #[serde(rename = "single")]
    Single,
    /// Two-leaf tree with a narrow routing branch.
    B,
    /// `B` plus batch-context routing masks on the leaf inputs.
    M,
    /// `M` with a separate last feature layer per task.
    T,
    /// `B` with a single, narrower routing layer.
    Lite,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Single, Variant::B, Variant::M, Variant::T, Variant::Lite];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Single => "single",
            Variant::B => "B",
            Variant::M => "M",
            Variant::T => "T",
            Variant::Lite => "Lite",
        }
    }

    pub fn is_tree(self) -> bool {
        self != Variant::Single
    }

    pub fn has_masks(self) -> bool {
        matches!(self, Variant::M | Variant::T)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkLayout {
    /// Two fully connected layers.
    TwoFc,
    /// Four fully connected layers, residual between equal widths.
    FourFc,
}

impl TrunkLayout {
    pub fn depth(self) -> usize {
        match self {
            TrunkLayout::TwoFc => 2,
            TrunkLayout::FourFc => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkConfig {
    pub layout: TrunkLayout,
    pub widths: Vec<usize>,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            layout: TrunkLayout::TwoFc,
            widths: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: Variant,
    pub input_dim: usize,
    pub trunk: TrunkConfig,
    /// Classes including background.
    pub num_classes: usize,
    /// Hidden layers in the routing branch; defaults to 2 (1 for `Lite`).
    pub routing_branch_depth: Option<usize>,
    /// Width of the routing branch; defaults to 32 (16 for `Lite`).
    pub routing_branch_width: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: Variant::B,
            input_dim: 64,
            trunk: TrunkConfig::default(),
            num_classes: 4,
            routing_branch_depth: None,
            routing_branch_width: None,
        }
    }
}

impl HeadConfig {
    pub fn with_variant(&self, variant: Variant) -> Self {
        Self { variant, ..self.clone() }
    }

    pub fn routing_depth(&self) -> usize {
        match self.variant {
            Variant::Lite => 1,
            _ => self.routing_branch_depth.unwrap_or(2),
        }
    }

    pub fn routing_width(&self) -> usize {
        self.routing_branch_width
            .unwrap_or(if self.variant == Variant::Lite { 16 } else { 32 })
    }

    /// Width of the features the predictors consume.
    pub fn feature_width(&self) -> usize {
        *self.trunk.widths.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("head.num_classes", "need at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("head.input_dim", "must be positive"));
        }
        if self.trunk.widths.len() != self.trunk.layout.depth() {
            return Err(Error::config(
                "head.trunk.widths",
                format!("{:?} needs {} widths", self.trunk.layout, self.trunk.layout.depth()),
            ));
        }
        if self.trunk.widths.contains(&0) {
            return Err(Error::config("head.trunk.widths", "widths must be positive"));
        }
        match (self.variant, self.routing_branch_depth) {
            (Variant::Lite, Some(d)) if d != 1 => {
                return Err(Error::config("head.routing_branch_depth", "Lite uses a single routing layer"))
            }
            (_, Some(d)) if !(1..=2).contains(&d) => {
                return Err(Error::config("head.routing_branch_depth", "must be 1 or 2"))
            }
            _ => {}
        }
        if self.routing_branch_width == Some(0) {
            return Err(Error::config("head.routing_branch_width", "must be positive"));
        }
        Ok(())
    }
}
