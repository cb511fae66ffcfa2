//! The fixed registry of fine-grained evaluation dimensions.
//!
//! Twenty-one dimensions are grouped into seven core capabilities of three
//! dimensions each. Ids follow the canonical table order, so `id / 3` is the
//! capability index.

use std::fmt;

use serde::Serialize;

use crate::error::{MdrError, Result};

/// Number of fine-grained dimensions.
pub const NUM_DIMENSIONS: usize = 21;

/// Dimensions owned by each core capability.
pub const DIMENSIONS_PER_CAPABILITY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Capability {
    /// Safety & Ethics
    SE,
    /// Coarse Perception
    CP,
    /// Fine-grained Perception
    FP,
    /// Instance Reasoning
    IR,
    /// Logical Reasoning
    LR,
    /// Science & Technology
    ST,
    /// Mathematics
    MA,
}

impl Capability {
    pub const ALL: [Capability; 7] = [
        Capability::SE,
        Capability::CP,
        Capability::FP,
        Capability::IR,
        Capability::LR,
        Capability::ST,
        Capability::MA,
    ];

    pub fn full_name(self) -> &'static str {
        match self {
            Capability::SE => "Safety & Ethics",
            Capability::CP => "Coarse Perception",
            Capability::FP => "Fine-grained Perception",
            Capability::IR => "Instance Reasoning",
            Capability::LR => "Logical Reasoning",
            Capability::ST => "Science & Technology",
            Capability::MA => "Mathematics",
        }
    }

    pub fn abbreviation(self) -> &'static str {
        match self {
            Capability::SE => "SE",
            Capability::CP => "CP",
            Capability::FP => "FP",
            Capability::IR => "IR",
            Capability::LR => "LR",
            Capability::ST => "ST",
            Capability::MA => "MA",
        }
    }

    /// Ids of the three dimensions belonging to this capability.
    pub fn dimension_ids(self) -> std::ops::Range<usize> {
        let start = self as usize * DIMENSIONS_PER_CAPABILITY;
        start..start + DIMENSIONS_PER_CAPABILITY
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.abbreviation())
    }
}

/// One fine-grained dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dimension {
    pub id: usize,
    pub name: &'static str,
    /// Short label used in compact reports.
    pub short_name: &'static str,
    pub core_capability: Capability,
    /// Share of top-3 tag slots in the curated corpus, as a fraction.
    pub tag_ratio: f64,
}

const fn dim(
    id: usize,
    name: &'static str,
    short_name: &'static str,
    core_capability: Capability,
    tag_ratio: f64,
) -> Dimension {
    Dimension {
        id,
        name,
        short_name,
        core_capability,
        tag_ratio,
    }
}

static DIMENSIONS: [Dimension; NUM_DIMENSIONS] = [
    dim(0, "Harmful Content Detection", "Harmful", Capability::SE, 0.048),
    dim(1, "Bias & Fairness", "Bias", Capability::SE, 0.031),
    dim(2, "Privacy & Personal Information", "Privacy", Capability::SE, 0.020),
    dim(3, "Style & Quality", "Style", Capability::CP, 0.019),
    dim(4, "Scene & Topic", "Scene", Capability::CP, 0.107),
    dim(5, "Emotion", "Emotion", Capability::CP, 0.036),
    dim(6, "Attribute & Celebrity Recognition", "Celebrity", Capability::FP, 0.048),
    dim(7, "Object Location", "Location", Capability::FP, 0.167),
    dim(8, "Object Counting", "Counting", Capability::FP, 0.037),
    dim(9, "Single Instance Attribute", "Attribute", Capability::IR, 0.151),
    dim(10, "Cross-instance Comparison", "Comparison", Capability::IR, 0.036),
    dim(11, "Cross-instance Relation", "Relation", Capability::IR, 0.064),
    dim(12, "Diagram Reasoning", "Diagram", Capability::LR, 0.032),
    dim(13, "Code & Sequence Reasoning", "Code", Capability::LR, 0.001),
    dim(14, "Common Reasoning", "Common", Capability::LR, 0.133),
    dim(15, "Natural Science", "Natural", Capability::ST, 0.032),
    dim(16, "Engineering", "Engineering", Capability::ST, 0.009),
    dim(17, "Geography & Earth Science", "Geo", Capability::ST, 0.008),
    dim(18, "Numeric Calculation", "Calc", Capability::MA, 0.011),
    dim(19, "Geometry", "Geometry", Capability::MA, 0.004),
    dim(20, "Statistical Analysis", "Statistics", Capability::MA, 0.007),
];

/// All dimensions in id order.
pub fn dimensions() -> &'static [Dimension; NUM_DIMENSIONS] {
    &DIMENSIONS
}

pub fn dimension_by_id(id: usize) -> Result<&'static Dimension> {
    DIMENSIONS.get(id).ok_or(MdrError::InvalidDimension(id))
}

pub fn core_of(id: usize) -> Result<Capability> {
    if id >= NUM_DIMENSIONS {
        return Err(MdrError::InvalidDimension(id));
    }
    Ok(Capability::ALL[id / DIMENSIONS_PER_CAPABILITY])
}

/// Name lookup; accepts either the full or the short name, case-insensitively.
pub fn dimension_by_name(name: &str) -> Option<&'static Dimension> {
    DIMENSIONS.iter().find(|d| {
        d.name.eq_ignore_ascii_case(name) || d.short_name.eq_ignore_ascii_case(name)
    })
}
