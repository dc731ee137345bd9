//! The seven traffic object categories.

use crate::error::{Error, Result};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Car,
    Pedestrian,
    Bike,
    Motorcycle,
    Bus,
    Truck,
    Rider,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::Car,
        ClassLabel::Pedestrian,
        ClassLabel::Bike,
        ClassLabel::Motorcycle,
        ClassLabel::Bus,
        ClassLabel::Truck,
        ClassLabel::Rider,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Car => "car",
            ClassLabel::Pedestrian => "pedestrian",
            ClassLabel::Bike => "bike",
            ClassLabel::Motorcycle => "motorcycle",
            ClassLabel::Bus => "bus",
            ClassLabel::Truck => "truck",
            ClassLabel::Rider => "rider",
        }
    }

    /// A common alternate name for each class, used in generated expressions
    /// and resolved by the synonym table.
    pub fn synonym(self) -> &'static str {
        match self {
            ClassLabel::Car => "vehicle",
            ClassLabel::Pedestrian => "person",
            ClassLabel::Bike => "bicycle",
            ClassLabel::Motorcycle => "motor",
            ClassLabel::Bus => "coach",
            ClassLabel::Truck => "lorry",
            ClassLabel::Rider => "cyclist",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ClassLabel::ALL
            .iter()
            .find(|c| c.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown class label '{s}'")))
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
