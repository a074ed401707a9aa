use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::page::{DocClass, PixelBox};

const BUNDLED: [(&str, &str); 3] = [
    ("article", include_str!("../../data/templates/article.json")),
    ("report", include_str!("../../data/templates/report.json")),
    ("poster", include_str!("../../data/templates/poster.json")),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSlot {
    pub class: DocClass,
    #[serde(rename = "box")]
    pub bbox: PixelBox,
}

/// A fixed arrangement of class-labeled slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateLayout {
    pub width: usize,
    pub height: usize,
    pub slots: Vec<TemplateSlot>,
}

impl TemplateLayout {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn bundled() -> Vec<(&'static str, TemplateLayout)> {
        BUNDLED.iter().map(|(n, s)| (*n, Self::from_json(s).expect("bundled template is valid"))).collect()
    }

    /// Slots must be non-empty, on the page, element-classed and disjoint.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(input!("template page is empty"));
        }
        for (i, s) in self.slots.iter().enumerate() {
            if s.class == DocClass::Background {
                return Err(input!("slot {i} has no element class"));
            }
            if s.bbox.is_empty() || !s.bbox.fits_in(self.width, self.height) {
                return Err(input!("slot {i} box {:?} is empty or off the page", s.bbox));
            }
            if let Some(j) = self.slots[..i].iter().position(|o| o.bbox.intersects(&s.bbox)) {
                return Err(input!("slots {j} and {i} overlap"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_templates_are_valid() {
        let all = TemplateLayout::bundled();
        assert_eq!(all.len(), 3);
        for (_, t) in &all {
            assert!(t.slots.len() >= 4);
        }
    }

    #[test]
    fn overlapping_slots_are_rejected() {
        let t = r#"{"width": 100, "height": 100, "slots": [
            {"class": "figure", "box": {"x": 0, "y": 0, "w": 50, "h": 50}},
            {"class": "table", "box": {"x": 40, "y": 40, "w": 50, "h": 50}}]}"#;
        assert!(TemplateLayout::from_json(t).is_err());
        let t = r#"{"width": 100, "height": 100, "slots": [
            {"class": "background", "box": {"x": 0, "y": 0, "w": 50, "h": 50}}]}"#;
        assert!(TemplateLayout::from_json(t).is_err());
    }
}
