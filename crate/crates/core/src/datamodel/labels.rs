use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One semantic class of a label specification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub name: String,
    pub train_id: u8,
    pub is_foreground: bool,
    pub color: [u8; 3],
}

impl ClassDef {
    pub fn new(name: &str, train_id: u8, is_foreground: bool, color: [u8; 3]) -> Self {
        Self {
            name: name.to_string(),
            train_id,
            is_foreground,
            color,
        }
    }
}

/// The set of known classes a segmenter was trained on.
///
/// Train ids are contiguous in `[0, num_classes)`; `void_id` lies outside
/// that range and marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpecRaw", into = "LabelSpecRaw")]
pub struct LabelSpec {
    classes: Vec<ClassDef>,
    void_id: u8,
}

#[derive(Serialize, Deserialize)]
struct LabelSpecRaw {
    classes: Vec<ClassDef>,
    void_id: u8,
}

impl TryFrom<LabelSpecRaw> for LabelSpec {
    type Error = Error;
    fn try_from(raw: LabelSpecRaw) -> Result<Self> {
        LabelSpec::new(raw.classes, raw.void_id)
    }
}

impl From<LabelSpec> for LabelSpecRaw {
    fn from(s: LabelSpec) -> Self {
        LabelSpecRaw {
            classes: s.classes,
            void_id: s.void_id,
        }
    }
}

impl LabelSpec {
    pub fn new(mut classes: Vec<ClassDef>, void_id: u8) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::invalid("label spec needs at least one class"));
        }
        classes.sort_by_key(|c| c.train_id);
        for (i, c) in classes.iter().enumerate() {
            if c.train_id as usize != i {
                return Err(Error::invalid(format!(
                    "train ids must be distinct and contiguous from 0; class {} has id {}",
                    c.name, c.train_id
                )));
            }
        }
        if (void_id as usize) < classes.len() {
            return Err(Error::invalid(format!("void id {void_id} collides with a train id")));
        }
        if !classes.iter().any(|c| c.is_foreground) {
            return Err(Error::invalid("label spec declares no foreground class"));
        }
        Ok(Self { classes, void_id })
    }

    /// The 19-class Cityscapes training label set with its customary palette.
    pub fn cityscapes() -> Self {
        const ROWS: [(&str, bool, [u8; 3]); 19] = [
            ("road", false, [128, 64, 128]),
            ("sidewalk", false, [244, 35, 232]),
            ("building", false, [70, 70, 70]),
            ("wall", false, [102, 102, 156]),
            ("fence", false, [190, 153, 153]),
            ("pole", false, [153, 153, 153]),
            ("traffic light", false, [250, 170, 30]),
            ("traffic sign", false, [220, 220, 0]),
            ("vegetation", false, [107, 142, 35]),
            ("terrain", false, [152, 251, 152]),
            ("sky", false, [70, 130, 180]),
            ("person", true, [220, 20, 60]),
            ("rider", true, [255, 0, 0]),
            ("car", true, [0, 0, 142]),
            ("truck", true, [0, 0, 70]),
            ("bus", true, [0, 60, 100]),
            ("train", true, [0, 80, 100]),
            ("motorcycle", true, [0, 0, 230]),
            ("bicycle", true, [119, 11, 32]),
        ];
        let classes = ROWS
            .iter()
            .enumerate()
            .map(|(i, (n, fg, c))| ClassDef::new(n, i as u8, *fg, *c))
            .collect();
        Self::new(classes, 255).expect("static table is valid")
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn void_id(&self) -> u8 {
        self.void_id
    }

    pub fn is_known(&self, label: u8) -> bool {
        (label as usize) < self.classes.len()
    }

    pub fn is_valid(&self, label: u8) -> bool {
        self.is_known(label) || label == self.void_id
    }

    pub fn is_foreground(&self, label: u8) -> bool {
        self.classes.get(label as usize).is_some_and(|c| c.is_foreground)
    }

    pub fn class(&self, label: u8) -> Option<&ClassDef> {
        self.classes.get(label as usize)
    }

    pub fn id_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.train_id)
    }

    pub fn color_of(&self, label: u8) -> [u8; 3] {
        self.class(label).map_or([0, 0, 0], |c| c.color)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_gaps_and_void_collisions() {
        let a = ClassDef::new("a", 0, true, [0, 0, 0]);
        let c = ClassDef::new("c", 2, false, [0, 0, 0]);
        assert!(LabelSpec::new(vec![a.clone(), c], 255).is_err());
        let b = ClassDef::new("b", 1, false, [0, 0, 0]);
        assert!(LabelSpec::new(vec![a.clone(), b.clone()], 1).is_err());
        let bg_only = ClassDef::new("a", 0, false, [0, 0, 0]);
        assert!(LabelSpec::new(vec![bg_only, b.clone()], 255).is_err());
        let ok = LabelSpec::new(vec![b, a], 255).unwrap();
        assert_eq!(ok.classes()[0].name, "a");
    }

    #[test]
    fn cityscapes_table_is_consistent() {
        let s = LabelSpec::cityscapes();
        assert_eq!(s.num_classes(), 19);
        assert_eq!(s.id_of("car"), Some(13));
        assert!(s.is_foreground(13));
        assert!(!s.is_foreground(0));
        let json = serde_json::to_string(&s).unwrap();
        let back: LabelSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
