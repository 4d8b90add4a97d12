//! Finding keys, cohort label vocabularies and the per-cohort alias maps onto
//! the study findings.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Canonical lowercase snake_case finding name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FindingKey(String);

impl FindingKey {
    pub fn new(key: impl Into<String>) -> Self {
        FindingKey(key.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Normalizes a free-form label ("Pleural Effusion", "Pleural_Thickening")
    /// into a canonical key.
    pub fn normalize(raw: &str) -> Self {
        let mut out = String::with_capacity(raw.len());
        let mut last_us = true;
        for c in raw.trim().chars() {
            if c.is_ascii_alphanumeric() {
                out.push(c.to_ascii_lowercase());
                last_us = false;
            } else if !last_us {
                out.push('_');
                last_us = true;
            }
        }
        while out.ends_with('_') {
            out.pop();
        }
        FindingKey(out)
    }
}

impl fmt::Display for FindingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FindingKey {
    fn from(s: &str) -> Self {
        FindingKey::new(s)
    }
}

pub const NO_FINDING: &str = "no_finding";

/// The six findings used for stress testing and training.
pub const STUDY_FINDINGS: [&str; 6] = [
    "cardiomegaly",
    "edema",
    "pleural_effusion",
    "pneumonia",
    "hernia",
    "mass",
];

/// The eight findings readers label on every counterfactual.
pub const READ_FINDINGS: [&str; 8] = [
    "cardiomegaly",
    "edema",
    "pleural_effusion",
    "pneumonia",
    "hernia",
    "mass",
    "emphysema",
    "nodule",
];

pub fn study_findings() -> Vec<FindingKey> {
    STUDY_FINDINGS.iter().map(|s| FindingKey::new(*s)).collect()
}

pub fn read_findings() -> Vec<FindingKey> {
    READ_FINDINGS.iter().map(|s| FindingKey::new(*s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cohort {
    Nih,
    Mimic,
    Chexpert,
    Padchest,
    Synthetic,
}

impl Cohort {
    pub fn parse(s: &str) -> Option<Cohort> {
        match s.to_ascii_lowercase().as_str() {
            "nih" | "nih-cxr14" | "chestx-ray14" => Some(Cohort::Nih),
            "mimic" | "mimic-cxr" => Some(Cohort::Mimic),
            "chexpert" => Some(Cohort::Chexpert),
            "padchest" => Some(Cohort::Padchest),
            "synthetic" => Some(Cohort::Synthetic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Cohort::Nih => "NIH",
            Cohort::Mimic => "MIMIC",
            Cohort::Chexpert => "CHEXPERT",
            Cohort::Padchest => "PADCHEST",
            Cohort::Synthetic => "SYNTHETIC",
        }
    }

    pub fn vocabulary(self) -> LabelVocabulary {
        let names: &[&str] = match self {
            Cohort::Nih => &NIH_FINDINGS,
            Cohort::Mimic | Cohort::Chexpert => &CHEXPERT_FINDINGS,
            Cohort::Padchest => &PADCHEST_FINDINGS,
            Cohort::Synthetic => &SYNTHETIC_FINDINGS,
        };
        LabelVocabulary {
            cohort: self,
            findings: names.iter().map(|s| FindingKey::new(*s)).collect(),
        }
    }

    /// Key in this cohort's vocabulary that stands in for a study finding.
    /// `None` means the cohort does not label it (reported blank).
    pub fn study_alias(self, study: &str) -> Option<&'static str> {
        match self {
            Cohort::Nih => match study {
                "cardiomegaly" => Some("cardiomegaly"),
                "edema" => Some("edema"),
                "pleural_effusion" => Some("pleural_effusion"),
                "pneumonia" => Some("pneumonia"),
                "hernia" => Some("hernia"),
                "mass" => Some("mass"),
                "emphysema" => Some("emphysema"),
                "nodule" => Some("nodule"),
                _ => None,
            },
            Cohort::Mimic | Cohort::Chexpert => match study {
                "cardiomegaly" => Some("cardiomegaly"),
                "edema" => Some("edema"),
                "pleural_effusion" => Some("pleural_effusion"),
                "pneumonia" => Some("pneumonia"),
                "mass" => Some("lung_lesion"),
                _ => None,
            },
            Cohort::Padchest | Cohort::Synthetic => {
                READ_FINDINGS.iter().copied().find(|f| *f == study)
            }
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const NIH_FINDINGS: [&str; 14] = [
    "atelectasis",
    "consolidation",
    "infiltration",
    "pneumothorax",
    "edema",
    "emphysema",
    "fibrosis",
    "pleural_effusion",
    "pneumonia",
    "pleural_thickening",
    "cardiomegaly",
    "nodule",
    "mass",
    "hernia",
];

pub const CHEXPERT_FINDINGS: [&str; 14] = [
    "no_finding",
    "atelectasis",
    "consolidation",
    "pneumothorax",
    "edema",
    "pleural_effusion",
    "pneumonia",
    "pleural_other",
    "cardiomegaly",
    "lung_lesion",
    "lung_opacity",
    "enlarged_cardiomediastinum",
    "fracture",
    "support_devices",
];

pub const PADCHEST_FINDINGS: [&str; 9] = [
    "no_finding",
    "cardiomegaly",
    "edema",
    "pleural_effusion",
    "pneumonia",
    "hernia",
    "mass",
    "emphysema",
    "nodule",
];

pub const SYNTHETIC_FINDINGS: [&str; 9] = PADCHEST_FINDINGS;

/// PadChest curator label strings collapsed onto vocabulary keys. Anything
/// not listed is ignored.
pub const PADCHEST_ALIASES: [(&str, &str); 14] = [
    ("normal", "no_finding"),
    ("cardiomegaly", "cardiomegaly"),
    ("pulmonary edema", "edema"),
    ("edema", "edema"),
    ("pleural effusion", "pleural_effusion"),
    ("loculated pleural effusion", "pleural_effusion"),
    ("pneumonia", "pneumonia"),
    ("hiatal hernia", "hernia"),
    ("hernia", "hernia"),
    ("mass", "mass"),
    ("pulmonary mass", "mass"),
    ("lung mass", "mass"),
    ("emphysema", "emphysema"),
    ("nodule", "nodule"),
];

/// How a vocabulary expresses "no pathologic finding".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoFindingRule {
    /// Explicit entry at this index.
    Entry(usize),
    /// No entry; a scan is no-finding when every entry is absent.
    AllAbsent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVocabulary {
    pub cohort: Cohort,
    pub findings: Vec<FindingKey>,
}

impl LabelVocabulary {
    pub fn custom(cohort: Cohort, findings: Vec<FindingKey>) -> Self {
        LabelVocabulary { cohort, findings }
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.findings.iter().position(|f| f.as_str() == key)
    }

    /// `None` when the vocabulary cannot express no-finding at all.
    pub fn no_finding_rule(&self) -> Option<NoFindingRule> {
        if let Some(i) = self.index_of(NO_FINDING) {
            Some(NoFindingRule::Entry(i))
        } else if self.cohort == Cohort::Nih && self.findings.len() == NIH_FINDINGS.len() {
            Some(NoFindingRule::AllAbsent)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_labels() {
        assert_eq!(FindingKey::normalize("Pleural Effusion").as_str(), "pleural_effusion");
        assert_eq!(FindingKey::normalize("Pleural_Thickening").as_str(), "pleural_thickening");
        assert_eq!(FindingKey::normalize(" No Finding ").as_str(), "no_finding");
        assert_eq!(
            FindingKey::normalize("Enlarged Cardiomediastinum").as_str(),
            "enlarged_cardiomediastinum"
        );
    }

    #[test]
    fn vocabularies_have_fourteen_entries() {
        assert_eq!(Cohort::Nih.vocabulary().len(), 14);
        assert_eq!(Cohort::Mimic.vocabulary().len(), 14);
        assert_eq!(Cohort::Chexpert.vocabulary().len(), 14);
        assert_eq!(
            Cohort::Nih.vocabulary().no_finding_rule(),
            Some(NoFindingRule::AllAbsent)
        );
        assert_eq!(
            Cohort::Mimic.vocabulary().no_finding_rule(),
            Some(NoFindingRule::Entry(0))
        );
    }

    #[test]
    fn chexpert_has_no_hernia() {
        assert_eq!(Cohort::Chexpert.study_alias("hernia"), None);
        assert_eq!(Cohort::Chexpert.study_alias("mass"), Some("lung_lesion"));
        for f in STUDY_FINDINGS {
            assert!(Cohort::Nih.study_alias(f).is_some());
            assert!(Cohort::Padchest.study_alias(f).is_some());
        }
    }
}
