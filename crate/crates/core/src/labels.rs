//! Per-finding label values and label vectors.

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::findings::{LabelVocabulary, NoFindingRule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelValue {
    Absent,
    Present,
    Unsure,
    /// Excluded from the training loss.
    Masked,
    /// Soft target in [0, 1].
    Soft(f64),
}

impl LabelValue {
    pub fn from_bool(present: bool) -> Self {
        if present {
            LabelValue::Present
        } else {
            LabelValue::Absent
        }
    }

    pub fn is_present(self) -> bool {
        matches!(self, LabelValue::Present)
    }

    /// Uncertain becomes absent; everything else is unchanged.
    pub fn uncertain_as_negative(self) -> Self {
        match self {
            LabelValue::Unsure => LabelValue::Absent,
            v => v,
        }
    }

    /// Numeric training target, `None` when masked or unsure.
    pub fn target(self) -> Option<f64> {
        match self {
            LabelValue::Absent => Some(0.0),
            LabelValue::Present => Some(1.0),
            LabelValue::Soft(x) => Some(x),
            LabelValue::Unsure | LabelValue::Masked => None,
        }
    }

    pub fn is_soft(self) -> bool {
        matches!(self, LabelValue::Soft(_))
    }
}

impl Serialize for LabelValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            LabelValue::Absent => s.serialize_u8(0),
            LabelValue::Present => s.serialize_u8(1),
            LabelValue::Soft(x) => s.serialize_f64(x),
            LabelValue::Unsure => s.serialize_str("unsure"),
            LabelValue::Masked => s.serialize_str("masked"),
        }
    }
}

impl<'de> Deserialize<'de> for LabelValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = LabelValue;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("0, 1, a float in [0,1], \"unsure\" or \"masked\"")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<LabelValue, E> {
                match v {
                    0 => Ok(LabelValue::Absent),
                    1 => Ok(LabelValue::Present),
                    _ => Err(E::custom(format!("label value {v} out of range"))),
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<LabelValue, E> {
                if v < 0 {
                    return Err(E::custom(format!("label value {v} out of range")));
                }
                self.visit_u64(v as u64)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<LabelValue, E> {
                if (0.0..=1.0).contains(&v) {
                    Ok(LabelValue::Soft(v))
                } else {
                    Err(E::custom(format!("soft label {v} outside [0,1]")))
                }
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<LabelValue, E> {
                match v {
                    "unsure" => Ok(LabelValue::Unsure),
                    "masked" => Ok(LabelValue::Masked),
                    _ => Err(E::custom(format!("unknown label value {v:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub values: Vec<LabelValue>,
}

impl LabelVector {
    pub fn absent(len: usize) -> Self {
        LabelVector {
            values: vec![LabelValue::Absent; len],
        }
    }

    pub fn get(&self, vocab: &LabelVocabulary, key: &str) -> Option<LabelValue> {
        vocab.index_of(key).map(|i| self.values[i])
    }

    pub fn set(&mut self, vocab: &LabelVocabulary, key: &str, value: LabelValue) -> bool {
        match vocab.index_of(key) {
            Some(i) => {
                self.values[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn uncertain_as_negative(&self) -> Self {
        LabelVector {
            values: self.values.iter().map(|v| v.uncertain_as_negative()).collect(),
        }
    }

    /// No-finding status under the vocabulary's rule.
    pub fn is_no_finding(&self, rule: NoFindingRule) -> bool {
        match rule {
            NoFindingRule::Entry(i) => self.values[i].is_present(),
            NoFindingRule::AllAbsent => self.values.iter().all(|v| !v.is_present()),
        }
    }

    /// Restores the invariant that an explicit no-finding entry excludes
    /// every pathology: a present pathology clears the no-finding flag.
    pub fn reconcile_no_finding(&mut self, rule: NoFindingRule) {
        if let NoFindingRule::Entry(nf) = rule {
            let any = self
                .values
                .iter()
                .enumerate()
                .any(|(i, v)| i != nf && v.is_present());
            if any {
                self.values[nf] = LabelValue::Absent;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn json_forms() {
        let v = vec![
            LabelValue::Absent,
            LabelValue::Present,
            LabelValue::Soft(0.46),
            LabelValue::Soft(0.0),
            LabelValue::Unsure,
            LabelValue::Masked,
        ];
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"[0,1,0.46,0.0,"unsure","masked"]"#);
        let back: Vec<LabelValue> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<LabelValue>("3").is_err());
        assert!(serde_json::from_str::<LabelValue>("1.5").is_err());
    }

    fn any_value() -> impl Strategy<Value = LabelValue> {
        prop_oneof![
            Just(LabelValue::Absent),
            Just(LabelValue::Present),
            Just(LabelValue::Unsure),
            Just(LabelValue::Masked),
            (0.0f64..=1.0).prop_map(LabelValue::Soft),
        ]
    }

    proptest! {
        #[test]
        fn uncertain_mapping_is_idempotent(vals in proptest::collection::vec(any_value(), 0..20)) {
            let v = LabelVector { values: vals };
            let once = v.uncertain_as_negative();
            prop_assert_eq!(once.uncertain_as_negative(), once.clone());
            prop_assert!(once.values.iter().all(|x| *x != LabelValue::Unsure));
        }
    }
}
