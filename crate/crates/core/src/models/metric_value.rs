use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A metric value: a finite float or the `-inf` sentinel of a task with no
/// model yet. Serializes `-inf` as the string `"-inf"` since JSON has no
/// infinities.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct MetricValue(f64);

impl MetricValue {
    pub const NEG_INFINITY: MetricValue = MetricValue(f64::NEG_INFINITY);

    pub fn new(v: f64) -> Result<Self> {
        if v.is_finite() || v == f64::NEG_INFINITY {
            Ok(MetricValue(v))
        } else {
            Err(Error::validation(format!("metric value {v} is neither finite nor -inf")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl std::fmt::Display for MetricValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.0.is_finite() {
            write!(f, "{}", self.0)
        } else {
            f.write_str("-inf")
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => MetricValue::new(v).map_err(serde::de::Error::custom),
            Raw::Str(s) if s == "-inf" => Ok(MetricValue::NEG_INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad metric value `{s}`"))),
        }
    }
}
