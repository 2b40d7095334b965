//! Serde adapter for `f64` fields that may be `+inf`.
//!
//! JSON has no infinity literal, so infinite values are written as the string
//! `"inf"`. Finite values stay plain numbers.

use serde::de::{self, Deserializer, Visitor};
use serde::Serializer;
use std::fmt;

pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    struct InfVisitor;

    impl Visitor<'_> for InfVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("a number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v.to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    d.deserialize_any(InfVisitor)
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct W {
        #[serde(with = "super")]
        v: f64,
    }

    #[test]
    fn infinite_round_trip() {
        let s = serde_json::to_string(&W { v: f64::INFINITY }).unwrap();
        assert_eq!(s, r#"{"v":"inf"}"#);
        assert_eq!(serde_json::from_str::<W>(&s).unwrap().v, f64::INFINITY);
        assert_eq!(serde_json::from_str::<W>(r#"{"v":10}"#).unwrap().v, 10.0);
        assert_eq!(serde_json::from_str::<W>(r#"{"v":2.5}"#).unwrap().v, 2.5);
        assert!(serde_json::from_str::<W>(r#"{"v":"big"}"#).is_err());
    }
}
