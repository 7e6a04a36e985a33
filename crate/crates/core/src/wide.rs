//! Serde adapter for `u64` fields in formats whose integers are `i64`.
//!
//! Values up to `i64::MAX` stay plain integers; larger ones are written as
//! decimal strings. Both forms are accepted on input.

use serde::{de, Deserialize, Deserializer, Serializer};

pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    match i64::try_from(*v) {
        Ok(i) => s.serialize_i64(i),
        Err(_) => s.serialize_str(&v.to_string()),
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Wide {
        Int(u64),
        Text(String),
    }
    match Wide::deserialize(d)? {
        Wide::Int(v) => Ok(v),
        Wide::Text(t) => t.parse().map_err(|_| de::Error::custom(format!("{t:?} is not a u64"))),
    }
}
