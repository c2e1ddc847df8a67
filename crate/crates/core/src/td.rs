//! Thing Descriptions: the self-describing documents every device or software
//! component advertises, plus the query model used to discover them.
//!
//! The serialized form is canonical JSON (sorted keys, no whitespace) so that
//! two equal descriptions always produce identical bytes.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TdError {
    #[error("malformed thing description: {0}")]
    MalformedDocument(String),
    #[error("invariant violated on `{field}`: {reason}")]
    InvariantViolation { field: String, reason: String },
}

impl TdError {
    fn invariant(field: &str, reason: impl Into<String>) -> Self {
        TdError::InvariantViolation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Name of the offending field for invariant violations.
    pub fn field(&self) -> Option<&str> {
        match self {
            TdError::InvariantViolation { field, .. } => Some(field),
            TdError::MalformedDocument(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThingType {
    Sensor,
    Actuator,
    Software,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    TemperatureCelsius,
    HumidityPercent,
    OccupancyCount,
    PowerFraction,
    GenericNumber,
}

impl ValueKind {
    pub const ALL: [ValueKind; 5] = [
        ValueKind::TemperatureCelsius,
        ValueKind::HumidityPercent,
        ValueKind::OccupancyCount,
        ValueKind::PowerFraction,
        ValueKind::GenericNumber,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ValueKind::TemperatureCelsius => "temperature_celsius",
            ValueKind::HumidityPercent => "humidity_percent",
            ValueKind::OccupancyCount => "occupancy_count",
            ValueKind::PowerFraction => "power_fraction",
            ValueKind::GenericNumber => "generic_number",
        }
    }

    /// Short path segment used in property hrefs (`/properties/<segment>`).
    pub fn path_segment(self) -> &'static str {
        match self {
            ValueKind::TemperatureCelsius => "temperature",
            ValueKind::HumidityPercent => "humidity",
            ValueKind::OccupancyCount => "occupancy",
            ValueKind::PowerFraction => "power",
            ValueKind::GenericNumber => "value",
        }
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ValueKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown value kind `{s}`"))
    }
}

impl ThingType {
    pub fn as_str(self) -> &'static str {
        match self {
            ThingType::Sensor => "sensor",
            ThingType::Actuator => "actuator",
            ThingType::Software => "software",
        }
    }
}

impl FromStr for ThingType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sensor" => Ok(ThingType::Sensor),
            "actuator" => Ok(ThingType::Actuator),
            "software" => Ok(ThingType::Software),
            other => Err(format!("unknown thing type `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropertyDef {
    pub name: String,
    pub value_kind: ValueKind,
    pub readable: bool,
    pub writable: bool,
    pub href: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ActionDef {
    pub name: String,
    pub href: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<ValueKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ThingDescription {
    pub id: String,
    pub title: String,
    pub thing_type: ThingType,
    pub domain_tag: String,
    pub properties: Vec<PropertyDef>,
    #[serde(default)]
    pub actions: Vec<ActionDef>,
    pub base_endpoint: String,
    pub ttl_seconds: u64,
}

impl ThingDescription {
    pub fn validate(&self) -> Result<(), TdError> {
        if self.id.is_empty() {
            return Err(TdError::invariant("id", "must be non-empty"));
        }
        if self.ttl_seconds == 0 {
            return Err(TdError::invariant("ttl_seconds", "must be positive"));
        }
        let mut names = HashSet::new();
        for p in &self.properties {
            if !names.insert(p.name.as_str()) {
                return Err(TdError::invariant(
                    "properties",
                    format!("duplicate property name `{}`", p.name),
                ));
            }
            if !(p.readable || p.writable) {
                return Err(TdError::invariant(
                    "properties",
                    format!("property `{}` is neither readable nor writable", p.name),
                ));
            }
            if p.href.is_empty() {
                return Err(TdError::invariant(
                    "properties",
                    format!("property `{}` has an empty href", p.name),
                ));
            }
        }
        Ok(())
    }

    pub fn has_value_kind(&self, kind: ValueKind) -> bool {
        self.properties.iter().any(|p| p.value_kind == kind)
    }
}

/// Canonical JSON: object keys sorted, no insignificant whitespace.
pub fn serialize_td(td: &ThingDescription) -> Vec<u8> {
    // serde_json's default map is a BTreeMap, so going through Value sorts keys.
    let value = serde_json::to_value(td).expect("thing descriptions always serialize");
    serde_json::to_vec(&value).expect("json values always serialize")
}

pub fn parse_td(raw: &[u8]) -> Result<ThingDescription, TdError> {
    let value: Value =
        serde_json::from_slice(raw).map_err(|e| TdError::MalformedDocument(e.to_string()))?;
    td_from_value(value)
}

pub fn td_from_value(value: Value) -> Result<ThingDescription, TdError> {
    let obj = value
        .as_object()
        .ok_or_else(|| TdError::MalformedDocument("expected a JSON object".into()))?;
    // Report missing required fields by their schema name before serde gets a chance
    // to produce a less specific message.
    const REQUIRED: [(&str, &str); 7] = [
        ("id", "id"),
        ("title", "title"),
        ("thingType", "thing_type"),
        ("domainTag", "domain_tag"),
        ("properties", "properties"),
        ("baseEndpoint", "base_endpoint"),
        ("ttlSeconds", "ttl_seconds"),
    ];
    for (key, field) in REQUIRED {
        if !obj.contains_key(key) {
            return Err(TdError::invariant(field, "missing"));
        }
    }
    if obj.get("ttlSeconds").and_then(Value::as_u64) == Some(0) {
        return Err(TdError::invariant("ttl_seconds", "must be positive"));
    }
    let td: ThingDescription =
        serde_json::from_value(value).map_err(|e| TdError::MalformedDocument(e.to_string()))?;
    td.validate()?;
    Ok(td)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TdQuery {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_kind: Option<ValueKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thing_type: Option<ThingType>,
}

impl TdQuery {
    pub fn domain(tag: impl Into<String>) -> Self {
        TdQuery {
            domain_tag: Some(tag.into()),
            ..Default::default()
        }
    }

    pub fn value_kind(kind: ValueKind) -> Self {
        TdQuery {
            value_kind: Some(kind),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.domain_tag.is_none() && self.value_kind.is_none() && self.thing_type.is_none()
    }
}

/// True iff every constraint set on `q` holds for `td`. A value-kind constraint
/// is satisfied when any property of the Thing carries that kind. An empty
/// query matches everything.
pub fn matches(td: &ThingDescription, q: &TdQuery) -> bool {
    if let Some(tag) = &q.domain_tag {
        if &td.domain_tag != tag {
            return false;
        }
    }
    if let Some(kind) = q.value_kind {
        if !td.has_value_kind(kind) {
            return false;
        }
    }
    if let Some(tt) = q.thing_type {
        if td.thing_type != tt {
            return false;
        }
    }
    true
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn minimal_td() -> ThingDescription {
        ThingDescription {
            id: "s1".into(),
            title: "t".into(),
            thing_type: ThingType::Sensor,
            domain_tag: "climate".into(),
            properties: vec![PropertyDef {
                name: "temperature".into(),
                value_kind: ValueKind::TemperatureCelsius,
                readable: true,
                writable: false,
                href: "/properties/temperature".into(),
            }],
            actions: vec![],
            base_endpoint: "http://h".into(),
            ttl_seconds: 60,
        }
    }

    #[test]
    fn minimal_round_trip() {
        let td = minimal_td();
        let bytes = serialize_td(&td);
        assert_eq!(parse_td(&bytes).unwrap(), td);
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains(' '));
        assert!(!text.contains('\n'));
        // sorted top-level keys
        let keys = [
            "actions",
            "baseEndpoint",
            "domainTag",
            "id",
            "properties",
            "thingType",
            "title",
            "ttlSeconds",
        ];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\":")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{text}");
    }

    #[test]
    fn properties_keep_declaration_order() {
        let mut td = minimal_td();
        td.properties.push(PropertyDef {
            name: "humidity".into(),
            value_kind: ValueKind::HumidityPercent,
            readable: true,
            writable: false,
            href: "/properties/humidity".into(),
        });
        let text = String::from_utf8(serialize_td(&td)).unwrap();
        assert!(text.find("\"temperature\"").unwrap() < text.find("\"humidity\"").unwrap());
        assert_eq!(parse_td(text.as_bytes()).unwrap(), td);
    }

    #[test]
    fn missing_id_is_reported() {
        let mut v = serde_json::to_value(minimal_td()).unwrap();
        v.as_object_mut().unwrap().remove("id");
        let err = parse_td(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert_eq!(err.field(), Some("id"));
    }

    #[test]
    fn zero_ttl_is_rejected() {
        let mut v = serde_json::to_value(minimal_td()).unwrap();
        v["ttlSeconds"] = 0.into();
        let err = parse_td(&serde_json::to_vec(&v).unwrap()).unwrap_err();
        assert_eq!(err.field(), Some("ttl_seconds"));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(
            parse_td(b"{not json"),
            Err(TdError::MalformedDocument(_))
        ));
        assert!(matches!(parse_td(b"[1,2]"), Err(TdError::MalformedDocument(_))));
    }

    #[test]
    fn empty_id_and_duplicate_property() {
        let mut td = minimal_td();
        td.id.clear();
        assert_eq!(td.validate().unwrap_err().field(), Some("id"));
        let mut td = minimal_td();
        td.properties.push(td.properties[0].clone());
        assert_eq!(td.validate().unwrap_err().field(), Some("properties"));
        let mut td = minimal_td();
        td.properties[0].readable = false;
        assert!(td.validate().is_err());
    }

    #[test]
    fn query_matching() {
        let mut td = minimal_td();
        assert!(matches(&td, &TdQuery::domain("climate")));
        assert!(!matches(&td, &TdQuery::domain("lighting")));
        td.properties.push(PropertyDef {
            name: "humidity".into(),
            value_kind: ValueKind::HumidityPercent,
            readable: true,
            writable: false,
            href: "/properties/humidity".into(),
        });
        assert!(matches(&td, &TdQuery::value_kind(ValueKind::HumidityPercent)));
        assert!(!matches(&td, &TdQuery::value_kind(ValueKind::PowerFraction)));
        let q = TdQuery {
            thing_type: Some(ThingType::Actuator),
            ..TdQuery::domain("climate")
        };
        assert!(!matches(&td, &q));
    }

    fn arb_value_kind() -> impl Strategy<Value = ValueKind> {
        prop::sample::select(ValueKind::ALL.to_vec())
    }

    fn arb_thing_type() -> impl Strategy<Value = ThingType> {
        prop::sample::select(vec![ThingType::Sensor, ThingType::Actuator, ThingType::Software])
    }

    prop_compose! {
        pub fn arb_td()(
            id in "[a-z][a-z0-9_.]{0,12}",
            title in "[ -~]{0,16}",
            thing_type in arb_thing_type(),
            domain_tag in prop::sample::select(vec!["climate", "lighting", "heating", "occupancy"]),
            kinds in prop::collection::btree_set(arb_value_kind(), 0..4),
            writable_mask in any::<u8>(),
            ttl in 1u64..100_000,
            with_action in any::<bool>(),
        ) -> ThingDescription {
            let properties = kinds
                .into_iter()
                .enumerate()
                .map(|(i, k)| {
                    let writable = writable_mask & (1 << i) != 0;
                    PropertyDef {
                        name: k.path_segment().to_string(),
                        value_kind: k,
                        readable: !writable || i % 2 == 0,
                        writable,
                        href: format!("/properties/{}", k.path_segment()),
                    }
                })
                .collect();
            let actions = if with_action {
                vec![ActionDef { name: "set".into(), href: "/actions/set".into(), input: Some(ValueKind::PowerFraction) }]
            } else {
                vec![]
            };
            ThingDescription {
                id, title, thing_type, domain_tag: domain_tag.to_string(), properties, actions,
                base_endpoint: "http://localhost:8080".into(), ttl_seconds: ttl,
            }
        }
    }

    fn arb_query() -> impl Strategy<Value = TdQuery> {
        (
            prop::option::of(prop::sample::select(vec!["climate", "lighting", "heating"])),
            prop::option::of(arb_value_kind()),
            prop::option::of(arb_thing_type()),
        )
            .prop_map(|(d, v, t)| TdQuery {
                domain_tag: d.map(str::to_string),
                value_kind: v,
                thing_type: t,
            })
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(td in arb_td()) {
            let bytes = serialize_td(&td);
            prop_assert_eq!(parse_td(&bytes).unwrap(), td.clone());
            // canonical: re-serializing the parsed value is byte-identical
            prop_assert_eq!(serialize_td(&parse_td(&bytes).unwrap()), bytes);
        }

        #[test]
        fn adding_a_constraint_never_widens(td in arb_td(), q in arb_query(), extra in arb_query()) {
            let tightened = TdQuery {
                domain_tag: q.domain_tag.clone().or(extra.domain_tag),
                value_kind: q.value_kind.or(extra.value_kind),
                thing_type: q.thing_type.or(extra.thing_type),
            };
            if !matches(&td, &q) {
                prop_assert!(!matches(&td, &tightened));
            }
        }
    }
}
