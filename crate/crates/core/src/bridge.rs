//! Legacy-system bridge.
//!
//! Stands in for a home-automation database and message broker: time-series
//! exports are ingested from CSV (`ts,entity_id,domain,value`), every entity
//! becomes a Thing in the directory, history is served with optional
//! resampling, and actuator write-backs are appended to a JSONL command log.

use crate::registry::{Registry, RegistryError};
use crate::td::{ActionDef, PropertyDef, ThingDescription, ThingType, ValueKind};
use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

pub const CSV_HEADER: [&str; 4] = ["ts", "entity_id", "domain", "value"];
pub const DEFAULT_TTL_SECONDS: u64 = 120;

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error("malformed row at line {0}: {1}")]
    MalformedRow(usize, String),
    #[error("unparseable timestamp at line {0}")]
    UnparseableTimestamp(usize),
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("invalid command payload: {0}")]
    InvalidPayload(String),
    #[error("query window is empty (from > to)")]
    EmptyWindow,
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn parse_ts(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .ok()
        .map(|t| t.with_timezone(&Utc))
}

pub fn format_ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

mod ts_format {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_ts(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeriesPoint {
    #[serde(with = "ts_format")]
    pub ts: DateTime<Utc>,
    pub entity_id: String,
    pub domain_tag: String,
    pub value: f64,
}

/// Value kind implied by a bridge domain column.
pub fn value_kind_for_domain(domain: &str) -> ValueKind {
    match domain {
        "climate" | "temperature" => ValueKind::TemperatureCelsius,
        "humidity" => ValueKind::HumidityPercent,
        "occupancy" | "presence" => ValueKind::OccupancyCount,
        "heating" | "power" => ValueKind::PowerFraction,
        _ => ValueKind::GenericNumber,
    }
}

/// Thing Description for a bridged entity: id = entity id, one property at
/// `/properties/<kind>`, and a `command` action for power actuators.
pub fn entity_td(entity_id: &str, domain: &str, base_url: &str) -> ThingDescription {
    let kind = value_kind_for_domain(domain);
    let actuator = kind == ValueKind::PowerFraction;
    let actions = if actuator {
        vec![ActionDef {
            name: "command".into(),
            href: "/command".into(),
            input: Some(ValueKind::PowerFraction),
        }]
    } else {
        vec![]
    };
    ThingDescription {
        id: entity_id.to_string(),
        title: entity_id.to_string(),
        thing_type: if actuator {
            ThingType::Actuator
        } else {
            ThingType::Sensor
        },
        domain_tag: domain.to_string(),
        properties: vec![PropertyDef {
            name: kind.path_segment().to_string(),
            value_kind: kind,
            readable: true,
            writable: actuator,
            href: format!("/properties/{}", kind.path_segment()),
        }],
        actions,
        base_endpoint: format!("{}/bridge/{}", base_url.trim_end_matches('/'), entity_id),
        ttl_seconds: DEFAULT_TTL_SECONDS,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct EntitySeries {
    domain: String,
    points: BTreeMap<DateTime<Utc>, f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestReport {
    /// Entities present in the ingested file, sorted.
    pub entities: Vec<String>,
    /// Entities the store had not seen before this ingest.
    pub new_entities: Vec<String>,
    /// Distinct (entity, ts) points contained in the file.
    pub points_loaded: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeriesStore {
    series: BTreeMap<String, EntitySeries>,
}

impl SeriesStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ingest_csv(&mut self, path: impl AsRef<Path>) -> Result<IngestReport, BridgeError> {
        self.ingest_reader(File::open(path)?)
    }

    pub fn ingest_reader<R: Read>(&mut self, reader: R) -> Result<IngestReport, BridgeError> {
        let rows = parse_csv(reader)?;
        let mut file_points: BTreeMap<(String, DateTime<Utc>), (String, f64)> = BTreeMap::new();
        for p in rows {
            // last occurrence wins
            file_points.insert((p.entity_id, p.ts), (p.domain_tag, p.value));
        }
        let mut entities: Vec<String> = file_points.keys().map(|(e, _)| e.clone()).collect();
        entities.dedup();
        let new_entities: Vec<String> = entities
            .iter()
            .filter(|e| !self.series.contains_key(*e))
            .cloned()
            .collect();
        let points_loaded = file_points.len();
        for ((entity, ts), (domain, value)) in file_points {
            let s = self.series.entry(entity).or_default();
            s.domain = domain;
            s.points.insert(ts, value);
        }
        Ok(IngestReport {
            entities,
            new_entities,
            points_loaded,
        })
    }

    pub fn entities(&self) -> impl Iterator<Item = (&str, &str)> {
        self.series
            .iter()
            .map(|(id, s)| (id.as_str(), s.domain.as_str()))
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.series.contains_key(entity_id)
    }

    pub fn len(&self, entity_id: &str) -> usize {
        self.series.get(entity_id).map_or(0, |s| s.points.len())
    }

    pub fn total_points(&self) -> usize {
        self.series.values().map(|s| s.points.len()).sum()
    }

    /// Time span covered by an entity.
    pub fn span(&self, entity_id: &str) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let s = self.series.get(entity_id)?;
        Some((*s.points.keys().next()?, *s.points.keys().next_back()?))
    }

    /// Points in `[from, to]`. With `resample_minutes`, values are averaged per
    /// epoch-aligned bucket stamped at the bucket start; empty buckets repeat
    /// the previous bucket's value (or the last point before `from`).
    pub fn read_series(
        &self,
        entity_id: &str,
        from: DateTime<Utc>,
        to: DateTime<Utc>,
        resample_minutes: Option<u32>,
    ) -> Result<Vec<SeriesPoint>, BridgeError> {
        let s = self
            .series
            .get(entity_id)
            .ok_or_else(|| BridgeError::UnknownEntity(entity_id.to_string()))?;
        if from > to {
            return Err(BridgeError::EmptyWindow);
        }
        let point = |ts: DateTime<Utc>, value: f64| SeriesPoint {
            ts,
            entity_id: entity_id.to_string(),
            domain_tag: s.domain.clone(),
            value,
        };
        let Some(minutes) = resample_minutes.filter(|m| *m > 0) else {
            return Ok(s
                .points
                .range(from..=to)
                .map(|(ts, v)| point(*ts, *v))
                .collect());
        };
        let width = i64::from(minutes) * 60;
        let bucket_of = |t: DateTime<Utc>| t.timestamp().div_euclid(width) * width;
        let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for (ts, v) in s.points.range(from..=to) {
            let b = sums.entry(bucket_of(*ts)).or_insert((0.0, 0));
            b.0 += v;
            b.1 += 1;
        }
        let mut last = s.points.range(..from).next_back().map(|(_, v)| *v);
        let mut out = Vec::new();
        let mut b = bucket_of(from);
        let end = bucket_of(to);
        while b <= end {
            let value = match sums.get(&b) {
                Some((sum, n)) => Some(sum / *n as f64),
                None => last,
            };
            if let Some(v) = value {
                out.push(point(Utc.timestamp_opt(b, 0).unwrap(), v));
                last = Some(v);
            }
            b += width;
        }
        Ok(out)
    }

    /// Every stored point in bridge CSV order (entity, then time).
    pub fn all_points(&self) -> Vec<SeriesPoint> {
        self.series
            .iter()
            .flat_map(|(id, s)| {
                s.points.iter().map(move |(ts, v)| SeriesPoint {
                    ts: *ts,
                    entity_id: id.clone(),
                    domain_tag: s.domain.clone(),
                    value: *v,
                })
            })
            .collect()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), BridgeError> {
        let mut f = std::io::BufWriter::new(File::create(path)?);
        write_csv(&mut f, &self.all_points())?;
        f.flush()?;
        Ok(())
    }

    /// Registers (or refreshes) the Thing of every stored entity.
    pub fn register_all(&self, registry: &mut Registry, base_url: &str) -> Result<usize, BridgeError> {
        let mut n = 0;
        for (id, domain) in self.entities() {
            registry.register(entity_td(id, domain, base_url))?;
            n += 1;
        }
        Ok(n)
    }

    /// Ingest, then register a Thing for every entity that appeared in the file.
    pub fn ingest_and_register<R: Read>(
        &mut self,
        reader: R,
        registry: &mut Registry,
        base_url: &str,
    ) -> Result<IngestReport, BridgeError> {
        let report = self.ingest_reader(reader)?;
        for id in &report.entities {
            let domain = &self.series[id].domain;
            registry.register(entity_td(id, domain, base_url))?;
        }
        Ok(report)
    }
}

fn parse_csv<R: Read>(reader: R) -> Result<Vec<SeriesPoint>, BridgeError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let Some(header) = records.next() else {
        return Ok(Vec::new());
    };
    let header = header?;
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(BridgeError::MalformedRow(
            0,
            format!("expected header `{}`", CSV_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| BridgeError::MalformedRow(line, e.to_string()))?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 4 {
            return Err(BridgeError::MalformedRow(
                line,
                format!("expected 4 columns, found {}", rec.len()),
            ));
        }
        let ts = parse_ts(&rec[0]).ok_or(BridgeError::UnparseableTimestamp(line))?;
        if rec[1].is_empty() || rec[2].is_empty() {
            return Err(BridgeError::MalformedRow(line, "empty entity or domain".into()));
        }
        let value: f64 = rec[3]
            .parse()
            .map_err(|_| BridgeError::MalformedRow(line, format!("bad value `{}`", &rec[3])))?;
        if !value.is_finite() {
            return Err(BridgeError::MalformedRow(line, "non-finite value".into()));
        }
        out.push(SeriesPoint {
            ts,
            entity_id: rec[1].to_string(),
            domain_tag: rec[2].to_string(),
            value,
        });
    }
    Ok(out)
}

/// Writes points in the bridge CSV format, header included.
pub fn write_csv<W: Write>(w: W, points: &[SeriesPoint]) -> Result<(), BridgeError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CSV_HEADER)?;
    for p in points {
        wtr.write_record([
            format_ts(p.ts),
            p.entity_id.clone(),
            p.domain_tag.clone(),
            p.value.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    #[serde(with = "ts_format")]
    pub ts: DateTime<Utc>,
    pub topic: String,
    pub payload: Value,
}

impl CommandRecord {
    pub fn power(ts: DateTime<Utc>, entity_id: &str, power_fraction: f64) -> Self {
        CommandRecord {
            ts,
            topic: format!("homeassistant/{entity_id}/set"),
            payload: serde_json::json!({ "entity_id": entity_id, "power_fraction": power_fraction }),
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        let obj = self
            .payload
            .as_object()
            .ok_or_else(|| BridgeError::InvalidPayload("payload must be an object".into()))?;
        if !obj.get("entity_id").is_some_and(Value::is_string) {
            return Err(BridgeError::InvalidPayload("missing entity_id".into()));
        }
        let p = obj
            .get("power_fraction")
            .and_then(Value::as_f64)
            .ok_or_else(|| BridgeError::InvalidPayload("missing power_fraction".into()))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(BridgeError::InvalidPayload(format!(
                "power_fraction {p} outside [0, 1]"
            )));
        }
        if self.topic.is_empty() {
            return Err(BridgeError::InvalidPayload("empty topic".into()));
        }
        Ok(())
    }
}

/// Append-only JSONL log of actuator commands. Offsets are line indices.
#[derive(Debug)]
pub struct CommandLog {
    path: Option<PathBuf>,
    file: Option<File>,
    len: u64,
    memory: Vec<CommandRecord>,
}

impl CommandLog {
    pub fn in_memory() -> Self {
        CommandLog {
            path: None,
            file: None,
            len: 0,
            memory: Vec::new(),
        }
    }

    /// Opens (or creates) a log file, continuing after any existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, BridgeError> {
        let path = path.as_ref().to_path_buf();
        let len = if path.exists() {
            Self::replay(&path)?.len() as u64
        } else {
            0
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(CommandLog {
            path: Some(path),
            file: Some(file),
            len,
            memory: Vec::new(),
        })
    }

    pub fn publish(&mut self, rec: &CommandRecord) -> Result<u64, BridgeError> {
        rec.validate()?;
        let offset = self.len;
        match &mut self.file {
            Some(f) => {
                let mut line = serde_json::to_vec(rec)?;
                line.push(b'\n');
                f.write_all(&line)?;
            }
            None => self.memory.push(rec.clone()),
        }
        self.len += 1;
        Ok(offset)
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> Result<Vec<CommandRecord>, BridgeError> {
        match &self.path {
            Some(p) => Self::replay(p),
            None => Ok(self.memory.clone()),
        }
    }

    pub fn replay(path: impl AsRef<Path>) -> Result<Vec<CommandRecord>, BridgeError> {
        let reader = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}

/// The first `n` points of a regular grid starting at `start`.
pub fn grid(start: DateTime<Utc>, step_minutes: i64, n: usize) -> impl Iterator<Item = DateTime<Utc>> {
    (0..n as i64).map(move |k| start + Duration::minutes(step_minutes * k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::SimClock;
    use crate::td::{serialize_td, TdQuery};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn t(s: &str) -> DateTime<Utc> {
        parse_ts(s).unwrap()
    }

    #[test]
    fn empty_file_loads_nothing() {
        let mut store = SeriesStore::new();
        let r = store.ingest_reader("".as_bytes()).unwrap();
        assert!(r.entities.is_empty());
        assert_eq!(r.points_loaded, 0);
        let r = store
            .ingest_reader("ts,entity_id,domain,value\n".as_bytes())
            .unwrap();
        assert_eq!(r.points_loaded, 0);
    }

    #[test]
    fn duplicate_timestamp_last_write_wins() {
        let csv = "ts,entity_id,domain,value\n\
                   2022-11-07T00:00:00Z,climate.x,climate,18.0\n\
                   2022-11-07T00:15:00Z,climate.x,climate,18.5\n\
                   2022-11-07T00:00:00Z,climate.x,climate,17.0\n";
        let mut store = SeriesStore::new();
        let r = store.ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(r.entities, ["climate.x"]);
        assert_eq!(r.points_loaded, 2);
        assert_eq!(store.len("climate.x"), 2);
        let pts = store
            .read_series("climate.x", t("2022-11-07T00:00:00Z"), t("2022-11-07T00:00:00Z"), None)
            .unwrap();
        assert_eq!(pts[0].value, 17.0);
    }

    #[test]
    fn bad_rows() {
        let mut store = SeriesStore::new();
        let err = store
            .ingest_reader("ts,entity_id,domain,value\nnot-a-date,climate.x,climate,18.0\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, BridgeError::UnparseableTimestamp(1)));
        let err = store
            .ingest_reader(
                "ts,entity_id,domain,value\n2022-11-07T00:00:00Z,climate.x,climate,18\n2022-11-07T00:15:00Z,climate.x\n"
                    .as_bytes(),
            )
            .unwrap_err();
        assert!(matches!(err, BridgeError::MalformedRow(2, _)));
        let err = store
            .ingest_reader("ts,entity_id,domain,value\n2022-11-07T00:00:00Z,c,climate,abc\n".as_bytes())
            .unwrap_err();
        assert!(matches!(err, BridgeError::MalformedRow(1, _)));
        let err = store.ingest_reader("a,b,c,d\n".as_bytes()).unwrap_err();
        assert!(matches!(err, BridgeError::MalformedRow(0, _)));
    }

    #[test]
    fn window_and_resample() {
        let csv = "ts,entity_id,domain,value\n\
                   2022-11-07T00:00:00Z,climate.x,climate,18.0\n\
                   2022-11-07T00:05:00Z,climate.x,climate,19.0\n\
                   2022-11-07T00:15:00Z,climate.x,climate,20.0\n\
                   2022-11-07T01:00:00Z,climate.x,climate,21.0\n";
        let mut store = SeriesStore::new();
        store.ingest_reader(csv.as_bytes()).unwrap();
        let from = t("2022-11-07T00:00:00Z");
        let raw = store
            .read_series("climate.x", from, t("2022-11-07T00:15:00Z"), None)
            .unwrap();
        assert_eq!(raw.len(), 3);
        let one = store
            .read_series("climate.x", from, t("2022-11-07T00:05:00Z"), Some(15))
            .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].value, 18.5);
        assert_eq!(one[0].ts, from);
        let full = store
            .read_series("climate.x", from, t("2022-11-07T01:00:00Z"), Some(15))
            .unwrap();
        let vals: Vec<f64> = full.iter().map(|p| p.value).collect();
        // 00:30 and 00:45 are empty and carry 00:15 forward
        assert_eq!(vals, [18.5, 20.0, 20.0, 20.0, 21.0]);
        assert!(matches!(
            store.read_series("nope", from, from, None),
            Err(BridgeError::UnknownEntity(_))
        ));
    }

    #[test]
    fn ingest_registers_things() {
        let clock = SimClock::at_epoch();
        let mut reg = Registry::new(Arc::new(clock));
        let csv = "ts,entity_id,domain,value\n\
                   2022-11-07T00:00:00Z,climate.bedroom,climate,18.0\n\
                   2022-11-07T00:00:00Z,heating.bedroom,heating,0.5\n";
        let mut store = SeriesStore::new();
        store
            .ingest_and_register(csv.as_bytes(), &mut reg, "http://localhost:8080")
            .unwrap();
        let climate = reg.query(&TdQuery::domain("climate"));
        assert_eq!(climate.len(), 1);
        assert_eq!(climate[0].id, "climate.bedroom");
        assert_eq!(reg.query(&TdQuery::domain("heating"))[0].thing_type, ThingType::Actuator);
        // idempotent
        store
            .ingest_and_register(csv.as_bytes(), &mut reg, "http://localhost:8080")
            .unwrap();
        assert_eq!(reg.latest_seq(), 2);
    }

    #[test]
    fn bridged_td_href() {
        let td = entity_td("climate.bedroom", "climate", "http://h");
        let text = String::from_utf8(serialize_td(&td)).unwrap();
        assert!(text.contains("\"href\":\"/properties/temperature\""), "{text}");
    }

    #[test]
    fn command_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("commands.jsonl");
        let mut log = CommandLog::open(&path).unwrap();
        let ts = t("2022-11-07T00:00:00Z");
        assert_eq!(log.publish(&CommandRecord::power(ts, "heating.bedroom", 0.5)).unwrap(), 0);
        assert_eq!(log.publish(&CommandRecord::power(ts, "heating.bedroom", 1.0)).unwrap(), 1);
        assert!(matches!(
            log.publish(&CommandRecord::power(ts, "heating.bedroom", 1.5)),
            Err(BridgeError::InvalidPayload(_))
        ));
        drop(log);
        let mut log = CommandLog::open(&path).unwrap();
        assert_eq!(log.publish(&CommandRecord::power(ts, "heating.bedroom", 0.0)).unwrap(), 2);
        let replay = CommandLog::replay(&path).unwrap();
        assert_eq!(replay.len(), 3);
        assert_eq!(replay[1].payload["power_fraction"], 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let start = t("2022-11-07T00:00:00Z");
        let points: Vec<SeriesPoint> = grid(start, 15, 50)
            .enumerate()
            .map(|(i, ts)| SeriesPoint {
                ts,
                entity_id: "climate.x".into(),
                domain_tag: "climate".into(),
                value: 15.0 + (i as f64 * 0.37).sin() / 3.0,
            })
            .collect();
        let mut buf = Vec::new();
        write_csv(&mut buf, &points).unwrap();
        let mut store = SeriesStore::new();
        store.ingest_reader(buf.as_slice()).unwrap();
        assert_eq!(store.all_points(), points);
    }

    proptest! {
        #[test]
        fn read_series_is_sorted_and_bounded(
            offsets in prop::collection::vec(0i64..5000, 1..60),
            a in 0i64..5000, b in 0i64..5000, resample in prop::option::of(1u32..60),
        ) {
            let start = t("2022-11-07T00:00:00Z");
            let mut csv = String::from("ts,entity_id,domain,value\n");
            for (i, m) in offsets.iter().enumerate() {
                csv.push_str(&format!("{},e,climate,{}\n", format_ts(start + Duration::minutes(*m)), i));
            }
            let mut store = SeriesStore::new();
            store.ingest_reader(csv.as_bytes()).unwrap();
            let snapshot = store.clone();
            store.ingest_reader(csv.as_bytes()).unwrap();
            prop_assert_eq!(&snapshot, &store);

            let (lo, hi) = (a.min(b), a.max(b));
            let (from, to) = (start + Duration::minutes(lo), start + Duration::minutes(hi));
            let pts = store.read_series("e", from, to, resample).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[0].ts < w[1].ts));
            for p in &pts {
                match resample {
                    None => prop_assert!(p.ts >= from && p.ts <= to),
                    Some(m) => prop_assert!(p.ts + Duration::minutes(m as i64) > from && p.ts <= to),
                }
            }
        }
    }
}
