//! Streaming extraction of numeric claims from a Wikidata JSON entity dump.
//!
//! Accepts the public dump layout (a JSON array with one entity per line,
//! lines terminated by `,`) as well as plain newline-delimited entities.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::table::{AttributeTable, EntityClass};
use super::Result;

const INSTANCE_OF: &str = "P31";
const HUMAN: &str = "Q5";
const EARTH: &str = "http://www.wikidata.org/entity/Q2";
const ENTITY_PREFIX: &str = "http://www.wikidata.org/entity/";

#[derive(Debug, Clone, Copy)]
enum ClaimKind {
    Year,
    Quantity(&'static [(&'static str, f64)]),
    Latitude,
    Longitude,
}

const AREA_UNITS: &[(&str, f64)] = &[
    ("Q712226", 1.0),              // square kilometre
    ("Q25343", 1e-6),              // square metre
    ("Q35852", 0.01),              // hectare
    ("Q81292", 0.004_046_856_422_4), // acre
    ("Q232291", 2.589_988_110_336), // square mile
];

const LENGTH_UNITS: &[(&str, f64)] = &[
    ("Q11573", 1.0),    // metre
    ("Q3710", 0.3048),  // foot
    ("Q828224", 1000.0), // kilometre
];

const COUNT_UNITS: &[(&str, f64)] = &[("1", 1.0)];

fn claim_spec(attribute: &str) -> Option<(&'static str, ClaimKind)> {
    Some(match attribute {
        "birth_year" => ("P569", ClaimKind::Year),
        "death_year" => ("P570", ClaimKind::Year),
        "work_period_start" => ("P2031", ClaimKind::Year),
        "area" => ("P2046", ClaimKind::Quantity(AREA_UNITS)),
        "elevation" => ("P2044", ClaimKind::Quantity(LENGTH_UNITS)),
        "population" => ("P1082", ClaimKind::Quantity(COUNT_UNITS)),
        "latitude" => ("P625", ClaimKind::Latitude),
        "longitude" => ("P625", ClaimKind::Longitude),
        _ => return None,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub entities_kept: usize,
    pub values: usize,
    pub malformed_records: usize,
    pub unknown_units: usize,
}

enum Extract {
    Value(f64),
    Missing,
    UnknownUnit,
}

/// Picks the preferred-rank statement if any, else the first normal-rank one.
fn best_statement<'a>(claims: &'a Value, property: &str) -> Option<&'a Value> {
    let list = claims.get(property)?.as_array()?;
    let usable = |s: &&Value| {
        s.pointer("/mainsnak/snaktype").and_then(Value::as_str) == Some("value")
            && s.get("rank").and_then(Value::as_str) != Some("deprecated")
    };
    list.iter()
        .filter(usable)
        .find(|s| s.get("rank").and_then(Value::as_str) == Some("preferred"))
        .or_else(|| list.iter().find(usable))
}

/// Calendar year of a Wikidata time string such as `+1879-03-14T00:00:00Z`.
pub fn parse_year(time: &str) -> Option<i64> {
    let (sign, rest) = match time.as_bytes().first()? {
        b'+' => (1, &time[1..]),
        b'-' => (-1, &time[1..]),
        _ => (1, time),
    };
    let digits = rest.split('-').next()?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(sign * digits.parse::<i64>().ok()?)
}

fn extract(claims: &Value, property: &str, kind: ClaimKind) -> Extract {
    let Some(stmt) = best_statement(claims, property) else {
        return Extract::Missing;
    };
    let Some(value) = stmt.pointer("/mainsnak/datavalue/value") else {
        return Extract::Missing;
    };
    match kind {
        ClaimKind::Year => {
            // precision 9 = year; coarser (decade, century) values are not usable
            let precise = value.get("precision").and_then(Value::as_u64).is_none_or(|p| p >= 9);
            match value.get("time").and_then(Value::as_str).and_then(parse_year) {
                Some(y) if precise => Extract::Value(y as f64),
                _ => Extract::Missing,
            }
        }
        ClaimKind::Quantity(units) => {
            let amount = value.get("amount").and_then(Value::as_str).and_then(|a| a.trim_start_matches('+').parse::<f64>().ok());
            let unit = value.get("unit").and_then(Value::as_str).unwrap_or("1");
            let unit = unit.strip_prefix(ENTITY_PREFIX).unwrap_or(unit);
            match (amount, units.iter().find(|(u, _)| *u == unit)) {
                (Some(a), Some((_, factor))) if a.is_finite() => Extract::Value(a * factor),
                (Some(_), None) => Extract::UnknownUnit,
                _ => Extract::Missing,
            }
        }
        ClaimKind::Latitude | ClaimKind::Longitude => {
            let globe = value.get("globe").and_then(Value::as_str).unwrap_or(EARTH);
            if globe != EARTH {
                return Extract::UnknownUnit;
            }
            let key = if matches!(kind, ClaimKind::Latitude) { "latitude" } else { "longitude" };
            value.get(key).and_then(Value::as_f64).map_or(Extract::Missing, Extract::Value)
        }
    }
}

fn belongs_to(entity: &Value, class: EntityClass) -> bool {
    let claims = &entity["claims"];
    match class {
        EntityClass::Human => claims
            .get(INSTANCE_OF)
            .and_then(Value::as_array)
            .is_some_and(|list| {
                list.iter().any(|s| s.pointer("/mainsnak/datavalue/value/id").and_then(Value::as_str) == Some(HUMAN))
            }),
        EntityClass::Geographical => claims.get("P625").is_some(),
        EntityClass::Other => false,
    }
}

/// Streams a dump and collects the configured classes' attributes.
///
/// Malformed lines and claims with unrecognised units are skipped and counted.
pub fn ingest_wikidata_dump<R: BufRead>(reader: R, classes: &[EntityClass]) -> Result<(AttributeTable, IngestReport)> {
    let mut table = AttributeTable::new();
    let mut report = IngestReport::default();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim().trim_end_matches(',');
        if trimmed.is_empty() || trimmed == "[" || trimmed == "]" {
            continue;
        }
        report.records += 1;
        let entity: Value = match serde_json::from_str(trimmed) {
            Ok(v) => v,
            Err(_) => {
                report.malformed_records += 1;
                continue;
            }
        };
        let Some(id) = entity.get("id").and_then(Value::as_str) else {
            report.malformed_records += 1;
            continue;
        };
        let claims = entity.get("claims").cloned().unwrap_or(Value::Null);
        let mut kept = false;
        for &class in classes {
            if !belongs_to(&entity, class) {
                continue;
            }
            for attr in class.attributes() {
                let (property, kind) = claim_spec(attr).expect("registry attribute");
                match extract(&claims, property, kind) {
                    Extract::Value(v) => {
                        table.insert(id, attr, v)?;
                        report.values += 1;
                        kept = true;
                    }
                    Extract::UnknownUnit => report.unknown_units += 1,
                    Extract::Missing => {}
                }
            }
        }
        if kept {
            report.entities_kept += 1;
            if let Some(label) = entity.pointer("/labels/en/value").and_then(Value::as_str) {
                table.set_label(id, label);
            }
        }
    }
    table.fit_transforms();
    Ok((table, report))
}
