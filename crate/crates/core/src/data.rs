//! Tabular inputs: ratings, category annotations and feature embeddings.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const RATING_MIN: f64 = 0.0;
pub const RATING_MAX: f64 = 100.0;

/// The twelve annotation criteria used for the category-wise error analysis.
pub const CRITERIA: [&str; 12] = [
    "spider in picture",
    "cobweb in picture",
    "number of spiders",
    "subjective distance",
    "environment",
    "texture",
    "eyes",
    "eating prey",
    "subjective size",
    "perspective",
    "color of picture",
    "prominent legs",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatingRecord {
    pub participant_id: String,
    pub image_id: String,
    /// 1-based position within the participant's session.
    pub trial_index: u32,
    pub rating: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsTable {
    pub records: Vec<RatingRecord>,
}

impl RatingsTable {
    pub fn new(records: Vec<RatingRecord>) -> Self {
        RatingsTable { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn participants(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.participant_id.as_str()).collect()
    }

    pub fn images(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.image_id.as_str()).collect()
    }

    /// Ratings grouped per image, in record order.
    pub fn by_image(&self) -> BTreeMap<&str, Vec<f64>> {
        let mut out: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image_id.as_str()).or_default().push(r.rating);
        }
        out
    }

    /// `(image, rating)` pairs grouped per participant, in record order.
    pub fn by_participant(&self) -> BTreeMap<&str, Vec<(&str, f64)>> {
        let mut out: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.participant_id.as_str())
                .or_default()
                .push((r.image_id.as_str(), r.rating));
        }
        out
    }

    /// Drop every record of the listed participants.
    pub fn without_participants(&self, excluded: &BTreeSet<String>) -> RatingsTable {
        RatingsTable::new(
            self.records
                .iter()
                .filter(|r| !excluded.contains(&r.participant_id))
                .cloned()
                .collect(),
        )
    }
}

/// Keep, for every (participant, image) pair, only the record with the
/// smallest trial index. Retained records keep their input order.
pub fn first_trial_filter(table: &RatingsTable) -> RatingsTable {
    let mut first: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, r) in table.records.iter().enumerate() {
        let key = (r.participant_id.as_str(), r.image_id.as_str());
        first
            .entry(key)
            .and_modify(|best| {
                if r.trial_index < table.records[*best].trial_index {
                    *best = i;
                }
            })
            .or_insert(i);
    }
    let keep: HashSet<usize> = first.into_values().collect();
    RatingsTable::new(
        table
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| keep.contains(i))
            .map(|(_, r)| r.clone())
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

/// Result of a lenient ratings parse: every data row ends up in exactly one
/// of `table.records` or `rejected`.
#[derive(Debug, Clone, Default)]
pub struct RatingsLoad {
    pub table: RatingsTable,
    pub rejected: Vec<RejectedRow>,
    pub input_rows: usize,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(headers: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got.len() < expected.len() || got[..expected.len()] != *expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}, found {}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn parse_rating_row(row: &csv::StringRecord) -> std::result::Result<RatingRecord, String> {
    if row.len() != 4 {
        return Err(format!("expected 4 fields, found {}", row.len()));
    }
    let participant_id = row[0].trim().to_string();
    let image_id = row[1].trim().to_string();
    if participant_id.is_empty() || image_id.is_empty() {
        return Err("empty participant_id or image_id".into());
    }
    let trial_index: u32 = row[2]
        .trim()
        .parse()
        .map_err(|_| format!("bad trial_index {:?}", &row[2]))?;
    if trial_index < 1 {
        return Err("trial_index must be >= 1".into());
    }
    let rating: f64 = row[3]
        .trim()
        .parse()
        .map_err(|_| format!("bad rating {:?}", &row[3]))?;
    if !rating.is_finite() || !(RATING_MIN..=RATING_MAX).contains(&rating) {
        return Err(format!("rating {rating} outside [0,100]"));
    }
    Ok(RatingRecord {
        participant_id,
        image_id,
        trial_index,
        rating,
    })
}

/// Parse ratings CSV without failing on bad rows.
pub fn parse_ratings_lenient(reader: impl Read, source: &Path) -> Result<RatingsLoad> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(
        rdr.headers()?,
        &["participant_id", "image_id", "trial_index", "rating"],
        source,
    )?;
    let mut load = RatingsLoad::default();
    let mut seen: HashSet<(String, String, u32)> = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        load.input_rows += 1;
        let parsed = row
            .map_err(|e| e.to_string())
            .and_then(|row| parse_rating_row(&row));
        match parsed {
            Ok(rec) => {
                let key = (rec.participant_id.clone(), rec.image_id.clone(), rec.trial_index);
                if seen.insert(key) {
                    load.table.records.push(rec);
                } else {
                    load.rejected.push(RejectedRow {
                        line,
                        reason: format!(
                            "duplicate (participant, image, trial) = ({}, {}, {})",
                            rec.participant_id, rec.image_id, rec.trial_index
                        ),
                    });
                }
            }
            Err(reason) => load.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok(load)
}

pub fn read_ratings(path: &Path) -> Result<RatingsLoad> {
    parse_ratings_lenient(open(path)?, path)
}

/// Strict loader: the first rejected row becomes an error naming its line.
pub fn load_ratings(path: &Path) -> Result<RatingsTable> {
    let load = read_ratings(path)?;
    if let Some(bad) = load.rejected.first() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: bad.line,
            message: bad.reason.clone(),
        });
    }
    Ok(load.table)
}

pub fn write_ratings(table: &RatingsTable, mut out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["participant_id", "image_id", "trial_index", "rating"])?;
    for r in &table.records {
        w.write_record([
            r.participant_id.as_str(),
            r.image_id.as_str(),
            &r.trial_index.to_string(),
            &crate::report::fmt_f64(r.rating),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<ratings>", e))?;
    Ok(())
}

/// Category labels per criterion and image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryTable {
    /// criterion → image → category
    pub entries: BTreeMap<String, BTreeMap<String, String>>,
}

impl CategoryTable {
    pub fn criteria(&self) -> impl Iterator<Item = &str> {
        // Report in the canonical criterion order.
        CRITERIA
            .iter()
            .copied()
            .filter(|c| self.entries.contains_key(*c))
    }

    pub fn labels(&self, criterion: &str) -> Option<&BTreeMap<String, String>> {
        self.entries.get(criterion)
    }

    pub fn insert(&mut self, image_id: &str, criterion: &str, category: &str) -> Result<()> {
        if !CRITERIA.contains(&criterion) {
            return Err(Error::InvalidInput(format!("unknown criterion {criterion:?}")));
        }
        let prev = self
            .entries
            .entry(criterion.to_string())
            .or_default()
            .insert(image_id.to_string(), category.to_string());
        if prev.is_some() {
            return Err(Error::InvalidInput(format!(
                "image {image_id:?} labelled twice for {criterion:?}"
            )));
        }
        Ok(())
    }

    /// Every image mentioned anywhere must carry a label for every criterion
    /// present in the table.
    pub fn validate(&self) -> Result<()> {
        let images: BTreeSet<&str> = self
            .entries
            .values()
            .flat_map(|m| m.keys().map(String::as_str))
            .collect();
        for (criterion, labels) in &self.entries {
            if let Some(missing) = images.iter().find(|i| !labels.contains_key(**i)) {
                return Err(Error::InvalidInput(format!(
                    "image {missing:?} has no label for criterion {criterion:?}"
                )));
            }
        }
        Ok(())
    }
}

pub fn parse_categories(reader: impl Read, source: &Path) -> Result<CategoryTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    check_header(rdr.headers()?, &["image_id", "criterion", "category"], source)?;
    let mut table = CategoryTable::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let at = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 2,
            message,
        };
        if row.len() != 3 {
            return Err(at(format!("expected 3 fields, found {}", row.len())));
        }
        table
            .insert(row[0].trim(), row[1].trim(), row[2].trim())
            .map_err(|e| at(e.to_string()))?;
    }
    table.validate()?;
    Ok(table)
}

pub fn load_categories(path: &Path) -> Result<CategoryTable> {
    parse_categories(open(path)?, path)
}

pub fn write_categories(table: &CategoryTable, mut out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["image_id", "criterion", "category"])?;
    for criterion in table.criteria() {
        for (image, category) in &table.entries[criterion] {
            w.write_record([image.as_str(), criterion, category.as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<categories>", e))?;
    Ok(())
}

/// Precomputed per-image embeddings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.vectors.get(image_id).map(Vec::as_slice)
    }
}

pub fn parse_features(reader: impl Read, source: &Path) -> Result<FeatureTable> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    let header_ok = headers.get(0).map(str::trim) == Some("image_id")
        && dim >= 1
        && headers
            .iter()
            .skip(1)
            .enumerate()
            .all(|(i, h)| h.trim() == format!("f{i}"));
    if !header_ok {
        return Err(Error::Parse {
            path: source.to_path_buf(),
            line: 1,
            message: "expected header image_id,f0,...,fD-1 with D >= 1".into(),
        });
    }
    let mut vectors = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let at = |message: String| Error::Parse {
            path: source.to_path_buf(),
            line: i + 2,
            message,
        };
        if row.len() != dim + 1 {
            return Err(at(format!("expected {} fields, found {}", dim + 1, row.len())));
        }
        let v: Vec<f64> = row
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| at(format!("bad feature value: {e}")))?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(at("non-finite feature value".into()));
        }
        if vectors.insert(row[0].trim().to_string(), v).is_some() {
            return Err(at(format!("duplicate image {:?}", &row[0])));
        }
    }
    Ok(FeatureTable { dim, vectors })
}

pub fn load_features(path: &Path) -> Result<FeatureTable> {
    parse_features(open(path)?, path)
}

pub fn write_features(table: &FeatureTable, mut out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    let mut header = vec!["image_id".to_string()];
    header.extend((0..table.dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (image, v) in &table.vectors {
        let mut row = vec![image.clone()];
        row.extend(v.iter().map(|x| crate::report::fmt_f64(*x)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}
