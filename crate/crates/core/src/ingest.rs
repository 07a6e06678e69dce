//! MovieLens-style rating files, contiguous index remapping and k-fold splits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::observed::ObservedMatrix;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatingRecord {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
    pub timestamp: i64,
}

/// Line grammar of a rating file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingFormat {
    /// `user::item::rating::timestamp` (MovieLens 1M / 10M `ratings.dat`).
    DoubleColon,
    /// CSV with header `userId,movieId,rating,timestamp` (MovieLens 20M `ratings.csv`).
    CommaHeader,
}

impl FromStr for RatingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "double_colon" | "double-colon" => Ok(Self::DoubleColon),
            "comma_header" | "comma-header" => Ok(Self::CommaHeader),
            other => Err(Error::usage(format!(
                "unknown rating format {other:?} (expected double_colon or comma_header)"
            ))),
        }
    }
}

impl RatingFormat {
    /// `DoubleColon` if the first line contains `::`, otherwise `CommaHeader`.
    pub fn detect(first_line: &str) -> Self {
        if first_line.contains("::") {
            Self::DoubleColon
        } else {
            Self::CommaHeader
        }
    }

    pub fn detect_file(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut first = String::new();
        BufReader::new(file)
            .read_line(&mut first)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self::detect(&first))
    }
}

/// Declared set of legal rating values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingSet {
    /// {1, 2, 3, 4, 5}
    Integer1To5,
    /// {0.5, 1, ..., 5}
    HalfStep0_5To5,
}

impl RatingSet {
    pub fn contains(self, rating: f64) -> bool {
        match self {
            Self::Integer1To5 => (1.0..=5.0).contains(&rating) && rating.fract() == 0.0,
            Self::HalfStep0_5To5 => (0.5..=5.0).contains(&rating) && (rating * 2.0).fract() == 0.0,
        }
    }

    /// First record whose rating is outside the set, reported by position.
    pub fn validate(self, records: &[RatingRecord]) -> Result<()> {
        match records.iter().position(|r| !self.contains(r.rating)) {
            Some(k) => Err(Error::data(
                None,
                format!("record {k}: rating {} outside {self:?}", records[k].rating),
            )),
            None => Ok(()),
        }
    }
}

pub fn parse_ratings(path: &Path, format: RatingFormat) -> Result<Vec<RatingRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings_from(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_ratings_from<R: BufRead>(reader: R, format: RatingFormat) -> Result<Vec<RatingRecord>> {
    match format {
        RatingFormat::DoubleColon => parse_double_colon(reader),
        RatingFormat::CommaHeader => parse_comma_header(reader),
    }
}

fn field<T: FromStr>(tok: Option<&str>, name: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::data(Some(line), format!("missing {name}")))?;
    tok.trim()
        .parse()
        .map_err(|_| Error::data(Some(line), format!("malformed {name} {tok:?}")))
}

fn parse_double_colon<R: BufRead>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<ratings>", e))?;
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split("::");
        let record = RatingRecord {
            user: field(parts.next(), "user id", lineno)?,
            item: field(parts.next(), "item id", lineno)?,
            rating: field(parts.next(), "rating", lineno)?,
            timestamp: field(parts.next(), "timestamp", lineno)?,
        };
        if parts.next().is_some() {
            return Err(Error::data(Some(lineno), "more than four fields"));
        }
        if !record.rating.is_finite() {
            return Err(Error::data(Some(lineno), "non-finite rating"));
        }
        out.push(record);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CsvRow {
    #[serde(rename = "userId")]
    user: u64,
    #[serde(rename = "movieId")]
    item: u64,
    rating: f64,
    timestamp: i64,
}

const CSV_HEADER: [&str; 4] = ["userId", "movieId", "rating", "timestamp"];

fn parse_comma_header<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_error(e)),
    };
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    if headers.iter().map(str::trim).ne(CSV_HEADER) {
        return Err(Error::data(
            Some(1),
            format!("expected header {}, got {:?}", CSV_HEADER.join(","), headers),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(csv_error)?;
        if !row.rating.is_finite() {
            return Err(Error::data(None, "non-finite rating"));
        }
        out.push(RatingRecord {
            user: row.user,
            item: row.item,
            rating: row.rating,
            timestamp: row.timestamp,
        });
    }
    Ok(out)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize);
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Csv(e),
        _ => Error::data(line, e.to_string()),
    }
}

/// Whitespace-separated `row col value` lines with zero-based indices.
pub fn read_triples(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let t = (
            field(parts.next(), "row", k + 1)?,
            field(parts.next(), "col", k + 1)?,
            field(parts.next(), "value", k + 1)?,
        );
        if parts.next().is_some() {
            return Err(Error::data(Some(k + 1), "more than three fields"));
        }
        out.push(t);
    }
    Ok(out)
}

/// Bijection between raw ids and dense row/column indices, assigned in
/// ascending raw-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMap {
    users: Vec<u64>,
    items: Vec<u64>,
    user_rows: HashMap<u64, usize>,
    item_cols: HashMap<u64, usize>,
}

impl IndexMap {
    pub fn from_records(records: &[RatingRecord]) -> Self {
        let mut users: Vec<u64> = records.iter().map(|r| r.user).collect();
        let mut items: Vec<u64> = records.iter().map(|r| r.item).collect();
        users.sort_unstable();
        users.dedup();
        items.sort_unstable();
        items.dedup();
        let user_rows = users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let item_cols = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        Self {
            users,
            items,
            user_rows,
            item_cols,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.users.len()
    }

    pub fn n_cols(&self) -> usize {
        self.items.len()
    }

    pub fn row(&self, user: u64) -> Option<usize> {
        self.user_rows.get(&user).copied()
    }

    pub fn col(&self, item: u64) -> Option<usize> {
        self.item_cols.get(&item).copied()
    }

    pub fn user(&self, row: usize) -> u64 {
        self.users[row]
    }

    pub fn item(&self, col: usize) -> u64 {
        self.items[col]
    }

    pub fn triple(&self, r: &RatingRecord) -> Result<(usize, usize, f64)> {
        match (self.row(r.user), self.col(r.item)) {
            (Some(row), Some(col)) => Ok((row, col, r.rating)),
            _ => Err(Error::data(
                None,
                format!("user {} / item {} not in the index", r.user, r.item),
            )),
        }
    }

    /// Observed matrix over the full index range for the selected records.
    pub fn observed(&self, records: &[RatingRecord], select: &[usize]) -> Result<ObservedMatrix> {
        let triples = select
            .iter()
            .map(|&k| self.triple(&records[k]))
            .collect::<Result<Vec<_>>>()?;
        ObservedMatrix::from_triples(self.n_rows(), self.n_cols(), triples)
    }
}

/// Seeded partition of `0..records.len()` into `k` folds whose sizes differ by at most one.
pub fn kfold_split<T>(records: &[T], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::usage(format!("k must be at least 2, got {k}")));
    }
    if k > records.len() {
        return Err(Error::usage(format!(
            "k = {k} exceeds the number of records ({})",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut folds = vec![Vec::with_capacity(records.len() / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn double_colon_line() {
        let recs = parse_ratings_from("1::1193::5::978300760\n".as_bytes(), RatingFormat::DoubleColon).unwrap();
        assert_eq!(
            recs,
            vec![RatingRecord { user: 1, item: 1193, rating: 5.0, timestamp: 978300760 }]
        );
    }

    #[test]
    fn comma_header_file() {
        let text = "userId,movieId,rating,timestamp\n1,2,3.5,1112486027\n1,29,0.5,1112484676\n";
        let recs = parse_ratings_from(text.as_bytes(), RatingFormat::CommaHeader).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].rating, 0.5);
        assert_eq!(recs[1].item, 29);
    }

    #[test]
    fn empty_files() {
        assert!(parse_ratings_from(&b""[..], RatingFormat::DoubleColon).unwrap().is_empty());
        assert!(parse_ratings_from(&b""[..], RatingFormat::CommaHeader).unwrap().is_empty());
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let text = "1::2::3::4\n1::x::3::4\n";
        match parse_ratings_from(text.as_bytes(), RatingFormat::DoubleColon) {
            Err(Error::Data { line: Some(2), .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = "userId,movieId,rating,timestamp\n1,2,3.5,1\n1,2\n";
        match parse_ratings_from(text.as_bytes(), RatingFormat::CommaHeader) {
            Err(Error::Data { line: Some(3), .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = "user,movie,rating,timestamp\n";
        assert!(matches!(
            parse_ratings_from(text.as_bytes(), RatingFormat::CommaHeader),
            Err(Error::Data { line: Some(1), .. })
        ));
    }

    #[test]
    fn rating_sets() {
        assert!(RatingSet::Integer1To5.contains(5.0));
        assert!(!RatingSet::Integer1To5.contains(0.5));
        assert!(!RatingSet::Integer1To5.contains(3.5));
        assert!(RatingSet::HalfStep0_5To5.contains(0.5));
        assert!(RatingSet::HalfStep0_5To5.contains(3.5));
        assert!(!RatingSet::HalfStep0_5To5.contains(0.0));
        assert!(!RatingSet::HalfStep0_5To5.contains(5.5));
    }

    #[test]
    fn format_detection() {
        assert_eq!(RatingFormat::detect("1::1193::5::978300760"), RatingFormat::DoubleColon);
        assert_eq!(RatingFormat::detect("userId,movieId,rating,timestamp"), RatingFormat::CommaHeader);
    }

    #[test]
    fn ten_records_ten_folds() {
        let recs = vec![0u8; 10];
        let folds = kfold_split(&recs, 10, 1).unwrap();
        assert!(folds.iter().all(|f| f.len() == 1));
        assert!(matches!(kfold_split(&recs, 11, 1), Err(Error::Usage(_))));
        assert!(matches!(kfold_split(&recs, 1, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn same_seed_same_partition() {
        let recs = vec![0u8; 97];
        assert_eq!(kfold_split(&recs, 10, 5).unwrap(), kfold_split(&recs, 10, 5).unwrap());
        assert_ne!(kfold_split(&recs, 10, 5).unwrap(), kfold_split(&recs, 10, 6).unwrap());
    }

    #[test]
    fn index_map_round_trip() {
        let recs: Vec<RatingRecord> = [(10, 7), (3, 7), (10, 900), (55, 2)]
            .iter()
            .map(|&(user, item)| RatingRecord { user, item, rating: 3.0, timestamp: 0 })
            .collect();
        let map = IndexMap::from_records(&recs);
        assert_eq!((map.n_rows(), map.n_cols()), (3, 3));
        for r in &recs {
            let (row, col, _) = map.triple(r).unwrap();
            assert_eq!((map.user(row), map.item(col)), (r.user, r.item));
        }
    }

    proptest! {
        #[test]
        fn folds_partition_the_records(n in 2usize..400, k in 2usize..20, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let recs = vec![(); n];
            let folds = kfold_split(&recs, k, seed).unwrap();
            prop_assert_eq!(folds.len(), k);
            let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut all: Vec<usize> = folds.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
