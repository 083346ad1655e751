//! Link patterns, pattern spaces and the observed-count data model.
//!
//! A link pattern records which of the `n` sampled sites named a person: bit
//! `i` is set when the person is linked to sampled site `i` (0-based). Persons
//! found inside sampled site `l` cannot be linked to their own site, so their
//! patterns live in the reduced space where bit `l` is always zero. Both kinds
//! are stored as full `n`-bit masks.
//!
//! [`SampleData`] holds only pre-aggregated counts. Counts of the all-zero
//! pattern outside the initial sample are never observed and never stored.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Largest site count for which full pattern spaces are enumerated.
pub const MAX_ENUMERATION_SITES: usize = 20;

/// Largest site count representable by a pattern mask.
pub const MAX_SITES: usize = 64;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct OutcomePattern {
    bits: u64,
    n: u8,
}

impl OutcomePattern {
    pub fn new(bits: u64, n: usize) -> Result<Self> {
        if n == 0 || n > MAX_SITES {
            return Err(Error::InvalidPattern(format!("site count {n} outside 1..={MAX_SITES}")));
        }
        if n < 64 && bits >> n != 0 {
            return Err(Error::InvalidPattern(format!(
                "mask {bits:#b} does not fit in {n} sites"
            )));
        }
        Ok(Self { bits, n: n as u8 })
    }

    /// The never-linked pattern.
    pub fn zero(n: usize) -> Self {
        assert!((1..=MAX_SITES).contains(&n), "site count out of range");
        Self { bits: 0, n: n as u8 }
    }

    #[inline]
    pub fn bits(self) -> u64 {
        self.bits
    }

    #[inline]
    pub fn sites(self) -> usize {
        self.n as usize
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.bits == 0
    }

    /// Whether the person is linked to site `i`.
    #[inline]
    pub fn linked(self, i: usize) -> bool {
        (self.bits >> i) & 1 == 1
    }

    #[inline]
    pub fn count_links(self) -> u32 {
        self.bits.count_ones()
    }
}

impl fmt::Display for OutcomePattern {
    /// Character `i` is `'1'` iff bit `i` is set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.sites() {
            f.write_str(if self.linked(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for OutcomePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s.len();
        let mut bits = 0u64;
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits |= 1 << i,
                _ => return Err(Error::InvalidPattern(format!("pattern string {s:?} contains {c:?}"))),
            }
        }
        Self::new(bits, n)
    }
}

impl Serialize for OutcomePattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OutcomePattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Enumerates the pattern space in ascending mask order.
///
/// With `excluded_site = Some(l)` only masks with bit `l` clear are returned.
/// The zero pattern is always included.
pub fn enumerate_patterns(n: usize, excluded_site: Option<usize>) -> Result<Vec<OutcomePattern>> {
    if n == 0 {
        return Err(Error::InvalidPattern("site count must be at least 1".into()));
    }
    if n > MAX_ENUMERATION_SITES {
        return Err(Error::PatternSpaceTooLarge {
            n,
            max: MAX_ENUMERATION_SITES,
        });
    }
    if let Some(l) = excluded_site {
        if l >= n {
            return Err(Error::InvalidPattern(format!(
                "excluded site {l} out of range for {n} sites"
            )));
        }
    }
    let total = 1u64 << n;
    let patterns = (0..total)
        .filter(|bits| excluded_site.is_none_or(|l| (bits >> l) & 1 == 0))
        .map(|bits| OutcomePattern { bits, n: n as u8 })
        .collect();
    Ok(patterns)
}

pub type PatternCounts = BTreeMap<OutcomePattern, u64>;

/// Observed sufficient statistics of one link-tracing sample.
///
/// Totals are always recomputed from the count maps. Zero-valued entries are
/// dropped on construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleData {
    n: usize,
    frame_size: usize,
    site_sizes: Vec<u64>,
    between1: PatternCounts,
    within: Vec<PatternCounts>,
    between2: PatternCounts,
    m: u64,
    r1: u64,
    r2: u64,
    within_totals: Vec<u64>,
}

impl SampleData {
    pub fn new(
        n: usize,
        frame_size: usize,
        site_sizes: Vec<u64>,
        between1: PatternCounts,
        within: Vec<PatternCounts>,
        between2: PatternCounts,
    ) -> Result<Self> {
        if n == 0 || n > MAX_SITES {
            return Err(Error::InvariantViolation(format!(
                "site count {n} outside 1..={MAX_SITES}"
            )));
        }
        if n > frame_size {
            return Err(Error::InvariantViolation(format!(
                "sampled sites {n} exceed frame size {frame_size}"
            )));
        }
        if site_sizes.len() != n {
            return Err(Error::InvariantViolation(format!(
                "{} site sizes given for {n} sites",
                site_sizes.len()
            )));
        }
        if within.len() != n {
            return Err(Error::InvariantViolation(format!(
                "{} within-site tables given for {n} sites",
                within.len()
            )));
        }

        let clean = |map: PatternCounts, label: &str| -> Result<PatternCounts> {
            let mut out = PatternCounts::new();
            for (x, c) in map {
                if x.sites() != n {
                    return Err(Error::InvariantViolation(format!(
                        "{label}: pattern {x} has {} sites, expected {n}",
                        x.sites()
                    )));
                }
                if x.is_zero() {
                    return Err(Error::InvariantViolation(format!(
                        "{label}: the zero pattern is unobservable and must not appear"
                    )));
                }
                if c > 0 {
                    out.insert(x, c);
                }
            }
            Ok(out)
        };

        let between1 = clean(between1, "between1")?;
        let between2 = clean(between2, "between2")?;
        let mut cleaned_within = Vec::with_capacity(n);
        for (l, map) in within.into_iter().enumerate() {
            let map = clean(map, &format!("within[{l}]"))?;
            if let Some(x) = map.keys().find(|x| x.linked(l)) {
                return Err(Error::InvariantViolation(format!(
                    "within[{l}]: pattern {x} links site {l} to itself"
                )));
            }
            cleaned_within.push(map);
        }

        let within_totals: Vec<u64> = cleaned_within.iter().map(|m| m.values().sum()).collect();
        for (l, (&tot, &size)) in within_totals.iter().zip(&site_sizes).enumerate() {
            if tot > size {
                return Err(Error::InvariantViolation(format!(
                    "within[{l}]: {tot} linked persons exceed site size {size}"
                )));
            }
        }
        if n == frame_size && !between1.is_empty() {
            return Err(Error::InvariantViolation(
                "every frame site is sampled, so no frame-covered person lies outside the initial sample".into(),
            ));
        }

        let m = site_sizes.iter().sum();
        let r1 = between1.values().sum();
        let r2 = between2.values().sum();
        Ok(Self {
            n,
            frame_size,
            site_sizes,
            between1,
            within: cleaned_within,
            between2,
            m,
            r1,
            r2,
            within_totals,
        })
    }

    /// Sampled-site count `n`.
    pub fn sites(&self) -> usize {
        self.n
    }

    /// Frame size `N`.
    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    /// Sampling fraction `n / N`.
    pub fn sampling_fraction(&self) -> f64 {
        self.n as f64 / self.frame_size as f64
    }

    pub fn site_sizes(&self) -> &[u64] {
        &self.site_sizes
    }

    pub fn between1(&self) -> &PatternCounts {
        &self.between1
    }

    pub fn within(&self, site: usize) -> &PatternCounts {
        &self.within[site]
    }

    pub fn between2(&self) -> &PatternCounts {
        &self.between2
    }

    /// Size `m` of the initial sample.
    pub fn m(&self) -> u64 {
        self.m
    }

    /// Linked persons outside the initial sample in the covered portion.
    pub fn r1(&self) -> u64 {
        self.r1
    }

    /// Linked persons in the uncovered portion.
    pub fn r2(&self) -> u64 {
        self.r2
    }

    /// Persons in site `l` linked to at least one other sampled site.
    pub fn within_total(&self, site: usize) -> u64 {
        self.within_totals[site]
    }

    /// Persons in site `l` linked to no other sampled site.
    pub fn within_zero(&self, site: usize) -> u64 {
        self.site_sizes[site] - self.within_totals[site]
    }

    pub fn has_within_links(&self) -> bool {
        self.within_totals.iter().any(|&t| t > 0)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SampleFile = serde_json::from_str(text)?;
        file.into_data()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&SampleFile::from(self))?)
    }
}

/// Loads a sample-data file.
pub fn load_sample(path: impl AsRef<Path>) -> Result<SampleData> {
    SampleData::load(path)
}

pub const SAMPLE_SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SAMPLE_SCHEMA_VERSION
}

#[derive(Serialize, Deserialize)]
struct CountEntry {
    pattern: String,
    count: u64,
}

/// On-disk layout of a sample.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFile {
    #[serde(default = "default_schema_version")]
    schema_version: u32,
    n: usize,
    #[serde(rename = "N")]
    frame_size: usize,
    m: Vec<u64>,
    #[serde(default)]
    between1: Vec<CountEntry>,
    #[serde(default)]
    within: Vec<Vec<CountEntry>>,
    #[serde(default)]
    between2: Vec<CountEntry>,
}

fn entries_to_map(entries: Vec<CountEntry>, n: usize, label: &str) -> Result<PatternCounts> {
    let mut map = PatternCounts::new();
    for e in entries {
        if e.pattern.len() != n {
            return Err(Error::InvariantViolation(format!(
                "{label}: pattern {:?} has length {}, expected {n}",
                e.pattern,
                e.pattern.len()
            )));
        }
        let x: OutcomePattern = e.pattern.parse()?;
        if map.insert(x, e.count).is_some() {
            return Err(Error::InvariantViolation(format!("{label}: duplicate pattern {x}")));
        }
    }
    Ok(map)
}

fn map_to_entries(map: &PatternCounts) -> Vec<CountEntry> {
    map.iter()
        .map(|(x, &count)| CountEntry {
            pattern: x.to_string(),
            count,
        })
        .collect()
}

impl SampleFile {
    fn into_data(self) -> Result<SampleData> {
        if self.schema_version != SAMPLE_SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported sample schema_version {}",
                self.schema_version
            )));
        }
        let n = self.n;
        let mut within_entries = self.within;
        if within_entries.is_empty() {
            within_entries = (0..n).map(|_| Vec::new()).collect();
        }
        let within = within_entries
            .into_iter()
            .enumerate()
            .map(|(l, e)| entries_to_map(e, n, &format!("within[{l}]")))
            .collect::<Result<Vec<_>>>()?;
        SampleData::new(
            n,
            self.frame_size,
            self.m,
            entries_to_map(self.between1, n, "between1")?,
            within,
            entries_to_map(self.between2, n, "between2")?,
        )
    }
}

impl From<&SampleData> for SampleFile {
    fn from(d: &SampleData) -> Self {
        Self {
            schema_version: SAMPLE_SCHEMA_VERSION,
            n: d.n,
            frame_size: d.frame_size,
            m: d.site_sizes.clone(),
            between1: map_to_entries(&d.between1),
            within: d.within.iter().map(map_to_entries).collect(),
            between2: map_to_entries(&d.between2),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> OutcomePattern {
        s.parse().unwrap()
    }

    #[test]
    fn enumerate_single_site() {
        let all = enumerate_patterns(1, None).unwrap();
        assert_eq!(all.iter().map(|x| x.bits()).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn enumerate_with_exclusion() {
        let pats = enumerate_patterns(2, Some(0)).unwrap();
        assert_eq!(pats.iter().map(|x| x.bits()).collect::<Vec<_>>(), vec![0b00, 0b10]);
    }

    #[test]
    fn enumerate_three_sites_counts_links() {
        // 3 bits over 8 masks: each bit set in exactly 4 masks.
        let pats = enumerate_patterns(3, None).unwrap();
        assert_eq!(pats.len(), 8);
        let links: u32 = pats.iter().map(|x| x.count_links()).sum();
        assert_eq!(links, 12);
    }

    #[test]
    fn enumeration_guard() {
        assert!(matches!(
            enumerate_patterns(21, None),
            Err(Error::PatternSpaceTooLarge { n: 21, max: 20 })
        ));
        assert!(enumerate_patterns(0, None).is_err());
        assert!(enumerate_patterns(3, Some(3)).is_err());
    }

    #[test]
    fn pattern_string_is_site_ordered() {
        let x = p("100");
        assert_eq!(x.bits(), 0b001);
        assert!(x.linked(0));
        assert_eq!(x.to_string(), "100");
        assert!("10a".parse::<OutcomePattern>().is_err());
    }

    #[test]
    fn totals_are_recomputed() {
        let mut b1 = PatternCounts::new();
        b1.insert(p("10"), 3);
        b1.insert(p("11"), 2);
        b1.insert(p("01"), 0);
        let mut w0 = PatternCounts::new();
        w0.insert(p("01"), 1);
        let d = SampleData::new(
            2,
            5,
            vec![3, 4],
            b1,
            vec![w0, PatternCounts::new()],
            PatternCounts::new(),
        )
        .unwrap();
        assert_eq!(d.m(), 7);
        assert_eq!(d.r1(), 5);
        assert_eq!(d.r2(), 0);
        assert_eq!(d.within_total(0), 1);
        assert_eq!(d.within_zero(0), 2);
        assert_eq!(d.between1().len(), 2, "zero entries dropped");
    }

    #[test]
    fn own_site_link_rejected() {
        let mut w0 = PatternCounts::new();
        w0.insert(p("10"), 1);
        let err = SampleData::new(
            2,
            5,
            vec![3, 4],
            PatternCounts::new(),
            vec![w0, PatternCounts::new()],
            PatternCounts::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn within_total_bounded_by_site_size() {
        let mut w0 = PatternCounts::new();
        w0.insert(p("01"), 4);
        let err = SampleData::new(
            2,
            5,
            vec![3, 4],
            PatternCounts::new(),
            vec![w0, PatternCounts::new()],
            PatternCounts::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }

    #[test]
    fn zero_pattern_rejected() {
        let mut b2 = PatternCounts::new();
        b2.insert(p("00"), 4);
        assert!(SampleData::new(
            2,
            5,
            vec![3, 4],
            PatternCounts::new(),
            vec![PatternCounts::new(); 2],
            b2
        )
        .is_err());
    }

    #[test]
    fn full_frame_has_no_outside_persons() {
        let mut b1 = PatternCounts::new();
        b1.insert(p("10"), 1);
        assert!(SampleData::new(
            2,
            2,
            vec![3, 4],
            b1,
            vec![PatternCounts::new(); 2],
            PatternCounts::new()
        )
        .is_err());
    }
}
