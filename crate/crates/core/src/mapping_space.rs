//! Layer-mapping search space and the binary gene codec.
//!
//! A student with `M` layers learns from a teacher with `N` layers through a
//! mapping `(g(1), ..., g(M))`. Every non-last position may be `None` (the
//! student layer gets no layer-wise supervision); the last position always
//! points at a teacher layer. Each position is encoded with `k` bits, where
//! `k` is the smallest integer with `2^k > 2N/M`:
//!
//! * position `m < M`: code `0` is `None`, code `c >= 1` is teacher layer
//!   `Z + c` with `Z = floor((m - 1) N / (2M))`;
//! * position `M`: code `c` is teacher layer `N - 2^k + 1 + c`.
//!
//! Non-`None` entries must be strictly increasing with student depth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on the number of mappings produced by [`enumerate_space`].
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error("invalid architecture: student layers {student} must be in 1..={teacher} (teacher layers)")]
    InvalidArch { teacher: usize, student: usize },
    #[error("architecture ratio 2N/M = {ratio} is too large for a gene codec")]
    RatioTooLarge { ratio: f64 },
    #[error("gene has {found} bits, expected {expected}")]
    GeneLength { expected: usize, found: usize },
    #[error("mapping has {found} entries, expected {expected}")]
    MappingLength { expected: usize, found: usize },
    #[error("invalid mapping: {0}")]
    Invalid(Violation),
    #[error("cannot parse {what}: {reason}")]
    Parse { what: &'static str, reason: String },
    #[error("enumeration exceeded the cap of {cap} mappings")]
    CapExceeded { cap: u64 },
    #[error("the contribution heuristic needs {expected} layer scores, got {found}")]
    MissingScores { expected: usize, found: usize },
}

/// The first rule a mapping breaks. Positions are 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoneAtLast { position: usize },
    OutOfRange { position: usize, value: i64, lo: i64, hi: i64 },
    Crossing { position: usize, value: i64, previous: i64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::NoneAtLast { position } => {
                write!(f, "position {position}: the last entry cannot be None")
            }
            Violation::OutOfRange { position, value, lo, hi } => {
                write!(f, "position {position}: {value} is outside [{lo},{hi}]")
            }
            Violation::Crossing { position, value, previous } if value < previous => {
                write!(f, "position {position}: {value} < previous non-None {previous}")
            }
            Violation::Crossing { position, value, previous } => {
                write!(f, "position {position}: {value} = previous non-None {previous}")
            }
        }
    }
}

/// A (teacher, student) layer-count pair with `1 <= M <= N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchPair {
    pub teacher_layers: usize,
    pub student_layers: usize,
}

impl ArchPair {
    pub fn new(teacher_layers: usize, student_layers: usize) -> Result<Self, MappingError> {
        if student_layers == 0 || student_layers > teacher_layers {
            return Err(MappingError::InvalidArch { teacher: teacher_layers, student: student_layers });
        }
        Ok(Self { teacher_layers, student_layers })
    }
}

/// Admissible teacher layers for one student position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionRange {
    pub lo: i64,
    pub hi: i64,
    pub none_allowed: bool,
    /// Value of code 0 (non-last positions use it only as an offset, since
    /// code 0 means `None` there).
    origin: i64,
}

impl PositionRange {
    pub fn contains(&self, value: i64) -> bool {
        (self.lo..=self.hi).contains(&value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub arch: ArchPair,
    pub bits_per_position: usize,
    pub positions: Vec<PositionRange>,
}

impl SearchSpace {
    pub fn build(arch: ArchPair) -> Result<Self, MappingError> {
        let ArchPair { teacher_layers: n, student_layers: m } = ArchPair::new(arch.teacher_layers, arch.student_layers)?;
        let ratio = 2.0 * n as f64 / m as f64;
        if ratio >= 65536.0 {
            return Err(MappingError::RatioTooLarge { ratio });
        }
        // minimal k with 2^k > 2N/M, i.e. 2^k * M > 2N
        let mut k = 0usize;
        while (1usize << k) * m <= 2 * n {
            k += 1;
        }
        let width = 1i64 << k;
        let n = n as i64;
        let positions = (1..=m)
            .map(|pos| {
                if pos < m {
                    let z = ((pos as i64 - 1) * n) / (2 * m as i64);
                    PositionRange { lo: z + 1, hi: (z + width - 1).min(n), none_allowed: true, origin: z }
                } else {
                    let origin = n - width + 1;
                    PositionRange { lo: origin.max(1), hi: n, none_allowed: false, origin }
                }
            })
            .collect();
        Ok(Self { arch, bits_per_position: k, positions })
    }

    pub fn student_layers(&self) -> usize {
        self.arch.student_layers
    }

    pub fn teacher_layers(&self) -> usize {
        self.arch.teacher_layers
    }

    pub fn gene_len(&self) -> usize {
        self.student_layers() * self.bits_per_position
    }

    /// Number of distinct codes per position, `2^k`.
    pub fn codes_per_position(&self) -> u32 {
        1 << self.bits_per_position
    }

    /// Decodes a single position code. Codes may land outside the admissible
    /// range; validity is checked separately.
    pub fn decode_code(&self, position: usize, code: u32) -> Option<i64> {
        let range = &self.positions[position];
        if range.none_allowed && code == 0 {
            None
        } else {
            Some(range.origin + code as i64)
        }
    }

    /// Inverse of [`decode_code`](Self::decode_code). Returns `None` for
    /// entries that have no code at this position.
    pub fn encode_entry(&self, position: usize, entry: Option<i64>) -> Option<u32> {
        let range = &self.positions[position];
        match entry {
            None if range.none_allowed => Some(0),
            None => None,
            Some(v) => {
                let code = v - range.origin;
                let min_code = if range.none_allowed { 1 } else { 0 };
                (min_code..self.codes_per_position() as i64).contains(&code).then_some(code as u32)
            }
        }
    }
}

/// A decoded layer mapping. `None` entries are rendered as `0`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerMapping {
    entries: Vec<Option<i64>>,
}

impl LayerMapping {
    pub fn new(entries: Vec<Option<i64>>) -> Self {
        Self { entries }
    }

    /// Builds a mapping from the `0`-means-`None` integer notation.
    pub fn from_zero_none(values: &[i64]) -> Self {
        Self { entries: values.iter().map(|&v| (v != 0).then_some(v)).collect() }
    }

    pub fn entries(&self) -> &[Option<i64>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Teacher layer (1-based) supervising student layer `position` (0-based).
    pub fn teacher_layer(&self, position: usize) -> Option<usize> {
        self.entries[position].map(|v| v as usize)
    }

    /// `(student_layer, teacher_layer)` pairs for the supervised positions,
    /// both 1-based.
    pub fn supervised_pairs(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.map(|t| (i + 1, t as usize)))
            .collect()
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<(), MappingError> {
        if self.entries.len() != space.student_layers() {
            return Err(MappingError::MappingLength { expected: space.student_layers(), found: self.entries.len() });
        }
        let mut previous: Option<i64> = None;
        for (i, (entry, range)) in self.entries.iter().zip(&space.positions).enumerate() {
            let position = i + 1;
            let Some(value) = *entry else {
                if !range.none_allowed {
                    return Err(MappingError::Invalid(Violation::NoneAtLast { position }));
                }
                continue;
            };
            if !range.contains(value) {
                return Err(MappingError::Invalid(Violation::OutOfRange { position, value, lo: range.lo, hi: range.hi }));
            }
            if let Some(prev) = previous {
                if value <= prev {
                    return Err(MappingError::Invalid(Violation::Crossing { position, value, previous: prev }));
                }
            }
            previous = Some(value);
        }
        Ok(())
    }

    pub fn is_valid(&self, space: &SearchSpace) -> bool {
        self.validate(space).is_ok()
    }
}

impl fmt::Display for LayerMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", e.unwrap_or(0))?;
        }
        Ok(())
    }
}

impl FromStr for LayerMapping {
    type Err = MappingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().trim_start_matches('(').trim_end_matches(')');
        if s.is_empty() {
            return Err(MappingError::Parse { what: "mapping", reason: "empty string".into() });
        }
        let values = s
            .split(',')
            .enumerate()
            .map(|(i, tok)| {
                let tok = tok.trim();
                if tok.eq_ignore_ascii_case("none") {
                    return Ok(0);
                }
                match tok.parse::<i64>() {
                    Ok(v) if v >= 0 => Ok(v),
                    _ => Err(MappingError::Parse {
                        what: "mapping",
                        reason: format!("position {}: '{tok}' is not a non-negative integer", i + 1),
                    }),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_zero_none(&values))
    }
}

/// A fixed-width binary gene, `k` bits per student position.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gene {
    bits: Vec<bool>,
    group: usize,
}

impl Gene {
    pub fn from_bits(bits: Vec<bool>, group: usize) -> Self {
        assert!(group > 0, "group width must be positive");
        Self { bits, group }
    }

    pub fn zeros(space: &SearchSpace) -> Self {
        Self::from_bits(vec![false; space.gene_len()], space.bits_per_position)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn group_width(&self) -> usize {
        self.group
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Code of position `position` (0-based), most significant bit first.
    pub fn code(&self, position: usize) -> u32 {
        self.bits[position * self.group..(position + 1) * self.group]
            .iter()
            .fold(0, |acc, &b| (acc << 1) | b as u32)
    }

    pub fn set_code(&mut self, position: usize, code: u32) {
        let k = self.group;
        for j in 0..k {
            self.bits[position * k + j] = (code >> (k - 1 - j)) & 1 == 1;
        }
    }

    /// Bit string without group separators, used as a cache key.
    pub fn key(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// Parses a gene written with or without `-` separators. Without
    /// separators the group width must be given by `group`.
    pub fn parse_with_width(s: &str, group: usize) -> Result<Self, MappingError> {
        let bits = s
            .chars()
            .filter(|&c| c != '-')
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(MappingError::Parse { what: "gene", reason: format!("unexpected character '{other}'") }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if group == 0 || bits.len() % group != 0 {
            return Err(MappingError::Parse {
                what: "gene",
                reason: format!("{} bits do not split into groups of {group}", bits.len()),
            });
        }
        Ok(Self { bits, group })
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, chunk) in self.bits.chunks(self.group).enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            for &b in chunk {
                f.write_str(if b { "1" } else { "0" })?;
            }
        }
        Ok(())
    }
}

impl FromStr for Gene {
    type Err = MappingError;

    /// Parses the dash-grouped form, e.g. `000-000-010-101`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let first = s.split('-').next().unwrap_or_default();
        if first.is_empty() || s.split('-').any(|g| g.len() != first.len()) {
            return Err(MappingError::Parse { what: "gene", reason: format!("'{s}' has uneven bit groups") });
        }
        Self::parse_with_width(s, first.len())
    }
}

impl Serialize for Gene {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gene {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn check_len(gene: &Gene, space: &SearchSpace) -> Result<(), MappingError> {
    if gene.len() != space.gene_len() {
        return Err(MappingError::GeneLength { expected: space.gene_len(), found: gene.len() });
    }
    Ok(())
}

/// Decodes a gene without enforcing validity.
pub fn decode(gene: &Gene, space: &SearchSpace) -> Result<LayerMapping, MappingError> {
    check_len(gene, space)?;
    let gene = if gene.group == space.bits_per_position {
        gene.clone()
    } else {
        Gene::from_bits(gene.bits.clone(), space.bits_per_position)
    };
    let entries = (0..space.student_layers()).map(|m| space.decode_code(m, gene.code(m))).collect();
    Ok(LayerMapping::new(entries))
}

pub fn encode(mapping: &LayerMapping, space: &SearchSpace) -> Result<Gene, MappingError> {
    mapping.validate(space)?;
    let mut gene = Gene::zeros(space);
    for (m, &entry) in mapping.entries().iter().enumerate() {
        let code = space
            .encode_entry(m, entry)
            .expect("validated entries always have a code");
        gene.set_code(m, code);
    }
    Ok(gene)
}

pub fn is_valid(gene: &Gene, space: &SearchSpace) -> Result<bool, MappingError> {
    Ok(decode(gene, space)?.is_valid(space))
}

/// Lazily yields every valid mapping in lexicographic gene order.
///
/// After `cap` mappings the iterator yields a single
/// [`MappingError::CapExceeded`] and then stops.
pub fn enumerate_space(space: &SearchSpace, cap: u64) -> SpaceIter<'_> {
    SpaceIter { space, codes: vec![0; space.student_layers()], started: false, done: false, yielded: 0, cap }
}

pub struct SpaceIter<'a> {
    space: &'a SearchSpace,
    codes: Vec<u32>,
    started: bool,
    done: bool,
    yielded: u64,
    cap: u64,
}

impl SpaceIter<'_> {
    fn admissible(&self, depth: usize, code: u32) -> bool {
        let Some(value) = self.space.decode_code(depth, code) else {
            return true;
        };
        if !self.space.positions[depth].contains(value) {
            return false;
        }
        let previous = self.codes[..depth]
            .iter()
            .enumerate()
            .rev()
            .find_map(|(d, &c)| self.space.decode_code(d, c));
        previous.is_none_or(|p| value > p)
    }

    /// Smallest full assignment with `codes[depth] >= start`, keeping the
    /// prefix `codes[..depth]` fixed (and backtracking into it if needed).
    fn seek(&mut self, mut depth: usize, mut start: u32) -> bool {
        let last = self.codes.len() - 1;
        let max = self.space.codes_per_position();
        loop {
            let mut code = start;
            while code < max && !self.admissible(depth, code) {
                code += 1;
            }
            if code < max {
                self.codes[depth] = code;
                if depth == last {
                    return true;
                }
                depth += 1;
                start = 0;
            } else {
                if depth == 0 {
                    return false;
                }
                depth -= 1;
                start = self.codes[depth] + 1;
            }
        }
    }
}

impl Iterator for SpaceIter<'_> {
    type Item = Result<LayerMapping, MappingError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let found = if self.started {
            let last = self.codes.len() - 1;
            self.seek(last, self.codes[last] + 1)
        } else {
            self.started = true;
            self.seek(0, 0)
        };
        if !found {
            self.done = true;
            return None;
        }
        if self.yielded == self.cap {
            self.done = true;
            return Some(Err(MappingError::CapExceeded { cap: self.cap }));
        }
        self.yielded += 1;
        let entries = self.codes.iter().enumerate().map(|(m, &c)| self.space.decode_code(m, c)).collect();
        Some(Ok(LayerMapping::new(entries)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    Uniform,
    LastLayer,
    Contribution,
}

impl FromStr for Heuristic {
    type Err = MappingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "uniform" => Ok(Self::Uniform),
            "last-layer" | "last" => Ok(Self::LastLayer),
            "contribution" => Ok(Self::Contribution),
            other => Err(MappingError::Parse { what: "heuristic", reason: format!("unknown heuristic '{other}'") }),
        }
    }
}

/// Baseline mappings. The result is not forced into the search space; use
/// [`LayerMapping::is_valid`] to flag mappings that fall outside it.
///
/// `layer_scores` are per-teacher-layer mean input/output cosines; lower
/// means the layer transforms its input more and is treated as more
/// important.
pub fn heuristic_mapping(
    strategy: Heuristic,
    arch: ArchPair,
    layer_scores: Option<&[f64]>,
) -> Result<LayerMapping, MappingError> {
    let ArchPair { teacher_layers: n, student_layers: m } = ArchPair::new(arch.teacher_layers, arch.student_layers)?;
    let entries = match strategy {
        // round(i * N / M), ties half-up
        Heuristic::Uniform => (1..=m).map(|i| Some(((2 * i * n + m) / (2 * m)) as i64)).collect(),
        Heuristic::LastLayer => {
            let mut e = vec![None; m];
            e[m - 1] = Some(n as i64);
            e
        }
        Heuristic::Contribution => {
            let scores = layer_scores.unwrap_or_default();
            if scores.len() != n {
                return Err(MappingError::MissingScores { expected: n, found: scores.len() });
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            let mut chosen: Vec<usize> = order[..m].to_vec();
            chosen.sort_unstable();
            chosen.into_iter().map(|l| Some(l as i64 + 1)).collect()
        }
    };
    Ok(LayerMapping::new(entries))
}
