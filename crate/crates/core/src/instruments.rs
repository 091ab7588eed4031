//! Scoring for the four self-report instruments: LSAS, SAS-A, UCLA Loneliness
//! and the three-item social-attitude Likert set.
//!
//! Scorers are pure functions over plain integer responses. Item counts, ranges
//! and reverse-scored sets come from a versioned catalog so the wording and
//! keying can change without touching code.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LSAS_ITEMS: usize = 24;
pub const LSAS_SUBSCORE_MAX: u8 = 3;
pub const SAS_A_ITEMS: usize = 18;
pub const UCLA_ITEMS: usize = 20;

const DEFAULT_CATALOG: &str = include_str!("../assets/instruments.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instrument {
    Lsas,
    SasA,
    Ucla,
    SocialAttitude,
}

impl Instrument {
    pub const ALL: [Instrument; 4] = [
        Instrument::Lsas,
        Instrument::SasA,
        Instrument::Ucla,
        Instrument::SocialAttitude,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Instrument::Lsas => "lsas",
            Instrument::SasA => "sas_a",
            Instrument::Ucla => "ucla",
            Instrument::SocialAttitude => "social_attitude",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.id() == id)
    }
}

impl fmt::Display for Instrument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstrumentError {
    #[error("{instrument}: expected {expected} items, found {found}")]
    WrongItemCount {
        instrument: Instrument,
        expected: usize,
        found: usize,
    },
    #[error("{instrument}: item {item} has value {value}, allowed {min}..={max}")]
    OutOfRange {
        instrument: Instrument,
        item: usize,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("{instrument}: reverse-scored index {index} is outside {items} items")]
    ReverseIndexOutOfBounds {
        instrument: Instrument,
        index: usize,
        items: usize,
    },
    #[error("instrument catalog: {0}")]
    Catalog(String),
}

fn check_range(
    instrument: Instrument,
    item: usize,
    value: i64,
    min: i64,
    max: i64,
) -> Result<(), InstrumentError> {
    if (min..=max).contains(&value) {
        Ok(())
    } else {
        Err(InstrumentError::OutOfRange {
            instrument,
            item,
            value,
            min,
            max,
        })
    }
}

// ---------------------------------------------------------------------------
// LSAS

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsasItem {
    pub fear: u8,
    pub avoidance: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsasResponse {
    pub items: Vec<LsasItem>,
}

impl LsasResponse {
    pub fn uniform(fear: u8, avoidance: u8) -> Self {
        Self {
            items: vec![LsasItem { fear, avoidance }; LSAS_ITEMS],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LsasBand {
    Subclinical,
    PotentialSad,
    ClinicalSad,
}

impl LsasBand {
    pub fn label(self) -> &'static str {
        match self {
            LsasBand::Subclinical => "subclinical",
            LsasBand::PotentialSad => "potential SAD",
            LsasBand::ClinicalSad => "clinical SAD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsasThresholds {
    pub potential: u32,
    pub clinical: u32,
}

impl Default for LsasThresholds {
    fn default() -> Self {
        Self {
            potential: 30,
            clinical: 60,
        }
    }
}

impl LsasThresholds {
    pub fn band(&self, total: u32) -> LsasBand {
        if total >= self.clinical {
            LsasBand::ClinicalSad
        } else if total >= self.potential {
            LsasBand::PotentialSad
        } else {
            LsasBand::Subclinical
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LsasScore {
    pub fear_sum: u32,
    pub avoidance_sum: u32,
    pub total: u32,
    pub band: LsasBand,
}

pub fn score_lsas(r: &LsasResponse) -> Result<LsasScore, InstrumentError> {
    score_lsas_with(r, &LsasThresholds::default())
}

pub fn score_lsas_with(
    r: &LsasResponse,
    thresholds: &LsasThresholds,
) -> Result<LsasScore, InstrumentError> {
    if r.items.len() != LSAS_ITEMS {
        return Err(InstrumentError::WrongItemCount {
            instrument: Instrument::Lsas,
            expected: LSAS_ITEMS,
            found: r.items.len(),
        });
    }
    let mut fear_sum = 0u32;
    let mut avoidance_sum = 0u32;
    for (i, item) in r.items.iter().enumerate() {
        check_range(Instrument::Lsas, i, item.fear.into(), 0, LSAS_SUBSCORE_MAX.into())?;
        check_range(Instrument::Lsas, i, item.avoidance.into(), 0, LSAS_SUBSCORE_MAX.into())?;
        fear_sum += u32::from(item.fear);
        avoidance_sum += u32::from(item.avoidance);
    }
    let total = fear_sum + avoidance_sum;
    Ok(LsasScore {
        fear_sum,
        avoidance_sum,
        total,
        band: thresholds.band(total),
    })
}

// ---------------------------------------------------------------------------
// SAS-A

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SasAResponse {
    pub items: Vec<u8>,
}

pub fn score_sas_a(r: &SasAResponse) -> Result<u32, InstrumentError> {
    sum_items(Instrument::SasA, &r.items, SAS_A_ITEMS, 1, 5, &BTreeSet::new())
}

// ---------------------------------------------------------------------------
// UCLA

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UclaResponse {
    pub items: Vec<u8>,
    #[serde(default)]
    pub reverse_set: BTreeSet<usize>,
}

/// Reverse-keyed items are mapped `v -> 5 - v` before summing.
pub fn score_ucla(r: &UclaResponse) -> Result<u32, InstrumentError> {
    sum_items(Instrument::Ucla, &r.items, UCLA_ITEMS, 1, 4, &r.reverse_set)
}

fn sum_items(
    instrument: Instrument,
    items: &[u8],
    expected: usize,
    min: u8,
    max: u8,
    reverse: &BTreeSet<usize>,
) -> Result<u32, InstrumentError> {
    if items.len() != expected {
        return Err(InstrumentError::WrongItemCount {
            instrument,
            expected,
            found: items.len(),
        });
    }
    if let Some(&index) = reverse.iter().find(|&&i| i >= expected) {
        return Err(InstrumentError::ReverseIndexOutOfBounds {
            instrument,
            index,
            items: expected,
        });
    }
    let mut total = 0u32;
    for (i, &v) in items.iter().enumerate() {
        check_range(instrument, i, v.into(), min.into(), max.into())?;
        let v = if reverse.contains(&i) { min + max - v } else { v };
        total += u32::from(v);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Social attitude

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocialAttitude {
    pub contravene: u8,
    pub fear: u8,
    pub isolation: u8,
}

pub fn score_social_attitude(r: SocialAttitude) -> Result<SocialAttitude, InstrumentError> {
    for (i, v) in [r.contravene, r.fear, r.isolation].into_iter().enumerate() {
        check_range(Instrument::SocialAttitude, i, v.into(), 1, 7)?;
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// Tagged payloads for storage and transport

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "instrument", rename_all = "snake_case")]
pub enum ScaleResponses {
    Lsas(LsasResponse),
    SasA(SasAResponse),
    Ucla(UclaResponse),
    SocialAttitude(SocialAttitude),
}

impl ScaleResponses {
    pub fn instrument(&self) -> Instrument {
        match self {
            ScaleResponses::Lsas(_) => Instrument::Lsas,
            ScaleResponses::SasA(_) => Instrument::SasA,
            ScaleResponses::Ucla(_) => Instrument::Ucla,
            ScaleResponses::SocialAttitude(_) => Instrument::SocialAttitude,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "instrument", rename_all = "snake_case")]
pub enum ScaleScore {
    Lsas(LsasScore),
    SasA { total: u32 },
    Ucla { total: u32 },
    SocialAttitude(SocialAttitude),
}

// ---------------------------------------------------------------------------
// Catalog

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDefinition {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub item_count: usize,
    pub min: u8,
    pub max: u8,
    #[serde(default)]
    pub reverse: BTreeSet<usize>,
    #[serde(default)]
    pub thresholds: Option<LsasThresholds>,
    #[serde(default)]
    pub items: Vec<String>,
    #[serde(default)]
    pub subscales: Vec<String>,
}

/// Versioned instrument definitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstrumentCatalog {
    pub version: u32,
    pub scales: Vec<ScaleDefinition>,
}

impl Default for InstrumentCatalog {
    fn default() -> Self {
        Self::from_json(DEFAULT_CATALOG).expect("bundled instrument catalog is valid")
    }
}

impl InstrumentCatalog {
    pub fn from_json(text: &str) -> Result<Self, InstrumentError> {
        let catalog: Self =
            serde_json::from_str(text).map_err(|e| InstrumentError::Catalog(e.to_string()))?;
        catalog.check()?;
        Ok(catalog)
    }

    fn check(&self) -> Result<(), InstrumentError> {
        let expected = [
            (Instrument::Lsas, LSAS_ITEMS, 0, 3),
            (Instrument::SasA, SAS_A_ITEMS, 1, 5),
            (Instrument::Ucla, UCLA_ITEMS, 1, 4),
            (Instrument::SocialAttitude, 3, 1, 7),
        ];
        for (instrument, count, min, max) in expected {
            let def = self.get(instrument).ok_or_else(|| {
                InstrumentError::Catalog(format!("missing scale definition `{instrument}`"))
            })?;
            if def.item_count != count || def.min != min || def.max != max {
                return Err(InstrumentError::Catalog(format!(
                    "scale `{instrument}` must have {count} items in {min}..={max}"
                )));
            }
            if let Some(&index) = def.reverse.iter().find(|&&i| i >= count) {
                return Err(InstrumentError::ReverseIndexOutOfBounds {
                    instrument,
                    index,
                    items: count,
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, instrument: Instrument) -> Option<&ScaleDefinition> {
        self.scales.iter().find(|s| s.id == instrument.id())
    }

    pub fn lsas_thresholds(&self) -> LsasThresholds {
        self.get(Instrument::Lsas)
            .and_then(|d| d.thresholds)
            .unwrap_or_default()
    }

    pub fn ucla_reverse_set(&self) -> BTreeSet<usize> {
        self.get(Instrument::Ucla)
            .map(|d| d.reverse.clone())
            .unwrap_or_default()
    }

    /// Scores a tagged payload. UCLA payloads with an empty reverse set pick up
    /// the catalog's configured reverse-keyed items.
    pub fn score(&self, responses: &ScaleResponses) -> Result<ScaleScore, InstrumentError> {
        Ok(match responses {
            ScaleResponses::Lsas(r) => ScaleScore::Lsas(score_lsas_with(r, &self.lsas_thresholds())?),
            ScaleResponses::SasA(r) => ScaleScore::SasA {
                total: self.score_sas_a(r)?,
            },
            ScaleResponses::Ucla(r) => {
                let total = if r.reverse_set.is_empty() {
                    score_ucla(&UclaResponse {
                        items: r.items.clone(),
                        reverse_set: self.ucla_reverse_set(),
                    })?
                } else {
                    score_ucla(r)?
                };
                ScaleScore::Ucla { total }
            }
            ScaleResponses::SocialAttitude(r) => {
                ScaleScore::SocialAttitude(score_social_attitude(*r)?)
            }
        })
    }

    fn score_sas_a(&self, r: &SasAResponse) -> Result<u32, InstrumentError> {
        let reverse = self
            .get(Instrument::SasA)
            .map(|d| d.reverse.clone())
            .unwrap_or_default();
        sum_items(Instrument::SasA, &r.items, SAS_A_ITEMS, 1, 5, &reverse)
    }
}
