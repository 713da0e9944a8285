use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exporter experience in a product, from its RCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExporterClass {
    New,
    Nascent,
    Experienced,
}

impl ExporterClass {
    pub const ALL: [ExporterClass; 3] = [ExporterClass::New, ExporterClass::Nascent, ExporterClass::Experienced];

    pub fn key(&self) -> &'static str {
        match self {
            ExporterClass::New => "new",
            ExporterClass::Nascent => "nascent",
            ExporterClass::Experienced => "experienced",
        }
    }
}

impl fmt::Display for ExporterClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExporterThresholds {
    /// RCA strictly below this is a new exporter.
    pub new_below: f64,
    /// RCA strictly above this is an experienced exporter.
    pub experienced_above: f64,
}

impl Default for ExporterThresholds {
    fn default() -> Self {
        ExporterThresholds {
            new_below: 0.2,
            experienced_above: 1.0,
        }
    }
}

pub fn classify_exporter(rca: f64) -> Result<ExporterClass> {
    classify_exporter_with(rca, &ExporterThresholds::default())
}

/// New below `new_below`, experienced above `experienced_above`, nascent in
/// the closed interval between.
pub fn classify_exporter_with(rca: f64, thresholds: &ExporterThresholds) -> Result<ExporterClass> {
    if !(rca >= 0.0) {
        return Err(Error::InvalidArgument(format!("RCA must be non-negative, got {rca}")));
    }
    Ok(if rca < thresholds.new_below {
        ExporterClass::New
    } else if rca <= thresholds.experienced_above {
        ExporterClass::Nascent
    } else {
        ExporterClass::Experienced
    })
}

/// Technology class of a product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LallCategory {
    Primary,
    ResourceBased,
    LowTech,
    MediumTech,
    HighTech,
    Excluded,
}

impl LallCategory {
    /// The five categories in order of technological sophistication.
    pub const RANKED: [LallCategory; 5] = [
        LallCategory::Primary,
        LallCategory::ResourceBased,
        LallCategory::LowTech,
        LallCategory::MediumTech,
        LallCategory::HighTech,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            LallCategory::Primary => "PP",
            LallCategory::ResourceBased => "RB",
            LallCategory::LowTech => "LT",
            LallCategory::MediumTech => "MT",
            LallCategory::HighTech => "HT",
            LallCategory::Excluded => "SP",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Some(match code.trim() {
            "PP" => LallCategory::Primary,
            "RB" => LallCategory::ResourceBased,
            "LT" => LallCategory::LowTech,
            "MT" => LallCategory::MediumTech,
            "HT" => LallCategory::HighTech,
            "SP" => LallCategory::Excluded,
            _ => return None,
        })
    }

    /// 1 (primary) to 5 (high tech); `None` for excluded products.
    pub fn rank(&self) -> Option<usize> {
        Self::RANKED.iter().position(|c| c == self).map(|i| i + 1)
    }
}

impl fmt::Display for LallCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// SITC rev. 2 groups treated as special transactions: electric current,
/// cinema film, printed matter, works of art, postal packages, special
/// transactions, zoo animals and pets, non-gold coin, non-monetary gold.
pub const SPECIAL_SITC3: [&str; 9] = ["351", "883", "892", "896", "911", "931", "941", "961", "971"];

#[derive(Debug, Clone, PartialEq)]
struct ConcordanceEntry {
    sitc3: String,
    category: LallCategory,
}

/// HS 4-digit → SITC rev. 2 3-digit → technology category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Concordance {
    entries: HashMap<String, ConcordanceEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub mapped: usize,
    pub excluded: usize,
    pub unmapped: Vec<String>,
}

impl Concordance {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a line; SITC groups on the special-transactions list are always excluded.
    pub fn insert(&mut self, hs4: &str, sitc3: &str, category: LallCategory) -> Result<()> {
        let category = if SPECIAL_SITC3.contains(&sitc3) {
            LallCategory::Excluded
        } else {
            category
        };
        if let Some(existing) = self.entries.get(hs4) {
            if existing.category != category {
                return Err(Error::InvalidArgument(format!(
                    "HS {hs4} maps to both {} and {category}",
                    existing.category
                )));
            }
            return Ok(());
        }
        self.entries.insert(
            hs4.to_string(),
            ConcordanceEntry {
                sitc3: sitc3.to_string(),
                category,
            },
        );
        Ok(())
    }

    pub fn sitc3(&self, hs4: &str) -> Option<&str> {
        self.entries.get(hs4).map(|e| e.sitc3.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn coverage<'a>(&self, products: impl IntoIterator<Item = &'a String>) -> CoverageReport {
        let mut report = CoverageReport::default();
        let mut unmapped = BTreeSet::new();
        for p in products {
            match self.entries.get(p) {
                Some(e) if e.category == LallCategory::Excluded => report.excluded += 1,
                Some(_) => report.mapped += 1,
                None => {
                    unmapped.insert(p.clone());
                }
            }
        }
        report.unmapped = unmapped.into_iter().collect();
        report
    }
}

pub fn map_lall(product: &str, concordance: &Concordance) -> Result<LallCategory> {
    concordance
        .entries
        .get(product)
        .map(|e| e.category)
        .ok_or_else(|| Error::UnmappedProduct(product.to_string()))
}

pub fn load_concordance_csv(path: impl AsRef<Path>) -> Result<Concordance> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_concordance_csv(file, &path.display().to_string())
}

/// Reads `hs4,sitc3,category` with category in {PP, RB, LT, MT, HT, SP}.
pub fn read_concordance_csv<R: Read>(reader: R, source_name: &str) -> Result<Concordance> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Concordance::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        if !rdr
            .read_record(&mut row)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?
        {
            break;
        }
        let (hs4, sitc3, cat) = (
            row.get(0).unwrap_or("").trim(),
            row.get(1).unwrap_or("").trim(),
            row.get(2).unwrap_or("").trim(),
        );
        if !crate::ingest::is_product_code(hs4) {
            return Err(Error::parse(source_name, line, format!("bad HS code `{hs4}`")));
        }
        let category = LallCategory::from_code(cat)
            .ok_or_else(|| Error::parse(source_name, line, format!("unknown category `{cat}`")))?;
        out.insert(hs4, sitc3, category)
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?;
    }
    Ok(out)
}
