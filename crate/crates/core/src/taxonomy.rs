//! Five-rank taxonomy and label-granularity remapping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset_io::{AnnotationSet, Category};

/// Taxonomic rank, ordered from the top (`Class`) down to `Species`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rank {
    Class,
    Order,
    Family,
    Genus,
    Species,
}

/// The ranks categories may be labeled at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelRank {
    Class,
    Order,
    #[default]
    Family,
}

impl From<LabelRank> for Rank {
    fn from(r: LabelRank) -> Rank {
        match r {
            LabelRank::Class => Rank::Class,
            LabelRank::Order => Rank::Order,
            LabelRank::Family => Rank::Family,
        }
    }
}

impl std::str::FromStr for LabelRank {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "class" => Ok(LabelRank::Class),
            "order" => Ok(LabelRank::Order),
            "family" => Ok(LabelRank::Family),
            _ => Err(format!("unknown label rank {s:?} (expected class, order or family)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxon {
    pub id: u32,
    pub name: String,
    pub rank: Rank,
    #[serde(default)]
    pub parent_id: Option<u32>,
}

impl Taxon {
    pub fn to_category(&self) -> Category {
        Category {
            id: self.id,
            name: self.name.clone(),
            rank: self.rank,
            parent_id: self.parent_id,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("duplicate taxon id {0}")]
    DuplicateId(u32),
    #[error("taxon {id} ({name}): parent {parent} does not exist")]
    MissingParent { id: u32, name: String, parent: u32 },
    #[error("taxon {id} ({name}): parent {parent} has rank {parent_rank:?}, not above {rank:?}")]
    RankOrder {
        id: u32,
        name: String,
        parent: u32,
        rank: Rank,
        parent_rank: Rank,
    },
    #[error("unknown taxon {0}")]
    UnknownTaxon(u32),
    #[error("broken taxonomy: taxon {id} ({name}) has no ancestor at rank {rank:?}")]
    NoAncestor { id: u32, name: String, rank: Rank },
    #[error("taxon {id} ({name}) has rank {taxon_rank:?}, below which {rank:?} cannot be requested")]
    RankBelowTaxon {
        id: u32,
        name: String,
        rank: Rank,
        taxon_rank: Rank,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Validated, immutable taxonomy keyed by taxon id.
#[derive(Clone, Debug, Default)]
pub struct TaxonomyTable {
    taxa: BTreeMap<u32, Taxon>,
}

impl TaxonomyTable {
    /// Checks id uniqueness, parent existence and strictly ascending rank
    /// along parent links (which also rules out cycles).
    pub fn new(taxa: Vec<Taxon>) -> Result<Self, TaxonomyError> {
        let mut map = BTreeMap::new();
        for t in taxa {
            let id = t.id;
            if map.insert(id, t).is_some() {
                return Err(TaxonomyError::DuplicateId(id));
            }
        }
        for t in map.values() {
            if let Some(pid) = t.parent_id {
                let parent = map.get(&pid).ok_or_else(|| TaxonomyError::MissingParent {
                    id: t.id,
                    name: t.name.clone(),
                    parent: pid,
                })?;
                if parent.rank >= t.rank {
                    return Err(TaxonomyError::RankOrder {
                        id: t.id,
                        name: t.name.clone(),
                        parent: pid,
                        rank: t.rank,
                        parent_rank: parent.rank,
                    });
                }
            }
        }
        Ok(Self { taxa: map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let taxa: Vec<Taxon> = serde_json::from_slice(&bytes).map_err(|source| TaxonomyError::Json {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(taxa)
    }

    pub fn get(&self, id: u32) -> Option<&Taxon> {
        self.taxa.get(&id)
    }

    pub fn len(&self) -> usize {
        self.taxa.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taxa.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Taxon> {
        self.taxa.values()
    }

    /// Built-in freshwater zooplankton table: 3 classes, 7 orders and 16
    /// families, each family with one genus. Class ids are 1-3, orders
    /// 10-16, families 100-115, genera 200-215 (genus `200 + k` belongs to
    /// family `100 + k`).
    pub fn builtin() -> Self {
        const CLASSES: [&str; 3] = ["Branchiopoda", "Hexanauplia", "Eurotatoria"];
        const ORDERS: [(&str, u32); 7] = [
            ("Diplostraca", 1),
            ("Onychopoda", 1),
            ("Haplopoda", 1),
            ("Calanoida", 2),
            ("Cyclopoida", 2),
            ("Ploima", 3),
            ("Flosculariaceae", 3),
        ];
        const FAMILIES: [(&str, &str, u32); 16] = [
            ("Daphniidae", "Daphnia", 10),
            ("Bosminidae", "Bosmina", 10),
            ("Chydoridae", "Alona", 10),
            ("Sididae", "Diaphanosoma", 10),
            ("Moinidae", "Moina", 10),
            ("Macrothricidae", "Macrothrix", 10),
            ("Polyphemidae", "Polyphemus", 11),
            ("Leptodoridae", "Leptodora", 12),
            ("Diaptomidae", "Eodiaptomus", 13),
            ("Temoridae", "Eurytemora", 13),
            ("Cyclopidae", "Mesocyclops", 14),
            ("Brachionidae", "Keratella", 15),
            ("Asplanchnidae", "Asplanchna", 15),
            ("Synchaetidae", "Polyarthra", 15),
            ("Conochilidae", "Conochilus", 16),
            ("Filiniidae", "Filinia", 16),
        ];
        let taxon = |id, name: &str, rank, parent_id| Taxon {
            id,
            name: name.into(),
            rank,
            parent_id,
        };
        let mut taxa = Vec::new();
        for (i, name) in CLASSES.iter().enumerate() {
            taxa.push(taxon(1 + i as u32, name, Rank::Class, None));
        }
        for (i, (name, class)) in ORDERS.iter().enumerate() {
            taxa.push(taxon(10 + i as u32, name, Rank::Order, Some(*class)));
        }
        for (i, (family, genus, order)) in FAMILIES.iter().enumerate() {
            taxa.push(taxon(100 + i as u32, family, Rank::Family, Some(*order)));
            taxa.push(taxon(200 + i as u32, genus, Rank::Genus, Some(100 + i as u32)));
        }
        Self::new(taxa).expect("built-in taxonomy is consistent")
    }

    /// Walks parent links from `id` up to the taxon at `rank`.
    pub fn ancestor_at(&self, id: u32, rank: LabelRank) -> Result<&Taxon, TaxonomyError> {
        let rank = Rank::from(rank);
        let start = self.get(id).ok_or(TaxonomyError::UnknownTaxon(id))?;
        if start.rank < rank {
            return Err(TaxonomyError::RankBelowTaxon {
                id,
                name: start.name.clone(),
                rank,
                taxon_rank: start.rank,
            });
        }
        let mut cur = start;
        loop {
            if cur.rank == rank {
                return Ok(cur);
            }
            let broken = || TaxonomyError::NoAncestor {
                id,
                name: start.name.clone(),
                rank,
            };
            let next = cur.parent_id.and_then(|p| self.get(p)).ok_or_else(broken)?;
            if next.rank < rank {
                return Err(broken());
            }
            cur = next;
        }
    }
}

/// Rewrites category ids to their ancestors at `rank`. Images, masks, boxes
/// and areas are untouched; the category table becomes the distinct
/// ancestors of the set's categories, sorted by id.
pub fn remap_annotations(
    aset: &AnnotationSet,
    rank: LabelRank,
    table: &TaxonomyTable,
) -> Result<AnnotationSet, TaxonomyError> {
    let mut mapping = BTreeMap::new();
    for c in &aset.categories {
        mapping.insert(c.id, table.ancestor_at(c.id, rank)?);
    }
    for a in &aset.annotations {
        if let std::collections::btree_map::Entry::Vacant(e) = mapping.entry(a.category_id) {
            e.insert(table.ancestor_at(a.category_id, rank)?);
        }
    }
    let mut categories: Vec<Category> = mapping.values().map(|t| t.to_category()).collect();
    categories.sort_by_key(|c| c.id);
    categories.dedup_by_key(|c| c.id);
    let mut out = aset.clone();
    out.categories = categories;
    for a in &mut out.annotations {
        a.category_id = mapping[&a.category_id].id;
    }
    Ok(out)
}
