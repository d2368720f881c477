//! Entity knowledge base and alias table.
//!
//! KB files are UTF-8 TSV, one entity per line:
//!
//! ```text
//! entity_id \t name \t description \t alias1|alias2|... \t popularity
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Aliases are normalized
//! with [`crate::text::normalize_surface`] and the entity's own name is always
//! added as an alias.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{normalize_surface, tokenize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub entity_id: String,
    pub name: String,
    pub description: String,
    pub aliases: BTreeSet<String>,
    pub popularity: f64,
}

/// Surface form → candidate entities with normalized priors.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    index: HashMap<String, Vec<(String, f64)>>,
    max_ngram: usize,
}

impl AliasTable {
    /// Builds the table from records. Candidates for each surface form are
    /// normalized by popularity; a surface whose candidates all have zero
    /// popularity gets a uniform prior.
    pub fn build(records: &[EntityRecord]) -> Self {
        let mut raw: HashMap<String, Vec<(String, f64)>> = HashMap::new();
        let mut max_ngram = 0;
        for r in records {
            for alias in &r.aliases {
                let n = tokenize(alias).len();
                if n == 0 {
                    continue;
                }
                max_ngram = max_ngram.max(n);
                raw.entry(alias.clone())
                    .or_default()
                    .push((r.entity_id.clone(), r.popularity));
            }
        }
        let mut index = HashMap::with_capacity(raw.len());
        for (surface, mut cands) in raw {
            let total: f64 = cands.iter().map(|c| c.1).sum();
            if total > 0.0 {
                cands.iter_mut().for_each(|c| c.1 /= total);
            } else {
                log::warn!("alias {surface:?} has zero total popularity; using uniform prior");
                let u = 1.0 / cands.len() as f64;
                cands.iter_mut().for_each(|c| c.1 = u);
            }
            sort_candidates(&mut cands);
            index.insert(surface, cands);
        }
        AliasTable { index, max_ngram }
    }

    /// Candidates for a surface form, prior descending then entity id.
    /// Unknown surfaces yield an empty slice.
    pub fn lookup(&self, surface: &str) -> &[(String, f64)] {
        self.index.get(surface).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn max_ngram(&self) -> usize {
        self.max_ngram
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }
}

/// Orders candidates by prior descending, ties by entity id.
pub fn sort_candidates(cands: &mut [(String, f64)]) {
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    records: Vec<EntityRecord>,
    by_id: HashMap<String, usize>,
    aliases: AliasTable,
}

impl KnowledgeBase {
    pub fn from_records(records: Vec<EntityRecord>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.entity_id.is_empty() {
                return Err(Error::invalid(format!("record {i}: empty entity id")));
            }
            if r.name.trim().is_empty() {
                return Err(Error::invalid(format!("{}: empty name", r.entity_id)));
            }
            if !(r.popularity >= 0.0 && r.popularity.is_finite()) {
                return Err(Error::invalid(format!(
                    "{}: popularity must be finite and nonnegative",
                    r.entity_id
                )));
            }
            if by_id.insert(r.entity_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(r.entity_id.clone()));
            }
        }
        let aliases = AliasTable::build(&records);
        Ok(KnowledgeBase {
            records,
            by_id,
            aliases,
        })
    }

    /// Parses KB TSV text. Errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        const WHAT: &str = "kb";
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("expected 5 tab-separated columns, found {}", cols.len()),
                ));
            }
            let entity_id = cols[0].trim().to_string();
            if entity_id.is_empty() {
                return Err(Error::parse(WHAT, lineno, "empty entity id"));
            }
            if let Some(first) = seen.insert(entity_id.clone(), lineno) {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    format!("duplicate entity id {entity_id:?} (first defined on line {first})"),
                ));
            }
            let name = cols[1].to_string();
            if name.trim().is_empty() {
                return Err(Error::parse(WHAT, lineno, "empty name"));
            }
            let popularity: f64 = cols[4]
                .trim()
                .parse()
                .map_err(|_| Error::parse(WHAT, lineno, format!("bad popularity {:?}", cols[4])))?;
            if !(popularity >= 0.0 && popularity.is_finite()) {
                return Err(Error::parse(
                    WHAT,
                    lineno,
                    "popularity must be finite and nonnegative",
                ));
            }
            let mut aliases: BTreeSet<String> = cols[3]
                .split('|')
                .map(normalize_surface)
                .filter(|a| !a.is_empty())
                .collect();
            let own = normalize_surface(&name);
            if !own.is_empty() {
                aliases.insert(own);
            }
            records.push(EntityRecord {
                entity_id,
                name,
                description: cols[2].to_string(),
                aliases,
                popularity,
            });
        }
        Self::from_records(records)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serializes back to KB TSV, in record order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# entity_id\tname\tdescription\taliases\tpopularity\n");
        for r in &self.records {
            let aliases: Vec<&str> = r.aliases.iter().map(String::as_str).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.entity_id,
                r.name,
                r.description,
                aliases.join("|"),
                r.popularity
            ));
        }
        out
    }

    pub fn get(&self, entity_id: &str) -> Option<&EntityRecord> {
        self.by_id.get(entity_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[EntityRecord] {
        &self.records
    }

    pub fn aliases(&self) -> &AliasTable {
        &self.aliases
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, surface: &str) -> &[(String, f64)] {
        self.aliases.lookup(surface)
    }

    /// Text representation of an entity: `"name, description"`, or just the
    /// name when the description is empty.
    pub fn enrich(&self, entity_id: &str) -> Result<String> {
        let r = self
            .get(entity_id)
            .ok_or_else(|| Error::UnknownEntity(entity_id.to_string()))?;
        Ok(if r.description.is_empty() {
            r.name.clone()
        } else {
            format!("{}, {}", r.name, r.description)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_APPLES: &str = "\
# comment
Q312\tApple Inc.\tAmerican technology company\tapple|apple computer\t300
Q89\tapple\tfruit of the apple tree\tapple\t100
Q90\tParis\t\tparis\t100
";

    #[test]
    fn single_candidate_prior_is_one() {
        let kb = KnowledgeBase::parse("Q90\tParis\t\tparis\t100\n").unwrap();
        assert_eq!(kb.lookup("paris"), &[("Q90".to_string(), 1.0)]);
    }

    #[test]
    fn shared_alias_priors_are_proportional() {
        let kb = KnowledgeBase::parse(TWO_APPLES).unwrap();
        let c = kb.lookup("apple");
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].0, "Q312");
        assert!((c[0].1 - 0.75).abs() < 1e-12);
        assert_eq!(c[1].0, "Q89");
        assert!((c[1].1 - 0.25).abs() < 1e-12);
        assert!(kb.lookup("zzzz").is_empty());
        assert_eq!(kb.aliases().max_ngram(), 2);
    }

    #[test]
    fn ties_break_by_entity_id() {
        let kb = KnowledgeBase::parse("Qb\tB\t\tx\t5\nQa\tA\t\tx\t5\n").unwrap();
        let ids: Vec<&str> = kb.lookup("x").iter().map(|c| c.0.as_str()).collect();
        assert_eq!(ids, vec!["Qa", "Qb"]);
    }

    #[test]
    fn zero_popularity_falls_back_to_uniform() {
        let kb = KnowledgeBase::parse("Q1\tA\t\tx\t0\nQ2\tB\t\tx\t0\nQ3\tC\t\tx\t0\n").unwrap();
        for (_, p) in kb.lookup("x") {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_id_is_hard_error() {
        let err = KnowledgeBase::parse("Q1\tA\t\ta\t1\nQ1\tB\t\tb\t1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("\"Q1\""), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = KnowledgeBase::parse("# c\nQ1\tA\t\ta\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = KnowledgeBase::parse("Q1\tA\t\ta\t-3\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(KnowledgeBase::parse("Q1\t \t\ta\t1\n").is_err());
        assert!(KnowledgeBase::parse("Q1\tA\t\ta\tNaN\n").is_err());
    }

    #[test]
    fn name_is_always_an_alias() {
        let kb = KnowledgeBase::parse("Q1\tHonda Civic\tcar\t\t1\n").unwrap();
        assert_eq!(kb.lookup("honda civic")[0].0, "Q1");
    }

    #[test]
    fn enrich_formats() {
        let kb = KnowledgeBase::parse(
            "Q83363\tjeans\ttrousers made from denim\tjeans\t1\nQ2\tsolo\t\tsolo\t1\n",
        )
        .unwrap();
        assert_eq!(
            kb.enrich("Q83363").unwrap(),
            "jeans, trousers made from denim"
        );
        assert_eq!(kb.enrich("Q2").unwrap(), "solo");
        assert!(matches!(kb.enrich("Q404"), Err(Error::UnknownEntity(_))));
    }

    fn record_strategy() -> impl Strategy<Value = (String, String, Vec<String>, u32)> {
        (
            "[A-Za-z][A-Za-z ]{0,10}",
            "[a-z ,]{0,20}",
            proptest::collection::vec("[a-c]{1,2}( [a-c]{1,2})?", 0..4),
            0u32..50,
        )
    }

    proptest! {
        #[test]
        fn priors_sum_to_one_and_lookup_is_stable(
            rows in proptest::collection::vec(record_strategy(), 1..12)
        ) {
            let mut text = String::new();
            for (i, (name, desc, aliases, pop)) in rows.iter().enumerate() {
                text.push_str(&format!("Q{i}\t{name}\t{desc}\t{}\t{pop}\n", aliases.join("|")));
            }
            let kb = KnowledgeBase::parse(&text).unwrap();
            let again = KnowledgeBase::parse(&text).unwrap();
            for s in kb.aliases().surfaces() {
                let total: f64 = kb.lookup(s).iter().map(|c| c.1).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert_eq!(kb.lookup(s), again.lookup(s));
            }
            for (i, (name, desc, _, _)) in rows.iter().enumerate() {
                let r = kb.get(&format!("Q{i}")).unwrap();
                prop_assert_eq!(&r.name, name);
                prop_assert_eq!(&r.description, desc);
            }
            let reparsed = KnowledgeBase::parse(&kb.to_tsv()).unwrap();
            prop_assert_eq!(reparsed.records(), kb.records());
        }
    }
}
